#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "alignvar/tensor.hpp"

namespace avar::nd {

// Post-softmax attention of one sequence (the first of the batch), one
// row-major T x T matrix per head.
struct AttentionCapture {
  std::size_t tokens = 0;
  std::vector<std::vector<double>> heads;
};

// Query-key score evaluations performed by the dense attention kernel.
struct AttentionCounter {
  std::uint64_t score_pairs = 0;  // summed over heads and sequences
  std::uint64_t score_macs = 0;   // score_pairs * head_dim
};

// Multi-head attention over a batch of equal-layout sequences.
//   qkv:     [batch*T, 3*d], columns laid out as q | k | v, heads split d.
//   offsets: block boundaries, offsets.front() == 0, offsets.back() == T.
// A query in block k sees keys in blocks 0..k (its own block included).
// Scores are computed densely over all T x T pairs and masked afterwards, so
// masked probabilities are exactly zero.
template <typename T>
Tensor<T> block_causal_attention(const Tensor<T>& qkv, std::size_t batch, std::size_t heads,
                                 std::span<const std::size_t> offsets,
                                 AttentionCapture* capture = nullptr,
                                 AttentionCounter* counter = nullptr);

}  // namespace avar::nd
