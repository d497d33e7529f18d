#pragma once

// Residual-token cross-entropy, soft cumulative predictions and the
// hierarchical consistency term.

#include <optional>
#include <vector>

#include "alignvar/codec.hpp"
#include "alignvar/tensor.hpp"

namespace avar {

// Per-scale targets flattened sample-major: targets[k] has B * H_k * W_k entries.
std::vector<std::vector<int>> stack_targets(std::span<const std::vector<TokenMap>> per_sample, std::size_t scales);

template <typename T>
struct CeTerms {
  nd::Tensor<T> mean;            // per-token mean over every block; the optimized value
  double sum = 0.0;              // -sum log p over every token of the batch
  std::vector<double> per_scale; // per-token mean of each block
  std::size_t tokens = 0;
};

// scale_logits[k]: [B * H_k * W_k, V]; targets[k] laid out the same way.
template <typename T>
CeTerms<T> ce_loss(std::span<const nd::Tensor<T>> scale_logits, std::span<const std::vector<int>> targets);

struct HccOptions {
  // Contributions of the coarser scales m < k enter u^k detached.
  bool stop_gradient = false;
};

// u^k = sum_{m<=k} Up_{S_m -> S_k}(probs_m * codebook) for every k < probs.size();
// probs[m]: [B * H_m * W_m, V], rows summing to one within 1e-4.
template <typename T>
std::vector<nd::Tensor<T>> cumulative_predictions(std::span<const nd::Tensor<T>> probs, const nd::Tensor<T>& codebook,
                                                  const ScaleSchedule& schedule, std::size_t batch,
                                                  const HccOptions& opts = {});
// u^k alone, [B * H_k * W_k, C].
template <typename T>
nd::Tensor<T> cumulative_prediction(std::span<const nd::Tensor<T>> probs, const nd::Tensor<T>& codebook,
                                    const ScaleSchedule& schedule, std::size_t batch, std::size_t k);

// Codebook rows of u_gt^k for every sample: [B * H_k * W_k, C].
template <typename T>
nd::Tensor<T> embed_targets(std::span<const std::vector<TokenMap>> per_sample, std::size_t k,
                            const nd::Tensor<T>& codebook);

template <typename T>
struct HccTerms {
  nd::Tensor<T> value;            // sum over scales, mean over the batch
  std::vector<double> per_scale;
};

// sum_k ||u_pred^k - target^k||^2 / (C * H_k * W_k), averaged over the batch.
// With `pixel_basis` ([C, P], the transposed decoder) both sides are mapped
// to patch pixels first and normalized by P * H_k * W_k.
template <typename T>
HccTerms<T> hcc_loss(std::span<const nd::Tensor<T>> u_pred, std::span<const nd::Tensor<T>> targets,
                     const ScaleSchedule& schedule, std::size_t batch,
                     const std::optional<nd::Tensor<T>>& pixel_basis = std::nullopt);

struct LossBreakdown {
  double ce = 0.0;
  double hcc = 0.0;
  double total = 0.0;
  double lambda = 1.0;
  double ce_sum = 0.0;
  std::vector<double> per_scale_ce;
  std::vector<double> per_scale_hcc;
};

// total = ce + lambda * hcc; lambda < 0 is rejected.
LossBreakdown total_loss(double ce, double hcc, double lambda);

template <typename T>
nd::Tensor<T> total_loss(const nd::Tensor<T>& ce, const nd::Tensor<T>& hcc, double lambda);

// Rows [sample * H * W, (sample + 1) * H * W) of a position-major feature tensor.
template <typename T>
LatentMap latent_of(const nd::Tensor<T>& features, std::size_t sample, Extent extent);

}  // namespace avar
