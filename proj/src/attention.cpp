#include "alignvar/attention.hpp"

#include <Eigen/Core>

#include <cmath>
#include <limits>

namespace avar::nd {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// End (exclusive) of the visible key range for every query position.
std::vector<std::size_t> visible_limits(std::span<const std::size_t> offsets) {
  std::vector<std::size_t> limit(offsets.back());
  for (std::size_t blk = 0; blk + 1 < offsets.size(); ++blk) {
    for (std::size_t i = offsets[blk]; i < offsets[blk + 1]; ++i) limit[i] = offsets[blk + 1];
  }
  return limit;
}

}  // namespace

template <typename T>
Tensor<T> block_causal_attention(const Tensor<T>& qkv, std::size_t batch, std::size_t heads,
                                 std::span<const std::size_t> offsets, AttentionCapture* capture,
                                 AttentionCounter* counter) {
  if (offsets.size() < 2 || offsets.front() != 0) {
    throw ShapeError("block_causal_attention: offsets must start at 0 and hold >= 2 entries");
  }
  for (std::size_t i = 1; i < offsets.size(); ++i) {
    if (offsets[i] <= offsets[i - 1]) throw ShapeError("block_causal_attention: empty or unordered block");
  }
  const std::size_t seq = offsets.back();
  if (qkv.rank() != 2 || batch == 0 || qkv.dim(0) != batch * seq || qkv.dim(1) % 3 != 0 ||
      heads == 0 || (qkv.dim(1) / 3) % heads != 0) {
    throw ShapeError("block_causal_attention: qkv " + shape_str(qkv.shape()) + " incompatible with batch " +
                     std::to_string(batch) + ", T " + std::to_string(seq) + ", heads " +
                     std::to_string(heads));
  }
  const std::size_t width = qkv.dim(1) / 3;
  const std::size_t hd = width / heads;
  const std::size_t stride = 3 * width;
  const T inv_sqrt = T(1) / std::sqrt(T(hd));
  const auto limit = visible_limits(offsets);
  const auto in = qkv.data();

  std::vector<T> out(batch * seq * width, T(0));
  std::vector<RowMat<T>> probs(batch * heads);
  RowMat<T> q(seq, hd), k(seq, hd), v(seq, hd);

  if (capture) {
    capture->tokens = seq;
    capture->heads.assign(heads, std::vector<double>(seq * seq, 0.0));
  }

  for (std::size_t b = 0; b < batch; ++b) {
    const T* base = in.data() + b * seq * stride;
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t c = 0; c < hd; ++c) {
          q(i, c) = base[i * stride + h * hd + c];
          k(i, c) = base[i * stride + width + h * hd + c];
          v(i, c) = base[i * stride + 2 * width + h * hd + c];
        }
      }
      RowMat<T>& p = probs[b * heads + h];
      p.noalias() = (q * k.transpose()) * inv_sqrt;
      if (counter) {
        counter->score_pairs += seq * seq;
        counter->score_macs += seq * seq * hd;
      }
      for (std::size_t i = 0; i < seq; ++i) {
        const std::size_t lim = limit[i];
        T peak = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < lim; ++j) peak = std::max(peak, p(i, j));
        T z = 0;
        for (std::size_t j = 0; j < lim; ++j) z += (p(i, j) = std::exp(p(i, j) - peak));
        for (std::size_t j = 0; j < lim; ++j) p(i, j) /= z;
        for (std::size_t j = lim; j < seq; ++j) p(i, j) = T(0);
      }
      const RowMat<T> o = p * v;
      for (std::size_t i = 0; i < seq; ++i) {
        for (std::size_t c = 0; c < hd; ++c) out[(b * seq + i) * width + h * hd + c] = o(i, c);
      }
      if (capture && b == 0) {
        auto& dst = capture->heads[h];
        for (std::size_t i = 0; i < seq; ++i) {
          for (std::size_t j = 0; j < seq; ++j) dst[i * seq + j] = static_cast<double>(p(i, j));
        }
      }
    }
  }

  auto px = qkv.node();
  return make_result<T>(
      "block_causal_attention", {batch * seq, width}, std::move(out), {px},
      [px, probs = std::move(probs), batch, heads, seq, width, hd, stride, inv_sqrt](Node<T>& self) {
        px->ensure_grad();
        RowMat<T> q(seq, hd), k(seq, hd), v(seq, hd), dout(seq, hd);
        for (std::size_t b = 0; b < batch; ++b) {
          const T* base = px->value.data() + b * seq * stride;
          T* gbase = px->grad.data() + b * seq * stride;
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < seq; ++i) {
              for (std::size_t c = 0; c < hd; ++c) {
                q(i, c) = base[i * stride + h * hd + c];
                k(i, c) = base[i * stride + width + h * hd + c];
                v(i, c) = base[i * stride + 2 * width + h * hd + c];
                dout(i, c) = self.grad[(b * seq + i) * width + h * hd + c];
              }
            }
            const RowMat<T>& p = probs[b * heads + h];
            const RowMat<T> dv = p.transpose() * dout;
            RowMat<T> ds = dout * v.transpose();
            for (std::size_t i = 0; i < seq; ++i) {
              T dot = 0;
              for (std::size_t j = 0; j < seq; ++j) dot += p(i, j) * ds(i, j);
              for (std::size_t j = 0; j < seq; ++j) ds(i, j) = p(i, j) * (ds(i, j) - dot);
            }
            const RowMat<T> dq = (ds * k) * inv_sqrt;
            const RowMat<T> dk = (ds.transpose() * q) * inv_sqrt;
            for (std::size_t i = 0; i < seq; ++i) {
              for (std::size_t c = 0; c < hd; ++c) {
                gbase[i * stride + h * hd + c] += dq(i, c);
                gbase[i * stride + width + h * hd + c] += dk(i, c);
                gbase[i * stride + 2 * width + h * hd + c] += dv(i, c);
              }
            }
          }
        }
      });
}

template Tensor<float> block_causal_attention(const Tensor<float>&, std::size_t, std::size_t,
                                              std::span<const std::size_t>, AttentionCapture*,
                                              AttentionCounter*);
template Tensor<double> block_causal_attention(const Tensor<double>&, std::size_t, std::size_t,
                                               std::span<const std::size_t>, AttentionCapture*,
                                               AttentionCounter*);

}  // namespace avar::nd
