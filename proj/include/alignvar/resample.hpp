#pragma once

// Area-average downsampling and bilinear (half-pixel centred) upsampling as
// separable sparse operators. Each output is evaluated as
//   x[anchor] + sum_t w_t * (x[j_t] - x[anchor])
// which is the same linear map as sum_t w_t x[j_t] (weights sum to one) but
// reproduces constant inputs bit-exactly.

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace avar {

struct Extent {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t area() const { return height * width; }
  friend bool operator==(const Extent&, const Extent&) = default;
};

std::string to_string(Extent e);

enum class ResampleKind { Identity, Area, Bilinear };

// One output sample of a 1-D operator: anchor index plus (index, weight)
// offsets relative to the anchor.
struct Tap1D {
  std::size_t anchor = 0;
  std::vector<std::pair<std::size_t, double>> rel;
};

std::vector<Tap1D> area_taps(std::size_t src, std::size_t dst);
std::vector<Tap1D> bilinear_taps(std::size_t src, std::size_t dst);

// Identity when equal, area when dst <= src on both axes, bilinear when
// dst >= src on both axes; mixed directions are rejected.
ResampleKind resample_kind(Extent src, Extent dst);

class Resampler {
 public:
  Resampler(Extent src, Extent dst);
  Resampler(Extent src, Extent dst, ResampleKind kind);

  Extent src() const { return src_; }
  Extent dst() const { return dst_; }
  ResampleKind kind() const { return kind_; }

  // Resample `planes` contiguous planes (plane-major: [plane][y][x]).
  template <typename T>
  void apply_planes(std::span<const T> in, std::span<T> out, std::size_t planes) const;
  // Same operator on interleaved layout [y][x][channel].
  template <typename T>
  void apply_interleaved(std::span<const T> in, std::span<T> out, std::size_t channels) const;
  // Adjoint (transpose) on interleaved layout, accumulated into `grad_in`.
  template <typename T>
  void adjoint_interleaved(std::span<const T> grad_out, std::span<T> grad_in, std::size_t channels) const;

 private:
  Extent src_, dst_;
  ResampleKind kind_;
  std::vector<Tap1D> rows_;  // height axis
  std::vector<Tap1D> cols_;  // width axis
};

// ---- implementation ---------------------------------------------------------

namespace detail {

// 1-D pass over `count` independent lines. Line l, element i lives at
// base(l) + i * step.
template <typename T, typename InBase, typename OutBase>
void pass_1d(const std::vector<Tap1D>& taps, std::size_t count, std::size_t in_step, std::size_t out_step,
             InBase in_base, OutBase out_base, const T* in, T* out) {
  for (std::size_t l = 0; l < count; ++l) {
    const T* src = in + in_base(l);
    T* dst = out + out_base(l);
    for (std::size_t i = 0; i < taps.size(); ++i) {
      const Tap1D& tap = taps[i];
      const T a = src[tap.anchor * in_step];
      T acc = a;
      for (const auto& [j, w] : tap.rel) acc += T(w) * (src[j * in_step] - a);
      dst[i * out_step] = acc;
    }
  }
}

template <typename T, typename InBase, typename OutBase>
void adjoint_1d(const std::vector<Tap1D>& taps, std::size_t count, std::size_t in_step, std::size_t out_step,
                InBase in_base, OutBase out_base, const T* gout, T* gin) {
  for (std::size_t l = 0; l < count; ++l) {
    T* gsrc = gin + in_base(l);
    const T* gdst = gout + out_base(l);
    for (std::size_t i = 0; i < taps.size(); ++i) {
      const Tap1D& tap = taps[i];
      const T g = gdst[i * out_step];
      T anchor_w = T(1);
      for (const auto& [j, w] : tap.rel) {
        gsrc[j * in_step] += T(w) * g;
        anchor_w -= T(w);
      }
      gsrc[tap.anchor * in_step] += anchor_w * g;
    }
  }
}

}  // namespace detail

template <typename T>
void Resampler::apply_planes(std::span<const T> in, std::span<T> out, std::size_t planes) const {
  if (in.size() != planes * src_.area() || out.size() != planes * dst_.area()) {
    throw std::invalid_argument("Resampler: buffer size mismatch");
  }
  const std::size_t sh = src_.height, sw = src_.width, dh = dst_.height, dw = dst_.width;
  std::vector<T> mid(planes * sh * dw);
  // width pass: lines are (plane, row)
  detail::pass_1d<T>(
      cols_, planes * sh, 1, 1, [&](std::size_t l) { return l * sw; }, [&](std::size_t l) { return l * dw; },
      in.data(), mid.data());
  // height pass: lines are (plane, column)
  auto in_base = [&](std::size_t l) { return (l / dw) * sh * dw + l % dw; };
  auto out_base = [&](std::size_t l) { return (l / dw) * dh * dw + l % dw; };
  detail::pass_1d<T>(rows_, planes * dw, dw, dw, in_base, out_base, mid.data(), out.data());
}

template <typename T>
void Resampler::apply_interleaved(std::span<const T> in, std::span<T> out, std::size_t channels) const {
  if (in.size() != channels * src_.area() || out.size() != channels * dst_.area()) {
    throw std::invalid_argument("Resampler: buffer size mismatch");
  }
  const std::size_t sh = src_.height, sw = src_.width, dh = dst_.height, dw = dst_.width, c = channels;
  std::vector<T> mid(sh * dw * c);
  // width pass: lines are (row, channel), stride c along x
  detail::pass_1d<T>(
      cols_, sh * c, c, c, [&](std::size_t l) { return (l / c) * sw * c + l % c; },
      [&](std::size_t l) { return (l / c) * dw * c + l % c; }, in.data(), mid.data());
  // height pass: lines are (column, channel), stride dw*c along y
  auto base = [&](std::size_t l) { return l; };
  detail::pass_1d<T>(rows_, dw * c, dw * c, dw * c, base, base, mid.data(), out.data());
  (void)dh;
}

template <typename T>
void Resampler::adjoint_interleaved(std::span<const T> grad_out, std::span<T> grad_in, std::size_t channels) const {
  if (grad_in.size() != channels * src_.area() || grad_out.size() != channels * dst_.area()) {
    throw std::invalid_argument("Resampler: buffer size mismatch");
  }
  const std::size_t sh = src_.height, sw = src_.width, dw = dst_.width, c = channels;
  std::vector<T> mid(sh * dw * c, T(0));
  auto base = [&](std::size_t l) { return l; };
  detail::adjoint_1d<T>(rows_, dw * c, dw * c, dw * c, base, base, grad_out.data(), mid.data());
  detail::adjoint_1d<T>(
      cols_, sh * c, c, c, [&](std::size_t l) { return (l / c) * sw * c + l % c; },
      [&](std::size_t l) { return (l / c) * dw * c + l % c; }, mid.data(), grad_in.data());
}

}  // namespace avar
