#include "alignvar/resample.hpp"

#include <algorithm>
#include <cmath>

namespace avar {

std::string to_string(Extent e) { return std::to_string(e.height) + "x" + std::to_string(e.width); }

std::vector<Tap1D> area_taps(std::size_t src, std::size_t dst) {
  if (dst == 0 || dst > src) throw std::invalid_argument("area_taps: need 0 < dst <= src");
  // Work in units of 1/(src*dst): output cell i spans [i*src, (i+1)*src),
  // input sample j spans [j*dst, (j+1)*dst).
  std::vector<Tap1D> taps(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const std::size_t lo = i * src, hi = (i + 1) * src;
    bool first = true;
    for (std::size_t j = lo / dst; j < src && j * dst < hi; ++j) {
      const std::size_t a = std::max(lo, j * dst), b = std::min(hi, (j + 1) * dst);
      if (b <= a) continue;
      if (first) {
        taps[i].anchor = j;
        first = false;
      } else {
        taps[i].rel.emplace_back(j, double(b - a) / double(src));
      }
    }
  }
  return taps;
}

std::vector<Tap1D> bilinear_taps(std::size_t src, std::size_t dst) {
  if (src == 0 || dst == 0) throw std::invalid_argument("bilinear_taps: empty extent");
  std::vector<Tap1D> taps(dst);
  const double ratio = double(src) / double(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    const double x = std::clamp((double(i) + 0.5) * ratio - 0.5, 0.0, double(src - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(x));
    const double f = x - double(i0);
    taps[i].anchor = i0;
    if (f > 0.0 && i0 + 1 < src) taps[i].rel.emplace_back(i0 + 1, f);
  }
  return taps;
}

ResampleKind resample_kind(Extent src, Extent dst) {
  if (src.area() == 0 || dst.area() == 0) throw std::invalid_argument("resample: empty extent");
  if (src == dst) return ResampleKind::Identity;
  if (dst.height <= src.height && dst.width <= src.width) return ResampleKind::Area;
  if (dst.height >= src.height && dst.width >= src.width) return ResampleKind::Bilinear;
  throw std::invalid_argument("resample: mixed up/down resize " + to_string(src) + " -> " + to_string(dst));
}

Resampler::Resampler(Extent src, Extent dst) : Resampler(src, dst, resample_kind(src, dst)) {}

Resampler::Resampler(Extent src, Extent dst, ResampleKind kind) : src_(src), dst_(dst), kind_(kind) {
  switch (kind) {
    case ResampleKind::Identity:
      if (src != dst) throw std::invalid_argument("resample: identity needs equal extents");
      [[fallthrough]];
    case ResampleKind::Area:
      if (dst.height > src.height || dst.width > src.width || dst.area() == 0) {
        throw std::invalid_argument("downsample: target " + to_string(dst) + " larger than source " +
                                    to_string(src));
      }
      rows_ = area_taps(src.height, dst.height);
      cols_ = area_taps(src.width, dst.width);
      break;
    case ResampleKind::Bilinear:
      // Also used for the sampling-style downscale in the degradation model.
      rows_ = bilinear_taps(src.height, dst.height);
      cols_ = bilinear_taps(src.width, dst.width);
      break;
  }
}

}  // namespace avar
