#include "alignvar/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace avar {

Image laplacian_abs(const Image& image) {
  if (image.height * image.width < 2) {
    throw std::invalid_argument("laplacian_abs: degenerate " + std::to_string(image.height) + "x" +
                                std::to_string(image.width) + " image");
  }
  const Image lum = to_luminance(image);
  const std::size_t h = lum.height, w = lum.width;
  Image out(1, h, w);
  auto px = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    y = std::clamp<std::ptrdiff_t>(y, 0, std::ptrdiff_t(h) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, std::ptrdiff_t(w) - 1);
    return lum.at(0, std::size_t(y), std::size_t(x));
  };
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto iy = std::ptrdiff_t(y), ix = std::ptrdiff_t(x);
      const double v = px(iy - 1, ix) + px(iy + 1, ix) + px(iy, ix - 1) + px(iy, ix + 1) - 4.0 * px(iy, ix);
      out.at(0, y, x) = std::abs(v);
    }
  }
  return out;
}

std::vector<double> minmax_normalize(std::vector<double> values) {
  if (values.empty()) return values;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double a = *lo, b = *hi;
  if (!(b > a)) {
    std::fill(values.begin(), values.end(), 0.0);
    return values;
  }
  for (double& v : values) v = std::clamp((v - a) / (b - a), 0.0, 1.0);
  return values;
}

std::vector<GuidanceMap> guidance_pyramid(const Image& s, const ScaleSchedule& schedule) {
  if (s.channels != 1) throw std::invalid_argument("guidance_pyramid: expects a 1-channel map");
  LatentMap src(1, s.height, s.width);
  src.values = s.pixels;
  std::vector<GuidanceMap> out;
  out.reserve(schedule.size());
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    const LatentMap d = downsample(src, schedule[k]);
    GuidanceMap g{d.height, d.width, minmax_normalize(d.values), int(k)};
    out.push_back(std::move(g));
  }
  return out;
}

Image to_image(const GuidanceMap& g) {
  Image img(1, g.height, g.width);
  img.pixels = g.values;
  return img;
}

}  // namespace avar
