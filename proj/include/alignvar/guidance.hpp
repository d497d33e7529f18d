#pragma once

// Structural guidance: Laplacian magnitude of the LR input and its per-scale
// min-max normalized pyramid.

#include <vector>

#include "alignvar/codec.hpp"
#include "alignvar/image.hpp"

namespace avar {

struct GuidanceMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  int scale = -1;

  Extent extent() const { return {height, width}; }
  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

// |4-neighbour Laplacian| of the luminance with replicate padding.
// Returns a 1-channel image; 1x1 inputs are rejected.
Image laplacian_abs(const Image& image);

// Rescales to [0, 1]; an all-equal map becomes all zeros.
std::vector<double> minmax_normalize(std::vector<double> values);

// Area-downsample to every scale, then normalize each map on its own.
std::vector<GuidanceMap> guidance_pyramid(const Image& s, const ScaleSchedule& schedule);

Image to_image(const GuidanceMap& g);

}  // namespace avar
