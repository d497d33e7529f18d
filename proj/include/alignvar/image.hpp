#pragma once

#include <cstddef>
#include <filesystem>
#include <vector>

namespace avar {

// Channel-major pixel grid with values nominally in [0, 1].
struct Image {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
  std::size_t plane() const { return height * width; }
  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

// Equal-weight channel mean.
Image to_luminance(const Image& img);
Image clamp01(Image img);

double mse(const Image& a, const Image& b);
// Peak 1.0; identical images give +inf.
double psnr(const Image& a, const Image& b);

// Binary PGM (P5, 8-bit) and PPM (P6); PNG through libpng (gray or RGB, 8-bit).
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& img);
void write_pgm(const std::filesystem::path& path, const Image& img);
Image read_pnm(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

}  // namespace avar
