#pragma once

// Synthetic toy images, the toy degradation model and image-folder loading.

#include <filesystem>
#include <string>
#include <vector>

#include "alignvar/image.hpp"
#include "alignvar/rng.hpp"

namespace avar {

enum class ToyKind { Gradient, Checker, Blobs, Strokes };

const char* to_string(ToyKind kind);

struct ToyImage {
  Image image;
  ToyKind kind = ToyKind::Gradient;
  std::string name;
};

// Single-channel size x size image in [0, 1].
Image generate_toy(ToyKind kind, std::size_t size, Rng& rng);

// Kinds cycle Gradient, Checker, Blobs, Strokes; image i draws from stream i.
std::vector<ToyImage> make_toyset(std::size_t n, std::size_t size, std::uint64_t seed);

// Writes toy_XXXX.png (or .pgm) plus manifest.csv (file,kind).
void write_toyset(const std::filesystem::path& dir, const std::vector<ToyImage>& set, const std::string& ext);

// Every .png/.pgm/.ppm in the folder, sorted by file name.
std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir);

struct DegradeOptions {
  std::size_t factor = 4;
  double blur_min = 0.2;
  double blur_max = 1.5;
  double noise_min = 0.0;
  double noise_max = 0.05;
};

// Separable Gaussian blur with replicate padding; sigma 0 is the identity.
Image gaussian_blur(const Image& img, double sigma);

// Blur with sigma ~ U[blur_min, blur_max], bilinear downsample by `factor`,
// additive Gaussian noise with std ~ U[noise_min, noise_max], clamp to [0, 1].
Image degrade(const Image& hr, Rng& rng, const DegradeOptions& opts = {});

// Bilinear resize (align_corners = false), per channel.
Image resize_bilinear(const Image& img, std::size_t height, std::size_t width);

}  // namespace avar
