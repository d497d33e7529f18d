#include "alignvar/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "alignvar/resample.hpp"

namespace avar {

namespace {

constexpr double kPi = 3.14159265358979323846;

Image gradient(std::size_t n, Rng& rng) {
  Image img(1, n, n);
  const double angle = rng.uniform(0.0, 2.0 * kPi);
  const double a = rng.uniform(0.0, 0.4), b = rng.uniform(0.6, 1.0);
  const double cx = std::cos(angle), cy = std::sin(angle);
  const double half = 0.5 * double(n - 1);
  const double reach = half * (std::abs(cx) + std::abs(cy)) + 1e-9;
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double t = 0.5 + 0.5 * ((double(x) - half) * cx + (double(y) - half) * cy) / reach;
      img.at(0, y, x) = a + (b - a) * t;
    }
  }
  return img;
}

Image checker(std::size_t n, Rng& rng) {
  static constexpr std::size_t kCells[] = {8, 16};
  const std::size_t cell = kCells[rng.below(2)];
  const double lo = rng.uniform(0.1, 0.35), hi = rng.uniform(0.65, 0.9);
  const std::size_t ox = rng.below(cell), oy = rng.below(cell);
  Image img(1, n, n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const bool on = (((x + ox) / cell) + ((y + oy) / cell)) % 2 == 0;
      img.at(0, y, x) = on ? hi : lo;
    }
  }
  return img;
}

Image blobs(std::size_t n, Rng& rng) {
  Image img(1, n, n, rng.uniform(0.05, 0.3));
  const std::size_t count = 1 + rng.below(4);
  for (std::size_t i = 0; i < count; ++i) {
    const double cx = rng.uniform(0.15, 0.85) * double(n), cy = rng.uniform(0.15, 0.85) * double(n);
    const double s = rng.uniform(0.06, 0.2) * double(n);
    const double amp = rng.uniform(0.3, 0.7);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
        img.at(0, y, x) += amp * std::exp(-(dx * dx + dy * dy) / (2.0 * s * s));
      }
    }
  }
  return clamp01(std::move(img));
}

Image strokes(std::size_t n, Rng& rng) {
  Image img(1, n, n, rng.uniform(0.75, 0.95));
  const double ink = rng.uniform(0.05, 0.25);
  const std::size_t count = 3 + rng.below(4);
  for (std::size_t i = 0; i < count; ++i) {
    const double x0 = rng.uniform(0.1, 0.9) * double(n), y0 = rng.uniform(0.1, 0.9) * double(n);
    // Mostly horizontal or vertical segments, as in printed glyphs.
    const bool vertical = rng.below(2) == 0;
    const double len = rng.uniform(0.15, 0.45) * double(n);
    const double x1 = vertical ? x0 : std::min(double(n) - 1.0, x0 + len);
    const double y1 = vertical ? std::min(double(n) - 1.0, y0 + len) : y0;
    const double half = rng.uniform(0.8, 2.2);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double px = double(x) + 0.5, py = double(y) + 0.5;
        const double vx = x1 - x0, vy = y1 - y0;
        const double t = std::clamp(((px - x0) * vx + (py - y0) * vy) / (vx * vx + vy * vy + 1e-12), 0.0, 1.0);
        const double dx = px - (x0 + t * vx), dy = py - (y0 + t * vy);
        if (dx * dx + dy * dy <= half * half) img.at(0, y, x) = ink;
      }
    }
  }
  return img;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) s += (k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (double& v : k) v /= s;
  return k;
}

}  // namespace

const char* to_string(ToyKind kind) {
  switch (kind) {
    case ToyKind::Gradient: return "gradient";
    case ToyKind::Checker: return "checker";
    case ToyKind::Blobs: return "blobs";
    case ToyKind::Strokes: return "strokes";
  }
  return "unknown";
}

Image generate_toy(ToyKind kind, std::size_t size, Rng& rng) {
  if (size < 2) throw std::invalid_argument("generate_toy: size must be >= 2");
  switch (kind) {
    case ToyKind::Gradient: return gradient(size, rng);
    case ToyKind::Checker: return checker(size, rng);
    case ToyKind::Blobs: return blobs(size, rng);
    case ToyKind::Strokes: return strokes(size, rng);
  }
  throw std::invalid_argument("generate_toy: unknown kind");
}

std::vector<ToyImage> make_toyset(std::size_t n, std::size_t size, std::uint64_t seed) {
  static constexpr ToyKind kOrder[] = {ToyKind::Gradient, ToyKind::Checker, ToyKind::Blobs, ToyKind::Strokes};
  std::vector<ToyImage> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(seed, i);
    const ToyKind kind = kOrder[i % 4];
    char name[32];
    std::snprintf(name, sizeof name, "toy_%04zu", i);
    out.push_back({generate_toy(kind, size, rng), kind, name});
  }
  return out;
}

void write_toyset(const std::filesystem::path& dir, const std::vector<ToyImage>& set, const std::string& ext) {
  if (ext != "png" && ext != "pgm") throw std::invalid_argument("write_toyset: format must be png or pgm");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream manifest(dir / "manifest.csv", std::ios::binary);
  if (!manifest) throw std::runtime_error("write_toyset: cannot write " + (dir / "manifest.csv").string());
  manifest << "file,kind\n";
  for (const ToyImage& t : set) {
    const std::string file = t.name + "." + ext;
    write_image(dir / file, t.image);
    manifest << file << ',' << to_string(t.kind) << '\n';
  }
  if (!manifest) throw std::runtime_error("write_toyset: write failed in " + dir.string());
}

std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".png" || ext == ".pgm" || ext == ".ppm")) out.push_back(entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

Image gaussian_blur(const Image& img, double sigma) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("gaussian_blur: sigma must be >= 0");
  if (sigma == 0.0) return img;
  const auto k = gaussian_kernel(sigma);
  const int r = int(k.size() / 2);
  const auto h = std::ptrdiff_t(img.height), w = std::ptrdiff_t(img.width);
  Image tmp(img.channels, img.height, img.width), out(img.channels, img.height, img.width);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::ptrdiff_t y = 0; y < h; ++y) {
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * img.at(c, y, std::clamp<std::ptrdiff_t>(x + i, 0, w - 1));
        tmp.at(c, y, x) = acc;
      }
    }
    for (std::ptrdiff_t y = 0; y < h; ++y) {
      for (std::ptrdiff_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(c, std::clamp<std::ptrdiff_t>(y + i, 0, h - 1), x);
        out.at(c, y, x) = acc;
      }
    }
  }
  return out;
}

Image resize_bilinear(const Image& img, std::size_t height, std::size_t width) {
  const Resampler rs({img.height, img.width}, {height, width}, ResampleKind::Bilinear);
  Image out(img.channels, height, width);
  rs.apply_planes<double>(img.pixels, out.pixels, img.channels);
  return out;
}

Image degrade(const Image& hr, Rng& rng, const DegradeOptions& opts) {
  if (opts.factor == 0 || hr.height % opts.factor != 0 || hr.width % opts.factor != 0) {
    throw std::invalid_argument("degrade: image size not divisible by factor " + std::to_string(opts.factor));
  }
  if (!(opts.blur_min >= 0.0 && opts.blur_min <= opts.blur_max)) {
    throw std::invalid_argument("degrade: need 0 <= blur_min <= blur_max");
  }
  if (!(opts.noise_min >= 0.0 && opts.noise_min <= opts.noise_max)) {
    throw std::invalid_argument("degrade: need 0 <= noise_min <= noise_max");
  }
  const double sigma = rng.uniform(opts.blur_min, opts.blur_max);
  const double noise = rng.uniform(opts.noise_min, opts.noise_max);
  Image lr = resize_bilinear(gaussian_blur(hr, sigma), hr.height / opts.factor, hr.width / opts.factor);
  if (noise > 0.0) {
    for (double& v : lr.pixels) v += noise * rng.normal();
  }
  return clamp01(std::move(lr));
}

}  // namespace avar
