#pragma once

// Toy latent codec: a linear patch embedding with a tied decoder, a shared
// codebook, nearest-entry quantization and the multi-scale residual token
// chain used by next-scale prediction.
//
// Scales are indexed from 0 in this API; scale k here is scale k+1 in the
// usual 1..K notation.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "alignvar/image.hpp"
#include "alignvar/resample.hpp"
#include "alignvar/rng.hpp"

namespace avar {

class ScaleSchedule {
 public:
  ScaleSchedule() = default;
  explicit ScaleSchedule(std::vector<Extent> resolutions);
  // Square scales n x n.
  static ScaleSchedule square(std::initializer_list<std::size_t> sides);
  static ScaleSchedule square(const std::vector<std::size_t>& sides);
  // "1,2,3,4,6,8" (square) or "1x1,2x3,..." (explicit).
  static ScaleSchedule parse(const std::string& text);

  std::size_t size() const { return res_.size(); }
  const Extent& operator[](std::size_t k) const { return res_.at(k); }
  const Extent& final() const { return res_.back(); }
  const std::vector<Extent>& resolutions() const { return res_; }
  // offsets()[k] is the index of the first token of scale k in the flattened
  // sequence; offsets()[K] is the total token count.
  std::vector<std::size_t> offsets() const;
  std::size_t total_tokens() const { return offsets().back(); }
  std::string str() const;

  friend bool operator==(const ScaleSchedule&, const ScaleSchedule&) = default;

 private:
  std::vector<Extent> res_;
};

// C x H x W real grid.
struct LatentMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  int scale = -1;

  LatentMap() = default;
  LatentMap(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), values(c * h * w, fill) {}

  Extent extent() const { return {height, width}; }
  double& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
  // Position-major copy [y][x][c].
  std::vector<double> interleaved() const;
  static LatentMap from_interleaved(std::span<const double> v, std::size_t c, Extent e);
};

struct TokenMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> indices;
  int scale = -1;

  Extent extent() const { return {height, width}; }
  int at(std::size_t y, std::size_t x) const { return indices[y * width + x]; }
  friend bool operator==(const TokenMap&, const TokenMap&) = default;
};

class Codebook {
 public:
  Codebook() = default;
  Codebook(std::size_t size, std::size_t dim, std::vector<double> entries);

  std::size_t size() const { return size_; }
  std::size_t dim() const { return dim_; }
  std::span<const double> entry(std::size_t i) const { return {entries_.data() + i * dim_, dim_}; }
  const std::vector<double>& entries() const { return entries_; }
  // Lowest index of an all-zero entry, or -1.
  int null_entry() const { return null_; }

  friend bool operator==(const Codebook&, const Codebook&) = default;

 private:
  std::size_t size_ = 0;
  std::size_t dim_ = 0;
  int null_ = -1;
  std::vector<double> entries_;  // size x dim, row-major
};

struct CodecConfig {
  std::size_t patch = 8;
  std::size_t image_channels = 1;
  std::size_t embed_dim = 16;
};

// latent = E * patch + b_enc ; image patch = D * latent + b_dec, with D the
// pseudo-inverse of E (E^T for orthonormal rows).
class LinearCodec {
 public:
  LinearCodec() = default;
  // Orthonormal 2-D DCT-II basis over the patch, lowest frequencies first.
  static LinearCodec dct(const CodecConfig& config);
  // Principal components of all non-overlapping patches of the images:
  // rows of E are the leading eigenvectors of the patch covariance,
  // b_enc = -E mu, D = E^T and b_dec = mu.
  static LinearCodec fit_pca(std::span<const Image> images, const CodecConfig& config);
  // Hand-set weights. An empty decoder becomes pinv(E) with b_dec = -pinv(E) b_enc.
  LinearCodec(const CodecConfig& config, std::vector<double> encoder, std::vector<double> enc_bias,
              std::vector<double> decoder = {}, std::vector<double> dec_bias = {});

  const CodecConfig& config() const { return config_; }
  std::size_t patch_dim() const { return config_.image_channels * config_.patch * config_.patch; }
  const std::vector<double>& encoder() const { return encoder_; }
  const std::vector<double>& decoder() const { return decoder_; }
  const std::vector<double>& encoder_bias() const { return enc_bias_; }
  const std::vector<double>& decoder_bias() const { return dec_bias_; }

  LatentMap encode(const Image& image) const;
  Image decode(const LatentMap& latent) const;
  Extent latent_extent(std::size_t image_h, std::size_t image_w) const;

 private:
  CodecConfig config_;
  std::vector<double> encoder_;   // C x P
  std::vector<double> enc_bias_;  // C
  std::vector<double> decoder_;   // P x C
  std::vector<double> dec_bias_;  // P
};

LatentMap downsample(const LatentMap& x, Extent target);
LatentMap upsample(const LatentMap& x, Extent target);
// Identity, area-down or bilinear-up depending on the target.
LatentMap resize(const LatentMap& x, Extent target);

// Nearest entry by squared Euclidean distance; ties go to the lowest index.
int nearest_entry(std::span<const double> v, const Codebook& codebook);
TokenMap quantize(const LatentMap& latent, const Codebook& codebook);
LatentMap lookup(const Codebook& codebook, const TokenMap& tokens);

// r_k = Q(Down_k(f - sum_{m<k} Up(lookup(r_m)))), every Up going to the
// final resolution. When the codebook has a null entry and the quantized
// map of a scale would increase ||f - sum Up(lookup(r))||, that scale emits
// the null entry everywhere instead, so the error never grows with k.
std::vector<TokenMap> residual_decompose(const LatentMap& f, const ScaleSchedule& schedule,
                                         const Codebook& codebook);
// sum_{m<=k} Up_to(target)(lookup(r_m)) over the first `count` token maps.
LatentMap accumulate(std::span<const TokenMap> tokens, std::size_t count, const Codebook& codebook,
                     Extent target);
// Cumulative reconstruction of scales 0..k at the resolution of scale k.
LatentMap reconstruct(std::span<const TokenMap> tokens, const ScaleSchedule& schedule,
                      const Codebook& codebook, std::size_t target_scale);
// u_k = Q(Down(z, S_k)) for every scale.
std::vector<TokenMap> full_scale_targets(const LatentMap& z, const ScaleSchedule& schedule,
                                         const Codebook& codebook);

struct KMeansOptions {
  std::size_t max_iterations = 50;
};

// k-means++ seeding then Lloyd iterations over row-major vectors (n x dim).
Codebook fit_codebook(std::span<const double> vectors, std::size_t dim, std::size_t size, Rng& rng,
                      const KMeansOptions& opts = {});
// Every spatial vector of every latent.
Codebook fit_codebook(std::span<const LatentMap> latents, std::size_t size, Rng& rng,
                      const KMeansOptions& opts = {});

struct ResidualFitOptions {
  KMeansOptions kmeans;
  // Entry 0 is pinned to the zero vector.
  bool reserve_null = true;
  // k-means refits on the pre-quantization residuals of every scale.
  std::size_t kmeans_rounds = 1;
  // Damped joint least-squares refinement of the entries against the
  // full-resolution reconstruction error; the best iterate is returned.
  std::size_t refine_rounds = 1000;
  double damping = 0.05;
  double ridge = 1e-6;
  // > 0: reweight latents by (error / mean error)^balance each round and
  // return the iterate with the smallest worst-latent error.
  double balance = 1.0;
  // Independent fits drawn in sequence from the rng; the best scoring one wins.
  std::size_t restarts = 4;
};

// Codebook for the residual chain: k-means over Down_k(z) of every scale,
// k-means refits on the chain residuals, then the least-squares refinement.
Codebook fit_residual_codebook(std::span<const LatentMap> latents, const ScaleSchedule& schedule,
                               std::size_t size, Rng& rng, const ResidualFitOptions& opts = {});

// CSV dump of index grids: scale,height,width,row,indices...
std::string tokens_csv(std::span<const TokenMap> tokens);

}  // namespace avar
