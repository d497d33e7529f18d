#include "alignvar/codec.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <tuple>

namespace avar {

// ---- ScaleSchedule ----------------------------------------------------------

ScaleSchedule::ScaleSchedule(std::vector<Extent> resolutions) : res_(std::move(resolutions)) {
  if (res_.empty()) throw std::invalid_argument("ScaleSchedule: need at least one scale");
  for (std::size_t k = 0; k < res_.size(); ++k) {
    if (res_[k].area() == 0) throw std::invalid_argument("ScaleSchedule: empty scale " + std::to_string(k));
    if (k > 0 && res_[k].area() <= res_[k - 1].area()) {
      throw std::invalid_argument("ScaleSchedule: areas must strictly increase (" + to_string(res_[k - 1]) +
                                  " then " + to_string(res_[k]) + ")");
    }
    if (k > 0 && (res_[k].height < res_[k - 1].height || res_[k].width < res_[k - 1].width)) {
      throw std::invalid_argument("ScaleSchedule: scale " + to_string(res_[k]) + " shrinks an axis");
    }
  }
}

ScaleSchedule ScaleSchedule::square(std::initializer_list<std::size_t> sides) {
  return square(std::vector<std::size_t>(sides));
}

ScaleSchedule ScaleSchedule::square(const std::vector<std::size_t>& sides) {
  std::vector<Extent> res;
  for (std::size_t s : sides) res.push_back({s, s});
  return ScaleSchedule(std::move(res));
}

ScaleSchedule ScaleSchedule::parse(const std::string& text) {
  std::vector<Extent> res;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove_if(item.begin(), item.end(), ::isspace), item.end());
    if (item.empty()) continue;
    try {
      const auto x = item.find('x');
      if (x == std::string::npos) {
        const std::size_t n = std::stoul(item);
        res.push_back({n, n});
      } else {
        res.push_back({std::stoul(item.substr(0, x)), std::stoul(item.substr(x + 1))});
      }
    } catch (const std::logic_error&) {
      throw std::invalid_argument("ScaleSchedule: cannot parse '" + item + "'");
    }
  }
  return ScaleSchedule(std::move(res));
}

std::vector<std::size_t> ScaleSchedule::offsets() const {
  std::vector<std::size_t> off{0};
  for (const Extent& e : res_) off.push_back(off.back() + e.area());
  return off;
}

std::string ScaleSchedule::str() const {
  std::string out;
  for (std::size_t k = 0; k < res_.size(); ++k) {
    if (k) out += ',';
    out += res_[k].height == res_[k].width ? std::to_string(res_[k].height) : to_string(res_[k]);
  }
  return out;
}

// ---- LatentMap --------------------------------------------------------------

std::vector<double> LatentMap::interleaved() const {
  std::vector<double> out(values.size());
  const std::size_t hw = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) out[i * channels + c] = values[c * hw + i];
  }
  return out;
}

LatentMap LatentMap::from_interleaved(std::span<const double> v, std::size_t c, Extent e) {
  LatentMap out(c, e.height, e.width);
  if (v.size() != out.values.size()) throw std::invalid_argument("LatentMap: interleaved size mismatch");
  const std::size_t hw = e.area();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) out.values[ch * hw + i] = v[i * c + ch];
  }
  return out;
}

// ---- Codebook ---------------------------------------------------------------

Codebook::Codebook(std::size_t size, std::size_t dim, std::vector<double> entries)
    : size_(size), dim_(dim), entries_(std::move(entries)) {
  if (size_ == 0 || dim_ == 0) throw std::invalid_argument("Codebook: empty codebook");
  if (entries_.size() != size_ * dim_) throw std::invalid_argument("Codebook: entry buffer size mismatch");
  for (double v : entries_) {
    if (std::isnan(v)) throw std::invalid_argument("Codebook: NaN entry");
  }
  for (std::size_t i = 0; i < size_ && null_ < 0; ++i) {
    const auto e = entry(i);
    if (std::all_of(e.begin(), e.end(), [](double v) { return v == 0.0; })) null_ = int(i);
  }
}

// ---- LinearCodec ------------------------------------------------------------

namespace {

std::vector<double> pseudo_inverse(const std::vector<double>& e, std::size_t rows, std::size_t cols) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const Eigen::Map<const Mat> m(e.data(), Eigen::Index(rows), Eigen::Index(cols));
  const Mat pinv = m.completeOrthogonalDecomposition().pseudoInverse();
  return std::vector<double>(pinv.data(), pinv.data() + pinv.size());
}

}  // namespace

LinearCodec LinearCodec::dct(const CodecConfig& config) {
  const std::size_t p = config.patch, ch = config.image_channels;
  const std::size_t dim = ch * p * p;
  if (p == 0 || ch == 0 || config.embed_dim == 0 || config.embed_dim > dim) {
    throw std::invalid_argument("LinearCodec: embed_dim must lie in [1, channels*patch^2]");
  }
  constexpr double kPi = 3.14159265358979323846;
  auto basis = [](std::size_t n, std::size_t u, std::size_t x) {
    const double alpha = u == 0 ? std::sqrt(1.0 / double(n)) : std::sqrt(2.0 / double(n));
    return alpha * std::cos(kPi * (2.0 * double(x) + 1.0) * double(u) / (2.0 * double(n)));
  };
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>> freqs;  // (sum, c, u, v)
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t u = 0; u < p; ++u) {
      for (std::size_t v = 0; v < p; ++v) freqs.emplace_back(c + u + v, c, u, v);
    }
  }
  std::sort(freqs.begin(), freqs.end());
  std::vector<double> enc(config.embed_dim * dim);
  for (std::size_t row = 0; row < config.embed_dim; ++row) {
    const auto [_, fc, fu, fv] = freqs[row];
    for (std::size_t c = 0; c < ch; ++c) {
      for (std::size_t y = 0; y < p; ++y) {
        for (std::size_t x = 0; x < p; ++x) {
          enc[row * dim + (c * p + y) * p + x] = basis(ch, fc, c) * basis(p, fu, y) * basis(p, fv, x);
        }
      }
    }
  }
  std::vector<double> dec(dim * config.embed_dim);
  for (std::size_t r = 0; r < config.embed_dim; ++r) {
    for (std::size_t q = 0; q < dim; ++q) dec[q * config.embed_dim + r] = enc[r * dim + q];
  }
  return LinearCodec(config, std::move(enc), std::vector<double>(config.embed_dim, 0.0), std::move(dec),
                     std::vector<double>(dim, 0.0));
}

LinearCodec LinearCodec::fit_pca(std::span<const Image> images, const CodecConfig& config) {
  const std::size_t p = config.patch, dim = config.image_channels * p * p, c_lat = config.embed_dim;
  if (images.empty()) throw std::invalid_argument("LinearCodec::fit_pca: no images");
  if (p == 0 || c_lat == 0 || c_lat > dim) {
    throw std::invalid_argument("LinearCodec: embed_dim must lie in [1, channels*patch^2]");
  }
  std::vector<Eigen::VectorXd> patches;
  for (const Image& img : images) {
    if (img.channels != config.image_channels || img.height % p || img.width % p || img.height == 0) {
      throw std::invalid_argument("LinearCodec::fit_pca: image " + std::to_string(img.height) + "x" +
                                  std::to_string(img.width) + "x" + std::to_string(img.channels) +
                                  " incompatible with patch " + std::to_string(p));
    }
    for (std::size_t py = 0; py < img.height / p; ++py) {
      for (std::size_t px = 0; px < img.width / p; ++px) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(Eigen::Index(dim));
        for (std::size_t ch = 0; ch < config.image_channels; ++ch) {
          for (std::size_t y = 0; y < p; ++y) {
            for (std::size_t x = 0; x < p; ++x) v(Eigen::Index((ch * p + y) * p + x)) = img.at(ch, py * p + y, px * p + x);
          }
        }
        patches.push_back(std::move(v));
      }
    }
  }
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(Eigen::Index(dim));
  for (const auto& v : patches) mu += v;
  mu /= double(patches.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(Eigen::Index(dim), Eigen::Index(dim));
  for (const auto& v : patches) cov += (v - mu) * (v - mu).transpose();
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  std::vector<double> enc(c_lat * dim), enc_bias(c_lat), dec(dim * c_lat), dec_bias(mu.data(), mu.data() + dim);
  for (std::size_t r = 0; r < c_lat; ++r) {
    // Eigenvalues ascend; take from the top.
    Eigen::VectorXd e = eig.eigenvectors().col(Eigen::Index(dim - 1 - r));
    Eigen::Index big = 0;
    e.cwiseAbs().maxCoeff(&big);
    if (e(big) < 0) e = -e;
    for (std::size_t q = 0; q < dim; ++q) {
      enc[r * dim + q] = e(Eigen::Index(q));
      dec[q * c_lat + r] = e(Eigen::Index(q));
    }
    enc_bias[r] = -e.dot(mu);
  }
  return LinearCodec(config, std::move(enc), std::move(enc_bias), std::move(dec), std::move(dec_bias));
}

LinearCodec::LinearCodec(const CodecConfig& config, std::vector<double> encoder, std::vector<double> enc_bias,
                         std::vector<double> decoder, std::vector<double> dec_bias)
    : config_(config), encoder_(std::move(encoder)), enc_bias_(std::move(enc_bias)),
      decoder_(std::move(decoder)), dec_bias_(std::move(dec_bias)) {
  const std::size_t c = config.embed_dim, p = patch_dim();
  if (encoder_.size() != c * p || enc_bias_.size() != c) {
    throw std::invalid_argument("LinearCodec: encoder weights do not match the configuration");
  }
  const bool derive_bias = decoder_.empty() && dec_bias_.empty();
  if (decoder_.empty()) decoder_ = pseudo_inverse(encoder_, c, p);
  if (dec_bias_.empty()) dec_bias_.assign(p, 0.0);
  if (derive_bias && decoder_.size() == p * c) {
    for (std::size_t q = 0; q < p; ++q) {
      for (std::size_t r = 0; r < c; ++r) dec_bias_[q] -= decoder_[q * c + r] * enc_bias_[r];
    }
  }
  if (decoder_.size() != p * c || dec_bias_.size() != p) {
    throw std::invalid_argument("LinearCodec: decoder weights do not match the configuration");
  }
}

Extent LinearCodec::latent_extent(std::size_t image_h, std::size_t image_w) const {
  const std::size_t p = config_.patch;
  if (image_h == 0 || image_w == 0 || image_h % p || image_w % p) {
    throw std::invalid_argument("LinearCodec: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
                                " not divisible by patch " + std::to_string(p));
  }
  return {image_h / p, image_w / p};
}

LatentMap LinearCodec::encode(const Image& image) const {
  if (image.channels != config_.image_channels) {
    throw std::invalid_argument("LinearCodec::encode: expected " + std::to_string(config_.image_channels) +
                                " channels, got " + std::to_string(image.channels));
  }
  const Extent e = latent_extent(image.height, image.width);
  const std::size_t p = config_.patch, c_out = config_.embed_dim, dim = patch_dim();
  LatentMap out(c_out, e.height, e.width);
  std::vector<double> patch(dim);
  for (std::size_t py = 0; py < e.height; ++py) {
    for (std::size_t px = 0; px < e.width; ++px) {
      for (std::size_t c = 0; c < image.channels; ++c) {
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) patch[(c * p + y) * p + x] = image.at(c, py * p + y, px * p + x);
        }
      }
      for (std::size_t r = 0; r < c_out; ++r) {
        double acc = enc_bias_[r];
        for (std::size_t q = 0; q < dim; ++q) acc += encoder_[r * dim + q] * patch[q];
        out.at(r, py, px) = acc;
      }
    }
  }
  return out;
}

Image LinearCodec::decode(const LatentMap& latent) const {
  if (latent.channels != config_.embed_dim) {
    throw std::invalid_argument("LinearCodec::decode: expected " + std::to_string(config_.embed_dim) +
                                " latent channels, got " + std::to_string(latent.channels));
  }
  const std::size_t p = config_.patch, c_lat = config_.embed_dim;
  Image out(config_.image_channels, latent.height * p, latent.width * p);
  for (std::size_t py = 0; py < latent.height; ++py) {
    for (std::size_t px = 0; px < latent.width; ++px) {
      for (std::size_t c = 0; c < config_.image_channels; ++c) {
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) {
            const std::size_t q = (c * p + y) * p + x;
            double acc = dec_bias_[q];
            for (std::size_t r = 0; r < c_lat; ++r) acc += decoder_[q * c_lat + r] * latent.at(r, py, px);
            out.at(c, py * p + y, px * p + x) = acc;
          }
        }
      }
    }
  }
  return out;
}

// ---- resampling ---------------------------------------------------------------

namespace {

LatentMap resample_with(const LatentMap& x, Extent target, ResampleKind kind) {
  const Resampler rs(x.extent(), target, kind);
  LatentMap out(x.channels, target.height, target.width);
  out.scale = x.scale;
  rs.apply_planes<double>(x.values, out.values, x.channels);
  return out;
}

}  // namespace

LatentMap downsample(const LatentMap& x, Extent target) {
  if (target.height > x.height || target.width > x.width || target.area() == 0) {
    throw std::invalid_argument("downsample: invalid target " + to_string(target) + " for " + to_string(x.extent()));
  }
  return resample_with(x, target, target == x.extent() ? ResampleKind::Identity : ResampleKind::Area);
}

LatentMap upsample(const LatentMap& x, Extent target) {
  if (target.height < x.height || target.width < x.width) {
    throw std::invalid_argument("upsample: invalid target " + to_string(target) + " for " + to_string(x.extent()));
  }
  return resample_with(x, target, target == x.extent() ? ResampleKind::Identity : ResampleKind::Bilinear);
}

LatentMap resize(const LatentMap& x, Extent target) {
  return resample_with(x, target, resample_kind(x.extent(), target));
}

// ---- quantization -------------------------------------------------------------

int nearest_entry(std::span<const double> v, const Codebook& codebook) {
  if (codebook.size() == 0) throw std::invalid_argument("quantize: empty codebook");
  if (v.size() != codebook.dim()) throw std::invalid_argument("quantize: vector/codebook dimension mismatch");
  // Partial-distance search: abandon an entry once it exceeds the best so far.
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const std::size_t dim = codebook.dim();
  for (std::size_t i = 0; i < codebook.size(); ++i) {
    const double* e = codebook.entries().data() + i * dim;
    double d = 0.0;
    std::size_t c = 0;
    for (; c < dim; ++c) {
      const double diff = v[c] - e[c];
      d += diff * diff;
      if (d > best_d) break;
    }
    if (c == dim && d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

TokenMap quantize(const LatentMap& latent, const Codebook& codebook) {
  if (codebook.size() == 0) throw std::invalid_argument("quantize: empty codebook");
  if (latent.channels != codebook.dim()) {
    throw std::invalid_argument("quantize: latent has " + std::to_string(latent.channels) +
                                " channels, codebook dim is " + std::to_string(codebook.dim()));
  }
  TokenMap out{latent.height, latent.width, std::vector<int>(latent.height * latent.width), latent.scale};
  const auto v = latent.interleaved();
  for (std::size_t i = 0; i < out.indices.size(); ++i) {
    out.indices[i] = nearest_entry({v.data() + i * latent.channels, latent.channels}, codebook);
  }
  return out;
}

LatentMap lookup(const Codebook& codebook, const TokenMap& tokens) {
  LatentMap out(codebook.dim(), tokens.height, tokens.width);
  out.scale = tokens.scale;
  const std::size_t hw = tokens.height * tokens.width;
  for (std::size_t i = 0; i < hw; ++i) {
    const int t = tokens.indices[i];
    if (t < 0 || static_cast<std::size_t>(t) >= codebook.size()) {
      throw std::out_of_range("lookup: token " + std::to_string(t) + " outside codebook");
    }
    const auto e = codebook.entry(std::size_t(t));
    for (std::size_t c = 0; c < codebook.dim(); ++c) out.values[c * hw + i] = e[c];
  }
  return out;
}

// ---- residual chain -------------------------------------------------------------

std::vector<TokenMap> residual_decompose(const LatentMap& f, const ScaleSchedule& schedule,
                                         const Codebook& codebook) {
  if (f.extent() != schedule.final()) {
    throw std::invalid_argument("residual_decompose: latent " + to_string(f.extent()) +
                                " does not match final scale " + to_string(schedule.final()));
  }
  std::vector<TokenMap> tokens;
  LatentMap rest = f;
  std::vector<double> next(rest.values.size());
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    TokenMap r = quantize(downsample(rest, schedule[k]), codebook);
    r.scale = int(k);
    const LatentMap back = upsample(lookup(codebook, r), schedule.final());
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < rest.values.size(); ++i) {
      next[i] = rest.values[i] - back.values[i];
      before += rest.values[i] * rest.values[i];
      after += next[i] * next[i];
    }
    if (codebook.null_entry() >= 0 && after > before) {
      std::fill(r.indices.begin(), r.indices.end(), codebook.null_entry());
    } else {
      rest.values.swap(next);
    }
    tokens.push_back(std::move(r));
  }
  return tokens;
}

LatentMap accumulate(std::span<const TokenMap> tokens, std::size_t count, const Codebook& codebook,
                     Extent target) {
  if (count > tokens.size()) throw std::invalid_argument("reconstruct: missing scale " + std::to_string(tokens.size()));
  LatentMap acc(codebook.dim(), target.height, target.width);
  for (std::size_t m = 0; m < count; ++m) {
    const LatentMap up = upsample(lookup(codebook, tokens[m]), target);
    for (std::size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += up.values[i];
  }
  return acc;
}

LatentMap reconstruct(std::span<const TokenMap> tokens, const ScaleSchedule& schedule,
                      const Codebook& codebook, std::size_t target_scale) {
  if (target_scale >= schedule.size()) throw std::invalid_argument("reconstruct: target scale out of range");
  if (tokens.size() <= target_scale) {
    throw std::invalid_argument("reconstruct: missing scale " + std::to_string(tokens.size()));
  }
  for (std::size_t m = 0; m <= target_scale; ++m) {
    if (tokens[m].extent() != schedule[m]) {
      throw std::invalid_argument("reconstruct: token map " + std::to_string(m) + " has shape " +
                                  to_string(tokens[m].extent()) + ", schedule says " + to_string(schedule[m]));
    }
  }
  LatentMap out = accumulate(tokens, target_scale + 1, codebook, schedule[target_scale]);
  out.scale = int(target_scale);
  return out;
}

std::vector<TokenMap> full_scale_targets(const LatentMap& z, const ScaleSchedule& schedule,
                                         const Codebook& codebook) {
  if (z.extent() != schedule.final()) {
    throw std::invalid_argument("full_scale_targets: latent " + to_string(z.extent()) +
                                " does not match final scale " + to_string(schedule.final()));
  }
  std::vector<TokenMap> out;
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    TokenMap u = quantize(downsample(z, schedule[k]), codebook);
    u.scale = int(k);
    out.push_back(std::move(u));
  }
  return out;
}

// ---- k-means ------------------------------------------------------------------------

namespace {

double sq_dist(const double* a, const double* b, std::size_t dim) {
  double d = 0.0;
  for (std::size_t c = 0; c < dim; ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
  return d;
}

std::size_t count_distinct(std::span<const double> vectors, std::size_t dim) {
  std::vector<std::vector<double>> rows;
  const std::size_t n = vectors.size() / dim;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rows.emplace_back(vectors.begin() + i * dim, vectors.begin() + (i + 1) * dim);
  std::sort(rows.begin(), rows.end());
  return std::size_t(std::unique(rows.begin(), rows.end()) - rows.begin());
}

}  // namespace

Codebook fit_codebook(std::span<const double> vectors, std::size_t dim, std::size_t size, Rng& rng,
                      const KMeansOptions& opts) {
  if (dim == 0 || size == 0 || vectors.size() % dim) throw std::invalid_argument("fit_codebook: bad dimensions");
  const std::size_t n = vectors.size() / dim;
  const std::size_t distinct = count_distinct(vectors, dim);
  if (distinct < size) {
    throw std::invalid_argument("fit_codebook: " + std::to_string(distinct) + " distinct vectors, need " +
                                std::to_string(size));
  }
  const double* data = vectors.data();

  // k-means++ seeding.
  std::vector<double> centers;
  centers.reserve(size * dim);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = std::size_t(rng.below(n));
  for (std::size_t c = 0; c < size; ++c) {
    centers.insert(centers.end(), data + pick * dim, data + (pick + 1) * dim);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(data + i * dim, centers.data() + c * dim, dim));
      total += d2[i];
    }
    if (c + 1 == size) break;
    double target = rng.uniform() * total;
    pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (d2[i] <= 0.0) continue;
      target -= d2[i];
      pick = i;
      if (target < 0.0) break;
    }
  }

  // Lloyd iterations.
  std::vector<std::size_t> assign(n, 0);
  std::vector<double> dist(n, 0.0);
  for (std::size_t iter = 0; iter < opts.max_iterations; ++iter) {
    const Codebook current(size, dim, centers);
    bool changed = iter == 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto a = std::size_t(nearest_entry({data + i * dim, dim}, current));
      if (a != assign[i]) changed = true;
      assign[i] = a;
      dist[i] = sq_dist(data + i * dim, centers.data() + a * dim, dim);
    }
    if (!changed) break;
    std::vector<double> sums(size * dim, 0.0);
    std::vector<std::size_t> counts(size, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t c = 0; c < dim; ++c) sums[assign[i] * dim + c] += data[i * dim + c];
    }
    for (std::size_t k = 0; k < size; ++k) {
      if (counts[k] == 0) {
        // Re-seed an empty cluster at the worst-served point.
        const std::size_t far = std::size_t(std::max_element(dist.begin(), dist.end()) - dist.begin());
        std::copy_n(data + far * dim, dim, centers.begin() + std::ptrdiff_t(k * dim));
        dist[far] = 0.0;
        continue;
      }
      for (std::size_t c = 0; c < dim; ++c) centers[k * dim + c] = sums[k * dim + c] / double(counts[k]);
    }
  }
  return Codebook(size, dim, std::move(centers));
}

Codebook fit_codebook(std::span<const LatentMap> latents, std::size_t size, Rng& rng, const KMeansOptions& opts) {
  if (latents.empty()) throw std::invalid_argument("fit_codebook: no latents");
  const std::size_t dim = latents.front().channels;
  std::vector<double> vectors;
  for (const LatentMap& l : latents) {
    if (l.channels != dim) throw std::invalid_argument("fit_codebook: latent channel counts differ");
    const auto v = l.interleaved();
    vectors.insert(vectors.end(), v.begin(), v.end());
  }
  return fit_codebook(vectors, dim, size, rng, opts);
}

namespace {

// Dense weights of Up(scale k -> final): column p is the upsampled unit impulse at p.
std::vector<Eigen::MatrixXd> upsample_matrices(const ScaleSchedule& schedule) {
  std::vector<Eigen::MatrixXd> out;
  const Extent fin = schedule.final();
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    const Extent e = schedule[k];
    Eigen::MatrixXd m(Eigen::Index(fin.area()), Eigen::Index(e.area()));
    for (std::size_t p = 0; p < e.area(); ++p) {
      LatentMap impulse(1, e.height, e.width);
      impulse.values[p] = 1.0;
      const LatentMap u = upsample(impulse, fin);
      for (std::size_t f = 0; f < fin.area(); ++f) m(Eigen::Index(f), Eigen::Index(p)) = u.values[f];
    }
    out.push_back(std::move(m));
  }
  return out;
}

}  // namespace

namespace {

// Worst per-latent squared reconstruction error when balancing, else the total.
double fit_score(std::span<const LatentMap> latents, const ScaleSchedule& schedule, const Codebook& book,
                 const ResidualFitOptions& opts) {
  double worst = 0.0, total = 0.0;
  for (const LatentMap& z : latents) {
    const LatentMap rec = accumulate(residual_decompose(z, schedule, book), schedule.size(), book, schedule.final());
    double e = 0.0;
    for (std::size_t i = 0; i < z.values.size(); ++i) e += (z.values[i] - rec.values[i]) * (z.values[i] - rec.values[i]);
    worst = std::max(worst, e);
    total += e;
  }
  return opts.balance > 0.0 ? worst : total;
}

Codebook fit_residual_once(std::span<const LatentMap> latents, const ScaleSchedule& schedule, std::size_t size,
                           Rng& rng, const ResidualFitOptions& opts) {
  const std::size_t dim = latents.front().channels;
  const std::size_t first = opts.reserve_null ? 1 : 0;
  auto cluster = [&](const std::vector<double>& vectors) {
    const Codebook free = fit_codebook(vectors, dim, size - first, rng, opts.kmeans);
    std::vector<double> entries(first * dim, 0.0);
    entries.insert(entries.end(), free.entries().begin(), free.entries().end());
    return Codebook(size, dim, std::move(entries));
  };
  std::vector<double> vectors;
  for (const LatentMap& z : latents) {
    for (std::size_t k = 0; k < schedule.size(); ++k) {
      const auto v = downsample(z, schedule[k]).interleaved();
      vectors.insert(vectors.end(), v.begin(), v.end());
    }
  }
  Codebook book = cluster(vectors);
  for (std::size_t round = 0; round < opts.kmeans_rounds; ++round) {
    vectors.clear();
    for (const LatentMap& z : latents) {
      LatentMap rest = z;
      for (std::size_t k = 0; k < schedule.size(); ++k) {
        const LatentMap down = downsample(rest, schedule[k]);
        const auto v = down.interleaved();
        vectors.insert(vectors.end(), v.begin(), v.end());
        const LatentMap back = upsample(lookup(book, quantize(down, book)), schedule.final());
        for (std::size_t i = 0; i < rest.values.size(); ++i) rest.values[i] -= back.values[i];
      }
    }
    book = cluster(vectors);
  }
  if (opts.refine_rounds == 0) return book;

  // With the token assignments fixed, the full-resolution reconstruction is
  // linear in the entries, so each round solves the joint least-squares fit,
  // moves a damped step towards it and re-decomposes.
  const auto up = upsample_matrices(schedule);
  const std::size_t fin = schedule.final().area(), n = latents.size();
  const auto rows = Eigen::Index(fin * n);
  Eigen::MatrixXd target(rows, Eigen::Index(dim));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < fin; ++f) {
      for (std::size_t c = 0; c < dim; ++c) target(Eigen::Index(i * fin + f), Eigen::Index(c)) = latents[i].values[c * fin + f];
    }
  }
  Codebook best = book;
  double best_score = std::numeric_limits<double>::infinity();
  std::vector<double> per(n, 0.0);
  for (std::size_t round = 0; round < opts.refine_rounds; ++round) {
    Eigen::MatrixXd design = Eigen::MatrixXd::Zero(rows, Eigen::Index(size));
    std::vector<std::pair<double, std::vector<double>>> misses;
    double sse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      per[i] = 0.0;
      const auto tokens = residual_decompose(latents[i], schedule, book);
      for (std::size_t k = 0; k < schedule.size(); ++k) {
        for (std::size_t p = 0; p < tokens[k].indices.size(); ++p) {
          design.block(Eigen::Index(i * fin), tokens[k].indices[p], Eigen::Index(fin), 1) += up[k].col(Eigen::Index(p));
        }
      }
      const LatentMap rec = accumulate(tokens, schedule.size(), book, schedule.final());
      for (std::size_t f = 0; f < fin; ++f) {
        std::vector<double> r(dim);
        double e = 0.0;
        for (std::size_t c = 0; c < dim; ++c) {
          r[c] = latents[i].values[c * fin + f] - rec.values[c * fin + f];
          e += r[c] * r[c];
        }
        sse += e;
        per[i] += e;
        misses.emplace_back(e, std::move(r));
      }
    }
    const double worst = *std::max_element(per.begin(), per.end());
    const double score = opts.balance > 0.0 ? worst : sse;
    if (score < best_score) {
      best_score = score;
      best = book;
    }
    // Rows of latent i weigh (sse_i / mean)^balance, favouring the worst served.
    Eigen::VectorXd w = Eigen::VectorXd::Ones(rows);
    const double mean_sse = sse / double(n);
    if (opts.balance > 0.0 && mean_sse > 0.0) {
      for (std::size_t i = 0; i < n; ++i) {
        w.segment(Eigen::Index(i * fin), Eigen::Index(fin)).setConstant(std::pow(per[i] / mean_sse, opts.balance));
      }
    }
    const auto free = Eigen::Index(size - first);
    const Eigen::MatrixXd a = design.rightCols(free);
    const Eigen::MatrixXd wa = w.asDiagonal() * a;
    const Eigen::MatrixXd gram = a.transpose() * wa + opts.ridge * Eigen::MatrixXd::Identity(free, free);
    const Eigen::MatrixXd solved = gram.ldlt().solve(wa.transpose() * target);
    std::vector<double> entries(book.entries());
    for (std::size_t v = first; v < size; ++v) {
      for (std::size_t c = 0; c < dim; ++c) {
        entries[v * dim + c] = opts.damping * solved(Eigen::Index(v - first), Eigen::Index(c)) +
                               (1.0 - opts.damping) * entries[v * dim + c];
      }
    }
    // Unused entries move to the worst-served full-resolution residuals.
    std::stable_sort(misses.begin(), misses.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::size_t next = 0;
    for (std::size_t v = first; v < size && next < misses.size(); ++v) {
      if (design.col(Eigen::Index(v)).squaredNorm() == 0.0) {
        std::copy(misses[next].second.begin(), misses[next].second.end(), entries.begin() + std::ptrdiff_t(v * dim));
        ++next;
      }
    }
    book = Codebook(size, dim, std::move(entries));
  }
  return best;
}

}  // namespace

Codebook fit_residual_codebook(std::span<const LatentMap> latents, const ScaleSchedule& schedule,
                               std::size_t size, Rng& rng, const ResidualFitOptions& opts) {
  if (latents.empty()) throw std::invalid_argument("fit_residual_codebook: no latents");
  const std::size_t dim = latents.front().channels;
  for (const LatentMap& z : latents) {
    if (z.channels != dim || z.extent() != schedule.final()) {
      throw std::invalid_argument("fit_residual_codebook: latent " + to_string(z.extent()) +
                                  " does not match final scale " + to_string(schedule.final()));
    }
  }
  if (size <= (opts.reserve_null ? 1u : 0u)) throw std::invalid_argument("fit_residual_codebook: codebook too small");
  if (opts.restarts == 0) throw std::invalid_argument("fit_residual_codebook: restarts must be >= 1");
  Codebook best = fit_residual_once(latents, schedule, size, rng, opts);
  if (opts.restarts == 1) return best;
  double best_score = fit_score(latents, schedule, best, opts);
  for (std::size_t r = 1; r < opts.restarts; ++r) {
    Codebook book = fit_residual_once(latents, schedule, size, rng, opts);
    const double score = fit_score(latents, schedule, book, opts);
    if (score < best_score) {
      best_score = score;
      best = std::move(book);
    }
  }
  return best;
}

std::string tokens_csv(std::span<const TokenMap> tokens) {
  std::ostringstream os;
  os << "scale,height,width,row,indices\n";
  for (const TokenMap& t : tokens) {
    for (std::size_t y = 0; y < t.height; ++y) {
      os << t.scale + 1 << ',' << t.height << ',' << t.width << ',' << y << ',';
      for (std::size_t x = 0; x < t.width; ++x) os << (x ? " " : "") << t.at(y, x);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace avar
