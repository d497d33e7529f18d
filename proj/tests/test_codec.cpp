#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "alignvar/codec.hpp"
#include "alignvar/data.hpp"

namespace avar {
namespace {

LatentMap random_latent(std::size_t c, std::size_t h, std::size_t w, Rng& rng, double scale = 1.0) {
  LatentMap m(c, h, w);
  for (double& v : m.values) v = rng.normal() * scale;
  return m;
}

Codebook random_codebook(std::size_t size, std::size_t dim, Rng& rng, bool null_first = false) {
  std::vector<double> e(size * dim);
  for (double& v : e) v = rng.normal();
  if (null_first) std::fill_n(e.begin(), dim, 0.0);
  return Codebook(size, dim, std::move(e));
}

int brute_nearest(std::span<const double> v, const Codebook& cb) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cb.size(); ++i) {
    double d = 0.0;
    for (std::size_t c = 0; c < v.size(); ++c) d += (v[c] - cb.entry(i)[c]) * (v[c] - cb.entry(i)[c]);
    if (d < best_d) {
      best_d = d;
      best = int(i);
    }
  }
  return best;
}

// Exact area pooling on the (src*dst) refinement of a 1-D axis, applied per axis.
std::vector<double> pool_oracle(const std::vector<double>& x, std::size_t sh, std::size_t sw, std::size_t dh,
                                std::size_t dw) {
  std::vector<double> out(dh * dw, 0.0);
  for (std::size_t i = 0; i < dh; ++i) {
    for (std::size_t j = 0; j < dw; ++j) {
      double acc = 0.0;
      for (std::size_t u = i * sh; u < (i + 1) * sh; ++u) {
        for (std::size_t v = j * sw; v < (j + 1) * sw; ++v) acc += x[(u / dh) * sw + v / dw];
      }
      out[i * dw + j] = acc / double(sh * sw);
    }
  }
  return out;
}

double full_res_error(const LatentMap& f, std::span<const TokenMap> tokens, std::size_t k, const Codebook& cb) {
  const LatentMap rec = accumulate(tokens, k, cb, f.extent());
  double s = 0.0;
  for (std::size_t i = 0; i < f.values.size(); ++i) s += (f.values[i] - rec.values[i]) * (f.values[i] - rec.values[i]);
  return std::sqrt(s);
}

const ScaleSchedule kDefault = ScaleSchedule::square({1, 2, 3, 4, 6, 8});

// ---- schedule -------------------------------------------------------------------

TEST(ScaleSchedule, OffsetsAndParsing) {
  const auto s = ScaleSchedule::parse("1,2,3");
  EXPECT_EQ(s.size(), 3u);
  EXPECT_EQ(s.offsets(), (std::vector<std::size_t>{0, 1, 5, 14}));
  EXPECT_EQ(s.total_tokens(), 14u);
  EXPECT_EQ(ScaleSchedule::parse("1x1,2x3").final(), (Extent{2, 3}));
  EXPECT_EQ(ScaleSchedule::parse(kDefault.str()), kDefault);
  EXPECT_THROW(ScaleSchedule::square({2, 2}), std::invalid_argument);
  EXPECT_THROW(ScaleSchedule::square(std::vector<std::size_t>{}), std::invalid_argument);
  EXPECT_THROW(ScaleSchedule::parse("1,x"), std::invalid_argument);
}

// ---- encode / decode ------------------------------------------------------------

TEST(Encode, ZeroImageGivesZeroLatent) {
  const auto codec = LinearCodec::dct({4, 1, 16});
  const LatentMap z = codec.encode(Image(1, 32, 32));
  for (double v : z.values) EXPECT_EQ(v, 0.0);
}

TEST(Encode, SpatialShape) {
  const auto codec = LinearCodec::dct({4, 1, 16});
  const LatentMap z = codec.encode(Image(1, 32, 32));
  EXPECT_EQ(z.channels, 16u);
  EXPECT_EQ(z.height, 8u);
  EXPECT_EQ(z.width, 8u);
  EXPECT_THROW(codec.encode(Image(1, 30, 32)), std::invalid_argument);
}

TEST(Encode, HandSetProjection) {
  // p = 2, two latent channels: sum and top-left minus bottom-right.
  const CodecConfig cfg{2, 1, 2};
  const LinearCodec codec(cfg, {1, 1, 1, 1, 1, 0, 0, -1}, {0.5, -0.25});
  Image img(1, 2, 2);
  img.pixels = {0.1, 0.2, 0.3, 0.4};
  const LatentMap z = codec.encode(img);
  EXPECT_DOUBLE_EQ(z.at(0, 0, 0), 0.1 + 0.2 + 0.3 + 0.4 + 0.5);
  EXPECT_DOUBLE_EQ(z.at(1, 0, 0), 0.1 - 0.4 - 0.25);
}

TEST(Decode, TiedRoundTrip) {
  const auto codec = LinearCodec::dct({4, 1, 16});
  Rng rng(2);
  Image img(1, 16, 24);
  for (double& v : img.pixels) v = rng.uniform();
  const Image back = codec.decode(codec.encode(img));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_NEAR(back.pixels[i], img.pixels[i], 1e-5);
}

TEST(Decode, ZeroLatentGivesBiasImage) {
  const CodecConfig cfg{2, 1, 2};
  const LinearCodec codec(cfg, {1, 0, 0, 0, 0, 1, 0, 0}, {0, 0}, {1, 0, 0, 1, 0, 0, 0, 0}, {0.1, 0.2, 0.3, 0.4});
  const Image img = codec.decode(LatentMap(2, 1, 1));
  EXPECT_EQ(img.pixels, (std::vector<double>{0.1, 0.2, 0.3, 0.4}));
  EXPECT_THROW(codec.decode(LatentMap(3, 1, 1)), std::invalid_argument);
}

TEST(Decode, FittedCodecRoundTripOnToySet) {
  const auto set = make_toyset(8, 64, 3);
  std::vector<Image> imgs;
  for (const auto& t : set) imgs.push_back(t.image);
  const auto codec = LinearCodec::fit_pca(imgs, {8, 1, 16});
  // Latents survive decode -> encode exactly up to rounding.
  Rng rng(4);
  const LatentMap l = random_latent(16, 8, 8, rng);
  const LatentMap again = codec.encode(codec.decode(l));
  double worst = 0.0;
  for (std::size_t i = 0; i < l.values.size(); ++i) worst = std::max(worst, std::abs(again.values[i] - l.values[i]));
  EXPECT_LT(worst, 1e-9);
  // Images reconstruct within a measured fidelity bound.
  for (const Image& img : imgs) EXPECT_GT(psnr(codec.decode(codec.encode(img)), img), 28.0);
}

// ---- quantize -------------------------------------------------------------------

TEST(Quantize, ExactEntry) {
  Rng rng(8);
  const Codebook cb = random_codebook(16, 4, rng);
  const auto e = cb.entry(5);
  EXPECT_EQ(nearest_entry(e, cb), 5);
}

TEST(Quantize, TieGoesToLowestIndex) {
  std::vector<double> e(10 * 2, 100.0);
  e[3 * 2] = 1.0, e[3 * 2 + 1] = 0.0;
  e[9 * 2] = -1.0, e[9 * 2 + 1] = 0.0;
  const Codebook cb(10, 2, e);
  const std::vector<double> v{0.0, 0.0};
  EXPECT_EQ(nearest_entry(v, cb), 3);
}

TEST(Quantize, MatchesExhaustiveScan) {
  Rng rng(13);
  const Codebook cb = random_codebook(64, 16, rng);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> v(16);
    for (double& x : v) x = rng.normal();
    EXPECT_EQ(nearest_entry(v, cb), brute_nearest(v, cb));
  }
}

TEST(Quantize, Errors) {
  Rng rng(1);
  const Codebook cb = random_codebook(4, 3, rng);
  EXPECT_THROW(quantize(LatentMap(2, 2, 2), cb), std::invalid_argument);
  EXPECT_THROW(nearest_entry(std::vector<double>(3, 0.0), Codebook()), std::invalid_argument);
  EXPECT_THROW(Codebook(2, 1, {0.0, std::nan("")}), std::invalid_argument);
}

class QuantizeOptimality : public ::testing::TestWithParam<int> {};

TEST_P(QuantizeOptimality, EveryPositionMinimizesDistance) {
  Rng rng(500 + GetParam());
  const std::size_t side = 1 + rng.below(8), v = 1 + rng.below(64), c = 1 + rng.below(16);
  const Codebook cb = random_codebook(v, c, rng);
  const LatentMap m = random_latent(c, side, side, rng);
  const TokenMap t = quantize(m, cb);
  ASSERT_EQ(t.indices.size(), side * side);
  const auto inter = m.interleaved();
  for (std::size_t p = 0; p < side * side; ++p) {
    EXPECT_EQ(t.indices[p], brute_nearest({inter.data() + p * c, c}, cb));
  }
}

INSTANTIATE_TEST_SUITE_P(RandomMaps, QuantizeOptimality, ::testing::Range(0, 50));

// ---- decomposition --------------------------------------------------------------

TEST(ResidualDecompose, SingleScaleIsPlainQuantization) {
  Rng rng(21);
  const Codebook cb = random_codebook(32, 4, rng);
  const LatentMap f = random_latent(4, 3, 3, rng);
  const auto tokens = residual_decompose(f, ScaleSchedule::square({3}), cb);
  ASSERT_EQ(tokens.size(), 1u);
  EXPECT_EQ(tokens[0].indices, quantize(f, cb).indices);
}

TEST(ResidualDecompose, ExactCoarseRepresentationTelescopes) {
  Rng rng(22);
  const Codebook cb = random_codebook(8, 4, rng, true);
  LatentMap f(4, 2, 2);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t p = 0; p < 4; ++p) f.values[c * 4 + p] = cb.entry(5)[c];
  }
  const auto sched = ScaleSchedule::square({1, 2});
  const auto tokens = residual_decompose(f, sched, cb);
  EXPECT_EQ(tokens[0].indices[0], 5);
  EXPECT_LE(full_res_error(f, tokens, 2, cb), full_res_error(f, tokens, 1, cb));
  EXPECT_NEAR(full_res_error(f, tokens, 1, cb), 0.0, 1e-12);
}

TEST(ResidualDecompose, RandomLatentErrorNonIncreasing) {
  Rng rng(23);
  const Codebook cb = random_codebook(64, 16, rng, true);
  const auto sched = ScaleSchedule::square({1, 2, 4, 8});
  const LatentMap f = random_latent(16, 8, 8, rng);
  const auto tokens = residual_decompose(f, sched, cb);
  double prev = full_res_error(f, tokens, 0, cb);
  for (std::size_t k = 1; k <= 4; ++k) {
    const double e = full_res_error(f, tokens, k, cb);
    EXPECT_LE(e, prev + 1e-6) << "scale " << k;
    prev = e;
  }
}

TEST(ResidualDecompose, RejectsResolutionMismatch) {
  Rng rng(24);
  const Codebook cb = random_codebook(4, 2, rng);
  EXPECT_THROW(residual_decompose(LatentMap(2, 4, 4), kDefault, cb), std::invalid_argument);
}

class Telescoping : public ::testing::TestWithParam<int> {};

TEST_P(Telescoping, FittedCodebookErrorNonIncreasing) {
  Rng rng(9000 + GetParam());
  std::vector<LatentMap> fs;
  for (int i = 0; i < 4; ++i) fs.push_back(random_latent(16, 8, 8, rng));
  ResidualFitOptions opts;
  opts.refine_rounds = 5;
  const Codebook cb = fit_residual_codebook(fs, kDefault, 32, rng, opts);
  ASSERT_EQ(cb.null_entry(), 0);
  for (const LatentMap& f : fs) {
    const auto tokens = residual_decompose(f, kDefault, cb);
    double prev = full_res_error(f, tokens, 0, cb);
    for (std::size_t k = 1; k <= kDefault.size(); ++k) {
      const double e = full_res_error(f, tokens, k, cb);
      EXPECT_LE(e, prev + 1e-6);
      prev = e;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(RandomLatents, Telescoping, ::testing::Range(0, 25));

// ---- reconstruct ----------------------------------------------------------------

TEST(Reconstruct, NativeSingleScaleIsLookup) {
  Rng rng(31);
  const Codebook cb = random_codebook(8, 3, rng);
  TokenMap t{2, 2, {1, 7, 3, 0}, 0};
  const LatentMap r = reconstruct(std::vector<TokenMap>{t}, ScaleSchedule::square({2}), cb, 0);
  EXPECT_EQ(r.values, lookup(cb, t).values);
}

TEST(Reconstruct, ZeroTokensWithNullEntryGiveZero) {
  Rng rng(32);
  const Codebook cb = random_codebook(8, 3, rng, true);
  std::vector<TokenMap> tokens{{1, 1, {0}, 0}, {2, 2, {0, 0, 0, 0}, 1}};
  const LatentMap r = reconstruct(tokens, ScaleSchedule::square({1, 2}), cb, 1);
  for (double v : r.values) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(reconstruct(std::span<const TokenMap>(tokens).first(1), ScaleSchedule::square({1, 2}), cb, 1),
               std::invalid_argument);
}

TEST(Reconstruct, FinalErrorBelowFirstScaleError) {
  Rng rng(33);
  std::vector<LatentMap> fs;
  for (int i = 0; i < 4; ++i) fs.push_back(random_latent(16, 8, 8, rng));
  ResidualFitOptions opts;
  opts.refine_rounds = 20;
  const Codebook cb = fit_residual_codebook(fs, kDefault, 64, rng, opts);
  for (const LatentMap& f : fs) {
    const auto tokens = residual_decompose(f, kDefault, cb);
    auto err_at = [&](std::size_t k) {
      const LatentMap rec = reconstruct(tokens, kDefault, cb, k);
      const LatentMap ref = downsample(f, kDefault[k]);
      double s = 0.0;
      for (std::size_t i = 0; i < rec.values.size(); ++i) s += std::pow(rec.values[i] - ref.values[i], 2);
      return std::sqrt(s / double(rec.values.size()));
    };
    EXPECT_LT(full_res_error(f, tokens, kDefault.size(), cb), full_res_error(f, tokens, 1, cb));
    EXPECT_GT(err_at(0), 0.0);
  }
}

// ---- full-scale targets ---------------------------------------------------------

TEST(FullScaleTargets, FinalScaleIsPlainQuantization) {
  Rng rng(41);
  const Codebook cb = random_codebook(16, 4, rng);
  const LatentMap z = random_latent(4, 8, 8, rng);
  const auto u = full_scale_targets(z, kDefault, cb);
  ASSERT_EQ(u.size(), kDefault.size());
  EXPECT_EQ(u.back().indices, quantize(z, cb).indices);
}

TEST(FullScaleTargets, ConstantLatentEqualToEntrySeven) {
  Rng rng(42);
  const Codebook cb = random_codebook(16, 4, rng);
  LatentMap z(4, 8, 8);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t p = 0; p < 64; ++p) z.values[c * 64 + p] = cb.entry(7)[c];
  }
  for (const TokenMap& t : full_scale_targets(z, kDefault, cb)) {
    for (int i : t.indices) EXPECT_EQ(i, 7);
  }
}

TEST(FullScaleTargets, CheckerboardPoolsToHandValues) {
  // One channel, 1-pixel checker of +-1 on 8x8; scalar codebook on a fine grid.
  LatentMap z(1, 8, 8);
  for (std::size_t y = 0; y < 8; ++y) {
    for (std::size_t x = 0; x < 8; ++x) z.at(0, y, x) = (x + y) % 2 ? -1.0 : 1.0;
  }
  std::vector<double> grid;
  for (int i = -32; i <= 32; ++i) grid.push_back(i / 32.0);
  const Codebook cb(grid.size(), 1, grid);
  const auto u = full_scale_targets(z, kDefault, cb);
  for (std::size_t k = 0; k < kDefault.size(); ++k) {
    const auto e = kDefault[k];
    const auto pooled = pool_oracle(z.values, 8, 8, e.height, e.width);
    for (std::size_t p = 0; p < e.area(); ++p) {
      EXPECT_EQ(u[k].indices[p], brute_nearest({&pooled[p], 1}, cb)) << "scale " << k << " pos " << p;
    }
  }
  // Even scales cancel exactly. At 3x3 each axis pools the pixel signs with
  // weights (3/8, 3/8, 1/4), (1/8, 3/8, 3/8, 1/8), (1/4, 3/8, 3/8): sums 1/4, 0, -1/4.
  for (int i : u[1].indices) EXPECT_EQ(i, 32);
  const std::vector<double> hand{1.0 / 16, 0, -1.0 / 16, 0, 0, 0, -1.0 / 16, 0, 1.0 / 16};
  const auto p3 = downsample(z, {3, 3}).values;
  for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(p3[i], hand[i], 1e-15);
  EXPECT_EQ(u[2].indices, (std::vector<int>{34, 32, 30, 32, 32, 32, 30, 32, 34}));
}

// ---- resampling -----------------------------------------------------------------

TEST(Resample, ConstantMapsStayConstant) {
  for (const Extent src : {Extent{8, 8}, Extent{6, 6}, Extent{3, 5}}) {
    LatentMap m(2, src.height, src.width, 0.3);
    for (const Extent dst : {Extent{1, 1}, Extent{2, 3}, Extent{3, 3}, Extent{src.height, src.width}}) {
      if (dst.height > src.height || dst.width > src.width) continue;
      for (double v : downsample(m, dst).values) EXPECT_EQ(v, 0.3);
    }
    for (const Extent dst : {Extent{8, 8}, Extent{9, 11}, Extent{16, 16}}) {
      for (double v : upsample(m, dst).values) EXPECT_EQ(v, 0.3);
    }
  }
}

TEST(Resample, TwoByTwoAreaMean) {
  LatentMap m(1, 2, 2);
  m.values = {1, 3, 5, 7};
  EXPECT_EQ(downsample(m, {1, 1}).values, (std::vector<double>{4.0}));
}

TEST(Resample, AreaMatchesOraclePooling) {
  Rng rng(51);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t sh = 1 + rng.below(9), sw = 1 + rng.below(9);
    const std::size_t dh = 1 + rng.below(sh), dw = 1 + rng.below(sw);
    LatentMap m = random_latent(1, sh, sw, rng);
    const auto got = downsample(m, {dh, dw}).values;
    const auto want = pool_oracle(m.values, sh, sw, dh, dw);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Resample, UpThenDownRoundTripAtRatioTwo) {
  Rng rng(52);
  const LatentMap m = random_latent(3, 4, 4, rng);
  const LatentMap back = downsample(upsample(m, {8, 8}), {4, 4});
  const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < m.values.size(); ++i) worst = std::max(worst, std::abs(back.values[i] - m.values[i]));
  EXPECT_LT(worst, 0.25 * (*hi - *lo));
}

TEST(Resample, InvalidTargetsRejected) {
  const LatentMap m(1, 4, 4);
  EXPECT_THROW(downsample(m, {5, 4}), std::invalid_argument);
  EXPECT_THROW(upsample(m, {2, 8}), std::invalid_argument);
  EXPECT_THROW(resize(m, {2, 8}), std::invalid_argument);
  EXPECT_THROW(downsample(m, {0, 1}), std::invalid_argument);
}

// ---- codebook fitting -----------------------------------------------------------

TEST(FitCodebook, RecoversSeparatedClusters) {
  Rng rng(61);
  const std::size_t k = 8, dim = 3;
  std::vector<double> centers(k * dim), vectors;
  for (double& c : centers) c = rng.uniform(-20.0, 20.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (int n = 0; n < 200; ++n) {
      for (std::size_t c = 0; c < dim; ++c) vectors.push_back(centers[i * dim + c] + 0.05 * rng.normal());
    }
  }
  Rng fit_rng(1);
  const Codebook cb = fit_codebook(vectors, dim, k, fit_rng);
  for (std::size_t i = 0; i < k; ++i) {
    const int j = brute_nearest({&centers[i * dim], dim}, cb);
    double d = 0.0;
    for (std::size_t c = 0; c < dim; ++c) d += std::pow(cb.entry(std::size_t(j))[c] - centers[i * dim + c], 2);
    EXPECT_LT(std::sqrt(d), 0.1);
  }
}

TEST(FitCodebook, DistinctCountEqualsSizeReturnsInputs) {
  const std::vector<double> v{0, 0, 1, 1, 5, -2, 0, 0, 1, 1};
  Rng rng(3);
  const Codebook cb = fit_codebook(v, 2, 3, rng);
  std::set<std::pair<double, double>> got, want{{0, 0}, {1, 1}, {5, -2}};
  for (std::size_t i = 0; i < 3; ++i) got.insert({cb.entry(i)[0], cb.entry(i)[1]});
  EXPECT_EQ(got, want);
  Rng again(3);
  EXPECT_THROW(fit_codebook(v, 2, 4, again), std::invalid_argument);
}

TEST(FitCodebook, SameSeedSameEntries) {
  Rng data(5);
  std::vector<LatentMap> ls;
  for (int i = 0; i < 3; ++i) ls.push_back(random_latent(4, 4, 4, data));
  Rng a(77), b(77);
  EXPECT_EQ(fit_codebook(ls, 16, a), fit_codebook(ls, 16, b));
  ResidualFitOptions opts;
  opts.refine_rounds = 10;
  Rng c(78), d(78);
  const auto sched = ScaleSchedule::square({1, 2, 4});
  EXPECT_EQ(fit_residual_codebook(ls, sched, 16, c, opts), fit_residual_codebook(ls, sched, 16, d, opts));
}

TEST(FitResidualCodebook, RestartsKeepTheBestWorstLatent) {
  Rng data(9);
  std::vector<LatentMap> ls;
  for (int i = 0; i < 4; ++i) ls.push_back(random_latent(4, 4, 4, data));
  const auto sched = ScaleSchedule::square({1, 2, 4});
  auto worst = [&](const Codebook& cb) {
    double w = 0.0;
    for (const auto& z : ls) {
      const LatentMap rec = accumulate(residual_decompose(z, sched, cb), 3, cb, sched.final());
      double e = 0.0;
      for (std::size_t i = 0; i < z.values.size(); ++i) e += (z.values[i] - rec.values[i]) * (z.values[i] - rec.values[i]);
      w = std::max(w, e);
    }
    return w;
  };
  ResidualFitOptions opts;
  opts.refine_rounds = 5;
  opts.restarts = 1;
  Rng seq(40);
  std::vector<double> singles;
  for (int r = 0; r < 3; ++r) singles.push_back(worst(fit_residual_codebook(ls, sched, 8, seq, opts)));
  opts.restarts = 3;
  Rng once(40);
  EXPECT_DOUBLE_EQ(worst(fit_residual_codebook(ls, sched, 8, once, opts)),
                   *std::min_element(singles.begin(), singles.end()));
  opts.restarts = 0;
  EXPECT_THROW(fit_residual_codebook(ls, sched, 8, once, opts), std::invalid_argument);
}

TEST(TokensCsv, HeaderAndOneBasedScales) {
  const std::vector<TokenMap> t{{1, 2, {3, 4}, 0}};
  EXPECT_EQ(tokens_csv(t), "scale,height,width,row,indices\n1,1,2,0,3 4\n");
}

}  // namespace
}  // namespace avar
