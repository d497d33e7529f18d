#include "alignvar/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace avar {

namespace {

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

double latent_mse(const LatentMap& a, const LatentMap& b) {
  if (a.values.size() != b.values.size() || a.values.empty()) throw std::invalid_argument("latent shapes differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
  return s / double(a.values.size());
}

std::string scale_list(const std::vector<std::size_t>& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + std::to_string(s[i] + 1);
  return out;
}

}  // namespace

// ---- per-scale prediction error ----------------------------------------------

double ScaleErrorProfile::leading_mean(std::size_t count) const {
  if (count == 0 || count > mse.size()) throw std::invalid_argument("leading_mean: bad scale count");
  return std::accumulate(mse.begin(), mse.begin() + std::ptrdiff_t(count), 0.0) / double(count);
}

ScaleErrorProfile scale_error_profile(const std::vector<std::vector<LatentMap>>& cumulative,
                                      const std::vector<std::vector<TokenMap>>& u_gt, const Codebook& codebook) {
  if (cumulative.empty()) throw std::invalid_argument("scale_error_profile: empty dataset");
  if (cumulative.size() != u_gt.size()) throw std::invalid_argument("scale_error_profile: prediction/target count mismatch");
  ScaleErrorProfile p;
  p.samples = cumulative.size();
  p.mse.assign(cumulative.front().size(), 0.0);
  for (std::size_t i = 0; i < cumulative.size(); ++i) {
    if (cumulative[i].size() != p.mse.size() || u_gt[i].size() != p.mse.size()) {
      throw std::invalid_argument("scale_error_profile: sample " + std::to_string(i) + " has the wrong scale count");
    }
    for (std::size_t k = 0; k < p.mse.size(); ++k) {
      const LatentMap target = lookup(codebook, u_gt[i][k]);
      if (target.extent() != cumulative[i][k].extent() || target.channels != cumulative[i][k].channels) {
        throw std::invalid_argument("scale_error_profile: scale " + std::to_string(k + 1) + " shape mismatch");
      }
      p.mse[k] += latent_mse(cumulative[i][k], target);
    }
  }
  for (double& v : p.mse) v /= double(p.samples);
  return p;
}

std::vector<TokenMap> teacher_forced_tokens(const AlignVar& model, const Sample& sample) {
  const ScaleSchedule& sched = model.schedule();
  const std::size_t V = model.config.model.vocab;
  const ModelInput* view[] = {&sample.input};
  const auto out = model.predictor->forward(view, sched.size());
  std::vector<TokenMap> tokens;
  for (std::size_t k = 0; k < sched.size(); ++k) {
    const auto logits = out.scale_logits[k].data();
    TokenMap t{sched[k].height, sched[k].width, std::vector<int>(sched[k].area()), int(k)};
    for (std::size_t i = 0; i < t.indices.size(); ++i) {
      const auto row = logits.subspan(i * V, V);
      t.indices[i] = int(std::max_element(row.begin(), row.end()) - row.begin());
    }
    tokens.push_back(std::move(t));
  }
  return tokens;
}

ScaleErrorProfile per_scale_mse(const AlignVar& model, std::span<const Sample> samples, std::size_t threads) {
  if (samples.empty()) throw std::invalid_argument("per_scale_mse: empty dataset");
  const ScaleSchedule& sched = model.schedule();
  std::vector<std::vector<LatentMap>> cumulative(samples.size());
  std::vector<std::vector<TokenMap>> targets(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const auto tokens = teacher_forced_tokens(model, samples[i]);
    for (std::size_t k = 0; k < sched.size(); ++k) {
      cumulative[i].push_back(accumulate(tokens, k + 1, model.tokenizer.codebook, sched[k]));
    }
    targets[i] = samples[i].u_gt;
  });
  return scale_error_profile(cumulative, targets, model.tokenizer.codebook);
}

// ---- perturbation ------------------------------------------------------------

const PerturbationRow& PerturbationReport::at(std::size_t target, std::size_t level) const {
  return rows.at(target * sigmas.size() + level);
}

PerturbationReport perturbation_probe(const AlignVar& model, std::span<const Image> lr,
                                      const PerturbationOptions& opts, std::size_t threads) {
  if (lr.empty()) throw std::invalid_argument("perturbation_probe: no inputs");
  if (opts.repeats == 0) throw std::invalid_argument("perturbation_probe: repeats must be >= 1");
  const std::size_t K = model.schedule().size();
  for (const auto& t : opts.targets) {
    if (t.empty()) throw std::invalid_argument("perturbation_probe: empty scale set");
    for (std::size_t s : t) {
      if (s >= K) throw std::invalid_argument("perturbation_probe: scale " + std::to_string(s + 1) + " outside the schedule");
    }
  }
  for (double s : opts.sigmas) {
    if (!(s >= 0.0)) throw std::invalid_argument("perturbation_probe: noise levels must be >= 0");
  }
  PerturbationReport rep;
  rep.targets = opts.targets;
  rep.sigmas = opts.sigmas;
  const std::size_t cells = opts.targets.size() * opts.sigmas.size();
  // [item][cell] accumulated over repeats
  std::vector<std::vector<double>> lat(lr.size(), std::vector<double>(cells, 0.0)), img = lat;
  parallel_for(lr.size(), threads, [&](std::size_t i) {
    const InferResult base = infer(model, lr[i]);
    for (std::size_t t = 0; t < opts.targets.size(); ++t) {
      for (std::size_t l = 0; l < opts.sigmas.size(); ++l) {
        for (std::size_t r = 0; r < opts.repeats; ++r) {
          DecodeOptions d;
          d.perturb_scales = opts.targets[t];
          d.perturb_sigma = opts.sigmas[l];
          d.perturb_seed = Rng(opts.seed, i).fork(r).next_u64();
          d.perturb_pre_gate = opts.pre_gate;
          const InferResult p = infer(model, lr[i], d);
          lat[i][t * opts.sigmas.size() + l] += latent_mse(p.latent, base.latent);
          img[i][t * opts.sigmas.size() + l] += mse(p.sr, base.sr);
        }
      }
    }
  });
  for (std::size_t t = 0; t < opts.targets.size(); ++t) {
    for (std::size_t l = 0; l < opts.sigmas.size(); ++l) {
      PerturbationRow row{opts.targets[t], opts.sigmas[l], 0.0, 0.0};
      double e = 0.0;
      for (std::size_t i = 0; i < lr.size(); ++i) {
        row.latent_mse += lat[i][t * opts.sigmas.size() + l];
        e += img[i][t * opts.sigmas.size() + l];
      }
      const double n = double(lr.size() * opts.repeats);
      row.latent_mse /= n;
      e /= n;
      row.psnr = e == 0.0 ? std::numeric_limits<double>::infinity() : 10.0 * std::log10(1.0 / e);
      rep.rows.push_back(std::move(row));
    }
  }
  return rep;
}

// ---- Canny and edge IoU --------------------------------------------------------

std::size_t EdgeMask::count() const { return std::size_t(std::count(on.begin(), on.end(), std::uint8_t(1))); }

EdgeMask canny(const Image& img, const CannyOptions& opts) {
  if (img.pixels.empty()) throw std::invalid_argument("canny: empty image");
  if (!(opts.low >= 0.0 && opts.low <= opts.high)) throw std::invalid_argument("canny: need 0 <= low <= high");
  const Image gray = gaussian_blur(img.channels == 1 ? img : to_luminance(img), opts.sigma);
  const std::size_t H = gray.height, W = gray.width;
  auto px = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    y = std::clamp<std::ptrdiff_t>(y, 0, std::ptrdiff_t(H) - 1);
    x = std::clamp<std::ptrdiff_t>(x, 0, std::ptrdiff_t(W) - 1);
    return gray.pixels[std::size_t(y) * W + std::size_t(x)];
  };
  std::vector<double> mag(H * W), gx(H * W), gy(H * W);
  double peak = 0.0;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const auto iy = std::ptrdiff_t(y), ix = std::ptrdiff_t(x);
      const double dx = (px(iy - 1, ix + 1) + 2 * px(iy, ix + 1) + px(iy + 1, ix + 1)) -
                        (px(iy - 1, ix - 1) + 2 * px(iy, ix - 1) + px(iy + 1, ix - 1));
      const double dy = (px(iy + 1, ix - 1) + 2 * px(iy + 1, ix) + px(iy + 1, ix + 1)) -
                        (px(iy - 1, ix - 1) + 2 * px(iy - 1, ix) + px(iy - 1, ix + 1));
      const std::size_t i = y * W + x;
      gx[i] = dx;
      gy[i] = dy;
      mag[i] = std::hypot(dx, dy);
      peak = std::max(peak, mag[i]);
    }
  }
  EdgeMask out{H, W, std::vector<std::uint8_t>(H * W, 0)};
  if (peak <= 1e-12) return out;
  auto m_at = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
    if (y < 0 || x < 0 || y >= std::ptrdiff_t(H) || x >= std::ptrdiff_t(W)) return 0.0;
    return mag[std::size_t(y) * W + std::size_t(x)];
  };
  // 0 weak candidate, 1 strong, 2 suppressed
  std::vector<std::uint8_t> cls(H * W, 2);
  const double lo = opts.low * peak, hi = opts.high * peak;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const std::size_t i = y * W + x;
      if (mag[i] < lo || mag[i] <= 0.0) continue;
      double deg = std::atan2(gy[i], gx[i]) * 180.0 / M_PI;
      if (deg < 0) deg += 180.0;
      std::ptrdiff_t sx = 1, sy = 0;
      if (deg >= 22.5 && deg < 67.5) {
        sx = 1, sy = 1;
      } else if (deg >= 67.5 && deg < 112.5) {
        sx = 0, sy = 1;
      } else if (deg >= 112.5 && deg < 157.5) {
        sx = -1, sy = 1;
      }
      const auto iy = std::ptrdiff_t(y), ix = std::ptrdiff_t(x);
      // Ties go to the pixel on the positive side.
      if (mag[i] > m_at(iy - sy, ix - sx) && mag[i] >= m_at(iy + sy, ix + sx)) cls[i] = mag[i] >= hi ? 1 : 0;
    }
  }
  std::deque<std::size_t> queue;
  for (std::size_t i = 0; i < H * W; ++i) {
    if (cls[i] == 1) {
      out.on[i] = 1;
      queue.push_back(i);
    }
  }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const auto y = std::ptrdiff_t(i / W), x = std::ptrdiff_t(i % W);
    for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
      for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
        const std::ptrdiff_t ny = y + dy, nx = x + dx;
        if (ny < 0 || nx < 0 || ny >= std::ptrdiff_t(H) || nx >= std::ptrdiff_t(W)) continue;
        const std::size_t j = std::size_t(ny) * W + std::size_t(nx);
        if (cls[j] == 0 && !out.on[j]) {
          out.on[j] = 1;
          queue.push_back(j);
        }
      }
    }
  }
  return out;
}

double mask_iou(const EdgeMask& a, const EdgeMask& b) {
  if (a.height != b.height || a.width != b.width) throw std::invalid_argument("edge_iou: image shapes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.on.size(); ++i) {
    inter += a.on[i] && b.on[i];
    uni += a.on[i] || b.on[i];
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

EdgeMask dilate(const EdgeMask& m) {
  EdgeMask out = m;
  const auto H = std::ptrdiff_t(m.height), W = std::ptrdiff_t(m.width);
  for (std::ptrdiff_t y = 0; y < H; ++y) {
    for (std::ptrdiff_t x = 0; x < W; ++x) {
      if (!m.on[std::size_t(y * W + x)]) continue;
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
          if (y + dy >= 0 && y + dy < H && x + dx >= 0 && x + dx < W) out.on[std::size_t((y + dy) * W + x + dx)] = 1;
        }
      }
    }
  }
  return out;
}

double edge_iou(const Image& pred, const Image& gt, const CannyOptions& opts) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw std::invalid_argument("edge_iou: image shapes differ (" + std::to_string(pred.height) + "x" +
                                std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" +
                                std::to_string(gt.width) + ")");
  }
  return mask_iou(canny(pred, opts), canny(gt, opts));
}

// ---- attention locality --------------------------------------------------------

const LocalityEntry& LocalityReport::at(std::size_t layer, std::size_t head, std::size_t block) const {
  if (layer >= layers || head >= heads || block >= blocks) throw std::out_of_range("LocalityReport::at");
  return entries[(layer * heads + head) * blocks + block];
}

LocalityReport attention_locality(const AttentionRecord& record, const ScaleSchedule& schedule) {
  const std::size_t blocks = record.offsets.empty() ? 0 : record.offsets.size() - 1;
  if (blocks == 0 || blocks > schedule.size()) throw std::invalid_argument("attention_locality: record/schedule mismatch");
  const auto off = schedule.offsets();
  for (std::size_t k = 0; k <= blocks; ++k) {
    if (record.offsets[k] != off[k]) throw std::invalid_argument("attention_locality: record/schedule mismatch");
  }
  const std::size_t T = off[blocks];
  // normalized centre of every token
  std::vector<double> nx(T), ny(T);
  std::vector<std::size_t> block_of(T);
  for (std::size_t k = 0; k < blocks; ++k) {
    const Extent e = schedule[k];
    for (std::size_t i = 0; i < e.area(); ++i) {
      nx[off[k] + i] = (double(i % e.width) + 0.5) / double(e.width);
      ny[off[k] + i] = (double(i / e.width) + 0.5) / double(e.height);
      block_of[off[k] + i] = k;
    }
  }
  LocalityReport rep;
  rep.layers = record.layers.size();
  rep.blocks = blocks;
  rep.heads = record.layers.empty() ? 0 : record.layers.front().heads.size();
  for (std::size_t l = 0; l < rep.layers; ++l) {
    const auto& cap = record.layers[l];
    if (cap.tokens != T || cap.heads.size() != rep.heads) throw std::invalid_argument("attention_locality: record/schedule mismatch");
    for (std::size_t h = 0; h < rep.heads; ++h) {
      const auto& a = cap.heads[h];
      if (a.size() != T * T) throw std::invalid_argument("attention_locality: attention matrix has the wrong size");
      for (std::size_t k = 0; k < blocks; ++k) {
        const Extent e = schedule[k];
        double grid = 0.0, norm = 0.0;
        for (std::size_t q = off[k]; q < off[k + 1]; ++q) {
          for (std::size_t j = 0; j < T; ++j) {
            const double w = a[q * T + j];
            if (w == 0.0) continue;
            const double dx = nx[q] - nx[j], dy = ny[q] - ny[j];
            grid += w * std::hypot(dx * double(e.width), dy * double(e.height));
            norm += w * std::hypot(dx, dy);
          }
        }
        const double n = double(e.area());
        rep.entries.push_back({l, h, k, grid / n, norm / n});
      }
    }
  }
  return rep;
}

// ---- cost model ----------------------------------------------------------------

namespace {

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) throw std::overflow_error("cost_model: overflow");
  return a * b;
}

std::uint64_t checked_add(std::uint64_t a, std::uint64_t b) {
  if (b > std::numeric_limits<std::uint64_t>::max() - a) throw std::overflow_error("cost_model: overflow");
  return a + b;
}

}  // namespace

CostModel cost_model(std::uint64_t a, std::size_t k) {
  if (a < 2) throw std::invalid_argument("cost_model: ratio must be an integer > 1");
  if (k < 1) throw std::invalid_argument("cost_model: need at least one step");
  CostModel c{a, k, {}, {}, 0};
  std::uint64_t tokens = 0, area = 1;
  for (std::size_t i = 0; i < k; ++i) {
    tokens = checked_add(tokens, area);  // (a^{2(i+1)} - 1) / (a^2 - 1)
    c.tokens.push_back(tokens);
    c.costs.push_back(checked_mul(tokens, tokens));
    c.total = checked_add(c.total, c.costs.back());
    if (i + 1 < k) area = checked_mul(area, checked_mul(a, a));
  }
  return c;
}

double cost_slope(std::uint64_t a, std::span<const std::size_t> ks) {
  if (ks.size() < 2) throw std::invalid_argument("cost_slope: need at least two step counts");
  std::vector<double> x, y;
  for (std::size_t k : ks) {
    x.push_back(double(k - 1) * std::log(double(a)));
    y.push_back(std::log(double(cost_model(a, k).total)));
  }
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / double(x.size());
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / double(y.size());
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) throw std::invalid_argument("cost_slope: step counts must differ");
  return sxy / sxx;
}

std::vector<std::uint64_t> empirical_costs(const Predictor<float>& predictor, const ModelInput& input) {
  const auto& cfg = predictor.config();
  const ModelInput* view[] = {&input};
  std::vector<std::uint64_t> out;
  for (std::size_t k = 0; k < cfg.schedule.size(); ++k) {
    nd::AttentionCounter counter;
    predictor.forward(view, k + 1, nullptr, &counter);
    out.push_back(counter.score_pairs / (cfg.depth * cfg.heads));
  }
  return out;
}

// ---- CSV -----------------------------------------------------------------------

std::string profile_csv(const ScaleErrorProfile& p) {
  std::ostringstream os;
  os << "scale,mse,samples\n";
  for (std::size_t k = 0; k < p.mse.size(); ++k) os << k + 1 << ',' << num(p.mse[k]) << ',' << p.samples << '\n';
  return os.str();
}

std::string perturbation_csv(const PerturbationReport& r) {
  std::ostringstream os;
  os << "scales,sigma,latent_mse,psnr\n";
  for (const auto& row : r.rows) {
    os << scale_list(row.scales) << ',' << num(row.sigma) << ',' << num(row.latent_mse) << ',' << num(row.psnr) << '\n';
  }
  return os.str();
}

std::string locality_csv(const LocalityReport& r) {
  std::ostringstream os;
  os << "layer,head,scale,distance,normalized\n";
  for (const auto& e : r.entries) {
    os << e.layer << ',' << e.head << ',' << e.block + 1 << ',' << num(e.distance) << ',' << num(e.normalized) << '\n';
  }
  return os.str();
}

std::string cost_csv(const CostModel& c) {
  std::ostringstream os;
  os << "step,tokens,cost\n";
  for (std::size_t k = 0; k < c.steps; ++k) os << k + 1 << ',' << c.tokens[k] << ',' << c.costs[k] << '\n';
  os << "total,," << c.total << '\n';
  return os.str();
}

}  // namespace avar
