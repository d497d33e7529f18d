#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "alignvar/analysis.hpp"
#include "alignvar/gradcheck.hpp"

using namespace avar;
using nd::Tensor;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Codebook random_codebook(std::size_t size, std::size_t dim, Rng& rng, bool null_entry = false) {
  std::vector<double> v(size * dim);
  for (auto& x : v) x = rng.normal();
  if (null_entry) std::fill(v.begin(), v.begin() + long(dim), 0.0);
  return Codebook(size, dim, std::move(v));
}

Tensor<double> cb_tensor(const Codebook& cb) { return Tensor<double>::from({cb.size(), cb.dim()}, cb.entries()); }

ModelInput random_input(const PredictorConfig& cfg, Rng& rng) {
  ModelInput in;
  const Extent f = cfg.schedule.final();
  in.cond = LatentMap(cfg.embed_dim, f.height, f.width);
  for (auto& v : in.cond.values) v = rng.normal();
  for (std::size_t k = 0; k < cfg.schedule.size(); ++k) {
    const Extent e = cfg.schedule[k];
    GuidanceMap g{e.height, e.width, std::vector<double>(e.area()), int(k)};
    for (auto& v : g.values) v = rng.uniform();
    in.guidance.push_back(g);
    TokenMap t{e.height, e.width, std::vector<int>(e.area()), int(k)};
    for (auto& v : t.indices) v = int(rng.below(cfg.vocab));
    in.context.push_back(t);
  }
  return in;
}

std::vector<const ModelInput*> ptrs(const std::vector<ModelInput>& v) {
  std::vector<const ModelInput*> p;
  for (const auto& x : v) p.push_back(&x);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

// ---- 1 ----------------------------------------------------------------------

Verdict quantizer_matches_scan() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  const Codebook cb = random_codebook(64, 16, rng);
  std::size_t mismatches = 0;
  for (int n = 0; n < 1000; ++n) {
    std::vector<double> v(16);
    for (auto& x : v) x = rng.normal();
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cb.size(); ++i) {
      const double d = sq_dist(v, cb.entry(i));
      if (d < best_d) {
        best_d = d;
        best = int(i);
      }
    }
    if (nearest_entry(v, cb) != best) ++mismatches;
  }
  const double s = seconds_since(t0);
  return {mismatches == 0 && s < 5.0, fmt("%zu mismatches over 1000 vectors, %.3f s", mismatches, s)};
}

// ---- 2 ----------------------------------------------------------------------

Verdict residual_error_non_increasing() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(202);
  const ScaleSchedule sched = ScaleSchedule::square({1, 2, 3, 4, 6, 8});
  std::vector<LatentMap> latents;
  for (int n = 0; n < 100; ++n) {
    LatentMap z(16, 8, 8);
    for (auto& v : z.values) v = rng.normal();
    latents.push_back(std::move(z));
  }
  ResidualFitOptions opts;
  opts.refine_rounds = 20;
  opts.restarts = 1;
  const Codebook fitted = fit_residual_codebook(latents, sched, 64, rng, opts);
  const Codebook raw = random_codebook(64, 16, rng, true);
  double worst_rise = -std::numeric_limits<double>::infinity();
  std::size_t violations = 0;
  for (const Codebook* cb : {&fitted, &raw}) {
    for (const auto& z : latents) {
      const auto tokens = residual_decompose(z, sched, *cb);
      double prev = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sched.size(); ++k) {
        const LatentMap rec = accumulate(tokens, k + 1, *cb, sched.final());
        const double e = sq_dist(z.values, rec.values);
        if (k > 0) worst_rise = std::max(worst_rise, e - prev);
        if (e > prev + 1e-6) ++violations;
        prev = e;
      }
    }
  }
  const double s = seconds_since(t0);
  return {violations == 0 && s < 10.0,
          fmt("%zu violations over 200 chains, largest step change %+.3e, %.3f s", violations, worst_rise, s)};
}

// ---- 3 ----------------------------------------------------------------------

PredictorConfig small_predictor() {
  PredictorConfig cfg;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.width = 16;
  cfg.vocab = 8;
  cfg.embed_dim = 4;
  cfg.mask_hidden = 6;
  cfg.schedule = ScaleSchedule::square({1, 2, 3});
  cfg.init_std = 0.3;
  return cfg;
}

Verdict gradient_checks() {
  Rng rng(303);
  std::vector<std::pair<std::string, double>> errs;

  {
    const PredictorConfig cfg = small_predictor();
    const Codebook cb = random_codebook(cfg.vocab, cfg.embed_dim, rng);
    Predictor<double> p(cfg, cb, rng);
    std::vector<double> ev(9 * 4), gv(9), wv(9);
    for (auto& v : ev) v = rng.normal();
    for (auto& v : gv) v = rng.uniform();
    for (auto& v : wv) v = rng.normal();
    const auto e = Tensor<double>::from({9, 4}, ev), g = Tensor<double>::from({9, 1}, gv);
    const auto w = Tensor<double>::from({9, 1}, wv);
    auto f = [&](nd::ParamStore<double>&) { return nd::sum(nd::mul(p.mask_generator(e, g, 2), w)); };
    errs.emplace_back("mask generator", nd::finite_diff_check(f, p.params()).max_rel_error);
  }
  {
    nd::ParamStore<double> ps;
    ps.add_normal("embed", {6, 4}, rng, 1.0);
    ps.add_normal("mask_logit", {6, 1}, rng, 1.0);
    std::vector<double> wv(24);
    for (auto& v : wv) v = rng.normal();
    const auto w = Tensor<double>::from({6, 4}, wv);
    auto f = [&](nd::ParamStore<double>& q) {
      return nd::sum(nd::mul(token_gate(q.get("embed"), nd::sigmoid(q.get("mask_logit"))), w));
    };
    errs.emplace_back("token gating", nd::finite_diff_check(f, ps).max_rel_error);
  }
  {
    const PredictorConfig cfg = small_predictor();
    const Codebook cb = random_codebook(cfg.vocab, cfg.embed_dim, rng);
    Predictor<double> p(cfg, cb, rng);
    std::vector<ModelInput> batch{random_input(cfg, rng), random_input(cfg, rng)};
    const auto view = ptrs(batch);
    std::vector<int> targets(2 * cfg.schedule.total_tokens());
    for (auto& t : targets) t = int(rng.below(cfg.vocab));
    auto f = [&](nd::ParamStore<double>&) {
      const auto out = p.forward(view, cfg.schedule.size());
      auto loss = nd::scale(nd::cross_entropy_sum(out.logits, targets), 1.0 / double(targets.size()));
      for (const auto& m : out.masks) loss = nd::add(loss, nd::mean(nd::square(m)));
      return loss;
    };
    errs.emplace_back("transformer", nd::finite_diff_check(f, p.params(), 1e-4, 1e-6).max_rel_error);
  }
  const ScaleSchedule sched = ScaleSchedule::square({1, 2, 3});
  {
    nd::ParamStore<double> ps;
    std::vector<std::vector<int>> targets;
    for (std::size_t k = 0; k < sched.size(); ++k) {
      ps.add_normal("logits" + std::to_string(k), {2 * sched[k].area(), 64}, rng, 1.0);
      std::vector<int> t(2 * sched[k].area());
      for (auto& v : t) v = int(rng.below(64));
      targets.push_back(t);
    }
    auto f = [&](nd::ParamStore<double>& q) {
      std::vector<Tensor<double>> logits;
      for (std::size_t k = 0; k < sched.size(); ++k) logits.push_back(q.get("logits" + std::to_string(k)));
      return ce_loss<double>(logits, targets).mean;
    };
    errs.emplace_back("cross-entropy", nd::finite_diff_check(f, ps).max_rel_error);
  }
  {
    const Codebook cb = random_codebook(6, 3, rng);
    const auto cbt = cb_tensor(cb);
    std::vector<std::vector<TokenMap>> gt(2);
    for (auto& t : gt) {
      for (std::size_t k = 0; k < sched.size(); ++k) {
        TokenMap m{sched[k].height, sched[k].width, std::vector<int>(sched[k].area()), int(k)};
        for (auto& v : m.indices) v = int(rng.below(6));
        t.push_back(m);
      }
    }
    std::vector<Tensor<double>> targets;
    for (std::size_t k = 0; k < sched.size(); ++k) targets.push_back(embed_targets<double>(gt, k, cbt));
    nd::ParamStore<double> ps;
    for (std::size_t k = 0; k < sched.size(); ++k) ps.add_normal("logits" + std::to_string(k), {2 * sched[k].area(), 6}, rng, 1.0);
    auto f = [&](nd::ParamStore<double>& q) {
      std::vector<Tensor<double>> probs;
      for (std::size_t k = 0; k < sched.size(); ++k) probs.push_back(nd::softmax(q.get("logits" + std::to_string(k))));
      const auto u = cumulative_predictions<double>(probs, cbt, sched, 2);
      return hcc_loss<double>(u, targets, sched, 2).value;
    };
    errs.emplace_back("consistency", nd::finite_diff_check(f, ps).max_rel_error);
  }
  bool ok = true;
  std::string detail;
  for (const auto& [name, e] : errs) {
    ok = ok && e < 1e-4;
    detail += fmt("%s%s %.2e", detail.empty() ? "" : ", ", name.c_str(), e);
  }
  return {ok, "max relative error: " + detail};
}

// ---- 4 ----------------------------------------------------------------------

Verdict block_causality() {
  Rng rng(404);
  PredictorConfig cfg;
  cfg.depth = 2;
  cfg.width = 32;
  const Codebook cb = random_codebook(cfg.vocab, cfg.embed_dim, rng);
  const Predictor<double> p(cfg, cb, rng);
  const std::size_t K = cfg.schedule.size();
  const auto off = p.offsets(K);
  std::vector<ModelInput> base{random_input(cfg, rng)};
  const auto ref = p.forward(ptrs(base), K);
  std::size_t checked = 0, broken = 0, silent = 0;
  for (std::size_t block = 1; block < K; ++block) {
    for (int trial = 0; trial < 20; ++trial) {
      auto alt = base;
      const bool tokens = trial % 2 == 0;
      if (tokens) {
        auto& t = alt[0].context[block - 1].indices;
        const std::size_t at = rng.below(t.size());
        t[at] = int((std::size_t(t[at]) + 1 + rng.below(cfg.vocab - 1)) % cfg.vocab);
      } else {
        auto& g = alt[0].guidance[block - 1].values;
        g[rng.below(g.size())] = rng.uniform();
      }
      const auto out = p.forward(ptrs(alt), K);
      bool later = false;
      for (std::size_t i = 0; i < off.back() * cfg.vocab; ++i) {
        const bool earlier = i < off[block] * cfg.vocab;
        if (earlier) {
          ++checked;
          if (out.logits.at(i) != ref.logits.at(i)) ++broken;
        } else if (out.logits.at(i) != ref.logits.at(i)) {
          later = true;
        }
      }
      if (!later) ++silent;
    }
  }
  return {broken == 0 && silent == 0,
          fmt("%zu earlier-block logits differ out of %zu compared over %zu perturbations; %zu left later blocks unchanged",
              broken, checked, 20 * (K - 1), silent)};
}

// ---- 5 ----------------------------------------------------------------------

Verdict loss_identities() {
  Rng rng(505);
  const ScaleSchedule sched = ScaleSchedule::square({1, 2, 3, 4, 6, 8});
  std::vector<Tensor<double>> zeros;
  std::vector<std::vector<int>> targets;
  for (std::size_t k = 0; k < sched.size(); ++k) {
    zeros.push_back(Tensor<double>::zeros({sched[k].area(), 64}));
    std::vector<int> t(sched[k].area());
    for (auto& v : t) v = int(rng.below(64));
    targets.push_back(t);
  }
  const double ce = ce_loss<double>(zeros, targets).mean.item();
  const double ce_err = std::abs(ce - std::log(64.0));

  const Codebook cb = random_codebook(64, 16, rng, true);
  std::vector<std::vector<TokenMap>> tokens(2);
  for (auto& t : tokens) {
    for (std::size_t k = 0; k < sched.size(); ++k) {
      TokenMap m{sched[k].height, sched[k].width, std::vector<int>(sched[k].area()), int(k)};
      for (auto& v : m.indices) v = int(rng.below(64));
      t.push_back(m);
    }
  }
  const auto stacked = stack_targets(tokens, sched.size());
  std::vector<Tensor<double>> probs;
  for (const auto& s : stacked) {
    std::vector<double> v(s.size() * 64, 0.0);
    for (std::size_t r = 0; r < s.size(); ++r) v[r * 64 + std::size_t(s[r])] = 1.0;
    probs.push_back(Tensor<double>::from({s.size(), 64}, v));
  }
  const auto u = cumulative_predictions<double>(probs, cb_tensor(cb), sched, 2);
  std::size_t differing = 0;
  for (std::size_t k = 0; k < sched.size(); ++k) {
    for (std::size_t b = 0; b < 2; ++b) {
      if (latent_of(u[k], b, sched[k]).values != reconstruct(tokens[b], sched, cb, k).values) ++differing;
    }
  }

  std::size_t inexact = 0;
  for (int trial = 0; trial < 25; ++trial) {
    const double c = rng.uniform(0, 5), h = rng.uniform(0, 2);
    for (double lam : {0.0, 0.5, 1.0, 2.0}) {
      if (total_loss(c, h, lam).total != c + lam * h) ++inexact;
      const auto t = total_loss(Tensor<double>::scalar(c), Tensor<double>::scalar(h), lam);
      if (t.item() != c + lam * h) ++inexact;
    }
  }
  return {ce_err <= 1e-6 && differing == 0 && inexact == 0,
          fmt("|CE - ln 64| = %.2e; %zu of 12 one-hot maps differ from the hard reconstruction; "
              "%zu inexact totals over 200",
              ce_err, differing, inexact)};
}

// ---- 6, 7, 8 ----------------------------------------------------------------

struct Trained {
  AlignVar model;
  double first_loss = 0.0;
  double loss_500 = 0.0;
  double seconds = 0.0;
};

Trained train_defaults(double lambda) {
  TrainConfig cfg;
  cfg.lambda = lambda;
  const auto t0 = std::chrono::steady_clock::now();
  Trainer tr(cfg, load_dataset(cfg));
  Trained out;
  while (tr.model().step < tr.total_steps()) {
    const auto idx = tr.next_batch();
    const LossBreakdown b = tr.step(idx);
    if (tr.model().step == 1) out.first_loss = b.total;
    if (tr.model().step == 500) out.loss_500 = b.total;
  }
  out.seconds = seconds_since(t0);
  out.model = std::move(tr.model());
  return out;
}

Trained& with_consistency() {
  static Trained t = train_defaults(1.0);
  return t;
}

Trained& without_consistency() {
  static Trained t = train_defaults(0.0);
  return t;
}

std::vector<Sample> training_samples(const AlignVar& model) {
  return prepare_samples(model, load_dataset(model.config));
}

// Toy images the models never saw.
std::vector<Sample> held_out(const AlignVar& model) {
  TrainConfig cfg = model.config;
  cfg.data_seed = 1007;
  cfg.toy_count = 8;
  return prepare_samples(model, load_dataset(cfg));
}

Verdict memorization() {
  Trained& t = with_consistency();
  const AlignVar& m = t.model;
  const auto samples = training_samples(m);
  std::vector<double> acc(m.schedule().size(), 0.0);
  double worst_psnr = std::numeric_limits<double>::infinity();
  for (const auto& s : samples) {
    const auto r = infer(m, s.lr);
    const auto a = token_accuracy(r.tokens, s.r_gt);
    for (std::size_t k = 0; k < a.size(); ++k) acc[k] += a[k] / double(samples.size());
    worst_psnr = std::min(worst_psnr, psnr(r.sr, s.hr));
  }
  const double worst_acc = *std::min_element(acc.begin(), acc.end());
  const double drop = 1.0 - t.loss_500 / t.first_loss;
  const bool ok = worst_acc >= 0.9 && worst_psnr >= 30.0 && t.seconds < 600.0 && drop >= 0.5;
  return {ok, fmt("lowest per-scale accuracy %.3f, lowest PSNR %.2f dB, loss %.4f -> %.4f by step 500 (%.1f%% drop), "
                  "trained in %.1f s",
                  worst_acc, worst_psnr, t.first_loss, t.loss_500, 100.0 * drop, t.seconds)};
}

Verdict coarse_scale_error() {
  const AlignVar& a = with_consistency().model;
  const AlignVar& b = without_consistency().model;
  const std::size_t lead = (a.schedule().size() + 1) / 2;
  const double ea = per_scale_mse(a, training_samples(a)).leading_mean(lead);
  const double eb = per_scale_mse(b, training_samples(b)).leading_mean(lead);
  const double ha = per_scale_mse(a, held_out(a)).leading_mean(lead);
  const double hb = per_scale_mse(b, held_out(b)).leading_mean(lead);
  return {ea < eb, fmt("mean latent MSE over the first %zu scales: %.6f with the consistency term, %.6f without "
                       "(held-out images: %.6f and %.6f)",
                       lead, ea, eb, ha, hb)};
}

Verdict perturbation_robustness() {
  const AlignVar* models[2] = {&with_consistency().model, &without_consistency().model};
  PerturbationOptions o;
  o.targets = {{0, 1, 2}, {0}, {1}, {2}};
  o.sigmas = {0.0, 0.5};
  o.seed = 5;
  o.repeats = 2;
  PerturbationReport rep[2];
  for (int j = 0; j < 2; ++j) {
    std::vector<Image> lr;
    for (const auto& s : training_samples(*models[j])) lr.push_back(s.lr);
    rep[j] = perturbation_probe(*models[j], lr, o);
  }
  bool clean = true;
  for (const auto& r : rep) {
    for (std::size_t t = 0; t < o.targets.size(); ++t) clean = clean && r.at(t, 0).latent_mse == 0.0;
  }
  const double joint[2] = {rep[0].at(0, 1).latent_mse, rep[1].at(0, 1).latent_mse};
  std::string single;
  for (std::size_t t = 1; t < o.targets.size(); ++t) {
    single += fmt("%sscale %zu %.5f vs %.5f", t == 1 ? "" : ", ", t, rep[0].at(t, 1).latent_mse,
                  rep[1].at(t, 1).latent_mse);
  }
  return {joint[0] <= joint[1] && clean,
          fmt("latent MSE under sigma 0.5 at the three coarsest scales: %.5f with the consistency term, %.5f "
              "without; sigma 0 %s (single-scale injection: %s)",
              joint[0], joint[1], clean ? "is exact" : "changed the output", single.c_str())};
}

// ---- 9 ----------------------------------------------------------------------

Verdict attention_cost() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::size_t> ks{3, 4, 5, 6, 7};
  const double slope = cost_slope(2, ks);
  PredictorConfig cfg;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.width = 16;
  cfg.vocab = 8;
  cfg.embed_dim = 4;
  cfg.mask_hidden = 4;
  cfg.schedule = ScaleSchedule::square({1, 2, 4, 8});
  Rng rng(909);
  const Codebook cb = random_codebook(cfg.vocab, cfg.embed_dim, rng);
  const Predictor<float> p(cfg, cb, rng);
  const ModelInput in = random_input(cfg, rng);
  const auto measured = empirical_costs(p, in);
  const CostModel model = cost_model(2, 4);
  const bool match = measured == model.costs;
  const double s = seconds_since(t0);
  return {slope >= 3.5 && slope <= 4.5 && match && s < 60.0,
          fmt("slope %.4f over K = 3..7; counted score pairs %s the model for K = 4 (total %llu); %.3f s", slope,
              match ? "match" : "differ from", static_cast<unsigned long long>(model.total), s)};
}

// ---- 10 ---------------------------------------------------------------------

Verdict metric_sanity() {
  const Image toy = make_toyset(4, 64, 31)[3].image;
  const double same = edge_iou(toy, toy);
  Image a(1, 32, 32, 0.0), b(1, 32, 32, 0.0);
  for (std::size_t y = 0; y < 32; ++y) {
    for (std::size_t x = 0; x < 32; ++x) {
      if (y >= 4 && y < 10 && x >= 4 && x < 10) a.at(0, y, x) = 1.0;
      if (y >= 20 && y < 28 && x >= 20 && x < 28) b.at(0, y, x) = 1.0;
    }
  }
  const double disjoint = edge_iou(a, b);
  const auto sched = ScaleSchedule::square({1, 2, 3, 4});
  const std::size_t T = sched.total_tokens();
  AttentionRecord rec;
  rec.offsets = sched.offsets();
  nd::AttentionCapture cap;
  cap.tokens = T;
  cap.heads.assign(2, std::vector<double>(T * T, 0.0));
  for (auto& h : cap.heads) {
    for (std::size_t i = 0; i < T; ++i) h[i * T + i] = 1.0;
  }
  rec.layers = {cap, cap};
  double worst = 0.0;
  for (const auto& e : attention_locality(rec, sched).entries) worst = std::max(worst, std::abs(e.distance));
  return {same == 1.0 && disjoint == 0.0 && worst == 0.0,
          fmt("edge IoU identical %.6f, disjoint %.6f; one-hot attention distance %.3e", same, disjoint, worst)};
}

// ---- 11 ---------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(ALIGNVAR_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Verdict reproducibility() {
  const fs::path dir = fs::temp_directory_path() / "alignvar_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream cfg(dir / "small.cfg");
    cfg << "data.toy_count = 3\ndata.image_size = 32\ncodec.patch = 4\ncodebook.refine_rounds = 50\n"
        << "model.depth = 2\nmodel.heads = 2\nmodel.width = 32\nmodel.vocab = 16\nmodel.embed_dim = 8\n"
        << "model.schedule = 1,2,4,8\ntrain.steps = 40\ntrain.batch = 3\n";
  }
  int codes = 0;
  for (const char* run : {"a", "b"}) {
    codes |= run_cli("train --config " + (dir / "small.cfg").string() + " --seed 13 --threads 1 --out " +
                         (dir / run).string(),
                     dir / (std::string(run) + ".log"));
  }
  const std::string ma = slurp(dir / "a" / "metrics.csv"), mb = slurp(dir / "b" / "metrics.csv");
  const bool metrics_same = codes == 0 && !ma.empty() && ma == mb;

  TrainConfig cfg = load_config(dir / "small.cfg");
  cfg.seed = 13;
  const AlignVar trained = train(cfg);
  std::stringstream buf;
  write_checkpoint(buf, trained);
  const AlignVar back = read_checkpoint(buf);
  const auto samples = prepare_samples(trained, load_dataset(cfg));
  std::vector<const ModelInput*> view;
  for (const auto& s : samples) view.push_back(&s.input);
  const std::size_t K = trained.schedule().size();
  const auto x = trained.predictor->forward(view, K), y = back.predictor->forward(view, K);
  std::size_t differ = 0;
  for (std::size_t i = 0; i < x.logits.numel(); ++i) differ += x.logits.at(i) != y.logits.at(i);
  const bool file_same = slurp(dir / "a" / "model.avar") == slurp(dir / "b" / "model.avar");
  return {metrics_same && file_same && differ == 0,
          fmt("two CLI runs: metrics %s, checkpoints %s; round-tripped checkpoint: %zu of %zu logits differ",
              metrics_same ? "identical" : "differ", file_same ? "identical" : "differ", differ,
              x.logits.numel())};
}

}  // namespace

// Optional arguments select criteria by number.
int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"quantizer", quantizer_matches_scan},
      {"residual chain", residual_error_non_increasing},
      {"gradients", gradient_checks},
      {"causality", block_causality},
      {"loss identities", loss_identities},
      {"memorization", memorization},
      {"coarse-scale error", coarse_scale_error},
      {"perturbation", perturbation_robustness},
      {"attention cost", attention_cost},
      {"metric sanity", metric_sanity},
      {"reproducibility", reproducibility},
  };
  std::vector<bool> wanted(criteria.size(), argc == 1);
  for (int a = 1; a < argc; ++a) {
    const long n = std::strtol(argv[a], nullptr, 10);
    if (n < 1 || std::size_t(n) > criteria.size()) {
      std::fprintf(stderr, "unknown criterion %s\n", argv[a]);
      return 2;
    }
    wanted[std::size_t(n - 1)] = true;
  }
  int failed = 0;
  std::size_t ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!wanted[i]) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    failed += !v.pass;
    std::printf("criterion %zu (%s): %s  %s  [%.1f s]\n", i + 1, criteria[i].first, v.pass ? "PASS" : "FAIL",
                v.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("%zu of %zu criteria passed\n", ran - std::size_t(failed), ran);
  return failed == 0 ? 0 : 1;
}
