#include "alignvar/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "alignvar/guidance.hpp"

namespace avar {

using nd::Tensor;

// ---- configuration ----------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::uint64_t parse_u64(const std::string& v) {
  std::size_t used = 0;
  if (v.empty() || v[0] == '-') throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  const unsigned long long x = std::stoull(v, &used);
  if (used != v.size()) throw std::invalid_argument("expected an integer, got '" + v + "'");
  return x;
}

double parse_real(const std::string& v) {
  std::size_t used = 0;
  const double x = std::stod(v, &used);
  if (used != v.size() || !std::isfinite(x)) throw std::invalid_argument("expected a number, got '" + v + "'");
  return x;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

std::string fmt_real(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename F>
ConfigKey size_key(std::string name, std::string help, F field) {
  return {std::move(name), std::move(help), [field](const TrainConfig& c) { return std::to_string(field(const_cast<TrainConfig&>(c))); },
          [field](TrainConfig& c, const std::string& v) { field(c) = static_cast<std::remove_reference_t<decltype(field(c))>>(parse_u64(v)); }};
}

template <typename F>
ConfigKey real_key(std::string name, std::string help, F field) {
  return {std::move(name), std::move(help), [field](const TrainConfig& c) { return fmt_real(field(const_cast<TrainConfig&>(c))); },
          [field](TrainConfig& c, const std::string& v) { field(c) = parse_real(v); }};
}

template <typename F>
ConfigKey bool_key(std::string name, std::string help, F field) {
  return {std::move(name), std::move(help),
          [field](const TrainConfig& c) { return std::string(field(const_cast<TrainConfig&>(c)) ? "true" : "false"); },
          [field](TrainConfig& c, const std::string& v) { field(c) = parse_bool(v); }};
}

std::vector<ConfigKey> build_schema() {
  std::vector<ConfigKey> k;
  k.push_back({"data.dir", "folder of HR training images (empty: generated toy set)",
               [](const TrainConfig& c) { return c.dataset; }, [](TrainConfig& c, const std::string& v) { c.dataset = v; }});
  k.push_back(size_key("data.toy_count", "toy images generated when data.dir is empty", [](TrainConfig& c) -> auto& { return c.toy_count; }));
  k.push_back(size_key("data.image_size", "HR side length in pixels", [](TrainConfig& c) -> auto& { return c.image_size; }));
  k.push_back(size_key("data.seed", "toy set and degradation seed", [](TrainConfig& c) -> auto& { return c.data_seed; }));
  k.push_back(size_key("degrade.factor", "HR / LR side ratio", [](TrainConfig& c) -> auto& { return c.degrade.factor; }));
  k.push_back(real_key("degrade.blur_min", "lower bound of the blur sigma", [](TrainConfig& c) -> auto& { return c.degrade.blur_min; }));
  k.push_back(real_key("degrade.blur_max", "upper bound of the blur sigma", [](TrainConfig& c) -> auto& { return c.degrade.blur_max; }));
  k.push_back(real_key("degrade.noise_min", "lower bound of the noise std", [](TrainConfig& c) -> auto& { return c.degrade.noise_min; }));
  k.push_back(real_key("degrade.noise_max", "upper bound of the noise std", [](TrainConfig& c) -> auto& { return c.degrade.noise_max; }));
  k.push_back({"codec.kind", "latent codec: pca (fitted on the training set) or dct",
               [](const TrainConfig& c) { return c.codec; }, [](TrainConfig& c, const std::string& v) {
                 if (v != "pca" && v != "dct") throw std::invalid_argument("expected pca or dct, got '" + v + "'");
                 c.codec = v;
               }});
  k.push_back(size_key("codec.patch", "pixels per latent cell along each axis", [](TrainConfig& c) -> auto& { return c.patch; }));
  k.push_back(size_key("codebook.kmeans_iters", "Lloyd iterations per k-means fit", [](TrainConfig& c) -> auto& { return c.codebook.kmeans.max_iterations; }));
  k.push_back(size_key("codebook.kmeans_rounds", "k-means refits on the chain residuals", [](TrainConfig& c) -> auto& { return c.codebook.kmeans_rounds; }));
  k.push_back(size_key("codebook.refine_rounds", "least-squares refinement rounds", [](TrainConfig& c) -> auto& { return c.codebook.refine_rounds; }));
  k.push_back(real_key("codebook.damping", "step size of each refinement round", [](TrainConfig& c) -> auto& { return c.codebook.damping; }));
  k.push_back(real_key("codebook.ridge", "ridge term of the refinement solve", [](TrainConfig& c) -> auto& { return c.codebook.ridge; }));
  k.push_back(real_key("codebook.balance", "exponent of the worst-latent reweighting", [](TrainConfig& c) -> auto& { return c.codebook.balance; }));
  k.push_back(size_key("codebook.restarts", "independent codebook fits; the best is kept", [](TrainConfig& c) -> auto& { return c.codebook.restarts; }));
  k.push_back(bool_key("codebook.reserve_null", "pin entry 0 to the zero vector", [](TrainConfig& c) -> auto& { return c.codebook.reserve_null; }));
  k.push_back(size_key("model.depth", "transformer blocks", [](TrainConfig& c) -> auto& { return c.model.depth; }));
  k.push_back(size_key("model.heads", "attention heads", [](TrainConfig& c) -> auto& { return c.model.heads; }));
  k.push_back(size_key("model.width", "model width d", [](TrainConfig& c) -> auto& { return c.model.width; }));
  k.push_back(size_key("model.vocab", "codebook size |V|", [](TrainConfig& c) -> auto& { return c.model.vocab; }));
  k.push_back(size_key("model.embed_dim", "latent channels C", [](TrainConfig& c) -> auto& { return c.model.embed_dim; }));
  k.push_back({"model.schedule", "scale sides '1,2,3,4,6,8' or explicit 'HxW,...'",
               [](const TrainConfig& c) { return c.model.schedule.str(); },
               [](TrainConfig& c, const std::string& v) { c.model.schedule = ScaleSchedule::parse(v); }});
  k.push_back({"model.condition", "LR conditioning: additive or none",
               [](const TrainConfig& c) { return std::string(to_string(c.model.condition)); },
               [](TrainConfig& c, const std::string& v) { c.model.condition = parse_condition_mode(v); }});
  k.push_back(size_key("model.mask_hidden", "hidden width of the mask generator", [](TrainConfig& c) -> auto& { return c.model.mask_hidden; }));
  k.push_back(bool_key("model.gating", "structure-aware (1 + m) gating of the context", [](TrainConfig& c) -> auto& { return c.model.gating; }));
  k.push_back(real_key("model.init_std", "std of the weight initialization", [](TrainConfig& c) -> auto& { return c.model.init_std; }));
  k.push_back(size_key("train.steps", "optimizer updates", [](TrainConfig& c) -> auto& { return c.steps; }));
  k.push_back({"train.epochs", "passes over the data; overrides train.steps when set",
               [](const TrainConfig& c) { return c.epochs ? std::to_string(*c.epochs) : std::string(); },
               [](TrainConfig& c, const std::string& v) {
                 if (v.empty()) c.epochs.reset();
                 else c.epochs = parse_u64(v);
               }});
  k.push_back(size_key("train.batch", "images per update (capped at the dataset size)", [](TrainConfig& c) -> auto& { return c.batch; }));
  k.push_back(real_key("train.lr", "initial learning rate", [](TrainConfig& c) -> auto& { return c.lr; }));
  k.push_back(real_key("train.weight_decay", "decoupled weight decay on matrices", [](TrainConfig& c) -> auto& { return c.weight_decay; }));
  k.push_back(bool_key("train.cosine", "cosine decay of the learning rate to 0", [](TrainConfig& c) -> auto& { return c.cosine; }));
  k.push_back(size_key("train.seed", "tokenizer, initialization and shuffle seed", [](TrainConfig& c) -> auto& { return c.seed; }));
  k.push_back(size_key("train.checkpoint_every", "steps between checkpoints (0: final only)", [](TrainConfig& c) -> auto& { return c.checkpoint_every; }));
  k.push_back(real_key("loss.lambda", "weight of the consistency term", [](TrainConfig& c) -> auto& { return c.lambda; }));
  k.push_back(bool_key("loss.stop_gradient", "detach coarser-scale contributions in the consistency term",
                       [](TrainConfig& c) -> auto& { return c.hcc_stop_gradient; }));
  k.push_back(bool_key("loss.pixel_domain", "compare cumulative predictions after decoding to patch pixels",
                       [](TrainConfig& c) -> auto& { return c.hcc_pixel; }));
  return k;
}

const ConfigKey& find_key(const std::string& name) {
  for (const auto& k : config_schema()) {
    if (k.name == name) return k;
  }
  throw std::invalid_argument("unknown config key '" + name + "'");
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = build_schema();
  return schema;
}

void TrainConfig::validate() const {
  model.validate();
  if (image_size == 0 || patch == 0 || image_size % patch) {
    throw std::invalid_argument("config: data.image_size " + std::to_string(image_size) +
                                " must be a positive multiple of codec.patch " + std::to_string(patch));
  }
  const Extent f = model.schedule.final();
  if (f.height != image_size / patch || f.width != image_size / patch) {
    throw std::invalid_argument("config: final scale " + to_string(f) + " does not match the latent grid " +
                                std::to_string(image_size / patch) + "x" + std::to_string(image_size / patch));
  }
  if (degrade.factor == 0 || image_size % degrade.factor) {
    throw std::invalid_argument("config: degrade.factor must divide data.image_size");
  }
  if (codec == "dct" && model.embed_dim > patch * patch) {
    throw std::invalid_argument("config: dct codec has at most patch^2 channels");
  }
  if (codebook.restarts == 0) throw std::invalid_argument("config: codebook.restarts must be >= 1");
  if (batch == 0) throw std::invalid_argument("config: train.batch must be positive");
  if (!(lr > 0.0)) throw std::invalid_argument("config: train.lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("config: train.weight_decay must be >= 0");
  if (!(lambda >= 0.0)) throw std::invalid_argument("config: loss.lambda must be >= 0");
  if (degrade.blur_min < 0 || degrade.blur_max < degrade.blur_min || degrade.noise_min < 0 ||
      degrade.noise_max < degrade.noise_min) {
    throw std::invalid_argument("config: degradation ranges must be ordered and non-negative");
  }
}

std::size_t TrainConfig::total_steps(std::size_t n) const {
  if (!epochs) return steps;
  const std::size_t b = std::max<std::size_t>(1, std::min(batch, n));
  return *epochs * std::max<std::size_t>(1, n / b);
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("override '" + assignment + "' is not key=value");
  const std::string key = trim(assignment.substr(0, eq)), value = trim(assignment.substr(eq + 1));
  const ConfigKey& k = find_key(key);
  try {
    k.set(cfg, value);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(key + ": " + e.what());
  } catch (const std::out_of_range&) {
    throw std::invalid_argument(key + ": value '" + value + "' out of range");
  }
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      apply_override(base, line);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string config_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& k : config_schema()) out += k.name + " = " + k.get(cfg) + "\n";
  return out;
}

std::uint64_t config_digest(const TrainConfig& cfg) {
  static const char* keys[] = {"data.image_size", "codec.kind",    "codec.patch",      "model.depth",
                               "model.heads",     "model.width",   "model.vocab",      "model.embed_dim",
                               "model.schedule",  "model.condition", "model.mask_hidden", "model.gating"};
  std::string canon;
  for (const char* k : keys) canon += std::string(k) + "=" + find_key(k).get(cfg) + "\n";
  return fnv1a(canon);
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, n); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

// ---- data and tokenizer -----------------------------------------------------

Tokenizer fit_tokenizer(std::span<const Image> hr, const TrainConfig& cfg, Rng& rng) {
  if (hr.empty()) throw std::invalid_argument("fit_tokenizer: no training images");
  const CodecConfig cc{cfg.patch, 1, cfg.model.embed_dim};
  Tokenizer tok;
  tok.codec = cfg.codec == "pca" ? LinearCodec::fit_pca(hr, cc) : LinearCodec::dct(cc);
  std::vector<LatentMap> z;
  for (const auto& img : hr) z.push_back(tok.codec.encode(img));
  tok.codebook = fit_residual_codebook(z, cfg.model.schedule, cfg.model.vocab, rng, cfg.codebook);
  return tok;
}

std::vector<GuidanceMap> lr_guidance(const Image& lr, const ScaleSchedule& schedule) {
  return guidance_pyramid(laplacian_abs(lr), schedule);
}

Sample prepare_sample(const Image& hr, const Image& lr, const Tokenizer& tok, const ScaleSchedule& schedule,
                      std::string name) {
  Sample s;
  s.name = std::move(name);
  s.hr = hr;
  s.lr = lr;
  s.z = tok.codec.encode(hr);
  if (s.z.extent() != schedule.final()) {
    throw std::invalid_argument("prepare_sample: latent " + to_string(s.z.extent()) + " does not match final scale " +
                                to_string(schedule.final()));
  }
  s.r_gt = residual_decompose(s.z, schedule, tok.codebook);
  s.u_gt = full_scale_targets(s.z, schedule, tok.codebook);
  s.input.cond = condition_encode(tok.codec, lr, schedule.final());
  s.input.guidance = lr_guidance(lr, schedule);
  s.input.context = s.r_gt;
  return s;
}

Dataset load_dataset(const TrainConfig& cfg) {
  Dataset d;
  if (cfg.dataset.empty()) {
    for (auto& t : make_toyset(cfg.toy_count, cfg.image_size, cfg.data_seed)) {
      d.names.push_back(t.name);
      d.hr.push_back(std::move(t.image));
    }
    return d;
  }
  const std::filesystem::path dir(cfg.dataset);
  if (!std::filesystem::is_directory(dir)) throw std::invalid_argument("dataset folder " + cfg.dataset + " not found");
  for (const auto& p : list_images(dir)) {
    Image img = to_luminance(read_image(p));
    if (img.height != cfg.image_size || img.width != cfg.image_size) {
      throw std::invalid_argument("dataset image " + p.filename().string() + " is " + std::to_string(img.height) +
                                  "x" + std::to_string(img.width) + ", expected " + std::to_string(cfg.image_size));
    }
    d.names.push_back(p.stem().string());
    d.hr.push_back(std::move(img));
  }
  if (d.hr.empty()) throw std::invalid_argument("dataset folder " + cfg.dataset + " holds no images");
  return d;
}

std::vector<Image> degrade_dataset(std::span<const Image> hr, const TrainConfig& cfg, std::size_t threads) {
  std::vector<Image> lr(hr.size());
  const Rng base(cfg.data_seed, 1u << 20);
  parallel_for(hr.size(), threads, [&](std::size_t i) {
    Rng r = base.fork(i);
    lr[i] = degrade(hr[i], r, cfg.degrade);
  });
  return lr;
}

std::vector<Sample> prepare_samples(const AlignVar& model, const Dataset& data, std::size_t threads) {
  const auto lr = degrade_dataset(data.hr, model.config, threads);
  std::vector<Sample> out(data.hr.size());
  parallel_for(data.hr.size(), threads, [&](std::size_t i) {
    out[i] = prepare_sample(data.hr[i], lr[i], model.tokenizer, model.schedule(),
                            i < data.names.size() ? data.names[i] : std::to_string(i));
  });
  return out;
}

AlignVar::AlignVar(const TrainConfig& cfg, Tokenizer tok, Rng& init)
    : config(cfg), tokenizer(std::move(tok)),
      predictor(std::make_unique<Predictor<float>>(cfg.model, tokenizer.codebook, init)) {}

// ---- training ---------------------------------------------------------------

std::string metrics_header(std::size_t scales) {
  std::string h = "step,lr,ce,hcc,total,ce_sum";
  for (std::size_t k = 1; k <= scales; ++k) h += ",ce_" + std::to_string(k);
  for (std::size_t k = 1; k <= scales; ++k) h += ",hcc_" + std::to_string(k);
  return h;
}

std::string metrics_row(std::uint64_t step, double lr, const LossBreakdown& b) {
  auto g = [](double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  std::string r = std::to_string(step) + "," + g(lr) + "," + g(b.ce) + "," + g(b.hcc) + "," + g(b.total) + "," + g(b.ce_sum);
  for (double v : b.per_scale_ce) r += "," + g(v);
  for (double v : b.per_scale_hcc) r += "," + g(v);
  return r;
}

Trainer::Trainer(const TrainConfig& cfg, const Dataset& data, std::size_t threads) : cfg_(cfg) {
  cfg_.validate();
  if (data.hr.empty()) throw std::invalid_argument("Trainer: empty dataset");
  const Rng root(cfg_.seed);
  Rng tok_rng = root.fork(1), init_rng = root.fork(2);
  shuffle_ = root.fork(3);
  Tokenizer tok = fit_tokenizer(data.hr, cfg_, tok_rng);
  model_ = AlignVar(cfg_, std::move(tok), init_rng);
  samples_ = prepare_samples(model_, data, threads);
  const Codebook& cb = model_.tokenizer.codebook;
  codebook_ = Tensor<float>::from({cb.size(), cb.dim()}, std::vector<float>(cb.entries().begin(), cb.entries().end()));
  if (cfg_.hcc_pixel) {
    const auto& d = model_.tokenizer.codec.decoder();  // [P, C]
    const std::size_t c = cfg_.model.embed_dim, p = d.size() / c;
    std::vector<float> basis(c * p);
    for (std::size_t q = 0; q < p; ++q) {
      for (std::size_t r = 0; r < c; ++r) basis[r * p + q] = float(d[q * c + r]);
    }
    pixel_basis_ = Tensor<float>::from({c, p}, std::move(basis));
  }
  opt_ = nd::AdamW<float>({0.9, 0.999, 1e-8, cfg_.weight_decay});
  total_ = cfg_.total_steps(samples_.size());
  model_.rng = shuffle_;
}

std::vector<std::size_t> Trainer::next_batch() {
  const std::size_t n = samples_.size(), b = std::min(cfg_.batch, n);
  if (order_.empty() || cursor_ + b > order_.size()) {
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) order_[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order_[i - 1], order_[shuffle_.below(i)]);
    cursor_ = 0;
  }
  std::vector<std::size_t> out(order_.begin() + std::ptrdiff_t(cursor_), order_.begin() + std::ptrdiff_t(cursor_ + b));
  cursor_ += b;
  model_.rng = shuffle_;
  return out;
}

LossBreakdown Trainer::compute(std::span<const std::size_t> indices, bool update) {
  if (indices.empty()) throw std::invalid_argument("Trainer: empty batch");
  const ScaleSchedule& sched = cfg_.model.schedule;
  const std::size_t K = sched.size(), B = indices.size();
  std::vector<const ModelInput*> view;
  std::vector<std::vector<TokenMap>> r_gt, u_gt;
  for (std::size_t i : indices) {
    const Sample& s = samples_.at(i);
    view.push_back(&s.input);
    r_gt.push_back(s.r_gt);
    u_gt.push_back(s.u_gt);
  }
  Predictor<float>& net = *model_.predictor;
  const auto out = net.forward(view, K);
  const auto targets = stack_targets(r_gt, K);
  const auto ce = ce_loss<float>(out.scale_logits, targets);
  std::vector<Tensor<float>> probs, emb;
  for (std::size_t k = 0; k < K; ++k) {
    probs.push_back(nd::softmax(out.scale_logits[k]));
    emb.push_back(embed_targets<float>(u_gt, k, codebook_));
  }
  const auto u = cumulative_predictions<float>(probs, codebook_, sched, B, {cfg_.hcc_stop_gradient});
  const auto hcc = hcc_loss<float>(u, emb, sched, B, pixel_basis_);
  const Tensor<float> total = total_loss(ce.mean, hcc.value, cfg_.lambda);

  LossBreakdown b = total_loss(double(ce.mean.item()), double(hcc.value.item()), cfg_.lambda);
  b.ce_sum = ce.sum;
  b.per_scale_ce = ce.per_scale;
  b.per_scale_hcc = hcc.per_scale;
  if (!std::isfinite(b.total)) {
    throw std::runtime_error("training step " + std::to_string(model_.step) + ": non-finite loss (ce " +
                             std::to_string(b.ce) + ", hcc " + std::to_string(b.hcc) + ")");
  }
  if (update) {
    net.params().zero_grad();
    total.backward();
    const double lr = cfg_.cosine ? nd::cosine_lr(cfg_.lr, model_.step, total_) : cfg_.lr;
    opt_.step(net.params(), lr);
    ++model_.step;
  }
  return b;
}

LossBreakdown Trainer::evaluate(std::span<const std::size_t> indices) const {
  return const_cast<Trainer*>(this)->compute(indices, false);
}

LossBreakdown Trainer::step(std::span<const std::size_t> indices) { return compute(indices, true); }

void Trainer::run(std::ostream* metrics, const std::filesystem::path& out_dir) {
  if (metrics && model_.step == 0) *metrics << metrics_header(cfg_.model.schedule.size()) << "\n";
  while (model_.step < total_) {
    const auto idx = next_batch();
    const double lr = cfg_.cosine ? nd::cosine_lr(cfg_.lr, model_.step, total_) : cfg_.lr;
    const std::uint64_t at = model_.step;
    const LossBreakdown b = step(idx);
    if (metrics) *metrics << metrics_row(at, lr, b) << "\n";
    if (!out_dir.empty() && cfg_.checkpoint_every && model_.step % cfg_.checkpoint_every == 0 && model_.step < total_) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_%06llu.avar", static_cast<unsigned long long>(model_.step));
      save_checkpoint(out_dir / name, model_);
    }
  }
}

AlignVar train(const TrainConfig& cfg, const std::filesystem::path& out_dir, std::size_t threads) {
  Trainer trainer(cfg, load_dataset(cfg), threads);
  if (out_dir.empty()) {
    trainer.run(nullptr);
  } else {
    std::filesystem::create_directories(out_dir);
    std::ofstream metrics(out_dir / "metrics.csv", std::ios::binary);
    if (!metrics) throw std::runtime_error("cannot write " + (out_dir / "metrics.csv").string());
    trainer.run(&metrics, out_dir);
    save_checkpoint(out_dir / "model.avar", trainer.model());
  }
  return std::move(trainer.model());
}

// ---- inference --------------------------------------------------------------

ModelInput inference_input(const AlignVar& model, const Image& lr) {
  const TrainConfig& cfg = model.config;
  const std::size_t expect = cfg.image_size / cfg.degrade.factor;
  if (lr.height != expect || lr.width != expect) {
    throw std::invalid_argument("infer: LR image is " + std::to_string(lr.height) + "x" + std::to_string(lr.width) +
                                ", expected " + std::to_string(expect) + "x" + std::to_string(expect));
  }
  const Image gray = lr.channels == 1 ? lr : to_luminance(lr);
  ModelInput in;
  in.cond = condition_encode(model.tokenizer.codec, gray, model.schedule().final());
  in.guidance = lr_guidance(gray, model.schedule());
  return in;
}

namespace {

int pick_token(std::span<const float> logits, const DecodeOptions& opts, Rng& rng) {
  if (opts.top_k == 0 || opts.top_k == 1) {
    return int(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<int> idx(logits.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
  const std::size_t k = std::min(opts.top_k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + std::ptrdiff_t(k), idx.end(),
                    [&](int a, int b) { return logits[std::size_t(a)] > logits[std::size_t(b)] || (logits[std::size_t(a)] == logits[std::size_t(b)] && a < b); });
  const double t = opts.temperature > 0 ? opts.temperature : 1.0;
  std::vector<double> w(k);
  double z = 0;
  for (std::size_t i = 0; i < k; ++i) z += (w[i] = std::exp((double(logits[std::size_t(idx[i])]) - double(logits[std::size_t(idx[0])])) / t));
  double u = rng.uniform() * z;
  for (std::size_t i = 0; i < k; ++i) {
    if ((u -= w[i]) <= 0) return idx[i];
  }
  return idx[k - 1];
}

}  // namespace

InferResult infer(const AlignVar& model, const Image& lr, const DecodeOptions& opts) {
  const ScaleSchedule& sched = model.schedule();
  const std::size_t K = sched.size(), C = model.config.model.embed_dim, V = model.config.model.vocab;
  ModelInput in = inference_input(model, lr);
  if (opts.perturb_sigma < 0) throw std::invalid_argument("infer: perturbation sigma must be >= 0");
  for (std::size_t s : opts.perturb_scales) {
    if (s >= K) throw std::invalid_argument("infer: perturbation scale " + std::to_string(s + 1) + " outside the schedule");
  }
  if (opts.perturb_sigma > 0 && !opts.perturb_scales.empty()) {
    const auto& e = model.tokenizer.codebook.entries();
    double ss = 0;
    for (double v : e) ss += v * v;
    const double amp = opts.perturb_sigma * std::sqrt(ss / double(e.size()));
    auto& field = opts.perturb_pre_gate ? in.embed_noise : in.context_noise;
    field.assign(K, {});
    for (std::size_t s : opts.perturb_scales) {
      Rng r(opts.perturb_seed, s);
      field[s].resize(sched[s].area() * C);
      for (auto& v : field[s]) v = amp * r.normal();
    }
  }
  Rng rng(opts.seed, 7);
  InferResult res;
  const ModelInput* view[] = {&in};
  for (std::size_t k = 0; k < K; ++k) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = model.predictor->forward(view, k + 1);
    const auto logits = out.scale_logits[k].data();
    TokenMap t{sched[k].height, sched[k].width, std::vector<int>(sched[k].area()), int(k)};
    for (std::size_t i = 0; i < t.indices.size(); ++i) t.indices[i] = pick_token(logits.subspan(i * V, V), opts, rng);
    in.context.push_back(t);
    res.tokens.push_back(std::move(t));
    res.scale_ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  res.latent = accumulate(res.tokens, K, model.tokenizer.codebook, sched.final());
  res.sr = clamp01(model.tokenizer.codec.decode(res.latent));
  return res;
}

std::vector<double> token_accuracy(const std::vector<TokenMap>& predicted, const std::vector<TokenMap>& target) {
  if (predicted.size() != target.size()) throw std::invalid_argument("token_accuracy: scale count mismatch");
  std::vector<double> acc;
  for (std::size_t k = 0; k < target.size(); ++k) {
    if (predicted[k].indices.size() != target[k].indices.size()) throw std::invalid_argument("token_accuracy: shape mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < target[k].indices.size(); ++i) hit += predicted[k].indices[i] == target[k].indices[i];
    acc.push_back(double(hit) / double(target[k].indices.size()));
  }
  return acc;
}

// ---- checkpoint -------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(std::uint32_t(s.size()));
    buf_ += s;
  }
  template <typename T>
  void array(std::span<const T> v) {
    pod<std::uint64_t>(v.size());
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
  }
  std::string& bytes() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <typename T>
  T pod(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str(const char* what) {
    const auto n = pod<std::uint32_t>(what);
    need(n, what);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  template <typename T>
  std::vector<T> array(const char* what) {
    const auto n = pod<std::uint64_t>(what);
    if (n > data_.size() / sizeof(T)) fail(what);
    need(n * sizeof(T), what);
    std::vector<T> v(n);
    std::memcpy(v.data(), data_.data() + pos_, n * sizeof(T));
    pos_ += n * sizeof(T);
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) const {
    if (pos_ + n > data_.size()) fail(what);
  }
  [[noreturn]] void fail(const char* what) const {
    throw CheckpointError(std::string("corrupt checkpoint: truncated while reading ") + what);
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[4] = {'A', 'V', 'A', 'R'};

struct Header {
  std::uint32_t version = 0;
  std::uint64_t digest = 0;
};

Header read_header(Reader& r) {
  char magic[4];
  for (char& c : magic) c = r.pod<char>("magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("corrupt checkpoint: bad magic bytes");
  Header h;
  h.version = r.pod<std::uint32_t>("version");
  if (h.version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(h.version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  h.digest = r.pod<std::uint64_t>("config digest");
  return h;
}

AlignVar parse_checkpoint(const std::string& data, const TrainConfig* expected) {
  Reader r(data);
  const Header h = read_header(r);
  if (expected && h.digest != config_digest(*expected)) {
    throw CheckpointError("checkpoint config digest mismatch: file was written for a different model/tokenizer layout");
  }
  if (data.size() < r.pos() + 8) throw CheckpointError("corrupt checkpoint: truncated before checksum");
  std::uint64_t stored;
  std::memcpy(&stored, data.data() + data.size() - 8, 8);
  if (fnv1a(std::string_view(data).substr(0, data.size() - 8)) != stored) {
    throw CheckpointError("corrupt checkpoint: checksum mismatch (truncated or modified file)");
  }
  const std::string text = r.str("config");
  TrainConfig cfg;
  try {
    cfg = parse_config(text);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  if (config_digest(cfg) != h.digest) throw CheckpointError("corrupt checkpoint: stored config does not match its digest");

  AlignVar m;
  m.config = cfg;
  m.step = r.pod<std::uint64_t>("step");
  const auto seed = r.pod<std::uint64_t>("rng"), stream = r.pod<std::uint64_t>("rng"), counter = r.pod<std::uint64_t>("rng");
  m.rng = Rng(seed, stream);
  m.rng.set_counter(counter);

  CodecConfig cc;
  cc.patch = r.pod<std::uint32_t>("codec");
  cc.image_channels = r.pod<std::uint32_t>("codec");
  cc.embed_dim = r.pod<std::uint32_t>("codec");
  auto enc = r.array<double>("codec encoder"), eb = r.array<double>("codec encoder bias");
  auto dec = r.array<double>("codec decoder"), db = r.array<double>("codec decoder bias");
  const auto cb_size = r.pod<std::uint64_t>("codebook"), cb_dim = r.pod<std::uint64_t>("codebook");
  auto cb = r.array<double>("codebook entries");
  try {
    m.tokenizer.codec = LinearCodec(cc, std::move(enc), std::move(eb), std::move(dec), std::move(db));
    m.tokenizer.codebook = Codebook(cb_size, cb_dim, std::move(cb));
    Rng dummy(0);
    m.predictor = std::make_unique<Predictor<float>>(cfg.model, m.tokenizer.codebook, dummy);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }

  auto& params = m.predictor->params();
  const auto count = r.pod<std::uint32_t>("parameter count");
  if (count != params.size()) {
    throw CheckpointError("corrupt checkpoint: " + std::to_string(count) + " parameters, model has " +
                          std::to_string(params.size()));
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str("parameter name");
    if (!params.contains(name)) throw CheckpointError("corrupt checkpoint: unknown parameter '" + name + "'");
    auto& t = params.get(name);
    const auto rank = r.pod<std::uint32_t>("parameter rank");
    nd::Shape shape(rank);
    for (auto& d : shape) d = r.pod<std::uint64_t>("parameter shape");
    if (shape != t.shape()) {
      throw CheckpointError("corrupt checkpoint: parameter '" + name + "' has shape " + nd::shape_str(shape) +
                            ", model expects " + nd::shape_str(t.shape()));
    }
    const auto v = r.array<float>("parameter payload");
    if (v.size() != t.numel()) throw CheckpointError("corrupt checkpoint: payload size of '" + name + "'");
    std::copy(v.begin(), v.end(), t.mutable_data().begin());
  }
  params.step = m.step;
  if (r.pos() + 8 != data.size()) throw CheckpointError("corrupt checkpoint: trailing bytes");
  return m;
}

std::string read_all(std::istream& in) {
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void write_checkpoint(std::ostream& out, const AlignVar& model) {
  if (!model.predictor) throw std::invalid_argument("write_checkpoint: model has no predictor");
  Writer w;
  for (char c : kMagic) w.pod(c);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.pod<std::uint64_t>(config_digest(model.config));
  w.str(config_text(model.config));
  w.pod<std::uint64_t>(model.step);
  w.pod<std::uint64_t>(model.rng.seed());
  w.pod<std::uint64_t>(model.rng.stream());
  w.pod<std::uint64_t>(model.rng.counter());
  const LinearCodec& codec = model.tokenizer.codec;
  w.pod<std::uint32_t>(std::uint32_t(codec.config().patch));
  w.pod<std::uint32_t>(std::uint32_t(codec.config().image_channels));
  w.pod<std::uint32_t>(std::uint32_t(codec.config().embed_dim));
  w.array<double>(codec.encoder());
  w.array<double>(codec.encoder_bias());
  w.array<double>(codec.decoder());
  w.array<double>(codec.decoder_bias());
  const Codebook& cb = model.tokenizer.codebook;
  w.pod<std::uint64_t>(cb.size());
  w.pod<std::uint64_t>(cb.dim());
  w.array<double>(cb.entries());
  const auto& params = model.predictor->params();
  w.pod<std::uint32_t>(std::uint32_t(params.size()));
  for (const auto& [name, t] : params) {
    w.str(name);
    w.pod<std::uint32_t>(std::uint32_t(t.rank()));
    for (std::size_t d : t.shape()) w.pod<std::uint64_t>(d);
    w.array<float>(t.data());
  }
  w.pod<std::uint64_t>(fnv1a(w.bytes()));
  out.write(w.bytes().data(), std::streamsize(w.bytes().size()));
  if (!out) throw std::runtime_error("write_checkpoint: write failed");
}

void save_checkpoint(const std::filesystem::path& path, const AlignVar& model) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  write_checkpoint(out, model);
}

AlignVar read_checkpoint(std::istream& in) { return parse_checkpoint(read_all(in), nullptr); }

AlignVar load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return parse_checkpoint(read_all(in), nullptr);
}

AlignVar load_checkpoint(const std::filesystem::path& path, const TrainConfig& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  return parse_checkpoint(read_all(in), &expected);
}

}  // namespace avar
