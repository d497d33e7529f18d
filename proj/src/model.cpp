#include "alignvar/model.hpp"

#include <cmath>
#include <stdexcept>

#include "alignvar/data.hpp"

namespace avar {

using nd::Shape;
using nd::Tensor;

template <typename T>
Tensor<T> resample_features(const Tensor<T>& x, std::size_t batch, Extent src, Extent dst) {
  if (x.rank() != 2 || x.dim(0) != batch * src.area()) {
    throw nd::ShapeError("resample_features: input " + nd::shape_str(x.shape()) + " is not [" +
                         std::to_string(batch) + "*" + to_string(src) + ", C]");
  }
  if (src == dst) return x;
  const std::size_t c = x.dim(1);
  const Resampler rs(src, dst);
  std::vector<T> out(batch * dst.area() * c);
  const auto in = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    rs.apply_interleaved<T>(in.subspan(b * src.area() * c, src.area() * c),
                            std::span<T>(out).subspan(b * dst.area() * c, dst.area() * c), c);
  }
  auto px = x.node();
  return nd::make_result<T>("resample_features", {batch * dst.area(), c}, std::move(out), {px},
                            [px, rs, batch, src, dst, c](nd::Node<T>& self) {
                              px->ensure_grad();
                              const std::span<const T> g(self.grad);
                              for (std::size_t b = 0; b < batch; ++b) {
                                rs.adjoint_interleaved<T>(
                                    g.subspan(b * dst.area() * c, dst.area() * c),
                                    std::span<T>(px->grad).subspan(b * src.area() * c, src.area() * c), c);
                              }
                            });
}

template Tensor<float> resample_features(const Tensor<float>&, std::size_t, Extent, Extent);
template Tensor<double> resample_features(const Tensor<double>&, std::size_t, Extent, Extent);

const char* to_string(ConditionMode mode) { return mode == ConditionMode::Additive ? "additive" : "none"; }

ConditionMode parse_condition_mode(const std::string& text) {
  if (text == "additive") return ConditionMode::Additive;
  if (text == "none") return ConditionMode::None;
  throw std::invalid_argument("unknown condition mode '" + text + "' (expected additive or none)");
}

void PredictorConfig::validate() const {
  if (depth == 0 || heads == 0 || width == 0 || vocab == 0 || embed_dim == 0 || mask_hidden == 0) {
    throw std::invalid_argument("PredictorConfig: sizes must be positive");
  }
  if (width % heads != 0) {
    throw std::invalid_argument("PredictorConfig: width " + std::to_string(width) + " not divisible by heads " +
                                std::to_string(heads));
  }
  if (schedule.size() == 0) throw std::invalid_argument("PredictorConfig: empty schedule");
  if (!(init_std > 0.0)) throw std::invalid_argument("PredictorConfig: init_std must be positive");
}

LatentMap condition_encode(const LinearCodec& codec, const Image& lr, Extent latent) {
  const std::size_t p = codec.config().patch;
  const std::size_t hr_h = latent.height * p, hr_w = latent.width * p;
  if (lr.height == 0 || lr.width == 0 || hr_h % lr.height || hr_w % lr.width ||
      hr_h / lr.height != hr_w / lr.width) {
    throw std::invalid_argument("condition_encode: LR " + std::to_string(lr.height) + "x" +
                                std::to_string(lr.width) + " does not divide HR " + std::to_string(hr_h) + "x" +
                                std::to_string(hr_w));
  }
  return codec.encode(resize_bilinear(lr, hr_h, hr_w));
}

ModulationMask to_mask(std::span<const double> values, Extent extent, int scale) {
  if (values.size() != extent.area()) throw std::invalid_argument("to_mask: value count does not match extent");
  return {extent.height, extent.width, std::vector<double>(values.begin(), values.end()), scale};
}

template <typename T>
Tensor<T> token_gate(const Tensor<T>& embed, const Tensor<T>& mask) {
  if (embed.rank() != 2 || mask.rank() != 2 || mask.dim(1) != 1 || mask.dim(0) != embed.dim(0)) {
    throw nd::ShapeError("token_gate: embed " + nd::shape_str(embed.shape()) + " and mask " +
                         nd::shape_str(mask.shape()) + " do not align");
  }
  return nd::mul(embed, nd::add_scalar(mask, T(1)));
}

template Tensor<float> token_gate(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> token_gate(const Tensor<double>&, const Tensor<double>&);

namespace {

std::string blk(std::size_t l, const char* leaf) { return "blocks." + std::to_string(l) + "." + leaf; }

// Per-sample noise of one block stacked sample-major, or nothing when no
// sample carries any.
template <typename T>
std::optional<Tensor<T>> stacked_noise(std::span<const ModelInput* const> batch,
                                       std::vector<std::vector<double>> ModelInput::*field, std::size_t k,
                                       std::size_t positions, std::size_t channels) {
  const std::size_t count = positions * channels;
  bool any = false;
  for (const ModelInput* in : batch) any = any || ((in->*field).size() > k && !(in->*field)[k].empty());
  if (!any) return std::nullopt;
  std::vector<T> v;
  v.reserve(batch.size() * count);
  for (const ModelInput* in : batch) {
    const auto& all = in->*field;
    if (all.size() <= k || all[k].empty()) {
      v.insert(v.end(), count, T(0));
      continue;
    }
    if (all[k].size() != count) {
      throw std::invalid_argument("Predictor: noise for block " + std::to_string(k + 1) + " has " +
                                  std::to_string(all[k].size()) + " values, expected " + std::to_string(count));
    }
    for (double x : all[k]) v.push_back(T(x));
  }
  return Tensor<T>::from({batch.size() * positions, channels}, std::move(v));
}

}  // namespace

template <typename T>
Predictor<T>::Predictor(const PredictorConfig& config, const Codebook& codebook, Rng& rng) : config_(config) {
  config_.validate();
  if (codebook.size() != config_.vocab || codebook.dim() != config_.embed_dim) {
    throw std::invalid_argument("Predictor: codebook " + std::to_string(codebook.size()) + "x" +
                                std::to_string(codebook.dim()) + " does not match vocab " +
                                std::to_string(config_.vocab) + ", embed_dim " + std::to_string(config_.embed_dim));
  }
  std::vector<T> cb(codebook.entries().begin(), codebook.entries().end());
  codebook_ = Tensor<T>::from({codebook.size(), codebook.dim()}, std::move(cb));

  const std::size_t d = config_.width, c = config_.embed_dim, v = config_.vocab, h = config_.mask_hidden;
  const std::size_t k = config_.schedule.size(), tokens = config_.schedule.total_tokens();
  const double s = config_.init_std, s_out = s / std::sqrt(2.0 * double(config_.depth));

  params_.add_normal("input.context.weight", {c, d}, rng, 1.0 / std::sqrt(double(c)));
  params_.add_normal("input.cond.weight", {c, d}, rng, 1.0 / std::sqrt(double(c)));
  params_.add_constant("input.bias", {d}, T(0));
  params_.add_normal("input.start", {1, d}, rng, s);
  params_.add_normal("embed.scale", {k, d}, rng, s);
  params_.add_normal("embed.pos", {tokens, d}, rng, s);
  for (std::size_t l = 0; l < config_.depth; ++l) {
    params_.add_constant(blk(l, "ln1.gamma"), {d}, T(1));
    params_.add_constant(blk(l, "ln1.beta"), {d}, T(0));
    params_.add_normal(blk(l, "attn.qkv.weight"), {d, 3 * d}, rng, s);
    params_.add_constant(blk(l, "attn.qkv.bias"), {3 * d}, T(0));
    params_.add_normal(blk(l, "attn.out.weight"), {d, d}, rng, s_out);
    params_.add_constant(blk(l, "attn.out.bias"), {d}, T(0));
    params_.add_constant(blk(l, "ln2.gamma"), {d}, T(1));
    params_.add_constant(blk(l, "ln2.beta"), {d}, T(0));
    params_.add_normal(blk(l, "mlp.fc1.weight"), {d, 4 * d}, rng, s);
    params_.add_constant(blk(l, "mlp.fc1.bias"), {4 * d}, T(0));
    params_.add_normal(blk(l, "mlp.fc2.weight"), {4 * d, d}, rng, s_out);
    params_.add_constant(blk(l, "mlp.fc2.bias"), {d}, T(0));
  }
  params_.add_constant("head.ln.gamma", {d}, T(1));
  params_.add_constant("head.ln.beta", {d}, T(0));
  params_.add_normal("head.weight", {d, v}, rng, s);
  params_.add_constant("head.bias", {v}, T(0));
  params_.add_normal("mask.fc1.weight", {c + 1, h}, rng, 1.0 / std::sqrt(double(c + 1)));
  params_.add_constant("mask.fc1.bias", {h}, T(0));
  params_.add_normal("mask.fc2.weight", {h, 1}, rng, 0.1 / std::sqrt(double(h)));
  params_.add_constant("mask.fc2.bias", {1}, T(0));
  params_.add_constant("mask.scale_bias", {k}, T(0));
}

template <typename T>
std::vector<std::size_t> Predictor<T>::offsets(std::size_t blocks) const {
  auto off = config_.schedule.offsets();
  if (blocks == 0 || blocks > config_.schedule.size()) {
    throw std::invalid_argument("Predictor: block count " + std::to_string(blocks) + " outside [1, " +
                                std::to_string(config_.schedule.size()) + "]");
  }
  off.resize(blocks + 1);
  return off;
}

template <typename T>
Tensor<T> Predictor<T>::mask_generator(const Tensor<T>& embed, const Tensor<T>& guide, std::size_t scale) const {
  if (embed.rank() != 2 || embed.dim(1) != config_.embed_dim || guide.rank() != 2 || guide.dim(1) != 1 ||
      guide.dim(0) != embed.dim(0)) {
    throw nd::ShapeError("mask_generator: expected embed [N," + std::to_string(config_.embed_dim) +
                         "] and guidance [N,1], got " + nd::shape_str(embed.shape()) + " and " +
                         nd::shape_str(guide.shape()));
  }
  if (scale >= config_.schedule.size()) throw std::invalid_argument("mask_generator: scale out of range");
  if (mask_override_) return Tensor<T>::full({embed.dim(0), 1}, T(*mask_override_));
  const Tensor<T> in = nd::concat<T>({embed, guide}, 1);
  const Tensor<T> hidden =
      nd::gelu(nd::add(nd::matmul(in, params_.get("mask.fc1.weight")), params_.get("mask.fc1.bias")));
  const Tensor<T> bias = nd::slice_rows(
      nd::reshape(params_.get("mask.scale_bias"), {config_.schedule.size(), 1}), scale, scale + 1);
  const Tensor<T> out = nd::add(nd::add(nd::matmul(hidden, params_.get("mask.fc2.weight")),
                                        params_.get("mask.fc2.bias")),
                                bias);
  return nd::sigmoid(out);
}

template <typename T>
Tensor<T> Predictor<T>::embed_tokens(std::span<const ModelInput* const> batch, std::size_t scale) const {
  const Extent e = config_.schedule[scale];
  std::vector<std::size_t> rows;
  rows.reserve(batch.size() * e.area());
  for (const ModelInput* in : batch) {
    if (in->context.size() <= scale) {
      throw std::invalid_argument("Predictor: context is missing scale " + std::to_string(scale + 1));
    }
    const TokenMap& t = in->context[scale];
    if (t.extent() != e) {
      throw std::invalid_argument("Predictor: context scale " + std::to_string(scale + 1) + " has shape " +
                                  to_string(t.extent()) + ", expected " + to_string(e));
    }
    for (int idx : t.indices) {
      if (idx < 0 || std::size_t(idx) >= config_.vocab) throw std::out_of_range("Predictor: token out of range");
      rows.push_back(std::size_t(idx));
    }
  }
  return nd::gather_rows(codebook_, rows);
}

template <typename T>
Tensor<T> Predictor<T>::guidance_features(std::span<const ModelInput* const> batch, std::size_t scale) const {
  const Extent e = config_.schedule[scale];
  std::vector<T> v;
  v.reserve(batch.size() * e.area());
  for (const ModelInput* in : batch) {
    if (in->guidance.size() <= scale || in->guidance[scale].extent() != e) {
      throw std::invalid_argument("Predictor: guidance missing or misshapen at scale " + std::to_string(scale + 1));
    }
    for (double g : in->guidance[scale].values) v.push_back(T(g));
  }
  return Tensor<T>::from({batch.size() * e.area(), 1}, std::move(v));
}

template <typename T>
Tensor<T> Predictor<T>::build_sequence(std::span<const ModelInput* const> batch, std::size_t blocks,
                                       std::vector<Tensor<T>>* masks) const {
  if (batch.empty()) throw std::invalid_argument("build_sequence: empty batch");
  const auto off = offsets(blocks);
  const ScaleSchedule& sched = config_.schedule;
  const std::size_t nb = batch.size(), d = config_.width, c = config_.embed_dim;
  for (const ModelInput* in : batch) {
    if (in->cond.extent() != sched.final() || in->cond.channels != c) {
      throw std::invalid_argument("build_sequence: condition latent must be " + std::to_string(c) + "x" +
                                  to_string(sched.final()));
    }
    if (in->context.size() + 1 < blocks) {
      throw std::invalid_argument("build_sequence: " + std::to_string(blocks) + " blocks need " +
                                  std::to_string(blocks - 1) + " contiguous context scales, got " +
                                  std::to_string(in->context.size()));
    }
  }
  const Tensor<T>& pos = params_.get("embed.pos");
  const Tensor<T>& scale_emb = params_.get("embed.scale");
  std::vector<Tensor<T>> parts;
  Tensor<T> acc;
  for (std::size_t k = 0; k < blocks; ++k) {
    const Extent e = sched[k];
    const std::size_t n = e.area();
    Tensor<T> x;
    if (k == 0) {
      x = nd::add(Tensor<T>::zeros({nb * n, d}), params_.get("input.start"));
      if (const auto noise = stacked_noise<T>(batch, &ModelInput::context_noise, 0, n, c)) {
        x = nd::add(x, nd::matmul(*noise, params_.get("input.context.weight")));
      }
    } else {
      Tensor<T> g = embed_tokens(batch, k - 1);
      if (const auto noise = stacked_noise<T>(batch, &ModelInput::embed_noise, k - 1, sched[k - 1].area(), c)) {
        g = nd::add(g, *noise);
      }
      if (config_.gating) {
        const Tensor<T> m = mask_generator(g, guidance_features(batch, k - 1), k - 1);
        if (masks) masks->push_back(m);
        g = token_gate(g, m);
      }
      const Tensor<T> up = resample_features(g, nb, sched[k - 1], sched.final());
      acc = k == 1 ? up : nd::add(acc, up);
      Tensor<T> ctx = resample_features(acc, nb, sched.final(), e);
      if (const auto noise = stacked_noise<T>(batch, &ModelInput::context_noise, k, n, c)) ctx = nd::add(ctx, *noise);
      x = nd::matmul(ctx, params_.get("input.context.weight"));
    }
    if (config_.condition == ConditionMode::Additive) {
      std::vector<T> cv;
      cv.reserve(nb * n * c);
      for (const ModelInput* in : batch) {
        for (double v : resize(in->cond, e).interleaved()) cv.push_back(T(v));
      }
      x = nd::add(x, nd::matmul(Tensor<T>::from({nb * n, c}, std::move(cv)), params_.get("input.cond.weight")));
    }
    x = nd::add(x, params_.get("input.bias"));
    x = nd::add(x, nd::slice_rows(scale_emb, k, k + 1));
    x = nd::add(nd::reshape(x, {nb, n, d}), nd::slice_rows(pos, off[k], off[k + 1]));
    parts.push_back(x);
  }
  return nd::reshape(parts.size() == 1 ? parts.front() : nd::concat<T>(parts, 1), {nb * off.back(), d});
}

template <typename T>
Tensor<T> Predictor<T>::transformer(const Tensor<T>& sequence, std::size_t batch, std::size_t blocks,
                                    AttentionRecord* record, nd::AttentionCounter* counter) const {
  const auto off = offsets(blocks);
  if (sequence.rank() != 2 || sequence.dim(0) != batch * off.back() || sequence.dim(1) != config_.width) {
    throw nd::ShapeError("transformer: sequence " + nd::shape_str(sequence.shape()) + " does not match batch " +
                         std::to_string(batch) + " x " + std::to_string(off.back()) + " tokens");
  }
  if (record) {
    record->offsets = off;
    record->layers.assign(config_.depth, {});
  }
  const auto& p = params_;
  Tensor<T> x = sequence;
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const Tensor<T> h1 = nd::layer_norm(x, p.get(blk(l, "ln1.gamma")), p.get(blk(l, "ln1.beta")));
    const Tensor<T> qkv = nd::add(nd::matmul(h1, p.get(blk(l, "attn.qkv.weight"))), p.get(blk(l, "attn.qkv.bias")));
    const Tensor<T> att = nd::block_causal_attention(qkv, batch, config_.heads, off,
                                                     record ? &record->layers[l] : nullptr, counter);
    x = nd::add(x, nd::add(nd::matmul(att, p.get(blk(l, "attn.out.weight"))), p.get(blk(l, "attn.out.bias"))));
    const Tensor<T> h2 = nd::layer_norm(x, p.get(blk(l, "ln2.gamma")), p.get(blk(l, "ln2.beta")));
    const Tensor<T> mid = nd::gelu(nd::add(nd::matmul(h2, p.get(blk(l, "mlp.fc1.weight"))), p.get(blk(l, "mlp.fc1.bias"))));
    x = nd::add(x, nd::add(nd::matmul(mid, p.get(blk(l, "mlp.fc2.weight"))), p.get(blk(l, "mlp.fc2.bias"))));
  }
  const Tensor<T> hf = nd::layer_norm(x, p.get("head.ln.gamma"), p.get("head.ln.beta"));
  return nd::add(nd::matmul(hf, p.get("head.weight")), p.get("head.bias"));
}

template <typename T>
ForwardResult<T> Predictor<T>::forward(std::span<const ModelInput* const> batch, std::size_t blocks,
                                       AttentionRecord* record, nd::AttentionCounter* counter) const {
  ForwardResult<T> out;
  out.batch = batch.size();
  out.blocks = blocks;
  const Tensor<T> seq = build_sequence(batch, blocks, &out.masks);
  out.logits = transformer(seq, batch.size(), blocks, record, counter);
  const auto off = offsets(blocks);
  for (std::size_t k = 0; k < blocks; ++k) {
    std::vector<std::size_t> rows;
    rows.reserve(batch.size() * (off[k + 1] - off[k]));
    for (std::size_t b = 0; b < batch.size(); ++b) {
      for (std::size_t i = off[k]; i < off[k + 1]; ++i) rows.push_back(b * off.back() + i);
    }
    out.scale_logits.push_back(nd::gather_rows(out.logits, rows));
  }
  return out;
}

template class Predictor<float>;
template class Predictor<double>;

}  // namespace avar
