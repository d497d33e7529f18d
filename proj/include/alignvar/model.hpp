#pragma once

// Scale-wise autoregressive predictor with block-causal attention, the
// structure-aware mask generator and (1 + m) token gating.
//
// Token features are position-major: a scale-k map of B samples is a
// [B * H_k * W_k, C] tensor, sample-major, row-major inside each grid.

#include <optional>
#include <string>
#include <vector>

#include "alignvar/attention.hpp"
#include "alignvar/codec.hpp"
#include "alignvar/guidance.hpp"
#include "alignvar/params.hpp"
#include "alignvar/resample.hpp"
#include "alignvar/tensor.hpp"

namespace avar {

// Differentiable resize of [batch * src.area(), C] features.
template <typename T>
nd::Tensor<T> resample_features(const nd::Tensor<T>& x, std::size_t batch, Extent src, Extent dst);

enum class ConditionMode { Additive, None };

const char* to_string(ConditionMode mode);
ConditionMode parse_condition_mode(const std::string& text);

struct PredictorConfig {
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t width = 128;
  std::size_t vocab = 64;
  std::size_t embed_dim = 16;
  ScaleSchedule schedule = ScaleSchedule::square({1, 2, 3, 4, 6, 8});
  ConditionMode condition = ConditionMode::Additive;
  std::size_t mask_hidden = 32;
  // Structure-aware gating of the context embeddings.
  bool gating = true;
  double init_std = 0.02;

  void validate() const;
};

// LR image -> bilinear resize to the HR pixel size -> shared encoder.
LatentMap condition_encode(const LinearCodec& codec, const Image& lr, Extent latent);

// Everything the predictor reads for one sample.
struct ModelInput {
  LatentMap cond;                     // c at the final scale
  std::vector<GuidanceMap> guidance;  // one per scale
  std::vector<TokenMap> context;      // residual tokens of the scales already decided
  // Optional perturbations, indexed by block (empty entries are skipped),
  // each H_k * W_k * C values in position-major order:
  // context_noise[k] is added to the context features entering block k,
  // embed_noise[k] to the scale-k token embeddings before gating.
  std::vector<std::vector<double>> context_noise;
  std::vector<std::vector<double>> embed_noise;
};

struct ModulationMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  int scale = -1;
};

struct AttentionRecord {
  std::vector<std::size_t> offsets;            // scale boundaries, offsets.back() = tokens
  std::vector<nd::AttentionCapture> layers;    // per layer, sample 0
};

template <typename T>
struct ForwardResult {
  nd::Tensor<T> logits;                  // [B * tokens, vocab]
  std::vector<nd::Tensor<T>> scale_logits;  // per block: [B * H_k * W_k, vocab]
  std::vector<nd::Tensor<T>> masks;         // per gated context scale: [B * H_k * W_k, 1]
  std::size_t batch = 0;
  std::size_t blocks = 0;
};

template <typename T>
class Predictor {
 public:
  Predictor(const PredictorConfig& config, const Codebook& codebook, Rng& rng);

  const PredictorConfig& config() const { return config_; }
  nd::ParamStore<T>& params() { return params_; }
  const nd::ParamStore<T>& params() const { return params_; }
  const nd::Tensor<T>& codebook() const { return codebook_; }

  // Test hook: a constant mask value replacing the generator output.
  void set_mask_override(std::optional<double> value) { mask_override_ = value; }

  // m = sigmoid(MLP([embed, guide]) + scale_bias[k]); embed [N, C], guide [N, 1].
  nd::Tensor<T> mask_generator(const nd::Tensor<T>& embed, const nd::Tensor<T>& guide, std::size_t scale) const;

  // Codebook rows of the tokens of `scale` for every sample: [B * H_k * W_k, C].
  nd::Tensor<T> embed_tokens(std::span<const ModelInput* const> batch, std::size_t scale) const;
  nd::Tensor<T> guidance_features(std::span<const ModelInput* const> batch, std::size_t scale) const;

  // Input features [B * T', width] for the first `blocks` scale blocks.
  nd::Tensor<T> build_sequence(std::span<const ModelInput* const> batch, std::size_t blocks,
                               std::vector<nd::Tensor<T>>* masks = nullptr) const;

  ForwardResult<T> forward(std::span<const ModelInput* const> batch, std::size_t blocks,
                           AttentionRecord* record = nullptr, nd::AttentionCounter* counter = nullptr) const;
  // Transformer body on a prepared sequence.
  nd::Tensor<T> transformer(const nd::Tensor<T>& sequence, std::size_t batch, std::size_t blocks,
                            AttentionRecord* record = nullptr, nd::AttentionCounter* counter = nullptr) const;

  std::vector<std::size_t> offsets(std::size_t blocks) const;

 private:
  PredictorConfig config_;
  nd::ParamStore<T> params_;
  nd::Tensor<T> codebook_;  // [vocab, C], constant
  std::optional<double> mask_override_;
};

// (1 + m) * embed with m broadcast over channels.
template <typename T>
nd::Tensor<T> token_gate(const nd::Tensor<T>& embed, const nd::Tensor<T>& mask);

ModulationMask to_mask(std::span<const double> values, Extent extent, int scale);

}  // namespace avar
