#pragma once

// Configuration, tokenizer fitting, teacher-forced training, scale-by-scale
// inference and the checkpoint container.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "alignvar/codec.hpp"
#include "alignvar/data.hpp"
#include "alignvar/losses.hpp"
#include "alignvar/model.hpp"
#include "alignvar/optim.hpp"

namespace avar {

struct TrainConfig {
  // data
  std::string dataset;  // folder of HR images; empty selects the generated toy set
  std::size_t toy_count = 4;
  std::size_t image_size = 64;
  std::uint64_t data_seed = 7;
  DegradeOptions degrade;
  // tokenizer
  std::string codec = "pca";  // pca | dct
  std::size_t patch = 8;
  ResidualFitOptions codebook;
  // predictor; model.vocab and model.embed_dim also size the codebook and codec
  PredictorConfig model;
  // optimization
  std::size_t steps = 2000;
  std::optional<std::size_t> epochs;  // overrides steps when set
  std::size_t batch = 8;
  double lr = 3e-4;
  double weight_decay = 0.05;
  bool cosine = true;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  // loss
  double lambda = 1.0;
  bool hcc_stop_gradient = false;
  bool hcc_pixel = false;

  void validate() const;
  // Optimizer updates for a dataset of n images.
  std::size_t total_steps(std::size_t n) const;
};

struct ConfigKey {
  std::string name;
  std::string help;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

// Every configuration key in file order.
const std::vector<ConfigKey>& config_schema();

// "key = value" lines, '#' comments; unknown keys and bad values throw
// std::invalid_argument naming the line.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
void apply_override(TrainConfig& cfg, const std::string& assignment);  // "key=value"
std::string config_text(const TrainConfig& cfg);

// FNV-1a over the keys that fix parameter shapes and the tokenizer layout.
std::uint64_t config_digest(const TrainConfig& cfg);

// Runs fn(i) for i in [0, n) on up to `threads` workers; 1 runs inline.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

struct Tokenizer {
  LinearCodec codec;
  Codebook codebook;
};

Tokenizer fit_tokenizer(std::span<const Image> hr, const TrainConfig& cfg, Rng& rng);

// Laplacian guidance of the LR image at every scale.
std::vector<GuidanceMap> lr_guidance(const Image& lr, const ScaleSchedule& schedule);

struct Sample {
  std::string name;
  Image hr;
  Image lr;
  LatentMap z;
  std::vector<TokenMap> r_gt;  // residual chain targets
  std::vector<TokenMap> u_gt;  // full-scale targets
  ModelInput input;            // cond, guidance, teacher-forced context = r_gt
};

Sample prepare_sample(const Image& hr, const Image& lr, const Tokenizer& tok, const ScaleSchedule& schedule,
                      std::string name = {});

struct Dataset {
  std::vector<std::string> names;
  std::vector<Image> hr;
};

// The configured image folder or generated toy set; images must be
// image_size x image_size single-channel.
Dataset load_dataset(const TrainConfig& cfg);

// LR inputs from the fixed per-image degradation (stream i of the data seed).
std::vector<Image> degrade_dataset(std::span<const Image> hr, const TrainConfig& cfg, std::size_t threads = 1);

// Trained tokenizer plus predictor.
struct AlignVar {
  TrainConfig config;
  Tokenizer tokenizer;
  std::unique_ptr<Predictor<float>> predictor;
  std::uint64_t step = 0;
  Rng rng;

  AlignVar() = default;
  AlignVar(const TrainConfig& cfg, Tokenizer tok, Rng& init);
  const ScaleSchedule& schedule() const { return config.model.schedule; }
};

// Degrades and prepares every image of `data` with the model's tokenizer.
std::vector<Sample> prepare_samples(const AlignVar& model, const Dataset& data, std::size_t threads = 1);

std::string metrics_header(std::size_t scales);
std::string metrics_row(std::uint64_t step, double lr, const LossBreakdown& b);

class Trainer {
 public:
  // Fits the tokenizer on the HR images and prepares every sample.
  Trainer(const TrainConfig& cfg, const Dataset& data, std::size_t threads = 1);

  AlignVar& model() { return model_; }
  const AlignVar& model() const { return model_; }
  const std::vector<Sample>& samples() const { return samples_; }
  std::size_t total_steps() const { return total_; }

  // Loss of a batch without an update.
  LossBreakdown evaluate(std::span<const std::size_t> indices) const;
  // One teacher-forced update; non-finite losses throw with the step number.
  LossBreakdown step(std::span<const std::size_t> indices);
  // Remaining steps of the schedule; rows go to `metrics`, checkpoints to
  // `out_dir` at the configured cadence.
  void run(std::ostream* metrics, const std::filesystem::path& out_dir = {});
  // Next batch of the seeded epoch shuffle.
  std::vector<std::size_t> next_batch();

 private:
  LossBreakdown compute(std::span<const std::size_t> indices, bool update);

  TrainConfig cfg_;
  AlignVar model_;
  std::vector<Sample> samples_;
  nd::AdamW<float> opt_;
  nd::Tensor<float> codebook_;
  std::optional<nd::Tensor<float>> pixel_basis_;
  std::size_t total_ = 0;
  Rng shuffle_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// Train from the config and return the final model; writes metrics.csv and
// checkpoints under out_dir when it is non-empty.
AlignVar train(const TrainConfig& cfg, const std::filesystem::path& out_dir = {}, std::size_t threads = 1);

struct DecodeOptions {
  std::size_t top_k = 0;  // 0: greedy argmax
  double temperature = 1.0;
  std::uint64_t seed = 0;
  // Context perturbation: per block, std = sigma * codebook RMS.
  std::vector<std::size_t> perturb_scales;
  double perturb_sigma = 0.0;
  std::uint64_t perturb_seed = 0;
  bool perturb_pre_gate = false;
};

struct InferResult {
  Image sr;
  LatentMap latent;
  std::vector<TokenMap> tokens;
  std::vector<double> scale_ms;
};

ModelInput inference_input(const AlignVar& model, const Image& lr);
InferResult infer(const AlignVar& model, const Image& lr, const DecodeOptions& opts = {});

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const AlignVar& model);
void write_checkpoint(std::ostream& out, const AlignVar& model);
AlignVar load_checkpoint(const std::filesystem::path& path);
AlignVar read_checkpoint(std::istream& in);
// Rejects a checkpoint whose digest differs from config_digest(expected)
// before any parameter is read.
AlignVar load_checkpoint(const std::filesystem::path& path, const TrainConfig& expected);

// Greedy-decoded tokens vs. the teacher-forced targets, per scale.
std::vector<double> token_accuracy(const std::vector<TokenMap>& predicted, const std::vector<TokenMap>& target);

}  // namespace avar
