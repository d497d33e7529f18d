#pragma once

// Diagnostics over frozen models: per-scale prediction error, perturbation
// robustness, Canny edge IoU, attention locality and the attention cost model.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "alignvar/pipeline.hpp"

namespace avar {

struct ScaleErrorProfile {
  std::vector<double> mse;  // per scale
  std::size_t samples = 0;

  // Mean over scales [0, count).
  double leading_mean(std::size_t count) const;
};

// cumulative[i][k] is sample i's predicted cumulative latent at scale k;
// errors are taken against lookup(u_gt[i][k]) and averaged over samples.
ScaleErrorProfile scale_error_profile(const std::vector<std::vector<LatentMap>>& cumulative,
                                      const std::vector<std::vector<TokenMap>>& u_gt, const Codebook& codebook);

// Teacher-forced argmax tokens of every block, one sample per forward.
std::vector<TokenMap> teacher_forced_tokens(const AlignVar& model, const Sample& sample);

// Hard cumulative predictions from teacher-forced argmax tokens against the
// full-scale targets.
ScaleErrorProfile per_scale_mse(const AlignVar& model, std::span<const Sample> samples, std::size_t threads = 1);

struct PerturbationRow {
  std::vector<std::size_t> scales;  // injected jointly
  double sigma = 0.0;
  double latent_mse = 0.0;  // final latent vs the unperturbed run, mean over items
  double psnr = 0.0;        // SR image vs the unperturbed run, mean of per-item MSE in dB; inf when identical
};

struct PerturbationReport {
  std::vector<std::vector<std::size_t>> targets;
  std::vector<double> sigmas;
  std::vector<PerturbationRow> rows;  // target-major

  const PerturbationRow& at(std::size_t target, std::size_t level) const;
};

struct PerturbationOptions {
  std::vector<std::vector<std::size_t>> targets;  // each entry is one injected scale set
  std::vector<double> sigmas;
  std::uint64_t seed = 0;
  std::size_t repeats = 1;  // noise draws per item
  bool pre_gate = false;
};

// Noise of std sigma x codebook RMS on the context entering each chosen scale,
// greedy decoding otherwise. Item i, repeat r draws from a stream that depends
// only on (seed, i, r), so two models see identical perturbations.
PerturbationReport perturbation_probe(const AlignVar& model, std::span<const Image> lr,
                                      const PerturbationOptions& opts, std::size_t threads = 1);

struct CannyOptions {
  double sigma = 1.0;
  double low = 0.1;   // fraction of the maximum gradient magnitude
  double high = 0.3;
};

struct EdgeMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> on;

  std::size_t count() const;
  friend bool operator==(const EdgeMask&, const EdgeMask&) = default;
};

// Gaussian blur, Sobel gradients, non-maximum suppression over four
// directions, 8-connected hysteresis. Multi-channel input uses luminance.
EdgeMask canny(const Image& img, const CannyOptions& opts = {});
// |a & b| / |a | b|; two empty masks give 1.
double mask_iou(const EdgeMask& a, const EdgeMask& b);
EdgeMask dilate(const EdgeMask& m);
double edge_iou(const Image& pred, const Image& gt, const CannyOptions& opts = {});

struct LocalityEntry {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::size_t block = 0;
  double distance = 0.0;    // query-grid units, keys of other scales mapped by normalized position
  double normalized = 0.0;  // in [0,1]^2 coordinates
};

struct LocalityReport {
  std::vector<LocalityEntry> entries;  // layer-major, then head, then block
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t blocks = 0;

  const LocalityEntry& at(std::size_t layer, std::size_t head, std::size_t block) const;
};

// Mean over the queries of each block of the expected query-key distance
// under the query's attention row.
LocalityReport attention_locality(const AttentionRecord& record, const ScaleSchedule& schedule);

struct CostModel {
  std::uint64_t ratio = 0;
  std::size_t steps = 0;
  std::vector<std::uint64_t> tokens;  // cumulative tokens attended at each step
  std::vector<std::uint64_t> costs;   // tokens^2
  std::uint64_t total = 0;
};

// Uniform-ratio schedule with sides a^0 .. a^(K-1).
CostModel cost_model(std::uint64_t a, std::size_t k);
// Least-squares slope of log(total cost) against log(a^(K-1)) over K in ks.
double cost_slope(std::uint64_t a, std::span<const std::size_t> ks);
// Query-key pairs per layer and head counted by the attention kernel for the
// prefix forwards of inference, one entry per step.
std::vector<std::uint64_t> empirical_costs(const Predictor<float>& predictor, const ModelInput& input);

std::string profile_csv(const ScaleErrorProfile& p);
std::string perturbation_csv(const PerturbationReport& r);
std::string locality_csv(const LocalityReport& r);
std::string cost_csv(const CostModel& c);

}  // namespace avar
