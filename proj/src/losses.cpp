#include "alignvar/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "alignvar/model.hpp"

namespace avar {

using nd::Tensor;

std::vector<std::vector<int>> stack_targets(std::span<const std::vector<TokenMap>> per_sample, std::size_t scales) {
  std::vector<std::vector<int>> out(scales);
  for (const auto& maps : per_sample) {
    if (maps.size() < scales) throw std::invalid_argument("stack_targets: sample has too few scales");
    for (std::size_t k = 0; k < scales; ++k) out[k].insert(out[k].end(), maps[k].indices.begin(), maps[k].indices.end());
  }
  return out;
}

template <typename T>
CeTerms<T> ce_loss(std::span<const Tensor<T>> scale_logits, std::span<const std::vector<int>> targets) {
  if (scale_logits.empty() || scale_logits.size() != targets.size()) {
    throw std::invalid_argument("ce_loss: " + std::to_string(scale_logits.size()) + " logit blocks vs " +
                                std::to_string(targets.size()) + " target blocks");
  }
  CeTerms<T> out;
  Tensor<T> total;
  for (std::size_t k = 0; k < scale_logits.size(); ++k) {
    const Tensor<T> s = nd::cross_entropy_sum(scale_logits[k], std::span<const int>(targets[k]));
    total = k == 0 ? s : nd::add(total, s);
    out.per_scale.push_back(double(s.item()) / double(targets[k].size()));
    out.sum += double(s.item());
    out.tokens += targets[k].size();
  }
  out.mean = nd::scale(total, T(1) / T(out.tokens));
  return out;
}

namespace {

template <typename T>
void check_stochastic(const Tensor<T>& p, std::size_t rows, std::size_t vocab, std::size_t m) {
  if (p.rank() != 2 || p.dim(0) != rows || p.dim(1) != vocab) {
    throw nd::ShapeError("cumulative_prediction: probabilities of scale " + std::to_string(m + 1) + " are " +
                         nd::shape_str(p.shape()) + ", expected [" + std::to_string(rows) + "," +
                         std::to_string(vocab) + "]");
  }
  const auto v = p.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
      if (v[r * vocab + j] < T(-1e-4)) throw std::invalid_argument("cumulative_prediction: negative probability");
      s += double(v[r * vocab + j]);
    }
    if (std::abs(s - 1.0) > 1e-4) {
      throw std::invalid_argument("cumulative_prediction: row " + std::to_string(r) + " of scale " +
                                  std::to_string(m + 1) + " sums to " + std::to_string(s));
    }
  }
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> cumulative_predictions(std::span<const Tensor<T>> probs, const Tensor<T>& codebook,
                                              const ScaleSchedule& schedule, std::size_t batch,
                                              const HccOptions& opts) {
  if (probs.size() > schedule.size()) throw std::invalid_argument("cumulative_prediction: more blocks than scales");
  if (codebook.rank() != 2) throw nd::ShapeError("cumulative_prediction: codebook must be [V, C]");
  std::vector<Tensor<T>> soft;
  for (std::size_t m = 0; m < probs.size(); ++m) {
    check_stochastic(probs[m], batch * schedule[m].area(), codebook.dim(0), m);
    soft.push_back(nd::matmul(probs[m], codebook));
  }
  std::vector<Tensor<T>> out;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    Tensor<T> acc;
    for (std::size_t m = 0; m <= k; ++m) {
      const Tensor<T> src = opts.stop_gradient && m < k ? soft[m].detach() : soft[m];
      const Tensor<T> up = resample_features(src, batch, schedule[m], schedule[k]);
      acc = m == 0 ? up : nd::add(acc, up);
    }
    out.push_back(acc);
  }
  return out;
}

template <typename T>
Tensor<T> cumulative_prediction(std::span<const Tensor<T>> probs, const Tensor<T>& codebook,
                                const ScaleSchedule& schedule, std::size_t batch, std::size_t k) {
  if (k >= probs.size()) throw std::invalid_argument("cumulative_prediction: scale out of range");
  return cumulative_predictions<T>(probs.first(k + 1), codebook, schedule, batch).back();
}

template <typename T>
Tensor<T> embed_targets(std::span<const std::vector<TokenMap>> per_sample, std::size_t k, const Tensor<T>& codebook) {
  std::vector<std::size_t> rows;
  for (const auto& maps : per_sample) {
    if (maps.size() <= k) throw std::invalid_argument("embed_targets: sample has no scale " + std::to_string(k + 1));
    for (int idx : maps[k].indices) {
      if (idx < 0 || std::size_t(idx) >= codebook.dim(0)) throw std::out_of_range("embed_targets: token out of range");
      rows.push_back(std::size_t(idx));
    }
  }
  return nd::gather_rows(codebook, rows).detach();
}

template <typename T>
HccTerms<T> hcc_loss(std::span<const Tensor<T>> u_pred, std::span<const Tensor<T>> targets,
                     const ScaleSchedule& schedule, std::size_t batch, const std::optional<Tensor<T>>& pixel_basis) {
  if (u_pred.empty() || u_pred.size() != targets.size() || u_pred.size() > schedule.size()) {
    throw std::invalid_argument("hcc_loss: " + std::to_string(u_pred.size()) + " predicted scales vs " +
                                std::to_string(targets.size()) + " targets (schedule has " +
                                std::to_string(schedule.size()) + ")");
  }
  HccTerms<T> out;
  for (std::size_t k = 0; k < u_pred.size(); ++k) {
    if (u_pred[k].shape() != targets[k].shape() || u_pred[k].dim(0) != batch * schedule[k].area()) {
      throw nd::ShapeError("hcc_loss: scale " + std::to_string(k + 1) + " prediction " +
                           nd::shape_str(u_pred[k].shape()) + " vs target " + nd::shape_str(targets[k].shape()));
    }
    Tensor<T> diff = nd::sub(u_pred[k], targets[k]);
    std::size_t width = diff.dim(1);
    if (pixel_basis) {
      diff = nd::matmul(diff, *pixel_basis);
      width = pixel_basis->dim(1);
    }
    const double norm = double(width * schedule[k].area() * batch);
    const Tensor<T> term = nd::scale(nd::sum(nd::square(diff)), T(1.0 / norm));
    out.per_scale.push_back(double(term.item()));
    out.value = k == 0 ? term : nd::add(out.value, term);
  }
  return out;
}

LossBreakdown total_loss(double ce, double hcc, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be >= 0");
  LossBreakdown b;
  b.ce = ce;
  b.hcc = hcc;
  b.lambda = lambda;
  b.total = ce + lambda * hcc;
  return b;
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& ce, const Tensor<T>& hcc, double lambda) {
  if (!(lambda >= 0.0)) throw std::invalid_argument("total_loss: lambda must be >= 0");
  if (lambda == 0.0) return ce;
  return nd::add(ce, nd::scale(hcc, T(lambda)));
}

template <typename T>
LatentMap latent_of(const Tensor<T>& features, std::size_t sample, Extent extent) {
  if (features.rank() != 2 || features.dim(0) < (sample + 1) * extent.area()) {
    throw nd::ShapeError("latent_of: " + nd::shape_str(features.shape()) + " has no sample " + std::to_string(sample));
  }
  const std::size_t c = features.dim(1), n = extent.area() * c;
  const auto v = features.data().subspan(sample * n, n);
  const std::vector<double> d(v.begin(), v.end());
  return LatentMap::from_interleaved(d, c, extent);
}

#define AVAR_INSTANTIATE(T)                                                                                      \
  template CeTerms<T> ce_loss(std::span<const Tensor<T>>, std::span<const std::vector<int>>);                    \
  template std::vector<Tensor<T>> cumulative_predictions(std::span<const Tensor<T>>, const Tensor<T>&,           \
                                                         const ScaleSchedule&, std::size_t, const HccOptions&);  \
  template Tensor<T> cumulative_prediction(std::span<const Tensor<T>>, const Tensor<T>&, const ScaleSchedule&,   \
                                           std::size_t, std::size_t);                                            \
  template Tensor<T> embed_targets(std::span<const std::vector<TokenMap>>, std::size_t, const Tensor<T>&);       \
  template HccTerms<T> hcc_loss(std::span<const Tensor<T>>, std::span<const Tensor<T>>, const ScaleSchedule&,    \
                                std::size_t, const std::optional<Tensor<T>>&);                                   \
  template Tensor<T> total_loss(const Tensor<T>&, const Tensor<T>&, double);                                     \
  template LatentMap latent_of(const Tensor<T>&, std::size_t, Extent);

AVAR_INSTANTIATE(float)
AVAR_INSTANTIATE(double)

#undef AVAR_INSTANTIATE

}  // namespace avar
