#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "alignvar/params.hpp"

namespace avar::nd {

// Adam with decoupled weight decay. Decay applies to matrices (rank >= 2)
// only; biases, norms and per-scale offsets are left undecayed.
template <typename T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(Options opts) : opts_(opts) {}

  void step(ParamStore<T>& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, double(t_));
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      auto& state = state_[name];
      if (state.m.empty()) {
        state.m.assign(p.numel(), 0.0);
        state.v.assign(p.numel(), 0.0);
      }
      auto value = p.mutable_data();
      const auto grad = p.grad();
      const bool decay = p.rank() >= 2 && opts_.weight_decay > 0.0;
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad[i];
        state.m[i] = opts_.beta1 * state.m[i] + (1.0 - opts_.beta1) * g;
        state.v[i] = opts_.beta2 * state.v[i] + (1.0 - opts_.beta2) * g * g;
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        double x = value[i];
        if (decay) x -= lr * opts_.weight_decay * x;
        x -= lr * mhat / (std::sqrt(vhat) + opts_.eps);
        value[i] = static_cast<T>(x);
      }
    }
    ++params.step;
  }

  std::uint64_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  Options opts_;
  std::uint64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

// Cosine decay from base_lr at step 0 towards 0 at step total.
inline double cosine_lr(double base_lr, std::uint64_t step, std::uint64_t total) {
  constexpr double kPi = 3.14159265358979323846;
  if (total == 0) return base_lr;
  return 0.5 * base_lr * (1.0 + std::cos(kPi * double(step) / double(total)));
}

}  // namespace avar::nd
