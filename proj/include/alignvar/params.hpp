#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "alignvar/rng.hpp"
#include "alignvar/tensor.hpp"

namespace avar::nd {

// Named trainable leaves. Iteration order is lexicographic by name.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (params_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    value.set_requires_grad(true);
    return params_.emplace(name, std::move(value)).first->second;
  }
  Tensor<T>& add_normal(const std::string& name, Shape shape, Rng& rng, double stddev) {
    std::vector<T> v(numel(shape));
    for (T& x : v) x = static_cast<T>(rng.normal() * stddev);
    return add(name, Tensor<T>::from(std::move(shape), std::move(v)));
  }
  Tensor<T>& add_constant(const std::string& name, Shape shape, T value) {
    return add(name, Tensor<T>::full(std::move(shape), value));
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("ParamStore: no parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& get(const std::string& name) {
    return const_cast<Tensor<T>&>(static_cast<const ParamStore&>(*this).get(name));
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.numel();
    return n;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [n, _] : params_) out.push_back(n);
    return out;
  }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::uint64_t step = 0;

 private:
  std::map<std::string, Tensor<T>> params_;
};

}  // namespace avar::nd
