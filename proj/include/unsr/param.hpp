#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "unsr/rng.hpp"
#include "unsr/tensor.hpp"

namespace unsr {

// A named learnable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
    grad = Tensor(value.shape());
  }
};

// Ordered, name-unique set of parameters. Order is registration order and is
// the canonical iteration order everywhere (updates, norms, checkpoints).
class ParamSet {
 public:
  Parameter& add(const std::string& name, std::vector<long> shape) {
    if (index_.count(name)) throw UsageError("ParamSet: duplicate parameter name " + name);
    params_.push_back(std::make_unique<Parameter>(name, Tensor(std::move(shape))));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  // Registers and fills with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Parameter& add_linear(const std::string& name, std::vector<long> shape, long fan_in,
                        RngStream& rng) {
    Parameter& p = add(name, std::move(shape));
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& x : p.value.values()) x = rng.uniform(-bound, bound);
    return p;
  }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("ParamSet: unknown parameter " + name);
    return *params_[it->second];
  }

  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("ParamSet: unknown parameter " + name);
    return *params_[it->second];
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grads() {
    for (auto& p : params_) p->grad.fill(0.0);
  }

  // Hard copy of every value from `src`; structures must match by name.
  void copy_values_from(const ParamSet& src) {
    if (src.size() != size()) throw UsageError("ParamSet: size mismatch in copy");
    for (std::size_t i = 0; i < size(); ++i) {
      const Parameter& s = src[i];
      Parameter& d = *params_[i];
      if (s.name != d.name || !s.value.same_shape(d.value))
        throw UsageError("ParamSet: layout mismatch at " + d.name);
      d.value.values() = s.value.values();
    }
  }

  double max_abs_value_diff(const ParamSet& other) const {
    double m = 0.0;
    for (std::size_t i = 0; i < size(); ++i) {
      const auto& a = params_[i]->value.values();
      const auto& b = other[i].value.values();
      for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, std::abs(a[j] - b[j]));
    }
    return m;
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& p : params_)
      for (double g : p->grad.values()) s += g * g;
    return std::sqrt(s);
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace unsr
