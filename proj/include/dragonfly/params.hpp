#pragma once

#include <map>
#include <string>
#include <vector>

#include "dragonfly/autodiff.hpp"

namespace dragonfly {

/// Named learnable tensors plus non-learnable batchnorm running statistics.
/// Iteration order is the lexicographic name order, which fixes every traversal.
template <typename Scalar>
class ParameterStore {
 public:
  Tensor<Scalar>& add(const std::string& name, Tensor<Scalar> value) {
    auto [it, inserted] = params_.emplace(name, std::move(value));
    if (!inserted) throw ShapeError("parameter registered twice: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor<Scalar>& get(const std::string& name) { return lookup(params_, name); }
  const Tensor<Scalar>& get(const std::string& name) const { return lookup(params_, name); }

  std::map<std::string, Tensor<Scalar>>& parameters() noexcept { return params_; }
  const std::map<std::string, Tensor<Scalar>>& parameters() const noexcept { return params_; }

  RunningStats<Scalar>& stats(const std::string& name) { return stats_[name]; }
  std::map<std::string, RunningStats<Scalar>>& all_stats() noexcept { return stats_; }
  const std::map<std::string, RunningStats<Scalar>>& all_stats() const noexcept { return stats_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, value] : params_) out.push_back(name);
    return out;
  }

  /// Number of scalar parameters whose name starts with `prefix`.
  Index count(const std::string& prefix = "") const {
    Index n = 0;
    for (const auto& [name, value] : params_) {
      if (name.compare(0, prefix.size(), prefix) == 0) n += value.size();
    }
    return n;
  }

  template <typename To>
  ParameterStore<To> cast() const {
    ParameterStore<To> out;
    for (const auto& [name, value] : params_) out.add(name, value.template cast<To>());
    for (const auto& [name, s] : stats_) {
      auto& dst = out.stats(name);
      if (!s.mean.empty()) {
        dst.mean = s.mean.template cast<To>();
        dst.var = s.var.template cast<To>();
      }
    }
    return out;
  }

 private:
  template <typename Map>
  static auto& lookup(Map& map, const std::string& name) {
    auto it = map.find(name);
    if (it == map.end()) throw ShapeError("unknown parameter: " + name);
    return it->second;
  }

  std::map<std::string, Tensor<Scalar>> params_;
  std::map<std::string, RunningStats<Scalar>> stats_;
};

}  // namespace dragonfly
