#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dragonfly/params.hpp"

namespace dragonfly {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Entries probed per parameter tensor; 0 probes every entry. Sampled entries are
  /// drawn without replacement from `seed`.
  Index max_entries = 0;
  std::uint64_t seed = 0;
  /// Lower bound on the denominator of the relative error.
  double abs_floor = 1e-7;
};

struct GradCheckEntry {
  std::string parameter;
  Index checked = 0;
  double max_abs_error = 0.0;
  double scale = 0.0;  ///< max(|analytic|, |numeric|) over the probed entries
  double rel_error = 0.0;
};

/// Per-parameter comparison of analytic gradients against central differences.
/// rel_error = max_i |a_i - n_i| / max(scale, abs_floor) over the probed entries i.
struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const {
    double worst = 0.0;
    for (const auto& e : entries) worst = std::max(worst, e.rel_error);
    return worst;
  }
  bool passed(double threshold) const { return max_rel_error() < threshold; }
};

template <typename Scalar>
using LossFn = std::function<Var<Scalar>(Tape<Scalar>&, const ParameterStore<Scalar>&)>;

/// `loss` must be a pure function of the parameters (no running-stat updates).
template <typename Scalar>
GradCheckReport grad_check(const LossFn<Scalar>& loss, ParameterStore<Scalar>& params, GradCheckOptions options = {});

}  // namespace dragonfly
