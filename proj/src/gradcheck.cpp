#include "dragonfly/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dragonfly/random.hpp"

namespace dragonfly {

template <typename Scalar>
GradCheckReport grad_check(const LossFn<Scalar>& loss, ParameterStore<Scalar>& params, GradCheckOptions options) {
  GradientMap<Scalar> analytic;
  {
    Tape<Scalar> tape;
    analytic = tape.backward(loss(tape, params));
  }
  auto evaluate = [&]() {
    Tape<Scalar> tape(false);
    return static_cast<double>(loss(tape, params).value()[0]);
  };

  Rng rng(options.seed);
  GradCheckReport report;
  for (const auto& name : params.names()) {
    auto it = analytic.find(name);
    if (it == analytic.end()) continue;  // not used by this loss
    Tensor<Scalar>& p = params.get(name);

    std::vector<Index> idx(static_cast<std::size_t>(p.size()));
    std::iota(idx.begin(), idx.end(), Index{0});
    if (options.max_entries > 0 && options.max_entries < p.size()) {
      rng.shuffle(idx);
      idx.resize(static_cast<std::size_t>(options.max_entries));
      std::sort(idx.begin(), idx.end());
    }

    GradCheckEntry entry{name, static_cast<Index>(idx.size())};
    for (Index i : idx) {
      const Scalar original = p[i];
      p[i] = original + Scalar(options.eps);
      const double up = evaluate();
      p[i] = original - Scalar(options.eps);
      const double down = evaluate();
      p[i] = original;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = static_cast<double>(it->second[i]);
      entry.max_abs_error = std::max(entry.max_abs_error, std::abs(a - numeric));
      entry.scale = std::max({entry.scale, std::abs(a), std::abs(numeric)});
    }
    entry.rel_error = entry.max_abs_error / std::max(entry.scale, options.abs_floor);
    report.entries.push_back(entry);
  }
  return report;
}

template GradCheckReport grad_check<float>(const LossFn<float>&, ParameterStore<float>&, GradCheckOptions);
template GradCheckReport grad_check<double>(const LossFn<double>&, ParameterStore<double>&, GradCheckOptions);

}  // namespace dragonfly
