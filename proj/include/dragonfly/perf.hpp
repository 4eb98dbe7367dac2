#pragma once

// Performance tensor [Min, (Mean, Median), Max] of a Monte-Carlo accuracy set and the
// Ability score that weighs it.

#include <string>
#include <vector>

namespace dragonfly {

struct PerfTensor {
  double min = 0;
  double mean = 0;
  double median = 0;
  double max = 0;
};

struct AbilityWeights {
  double alpha = 0.5;   ///< on Max
  double beta = 0.25;   ///< on (Mean + Median) / 2
  double gamma = 0.25;  ///< on Min

  /// Non-negative and summing to 1 within 1e-12.
  void validate() const;
};

/// Exact order statistics of Z (percentages in [0, 100]); even-length median is the midpoint.
PerfTensor perf_tensor(const std::vector<double>& z);

double ability(const PerfTensor& t, const AbilityWeights& w = {});

/// "[min,(mean,median),max]" with one decimal, the table layout.
std::string format_perf(const PerfTensor& t);

/// experiment,head,n_trials,min,mean,median,max,ability
std::string perf_csv_header();
std::string perf_csv_row(const std::string& experiment, const std::string& head, std::size_t n_trials,
                         const PerfTensor& t, double ability_value);

}  // namespace dragonfly
