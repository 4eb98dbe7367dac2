#include "dragonfly/perf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace dragonfly {

void AbilityWeights::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) throw std::invalid_argument("ability weights must be non-negative");
  if (std::abs(alpha + beta + gamma - 1.0) > 1e-12) {
    throw std::invalid_argument("ability weights must sum to 1, got " + std::to_string(alpha + beta + gamma));
  }
}

PerfTensor perf_tensor(const std::vector<double>& z) {
  if (z.empty()) throw std::invalid_argument("perf_tensor: empty accuracy set");
  for (double v : z) {
    if (!(v >= 0.0 && v <= 100.0)) throw std::invalid_argument("perf_tensor: accuracy " + std::to_string(v) + " outside [0, 100]");
  }
  std::vector<double> s = z;
  std::sort(s.begin(), s.end());
  const std::size_t n = s.size();
  PerfTensor t;
  t.min = s.front();
  t.max = s.back();
  t.median = n % 2 ? s[n / 2] : (s[n / 2 - 1] + s[n / 2]) / 2;
  // Summing the sorted values keeps the mean independent of trial order.
  t.mean = std::accumulate(s.begin(), s.end(), 0.0) / double(n);
  t.mean = std::clamp(t.mean, t.min, t.max);
  return t;
}

double ability(const PerfTensor& t, const AbilityWeights& w) {
  w.validate();
  return w.alpha * t.max + w.beta * (t.mean + t.median) / 2 + w.gamma * t.min;
}

std::string format_perf(const PerfTensor& t) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "[%.1f,(%.1f,%.1f),%.1f]", t.min, t.mean, t.median, t.max);
  return buf;
}

std::string perf_csv_header() { return "experiment,head,n_trials,min,mean,median,max,ability"; }

std::string perf_csv_row(const std::string& experiment, const std::string& head, std::size_t n_trials,
                         const PerfTensor& t, double ability_value) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.4f,%.4f,%.4f,%.4f,%.4f", experiment.c_str(), head.c_str(), n_trials, t.min,
                t.mean, t.median, t.max, ability_value);
  return buf;
}

}  // namespace dragonfly
