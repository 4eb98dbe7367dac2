#pragma once

// Community analysis of a trained ensemble: per-head agreement with N17 measured by the
// softlog divergence, histograms of it and the N17 failure cases.

#include <array>
#include <string>
#include <vector>

#include "json.hpp"

#include "dragonfly/models.hpp"

namespace dragonfly {

using HeadTensors = std::array<Tensor<double>, kNetworkCount>;

struct SldRow {
  int head = 1;         ///< 1..16
  double accuracy = 0;  ///< %
  double mean_sld = 0;  ///< average of `samples`
  std::vector<double> samples;
};

struct SldReport {
  std::string split;
  Index count = 0;
  double reference_accuracy = 0;  ///< N17
  std::vector<SldRow> rows;       ///< N1..N16
};

/// Per-example SLD of every head against N17. Values further than 1e-9 outside [0, 1]
/// raise DomainError; in-tolerance values are clamped. An empty split is an error.
SldReport branch_sld_report(const HeadTensors& outputs, const Tensor<std::int32_t>& labels, const std::string& split);

/// Two rows (accuracy, sld) over the columns N1..N16.
std::string sld_report_csv(const SldReport& report);
nlohmann::json to_json(const SldReport& report);

struct Histogram {
  std::vector<Index> counts;  ///< uniform bins on [0, 1]; the last bin is closed on the right
  Index total() const;
};

/// DomainError for samples outside [0, 1]; std::invalid_argument for bins < 2.
Histogram sld_histogram(const std::vector<double>& samples, int bins = 20);

/// Dependency-free SVG bar chart; identical input gives identical bytes.
std::string histogram_svg(const Histogram& histogram, const std::string& title);

struct FailureCase {
  Index example = 0;
  int label = 0;
  int prediction = 0;  ///< N17 argmax
  std::array<std::vector<double>, kNetworkCount> probs;
  std::vector<int> discordant;  ///< heads 1..16 whose argmax differs from N17's
};

/// Every example N17 misclassifies, in example order.
std::vector<FailureCase> failure_report(const HeadTensors& outputs, const Tensor<std::int32_t>& labels);

nlohmann::json to_json(const std::vector<FailureCase>& failures, const std::vector<std::string>& classes);

/// One panel of per-head distributions with discordant heads highlighted.
std::string failure_svg(const FailureCase& failure, const std::vector<std::string>& classes);

}  // namespace dragonfly
