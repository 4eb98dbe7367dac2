#include "dragonfly/sld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "dragonfly/softlog.hpp"
#include "dragonfly/train.hpp"

namespace dragonfly {

namespace {

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void check_outputs(const HeadTensors& outputs, Index count) {
  for (std::size_t h = 0; h < outputs.size(); ++h) {
    if (outputs[h].rank() != 2 || outputs[h].dim(0) != count || outputs[h].dim(1) != outputs[16].dim(1)) {
      throw ShapeError("head N" + std::to_string(h + 1) + " outputs " + shape_string(outputs[h].shape()) + " for " +
                       std::to_string(count) + " examples");
    }
  }
}

}  // namespace

SldReport branch_sld_report(const HeadTensors& outputs, const Tensor<std::int32_t>& labels, const std::string& split) {
  const Index n = labels.empty() ? 0 : labels.size();
  if (n == 0) throw std::invalid_argument("sld report: split '" + split + "' is empty");
  check_outputs(outputs, n);
  const Index classes = outputs[16].dim(1);
  const auto eval = evaluate_outputs(outputs, labels, classes);

  SldReport report;
  report.split = split;
  report.count = n;
  report.reference_accuracy = eval.heads[16].accuracy;
  const auto ref = outputs[16].matrix();
  for (int h = 1; h <= 16; ++h) {
    SldRow row;
    row.head = h;
    row.accuracy = eval.heads[static_cast<std::size_t>(h - 1)].accuracy;
    const auto head = outputs[static_cast<std::size_t>(h - 1)].matrix();
    row.samples.reserve(static_cast<std::size_t>(n));
    double total = 0;
    for (Index i = 0; i < n; ++i) {
      double d = sld(head.row(i).transpose(), ref.row(i).transpose());
      if (!(d >= -kUnitTolerance && d <= 1 + kUnitTolerance)) {
        throw DomainError("SLD of N" + std::to_string(h) + " vs N17 on example " + std::to_string(i) + " is " +
                          fmt("%.17g", d) + ", outside [0, 1]");
      }
      d = std::clamp(d, 0.0, 1.0);
      row.samples.push_back(d);
      total += d;
    }
    row.mean_sld = total / double(n);
    report.rows.push_back(std::move(row));
  }
  return report;
}

std::string sld_report_csv(const SldReport& report) {
  std::string header = "metric", acc = "accuracy", div = "sld";
  for (const auto& row : report.rows) {
    header += ",N" + std::to_string(row.head);
    acc += fmt(",%.4f", row.accuracy);
    div += fmt(",%.6f", row.mean_sld);
  }
  return header + "\n" + acc + "\n" + div + "\n";
}

nlohmann::json to_json(const SldReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"head", "N" + std::to_string(r.head)}, {"accuracy", r.accuracy}, {"mean_sld", r.mean_sld}});
  }
  return {{"split", report.split},
          {"count", report.count},
          {"N17_accuracy", report.reference_accuracy},
          {"rows", rows}};
}

Index Histogram::total() const {
  Index n = 0;
  for (Index c : counts) n += c;
  return n;
}

Histogram sld_histogram(const std::vector<double>& samples, int bins) {
  if (bins < 2) throw std::invalid_argument("sld_histogram: bins must be >= 2, got " + std::to_string(bins));
  Histogram h;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (double s : samples) {
    if (!(s >= 0.0 && s <= 1.0)) throw DomainError("sld_histogram: sample " + fmt("%.17g", s) + " outside [0, 1]");
    const auto bin = std::min(static_cast<Index>(s * bins), static_cast<Index>(bins - 1));
    ++h.counts[static_cast<std::size_t>(bin)];
  }
  return h;
}

std::string histogram_svg(const Histogram& histogram, const std::string& title) {
  constexpr double kW = 480, kH = 300, kLeft = 50, kRight = 20, kTop = 40, kBottom = 40;
  const double plot_w = kW - kLeft - kRight, plot_h = kH - kTop - kBottom;
  const Index peak = std::max<Index>(1, *std::max_element(histogram.counts.begin(), histogram.counts.end()));
  const double bar_w = plot_w / double(histogram.counts.size());
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" viewBox=\"0 0 " << kW
      << " " << kH << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">"
      << xml_escape(title) << "</text>\n";
  for (std::size_t b = 0; b < histogram.counts.size(); ++b) {
    const double h = plot_h * double(histogram.counts[b]) / double(peak);
    svg << "<rect x=\"" << fmt("%.2f", kLeft + bar_w * double(b)) << "\" y=\"" << fmt("%.2f", kTop + plot_h - h)
        << "\" width=\"" << fmt("%.2f", bar_w - 1) << "\" height=\"" << fmt("%.2f", h)
        << "\" fill=\"#4a7ab5\"><title>" << histogram.counts[b] << "</title></rect>\n";
  }
  const double base = kTop + plot_h;
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << base << "\" x2=\"" << kLeft + plot_w << "\" y2=\"" << base
      << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << base
      << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double x = kLeft + plot_w * t / 4;
    svg << "<text x=\"" << fmt("%.2f", x) << "\" y=\"" << base + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt("%.2f", t / 4.0)
        << "</text>\n";
  }
  svg << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + 4
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << peak << "</text>\n";
  svg << "<text x=\"" << kLeft - 6 << "\" y=\"" << base
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">0</text>\n";
  svg << "<text x=\"" << kLeft + plot_w / 2 << "\" y=\"" << kH - 6
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">SLD</text>\n";
  svg << "</svg>\n";
  return svg.str();
}

std::vector<FailureCase> failure_report(const HeadTensors& outputs, const Tensor<std::int32_t>& labels) {
  const Index n = labels.empty() ? 0 : labels.size();
  std::vector<FailureCase> out;
  if (n == 0) return out;
  check_outputs(outputs, n);
  std::array<std::vector<Index>, kNetworkCount> pred;
  for (std::size_t h = 0; h < pred.size(); ++h) pred[h] = argmax_rows(outputs[h]);
  for (Index i = 0; i < n; ++i) {
    const auto top = pred[16][static_cast<std::size_t>(i)];
    if (top == labels[i]) continue;
    FailureCase f;
    f.example = i;
    f.label = labels[i];
    f.prediction = static_cast<int>(top);
    for (std::size_t h = 0; h < pred.size(); ++h) {
      const auto row = outputs[h].matrix().row(i);
      f.probs[h].assign(row.data(), row.data() + row.size());
      if (h < 16 && pred[h][static_cast<std::size_t>(i)] != top) f.discordant.push_back(static_cast<int>(h + 1));
    }
    out.push_back(std::move(f));
  }
  return out;
}

nlohmann::json to_json(const std::vector<FailureCase>& failures, const std::vector<std::string>& classes) {
  auto name = [&](int k) {
    return k >= 0 && k < static_cast<int>(classes.size()) ? classes[static_cast<std::size_t>(k)] : std::to_string(k);
  };
  nlohmann::json out = nlohmann::json::array();
  for (const auto& f : failures) {
    nlohmann::json heads = nlohmann::json::object();
    for (std::size_t h = 0; h < f.probs.size(); ++h) heads["N" + std::to_string(h + 1)] = f.probs[h];
    nlohmann::json flagged = nlohmann::json::array();
    for (int h : f.discordant) flagged.push_back("N" + std::to_string(h));
    out.push_back({{"example", f.example},
                   {"label", name(f.label)},
                   {"prediction", name(f.prediction)},
                   {"discordant", flagged},
                   {"heads", heads}});
  }
  return out;
}

std::string failure_svg(const FailureCase& f, const std::vector<std::string>& classes) {
  const std::size_t K = f.probs[16].size();
  constexpr double kRowH = 18, kLabelW = 60, kBarW = 220, kTop = 50;
  const double width = kLabelW + kBarW + 20;
  const double height = kTop + kRowH * kNetworkCount + 20;
  static const char* palette[] = {"#4a7ab5", "#d9822b", "#5aa469", "#b54a6f", "#7f6bb5", "#8c8c3a"};
  auto class_name = [&](std::size_t k) { return k < classes.size() ? classes[k] : std::to_string(k); };
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\" viewBox=\"0 0 "
      << width << " " << height << "\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg << "<text x=\"8\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">example " << f.example << ": true "
      << xml_escape(class_name(static_cast<std::size_t>(f.label))) << ", N17 says "
      << xml_escape(class_name(static_cast<std::size_t>(f.prediction))) << "</text>\n";
  for (std::size_t k = 0; k < K; ++k) {
    svg << "<rect x=\"" << 8 + 70 * k << "\" y=\"28\" width=\"10\" height=\"10\" fill=\"" << palette[k % 6] << "\"/>"
        << "<text x=\"" << 22 + 70 * k << "\" y=\"37\" font-family=\"sans-serif\" font-size=\"11\">"
        << xml_escape(class_name(k)) << "</text>\n";
  }
  for (std::size_t h = 0; h < f.probs.size(); ++h) {
    const double y = kTop + kRowH * double(h);
    const bool flagged = std::find(f.discordant.begin(), f.discordant.end(), static_cast<int>(h + 1)) != f.discordant.end();
    svg << "<text x=\"8\" y=\"" << fmt("%.2f", y + 12) << "\" font-family=\"sans-serif\" font-size=\"11\""
        << (flagged ? " font-weight=\"bold\" fill=\"#c0392b\"" : "") << ">N" << h + 1 << "</text>\n";
    double x = kLabelW;
    for (std::size_t k = 0; k < K; ++k) {
      const double w = kBarW * f.probs[h][k];
      svg << "<rect x=\"" << fmt("%.2f", x) << "\" y=\"" << fmt("%.2f", y + 2) << "\" width=\"" << fmt("%.2f", w)
          << "\" height=\"" << kRowH - 4 << "\" fill=\"" << palette[k % 6] << "\"/>\n";
      x += w;
    }
    if (flagged) {
      svg << "<rect x=\"" << kLabelW - 1 << "\" y=\"" << fmt("%.2f", y + 1) << "\" width=\"" << kBarW + 2
          << "\" height=\"" << kRowH - 2 << "\" fill=\"none\" stroke=\"#c0392b\"/>\n";
    }
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace dragonfly
