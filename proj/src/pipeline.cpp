#include "dragonfly/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <set>

#include "dragonfly/io.hpp"
#include "dragonfly/perf.hpp"
#include "dragonfly/sld.hpp"

namespace dragonfly {

namespace {

using json = nlohmann::json;

constexpr std::size_t kMaxFailureFigures = 20;

std::string net(int index) { return "N" + std::to_string(index); }

std::string lr_label(double lr) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", lr);
  return buf;
}

std::string hash_of(const json& j) { return hex64(fnv1a(j.dump())); }

/// Line of the key path in `text`, found by scanning for each quoted key in turn.
int locate_line(const std::string& text, const std::vector<std::string>& path) {
  std::size_t pos = 0;
  bool found = false;
  for (const auto& part : path) {
    const auto at = text.find("\"" + part + "\"", pos);
    if (at == std::string::npos) break;
    pos = at;
    found = true;
  }
  if (!found) return 0;
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n'));
}

json branch_json(const BranchSpec& b, const ExperimentConfig& c) {
  const auto plan = build_branch(b, static_cast<Index>(experiment_preset(c.experiment).letters.size()),
                                 InputDims{c.dataset.image_size, c.dataset.image_size, 1}, c.train.padding);
  return {{"index", b.index},
          {"conv", to_string(b.conv)},
          {"shape", to_string(b.shape)},
          {"kernel", b.kernel},
          {"block_pool", format_layer(MaxPoolLayer{b.block_pool.window, b.block_pool.stride})},
          {"final_avg", format_layer(AvgPoolLayer{b.final_avg.window, b.final_avg.stride})},
          {"final_max", format_layer(MaxPoolLayer{b.final_max.window, b.final_max.stride})},
          {"notation", plan.notation()}};
}

std::vector<BranchSpec> canonical_branches(double width_scale) {
  std::vector<BranchSpec> out;
  for (int i = 1; i <= kBranchCount; ++i) out.push_back(canonical_branch(i, width_scale));
  return out;
}

}  // namespace

ExperimentConfig default_config(int experiment) {
  ExperimentConfig c;
  c.experiment = experiment;
  c.dataset.experiment = experiment;
  c.branches = canonical_branches(c.train.width_scale);
  return c;
}

EnsembleSpec experiment_spec(const ExperimentConfig& c) {
  auto spec = dragonfly_spec(static_cast<Index>(experiment_preset(c.experiment).letters.size()),
                             InputDims{c.dataset.image_size, c.dataset.image_size, 1}, c.train.width_scale,
                             c.train.padding, c.train.integrator_mode);
  if (!c.branches.empty()) spec.branches = c.branches;
  return spec;
}

json to_json(const ExperimentConfig& c) {
  json dataset = to_json(c.dataset);
  dataset.erase("experiment");
  json branches = json::array();
  for (const auto& b : c.branches) branches.push_back(branch_json(b, c));
  return {{"experiment", c.experiment},
          {"dataset", dataset},
          {"train", to_json(c.train)},
          {"montecarlo", {{"trials", c.trials}, {"learning_rates", c.learning_rates}, {"workers", c.workers}}},
          {"analysis", {{"split", c.split}, {"bins", c.histogram_bins}}},
          {"branches", branches}};
}

std::string ConfigIssue::describe() const {
  std::string out = key.empty() ? "config" : key;
  if (line > 0) out += " (line " + std::to_string(line) + ")";
  return out + ": " + message;
}

ConfigValidation validate_config_text(const std::string& text) {
  ConfigValidation v;
  auto issue = [&](const std::string& key, const std::vector<std::string>& path, const std::string& message) {
    v.issues.push_back({key, locate_line(text, path), message});
  };

  json j;
  try {
    j = json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    const auto upto = std::min<std::size_t>(e.byte, text.size());
    const int line = 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n'));
    v.issues.push_back({"", line, e.what()});
    return v;
  }
  if (!j.is_object()) {
    v.issues.push_back({"", 1, "top level must be a JSON object"});
    return v;
  }
  static const std::set<std::string> known = {"experiment", "dataset", "train", "montecarlo", "analysis", "branches"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) issue(key, {key}, "unknown key");
  }

  ExperimentConfig c;
  try {
    c.experiment = j.value("experiment", 1);
    experiment_preset(c.experiment);
  } catch (const std::exception& e) {
    issue("experiment", {"experiment"}, e.what());
    c.experiment = 1;
  }

  try {
    json d = j.value("dataset", json::object());
    if (d.contains("experiment") && d.at("experiment") != c.experiment) {
      issue("dataset.experiment", {"dataset", "experiment"}, "conflicts with the top-level experiment");
    }
    d["experiment"] = c.experiment;
    c.dataset = synth_config_from_json(d);
  } catch (const std::exception& e) {
    issue("dataset", {"dataset"}, e.what());
  }

  try {
    const json t = j.value("train", json::object());
    TrainConfig parsed;
    bool typed = true;
    try {
      // Parse without validation first so every violated field is reported.
      parsed.learning_rate = t.value("learning_rate", parsed.learning_rate);
      parsed.momentum = t.value("momentum", parsed.momentum);
      parsed.batch_size = t.value("batch_size", parsed.batch_size);
      parsed.epochs = t.value("epochs", parsed.epochs);
      parsed.seed = t.value("seed", parsed.seed);
      parsed.width_scale = t.value("width_scale", parsed.width_scale);
      parsed.head = t.value("head", parsed.head);
    } catch (const json::exception& e) {
      issue("train", {"train"}, e.what());
      typed = false;
    }
    if (typed) {
      for (const auto& err : parsed.errors()) {
        const std::string field = err.substr(0, err.find(' '));
        issue("train." + field, {"train", field}, err);
      }
      if (parsed.learning_rate == 0) issue("train.learning_rate", {"train", "learning_rate"}, "learning_rate must be > 0");
      if (parsed.errors().empty()) {
        try {
          c.train = train_config_from_json(t);
        } catch (const std::exception& e) {
          issue("train", {"train"}, e.what());
        }
      }
    }
  } catch (const std::exception& e) {
    issue("train", {"train"}, e.what());
  }

  try {
    const json m = j.value("montecarlo", json::object());
    c.trials = m.value("trials", c.trials);
    c.learning_rates = m.value("learning_rates", c.learning_rates);
    c.workers = m.value("workers", c.workers);
    if (c.trials < 1) issue("montecarlo.trials", {"montecarlo", "trials"}, "trials must be >= 1");
    if (c.workers < 1) issue("montecarlo.workers", {"montecarlo", "workers"}, "workers must be >= 1");
    if (c.learning_rates.empty()) issue("montecarlo.learning_rates", {"montecarlo", "learning_rates"}, "empty set");
    for (double lr : c.learning_rates) {
      if (!(lr > 0)) issue("montecarlo.learning_rates", {"montecarlo", "learning_rates"}, "rates must be > 0");
    }
  } catch (const json::exception& e) {
    issue("montecarlo", {"montecarlo"}, e.what());
  }

  try {
    const json a = j.value("analysis", json::object());
    c.split = a.value("split", c.split);
    c.histogram_bins = a.value("bins", c.histogram_bins);
    const auto& names = split_names();
    if (std::find(names.begin(), names.end(), c.split) == names.end()) {
      issue("analysis.split", {"analysis", "split"}, "split must be train, val or test");
    }
    if (c.histogram_bins < 2) issue("analysis.bins", {"analysis", "bins"}, "bins must be >= 2");
  } catch (const json::exception& e) {
    issue("analysis", {"analysis"}, e.what());
  }

  c.branches = canonical_branches(c.train.width_scale);
  if (j.contains("branches")) {
    const auto& list = j.at("branches");
    if (!list.is_array()) {
      issue("branches", {"branches"}, "must be a list of branch overrides");
    } else {
      static const std::set<std::string> branch_keys = {"index",     "conv",      "shape",    "kernel",
                                                        "block_pool", "final_avg", "final_max", "notation"};
      std::set<int> seen;
      for (std::size_t i = 0; i < list.size(); ++i) {
        const std::string at = "branches[" + std::to_string(i) + "]";
        const auto& entry = list[i];
        if (!entry.is_object() || !entry.contains("index") || !entry.at("index").is_number_integer()) {
          issue(at, {"branches"}, "each override needs an integer index 1..12");
          continue;
        }
        const int index = entry.at("index").get<int>();
        if (index < 1 || index > kBranchCount || !seen.insert(index).second) {
          issue(at + ".index", {"branches", "index"}, "index must be a distinct value in 1..12");
          continue;
        }
        auto& target = c.branches[static_cast<std::size_t>(index - 1)];
        for (const auto& [key, value] : entry.items()) {
          if (!branch_keys.count(key)) {
            issue(at + "." + key, {"branches", key}, "unknown key");
            continue;
          }
          if (key == "index" || key == "notation") continue;  // notation is derived and echoed only
          try {
            target = branch_from_json(json{{key, value}}, target);
          } catch (const std::exception& e) {
            issue(at + "." + key, {"branches", key}, e.what());
          }
        }
      }
    }
  }

  if (v.issues.empty()) {
    try {
      Ensemble<double> probe(experiment_spec(c));
    } catch (const std::exception& e) {
      issue("branches", {"branches"}, std::string("architecture does not fit the input: ") + e.what());
    }
  }
  if (v.issues.empty()) v.config = c;
  return v;
}

ConfigValidation validate_config(const fs::path& path) {
  try {
    return validate_config_text(read_text(path));
  } catch (const IoError& e) {
    ConfigValidation v;
    v.issues.push_back({"", 0, e.what()});
    return v;
  }
}

std::string config_template(int experiment) {
  const auto c = default_config(experiment);
  const auto& d = c.dataset;
  const auto& t = c.train;
  std::string lrs;
  for (double lr : c.learning_rates) lrs += (lrs.empty() ? "" : ", ") + lr_label(lr);
  char buf[4096];
  std::snprintf(buf, sizeof buf,
                R"({
  // 1: binary IO, 2: binary BDOQ, 3: texture-encrypted IO
  "experiment": %d,

  "dataset": {
    "seed": %llu,
    "image_size": %lld,
    // samples per class in each split
    "counts": {"train": %lld, "val": %lld, "test": %lld},
    "jitter": {"max_rotation_deg": %g, "scale_min": %g, "scale_max": %g, "max_translation": %g},
    // orientation texture used by experiment 3
    "texture": {"foreground_angle_deg": %g, "background_angle_deg": %g, "angle_spread_deg": %g,
                "freq_lo": %g, "freq_hi": %g, "components": %d},
    "previews_per_class": %lld
  },

  "train": {
    "learning_rate": %g,
    "momentum": %g,
    "batch_size": %lld,
    "epochs": %d,
    "seed": %llu,
    // multiplies every frustum channel count
    "width_scale": %g,
    // softlog, or plain-log for stress experiments only
    "loss": "%s",
    // add equal-weight losses on N13..N16
    "auxiliary_loss": %s,
    "padding": "%s",
    // dense: K x (B K) integrator matrices; scalar: one weight per branch
    "integrator_mode": "%s",
    // head whose test accuracy feeds the performance tensor
    "head": %d
  },

  "montecarlo": {"trials": %d, "learning_rates": [%s], "workers": %d},

  "analysis": {"split": "%s", "bins": %d},

  // per-branch overrides, e.g. {"index": 1, "final_max": "G11[v5]", "conv": "DSC"}
  "branches": []
}
)",
                c.experiment, static_cast<unsigned long long>(d.seed), static_cast<long long>(d.image_size),
                static_cast<long long>(d.counts.train), static_cast<long long>(d.counts.val),
                static_cast<long long>(d.counts.test), d.jitter.max_rotation_deg, d.jitter.scale_min, d.jitter.scale_max,
                d.jitter.max_translation, d.texture.foreground_angle_deg, d.texture.background_angle_deg,
                d.texture.angle_spread_deg, d.texture.freq_lo, d.texture.freq_hi, d.texture.components,
                static_cast<long long>(d.previews_per_class), t.learning_rate, t.momentum,
                static_cast<long long>(t.batch_size), t.epochs, static_cast<unsigned long long>(t.seed), t.width_scale,
                to_string(t.loss).c_str(), t.auxiliary_loss ? "true" : "false", to_string(t.padding).c_str(),
                to_string(t.integrator_mode).c_str(), t.head, c.trials, lrs.c_str(), c.workers, c.split.c_str(),
                c.histogram_bins);
  return buf;
}

// ---- stage helpers ---------------------------------------------------------------

nlohmann::json train_to_directory(const Dataset& data, const TrainConfig& config, const std::vector<BranchSpec>& branches,
                                  const fs::path& dir) {
  Ensemble<double> model(ensemble_for(data, config, branches));
  auto outcome = train(model, data, config);
  if (!outcome.result.error.empty()) throw std::runtime_error(outcome.result.error);
  if (outcome.result.diverged) {
    throw NonFiniteError(outcome.result.divergence_op,
                         "training diverged at step " + std::to_string(outcome.result.diverged_step.value_or(-1)) +
                             " (op " + outcome.result.divergence_op + ")");
  }
  const json result = to_json(outcome.result);
  Checkpoint ck{model.spec(), config, data.classes, std::move(outcome.params),
                {{"dataset", to_json(data.config)}, {"result", result}}};
  save_checkpoint(dir / "checkpoint", ck);
  write_json(dir / "result.json", result);
  return result;
}

Dataset dataset_for_checkpoint(const Checkpoint& ck, const std::optional<fs::path>& data_dir) {
  Dataset data;
  if (data_dir) {
    data = load_dataset(*data_dir);
  } else {
    if (!ck.extra.contains("dataset")) throw IoError("checkpoint records no dataset; pass the dataset directory");
    data = generate_dataset(synth_config_from_json(ck.extra.at("dataset")));
  }
  if (data.classes != ck.classes) throw ShapeError("dataset classes do not match the checkpoint");
  return data;
}

nlohmann::json write_evaluation(const fs::path& out, const Checkpoint& ck, const Dataset& data,
                                const std::vector<std::string>& splits) {
  Ensemble<double> model(ck.spec);
  json doc = {{"classes", ck.classes}, {"splits", json::object()}};
  for (const auto& name : splits) {
    doc["splits"][name] = to_json(evaluate(model, ck.params, data.split(name), ck.spec.classes));
  }
  write_json(out / "evaluation.json", doc);
  return doc;
}

nlohmann::json write_perf(const fs::path& out, const nlohmann::json& mc, const std::string& experiment) {
  std::array<std::vector<double>, kNetworkCount> pooled;
  std::map<double, std::array<std::vector<double>, kNetworkCount>> per_lr;
  for (const auto& t : mc.at("trials")) {
    if (!t.value("error", std::string()).empty() || t.value("diverged", false)) continue;
    if (!t.at("accuracy").contains("test")) continue;
    const auto acc = t.at("accuracy").at("test").get<std::vector<double>>();
    const double lr = t.at("learning_rate").get<double>();
    for (std::size_t h = 0; h < acc.size() && h < pooled.size(); ++h) {
      pooled[h].push_back(acc[h]);
      per_lr[lr][h].push_back(acc[h]);
    }
  }
  std::string csv = perf_csv_header() + "\n", csv_lr = perf_csv_header() + "\n";
  json doc = {{"experiment", experiment}, {"pooled", json::object()}, {"per_lr", json::object()}};
  auto entry = [](const PerfTensor& p, double a, std::size_t n) {
    return json{{"n_trials", n}, {"min", p.min}, {"mean", p.mean}, {"median", p.median}, {"max", p.max},
                {"ability", a}, {"tensor", format_perf(p)}};
  };
  for (std::size_t h = 0; h < pooled.size(); ++h) {
    if (pooled[h].empty()) continue;
    const auto p = perf_tensor(pooled[h]);
    const double a = ability(p);
    csv += perf_csv_row(experiment, net(static_cast<int>(h + 1)), pooled[h].size(), p, a) + "\n";
    doc["pooled"][net(static_cast<int>(h + 1))] = entry(p, a, pooled[h].size());
  }
  for (const auto& [lr, heads] : per_lr) {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      if (heads[h].empty()) continue;
      const auto p = perf_tensor(heads[h]);
      const double a = ability(p);
      const std::string label = experiment + "@lr=" + lr_label(lr);
      csv_lr += perf_csv_row(label, net(static_cast<int>(h + 1)), heads[h].size(), p, a) + "\n";
      doc["per_lr"][lr_label(lr)][net(static_cast<int>(h + 1))] = entry(p, a, heads[h].size());
    }
  }
  write_text(out / "perf.csv", csv);
  write_text(out / "perf_by_lr.csv", csv_lr);
  write_json(out / "perf.json", doc);
  return doc;
}

nlohmann::json write_sld(const fs::path& out, const Checkpoint& ck, const Dataset& data, const std::string& split,
                         int bins) {
  Ensemble<double> model(ck.spec);
  const auto& s = data.split(split);
  const auto outputs = predict_split(model, ck.params, s.images);
  const auto report = branch_sld_report(outputs, s.labels, split);
  write_text(out / "report.csv", sld_report_csv(report));
  auto doc = to_json(report);
  write_json(out / "report.json", doc);

  json figures = json::array();
  std::vector<double> all;
  for (const auto& row : report.rows) {
    const auto rel = "histograms/" + net(row.head) + "_vs_N17.svg";
    write_text(out / rel, histogram_svg(sld_histogram(row.samples, bins), "SLD " + net(row.head) + " vs N17, " + split));
    figures.push_back(rel);
    all.insert(all.end(), row.samples.begin(), row.samples.end());
  }
  write_text(out / "histograms/all_vs_N17.svg", histogram_svg(sld_histogram(all, bins), "SLD N1..N16 vs N17, " + split));
  figures.push_back("histograms/all_vs_N17.svg");

  const auto failures = failure_report(outputs, s.labels);
  write_json(out / "failures.json", to_json(failures, ck.classes));
  for (std::size_t i = 0; i < failures.size() && i < kMaxFailureFigures; ++i) {
    const auto rel = "failures/example_" + std::to_string(failures[i].example) + ".svg";
    write_text(out / rel, failure_svg(failures[i], ck.classes));
    figures.push_back(rel);
  }
  doc["failures"] = failures.size();
  doc["figures"] = figures;
  return doc;
}

// ---- orchestration -----------------------------------------------------------------

nlohmann::json PipelineResult::to_json() const {
  json stages_json = json::array();
  for (const auto& s : stages) {
    stages_json.push_back({{"name", s.name}, {"hash", s.hash}, {"skipped", s.skipped}, {"seconds", s.seconds}});
  }
  json j = {{"exit_code", exit_code}, {"stages", stages_json}};
  if (!failed_stage.empty()) {
    j["failed_stage"] = failed_stage;
    j["message"] = message;
  }
  if (!index.is_null()) j["index"] = index;
  return j;
}

namespace {

/// Hash of every file under `dir`, in path order; changes when any byte changes.
std::string tree_hash(const fs::path& dir) {
  if (!fs::exists(dir)) return "missing";
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& f : files) {
    h = fnv1a(fs::relative(f, dir).generic_string(), h);
    h = fnv1a(file_hash(f), h);
  }
  return hex64(h);
}

class StageRunner {
 public:
  StageRunner(fs::path out, const ProgressFn& progress) : out_(std::move(out)), progress_(progress) {
    if (fs::exists(out_ / "stages.json")) {
      try {
        records_ = read_json(out_ / "stages.json");
      } catch (const IoError&) {
        records_ = json::object();
      }
    }
    if (!records_.is_object()) records_ = json::object();
  }

  /// Runs `body` unless the recorded hash matches and its outputs still exist.
  void run(const std::string& name, const std::string& hash, const std::vector<std::string>& outputs,
           const std::function<void()>& body, PipelineResult& result) {
    StageStatus status{name, hash, false, 0};
    bool fresh = records_.contains(name) && records_[name].value("hash", "") == hash;
    for (const auto& o : outputs) fresh = fresh && fs::exists(out_ / o);
    if (fresh) {
      status.skipped = true;
      note(name + ": up to date (" + hash + ")");
      result.stages.push_back(status);
      return;
    }
    note(name + ": running");
    const auto t0 = std::chrono::steady_clock::now();
    records_.erase(name);
    body();
    status.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    records_[name] = {{"hash", hash}, {"outputs", outputs}, {"seconds", status.seconds}};
    write_json(out_ / "stages.json", records_);
    result.stages.push_back(status);
  }

  void note(const std::string& msg) const {
    if (progress_) progress_(msg);
  }

 private:
  fs::path out_;
  const ProgressFn& progress_;
  json records_ = json::object();
};

struct StageFailure : std::runtime_error {
  StageFailure(std::string stage, const std::string& what) : std::runtime_error(what), stage(std::move(stage)) {}
  std::string stage;
};

template <typename F>
auto in_stage(const std::string& stage, F&& f) {
  try {
    return f();
  } catch (const StageFailure&) {
    throw;
  } catch (const std::exception& e) {
    throw StageFailure(stage, e.what());
  }
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& config, const fs::path& out, const ProgressFn& progress) {
  PipelineResult result;
  const json normalized = to_json(config);
  const std::string experiment = std::to_string(config.experiment);
  try {
    in_stage("setup", [&] {
      ensure_directory(out);
      write_json(out / "config.json", normalized);
    });
    StageRunner runner(out, progress);

    const std::string synth_hash = hash_of(to_json(config.dataset));
    runner.run("synth", synth_hash, {"dataset/manifest.json"},
               [&] { in_stage("synth", [&] { synth_dataset(config.dataset, out / "dataset"); }); }, result);
    const Dataset data = in_stage("synth", [&] { return load_dataset(out / "dataset"); });

    json branches = json::array();
    for (const auto& b : config.branches) branches.push_back(branch_json(b, config));
    const std::string train_hash = hash_of(json::array({synth_hash, to_json(config.train), branches}));
    runner.run("train", train_hash, {"train/checkpoint/index.json", "train/result.json"},
               [&] { in_stage("train", [&] { train_to_directory(data, config.train, config.branches, out / "train"); }); },
               result);

    const std::string mc_hash =
        hash_of(json::array({synth_hash, to_json(config.train), branches, config.trials, config.learning_rates}));
    runner.run("montecarlo", mc_hash, {"montecarlo/trials.json"},
               [&] {
                 in_stage("montecarlo", [&] {
                   MonteCarloConfig mc;
                   mc.base = config.train;
                   mc.trials = config.trials;
                   mc.learning_rates = config.learning_rates;
                   mc.workers = config.workers;
                   mc.branches = config.branches;
                   const auto r = monte_carlo(data, mc, [&](const TrialResult& t, const TrainOutcome*) {
                     char line[160];
                     std::snprintf(line, sizeof line, "  trial seed %llu lr %g: N17 test %.2f%% (%.1fs)%s",
                                   static_cast<unsigned long long>(t.seed), t.learning_rate,
                                   t.accuracy.count("test") ? t.accuracy.at("test")[16] : -1.0, t.wall_seconds,
                                   t.ok() ? "" : " FAILED");
                     runner.note(line);
                   });
                   write_json(out / "montecarlo" / "trials.json", to_json(r));
                 });
               },
               result);

    runner.run("perf", hash_of(json::array({mc_hash, experiment})), {"perf/perf.csv", "perf/perf_by_lr.csv", "perf/perf.json"},
               [&] {
                 in_stage("perf", [&] { write_perf(out / "perf", read_json(out / "montecarlo" / "trials.json"), experiment); });
               },
               result);

    const std::string eval_hash = hash_of(json::array({synth_hash, in_stage("evaluate", [&] { return tree_hash(out / "train" / "checkpoint"); })}));
    std::optional<Checkpoint> checkpoint;
    auto load = [&]() -> const Checkpoint& {
      if (!checkpoint) checkpoint = load_checkpoint(out / "train" / "checkpoint");
      return *checkpoint;
    };
    runner.run("evaluate", eval_hash, {"eval/evaluation.json"},
               [&] { in_stage("evaluate", [&] { write_evaluation(out / "eval", load(), data, split_names()); }); },
               result);

    runner.run("sld", hash_of(json::array({eval_hash, config.split, config.histogram_bins})),
               {"sld/report.csv", "sld/report.json", "sld/failures.json"},
               [&] {
                 in_stage("sld", [&] {
                   fs::remove_all(out / "sld");
                   write_sld(out / "sld", load(), data, config.split, config.histogram_bins);
                 });
               },
               result);

    in_stage("index", [&] {
      auto listing = [&](const fs::path& dir, const std::string& ext) {
        std::vector<std::string> files;
        if (fs::exists(out / dir)) {
          for (const auto& e : fs::recursive_directory_iterator(out / dir)) {
            if (e.is_regular_file() && e.path().extension() == ext) files.push_back(fs::relative(e.path(), out).generic_string());
          }
        }
        std::sort(files.begin(), files.end());
        return files;
      };
      json stages = json::array();
      for (const auto& s : result.stages) stages.push_back({{"name", s.name}, {"hash", s.hash}, {"skipped", s.skipped}});
      result.index = {
          {"experiment", config.experiment},
          {"config", "config.json"},
          {"config_hash", hash_of(normalized)},
          {"groups",
           {{"dataset", {"dataset/manifest.json"}},
            {"checkpoints", {"train/checkpoint/index.json", "train/result.json"}},
            {"perf", {"perf/perf.csv", "perf/perf_by_lr.csv", "perf/perf.json", "montecarlo/trials.json"}},
            {"sld", {"sld/report.csv", "sld/report.json", "sld/failures.json", "eval/evaluation.json"}},
            {"figures", listing("sld", ".svg")}}},
          {"stages", stages}};
      write_json(out / "index.json", result.index);
    });
  } catch (const StageFailure& e) {
    result.exit_code = kExitStage;
    result.failed_stage = e.stage;
    result.message = e.what();
  }
  return result;
}

}  // namespace dragonfly
