// Command-line entry point: dataset synthesis, training, Monte-Carlo trials, metrics and
// SLD analysis, individually or as one hash-cached pipeline.

#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dragonfly/gradcheck.hpp"
#include "dragonfly/io.hpp"
#include "dragonfly/perf.hpp"
#include "dragonfly/pipeline.hpp"

using namespace dragonfly;
using json = nlohmann::json;

namespace {

struct Options {
  std::string format = "text";
  std::string config;
  std::string out;
  std::optional<int> experiment;
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> scale;
  std::optional<int> trials;
  std::optional<int> workers;
  std::vector<double> lrs;
  std::string data;
  std::string checkpoint;
  std::string split = "test";
  std::optional<int> bins;
  std::string input;
  std::vector<double> z;
  std::optional<Index> train_per_class;
  double gc_scale = 0.125;
  Index gc_size = 16;
  Index gc_entries = 64;
  double gc_threshold = 1e-3;
};

bool json_output(const Options& o) { return o.format == "json"; }

/// Reports a stage failure and returns its exit code.
int stage_failure(const Options& o, const std::string& stage, const std::string& message) {
  if (json_output(o)) {
    std::cout << json{{"status", "error"}, {"stage", stage}, {"message", message}}.dump(2) << "\n";
  } else {
    std::cerr << "stage '" << stage << "' failed: " << message << "\n";
  }
  return kExitStage;
}

int config_failure(const Options& o, const std::vector<ConfigIssue>& issues) {
  if (json_output(o)) {
    json list = json::array();
    for (const auto& i : issues) list.push_back({{"key", i.key}, {"line", i.line}, {"message", i.message}});
    std::cout << json{{"status", "invalid"}, {"issues", list}}.dump(2) << "\n";
  } else {
    for (const auto& i : issues) std::cerr << "config error: " << i.describe() << "\n";
  }
  return kExitConfig;
}

/// Config from --config (or the preset defaults) with command-line overrides applied.
std::optional<ExperimentConfig> resolve_config(const Options& o, std::vector<ConfigIssue>& issues) {
  ExperimentConfig c = default_config(o.experiment.value_or(1));
  if (!o.config.empty()) {
    auto v = validate_config(o.config);
    if (!v.ok()) {
      issues = v.issues;
      return std::nullopt;
    }
    c = *v.config;
  }
  if (o.experiment) {
    c.experiment = *o.experiment;
    c.dataset.experiment = *o.experiment;
  }
  if (o.lr) c.train.learning_rate = *o.lr;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.seed) c.train.seed = *o.seed;
  if (o.scale) {
    c.train.width_scale = *o.scale;
    for (auto& b : c.branches) b.width_scale = *o.scale;
  }
  if (o.trials) c.trials = *o.trials;
  if (o.workers) c.workers = *o.workers;
  if (!o.lrs.empty()) c.learning_rates = o.lrs;
  if (o.bins) c.histogram_bins = *o.bins;
  if (o.train_per_class) c.dataset.counts.train = *o.train_per_class;
  // Round-trip through the validator so flag values get the same checks as file values.
  json j = to_json(c);
  for (auto& b : j["branches"]) b.erase("notation");
  auto v = validate_config_text(j.dump());
  if (!v.ok()) {
    issues = v.issues;
    return std::nullopt;
  }
  return v.config;
}

int require_out(const Options& o) {
  if (o.out.empty()) {
    std::cerr << "--out is required\n";
    return kExitConfig;
  }
  return kExitOk;
}

Dataset data_for(const ExperimentConfig& c, const Options& o) {
  return o.data.empty() ? generate_dataset(c.dataset) : load_dataset(o.data);
}

void print(const Options& o, const json& j, const std::string& text) {
  if (json_output(o)) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << text;
  }
}

std::string accuracy_line(const json& result) {
  std::ostringstream s;
  for (const auto& split : split_names()) {
    if (result["accuracy"].contains(split)) {
      s << "  " << split << " N17 accuracy " << result["accuracy"][split][16].get<double>() << "%\n";
    }
  }
  return s.str();
}

int cmd_init(const Options& o) {
  const auto text = config_template(o.experiment.value_or(1));
  if (o.out.empty()) {
    std::cout << text;
    return kExitOk;
  }
  const auto path = fs::path(o.out) / "experiment.json";
  write_text(path, text);
  print(o, {{"status", "ok"}, {"config", path.string()}}, "wrote " + path.string() + "\n");
  return kExitOk;
}

int cmd_validate(const Options& o) {
  std::vector<ConfigIssue> issues;
  auto c = resolve_config(o, issues);
  if (!c) return config_failure(o, issues);
  std::cout << to_json(*c).dump(2) << "\n";
  return kExitOk;
}

int cmd_synth(const Options& o) {
  if (int rc = require_out(o)) return rc;
  std::vector<ConfigIssue> issues;
  auto c = resolve_config(o, issues);
  if (!c) return config_failure(o, issues);
  try {
    const auto manifest = synth_dataset(c->dataset, o.out);
    std::ostringstream s;
    s << "wrote " << manifest["name"].get<std::string>() << " to " << o.out << "\n";
    for (const auto& split : split_names()) s << "  " << split << ": " << manifest["splits"][split]["count"] << " samples\n";
    print(o, manifest, s.str());
  } catch (const std::exception& e) {
    return stage_failure(o, "synth", e.what());
  }
  return kExitOk;
}

int cmd_train(const Options& o) {
  if (int rc = require_out(o)) return rc;
  std::vector<ConfigIssue> issues;
  auto c = resolve_config(o, issues);
  if (!c) return config_failure(o, issues);
  try {
    const auto data = data_for(*c, o);
    const auto result = train_to_directory(data, c->train, c->branches, o.out);
    print(o, result, "trained in " + std::to_string(result["wall_seconds"].get<double>()) + "s, checkpoint in " + o.out +
                         "/checkpoint\n" + accuracy_line(result));
  } catch (const std::exception& e) {
    return stage_failure(o, "train", e.what());
  }
  return kExitOk;
}

int cmd_montecarlo(const Options& o) {
  if (int rc = require_out(o)) return rc;
  std::vector<ConfigIssue> issues;
  auto c = resolve_config(o, issues);
  if (!c) return config_failure(o, issues);
  try {
    const auto data = data_for(*c, o);
    MonteCarloConfig mc;
    mc.base = c->train;
    mc.trials = c->trials;
    mc.learning_rates = c->learning_rates;
    mc.workers = c->workers;
    mc.branches = c->branches;
    const auto r = monte_carlo(data, mc, [&](const TrialResult& t, const TrainOutcome*) {
      if (!json_output(o)) {
        std::fprintf(stderr, "trial lr %g seed %llu: %s\n", t.learning_rate, static_cast<unsigned long long>(t.seed),
                     t.ok() ? std::to_string(t.accuracy.at("test")[16]).c_str() : "failed");
      }
    });
    const auto doc = to_json(r);
    write_json(fs::path(o.out) / "trials.json", doc);
    std::ostringstream s;
    for (const auto& [lr, z] : r.z_per_lr) s << "lr " << lr << ": " << format_perf(perf_tensor(z)) << "\n";
    if (!r.z_pooled.empty()) s << "pooled: " << format_perf(perf_tensor(r.z_pooled)) << "\n";
    for (const auto& f : r.failures) s << "failure: " << f << "\n";
    print(o, {{"z_per_lr", doc["z_per_lr"]}, {"z_pooled", doc["z_pooled"]}, {"failures", doc["failures"]},
              {"trials", (fs::path(o.out) / "trials.json").string()}},
          s.str());
  } catch (const std::exception& e) {
    return stage_failure(o, "montecarlo", e.what());
  }
  return kExitOk;
}

int cmd_eval(const Options& o) {
  if (int rc = require_out(o)) return rc;
  try {
    const auto ck = load_checkpoint(o.checkpoint);
    const auto data = dataset_for_checkpoint(ck, o.data.empty() ? std::nullopt : std::optional<fs::path>(o.data));
    const auto splits = o.split == "all" ? split_names() : std::vector<std::string>{o.split};
    const auto doc = write_evaluation(o.out, ck, data, splits);
    std::ostringstream s;
    for (const auto& name : splits) {
      s << name << ": N17 " << doc["splits"][name]["heads"][16]["accuracy"].get<double>() << "%\n";
    }
    print(o, doc, s.str());
  } catch (const std::exception& e) {
    return stage_failure(o, "evaluate", e.what());
  }
  return kExitOk;
}

int cmd_perf(const Options& o) {
  try {
    if (!o.z.empty()) {
      const auto t = perf_tensor(o.z);
      const double a = ability(t);
      print(o, {{"min", t.min}, {"mean", t.mean}, {"median", t.median}, {"max", t.max}, {"ability", a}},
            format_perf(t) + " ability " + std::to_string(a) + "\n");
      return kExitOk;
    }
    if (int rc = require_out(o)) return rc;
    if (o.input.empty()) {
      std::cerr << "perf needs --input trials.json or --z values\n";
      return kExitConfig;
    }
    const auto doc = write_perf(o.out, read_json(o.input), std::to_string(o.experiment.value_or(1)));
    std::ostringstream s;
    for (const auto& [head, e] : doc["pooled"].items()) {
      s << head << " " << e["tensor"].get<std::string>() << " ability " << e["ability"].get<double>() << "\n";
    }
    print(o, doc, s.str());
  } catch (const std::exception& e) {
    return stage_failure(o, "perf", e.what());
  }
  return kExitOk;
}

int cmd_sld(const Options& o) {
  if (int rc = require_out(o)) return rc;
  try {
    const auto ck = load_checkpoint(o.checkpoint);
    const auto data = dataset_for_checkpoint(ck, o.data.empty() ? std::nullopt : std::optional<fs::path>(o.data));
    const auto doc = write_sld(o.out, ck, data, o.split, o.bins.value_or(20));
    std::ostringstream s;
    s << "N17 accuracy " << doc["N17_accuracy"].get<double>() << "% on " << o.split << "\n";
    for (const auto& r : doc["rows"]) {
      s << r["head"].get<std::string>() << " accuracy " << r["accuracy"].get<double>() << "% mean SLD "
        << r["mean_sld"].get<double>() << "\n";
    }
    s << doc["failures"].get<std::size_t>() << " N17 failures\n";
    print(o, doc, s.str());
  } catch (const std::exception& e) {
    return stage_failure(o, "sld", e.what());
  }
  return kExitOk;
}

int cmd_gradcheck(const Options& o) {
  try {
    Ensemble<double> model(dragonfly_spec(2, InputDims{o.gc_size, o.gc_size, 1}, o.gc_scale));
    Rng rng(o.seed.value_or(1));
    auto params = model.init_parameters(rng);
    Tensor<double> batch({2, 1, o.gc_size, o.gc_size});
    for (Index i = 0; i < batch.size(); ++i) batch[i] = rng.uniform();
    const Tensor<double> target({2, 2}, {1, 0, 0, 1});
    LossFn<double> loss = [&](Tape<double>& tape, const ParameterStore<double>& p) {
      auto heads = model.forward(tape, p, tape.constant(batch), true, nullptr);
      return weighted_sum(softlog(heads[16]), target, -0.5);
    };
    GradCheckOptions opts;
    opts.max_entries = o.gc_entries;
    opts.seed = o.seed.value_or(1);
    const auto report = grad_check(loss, params, opts);
    json entries = json::array();
    for (const auto& e : report.entries) {
      entries.push_back({{"parameter", e.parameter}, {"checked", e.checked}, {"rel_error", e.rel_error}});
    }
    const bool pass = report.passed(o.gc_threshold);
    const json doc = {{"max_rel_error", report.max_rel_error()}, {"threshold", o.gc_threshold}, {"passed", pass},
                      {"entries", entries}};
    if (!o.out.empty()) write_json(fs::path(o.out) / "gradcheck.json", doc);
    print(o, doc,
          std::string(pass ? "PASS" : "FAIL") + " max relative error " + std::to_string(report.max_rel_error()) + " over " +
              std::to_string(report.entries.size()) + " tensors\n");
    return pass ? kExitOk : kExitStage;
  } catch (const std::exception& e) {
    return stage_failure(o, "gradcheck", e.what());
  }
}

int cmd_run(const Options& o) {
  if (int rc = require_out(o)) return rc;
  std::vector<ConfigIssue> issues;
  auto c = resolve_config(o, issues);
  if (!c) return config_failure(o, issues);
  ProgressFn progress;
  if (!json_output(o)) progress = [](const std::string& msg) { std::cerr << msg << "\n"; };
  const auto r = run_pipeline(*c, o.out, progress);
  if (r.exit_code != kExitOk) return stage_failure(o, r.failed_stage, r.message);
  std::ostringstream s;
  for (const auto& st : r.stages) s << st.name << (st.skipped ? " (cached)" : "") << "\n";
  s << "index: " << (fs::path(o.out) / "index.json").string() << "\n";
  print(o, r.to_json(), s.str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DRAGONFLY ensemble toolkit: synthetic glyphs, softlog training, Monte-Carlo metrics, SLD analysis"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--format", o.format, "Output format")->check(CLI::IsMember({"text", "json"}));

  auto common = [&](CLI::App* sub, bool writes) {
    sub->add_option("--config", o.config, "Experiment config (JSON, comments allowed)");
    sub->add_option("--experiment", o.experiment, "Preset 1, 2 or 3");
    if (writes) sub->add_option("--out", o.out, "Output directory");
  };
  auto training = [&](CLI::App* sub) {
    sub->add_option("--lr", o.lr, "Learning rate");
    sub->add_option("--epochs", o.epochs, "Epochs");
    sub->add_option("--seed", o.seed, "Seed");
    sub->add_option("--scale", o.scale, "Width scale");
    sub->add_option("--train-per-class", o.train_per_class, "Training samples per class");
    sub->add_option("--data", o.data, "Dataset directory written by synth (default: generate in memory)");
  };

  auto* init = app.add_subcommand("init", "Write a commented experiment config template");
  init->add_option("--experiment", o.experiment, "Preset 1, 2 or 3");
  init->add_option("--out", o.out, "Directory for experiment.json (default: print)");

  auto* validate = app.add_subcommand("validate", "Check a config and print its normalized form");
  common(validate, false);

  auto* synth = app.add_subcommand("synth", "Generate a dataset");
  common(synth, true);
  synth->add_option("--seed", o.seed, "Seed (applies to training; dataset seed comes from the config)");
  synth->add_option("--train-per-class", o.train_per_class, "Training samples per class");

  auto* train_cmd = app.add_subcommand("train", "Train one model and write a checkpoint");
  common(train_cmd, true);
  training(train_cmd);

  auto* mc = app.add_subcommand("montecarlo", "Monte-Carlo trials over initializations");
  common(mc, true);
  training(mc);
  mc->add_option("--trials", o.trials, "Trials per learning rate");
  mc->add_option("--lrs", o.lrs, "Learning rates")->delimiter(',');
  mc->add_option("--workers", o.workers, "Concurrent trials (capped by DRAGONFLY_WORKERS)");

  auto* eval = app.add_subcommand("eval", "Score every head of a checkpoint");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--data", o.data, "Dataset directory (default: regenerate from the checkpoint)");
  eval->add_option("--split", o.split, "train, val, test or all")->check(CLI::IsMember({"train", "val", "test", "all"}));
  eval->add_option("--out", o.out, "Output directory");

  auto* perf = app.add_subcommand("perf", "Performance tensor and Ability");
  perf->add_option("--input", o.input, "trials.json written by montecarlo");
  perf->add_option("--z", o.z, "Accuracies, comma separated")->delimiter(',');
  perf->add_option("--experiment", o.experiment, "Experiment label for the CSV");
  perf->add_option("--out", o.out, "Output directory");

  auto* sld = app.add_subcommand("sld", "Per-head SLD report, histograms and failures");
  sld->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  sld->add_option("--data", o.data, "Dataset directory (default: regenerate from the checkpoint)");
  sld->add_option("--split", o.split, "Split")->check(CLI::IsMember({"train", "val", "test"}));
  sld->add_option("--bins", o.bins, "Histogram bins");
  sld->add_option("--out", o.out, "Output directory");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full ensemble");
  gc->add_option("--scale", o.gc_scale, "Width scale");
  gc->add_option("--size", o.gc_size, "Input side");
  gc->add_option("--entries", o.gc_entries, "Entries probed per tensor (0 = all)");
  gc->add_option("--threshold", o.gc_threshold, "Maximum relative error");
  gc->add_option("--seed", o.seed, "Seed");
  gc->add_option("--out", o.out, "Directory for gradcheck.json");

  auto* run = app.add_subcommand("run", "Full pipeline with stage caching");
  common(run, true);
  training(run);
  run->add_option("--trials", o.trials, "Trials per learning rate");
  run->add_option("--lrs", o.lrs, "Learning rates")->delimiter(',');
  run->add_option("--workers", o.workers, "Concurrent trials (capped by DRAGONFLY_WORKERS)");
  run->add_option("--bins", o.bins, "Histogram bins");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  if (init->parsed()) return cmd_init(o);
  if (validate->parsed()) return cmd_validate(o);
  if (synth->parsed()) return cmd_synth(o);
  if (train_cmd->parsed()) return cmd_train(o);
  if (mc->parsed()) return cmd_montecarlo(o);
  if (eval->parsed()) return cmd_eval(o);
  if (perf->parsed()) return cmd_perf(o);
  if (sld->parsed()) return cmd_sld(o);
  if (gc->parsed()) return cmd_gradcheck(o);
  return cmd_run(o);
}
