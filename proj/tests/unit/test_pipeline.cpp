#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "dragonfly/io.hpp"
#include "dragonfly/pipeline.hpp"

using namespace dragonfly;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("dragonfly_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const ConfigIssue* find_issue(const ConfigValidation& v, const std::string& key) {
  for (const auto& i : v.issues) {
    if (i.key == key) return &i;
  }
  return nullptr;
}

ExperimentConfig tiny_experiment() {
  auto c = default_config(1);
  c.dataset.counts = {12, 3, 4};
  c.dataset.image_size = 16;
  c.dataset.previews_per_class = 1;
  c.train.width_scale = 1.0 / 16;
  for (auto& b : c.branches) b.width_scale = c.train.width_scale;
  c.train.epochs = 1;
  c.train.batch_size = 8;
  c.trials = 1;
  c.learning_rates = {0.01};
  c.histogram_bins = 5;
  return c;
}

std::set<std::string> top_level(const fs::path& dir) {
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) names.insert(e.path().filename().string());
  return names;
}

}  // namespace

TEST(ConfigValidation, TemplateParsesToDefaults) {
  for (int e : {1, 2, 3}) {
    auto v = validate_config_text(config_template(e));
    ASSERT_TRUE(v.ok()) << v.issues.front().describe();
    EXPECT_EQ(to_json(*v.config), to_json(default_config(e))) << "experiment " << e;
  }
}

TEST(ConfigValidation, MinimalConfigIsFullyDefaulted) {
  auto v = validate_config_text(R"({"experiment": 1})");
  ASSERT_TRUE(v.ok());
  const json j = to_json(*v.config);
  EXPECT_EQ(j, to_json(default_config(1)));
  EXPECT_EQ(j["branches"].size(), 12u);
  EXPECT_TRUE(j["branches"][0].contains("notation"));
  EXPECT_DOUBLE_EQ(j["train"]["width_scale"].get<double>(), 0.125);
  EXPECT_EQ(v.config->branches.size(), 12u);
}

TEST(ConfigValidation, BadPoolTokenIsReportedAtItsKey) {
  const std::string text = "{\n  \"experiment\": 1,\n  \"branches\": [\n    {\"index\": 1,\n     \"final_max\": \"G5[x2]\"}\n  ]\n}\n";
  auto v = validate_config_text(text);
  ASSERT_FALSE(v.ok());
  const auto* issue = find_issue(v, "branches[0].final_max");
  ASSERT_NE(issue, nullptr);
  EXPECT_EQ(issue->line, 5);
  EXPECT_NE(issue->message.find("G5[x2]"), std::string::npos);
  EXPECT_NE(issue->describe().find("line 5"), std::string::npos);
}

TEST(ConfigValidation, ZeroWidthScaleIsRejected) {
  auto v = validate_config_text(R"({"experiment": 1, "train": {"width_scale": 0}})");
  ASSERT_FALSE(v.ok());
  EXPECT_NE(find_issue(v, "train.width_scale"), nullptr);
}

TEST(ConfigValidation, IssuesAreAggregatedWithLines) {
  const std::string text =
      "{\n"
      "  // comments are allowed\n"
      "  \"experiment\": 4,\n"
      "  \"train\": {\"epochs\": 0},\n"
      "  \"montecarlo\": {\"trials\": 0},\n"
      "  \"bogus\": true\n"
      "}\n";
  auto v = validate_config_text(text);
  EXPECT_FALSE(v.config.has_value());
  ASSERT_GE(v.issues.size(), 4u);
  ASSERT_NE(find_issue(v, "experiment"), nullptr);
  EXPECT_EQ(find_issue(v, "experiment")->line, 3);
  ASSERT_NE(find_issue(v, "train.epochs"), nullptr);
  EXPECT_EQ(find_issue(v, "train.epochs")->line, 4);
  EXPECT_NE(find_issue(v, "montecarlo.trials"), nullptr);
  ASSERT_NE(find_issue(v, "bogus"), nullptr);
  EXPECT_EQ(find_issue(v, "bogus")->line, 6);
}

TEST(ConfigValidation, ZeroLearningRateIsAConfigError) {
  auto v = validate_config_text(R"({"experiment": 1, "train": {"learning_rate": 0}})");
  EXPECT_NE(find_issue(v, "train.learning_rate"), nullptr);
}

TEST(ConfigValidation, MalformedJsonAndMissingFile) {
  auto v = validate_config_text("{\"experiment\": 1,,}");
  ASSERT_FALSE(v.ok());
  EXPECT_GE(v.issues.front().line, 1);
  EXPECT_FALSE(validate_config("/nonexistent/dragonfly.json").ok());
}

TEST(ConfigValidation, BranchOverrideChangesTheSpec) {
  auto v = validate_config_text(R"({"experiment": 1, "branches": [{"index": 3, "kernel": 5}]})");
  ASSERT_TRUE(v.ok()) << v.issues.front().describe();
  EXPECT_EQ(v.config->branches[2].kernel, 5);
  EXPECT_NE(to_json(*v.config), to_json(default_config(1)));
}

TEST(Pipeline, RunsCachesAndReportsCorruptCheckpoints) {
  const auto root = scratch("run");
  const auto previous = fs::current_path();
  fs::current_path(root);
  const auto out = root / "out";
  const auto config = tiny_experiment();

  auto first = run_pipeline(config, out);
  ASSERT_EQ(first.exit_code, kExitOk) << first.failed_stage << ": " << first.message;
  ASSERT_EQ(first.stages.size(), 6u);
  for (const auto& s : first.stages) EXPECT_FALSE(s.skipped) << s.name;

  const json index = read_json(out / "index.json");
  EXPECT_EQ(index, first.index);
  ASSERT_EQ(index["groups"].size(), 5u);
  for (const char* g : {"dataset", "checkpoints", "perf", "sld", "figures"}) {
    ASSERT_TRUE(index["groups"].contains(g)) << g;
    EXPECT_FALSE(index["groups"][g].empty()) << g;
    for (const auto& f : index["groups"][g]) EXPECT_TRUE(fs::exists(out / f.get<std::string>())) << f;
  }

  // Nothing escapes --out.
  EXPECT_EQ(top_level(root), std::set<std::string>{"out"});

  const auto trained = fs::last_write_time(out / "train" / "checkpoint" / "index.json");
  auto second = run_pipeline(config, out);
  ASSERT_EQ(second.exit_code, kExitOk) << second.message;
  for (const auto& s : second.stages) EXPECT_TRUE(s.skipped) << s.name;
  EXPECT_EQ(fs::last_write_time(out / "train" / "checkpoint" / "index.json"), trained);

  // Flip a byte in one parameter tensor.
  fs::path victim;
  for (const auto& e : fs::directory_iterator(out / "train" / "checkpoint" / "tensors")) {
    victim = e.path();
    break;
  }
  ASSERT_FALSE(victim.empty());
  {
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(-1, std::ios::end);
    char c = 0;
    f.read(&c, 1);
    f.seekp(-1, std::ios::end);
    c = static_cast<char>(c ^ 0x5a);
    f.write(&c, 1);
  }
  auto third = run_pipeline(config, out);
  EXPECT_EQ(third.exit_code, kExitStage);
  EXPECT_EQ(third.failed_stage, "evaluate");
  EXPECT_NE(third.message.find(victim.filename().string()), std::string::npos) << third.message;

  fs::current_path(previous);
  fs::remove_all(root);
}

TEST(Pipeline, ChangedAnalysisSettingsRerunOnlyDownstreamStages) {
  const auto out = scratch("partial");
  auto config = tiny_experiment();
  ASSERT_EQ(run_pipeline(config, out).exit_code, kExitOk);
  config.histogram_bins = 8;
  auto r = run_pipeline(config, out);
  ASSERT_EQ(r.exit_code, kExitOk) << r.message;
  for (const auto& s : r.stages) EXPECT_EQ(s.skipped, s.name != "sld") << s.name;
  fs::remove_all(out);
}
