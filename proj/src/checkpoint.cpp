#include "dragonfly/checkpoint.hpp"

#include "dragonfly/io.hpp"

namespace dragonfly {

namespace {

constexpr const char* kFormat = "dragonfly-checkpoint-1";

nlohmann::json write_entry(const fs::path& dir, const std::string& relative, const Tensor<double>& value) {
  write_tensor(dir / relative, value);
  return {{"file", relative}, {"shape", value.shape()}, {"hash", file_hash(dir / relative)}};
}

Tensor<double> read_entry(const fs::path& dir, const nlohmann::json& entry) {
  const auto path = dir / entry.at("file").get<std::string>();
  if (!fs::exists(path)) throw IoError("missing checkpoint file " + path.string());
  if (file_hash(path) != entry.at("hash").get<std::string>()) throw IoError("hash mismatch for " + path.string());
  auto value = read_tensor<double>(path);
  if (value.shape() != entry.at("shape").get<Shape>()) throw IoError("shape mismatch for " + path.string());
  return value;
}

}  // namespace

nlohmann::json save_checkpoint(const fs::path& dir, const Checkpoint& ck) {
  ensure_directory(dir / "tensors");
  ensure_directory(dir / "stats");
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, value] : ck.params.parameters()) {
    params[name] = write_entry(dir, "tensors/" + name + ".dft1", value);
  }
  nlohmann::json stats = nlohmann::json::object();
  for (const auto& [name, s] : ck.params.all_stats()) {
    if (s.mean.empty()) continue;
    stats[name] = {{"mean", write_entry(dir, "stats/" + name + ".mean.dft1", s.mean)},
                   {"var", write_entry(dir, "stats/" + name + ".var.dft1", s.var)}};
  }
  nlohmann::json index = {{"format", kFormat},
                          {"spec", to_json(ck.spec)},
                          {"config", to_json(ck.config)},
                          {"classes", ck.classes},
                          {"parameters", params},
                          {"stats", stats},
                          {"extra", ck.extra.is_null() ? nlohmann::json::object() : ck.extra}};
  write_json(dir / "index.json", index);
  return index;
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const auto index_path = dir / "index.json";
  const auto index = read_json(index_path);
  Checkpoint ck;
  try {
    if (index.at("format") != kFormat) throw IoError(index_path.string() + ": unknown format");
    ck.spec = ensemble_from_json(index.at("spec"));
    ck.config = train_config_from_json(index.at("config"));
    ck.classes = index.at("classes").get<std::vector<std::string>>();
    for (const auto& [name, entry] : index.at("parameters").items()) ck.params.add(name, read_entry(dir, entry));
    for (const auto& [name, entry] : index.at("stats").items()) {
      auto& s = ck.params.stats(name);
      s.mean = read_entry(dir, entry.at("mean"));
      s.var = read_entry(dir, entry.at("var"));
    }
    ck.extra = index.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(index_path.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw IoError(index_path.string() + ": " + e.what());
  }
  // The stored tensors must cover exactly the parameters the spec implies.
  Ensemble<double> model(ck.spec);
  Rng rng(0);
  const auto expected = model.init_parameters(rng);
  for (const auto& [name, value] : expected.parameters()) {
    if (!ck.params.contains(name)) throw IoError(index_path.string() + ": missing parameter " + name);
    if (ck.params.get(name).shape() != value.shape()) throw IoError(index_path.string() + ": wrong shape for " + name);
  }
  if (ck.params.parameters().size() != expected.parameters().size()) {
    throw IoError(index_path.string() + ": unexpected extra parameters");
  }
  return ck;
}

}  // namespace dragonfly
