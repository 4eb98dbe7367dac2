#include "dragonfly/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "dragonfly/io.hpp"

namespace dragonfly {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kStrokeHalfWidth = 0.15;  // glyph units
constexpr double kGlyphExtent = 0.35;      // glyph unit as a fraction of the image side

struct Segment {
  double x0, y0, x1, y1;
};

using Skeleton = std::vector<Segment>;

void line(Skeleton& s, double x0, double y0, double x1, double y1) { s.push_back({x0, y0, x1, y1}); }

/// Elliptic arc from angle a0 to a1 (radians, y axis pointing down) as a polyline.
void arc(Skeleton& s, double cx, double cy, double rx, double ry, double a0, double a1, int pieces = 24) {
  double px = cx + rx * std::cos(a0), py = cy + ry * std::sin(a0);
  for (int i = 1; i <= pieces; ++i) {
    const double a = a0 + (a1 - a0) * i / pieces;
    const double x = cx + rx * std::cos(a), y = cy + ry * std::sin(a);
    line(s, px, py, x, y);
    px = x;
    py = y;
  }
}

Skeleton skeleton(char letter) {
  Skeleton s;
  switch (letter) {
    case 'I':
      line(s, 0, -1, 0, 1);
      break;
    case 'O':
      arc(s, 0, 0, 0.75, 1.0, 0, 2 * kPi, 48);
      break;
    case 'Q':
      arc(s, 0, 0, 0.75, 1.0, 0, 2 * kPi, 48);
      line(s, 0.3, 0.55, 0.85, 1.15);
      break;
    case 'D':
      line(s, -0.6, -1, -0.6, 1);
      line(s, -0.6, -1, 0.0, -1);
      arc(s, 0, 0, 0.7, 1.0, -kPi / 2, kPi / 2, 32);
      line(s, 0.0, 1, -0.6, 1);
      break;
    case 'B':
      line(s, -0.6, -1, -0.6, 1);
      line(s, -0.6, -1, 0.0, -1);
      arc(s, 0.0, -0.5, 0.5, 0.5, -kPi / 2, kPi / 2);
      line(s, -0.6, 0, 0.05, 0);
      arc(s, 0.05, 0.5, 0.6, 0.5, -kPi / 2, kPi / 2);
      line(s, 0.05, 1, -0.6, 1);
      break;
    default:
      throw std::invalid_argument(std::string("render_glyph: no skeleton for letter '") + letter + "' (alphabet " +
                                  glyph_alphabet() + ")");
  }
  return s;
}

double segment_distance(double x, double y, const Segment& g) {
  const double dx = g.x1 - g.x0, dy = g.y1 - g.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((x - g.x0) * dx + (y - g.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = g.x0 + t * dx - x, ey = g.y0 + t * dy - y;
  return std::sqrt(ex * ex + ey * ey);
}

int split_id(const std::string& name) {
  const auto& names = split_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
}

Index split_count(const SplitCounts& c, int id) { return id == 0 ? c.train : id == 1 ? c.val : c.test; }

void validate(const SynthConfig& c) {
  experiment_preset(c.experiment);
  if (c.counts.train < 1 || c.counts.val < 1 || c.counts.test < 1) {
    throw std::invalid_argument("synth: every split count must be at least 1");
  }
  if (c.image_size < 16) throw std::invalid_argument("synth: image_size must be at least 16");
  if (c.jitter.scale_min <= 0 || c.jitter.scale_max < c.jitter.scale_min) {
    throw std::invalid_argument("synth: jitter scale range must be positive and ordered");
  }
  if (c.texture.components < 1 || c.texture.freq_lo <= 0 || c.texture.freq_hi < c.texture.freq_lo) {
    throw std::invalid_argument("synth: texture needs components >= 1 and an ordered positive frequency band");
  }
}

/// Sum of oriented cosine gratings sampled on the H x W grid.
Eigen::ArrayXd grating(Index H, Index W, double angle_deg, const TextureParams& p, Rng& rng) {
  Eigen::ArrayXd field = Eigen::ArrayXd::Zero(H * W);
  for (int j = 0; j < p.components; ++j) {
    const double theta = (angle_deg + rng.uniform(-p.angle_spread_deg, p.angle_spread_deg)) * kPi / 180.0;
    const double f = rng.uniform(p.freq_lo, p.freq_hi);
    const double phase = rng.uniform(0.0, 2 * kPi);
    // Gratings vary across the orientation: the wave vector is the normal of the stripes.
    const double kx = -std::sin(theta) * 2 * kPi * f, ky = std::cos(theta) * 2 * kPi * f;
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) field[y * W + x] += std::cos(kx * double(x) + ky * double(y) + phase);
  }
  return field;
}

}  // namespace

const std::string& glyph_alphabet() {
  static const std::string letters = "BDIOQ";
  return letters;
}

Tensor<double> render_glyph(char letter, Index size, const JitterSpec& jitter, Rng& rng) {
  if (size < 16) throw std::invalid_argument("render_glyph: size must be at least 16, got " + std::to_string(size));
  const Skeleton s = skeleton(letter);
  const double rot = rng.uniform(-jitter.max_rotation_deg, jitter.max_rotation_deg) * kPi / 180.0;
  const double scale = rng.uniform(jitter.scale_min, jitter.scale_max);
  const double tx = rng.uniform(-jitter.max_translation, jitter.max_translation) * double(size);
  const double ty = rng.uniform(-jitter.max_translation, jitter.max_translation) * double(size);

  const double unit = double(size) * kGlyphExtent * scale;
  const double cx = double(size) / 2 + tx, cy = double(size) / 2 + ty;
  const double c = std::cos(rot), sn = std::sin(rot);
  Tensor<double> img({1, size, size});
  for (Index py = 0; py < size; ++py) {
    for (Index px = 0; px < size; ++px) {
      const double dx = double(px) + 0.5 - cx, dy = double(py) + 0.5 - cy;
      // Inverse rotation brings the pixel back into glyph coordinates.
      const double gx = (c * dx + sn * dy) / unit, gy = (-sn * dx + c * dy) / unit;
      double best = std::numeric_limits<double>::infinity();
      for (const auto& seg : s) best = std::min(best, segment_distance(gx, gy, seg));
      img[py * size + px] = best <= kStrokeHalfWidth ? 1.0 : 0.0;
    }
  }
  return img;
}

Tensor<double> encrypt_sva(const Tensor<double>& binary, const TextureParams& params, Rng& rng) {
  if (binary.rank() < 2) throw ShapeError("encrypt_sva: image must be [1, H, W] or [H, W]");
  const Index H = binary.dim(binary.rank() - 2), W = binary.dim(binary.rank() - 1);
  if (H * W != binary.size()) throw ShapeError("encrypt_sva: single-channel image expected");
  const Eigen::ArrayXd fg = grating(H, W, params.foreground_angle_deg, params, rng);
  const Eigen::ArrayXd bg = grating(H, W, params.background_angle_deg, params, rng);

  Eigen::ArrayXd z(H * W);
  for (int region = 0; region < 2; ++region) {
    const Eigen::ArrayXd& field = region == 1 ? fg : bg;
    double n = 0, mean = 0;
    for (Index i = 0; i < z.size(); ++i) {
      if ((binary[i] > 0.5) == (region == 1)) {
        mean += field[i];
        n += 1;
      }
    }
    if (n == 0) continue;
    mean /= n;
    double var = 0;
    for (Index i = 0; i < z.size(); ++i)
      if ((binary[i] > 0.5) == (region == 1)) var += (field[i] - mean) * (field[i] - mean);
    const double sd = std::sqrt(var / n);
    for (Index i = 0; i < z.size(); ++i)
      if ((binary[i] > 0.5) == (region == 1)) z[i] = sd > 0 ? (field[i] - mean) / sd : 0.0;
  }
  const double peak = z.abs().maxCoeff();
  const double gain = peak > 0 ? 0.5 / peak : 0.0;
  Tensor<double> out(binary.shape());
  for (Index i = 0; i < z.size(); ++i) out[i] = std::clamp(0.5 + gain * z[i], 0.0, 1.0);
  return out;
}

const ExperimentPreset& experiment_preset(int id) {
  static const std::vector<ExperimentPreset> presets = {
      {1, "IO binary", "IO", false},
      {2, "BDOQ binary", "BDOQ", false},
      {3, "IO-SVA encrypted", "IO", true},
  };
  if (id < 1 || id > 3) throw std::invalid_argument("experiment must be 1, 2 or 3, got " + std::to_string(id));
  return presets[static_cast<std::size_t>(id - 1)];
}

nlohmann::json to_json(const SynthConfig& c) {
  return {
      {"experiment", c.experiment},
      {"counts", {{"train", c.counts.train}, {"val", c.counts.val}, {"test", c.counts.test}}},
      {"seed", c.seed},
      {"image_size", c.image_size},
      {"jitter",
       {{"max_rotation_deg", c.jitter.max_rotation_deg},
        {"scale_min", c.jitter.scale_min},
        {"scale_max", c.jitter.scale_max},
        {"max_translation", c.jitter.max_translation}}},
      {"texture",
       {{"foreground_angle_deg", c.texture.foreground_angle_deg},
        {"background_angle_deg", c.texture.background_angle_deg},
        {"angle_spread_deg", c.texture.angle_spread_deg},
        {"freq_lo", c.texture.freq_lo},
        {"freq_hi", c.texture.freq_hi},
        {"components", c.texture.components}}},
      {"previews_per_class", c.previews_per_class},
  };
}

SynthConfig synth_config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.experiment = j.value("experiment", c.experiment);
  if (j.contains("counts")) {
    const auto& k = j.at("counts");
    c.counts.train = k.value("train", c.counts.train);
    c.counts.val = k.value("val", c.counts.val);
    c.counts.test = k.value("test", c.counts.test);
  }
  c.seed = j.value("seed", c.seed);
  c.image_size = j.value("image_size", c.image_size);
  if (j.contains("jitter")) {
    const auto& k = j.at("jitter");
    c.jitter.max_rotation_deg = k.value("max_rotation_deg", c.jitter.max_rotation_deg);
    c.jitter.scale_min = k.value("scale_min", c.jitter.scale_min);
    c.jitter.scale_max = k.value("scale_max", c.jitter.scale_max);
    c.jitter.max_translation = k.value("max_translation", c.jitter.max_translation);
  }
  if (j.contains("texture")) {
    const auto& k = j.at("texture");
    c.texture.foreground_angle_deg = k.value("foreground_angle_deg", c.texture.foreground_angle_deg);
    c.texture.background_angle_deg = k.value("background_angle_deg", c.texture.background_angle_deg);
    c.texture.angle_spread_deg = k.value("angle_spread_deg", c.texture.angle_spread_deg);
    c.texture.freq_lo = k.value("freq_lo", c.texture.freq_lo);
    c.texture.freq_hi = k.value("freq_hi", c.texture.freq_hi);
    c.texture.components = k.value("components", c.texture.components);
  }
  c.previews_per_class = j.value("previews_per_class", c.previews_per_class);
  validate(c);
  return c;
}

const Split& Dataset::split(const std::string& name) const {
  switch (split_id(name)) {
    case 0:
      return train;
    case 1:
      return val;
    default:
      return test;
  }
}

Tensor<double> synth_sample(const SynthConfig& config, int split, Index class_index, Index sample_index) {
  const auto& preset = experiment_preset(config.experiment);
  Rng rng = Rng::derive({config.seed, static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(class_index),
                         static_cast<std::uint64_t>(sample_index)});
  const char letter = preset.letters.at(static_cast<std::size_t>(class_index));
  Tensor<double> img = render_glyph(letter, config.image_size, config.jitter, rng);
  if (preset.encrypted) img = encrypt_sva(img, config.texture, rng);
  // Round through float so the in-memory dataset equals what the 32-bit shards hold.
  for (Index i = 0; i < img.size(); ++i) img[i] = static_cast<double>(static_cast<float>(img[i]));
  return img;
}

Dataset generate_dataset(const SynthConfig& config) {
  validate(config);
  const auto& preset = experiment_preset(config.experiment);
  Dataset data;
  data.config = config;
  for (char c : preset.letters) data.classes.push_back(preset.encrypted ? "Encrypted[" + std::string(1, c) + "]" : std::string(1, c));
  const Index K = data.class_count(), S = config.image_size;
  for (int id = 0; id < 3; ++id) {
    const Index per_class = split_count(config.counts, id);
    Split split;
    split.images = Tensor<double>({per_class * K, 1, S, S});
    split.labels = Tensor<std::int32_t>({per_class * K});
    for (Index i = 0; i < per_class; ++i) {
      for (Index k = 0; k < K; ++k) {
        const Index row = i * K + k;
        const auto img = synth_sample(config, id, k, i);
        split.images.values().segment(row * S * S, S * S) = img.values();
        split.labels[row] = static_cast<std::int32_t>(k);
      }
    }
    (id == 0 ? data.train : id == 1 ? data.val : data.test) = std::move(split);
  }
  return data;
}

nlohmann::json synth_dataset(const SynthConfig& config, const std::filesystem::path& out) {
  const Dataset data = generate_dataset(config);
  ensure_directory(out);
  const auto& preset = experiment_preset(config.experiment);
  nlohmann::json manifest;
  manifest["format"] = "dragonfly-dataset/1";
  manifest["experiment"] = config.experiment;
  manifest["name"] = preset.name;
  manifest["classes"] = data.classes;
  manifest["encrypted"] = preset.encrypted;
  manifest["seed"] = config.seed;
  manifest["image_size"] = config.image_size;
  manifest["config"] = to_json(config);
  manifest["previews"] = nlohmann::json::array();
  const Index S = config.image_size;
  for (const auto& name : split_names()) {
    const Split& split = data.split(name);
    const std::string images = name + "_images.dft1", labels = name + "_labels.dft1";
    write_tensor(out / images, split.images.cast<float>());
    write_tensor(out / labels, split.labels);
    manifest["splits"][name] = {{"count", split.size()},
                                {"per_class", split.size() / data.class_count()},
                                {"images", images},
                                {"labels", labels},
                                {"images_hash", file_hash(out / images)},
                                {"labels_hash", file_hash(out / labels)}};
    for (Index row = 0; row < std::min(split.size(), config.previews_per_class * data.class_count()); ++row) {
      const std::string file = "previews/" + name + "_" + std::to_string(row) + "_" +
                               std::string(1, preset.letters[static_cast<std::size_t>(split.labels[row])]) + ".pgm";
      Tensor<double> img({S, S});
      img.values() = split.images.values().segment(row * S * S, S * S);
      write_pgm(out / file, img);
      manifest["previews"].push_back(file);
    }
  }
  write_json(out / "manifest.json", manifest);
  return manifest;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto manifest = read_json(dir / "manifest.json");
  Dataset data;
  try {
    data.config = synth_config_from_json(manifest.at("config"));
    data.classes = manifest.at("classes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError((dir / "manifest.json").string() + ": " + e.what());
  }
  for (const auto& name : split_names()) {
    const auto& entry = manifest.at("splits").at(name);
    Split split;
    for (const char* key : {"images", "labels"}) {
      const auto path = dir / entry.at(key).get<std::string>();
      const std::string expected = entry.at(std::string(key) + "_hash").get<std::string>();
      if (file_hash(path) != expected) throw IoError("hash mismatch for " + path.string());
    }
    split.images = read_tensor<double>(dir / entry.at("images").get<std::string>());
    split.labels = read_tensor<std::int32_t>(dir / entry.at("labels").get<std::string>());
    if (split.images.rank() != 4 || split.images.dim(0) != split.labels.size()) {
      throw IoError("shard shapes disagree in " + dir.string() + " split " + name);
    }
    (name == "train" ? data.train : name == "val" ? data.val : data.test) = std::move(split);
  }
  return data;
}

double reference_accuracy(const Dataset& data) {
  const Index K = data.class_count();
  const Index P = data.train.images.size() / data.train.size();
  Eigen::MatrixXd centroids = Eigen::MatrixXd::Zero(K, P);
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(K);
  const auto train = data.train.images.matrix(data.train.size(), P);
  for (Index i = 0; i < data.train.size(); ++i) {
    centroids.row(data.train.labels[i]) += train.row(i);
    counts[data.train.labels[i]] += 1;
  }
  for (Index k = 0; k < K; ++k) centroids.row(k) /= std::max(1.0, counts[k]);
  const auto test = data.test.images.matrix(data.test.size(), P);
  Index correct = 0;
  for (Index i = 0; i < data.test.size(); ++i) {
    Index best = 0;
    (centroids.rowwise() - test.row(i)).rowwise().squaredNorm().minCoeff(&best);
    correct += best == data.test.labels[i];
  }
  return 100.0 * double(correct) / double(data.test.size());
}

}  // namespace dragonfly
