#include "dragonfly/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace dragonfly {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

std::string file_hash(const fs::path& path) { return hex64(fnv1a(read_text(path))); }

void write_text(const fs::path& path, std::string_view content) {
  if (path.has_parent_path()) ensure_directory(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
  const std::string text = read_text(path);
  try {
    return nlohmann::json::parse(text, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& value) { write_text(path, value.dump(2) + "\n"); }

void write_pgm(const fs::path& path, const Tensor<double>& image) {
  if (image.rank() < 2) throw ShapeError("write_pgm: image must be [H, W] or [1, H, W]");
  const Index H = image.dim(image.rank() - 2), W = image.dim(image.rank() - 1);
  if (H * W != image.size()) throw ShapeError("write_pgm: only single-channel images are supported");
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (Index i = 0; i < image.size(); ++i) {
    const double v = std::clamp(image[i], 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  write_text(path, out);
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

}  // namespace dragonfly
