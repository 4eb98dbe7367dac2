#pragma once

// File helpers shared by the dataset, checkpoint and report writers.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"

#include "dragonfly/tensor.hpp"

namespace dragonfly {

namespace fs = std::filesystem;

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;

/// 64-bit FNV-1a, chainable through `h`.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset);
std::string hex64(std::uint64_t value);

/// FNV-1a of a file's bytes as 16 hex digits. IoError naming the path on failure.
std::string file_hash(const fs::path& path);

std::string read_text(const fs::path& path);
void write_text(const fs::path& path, std::string_view content);

/// Parses JSON, accepting // and /* */ comments. IoError on unreadable or malformed files.
nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& value);

/// Binary 8-bit PGM of a [H, W] or [1, H, W] image with values in [0, 1].
void write_pgm(const fs::path& path, const Tensor<double>& image);

/// Creates `dir` (and parents); IoError naming the path on failure.
void ensure_directory(const fs::path& dir);

}  // namespace dragonfly
