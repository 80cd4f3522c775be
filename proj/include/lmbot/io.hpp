#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace lmbot {

/// Writes to `<path>.tmp` then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

/// Lines of a text file; a trailing newline does not produce an empty line.
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// 64-bit FNV-1a, used for vocabulary and parameter fingerprints.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL);

std::string hex64(std::uint64_t value);

}  // namespace lmbot
