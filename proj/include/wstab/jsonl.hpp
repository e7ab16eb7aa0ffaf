#pragma once

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

namespace wstab {

/// Reads one JSON object per non-blank line. Throws FileNotFound, or
/// DecodeError naming the offending line.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);

/// Writes compact objects, one per line, terminated by '\n'.
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records);

}  // namespace wstab
