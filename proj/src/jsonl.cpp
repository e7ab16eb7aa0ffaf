#include "wstab/jsonl.hpp"

#include <fstream>
#include <string>

#include "wstab/error.hpp"

namespace wstab {

std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::FileNotFound, path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto value = nlohmann::json::parse(line);
      if (!value.is_object()) throw Error(Errc::DecodeError, "not an object");
      out.push_back(std::move(value));
    } catch (const nlohmann::json::exception& e) {
      throw Error(Errc::DecodeError, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  for (const auto& r : records) out << r.dump() << '\n';
  if (!out) throw Error(Errc::Io, "write failed: " + path.string());
}

}  // namespace wstab
