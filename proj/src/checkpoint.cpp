#include "wstab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "wstab/error.hpp"

namespace wstab {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'W', 'S', 'T', 'B'};
constexpr std::uint8_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::string& buf, const fs::path& path) : buf_(buf), path_(path) {}

  void need(std::size_t n) const {
    if (pos_ + n > buf_.size()) {
      throw Error(Errc::TruncatedFile, path_.string() + ": needs " + std::to_string(pos_ + n) + " bytes, has " +
                                           std::to_string(buf_.size()));
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  const std::string& buf_;
  const fs::path& path_;
  std::size_t pos_ = 0;
};

nlohmann::json parse_json(const std::string& text, const fs::path& path) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::DecodeError, path.string() + ": config block: " + e.what());
  }
}

}  // namespace

void save_checkpoint(const fs::path& path, const ModelParams& params, const NetConfig& net,
                     const nlohmann::json& train_config) {
  std::string out(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  for (const auto& block : {nlohmann::json(net).dump(), train_config.dump()}) {
    put_u32(out, static_cast<std::uint32_t>(block.size()));
    out += block;
  }
  auto named = params.parameters();
  put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (ad::Real v : t.data()) put_f32(out, static_cast<float>(v));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::Io, "cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error(Errc::Io, "write failed: " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::FileNotFound, path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader in(buf, path);
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw Error(Errc::BadMagic, path.string() + " is not a checkpoint");
  }
  in.bytes(4);
  auto version = static_cast<std::uint8_t>(in.bytes(1)[0]);
  if (version != kVersion) throw Error(Errc::DecodeError, "unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  auto net_json = parse_json(in.bytes(in.u32()), path);
  ck.train = parse_json(in.bytes(in.u32()), path);
  try {
    ck.net = net_json.get<NetConfig>();
    ck.net.validate();
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::DecodeError, path.string() + ": network config: " + e.what());
  }

  auto layout = parameter_layout(ck.net);
  std::uint32_t count = in.u32();
  if (count != layout.size()) {
    throw Error(Errc::ShapeMismatch, "checkpoint holds " + std::to_string(count) + " tensors, config implies " +
                                         std::to_string(layout.size()));
  }
  std::vector<ad::Tensor> tensors;
  for (const auto& [name, shape] : layout) {
    std::uint32_t rank = in.u32();
    ad::Shape stored;
    in.need(4ull * rank);
    for (std::uint32_t i = 0; i < rank; ++i) stored.push_back(static_cast<int>(in.u32()));
    if (stored != shape) {
      throw Error(Errc::ShapeMismatch,
                  name + ": stored " + ad::shape_str(stored) + ", expected " + ad::shape_str(shape));
    }
    ad::Tensor t(shape);
    in.need(4 * t.size());
    for (auto& v : t.mutable_data()) v = in.f32();
    tensors.push_back(std::move(t));
  }
  if (!in.at_end()) throw Error(Errc::DecodeError, path.string() + ": trailing bytes after last tensor");

  ck.params = ModelParams::zeros(ck.net);
  auto dst = ck.params.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::copy(tensors[i].data().begin(), tensors[i].data().end(), dst[i].mutable_data().begin());
  }
  return ck;
}

}  // namespace wstab
