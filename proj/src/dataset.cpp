#include "wstab/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "wstab/error.hpp"
#include "wstab/jsonl.hpp"
#include "wstab/parallel.hpp"
#include "wstab/tokenizer.hpp"

namespace wstab {

namespace fs = std::filesystem;

namespace {

// Skips whitespace and '#' comments between header fields.
int read_header_int(std::istream& in, const fs::path& path) {
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  int value = -1;
  if (!(in >> value) || value < 0) throw Error(Errc::DecodeError, path.string() + ": bad PGM header");
  return value;
}

}  // namespace

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::FileNotFound, path.string());
  char magic[2] = {};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '5') throw Error(Errc::DecodeError, path.string() + ": not a P5 PGM");
  GrayImage img;
  img.width = read_header_int(in, path);
  img.height = read_header_int(in, path);
  int maxval = read_header_int(in, path);
  if (maxval <= 0 || maxval > 255) throw Error(Errc::DecodeError, path.string() + ": only 8-bit PGM is supported");
  in.get();  // single whitespace before raster
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw Error(Errc::DecodeError, path.string() + ": truncated raster");
  }
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::min(255, p * 255 / maxval));
  }
  return img;
}

void write_pgm(const fs::path& path, const GrayImage& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(Errc::Io, "cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw Error(Errc::Io, "write failed: " + path.string());
}

ad::Tensor image_tensor(const GrayImage& image) {
  ad::Tensor t({image.height, image.width});
  auto v = t.mutable_data();
  for (std::size_t i = 0; i < image.pixels.size(); ++i) v[i] = image.pixels[i] / 255.0;
  return t;
}

fs::path annotations_path(const fs::path& dir) { return dir / "annotations.jsonl"; }

fs::path image_path(const fs::path& dir, const std::string& id) { return dir / "images" / (id + ".pgm"); }

std::vector<Record> load_records(const fs::path& dir, const std::optional<std::string>& split) {
  auto lines = read_jsonl(annotations_path(dir));
  std::vector<Record> out;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& j = lines[i];
    if (!j.is_object() || !j.contains("id") || !j.contains("html") || !j["id"].is_string() ||
        !j["html"].is_string()) {
      throw Error(Errc::DecodeError, "record " + std::to_string(i + 1) + " lacks string \"id\" and \"html\"");
    }
    Record r{j["id"].get<std::string>(), j["html"].get<std::string>(), j.value("split", std::string("train"))};
    if (!seen.insert(r.id).second) throw Error(Errc::DuplicateId, r.id);
    if (split && r.split != *split) continue;
    out.push_back(std::move(r));
  }
  return out;
}

Sample make_sample(const Record& record, const GrayImage& image, const NetConfig& config) {
  if (image.height != config.image_h || image.width != config.image_w) {
    throw Error(Errc::ShapeMismatch, record.id + ": image is " + std::to_string(image.height) + "x" +
                                         std::to_string(image.width) + ", model expects " +
                                         std::to_string(config.image_h) + "x" + std::to_string(config.image_w));
  }
  TableTree tree;
  try {
    tree = parse_html(record.html);
  } catch (const Error& e) {
    throw Error(Errc::DecodeError, record.id + ": " + e.what());
  }
  Sample s;
  s.id = record.id;
  s.image = image_tensor(image);
  StructTokenizeOptions opts;
  opts.max_len = static_cast<std::size_t>(config.max_struct_len);
  s.targets.struct_targets = tokenize_structure(tree, StructVocab::standard(), opts);
  CellVocab cells(config.alphabet);
  for (const TableNode* cell : tree.cells()) {
    s.targets.cell_targets.push_back(
        tokenize_cell(cell->content, cells, static_cast<std::size_t>(config.max_cell_len)).ids);
  }
  return s;
}

std::vector<Sample> load_samples(const fs::path& dir, const NetConfig& config, const std::optional<std::string>& split,
                                 unsigned threads) {
  auto records = load_records(dir, split);
  std::vector<Sample> out(records.size());
  parallel_for(records.size(), threads,
               [&](std::size_t i) { out[i] = make_sample(records[i], read_pgm(image_path(dir, records[i].id)), config); });
  return out;
}

}  // namespace wstab
