#pragma once

// Helpers shared by the test binaries: a random table generator that is
// independent of the synthetic-data module, and reference implementations
// used as oracles.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "wstab/error.hpp"
#include "wstab/rng.hpp"
#include "wstab/table_model.hpp"

namespace wstab::testutil {

struct RandomTreeOptions {
  int max_nodes = 40;  // including the root
  int max_span = 3;
  double span_prob = 0.2;
  double empty_prob = 0.3;
  std::string alphabet = "ab1 &<";
  int max_text = 4;
};

/// Code of the Error thrown by `f`, or nullopt when nothing is thrown.
inline std::optional<Errc> error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

inline TableNode node_of(Tag tag) {
  TableNode n;
  n.tag = tag;
  return n;
}

/// Grammatical but not necessarily rectangular table with at most
/// `max_nodes` nodes. Content avoids leading/trailing spaces only by chance.
inline TableTree random_tree(Rng& rng, const RandomTreeOptions& o = {}) {
  TableTree t;
  t.root = node_of(Tag::Table);
  int budget = o.max_nodes - 1;
  auto fill_section = [&](TableNode& section) {
    int rows = rng.uniform_int(0, 3);
    for (int r = 0; r < rows && budget > 0; ++r) {
      section.children.push_back(node_of(Tag::Tr));
      --budget;
      auto& tr = section.children.back();
      int cells = rng.uniform_int(0, 4);
      for (int c = 0; c < cells && budget > 0; ++c) {
        TableNode td = node_of(Tag::Td);
        if (rng.bernoulli(o.span_prob)) td.rowspan = rng.uniform_int(2, o.max_span);
        if (rng.bernoulli(o.span_prob)) td.colspan = rng.uniform_int(2, o.max_span);
        if (!rng.bernoulli(o.empty_prob)) {
          int len = rng.uniform_int(1, o.max_text);
          for (int k = 0; k < len; ++k) {
            td.content.push_back(o.alphabet[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(o.alphabet.size()) - 1))]);
          }
        }
        tr.children.push_back(std::move(td));
        --budget;
      }
    }
  };
  if (budget > 0 && rng.bernoulli(0.4)) {
    t.root.children.push_back(node_of(Tag::Thead));
    --budget;
    fill_section(t.root.children.back());
  }
  if (budget > 0 && rng.bernoulli(0.9)) {
    t.root.children.push_back(node_of(Tag::Tbody));
    --budget;
    fill_section(t.root.children.back());
  }
  return t;
}

/// Textbook dynamic-programming Levenshtein distance.
inline std::size_t levenshtein(const std::string& a, const std::string& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0u : 1u)});
    }
  }
  return d[a.size()][b.size()];
}

/// Ordered forest edit distance by the classic recursion on rightmost roots,
/// memoized on the exact forests. Exponential in general, fine for small trees.
class ForestEditOracle {
 public:
  explicit ForestEditOracle(bool content) : content_(content) {}

  double distance(const TableNode& a, const TableNode& b) { return forest({&a}, {&b}); }

 private:
  using Forest = std::vector<const TableNode*>;

  double relabel(const TableNode& x, const TableNode& y) const {
    if (x.tag != y.tag) return 1.0;
    if (x.tag != Tag::Td) return 0.0;
    if (x.rowspan != y.rowspan || x.colspan != y.colspan) return 1.0;
    if (!content_) return 0.0;
    std::size_t longest = std::max(x.content.size(), y.content.size());
    if (longest == 0) return 0.0;
    return static_cast<double>(levenshtein(x.content, y.content)) / static_cast<double>(longest);
  }

  static Forest without_rightmost_root(const Forest& f) {
    Forest out(f.begin(), f.end() - 1);
    for (const auto& c : f.back()->children) out.push_back(&c);
    return out;
  }

  static Forest children_of(const TableNode* n) {
    Forest out;
    for (const auto& c : n->children) out.push_back(&c);
    return out;
  }

  static std::size_t size(const Forest& f) {
    std::size_t n = 0;
    for (const auto* t : f) n += 1 + size(children_of(t));
    return n;
  }

  double forest(const Forest& f, const Forest& g) {
    if (f.empty()) return static_cast<double>(size(g));
    if (g.empty()) return static_cast<double>(size(f));
    auto key = std::make_pair(f, g);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    const TableNode* v = f.back();
    const TableNode* w = g.back();
    Forest f_rest(f.begin(), f.end() - 1);
    Forest g_rest(g.begin(), g.end() - 1);
    double best = forest(without_rightmost_root(f), g) + 1.0;
    best = std::min(best, forest(f, without_rightmost_root(g)) + 1.0);
    best = std::min(best, forest(f_rest, g_rest) + forest(children_of(v), children_of(w)) + relabel(*v, *w));
    memo_[key] = best;
    return best;
  }

  bool content_;
  std::map<std::pair<Forest, Forest>, double> memo_;
};

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("wstab_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace wstab::testutil
