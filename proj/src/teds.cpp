#include "wstab/teds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "wstab/error.hpp"
#include "wstab/jsonl.hpp"
#include "wstab/parallel.hpp"

namespace wstab {

double normalized_levenshtein(std::string_view a, std::string_view b) {
  std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 0.0;
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[b.size()]) / static_cast<double>(longest);
}

double relabel_cost(const TableNode& a, const TableNode& b, TedsMode mode) {
  if (a.tag != b.tag) return 1.0;
  if (a.tag != Tag::Td) return 0.0;
  if (a.rowspan != b.rowspan || a.colspan != b.colspan) return 1.0;
  if (mode == TedsMode::Struct) return 0.0;
  return normalized_levenshtein(a.content, b.content);
}

namespace {

// Post-order view of a tree with 1-based indices, leftmost-leaf descendants
// and keyroots as required by Zhang-Shasha.
struct Annotated {
  std::vector<const TableNode*> nodes{nullptr};
  std::vector<std::size_t> leftmost{0};
  std::vector<std::size_t> keyroots;

  explicit Annotated(const TableNode& root) {
    visit(root);
    std::size_t n = nodes.size() - 1;
    std::vector<bool> seen(n + 1, false);
    for (std::size_t i = n; i >= 1; --i) {
      if (!seen[leftmost[i]]) {
        keyroots.push_back(i);
        seen[leftmost[i]] = true;
      }
    }
    std::sort(keyroots.begin(), keyroots.end());
  }

  std::size_t visit(const TableNode& node) {
    std::size_t first_leaf = 0;
    for (const auto& child : node.children) {
      std::size_t leaf = visit(child);
      if (first_leaf == 0) first_leaf = leaf;
    }
    nodes.push_back(&node);
    std::size_t self = nodes.size() - 1;
    leftmost.push_back(first_leaf == 0 ? self : first_leaf);
    return leftmost.back();
  }

  std::size_t size() const { return nodes.size() - 1; }
};

}  // namespace

double tree_edit_distance(const TableTree& a, const TableTree& b, TedsMode mode) {
  Annotated ta(a.root), tb(b.root);
  std::size_t n = ta.size(), m = tb.size();
  std::vector<double> treedist((n + 1) * (m + 1), 0.0);
  auto td = [&](std::size_t i, std::size_t j) -> double& { return treedist[i * (m + 1) + j]; };
  std::vector<double> forest;

  for (std::size_t ki : ta.keyroots) {
    for (std::size_t kj : tb.keyroots) {
      std::size_t li = ta.leftmost[ki], lj = tb.leftmost[kj];
      std::size_t rows = ki - li + 2, cols = kj - lj + 2;
      forest.assign(rows * cols, 0.0);
      auto fd = [&](std::size_t x, std::size_t y) -> double& { return forest[x * cols + y]; };
      std::size_t ioff = li - 1, joff = lj - 1;
      for (std::size_t x = 1; x < rows; ++x) fd(x, 0) = fd(x - 1, 0) + 1.0;
      for (std::size_t y = 1; y < cols; ++y) fd(0, y) = fd(0, y - 1) + 1.0;
      for (std::size_t x = 1; x < rows; ++x) {
        for (std::size_t y = 1; y < cols; ++y) {
          std::size_t i = x + ioff, j = y + joff;
          double del = fd(x - 1, y) + 1.0;
          double ins = fd(x, y - 1) + 1.0;
          if (ta.leftmost[i] == li && tb.leftmost[j] == lj) {
            double ren = fd(x - 1, y - 1) + relabel_cost(*ta.nodes[i], *tb.nodes[j], mode);
            fd(x, y) = std::min({del, ins, ren});
            td(i, j) = fd(x, y);
          } else {
            std::size_t p = ta.leftmost[i] - 1 - ioff, q = tb.leftmost[j] - 1 - joff;
            fd(x, y) = std::min({del, ins, fd(p, q) + td(i, j)});
          }
        }
      }
    }
  }
  return td(n, m);
}

TedsScore teds(const TableTree& a, const TableTree& b, TedsMode mode) {
  TedsScore s;
  s.size_a = a.node_count();
  s.size_b = b.node_count();
  s.edit_distance = tree_edit_distance(a, b, mode);
  // unit costs can exceed the larger size on oddly shaped trees
  s.value = std::max(0.0, 1.0 - s.edit_distance / static_cast<double>(std::max(s.size_a, s.size_b)));
  return s;
}

TableTree canonicalize(const TableTree& tree) { return parse_html(to_html(tree)); }

namespace {

double mean_or_nan(double sum, std::size_t n) {
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(n);
}

nlohmann::json number_or_null(double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); }

std::map<std::string, std::string> index_records(const std::vector<IdHtml>& records, std::string_view what) {
  std::map<std::string, std::string> out;
  for (const auto& r : records) {
    if (!out.emplace(r.id, r.html).second) {
      throw Error(Errc::DuplicateId, std::string(what) + " id '" + r.id + "'");
    }
  }
  return out;
}

}  // namespace

ScoreReport score_records(const std::vector<IdHtml>& predictions, const std::vector<IdHtml>& ground_truth,
                          unsigned threads) {
  auto preds = index_records(predictions, "prediction");
  auto gts = index_records(ground_truth, "ground truth");

  ScoreReport report;
  report.per_sample.resize(gts.size());
  std::vector<std::pair<const std::string*, const std::string*>> items;
  items.reserve(gts.size());
  for (const auto& [id, html] : gts) items.emplace_back(&id, &html);

  parallel_for(items.size(), threads, [&](std::size_t k) {
    const auto& id = *items[k].first;
    SampleScore& s = report.per_sample[k];
    s.id = id;
    TableTree gt;
    try {
      gt = canonicalize(parse_html(*items[k].second));
    } catch (const Error& e) {
      throw Error(Errc::DecodeError, "ground truth '" + id + "': " + e.what());
    }
    s.complexity = classify(gt);
    auto it = preds.find(id);
    if (it == preds.end()) return;
    s.predicted = true;
    TableTree pred = canonicalize(parse_html(it->second, ParseMode::Repair));
    s.teds = teds(pred, gt, TedsMode::Full).value;
    s.teds_struct = teds(pred, gt, TedsMode::Struct).value;
  });

  double sum[2][2] = {{0, 0}, {0, 0}};  // [metric][simple/complex]
  for (const auto& s : report.per_sample) {
    int bucket = s.complexity == Complexity::Simple ? 0 : 1;
    sum[0][bucket] += s.teds;
    sum[1][bucket] += s.teds_struct;
    (bucket == 0 ? report.n_simple : report.n_complex)++;
  }
  report.n = report.per_sample.size();
  auto fill = [&](BucketMeans& m, int metric) {
    m.simple = mean_or_nan(sum[metric][0], report.n_simple);
    m.complex = mean_or_nan(sum[metric][1], report.n_complex);
    m.all = mean_or_nan(sum[metric][0] + sum[metric][1], report.n);
  };
  fill(report.teds, 0);
  fill(report.teds_struct, 1);
  return report;
}

std::string ScoreReport::to_json(int indent) const {
  nlohmann::json j;
  j["n"] = n;
  j["n_simple"] = n_simple;
  j["n_complex"] = n_complex;
  auto bucket = [](const BucketMeans& m) {
    return nlohmann::json{{"simple", number_or_null(m.simple)},
                          {"complex", number_or_null(m.complex)},
                          {"all", number_or_null(m.all)}};
  };
  j["teds"] = bucket(teds);
  j["teds_struct"] = bucket(teds_struct);
  auto& rows = j["per_sample"] = nlohmann::json::array();
  for (const auto& s : per_sample) {
    rows.push_back({{"id", s.id},
                    {"class", s.complexity == Complexity::Simple ? "simple" : "complex"},
                    {"predicted", s.predicted},
                    {"teds", s.teds},
                    {"teds_struct", s.teds_struct}});
  }
  return j.dump(indent);
}

namespace {

std::vector<IdHtml> load_id_html(const std::filesystem::path& path, std::string_view split) {
  std::vector<IdHtml> out;
  for (const auto& rec : read_jsonl(path)) {
    if (!rec.contains("id") || !rec.contains("html") || !rec["id"].is_string() || !rec["html"].is_string()) {
      throw Error(Errc::DecodeError, path.string() + ": record without string id/html");
    }
    if (!split.empty() && rec.contains("split") && rec["split"].get<std::string>() != split) continue;
    out.push_back({rec["id"].get<std::string>(), rec["html"].get<std::string>()});
  }
  return out;
}

}  // namespace

ScoreReport score_batch(const std::filesystem::path& pred_file, const std::filesystem::path& gt_file,
                        const ScoreOptions& options) {
  auto gt = load_id_html(gt_file, options.split);
  auto pred = load_id_html(pred_file, {});
  return score_records(pred, gt, options.threads);
}

}  // namespace wstab
