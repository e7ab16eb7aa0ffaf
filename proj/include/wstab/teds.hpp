#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "wstab/table_model.hpp"

namespace wstab {

enum class TedsMode {
  Full,    // cell text compared by normalized Levenshtein distance
  Struct,  // cell text ignored
};

/// Levenshtein distance over bytes divided by the longer length; 0 for two
/// empty strings.
double normalized_levenshtein(std::string_view a, std::string_view b);

/// Relabel cost between two nodes: 0/1 on tag or span mismatch, fractional on
/// differing cell text in full mode.
double relabel_cost(const TableNode& a, const TableNode& b, TedsMode mode);

/// Ordered tree edit distance (Zhang-Shasha) with unit insert/delete.
double tree_edit_distance(const TableTree& a, const TableTree& b, TedsMode mode);

struct TedsScore {
  double value = 1.0;
  double edit_distance = 0.0;
  std::size_t size_a = 0;
  std::size_t size_b = 0;
};

TedsScore teds(const TableTree& a, const TableTree& b, TedsMode mode = TedsMode::Full);
inline TedsScore teds_struct(const TableTree& a, const TableTree& b) { return teds(a, b, TedsMode::Struct); }

/// Round-trips through the canonical HTML form before scoring.
TableTree canonicalize(const TableTree& tree);

struct SampleScore {
  std::string id;
  Complexity complexity = Complexity::Simple;
  bool predicted = false;
  double teds = 0.0;
  double teds_struct = 0.0;
};

struct BucketMeans {
  double simple = 0.0;
  double complex = 0.0;
  double all = 0.0;
};

struct ScoreReport {
  std::size_t n = 0;
  std::size_t n_simple = 0;
  std::size_t n_complex = 0;
  BucketMeans teds;
  BucketMeans teds_struct;
  std::vector<SampleScore> per_sample;  // sorted by id

  std::string to_json(int indent = 2) const;
};

struct IdHtml {
  std::string id;
  std::string html;
};

/// Scores predictions against ground truth. Missing predictions score 0 and
/// predictions are parsed in repair mode. Throws DuplicateId.
ScoreReport score_records(const std::vector<IdHtml>& predictions, const std::vector<IdHtml>& ground_truth,
                          unsigned threads = 1);

struct ScoreOptions {
  std::string split;  // when non-empty, only ground-truth records of this split
  unsigned threads = 1;
};

/// Reads `{"id", "html"}` JSONL files. Throws FileNotFound / DuplicateId.
ScoreReport score_batch(const std::filesystem::path& pred_file, const std::filesystem::path& gt_file,
                        const ScoreOptions& options = {});

}  // namespace wstab
