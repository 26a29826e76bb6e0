#pragma once

#include <algorithm>
#include <string>
#include <vector>

namespace patchtraj {

enum class selection_strategy { sas, mkml };

inline const char* to_string(selection_strategy s) { return s == selection_strategy::sas ? "sas" : "mkml"; }

struct ranking_entry {
  int index{0};      // position in the atlas list the ranking was built from
  int subject_id{0};
  double score{0.0}; // predicted error (sas) or similarity (mkml)
};

// Sorted ascending by score for sas, descending for mkml; equal scores are
// ordered by subject id.
struct atlas_ranking {
  selection_strategy strategy{selection_strategy::sas};
  std::vector<ranking_entry> entries;

  std::size_t size() const { return entries.size(); }
  const ranking_entry& operator[](std::size_t i) const { return entries[i]; }
};

inline void sort_ranking(atlas_ranking& r) {
  const bool ascending = r.strategy == selection_strategy::sas;
  std::stable_sort(r.entries.begin(), r.entries.end(), [ascending](const ranking_entry& a, const ranking_entry& b) {
    if (a.score != b.score) return ascending ? a.score < b.score : a.score > b.score;
    return a.subject_id < b.subject_id;
  });
}

} // namespace patchtraj
