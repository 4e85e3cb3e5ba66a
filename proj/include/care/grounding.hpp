#pragma once
// Grounding free-text LLM replies onto the catalog: parse ranked titles,
// fuzzy-match each via normalized Levenshtein distance, flag out-of-domain
// entries, and enforce per-strategy candidate constraints.

#include <optional>
#include <string>
#include <vector>

#include "care/corpus.hpp"

namespace care::ground {

enum class Engagement { expansion, rerank, select_rerank };

struct MatcherConfig {
    double theta = 0.2;  // normalized-distance threshold in [0, 1]
};

struct GroundedEntry {
    std::string raw_title;
    std::optional<int> matched_item;
    bool ood = false;  // true iff matched_item is absent
    int source_rank = 0;  // 1-based rank in the parsed reply
};

struct RankedList {
    std::vector<GroundedEntry> entries;
    Engagement strategy = Engagement::expansion;

    std::vector<int> matched_ids() const;
};

// Extracts titles from lines shaped "<int>. title", "<int>) title" or
// "- title", in order, stripping the prefix plus surrounding whitespace and
// quotes. Stops after n_max titles; other lines are ignored.
std::vector<std::string> parse_ranked_list(const std::string& text, std::size_t n_max);

// Classic unit-cost edit distance.
int levenshtein(const std::string& a, const std::string& b);

// Best catalog item for a raw title, or nullopt when the minimal normalized
// distance d / max(len) over every item alias exceeds theta. Titles and
// aliases are normalized (lowercase, punctuation stripped, trailing year
// removed) before comparison. Ties: smaller raw distance, then lower item id.
std::optional<int> match_item(const std::string& raw_title, const corpus::EntityCatalog& catalog,
                              const MatcherConfig& config);

// Candidate ids a constrained strategy may return; order carries scores but
// only membership matters here.
struct CandidateIds {
    std::vector<int> ids;
    bool contains(int id) const;
};

// Full grounding pass: match, dedup (first occurrence of a matched id wins),
// re-mark out-of-candidate matches as OOD under rerank/select_rerank, and
// truncate to n entries.
RankedList ground_list(const std::vector<std::string>& raw_titles,
                       const corpus::EntityCatalog& catalog,
                       const std::optional<CandidateIds>& candidates, Engagement strategy,
                       const MatcherConfig& config, std::size_t n);

const char* engagement_name(Engagement e);
Engagement engagement_from_name(const std::string& name);

}  // namespace care::ground
