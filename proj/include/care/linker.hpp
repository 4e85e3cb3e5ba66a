#pragma once
// Dictionary-based entity extraction: normalized alias index plus a greedy
// longest-match scan over token windows. The index is immutable after build;
// linking is pure.

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "care/corpus.hpp"

namespace care::linker {

constexpr int kDefaultMaxSequenceLength = 50;

struct EntityMention {
    int entity_id = 0;
    std::size_t begin = 0;  // byte span into the source text, end exclusive
    std::size_t end = 0;
    std::string surface;
};

struct EntitySequence {
    std::vector<int> entries;  // items and attributes interleaved, mention order

    bool empty() const { return entries.empty(); }
    std::size_t size() const { return entries.size(); }
};

class LinkIndex {
public:
    // Indexes every alias under its normalized form; aliases carrying a
    // trailing "(NNNN)" year are additionally indexed without it.
    static LinkIndex build(const corpus::EntityCatalog& catalog);

    // Entity ids whose normalized alias equals `normalized`, unordered.
    const std::vector<int>* lookup(const std::string& normalized) const;

    std::size_t max_alias_tokens() const { return max_alias_tokens_; }
    std::size_t alias_count() const { return aliases_.size(); }

    // Tie-break for ambiguous aliases: items before attributes, then lower id.
    int resolve(const std::vector<int>& candidates) const;

private:
    std::unordered_map<std::string, std::vector<int>> aliases_;
    std::vector<bool> id_is_item_;
    std::size_t max_alias_tokens_ = 0;
};

// Greedy longest-match-first scan on word boundaries. Returned mentions are
// non-overlapping and ordered by start position.
std::vector<EntityMention> link_utterance(const std::string& text, const LinkIndex& index);

// Mentions from all context utterances concatenated in dialogue order,
// repeats preserved, truncated to the most recent max_len entries.
EntitySequence extract_sequence(const std::vector<corpus::Utterance>& context,
                                const LinkIndex& index,
                                std::size_t max_len = kDefaultMaxSequenceLength);

}  // namespace care::linker
