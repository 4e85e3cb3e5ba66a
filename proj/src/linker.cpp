#include "care/linker.hpp"

#include <algorithm>

#include "care/text.hpp"

namespace care::linker {

LinkIndex LinkIndex::build(const corpus::EntityCatalog& catalog) {
    LinkIndex index;
    index.id_is_item_.resize(static_cast<std::size_t>(catalog.size()));
    for (const corpus::EntityRecord& rec : catalog.records) {
        index.id_is_item_[static_cast<std::size_t>(rec.id)] = rec.kind == corpus::EntityKind::item;
        for (const std::string& alias : rec.aliases) {
            std::vector<std::string> variants{normalize_title(alias)};
            const std::string without_year = strip_year_suffix(alias);
            if (without_year != alias) {
                variants.push_back(normalize_title(without_year));
            }
            for (const std::string& v : variants) {
                if (v.empty()) continue;
                auto& ids = index.aliases_[v];
                if (std::find(ids.begin(), ids.end(), rec.id) == ids.end()) {
                    ids.push_back(rec.id);
                }
                const std::size_t tokens =
                    1 + static_cast<std::size_t>(std::count(v.begin(), v.end(), ' '));
                index.max_alias_tokens_ = std::max(index.max_alias_tokens_, tokens);
            }
        }
    }
    return index;
}

const std::vector<int>* LinkIndex::lookup(const std::string& normalized) const {
    auto it = aliases_.find(normalized);
    return it == aliases_.end() ? nullptr : &it->second;
}

int LinkIndex::resolve(const std::vector<int>& candidates) const {
    int best = -1;
    for (int id : candidates) {
        if (best < 0) {
            best = id;
            continue;
        }
        const bool id_item = id_is_item_[static_cast<std::size_t>(id)];
        const bool best_item = id_is_item_[static_cast<std::size_t>(best)];
        if (id_item != best_item) {
            if (id_item) best = id;
        } else if (id < best) {
            best = id;
        }
    }
    return best;
}

std::vector<EntityMention> link_utterance(const std::string& text, const LinkIndex& index) {
    std::vector<EntityMention> mentions;
    const std::vector<Token> tokens = tokenize(text);
    std::size_t i = 0;
    while (i < tokens.size()) {
        std::size_t window = std::min(index.max_alias_tokens(), tokens.size() - i);
        bool matched = false;
        for (std::size_t len = window; len >= 1; --len) {
            std::string key;
            for (std::size_t j = 0; j < len; ++j) {
                if (j > 0) key.push_back(' ');
                key += tokens[i + j].lowered;
            }
            const std::vector<int>* ids = index.lookup(key);
            if (ids == nullptr) continue;

            EntityMention mention;
            mention.entity_id = index.resolve(*ids);
            mention.begin = tokens[i].begin;
            mention.end = tokens[i + len - 1].end;
            mention.surface = text.substr(mention.begin, mention.end - mention.begin);
            mentions.push_back(std::move(mention));
            i += len;
            matched = true;
            break;
        }
        if (!matched) ++i;
    }
    return mentions;
}

EntitySequence extract_sequence(const std::vector<corpus::Utterance>& context,
                                const LinkIndex& index, std::size_t max_len) {
    EntitySequence seq;
    for (const corpus::Utterance& utt : context) {
        for (const EntityMention& mention : link_utterance(utt.text, index)) {
            seq.entries.push_back(mention.entity_id);
        }
    }
    if (seq.entries.size() > max_len) {
        seq.entries.erase(seq.entries.begin(),
                          seq.entries.end() - static_cast<std::ptrdiff_t>(max_len));
    }
    return seq;
}

}  // namespace care::linker
