#pragma once
// Dialogue corpus: loading, validation, splitting, and per-turn example
// construction. Everything here is immutable after loading and safe to share
// across threads.

#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace care::corpus {

enum class Speaker { user, system };

enum class EntityKind { item, attribute };

enum class Split { train, valid, test };

struct Utterance {
    Speaker speaker = Speaker::user;
    std::string text;
    int turn_index = 0;
};

struct Dialogue {
    std::string id;
    std::vector<Utterance> utterances;
    // turn_index -> item ids recommended by the system at that turn
    std::map<int, std::set<int>> ground_truth;
};

struct EntityRecord {
    int id = 0;  // dense, 0-based; items occupy the low id range
    std::string canonical_name;
    std::vector<std::string> aliases;  // canonical_name is always aliases[0]
    EntityKind kind = EntityKind::item;
};

struct EntityCatalog {
    std::vector<EntityRecord> records;
    int item_count = 0;
    int attribute_count = 0;

    int size() const { return static_cast<int>(records.size()); }
    bool is_item(int id) const { return id >= 0 && id < item_count; }
    const EntityRecord& record(int id) const { return records.at(static_cast<std::size_t>(id)); }
    const std::string& name(int id) const { return record(id).canonical_name; }

    // Exact lookup by canonical name or alias; -1 when absent. Items win over
    // attributes, then the lower id.
    int find_by_name(const std::string& name) const;
};

struct KGTriple {
    int head = 0;
    int relation = 0;
    int tail = 0;
};

struct RecExample {
    std::string dialogue_id;
    int turn_index = 0;  // the system turn being predicted
    std::vector<Utterance> context;  // all turns strictly before turn_index
    std::set<int> target_items;
    Split split = Split::train;

    std::string example_id() const { return dialogue_id + "#" + std::to_string(turn_index); }
};

struct LoadError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tab-separated catalog with header "kind\tname\taliases"; aliases are
// '|'-separated. Ids are densely renumbered with items first.
EntityCatalog load_catalog(const std::string& path);

// Line-delimited JSON dialogues. Each line:
//   {"id": "...", "turns": [{"speaker": "user"|"system", "text": "...",
//                            "recommends": [name-or-id, ...]}, ...]}
// Ground-truth entries are resolved against the catalog and must be items.
// Failures report the offending line number.
std::vector<Dialogue> load_dialogues(const std::string& path, const EntityCatalog& catalog);

// Inverse of load_dialogues; reloading the output yields structurally
// identical dialogues. Ground truth is written as item ids.
void save_dialogues(const std::string& path, const std::vector<Dialogue>& dialogues,
                    const EntityCatalog& catalog);

// Tab-separated "head\trelation\ttail" with names or ids resolved against the
// catalog. Relation names are interned to dense ids in order of first
// appearance.
std::vector<KGTriple> load_kg(const std::string& path, const EntityCatalog& catalog);

struct SplitRatios {
    int train = 8;
    int valid = 1;
    int test = 1;
};

struct DatasetSplit {
    std::vector<Dialogue> train;
    std::vector<Dialogue> valid;
    std::vector<Dialogue> test;
};

// Deterministic dialogue-level split: ids are sorted lexicographically, then
// Fisher-Yates shuffled with the seeded generator, then cut by largest
// remainder so sizes stay within +-1 of the exact proportions.
DatasetSplit split_dataset(const std::vector<Dialogue>& dialogues, SplitRatios ratios,
                           std::uint64_t seed);

// One example per (dialogue, system turn with ground truth). Turns with an
// empty context prefix are skipped.
std::vector<RecExample> make_examples(const std::vector<Dialogue>& dialogues, Split split);

std::vector<RecExample> make_examples(const DatasetSplit& split);

const char* split_name(Split s);
const char* speaker_name(Speaker s);

}  // namespace care::corpus
