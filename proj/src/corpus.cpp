#include "care/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "care/rng.hpp"
#include "care/text.hpp"
#include "json.hpp"

namespace care::corpus {

namespace {

using nlohmann::json;

std::vector<std::string> split_tabs(const std::string& line) {
    std::vector<std::string> cols;
    std::size_t start = 0;
    while (true) {
        std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            cols.push_back(line.substr(start));
            break;
        }
        cols.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return cols;
}

[[noreturn]] void fail_line(const std::string& path, std::size_t line_no, const std::string& why) {
    throw LoadError(path + ":" + std::to_string(line_no) + ": " + why);
}

// Accepts an integer item id or a catalog name/alias; must resolve to an item.
int resolve_item(const std::string& path, std::size_t line_no, const json& value,
                 const EntityCatalog& catalog) {
    if (value.is_number_integer()) {
        int id = value.get<int>();
        if (!catalog.is_item(id)) {
            fail_line(path, line_no, "unknown item id " + std::to_string(id) + " in recommends");
        }
        return id;
    }
    if (value.is_string()) {
        const std::string name = value.get<std::string>();
        int id = catalog.find_by_name(name);
        if (id < 0 || !catalog.is_item(id)) {
            fail_line(path, line_no, "unknown item \"" + name + "\" in recommends");
        }
        return id;
    }
    fail_line(path, line_no, "recommends entries must be names or integer ids");
}

}  // namespace

int EntityCatalog::find_by_name(const std::string& name) const {
    int best = -1;
    for (const EntityRecord& rec : records) {
        for (const std::string& alias : rec.aliases) {
            if (alias == name) {
                if (best < 0) {
                    best = rec.id;
                } else {
                    const EntityRecord& cur = record(best);
                    if (rec.kind == EntityKind::item && cur.kind != EntityKind::item) {
                        best = rec.id;
                    } else if (rec.kind == cur.kind && rec.id < best) {
                        best = rec.id;
                    }
                }
            }
        }
    }
    return best;
}

EntityCatalog load_catalog(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open catalog file: " + path);

    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw LoadError(path + ": missing header line");
    ++line_no;
    if (split_tabs(line) != std::vector<std::string>{"kind", "name", "aliases"}) {
        fail_line(path, line_no, "expected header \"kind\\tname\\taliases\"");
    }

    struct Raw {
        EntityKind kind;
        std::string name;
        std::vector<std::string> aliases;
    };
    std::vector<Raw> items, attributes;
    std::set<std::string> seen_items, seen_attributes;

    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto cols = split_tabs(line);
        if (cols.size() != 3) fail_line(path, line_no, "expected 3 tab-separated columns");

        Raw raw;
        if (cols[0] == "item") {
            raw.kind = EntityKind::item;
        } else if (cols[0] == "attribute") {
            raw.kind = EntityKind::attribute;
        } else {
            fail_line(path, line_no, "kind must be \"item\" or \"attribute\", got \"" + cols[0] + "\"");
        }
        raw.name = trim(cols[1]);
        if (raw.name.empty()) fail_line(path, line_no, "empty canonical name");

        auto& seen = raw.kind == EntityKind::item ? seen_items : seen_attributes;
        if (!seen.insert(raw.name).second) {
            fail_line(path, line_no, "duplicate canonical name \"" + raw.name + "\"");
        }

        raw.aliases.push_back(raw.name);
        std::stringstream aliases(cols[2]);
        std::string alias;
        bool column_empty = trim(cols[2]).empty();
        while (!column_empty && std::getline(aliases, alias, '|')) {
            alias = trim(alias);
            if (alias.empty()) fail_line(path, line_no, "empty alias");
            if (std::find(raw.aliases.begin(), raw.aliases.end(), alias) == raw.aliases.end()) {
                raw.aliases.push_back(alias);
            }
        }
        (raw.kind == EntityKind::item ? items : attributes).push_back(std::move(raw));
    }

    EntityCatalog catalog;
    catalog.item_count = static_cast<int>(items.size());
    catalog.attribute_count = static_cast<int>(attributes.size());
    int next_id = 0;
    for (auto* group : {&items, &attributes}) {
        for (Raw& raw : *group) {
            EntityRecord rec;
            rec.id = next_id++;
            rec.canonical_name = std::move(raw.name);
            rec.aliases = std::move(raw.aliases);
            rec.kind = raw.kind;
            catalog.records.push_back(std::move(rec));
        }
    }
    return catalog;
}

std::vector<Dialogue> load_dialogues(const std::string& path, const EntityCatalog& catalog) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open dialogue file: " + path);

    std::vector<Dialogue> dialogues;
    std::set<std::string> seen_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;

        json record;
        try {
            record = json::parse(line);
        } catch (const json::parse_error& e) {
            fail_line(path, line_no, std::string("invalid JSON: ") + e.what());
        }
        if (!record.is_object() || !record.contains("id") || !record["id"].is_string()) {
            fail_line(path, line_no, "missing string field \"id\"");
        }
        if (!record.contains("turns") || !record["turns"].is_array()) {
            fail_line(path, line_no, "missing array field \"turns\"");
        }

        Dialogue dlg;
        dlg.id = record["id"].get<std::string>();
        if (!seen_ids.insert(dlg.id).second) {
            fail_line(path, line_no, "duplicate dialogue id \"" + dlg.id + "\"");
        }

        int turn_index = 0;
        for (const json& turn : record["turns"]) {
            if (!turn.is_object() || !turn.contains("speaker") || !turn["speaker"].is_string()) {
                fail_line(path, line_no, "turn " + std::to_string(turn_index) +
                                             " missing string field \"speaker\"");
            }
            if (!turn.contains("text") || !turn["text"].is_string()) {
                fail_line(path, line_no,
                          "turn " + std::to_string(turn_index) + " missing string field \"text\"");
            }
            Utterance utt;
            const std::string speaker = turn["speaker"].get<std::string>();
            if (speaker == "user") {
                utt.speaker = Speaker::user;
            } else if (speaker == "system") {
                utt.speaker = Speaker::system;
            } else {
                fail_line(path, line_no, "speaker must be \"user\" or \"system\", got \"" + speaker + "\"");
            }
            utt.text = turn["text"].get<std::string>();
            if (trim(utt.text).empty()) {
                fail_line(path, line_no, "turn " + std::to_string(turn_index) + " has empty text");
            }
            utt.turn_index = turn_index;

            if (turn.contains("recommends")) {
                if (!turn["recommends"].is_array()) {
                    fail_line(path, line_no, "\"recommends\" must be an array");
                }
                std::set<int> targets;
                for (const json& value : turn["recommends"]) {
                    targets.insert(resolve_item(path, line_no, value, catalog));
                }
                if (!targets.empty()) {
                    if (utt.speaker != Speaker::system) {
                        fail_line(path, line_no, "turn " + std::to_string(turn_index) +
                                                     ": only system turns may recommend items");
                    }
                    dlg.ground_truth[turn_index] = std::move(targets);
                }
            }
            dlg.utterances.push_back(std::move(utt));
            ++turn_index;
        }
        dialogues.push_back(std::move(dlg));
    }
    return dialogues;
}

void save_dialogues(const std::string& path, const std::vector<Dialogue>& dialogues,
                    const EntityCatalog& catalog) {
    (void)catalog;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw LoadError("cannot write dialogue file: " + path);
    for (const Dialogue& dlg : dialogues) {
        json turns = json::array();
        for (const Utterance& utt : dlg.utterances) {
            json turn;
            turn["speaker"] = speaker_name(utt.speaker);
            turn["text"] = utt.text;
            auto gt = dlg.ground_truth.find(utt.turn_index);
            if (gt != dlg.ground_truth.end()) {
                turn["recommends"] = gt->second;
            }
            turns.push_back(std::move(turn));
        }
        json record;
        record["id"] = dlg.id;
        record["turns"] = std::move(turns);
        out << record.dump() << "\n";
    }
}

std::vector<KGTriple> load_kg(const std::string& path, const EntityCatalog& catalog) {
    std::ifstream in(path);
    if (!in) throw LoadError("cannot open kg file: " + path);

    auto resolve_entity = [&](const std::string& token, std::size_t line_no) {
        const std::string trimmed = trim(token);
        if (!trimmed.empty() &&
            std::all_of(trimmed.begin(), trimmed.end(),
                        [](unsigned char c) { return std::isdigit(c) != 0; })) {
            int id = std::stoi(trimmed);
            if (id >= catalog.size()) fail_line(path, line_no, "entity id out of range: " + trimmed);
            return id;
        }
        int id = catalog.find_by_name(trimmed);
        if (id < 0) fail_line(path, line_no, "unknown entity \"" + trimmed + "\"");
        return id;
    };

    std::vector<KGTriple> triples;
    std::unordered_map<std::string, int> relation_ids;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        auto cols = split_tabs(line);
        if (cols.size() != 3) fail_line(path, line_no, "expected 3 tab-separated columns");

        KGTriple triple;
        triple.head = resolve_entity(cols[0], line_no);
        triple.tail = resolve_entity(cols[2], line_no);
        if (triple.head == triple.tail) {
            fail_line(path, line_no, "self-loop triple on entity " + std::to_string(triple.head));
        }
        auto [it, _] =
            relation_ids.try_emplace(trim(cols[1]), static_cast<int>(relation_ids.size()));
        triple.relation = it->second;
        triples.push_back(triple);
    }
    return triples;
}

DatasetSplit split_dataset(const std::vector<Dialogue>& dialogues, SplitRatios ratios,
                           std::uint64_t seed) {
    if (ratios.train <= 0 || ratios.valid <= 0 || ratios.test <= 0) {
        throw std::invalid_argument("split ratios must be positive");
    }
    const std::size_t n = dialogues.size();
    if (n < 3) throw std::invalid_argument("need at least 3 dialogues to form 3 partitions");

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return dialogues[a].id < dialogues[b].id;
    });
    Rng rng(seed);
    rng.shuffle(order);

    // Largest-remainder apportionment; ties go to the earlier partition.
    const double total = static_cast<double>(ratios.train + ratios.valid + ratios.test);
    const double exact[3] = {n * ratios.train / total, n * ratios.valid / total,
                             n * ratios.test / total};
    std::size_t counts[3];
    double fractions[3];
    std::size_t assigned = 0;
    for (int i = 0; i < 3; ++i) {
        counts[i] = static_cast<std::size_t>(exact[i]);
        fractions[i] = exact[i] - static_cast<double>(counts[i]);
        assigned += counts[i];
    }
    while (assigned < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i) {
            if (fractions[i] > fractions[best]) best = i;
        }
        ++counts[best];
        fractions[best] = -1.0;
        ++assigned;
    }

    DatasetSplit result;
    std::size_t pos = 0;
    for (int part = 0; part < 3; ++part) {
        auto& bucket = part == 0 ? result.train : part == 1 ? result.valid : result.test;
        for (std::size_t i = 0; i < counts[part]; ++i) {
            bucket.push_back(dialogues[order[pos++]]);
        }
    }
    return result;
}

std::vector<RecExample> make_examples(const std::vector<Dialogue>& dialogues, Split split) {
    std::vector<RecExample> examples;
    for (const Dialogue& dlg : dialogues) {
        for (const auto& [turn_index, targets] : dlg.ground_truth) {
            if (turn_index == 0) continue;  // no prior context
            RecExample ex;
            ex.dialogue_id = dlg.id;
            ex.turn_index = turn_index;
            ex.context.assign(dlg.utterances.begin(), dlg.utterances.begin() + turn_index);
            ex.target_items = targets;
            ex.split = split;
            examples.push_back(std::move(ex));
        }
    }
    return examples;
}

std::vector<RecExample> make_examples(const DatasetSplit& split) {
    std::vector<RecExample> all = make_examples(split.train, Split::train);
    for (auto& ex : make_examples(split.valid, Split::valid)) all.push_back(std::move(ex));
    for (auto& ex : make_examples(split.test, Split::test)) all.push_back(std::move(ex));
    return all;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
    }
    return "?";
}

const char* speaker_name(Speaker s) {
    return s == Speaker::user ? "user" : "system";
}

}  // namespace care::corpus
