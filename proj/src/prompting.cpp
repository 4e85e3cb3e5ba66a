#include "care/prompting.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "care/text.hpp"

namespace care::prompt {

namespace {

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    std::size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

std::string unescape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && i + 1 < s.size()) {
            if (s[i + 1] == 'n') {
                out.push_back('\n');
                ++i;
                continue;
            }
            if (s[i + 1] == '\\') {
                out.push_back('\\');
                ++i;
                continue;
            }
        }
        out.push_back(s[i]);
    }
    return out;
}

}  // namespace

StrategyConfig StrategyConfig::make(Adaptation m, Engagement s, std::optional<int> k, int n,
                                    InputMode mode) {
    StrategyConfig c;
    c.adaptation = m;
    c.engagement = s;
    c.n = n;
    c.input_mode = mode;
    if (k) {
        c.k = *k;
    } else {
        switch (s) {
            case Engagement::expansion: c.k = 10; break;
            case Engagement::rerank: c.k = n; break;
            case Engagement::select_rerank: c.k = 100; break;
        }
    }
    c.validate();
    return c;
}

void StrategyConfig::validate() const {
    if (k < 0 || n < 1) throw std::invalid_argument("k must be >= 0 and n >= 1");
    if (engagement == Engagement::rerank && k != n) {
        throw std::invalid_argument("rerank requires k == n (got k=" + std::to_string(k) +
                                    ", n=" + std::to_string(n) + ")");
    }
}

std::string StrategyConfig::id() const {
    std::ostringstream out;
    out << "m=" << adaptation_name(adaptation) << ",s=" << ground::engagement_name(engagement)
        << ",k=" << k << ",n=" << n << ",mode=" << input_mode_name(input_mode);
    return out.str();
}

PromptTemplates PromptTemplates::defaults() {
    PromptTemplates t;
    t.role = "You are a movie recommender system interacting with a user.";
    t.format =
        "Output a numbered list of exactly {n} movie titles, one per line, with no other text.";
    t.baseline_task = "Recommend movies the user will enjoy based on the dialogue history.";
    t.task_direct =
        "To help you with the recommendation, we introduce a domain expert who provides some "
        "recommendations based on the training data and you can use the domain expert's "
        "recommendations as examples to generate your output.";
    t.task_description =
        "To help you with the recommendation, we introduce a domain-expert which is a recommender "
        "for sequential modelling that uses the entities mentioned in the dialogues to generate a "
        "ranking list of items.";
    t.task_self_reflection =
        "To help you with the recommendation, you can access an advanced recommendation system "
        "that specializes in enhancing conversational recommendations by leveraging both the "
        "sequence of entities mentioned in a conversation and external knowledge embedded in "
        "knowledge graphs. This system generates diverse suggestions based on the entity "
        "sequence. The system will return a list of movie recommendations that are "
        "entity-relevant, diverse, and informed by the sequence provided and external knowledge "
        "from knowledge graphs.";
    t.strategy_expansion =
        "You may use the domain expert's recommendations as examples to generate additional "
        "recommendations based on the dialogue history. You can generate items beyond the domain "
        "expert's recommendations.";
    t.strategy_rerank =
        "You need to rerank the recommendations, placing the domain expert's suggestions in the "
        "appropriate order based on your understanding of the dialogue history. You cannot "
        "generate items beyond the domain expert's recommendations.";
    t.strategy_select_rerank =
        "You need to select the most appropriate items from the domain expert's recommendations "
        "and rerank them in a ranked order based on dialogue history. You cannot generate items "
        "beyond the domain expert's recommendations.";
    t.candidates_header = "Domain expert's recommendations:";
    return t;
}

PromptTemplates load_templates(const std::string& path, PromptTemplates base) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open template file: " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                     ": expected key=value");
        }
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = unescape(stripped.substr(eq + 1));
        if (key == "role_prompt") base.role = value;
        else if (key == "format_prompt") base.format = value;
        else if (key == "baseline_task") base.baseline_task = value;
        else if (key == "task_direct") base.task_direct = value;
        else if (key == "task_description") base.task_description = value;
        else if (key == "task_self_reflection") base.task_self_reflection = value;
        else if (key == "strategy_expansion") base.strategy_expansion = value;
        else if (key == "strategy_rerank") base.strategy_rerank = value;
        else if (key == "strategy_select_rerank") base.strategy_select_rerank = value;
        else if (key == "candidates_header") base.candidates_header = value;
        else {
            throw std::runtime_error(path + ":" + std::to_string(line_no) + ": unknown key \"" +
                                     key + "\"");
        }
    }
    return base;
}

std::string adaptation_prompt(Adaptation m, const PromptTemplates& t) {
    switch (m) {
        case Adaptation::direct: return t.task_direct;
        case Adaptation::description: return t.task_description;
        case Adaptation::self_reflection: return t.task_self_reflection;
    }
    throw std::invalid_argument("unknown adaptation method");
}

std::string strategy_prompt(Engagement s, const PromptTemplates& t) {
    switch (s) {
        case Engagement::expansion: return t.strategy_expansion;
        case Engagement::rerank: return t.strategy_rerank;
        case Engagement::select_rerank: return t.strategy_select_rerank;
    }
    throw std::invalid_argument("unknown engagement strategy");
}

std::string render_conversation(const std::vector<corpus::Utterance>& context, InputMode mode,
                                const corpus::EntityCatalog& catalog,
                                const linker::LinkIndex& index) {
    std::ostringstream out;
    if (mode == InputMode::items_only) {
        bool first = true;
        for (const corpus::Utterance& utt : context) {
            for (const linker::EntityMention& m : linker::link_utterance(utt.text, index)) {
                if (!catalog.is_item(m.entity_id)) continue;
                if (!first) out << "; ";
                out << catalog.name(m.entity_id);
                first = false;
            }
        }
        return out.str();
    }

    bool first_line = true;
    for (const corpus::Utterance& utt : context) {
        if (!first_line) out << "\n";
        first_line = false;
        out << (utt.speaker == corpus::Speaker::user ? "User: " : "System: ");
        if (mode == InputMode::full_conversation) {
            out << utt.text;
            continue;
        }
        // context_only: item spans become the "[ITEM]" placeholder
        std::string masked;
        std::size_t cursor = 0;
        for (const linker::EntityMention& m : linker::link_utterance(utt.text, index)) {
            if (!catalog.is_item(m.entity_id)) continue;
            masked += utt.text.substr(cursor, m.begin - cursor);
            masked += "[ITEM]";
            cursor = m.end;
        }
        masked += utt.text.substr(cursor);
        out << masked;
    }
    return out.str();
}

std::string serialize_candidates(const rec::CandidateSet& cands,
                                 const corpus::EntityCatalog& catalog) {
    std::ostringstream out;
    for (std::size_t i = 0; i < cands.entries.size(); ++i) {
        if (i > 0) out << "\n";
        out << (i + 1) << ". " << catalog.name(cands.entries[i].item_id);
    }
    return out.str();
}

PromptBundle assemble(const StrategyConfig& config, const std::vector<corpus::Utterance>& context,
                      const std::optional<rec::CandidateSet>& candidates,
                      const corpus::EntityCatalog& catalog, const linker::LinkIndex& index,
                      const PromptTemplates& templates) {
    config.validate();
    const bool constrained =
        config.engagement == Engagement::rerank || config.engagement == Engagement::select_rerank;
    if (constrained && !candidates) {
        throw std::invalid_argument("engagement strategy requires a candidate set");
    }
    if (candidates) {
        const std::size_t expected =
            std::min<std::size_t>(static_cast<std::size_t>(config.k),
                                  static_cast<std::size_t>(catalog.item_count));
        if (candidates->entries.size() != expected) {
            throw std::invalid_argument(
                "candidate count mismatch: got " + std::to_string(candidates->entries.size()) +
                ", config k=" + std::to_string(config.k));
        }
    }

    PromptBundle bundle;
    bundle.role = templates.role;
    bundle.task = candidates ? adaptation_prompt(config.adaptation, templates) + " " +
                                   strategy_prompt(config.engagement, templates)
                             : templates.baseline_task;
    bundle.format = replace_all(templates.format, "{n}", std::to_string(config.n));
    bundle.conversation_block = render_conversation(context, config.input_mode, catalog, index);
    if (candidates) {
        bundle.candidates_block = templates.candidates_header;
        const std::string lines = serialize_candidates(*candidates, catalog);
        if (!lines.empty()) bundle.candidates_block += "\n" + lines;
    }

    std::ostringstream assembled;
    bool first = true;
    for (const std::string* part : {&bundle.role, &bundle.task, &bundle.format,
                                    &bundle.conversation_block, &bundle.candidates_block}) {
        if (part->empty()) continue;
        if (!first) assembled << "\n\n";
        assembled << *part;
        first = false;
    }
    bundle.assembled = assembled.str();
    return bundle;
}

std::string self_reflect(const std::vector<std::string>& resources,
                         const std::function<std::string(const std::string&)>& llm,
                         int max_rounds) {
    if (resources.empty()) throw std::invalid_argument("self_reflect needs at least one resource");
    if (max_rounds < 1) throw std::invalid_argument("max_rounds must be >= 1");

    std::string draft;
    for (int round = 0; round < max_rounds; ++round) {
        const std::string& resource = resources[static_cast<std::size_t>(round) % resources.size()];
        std::ostringstream p;
        p << "You are writing a task prompt that describes an external recommender system.\n"
          << "Examine the following resource of the recommender:\n"
          << resource << "\n\n";
        if (draft.empty()) {
            p << "Write a draft description of the recommender for use in a prompt.\n";
        } else {
            p << "Previous draft:\n" << draft << "\n\n"
              << "Correct the draft or regenerate a new one based on the resource.\n";
        }
        p << "If you are confident the description is complete and accurate, reply with "
             "CONFIDENT followed by the final text.";

        const std::string reply = llm(p.str());
        const std::size_t pos = reply.find("CONFIDENT");
        if (pos != std::string::npos) {
            std::string rest = reply.substr(pos + 9);
            std::size_t b = 0;
            while (b < rest.size() &&
                   (rest[b] == ':' || std::isspace(static_cast<unsigned char>(rest[b])))) {
                ++b;
            }
            rest = trim(rest.substr(b));
            if (!rest.empty()) return rest;
            const std::string before = trim(reply.substr(0, pos));
            return before.empty() ? draft : before;
        }
        draft = reply;
    }
    return draft;
}

const char* adaptation_name(Adaptation m) {
    switch (m) {
        case Adaptation::direct: return "direct";
        case Adaptation::description: return "description";
        case Adaptation::self_reflection: return "self_reflection";
    }
    return "?";
}

Adaptation adaptation_from_name(const std::string& name) {
    if (name == "direct") return Adaptation::direct;
    if (name == "description") return Adaptation::description;
    if (name == "self_reflection") return Adaptation::self_reflection;
    throw std::invalid_argument("unknown adaptation method: " + name);
}

const char* input_mode_name(InputMode mode) {
    switch (mode) {
        case InputMode::full_conversation: return "full_conversation";
        case InputMode::items_only: return "items_only";
        case InputMode::context_only: return "context_only";
    }
    return "?";
}

InputMode input_mode_from_name(const std::string& name) {
    if (name == "full_conversation") return InputMode::full_conversation;
    if (name == "items_only") return InputMode::items_only;
    if (name == "context_only") return InputMode::context_only;
    throw std::invalid_argument("unknown input mode: " + name);
}

}  // namespace care::prompt
