#pragma once
// Prompt assembly: role/format components, the three recommender-adaptation
// task prompts, the three contextual-engagement strategy prompts, candidate
// serialization, and input-ablation rendering of the conversation. Assembly
// is a pure function of its inputs.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "care/corpus.hpp"
#include "care/grounding.hpp"
#include "care/linker.hpp"
#include "care/seqrec.hpp"

namespace care::prompt {

enum class Adaptation { direct, description, self_reflection };

enum class InputMode { full_conversation, items_only, context_only };

using ground::Engagement;

struct StrategyConfig {
    Adaptation adaptation = Adaptation::description;
    Engagement engagement = Engagement::select_rerank;
    int k = 100;  // candidate count; engagement-specific defaults below
    int n = 20;   // requested output count
    InputMode input_mode = InputMode::full_conversation;

    // Applies the per-engagement default candidate count: expansion 10,
    // rerank n, select_rerank 100. Explicit k wins where legal.
    static StrategyConfig make(Adaptation m, Engagement s, std::optional<int> k = std::nullopt,
                               int n = 20, InputMode mode = InputMode::full_conversation);

    void validate() const;  // rerank requires k == n
    std::string id() const;  // compact "m=...,s=...,k=...,n=..." tag
};

// Template texts; every field can be overridden from a key-value config file.
struct PromptTemplates {
    std::string role;
    std::string format;  // "{n}" expands to the requested output count
    std::string baseline_task;
    std::string task_direct;
    std::string task_description;
    std::string task_self_reflection;
    std::string strategy_expansion;
    std::string strategy_rerank;
    std::string strategy_select_rerank;
    std::string candidates_header;

    static PromptTemplates defaults();
};

// Lines of "key=value"; '#' starts a comment, "\n" in values expands to a
// newline. Unknown keys are rejected.
PromptTemplates load_templates(const std::string& path, PromptTemplates base = PromptTemplates::defaults());

struct PromptBundle {
    std::string role;
    std::string task;
    std::string format;
    std::string conversation_block;
    std::string candidates_block;  // empty iff no candidate set was supplied
    std::string assembled;
};

std::string adaptation_prompt(Adaptation m, const PromptTemplates& t = PromptTemplates::defaults());
std::string strategy_prompt(Engagement s, const PromptTemplates& t = PromptTemplates::defaults());

// full_conversation: "User:"/"System:" prefixed lines. items_only:
// semicolon-joined canonical names of linked item entities in mention order.
// context_only: prefixed lines with every linked item span replaced by
// "[ITEM]".
std::string render_conversation(const std::vector<corpus::Utterance>& context, InputMode mode,
                                const corpus::EntityCatalog& catalog,
                                const linker::LinkIndex& index);

// Numbered lines "1. <name>" .. "k. <name>" in rank order, no scores.
std::string serialize_candidates(const rec::CandidateSet& cands,
                                 const corpus::EntityCatalog& catalog);

// Final prompt: role, task, format, conversation, candidates joined by blank
// lines. With candidates the task is the adaptation + strategy pair; without
// them the baseline task yields the zero-shot prompt shape.
PromptBundle assemble(const StrategyConfig& config, const std::vector<corpus::Utterance>& context,
                      const std::optional<rec::CandidateSet>& candidates,
                      const corpus::EntityCatalog& catalog, const linker::LinkIndex& index,
                      const PromptTemplates& templates = PromptTemplates::defaults());

// Iteratively shows the LLM each resource plus its previous draft and asks it
// to correct or regenerate a recommender description. Stops when a reply
// contains the literal marker "CONFIDENT" or after max_rounds; returns the
// final draft.
std::string self_reflect(const std::vector<std::string>& resources,
                         const std::function<std::string(const std::string&)>& llm,
                         int max_rounds);

const char* adaptation_name(Adaptation m);
Adaptation adaptation_from_name(const std::string& name);
const char* input_mode_name(InputMode mode);
InputMode input_mode_from_name(const std::string& name);

}  // namespace care::prompt
