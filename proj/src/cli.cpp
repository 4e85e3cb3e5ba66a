#include "care/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "care/corpus.hpp"
#include "care/digest.hpp"
#include "care/eval.hpp"
#include "care/grounding.hpp"
#include "care/linker.hpp"
#include "care/llm_client.hpp"
#include "care/prompting.hpp"
#include "care/rng.hpp"
#include "care/seqrec.hpp"
#include "care/text.hpp"
#include "json.hpp"

namespace care::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CliError {
    int code;
    std::string message;
};

struct RunConfig {
    std::string config_path;
    std::string dialogues;
    std::string catalog;
    std::string kg;
    std::string checkpoint = "care.ckpt";
    std::string cache_dir;
    std::string report = "report.jsonl";
    std::string report_dir = "reports";
    std::string grid;
    std::string templates_path;
    std::string golden_dir;
    std::string mock;  // empty selects the HTTP provider
    std::string mock_replies;
    std::string base_url;
    std::string api_key;
    std::string model_name;

    rec::RecConfig recc;
    std::string adaptation = "description";
    std::string engagement = "select_rerank";
    std::string input_mode = "full_conversation";
    int k = -1;  // engagement default when negative
    int n = 20;
    double theta = 0.2;
    bool zero_shot = false;

    double rate_limit = 0.0;
    int concurrency = 4;
    std::uint64_t seed = 42;
    int top = 10;
};

void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CliError{2, "cannot open config file: " + path};
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw CliError{2, path + ": " + e.what()};
    }
    try {
        auto str = [&](const char* key, std::string& field) {
            if (doc.contains(key)) field = doc[key].get<std::string>();
        };
        str("dialogues", cfg.dialogues);
        str("catalog", cfg.catalog);
        str("kg", cfg.kg);
        str("checkpoint", cfg.checkpoint);
        str("cache_dir", cfg.cache_dir);
        str("report", cfg.report);
        str("report_dir", cfg.report_dir);
        str("templates", cfg.templates_path);
        str("golden_dir", cfg.golden_dir);
        if (doc.contains("seed")) cfg.seed = doc["seed"].get<std::uint64_t>();
        if (doc.contains("theta")) cfg.theta = doc["theta"].get<double>();
        if (doc.contains("rec")) {
            const json& r = doc["rec"];
            if (r.contains("embed_dim")) cfg.recc.embed_dim = r["embed_dim"].get<int>();
            if (r.contains("layers")) cfg.recc.layers = r["layers"].get<int>();
            if (r.contains("heads")) cfg.recc.heads = r["heads"].get<int>();
            if (r.contains("max_sequence_length")) {
                cfg.recc.max_sequence_length = r["max_sequence_length"].get<int>();
            }
            if (r.contains("dropout")) cfg.recc.dropout = r["dropout"].get<float>();
            if (r.contains("learning_rate")) cfg.recc.learning_rate = r["learning_rate"].get<float>();
            if (r.contains("epochs")) cfg.recc.epochs = r["epochs"].get<int>();
            if (r.contains("batch_size")) cfg.recc.batch_size = r["batch_size"].get<int>();
        }
        if (doc.contains("strategy")) {
            const json& s = doc["strategy"];
            if (s.contains("adaptation")) cfg.adaptation = s["adaptation"].get<std::string>();
            if (s.contains("engagement")) cfg.engagement = s["engagement"].get<std::string>();
            if (s.contains("input_mode")) cfg.input_mode = s["input_mode"].get<std::string>();
            if (s.contains("k")) cfg.k = s["k"].get<int>();
            if (s.contains("n")) cfg.n = s["n"].get<int>();
        }
        if (doc.contains("provider")) {
            const json& p = doc["provider"];
            if (p.contains("mock")) cfg.mock = p["mock"].get<std::string>();
            if (p.contains("base_url")) cfg.base_url = p["base_url"].get<std::string>();
            if (p.contains("model")) cfg.model_name = p["model"].get<std::string>();
            if (p.contains("rate_limit")) cfg.rate_limit = p["rate_limit"].get<double>();
            if (p.contains("concurrency")) cfg.concurrency = p["concurrency"].get<int>();
        }
    } catch (const json::exception& e) {
        throw CliError{2, path + ": " + e.what()};
    }
}

struct World {
    corpus::EntityCatalog catalog;
    std::vector<corpus::KGTriple> triples;
    linker::LinkIndex index;
};

World load_world(const RunConfig& cfg) {
    if (cfg.catalog.empty()) throw CliError{2, "catalog path required (--catalog)"};
    World world;
    world.catalog = corpus::load_catalog(cfg.catalog);
    if (!cfg.kg.empty()) world.triples = corpus::load_kg(cfg.kg, world.catalog);
    world.index = linker::LinkIndex::build(world.catalog);
    return world;
}

std::vector<corpus::Dialogue> load_dialogues_or_fail(const RunConfig& cfg, const World& world) {
    if (cfg.dialogues.empty()) throw CliError{2, "dialogue path required (--dialogues)"};
    return corpus::load_dialogues(cfg.dialogues, world.catalog);
}

prompt::StrategyConfig strategy_from(const RunConfig& cfg) {
    const std::optional<int> k = cfg.k >= 0 ? std::optional<int>(cfg.k) : std::nullopt;
    return prompt::StrategyConfig::make(prompt::adaptation_from_name(cfg.adaptation),
                                        ground::engagement_from_name(cfg.engagement), k, cfg.n,
                                        prompt::input_mode_from_name(cfg.input_mode));
}

prompt::PromptTemplates templates_from(const RunConfig& cfg) {
    if (cfg.templates_path.empty()) return prompt::PromptTemplates::defaults();
    return prompt::load_templates(cfg.templates_path);
}

std::vector<std::string> read_scripted_replies(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CliError{2, "cannot open mock replies file: " + path};
    std::vector<std::string> replies;
    std::string line, current;
    bool any = false;
    while (std::getline(in, line)) {
        if (trim(line) == "===") {
            replies.push_back(current);
            current.clear();
            any = false;
            continue;
        }
        if (any) current += "\n";
        current += line;
        any = true;
    }
    if (any || !current.empty()) replies.push_back(current);
    if (replies.empty()) throw CliError{2, "mock replies file is empty: " + path};
    return replies;
}

std::shared_ptr<llm::Provider> make_provider(const RunConfig& cfg) {
    if (!cfg.mock.empty()) {
        llm::MockScript script;
        script.mode = llm::mock_mode_from_name(cfg.mock);
        if (script.mode == llm::MockMode::scripted) {
            if (cfg.mock_replies.empty()) {
                throw CliError{2, "scripted mock requires --mock-replies <file>"};
            }
            script.scripted_replies = read_scripted_replies(cfg.mock_replies);
        }
        return std::make_shared<llm::MockProvider>(std::move(script));
    }
    if (cfg.base_url.empty()) {
        throw CliError{2, "no provider: pass --mock <mode> or set CARE_LLM_BASE_URL"};
    }
    llm::HttpConfig http;
    http.base_url = cfg.base_url;
    http.api_key = cfg.api_key;
    return std::make_shared<llm::HttpProvider>(std::move(http));
}

std::string request_model_name(const RunConfig& cfg) {
    if (!cfg.model_name.empty()) return cfg.model_name;
    if (!cfg.mock.empty()) return "mock";
    throw CliError{2, "model name required for HTTP provider (--model or CARE_LLM_MODEL)"};
}

// rec_config comes from the checkpoint actually evaluated, not the CLI flags.
json provenance_json(const RunConfig& cfg, const prompt::StrategyConfig& strategy,
                     const rec::RecConfig& rec_config) {
    json p;
    p["seed"] = cfg.seed;
    p["paths"] = {{"dialogues", cfg.dialogues}, {"catalog", cfg.catalog}, {"kg", cfg.kg},
                  {"checkpoint", cfg.checkpoint}};
    p["matcher"] = {{"theta", cfg.theta}};
    p["strategy"] = {{"adaptation", prompt::adaptation_name(strategy.adaptation)},
                     {"engagement", ground::engagement_name(strategy.engagement)},
                     {"k", strategy.k},
                     {"n", strategy.n},
                     {"input_mode", prompt::input_mode_name(strategy.input_mode)}};
    p["rec"] = {{"embed_dim", rec_config.embed_dim},
                {"layers", rec_config.layers},
                {"heads", rec_config.heads},
                {"max_sequence_length", rec_config.max_sequence_length},
                {"dropout", rec_config.dropout},
                {"learning_rate", rec_config.learning_rate},
                {"epochs", rec_config.epochs},
                {"batch_size", rec_config.batch_size},
                {"train_seed", rec_config.seed}};
    p["provider"] = {{"type", cfg.mock.empty() ? "http" : "mock"},
                     {"mock_mode", cfg.mock},
                     {"model", cfg.mock.empty() ? cfg.model_name : request_model_name(cfg)}};
    p["zero_shot"] = cfg.zero_shot;
    return p;
}

rec::RecModel load_model_checked(const RunConfig& cfg, const corpus::EntityCatalog& catalog) {
    if (cfg.checkpoint.empty() || !fs::exists(cfg.checkpoint)) {
        throw CliError{2, "checkpoint not found: " + cfg.checkpoint};
    }
    rec::RecModel model = rec::load_checkpoint(cfg.checkpoint);
    if (model.item_count != catalog.item_count ||
        model.attribute_count != catalog.attribute_count) {
        throw CliError{2, "checkpoint entity space (" + std::to_string(model.item_count) + "+" +
                              std::to_string(model.attribute_count) +
                              ") does not match the catalog (" +
                              std::to_string(catalog.item_count) + "+" +
                              std::to_string(catalog.attribute_count) + ")"};
    }
    return model;
}

void print_metric_row(std::ostream& out, const eval::MetricRow& row) {
    for (const auto& [k, hit] : row.hit) {
        out << "HIT@" << k << "=" << hit << " MRR@" << k << "=" << row.mrr.at(k) << " NDCG@" << k
            << "=" << row.ndcg.at(k) << "\n";
    }
}

// ---------------------------------------------------------------------------
// subcommands

int cmd_ingest(const RunConfig& cfg, std::ostream& out) {
    World world = load_world(cfg);
    out << "catalog: " << world.catalog.item_count << " items, "
        << world.catalog.attribute_count << " attributes\n";
    out << "kg: " << world.triples.size() << " triples\n";
    if (!cfg.dialogues.empty()) {
        const auto dialogues = load_dialogues_or_fail(cfg, world);
        const auto split = corpus::split_dataset(dialogues, {}, cfg.seed);
        const auto examples = corpus::make_examples(split);
        std::size_t per_split[3] = {0, 0, 0};
        for (const auto& ex : examples) per_split[static_cast<int>(ex.split)] += 1;
        out << "dialogues: " << dialogues.size() << " (train " << split.train.size() << ", valid "
            << split.valid.size() << ", test " << split.test.size() << ")\n";
        out << "examples: " << examples.size() << " (train " << per_split[0] << ", valid "
            << per_split[1] << ", test " << per_split[2] << ")\n";
    }
    return 0;
}

int cmd_train(RunConfig cfg, std::ostream& out, std::ostream& err) {
    cfg.recc.seed = cfg.seed;
    World world = load_world(cfg);
    const auto dialogues = load_dialogues_or_fail(cfg, world);
    const auto split = corpus::split_dataset(dialogues, {}, cfg.seed);
    const auto train_examples = corpus::make_examples(split.train, corpus::Split::train);
    if (train_examples.empty()) throw CliError{2, "train split has no examples"};

    // One cloze sequence per (example, target): the context's entity sequence
    // with the target item appended as the entry to be masked.
    std::vector<linker::EntitySequence> sequences;
    for (const corpus::RecExample& ex : train_examples) {
        const linker::EntitySequence base = linker::extract_sequence(
            ex.context, world.index, static_cast<std::size_t>(cfg.recc.max_sequence_length) - 1);
        for (int target : ex.target_items) {
            linker::EntitySequence seq = base;
            seq.entries.push_back(target);
            sequences.push_back(std::move(seq));
        }
    }

    rec::RecModel model = rec::init_model(world.catalog, world.triples, cfg.recc);
    if (cfg.recc.epochs == 0) {
        err << "warning: --epochs 0, checkpoint equals initialization\n";
    }
    const rec::TrainResult result = rec::train(model, sequences, cfg.recc);
    out << "sequences: " << result.sequences_used << " used, " << result.sequences_discarded
        << " discarded\n";
    for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
        out << "epoch " << (e + 1) << "/" << result.epoch_losses.size()
            << " loss=" << result.epoch_losses[e] << "\n";
    }
    rec::save_checkpoint(model, cfg.checkpoint);
    out << "checkpoint written: " << cfg.checkpoint << "\n";
    return 0;
}

int cmd_recommend(const RunConfig& cfg, std::istream& in, std::ostream& out) {
    World world = load_world(cfg);
    const rec::RecModel model = load_model_checked(cfg, world.catalog);

    std::vector<corpus::Utterance> context;
    std::string line;
    int turn = 0;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        context.push_back({corpus::Speaker::user, line, turn++});
    }
    const linker::EntitySequence seq = linker::extract_sequence(context, world.index);
    const rec::CandidateSet cands = rec::recommend(model, seq, cfg.top);
    for (std::size_t i = 0; i < cands.entries.size(); ++i) {
        out << (i + 1) << "\t" << cands.entries[i].item_id << "\t"
            << world.catalog.name(cands.entries[i].item_id) << "\t" << cands.entries[i].score
            << "\n";
    }
    return 0;
}

struct EvalSetup {
    World world;
    std::vector<corpus::RecExample> test_examples;
    std::vector<corpus::RecExample> train_examples;
    rec::RecModel model;
    std::shared_ptr<llm::Provider> provider;
    std::unique_ptr<llm::Client> client;
    prompt::PromptTemplates templates;
};

EvalSetup prepare_eval(const RunConfig& cfg) {
    EvalSetup s;
    s.world = load_world(cfg);
    const auto dialogues = load_dialogues_or_fail(cfg, s.world);
    const auto split = corpus::split_dataset(dialogues, {}, cfg.seed);
    s.test_examples = corpus::make_examples(split.test, corpus::Split::test);
    s.train_examples = corpus::make_examples(split.train, corpus::Split::train);
    if (s.test_examples.empty()) throw CliError{2, "test split has no examples"};
    s.model = load_model_checked(cfg, s.world.catalog);
    s.provider = make_provider(cfg);
    llm::ClientConfig cc;
    cc.cache_dir = cfg.cache_dir;
    cc.rate_limit_per_sec = cfg.rate_limit;
    cc.max_concurrency = std::max(1, cfg.concurrency);
    s.client = std::make_unique<llm::Client>(s.provider, cc);
    s.templates = templates_from(cfg);
    return s;
}

eval::PipelineContext make_context(const RunConfig& cfg, const EvalSetup& s,
                                   const prompt::StrategyConfig& strategy) {
    eval::PipelineContext ctx;
    ctx.catalog = &s.world.catalog;
    ctx.index = &s.world.index;
    ctx.model = &s.model;
    ctx.client = s.client.get();
    ctx.templates = s.templates;
    ctx.strategy = strategy;
    ctx.matcher.theta = cfg.theta;
    ctx.llm_model_name = request_model_name(cfg);
    ctx.zero_shot = cfg.zero_shot;
    // Scripted replies arrive in call order, so they need sequential dispatch.
    ctx.max_concurrency = cfg.mock == "scripted" ? 1 : std::max(1, cfg.concurrency);
    ctx.provenance = provenance_json(cfg, strategy, s.model.config);
    return ctx;
}

int cmd_evaluate(const RunConfig& cfg, std::ostream& out) {
    EvalSetup s = prepare_eval(cfg);
    const prompt::StrategyConfig strategy = strategy_from(cfg);
    const eval::PipelineContext ctx = make_context(cfg, s, strategy);
    const eval::EvalReport report = eval::run_pipeline(ctx, s.test_examples, s.train_examples);
    eval::write_report(report, cfg.report);

    out << "config: " << report.config_id << "\n";
    out << "examples=" << report.records.size() << " instances=" << report.metrics.instance_count
        << "\n";
    print_metric_row(out, report.metrics);
    out << "ood_ratio=" << report.ood << "\n";
    out << "llm_calls=" << s.client->provider_calls() << "\n";
    out << "report=" << cfg.report << "\n";
    return 0;
}

int cmd_sweep(const RunConfig& cfg, std::ostream& out) {
    if (cfg.grid.empty()) throw CliError{2, "sweep requires --grid <file>"};
    std::ifstream grid_in(cfg.grid);
    if (!grid_in) throw CliError{2, "cannot open grid file: " + cfg.grid};
    json grid_doc;
    try {
        grid_doc = json::parse(grid_in);
    } catch (const json::exception& e) {
        throw CliError{2, cfg.grid + ": " + e.what()};
    }

    auto as_list = [&](const char* key, std::vector<json> fallback) {
        std::vector<json> values;
        if (!grid_doc.contains(key)) return fallback;
        if (grid_doc[key].is_array()) {
            for (const json& v : grid_doc[key]) values.push_back(v);
        } else {
            values.push_back(grid_doc[key]);
        }
        return values;
    };
    const auto adaptations = as_list("adaptation", {json(cfg.adaptation)});
    const auto engagements = as_list("engagement", {json(cfg.engagement)});
    const auto ks = as_list("k", {json(cfg.k)});
    const int n = grid_doc.contains("n") ? grid_doc["n"].get<int>() : cfg.n;
    const std::string mode =
        grid_doc.contains("input_mode") ? grid_doc["input_mode"].get<std::string>() : cfg.input_mode;

    EvalSetup s = prepare_eval(cfg);
    fs::create_directories(cfg.report_dir);

    // Cells that fail to validate still get an index row; the sweep goes on.
    struct RawCell {
        std::string label;
        std::optional<prompt::StrategyConfig> strategy;
        std::string error;
    };
    std::vector<RawCell> cells;
    for (const json& m : adaptations) {
        for (const json& sg : engagements) {
            for (const json& kv : ks) {
                RawCell cell;
                try {
                    // -1 is the "engagement default" sentinel; any other value
                    // is explicit and gets validated as-is.
                    const int k = kv.get<int>();
                    cell.strategy = prompt::StrategyConfig::make(
                        prompt::adaptation_from_name(m.get<std::string>()),
                        ground::engagement_from_name(sg.get<std::string>()),
                        k == -1 ? std::nullopt : std::optional<int>(k), n,
                        prompt::input_mode_from_name(mode));
                    cell.label = cell.strategy->id();
                } catch (const std::exception& e) {
                    cell.label = "m=" + m.dump() + ",s=" + sg.dump() + ",k=" + kv.dump();
                    cell.error = e.what();
                }
                cells.push_back(std::move(cell));
            }
        }
    }
    if (cells.empty()) throw CliError{2, "sweep grid is empty"};

    std::ofstream index(fs::path(cfg.report_dir) / "index.jsonl", std::ios::trunc);
    if (!index) throw CliError{2, "cannot write sweep index in " + cfg.report_dir};

    std::size_t ok = 0, failed = 0;
    for (const RawCell& cell : cells) {
        json row;
        row["config_id"] = cell.label;
        if (!cell.strategy) {
            row["status"] = "error";
            row["error"] = cell.error;
            index << row.dump() << "\n";
            ++failed;
            continue;
        }
        try {
            const eval::PipelineContext ctx = make_context(cfg, s, *cell.strategy);
            const eval::EvalReport report =
                eval::run_pipeline(ctx, s.test_examples, s.train_examples);
            const fs::path path = fs::path(cfg.report_dir) / (cell.label + ".jsonl");
            eval::write_report(report, path.string());
            row["status"] = "ok";
            row["report"] = path.string();
            row["ood_ratio"] = report.ood;
            ++ok;
        } catch (const std::exception& e) {
            row["status"] = "error";
            row["error"] = e.what();
            ++failed;
        }
        index << row.dump() << "\n";
    }
    out << "sweep: " << ok << " ok, " << failed << " failed, index=" << cfg.report_dir
        << "/index.jsonl\n";
    out << "llm_calls=" << s.client->provider_calls() << "\n";
    return 0;
}

int cmd_chat(const RunConfig& cfg, std::istream& in, std::ostream& out, std::ostream& err) {
    World world = load_world(cfg);
    const rec::RecModel model = load_model_checked(cfg, world.catalog);
    const auto provider = make_provider(cfg);
    llm::ClientConfig cc;
    cc.cache_dir = cfg.cache_dir;
    cc.rate_limit_per_sec = cfg.rate_limit;
    llm::Client client(provider, cc);
    const prompt::PromptTemplates templates = templates_from(cfg);
    const prompt::StrategyConfig strategy = strategy_from(cfg);
    const ground::MatcherConfig matcher{cfg.theta};

    out << "care chat: /seq shows the entity sequence, /quit exits\n";
    std::vector<corpus::Utterance> history;
    int turn = 0;
    std::string line;
    while (true) {
        out << "you> " << std::flush;
        if (!std::getline(in, line)) break;
        const std::string text = trim(line);
        if (text.empty()) continue;
        if (text == "/quit") break;
        if (text == "/seq") {
            const linker::EntitySequence seq = linker::extract_sequence(history, world.index);
            if (seq.empty()) {
                out << "(empty sequence)\n";
                continue;
            }
            for (std::size_t i = 0; i < seq.entries.size(); ++i) {
                if (i > 0) out << " ";
                out << seq.entries[i];
            }
            out << "\n";
            for (std::size_t i = 0; i < seq.entries.size(); ++i) {
                if (i > 0) out << "; ";
                out << world.catalog.name(seq.entries[i]);
            }
            out << "\n";
            continue;
        }

        history.push_back({corpus::Speaker::user, text, turn++});
        try {
            const linker::EntitySequence seq = linker::extract_sequence(history, world.index);
            const rec::CandidateSet cands = rec::recommend(model, seq, strategy.k);
            const prompt::PromptBundle bundle = prompt::assemble(
                strategy, history, cands, world.catalog, world.index, templates);
            llm::LLMRequest request;
            request.model_name = request_model_name(cfg);
            request.messages = {{"system", bundle.assembled}, {"user", "Respond now."}};
            const llm::LLMResponse response = client.complete(request);

            const auto titles = ground::parse_ranked_list(response.text,
                                                          static_cast<std::size_t>(strategy.n));
            const ground::RankedList list = ground::ground_list(
                titles, world.catalog, ground::CandidateIds{cands.ids()}, strategy.engagement,
                matcher, static_cast<std::size_t>(strategy.n));
            for (std::size_t i = 0; i < list.entries.size(); ++i) {
                const ground::GroundedEntry& e = list.entries[i];
                out << (i + 1) << ". ";
                if (e.matched_item) {
                    out << world.catalog.name(*e.matched_item) << " (id " << *e.matched_item << ")";
                } else {
                    out << e.raw_title << " [OOD]";
                }
                out << "\n";
            }
            if (!trim(response.text).empty()) {
                history.push_back({corpus::Speaker::system, response.text, turn++});
            }
        } catch (const std::exception& e) {
            err << "error: " << e.what() << "\n";
        }
    }
    return 0;
}

int cmd_link(const RunConfig& cfg, std::istream& in, std::ostream& out) {
    World world = load_world(cfg);
    std::ostringstream text;
    text << in.rdbuf();
    for (const linker::EntityMention& m : linker::link_utterance(text.str(), world.index)) {
        out << m.begin << "\t" << m.end << "\t" << m.entity_id << "\t" << m.surface << "\n";
    }
    return 0;
}

int cmd_ground(const RunConfig& cfg, std::istream& in, std::ostream& out) {
    World world = load_world(cfg);
    std::ostringstream text;
    text << in.rdbuf();
    const ground::MatcherConfig matcher{cfg.theta};
    const auto titles =
        ground::parse_ranked_list(text.str(), static_cast<std::size_t>(cfg.n));
    const ground::RankedList list =
        ground::ground_list(titles, world.catalog, std::nullopt, ground::Engagement::expansion,
                            matcher, static_cast<std::size_t>(cfg.n));
    for (std::size_t i = 0; i < list.entries.size(); ++i) {
        const ground::GroundedEntry& e = list.entries[i];
        out << (i + 1) << "\t" << e.raw_title << "\t";
        if (e.matched_item) {
            out << *e.matched_item;
        } else {
            out << "OOD";
        }
        out << "\n";
    }
    return 0;
}

// --- selftest ---------------------------------------------------------------

corpus::EntityCatalog synthetic_catalog(int items, int attributes) {
    corpus::EntityCatalog catalog;
    catalog.item_count = items;
    catalog.attribute_count = attributes;
    for (int i = 0; i < items + attributes; ++i) {
        corpus::EntityRecord rec;
        rec.id = i;
        rec.kind = i < items ? corpus::EntityKind::item : corpus::EntityKind::attribute;
        rec.canonical_name = (i < items ? "item_" : "attr_") + std::to_string(i);
        rec.aliases = {rec.canonical_name};
        catalog.records.push_back(std::move(rec));
    }
    return catalog;
}

bool selftest_gradients(std::ostream& out) {
    rec::RecConfig config;
    config.embed_dim = 8;
    config.layers = 1;
    config.heads = 1;
    config.max_sequence_length = 16;
    config.dropout = 0.0f;
    config.seed = 7;
    const corpus::EntityCatalog catalog = synthetic_catalog(10, 3);
    rec::ModelT<double> model = rec::widen(rec::init_model(catalog, {}, config));
    const linker::EntitySequence example{{11, 2, 10, 5, 3}};
    const rec::GradCheckResult result = rec::gradient_check(model, example, 1e-5, 200, 11);
    out << "  gradient check: max relative error " << result.max_rel_error << " over "
        << result.coords_checked << " coordinates\n";
    return result.max_rel_error < 1e-4;
}

bool selftest_metrics(std::ostream& out) {
    // Naive per-instance reference, written independently of eval::evaluate.
    Rng rng(99);
    const std::vector<int> ks = {5, 10};
    std::vector<corpus::RecExample> examples;
    std::vector<ground::RankedList> lists;
    std::map<int, double> ref_hit, ref_mrr, ref_ndcg;
    for (int k : ks) {
        ref_hit[k] = 0;
        ref_mrr[k] = 0;
        ref_ndcg[k] = 0;
    }
    std::size_t instances = 0;
    for (int i = 0; i < 1000; ++i) {
        std::vector<int> pool(30);
        for (int j = 0; j < 30; ++j) pool[j] = j;
        rng.shuffle(pool);
        const std::size_t len = 1 + rng.uniform_int(12);
        std::vector<int> ranking(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(len));

        corpus::RecExample ex;
        ex.dialogue_id = "d" + std::to_string(i);
        ex.turn_index = 1;
        ex.target_items = {static_cast<int>(rng.uniform_int(30))};
        examples.push_back(ex);

        ground::RankedList list;
        for (int id : ranking) {
            ground::GroundedEntry e;
            e.matched_item = id;
            list.entries.push_back(e);
        }
        lists.push_back(list);

        for (int target : ex.target_items) {
            int pos = 0;
            for (std::size_t r = 0; r < ranking.size(); ++r) {
                if (ranking[r] == target) {
                    pos = static_cast<int>(r) + 1;
                    break;
                }
            }
            for (int k : ks) {
                if (pos >= 1 && pos <= k) {
                    ref_hit[k] += 1.0;
                    ref_mrr[k] += 1.0 / pos;
                    ref_ndcg[k] += 1.0 / std::log2(pos + 1.0);
                }
            }
            ++instances;
        }
    }
    const eval::MetricRow row = eval::evaluate(examples, lists, ks);
    double max_diff = 0.0;
    for (int k : ks) {
        max_diff = std::max(max_diff, std::abs(row.hit.at(k) - ref_hit[k] / instances));
        max_diff = std::max(max_diff, std::abs(row.mrr.at(k) - ref_mrr[k] / instances));
        max_diff = std::max(max_diff, std::abs(row.ndcg.at(k) - ref_ndcg[k] / instances));
    }
    out << "  metric oracle: max difference " << max_diff << " over " << instances
        << " instances\n";

    const auto spot = eval::metrics_for_instance(7, {1, 2, 7, 4, 5}, {5});
    const bool spot_ok = spot.at(5).hit == 1.0 && spot.at(5).mrr == 1.0 / 3.0 &&
                         spot.at(5).ndcg == 0.5;
    return max_diff <= 1e-12 && spot_ok;
}

bool selftest_levenshtein(std::ostream& out) {
    // Full-matrix DP reference.
    auto reference = [](const std::string& a, const std::string& b) {
        std::vector<std::vector<int>> dp(a.size() + 1, std::vector<int>(b.size() + 1, 0));
        for (std::size_t i = 0; i <= a.size(); ++i) dp[i][0] = static_cast<int>(i);
        for (std::size_t j = 0; j <= b.size(); ++j) dp[0][j] = static_cast<int>(j);
        for (std::size_t i = 1; i <= a.size(); ++i) {
            for (std::size_t j = 1; j <= b.size(); ++j) {
                const int sub = dp[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
                dp[i][j] = std::min({dp[i - 1][j] + 1, dp[i][j - 1] + 1, sub});
            }
        }
        return dp[a.size()][b.size()];
    };
    Rng rng(123);
    const std::string alphabet = "abcde ";
    auto random_string = [&] {
        const std::size_t len = rng.uniform_int(31);
        std::string s;
        for (std::size_t i = 0; i < len; ++i) {
            s.push_back(alphabet[rng.uniform_int(alphabet.size())]);
        }
        return s;
    };
    int mismatches = 0;
    for (int i = 0; i < 1000; ++i) {
        const std::string a = random_string();
        const std::string b = random_string();
        if (ground::levenshtein(a, b) != reference(a, b)) ++mismatches;
    }
    const bool kitten_ok = ground::levenshtein("kitten", "sitting") == 3;
    out << "  levenshtein oracle: " << mismatches << " mismatches over 1000 pairs\n";
    return mismatches == 0 && kitten_ok;
}

bool selftest_goldens(const RunConfig& cfg, std::ostream& out) {
    std::string dir = cfg.golden_dir;
    if (dir.empty()) {
        const char* env = std::getenv("CARE_GOLDEN_DIR");
        dir = env != nullptr ? env : "tests/golden/v1";
    }
    bool ok = true;
    for (const auto& [name, text] : golden_fixture_prompts()) {
        const fs::path path = fs::path(dir) / (name + ".txt");
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            out << "  missing golden file: " << path.string() << "\n";
            ok = false;
            continue;
        }
        std::ostringstream bytes;
        bytes << in.rdbuf();
        if (bytes.str() != text) {
            out << "  golden mismatch: " << path.string() << "\n";
            ok = false;
        }
    }
    if (ok) out << "  9 golden prompts match\n";
    return ok;
}

int cmd_selftest(const RunConfig& cfg, std::ostream& out) {
    struct Check {
        const char* name;
        std::function<bool()> fn;
    };
    const std::vector<Check> checks = {
        {"gradient_check", [&] { return selftest_gradients(out); }},
        {"metric_oracle", [&] { return selftest_metrics(out); }},
        {"levenshtein_oracle", [&] { return selftest_levenshtein(out); }},
        {"prompt_goldens", [&] { return selftest_goldens(cfg, out); }},
    };
    bool all_ok = true;
    for (const Check& check : checks) {
        bool ok = false;
        try {
            ok = check.fn();
        } catch (const std::exception& e) {
            out << "  " << check.name << " threw: " << e.what() << "\n";
        }
        out << (ok ? "[PASS] " : "[FAIL] ") << check.name << "\n";
        all_ok = all_ok && ok;
    }
    return all_ok ? 0 : 1;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> golden_fixture_prompts() {
    corpus::EntityCatalog catalog;
    const std::vector<std::pair<std::string, corpus::EntityKind>> entries = {
        {"The Matrix (1999)", corpus::EntityKind::item},
        {"Inception", corpus::EntityKind::item},
        {"The Exorcist", corpus::EntityKind::item},
        {"Disturbia", corpus::EntityKind::item},
        {"Monna", corpus::EntityKind::item},
        {"Heat", corpus::EntityKind::item},
        {"Alien", corpus::EntityKind::item},
        {"Blade Runner", corpus::EntityKind::item},
        {"The Thing", corpus::EntityKind::item},
        {"Se7en", corpus::EntityKind::item},
        {"Paprika", corpus::EntityKind::item},
        {"Coherence", corpus::EntityKind::item},
        {"horror", corpus::EntityKind::attribute},
        {"thriller", corpus::EntityKind::attribute},
        {"sci-fi", corpus::EntityKind::attribute},
        {"mind-bending", corpus::EntityKind::attribute},
    };
    int id = 0;
    for (const auto& [name, kind] : entries) {
        corpus::EntityRecord rec;
        rec.id = id++;
        rec.canonical_name = name;
        rec.aliases = {name};
        rec.kind = kind;
        catalog.records.push_back(std::move(rec));
        if (kind == corpus::EntityKind::item) {
            catalog.item_count += 1;
        } else {
            catalog.attribute_count += 1;
        }
    }
    const linker::LinkIndex index = linker::LinkIndex::build(catalog);

    const std::vector<corpus::Utterance> context = {
        {corpus::Speaker::user, "I loved The Matrix and Inception, something mind-bending tonight?",
         0},
        {corpus::Speaker::system, "Have you seen Blade Runner?", 1},
        {corpus::Speaker::user, "Yes! More sci-fi or a thriller would be great.", 2},
    };

    auto candidates_for = [](int k) {
        rec::CandidateSet cands;
        cands.k = k;
        const int pool[] = {2, 3, 5, 6, 7, 8, 9, 10};
        for (int i = 0; i < k; ++i) {
            cands.entries.push_back({pool[i], 0.9f - 0.1f * static_cast<float>(i)});
        }
        return cands;
    };

    const int n = 5;
    std::vector<std::pair<std::string, std::string>> prompts;
    for (prompt::Adaptation m : {prompt::Adaptation::direct, prompt::Adaptation::description,
                                 prompt::Adaptation::self_reflection}) {
        for (ground::Engagement s : {ground::Engagement::expansion, ground::Engagement::rerank,
                                     ground::Engagement::select_rerank}) {
            int k = 0;
            switch (s) {
                case ground::Engagement::expansion: k = 3; break;
                case ground::Engagement::rerank: k = n; break;
                case ground::Engagement::select_rerank: k = 8; break;
            }
            const prompt::StrategyConfig config = prompt::StrategyConfig::make(m, s, k, n);
            const prompt::PromptBundle bundle =
                prompt::assemble(config, context, candidates_for(k), catalog, index);
            const std::string name = std::string("prompt_") + prompt::adaptation_name(m) + "_" +
                                     ground::engagement_name(s);
            prompts.emplace_back(name, bundle.assembled);
        }
    }
    return prompts;
}

int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
        std::ostream& err) {
    RunConfig cfg;

    // Config file first so later sources can override it.
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) {
            cfg.config_path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            cfg.config_path = args[i].substr(9);
        }
    }
    try {
        if (!cfg.config_path.empty()) apply_config_file(cfg, cfg.config_path);
    } catch (const CliError& e) {
        err << "error: " << e.message << "\n";
        return e.code;
    }

    CLI::App app{"CARE conversational recommendation pipeline"};
    app.fallthrough();
    app.add_option("--config", cfg.config_path, "JSON config file");
    app.add_option("--dialogues", cfg.dialogues, "dialogue JSONL file");
    app.add_option("--catalog", cfg.catalog, "entity catalog TSV file");
    app.add_option("--kg", cfg.kg, "knowledge-graph triples TSV file");
    app.add_option("--checkpoint", cfg.checkpoint, "model checkpoint path");
    app.add_option("--cache-dir", cfg.cache_dir, "LLM reply cache directory");
    app.add_option("--report", cfg.report, "evaluation report path");
    app.add_option("--report-dir", cfg.report_dir, "sweep report directory");
    app.add_option("--grid", cfg.grid, "sweep grid JSON file");
    app.add_option("--templates", cfg.templates_path, "prompt template overrides");
    app.add_option("--golden-dir", cfg.golden_dir, "golden prompt directory");
    app.add_option("--seed", cfg.seed, "random seed");
    app.add_option("--theta", cfg.theta, "grounding distance threshold");
    app.add_option("--adaptation", cfg.adaptation, "direct|description|self_reflection");
    app.add_option("--strategy", cfg.engagement, "expansion|rerank|select_rerank");
    app.add_option("--input-mode", cfg.input_mode,
                   "full_conversation|items_only|context_only");
    app.add_option("--k", cfg.k, "candidate count (engagement default when unset)");
    app.add_option("--n", cfg.n, "requested output count");
    app.add_flag("--zero-shot", cfg.zero_shot, "omit candidates (baseline prompt)");
    app.add_option("--mock", cfg.mock, "mock provider: fixed|echo_candidates|reverse_candidates|scripted");
    app.add_option("--mock-replies", cfg.mock_replies, "scripted mock replies file");
    app.add_option("--base-url", cfg.base_url, "chat-completions endpoint")
        ->envname("CARE_LLM_BASE_URL");
    app.add_option("--api-key", cfg.api_key, "provider credential")->envname("CARE_LLM_API_KEY");
    app.add_option("--model", cfg.model_name, "provider model name")->envname("CARE_LLM_MODEL");
    app.add_option("--rate-limit", cfg.rate_limit, "max requests per second (0 = unlimited)");
    app.add_option("--concurrency", cfg.concurrency, "max in-flight requests");
    app.add_option("--top", cfg.top, "list size for the recommend command");
    app.add_option("--embed-dim", cfg.recc.embed_dim, "embedding dimension");
    app.add_option("--layers", cfg.recc.layers, "attention blocks");
    app.add_option("--heads", cfg.recc.heads, "attention heads");
    app.add_option("--max-seq-len", cfg.recc.max_sequence_length, "max entity sequence length");
    app.add_option("--dropout", cfg.recc.dropout, "dropout rate");
    app.add_option("--lr", cfg.recc.learning_rate, "SGD learning rate");
    app.add_option("--epochs", cfg.recc.epochs, "training epochs");
    app.add_option("--batch-size", cfg.recc.batch_size, "training batch size");

    app.require_subcommand(0, 1);
    CLI::App* sub_ingest = app.add_subcommand("ingest", "load and validate the corpus");
    CLI::App* sub_train = app.add_subcommand("train", "train the recommender");
    CLI::App* sub_recommend = app.add_subcommand("recommend", "top-k items for stdin context");
    CLI::App* sub_evaluate = app.add_subcommand("evaluate", "run the full pipeline on the test split");
    CLI::App* sub_sweep = app.add_subcommand("sweep", "run a configuration grid");
    CLI::App* sub_chat = app.add_subcommand("chat", "interactive terminal session");
    CLI::App* sub_link = app.add_subcommand("link", "print entity mentions for stdin text");
    CLI::App* sub_ground = app.add_subcommand("ground", "ground a reply read from stdin");
    CLI::App* sub_selftest = app.add_subcommand("selftest", "run built-in consistency checks");
    for (CLI::App* sub : {sub_ingest, sub_train, sub_recommend, sub_evaluate, sub_sweep, sub_chat,
                          sub_link, sub_ground, sub_selftest}) {
        sub->fallthrough();  // global options may follow the subcommand name
    }

    std::vector<std::string> argv_storage = args;
    std::vector<const char*> argv{"care"};
    for (const std::string& a : argv_storage) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;  // --help exits 0, parse failures are usage errors
    }

    try {
        if (sub_ingest->parsed()) return cmd_ingest(cfg, out);
        if (sub_train->parsed()) return cmd_train(cfg, out, err);
        if (sub_recommend->parsed()) return cmd_recommend(cfg, in, out);
        if (sub_evaluate->parsed()) return cmd_evaluate(cfg, out);
        if (sub_sweep->parsed()) return cmd_sweep(cfg, out);
        if (sub_chat->parsed()) return cmd_chat(cfg, in, out, err);
        if (sub_link->parsed()) return cmd_link(cfg, in, out);
        if (sub_ground->parsed()) return cmd_ground(cfg, in, out);
        if (sub_selftest->parsed()) return cmd_selftest(cfg, out);
        err << "error: no subcommand given (see --help)\n";
        return 2;
    } catch (const CliError& e) {
        err << "error: " << e.message << "\n";
        return e.code;
    } catch (const corpus::LoadError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const rec::CheckpointError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

int run(const std::vector<std::string>& args) {
    return run(args, std::cin, std::cout, std::cerr);
}

}  // namespace care::cli
