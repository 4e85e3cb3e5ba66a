#include "care/cli.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

#include "care/corpus.hpp"
#include "care/eval.hpp"
#include "care/linker.hpp"
#include "care/seqrec.hpp"
#include "doctest.h"
#include "json.hpp"
#include "test_util.hpp"

using namespace care;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

const std::string kFixtures = CARE_FIXTURES_DIR;
const std::string kGoldens = CARE_GOLDEN_DIR;

struct RunResult {
    int code = 0;
    std::string out;
    std::string err;
};

RunResult run_cli(std::vector<std::string> args, const std::string& stdin_text = "") {
    std::istringstream in(stdin_text);
    std::ostringstream out, err;
    RunResult result;
    result.code = cli::run(args, in, out, err);
    result.out = out.str();
    result.err = err.str();
    return result;
}

// 20 items named f00..f19; each dialogue walks three consecutive items and
// the system recommends the successor.
void write_successor_fixture(const TempDir& dir) {
    std::ostringstream catalog;
    catalog << "kind\tname\taliases\n";
    for (int i = 0; i < 20; ++i) {
        catalog << "item\tf" << (i < 10 ? "0" : "") << i << "\t\n";
    }
    testutil::write_file(dir.file("catalog.tsv"), catalog.str());

    auto name = [](int i) {
        const int v = ((i % 20) + 20) % 20;
        return std::string("f") + (v < 10 ? "0" : "") + std::to_string(v);
    };
    std::ostringstream dialogues;
    for (int i = 0; i < 40; ++i) {
        const int s = i % 17;
        dialogues << R"({"id":"s)" << (i < 10 ? "0" : "") << i << R"(","turns":[)"
                  << R"({"speaker":"user","text":"I watched )" << name(s) << " " << name(s + 1)
                  << " " << name(s + 2) << R"("},)"
                  << R"({"speaker":"system","text":"next up )" << name(s + 3)
                  << R"(","recommends":[")" << name(s + 3) << R"("]}]})" << "\n";
    }
    testutil::write_file(dir.file("dialogues.jsonl"), dialogues.str());
}

std::vector<std::string> fixture_args(const TempDir& dir) {
    return {"--catalog",    kFixtures + "/catalog.tsv",
            "--dialogues",  kFixtures + "/dialogues.jsonl",
            "--kg",         kFixtures + "/kg.tsv",
            "--checkpoint", dir.file("model.ckpt"),
            "--embed-dim",  "8",
            "--layers",     "1",
            "--heads",      "1",
            "--max-seq-len", "20",
            "--dropout",    "0",
            "--seed",       "42"};
}

RunResult train_fixture_model(const TempDir& dir) {
    auto args = fixture_args(dir);
    args.insert(args.begin(), "train");
    args.push_back("--epochs");
    args.push_back("1");
    args.push_back("--batch-size");
    args.push_back("8");
    return run_cli(args);
}

nlohmann::json report_summary(const std::string& path) {
    std::istringstream lines(testutil::read_file(path));
    std::string line, last;
    while (std::getline(lines, line)) {
        if (!line.empty()) last = line;
    }
    return nlohmann::json::parse(last);
}

}  // namespace

TEST_CASE("cli train learns the successor fixture") {
    TempDir dir;
    write_successor_fixture(dir);
    const auto result = run_cli({"train", "--catalog", dir.file("catalog.tsv"), "--dialogues",
                                 dir.file("dialogues.jsonl"), "--checkpoint", dir.file("m.ckpt"),
                                 "--embed-dim", "16", "--layers", "1", "--heads", "2",
                                 "--dropout", "0", "--epochs", "6", "--lr", "0.1",
                                 "--batch-size", "8", "--seed", "1"});
    INFO(result.err);
    CHECK(result.code == 0);
    CHECK(fs::exists(dir.file("m.ckpt")));

    // final epoch loss below the first
    std::vector<double> losses;
    std::istringstream lines(result.out);
    std::string line;
    while (std::getline(lines, line)) {
        const auto pos = line.find("loss=");
        if (pos != std::string::npos) losses.push_back(std::stod(line.substr(pos + 5)));
    }
    REQUIRE(losses.size() == 6);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("cli reports missing inputs as configuration errors") {
    const auto result = run_cli({"train", "--catalog", "/no/such/catalog.tsv", "--dialogues",
                                 "/no/such/dialogues.jsonl"});
    CHECK(result.code == 2);
    CHECK(result.err.find("/no/such/catalog.tsv") != std::string::npos);

    const auto no_ckpt = run_cli({"evaluate", "--catalog", kFixtures + "/catalog.tsv",
                                  "--dialogues", kFixtures + "/dialogues.jsonl", "--checkpoint",
                                  "/no/such/model.ckpt", "--mock", "echo_candidates"});
    CHECK(no_ckpt.code == 2);

    const auto bad_strategy = run_cli({"evaluate", "--strategy", "upside_down", "--catalog",
                                       kFixtures + "/catalog.tsv", "--dialogues",
                                       kFixtures + "/dialogues.jsonl"});
    CHECK(bad_strategy.code == 2);
}

TEST_CASE("cli train with zero epochs warns and keeps the initialization") {
    TempDir dir;
    auto args = fixture_args(dir);
    args.insert(args.begin(), "train");
    args.push_back("--epochs");
    args.push_back("0");
    const auto result = run_cli(args);
    CHECK(result.code == 0);
    CHECK(result.err.find("warning") != std::string::npos);

    const auto loaded = rec::load_checkpoint(dir.file("model.ckpt"));
    const auto catalog = corpus::load_catalog(kFixtures + "/catalog.tsv");
    const auto triples = corpus::load_kg(kFixtures + "/kg.tsv", catalog);
    const auto fresh = rec::init_model(catalog, triples, loaded.config);
    CHECK(loaded.entity_emb.data == fresh.entity_emb.data);
    CHECK(loaded.w2.data == fresh.w2.data);
}

TEST_CASE("cli evaluate with an echo mock has zero OOD under rerank") {
    TempDir dir;
    REQUIRE(train_fixture_model(dir).code == 0);

    auto args = fixture_args(dir);
    args.insert(args.begin(), "evaluate");
    args.push_back("--mock");
    args.push_back("echo_candidates");
    args.push_back("--strategy");
    args.push_back("rerank");
    args.push_back("--n");
    args.push_back("6");
    args.push_back("--report");
    args.push_back(dir.file("report.jsonl"));
    const auto result = run_cli(args);
    INFO(result.err);
    CHECK(result.code == 0);

    const auto summary = report_summary(dir.file("report.jsonl"));
    CHECK(summary["type"] == "summary");
    CHECK(summary["ood_ratio"].get<double>() == 0.0);
    CHECK(summary["config"]["seed"] == 42);
    CHECK(summary["metrics"]["instances"].get<int>() >= 1);
}

TEST_CASE("cli evaluate with a reverse mock matches hand-reversed rankings") {
    TempDir dir;
    REQUIRE(train_fixture_model(dir).code == 0);

    const int n = 6;
    auto args = fixture_args(dir);
    args.insert(args.begin(), "evaluate");
    for (const char* a : {"--mock", "reverse_candidates", "--strategy", "rerank", "--n", "6",
                          "--report", ""}) {
        args.push_back(a);
    }
    args.back() = dir.file("report.jsonl");
    const auto result = run_cli(args);
    REQUIRE(result.code == 0);

    // independent expectation: reverse the recommender's candidate list per
    // test example and average the per-target metrics
    const auto catalog = corpus::load_catalog(kFixtures + "/catalog.tsv");
    const auto dialogues = corpus::load_dialogues(kFixtures + "/dialogues.jsonl", catalog);
    const auto split = corpus::split_dataset(dialogues, {}, 42);
    const auto test_examples = corpus::make_examples(split.test, corpus::Split::test);
    REQUIRE(!test_examples.empty());
    const auto index = linker::LinkIndex::build(catalog);
    const auto model = rec::load_checkpoint(dir.file("model.ckpt"));

    double hit5 = 0, mrr5 = 0, ndcg5 = 0;
    std::size_t instances = 0;
    for (const auto& ex : test_examples) {
        const auto seq = linker::extract_sequence(ex.context, index);
        auto ids = rec::recommend(model, seq, n).ids();
        std::reverse(ids.begin(), ids.end());
        for (int target : ex.target_items) {
            int pos = 0;
            for (std::size_t r = 0; r < ids.size(); ++r) {
                if (ids[r] == target) pos = static_cast<int>(r) + 1;
            }
            if (pos >= 1 && pos <= 5) {
                hit5 += 1;
                mrr5 += 1.0 / pos;
                ndcg5 += 1.0 / std::log2(pos + 1.0);
            }
            ++instances;
        }
    }
    const auto summary = report_summary(dir.file("report.jsonl"));
    CHECK(summary["metrics"]["instances"].get<std::size_t>() == instances);
    CHECK(summary["metrics"]["hit"]["5"].get<double>() ==
          doctest::Approx(hit5 / instances).epsilon(1e-12));
    CHECK(summary["metrics"]["mrr"]["5"].get<double>() ==
          doctest::Approx(mrr5 / instances).epsilon(1e-12));
    CHECK(summary["metrics"]["ndcg"]["5"].get<double>() ==
          doctest::Approx(ndcg5 / instances).epsilon(1e-12));
}

TEST_CASE("cli evaluate reuses the cache on a second run") {
    TempDir dir;
    REQUIRE(train_fixture_model(dir).code == 0);

    auto args = fixture_args(dir);
    args.insert(args.begin(), "evaluate");
    for (const std::string& a : std::vector<std::string>{
          "--mock", "echo_candidates", "--strategy", "rerank", "--n", "6", "--cache-dir",
          dir.file("cache"), "--report", dir.file("r1.jsonl")}) {
        args.push_back(a);
    }
    const auto cold = run_cli(args);
    REQUIRE(cold.code == 0);
    CHECK(cold.out.find("llm_calls=0") == std::string::npos);

    args[args.size() - 1] = dir.file("r2.jsonl");
    const auto warm = run_cli(args);
    REQUIRE(warm.code == 0);
    CHECK(warm.out.find("llm_calls=0") != std::string::npos);

    // cache hits change nothing in the report
    CHECK(testutil::read_file(dir.file("r1.jsonl")) == testutil::read_file(dir.file("r2.jsonl")));
}

TEST_CASE("cli chat links entities and grounds mock replies") {
    TempDir dir;
    REQUIRE(train_fixture_model(dir).code == 0);

    auto args = fixture_args(dir);
    args.insert(args.begin(), "chat");
    for (const char* a : {"--mock", "fixed", "--strategy", "expansion", "--k", "3", "--n", "3"}) {
        args.push_back(a);
    }
    const auto result = run_cli(args, "I loved The Matrix\n/seq\n/quit\n");
    INFO(result.err);
    CHECK(result.code == 0);
    // the fixed mock reply "1. The Matrix" grounds to item 0
    CHECK(result.out.find("1. The Matrix (1999) (id 0)") != std::string::npos);
    // /seq prints the id sequence after both turns
    CHECK(result.out.find("The Matrix (1999)") != std::string::npos);
    CHECK(result.out.find("you>") != std::string::npos);
}

TEST_CASE("cli link and ground expose the debug surfaces") {
    const std::vector<std::string> base = {"--catalog", kFixtures + "/catalog.tsv"};

    auto link_args = base;
    link_args.insert(link_args.begin(), "link");
    const auto linked = run_cli(link_args, "watched The Matrix and Disturbia");
    CHECK(linked.code == 0);
    CHECK(linked.out.find("\t0\tThe Matrix") != std::string::npos);
    CHECK(linked.out.find("\t3\tDisturbia") != std::string::npos);

    auto ground_args = base;
    ground_args.insert(ground_args.begin(), "ground");
    const auto grounded = run_cli(ground_args, "1. The Exorcist\n2. Totally Made Up Movie\n");
    CHECK(grounded.code == 0);
    CHECK(grounded.out.find("1\tThe Exorcist\t2") != std::string::npos);
    CHECK(grounded.out.find("2\tTotally Made Up Movie\tOOD") != std::string::npos);
}

TEST_CASE("cli sweep writes one report per cell plus an index") {
    TempDir dir;
    REQUIRE(train_fixture_model(dir).code == 0);
    testutil::write_file(dir.file("grid.json"),
                         R"({"adaptation":["direct","description","self_reflection"],)"
                         R"("engagement":["expansion","rerank","select_rerank"],"n":5})");

    auto args = fixture_args(dir);
    args.insert(args.begin(), "sweep");
    for (const std::string& a : std::vector<std::string>{"--mock", "echo_candidates", "--grid", dir.file("grid.json"),
                                "--report-dir", dir.file("reports")}) {
        args.push_back(a);
    }
    const auto result = run_cli(args);
    INFO(result.err);
    CHECK(result.code == 0);
    CHECK(result.out.find("9 ok, 0 failed") != std::string::npos);

    std::size_t reports = 0;
    for (const auto& entry : fs::directory_iterator(dir.file("reports"))) {
        if (entry.path().filename() != "index.jsonl") ++reports;
    }
    CHECK(reports == 9);

    std::istringstream index(testutil::read_file(dir.file("reports") + "/index.jsonl"));
    std::string line;
    std::size_t rows = 0;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        const auto row = nlohmann::json::parse(line);
        CHECK(row["status"] == "ok");
        ++rows;
    }
    CHECK(rows == 9);
}

TEST_CASE("cli sweep records invalid cells without aborting") {
    TempDir dir;
    REQUIRE(train_fixture_model(dir).code == 0);
    testutil::write_file(dir.file("grid.json"),
                         R"({"engagement":["select_rerank"],"k":[2,3,4,5,6,7,8,9,-2],"n":2})");

    auto args = fixture_args(dir);
    args.insert(args.begin(), "sweep");
    for (const std::string& a : std::vector<std::string>{"--mock", "echo_candidates", "--grid", dir.file("grid.json"),
                                "--report-dir", dir.file("reports")}) {
        args.push_back(a);
    }
    const auto result = run_cli(args);
    CHECK(result.code == 0);
    CHECK(result.out.find("8 ok, 1 failed") != std::string::npos);
}

TEST_CASE("cli selftest passes on a pristine tree and fails on corrupted goldens") {
    const auto ok = run_cli({"selftest", "--golden-dir", kGoldens});
    INFO(ok.out);
    CHECK(ok.code == 0);
    CHECK(ok.out.find("[FAIL]") == std::string::npos);

    TempDir dir;
    fs::create_directories(dir.file("golden"));
    for (const auto& entry : fs::directory_iterator(kGoldens)) {
        fs::copy_file(entry.path(), dir.file("golden") + "/" + entry.path().filename().string());
    }
    testutil::write_file(dir.file("golden") + "/prompt_direct_rerank.txt", "corrupted bytes");
    const auto bad = run_cli({"selftest", "--golden-dir", dir.file("golden")});
    CHECK(bad.code == 1);
    CHECK(bad.out.find("[FAIL] prompt_goldens") != std::string::npos);
}

TEST_CASE("cli evaluate --zero-shot omits candidates entirely") {
    TempDir dir;
    REQUIRE(train_fixture_model(dir).code == 0);

    auto args = fixture_args(dir);
    args.insert(args.begin(), "evaluate");
    for (const char* a : {"--zero-shot", "--mock", "fixed", "--n", "5"}) args.push_back(a);
    args.push_back("--report");
    args.push_back(dir.file("report.jsonl"));
    const auto result = run_cli(args);
    INFO(result.err);
    CHECK(result.code == 0);

    std::istringstream lines(testutil::read_file(dir.file("report.jsonl")));
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const auto row = nlohmann::json::parse(line);
        if (row["type"] == "example") {
            CHECK(row["candidate_lines"].get<int>() == 0);
        }
    }
}

TEST_CASE("cli config file feeds defaults and flags override it") {
    TempDir dir;
    REQUIRE(train_fixture_model(dir).code == 0);
    testutil::write_file(dir.file("config.json"),
                         nlohmann::json{{"catalog", kFixtures + "/catalog.tsv"},
                                        {"dialogues", kFixtures + "/dialogues.jsonl"},
                                        {"kg", kFixtures + "/kg.tsv"},
                                        {"checkpoint", dir.file("model.ckpt")},
                                        {"seed", 42},
                                        {"report", dir.file("from_config.jsonl")},
                                        {"strategy", {{"engagement", "rerank"}, {"n", 6}}},
                                        {"provider", {{"mock", "echo_candidates"}}}}
                             .dump());

    const auto from_file = run_cli({"evaluate", "--config", dir.file("config.json")});
    INFO(from_file.err);
    CHECK(from_file.code == 0);
    CHECK(fs::exists(dir.file("from_config.jsonl")));
    CHECK(report_summary(dir.file("from_config.jsonl"))["config"]["strategy"]["engagement"] ==
          "rerank");

    // a flag beats the file
    const auto overridden = run_cli({"evaluate", "--config", dir.file("config.json"),
                                     "--strategy", "select_rerank", "--k", "8",
                                     "--report", dir.file("override.jsonl")});
    INFO(overridden.err);
    CHECK(overridden.code == 0);
    CHECK(report_summary(dir.file("override.jsonl"))["config"]["strategy"]["engagement"] ==
          "select_rerank");
    CHECK(!fs::exists(dir.file("from_config.jsonl") + ".overwritten"));
}

TEST_CASE("cli ingest prints corpus statistics") {
    const auto result = run_cli({"ingest", "--catalog", kFixtures + "/catalog.tsv", "--dialogues",
                                 kFixtures + "/dialogues.jsonl", "--kg", kFixtures + "/kg.tsv",
                                 "--seed", "42"});
    CHECK(result.code == 0);
    CHECK(result.out.find("12 items") != std::string::npos);
    CHECK(result.out.find("13 triples") != std::string::npos);
    CHECK(result.out.find("dialogues: 12") != std::string::npos);
}

TEST_CASE("cli recommend ranks items for stdin context") {
    TempDir dir;
    REQUIRE(train_fixture_model(dir).code == 0);
    auto args = fixture_args(dir);
    args.insert(args.begin(), "recommend");
    args.push_back("--top");
    args.push_back("4");
    const auto result = run_cli(args, "I loved The Matrix and Blade Runner\n");
    CHECK(result.code == 0);
    std::istringstream lines(result.out);
    std::string line;
    std::size_t rows = 0;
    while (std::getline(lines, line)) {
        if (!line.empty()) ++rows;
    }
    CHECK(rows == 4);
}
