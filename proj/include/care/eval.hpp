#pragma once
// Evaluation harness: HIT/MRR/NDCG@K, out-of-domain ratio, popularity-vs-rank
// statistics, paired bootstrap significance, configuration sweeps, and
// line-delimited report files. Also hosts the per-example pipeline
// (recommend -> prompt -> complete -> ground) the CLI drives.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "care/corpus.hpp"
#include "care/grounding.hpp"
#include "care/linker.hpp"
#include "care/llm_client.hpp"
#include "care/prompting.hpp"
#include "care/seqrec.hpp"
#include "json.hpp"

namespace care::eval {

struct PerK {
    double hit = 0.0;
    double mrr = 0.0;
    double ndcg = 0.0;
};

struct MetricRow {
    std::map<int, double> hit;
    std::map<int, double> mrr;
    std::map<int, double> ndcg;
    std::size_t instance_count = 0;
};

// 1-based position of target within the ranking, or nullopt when absent.
std::optional<int> rank_of(int target, const std::vector<int>& ranking);

// hit@K = [rank <= K]; mrr@K = 1/rank inside the cutoff; ndcg@K =
// 1/log2(rank+1) inside the cutoff (single relevant item).
std::map<int, PerK> metrics_for_instance(int target, const std::vector<int>& ranking,
                                         const std::vector<int>& ks);

// Expands every example to one instance per target item, ranks matched items
// only, and averages uniformly over instances.
MetricRow evaluate(const std::vector<corpus::RecExample>& examples,
                   const std::vector<ground::RankedList>& rankings, const std::vector<int>& ks);

// Entries flagged OOD over total entries across all lists; 0/0 is 0.
double ood_ratio(const std::vector<ground::RankedList>& lists);

struct PositionStats {
    int position = 0;  // 1-based final-rank position over matched entries
    std::size_t count = 0;
    double mean = 0.0;
    double variance = 0.0;  // population
    double q1 = 0.0, median = 0.0, q3 = 0.0;
    double min = 0.0, max = 0.0;
};

struct PopularityStats {
    std::vector<PositionStats> positions;
};

// Item popularity = frequency in training-split ground truth.
std::map<int, int> popularity_table(const std::vector<corpus::RecExample>& train_examples);

PopularityStats popularity_stats(const std::vector<ground::RankedList>& lists,
                                 const std::vector<corpus::RecExample>& train_examples);

// Two-sided p-value for the mean difference of paired per-instance values via
// seeded bootstrap resampling.
double paired_bootstrap(const std::vector<double>& metric_a, const std::vector<double>& metric_b,
                        int resamples, std::uint64_t seed);

struct ExampleRecord {
    std::string example_id;
    std::string config_id;
    std::string raw_reply_hash;
    std::vector<int> matched_ids;
    std::vector<bool> ood_flags;  // per parsed entry, pre-removal order
    std::vector<std::optional<int>> per_target_ranks;
    int candidate_lines = 0;
    ground::RankedList list;  // retained for aggregation, not serialized
};

struct EvalReport {
    std::string config_id;
    nlohmann::json config;  // fully resolved provenance block
    MetricRow metrics;
    double ood = 0.0;
    PopularityStats popularity;
    std::vector<ExampleRecord> records;
};

// One JSON record per example plus a trailing summary record. Byte-stable for
// identical inputs.
void write_report(const EvalReport& report, const std::string& path);
nlohmann::json report_summary_json(const EvalReport& report);

struct PipelineContext {
    const corpus::EntityCatalog* catalog = nullptr;
    const linker::LinkIndex* index = nullptr;
    const rec::RecModel* model = nullptr;
    llm::Client* client = nullptr;
    prompt::PromptTemplates templates = prompt::PromptTemplates::defaults();
    prompt::StrategyConfig strategy;
    ground::MatcherConfig matcher;
    std::string llm_model_name = "mock";
    std::vector<int> ks = {5, 10};
    int max_concurrency = 1;
    bool zero_shot = false;  // omit candidates, producing the baseline prompt
    nlohmann::json provenance;  // embedded verbatim in the report
};

// Runs the full per-example pipeline over the given examples and aggregates
// a report. Examples are processed in example-id order; aggregation is a
// deterministic fold.
EvalReport run_pipeline(const PipelineContext& ctx,
                        std::vector<corpus::RecExample> examples,
                        const std::vector<corpus::RecExample>& train_examples);

struct SweepCell {
    prompt::StrategyConfig strategy;
};

struct SweepOutcome {
    std::string config_id;
    std::optional<EvalReport> report;
    std::string error;  // set when the cell failed
};

// One outcome per grid cell; per-cell failures are recorded without aborting
// the remaining cells. Empty grids are rejected.
std::vector<SweepOutcome> sweep(const std::vector<SweepCell>& grid,
                                const std::function<EvalReport(const SweepCell&)>& run_cell);

}  // namespace care::eval
