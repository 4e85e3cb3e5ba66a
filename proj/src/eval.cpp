#include "care/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include "care/digest.hpp"
#include "care/rng.hpp"

namespace care::eval {

using nlohmann::json;

std::optional<int> rank_of(int target, const std::vector<int>& ranking) {
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        if (ranking[i] == target) return static_cast<int>(i) + 1;
    }
    return std::nullopt;
}

std::map<int, PerK> metrics_for_instance(int target, const std::vector<int>& ranking,
                                         const std::vector<int>& ks) {
    const std::optional<int> rank = rank_of(target, ranking);
    std::map<int, PerK> out;
    for (int k : ks) {
        if (k <= 0) throw std::invalid_argument("metric cutoffs must be positive");
        PerK m;
        if (rank && *rank <= k) {
            m.hit = 1.0;
            m.mrr = 1.0 / static_cast<double>(*rank);
            m.ndcg = 1.0 / std::log2(static_cast<double>(*rank) + 1.0);
        }
        out[k] = m;
    }
    return out;
}

MetricRow evaluate(const std::vector<corpus::RecExample>& examples,
                   const std::vector<ground::RankedList>& rankings, const std::vector<int>& ks) {
    if (examples.size() != rankings.size()) {
        throw std::invalid_argument("one ranking per example required (got " +
                                    std::to_string(rankings.size()) + " rankings for " +
                                    std::to_string(examples.size()) + " examples)");
    }
    MetricRow row;
    for (int k : ks) {
        row.hit[k] = 0.0;
        row.mrr[k] = 0.0;
        row.ndcg[k] = 0.0;
    }
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const std::vector<int> matched = rankings[i].matched_ids();
        for (int target : examples[i].target_items) {
            const auto per_k = metrics_for_instance(target, matched, ks);
            for (const auto& [k, m] : per_k) {
                row.hit[k] += m.hit;
                row.mrr[k] += m.mrr;
                row.ndcg[k] += m.ndcg;
            }
            ++row.instance_count;
        }
    }
    if (row.instance_count > 0) {
        const double denom = static_cast<double>(row.instance_count);
        for (int k : ks) {
            row.hit[k] /= denom;
            row.mrr[k] /= denom;
            row.ndcg[k] /= denom;
        }
    }
    return row;
}

double ood_ratio(const std::vector<ground::RankedList>& lists) {
    std::size_t ood = 0, total = 0;
    for (const ground::RankedList& list : lists) {
        for (const ground::GroundedEntry& e : list.entries) {
            total += 1;
            if (e.ood) ood += 1;
        }
    }
    return total == 0 ? 0.0 : static_cast<double>(ood) / static_cast<double>(total);
}

std::map<int, int> popularity_table(const std::vector<corpus::RecExample>& train_examples) {
    std::map<int, int> table;
    for (const corpus::RecExample& ex : train_examples) {
        for (int item : ex.target_items) table[item] += 1;
    }
    return table;
}

namespace {

// Linear-interpolation quantile over a sorted sample.
double quantile_sorted(const std::vector<double>& sorted, double p) {
    if (sorted.size() == 1) return sorted[0];
    const double h = static_cast<double>(sorted.size() - 1) * p;
    const std::size_t lo = static_cast<std::size_t>(h);
    if (lo + 1 >= sorted.size()) return sorted.back();
    const double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

}  // namespace

PopularityStats popularity_stats(const std::vector<ground::RankedList>& lists,
                                 const std::vector<corpus::RecExample>& train_examples) {
    const std::map<int, int> table = popularity_table(train_examples);

    std::size_t max_len = 0;
    for (const ground::RankedList& list : lists) {
        max_len = std::max(max_len, list.matched_ids().size());
    }

    PopularityStats stats;
    for (std::size_t pos = 0; pos < max_len; ++pos) {
        std::vector<double> values;
        for (const ground::RankedList& list : lists) {
            const std::vector<int> matched = list.matched_ids();
            if (pos >= matched.size()) continue;
            const auto it = table.find(matched[pos]);
            values.push_back(it == table.end() ? 0.0 : static_cast<double>(it->second));
        }
        PositionStats ps;
        ps.position = static_cast<int>(pos) + 1;
        ps.count = values.size();
        if (!values.empty()) {
            std::sort(values.begin(), values.end());
            double sum = 0.0;
            for (double v : values) sum += v;
            ps.mean = sum / static_cast<double>(values.size());
            double var = 0.0;
            for (double v : values) var += (v - ps.mean) * (v - ps.mean);
            ps.variance = var / static_cast<double>(values.size());
            ps.min = values.front();
            ps.max = values.back();
            ps.q1 = quantile_sorted(values, 0.25);
            ps.median = quantile_sorted(values, 0.5);
            ps.q3 = quantile_sorted(values, 0.75);
        }
        stats.positions.push_back(ps);
    }
    return stats;
}

double paired_bootstrap(const std::vector<double>& metric_a, const std::vector<double>& metric_b,
                        int resamples, std::uint64_t seed) {
    if (metric_a.size() != metric_b.size()) {
        throw std::invalid_argument("paired bootstrap needs equal-length vectors");
    }
    if (metric_a.size() < 2) throw std::invalid_argument("need at least 2 paired observations");
    if (resamples < 1) throw std::invalid_argument("resamples must be positive");

    const std::size_t n = metric_a.size();
    Rng rng(seed);
    int non_positive = 0, non_negative = 0;
    for (int r = 0; r < resamples; ++r) {
        double diff = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t j = static_cast<std::size_t>(rng.uniform_int(n));
            diff += metric_a[j] - metric_b[j];
        }
        if (diff <= 0.0) ++non_positive;
        if (diff >= 0.0) ++non_negative;
    }
    const double p = 2.0 * static_cast<double>(std::min(non_positive, non_negative)) /
                     static_cast<double>(resamples);
    return std::min(1.0, p);
}

namespace {

json metric_row_json(const MetricRow& row) {
    json out;
    auto fill = [](const std::map<int, double>& m) {
        json j;
        for (const auto& [k, v] : m) j[std::to_string(k)] = v;
        return j;
    };
    out["hit"] = fill(row.hit);
    out["mrr"] = fill(row.mrr);
    out["ndcg"] = fill(row.ndcg);
    out["instances"] = row.instance_count;
    return out;
}

json popularity_json(const PopularityStats& stats) {
    json out = json::array();
    for (const PositionStats& ps : stats.positions) {
        json j;
        j["position"] = ps.position;
        j["count"] = ps.count;
        if (ps.count > 0) {
            j["mean"] = ps.mean;
            j["variance"] = ps.variance;
            j["q1"] = ps.q1;
            j["median"] = ps.median;
            j["q3"] = ps.q3;
            j["min"] = ps.min;
            j["max"] = ps.max;
        }
        out.push_back(std::move(j));
    }
    return out;
}

}  // namespace

json report_summary_json(const EvalReport& report) {
    json summary;
    summary["type"] = "summary";
    summary["config_id"] = report.config_id;
    summary["config"] = report.config;
    summary["metrics"] = metric_row_json(report.metrics);
    summary["ood_ratio"] = report.ood;
    summary["popularity"] = popularity_json(report.popularity);
    summary["examples"] = report.records.size();
    return summary;
}

void write_report(const EvalReport& report, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write report: " + path);
    for (const ExampleRecord& rec : report.records) {
        json j;
        j["type"] = "example";
        j["example_id"] = rec.example_id;
        j["config_id"] = rec.config_id;
        j["raw_reply_hash"] = rec.raw_reply_hash;
        j["matched_ids"] = rec.matched_ids;
        j["ood_flags"] = rec.ood_flags;
        json ranks = json::array();
        for (const auto& r : rec.per_target_ranks) {
            if (r) {
                ranks.push_back(*r);
            } else {
                ranks.push_back(nullptr);
            }
        }
        j["per_target_ranks"] = std::move(ranks);
        j["candidate_lines"] = rec.candidate_lines;
        out << j.dump() << "\n";
    }
    out << report_summary_json(report).dump() << "\n";
    if (!out) throw std::runtime_error("report write failed: " + path);
}

EvalReport run_pipeline(const PipelineContext& ctx, std::vector<corpus::RecExample> examples,
                        const std::vector<corpus::RecExample>& train_examples) {
    if (ctx.catalog == nullptr || ctx.index == nullptr || ctx.model == nullptr ||
        ctx.client == nullptr) {
        throw std::invalid_argument("pipeline context is incomplete");
    }
    ctx.strategy.validate();

    std::sort(examples.begin(), examples.end(),
              [](const corpus::RecExample& a, const corpus::RecExample& b) {
                  return a.example_id() < b.example_id();
              });

    // The zero-shot baseline assembles without candidates, so the constrained
    // engagement preconditions must not apply to it.
    prompt::StrategyConfig prompt_config = ctx.strategy;
    if (ctx.zero_shot) {
        prompt_config.engagement = ground::Engagement::expansion;
        prompt_config.k = ctx.strategy.n;
    }
    const std::string config_id =
        ctx.zero_shot ? ctx.strategy.id() + ",zero_shot" : ctx.strategy.id();
    std::vector<ExampleRecord> records(examples.size());

    auto process = [&](std::size_t i) {
        const corpus::RecExample& ex = examples[i];
        const linker::EntitySequence seq = linker::extract_sequence(ex.context, *ctx.index);

        std::optional<rec::CandidateSet> candidates;
        if (!ctx.zero_shot) {
            candidates = rec::recommend(*ctx.model, seq, ctx.strategy.k);
        }
        const prompt::PromptBundle bundle = prompt::assemble(
            prompt_config, ex.context, candidates, *ctx.catalog, *ctx.index, ctx.templates);

        llm::LLMRequest request;
        request.model_name = ctx.llm_model_name;
        request.temperature = 0.0;
        request.messages = {{"system", bundle.assembled}, {"user", "Respond now."}};
        const llm::LLMResponse response = ctx.client->complete(request);

        const std::vector<std::string> titles = ground::parse_ranked_list(
            response.text, static_cast<std::size_t>(ctx.strategy.n));
        std::optional<ground::CandidateIds> cand_ids;
        if (candidates) cand_ids = ground::CandidateIds{candidates->ids()};
        // Without candidates (the zero-shot baseline) there is no set to
        // constrain against, so grounding falls back to unconstrained mode.
        const ground::Engagement grounding_strategy =
            ctx.zero_shot ? ground::Engagement::expansion : ctx.strategy.engagement;
        ground::RankedList list =
            ground::ground_list(titles, *ctx.catalog, cand_ids, grounding_strategy,
                                ctx.matcher, static_cast<std::size_t>(ctx.strategy.n));

        ExampleRecord rec;
        rec.example_id = ex.example_id();
        rec.config_id = config_id;
        rec.raw_reply_hash = sha256_hex(response.text);
        rec.matched_ids = list.matched_ids();
        for (const ground::GroundedEntry& e : list.entries) rec.ood_flags.push_back(e.ood);
        for (int target : ex.target_items) {
            rec.per_target_ranks.push_back(rank_of(target, rec.matched_ids));
        }
        if (candidates) rec.candidate_lines = static_cast<int>(candidates->entries.size());
        rec.list = std::move(list);
        records[i] = std::move(rec);
    };

    const int workers = std::max(1, ctx.max_concurrency);
    if (workers == 1 || examples.size() <= 1) {
        for (std::size_t i = 0; i < examples.size(); ++i) process(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        std::atomic<bool> failed{false};
        std::string first_error;
        std::mutex error_mutex;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                while (true) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= examples.size() || failed.load()) return;
                    try {
                        process(i);
                    } catch (const std::exception& e) {
                        std::lock_guard lock(error_mutex);
                        if (!failed.exchange(true)) first_error = e.what();
                        return;
                    }
                }
            });
        }
        for (std::thread& t : pool) t.join();
        if (failed.load()) throw std::runtime_error("pipeline failure: " + first_error);
    }

    EvalReport report;
    report.config_id = config_id;
    report.config = ctx.provenance.is_null() ? json::object() : ctx.provenance;
    report.config["config_id"] = config_id;
    report.records = std::move(records);

    std::vector<ground::RankedList> lists;
    lists.reserve(report.records.size());
    for (const ExampleRecord& rec : report.records) lists.push_back(rec.list);
    report.metrics = evaluate(examples, lists, ctx.ks);
    report.ood = ood_ratio(lists);
    report.popularity = popularity_stats(lists, train_examples);
    return report;
}

std::vector<SweepOutcome> sweep(const std::vector<SweepCell>& grid,
                                const std::function<EvalReport(const SweepCell&)>& run_cell) {
    if (grid.empty()) throw std::invalid_argument("sweep grid is empty");
    std::vector<SweepOutcome> outcomes;
    outcomes.reserve(grid.size());
    for (const SweepCell& cell : grid) {
        SweepOutcome outcome;
        outcome.config_id = cell.strategy.id();
        try {
            outcome.report = run_cell(cell);
        } catch (const std::exception& e) {
            outcome.error = e.what();
        }
        outcomes.push_back(std::move(outcome));
    }
    return outcomes;
}

}  // namespace care::eval
