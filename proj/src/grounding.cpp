#include "care/grounding.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>
#include <stdexcept>

#include "care/text.hpp"

namespace care::ground {

std::vector<int> RankedList::matched_ids() const {
    std::vector<int> ids;
    for (const GroundedEntry& e : entries) {
        if (e.matched_item) ids.push_back(*e.matched_item);
    }
    return ids;
}

bool CandidateIds::contains(int id) const {
    return std::find(ids.begin(), ids.end(), id) != ids.end();
}

namespace {

// Returns the title when `line` is a ranked-list line, otherwise nullopt.
std::optional<std::string> parse_title_line(const std::string& line) {
    std::size_t i = 0;
    const std::size_t n = line.size();
    while (i < n && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= n) return std::nullopt;

    if (std::isdigit(static_cast<unsigned char>(line[i]))) {
        std::size_t digits = i;
        while (digits < n && std::isdigit(static_cast<unsigned char>(line[digits]))) ++digits;
        if (digits >= n || (line[digits] != '.' && line[digits] != ')')) return std::nullopt;
        i = digits + 1;
    } else if (line[i] == '-') {
        i += 1;
    } else {
        return std::nullopt;
    }

    std::string title = trim(line.substr(i));
    while (title.size() >= 2 && ((title.front() == '"' && title.back() == '"') ||
                                 (title.front() == '\'' && title.back() == '\''))) {
        title = trim(title.substr(1, title.size() - 2));
    }
    if (title.empty()) return std::nullopt;
    return title;
}

}  // namespace

std::vector<std::string> parse_ranked_list(const std::string& text, std::size_t n_max) {
    std::vector<std::string> titles;
    std::stringstream stream(text);
    std::string line;
    while (titles.size() < n_max && std::getline(stream, line)) {
        if (auto title = parse_title_line(line)) {
            titles.push_back(std::move(*title));
        }
    }
    return titles;
}

int levenshtein(const std::string& a, const std::string& b) {
    const std::size_t n = a.size(), m = b.size();
    if (n == 0) return static_cast<int>(m);
    if (m == 0) return static_cast<int>(n);

    // One rolling row keeps memory linear in |b|.
    std::vector<int> row(m + 1);
    for (std::size_t j = 0; j <= m; ++j) row[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        int diag = row[0];
        row[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= m; ++j) {
            const int cost = a[i - 1] == b[j - 1] ? 0 : 1;
            const int next = std::min({row[j] + 1, row[j - 1] + 1, diag + cost});
            diag = row[j];
            row[j] = next;
        }
    }
    return row[m];
}

std::optional<int> match_item(const std::string& raw_title, const corpus::EntityCatalog& catalog,
                              const MatcherConfig& config) {
    const std::string title = normalize_title(strip_year_suffix(raw_title));

    bool found = false;
    double best_norm = 0.0;
    int best_raw = 0;
    int best_id = -1;
    for (int id = 0; id < catalog.item_count; ++id) {
        for (const std::string& alias : catalog.record(id).aliases) {
            const std::string norm_alias = normalize_title(strip_year_suffix(alias));
            const int d = levenshtein(title, norm_alias);
            const std::size_t longest = std::max(title.size(), norm_alias.size());
            const double norm = longest == 0 ? 0.0 : static_cast<double>(d) / longest;
            if (norm > config.theta) continue;
            if (!found || norm < best_norm || (norm == best_norm && d < best_raw) ||
                (norm == best_norm && d == best_raw && id < best_id)) {
                found = true;
                best_norm = norm;
                best_raw = d;
                best_id = id;
            }
        }
    }
    if (!found) return std::nullopt;
    return best_id;
}

RankedList ground_list(const std::vector<std::string>& raw_titles,
                       const corpus::EntityCatalog& catalog,
                       const std::optional<CandidateIds>& candidates, Engagement strategy,
                       const MatcherConfig& config, std::size_t n) {
    const bool constrained = strategy == Engagement::rerank || strategy == Engagement::select_rerank;
    if (constrained && !candidates) {
        throw std::invalid_argument("strategy requires a candidate set for grounding");
    }

    RankedList list;
    list.strategy = strategy;
    std::set<int> seen;
    int source_rank = 0;
    for (const std::string& title : raw_titles) {
        if (list.entries.size() >= n) break;
        ++source_rank;

        GroundedEntry entry;
        entry.raw_title = title;
        entry.source_rank = source_rank;
        entry.matched_item = match_item(title, catalog, config);
        if (entry.matched_item && constrained && !candidates->contains(*entry.matched_item)) {
            entry.matched_item.reset();  // outside the candidate set
        }
        if (entry.matched_item) {
            if (!seen.insert(*entry.matched_item).second) continue;  // dedup, first wins
        }
        entry.ood = !entry.matched_item.has_value();
        list.entries.push_back(std::move(entry));
    }
    return list;
}

const char* engagement_name(Engagement e) {
    switch (e) {
        case Engagement::expansion: return "expansion";
        case Engagement::rerank: return "rerank";
        case Engagement::select_rerank: return "select_rerank";
    }
    return "?";
}

Engagement engagement_from_name(const std::string& name) {
    if (name == "expansion") return Engagement::expansion;
    if (name == "rerank") return Engagement::rerank;
    if (name == "select_rerank") return Engagement::select_rerank;
    throw std::invalid_argument("unknown engagement strategy: " + name);
}

}  // namespace care::ground
