#include "care/grounding.hpp"

#include <algorithm>
#include <string>
#include <vector>

#include "care/rng.hpp"
#include "care/text.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace care;
using testutil::make_catalog;

namespace {

// Quadratic full-matrix reference, independent of ground::levenshtein.
int dp_reference(const std::string& a, const std::string& b) {
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
}

std::string random_string(Rng& rng, std::size_t max_len = 30) {
    static const std::string alphabet = "abcdef gh";
    std::string s;
    const std::size_t len = rng.uniform_int(max_len + 1);
    for (std::size_t i = 0; i < len; ++i) s.push_back(alphabet[rng.uniform_int(alphabet.size())]);
    return s;
}

corpus::EntityCatalog fixture_catalog() {
    return make_catalog({"The Matrix", "Inception", "The Exorcist", "Disturbia", "Heat"},
                        {"horror"});
}

}  // namespace

TEST_CASE("parse_ranked_list extracts prefixed lines in order") {
    CHECK(ground::parse_ranked_list("1. The Exorcist\n2. Disturbia", 10) ==
          std::vector<std::string>{"The Exorcist", "Disturbia"});
    CHECK(ground::parse_ranked_list("Sure! Here are picks:\n1) A\nsome chatter\n2) B", 10) ==
          std::vector<std::string>{"A", "B"});
    CHECK(ground::parse_ranked_list("", 10).empty());
    CHECK(ground::parse_ranked_list("- Alien\n- Heat", 10) ==
          std::vector<std::string>{"Alien", "Heat"});
    CHECK(ground::parse_ranked_list("1. \"Quoted Title\"", 10) ==
          std::vector<std::string>{"Quoted Title"});
    CHECK(ground::parse_ranked_list("12. Later Entry", 10) ==
          std::vector<std::string>{"Later Entry"});
    // stops at n_max
    CHECK(ground::parse_ranked_list("1. A\n2. B\n3. C", 2) ==
          std::vector<std::string>{"A", "B"});
    // a bare number or empty item is not a title
    CHECK(ground::parse_ranked_list("1.\n2.   ", 10).empty());
}

TEST_CASE("levenshtein closed-form cases") {
    CHECK(ground::levenshtein("kitten", "sitting") == 3);
    CHECK(ground::levenshtein("same", "same") == 0);
    CHECK(ground::levenshtein("", "abc") == 3);
    CHECK(ground::levenshtein("abc", "") == 3);
    CHECK(ground::levenshtein("", "") == 0);
}

TEST_CASE("levenshtein equals the quadratic DP reference on 1000 random pairs") {
    Rng rng(77);
    for (int i = 0; i < 1000; ++i) {
        const std::string a = random_string(rng);
        const std::string b = random_string(rng);
        CHECK(ground::levenshtein(a, b) == dp_reference(a, b));
    }
}

TEST_CASE("levenshtein satisfies the metric axioms on 1000 random triples") {
    Rng rng(78);
    for (int i = 0; i < 1000; ++i) {
        const std::string a = random_string(rng, 15);
        const std::string b = random_string(rng, 15);
        const std::string c = random_string(rng, 15);
        const int ab = ground::levenshtein(a, b);
        const int bc = ground::levenshtein(b, c);
        const int ac = ground::levenshtein(a, c);
        CHECK(ab == ground::levenshtein(b, a));        // symmetry
        CHECK((ab == 0) == (a == b));                  // identity of indiscernibles
        CHECK(ac <= ab + bc);                          // triangle inequality
        CHECK(ab >= 0);
    }
}

TEST_CASE("match_item normalizes and thresholds") {
    const auto catalog = fixture_catalog();
    const ground::MatcherConfig config;  // theta 0.2

    CHECK(ground::match_item("The Matrix (1999)", catalog, config) == 0);
    CHECK(ground::match_item("the matrix", catalog, config) == 0);
    CHECK(ground::match_item("Inception", catalog, config) == 1);
    CHECK(ground::match_item("Disturbia!", catalog, config) == 3);

    // verify the out-of-domain verdict against a brute-force minimum
    const std::string junk = "Completely Unrelated Film XYZ";
    CHECK(!ground::match_item(junk, catalog, config).has_value());
    const std::string njunk = normalize_title(strip_year_suffix(junk));
    double best = 1e9;
    for (int id = 0; id < catalog.item_count; ++id) {
        for (const auto& alias : catalog.record(id).aliases) {
            const std::string na = normalize_title(strip_year_suffix(alias));
            const double d = dp_reference(njunk, na);
            best = std::min(best, d / std::max(njunk.size(), na.size()));
        }
    }
    CHECK(best > config.theta);

    // attributes are never matched
    CHECK(!ground::match_item("horror", catalog, config).has_value());

    // theta 1 accepts anything non-degenerate
    ground::MatcherConfig loose;
    loose.theta = 1.0;
    CHECK(ground::match_item("zzzz", catalog, loose).has_value());
}

TEST_CASE("ground_list flags junk, enforces candidates, and dedups") {
    const auto catalog = fixture_catalog();
    const ground::MatcherConfig config;

    SUBCASE("expansion keeps catalog misses as OOD entries") {
        const auto list = ground::ground_list({"The Matrix", "Zork Quest Nine", "Heat"}, catalog,
                                              std::nullopt, ground::Engagement::expansion, config,
                                              10);
        REQUIRE(list.entries.size() == 3);
        CHECK(list.entries[0].matched_item == 0);
        CHECK(list.entries[1].ood);
        CHECK(!list.entries[1].matched_item.has_value());
        CHECK(list.entries[2].matched_item == 4);
        CHECK(list.entries[1].source_rank == 2);
    }

    SUBCASE("rerank drops matches outside the candidate set") {
        const ground::CandidateIds candidates{{0, 1, 2}};
        // "Heat" is in the catalog (id 4) but not a candidate
        const auto list =
            ground::ground_list({"The Exorcist", "Heat", "The Matrix"}, catalog, candidates,
                                ground::Engagement::rerank, config, 10);
        REQUIRE(list.entries.size() == 3);
        CHECK(list.matched_ids() == std::vector<int>{2, 0});
        CHECK(list.entries[1].ood);
        CHECK(!list.entries[1].matched_item.has_value());
    }

    SUBCASE("duplicate matches keep the first occurrence") {
        const auto list =
            ground::ground_list({"Inception", "inception", "Inception (2010)"}, catalog,
                                std::nullopt, ground::Engagement::expansion, config, 10);
        CHECK(list.entries.size() == 1);
        CHECK(list.entries[0].matched_item == 1);
    }

    SUBCASE("output truncates to n") {
        const auto list = ground::ground_list({"The Matrix", "Inception", "Heat"}, catalog,
                                              std::nullopt, ground::Engagement::expansion, config,
                                              2);
        CHECK(list.entries.size() == 2);
    }

    SUBCASE("constrained strategies require candidates") {
        CHECK_THROWS_AS(ground::ground_list({"A"}, catalog, std::nullopt,
                                            ground::Engagement::rerank, config, 5),
                        std::invalid_argument);
        CHECK_THROWS_AS(ground::ground_list({"A"}, catalog, std::nullopt,
                                            ground::Engagement::select_rerank, config, 5),
                        std::invalid_argument);
    }
}

TEST_CASE("constrained grounding only ever returns candidate ids") {
    const auto catalog = fixture_catalog();
    const ground::MatcherConfig config;
    Rng rng(55);
    const std::vector<std::string> titles_pool = {
        "The Matrix", "Inception", "The Exorcist", "Disturbia", "Heat",
        "Junk Junk",  "Not Real",  "inception",    "HEAT",      "matrix"};
    for (int trial = 0; trial < 100; ++trial) {
        ground::CandidateIds candidates;
        for (int id = 0; id < catalog.item_count; ++id) {
            if (rng.bernoulli(0.5)) candidates.ids.push_back(id);
        }
        std::vector<std::string> titles;
        const std::size_t len = rng.uniform_int(8);
        for (std::size_t i = 0; i < len; ++i) {
            titles.push_back(titles_pool[rng.uniform_int(titles_pool.size())]);
        }
        const auto strategy =
            rng.bernoulli(0.5) ? ground::Engagement::rerank : ground::Engagement::select_rerank;
        const auto list = ground::ground_list(titles, catalog, candidates, strategy, config, 10);
        for (int id : list.matched_ids()) {
            CHECK(candidates.contains(id));
        }
    }
}

TEST_CASE("echoing candidate names grounds with zero OOD") {
    const auto catalog = fixture_catalog();
    const ground::CandidateIds candidates{{0, 2, 4}};
    std::vector<std::string> titles;
    for (int id : candidates.ids) titles.push_back(catalog.name(id));
    const auto list = ground::ground_list(titles, catalog, candidates,
                                          ground::Engagement::rerank, ground::MatcherConfig{}, 10);
    for (const auto& e : list.entries) CHECK(!e.ood);
    CHECK(list.matched_ids() == candidates.ids);
}

TEST_CASE("grounding is deterministic") {
    const auto catalog = fixture_catalog();
    const std::vector<std::string> titles = {"The Matrix", "wat", "Heat", "Inception"};
    const auto a = ground::ground_list(titles, catalog, std::nullopt,
                                       ground::Engagement::expansion, ground::MatcherConfig{}, 10);
    const auto b = ground::ground_list(titles, catalog, std::nullopt,
                                       ground::Engagement::expansion, ground::MatcherConfig{}, 10);
    REQUIRE(a.entries.size() == b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        CHECK(a.entries[i].raw_title == b.entries[i].raw_title);
        CHECK(a.entries[i].matched_item == b.entries[i].matched_item);
        CHECK(a.entries[i].ood == b.entries[i].ood);
    }
}
