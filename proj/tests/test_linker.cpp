#include "care/linker.hpp"

#include <string>

#include "care/rng.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace care;
using testutil::make_catalog;

TEST_CASE("build_index normalizes aliases and adds year-stripped variants") {
    const auto catalog = make_catalog({"The Matrix (1999)"}, {});
    const auto index = linker::LinkIndex::build(catalog);
    CHECK(index.lookup("the matrix 1999") != nullptr);
    CHECK(index.lookup("the matrix") != nullptr);
    CHECK(index.lookup("matrix") == nullptr);
    CHECK(index.max_alias_tokens() == 3);
}

TEST_CASE("empty catalog builds an empty index") {
    const auto index = linker::LinkIndex::build(corpus::EntityCatalog{});
    CHECK(index.alias_count() == 0);
    CHECK(linker::link_utterance("anything at all", index).empty());
}

TEST_CASE("case-collisions keep both ids, items win ties") {
    const auto catalog = make_catalog({"IT"}, {"it"});
    const auto index = linker::LinkIndex::build(catalog);
    const auto* ids = index.lookup("it");
    REQUIRE(ids != nullptr);
    CHECK(ids->size() == 2);
    CHECK(index.resolve(*ids) == 0);  // the item
}

TEST_CASE("link_utterance finds mentions with exact spans") {
    const auto catalog = make_catalog({"The Matrix (1999)", "Inception"}, {});
    const auto index = linker::LinkIndex::build(catalog);

    const std::string text = "I loved The Matrix last night";
    const auto mentions = linker::link_utterance(text, index);
    REQUIRE(mentions.size() == 1);
    CHECK(mentions[0].entity_id == 0);
    CHECK(mentions[0].surface == "The Matrix");
    CHECK(text.substr(mentions[0].begin, mentions[0].end - mentions[0].begin) == "The Matrix");

    CHECK(linker::link_utterance("nothing to see here", index).empty());
}

TEST_CASE("longest alias wins over its prefix") {
    const auto catalog = make_catalog({"Matrix", "Matrix Reloaded"}, {});
    const auto index = linker::LinkIndex::build(catalog);
    const auto mentions = linker::link_utterance("Matrix Reloaded", index);
    REQUIRE(mentions.size() == 1);
    CHECK(mentions[0].entity_id == 1);
    CHECK(mentions[0].surface == "Matrix Reloaded");
}

TEST_CASE("matching respects word boundaries") {
    const auto catalog = make_catalog({}, {"it"});
    const auto index = linker::LinkIndex::build(catalog);
    CHECK(linker::link_utterance("italian food", index).empty());
    CHECK(linker::link_utterance("I like it a lot", index).size() == 1);
}

TEST_CASE("extract_sequence concatenates in dialogue order with repeats") {
    const auto catalog = make_catalog({"Alien", "Heat"}, {});
    const auto index = linker::LinkIndex::build(catalog);
    const std::vector<corpus::Utterance> context = {
        {corpus::Speaker::user, "Alien was great", 0},
        {corpus::Speaker::system, "Heat then Alien again", 1},
    };
    const auto seq = linker::extract_sequence(context, index);
    CHECK(seq.entries == std::vector<int>{0, 1, 0});

    CHECK(linker::extract_sequence({}, index).empty());
}

TEST_CASE("extract_sequence keeps the most recent entries on overflow") {
    const auto catalog = make_catalog({"aa", "bb", "cc"}, {});
    const auto index = linker::LinkIndex::build(catalog);
    std::vector<corpus::Utterance> context;
    const char* names[] = {"aa", "bb", "cc"};
    for (int i = 0; i < 60; ++i) {
        context.push_back({corpus::Speaker::user, names[i % 3], i});
    }
    const auto seq = linker::extract_sequence(context, index, 50);
    REQUIRE(seq.entries.size() == 50);
    // entries 10..59 of the full stream survive
    for (int i = 0; i < 50; ++i) CHECK(seq.entries[i] == (i + 10) % 3);
}

TEST_CASE("mentions never overlap and linking is idempotent") {
    const auto catalog =
        make_catalog({"Blade Runner", "Blade", "Runner", "Alien"}, {"sci-fi"});
    const auto index = linker::LinkIndex::build(catalog);
    Rng rng(31);
    const std::vector<std::string> words = {"Blade", "Runner",  "Alien", "sci-fi", "and",
                                            "weird", "watched", "it",    "twice"};
    for (int trial = 0; trial < 200; ++trial) {
        std::string text;
        const int len = 1 + static_cast<int>(rng.uniform_int(12));
        for (int i = 0; i < len; ++i) {
            if (i > 0) text += " ";
            text += words[rng.uniform_int(words.size())];
        }
        const auto mentions = linker::link_utterance(text, index);
        for (std::size_t i = 1; i < mentions.size(); ++i) {
            CHECK(mentions[i - 1].end <= mentions[i].begin);
            CHECK(mentions[i - 1].begin < mentions[i].begin);
        }
        const auto again = linker::link_utterance(text, index);
        REQUIRE(again.size() == mentions.size());
        for (std::size_t i = 0; i < mentions.size(); ++i) {
            CHECK(again[i].entity_id == mentions[i].entity_id);
            CHECK(again[i].begin == mentions[i].begin);
            CHECK(again[i].end == mentions[i].end);
        }
    }
}

TEST_CASE("extraction is sentiment-blind") {
    const auto catalog = make_catalog({"Alien"}, {});
    const auto index = linker::LinkIndex::build(catalog);
    const std::vector<corpus::Utterance> love = {{corpus::Speaker::user, "I love Alien", 0}};
    const std::vector<corpus::Utterance> hate = {{corpus::Speaker::user, "I hate Alien", 0}};
    CHECK(linker::extract_sequence(love, index).entries ==
          linker::extract_sequence(hate, index).entries);
}

TEST_CASE("multibyte titles link intact") {
    const auto catalog = make_catalog({"Amélie", "Léon"}, {});
    const auto index = linker::LinkIndex::build(catalog);
    const std::string text = "We watched Amélie after Léon";
    const auto mentions = linker::link_utterance(text, index);
    REQUIRE(mentions.size() == 2);
    CHECK(mentions[0].entity_id == 0);
    CHECK(mentions[0].surface == "Amélie");
    CHECK(mentions[1].entity_id == 1);
}

TEST_CASE("alias ambiguity resolves to the lower id within a kind") {
    auto catalog = make_catalog({"Dune", "Dune Part Two"}, {});
    catalog.records[1].aliases.push_back("Dune");  // both items share the alias
    const auto index = linker::LinkIndex::build(catalog);
    const auto mentions = linker::link_utterance("watched Dune yesterday", index);
    REQUIRE(mentions.size() == 1);
    CHECK(mentions[0].entity_id == 0);
}
