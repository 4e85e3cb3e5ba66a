#pragma once
// Operator surface: ingest, train, recommend, evaluate, sweep, chat, link,
// ground, selftest. Exit codes: 0 success, 1 check/evaluation failure,
// 2 usage/configuration error.

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace care::cli {

// Parses args (without the program name) and dispatches. Streams are
// injectable so interactive commands stay testable.
int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out,
        std::ostream& err);

int run(const std::vector<std::string>& args);

// The nine adaptation x engagement prompts on the built-in fixture dialogue,
// as (name, assembled-text) pairs. Shared by the golden-file check and the
// test that maintains the committed goldens.
std::vector<std::pair<std::string, std::string>> golden_fixture_prompts();

}  // namespace care::cli
