#pragma once
// Text normalization shared by the entity linker and the fuzzy grounder.

#include <cstddef>
#include <string>
#include <vector>

namespace care {

struct Token {
    std::string lowered;  // lowercased alphanumeric run
    std::size_t begin = 0;  // byte offset into the source text
    std::size_t end = 0;    // one past the last byte
};

// Splits text into maximal alphanumeric runs, lowercasing ASCII letters.
// Bytes >= 0x80 are treated as word characters so UTF-8 titles stay intact.
std::vector<Token> tokenize(const std::string& text);

// Lowercase, strip punctuation, collapse whitespace: "The Matrix (1999)"
// becomes "the matrix 1999".
std::string normalize_title(const std::string& s);

// Removes one trailing " (NNNN)" year marker, pre-normalization form.
// Returns the input unchanged when no year suffix is present.
std::string strip_year_suffix(const std::string& s);

std::string trim(const std::string& s);

}  // namespace care
