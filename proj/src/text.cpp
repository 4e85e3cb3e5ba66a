#include "care/text.hpp"

#include <cctype>

namespace care {

namespace {

bool is_word_byte(unsigned char c) {
    return std::isalnum(c) != 0 || c >= 0x80;
}

char lower_ascii(unsigned char c) {
    return static_cast<char>(std::tolower(c));
}

}  // namespace

std::vector<Token> tokenize(const std::string& text) {
    std::vector<Token> tokens;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
        if (!is_word_byte(static_cast<unsigned char>(text[i]))) {
            ++i;
            continue;
        }
        Token tok;
        tok.begin = i;
        while (i < n && is_word_byte(static_cast<unsigned char>(text[i]))) {
            tok.lowered.push_back(lower_ascii(static_cast<unsigned char>(text[i])));
            ++i;
        }
        tok.end = i;
        tokens.push_back(std::move(tok));
    }
    return tokens;
}

std::string normalize_title(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (const Token& t : tokenize(s)) {
        if (!out.empty()) out.push_back(' ');
        out += t.lowered;
    }
    return out;
}

std::string strip_year_suffix(const std::string& s) {
    std::string t = trim(s);
    if (t.size() < 6 || t.back() != ')') return s;
    std::size_t open = t.rfind('(');
    if (open == std::string::npos || open == 0) return s;
    std::string inside = t.substr(open + 1, t.size() - open - 2);
    if (inside.size() != 4) return s;
    for (char c : inside) {
        if (!std::isdigit(static_cast<unsigned char>(c))) return s;
    }
    return trim(t.substr(0, open));
}

std::string trim(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

}  // namespace care
