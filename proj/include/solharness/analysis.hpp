#pragma once

// Pure text analytics: the sequence-matching similarity used by the stopping
// rule, and Solidity source metrics (LOC / PLOC / cyclomatic complexity).
// Everything here is a pure function over text; no I/O.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "solharness/model.hpp"

namespace solharness {

// ---------------------------------------------------------------------------
// Sequence matching ratio (Ratcliff-Obershelp)
//
// ratio = 2*M / (|a|+|b|) where M is the total of matched characters under
// recursive longest-common-contiguous-block matching. The longest block is
// tie-broken by earliest start in a, then earliest start in b; matching then
// recurses on the fragments to the left and to the right of the block.
// Both strings empty => 1.0.

namespace detail {

struct MatchBlock {
    std::size_t a = 0, b = 0, size = 0;
};

class SequenceMatcher {
public:
    SequenceMatcher(std::string_view a, std::string_view b) : a_(a), b_(b) {
        for (std::size_t j = 0; j < b_.size(); ++j) {
            b_positions_[static_cast<unsigned char>(b_[j])].push_back(j);
        }
    }

    std::size_t total_matched() {
        std::size_t total = 0;
        // Explicit worklist instead of recursion: fragments can nest deeply
        // on adversarial inputs. Order of processing does not affect M.
        std::vector<std::array<std::size_t, 4>> work{{0, a_.size(), 0, b_.size()}};
        while (!work.empty()) {
            auto [alo, ahi, blo, bhi] = work.back();
            work.pop_back();
            if (alo >= ahi || blo >= bhi) continue;
            const MatchBlock m = longest_match(alo, ahi, blo, bhi);
            if (m.size == 0) continue;
            total += m.size;
            work.push_back({alo, m.a, blo, m.b});
            work.push_back({m.a + m.size, ahi, m.b + m.size, bhi});
        }
        return total;
    }

private:
    // Dynamic program over rows of a: j2len[j] = length of the common suffix
    // of a[..i] and b[..j]. First maximal block found in (i asc, j asc) order
    // wins, which realizes the earliest-in-a-then-earliest-in-b tie-break.
    MatchBlock longest_match(std::size_t alo, std::size_t ahi, std::size_t blo,
                             std::size_t bhi) const {
        MatchBlock best{alo, blo, 0};
        std::map<std::size_t, std::size_t> j2len;
        for (std::size_t i = alo; i < ahi; ++i) {
            std::map<std::size_t, std::size_t> row;
            auto it = b_positions_.find(static_cast<unsigned char>(a_[i]));
            if (it != b_positions_.end()) {
                for (std::size_t j : it->second) {
                    if (j < blo) continue;
                    if (j >= bhi) break;
                    std::size_t k = 1;
                    if (j > blo) {
                        auto prev = j2len.find(j - 1);
                        if (prev != j2len.end()) k = prev->second + 1;
                    }
                    row[j] = k;
                    if (k > best.size) best = {i + 1 - k, j + 1 - k, k};
                }
            }
            j2len = std::move(row);
        }
        return best;
    }

    std::string_view a_, b_;
    std::map<unsigned char, std::vector<std::size_t>> b_positions_;
};

}  // namespace detail

inline double sequence_match_ratio(std::string_view a, std::string_view b) {
    if (a.empty() && b.empty()) return 1.0;
    detail::SequenceMatcher matcher(a, b);
    return 2.0 * static_cast<double>(matcher.total_matched()) /
           static_cast<double>(a.size() + b.size());
}

// ---------------------------------------------------------------------------
// Source metrics

struct ComplexityRule {
    std::set<std::string> decision_tokens = {"if",    "while", "for",     "case",   "catch",
                                             "&&",    "||",    "?",       "require", "assert"};
};

namespace detail {

enum class ByteKind : std::uint8_t { code, comment, string_lit };

inline bool ident_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '$';
}

// One pass over the source classifying every byte as code / comment /
// string-literal content. Comment delimiters are comment bytes; quotes and
// string contents are string bytes. Unterminated constructs run to EOF.
inline std::vector<ByteKind> classify_bytes(std::string_view src) {
    std::vector<ByteKind> kinds(src.size(), ByteKind::code);
    std::size_t i = 0;
    while (i < src.size()) {
        const char c = src[i];
        if (c == '/' && i + 1 < src.size() && src[i + 1] == '/') {
            while (i < src.size() && src[i] != '\n') kinds[i++] = ByteKind::comment;
        } else if (c == '/' && i + 1 < src.size() && src[i + 1] == '*') {
            kinds[i] = kinds[i + 1] = ByteKind::comment;
            i += 2;  // "/*/" must not self-close
            while (i < src.size()) {
                if (src[i] == '*' && i + 1 < src.size() && src[i + 1] == '/') {
                    kinds[i] = kinds[i + 1] = ByteKind::comment;
                    i += 2;
                    break;
                }
                kinds[i++] = ByteKind::comment;
            }
        } else if (c == '"' || c == '\'') {
            const char quote = c;
            kinds[i++] = ByteKind::string_lit;
            while (i < src.size()) {
                if (src[i] == '\n') break;  // Solidity strings do not span lines
                kinds[i] = ByteKind::string_lit;
                if (src[i] == '\\' && i + 1 < src.size() && src[i + 1] != '\n') {
                    kinds[i + 1] = ByteKind::string_lit;
                    i += 2;
                    continue;
                }
                const bool closing = src[i] == quote;
                ++i;
                if (closing) break;
            }
        } else {
            ++i;
        }
    }
    return kinds;
}

// Counts decision tokens over code bytes within [begin, end).
inline int count_decision_tokens(std::string_view src, const std::vector<ByteKind>& kinds,
                                 std::size_t begin, std::size_t end,
                                 const ComplexityRule& rule) {
    std::set<std::string> words;
    std::vector<std::string> ops;
    for (const auto& tok : rule.decision_tokens) {
        if (!tok.empty() && ident_char(tok.front())) {
            words.insert(tok);
        } else {
            ops.push_back(tok);
        }
    }
    std::sort(ops.begin(), ops.end(),
              [](const auto& x, const auto& y) { return x.size() > y.size(); });

    int count = 0;
    std::size_t i = begin;
    while (i < end) {
        if (kinds[i] != ByteKind::code) {
            ++i;
            continue;
        }
        if (ident_char(src[i])) {
            std::size_t j = i;
            while (j < end && kinds[j] == ByteKind::code && ident_char(src[j])) ++j;
            if (words.contains(std::string(src.substr(i, j - i)))) ++count;
            i = j;
            continue;
        }
        bool matched = false;
        for (const auto& op : ops) {
            if (i + op.size() <= end && src.substr(i, op.size()) == op) {
                bool all_code = true;
                for (std::size_t k = i; k < i + op.size(); ++k) {
                    if (kinds[k] != ByteKind::code) all_code = false;
                }
                if (all_code) {
                    ++count;
                    i += op.size();
                    matched = true;
                    break;
                }
            }
        }
        if (!matched) ++i;
    }
    return count;
}

}  // namespace detail

// Lexical scan; works on sources that do not compile. Functions are
// `function` definitions (constructors, modifiers, and receive/fallback
// blocks contribute to the file-level bucket instead). A declaration without
// a body (interfaces, abstract signatures) scores the baseline 1.
inline SourceMetrics source_metrics(std::string_view source,
                                    const ComplexityRule& rule = {}) {
    SourceMetrics out;
    if (source.empty()) return out;

    const auto kinds = detail::classify_bytes(source);

    // Physical and logical lines. A trailing newline does not open an
    // additional empty line.
    std::size_t line_start = 0;
    for (std::size_t i = 0; i <= source.size(); ++i) {
        if (i == source.size() || source[i] == '\n') {
            if (i == source.size() && i == line_start) break;  // no trailing fragment
            ++out.ploc;
            bool has_code = false;
            for (std::size_t k = line_start; k < i; ++k) {
                if (kinds[k] != detail::ByteKind::comment &&
                    !std::isspace(static_cast<unsigned char>(source[k]))) {
                    has_code = true;
                    break;
                }
            }
            if (has_code) ++out.loc;
            line_start = i + 1;
        }
    }

    // Function bodies: find `function` keywords, then the brace-balanced body
    // after the signature. `;` before any `{` means a bodiless declaration.
    struct Body {
        std::size_t begin, end;
    };
    std::vector<Body> bodies;  // for the top-level complement
    std::size_t i = 0;
    while (i < source.size()) {
        if (kinds[i] != detail::ByteKind::code || !detail::ident_char(source[i])) {
            ++i;
            continue;
        }
        std::size_t j = i;
        while (j < source.size() && kinds[j] == detail::ByteKind::code &&
               detail::ident_char(source[j])) {
            ++j;
        }
        if (source.substr(i, j - i) != "function") {
            i = j;
            continue;
        }
        // Name (may be absent in the old-style unnamed fallback).
        std::size_t k = j;
        while (k < source.size() &&
               (kinds[k] != detail::ByteKind::code ||
                std::isspace(static_cast<unsigned char>(source[k])))) {
            ++k;
        }
        std::string name = "(anonymous)";
        if (k < source.size() && kinds[k] == detail::ByteKind::code &&
            detail::ident_char(source[k])) {
            std::size_t e = k;
            while (e < source.size() && kinds[e] == detail::ByteKind::code &&
                   detail::ident_char(source[e])) {
                ++e;
            }
            name = std::string(source.substr(k, e - k));
            k = e;
        }
        // Scan the signature for the body opener or terminator.
        int paren = 0;
        std::size_t body_begin = std::string_view::npos, body_end = std::string_view::npos;
        std::size_t scan = k;
        for (; scan < source.size(); ++scan) {
            if (kinds[scan] != detail::ByteKind::code) continue;
            const char c = source[scan];
            if (c == '(') ++paren;
            else if (c == ')') --paren;
            else if (c == ';' && paren == 0) break;  // bodiless declaration
            else if (c == '{' && paren == 0) {
                body_begin = scan + 1;
                int depth = 1;
                std::size_t b = body_begin;
                for (; b < source.size(); ++b) {
                    if (kinds[b] != detail::ByteKind::code) continue;
                    if (source[b] == '{') ++depth;
                    else if (source[b] == '}' && --depth == 0) break;
                }
                body_end = b;  // npos-safe: b == size() when unterminated
                if (body_end > source.size()) body_end = source.size();
                break;
            }
        }
        FunctionComplexity fc;
        fc.name = name;
        if (body_begin != std::string_view::npos) {
            const std::size_t e = std::min(body_end, source.size());
            fc.complexity = 1 + detail::count_decision_tokens(source, kinds, body_begin, e, rule);
            bodies.push_back({body_begin, e});
            i = e;
        } else {
            fc.complexity = 1;
            i = std::min(scan + 1, source.size());
        }
        out.functions.push_back(fc);
    }

    // Top-level bucket: decision tokens anywhere outside function bodies
    // (modifiers, constructors, receive/fallback, file scope).
    int top_level = 0;
    std::size_t cursor = 0;
    std::sort(bodies.begin(), bodies.end(),
              [](const Body& x, const Body& y) { return x.begin < y.begin; });
    for (const Body& b : bodies) {
        if (b.begin > cursor) {
            top_level += detail::count_decision_tokens(source, kinds, cursor, b.begin, rule);
        }
        cursor = std::max(cursor, b.end);
    }
    if (cursor < source.size()) {
        top_level += detail::count_decision_tokens(source, kinds, cursor, source.size(), rule);
    }

    out.file_complexity = 1 + top_level;
    for (const auto& f : out.functions) out.file_complexity += f.complexity;
    return out;
}

}  // namespace solharness
