#pragma once

// Slash-aware glob matching for sandbox deny/noise patterns.
//
//   *   any run of characters within one path component (never crosses '/')
//   ?   exactly one character within a component
//   **  as a whole component: zero or more path components
//
// Paths are matched against their '/'-separated generic form. A pattern
// without '/' is matched against every path component would be surprising,
// so instead it matches only single-component paths; use "**/name" to match
// a name at any depth.

#include <string>
#include <string_view>
#include <vector>

namespace solharness {

namespace detail {

inline std::vector<std::string_view> split_slash(std::string_view s) {
    std::vector<std::string_view> parts;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == '/') {
            if (i > start) parts.push_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    return parts;
}

// Classic iterative wildcard match for one component. '*' here never sees a
// '/' because components are pre-split.
inline bool component_match(std::string_view pat, std::string_view text) {
    std::size_t p = 0, t = 0;
    std::size_t star_p = std::string_view::npos, star_t = 0;
    while (t < text.size()) {
        if (p < pat.size() && (pat[p] == text[t] || pat[p] == '?')) {
            ++p;
            ++t;
        } else if (p < pat.size() && pat[p] == '*') {
            // Collapse star runs ("**" inside a component degrades to "*").
            while (p < pat.size() && pat[p] == '*') ++p;
            star_p = p;
            star_t = t;
        } else if (star_p != std::string_view::npos) {
            p = star_p;
            t = ++star_t;
        } else {
            return false;
        }
    }
    while (p < pat.size() && pat[p] == '*') ++p;
    return p == pat.size();
}

inline bool glob_match_parts(const std::vector<std::string_view>& pat, std::size_t pi,
                             const std::vector<std::string_view>& path, std::size_t ti) {
    while (pi < pat.size()) {
        if (pat[pi] == "**") {
            // Try consuming 0..N path components.
            if (pi + 1 == pat.size()) return true;
            for (std::size_t skip = ti; skip <= path.size(); ++skip) {
                if (glob_match_parts(pat, pi + 1, path, skip)) return true;
            }
            return false;
        }
        if (ti >= path.size() || !component_match(pat[pi], path[ti])) return false;
        ++pi;
        ++ti;
    }
    return ti == path.size();
}

}  // namespace detail

inline bool glob_match(std::string_view pattern, std::string_view path) {
    const auto pat_parts = detail::split_slash(pattern);
    const auto path_parts = detail::split_slash(path);
    return detail::glob_match_parts(pat_parts, 0, path_parts, 0);
}

}  // namespace solharness
