#pragma once

#include <array>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "voxrnn/errors.hpp"

namespace voxrnn {

inline constexpr std::array<std::string_view, 4> kMetricNames = {
    "production_quality", "production_complexity", "content_enjoyment", "content_usefulness"};
inline constexpr std::array<std::string_view, 4> kMetricTitles = {
    "Production Quality", "Production Complexity", "Content Enjoyment", "Content Usefulness"};

struct SystemScores {
    std::string name;
    std::array<double, 4> scores{};
    friend bool operator==(const SystemScores&, const SystemScores&) = default;
};

using ScoreFile = std::vector<SystemScores>;

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline double parse_score(const std::string& tok, std::string_view field, std::size_t line) {
    const std::string where = "line " + std::to_string(line) + ", field " + std::string(field);
    char* end = nullptr;
    errno = 0;
    const double v = std::strtod(tok.c_str(), &end);
    if (tok.empty() || end != tok.c_str() + tok.size() || errno == ERANGE)
        throw data_error(where + ": '" + tok + "' is not a number");
    if (!(v >= 0.0 && v <= 10.0)) throw data_error(where + ": " + tok + " outside [0, 10]");
    return v;
}

} // namespace detail

/// One system per line: a name (may contain spaces) followed by four reals.
inline ScoreFile parse_scores(std::string_view text) {
    ScoreFile out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::vector<std::string> toks;
        for (std::string t; ls >> t;) toks.push_back(t);
        if (toks.empty()) continue;
        if (toks.size() < 5)
            throw data_error("line " + std::to_string(line_no) + ", field name: expected a name and 4 scores");
        SystemScores s;
        for (std::size_t i = 0; i + 4 < toks.size(); ++i) s.name += (i ? " " : "") + toks[i];
        for (std::size_t m = 0; m < 4; ++m)
            s.scores[m] = detail::parse_score(toks[toks.size() - 4 + m], kMetricNames[m], line_no);
        out.push_back(std::move(s));
    }
    if (out.empty()) throw data_error("score file: no systems");
    return out;
}

/// Shortest fixed-point rendering with at least two decimals that parses back
/// to exactly the same double.
inline std::string format_score(double v) {
    char buf[64];
    for (int p = 2; p <= 17; ++p) {
        std::snprintf(buf, sizeof buf, "%.*f", p, v);
        if (std::strtod(buf, nullptr) == v) return buf;
    }
    return buf;
}

/// Markdown-style table; '*' marks the maximum of each metric (all ties).
inline std::string render_report(const ScoreFile& scores) {
    if (scores.empty()) throw data_error("score file: no systems");
    std::array<double, 4> best{};
    best.fill(-1.0);
    for (const auto& s : scores)
        for (std::size_t m = 0; m < 4; ++m) best[m] = std::max(best[m], s.scores[m]);
    std::string out = "| System |";
    for (auto t : kMetricTitles) out += " " + std::string(t) + " |";
    out += "\n|---|---|---|---|---|\n";
    for (const auto& s : scores) {
        out += "| " + s.name + " |";
        for (std::size_t m = 0; m < 4; ++m)
            out += " " + format_score(s.scores[m]) + (s.scores[m] == best[m] ? "*" : "") + " |";
        out += "\n";
    }
    return out;
}

/// Inverse of render_report.
inline ScoreFile parse_report(std::string_view table) {
    ScoreFile out;
    std::istringstream in{std::string(table)};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no <= 2 || detail::trim(line).empty()) continue;
        std::vector<std::string> cells;
        std::size_t pos = line.find('|');
        while (pos != std::string::npos) {
            const std::size_t next = line.find('|', pos + 1);
            if (next == std::string::npos) break;
            cells.push_back(detail::trim(std::string_view(line).substr(pos + 1, next - pos - 1)));
            pos = next;
        }
        if (cells.size() != 5) throw data_error("report line " + std::to_string(line_no) + ": expected 5 cells");
        SystemScores s{cells[0], {}};
        for (std::size_t m = 0; m < 4; ++m) {
            std::string c = cells[m + 1];
            if (!c.empty() && c.back() == '*') c.pop_back();
            s.scores[m] = detail::parse_score(c, kMetricNames[m], line_no);
        }
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace voxrnn
