#pragma once

#include "hglmm/error.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

namespace hglmm::io {

/// In-memory CSV: a header and string cells. Row numbers in error messages
/// are 1-based file lines (the header is line 1).
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t n_rows() const { return rows.size(); }

    bool has_column(std::string_view name) const {
        for (const auto& h : header)
            if (h == name) return true;
        return false;
    }

    std::size_t column(std::string_view name) const {
        for (std::size_t c = 0; c < header.size(); ++c)
            if (header[c] == name) return c;
        throw DataError("missing column '" + std::string(name) + "'");
    }

    const std::string& cell(std::size_t row, std::size_t col) const { return rows.at(row).at(col); }

    /// Appends a column, or overwrites it when the name exists.
    void set_column(const std::string& name, std::vector<std::string> values) {
        if (values.size() != rows.size()) throw UsageError("column '" + name + "' has the wrong length");
        std::size_t c = header.size();
        for (std::size_t k = 0; k < header.size(); ++k)
            if (header[k] == name) c = k;
        if (c == header.size()) {
            header.push_back(name);
            for (std::size_t r = 0; r < rows.size(); ++r) rows[r].push_back(std::move(values[r]));
        } else {
            for (std::size_t r = 0; r < rows.size(); ++r) rows[r][c] = std::move(values[r]);
        }
    }

    Table select_rows(const std::vector<std::size_t>& idx) const {
        Table t;
        t.header = header;
        t.rows.reserve(idx.size());
        for (auto r : idx) t.rows.push_back(rows.at(r));
        return t;
    }
};

namespace detail {

// Reads one RFC 4180 record. Returns false at end of input.
inline bool read_record(std::istream& in, std::vector<std::string>& out, std::size_t& line) {
    out.clear();
    int ch = in.peek();
    if (ch == std::char_traits<char>::eof()) return false;
    ++line;
    const std::size_t start_line = line;
    std::string field;
    bool quoted = false, after_quote = false;
    while (true) {
        ch = in.get();
        if (ch == std::char_traits<char>::eof()) {
            if (quoted) throw DataError("line " + std::to_string(start_line) + ": unterminated quoted field");
            out.push_back(std::move(field));
            return true;
        }
        const char c = static_cast<char>(ch);
        if (quoted) {
            if (c == '"') {
                if (in.peek() == '"') {
                    in.get();
                    field += '"';
                } else {
                    quoted = false;
                    after_quote = true;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
            after_quote = false;
        } else if (c == '\r' && in.peek() == '\n') {
            continue;
        } else if (c == '\n') {
            out.push_back(std::move(field));
            return true;
        } else if (c == '"' && field.empty() && !after_quote) {
            quoted = true;
        } else if (after_quote) {
            throw DataError("line " + std::to_string(start_line) + ": characters after closing quote");
        } else {
            field += c;
        }
    }
}

inline bool needs_quotes(std::string_view s) {
    return s.find_first_of(",\"\r\n") != std::string_view::npos;
}

}  // namespace detail

inline Table read_csv(std::istream& in) {
    Table t;
    std::size_t line = 0;
    if (!detail::read_record(in, t.header, line)) throw DataError("empty CSV: a header row is required");
    if (!t.header.empty() && t.header[0].rfind("\xEF\xBB\xBF", 0) == 0) t.header[0].erase(0, 3);
    std::unordered_map<std::string, int> seen;
    for (const auto& h : t.header)
        if (seen[h]++) throw DataError("duplicate column '" + h + "' in header");
    std::vector<std::string> rec;
    while (true) {
        const std::size_t at = line + 1;
        if (!detail::read_record(in, rec, line)) break;
        if (rec.size() == 1 && rec[0].empty()) continue;  // blank line
        if (rec.size() != t.header.size())
            throw DataError("line " + std::to_string(at) + ": expected " + std::to_string(t.header.size()) +
                            " fields, found " + std::to_string(rec.size()));
        t.rows.push_back(rec);
    }
    return t;
}

inline Table read_csv_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    return read_csv(in);
}

inline void write_csv(std::ostream& out, const Table& t) {
    auto write_row = [&](const std::vector<std::string>& row) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c) out << ',';
            if (detail::needs_quotes(row[c])) {
                out << '"';
                for (char ch : row[c]) {
                    if (ch == '"') out << '"';
                    out << ch;
                }
                out << '"';
            } else {
                out << row[c];
            }
        }
        out << '\n';
    };
    write_row(t.header);
    for (const auto& r : t.rows) write_row(r);
}

inline void write_csv_file(const std::string& path, const Table& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path + "'");
    write_csv(out, t);
}

/// Shortest decimal that parses back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline std::optional<double> try_parse_double(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

/// Numeric cell; `row` is the 0-based data row.
inline double parse_cell(const Table& t, std::size_t row, std::size_t col) {
    const auto& s = t.cell(row, col);
    auto v = try_parse_double(s);
    if (!v)
        throw DataError("data row " + std::to_string(row + 1) + ", column '" + t.header[col] + "': '" + s +
                        "' is not a finite number");
    return *v;
}

}  // namespace hglmm::io
