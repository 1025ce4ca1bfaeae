#pragma once

// Plain numeric CSV. Matrices have no header; datasets and expression tables
// may carry one header row of labels. Output uses 12 significant digits.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "precis/error.hpp"
#include "precis/linalg.hpp"

namespace precis::csv {

enum class Header { None, Auto, Required };

struct Table {
    std::vector<std::string> header; ///< empty when the file had none
    Matrix values;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        out.push_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

inline std::optional<double> parse_number(std::string_view field) {
    if (!field.empty() && field.front() == '+') field.remove_prefix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), v);
    if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) return std::nullopt;
    return v;
}

inline std::string unquote(std::string_view s) {
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return std::string(s);
}

}  // namespace detail

inline std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

inline Table parse(std::istream& in, Header mode, const std::string& source = "<stream>") {
    Table t;
    std::vector<std::vector<double>> rows;
    std::string line;
    std::size_t lineNo = 0;
    bool first = true;
    while (std::getline(in, line)) {
        ++lineNo;
        if (detail::trim(line).empty()) continue;
        const auto fields = detail::split(line);
        if (first) {
            first = false;
            bool numeric = true;
            for (auto f : fields) numeric = numeric && detail::parse_number(f).has_value();
            const bool isHeader = mode == Header::Required || (mode == Header::Auto && !numeric);
            if (isHeader) {
                for (auto f : fields) t.header.push_back(detail::unquote(f));
                continue;
            }
        }
        std::vector<double> row;
        row.reserve(fields.size());
        for (std::size_t c = 0; c < fields.size(); ++c) {
            const auto v = detail::parse_number(fields[c]);
            if (!v)
                throw InvalidArgument(source + ":" + std::to_string(lineNo) + ": field " + std::to_string(c + 1) +
                                      " is not a number: '" + std::string(fields[c]) + "'");
            row.push_back(*v);
        }
        const std::size_t width = t.header.empty() ? (rows.empty() ? row.size() : rows.front().size()) : t.header.size();
        if (row.size() != width)
            throw DimensionMismatch(source + ":" + std::to_string(lineNo) + ": expected " + std::to_string(width) +
                                    " fields, found " + std::to_string(row.size()));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw InvalidArgument(source + ": no numeric rows");
    t.values.resize(Eigen::Index(rows.size()), Eigen::Index(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j) t.values(Eigen::Index(i), Eigen::Index(j)) = rows[i][j];
    return t;
}

inline Table read(const std::filesystem::path& path, Header mode) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return parse(in, mode, path.string());
}

inline void write(const std::filesystem::path& path, const Matrix& m, const std::vector<std::string>& header = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    if (!header.empty()) {
        for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
        out << '\n';
    }
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_number(m(i, j));
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

/// d x d symmetric matrix without header.
inline SymMatrix read_matrix(const std::filesystem::path& path) {
    return SymMatrix(read(path, Header::None).values);
}

inline void write_matrix(const std::filesystem::path& path, const SymMatrix& m) { write(path, m.matrix()); }

/// n x d observations; a non-numeric first row is taken as the header.
inline Dataset read_dataset(const std::filesystem::path& path) { return Dataset(read(path, Header::Auto).values); }

inline void write_dataset(const std::filesystem::path& path, const Dataset& x) { write(path, x.rows()); }

/// A vector stored as one row or one column.
inline Vector read_vector(const std::filesystem::path& path) {
    const Matrix m = read(path, Header::Auto).values;
    if (m.rows() != 1 && m.cols() != 1)
        throw DimensionMismatch(path.string() + ": expected a single row or column, found " +
                                std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
    return Eigen::Map<const Vector>(m.data(), m.size());
}

/// One value per line.
inline void write_vector(const std::filesystem::path& path, const Vector& v) { write(path, Matrix(v)); }

}  // namespace precis::csv
