#include "nanotfm/csvio.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace nanotfm {

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t comma = line.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, comma - start));
        start = comma + 1;
    }
    for (auto& cell : out) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' '))
            cell.pop_back();
        std::size_t i = 0;
        while (i < cell.size() && cell[i] == ' ') ++i;
        cell.erase(0, i);
    }
    return out;
}

[[noreturn]] void bad_cell(const std::string& path, std::int64_t row, std::int64_t col,
                           const std::string& cell) {
    throw FormatError(path + ": row " + std::to_string(row) + ", column " +
                      std::to_string(col) + " is not numeric ('" + cell +
                      "'); inputs must be fully numeric with no missing cells - "
                      "preprocess categorical features and missing values first");
}

}  // namespace

CsvMatrix read_numeric_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open CSV: " + path);
    CsvMatrix m;
    std::string line;
    if (!std::getline(f, line)) throw FormatError(path + ": empty file, header expected");
    m.header = split_line(line);
    m.cols = static_cast<std::int64_t>(m.header.size());
    if (m.cols < 1) throw FormatError(path + ": header has no columns");

    std::int64_t rowno = 1;  // header is row 0
    while (std::getline(f, line)) {
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) {
            ++rowno;
            continue;
        }
        const auto cells = split_line(line);
        if (static_cast<std::int64_t>(cells.size()) != m.cols)
            throw FormatError(path + ": row " + std::to_string(rowno) + " has " +
                              std::to_string(cells.size()) + " cells, header has " +
                              std::to_string(m.cols));
        for (std::int64_t c = 0; c < m.cols; ++c) {
            const std::string& cell = cells[c];
            if (cell.empty()) bad_cell(path, rowno, c, cell);
            double v = 0.0;
            const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (res.ec != std::errc() || res.ptr != cell.data() + cell.size() ||
                !std::isfinite(v))
                bad_cell(path, rowno, c, cell);
            m.values.push_back(static_cast<float>(v));
        }
        ++m.rows;
        ++rowno;
    }
    if (m.rows == 0) throw FormatError(path + ": no data rows");
    return m;
}

eval::EvalTask read_task_csv(const std::string& path) {
    const CsvMatrix m = read_numeric_csv(path);
    if (m.cols < 2)
        throw FormatError(path + ": need at least one feature column plus the label column");
    eval::EvalTask t;
    t.name = path;
    t.rows = m.rows;
    t.cols = m.cols - 1;
    t.x.reserve(t.rows * t.cols);
    t.y.reserve(t.rows);
    int max_label = 0;
    for (std::int64_t r = 0; r < m.rows; ++r) {
        const float* row = m.values.data() + r * m.cols;
        t.x.insert(t.x.end(), row, row + t.cols);
        const double lv = row[m.cols - 1];
        const double rounded = std::round(lv);
        if (std::abs(lv - rounded) > 1e-6 || rounded < 0)
            throw FormatError(path + ": row " + std::to_string(r + 1) +
                              ": label column must hold non-negative integers, got " +
                              std::to_string(lv));
        t.y.push_back(static_cast<int>(rounded));
        max_label = std::max(max_label, t.y.back());
    }
    t.num_classes = max_label + 1;
    return t;
}

void write_csv(const std::string& path,
               const std::vector<std::vector<std::string>>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) f << ',';
            f << row[i];
        }
        f << '\n';
    }
    if (!f) throw IoError("write failed: " + path);
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string fmt_metric(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

}  // namespace nanotfm
