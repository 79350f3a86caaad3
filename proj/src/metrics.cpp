#include "latentkit/metrics.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <sstream>

#include "latentkit/error.hpp"

namespace latentkit {

std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc{}) throw NumericError("format_double: conversion failed");
    return std::string(buf, ptr);
}

MetricsLog::MetricsLog(std::string run_id, std::vector<std::string> columns, std::string format)
    : run_id_(std::move(run_id)), columns_(std::move(columns)), format_(std::move(format)) {
    if (format_ != "csv" && format_ != "jsonl") {
        throw UsageError("metrics: unknown report format '" + format_ + "'");
    }
    for (const std::string& c : columns_) {
        if (c.empty() || c.find(',') != std::string::npos) {
            throw UsageError("metrics: bad column name '" + c + "'");
        }
    }
}

void MetricsLog::append(int64_t step, std::span<const double> values) {
    if (values.size() != columns_.size()) {
        throw DimensionError("metrics: expected " + std::to_string(columns_.size()) +
                             " values, got " + std::to_string(values.size()));
    }
    if (!records_.empty() && step <= records_.back().step) {
        throw UsageError("metrics: steps must be strictly increasing (got " +
                         std::to_string(step) + " after " + std::to_string(records_.back().step) + ")");
    }
    MetricsRecord r;
    r.run_id = run_id_;
    r.step = step;
    r.values.assign(values.begin(), values.end());
    r.wallclock_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
    records_.push_back(std::move(r));
}

std::string MetricsLog::serialize() const {
    std::ostringstream os;
    if (format_ == "csv") {
        os << "step";
        for (const std::string& c : columns_) os << "," << c;
        os << "\n";
        for (const MetricsRecord& r : records_) {
            os << r.step;
            for (double v : r.values) os << "," << format_double(v);
            os << "\n";
        }
    } else {
        for (const MetricsRecord& r : records_) {
            os << "{\"run_id\":\"" << run_id_ << "\",\"step\":" << r.step;
            for (size_t i = 0; i < columns_.size(); ++i) {
                os << ",\"" << columns_[i] << "\":" << format_double(r.values[i]);
            }
            os << "}\n";
        }
    }
    return os.str();
}

void MetricsLog::write_file(const std::string& path) const {
    write_text_file(path, serialize());
}

CsvTable parse_strict_csv(const std::string& text) {
    CsvTable table;
    std::istringstream is(text);
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) {
            if (is.eof()) break;
            throw UsageError("csv: empty line");
        }
        std::vector<std::string> cells;
        size_t start = 0;
        while (true) {
            size_t comma = line.find(',', start);
            if (comma == std::string::npos) {
                cells.push_back(line.substr(start));
                break;
            }
            cells.push_back(line.substr(start, comma - start));
            start = comma + 1;
        }
        if (first) {
            table.header = cells;
            first = false;
            continue;
        }
        if (cells.size() != table.header.size()) {
            throw UsageError("csv: row with " + std::to_string(cells.size()) + " cells, header has " +
                             std::to_string(table.header.size()));
        }
        std::vector<double> row;
        for (const std::string& cell : cells) {
            double v = 0.0;
            const char* b = cell.data();
            const char* e = cell.data() + cell.size();
            auto [ptr, ec] = std::from_chars(b, e, v);
            if (ec != std::errc{} || ptr != e) {
                throw UsageError("csv: non-numeric cell '" + cell + "'");
            }
            row.push_back(v);
        }
        table.rows.push_back(std::move(row));
    }
    if (table.header.empty()) throw UsageError("csv: missing header");
    return table;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open file: " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw UsageError("cannot write file: " + path);
    out << text;
}

} // namespace latentkit
