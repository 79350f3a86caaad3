#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace latentkit {

// One emitted metrics row. The wall-clock field is informational only and is
// never written to metric files, which must be byte-identical across reruns
// of the same seed.
struct MetricsRecord {
    std::string run_id;
    int64_t step = 0;
    std::vector<double> values;
    int64_t wallclock_ms = 0;
};

// Shortest round-trip decimal, '.' separator, locale-independent.
std::string format_double(double v);

// Fixed column schema, strictly increasing steps; serializes to CSV or
// JSON lines.
class MetricsLog {
  public:
    MetricsLog(std::string run_id, std::vector<std::string> columns, std::string format = "csv");

    void append(int64_t step, std::span<const double> values);
    std::string serialize() const;
    void write_file(const std::string& path) const;

    const std::vector<MetricsRecord>& records() const { return records_; }
    const std::vector<std::string>& columns() const { return columns_; }

  private:
    std::string run_id_;
    std::vector<std::string> columns_;
    std::string format_;
    std::vector<MetricsRecord> records_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

// Strict reader: fixed column count, numeric cells, '.' decimals. Throws
// UsageError on anything else.
CsvTable parse_strict_csv(const std::string& text);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

} // namespace latentkit
