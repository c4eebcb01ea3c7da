#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "p4p/errors.hpp"

namespace p4p {

// Minimal strict CSV: comma separated, no quoting (none of our schemas need it),
// '.' decimal mark, header row required.
class CsvReader {
public:
    explicit CsvReader(const std::string& path);

    const std::vector<std::string>& header() const { return header_; }
    // Column position, or throws SchemaError if absent.
    std::size_t column(const std::string& name) const;
    bool has_column(const std::string& name) const;

    // Reads the next record; false at EOF. Field count must match the header.
    bool next(std::vector<std::string>& fields);
    std::size_t line_number() const { return line_; }  // 1-based, header = line 1

private:
    std::ifstream in_;
    std::vector<std::string> header_;
    std::unordered_map<std::string, std::size_t> index_;
    std::size_t line_ = 0;
};

// Strict field parsers; all throw SchemaError naming the line and column.
long parse_long(std::string_view s, std::size_t line, const std::string& column);
double parse_double(std::string_view s, std::size_t line, const std::string& column);
int parse_binary(std::string_view s, std::size_t line, const std::string& column);

// Shortest round-trip decimal formatting, deterministic across runs.
inline std::string format_double(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

class CsvWriter {
public:
    explicit CsvWriter(const std::string& path);
    void write_row(const std::vector<std::string>& fields);
    void flush();

private:
    std::ofstream out_;
};

std::vector<std::string> split_csv_line(std::string_view line);

}  // namespace p4p
