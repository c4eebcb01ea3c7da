#include "p4p/csv.hpp"

#include <algorithm>
#include <cctype>

namespace p4p {

std::vector<std::string> split_csv_line(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            out.emplace_back(line.substr(start));
            break;
        }
        out.emplace_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

namespace {

std::string trimmed(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.pop_back();
    return s;
}

}  // namespace

CsvReader::CsvReader(const std::string& path) : in_(path) {
    if (!in_) throw IoError("cannot open file: " + path);
    std::string line;
    if (!std::getline(in_, line)) throw SchemaError("empty file: " + path);
    line_ = 1;
    header_ = split_csv_line(trimmed(line));
    for (std::size_t i = 0; i < header_.size(); ++i) index_[header_[i]] = i;
    if (index_.size() != header_.size()) throw SchemaError("duplicate column in header of " + path);
}

std::size_t CsvReader::column(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw SchemaError("missing required column", 1, name);
    return it->second;
}

bool CsvReader::has_column(const std::string& name) const {
    return index_.count(name) != 0;
}

bool CsvReader::next(std::vector<std::string>& fields) {
    std::string line;
    if (!std::getline(in_, line)) return false;
    ++line_;
    line = trimmed(line);
    if (line.empty()) return next(fields);  // tolerate trailing blank lines
    fields = split_csv_line(line);
    if (fields.size() != header_.size()) {
        throw SchemaError("expected " + std::to_string(header_.size()) + " fields, got " +
                              std::to_string(fields.size()),
                          line_);
    }
    return true;
}

long parse_long(std::string_view s, std::size_t line, const std::string& column) {
    long value = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), value);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw SchemaError("not an integer: '" + std::string(s) + "'", line, column);
    }
    return value;
}

double parse_double(std::string_view s, std::size_t line, const std::string& column) {
    double value = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), value);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw SchemaError("not a number: '" + std::string(s) + "'", line, column);
    }
    return value;
}

int parse_binary(std::string_view s, std::size_t line, const std::string& column) {
    if (s == "0") return 0;
    if (s == "1") return 1;
    throw SchemaError("expected 0 or 1, got '" + std::string(s) + "'", line, column);
}

CsvWriter::CsvWriter(const std::string& path) : out_(path) {
    if (!out_) throw IoError("cannot open file for writing: " + path);
}

void CsvWriter::write_row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) out_ << ',';
        out_ << fields[i];
    }
    out_ << '\n';
}

void CsvWriter::flush() { out_.flush(); }

}  // namespace p4p
