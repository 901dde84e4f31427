#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsexplain/common.hpp"

namespace tsexplain {

using Json = nlohmann::ordered_json;

// Shortest exact decimal form: 17 significant digits round-trip any double.
inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + path.string());
    out << content;
    if (!out) throw IoError("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Rows of doubles, comma separated, one row per line, no header.
inline void write_csv_matrix(const std::filesystem::path& path,
                             const std::vector<std::vector<double>>& rows) {
    std::string out;
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out += ',';
            out += fmt_double(row[i]);
        }
        out += '\n';
    }
    write_text_file(path, out);
}

inline std::vector<std::vector<double>> read_csv_matrix(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    std::vector<std::vector<double>> rows;
    std::vector<double> row;
    const char* p = text.c_str();
    const char* end = p + text.size();
    while (p < end) {
        char* next = nullptr;
        row.push_back(std::strtod(p, &next));
        if (next == p) throw IoError("csv parse error in " + path.string());
        p = next;
        if (p < end && *p == ',') {
            ++p;
        } else if (p < end && (*p == '\n' || *p == '\r')) {
            while (p < end && (*p == '\n' || *p == '\r')) ++p;
            rows.push_back(std::move(row));
            row.clear();
        }
    }
    if (!row.empty()) rows.push_back(std::move(row));
    return rows;
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

inline Json read_json_file(const std::filesystem::path& path) {
    try {
        return Json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("json parse error in " + path.string() + ": " + e.what());
    }
}

}  // namespace tsexplain
