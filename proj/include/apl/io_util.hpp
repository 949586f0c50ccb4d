#pragma once

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace apl {

// ---- little-endian binary primitives ----

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw std::runtime_error("unexpected end of file reading u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_f32_le(std::ostream& os, float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    write_u32_le(os, u);
}

inline float read_f32_le(std::istream& is) {
    const std::uint32_t u = read_u32_le(is);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

inline void write_f64_le(std::ostream& os, double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw std::runtime_error("unexpected end of file reading f64");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

// Shortest decimal text that round-trips a double (stable across runs).
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    // prefer a shorter representation when it round-trips
    for (int prec = 1; prec < 17; ++prec) {
        char probe[40];
        std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
        if (std::strtod(probe, nullptr) == v) return probe;
    }
    return buf;
}

// ---- CSV (simple comma-separated fields, no quoting) ----

inline std::vector<std::string> split_csv_line(const std::string& line, char delim = ',') {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == delim) {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path,
                                                      char delim = ',') {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        rows.push_back(split_csv_line(line, delim));
    }
    return rows;
}

inline double parse_double(const std::string& s, const std::string& context) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') {
        throw std::runtime_error("cannot parse '" + s + "' as a number (" + context + ")");
    }
    return v;
}

// ---- atomic file output: write to temp path, then rename ----

class AtomicFile {
public:
    explicit AtomicFile(std::filesystem::path target, bool binary = false)
        : target_(std::move(target)), tmp_(target_.string() + ".tmp") {
        if (target_.has_parent_path()) std::filesystem::create_directories(target_.parent_path());
        stream_.open(tmp_, binary ? std::ios::binary | std::ios::out : std::ios::out);
        if (!stream_) throw std::runtime_error("cannot open " + tmp_.string() + " for writing");
    }

    std::ofstream& stream() { return stream_; }

    void commit() {
        stream_.flush();
        if (!stream_) throw std::runtime_error("write failed for " + tmp_.string());
        stream_.close();
        std::filesystem::rename(tmp_, target_);
        committed_ = true;
    }

    ~AtomicFile() {
        if (!committed_) {
            stream_.close();
            std::error_code ec;
            std::filesystem::remove(tmp_, ec);
        }
    }

private:
    std::filesystem::path target_;
    std::filesystem::path tmp_;
    std::ofstream stream_;
    bool committed_ = false;
};

}  // namespace apl
