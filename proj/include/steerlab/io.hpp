#ifndef STEERLAB_IO_HPP
#define STEERLAB_IO_HPP

// File emission helpers: deterministic number formatting, CSV writing, FNV
// content hashes, and the run manifest.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace steerlab {

// Shortest round-trip decimal representation, stable across runs.
inline std::string format_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    double parsed = std::strtod(buf, nullptr);
    if (parsed == x) {
        for (int prec = 1; prec < 17; ++prec) {
            char shorter[32];
            std::snprintf(shorter, sizeof(shorter), "%.*g", prec, x);
            if (std::strtod(shorter, nullptr) == x) return shorter;
        }
    }
    return buf;
}

class CsvWriter {
  public:
    explicit CsvWriter(std::vector<std::string> header) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (i) out_ << ',';
            out_ << header[i];
        }
        out_ << '\n';
        columns_ = header.size();
    }

    void row(const std::vector<std::string>& cells) {
        if (cells.size() != columns_) throw std::invalid_argument("CsvWriter: column mismatch");
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ',';
            out_ << cells[i];
        }
        out_ << '\n';
    }

    std::string str() const { return out_.str(); }

  private:
    std::ostringstream out_;
    std::size_t columns_ = 0;
};

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw std::runtime_error("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string fnv1a64_hex(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(bytes)));
    return buf;
}

struct ManifestEntry {
    std::string file;
    std::string stage;
    std::uint64_t size = 0;
    std::string hash;
};

// Tracks which stage produced which file; written even on partial failure so
// completed outputs stay usable.
class Manifest {
  public:
    void record(const std::string& stage, const std::filesystem::path& path) {
        std::string content = read_text_file(path);
        entries_.push_back(
            {path.filename().string(), stage, content.size(), fnv1a64_hex(content)});
    }

    void mark_complete(const std::string& stage) { completed_.push_back(stage); }
    void mark_failed(const std::string& stage, const std::string& error) {
        failed_stage_ = stage;
        error_ = error;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["completed_stages"] = completed_;
        if (!failed_stage_.empty()) {
            j["failed_stage"] = failed_stage_;
            j["error"] = error_;
        }
        j["files"] = nlohmann::ordered_json::array();
        for (const auto& e : entries_) {
            nlohmann::ordered_json f;
            f["file"] = e.file;
            f["stage"] = e.stage;
            f["size"] = e.size;
            f["fnv1a64"] = e.hash;
            j["files"].push_back(f);
        }
        return j;
    }

    void write(const std::filesystem::path& path) const {
        write_text_file(path, to_json().dump(2) + "\n");
    }

  private:
    std::vector<ManifestEntry> entries_;
    std::vector<std::string> completed_;
    std::string failed_stage_;
    std::string error_;
};

}  // namespace steerlab

#endif  // STEERLAB_IO_HPP
