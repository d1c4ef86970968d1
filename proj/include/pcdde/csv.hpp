#pragma once

// CSV emission. Doubles are printed as shortest round-trip decimals via
// std::to_chars, so two runs that compute identical values produce
// byte-identical files regardless of locale.

#include <charconv>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>

namespace pcdde {

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw std::runtime_error("format_double: to_chars failed");
    return std::string(buf, ptr);
}

namespace detail {

inline void append_cell(std::string& row, double v) { row += format_double(v); }
inline void append_cell(std::string& row, std::string_view v) { row += v; }
inline void append_cell(std::string& row, const std::string& v) { row += v; }
inline void append_cell(std::string& row, const char* v) { row += v; }

template <class T>
    requires std::is_integral_v<T>
inline void append_cell(std::string& row, T v) {
    row += std::to_string(v);
}

// Empty cell when absent; used for "no period detected" style columns.
template <class T>
inline void append_cell(std::string& row, const std::optional<T>& v) {
    if (v) append_cell(row, *v);
}

}  // namespace detail

class CsvWriter {
  public:
    CsvWriter(const std::filesystem::path& path, std::string_view header) {
        if (auto dir = path.parent_path(); !dir.empty()) std::filesystem::create_directories(dir);
        out_.open(path, std::ios::binary | std::ios::trunc);
        if (!out_) throw std::runtime_error("CsvWriter: cannot open " + path.string());
        out_ << header << '\n';
    }

    template <class... Ts>
    void row(const Ts&... cells) {
        std::string line;
        std::size_t i = 0;
        ((detail::append_cell(line, cells), line += (++i < sizeof...(Ts) ? "," : "")), ...);
        out_ << line << '\n';
    }

    void close() {
        out_.close();
        if (out_.fail()) throw std::runtime_error("CsvWriter: write failed on close");
    }

  private:
    std::ofstream out_;
};

}  // namespace pcdde
