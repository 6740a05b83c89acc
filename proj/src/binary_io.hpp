#pragma once

// Little-endian primitives for the project's binary file formats.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gap::io {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    std::array<char, 4> b{};
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b.data(), 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    std::array<char, 8> b{};
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    os.write(b.data(), 8);
}

inline void write_f64(std::ostream& os, double v) { write_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void write_f64s(std::ostream& os, std::span<const double> xs) {
    for (double x : xs) write_f64(os, x);
}

inline void write_magic(std::ostream& os, std::string_view magic) {
    std::array<char, 8> b{};
    std::memcpy(b.data(), magic.data(), std::min<std::size_t>(magic.size(), 8));
    os.write(b.data(), 8);
}

inline void read_exact(std::istream& is, char* dst, std::size_t n) {
    is.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n) throw std::runtime_error("unexpected end of file");
}

inline std::uint32_t read_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    read_exact(is, reinterpret_cast<char*>(b.data()), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::istream& is) {
    std::array<unsigned char, 8> b{};
    read_exact(is, reinterpret_cast<char*>(b.data()), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

inline void read_f64s(std::istream& is, std::span<double> out) {
    for (auto& x : out) x = read_f64(is);
}

inline void expect_magic(std::istream& is, std::string_view magic, const char* what) {
    std::array<char, 8> b{};
    read_exact(is, b.data(), 8);
    std::array<char, 8> want{};
    std::memcpy(want.data(), magic.data(), std::min<std::size_t>(magic.size(), 8));
    if (b != want) throw std::runtime_error(std::string(what) + ": bad magic");
}

}  // namespace gap::io
