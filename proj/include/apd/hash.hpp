#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

namespace apd {

// 64-bit FNV-1a. Used for parameter digests, config hashes and seed
// derivation. Not cryptographic; collisions are irrelevant here.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::uint64_t hash_matrix(const Eigen::MatrixXd& m, std::uint64_t h) {
    const auto rows = static_cast<std::int64_t>(m.rows());
    const auto cols = static_cast<std::int64_t>(m.cols());
    h = fnv1a64(&rows, sizeof(rows), h);
    h = fnv1a64(&cols, sizeof(cols), h);
    return fnv1a64(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
}

inline std::uint64_t hash_matrix(const Eigen::MatrixXd& m) {
    return hash_matrix(m, 0xcbf29ce484222325ull);
}

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// Bit-exact matrix <-> hex round trip for checkpoints.
inline std::string matrix_to_hex(const Eigen::MatrixXd& m) {
    static const char* digits = "0123456789abcdef";
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    const std::size_t n = sizeof(double) * static_cast<std::size_t>(m.size());
    std::string out;
    out.reserve(2 * n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(digits[bytes[i] >> 4]);
        out.push_back(digits[bytes[i] & 0xf]);
    }
    return out;
}

inline Eigen::MatrixXd matrix_from_hex(const std::string& hex, Eigen::Index rows,
                                       Eigen::Index cols) {
    Eigen::MatrixXd m(rows, cols);
    const std::size_t need = 2 * sizeof(double) * static_cast<std::size_t>(m.size());
    if (hex.size() != need) {
        throw std::runtime_error("matrix_from_hex: payload length mismatch");
    }
    auto nibble = [](char c) -> unsigned {
        if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
        throw std::runtime_error("matrix_from_hex: bad hex digit");
    };
    auto* bytes = reinterpret_cast<unsigned char*>(m.data());
    for (std::size_t i = 0; i < need / 2; ++i) {
        bytes[i] = static_cast<unsigned char>((nibble(hex[2 * i]) << 4) | nibble(hex[2 * i + 1]));
    }
    return m;
}

}  // namespace apd
