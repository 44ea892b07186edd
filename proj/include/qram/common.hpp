#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace qram {

using cplx = std::complex<double>;

// Mixed-radix basis configuration packed at 2 bits per site (digits 0..2).
// Fixed capacity keeps keys hashable and cheap to copy; 256 sites covers
// every register layout this library instantiates (depth <= 6 with legs).
struct BasisKey {
    static constexpr std::size_t kWords = 8;
    static constexpr std::size_t kMaxSites = kWords * 32;

    std::array<std::uint64_t, kWords> w{};

    std::uint8_t digit(std::size_t site) const {
        return static_cast<std::uint8_t>((w[site >> 5] >> ((site & 31) * 2)) & 3u);
    }
    void set_digit(std::size_t site, std::uint8_t d) {
        auto& word = w[site >> 5];
        const auto shift = (site & 31) * 2;
        word = (word & ~(std::uint64_t{3} << shift)) | (std::uint64_t{d & 3u} << shift);
    }
    friend bool operator==(const BasisKey& a, const BasisKey& b) { return a.w == b.w; }
    friend bool operator!=(const BasisKey& a, const BasisKey& b) { return !(a.w == b.w); }
    friend bool operator<(const BasisKey& a, const BasisKey& b) { return a.w < b.w; }
};

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

struct BasisKeyHash {
    std::size_t operator()(const BasisKey& k) const {
        std::uint64_t h = 0x243f6a8885a308d3ull;
        for (auto word : k.w) h = splitmix64(h ^ word);
        return static_cast<std::size_t>(h);
    }
};

// FNV-1a over bytes; used as the content hash of serialized artifacts.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 15];
        v >>= 4;
    }
    return s;
}

// Deterministic per-trajectory seed derivation, independent of thread count.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    return splitmix64(master ^ splitmix64(index + 0x9e3779b97f4a7c15ull));
}

}  // namespace qram
