#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbd {

// Error taxonomy. Every failure surfaced by the library is one of these.
class ShapeError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class InputError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class ContractError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

using TokenId = std::int32_t;

// Reserved vocabulary entries shared by every vocabulary in the kit.
namespace special {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr TokenId kR2L = 4;
inline constexpr TokenId kCount = 5;

inline const std::vector<std::string>& names() {
    static const std::vector<std::string> kNames = {"<pad>", "<s>", "</s>", "<unk>", "<r2l>"};
    return kNames;
}

inline bool is_special(TokenId id) { return id >= 0 && id < kCount; }
}  // namespace special

// Row-major matrix of token ids.
struct IdMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<TokenId> ids;

    IdMatrix() = default;
    IdMatrix(std::size_t r, std::size_t c, TokenId fill = special::kPad) : rows(r), cols(c), ids(r * c, fill) {}

    TokenId& at(std::size_t r, std::size_t c) { return ids[r * cols + c]; }
    TokenId at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
};

// SplitMix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(mix_seed(a) ^ (b + 0x632BE59BD9B4E019ULL)); }

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix_seed(mix_seed(a, b), c); }

// Uniform double in [0, 1) from the top 53 bits; independent of the standard
// library's distribution implementations so streams are portable.
template <typename Engine>
double uniform01(Engine& eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Uniform integer in [0, n) by rejection on 64-bit draws.
template <typename Engine>
std::uint64_t uniform_index(Engine& eng, std::uint64_t n) {
    if (n == 0) throw ContractError("uniform_index: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r = eng();
    while (r >= limit) r = eng();
    return r % n;
}

template <typename Engine, typename Container>
void shuffle_in_place(Container& c, Engine& eng) {
    for (std::size_t i = c.size(); i > 1; --i) {
        const std::size_t j = uniform_index(eng, i);
        std::swap(c[i - 1], c[j]);
    }
}

}  // namespace sbd
