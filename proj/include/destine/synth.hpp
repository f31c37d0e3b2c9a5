#pragma once

// Synthetic click logs with a planted second-order interaction and no
// first-order signal. Fields f1, f2 take values a..j, f3 (pure noise) a..e.
// A seeded set S of 50 of the 100 (f1, f2) pairs — exactly 5 per f1 value and
// 5 per f2 value, so every single-field marginal is 0.5 — drives the label:
// positive with probability 0.9 inside S, 0.1 outside. A ranker that scores
// S-membership perfectly attains AUC 0.9 in expectation; any first-order
// model is stuck at 0.5.

#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "destine/errors.hpp"
#include "destine/numerics.hpp"

namespace destine::synth {

constexpr std::size_t kPairValues = 10;  // f1, f2 alphabet size
constexpr std::size_t kNoiseValues = 5;  // f3 alphabet size
constexpr std::size_t kPairsPerValue = 5;
constexpr double kInsideRate = 0.9;
constexpr double kOutsideRate = 0.1;

using PairSet = std::array<std::array<bool, kPairValues>, kPairValues>;

namespace detail {

inline std::array<std::size_t, kPairValues> random_permutation(SeededRng& rng) {
    std::vector<std::size_t> p(kPairValues);
    for (std::size_t i = 0; i < kPairValues; ++i) p[i] = i;
    rng.shuffle(p);
    std::array<std::size_t, kPairValues> out{};
    for (std::size_t i = 0; i < kPairValues; ++i) out[i] = p[i];
    return out;
}

}  // namespace detail

// Balanced random pair set: a banded base pattern (5 consecutive values per
// row, wrapping) scrambled by seeded row and column permutations. Row and
// column sums stay exactly kPairsPerValue.
inline PairSet pair_set(SeededRng& rng) {
    const auto row_perm = detail::random_permutation(rng);
    const auto col_perm = detail::random_permutation(rng);
    PairSet s{};
    for (std::size_t i = 0; i < kPairValues; ++i) {
        for (std::size_t j = 0; j < kPairValues; ++j) {
            const std::size_t band = (kPairValues + col_perm[j] - row_perm[i]) % kPairValues;
            s[i][j] = band < kPairsPerValue;
        }
    }
    return s;
}

inline PairSet pair_set(std::uint64_t seed) {
    SeededRng rng(seed);
    return pair_set(rng);
}

struct Row {
    std::size_t f1 = 0;
    std::size_t f2 = 0;
    std::size_t f3 = 0;
    int label = 0;
};

inline std::vector<Row> make_rows(std::size_t n, std::uint64_t seed) {
    SeededRng rng(seed);
    const PairSet s = pair_set(rng);
    std::vector<Row> rows(n);
    for (auto& row : rows) {
        row.f1 = static_cast<std::size_t>(rng.next_below(kPairValues));
        row.f2 = static_cast<std::size_t>(rng.next_below(kPairValues));
        row.f3 = static_cast<std::size_t>(rng.next_below(kNoiseValues));
        const double rate = s[row.f1][row.f2] ? kInsideRate : kOutsideRate;
        row.label = rng.bernoulli(rate) ? 1 : 0;
    }
    return rows;
}

inline char value_token(std::size_t v) { return static_cast<char>('a' + v); }

inline std::string to_csv(std::span<const Row> rows) {
    std::string out = "label,f1,f2,f3\n";
    for (const auto& row : rows) {
        out += std::to_string(row.label);
        out += ',';
        out += value_token(row.f1);
        out += ',';
        out += value_token(row.f2);
        out += ',';
        out += value_token(row.f3);
        out += '\n';
    }
    return out;
}

inline void write_csv(const std::string& path, std::size_t n, std::uint64_t seed) {
    if (n < 100) throw DomainError("synthetic dataset needs n >= 100");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << to_csv(make_rows(n, seed));
    if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace destine::synth
