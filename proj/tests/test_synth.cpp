#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>

#include "destine/synth.hpp"
#include "testing_util.hpp"

using namespace destine;

TEST_CASE("synth pair set is perfectly balanced") {
    for (std::uint64_t seed : {1ULL, 2ULL, 99ULL, 2024ULL}) {
        const auto s = synth::pair_set(seed);
        std::array<int, 10> row_sums{};
        std::array<int, 10> col_sums{};
        int total = 0;
        for (std::size_t i = 0; i < 10; ++i) {
            for (std::size_t j = 0; j < 10; ++j) {
                if (s[i][j]) {
                    ++row_sums[i];
                    ++col_sums[j];
                    ++total;
                }
            }
        }
        REQUIRE(total == 50);
        for (int r : row_sums) REQUIRE(r == 5);
        for (int c : col_sums) REQUIRE(c == 5);
    }
    CHECK(synth::pair_set(1) == synth::pair_set(1));
    CHECK(synth::pair_set(1) != synth::pair_set(2));
}

TEST_CASE("synth rows have a balanced marginal and no unary signal") {
    const auto rows = synth::make_rows(10000, 7);
    REQUIRE(rows.size() == 10000);

    double positives = 0;
    std::array<std::array<double, 2>, 10> by_f1{};
    std::array<std::array<double, 2>, 10> by_f2{};
    for (const auto& row : rows) {
        positives += row.label;
        by_f1[row.f1][0] += row.label;
        by_f1[row.f1][1] += 1;
        by_f2[row.f2][0] += row.label;
        by_f2[row.f2][1] += 1;
    }
    CHECK(std::abs(positives / 10000.0 - 0.5) <= 0.02);
    for (std::size_t v = 0; v < 10; ++v) {
        REQUIRE(by_f1[v][1] > 0);
        REQUIRE(by_f2[v][1] > 0);
        CHECK(std::abs(by_f1[v][0] / by_f1[v][1] - 0.5) <= 0.05);
        CHECK(std::abs(by_f2[v][0] / by_f2[v][1] - 0.5) <= 0.05);
    }
}

TEST_CASE("synth pairs inside the planted set are positive-heavy") {
    const std::uint64_t seed = 5;
    SeededRng rng(seed);
    const auto s = synth::pair_set(rng);
    const auto rows = synth::make_rows(20000, seed);
    double in_pos = 0, in_n = 0, out_pos = 0, out_n = 0;
    for (const auto& row : rows) {
        if (s[row.f1][row.f2]) {
            in_pos += row.label;
            in_n += 1;
        } else {
            out_pos += row.label;
            out_n += 1;
        }
    }
    CHECK(std::abs(in_pos / in_n - 0.9) <= 0.02);
    CHECK(std::abs(out_pos / out_n - 0.1) <= 0.02);
}

TEST_CASE("synth CSV output is deterministic and validates n") {
    const auto a = synth::to_csv(synth::make_rows(500, 9));
    const auto b = synth::to_csv(synth::make_rows(500, 9));
    REQUIRE(a == b);
    CHECK(a.substr(0, 15) == "label,f1,f2,f3\n");

    const auto path_a = testutil::scratch_dir() / "synth_a.csv";
    const auto path_b = testutil::scratch_dir() / "synth_b.csv";
    synth::write_csv(path_a.string(), 200, 4);
    synth::write_csv(path_b.string(), 200, 4);
    CHECK(testutil::read_file(path_a.string()) == testutil::read_file(path_b.string()));

    CHECK_THROWS_AS(synth::write_csv((testutil::scratch_dir() / "x.csv").string(), 99, 1),
                    DomainError);
}
