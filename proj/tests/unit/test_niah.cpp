#include "gapelab/niah.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace gapelab;
using namespace gapelab::niah;

TEST_CASE("needle count rule") {
    CHECK(default_needle_count(2048) == 32);
    CHECK(default_needle_count(256) == 4);
    CHECK(default_needle_count(64) == 1);
    CHECK(default_needle_count(63) == 0);
}

TEST_CASE("sample structure") {
    Rng rng(1);
    for (auto regime : {Regime::First, Regime::Last, Regime::Middle}) {
        for (std::size_t L : {64u, 256u, 1000u}) {
            const auto s = generate(L, regime, rng);
            REQUIRE(s.length() == L);
            CHECK(s.tokens.back() == NiahVocab::kQuery);
            const auto parsed = parse_needles(s.tokens);
            REQUIRE(parsed.size() == default_needle_count(L));
            for (std::size_t k = 0; k < parsed.size(); ++k) {
                CHECK(parsed[k].first == s.needle_positions[k]);
                CHECK(parsed[k].second == s.needle_digits[k]);
                CHECK(s.needle_positions[k] + 2 <= L - 2);
            }
            std::size_t special = 0;
            for (std::size_t t = 0; t + 1 < L; ++t)
                if (!NiahVocab::is_filler(s.tokens[t])) ++special;
            CHECK(special == 3 * parsed.size());
            const std::size_t tgt = s.target_digit_position();
            CHECK(s.tokens[tgt] == s.target);
        }
    }
}

TEST_CASE("regime picks the target needle") {
    Rng rng(2);
    const auto f = generate(512, Regime::First, rng);
    CHECK(f.target == f.needle_digits.front());
    const auto l = generate(512, Regime::Last, rng);
    CHECK(l.target == l.needle_digits.back());
    const auto m = generate(512, Regime::Middle, rng);
    CHECK(m.target == m.needle_digits[m.needle_digits.size() / 2]);
    CHECK(parse_regime("far") == Regime::First);
    CHECK(parse_regime("close") == Regime::Last);
    CHECK_THROWS_AS(parse_regime("sideways"), Error);
}

TEST_CASE("needle placement respects chunks") {
    Rng rng(3);
    const std::size_t L = 640, n = 10;
    for (int t = 0; t < 50; ++t) {
        const auto s = generate(L, Regime::First, rng);
        for (std::size_t k = 0; k + 1 < n; ++k) CHECK(s.needle_positions[k] + 3 <= s.needle_positions[k + 1]);
    }
}

TEST_CASE("generation is deterministic") {
    const auto a = generate_indexed(300, Regime::Last, 42, 7);
    const auto b = generate_indexed(300, Regime::Last, 42, 7);
    CHECK(a.tokens == b.tokens);
    CHECK(generate_indexed(300, Regime::Last, 42, 8).tokens != a.tokens);
}

TEST_CASE("needle digits are uniform") {
    // Chi-square against uniform over 10 digits, 9 dof: 99.9% quantile 27.88.
    std::vector<double> counts(10, 0.0);
    for (std::size_t i = 0; i < 2000; ++i) {
        const auto s = generate_indexed(128, Regime::First, 5, i);
        for (auto d : s.needle_digits) counts[d] += 1;
    }
    double total = 0, chi = 0;
    for (double c : counts) total += c;
    for (double c : counts) chi += (c - total / 10) * (c - total / 10) / (total / 10);
    CHECK(chi < 27.88);
}

TEST_CASE("decoding") {
    Rng rng(4);
    auto s = generate(128, Regime::First, rng);
    std::vector<double> one_hot(10, 0.0);
    one_hot[s.target] = 5.0;
    CHECK(decode_target(s, one_hot).correct);
    const std::vector<double> flat(10, 1.0);
    CHECK(decode_target(s, flat).digit == 0);
    CHECK(decode_target(s, flat).correct == (s.target == 0));

    std::size_t hits = 0;
    const std::size_t n = 1000;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> z(10);
        for (auto& x : z) x = rng.normal();
        hits += decode_target(generate(128, Regime::First, rng), z).correct;
    }
    CHECK(std::abs(double(hits) / n - 0.1) < 0.03);
}

TEST_CASE("infeasible lengths") {
    Rng rng(5);
    CHECK_THROWS_AS(generate(10, Regime::First, rng), Error);
    CHECK_THROWS_AS(generate(64, Regime::First, rng, 30), Error);
}

TEST_CASE("dataset round trip") {
    std::vector<NiahSample> v;
    for (std::size_t i = 0; i < 3; ++i) v.push_back(generate_indexed(128, Regime::Last, 9, i));
    DatasetHeader h{128, 2, Regime::Last, 9, 3};
    std::stringstream ss;
    write_dataset(ss, h, v);
    const auto [h2, v2] = read_dataset(ss);
    CHECK(h2.count == 3);
    CHECK(h2.seed == 9);
    REQUIRE(v2.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(v2[i].tokens == v[i].tokens);
        CHECK(v2[i].target == v[i].target);
        CHECK(v2[i].needle_positions == v[i].needle_positions);
    }
    std::stringstream bad("garbage\n");
    CHECK_THROWS_AS(read_dataset(bad), Error);
}
