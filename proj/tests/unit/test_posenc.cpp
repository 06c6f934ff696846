#include "gapelab/posenc.hpp"

#include <doctest.h>

#include <cmath>

using namespace gapelab;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (auto& x : m.data()) x = rng.uniform(-1.0, 1.0);
    return m;
}

Matrix constant_rows(std::size_t r, std::span<const double> row) {
    Matrix m(r, row.size());
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t c = 0; c < row.size(); ++c) m(i, c) = row[c];
    return m;
}

} // namespace

TEST_CASE("frequency spectrum is geometric") {
    const auto s = FrequencySpectrum::make(8, 10000.0);
    REQUIRE(s.freqs.size() == 4);
    CHECK(s.freqs[0] == 1.0);
    CHECK(s.freqs[1] == doctest::Approx(std::pow(10000.0, -2.0 / 8.0)));
    CHECK(s.freqs[3] == doctest::Approx(std::pow(10000.0, -6.0 / 8.0)));
    CHECK_THROWS_AS(FrequencySpectrum::make(7), Error);
}

TEST_CASE("rotation at position zero is the identity") {
    Rng rng(1);
    const Matrix v = random_matrix(1, 8, rng);
    const Positions pos{0};
    CHECK(max_abs_diff(apply_rotary(v, pos, FrequencySpectrum::make(8), 8), v) == 0.0);
}

TEST_CASE("quarter turn of a unit chunk") {
    FrequencySpectrum s;
    s.head_dim = 2;
    s.freqs = {1.0};
    // Positions are integral, so place the angle with the frequency instead.
    s.freqs = {M_PI / 2.0};
    const Matrix v(1, 2, {1.0, 0.0});
    const Positions pos{1};
    const Matrix r = apply_rotary(v, pos, s, 2);
    CHECK(r(0, 0) == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(r(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("partial rotary boundary fractions") {
    Rng rng(2);
    const Matrix q = random_matrix(6, 8, rng), k = random_matrix(6, 8, rng);
    CHECK(max_abs_diff(semantic_logits(q, k, EncodingKind::prope(1.0)), semantic_logits(q, k, EncodingKind::rope())) ==
          0.0);
    CHECK(max_abs_diff(semantic_logits(q, k, EncodingKind::prope(0.0)), semantic_logits(q, k, EncodingKind::nope())) ==
          0.0);
    CHECK(EncodingKind::prope(0.75).rotated_dims(16) == 12);
    CHECK(EncodingKind::rope().rotated_dims(16) == 16);
    CHECK(EncodingKind::nope().rotated_dims(16) == 0);
}

TEST_CASE("semantic logits") {
    const std::vector<double> e1{1.0, 0.0, 0.0, 0.0};
    const Matrix q = constant_rows(5, e1);
    const Matrix s = semantic_logits(q, q, EncodingKind::nope());
    for (double x : s.data()) CHECK(x == 0.5);

    Rng rng(4);
    std::vector<double> qr(8), kr(8);
    for (auto& x : qr) x = rng.uniform(-1, 1);
    for (auto& x : kr) x = rng.uniform(-1, 1);
    const Matrix r = semantic_logits(constant_rows(10, qr), constant_rows(10, kr), EncodingKind::rope());
    CHECK(r(5, 3) == doctest::Approx(r(9, 7)).epsilon(1e-12));
    CHECK(r(6, 0) == doctest::Approx(r(9, 3)).epsilon(1e-12));

    const Matrix qa = random_matrix(4, 4, rng), ka = random_matrix(4, 4, rng);
    CHECK(max_abs_diff(semantic_logits(qa, ka, EncodingKind::alibi(2)), semantic_logits(qa, ka, EncodingKind::nope())) ==
          0.0);
}

TEST_CASE("alibi bias") {
    const Matrix b = alibi_bias(6, 0.5);
    CHECK(b(3, 3) == 0.0);
    CHECK(b(5, 1) == -2.0);
    for (std::size_t j = 1; j <= 5; ++j) CHECK(b(5, j - 1) < b(5, j));
    const auto sl = default_alibi_slopes(2);
    CHECK(sl[0] == 1.0 / 16.0);
    CHECK(sl[1] == 1.0 / 256.0);
}

TEST_CASE("scheme names round-trip") {
    for (auto s : {Scheme::NoPE, Scheme::RoPE, Scheme::PRoPE, Scheme::ALiBi}) CHECK(parse_scheme(scheme_name(s)) == s);
    CHECK(parse_scheme("RoPE") == Scheme::RoPE);
    CHECK_THROWS_AS(parse_scheme("xpos"), Error);
}
