#include "gapelab/numerics.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>

using namespace gapelab;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (auto& x : m.data()) x = rng.uniform(-1.0, 1.0);
    return m;
}

} // namespace

TEST_CASE("softmax over a uniform row") {
    const std::vector<double> z{0.0, 0.0, 0.0};
    const auto p = stable_softmax_row(z, {true, true, true});
    for (double x : p) CHECK(x == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("softmax ratio follows the logit gap") {
    for (double x : {-50.0, 0.0, 3.5, 700.0}) {
        const std::vector<double> z{x, x + std::log(3.0)};
        const auto p = stable_softmax_row(z, {true, true});
        CHECK(p[0] == doctest::Approx(0.25).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(0.75).epsilon(1e-12));
    }
}

TEST_CASE("softmax survives large logits") {
    const std::vector<double> z{1000.0, 1001.0};
    const auto p = stable_softmax_row(z, {true, true});
    // softmax([0, 1]) written out: 1/(1+e), e/(1+e)
    const double e = std::exp(1.0);
    CHECK(p[0] == doctest::Approx(1.0 / (1.0 + e)).epsilon(1e-14));
    CHECK(p[1] == doctest::Approx(e / (1.0 + e)).epsilon(1e-14));
    CHECK(p[0] == doctest::Approx(0.26894).epsilon(1e-4));
}

TEST_CASE("softmax masks and rejects bad rows") {
    const std::vector<double> z{1.0, 2.0, 3.0};
    const auto p = stable_softmax_row(z, {true, false, true});
    CHECK(p[1] == 0.0);
    CHECK(p[0] + p[2] == doctest::Approx(1.0));
    CHECK_THROWS_WITH_AS(stable_softmax_row(z, {false, false, false}), "empty support", Error);
    const std::vector<double> bad{1.0, std::numeric_limits<double>::quiet_NaN()};
    CHECK_THROWS_AS(stable_softmax_row(bad, {true, true}), Error);
    const auto q = stable_softmax_prefix(z, 2);
    CHECK(q[2] == 0.0);
    CHECK(q[0] + q[1] == doctest::Approx(1.0));
}

TEST_CASE("shannon entropy") {
    const std::vector<double> one_hot{0.0, 1.0, 0.0};
    CHECK(shannon_entropy(one_hot) == 0.0);
    const std::vector<double> uni(8, 0.125);
    CHECK(shannon_entropy(uni) == doctest::Approx(std::log(8.0)).epsilon(1e-14));
    const std::vector<double> p{0.25, 0.75};
    CHECK(shannon_entropy(p) == doctest::Approx(-(0.25 * std::log(0.25) + 0.75 * std::log(0.75))).epsilon(1e-14));
    CHECK(shannon_entropy(p) == doctest::Approx(0.5623).epsilon(1e-4));
    const std::vector<double> not_dist{0.5, 0.6};
    CHECK_THROWS_AS(shannon_entropy(not_dist), Error);
    const std::vector<double> negative{-0.1, 1.1};
    CHECK_THROWS_AS(shannon_entropy(negative), Error);
}

TEST_CASE("matrix products") {
    Rng rng(3);
    const Matrix a = random_matrix(4, 4, rng);
    CHECK(max_abs_diff(matmul(Matrix::identity(4), a), a) == 0.0);

    const Matrix x = random_matrix(3, 5, rng), y = random_matrix(5, 2, rng);
    CHECK(max_abs_diff(transpose(matmul(x, y)), matmul(transpose(y), transpose(x))) < 1e-15);

    const Matrix p(2, 2, {1, 2, 3, 4}), q(2, 2, {5, 6, 7, 8});
    const Matrix expect(2, 2, {19, 22, 43, 50});
    CHECK(max_abs_diff(matmul(p, q), expect) == 0.0);
    CHECK_THROWS_AS(matmul(x, x), Error);
    CHECK_THROWS_AS(add(x, y), Error);
}

TEST_CASE("sigmoid and softplus") {
    CHECK(sigmoid(0.0) == 0.5);
    CHECK(softplus(-3.0) == doctest::Approx(std::log1p(std::exp(-3.0))).epsilon(1e-15));
    CHECK(softplus(-3.0) == doctest::Approx(0.04859).epsilon(1e-4));
    CHECK(softplus(800.0) == doctest::Approx(800.0));
    CHECK(std::isfinite(sigmoid(-800.0)));
}

TEST_CASE("SplitMix64 matches the reference sequence") {
    // Published reference outputs of SplitMix64 for seeds 0 and 1234567.
    Rng a(0);
    CHECK(a.next_u64() == 0xe220a8397b1dcdafULL);
    CHECK(a.next_u64() == 0x6e789e6aa1b965f4ULL);
    Rng b(1234567);
    CHECK(b.next_u64() == 6457827717110365317ULL);
    CHECK(b.next_u64() == 3203168211198807973ULL);
    CHECK(b.next_u64() == 9817491932198370423ULL);
}

TEST_CASE("rng helpers") {
    Rng r(11);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        ++counts[r.below(7)];
    }
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);
    double s = 0, ss = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double z = r.normal();
        s += z;
        ss += z * z;
    }
    CHECK(std::abs(s / n) < 0.02);
    CHECK(std::abs(ss / n - 1.0) < 0.02);
    CHECK(derive_seed(5, 0) != derive_seed(5, 1));
    CHECK(derive_seed(5, 0) == derive_seed(5, 0));
    CHECK_THROWS_AS(r.below(0), Error);
}
