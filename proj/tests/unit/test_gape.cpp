#include "gapelab/gape.hpp"

#include <doctest.h>

#include <cmath>

using namespace gapelab;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (auto& x : m.data()) x = rng.uniform(-1.0, 1.0);
    return m;
}

GateValues gates_with_landmarks(std::vector<double> l, double g, double Gamma, double T) {
    GateValues gv;
    gv.l = std::move(l);
    gv.g.assign(gv.l.size(), g);
    gv.Gamma = Gamma;
    gv.T = T;
    return gv;
}

} // namespace

TEST_CASE("gates at their initial values") {
    Rng rng(1);
    const Matrix q = random_matrix(5, 6, rng), k = random_matrix(5, 6, rng);
    const auto gv = compute_gates(q, k, GateParams::initial(6), 256.0);
    for (double l : gv.l) CHECK(l == 0.5);
    for (double g : gv.g) CHECK(g == doctest::Approx(std::log1p(std::exp(-3.0))).epsilon(1e-15));
    CHECK(gv.g[0] == doctest::Approx(0.04859).epsilon(1e-4));
    CHECK(gv.Gamma == doctest::Approx(std::log1p(std::exp(0.5413))).epsilon(1e-15));
    CHECK(gv.Gamma == doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("distance-penalty mask") {
    CHECK(mask_hat_value(7, 7, 2.0, 0.3, 1.0, 10.0) == 0.0);
    CHECK(mask_hat_value(900, 3, 2.0, 1.0, 1.0, 10.0) == 0.0);
    CHECK(mask_hat_value(512, 0, 2.0, 0.5, 1.0, 1024.0) == doctest::Approx(-0.5).epsilon(1e-15));
}

TEST_CASE("key-linear mask") {
    const double Gamma = 1.3, g = 0.7, T = 64.0;
    CHECK(mask_gape_value(40, 40, g, 0.2, Gamma, T) == doctest::Approx(Gamma * g * 40 / T));
    CHECK(mask_gape_value(40, 40, g, 0.9, Gamma, T) == doctest::Approx(Gamma * g * 40 / T));
    CHECK(mask_gape_value(40, 1, g, 1.0, Gamma, T) == doctest::Approx(mask_gape_value(40, 40, g, 0.0, Gamma, T)));
    CHECK(mask_gape_value(1000, 200, 2.0, 0.25, 1.0, 1024.0) == doctest::Approx(0.78125).epsilon(1e-15));
    // Both forms differ by a per-row constant.
    for (double j : {0.0, 5.0, 17.0, 30.0}) {
        const double diff = mask_hat_value(30, j, g, 0.4, Gamma, T) - mask_gape_value(30, j, g, 0.4, Gamma, T);
        CHECK(diff == doctest::Approx(-Gamma * g * 30 / T).epsilon(1e-14));
    }
    const auto gv = gates_with_landmarks({0.1, 0.2, 0.3}, 1.0, 1.0, 4.0);
    CHECK_THROWS_AS(mask_gape(1, 2, gv), Error);
    CHECK_THROWS_AS(mask_hat(0, 1, gv), Error);
}

TEST_CASE("augmented dot product reproduces s + M") {
    Rng rng(8);
    const std::size_t L = 8, d = 8;
    const Matrix q = random_matrix(L, d - 2, rng), k = random_matrix(L, d - 2, rng);
    GateParams p = GateParams::initial(d - 2);
    for (auto& w : p.w_l) w = rng.normal();
    for (auto& w : p.w_g) w = rng.normal();
    p.b_g = 0.3;
    const auto gv = compute_gates(q, k, p, 16.0);
    const auto pos = iota_positions(L);
    const auto [qt, kt] = augment_qk(q, k, gv, pos, d);
    REQUIRE(qt.cols() == d);
    double worst = 0.0;
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            const double lhs = dot(qt.row(i), kt.row(j)) / std::sqrt(double(d));
            const double rhs = dot(q.row(i), k.row(j)) / std::sqrt(double(d)) + mask_gape(i, j, gv);
            worst = std::max(worst, std::abs(lhs - rhs));
        }
    CHECK(worst < 1e-12);

    GateValues zero = gv;
    std::fill(zero.g.begin(), zero.g.end(), 0.0);
    const auto [q0, k0] = augment_qk(q, k, zero, pos, d);
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j <= i; ++j)
            CHECK(dot(q0.row(i), k0.row(j)) == doctest::Approx(dot(q.row(i), k.row(j))).epsilon(1e-15));
    CHECK_THROWS_AS(augment_qk(random_matrix(L, 1, rng), random_matrix(L, 1, rng), gv, pos, 3), Error);
}

TEST_CASE("context partition") {
    auto none = partition_context(gates_with_landmarks({0, 0, 0, 0}, 1, 1, 1), 3);
    CHECK(none.protected_set == std::vector<std::size_t>{3});
    CHECK(none.unprotected_set == std::vector<std::size_t>{0, 1, 2});
    auto all = partition_context(gates_with_landmarks({1, 1, 1, 1}, 1, 1, 1), 3);
    CHECK(all.unprotected_set.empty());
    auto mixed = partition_context(gates_with_landmarks({0.99, 0.3, 0.95, 0.1}, 1, 1, 1), 3, 0.9);
    CHECK(mixed.protected_set == std::vector<std::size_t>{0, 2, 3});
    CHECK(mixed.unprotected_set == std::vector<std::size_t>{1});
}

TEST_CASE("landmark dominance threshold") {
    CHECK(landmark_dominance_threshold(10, 2, 5, 0.5) == doctest::Approx(0.6875).epsilon(1e-15));
    CHECK(landmark_dominance_threshold(1000, 3, 4, 0.0) == doctest::Approx(1.0 / 997.0));
    // Above the threshold key a outranks key b under the penalty form.
    const std::size_t i = 10, a = 2, b = 5;
    const double lb = 0.5, ls = landmark_dominance_threshold(i, a, b, lb);
    for (double delta : {0.01, -0.01}) {
        const double la = ls + delta;
        const double ma = mask_hat_value(i, a, 1.0, la, 1.0, 4.0);
        const double mb = mask_hat_value(i, b, 1.0, lb, 1.0, 4.0);
        CHECK((ma > mb) == (delta > 0));
    }
}
