#include "gapelab/attention.hpp"

#include <doctest.h>

#include <cmath>

using namespace gapelab;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
    Matrix m(r, c);
    for (auto& x : m.data()) x = rng.uniform(-1.0, 1.0);
    return m;
}

AttentionInputs random_inputs(Rng& rng, std::size_t L, std::size_t d, EncodingKind kind, bool gape) {
    AttentionInputs in;
    const std::size_t ds = gape ? d - 2 : d;
    in.q = random_matrix(L, ds, rng);
    in.k = random_matrix(L, ds, rng);
    in.v = random_matrix(L, d, rng);
    in.kind = std::move(kind);
    if (gape) {
        GateParams p = GateParams::initial(ds);
        for (auto& w : p.w_l) w = rng.normal();
        for (auto& w : p.w_g) w = rng.normal();
        p.b_g = rng.uniform(-2, 2);
        p.b_l = rng.uniform(-2, 2);
        p.gamma_raw = rng.uniform(-1, 1);
        in.gape = GapeSpec{p, static_cast<double>(L)};
    }
    return in;
}

} // namespace

TEST_CASE("single token attends to itself") {
    Rng rng(1);
    for (auto kind : {EncodingKind::nope(), EncodingKind::rope(), EncodingKind::prope(), EncodingKind::alibi(1)}) {
        const bool gape = kind.scheme != Scheme::ALiBi;
        auto in = random_inputs(rng, 1, 4, kind, gape);
        const auto out = attend(in);
        CHECK(out.weights(0, 0) == 1.0);
        for (std::size_t c = 0; c < 4; ++c) CHECK(out.context(0, c) == doctest::Approx(in.v(0, c)).epsilon(1e-15));
    }
}

TEST_CASE("weights are causal rows of a distribution") {
    Rng rng(2);
    const auto out = attend(random_inputs(rng, 9, 8, EncodingKind::rope(), true));
    for (std::size_t i = 0; i < 9; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < 9; ++j) {
            if (j > i) CHECK(out.weights(i, j) == 0.0);
            s += out.weights(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
}

TEST_CASE("extreme gate with no landmarks collapses onto the current token") {
    Rng rng(3);
    auto in = random_inputs(rng, 12, 6, EncodingKind::nope(), true);
    auto& p = in.gape->params;
    std::fill(p.w_g.begin(), p.w_g.end(), 0.0);
    std::fill(p.w_l.begin(), p.w_l.end(), 0.0);
    p.b_g = 1e6;    // softplus(1e6) = 1e6
    p.b_l = -1e3;   // l = sigmoid(-1000) = 0 in double
    p.gamma_raw = 0.5413;
    const auto out = attend(in);
    for (std::size_t i = 1; i < 12; ++i) CHECK(out.weights(i, i) > 1.0 - 1e-6);
}

TEST_CASE("three mask paths give the same weights") {
    Rng rng(4);
    double worst = 0.0;
    for (int t = 0; t < 40; ++t) {
        const std::size_t L = 1 + rng.below(40);
        const std::size_t d = std::vector<std::size_t>{4, 8, 16}[rng.below(3)];
        const auto kind = t % 2 ? EncodingKind::rope() : EncodingKind::nope();
        const auto in = random_inputs(rng, L, d, kind, true);
        const auto a = attend(in, MaskPath::ExplicitM);
        const auto b = attend(in, MaskPath::ExplicitMHat);
        const auto c = attend(in, MaskPath::FusedAugmented);
        worst = std::max({worst, max_abs_diff(a.weights, b.weights), max_abs_diff(a.weights, c.weights)});
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("shifting positions keeps the weights") {
    Rng rng(5);
    auto in = random_inputs(rng, 10, 8, EncodingKind::nope(), true);
    const auto base = attend(in);
    in.positions = iota_positions(10, 100);
    const auto shifted = attend(in);
    CHECK(max_abs_diff(base.weights, shifted.weights) < 1e-10);
}

TEST_CASE("invalid attention inputs") {
    Rng rng(6);
    AttentionInputs empty;
    CHECK_THROWS_AS(attend(empty), Error);
    auto mixed = random_inputs(rng, 4, 6, EncodingKind::alibi(1), true);
    CHECK_THROWS_AS(attend(mixed), Error);
    auto alibi = random_inputs(rng, 4, 6, EncodingKind::alibi(1), false);
    alibi.head = 3;
    CHECK_THROWS_AS(attend(alibi), Error);
    auto nan = random_inputs(rng, 4, 6, EncodingKind::nope(), false);
    nan.q(1, 1) = std::nan("");
    CHECK_THROWS_AS(attend(nan), Error);
}

TEST_CASE("kv cache shapes ignore the gates") {
    const auto a = kv_cache_shapes(EncodingKind::rope(), false, 256, 2, 64);
    const auto b = kv_cache_shapes(EncodingKind::rope(), true, 256, 2, 64);
    CHECK(a == b);
    CHECK(a.k == std::array<std::size_t, 4>{1, 2, 256, 64});
    CHECK(kv_cache_shapes(EncodingKind::rope(), true, 0, 2, 64).elements() == 0);
    CHECK(kv_cache_shapes(EncodingKind::rope(), true, 512, 2, 64).elements() == 2 * a.elements());
}
