#include "gapelab/train.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace gapelab;
using namespace gapelab::train;

namespace {

ModelConfig tiny_model() {
    ModelConfig c;
    c.d_model = 16;
    c.n_head = 2;
    c.n_layer = 2;
    c.gape_enabled = true;
    c.T_train = 64;
    return c;
}

TrainConfig tiny_train() {
    TrainConfig t;
    t.steps_max = 30;
    t.batch = 4;
    t.lr = 3e-3;
    t.lr_min = 3e-4;
    t.warmup = 5;
    t.val_every = 10;
    t.val_size = 20;
    t.L_train = 64;
    t.seed = 11;
    return t;
}

} // namespace

TEST_CASE("schedule endpoints") {
    TrainConfig t;
    t.steps_max = 1000;
    t.warmup = 100;
    t.lr = 1e-3;
    t.lr_min = 1e-4;
    CHECK(lr_at(t, 0) == 0.0);
    CHECK(lr_at(t, 50) == doctest::Approx(5e-4));
    CHECK(lr_at(t, 100) == doctest::Approx(1e-3).epsilon(1e-15));
    CHECK(lr_at(t, 550) == doctest::Approx(5.5e-4).epsilon(1e-12));
    CHECK(lr_at(t, 1000) == doctest::Approx(1e-4).epsilon(1e-15));
    CHECK(lr_at(t, 5000) == 1e-4);
    for (std::size_t s = 101; s <= 1000; ++s) CHECK(lr_at(t, s) <= lr_at(t, s - 1));
}

TEST_CASE("AdamW first step in closed form") {
    ParamStore64 p;
    p.add("w", {1, 1}).data = {1.0};  // rank 2: decays
    p.add("b", {1}).data = {2.0};     // rank 1: no decay
    ParamStore64 g = p.zeros_like();
    g.get("w").data = {0.5};
    g.get("b").data = {-0.25};
    AdamWOptions o{0.9, 0.95, 1e-8, 0.1};
    AdamW<double> opt(p, o);
    const double lr = 1e-2;
    opt.step(p, g, lr);
    // m = (1-b1) g, v = (1-b2) g^2; bias correction leaves m^ = g, v^ = g^2.
    const double w_expect = 1.0 * (1.0 - lr * 0.1) - lr * 0.5 / (0.5 + 1e-8);
    const double b_expect = 2.0 - lr * -0.25 / (0.25 + 1e-8);
    CHECK(std::abs(p.get("w").data[0] - w_expect) < 1e-12);
    CHECK(std::abs(p.get("b").data[0] - b_expect) < 1e-12);
    CHECK(std::abs(opt.first_moment().get("w").data[0] - 0.05) < 1e-15);
    CHECK(std::abs(opt.second_moment().get("b").data[0] - 0.05 * 0.0625) < 1e-15);
}

TEST_CASE("gate parameters are exempt from decay") {
    Rng rng(1);
    auto cfg = tiny_model();
    auto p = init_params<double>(cfg, rng);
    auto before = p;
    AdamW<double> opt(p, {0.9, 0.95, 1e-8, 0.5});
    opt.step(p, p.zeros_like(), 0.1);
    CHECK(p.get("h0.gape.wl").data == before.get("h0.gape.wl").data);
    CHECK(p.get("h0.gape.gamma").data == before.get("h0.gape.gamma").data);
    CHECK(p.get("h0.attn.bq").data == before.get("h0.attn.bq").data);
    CHECK(p.get("h0.attn.wq").data[0] == doctest::Approx(before.get("h0.attn.wq").data[0] * 0.95));
}

TEST_CASE("gradient clipping") {
    ParamStore64 g;
    g.add("a", {2}).data = {3.0, 4.0};
    CHECK(clip_grad_norm(g, 10.0) == 5.0);
    CHECK(g.get("a").data[0] == 3.0);
    CHECK(clip_grad_norm(g, 1.0) == 5.0);
    CHECK(std::hypot(g.get("a").data[0], g.get("a").data[1]) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("config keys round trip") {
    TrainConfig t = tiny_train();
    TrainConfig u;
    for (const auto& k : TrainConfig::keys()) u.set(k, t.get(k));
    CHECK(u.to_text() == t.to_text());
    CHECK_THROWS_AS(u.set("momentum", "0.9"), Error);
    CHECK_THROWS_AS(u.set("batch", "-3"), Error);
    u.lr = 1e-6;
    CHECK_THROWS_AS(u.validate(), Error);
}

TEST_CASE("equal seeds give identical runs") {
    const auto a = train::train(tiny_model(), tiny_train());
    const auto b = train::train(tiny_model(), tiny_train());
    std::ostringstream ma, mb;
    write_metrics_csv(ma, tiny_train(), tiny_model(), a.metrics);
    write_metrics_csv(mb, tiny_train(), tiny_model(), b.metrics);
    CHECK(ma.str() == mb.str());
    CHECK(a.metrics.size() == 3);
    CHECK(ma.str().find("# adamw_eps=1e-08 early_stop_patience=3\n") == 0);
    CHECK(ma.str().find("step,loss,val_acc,lr,g_mean_l0,l_mean_l0,Gamma_mean_l0,g_mean_l1") != std::string::npos);
    for (const auto& row : a.metrics) CHECK(std::isfinite(row.loss));
    auto other = tiny_train();
    other.seed = 12;
    const auto c = train::train(tiny_model(), other);
    CHECK(c.metrics[0].loss != a.metrics[0].loss);
}

TEST_CASE("early stop waits for a perfect streak") {
    auto t = tiny_train();
    const auto r = train::train(tiny_model(), t);
    if (r.early_stopped) {
        REQUIRE(r.metrics.size() >= t.early_stop_patience);
        for (std::size_t k = r.metrics.size() - t.early_stop_patience; k < r.metrics.size(); ++k)
            CHECK(r.metrics[k].val_acc == 1.0);
    } else {
        CHECK(r.steps_run == t.steps_max);
    }
}

TEST_CASE("divergence aborts with a diagnostic") {
    auto t = tiny_train();
    t.lr = 1e30;
    t.lr_min = 1e29;
    t.warmup = 0;
    t.grad_clip = 1e30;
    CHECK_THROWS_WITH_AS(train::train(tiny_model(), t), doctest::Contains("diverged at step"), Diverged);
}

TEST_CASE("untrained model sits at chance") {
    Rng rng(init_stream(3));
    const auto cfg = tiny_model();
    const auto p = init_params<float>(cfg, rng);
    const auto res = evaluate_extrapolation(p, cfg, 64, niah::Regime::First, {1, 2, 4}, 400, 3);
    REQUIRE(res.size() == 3);
    CHECK(res[2].length == 256);
    for (const auto& r : res) {
        CHECK(r.accuracy == static_cast<double>(r.correct) / static_cast<double>(r.n_eval));
        CHECK(std::abs(r.accuracy - 0.1) < 0.06);
    }
}

TEST_CASE("accuracy does not depend on the thread split") {
    Rng rng(4);
    const auto cfg = tiny_model();
    const auto p = init_params<float>(cfg, rng);
    const auto a = measure_accuracy(p, cfg, 64, niah::Regime::Last, 5, 37, 1, true);
    const auto b = measure_accuracy(p, cfg, 64, niah::Regime::Last, 5, 37, 3, true);
    CHECK(a.correct == b.correct);
    CHECK(a.mean_loss == b.mean_loss);
    CHECK(a.mean_final_entropy == b.mean_final_entropy);
    REQUIRE(a.mean_final_entropy.size() == 2);
    CHECK(a.mean_final_entropy[0] > 0.0);
    CHECK(a.mean_final_entropy[0] <= std::log(64.0));

    const auto one = evaluate_extrapolation(p, cfg, 64, niah::Regime::Last, {1}, 37, 5);
    const auto direct = measure_accuracy(p, cfg, 64, niah::Regime::Last, eval_stream(5, 64), 37);
    CHECK(one[0].correct == direct.correct);
}
