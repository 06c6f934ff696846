#include "gapelab/model.hpp"

#include "fixtures.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace gapelab;

namespace {

ModelConfig small_config(bool gape, EncodingKind kind = EncodingKind::nope()) {
    ModelConfig c;
    c.n_layer = 2;
    c.n_head = 2;
    c.d_model = 16;
    c.gape_enabled = gape;
    c.kind = std::move(kind);
    c.T_train = 32;
    return c;
}

template <class T>
void jitter(BasicParamStore<T>& p, Rng& rng, double s) {
    for (auto& e : p.entries())
        for (auto& x : e.data) x += static_cast<T>(rng.normal(0.0, s));
}

std::vector<niah::NiahSample> batch_of(std::size_t n, std::size_t L, std::uint64_t seed) {
    std::vector<niah::NiahSample> b;
    for (std::size_t i = 0; i < n; ++i) b.push_back(niah::generate_indexed(L, niah::Regime::First, seed, i, std::size_t{1}));
    return b;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("gapelab_test_" + name)).string();
}

} // namespace

TEST_CASE("config validation") {
    ModelConfig c;
    c.d_model = 30;
    c.n_head = 4;
    CHECK_THROWS_AS(c.validate(), Error);
    c = small_config(true);
    c.n_head = 8;  // head dim 2 < 4
    CHECK_THROWS_AS(c.validate(), Error);
    c = small_config(true, EncodingKind::alibi(2));
    CHECK_THROWS_AS(c.validate(), Error);
    c = small_config(false, EncodingKind::rope());
    CHECK(ModelConfig::from_text(c.to_text()) == c);
}

TEST_CASE("parameters follow the layout") {
    Rng rng(1);
    const auto cfg = small_config(true);
    const auto p = init_params<float>(cfg, rng);
    CHECK(p.get("h0.attn.wq").shape == std::vector<std::size_t>{16, 12});
    CHECK(p.get("h1.gape.wl").shape == std::vector<std::size_t>{2, 6});
    CHECK(p.get("h0.gape.bg").data[1] == -3.0f);
    CHECK(p.get("h0.gape.gamma").data[0] == 0.5413f);
    CHECK(p.get("h0.gape.wg").data[3] == 0.0f);
    CHECK(!p.contains("wpe"));
    CHECK(!init_params<float>(small_config(false), rng).contains("h0.gape.wl"));
    CHECK(decays("h0.attn.wq", 2));
    CHECK(decays("wte", 2));
    CHECK(!decays("h0.attn.bq", 1));
    CHECK(!decays("h0.gape.wl", 2));
}

TEST_CASE("single-token forward") {
    Rng rng(2);
    const auto cfg = small_config(true, EncodingKind::rope());
    const auto p = init_params<double>(cfg, rng);
    const std::vector<niah::Token> tok{niah::NiahVocab::kQuery};
    const auto r = forward(p, tok, cfg, CaptureFlags{true});
    CHECK(r.logits.rows() == 1);
    CHECK(r.logits.cols() == cfg.vocab_size);
    for (const auto& layer : r.trace->layers)
        for (const auto& h : layer) CHECK(h.weights(0, 0) == 1.0);
    const std::vector<niah::Token> bad{200};
    CHECK_THROWS_AS(forward(p, bad, cfg), Error);
}

TEST_CASE("forward is deterministic and causal") {
    Rng rng(3);
    const auto cfg = small_config(true, EncodingKind::rope());
    auto p = init_params<float>(cfg, rng);
    jitter(p, rng, 0.2);
    auto s = niah::generate_indexed(64, niah::Regime::First, 1, 0);
    const auto a = forward(p, s.tokens, cfg);
    const auto b = forward(p, s.tokens, cfg);
    CHECK(a.logits.data() == b.logits.data());
    s.tokens[50] = s.tokens[50] == 13 ? 14 : 13;
    const auto c = forward(p, s.tokens, cfg);
    for (std::size_t i = 0; i < 50; ++i)
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) CHECK(c.logits(i, v) == a.logits(i, v));
    bool changed = false;
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) changed = changed || c.logits(63, v) != a.logits(63, v);
    CHECK(changed);
}

TEST_CASE("final-position forward matches the full forward") {
    Rng rng(4);
    for (auto kind : {EncodingKind::nope(), EncodingKind::rope(), EncodingKind::alibi(2)}) {
        const auto cfg = small_config(kind.scheme != Scheme::ALiBi, kind);
        auto p = init_params<double>(cfg, rng);
        jitter(p, rng, 0.2);
        const auto s = niah::generate_indexed(80, niah::Regime::Last, 2, 0);
        const auto full = forward(p, s.tokens, cfg);
        const auto last = final_logits(p, s.tokens, cfg);
        for (std::size_t v = 0; v < cfg.vocab_size; ++v) CHECK(last[v] == doctest::Approx(full.logits(79, v)).epsilon(1e-12));
    }
}

TEST_CASE("float and double paths agree") {
    Rng rng(5);
    const auto cfg = small_config(true, EncodingKind::prope());
    auto p = init_params<double>(cfg, rng);
    jitter(p, rng, 0.1);
    const auto s = niah::generate_indexed(64, niah::Regime::First, 3, 0);
    const auto a = final_logits(p, s.tokens, cfg);
    const auto b = final_logits(p.cast<float>(), s.tokens, cfg);
    for (std::size_t v = 0; v < a.size(); ++v) CHECK(std::abs(a[v] - b[v]) < 1e-4);
}

TEST_CASE("switching the gates off recovers the base model") {
    // NoPE only: under RoPE the GAPE head rotates d - 2 channels, so its
    // frequency ladder differs from the base head's and zero padding cannot
    // line the two up.
    Rng rng(6);
    for (int trial = 0; trial < 3; ++trial) {
        const auto cfg = small_config(true);
        auto p = init_params<double>(cfg, rng);
        jitter(p, rng, 0.2);
        testing::switch_off_gates(p, cfg);
        ModelConfig base_cfg;
        const auto base = testing::base_equivalent(p, cfg, base_cfg);
        const auto s = niah::generate_indexed(64, niah::Regime::First, 4, trial);
        const auto a = forward(p, s.tokens, cfg).logits;
        const auto b = forward(base, s.tokens, base_cfg).logits;
        CHECK(max_abs_diff(a, b) < 1e-6);
    }
}

TEST_CASE("loss at chance") {
    Rng rng(7);
    const auto cfg = small_config(true);
    auto p = init_params<double>(cfg, rng);
    p.get("head.w").data.assign(p.get("head.w").data.size(), 0.0);
    p.get("head.b").data.assign(p.get("head.b").data.size(), 0.0);
    const auto b = batch_of(1, 64, 5);
    CHECK(loss_and_grad(p, b, cfg).loss == doctest::Approx(std::log(10.0)).epsilon(1e-14));
}

TEST_CASE("parameters the loss ignores get zero gradient") {
    Rng rng(8);
    const auto cfg = small_config(true);
    auto p = init_params<double>(cfg, rng);
    jitter(p, rng, 0.1);
    const auto b = batch_of(2, 64, 6);
    const auto lg = loss_and_grad(p, b, cfg);
    const auto& hw = lg.grads.get("head.w");
    for (std::size_t r = 0; r < cfg.d_model; ++r)
        for (std::size_t v = niah::NiahVocab::kDigits; v < cfg.vocab_size; ++v)
            CHECK(hw.data[r * cfg.vocab_size + v] == 0.0);
    // The '=' token never appears outside needles, but every token id below
    // the vocabulary size does; pick an id beyond the sampler's range.
    ModelConfig wide = cfg;
    wide.vocab_size = 30;
    auto pw = init_params<double>(wide, rng);
    const auto lw = loss_and_grad(pw, b, wide);
    for (std::size_t c = 0; c < wide.d_model; ++c) CHECK(lw.grads.get("wte").data[29 * wide.d_model + c] == 0.0);
}

TEST_CASE("gradients match central finite differences") {
    // 64-bit, h = 1e-4, d_model 16, L 32, two layers.
    const double h = 1e-4;
    for (auto kind : {EncodingKind::nope(), EncodingKind::rope()}) {
        Rng rng(9);
        const auto cfg = small_config(true, kind);
        auto p = init_params<double>(cfg, rng);
        jitter(p, rng, 0.3);
        const auto b = batch_of(2, 32, 7);
        const auto lg = loss_and_grad(p, b, cfg);
        double worst = 0.0;
        std::size_t checked = 0;
        for (auto& e : p.entries()) {
            const auto& g = lg.grads.get(e.name).data;
            for (int t = 0; t < 3; ++t) {
                // Prefer coordinates the loss actually depends on (e.g. wte rows of
                // tokens present in the batch); fall back to any after a few draws.
                std::size_t i = rng.below(e.data.size());
                for (int tries = 0; tries < 64 && g[i] == 0.0; ++tries) i = rng.below(e.data.size());
                const double x = e.data[i];
                e.data[i] = x + h;
                const double up = loss_only(p, b, cfg);
                e.data[i] = x - h;
                const double down = loss_only(p, b, cfg);
                e.data[i] = x;
                const double fd = (up - down) / (2 * h);
                const double rel = std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), 1e-6});
                worst = std::max(worst, rel);
                ++checked;
            }
        }
        INFO(kind.name());
        CHECK(checked >= 50);
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("checkpoint round trip") {
    Rng rng(10);
    const auto cfg = small_config(true, EncodingKind::rope());
    auto p = init_params<float>(cfg, rng);
    jitter(p, rng, 0.1);
    const auto a = temp_path("a.ckpt"), b = temp_path("b.ckpt");
    checkpoint_save(p, cfg, a);
    const auto ck = checkpoint_load(a);
    CHECK(ck.config == cfg);
    CHECK(ck.dtype == "f32");
    checkpoint_save(ck.params, ck.config, b);
    CHECK(slurp(a) == slurp(b));
    const auto s = niah::generate_indexed(48, niah::Regime::First, 8, 0, std::size_t{1});
    CHECK(forward(p, s.tokens, cfg).logits.data() == forward(ck.params, s.tokens, cfg).logits.data());

    auto other = cfg;
    other.d_model = 32;
    CHECK_THROWS_WITH_AS(checkpoint_load(a, other), doctest::Contains("wte"), Error);
    auto no_gape = cfg;
    no_gape.gape_enabled = false;
    CHECK_THROWS_WITH_AS(checkpoint_load(a, no_gape), doctest::Contains("attn.wq"), Error);

    auto bytes = slurp(a);
    bytes[bytes.size() / 2] ^= 0x5a;
    std::ofstream(b, std::ios::binary) << bytes;
    CHECK_THROWS_WITH_AS(checkpoint_load(b), doctest::Contains("checksum"), Error);
    std::ofstream(b, std::ios::binary) << "not a checkpoint";
    CHECK_THROWS_AS(checkpoint_load(b), Error);
    std::remove(a.c_str());
    std::remove(b.c_str());
}
