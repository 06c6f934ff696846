#include "gapelab/attention.hpp"
#include "gapelab/gape.hpp"
#include "gapelab/posenc.hpp"
#include "gapelab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

namespace gapelab::theory {

namespace {

constexpr std::array<std::size_t, 3> kHeadDims{4, 8, 16};
constexpr std::array<double, 4> kNormalizers{16.0, 64.0, 256.0, 1024.0};

std::uint64_t suite_salt(const std::string& name) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : name) h = (h ^ c) * 1099511628211ULL;
    return h;
}

double log_uniform(Rng& rng, double lo, double hi) {
    return std::exp(rng.uniform(std::log(lo), std::log(hi)));
}

template <std::size_t N, typename T>
T pick(Rng& rng, const std::array<T, N>& xs) {
    return xs[rng.below(N)];
}

EncodingKind random_kind(Rng& rng) {
    switch (rng.below(3)) {
    case 0: return EncodingKind::nope();
    case 1: return EncodingKind::rope();
    default: return EncodingKind::prope(0.75);
    }
}

void fill_direction(Rng& rng, std::span<double> row, double norm) {
    double n2 = 0.0;
    for (double& x : row) {
        x = rng.normal();
        n2 += x * x;
    }
    const double s = n2 > 0.0 ? norm / std::sqrt(n2) : 0.0;
    for (double& x : row) x *= s;
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& x : m.data()) x = rng.normal(0.0, stddev);
    return m;
}

GateParams random_gate_params(Rng& rng, std::size_t dim) {
    GateParams p = GateParams::initial(dim);
    const double w = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& x : p.w_l) x = rng.normal(0.0, 2.0 * w);
    for (double& x : p.w_g) x = rng.normal(0.0, 2.0 * w);
    p.b_l = rng.normal(0.0, 1.5);
    p.b_g = rng.normal(0.0, 1.5);
    p.gamma_raw = rng.normal(0.0, 1.0);
    return p;
}

/// Semantic scores s_{i,m} (m = 0..i) for query i with |s| <= S_max enforced
/// by construction: ||q_i|| ||k_m|| <= S_max sqrt(d) and s carries 1/sqrt(d).
/// Some keys are aligned or anti-aligned with q_i to approach the bound.
std::vector<double> bounded_semantic_row(Rng& rng, std::size_t len, std::size_t d, double S_max,
                                         const EncodingKind& kind) {
    const double root = std::sqrt(S_max * std::sqrt(static_cast<double>(d)));
    Matrix q(len, d), k(len, d);
    fill_direction(rng, q.row(len - 1), root);
    for (std::size_t m = 0; m < len; ++m) {
        const double norm = root * rng.uniform(0.2, 1.0);
        const auto mode = rng.below(4);
        if (mode == 0 || mode == 1) {
            const double sign = mode == 0 ? 1.0 : -1.0;
            for (std::size_t c = 0; c < d; ++c) k(m, c) = sign * q(len - 1, c) * norm / root;
        } else {
            fill_direction(rng, k.row(m), norm);
        }
    }
    // Only row len-1 of q matters; fill the rest so the matrix is well formed.
    for (std::size_t r = 0; r + 1 < len; ++r) fill_direction(rng, q.row(r), root);
    const Matrix s = semantic_logits(q, k, kind, d);
    std::vector<double> row(len);
    for (std::size_t m = 0; m < len; ++m) row[m] = s(len - 1, m);
    return row;
}

double unprotected_mass(const std::vector<double>& alpha, const std::vector<double>& landmark) {
    double mass = 0.0;
    for (std::size_t j = 0; j + 1 < alpha.size(); ++j)
        if (landmark[j] < 1.0) mass += alpha[j];
    return mass;
}

double log_sum_exp(std::span<const double> xs) {
    const double mx = *std::max_element(xs.begin(), xs.end());
    double s = 0.0;
    for (double x : xs) s += std::exp(x - mx);
    return mx + std::log(s);
}

// ---------------------------------------------------------------- suites

std::vector<BoundReport> suite_thm1(std::size_t trials, std::uint64_t seed) {
    BoundReport above{"thm1-dominance-above", 0, 0, 0.0, 0.0};
    BoundReport below{"thm1-dominance-below", 0, 0, 0.0, 0.0};
    BoundReport equal{"thm1-protected-equality", 0, 0, 0.0, 1e-12};
    BoundReport near{"thm1-near-protected", 0, 0, 0.0, 0.0};
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const std::size_t i = 3 + rng.below(4094);
        const std::size_t a = rng.below(i - 2);
        const std::size_t b = a + 1 + rng.below(i - a - 1);
        const double l_b = rng.below(5) == 0 ? 0.0 : rng.uniform(0.0, 0.999);
        const double Gamma = rng.uniform(0.2, 3.0), g = log_uniform(rng, 0.01, 10.0);
        const double T = pick(rng, kNormalizers);
        const double l_star = landmark_dominance_threshold(i, a, b, l_b);
        const double pi = static_cast<double>(i);
        const double m_b = mask_gape_value(pi, static_cast<double>(b), g, l_b, Gamma, T);
        const auto m_a = [&](double l_a) { return mask_gape_value(pi, static_cast<double>(a), g, l_a, Gamma, T); };

        const bool in_range = l_star > 0.0 && l_star < 1.0;
        const double hi = std::min(l_star + 0.01, 1.0);
        above.check_true(in_range && m_a(hi) > m_b, m_a(hi) - m_b);
        if (l_star - 0.01 >= 0.0) below.check_true(m_a(l_star - 0.01) < m_b, m_b - m_a(l_star - 0.01));

        // Exact l = 1 reproduces the diagonal level M_{i,i} for any distant key.
        const double l_i = rng.uniform();
        const double diag = mask_gape_value(pi, pi, g, l_i, Gamma, T);
        const double prot = mask_gape_value(pi, static_cast<double>(a), g, 1.0, Gamma, T);
        equal.check_upper(0.0, std::abs(prot - diag) / std::max(1.0, std::abs(diag)));

        // l = 1 - 1e-6: the gap is Gamma g (i - a) 1e-6 / T, the widened tolerance.
        const double widened = Gamma * g / T * static_cast<double>(i - a) * 1e-6 * (1.0 + 1e-6) + 1e-12;
        near.check_upper(widened, std::abs(m_a(1.0 - 1e-6) - diag));
    }
    return {above, below, equal, near};
}

std::vector<BoundReport> suite_thm2(std::size_t trials, std::uint64_t seed) {
    BoundReport mass{"thm2-mass-bound", 0, 0, 0.0, 1e-12};
    BoundReport uniform{"thm2-mass-bound-uniform", 0, 0, 0.0, 1e-12};
    BoundReport eff{"thm2-effective-context", 0, 0, 0.0, 1e-12};
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        // Random instance against the general and the uniform-gap bound.
        {
            const std::size_t len = 2 + rng.below(63);
            const std::size_t d = pick(rng, kHeadDims);
            TheoremConfig cfg;
            cfg.S_max = rng.uniform(0.25, 3.0);
            cfg.Gamma = rng.uniform(0.2, 3.0);
            cfg.g = log_uniform(rng, 0.01, 100.0);
            cfg.T = pick(rng, kNormalizers);
            const auto s = bounded_semantic_row(rng, len, d, cfg.S_max, random_kind(rng));
            std::vector<double> landmark(len, 0.0);
            for (std::size_t j = 0; j + 1 < len; ++j) landmark[j] = rng.below(10) < 3 ? 1.0 : 0.0;
            const auto alpha = stable_softmax_prefix(gape_row_logits(s, landmark, cfg.g, cfg.Gamma, cfg.T), len);
            std::vector<std::size_t> gaps;
            for (std::size_t j = 0; j + 1 < len; ++j)
                if (landmark[j] < 1.0) gaps.push_back(len - 1 - j);
            const double observed = unprotected_mass(alpha, landmark);
            mass.check_upper(unprotected_mass_bound(cfg, gaps), observed);
            if (!gaps.empty()) {
                cfg.U_size = gaps.size();
                cfg.Delta_min = *std::min_element(gaps.begin(), gaps.end());
                uniform.check_upper(unprotected_mass_bound_uniform(cfg), observed);
            }
        }
        // Every unprotected token beyond the effective context length: mass <= p.
        {
            TheoremConfig cfg;
            cfg.S_max = rng.uniform(0.25, 2.0);
            cfg.Gamma = rng.uniform(0.5, 2.0);
            cfg.T = rng.below(2) == 0 ? 16.0 : 64.0;
            cfg.U_size = 1 + rng.below(20);
            cfg.p = log_uniform(rng, 1e-3, 0.5);
            const double target = rng.uniform(5.0, 100.0);
            cfg.g = cfg.T / (cfg.Gamma * target) *
                    (2.0 * cfg.S_max + std::log(static_cast<double>(cfg.U_size) / cfg.p));
            const double delta_eff = effective_context_length(cfg);
            const std::size_t first_gap = static_cast<std::size_t>(std::floor(delta_eff)) + 1 + rng.below(10);
            const std::size_t i = cfg.U_size - 1 + first_gap;
            const std::size_t d = pick(rng, kHeadDims);
            const auto s = bounded_semantic_row(rng, i + 1, d, cfg.S_max, random_kind(rng));
            std::vector<double> landmark(i + 1, 1.0);
            for (std::size_t k = 0; k < cfg.U_size; ++k) landmark[k] = 0.0;
            const auto alpha = stable_softmax_prefix(gape_row_logits(s, landmark, cfg.g, cfg.Gamma, cfg.T), i + 1);
            eff.check_upper(cfg.p, unprotected_mass(alpha, landmark));
        }
    }
    return {mass, uniform, eff};
}

std::vector<BoundReport> suite_lemma_growth(std::size_t trials, std::uint64_t seed) {
    BoundReport rep{"lemma-growth-partition", 0, 0, 0.0, 1e-12};
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const std::size_t i = 1 + rng.below(200);
        TheoremConfig cfg;
        cfg.S_max = rng.uniform(0.1, 3.0);
        cfg.Gamma = rng.uniform(0.2, 3.0);
        cfg.T = pick(rng, kNormalizers);
        cfg.epsilon = log_uniform(rng, 0.01, 5.0);
        cfg.g = cfg.epsilon * (1.0 + rng.uniform(0.0, 3.0));
        const std::size_t d = pick(rng, kHeadDims);
        const auto s = bounded_semantic_row(rng, i + 1, d, cfg.S_max, random_kind(rng));
        std::vector<double> landmark(i + 1, 0.0);
        std::size_t protected_count = 1;
        for (std::size_t j = 0; j < i; ++j) {
            if (rng.below(4) == 0) {
                landmark[j] = 1.0;
                ++protected_count;
            }
        }
        cfg.P_max = protected_count + rng.below(3);
        const auto logits = gape_row_logits(s, landmark, cfg.g, cfg.Gamma, cfg.T);
        const double log_z = log_sum_exp(logits);
        rep.check_upper(log_partition_growth_bound(cfg, i), log_z);
    }
    return {rep};
}

std::vector<BoundReport> suite_thm3(std::size_t trials, std::uint64_t seed) {
    BoundReport grid{"thm3-adversarial-grid", 0, 0, 0.0, 0.0};
    BoundReport lower{"thm3-gap-lower-bound", 0, 0, 0.0, 1e-12};
    constexpr std::array<double, 4> factors{0.5, 0.99, 1.01, 2.0};
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        TheoremConfig cfg;
        cfg.S_max = rng.uniform(0.1, 3.0);
        cfg.Gamma = rng.uniform(0.2, 3.0);
        cfg.T = pick(rng, kNormalizers);
        const std::size_t delta = 1 + rng.below(4096);
        const std::size_t j = rng.below(4096);
        const std::size_t i = j + delta;
        const double g_min = hallucination_min_gate(cfg, static_cast<double>(delta));
        const double pi = static_cast<double>(i), pj = static_cast<double>(j);
        for (double f : factors) {
            const double g = f * g_min;
            // Worst case: the distant key scores +S_max, the current token -S_max.
            const double a_ii = -cfg.S_max + mask_gape_value(pi, pi, g, 1.0, cfg.Gamma, cfg.T);
            const double a_ij = cfg.S_max + mask_gape_value(pi, pj, g, 0.0, cfg.Gamma, cfg.T);
            const double gap = a_ii - a_ij;
            grid.check_true((gap > 0.0) == (f > 1.0), f > 1.0 ? gap : -gap);
        }
        // Any bounded semantic scores: gap >= -2 S_max + Gamma g Delta / T.
        const double g = log_uniform(rng, 0.01, 10.0) * g_min;
        const double s_ii = rng.uniform(-cfg.S_max, cfg.S_max), s_ij = rng.uniform(-cfg.S_max, cfg.S_max);
        const double gap = (s_ii + mask_gape_value(pi, pi, g, 1.0, cfg.Gamma, cfg.T)) -
                           (s_ij + mask_gape_value(pi, pj, g, 0.0, cfg.Gamma, cfg.T));
        const double bound = -2.0 * cfg.S_max + cfg.Gamma * g * static_cast<double>(delta) / cfg.T;
        const double slack = gap - bound;
        lower.check_true(slack >= -lower.tolerance * std::max(1.0, std::abs(bound)), slack);
    }
    return {grid, lower};
}

std::vector<BoundReport> suite_entropy_collapse(std::size_t trials, std::uint64_t seed) {
    BoundReport rep{"entropy-collapse", 0, 0, 0.0, 1e-10};
    const std::vector<double> g_grid{1.0, 10.0, 100.0, 1000.0};
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const std::size_t len = 2 + rng.below(31);
        CollapseInstance inst;
        inst.Gamma = rng.uniform(0.5, 2.0);
        inst.T = static_cast<double>(len);
        const double S_max = rng.uniform(0.1, 1.0);
        inst.semantic = bounded_semantic_row(rng, len, pick(rng, kHeadDims), S_max, random_kind(rng));
        inst.landmark.assign(len, 0.0);
        for (std::size_t j = 0; j + 1 < len; ++j) inst.landmark[j] = rng.below(3) == 0 ? 1.0 : 0.0;
        const auto res = entropy_collapse_check(inst, g_grid);
        rep.trials += res.report.trials;
        rep.violations += res.report.violations;
        if (t == 0 || res.report.worst_slack < rep.worst_slack) rep.worst_slack = res.report.worst_slack;
    }
    return {rep};
}

std::vector<BoundReport> suite_translation(std::size_t trials, std::uint64_t seed) {
    BoundReport weights{"translation-weights", 0, 0, 0.0, 1e-10};
    BoundReport shift{"translation-logit-shift", 0, 0, 0.0, 1e-9};
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const std::size_t len = 1 + rng.below(48);
        const std::size_t d = pick(rng, kHeadDims);
        AttentionInputs in;
        in.q = random_matrix(rng, len, d - 2);
        in.k = random_matrix(rng, len, d - 2);
        in.v = random_matrix(rng, len, d);
        in.kind = random_kind(rng);
        in.gape = GapeSpec{random_gate_params(rng, d - 2), static_cast<double>(16 + rng.below(1009))};
        const std::size_t offset = 1 + rng.below(1000);
        AttentionInputs moved = in;
        moved.positions = iota_positions(len, offset);
        const GateValues gv = compute_gates(in.q, in.k, in.gape->params, in.gape->T);
        for (MaskPath path : {MaskPath::ExplicitM, MaskPath::ExplicitMHat, MaskPath::FusedAugmented}) {
            const auto base = attend(in, path);
            const auto shifted = attend(moved, path);
            weights.check_upper(0.0, max_abs_diff(base.weights, shifted.weights));
            if (path != MaskPath::ExplicitM) continue;
            double err = 0.0;
            for (std::size_t i = 0; i < len; ++i) {
                const double expect = gv.Gamma * gv.g[i] * static_cast<double>(offset) / gv.T;
                for (std::size_t j = 0; j <= i; ++j) {
                    const double got = shifted.logits(i, j) - base.logits(i, j);
                    err = std::max(err, std::abs(got - expect) / std::max(1.0, std::abs(expect)));
                }
            }
            shift.check_upper(0.0, err);
        }
    }
    return {weights, shift};
}

std::vector<BoundReport> suite_equivalence(std::size_t trials, std::uint64_t seed) {
    BoundReport paths{"equivalence-three-path", 0, 0, 0.0, 1e-10};
    BoundReport rowconst{"equivalence-row-constant", 0, 0, 0.0, 1e-12};
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const std::size_t len = 1 + rng.below(64);
        const std::size_t d = pick(rng, kHeadDims);
        AttentionInputs in;
        in.q = random_matrix(rng, len, d - 2);
        in.k = random_matrix(rng, len, d - 2);
        in.v = random_matrix(rng, len, d);
        in.kind = random_kind(rng);
        in.gape = GapeSpec{random_gate_params(rng, d - 2), static_cast<double>(8 + rng.below(1017))};
        const auto m = attend(in, MaskPath::ExplicitM);
        const auto mhat = attend(in, MaskPath::ExplicitMHat);
        const auto fused = attend(in, MaskPath::FusedAugmented);
        const double err = std::max({max_abs_diff(m.weights, mhat.weights), max_abs_diff(m.weights, fused.weights),
                                     max_abs_diff(mhat.weights, fused.weights)});
        paths.check_upper(0.0, err);

        const GateValues gv = compute_gates(in.q, in.k, in.gape->params, in.gape->T);
        double rc = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            const double expect = -gv.Gamma * gv.g[i] * static_cast<double>(i) / gv.T;
            for (std::size_t j = 0; j <= i; ++j) {
                const double diff = mhat.logits(i, j) - m.logits(i, j);
                rc = std::max(rc, std::abs(diff - expect) / std::max(1.0, std::abs(expect)));
            }
        }
        rowconst.check_upper(0.0, rc);
    }
    return {paths, rowconst};
}

std::vector<BoundReport> suite_niah_threshold(std::size_t trials, std::uint64_t seed) {
    BoundReport flip{"niah-threshold-flip", 0, 0, 0.0, 0.0};
    BoundReport horizons{"niah-eviction-horizons", 0, 0, 0.0, 0.0};
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        TheoremConfig cfg;
        cfg.Gamma = rng.uniform(0.2, 3.0);
        cfg.g = log_uniform(rng, 0.01, 10.0);
        cfg.T = pick(rng, kNormalizers);
        cfg.S_max = rng.uniform(0.1, 3.0);
        cfg.epsilon = cfg.g * rng.uniform(0.1, 1.0);

        // Retrieval flip around the structural penalty.
        {
            const std::size_t i = 2 + rng.below(8191);
            const std::size_t k = 1 + rng.below(i - 1);
            cfg.rho = static_cast<double>(k) / static_cast<double>(i);
            const auto pick_l = rng.below(4);
            const double l_k = pick_l == 0 ? 0.0 : pick_l == 1 ? 1.0 : rng.uniform();
            const double penalty = niah_retrieval_threshold(cfg, i, l_k);
            // Two-token NoPE instance with q_i = sqrt(d) e_1, so s_{i,m} = k_m[0].
            constexpr std::size_t d = 4;
            const double s_ii = rng.uniform(-1.0, 1.0);
            for (double delta : {+0.01, -0.01}) {
                Matrix q(2, d), kk(2, d);
                q(1, 0) = std::sqrt(static_cast<double>(d));
                kk(0, 0) = s_ii + penalty + delta;
                kk(1, 0) = s_ii;
                const Matrix s = semantic_logits(q, kk, EncodingKind::nope());
                const double pi = static_cast<double>(i), pk = static_cast<double>(k);
                const double a_ik = s(1, 0) + mask_gape_value(pi, pk, cfg.g, l_k, cfg.Gamma, cfg.T);
                const double a_ii = s(1, 1) + mask_gape_value(pi, pi, cfg.g, 0.0, cfg.Gamma, cfg.T);
                const bool retrieved = a_ik > a_ii;
                flip.check_true(retrieved == (delta > 0.0), std::abs(a_ik - a_ii));
            }
        }
        // Horizons: with the largest possible semantic advantage 2 S_max.
        {
            cfg.rho = rng.uniform(0.05, 0.95);
            const auto h0 = eviction_horizons(cfg, 1, 0.0);
            const double best = 2.0 * cfg.S_max;
            // Past i_fail an unprotected needle loses even with the maximal advantage.
            const auto i_past = static_cast<std::size_t>(std::ceil(h0.i_fail * rng.uniform(1.0, 3.0))) + 1;
            const double pen_past = cfg.Gamma * cfg.g / cfg.T * static_cast<double>(i_past) * (1.0 - cfg.rho);
            horizons.check_true(!(best > pen_past), pen_past - best);
            // Landmark above l* restores retrieval, below it does not.
            const auto h = eviction_horizons(cfg, i_past, 0.0);
            const auto penalty_at = [&](double l) { return pen_past * (1.0 - l); };
            if (h.l_star + 0.01 <= 1.0)
                horizons.check_true(best > penalty_at(h.l_star + 0.01), best - penalty_at(h.l_star + 0.01));
            if (h.l_star - 0.01 >= 0.0)
                horizons.check_true(!(best > penalty_at(h.l_star - 0.01)), penalty_at(h.l_star - 0.01) - best);
            // Beyond Delta_elim no gate >= epsilon lets a key with this landmark win.
            const double l_k = rng.uniform(0.0, 0.99);
            const auto he = eviction_horizons(cfg, 1, l_k);
            const double dist = he.Delta_elim * rng.uniform(1.001, 3.0);
            const double g = cfg.epsilon * rng.uniform(1.0, 5.0);
            const double pen = cfg.Gamma * g / cfg.T * dist * (1.0 - l_k);
            horizons.check_true(!(best > pen), pen - best);
        }
    }
    return {flip, horizons};
}

using SuiteFn = std::function<std::vector<BoundReport>(std::size_t, std::uint64_t)>;

const std::vector<std::pair<std::string, SuiteFn>>& registry() {
    static const std::vector<std::pair<std::string, SuiteFn>> r{
        {"thm1", suite_thm1},
        {"thm2", suite_thm2},
        {"thm3", suite_thm3},
        {"lemma-growth", suite_lemma_growth},
        {"entropy-collapse", suite_entropy_collapse},
        {"translation", suite_translation},
        {"equivalence", suite_equivalence},
        {"niah-threshold", suite_niah_threshold},
    };
    return r;
}

} // namespace

std::vector<std::string> suite_names() {
    std::vector<std::string> names;
    for (const auto& [name, fn] : registry()) names.push_back(name);
    return names;
}

std::vector<BoundReport> run_suite(const std::string& suite, std::size_t trials, std::uint64_t seed) {
    if (suite == "all") return run_all_suites(trials, seed);
    for (const auto& [name, fn] : registry())
        if (name == suite) return fn(trials, seed ^ suite_salt(name));
    throw Error("unknown verification suite '" + suite + "'");
}

std::vector<BoundReport> run_all_suites(std::size_t trials, std::uint64_t seed) {
    std::vector<BoundReport> all;
    for (const auto& [name, fn] : registry()) {
        auto r = fn(trials, seed ^ suite_salt(name));
        all.insert(all.end(), r.begin(), r.end());
    }
    return all;
}

} // namespace gapelab::theory
