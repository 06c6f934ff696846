#include "gapelab/theory.hpp"

#include "gapelab/gape.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace gapelab::theory {

void BoundReport::check_upper(double bound, double observed) {
    ++trials;
    const double slack = bound - observed;
    if (trials == 1 || slack < worst_slack) worst_slack = slack;
    if (!(slack >= -tolerance)) ++violations;
}

void BoundReport::check_true(bool ok, double slack) {
    ++trials;
    if (trials == 1 || slack < worst_slack) worst_slack = slack;
    if (!ok) ++violations;
}

void TheoremConfig::validate() const {
    if (!(S_max >= 0.0)) throw Error("TheoremConfig: S_max must be non-negative");
    if (!(Gamma > 0.0) || !(T > 0.0)) throw Error("TheoremConfig: Gamma and T must be positive");
    if (!(g >= 0.0)) throw Error("TheoremConfig: g must be non-negative");
}

double unprotected_mass_bound(const TheoremConfig& cfg, std::span<const std::size_t> gaps) {
    cfg.validate();
    const double rate = cfg.Gamma * cfg.g / cfg.T;
    double sum = 0.0;
    for (std::size_t gap : gaps) {
        if (gap == 0) throw Error("unprotected_mass_bound: gaps must be >= 1");
        sum += std::exp(-rate * static_cast<double>(gap));
    }
    return std::exp(2.0 * cfg.S_max) * sum;
}

double unprotected_mass_bound_uniform(const TheoremConfig& cfg) {
    cfg.validate();
    return static_cast<double>(cfg.U_size) *
           std::exp(2.0 * cfg.S_max - cfg.Gamma * cfg.g * static_cast<double>(cfg.Delta_min) / cfg.T);
}

double effective_context_length(const TheoremConfig& cfg) {
    cfg.validate();
    if (!(cfg.p > 0.0 && cfg.p < 1.0)) throw Error("effective_context_length: p must lie in (0,1)");
    if (cfg.U_size < 1) throw Error("effective_context_length: |U| must be >= 1");
    if (!(cfg.g > 0.0)) throw Error("effective_context_length: g must be positive");
    return cfg.T / (cfg.Gamma * cfg.g) *
           (2.0 * cfg.S_max + std::log(static_cast<double>(cfg.U_size) / cfg.p));
}

double log_partition_growth_bound(const TheoremConfig& cfg, std::size_t i) {
    cfg.validate();
    if (!(cfg.epsilon > 0.0)) throw Error("partition_growth_bound: epsilon must be positive");
    if (cfg.g < cfg.epsilon) throw Error("partition_growth_bound: requires g >= epsilon");
    const double c_i = cfg.Gamma * cfg.g / cfg.T;
    const double c_min = cfg.Gamma * cfg.epsilon / cfg.T;
    const double tail = 1.0 / std::expm1(c_min);
    return cfg.S_max + c_i * static_cast<double>(i) + std::log(static_cast<double>(cfg.P_max) + tail);
}

double partition_growth_bound(const TheoremConfig& cfg, std::size_t i) {
    return std::exp(log_partition_growth_bound(cfg, i));
}

double hallucination_min_gate(const TheoremConfig& cfg, double Delta) {
    cfg.validate();
    if (!(Delta >= 1.0)) throw Error("hallucination_min_gate: Delta must be >= 1");
    if (std::isinf(Delta)) return 0.0;
    return 2.0 * cfg.S_max * cfg.T / (cfg.Gamma * Delta);
}

double niah_retrieval_threshold(const TheoremConfig& cfg, std::size_t i, double l_k) {
    cfg.validate();
    if (!(cfg.rho > 0.0 && cfg.rho < 1.0)) throw Error("niah_retrieval_threshold: rho must lie in (0,1)");
    if (!(l_k >= 0.0 && l_k <= 1.0)) throw Error("niah_retrieval_threshold: l_k must lie in [0,1]");
    return cfg.Gamma * cfg.g / cfg.T * static_cast<double>(i) * (1.0 - cfg.rho) * (1.0 - l_k);
}

EvictionHorizons eviction_horizons(const TheoremConfig& cfg, std::size_t i, double l_k) {
    cfg.validate();
    if (!(l_k >= 0.0 && l_k < 1.0)) throw Error("eviction_horizons: requires 0 <= l_k < 1");
    if (!(cfg.rho >= 0.0 && cfg.rho < 1.0)) throw Error("eviction_horizons: requires rho < 1");
    if (!(cfg.epsilon > 0.0)) throw Error("eviction_horizons: epsilon must be positive");
    if (!(cfg.g > 0.0)) throw Error("eviction_horizons: g must be positive");
    if (i == 0) throw Error("eviction_horizons: i must be positive");
    const double budget = 2.0 * cfg.S_max * cfg.T;
    EvictionHorizons h;
    h.Delta_elim = budget / (cfg.Gamma * cfg.epsilon * (1.0 - l_k));
    h.i_fail = budget / (cfg.Gamma * cfg.g * (1.0 - cfg.rho));
    h.l_star_raw = 1.0 - budget / (cfg.Gamma * cfg.g * static_cast<double>(i) * (1.0 - cfg.rho));
    h.l_star_clamped = h.l_star_raw < 0.0;
    h.l_star = std::max(0.0, h.l_star_raw);
    return h;
}

std::vector<double> gape_row_logits(std::span<const double> semantic, std::span<const double> landmark,
                                    double g, double Gamma, double T) {
    if (semantic.size() != landmark.size() || semantic.empty()) throw Error("gape_row_logits: size mismatch");
    const double i = static_cast<double>(semantic.size() - 1);
    std::vector<double> a(semantic.size());
    for (std::size_t j = 0; j < semantic.size(); ++j)
        a[j] = semantic[j] + mask_gape_value(i, static_cast<double>(j), g, landmark[j], Gamma, T);
    return a;
}

CollapseResult entropy_collapse_check(const CollapseInstance& inst, std::span<const double> g_grid, double tau) {
    const std::size_t n = inst.semantic.size();
    if (n == 0 || inst.landmark.size() != n) throw Error("entropy_collapse_check: malformed instance");
    for (std::size_t k = 1; k < g_grid.size(); ++k)
        if (!(g_grid[k] > g_grid[k - 1])) throw Error("entropy_collapse_check: g_grid must be increasing");
    const std::size_t i = n - 1;
    std::vector<bool> in_p(n, false);
    bool has_unprotected = false;
    for (std::size_t j = 0; j < i; ++j) {
        const double l = inst.landmark[j];
        if (l != 0.0 && l != 1.0) throw Error("entropy_collapse_check: landmarks must be injected as 0 or 1");
        in_p[j] = l >= tau;
        has_unprotected = has_unprotected || !in_p[j];
    }
    in_p[i] = true;

    CollapseResult res;
    res.report.name = "entropy-collapse";
    res.report.tolerance = 1e-10;

    // Renormalized protected-set distribution: structural terms are equal on
    // P, so it is computed from the semantic scores alone.
    const auto alpha_star = stable_softmax_row(inst.semantic, in_p);
    res.limit_entropy = shannon_entropy(alpha_star);

    for (double g : g_grid) {
        const auto logits = gape_row_logits(inst.semantic, inst.landmark, g, inst.Gamma, inst.T);
        const auto alpha = stable_softmax_prefix(logits, n);
        double tv = 0.0, p_mass = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            tv += std::abs(alpha[j] - alpha_star[j]);
            if (in_p[j]) p_mass += alpha[j];
        }
        tv *= 0.5;
        // Conditional distribution on P must not depend on g.
        double cond_err = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            if (in_p[j]) cond_err = std::max(cond_err, std::abs(alpha[j] / p_mass - alpha_star[j]));
        res.report.check_true(cond_err <= res.report.tolerance, res.report.tolerance - cond_err);
        res.points.push_back({g, tv, shannon_entropy(alpha)});
    }
    for (std::size_t k = 1; k < res.points.size(); ++k) {
        const double prev = res.points[k - 1].tv, cur = res.points[k].tv;
        // Once tv has decayed to rounding level it can only be held to "no growth".
        constexpr double kFloor = 1e-12;
        const bool strict = has_unprotected && prev > kFloor;
        const bool ok = strict ? cur < prev : cur <= prev + kFloor;
        res.report.check_true(ok, strict ? prev - cur : prev + kFloor - cur);
    }
    if (!res.points.empty()) {
        const auto& last = res.points.back();
        res.report.check_upper(1e-3, last.tv);
        const double herr = std::abs(last.entropy - res.limit_entropy);
        res.report.check_true(herr <= 1e-4, 1e-4 - herr);
    }
    return res;
}

void write_reports_csv(std::ostream& os, const std::vector<BoundReport>& reports) {
    os << "name,trials,violations,worst_slack,tolerance\n";
    for (const auto& r : reports) {
        os << r.name << ',' << r.trials << ',' << r.violations << ',' << std::setprecision(9)
           << std::scientific << r.worst_slack << ',' << std::setprecision(3) << r.tolerance
           << std::defaultfloat << '\n';
    }
}

} // namespace gapelab::theory
