#pragma once

#include "gapelab/numerics.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace gapelab::theory {

/// Outcome of one brute-force verification run.
struct BoundReport {
    std::string name;
    std::size_t trials = 0;
    std::size_t violations = 0;
    /// Smallest (bound - observed) seen; negative beyond -tolerance means a violation.
    double worst_slack = 0.0;
    double tolerance = 0.0;

    bool passed() const { return violations == 0; }
    /// Records one comparison of `observed` against an upper `bound`; the
    /// report's tolerance is added on top, so pure error checks pass bound 0.
    void check_upper(double bound, double observed);
    /// Records a boolean expectation along with the caller's margin.
    void check_true(bool ok, double slack);
};

/// Constants that appear in the bounds. Gamma, g and T are the head amplitude,
/// the query gate and the context normalizer.
struct TheoremConfig {
    double S_max = 1.0;
    double Gamma = 1.0;
    double g = 1.0;
    double T = 1024.0;
    std::size_t Delta_min = 1;
    std::size_t U_size = 1;
    double p = 0.05;
    double epsilon = 1.0;  // lower bound on the query gate
    std::size_t P_max = 1;
    double rho = 0.5;      // needle depth k/i

    void validate() const;
};

/// e^{2 S_max} * sum_k exp(-Gamma g gap_k / T)
double unprotected_mass_bound(const TheoremConfig& cfg, std::span<const std::size_t> gaps);
/// |U| exp(2 S_max - Gamma g Delta_min / T)
double unprotected_mass_bound_uniform(const TheoremConfig& cfg);

/// (T / (Gamma g)) (2 S_max + log(|U| / p))
double effective_context_length(const TheoremConfig& cfg);

/// e^{S_max + C_i i} (P_max + 1/(e^{C_min} - 1)), C_i = Gamma g / T, C_min = Gamma eps / T.
double partition_growth_bound(const TheoremConfig& cfg, std::size_t i);
/// Same bound in log space, for positions where C_i i overflows exp.
double log_partition_growth_bound(const TheoremConfig& cfg, std::size_t i);

/// 2 S_max T / (Gamma Delta)
double hallucination_min_gate(const TheoremConfig& cfg, double Delta);

/// (Gamma g / T) i (1 - rho)(1 - l_k)
double niah_retrieval_threshold(const TheoremConfig& cfg, std::size_t i, double l_k);

struct EvictionHorizons {
    double Delta_elim = 0.0;  // 2 S_max T / (Gamma eps (1 - l_k))
    double i_fail = 0.0;      // 2 S_max T / (Gamma g (1 - rho))
    double l_star = 0.0;      // 1 - 2 S_max T / (Gamma g i (1 - rho)), clamped at 0
    double l_star_raw = 0.0;  // before clamping; negative means no landmark is needed
    bool l_star_clamped = false;
};

EvictionHorizons eviction_horizons(const TheoremConfig& cfg, std::size_t i, double l_k);

/// A single attention row at query i with injected gates.
struct CollapseInstance {
    std::vector<double> semantic;  // s_{i,j}, j = 0..i
    std::vector<double> landmark;  // l_j, j = 0..i (0 or 1)
    double Gamma = 1.0;
    double T = 1.0;
};

struct CollapsePoint {
    double g = 0.0;
    double tv = 0.0;
    double entropy = 0.0;
};

struct CollapseResult {
    BoundReport report;
    std::vector<CollapsePoint> points;
    double limit_entropy = 0.0;
};

/// Total-variation distance between the attention row and its protected-set
/// renormalization, over an increasing gate grid.
CollapseResult entropy_collapse_check(const CollapseInstance& inst, std::span<const double> g_grid,
                                      double tau = 0.9);

/// Logit a_{i,j} = s + (Gamma g / T)(p_j (1 - l_j) + p_i l_j) for an injected row.
std::vector<double> gape_row_logits(std::span<const double> semantic, std::span<const double> landmark,
                                    double g, double Gamma, double T);

// Verification suites. Each one builds random instances from `seed` and
// checks a closed form against a direct computation.

std::vector<std::string> suite_names();
std::vector<BoundReport> run_suite(const std::string& suite, std::size_t trials, std::uint64_t seed);
std::vector<BoundReport> run_all_suites(std::size_t trials, std::uint64_t seed);

void write_reports_csv(std::ostream& os, const std::vector<BoundReport>& reports);

} // namespace gapelab::theory
