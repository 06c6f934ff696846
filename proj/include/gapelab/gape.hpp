#pragma once

#include "gapelab/numerics.hpp"
#include "gapelab/posenc.hpp"

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace gapelab {

/// Default initial values for the learnable gate parameters.
inline constexpr double kInitGateBias = -3.0;     // b_g
inline constexpr double kInitLandmarkBias = 0.0;  // b_l
inline constexpr double kInitGammaRaw = 0.5413;   // softplus(0.5413) ~= 1

/// Learnable per-head gate parameters.
struct GateParams {
    std::vector<double> w_l;  // landmark projection over the semantic key
    double b_l = kInitLandmarkBias;
    std::vector<double> w_g;  // query-gate projection over the semantic query
    double b_g = kInitGateBias;
    double gamma_raw = kInitGammaRaw;

    /// Zero projections with the default biases and amplitude.
    static GateParams initial(std::size_t semantic_dim);
    double amplitude() const { return softplus(gamma_raw); }
};

/// Evaluated gates for one head over a sequence.
struct GateValues {
    std::vector<double> l;  // landmark per key, in [0,1]
    std::vector<double> g;  // query gate per query, > 0
    double Gamma = 1.0;
    double T = 1.0;         // training-context normalizer

    std::size_t size() const { return l.size(); }
};

/// l_j = sigmoid(w_l.k_j + b_l), g_i = softplus(w_g.q_i + b_g), Gamma = softplus(gamma).
/// Gates read the unrotated semantic q/k.
GateValues compute_gates(const Matrix& q, const Matrix& k, const GateParams& params, double T);

/// Distance-penalty form: -Gamma g (1 - l_j)(p_i - p_j)/T.
double mask_hat_value(double pos_i, double pos_j, double g_i, double l_j, double Gamma, double T);
/// Key-linear form: (Gamma g / T)(p_j (1 - l_j) + p_i l_j).
double mask_gape_value(double pos_i, double pos_j, double g_i, double l_j, double Gamma, double T);

/// Index forms (position = index). Throw when j > i.
double mask_hat(std::size_t i, std::size_t j, const GateValues& gv);
double mask_gape(std::size_t i, std::size_t j, const GateValues& gv);

/// Appends the two routing coordinates to q and k so that
/// q~_i . k~_j / sqrt(d) = q_i . k_j / sqrt(d) + M_ij.
/// q and k are L x (d-2); positions supply p_i, p_j.
std::pair<Matrix, Matrix> augment_qk(const Matrix& q, const Matrix& k, const GateValues& gv,
                                     std::span<const std::size_t> positions, std::size_t d);

struct PartitionSets {
    std::vector<std::size_t> protected_set;    // ascending, always contains i
    std::vector<std::size_t> unprotected_set;  // ascending
    double landmark_threshold = 0.9;
};

inline constexpr double kDefaultLandmarkThreshold = 0.9;

/// P_i = {j < i : l_j >= tau} + {i}; U_i = {j < i : l_j < tau}.
PartitionSets partition_context(const GateValues& gv, std::size_t i, double tau = kDefaultLandmarkThreshold);

/// l_a* = ((i-b) l_b + (b-a)) / (i-a): any l_a above it makes key a outrank key b.
double landmark_dominance_threshold(std::size_t i, std::size_t a, std::size_t b, double l_b);

} // namespace gapelab
