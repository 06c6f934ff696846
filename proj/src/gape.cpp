#include "gapelab/gape.hpp"

#include <cmath>
#include <string>

namespace gapelab {

GateParams GateParams::initial(std::size_t semantic_dim) {
    GateParams p;
    p.w_l.assign(semantic_dim, 0.0);
    p.w_g.assign(semantic_dim, 0.0);
    return p;
}

GateValues compute_gates(const Matrix& q, const Matrix& k, const GateParams& params, double T) {
    if (q.rows() != k.rows()) throw Error("compute_gates: q/k length mismatch");
    if (params.w_g.size() != q.cols() || params.w_l.size() != k.cols())
        throw Error("compute_gates: projection width does not match semantic dimension");
    if (!(T > 0.0)) throw Error("compute_gates: T must be positive");
    GateValues gv;
    gv.T = T;
    gv.Gamma = params.amplitude();
    gv.l.resize(k.rows());
    gv.g.resize(q.rows());
    for (std::size_t j = 0; j < k.rows(); ++j) gv.l[j] = sigmoid(dot(params.w_l, k.row(j)) + params.b_l);
    for (std::size_t i = 0; i < q.rows(); ++i) gv.g[i] = softplus(dot(params.w_g, q.row(i)) + params.b_g);
    return gv;
}

double mask_hat_value(double pos_i, double pos_j, double g_i, double l_j, double Gamma, double T) {
    return -Gamma * g_i * (1.0 - l_j) * (pos_i - pos_j) / T;
}

double mask_gape_value(double pos_i, double pos_j, double g_i, double l_j, double Gamma, double T) {
    return Gamma * g_i / T * (pos_j * (1.0 - l_j) + pos_i * l_j);
}

namespace {
void check_causal(std::size_t i, std::size_t j, const GateValues& gv) {
    if (j > i) throw Error("mask: key " + std::to_string(j) + " is after query " + std::to_string(i));
    if (i >= gv.g.size() || j >= gv.l.size()) throw Error("mask: index outside gate values");
}
} // namespace

double mask_hat(std::size_t i, std::size_t j, const GateValues& gv) {
    check_causal(i, j, gv);
    return mask_hat_value(static_cast<double>(i), static_cast<double>(j), gv.g[i], gv.l[j], gv.Gamma, gv.T);
}

double mask_gape(std::size_t i, std::size_t j, const GateValues& gv) {
    check_causal(i, j, gv);
    return mask_gape_value(static_cast<double>(i), static_cast<double>(j), gv.g[i], gv.l[j], gv.Gamma, gv.T);
}

std::pair<Matrix, Matrix> augment_qk(const Matrix& q, const Matrix& k, const GateValues& gv,
                                     std::span<const std::size_t> positions, std::size_t d) {
    if (d < 4) throw Error("augment_qk: head dimension must be at least 4");
    if (q.cols() != d - 2 || k.cols() != d - 2) throw Error("augment_qk: semantic width must be d-2");
    if (q.rows() != k.rows() || positions.size() != q.rows() || gv.size() != q.rows() || gv.g.size() != q.rows())
        throw Error("augment_qk: length mismatch");
    const double sd = std::sqrt(static_cast<double>(d));
    Matrix qa(q.rows(), d), ka(k.rows(), d);
    for (std::size_t r = 0; r < q.rows(); ++r) {
        const double pos = static_cast<double>(positions[r]);
        for (std::size_t c = 0; c < d - 2; ++c) {
            qa(r, c) = q(r, c);
            ka(r, c) = k(r, c);
        }
        const double amp = gv.Gamma * gv.g[r];
        qa(r, d - 2) = amp * sd;
        qa(r, d - 1) = amp * (pos / gv.T) * sd;
        ka(r, d - 2) = pos * (1.0 - gv.l[r]) / gv.T;
        ka(r, d - 1) = gv.l[r];
    }
    return {std::move(qa), std::move(ka)};
}

PartitionSets partition_context(const GateValues& gv, std::size_t i, double tau) {
    if (!(tau > 0.0 && tau < 1.0)) throw Error("partition_context: tau must lie in (0,1)");
    if (i >= gv.l.size()) throw Error("partition_context: query index outside gate values");
    PartitionSets p;
    p.landmark_threshold = tau;
    for (std::size_t j = 0; j < i; ++j) (gv.l[j] >= tau ? p.protected_set : p.unprotected_set).push_back(j);
    p.protected_set.push_back(i);
    return p;
}

double landmark_dominance_threshold(std::size_t i, std::size_t a, std::size_t b, double l_b) {
    if (!(a < b && b < i)) throw Error("landmark_dominance_threshold: requires a < b < i");
    if (!(l_b < 1.0 && l_b >= 0.0)) throw Error("landmark_dominance_threshold: requires 0 <= l_b < 1");
    const double span = static_cast<double>(i - a);
    return (static_cast<double>(i - b) * l_b + static_cast<double>(b - a)) / span;
}

} // namespace gapelab
