#include "gapelab/attention.hpp"

#include <cmath>

namespace gapelab {

namespace {

void validate(const AttentionInputs& in) {
    const std::size_t len = in.q.rows();
    if (len == 0) throw Error("attend: empty sequence");
    if (in.k.rows() != len || in.v.rows() != len) throw Error("attend: q/k/v length mismatch");
    if (in.k.cols() != in.q.cols()) throw Error("attend: q/k width mismatch");
    if (!in.positions.empty() && in.positions.size() != len) throw Error("attend: positions length mismatch");
    if (!in.q.all_finite() || !in.k.all_finite() || !in.v.all_finite()) throw Error("attend: NaN or Inf in inputs");
    in.kind.validate();
    if (in.gape) {
        if (in.kind.scheme == Scheme::ALiBi) throw Error("attend: GAPE cannot be combined with ALiBi");
        if (in.q.cols() + 2 < 4) throw Error("attend: GAPE needs head dimension >= 4");
    }
    if (in.kind.scheme == Scheme::ALiBi && in.head >= in.kind.slopes.size())
        throw Error("attend: no ALiBi slope for head " + std::to_string(in.head));
}

} // namespace

AttentionOutput attend(const AttentionInputs& in, MaskPath path) {
    validate(in);
    const std::size_t len = in.q.rows();
    const Positions pos = in.positions.empty() ? iota_positions(len) : in.positions;
    const std::size_t head_dim = in.q.cols() + (in.gape ? 2 : 0);

    AttentionOutput out;
    out.logits = Matrix(len, len);

    if (in.gape && path == MaskPath::FusedAugmented) {
        Matrix qr = in.q, kr = in.k;
        if (in.kind.rotary()) {
            const auto spec = FrequencySpectrum::make(in.q.cols() - in.q.cols() % 2, in.kind.theta);
            const std::size_t rd = in.kind.rotated_dims(in.q.cols());
            qr = apply_rotary(in.q, pos, spec, rd);
            kr = apply_rotary(in.k, pos, spec, rd);
        }
        const GateValues gv = compute_gates(in.q, in.k, in.gape->params, in.gape->T);
        const auto [qa, ka] = augment_qk(qr, kr, gv, pos, head_dim);
        const double inv = 1.0 / std::sqrt(static_cast<double>(head_dim));
        for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j <= i; ++j) out.logits(i, j) = inv * dot(qa.row(i), ka.row(j));
    } else {
        const Matrix s = semantic_logits(in.q, in.k, in.kind, head_dim, pos);
        std::optional<GateValues> gv;
        if (in.gape) gv = compute_gates(in.q, in.k, in.gape->params, in.gape->T);
        const double slope = in.kind.scheme == Scheme::ALiBi ? in.kind.slopes[in.head] : 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            const double pi = static_cast<double>(pos[i]);
            for (std::size_t j = 0; j <= i; ++j) {
                const double pj = static_cast<double>(pos[j]);
                double a = s(i, j);
                if (slope > 0.0) a -= slope * (pi - pj);
                if (gv) {
                    a += path == MaskPath::ExplicitMHat
                             ? mask_hat_value(pi, pj, gv->g[i], gv->l[j], gv->Gamma, gv->T)
                             : mask_gape_value(pi, pj, gv->g[i], gv->l[j], gv->Gamma, gv->T);
                }
                out.logits(i, j) = a;
            }
        }
    }

    out.weights = Matrix(len, len);
    out.context = Matrix(len, in.v.cols());
    for (std::size_t i = 0; i < len; ++i) {
        const auto w = stable_softmax_prefix(out.logits.row(i), i + 1);
        auto ctx = out.context.row(i);
        for (std::size_t j = 0; j <= i; ++j) {
            out.weights(i, j) = w[j];
            const auto vj = in.v.row(j);
            for (std::size_t c = 0; c < ctx.size(); ++c) ctx[c] += w[j] * vj[c];
        }
    }
    return out;
}

std::size_t KvCacheShape::elements() const {
    return k[0] * k[1] * k[2] * k[3] + v[0] * v[1] * v[2] * v[3];
}

KvCacheShape kv_cache_shapes(const EncodingKind& kind, bool with_gape, std::size_t context_len,
                             std::size_t n_heads, std::size_t head_dim, std::size_t batch) {
    kind.validate();
    if (n_heads == 0 || head_dim == 0 || batch == 0) throw Error("kv_cache_shapes: dimensions must be positive");
    if (with_gape && head_dim < 4) throw Error("kv_cache_shapes: GAPE needs head dimension >= 4");
    // Keys store d-2 semantic coordinates plus (p_j(1-l_j)/T, l_j) under GAPE:
    // still head_dim wide.
    KvCacheShape s;
    s.k = {batch, n_heads, context_len, head_dim};
    s.v = {batch, n_heads, context_len, head_dim};
    return s;
}

} // namespace gapelab
