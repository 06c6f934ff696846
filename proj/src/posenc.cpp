#include "gapelab/posenc.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace gapelab {

Positions iota_positions(std::size_t n, std::size_t offset) {
    Positions p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i + offset;
    return p;
}

FrequencySpectrum FrequencySpectrum::make(std::size_t head_dim, double base) {
    if (head_dim == 0 || head_dim % 2 != 0) throw Error("rotary head_dim must be even and positive");
    if (!(base > 1.0)) throw Error("rotary base must exceed 1");
    FrequencySpectrum s{head_dim, base, {}};
    s.freqs.resize(head_dim / 2);
    for (std::size_t k = 0; k < head_dim / 2; ++k)
        s.freqs[k] = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(head_dim));
    return s;
}

EncodingKind EncodingKind::rope(double theta) {
    EncodingKind e;
    e.scheme = Scheme::RoPE;
    e.theta = theta;
    return e;
}

EncodingKind EncodingKind::prope(double fraction, double theta) {
    EncodingKind e;
    e.scheme = Scheme::PRoPE;
    e.theta = theta;
    e.fraction = fraction;
    e.validate();
    return e;
}

EncodingKind EncodingKind::alibi(std::size_t n_heads) { return alibi(default_alibi_slopes(n_heads)); }

EncodingKind EncodingKind::alibi(std::vector<double> slopes) {
    EncodingKind e;
    e.scheme = Scheme::ALiBi;
    e.slopes = std::move(slopes);
    e.validate();
    return e;
}

std::size_t EncodingKind::rotated_dims(std::size_t dim) const {
    switch (scheme) {
    case Scheme::RoPE:
        return dim - dim % 2;
    case Scheme::PRoPE: {
        const auto chunks = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(dim / 2)));
        return 2 * chunks;
    }
    default:
        return 0;
    }
}

std::string EncodingKind::name() const { return scheme_name(scheme); }

void EncodingKind::validate() const {
    if (!(fraction >= 0.0 && fraction <= 1.0)) throw Error("pRoPE fraction must lie in [0,1]");
    if (rotary() && !(theta > 1.0)) throw Error("rotary theta must exceed 1");
    if (scheme == Scheme::ALiBi) {
        if (slopes.empty()) throw Error("ALiBi requires at least one slope");
        for (double s : slopes)
            if (!(s > 0.0)) throw Error("ALiBi slopes must be positive");
    }
}

Scheme parse_scheme(const std::string& s) {
    std::string l = s;
    std::transform(l.begin(), l.end(), l.begin(), [](unsigned char c) { return std::tolower(c); });
    if (l == "nope") return Scheme::NoPE;
    if (l == "rope") return Scheme::RoPE;
    if (l == "prope" || l == "p-rope") return Scheme::PRoPE;
    if (l == "alibi") return Scheme::ALiBi;
    throw Error("unknown positional encoding '" + s + "'");
}

std::string scheme_name(Scheme s) {
    switch (s) {
    case Scheme::NoPE: return "nope";
    case Scheme::RoPE: return "rope";
    case Scheme::PRoPE: return "prope";
    case Scheme::ALiBi: return "alibi";
    }
    return "?";
}

std::vector<double> default_alibi_slopes(std::size_t n_heads) {
    std::vector<double> s(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h)
        s[h] = std::pow(2.0, -8.0 * static_cast<double>(h + 1) / static_cast<double>(n_heads));
    return s;
}

Matrix apply_rotary(const Matrix& vecs, std::span<const std::size_t> positions,
                    const FrequencySpectrum& spectrum, std::size_t rotated_dims) {
    if (rotated_dims % 2 != 0) throw Error("rotated_dims must be even");
    if (rotated_dims > vecs.cols()) throw Error("rotated_dims exceeds vector width");
    if (rotated_dims / 2 > spectrum.freqs.size()) throw Error("spectrum too short for rotated_dims");
    if (positions.size() != vecs.rows()) throw Error("positions length must match rows");
    Matrix out = vecs;
    for (std::size_t r = 0; r < vecs.rows(); ++r) {
        const double pos = static_cast<double>(positions[r]);
        for (std::size_t c = 0; c < rotated_dims / 2; ++c) {
            const double angle = pos * spectrum.freqs[c];
            const double cs = std::cos(angle), sn = std::sin(angle);
            const double x0 = vecs(r, 2 * c), x1 = vecs(r, 2 * c + 1);
            out(r, 2 * c) = x0 * cs - x1 * sn;
            out(r, 2 * c + 1) = x0 * sn + x1 * cs;
        }
    }
    return out;
}

Matrix semantic_logits(const Matrix& q, const Matrix& k, const EncodingKind& kind,
                       std::optional<std::size_t> scale_dim, std::optional<Positions> positions) {
    if (q.rows() != k.rows() || q.cols() != k.cols()) throw Error("semantic_logits: q/k shape mismatch");
    kind.validate();
    const std::size_t len = q.rows();
    const Positions pos = positions ? *positions : iota_positions(len);
    if (pos.size() != len) throw Error("semantic_logits: positions length mismatch");
    Matrix qr = q, kr = k;
    if (kind.rotary()) {
        const auto spec = FrequencySpectrum::make(q.cols() - q.cols() % 2, kind.theta);
        const std::size_t rd = kind.rotated_dims(q.cols());
        qr = apply_rotary(q, pos, spec, rd);
        kr = apply_rotary(k, pos, spec, rd);
    }
    const double inv = 1.0 / std::sqrt(static_cast<double>(scale_dim.value_or(q.cols())));
    Matrix s(len, len);
    for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = 0; j < len; ++j) s(i, j) = inv * dot(qr.row(i), kr.row(j));
    return s;
}

Matrix alibi_bias(std::size_t length, double slope) {
    if (!(slope > 0.0)) throw Error("ALiBi slope must be positive");
    Matrix b(length, length);
    for (std::size_t i = 0; i < length; ++i)
        for (std::size_t j = 0; j <= i; ++j) b(i, j) = -slope * static_cast<double>(i - j);
    return b;
}

} // namespace gapelab
