#include "gapelab/model.hpp"

#include "gapelab/gape.hpp"
#include "kernels.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gapelab {

void ModelConfig::validate() const {
    if (n_layer == 0 || n_head == 0 || d_model == 0 || vocab_size == 0)
        throw Error("model config: sizes must be positive");
    if (d_model % n_head != 0) throw Error("model config: d_model must be divisible by n_head");
    if (vocab_size < niah::NiahVocab::kDigits) throw Error("model config: vocabulary must contain the 10 digits");
    if (gape_enabled && head_dim() < 4) throw Error("model config: GAPE requires head dimension >= 4");
    if (gape_enabled && kind.scheme == Scheme::ALiBi) throw Error("model config: GAPE cannot be combined with ALiBi");
    if (kind.rotary() && semantic_dim() % 2 != 0) throw Error("model config: rotary q/k width must be even");
    if (kind.scheme == Scheme::ALiBi && kind.slopes.size() != n_head)
        throw Error("model config: need one ALiBi slope per head");
    if (T_train == 0) throw Error("model config: T_train must be positive");
    if (dropout != 0.0) throw Error("model config: dropout is fixed at 0");
    kind.validate();
}

namespace {

std::string fmt_double(double v) { return format_double(v); }

} // namespace

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "n_layer=" << n_layer << '\n'
       << "n_head=" << n_head << '\n'
       << "d_model=" << d_model << '\n'
       << "vocab_size=" << vocab_size << '\n'
       << "pe=" << kind.name() << '\n'
       << "theta=" << fmt_double(kind.theta) << '\n'
       << "rope_fraction=" << fmt_double(kind.fraction) << '\n'
       << "alibi_slopes=";
    for (std::size_t h = 0; h < kind.slopes.size(); ++h) os << (h ? "," : "") << fmt_double(kind.slopes[h]);
    os << '\n'
       << "gape=" << (gape_enabled ? 1 : 0) << '\n'
       << "T_train=" << T_train << '\n'
       << "dropout=" << fmt_double(dropout) << '\n'
       << "gates_on_rotated=" << (gates_on_rotated ? 1 : 0) << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
    ModelConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("model config: malformed line '" + line + "'");
        const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "n_layer") c.n_layer = std::stoul(val);
        else if (key == "n_head") c.n_head = std::stoul(val);
        else if (key == "d_model") c.d_model = std::stoul(val);
        else if (key == "vocab_size") c.vocab_size = std::stoul(val);
        else if (key == "pe") c.kind.scheme = parse_scheme(val);
        else if (key == "theta") c.kind.theta = std::stod(val);
        else if (key == "rope_fraction") c.kind.fraction = std::stod(val);
        else if (key == "alibi_slopes") {
            c.kind.slopes.clear();
            std::istringstream ss(val);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) c.kind.slopes.push_back(std::stod(item));
        } else if (key == "gape") c.gape_enabled = val == "1";
        else if (key == "T_train") c.T_train = std::stoul(val);
        else if (key == "dropout") c.dropout = std::stod(val);
        else if (key == "gates_on_rotated") c.gates_on_rotated = val == "1";
        else throw Error("model config: unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

bool decays(const std::string& name, std::size_t rank) {
    return rank >= 2 && name.find(".gape.") == std::string::npos;
}

namespace {

std::string lname(std::size_t l, const char* suffix) { return "h" + std::to_string(l) + "." + suffix; }

/// Names and shapes of every entry, in storage order.
std::vector<std::pair<std::string, std::vector<std::size_t>>> layout(const ModelConfig& cfg) {
    const std::size_t C = cfg.d_model, H = cfg.n_head, ds = cfg.semantic_dim(), V = cfg.vocab_size;
    std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
    out.push_back({"wte", {V, C}});
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
        out.push_back({lname(l, "ln1.w"), {C}});
        out.push_back({lname(l, "ln1.b"), {C}});
        out.push_back({lname(l, "attn.wq"), {C, H * ds}});
        out.push_back({lname(l, "attn.bq"), {H * ds}});
        out.push_back({lname(l, "attn.wk"), {C, H * ds}});
        out.push_back({lname(l, "attn.bk"), {H * ds}});
        out.push_back({lname(l, "attn.wv"), {C, C}});
        out.push_back({lname(l, "attn.bv"), {C}});
        out.push_back({lname(l, "attn.wo"), {C, C}});
        out.push_back({lname(l, "attn.bo"), {C}});
        if (cfg.gape_enabled) {
            out.push_back({lname(l, "gape.wl"), {H, ds}});
            out.push_back({lname(l, "gape.bl"), {H}});
            out.push_back({lname(l, "gape.wg"), {H, ds}});
            out.push_back({lname(l, "gape.bg"), {H}});
            out.push_back({lname(l, "gape.gamma"), {H}});
        }
        out.push_back({lname(l, "ln2.w"), {C}});
        out.push_back({lname(l, "ln2.b"), {C}});
        out.push_back({lname(l, "mlp.wfc"), {C, 4 * C}});
        out.push_back({lname(l, "mlp.bfc"), {4 * C}});
        out.push_back({lname(l, "mlp.wproj"), {4 * C, C}});
        out.push_back({lname(l, "mlp.bproj"), {C}});
    }
    out.push_back({"lnf.w", {C}});
    out.push_back({"lnf.b", {C}});
    out.push_back({"head.w", {C, V}});
    out.push_back({"head.b", {V}});
    return out;
}

bool ends_with(const std::string& s, const char* suffix) {
    const std::size_t n = std::strlen(suffix);
    return s.size() >= n && s.compare(s.size() - n, n, suffix) == 0;
}

} // namespace

template <class T>
void check_layout(const BasicParamStore<T>& params, const ModelConfig& cfg) {
    const auto want = layout(cfg);
    for (const auto& [name, shape] : want) {
        if (!params.contains(name)) throw Error("parameter '" + name + "' missing for this model config");
        if (params.get(name).shape != shape) throw Error("parameter '" + name + "' has the wrong shape");
    }
    for (const auto& e : params.entries()) {
        bool known = false;
        for (const auto& w : want) known = known || w.first == e.name;
        if (!known) throw Error("parameter '" + e.name + "' is not part of this model config");
    }
}

template <class T>
BasicParamStore<T> init_params(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    BasicParamStore<T> p;
    for (const auto& [name, shape] : layout(cfg)) {
        auto& e = p.add(name, shape);
        if (ends_with(name, ".gape.bg")) {
            std::fill(e.data.begin(), e.data.end(), T(kInitGateBias));
        } else if (ends_with(name, ".gape.bl")) {
            std::fill(e.data.begin(), e.data.end(), T(kInitLandmarkBias));
        } else if (ends_with(name, ".gape.gamma")) {
            std::fill(e.data.begin(), e.data.end(), T(kInitGammaRaw));
        } else if (name.find(".gape.") != std::string::npos) {
            // gate projections start at zero
        } else if (ends_with(name, "ln1.w") || ends_with(name, "ln2.w") || name == "lnf.w") {
            std::fill(e.data.begin(), e.data.end(), T(1));
        } else if (shape.size() >= 2) {
            for (auto& x : e.data) x = static_cast<T>(rng.normal(0.0, 0.02));
        }
    }
    return p;
}

std::vector<double> digit_logits(std::span<const double> vocab_logits) {
    if (vocab_logits.size() < niah::NiahVocab::kDigits) throw Error("digit_logits: row too short");
    return {vocab_logits.begin(), vocab_logits.begin() + niah::NiahVocab::kDigits};
}

// ------------------------------------------------------------------ kernels

namespace {

constexpr double kLayerNormEps = 1e-5;

/// y[n x out] = x[n x in] w[in x out] + b.
template <class T>
void linear(const T* x, std::size_t n, std::size_t in, const T* w, const T* b, std::size_t out, T* y) {
    for (std::size_t t = 0; t < n; ++t) std::copy_n(b, out, y + t * out);
    kernels::gemm(n, out, in, x, in, 1, w, out, y, out, true);
}

/// Accumulates dx += dy w^T, dw += x^T dy, db += colsum(dy). `scratch`
/// receives w^T so both products read contiguous rows.
template <class T>
void linear_backward(const T* x, const T* dy, std::size_t n, std::size_t in, std::size_t out, const T* w, T* dx,
                     T* dw, T* db, std::vector<T>& scratch) {
    if (dx) {
        scratch.resize(in * out);
        kernels::transpose(w, in, out, out, scratch.data());
        kernels::gemm(n, in, out, dy, out, 1, scratch.data(), in, dx, in, true);
    }
    kernels::gemm(in, out, n, x, 1, in, dy, out, dw, out, true);
    for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < out; ++j) db[j] += dy[t * out + j];
}

template <class T>
void layernorm(const T* x, std::size_t n, std::size_t C, const T* w, const T* b, T* y, T* mean, T* rstd) {
    for (std::size_t t = 0; t < n; ++t) {
        const T* xt = x + t * C;
        T m = 0;
        for (std::size_t c = 0; c < C; ++c) m += xt[c];
        m /= static_cast<T>(C);
        T v = 0;
        for (std::size_t c = 0; c < C; ++c) v += (xt[c] - m) * (xt[c] - m);
        v /= static_cast<T>(C);
        const T r = T(1) / std::sqrt(v + static_cast<T>(kLayerNormEps));
        mean[t] = m;
        rstd[t] = r;
        T* yt = y + t * C;
        for (std::size_t c = 0; c < C; ++c) yt[c] = (xt[c] - m) * r * w[c] + b[c];
    }
}

template <class T>
void layernorm_backward(const T* x, const T* dy, std::size_t n, std::size_t C, const T* w, const T* mean,
                        const T* rstd, T* dx, T* dw, T* db) {
    for (std::size_t t = 0; t < n; ++t) {
        const T* xt = x + t * C;
        const T* dyt = dy + t * C;
        T mean_g = 0, mean_gx = 0;
        for (std::size_t c = 0; c < C; ++c) {
            const T xhat = (xt[c] - mean[t]) * rstd[t];
            const T g = dyt[c] * w[c];
            mean_g += g;
            mean_gx += g * xhat;
            dw[c] += dyt[c] * xhat;
            db[c] += dyt[c];
        }
        mean_g /= static_cast<T>(C);
        mean_gx /= static_cast<T>(C);
        T* dxt = dx + t * C;
        for (std::size_t c = 0; c < C; ++c) {
            const T xhat = (xt[c] - mean[t]) * rstd[t];
            dxt[c] += rstd[t] * (dyt[c] * w[c] - mean_g - xhat * mean_gx);
        }
    }
}

template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(M_SQRT1_2)));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(M_SQRT1_2)));
    const T pdf = std::exp(T(-0.5) * x * x) * static_cast<T>(0.3989422804014327);
    return cdf + x * pdf;
}

template <class T>
T sigmoid_t(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

template <class T>
T softplus_t(T x) {
    return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
}

// --------------------------------------------------------------- bindings

template <class P>
struct LayerRefs {
    P ln1_w, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    P wl = nullptr, bl = nullptr, wg = nullptr, bg = nullptr, gamma = nullptr;
    P ln2_w, ln2_b, wfc, bfc, wproj, bproj;
};

template <class P>
struct ModelRefs {
    P wte;
    std::vector<LayerRefs<P>> layers;
    P lnf_w, lnf_b, head_w, head_b;
};

template <class Store>
auto bind(Store& s, const ModelConfig& cfg) {
    using Ptr = decltype(s.get("").data.data());
    ModelRefs<Ptr> r;
    auto at = [&](const std::string& n) { return s.get(n).data.data(); };
    r.wte = at("wte");
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
        LayerRefs<Ptr> L{};
        L.ln1_w = at(lname(l, "ln1.w"));
        L.ln1_b = at(lname(l, "ln1.b"));
        L.wq = at(lname(l, "attn.wq"));
        L.bq = at(lname(l, "attn.bq"));
        L.wk = at(lname(l, "attn.wk"));
        L.bk = at(lname(l, "attn.bk"));
        L.wv = at(lname(l, "attn.wv"));
        L.bv = at(lname(l, "attn.bv"));
        L.wo = at(lname(l, "attn.wo"));
        L.bo = at(lname(l, "attn.bo"));
        if (cfg.gape_enabled) {
            L.wl = at(lname(l, "gape.wl"));
            L.bl = at(lname(l, "gape.bl"));
            L.wg = at(lname(l, "gape.wg"));
            L.bg = at(lname(l, "gape.bg"));
            L.gamma = at(lname(l, "gape.gamma"));
        }
        L.ln2_w = at(lname(l, "ln2.w"));
        L.ln2_b = at(lname(l, "ln2.b"));
        L.wfc = at(lname(l, "mlp.wfc"));
        L.bfc = at(lname(l, "mlp.bfc"));
        L.wproj = at(lname(l, "mlp.wproj"));
        L.bproj = at(lname(l, "mlp.bproj"));
        r.layers.push_back(L);
    }
    r.lnf_w = at("lnf.w");
    r.lnf_b = at("lnf.b");
    r.head_w = at("head.w");
    r.head_b = at("head.b");
    return r;
}

// -------------------------------------------------------------- workspace

template <class T>
struct HeadCache {
    std::vector<T> q, k;    // unrotated semantic parts: R x ds, L x ds
    std::vector<T> qr, kr;  // rotated copies
    std::vector<T> l, u, g; // landmark (L), gate pre-activation and gate (R)
    T Gamma = 0;
    std::vector<T> w;       // attention weights R x L
};

template <class T>
struct LayerCache {
    std::size_t r0 = 0, R = 0;
    std::vector<T> x_in, ln1_out, ln1_mean, ln1_rstd;
    std::vector<T> Q, K, V, att, x_mid;
    std::vector<T> ln2_out, ln2_mean, ln2_rstd, fc_pre, fc_act;
    std::vector<HeadCache<T>> heads;
};

template <class T>
struct Workspace {
    std::size_t L = 0;
    std::size_t nrot = 0;          // rotated chunks per head
    std::vector<T> cos, sin;       // L x nrot
    std::vector<LayerCache<T>> layers;
    std::vector<T> x_out, lnf_out, lnf_mean, lnf_rstd, logits;
    std::vector<T> scratch, krT;
};

template <class T>
void rotate_rows(std::vector<T>& m, std::size_t rows, std::size_t width, std::size_t first_pos,
                 const Workspace<T>& ws, bool inverse) {
    for (std::size_t r = 0; r < rows; ++r) {
        T* v = m.data() + r * width;
        const T* cs = ws.cos.data() + (first_pos + r) * ws.nrot;
        const T* sn = ws.sin.data() + (first_pos + r) * ws.nrot;
        for (std::size_t c = 0; c < ws.nrot; ++c) {
            const T a = v[2 * c], b = v[2 * c + 1];
            const T s = inverse ? -sn[c] : sn[c];
            v[2 * c] = a * cs[c] - b * s;
            v[2 * c + 1] = a * s + b * cs[c];
        }
    }
}

template <class T>
void run_forward(const ModelRefs<const T*>& P, std::span<const niah::Token> tokens, const ModelConfig& cfg,
                 bool final_only, Workspace<T>& ws) {
    const kernels::FlushDenormals<T> ftz;
    const std::size_t L = tokens.size(), C = cfg.d_model, H = cfg.n_head, d = cfg.head_dim();
    const std::size_t ds = cfg.semantic_dim(), HD = H * ds, NL = cfg.n_layer;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    const T invT = static_cast<T>(1.0 / static_cast<double>(cfg.T_train));
    if (L == 0) throw Error("forward: empty token sequence");
    for (auto t : tokens)
        if (t >= cfg.vocab_size) throw Error("forward: token " + std::to_string(t) + " out of vocabulary");

    ws.L = L;
    ws.nrot = 0;
    if (cfg.kind.rotary()) {
        const auto spec = FrequencySpectrum::make(ds, cfg.kind.theta);
        ws.nrot = cfg.kind.rotated_dims(ds) / 2;
        ws.cos.resize(L * ws.nrot);
        ws.sin.resize(L * ws.nrot);
        for (std::size_t p = 0; p < L; ++p)
            for (std::size_t c = 0; c < ws.nrot; ++c) {
                const double ang = static_cast<double>(p) * spec.freqs[c];
                ws.cos[p * ws.nrot + c] = static_cast<T>(std::cos(ang));
                ws.sin[p * ws.nrot + c] = static_cast<T>(std::sin(ang));
            }
    }
    ws.layers.resize(NL);

    std::vector<T> x(L * C);
    for (std::size_t t = 0; t < L; ++t)
        std::copy_n(P.wte + tokens[t] * C, C, x.data() + t * C);

    for (std::size_t li = 0; li < NL; ++li) {
        const auto& W = P.layers[li];
        auto& lc = ws.layers[li];
        const std::size_t rows_in = x.size() / C;  // L for every layer
        lc.r0 = (final_only && li + 1 == NL) ? L - 1 : 0;
        lc.R = L - lc.r0;
        const std::size_t r0 = lc.r0, R = lc.R;

        lc.x_in = x;
        lc.ln1_out.resize(rows_in * C);
        lc.ln1_mean.resize(rows_in);
        lc.ln1_rstd.resize(rows_in);
        layernorm(lc.x_in.data(), rows_in, C, W.ln1_w, W.ln1_b, lc.ln1_out.data(), lc.ln1_mean.data(),
                  lc.ln1_rstd.data());

        lc.Q.resize(R * HD);
        lc.K.resize(L * HD);
        lc.V.resize(L * C);
        linear(lc.ln1_out.data() + r0 * C, R, C, W.wq, W.bq, HD, lc.Q.data());
        linear(lc.ln1_out.data(), L, C, W.wk, W.bk, HD, lc.K.data());
        linear(lc.ln1_out.data(), L, C, W.wv, W.bv, C, lc.V.data());

        lc.att.assign(R * C, T(0));
        lc.heads.resize(H);
        for (std::size_t h = 0; h < H; ++h) {
            auto& hc = lc.heads[h];
            hc.q.resize(R * ds);
            hc.k.resize(L * ds);
            for (std::size_t t = 0; t < R; ++t) std::copy_n(lc.Q.data() + t * HD + h * ds, ds, hc.q.data() + t * ds);
            for (std::size_t j = 0; j < L; ++j) std::copy_n(lc.K.data() + j * HD + h * ds, ds, hc.k.data() + j * ds);
            hc.qr = hc.q;
            hc.kr = hc.k;
            if (ws.nrot > 0) {
                rotate_rows(hc.qr, R, ds, r0, ws, false);
                rotate_rows(hc.kr, L, ds, 0, ws, false);
            }
            if (cfg.gape_enabled) {
                const auto& qs = cfg.gates_on_rotated ? hc.qr : hc.q;
                const auto& ks = cfg.gates_on_rotated ? hc.kr : hc.k;
                const T* wl = W.wl + h * ds;
                const T* wg = W.wg + h * ds;
                hc.l.resize(L);
                hc.u.resize(R);
                hc.g.resize(R);
                for (std::size_t j = 0; j < L; ++j) {
                    T z = W.bl[h];
                    for (std::size_t c = 0; c < ds; ++c) z += wl[c] * ks[j * ds + c];
                    hc.l[j] = sigmoid_t(z);
                }
                for (std::size_t t = 0; t < R; ++t) {
                    T z = W.bg[h];
                    for (std::size_t c = 0; c < ds; ++c) z += wg[c] * qs[t * ds + c];
                    hc.u[t] = z;
                    hc.g[t] = softplus_t(z);
                }
                hc.Gamma = softplus_t(W.gamma[h]);
            }

            ws.krT.resize(ds * L);
            kernels::transpose(hc.kr.data(), L, ds, ds, ws.krT.data());

            const T slope = cfg.kind.scheme == Scheme::ALiBi ? static_cast<T>(cfg.kind.slopes[h]) : T(0);
            hc.w.resize(R * L);
            kernels::gemm(R, L, ds, hc.qr.data(), ds, 1, ws.krT.data(), L, hc.w.data(), L, false);
            for (std::size_t t = 0; t < R; ++t) {
                const std::size_t i = r0 + t;
                T* a = hc.w.data() + t * L;
                for (std::size_t j = 0; j <= i; ++j) a[j] *= scale;
                if (slope != T(0))
                    for (std::size_t j = 0; j <= i; ++j) a[j] -= slope * static_cast<T>(i - j);
                if (cfg.gape_enabled) {
                    const T coef = hc.Gamma * hc.g[t] * invT;
                    const T* l = hc.l.data();
                    for (std::size_t j = 0; j <= i; ++j)
                        a[j] += coef * (static_cast<T>(j) + static_cast<T>(i - j) * l[j]);
                }
                T mx = a[0];
                for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, a[j]);
                T z = 0;
                for (std::size_t j = 0; j <= i; ++j) {
                    a[j] = std::exp(a[j] - mx);
                    z += a[j];
                }
                const T inv = T(1) / z;
                for (std::size_t j = 0; j <= i; ++j) a[j] *= inv;
                std::fill(a + i + 1, a + L, T(0));
            }
            kernels::gemm(R, d, L, hc.w.data(), L, 1, lc.V.data() + h * d, C, lc.att.data() + h * d, C, true);
        }

        lc.x_mid.resize(R * C);
        linear(lc.att.data(), R, C, W.wo, W.bo, C, lc.x_mid.data());
        for (std::size_t t = 0; t < R; ++t)
            for (std::size_t c = 0; c < C; ++c) lc.x_mid[t * C + c] += lc.x_in[(r0 + t) * C + c];

        lc.ln2_out.resize(R * C);
        lc.ln2_mean.resize(R);
        lc.ln2_rstd.resize(R);
        layernorm(lc.x_mid.data(), R, C, W.ln2_w, W.ln2_b, lc.ln2_out.data(), lc.ln2_mean.data(), lc.ln2_rstd.data());
        lc.fc_pre.resize(R * 4 * C);
        lc.fc_act.resize(R * 4 * C);
        linear(lc.ln2_out.data(), R, C, W.wfc, W.bfc, 4 * C, lc.fc_pre.data());
        for (std::size_t e = 0; e < lc.fc_pre.size(); ++e) lc.fc_act[e] = gelu(lc.fc_pre[e]);
        x.resize(R * C);
        linear(lc.fc_act.data(), R, 4 * C, W.wproj, W.bproj, C, x.data());
        for (std::size_t e = 0; e < R * C; ++e) x[e] += lc.x_mid[e];
    }

    const std::size_t R = x.size() / C, V = cfg.vocab_size;
    ws.x_out = std::move(x);
    ws.lnf_out.resize(R * C);
    ws.lnf_mean.resize(R);
    ws.lnf_rstd.resize(R);
    layernorm(ws.x_out.data(), R, C, P.lnf_w, P.lnf_b, ws.lnf_out.data(), ws.lnf_mean.data(), ws.lnf_rstd.data());
    ws.logits.resize(R * V);
    linear(ws.lnf_out.data(), R, C, P.head_w, P.head_b, V, ws.logits.data());
}

/// Backpropagates `dlogits` (rows of the last layer's query range) into `G`.
template <class T>
void run_backward(const ModelRefs<const T*>& P, const ModelRefs<T*>& G, std::span<const niah::Token> tokens,
                  const ModelConfig& cfg, Workspace<T>& ws, const std::vector<T>& dlogits) {
    const kernels::FlushDenormals<T> ftz;
    const std::size_t L = ws.L, C = cfg.d_model, H = cfg.n_head, d = cfg.head_dim();
    const std::size_t ds = cfg.semantic_dim(), HD = H * ds, NL = cfg.n_layer, V = cfg.vocab_size;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    const T invT = static_cast<T>(1.0 / static_cast<double>(cfg.T_train));
    auto& scratch = ws.scratch;

    std::size_t R = ws.x_out.size() / C;
    std::vector<T> d_lnf(R * C, T(0));
    linear_backward(ws.lnf_out.data(), dlogits.data(), R, C, V, P.head_w, d_lnf.data(), G.head_w, G.head_b, scratch);
    std::vector<T> dx(R * C, T(0));
    layernorm_backward(ws.x_out.data(), d_lnf.data(), R, C, P.lnf_w, ws.lnf_mean.data(), ws.lnf_rstd.data(),
                       dx.data(), G.lnf_w, G.lnf_b);

    std::vector<T> d_act, d_ln2, d_att, dQ, dK, dV, d_ln1, dx_in, dqr, dkr, dl, dg, dA, vT;
    for (std::size_t li = NL; li-- > 0;) {
        const auto& W = P.layers[li];
        const auto& GW = G.layers[li];
        auto& lc = ws.layers[li];
        const std::size_t r0 = lc.r0;
        R = lc.R;

        // MLP branch; dx doubles as the residual gradient into x_mid.
        d_act.assign(R * 4 * C, T(0));
        linear_backward(lc.fc_act.data(), dx.data(), R, 4 * C, C, W.wproj, d_act.data(), GW.wproj, GW.bproj, scratch);
        for (std::size_t e = 0; e < d_act.size(); ++e) d_act[e] *= gelu_grad(lc.fc_pre[e]);
        d_ln2.assign(R * C, T(0));
        linear_backward(lc.ln2_out.data(), d_act.data(), R, C, 4 * C, W.wfc, d_ln2.data(), GW.wfc, GW.bfc, scratch);
        std::vector<T>& dx_mid = dx;
        layernorm_backward(lc.x_mid.data(), d_ln2.data(), R, C, W.ln2_w, lc.ln2_mean.data(), lc.ln2_rstd.data(),
                           dx_mid.data(), GW.ln2_w, GW.ln2_b);

        // Attention output projection.
        d_att.assign(R * C, T(0));
        linear_backward(lc.att.data(), dx_mid.data(), R, C, C, W.wo, d_att.data(), GW.wo, GW.bo, scratch);

        dQ.assign(R * HD, T(0));
        dK.assign(L * HD, T(0));
        dV.assign(L * C, T(0));
        for (std::size_t h = 0; h < H; ++h) {
            const auto& hc = lc.heads[h];
            vT.resize(d * L);
            kernels::transpose(lc.V.data() + h * d, L, d, C, vT.data());
            dqr.resize(R * ds);
            dkr.resize(L * ds);
            dl.assign(L, T(0));
            dg.assign(R, T(0));
            T dGamma = 0;
            dA.resize(R * L);
            kernels::gemm(R, L, d, d_att.data() + h * d, C, 1, vT.data(), L, dA.data(), L, false);
            kernels::gemm(L, d, R, hc.w.data(), 1, L, d_att.data() + h * d, C, dV.data() + h * d, C, true);
            for (std::size_t t = 0; t < R; ++t) {
                const std::size_t i = r0 + t;
                const T* w = hc.w.data() + t * L;
                T* da = dA.data() + t * L;
                T dot_wd = 0;
                for (std::size_t j = 0; j <= i; ++j) dot_wd += w[j] * da[j];
                for (std::size_t j = 0; j <= i; ++j) da[j] = w[j] * (da[j] - dot_wd);  // d logits
                std::fill(da + i + 1, da + L, T(0));
                if (cfg.gape_enabled) {
                    const T coef = hc.Gamma * hc.g[t] * invT;
                    T acc = 0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T dist = static_cast<T>(i - j);
                        acc += da[j] * (static_cast<T>(j) + dist * hc.l[j]);
                        dl[j] += da[j] * coef * dist;
                    }
                    dg[t] += hc.Gamma * invT * acc;
                    dGamma += hc.g[t] * invT * acc;
                }
                for (std::size_t j = 0; j <= i; ++j) da[j] *= scale;
            }
            kernels::gemm(R, ds, L, dA.data(), L, 1, hc.kr.data(), ds, dqr.data(), ds, false);
            kernels::gemm(L, ds, R, dA.data(), 1, L, hc.qr.data(), ds, dkr.data(), ds, false);

            // Gate parameters; their input is q/k before or after rotation.
            std::vector<T> dq_plain, dk_plain;
            auto gate_backward = [&](std::vector<T>& dq_src, std::vector<T>& dk_src) {
                const auto& qs = cfg.gates_on_rotated ? hc.qr : hc.q;
                const auto& ks = cfg.gates_on_rotated ? hc.kr : hc.k;
                const T* wl = W.wl + h * ds;
                const T* wg = W.wg + h * ds;
                T* gwl = GW.wl + h * ds;
                T* gwg = GW.wg + h * ds;
                for (std::size_t t = 0; t < R; ++t) {
                    const T du = dg[t] * sigmoid_t(hc.u[t]);
                    for (std::size_t c = 0; c < ds; ++c) {
                        gwg[c] += du * qs[t * ds + c];
                        dq_src[t * ds + c] += du * wg[c];
                    }
                    GW.bg[h] += du;
                }
                for (std::size_t j = 0; j < L; ++j) {
                    const T dz = dl[j] * hc.l[j] * (T(1) - hc.l[j]);
                    for (std::size_t c = 0; c < ds; ++c) {
                        gwl[c] += dz * ks[j * ds + c];
                        dk_src[j * ds + c] += dz * wl[c];
                    }
                    GW.bl[h] += dz;
                }
                GW.gamma[h] += dGamma * sigmoid_t(W.gamma[h]);
            };
            if (cfg.gape_enabled && cfg.gates_on_rotated) gate_backward(dqr, dkr);
            if (ws.nrot > 0) {
                rotate_rows(dqr, R, ds, r0, ws, true);
                rotate_rows(dkr, L, ds, 0, ws, true);
            }
            if (cfg.gape_enabled && !cfg.gates_on_rotated) gate_backward(dqr, dkr);

            for (std::size_t t = 0; t < R; ++t)
                for (std::size_t c = 0; c < ds; ++c) dQ[t * HD + h * ds + c] += dqr[t * ds + c];
            for (std::size_t j = 0; j < L; ++j)
                for (std::size_t c = 0; c < ds; ++c) dK[j * HD + h * ds + c] += dkr[j * ds + c];
        }

        d_ln1.assign(L * C, T(0));
        linear_backward(lc.ln1_out.data() + r0 * C, dQ.data(), R, C, HD, W.wq, d_ln1.data() + r0 * C, GW.wq, GW.bq,
                        scratch);
        linear_backward(lc.ln1_out.data(), dK.data(), L, C, HD, W.wk, d_ln1.data(), GW.wk, GW.bk, scratch);
        linear_backward(lc.ln1_out.data(), dV.data(), L, C, C, W.wv, d_ln1.data(), GW.wv, GW.bv, scratch);
        dx_in.assign(L * C, T(0));
        layernorm_backward(lc.x_in.data(), d_ln1.data(), L, C, W.ln1_w, lc.ln1_mean.data(), lc.ln1_rstd.data(),
                           dx_in.data(), GW.ln1_w, GW.ln1_b);
        for (std::size_t t = 0; t < R; ++t)
            for (std::size_t c = 0; c < C; ++c) dx_in[(r0 + t) * C + c] += dx_mid[t * C + c];
        dx.swap(dx_in);
    }
    for (std::size_t t = 0; t < L; ++t) {
        T* g = G.wte + tokens[t] * C;
        for (std::size_t c = 0; c < C; ++c) g[c] += dx[t * C + c];
    }
}

template <class T>
HeadTrace make_trace(const HeadCache<T>& hc, const ModelConfig& cfg, std::size_t r0, std::size_t R, std::size_t L) {
    const std::size_t ds = cfg.semantic_dim();
    HeadTrace tr;
    tr.first_row = r0;
    tr.weights = Matrix(R, L);
    for (std::size_t e = 0; e < R * L; ++e) tr.weights.data()[e] = static_cast<double>(hc.w[e]);
    tr.q = Matrix(R, ds);
    for (std::size_t e = 0; e < R * ds; ++e) tr.q.data()[e] = static_cast<double>(hc.q[e]);
    tr.k = Matrix(L, ds);
    for (std::size_t e = 0; e < L * ds; ++e) tr.k.data()[e] = static_cast<double>(hc.k[e]);
    if (cfg.gape_enabled) {
        tr.landmark.assign(hc.l.begin(), hc.l.end());
        tr.query_gate.assign(hc.g.begin(), hc.g.end());
        tr.amplitude = static_cast<double>(hc.Gamma);
    }
    return tr;
}

template <class T>
ForwardTrace collect_trace(const Workspace<T>& ws, const ModelConfig& cfg) {
    ForwardTrace tr;
    for (const auto& lc : ws.layers) {
        std::vector<HeadTrace> heads;
        for (const auto& hc : lc.heads) heads.push_back(make_trace(hc, cfg, lc.r0, lc.R, ws.L));
        tr.layers.push_back(std::move(heads));
    }
    return tr;
}

} // namespace

template <class T>
ForwardResult forward(const BasicParamStore<T>& params, std::span<const niah::Token> tokens, const ModelConfig& cfg,
                      CaptureFlags capture) {
    cfg.validate();
    const auto P = bind(params, cfg);
    Workspace<T> ws;
    run_forward<T>(P, tokens, cfg, false, ws);
    ForwardResult res;
    res.logits = Matrix(tokens.size(), cfg.vocab_size);
    for (std::size_t e = 0; e < ws.logits.size(); ++e) res.logits.data()[e] = static_cast<double>(ws.logits[e]);
    if (capture.attention) res.trace = collect_trace(ws, cfg);
    return res;
}

template <class T>
std::vector<double> final_logits(const BasicParamStore<T>& params, std::span<const niah::Token> tokens,
                                 const ModelConfig& cfg, ForwardTrace* trace) {
    cfg.validate();
    const auto P = bind(params, cfg);
    Workspace<T> ws;
    run_forward<T>(P, tokens, cfg, true, ws);
    if (trace) *trace = collect_trace(ws, cfg);
    return {ws.logits.begin(), ws.logits.end()};
}

namespace {

/// Cross-entropy over the digit logits and its gradient w.r.t. the full row.
template <class T>
double digit_cross_entropy(const T* logits, std::size_t V, std::uint8_t target, T weight, std::vector<T>* dlogits,
                           bool* correct) {
    constexpr std::size_t D = niah::NiahVocab::kDigits;
    double mx = static_cast<double>(logits[0]);
    std::size_t best = 0;
    for (std::size_t c = 1; c < D; ++c) {
        if (logits[c] > logits[best]) best = c;
        mx = std::max(mx, static_cast<double>(logits[c]));
    }
    double z = 0.0;
    for (std::size_t c = 0; c < D; ++c) z += std::exp(static_cast<double>(logits[c]) - mx);
    const double lse = mx + std::log(z);
    if (dlogits) {
        dlogits->assign(V, T(0));
        for (std::size_t c = 0; c < D; ++c) {
            const double p = std::exp(static_cast<double>(logits[c]) - lse);
            (*dlogits)[c] = static_cast<T>((p - (c == target ? 1.0 : 0.0))) * weight;
        }
    }
    if (correct) *correct = best == target;
    return lse - static_cast<double>(logits[target]);
}

} // namespace

template <class T>
LossAndGrad<T> loss_and_grad(const BasicParamStore<T>& params, std::span<const niah::NiahSample> batch,
                             const ModelConfig& cfg) {
    cfg.validate();
    if (batch.empty()) throw Error("loss_and_grad: empty batch");
    LossAndGrad<T> out;
    out.grads = params.zeros_like();
    const auto P = bind(params, cfg);
    const auto G = bind(out.grads, cfg);
    const T weight = static_cast<T>(1.0 / static_cast<double>(batch.size()));
    Workspace<T> ws;
    std::vector<T> dlogits;
    double total = 0.0;
    for (const auto& s : batch) {
        run_forward<T>(P, s.tokens, cfg, true, ws);
        bool ok = false;
        total += digit_cross_entropy(ws.logits.data(), cfg.vocab_size, s.target, weight, &dlogits, &ok);
        out.correct += ok ? 1 : 0;
        run_backward<T>(P, G, s.tokens, cfg, ws, dlogits);
    }
    out.loss = total / static_cast<double>(batch.size());
    for (auto& e : out.grads.entries())
        if (!e.requires_grad) std::fill(e.data.begin(), e.data.end(), T(0));
    return out;
}

template <class T>
double loss_only(const BasicParamStore<T>& params, std::span<const niah::NiahSample> batch, const ModelConfig& cfg) {
    if (batch.empty()) throw Error("loss_only: empty batch");
    double total = 0.0;
    for (const auto& s : batch) {
        const auto res = forward(params, s.tokens, cfg);
        const auto row = res.logits.row(res.logits.rows() - 1);
        total += digit_cross_entropy<double>(row.data(), cfg.vocab_size, s.target, 1.0, nullptr, nullptr);
    }
    return total / static_cast<double>(batch.size());
}

// ------------------------------------------------------------- checkpoint

namespace {

constexpr const char* kMagic = "GAPELAB-CKPT";
constexpr int kVersion = 1;

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
    return h;
}

template <class T>
void append_le(std::string& out, const std::vector<T>& data) {
    const std::size_t start = out.size();
    out.resize(start + data.size() * sizeof(T));
    std::memcpy(out.data() + start, data.data(), data.size() * sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            char* p = out.data() + start + i * sizeof(T);
            std::reverse(p, p + sizeof(T));
        }
    }
}

template <class T>
std::vector<T> read_le(const std::string& in, std::size_t offset, std::size_t count) {
    std::vector<T> v(count);
    std::memcpy(v.data(), in.data() + offset, count * sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        auto* bytes = reinterpret_cast<char*>(v.data());
        for (std::size_t i = 0; i < count; ++i) std::reverse(bytes + i * sizeof(T), bytes + (i + 1) * sizeof(T));
    }
    return v;
}

} // namespace

template <class T>
void checkpoint_save(const BasicParamStore<T>& params, const ModelConfig& cfg, const std::string& path) {
    cfg.validate();
    check_layout(params, cfg);
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    const char* dtype = sizeof(T) == 4 ? "f32" : "f64";
    std::string body;
    body += kMagic;
    body += "\nversion=" + std::to_string(kVersion) + "\n[config]\n" + cfg.to_text() + "[end]\n";
    body += "entries=" + std::to_string(params.size()) + "\n";
    for (const auto& e : params.entries()) {
        body += "entry " + e.name + " " + dtype + " " + std::to_string(e.shape.size());
        for (auto s : e.shape) body += " " + std::to_string(s);
        body += " " + std::to_string(e.requires_grad ? 1 : 0) + "\n";
        append_le(body, e.data);
        body += "\n";
    }
    std::ostringstream cs;
    cs << "checksum=" << std::hex << std::setw(16) << std::setfill('0') << fnv1a(body) << "\n";
    body += cs.str();
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!f) throw Error("failed writing checkpoint '" + path + "'");
}

LoadedCheckpoint checkpoint_load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open checkpoint '" + path + "'");
    std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    const auto cpos = all.rfind("checksum=");
    if (cpos == std::string::npos) throw Error("checkpoint '" + path + "': missing checksum");
    const std::string body = all.substr(0, cpos);
    std::uint64_t stored = 0;
    try {
        stored = std::stoull(all.substr(cpos + 9, 16), nullptr, 16);
    } catch (const std::exception&) {
        throw Error("checkpoint '" + path + "': unreadable checksum");
    }
    if (stored != fnv1a(body)) throw Error("checkpoint '" + path + "': checksum mismatch");

    std::size_t pos = 0;
    auto next_line = [&]() {
        const auto nl = body.find('\n', pos);
        if (nl == std::string::npos) throw Error("checkpoint '" + path + "': truncated header");
        std::string line = body.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    if (next_line() != kMagic) throw Error("checkpoint '" + path + "': corrupt header (bad magic)");
    if (next_line() != "version=" + std::to_string(kVersion))
        throw Error("checkpoint '" + path + "': unsupported version");
    if (next_line() != "[config]") throw Error("checkpoint '" + path + "': corrupt header");
    std::string cfg_text;
    for (std::string line = next_line(); line != "[end]"; line = next_line()) cfg_text += line + "\n";

    LoadedCheckpoint out;
    out.config = ModelConfig::from_text(cfg_text);
    const std::string count_line = next_line();
    if (count_line.rfind("entries=", 0) != 0) throw Error("checkpoint '" + path + "': corrupt header");
    const std::size_t count = std::stoul(count_line.substr(8));
    for (std::size_t n = 0; n < count; ++n) {
        std::istringstream es(next_line());
        std::string tag, name, dtype;
        std::size_t rank = 0;
        es >> tag >> name >> dtype >> rank;
        if (tag != "entry" || (dtype != "f32" && dtype != "f64"))
            throw Error("checkpoint '" + path + "': corrupt entry record");
        std::vector<std::size_t> shape(rank);
        std::size_t numel = 1;
        for (auto& s : shape) {
            es >> s;
            numel *= s;
        }
        int rg = 1;
        es >> rg;
        if (!es) throw Error("checkpoint '" + path + "': corrupt entry record for '" + name + "'");
        const std::size_t bytes = numel * (dtype == "f32" ? 4 : 8);
        if (pos + bytes + 1 > body.size()) throw Error("checkpoint '" + path + "': truncated data for '" + name + "'");
        auto& e64 = out.params64.add(name, shape, 0.0, rg != 0);
        if (dtype == "f32") {
            const auto v = read_le<float>(body, pos, numel);
            for (std::size_t i = 0; i < numel; ++i) e64.data[i] = v[i];
        } else {
            e64.data = read_le<double>(body, pos, numel);
        }
        pos += bytes + 1;
        out.dtype = dtype;
    }
    check_layout(out.params64, out.config);
    out.params = out.params64.cast<float>();
    return out;
}

LoadedCheckpoint checkpoint_load(const std::string& path, const ModelConfig& expected) {
    auto ck = checkpoint_load(path);
    check_layout(ck.params64, expected);
    return ck;
}

// ------------------------------------------------------- instantiations

#define GAPELAB_INSTANTIATE(T)                                                                                      \
    template BasicParamStore<T> init_params<T>(const ModelConfig&, Rng&);                                           \
    template void check_layout<T>(const BasicParamStore<T>&, const ModelConfig&);                                   \
    template ForwardResult forward<T>(const BasicParamStore<T>&, std::span<const niah::Token>, const ModelConfig&, \
                                      CaptureFlags);                                                                \
    template std::vector<double> final_logits<T>(const BasicParamStore<T>&, std::span<const niah::Token>,          \
                                                 const ModelConfig&, ForwardTrace*);                                \
    template LossAndGrad<T> loss_and_grad<T>(const BasicParamStore<T>&, std::span<const niah::NiahSample>,         \
                                             const ModelConfig&);                                                   \
    template double loss_only<T>(const BasicParamStore<T>&, std::span<const niah::NiahSample>, const ModelConfig&); \
    template void checkpoint_save<T>(const BasicParamStore<T>&, const ModelConfig&, const std::string&);

GAPELAB_INSTANTIATE(float)
GAPELAB_INSTANTIATE(double)

} // namespace gapelab
