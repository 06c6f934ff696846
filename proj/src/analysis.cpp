#include "gapelab/analysis.hpp"

#include "gapelab/parallel.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace gapelab::analysis {

namespace {

// Attention rows from the float model sum to 1 only to single precision.
constexpr double kFloatRowTol = 1e-4;

std::string fmt(double v) { return format_double(v); }

ForwardTrace capture(const ParamStore& params, const ModelConfig& cfg, const niah::NiahSample& s) {
    return *forward(params, s.tokens, cfg, CaptureFlags{true}).trace;
}

void require_samples(std::span<const niah::NiahSample> samples) {
    if (samples.empty()) throw Error("analysis: no samples");
}

} // namespace

std::vector<double> row_entropies(const Matrix& weights, std::size_t first_row, double tol) {
    std::vector<double> out(weights.rows());
    for (std::size_t r = 0; r < weights.rows(); ++r) {
        const std::size_t i = first_row + r;
        if (i >= weights.cols()) throw Error("row_entropies: row beyond the key range");
        out[r] = shannon_entropy(weights.row(r).subspan(0, i + 1), tol);
    }
    return out;
}

double EntropyProfile::layer_mean(std::size_t layer) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& h : heads)
        if (h.layer == layer) {
            s += h.mean_H;
            ++n;
        }
    if (n == 0) throw Error("entropy profile: no heads for layer " + std::to_string(layer));
    return s / static_cast<double>(n);
}

EntropyProfile entropy_profile(const ParamStore& params, const ModelConfig& cfg,
                               std::span<const niah::NiahSample> samples, std::size_t threads) {
    require_samples(samples);
    const std::size_t nh = cfg.n_layer * cfg.n_head;
    std::vector<std::vector<double>> per(samples.size(), std::vector<double>(nh));
    parallel_for(samples.size(), threads, [&](std::size_t s) {
        const auto tr = capture(params, cfg, samples[s]);
        for (std::size_t l = 0; l < cfg.n_layer; ++l)
            for (std::size_t h = 0; h < cfg.n_head; ++h) {
                const auto& ht = tr.layers[l][h];
                const auto H = row_entropies(ht.weights, ht.first_row, kFloatRowTol);
                double m = 0.0;
                for (double x : H) m += x;
                per[s][l * cfg.n_head + h] = m / static_cast<double>(H.size());
            }
    });
    EntropyProfile p;
    p.n_samples = samples.size();
    const double n = static_cast<double>(samples.size());
    for (std::size_t l = 0; l < cfg.n_layer; ++l)
        for (std::size_t h = 0; h < cfg.n_head; ++h) {
            const std::size_t k = l * cfg.n_head + h;
            double mean = 0.0;
            for (const auto& v : per) mean += v[k];
            mean /= n;
            double var = 0.0;
            for (const auto& v : per) var += (v[k] - mean) * (v[k] - mean);
            p.heads.push_back({l, h, mean, std::sqrt(var / n)});
        }
    return p;
}

std::vector<HeadDelta> entropy_delta(const EntropyProfile& with, const EntropyProfile& base) {
    if (with.heads.size() != base.heads.size() || with.n_samples != base.n_samples)
        throw Error("entropy delta: profiles cover different heads or sample counts");
    std::vector<HeadDelta> out;
    for (std::size_t k = 0; k < with.heads.size(); ++k) {
        const auto& a = with.heads[k];
        const auto& b = base.heads[k];
        if (a.layer != b.layer || a.head != b.head) throw Error("entropy delta: head layouts differ");
        out.push_back({a.layer, a.head, a.mean_H - b.mean_H});
    }
    return out;
}

std::vector<HeadGates> gate_stats(const ParamStore& params, const ModelConfig& cfg,
                                  std::span<const niah::NiahSample> samples, std::size_t threads) {
    require_samples(samples);
    if (!cfg.gape_enabled) throw Error("gate stats: checkpoint has no GAPE gates");
    const std::size_t nh = cfg.n_layer * cfg.n_head;
    std::vector<std::vector<HeadGates>> per(samples.size(), std::vector<HeadGates>(nh));
    const double T = static_cast<double>(cfg.T_train);
    parallel_for(samples.size(), threads, [&](std::size_t s) {
        const auto tr = capture(params, cfg, samples[s]);
        for (std::size_t l = 0; l < cfg.n_layer; ++l)
            for (std::size_t h = 0; h < cfg.n_head; ++h) {
                const auto& ht = tr.layers[l][h];
                auto& out = per[s][l * cfg.n_head + h];
                const std::size_t L = ht.landmark.size();
                // Sum over j <= i of (1 - l_j)(i - j), built incrementally in i.
                double penalty = 0.0, open_mass = 0.0, open_weighted = 0.0;
                std::size_t pairs = 0, row = 0;
                for (std::size_t i = 0; i < L; ++i) {
                    open_mass += 1.0 - ht.landmark[i];
                    open_weighted += (1.0 - ht.landmark[i]) * static_cast<double>(i);
                    if (i < ht.first_row) continue;
                    const double g = ht.query_gate[row++];
                    penalty += ht.amplitude * g / T * (static_cast<double>(i) * open_mass - open_weighted);
                    pairs += i + 1;
                }
                double lsum = 0.0, gsum = 0.0;
                for (double x : ht.landmark) lsum += x;
                for (double x : ht.query_gate) gsum += x;
                out = {l, h, penalty / static_cast<double>(pairs), lsum / static_cast<double>(L),
                       gsum / static_cast<double>(ht.query_gate.size()), ht.amplitude};
            }
    });
    std::vector<HeadGates> out(nh);
    const double n = static_cast<double>(samples.size());
    for (std::size_t k = 0; k < nh; ++k) {
        out[k].layer = k / cfg.n_head;
        out[k].head = k % cfg.n_head;
        for (const auto& v : per) {
            out[k].M_bar += v[k].M_bar / n;
            out[k].l_bar += v[k].l_bar / n;
            out[k].g_bar += v[k].g_bar / n;
            out[k].Gamma += v[k].Gamma / n;
        }
    }
    return out;
}

std::vector<LandmarkByRole> landmark_by_role(const ParamStore& params, const ModelConfig& cfg,
                                             std::span<const niah::NiahSample> samples) {
    require_samples(samples);
    if (!cfg.gape_enabled) throw Error("landmark analysis: checkpoint has no GAPE gates");
    const std::size_t nh = cfg.n_layer * cfg.n_head;
    std::vector<double> needle(nh, 0.0), filler(nh, 0.0), target(nh, 0.0);
    std::size_t n_needle = 0, n_filler = 0;
    for (const auto& s : samples) {
        std::vector<bool> is_needle(s.length(), false);
        for (auto p : s.needle_positions) {
            is_needle[p] = true;      // KEY
            is_needle[p + 2] = true;  // digit
        }
        for (std::size_t j = 0; j < s.length(); ++j) {
            if (is_needle[j]) ++n_needle;
            else if (niah::NiahVocab::is_filler(s.tokens[j])) ++n_filler;
        }
        const std::size_t t = s.target_digit_position();
        const auto tr = capture(params, cfg, s);
        for (std::size_t l = 0; l < cfg.n_layer; ++l)
            for (std::size_t h = 0; h < cfg.n_head; ++h) {
                const auto& lm = tr.layers[l][h].landmark;
                target[l * cfg.n_head + h] += lm[t];
                for (std::size_t j = 0; j < s.length(); ++j) {
                    if (is_needle[j]) needle[l * cfg.n_head + h] += lm[j];
                    else if (niah::NiahVocab::is_filler(s.tokens[j])) filler[l * cfg.n_head + h] += lm[j];
                }
            }
    }
    if (n_needle == 0 || n_filler == 0) throw Error("landmark analysis: samples lack needles or fillers");
    std::vector<LandmarkByRole> out;
    for (std::size_t k = 0; k < nh; ++k)
        out.push_back({k / cfg.n_head, k % cfg.n_head, needle[k] / static_cast<double>(n_needle),
                       filler[k] / static_cast<double>(n_filler),
                       target[k] / static_cast<double>(samples.size())});
    return out;
}

std::vector<double> chunk_norms(const Matrix& vecs, std::size_t rotated_dims) {
    if (rotated_dims % 2 != 0 || rotated_dims > vecs.cols()) throw Error("chunk norms: bad rotated width");
    if (vecs.rows() == 0) throw Error("chunk norms: no rows");
    std::vector<double> out(rotated_dims / 2, 0.0);
    for (std::size_t r = 0; r < vecs.rows(); ++r)
        for (std::size_t c = 0; c < out.size(); ++c)
            out[c] += std::hypot(vecs(r, 2 * c), vecs(r, 2 * c + 1));
    for (auto& v : out) v /= static_cast<double>(vecs.rows());
    return out;
}

std::vector<ChannelNorm> channel_norms(const ParamStore& params, const ModelConfig& cfg,
                                       std::span<const niah::NiahSample> samples) {
    if (!cfg.kind.rotary()) throw Error("no rotary channels");
    require_samples(samples);
    const std::size_t ds = cfg.semantic_dim();
    const std::size_t rot = cfg.kind.rotated_dims(ds);
    const auto spec = FrequencySpectrum::make(ds, cfg.kind.theta);
    const std::size_t nc = rot / 2;
    std::vector<ChannelNorm> out;
    for (std::size_t l = 0; l < cfg.n_layer; ++l)
        for (std::size_t h = 0; h < cfg.n_head; ++h)
            for (std::size_t c = 0; c < nc; ++c) out.push_back({l, h, c, spec.freqs[c], 0.0, 0.0});
    const double n = static_cast<double>(samples.size());
    for (const auto& s : samples) {
        const auto tr = capture(params, cfg, s);
        for (std::size_t l = 0; l < cfg.n_layer; ++l)
            for (std::size_t h = 0; h < cfg.n_head; ++h) {
                const auto qn = chunk_norms(tr.layers[l][h].q, rot);
                const auto kn = chunk_norms(tr.layers[l][h].k, rot);
                for (std::size_t c = 0; c < nc; ++c) {
                    auto& e = out[(l * cfg.n_head + h) * nc + c];
                    e.q_norm += qn[c] / n;
                    e.k_norm += kn[c] / n;
                }
            }
    }
    return out;
}

double gate_entropy_correlation(const std::vector<HeadGates>& gates, const EntropyProfile& profile) {
    if (gates.size() != profile.heads.size() || gates.size() < 2)
        throw Error("correlation: need matching gate and entropy rows for at least two heads");
    const double n = static_cast<double>(gates.size());
    double mg = 0, mh = 0;
    for (std::size_t k = 0; k < gates.size(); ++k) {
        mg += gates[k].g_bar / n;
        mh += profile.heads[k].mean_H / n;
    }
    double sgh = 0, sgg = 0, shh = 0;
    for (std::size_t k = 0; k < gates.size(); ++k) {
        const double a = gates[k].g_bar - mg, b = profile.heads[k].mean_H - mh;
        sgh += a * b;
        sgg += a * a;
        shh += b * b;
    }
    if (sgg == 0.0 || shh == 0.0) return 0.0;
    return sgh / std::sqrt(sgg * shh);
}

void write_entropy_csv(std::ostream& os, const EntropyProfile& p) {
    os << "layer,head,mean_H,std_H\n";
    for (const auto& h : p.heads) os << h.layer << ',' << h.head << ',' << fmt(h.mean_H) << ',' << fmt(h.std_H) << '\n';
}

void write_delta_csv(std::ostream& os, const std::vector<HeadDelta>& d) {
    os << "layer,head,delta_H\n";
    for (const auto& h : d) os << h.layer << ',' << h.head << ',' << fmt(h.delta_H) << '\n';
}

void write_gates_csv(std::ostream& os, const std::vector<HeadGates>& g) {
    os << "layer,head,M_bar,l_bar,g_bar,Gamma\n";
    for (const auto& h : g)
        os << h.layer << ',' << h.head << ',' << fmt(h.M_bar) << ',' << fmt(h.l_bar) << ',' << fmt(h.g_bar) << ','
           << fmt(h.Gamma) << '\n';
}

void write_channels_csv(std::ostream& os, const std::vector<ChannelNorm>& c) {
    os << "layer,head,channel_idx,freq,q_norm,k_norm\n";
    for (const auto& h : c)
        os << h.layer << ',' << h.head << ',' << h.channel << ',' << fmt(h.freq) << ',' << fmt(h.q_norm) << ','
           << fmt(h.k_norm) << '\n';
}

} // namespace gapelab::analysis
