#include "gapelab/train.hpp"

#include "gapelab/parallel.hpp"

#include "kernels.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <sstream>

namespace gapelab::train {

namespace {

std::string fmt(double v) { return format_double(v); }

std::size_t parse_size(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    unsigned long long x = 0;
    try {
        x = std::stoull(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty() || v[0] == '-') throw Error("train config: '" + key + "' expects a natural number, got '" + v + "'");
    return static_cast<std::size_t>(x);
}

double parse_real(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double x = 0;
    try {
        x = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != v.size() || v.empty()) throw Error("train config: '" + key + "' expects a number, got '" + v + "'");
    return x;
}

} // namespace

void TrainConfig::validate() const {
    if (steps_max == 0 || batch == 0) throw Error("train config: steps_max and batch must be positive");
    if (!(lr_min > 0.0) || lr < lr_min) throw Error("train config: need lr >= lr_min > 0");
    if (weight_decay < 0.0) throw Error("train config: weight_decay must be non-negative");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw Error("train config: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw Error("train config: eps must be positive");
    if (!(grad_clip > 0.0)) throw Error("train config: grad_clip must be positive");
    if (warmup > steps_max) throw Error("train config: warmup exceeds steps_max");
    if (val_every == 0 || val_size == 0) throw Error("train config: val_every and val_size must be positive");
    if (early_stop_patience == 0) throw Error("train config: early_stop_patience must be positive");
    if (L_train < 2) throw Error("train config: L_train must be at least 2");
}

const std::vector<std::string>& TrainConfig::keys() {
    static const std::vector<std::string> k = {"steps_max", "batch", "lr", "lr_min", "weight_decay", "beta1",
                                               "beta2", "eps", "grad_clip", "warmup", "val_every", "val_size",
                                               "early_stop_patience", "seed", "L_train", "regime"};
    return k;
}

void TrainConfig::set(const std::string& key, const std::string& v) {
    if (key == "steps_max") steps_max = parse_size(key, v);
    else if (key == "batch") batch = parse_size(key, v);
    else if (key == "lr") lr = parse_real(key, v);
    else if (key == "lr_min") lr_min = parse_real(key, v);
    else if (key == "weight_decay") weight_decay = parse_real(key, v);
    else if (key == "beta1") beta1 = parse_real(key, v);
    else if (key == "beta2") beta2 = parse_real(key, v);
    else if (key == "eps") eps = parse_real(key, v);
    else if (key == "grad_clip") grad_clip = parse_real(key, v);
    else if (key == "warmup") warmup = parse_size(key, v);
    else if (key == "val_every") val_every = parse_size(key, v);
    else if (key == "val_size") val_size = parse_size(key, v);
    else if (key == "early_stop_patience") early_stop_patience = parse_size(key, v);
    else if (key == "seed") seed = parse_size(key, v);
    else if (key == "L_train") L_train = parse_size(key, v);
    else if (key == "regime") regime = niah::parse_regime(v);
    else throw Error("train config: unknown key '" + key + "'");
}

std::string TrainConfig::get(const std::string& key) const {
    if (key == "steps_max") return std::to_string(steps_max);
    if (key == "batch") return std::to_string(batch);
    if (key == "lr") return fmt(lr);
    if (key == "lr_min") return fmt(lr_min);
    if (key == "weight_decay") return fmt(weight_decay);
    if (key == "beta1") return fmt(beta1);
    if (key == "beta2") return fmt(beta2);
    if (key == "eps") return fmt(eps);
    if (key == "grad_clip") return fmt(grad_clip);
    if (key == "warmup") return std::to_string(warmup);
    if (key == "val_every") return std::to_string(val_every);
    if (key == "val_size") return std::to_string(val_size);
    if (key == "early_stop_patience") return std::to_string(early_stop_patience);
    if (key == "seed") return std::to_string(seed);
    if (key == "L_train") return std::to_string(L_train);
    if (key == "regime") return niah::regime_name(regime);
    throw Error("train config: unknown key '" + key + "'");
}

std::string TrainConfig::to_text() const {
    std::string out;
    for (const auto& k : keys()) out += k + "=" + get(k) + "\n";
    return out;
}

double lr_at(const TrainConfig& cfg, std::size_t step) {
    if (step < cfg.warmup) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup);
    if (step >= cfg.steps_max) return cfg.lr_min;
    const double span = static_cast<double>(cfg.steps_max - cfg.warmup);
    const double progress = static_cast<double>(step - cfg.warmup) / span;
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(M_PI * progress));
}

// ------------------------------------------------------------------ AdamW

template <class T>
AdamW<T>::AdamW(const BasicParamStore<T>& params, AdamWOptions opts, DecayRule rule)
    : opts_(opts), m_(params.zeros_like()), v_(params.zeros_like()) {
    for (const auto& e : params.entries()) decay_.push_back(rule(e.name, e.shape.size()));
}

template <class T>
void AdamW<T>::step(BasicParamStore<T>& params, const BasicParamStore<T>& grads, double lr) {
    const kernels::FlushDenormals<T> ftz;
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(opts_.beta1), b2 = static_cast<T>(opts_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(opts_.eps);
    auto& pe = params.entries();
    for (std::size_t n = 0; n < pe.size(); ++n) {
        auto& p = pe[n];
        if (!p.requires_grad) continue;
        const auto& g = grads.entries()[n].data;
        auto& m = m_.entries()[n].data;
        auto& v = v_.entries()[n].data;
        if (g.size() != p.data.size()) throw Error("AdamW: gradient shape mismatch for '" + p.name + "'");
        const T shrink = decay_[n] ? static_cast<T>(1.0 - lr * opts_.weight_decay) : T(1);
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            m[i] = b1 * m[i] + (T(1) - b1) * g[i];
            v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
            p.data[i] = p.data[i] * shrink - step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
        }
    }
}

template <class T>
double clip_grad_norm(BasicParamStore<T>& grads, double max_norm) {
    double ss = 0.0;
    for (const auto& e : grads.entries())
        for (T x : e.data) ss += static_cast<double>(x) * static_cast<double>(x);
    const double norm = std::sqrt(ss);
    if (std::isfinite(norm) && norm > max_norm) {
        const T s = static_cast<T>(max_norm / (norm + 1e-6));
        for (auto& e : grads.entries())
            for (T& x : e.data) x *= s;
    }
    return norm;
}

template class AdamW<float>;
template class AdamW<double>;
template double clip_grad_norm<float>(BasicParamStore<float>&, double);
template double clip_grad_norm<double>(BasicParamStore<double>&, double);

// ------------------------------------------------------------------ seeds

std::uint64_t train_stream(std::uint64_t seed) { return derive_seed(seed, 0x7261696eULL); }
std::uint64_t validation_stream(std::uint64_t seed) { return derive_seed(seed, 0x76616cULL); }
std::uint64_t init_stream(std::uint64_t seed) { return derive_seed(seed, 0x696e6974ULL); }
std::uint64_t eval_stream(std::uint64_t seed, std::size_t length) {
    return derive_seed(derive_seed(seed, 0x6576616cULL), length);
}

// ------------------------------------------------------------- evaluation

namespace {
// Rows of float attention weights sum to 1 only to single precision.
constexpr double kFloatRowTol = 1e-4;
} // namespace

AccuracyReport measure_accuracy(const ParamStore& params, const ModelConfig& mc, std::size_t length,
                                niah::Regime regime, std::uint64_t seed, std::size_t n_samples, std::size_t threads,
                                bool entropy) {
    std::vector<std::uint8_t> ok(n_samples, 0);
    std::vector<double> loss(n_samples, 0.0);
    std::vector<std::vector<double>> ent(entropy ? n_samples : 0);
    parallel_for(n_samples, threads, [&](std::size_t i) {
        const auto s = niah::generate_indexed(length, regime, seed, i);
        ForwardTrace trace;
        const auto logits = final_logits(params, s.tokens, mc, entropy ? &trace : nullptr);
        const auto digits = digit_logits(logits);
        ok[i] = niah::decode_target(s, digits).correct ? 1 : 0;
        double mx = digits[0];
        for (double z : digits) mx = std::max(mx, z);
        double z = 0.0;
        for (double d : digits) z += std::exp(d - mx);
        loss[i] = mx + std::log(z) - digits[s.target];
        if (entropy) {
            for (const auto& layer : trace.layers) {
                double h = 0.0;
                for (const auto& head : layer) {
                    const auto row = head.weights.row(head.weights.rows() - 1);
                    h += shannon_entropy(row.subspan(0, length), kFloatRowTol);
                }
                ent[i].push_back(h / static_cast<double>(layer.size()));
            }
        }
    });
    AccuracyReport r;
    r.n = n_samples;
    for (std::size_t i = 0; i < n_samples; ++i) {
        r.correct += ok[i];
        r.mean_loss += loss[i];
    }
    if (n_samples) r.mean_loss /= static_cast<double>(n_samples);
    if (entropy && n_samples) {
        r.mean_final_entropy.assign(mc.n_layer, 0.0);
        for (const auto& e : ent)
            for (std::size_t l = 0; l < e.size(); ++l) r.mean_final_entropy[l] += e[l];
        for (auto& v : r.mean_final_entropy) v /= static_cast<double>(n_samples);
    }
    return r;
}

std::vector<EvalResult> evaluate_extrapolation(const ParamStore& params, const ModelConfig& mc, std::size_t L_train,
                                               niah::Regime regime, const std::vector<std::size_t>& multipliers,
                                               std::size_t n_eval, std::uint64_t seed, std::size_t threads,
                                               bool entropy) {
    if (n_eval == 0) throw Error("evaluate: n_eval must be positive");
    std::vector<EvalResult> out;
    for (std::size_t m : multipliers) {
        if (m == 0) throw Error("evaluate: multipliers must be positive");
        const std::size_t L = L_train * m;
        const auto rep = measure_accuracy(params, mc, L, regime, eval_stream(seed, L), n_eval, threads, entropy);
        EvalResult e;
        e.length = L;
        e.multiplier = m;
        e.n_eval = rep.n;
        e.correct = rep.correct;
        e.accuracy = rep.accuracy();
        e.mean_entropy_per_layer = rep.mean_final_entropy;
        out.push_back(std::move(e));
    }
    return out;
}

void write_eval_csv(std::ostream& os, const std::vector<EvalResult>& results) {
    std::size_t layers = 0;
    for (const auto& r : results) layers = std::max(layers, r.mean_entropy_per_layer.size());
    os << "length,multiplier,n_eval,correct,accuracy";
    for (std::size_t l = 0; l < layers; ++l) os << ",entropy_l" << l;
    os << '\n';
    for (const auto& r : results) {
        os << r.length << ',' << r.multiplier << ',' << r.n_eval << ',' << r.correct << ',' << fmt(r.accuracy);
        for (std::size_t l = 0; l < layers; ++l)
            os << ',' << (l < r.mean_entropy_per_layer.size() ? fmt(r.mean_entropy_per_layer[l]) : "");
        os << '\n';
    }
}

// ---------------------------------------------------------------- training

namespace {

constexpr std::size_t kGateProbeSamples = 8;

/// Layer means of g (over query positions), l (over keys) and Gamma (over heads)
/// on the first validation samples, through the full forward.
std::vector<LayerGateMeans> probe_gates(const ParamStore& params, const ModelConfig& mc,
                                        const std::vector<niah::NiahSample>& samples) {
    std::vector<LayerGateMeans> out(mc.n_layer);
    if (!mc.gape_enabled) return {};
    const std::size_t n = std::min(kGateProbeSamples, samples.size());
    for (std::size_t s = 0; s < n; ++s) {
        const auto res = forward(params, samples[s].tokens, mc, CaptureFlags{true});
        for (std::size_t l = 0; l < mc.n_layer; ++l) {
            for (const auto& h : res.trace->layers[l]) {
                double g = 0, lm = 0;
                for (double x : h.query_gate) g += x;
                for (double x : h.landmark) lm += x;
                out[l].g += g / static_cast<double>(h.query_gate.size());
                out[l].l += lm / static_cast<double>(h.landmark.size());
                out[l].Gamma += h.amplitude;
            }
        }
    }
    const double denom = static_cast<double>(n * mc.n_head);
    for (auto& m : out) {
        m.g /= denom;
        m.l /= denom;
        m.Gamma /= denom;
    }
    return out;
}

} // namespace

void write_metrics_csv(std::ostream& os, const TrainConfig& tc, const ModelConfig& mc,
                       const std::vector<MetricsRow>& rows) {
    os << "# adamw_eps=" << fmt(tc.eps) << " early_stop_patience=" << tc.early_stop_patience << '\n';
    os << "step,loss,val_acc,lr";
    if (mc.gape_enabled)
        for (std::size_t l = 0; l < mc.n_layer; ++l)
            os << ",g_mean_l" << l << ",l_mean_l" << l << ",Gamma_mean_l" << l;
    os << '\n';
    for (const auto& r : rows) {
        os << r.step << ',' << fmt(r.loss) << ',' << fmt(r.val_acc) << ',' << fmt(r.lr);
        for (const auto& g : r.gates) os << ',' << fmt(g.g) << ',' << fmt(g.l) << ',' << fmt(g.Gamma);
        os << '\n';
    }
}

TrainResult train(const ModelConfig& mc, const TrainConfig& tc, const TrainHooks& hooks) {
    mc.validate();
    tc.validate();
    if (niah::default_needle_count(tc.L_train) == 0)
        throw Error("train: L_train=" + std::to_string(tc.L_train) + " leaves no room for a needle");

    TrainResult res;
    Rng init_rng(init_stream(tc.seed));
    res.params = init_params<float>(mc, init_rng);
    AdamW<float> opt(res.params, {tc.beta1, tc.beta2, tc.eps, tc.weight_decay});

    const std::uint64_t tseed = train_stream(tc.seed), vseed = validation_stream(tc.seed);
    std::vector<niah::NiahSample> probe;
    for (std::size_t i = 0; i < std::min(kGateProbeSamples, tc.val_size); ++i)
        probe.push_back(niah::generate_indexed(tc.L_train, tc.regime, vseed, i));

    std::vector<niah::NiahSample> batch(tc.batch);
    double loss_sum = 0.0;
    std::size_t loss_count = 0, perfect_streak = 0;
    for (std::size_t step = 1; step <= tc.steps_max; ++step) {
        for (std::size_t b = 0; b < tc.batch; ++b)
            batch[b] = niah::generate_indexed(tc.L_train, tc.regime, tseed, (step - 1) * tc.batch + b);
        auto lg = loss_and_grad(res.params, batch, mc);
        const double gnorm = clip_grad_norm(lg.grads, tc.grad_clip);
        if (!std::isfinite(lg.loss) || !std::isfinite(gnorm)) {
            std::ostringstream os;
            os << "training diverged at step " << step << ": loss=" << lg.loss << " grad_norm=" << gnorm;
            throw Diverged(os.str());
        }
        const double lr = lr_at(tc, step);
        opt.step(res.params, lg.grads, lr);
        loss_sum += lg.loss;
        ++loss_count;
        res.steps_run = step;

        if (step % tc.val_every == 0 || step == tc.steps_max) {
            const auto rep = measure_accuracy(res.params, mc, tc.L_train, tc.regime, vseed, tc.val_size, hooks.threads);
            MetricsRow row;
            row.step = step;
            row.loss = loss_sum / static_cast<double>(loss_count);
            row.val_acc = rep.accuracy();
            row.lr = lr;
            row.gates = probe_gates(res.params, mc, probe);
            res.metrics.push_back(row);
            res.final_val_acc = row.val_acc;
            if (hooks.on_validation) hooks.on_validation(row);
            loss_sum = 0.0;
            loss_count = 0;
            perfect_streak = rep.correct == rep.n ? perfect_streak + 1 : 0;
            if (perfect_streak >= tc.early_stop_patience) {
                res.early_stopped = true;
                break;
            }
        }
    }
    return res;
}

} // namespace gapelab::train
