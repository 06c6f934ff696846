#pragma once

#include "gapelab/model.hpp"
#include "gapelab/niah.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace gapelab::train {

struct TrainConfig {
    std::size_t steps_max = 5000;
    std::size_t batch = 64;
    double lr = 3e-4;
    double lr_min = 3e-5;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double grad_clip = 1.0;
    std::size_t warmup = 100;
    std::size_t val_every = 100;
    std::size_t val_size = 1000;
    std::size_t early_stop_patience = 3;
    std::uint64_t seed = 0;
    std::size_t L_train = 256;
    niah::Regime regime = niah::Regime::First;

    void validate() const;
    /// Sets one field from its key=value spelling; unknown keys throw.
    void set(const std::string& key, const std::string& value);
    static const std::vector<std::string>& keys();
    std::string get(const std::string& key) const;
    std::string to_text() const;
};

/// Linear warmup from 0 to lr over `warmup` steps, then cosine decay to lr_min
/// at steps_max; constant lr_min afterwards.
double lr_at(const TrainConfig& cfg, std::size_t step);

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

/// AdamW with decoupled weight decay (p <- p - lr*wd*p before the moment
/// update is applied). Which entries decay is decided once from their name
/// and rank; by default the model's rule, which spares biases, norms and gates.
template <class T>
class AdamW {
public:
    using DecayRule = std::function<bool(const std::string&, std::size_t)>;

    AdamW(const BasicParamStore<T>& params, AdamWOptions opts, DecayRule rule = decays);
    void step(BasicParamStore<T>& params, const BasicParamStore<T>& grads, double lr);
    std::size_t steps() const { return t_; }
    const BasicParamStore<T>& first_moment() const { return m_; }
    const BasicParamStore<T>& second_moment() const { return v_; }

private:
    AdamWOptions opts_;
    std::vector<bool> decay_;
    BasicParamStore<T> m_, v_;
    std::size_t t_ = 0;
};

/// Rescales grads to global L2 norm <= max_norm. Returns the norm before clipping.
template <class T>
double clip_grad_norm(BasicParamStore<T>& grads, double max_norm);

struct LayerGateMeans {
    double g = 0.0, l = 0.0, Gamma = 0.0;
};

struct MetricsRow {
    std::size_t step = 0;
    double loss = 0.0;     // mean training loss since the previous row
    double val_acc = 0.0;
    double lr = 0.0;
    std::vector<LayerGateMeans> gates;  // empty without GAPE
};

void write_metrics_csv(std::ostream& os, const TrainConfig& tc, const ModelConfig& mc,
                       const std::vector<MetricsRow>& rows);

class Diverged : public Error {
public:
    using Error::Error;
};

struct TrainResult {
    ParamStore params;
    std::vector<MetricsRow> metrics;
    std::size_t steps_run = 0;
    bool early_stopped = false;
    double final_val_acc = 0.0;
};

struct TrainHooks {
    /// Called after every validation; wall-clock and progress logging live here
    /// so the metrics themselves stay reproducible.
    std::function<void(const MetricsRow&)> on_validation;
    std::size_t threads = 1;  // validation only; training is single-threaded
};

/// Trains a fresh model. Batches, validation set and initial weights come from
/// disjoint streams of `tc.seed`, so equal seeds give equal runs.
TrainResult train(const ModelConfig& mc, const TrainConfig& tc, const TrainHooks& hooks = {});

/// Fraction of samples whose argmax digit equals the target; sample i is
/// generate_indexed(length, regime, seed, i).
struct AccuracyReport {
    std::size_t correct = 0;
    std::size_t n = 0;
    double mean_loss = 0.0;
    std::vector<double> mean_final_entropy;  // per layer, when requested
    double accuracy() const { return n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0; }
};

AccuracyReport measure_accuracy(const ParamStore& params, const ModelConfig& mc, std::size_t length,
                                niah::Regime regime, std::uint64_t seed, std::size_t n_samples,
                                std::size_t threads = 1, bool entropy = false);

struct EvalResult {
    std::size_t length = 0;
    std::size_t multiplier = 1;
    double accuracy = 0.0;
    std::size_t n_eval = 0;
    std::size_t correct = 0;
    /// Mean over samples and heads of the attention entropy at the query position.
    std::vector<double> mean_entropy_per_layer;
};

/// Accuracy at L_train * m for each multiplier on held-out samples; the
/// needle count follows floor(L/64) at every length.
std::vector<EvalResult> evaluate_extrapolation(const ParamStore& params, const ModelConfig& mc, std::size_t L_train,
                                               niah::Regime regime, const std::vector<std::size_t>& multipliers,
                                               std::size_t n_eval, std::uint64_t seed, std::size_t threads = 1,
                                               bool entropy = false);

void write_eval_csv(std::ostream& os, const std::vector<EvalResult>& results);

/// Seed streams; the eval stream is disjoint from training and validation.
std::uint64_t train_stream(std::uint64_t seed);
std::uint64_t validation_stream(std::uint64_t seed);
std::uint64_t init_stream(std::uint64_t seed);
std::uint64_t eval_stream(std::uint64_t seed, std::size_t length);

} // namespace gapelab::train
