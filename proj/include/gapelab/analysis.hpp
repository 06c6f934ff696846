#pragma once

#include "gapelab/model.hpp"
#include "gapelab/niah.hpp"

#include <iosfwd>
#include <span>
#include <vector>

namespace gapelab::analysis {

/// Entropy of each captured causal row: row r covers keys 0..first_row+r.
/// `tol` is the allowed deviation of a row sum from 1.
std::vector<double> row_entropies(const Matrix& weights, std::size_t first_row, double tol = 1e-9);

struct HeadEntropy {
    std::size_t layer = 0, head = 0;
    double mean_H = 0.0;  // mean over samples of the per-sample mean over query positions
    double std_H = 0.0;   // population std over samples
};

struct EntropyProfile {
    std::size_t n_samples = 0;
    std::vector<HeadEntropy> heads;  // layer-major
    /// Mean over heads of mean_H for one layer.
    double layer_mean(std::size_t layer) const;
};

EntropyProfile entropy_profile(const ParamStore& params, const ModelConfig& cfg,
                               std::span<const niah::NiahSample> samples, std::size_t threads = 1);

struct HeadDelta {
    std::size_t layer = 0, head = 0;
    double delta_H = 0.0;
};

/// with - base per (layer, head); both profiles must come from the same samples.
std::vector<HeadDelta> entropy_delta(const EntropyProfile& with, const EntropyProfile& base);

struct HeadGates {
    std::size_t layer = 0, head = 0;
    double M_bar = 0.0;  // mean distance penalty Gamma g_i (1 - l_j)(i - j) / T over causal pairs
    double l_bar = 0.0;
    double g_bar = 0.0;
    double Gamma = 0.0;
};

std::vector<HeadGates> gate_stats(const ParamStore& params, const ModelConfig& cfg,
                                  std::span<const niah::NiahSample> samples, std::size_t threads = 1);

/// Mean l_j over positions grouped by token role, per (layer, head).
struct LandmarkByRole {
    std::size_t layer = 0, head = 0;
    double needle = 0.0;  // KEY and digit tokens of every needle
    double filler = 0.0;
    double target = 0.0;  // digit token holding the answer
    double ratio() const { return needle / filler; }
    double target_ratio() const { return target / filler; }
};

std::vector<LandmarkByRole> landmark_by_role(const ParamStore& params, const ModelConfig& cfg,
                                             std::span<const niah::NiahSample> samples);

/// Mean Euclidean norm of each rotary pair (2c, 2c+1) over the rows.
std::vector<double> chunk_norms(const Matrix& vecs, std::size_t rotated_dims);

struct ChannelNorm {
    std::size_t layer = 0, head = 0, channel = 0;
    double freq = 0.0;
    double q_norm = 0.0, k_norm = 0.0;
};

std::vector<ChannelNorm> channel_norms(const ParamStore& params, const ModelConfig& cfg,
                                       std::span<const niah::NiahSample> samples);

/// Pearson correlation between g_bar and mean_H across (layer, head) pairs.
double gate_entropy_correlation(const std::vector<HeadGates>& gates, const EntropyProfile& profile);

void write_entropy_csv(std::ostream& os, const EntropyProfile& p);
void write_delta_csv(std::ostream& os, const std::vector<HeadDelta>& d);
void write_gates_csv(std::ostream& os, const std::vector<HeadGates>& g);
void write_channels_csv(std::ostream& os, const std::vector<ChannelNorm>& c);

} // namespace gapelab::analysis
