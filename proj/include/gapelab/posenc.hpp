#pragma once

#include "gapelab/numerics.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gapelab {

using Positions = std::vector<std::size_t>;

/// Positions 0..n-1.
Positions iota_positions(std::size_t n, std::size_t offset = 0);

/// Rotary frequencies freqs[k] = base^(-2k/head_dim), k < head_dim/2.
struct FrequencySpectrum {
    std::size_t head_dim = 0;
    double base = 10000.0;
    std::vector<double> freqs;

    static FrequencySpectrum make(std::size_t head_dim, double base = 10000.0);
};

enum class Scheme { NoPE, RoPE, PRoPE, ALiBi };

/// Positional scheme that shapes the semantic logits.
struct EncodingKind {
    Scheme scheme = Scheme::NoPE;
    double theta = 10000.0;
    /// Share of rotary chunks kept rotated (pRoPE only). The highest
    /// frequencies stay rotated; the lowest pass through.
    double fraction = 1.0;
    /// One slope per head (ALiBi only).
    std::vector<double> slopes;

    static EncodingKind nope() { return {}; }
    static EncodingKind rope(double theta = 10000.0);
    static EncodingKind prope(double fraction = 0.75, double theta = 10000.0);
    static EncodingKind alibi(std::size_t n_heads);
    static EncodingKind alibi(std::vector<double> slopes);

    bool rotary() const { return scheme == Scheme::RoPE || scheme == Scheme::PRoPE; }
    /// Number of leading coordinates (out of `dim`) that get rotated.
    std::size_t rotated_dims(std::size_t dim) const;
    std::string name() const;
    void validate() const;
};

/// Parses "nope", "rope", "prope", "alibi" (case-insensitive).
Scheme parse_scheme(const std::string& s);
std::string scheme_name(Scheme s);

/// Geometric ALiBi slopes 2^(-8h/H) for h = 1..H.
std::vector<double> default_alibi_slopes(std::size_t n_heads);

/// Rotates the first `rotated_dims` coordinates of every row in 2-D chunks
/// (2c, 2c+1) by angle position * freqs[c]; remaining coordinates pass through.
Matrix apply_rotary(const Matrix& vecs, std::span<const std::size_t> positions,
                    const FrequencySpectrum& spectrum, std::size_t rotated_dims);

/// s[i][j] = q_i . k_j / sqrt(scale_dim) after applying the rotary map (if any)
/// to copies of q and k. scale_dim defaults to q.cols(). Entries with j > i are
/// computed too; causal masking is the caller's job.
Matrix semantic_logits(const Matrix& q, const Matrix& k, const EncodingKind& kind,
                       std::optional<std::size_t> scale_dim = std::nullopt,
                       std::optional<Positions> positions = std::nullopt);

/// bias[i][j] = -slope * (i - j) for j <= i, 0 above the diagonal.
Matrix alibi_bias(std::size_t length, double slope);

} // namespace gapelab
