#pragma once

#include <cstdint>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gapelab {

/// Library-wide error type. Every precondition failure throws this.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool all_finite() const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix add(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& a, double s);
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double max_abs_diff(const Matrix& a, const Matrix& b);

/// Shortest decimal spelling that parses back to exactly `v`.
std::string format_double(double v);

/// Softmax over the positions where `valid` is true, with max-subtraction.
/// Invalid positions come out as exactly 0. Throws "empty support" when no
/// position is valid.
std::vector<double> stable_softmax_row(std::span<const double> logits, const std::vector<bool>& valid);

/// Softmax over the prefix [0, count) of `logits`; the rest is zero.
std::vector<double> stable_softmax_prefix(std::span<const double> logits, std::size_t count);

/// Shannon entropy in nats, with 0 log 0 = 0.
double shannon_entropy(std::span<const double> p, double tol = 1e-9);

double sigmoid(double x);
double softplus(double x);

/// SplitMix64 (Steele, Lea, Flood 2014). Each draw advances a 64-bit counter
/// by the golden-ratio increment and mixes it with the variant-13 finalizer.
/// `split()` derives an independent child generator from the next draw.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    /// Uniform double in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n) by rejection (no modulo bias).
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller; caches the second value.
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }
    Rng split() { return Rng(next_u64()); }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Stateless child seed for stream `index` of a run seeded with `seed`.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

} // namespace gapelab
