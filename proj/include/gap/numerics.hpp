#pragma once

// Shared numerical kernels: dense containers, RMSNorm, a Jacobi symmetric
// eigensolver, log-norm helpers and a platform-independent RNG.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

namespace gap {

using Vec = std::vector<double>;

/// Row-major dense matrix.
class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double fill = 0.0);
    Mat(std::size_t rows, std::size_t cols, std::vector<double> data);

    /// Same as the data constructor but rejects NaN/Inf entries.
    static Mat checked(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Mat identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    Mat transposed() const;

    friend bool operator==(const Mat&, const Mat&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

void require_finite(std::span<const double> x, const char* what);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> x);

/// y = W x, W is (out x in).
Vec matvec(const Mat& w, std::span<const double> x);
void matvec_into(const Mat& w, std::span<const double> x, std::span<double> y);
/// y = W^T x.
Vec matvec_t(const Mat& w, std::span<const double> x);
Mat matmul(const Mat& a, const Mat& b);

/// gain * x / sqrt(mean(x^2) + eps).
Vec rmsnorm(std::span<const double> x, std::span<const double> gain, double eps);

/// Natural log of the L2 norm. Throws on the zero vector.
double log_l2(std::span<const double> x);

struct EigenDecomposition {
    Vec values;    // descending
    Mat vectors;   // column j pairs with values[j]
    int sweeps = 0;
};

struct JacobiOptions {
    int max_sweeps = 100;
    double off_tolerance = 1e-12;
    double symmetry_tolerance = 1e-10;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
EigenDecomposition sym_eig(const Mat& s, const JacobiOptions& opts = {});

/// Deterministic random stream. Bits come from mt19937_64 (fully specified by
/// the standard); real and normal variates are derived here so the stream does
/// not depend on the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double normal();
    bool bernoulli(double p) { return uniform() < p; }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    /// Independent child stream keyed by (seed, key).
    Rng fork(std::uint64_t key) const;

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key);

Vec gaussian_vec(Rng& rng, std::size_t d, double scale);

}  // namespace gap
