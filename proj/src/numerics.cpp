#include "gap/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <limits>
#include <numeric>
#include <string>

namespace gap {

Mat::Mat(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Mat::Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw std::invalid_argument("Mat: data size does not match dimensions");
    }
}

Mat Mat::checked(std::size_t rows, std::size_t cols, std::vector<double> data) {
    if (rows == 0 || cols == 0) throw std::invalid_argument("Mat: dimensions must be positive");
    require_finite(data, "Mat");
    return Mat(rows, cols, std::move(data));
}

Mat Mat::identity(std::size_t n) {
    Mat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Mat Mat::transposed() const {
    Mat t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

void require_finite(std::span<const double> x, const char* what) {
    for (double v : x) {
        if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite entry");
    }
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> x) { return std::sqrt(dot(x, x)); }

void matvec_into(const Mat& w, std::span<const double> x, std::span<double> y) {
    if (x.size() != w.cols() || y.size() != w.rows()) {
        throw std::invalid_argument("matvec: dimension mismatch");
    }
    const std::size_t n = w.cols();
    const double* p = w.data().data();
    for (std::size_t r = 0; r < w.rows(); ++r, p += n) {
        double s = 0.0;
        for (std::size_t c = 0; c < n; ++c) s += p[c] * x[c];
        y[r] = s;
    }
}

Vec matvec(const Mat& w, std::span<const double> x) {
    Vec y(w.rows());
    matvec_into(w, x, y);
    return y;
}

Vec matvec_t(const Mat& w, std::span<const double> x) {
    if (x.size() != w.rows()) throw std::invalid_argument("matvec_t: dimension mismatch");
    Vec y(w.cols(), 0.0);
    for (std::size_t r = 0; r < w.rows(); ++r) {
        const double xr = x[r];
        const auto row = w.row(r);
        for (std::size_t c = 0; c < w.cols(); ++c) y[c] += row[c] * xr;
    }
    return y;
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: dimension mismatch");
    Mat out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            for (std::size_t j = 0; j < b.cols(); ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

Vec rmsnorm(std::span<const double> x, std::span<const double> gain, double eps) {
    if (x.size() != gain.size()) throw std::invalid_argument("rmsnorm: dimension mismatch");
    if (x.empty()) throw std::invalid_argument("rmsnorm: empty input");
    if (eps < 0.0) throw std::invalid_argument("rmsnorm: eps must be non-negative");
    const double ms = dot(x, x) / static_cast<double>(x.size());
    const double denom = std::sqrt(ms + eps);
    Vec out(x.size());
    if (denom == 0.0) return out;  // zero input with eps = 0
    const double inv = 1.0 / denom;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain[i] * (x[i] * inv);
    return out;
}

double log_l2(std::span<const double> x) {
    const double n = l2_norm(x);
    if (!(n > 0.0)) throw std::invalid_argument("log_l2: zero-norm vector");
    return std::log(n);
}

EigenDecomposition sym_eig(const Mat& s, const JacobiOptions& opts) {
    const std::size_t n = s.rows();
    if (n == 0 || s.cols() != n) throw std::invalid_argument("sym_eig: matrix must be square and non-empty");
    require_finite(s.data(), "sym_eig");

    double scale = 1.0;
    for (double v : s.data()) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(s(i, j) - s(j, i)) > opts.symmetry_tolerance * scale)
                throw std::invalid_argument("sym_eig: matrix is not symmetric");

    Mat a = s;
    // Work on the exactly symmetric part.
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (s(i, j) + s(j, i));
    Mat v = Mat::identity(n);

    double fro2 = 0.0;
    for (double x : a.data()) fro2 += x * x;
    const double threshold = opts.off_tolerance * std::sqrt(fro2);

    auto off_norm = [&] {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += 2.0 * a(i, j) * a(i, j);
        return std::sqrt(off);
    };

    int sweep = 0;
    bool converged = off_norm() <= threshold;
    while (!converged && sweep < opts.max_sweeps) {
        ++sweep;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p);
                    const double akq = a(k, q);
                    a(k, p) = c * akp - sn * akq;
                    a(k, q) = sn * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k);
                    const double aqk = a(q, k);
                    a(p, k) = c * apk - sn * aqk;
                    a(q, k) = sn * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p);
                    const double vkq = v(k, q);
                    v(k, p) = c * vkp - sn * vkq;
                    v(k, q) = sn * vkp + c * vkq;
                }
            }
        }
        converged = off_norm() <= threshold;
    }
    if (!converged) throw std::runtime_error("sym_eig: Jacobi iteration did not converge");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

    EigenDecomposition out;
    out.values.resize(n);
    out.vectors = Mat(n, n);
    out.sweeps = sweep;
    for (std::size_t j = 0; j < n; ++j) {
        out.values[j] = a(order[j], order[j]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, j) = v(i, order[j]);
    }
    return out;
}

double Rng::uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller; 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double ang = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(ang);
    have_spare_ = true;
    return r * std::cos(ang);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below: empty range");
    // Rejection sampling for an unbiased result.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
        x = engine_();
    } while (x >= limit);
    return x % n;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t key) {
    // splitmix64 finalizer over the combined words
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (key + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

Rng Rng::fork(std::uint64_t key) const { return Rng(mix_seed(seed_, key)); }

Vec gaussian_vec(Rng& rng, std::size_t d, double scale) {
    if (d == 0) throw std::invalid_argument("gaussian_vec: dimension must be positive");
    if (!(scale > 0.0)) throw std::invalid_argument("gaussian_vec: scale must be positive");
    Vec out(d);
    for (auto& x : out) x = scale * rng.normal();
    return out;
}

}  // namespace gap
