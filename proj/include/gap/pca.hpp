#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "gap/numerics.hpp"

namespace gap {

/// Empirical PCA basis over auxiliary latent targets. Immutable once fitted.
class PcaBasis {
public:
    static constexpr std::uint32_t kFormatVersion = 1;

    PcaBasis() = default;
    /// components is d x k with orthonormal columns; eigenvalues has length d.
    PcaBasis(Vec mean, Mat components, Vec eigenvalues);

    std::size_t dim() const { return mean_.size(); }
    std::size_t rank() const { return components_.cols(); }
    const Vec& mean() const { return mean_; }
    const Mat& components() const { return components_; }
    const Vec& eigenvalues() const { return eigenvalues_; }
    double total_variance() const { return total_variance_; }

    /// Same subspace truncated to the leading k components.
    PcaBasis truncated(std::size_t k) const;

    void save(const std::filesystem::path& path) const;
    static PcaBasis load(const std::filesystem::path& path);

    friend bool operator==(const PcaBasis&, const PcaBasis&) = default;

private:
    Vec mean_;
    Mat components_;
    Vec eigenvalues_;
    double total_variance_ = 0.0;
};

/// Thrown when the sample population has no usable variance.
class DegenerateFit : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Population (1/N) mean and covariance.
struct Moments {
    Vec mean;
    Mat covariance;
};
Moments sample_moments(std::span<const Vec> samples);

/// Fits mean + top-k eigenvectors, k being the smallest count whose explained
/// variance ratio reaches variance_target.
PcaBasis fit_pca(std::span<const Vec> samples, double variance_target);
/// Fits with an explicit component count.
PcaBasis fit_pca_rank(std::span<const Vec> samples, std::size_t k);

/// c = P_k^T (v - mu)
Vec project(const PcaBasis& basis, std::span<const double> v);
/// v = P_k c + mu
Vec reconstruct(const PcaBasis& basis, std::span<const double> c);

/// Mean squared residual over mean squared centered norm.
double rel_mse(const PcaBasis& basis, std::span<const Vec> samples);
/// 1 - sum_{j<=k} lambda_j / sum_j lambda_j
double spectral_rel_mse(const PcaBasis& basis);

/// || (I - P P^T)(v - mu) ||
double out_of_subspace_norm(const PcaBasis& basis, std::span<const double> v);

}  // namespace gap
