#include "gap/pca.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "binary_io.hpp"

namespace gap {

namespace {

constexpr double kDegenerateRatio = 1e-12;

void check_samples(std::span<const Vec> samples) {
    if (samples.size() < 2) throw std::invalid_argument("fit_pca: need at least 2 samples");
    const std::size_t d = samples.front().size();
    if (d == 0) throw std::invalid_argument("fit_pca: samples must be non-empty");
    for (const auto& s : samples) {
        if (s.size() != d) throw std::invalid_argument("fit_pca: inconsistent sample dimension");
        require_finite(s, "fit_pca");
    }
}

PcaBasis build_basis(const Moments& m, const EigenDecomposition& eig, std::size_t k) {
    const std::size_t d = m.mean.size();
    Mat comps(d, k);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < k; ++j) comps(i, j) = eig.vectors(i, j);
    return PcaBasis(m.mean, std::move(comps), eig.values);
}

double checked_total(const EigenDecomposition& eig) {
    double total = 0.0;
    for (double l : eig.values) total += l;
    if (!(total > 0.0)) throw DegenerateFit("fit_pca: samples have zero total variance");
    return total;
}

void check_component_count(const EigenDecomposition& eig, double total, std::size_t k) {
    for (std::size_t j = 0; j < k; ++j) {
        if (eig.values[j] < kDegenerateRatio * total) {
            throw DegenerateFit("fit_pca: component " + std::to_string(j) +
                                " has negligible variance; lower the variance target");
        }
    }
}

}  // namespace

PcaBasis::PcaBasis(Vec mean, Mat components, Vec eigenvalues)
    : mean_(std::move(mean)), components_(std::move(components)), eigenvalues_(std::move(eigenvalues)) {
    if (components_.rows() != mean_.size() || eigenvalues_.size() != mean_.size()) {
        throw std::invalid_argument("PcaBasis: inconsistent shapes");
    }
    if (components_.cols() > mean_.size()) throw std::invalid_argument("PcaBasis: k exceeds d");
    require_finite(mean_, "PcaBasis mean");
    require_finite(components_.data(), "PcaBasis components");
    require_finite(eigenvalues_, "PcaBasis eigenvalues");
    total_variance_ = 0.0;
    for (double l : eigenvalues_) total_variance_ += l;
}

PcaBasis PcaBasis::truncated(std::size_t k) const {
    if (k > rank()) throw std::invalid_argument("PcaBasis::truncated: k exceeds rank");
    Mat comps(dim(), k);
    for (std::size_t i = 0; i < dim(); ++i)
        for (std::size_t j = 0; j < k; ++j) comps(i, j) = components_(i, j);
    return PcaBasis(mean_, std::move(comps), eigenvalues_);
}

Moments sample_moments(std::span<const Vec> samples) {
    check_samples(samples);
    const std::size_t d = samples.front().size();
    const double inv_n = 1.0 / static_cast<double>(samples.size());
    Moments m{Vec(d, 0.0), Mat(d, d)};
    for (const auto& s : samples)
        for (std::size_t i = 0; i < d; ++i) m.mean[i] += s[i];
    for (auto& x : m.mean) x *= inv_n;
    Vec c(d);
    for (const auto& s : samples) {
        for (std::size_t i = 0; i < d; ++i) c[i] = s[i] - m.mean[i];
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j <= i; ++j) m.covariance(i, j) += c[i] * c[j];
    }
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j <= i; ++j) {
            m.covariance(i, j) *= inv_n;
            m.covariance(j, i) = m.covariance(i, j);
        }
    return m;
}

PcaBasis fit_pca(std::span<const Vec> samples, double variance_target) {
    if (!(variance_target > 0.0 && variance_target <= 1.0)) {
        throw std::invalid_argument("fit_pca: variance_target must be in (0, 1]");
    }
    const Moments m = sample_moments(samples);
    const EigenDecomposition eig = sym_eig(m.covariance);
    const double total = checked_total(eig);

    const std::size_t d = m.mean.size();
    std::size_t k = d;
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        acc += eig.values[j];
        // Relative slack absorbs rounding in the cumulative sum at target 1.
        if (acc >= variance_target * total - kDegenerateRatio * total) {
            k = j + 1;
            break;
        }
    }
    check_component_count(eig, total, k);
    return build_basis(m, eig, k);
}

PcaBasis fit_pca_rank(std::span<const Vec> samples, std::size_t k) {
    const Moments m = sample_moments(samples);
    if (k == 0 || k > m.mean.size()) throw std::invalid_argument("fit_pca_rank: k must be in [1, d]");
    const EigenDecomposition eig = sym_eig(m.covariance);
    const double total = checked_total(eig);
    check_component_count(eig, total, k);
    return build_basis(m, eig, k);
}

Vec project(const PcaBasis& basis, std::span<const double> v) {
    if (v.size() != basis.dim()) throw std::invalid_argument("project: dimension mismatch");
    Vec centered(v.begin(), v.end());
    for (std::size_t i = 0; i < centered.size(); ++i) centered[i] -= basis.mean()[i];
    return matvec_t(basis.components(), centered);
}

Vec reconstruct(const PcaBasis& basis, std::span<const double> c) {
    if (c.size() != basis.rank()) throw std::invalid_argument("reconstruct: dimension mismatch");
    Vec v = matvec(basis.components(), c);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += basis.mean()[i];
    return v;
}

double rel_mse(const PcaBasis& basis, std::span<const Vec> samples) {
    if (samples.empty()) throw std::invalid_argument("rel_mse: empty sample list");
    double residual = 0.0;
    double energy = 0.0;
    for (const auto& s : samples) {
        const Vec r = reconstruct(basis, project(basis, s));
        for (std::size_t i = 0; i < s.size(); ++i) {
            const double e = s[i] - r[i];
            const double c = s[i] - basis.mean()[i];
            residual += e * e;
            energy += c * c;
        }
    }
    if (!(energy > 0.0)) throw std::invalid_argument("rel_mse: zero centered energy");
    return residual / energy;
}

double spectral_rel_mse(const PcaBasis& basis) {
    if (!(basis.total_variance() > 0.0)) throw std::invalid_argument("spectral_rel_mse: degenerate basis");
    double kept = 0.0;
    for (std::size_t j = 0; j < basis.rank(); ++j) kept += basis.eigenvalues()[j];
    return 1.0 - kept / basis.total_variance();
}

double out_of_subspace_norm(const PcaBasis& basis, std::span<const double> v) {
    const Vec c = project(basis, v);
    const Vec in = matvec(basis.components(), c);
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double r = (v[i] - basis.mean()[i]) - in[i];
        s += r * r;
    }
    return std::sqrt(s);
}

// Layout: magic "GAPPCA", u32 version, u32 reserved, u64 d, u64 k,
// then mean[d], eigenvalues[d], components[d*k] column-major; all LE doubles.
void PcaBasis::save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open basis file for writing: " + path.string());
    io::write_magic(os, "GAPPCA");
    io::write_u32(os, kFormatVersion);
    io::write_u32(os, 0);
    io::write_u64(os, dim());
    io::write_u64(os, rank());
    io::write_f64s(os, mean_);
    io::write_f64s(os, eigenvalues_);
    for (std::size_t j = 0; j < rank(); ++j)
        for (std::size_t i = 0; i < dim(); ++i) io::write_f64(os, components_(i, j));
    if (!os) throw std::runtime_error("failed writing basis file: " + path.string());
}

PcaBasis PcaBasis::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open basis file: " + path.string());
    io::expect_magic(is, "GAPPCA", "basis file");
    const auto version = io::read_u32(is);
    if (version != kFormatVersion) throw std::runtime_error("basis file: unsupported version");
    io::read_u32(is);
    const auto d = io::read_u64(is);
    const auto k = io::read_u64(is);
    if (d == 0 || k > d || d > (1u << 20)) throw std::runtime_error("basis file: bad header");
    Vec mean(d), eig(d);
    io::read_f64s(is, mean);
    io::read_f64s(is, eig);
    Mat comps(d, k);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < d; ++i) comps(i, j) = io::read_f64(is);
    return PcaBasis(std::move(mean), std::move(comps), std::move(eig));
}

}  // namespace gap
