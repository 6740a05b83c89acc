#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gap/pca.hpp"

using namespace gap;

namespace {

/// Samples with a planted anisotropic spectrum in a random rotation.
std::vector<Vec> anisotropic(Rng& rng, std::size_t n, std::size_t d) {
    Mat q(d, d);
    for (auto& x : q.data()) x = rng.normal();
    Mat sym = matmul(q, q.transposed());
    const Mat rot = sym_eig(sym).vectors;
    std::vector<Vec> out;
    for (std::size_t s = 0; s < n; ++s) {
        Vec z(d);
        for (std::size_t j = 0; j < d; ++j) z[j] = std::pow(0.8, static_cast<double>(j)) * rng.normal();
        Vec v = matvec(rot, z);
        for (std::size_t i = 0; i < d; ++i) v[i] += 1.5 + 0.1 * static_cast<double>(i);
        out.push_back(v);
    }
    return out;
}

double max_abs_diff(const Vec& a, const Vec& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("samples on the x axis give k = 1, matching the 2x2 covariance") {
    std::vector<Vec> s{{-2.0, 0.0}, {-1.0, 0.0}, {0.5, 0.0}, {3.0, 0.0}, {1.5, 0.0}};
    const PcaBasis b = fit_pca(s, 0.95);
    CHECK(b.rank() == 1);
    // 1/N variance of the x coordinates.
    double mean = 0.0, var = 0.0;
    for (const auto& v : s) mean += v[0] / 5.0;
    for (const auto& v : s) var += (v[0] - mean) * (v[0] - mean) / 5.0;
    CHECK(std::abs(b.eigenvalues()[0] - var) < 1e-12);
    CHECK(std::abs(b.eigenvalues()[1]) < 1e-12);
    CHECK(std::abs(std::abs(b.components()(0, 0)) - 1.0) < 1e-12);
}

TEST_CASE("variance target 1 on full-rank data keeps every component") {
    Rng rng(1);
    const auto s = anisotropic(rng, 200, 6);
    CHECK(fit_pca(s, 1.0).rank() == 6);
}

TEST_CASE("fit errors") {
    CHECK_THROWS_AS(fit_pca(std::vector<Vec>{{1.0, 2.0}}, 0.9), std::invalid_argument);
    CHECK_THROWS_AS(fit_pca(std::vector<Vec>{{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}}, 0.9), DegenerateFit);
    CHECK_THROWS_AS(fit_pca(std::vector<Vec>{{1.0, 2.0}, {1.0}}, 0.9), std::invalid_argument);
    CHECK_THROWS_AS(fit_pca(std::vector<Vec>{{1.0}, {2.0}}, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(fit_pca(std::vector<Vec>{{1.0}, {2.0}}, 1.5), std::invalid_argument);
    // Rank-1 data cannot supply a second component.
    CHECK_THROWS_AS(fit_pca_rank(std::vector<Vec>{{0.0, 0.0}, {1.0, 0.0}, {2.0, 0.0}}, 2), DegenerateFit);
}

TEST_CASE("fitted basis is orthonormal with a descending non-negative spectrum") {
    Rng rng(2);
    const auto s = anisotropic(rng, 300, 10);
    const PcaBasis b = fit_pca(s, 0.9);
    const Mat& p = b.components();
    for (std::size_t a = 0; a < b.rank(); ++a)
        for (std::size_t c = 0; c < b.rank(); ++c) {
            double g = 0.0;
            for (std::size_t i = 0; i < b.dim(); ++i) g += p(i, a) * p(i, c);
            CHECK(std::abs(g - (a == c ? 1.0 : 0.0)) < 1e-8);
        }
    for (std::size_t j = 0; j < b.dim(); ++j) {
        CHECK(b.eigenvalues()[j] >= -1e-10);
        if (j > 0) CHECK(b.eigenvalues()[j - 1] >= b.eigenvalues()[j]);
    }
}

TEST_CASE("project and reconstruct") {
    Rng rng(3);
    const auto s = anisotropic(rng, 300, 8);
    const PcaBasis b = fit_pca(s, 0.9);
    const PcaBasis full = fit_pca_rank(s, 8);

    for (double c : project(b, b.mean())) CHECK(c == 0.0);
    CHECK(reconstruct(b, Vec(b.rank(), 0.0)) == b.mean());

    Vec e1(b.rank(), 0.0);
    e1[0] = 1.0;
    const Vec r1 = reconstruct(b, e1);
    for (std::size_t i = 0; i < b.dim(); ++i) CHECK(std::abs(r1[i] - (b.mean()[i] + b.components()(i, 0))) < 1e-15);

    for (const auto& v : s) CHECK(max_abs_diff(reconstruct(full, project(full, v)), v) < 1e-8);

    Vec c(b.rank());
    for (auto& x : c) x = rng.normal();
    CHECK(max_abs_diff(project(b, reconstruct(b, c)), c) < 1e-8);

    const Vec once = reconstruct(b, project(b, s[0]));
    const Vec twice = reconstruct(b, project(b, once));
    CHECK(max_abs_diff(once, twice) < 1e-8);
    CHECK(out_of_subspace_norm(b, once) < 1e-8);

    CHECK_THROWS_AS(project(b, Vec(3, 0.0)), std::invalid_argument);
    CHECK_THROWS_AS(reconstruct(b, Vec(b.rank() + 1, 0.0)), std::invalid_argument);
}

TEST_CASE("points from a planted affine subspace reconstruct exactly") {
    Rng rng(4);
    const std::size_t d = 12, k = 3;
    Mat q(d, d);
    for (auto& x : q.data()) x = rng.normal();
    const Mat rot = sym_eig(matmul(q, q.transposed())).vectors;
    Vec offset(d);
    for (auto& x : offset) x = rng.normal();
    std::vector<Vec> s;
    for (int n = 0; n < 100; ++n) {
        Vec v = offset;
        for (std::size_t j = 0; j < k; ++j) {
            const double a = (j + 1.0) * rng.normal();
            for (std::size_t i = 0; i < d; ++i) v[i] += a * rot(i, j);
        }
        s.push_back(v);
    }
    const PcaBasis b = fit_pca_rank(s, k);
    for (const auto& v : s) CHECK(max_abs_diff(reconstruct(b, project(b, v)), v) < 1e-8);
    CHECK(fit_pca(s, 1.0).rank() == k);
}

TEST_CASE("rel_mse special values") {
    std::vector<Vec> s{{std::sqrt(3.0), 0.0}, {-std::sqrt(3.0), 0.0}, {0.0, 1.0}, {0.0, -1.0}};
    const PcaBasis b = fit_pca_rank(s, 1);
    CHECK(std::abs(rel_mse(b, s) - 0.25) < 1e-12);
    CHECK(std::abs(spectral_rel_mse(b) - 0.25) < 1e-12);
    CHECK(std::abs(rel_mse(fit_pca_rank(s, 2), s)) < 1e-12);
    CHECK_THROWS_AS(rel_mse(b, std::vector<Vec>{}), std::invalid_argument);
    CHECK_THROWS_AS(rel_mse(b, std::vector<Vec>{b.mean()}), std::invalid_argument);
}

TEST_CASE("spectral identity, monotonicity, and the choose-k bound") {
    Rng rng(5);
    const auto s = anisotropic(rng, 500, 16);
    const PcaBasis full = fit_pca_rank(s, 16);
    double prev = 2.0;
    for (std::size_t k = 1; k <= 16; ++k) {
        const PcaBasis b = full.truncated(k);
        const double r = rel_mse(b, s);
        CHECK(std::abs(r - spectral_rel_mse(b)) < 1e-6);
        CHECK(r <= prev + 1e-12);
        prev = r;
    }
    for (double target : {0.5, 0.8, 0.95, 0.99}) {
        const PcaBasis b = fit_pca(s, target);
        CHECK(rel_mse(b, s) <= 1.0 - target + 1e-9);
        if (b.rank() > 1) CHECK(rel_mse(full.truncated(b.rank() - 1), s) > 1.0 - target - 1e-9);
    }
}

TEST_CASE("basis files round-trip bit-exactly and reject corruption") {
    Rng rng(6);
    const PcaBasis b = fit_pca(anisotropic(rng, 100, 5), 0.9);
    const auto path = std::filesystem::temp_directory_path() / "gap_test_basis.bin";
    b.save(path);
    CHECK(PcaBasis::load(path) == b);

    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('X');
    }
    CHECK_THROWS(PcaBasis::load(path));
    std::filesystem::resize_file(path, 10);
    CHECK_THROWS(PcaBasis::load(path));
    std::filesystem::remove(path);
    CHECK_THROWS(PcaBasis::load(path));
}
