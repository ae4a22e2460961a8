#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bdiff/evaluation.hpp"
#include "bdiff/rng.hpp"

using namespace bdiff;

namespace {

GaussianSummary summary(Eigen::VectorXd mean, Eigen::MatrixXd cov) {
    GaussianSummary g;
    g.mean = std::move(mean);
    g.cov = std::move(cov);
    g.count = 100;
    return g;
}

GaussianSummary random_gaussian(std::size_t d, Rng& rng) {
    Eigen::VectorXd m(d);
    Eigen::MatrixXd a(d, d);
    for (std::size_t i = 0; i < d; ++i) {
        m(i) = rng.normal();
        for (std::size_t j = 0; j < d; ++j) a(i, j) = rng.normal();
    }
    return summary(m, a * a.transpose() + 0.05 * Eigen::MatrixXd::Identity(d, d));
}

// Optimal matching of two equal-size samples by trying every permutation.
double brute_w1(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<std::size_t> perm(b.size());
    std::iota(perm.begin(), perm.end(), 0);
    double best = INFINITY;
    do {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[perm[i]]);
        best = std::min(best, s / static_cast<double>(a.size()));
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

// Integral of |Fa^-1(u) - Fb^-1(u)| on the common refinement of both step functions.
double quantile_w1(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const std::size_t cells = a.size() * b.size();
    double s = 0.0;
    for (std::size_t k = 0; k < cells; ++k) {
        const double u = (static_cast<double>(k) + 0.5) / static_cast<double>(cells);
        const double qa = a[static_cast<std::size_t>(u * static_cast<double>(a.size()))];
        const double qb = b[static_cast<std::size_t>(u * static_cast<double>(b.size()))];
        s += std::abs(qa - qb);
    }
    return s / static_cast<double>(cells);
}

Matrix from_rows(std::size_t cols, std::vector<float> v) {
    const std::size_t rows = v.size() / cols;
    return Matrix(rows, cols, std::move(v));
}

}  // namespace

TEST_CASE("Frechet distance closed forms") {
    Eigen::VectorXd m1(1), m2(1);
    Eigen::MatrixXd c1(1, 1), c2(1, 1);
    m1 << 0.5;
    m2 << -1.0;
    c1 << 4.0;
    c2 << 0.25;
    // 1-D: (m1 - m2)^2 + (s1 - s2)^2
    CHECK(frechet_distance(summary(m1, c1), summary(m2, c2)) == doctest::Approx(2.25 + 2.25));

    Eigen::VectorXd z = Eigen::VectorXd::Zero(3);
    Eigen::MatrixXd a = Eigen::Vector3d(1.0, 4.0, 9.0).asDiagonal();
    Eigen::MatrixXd b = Eigen::Vector3d(4.0, 1.0, 0.0).asDiagonal();
    CHECK(frechet_distance(summary(z, a), summary(z, b)) == doctest::Approx(1.0 + 1.0 + 9.0));
    CHECK(frechet_distance(summary(z, a), summary(z, a)) == doctest::Approx(0.0).epsilon(1e-12));

    Eigen::VectorXd two(2);
    two << 1.0, 2.0;
    CHECK_THROWS_AS(frechet_distance(summary(z, a), summary(two, Eigen::MatrixXd::Identity(2, 2))), ShapeError);
}

TEST_CASE("Frechet distance is a squared metric") {
    Rng rng(1);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t d = 1 + rng.index(5);
        const auto x = random_gaussian(d, rng);
        const auto y = random_gaussian(d, rng);
        const auto w = random_gaussian(d, rng);
        const double xy = frechet_distance(x, y);
        CHECK(xy >= 0.0);
        CHECK(xy == doctest::Approx(frechet_distance(y, x)).epsilon(1e-8));
        CHECK(frechet_distance(x, x) == doctest::Approx(0.0).scale(1.0).epsilon(1e-8));
        const double direct = std::sqrt(xy);
        const double detour = std::sqrt(frechet_distance(x, w)) + std::sqrt(frechet_distance(w, y));
        CHECK(direct <= detour + 1e-8);
    }
}

TEST_CASE("Frechet distance on sample matrices") {
    Rng rng(2);
    Matrix a(500, 3);
    for (auto& v : a.data) v = static_cast<float>(rng.normal());
    CHECK(frechet_distance(a, a) == doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
    Matrix shifted = a;
    for (std::size_t i = 0; i < shifted.rows; ++i) shifted(i, 0) += 2.0f;
    CHECK(frechet_distance(a, shifted) == doctest::Approx(4.0).epsilon(1e-5));
    CHECK_THROWS_AS(gaussian_fit(Matrix(1, 3)), DataError);
    Matrix bad = a;
    bad(3, 1) = NAN;
    CHECK_THROWS_AS(gaussian_fit(bad), DataError);

    const auto g = gaussian_fit(from_rows(2, {0, 0, 2, 0, 0, 2, 2, 2}));
    CHECK(g.mean(0) == doctest::Approx(1.0));
    CHECK(g.cov(0, 0) == doctest::Approx(4.0 / 3.0));
    CHECK(g.cov(0, 1) == doctest::Approx(0.0));
    CHECK(g.count == 4);
}

TEST_CASE("matrix square roots") {
    Rng rng(3);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t d = 1 + rng.index(6);
        const auto x = random_gaussian(d, rng);
        const auto y = random_gaussian(d, rng);
        const Eigen::MatrixXd r = psd_sqrt(x.cov);
        CHECK((r * r - x.cov).norm() <= 1e-9 * x.cov.norm());
        CHECK((r - r.transpose()).norm() <= 1e-10 * r.norm());
        const Eigen::MatrixXd p = product_sqrt(x.cov, y.cov);
        const Eigen::MatrixXd prod = x.cov * y.cov;
        CHECK((p * p - prod).norm() <= 1e-7 * prod.norm());
    }
    Eigen::MatrixXd neg = Eigen::MatrixXd::Identity(2, 2);
    neg(1, 1) = -1.0;
    CHECK_THROWS_AS(psd_sqrt(neg), NumericError);
    Eigen::MatrixXd tiny = Eigen::MatrixXd::Identity(2, 2);
    tiny(1, 1) = -1e-12;
    CHECK(psd_sqrt(tiny)(1, 1) == 0.0);
    CHECK_THROWS_AS(product_sqrt(Eigen::MatrixXd::Zero(2, 2), Eigen::MatrixXd::Identity(2, 2)), NumericError);
}

TEST_CASE("one-dimensional Wasserstein distance") {
    Rng rng(4);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t na = 1 + rng.index(6);
        const std::size_t nb = 1 + rng.index(6);
        std::vector<double> a(na), b(nb), c(na);
        for (auto& v : a) v = rng.normal();
        for (auto& v : b) v = rng.normal();
        for (auto& v : c) v = rng.normal();
        CHECK(wasserstein1_feature(a, c) == doctest::Approx(brute_w1(a, c)).epsilon(1e-12));
        CHECK(wasserstein1_feature(a, b) == doctest::Approx(quantile_w1(a, b)).epsilon(1e-9));
        CHECK(wasserstein1_feature(a, b) == doctest::Approx(wasserstein1_feature(b, a)).epsilon(1e-12));
    }
    CHECK(wasserstein1_feature({0.0, 1.0}, {0.0, 1.0}) == 0.0);
    CHECK(wasserstein1_feature({0.0}, {3.0}) == 3.0);
    CHECK(wasserstein1_feature({0.0, 2.0}, {1.0}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(wasserstein1_feature({}, {1.0}), DataError);

    const auto per = wasserstein1_features(from_rows(2, {0, 0, 1, 1}), from_rows(2, {0, 5, 1, 6}));
    REQUIRE(per.size() == 2);
    CHECK(per[0] == 0.0);
    CHECK(per[1] == doctest::Approx(5.0));
    CHECK_THROWS_AS(wasserstein1_features(Matrix(2, 2), Matrix(2, 3)), ShapeError);
}

TEST_CASE("correlations") {
    const std::vector<double> x = {1, 2, 3};
    CHECK(*pearson(x, std::vector<double>{1, 3, 2}) == doctest::Approx(0.5));
    CHECK(*pearson(x, std::vector<double>{2, 4, 6}) == doctest::Approx(1.0));
    CHECK(*pearson(x, std::vector<double>{-1, -2, -3}) == doctest::Approx(-1.0));
    CHECK(!pearson(x, std::vector<double>{7, 7, 7}));
    CHECK_THROWS_AS(pearson(x, std::vector<double>{1, 2}), DataError);
    CHECK_THROWS_AS(pearson(std::vector<double>{1}, std::vector<double>{1}), DataError);

    const auto c = feature_correlations(from_rows(3, {1, 5, 2, 2, 5, 4, 3, 5, 6}));
    CHECK(*c(0, 0) == 1.0);
    CHECK(*c(0, 2) == doctest::Approx(1.0));
    CHECK(*c(2, 0) == *c(0, 2));
    CHECK(!c(1, 1));
    CHECK(!c(0, 1));
    CHECK(c.flagged() == std::vector<std::size_t>{1});

    const auto before = from_rows(2, {1, 0, 2, 1, 3, 0});
    const auto after = from_rows(2, {10, 4, 20, 4, 30, 4});
    const auto tc = transmutation_correlation(before, after);
    CHECK(*tc[0] == doctest::Approx(1.0));
    CHECK(!tc[1]);
    CHECK_THROWS_AS(transmutation_correlation(before, Matrix(2, 2)), DataError);
}

TEST_CASE("metrics report") {
    Rng rng(5);
    Matrix a(50, 2), b(60, 2);
    for (auto& v : a.data) v = static_cast<float>(rng.normal());
    for (auto& v : b.data) v = static_cast<float>(rng.normal());
    const auto r = metrics_report({{"x", a}}, {{"x", b}, {"y", a}});
    const auto& x = r["classes"]["x"];
    CHECK(x["n_generated"] == 50);
    CHECK(x["n_reference"] == 60);
    CHECK(x["frechet"].get<double>() == doctest::Approx(frechet_distance(a, b)));
    CHECK(x["wasserstein1"].size() == 2);
    CHECK(x["correlation_generated"][0][0] == 1.0);
    CHECK(x["flagged_reference"].empty());
    CHECK(!r["classes"].contains("y"));
    CHECK(metrics_report({{"x", a}}, {{"x", a}})["classes"]["x"]["frechet"].get<double>() ==
          doctest::Approx(0.0).scale(1.0).epsilon(1e-9));
    CHECK_THROWS_AS(metrics_report({{"z", a}}, {{"x", b}}), LookupError);
    CHECK_THROWS_AS(metrics_report({{"x", a}}, {{"x", Matrix(5, 3)}}), ShapeError);
}
