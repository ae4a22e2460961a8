#pragma once

// Sample-quality metrics on raw features: Frechet distance between fitted
// Gaussians, per-feature Wasserstein-1, Pearson correlation structure.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "json.hpp"
#include "tensor.hpp"

namespace bdiff {

struct GaussianSummary {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    std::size_t count = 0;

    std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
    Eigen::MatrixXd out(m.rows, m.cols);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out(i, j) = m(i, j);
    return out;
}

/// Empirical mean and unbiased covariance of the rows of `x`.
inline GaussianSummary gaussian_fit(const Eigen::MatrixXd& x) {
    if (x.rows() < 2) throw DataError("gaussian_fit needs at least 2 samples");
    if (!x.allFinite()) throw DataError("gaussian_fit: non-finite sample");
    GaussianSummary g;
    g.count = static_cast<std::size_t>(x.rows());
    g.mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - g.mean.transpose();
    g.cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    g.cov = 0.5 * (g.cov + g.cov.transpose());
    return g;
}

inline GaussianSummary gaussian_fit(const Matrix& x) { return gaussian_fit(to_eigen(x)); }

namespace detail {

inline std::string conditioning_report(const Eigen::VectorXd& ev) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "eigenvalues in [%.3e, %.3e]", ev.minCoeff(), ev.maxCoeff());
    return buf;
}

/// Eigen-decomposition of a symmetric matrix, clipping eigenvalues in
/// [-1e-8, 0) to zero. Returns (eigenvalues, eigenvectors).
inline std::pair<Eigen::VectorXd, Eigen::MatrixXd> psd_eigen(const Eigen::MatrixXd& a, const char* what) {
    const Eigen::MatrixXd s = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(s);
    if (es.info() != Eigen::Success) throw NumericError(std::string(what) + ": eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (!std::isfinite(ev(i))) throw NumericError(std::string(what) + ": non-finite eigenvalue");
        if (ev(i) < 0.0) {
            if (ev(i) < -1e-8 * scale)
                throw NumericError(std::string(what) + " is not positive semidefinite; " + conditioning_report(ev));
            ev(i) = 0.0;
        }
    }
    return {ev, es.eigenvectors()};
}

}  // namespace detail

/// Symmetric PSD square root.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
    auto [ev, v] = detail::psd_eigen(a, "matrix");
    return v * ev.cwiseSqrt().asDiagonal() * v.transpose();
}

/// Square root of the product s1 * s2 of two PSD matrices, as
/// s1^{1/2} (s1^{1/2} s2 s1^{1/2})^{1/2} s1^{-1/2}. Requires s1 invertible.
inline Eigen::MatrixXd product_sqrt(const Eigen::MatrixXd& s1, const Eigen::MatrixXd& s2) {
    auto [ev, v] = detail::psd_eigen(s1, "covariance");
    if (ev.minCoeff() <= 0.0) throw NumericError("product_sqrt: singular first factor; " + detail::conditioning_report(ev));
    const Eigen::MatrixXd r = v * ev.cwiseSqrt().asDiagonal() * v.transpose();
    const Eigen::MatrixXd rinv = v * ev.cwiseSqrt().cwiseInverse().asDiagonal() * v.transpose();
    return r * psd_sqrt(r * s2 * r) * rinv;
}

inline double frechet_distance(const GaussianSummary& g1, const GaussianSummary& g2) {
    if (g1.dim() != g2.dim()) throw ShapeError("frechet_distance: dimension mismatch");
    const Eigen::MatrixXd r1 = psd_sqrt(g1.cov);
    auto [ev, v] = detail::psd_eigen(r1 * g2.cov * r1, "covariance product");
    (void)v;
    const double cross = ev.cwiseSqrt().sum();
    const double d = (g1.mean - g2.mean).squaredNorm() + g1.cov.trace() + g2.cov.trace() - 2.0 * cross;
    if (!std::isfinite(d)) throw NumericError("non-finite Frechet distance");
    return std::max(0.0, d);
}

inline double frechet_distance(const Matrix& a, const Matrix& b) {
    return frechet_distance(gaussian_fit(a), gaussian_fit(b));
}

/// Empirical 1-D W1 via the quantile functions. Inputs need not be sorted.
inline double wasserstein1_feature(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) throw DataError("wasserstein1_feature needs nonempty samples");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    if (a.size() == b.size()) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
        return s / na;
    }
    // Merge the CDF breakpoints i/na and j/nb.
    double total = 0.0;
    double u = 0.0;
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < a.size() && j < b.size()) {
        const double ua = static_cast<double>(i + 1) / na;
        const double ub = static_cast<double>(j + 1) / nb;
        const double next = std::min(ua, ub);
        total += (next - u) * std::abs(a[i] - b[j]);
        u = next;
        if (ua <= next) ++i;
        if (ub <= next) ++j;
    }
    return total;
}

inline std::vector<double> column(const Matrix& m, std::size_t j) {
    std::vector<double> c(m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) c[i] = m(i, j);
    return c;
}

inline std::vector<double> wasserstein1_features(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) throw ShapeError("wasserstein1_features: dimension mismatch");
    std::vector<double> out(a.cols);
    for (std::size_t j = 0; j < a.cols; ++j) out[j] = wasserstein1_feature(column(a, j), column(b, j));
    return out;
}

/// Pearson correlation; nullopt when either side has zero variance.
inline std::optional<double> pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DataError("pearson: unpaired lengths");
    if (x.size() < 2) throw DataError("pearson needs at least 2 samples");
    const double n = static_cast<double>(x.size());
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double a = x[i] - mx;
        const double b = y[i] - my;
        sxx += a * a;
        syy += b * b;
        sxy += a * b;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) return std::nullopt;
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// d x d Pearson matrix; undefined entries (zero-variance features) are nullopt.
struct CorrelationMatrix {
    std::size_t dim = 0;
    std::vector<std::optional<double>> values;

    std::optional<double> operator()(std::size_t i, std::size_t j) const { return values[i * dim + j]; }
    std::vector<std::size_t> flagged() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < dim; ++i)
            if (!values[i * dim + i]) out.push_back(i);
        return out;
    }
};

inline CorrelationMatrix feature_correlations(const Matrix& x) {
    if (x.rows < 2) throw DataError("feature_correlations needs at least 2 samples");
    CorrelationMatrix c{x.cols, std::vector<std::optional<double>>(x.cols * x.cols)};
    std::vector<std::vector<double>> cols(x.cols);
    for (std::size_t j = 0; j < x.cols; ++j) cols[j] = column(x, j);
    for (std::size_t i = 0; i < x.cols; ++i) {
        for (std::size_t j = i; j < x.cols; ++j) {
            std::optional<double> r = pearson(cols[i], cols[j]);
            if (r && i == j) r = 1.0;
            c.values[i * x.cols + j] = r;
            c.values[j * x.cols + i] = r;
        }
    }
    return c;
}

/// Per-feature correlation between paired source rows and transmuted rows.
inline std::vector<std::optional<double>> transmutation_correlation(const Matrix& before, const Matrix& after) {
    if (before.rows != after.rows || before.cols != after.cols)
        throw DataError("transmutation_correlation: before/after are not paired");
    std::vector<std::optional<double>> out(before.cols);
    for (std::size_t j = 0; j < before.cols; ++j) out[j] = pearson(column(before, j), column(after, j));
    return out;
}

namespace detail {
inline nlohmann::json opt_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}
}  // namespace detail

/// Metrics report for generated vs reference samples, keyed by class.
inline nlohmann::json metrics_report(const std::map<std::string, Matrix>& generated,
                                     const std::map<std::string, Matrix>& reference) {
    nlohmann::json out = nlohmann::json::object();
    nlohmann::json classes = nlohmann::json::object();
    for (const auto& [name, g] : generated) {
        auto it = reference.find(name);
        if (it == reference.end()) throw LookupError("class '" + name + "' missing from the reference set");
        const Matrix& r = it->second;
        if (g.cols != r.cols) throw ShapeError("dimension mismatch for class '" + name + "'");
        nlohmann::json c;
        c["n_generated"] = g.rows;
        c["n_reference"] = r.rows;
        c["frechet"] = frechet_distance(g, r);
        c["wasserstein1"] = wasserstein1_features(g, r);
        for (const auto* which : {"generated", "reference"}) {
            const auto corr = feature_correlations(std::string(which) == "generated" ? g : r);
            nlohmann::json m = nlohmann::json::array();
            for (std::size_t i = 0; i < corr.dim; ++i) {
                nlohmann::json row = nlohmann::json::array();
                for (std::size_t j = 0; j < corr.dim; ++j) row.push_back(detail::opt_json(corr(i, j)));
                m.push_back(row);
            }
            c[std::string("correlation_") + which] = m;
            c[std::string("flagged_") + which] = corr.flagged();
        }
        classes[name] = c;
    }
    out["classes"] = classes;
    return out;
}

}  // namespace bdiff
