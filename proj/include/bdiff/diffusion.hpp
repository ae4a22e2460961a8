#pragma once

// Forward noising processes with closed-form Gaussian marginals.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace bdiff {

/// Variance-preserving SDE with linear rate beta(t) = beta_min + beta_slope * t.
struct SdeSpec {
    double beta_min = 0.1;
    double beta_slope = 0.9;
    double horizon = 1.0;

    void validate() const {
        if (!(beta_min > 0.0) || !(beta_slope >= 0.0) || !(horizon > 0.0))
            throw DomainError("SdeSpec requires beta_min > 0, beta_slope >= 0, horizon > 0");
    }

    double beta(double t) const { return beta_min + beta_slope * t; }
};

inline void check_time(double t, double horizon) {
    if (!(t >= 0.0 && t <= horizon))
        throw DomainError("time " + std::to_string(t) + " outside [0, " + std::to_string(horizon) + "]");
}

/// Integral of beta over [0, t].
inline double integrated_beta(const SdeSpec& spec, double t) {
    check_time(t, spec.horizon);
    return spec.beta_min * t + 0.5 * spec.beta_slope * t * t;
}

struct MarginalCoefs {
    double mean_coef = 1.0;
    double std = 0.0;
};

inline MarginalCoefs marginal(const SdeSpec& spec, double t) {
    const double b = integrated_beta(spec, t);
    return {std::exp(-0.5 * b), std::sqrt(-std::expm1(-b))};
}

/// Discrete-time Gaussian schedule beta_t = beta_base + beta_step * t, t = 1..steps.
struct DdpmSpec {
    double beta_base = 1e-4;
    double beta_step = 1e-5;
    int steps = 1000;
};

struct DdpmCoefs {
    double beta = 0.0;
    double alpha = 1.0;
    double alpha_bar = 1.0;
};

/// Precomputed products for a DdpmSpec. alpha_bar is accumulated in log space.
class DdpmSchedule {
public:
    DdpmSchedule() : DdpmSchedule(DdpmSpec{}) {}

    explicit DdpmSchedule(const DdpmSpec& spec) : spec_(spec) {
        if (spec.steps < 1) throw DomainError("DdpmSpec requires steps >= 1");
        coefs_.resize(static_cast<std::size_t>(spec.steps) + 1);
        double log_bar = 0.0;
        for (int t = 1; t <= spec.steps; ++t) {
            const double beta = spec.beta_base + spec.beta_step * t;
            if (!(beta > 0.0 && beta < 1.0))
                throw DomainError("DdpmSpec beta_t outside (0, 1) at t = " + std::to_string(t));
            log_bar += std::log1p(-beta);
            coefs_[static_cast<std::size_t>(t)] = {beta, 1.0 - beta, std::exp(log_bar)};
        }
    }

    const DdpmSpec& spec() const { return spec_; }
    int steps() const { return spec_.steps; }

    const DdpmCoefs& at(int t) const {
        if (t < 1 || t > spec_.steps)
            throw DomainError("ddpm step " + std::to_string(t) + " outside [1, " + std::to_string(spec_.steps) + "]");
        return coefs_[static_cast<std::size_t>(t)];
    }

    MarginalCoefs marginal(int t) const {
        if (t == 0) return {1.0, 0.0};
        const double ab = at(t).alpha_bar;
        return {std::sqrt(ab), std::sqrt(1.0 - ab)};
    }

private:
    DdpmSpec spec_;
    std::vector<DdpmCoefs> coefs_;
};

inline DdpmCoefs ddpm_schedule(const DdpmSchedule& schedule, int t) { return schedule.at(t); }

/// Either a continuous VP-SDE or a discrete schedule. Discrete times are integer
/// steps stored as doubles, with horizon equal to the step count.
class NoiseProcess {
public:
    NoiseProcess() : impl_(SdeSpec{}) {}
    NoiseProcess(const SdeSpec& sde) : impl_(sde) { sde.validate(); }
    NoiseProcess(const DdpmSpec& ddpm) : impl_(DdpmSchedule(ddpm)) {}

    bool discrete() const { return std::holds_alternative<DdpmSchedule>(impl_); }

    const SdeSpec& sde() const { return std::get<SdeSpec>(impl_); }
    const DdpmSchedule& ddpm() const { return std::get<DdpmSchedule>(impl_); }

    double horizon() const {
        return discrete() ? static_cast<double>(ddpm().steps()) : sde().horizon;
    }

    MarginalCoefs marginal(double t) const {
        if (!discrete()) return bdiff::marginal(sde(), t);
        check_time(t, horizon());
        return ddpm().marginal(static_cast<int>(std::lround(t)));
    }

private:
    std::variant<SdeSpec, DdpmSchedule> impl_;
};

struct Perturbation {
    std::vector<float> x0;
    std::vector<float> x_t;
    std::vector<float> eps;
    double t = 0.0;
    double mean_coef = 1.0;
    double std = 0.0;
};

inline float affine(double mean_coef, float x0, double std, float eps) {
    return static_cast<float>(mean_coef * static_cast<double>(x0) + std * static_cast<double>(eps));
}

inline void require_finite(std::span<const float> v, const char* what) {
    for (float x : v)
        if (!std::isfinite(x)) throw DataError(std::string(what) + " contains a non-finite value");
}

/// Draws x_t ~ q_t(x | x0). The noise draw is returned for loss computation.
inline Perturbation perturb(const NoiseProcess& process, std::span<const float> x0, double t, Rng& rng) {
    require_finite(x0, "perturb input");
    const auto m = process.marginal(t);
    Perturbation p;
    p.x0.assign(x0.begin(), x0.end());
    p.t = t;
    p.mean_coef = m.mean_coef;
    p.std = m.std;
    p.eps.resize(x0.size());
    p.x_t.resize(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) {
        p.eps[i] = static_cast<float>(rng.normal());
        p.x_t[i] = affine(m.mean_coef, x0[i], m.std, p.eps[i]);
    }
    return p;
}

/// Conditional score of the Gaussian kernel, -eps / std.
inline std::vector<float> score_target(const Perturbation& p) {
    if (!(p.std > 0.0))
        throw DomainError("score target undefined at std = 0 (t too close to 0)");
    std::vector<float> s(p.eps.size());
    for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = static_cast<float>(-static_cast<double>(p.eps[i]) / p.std);
    return s;
}

inline std::vector<float> prior_sample(std::size_t dim, Rng& rng) {
    if (dim == 0) throw DomainError("prior_sample requires dim >= 1");
    std::vector<float> x(dim);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    return x;
}

}  // namespace bdiff
