#pragma once

// Branched reverse diffusion: predictor-corrector for continuous time,
// ancestral sampling for discrete time, plus cached multi-class sampling,
// hybrids and transmutation.
//
// Time runs on a descending grid T = g_0 > g_1 > ... > g_K = 0. Step k moves
// the state from g_k to g_{k+1} and is owned by the branch whose interval
// contains g_{k+1}. For continuous models the grid is the uniform grid refined
// by every branch boundary of the hierarchy, so branch points are always grid
// points; discrete models use the integer steps.
//
// Noise comes from per-chain streams keyed by (seed, task, chain). A chain
// keeps its streams while consecutive steps share a task and reseeds when the
// task changes, so cached and per-class sampling produce identical states.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "denoiser.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "hierarchy.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bdiff {

struct SampleConfig {
    std::size_t steps = 1000;
    double snr = 0.16;
    std::uint64_t seed = 0;
    bool corrector = true;
};

/// A batch of chains in flight (or finished): states, the time they sit at,
/// and the noise streams that will continue them.
struct ChainState {
    Matrix x;
    double t = 0.0;
    std::vector<Rng> streams;
    std::optional<std::size_t> task;  // task the streams belong to
    std::string stream = "sample";     // namespace for streams opened on task changes
};

struct SampleBatch {
    Matrix x;
    std::string cls;
    double t = 0.0;
    std::uint64_t seed = 0;
    ChainState state;  // provenance; continue sampling from here
};

struct Visit {
    std::size_t task;
    double t;
    friend bool operator==(const Visit&, const Visit&) = default;
};

/// Per-run accounting of denoiser steps.
struct SampleStats {
    std::size_t steps = 0;
    std::map<std::string, std::vector<Visit>> visits;  // filled when record_visits
    bool record_visits = false;
};

struct Step {
    double t;
    double t_next;
};

/// Descending time grid for a hierarchy.
inline std::vector<double> time_grid(const BranchHierarchy& h, const NoiseProcess& process, std::size_t steps) {
    if (steps < 1) throw DomainError("sampling needs steps >= 1");
    const double T = process.horizon();
    std::vector<double> g;
    if (process.discrete()) {
        for (long t = static_cast<long>(T); t >= 0; --t) g.push_back(static_cast<double>(t));
        return g;
    }
    for (std::size_t k = 0; k <= steps; ++k) g.push_back(T * static_cast<double>(k) / static_cast<double>(steps));
    const double tol = 1e-9 * T;
    for (double b : h.boundaries()) {
        if (b <= 0.0 || b >= T) continue;
        auto it = std::lower_bound(g.begin(), g.end(), b);
        const bool near_above = it != g.end() && std::abs(*it - b) <= tol;
        const bool near_below = it != g.begin() && std::abs(*(it - 1) - b) <= tol;
        if (near_above)
            *it = b;
        else if (near_below)
            *(it - 1) = b;
        else
            g.insert(it, b);
    }
    std::reverse(g.begin(), g.end());
    return g;
}

/// Grid steps whose owner time t_next lies in [lo, hi).
inline std::vector<Step> steps_between(const std::vector<double>& grid, double lo, double hi) {
    std::vector<Step> out;
    for (std::size_t k = 0; k + 1 < grid.size(); ++k)
        if (grid[k + 1] >= lo && grid[k + 1] < hi) out.push_back({grid[k], grid[k + 1]});
    return out;
}

namespace detail {

inline std::vector<Rng> fresh_streams(std::uint64_t seed, std::size_t task, std::size_t n,
                                      std::string_view name = "sample") {
    std::vector<Rng> s;
    s.reserve(n);
    for (std::size_t i = 0; i < n; ++i) s.emplace_back(seed, name, std::initializer_list<std::uint64_t>{task, i});
    return s;
}

inline Matrix noise(std::vector<Rng>& streams, std::size_t dim) {
    Matrix z(streams.size(), dim);
    for (std::size_t i = 0; i < streams.size(); ++i)
        for (std::size_t j = 0; j < dim; ++j) z(i, j) = static_cast<float>(streams[i].normal());
    return z;
}

inline double mean_row_norm(const Matrix& m) {
    if (m.rows == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
        double s = 0.0;
        for (float v : m.row(i)) s += static_cast<double>(v) * v;
        total += std::sqrt(s);
    }
    return total / static_cast<double>(m.rows);
}

inline void check_finite(const Matrix& x, double t, std::size_t task) {
    for (float v : x.data)
        if (!std::isfinite(v))
            throw NumericError("non-finite sampler state at t = " + std::to_string(t) + " on task " +
                               std::to_string(task));
}

}  // namespace detail

/// Predictor-corrector update with explicit noise: an Euler-Maruyama step of
/// the reverse SDE from t to t - dt with noise z_pred, then one Langevin step
/// at t - dt with noise z_corr. The corrector adds no noise when t - dt
/// reaches 0.
inline Matrix pc_update(const Denoiser& model, std::size_t task, const Matrix& x, double t, double dt,
                        const SampleConfig& cfg, const Matrix& z_pred, const Matrix& z_corr) {
    if (t - dt < -1e-12) throw DomainError("pc_step would step below t = 0");
    const auto& sde = model.process().sde();
    const double beta = sde.beta(t);

    Matrix out = x;
    if (dt > 0.0) {
        const Matrix s = model.score(x, t, task);
        const double g = std::sqrt(beta * dt);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double xi = x.data[i];
            out.data[i] = static_cast<float>(xi + (0.5 * beta * xi + beta * s.data[i]) * dt + g * z_pred.data[i]);
        }
    }
    if (cfg.corrector) {
        const double t_next = std::max(0.0, t - dt);
        const bool last = t_next <= 1e-12 * sde.horizon;
        const Matrix s = model.score(out, t_next, task);
        const double grad_norm = detail::mean_row_norm(s);
        const double noise_norm = detail::mean_row_norm(z_corr);
        const double step = grad_norm > 0.0 ? 2.0 * std::pow(cfg.snr * noise_norm / grad_norm, 2.0) : 0.0;
        const double amp = last ? 0.0 : std::sqrt(2.0 * step);
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] = static_cast<float>(out.data[i] + step * s.data[i] + amp * z_corr.data[i]);
    }
    detail::check_finite(out, t, task);
    return out;
}

/// pc_update with noise drawn from the per-chain streams (predictor draws
/// first, then corrector draws).
inline Matrix pc_step(const Denoiser& model, std::size_t task, const Matrix& x, double t, double dt,
                      const SampleConfig& cfg, std::vector<Rng>& streams) {
    if (streams.size() != x.rows) throw ShapeError("one noise stream per chain required");
    const Matrix z_pred = dt > 0.0 ? detail::noise(streams, x.cols) : Matrix(x.rows, x.cols);
    const Matrix z_corr = cfg.corrector ? detail::noise(streams, x.cols) : Matrix(x.rows, x.cols);
    return pc_update(model, task, x, t, dt, cfg, z_pred, z_corr);
}

/// Ancestral step x_t -> x_{t-1} with the noise-prediction head `task`.
inline Matrix ddpm_step(const Denoiser& model, std::size_t task, const Matrix& x, int t, std::vector<Rng>& streams) {
    const auto& sched = model.process().ddpm();
    const auto& c = sched.at(t);
    const Matrix eps = model.predict_noise(x, static_cast<double>(t), task);
    const Matrix z = detail::noise(streams, x.cols);
    const double a = 1.0 / std::sqrt(c.alpha);
    const double k = c.beta / std::sqrt(1.0 - c.alpha_bar);
    const double sigma = t > 1 ? std::sqrt(c.beta) : 0.0;
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = static_cast<float>(a * (x.data[i] - k * eps.data[i]) + sigma * z.data[i]);
    detail::check_finite(out, t, task);
    return out;
}

/// Prior draws x_T ~ N(0, I) for n chains from per-chain prior streams.
inline ChainState prior_state(std::size_t n, std::size_t dim, double horizon, std::uint64_t seed) {
    ChainState s;
    s.x = Matrix(n, dim);
    s.t = horizon;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(seed, "prior", {i});
        const auto v = prior_sample(dim, rng);
        std::copy(v.begin(), v.end(), s.x.row(i).begin());
    }
    return s;
}

/// Runs the chains of class `c` from state.t down to `t_stop` along the class's
/// branch path.
inline void reverse_diffuse(const Denoiser& model, const BranchHierarchy& h, std::size_t c, ChainState& state,
                            double t_stop, const SampleConfig& cfg, SampleStats* stats = nullptr,
                            const std::vector<double>* grid_hint = nullptr) {
    if (model.kind() != ModelKind::branched) throw StateError("branched sampling on a label-guided model");
    const std::vector<double> own = grid_hint ? std::vector<double>{} : time_grid(h, model.process(), cfg.steps);
    const auto& grid = grid_hint ? *grid_hint : own;
    const auto steps = steps_between(grid, t_stop, state.t);
    const std::size_t n = state.x.rows;
    for (const auto& st : steps) {
        const std::size_t task = h.lookup(c, st.t_next).task;
        if (task >= model.head_count()) throw LookupError("hierarchy task " + std::to_string(task) + " has no head");
        if (!state.task || *state.task != task) {
            state.streams = detail::fresh_streams(cfg.seed, task, n, state.stream);
            state.task = task;
        }
        if (n > 0) {
            if (model.process().discrete())
                state.x = ddpm_step(model, task, state.x, static_cast<int>(std::lround(st.t)), state.streams);
            else
                state.x = pc_step(model, task, state.x, st.t, st.t - st.t_next, cfg, state.streams);
        }
        state.t = st.t_next;
        if (stats) {
            ++stats->steps;
            if (stats->record_visits) stats->visits[h.classes()[c]].push_back({task, st.t});
        }
    }
}

/// n samples of one class: prior draws at T, reversed to 0 with per-step
/// branch lookup.
inline SampleBatch sample_class(const Denoiser& model, const BranchHierarchy& h, const std::string& cls,
                                std::size_t n, const SampleConfig& cfg, SampleStats* stats = nullptr) {
    const std::size_t c = h.class_index(cls);
    SampleBatch out;
    out.cls = cls;
    out.seed = cfg.seed;
    out.state = prior_state(n, model.dim(), model.process().horizon(), cfg.seed);
    reverse_diffuse(model, h, c, out.state, 0.0, cfg, stats);
    out.x = out.state.x;
    out.t = out.state.t;
    return out;
}

/// Discrete-time counterpart; identical machinery on the integer grid.
inline SampleBatch ddpm_sample_class(const Denoiser& model, const BranchHierarchy& h, const std::string& cls,
                                     std::size_t n, const SampleConfig& cfg, SampleStats* stats = nullptr) {
    if (!model.process().discrete()) throw StateError("ddpm sampling requires a discrete-time model");
    return sample_class(model, h, cls, n, cfg, stats);
}

/// All classes at once, integrating each branch exactly once. Branches run in
/// descending start order; each child starts from its parent's cached end state.
inline std::map<std::string, SampleBatch> sample_all_cached(const Denoiser& model, const BranchHierarchy& h,
                                                            std::size_t n, const SampleConfig& cfg,
                                                            SampleStats* stats = nullptr) {
    const auto& br = h.branches();
    std::vector<std::size_t> order(br.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (br[a].start != br[b].start) return br[a].start > br[b].start;
        if (br[a].end != br[b].end) return br[a].end > br[b].end;
        return br[a].classes.size() > br[b].classes.size();
    });
    const auto grid = time_grid(h, model.process(), cfg.steps);
    const std::size_t root = h.root();

    std::map<std::size_t, ChainState> cache;  // branch index -> state at its start
    std::map<std::string, SampleBatch> out;
    for (std::size_t bi : order) {
        const auto& b = br[bi];
        ChainState state;
        if (bi == root) {
            state = prior_state(n, model.dim(), model.process().horizon(), cfg.seed);
        } else {
            std::optional<std::size_t> parent;
            for (std::size_t p = 0; p < br.size(); ++p) {
                if (p == bi || br[p].start != b.end || br[p].classes.size() <= b.classes.size()) continue;
                if (!std::includes(br[p].classes.begin(), br[p].classes.end(), b.classes.begin(), b.classes.end()))
                    continue;
                if (!parent || br[p].classes.size() < br[*parent].classes.size()) parent = p;
            }
            if (!parent || !cache.count(*parent)) throw StateError("branch has no cached parent state");
            state = cache.at(*parent);
        }
        // Any class of the branch resolves to this branch on its interval.
        if (b.end > b.start) {
            const auto steps = steps_between(grid, b.start, b.end);
            (void)steps;
            reverse_diffuse(model, h, b.classes.front(), state, b.start, cfg, nullptr, &grid);
            if (stats) {
                stats->steps += steps.size();
                if (stats->record_visits)
                    for (const auto& st : steps)
                        for (auto c : b.classes) stats->visits[h.classes()[c]].push_back({b.task, st.t});
            }
        }
        if (b.classes.size() == 1 && b.start == 0.0) {
            SampleBatch sb;
            sb.cls = h.classes()[b.classes.front()];
            sb.seed = cfg.seed;
            sb.x = state.x;
            sb.t = state.t;
            sb.state = state;
            out.emplace(sb.cls, std::move(sb));
        } else {
            cache.emplace(bi, std::move(state));
        }
    }
    return out;
}

/// Number of denoiser steps for cached and per-class sampling of every class.
struct StepLedger {
    std::size_t cached = 0;
    std::size_t uncached = 0;
};

inline StepLedger step_ledger(const BranchHierarchy& h, const NoiseProcess& process, std::size_t steps) {
    const auto grid = time_grid(h, process, steps);
    StepLedger l;
    for (const auto& b : h.branches())
        if (b.end > b.start) l.cached += steps_between(grid, b.start, b.end).size();
    l.uncached = h.classes().size() * (grid.size() - 1);
    return l;
}

/// Reverse diffusion from T down to the shared branch point of two classes.
inline SampleBatch hybrid(const Denoiser& model, const BranchHierarchy& h, const std::string& c1,
                          const std::string& c2, std::size_t n, const SampleConfig& cfg,
                          SampleStats* stats = nullptr) {
    const std::size_t a = h.class_index(c1);
    const double tb = lca_branch_point(h, a, h.class_index(c2));
    SampleBatch out;
    out.cls = c1 + "|" + c2;
    out.seed = cfg.seed;
    out.state = prior_state(n, model.dim(), model.process().horizon(), cfg.seed);
    reverse_diffuse(model, h, a, out.state, tb, cfg, stats);
    out.x = out.state.x;
    out.t = tb;
    return out;
}

/// Finishes chains (e.g. a hybrid) down the path of class `cls`.
inline SampleBatch continue_sampling(const Denoiser& model, const BranchHierarchy& h, const std::string& cls,
                                     ChainState state, const SampleConfig& cfg, SampleStats* stats = nullptr) {
    SampleBatch out;
    out.cls = cls;
    out.seed = cfg.seed;
    reverse_diffuse(model, h, h.class_index(cls), state, 0.0, cfg, stats);
    out.x = state.x;
    out.t = state.t;
    out.state = std::move(state);
    return out;
}

/// Forward-diffuses objects of class c1 to the branch point shared with c2,
/// then reverse-diffuses them down c2's path. Rows stay paired with the input.
inline SampleBatch transmute(const Denoiser& model, const BranchHierarchy& h, const Matrix& x1,
                             const std::string& c1, const std::string& c2, const SampleConfig& cfg) {
    const std::size_t a = h.class_index(c1);
    const std::size_t b = h.class_index(c2);
    if (a == b) throw DomainError("transmutation needs two distinct classes");
    if (x1.cols != model.dim()) throw ShapeError("transmute input dim mismatch");
    const double tb = lca_branch_point(h, a, b);
    ChainState state;
    state.x = Matrix(x1.rows, x1.cols);
    state.t = tb;
    state.stream = "transmute.reverse";
    for (std::size_t i = 0; i < x1.rows; ++i) {
        Rng rng(cfg.seed, "transmute", {i});
        const auto p = perturb(model.process(), x1.row(i), tb, rng);
        std::copy(p.x_t.begin(), p.x_t.end(), state.x.row(i).begin());
    }
    return continue_sampling(model, h, c2, std::move(state), cfg);
}

// ---------------------------------------------------------------------------
// Label-guided baseline sampling (single head, label input).

inline SampleBatch sample_label_guided(const Denoiser& model, const std::vector<std::string>& classes,
                                       const std::string& cls, std::size_t n, const SampleConfig& cfg) {
    if (model.kind() != ModelKind::label_guided) throw StateError("label-guided sampling on a branched model");
    auto it = std::find(classes.begin(), classes.end(), cls);
    if (it == classes.end()) throw LookupError("unknown class '" + cls + "'");
    const std::size_t label = static_cast<std::size_t>(it - classes.begin());
    const double T = model.process().horizon();
    SampleBatch out;
    out.cls = cls;
    out.seed = cfg.seed;
    out.state = prior_state(n, model.dim(), T, cfg.seed);
    auto& st = out.state;
    st.streams = detail::fresh_streams(cfg.seed, label, n);
    st.task = label;
    const BranchHierarchy flat({cls}, T, {{0.0, T, {0}, label}});
    const auto grid = time_grid(flat, model.process(), cfg.steps);
    for (const auto& s : steps_between(grid, 0.0, T)) {
        if (n > 0) {
            if (model.process().discrete())
                st.x = ddpm_step(model, label, st.x, static_cast<int>(std::lround(s.t)), st.streams);
            else
                st.x = pc_step(model, label, st.x, s.t, s.t - s.t_next, cfg, st.streams);
        }
        st.t = s.t_next;
    }
    out.x = st.x;
    out.t = st.t;
    return out;
}

/// CSV: feature_0..feature_{d-1},class,t,seed
inline void write_samples_csv(std::ostream& os, std::size_t dim, const std::vector<const SampleBatch*>& batches) {
    for (std::size_t j = 0; j < dim; ++j) os << "feature_" << j << ',';
    os << "class,t,seed\n";
    char buf[48];
    for (const auto* b : batches) {
        for (std::size_t i = 0; i < b->x.rows; ++i) {
            for (std::size_t j = 0; j < dim; ++j) {
                std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(b->x(i, j)));
                os << buf << ',';
            }
            std::snprintf(buf, sizeof(buf), "%.17g", b->t);
            os << b->cls << ',' << buf << ',' << b->seed << '\n';
        }
    }
}

}  // namespace bdiff
