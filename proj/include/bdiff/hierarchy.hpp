#pragma once

// Branch hierarchies: discovery from data, construction, lookup, extension,
// random generation and tree comparison.
//
// A branch (s, t, C) owns the class x time cells {c in C, s <= t' < t}; the
// root additionally owns t' = T. Simultaneous merges produce zero-length
// branches (s == t) which own no cells but keep the tree binary.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "json.hpp"
#include "rng.hpp"

namespace bdiff {

struct Branch {
    double start = 0.0;
    double end = 0.0;
    std::vector<std::size_t> classes;  // sorted indices into BranchHierarchy::classes
    std::size_t task = 0;

    bool contains(std::size_t c) const { return std::binary_search(classes.begin(), classes.end(), c); }
    double length() const { return end - start; }

    friend bool operator==(const Branch&, const Branch&) = default;
};

class BranchHierarchy {
public:
    BranchHierarchy() = default;
    BranchHierarchy(std::vector<std::string> classes, double horizon, std::vector<Branch> branches)
        : classes_(std::move(classes)), horizon_(horizon), branches_(std::move(branches)) {
        for (auto& b : branches_) std::sort(b.classes.begin(), b.classes.end());
    }

    const std::vector<std::string>& classes() const { return classes_; }
    double horizon() const { return horizon_; }
    const std::vector<Branch>& branches() const { return branches_; }
    std::size_t size() const { return branches_.size(); }

    std::size_t class_index(const std::string& name) const {
        for (std::size_t i = 0; i < classes_.size(); ++i)
            if (classes_[i] == name) return i;
        throw LookupError("unknown class '" + name + "'");
    }

    bool has_class(const std::string& name) const {
        return std::find(classes_.begin(), classes_.end(), name) != classes_.end();
    }

    std::size_t task_count() const {
        std::size_t n = 0;
        for (const auto& b : branches_) n = std::max(n, b.task + 1);
        return n;
    }

    /// Index of the root branch (all classes, ends at the horizon).
    std::size_t root() const {
        for (std::size_t i = 0; i < branches_.size(); ++i)
            if (branches_[i].end == horizon_ && branches_[i].classes.size() == classes_.size()) return i;
        throw StateError("hierarchy has no root branch");
    }

    /// Index of the branch owning (c, t).
    std::size_t lookup_index(std::size_t c, double t) const {
        if (c >= classes_.size()) throw LookupError("class index " + std::to_string(c) + " out of range");
        check_time(t, horizon_);
        if (t == horizon_) return root();
        for (std::size_t i = 0; i < branches_.size(); ++i) {
            const auto& b = branches_[i];
            if (b.start <= t && t < b.end && b.contains(c)) return i;
        }
        throw LookupError("no branch owns class '" + classes_[c] + "' at t = " + std::to_string(t));
    }

    const Branch& lookup(std::size_t c, double t) const { return branches_[lookup_index(c, t)]; }

    /// Branches on the class's root-to-leaf chain, ordered by descending time.
    /// Zero-length branches are skipped.
    std::vector<std::size_t> path(std::size_t c) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < branches_.size(); ++i)
            if (branches_[i].contains(c) && branches_[i].end > branches_[i].start) out.push_back(i);
        std::sort(out.begin(), out.end(), [&](std::size_t a, std::size_t b) {
            return branches_[a].start > branches_[b].start;
        });
        return out;
    }

    /// Every distinct branch start/end time, ascending.
    std::vector<double> boundaries() const {
        std::set<double> times;
        for (const auto& b : branches_) {
            times.insert(b.start);
            times.insert(b.end);
        }
        return {times.begin(), times.end()};
    }

    std::vector<std::string> class_names(const Branch& b) const {
        std::vector<std::string> names;
        for (auto c : b.classes) names.push_back(classes_[c]);
        return names;
    }

    std::vector<Branch>& mutable_branches() { return branches_; }

    friend bool operator==(const BranchHierarchy&, const BranchHierarchy&) = default;

private:
    std::vector<std::string> classes_;
    double horizon_ = 1.0;
    std::vector<Branch> branches_;
};

/// Canonical display order: start descending, then end descending, then class set.
inline void sort_branches(std::vector<Branch>& branches) {
    std::stable_sort(branches.begin(), branches.end(), [](const Branch& a, const Branch& b) {
        if (a.start != b.start) return a.start > b.start;
        if (a.end != b.end) return a.end > b.end;
        return a.classes < b.classes;
    });
}

// ---------------------------------------------------------------------------
// Discovery

/// Mean Euclidean distance curves between noised class samples. Curves are
/// stored for unordered pairs i <= j; i == j is the within-class curve.
struct DistanceCurves {
    std::vector<double> grid;
    std::size_t num_classes = 0;
    std::vector<std::vector<double>> curves;

    std::vector<double>& curve(std::size_t i, std::size_t j) { return curves[index(i, j)]; }
    const std::vector<double>& curve(std::size_t i, std::size_t j) const { return curves[index(i, j)]; }

    std::size_t index(std::size_t i, std::size_t j) const {
        if (i > j) std::swap(i, j);
        // rows 0..i-1 contribute n, n-1, ..., n-i+1 entries
        return i * num_classes - (i * (i - 1)) / 2 + (j - i);
    }
};

/// n points uniformly spaced on (0, horizon].
inline std::vector<double> uniform_grid(double horizon, std::size_t points = 1000) {
    std::vector<double> g(points);
    for (std::size_t k = 0; k < points; ++k)
        g[k] = horizon * static_cast<double>(k + 1) / static_cast<double>(points);
    return g;
}

namespace detail {

struct PairMoments {
    double dx2;   // |x_a - x_b|^2
    double dxde;  // (x_a - x_b) . (e_a - e_b)
    double de2;   // |e_a - e_b|^2
};

inline PairMoments pair_moments(std::span<const float> xa, std::span<const float> ea, std::span<const float> xb,
                                std::span<const float> eb) {
    PairMoments m{0, 0, 0};
    for (std::size_t k = 0; k < xa.size(); ++k) {
        const double dx = static_cast<double>(xa[k]) - xb[k];
        const double de = static_cast<double>(ea[k]) - eb[k];
        m.dx2 += dx * dx;
        m.dxde += dx * de;
        m.de2 += de * de;
    }
    return m;
}

}  // namespace detail

/// Forward-diffuses n sampled objects per class over the grid and averages
/// pairwise Euclidean distances. Each object carries one noise draw reused at
/// every grid time, and pairs are fixed across the grid.
inline DistanceCurves pairwise_noisy_distances(const TabularDataset& data, std::size_t n, const NoiseProcess& process,
                                               const std::vector<double>& grid, Rng& rng) {
    if (n < 1) throw DomainError("discovery requires n >= 1");
    const std::size_t nc = data.classes.size();
    const std::size_t d = data.dim();
    if (nc == 0) throw DataError("dataset has no classes");

    struct ClassSample {
        std::vector<std::size_t> rows;
        std::vector<std::vector<float>> noise;
    };
    std::vector<ClassSample> samples(nc);
    for (std::size_t c = 0; c < nc; ++c) {
        auto rows = data.rows_of(c);
        if (rows.size() < 2)
            throw DataError("class '" + data.classes[c] + "' has fewer than 2 objects");
        // partial Fisher-Yates: sample without replacement
        const std::size_t m = std::min(n, rows.size());
        for (std::size_t i = 0; i < m; ++i) std::swap(rows[i], rows[i + rng.index(rows.size() - i)]);
        rows.resize(m);
        samples[c].rows = rows;
        samples[c].noise.resize(m);
        for (auto& e : samples[c].noise) e = prior_sample(d, rng);
    }

    std::vector<MarginalCoefs> coefs;
    coefs.reserve(grid.size());
    for (double t : grid) coefs.push_back(process.marginal(t));

    DistanceCurves out;
    out.grid = grid;
    out.num_classes = nc;
    out.curves.resize(nc * (nc + 1) / 2);

    auto permutation = [&](std::size_t m) {
        std::vector<std::size_t> p(m);
        std::iota(p.begin(), p.end(), 0);
        std::shuffle(p.begin(), p.end(), rng.engine());
        return p;
    };

    for (std::size_t i = 0; i < nc; ++i) {
        for (std::size_t j = i; j < nc; ++j) {
            const auto& si = samples[i];
            const auto& sj = samples[j];
            std::vector<detail::PairMoments> pairs;
            pairs.reserve(n);
            if (i == j) {
                const auto p = permutation(si.rows.size());
                const std::size_t m = p.size();
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t a = p[k % m];
                    const std::size_t b = p[(k + 1) % m];
                    pairs.push_back(detail::pair_moments(data.features.row(si.rows[a]), si.noise[a],
                                                         data.features.row(si.rows[b]), si.noise[b]));
                }
            } else {
                const auto pa = permutation(si.rows.size());
                const auto pb = permutation(sj.rows.size());
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t a = pa[k % pa.size()];
                    const std::size_t b = pb[k % pb.size()];
                    pairs.push_back(detail::pair_moments(data.features.row(si.rows[a]), si.noise[a],
                                                         data.features.row(sj.rows[b]), sj.noise[b]));
                }
            }
            auto& curve = out.curve(i, j);
            curve.resize(grid.size());
            for (std::size_t g = 0; g < grid.size(); ++g) {
                const double mc = coefs[g].mean_coef;
                const double sd = coefs[g].std;
                double sum = 0.0;
                for (const auto& p : pairs)
                    sum += std::sqrt(std::max(0.0, mc * mc * p.dx2 + 2.0 * mc * sd * p.dxde + sd * sd * p.de2));
                curve[g] = sum / static_cast<double>(pairs.size());
            }
        }
    }
    return out;
}

/// Truncated Gaussian kernel (sigma in grid units, 4 sigma each side),
/// renormalized over the in-range taps at the edges.
inline std::vector<double> smooth_curve(const std::vector<double>& curve, double sigma = 3.0) {
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
    for (int k = -radius; k <= radius; ++k)
        w[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
    const int n = static_cast<int>(curve.size());
    std::vector<double> out(curve.size());
    for (int i = 0; i < n; ++i) {
        double num = 0.0, den = 0.0;
        for (int k = -radius; k <= radius; ++k) {
            const int j = i + k;
            if (j < 0 || j >= n) continue;
            const double wk = w[static_cast<std::size_t>(k + radius)];
            num += wk * curve[static_cast<std::size_t>(j)];
            den += wk;
        }
        out[static_cast<std::size_t>(i)] = num / den;
    }
    return out;
}

inline DistanceCurves smooth_curves(const DistanceCurves& curves, double sigma = 3.0) {
    DistanceCurves out = curves;
    for (auto& c : out.curves) c = smooth_curve(c, sigma);
    return out;
}

/// Symmetric matrix of minimal times of indistinguishability.
struct MergeTimes {
    std::size_t num_classes = 0;
    std::vector<double> tau;  // row-major num_classes x num_classes, diagonal unused

    MergeTimes() = default;
    explicit MergeTimes(std::size_t n) : num_classes(n), tau(n * n, 0.0) {}

    double operator()(std::size_t i, std::size_t j) const { return tau[i * num_classes + j]; }
    void set(std::size_t i, std::size_t j, double v) {
        tau[i * num_classes + j] = v;
        tau[j * num_classes + i] = v;
    }
};

/// First grid time at which the cross-class distance is within epsilon of the
/// average within-class distance; the horizon if that never happens.
inline MergeTimes merge_times(const DistanceCurves& curves, double epsilon, double horizon) {
    const std::size_t n = curves.num_classes;
    MergeTimes out(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const auto& cross = curves.curve(i, j);
            const auto& si = curves.curve(i, i);
            const auto& sj = curves.curve(j, j);
            double tau = horizon;
            for (std::size_t g = 0; g < curves.grid.size(); ++g) {
                if (cross[g] <= 0.5 * (si[g] + sj[g]) + epsilon) {
                    tau = curves.grid[g];
                    break;
                }
            }
            out.set(i, j, tau);
        }
    }
    return out;
}

/// Greedy agglomeration over ascending merge times with disjoint sets. Equal
/// times are taken in (i, j) index order.
inline BranchHierarchy build_hierarchy(const MergeTimes& taus, const std::vector<std::string>& classes,
                                       double horizon) {
    const std::size_t n = classes.size();
    if (n == 0) throw DataError("hierarchy needs at least one class");
    if (taus.num_classes != n) throw ShapeError("merge-time matrix does not match class count");
    {
        std::set<std::string> unique(classes.begin(), classes.end());
        if (unique.size() != n) throw DataError("duplicate class names");
    }

    struct Pair {
        double tau;
        std::size_t i, j;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double t = taus(i, j);
            if (!(t >= 0.0 && t <= horizon)) throw DomainError("merge time outside [0, horizon]");
            pairs.push_back({t, i, j});
        }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.tau != b.tau) return a.tau < b.tau;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });

    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    // Open node per set representative: member classes and the node's start time.
    std::vector<std::vector<std::size_t>> members(n);
    std::vector<double> start(n, 0.0);
    for (std::size_t c = 0; c < n; ++c) members[c] = {c};

    std::vector<Branch> branches;
    for (const auto& p : pairs) {
        std::size_t a = find(p.i), b = find(p.j);
        if (a == b) continue;
        branches.push_back({start[a], p.tau, members[a], 0});
        branches.push_back({start[b], p.tau, members[b], 0});
        if (b < a) std::swap(a, b);
        parent[b] = a;
        members[a].insert(members[a].end(), members[b].begin(), members[b].end());
        std::sort(members[a].begin(), members[a].end());
        members[b].clear();
        start[a] = p.tau;
    }
    const std::size_t r = find(0);
    branches.push_back({start[r], horizon, members[r], 0});

    sort_branches(branches);
    for (std::size_t i = 0; i < branches.size(); ++i) branches[i].task = i;
    return BranchHierarchy(classes, horizon, std::move(branches));
}

struct DiscoveryConfig {
    std::size_t n = 500;
    double epsilon = 0.005;
    std::size_t grid_points = 1000;
    double sigma = 3.0;
};

struct DiscoveryResult {
    DistanceCurves raw;
    DistanceCurves smoothed;
    MergeTimes taus;
    BranchHierarchy hierarchy;
};

/// Full discovery pipeline from a labeled dataset.
inline DiscoveryResult discover(const TabularDataset& data, const NoiseProcess& process, const DiscoveryConfig& cfg,
                                Rng& rng) {
    const auto grid = uniform_grid(process.horizon(), cfg.grid_points);
    DiscoveryResult r{pairwise_noisy_distances(data, cfg.n, process, grid, rng), {}, MergeTimes(), {}};
    r.smoothed = smooth_curves(r.raw, cfg.sigma);
    r.taus = merge_times(r.smoothed, cfg.epsilon, process.horizon());
    r.hierarchy = build_hierarchy(r.taus, data.classes, process.horizon());
    return r;
}

// ---------------------------------------------------------------------------
// Queries

inline std::size_t branch_lookup(const BranchHierarchy& h, const std::string& cls, double t) {
    return h.lookup(h.class_index(cls), t).task;
}

/// Start time of the lowest branch containing both classes.
inline double lca_branch_point(const BranchHierarchy& h, std::size_t c1, std::size_t c2) {
    if (c1 == c2) throw DomainError("branch point requires two distinct classes");
    if (c1 >= h.classes().size() || c2 >= h.classes().size()) throw LookupError("class index out of range");
    std::optional<double> best;
    for (const auto& b : h.branches())
        if (b.contains(c1) && b.contains(c2) && (!best || b.start < *best)) best = b.start;
    if (!best) throw StateError("classes share no branch");
    return *best;
}

inline double lca_branch_point(const BranchHierarchy& h, const std::string& c1, const std::string& c2) {
    return lca_branch_point(h, h.class_index(c1), h.class_index(c2));
}

inline std::string format_time(double t) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", t);
    std::string s = buf;
    while (!s.empty() && s.back() == '0') s.pop_back();
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
}

/// Violations of the structural invariants; empty for a well-formed tree.
inline std::vector<std::string> validate(const BranchHierarchy& h, std::size_t grid_points = 1000) {
    std::vector<std::string> out;
    const auto& classes = h.classes();
    const auto& br = h.branches();
    const std::size_t nc = classes.size();
    const double T = h.horizon();
    auto name_of = [&](std::size_t c) { return c < nc ? classes[c] : "#" + std::to_string(c); };

    if (nc == 0) {
        out.push_back("hierarchy has no classes");
        return out;
    }
    if (br.size() != 2 * nc - 1)
        out.push_back("expected " + std::to_string(2 * nc - 1) + " branches, found " + std::to_string(br.size()));

    bool indices_ok = true;
    for (std::size_t i = 0; i < br.size(); ++i) {
        const auto& b = br[i];
        if (b.classes.empty()) out.push_back("branch " + std::to_string(i) + " has no classes");
        if (!(0.0 <= b.start && b.start <= b.end && b.end <= T))
            out.push_back("branch " + std::to_string(i) + " has invalid interval [" + format_time(b.start) + ", " +
                          format_time(b.end) + ")");
        for (std::size_t k = 0; k < b.classes.size(); ++k) {
            if (b.classes[k] >= nc) {
                out.push_back("branch " + std::to_string(i) + " references unknown class index");
                indices_ok = false;
            }
            if (k > 0 && b.classes[k] == b.classes[k - 1])
                out.push_back("branch " + std::to_string(i) + " lists a class twice");
        }
    }
    if (!indices_ok) return out;

    // Partition of class x time on the grid, plus t = T owned by the root.
    std::vector<double> times;
    for (std::size_t k = 0; k < grid_points; ++k) times.push_back(T * static_cast<double>(k) / grid_points);
    for (double b : h.boundaries())
        if (b < T) times.push_back(b);
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end()), times.end());
    for (std::size_t c = 0; c < nc; ++c) {
        for (double t : times) {
            std::size_t hits = 0;
            for (const auto& b : br)
                if (b.contains(c) && b.start <= t && t < b.end) ++hits;
            if (hits != 1)
                out.push_back("cell (" + name_of(c) + ", " + format_time(t) + ") covered by " + std::to_string(hits) +
                              " branches");
        }
    }

    // Rooted tree structure.
    std::size_t roots = 0;
    for (const auto& b : br)
        if (b.end == T && b.classes.size() == nc) ++roots;
    if (roots != 1) out.push_back("expected exactly one root branch, found " + std::to_string(roots));
    for (std::size_t c = 0; c < nc; ++c) {
        bool leaf = false;
        for (const auto& b : br)
            if (b.start == 0.0 && b.classes.size() == 1 && b.classes[0] == c) leaf = true;
        if (!leaf) out.push_back("class " + name_of(c) + " has no leaf branch starting at 0");
    }
    auto strict_subset = [](const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
        return a.size() < b.size() && std::includes(b.begin(), b.end(), a.begin(), a.end());
    };
    // Simultaneous merges chain through zero-length branches, so only the
    // nearest superset (or subset) sharing the boundary counts as an edge.
    for (std::size_t i = 0; i < br.size(); ++i) {
        const auto& b = br[i];
        const bool is_root = b.end == T && b.classes.size() == nc;
        if (!is_root) {
            std::vector<std::size_t> cand;
            for (std::size_t j = 0; j < br.size(); ++j)
                if (j != i && br[j].start == b.end && strict_subset(b.classes, br[j].classes)) cand.push_back(j);
            std::size_t parents = 0;
            for (std::size_t j : cand) {
                bool nearest = true;
                for (std::size_t k : cand)
                    if (strict_subset(br[k].classes, br[j].classes)) nearest = false;
                if (nearest) ++parents;
            }
            if (parents != 1)
                out.push_back("branch " + std::to_string(i) + " has " + std::to_string(parents) + " parents");
        }
        if (b.classes.size() > 1) {
            std::vector<std::size_t> cand;
            for (std::size_t j = 0; j < br.size(); ++j)
                if (j != i && br[j].end == b.start && strict_subset(br[j].classes, b.classes)) cand.push_back(j);
            std::vector<std::size_t> covered;
            std::size_t children = 0;
            for (std::size_t j : cand) {
                bool nearest = true;
                for (std::size_t k : cand)
                    if (strict_subset(br[j].classes, br[k].classes)) nearest = false;
                if (!nearest) continue;
                ++children;
                covered.insert(covered.end(), br[j].classes.begin(), br[j].classes.end());
            }
            std::sort(covered.begin(), covered.end());
            if (children < 2 || covered != b.classes)
                out.push_back("children of branch " + std::to_string(i) + " do not partition its classes");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Extension

struct AttachResult {
    BranchHierarchy hierarchy;
    std::vector<std::size_t> task_map;  // old task -> task in the new hierarchy
    std::size_t new_task = 0;           // head of the new leaf branch
    std::size_t new_class = 0;
};

/// Adds `new_class` as a sibling of `sibling`'s lineage at `attach_time`. The
/// branch of the sibling that spans attach_time is split in two; both halves
/// keep its task, and every ancestor gains the new class. Exactly one new task
/// (the new leaf) is created.
inline AttachResult attach_class(const BranchHierarchy& h, const std::string& new_class, const std::string& sibling,
                                 double attach_time) {
    if (h.has_class(new_class)) throw DataError("class '" + new_class + "' already in hierarchy");
    const std::size_t sib = h.class_index(sibling);
    if (!(attach_time > 0.0 && attach_time < h.horizon()))
        throw DomainError("attach time must lie in (0, horizon)");

    const std::size_t split = h.lookup_index(sib, attach_time);
    const std::size_t added = h.classes().size();
    const Branch target = h.branches()[split];

    std::vector<Branch> branches;
    for (std::size_t i = 0; i < h.branches().size(); ++i) {
        Branch b = h.branches()[i];
        if (i == split) {
            Branch lower = b;
            lower.end = attach_time;
            Branch upper = b;
            upper.start = attach_time;
            upper.classes.push_back(added);
            branches.push_back(lower);
            branches.push_back(upper);
            continue;
        }
        // ancestors of the split branch
        if (b.contains(sib) && b.start >= target.end) b.classes.push_back(added);
        branches.push_back(b);
    }
    AttachResult r;
    r.new_task = h.task_count();
    r.new_class = added;
    branches.push_back({0.0, attach_time, {added}, r.new_task});
    sort_branches(branches);

    auto classes = h.classes();
    classes.push_back(new_class);
    r.hierarchy = BranchHierarchy(std::move(classes), h.horizon(), std::move(branches));
    r.task_map.resize(h.task_count());
    std::iota(r.task_map.begin(), r.task_map.end(), 0);
    return r;
}

// ---------------------------------------------------------------------------
// Random hierarchies and tree distance

namespace detail {

inline void random_subtree(const std::vector<std::size_t>& members, double start, double end, Rng& rng,
                           std::vector<Branch>& out) {
    out.push_back({start, end, members, 0});
    if (members.size() == 1) return;
    // uniform over unordered bipartitions into two nonempty sides
    std::vector<std::size_t> left, right;
    do {
        left.clear();
        right.clear();
        for (auto c : members) (rng.uniform() < 0.5 ? left : right).push_back(c);
    } while (left.empty() || right.empty());
    for (auto* side : {&left, &right}) {
        const double child_start = side->size() == 1 ? 0.0 : rng.uniform(0.0, start);
        random_subtree(*side, child_start, start, rng, out);
    }
}

}  // namespace detail

/// Top-down random tree: uniform bipartition at each node, branch point uniform
/// below the parent's, recursing to singletons.
inline BranchHierarchy random_hierarchy(const std::vector<std::string>& classes, double horizon, Rng& rng) {
    if (classes.empty()) throw DomainError("random hierarchy needs at least one class");
    std::vector<std::size_t> all(classes.size());
    std::iota(all.begin(), all.end(), 0);
    std::vector<Branch> branches;
    const double root_start = classes.size() == 1 ? 0.0 : rng.uniform(0.0, horizon);
    detail::random_subtree(all, root_start, horizon, rng, branches);
    sort_branches(branches);
    for (std::size_t i = 0; i < branches.size(); ++i) branches[i].task = i;
    return BranchHierarchy(classes, horizon, std::move(branches));
}

/// Branch lengths keyed by the set of class names under each branch.
inline std::map<std::vector<std::string>, double> cluster_lengths(const BranchHierarchy& h) {
    std::map<std::vector<std::string>, double> out;
    for (const auto& b : h.branches()) {
        auto names = h.class_names(b);
        std::sort(names.begin(), names.end());
        out[names] += b.length();
    }
    return out;
}

/// Branch-score distance over the clusters of two rooted trees on the same
/// leaf set; a cluster missing from one tree contributes length 0 there.
inline double branch_score_distance(const BranchHierarchy& a, const BranchHierarchy& b) {
    auto ca = a.classes(), cb = b.classes();
    std::sort(ca.begin(), ca.end());
    std::sort(cb.begin(), cb.end());
    if (ca != cb) throw DomainError("branch-score distance requires identical class sets");
    const auto la = cluster_lengths(a);
    const auto lb = cluster_lengths(b);
    double sum = 0.0;
    for (const auto& [key, len] : la) {
        auto it = lb.find(key);
        const double other = it == lb.end() ? 0.0 : it->second;
        sum += (len - other) * (len - other);
    }
    for (const auto& [key, len] : lb)
        if (!la.count(key)) sum += len * len;
    return std::sqrt(sum);
}

// ---------------------------------------------------------------------------
// Serialization and display

inline nlohmann::json to_json(const BranchHierarchy& h) {
    nlohmann::json j;
    j["classes"] = h.classes();
    j["horizon"] = h.horizon();
    j["branches"] = nlohmann::json::array();
    for (const auto& b : h.branches()) {
        j["branches"].push_back(
            {{"start", b.start}, {"end", b.end}, {"classes", h.class_names(b)}, {"task_index", b.task}});
    }
    return j;
}

inline BranchHierarchy hierarchy_from_json(const nlohmann::json& j) {
    try {
        auto classes = j.at("classes").get<std::vector<std::string>>();
        const double horizon = j.at("horizon").get<double>();
        std::map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < classes.size(); ++i)
            if (!index.emplace(classes[i], i).second) throw DataError("duplicate class '" + classes[i] + "'");
        std::vector<Branch> branches;
        for (const auto& jb : j.at("branches")) {
            Branch b;
            b.start = jb.at("start").get<double>();
            b.end = jb.at("end").get<double>();
            b.task = jb.at("task_index").get<std::size_t>();
            for (const auto& name : jb.at("classes").get<std::vector<std::string>>()) {
                auto it = index.find(name);
                if (it == index.end()) throw DataError("branch references unknown class '" + name + "'");
                b.classes.push_back(it->second);
            }
            branches.push_back(std::move(b));
        }
        return BranchHierarchy(std::move(classes), horizon, std::move(branches));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed hierarchy document: ") + e.what());
    }
}

/// Three-column branch table: start, end, classes.
inline std::string branch_table(const BranchHierarchy& h) {
    std::ostringstream os;
    os << "Branch start (s_i)\tBranch end (t_i)\tBranch classes (C_i)\n";
    for (const auto& b : h.branches()) {
        os << format_time(b.start) << '\t' << format_time(b.end) << '\t';
        const auto names = h.class_names(b);
        for (std::size_t k = 0; k < names.size(); ++k) os << (k ? "," : "") << names[k];
        os << '\n';
    }
    return os.str();
}

}  // namespace bdiff
