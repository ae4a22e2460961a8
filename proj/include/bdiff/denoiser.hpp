#pragma once

// Score networks: the multi-task (shared trunk, per-branch heads) denoiser and
// the single-head label-guided baseline. Both predict the injected noise; the
// score is recovered as -prediction / std(t).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "diffusion.hpp"
#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bdiff {

struct ArchConfig {
    std::size_t width = 128;
    std::size_t trunk_layers = 3;
    std::size_t head_layers = 2;
    std::size_t time_frequencies = 32;
    std::size_t label_dim = 16;
};

enum class ModelKind { branched, label_guided };

inline const char* to_string(ModelKind k) { return k == ModelKind::branched ? "branched" : "label-guided"; }

/// Lower clamp on the evaluation time; the network is trained on [t_floor, T].
inline constexpr double kTimeFloor = 1e-4;

/// Sinusoidal embedding of t / T against frozen Gaussian frequencies z:
/// [sin(2 pi (t/T) z), cos(2 pi (t/T) z)].
inline std::vector<float> time_embed(std::span<const float> z, double t, double horizon) {
    std::vector<float> out(2 * z.size());
    const double phase = 2.0 * std::numbers::pi * t / horizon;
    for (std::size_t k = 0; k < z.size(); ++k) {
        out[k] = static_cast<float>(std::sin(phase * z[k]));
        out[z.size() + k] = static_cast<float>(std::cos(phase * z[k]));
    }
    return out;
}

class Denoiser {
public:
    Denoiser() = default;

    /// `conditions` is the task count for a branched model and the class count
    /// for a label-guided one.
    Denoiser(ModelKind kind, std::size_t dim, std::size_t conditions, const NoiseProcess& process,
             const ArchConfig& arch, std::uint64_t seed)
        : kind_(kind), dim_(dim), process_(process), arch_(arch) {
        if (dim == 0) throw DomainError("denoiser needs data dim >= 1");
        if (conditions == 0) throw DomainError("denoiser needs at least one task or class");
        Rng rng(seed, "init", {});
        std::vector<float> z(arch.time_frequencies);
        for (auto& v : z) v = static_cast<float>(rng.normal());
        store_.add("time.z", 1, arch.time_frequencies, std::move(z)).frozen = true;

        std::size_t in = dim + 2 * arch.time_frequencies;
        if (kind == ModelKind::label_guided) {
            std::vector<float> table(conditions * arch.label_dim);
            for (auto& v : table) v = static_cast<float>(rng.normal());
            store_.add("label.embed", conditions, arch.label_dim, std::move(table));
            in += arch.label_dim;
        }
        for (std::size_t l = 0; l < arch.trunk_layers; ++l) {
            add_dense(store_, trunk_layer(l), l == 0 ? in : arch.width, arch.width, rng);
        }
        const std::size_t heads = kind == ModelKind::branched ? conditions : 1;
        for (std::size_t k = 0; k < heads; ++k) init_head(k, rng);
        heads_ = heads;
        labels_ = kind == ModelKind::label_guided ? conditions : 0;
    }

    ModelKind kind() const { return kind_; }
    std::size_t dim() const { return dim_; }
    std::size_t head_count() const { return heads_; }
    std::size_t label_count() const { return labels_; }
    const NoiseProcess& process() const { return process_; }
    const ArchConfig& arch() const { return arch_; }
    ParameterStore& store() { return store_; }
    const ParameterStore& store() const { return store_; }

    static std::string trunk_layer(std::size_t l) { return "trunk." + std::to_string(l); }
    static std::string head_layer(std::size_t head, std::size_t l) {
        return "head." + std::to_string(head) + "." + std::to_string(l);
    }

    std::vector<std::string> head_parameters(std::size_t head) const {
        std::vector<std::string> names;
        for (std::size_t l = 0; l < arch_.head_layers; ++l) {
            names.push_back(head_layer(head, l) + ".weight");
            names.push_back(head_layer(head, l) + ".bias");
        }
        return names;
    }

    std::vector<std::string> trunk_parameters() const {
        std::vector<std::string> names;
        for (std::size_t l = 0; l < arch_.trunk_layers; ++l) {
            names.push_back(trunk_layer(l) + ".weight");
            names.push_back(trunk_layer(l) + ".bias");
        }
        return names;
    }

    std::span<const float> frequencies() const { return store_.at("time.z").values; }

    double noise_std(double t) const { return process_.marginal(std::max(t, time_floor())).std; }

    double time_floor() const { return process_.discrete() ? 1.0 : kTimeFloor; }

    /// Appends a freshly initialized head; returns its index.
    std::size_t add_head(std::uint64_t seed) {
        if (kind_ != ModelKind::branched) throw StateError("label-guided models have a single head");
        Rng rng(seed, "head", {heads_});
        init_head(heads_, rng);
        return heads_++;
    }

    /// Appends a label embedding row (zero-initialized); returns the label index.
    std::size_t add_label() {
        if (kind_ != ModelKind::label_guided) throw StateError("branched models have no label table");
        auto& e = store_.at("label.embed");
        e.values.resize(e.values.size() + e.cols, 0.0f);
        e.grad.resize(e.values.size(), 0.0f);
        e.m.resize(e.values.size(), 0.0f);
        e.v.resize(e.values.size(), 0.0f);
        ++e.rows;
        return labels_++;
    }

    /// Copies head `src` bytewise into head `dst` and resets dst's optimizer state.
    void clone_head(std::size_t src, std::size_t dst) {
        if (src >= heads_ || dst >= heads_) throw LookupError("head index out of range");
        const auto from = head_parameters(src);
        const auto to = head_parameters(dst);
        for (std::size_t i = 0; i < from.size(); ++i) {
            const auto& a = store_.at(from[i]);
            auto& b = store_.at(to[i]);
            if (a.rows != b.rows || a.cols != b.cols) throw ShapeError("clone_head: shape mismatch");
            b.values = a.values;
            std::fill(b.m.begin(), b.m.end(), 0.0f);
            std::fill(b.v.begin(), b.v.end(), 0.0f);
            b.step = 0;
        }
    }

    /// Network input rows: [x, time embedding].
    Matrix trunk_input(const Matrix& x, std::span<const double> t) const {
        if (x.cols != dim_) throw ShapeError("input dim " + std::to_string(x.cols) + " != " + std::to_string(dim_));
        if (t.size() != x.rows) throw ShapeError("one time per row required");
        const auto z = frequencies();
        const std::size_t width = dim_ + 2 * z.size();
        Matrix in(x.rows, width);
        std::vector<float> te;
        double last = -1.0;
        for (std::size_t i = 0; i < x.rows; ++i) {
            auto row = in.row(i);
            std::copy(x.row(i).begin(), x.row(i).end(), row.begin());
            const double ti = std::max(t[i], time_floor());
            if (i == 0 || ti != last) te = time_embed(z, ti, process_.horizon());
            last = ti;
            std::copy(te.begin(), te.end(), row.begin() + static_cast<std::ptrdiff_t>(dim_));
        }
        return in;
    }

    struct TapeOutput {
        std::size_t head;
        std::vector<std::size_t> rows;  // batch rows routed to this head
        Tape::Id output;
    };

    /// Records a forward pass. `condition[i]` is the task (branched) or label
    /// (label-guided) of row i. Rows are grouped by head; only heads that
    /// receive rows are evaluated.
    std::vector<TapeOutput> forward(Tape& tape, const Matrix& x, std::span<const double> t,
                                    std::span<const std::size_t> condition) const {
        if (condition.size() != x.rows) throw ShapeError("one condition per row required");
        Tape::Id h = tape.input(trunk_input(x, t));
        if (kind_ == ModelKind::label_guided) {
            for (auto c : condition)
                if (c >= labels_) throw LookupError("unknown label index " + std::to_string(c));
            Tape::Id e = tape.embed("label.embed", condition);
            const Tape::Id parts[] = {h, e};
            h = tape.concat(parts);
        }
        for (std::size_t l = 0; l < arch_.trunk_layers; ++l) h = tape.silu(tape.dense(trunk_layer(l), h));

        std::vector<TapeOutput> out;
        if (kind_ == ModelKind::label_guided) {
            std::vector<std::size_t> rows(x.rows);
            for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
            out.push_back({0, rows, head_on_tape(tape, 0, h)});
            return out;
        }
        std::vector<std::vector<std::size_t>> groups(heads_);
        for (std::size_t i = 0; i < condition.size(); ++i) {
            if (condition[i] >= heads_) throw LookupError("task index " + std::to_string(condition[i]) + " out of range");
            groups[condition[i]].push_back(i);
        }
        for (std::size_t k = 0; k < heads_; ++k) {
            if (groups[k].empty()) continue;
            Tape::Id sub = tape.slice_rows(h, groups[k]);
            out.push_back({k, groups[k], head_on_tape(tape, k, sub)});
        }
        return out;
    }

    /// Noise prediction for a batch sharing one time and one condition.
    Matrix predict_noise(const Matrix& x, double t, std::size_t condition) const {
        std::vector<double> ts(x.rows, t);
        Matrix h = trunk_input(x, ts);
        std::size_t head = condition;
        if (kind_ == ModelKind::label_guided) {
            if (condition >= labels_) throw LookupError("unknown label index " + std::to_string(condition));
            const auto& e = store_.at("label.embed");
            Matrix joined(h.rows, h.cols + e.cols);
            for (std::size_t i = 0; i < h.rows; ++i) {
                auto row = joined.row(i);
                std::copy(h.row(i).begin(), h.row(i).end(), row.begin());
                std::copy_n(e.values.begin() + static_cast<std::ptrdiff_t>(condition * e.cols), e.cols,
                            row.begin() + static_cast<std::ptrdiff_t>(h.cols));
            }
            h = std::move(joined);
            head = 0;
        } else if (condition >= heads_) {
            throw LookupError("task index " + std::to_string(condition) + " out of range");
        }
        for (std::size_t l = 0; l < arch_.trunk_layers; ++l) h = silu_inplace(dense(trunk_layer(l), h));
        for (std::size_t l = 0; l < arch_.head_layers; ++l) {
            h = dense(head_layer(head, l), h);
            if (l + 1 < arch_.head_layers) h = silu_inplace(std::move(h));
        }
        return h;
    }

    /// Score estimate -prediction / std(t) for a batch.
    Matrix score(const Matrix& x, double t, std::size_t condition) const {
        Matrix out = predict_noise(x, t, condition);
        const double s = noise_std(t);
        for (auto& v : out.data) v = static_cast<float>(-static_cast<double>(v) / s);
        return out;
    }

    std::size_t trainable_parameter_count() const { return store_.trainable_count(); }

private:
    void init_head(std::size_t k, Rng& rng) {
        for (std::size_t l = 0; l < arch_.head_layers; ++l) {
            const std::size_t out = l + 1 == arch_.head_layers ? dim_ : arch_.width;
            add_dense(store_, head_layer(k, l), arch_.width, out, rng);
        }
    }

    Tape::Id head_on_tape(Tape& tape, std::size_t head, Tape::Id h) const {
        for (std::size_t l = 0; l < arch_.head_layers; ++l) {
            h = tape.dense(head_layer(head, l), h);
            if (l + 1 < arch_.head_layers) h = tape.silu(h);
        }
        return h;
    }

    Matrix dense(const std::string& layer, const Matrix& x) const {
        const auto& w = store_.at(layer + ".weight");
        const auto& b = store_.at(layer + ".bias");
        return matmul_bias(x, w.values, w.rows, w.cols, b.values);
    }

    static Matrix silu_inplace(Matrix m) {
        bdiff::silu_inplace<float>(m.data);
        return m;
    }

    ModelKind kind_ = ModelKind::branched;
    std::size_t dim_ = 0;
    std::size_t heads_ = 0;
    std::size_t labels_ = 0;
    NoiseProcess process_;
    ArchConfig arch_;
    ParameterStore store_;
};

/// Score of the selected branch head for one vector.
inline std::vector<float> forward_branched(const Denoiser& model, std::span<const float> x, double t,
                                           std::size_t task) {
    if (model.kind() != ModelKind::branched) throw StateError("forward_branched on a label-guided model");
    Matrix m(1, x.size(), std::vector<float>(x.begin(), x.end()));
    return model.score(m, t, task).data;
}

inline std::vector<float> forward_label_guided(const Denoiser& model, std::span<const float> x, double t,
                                               std::size_t label) {
    if (model.kind() != ModelKind::label_guided) throw StateError("forward_label_guided on a branched model");
    Matrix m(1, x.size(), std::vector<float>(x.begin(), x.end()));
    return model.score(m, t, label).data;
}

inline std::size_t label_guided_parameter_count(std::size_t dim, std::size_t classes, const ArchConfig& a) {
    const std::size_t in = dim + 2 * a.time_frequencies + a.label_dim;
    std::size_t n = classes * a.label_dim;
    n += in * a.width + a.width;
    n += (a.trunk_layers - 1) * (a.width * a.width + a.width);
    n += (a.head_layers - 1) * (a.width * a.width + a.width);
    n += a.width * dim + dim;
    return n;
}

inline std::size_t branched_parameter_count(std::size_t dim, std::size_t tasks, const ArchConfig& a) {
    const std::size_t in = dim + 2 * a.time_frequencies;
    std::size_t n = in * a.width + a.width + (a.trunk_layers - 1) * (a.width * a.width + a.width);
    const std::size_t head = (a.head_layers - 1) * (a.width * a.width + a.width) + a.width * dim + dim;
    return n + tasks * head;
}

/// Width for a label-guided baseline whose trainable parameter count is
/// closest to that of a branched model with `tasks` heads.
inline ArchConfig capacity_matched_arch(std::size_t dim, std::size_t tasks, std::size_t classes,
                                        const ArchConfig& branched) {
    const double target = static_cast<double>(branched_parameter_count(dim, tasks, branched));
    ArchConfig best = branched;
    double best_gap = -1.0;
    for (std::size_t w = 8; w <= 4 * branched.width + 512; ++w) {
        ArchConfig a = branched;
        a.width = w;
        const double gap = std::abs(static_cast<double>(label_guided_parameter_count(dim, classes, a)) - target);
        if (best_gap < 0.0 || gap < best_gap) {
            best_gap = gap;
            best = a;
        }
    }
    return best;
}

}  // namespace bdiff
