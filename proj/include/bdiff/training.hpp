#pragma once

// Denoising score matching for branched and label-guided denoisers, plus the
// frozen-trunk class-extension workflow.

#include <chrono>
#include <cmath>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dataset.hpp"
#include "denoiser.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "hierarchy.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bdiff {

struct TrainConfig {
    std::size_t batch_size = 128;
    double learning_rate = 1e-3;
    std::size_t epochs = 1;
    std::uint64_t seed = 0;
    double t_floor = kTimeFloor;
};

struct TaskLoss {
    std::size_t task;
    double loss;
};

struct LossRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double loss = 0.0;               // batch loss
    std::vector<TaskLoss> per_task;  // mean loss of the examples routed to each task
    double seconds = 0.0;            // wall clock since the start of training
};

/// sigma^2-weighted denoising score matching: mean over rows of |std * s + eps|^2.
inline double dsm_loss(std::span<const float> score, const Perturbation& p) {
    if (!(p.std > 0.0)) throw DomainError("dsm_loss requires std > 0");
    if (score.size() != p.eps.size()) throw ShapeError("dsm_loss: score length mismatch");
    double sum = 0.0;
    for (std::size_t i = 0; i < score.size(); ++i) {
        const double r = p.std * score[i] + p.eps[i];
        sum += r * r;
    }
    if (!std::isfinite(sum)) throw NumericError("non-finite dsm loss");
    return sum;
}

inline double dsm_loss(const Matrix& scores, std::span<const Perturbation> batch) {
    if (scores.rows != batch.size()) throw ShapeError("dsm_loss: one perturbation per row required");
    if (batch.empty()) return 0.0;
    double sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) sum += dsm_loss(scores.row(i), batch[i]);
    return sum / static_cast<double>(batch.size());
}

/// Half-open time window for t sampling.
struct TimeWindow {
    double lo;
    double hi;
};

namespace detail {

inline double sample_time(const NoiseProcess& process, const TimeWindow& w, Rng& rng) {
    if (process.discrete()) {
        const auto lo = static_cast<std::size_t>(std::ceil(w.lo));
        const auto hi = static_cast<std::size_t>(std::ceil(w.hi));  // exclusive
        return static_cast<double>(lo + rng.index(hi - lo));
    }
    return rng.uniform(w.lo, w.hi);
}

inline TimeWindow default_window(const NoiseProcess& process, double t_floor) {
    if (process.discrete()) return {1.0, process.horizon() + 1.0};
    return {t_floor, process.horizon()};
}

/// Dataset class index -> hierarchy class index, matched by name.
inline std::vector<std::size_t> class_map(const TabularDataset& data, const std::vector<std::string>& target) {
    std::vector<std::size_t> map(data.classes.size());
    for (std::size_t c = 0; c < data.classes.size(); ++c) {
        auto it = std::find(target.begin(), target.end(), data.classes[c]);
        if (it == target.end()) throw LookupError("class '" + data.classes[c] + "' not known to the model");
        map[c] = static_cast<std::size_t>(it - target.begin());
    }
    return map;
}

}  // namespace detail

/// One optimizer step on the given dataset rows. Each example draws its own t
/// and noise; branched models route it to the head owning (class, t).
inline LossRecord train_step(Denoiser& model, const BranchHierarchy* hierarchy, const std::vector<std::string>& classes,
                             const TabularDataset& data, std::span<const std::size_t> rows, const TrainConfig& cfg,
                             Rng& rng, std::optional<TimeWindow> window = {}) {
    if (rows.empty()) throw DomainError("train_step needs a nonempty batch");
    if (model.kind() == ModelKind::branched && hierarchy == nullptr)
        throw StateError("branched training requires a hierarchy");
    const auto& process = model.process();
    const TimeWindow w = window.value_or(detail::default_window(process, cfg.t_floor));
    const auto cmap = detail::class_map(data, classes);

    const std::size_t b = rows.size();
    const std::size_t d = model.dim();
    Matrix x(b, d);
    Matrix eps(b, d);
    std::vector<double> ts(b);
    std::vector<std::size_t> cond(b);
    for (std::size_t i = 0; i < b; ++i) {
        const std::size_t r = rows[i];
        const double t = detail::sample_time(process, w, rng);
        const auto p = perturb(process, data.features.row(r), t, rng);
        std::copy(p.x_t.begin(), p.x_t.end(), x.row(i).begin());
        std::copy(p.eps.begin(), p.eps.end(), eps.row(i).begin());
        ts[i] = t;
        const std::size_t c = cmap[data.labels[r]];
        cond[i] = model.kind() == ModelKind::branched ? hierarchy->lookup(c, t).task : c;
    }

    Tape tape(model.store());
    const auto outputs = model.forward(tape, x, ts, cond);
    LossRecord rec;
    double total = 0.0;
    std::vector<std::pair<Tape::Id, Matrix>> seeds;
    for (const auto& o : outputs) {
        const Matrix& pred = tape.value(o.output);
        Matrix grad(pred.rows, pred.cols);
        double group = 0.0;
        for (std::size_t i = 0; i < o.rows.size(); ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                const double r = static_cast<double>(pred(i, j)) - eps(o.rows[i], j);
                group += r * r;
                grad(i, j) = static_cast<float>(2.0 * r / static_cast<double>(b));
            }
        }
        if (!std::isfinite(group)) throw NumericError("non-finite loss on task " + std::to_string(o.head));
        total += group;
        rec.per_task.push_back({model.kind() == ModelKind::branched ? o.head : 0,
                                group / static_cast<double>(o.rows.size())});
        seeds.emplace_back(o.output, std::move(grad));
    }
    tape.backward(seeds);
    adam_step(model.store(), AdamConfig{cfg.learning_rate});
    rec.loss = total / static_cast<double>(b);
    return rec;
}

/// epochs x ceil(N / batch) steps; each epoch reshuffles with its own stream.
inline std::vector<LossRecord> train(Denoiser& model, const BranchHierarchy* hierarchy,
                                     const std::vector<std::string>& classes, const TabularDataset& data,
                                     const TrainConfig& cfg, std::optional<TimeWindow> window = {},
                                     std::size_t first_epoch = 0) {
    if (cfg.batch_size < 1 || cfg.epochs < 1) throw DomainError("batch size and epochs must be >= 1");
    if (data.size() == 0) throw DataError("training set is empty");
    if (data.dim() != model.dim()) throw ShapeError("dataset dim does not match the model");
    std::vector<LossRecord> history;
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t step = 0;
    std::vector<std::size_t> order(data.size());
    for (std::size_t e = first_epoch; e < first_epoch + cfg.epochs; ++e) {
        Rng rng(cfg.seed, "train", {e});
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng.engine());
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            auto rec = train_step(model, hierarchy, classes, data,
                                  std::span<const std::size_t>(order.data() + start, end - start), cfg, rng, window);
            rec.epoch = e;
            rec.step = step++;
            rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            history.push_back(std::move(rec));
        }
    }
    return history;
}

/// Loss history as CSV: epoch,step,task,loss,seconds. Wall-clock seconds are
/// written only when requested so that seeded runs produce identical bytes.
inline void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& history, bool with_time) {
    os << "epoch,step,task,loss,seconds\n";
    char buf[64];
    for (const auto& r : history) {
        for (const auto& tl : r.per_task) {
            std::snprintf(buf, sizeof(buf), "%.9g", tl.loss);
            os << r.epoch << ',' << r.step << ',' << tl.task << ',' << buf << ',';
            if (with_time) {
                std::snprintf(buf, sizeof(buf), "%.3f", r.seconds);
                os << buf;
            } else {
                os << '0';
            }
            os << '\n';
        }
    }
}

// ---------------------------------------------------------------------------

struct ExtendResult {
    BranchHierarchy hierarchy;
    std::size_t new_task = 0;
    std::size_t sibling_task = 0;
    std::vector<LossRecord> history;
};

/// Adds `new_class` to a trained branched model: the hierarchy gains one leaf
/// attached at `attach_time` above `sibling`, a new head is cloned from the
/// sibling's leaf head, everything else is frozen, and the new head is trained
/// on new-class examples with t restricted to the new leaf's interval.
inline ExtendResult extend(Denoiser& model, const BranchHierarchy& hierarchy, const TabularDataset& new_class_data,
                           const std::string& new_class, const std::string& sibling, double attach_time,
                           const TrainConfig& cfg) {
    if (model.kind() != ModelKind::branched) throw StateError("extend requires a branched model");
    auto attached = attach_class(hierarchy, new_class, sibling, attach_time);
    if (attached.new_task != model.head_count())
        throw StateError("model head count does not match the hierarchy's task count");

    const std::size_t sib = hierarchy.class_index(sibling);
    const std::size_t sibling_task = hierarchy.lookup(sib, 0.0).task;

    model.store().freeze_all();
    const std::size_t head = model.add_head(cfg.seed);
    model.clone_head(sibling_task, head);

    for (const auto& c : new_class_data.classes)
        if (c != new_class) throw DataError("extension data must contain only the new class");

    const double lo = model.process().discrete() ? 1.0 : std::max(cfg.t_floor, 0.0);
    ExtendResult r;
    r.history = train(model, &attached.hierarchy, attached.hierarchy.classes(), new_class_data, cfg,
                      TimeWindow{lo, attach_time});
    r.hierarchy = std::move(attached.hierarchy);
    r.new_task = head;
    r.sibling_task = sibling_task;
    return r;
}

}  // namespace bdiff
