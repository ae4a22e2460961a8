#include "doctest.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "bdiff/config.hpp"
#include "bdiff/data_io.hpp"
#include "bdiff/training.hpp"

using namespace bdiff;

namespace {

BranchHierarchy fixture(const std::string& name) { return load_hierarchy(std::string(BDIFF_FIXTURES) + "/" + name); }

ArchConfig small_arch(std::size_t width = 32) {
    ArchConfig a;
    a.width = width;
    a.trunk_layers = 2;
    a.head_layers = 2;
    a.time_frequencies = 8;
    a.label_dim = 4;
    return a;
}

GaussianClass gauss(const std::string& name, std::vector<double> mean, std::vector<double> cov) {
    return {name, std::move(mean), std::move(cov)};
}

TabularDataset three_digits(std::size_t n, std::uint64_t seed) {
    MixtureSpec s;
    s.classes = {gauss("0", {-1.0, 0.0}, {0.1, 0, 0, 0.1}), gauss("4", {1.0, 0.5}, {0.1, 0, 0, 0.1}),
                 gauss("9", {1.0, -0.5}, {0.1, 0, 0, 0.1})};
    return synth_gaussian_mixture(s, n, seed).data;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace

TEST_CASE("denoising loss") {
    Perturbation p;
    p.std = 0.5;
    p.eps = {1.0f, -2.0f};
    const std::vector<float> exact = {-2.0f, 4.0f};
    CHECK(dsm_loss(exact, p) == 0.0);
    const std::vector<float> zero = {0.0f, 0.0f};
    CHECK(dsm_loss(zero, p) == doctest::Approx(5.0));
    const std::vector<float> off = {0.0f, 4.0f};  // residual (1, 0)
    CHECK(dsm_loss(off, p) == doctest::Approx(1.0));

    Perturbation q = p;
    q.eps = {0.0f, 0.0f};
    std::vector<Perturbation> batch = {p, q};
    Matrix s(2, 2, {0.0f, 0.0f, 2.0f, 0.0f});
    // row 0: |eps|^2 = 5; row 1: |0.5 * (2, 0)|^2 = 1
    CHECK(dsm_loss(s, batch) == doctest::Approx(3.0));
    CHECK(dsm_loss(Matrix(0, 2), std::span<const Perturbation>()) == 0.0);

    Perturbation z = p;
    z.std = 0.0;
    CHECK_THROWS_AS(dsm_loss(zero, z), DomainError);
    const std::vector<float> three = {0.0f, 0.0f, 0.0f};
    CHECK_THROWS_AS(dsm_loss(three, p), ShapeError);
    const std::vector<float> inf = {INFINITY, 0.0f};
    CHECK_THROWS_AS(dsm_loss(inf, p), NumericError);
}

TEST_CASE("uniform times hit each branch in proportion to its length") {
    const auto h = fixture("digits_049.json");
    NoiseProcess p;
    const auto w = detail::default_window(p, kTimeFloor);
    const int n = 10000;
    for (const auto& name : h.classes()) {
        const std::size_t c = h.class_index(name);
        Rng rng(21, "hits", {c});
        std::vector<int> hits(h.task_count(), 0);
        for (int k = 0; k < n; ++k) ++hits[h.lookup(c, detail::sample_time(p, w, rng)).task];
        for (const auto& b : h.branches()) {
            const double expect = b.contains(c) ? (b.end - std::max(b.start, kTimeFloor)) / (1.0 - kTimeFloor) : 0.0;
            const double sd = std::sqrt(n * expect * (1.0 - expect));
            CHECK(std::abs(hits[b.task] - n * expect) <= 3.0 * sd + 1e-9);
        }
    }

    NoiseProcess d(DdpmSpec{});
    const auto dw = detail::default_window(d, kTimeFloor);
    Rng rng(22);
    int lo = 1001, hi = 0;
    for (int k = 0; k < n; ++k) {
        const double t = detail::sample_time(d, dw, rng);
        CHECK(t == std::floor(t));
        lo = std::min(lo, static_cast<int>(t));
        hi = std::max(hi, static_cast<int>(t));
    }
    CHECK(lo == 1);
    CHECK(hi == 1000);
}

TEST_CASE("training is reproducible") {
    const auto h = fixture("digits_049.json");
    const auto data = three_digits(100, 2);
    NoiseProcess p;
    TrainConfig cfg;
    cfg.batch_size = 32;
    cfg.epochs = 3;
    cfg.seed = 4;
    Denoiser a(ModelKind::branched, 2, h.task_count(), p, small_arch(), 1);
    Denoiser b(ModelKind::branched, 2, h.task_count(), p, small_arch(), 1);
    const auto ha = train(a, &h, h.classes(), data, cfg);
    const auto hb = train(b, &h, h.classes(), data, cfg);
    CHECK(a.store() == b.store());
    CHECK(ha.size() == 3 * 10);
    std::ostringstream sa, sb;
    write_loss_csv(sa, ha, false);
    write_loss_csv(sb, hb, false);
    CHECK(sa.str() == sb.str());
    CHECK(sa.str().rfind("epoch,step,task,loss,seconds\n", 0) == 0);

    cfg.seed = 5;
    Denoiser c(ModelKind::branched, 2, h.task_count(), p, small_arch(), 1);
    train(c, &h, h.classes(), data, cfg);
    CHECK(!(a.store() == c.store()));

    Denoiser g(ModelKind::label_guided, 2, 3, p, small_arch(), 1);
    CHECK_THROWS_AS(train(a, nullptr, h.classes(), data, cfg), StateError);
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(g, nullptr, h.classes(), data, cfg), DomainError);
}

TEST_CASE("unknown classes and shape mismatches are rejected") {
    const auto h = fixture("digits_049.json");
    NoiseProcess p;
    Denoiser m(ModelKind::branched, 2, h.task_count(), p, small_arch(), 1);
    MixtureSpec s;
    s.classes = {gauss("7", {0.0, 0.0}, {1, 0, 0, 1})};
    const auto stray = synth_gaussian_mixture(s, 10, 1).data;
    CHECK_THROWS_AS(train(m, &h, h.classes(), stray, TrainConfig{}), LookupError);
    MixtureSpec s3;
    s3.classes = {gauss("0", {0.0, 0.0, 0.0}, {1, 0, 0, 0, 1, 0, 0, 0, 1})};
    CHECK_THROWS_AS(train(m, &h, h.classes(), synth_gaussian_mixture(s3, 10, 1).data, TrainConfig{}), ShapeError);
}

TEST_CASE("loss decreases") {
    const auto h = fixture("digits_049.json");
    const auto data = three_digits(500, 3);
    NoiseProcess p;
    TrainConfig cfg;
    cfg.batch_size = 64;
    cfg.epochs = 20;
    cfg.seed = 6;
    for (auto kind : {ModelKind::branched, ModelKind::label_guided}) {
        Denoiser m(kind, 2, kind == ModelKind::branched ? h.task_count() : 3, p, small_arch(), 2);
        const auto hist = train(m, kind == ModelKind::branched ? &h : nullptr, h.classes(), data, cfg);
        const std::size_t tenth = hist.size() / 10;
        std::vector<double> first, last;
        for (std::size_t i = 0; i < tenth; ++i) {
            first.push_back(hist[i].loss);
            last.push_back(hist[hist.size() - 1 - i].loss);
        }
        CHECK(median(last) < median(first));
    }
}

TEST_CASE("learned score approaches the exact Gaussian score") {
    MixtureSpec s;
    const Eigen::Vector2d mu(1.0, -0.5);
    Eigen::Matrix2d cov;
    cov << 0.3, 0.1, 0.1, 0.2;
    s.classes = {gauss("g", {mu(0), mu(1)}, {0.3, 0.1, 0.1, 0.2})};
    const auto data = synth_gaussian_mixture(s, 4000, 7).data;
    BranchHierarchy h({"g"}, 1.0, {{0.0, 1.0, {0}, 0}});
    NoiseProcess p;
    Denoiser m(ModelKind::branched, 2, 1, p, small_arch(64), 3);

    const double t = 0.25;
    const auto mc = marginal(SdeSpec{}, t);
    const Eigen::Matrix2d pc = (mc.mean_coef * mc.mean_coef * cov + mc.std * mc.std * Eigen::Matrix2d::Identity()).inverse();
    Rng rng(8);
    Matrix x(500, 2);
    for (std::size_t i = 0; i < x.rows; ++i) {
        const auto pt = perturb(p, data.features.row(i), t, rng);
        x(i, 0) = pt.x_t[0];
        x(i, 1) = pt.x_t[1];
    }
    auto mse = [&]() {
        const auto sc = m.score(x, t, 0);
        double acc = 0.0;
        for (std::size_t i = 0; i < x.rows; ++i) {
            const Eigen::Vector2d xi(x(i, 0), x(i, 1));
            const Eigen::Vector2d exact = -pc * (xi - mc.mean_coef * mu);
            acc += std::pow(sc(i, 0) - exact(0), 2) + std::pow(sc(i, 1) - exact(1), 2);
        }
        return acc / static_cast<double>(x.rows);
    };
    const double before = mse();
    TrainConfig cfg;
    cfg.batch_size = 256;
    cfg.epochs = 60;
    cfg.seed = 9;
    train(m, &h, h.classes(), data, cfg);
    const double after = mse();
    MESSAGE("score mse untrained " << before << ", trained " << after);
    CHECK(after * 10.0 <= before);
}

TEST_CASE("extension trains only the new head") {
    const auto h = fixture("digits_049.json");
    const auto data = three_digits(200, 10);
    NoiseProcess p;
    Denoiser m(ModelKind::branched, 2, h.task_count(), p, small_arch(), 4);
    TrainConfig cfg;
    cfg.batch_size = 64;
    cfg.epochs = 2;
    cfg.seed = 11;
    train(m, &h, h.classes(), data, cfg);
    const ParameterStore before = m.store();

    MixtureSpec s;
    s.classes = {gauss("7", {1.2, 0.3}, {0.1, 0, 0, 0.1})};
    const auto seven = synth_gaussian_mixture(s, 200, 12).data;
    TrainConfig ecfg = cfg;
    ecfg.epochs = 3;
    const auto r = extend(m, h, seven, "7", "4", 0.38, ecfg);

    CHECK(validate(r.hierarchy).empty());
    CHECK(r.hierarchy.size() == h.size() + 2);
    CHECK(r.new_task == h.task_count());
    CHECK(r.sibling_task == branch_lookup(h, "4", 0.0));
    CHECK(m.head_count() == h.task_count() + 1);
    CHECK(!r.history.empty());
    for (const auto& rec : r.history)
        for (const auto& tl : rec.per_task) CHECK(tl.task == r.new_task);

    for (const auto& [name, e] : before.entries()) {
        const auto& now = m.store().at(name);
        CHECK(now.values.size() == e.values.size());
        CHECK(std::memcmp(now.values.data(), e.values.data(), e.values.size() * sizeof(float)) == 0);
    }
    // the new head started as a copy of the sibling's leaf head and has moved
    bool moved = false;
    const auto src = m.head_parameters(r.sibling_task);
    const auto dst = m.head_parameters(r.new_task);
    for (std::size_t i = 0; i < src.size(); ++i)
        moved |= m.store().at(src[i]).values != m.store().at(dst[i]).values;
    CHECK(moved);

    // old classes see the same network at every time
    Matrix x(4, 2, {0.1f, 0.2f, -1.0f, 0.5f, 1.0f, 1.0f, 0.0f, -0.3f});
    for (const auto& c : h.classes())
        for (double t : {0.05, 0.3, 0.37, 0.45, 0.7}) {
            const auto old_task = branch_lookup(h, c, t);
            const auto new_task = branch_lookup(r.hierarchy, c, t);
            CHECK(m.predict_noise(x, t, new_task) == m.predict_noise(x, t, old_task));
        }

    Denoiser g(ModelKind::label_guided, 2, 3, p, small_arch(), 4);
    CHECK_THROWS_AS(extend(g, h, seven, "7", "4", 0.38, ecfg), StateError);
    Denoiser m2(ModelKind::branched, 2, h.task_count(), p, small_arch(), 4);
    CHECK_THROWS_AS(extend(m2, h, data, "7", "4", 0.38, ecfg), DataError);
}
