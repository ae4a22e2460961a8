// bdiff: command-line front end for branched diffusion models.
//
//   bdiff [--config FILE] <command> [options]
//
// Settings resolve as defaults < config file (--config or $BDIFF_CONFIG) <
// flags. Every config key is also a flag (--train.epochs 5); the short
// aliases below map onto the same keys.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <list>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bdiff/config.hpp"
#include "bdiff/data_io.hpp"
#include "bdiff/evaluation.hpp"
#include "bdiff/hierarchy.hpp"
#include "bdiff/sampling.hpp"
#include "bdiff/training.hpp"

namespace {

using namespace bdiff;
using nlohmann::json;

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

// ---------------------------------------------------------------------------
// Option plumbing

struct Command {
    CLI::App* app = nullptr;
    std::map<std::string, std::string> dotted;        // config key -> flag text
    std::map<std::string, std::string> alias_text;    // alias flag -> text
    std::map<std::string, std::string> alias_key;     // alias flag -> config key
};

std::string g_config_path;
std::list<Command> g_commands;

Command& command(CLI::App& root, const std::string& name, const std::string& help) {
    auto& cmd = g_commands.emplace_back();
    cmd.app = root.add_subcommand(name, help);
    for (const auto& key : RunConfig::keys())
        cmd.app->add_option("--" + key, cmd.dotted[key])->group("Config keys");
    return cmd;
}

void alias(Command& cmd, const std::string& flag, const std::string& key, const std::string& help) {
    // the alias takes over a top-level key of the same name (--seed)
    if (auto it = cmd.dotted.find(flag.substr(2)); it != cmd.dotted.end()) {
        cmd.app->remove_option(cmd.app->get_option(flag));
        cmd.dotted.erase(it);
    }
    cmd.alias_key[flag] = key;
    cmd.app->add_option(flag, cmd.alias_text[flag], help + " (" + key + ")");
}

RunConfig resolve(const Command& cmd) {
    RunConfig c;
    std::string path = g_config_path;
    if (path.empty())
        if (const char* env = std::getenv("BDIFF_CONFIG")) path = env;
    if (!path.empty()) c.load_file(path);
    for (const auto& [key, text] : cmd.dotted)
        if (cmd.app->get_option("--" + key)->count() > 0) c.set_text(key, text);
    for (const auto& [flag, text] : cmd.alias_text)
        if (cmd.app->get_option(flag)->count() > 0) c.set_text(cmd.alias_key.at(flag), text);
    return c;
}

// ---------------------------------------------------------------------------
// Data helpers

TabularDataset drop_columns(const TabularDataset& d, const std::set<std::string>& names) {
    std::vector<std::size_t> keep;
    for (std::size_t j = 0; j < d.feature_names.size(); ++j)
        if (!names.count(d.feature_names[j])) keep.push_back(j);
    if (keep.size() == d.dim()) return d;
    TabularDataset out = d;
    out.feature_names.clear();
    for (auto j : keep) out.feature_names.push_back(d.feature_names[j]);
    out.features = Matrix(d.size(), keep.size());
    for (std::size_t i = 0; i < d.size(); ++i)
        for (std::size_t k = 0; k < keep.size(); ++k) out.features(i, k) = d.features(i, keep[k]);
    return out;
}

// Sample files carry t and seed columns next to the features.
TabularDataset load_table(const std::string& path, const std::string& label_col) {
    return drop_columns(load_csv(path, label_col), {"t", "seed"});
}

TabularDataset load_dataset(const RunConfig& c) {
    TabularDataset d;
    if (!c.str("data.path").empty())
        d = load_table(c.str("data.path"), c.str("data.label_col"));
    else if (!c.str("data.mixture").empty())
        d = make_synthetic(c).data;
    else
        throw DataError("no training data: pass --data or set data.mixture");
    if (d.size() == 0) throw DataError("dataset is empty");
    return c.get<bool>("data.standardize") ? standardize(d) : d;
}

Matrix to_model_scale(const Checkpoint& ck, const Matrix& x) {
    if (ck.mean.empty()) return x;
    if (ck.mean.size() != x.cols) throw ShapeError("data dim does not match the checkpoint");
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j)
            out(i, j) = static_cast<float>((x(i, j) - ck.mean[j]) / ck.scale[j]);
    return out;
}

SampleBatch to_raw(const Checkpoint& ck, SampleBatch b) {
    b.x = destandardize(b.x, ck.mean, ck.scale);
    return b;
}

void write_batches(const std::string& path, const Checkpoint& ck, const std::vector<SampleBatch>& batches) {
    std::vector<SampleBatch> raw;
    for (const auto& b : batches) raw.push_back(to_raw(ck, b));
    std::vector<const SampleBatch*> ptrs;
    for (const auto& b : raw) ptrs.push_back(&b);
    std::ostringstream os;
    write_samples_csv(os, ck.model.dim(), ptrs);
    write_file_atomic(path, os.str());
}

const BranchHierarchy& branched(const Checkpoint& ck) {
    if (ck.model.kind() != ModelKind::branched || !ck.hierarchy)
        throw StateError("this command needs a branched checkpoint");
    return *ck.hierarchy;
}

std::string with_suffix(const std::string& path, const std::string& suffix) {
    const auto dot = path.rfind('.');
    const auto slash = path.rfind('/');
    if (dot != std::string::npos && (slash == std::string::npos || dot > slash)) return path.substr(0, dot) + suffix;
    return path + suffix;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const Command& cmd, const std::string& out) {
    const auto c = resolve(cmd);
    const auto r = make_synthetic(c);
    write_file_atomic(out, dataset_to_csv(r.data, c.str("data.label_col")));
    std::cout << "wrote " << r.data.size() << " rows, " << r.data.classes.size() << " classes, dim " << r.data.dim()
              << "\n";
}

void cmd_discover(const Command& cmd, const std::string& out, std::string curves_out) {
    const auto c = resolve(cmd);
    const auto data = load_dataset(c);
    const auto process = make_process(c);
    const auto cfg = make_discovery(c, process);
    Rng rng(c.get<std::uint64_t>("seed"), "discover", {});
    const auto r = discover(data, process, cfg, rng);
    write_file_atomic(out, to_json(r.hierarchy).dump(1) + "\n");

    if (curves_out.empty()) curves_out = with_suffix(out, ".curves.csv");
    std::ostringstream os;
    const auto& names = data.classes;
    os << "t";
    for (std::size_t i = 0; i < names.size(); ++i)
        for (std::size_t j = i; j < names.size(); ++j) os << ',' << names[i] << '~' << names[j];
    os << '\n';
    for (std::size_t k = 0; k < r.smoothed.grid.size(); ++k) {
        os << fmt("%.9g", r.smoothed.grid[k]);
        for (std::size_t i = 0; i < names.size(); ++i)
            for (std::size_t j = i; j < names.size(); ++j) os << ',' << fmt("%.9g", r.smoothed.curve(i, j)[k]);
        os << '\n';
    }
    write_file_atomic(curves_out, os.str());
    std::cout << branch_table(r.hierarchy);
}

void cmd_train(const Command& cmd, const std::string& out, std::string loss_out, bool baseline,
               const std::string& resume, bool timed) {
    const auto c = resolve(cmd);
    const auto data = load_dataset(c);
    const auto tcfg = make_train(c);

    Checkpoint ck;
    std::size_t first_epoch = 0;
    if (!resume.empty()) {
        ck = load_checkpoint(resume);
        first_epoch = ck.epochs;
        if (baseline != (ck.model.kind() == ModelKind::label_guided))
            throw StateError("--baseline does not match the resumed checkpoint");
    } else {
        const auto process = make_process(c);
        auto arch = make_arch(c);
        std::optional<BranchHierarchy> h;
        if (!c.str("hierarchy.path").empty()) {
            h = load_hierarchy(c.str("hierarchy.path"));
            const auto problems = validate(*h);
            if (!problems.empty()) throw DataError("invalid hierarchy: " + problems.front());
        }
        if (!baseline) {
            if (!h) throw DataError("branched training needs --hierarchy (or hierarchy.path)");
            ck.model = Denoiser(ModelKind::branched, data.dim(), h->task_count(), process, arch, tcfg.seed);
            ck.hierarchy = h;
            ck.classes = h->classes();
        } else {
            ck.classes = h ? h->classes() : data.classes;
            if (h) arch = capacity_matched_arch(data.dim(), h->task_count(), ck.classes.size(), arch);
            ck.model = Denoiser(ModelKind::label_guided, data.dim(), ck.classes.size(), process, arch, tcfg.seed);
        }
        ck.seed = tcfg.seed;
        ck.mean = data.mean;
        ck.scale = data.scale;
    }

    const auto t0 = std::chrono::steady_clock::now();
    auto hist = train(ck.model, ck.hierarchy ? &*ck.hierarchy : nullptr, ck.classes, data, tcfg, {}, first_epoch);
    const std::size_t per_epoch = (data.size() + tcfg.batch_size - 1) / tcfg.batch_size;
    for (auto& r : hist) r.step += first_epoch * per_epoch;
    ck.epochs = first_epoch + tcfg.epochs;
    save_checkpoint(ck, out);

    if (loss_out.empty()) loss_out = with_suffix(out, ".loss.csv");
    std::ostringstream os;
    write_loss_csv(os, hist, timed);
    write_file_atomic(loss_out, os.str());

    std::cout << to_string(ck.model.kind()) << " model: " << ck.model.head_count() << " head(s), "
              << ck.model.trainable_parameter_count() << " trainable parameters\n"
              << "epochs " << first_epoch << ".." << ck.epochs - 1 << ", " << hist.size() << " steps, final loss "
              << fmt("%.6g", hist.back().loss) << ", "
              << fmt("%.1f", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) << " s\n";
}

void cmd_sample(const Command& cmd, const std::string& ckpt, const std::string& cls, bool all, bool cached,
                const std::string& out) {
    if (cls.empty() == !all) throw DataError("pass exactly one of --class or --all");
    if (cached && !all) throw DataError("--cached requires --all");
    const auto c = resolve(cmd);
    const auto ck = load_checkpoint(ckpt);
    const auto cfg = make_sample(c);
    const auto n = c.get<std::size_t>("sample.n");

    std::vector<SampleBatch> batches;
    if (ck.model.kind() == ModelKind::label_guided) {
        if (cached) throw StateError("--cached needs a branched checkpoint");
        const auto names = all ? ck.classes : std::vector<std::string>{cls};
        for (const auto& name : names) batches.push_back(sample_label_guided(ck.model, ck.classes, name, n, cfg));
    } else {
        const auto& h = branched(ck);
        if (!all) {
            batches.push_back(sample_class(ck.model, h, cls, n, cfg));
        } else if (cached) {
            SampleStats stats;
            auto m = sample_all_cached(ck.model, h, n, cfg, &stats);
            for (const auto& name : h.classes()) batches.push_back(std::move(m.at(name)));
            const auto ledger = step_ledger(h, ck.model.process(), cfg.steps);
            std::cout << "step ledger: cached " << ledger.cached << ", per-class " << ledger.uncached << " (saving "
                      << fmt("%.2f", static_cast<double>(ledger.uncached) / static_cast<double>(ledger.cached))
                      << "x)\n";
        } else {
            for (const auto& name : h.classes()) batches.push_back(sample_class(ck.model, h, name, n, cfg));
        }
    }
    write_batches(out, ck, batches);
    std::cout << "wrote " << batches.size() * n << " samples to " << out << "\n";
}

void cmd_transmute(const Command& cmd, const std::string& ckpt, const std::string& input, const std::string& out,
                   const std::string& report) {
    const auto c = resolve(cmd);
    const auto from = c.str("transmute.from");
    const auto to = c.str("transmute.to");
    if (from.empty() || to.empty()) throw DataError("transmutation needs --from and --to");
    if (from == to) throw DomainError("--from and --to must differ");
    const auto ck = load_checkpoint(ckpt);
    const auto& h = branched(ck);
    const auto table = load_table(input, c.str("data.label_col"));
    const bool has_from = std::find(table.classes.begin(), table.classes.end(), from) != table.classes.end();
    const Matrix raw = has_from ? table.class_matrix(table.class_index(from)) : Matrix();
    if (raw.rows == 0) throw DataError("input has no rows of class '" + from + "'");

    const auto cfg = make_sample(c);
    const double tb = lca_branch_point(h, from, to);
    auto result = transmute(ck.model, h, to_model_scale(ck, raw), from, to, cfg);
    write_batches(out, ck, {result});

    const Matrix after = destandardize(result.x, ck.mean, ck.scale);
    const auto corr = transmutation_correlation(raw, after);
    json rep = {{"from", from}, {"to", to}, {"t_b", tb}, {"rows", raw.rows}};
    json cj = json::array();
    for (const auto& v : corr) cj.push_back(v ? json(*v) : json(nullptr));
    rep["correlation"] = cj;
    if (!report.empty()) {
        std::ostringstream os;
        os << "feature,correlation\n";
        for (std::size_t j = 0; j < corr.size(); ++j)
            os << table.feature_names[j] << ',' << (corr[j] ? fmt("%.9g", *corr[j]) : "") << '\n';
        write_file_atomic(report, os.str());
    }
    std::cout << rep.dump() << "\n";
}

void cmd_hybrid(const Command& cmd, const std::string& ckpt, const std::vector<std::string>& classes,
                const std::string& out) {
    if (classes.size() != 2) throw DataError("--classes takes exactly two names, e.g. --classes a,b");
    const auto c = resolve(cmd);
    const auto ck = load_checkpoint(ckpt);
    const auto& h = branched(ck);
    const auto cfg = make_sample(c);
    const auto n = c.get<std::size_t>("sample.n");
    const auto b = hybrid(ck.model, h, classes[0], classes[1], n, cfg);
    write_batches(out, ck, {b});
    std::cout << json{{"classes", classes}, {"t_b", b.t}, {"rows", n}}.dump() << "\n";
}

void cmd_extend(const Command& cmd, const std::string& ckpt, const std::string& out) {
    const auto c = resolve(cmd);
    auto ck = load_checkpoint(ckpt);
    const auto h = branched(ck);
    const auto name = c.str("extend.new_class");
    const auto sibling = c.str("extend.sibling");
    if (name.empty() || sibling.empty()) throw DataError("extension needs --new-class and --sibling");
    if (!h.has_class(sibling)) throw LookupError("unknown sibling class '" + sibling + "'");

    TabularDataset data;
    if (!c.str("data.path").empty())
        data = load_table(c.str("data.path"), c.str("data.label_col"));
    else if (!c.str("extend.mixture").empty())
        data = make_synthetic(c, "extend.mixture").data;
    else
        throw DataError("no new-class data: pass --data or set extend.mixture");
    if (std::find(data.classes.begin(), data.classes.end(), name) == data.classes.end())
        throw DataError("data has no rows of class '" + name + "'");
    data = data.subset({name});
    data.features = to_model_scale(ck, data.features);

    const ParameterStore before = ck.model.store();
    const auto r = extend(ck.model, h, data, name, sibling, c.get<double>("extend.attach_time"), make_extend_train(c));

    std::size_t unchanged = 0;
    for (const auto& [key, e] : before.entries()) {
        const auto& now = ck.model.store().at(key);
        if (now.values.size() == e.values.size() &&
            std::memcmp(now.values.data(), e.values.data(), e.values.size() * sizeof(float)) == 0)
            ++unchanged;
    }
    if (unchanged != before.entries().size()) throw StateError("frozen parameters changed during extension");

    ck.hierarchy = r.hierarchy;
    ck.classes = r.hierarchy.classes();
    save_checkpoint(ck, out);
    std::cout << "frozen tensors: " << unchanged << "/" << before.entries().size() << " bitwise unchanged\n"
              << "new head: task " << r.new_task << " (cloned from task " << r.sibling_task << "), "
              << r.history.size() << " steps, final loss " << fmt("%.6g", r.history.back().loss) << "\n"
              << "hierarchy: " << h.size() << " -> " << r.hierarchy.size() << " branches\n"
              << branch_table(r.hierarchy);
}

void cmd_eval(const Command& cmd, const std::string& generated, const std::string& reference, const std::string& out) {
    const auto c = resolve(cmd);
    const auto label = c.str("data.label_col");
    const auto g = load_table(generated, label);
    const auto r = load_table(reference, label);
    if (g.dim() != r.dim())
        throw ShapeError("generated dim " + std::to_string(g.dim()) + " != reference dim " + std::to_string(r.dim()));
    std::map<std::string, Matrix> gm, rm;
    for (std::size_t k = 0; k < g.classes.size(); ++k) gm[g.classes[k]] = g.class_matrix(k);
    for (std::size_t k = 0; k < r.classes.size(); ++k) rm[r.classes[k]] = r.class_matrix(k);
    const auto rep = metrics_report(gm, rm);
    if (!out.empty()) write_file_atomic(out, rep.dump(2) + "\n");
    std::cout << "class\tn\tfrechet\tmean_w1\n";
    for (const auto& [name, m] : rep["classes"].items()) {
        double w = 0.0;
        for (const auto& v : m["wasserstein1"]) w += v.get<double>();
        w /= static_cast<double>(m["wasserstein1"].size());
        std::cout << name << '\t' << m["n_generated"].get<std::size_t>() << '\t'
                  << fmt("%.6g", m["frechet"].get<double>()) << '\t' << fmt("%.6g", w) << '\n';
    }
}

struct MeanSe {
    double mean = 0.0;
    double se = 0.0;
};

MeanSe mean_se(const std::vector<double>& v) {
    MeanSe r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double s = 0.0;
        for (double x : v) s += (x - r.mean) * (x - r.mean);
        r.se = std::sqrt(s / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
    }
    return r;
}

void cmd_bench(const Command& cmd, const std::string& ckpt, const std::string& out) {
    const auto c = resolve(cmd);
    const auto ck = load_checkpoint(ckpt);
    const auto& h = branched(ck);
    const auto cfg = make_sample(c);
    const auto n = c.get<std::size_t>("sample.n");
    const auto trials = c.get<std::size_t>("bench.trials");
    if (trials < 1) throw DomainError("bench needs --trials >= 1");
    using clock = std::chrono::steady_clock;
    std::vector<double> tc, tu;
    for (std::size_t k = 0; k < trials; ++k) {
        auto t0 = clock::now();
        sample_all_cached(ck.model, h, n, cfg);
        auto t1 = clock::now();
        for (const auto& name : h.classes()) sample_class(ck.model, h, name, n, cfg);
        auto t2 = clock::now();
        tc.push_back(std::chrono::duration<double>(t1 - t0).count());
        tu.push_back(std::chrono::duration<double>(t2 - t1).count());
    }
    const auto a = mean_se(tc);
    const auto b = mean_se(tu);
    const auto ledger = step_ledger(h, ck.model.process(), cfg.steps);
    const double speedup = b.mean / a.mean;
    std::cout << "classes " << h.classes().size() << ", chains per class " << n << ", trials " << trials << "\n"
              << "method\tsteps\ttime (s)\n"
              << "cached\t" << ledger.cached << '\t' << fmt("%.4f", a.mean) << " ± " << fmt("%.4f", a.se) << "\n"
              << "per-class\t" << ledger.uncached << '\t' << fmt("%.4f", b.mean) << " ± " << fmt("%.4f", b.se) << "\n"
              << "speedup " << fmt("%.2f", speedup) << "x (step ratio "
              << fmt("%.2f", static_cast<double>(ledger.uncached) / static_cast<double>(ledger.cached)) << "x)\n";
    if (!out.empty()) {
        json j = {{"trials", trials},
                  {"n", n},
                  {"cached", {{"steps", ledger.cached}, {"mean", a.mean}, {"se", a.se}, {"times", tc}}},
                  {"per_class", {{"steps", ledger.uncached}, {"mean", b.mean}, {"se", b.se}, {"times", tu}}},
                  {"speedup", speedup}};
        write_file_atomic(out, j.dump(2) + "\n");
    }
}

// ---------------------------------------------------------------------------
// SVG plots

struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t col(const std::string& name) const {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return j;
        throw LookupError("no column '" + name + "' in the input");
    }
    bool has(const std::string& name) const { return std::find(header.begin(), header.end(), name) != header.end(); }
};

Table read_table(const std::string& path) {
    auto rows = parse_csv(read_file(path));
    if (rows.empty()) throw DataError("'" + path + "' has no header");
    Table t;
    t.header = rows.front();
    rows.erase(rows.begin());
    t.rows = std::move(rows);
    return t;
}

std::optional<double> cell(const Table& t, std::size_t r, std::size_t j) {
    if (j >= t.rows[r].size()) return std::nullopt;
    const auto v = parse_real(t.rows[r][j]);
    if (!v || !std::isfinite(*v)) return std::nullopt;
    return v;
}

struct Frame {
    double x0, x1, y0, y1;
    static constexpr double W = 640, H = 420, L = 70, R = 20, T = 30, B = 50;

    double px(double x) const { return L + (x - x0) / (x1 - x0) * (W - L - R); }
    double py(double y) const { return H - B - (y - y0) / (y1 - y0) * (H - T - B); }
};

Frame frame_for(double x0, double x1, double y0, double y1) {
    if (!(x1 > x0)) x1 = x0 + 1.0;
    if (!(y1 > y0)) y1 = y0 + 1.0;
    const double dx = 0.03 * (x1 - x0), dy = 0.05 * (y1 - y0);
    return {x0 - dx, x1 + dx, y0 - dy, y1 + dy};
}

const char* palette(std::size_t k) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    return colors[k % 10];
}

std::string svg_open(const Frame& f, const std::string& xlabel, const std::string& ylabel) {
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::W << "\" height=\"" << Frame::H
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<g stroke=\"black\" fill=\"none\"><rect x=\"" << Frame::L << "\" y=\"" << Frame::T << "\" width=\""
      << Frame::W - Frame::L - Frame::R << "\" height=\"" << Frame::H - Frame::T - Frame::B << "\"/></g>\n";
    for (int k = 0; k <= 4; ++k) {
        const double x = f.x0 + (f.x1 - f.x0) * k / 4.0;
        const double y = f.y0 + (f.y1 - f.y0) * k / 4.0;
        s << "<text x=\"" << fmt("%.1f", f.px(x)) << "\" y=\"" << Frame::H - Frame::B + 16
          << "\" text-anchor=\"middle\">" << fmt("%.3g", x) << "</text>\n";
        s << "<text x=\"" << Frame::L - 6 << "\" y=\"" << fmt("%.1f", f.py(y) + 4)
          << "\" text-anchor=\"end\">" << fmt("%.3g", y) << "</text>\n";
    }
    s << "<text x=\"" << (Frame::L + Frame::W - Frame::R) / 2 << "\" y=\"" << Frame::H - 12
      << "\" text-anchor=\"middle\">" << xlabel << "</text>\n"
      << "<text x=\"16\" y=\"" << (Frame::T + Frame::H - Frame::B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (Frame::T + Frame::H - Frame::B) / 2 << ")\">" << ylabel << "</text>\n";
    return s.str();
}

std::string legend(const std::vector<std::string>& names) {
    std::ostringstream s;
    for (std::size_t k = 0; k < names.size() && k < 12; ++k) {
        const double y = Frame::T + 14 + 16.0 * static_cast<double>(k);
        s << "<rect x=\"" << Frame::W - Frame::R - 90 << "\" y=\"" << y - 9 << "\" width=\"10\" height=\"10\" fill=\""
          << palette(k) << "\"/><text x=\"" << Frame::W - Frame::R - 75 << "\" y=\"" << y << "\">" << names[k]
          << "</text>\n";
    }
    return s.str();
}

std::string default_column(const Table& t, std::initializer_list<const char*> preferred, std::size_t fallback) {
    for (const char* p : preferred)
        if (t.has(p)) return p;
    if (fallback >= t.header.size()) throw DataError("input has too few columns");
    return t.header[fallback];
}

std::string plot_xy(const Table& t, std::string xc, std::string yc, std::string gc, bool lines) {
    if (xc.empty()) xc = lines ? default_column(t, {"step", "t"}, 0) : t.header.at(0);
    if (yc.empty()) yc = lines ? default_column(t, {"loss"}, 1) : default_column(t, {}, 1);
    if (gc.empty()) gc = lines ? (t.has("task") ? "task" : "") : (t.has("class") ? "class" : "");
    const auto xi = t.col(xc), yi = t.col(yc);
    const std::optional<std::size_t> gi = gc.empty() ? std::nullopt : std::optional(t.col(gc));

    std::vector<std::string> groups;
    std::map<std::string, std::vector<std::pair<double, double>>> pts;
    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto x = cell(t, r, xi), y = cell(t, r, yi);
        if (!x || !y) continue;
        const std::string g = gi && *gi < t.rows[r].size() ? t.rows[r][*gi] : "";
        if (!pts.count(g)) groups.push_back(g);
        pts[g].emplace_back(*x, *y);
        x0 = std::min(x0, *x);
        x1 = std::max(x1, *x);
        y0 = std::min(y0, *y);
        y1 = std::max(y1, *y);
    }
    if (groups.empty()) throw DataError("no numeric points to plot");
    const auto f = frame_for(x0, x1, y0, y1);
    std::ostringstream s;
    s << svg_open(f, xc, yc);
    for (std::size_t k = 0; k < groups.size(); ++k) {
        const auto& p = pts[groups[k]];
        if (lines) {
            s << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << palette(k) << "\" points=\"";
            for (const auto& [x, y] : p) s << fmt("%.2f", f.px(x)) << ',' << fmt("%.2f", f.py(y)) << ' ';
            s << "\"/>\n";
        } else {
            s << "<g fill=\"" << palette(k) << "\" fill-opacity=\"0.6\">\n";
            for (const auto& [x, y] : p)
                s << "<circle cx=\"" << fmt("%.2f", f.px(x)) << "\" cy=\"" << fmt("%.2f", f.py(y)) << "\" r=\"2\"/>\n";
            s << "</g>\n";
        }
    }
    if (groups.size() > 1 || !groups.front().empty()) s << legend(groups);
    s << "</svg>\n";
    return s.str();
}

std::string plot_hist(const Table& t, std::string column, std::size_t bins) {
    if (bins < 1) throw DomainError("--bins must be >= 1");
    if (column.empty()) column = default_column(t, {"correlation"}, 0);
    const auto ci = t.col(column);
    std::vector<double> v;
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        if (auto x = cell(t, r, ci)) v.push_back(*x);
    if (v.empty()) throw DataError("column '" + column + "' has no numeric values");
    double lo = *std::min_element(v.begin(), v.end());
    double hi = *std::max_element(v.begin(), v.end());
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    std::vector<std::size_t> counts(bins, 0);
    for (double x : v) {
        auto k = static_cast<std::size_t>((x - lo) / (hi - lo) * static_cast<double>(bins));
        ++counts[std::min(k, bins - 1)];
    }
    const double top = static_cast<double>(*std::max_element(counts.begin(), counts.end()));
    Frame f{lo, hi, 0.0, top * 1.05};
    std::ostringstream s;
    s << svg_open(f, column, "count") << "<g fill=\"" << palette(0) << "\" stroke=\"white\">\n";
    const double w = (hi - lo) / static_cast<double>(bins);
    for (std::size_t k = 0; k < bins; ++k) {
        const double a = lo + w * static_cast<double>(k);
        s << "<rect x=\"" << fmt("%.2f", f.px(a)) << "\" y=\"" << fmt("%.2f", f.py(static_cast<double>(counts[k])))
          << "\" width=\"" << fmt("%.2f", f.px(a + w) - f.px(a)) << "\" height=\""
          << fmt("%.2f", f.py(0.0) - f.py(static_cast<double>(counts[k]))) << "\"/>\n";
    }
    s << "</g>\n</svg>\n";
    return s.str();
}

void cmd_plot(const std::string& input, const std::string& kind, const std::string& out, const std::string& x,
              const std::string& y, const std::string& group, std::size_t bins) {
    if (kind != "curve" && kind != "scatter" && kind != "hist")
        throw DataError("unknown plot kind '" + kind + "' (curve, scatter or hist)");
    const auto t = read_table(input);
    std::string svg;
    if (kind == "hist")
        svg = plot_hist(t, x.empty() ? y : x, bins);
    else
        svg = plot_xy(t, x, y, group, kind == "curve");
    write_file_atomic(out, svg);
}

// ---------------------------------------------------------------------------

int fail(const std::string& kind, const std::string& message, int code) {
    std::cerr << json{{"error", kind}, {"message", message}, {"exit", code}}.dump() << std::endl;
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchically branched diffusion models"};
    app.require_subcommand(1);
    app.fallthrough();
    app.add_option("--config", g_config_path, "config file (default: $BDIFF_CONFIG)");

    std::string out, ckpt, cls, input, report, loss_out, curves_out, resume, generated, reference, kind, px, py, group;
    std::vector<std::string> pair;
    bool all = false, cached = false, baseline = false, timed = false;
    std::size_t bins = 20;

    auto& synth = command(app, "synth", "write a dataset drawn from data.mixture");
    synth.app->add_option("--out", out, "output CSV")->required();

    auto& disc = command(app, "discover", "discover a branch hierarchy from labeled data");
    alias(disc, "--data", "data.path", "labeled CSV");
    alias(disc, "--label-col", "data.label_col", "label column");
    alias(disc, "--eps", "discover.eps", "indistinguishability tolerance");
    alias(disc, "--n", "discover.n", "pairs per distance estimate");
    alias(disc, "--seed", "seed", "random seed");
    disc.app->add_option("--out", out, "hierarchy JSON")->required();
    disc.app->add_option("--curves", curves_out, "smoothed distance curves CSV (default: <out>.curves.csv)");

    auto& tr = command(app, "train", "train a branched (or --baseline label-guided) denoiser");
    alias(tr, "--data", "data.path", "labeled CSV");
    alias(tr, "--label-col", "data.label_col", "label column");
    alias(tr, "--hierarchy", "hierarchy.path", "hierarchy JSON");
    alias(tr, "--epochs", "train.epochs", "epochs");
    alias(tr, "--seed", "seed", "random seed");
    tr.app->add_flag("--baseline", baseline, "train the label-guided baseline");
    tr.app->add_option("--resume", resume, "continue training from a checkpoint");
    tr.app->add_option("--out", out, "checkpoint path")->required();
    tr.app->add_option("--loss", loss_out, "loss CSV (default: <out>.loss.csv)");
    tr.app->add_flag("--timed", timed, "record wall-clock seconds in the loss CSV");

    auto& smp = command(app, "sample", "generate samples from a checkpoint");
    smp.app->add_option("--ckpt", ckpt, "checkpoint")->required();
    smp.app->add_option("--class", cls, "class to sample");
    smp.app->add_flag("--all", all, "sample every class");
    smp.app->add_flag("--cached", cached, "share branch prefixes across classes (with --all)");
    alias(smp, "--n", "sample.n", "samples per class");
    alias(smp, "--seed", "sample.seed", "sampling seed");
    alias(smp, "--steps", "sample.steps", "grid steps");
    smp.app->add_option("--out", out, "samples CSV")->required();

    auto& tm = command(app, "transmute", "carry objects of one class over to another");
    tm.app->add_option("--ckpt", ckpt, "checkpoint")->required();
    alias(tm, "--from", "transmute.from", "source class");
    alias(tm, "--to", "transmute.to", "target class");
    alias(tm, "--seed", "sample.seed", "sampling seed");
    alias(tm, "--steps", "sample.steps", "grid steps");
    alias(tm, "--label-col", "data.label_col", "label column of the input");
    tm.app->add_option("--input", input, "CSV with objects of the source class")->required();
    tm.app->add_option("--out", out, "transmuted CSV")->required();
    tm.app->add_option("--report", report, "per-feature correlation CSV");

    auto& hy = command(app, "hybrid", "sample hybrids at the branch point of two classes");
    hy.app->add_option("--ckpt", ckpt, "checkpoint")->required();
    hy.app->add_option("--classes", pair, "two classes, comma separated")->required()->delimiter(',');
    alias(hy, "--n", "sample.n", "number of hybrids");
    alias(hy, "--seed", "sample.seed", "sampling seed");
    alias(hy, "--steps", "sample.steps", "grid steps");
    hy.app->add_option("--out", out, "hybrid CSV")->required();

    auto& ext = command(app, "extend", "add a class with a new head, everything else frozen");
    ext.app->add_option("--ckpt", ckpt, "checkpoint")->required();
    alias(ext, "--new-class", "extend.new_class", "name of the new class");
    alias(ext, "--sibling", "extend.sibling", "existing class the new one branches from");
    alias(ext, "--attach-time", "extend.attach_time", "branch point of the new class");
    alias(ext, "--data", "data.path", "CSV with rows of the new class");
    alias(ext, "--epochs", "extend.epochs", "epochs");
    alias(ext, "--seed", "extend.seed", "random seed");
    ext.app->add_option("--out", out, "extended checkpoint")->required();

    auto& ev = command(app, "eval", "compare generated and reference samples per class");
    ev.app->add_option("--generated", generated, "samples CSV")->required();
    ev.app->add_option("--reference", reference, "reference CSV")->required();
    alias(ev, "--label-col", "data.label_col", "label column");
    ev.app->add_option("--out", out, "metrics JSON");

    auto& bn = command(app, "bench", "time cached vs per-class sampling");
    bn.app->add_option("--ckpt", ckpt, "checkpoint")->required();
    alias(bn, "--trials", "bench.trials", "repetitions");
    alias(bn, "--n", "sample.n", "chains per class");
    alias(bn, "--steps", "sample.steps", "grid steps");
    bn.app->add_option("--out", out, "timings JSON");

    auto* pl = app.add_subcommand("plot", "render a CSV as SVG");
    pl->add_option("--input", input, "CSV")->required();
    pl->add_option("--kind", kind, "curve, scatter or hist")->required();
    pl->add_option("--out", out, "SVG path")->required();
    pl->add_option("--x", px, "x column (hist: the column to bin)");
    pl->add_option("--y", py, "y column");
    pl->add_option("--group", group, "column that splits series");
    pl->add_option("--bins", bins, "histogram bins");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);
        return fail("usage", e.what(), 2);
    }

    try {
        if (*synth.app) cmd_synth(synth, out);
        else if (*disc.app) cmd_discover(disc, out, curves_out);
        else if (*tr.app) cmd_train(tr, out, loss_out, baseline, resume, timed);
        else if (*smp.app) cmd_sample(smp, ckpt, cls, all, cached, out);
        else if (*tm.app) cmd_transmute(tm, ckpt, input, out, report);
        else if (*hy.app) cmd_hybrid(hy, ckpt, pair, out);
        else if (*ext.app) cmd_extend(ext, ckpt, out);
        else if (*ev.app) cmd_eval(ev, generated, reference, out);
        else if (*bn.app) cmd_bench(bn, ckpt, out);
        else if (*pl) cmd_plot(input, kind, out, px, py, group, bins);
    } catch (const Error& e) {
        return fail(to_string(e.kind()), e.what(), e.kind() == ErrorKind::numeric ? 3 : 2);
    } catch (const std::exception& e) {
        return fail("internal", e.what(), 2);
    }
    return 0;
}
