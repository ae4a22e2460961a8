#pragma once

// Run configuration: a flat JSON object with dotted keys. Every key has a
// default; a config file overrides defaults and explicit flags override the
// file. Relative paths in a file resolve against the file's directory.

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "data_io.hpp"
#include "denoiser.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "hierarchy.hpp"
#include "json.hpp"
#include "sampling.hpp"
#include "training.hpp"

namespace bdiff {

class RunConfig {
public:
    RunConfig() : values_(defaults()) {}

    static nlohmann::json defaults() {
        return {
            {"seed", 0},
            {"process.type", "vp-sde"},
            {"process.beta_min", 0.1},
            {"process.beta_slope", 0.9},
            {"process.horizon", 1.0},
            {"process.ddpm_beta_base", 1e-4},
            {"process.ddpm_beta_step", 1e-5},
            {"process.ddpm_steps", 1000},
            {"arch.width", 128},
            {"arch.trunk_layers", 3},
            {"arch.head_layers", 2},
            {"arch.time_frequencies", 32},
            {"arch.label_dim", 16},
            {"data.path", ""},
            {"data.label_col", "class"},
            {"data.standardize", false},
            {"data.mixture", ""},
            {"data.n_per_class", 1000},
            {"data.seed", 0},
            {"discover.eps", nullptr},  // 0.005 continuous, 0.001 discrete
            {"discover.n", 500},
            {"discover.grid_points", 1000},
            {"discover.sigma", 3.0},
            {"hierarchy.path", ""},
            {"train.batch_size", 128},
            {"train.learning_rate", 1e-3},
            {"train.epochs", 1},
            {"train.t_floor", kTimeFloor},
            {"sample.n", 1000},
            {"sample.seed", nullptr},  // falls back to seed
            {"sample.steps", 1000},
            {"sample.snr", 0.16},
            {"sample.corrector", true},
            {"extend.mixture", ""},
            {"extend.new_class", ""},
            {"extend.sibling", ""},
            {"extend.attach_time", 0.5},
            {"extend.epochs", 10},
            {"extend.batch_size", 128},
            {"extend.learning_rate", 1e-3},
            {"extend.seed", 0},
            {"transmute.from", ""},
            {"transmute.to", ""},
            {"robust.reruns", 10},
            {"bench.trials", 10},
        };
    }

    static std::vector<std::string> keys() {
        std::vector<std::string> out;
        const nlohmann::json d = defaults();
        for (auto it = d.begin(); it != d.end(); ++it) out.push_back(it.key());
        return out;
    }

    /// Merges a config file over the current values.
    void load_file(const std::string& path) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("config '" + path + "' is not valid JSON: " + e.what());
        }
        if (!j.is_object()) throw DataError("config '" + path + "' must be a JSON object");
        const auto dir = std::filesystem::path(path).parent_path();
        for (const auto& [k, v] : j.items()) {
            if (!values_.contains(k)) throw DataError("config '" + path + "': unknown key '" + k + "'");
            if (v.is_string() && is_path_key(k) && !v.get<std::string>().empty()) {
                const std::filesystem::path p(v.get<std::string>());
                values_[k] = p.is_absolute() ? p.string() : (dir / p).lexically_normal().string();
            } else {
                values_[k] = v;
            }
        }
        source_ = path;
    }

    /// Sets a key from a flag value, parsed with the type of its default.
    void set_text(const std::string& key, const std::string& text) {
        if (!values_.contains(key)) throw DataError("unknown config key '" + key + "'");
        const nlohmann::json defs = defaults();
        const auto& d = defs.at(key);
        try {
            if (d.is_boolean()) {
                if (text == "true" || text == "1") values_[key] = true;
                else if (text == "false" || text == "0") values_[key] = false;
                else throw DataError("");
            } else if (d.is_number_integer()) {
                std::size_t used = 0;
                const long long v = std::stoll(text, &used);
                if (used != text.size()) throw DataError("");
                values_[key] = v;
            } else if (d.is_number() || d.is_null()) {
                std::size_t used = 0;
                const double v = std::stod(text, &used);
                if (used != text.size()) throw DataError("");
                values_[key] = v;
            } else {
                values_[key] = text;
            }
        } catch (const std::exception&) {
            throw DataError("invalid value '" + text + "' for " + key);
        }
    }

    void set(const std::string& key, nlohmann::json v) {
        if (!values_.contains(key)) throw DataError("unknown config key '" + key + "'");
        values_[key] = std::move(v);
    }

    bool is_set(const std::string& key) const { return !values_.at(key).is_null(); }

    template <class T>
    T get(const std::string& key) const {
        if (!values_.contains(key)) throw DataError("unknown config key '" + key + "'");
        try {
            return values_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw DataError("config key '" + key + "' has the wrong type");
        }
    }

    std::string str(const std::string& key) const { return get<std::string>(key); }
    const nlohmann::json& json() const { return values_; }
    const std::string& source() const { return source_; }

private:
    static bool is_path_key(const std::string& k) {
        static const std::set<std::string> paths = {"data.path", "data.mixture", "hierarchy.path", "extend.mixture"};
        return paths.count(k) != 0;
    }

    nlohmann::json values_;
    std::string source_;
};

inline NoiseProcess make_process(const RunConfig& c) {
    const auto type = c.str("process.type");
    if (type == "vp-sde")
        return NoiseProcess(SdeSpec{c.get<double>("process.beta_min"), c.get<double>("process.beta_slope"),
                                    c.get<double>("process.horizon")});
    if (type == "ddpm")
        return NoiseProcess(DdpmSpec{c.get<double>("process.ddpm_beta_base"), c.get<double>("process.ddpm_beta_step"),
                                     c.get<int>("process.ddpm_steps")});
    throw DataError("process.type must be 'vp-sde' or 'ddpm', got '" + type + "'");
}

inline ArchConfig make_arch(const RunConfig& c) {
    ArchConfig a;
    a.width = c.get<std::size_t>("arch.width");
    a.trunk_layers = c.get<std::size_t>("arch.trunk_layers");
    a.head_layers = c.get<std::size_t>("arch.head_layers");
    a.time_frequencies = c.get<std::size_t>("arch.time_frequencies");
    a.label_dim = c.get<std::size_t>("arch.label_dim");
    if (a.width < 1 || a.trunk_layers < 1 || a.head_layers < 1) throw DomainError("architecture sizes must be >= 1");
    return a;
}

inline TrainConfig make_train(const RunConfig& c) {
    TrainConfig t;
    t.batch_size = c.get<std::size_t>("train.batch_size");
    t.learning_rate = c.get<double>("train.learning_rate");
    t.epochs = c.get<std::size_t>("train.epochs");
    t.seed = c.get<std::uint64_t>("seed");
    t.t_floor = c.get<double>("train.t_floor");
    return t;
}

inline TrainConfig make_extend_train(const RunConfig& c) {
    TrainConfig t = make_train(c);
    t.batch_size = c.get<std::size_t>("extend.batch_size");
    t.learning_rate = c.get<double>("extend.learning_rate");
    t.epochs = c.get<std::size_t>("extend.epochs");
    t.seed = c.get<std::uint64_t>("extend.seed");
    return t;
}

inline SampleConfig make_sample(const RunConfig& c) {
    SampleConfig s;
    s.steps = c.get<std::size_t>("sample.steps");
    s.snr = c.get<double>("sample.snr");
    s.corrector = c.get<bool>("sample.corrector");
    s.seed = c.is_set("sample.seed") ? c.get<std::uint64_t>("sample.seed") : c.get<std::uint64_t>("seed");
    if (!(s.snr > 0.0)) throw DomainError("sample.snr must be > 0");
    return s;
}

inline DiscoveryConfig make_discovery(const RunConfig& c, const NoiseProcess& process) {
    DiscoveryConfig d;
    d.n = c.get<std::size_t>("discover.n");
    d.grid_points = c.get<std::size_t>("discover.grid_points");
    d.sigma = c.get<double>("discover.sigma");
    d.epsilon = c.is_set("discover.eps") ? c.get<double>("discover.eps") : (process.discrete() ? 0.001 : 0.005);
    return d;
}

inline SynthResult make_synthetic(const RunConfig& c, const std::string& mixture_key = "data.mixture") {
    const auto path = c.str(mixture_key);
    if (path.empty()) throw DataError(mixture_key + " is not set");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("mixture '" + path + "' is not valid JSON: " + e.what());
    }
    return synth_gaussian_mixture(mixture_from_json(j), c.get<std::size_t>("data.n_per_class"),
                                  c.get<std::uint64_t>("data.seed"));
}

inline BranchHierarchy load_hierarchy(const std::string& path) {
    try {
        return hierarchy_from_json(nlohmann::json::parse(read_file(path)));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("hierarchy '" + path + "' is not valid JSON: " + e.what());
    }
}

}  // namespace bdiff
