#pragma once

// Loaders, standardization, synthetic Gaussian mixtures and the binary
// checkpoint format.
//
// Checkpoint layout (all integers little-endian):
//   "BDIF" | u32 version | u64 meta_len | meta (JSON text)
//   u64 record_count | records... | u64 FNV-1a checksum of everything before it
// record: u32 name_len | name | u32 rank | u64 dims[rank] | f32 values[prod(dims)]
// Each parameter contributes three records: values, "<name>@m", "<name>@v".

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dataset.hpp"
#include "denoiser.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "hierarchy.hpp"
#include "json.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace bdiff {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Writes via a temporary file and rename so readers never see partial output.
inline void write_file_atomic(const std::string& path, std::string_view bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write '" + tmp + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed for '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp + "' to '" + path + "': " + ec.message());
}

// ---------------------------------------------------------------------------
// CSV

/// Splits CSV text into records. Quoted fields may contain commas, doubled
/// quotes and newlines.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool field_started = false;
    std::size_t line = 1;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                if (c == '\n') ++line;
                field += c;
            }
            continue;
        }
        if (c == '"' && field.empty() && !field_started) {
            quoted = true;
            field_started = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            field_started = false;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            row.push_back(std::move(field));
            field.clear();
            field_started = false;
            if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
            row.clear();
            ++line;
        } else {
            field += c;
            field_started = true;
        }
    }
    if (quoted) throw DataError("unterminated quoted field near line " + std::to_string(line));
    if (field_started || !field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    }
    return rows;
}

inline std::optional<double> parse_real(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

/// Parses a labeled table. Every column except `label_column` is a real
/// feature. Classes are ordered by first appearance. Data rows are numbered
/// from 1 (the header is not counted) in error messages.
inline TabularDataset parse_labeled_csv(std::string_view text, const std::string& label_column) {
    const auto rows = parse_csv(text);
    if (rows.empty()) throw DataError("empty CSV: header row required");
    const auto& header = rows[0];
    auto it = std::find(header.begin(), header.end(), label_column);
    if (it == header.end()) throw DataError("missing label column '" + label_column + "'");
    const std::size_t lc = static_cast<std::size_t>(it - header.begin());
    if (header.size() < 2) throw DataError("CSV needs at least one feature column");

    TabularDataset d;
    for (std::size_t j = 0; j < header.size(); ++j)
        if (j != lc) d.feature_names.push_back(header[j]);
    const std::size_t dim = d.feature_names.size();
    std::vector<float> values;
    values.reserve((rows.size() - 1) * dim);
    std::map<std::string, std::size_t> index;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() != header.size())
            throw DataError("row " + std::to_string(r) + ": expected " + std::to_string(header.size()) +
                            " fields, got " + std::to_string(row.size()));
        for (std::size_t j = 0; j < row.size(); ++j) {
            if (j == lc) continue;
            const auto v = parse_real(row[j]);
            if (!v || !std::isfinite(*v) || !std::isfinite(static_cast<float>(*v)))
                throw DataError("row " + std::to_string(r) + ": column '" + header[j] +
                                "' has non-finite or unparsable value '" + row[j] + "'");
            values.push_back(static_cast<float>(*v));
        }
        const std::string& label = row[lc];
        if (label.empty()) throw DataError("row " + std::to_string(r) + ": empty label");
        auto [pos, inserted] = index.emplace(label, d.classes.size());
        if (inserted) d.classes.push_back(label);
        d.labels.push_back(pos->second);
    }
    d.features = Matrix(d.labels.size(), dim, std::move(values));
    return d;
}

inline TabularDataset load_csv(const std::string& path, const std::string& label_column) {
    return parse_labeled_csv(read_file(path), label_column);
}

/// Writes features plus a label column (named `label_column`).
inline std::string dataset_to_csv(const TabularDataset& d, const std::string& label_column = "class") {
    std::ostringstream os;
    for (std::size_t j = 0; j < d.dim(); ++j)
        os << (j < d.feature_names.size() ? d.feature_names[j] : "feature_" + std::to_string(j)) << ',';
    os << label_column << '\n';
    char buf[32];
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t j = 0; j < d.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(d.features(i, j)));
            os << buf << ',';
        }
        os << d.classes[d.labels[i]] << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Standardization

/// Pooled per-feature standardization (population variance). Parameters are
/// computed in double and kept on the dataset for the inverse transform.
inline TabularDataset standardize(const TabularDataset& d) {
    if (d.size() == 0) throw DataError("cannot standardize an empty dataset");
    TabularDataset out = d;
    const std::size_t n = d.size();
    out.mean.assign(d.dim(), 0.0);
    out.scale.assign(d.dim(), 0.0);
    for (std::size_t j = 0; j < d.dim(); ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += d.features(i, j);
        m /= static_cast<double>(n);
        double v = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = d.features(i, j) - m;
            v += c * c;
        }
        v /= static_cast<double>(n);
        if (!(v > 0.0)) {
            const std::string name = j < d.feature_names.size() ? d.feature_names[j] : "feature_" + std::to_string(j);
            throw DataError("feature '" + name + "' has zero variance");
        }
        out.mean[j] = m;
        out.scale[j] = std::sqrt(v);
        for (std::size_t i = 0; i < n; ++i)
            out.features(i, j) = static_cast<float>((d.features(i, j) - m) / out.scale[j]);
    }
    return out;
}

/// Maps standardized rows back to the original feature scale.
inline Matrix destandardize(const Matrix& x, const std::vector<double>& mean, const std::vector<double>& scale) {
    if (mean.empty()) return x;
    if (mean.size() != x.cols || scale.size() != x.cols) throw ShapeError("destandardize: parameter length mismatch");
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; ++i)
        for (std::size_t j = 0; j < x.cols; ++j) out(i, j) = static_cast<float>(x(i, j) * scale[j] + mean[j]);
    return out;
}

inline TabularDataset destandardize(const TabularDataset& d) {
    TabularDataset out = d;
    out.features = destandardize(d.features, d.mean, d.scale);
    out.mean.clear();
    out.scale.clear();
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic mixtures

struct GaussianClass {
    std::string name;
    std::vector<double> mean;
    std::vector<double> cov;  // row-major d x d
};

/// Class-conditional Gaussians. `shared` lists coordinates whose marginal is
/// declared common to all classes (the shared latent structure).
struct MixtureSpec {
    std::vector<GaussianClass> classes;
    std::vector<std::size_t> shared;

    std::size_t dim() const { return classes.empty() ? 0 : classes.front().mean.size(); }
};

struct SynthResult {
    TabularDataset data;
    MixtureSpec truth;
};

inline Eigen::MatrixXd to_eigen_cov(const GaussianClass& c) {
    const std::size_t d = c.mean.size();
    Eigen::MatrixXd m(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) m(i, j) = c.cov[i * d + j];
    return m;
}

/// Draws n rows per class as mean + V sqrt(L) z from the covariance
/// eigendecomposition, so singular (e.g. point-mass) classes are allowed.
inline SynthResult synth_gaussian_mixture(const MixtureSpec& spec, std::size_t n_per_class, std::uint64_t seed) {
    if (spec.classes.empty()) throw DataError("mixture needs at least one class");
    const std::size_t d = spec.dim();
    if (d == 0) throw DataError("mixture dimension must be >= 1");
    std::vector<Eigen::MatrixXd> factors;
    for (const auto& c : spec.classes) {
        if (c.mean.size() != d || c.cov.size() != d * d)
            throw DataError("class '" + c.name + "' has inconsistent mean/covariance sizes");
        const Eigen::MatrixXd cov = to_eigen_cov(c);
        if (!cov.allFinite() || (cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, cov.cwiseAbs().maxCoeff()))
            throw DataError("class '" + c.name + "' covariance is not symmetric");
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
        Eigen::VectorXd ev = es.eigenvalues();
        for (Eigen::Index k = 0; k < ev.size(); ++k) {
            if (ev(k) < -1e-10 * std::max(1.0, ev.cwiseAbs().maxCoeff()))
                throw DataError("class '" + c.name + "' covariance is not positive semidefinite");
            ev(k) = std::max(ev(k), 0.0);
        }
        factors.push_back(es.eigenvectors() * ev.cwiseSqrt().asDiagonal());
    }
    for (auto j : spec.shared)
        if (j >= d) throw DataError("shared coordinate index out of range");

    SynthResult r;
    r.truth = spec;
    auto& data = r.data;
    for (std::size_t j = 0; j < d; ++j) data.feature_names.push_back("x" + std::to_string(j));
    data.features = Matrix(spec.classes.size() * n_per_class, d);
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        data.classes.push_back(spec.classes[c].name);
        Rng rng(seed, "synth", {c});
        Eigen::VectorXd z(d);
        for (std::size_t i = 0; i < n_per_class; ++i, ++row) {
            for (std::size_t k = 0; k < d; ++k) z(static_cast<Eigen::Index>(k)) = rng.normal();
            const Eigen::VectorXd x = factors[c] * z;
            for (std::size_t k = 0; k < d; ++k)
                data.features(row, k) = static_cast<float>(spec.classes[c].mean[k] + x(static_cast<Eigen::Index>(k)));
            data.labels.push_back(c);
        }
    }
    return r;
}

inline nlohmann::json to_json(const MixtureSpec& s) {
    nlohmann::json j;
    j["classes"] = nlohmann::json::array();
    for (const auto& c : s.classes) j["classes"].push_back({{"name", c.name}, {"mean", c.mean}, {"cov", c.cov}});
    j["shared"] = s.shared;
    return j;
}

inline MixtureSpec mixture_from_json(const nlohmann::json& j) {
    try {
        MixtureSpec s;
        for (const auto& c : j.at("classes"))
            s.classes.push_back({c.at("name").get<std::string>(), c.at("mean").get<std::vector<double>>(),
                                 c.at("cov").get<std::vector<double>>()});
        if (j.contains("shared")) s.shared = j.at("shared").get<std::vector<std::size_t>>();
        return s;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid mixture spec: ") + e.what());
    }
}

// ---------------------------------------------------------------------------
// IDX images

namespace detail {

inline std::uint32_t read_be32(std::string_view bytes, std::size_t offset, const char* what) {
    if (offset + 4 > bytes.size()) throw DataError(std::string(what) + ": truncated header");
    std::uint32_t v = 0;
    for (std::size_t k = 0; k < 4; ++k) v = (v << 8) | static_cast<unsigned char>(bytes[offset + k]);
    return v;
}

}  // namespace detail

/// IDX images (magic 0x803) and labels (magic 0x801) to a dataset with values
/// v / 128 - 1, optionally block-mean downscaled by `downscale`.
inline TabularDataset parse_idx(std::string_view images, std::string_view labels, std::size_t downscale = 1) {
    if (downscale < 1) throw DataError("downscale factor must be >= 1");
    if (detail::read_be32(images, 0, "images") != 0x00000803u) throw DataError("images: magic mismatch");
    if (detail::read_be32(labels, 0, "labels") != 0x00000801u) throw DataError("labels: magic mismatch");
    const std::uint64_t count = detail::read_be32(images, 4, "images");
    const std::uint64_t rows = detail::read_be32(images, 8, "images");
    const std::uint64_t cols = detail::read_be32(images, 12, "images");
    const std::uint64_t nlab = detail::read_be32(labels, 4, "labels");
    if (count != nlab)
        throw DataError("image count " + std::to_string(count) + " != label count " + std::to_string(nlab));
    if (rows == 0 || cols == 0) throw DataError("images: zero-sized image");
    if (rows % downscale != 0 || cols % downscale != 0)
        throw DataError("image size is not divisible by the downscale factor");
    if (rows > 65536 || cols > 65536) throw DataError("images: implausible image size");
    const std::uint64_t pixels = rows * cols;
    if (images.size() != 16 + count * pixels) throw DataError("images: payload size does not match header");
    if (labels.size() != 8 + count) throw DataError("labels: payload size does not match header");

    const std::size_t orow = rows / downscale;
    const std::size_t ocol = cols / downscale;
    TabularDataset d;
    for (std::size_t r = 0; r < orow; ++r)
        for (std::size_t c = 0; c < ocol; ++c) d.feature_names.push_back("px_" + std::to_string(r) + "_" + std::to_string(c));

    std::vector<int> seen;
    for (std::size_t i = 0; i < count; ++i) seen.push_back(static_cast<unsigned char>(labels[8 + i]));
    std::vector<int> values = seen;
    std::sort(values.begin(), values.end());
    values.erase(std::unique(values.begin(), values.end()), values.end());
    for (int v : values) d.classes.push_back(std::to_string(v));

    d.features = Matrix(count, orow * ocol);
    const double block = static_cast<double>(downscale * downscale);
    for (std::size_t i = 0; i < count; ++i) {
        const char* img = images.data() + 16 + i * pixels;
        for (std::size_t r = 0; r < orow; ++r) {
            for (std::size_t c = 0; c < ocol; ++c) {
                double s = 0.0;
                for (std::size_t a = 0; a < downscale; ++a)
                    for (std::size_t b = 0; b < downscale; ++b)
                        s += static_cast<unsigned char>(img[(r * downscale + a) * cols + c * downscale + b]) / 128.0 - 1.0;
                d.features(i, r * ocol + c) = static_cast<float>(s / block);
            }
        }
        d.labels.push_back(static_cast<std::size_t>(
            std::lower_bound(values.begin(), values.end(), seen[i]) - values.begin()));
    }
    return d;
}

inline TabularDataset load_idx_images(const std::string& images_path, const std::string& labels_path,
                                      std::size_t downscale = 1) {
    return parse_idx(read_file(images_path), read_file(labels_path), downscale);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    Denoiser model;
    std::optional<BranchHierarchy> hierarchy;  // branched models
    std::vector<std::string> classes;          // label order for label-guided models
    std::uint64_t seed = 0;
    std::size_t epochs = 0;                    // completed training epochs
    std::vector<double> mean;                  // data standardization, if any
    std::vector<double> scale;
};

namespace detail {

inline std::uint64_t fnv1a64_bytes(std::string_view bytes) { return fnv1a64(bytes); }

template <class T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

inline void put_record(std::string& out, const std::string& name, std::size_t rows, std::size_t cols,
                       const std::vector<float>& values) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, 2);
    put<std::uint64_t>(out, rows);
    put<std::uint64_t>(out, cols);
    out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string_view take(std::size_t n) {
        need(n);
        auto s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (n > bytes_.size() - pos_) throw DataError("checkpoint truncated");
    }
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

inline nlohmann::json process_json(const NoiseProcess& p) {
    if (p.discrete()) {
        const auto& s = p.ddpm().spec();
        return {{"type", "ddpm"}, {"beta_base", s.beta_base}, {"beta_step", s.beta_step}, {"steps", s.steps}};
    }
    const auto& s = p.sde();
    return {{"type", "vp-sde"}, {"beta_min", s.beta_min}, {"beta_slope", s.beta_slope}, {"horizon", s.horizon}};
}

inline NoiseProcess process_from_json(const nlohmann::json& j) {
    const auto type = j.at("type").get<std::string>();
    if (type == "ddpm")
        return NoiseProcess(DdpmSpec{j.at("beta_base").get<double>(), j.at("beta_step").get<double>(),
                                     j.at("steps").get<int>()});
    if (type == "vp-sde")
        return NoiseProcess(SdeSpec{j.at("beta_min").get<double>(), j.at("beta_slope").get<double>(),
                                    j.at("horizon").get<double>()});
    throw DataError("unknown process type '" + type + "'");
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    const Denoiser& m = ck.model;
    nlohmann::json meta;
    meta["kind"] = to_string(m.kind());
    meta["dim"] = m.dim();
    meta["heads"] = m.head_count();
    meta["labels"] = m.label_count();
    meta["process"] = detail::process_json(m.process());
    const auto& a = m.arch();
    meta["arch"] = {{"width", a.width},
                    {"trunk_layers", a.trunk_layers},
                    {"head_layers", a.head_layers},
                    {"time_frequencies", a.time_frequencies},
                    {"label_dim", a.label_dim}};
    meta["hierarchy"] = ck.hierarchy ? to_json(*ck.hierarchy) : nlohmann::json(nullptr);
    meta["classes"] = ck.classes;
    meta["seed"] = ck.seed;
    meta["epochs"] = ck.epochs;
    meta["standardization"] = {{"mean", ck.mean}, {"scale", ck.scale}};
    nlohmann::json params = nlohmann::json::object();
    for (const auto& [name, e] : m.store().entries()) params[name] = {{"frozen", e.frozen}, {"step", e.step}};
    meta["parameters"] = params;
    const std::string text = meta.dump();

    std::string out = "BDIF";
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put<std::uint64_t>(out, text.size());
    out += text;
    detail::put<std::uint64_t>(out, 3 * m.store().entries().size());
    for (const auto& [name, e] : m.store().entries()) {
        detail::put_record(out, name, e.rows, e.cols, e.values);
        detail::put_record(out, name + "@m", e.rows, e.cols, e.m);
        detail::put_record(out, name + "@v", e.rows, e.cols, e.v);
    }
    detail::put<std::uint64_t>(out, detail::fnv1a64_bytes(out));
    return out;
}

/// Parses checkpoint bytes; any defect yields a DataError and no model.
inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
    if (bytes.size() < 4 + 4 + 8 + 8 + 8) throw DataError("checkpoint truncated");
    if (bytes.substr(0, 4) != "BDIF") throw DataError("not a checkpoint (bad magic)");
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
    const auto body = bytes.substr(0, bytes.size() - 8);

    detail::Reader rd(body);
    rd.take(4);
    const auto version = rd.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw DataError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    if (detail::fnv1a64_bytes(body) != stored) throw DataError("checkpoint checksum mismatch (corrupt or truncated)");

    try {
        const auto meta_len = rd.get<std::uint64_t>();
        if (meta_len > rd.remaining()) throw DataError("checkpoint truncated");
        const auto meta = nlohmann::json::parse(rd.take(static_cast<std::size_t>(meta_len)));

        const std::string kind = meta.at("kind").get<std::string>();
        if (kind != "branched" && kind != "label-guided") throw DataError("unknown model kind '" + kind + "'");
        const ModelKind mk = kind == "branched" ? ModelKind::branched : ModelKind::label_guided;
        ArchConfig arch;
        const auto& ja = meta.at("arch");
        arch.width = ja.at("width").get<std::size_t>();
        arch.trunk_layers = ja.at("trunk_layers").get<std::size_t>();
        arch.head_layers = ja.at("head_layers").get<std::size_t>();
        arch.time_frequencies = ja.at("time_frequencies").get<std::size_t>();
        arch.label_dim = ja.at("label_dim").get<std::size_t>();
        const auto heads = meta.at("heads").get<std::size_t>();
        const auto labels = meta.at("labels").get<std::size_t>();
        const auto dim = meta.at("dim").get<std::size_t>();
        if (arch.width > (1u << 16) || arch.trunk_layers > 64 || arch.head_layers > 64 || arch.head_layers < 1 ||
            arch.trunk_layers < 1 || arch.time_frequencies > (1u << 16) || arch.label_dim > (1u << 16) ||
            heads > (1u << 16) || labels > (1u << 16) || dim > (1u << 24))
            throw DataError("checkpoint architecture out of range");

        Checkpoint ck;
        const std::size_t conditions = mk == ModelKind::branched ? heads : labels;
        ck.model = Denoiser(mk, dim, conditions, detail::process_from_json(meta.at("process")), arch, 0);
        if (!meta.at("hierarchy").is_null()) ck.hierarchy = hierarchy_from_json(meta.at("hierarchy"));
        ck.classes = meta.at("classes").get<std::vector<std::string>>();
        ck.seed = meta.at("seed").get<std::uint64_t>();
        ck.epochs = meta.at("epochs").get<std::size_t>();
        ck.mean = meta.at("standardization").at("mean").get<std::vector<double>>();
        ck.scale = meta.at("standardization").at("scale").get<std::vector<double>>();
        if (ck.hierarchy && ck.hierarchy->task_count() != heads)
            throw DataError("hierarchy task count does not match the head count");

        auto& entries = ck.model.store().entries();
        const auto& pmeta = meta.at("parameters");
        const auto count = rd.get<std::uint64_t>();
        if (count != 3 * entries.size()) throw DataError("checkpoint tensor count does not match the architecture");
        for (std::uint64_t r = 0; r < count; ++r) {
            const auto name_len = rd.get<std::uint32_t>();
            const std::string name(rd.take(name_len));
            const auto rank = rd.get<std::uint32_t>();
            if (rank != 2) throw DataError("tensor '" + name + "' has unsupported rank");
            const auto rows = rd.get<std::uint64_t>();
            const auto cols = rd.get<std::uint64_t>();
            std::string base = name;
            std::vector<float>* target = nullptr;
            auto at = name.rfind('@');
            auto field = at == std::string::npos ? std::string() : name.substr(at + 1);
            if (at != std::string::npos) base = name.substr(0, at);
            auto it = entries.find(base);
            if (it == entries.end()) throw DataError("unexpected tensor '" + name + "'");
            auto& e = it->second;
            if (rows != e.rows || cols != e.cols) throw DataError("tensor '" + name + "' has the wrong shape");
            if (field.empty())
                target = &e.values;
            else if (field == "m")
                target = &e.m;
            else if (field == "v")
                target = &e.v;
            else
                throw DataError("unexpected tensor '" + name + "'");
            const auto raw = rd.take(static_cast<std::size_t>(rows * cols * sizeof(float)));
            std::memcpy(target->data(), raw.data(), raw.size());
            const auto& pm = pmeta.at(base);
            e.frozen = pm.at("frozen").get<bool>();
            e.step = pm.at("step").get<std::uint64_t>();
        }
        if (rd.remaining() != 0) throw DataError("trailing bytes in checkpoint");
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid checkpoint metadata: ") + e.what());
    } catch (const DataError&) {
        throw;
    } catch (const Error& e) {
        throw DataError(std::string("invalid checkpoint: ") + e.what());
    } catch (const std::length_error&) {
        throw DataError("invalid checkpoint: size out of range");
    } catch (const std::bad_alloc&) {
        throw DataError("invalid checkpoint: size out of range");
    }
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    write_file_atomic(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace bdiff
