#pragma once

// Dense row-major matrices, a named parameter store with Adam state, and a
// reverse-mode tape over the handful of primitives the denoisers need.
// Everything is templated on the scalar; models use float, gradient checks
// use double.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "errors.hpp"
#include "rng.hpp"

namespace bdiff {

template <class T>
struct BasicMatrix {
    using value_type = T;

    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    BasicMatrix() = default;
    BasicMatrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}
    BasicMatrix(std::size_t r, std::size_t c, std::vector<T> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) throw ShapeError("matrix data size does not match shape");
    }

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    T operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const { return data.size(); }

    friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;
};

using Matrix = BasicMatrix<float>;

/// out = x * w + bias for a row-major (w_rows x w_cols) weight; bias may be
/// empty.
template <class T>
BasicMatrix<T> matmul_bias(const BasicMatrix<T>& x, std::type_identity_t<std::span<const T>> w, std::size_t w_rows,
                           std::size_t w_cols, std::type_identity_t<std::span<const T>> bias = {}) {
    if (x.cols != w_rows)
        throw ShapeError("matmul: input width " + std::to_string(x.cols) + " vs weight rows " + std::to_string(w_rows));
    if (w.size() != w_rows * w_cols) throw ShapeError("matmul: weight size mismatch");
    if (!bias.empty() && bias.size() != w_cols) throw ShapeError("matmul: bias length mismatch");
    BasicMatrix<T> out(x.rows, w_cols);
    const T* wp = w.data();
    std::size_t i = 0;
    // Four rows at a time so each weight row is loaded once per block.
    for (; i + 4 <= x.rows; i += 4) {
        T* o0 = out.data.data() + i * w_cols;
        T* o1 = o0 + w_cols;
        T* o2 = o1 + w_cols;
        T* o3 = o2 + w_cols;
        if (!bias.empty())
            for (std::size_t j = 0; j < w_cols; ++j) o0[j] = o1[j] = o2[j] = o3[j] = bias[j];
        const T* x0 = x.data.data() + i * x.cols;
        const T* x1 = x0 + x.cols;
        const T* x2 = x1 + x.cols;
        const T* x3 = x2 + x.cols;
        for (std::size_t k = 0; k < x.cols; ++k) {
            const T a0 = x0[k], a1 = x1[k], a2 = x2[k], a3 = x3[k];
            const T* wk = wp + k * w_cols;
            for (std::size_t j = 0; j < w_cols; ++j) {
                const T wv = wk[j];
                o0[j] += a0 * wv;
                o1[j] += a1 * wv;
                o2[j] += a2 * wv;
                o3[j] += a3 * wv;
            }
        }
    }
    for (; i < x.rows; ++i) {
        T* oi = out.data.data() + i * w_cols;
        if (!bias.empty()) std::copy(bias.begin(), bias.end(), oi);
        const T* xi = x.data.data() + i * x.cols;
        for (std::size_t k = 0; k < x.cols; ++k) {
            const T a = xi[k];
            const T* wk = wp + k * w_cols;
            for (std::size_t j = 0; j < w_cols; ++j) oi[j] += a * wk[j];
        }
    }
    return out;
}

template <class T>
BasicMatrix<T> matmul_bias(const BasicMatrix<T>& x, const BasicMatrix<T>& w,
                           std::type_identity_t<std::span<const T>> bias = {}) {
    return matmul_bias<T>(x, std::span<const T>(w.data), w.rows, w.cols, bias);
}

template <class T>
BasicMatrix<T> transpose(std::span<const T> w, std::size_t rows, std::size_t cols) {
    BasicMatrix<T> t(cols, rows);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t.data[c * rows + r] = w[r * cols + c];
    return t;
}

template <class T>
T silu(T x) {
    return x / (T(1) + std::exp(-x));
}

template <class T>
T silu_grad(T x) {
    const T s = T(1) / (T(1) + std::exp(-x));
    return s * (T(1) + x * (T(1) - s));
}

/// Logistic sigmoid of x. The input is copied into an aligned buffer padded to
/// a multiple of the widest packet so every element takes the same vectorized
/// exp path; results then do not depend on the caller's buffer alignment.
template <class T>
Eigen::Array<T, Eigen::Dynamic, 1> sigmoid_padded(std::span<const T> x) {
    using A = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto n = static_cast<Eigen::Index>(x.size());
    const Eigen::Index padded = (n + 15) / 16 * 16;
    A a = A::Zero(padded);
    a.head(n) = Eigen::Map<const A>(x.data(), n);
    return T(1) / (T(1) + (-a).exp());
}

/// Vectorized x <- silu(x).
template <class T>
void silu_inplace(std::span<T> x) {
    const auto s = sigmoid_padded<T>(x);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] *= s[static_cast<Eigen::Index>(i)];
}

/// Vectorized dx += g * silu'(x).
template <class T>
void silu_backward(std::span<const T> x, std::span<const T> g, std::span<T> dx) {
    const auto s = sigmoid_padded<T>(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T si = s[static_cast<Eigen::Index>(i)];
        dx[i] += g[i] * si * (T(1) + x[i] * (T(1) - si));
    }
}

// ---------------------------------------------------------------------------

template <class T>
struct BasicParameterEntry {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> values;
    std::vector<T> grad;
    std::vector<T> m;
    std::vector<T> v;
    bool frozen = false;
    bool touched = false;  // received gradient since the last optimizer step
    std::uint64_t step = 0;

    std::size_t size() const { return values.size(); }
};

using ParameterEntry = BasicParameterEntry<float>;

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Named trainable arrays. Entries are kept in name order for deterministic
/// iteration and serialization.
template <class T>
class BasicParameterStore {
public:
    using Entry = BasicParameterEntry<T>;

    Entry& add(const std::string& name, std::size_t rows, std::size_t cols, std::vector<T> values = {}) {
        if (entries_.count(name)) throw StateError("parameter '" + name + "' already exists");
        if (values.empty()) values.assign(rows * cols, T(0));
        if (values.size() != rows * cols) throw ShapeError("parameter '" + name + "' value size mismatch");
        Entry e;
        e.rows = rows;
        e.cols = cols;
        e.values = std::move(values);
        e.grad.assign(e.values.size(), T(0));
        e.m.assign(e.values.size(), T(0));
        e.v.assign(e.values.size(), T(0));
        return entries_.emplace(name, std::move(e)).first->second;
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw LookupError("unknown parameter '" + name + "'");
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw LookupError("unknown parameter '" + name + "'");
        return it->second;
    }

    BasicMatrix<T> matrix(const std::string& name) const {
        const auto& e = at(name);
        return BasicMatrix<T>(e.rows, e.cols, e.values);
    }

    void set_frozen(const std::string& name, bool frozen) { at(name).frozen = frozen; }

    void freeze_all() {
        for (auto& [_, e] : entries_) e.frozen = true;
    }

    void zero_grad() {
        for (auto& [_, e] : entries_) {
            std::fill(e.grad.begin(), e.grad.end(), T(0));
            e.touched = false;
        }
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& [_, e] : entries_)
            if (!e.frozen) n += e.size();
        return n;
    }

    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    friend bool operator==(const BasicParameterStore& a, const BasicParameterStore& b) {
        if (a.entries_.size() != b.entries_.size()) return false;
        for (const auto& [name, e] : a.entries_) {
            auto it = b.entries_.find(name);
            if (it == b.entries_.end()) return false;
            const auto& f = it->second;
            if (e.rows != f.rows || e.cols != f.cols || e.frozen != f.frozen || e.step != f.step) return false;
            if (e.values != f.values || e.m != f.m || e.v != f.v) return false;
        }
        return true;
    }

private:
    std::map<std::string, Entry> entries_;
};

using ParameterStore = BasicParameterStore<float>;

/// Uniform fan-in initialization for a dense layer: weight "<name>.weight"
/// (in x out) and zero bias "<name>.bias".
template <class T>
void add_dense(BasicParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<T> w(in * out);
    for (auto& x : w) x = static_cast<T>(rng.uniform(-bound, bound));
    store.add(name + ".weight", in, out, std::move(w));
    store.add(name + ".bias", 1, out);
}

/// Adam update over touched, unfrozen entries. Gradients are zeroed afterwards.
/// Frozen entries keep their values bit-identical.
template <class T>
void adam_step(BasicParameterStore<T>& store, const AdamConfig& cfg) {
    for (const auto& [name, e] : store.entries())
        for (T g : e.grad)
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in '" + name + "'");
    for (auto& [_, e] : store.entries()) {
        if (e.frozen || !e.touched) continue;
        ++e.step;
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(e.step));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(e.step));
        for (std::size_t i = 0; i < e.size(); ++i) {
            const double g = e.grad[i];
            const double m = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
            const double v = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
            e.m[i] = static_cast<T>(m);
            e.v[i] = static_cast<T>(v);
            const double update = cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
            e.values[i] = static_cast<T>(e.values[i] - update);
        }
    }
    store.zero_grad();
}

// ---------------------------------------------------------------------------

/// Records a forward pass and replays it backwards once. Parameter leaves refer
/// to entries of the store by name; their gradients accumulate into the store.
template <class T>
class BasicTape {
public:
    using Id = std::size_t;
    using M = BasicMatrix<T>;

    explicit BasicTape(BasicParameterStore<T>& store) : store_(&store) {}

    Id input(M value) {
        begin_recording();
        return push(Op::input, std::move(value), {});
    }

    /// y = x * W + b for the layer "<layer>.weight" / "<layer>.bias".
    Id dense(const std::string& layer, Id x) {
        const auto wname = layer + ".weight";
        const auto bname = layer + ".bias";
        const auto& w = store_->at(wname);
        const auto& b = store_->at(bname);
        const auto& xv = value(x);
        if (xv.cols != w.rows)
            throw ShapeError("layer '" + layer + "' expects width " + std::to_string(w.rows) + ", got " +
                             std::to_string(xv.cols));
        Id mm = push(Op::matmul, matmul_bias<T>(xv, w.values, w.rows, w.cols), {x}, wname);
        M out = nodes_[mm].value;
        for (std::size_t i = 0; i < out.rows; ++i)
            for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += b.values[j];
        return push(Op::add_bias, std::move(out), {mm}, bname);
    }

    Id silu(Id x) {
        M out = value(x);
        silu_inplace<T>(out.data);
        return push(Op::silu, std::move(out), {x});
    }

    /// Column-wise concatenation of equal-height matrices.
    Id concat(std::span<const Id> parts) {
        if (parts.empty()) throw ShapeError("concat of zero matrices");
        const std::size_t rows = value(parts[0]).rows;
        std::size_t cols = 0;
        for (Id p : parts) {
            if (value(p).rows != rows) throw ShapeError("concat: row count mismatch");
            cols += value(p).cols;
        }
        M out(rows, cols);
        std::size_t offset = 0;
        for (Id p : parts) {
            const auto& v = value(p);
            for (std::size_t i = 0; i < rows; ++i)
                std::copy(v.row(i).begin(), v.row(i).end(), out.row(i).begin() + static_cast<std::ptrdiff_t>(offset));
            offset += v.cols;
        }
        return push(Op::concat, std::move(out), std::vector<Id>(parts.begin(), parts.end()));
    }

    /// Selects rows of x in the given order.
    Id slice_rows(Id x, std::span<const std::size_t> rows) {
        const auto& v = value(x);
        M out(rows.size(), v.cols);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= v.rows) throw ShapeError("slice_rows: row index out of range");
            std::copy(v.row(rows[i]).begin(), v.row(rows[i]).end(), out.row(i).begin());
        }
        Id id = push(Op::slice_rows, std::move(out), {x});
        nodes_[id].indices.assign(rows.begin(), rows.end());
        return id;
    }

    /// Gathers rows of the parameter table `name` (an embedding lookup).
    Id embed(const std::string& name, std::span<const std::size_t> rows) {
        begin_recording();
        const auto& e = store_->at(name);
        M out(rows.size(), e.cols);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= e.rows) throw LookupError("embedding row " + std::to_string(rows[i]) + " out of range");
            std::copy_n(e.values.begin() + static_cast<std::ptrdiff_t>(rows[i] * e.cols), e.cols, out.row(i).begin());
        }
        Id id = push(Op::embed, std::move(out), {}, name);
        nodes_[id].indices.assign(rows.begin(), rows.end());
        return id;
    }

    const M& value(Id id) const {
        if (id >= nodes_.size()) throw StateError("tape node does not exist");
        return nodes_[id].value;
    }

    std::size_t size() const { return nodes_.size(); }

    /// Propagates the seed gradients to every parameter leaf, accumulating into
    /// the store, then clears the tape.
    void backward(std::span<const std::pair<Id, M>> seeds) {
        if (!recorded_) throw StateError("backward called without a recorded forward pass");
        for (const auto& [id, g] : seeds) {
            if (id >= nodes_.size()) throw StateError("tape node does not exist");
            auto& n = nodes_[id];
            if (g.rows != n.value.rows || g.cols != n.value.cols) throw ShapeError("backward: seed shape mismatch");
            grad_of(id);
            for (std::size_t i = 0; i < g.size(); ++i) n.grad.data[i] += g.data[i];
        }
        for (std::size_t k = nodes_.size(); k-- > 0;) {
            if (nodes_[k].grad.data.empty()) continue;
            propagate(k);
        }
        nodes_.clear();
        recorded_ = false;
    }

    void backward(Id id, const M& seed) {
        std::pair<Id, M> s{id, seed};
        backward(std::span<const std::pair<Id, M>>(&s, 1));
    }

    /// Drops the recording without touching gradients.
    void clear() {
        nodes_.clear();
        recorded_ = false;
    }

private:
    enum class Op { input, matmul, add_bias, silu, concat, slice_rows, embed };

    struct Node {
        Op op;
        M value;
        M grad;  // allocated lazily
        std::vector<Id> inputs;
        std::string param;
        std::vector<std::size_t> indices;
    };

    void begin_recording() { recorded_ = true; }

    Id push(Op op, M value, std::vector<Id> inputs, std::string param = {}) {
        recorded_ = true;
        nodes_.push_back(Node{op, std::move(value), {}, std::move(inputs), std::move(param), {}});
        return nodes_.size() - 1;
    }

    M& grad_of(Id id) {
        auto& n = nodes_[id];
        if (n.grad.data.empty()) n.grad = M(n.value.rows, n.value.cols);
        return n.grad;
    }

    BasicParameterEntry<T>& param_entry(const std::string& name) {
        auto& e = store_->at(name);
        e.touched = true;
        return e;
    }

    void propagate(Id k) {
        // nodes_ does not grow during backward, so references stay valid.
        Node& n = nodes_[k];
        const M& g = n.grad;
        switch (n.op) {
            case Op::input:
                break;
            case Op::matmul: {
                const Id xid = n.inputs[0];
                const M& x = nodes_[xid].value;
                auto& w = param_entry(n.param);
                // dW = x^T g
                const M xt = transpose<T>(x.data, x.rows, x.cols);
                const M dw = matmul_bias<T>(xt, std::span<const T>(g.data), g.rows, g.cols);
                for (std::size_t i = 0; i < dw.size(); ++i) w.grad[i] += dw.data[i];
                // dx = g W^T
                const M wt = transpose<T>(w.values, w.rows, w.cols);
                const M dx_new = matmul_bias<T>(g, std::span<const T>(wt.data), wt.rows, wt.cols);
                M& dx = grad_of(xid);
                for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] += dx_new.data[i];
                break;
            }
            case Op::add_bias: {
                auto& b = param_entry(n.param);
                for (std::size_t j = 0; j < g.cols; ++j) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < g.rows; ++i) s += g(i, j);
                    b.grad[j] = static_cast<T>(b.grad[j] + s);
                }
                M& dx = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < g.size(); ++i) dx.data[i] += g.data[i];
                break;
            }
            case Op::silu: {
                const Id xid = n.inputs[0];
                const M& x = nodes_[xid].value;
                M& dx = grad_of(xid);
                silu_backward<T>(x.data, g.data, dx.data);
                break;
            }
            case Op::concat: {
                std::size_t offset = 0;
                for (Id in : n.inputs) {
                    const std::size_t cols = nodes_[in].value.cols;
                    M& dx = grad_of(in);
                    for (std::size_t i = 0; i < g.rows; ++i)
                        for (std::size_t j = 0; j < cols; ++j) dx(i, j) += g(i, offset + j);
                    offset += cols;
                }
                break;
            }
            case Op::slice_rows: {
                M& dx = grad_of(n.inputs[0]);
                for (std::size_t i = 0; i < n.indices.size(); ++i)
                    for (std::size_t j = 0; j < g.cols; ++j) dx(n.indices[i], j) += g(i, j);
                break;
            }
            case Op::embed: {
                auto& e = param_entry(n.param);
                for (std::size_t i = 0; i < n.indices.size(); ++i)
                    for (std::size_t j = 0; j < g.cols; ++j) e.grad[n.indices[i] * e.cols + j] += g(i, j);
                break;
            }
        }
    }

    BasicParameterStore<T>* store_;
    std::vector<Node> nodes_;
    bool recorded_ = false;
};

using Tape = BasicTape<float>;

}  // namespace bdiff
