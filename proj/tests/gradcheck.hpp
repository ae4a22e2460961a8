#pragma once

// Finite-difference check of the reverse-mode tape on random small networks
// (depth <= 3, width <= 8) built from every primitive: dense, silu, concat
// with an embedding, and a row slice. Runs in double precision.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "bdiff/rng.hpp"
#include "bdiff/tensor.hpp"

namespace gradcheck {

using bdiff::BasicMatrix;
using bdiff::BasicParameterStore;
using bdiff::BasicTape;
using M = BasicMatrix<double>;

struct Net {
    std::size_t batch = 0;
    std::size_t in = 0;
    std::size_t layers = 0;
    bool use_embed = false;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> keep;  // rows kept by the slice
    M x;
    M weight;  // loss = sum(out .* weight)
};

struct Result {
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
};

inline double forward(BasicParameterStore<double>& store, const Net& net, bool backward) {
    BasicTape<double> tape(store);
    auto h = tape.input(net.x);
    if (net.use_embed) {
        auto e = tape.embed("emb", net.labels);
        const std::size_t parts[] = {h, e};
        h = tape.concat(parts);
    }
    for (std::size_t l = 0; l < net.layers; ++l) {
        h = tape.dense("l" + std::to_string(l), h);
        if (l + 1 < net.layers) h = tape.silu(h);
        if (l == 0) h = tape.slice_rows(h, net.keep);
    }
    const auto& out = tape.value(h);
    double loss = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) loss += out.data[i] * net.weight.data[i];
    if (backward)
        tape.backward(h, net.weight);
    else
        tape.clear();
    return loss;
}

inline Result run(std::uint64_t seed, double h = 1e-4) {
    bdiff::Rng rng(seed, "gradcheck", {});
    Net net;
    net.batch = 2 + rng.index(4);
    net.in = 1 + rng.index(5);
    net.layers = 1 + rng.index(3);
    net.use_embed = rng.uniform() < 0.5;

    BasicParameterStore<double> store;
    std::size_t width = net.in;
    if (net.use_embed) {
        const std::size_t rows = 3, cols = 1 + rng.index(3);
        std::vector<double> v(rows * cols);
        for (auto& e : v) e = rng.normal();
        store.add("emb", rows, cols, v);
        for (std::size_t i = 0; i < net.batch; ++i) net.labels.push_back(rng.index(rows));
        width += cols;
    }
    for (std::size_t l = 0; l < net.layers; ++l) {
        const std::size_t out = 1 + rng.index(8);
        bdiff::add_dense(store, "l" + std::to_string(l), width, out, rng);
        for (auto& b : store.at("l" + std::to_string(l) + ".bias").values) b = 0.3 * rng.normal();
        width = out;
    }
    for (std::size_t i = 0; i < net.batch; ++i)
        if (rng.uniform() < 0.7 || net.keep.empty()) net.keep.push_back(i);
    if (net.keep.size() > 1) std::swap(net.keep.front(), net.keep.back());
    net.x = M(net.batch, net.in);
    for (auto& v : net.x.data) v = rng.normal();
    net.weight = M(net.keep.size(), width);
    for (auto& v : net.weight.data) v = rng.normal();

    store.zero_grad();
    forward(store, net, true);

    Result r;
    for (auto& [name, e] : store.entries()) {
        for (std::size_t i = 0; i < e.size(); ++i) {
            const double analytic = e.grad[i];
            const double saved = e.values[i];
            e.values[i] = saved + h;
            const double up = forward(store, net, false);
            e.values[i] = saved - h;
            const double down = forward(store, net, false);
            e.values[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
            r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic - numeric) / denom);
            ++r.coordinates;
        }
    }
    return r;
}

}  // namespace gradcheck
