#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace bdiff {

/// Labeled feature matrix. Labels index into `classes`; class names are strings
/// everywhere, numeric labels are stringified on load.
struct TabularDataset {
    Matrix features;
    std::vector<std::size_t> labels;
    std::vector<std::string> classes;
    std::vector<std::string> feature_names;
    // Pooled standardization parameters; empty when the data is raw.
    std::vector<double> mean;
    std::vector<double> scale;

    std::size_t size() const { return features.rows; }
    std::size_t dim() const { return features.cols; }

    std::size_t class_index(const std::string& name) const {
        for (std::size_t i = 0; i < classes.size(); ++i)
            if (classes[i] == name) return i;
        throw LookupError("unknown class '" + name + "'");
    }

    std::vector<std::size_t> rows_of(std::size_t cls) const {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) rows.push_back(i);
        return rows;
    }

    /// Features of one class as a matrix.
    Matrix class_matrix(std::size_t cls) const {
        const auto rows = rows_of(cls);
        Matrix m(rows.size(), dim());
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy(features.row(rows[i]).begin(), features.row(rows[i]).end(), m.row(i).begin());
        return m;
    }

    /// Rows whose class name is in `names`, relabelled against `names` order.
    TabularDataset subset(const std::vector<std::string>& names) const {
        TabularDataset out;
        out.classes = names;
        out.feature_names = feature_names;
        out.mean = mean;
        out.scale = scale;
        std::vector<std::size_t> remap(classes.size(), names.size());
        for (std::size_t k = 0; k < names.size(); ++k) remap[class_index(names[k])] = k;
        std::vector<float> values;
        for (std::size_t i = 0; i < size(); ++i) {
            if (remap[labels[i]] == names.size()) continue;
            out.labels.push_back(remap[labels[i]]);
            values.insert(values.end(), features.row(i).begin(), features.row(i).end());
        }
        out.features = Matrix(out.labels.size(), dim(), std::move(values));
        return out;
    }
};

}  // namespace bdiff
