#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "stad/error.hpp"

namespace stad {

/// M x N scalar image, row-major. Used for distance maps, masks and scores.
struct ScalarMap {
    std::size_t height = 0, width = 0;
    std::vector<double> values;

    ScalarMap() = default;
    ScalarMap(std::size_t h, std::size_t w, std::vector<double> v) : height(h), width(w), values(std::move(v)) {
        if (values.size() != h * w)
            throw DimensionError("map holds " + std::to_string(values.size()) + " values, expected " +
                                 std::to_string(h * w));
    }
    ScalarMap(std::size_t h, std::size_t w, double fill) : height(h), width(w), values(h * w, fill) {}

    std::size_t size() const { return values.size(); }
    double& at(std::size_t i, std::size_t j) { return values[i * width + j]; }
    double at(std::size_t i, std::size_t j) const { return values[i * width + j]; }
    double min() const { return *std::min_element(values.begin(), values.end()); }
    double max() const { return *std::max_element(values.begin(), values.end()); }
};

/// Median with the even-count convention of averaging the two middle order statistics.
inline double median(std::vector<double> v) {
    if (v.empty()) throw ValidationError("median of empty set");
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1) return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

}  // namespace stad
