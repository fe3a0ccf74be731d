#pragma once

// Small Target Filter: global Mahalanobis (RX) distance map, bilateral
// smoothing in the [0,255] value domain, and median masking.

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <vector>

#include "stad/error.hpp"
#include "stad/hypercube.hpp"
#include "stad/maps.hpp"

namespace stad::stf {

struct StfConfig {
    int radius = 1;
    double sigma_spatial = 1.0;
    /// In units of the [0,255] rescaled distance map.
    double sigma_range = 80.0;
    /// Covariance ridge, relative to each band's own variance.
    double ridge = 1e-6;

    void validate() const {
        if (radius < 1) throw ValidationError("stf: radius must be >= 1");
        if (!(sigma_spatial > 0.0) || !(sigma_range > 0.0)) throw ValidationError("stf: sigmas must be positive");
        if (!(ridge > 0.0)) throw ValidationError("stf: ridge must be positive");
    }
};

/// z_i = (h_i - mu)^T (C + R)^-1 (h_i - mu) with C the B x B spectral
/// covariance over all L pixels (1/(L-1)) and R = ridge * diag(C). A band with
/// zero variance gets ridge * trace(C)/B instead.
inline ScalarMap mahalanobis_map(const hsi::HyperCube& cube, double ridge = 1e-6) {
    using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto L = static_cast<Eigen::Index>(cube.pixels()), B = static_cast<Eigen::Index>(cube.bands());
    Matrix x = Eigen::Map<const Matrix>(cube.data().data(), L, B);
    x.rowwise() -= x.colwise().mean();
    // constant bands centre to exact zeros rather than rounding residue
    for (Eigen::Index b = 0; b < B; ++b) {
        const auto col = Eigen::Map<const Matrix>(cube.data().data(), L, B).col(b);
        if (col.minCoeff() == col.maxCoeff()) x.col(b).setZero();
    }
    Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(L - 1);
    const double trace = cov.trace();
    if (!(trace > 0.0)) return ScalarMap(cube.height(), cube.width(), 0.0);  // every pixel identical

    const double floor = ridge * trace / static_cast<double>(B);
    for (Eigen::Index b = 0; b < B; ++b) cov(b, b) += cov(b, b) > 0.0 ? ridge * cov(b, b) : floor;

    Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
    Eigen::MatrixXd solved = ldlt.solve(x.transpose());  // B x L
    std::vector<double> z(static_cast<std::size_t>(L));
    for (Eigen::Index i = 0; i < L; ++i) {
        const double q = x.row(i).dot(solved.col(i));
        if (!std::isfinite(q) || ldlt.info() != Eigen::Success) {
            std::ostringstream os;
            os << "mahalanobis_map: non-finite distance for cube '" << cube.name()
               << "' (reciprocal condition estimate " << ldlt.rcond() << ")";
            throw NumericalError(os.str());
        }
        z[static_cast<std::size_t>(i)] = std::max(q, 0.0);
    }
    return ScalarMap(cube.height(), cube.width(), std::move(z));
}

/// Global RX detector; the same quantity as the Mahalanobis map.
inline ScalarMap rx_detector(const hsi::HyperCube& cube, double ridge = 1e-6) { return mahalanobis_map(cube, ridge); }

/// Bilateral filter over the disc of radius r (centre included, clipped at
/// borders). Weights are computed on the map rescaled to [0,255]; the result
/// is mapped back to the input's value range.
inline ScalarMap bilateral_filter(const ScalarMap& z, const StfConfig& cfg) {
    cfg.validate();
    const double lo = z.min(), hi = z.max();
    if (!(hi > lo)) return z;
    const double to_byte = 255.0 / (hi - lo);
    std::vector<double> v(z.values.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (z.values[i] - lo) * to_byte;

    const int r = cfg.radius;
    const double inv_2ss = 1.0 / (2.0 * cfg.sigma_spatial * cfg.sigma_spatial);
    const double inv_2sc = 1.0 / (2.0 * cfg.sigma_range * cfg.sigma_range);
    const auto h = static_cast<int>(z.height), w = static_cast<int>(z.width);
    ScalarMap out(z.height, z.width, 0.0);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double centre = v[static_cast<std::size_t>(i * w + j)];
            double num = 0.0, den = 0.0;
            for (int di = -r; di <= r; ++di)
                for (int dj = -r; dj <= r; ++dj) {
                    if (di * di + dj * dj > r * r) continue;
                    const int k = i + di, l = j + dj;
                    if (k < 0 || l < 0 || k >= h || l >= w) continue;
                    const double val = v[static_cast<std::size_t>(k * w + l)];
                    const double diff = centre - val;
                    const double wt = std::exp(-static_cast<double>(di * di + dj * dj) * inv_2ss - diff * diff * inv_2sc);
                    num += wt * val;
                    den += wt;
                }
            out.values[static_cast<std::size_t>(i * w + j)] = lo + (num / den) / to_byte;
        }
    return out;
}

/// Zeroes every entry <= the median; entries above it are kept verbatim.
inline ScalarMap median_mask(const ScalarMap& z) {
    const double med = median(z.values);
    ScalarMap out = z;
    for (double& v : out.values)
        if (v <= med) v = 0.0;
    return out;
}

/// The mask matrix: median_mask(bilateral_filter(mahalanobis_map(cube))).
inline ScalarMap small_target_filter(const hsi::HyperCube& cube, const StfConfig& cfg = {}) {
    cfg.validate();
    return median_mask(bilateral_filter(mahalanobis_map(cube, cfg.ridge), cfg));
}

}  // namespace stad::stf
