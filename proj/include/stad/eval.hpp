#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stad/error.hpp"
#include "stad/hypercube.hpp"
#include "stad/maps.hpp"

namespace stad::eval {

using json = nlohmann::json;

struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    double pd() const { return static_cast<double>(tp) / static_cast<double>(tp + fn); }
    double pf() const { return static_cast<double>(fp) / static_cast<double>(fp + tn); }
};

inline void check_pair(const ScalarMap& s, const hsi::LabelMap& labels) {
    if (s.height != labels.height || s.width != labels.width)
        throw DimensionError("eval: score map " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                             " does not match labels " + std::to_string(labels.height) + "x" +
                             std::to_string(labels.width));
    const std::size_t pos = labels.positives();
    if (pos == 0) throw ValidationError("eval: label map has no positives, detection probability undefined");
    if (pos == labels.values.size()) throw ValidationError("eval: label map has no negatives");
}

/// Counts with the strict rule: positive iff score > tau.
inline Confusion confusion_at(const ScalarMap& s, const hsi::LabelMap& labels, double tau) {
    check_pair(s, labels);
    Confusion c;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const bool hit = s.values[i] > tau, truth = labels.values[i] != 0;
        if (hit && truth) ++c.tp;
        else if (hit) ++c.fp;
        else if (truth) ++c.fn;
        else ++c.tn;
    }
    return c;
}

/// Min-max to [0,1]. A constant map becomes all zeros.
inline ScalarMap normalize_scores(const ScalarMap& s) {
    ScalarMap out(s.height, s.width, 0.0);
    const double lo = s.min(), hi = s.max();
    if (!(hi > lo)) return out;
    for (std::size_t i = 0; i < s.size(); ++i) out.values[i] = (s.values[i] - lo) / (hi - lo);
    return out;
}

struct RocPoint {
    double pd, pf, tau;
};

/// Points ordered by descending tau, starting at (0,0) and ending at (1,1).
struct RocCurve {
    std::vector<RocPoint> points;

    void write_csv(const std::filesystem::path& path) const {
        std::ostringstream os;
        os.precision(17);
        os << "tau,pd,pf\n";
        for (const auto& p : points) os << p.tau << ',' << p.pd << ',' << p.pf << '\n';
        hsi::write_text(path, os.str());
    }
};

/// Sweeps p thresholds tau_i = 1 - i/(p-1) over the normalized scores. The
/// (0,0) point at tau = 1 and the (1,1) point at tau = 0 are included explicitly.
inline RocCurve roc_curve(const ScalarMap& scores, const hsi::LabelMap& labels, std::size_t p = 30000) {
    check_pair(scores, labels);
    if (p < 2) throw ValidationError("roc_curve: need at least 2 thresholds");
    const ScalarMap s = normalize_scores(scores);
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < s.size(); ++i) (labels.values[i] ? pos : neg).push_back(s.values[i]);
    std::sort(pos.begin(), pos.end(), std::greater<>());
    std::sort(neg.begin(), neg.end(), std::greater<>());

    RocCurve roc;
    roc.points.reserve(p + 2);
    roc.points.push_back({0.0, 0.0, 1.0});
    std::size_t np = 0, nn = 0;  // counts of scores strictly above tau
    for (std::size_t i = 0; i < p; ++i) {
        const double tau = 1.0 - static_cast<double>(i) / static_cast<double>(p - 1);
        while (np < pos.size() && pos[np] > tau) ++np;
        while (nn < neg.size() && neg[nn] > tau) ++nn;
        roc.points.push_back({static_cast<double>(np) / static_cast<double>(pos.size()),
                              static_cast<double>(nn) / static_cast<double>(neg.size()), tau});
    }
    roc.points.push_back({1.0, 1.0, 0.0});
    return roc;
}

/// Area under P_d over P_f (trapezoid).
inline double auc_df(const RocCurve& roc) {
    double a = 0.0;
    for (std::size_t i = 1; i < roc.points.size(); ++i) {
        const auto &u = roc.points[i - 1], &v = roc.points[i];
        a += (v.pf - u.pf) * (u.pd + v.pd) * 0.5;
    }
    return a;
}

/// Area under P_f over tau in [0,1] (trapezoid).
inline double auc_ftau(const RocCurve& roc) {
    double a = 0.0;
    for (std::size_t i = 1; i < roc.points.size(); ++i) {
        const auto &u = roc.points[i - 1], &v = roc.points[i];
        a += (u.tau - v.tau) * (u.pf + v.pf) * 0.5;
    }
    return a;
}

inline double auc_bs(double df, double ftau) { return df - ftau; }

struct ImageScore {
    std::string name;
    double auc_df = 0.0, auc_ftau = 0.0, auc_bs = 0.0;
    /// Detection accuracy below 0.9 or background suppressibility below 0.8.
    bool failed = false;
};

inline ImageScore score_image(const std::string& name, const ScalarMap& s, const hsi::LabelMap& labels,
                              std::size_t p = 30000, RocCurve* roc_out = nullptr) {
    RocCurve roc = roc_curve(s, labels, p);
    ImageScore r{name, auc_df(roc), auc_ftau(roc), 0.0, false};
    r.auc_bs = auc_bs(r.auc_df, r.auc_ftau);
    r.failed = r.auc_df < 0.9 || r.auc_bs < 0.8;
    if (roc_out) *roc_out = std::move(roc);
    return r;
}

struct EvalReport {
    std::string method;
    std::vector<ImageScore> images;
    std::vector<std::string> excluded;  // images skipped, with the reason

    double mean_df() const { return mean(&ImageScore::auc_df); }
    double mean_ftau() const { return mean(&ImageScore::auc_ftau); }
    double mean_bs() const { return mean(&ImageScore::auc_bs); }
    std::size_t failures() const {
        return static_cast<std::size_t>(std::count_if(images.begin(), images.end(), [](auto& s) { return s.failed; }));
    }

    json to_json() const {
        json per = json::array();
        for (const auto& s : images)
            per.push_back({{"name", s.name}, {"auc_df", s.auc_df}, {"auc_ftau", s.auc_ftau}, {"auc_bs", s.auc_bs},
                           {"failed", s.failed}});
        return {{"method", method},
                {"images", per},
                {"excluded", excluded},
                {"mean_auc_df", mean_df()},
                {"mean_auc_ftau", mean_ftau()},
                {"mean_auc_bs", mean_bs()},
                {"failures", failures()},
                {"count", images.size()}};
    }

    /// index,name,auc_df,auc_bs rows followed by a mean row.
    std::string table_csv() const {
        std::ostringstream os;
        os.precision(6);
        os << std::fixed << "index,name,auc_df,auc_ftau,auc_bs,failed\n";
        for (std::size_t i = 0; i < images.size(); ++i) {
            const auto& s = images[i];
            os << i + 1 << ',' << s.name << ',' << s.auc_df << ',' << s.auc_ftau << ',' << s.auc_bs << ','
               << (s.failed ? 1 : 0) << '\n';
        }
        os << "mean,," << mean_df() << ',' << mean_ftau() << ',' << mean_bs() << ',' << failures() << '\n';
        return os.str();
    }

  private:
    double mean(double ImageScore::*field) const {
        if (images.empty()) return 0.0;
        double s = 0.0;
        for (const auto& im : images) s += im.*field;
        return s / static_cast<double>(images.size());
    }
};

/// For each method, how many images it ranks within the top k by AUC_(D,F)
/// (ties share the better rank). Reports must cover the same images in the same order.
inline std::vector<std::size_t> topk_counts(const std::vector<EvalReport>& reports, std::size_t k) {
    std::vector<std::size_t> counts(reports.size(), 0);
    if (reports.empty()) return counts;
    const std::size_t n = reports[0].images.size();
    for (const auto& r : reports)
        if (r.images.size() != n) throw ValidationError("topk_counts: reports cover different image sets");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < reports.size(); ++m) {
            std::size_t better = 0;
            for (std::size_t o = 0; o < reports.size(); ++o)
                better += reports[o].images[i].auc_df > reports[m].images[i].auc_df;
            if (better < k) ++counts[m];
        }
    return counts;
}

// ---------------------------------------------------------------------------
// Dependency study

/// exp(-(a-b)^2 / ((1-a+beta)(1-b+beta))), exponent clamped to [0, 700].
inline double dep_score(double a, double b, double beta = 1e-12) {
    if (!std::isfinite(a) || !std::isfinite(b)) throw ValidationError("dep_score: AUCs must be finite");
    const double e = (a - b) * (a - b) / ((1.0 - a + beta) * (1.0 - b + beta));
    return std::exp(-std::clamp(e, 0.0, 700.0));
}

/// Sample covariance (1/(n-1)).
inline double covariance(const std::vector<double>& x, const std::vector<double>& y) {
    const auto n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - mx) * (y[i] - my);
    return s / (n - 1.0);
}

struct MDep {
    double value = 0.0;
    std::vector<double> weights;  // R^i
    bool fallback = false;        // unweighted mean used
};

/// Jackknife-covariance weighted mean of per-image dependency scores.
inline MDep mdep(const std::vector<double>& dep, const std::vector<double>& phi, const std::vector<double>& psi) {
    const std::size_t n = dep.size();
    if (phi.size() != n || psi.size() != n) throw ValidationError("mdep: sequences differ in length");
    if (n < 3) throw ValidationError("mdep: need at least 3 images, got " + std::to_string(n));
    MDep r;
    r.weights.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> a, b;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) {
                a.push_back(phi[j]);
                b.push_back(psi[j]);
            }
        r.weights[i] = covariance(a, b);
    }
    const double total = std::accumulate(r.weights.begin(), r.weights.end(), 0.0);
    if (!(total > 1e-15)) {
        r.fallback = true;
        r.value = std::accumulate(dep.begin(), dep.end(), 0.0) / static_cast<double>(n);
        return r;
    }
    for (std::size_t i = 0; i < n; ++i) r.value += r.weights[i] * dep[i];
    r.value /= total;
    return r;
}

struct DepReport {
    std::vector<std::string> names;
    std::vector<double> dep_df, dep_bs;
    MDep mdep_df, mdep_bs;
    double strong_threshold = 0.9;

    /// Fraction of images with Dep_(D,F) above the threshold.
    double strong_fraction() const {
        if (dep_df.empty()) return 0.0;
        const auto c = std::count_if(dep_df.begin(), dep_df.end(), [&](double d) { return d > strong_threshold; });
        return static_cast<double>(c) / static_cast<double>(dep_df.size());
    }

    json to_json() const {
        json per = json::array();
        for (std::size_t i = 0; i < names.size(); ++i)
            per.push_back({{"name", names[i]}, {"dep_df", dep_df[i]}, {"dep_bs", dep_bs[i]}});
        return {{"images", per},
                {"mdep_df", mdep_df.value},
                {"mdep_bs", mdep_bs.value},
                {"weights_df", mdep_df.weights},
                {"weights_bs", mdep_bs.weights},
                {"fallback_df", mdep_df.fallback},
                {"fallback_bs", mdep_bs.fallback},
                {"strong_threshold", strong_threshold},
                {"strong_fraction", strong_fraction()}};
    }

    std::string table_csv() const {
        std::ostringstream os;
        os.precision(9);
        os << "index,name,dep_df,dep_bs\n";
        for (std::size_t i = 0; i < names.size(); ++i)
            os << i + 1 << ',' << names[i] << ',' << dep_df[i] << ',' << dep_bs[i] << '\n';
        os << "mdep,," << mdep_df.value << ',' << mdep_bs.value << '\n';
        return os.str();
    }
};

/// Dependency of method phi on method psi over the same images (matched by position).
inline DepReport dependency(const EvalReport& phi, const EvalReport& psi, double beta = 1e-12) {
    if (phi.images.size() != psi.images.size())
        throw ValidationError("dependency: the two methods were evaluated on different numbers of images");
    DepReport r;
    std::vector<double> a_df, b_df, a_bs, b_bs;
    for (std::size_t i = 0; i < phi.images.size(); ++i) {
        const auto &x = phi.images[i], &y = psi.images[i];
        if (x.name != y.name) throw ValidationError("dependency: image '" + x.name + "' has no match in the other set");
        r.names.push_back(x.name);
        r.dep_df.push_back(dep_score(x.auc_df, y.auc_df, beta));
        r.dep_bs.push_back(dep_score(x.auc_bs, y.auc_bs, beta));
        a_df.push_back(x.auc_df);
        b_df.push_back(y.auc_df);
        a_bs.push_back(x.auc_bs);
        b_bs.push_back(y.auc_bs);
    }
    r.mdep_df = mdep(r.dep_df, a_df, b_df);
    r.mdep_bs = mdep(r.dep_bs, a_bs, b_bs);
    return r;
}

}  // namespace stad::eval
