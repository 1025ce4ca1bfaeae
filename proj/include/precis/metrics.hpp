#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <utility>
#include <vector>

#include "precis/error.hpp"
#include "precis/graph.hpp"
#include "precis/linalg.hpp"

namespace precis {

/// Counts over the strict upper triangle.
struct ConfusionCounts {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::size_t total() const noexcept { return tp + fp + tn + fn; }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

inline ConfusionCounts confusion(const Adjacency& estimated, const Adjacency& truth) {
    if (estimated.dim() != truth.dim()) throw DimensionMismatch("confusion: graphs differ in size");
    ConfusionCounts c;
    const std::size_t d = truth.dim();
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            const bool e = estimated(i, j), t = truth(i, j);
            if (e && t) ++c.tp;
            else if (e) ++c.fp;
            else if (t) ++c.fn;
            else ++c.tn;
        }
    return c;
}

/// Set when the metric's denominator was zero and the value was defined as 0.
struct DegenerateFlags {
    bool sen = false, spe = false, pre = false, acc = false, mcc = false;

    bool any() const noexcept { return sen || spe || pre || acc || mcc; }
};

struct ClassificationMetrics {
    double sen = 0, spe = 0, pre = 0, acc = 0, mcc = 0;
    DegenerateFlags degenerate;
};

inline ClassificationMetrics classification_metrics(const ConfusionCounts& c) {
    const double tp = double(c.tp), fp = double(c.fp), tn = double(c.tn), fn = double(c.fn);
    ClassificationMetrics m;
    auto ratio = [](double num, double den, bool& flag) {
        if (den == 0.0) {
            flag = true;
            return 0.0;
        }
        return num / den;
    };
    m.sen = ratio(tp, tp + fn, m.degenerate.sen);
    m.spe = ratio(tn, tn + fp, m.degenerate.spe);
    m.pre = ratio(tp, tp + fp, m.degenerate.pre);
    m.acc = ratio(tp + tn, tp + fp + tn + fn, m.degenerate.acc);
    const double den = std::sqrt((tp + fp) * (tp + fn)) * std::sqrt((tn + fp) * (tn + fn));
    m.mcc = ratio(tp * tn - fp * fn, den, m.degenerate.mcc);
    return m;
}

/// Rank-based (Mann-Whitney) AUC with average ranks for ties.
inline double auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
    if (scores.size() != labels.size()) throw DimensionMismatch("auc: scores and labels differ in length");
    const std::size_t m = scores.size();
    const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), true));
    const std::size_t neg = m - pos;
    if (pos == 0 || neg == 0) throw SingleClass("auc: truth needs both edges and non-edges");

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rankSum = 0.0;
    for (std::size_t i = 0; i < m;) {
        std::size_t j = i;
        while (j + 1 < m && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avgRank = 0.5 * double(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            if (labels[order[k]]) rankSum += avgRank;
        i = j + 1;
    }
    const double p = double(pos), n = double(neg);
    return (rankSum - p * (p + 1.0) / 2.0) / (p * n);
}

/// AUC of the upper-triangle inclusion scores against the true graph.
inline double auc(const SymMatrix& scores, const Adjacency& truth) {
    if (scores.dim() != truth.dim()) throw DimensionMismatch("auc: score matrix and graph differ in size");
    std::vector<double> s;
    std::vector<bool> l;
    const std::size_t d = truth.dim();
    s.reserve(d * (d - 1) / 2);
    l.reserve(d * (d - 1) / 2);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = i + 1; j < d; ++j) {
            s.push_back(scores(i, j));
            l.push_back(truth(i, j));
        }
    return auc(s, l);
}

inline double frobenius_error(const SymMatrix& omegaHat, const SymMatrix& omegaTrue) {
    if (omegaHat.dim() != omegaTrue.dim()) throw DimensionMismatch("frobenius_error: dimensions differ");
    return (omegaHat.matrix() - omegaTrue.matrix()).norm();
}

}  // namespace precis
