#pragma once

// Real-data preparation from per-subject expression means and their posterior
// variances: filtering, standardization and the error-variance estimate.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "precis/csv.hpp"
#include "precis/error.hpp"
#include "precis/linalg.hpp"
#include "precis/model.hpp"

namespace precis {

struct ExpressionTable {
    Matrix means;                        ///< n subjects x p features
    Matrix posteriorVariances;           ///< same shape, >= 0
    std::optional<Matrix> rawIntensities;
    std::vector<std::string> featureIds;

    std::size_t n() const { return std::size_t(means.rows()); }
    std::size_t p() const { return std::size_t(means.cols()); }

    void validate() const {
        if (means.rows() < 1 || means.cols() < 1) throw InvalidArgument("ExpressionTable: empty");
        auto same = [&](const Matrix& m) { return m.rows() == means.rows() && m.cols() == means.cols(); };
        if (!same(posteriorVariances)) throw DimensionMismatch("ExpressionTable: variances shape differs from means");
        if (rawIntensities && !same(*rawIntensities))
            throw DimensionMismatch("ExpressionTable: intensities shape differs from means");
        if (featureIds.size() != p()) throw DimensionMismatch("ExpressionTable: one label per feature required");
        if (!means.allFinite() || !posteriorVariances.allFinite())
            throw InvalidArgument("ExpressionTable: non-finite values");
        if ((posteriorVariances.array() < 0.0).any()) throw InvalidArgument("ExpressionTable: negative variance");
    }

    /// Copy restricted to the given feature columns, in that order.
    ExpressionTable select(const std::vector<std::size_t>& cols) const {
        ExpressionTable out;
        const auto n = means.rows();
        out.means.resize(n, Eigen::Index(cols.size()));
        out.posteriorVariances.resize(n, Eigen::Index(cols.size()));
        if (rawIntensities) out.rawIntensities = Matrix(n, Eigen::Index(cols.size()));
        for (std::size_t k = 0; k < cols.size(); ++k) {
            const auto c = Eigen::Index(cols[k]);
            out.means.col(Eigen::Index(k)) = means.col(c);
            out.posteriorVariances.col(Eigen::Index(k)) = posteriorVariances.col(c);
            if (rawIntensities) out.rawIntensities->col(Eigen::Index(k)) = rawIntensities->col(c);
            out.featureIds.push_back(featureIds[cols[k]]);
        }
        return out;
    }
};

/// Per-feature mean and population variance (divisor n).
inline Vector feature_means(const Matrix& m) { return m.colwise().mean().transpose(); }

inline Vector feature_variances(const Matrix& m) {
    const Eigen::RowVectorXd mu = m.colwise().mean();
    return ((m.rowwise() - mu).array().square().colwise().sum() / double(m.rows())).transpose();
}

struct Standardized {
    Dataset w;
    Vector featureMeans;
    Vector featureSds;
};

/// W_ij = (mu_ij - mean_j) / sd_j with divisor-n moments.
inline Standardized standardize(const ExpressionTable& t) {
    t.validate();
    const Vector mu = feature_means(t.means);
    const Vector sd = feature_variances(t.means).cwiseSqrt();
    std::vector<std::string> flat;
    for (std::size_t j = 0; j < t.p(); ++j)
        if (!(sd(Eigen::Index(j)) > 0.0)) flat.push_back(t.featureIds[j]);
    if (!flat.empty()) throw ZeroVarianceFeature(std::move(flat));
    Matrix w = (t.means.rowwise() - mu.transpose()).array().rowwise() / sd.transpose().array();
    return {Dataset(std::move(w)), mu, sd};
}

/// Standardized error variances: mean posterior variance of feature j over
/// subjects, divided by sd_j^2.
inline MeasurementErrorModel estimate_sigma_u(const ExpressionTable& t, const Vector& featureSds) {
    if (std::size_t(featureSds.size()) != t.p()) throw DimensionMismatch("estimate_sigma_u: one sd per feature");
    if (!(featureSds.minCoeff() > 0.0)) throw InvalidArgument("estimate_sigma_u: feature sds must be positive");
    const Vector raw = feature_means(t.posteriorVariances);
    return MeasurementErrorModel(raw.cwiseQuotient(featureSds.cwiseAbs2()));
}

/// Linear-interpolation quantile (type 7) of the values.
inline double quantile7(std::vector<double> v, double q) {
    if (v.empty()) throw InvalidArgument("quantile7: no values");
    std::sort(v.begin(), v.end());
    const double h = (double(v.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - double(lo)) * (v[hi] - v[lo]);
}

enum class Filter { Intensity = 2, Iqr = 3, Noise = 4 };

struct FilterConfig {
    bool intensity = true;
    bool iqr = true;
    bool noise = true;
    double minFractionAbove = 0.25; ///< filter 2: share of samples ...
    double intensityFloor = 100.0;  ///< ... with raw intensity above this
    double minIqr = 0.6;            ///< filter 3: keep when IQR of the (log-scale) means >= this
    double maxNoiseRatio = 0.5;     ///< filter 4: remove when sigma_u^2 / sigma^2 >= this
    std::vector<Filter> order{Filter::Intensity, Filter::Iqr, Filter::Noise};
};

struct FilterRemoval {
    Filter filter;
    std::size_t removed = 0;
};

struct FilterReport {
    std::vector<std::size_t> kept;
    std::vector<FilterRemoval> removals; ///< in application order
};

/// Whether feature j passes one filter.
inline bool passes(const ExpressionTable& t, std::size_t j, Filter f, const FilterConfig& cfg) {
    const auto c = Eigen::Index(j);
    switch (f) {
        case Filter::Intensity: {
            const Eigen::Index above = (t.rawIntensities->col(c).array() > cfg.intensityFloor).count();
            return double(above) >= cfg.minFractionAbove * double(t.n());
        }
        case Filter::Iqr: {
            std::vector<double> v(t.n());
            for (std::size_t i = 0; i < t.n(); ++i) v[i] = t.means(Eigen::Index(i), c);
            return quantile7(v, 0.75) - quantile7(std::move(v), 0.25) >= cfg.minIqr;
        }
        case Filter::Noise: {
            const double mu = t.means.col(c).mean();
            const double var = (t.means.col(c).array() - mu).square().mean();
            const double noise = t.posteriorVariances.col(c).mean();
            return noise < cfg.maxNoiseRatio * var;
        }
    }
    return true;
}

inline FilterReport apply_filters(const ExpressionTable& t, const FilterConfig& cfg = {}) {
    t.validate();
    auto enabled = [&](Filter f) {
        return f == Filter::Intensity ? cfg.intensity : f == Filter::Iqr ? cfg.iqr : cfg.noise;
    };
    if (enabled(Filter::Intensity) && !t.rawIntensities)
        throw MissingRawIntensities("apply_filters: the intensity filter needs raw intensities");
    FilterReport rep;
    for (std::size_t j = 0; j < t.p(); ++j) rep.kept.push_back(j);
    for (Filter f : cfg.order) {
        if (!enabled(f)) continue;
        std::vector<std::size_t> next;
        for (std::size_t j : rep.kept)
            if (passes(t, j, f, cfg)) next.push_back(j);
        rep.removals.push_back({f, rep.kept.size() - next.size()});
        rep.kept = std::move(next);
    }
    return rep;
}

/// Reads the means/variances(/intensities) trio; each file has one header row
/// of feature labels, and the labels must agree.
inline ExpressionTable read_expression_table(const std::filesystem::path& means, const std::filesystem::path& variances,
                                             const std::optional<std::filesystem::path>& intensities = std::nullopt) {
    csv::Table m = csv::read(means, csv::Header::Required);
    csv::Table v = csv::read(variances, csv::Header::Required);
    if (v.header != m.header) throw DimensionMismatch("expression table: variance labels differ from mean labels");
    ExpressionTable t;
    t.featureIds = m.header;
    t.means = std::move(m.values);
    t.posteriorVariances = std::move(v.values);
    if (intensities) {
        csv::Table r = csv::read(*intensities, csv::Header::Required);
        if (r.header != t.featureIds)
            throw DimensionMismatch("expression table: intensity labels differ from mean labels");
        t.rawIntensities = std::move(r.values);
    }
    t.validate();
    return t;
}

}  // namespace precis
