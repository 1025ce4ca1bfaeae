#pragma once

// Imputation-regularization loop for contaminated data: draw latent clean rows
// from their Gaussian full conditional given the current precision estimate,
// refit BAGUS on the imputed data, and average the post-burn-in fits.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "precis/bagus.hpp"
#include "precis/diagnostics.hpp"
#include "precis/graph.hpp"
#include "precis/linalg.hpp"
#include "precis/model.hpp"
#include "precis/rng.hpp"

namespace precis {

/// Smallest error variance accepted by the correction loop.
inline constexpr double kMinErrorVariance = 1e-10;

struct IroConfig {
    std::size_t iterations = 50;
    double burnInFraction = 0.2;
    std::uint64_t seed = 0;
    BagusHyperparams hp;

    std::size_t burn_in_count() const {
        return static_cast<std::size_t>(std::floor(static_cast<double>(iterations) * burnInFraction));
    }

    void validate() const {
        if (iterations < 1) throw InvalidArgument("IroConfig: need at least one iteration");
        if (!(burnInFraction >= 0.0 && burnInFraction < 1.0))
            throw InvalidArgument("IroConfig: burn-in fraction must lie in [0, 1)");
        if (burn_in_count() >= iterations) throw InvalidArgument("IroConfig: burn-in discards every iterate");
        hp.validate();
    }
};

struct IroTrace {
    PrecisionEstimate initial;                 ///< naive fit on the observed data
    std::vector<PrecisionEstimate> perIteration;
    PrecisionEstimate averaged;
    SymMatrix averagedCovariance;              ///< mean sample covariance of retained imputations
    std::size_t burnInCount = 0;
    std::vector<std::size_t> nonConverged;     ///< 1-based iterations whose EM hit its cap
};

/// Draws every row x_i ~ N(Lambda^{-1} Omega_u w_i, Lambda^{-1}), Lambda = Omega_x + Omega_u.
/// Row i of iteration t uses substream (seed, Impute, t, i).
inline Dataset impute_latent(const Dataset& w, const SymMatrix& omegaPrev, const MeasurementErrorModel& me,
                             std::uint64_t seed, std::uint64_t iteration) {
    const auto n = static_cast<Eigen::Index>(w.n());
    const auto d = static_cast<Eigen::Index>(w.d());
    if (omegaPrev.dim() != w.d() || me.dim() != w.d()) throw DimensionMismatch("impute_latent: dimensions differ");
    const Vector omegaU = me.precision();

    Matrix lambda = omegaPrev.matrix();
    lambda.diagonal() += omegaU;
    const Matrix l = cholesky(lambda);

    // Means for all rows at once: Lambda M^T = Omega_u W^T.
    Matrix means = (w.rows() * omegaU.asDiagonal()).transpose();
    cholesky_solve_in_place(l, means);

    Matrix noise(d, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        NormalStream z(substream(seed, {std::uint64_t(Stream::Impute), iteration, std::uint64_t(i)}));
        for (Eigen::Index j = 0; j < d; ++j) noise(j, i) = z();
    }
    // L^{-T} z has covariance (L L^T)^{-1} = Lambda^{-1}.
    l.transpose().triangularView<Eigen::Upper>().solveInPlace(noise);

    Matrix out = (means + noise).transpose();
    return Dataset(std::move(out));
}

/// Elementwise mean of the omegas and inclusion probabilities after burn-in.
inline PrecisionEstimate average_estimates(std::span<const PrecisionEstimate> trace, std::size_t burnInCount) {
    if (burnInCount >= trace.size()) throw EmptyAverage("average_estimates: burn-in removes every iterate");
    const std::size_t kept = trace.size() - burnInCount;
    Matrix om = Matrix::Zero(trace.front().omega.matrix().rows(), trace.front().omega.matrix().cols());
    Matrix p = om;
    bool converged = true;
    for (std::size_t t = burnInCount; t < trace.size(); ++t) {
        om += trace[t].omega.matrix();
        p += trace[t].inclusionProb.matrix();
        converged = converged && trace[t].converged;
    }
    om /= static_cast<double>(kept);
    p /= static_cast<double>(kept);
    p.diagonal().setOnes();
    PrecisionEstimate out;
    out.omega = SymMatrix(std::move(om));
    out.inclusionProb = SymMatrix(std::move(p));
    out.converged = converged;
    return out;
}

/// Edges (i, j), i < j, with p_ij >= threshold.
inline Adjacency select_edges(const SymMatrix& p, double threshold = 0.5) {
    Adjacency a(p.dim());
    for (std::size_t i = 0; i < p.dim(); ++i)
        for (std::size_t j = i + 1; j < p.dim(); ++j)
            if (p(i, j) >= threshold) a.set(i, j);
    return a;
}

namespace detail {

template <class F>
auto at_iteration(std::size_t t, F&& f) {
    try {
        return f();
    } catch (const NotPositiveDefinite& e) {
        throw NotPositiveDefinite("iteration " + std::to_string(t) + ": " + e.what());
    } catch (const DimensionMismatch& e) {
        throw DimensionMismatch("iteration " + std::to_string(t) + ": " + e.what());
    } catch (const InvalidArgument& e) {
        throw InvalidArgument("iteration " + std::to_string(t) + ": " + e.what());
    }
}

inline void audit_average(const PrecisionEstimate& avg, double bound) {
    auto& c = diagnostics::counters();
    ++c.averagedEstimates;
    if (!is_positive_definite(avg.omega)) ++c.averagedNotPositiveDefinite;
    if (avg.omega.matrix().cwiseAbs().maxCoeff() > bound) ++c.boundViolations;
}

}  // namespace detail

/// Full correction run. Iteration t imputes with Omega^(t-1), fits BAGUS on the
/// imputed sample covariance warm-started at Omega^(t-1); Omega^(0) is the
/// naive fit on w unless `initial` is given.
inline IroTrace run_iro(const Dataset& w, const MeasurementErrorModel& me, const IroConfig& cfg,
                        const std::optional<PrecisionEstimate>& initial = std::nullopt) {
    cfg.validate();
    if (me.dim() != w.d()) throw DimensionMismatch("run_iro: error model and data dimensions differ");
    if (w.n() < 2) throw InvalidArgument("run_iro: need at least 2 observations");
    if (!(me.min_variance() >= kMinErrorVariance))
        throw InvalidArgument("run_iro: error variances must be >= 1e-10; use a plain fit for clean data");

    IroTrace trace;
    trace.initial = initial ? *initial : detail::at_iteration(0, [&] {
        return fit_bagus(FitInput(sample_covariance(w), w.n()), cfg.hp);
    });
    trace.burnInCount = cfg.burn_in_count();
    trace.perIteration.reserve(cfg.iterations);

    Matrix covSum = Matrix::Zero(Eigen::Index(w.d()), Eigen::Index(w.d()));
    const SymMatrix* prev = &trace.initial.omega;
    for (std::size_t t = 1; t <= cfg.iterations; ++t) {
        PrecisionEstimate est = detail::at_iteration(t, [&] {
            const Dataset x = impute_latent(w, *prev, me, cfg.seed, t);
            FitInput in(sample_covariance(x), x.n());
            if (t > trace.burnInCount) covSum += in.s.matrix();
            return fit_bagus(in, cfg.hp, *prev);
        });
        if (!est.converged) trace.nonConverged.push_back(t);
        trace.perIteration.push_back(std::move(est));
        prev = &trace.perIteration.back().omega;
    }

    trace.averaged = average_estimates(trace.perIteration, trace.burnInCount);
    trace.averagedCovariance =
        SymMatrix(covSum / static_cast<double>(cfg.iterations - trace.burnInCount));
    detail::audit_average(trace.averaged, cfg.hp.specB);
    return trace;
}

}  // namespace precis
