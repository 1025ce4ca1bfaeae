#pragma once

// MAP estimation of a sparse precision matrix under the spike-and-slab Lasso
// prior. The EM loop alternates an E-step (posterior slab probabilities and
// the implied l1 weights) with an M-step that minimizes
//
//   (n/2)(tr(S Omega) - logdet Omega) + sum_{i<j} d_ij |w_ij| + tau sum_i w_ii
//
// by block coordinate descent over columns, subject to |w_ij| <= B.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "precis/diagnostics.hpp"
#include "precis/linalg.hpp"
#include "precis/model.hpp"
#include "precis/parallel.hpp"

namespace precis {

/// Sufficient statistics for one fit: sample covariance and sample size.
struct FitInput {
    SymMatrix s;
    std::size_t n = 0;

    FitInput() = default;
    FitInput(SymMatrix s_, std::size_t n_) : s(std::move(s_)), n(n_) {
        if (n < 2) throw InvalidArgument("FitInput: need n >= 2");
    }

    static FitInput from_data(const Dataset& x) { return FitInput(sample_covariance(x), x.n()); }
};

struct EStepResult {
    SymMatrix inclusionProb; ///< off-diagonal slab probabilities, unit diagonal
    SymMatrix weights;       ///< off-diagonal l1 weights d_ij, tau on the diagonal
};

namespace detail {

inline double log_prior_odds(const BagusHyperparams& hp) {
    return std::log(hp.v1 / hp.v0) + std::log((1.0 - hp.eta) / hp.eta);
}

inline double soft_threshold(double z, double t) {
    if (z > t) return z - t;
    if (z < -t) return z + t;
    return 0.0;
}

}  // namespace detail

/// Posterior probability that an off-diagonal entry comes from the slab.
/// The spike-to-slab odds are (v1/v0)((1-eta)/eta) exp{|w|(1/v1 - 1/v0)}
/// and the probability is 1 / (1 + odds).
inline double slab_inclusion_prob(double omegaIJ, const BagusHyperparams& hp) {
    const double logOdds =
        detail::log_prior_odds(hp) + std::abs(omegaIJ) * (1.0 / hp.v1 - 1.0 / hp.v0);
    if (logOdds > 0.0) {
        const double e = std::exp(-logOdds);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(logOdds));
}

/// l1 weight implied by a slab probability: p/v1 + (1-p)/v0.
inline double penalty_weight(double p, const BagusHyperparams& hp) {
    return p / hp.v1 + (1.0 - p) / hp.v0;
}

inline EStepResult estep(const SymMatrix& omega, const BagusHyperparams& hp) {
    const auto d = static_cast<Eigen::Index>(omega.dim());
    Matrix p = Matrix::Identity(d, d);
    Matrix w = Matrix::Zero(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        w(i, i) = hp.tau;
        for (Eigen::Index j = i + 1; j < d; ++j) {
            const double pij = slab_inclusion_prob(omega.matrix()(i, j), hp);
            p(i, j) = p(j, i) = pij;
            w(i, j) = w(j, i) = penalty_weight(pij, hp);
        }
    }
    return {SymMatrix(std::move(p)), SymMatrix(std::move(w))};
}

/// Negative log of the spike-and-slab Laplace mixture density at w.
inline double mixture_penalty(double omegaIJ, const BagusHyperparams& hp) {
    const double a = std::abs(omegaIJ);
    const double slab = std::log(hp.eta / (2.0 * hp.v1)) - a / hp.v1;
    const double spike = std::log((1.0 - hp.eta) / (2.0 * hp.v0)) - a / hp.v0;
    const double hi = std::max(slab, spike);
    return -(hi + std::log(std::exp(slab - hi) + std::exp(spike - hi)));
}

/// Negative log-posterior (up to a constant) minimized by fit_bagus.
inline double objective(const SymMatrix& omega, const FitInput& input, const BagusHyperparams& hp) {
    if (omega.dim() != input.s.dim()) throw DimensionMismatch("objective: dimensions differ");
    const double logdet = log_det(omega);
    const Matrix& om = omega.matrix();
    const double trace = input.s.matrix().cwiseProduct(om).sum();
    double pen = 0.0;
    const auto d = om.rows();
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = i + 1; j < d; ++j) pen += mixture_penalty(om(i, j), hp);
    return 0.5 * static_cast<double>(input.n) * (trace - logdet) + pen + hp.tau * om.trace();
}

/// Objective of the M-step surrogate for fixed weights (the l1-penalized likelihood).
inline double surrogate_objective(const SymMatrix& omega, const FitInput& input, const SymMatrix& weights) {
    const double logdet = log_det(omega);
    const Matrix& om = omega.matrix();
    const double trace = input.s.matrix().cwiseProduct(om).sum();
    double pen = 0.0;
    const auto d = om.rows();
    for (Eigen::Index i = 0; i < d; ++i) {
        pen += weights.matrix()(i, i) * om(i, i);
        for (Eigen::Index j = i + 1; j < d; ++j) pen += weights.matrix()(i, j) * std::abs(om(i, j));
    }
    return 0.5 * static_cast<double>(input.n) * (trace - logdet) + pen;
}

struct MStepStats {
    std::size_t sweeps = 0;
    bool converged = false;
};

/// One M-step: column-wise block coordinate descent on the weighted-l1 surrogate,
/// warm-started at omegaInit. The diagonal of `weights` is ignored; hp.tau is used.
inline SymMatrix mstep(const FitInput& input, const SymMatrix& weights, const SymMatrix& omegaInit,
                       const BagusHyperparams& hp, MStepStats* stats = nullptr) {
    const auto d = static_cast<Eigen::Index>(input.s.dim());
    if (weights.dim() != input.s.dim() || omegaInit.dim() != input.s.dim())
        throw DimensionMismatch("mstep: dimensions differ");
    const double n = static_cast<double>(input.n);
    const double bound = hp.specB;
    const Matrix& s = input.s.matrix();
    const Matrix& wt = weights.matrix();

    Matrix om = omegaInit.matrix();
    Matrix sig = inverse_spd(omegaInit).matrix();

    if (d == 1) {
        om(0, 0) = std::min(1.0 / (s(0, 0) + 2.0 * hp.tau / n), bound);
        if (stats) *stats = {1, true};
        return SymMatrix(std::move(om));
    }

    const Eigen::Index m = d - 1;
    const double innerTol = 0.1 * hp.emTol;
    constexpr int kInnerCap = 1000;

    std::vector<Eigen::Index> idx(static_cast<std::size_t>(m));
    Matrix a(m, m);
    Vector beta(m), grad(m), aBeta(m), sigCol(m);

    MStepStats local;
    for (std::size_t sweep = 0; sweep < hp.maxSweeps; ++sweep) {
        double maxDelta = 0.0;
        for (Eigen::Index j = 0; j < d; ++j) {
            for (Eigen::Index k = 0, t = 0; k < d; ++k)
                if (k != j) idx[static_cast<std::size_t>(t++)] = k;

            // Omega_11^{-1} = Sigma_11 - sigma_12 sigma_12^T / sigma_22
            const double sig22 = sig(j, j);
            for (Eigen::Index r = 0; r < m; ++r) sigCol(r) = sig(idx[std::size_t(r)], j);
            for (Eigen::Index r = 0; r < m; ++r) {
                const auto ir = idx[std::size_t(r)];
                for (Eigen::Index c = 0; c < m; ++c)
                    a(r, c) = sig(ir, idx[std::size_t(c)]) - sigCol(r) * sigCol(c) / sig22;
            }

            const double coef = n * s(j, j) + 2.0 * hp.tau;
            for (Eigen::Index r = 0; r < m; ++r) beta(r) = om(idx[std::size_t(r)], j);
            grad.noalias() = coef * (a * beta);
            for (Eigen::Index r = 0; r < m; ++r) grad(r) += n * s(idx[std::size_t(r)], j);

            // Weighted lasso in omega_12: (1/2) b^T (coef A) b + n s_12^T b + sum d_k |b_k|
            for (int inner = 0; inner < kInnerCap; ++inner) {
                double innerDelta = 0.0;
                for (Eigen::Index k = 0; k < m; ++k) {
                    const double q = coef * a(k, k);
                    const double old = beta(k);
                    const double z = q * old - grad(k);
                    double next = detail::soft_threshold(z, wt(idx[std::size_t(k)], j)) / q;
                    next = std::clamp(next, -bound, bound);
                    const double delta = next - old;
                    if (delta != 0.0) {
                        grad.noalias() += (coef * delta) * a.row(k).transpose();
                        beta(k) = next;
                        innerDelta = std::max(innerDelta, std::abs(delta));
                    }
                }
                if (innerDelta < innerTol) break;
            }

            aBeta.noalias() = a * beta;
            double quad = beta.dot(aBeta);
            const double cStar = 1.0 / (s(j, j) + 2.0 * hp.tau / n);
            double c = std::min(cStar, bound - quad);
            if (c < cStar) {
                // The diagonal bound binds, so the column problem no longer separates
                // into (omega_12, c). Keep whichever of the new and the previous
                // column scores lower; the previous one is feasible whenever the
                // incoming Omega was.
                auto columnObjective = [&](const Vector& b, const Vector& ab, double cc) {
                    double v = 0.5 * coef * b.dot(ab) + 0.5 * coef * cc - 0.5 * n * std::log(cc);
                    for (Eigen::Index r = 0; r < m; ++r)
                        v += n * s(idx[std::size_t(r)], j) * b(r) + wt(idx[std::size_t(r)], j) * std::abs(b(r));
                    return v;
                };
                Vector oldBeta(m);
                for (Eigen::Index r = 0; r < m; ++r) oldBeta(r) = om(idx[std::size_t(r)], j);
                Vector oldABeta = a * oldBeta;
                const double oldQuad = oldBeta.dot(oldABeta);
                const double oldC = std::min(cStar, bound - oldQuad);
                const bool newFeasible = c > 0.0;
                const bool oldFeasible = oldC > 0.0;
                if (oldFeasible && (!newFeasible || columnObjective(oldBeta, oldABeta, oldC) <
                                                        columnObjective(beta, aBeta, c))) {
                    beta = std::move(oldBeta);
                    aBeta = std::move(oldABeta);
                    quad = oldQuad;
                    c = oldC;
                } else if (!newFeasible) {
                    // Only reachable from an infeasible start: pull omega_12 inside the bound.
                    const double scale = std::sqrt(0.5 * bound / quad);
                    beta *= scale;
                    aBeta *= scale;
                    quad = beta.dot(aBeta);
                    c = std::min(cStar, bound - quad);
                }
            }
            const double diagNew = c + quad;

            maxDelta = std::max(maxDelta, std::abs(diagNew - om(j, j)));
            om(j, j) = diagNew;
            for (Eigen::Index r = 0; r < m; ++r) {
                const auto ir = idx[std::size_t(r)];
                maxDelta = std::max(maxDelta, std::abs(beta(r) - om(ir, j)));
                om(ir, j) = beta(r);
                om(j, ir) = beta(r);
            }

            // Sigma from the updated column (block inverse).
            sig(j, j) = 1.0 / c;
            for (Eigen::Index r = 0; r < m; ++r) {
                const auto ir = idx[std::size_t(r)];
                sig(ir, j) = sig(j, ir) = -aBeta(r) / c;
                for (Eigen::Index cc = 0; cc < m; ++cc)
                    sig(ir, idx[std::size_t(cc)]) = a(r, cc) + aBeta(r) * aBeta(cc) / c;
            }
        }
        local.sweeps = sweep + 1;
        if (maxDelta < hp.emTol) {
            local.converged = true;
            break;
        }
    }
    if (stats) *stats = local;
    return SymMatrix(std::move(om));
}

/// Starting point when no warm start is supplied: inverse(S), or
/// inverse(S + eps I) with eps = 1e-2 trace(S)/d when S is singular.
inline SymMatrix default_initial_precision(const SymMatrix& s) {
    const double d = static_cast<double>(s.dim());
    const double maxDiag = s.matrix().diagonal().maxCoeff();
    try {
        Matrix l = cholesky(s);
        const double minPivot = l.diagonal().minCoeff();
        if (minPivot * minPivot > 1e-10 * std::max(maxDiag, 1e-300)) return inverse_from_cholesky(l);
    } catch (const NotPositiveDefinite&) {
    }
    double eps = 1e-2 * s.matrix().trace() / d;
    if (!(eps > 0.0)) eps = 1e-2;
    Matrix reg = s.matrix();
    reg.diagonal().array() += eps;
    return inverse_spd(SymMatrix(std::move(reg)));
}

/// EM fit. Stops when the largest elementwise change of Omega drops below
/// hp.emTol; otherwise returns the last (best) iterate with converged = false.
inline PrecisionEstimate fit_bagus(const FitInput& input, const BagusHyperparams& hp,
                                   const std::optional<SymMatrix>& omegaInit = std::nullopt) {
    hp.validate();
    SymMatrix omega = omegaInit ? *omegaInit : default_initial_precision(input.s);
    if (omega.dim() != input.s.dim()) throw DimensionMismatch("fit_bagus: initial value has wrong dimension");
    (void)cholesky(omega);

    PrecisionEstimate out;
    out.converged = false;
    for (std::size_t it = 0; it < hp.emMaxIter; ++it) {
        const EStepResult e = estep(omega, hp);
        SymMatrix next = mstep(input, e.weights, omega, hp);
        out.objectiveTrace.push_back(objective(next, input, hp));
        const double change = max_abs_diff(next, omega);
        omega = std::move(next);
        out.emIterations = it + 1;
        if (change < hp.emTol) {
            out.converged = true;
            break;
        }
    }

    auto& diag = diagnostics::counters();
    ++diag.emRuns;
    for (std::size_t t = 1; t < out.objectiveTrace.size(); ++t)
        if (out.objectiveTrace[t] > out.objectiveTrace[t - 1] + diagnostics::kMonotonicitySlack) {
            ++diag.emMonotonicityViolations;
            break;
        }
    if (omega.matrix().cwiseAbs().maxCoeff() > hp.specB) ++diag.boundViolations;

    out.inclusionProb = estep(omega, hp).inclusionProb;
    out.omega = std::move(omega);
    return out;
}

/// Number of strictly upper-triangular entries with inclusion probability >= threshold.
inline std::size_t selected_count(const SymMatrix& p, double threshold = 0.5) {
    std::size_t q = 0;
    const auto d = static_cast<Eigen::Index>(p.dim());
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = i + 1; j < d; ++j)
            if (p.matrix()(i, j) >= threshold) ++q;
    return q;
}

/// n (tr(S Omega) - logdet Omega) + log(n) q.
inline double bic(const SymMatrix& s, const SymMatrix& omegaHat, std::size_t n, std::size_t q) {
    if (s.dim() != omegaHat.dim()) throw DimensionMismatch("bic: dimensions differ");
    const double nn = static_cast<double>(n);
    const double trace = s.matrix().cwiseProduct(omegaHat.matrix()).sum();
    return nn * (trace - log_det(omegaHat)) + std::log(nn) * static_cast<double>(q);
}

/// BIC with q taken from the estimate's inclusion probabilities at the 0.5 cut-off.
inline double bic(const SymMatrix& s, const PrecisionEstimate& est, std::size_t n) {
    return bic(s, est.omega, n, selected_count(est.inclusionProb));
}

struct GridCell {
    double v0 = 0.0;
    double v1 = 0.0;
};

/// Cartesian product of spike and slab scales, skipping pairs with v0 >= v1.
inline std::vector<GridCell> make_grid(const std::vector<double>& v0s, const std::vector<double>& v1s) {
    std::vector<GridCell> grid;
    for (double v0 : v0s)
        for (double v1 : v1s)
            if (v0 < v1) grid.push_back({v0, v1});
    return grid;
}

/// Grid scaled by r = 1/sqrt(n log d): v0 in {0.5, 1, 2} r, v1 in {2.5, 5, 10} r.
inline std::vector<GridCell> default_grid(std::size_t n, std::size_t d) {
    if (n < 2 || d < 2) throw InvalidArgument("default_grid: need n >= 2 and d >= 2");
    const double r = 1.0 / std::sqrt(static_cast<double>(n) * std::log(static_cast<double>(d)));
    return make_grid({0.5 * r, r, 2.0 * r}, {2.5 * r, 5.0 * r, 10.0 * r});
}

struct TuneSettings {
    double eta = 0.5;
    std::optional<double> tau; ///< unset: tau = v0
    double specB = 10.0;
    double emTol = 1e-4;
    std::size_t emMaxIter = 50;
    std::size_t threads = 1;

    BagusHyperparams hyperparams(const GridCell& cell) const {
        BagusHyperparams hp;
        hp.v0 = cell.v0;
        hp.v1 = cell.v1;
        hp.eta = eta;
        hp.tau = tau.value_or(cell.v0);
        hp.specB = specB;
        hp.emTol = emTol;
        hp.emMaxIter = emMaxIter;
        return hp;
    }
};

/// What a tuning callback hands back for one grid cell: the estimate and the
/// covariance/sample size its BIC is evaluated against.
struct CellFit {
    PrecisionEstimate estimate;
    SymMatrix s;
    std::size_t n = 0;
};

struct TuneCellResult {
    GridCell cell;
    std::optional<double> bic; ///< empty when the fit failed
    std::string error;
};

template <class Payload = PrecisionEstimate>
struct TuneResult {
    BagusHyperparams best;
    std::size_t bestIndex = 0;
    std::vector<TuneCellResult> cells;
    Payload bestFit;
};

/// Evaluates fitCell(hp) -> (payload, CellFit) for every grid cell and keeps the
/// BIC minimizer. Ties go to the larger v0, then the larger v1. Failing cells
/// are recorded and skipped.
template <class FitCell>
auto tune_with(const std::vector<GridCell>& grid, const TuneSettings& settings, FitCell&& fitCell) {
    using Outcome = std::invoke_result_t<FitCell&, const BagusHyperparams&>;
    using Payload = typename Outcome::first_type;
    if (grid.empty()) throw InvalidArgument("tune: empty grid");
    for (const auto& c : grid)
        if (!(c.v0 > 0.0 && c.v0 < c.v1)) throw InvalidArgument("tune: every grid cell needs 0 < v0 < v1");

    std::vector<std::optional<Payload>> payloads(grid.size());
    TuneResult<Payload> result;
    result.cells.resize(grid.size());
    parallel_for(grid.size(), settings.threads, [&](std::size_t i) {
        auto& cell = result.cells[i];
        cell.cell = grid[i];
        try {
            const BagusHyperparams hp = settings.hyperparams(grid[i]);
            Outcome out = fitCell(hp);
            cell.bic = bic(out.second.s, out.second.estimate, out.second.n);
            payloads[i] = std::move(out.first);
        } catch (const Error& e) {
            cell.error = e.what();
        }
    });

    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        if (!result.cells[i].bic) continue;
        if (!best) {
            best = i;
            continue;
        }
        const auto& b = result.cells[*best];
        const auto& c = result.cells[i];
        const bool better =
            *c.bic < *b.bic ||
            (*c.bic == *b.bic && (c.cell.v0 > b.cell.v0 || (c.cell.v0 == b.cell.v0 && c.cell.v1 > b.cell.v1)));
        if (better) best = i;
    }
    if (!best) {
        std::string msg = "tune: every grid cell failed";
        if (!result.cells.empty() && !result.cells.front().error.empty()) msg += " (" + result.cells.front().error + ")";
        throw AllCellsFailed(msg);
    }
    result.bestIndex = *best;
    result.best = settings.hyperparams(grid[*best]);
    result.bestFit = std::move(*payloads[*best]);
    return result;
}

/// Plain BAGUS tuning on one covariance: each cell is fitted from the default start.
inline TuneResult<PrecisionEstimate> tune(const FitInput& input, const std::vector<GridCell>& grid,
                                          const TuneSettings& settings = {}) {
    return tune_with(grid, settings, [&](const BagusHyperparams& hp) {
        PrecisionEstimate est = fit_bagus(input, hp);
        CellFit cf{est, input.s, input.n};
        return std::pair<PrecisionEstimate, CellFit>(std::move(est), std::move(cf));
    });
}

}  // namespace precis
