#pragma once

// Domain types and the identities of the contaminated Gaussian model w = x + u.

#include <cstddef>
#include <string>
#include <vector>

#include "precis/linalg.hpp"

namespace precis {

/// Diagonal measurement-error covariance, one variance per coordinate.
/// Zero variances are representable (clean-data degenerate case); anything
/// that needs the error precision calls precision(), which rejects them.
class MeasurementErrorModel {
public:
    MeasurementErrorModel() = default;

    explicit MeasurementErrorModel(Vector variances) : variances_(std::move(variances)) {
        if (variances_.size() < 1) throw InvalidArgument("MeasurementErrorModel: empty");
        for (Eigen::Index j = 0; j < variances_.size(); ++j)
            if (!std::isfinite(variances_(j)) || variances_(j) < 0.0)
                throw InvalidArgument("MeasurementErrorModel: variance " + std::to_string(j) +
                                      " must be finite and >= 0");
    }

    std::size_t dim() const noexcept { return static_cast<std::size_t>(variances_.size()); }
    const Vector& variances() const noexcept { return variances_; }

    /// Smallest variance across coordinates.
    double min_variance() const { return variances_.minCoeff(); }

    /// Diagonal of the error precision Omega_u = Sigma_u^{-1}.
    Vector precision() const {
        if (!(min_variance() > 0.0))
            throw InvalidArgument("MeasurementErrorModel: error precision needs strictly positive variances");
        return variances_.cwiseInverse();
    }

    SymMatrix dense() const { return SymMatrix::diagonal(variances_); }

private:
    Vector variances_;
};

/// Hyperparameters of one spike-and-slab Lasso fit.
struct BagusHyperparams {
    double v0 = 0.05;    ///< spike scale
    double v1 = 1.0;     ///< slab scale
    double eta = 0.5;    ///< prior slab probability
    double tau = 0.05;   ///< exponential rate on the diagonal
    double specB = 10.0; ///< elementwise magnitude bound on Omega
    double emTol = 1e-4;
    std::size_t emMaxIter = 50;
    std::size_t maxSweeps = 200; ///< column sweeps per M-step

    /// eta = 0.5 and tau = v0, the conventions used for every tuned fit.
    static BagusHyperparams with_scales(double v0, double v1) {
        BagusHyperparams hp;
        hp.v0 = v0;
        hp.v1 = v1;
        hp.eta = 0.5;
        hp.tau = v0;
        return hp;
    }

    void validate() const {
        if (!(v0 > 0.0 && v0 < v1)) throw InvalidArgument("hyperparams: need 0 < v0 < v1");
        if (!(eta > 0.0 && eta < 1.0)) throw InvalidArgument("hyperparams: need 0 < eta < 1");
        if (!(tau > 0.0)) throw InvalidArgument("hyperparams: need tau > 0");
        if (!(specB > 0.0)) throw InvalidArgument("hyperparams: need B > 0");
        if (!(emTol > 0.0)) throw InvalidArgument("hyperparams: need emTol > 0");
        if (emMaxIter < 1) throw InvalidArgument("hyperparams: need emMaxIter >= 1");
        if (maxSweeps < 1) throw InvalidArgument("hyperparams: need maxSweeps >= 1");
    }
};

/// A fitted precision matrix with its slab-inclusion probabilities.
struct PrecisionEstimate {
    SymMatrix omega;
    SymMatrix inclusionProb;             ///< diagonal fixed at 1
    std::vector<double> objectiveTrace;  ///< objective after each EM iteration
    bool converged = true;
    std::size_t emIterations = 0;
};

/// S = n^{-1} sum (x_i - xbar)(x_i - xbar)^T.
inline SymMatrix sample_covariance(const Dataset& x) {
    if (x.n() < 2) throw InvalidArgument("sample_covariance: need at least 2 observations");
    const Matrix& rows = x.rows();
    const Eigen::RowVectorXd mean = rows.colwise().mean();
    const Matrix centered = rows.rowwise() - mean;
    Matrix s = (centered.transpose() * centered) / static_cast<double>(x.n());
    return SymMatrix(0.5 * (s + s.transpose()));
}

/// Omega_w = Omega_x - Omega_x (I + Sigma_u Omega_x)^{-1} Sigma_u Omega_x,
/// the precision of the contaminated observations.
inline SymMatrix contaminated_precision(const SymMatrix& omegaX, const MeasurementErrorModel& sigmaU) {
    const std::size_t d = omegaX.dim();
    if (sigmaU.dim() != d) throw DimensionMismatch("contaminated_precision: dimensions differ");
    (void)cholesky(omegaX);
    const Matrix& om = omegaX.matrix();
    const auto su = sigmaU.variances().asDiagonal();
    Matrix inner = Matrix::Identity(om.rows(), om.cols()) + su * om;
    // inner is similar to an SPD matrix but not symmetric itself; solve with LU.
    Matrix rhs = su * om;
    Matrix corr = inner.partialPivLu().solve(rhs);
    Matrix out = om - om * corr;
    return SymMatrix(0.5 * (out + out.transpose()));
}

/// Sigma_x estimate S_w - Sigma_u. The result is frequently indefinite.
inline SymMatrix naive_moment_correction(const SymMatrix& sW, const MeasurementErrorModel& sigmaU) {
    if (sW.dim() != sigmaU.dim()) throw DimensionMismatch("naive_moment_correction: dimensions differ");
    Matrix out = sW.matrix();
    out.diagonal() -= sigmaU.variances();
    return SymMatrix(std::move(out));
}

}  // namespace precis
