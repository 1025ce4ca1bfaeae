#pragma once

// Dense symmetric linear algebra shared by every module: the SymMatrix and
// Dataset value types, Cholesky factorization, SPD inverse and log-determinant.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "precis/error.hpp"

namespace precis {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Largest |a_ij - a_ji| tolerated before construction refuses an input as non-symmetric.
inline constexpr double kSymmetryTolerance = 1e-9;

/// Dense symmetric d x d matrix. Construction averages (m + m^T)/2 so the
/// stored entries are exactly symmetric.
class SymMatrix {
public:
    SymMatrix() = default;

    explicit SymMatrix(Matrix m) : m_(std::move(m)) {
        if (m_.rows() != m_.cols())
            throw DimensionMismatch("SymMatrix: matrix is " + std::to_string(m_.rows()) + "x" +
                                    std::to_string(m_.cols()));
        if (m_.rows() < 1) throw InvalidArgument("SymMatrix: dimension must be >= 1");
        if (!m_.allFinite()) throw InvalidArgument("SymMatrix: non-finite entry");
        const double scale = std::max(1.0, m_.cwiseAbs().maxCoeff());
        const double asym = (m_ - m_.transpose()).cwiseAbs().maxCoeff();
        if (asym > kSymmetryTolerance * scale)
            throw InvalidArgument("SymMatrix: input is not symmetric (max asymmetry " +
                                  std::to_string(asym) + ")");
        Matrix avg = 0.5 * (m_ + m_.transpose());
        m_ = std::move(avg);
    }

    static SymMatrix identity(std::size_t d) { return SymMatrix(Matrix::Identity(dim_t(d), dim_t(d))); }
    static SymMatrix zeros(std::size_t d) { return SymMatrix(Matrix::Zero(dim_t(d), dim_t(d))); }
    static SymMatrix diagonal(const Vector& v) { return SymMatrix(Matrix(v.asDiagonal())); }

    std::size_t dim() const noexcept { return static_cast<std::size_t>(m_.rows()); }
    double operator()(std::size_t i, std::size_t j) const { return m_(dim_t(i), dim_t(j)); }
    const Matrix& matrix() const noexcept { return m_; }
    Vector diag() const { return m_.diagonal(); }

    friend bool operator==(const SymMatrix& a, const SymMatrix& b) {
        return a.m_.rows() == b.m_.rows() && a.m_ == b.m_;
    }

private:
    static Eigen::Index dim_t(std::size_t d) { return static_cast<Eigen::Index>(d); }

    Matrix m_;
};

/// n observations of a d-dimensional vector, one observation per row.
class Dataset {
public:
    Dataset() = default;

    explicit Dataset(Matrix rows) : rows_(std::move(rows)) {
        if (rows_.rows() < 1 || rows_.cols() < 1) throw InvalidArgument("Dataset: empty");
        if (!rows_.allFinite()) throw InvalidArgument("Dataset: non-finite value");
    }

    std::size_t n() const noexcept { return static_cast<std::size_t>(rows_.rows()); }
    std::size_t d() const noexcept { return static_cast<std::size_t>(rows_.cols()); }
    const Matrix& rows() const noexcept { return rows_; }

    friend bool operator==(const Dataset& a, const Dataset& b) {
        return a.rows_.rows() == b.rows_.rows() && a.rows_.cols() == b.rows_.cols() &&
               a.rows_ == b.rows_;
    }

private:
    Matrix rows_;
};

/// Lower-triangular L with m = L L^T. Throws NotPositiveDefinite on any pivot <= 0.
inline Matrix cholesky(const Matrix& m) {
    const Eigen::Index d = m.rows();
    if (m.cols() != d) throw DimensionMismatch("cholesky: matrix is not square");
    Matrix l = Matrix::Zero(d, d);
    for (Eigen::Index j = 0; j < d; ++j) {
        double pivot = m(j, j);
        for (Eigen::Index k = 0; k < j; ++k) pivot -= l(j, k) * l(j, k);
        if (!(pivot > 0.0) || !std::isfinite(pivot))
            throw NotPositiveDefinite("cholesky: pivot " + std::to_string(j) + " is " +
                                      std::to_string(pivot));
        const double ljj = std::sqrt(pivot);
        l(j, j) = ljj;
        for (Eigen::Index i = j + 1; i < d; ++i) {
            double s = m(i, j);
            for (Eigen::Index k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / ljj;
        }
    }
    return l;
}

inline Matrix cholesky(const SymMatrix& m) { return cholesky(m.matrix()); }

inline bool is_positive_definite(const SymMatrix& m) {
    try {
        (void)cholesky(m);
        return true;
    } catch (const NotPositiveDefinite&) {
        return false;
    }
}

/// 2 * sum(log L_ii) from a Cholesky factor.
inline double log_det_from_cholesky(const Matrix& l) {
    return 2.0 * l.diagonal().array().log().sum();
}

inline double log_det(const SymMatrix& m) { return log_det_from_cholesky(cholesky(m)); }

/// Solves (L L^T) x = b in place for every column of b.
inline void cholesky_solve_in_place(const Matrix& l, Matrix& b) {
    l.triangularView<Eigen::Lower>().solveInPlace(b);
    l.transpose().triangularView<Eigen::Upper>().solveInPlace(b);
}

inline SymMatrix inverse_from_cholesky(const Matrix& l) {
    Matrix inv = Matrix::Identity(l.rows(), l.cols());
    cholesky_solve_in_place(l, inv);
    return SymMatrix(0.5 * (inv + inv.transpose()));
}

inline SymMatrix inverse_spd(const SymMatrix& m) { return inverse_from_cholesky(cholesky(m)); }

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionMismatch("max_abs_diff: shapes differ");
    return (a - b).cwiseAbs().maxCoeff();
}

inline double max_abs_diff(const SymMatrix& a, const SymMatrix& b) {
    return max_abs_diff(a.matrix(), b.matrix());
}

}  // namespace precis
