#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <string>

#include "oracles.hpp"
#include "precis/iro.hpp"
#include "precis/metrics.hpp"
#include "precis/simgen.hpp"

using namespace precis;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

Matrix to_matrix(const oracle::Rows& r) {
    Matrix m(r.size(), r.front().size());
    for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t j = 0; j < r[i].size(); ++j) m(Eigen::Index(i), Eigen::Index(j)) = r[i][j];
    return m;
}

Dataset repeat_row(const Vector& w, std::size_t count) {
    Matrix m(Eigen::Index(count), w.size());
    for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i) = w.transpose();
    return Dataset(std::move(m));
}

/// Empirical mean/covariance of the draws against (mean, cov) within `z` standard errors.
void check_moments(const Dataset& draws, const std::vector<double>& mean, const oracle::Rows& cov, double z) {
    const Matrix& x = draws.rows();
    const double n = double(x.rows());
    const std::size_t d = mean.size();
    const Eigen::RowVectorXd m = x.colwise().mean();
    for (std::size_t j = 0; j < d; ++j) {
        const double se = std::sqrt(cov[j][j] / n);
        CHECK(std::abs(m(Eigen::Index(j)) - mean[j]) < z * se);
    }
    const Matrix c = x.rowwise() - m;
    const Matrix emp = c.transpose() * c / n;
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) {
            const double se = std::sqrt((cov[a][a] * cov[b][b] + cov[a][b] * cov[a][b]) / n);
            CHECK(std::abs(emp(Eigen::Index(a), Eigen::Index(b)) - cov[a][b]) < z * se);
        }
}

BagusHyperparams hub_hp(std::size_t n, std::size_t d) {
    const double r = 1.0 / std::sqrt(double(n) * std::log(double(d)));
    return BagusHyperparams::with_scales(r, 5.0 * r);
}

}  // namespace

TEST_CASE("impute_latent with equal precisions splits evenly", "[iro][impute]") {
    Vector w(3);
    w << 1.0, -2.0, 0.5;
    const Dataset draws = impute_latent(repeat_row(w, 100000), SymMatrix::identity(3),
                                        MeasurementErrorModel(Vector::Ones(3)), 5, 1);
    oracle::Rows cov(3, std::vector<double>(3, 0.0));
    for (int j = 0; j < 3; ++j) cov[j][j] = 0.5;
    check_moments(draws, {0.5, -1.0, 0.25}, cov, 4.0);
}

TEST_CASE("impute_latent reproduces w when the error vanishes", "[iro][impute]") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> z;
    Matrix w(20, 4);
    for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = z(rng);
    const Dataset x = impute_latent(Dataset(w), SymMatrix(to_matrix(oracle::random_spd(4, rng))),
                                    MeasurementErrorModel(Vector::Constant(4, 1e-12)), 9, 3);
    CHECK(max_abs_diff(x.rows(), w) < 1e-4);
}

TEST_CASE("impute_latent draws match the conditional moments", "[iro][impute][montecarlo]") {
    std::mt19937_64 rng(101);
    std::uniform_real_distribution<double> var(0.1, 1.5);
    std::normal_distribution<double> z;
    for (int pair = 0; pair < 5; ++pair) {
        const oracle::Rows omega = oracle::random_spd(3, rng, 0.3);
        std::vector<double> su(3);
        Vector suv(3), w(3);
        for (int j = 0; j < 3; ++j) {
            su[std::size_t(j)] = suv(j) = var(rng);
            w(j) = 2.0 * z(rng);
        }
        // Lambda = Omega + diag(1/su); mean = Lambda^{-1} diag(1/su) w
        oracle::Rows lambda = omega;
        for (std::size_t j = 0; j < 3; ++j) lambda[j][j] += 1.0 / su[j];
        const oracle::Rows cov = oracle::invert(lambda);
        std::vector<double> mean(3, 0.0);
        for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b) mean[a] += cov[a][b] * w(Eigen::Index(b)) / su[b];

        const Dataset draws = impute_latent(repeat_row(w, 200000), SymMatrix(to_matrix(omega)),
                                            MeasurementErrorModel(suv), 1000 + std::uint64_t(pair), 1);
        check_moments(draws, mean, cov, 4.0);
    }
}

TEST_CASE("impute_latent is deterministic per (seed, iteration)", "[iro][impute]") {
    std::mt19937_64 rng(7);
    const Dataset w(to_matrix(oracle::random_spd(6, rng)));
    const SymMatrix om(to_matrix(oracle::random_spd(6, rng)));
    const MeasurementErrorModel me(Vector::Constant(6, 0.3));
    const Dataset a = impute_latent(w, om, me, 42, 2);
    const Dataset b = impute_latent(w, om, me, 42, 2);
    CHECK(a.rows() == b.rows());
    CHECK(a.rows() != impute_latent(w, om, me, 42, 3).rows());
    CHECK(a.rows() != impute_latent(w, om, me, 43, 2).rows());
}

TEST_CASE("impute_latent rejects invalid inputs", "[iro][impute]") {
    const Dataset w(Matrix::Ones(3, 2));
    Matrix bad(2, 2);
    bad << 1, 5, 5, 1;
    CHECK_THROWS_AS(impute_latent(w, SymMatrix(bad), MeasurementErrorModel(Vector::Ones(2)), 1, 1),
                    NotPositiveDefinite);
    CHECK_THROWS_AS(impute_latent(w, SymMatrix::identity(3), MeasurementErrorModel(Vector::Ones(2)), 1, 1),
                    DimensionMismatch);
    CHECK_THROWS_AS(impute_latent(w, SymMatrix::identity(2), MeasurementErrorModel(Vector::Zero(2)), 1, 1),
                    InvalidArgument);
}

TEST_CASE("average_estimates examples", "[iro][average]") {
    auto est = [](const Matrix& om) {
        PrecisionEstimate e;
        e.omega = SymMatrix(om);
        e.inclusionProb = SymMatrix::identity(std::size_t(om.rows()));
        return e;
    };
    SECTION("identical iterates") {
        Matrix om(2, 2);
        om << 2, 0.3, 0.3, 1;
        const std::vector<PrecisionEstimate> t{est(om), est(om), est(om)};
        CHECK(max_abs_diff(average_estimates(t, 1).omega.matrix(), om) < 1e-15);
    }
    SECTION("I and 3I") {
        const std::vector<PrecisionEstimate> t{est(Matrix::Identity(3, 3)), est(3 * Matrix::Identity(3, 3))};
        CHECK(average_estimates(t, 0).omega.matrix() == 2 * Matrix::Identity(3, 3));
        CHECK(average_estimates(t, 1).omega.matrix() == 3 * Matrix::Identity(3, 3));
    }
    SECTION("random PD pairs stay PD") {
        std::mt19937_64 rng(13);
        for (int rep = 0; rep < 20; ++rep) {
            const std::vector<PrecisionEstimate> t{est(to_matrix(oracle::random_spd(5, rng, 0.01))),
                                                   est(to_matrix(oracle::random_spd(5, rng, 0.01)))};
            CHECK(is_positive_definite(average_estimates(t, 0).omega));
        }
    }
    SECTION("everything burned") {
        const std::vector<PrecisionEstimate> t{est(Matrix::Identity(2, 2))};
        CHECK_THROWS_AS(average_estimates(t, 1), EmptyAverage);
    }
}

TEST_CASE("select_edges", "[iro][select]") {
    CHECK(select_edges(SymMatrix::identity(5), 0.5).edge_count() == 0);
    CHECK(select_edges(SymMatrix(Matrix::Ones(4, 4)), 0.5).edge_count() == 6);

    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix p = Matrix::Identity(7, 7);
    for (int i = 0; i < 7; ++i)
        for (int j = i + 1; j < 7; ++j) p(i, j) = p(j, i) = (i + j) % 5 == 0 ? 0.5 : u(rng);
    const Adjacency a = select_edges(SymMatrix(p), 0.5);
    for (int i = 0; i < 7; ++i) {
        CHECK_FALSE(a(std::size_t(i), std::size_t(i)));
        for (int j = i + 1; j < 7; ++j) CHECK(a(std::size_t(i), std::size_t(j)) == (p(i, j) >= 0.5));
    }
}

TEST_CASE("IroConfig validation and burn-in arithmetic", "[iro]") {
    IroConfig cfg;
    cfg.iterations = 10;
    cfg.burnInFraction = 0.25;
    CHECK(cfg.burn_in_count() == 2);
    cfg.burnInFraction = 1.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
    cfg.iterations = 0;
    cfg.burnInFraction = 0.0;
    CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

TEST_CASE("run_iro on a small hub problem", "[iro][run]") {
    SimCell cell;
    cell.spec.d = 10;
    cell.spec.groupSize = 5;
    cell.n = 60;
    cell.seed = 21;
    const ReplicateData data = make_replicate(cell, 0);

    IroConfig cfg;
    cfg.iterations = 10;
    cfg.burnInFraction = 0.25;
    cfg.seed = 99;
    cfg.hp = hub_hp(cell.n, cell.spec.d);

    const IroTrace trace = run_iro(data.w, data.me, cfg);

    SECTION("averaging uses exactly the retained iterates") {
        REQUIRE(trace.perIteration.size() == 10);
        CHECK(trace.burnInCount == 2);
        Matrix mean = Matrix::Zero(10, 10);
        for (std::size_t t = 2; t < 10; ++t) mean += trace.perIteration[t].omega.matrix();
        mean /= 8.0;
        CHECK(max_abs_diff(trace.averaged.omega.matrix(), mean) < 1e-12);
        CHECK(is_positive_definite(trace.averaged.omega));
        CHECK(trace.averaged.omega.matrix().cwiseAbs().maxCoeff() <= cfg.hp.specB);
    }
    SECTION("same configuration gives a bit-identical trace") {
        const IroTrace again = run_iro(data.w, data.me, cfg);
        REQUIRE(again.perIteration.size() == trace.perIteration.size());
        for (std::size_t t = 0; t < trace.perIteration.size(); ++t) {
            CHECK(again.perIteration[t].omega == trace.perIteration[t].omega);
            CHECK(again.perIteration[t].objectiveTrace == trace.perIteration[t].objectiveTrace);
        }
        CHECK(again.averaged.omega == trace.averaged.omega);
        CHECK(again.averaged.inclusionProb == trace.averaged.inclusionProb);
    }
    SECTION("the first iterate is warm-started from the naive fit") {
        const PrecisionEstimate naive = fit_bagus(FitInput::from_data(data.w), cfg.hp);
        CHECK(naive.omega == trace.initial.omega);
    }
    SECTION("a single iterate without burn-in is its own average") {
        IroConfig one = cfg;
        one.iterations = 1;
        one.burnInFraction = 0.0;
        const IroTrace t1 = run_iro(data.w, data.me, one);
        CHECK(t1.averaged.omega == t1.perIteration.front().omega);
        CHECK(t1.averaged.inclusionProb == t1.perIteration.front().inclusionProb);
    }
}

TEST_CASE("run_iro input validation", "[iro][run]") {
    const Dataset w(Matrix::Random(10, 3));
    IroConfig cfg;
    cfg.iterations = 2;
    CHECK_THROWS_AS(run_iro(w, MeasurementErrorModel(Vector::Constant(3, 1e-11)), cfg), InvalidArgument);
    CHECK_THROWS_AS(run_iro(w, MeasurementErrorModel(Vector::Ones(2)), cfg), DimensionMismatch);

    Matrix bad(3, 3);
    bad << 1, 5, 0, 5, 1, 0, 0, 0, 1;
    PrecisionEstimate init;
    init.omega = SymMatrix(bad);
    init.inclusionProb = SymMatrix::identity(3);
    CHECK_THROWS_WITH(run_iro(w, MeasurementErrorModel(Vector::Constant(3, 4.0)), cfg, init),
                      ContainsSubstring("iteration 1"));
}

TEST_CASE("run_iro approaches the plain fit as the error vanishes", "[iro][run][limit]") {
    SimCell cell;
    cell.spec.d = 10;
    cell.spec.groupSize = 5;
    cell.n = 100;
    cell.gamma = 0.0;
    cell.seed = 5;
    const ReplicateData data = make_replicate(cell, 0);

    IroConfig cfg;
    cfg.iterations = 10;
    cfg.seed = 7;
    cfg.hp = hub_hp(cell.n, cell.spec.d);
    const PrecisionEstimate plain = fit_bagus(FitInput::from_data(data.w), cfg.hp);
    const IroTrace trace = run_iro(data.w, MeasurementErrorModel(Vector::Constant(10, 1e-10)), cfg);
    CHECK(max_abs_diff(trace.averaged.omega, plain.omega) < 1e-2);
}

TEST_CASE("run_iro beats the naive fit on contaminated hub data", "[iro][run][benchmark]") {
    SimCell cell;
    cell.spec.d = 20;
    cell.n = 100;
    cell.gamma = 0.25;
    cell.seed = 2024;
    int wins = 0;
    for (std::uint64_t r = 0; r < 10; ++r) {
        const ReplicateData data = make_replicate(cell, r);
        IroConfig cfg;
        cfg.iterations = 25;
        cfg.seed = data.imputeSeed;
        cfg.hp = hub_hp(cell.n, cell.spec.d);
        const IroTrace trace = run_iro(data.w, data.me, cfg);
        const double corrected = frobenius_error(trace.averaged.omega, data.truth.omega);
        const double naive = frobenius_error(trace.initial.omega, data.truth.omega);
        wins += corrected <= naive;
    }
    INFO("corrected wins " << wins << " of 10");
    CHECK(wins >= 8);
}
