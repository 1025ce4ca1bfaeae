#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "precis/bagus.hpp"

using namespace precis;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

BagusHyperparams tight(double v0, double v1, double tau) {
    BagusHyperparams hp;
    hp.v0 = v0;
    hp.v1 = v1;
    hp.eta = 0.5;
    hp.tau = tau;
    hp.emTol = 1e-10;
    hp.emMaxIter = 20000;
    hp.maxSweeps = 2000;
    return hp;
}

SymMatrix sym2(double a, double b, double c) {
    Matrix m(2, 2);
    m << a, b, b, c;
    return SymMatrix(m);
}

bool non_increasing(const std::vector<double>& trace, double slack = 1e-8) {
    for (std::size_t t = 1; t < trace.size(); ++t)
        if (trace[t] > trace[t - 1] + slack) return false;
    return true;
}

}  // namespace

TEST_CASE("slab_inclusion_prob examples", "[bagus][estep]") {
    BagusHyperparams sym;
    sym.v0 = sym.v1 = 0.3;
    sym.eta = 0.5;
    CHECK_THAT(slab_inclusion_prob(0.0, sym), WithinAbs(0.5, 1e-15));

    BagusHyperparams hp = BagusHyperparams::with_scales(0.1, 1.0);
    // density-ratio oracle: eta Lap(0; v1) / mixture
    CHECK_THAT(slab_inclusion_prob(0.0, hp), WithinAbs(oracle::slab_prob(0.0, 0.1, 1.0, 0.5), 1e-15));
    CHECK_THAT(slab_inclusion_prob(0.0, hp), WithinAbs(1.0 / 11.0, 1e-15));
    CHECK(slab_inclusion_prob(5.0, hp) > 1.0 - 1e-12);
    for (double w : {-2.0, -0.3, 0.07, 0.25, 1.3})
        CHECK_THAT(slab_inclusion_prob(w, hp), WithinAbs(oracle::slab_prob(w, 0.1, 1.0, 0.5), 1e-14));
}

TEST_CASE("slab_inclusion_prob is monotone in |w| and inside (0,1)", "[bagus][estep][property]") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.01, 2.0), e(0.05, 0.95), w(-3.0, 3.0);
    for (int rep = 0; rep < 200; ++rep) {
        BagusHyperparams hp;
        hp.v0 = u(rng) * 0.2;
        hp.v1 = hp.v0 + u(rng);
        hp.eta = e(rng);
        const double a = std::abs(w(rng)), b = std::abs(w(rng));
        const double pa = slab_inclusion_prob(a, hp), pb = slab_inclusion_prob(b, hp);
        if (a <= b) CHECK(pa <= pb);
        CHECK(slab_inclusion_prob(-a, hp) == pa);
        const double p0 = slab_inclusion_prob(0.0, hp);
        CHECK(p0 > 0.0);
        CHECK(p0 < 1.0);
    }
}

TEST_CASE("estep examples", "[bagus][estep]") {
    const BagusHyperparams hp = BagusHyperparams::with_scales(0.1, 1.0);
    const EStepResult e = estep(SymMatrix::zeros(3), hp);
    for (int i = 0; i < 3; ++i) {
        CHECK(e.inclusionProb(i, i) == 1.0);
        CHECK(e.weights(i, i) == hp.tau);
        for (int j = 0; j < 3; ++j) {
            if (i == j) continue;
            CHECK_THAT(e.inclusionProb(i, j), WithinAbs(1.0 / 11.0, 1e-15));
            CHECK_THAT(e.weights(i, j), WithinAbs(101.0 / 11.0, 1e-12));
        }
    }
    const EStepResult big = estep(sym2(1.0, 50.0, 1.0), hp);
    CHECK_THAT(big.weights(0, 1), WithinAbs(1.0 / hp.v1, 1e-12));
    CHECK_THAT(penalty_weight(0.0, hp), WithinAbs(1.0 / hp.v0, 1e-12));

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> w(-1.0, 1.0);
    for (int rep = 0; rep < 100; ++rep) {
        const double x = w(rng);
        const double d = penalty_weight(slab_inclusion_prob(x, hp), hp);
        CHECK(d >= 1.0 / hp.v1 - 1e-12);
        CHECK(d <= 1.0 / hp.v0 + 1e-12);
    }
}

TEST_CASE("objective examples", "[bagus][objective]") {
    BagusHyperparams hp = BagusHyperparams::with_scales(0.1, 1.0);
    const FitInput in(SymMatrix::identity(2), 10);
    // one off-diagonal pair at w = 0
    const double pen0 = -std::log(hp.eta / (2 * hp.v1) + (1 - hp.eta) / (2 * hp.v0));
    CHECK_THAT(objective(SymMatrix::identity(2), in, hp), WithinAbs(5.0 * 2.0 + pen0 + 2 * hp.tau, 1e-12));

    const FitInput in2(SymMatrix::identity(2), 20);
    const double lik1 = objective(SymMatrix::identity(2), in, hp) - pen0 - 2 * hp.tau;
    const double lik2 = objective(SymMatrix::identity(2), in2, hp) - pen0 - 2 * hp.tau;
    CHECK_THAT(lik2, WithinAbs(2.0 * lik1, 1e-12));

    CHECK_THROWS_AS(objective(sym2(1.0, 1.0, 1.0), in, hp), NotPositiveDefinite);

    std::mt19937_64 rng(4);
    const oracle::Rows s = oracle::random_spd(2, rng);
    const oracle::Problem2 p{s[0][0], s[0][1], s[1][1], 37.0, hp.tau, 10.0, true, hp.v0, hp.v1, hp.eta};
    const SymMatrix om = sym2(1.3, -0.4, 0.9);
    CHECK_THAT(objective(om, FitInput(sym2(s[0][0], s[0][1], s[1][1]), 37), hp),
               WithinRel(oracle::objective2(p, 1.3, -0.4, 0.9), 1e-13));
}

TEST_CASE("mstep total shrinkage solves the diagonal-only problem", "[bagus][mstep]") {
    std::mt19937_64 rng(6);
    Matrix s(3, 3);
    const oracle::Rows r = oracle::random_spd(3, rng);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) s(i, j) = r[i][j];
    const FitInput in(SymMatrix(s), 50);
    BagusHyperparams hp = BagusHyperparams::with_scales(0.1, 1.0);
    Matrix w = Matrix::Constant(3, 3, 1e12);
    w.diagonal().setConstant(hp.tau);
    const SymMatrix out = mstep(in, SymMatrix(w), SymMatrix::identity(3), hp);
    for (int i = 0; i < 3; ++i) {
        CHECK_THAT(out(i, i), WithinRel(1.0 / (s(i, i) + 2.0 * hp.tau / 50.0), 1e-12));
        for (int j = 0; j < 3; ++j)
            if (i != j) CHECK(out(i, j) == 0.0);
    }
}

TEST_CASE("mstep matches grid search on 2x2 surrogate problems", "[bagus][mstep][oracle]") {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> nd(20, 200);
    int cases = 0;
    for (double weight : {0.5, 5.0, 40.0}) {
        for (int rep = 0; rep < 4; ++rep) {
            const oracle::Rows s = oracle::random_spd(2, rng, 0.3);
            const double n = nd(rng);
            const double tau = 0.1;
            oracle::Problem2 p{s[0][0], s[0][1], s[1][1], n, tau};
            p.mixturePenalty = false;
            p.weight12 = weight;
            const auto ref = oracle::grid_search2(p);

            BagusHyperparams hp = tight(0.1, 1.0, tau);
            const SymMatrix w = sym2(tau, weight, tau);
            const FitInput in(sym2(s[0][0], s[0][1], s[1][1]), std::size_t(n));
            const SymMatrix out = mstep(in, w, SymMatrix::identity(2), hp);
            CHECK_THAT(out(0, 0), WithinAbs(ref[0], 1e-3));
            CHECK_THAT(out(0, 1), WithinAbs(ref[1], 1e-3));
            CHECK_THAT(out(1, 1), WithinAbs(ref[2], 1e-3));
            ++cases;
        }
    }
    CHECK(cases == 12);
}

TEST_CASE("mstep decreases the surrogate and is a fixed point at the optimum", "[bagus][mstep][property]") {
    std::mt19937_64 rng(9);
    for (int rep = 0; rep < 10; ++rep) {
        const std::size_t d = 3 + rep % 5;
        const oracle::Rows r = oracle::random_spd(d, rng);
        Matrix s(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) s(Eigen::Index(i), Eigen::Index(j)) = r[i][j] / double(d);
        const FitInput in(SymMatrix(s), 40);
        BagusHyperparams hp = BagusHyperparams::with_scales(0.05, 1.0);
        hp.emTol = 1e-9;
        hp.maxSweeps = 5000;
        const SymMatrix init = SymMatrix::identity(d);
        const EStepResult e = estep(init, hp);
        const SymMatrix out = mstep(in, e.weights, init, hp);
        Matrix w = e.weights.matrix();
        w.diagonal().setConstant(hp.tau);
        const SymMatrix wt(w);
        CHECK(surrogate_objective(out, in, wt) <= surrogate_objective(init, in, wt) + 1e-8);
        CHECK(is_positive_definite(out));
        const SymMatrix again = mstep(in, e.weights, out, hp);
        CHECK(max_abs_diff(again, out) < 1e-6);
    }
}

TEST_CASE("fit_bagus matches grid-search MAP on a 2x2 battery", "[bagus][fit][oracle]") {
    std::mt19937_64 rng(12);
    std::uniform_int_distribution<int> nd(30, 300);
    const double v0s[] = {0.05, 0.1, 0.2};
    for (int rep = 0; rep < 20; ++rep) {
        const oracle::Rows s = oracle::random_spd(2, rng, 0.3);
        const double n = nd(rng);
        const double v0 = v0s[rep % 3];
        const BagusHyperparams hp = tight(v0, 1.0, v0);
        const oracle::Problem2 p{s[0][0], s[0][1], s[1][1], n, hp.tau, hp.specB, true, hp.v0, hp.v1, hp.eta};
        const auto ref = oracle::grid_search2(p);
        const PrecisionEstimate est = fit_bagus(FitInput(sym2(s[0][0], s[0][1], s[1][1]), std::size_t(n)), hp);
        INFO("case " << rep);
        CHECK(est.converged);
        CHECK_THAT(est.omega(0, 0), WithinAbs(ref[0], 2e-3));
        CHECK_THAT(est.omega(0, 1), WithinAbs(ref[1], 2e-3));
        CHECK_THAT(est.omega(1, 1), WithinAbs(ref[2], 2e-3));
        CHECK(non_increasing(est.objectiveTrace));
    }
}

TEST_CASE("fit_bagus on independent data", "[bagus][fit]") {
    std::mt19937_64 rng(13);
    std::normal_distribution<double> z;
    const Eigen::Index n = 2000, d = 5;
    Matrix x(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) x(i, j) = z(rng);
    const FitInput in = FitInput::from_data(Dataset(x));
    const BagusHyperparams hp = BagusHyperparams::with_scales(0.02, 1.0);
    const PrecisionEstimate est = fit_bagus(in, hp);
    CHECK(est.converged);
    CHECK(is_positive_definite(est.omega));
    for (Eigen::Index i = 0; i < d; ++i) {
        CHECK(est.inclusionProb(i, i) == 1.0);
        for (Eigen::Index j = i + 1; j < d; ++j) {
            CHECK(est.inclusionProb(i, j) < 0.5);
            CHECK(std::abs(est.omega(i, j)) < 0.05);
        }
    }
    CHECK(non_increasing(est.objectiveTrace));
}

TEST_CASE("a harsher spike shrinks a true dense 2x2 edge", "[bagus][fit]") {
    std::mt19937_64 rng(14);
    std::normal_distribution<double> z;
    // Omega = [[1, .3], [.3, 1]] -> Sigma via the 2x2 inverse
    const double det = 1.0 - 0.09;
    const double s11 = 1.0 / det, s12 = -0.3 / det;
    const double l11 = std::sqrt(s11), l21 = s12 / l11, l22 = std::sqrt(s11 - l21 * l21);
    Matrix x(100, 2);
    for (int i = 0; i < 100; ++i) {
        const double a = z(rng), b = z(rng);
        x(i, 0) = l11 * a;
        x(i, 1) = l21 * a + l22 * b;
    }
    const FitInput in = FitInput::from_data(Dataset(x));
    // EM is a local method: from a start where the edge already sits in the slab a
    // narrow spike never captures it, so both fits start from the empty graph.
    const SymMatrix start = SymMatrix::identity(2);
    const PrecisionEstimate mild = fit_bagus(in, BagusHyperparams::with_scales(0.5, 5.0), start);
    const PrecisionEstimate strict = fit_bagus(in, BagusHyperparams::with_scales(1e-4, 5.0), start);
    CHECK(std::abs(mild.omega(0, 1)) > 0.1);
    CHECK(std::abs(strict.omega(0, 1)) < std::abs(mild.omega(0, 1)));
    CHECK(std::abs(strict.omega(0, 1)) < 1e-6);
}

TEST_CASE("fit_bagus keeps every entry inside the bound", "[bagus][fit][property]") {
    std::mt19937_64 rng(15);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 6; ++rep) {
        const Eigen::Index n = 12, d = 8;
        Matrix x(n, d);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < d; ++j) x(i, j) = 0.2 * z(rng) + (j > 0 ? 0.9 * x(i, j - 1) : 0.0);
        BagusHyperparams hp = BagusHyperparams::with_scales(0.05, 2.0);
        hp.specB = 3.0;
        const PrecisionEstimate est = fit_bagus(FitInput::from_data(Dataset(x)), hp);
        CHECK(est.omega.matrix().cwiseAbs().maxCoeff() <= hp.specB);
        CHECK(est.omega.matrix() == est.omega.matrix().transpose());
        CHECK(is_positive_definite(est.omega));
        CHECK(non_increasing(est.objectiveTrace));
    }
}

TEST_CASE("bic examples", "[bagus][bic]") {
    CHECK_THAT(bic(SymMatrix::identity(3), SymMatrix::identity(3), 100, 0), WithinAbs(300.0, 1e-12));
    const double base = bic(SymMatrix::identity(3), SymMatrix::identity(3), 100, 2);
    CHECK_THAT(bic(SymMatrix::identity(3), SymMatrix::identity(3), 100, 3) - base, WithinAbs(std::log(100.0), 1e-12));

    std::mt19937_64 rng(16);
    const oracle::Rows s = oracle::random_spd(3, rng), om = oracle::random_spd(3, rng);
    Matrix sm(3, 3), omm(3, 3);
    double tr = 0.0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            sm(i, j) = s[i][j];
            omm(i, j) = om[i][j];
            tr += s[i][j] * om[j][i];
        }
    // 3x3 determinant by cofactor expansion
    const double det = om[0][0] * (om[1][1] * om[2][2] - om[1][2] * om[2][1]) -
                       om[0][1] * (om[1][0] * om[2][2] - om[1][2] * om[2][0]) +
                       om[0][2] * (om[1][0] * om[2][1] - om[1][1] * om[2][0]);
    const double expected = 57.0 * (tr - std::log(det)) + std::log(57.0) * 2.0;
    CHECK_THAT(bic(SymMatrix(sm), SymMatrix(omm), 57, 2), WithinRel(expected, 1e-12));

    // q from the 0.5 cut-off on inclusion probabilities
    PrecisionEstimate est;
    est.omega = SymMatrix(omm);
    Matrix p = Matrix::Identity(3, 3);
    p(0, 1) = p(1, 0) = 0.5;
    p(0, 2) = p(2, 0) = 0.49;
    p(1, 2) = p(2, 1) = 0.9;
    est.inclusionProb = SymMatrix(p);
    CHECK_THAT(bic(SymMatrix(sm), est, 57), WithinRel(expected, 1e-12));
}

TEST_CASE("tune picks the BIC minimizer", "[bagus][tune]") {
    std::mt19937_64 rng(18);
    std::normal_distribution<double> z;
    const Eigen::Index n = 60, d = 6;
    Matrix x(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < d; ++j) x(i, j) = z(rng) + (j % 2 == 1 ? 0.8 * x(i, j - 1) : 0.0);
    const FitInput in = FitInput::from_data(Dataset(x));

    SECTION("single cell") {
        const auto res = tune(in, {{0.05, 1.0}});
        CHECK(res.bestIndex == 0);
        CHECK(res.best.v0 == 0.05);
        CHECK(res.best.tau == 0.05);
        CHECK(res.best.eta == 0.5);
    }
    SECTION("duplicate cells are deterministic") {
        const auto res = tune(in, {{0.05, 1.0}, {0.05, 1.0}});
        CHECK(*res.cells[0].bic == *res.cells[1].bic);
    }
    SECTION("argmin matches an independent rerun of each cell") {
        const std::vector<GridCell> grid = make_grid({0.02, 0.08}, {0.5, 2.0});
        REQUIRE(grid.size() == 4);
        const auto res = tune(in, grid);
        std::size_t argmin = 0;
        double bestBic = 0.0;
        for (std::size_t i = 0; i < grid.size(); ++i) {
            const PrecisionEstimate est = fit_bagus(in, BagusHyperparams::with_scales(grid[i].v0, grid[i].v1));
            const double b = bic(in.s, est, in.n);
            CHECK(b == *res.cells[i].bic);
            if (i == 0 || b < bestBic) {
                bestBic = b;
                argmin = i;
            }
        }
        CHECK(res.bestIndex == argmin);
    }
    SECTION("invalid and failing grids") {
        CHECK_THROWS_AS(tune(in, {}), InvalidArgument);
        CHECK_THROWS_AS(tune(in, {{1.0, 0.5}}), InvalidArgument);
        TuneSettings bad;
        bad.eta = 1.5;
        CHECK_THROWS_AS(tune(in, {{0.05, 1.0}}, bad), AllCellsFailed);
    }
    SECTION("ties go to the larger v0") {
        TuneSettings settings;
        const auto res = tune_with(make_grid({0.01, 0.02}, {1.0}), settings, [&](const BagusHyperparams&) {
            PrecisionEstimate est;
            est.omega = SymMatrix::identity(2);
            est.inclusionProb = SymMatrix::identity(2);
            CellFit cf{est, SymMatrix::identity(2), 10};
            return std::pair<int, CellFit>(0, cf);
        });
        CHECK(res.best.v0 == 0.02);
    }
}
