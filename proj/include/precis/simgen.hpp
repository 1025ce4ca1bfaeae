#pragma once

// Simulation protocol: ground-truth hub/random graphs, clean Gaussian samples,
// additive measurement error, and the replicate loop comparing the three arms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "precis/bagus.hpp"
#include "precis/graph.hpp"
#include "precis/iro.hpp"
#include "precis/linalg.hpp"
#include "precis/metrics.hpp"
#include "precis/model.hpp"
#include "precis/parallel.hpp"
#include "precis/rng.hpp"

namespace precis {

enum class Structure { Hub, Random };

/// Star: the first node of each group links to every other member.
/// Block: every pair inside a group is linked.
enum class HubStyle { Star, Block };

struct GraphSpec {
    Structure structure = Structure::Hub;
    std::size_t d = 0;
    std::optional<double> edgeProbability; ///< random only; default 3/d
    std::size_t groupSize = 20;            ///< hub only
    HubStyle hubStyle = HubStyle::Star;

    double edge_probability() const { return edgeProbability.value_or(3.0 / static_cast<double>(d)); }

    void validate() const {
        if (d < 1) throw InvalidArgument("GraphSpec: d must be >= 1");
        if (structure == Structure::Hub) {
            if (groupSize < 1) throw InvalidArgument("GraphSpec: group size must be >= 1");
            if (d % groupSize != 0)
                throw InvalidArgument("GraphSpec: hub structure needs d divisible by the group size (d=" +
                                      std::to_string(d) + ", group size=" + std::to_string(groupSize) + ")");
        } else if (edgeProbability) {
            // 0 is accepted as an explicit "no edges" override.
            if (!(*edgeProbability >= 0.0 && *edgeProbability <= 1.0))
                throw InvalidArgument("GraphSpec: edge probability must lie in (0, 1]");
        }
    }
};

struct GroundTruth {
    SymMatrix omega;
    Adjacency adjacency;
};

/// Unit-magnitude edge pattern with a common diagonal |lambda_min(pattern)| + 0.5.
inline GroundTruth gen_precision(const GraphSpec& spec, Engine& rng) {
    spec.validate();
    const std::size_t d = spec.d;
    Adjacency adj(d);
    if (spec.structure == Structure::Hub) {
        const std::size_t g = spec.groupSize;
        for (std::size_t start = 0; start < d; start += g) {
            for (std::size_t a = start; a < start + g; ++a)
                for (std::size_t b = a + 1; b < start + g; ++b)
                    if (spec.hubStyle == HubStyle::Block || a == start) adj.set(a, b);
        }
    } else {
        std::bernoulli_distribution coin(spec.edge_probability());
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = i + 1; j < d; ++j)
                if (coin(rng)) adj.set(i, j);
    }

    Matrix pattern = Matrix::Zero(Eigen::Index(d), Eigen::Index(d));
    for (const auto& [i, j] : adj.edges()) pattern(Eigen::Index(i), Eigen::Index(j)) = pattern(Eigen::Index(j), Eigen::Index(i)) = 1.0;
    const double lambdaMin = Eigen::SelfAdjointEigenSolver<Matrix>(pattern, Eigen::EigenvaluesOnly).eigenvalues()(0);
    pattern.diagonal().setConstant(std::abs(lambdaMin) + 0.5);
    return {SymMatrix(std::move(pattern)), std::move(adj)};
}

/// n rows of N(0, sigma) as L z with sigma = L L^T.
inline Dataset sample_mvn(std::size_t n, const SymMatrix& sigma, Engine& rng) {
    if (n < 1) throw InvalidArgument("sample_mvn: n must be >= 1");
    const Matrix l = cholesky(sigma);
    const auto d = l.rows();
    std::normal_distribution<double> z(0.0, 1.0);
    Matrix zs(d, Eigen::Index(n));
    for (Eigen::Index i = 0; i < Eigen::Index(n); ++i)
        for (Eigen::Index j = 0; j < d; ++j) zs(j, i) = z(rng);
    Matrix x = (l.triangularView<Eigen::Lower>() * zs).transpose();
    return Dataset(std::move(x));
}

struct Contamination {
    Dataset w;
    MeasurementErrorModel me;
    Matrix noise; ///< the u draws, so that w == x + noise exactly
};

/// w = x + u with u_ij ~ N(0, gamma * sigmaXDiag_j).
inline Contamination contaminate(const Dataset& x, const Vector& sigmaXDiag, double gamma, Engine& rng) {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw InvalidArgument("contaminate: gamma must be > 0");
    if (static_cast<std::size_t>(sigmaXDiag.size()) != x.d()) throw DimensionMismatch("contaminate: variance length");
    if (!(sigmaXDiag.minCoeff() > 0.0)) throw InvalidArgument("contaminate: clean variances must be > 0");
    const Vector variances = gamma * sigmaXDiag;
    const Vector sds = variances.cwiseSqrt();
    std::normal_distribution<double> z(0.0, 1.0);
    Matrix u(x.rows().rows(), x.rows().cols());
    for (Eigen::Index i = 0; i < u.rows(); ++i)
        for (Eigen::Index j = 0; j < u.cols(); ++j) u(i, j) = sds(j) * z(rng);
    Matrix w = x.rows() + u;
    return {Dataset(std::move(w)), MeasurementErrorModel(variances), std::move(u)};
}

struct SimCell {
    GraphSpec spec;
    std::size_t n = 100;
    double gamma = 0.25;
    std::uint64_t seed = 0;

    void validate() const {
        spec.validate();
        if (n < 2) throw InvalidArgument("SimCell: n must be >= 2");
        if (!(gamma >= 0.0) || !std::isfinite(gamma)) throw InvalidArgument("SimCell: gamma must be >= 0");
    }
};

/// Everything drawn for one replicate. Replicate r uses substreams
/// (seed, r, Graph), (seed, r, Clean) and (seed, r, Noise), so the clean data
/// does not depend on gamma.
struct ReplicateData {
    GroundTruth truth;
    SymMatrix sigma;
    Dataset x;
    Dataset w;
    MeasurementErrorModel me; ///< all zeros when gamma == 0
    std::uint64_t imputeSeed = 0;
};

inline ReplicateData make_replicate(const SimCell& cell, std::uint64_t r) {
    cell.validate();
    ReplicateData out;
    Engine graphRng = substream(cell.seed, {r, std::uint64_t(Stream::Graph)});
    out.truth = gen_precision(cell.spec, graphRng);
    out.sigma = inverse_spd(out.truth.omega);
    Engine cleanRng = substream(cell.seed, {r, std::uint64_t(Stream::Clean)});
    out.x = sample_mvn(cell.n, out.sigma, cleanRng);
    if (cell.gamma > 0.0) {
        Engine noiseRng = substream(cell.seed, {r, std::uint64_t(Stream::Noise)});
        Contamination c = contaminate(out.x, out.sigma.diag(), cell.gamma, noiseRng);
        out.w = std::move(c.w);
        out.me = std::move(c.me);
    } else {
        out.w = out.x;
        out.me = MeasurementErrorModel(Vector::Zero(Eigen::Index(cell.spec.d)));
    }
    out.imputeSeed = substream(cell.seed, {r, std::uint64_t(Stream::Impute)})();
    return out;
}

enum class Method { True, Naive, Corrected };

inline const char* method_name(Method m) {
    switch (m) {
        case Method::True: return "true";
        case Method::Naive: return "naive";
        case Method::Corrected: return "corrected";
    }
    return "?";
}

struct ExperimentSettings {
    std::size_t replicates = 1;
    std::optional<std::vector<GridCell>> grid; ///< unset: default_grid(n, d)
    TuneSettings tune;
    std::size_t iroIterations = 50;
    double burnInFraction = 0.2;
    double threshold = 0.5;
    std::vector<Method> methods{Method::True, Method::Naive, Method::Corrected};
    std::size_t threads = 1; ///< replicates run concurrently

    std::vector<GridCell> grid_for(const SimCell& cell) const {
        return grid ? *grid : default_grid(cell.n, cell.spec.d);
    }
};

struct MethodOutcome {
    Method method = Method::True;
    bool ok = false;
    std::string error;
    ConfusionCounts counts;
    ClassificationMetrics cls;
    double frob = 0.0;
    std::optional<double> auc; ///< empty when the truth graph has one class
    GridCell chosen;
    std::size_t nonConverged = 0; ///< EM runs of the chosen fit that hit the cap
};

struct ReplicateOutcome {
    std::size_t replicate = 0;
    std::vector<MethodOutcome> methods;
};

struct MethodSummary {
    Method method = Method::True;
    std::size_t succeeded = 0;
    std::size_t failed = 0;
    double sen = 0, spe = 0, pre = 0, acc = 0, mcc = 0, frob = 0;
    std::optional<double> auc;
    std::size_t aucCount = 0;
    std::size_t nonConverged = 0;
};

struct CellResult {
    SimCell cell;
    std::vector<ReplicateOutcome> replicates;
    std::vector<MethodSummary> summary;
};

inline MethodOutcome score_fit(Method m, const PrecisionEstimate& est, const GroundTruth& truth, double threshold) {
    MethodOutcome o;
    o.method = m;
    o.ok = true;
    o.counts = confusion(select_edges(est.inclusionProb, threshold), truth.adjacency);
    o.cls = classification_metrics(o.counts);
    o.frob = frobenius_error(est.omega, truth.omega);
    try {
        o.auc = auc(est.inclusionProb, truth.adjacency);
    } catch (const SingleClass&) {
    }
    return o;
}

/// Runs the requested arms on one replicate, each tuned over the grid by BIC.
/// The corrected arm starts every cell's chain from that cell's naive fit.
inline ReplicateOutcome run_replicate(const SimCell& cell, const ExperimentSettings& s, std::size_t r) {
    const ReplicateData data = make_replicate(cell, r);
    const std::vector<GridCell> grid = s.grid_for(cell);
    TuneSettings ts = s.tune;
    ts.threads = 1;

    ReplicateOutcome out;
    out.replicate = r;
    auto wants = [&](Method m) { return std::find(s.methods.begin(), s.methods.end(), m) != s.methods.end(); };
    auto attempt = [&](Method m, auto&& body) {
        try {
            out.methods.push_back(body());
        } catch (const Error& e) {
            MethodOutcome o;
            o.method = m;
            o.error = e.what();
            out.methods.push_back(std::move(o));
        }
    };

    if (wants(Method::True)) {
        attempt(Method::True, [&] {
            const auto t = tune(FitInput::from_data(data.x), grid, ts);
            MethodOutcome o = score_fit(Method::True, t.bestFit, data.truth, s.threshold);
            o.chosen = t.cells[t.bestIndex].cell;
            o.nonConverged = t.bestFit.converged ? 0 : 1;
            return o;
        });
    }

    const FitInput naiveInput = FitInput::from_data(data.w);
    std::vector<std::optional<PrecisionEstimate>> naiveFits(grid.size());
    std::vector<std::string> naiveErrors(grid.size());
    if (wants(Method::Naive) || wants(Method::Corrected)) {
        for (std::size_t i = 0; i < grid.size(); ++i) {
            try {
                naiveFits[i] = fit_bagus(naiveInput, ts.hyperparams(grid[i]));
            } catch (const Error& e) {
                naiveErrors[i] = e.what();
            }
        }
    }
    auto naiveAt = [&](const BagusHyperparams& hp) -> const PrecisionEstimate& {
        for (std::size_t i = 0; i < grid.size(); ++i)
            if (grid[i].v0 == hp.v0 && grid[i].v1 == hp.v1) {
                if (!naiveFits[i]) throw Error(naiveErrors[i]);
                return *naiveFits[i];
            }
        throw InvalidArgument("run_replicate: grid cell not found");
    };

    if (wants(Method::Naive)) {
        attempt(Method::Naive, [&] {
            const auto t = tune_with(grid, ts, [&](const BagusHyperparams& hp) {
                const PrecisionEstimate& est = naiveAt(hp);
                return std::pair<PrecisionEstimate, CellFit>(est, CellFit{est, naiveInput.s, naiveInput.n});
            });
            MethodOutcome o = score_fit(Method::Naive, t.bestFit, data.truth, s.threshold);
            o.chosen = t.cells[t.bestIndex].cell;
            o.nonConverged = t.bestFit.converged ? 0 : 1;
            return o;
        });
    }

    if (wants(Method::Corrected)) {
        attempt(Method::Corrected, [&] {
            const auto t = tune_with(grid, ts, [&](const BagusHyperparams& hp) {
                IroConfig cfg;
                cfg.iterations = s.iroIterations;
                cfg.burnInFraction = s.burnInFraction;
                cfg.seed = data.imputeSeed;
                cfg.hp = hp;
                IroTrace trace = run_iro(data.w, data.me, cfg, naiveAt(hp));
                CellFit cf{trace.averaged, trace.averagedCovariance, data.w.n()};
                return std::pair<IroTrace, CellFit>(std::move(trace), std::move(cf));
            });
            MethodOutcome o = score_fit(Method::Corrected, t.bestFit.averaged, data.truth, s.threshold);
            o.chosen = t.cells[t.bestIndex].cell;
            o.nonConverged = t.bestFit.nonConverged.size() + (t.bestFit.initial.converged ? 0 : 1);
            return o;
        });
    }
    return out;
}

/// Means over the replicates where the arm succeeded; AUC over those where it is defined.
inline std::vector<MethodSummary> summarize(const std::vector<ReplicateOutcome>& reps, const std::vector<Method>& methods) {
    std::vector<MethodSummary> out;
    for (Method m : methods) {
        MethodSummary s;
        s.method = m;
        double aucSum = 0.0;
        for (const auto& rep : reps)
            for (const auto& o : rep.methods) {
                if (o.method != m) continue;
                if (!o.ok) {
                    ++s.failed;
                    continue;
                }
                ++s.succeeded;
                s.sen += o.cls.sen;
                s.spe += o.cls.spe;
                s.pre += o.cls.pre;
                s.acc += o.cls.acc;
                s.mcc += o.cls.mcc;
                s.frob += o.frob;
                s.nonConverged += o.nonConverged;
                if (o.auc) {
                    aucSum += *o.auc;
                    ++s.aucCount;
                }
            }
        if (s.succeeded > 0) {
            const double k = double(s.succeeded);
            s.sen /= k;
            s.spe /= k;
            s.pre /= k;
            s.acc /= k;
            s.mcc /= k;
            s.frob /= k;
        }
        if (s.aucCount > 0) s.auc = aucSum / double(s.aucCount);
        out.push_back(s);
    }
    return out;
}

inline CellResult run_cell(const SimCell& cell, const ExperimentSettings& s) {
    cell.validate();
    if (s.replicates < 1) throw InvalidArgument("run_cell: replicates must be >= 1");
    if (s.methods.empty()) throw InvalidArgument("run_cell: no methods requested");
    if (s.grid_for(cell).empty()) throw InvalidArgument("run_cell: empty tuning grid");
    CellResult res;
    res.cell = cell;
    res.replicates.resize(s.replicates);
    parallel_for(s.replicates, s.threads, [&](std::size_t r) { res.replicates[r] = run_replicate(cell, s, r); });
    res.summary = summarize(res.replicates, s.methods);
    return res;
}

}  // namespace precis
