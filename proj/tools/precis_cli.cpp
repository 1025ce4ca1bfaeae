// precis: command-line front end for simulation, fitting, tuning, evaluation,
// real-data preparation and replicated experiments.

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "precis/precis.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace precis;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitNonConvergence = 4;

/// Raised for bad flag combinations that CLI11 cannot express.
struct UsageError : InvalidArgument {
    using InvalidArgument::InvalidArgument;
};

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), std::streamsize(buf.size()));
        EVP_DigestUpdate(ctx, buf.data(), std::size_t(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    char b[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(b, sizeof b, "%02x", md[i]);
        hex += b;
    }
    return hex;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InvalidArgument(path.string() + ": " + e.what());
    }
}

json number_or_null(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

std::vector<double> parse_list(const std::string& s, const char* flag) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw UsageError(std::string(flag) + ": not a number list: '" + s + "'");
        }
    }
    if (out.empty()) throw UsageError(std::string(flag) + ": empty list");
    return out;
}

/// Shared state for one invocation: where to write, what was read, and the
/// full parameter set for the manifest.
struct Run {
    std::string subcommand;
    fs::path outDir;
    std::string started = utc_now();
    json parameters = json::object();
    json inputs = json::array();
    json outputs = json::array();
    std::optional<std::uint64_t> seed;

    void input(const fs::path& p) { inputs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}}); }

    fs::path output(const std::string& name) {
        outputs.push_back(name);
        return outDir / name;
    }

    void prepare() {
        std::error_code ec;
        fs::create_directories(outDir, ec);
        if (ec) throw IoError("cannot create output directory " + outDir.string() + ": " + ec.message());
    }

    void finish(const std::string& status) {
        json m;
        m["subcommand"] = subcommand;
        m["version"] = PRECIS_VERSION;
        m["parameters"] = parameters;
        m["seed"] = seed ? json(*seed) : json(nullptr);
        m["inputs"] = inputs;
        m["outputs"] = outputs;
        m["status"] = status;
        m["started"] = started;
        m["finished"] = utc_now();
        outputs.push_back("manifest.json");
        m["outputs"] = outputs;
        write_json(outDir / "manifest.json", m);
    }
};

/// Every option of the subcommand, given or defaulted, as strings keyed by long name.
json collect_parameters(const CLI::App& sub) {
    json p = json::object();
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_single_name();
        if (name == "help" || name.empty()) continue;
        if (opt->get_expected_min() == 0) {
            p[name] = opt->count() > 0;
            continue;
        }
        if (opt->count() > 0) {
            std::string joined;
            for (const auto& r : opt->results()) joined += (joined.empty() ? "" : ",") + r;
            p[name] = joined;
        } else {
            p[name] = opt->get_default_str();
        }
    }
    return p;
}

json hyperparams_json(const BagusHyperparams& hp) {
    return {{"v0", hp.v0},       {"v1", hp.v1},       {"eta", hp.eta},
            {"tau", hp.tau},     {"B", hp.specB},     {"emTol", hp.emTol},
            {"emMaxIter", hp.emMaxIter}};
}

json em_run_json(const std::string& label, const PrecisionEstimate& e) {
    return {{"label", label},
            {"emIterations", e.emIterations},
            {"converged", e.converged},
            {"objectiveTrace", e.objectiveTrace}};
}

Adjacency support(const SymMatrix& m) {
    Adjacency a(m.dim());
    for (std::size_t i = 0; i < m.dim(); ++i)
        for (std::size_t j = i + 1; j < m.dim(); ++j)
            if (m(i, j) != 0.0) a.set(i, j);
    return a;
}

// ---------------------------------------------------------------------------

struct HyperFlags {
    double v0 = 0.0, v1 = 0.0, eta = 0.5;
    std::optional<double> tau;
    double bound = 10.0, emTol = 1e-4;
    std::size_t emMaxIter = 50;

    void add(CLI::App* sub, bool scalesRequired) {
        if (scalesRequired) {
            sub->add_option("--v0", v0, "Spike scale")->required();
            sub->add_option("--v1", v1, "Slab scale")->required();
        }
        sub->add_option("--eta", eta, "Prior slab probability");
        sub->add_option("--tau", tau, "Diagonal rate (default: v0)");
        sub->add_option("--B", bound, "Elementwise bound on the precision matrix");
        sub->add_option("--em-tol", emTol, "EM tolerance on the largest elementwise change");
        sub->add_option("--em-max-iter", emMaxIter, "EM iteration cap");
    }

    BagusHyperparams hp(double spike, double slab) const {
        BagusHyperparams h;
        h.v0 = spike;
        h.v1 = slab;
        h.eta = eta;
        h.tau = tau.value_or(spike);
        h.specB = bound;
        h.emTol = emTol;
        h.emMaxIter = emMaxIter;
        h.validate();
        return h;
    }

    TuneSettings tune_settings() const {
        TuneSettings t;
        t.eta = eta;
        t.tau = tau;
        t.specB = bound;
        t.emTol = emTol;
        t.emMaxIter = emMaxIter;
        return t;
    }
};

struct ChainFlags {
    std::size_t iterations = 50;
    double burnIn = 0.2;
    std::uint64_t seed = 0;

    void add(CLI::App* sub) {
        sub->add_option("--iterations", iterations, "Imputation iterations");
        sub->add_option("--burn-in", burnIn, "Fraction of iterations discarded before averaging");
        sub->add_option("--seed", seed, "Random seed");
    }
};

// --- simulate ---------------------------------------------------------------

struct SimulateFlags {
    std::string structure = "hub";
    std::size_t d = 0, n = 0, groupSize = 20;
    double gamma = 0.25;
    std::uint64_t seed = 0;
    std::string hubStyle = "star";
    std::optional<double> edgeProbability;
};

int cmd_simulate(const SimulateFlags& f, Run& run) {
    if (!(f.gamma > 0.0))
        throw UsageError("--gamma must be > 0; for error-free data fit x.csv directly with `precis fit --method naive`");
    SimCell cell;
    cell.spec.structure = f.structure == "hub" ? Structure::Hub : Structure::Random;
    cell.spec.d = f.d;
    cell.spec.groupSize = f.groupSize;
    cell.spec.hubStyle = f.hubStyle == "block" ? HubStyle::Block : HubStyle::Star;
    cell.spec.edgeProbability = f.edgeProbability;
    cell.n = f.n;
    cell.gamma = f.gamma;
    cell.seed = f.seed;
    run.seed = f.seed;
    cell.validate();
    run.prepare();

    const ReplicateData data = make_replicate(cell, 0);
    csv::write_dataset(run.output("w.csv"), data.w);
    csv::write_dataset(run.output("x.csv"), data.x);
    csv::write_matrix(run.output("omega_true.csv"), data.truth.omega);
    csv::write_vector(run.output("sigma_u.csv"), data.me.variances());
    std::cout << "true edges: " << data.truth.adjacency.edge_count() << "\n";
    run.finish("ok");
    return kExitOk;
}

// --- fit --------------------------------------------------------------------

struct FitFlags {
    std::string data, method = "naive", sigmaU;
    double threshold = 0.5;
    HyperFlags hyper;
    ChainFlags chain;
};

int cmd_fit(const FitFlags& f, Run& run) {
    if (f.method == "corrected" && f.sigmaU.empty()) throw UsageError("--method corrected requires --sigma-u");
    const BagusHyperparams hp = f.hyper.hp(f.hyper.v0, f.hyper.v1);
    const Dataset w = csv::read_dataset(f.data);
    run.input(f.data);

    json trace;
    trace["method"] = f.method;
    trace["hyperparameters"] = hyperparams_json(hp);
    json runs = json::array();
    PrecisionEstimate result;
    SymMatrix bicCov;
    std::size_t capped = 0;

    if (f.method == "naive") {
        const FitInput in = FitInput::from_data(w);
        result = fit_bagus(in, hp);
        runs.push_back(em_run_json("fit", result));
        capped += result.converged ? 0 : 1;
        bicCov = in.s;
    } else {
        const MeasurementErrorModel me(csv::read_vector(f.sigmaU));
        run.input(f.sigmaU);
        run.seed = f.chain.seed;
        IroConfig cfg;
        cfg.iterations = f.chain.iterations;
        cfg.burnInFraction = f.chain.burnIn;
        cfg.seed = f.chain.seed;
        cfg.hp = hp;
        const IroTrace t = run_iro(w, me, cfg);
        runs.push_back(em_run_json("initial", t.initial));
        capped += t.initial.converged ? 0 : 1;
        for (std::size_t i = 0; i < t.perIteration.size(); ++i)
            runs.push_back(em_run_json("iteration " + std::to_string(i + 1), t.perIteration[i]));
        capped += t.nonConverged.size();
        trace["iterations"] = cfg.iterations;
        trace["burnInCount"] = t.burnInCount;
        trace["nonConvergedIterations"] = t.nonConverged;
        result = t.averaged;
        bicCov = t.averagedCovariance;
    }
    run.prepare();
    const Adjacency edges = select_edges(result.inclusionProb, f.threshold);
    trace["converged"] = capped == 0;
    trace["nonConvergedRuns"] = capped;
    trace["selectedEdges"] = edges.edge_count();
    trace["bic"] = bic(bicCov, result, w.n());
    trace["runs"] = runs;

    csv::write_matrix(run.output("omega_hat.csv"), result.omega);
    csv::write_matrix(run.output("p_hat.csv"), result.inclusionProb);
    write_json(run.output("trace.json"), trace);
    run.finish(capped == 0 ? "ok" : "nonconverged");
    if (capped > 0) {
        std::cerr << "precis: warning: " << capped << " EM run(s) hit the iteration cap; see trace.json\n";
        return kExitNonConvergence;
    }
    return kExitOk;
}

// --- tune -------------------------------------------------------------------

struct TuneFlags {
    std::string data, method = "naive", sigmaU, v0Grid, v1Grid;
    double threshold = 0.5;
    HyperFlags hyper;
    ChainFlags chain;
};

int cmd_tune(const TuneFlags& f, Run& run) {
    if (f.method == "corrected" && f.sigmaU.empty()) throw UsageError("--method corrected requires --sigma-u");
    if (f.v0Grid.empty() != f.v1Grid.empty()) throw UsageError("--v0-grid and --v1-grid go together");
    const Dataset w = csv::read_dataset(f.data);
    run.input(f.data);
    const std::vector<GridCell> grid = f.v0Grid.empty()
                                           ? default_grid(w.n(), w.d())
                                           : make_grid(parse_list(f.v0Grid, "--v0-grid"), parse_list(f.v1Grid, "--v1-grid"));
    if (grid.empty()) throw UsageError("tuning grid has no cell with v0 < v1");
    const TuneSettings ts = f.hyper.tune_settings();

    PrecisionEstimate best;
    std::vector<TuneCellResult> cells;
    std::size_t bestIndex = 0;
    std::size_t capped = 0;
    if (f.method == "naive") {
        const FitInput in = FitInput::from_data(w);
        auto r = tune(in, grid, ts);
        best = std::move(r.bestFit);
        cells = std::move(r.cells);
        bestIndex = r.bestIndex;
        capped = best.converged ? 0 : 1;
    } else {
        const MeasurementErrorModel me(csv::read_vector(f.sigmaU));
        run.input(f.sigmaU);
        run.seed = f.chain.seed;
        auto r = tune_with(grid, ts, [&](const BagusHyperparams& hp) {
            IroConfig cfg;
            cfg.iterations = f.chain.iterations;
            cfg.burnInFraction = f.chain.burnIn;
            cfg.seed = f.chain.seed;
            cfg.hp = hp;
            IroTrace t = run_iro(w, me, cfg);
            CellFit cf{t.averaged, t.averagedCovariance, w.n()};
            return std::pair<IroTrace, CellFit>(std::move(t), std::move(cf));
        });
        best = r.bestFit.averaged;
        capped = r.bestFit.nonConverged.size() + (r.bestFit.initial.converged ? 0 : 1);
        cells = std::move(r.cells);
        bestIndex = r.bestIndex;
    }
    run.prepare();

    json out;
    out["method"] = f.method;
    json jc = json::array();
    for (const auto& c : cells)
        jc.push_back({{"v0", c.cell.v0}, {"v1", c.cell.v1}, {"bic", number_or_null(c.bic)}, {"error", c.error}});
    out["cells"] = jc;
    out["best"] = {{"index", bestIndex},
                   {"v0", cells[bestIndex].cell.v0},
                   {"v1", cells[bestIndex].cell.v1},
                   {"bic", *cells[bestIndex].bic}};
    out["nonConvergedRuns"] = capped;
    out["selectedEdges"] = select_edges(best.inclusionProb, f.threshold).edge_count();
    write_json(run.output("tune.json"), out);
    csv::write_matrix(run.output("omega_hat.csv"), best.omega);
    csv::write_matrix(run.output("p_hat.csv"), best.inclusionProb);
    run.finish(capped == 0 ? "ok" : "nonconverged");
    return capped == 0 ? kExitOk : kExitNonConvergence;
}

// --- evaluate ---------------------------------------------------------------

struct EvaluateFlags {
    std::string estimate, inclusion, truth;
    double threshold = 0.5;
};

int cmd_evaluate(const EvaluateFlags& f, Run& run) {
    const SymMatrix omegaHat = csv::read_matrix(f.estimate);
    run.input(f.estimate);
    const SymMatrix omegaTrue = csv::read_matrix(f.truth);
    run.input(f.truth);
    const Adjacency truth = support(omegaTrue);

    // With inclusion probabilities, edges are thresholded probabilities and
    // AUC ranks them; otherwise the support of the estimate and |omega_ij|.
    SymMatrix scores = SymMatrix(omegaHat.matrix().cwiseAbs());
    Adjacency est = support(omegaHat);
    if (!f.inclusion.empty()) {
        scores = csv::read_matrix(f.inclusion);
        run.input(f.inclusion);
        est = select_edges(scores, f.threshold);
    }
    const ConfusionCounts c = confusion(est, truth);
    const ClassificationMetrics m = classification_metrics(c);
    std::optional<double> a;
    try {
        a = auc(scores, truth);
    } catch (const SingleClass&) {
    }
    run.prepare();
    json out;
    out["sen"] = m.sen;
    out["spe"] = m.spe;
    out["pre"] = m.pre;
    out["acc"] = m.acc;
    out["mcc"] = m.mcc;
    out["frob"] = frobenius_error(omegaHat, omegaTrue);
    out["auc"] = number_or_null(a);
    out["degenerateFlags"] = {{"sen", m.degenerate.sen}, {"spe", m.degenerate.spe}, {"pre", m.degenerate.pre},
                              {"acc", m.degenerate.acc}, {"mcc", m.degenerate.mcc}, {"auc", !a.has_value()}};
    out["counts"] = {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
    write_json(run.output("evaluation.json"), out);
    run.finish("ok");
    return kExitOk;
}

// --- prep -------------------------------------------------------------------

struct PrepFlags {
    std::string means, variances, intensities, order = "2,3,4";
    bool noIntensity = false, noIqr = false, noNoise = false;
    FilterConfig filters;
};

int cmd_prep(PrepFlags f, Run& run) {
    f.filters.intensity = !f.noIntensity;
    f.filters.iqr = !f.noIqr;
    f.filters.noise = !f.noNoise;
    f.filters.order.clear();
    for (double v : parse_list(f.order, "--filter-order")) {
        if (v != 2 && v != 3 && v != 4) throw UsageError("--filter-order: filters are numbered 2, 3 and 4");
        f.filters.order.push_back(static_cast<Filter>(int(v)));
    }
    std::optional<fs::path> inten;
    if (!f.intensities.empty()) inten = f.intensities;
    const ExpressionTable t = read_expression_table(f.means, f.variances, inten);
    run.input(f.means);
    run.input(f.variances);
    if (inten) run.input(*inten);

    const FilterReport rep = apply_filters(t, f.filters);
    if (rep.kept.size() < 2) throw InvalidArgument("prep: fewer than 2 features survive the filters");
    const ExpressionTable kept = t.select(rep.kept);
    const Standardized s = standardize(kept);
    const MeasurementErrorModel me = estimate_sigma_u(kept, s.featureSds);
    run.prepare();

    csv::write(run.output("w.csv"), s.w.rows(), kept.featureIds);
    csv::write_vector(run.output("sigma_u.csv"), me.variances());
    json out;
    out["features"] = t.p();
    out["subjects"] = t.n();
    out["kept"] = kept.featureIds;
    json removals = json::array();
    for (const auto& r : rep.removals) removals.push_back({{"filter", int(r.filter)}, {"removed", r.removed}});
    out["removals"] = removals;
    out["featureMeans"] = std::vector<double>(s.featureMeans.data(), s.featureMeans.data() + s.featureMeans.size());
    out["featureSds"] = std::vector<double>(s.featureSds.data(), s.featureSds.data() + s.featureSds.size());
    write_json(run.output("prep.json"), out);
    run.finish("ok");
    return kExitOk;
}

// --- experiment -------------------------------------------------------------

struct ExperimentFlags {
    std::string config;
    std::size_t threads = 0;
};

struct CellConfig {
    SimCell cell;
    std::size_t replicates = 1;
    std::optional<std::vector<GridCell>> grid;
};

template <class T>
T get_or(const json& j, const char* key, T fallback) {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
}

CellConfig parse_cell(const json& c) {
    CellConfig out;
    const std::string structure = get_or<std::string>(c, "structure", "hub");
    if (structure != "hub" && structure != "random") throw InvalidArgument("structure must be hub or random");
    out.cell.spec.structure = structure == "hub" ? Structure::Hub : Structure::Random;
    out.cell.spec.d = c.at("d").get<std::size_t>();
    out.cell.spec.groupSize = get_or<std::size_t>(c, "groupSize", 20);
    const std::string style = get_or<std::string>(c, "hubStyle", "star");
    if (style != "star" && style != "block") throw InvalidArgument("hubStyle must be star or block");
    out.cell.spec.hubStyle = style == "block" ? HubStyle::Block : HubStyle::Star;
    if (c.contains("edgeProbability")) out.cell.spec.edgeProbability = c.at("edgeProbability").get<double>();
    out.cell.n = c.at("n").get<std::size_t>();
    out.cell.gamma = c.at("gamma").get<double>();
    out.cell.seed = get_or<std::uint64_t>(c, "seed", 0);
    out.replicates = get_or<std::size_t>(c, "replicates", 1);
    if (c.contains("grid"))
        out.grid = make_grid(c.at("grid").at("v0").get<std::vector<double>>(), c.at("grid").at("v1").get<std::vector<double>>());
    return out;
}

json cell_json(const CellConfig& cc) {
    const auto& s = cc.cell.spec;
    json j;
    j["structure"] = s.structure == Structure::Hub ? "hub" : "random";
    j["d"] = s.d;
    j["n"] = cc.cell.n;
    j["gamma"] = cc.cell.gamma;
    j["replicates"] = cc.replicates;
    j["seed"] = cc.cell.seed;
    if (s.structure == Structure::Hub) {
        j["groupSize"] = s.groupSize;
        j["hubStyle"] = s.hubStyle == HubStyle::Block ? "block" : "star";
    } else {
        j["edgeProbability"] = s.edge_probability();
    }
    return j;
}

/// Metric columns in table order.
const std::vector<std::string> kColumns{"SEN", "SPE", "PRE", "ACC", "MCC", "FROB", "AUC"};

json metric_row(double sen, double spe, double pre, double acc, double mcc, double frob, std::optional<double> a) {
    json j;
    j["SEN"] = sen;
    j["SPE"] = spe;
    j["PRE"] = pre;
    j["ACC"] = acc;
    j["MCC"] = mcc;
    j["FROB"] = frob;
    j["AUC"] = number_or_null(a);
    return j;
}

int cmd_experiment(const ExperimentFlags& f, Run& run) {
    const json cfg = read_json(f.config);
    run.input(f.config);
    ExperimentSettings base;
    std::vector<json> cellErrors;
    std::vector<std::optional<CellConfig>> cells;
    try {
        base.iroIterations = get_or<std::size_t>(cfg, "iterations", 50);
        base.burnInFraction = get_or<double>(cfg, "burnIn", 0.2);
        base.threshold = get_or<double>(cfg, "threshold", 0.5);
        base.tune.eta = get_or<double>(cfg, "eta", 0.5);
        if (cfg.contains("tau")) base.tune.tau = cfg.at("tau").get<double>();
        base.tune.specB = get_or<double>(cfg, "B", 10.0);
        base.tune.emTol = get_or<double>(cfg, "emTol", 1e-4);
        base.tune.emMaxIter = get_or<std::size_t>(cfg, "emMaxIter", 50);
        if (cfg.contains("methods")) {
            base.methods.clear();
            for (const auto& m : cfg.at("methods")) {
                const auto s = m.get<std::string>();
                if (s == "true") base.methods.push_back(Method::True);
                else if (s == "naive") base.methods.push_back(Method::Naive);
                else if (s == "corrected") base.methods.push_back(Method::Corrected);
                else throw InvalidArgument("unknown method '" + s + "'");
            }
        }
        if (!cfg.contains("cells") || !cfg.at("cells").is_array() || cfg.at("cells").empty())
            throw InvalidArgument("config needs a non-empty \"cells\" array");
    } catch (const json::exception& e) {
        throw InvalidArgument(f.config + ": " + e.what());
    }

    // Per-cell problems are recorded and the remaining cells still run.
    for (const auto& c : cfg.at("cells")) {
        try {
            CellConfig cc = parse_cell(c);
            cc.cell.validate();
            if (cc.replicates < 1) throw InvalidArgument("replicates must be >= 1");
            ExperimentSettings s = base;
            s.grid = cc.grid;
            if (s.grid_for(cc.cell).empty()) throw InvalidArgument("grid has no cell with v0 < v1");
            cells.push_back(std::move(cc));
            cellErrors.push_back(nullptr);
        } catch (const std::exception& e) {
            cells.push_back(std::nullopt);
            cellErrors.push_back(e.what());
        }
    }

    struct Job {
        std::size_t cell, replicate;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < cells.size(); ++c)
        if (cells[c])
            for (std::size_t r = 0; r < cells[c]->replicates; ++r) jobs.push_back({c, r});
    std::vector<ReplicateOutcome> outcomes(jobs.size());
    const std::size_t threads = f.threads > 0 ? f.threads : worker_count();
    parallel_for(jobs.size(), threads, [&](std::size_t k) {
        ExperimentSettings s = base;
        s.grid = cells[jobs[k].cell]->grid;
        outcomes[k] = run_replicate(cells[jobs[k].cell]->cell, s, jobs[k].replicate);
    });
    run.prepare();

    json results;
    results["columns"] = kColumns;
    json jcells = json::array();
    std::ofstream table(run.output("results.csv"), std::ios::binary);
    if (!table) throw IoError("cannot write results.csv");
    table << "cell,structure,d,n,gamma,method";
    for (const auto& c : kColumns) table << "," << c;
    table << ",succeeded,failed\n";
    std::size_t capped = 0;

    for (std::size_t c = 0; c < cells.size(); ++c) {
        json jc;
        jc["index"] = c;
        if (!cells[c]) {
            jc["config"] = cfg.at("cells")[c];
            jc["error"] = cellErrors[c];
            jcells.push_back(jc);
            continue;
        }
        const CellConfig& cc = *cells[c];
        std::vector<ReplicateOutcome> reps;
        for (std::size_t k = 0; k < jobs.size(); ++k)
            if (jobs[k].cell == c) reps.push_back(outcomes[k]);
        const auto summary = summarize(reps, base.methods);
        ExperimentSettings s = base;
        s.grid = cc.grid;

        jc["config"] = cell_json(cc);
        json grid = json::array();
        for (const auto& g : s.grid_for(cc.cell)) grid.push_back({{"v0", g.v0}, {"v1", g.v1}});
        jc["grid"] = grid;
        jc["error"] = nullptr;
        json methods = json::array();
        for (const auto& m : summary) {
            json row = {{"method", method_name(m.method)}};
            row.update(metric_row(m.sen, m.spe, m.pre, m.acc, m.mcc, m.frob, m.auc));
            row["succeeded"] = m.succeeded;
            row["failed"] = m.failed;
            row["aucReplicates"] = m.aucCount;
            row["nonConvergedRuns"] = m.nonConverged;
            capped += m.nonConverged;
            methods.push_back(row);

            const json cj = jc["config"];
            table << c << "," << cj["structure"].get<std::string>() << "," << cc.cell.spec.d << "," << cc.cell.n << ","
                  << csv::format_number(cc.cell.gamma) << "," << method_name(m.method);
            for (double v : {m.sen, m.spe, m.pre, m.acc, m.mcc, m.frob}) table << "," << csv::format_number(v);
            table << "," << (m.auc ? csv::format_number(*m.auc) : std::string("NA"));
            table << "," << m.succeeded << "," << m.failed << "\n";
        }
        jc["methods"] = methods;
        json jreps = json::array();
        for (const auto& rep : reps) {
            json jr;
            jr["replicate"] = rep.replicate;
            json jm = json::array();
            for (const auto& o : rep.methods) {
                json row = {{"method", method_name(o.method)}, {"ok", o.ok}};
                if (o.ok) {
                    row.update(metric_row(o.cls.sen, o.cls.spe, o.cls.pre, o.cls.acc, o.cls.mcc, o.frob, o.auc));
                    row["v0"] = o.chosen.v0;
                    row["v1"] = o.chosen.v1;
                    row["counts"] = {{"tp", o.counts.tp}, {"fp", o.counts.fp}, {"tn", o.counts.tn}, {"fn", o.counts.fn}};
                    row["nonConvergedRuns"] = o.nonConverged;
                } else {
                    row["error"] = o.error;
                }
                jm.push_back(row);
            }
            jr["methods"] = jm;
            jreps.push_back(jr);
        }
        jc["replicates"] = jreps;
        jcells.push_back(jc);
    }
    results["cells"] = jcells;
    results["nonConvergedRuns"] = capped;
    table.close();
    write_json(run.output("results.json"), results);
    run.finish(capped == 0 ? "ok" : "nonconverged");
    return capped == 0 ? kExitOk : kExitNonConvergence;
}

/// Appends this process's audit counters to PRECIS_AUDIT_DIR/precis_cli.txt
/// when the variable is set, so test drivers can account for CLI runs.
void record_audit() {
    const char* dir = std::getenv("PRECIS_AUDIT_DIR");
    if (!dir) return;
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::ofstream out(fs::path(dir) / "precis_cli.txt", std::ios::app);
    const auto& c = diagnostics::counters();
    out << "emRuns " << c.emRuns << "\n"
        << "emMonotonicityViolations " << c.emMonotonicityViolations << "\n"
        << "averagedEstimates " << c.averagedEstimates << "\n"
        << "averagedNotPositiveDefinite " << c.averagedNotPositiveDefinite << "\n"
        << "boundViolations " << c.boundViolations << "\n";
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NotPositiveDefinite*>(&e) || dynamic_cast<const AllCellsFailed*>(&e) ||
        dynamic_cast<const EmptyAverage*>(&e))
        return kExitNumerical;
    if (dynamic_cast<const Error*>(&e) || dynamic_cast<const json::exception*>(&e)) return kExitInvalid;
    return kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse Gaussian graphical models from data with additive measurement error"};
    app.set_version_flag("--version", PRECIS_VERSION);
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();

    Run run;
    std::function<int()> action;
    std::string outDir;

    auto subcommand = [&](const char* name, const char* help) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--out-dir", outDir, "Directory receiving every output file")->required();
        return sub;
    };

    SimulateFlags sim;
    CLI::App* simulate = subcommand("simulate", "Draw a ground-truth graph, clean data and contaminated data");
    simulate->add_option("--structure", sim.structure)->check(CLI::IsMember({"hub", "random"}));
    simulate->add_option("--d", sim.d, "Dimension")->required();
    simulate->add_option("--n", sim.n, "Observations")->required();
    simulate->add_option("--gamma", sim.gamma, "Noise-to-signal ratio (> 0)");
    simulate->add_option("--seed", sim.seed);
    simulate->add_option("--group-size", sim.groupSize, "Hub group size");
    simulate->add_option("--hub-style", sim.hubStyle)->check(CLI::IsMember({"star", "block"}));
    simulate->add_option("--edge-probability", sim.edgeProbability, "Random-graph edge probability (default 3/d)");
    simulate->callback([&] { action = [&] { return cmd_simulate(sim, run); }; });

    FitFlags fit;
    CLI::App* fitCmd = subcommand("fit", "Fit one precision matrix, naively or with error correction");
    fitCmd->add_option("--data", fit.data, "Observations CSV")->required();
    fitCmd->add_option("--method", fit.method)->check(CLI::IsMember({"naive", "corrected"}));
    fitCmd->add_option("--sigma-u", fit.sigmaU, "Error variances CSV (corrected)");
    fitCmd->add_option("--threshold", fit.threshold, "Inclusion-probability cut-off");
    fit.hyper.add(fitCmd, true);
    fit.chain.add(fitCmd);
    fitCmd->callback([&] { action = [&] { return cmd_fit(fit, run); }; });

    TuneFlags tn;
    CLI::App* tuneCmd = subcommand("tune", "Pick (v0, v1) over a grid by BIC");
    tuneCmd->add_option("--data", tn.data, "Observations CSV")->required();
    tuneCmd->add_option("--method", tn.method)->check(CLI::IsMember({"naive", "corrected"}));
    tuneCmd->add_option("--sigma-u", tn.sigmaU, "Error variances CSV (corrected)");
    tuneCmd->add_option("--v0-grid", tn.v0Grid, "Comma-separated spike scales");
    tuneCmd->add_option("--v1-grid", tn.v1Grid, "Comma-separated slab scales");
    tuneCmd->add_option("--threshold", tn.threshold, "Inclusion-probability cut-off");
    tn.hyper.add(tuneCmd, false);
    tn.chain.add(tuneCmd);
    tuneCmd->callback([&] { action = [&] { return cmd_tune(tn, run); }; });

    EvaluateFlags ev;
    CLI::App* evalCmd = subcommand("evaluate", "Score an estimate against the true precision matrix");
    evalCmd->add_option("--estimate", ev.estimate, "Estimated precision CSV")->required();
    evalCmd->add_option("--inclusion", ev.inclusion, "Inclusion probabilities CSV");
    evalCmd->add_option("--truth", ev.truth, "True precision CSV")->required();
    evalCmd->add_option("--threshold", ev.threshold, "Inclusion-probability cut-off");
    evalCmd->callback([&] { action = [&] { return cmd_evaluate(ev, run); }; });

    PrepFlags prep;
    CLI::App* prepCmd = subcommand("prep", "Filter and standardize expression means; estimate error variances");
    prepCmd->add_option("--means", prep.means, "Per-subject expression means CSV")->required();
    prepCmd->add_option("--variances", prep.variances, "Posterior variances CSV")->required();
    prepCmd->add_option("--intensities", prep.intensities, "Raw intensities CSV");
    prepCmd->add_flag("--no-intensity-filter", prep.noIntensity);
    prepCmd->add_flag("--no-iqr-filter", prep.noIqr);
    prepCmd->add_flag("--no-noise-filter", prep.noNoise);
    prepCmd->add_option("--min-fraction", prep.filters.minFractionAbove, "Intensity filter: required share of samples");
    prepCmd->add_option("--intensity-floor", prep.filters.intensityFloor, "Intensity filter: floor");
    prepCmd->add_option("--min-iqr", prep.filters.minIqr, "IQR filter: smallest kept IQR");
    prepCmd->add_option("--max-noise-ratio", prep.filters.maxNoiseRatio, "Noise filter: removal ratio");
    prepCmd->add_option("--filter-order", prep.order, "Order of filters, e.g. 2,3,4");
    prepCmd->callback([&] { action = [&] { return cmd_prep(prep, run); }; });

    ExperimentFlags ex;
    CLI::App* expCmd = subcommand("experiment", "Run replicated simulation cells from a JSON config");
    expCmd->add_option("--config", ex.config, "Experiment config JSON")->required();
    expCmd->add_option("--threads", ex.threads, "Worker threads (default: PRECIS_THREADS or all cores)");
    expCmd->callback([&] { action = [&] { return cmd_experiment(ex, run); }; });

    std::string manifestPath;
    CLI::App* replay = app.add_subcommand("replay", "Rerun the command recorded in a manifest");
    replay->add_option("--manifest", manifestPath)->required();
    replay->add_option("--out-dir", outDir)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInvalid;
    }

    if (replay->parsed()) {
        try {
            const json m = read_json(manifestPath);
            std::vector<std::string> args{argv[0], m.at("subcommand").get<std::string>()};
            for (const auto& [key, value] : m.at("parameters").items()) {
                if (key == "out-dir") continue;
                if (value.is_boolean()) {
                    if (value.get<bool>()) args.push_back("--" + key);
                } else if (!value.get<std::string>().empty()) {
                    args.push_back("--" + key);
                    args.push_back(value.get<std::string>());
                }
            }
            args.push_back("--out-dir");
            args.push_back(outDir);
            std::vector<char*> cargs;
            for (auto& a : args) cargs.push_back(a.data());
            return main(int(cargs.size()), cargs.data());
        } catch (const std::exception& e) {
            std::cerr << "precis: error: " << e.what() << "\n";
            return kExitInvalid;
        }
    }

    for (CLI::App* sub : app.get_subcommands()) {
        run.subcommand = sub->get_name();
        run.parameters = collect_parameters(*sub);
    }
    run.outDir = outDir;
    int code = kExitOk;
    try {
        code = action();
    } catch (const std::exception& e) {
        std::cerr << "precis: error: " << e.what() << "\n";
        code = exit_code_for(e);
    }
    record_audit();
    return code;
}
