// Command-line front end for covariance tables, supremum quantiles, bands and
// coverage experiments.
#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cprf/bands.hpp"
#include "cprf/error.hpp"
#include "cprf/forest.hpp"
#include "cprf/gpcov.hpp"
#include "cprf/io.hpp"
#include "cprf/parallel.hpp"
#include "cprf/simlab.hpp"

namespace {

using namespace cprf;

constexpr int kExitUsage = 2;
constexpr int kExitFailure = 1;

struct RuleFlags {
    std::string kind = "uniform";
    int ehr_b = 12;
    double ehr_delta = 7.0;

    void add(CLI::App* app) {
        app->add_option("--kind", kind, "uniform | ehrenfest")->capture_default_str();
        app->add_option("--ehr-b", ehr_b, "Ehrenfest particle count B")->capture_default_str();
        app->add_option("--ehr-delta", ehr_delta, "Ehrenfest slack Delta")->capture_default_str();
    }
    SplitRule rule() const {
        const auto k = parse_forest_kind(kind);
        return k == ForestKind::Ehrenfest ? SplitRule::ehrenfest_rule(ehr_b, ehr_delta) : SplitRule::uniform();
    }
};

std::vector<double> parse_betas(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            std::size_t used = 0;
            out.push_back(std::stod(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            fail(ErrorKind::Configuration, "bad beta value '" + item + "'");
        }
    }
    if (out.empty()) fail(ErrorKind::Configuration, "no beta values given");
    return out;
}

// ---- cov ------------------------------------------------------------------

struct CovCmd {
    RuleFlags rule;
    int depth = 5;
    int dim = 2;
    std::uint64_t pairs = 50000;
    std::uint64_t seed = 0;
    std::string out;
    unsigned workers = 0;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("cov", "Monte-Carlo covariance table of the limiting Gaussian process");
        rule.add(c);
        c->add_option("--k", depth, "tree depth")->required();
        c->add_option("--p", dim, "dimension")->required();
        c->add_option("--pairs", pairs, "simulated pairs of split vectors")->capture_default_str();
        c->add_option("--seed", seed, "random seed")->required();
        c->add_option("--out", out, "output table file")->required();
        c->add_option("--workers", workers, "worker threads (default: CPRF_WORKERS or all cores)");
        c->callback([this] { run(); });
    }
    void run() const {
        const auto table = approximate_covariance(rule.rule(), depth, dim, pairs, seed, workers);
        save_cov_table(table, out);
        std::cout << "v_cap " << format_double(table.v_cap) << '\n'
                  << "psi " << format_double(psi_uniform(table).values.front()) << '\n'
                  << "c_star " << detect_undividable_resolution(table) << '\n'
                  << "entries " << table.values.size() << '\n';
        if (table.fallback_moves) std::cout << "fallback_moves " << table.fallback_moves << '\n';
    }
};

// ---- quantiles ----------------------------------------------------------------

struct QuantilesCmd {
    std::string cov;
    std::string ktilde = "auto";
    std::uint64_t sups = 100000;
    std::string betas = "0.1,0.05,0.01";
    std::uint64_t seed = 0;
    std::string out;
    std::size_t max_points = 4096;
    std::size_t mixture_max_points = 65536;
    std::string sampler = "auto";
    unsigned workers = 0;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("quantiles", "Quantiles of the Gaussian supremum on a dyadic grid");
        c->add_option("--cov", cov, "covariance table file")->required()->check(CLI::ExistingFile);
        c->add_option("--ktilde", ktilde, "grid depth, or 'auto' for the undividable level")->capture_default_str();
        c->add_option("--sups", sups, "simulated suprema")->capture_default_str();
        c->add_option("--betas", betas, "comma-separated levels")->capture_default_str();
        c->add_option("--seed", seed, "random seed")->required();
        c->add_option("--out", out, "output JSON")->required();
        c->add_option("--max-points", max_points, "grid size cap for the Cholesky sampler")->capture_default_str();
        c->add_option("--mixture-max-points", mixture_max_points, "grid size cap for the mixture sampler")
            ->capture_default_str();
        c->add_option("--sampler", sampler, "auto | cholesky | mixture")->capture_default_str();
        c->add_option("--workers", workers, "worker threads");
        c->callback([this] { run(); });
    }
    void run() const {
        const auto table = load_cov_table(cov);
        GridPlan plan;
        if (ktilde == "auto") {
            plan = plan_gp_grid(table, max_points, mixture_max_points);
        } else {
            int depth = 0;
            try {
                depth = std::stoi(ktilde);
            } catch (const std::exception&) {
                fail(ErrorKind::Configuration, "--ktilde must be an integer or 'auto'");
            }
            plan = plan_gp_grid_at(table, depth, max_points);
        }
        if (sampler != "auto") plan.sampler = parse_gp_sampler(sampler);
        const std::size_t cap = plan.sampler == GpSampler::Cholesky ? max_points : mixture_max_points;
        if (plan.depth * table.dim > 40 || (std::size_t{1} << (plan.depth * table.dim)) > cap)
            fail(ErrorKind::Resource, "grid with 2^(" + std::to_string(plan.depth) + "*" + std::to_string(table.dim) +
                                          ") points exceeds the " + to_string(plan.sampler) + " cap of " +
                                          std::to_string(cap));
        const auto q = gp_quantiles(table, plan, sups, parse_betas(betas), seed, workers);
        save_quantiles(q, out);
        std::cout << "grid_depth " << plan.depth << " (" << (std::size_t{1} << (plan.depth * table.dim))
                  << " points, " << to_string(plan.sampler) << ")\n";
        for (std::size_t i = 0; i < q.betas.size(); ++i)
            std::cout << "beta " << format_double(q.betas[i]) << " quantile " << format_double(q.quantiles[i])
                      << '\n';
    }
};

// ---- band / fit -------------------------------------------------------------

struct BandCmd {
    std::string data;
    RuleFlags rule;
    int depth = 5;
    int rn = 0;
    int trees = 100;
    bool poisson = false;
    std::string cov;
    std::string quantiles;
    double beta = 0.05;
    std::string sigma_est = "shen";
    double bandwidth = 0.0;
    std::string psi_mode = "uniform";
    std::uint64_t psi_draws = 1000;
    std::string grid = "midpoints";
    int grid_depth = -1;
    std::uint64_t seed = 0;
    std::string out;
    std::string manifest;
    unsigned workers = 0;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("band", "Fit a forest on CSV data and write a confidence band");
        c->alias("fit");
        c->add_option("--data", data, "training CSV with header x1..xp,y")->required()->check(CLI::ExistingFile);
        rule.add(c);
        c->add_option("--k", depth, "tree depth")->required();
        c->add_option("--rn", rn, "subsample size")->required();
        c->add_option("--trees", trees, "number of trees")->capture_default_str();
        c->add_flag("--poisson", poisson, "Poisson-distributed number of trees");
        c->add_option("--cov", cov, "covariance table file")->required()->check(CLI::ExistingFile);
        c->add_option("--quantiles", quantiles, "quantiles JSON")->required()->check(CLI::ExistingFile);
        c->add_option("--beta", beta, "band level")->capture_default_str();
        c->add_option("--sigma-est", sigma_est, "shen | residual")->capture_default_str();
        c->add_option("--bandwidth", bandwidth, "kernel bandwidth (default n^-1/2)");
        c->add_option("--psi", psi_mode, "uniform | empirical")->capture_default_str();
        c->add_option("--psi-draws", psi_draws, "branch draws for --psi empirical")->capture_default_str();
        c->add_option("--grid", grid, "midpoints | sup")->capture_default_str();
        c->add_option("--grid-depth", grid_depth, "grid depth (default k for midpoints, k-1 for sup)");
        c->add_option("--seed", seed, "random seed")->required();
        c->add_option("--out", out, "band CSV")->required();
        c->add_option("--manifest", manifest, "also write a forest manifest JSON");
        c->add_option("--workers", workers, "worker threads");
        c->callback([this] { run(); });
    }

    std::vector<double> points(int dim) const {
        if (grid == "midpoints") return make_eval_grid(grid_depth >= 0 ? grid_depth : depth, dim, 1u << 20).points;
        if (grid == "sup") return make_sup_grid(grid_depth >= 0 ? grid_depth : std::max(depth - 1, 0), dim);
        fail(ErrorKind::Configuration, "--grid must be 'midpoints' or 'sup'");
    }

    void run() const {
        const auto sample = std::make_shared<TrainingSample>(read_training_csv(data));
        const auto table = load_cov_table(cov);
        const auto q = load_quantiles(quantiles);
        const auto split = rule.rule();
        if (table.rule.kind != split.kind || table.depth != depth || table.dim != sample->dim)
            fail(ErrorKind::Configuration, "covariance table was built for a different (kind, k, p)");
        if (q.depth != depth || q.dim != sample->dim || q.kind != to_string(split.kind))
            fail(ErrorKind::Configuration, "quantiles were built for a different (kind, k, p)");
        ForestConfig fc{split, depth, trees, rn, poisson ? SubsampleMode::Poissonized : SubsampleMode::FixedCount,
                        seed};
        const auto forest = fit_forest(fc, sample, workers);
        const double s2 = estimate_sigma2(*sample, parse_sigma_estimator(sigma_est),
                                          bandwidth > 0.0 ? bandwidth : 1.0 / std::sqrt(double(sample->size())),
                                          &forest);
        const auto pts = points(sample->dim);
        PsiEstimate psi;
        if (psi_mode == "uniform") psi = psi_uniform(table);
        else if (psi_mode == "empirical") psi = psi_empirical(pts, *sample, split, depth, psi_draws, seed);
        else fail(ErrorKind::Configuration, "--psi must be 'uniform' or 'empirical'");
        const auto band = build_band(forest, psi, q, std::sqrt(s2), beta, pts);
        write_band_csv(band, out);
        if (!manifest.empty()) save_forest_manifest(forest, manifest);
        std::cout << "trees " << forest.tree_count() << "\nsigma_hat " << format_double(band.sigma_hat)
                  << "\nc_k " << format_double(band.critical_value) << "\nradius_mean ";
        double mean = 0.0;
        for (double r : band.radius) mean += r / static_cast<double>(band.size());
        std::cout << format_double(mean) << "\npoints " << band.size() << '\n';
        if (psi.empty_cells) std::cout << "empty_cells " << psi.empty_cells << '\n';
    }
};

// ---- simulate -----------------------------------------------------------------

struct SimulateCmd {
    std::string config;
    std::optional<std::uint64_t> seed;
    bool fast = false;
    std::string out;
    std::string cache_dir;
    unsigned workers = 0;
    // inline experiment
    RuleFlags rule;
    ExperimentConfig inline_cfg;
    std::string errors = "normal";
    std::string regression = "m2";
    std::string betas = "0.1,0.05,0.01";
    std::optional<std::size_t> reps;

    void add(CLI::App& app) {
        auto* c = app.add_subcommand("simulate", "Run coverage experiments and write a results CSV");
        c->add_option("--config", config, "experiment JSON")->check(CLI::ExistingFile);
        c->add_option("--seed", seed, "master seed (mandatory)")->required();
        c->add_flag("--fast", fast, "200 replications per experiment");
        c->add_option("--out", out, "results CSV")->required();
        c->add_option("--cache-dir", cache_dir, "cache for covariance tables and quantiles");
        c->add_option("--workers", workers, "worker threads");
        rule.add(c);
        c->add_option("--p", inline_cfg.dim)->capture_default_str();
        c->add_option("--n", inline_cfg.n)->capture_default_str();
        c->add_option("--rn", inline_cfg.subsample_size)->capture_default_str();
        c->add_option("--k", inline_cfg.depth)->capture_default_str();
        c->add_option("--trees", inline_cfg.trees)->capture_default_str();
        c->add_option("--sigma", inline_cfg.sigma)->capture_default_str();
        c->add_option("--errors", errors, "normal | uniform | t<dof>")->capture_default_str();
        c->add_option("--m", regression, "m2 | m4 | zero")->capture_default_str();
        c->add_option("--betas", betas)->capture_default_str();
        c->add_option("--reps", reps, "replications (default 1000)");
        c->add_option("--pairs", inline_cfg.cov_pairs)->capture_default_str();
        c->add_option("--sups", inline_cfg.n_sup)->capture_default_str();
        c->add_option("--ktilde", inline_cfg.gp_grid_depth, "Gaussian grid depth (default automatic)");
        c->add_option("--sup-grid-depth", inline_cfg.sup_grid_depth, "test grid depth (default k-1)");
        c->callback([this] { run(); });
    }

    void run() {
        std::vector<ExperimentConfig> configs;
        if (!config.empty()) {
            configs = parse_experiment_json(read_file(config));
        } else {
            inline_cfg.rule = rule.rule();
            inline_cfg.errors = ErrorDistribution::parse(errors);
            inline_cfg.regression = parse_regression(regression);
            inline_cfg.betas = parse_betas(betas);
            configs.push_back(inline_cfg);
        }
        for (auto& c : configs) {
            c.seed = *seed;
            if (reps) c.replications = *reps;
            if (fast) c.replications = 200;
            c.validate();
        }
        std::vector<ExperimentResult> results;
        std::string csv = results_csv_header();
        for (const auto& c : configs) {
            results.push_back(run_experiment(c, cache_dir, workers));
            csv += results_csv_rows(results.back());
        }
        write_file_atomic(out, csv);
        std::cout << results_summary(results);
    }
};

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Centered purely random forests: covariance tables, Gaussian quantiles, confidence bands"};
    app.require_subcommand(1);
    CovCmd cov;
    QuantilesCmd quantiles;
    BandCmd band;
    SimulateCmd simulate;
    cov.add(app);
    quantiles.add(app);
    band.add(app);
    simulate.add(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    } catch (const cprf::Error& e) {
        std::cerr << "error (" << cprf::to_string(e.kind()) << "): " << e.what() << '\n';
        return e.kind() == cprf::ErrorKind::Configuration ? kExitUsage : kExitFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return 0;
}
