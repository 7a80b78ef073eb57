#include "cprf/simlab.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <memory>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "cprf/error.hpp"
#include "cprf/io.hpp"
#include "cprf/parallel.hpp"

namespace cprf {

std::string ErrorDistribution::name() const {
    switch (family) {
    case ErrorFamily::Normal: return "normal";
    case ErrorFamily::Uniform: return "uniform";
    case ErrorFamily::StudentT: {
        std::ostringstream os;
        os << 't' << dof;
        return os.str();
    }
    }
    return "?";
}

ErrorDistribution ErrorDistribution::parse(const std::string& s) {
    if (s == "normal" || s == "gaussian") return {ErrorFamily::Normal, 0.0};
    if (s == "uniform") return {ErrorFamily::Uniform, 0.0};
    if (s.size() > 1 && s[0] == 't') {
        double dof = 0.0;
        try {
            std::size_t used = 0;
            dof = std::stod(s.substr(1), &used);
            if (used != s.size() - 1) throw std::invalid_argument(s);
        } catch (const std::exception&) {
            fail(ErrorKind::Configuration, "bad error distribution '" + s + "'");
        }
        if (!(dof > 2.0))
            fail(ErrorKind::Configuration, "t errors need more than 2 degrees of freedom (finite variance)");
        return {ErrorFamily::StudentT, dof};
    }
    fail(ErrorKind::Configuration, "unknown error distribution '" + s + "' (expected normal|uniform|t<dof>)");
}

double ErrorDistribution::draw(double sigma, Rng& rng) const {
    switch (family) {
    case ErrorFamily::Normal: return sigma * std::normal_distribution<double>(0.0, 1.0)(rng);
    case ErrorFamily::Uniform: {
        const double half = sigma * std::numbers::sqrt3;
        return std::uniform_real_distribution<double>(-half, half)(rng);
    }
    case ErrorFamily::StudentT:
        if (!(dof > 2.0)) fail(ErrorKind::Configuration, "t errors need more than 2 degrees of freedom");
        return sigma / std::sqrt(dof / (dof - 2.0)) * std::student_t_distribution<double>(dof)(rng);
    }
    return 0.0;
}

RegressionId parse_regression(const std::string& s) {
    if (s == "m2") return RegressionId::M2;
    if (s == "m4") return RegressionId::M4;
    if (s == "zero" || s == "0") return RegressionId::Zero;
    fail(ErrorKind::Configuration, "unknown regression function '" + s + "' (expected m2|m4|zero)");
}

const char* to_string(RegressionId id) noexcept {
    switch (id) {
    case RegressionId::M2: return "m2";
    case RegressionId::M4: return "m4";
    case RegressionId::Zero: return "zero";
    }
    return "?";
}

double regression_value(RegressionId id, PointView x) {
    switch (id) {
    case RegressionId::Zero: return 0.0;
    case RegressionId::M2:
        if (x.size() < 2) fail(ErrorKind::InvalidDimension, "m2 needs at least two coordinates");
        return (std::sin(2.0 * std::numbers::pi * x[0]) + x[1]) / 10.0;
    case RegressionId::M4:
        if (x.size() < 4) fail(ErrorKind::InvalidDimension, "m4 needs at least four coordinates");
        return (std::sin(2.0 * std::numbers::pi * x[0]) + x[1] + x[2] * x[3]) / 10.0;
    }
    return 0.0;
}

void ExperimentConfig::validate() const {
    if (dim < 1) fail(ErrorKind::InvalidDimension, "dimension must be >= 1");
    if (regression == RegressionId::M2 && dim < 2) fail(ErrorKind::InvalidDimension, "m2 needs p >= 2");
    if (regression == RegressionId::M4 && dim < 4) fail(ErrorKind::InvalidDimension, "m4 needs p >= 4");
    if (n < 2) fail(ErrorKind::Configuration, "n must be at least 2");
    if (replications < 1) fail(ErrorKind::Configuration, "replications must be positive (empty experiment)");
    if (!(sigma > 0.0)) fail(ErrorKind::Configuration, "sigma must be positive");
    if (errors.family == ErrorFamily::StudentT && !(errors.dof > 2.0))
        fail(ErrorKind::Configuration, "t errors need more than 2 degrees of freedom");
    if (betas.empty()) fail(ErrorKind::Configuration, "no beta levels");
    for (double b : betas)
        if (!(b > 0.0 && b < 1.0)) fail(ErrorKind::Configuration, "beta must lie in (0,1)");
    if (cov_pairs < 1 || n_sup < 1) fail(ErrorKind::Configuration, "Monte-Carlo counts must be positive");
    if (gp_max_points < 1 || gp_mixture_max_points < 1)
        fail(ErrorKind::Configuration, "Gaussian grid point caps must be positive");
    const int sd = effective_sup_grid_depth();
    if (sd > 24) fail(ErrorKind::Configuration, "sup grid depth must be <= 24");
    if (!(sup_eps > 0.0 && sup_eps < std::ldexp(1.0, -sd - 1)))
        fail(ErrorKind::Configuration, "sup grid epsilon must lie in (0, 2^-(k+1))");
    ForestConfig fc{rule, depth, trees, subsample_size, mode, seed};
    fc.validate(dim, n);
}

namespace {

std::string table_key(const ExperimentConfig& c) {
    std::ostringstream os;
    os << "kind=" << to_string(c.rule.kind) << ";B=" << c.rule.ehrenfest.particles
       << ";D=" << format_double(c.rule.ehrenfest.slack) << ";k=" << c.depth << ";p=" << c.dim
       << ";pairs=" << c.cov_pairs << ";seed=" << c.table_seed;
    return os.str();
}

std::string quantile_key(const ExperimentConfig& c, const GridPlan& plan) {
    std::ostringstream os;
    os << table_key(c) << ";grid=" << plan.depth << ";sups=" << c.n_sup << ";betas=";
    for (double b : c.betas) os << format_double(b) << ',';
    if (plan.sampler != GpSampler::Cholesky) os << ";sampler=" << to_string(plan.sampler);
    return os.str();
}

std::string cache_path(const std::string& dir, const std::string& prefix, const std::string& key,
                       const std::string& ext) {
    return (std::filesystem::path(dir) / (prefix + hex64(fnv1a(key.data(), key.size())) + ext)).string();
}

GridPlan resolve_grid_plan(const ExperimentConfig& c, const CovTable& cov) {
    if (c.gp_grid_depth >= 0) return plan_gp_grid_at(cov, std::min(c.gp_grid_depth, c.depth), c.gp_max_points);
    return plan_gp_grid(cov, c.gp_max_points, c.gp_mixture_max_points);
}

// Sup-norm distance between the forest and m over the sup test grid.
class SupEvaluator {
public:
    explicit SupEvaluator(const ExperimentConfig& c)
        : dim_(c.dim), depth_(c.depth), regression_(c.regression) {
        axis_ = sup_grid_axis(c.effective_sup_grid_depth(), c.sup_eps);
        fine_ = static_cast<long>(c.depth) * c.dim <= 22;
        if (fine_) {
            build_cell_ranges();
        } else {
            grid_ = make_sup_grid(c.effective_sup_grid_depth(), c.dim, c.sup_eps);
            fill_grid_values();
        }
    }

    double operator()(const FittedForest& forest) const {
        double worst = 0.0;
        if (fine_) {
            const auto f = forest.predict_fine_cells();
            for (std::size_t i = 0; i < f.size(); ++i) {
                if (!(lo_[i] <= hi_[i])) continue; // no grid point in this cell
                worst = std::max({worst, std::abs(f[i] - lo_[i]), std::abs(f[i] - hi_[i])});
            }
        } else {
            const auto f = forest.predict_many(grid_);
            for (std::size_t i = 0; i < f.size(); ++i) worst = std::max(worst, std::abs(f[i] - m_[i]));
        }
        return worst;
    }

private:
    // Min and max of m over the grid points inside each fine cell. The forest
    // is constant on a cell, so its largest deviation there is attained at one
    // of the two.
    void build_cell_ranges() {
        const auto p = static_cast<std::size_t>(dim_);
        const std::size_t per_axis = axis_.size();
        std::vector<std::uint64_t> codes(per_axis);
        for (std::size_t a = 0; a < per_axis; ++a) codes[a] = dyadic_index(axis_[a], depth_);
        const std::size_t cells = std::size_t{1} << (depth_ * dim_);
        lo_.assign(cells, std::numeric_limits<double>::infinity());
        hi_.assign(cells, -std::numeric_limits<double>::infinity());
        std::vector<std::size_t> pos(p, 0);
        std::vector<double> x(p);
        for (bool done = false; !done;) {
            std::size_t cell = 0;
            for (std::size_t l = 0; l < p; ++l) {
                x[l] = axis_[pos[l]];
                cell = (cell << depth_) | codes[pos[l]];
            }
            const double v = regression_value(regression_, x);
            lo_[cell] = std::min(lo_[cell], v);
            hi_[cell] = std::max(hi_[cell], v);
            done = true;
            for (std::size_t l = p; l-- > 0;) {
                if (++pos[l] < per_axis) {
                    done = false;
                    break;
                }
                pos[l] = 0;
            }
        }
    }

    void fill_grid_values() {
        const auto p = static_cast<std::size_t>(dim_);
        m_.resize(grid_.size() / p);
        for (std::size_t i = 0; i < m_.size(); ++i)
            m_[i] = regression_value(regression_, PointView(grid_.data() + i * p, p));
    }

    int dim_;
    int depth_;
    RegressionId regression_;
    std::vector<double> axis_;
    bool fine_ = true;
    std::vector<double> lo_, hi_;
    std::vector<double> grid_, m_;
};

ForestConfig forest_config(const ExperimentConfig& c, std::size_t rep) {
    return {c.rule, c.depth, c.trees, c.subsample_size, c.mode, derive_seed(c.seed, Stream::Tree, rep)};
}

ReplicationOutcome replicate(const ExperimentConfig& c, std::size_t rep, const SupEvaluator& sup) {
    auto sample = std::make_shared<TrainingSample>(replication_data(c, rep));
    const auto forest = fit_forest(forest_config(c, rep), sample, 1);
    ReplicationOutcome out;
    out.sup_error = sup(forest);
    const double s2 = estimate_sigma2(*sample, c.sigma_estimator, c.effective_bandwidth(), &forest);
    if (!(s2 > 0.0)) fail(ErrorKind::Estimation, "variance estimate is not positive");
    out.sigma_hat = std::sqrt(s2);
    return out;
}

} // namespace

McTables prepare_tables(const ExperimentConfig& config, const std::string& cache_dir, unsigned workers) {
    McTables t;
    const bool cached = !cache_dir.empty();
    if (cached) std::filesystem::create_directories(cache_dir);
    const std::string cov_file = cached ? cache_path(cache_dir, "cov-", table_key(config), ".tbl") : "";
    if (cached && std::filesystem::exists(cov_file)) t.cov = load_cov_table(cov_file);
    // tables cached without min-mass data are rebuilt; same seed, same values
    if (t.cov.min_mass.empty()) {
        t.cov = approximate_covariance(config.rule, config.depth, config.dim, config.cov_pairs, config.table_seed,
                                       workers);
        if (cached) save_cov_table(t.cov, cov_file);
    }
    const GridPlan plan = resolve_grid_plan(config, t.cov);
    const std::string q_file = cached ? cache_path(cache_dir, "q-", quantile_key(config, plan), ".json") : "";
    if (cached && std::filesystem::exists(q_file)) {
        t.quantiles = load_quantiles(q_file);
        return t;
    }
    t.quantiles = gp_quantiles(t.cov, plan, config.n_sup, config.betas,
                               derive_seed(config.table_seed, Stream::Supremum), workers);
    if (cached) save_quantiles(t.quantiles, q_file);
    return t;
}

TrainingSample gen_data(const ExperimentConfig& config, Rng& rng) {
    TrainingSample s;
    s.dim = config.dim;
    const auto p = static_cast<std::size_t>(config.dim);
    s.x.resize(config.n * p);
    s.y.resize(config.n);
    for (std::size_t i = 0; i < config.n; ++i) {
        for (std::size_t l = 0; l < p; ++l) s.x[i * p + l] = uniform01(rng);
        s.y[i] = regression_value(config.regression, s.point(i)) + config.errors.draw(config.sigma, rng);
    }
    return s;
}

TrainingSample replication_data(const ExperimentConfig& config, std::size_t rep) {
    Rng rng = make_rng(config.seed, Stream::Data, rep);
    return gen_data(config, rng);
}

ReplicationOutcome run_replication(const ExperimentConfig& config, std::size_t rep) {
    config.validate();
    return replicate(config, rep, SupEvaluator(config));
}

ExperimentResult run_experiment(const ExperimentConfig& config, const McTables& tables, unsigned workers) {
    config.validate();
    if (tables.cov.depth != config.depth || tables.cov.dim != config.dim || tables.cov.rule.kind != config.rule.kind)
        fail(ErrorKind::Configuration, "covariance table does not match the experiment (kind, k, p)");
    const auto start = std::chrono::steady_clock::now();
    const SupEvaluator sup(config);
    std::vector<ReplicationOutcome> outcomes(config.replications);
    std::vector<std::string> failures(config.replications);
    parallel_for(config.replications, workers, [&](std::size_t rep) {
        try {
            outcomes[rep] = replicate(config, rep, sup);
        } catch (const Error& e) {
            throw Error(e.kind(), "replication " + std::to_string(rep) + ": " + e.what());
        }
    });

    ExperimentResult r;
    r.config = config;
    r.replications = config.replications;
    r.psi = psi_uniform(tables.cov).values.front();
    const double reps = static_cast<double>(config.replications);
    for (double beta : config.betas) {
        const double c = tables.quantiles.quantile(beta);
        std::size_t covered = 0;
        double radius_sum = 0.0;
        for (const auto& o : outcomes) {
            const double radius = band_radius(o.sigma_hat, c, r.psi, config.n);
            radius_sum += radius;
            if (o.sup_error <= radius) ++covered;
        }
        r.critical_values.push_back(c);
        r.coverage.push_back(static_cast<double>(covered) / reps);
        r.mean_radius.push_back(radius_sum / reps);
    }
    for (const auto& o : outcomes) {
        r.mean_sigma_hat += o.sigma_hat / reps;
        r.mean_sup_error += o.sup_error / reps;
    }
    r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return r;
}

ExperimentResult run_experiment(const ExperimentConfig& config, const std::string& cache_dir, unsigned workers) {
    config.validate();
    const auto tables = prepare_tables(config, cache_dir, workers);
    return run_experiment(config, tables, workers);
}

namespace {

template <class T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
    static const char* known[] = {"p", "n", "rn", "r_n", "k", "trees", "N", "kind", "ehr_b", "ehr_delta",
                                  "poisson", "sigma", "distribution", "errors", "regression", "m", "betas",
                                  "replications", "reps", "sigma_estimator", "bandwidth", "cov_pairs",
                                  "n_sup", "gp_grid_depth", "gp_max_points", "gp_mixture_max_points", "table_seed",
                                  "sup_grid_depth",
                                  "sup_eps"};
    if (!j.is_object()) fail(ErrorKind::Parse, "experiment entry must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
            std::end(known))
            fail(ErrorKind::Parse, "unknown experiment key '" + key + "'");
    ExperimentConfig c;
    read_if(j, "p", c.dim);
    read_if(j, "n", c.n);
    read_if(j, "rn", c.subsample_size);
    read_if(j, "r_n", c.subsample_size);
    read_if(j, "k", c.depth);
    read_if(j, "trees", c.trees);
    read_if(j, "N", c.trees);
    if (j.contains("kind")) c.rule.kind = parse_forest_kind(j.at("kind").get<std::string>());
    read_if(j, "ehr_b", c.rule.ehrenfest.particles);
    read_if(j, "ehr_delta", c.rule.ehrenfest.slack);
    if (j.value("poisson", false)) c.mode = SubsampleMode::Poissonized;
    read_if(j, "sigma", c.sigma);
    if (j.contains("distribution")) c.errors = ErrorDistribution::parse(j.at("distribution").get<std::string>());
    if (j.contains("errors")) c.errors = ErrorDistribution::parse(j.at("errors").get<std::string>());
    if (j.contains("regression")) c.regression = parse_regression(j.at("regression").get<std::string>());
    if (j.contains("m")) c.regression = parse_regression(j.at("m").get<std::string>());
    read_if(j, "betas", c.betas);
    read_if(j, "replications", c.replications);
    read_if(j, "reps", c.replications);
    if (j.contains("sigma_estimator"))
        c.sigma_estimator = parse_sigma_estimator(j.at("sigma_estimator").get<std::string>());
    read_if(j, "bandwidth", c.bandwidth);
    read_if(j, "cov_pairs", c.cov_pairs);
    read_if(j, "n_sup", c.n_sup);
    read_if(j, "gp_grid_depth", c.gp_grid_depth);
    read_if(j, "gp_max_points", c.gp_max_points);
    read_if(j, "gp_mixture_max_points", c.gp_mixture_max_points);
    read_if(j, "table_seed", c.table_seed);
    read_if(j, "sup_grid_depth", c.sup_grid_depth);
    read_if(j, "sup_eps", c.sup_eps);
    return c;
}

} // namespace

std::vector<ExperimentConfig> parse_experiment_json(const std::string& text) {
    try {
        const auto j = nlohmann::json::parse(text);
        std::vector<ExperimentConfig> out;
        if (j.is_array()) {
            for (const auto& e : j) out.push_back(config_from_json(e));
        } else if (j.is_object() && j.contains("experiments")) {
            const auto defaults = j.value("defaults", nlohmann::json::object());
            for (const auto& e : j.at("experiments")) {
                auto merged = defaults;
                merged.update(e);
                out.push_back(config_from_json(merged));
            }
        } else {
            out.push_back(config_from_json(j));
        }
        if (out.empty()) fail(ErrorKind::Configuration, "no experiments in configuration");
        return out;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, std::string("experiment JSON: ") + e.what());
    }
}

std::string results_csv_header() {
    return "kind,sigma,N,distribution,beta,coverage,radius,reps,seed,n,k,p,m\n";
}

std::string results_csv_rows(const ExperimentResult& r) {
    std::ostringstream os;
    const auto& c = r.config;
    for (std::size_t b = 0; b < c.betas.size(); ++b)
        os << to_string(c.rule.kind) << ',' << format_double(c.sigma) << ',' << c.trees << ',' << c.errors.name()
           << ',' << format_double(c.betas[b]) << ',' << format_double(r.coverage[b]) << ','
           << format_double(r.mean_radius[b]) << ',' << r.replications << ',' << c.seed << ',' << c.n << ','
           << c.depth << ',' << c.dim << ',' << to_string(c.regression) << '\n';
    return os.str();
}

std::string results_summary(const std::vector<ExperimentResult>& results) {
    std::ostringstream os;
    os << std::left << std::setw(11) << "kind" << std::setw(3) << "p" << std::setw(7) << "n" << std::setw(4) << "k"
       << std::setw(6) << "N" << std::setw(7) << "sigma" << std::setw(9) << "errors" << std::setw(6) << "m"
       << std::setw(8) << "1-beta" << std::setw(10) << "coverage" << "radius\n";
    os << std::fixed << std::setprecision(3);
    for (const auto& r : results) {
        const auto& c = r.config;
        for (std::size_t b = 0; b < c.betas.size(); ++b)
            os << std::setw(11) << to_string(c.rule.kind) << std::setw(3) << c.dim << std::setw(7) << c.n
               << std::setw(4) << c.depth << std::setw(6) << c.trees << std::setw(7) << c.sigma << std::setw(9)
               << c.errors.name() << std::setw(6) << to_string(c.regression) << std::setw(8)
               << 1.0 - c.betas[b] << std::setw(10) << r.coverage[b] << r.mean_radius[b] << '\n';
    }
    return os.str();
}

} // namespace cprf
