#pragma once
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cprf/bands.hpp"
#include "cprf/forest.hpp"
#include "cprf/gpcov.hpp"

// Synthetic regression experiments measuring band coverage.

namespace cprf {

enum class ErrorFamily { Normal, Uniform, StudentT };

/// Noise family; every family is rescaled to standard deviation sigma.
struct ErrorDistribution {
    ErrorFamily family = ErrorFamily::Normal;
    double dof = 0.0; // StudentT only, must exceed 2

    std::string name() const;
    static ErrorDistribution parse(const std::string& s); // normal | uniform | t<dof>
    double draw(double sigma, Rng& rng) const;
};

enum class RegressionId { M2, M4, Zero };

RegressionId parse_regression(const std::string& s);
const char* to_string(RegressionId id) noexcept;

/// m2(x) = (sin 2 pi x1 + x2) / 10, m4 adds x3 x4 inside the bracket, zero is 0.
double regression_value(RegressionId id, PointView x);

struct ExperimentConfig {
    int dim = 2;
    std::size_t n = 2000;
    int subsample_size = 1500;
    int depth = 5;
    int trees = 100;
    SplitRule rule{};
    SubsampleMode mode = SubsampleMode::FixedCount;
    double sigma = 1.0;
    ErrorDistribution errors{};
    RegressionId regression = RegressionId::M2;
    std::vector<double> betas{0.1, 0.05, 0.01};
    std::size_t replications = 1000;
    std::uint64_t seed = 0;

    SigmaEstimator sigma_estimator = SigmaEstimator::ShenKernel;
    double bandwidth = 0.0; // <= 0 means n^(-1/2)

    // Monte-Carlo tables; they depend only on (rule, depth, dim) and these fields.
    std::uint64_t cov_pairs = 50000;
    std::uint64_t n_sup = 100000;
    int gp_grid_depth = -1;    // < 0: chosen from the covariance table
    std::size_t gp_max_points = 4096;
    std::size_t gp_mixture_max_points = 65536;
    std::uint64_t table_seed = 1;

    int sup_grid_depth = -1;   // < 0: depth - 1
    double sup_eps = 0x1p-30;

    void validate() const;
    int effective_sup_grid_depth() const { return sup_grid_depth >= 0 ? sup_grid_depth : std::max(depth - 1, 0); }
    double effective_bandwidth() const {
        return bandwidth > 0.0 ? bandwidth : 1.0 / std::sqrt(static_cast<double>(n));
    }
};

struct McTables {
    CovTable cov;
    GpQuantiles quantiles;
};

/// Builds (or loads from `cache_dir`, if non-empty) the covariance table and
/// supremum quantiles. Cache files are keyed by a hash of every parameter
/// that affects them.
McTables prepare_tables(const ExperimentConfig& config, const std::string& cache_dir = "", unsigned workers = 0);

struct ExperimentResult {
    ExperimentConfig config;
    std::vector<double> coverage;
    std::vector<double> mean_radius;
    std::vector<double> critical_values;
    std::size_t replications = 0;
    double psi = 0.0;
    double mean_sigma_hat = 0.0;
    double mean_sup_error = 0.0;
    double wall_seconds = 0.0;
};

/// Covariates uniform on [0,1]^p, Y = m(X) + eps.
TrainingSample gen_data(const ExperimentConfig& config, Rng& rng);

/// Training sample of replication `rep`; depends on (seed, rep) and the data
/// parameters only, so forest kinds compare on identical samples.
TrainingSample replication_data(const ExperimentConfig& config, std::size_t rep);

/// Per-replication outcome, exposed for diagnostics and tests.
struct ReplicationOutcome {
    double sup_error = 0.0;
    double sigma_hat = 0.0;
};

ReplicationOutcome run_replication(const ExperimentConfig& config, std::size_t rep);

ExperimentResult run_experiment(const ExperimentConfig& config, const McTables& tables, unsigned workers = 0);
ExperimentResult run_experiment(const ExperimentConfig& config, const std::string& cache_dir = "",
                                unsigned workers = 0);

/// Accepts one experiment object, an array of them, or
/// {"defaults": {...}, "experiments": [{...}, ...]}.
std::vector<ExperimentConfig> parse_experiment_json(const std::string& text);

std::string results_csv_header();
std::string results_csv_rows(const ExperimentResult& result);
std::string results_summary(const std::vector<ExperimentResult>& results);

} // namespace cprf
