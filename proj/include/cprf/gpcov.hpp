#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cprf/forest.hpp"
#include "cprf/partition.hpp"

// Monte-Carlo covariance of the limiting Gaussian process for uniformly
// distributed covariates, and quantiles of its supremum on a dyadic grid.

namespace cprf {

/// Normalized expected intersection volumes, one per sorted closeness vector.
struct CovTable {
    SplitRule rule{};
    int depth = 0;
    int dim = 1;
    std::uint64_t pairs = 0;
    std::uint64_t seed = 0;
    /// Estimated expected intersection volume of two independent cells
    /// containing the same point.
    double v_cap = 0.0;
    /// values[rank(c)] estimates E[V(c, S1, S2)] / v_cap, rank as in ClosenessIndex.
    std::vector<double> values;
    /// min_mass[rank(m)] estimates E[2^{-sum max(S1,S2)} 1{sorted min(S1,S2) = m}].
    /// Empty for tables read from version-1 files.
    std::vector<double> min_mass;
    std::uint64_t fallback_moves = 0;

    ClosenessIndex index() const { return ClosenessIndex(depth, dim); }
    double value(std::span<const int> closeness) const;
};

/// Runs `pairs` iterations of: draw two independent split-count vectors and
/// accumulate 2^-sum max(S1,S2) * prod 1{min(S1_l,S2_l) <= c_l} for every
/// sorted closeness vector c. Pairs are processed in fixed-size chunks with
/// their own streams and merged in chunk order.
CovTable approximate_covariance(const SplitRule& rule, int depth, int dim, std::uint64_t pairs,
                                std::uint64_t seed, unsigned workers = 0);

void save_cov_table(const CovTable& table, const std::string& path);
CovTable load_cov_table(const std::string& path);

/// Midpoints of the level-`depth` dyadic cells of [0,1]^dim (row-major; the
/// last axis varies fastest).
struct EvalGrid {
    int depth = 0;
    int dim = 1;
    std::vector<double> points;

    std::size_t size() const noexcept { return points.size() / static_cast<std::size_t>(dim); }
    PointView point(std::size_t i) const {
        return {points.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
};

EvalGrid make_eval_grid(int depth, int dim, std::size_t max_points = 8192);

/// Entry (i, j) is the table value at the sorted closeness of grid points i, j.
Eigen::MatrixXd covariance_matrix(const CovTable& table, const EvalGrid& grid);

struct PsdFactor {
    Eigen::MatrixXd lower;
    bool eigen_repaired = false;
    int clamped_eigenvalues = 0;
    double min_eigenvalue = 0.0;
};

/// Cholesky of M + jitter I; if that fails, eigenvalues below eig_floor are
/// raised to eig_floor and the reconstruction is factored instead.
PsdFactor psd_repair(const Eigen::MatrixXd& m, double jitter = 1e-10, double eig_floor = 1e-10);

struct GpQuantiles {
    std::vector<double> betas;
    std::vector<double> quantiles;
    std::uint64_t n_sup = 0;
    int grid_depth = 0;
    std::uint64_t seed = 0;
    // provenance
    std::string kind;
    std::string sampler = "cholesky";
    int depth = 0;
    int dim = 0;
    double v_cap = 0.0;

    /// Critical value for level beta; throws if beta was not simulated.
    double quantile(double beta) const;
};

/// Order statistic at rank ceil((1 - beta) n) of the sorted sample.
double upper_quantile(std::vector<double> sorted_or_not, double beta);

/// Simulates n_sup suprema max_i |(L Z)_i| with Z standard normal and returns
/// the (1 - beta) empirical quantiles. Deterministic in (L, n_sup, seed).
GpQuantiles simulate_sup_quantiles(const Eigen::MatrixXd& lower, std::uint64_t n_sup,
                                   std::vector<double> betas, std::uint64_t seed, unsigned workers = 0);

/// Raw suprema, in simulation order.
std::vector<double> simulate_suprema(const Eigen::MatrixXd& lower, std::uint64_t n_sup, std::uint64_t seed,
                                     unsigned workers = 0);

/// One independent block-constant field of the mixture representation:
/// axis l is cut into 2^levels[l] blocks and each block gets scale * N(0,1).
struct MixtureTerm {
    std::vector<int> levels;
    double scale = 0.0;
};

/// The covariance is an increasing function of the closeness vector, a
/// nonnegative mixture over per-axis min levels m of prod_l 1{c_l >= m_l}.
/// On the level-`depth` midpoint grid levels above `depth` merge; terms are
/// returned in lexicographic order of their levels. Needs min_mass.
std::vector<MixtureTerm> mixture_terms(const CovTable& table, int depth);

/// Covariance of the mixture field on the level-`depth` grid (exact for the
/// terms; matches covariance_matrix up to Monte-Carlo noise).
Eigen::MatrixXd mixture_covariance_matrix(const CovTable& table, int depth);

/// Suprema of the mixture field on the level-`depth` grid. Cost per draw is
/// about (depth + 1) 2^(depth p), so grids far beyond the reach of a dense
/// Cholesky factor stay usable. Deterministic in (table, depth, n_sup, seed).
std::vector<double> simulate_suprema_mixture(const CovTable& table, int depth, std::uint64_t n_sup,
                                             std::uint64_t seed, unsigned workers = 0);
GpQuantiles simulate_sup_quantiles_mixture(const CovTable& table, int depth, std::uint64_t n_sup,
                                           std::vector<double> betas, std::uint64_t seed, unsigned workers = 0);

void save_quantiles(const GpQuantiles& q, const std::string& path);
GpQuantiles load_quantiles(const std::string& path);

/// Smallest level c in {0..k} whose diagonal entry C((c,...,c)) is at least
/// 1 - tol, i.e. the coarsest grid whose cells are (numerically) never split.
int detect_undividable_resolution(const CovTable& table, double tol = 1e-3);

/// Grid depth used by default for the supremum simulation: the undividable
/// level, reduced until the grid has at most max_points points.
int choose_grid_depth(const CovTable& table, std::size_t max_points = 4096, double tol = 1e-3);

enum class GpSampler { Cholesky, Mixture };
const char* to_string(GpSampler s) noexcept;
GpSampler parse_gp_sampler(const std::string& s);

struct GridPlan {
    int depth = 0;
    GpSampler sampler = GpSampler::Cholesky;
};

/// Cholesky on choose_grid_depth(cholesky_max) when that reaches the
/// undividable level; otherwise the mixture sampler on the undividable level
/// reduced to at most mixture_max points, if that is finer.
GridPlan plan_gp_grid(const CovTable& table, std::size_t cholesky_max = 4096, std::size_t mixture_max = 65536,
                      double tol = 1e-3);

/// Sampler for an explicitly requested depth: Cholesky up to cholesky_max points.
GridPlan plan_gp_grid_at(const CovTable& table, int depth, std::size_t cholesky_max = 4096);

/// Supremum quantiles under a plan; fills grid_depth, sampler and provenance.
GpQuantiles gp_quantiles(const CovTable& table, const GridPlan& plan, std::uint64_t n_sup,
                         std::vector<double> betas, std::uint64_t seed, unsigned workers = 0);

} // namespace cprf
