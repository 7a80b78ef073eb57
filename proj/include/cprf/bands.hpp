#pragma once
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cprf/forest.hpp"
#include "cprf/gpcov.hpp"

namespace cprf {

enum class PsiMode { UniformClosedForm, Empirical };

/// Asymptotic variance factor Psi_k: one constant for uniform covariates, or
/// one value per evaluation point.
struct PsiEstimate {
    PsiMode mode = PsiMode::UniformClosedForm;
    std::vector<double> values;
    /// Empirical mode: number of (point, draw) pairs whose cell held no covariate.
    std::uint64_t empty_cells = 0;

    bool constant() const noexcept { return values.size() == 1; }
    double at(std::size_t i) const { return constant() ? values.front() : values.at(i); }
};

/// Psi = 4^k * v_cap.
PsiEstimate psi_uniform(const CovTable& table);

/// Monte-Carlo Psi at each point of `points` (row-major) from n_omega branch
/// draws and the empirical covariate distribution. Cell probabilities are
/// floored at 1/n.
PsiEstimate psi_empirical(std::span<const double> points, const TrainingSample& covariates,
                          const SplitRule& rule, int depth, std::uint64_t n_omega, std::uint64_t seed);

/// Covariance of the limiting process for a general covariate density,
/// using the same empirical kernel estimate as psi_empirical.
Eigen::MatrixXd empirical_covariance_matrix(std::span<const double> points, const TrainingSample& covariates,
                                            const SplitRule& rule, int depth, std::uint64_t n_omega,
                                            std::uint64_t seed);

enum class SigmaEstimator { ShenKernel, Residual };

SigmaEstimator parse_sigma_estimator(const std::string& s);

/// Kernel-weighted difference estimator of the noise variance:
/// sum_{i<j} w_ij (Y_i - Y_j)^2 / 2 / sum_{i<j} w_ij, w_ij = exp(-|X_i - X_j|^2 / (2 h^2)).
double sigma2_shen(const TrainingSample& sample, double bandwidth);

/// Mean squared in-sample residual of a fitted forest.
double sigma2_residual(const FittedForest& forest);

double estimate_sigma2(const TrainingSample& sample, SigmaEstimator estimator, double bandwidth,
                       const FittedForest* forest = nullptr);

struct BandMeta {
    int depth = 0;
    std::size_t n = 0;
    int subsample_size = 0;
    std::size_t trees = 0;
    std::string kind;
    std::uint64_t seed = 0;
};

struct ConfidenceBand {
    int dim = 1;
    std::vector<double> points;
    std::vector<double> center;
    std::vector<double> radius;
    std::vector<double> psi;
    double beta = 0.05;
    double sigma_hat = 0.0;
    double critical_value = 0.0;
    BandMeta meta;

    std::size_t size() const noexcept { return center.size(); }
    PointView point(std::size_t i) const {
        return {points.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    double lower(std::size_t i) const { return center[i] - radius[i]; }
    double upper(std::size_t i) const { return center[i] + radius[i]; }
};

/// Band radius sigma * c * sqrt(psi / n).
double band_radius(double sigma_hat, double critical_value, double psi, std::size_t n);

ConfidenceBand build_band(const FittedForest& forest, const PsiEstimate& psi, const GpQuantiles& quantiles,
                          double sigma_hat, double beta, std::span<const double> points);

void write_band_csv(const ConfidenceBand& band, const std::string& path);

/// Per-axis test coordinates {a 2^-k +- eps : a = 1..2^k - 1} U {eps, 1 - eps}, sorted.
std::vector<double> sup_grid_axis(int depth, double eps = 0x1p-30);

/// Tensor product of sup_grid_axis over `dim` axes (row-major, last axis fastest).
std::vector<double> make_sup_grid(int depth, int dim, double eps = 0x1p-30);

using RegressionFunction = std::function<double(PointView)>;

/// Largest |center - m| over the band's points.
double sup_error(const ConfidenceBand& band, const RegressionFunction& m);

/// True iff |center(x) - m(x)| <= radius(x) at every band point.
bool check_coverage(const ConfidenceBand& band, const RegressionFunction& m);

} // namespace cprf
