#include "cprf/bands.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cprf/error.hpp"
#include "cprf/io.hpp"

namespace cprf {

PsiEstimate psi_uniform(const CovTable& table) {
    if (!(table.v_cap > 0.0)) fail(ErrorKind::Estimation, "covariance table has no positive intersection volume");
    PsiEstimate out;
    out.mode = PsiMode::UniformClosedForm;
    out.values = {std::ldexp(table.v_cap, 2 * table.depth)};
    return out;
}

namespace {

// Kernel estimate K(x0, X_i) for every covariate, summed over n_omega branch
// draws (divide by n_omega for the mean).
std::vector<double> kernel_row(PointView x0, const std::vector<std::uint64_t>& codes, std::size_t n, int dim,
                               const SplitRule& rule, int depth, std::uint64_t n_omega, Rng& rng,
                               std::uint64_t& empty_cells) {
    const auto p = static_cast<std::size_t>(dim);
    std::vector<std::uint64_t> x0_codes(p);
    for (std::size_t l = 0; l < p; ++l) x0_codes[l] = dyadic_index(x0[l], depth);
    std::vector<double> k_row(n, 0.0);
    std::vector<std::uint32_t> members;
    members.reserve(n);
    for (std::uint64_t w = 0; w < n_omega; ++w) {
        const auto s = tally(rule.sample_branch(depth, dim, rng));
        members.clear();
        for (std::size_t i = 0; i < n; ++i) {
            bool inside = true;
            for (std::size_t l = 0; l < p && inside; ++l) {
                const int shift = depth - s.counts[l];
                inside = (codes[i * p + l] >> shift) == (x0_codes[l] >> shift);
            }
            if (inside) members.push_back(static_cast<std::uint32_t>(i));
        }
        if (members.empty()) {
            ++empty_cells;
            continue;
        }
        const double prob = static_cast<double>(members.size()) / static_cast<double>(n);
        const double weight = 1.0 / std::max(prob, 1.0 / static_cast<double>(n));
        for (auto i : members) k_row[i] += weight;
    }
    for (auto& v : k_row) v /= static_cast<double>(n_omega);
    return k_row;
}

void check_psi_inputs(std::span<const double> points, const TrainingSample& covariates, std::uint64_t n_omega) {
    covariates.validate();
    if (covariates.size() == 0) fail(ErrorKind::Estimation, "psi_empirical: no covariates");
    if (n_omega < 1) fail(ErrorKind::Configuration, "psi_empirical: need at least one branch draw");
    if (points.size() % static_cast<std::size_t>(covariates.dim) != 0)
        fail(ErrorKind::Shape, "point block is not a multiple of the dimension");
    check_unit_point(points);
}

} // namespace

PsiEstimate psi_empirical(std::span<const double> points, const TrainingSample& covariates, const SplitRule& rule,
                          int depth, std::uint64_t n_omega, std::uint64_t seed) {
    check_psi_inputs(points, covariates, n_omega);
    rule.validate(covariates.dim);
    const auto p = static_cast<std::size_t>(covariates.dim);
    const std::size_t n = covariates.size();
    const auto codes = dyadic_codes(covariates.x, depth);
    PsiEstimate out;
    out.mode = PsiMode::Empirical;
    const std::size_t count = points.size() / p;
    for (std::size_t g = 0; g < count; ++g) {
        Rng rng = make_rng(seed, Stream::Psi, g);
        const auto row = kernel_row(points.subspan(g * p, p), codes, n, covariates.dim, rule, depth, n_omega, rng,
                                    out.empty_cells);
        double sq = 0.0;
        for (double v : row) sq += v * v;
        const double psi = sq / static_cast<double>(n);
        if (!(psi > 0.0))
            fail(ErrorKind::Estimation, "psi_empirical: every sampled cell around point " + std::to_string(g) +
                                            " is empty");
        out.values.push_back(psi);
    }
    return out;
}

Eigen::MatrixXd empirical_covariance_matrix(std::span<const double> points, const TrainingSample& covariates,
                                            const SplitRule& rule, int depth, std::uint64_t n_omega,
                                            std::uint64_t seed) {
    check_psi_inputs(points, covariates, n_omega);
    rule.validate(covariates.dim);
    const auto p = static_cast<std::size_t>(covariates.dim);
    const std::size_t n = covariates.size();
    const std::size_t count = points.size() / p;
    const auto codes = dyadic_codes(covariates.x, depth);
    Eigen::MatrixXd kernel(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(n));
    std::uint64_t empty = 0;
    for (std::size_t g = 0; g < count; ++g) {
        Rng rng = make_rng(seed, Stream::Psi, g);
        const auto row = kernel_row(points.subspan(g * p, p), codes, n, covariates.dim, rule, depth, n_omega, rng,
                                    empty);
        for (std::size_t i = 0; i < n; ++i)
            kernel(static_cast<Eigen::Index>(g), static_cast<Eigen::Index>(i)) = row[i];
    }
    Eigen::MatrixXd second = kernel * kernel.transpose() / static_cast<double>(n);
    const Eigen::VectorXd diag = second.diagonal();
    if ((diag.array() <= 0.0).any()) fail(ErrorKind::Estimation, "empirical covariance: zero variance at a point");
    const Eigen::VectorXd inv_sd = diag.array().rsqrt();
    return inv_sd.asDiagonal() * second * inv_sd.asDiagonal();
}

SigmaEstimator parse_sigma_estimator(const std::string& s) {
    if (s == "shen" || s == "shen-kernel") return SigmaEstimator::ShenKernel;
    if (s == "residual") return SigmaEstimator::Residual;
    fail(ErrorKind::Configuration, "unknown sigma estimator '" + s + "' (expected shen|residual)");
}

double sigma2_shen(const TrainingSample& sample, double bandwidth) {
    if (sample.size() < 2) fail(ErrorKind::Estimation, "variance estimation needs at least two observations");
    if (!(bandwidth > 0.0)) fail(ErrorKind::Configuration, "bandwidth must be positive");
    const auto p = static_cast<std::size_t>(sample.dim);
    const std::size_t n = sample.size();
    const double inv_two_h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    // exp(-x) is exactly zero in double for x beyond ~745.2
    constexpr double kUnderflow = 746.0;
    const double* x = sample.x.data();
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double* xi = x + i * p;
        double row_num = 0.0;
        double row_den = 0.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            const double* xj = x + j * p;
            double d2 = 0.0;
            for (std::size_t l = 0; l < p; ++l) {
                const double diff = xi[l] - xj[l];
                d2 += diff * diff;
            }
            const double arg = d2 * inv_two_h2;
            if (arg > kUnderflow) continue;
            const double w = std::exp(-arg);
            const double dy = sample.y[i] - sample.y[j];
            row_num += w * dy * dy;
            row_den += w;
        }
        num += row_num;
        den += row_den;
    }
    if (!(den > 0.0)) fail(ErrorKind::Estimation, "all kernel weights vanish; increase the bandwidth");
    return 0.5 * num / den;
}

double sigma2_residual(const FittedForest& forest) {
    const auto& s = forest.sample();
    if (s.size() < 2) fail(ErrorKind::Estimation, "variance estimation needs at least two observations");
    double sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double r = s.y[i] - forest.predict(s.point(i));
        sum += r * r;
    }
    return sum / static_cast<double>(s.size());
}

double estimate_sigma2(const TrainingSample& sample, SigmaEstimator estimator, double bandwidth,
                       const FittedForest* forest) {
    if (estimator == SigmaEstimator::ShenKernel) return sigma2_shen(sample, bandwidth);
    if (!forest) fail(ErrorKind::Configuration, "residual variance estimator needs a fitted forest");
    return sigma2_residual(*forest);
}

double band_radius(double sigma_hat, double critical_value, double psi, std::size_t n) {
    return sigma_hat * critical_value * std::sqrt(psi / static_cast<double>(n));
}

ConfidenceBand build_band(const FittedForest& forest, const PsiEstimate& psi, const GpQuantiles& quantiles,
                          double sigma_hat, double beta, std::span<const double> points) {
    if (!(sigma_hat >= 0.0) || !std::isfinite(sigma_hat))
        fail(ErrorKind::Estimation, "sigma estimate must be finite and nonnegative");
    const int dim = forest.sample().dim;
    const double c = quantiles.quantile(beta);
    ConfidenceBand band;
    band.dim = dim;
    band.points.assign(points.begin(), points.end());
    band.center = forest.predict_many(points);
    if (!psi.constant() && psi.values.size() != band.center.size())
        fail(ErrorKind::Shape, "psi has one value per point but the point count differs");
    band.beta = beta;
    band.sigma_hat = sigma_hat;
    band.critical_value = c;
    const std::size_t n = forest.sample().size();
    band.radius.resize(band.center.size());
    band.psi.resize(band.center.size());
    for (std::size_t i = 0; i < band.center.size(); ++i) {
        band.psi[i] = psi.at(i);
        band.radius[i] = band_radius(sigma_hat, c, band.psi[i], n);
    }
    const auto& cfg = forest.config();
    band.meta = {cfg.depth, n, cfg.subsample_size, forest.tree_count(), to_string(cfg.rule.kind), cfg.seed};
    return band;
}

void write_band_csv(const ConfidenceBand& band, const std::string& path) {
    std::ostringstream os;
    os << "# k=" << band.meta.depth << '\n'
       << "# n=" << band.meta.n << '\n'
       << "# r_n=" << band.meta.subsample_size << '\n'
       << "# N=" << band.meta.trees << '\n'
       << "# kind=" << band.meta.kind << '\n'
       << "# beta=" << format_double(band.beta) << '\n'
       << "# sigma_hat=" << format_double(band.sigma_hat) << '\n'
       << "# c_k=" << format_double(band.critical_value) << '\n'
       << "# seed=" << band.meta.seed << '\n';
    for (int l = 0; l < band.dim; ++l) os << 'x' << (l + 1) << ',';
    os << "estimate,lower,upper,psi,radius\n";
    for (std::size_t i = 0; i < band.size(); ++i) {
        for (double v : band.point(i)) os << format_double(v) << ',';
        os << format_double(band.center[i]) << ',' << format_double(band.lower(i)) << ','
           << format_double(band.upper(i)) << ',' << format_double(band.psi[i]) << ','
           << format_double(band.radius[i]) << '\n';
    }
    write_file_atomic(path, os.str());
}

std::vector<double> sup_grid_axis(int depth, double eps) {
    if (depth < 0 || depth > 24) fail(ErrorKind::Configuration, "sup grid depth must be in [0, 24]");
    if (!(eps > 0.0 && eps < std::ldexp(1.0, -depth - 1)))
        fail(ErrorKind::Configuration, "sup grid epsilon must lie in (0, 2^-(k+1))");
    std::vector<double> axis{eps};
    const std::uint64_t cells = std::uint64_t{1} << depth;
    for (std::uint64_t a = 1; a < cells; ++a) {
        const double knot = std::ldexp(static_cast<double>(a), -depth);
        axis.push_back(knot - eps);
        axis.push_back(knot + eps);
    }
    axis.push_back(1.0 - eps);
    return axis;
}

std::vector<double> make_sup_grid(int depth, int dim, double eps) {
    if (dim < 1) fail(ErrorKind::InvalidDimension, "grid dimension must be >= 1");
    const auto axis = sup_grid_axis(depth, eps);
    const std::size_t m = axis.size();
    std::size_t count = 1;
    for (int l = 0; l < dim; ++l) {
        if (count > (std::size_t{1} << 26) / m) fail(ErrorKind::Resource, "sup grid too large");
        count *= m;
    }
    const auto p = static_cast<std::size_t>(dim);
    std::vector<double> out(count * p);
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t rest = i;
        for (std::size_t l = p; l-- > 0;) {
            out[i * p + l] = axis[rest % m];
            rest /= m;
        }
    }
    return out;
}

double sup_error(const ConfidenceBand& band, const RegressionFunction& m) {
    double worst = 0.0;
    for (std::size_t i = 0; i < band.size(); ++i) worst = std::max(worst, std::abs(band.center[i] - m(band.point(i))));
    return worst;
}

bool check_coverage(const ConfidenceBand& band, const RegressionFunction& m) {
    for (std::size_t i = 0; i < band.size(); ++i)
        if (!(std::abs(band.center[i] - m(band.point(i))) <= band.radius[i])) return false;
    return true;
}

} // namespace cprf
