// Acceptance suite: one PASS/FAIL line per criterion. Usage:
//   cprf_acceptance [--fast] [--only N[,M...]] [--cache-dir DIR] [--workers W]
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cprf/bands.hpp"
#include "cprf/forest.hpp"
#include "cprf/gpcov.hpp"
#include "cprf/parallel.hpp"
#include "cprf/partition.hpp"
#include "cprf/simlab.hpp"
#include "oracles.hpp"

using namespace cprf;

namespace {

struct Options {
    bool fast = false;
    std::string cache_dir = "acceptance_cache";
    unsigned workers = 0;
};

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << "[violated: " << what << "] ";
        }
    }
};

std::string fmt(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

ExperimentConfig table1_config(ForestKind kind) {
    ExperimentConfig c;
    c.dim = 2;
    c.n = 2000;
    c.subsample_size = 1500;
    c.depth = 5;
    c.trees = 100;
    c.sigma = 1.0;
    c.rule = kind == ForestKind::Ehrenfest ? SplitRule::ehrenfest_rule(12, 7.0) : SplitRule::uniform();
    c.seed = 20240611;
    return c;
}

// ---- 1 ----------------------------------------------------------------------
void criterion1(const Options& o, Outcome& out) {
    const std::size_t reps = o.fast ? 200 : 1000;
    const double cov_tol = o.fast ? 0.08 : 0.05;
    const double rad_tol = 0.015;
    struct Target {
        ForestKind kind;
        double coverage[3];
        double radius[3];
    };
    const Target targets[] = {
        {ForestKind::Uniform, {.748, .870, .965}, {.304, .324, .363}},
        {ForestKind::Ehrenfest, {.754, .866, .966}, {.314, .336, .377}},
    };
    out.detail << "reps=" << reps << " ";
    for (const auto& t : targets) {
        auto c = table1_config(t.kind);
        c.replications = reps;
        const auto r = run_experiment(c, o.cache_dir, o.workers);
        out.detail << to_string(t.kind) << ": coverage";
        for (int b = 0; b < 3; ++b) {
            out.detail << ' ' << fmt(r.coverage[b]) << "(" << fmt(t.coverage[b]) << ")";
            out.require(std::abs(r.coverage[b] - t.coverage[b]) <= cov_tol, "coverage tolerance");
        }
        out.detail << " radius";
        for (int b = 0; b < 3; ++b) {
            out.detail << ' ' << fmt(r.mean_radius[b]) << "(" << fmt(t.radius[b]) << ")";
            out.require(std::abs(r.mean_radius[b] - t.radius[b]) <= rad_tol, "radius tolerance");
        }
        out.detail << "; ";
    }
}

// ---- 2 ----------------------------------------------------------------------
void criterion2(const Options& o, Outcome& out) {
    for (auto kind : {ForestKind::Uniform, ForestKind::Ehrenfest}) {
        double cov90[2];
        int i = 0;
        for (std::size_t n : {1000u, 8000u}) {
            auto c = table1_config(kind);
            c.n = n;
            c.subsample_size = static_cast<int>(3 * n / 4);
            // n = 1000 sits about two standard errors above its threshold at
            // 300 replications, so it gets the full 1000
            c.replications = n == 1000 ? 1000 : 300;
            cov90[i++] = run_experiment(c, o.cache_dir, o.workers).coverage[0];
        }
        out.detail << to_string(kind) << ": cov90(n=1000)=" << fmt(cov90[0]) << " cov90(n=8000)=" << fmt(cov90[1])
                   << "; ";
        out.require(cov90[0] > 0.75, "coverage at n=1000 above 0.75");
        out.require(cov90[1] < 0.60, "coverage at n=8000 below 0.60");
    }
}

// ---- 3 ----------------------------------------------------------------------
void criterion3(const Options& o, Outcome& out) {
    for (auto kind : {ForestKind::Uniform, ForestKind::Ehrenfest}) {
        auto base = table1_config(kind);
        base.sigma = 0.5;
        base.trees = 50;
        // a coverage difference carries about 0.03 standard error at 300 replications
        base.replications = o.fast ? 300 : 1000;
        auto p4 = base;
        p4.dim = 4;
        p4.regression = RegressionId::M4;
        const auto r4 = run_experiment(p4, o.cache_dir, o.workers);
        auto p4zero = p4;
        p4zero.regression = RegressionId::Zero;
        const auto z4 = run_experiment(p4zero, o.cache_dir, o.workers);
        auto p2zero = base;
        p2zero.regression = RegressionId::Zero;
        const auto z2 = run_experiment(p2zero, o.cache_dir, o.workers);
        out.detail << to_string(kind) << ": p4 m4 cov90=" << fmt(r4.coverage[0]) << " zero p4/p2 cov";
        out.require(r4.coverage[0] < 0.05, "p=4 coverage below 0.05");
        for (int b = 0; b < 3; ++b) {
            out.detail << ' ' << fmt(z4.coverage[b]) << '/' << fmt(z2.coverage[b]);
            out.require(std::abs(z4.coverage[b] - z2.coverage[b]) <= 0.08, "m=0 coverage p=4 vs p=2");
        }
        out.detail << "; ";
    }
}

// ---- 4 ----------------------------------------------------------------------
void criterion4(const Options&, Outcome& out) {
    Rng rng(4);
    double worst = 0.0;
    int positive = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const int p = 1 + static_cast<int>(rng() % 4);
        const int k = static_cast<int>(rng() % 16);
        const auto s1 = tally(sample_uniform_splits(k, p, rng));
        const auto s2 = tally(sample_uniform_splits(k, p, rng));
        std::vector<double> a(p), b(p);
        for (int l = 0; l < p; ++l) {
            a[l] = uniform01(rng);
            b[l] = (rng() % 3 == 0) ? uniform01(rng) : std::min(1.0, std::max(0.0, a[l] + 0.05 * (uniform01(rng) - 0.5)));
        }
        const double v = intersection_volume(a, s1, b, s2);
        if (v > 0) ++positive;
        worst = std::max(worst, std::abs(v - oracle::intersection_volume(a, s1.counts, b, s2.counts)));
    }
    out.detail << "cases=10000 nonzero=" << positive << " max_abs_diff=" << worst;
    out.require(worst <= 1e-12, "oracle agreement");
}

// ---- 5 ----------------------------------------------------------------------
void criterion5(const Options& o, Outcome& out) {
    const std::uint64_t pairs = 1000000;
    const auto t = approximate_covariance(SplitRule::uniform(), 1, 2, pairs, 5, o.workers);
    // Enumeration: the two branches agree w.p. 1/2 (volume 1/2), else volume 1/4.
    const double exact = 0.5 * 0.5 + 0.5 * 0.25;
    const double se = std::sqrt(0.5 * 0.25 + 0.5 * 0.0625 - exact * exact) / std::sqrt(double(pairs));
    out.detail << "V(k=1,p=2)=" << fmt(t.v_cap, 6) << " exact=" << exact << " z=" << fmt((t.v_cap - exact) / se, 2);
    out.require(std::abs(t.v_cap - exact) <= 3 * se, "within 3 standard errors");
    int checked = 0;
    for (auto rule : {SplitRule::uniform(), SplitRule::ehrenfest_rule(12, 7.0), SplitRule::ehrenfest_rule(1, 1.01)})
        for (int p : {1, 2, 3, 4})
            for (int k : {0, 1, 3, 5, 8}) {
                if (rule.kind == ForestKind::Ehrenfest && p > 1 && !(rule.ehrenfest.slack > double(rule.ehrenfest.particles) / p))
                    continue;
                const auto tk = approximate_covariance(rule, k, p, 20000, 7, o.workers);
                ++checked;
                out.require(tk.v_cap >= std::ldexp(1.0, -2 * k) && tk.v_cap <= std::ldexp(1.0, -k),
                            "hard bounds for " + std::string(to_string(rule.kind)) + " k=" + std::to_string(k) +
                                " p=" + std::to_string(p));
            }
    out.detail << " bounds_checked=" << checked;
}

// ---- 6 ----------------------------------------------------------------------
void criterion6(const Options& o, Outcome& out) {
    struct Case {
        int p, b;
        double delta;
    };
    for (const Case& cs : {Case{2, 12, 7.0}, Case{4, 12, 7.0}, Case{2, 1, 1.01}}) {
        const EhrenfestConfig cfg{cs.b, cs.delta};
        const double c1 = cfg.upper_excess(cs.p), c2 = cfg.lower_deficit(cs.p);
        Rng rng(derive_seed(6, Stream::Tree, static_cast<std::uint64_t>(cs.p * 100 + cs.b)));
        std::uint64_t fallback = 0;
        double worst_excess = -1e9, worst_deficit = -1e9;
        bool ok = true;
        for (int k : {5, 20}) {
            const double center = double(k) / cs.p;
            for (int i = 0; i < 100000; ++i) {
                const auto s = tally(sample_ehrenfest_splits(k, cs.p, cfg, rng, &fallback));
                ok = ok && s.depth() == k;
                for (int l = 0; l < cs.p; ++l) {
                    worst_excess = std::max(worst_excess, s[l] - center);
                    worst_deficit = std::max(worst_deficit, center - s[l]);
                }
            }
        }
        out.require(ok, "split counts sum to k");
        out.require(worst_excess <= c1 && worst_deficit <= c2, "Prop. bounds on split counts");
        const int k = 5;
        const auto t = approximate_covariance(SplitRule::ehrenfest_rule(cs.b, cs.delta), k, cs.p, 50000, 6, o.workers);
        const double scaled = t.v_cap * std::ldexp(1.0, k);
        const double lower = std::pow(2.0, -cs.p * (c1 + c2) / 2.0);
        out.require(scaled > lower && scaled <= 1.0, "V*2^k range");
        out.detail << "(p=" << cs.p << ",B=" << cs.b << ",D=" << cs.delta << "): max excess " << worst_excess
                   << "<=" << c1 << " max deficit " << worst_deficit << "<=" << c2 << " V*2^k=" << fmt(scaled, 4)
                   << " fallback=" << fallback << "; ";
    }
}

// ---- 7 ----------------------------------------------------------------------
void criterion7(const Options& o, Outcome& out) {
    const std::vector<double> betas{0.1, 0.05, 0.01};
    const auto q = simulate_sup_quantiles(Eigen::MatrixXd::Identity(1, 1), 100000, betas, 7, o.workers);
    const double target[] = {1.645, 1.960, 2.576};
    out.detail << "half-normal";
    for (int b = 0; b < 3; ++b) {
        out.detail << ' ' << fmt(q.quantiles[b]);
        out.require(std::abs(q.quantiles[b] - target[b]) <= 0.02, "half-normal quantile");
    }
    for (auto kind : {ForestKind::Uniform, ForestKind::Ehrenfest}) {
        auto c = table1_config(kind);
        const auto tables = prepare_tables(c, o.cache_dir, o.workers);
        const auto& qs = tables.quantiles.quantiles;
        out.require(qs[0] < qs[1] && qs[1] < qs[2], "quantiles decrease in beta");
        const auto m = covariance_matrix(tables.cov, make_eval_grid(tables.quantiles.grid_depth, c.dim));
        std::set<double> distinct;
        bool unit = true;
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            unit = unit && m(i, i) == 1.0;
            for (Eigen::Index j = 0; j < m.cols(); ++j) distinct.insert(m(i, j));
        }
        out.require(unit, "unit diagonal");
        out.require(distinct.size() <= binomial(c.depth + c.dim, c.dim), "distinct entries");
        out.detail << "; " << to_string(kind) << ": c=" << fmt(qs[0]) << ',' << fmt(qs[1]) << ',' << fmt(qs[2])
                   << " distinct=" << distinct.size() << "<=" << binomial(c.depth + c.dim, c.dim);
    }
}

// ---- 8 ----------------------------------------------------------------------
void criterion8(const Options& o, Outcome& out) {
    auto c = table1_config(ForestKind::Uniform);
    c.regression = RegressionId::Zero;
    const auto tables = prepare_tables(c, o.cache_dir, o.workers);
    const std::size_t fits = 2000;
    const std::vector<double> x0{0.51, 0.51};
    std::vector<double> values(fits);
    parallel_for(fits, o.workers, [&](std::size_t rep) {
        auto sample = std::make_shared<TrainingSample>(replication_data(c, rep));
        const ForestConfig fc{c.rule, c.depth, c.trees, c.subsample_size, c.mode, derive_seed(c.seed, Stream::Tree, rep)};
        values[rep] = fit_forest(fc, sample, 1).predict(x0);
    });
    double mean = 0.0;
    for (double v : values) mean += v / fits;
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean) / (fits - 1);
    const double theory = c.sigma * c.sigma * std::ldexp(tables.cov.v_cap, 2 * c.depth) / double(c.n);
    out.detail << "sample var=" << var << " theory=" << theory << " ratio=" << fmt(var / theory);
    out.require(std::abs(var / theory - 1.0) <= 0.15, "within 15%");
}

// ---- 9 ----------------------------------------------------------------------
void criterion9(const Options&, Outcome& out) {
    auto sample = std::make_shared<TrainingSample>();
    sample->dim = 2;
    Rng rng(9);
    for (int i = 0; i < 6; ++i) {
        sample->x.push_back(uniform01(rng));
        sample->x.push_back(uniform01(rng));
        sample->y.push_back(std::normal_distribution<double>()(rng));
    }
    std::vector<std::vector<std::uint32_t>> subsets;
    for (std::uint32_t a = 0; a < 6; ++a)
        for (std::uint32_t b = a + 1; b < 6; ++b)
            for (std::uint32_t d = b + 1; d < 6; ++d) subsets.push_back({a, b, d});
    int mismatches = 0;
    for (auto rule : {SplitRule::uniform(), SplitRule::ehrenfest_rule(12, 7.0)}) {
        const ForestConfig fc{rule, 2, 20, 3, SubsampleMode::FixedCount, 99};
        const auto forest = fit_forest_on_subsets(fc, sample, subsets, 1);
        for (int g = 0; g < 200; ++g) {
            const std::vector<double> x{uniform01(rng), uniform01(rng)};
            // complete U-statistic: average over all 20 kernels, tree I from its own stream
            double sum = 0.0;
            for (std::size_t j = 0; j < subsets.size(); ++j) {
                Rng tree_rng = make_rng(fc.seed, Stream::Tree, j);
                const auto tree = build_tree(rule, 2, fc.depth, tree_rng);
                const auto cell = DyadicCell::containing(x, tally(tree.branch(x)));
                double ys = 0.0;
                int count = 0;
                for (auto i : subsets[j])
                    if (cell.contains(sample->point(i))) {
                        ys += sample->y[i];
                        ++count;
                    }
                sum += count ? ys / count : 0.0;
            }
            if (forest.predict(x) != sum / double(subsets.size())) ++mismatches;
        }
    }
    out.detail << "subsets=" << subsets.size() << " points=400 mismatches=" << mismatches;
    out.require(subsets.size() == 20 && mismatches == 0, "exact equality");
}

// ---- 10 ---------------------------------------------------------------------
void criterion10(const Options& o, Outcome& out) {
    ExperimentConfig c;
    c.regression = RegressionId::Zero;
    c.n = 2000;
    c.seed = 10;
    const std::size_t runs = 200;
    std::vector<double> est(runs);
    parallel_for(runs, o.workers, [&](std::size_t r) {
        est[r] = sigma2_shen(replication_data(c, r), 1.0 / std::sqrt(2000.0));
    });
    std::size_t inside = 0;
    for (double v : est) inside += (v >= 0.9 && v <= 1.1);
    out.detail << "inside [0.9,1.1]: " << inside << "/" << runs;
    out.require(inside >= 190, "at least 95%");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    Options o;
    std::vector<int> only;
    app.add_flag("--fast", o.fast, "200 replications for criterion 1, wider tolerance");
    app.add_option("--cache-dir", o.cache_dir, "cache for covariance tables and quantiles");
    app.add_option("--workers", o.workers, "worker threads");
    app.add_option("--only", only, "run only these criteria")->delimiter(',');
    CLI11_PARSE(app, argc, argv);

    const std::vector<std::pair<std::string, std::function<void(const Options&, Outcome&)>>> criteria = {
        {"reference coverage and radius at n = 2000", criterion1},
        {"undersmoothing breakdown as n grows", criterion2},
        {"approximation error dominates at p = 4", criterion3},
        {"intersection-volume oracle", criterion4},
        {"small-case covariance and volume bounds", criterion5},
        {"Ehrenfest invariants", criterion6},
        {"Gaussian supremum sanity", criterion7},
        {"pointwise CLT variance", criterion8},
        {"complete U-statistic equality", criterion9},
        {"noise variance estimator", criterion10},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i + 1);
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Outcome out;
        const auto start = std::chrono::steady_clock::now();
        try {
            criteria[i].second(o, out);
        } catch (const std::exception& e) {
            out.pass = false;
            out.detail << "exception: " << e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("criterion %d (%s): %s  %s[%.1fs]\n", id, criteria[i].first.c_str(), out.pass ? "PASS" : "FAIL",
                    out.detail.str().c_str(), secs);
        std::fflush(stdout);
        failures += out.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
