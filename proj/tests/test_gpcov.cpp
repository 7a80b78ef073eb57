#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include <Eigen/Eigenvalues>

#include "cprf/error.hpp"
#include "cprf/gpcov.hpp"
#include "oracles.hpp"

using namespace cprf;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("cprf_test_" + name)).string();
}

// Exact E[vol intersection indicator] per sorted closeness vector for the
// uniform rule, by summing over all pairs of direction sequences.
std::vector<double> exact_uniform_table(int k, int p, double& v_cap) {
    const ClosenessIndex idx(k, p);
    const auto all = idx.enumerate();
    std::vector<double> acc(all.size(), 0.0);
    const std::size_t seqs = static_cast<std::size_t>(std::pow(p, k));
    const double weight = 1.0 / (double(seqs) * double(seqs));
    auto counts_of = [&](std::size_t code) {
        std::vector<int> s(p, 0);
        for (int t = 0; t < k; ++t) {
            ++s[code % p];
            code /= p;
        }
        return s;
    };
    for (std::size_t a = 0; a < seqs; ++a)
        for (std::size_t b = 0; b < seqs; ++b) {
            const auto s1 = counts_of(a), s2 = counts_of(b);
            int max_sum = 0;
            for (int l = 0; l < p; ++l) max_sum += std::max(s1[l], s2[l]);
            for (std::size_t r = 0; r < all.size(); ++r) {
                bool ok = true;
                for (int l = 0; l < p; ++l) ok = ok && std::min(s1[l], s2[l]) <= all[r][l];
                if (ok) acc[r] += weight * std::ldexp(1.0, -max_sum);
            }
        }
    v_cap = acc.back();
    for (auto& v : acc) v /= v_cap;
    return acc;
}

} // namespace

TEST_CASE("small-case V_cap matches 3/8") {
    const std::uint64_t pairs = 200000;
    const auto t = approximate_covariance(SplitRule::uniform(), 1, 2, pairs, 7, 2);
    // per-pair volume is 1/2 or 1/4 with equal probability: sd 1/8
    const double se = 0.125 / std::sqrt(double(pairs));
    CHECK(std::abs(t.v_cap - 0.375) < 3 * se);
    CHECK(t.values.back() == 1.0);
    double exact = 0.0;
    exact_uniform_table(1, 2, exact);
    CHECK(exact == 0.375);
}

TEST_CASE("table agrees with the exhaustive oracle") {
    for (auto [k, p] : {std::pair{3, 2}, std::pair{2, 3}}) {
        double v_exact = 0.0;
        const auto exact = exact_uniform_table(k, p, v_exact);
        const auto t = approximate_covariance(SplitRule::uniform(), k, p, 200000, 3, 1);
        CHECK(t.v_cap == doctest::Approx(v_exact).epsilon(0.01));
        REQUIRE(t.values.size() == exact.size());
        for (std::size_t r = 0; r < exact.size(); ++r) CHECK(std::abs(t.values[r] - exact[r]) < 0.01);
    }
}

TEST_CASE("table invariants") {
    for (auto rule : {SplitRule::uniform(), SplitRule::ehrenfest_rule(12, 7.0)}) {
        for (auto [k, p] : {std::pair{5, 2}, std::pair{4, 3}, std::pair{0, 2}}) {
            const auto t = approximate_covariance(rule, k, p, 20000, 11, 0);
            CHECK(t.v_cap >= std::ldexp(1.0, -2 * k));
            CHECK(t.v_cap <= std::ldexp(1.0, -k));
            CHECK(t.values.back() == 1.0);
            const auto idx = t.index();
            const auto all = idx.enumerate();
            for (std::size_t a = 0; a < all.size(); ++a) {
                CHECK(t.values[a] >= 0.0);
                CHECK(t.values[a] <= 1.0);
                for (std::size_t b = 0; b < all.size(); ++b) {
                    bool below = true;
                    for (int l = 0; l < p; ++l) below = below && all[a][l] <= all[b][l];
                    if (below) CHECK(t.values[a] <= t.values[b]);
                }
            }
        }
    }
}

TEST_CASE("tables are reproducible and independent of the worker count") {
    const auto a = approximate_covariance(SplitRule::ehrenfest_rule(12, 7.0), 5, 2, 10000, 5, 1);
    const auto b = approximate_covariance(SplitRule::ehrenfest_rule(12, 7.0), 5, 2, 10000, 5, 3);
    CHECK(a.values == b.values);
    CHECK(a.v_cap == b.v_cap);
}

TEST_CASE("cov table file round trip") {
    const auto t = approximate_covariance(SplitRule::ehrenfest_rule(12, 7.0), 4, 2, 5000, 5, 1);
    const auto path = temp_path("cov.tbl");
    save_cov_table(t, path);
    const auto u = load_cov_table(path);
    CHECK(u.values == t.values);
    CHECK(u.v_cap == t.v_cap);
    CHECK(u.rule.kind == ForestKind::Ehrenfest);
    CHECK(u.rule.ehrenfest.particles == 12);
    CHECK(u.depth == 4);
    CHECK(u.dim == 2);
    CHECK(u.pairs == 5000);
    CHECK(u.min_mass == t.min_mass);
    std::filesystem::remove(path);
}

TEST_CASE("evaluation grid and covariance matrix") {
    const auto g = make_eval_grid(2, 2);
    CHECK(g.size() == 16);
    CHECK(g.point(0)[0] == 0.125);
    CHECK(g.point(1)[1] == 0.375);
    CHECK(g.point(15)[0] == 0.875);

    const auto t = approximate_covariance(SplitRule::uniform(), 3, 1, 10000, 1, 1);
    const auto m1 = covariance_matrix(t, make_eval_grid(0, 1));
    CHECK(m1.rows() == 1);
    CHECK(m1(0, 0) == 1.0);
    const auto m2 = covariance_matrix(t, make_eval_grid(1, 1));
    const std::vector<int> zero{0};
    CHECK(m2(0, 1) == t.value(zero));
    CHECK_THROWS_AS(covariance_matrix(t, make_eval_grid(4, 1)), Error);

    const auto t2 = approximate_covariance(SplitRule::uniform(), 5, 2, 20000, 1, 1);
    const auto m = covariance_matrix(t2, make_eval_grid(4, 2));
    std::set<double> distinct;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        CHECK(m(i, i) == 1.0);
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            distinct.insert(m(i, j));
            if (m(i, j) != m(j, i)) FAIL("asymmetric entry");
        }
    }
    CHECK(distinct.size() <= binomial(7, 2));
}

TEST_CASE("psd repair") {
    SUBCASE("identity") {
        const auto f = psd_repair(Eigen::MatrixXd::Identity(3, 3), 0.0, 1e-10);
        CHECK((f.lower - Eigen::MatrixXd::Identity(3, 3)).norm() == 0.0);
        CHECK_FALSE(f.eigen_repaired);
    }
    SUBCASE("rank one") {
        Eigen::MatrixXd m(2, 2);
        m << 1, 1, 1, 1;
        const auto f = psd_repair(m);
        CHECK((f.lower * f.lower.transpose() - m).norm() < 1e-8);
    }
    SUBCASE("eigenvalue surgery") {
        const auto t = approximate_covariance(SplitRule::uniform(), 4, 2, 20000, 2, 1);
        const Eigen::MatrixXd m = covariance_matrix(t, make_eval_grid(2, 2));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
        Eigen::VectorXd lambda = es.eigenvalues();
        lambda(0) = -1e-6;
        const Eigen::MatrixXd q = es.eigenvectors();
        Eigen::MatrixXd bad = q * lambda.asDiagonal() * q.transpose();
        bad = 0.5 * (bad + bad.transpose()).eval();
        const auto f = psd_repair(bad);
        CHECK(f.eigen_repaired);
        CHECK(f.clamped_eigenvalues >= 1);
        const Eigen::MatrixXd back = f.lower * f.lower.transpose();
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> check(back);
        CHECK(check.eigenvalues().minCoeff() > -1e-12);
        CHECK((back - bad).norm() < 1e-5);
    }
    SUBCASE("non-symmetric input") {
        Eigen::MatrixXd m(2, 2);
        m << 1, 0.5, 0.2, 1;
        CHECK_THROWS_AS(psd_repair(m), Error);
    }
}

TEST_CASE("supremum quantiles") {
    const std::vector<double> betas{0.1, 0.05, 0.01};
    Eigen::MatrixXd one = Eigen::MatrixXd::Identity(1, 1);
    const auto q = simulate_sup_quantiles(one, 100000, betas, 3, 2);
    for (std::size_t i = 0; i < betas.size(); ++i) {
        // |Z| exceeds c with probability beta when Phi(c) = 1 - beta/2
        CHECK(std::abs(q.quantiles[i] - oracle::normal_quantile(1 - betas[i] / 2)) < 0.02);
    }
    CHECK(q.quantiles[0] < q.quantiles[1]);
    CHECK(q.quantiles[1] < q.quantiles[2]);

    Eigen::MatrixXd rank_one(2, 2);
    rank_one << 1, 0, 1, 0;
    const auto r = simulate_sup_quantiles(rank_one, 100000, betas, 4, 1);
    for (std::size_t i = 0; i < betas.size(); ++i) CHECK(std::abs(r.quantiles[i] - q.quantiles[i]) < 0.02);

    const auto again = simulate_sup_quantiles(one, 100000, betas, 3, 1);
    CHECK(again.quantiles == q.quantiles);
    CHECK_THROWS_AS(q.quantile(0.2), Error);
    CHECK(q.quantile(0.05) == q.quantiles[1]);

    const auto path = temp_path("q.json");
    save_quantiles(q, path);
    const auto back = load_quantiles(path);
    CHECK(back.quantiles == q.quantiles);
    CHECK(back.betas == q.betas);
    std::filesystem::remove(path);

    std::vector<double> sample{5, 1, 4, 2, 3};
    CHECK(upper_quantile(sample, 0.2) == 4);
    CHECK(upper_quantile(sample, 0.5) == 3);
}

TEST_CASE("undividable resolution") {
    const auto t = approximate_covariance(SplitRule::uniform(), 3, 2, 50000, 1, 1);
    CHECK(detect_undividable_resolution(t) == 3);
    CHECK(detect_undividable_resolution(t, 1.0) == 0);

    const EhrenfestConfig cfg{1, 1.01};
    const auto e = approximate_covariance(SplitRule::ehrenfest_rule(1, 1.01), 12, 2, 20000, 1, 1);
    CHECK(detect_undividable_resolution(e) <= static_cast<int>(std::floor(12 / 2.0 + cfg.upper_excess(2))));
    CHECK(choose_grid_depth(e, 64) <= 3);
}

TEST_CASE("min-level mass sums to V_cap") {
    const auto t = approximate_covariance(SplitRule::ehrenfest_rule(12, 7.0), 5, 3, 20000, 2, 1);
    double sum = 0.0;
    for (double v : t.min_mass) {
        CHECK(v >= 0.0);
        sum += v;
    }
    CHECK(sum == doctest::Approx(t.v_cap).epsilon(1e-12));
}

TEST_CASE("mixture covariance matches the exhaustive oracle") {
    double v_exact = 0.0;
    const auto exact = exact_uniform_table(3, 2, v_exact);
    const auto t = approximate_covariance(SplitRule::uniform(), 3, 2, 200000, 8, 1);
    const auto mix = mixture_covariance_matrix(t, 3);
    const auto grid = make_eval_grid(3, 2);
    const ClosenessIndex idx(3, 2);
    REQUIRE(mix.rows() == 64);
    for (Eigen::Index a = 0; a < mix.rows(); ++a) {
        CHECK(mix(a, a) == doctest::Approx(1.0).epsilon(1e-12));
        for (Eigen::Index b = 0; b < mix.cols(); ++b) {
            const auto c = closeness_vector(grid.point(std::size_t(a)), grid.point(std::size_t(b)), 3);
            CHECK(std::abs(mix(a, b) - exact[idx.rank_unsorted(c)]) < 0.01);
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(mix);
    CHECK(eig.eigenvalues().minCoeff() > -1e-12);
}

TEST_CASE("mixture terms merge levels above the grid depth") {
    const auto t = approximate_covariance(SplitRule::uniform(), 4, 2, 20000, 3, 1);
    for (int depth : {1, 2, 4}) {
        const auto terms = mixture_terms(t, depth);
        double total = 0.0;
        for (const auto& term : terms) {
            for (int v : term.levels) {
                CHECK(v >= 0);
                CHECK(v <= depth);
            }
            total += term.scale * term.scale;
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        for (std::size_t i = 1; i < terms.size(); ++i) CHECK(terms[i - 1].levels < terms[i].levels);
    }
    CovTable bare = t;
    bare.min_mass.clear();
    CHECK_THROWS_AS(mixture_terms(bare, 2), Error);
    CHECK_THROWS_AS(mixture_terms(t, 5), Error);
    CHECK_THROWS_AS(mixture_terms(t, 0), Error);
}

TEST_CASE("mixture sampler agrees with Cholesky on the same covariance") {
    const std::vector<double> betas{0.1, 0.05, 0.01};
    const auto check = [&](const CovTable& t, int depth) {
        const auto chol = psd_repair(mixture_covariance_matrix(t, depth));
        const auto a = simulate_sup_quantiles(chol.lower, 100000, betas, 21, 1);
        const auto b = simulate_sup_quantiles_mixture(t, depth, 100000, betas, 22, 1);
        CHECK(b.sampler == "mixture");
        CHECK(b.grid_depth == depth);
        // quantile standard error at 1e5 draws is below 0.01 here
        for (std::size_t i = 0; i < betas.size(); ++i) CHECK(std::abs(a.quantiles[i] - b.quantiles[i]) < 0.04);
    };
    check(approximate_covariance(SplitRule::uniform(), 3, 2, 50000, 4, 1), 3);
    check(approximate_covariance(SplitRule::ehrenfest_rule(12, 7.0), 3, 3, 50000, 4, 1), 2);
}

TEST_CASE("mixture sampler is deterministic across worker counts") {
    const auto t = approximate_covariance(SplitRule::uniform(), 3, 2, 5000, 4, 1);
    const auto a = simulate_suprema_mixture(t, 3, 3000, 9, 1);
    const auto b = simulate_suprema_mixture(t, 3, 3000, 9, 3);
    CHECK(a == b);
    CHECK_THROWS_AS(simulate_suprema_mixture(t, 3, 0, 9, 1), Error);
}

TEST_CASE("grid plan") {
    const auto small = approximate_covariance(SplitRule::uniform(), 3, 2, 20000, 1, 1);
    const auto p2 = plan_gp_grid(small);
    CHECK(p2.sampler == GpSampler::Cholesky);
    CHECK(p2.depth == choose_grid_depth(small));

    const auto wide = approximate_covariance(SplitRule::uniform(), 5, 4, 20000, 1, 1);
    const auto p4 = plan_gp_grid(wide, 4096, 65536);
    CHECK(p4.sampler == GpSampler::Mixture);
    CHECK(p4.depth > choose_grid_depth(wide, 4096));
    CHECK(p4.depth <= detect_undividable_resolution(wide));
    CHECK(p4.depth <= 4);

    CovTable bare = wide;
    bare.min_mass.clear();
    CHECK(plan_gp_grid(bare).sampler == GpSampler::Cholesky);

    CHECK(plan_gp_grid_at(wide, 3).sampler == GpSampler::Cholesky);
    CHECK(plan_gp_grid_at(wide, 4).sampler == GpSampler::Mixture);
    CHECK_THROWS_AS(plan_gp_grid_at(wide, 6), Error);
    CHECK(parse_gp_sampler("mixture") == GpSampler::Mixture);
    CHECK_THROWS_AS(parse_gp_sampler("svd"), Error);

    const auto q = gp_quantiles(small, p2, 2000, {0.1}, 3, 1);
    CHECK(q.sampler == "cholesky");
    CHECK(q.grid_depth == p2.depth);
    CHECK(q.dim == 2);
}
