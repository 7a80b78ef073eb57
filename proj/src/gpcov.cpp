#include "cprf/gpcov.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cprf/error.hpp"
#include "cprf/io.hpp"
#include "cprf/parallel.hpp"

namespace cprf {

namespace {

constexpr std::uint64_t kPairsPerChunk = 4096;
constexpr std::uint64_t kSupsPerBatch = 512;

GpQuantiles quantiles_from_suprema(std::vector<double> sups, std::vector<double> betas, std::uint64_t seed) {
    std::sort(sups.begin(), sups.end());
    GpQuantiles q;
    q.betas = std::move(betas);
    q.n_sup = sups.size();
    q.seed = seed;
    for (double b : q.betas) {
        auto rank = static_cast<std::size_t>(std::ceil((1.0 - b) * static_cast<double>(sups.size()) - 1e-9));
        rank = std::clamp<std::size_t>(rank, 1, sups.size());
        q.quantiles.push_back(sups[rank - 1]);
    }
    return q;
}

void check_betas(const std::vector<double>& betas) {
    if (betas.empty()) fail(ErrorKind::Configuration, "no beta levels requested");
    for (double b : betas)
        if (!(b > 0.0 && b < 1.0)) fail(ErrorKind::Configuration, "beta must lie in (0,1)");
}

} // namespace

double CovTable::value(std::span<const int> closeness) const {
    return values.at(index().rank_unsorted(closeness));
}

CovTable approximate_covariance(const SplitRule& rule, int depth, int dim, std::uint64_t pairs,
                                std::uint64_t seed, unsigned workers) {
    rule.validate(dim);
    if (pairs < 1) fail(ErrorKind::Configuration, "number of split pairs must be >= 1");
    const ClosenessIndex index(depth, dim);
    const auto omega = index.enumerate();
    const std::size_t m = omega.size();
    const auto p = static_cast<std::size_t>(dim);
    std::vector<int> flat;
    flat.reserve(m * p);
    for (const auto& c : omega) flat.insert(flat.end(), c.begin(), c.end());

    const std::uint64_t chunks = (pairs + kPairsPerChunk - 1) / kPairsPerChunk;
    std::vector<std::vector<double>> partial(chunks), partial_mass(chunks);
    std::vector<std::uint64_t> fallbacks(chunks, 0);

    parallel_for(static_cast<std::size_t>(chunks), workers, [&](std::size_t chunk) {
        Rng rng = make_rng(seed, Stream::Covariance, chunk);
        std::vector<double> acc(m, 0.0), mass(m, 0.0);
        std::vector<int> lo(p), lo_sorted(p);
        const std::uint64_t begin = chunk * kPairsPerChunk;
        const std::uint64_t end = std::min(pairs, begin + kPairsPerChunk);
        for (std::uint64_t it = begin; it < end; ++it) {
            const auto s1 = tally(rule.sample_branch(depth, dim, rng, &fallbacks[chunk]));
            const auto s2 = tally(rule.sample_branch(depth, dim, rng, &fallbacks[chunk]));
            int exponent = 0;
            for (std::size_t l = 0; l < p; ++l) {
                lo[l] = std::min(s1.counts[l], s2.counts[l]);
                exponent += std::max(s1.counts[l], s2.counts[l]);
            }
            const double vol = std::ldexp(1.0, -exponent);
            lo_sorted = lo;
            std::sort(lo_sorted.begin(), lo_sorted.end());
            mass[index.rank(lo_sorted)] += vol;
            for (std::size_t i = 0; i < m; ++i) {
                const int* c = flat.data() + i * p;
                bool hit = true;
                for (std::size_t l = 0; l < p; ++l)
                    if (lo[l] > c[l]) {
                        hit = false;
                        break;
                    }
                if (hit) acc[i] += vol;
            }
        }
        partial[chunk] = std::move(acc);
        partial_mass[chunk] = std::move(mass);
    });

    CovTable table;
    table.rule = rule;
    table.depth = depth;
    table.dim = dim;
    table.pairs = pairs;
    table.seed = seed;
    std::vector<double> total(m, 0.0);
    table.min_mass.assign(m, 0.0);
    for (std::uint64_t chunk = 0; chunk < chunks; ++chunk) {
        for (std::size_t i = 0; i < m; ++i) {
            total[i] += partial[chunk][i];
            table.min_mass[i] += partial_mass[chunk][i];
        }
        table.fallback_moves += fallbacks[chunk];
    }
    for (auto& v : total) v /= static_cast<double>(pairs);
    for (auto& v : table.min_mass) v /= static_cast<double>(pairs);
    // (k,...,k) is the lexicographically last vector
    table.v_cap = total[m - 1];
    table.values.resize(m);
    for (std::size_t i = 0; i < m; ++i) table.values[i] = std::min(1.0, total[i] / table.v_cap);
    return table;
}

void save_cov_table(const CovTable& table, const std::string& path) {
    std::ostringstream os;
    os << "# cprf covariance table\n";
    os << "format cprf-covtable " << (table.min_mass.empty() ? 1 : 2) << '\n';
    os << "kind " << to_string(table.rule.kind) << '\n';
    os << "ehrenfest_particles " << table.rule.ehrenfest.particles << '\n';
    os << "ehrenfest_slack " << format_double(table.rule.ehrenfest.slack) << '\n';
    os << "depth " << table.depth << '\n';
    os << "dim " << table.dim << '\n';
    os << "pairs " << table.pairs << '\n';
    os << "seed " << table.seed << '\n';
    os << "v_cap " << format_double(table.v_cap) << '\n';
    os << "fallback_moves " << table.fallback_moves << '\n';
    os << "entries " << table.values.size() << '\n';
    const ClosenessIndex index(table.depth, table.dim);
    for (std::size_t i = 0; i < table.values.size(); ++i) {
        os << i;
        for (int c : index.unrank(i)) os << ' ' << c;
        os << ' ' << format_double(table.values[i]) << '\n';
    }
    if (!table.min_mass.empty()) {
        os << "min_mass " << table.min_mass.size() << '\n';
        for (std::size_t i = 0; i < table.min_mass.size(); ++i)
            os << i << ' ' << format_double(table.min_mass[i]) << '\n';
    }
    write_file_atomic(path, os.str());
}

CovTable load_cov_table(const std::string& path) {
    std::istringstream in(read_file(path));
    std::string line;
    std::size_t lineno = 0;
    auto bad = [&](const std::string& why) -> void {
        fail(ErrorKind::Parse, path + ":" + std::to_string(lineno) + ": " + why);
    };
    auto next_line = [&]() -> std::string {
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line[0] != '#') return line;
        }
        bad("unexpected end of file");
        return {};
    };
    auto field = [&](const std::string& key) -> std::string {
        std::istringstream ls(next_line());
        std::string k, v;
        ls >> k >> v;
        if (k != key) bad("expected '" + key + "', found '" + k + "'");
        return v;
    };

    int version = 0;
    {
        std::istringstream ls(next_line());
        std::string k, name;
        ls >> k >> name >> version;
        if (k != "format" || name != "cprf-covtable") bad("not a covariance table");
        if (version != 1 && version != 2) bad("unsupported table version " + std::to_string(version));
    }
    CovTable t;
    try {
        t.rule.kind = parse_forest_kind(field("kind"));
        t.rule.ehrenfest.particles = std::stoi(field("ehrenfest_particles"));
        t.rule.ehrenfest.slack = std::stod(field("ehrenfest_slack"));
        t.depth = std::stoi(field("depth"));
        t.dim = std::stoi(field("dim"));
        t.pairs = std::stoull(field("pairs"));
        t.seed = std::stoull(field("seed"));
        t.v_cap = std::stod(field("v_cap"));
        t.fallback_moves = std::stoull(field("fallback_moves"));
        const std::size_t entries = std::stoull(field("entries"));
        const ClosenessIndex index(t.depth, t.dim);
        if (entries != index.size()) bad("entry count does not match C(k+p, p)");
        t.values.resize(entries);
        for (std::size_t i = 0; i < entries; ++i) {
            std::istringstream ls(next_line());
            std::size_t tau = 0;
            ls >> tau;
            std::vector<int> c(static_cast<std::size_t>(t.dim));
            for (auto& v : c) ls >> v;
            double value = 0.0;
            ls >> value;
            if (!ls || tau != i || index.rank(c) != i) bad("malformed table entry");
            t.values[i] = value;
        }
        if (version == 2) {
            if (std::stoull(field("min_mass")) != entries) bad("min_mass count does not match the entries");
            t.min_mass.resize(entries);
            for (std::size_t i = 0; i < entries; ++i) {
                std::istringstream ls(next_line());
                std::size_t tau = 0;
                double value = -1.0;
                ls >> tau >> value;
                if (!ls || tau != i || !(value >= 0.0)) bad("malformed min_mass entry");
                t.min_mass[i] = value;
            }
        }
    } catch (const std::invalid_argument&) {
        bad("malformed numeric field");
    } catch (const std::out_of_range&) {
        bad("numeric field out of range");
    }
    return t;
}

EvalGrid make_eval_grid(int depth, int dim, std::size_t max_points) {
    if (dim < 1) fail(ErrorKind::InvalidDimension, "grid dimension must be >= 1");
    if (depth < 0) fail(ErrorKind::Configuration, "grid depth must be >= 0");
    if (depth * dim > 40 || (std::size_t{1} << (depth * dim)) > max_points)
        fail(ErrorKind::Resource, "grid with 2^(" + std::to_string(depth) + "*" + std::to_string(dim) +
                                      ") points exceeds the limit of " + std::to_string(max_points) +
                                      "; choose a smaller grid depth");
    const std::size_t per_axis = std::size_t{1} << depth;
    const std::size_t count = std::size_t{1} << (depth * dim);
    EvalGrid g{depth, dim, std::vector<double>(count * static_cast<std::size_t>(dim))};
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t rest = i;
        for (int l = dim - 1; l >= 0; --l) {
            const std::size_t a = rest % per_axis;
            rest /= per_axis;
            g.points[i * static_cast<std::size_t>(dim) + static_cast<std::size_t>(l)] =
                std::ldexp(static_cast<double>(a), -depth) + std::ldexp(1.0, -(depth + 1));
        }
    }
    return g;
}

Eigen::MatrixXd covariance_matrix(const CovTable& table, const EvalGrid& grid) {
    if (grid.dim != table.dim) fail(ErrorKind::Shape, "grid and table dimensions differ");
    if (grid.depth > table.depth)
        fail(ErrorKind::Configuration, "grid depth " + std::to_string(grid.depth) + " exceeds tree depth " +
                                           std::to_string(table.depth));
    const ClosenessIndex index(table.depth, table.dim);
    if (table.values.size() != index.size()) fail(ErrorKind::Shape, "table has wrong number of entries");
    const int k = table.depth;
    const auto p = static_cast<std::size_t>(table.dim);
    const std::size_t n = grid.size();
    const auto codes = dyadic_codes(grid.points, k);

    // rank lookup over unsorted closeness vectors, mixed radix (k+1)
    std::vector<std::size_t> lookup;
    std::size_t radix_total = 1;
    bool dense = true;
    for (std::size_t l = 0; l < p; ++l) {
        radix_total *= static_cast<std::size_t>(k + 1);
        if (radix_total > (std::size_t{1} << 20)) {
            dense = false;
            break;
        }
    }
    if (dense) {
        lookup.resize(radix_total);
        std::vector<int> c(p);
        for (std::size_t id = 0; id < radix_total; ++id) {
            std::size_t rest = id;
            for (std::size_t l = 0; l < p; ++l) {
                c[l] = static_cast<int>(rest % static_cast<std::size_t>(k + 1));
                rest /= static_cast<std::size_t>(k + 1);
            }
            lookup[id] = index.rank_unsorted(c);
        }
    }

    Eigen::MatrixXd m(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    std::vector<int> c(p);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            std::size_t r;
            if (dense) {
                std::size_t id = 0;
                for (std::size_t l = p; l-- > 0;)
                    id = id * static_cast<std::size_t>(k + 1) +
                         static_cast<std::size_t>(closeness_from_codes(codes[i * p + l], codes[j * p + l], k));
                r = lookup[id];
            } else {
                for (std::size_t l = 0; l < p; ++l) c[l] = closeness_from_codes(codes[i * p + l], codes[j * p + l], k);
                r = index.rank_unsorted(c);
            }
            const double v = table.values[r];
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
            m(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = v;
        }
    }
    return m;
}

PsdFactor psd_repair(const Eigen::MatrixXd& m, double jitter, double eig_floor) {
    if (m.rows() != m.cols()) fail(ErrorKind::Shape, "psd_repair: matrix is not square");
    if (m.rows() == 0) fail(ErrorKind::Shape, "psd_repair: empty matrix");
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if (((m - m.transpose()).cwiseAbs().maxCoeff()) > 1e-12 * scale)
        fail(ErrorKind::Shape, "psd_repair: matrix is not symmetric");

    PsdFactor out;
    const auto id = Eigen::MatrixXd::Identity(m.rows(), m.cols());
    Eigen::LLT<Eigen::MatrixXd> llt(m + jitter * id);
    if (llt.info() == Eigen::Success) {
        out.lower = llt.matrixL();
        return out;
    }

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    if (eig.info() != Eigen::Success) fail(ErrorKind::Numerical, "psd_repair: eigendecomposition failed");
    Eigen::VectorXd lambda = eig.eigenvalues();
    out.min_eigenvalue = lambda.minCoeff();
    for (Eigen::Index i = 0; i < lambda.size(); ++i) {
        if (lambda(i) < eig_floor) {
            lambda(i) = eig_floor;
            ++out.clamped_eigenvalues;
        }
    }
    const Eigen::MatrixXd& q = eig.eigenvectors();
    Eigen::MatrixXd rebuilt = q * lambda.asDiagonal() * q.transpose();
    rebuilt = 0.5 * (rebuilt + rebuilt.transpose()).eval();
    out.eigen_repaired = true;
    llt.compute(rebuilt);
    if (llt.info() != Eigen::Success) llt.compute(rebuilt + jitter * id);
    if (llt.info() != Eigen::Success) {
        std::ostringstream os;
        os << "psd_repair: factorization failed after eigenvalue repair (min eigenvalue "
           << out.min_eigenvalue << ", " << out.clamped_eigenvalues << " clamped, floor " << eig_floor << ")";
        fail(ErrorKind::Numerical, os.str());
    }
    out.lower = llt.matrixL();
    return out;
}

double upper_quantile(std::vector<double> sample, double beta) {
    if (sample.empty()) fail(ErrorKind::Configuration, "quantile of an empty sample");
    if (!(beta > 0.0 && beta < 1.0)) fail(ErrorKind::Configuration, "beta must lie in (0,1)");
    const double n = static_cast<double>(sample.size());
    // tolerance keeps e.g. 0.95 * 1e5 from rounding up to the next rank
    auto rank = static_cast<std::size_t>(std::ceil((1.0 - beta) * n - 1e-9));
    rank = std::clamp<std::size_t>(rank, 1, sample.size());
    std::nth_element(sample.begin(), sample.begin() + static_cast<std::ptrdiff_t>(rank - 1), sample.end());
    return sample[rank - 1];
}

double GpQuantiles::quantile(double beta) const {
    for (std::size_t i = 0; i < betas.size(); ++i)
        if (std::abs(betas[i] - beta) < 1e-12) return quantiles[i];
    fail(ErrorKind::Configuration, "beta " + format_double(beta) + " was not simulated");
}

std::vector<double> simulate_suprema(const Eigen::MatrixXd& lower, std::uint64_t n_sup, std::uint64_t seed,
                                     unsigned workers) {
    if (lower.rows() != lower.cols() || lower.rows() == 0) fail(ErrorKind::Shape, "factor must be square");
    if (n_sup < 1) fail(ErrorKind::Configuration, "number of suprema must be >= 1");
    const Eigen::Index dim = lower.rows();
    const std::uint64_t batches = (n_sup + kSupsPerBatch - 1) / kSupsPerBatch;
    std::vector<double> sups(n_sup);
    parallel_for(static_cast<std::size_t>(batches), workers, [&](std::size_t b) {
        Rng rng = make_rng(seed, Stream::Supremum, b);
        std::normal_distribution<double> normal(0.0, 1.0);
        const std::uint64_t begin = b * kSupsPerBatch;
        const auto cols = static_cast<Eigen::Index>(std::min(n_sup, begin + kSupsPerBatch) - begin);
        Eigen::MatrixXd z(dim, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < dim; ++r) z(r, c) = normal(rng);
        const Eigen::MatrixXd x = lower.triangularView<Eigen::Lower>() * z;
        for (Eigen::Index c = 0; c < cols; ++c)
            sups[begin + static_cast<std::uint64_t>(c)] = x.col(c).cwiseAbs().maxCoeff();
    });
    return sups;
}

GpQuantiles simulate_sup_quantiles(const Eigen::MatrixXd& lower, std::uint64_t n_sup, std::vector<double> betas,
                                   std::uint64_t seed, unsigned workers) {
    check_betas(betas);
    return quantiles_from_suprema(simulate_suprema(lower, n_sup, seed, workers), std::move(betas), seed);
}

void save_quantiles(const GpQuantiles& q, const std::string& path) {
    nlohmann::json j = {
        {"format", "cprf-quantiles"},
        {"version", 1},
        {"betas", q.betas},
        {"quantiles", q.quantiles},
        {"n_sup", q.n_sup},
        {"grid_depth", q.grid_depth},
        {"seed", q.seed},
        {"kind", q.kind},
        {"sampler", q.sampler},
        {"depth", q.depth},
        {"dim", q.dim},
        {"v_cap", q.v_cap},
    };
    write_file_atomic(path, j.dump(2) + "\n");
}

GpQuantiles load_quantiles(const std::string& path) {
    try {
        const auto j = nlohmann::json::parse(read_file(path));
        if (j.at("format") != "cprf-quantiles") fail(ErrorKind::Parse, path + ": not a quantiles file");
        if (j.at("version").get<int>() != 1) fail(ErrorKind::Parse, path + ": unsupported quantiles version");
        GpQuantiles q;
        q.betas = j.at("betas").get<std::vector<double>>();
        q.quantiles = j.at("quantiles").get<std::vector<double>>();
        q.n_sup = j.at("n_sup").get<std::uint64_t>();
        q.grid_depth = j.at("grid_depth").get<int>();
        q.seed = j.at("seed").get<std::uint64_t>();
        q.kind = j.value("kind", "");
        q.sampler = j.value("sampler", "cholesky");
        q.depth = j.value("depth", 0);
        q.dim = j.value("dim", 0);
        q.v_cap = j.value("v_cap", 0.0);
        if (q.betas.size() != q.quantiles.size()) fail(ErrorKind::Parse, path + ": betas/quantiles length mismatch");
        return q;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, path + ": " + e.what());
    }
}

int detect_undividable_resolution(const CovTable& table, double tol) {
    const ClosenessIndex index(table.depth, table.dim);
    for (int c = 0; c <= table.depth; ++c) {
        const std::vector<int> diag(static_cast<std::size_t>(table.dim), c);
        if (table.values.at(index.rank(diag)) >= 1.0 - tol) return c;
    }
    return table.depth;
}

int choose_grid_depth(const CovTable& table, std::size_t max_points, double tol) {
    int depth = detect_undividable_resolution(table, tol);
    while (depth > 0 && (depth * table.dim > 40 || (std::size_t{1} << (depth * table.dim)) > max_points)) --depth;
    return depth;
}

std::vector<MixtureTerm> mixture_terms(const CovTable& table, int depth) {
    if (table.min_mass.empty())
        fail(ErrorKind::Configuration, "covariance table has no min-mass data; regenerate it with this version");
    if (depth < 1 || depth > table.depth) fail(ErrorKind::Configuration, "mixture grid depth must lie in [1, k]");
    const ClosenessIndex full(table.depth, table.dim);
    const ClosenessIndex coarse(depth, table.dim);
    if (table.min_mass.size() != full.size()) fail(ErrorKind::Shape, "min_mass has the wrong length");
    std::vector<double> merged(coarse.size(), 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < full.size(); ++i) {
        if (table.min_mass[i] <= 0.0) continue;
        auto m = full.unrank(i);
        for (int& v : m) v = std::min(v, depth);
        merged[coarse.rank(m)] += table.min_mass[i];
        total += table.min_mass[i];
    }
    if (!(total > 0.0)) fail(ErrorKind::Numerical, "covariance table carries no mass");

    std::vector<MixtureTerm> terms;
    for (std::size_t i = 0; i < coarse.size(); ++i) {
        if (merged[i] <= 0.0) continue;
        auto t = coarse.unrank(i);
        // the sorted class splits evenly over its distinct axis assignments
        std::vector<std::vector<int>> perms;
        do perms.push_back(t);
        while (std::next_permutation(t.begin(), t.end()));
        const double scale = std::sqrt(merged[i] / total / static_cast<double>(perms.size()));
        for (auto& q : perms) terms.push_back({std::move(q), scale});
    }
    std::sort(terms.begin(), terms.end(),
              [](const MixtureTerm& a, const MixtureTerm& b) { return a.levels < b.levels; });
    return terms;
}

Eigen::MatrixXd mixture_covariance_matrix(const CovTable& table, int depth) {
    const auto terms = mixture_terms(table, depth);
    const auto grid = make_eval_grid(depth, table.dim);
    const auto n = static_cast<Eigen::Index>(grid.size());
    const auto p = static_cast<std::size_t>(table.dim);
    std::vector<std::uint64_t> codes(grid.size() * p);
    for (std::size_t i = 0; i < grid.size(); ++i)
        for (std::size_t l = 0; l < p; ++l) codes[i * p + l] = dyadic_index(grid.point(i)[l], depth);
    Eigen::MatrixXd out(n, n);
    for (Eigen::Index a = 0; a < n; ++a)
        for (Eigen::Index b = 0; b <= a; ++b) {
            double v = 0.0;
            for (const auto& t : terms) {
                bool same = true;
                for (std::size_t l = 0; l < p && same; ++l) {
                    const int shift = depth - t.levels[l];
                    same = (codes[static_cast<std::size_t>(a) * p + l] >> shift) ==
                           (codes[static_cast<std::size_t>(b) * p + l] >> shift);
                }
                if (same) v += t.scale * t.scale;
            }
            out(a, b) = out(b, a) = v;
        }
    return out;
}

namespace {

// Builds one draw of the mixture field axis by axis. Terms sharing the
// levels of axes 0..j-1 are summed at full resolution on axes j..p-1 before
// being upsampled along axis j-1, so each grid value is touched about
// (depth + 1) times per axis level instead of once per term.
class MixtureField {
public:
    MixtureField(std::vector<MixtureTerm> terms, int depth, int dim)
        : terms_(std::move(terms)), depth_(depth), dim_(dim),
          buffers_(static_cast<std::size_t>(dim) + 1, std::vector<double>(std::size_t{1} << (depth * dim))) {}

    double draw_sup(Rng& rng) {
        fill(0, 0, terms_.size(), 0, rng);
        double sup = 0.0;
        for (double v : buffers_[0]) sup = std::max(sup, std::abs(v));
        return sup;
    }

private:
    // Writes into buffers_[axis] an array of shape 2^outer_bits x 2^(depth (dim - axis)).
    void fill(int axis, std::size_t begin, std::size_t end, int outer_bits, Rng& rng) {
        auto& out = buffers_[static_cast<std::size_t>(axis)];
        const std::size_t outer = std::size_t{1} << outer_bits;
        if (axis == dim_) {
            const double scale = terms_[begin].scale;
            for (std::size_t i = 0; i < outer; ++i) out[i] = scale * normal_(rng);
            return;
        }
        const std::size_t side = std::size_t{1} << depth_;
        const std::size_t inner = std::size_t{1} << (depth_ * (dim_ - axis - 1));
        std::fill_n(out.begin(), outer * side * inner, 0.0);
        const auto& child = buffers_[static_cast<std::size_t>(axis) + 1];
        for (std::size_t g = begin; g < end;) {
            const int level = terms_[g].levels[static_cast<std::size_t>(axis)];
            std::size_t h = g;
            while (h < end && terms_[h].levels[static_cast<std::size_t>(axis)] == level) ++h;
            fill(axis + 1, g, h, outer_bits + level, rng);
            const int shift = depth_ - level;
            const std::size_t blocks = std::size_t{1} << level;
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t x = 0; x < side; ++x) {
                    const double* src = child.data() + (o * blocks + (x >> shift)) * inner;
                    double* dst = out.data() + (o * side + x) * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                }
            g = h;
        }
    }

    std::vector<MixtureTerm> terms_;
    int depth_;
    int dim_;
    std::vector<std::vector<double>> buffers_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

bool grid_fits(int depth, int dim, std::size_t max_points) {
    return depth * dim <= 40 && (std::size_t{1} << (depth * dim)) <= max_points;
}

} // namespace

std::vector<double> simulate_suprema_mixture(const CovTable& table, int depth, std::uint64_t n_sup,
                                             std::uint64_t seed, unsigned workers) {
    if (n_sup < 1) fail(ErrorKind::Configuration, "number of suprema must be >= 1");
    if (!grid_fits(depth, table.dim, std::size_t{1} << 24))
        fail(ErrorKind::Resource, "mixture grid above 2^24 points");
    const auto terms = mixture_terms(table, depth);
    const std::uint64_t batches = (n_sup + kSupsPerBatch - 1) / kSupsPerBatch;
    std::vector<double> sups(n_sup);
    parallel_for(static_cast<std::size_t>(batches), workers, [&](std::size_t b) {
        Rng rng = make_rng(seed, Stream::Supremum, b);
        MixtureField field(terms, depth, table.dim);
        const std::uint64_t begin = b * kSupsPerBatch;
        const std::uint64_t end = std::min(n_sup, begin + kSupsPerBatch);
        for (std::uint64_t i = begin; i < end; ++i) sups[i] = field.draw_sup(rng);
    });
    return sups;
}

GpQuantiles simulate_sup_quantiles_mixture(const CovTable& table, int depth, std::uint64_t n_sup,
                                           std::vector<double> betas, std::uint64_t seed, unsigned workers) {
    check_betas(betas);
    auto q = quantiles_from_suprema(simulate_suprema_mixture(table, depth, n_sup, seed, workers), std::move(betas),
                                    seed);
    q.sampler = to_string(GpSampler::Mixture);
    q.grid_depth = depth;
    return q;
}

const char* to_string(GpSampler s) noexcept { return s == GpSampler::Mixture ? "mixture" : "cholesky"; }

GpSampler parse_gp_sampler(const std::string& s) {
    if (s == "cholesky") return GpSampler::Cholesky;
    if (s == "mixture") return GpSampler::Mixture;
    fail(ErrorKind::Configuration, "unknown Gaussian sampler '" + s + "' (expected cholesky or mixture)");
}

GridPlan plan_gp_grid(const CovTable& table, std::size_t cholesky_max, std::size_t mixture_max, double tol) {
    const int target = detect_undividable_resolution(table, tol);
    const int chol = choose_grid_depth(table, cholesky_max, tol);
    if (chol >= target || table.min_mass.empty()) return {chol, GpSampler::Cholesky};
    int depth = target;
    while (depth > chol && !grid_fits(depth, table.dim, mixture_max)) --depth;
    return depth > chol ? GridPlan{depth, GpSampler::Mixture} : GridPlan{chol, GpSampler::Cholesky};
}

GridPlan plan_gp_grid_at(const CovTable& table, int depth, std::size_t cholesky_max) {
    if (depth < 0 || depth > table.depth) fail(ErrorKind::Configuration, "grid depth must lie in [0, k]");
    return {depth, grid_fits(depth, table.dim, cholesky_max) ? GpSampler::Cholesky : GpSampler::Mixture};
}

GpQuantiles gp_quantiles(const CovTable& table, const GridPlan& plan, std::uint64_t n_sup,
                         std::vector<double> betas, std::uint64_t seed, unsigned workers) {
    GpQuantiles q;
    if (plan.sampler == GpSampler::Mixture) {
        q = simulate_sup_quantiles_mixture(table, plan.depth, n_sup, std::move(betas), seed, workers);
    } else {
        const auto grid = make_eval_grid(plan.depth, table.dim, std::numeric_limits<std::size_t>::max());
        const auto factor = psd_repair(covariance_matrix(table, grid));
        q = simulate_sup_quantiles(factor.lower, n_sup, std::move(betas), seed, workers);
    }
    q.grid_depth = plan.depth;
    q.sampler = to_string(plan.sampler);
    q.kind = to_string(table.rule.kind);
    q.depth = table.depth;
    q.dim = table.dim;
    q.v_cap = table.v_cap;
    return q;
}

} // namespace cprf
