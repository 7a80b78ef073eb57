#include "cprf/forest.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cprf/error.hpp"
#include "cprf/io.hpp"
#include "cprf/parallel.hpp"

namespace cprf {

namespace {

constexpr int kMaxDim = 64;
constexpr int kMaxDepth = 24;

std::string trim(std::string s) {
    const auto ws = " \t\r\n";
    s.erase(0, s.find_first_not_of(ws));
    s.erase(s.find_last_not_of(ws) + 1);
    return s;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(trim(field));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::vector<std::uint32_t> draw_subset(std::size_t n, std::size_t r, Rng& rng) {
    std::vector<std::uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
        std::swap(idx[i], idx[j]);
    }
    idx.resize(r);
    return idx;
}

} // namespace

const char* to_string(ForestKind kind) noexcept {
    return kind == ForestKind::Uniform ? "uniform" : "ehrenfest";
}

ForestKind parse_forest_kind(const std::string& s) {
    if (s == "uniform" || s == "uni") return ForestKind::Uniform;
    if (s == "ehrenfest" || s == "ehr") return ForestKind::Ehrenfest;
    fail(ErrorKind::Configuration, "unknown forest kind '" + s + "' (expected uniform|ehrenfest)");
}

void SplitRule::validate(int dim) const {
    if (dim < 1) fail(ErrorKind::InvalidDimension, "dimension must be >= 1");
    if (kind == ForestKind::Ehrenfest) ehrenfest.validate(dim);
}

SplitDirections SplitRule::sample_branch(int depth, int dim, Rng& rng, std::uint64_t* fallback_moves) const {
    if (kind == ForestKind::Uniform) return sample_uniform_splits(depth, dim, rng);
    return sample_ehrenfest_splits(depth, dim, ehrenfest, rng, fallback_moves);
}

void TrainingSample::validate() const {
    if (dim < 1) fail(ErrorKind::InvalidDimension, "training sample dimension must be >= 1");
    if (x.size() != y.size() * static_cast<std::size_t>(dim))
        fail(ErrorKind::Shape, "covariate block does not match n x dim");
    check_unit_point(x);
}

std::uint64_t TrainingSample::checksum() const {
    std::uint64_t h = fnv1a(&dim, sizeof dim);
    h = fnv1a(x.data(), x.size() * sizeof(double), h);
    return fnv1a(y.data(), y.size() * sizeof(double), h);
}

TrainingSample read_training_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::Io, "cannot open data file: " + path);
    std::string line;
    std::size_t lineno = 0;
    TrainingSample out;

    while (std::getline(in, line)) {
        ++lineno;
        if (!trim(line).empty()) break;
    }
    const auto header = split_csv_line(line);
    if (header.size() < 2 || header.back() != "y")
        fail(ErrorKind::Parse, path + ": line " + std::to_string(lineno) + ": header must be x1,...,xp,y");
    for (std::size_t l = 0; l + 1 < header.size(); ++l)
        if (header[l] != "x" + std::to_string(l + 1))
            fail(ErrorKind::Parse, path + ": line " + std::to_string(lineno) + ": expected column x" +
                                       std::to_string(l + 1) + ", found '" + header[l] + "'");
    out.dim = static_cast<int>(header.size() - 1);

    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size())
            fail(ErrorKind::Parse, path + ": line " + std::to_string(lineno) + ": expected " +
                                       std::to_string(header.size()) + " fields, found " +
                                       std::to_string(fields.size()));
        for (std::size_t l = 0; l < fields.size(); ++l) {
            const char* begin = fields[l].c_str();
            char* end = nullptr;
            const double v = std::strtod(begin, &end);
            if (fields[l].empty() || end != begin + fields[l].size() || !std::isfinite(v))
                fail(ErrorKind::Parse, path + ": line " + std::to_string(lineno) + ": non-numeric field '" +
                                           fields[l] + "'");
            if (l + 1 < fields.size()) {
                if (!(v >= 0.0 && v <= 1.0))
                    fail(ErrorKind::Parse, path + ": line " + std::to_string(lineno) + ": coordinate x" +
                                               std::to_string(l + 1) + " outside [0,1]");
                out.x.push_back(v);
            } else {
                out.y.push_back(v);
            }
        }
    }
    if (out.y.empty()) fail(ErrorKind::Parse, path + ": no data rows");
    return out;
}

void write_training_csv(const TrainingSample& sample, const std::string& path) {
    std::ostringstream os;
    for (int l = 0; l < sample.dim; ++l) os << 'x' << (l + 1) << ',';
    os << "y\n";
    for (std::size_t i = 0; i < sample.size(); ++i) {
        const auto pt = sample.point(i);
        for (double v : pt) os << format_double(v) << ',';
        os << format_double(sample.y[i]) << '\n';
    }
    write_file_atomic(path, os.str());
}

std::vector<std::uint64_t> dyadic_codes(std::span<const double> coords, int depth) {
    std::vector<std::uint64_t> out(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i) out[i] = dyadic_index(coords[i], depth);
    return out;
}

// ---------------------------------------------------------------------------
// CenteredTree
// ---------------------------------------------------------------------------

CenteredTree::CenteredTree(int dim, int depth, ForestKind kind, std::vector<std::uint8_t> directions)
    : dim_(dim), depth_(depth), kind_(kind), directions_(std::move(directions)) {
    if (dim < 1 || dim > kMaxDim) fail(ErrorKind::InvalidDimension, "tree dimension must be in [1, 64]");
    if (depth < 0 || depth > kMaxDepth) fail(ErrorKind::Configuration, "tree depth must be in [0, 24]");
    if (directions_.size() != leaf_count() - 1) fail(ErrorKind::Shape, "tree needs 2^k - 1 split directions");
    for (auto d : directions_)
        if (d >= dim) fail(ErrorKind::Shape, "split direction out of range");
}

std::size_t CenteredTree::leaf_of_codes(const std::uint64_t* codes) const noexcept {
    std::array<int, kMaxDim> used{};
    std::size_t node = 0;
    for (int level = 0; level < depth_; ++level) {
        const int d = directions_[node];
        const int s = used[static_cast<std::size_t>(d)]++;
        const std::uint64_t bit = (codes[d] >> (depth_ - 1 - s)) & 1u;
        node = 2 * node + 1 + bit;
    }
    return node - (leaf_count() - 1);
}

std::size_t CenteredTree::leaf_of(PointView x) const {
    if (static_cast<int>(x.size()) != dim_) fail(ErrorKind::Shape, "point dimension mismatch");
    std::array<std::uint64_t, kMaxDim> codes{};
    for (int l = 0; l < dim_; ++l) codes[static_cast<std::size_t>(l)] = dyadic_index(x[static_cast<std::size_t>(l)], depth_);
    return leaf_of_codes(codes.data());
}

SplitDirections CenteredTree::branch(PointView x) const {
    if (static_cast<int>(x.size()) != dim_) fail(ErrorKind::Shape, "point dimension mismatch");
    SplitDirections out{dim_, {}};
    std::vector<int> used(static_cast<std::size_t>(dim_), 0);
    std::size_t node = 0;
    for (int level = 0; level < depth_; ++level) {
        const int d = directions_[node];
        out.dirs.push_back(d);
        const int s = ++used[static_cast<std::size_t>(d)];
        const std::uint64_t bit = dyadic_index(x[static_cast<std::size_t>(d)], s) & 1u;
        node = 2 * node + 1 + bit;
    }
    return out;
}

SplitCounts CenteredTree::leaf_counts(std::size_t leaf) const {
    if (leaf >= leaf_count()) fail(ErrorKind::Domain, "leaf index out of range");
    std::vector<int> c(static_cast<std::size_t>(dim_), 0);
    std::size_t node = leaf + leaf_count() - 1;
    while (node > 0) {
        node = (node - 1) / 2;
        ++c[directions_[node]];
    }
    return SplitCounts(std::move(c));
}

DyadicCell CenteredTree::locate_cell(PointView x) const {
    return DyadicCell::containing(x, tally(branch(x)));
}

CenteredTree build_tree(const SplitRule& rule, int dim, int depth, Rng& rng, std::uint64_t* fallback_moves) {
    rule.validate(dim);
    if (dim > kMaxDim) fail(ErrorKind::InvalidDimension, "tree dimension must be <= 64");
    if (depth < 0 || depth > kMaxDepth) fail(ErrorKind::Configuration, "tree depth must be in [0, 24]");
    const std::size_t internal = (std::size_t{1} << depth) - 1;
    std::vector<std::uint8_t> dirs(internal, 0);

    if (rule.kind == ForestKind::Uniform) {
        if (dim > 1) {
            std::uniform_int_distribution<int> axis(0, dim - 1);
            for (auto& d : dirs) d = static_cast<std::uint8_t>(axis(rng));
        }
    } else {
        std::vector<EhrenfestChain> level{EhrenfestChain(dim, rule.ehrenfest)};
        std::vector<EhrenfestChain> next;
        std::size_t node = 0;
        std::uint64_t fallbacks = 0;
        for (int lvl = 0; lvl < depth; ++lvl) {
            next.clear();
            next.reserve(level.size() * 2);
            for (auto& chain : level) {
                const auto before = chain.fallback_moves();
                dirs[node++] = static_cast<std::uint8_t>(chain.step(rng));
                fallbacks += chain.fallback_moves() - before;
                if (lvl + 1 < depth) {
                    next.push_back(chain);
                    next.push_back(chain);
                }
            }
            level.swap(next);
        }
        if (fallback_moves) *fallback_moves += fallbacks;
    }
    return CenteredTree(dim, depth, rule.kind, std::move(dirs));
}

double tree_predict(const CenteredTree& tree, const TrainingSample& sample,
                    std::span<const std::uint32_t> subset, PointView x0) {
    const std::size_t target = tree.leaf_of(x0);
    double sum = 0.0;
    std::size_t count = 0;
    for (auto i : subset) {
        if (i >= sample.size()) fail(ErrorKind::Domain, "subset index out of range");
        if (tree.leaf_of(sample.point(i)) == target) {
            sum += sample.y[i];
            ++count;
        }
    }
    return count == 0 ? 0.0 : sum / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Forest
// ---------------------------------------------------------------------------

void ForestConfig::validate(int dim, std::size_t n) const {
    rule.validate(dim);
    if (depth < 0 || depth > kMaxDepth) fail(ErrorKind::Configuration, "depth must be in [0, 24]");
    if (trees < 1) fail(ErrorKind::Configuration, "tree count must be >= 1");
    if (subsample_size < 1) fail(ErrorKind::Configuration, "subsample size must be >= 1");
    if (static_cast<std::size_t>(subsample_size) > n)
        fail(ErrorKind::Configuration, "subsample size " + std::to_string(subsample_size) +
                                           " exceeds sample size " + std::to_string(n));
}

FittedForest::FittedForest(ForestConfig config, std::shared_ptr<const TrainingSample> sample,
                           std::vector<CenteredTree> trees, std::vector<std::vector<std::uint32_t>> subsets,
                           std::vector<std::vector<double>> leaf_values, std::uint64_t fallback_moves)
    : config_(std::move(config)), sample_(std::move(sample)), trees_(std::move(trees)),
      subsets_(std::move(subsets)), leaf_values_(std::move(leaf_values)), fallback_moves_(fallback_moves) {
    if (trees_.empty()) fail(ErrorKind::EmptyForest, "forest has no trees");
}

double FittedForest::tree_value(std::size_t j, PointView x0) const {
    return leaf_values_.at(j)[trees_[j].leaf_of(x0)];
}

double FittedForest::predict(PointView x0) const {
    if (static_cast<int>(x0.size()) != sample_->dim) fail(ErrorKind::Shape, "point dimension mismatch");
    std::array<std::uint64_t, kMaxDim> codes{};
    for (int l = 0; l < sample_->dim; ++l)
        codes[static_cast<std::size_t>(l)] = dyadic_index(x0[static_cast<std::size_t>(l)], config_.depth);
    double sum = 0.0;
    for (std::size_t j = 0; j < trees_.size(); ++j) sum += leaf_values_[j][trees_[j].leaf_of_codes(codes.data())];
    return sum / static_cast<double>(trees_.size());
}

std::vector<double> FittedForest::predict_many(std::span<const double> points) const {
    const auto p = static_cast<std::size_t>(sample_->dim);
    if (points.size() % p != 0) fail(ErrorKind::Shape, "point block is not a multiple of the dimension");
    std::vector<double> out(points.size() / p);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = predict(points.subspan(i * p, p));
    return out;
}

std::vector<double> FittedForest::predict_fine_cells() const {
    const int k = config_.depth;
    const int p = sample_->dim;
    if (k * p > 30) fail(ErrorKind::Resource, "fine-cell grid 2^(k p) too large; use predict_many");
    const std::size_t cells = std::size_t{1} << (k * p);
    std::vector<double> acc(cells, 0.0);
    std::vector<std::uint64_t> lo(static_cast<std::size_t>(p), 0);
    std::vector<int> used(static_cast<std::size_t>(p), 0);
    std::vector<std::size_t> stride(static_cast<std::size_t>(p));
    for (int l = 0; l < p; ++l) stride[static_cast<std::size_t>(l)] = std::size_t{1} << (k * (p - 1 - l));

    for (std::size_t j = 0; j < trees_.size(); ++j) {
        const auto& dirs = trees_[j].directions();
        const auto& values = leaf_values_[j];
        const std::size_t first_leaf = trees_[j].leaf_count() - 1;
        std::vector<std::size_t> span(static_cast<std::size_t>(p));
        std::vector<std::uint64_t> pos(static_cast<std::size_t>(p));

        // adds `v` to every fine cell in the box lo + [0, 2^(k - used)) per axis
        auto add_box = [&](double v) {
            for (int l = 0; l < p; ++l) {
                span[static_cast<std::size_t>(l)] = std::size_t{1} << (k - used[static_cast<std::size_t>(l)]);
                pos[static_cast<std::size_t>(l)] = 0;
            }
            const std::size_t last = static_cast<std::size_t>(p - 1);
            while (true) {
                std::size_t base = lo[last];
                for (std::size_t l = 0; l < last; ++l) base += (lo[l] + pos[l]) * stride[l];
                for (std::size_t q = 0; q < span[last]; ++q) acc[base + q] += v;
                bool done = true;
                for (std::size_t l = last; l-- > 0;) {
                    if (++pos[l] < span[l]) {
                        done = false;
                        break;
                    }
                    pos[l] = 0;
                }
                if (done) return;
            }
        };

        auto descend = [&](auto& self, std::size_t node, int level) -> void {
            if (level == k) {
                add_box(values[node - first_leaf]);
                return;
            }
            const auto d = static_cast<std::size_t>(dirs[node]);
            const int s = ++used[d];
            const std::uint64_t half = std::uint64_t{1} << (k - s);
            self(self, 2 * node + 1, level + 1);
            lo[d] += half;
            self(self, 2 * node + 2, level + 1);
            lo[d] -= half;
            --used[d];
        };
        descend(descend, 0, 0);
    }
    const auto n_trees = static_cast<double>(trees_.size());
    for (auto& v : acc) v /= n_trees;
    return acc;
}

namespace {

FittedForest assemble(const ForestConfig& config, std::shared_ptr<const TrainingSample> sample,
                      std::vector<std::vector<std::uint32_t>> subsets, bool draw_subsets, unsigned workers) {
    const std::size_t count = subsets.size();
    const auto codes = dyadic_codes(sample->x, config.depth);
    const auto p = static_cast<std::size_t>(sample->dim);
    std::vector<CenteredTree> trees;
    trees.reserve(count);
    std::vector<std::vector<double>> leaf_values(count);
    std::vector<std::uint64_t> fallbacks(count, 0);
    std::vector<std::optional<CenteredTree>> built(count);

    parallel_for(count, workers, [&](std::size_t j) {
        Rng tree_rng = make_rng(config.seed, Stream::Tree, j);
        built[j].emplace(build_tree(config.rule, sample->dim, config.depth, tree_rng, &fallbacks[j]));
        if (draw_subsets) {
            Rng sub_rng = make_rng(config.seed, Stream::Subsample, j);
            subsets[j] = draw_subset(sample->size(), static_cast<std::size_t>(config.subsample_size), sub_rng);
        }
        const auto& tree = *built[j];
        std::vector<double> sums(tree.leaf_count(), 0.0);
        std::vector<std::uint32_t> counts(tree.leaf_count(), 0);
        for (auto i : subsets[j]) {
            const std::size_t leaf = tree.leaf_of_codes(codes.data() + i * p);
            sums[leaf] += sample->y[i];
            ++counts[leaf];
        }
        for (std::size_t leaf = 0; leaf < sums.size(); ++leaf)
            if (counts[leaf] > 0) sums[leaf] /= static_cast<double>(counts[leaf]);
        leaf_values[j] = std::move(sums);
    });

    std::uint64_t fallback_total = 0;
    for (std::size_t j = 0; j < count; ++j) {
        trees.push_back(std::move(*built[j]));
        fallback_total += fallbacks[j];
    }
    return FittedForest(config, std::move(sample), std::move(trees), std::move(subsets),
                        std::move(leaf_values), fallback_total);
}

} // namespace

FittedForest fit_forest(const ForestConfig& config, std::shared_ptr<const TrainingSample> sample, unsigned workers) {
    if (!sample) fail(ErrorKind::Configuration, "fit_forest: no training sample");
    sample->validate();
    config.validate(sample->dim, sample->size());
    std::size_t count = static_cast<std::size_t>(config.trees);
    if (config.mode == SubsampleMode::Poissonized) {
        Rng rng = make_rng(config.seed, Stream::TreeCount);
        count = static_cast<std::size_t>(std::poisson_distribution<long>(config.trees)(rng));
        if (count == 0) fail(ErrorKind::EmptyForest, "poissonized tree count is zero");
    }
    return assemble(config, std::move(sample), std::vector<std::vector<std::uint32_t>>(count), true, workers);
}

FittedForest fit_forest_on_subsets(const ForestConfig& config, std::shared_ptr<const TrainingSample> sample,
                                   std::vector<std::vector<std::uint32_t>> subsets, unsigned workers) {
    if (!sample) fail(ErrorKind::Configuration, "fit_forest_on_subsets: no training sample");
    sample->validate();
    config.rule.validate(sample->dim);
    if (subsets.empty()) fail(ErrorKind::EmptyForest, "no subsets given");
    for (const auto& s : subsets) {
        if (s.empty()) fail(ErrorKind::Configuration, "empty subset");
        std::vector<std::uint32_t> sorted(s);
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            fail(ErrorKind::Configuration, "subset contains repeated indices");
        if (sorted.back() >= sample->size()) fail(ErrorKind::Domain, "subset index out of range");
    }
    return assemble(config, std::move(sample), std::move(subsets), false, workers);
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

void save_forest_manifest(const FittedForest& forest, const std::string& path) {
    const auto& c = forest.config();
    nlohmann::json j = {
        {"format", "cprf-forest-manifest"},
        {"version", 1},
        {"kind", to_string(c.rule.kind)},
        {"ehrenfest_particles", c.rule.ehrenfest.particles},
        {"ehrenfest_slack", c.rule.ehrenfest.slack},
        {"depth", c.depth},
        {"trees", c.trees},
        {"subsample_size", c.subsample_size},
        {"mode", c.mode == SubsampleMode::FixedCount ? "fixed" : "poissonized"},
        {"seed", c.seed},
        {"n", forest.sample().size()},
        {"dim", forest.sample().dim},
        {"data_checksum", hex64(forest.sample().checksum())},
        {"fitted_trees", forest.tree_count()},
    };
    write_file_atomic(path, j.dump(2) + "\n");
}

ForestManifest load_forest_manifest(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
        if (j.at("format") != "cprf-forest-manifest") fail(ErrorKind::Parse, path + ": not a forest manifest");
        if (j.at("version").get<int>() != 1) fail(ErrorKind::Parse, path + ": unsupported manifest version");
        ForestManifest m;
        m.config.rule.kind = parse_forest_kind(j.at("kind").get<std::string>());
        m.config.rule.ehrenfest.particles = j.at("ehrenfest_particles").get<int>();
        m.config.rule.ehrenfest.slack = j.at("ehrenfest_slack").get<double>();
        m.config.depth = j.at("depth").get<int>();
        m.config.trees = j.at("trees").get<int>();
        m.config.subsample_size = j.at("subsample_size").get<int>();
        m.config.mode = j.at("mode").get<std::string>() == "poissonized" ? SubsampleMode::Poissonized
                                                                         : SubsampleMode::FixedCount;
        m.config.seed = j.at("seed").get<std::uint64_t>();
        m.n = j.at("n").get<std::size_t>();
        m.dim = j.at("dim").get<int>();
        m.data_checksum = std::stoull(j.at("data_checksum").get<std::string>(), nullptr, 16);
        m.fitted_trees = j.at("fitted_trees").get<std::size_t>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Parse, path + ": " + e.what());
    }
}

FittedForest refit_from_manifest(const ForestManifest& manifest, std::shared_ptr<const TrainingSample> sample,
                                 unsigned workers) {
    if (!sample || sample->size() != manifest.n || sample->dim != manifest.dim ||
        sample->checksum() != manifest.data_checksum)
        fail(ErrorKind::Configuration, "training data does not match the manifest checksum");
    return fit_forest(manifest.config, std::move(sample), workers);
}

} // namespace cprf
