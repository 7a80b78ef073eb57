#pragma once
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cprf/partition.hpp"
#include "cprf/rng.hpp"

namespace cprf {

enum class ForestKind { Uniform, Ehrenfest };

const char* to_string(ForestKind kind) noexcept;
ForestKind parse_forest_kind(const std::string& s);

/// Split-direction law of a centered purely random tree.
struct SplitRule {
    ForestKind kind = ForestKind::Uniform;
    EhrenfestConfig ehrenfest{};

    static SplitRule uniform() { return {}; }
    static SplitRule ehrenfest_rule(int particles, double slack) {
        return {ForestKind::Ehrenfest, EhrenfestConfig{particles, slack}};
    }

    void validate(int dim) const;
    /// Draws the split directions of one branch of depth k.
    SplitDirections sample_branch(int depth, int dim, Rng& rng,
                                  std::uint64_t* fallback_moves = nullptr) const;
};

/// Covariates (row-major, n x dim, each coordinate in [0,1]) and responses.
struct TrainingSample {
    int dim = 0;
    std::vector<double> x;
    std::vector<double> y;

    std::size_t size() const noexcept { return y.size(); }
    PointView point(std::size_t i) const {
        return {x.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
    }
    void validate() const;
    /// FNV-1a digest of dim, covariates and responses.
    std::uint64_t checksum() const;
};

/// Reads a CSV with header x1..xp,y. Errors carry the offending line number.
TrainingSample read_training_csv(const std::string& path);
void write_training_csv(const TrainingSample& sample, const std::string& path);

/// Level-`depth` dyadic codes of every coordinate (row-major like the
/// covariates); the tree walks below only need these.
std::vector<std::uint64_t> dyadic_codes(std::span<const double> coords, int depth);

/// Depth-k complete binary tree of midpoint splits. Internal nodes are stored
/// in level order (root 0, children 2i+1 and 2i+2); leaf j is node 2^k - 1 + j.
class CenteredTree {
public:
    CenteredTree(int dim, int depth, ForestKind kind, std::vector<std::uint8_t> directions);

    int dim() const noexcept { return dim_; }
    int depth() const noexcept { return depth_; }
    ForestKind kind() const noexcept { return kind_; }
    std::size_t leaf_count() const noexcept { return std::size_t{1} << depth_; }
    const std::vector<std::uint8_t>& directions() const noexcept { return directions_; }

    /// Leaf index for a point given by its level-k dyadic codes.
    std::size_t leaf_of_codes(const std::uint64_t* codes) const noexcept;
    std::size_t leaf_of(PointView x) const;
    DyadicCell locate_cell(PointView x) const;
    SplitDirections branch(PointView x) const;
    SplitCounts leaf_counts(std::size_t leaf) const;

private:
    int dim_;
    int depth_;
    ForestKind kind_;
    std::vector<std::uint8_t> directions_;
};

/// Uniform trees draw every node's direction independently. Ehrenfest trees
/// run one urn move per split; both children inherit the post-move state and
/// continue independently, so every branch follows the urn's branch law.
CenteredTree build_tree(const SplitRule& rule, int dim, int depth, Rng& rng,
                        std::uint64_t* fallback_moves = nullptr);

/// Mean response of the subsample points sharing x0's leaf; 0 for an empty leaf.
double tree_predict(const CenteredTree& tree, const TrainingSample& sample,
                    std::span<const std::uint32_t> subset, PointView x0);

enum class SubsampleMode { FixedCount, Poissonized };

struct ForestConfig {
    SplitRule rule{};
    int depth = 5;
    int trees = 100;
    int subsample_size = 1;
    SubsampleMode mode = SubsampleMode::FixedCount;
    std::uint64_t seed = 0;

    void validate(int dim, std::size_t n) const;
};

class FittedForest {
public:
    FittedForest(ForestConfig config, std::shared_ptr<const TrainingSample> sample,
                 std::vector<CenteredTree> trees, std::vector<std::vector<std::uint32_t>> subsets,
                 std::vector<std::vector<double>> leaf_values, std::uint64_t fallback_moves);

    const ForestConfig& config() const noexcept { return config_; }
    const TrainingSample& sample() const noexcept { return *sample_; }
    std::size_t tree_count() const noexcept { return trees_.size(); }
    const CenteredTree& tree(std::size_t j) const { return trees_.at(j); }
    const std::vector<std::uint32_t>& subset(std::size_t j) const { return subsets_.at(j); }
    std::uint64_t fallback_moves() const noexcept { return fallback_moves_; }

    /// Prediction of tree j at x0 from its cached leaf means.
    double tree_value(std::size_t j, PointView x0) const;
    double predict(PointView x0) const;
    /// Row-major points (count x dim); one value per point, in order.
    std::vector<double> predict_many(std::span<const double> points) const;

    /// The forest is constant on level-k dyadic cells; returns its value on all
    /// 2^(k p) of them, indexed by sum_l code_l * 2^(k (p-1-l)).
    std::vector<double> predict_fine_cells() const;

private:
    ForestConfig config_;
    std::shared_ptr<const TrainingSample> sample_;
    std::vector<CenteredTree> trees_;
    std::vector<std::vector<std::uint32_t>> subsets_;
    std::vector<std::vector<double>> leaf_values_;
    std::uint64_t fallback_moves_;
};

/// Tree j is grown from stream (seed, Tree, j) and its subsample is drawn
/// without replacement from stream (seed, Subsample, j); results do not
/// depend on the worker count.
FittedForest fit_forest(const ForestConfig& config, std::shared_ptr<const TrainingSample> sample,
                        unsigned workers = 0);

/// Same trees as fit_forest for the same seed, on caller-provided subsets.
FittedForest fit_forest_on_subsets(const ForestConfig& config,
                                   std::shared_ptr<const TrainingSample> sample,
                                   std::vector<std::vector<std::uint32_t>> subsets,
                                   unsigned workers = 0);

/// Seeds and configuration are enough to rebuild a forest on the same data.
void save_forest_manifest(const FittedForest& forest, const std::string& path);
struct ForestManifest {
    ForestConfig config;
    std::size_t n = 0;
    int dim = 0;
    std::uint64_t data_checksum = 0;
    std::size_t fitted_trees = 0;
};
ForestManifest load_forest_manifest(const std::string& path);
FittedForest refit_from_manifest(const ForestManifest& manifest,
                                 std::shared_ptr<const TrainingSample> sample, unsigned workers = 0);

} // namespace cprf
