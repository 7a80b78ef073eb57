#pragma once
#include <cstdint>
#include <span>
#include <vector>

#include "cprf/rng.hpp"

// Split-direction samplers and dyadic cell geometry for centered purely
// random partitions. Axis indices are zero-based throughout: a split along
// axis l halves the current cell orthogonally to coordinate l.

namespace cprf {

using PointView = std::span<const double>;

/// Split directions along one root-to-leaf branch, in split order.
struct SplitDirections {
    int dim = 0;
    std::vector<int> dirs;

    int depth() const noexcept { return static_cast<int>(dirs.size()); }
};

/// Per-axis split tallies (S_1, ..., S_p) of a branch; they sum to the depth.
struct SplitCounts {
    std::vector<int> counts;

    SplitCounts() = default;
    explicit SplitCounts(std::vector<int> c) : counts(std::move(c)) {}

    int dim() const noexcept { return static_cast<int>(counts.size()); }
    int depth() const noexcept;
    int operator[](int axis) const { return counts[static_cast<std::size_t>(axis)]; }

    bool operator==(const SplitCounts&) const = default;
};

SplitCounts tally(const SplitDirections& dirs);

/// Particle-model parameters: `particles` per container (B) and the
/// threshold slack (Delta), which must exceed particles / dim.
struct EhrenfestConfig {
    int particles = 12;
    double slack = 7.0;

    void validate(int dim) const;
    /// Upper excess bound Delta + p*B on any S_l above k/p.
    double upper_excess(int dim) const noexcept { return slack + dim * particles; }
    /// Lower deficit bound (p-1)(Delta + p*B) on any S_l below k/p.
    double lower_deficit(int dim) const noexcept { return (dim - 1) * upper_excess(dim); }
};

/// Ehrenfest urn driving split directions. Each step picks a particle
/// uniformly among all p*B, splits along its container's axis, then moves it
/// to a container j != i drawn uniformly from those with
/// p * S_j < t + p * Delta, where S and t are taken before the step.
class EhrenfestChain {
public:
    EhrenfestChain(int dim, const EhrenfestConfig& cfg);

    /// Performs one split and returns its axis.
    int step(Rng& rng);

    int dim() const noexcept { return static_cast<int>(occupancy_.size()); }
    int steps() const noexcept { return steps_; }
    const std::vector<int>& occupancy() const noexcept { return occupancy_; }
    const std::vector<int>& splits() const noexcept { return splits_; }
    /// Steps whose eligible destination set was empty; the particle then goes
    /// to the least-split other container (lowest index on ties).
    std::uint64_t fallback_moves() const noexcept { return fallback_moves_; }

private:
    int total_particles_;
    double slack_;
    int steps_ = 0;
    std::uint64_t fallback_moves_ = 0;
    std::vector<int> occupancy_;
    std::vector<int> splits_;
    std::vector<int> eligible_;
};

SplitDirections sample_uniform_splits(int depth, int dim, Rng& rng);

/// Samples one branch. `fallback_moves`, when given, is incremented by the
/// number of empty-eligible-set events encountered.
SplitDirections sample_ehrenfest_splits(int depth, int dim, const EhrenfestConfig& cfg,
                                        Rng& rng, std::uint64_t* fallback_moves = nullptr);

/// Index of the level-`level` dyadic interval holding x in [0,1]:
/// floor(x 2^level), with x == 1 mapped into the last interval.
std::uint64_t dyadic_index(double x, int level);

void check_unit_point(PointView x);

/// Axis-aligned dyadic box: axis l spans [i_l 2^-S_l, (i_l + 1) 2^-S_l).
class DyadicCell {
public:
    DyadicCell(std::vector<std::uint64_t> index, SplitCounts counts);

    /// The cell with side lengths 2^-S_l that contains `anchor`.
    static DyadicCell containing(PointView anchor, const SplitCounts& counts);

    int dim() const noexcept { return counts_.dim(); }
    const SplitCounts& counts() const noexcept { return counts_; }
    const std::vector<std::uint64_t>& index() const noexcept { return index_; }

    double lower(int axis) const;
    double upper(int axis) const;
    double side(int axis) const;
    double volume() const;
    bool contains(PointView x) const;

private:
    std::vector<std::uint64_t> index_;
    SplitCounts counts_;
};

/// Per axis, the deepest level t <= depth at which x1 and x2 share a dyadic
/// interval.
std::vector<int> closeness_vector(PointView x1, PointView x2, int depth);

/// Closeness from level-`depth` dyadic codes; equivalent to closeness_vector
/// on points with those codes.
int closeness_from_codes(std::uint64_t a, std::uint64_t b, int depth) noexcept;

/// Exact Lebesgue volume of the intersection of the dyadic cells with split
/// counts s1 around x1 and s2 around x2.
double intersection_volume(PointView x1, const SplitCounts& s1, PointView x2,
                           const SplitCounts& s2);

/// Euclidean diameter (sum_l 4^-S_l)^(1/2) of a cell with the given counts.
double cell_diameter(const SplitCounts& s);

/// The set of nondecreasing vectors in {0..depth}^dim, lexicographically
/// ordered, with a constant-time-per-entry rank (tau) and unrank.
class ClosenessIndex {
public:
    ClosenessIndex(int depth, int dim);

    int depth() const noexcept { return depth_; }
    int dim() const noexcept { return dim_; }
    std::size_t size() const noexcept { return size_; }

    /// Zero-based lexicographic rank of a nondecreasing vector.
    std::size_t rank(std::span<const int> sorted) const;
    std::vector<int> unrank(std::size_t r) const;
    /// Rank of the sorted copy of an arbitrary closeness vector.
    std::size_t rank_unsorted(std::span<const int> c) const;

    std::vector<std::vector<int>> enumerate() const;

private:
    // number of nondecreasing sequences of length len with entries in [v, depth]
    std::uint64_t tail_count(int len, int v) const;

    int depth_;
    int dim_;
    std::size_t size_;
    std::vector<std::vector<std::uint64_t>> binom_;
};

std::uint64_t binomial(int n, int r);

} // namespace cprf
