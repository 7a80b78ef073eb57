#include "cprf/partition.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "cprf/error.hpp"

namespace cprf {

namespace {

void check_dim(int dim) {
    if (dim < 1) fail(ErrorKind::InvalidDimension, "dimension must be >= 1, got " + std::to_string(dim));
}

void check_depth(int depth) {
    if (depth < 0) fail(ErrorKind::Configuration, "depth must be >= 0, got " + std::to_string(depth));
    if (depth > 60) fail(ErrorKind::Configuration, "depth above 60 is not representable");
}

} // namespace

int SplitCounts::depth() const noexcept {
    return std::accumulate(counts.begin(), counts.end(), 0);
}

SplitCounts tally(const SplitDirections& dirs) {
    std::vector<int> c(static_cast<std::size_t>(dirs.dim), 0);
    for (int d : dirs.dirs) ++c[static_cast<std::size_t>(d)];
    return SplitCounts(std::move(c));
}

void EhrenfestConfig::validate(int dim) const {
    check_dim(dim);
    if (particles < 1)
        fail(ErrorKind::Configuration, "Ehrenfest particles per container must be >= 1");
    // one axis leaves nothing to regularize; every split goes there
    if (dim > 1 && !(slack > static_cast<double>(particles) / dim))
        fail(ErrorKind::Configuration,
             "Ehrenfest slack must exceed particles/dim (" + std::to_string(slack) +
                 " <= " + std::to_string(static_cast<double>(particles) / dim) + ")");
}

EhrenfestChain::EhrenfestChain(int dim, const EhrenfestConfig& cfg)
    : total_particles_(dim * cfg.particles), slack_(cfg.slack),
      occupancy_(static_cast<std::size_t>(dim), cfg.particles),
      splits_(static_cast<std::size_t>(dim), 0) {
    cfg.validate(dim);
    eligible_.reserve(static_cast<std::size_t>(dim));
}

int EhrenfestChain::step(Rng& rng) {
    const int p = dim();
    int draw = std::uniform_int_distribution<int>(0, total_particles_ - 1)(rng);
    int from = 0;
    while (draw >= occupancy_[static_cast<std::size_t>(from)]) {
        draw -= occupancy_[static_cast<std::size_t>(from)];
        ++from;
    }

    if (p > 1) {
        const double threshold = steps_ + p * slack_;
        eligible_.clear();
        for (int j = 0; j < p; ++j)
            if (j != from && p * splits_[static_cast<std::size_t>(j)] < threshold) eligible_.push_back(j);

        int to;
        if (!eligible_.empty()) {
            to = eligible_.size() == 1
                     ? eligible_.front()
                     : eligible_[std::uniform_int_distribution<std::size_t>(0, eligible_.size() - 1)(rng)];
        } else {
            ++fallback_moves_;
            to = -1;
            for (int j = 0; j < p; ++j) {
                if (j == from) continue;
                if (to < 0 || splits_[static_cast<std::size_t>(j)] < splits_[static_cast<std::size_t>(to)]) to = j;
            }
        }
        --occupancy_[static_cast<std::size_t>(from)];
        ++occupancy_[static_cast<std::size_t>(to)];
    }
    ++splits_[static_cast<std::size_t>(from)];
    ++steps_;
    return from;
}

SplitDirections sample_uniform_splits(int depth, int dim, Rng& rng) {
    check_dim(dim);
    check_depth(depth);
    SplitDirections out{dim, std::vector<int>(static_cast<std::size_t>(depth), 0)};
    if (dim == 1) return out;
    std::uniform_int_distribution<int> axis(0, dim - 1);
    for (auto& d : out.dirs) d = axis(rng);
    return out;
}

SplitDirections sample_ehrenfest_splits(int depth, int dim, const EhrenfestConfig& cfg, Rng& rng,
                                        std::uint64_t* fallback_moves) {
    check_depth(depth);
    EhrenfestChain chain(dim, cfg);
    SplitDirections out{dim, {}};
    out.dirs.reserve(static_cast<std::size_t>(depth));
    for (int t = 0; t < depth; ++t) out.dirs.push_back(chain.step(rng));
    if (fallback_moves) *fallback_moves += chain.fallback_moves();
    return out;
}

std::uint64_t dyadic_index(double x, int level) {
    if (!(x >= 0.0 && x <= 1.0))
        fail(ErrorKind::Domain, "coordinate outside [0,1]: " + std::to_string(x));
    const std::uint64_t cells = std::uint64_t{1} << level;
    // scaling by a power of two is exact, so the floor is exact as well
    const auto idx = static_cast<std::uint64_t>(std::floor(std::ldexp(x, level)));
    return std::min(idx, cells - 1);
}

void check_unit_point(PointView x) {
    for (double v : x)
        if (!(v >= 0.0 && v <= 1.0))
            fail(ErrorKind::Domain, "coordinate outside [0,1]: " + std::to_string(v));
}

DyadicCell::DyadicCell(std::vector<std::uint64_t> index, SplitCounts counts)
    : index_(std::move(index)), counts_(std::move(counts)) {
    if (index_.size() != counts_.counts.size())
        fail(ErrorKind::Shape, "cell index and split counts differ in dimension");
}

DyadicCell DyadicCell::containing(PointView anchor, const SplitCounts& counts) {
    if (anchor.size() != counts.counts.size())
        fail(ErrorKind::Shape, "anchor and split counts differ in dimension");
    std::vector<std::uint64_t> idx(anchor.size());
    for (std::size_t l = 0; l < anchor.size(); ++l) idx[l] = dyadic_index(anchor[l], counts.counts[l]);
    return DyadicCell(std::move(idx), counts);
}

double DyadicCell::lower(int axis) const {
    return std::ldexp(static_cast<double>(index_[static_cast<std::size_t>(axis)]), -counts_[axis]);
}

double DyadicCell::upper(int axis) const {
    return std::ldexp(static_cast<double>(index_[static_cast<std::size_t>(axis)] + 1), -counts_[axis]);
}

double DyadicCell::side(int axis) const { return std::ldexp(1.0, -counts_[axis]); }

double DyadicCell::volume() const { return std::ldexp(1.0, -counts_.depth()); }

bool DyadicCell::contains(PointView x) const {
    if (x.size() != index_.size()) fail(ErrorKind::Shape, "point dimension mismatch");
    for (std::size_t l = 0; l < x.size(); ++l)
        if (dyadic_index(x[l], counts_.counts[l]) != index_[l]) return false;
    return true;
}

int closeness_from_codes(std::uint64_t a, std::uint64_t b, int depth) noexcept {
    return depth - static_cast<int>(std::bit_width(a ^ b));
}

std::vector<int> closeness_vector(PointView x1, PointView x2, int depth) {
    if (x1.size() != x2.size()) fail(ErrorKind::Shape, "points differ in dimension");
    check_depth(depth);
    std::vector<int> c(x1.size());
    for (std::size_t l = 0; l < x1.size(); ++l)
        c[l] = closeness_from_codes(dyadic_index(x1[l], depth), dyadic_index(x2[l], depth), depth);
    return c;
}

double intersection_volume(PointView x1, const SplitCounts& s1, PointView x2, const SplitCounts& s2) {
    const std::size_t p = s1.counts.size();
    if (s2.counts.size() != p || x1.size() != p || x2.size() != p)
        fail(ErrorKind::Shape, "intersection_volume: dimension mismatch");
    if (s1.depth() != s2.depth()) fail(ErrorKind::Shape, "intersection_volume: depth mismatch");
    int exponent = 0;
    bool overlap = true;
    for (std::size_t l = 0; l < p; ++l) {
        const int lo = std::min(s1.counts[l], s2.counts[l]);
        exponent += std::max(s1.counts[l], s2.counts[l]);
        if (dyadic_index(x1[l], lo) != dyadic_index(x2[l], lo)) overlap = false;
    }
    return overlap ? std::ldexp(1.0, -exponent) : 0.0;
}

double cell_diameter(const SplitCounts& s) {
    double sum = 0.0;
    for (int c : s.counts) sum += std::ldexp(1.0, -2 * c);
    return std::sqrt(sum);
}

std::uint64_t binomial(int n, int r) {
    if (r < 0 || r > n) return 0;
    r = std::min(r, n - r);
    std::uint64_t out = 1;
    for (int i = 1; i <= r; ++i) out = out * static_cast<std::uint64_t>(n - r + i) / static_cast<std::uint64_t>(i);
    return out;
}

ClosenessIndex::ClosenessIndex(int depth, int dim) : depth_(depth), dim_(dim) {
    check_dim(dim);
    check_depth(depth);
    const int top = depth + dim;
    binom_.assign(static_cast<std::size_t>(top + 1), {});
    for (int n = 0; n <= top; ++n) {
        binom_[static_cast<std::size_t>(n)].assign(static_cast<std::size_t>(n + 1), 1);
        for (int r = 1; r < n; ++r)
            binom_[static_cast<std::size_t>(n)][static_cast<std::size_t>(r)] =
                binom_[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(r - 1)] +
                binom_[static_cast<std::size_t>(n - 1)][static_cast<std::size_t>(r)];
    }
    size_ = static_cast<std::size_t>(binom_[static_cast<std::size_t>(top)][static_cast<std::size_t>(dim)]);
}

std::uint64_t ClosenessIndex::tail_count(int len, int v) const {
    const int n = depth_ - v + len;
    return binom_[static_cast<std::size_t>(n)][static_cast<std::size_t>(len)];
}

std::size_t ClosenessIndex::rank(std::span<const int> sorted) const {
    if (static_cast<int>(sorted.size()) != dim_) fail(ErrorKind::Shape, "closeness vector has wrong dimension");
    std::uint64_t r = 0;
    int prev = 0;
    for (int pos = 0; pos < dim_; ++pos) {
        const int c = sorted[static_cast<std::size_t>(pos)];
        if (c < prev || c > depth_) fail(ErrorKind::Domain, "closeness vector is not a nondecreasing vector in [0,k]");
        for (int v = prev; v < c; ++v) r += tail_count(dim_ - pos - 1, v);
        prev = c;
    }
    return static_cast<std::size_t>(r);
}

std::vector<int> ClosenessIndex::unrank(std::size_t r) const {
    if (r >= size_) fail(ErrorKind::Domain, "closeness rank out of range");
    std::vector<int> out(static_cast<std::size_t>(dim_));
    std::uint64_t rest = r;
    int v = 0;
    for (int pos = 0; pos < dim_; ++pos) {
        while (rest >= tail_count(dim_ - pos - 1, v)) {
            rest -= tail_count(dim_ - pos - 1, v);
            ++v;
        }
        out[static_cast<std::size_t>(pos)] = v;
    }
    return out;
}

std::size_t ClosenessIndex::rank_unsorted(std::span<const int> c) const {
    std::vector<int> s(c.begin(), c.end());
    std::sort(s.begin(), s.end());
    return rank(s);
}

std::vector<std::vector<int>> ClosenessIndex::enumerate() const {
    std::vector<std::vector<int>> out;
    out.reserve(size_);
    std::vector<int> cur(static_cast<std::size_t>(dim_), 0);
    while (true) {
        out.push_back(cur);
        // next nondecreasing vector in lexicographic order
        int pos = dim_ - 1;
        while (pos >= 0 && cur[static_cast<std::size_t>(pos)] == depth_) --pos;
        if (pos < 0) break;
        const int v = cur[static_cast<std::size_t>(pos)] + 1;
        for (int q = pos; q < dim_; ++q) cur[static_cast<std::size_t>(q)] = v;
    }
    return out;
}

} // namespace cprf
