#pragma once

#include "psteer/errors.hpp"
#include "psteer/rng.hpp"

#include <cstddef>
#include <span>
#include <vector>

namespace psteer {

// Dense row-major tensor of 64-bit reals. Feature maps are stored
// channel-major [c,h,w] so per-channel reductions run over contiguous
// memory. Instances are values: every operation returns a new tensor and
// construction rejects non-finite entries.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor full(std::vector<std::size_t> shape, double value);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::span<const double> data() const { return data_; }
    std::vector<double> take() && { return std::move(data_); }

    double operator[](std::size_t i) const { return data_[i]; }

    // Rank-3 [c,h,w] element access.
    double at(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * shape_[1] + y) * shape_[2] + x];
    }

    std::size_t channels() const;
    std::size_t height() const;
    std::size_t width() const;

    // One contiguous channel plane of a rank-3 tensor.
    std::span<const double> channel(std::size_t c) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// Per-channel mean / population standard deviation (the 1/N convention used
// by instance normalization, not the 1/(N-1) sample estimator).
struct ChannelStats {
    std::vector<double> mu;
    std::vector<double> sigma;
};

// Channel-wise statistics of a [c,h,w] feature map.
ChannelStats channel_stats(const Tensor& f);

// Unit-norm copy of a rank-1 tensor; throws DegenerateInputError on zero.
Tensor l2_normalize(const Tensor& v);

// Distribution tags for rng_fill.
struct UniformSym {
    double bound; // entries drawn from [-bound, bound)
};
struct NormalDist {
    double stddev; // entries drawn from N(0, stddev^2)
};

// Deterministic tensor fill: identical (shape, seed, distribution) triples
// produce bit-identical output.
Tensor rng_fill(std::vector<std::size_t> shape, std::uint64_t seed, UniformSym dist);
Tensor rng_fill(std::vector<std::size_t> shape, std::uint64_t seed, NormalDist dist);

// Small dense-vector helpers shared across modules.
double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

} // namespace psteer
