#include "psteer/tensor.hpp"

#include <cmath>
#include <numeric>
#include <string>

namespace psteer {

namespace {

std::size_t checked_element_count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) {
            throw ShapeError("tensor dimensions must be positive");
        }
        n *= d;
    }
    return n;
}

void check_finite(std::span<const double> data) {
    for (double v : data) {
        if (!std::isfinite(v)) {
            throw NumericError("tensor entry is not finite");
        }
    }
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_element_count(shape_) != data_.size()) {
        throw ShapeError("data length " + std::to_string(data_.size()) +
                         " does not match shape product");
    }
    check_finite(data_);
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    const std::size_t n = checked_element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
    const std::size_t n = checked_element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

std::size_t Tensor::channels() const {
    if (rank() != 3) {
        throw ShapeError("channels() requires a rank-3 tensor");
    }
    return shape_[0];
}

std::size_t Tensor::height() const {
    if (rank() != 3) {
        throw ShapeError("height() requires a rank-3 tensor");
    }
    return shape_[1];
}

std::size_t Tensor::width() const {
    if (rank() != 3) {
        throw ShapeError("width() requires a rank-3 tensor");
    }
    return shape_[2];
}

std::span<const double> Tensor::channel(std::size_t c) const {
    const std::size_t plane = height() * width();
    return std::span<const double>(data_).subspan(c * plane, plane);
}

ChannelStats channel_stats(const Tensor& f) {
    if (f.rank() != 3) {
        throw ShapeError("channel_stats expects a [c,h,w] tensor");
    }
    const std::size_t c = f.shape()[0];
    const std::size_t n = f.shape()[1] * f.shape()[2];
    ChannelStats stats;
    stats.mu.resize(c);
    stats.sigma.resize(c);
    for (std::size_t k = 0; k < c; ++k) {
        const auto plane = f.channel(k);
        double sum = 0.0;
        for (double v : plane) {
            sum += v;
        }
        const double mean = sum / static_cast<double>(n);
        double sq = 0.0;
        for (double v : plane) {
            const double d = v - mean;
            sq += d * d;
        }
        stats.mu[k] = mean;
        stats.sigma[k] = std::sqrt(sq / static_cast<double>(n));
    }
    return stats;
}

Tensor l2_normalize(const Tensor& v) {
    if (v.rank() != 1) {
        throw ShapeError("l2_normalize expects a rank-1 tensor");
    }
    const double n = norm2(v.data());
    if (n == 0.0) {
        throw DegenerateInputError("cannot normalize a zero vector");
    }
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = v[i] / n;
    }
    return Tensor(v.shape(), std::move(out));
}

Tensor rng_fill(std::vector<std::size_t> shape, std::uint64_t seed, UniformSym dist) {
    const std::size_t n = checked_element_count(shape);
    SeededRng rng(seed);
    std::vector<double> data(n);
    for (double& v : data) {
        v = rng.uniform(-dist.bound, dist.bound);
    }
    return Tensor(std::move(shape), std::move(data));
}

Tensor rng_fill(std::vector<std::size_t> shape, std::uint64_t seed, NormalDist dist) {
    const std::size_t n = checked_element_count(shape);
    SeededRng rng(seed);
    std::vector<double> data(n);
    for (double& v : data) {
        v = rng.normal(0.0, dist.stddev);
    }
    return Tensor(std::move(shape), std::move(data));
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

double norm2(std::span<const double> a) {
    return std::sqrt(dot(a, a));
}

} // namespace psteer
