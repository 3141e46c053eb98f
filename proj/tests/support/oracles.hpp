#pragma once

// Independent reference implementations used only by tests. Each oracle is a
// straight-line recomputation that deliberately avoids sharing code or loop
// structure with the library path it checks.

#include "psteer/encoder.hpp"
#include "psteer/tensor.hpp"

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace oracles {

// Two-pass mean / population std, long-double accumulation, reversed
// iteration order.
struct MeanStd {
    double mean;
    double std;
};

inline MeanStd two_pass_mean_std(std::span<const double> xs) {
    long double sum = 0.0L;
    for (std::size_t i = xs.size(); i-- > 0;) {
        sum += xs[i];
    }
    const long double mean = sum / static_cast<long double>(xs.size());
    long double sq = 0.0L;
    for (std::size_t i = xs.size(); i-- > 0;) {
        const long double d = xs[i] - mean;
        sq += d * d;
    }
    return {static_cast<double>(mean),
            static_cast<double>(std::sqrt(sq / static_cast<long double>(xs.size())))};
}

// Naive 3x3 stride-2 zero-pad-1 convolution, iterating input-side taps in
// (kx, ky, ci) order instead of the library's (ci, ky, kx).
inline std::vector<double> naive_conv3x3_s2(const psteer::Tensor& in,
                                            std::span<const double> w,
                                            std::span<const double> b, std::size_t c_out,
                                            bool relu) {
    const std::size_t c_in = in.shape()[0];
    const std::size_t h = in.shape()[1];
    const std::size_t wd = in.shape()[2];
    const std::size_t h2 = (h - 1) / 2 + 1;
    const std::size_t w2 = (wd - 1) / 2 + 1;
    std::vector<double> out(c_out * h2 * w2, 0.0);
    for (std::size_t co = 0; co < c_out; ++co) {
        for (std::size_t oy = 0; oy < h2; ++oy) {
            for (std::size_t ox = 0; ox < w2; ++ox) {
                double acc = 0.0;
                for (std::size_t kx = 0; kx < 3; ++kx) {
                    for (std::size_t ky = 0; ky < 3; ++ky) {
                        for (std::size_t ci = 0; ci < c_in; ++ci) {
                            const long long iy = 2LL * static_cast<long long>(oy) +
                                                 static_cast<long long>(ky) - 1;
                            const long long ix = 2LL * static_cast<long long>(ox) +
                                                 static_cast<long long>(kx) - 1;
                            if (iy < 0 || iy >= static_cast<long long>(h) || ix < 0 ||
                                ix >= static_cast<long long>(wd)) {
                                continue;
                            }
                            acc += w[((co * c_in + ci) * 3 + ky) * 3 + kx] *
                                   in.at(ci, static_cast<std::size_t>(iy),
                                         static_cast<std::size_t>(ix));
                        }
                    }
                }
                acc += b[co];
                if (relu && acc < 0.0) {
                    acc = 0.0;
                }
                out[(co * h2 + oy) * w2 + ox] = acc;
            }
        }
    }
    return out;
}

// Monolithic embedding head: tail conv -> ReLU -> pool -> proj -> normalize,
// computed with the naive conv above and reversed summation orders.
inline std::vector<double> naive_embed_from_layer1(const psteer::Tensor& f,
                                                   const psteer::enc::EncoderWeights& w) {
    const auto& dims = w.dims();
    const auto pre = naive_conv3x3_s2(f, w.tail_w(), w.tail_b(), dims.c2, false);
    const std::size_t h2 = (f.shape()[1] - 1) / 2 + 1;
    const std::size_t w2 = (f.shape()[2] - 1) / 2 + 1;
    const std::size_t plane = h2 * w2;
    std::vector<double> pooled(dims.c2, 0.0);
    for (std::size_t c = 0; c < dims.c2; ++c) {
        long double s = 0.0L;
        for (std::size_t i = plane; i-- > 0;) {
            const double v = pre[c * plane + i];
            s += v > 0.0 ? v : 0.0;
        }
        pooled[c] = static_cast<double>(s / static_cast<long double>(plane));
    }
    std::vector<double> raw(dims.d, 0.0);
    for (std::size_t i = 0; i < dims.d; ++i) {
        long double s = 0.0L;
        for (std::size_t c = dims.c2; c-- > 0;) {
            s += w.proj()[i * dims.c2 + c] * pooled[c];
        }
        raw[i] = static_cast<double>(s);
    }
    long double nn = 0.0L;
    for (double v : raw) {
        nn += static_cast<long double>(v) * v;
    }
    const double n = static_cast<double>(std::sqrt(nn));
    for (double& v : raw) {
        v /= n;
    }
    return raw;
}

// Central finite difference of a scalar function at x along one coordinate.
inline double central_difference(const std::function<double(double)>& f, double x,
                                 double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

} // namespace oracles
