#pragma once

#include "psteer/encoder.hpp"
#include "psteer/tensor.hpp"

#include <filesystem>
#include <vector>

namespace psteer::steer {

using psteer::Tensor;

// Optimizable per-channel target statistics.
struct StyleStats {
    std::vector<double> mu;
    std::vector<double> sigma;
};

struct SteeringConfig {
    int steps = 100;
    double lr = 0.05;
    double momentum = 0.0;    // classical momentum; 0 reproduces plain descent
    double sigma_min = 1e-4;  // clamp applied after every update step
    double eps = 1e-5;        // denominator guard for constant channels
};

struct SteeredEntry {
    StyleStats stats;
    double loss_init = 0.0;
    double loss_final = 0.0;
};

// One optimized (mu, sigma) pair per source feature map, in input order.
struct StyleSet {
    SteeringConfig config;
    std::vector<SteeredEntry> entries;
};

// Per-channel affine re-statistics toward s:
//   out_k = s.sigma[k] * (f_k - mu(f)_k) / (sigma(f)_k + eps) + s.mu[k]
Tensor pin(const Tensor& f, const StyleStats& s, double eps = 1e-5);

// 1 - cos(a, b). Accepts pre-normalization inputs; value in [0, 2].
double cosine_loss(std::span<const double> a, std::span<const double> b);

struct StyleGradient {
    std::vector<double> mu;
    std::vector<double> sigma;
    double loss = 0.0; // loss at the evaluation point, from the same forward pass
};

// Exact gradient of cosine_loss(embed_from_layer1(pin(f, s)), trg) with
// respect to s, via the chain through the tail conv, ReLU (subgradient 0 at
// 0), pooling, projection, and normalization.
StyleGradient style_grad(const Tensor& f, const StyleStats& s, const enc::Embedding& trg,
                         const enc::EncoderWeights& w, double eps = 1e-5);

// Per-feature optimization loop: init at channel_stats(f), run cfg.steps
// momentum-descent updates, clamp sigma, record initial and final loss.
StyleSet steer(const std::vector<Tensor>& features, const enc::Embedding& trg,
               const SteeringConfig& cfg, const enc::EncoderWeights& w);

// JSON style-set file; reals carry 17 significant digits so a read-back is
// value-exact.
void write_styleset_file(const std::filesystem::path& path, const StyleSet& set,
                         const std::string& meta_json = "");
StyleSet read_styleset_file(const std::filesystem::path& path);

} // namespace psteer::steer
