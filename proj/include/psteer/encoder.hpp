#pragma once

#include "psteer/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace psteer::enc {

using psteer::Tensor;

// Architecture widths. Defaults are the production encoder; tests exercising
// low-channel fixtures construct narrower variants. Serialized weight files
// always describe the default geometry.
struct EncoderDims {
    std::size_t c_in = 3;   // image channels
    std::size_t c1 = 8;     // stem output ("layer 1") channels
    std::size_t c2 = 16;    // tail output channels
    std::size_t d = 32;     // joint embedding dimension
    std::size_t vocab = 64; // text hash buckets

    bool operator==(const EncoderDims&) const = default;
};

// Frozen toy dual encoder. Every parameter block is re-derived from the seed
// (block b uses stream seed ^ b, entries N(0, 1/sqrt(fan_in))), so weights are
// never serialized: a weights file stores the seed alone. All accessors are
// const; nothing in the library mutates an instance after construction.
class EncoderWeights {
public:
    explicit EncoderWeights(std::uint64_t seed, EncoderDims dims = {});

    // Test configuration with both conv biases zeroed, used by the
    // positive-homogeneity checks.
    static EncoderWeights zero_bias(std::uint64_t seed, EncoderDims dims = {});

    std::uint64_t seed() const { return seed_; }
    const EncoderDims& dims() const { return dims_; }

    // stem: [c1, c_in, 3, 3] + [c1]
    std::span<const double> stem_w() const { return stem_w_; }
    std::span<const double> stem_b() const { return stem_b_; }
    // tail: [c2, c1, 3, 3] + [c2]
    std::span<const double> tail_w() const { return tail_w_; }
    std::span<const double> tail_b() const { return tail_b_; }
    // proj: [d, c2]
    std::span<const double> proj() const { return proj_; }
    // text_proj: [d, vocab]
    std::span<const double> text_proj() const { return text_proj_; }

    // Concatenated parameter bytes, used by frozen-contract tests.
    std::vector<unsigned char> fingerprint() const;

private:
    std::uint64_t seed_;
    EncoderDims dims_;
    std::vector<double> stem_w_, stem_b_, tail_w_, tail_b_, proj_, text_proj_;
};

// Unit-norm vector in the joint vision-language space.
class Embedding {
public:
    // Normalizes on construction; throws DegenerateInputError on zero norm.
    explicit Embedding(std::vector<double> raw);

    std::span<const double> vec() const { return vec_; }
    std::size_t dim() const { return vec_.size(); }

private:
    std::vector<double> vec_;
};

// Lowercased, trimmed, single-space separated prompt text.
class PromptString {
public:
    explicit PromptString(const std::string& text);

    const std::string& text() const { return text_; }

private:
    std::string text_;
};

// 3x3 stride-2 zero-pad-1 convolution, the only conv geometry in the model
// zoo. Weights are [c_out, c_in, 3, 3] row-major; bias is [c_out]. Shared by
// the frozen encoder and the trainable student stem.
Tensor conv3x3_s2(const Tensor& in, std::span<const double> w, std::span<const double> b,
                  std::size_t c_out, bool relu);

// Stem convolution (3x3, stride 2, zero padding 1) followed by ReLU.
// Input [c_in,H,W] with H, W even and >= 8; output [c1,H/2,W/2].
Tensor encode_image_layer1(const Tensor& img, const EncoderWeights& w);

// Intermediate activations of the embedding head, kept for the analytic
// backward pass.
struct EmbedTrace {
    std::vector<std::size_t> input_shape; // [c1,h,w]
    Tensor preact;                        // tail conv pre-activation [c2,h2,w2]
    std::vector<double> pooled;           // global average pool, length c2
    std::vector<double> raw;              // proj * pooled, length d (pre-normalization)
    Embedding embedding;
};

// Tail conv (stride 2, ReLU) -> global average pool -> projection -> l2 norm.
Embedding embed_from_layer1(const Tensor& f, const EncoderWeights& w);
EmbedTrace embed_from_layer1_trace(const Tensor& f, const EncoderWeights& w);

// Full image path: encode_image_layer1 composed with embed_from_layer1.
Embedding encode_image(const Tensor& img, const EncoderWeights& w);

// Gradient of any scalar loss with respect to the layer-1 features, given its
// gradient with respect to the raw (pre-normalization) embedding.
Tensor embed_backward_to_features(const EmbedTrace& trace, const EncoderWeights& w,
                                  std::span<const double> grad_raw);

// Bag-of-hashed-tokens text path: FNV-1a 64 per token into vocab buckets,
// projected and normalized. Token order does not affect the result.
Embedding encode_text(const PromptString& prompt, const EncoderWeights& w);

// FNV-1a 64-bit, exposed for fixture tooling.
std::uint64_t fnv1a64(const std::string& token);

// Weights file: magic "P2AW" + u64 little-endian seed. Weights are re-derived
// on load with default dims, never serialized.
void write_weights_file(const std::filesystem::path& path, const EncoderWeights& w);
EncoderWeights read_weights_file(const std::filesystem::path& path);

} // namespace psteer::enc
