#include "psteer/encoder.hpp"

#include "psteer/audit.hpp"
#include "psteer/errors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace psteer::enc {

// Output extent of a 3x3 stride-2 convolution with zero padding 1.
static std::size_t conv_out(std::size_t n) {
    return (n - 1) / 2 + 1;
}

// out[co,oy,ox] = bias[co] + sum_{ci,ky,kx} w[co,ci,ky,kx] * in[ci, 2oy+ky-1, 2ox+kx-1]
// with zero padding outside the input.
Tensor conv3x3_s2(const Tensor& in, std::span<const double> w, std::span<const double> b,
                  std::size_t c_out, bool relu) {
    const std::size_t c_in = in.shape()[0];
    const std::size_t h = in.shape()[1];
    const std::size_t wd = in.shape()[2];
    const std::size_t h2 = conv_out(h);
    const std::size_t w2 = conv_out(wd);

    std::vector<double> out(c_out * h2 * w2);
    const auto src = in.data();
    for (std::size_t co = 0; co < c_out; ++co) {
        for (std::size_t oy = 0; oy < h2; ++oy) {
            for (std::size_t ox = 0; ox < w2; ++ox) {
                double acc = b[co];
                for (std::size_t ci = 0; ci < c_in; ++ci) {
                    for (std::size_t ky = 0; ky < 3; ++ky) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(2 * oy + ky) - 1;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                            continue;
                        }
                        for (std::size_t kx = 0; kx < 3; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(2 * ox + kx) - 1;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) {
                                continue;
                            }
                            acc += w[((co * c_in + ci) * 3 + ky) * 3 + kx] *
                                   src[(ci * h + static_cast<std::size_t>(iy)) * wd +
                                       static_cast<std::size_t>(ix)];
                        }
                    }
                }
                out[(co * h2 + oy) * w2 + ox] = relu ? std::max(acc, 0.0) : acc;
            }
        }
    }
    return Tensor({c_out, h2, w2}, std::move(out));
}

namespace {

std::vector<double> block(std::uint64_t seed, std::uint64_t index,
                          std::vector<std::size_t> shape, double stddev) {
    return std::move(rng_fill(std::move(shape), seed ^ index, NormalDist{stddev})).take();
}

} // namespace

EncoderWeights::EncoderWeights(std::uint64_t seed, EncoderDims dims)
    : seed_(seed), dims_(dims) {
    const double stem_std = 1.0 / std::sqrt(static_cast<double>(dims.c_in * 9));
    const double tail_std = 1.0 / std::sqrt(static_cast<double>(dims.c1 * 9));
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(dims.c2));
    const double text_std = 1.0 / std::sqrt(static_cast<double>(dims.vocab));
    stem_w_ = block(seed, 1, {dims.c1, dims.c_in, 3, 3}, stem_std);
    stem_b_ = block(seed, 2, {dims.c1}, stem_std);
    tail_w_ = block(seed, 3, {dims.c2, dims.c1, 3, 3}, tail_std);
    tail_b_ = block(seed, 4, {dims.c2}, tail_std);
    proj_ = block(seed, 5, {dims.d, dims.c2}, proj_std);
    text_proj_ = block(seed, 6, {dims.d, dims.vocab}, text_std);
}

EncoderWeights EncoderWeights::zero_bias(std::uint64_t seed, EncoderDims dims) {
    EncoderWeights w(seed, dims);
    std::fill(w.stem_b_.begin(), w.stem_b_.end(), 0.0);
    std::fill(w.tail_b_.begin(), w.tail_b_.end(), 0.0);
    return w;
}

std::vector<unsigned char> EncoderWeights::fingerprint() const {
    std::vector<unsigned char> bytes;
    auto append = [&bytes](std::span<const double> v) {
        const auto* p = reinterpret_cast<const unsigned char*>(v.data());
        bytes.insert(bytes.end(), p, p + v.size() * sizeof(double));
    };
    append(stem_w_);
    append(stem_b_);
    append(tail_w_);
    append(tail_b_);
    append(proj_);
    append(text_proj_);
    return bytes;
}

Embedding::Embedding(std::vector<double> raw) {
    const double n = norm2(raw);
    if (n == 0.0) {
        throw DegenerateInputError("embedding has zero norm");
    }
    for (double& v : raw) {
        v /= n;
    }
    vec_ = std::move(raw);
}

PromptString::PromptString(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    bool in_space = true;
    for (char ch : text) {
        const auto u = static_cast<unsigned char>(ch);
        if (std::isspace(u)) {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) {
            out.push_back(' ');
        }
        in_space = false;
        out.push_back(static_cast<char>(std::tolower(u)));
    }
    if (out.empty()) {
        throw DegenerateInputError("prompt is empty");
    }
    text_ = std::move(out);
}

Tensor encode_image_layer1(const Tensor& img, const EncoderWeights& w) {
    const auto& dims = w.dims();
    if (img.rank() != 3 || img.shape()[0] != dims.c_in) {
        throw ShapeError("encode_image_layer1 expects a [" + std::to_string(dims.c_in) +
                         ",H,W] tensor");
    }
    const std::size_t h = img.shape()[1];
    const std::size_t wd = img.shape()[2];
    if (h % 2 != 0 || wd % 2 != 0 || h < 8 || wd < 8) {
        throw ShapeError("image height/width must be even and >= 8");
    }
    return conv3x3_s2(img, w.stem_w(), w.stem_b(), dims.c1, /*relu=*/true);
}

EmbedTrace embed_from_layer1_trace(const Tensor& f, const EncoderWeights& w) {
    const auto& dims = w.dims();
    if (f.rank() != 3 || f.shape()[0] != dims.c1) {
        throw ShapeError("embed_from_layer1 expects a [" + std::to_string(dims.c1) +
                         ",h,w] feature map");
    }
    Tensor preact = conv3x3_s2(f, w.tail_w(), w.tail_b(), dims.c2, /*relu=*/false);

    const std::size_t plane = preact.shape()[1] * preact.shape()[2];
    std::vector<double> pooled(dims.c2, 0.0);
    for (std::size_t c = 0; c < dims.c2; ++c) {
        double s = 0.0;
        for (double v : preact.channel(c)) {
            s += std::max(v, 0.0);
        }
        pooled[c] = s / static_cast<double>(plane);
    }

    std::vector<double> raw(dims.d, 0.0);
    const auto proj = w.proj();
    for (std::size_t i = 0; i < dims.d; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < dims.c2; ++c) {
            s += proj[i * dims.c2 + c] * pooled[c];
        }
        raw[i] = s;
    }

    return EmbedTrace{f.shape(), std::move(preact), std::move(pooled), raw,
                      Embedding(raw)};
}

Embedding embed_from_layer1(const Tensor& f, const EncoderWeights& w) {
    return embed_from_layer1_trace(f, w).embedding;
}

Embedding encode_image(const Tensor& img, const EncoderWeights& w) {
    return embed_from_layer1(encode_image_layer1(img, w), w);
}

Tensor embed_backward_to_features(const EmbedTrace& trace, const EncoderWeights& w,
                                  std::span<const double> grad_raw) {
    const auto& dims = w.dims();
    const std::size_t h = trace.input_shape[1];
    const std::size_t wd = trace.input_shape[2];
    const std::size_t h2 = trace.preact.shape()[1];
    const std::size_t w2 = trace.preact.shape()[2];
    const double inv_plane = 1.0 / static_cast<double>(h2 * w2);

    // d/d pooled: proj^T * grad_raw
    std::vector<double> grad_pooled(dims.c2, 0.0);
    const auto proj = w.proj();
    for (std::size_t i = 0; i < dims.d; ++i) {
        for (std::size_t c = 0; c < dims.c2; ++c) {
            grad_pooled[c] += proj[i * dims.c2 + c] * grad_raw[i];
        }
    }

    // Through the pool and the ReLU (subgradient 0 at 0), then the transposed
    // tail convolution back onto the feature map.
    std::vector<double> grad_f(dims.c1 * h * wd, 0.0);
    const auto tail = w.tail_w();
    const auto pre = trace.preact.data();
    for (std::size_t co = 0; co < dims.c2; ++co) {
        const double gp = grad_pooled[co] * inv_plane;
        if (gp == 0.0) {
            continue;
        }
        for (std::size_t oy = 0; oy < h2; ++oy) {
            for (std::size_t ox = 0; ox < w2; ++ox) {
                if (pre[(co * h2 + oy) * w2 + ox] <= 0.0) {
                    continue;
                }
                for (std::size_t ci = 0; ci < dims.c1; ++ci) {
                    for (std::size_t ky = 0; ky < 3; ++ky) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(2 * oy + ky) - 1;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                            continue;
                        }
                        for (std::size_t kx = 0; kx < 3; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(2 * ox + kx) - 1;
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) {
                                continue;
                            }
                            grad_f[(ci * h + static_cast<std::size_t>(iy)) * wd +
                                   static_cast<std::size_t>(ix)] +=
                                gp * tail[((co * dims.c1 + ci) * 3 + ky) * 3 + kx];
                        }
                    }
                }
            }
        }
    }
    return Tensor(trace.input_shape, std::move(grad_f));
}

std::uint64_t fnv1a64(const std::string& token) {
    std::uint64_t h = 14695981039346656037ULL;
    for (char ch : token) {
        h ^= static_cast<unsigned char>(ch);
        h *= 1099511628211ULL;
    }
    return h;
}

Embedding encode_text(const PromptString& prompt, const EncoderWeights& w) {
    const auto& dims = w.dims();
    std::vector<double> counts(dims.vocab, 0.0);
    std::istringstream stream(prompt.text());
    std::string token;
    while (stream >> token) {
        counts[fnv1a64(token) % dims.vocab] += 1.0;
    }
    std::vector<double> raw(dims.d, 0.0);
    const auto tp = w.text_proj();
    for (std::size_t i = 0; i < dims.d; ++i) {
        double s = 0.0;
        for (std::size_t v = 0; v < dims.vocab; ++v) {
            s += tp[i * dims.vocab + v] * counts[v];
        }
        raw[i] = s;
    }
    return Embedding(std::move(raw));
}

void write_weights_file(const std::filesystem::path& path, const EncoderWeights& w) {
    if (!(w.dims() == EncoderDims{})) {
        throw ConfigError("weights files describe the default encoder geometry only");
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for write: " + path.string());
    }
    const char magic[4] = {'P', '2', 'A', 'W'};
    f.write(magic, 4);
    const std::uint64_t seed = w.seed();
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) {
        bytes[i] = static_cast<unsigned char>((seed >> (8 * i)) & 0xFF);
    }
    f.write(reinterpret_cast<const char*>(bytes), 8);
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

EncoderWeights read_weights_file(const std::filesystem::path& path) {
    audit::record_file_open(path.string());
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "P2AW", 4) != 0) {
        throw ParseError("weights file: bad magic");
    }
    unsigned char bytes[8];
    f.read(reinterpret_cast<char*>(bytes), 8);
    if (!f) {
        throw ParseError("weights file: truncated");
    }
    std::uint64_t seed = 0;
    for (int i = 0; i < 8; ++i) {
        seed |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    }
    return EncoderWeights(seed);
}

} // namespace psteer::enc
