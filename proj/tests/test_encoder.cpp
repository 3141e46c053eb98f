#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "psteer/encoder.hpp"
#include "psteer/errors.hpp"
#include "psteer/rng.hpp"
#include "psteer/tensor.hpp"
#include "support/oracles.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using psteer::SeededRng;
using psteer::Tensor;
namespace enc = psteer::enc;

namespace {

Tensor random_image(SeededRng& rng, std::size_t h, std::size_t w) {
    std::vector<double> buf(3 * h * w);
    for (double& v : buf) {
        v = rng.next_double();
    }
    return Tensor({3, h, w}, std::move(buf));
}

Tensor random_feature(SeededRng& rng, std::size_t c, std::size_t h, std::size_t w) {
    std::vector<double> buf(c * h * w);
    for (double& v : buf) {
        v = rng.normal(0.0, 1.0);
    }
    return Tensor({c, h, w}, std::move(buf));
}

bool same_values(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) {
            return false;
        }
    }
    return true;
}

} // namespace

TEST_CASE("encoder weights are a pure function of the seed") {
    const enc::EncoderWeights a(42);
    const enc::EncoderWeights b(42);
    const enc::EncoderWeights c(43);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != c.fingerprint());
    // Distinct blocks draw from distinct streams.
    CHECK(a.stem_w()[0] != a.tail_w()[0]);
    CHECK(a.proj()[0] != a.text_proj()[0]);
}

TEST_CASE("layer-1 features match the naive convolution oracle") {
    SeededRng rng(11);
    const enc::EncoderWeights w(42);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor img = random_image(rng, 16, 12);
        const Tensor f = enc::encode_image_layer1(img, w);
        REQUIRE(f.shape() == std::vector<std::size_t>{8, 8, 6});
        const auto ref =
            oracles::naive_conv3x3_s2(img, w.stem_w(), w.stem_b(), 8, /*relu=*/true);
        REQUIRE(ref.size() == f.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(f[i] == doctest::Approx(ref[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("layer-1 rejects wrong channel count and odd sizes") {
    const enc::EncoderWeights w(42);
    CHECK_THROWS_AS(
        enc::encode_image_layer1(Tensor({1, 16, 16}, std::vector<double>(256, 0.0)), w),
        psteer::ShapeError);
    CHECK_THROWS_AS(
        enc::encode_image_layer1(Tensor({3, 15, 16}, std::vector<double>(720, 0.0)), w),
        psteer::ShapeError);
    CHECK_THROWS_AS(
        enc::encode_image_layer1(Tensor({3, 4, 4}, std::vector<double>(48, 0.0)), w),
        psteer::ShapeError);
}

TEST_CASE("embedding head matches the reordered-summation oracle") {
    SeededRng rng(12);
    const enc::EncoderWeights w(42);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor f = random_feature(rng, 8, 8, 8);
        const auto trace = enc::embed_from_layer1_trace(f, w);
        const auto ref = oracles::naive_embed_from_layer1(f, w);
        REQUIRE(trace.embedding.dim() == ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(trace.embedding.vec()[i] == doctest::Approx(ref[i]).epsilon(1e-10));
        }
        double n2 = 0.0;
        for (double v : trace.embedding.vec()) {
            n2 += v * v;
        }
        CHECK(n2 == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("full image embedding composes the two stages") {
    SeededRng rng(13);
    const enc::EncoderWeights w(42);
    const Tensor img = random_image(rng, 64, 64);
    const auto direct = enc::encode_image(img, w);
    const Tensor f = enc::encode_image_layer1(img, w);
    const auto staged = enc::embed_from_layer1(f, w);
    CHECK(same_values(direct.vec(), staged.vec()));
}

TEST_CASE("text encoding is deterministic and whitespace-insensitive") {
    const enc::EncoderWeights w(42);
    const auto a = enc::encode_text(enc::PromptString("a dusty aerial view"), w);
    const auto b = enc::encode_text(enc::PromptString("  A   DUSTY aerial\tview "), w);
    CHECK(same_values(a.vec(), b.vec()));
    const auto c = enc::encode_text(enc::PromptString("a foggy aerial view"), w);
    CHECK_FALSE(same_values(a.vec(), c.vec()));
    double n2 = 0.0;
    for (double v : a.vec()) {
        n2 += v * v;
    }
    CHECK(n2 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("token order changes the bag only through counts") {
    const enc::EncoderWeights w(42);
    const auto a = enc::encode_text(enc::PromptString("night desert"), w);
    const auto b = enc::encode_text(enc::PromptString("desert night"), w);
    CHECK(same_values(a.vec(), b.vec()));
}

TEST_CASE("empty or whitespace-only prompts are rejected") {
    CHECK_THROWS_AS(enc::PromptString(""), psteer::DegenerateInputError);
    CHECK_THROWS_AS(enc::PromptString("   \t  "), psteer::DegenerateInputError);
}

TEST_CASE("prompt strings normalize case and whitespace") {
    const enc::PromptString p("  An  AERIAL\tview\n of x ");
    CHECK(p.text() == "an aerial view of x");
}

TEST_CASE("fnv1a64 matches published reference values") {
    // Reference digests for the 64-bit FNV-1a parameters.
    CHECK(enc::fnv1a64("") == 14695981039346656037ULL);
    CHECK(enc::fnv1a64("a") == 12638187200555641996ULL);
    CHECK(enc::fnv1a64("foobar") == 9625390261332436968ULL);
}

TEST_CASE("weights files persist only the seed") {
    const auto path = std::filesystem::temp_directory_path() / "psteer_test_w.p2aw";
    enc::write_weights_file(path, enc::EncoderWeights(4242));
    const enc::EncoderWeights w = enc::read_weights_file(path);
    CHECK(w.seed() == 4242);
    CHECK(w.fingerprint() == enc::EncoderWeights(4242).fingerprint());
    CHECK(std::filesystem::file_size(path) == 12); // magic(4) + seed(8)
    std::filesystem::remove(path);
}

TEST_CASE("weights files refuse non-default geometry") {
    const auto path =
        std::filesystem::temp_directory_path() / "psteer_test_w_narrow.p2aw";
    enc::EncoderDims narrow;
    narrow.c1 = 2;
    CHECK_THROWS_AS(enc::write_weights_file(path, enc::EncoderWeights(1, narrow)),
                    psteer::ConfigError);
}

TEST_CASE("weights file reader rejects malformed input") {
    const auto dir = std::filesystem::temp_directory_path();
    const auto bad_magic = dir / "psteer_test_w_badmagic.p2aw";
    {
        std::ofstream os(bad_magic, std::ios::binary);
        os.write("XXXX12345678", 12);
    }
    CHECK_THROWS_AS(enc::read_weights_file(bad_magic), psteer::ParseError);
    std::filesystem::remove(bad_magic);

    const auto truncated = dir / "psteer_test_w_trunc.p2aw";
    {
        std::ofstream os(truncated, std::ios::binary);
        os.write("P2AW", 4);
    }
    CHECK_THROWS_AS(enc::read_weights_file(truncated), psteer::ParseError);
    std::filesystem::remove(truncated);

    CHECK_THROWS_AS(enc::read_weights_file("/nonexistent/w.p2aw"), psteer::IoError);
}

TEST_CASE("backward pass distributes one unit of raw gradient correctly") {
    // With grad_raw = e_i, the feature gradient must equal the finite
    // difference of raw[i] with respect to each feature entry. Checked on a
    // random subset of entries; the steering tests cover the full chain.
    SeededRng rng(21);
    const enc::EncoderWeights w(42);
    const Tensor f = random_feature(rng, 8, 8, 8);
    const auto trace = enc::embed_from_layer1_trace(f, w);

    std::vector<double> grad_raw(trace.raw.size(), 0.0);
    grad_raw[3] = 1.0;
    const Tensor g = enc::embed_backward_to_features(trace, w, grad_raw);
    REQUIRE(g.shape() == f.shape());

    const double h = 1e-5;
    SeededRng pick(22);
    for (int k = 0; k < 24; ++k) {
        const std::size_t idx = static_cast<std::size_t>(
            pick.uniform_int(0, static_cast<std::int64_t>(f.size()) - 1));
        auto probe = [&](double x) {
            std::vector<double> buf(f.data().begin(), f.data().end());
            buf[idx] = x;
            const auto t = enc::embed_from_layer1_trace(Tensor(f.shape(), buf), w);
            return t.raw[3];
        };
        const double fd = oracles::central_difference(probe, f[idx], h);
        const double got = g[idx];
        const double tol = 1e-6 * std::max(1.0, std::abs(fd));
        CHECK(std::abs(got - fd) <= tol);
    }
}

TEST_CASE("zero-bias variant zeroes exactly the conv biases") {
    const auto w = enc::EncoderWeights::zero_bias(42);
    const enc::EncoderWeights ref(42);
    for (double b : w.stem_b()) {
        CHECK(b == 0.0);
    }
    for (double b : w.tail_b()) {
        CHECK(b == 0.0);
    }
    CHECK(same_values(w.stem_w(), ref.stem_w()));
    CHECK(same_values(w.proj(), ref.proj()));
}

TEST_CASE("zero-bias encoder is positively homogeneous in the input") {
    // conv (no bias) and ReLU commute with positive scaling, pooling and
    // projection are linear, normalization cancels the scale entirely.
    SeededRng rng(23);
    const auto w = enc::EncoderWeights::zero_bias(42);
    const Tensor img = random_image(rng, 32, 32);
    std::vector<double> scaled(img.data().begin(), img.data().end());
    for (double& v : scaled) {
        v *= 3.5;
    }
    const auto a = enc::encode_image(img, w);
    const auto b = enc::encode_image(Tensor(img.shape(), scaled), w);
    for (std::size_t i = 0; i < a.dim(); ++i) {
        CHECK(a.vec()[i] == doctest::Approx(b.vec()[i]).epsilon(1e-10));
    }
}
