#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "psteer/errors.hpp"
#include "psteer/rng.hpp"
#include "psteer/tensor.hpp"
#include "psteer/tensor_io.hpp"
#include "support/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

using psteer::SeededRng;
using psteer::Tensor;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / name;
}

std::vector<double> random_buf(SeededRng& rng, std::size_t n, double scale = 1.0,
                               double shift = 0.0) {
    std::vector<double> buf(n);
    for (double& v : buf) {
        v = rng.normal(shift, scale);
    }
    return buf;
}

} // namespace

TEST_CASE("tensor construction validates shape against payload") {
    CHECK_NOTHROW(Tensor({2, 3}, std::vector<double>(6, 0.0)));
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5, 0.0)), psteer::ShapeError);
    CHECK_THROWS_AS(Tensor({0, 3}, std::vector<double>{}), psteer::ShapeError);
    CHECK_THROWS_AS(Tensor({}, std::vector<double>{}), psteer::ShapeError);
}

TEST_CASE("tensor construction rejects non-finite payloads") {
    std::vector<double> bad = {1.0, std::numeric_limits<double>::quiet_NaN()};
    CHECK_THROWS_AS(Tensor({2}, bad), psteer::NumericError);
    bad[1] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(Tensor({2}, bad), psteer::NumericError);
}

TEST_CASE("indexing is row-major within channel-major layout") {
    Tensor t({2, 2, 3}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
    CHECK(t.at(0, 0, 0) == 0.0);
    CHECK(t.at(0, 0, 2) == 2.0);
    CHECK(t.at(0, 1, 0) == 3.0);
    CHECK(t.at(1, 0, 0) == 6.0);
    CHECK(t.at(1, 1, 2) == 11.0);
    CHECK(t.channel(1)[0] == 6.0);
    CHECK(t.channel(1).size() == 6);
    CHECK(t.channels() == 2);
    CHECK(t.height() == 2);
    CHECK(t.width() == 3);
}

TEST_CASE("channel_stats matches a two-pass long-double oracle") {
    SeededRng rng(2026);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> buf(4 * 6 * 5);
        for (double& v : buf) {
            v = rng.normal(0.0, 3.0) + rng.uniform(-0.5, 0.5);
        }
        const Tensor t({4, 6, 5}, std::move(buf));
        const auto stats = psteer::channel_stats(t);
        REQUIRE(stats.mu.size() == 4);
        REQUIRE(stats.sigma.size() == 4);
        for (std::size_t c = 0; c < 4; ++c) {
            const auto ref = oracles::two_pass_mean_std(t.channel(c));
            CHECK(stats.mu[c] == doctest::Approx(ref.mean).epsilon(1e-12));
            CHECK(stats.sigma[c] == doctest::Approx(ref.std).epsilon(1e-12));
        }
    }
}

TEST_CASE("channel_stats uses the population (1/N) convention") {
    // For {1, 3} the population std is 1 exactly; the sample std would be
    // sqrt(2) ~ 1.414.
    Tensor t({1, 1, 2}, {1.0, 3.0});
    const auto stats = psteer::channel_stats(t);
    CHECK(stats.mu[0] == doctest::Approx(2.0));
    CHECK(stats.sigma[0] == doctest::Approx(1.0));
}

TEST_CASE("channel_stats requires rank 3") {
    CHECK_THROWS_AS(psteer::channel_stats(Tensor({4}, std::vector<double>(4, 0.0))),
                    psteer::ShapeError);
}

TEST_CASE("l2_normalize produces unit norm and rejects zero vectors") {
    Tensor v({4}, {3.0, 0.0, 4.0, 0.0});
    const Tensor u = psteer::l2_normalize(v);
    CHECK(u[0] == doctest::Approx(0.6));
    CHECK(u[2] == doctest::Approx(0.8));
    double n2 = 0.0;
    for (double x : u.data()) {
        n2 += x * x;
    }
    CHECK(n2 == doctest::Approx(1.0).epsilon(1e-14));

    CHECK_THROWS_AS(psteer::l2_normalize(Tensor({3}, {0.0, 0.0, 0.0})),
                    psteer::DegenerateInputError);
    CHECK_THROWS_AS(psteer::l2_normalize(Tensor({2, 2}, std::vector<double>(4, 1.0))),
                    psteer::ShapeError);
}

TEST_CASE("seeded rng streams are deterministic and isolated") {
    SeededRng a(42);
    SeededRng b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_double() == b.next_double());
        CHECK(a.normal(0.0, 1.0) == b.normal(0.0, 1.0));
    }
    SeededRng c(43);
    SeededRng a2(42);
    bool any_diff = false;
    for (int i = 0; i < 10; ++i) {
        any_diff |= (a2.next_u64() != c.next_u64());
    }
    CHECK(any_diff);
    // Derived streams differ from the parent and from each other.
    SeededRng p(7);
    auto d1 = p.derive(1);
    auto d2 = p.derive(2);
    CHECK(d1.next_u64() != d2.next_u64());
}

TEST_CASE("uniform_int covers its inclusive range") {
    SeededRng rng(5);
    bool saw_lo = false;
    bool saw_hi = false;
    for (int i = 0; i < 2000; ++i) {
        const auto v = rng.uniform_int(-2, 3);
        CHECK(v >= -2);
        CHECK(v <= 3);
        saw_lo |= (v == -2);
        saw_hi |= (v == 3);
    }
    CHECK(saw_lo);
    CHECK(saw_hi);
}

TEST_CASE("rng normal draws have plausible first moments") {
    SeededRng rng(1234);
    const int n = 20000;
    double sum = 0.0;
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal(0.0, 1.0);
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.05);
    CHECK(std::abs(var - 1.0) < 0.05);
}

TEST_CASE("rng_fill is a pure function of shape, seed and distribution") {
    const Tensor a = psteer::rng_fill({3, 4, 4}, 77, psteer::NormalDist{0.5});
    const Tensor b = psteer::rng_fill({3, 4, 4}, 77, psteer::NormalDist{0.5});
    const Tensor c = psteer::rng_fill({3, 4, 4}, 78, psteer::NormalDist{0.5});
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
    CHECK_FALSE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));

    const Tensor u = psteer::rng_fill({100}, 9, psteer::UniformSym{0.25});
    for (double v : u.data()) {
        CHECK(v >= -0.25);
        CHECK(v < 0.25);
    }
}

TEST_CASE("feature codec round-trips bit-exactly") {
    SeededRng rng(99);
    auto buf = random_buf(rng, 3 * 5 * 4, 1e3);
    buf[0] = 0.1 + 0.2; // a value with a non-terminating binary expansion
    buf[1] = -0.0;
    const Tensor t({3, 5, 4}, buf);
    const auto bytes = psteer::encode_feature(t);
    const Tensor back = psteer::decode_feature(bytes);
    REQUIRE(back.shape() == t.shape());
    for (std::size_t i = 0; i < buf.size(); ++i) {
        // Bit-level equality, not approximate equality.
        CHECK(std::memcmp(&back.data()[i], &t.data()[i], sizeof(double)) == 0);
    }
}

TEST_CASE("feature files round-trip through disk") {
    const auto path = temp_path("psteer_test_feature.p2af");
    SeededRng rng(7);
    const Tensor t({2, 4, 4}, random_buf(rng, 2 * 4 * 4));
    psteer::write_feature_file(path, t);
    const Tensor back = psteer::read_feature_file(path);
    CHECK(back.shape() == t.shape());
    CHECK(std::equal(back.data().begin(), back.data().end(), t.data().begin()));
    std::filesystem::remove(path);
}

TEST_CASE("feature decode rejects malformed streams") {
    const Tensor t({2, 2}, {1.0, 2.0, 3.0, 4.0});
    auto bytes = psteer::encode_feature(t);

    auto corrupt_magic = bytes;
    corrupt_magic[0] = 'X';
    CHECK_THROWS_AS(psteer::decode_feature(corrupt_magic), psteer::ParseError);

    auto bad_version = bytes;
    bad_version[4] = 9;
    CHECK_THROWS_AS(psteer::decode_feature(bad_version), psteer::ParseError);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 3);
    CHECK_THROWS_AS(psteer::decode_feature(truncated), psteer::ParseError);

    auto trailing = bytes;
    trailing.push_back(0);
    CHECK_THROWS_AS(psteer::decode_feature(trailing), psteer::ParseError);

    CHECK_THROWS_AS(psteer::decode_feature({}), psteer::ParseError);
}

TEST_CASE("feature decode rejects non-finite payloads") {
    Tensor t({1, 1, 1}, {1.0});
    auto bytes = psteer::encode_feature(t);
    // Overwrite the payload with a NaN pattern.
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::memcpy(bytes.data() + bytes.size() - sizeof(double), &nan, sizeof(double));
    CHECK_THROWS_AS(psteer::decode_feature(bytes), psteer::NumericError);
}

TEST_CASE("reading a missing feature file is an io error") {
    CHECK_THROWS_AS(psteer::read_feature_file("/nonexistent/path/f.p2af"),
                    psteer::IoError);
}
