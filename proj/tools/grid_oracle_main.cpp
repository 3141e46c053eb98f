// Exhaustive grid-search oracle for the c=2 steering fixture.
//
// Sweeps the full dense grid mu_k in [-2,2] step 0.05 (81 values per
// channel), sigma_k in [0.05,3] step 0.05 (60 values per channel) — about
// 2.4e7 loss evaluations — and caches the minimum, its location, and the
// axis-neighbor losses to a JSON file that tests compare against without
// re-running the sweep.
//
// The sweep uses an independent factorized evaluation (the PIN transform is
// per-channel affine and the tail convolution is linear, so the pre-
// activations are affine in the style parameters). The factorization is
// cross-checked against the library's pin/embed/cosine path at sampled grid
// points before the sweep is trusted; a disagreement aborts the run.

#include "psteer/encoder.hpp"
#include "psteer/errors.hpp"
#include "psteer/rng.hpp"
#include "psteer/steering.hpp"
#include "psteer/tensor.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

using namespace psteer;

namespace {

constexpr std::uint64_t kFixtureSeed = 7;
constexpr double kEps = 1e-5;
constexpr double kMuLo = -2.0;
constexpr double kSigmaLo = 0.05;
constexpr double kStep = 0.05;
constexpr int kMuCount = 81;    // -2.00 .. 2.00
constexpr int kSigmaCount = 60; // 0.05 .. 3.00

double mu_at(int i) {
    return kMuLo + kStep * i;
}
double sigma_at(int j) {
    return kSigmaLo + kStep * j;
}

std::string real17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// Loss at one style point via the factorized path. Returns false when the
// raw embedding is exactly zero (degenerate point, no loss defined).
struct Factorized {
    // P_o(a, b) = sum_k A[o][k] a_k + B[o][k] b_k + tb[o]
    std::vector<double> A, B, tb;  // [c2][2], [c2][2], [c2]
    std::vector<double> proj;      // [d][c2]
    std::vector<double> trg;       // unit target embedding, [d]
    std::size_t c2 = 0, d = 0;
    double fm[2], fs[2]; // channel stats of the fixture feature map

    bool eval(double m0, double m1, double s0, double s1, double& loss) const {
        const double a0 = s0 / (fs[0] + kEps);
        const double a1 = s1 / (fs[1] + kEps);
        const double b0 = m0 - a0 * fm[0];
        const double b1 = m1 - a1 * fm[1];
        double pooled[64];
        for (std::size_t o = 0; o < c2; ++o) {
            const double p = A[o * 2] * a0 + A[o * 2 + 1] * a1 + B[o * 2] * b0 +
                             B[o * 2 + 1] * b1 + tb[o];
            pooled[o] = p > 0.0 ? p : 0.0;
        }
        double dotv = 0.0;
        double n2 = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double r = 0.0;
            for (std::size_t o = 0; o < c2; ++o) {
                r += proj[i * c2 + o] * pooled[o];
            }
            dotv += r * trg[i];
            n2 += r * r;
        }
        if (n2 == 0.0) {
            return false;
        }
        loss = 1.0 - dotv / std::sqrt(n2);
        return true;
    }
};

} // namespace

int main(int argc, char** argv) {
    const std::string out_path =
        argc > 1 ? argv[1] : "fixtures/grid_oracle_c2.json";

    const enc::EncoderDims dims{3, 2, 16, 32, 64};
    const enc::EncoderWeights w(kFixtureSeed, dims);
    const Tensor f = rng_fill({2, 2, 2}, kFixtureSeed, NormalDist{1.0});
    const auto trg = enc::encode_text(enc::PromptString("fog"), w);
    const auto stats = channel_stats(f);

    // Factorize: for the 2x2 input the tail conv has a single output pixel
    // whose in-bounds taps are ky,kx in {1,2} hitting input (ky-1, kx-1).
    Factorized fac;
    fac.c2 = dims.c2;
    fac.d = dims.d;
    fac.A.assign(dims.c2 * 2, 0.0);
    fac.B.assign(dims.c2 * 2, 0.0);
    fac.tb.assign(w.tail_b().begin(), w.tail_b().end());
    fac.proj.assign(w.proj().begin(), w.proj().end());
    fac.trg.assign(trg.vec().begin(), trg.vec().end());
    fac.fm[0] = stats.mu[0];
    fac.fm[1] = stats.mu[1];
    fac.fs[0] = stats.sigma[0];
    fac.fs[1] = stats.sigma[1];
    const auto tail = w.tail_w();
    for (std::size_t o = 0; o < dims.c2; ++o) {
        for (std::size_t k = 0; k < 2; ++k) {
            for (std::size_t ky = 1; ky <= 2; ++ky) {
                for (std::size_t kx = 1; kx <= 2; ++kx) {
                    const double wv = tail[((o * dims.c1 + k) * 3 + ky) * 3 + kx];
                    fac.A[o * 2 + k] += wv * f.at(k, ky - 1, kx - 1);
                    fac.B[o * 2 + k] += wv;
                }
            }
        }
    }

    // Cross-check the factorization against the library path at sampled grid
    // points before trusting the sweep.
    {
        SeededRng rng(123);
        int checked = 0;
        while (checked < 64) {
            const int i0 = static_cast<int>(rng.uniform_int(0, kMuCount - 1));
            const int i1 = static_cast<int>(rng.uniform_int(0, kMuCount - 1));
            const int j0 = static_cast<int>(rng.uniform_int(0, kSigmaCount - 1));
            const int j1 = static_cast<int>(rng.uniform_int(0, kSigmaCount - 1));
            const steer::StyleStats s{{mu_at(i0), mu_at(i1)},
                                      {sigma_at(j0), sigma_at(j1)}};
            double fast = 0.0;
            const bool fast_ok = fac.eval(s.mu[0], s.mu[1], s.sigma[0], s.sigma[1], fast);
            double ref = 0.0;
            bool ref_ok = true;
            try {
                const auto e = enc::embed_from_layer1(steer::pin(f, s, kEps), w);
                ref = steer::cosine_loss(e.vec(), trg.vec());
            } catch (const DegenerateInputError&) {
                ref_ok = false;
            }
            if (fast_ok != ref_ok) {
                std::fprintf(stderr, "cross-check degeneracy mismatch\n");
                return 1;
            }
            if (fast_ok && std::abs(fast - ref) > 1e-9) {
                std::fprintf(stderr, "cross-check mismatch: %.17g vs %.17g\n", fast,
                             ref);
                return 1;
            }
            ++checked;
        }
    }

    // Partial pre-activations from the (mu1, sigma1) pair, tabulated once.
    const int pairs = kMuCount * kSigmaCount;
    std::vector<double> r_table(static_cast<std::size_t>(pairs) * fac.c2);
    for (int i1 = 0; i1 < kMuCount; ++i1) {
        for (int j1 = 0; j1 < kSigmaCount; ++j1) {
            const double a1 = sigma_at(j1) / (fac.fs[1] + kEps);
            const double b1 = mu_at(i1) - a1 * fac.fm[1];
            double* row = &r_table[static_cast<std::size_t>(i1 * kSigmaCount + j1) *
                                   fac.c2];
            for (std::size_t o = 0; o < fac.c2; ++o) {
                row[o] = fac.A[o * 2 + 1] * a1 + fac.B[o * 2 + 1] * b1 + fac.tb[o];
            }
        }
    }

    double best = 2.0 + 1.0;
    int bi0 = -1, bi1 = -1, bj0 = -1, bj1 = -1;
    long long degenerate = 0;
    long long total = 0;
    std::vector<double> q(fac.c2);
    for (int i0 = 0; i0 < kMuCount; ++i0) {
        for (int j0 = 0; j0 < kSigmaCount; ++j0) {
            const double a0 = sigma_at(j0) / (fac.fs[0] + kEps);
            const double b0 = mu_at(i0) - a0 * fac.fm[0];
            for (std::size_t o = 0; o < fac.c2; ++o) {
                q[o] = fac.A[o * 2] * a0 + fac.B[o * 2] * b0;
            }
            for (int i1 = 0; i1 < kMuCount; ++i1) {
                for (int j1 = 0; j1 < kSigmaCount; ++j1) {
                    const double* row =
                        &r_table[static_cast<std::size_t>(i1 * kSigmaCount + j1) *
                                 fac.c2];
                    double pooled[64];
                    for (std::size_t o = 0; o < fac.c2; ++o) {
                        const double p = q[o] + row[o];
                        pooled[o] = p > 0.0 ? p : 0.0;
                    }
                    double dotv = 0.0;
                    double n2 = 0.0;
                    for (std::size_t i = 0; i < fac.d; ++i) {
                        double r = 0.0;
                        const double* pr = &fac.proj[i * fac.c2];
                        for (std::size_t o = 0; o < fac.c2; ++o) {
                            r += pr[o] * pooled[o];
                        }
                        dotv += r * fac.trg[i];
                        n2 += r * r;
                    }
                    ++total;
                    if (n2 == 0.0) {
                        ++degenerate;
                        continue;
                    }
                    const double loss = 1.0 - dotv / std::sqrt(n2);
                    if (loss < best) {
                        best = loss;
                        bi0 = i0;
                        bi1 = i1;
                        bj0 = j0;
                        bj1 = j1;
                    }
                }
            }
        }
    }

    if (bi0 < 0) {
        std::fprintf(stderr, "grid contained no non-degenerate point\n");
        return 1;
    }

    // Axis neighbors around the argmin, for curvature/gradient checks.
    const int idx[4] = {bi0, bi1, bj0, bj1};
    const int lim[4] = {kMuCount, kMuCount, kSigmaCount, kSigmaCount};
    const char* axis_name[4] = {"mu0", "mu1", "sigma0", "sigma1"};
    std::string neighbors = "[";
    for (int ax = 0; ax < 4; ++ax) {
        double minus = 0.0, plus = 0.0;
        bool has_minus = idx[ax] > 0, has_plus = idx[ax] + 1 < lim[ax];
        int v[4] = {bi0, bi1, bj0, bj1};
        if (has_minus) {
            v[ax] = idx[ax] - 1;
            has_minus = fac.eval(mu_at(v[0]), mu_at(v[1]), sigma_at(v[2]),
                                 sigma_at(v[3]), minus);
        }
        v[ax] = idx[ax];
        if (has_plus) {
            v[ax] = idx[ax] + 1;
            has_plus = fac.eval(mu_at(v[0]), mu_at(v[1]), sigma_at(v[2]),
                                sigma_at(v[3]), plus);
        }
        neighbors += std::string("{\"axis\": \"") + axis_name[ax] + "\", \"minus\": " +
                     (has_minus ? real17(minus) : "null") +
                     ", \"plus\": " + (has_plus ? real17(plus) : "null") + "}";
        if (ax < 3) {
            neighbors += ", ";
        }
    }
    neighbors += "]";

    std::string out = "{\n";
    out += "  \"fixture\": {\"feature_shape\": [2, 2, 2], \"feature_seed\": 7, "
           "\"weights_seed\": 7,\n"
           "    \"dims\": {\"c_in\": 3, \"c1\": 2, \"c2\": 16, \"d\": 32, "
           "\"vocab\": 64},\n"
           "    \"prompt\": \"fog\", \"eps\": " +
           real17(kEps) + "},\n";
    out += "  \"grid\": {\"mu_lo\": " + real17(kMuLo) + ", \"mu_step\": " +
           real17(kStep) + ", \"mu_count\": 81,\n    \"sigma_lo\": " +
           real17(kSigmaLo) + ", \"sigma_step\": " + real17(kStep) +
           ", \"sigma_count\": 60},\n";
    out += "  \"evaluations\": " + std::to_string(total) + ",\n";
    out += "  \"degenerate\": " + std::to_string(degenerate) + ",\n";
    out += "  \"min_loss\": " + real17(best) + ",\n";
    out += "  \"argmin\": {\"mu\": [" + real17(mu_at(bi0)) + ", " + real17(mu_at(bi1)) +
           "], \"sigma\": [" + real17(sigma_at(bj0)) + ", " + real17(sigma_at(bj1)) +
           "],\n    \"index\": [" + std::to_string(bi0) + ", " + std::to_string(bi1) +
           ", " + std::to_string(bj0) + ", " + std::to_string(bj1) + "]},\n";
    out += "  \"neighbors\": " + neighbors + "\n";
    out += "}\n";

    std::ofstream of(out_path, std::ios::binary);
    if (!of) {
        std::fprintf(stderr, "cannot open %s\n", out_path.c_str());
        return 1;
    }
    of << out;
    std::printf("grid minimum %.17g at mu=(%g, %g) sigma=(%g, %g); %lld evals, "
                "%lld degenerate\n",
                best, mu_at(bi0), mu_at(bi1), sigma_at(bj0), sigma_at(bj1), total,
                degenerate);
    return 0;
}
