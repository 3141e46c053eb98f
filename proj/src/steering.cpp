#include "psteer/steering.hpp"

#include "psteer/audit.hpp"
#include "psteer/errors.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace psteer::steer {

namespace {

// Normalized source map (f - mu(f)) / (sigma(f) + eps); pin is an affine map
// of this, and grad_sigma contracts against it.
struct PinParts {
    Tensor normalized;
    Tensor steered;
};

PinParts pin_parts(const Tensor& f, const StyleStats& s, double eps) {
    if (f.rank() != 3) {
        throw ShapeError("pin expects a [c,h,w] feature map");
    }
    const std::size_t c = f.shape()[0];
    if (s.mu.size() != c || s.sigma.size() != c) {
        throw ShapeError("style statistics do not match the feature channel count");
    }
    const ChannelStats fs = channel_stats(f);
    const std::size_t plane = f.shape()[1] * f.shape()[2];
    std::vector<double> norm(f.size());
    std::vector<double> out(f.size());
    const auto src = f.data();
    for (std::size_t k = 0; k < c; ++k) {
        const double inv = 1.0 / (fs.sigma[k] + eps);
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t idx = k * plane + i;
            const double n = (src[idx] - fs.mu[k]) * inv;
            norm[idx] = n;
            out[idx] = s.sigma[k] * n + s.mu[k];
        }
    }
    return {Tensor(f.shape(), std::move(norm)), Tensor(f.shape(), std::move(out))};
}

void format_real(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

void format_real_array(std::string& out, std::span<const double> vs) {
    out += '[';
    for (std::size_t i = 0; i < vs.size(); ++i) {
        if (i > 0) {
            out += ',';
        }
        format_real(out, vs[i]);
    }
    out += ']';
}

} // namespace

Tensor pin(const Tensor& f, const StyleStats& s, double eps) {
    return pin_parts(f, s, eps).steered;
}

double cosine_loss(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("cosine_loss arity mismatch: " + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()));
    }
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na == 0.0 || nb == 0.0) {
        throw DegenerateInputError("cosine_loss on a zero-norm vector");
    }
    return 1.0 - dot(a, b) / (na * nb);
}

StyleGradient style_grad(const Tensor& f, const StyleStats& s, const enc::Embedding& trg,
                         const enc::EncoderWeights& w, double eps) {
    const PinParts parts = pin_parts(f, s, eps);
    const enc::EmbedTrace trace = enc::embed_from_layer1_trace(parts.steered, w);

    // L = 1 - e.t / (|e||t|) on the raw embedding e:
    //   dL/de = -(t - (e.t/|e|^2) e) / (|e||t|)
    const auto e = std::span<const double>(trace.raw);
    const auto t = trg.vec();
    const double ne = norm2(e);
    const double nt = norm2(t);
    if (ne == 0.0) {
        throw DegenerateInputError("steered embedding has zero norm");
    }
    const double et = dot(e, t);
    const double loss = 1.0 - et / (ne * nt);
    std::vector<double> grad_raw(e.size());
    const double scale = 1.0 / (ne * nt);
    const double self = et / (ne * ne);
    for (std::size_t i = 0; i < e.size(); ++i) {
        grad_raw[i] = -(t[i] - self * e[i]) * scale;
    }

    const Tensor grad_feat = enc::embed_backward_to_features(trace, w, grad_raw);

    // pin(f,s)_k = s.sigma[k] * n_k + s.mu[k], so per channel the gradients
    // contract to a sum and a weighted sum over the plane.
    const std::size_t c = f.shape()[0];
    const std::size_t plane = f.shape()[1] * f.shape()[2];
    StyleGradient g;
    g.mu.assign(c, 0.0);
    g.sigma.assign(c, 0.0);
    g.loss = loss;
    const auto gf = grad_feat.data();
    const auto nf = parts.normalized.data();
    for (std::size_t k = 0; k < c; ++k) {
        double gm = 0.0;
        double gs = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t idx = k * plane + i;
            gm += gf[idx];
            gs += gf[idx] * nf[idx];
        }
        g.mu[k] = gm;
        g.sigma[k] = gs;
    }
    return g;
}

StyleSet steer(const std::vector<Tensor>& features, const enc::Embedding& trg,
               const SteeringConfig& cfg, const enc::EncoderWeights& w) {
    if (features.empty()) {
        throw EmptyInputError("steer requires at least one feature map");
    }
    if (cfg.steps < 0 || cfg.lr < 0.0) {
        throw ConfigError("steering steps and learning rate must be non-negative");
    }
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) {
        throw ConfigError("steering momentum must lie in [0, 1)");
    }
    if (cfg.sigma_min <= 0.0 || cfg.eps <= 0.0) {
        throw ConfigError("steering sigma_min and eps must be positive");
    }

    StyleSet set;
    set.config = cfg;
    set.entries.reserve(features.size());

    for (const Tensor& f : features) {
        const ChannelStats init = channel_stats(f);
        StyleStats s{init.mu, init.sigma};
        const std::size_t c = s.mu.size();
        std::vector<double> v_mu(c, 0.0);
        std::vector<double> v_sigma(c, 0.0);

        SteeredEntry entry;
        bool have_init = false;
        for (int step = 0; step < cfg.steps; ++step) {
            const StyleGradient g = style_grad(f, s, trg, w, cfg.eps);
            if (!have_init) {
                entry.loss_init = g.loss;
                have_init = true;
            }
            for (std::size_t k = 0; k < c; ++k) {
                v_mu[k] = cfg.momentum * v_mu[k] - cfg.lr * g.mu[k];
                v_sigma[k] = cfg.momentum * v_sigma[k] - cfg.lr * g.sigma[k];
                s.mu[k] += v_mu[k];
                s.sigma[k] = std::max(s.sigma[k] + v_sigma[k], cfg.sigma_min);
            }
        }
        const double final_loss =
            cosine_loss(enc::embed_from_layer1_trace(pin(f, s, cfg.eps), w).raw, trg.vec());
        if (!have_init) {
            entry.loss_init = final_loss;
        }
        entry.loss_final = final_loss;
        entry.stats = std::move(s);
        set.entries.push_back(std::move(entry));
    }
    return set;
}

void write_styleset_file(const std::filesystem::path& path, const StyleSet& set,
                         const std::string& meta_json) {
    std::string out;
    out += "{\n  \"config\": {\"steps\": ";
    out += std::to_string(set.config.steps);
    out += ", \"lr\": ";
    format_real(out, set.config.lr);
    out += ", \"momentum\": ";
    format_real(out, set.config.momentum);
    out += ", \"sigma_min\": ";
    format_real(out, set.config.sigma_min);
    out += ", \"eps\": ";
    format_real(out, set.config.eps);
    out += "},\n";
    if (!meta_json.empty()) {
        out += "  \"meta\": " + meta_json + ",\n";
    }
    out += "  \"entries\": [\n";
    for (std::size_t i = 0; i < set.entries.size(); ++i) {
        const auto& e = set.entries[i];
        out += "    {\"mu\": ";
        format_real_array(out, e.stats.mu);
        out += ", \"sigma\": ";
        format_real_array(out, e.stats.sigma);
        out += ", \"loss_init\": ";
        format_real(out, e.loss_init);
        out += ", \"loss_final\": ";
        format_real(out, e.loss_final);
        out += "}";
        if (i + 1 < set.entries.size()) {
            out += ",";
        }
        out += "\n";
    }
    out += "  ]\n}\n";

    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for write: " + path.string());
    }
    f << out;
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

StyleSet read_styleset_file(const std::filesystem::path& path) {
    audit::record_file_open(path.string());
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("styleset file: " + std::string(e.what()));
    }
    if (!j.is_object() || !j.contains("config") || !j.contains("entries")) {
        throw SchemaError("styleset file: missing config/entries");
    }
    StyleSet set;
    try {
        const auto& c = j.at("config");
        set.config.steps = c.at("steps").get<int>();
        set.config.lr = c.at("lr").get<double>();
        set.config.momentum = c.at("momentum").get<double>();
        set.config.sigma_min = c.at("sigma_min").get<double>();
        set.config.eps = c.at("eps").get<double>();
        for (const auto& e : j.at("entries")) {
            SteeredEntry entry;
            entry.stats.mu = e.at("mu").get<std::vector<double>>();
            entry.stats.sigma = e.at("sigma").get<std::vector<double>>();
            entry.loss_init = e.at("loss_init").get<double>();
            entry.loss_final = e.at("loss_final").get<double>();
            set.entries.push_back(std::move(entry));
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("styleset file: " + std::string(e.what()));
    }
    return set;
}

} // namespace psteer::steer
