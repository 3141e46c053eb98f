#include "psteer/detection.hpp"

#include "psteer/audit.hpp"
#include "psteer/errors.hpp"
#include "psteer/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

namespace psteer::det {

namespace {

// Class catalogue: solid base color and fixed box extent per class. The
// extent is pinned at 5x5 for every class: a grid cell's receptive field is
// 3x3 pixels at stride 2, so a 5x5 box has exactly ONE cell that sees pure
// interior color — and it is the center-assignment cell. Every other cell
// sees some background, so objectness can peak at the center and the
// surviving detection per object is unique under NMS at IoU 0.5. Wider boxes
// would give several featurally identical interior cells whose equal-
// confidence predictions are too far apart for NMS to merge. The fixed
// extent also makes the box head exactly learnable from the center-cell
// feature alone (the pure color identifies the class, the class fixes the
// extent).
struct ClassSpec {
    std::array<double, 3> color;
    int width;
    int height;
};

constexpr std::array<ClassSpec, kNumClasses> kClasses = {{
    {{0.90, 0.10, 0.10}, 5, 5},
    {{0.10, 0.90, 0.10}, 5, 5},
    {{0.10, 0.10, 0.90}, 5, 5},
}};

constexpr double kImg = static_cast<double>(kImageSize);

// Negative-side objectness weight (see the loss contract in the header).
// 5x leaves positives with ~200x the per-cell gradient of any negative
// while cutting the suppression time of hard negatives substantially; much
// higher and the early suppression flood can sink the whole feature space on
// low-contrast domains before the positive pull differentiates it.
constexpr double kNegObjWeight = 5.0;

// Hidden-layer leak. A plain ReLU hidden layer can be driven permanently
// dead by that same suppression flood (every unit negative at every cell =>
// zero gradient forever); the leak keeps a recovery path open.
constexpr double kLeakySlope = 0.05;

double clamp01(double v) {
    return std::clamp(v, 0.0, 1.0);
}

double sigmoid(double z) {
    return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

// log(1 + e^x) without overflow.
double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

void format_real(std::string& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

// Deterministic candidate ordering: confidence descending, then box
// coordinates and class ascending. Total order, so NMS and evaluation are
// reproducible across platforms.
bool detection_before(const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) {
        return a.confidence > b.confidence;
    }
    const auto ka = std::array{a.box.x1, a.box.y1, a.box.x2, a.box.y2,
                               static_cast<double>(a.class_id)};
    const auto kb = std::array{b.box.x1, b.box.y1, b.box.x2, b.box.y2,
                               static_cast<double>(b.class_id)};
    return ka < kb;
}

} // namespace

double iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

void validate_scene(const Scene& scene) {
    const auto& shape = scene.image.shape();
    if (shape != std::vector<std::size_t>{3, kImageSize, kImageSize}) {
        throw ShapeError("scene image must be [3,64,64]");
    }
    for (double v : scene.image.data()) {
        if (v < 0.0 || v > 1.0) {
            throw NumericError("scene pixels must lie in [0,1]");
        }
    }
    if (scene.truth.empty() || scene.truth.size() > 3) {
        throw SchemaError("scene must carry 1-3 truth boxes, got " +
                          std::to_string(scene.truth.size()));
    }
    for (const auto& t : scene.truth) {
        const Box& b = t.box;
        if (!(b.x1 < b.x2) || !(b.y1 < b.y2)) {
            throw SchemaError("truth box must satisfy x1<x2, y1<y2");
        }
        if (b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > kImg || b.y2 > kImg) {
            throw SchemaError("truth box exceeds image bounds");
        }
        if (b.area() < 16.0) {
            throw SchemaError("truth box area below 16 px^2");
        }
        if (t.class_id < 0 || t.class_id >= kNumClasses) {
            throw SchemaError("truth class out of range");
        }
    }
    for (std::size_t i = 0; i < scene.truth.size(); ++i) {
        for (std::size_t j = i + 1; j < scene.truth.size(); ++j) {
            if (iou(scene.truth[i].box, scene.truth[j].box) >= 0.3) {
                throw SchemaError("truth boxes overlap with IoU >= 0.3");
            }
        }
    }
}

void validate_domain(const DomainConfig& d) {
    if (d.name.empty()) {
        throw ConfigError("domain config needs a name");
    }
    if (d.gray_blend < 0.0 || d.gray_blend > 1.0) {
        throw ConfigError("domain gray_blend must lie in [0,1]");
    }
    if (d.noise_std < 0.0) {
        throw ConfigError("domain noise_std must be non-negative");
    }
    for (double g : d.channel_gain) {
        if (!std::isfinite(g)) {
            throw ConfigError("domain channel_gain must be finite");
        }
    }
    for (double b : d.channel_bias) {
        if (!std::isfinite(b)) {
            throw ConfigError("domain channel_bias must be finite");
        }
    }
}

DomainConfig read_domain_file(const std::filesystem::path& path) {
    audit::record_file_open(path.string());
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("domain file: " + std::string(e.what()));
    }
    DomainConfig d;
    try {
        d.name = j.at("name").get<std::string>();
        const auto gain = j.at("channel_gain").get<std::vector<double>>();
        const auto bias = j.at("channel_bias").get<std::vector<double>>();
        if (gain.size() != 3 || bias.size() != 3) {
            throw SchemaError("domain gain/bias must have 3 entries");
        }
        std::copy(gain.begin(), gain.end(), d.channel_gain.begin());
        std::copy(bias.begin(), bias.end(), d.channel_bias.begin());
        d.gray_blend = j.at("gray_blend").get<double>();
        d.noise_std = j.at("noise_std").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("domain file: " + std::string(e.what()));
    }
    validate_domain(d);
    return d;
}

Tensor apply_domain_shift(const Tensor& image, const DomainConfig& d, SeededRng& rng) {
    const std::size_t h = image.shape()[1];
    const std::size_t w = image.shape()[2];
    const std::size_t plane = h * w;
    std::vector<double> out(3 * plane);

    // Pass 1, per pixel: affine shift, desaturation blend, clamp.
    const auto px = image.data();
    for (std::size_t p = 0; p < plane; ++p) {
        double t[3];
        for (std::size_t c = 0; c < 3; ++c) {
            t[c] = d.channel_gain[c] * px[c * plane + p] + d.channel_bias[c];
        }
        const double gray = (t[0] + t[1] + t[2]) / 3.0;
        for (std::size_t c = 0; c < 3; ++c) {
            out[c * plane + p] =
                clamp01((1.0 - d.gray_blend) * t[c] + d.gray_blend * gray);
        }
    }

    // Pass 2, storage (c,y,x) order: additive gaussian noise, re-clamp. The
    // draw order is part of the determinism contract; noise_std = 0 draws
    // nothing, so clear-domain output is untouched by this pass.
    if (d.noise_std > 0.0) {
        for (double& v : out) {
            v = clamp01(v + rng.normal(0.0, d.noise_std));
        }
    }
    return Tensor(image.shape(), std::move(out));
}

Scene gen_scene(const DomainConfig& domain, SeededRng& rng) {
    validate_domain(domain);

    const double bg = rng.uniform(0.45, 0.60);
    const int n_boxes = static_cast<int>(rng.uniform_int(1, 3));

    std::vector<GroundTruthBox> truth;
    int attempts = 0;
    while (static_cast<int>(truth.size()) < n_boxes) {
        if (++attempts > 1000) {
            throw PlacementError("gen_scene: no valid placement in 1000 attempts");
        }
        const int cls = static_cast<int>(rng.uniform_int(0, kNumClasses - 1));
        const auto& spec = kClasses[static_cast<std::size_t>(cls)];
        // Origins are restricted to even coordinates so each box aligns the
        // same way with the stride-2 grid: exactly one cell sees pure
        // interior color and the center-cell offsets are the same constants
        // for every instance. Odd origins would split each object between
        // two featurally identical cells with conflicting regression targets.
        // Placement keeps a 2px margin from the image border so object
        // pixels never fall inside the zero-padded receptive fields of edge
        // cells; border-cell features then depend only on the background.
        const auto x1 = static_cast<double>(
            2 * rng.uniform_int(
                    1, (static_cast<std::int64_t>(kImageSize) - spec.width) / 2 -
                           1));
        const auto y1 = static_cast<double>(
            2 * rng.uniform_int(
                    1, (static_cast<std::int64_t>(kImageSize) - spec.height) / 2 -
                           1));
        const Box box{x1, y1, x1 + spec.width, y1 + spec.height};

        // Stricter than the stored-scene contract (IoU < 0.3): also reject
        // placements whose center falls inside an earlier box, so every box
        // owns its center cell and center-cell assignment is unambiguous.
        bool ok = true;
        for (const auto& prev : truth) {
            if (iou(box, prev.box) >= 0.3) {
                ok = false;
                break;
            }
            const double cx = (box.x1 + box.x2) / 2.0;
            const double cy = (box.y1 + box.y2) / 2.0;
            const double px = (prev.box.x1 + prev.box.x2) / 2.0;
            const double py = (prev.box.y1 + prev.box.y2) / 2.0;
            const bool c_in_prev = cx > prev.box.x1 && cx < prev.box.x2 &&
                                   cy > prev.box.y1 && cy < prev.box.y2;
            const bool prev_in_c =
                px > box.x1 && px < box.x2 && py > box.y1 && py < box.y2;
            if (c_in_prev || prev_in_c) {
                ok = false;
                break;
            }
        }
        if (ok) {
            truth.push_back({box, cls});
        }
    }

    std::vector<double> img(3 * kImageSize * kImageSize, bg);
    for (const auto& t : truth) {
        const auto& color = kClasses[static_cast<std::size_t>(t.class_id)].color;
        for (std::size_t c = 0; c < 3; ++c) {
            for (auto y = static_cast<std::size_t>(t.box.y1);
                 y < static_cast<std::size_t>(t.box.y2); ++y) {
                for (auto x = static_cast<std::size_t>(t.box.x1);
                     x < static_cast<std::size_t>(t.box.x2); ++x) {
                    img[(c * kImageSize + y) * kImageSize + x] = color[c];
                }
            }
        }
    }

    Scene scene{Tensor({3, kImageSize, kImageSize}, std::move(img)), std::move(truth)};
    scene.image = apply_domain_shift(scene.image, domain, rng);
    validate_scene(scene);
    return scene;
}

CellHead CellHead::init(std::uint64_t seed) {
    CellHead h;
    h.w1 = std::move(rng_fill({kHeadHidden, kHeadIn}, seed ^ 0xC0DE,
                              NormalDist{1.0 / std::sqrt(double(kHeadIn))}))
               .take();
    // Small positive bias keeps every hidden unit initially alive; a unit
    // whose preactivation starts non-positive at every cell would never
    // receive gradient through the ReLU.
    h.b1.assign(kHeadHidden, 0.1);
    h.w2 = std::move(rng_fill({kHeadOut, kHeadHidden}, seed ^ 0xC0DE2,
                              NormalDist{1.0 / std::sqrt(double(kHeadHidden))}))
               .take();
    h.b2.assign(kHeadOut, 0.0);
    // Quiet objectness prior: almost every cell is background, so starting
    // the objectness logit low keeps early training from flooding the image
    // with half-confident detections and lets the positive pull separate
    // object cells cleanly.
    h.b2[0] = -2.0;
    return h;
}

StudentModel StudentModel::init(std::uint64_t seed) {
    StudentModel m;
    m.stem_w = std::move(rng_fill({kHeadIn, 3, 3, 3}, seed ^ 0x57E4,
                                  NormalDist{1.0 / std::sqrt(27.0)}))
                   .take();
    // Small positive bias: channels whose tap sum happens to be negative
    // would otherwise start image-wide dead on bright, low-contrast inputs
    // and never receive gradient through the ReLU.
    m.stem_b.assign(kHeadIn, 0.1);
    m.head = CellHead::init(seed ^ 0x4EAD);
    return m;
}

Tensor StudentModel::features(const Tensor& image) const {
    return enc::conv3x3_s2(image, stem_w, stem_b, kHeadIn, /*relu=*/true);
}

namespace {

void check_grid(const Tensor& grid) {
    if (grid.shape() != std::vector<std::size_t>{kHeadIn, kGridSize, kGridSize}) {
        throw ShapeError("detection grid must be [8,32,32]");
    }
}

void check_head(const CellHead& head) {
    if (head.w1.size() != kHeadHidden * kHeadIn || head.b1.size() != kHeadHidden ||
        head.w2.size() != kHeadOut * kHeadHidden || head.b2.size() != kHeadOut) {
        throw ShapeError("cell head has wrong parameter arity");
    }
}

// Both layers for the feature column of one cell; h receives the post-ReLU
// hidden activations (the backward pass needs them).
void cell_forward(const Tensor& grid, const CellHead& head, std::size_t cy,
                  std::size_t cx, double h[kHeadHidden], double z[kHeadOut]) {
    double x[kHeadIn];
    for (std::size_t c = 0; c < kHeadIn; ++c) {
        x[c] = grid.at(c, cy, cx);
    }
    for (std::size_t j = 0; j < kHeadHidden; ++j) {
        double acc = head.b1[j];
        const double* row = head.w1.data() + j * kHeadIn;
        for (std::size_t c = 0; c < kHeadIn; ++c) {
            acc += row[c] * x[c];
        }
        h[j] = acc > 0.0 ? acc : kLeakySlope * acc;
    }
    for (std::size_t o = 0; o < kHeadOut; ++o) {
        double acc = head.b2[o];
        const double* row = head.w2.data() + o * kHeadHidden;
        for (std::size_t j = 0; j < kHeadHidden; ++j) {
            acc += row[j] * h[j];
        }
        z[o] = acc;
    }
}

void cell_logits(const Tensor& grid, const CellHead& head, std::size_t cy,
                 std::size_t cx, double z[kHeadOut]) {
    double h[kHeadHidden];
    cell_forward(grid, head, cy, cx, h, z);
}

void softmax3(const double* logits, double* probs) {
    const double m = std::max({logits[0], logits[1], logits[2]});
    double sum = 0.0;
    for (int k = 0; k < kNumClasses; ++k) {
        probs[k] = std::exp(logits[k] - m);
        sum += probs[k];
    }
    for (int k = 0; k < kNumClasses; ++k) {
        probs[k] /= sum;
    }
}

} // namespace

Detections detect_from_grid(const Tensor& grid, const CellHead& head,
                            double conf_floor) {
    check_grid(grid);
    check_head(head);

    // Decode one candidate per cell. Filtering below conf_floor before NMS is
    // equivalent to NMS-then-filter: a candidate under the floor never
    // suppresses anything above it (greedy NMS runs in descending order).
    Detections cands;
    for (std::size_t cy = 0; cy < kGridSize; ++cy) {
        for (std::size_t cx = 0; cx < kGridSize; ++cx) {
            double z[kHeadOut];
            cell_logits(grid, head, cy, cx, z);
            double probs[kNumClasses];
            softmax3(z + 1, probs);
            int cls = 0;
            for (int k = 1; k < kNumClasses; ++k) {
                if (probs[k] > probs[cls]) {
                    cls = k;
                }
            }
            const double conf = sigmoid(z[0]) * probs[cls];
            if (conf < conf_floor) {
                continue;
            }
            const double ccx = kCellPx * static_cast<double>(cx) + 1.0;
            const double ccy = kCellPx * static_cast<double>(cy) + 1.0;
            const double l = std::max(z[4], 0.0);
            const double t = std::max(z[5], 0.0);
            const double r = std::max(z[6], 0.0);
            const double b = std::max(z[7], 0.0);
            const Box box{std::clamp(ccx - kCellPx * l, 0.0, kImg),
                          std::clamp(ccy - kCellPx * t, 0.0, kImg),
                          std::clamp(ccx + kCellPx * r, 0.0, kImg),
                          std::clamp(ccy + kCellPx * b, 0.0, kImg)};
            if (box.x2 - box.x1 <= 0.0 || box.y2 - box.y1 <= 0.0) {
                continue; // degenerate decode, nothing to match
            }
            cands.push_back({box, cls, conf});
        }
    }

    std::sort(cands.begin(), cands.end(), detection_before);

    // Class-wise greedy NMS: keep in descending order, suppress same-class
    // overlaps with IoU > 0.5.
    Detections kept;
    std::vector<bool> dead(cands.size(), false);
    for (std::size_t i = 0; i < cands.size(); ++i) {
        if (dead[i]) {
            continue;
        }
        kept.push_back(cands[i]);
        for (std::size_t j = i + 1; j < cands.size(); ++j) {
            if (!dead[j] && cands[j].class_id == cands[i].class_id &&
                iou(cands[j].box, cands[i].box) > 0.5) {
                dead[j] = true;
            }
        }
    }
    return kept;
}

Tensor standardize_grid(const Tensor& grid) {
    // Instance normalization toward zero mean, unit sigma, with a floored
    // divisor: out = (x - mu) / max(sigma, floor). Any per-channel affine
    // map of the input whose resulting sigma stays above the floor cancels
    // exactly, so the head sees one canonical space no matter which style
    // the fine-tuning stage sampled and no matter how a target domain moved
    // the feature statistics. Channels pushed below the floor are damped
    // toward zero rather than amplified: near-constant channels (most toy
    // channels, away from the sparse objects) would otherwise explode.
    constexpr double kSigmaFloor = 0.05;
    const auto st = channel_stats(grid);
    const std::size_t c = grid.shape()[0];
    const std::size_t plane = grid.shape()[1] * grid.shape()[2];
    std::vector<double> out(grid.size());
    const auto src = grid.data();
    for (std::size_t k = 0; k < c; ++k) {
        const double inv = 1.0 / std::max(st.sigma[k], kSigmaFloor);
        for (std::size_t p = 0; p < plane; ++p) {
            out[k * plane + p] = (src[k * plane + p] - st.mu[k]) * inv;
        }
    }
    return Tensor(grid.shape(), std::move(out));
}

Detections teacher_detect(const Tensor& image, const CellHead& head,
                          const enc::EncoderWeights& w, double conf_floor) {
    return detect_from_grid(standardize_grid(enc::encode_image_layer1(image, w)),
                            head, conf_floor);
}

Detections student_detect(const Tensor& image, const StudentModel& m,
                          double conf_floor) {
    return detect_from_grid(m.features(image), m.head, conf_floor);
}

Detections pseudo_label(const Detections& d, double tau) {
    if (tau < 0.0 || tau > 1.0) {
        throw ConfigError("pseudo_label tau must lie in [0,1]");
    }
    Detections out;
    for (const auto& det : d) {
        if (det.confidence >= tau) {
            out.push_back(det);
        }
    }
    return out;
}

HeadGrad head_loss_grad(const Tensor& grid, const std::vector<GroundTruthBox>& truth,
                        const CellHead& head, Tensor* grad_grid) {
    check_grid(grid);
    check_head(head);

    // Center-cell assignment: the cell containing the box center is the one
    // positive for that box; a later truth box overwrites an earlier one
    // landing on the same cell (the generator never produces that).
    constexpr std::size_t n_cells = kGridSize * kGridSize;
    std::vector<int> pos_class(n_cells, -1);
    std::vector<std::array<double, 4>> pos_ltrb(n_cells);
    std::size_t n_pos = 0;
    for (const auto& t : truth) {
        const double cx = (t.box.x1 + t.box.x2) / 2.0;
        const double cy = (t.box.y1 + t.box.y2) / 2.0;
        const auto col = std::min<std::size_t>(
            static_cast<std::size_t>(cx / kCellPx), kGridSize - 1);
        const auto row = std::min<std::size_t>(
            static_cast<std::size_t>(cy / kCellPx), kGridSize - 1);
        const std::size_t idx = row * kGridSize + col;
        if (pos_class[idx] < 0) {
            ++n_pos;
        }
        pos_class[idx] = t.class_id;
        const double ccx = kCellPx * static_cast<double>(col) + 1.0;
        const double ccy = kCellPx * static_cast<double>(row) + 1.0;
        pos_ltrb[idx] = {(ccx - t.box.x1) / kCellPx, (ccy - t.box.y1) / kCellPx,
                         (t.box.x2 - ccx) / kCellPx, (t.box.y2 - ccy) / kCellPx};
    }
    const std::size_t n_neg = n_cells - n_pos;
    const double inv_pos = n_pos > 0 ? 1.0 / static_cast<double>(n_pos) : 0.0;
    const double inv_neg =
        n_neg > 0 ? kNegObjWeight / static_cast<double>(n_neg) : 0.0;

    HeadGrad out;
    out.w1.assign(kHeadHidden * kHeadIn, 0.0);
    out.b1.assign(kHeadHidden, 0.0);
    out.w2.assign(kHeadOut * kHeadHidden, 0.0);
    out.b2.assign(kHeadOut, 0.0);
    std::vector<double> dgrid;
    if (grad_grid != nullptr) {
        dgrid.assign(kHeadIn * n_cells, 0.0);
    }

    for (std::size_t cy = 0; cy < kGridSize; ++cy) {
        for (std::size_t cx = 0; cx < kGridSize; ++cx) {
            const std::size_t idx = cy * kGridSize + cx;
            double hact[kHeadHidden];
            double z[kHeadOut];
            cell_forward(grid, head, cy, cx, hact, z);

            double dz[kHeadOut] = {0.0};
            const int cls = pos_class[idx];
            if (cls >= 0) {
                out.loss.obj += softplus(-z[0]) * inv_pos;
                dz[0] = (sigmoid(z[0]) - 1.0) * inv_pos;

                double probs[kNumClasses];
                softmax3(z + 1, probs);
                out.loss.cls += -std::log(std::max(probs[cls], 1e-300)) * inv_pos;
                for (int k = 0; k < kNumClasses; ++k) {
                    dz[1 + k] = (probs[k] - (k == cls ? 1.0 : 0.0)) * inv_pos;
                }

                for (int j = 0; j < 4; ++j) {
                    const double diff =
                        z[4 + j] - pos_ltrb[idx][static_cast<std::size_t>(j)];
                    out.loss.box += std::abs(diff) * inv_pos;
                    dz[4 + j] = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) * inv_pos;
                }
            } else {
                out.loss.obj += softplus(z[0]) * inv_neg;
                dz[0] = sigmoid(z[0]) * inv_neg;
            }

            // Layer 2: accumulate w2/b2 grads and pull dz back to the hidden
            // activations.
            double dh[kHeadHidden] = {0.0};
            for (std::size_t o = 0; o < kHeadOut; ++o) {
                if (dz[o] == 0.0) {
                    continue;
                }
                out.b2[o] += dz[o];
                double* wrow = out.w2.data() + o * kHeadHidden;
                const double* hrow = head.w2.data() + o * kHeadHidden;
                for (std::size_t j = 0; j < kHeadHidden; ++j) {
                    wrow[j] += dz[o] * hact[j];
                    dh[j] += hrow[j] * dz[o];
                }
            }

            // Layer 1 through the ReLU (subgradient 0 at 0).
            double x[kHeadIn];
            for (std::size_t c = 0; c < kHeadIn; ++c) {
                x[c] = grid.at(c, cy, cx);
            }
            for (std::size_t j = 0; j < kHeadHidden; ++j) {
                if (dh[j] == 0.0) {
                    continue;
                }
                // Leaky-ReLU slope; hact keeps the preactivation sign.
                const double dpre =
                    dh[j] * (hact[j] > 0.0 ? 1.0 : kLeakySlope);
                out.b1[j] += dpre;
                double* wrow = out.w1.data() + j * kHeadIn;
                const double* hrow = head.w1.data() + j * kHeadIn;
                for (std::size_t c = 0; c < kHeadIn; ++c) {
                    wrow[c] += dpre * x[c];
                    if (grad_grid != nullptr) {
                        dgrid[c * n_cells + idx] += hrow[c] * dpre;
                    }
                }
            }
        }
    }
    out.loss.total = out.loss.obj + out.loss.cls + out.loss.box;
    if (grad_grid != nullptr) {
        *grad_grid = Tensor({kHeadIn, kGridSize, kGridSize}, std::move(dgrid));
    }
    return out;
}

SourceCache::SourceCache(std::vector<Scene> scenes, const enc::EncoderWeights& w) {
    if (scenes.size() != kSize) {
        throw ConfigError("source cache must hold exactly " + std::to_string(kSize) +
                          " scenes, got " + std::to_string(scenes.size()));
    }
    for (const auto& s : scenes) {
        validate_scene(s);
    }
    scenes_ = std::move(scenes);
    features_.reserve(kSize);
    for (const auto& s : scenes_) {
        features_.push_back(enc::encode_image_layer1(s.image, w));
    }
}

namespace {

void apply_head_step(CellHead& head, const HeadGrad& g, double lr) {
    for (std::size_t i = 0; i < head.w1.size(); ++i) {
        head.w1[i] -= lr * g.w1[i];
    }
    for (std::size_t i = 0; i < head.b1.size(); ++i) {
        head.b1[i] -= lr * g.b1[i];
    }
    for (std::size_t i = 0; i < head.w2.size(); ++i) {
        head.w2[i] -= lr * g.w2[i];
    }
    for (std::size_t i = 0; i < head.b2.size(); ++i) {
        head.b2[i] -= lr * g.b2[i];
    }
}

// One SGD step of the full student (stem + head) on a single labeled image.
double student_step(StudentModel& m, const Tensor& image,
                    const std::vector<GroundTruthBox>& truth, double lr) {
    const Tensor pre = enc::conv3x3_s2(image, m.stem_w, m.stem_b, kHeadIn,
                                       /*relu=*/false);
    std::vector<double> grid_buf(pre.data().begin(), pre.data().end());
    for (double& v : grid_buf) {
        v = std::max(v, 0.0);
    }
    const Tensor grid(pre.shape(), std::move(grid_buf));

    Tensor dgrid;
    const HeadGrad hg = head_loss_grad(grid, truth, m.head, &dgrid);

    // ReLU mask (subgradient 0 at 0), then correlate with input patches to
    // reach the stem weights.
    const std::size_t h2 = kGridSize;
    const std::size_t plane = h2 * h2;
    std::vector<double> dw(m.stem_w.size(), 0.0);
    std::vector<double> db(m.stem_b.size(), 0.0);
    const auto img = image.data();
    for (std::size_t co = 0; co < kHeadIn; ++co) {
        for (std::size_t oy = 0; oy < h2; ++oy) {
            for (std::size_t ox = 0; ox < h2; ++ox) {
                const std::size_t oidx = (co * h2 + oy) * h2 + ox;
                if (pre[oidx] <= 0.0) {
                    continue;
                }
                const double d = dgrid[oidx];
                if (d == 0.0) {
                    continue;
                }
                db[co] += d;
                for (std::size_t ci = 0; ci < 3; ++ci) {
                    for (std::size_t ky = 0; ky < 3; ++ky) {
                        const auto iy =
                            static_cast<std::ptrdiff_t>(2 * oy + ky) - 1;
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(kImageSize)) {
                            continue;
                        }
                        for (std::size_t kx = 0; kx < 3; ++kx) {
                            const auto ix =
                                static_cast<std::ptrdiff_t>(2 * ox + kx) - 1;
                            if (ix < 0 ||
                                ix >= static_cast<std::ptrdiff_t>(kImageSize)) {
                                continue;
                            }
                            dw[((co * 3 + ci) * 3 + ky) * 3 + kx] +=
                                d * img[(ci * kImageSize +
                                         static_cast<std::size_t>(iy)) *
                                            kImageSize +
                                        static_cast<std::size_t>(ix)];
                        }
                    }
                }
            }
        }
    }
    (void)plane;

    for (std::size_t i = 0; i < m.stem_w.size(); ++i) {
        m.stem_w[i] -= lr * dw[i];
    }
    for (std::size_t i = 0; i < m.stem_b.size(); ++i) {
        m.stem_b[i] -= lr * db[i];
    }
    apply_head_step(m.head, hg, lr);
    return hg.loss.total;
}

} // namespace

FinetuneResult finetune_teacher(const SourceCache& cache, const steer::StyleSet& styles,
                                const TeacherHead& head, int epochs, double lr,
                                SeededRng& rng) {
    if (epochs < 0) {
        throw ConfigError("finetune_teacher epochs must be non-negative");
    }
    if (styles.entries.empty()) {
        throw EmptyInputError("finetune_teacher needs a non-empty style set");
    }
    check_head(head);

    FinetuneResult res;
    res.head = head;
    res.epoch_loss.reserve(static_cast<std::size_t>(epochs));
    const auto n_styles = static_cast<std::int64_t>(styles.entries.size());
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double sum = 0.0;
        for (std::size_t i = 0; i < SourceCache::kSize; ++i) {
            const auto pick =
                static_cast<std::size_t>(rng.uniform_int(0, n_styles - 1));
            const Tensor grid = standardize_grid(
                steer::pin(cache.features()[i], styles.entries[pick].stats));
            const HeadGrad g =
                head_loss_grad(grid, cache.scenes()[i].truth, res.head);
            apply_head_step(res.head, g, lr);
            sum += g.loss.total;
        }
        res.epoch_loss.push_back(sum / static_cast<double>(SourceCache::kSize));
    }
    return res;
}

FinetuneResult train_teacher_head(const SourceCache& cache, const TeacherHead& head,
                                  int epochs, double lr) {
    if (epochs < 0) {
        throw ConfigError("train_teacher_head epochs must be non-negative");
    }
    check_head(head);
    FinetuneResult res;
    res.head = head;
    res.epoch_loss.reserve(static_cast<std::size_t>(epochs));
    std::vector<Tensor> grids;
    grids.reserve(SourceCache::kSize);
    for (std::size_t i = 0; i < SourceCache::kSize; ++i) {
        grids.push_back(standardize_grid(cache.features()[i]));
    }
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double sum = 0.0;
        for (std::size_t i = 0; i < SourceCache::kSize; ++i) {
            const HeadGrad g =
                head_loss_grad(grids[i], cache.scenes()[i].truth, res.head);
            apply_head_step(res.head, g, lr);
            sum += g.loss.total;
        }
        res.epoch_loss.push_back(sum / static_cast<double>(SourceCache::kSize));
    }
    return res;
}

AdaptResult adapt_student(const StudentModel& student,
                          const std::vector<Tensor>& target_images,
                          const TeacherHead& teacher_head, const enc::EncoderWeights& w,
                          double tau, int epochs, double lr) {
    if (target_images.empty()) {
        throw EmptyInputError("adapt_student needs at least one target image");
    }
    if (epochs < 0) {
        throw ConfigError("adapt_student epochs must be non-negative");
    }

    // Pseudo-labels once, up front: the teacher is fixed during adaptation.
    // conf_floor 0 keeps the full NMS output so tau alone decides retention.
    std::vector<std::vector<GroundTruthBox>> pseudo(target_images.size());
    for (std::size_t i = 0; i < target_images.size(); ++i) {
        const Detections kept =
            pseudo_label(teacher_detect(target_images[i], teacher_head, w, 0.0), tau);
        for (const auto& d : kept) {
            pseudo[i].push_back({d.box, d.class_id});
        }
    }

    AdaptResult res;
    res.student = student;
    res.epoch_loss.reserve(static_cast<std::size_t>(epochs));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double sum = 0.0;
        for (std::size_t i = 0; i < target_images.size(); ++i) {
            sum += student_step(res.student, target_images[i], pseudo[i], lr);
        }
        res.epoch_loss.push_back(sum / static_cast<double>(target_images.size()));
    }
    return res;
}

AdaptResult train_student(const StudentModel& student, const std::vector<Scene>& scenes,
                          int epochs, double lr) {
    if (scenes.empty()) {
        throw EmptyInputError("train_student needs at least one scene");
    }
    if (epochs < 0) {
        throw ConfigError("train_student epochs must be non-negative");
    }
    AdaptResult res;
    res.student = student;
    res.epoch_loss.reserve(static_cast<std::size_t>(epochs));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        double sum = 0.0;
        for (const auto& s : scenes) {
            sum += student_step(res.student, s.image, s.truth, lr);
        }
        res.epoch_loss.push_back(sum / static_cast<double>(scenes.size()));
    }
    return res;
}

EvalReport evaluate_map(const std::vector<Detections>& preds,
                        const std::vector<std::vector<GroundTruthBox>>& truths,
                        double iou_thresh) {
    if (preds.size() != truths.size()) {
        throw ShapeError("evaluate_map: prediction/truth image counts differ");
    }

    std::size_t total_truth = 0;
    for (const auto& t : truths) {
        total_truth += t.size();
    }
    if (total_truth == 0) {
        throw MetricError("evaluate_map: no ground truth at all, mAP undefined");
    }

    EvalReport report;
    double ap_sum = 0.0;
    std::size_t n_classes_with_truth = 0;

    for (int cls = 0; cls < kNumClasses; ++cls) {
        std::size_t n_truth = 0;
        for (const auto& t : truths) {
            for (const auto& g : t) {
                n_truth += (g.class_id == cls) ? 1 : 0;
            }
        }
        if (n_truth == 0) {
            continue; // class absent from truth: excluded from the mean
        }
        ++n_classes_with_truth;

        // Flatten this class' detections across images; sort by confidence
        // descending with the deterministic tie-break extended by image index.
        struct Flat {
            std::size_t image;
            Detection det;
        };
        std::vector<Flat> flat;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            for (const auto& d : preds[i]) {
                if (d.class_id == cls) {
                    flat.push_back({i, d});
                }
            }
        }
        std::sort(flat.begin(), flat.end(), [](const Flat& a, const Flat& b) {
            if (a.det.confidence != b.det.confidence) {
                return a.det.confidence > b.det.confidence;
            }
            if (a.image != b.image) {
                return a.image < b.image;
            }
            return detection_before(a.det, b.det);
        });

        // Greedy matching: best-IoU unmatched truth of the class, lowest
        // truth index on ties; IoU below threshold is a false positive.
        std::vector<std::vector<bool>> used(truths.size());
        for (std::size_t i = 0; i < truths.size(); ++i) {
            used[i].assign(truths[i].size(), false);
        }
        std::vector<bool> is_tp(flat.size(), false);
        for (std::size_t i = 0; i < flat.size(); ++i) {
            const auto img = flat[i].image;
            double best = 0.0;
            std::ptrdiff_t best_j = -1;
            for (std::size_t j = 0; j < truths[img].size(); ++j) {
                if (used[img][j] || truths[img][j].class_id != cls) {
                    continue;
                }
                const double v = iou(flat[i].det.box, truths[img][j].box);
                if (v > best) {
                    best = v;
                    best_j = static_cast<std::ptrdiff_t>(j);
                }
            }
            if (best_j >= 0 && best >= iou_thresh) {
                is_tp[i] = true;
                used[img][static_cast<std::size_t>(best_j)] = true;
            }
        }

        // All-point interpolated AP: precision envelope over the PR curve.
        double ap = 0.0;
        if (!flat.empty()) {
            std::vector<double> prec(flat.size());
            std::vector<double> rec(flat.size());
            std::size_t tp = 0;
            for (std::size_t i = 0; i < flat.size(); ++i) {
                tp += is_tp[i] ? 1 : 0;
                prec[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
                rec[i] = static_cast<double>(tp) / static_cast<double>(n_truth);
            }
            for (std::size_t i = flat.size() - 1; i-- > 0;) {
                prec[i] = std::max(prec[i], prec[i + 1]);
            }
            double prev_rec = 0.0;
            for (std::size_t i = 0; i < flat.size(); ++i) {
                if (rec[i] > prev_rec) {
                    ap += (rec[i] - prev_rec) * prec[i];
                    prev_rec = rec[i];
                }
            }
        }
        report.per_class_ap[cls] = ap;
        ap_sum += ap;
    }

    report.map50 = ap_sum / static_cast<double>(n_classes_with_truth);
    return report;
}

void write_eval_report(const std::filesystem::path& path, const EvalReport& report,
                       const std::string& meta_json) {
    std::string out = "{\n  \"map50\": ";
    format_real(out, report.map50);
    if (!meta_json.empty()) {
        out += ",\n  \"meta\": " + meta_json;
    }
    out += ",\n  \"per_class_ap\": {";
    bool first = true;
    for (const auto& [cls, ap] : report.per_class_ap) {
        if (!first) {
            out += ", ";
        }
        first = false;
        out += "\"" + std::to_string(cls) + "\": ";
        format_real(out, ap);
    }
    out += "}\n}\n";

    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for write: " + path.string());
    }
    f << out;
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

namespace {

void format_real_array(std::string& out, std::span<const double> xs) {
    out += "[";
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i > 0) {
            out += ", ";
        }
        format_real(out, xs[i]);
    }
    out += "]";
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for write: " + path.string());
    }
    f << text;
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

nlohmann::json parse_json_file(const std::filesystem::path& path, const char* what) {
    audit::record_file_open(path.string());
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string(what) + ": " + e.what());
    }
}

} // namespace

void write_head_file(const std::filesystem::path& path, const CellHead& head,
                     const std::string& meta_json) {
    check_head(head);
    std::string out = "{\n  \"b1\": ";
    format_real_array(out, head.b1);
    out += ",\n  \"b2\": ";
    format_real_array(out, head.b2);
    if (!meta_json.empty()) {
        out += ",\n  \"meta\": " + meta_json;
    }
    out += ",\n  \"w1\": ";
    format_real_array(out, head.w1);
    out += ",\n  \"w2\": ";
    format_real_array(out, head.w2);
    out += "\n}\n";
    write_text_file(path, out);
}

CellHead read_head_file(const std::filesystem::path& path) {
    const auto j = parse_json_file(path, "head file");
    CellHead head;
    try {
        head.w1 = j.at("w1").get<std::vector<double>>();
        head.b1 = j.at("b1").get<std::vector<double>>();
        head.w2 = j.at("w2").get<std::vector<double>>();
        head.b2 = j.at("b2").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("head file: " + std::string(e.what()));
    }
    check_head(head);
    return head;
}

void write_student_file(const std::filesystem::path& path, const StudentModel& m,
                        const std::string& meta_json) {
    check_head(m.head);
    std::string out = "{\n  \"head\": {\"b1\": ";
    format_real_array(out, m.head.b1);
    out += ", \"b2\": ";
    format_real_array(out, m.head.b2);
    out += ", \"w1\": ";
    format_real_array(out, m.head.w1);
    out += ", \"w2\": ";
    format_real_array(out, m.head.w2);
    out += "}";
    if (!meta_json.empty()) {
        out += ",\n  \"meta\": " + meta_json;
    }
    out += ",\n  \"stem_b\": ";
    format_real_array(out, m.stem_b);
    out += ",\n  \"stem_w\": ";
    format_real_array(out, m.stem_w);
    out += "\n}\n";
    write_text_file(path, out);
}

StudentModel read_student_file(const std::filesystem::path& path) {
    const auto j = parse_json_file(path, "student file");
    StudentModel m;
    try {
        m.head.w1 = j.at("head").at("w1").get<std::vector<double>>();
        m.head.b1 = j.at("head").at("b1").get<std::vector<double>>();
        m.head.w2 = j.at("head").at("w2").get<std::vector<double>>();
        m.head.b2 = j.at("head").at("b2").get<std::vector<double>>();
        m.stem_w = j.at("stem_w").get<std::vector<double>>();
        m.stem_b = j.at("stem_b").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError("student file: " + std::string(e.what()));
    }
    check_head(m.head);
    if (m.stem_w.size() != kHeadIn * 27 || m.stem_b.size() != kHeadIn) {
        throw SchemaError("student file: stem has wrong parameter arity");
    }
    return m;
}

void write_detections_file(const std::filesystem::path& path,
                           const std::vector<Detections>& per_image) {
    std::string out;
    for (const auto& dets : per_image) {
        out += "{\"detections\": [";
        for (std::size_t i = 0; i < dets.size(); ++i) {
            if (i > 0) {
                out += ", ";
            }
            out += "{\"box\": ";
            const std::array<double, 4> coords = {dets[i].box.x1, dets[i].box.y1,
                                                  dets[i].box.x2, dets[i].box.y2};
            format_real_array(out, coords);
            out += ", \"class\": " + std::to_string(dets[i].class_id);
            out += ", \"confidence\": ";
            format_real(out, dets[i].confidence);
            out += "}";
        }
        out += "]}\n";
    }
    write_text_file(path, out);
}

std::vector<Detections> read_detections_file(const std::filesystem::path& path) {
    audit::record_file_open(path.string());
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    std::vector<Detections> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        Detections dets;
        try {
            const auto j = nlohmann::json::parse(line);
            for (const auto& d : j.at("detections")) {
                const auto coords = d.at("box").get<std::vector<double>>();
                if (coords.size() != 4) {
                    throw SchemaError("detections file: box needs 4 coordinates");
                }
                dets.push_back({Box{coords[0], coords[1], coords[2], coords[3]},
                                d.at("class").get<int>(),
                                d.at("confidence").get<double>()});
            }
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("detections " + path.string() + " line " +
                             std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(std::move(dets));
    }
    return out;
}

void write_dataset(const std::filesystem::path& manifest,
                   const std::vector<Scene>& scenes) {
    const auto dir = manifest.parent_path();
    const std::string stem = manifest.stem().string();

    std::string lines;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        validate_scene(scenes[i]);
        char name[64];
        std::snprintf(name, sizeof(name), "%s_%04zu.p2af", stem.c_str(), i);
        write_feature_file(dir / name, scenes[i].image);

        nlohmann::json boxes = nlohmann::json::array();
        for (const auto& t : scenes[i].truth) {
            boxes.push_back({{"x1", t.box.x1},
                             {"y1", t.box.y1},
                             {"x2", t.box.x2},
                             {"y2", t.box.y2},
                             {"class", t.class_id}});
        }
        const nlohmann::json line = {{"image", name}, {"boxes", boxes}};
        lines += line.dump();
        lines += "\n";
    }

    std::ofstream f(manifest, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for write: " + manifest.string());
    }
    f << lines;
    if (!f) {
        throw IoError("write failed: " + manifest.string());
    }
}

namespace {

std::vector<nlohmann::json> read_manifest_lines(const std::filesystem::path& manifest) {
    audit::record_file_open(manifest.string());
    std::ifstream f(manifest);
    if (!f) {
        throw IoError("cannot open: " + manifest.string());
    }
    std::vector<nlohmann::json> lines;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            lines.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("dataset " + manifest.string() + " line " +
                             std::to_string(line_no) + ": " + e.what());
        }
    }
    return lines;
}

} // namespace

std::vector<Scene> read_dataset(const std::filesystem::path& manifest) {
    // Truth is about to be parsed: one audit event per manifest read.
    audit::record_truth_parse(manifest.string());
    const auto dir = manifest.parent_path();
    std::vector<Scene> scenes;
    for (const auto& j : read_manifest_lines(manifest)) {
        Scene s;
        try {
            s.image = read_feature_file(dir / j.at("image").get<std::string>());
            for (const auto& b : j.at("boxes")) {
                GroundTruthBox t;
                t.box = Box{b.at("x1").get<double>(), b.at("y1").get<double>(),
                            b.at("x2").get<double>(), b.at("y2").get<double>()};
                t.class_id = b.at("class").get<int>();
                s.truth.push_back(t);
            }
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("dataset " + manifest.string() + ": " + e.what());
        }
        validate_scene(s);
        scenes.push_back(std::move(s));
    }
    return scenes;
}

std::vector<Tensor> read_dataset_images(const std::filesystem::path& manifest) {
    // Pixels only: the "boxes" field is never accessed on this path, which is
    // what keeps target ground truth structurally out of adaptation.
    const auto dir = manifest.parent_path();
    std::vector<Tensor> images;
    for (const auto& j : read_manifest_lines(manifest)) {
        try {
            images.push_back(read_feature_file(dir / j.at("image").get<std::string>()));
        } catch (const nlohmann::json::exception& e) {
            throw SchemaError("dataset " + manifest.string() + ": " + e.what());
        }
    }
    return images;
}

} // namespace psteer::det
