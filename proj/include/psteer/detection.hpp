#pragma once

#include "psteer/encoder.hpp"
#include "psteer/rng.hpp"
#include "psteer/steering.hpp"
#include "psteer/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace psteer::det {

using psteer::SeededRng;
using psteer::Tensor;

// Scene geometry. Images are [3,64,64]; the stride-2 stem maps them onto a
// 32x32 grid of 2px cells, and the per-cell head emits one candidate box per
// cell, so every constant below is pinned by the architecture.
inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kGridSize = 32;
inline constexpr double kCellPx = 2.0;
inline constexpr int kNumClasses = 3;
inline constexpr std::size_t kHeadIn = 8;                  // stem channels
inline constexpr std::size_t kHeadHidden = 16;             // head hidden units
inline constexpr std::size_t kHeadOut = 1 + kNumClasses + 4; // obj + cls + ltrb

// Axis-aligned box in pixel coordinates, x1 < x2 and y1 < y2.
struct Box {
    double x1 = 0.0, y1 = 0.0, x2 = 0.0, y2 = 0.0;

    double area() const { return (x2 - x1) * (y2 - y1); }
    bool operator==(const Box&) const = default;
};

// Intersection over union: symmetric, in [0,1], 1 iff identical, 0 iff
// disjoint.
double iou(const Box& a, const Box& b);

struct GroundTruthBox {
    Box box;
    int class_id = 0;
};

struct Scene {
    Tensor image; // [3,64,64], values in [0,1]
    std::vector<GroundTruthBox> truth;
};

// Throws if a scene violates the dataset contract: 1-3 boxes, each with
// area >= 16 contained in the image, class in range, pairwise IoU < 0.3,
// pixels in [0,1].
void validate_scene(const Scene& scene);

// Photometric domain: px <- clamp01(blend(gain (.) px + bias, gray)) + noise,
// re-clamped. Box geometry is never touched, only pixel values.
struct DomainConfig {
    std::string name;
    std::array<double, 3> channel_gain = {1.0, 1.0, 1.0};
    std::array<double, 3> channel_bias = {0.0, 0.0, 0.0};
    double gray_blend = 0.0; // 0 = untouched, 1 = fully desaturated
    double noise_std = 0.0;
};

void validate_domain(const DomainConfig& d);
DomainConfig read_domain_file(const std::filesystem::path& path);

// The photometric shift alone, exposed so tests can compare against a
// straight-line reimplementation of the formula.
Tensor apply_domain_shift(const Tensor& image, const DomainConfig& d, SeededRng& rng);

// Uniform gray background plus 1-3 solid rectangles with class-determined
// color and size, then the domain's photometric shift. Rejection-samples
// box placements; throws PlacementError after 1000 failed attempts.
Scene gen_scene(const DomainConfig& domain, SeededRng& rng);

struct Detection {
    Box box;
    int class_id = 0;
    double confidence = 0.0; // sigmoid(objectness) * max softmax class prob
};

using Detections = std::vector<Detection>;

// Per-cell two-layer predictor over an 8-channel grid: hidden = leaky_relu(
// w1 x + b1) with a small fixed leak, z = w2 hidden + b2, all row-major.
// Output slots: 0 objectness logit,
// 1..3 class logits, 4..7 (l,t,r,b) offsets in cell units from the cell
// center. The hidden layer matters: objectness must fire on pure-color
// object centers while staying silent on the mixture cells immediately next
// to them, and those mixtures sit between the center features and the
// background feature, so no single linear threshold can carve them off.
struct CellHead {
    std::vector<double> w1; // kHeadHidden * kHeadIn
    std::vector<double> b1; // kHeadHidden
    std::vector<double> w2; // kHeadOut * kHeadHidden
    std::vector<double> b2; // kHeadOut

    static CellHead init(std::uint64_t seed);
    bool operator==(const CellHead&) const = default;
};

using TeacherHead = CellHead;

// Trainable detector: independent stem (3->8, stride 2, ReLU) plus the same
// per-cell head. Unlike the frozen encoder, every parameter updates.
struct StudentModel {
    std::vector<double> stem_w; // [8,3,3,3]
    std::vector<double> stem_b; // [8]
    CellHead head;

    static StudentModel init(std::uint64_t seed);
    Tensor features(const Tensor& image) const; // stem conv + ReLU
    bool operator==(const StudentModel&) const = default;
};

// Decode + class-wise greedy NMS (suppress IoU > 0.5) + confidence floor.
// Result is sorted by descending confidence with deterministic tie-breaks.
Detections detect_from_grid(const Tensor& grid, const CellHead& head, double conf_floor);

// Per-channel standardization of a feature grid: (x - mu) / max(sigma,
// floor). The teacher head lives entirely in this canonical space:
// training, fine-tuning and detection all standardize first, so a
// target-domain shift that moves per-channel feature statistics cancels
// instead of landing on the head. The max-floor divisor keeps near-constant
// channels damped instead of amplified.
Tensor standardize_grid(const Tensor& grid);

// Teacher path: frozen encoder layer-1 features, standardized, then the
// head.
Detections teacher_detect(const Tensor& image, const CellHead& head,
                          const enc::EncoderWeights& w, double conf_floor);

// Student path: its own stem, then its head.
Detections student_detect(const Tensor& image, const StudentModel& m, double conf_floor);

// Confidence-threshold subset, order preserved. Requires 0 <= tau <= 1.
Detections pseudo_label(const Detections& d, double tau);

// Detection loss for one grid against truth boxes: binary cross-entropy on
// objectness (positives at truth center cells, mean over positives plus a
// weighted mean over negatives), cross-entropy on class and L1 on offsets at
// positive cells. Components are summed unweighted. The negative-side weight
// compensates for the ~1000:1 cell imbalance: with a plain mean each
// background cell would receive ~0.1% of a positive cell's gradient and
// objectness at hard negatives (object-adjacent mixture cells, zero-padded
// border cells) would decay too slowly to rank below true centers within a
// practical epoch budget.
struct DetLoss {
    double total = 0.0;
    double obj = 0.0;
    double cls = 0.0;
    double box = 0.0;
};

struct HeadGrad {
    std::vector<double> w1; // same layouts as the CellHead fields
    std::vector<double> b1;
    std::vector<double> w2;
    std::vector<double> b2;
    DetLoss loss;
};

// Loss and analytic head gradient; grad_grid (optional, same shape as the
// grid) receives the gradient with respect to the grid activations, which the
// student backpropagates through its stem.
HeadGrad head_loss_grad(const Tensor& grid, const std::vector<GroundTruthBox>& truth,
                        const CellHead& head, Tensor* grad_grid = nullptr);

// Fixed five-scene labeled source set with precomputed layer-1 features.
// Construction rejects any other size; contents are immutable.
class SourceCache {
public:
    static constexpr std::size_t kSize = 5;

    SourceCache(std::vector<Scene> scenes, const enc::EncoderWeights& w);

    const std::vector<Scene>& scenes() const { return scenes_; }
    const std::vector<Tensor>& features() const { return features_; }

private:
    std::vector<Scene> scenes_;
    std::vector<Tensor> features_;
};

// Head-only fine-tuning on steered cached features: per (epoch, scene), one
// SGD step against the scene's truth with the grid re-statisticized by a
// style sampled uniformly from the set, then standardized like every other
// head input. Backbone weights are never touched. epochs = 0 returns the
// head bit-identical; negative epochs are rejected.
struct FinetuneResult {
    TeacherHead head;
    std::vector<double> epoch_loss; // mean total loss per epoch
};

FinetuneResult finetune_teacher(const SourceCache& cache, const steer::StyleSet& styles,
                                const TeacherHead& head, int epochs, double lr,
                                SeededRng& rng);

// Source pre-training of the head: same loop over the raw (unsteered) cached
// features in cache order. This is where the teacher earns its source-domain
// competence before any adaptation happens.
FinetuneResult train_teacher_head(const SourceCache& cache, const TeacherHead& head,
                                  int epochs, double lr);

// Student self-training on teacher pseudo-labels. Target images arrive as
// bare tensors: no truth type exists in this call graph, so ground truth is
// structurally unreachable. Pseudo-labels are computed once up front with the
// fixed teacher, then the student takes one SGD step per (epoch, image).
struct AdaptResult {
    StudentModel student;
    std::vector<double> epoch_loss;
};

AdaptResult adapt_student(const StudentModel& student,
                          const std::vector<Tensor>& target_images,
                          const TeacherHead& teacher_head, const enc::EncoderWeights& w,
                          double tau, int epochs, double lr);

// Supervised student training (source pre-training and the in-domain oracle
// bound): same loss, truth labels, one SGD step per (epoch, scene).
AdaptResult train_student(const StudentModel& student, const std::vector<Scene>& scenes,
                          int epochs, double lr);

// mAP@50 per the all-point interpolated convention: detections sorted by
// descending confidence, greedy-matched to unmatched same-class truth at
// IoU >= iou_thresh, precision envelope, area under the PR curve. mAP
// averages classes with at least one truth instance.
struct EvalReport {
    std::map<int, double> per_class_ap; // only classes with >= 1 truth
    double map50 = 0.0;
};

EvalReport evaluate_map(const std::vector<Detections>& preds,
                        const std::vector<std::vector<GroundTruthBox>>& truths,
                        double iou_thresh = 0.5);

void write_eval_report(const std::filesystem::path& path, const EvalReport& report,
                       const std::string& meta_json = "");

// Parameter files for trained predictors, JSON with 17-significant-digit
// reals so a read-back is value-exact.
void write_head_file(const std::filesystem::path& path, const CellHead& head,
                     const std::string& meta_json = "");
CellHead read_head_file(const std::filesystem::path& path);
void write_student_file(const std::filesystem::path& path, const StudentModel& m,
                        const std::string& meta_json = "");
StudentModel read_student_file(const std::filesystem::path& path);

// Per-image detection lists as JSONL, one line per image:
//   {"detections": [{"box": [x1,y1,x2,y2], "class": k, "confidence": c}, ...]}
void write_detections_file(const std::filesystem::path& path,
                           const std::vector<Detections>& per_image);
std::vector<Detections> read_detections_file(const std::filesystem::path& path);

// Dataset files: a JSONL manifest, one scene per line
//   {"image": "<relative path to a feature-container file>", "boxes": [...]}
// with images stored next to the manifest. read_dataset parses truth (and
// records a truth-parse audit event); read_dataset_images loads pixels only
// and never touches the "boxes" field.
void write_dataset(const std::filesystem::path& manifest,
                   const std::vector<Scene>& scenes);
std::vector<Scene> read_dataset(const std::filesystem::path& manifest);
std::vector<Tensor> read_dataset_images(const std::filesystem::path& manifest);

} // namespace psteer::det
