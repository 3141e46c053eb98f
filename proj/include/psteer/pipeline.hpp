#pragma once

#include "psteer/captions.hpp"
#include "psteer/detection.hpp"
#include "psteer/encoder.hpp"
#include "psteer/steering.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace psteer::pipeline {

inline constexpr const char* kToolVersion = "psteer 0.1.0";

struct Schedule {
    int epochs = 0;
    double lr = 0.0;
};

struct Counts {
    int source_train = 64; // student pre-training scenes
    int source_eval = 48;  // clear-domain evaluation scenes
    int target_adapt = 32; // unlabeled target images the student adapts on
    int target_eval = 48;  // labeled target evaluation scenes
};

// One source or target domain: photometric config plus the caption whose
// assembled prompt drives steering toward that domain.
struct DomainSpec {
    det::DomainConfig domain;
    captions::CaptionRecord caption;
};

// Full experiment configuration, loaded from a single JSON file. The
// canonical dump of that file is hashed into every artifact, so artifacts
// from different configurations can never be confused for one another.
struct RunConfig {
    std::uint64_t seed = 42;
    std::uint64_t weights_seed = 42;
    steer::SteeringConfig steering;
    double tau = 0.5;
    double conf_floor = 0.05; // detector floor at evaluation time
    Schedule teacher_source{30, 0.1};
    Schedule teacher_finetune{20, 0.1};
    Schedule student_source{30, 0.05};
    Schedule student_adapt{30, 0.05};
    Schedule student_oracle{30, 0.05};
    Counts counts;
    DomainSpec source;
    std::vector<DomainSpec> targets;

    std::string canonical_json; // sorted-key dump used for the config hash
};

RunConfig read_run_config(const std::filesystem::path& path);

// Recompute canonical_json from the struct's current field values. Call after
// mutating a loaded config (flag overrides) so the config hash stays honest.
void refresh_canonical(RunConfig& cfg);

// Deterministic regeneration of the inputs a stage command needs, identical
// to what run_e2e uses internally. Staged invocations therefore produce the
// same artifacts, byte for byte, as the single-process run.
std::vector<det::Scene> gen_cache_scenes(const RunConfig& cfg);
std::vector<det::Scene> gen_source_train_scenes(const RunConfig& cfg);
det::StudentModel init_student(const RunConfig& cfg);
det::TeacherHead init_teacher(const RunConfig& cfg);
SeededRng finetune_rng(const RunConfig& cfg, std::size_t target_index);

// {"config_hash": "<16 hex digits>", "seed": n, "tool_version": "..."} —
// embedded into every artifact this run writes.
std::string meta_json(const RunConfig& cfg);

// Sidecar for JSONL artifacts, which have no natural place for a meta object:
// writes "<artifact>.meta.json" next to the file.
void write_meta_sidecar(const std::filesystem::path& artifact,
                        const std::string& meta);

// Dataset layout under <out>/data, all generated from cfg.seed:
//   source_train.jsonl, source_eval.jsonl, cache.jsonl,
//   <target>_adapt.jsonl, <target>_eval.jsonl
struct DatasetPaths {
    std::filesystem::path source_train;
    std::filesystem::path source_eval;
    std::filesystem::path cache;
    std::vector<std::filesystem::path> target_adapt; // parallel to cfg.targets
    std::vector<std::filesystem::path> target_eval;
};

DatasetPaths dataset_paths(const RunConfig& cfg, const std::filesystem::path& out);
DatasetPaths generate_datasets(const RunConfig& cfg, const std::filesystem::path& out);

// Caption stage: parse, normalize, filter; failures of parse/schema become
// rejections with reason "parse:..."/"schema:...". Returns kept records.
struct CaptionStageResult {
    std::vector<captions::CaptionRecord> kept;
    std::vector<captions::Rejection> rejected;
};

CaptionStageResult run_caption_stage(const std::filesystem::path& raw_path,
                                     const std::filesystem::path& synonyms_path,
                                     const std::filesystem::path& policy_path);

// Per-domain outcome of the end-to-end experiment, all values mAP@50.
struct DomainOutcome {
    std::string name;
    double no_adapt = 0.0; // source-trained student, frozen
    double adapted = 0.0;  // after prompt-steered teacher + pseudo-labels
    double oracle = 0.0;   // student trained on labeled target data (bound)
};

struct E2eSummary {
    double clear_map50 = 0.0;
    std::vector<DomainOutcome> domains;
};

// The whole experiment. Writes datasets, stylesets, heads, student files,
// eval reports, summary.txt and summary.json under out. Audit phases (when
// the audit facility is enabled): "setup", then "adapt:<domain>" around
// everything the zero-shot claim covers, then "eval:<domain>" and
// "oracle:<domain>".
E2eSummary run_e2e(const RunConfig& cfg, const std::filesystem::path& out);

std::string format_summary_table(const E2eSummary& s);
void write_summary_json(const std::filesystem::path& path, const E2eSummary& s,
                        const std::string& meta);

} // namespace psteer::pipeline
