// psteer — prompt-steered zero-shot domain adaptation for a toy detector.
//
// Stage commands compose through the artifact files in --out:
//   gen-data -> steer -> adapt-teacher -> [pseudo-label] -> adapt-student -> eval
// `e2e` runs the whole experiment in one process and writes the same
// artifacts, byte for byte. Exit codes: 0 success, 1 usage error, 2 data or
// schema error.
//
// Test mode: when PSTEER_AUDIT names a file, the run records file opens and
// ground-truth parses (tagged with pipeline phase) and dumps them there as
// JSON on exit, so tests can assert what an adaptation actually consumed.

#include "psteer/audit.hpp"
#include "psteer/captions.hpp"
#include "psteer/detection.hpp"
#include "psteer/encoder.hpp"
#include "psteer/errors.hpp"
#include "psteer/pipeline.hpp"
#include "psteer/steering.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace psteer;

namespace {

struct Args {
    std::string config;
    std::string out = "out";
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<double> lr;
    std::optional<double> momentum;
    std::optional<int> epochs;
    std::optional<double> tau;

    // captions inputs
    std::string raw;
    std::string synonyms;
    std::string policy;

    // eval inputs
    std::string student_path;
    std::string detections_path;
    std::string data_path;
    std::string report_path;
};

pipeline::RunConfig load_config(const Args& a) {
    if (a.config.empty()) {
        throw ConfigError("--config is required for this command");
    }
    auto cfg = pipeline::read_run_config(a.config);
    bool dirty = false;
    if (a.seed) {
        cfg.seed = *a.seed;
        dirty = true;
    }
    if (a.steps) {
        cfg.steering.steps = *a.steps;
        dirty = true;
    }
    if (a.momentum) {
        cfg.steering.momentum = *a.momentum;
        dirty = true;
    }
    if (a.tau) {
        cfg.tau = *a.tau;
        dirty = true;
    }
    if (dirty || a.lr || a.epochs) {
        pipeline::refresh_canonical(cfg);
    }
    return cfg;
}

// --lr/--epochs bind to the schedule the command actually runs; --lr doubles
// as the steering rate for `steer`. Refreshes the canonical dump afterwards.
void override_schedule(pipeline::RunConfig& cfg, pipeline::Schedule& sched,
                       const Args& a) {
    if (a.epochs) {
        if (*a.epochs < 0) {
            throw ConfigError("--epochs must be non-negative");
        }
        sched.epochs = *a.epochs;
    }
    if (a.lr) {
        sched.lr = *a.lr;
    }
    pipeline::refresh_canonical(cfg);
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) {
        return 0.0;
    }
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

int cmd_gen_data(const Args& a) {
    const auto cfg = load_config(a);
    const auto paths = pipeline::generate_datasets(cfg, a.out);
    std::printf("wrote %s (%d scenes)\n", paths.source_train.string().c_str(),
                cfg.counts.source_train);
    std::printf("wrote %s (%d scenes)\n", paths.source_eval.string().c_str(),
                cfg.counts.source_eval);
    std::printf("wrote %s (%zu scenes)\n", paths.cache.string().c_str(),
                det::SourceCache::kSize);
    for (std::size_t d = 0; d < cfg.targets.size(); ++d) {
        std::printf("wrote %s (%d scenes)\n",
                    paths.target_adapt[d].string().c_str(), cfg.counts.target_adapt);
        std::printf("wrote %s (%d scenes)\n", paths.target_eval[d].string().c_str(),
                    cfg.counts.target_eval);
    }
    return 0;
}

int cmd_captions(const Args& a) {
    const auto cfg = load_config(a);
    const auto meta = pipeline::meta_json(cfg);
    const auto res = pipeline::run_caption_stage(a.raw, a.synonyms, a.policy);

    fs::create_directories(a.out);
    const fs::path records = fs::path(a.out) / "captions_records.jsonl";
    const fs::path rejections = fs::path(a.out) / "captions_rejections.jsonl";
    const fs::path prompts = fs::path(a.out) / "prompts.txt";
    captions::write_records_file(records, res.kept);
    pipeline::write_meta_sidecar(records, meta);
    captions::write_rejections_file(rejections, res.rejected);
    pipeline::write_meta_sidecar(rejections, meta);

    std::ofstream pf(prompts, std::ios::binary);
    if (!pf) {
        throw IoError("cannot open for write: " + prompts.string());
    }
    for (const auto& rec : res.kept) {
        pf << captions::assemble_prompt(rec).text() << "\n";
    }
    pipeline::write_meta_sidecar(prompts, meta);

    std::printf("kept %zu, rejected %zu\n", res.kept.size(), res.rejected.size());
    return 0;
}

int cmd_steer(const Args& a) {
    const auto cfg = load_config(a);
    auto steering = cfg.steering;
    if (a.lr) {
        steering.lr = *a.lr;
    }
    auto effective = cfg;
    effective.steering = steering;
    pipeline::refresh_canonical(effective);
    const auto meta = pipeline::meta_json(effective);

    const enc::EncoderWeights w(cfg.weights_seed);
    const det::SourceCache cache(pipeline::gen_cache_scenes(cfg), w);
    fs::create_directories(a.out);
    for (const auto& t : effective.targets) {
        const auto trg =
            enc::encode_text(captions::assemble_prompt(t.caption), w);
        const auto styles = steer::steer(cache.features(), trg, steering, w);
        const fs::path out = fs::path(a.out) / (t.domain.name + "_styles.json");
        steer::write_styleset_file(out, styles, meta);
        std::vector<double> init, fin;
        for (const auto& e : styles.entries) {
            init.push_back(e.loss_init);
            fin.push_back(e.loss_final);
        }
        std::printf("%-12s loss %.6f -> %.6f  (%s)\n", t.domain.name.c_str(),
                    mean_of(init), mean_of(fin), out.string().c_str());
    }
    return 0;
}

int cmd_adapt_teacher(const Args& a) {
    auto cfg = load_config(a);
    override_schedule(cfg, cfg.teacher_finetune, a);
    const auto meta = pipeline::meta_json(cfg);

    const enc::EncoderWeights w(cfg.weights_seed);
    const det::SourceCache cache(pipeline::gen_cache_scenes(cfg), w);
    const auto base =
        det::train_teacher_head(cache, pipeline::init_teacher(cfg),
                                cfg.teacher_source.epochs, cfg.teacher_source.lr);
    fs::create_directories(a.out);
    det::write_head_file(fs::path(a.out) / "teacher_source.json", base.head, meta);

    for (std::size_t d = 0; d < cfg.targets.size(); ++d) {
        const std::string& name = cfg.targets[d].domain.name;
        const auto styles =
            steer::read_styleset_file(fs::path(a.out) / (name + "_styles.json"));
        auto rng = pipeline::finetune_rng(cfg, d);
        const auto ft = det::finetune_teacher(cache, styles, base.head,
                                              cfg.teacher_finetune.epochs,
                                              cfg.teacher_finetune.lr, rng);
        const fs::path out = fs::path(a.out) / (name + "_teacher.json");
        det::write_head_file(out, ft.head, meta);
        const double last = ft.epoch_loss.empty() ? 0.0 : ft.epoch_loss.back();
        std::printf("%-12s final epoch loss %.6f  (%s)\n", name.c_str(), last,
                    out.string().c_str());
    }
    return 0;
}

int cmd_pseudo_label(const Args& a) {
    const auto cfg = load_config(a);
    const auto meta = pipeline::meta_json(cfg);
    const enc::EncoderWeights w(cfg.weights_seed);
    const auto paths = pipeline::dataset_paths(cfg, a.out);

    for (std::size_t d = 0; d < cfg.targets.size(); ++d) {
        const std::string& name = cfg.targets[d].domain.name;
        const auto head =
            det::read_head_file(fs::path(a.out) / (name + "_teacher.json"));
        audit::set_phase("adapt:" + name);
        const auto images = det::read_dataset_images(paths.target_adapt[d]);
        std::vector<det::Detections> per_image;
        std::size_t total = 0;
        per_image.reserve(images.size());
        for (const auto& img : images) {
            auto pl = det::pseudo_label(det::teacher_detect(img, head, w, 0.0),
                                        cfg.tau);
            total += pl.size();
            per_image.push_back(std::move(pl));
        }
        audit::set_phase("");
        const fs::path out = fs::path(a.out) / (name + "_pseudo.jsonl");
        det::write_detections_file(out, per_image);
        pipeline::write_meta_sidecar(out, meta);
        std::printf("%-12s %zu pseudo-labels over %zu images  (%s)\n", name.c_str(),
                    total, images.size(), out.string().c_str());
    }
    return 0;
}

int cmd_adapt_student(const Args& a) {
    auto cfg = load_config(a);
    override_schedule(cfg, cfg.student_adapt, a);
    const auto meta = pipeline::meta_json(cfg);
    const enc::EncoderWeights w(cfg.weights_seed);
    const auto paths = pipeline::dataset_paths(cfg, a.out);

    const auto base = det::train_student(pipeline::init_student(cfg),
                                         pipeline::gen_source_train_scenes(cfg),
                                         cfg.student_source.epochs,
                                         cfg.student_source.lr);
    fs::create_directories(a.out);
    det::write_student_file(fs::path(a.out) / "student_source.json", base.student,
                            meta);

    for (std::size_t d = 0; d < cfg.targets.size(); ++d) {
        const std::string& name = cfg.targets[d].domain.name;
        const auto head =
            det::read_head_file(fs::path(a.out) / (name + "_teacher.json"));
        audit::set_phase("adapt:" + name);
        const auto images = det::read_dataset_images(paths.target_adapt[d]);
        const auto res =
            det::adapt_student(base.student, images, head, w, cfg.tau,
                               cfg.student_adapt.epochs, cfg.student_adapt.lr);
        audit::set_phase("");
        const fs::path out = fs::path(a.out) / (name + "_student_adapted.json");
        det::write_student_file(out, res.student, meta);
        const double last = res.epoch_loss.empty() ? 0.0 : res.epoch_loss.back();
        std::printf("%-12s final epoch loss %.6f  (%s)\n", name.c_str(), last,
                    out.string().c_str());
    }
    return 0;
}

int cmd_eval(const Args& a) {
    const auto cfg = load_config(a);
    const auto meta = pipeline::meta_json(cfg);
    if (a.data_path.empty()) {
        throw ConfigError("eval requires --data <manifest>");
    }
    if (a.student_path.empty() == a.detections_path.empty()) {
        throw ConfigError("eval requires exactly one of --student or --detections");
    }

    const auto scenes = det::read_dataset(a.data_path);
    std::vector<det::Detections> preds;
    std::vector<std::vector<det::GroundTruthBox>> truths;
    truths.reserve(scenes.size());
    for (const auto& s : scenes) {
        truths.push_back(s.truth);
    }
    if (!a.student_path.empty()) {
        const auto student = det::read_student_file(a.student_path);
        preds.reserve(scenes.size());
        for (const auto& s : scenes) {
            preds.push_back(det::student_detect(s.image, student, cfg.conf_floor));
        }
    } else {
        preds = det::read_detections_file(a.detections_path);
    }

    const auto report = det::evaluate_map(preds, truths);
    fs::path report_path = a.report_path.empty()
                               ? fs::path(a.out) / "eval_report.json"
                               : fs::path(a.report_path);
    fs::create_directories(report_path.parent_path().empty()
                               ? fs::path(".")
                               : report_path.parent_path());
    det::write_eval_report(report_path, report, meta);
    std::printf("map50 = %.6f\n", report.map50);
    for (const auto& [cls, ap] : report.per_class_ap) {
        std::printf("  class %d AP = %.6f\n", cls, ap);
    }
    return 0;
}

int cmd_e2e(const Args& a) {
    const auto cfg = load_config(a);
    const auto summary = pipeline::run_e2e(cfg, a.out);
    std::fputs(pipeline::format_summary_table(summary).c_str(), stdout);
    return 0;
}

void dump_audit(const char* path) {
    nlohmann::json opens = nlohmann::json::array();
    for (const auto& e : audit::file_opens()) {
        opens.push_back({{"phase", e.phase}, {"path", e.path}});
    }
    nlohmann::json parses = nlohmann::json::array();
    for (const auto& e : audit::truth_parses()) {
        parses.push_back({{"phase", e.phase}, {"path", e.path}});
    }
    const nlohmann::json doc = {{"file_opens", opens}, {"truth_parses", parses}};
    std::ofstream f(path, std::ios::binary);
    f << doc.dump(2) << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"prompt-steered zero-shot domain adaptation (toy detector)"};
    app.require_subcommand(1);
    Args a;

    const auto add_common = [&](CLI::App* cmd, bool with_out = true) {
        cmd->add_option("--config", a.config, "run configuration JSON");
        if (with_out) {
            cmd->add_option("--out", a.out, "artifact directory (default: out)");
        }
        cmd->add_option("--seed", a.seed, "override the run seed");
        return cmd;
    };

    auto* gen = add_common(app.add_subcommand(
        "gen-data", "generate source/target datasets from the run config"));
    auto* cap = add_common(app.add_subcommand(
        "captions", "parse, normalize and filter raw captions into prompts"));
    cap->add_option("--raw", a.raw, "raw captions JSONL")->required();
    cap->add_option("--synonyms", a.synonyms, "synonym table JSON")->required();
    cap->add_option("--policy", a.policy, "filter policy JSON")->required();
    auto* st = add_common(app.add_subcommand(
        "steer", "optimize a style set per target domain (Algorithm 1)"));
    st->add_option("--steps", a.steps, "steering steps override");
    st->add_option("--lr", a.lr, "steering learning-rate override");
    st->add_option("--momentum", a.momentum, "steering momentum override");
    auto* at = add_common(app.add_subcommand(
        "adapt-teacher", "fine-tune the teacher head on steered cache features"));
    at->add_option("--epochs", a.epochs, "fine-tune epochs override");
    at->add_option("--lr", a.lr, "fine-tune learning-rate override");
    auto* pl = add_common(app.add_subcommand(
        "pseudo-label", "run the adapted teacher over target images"));
    pl->add_option("--tau", a.tau, "pseudo-label confidence threshold");
    auto* as = add_common(app.add_subcommand(
        "adapt-student", "adapt the student on teacher pseudo-labels"));
    as->add_option("--tau", a.tau, "pseudo-label confidence threshold");
    as->add_option("--epochs", a.epochs, "adaptation epochs override");
    as->add_option("--lr", a.lr, "adaptation learning-rate override");
    auto* ev = add_common(app.add_subcommand(
        "eval", "mAP@50 report for a student or a stored detection set"));
    ev->add_option("--student", a.student_path, "student model JSON");
    ev->add_option("--detections", a.detections_path, "detections JSONL");
    ev->add_option("--data", a.data_path, "labeled dataset manifest");
    ev->add_option("--report", a.report_path, "report path (default <out>/eval_report.json)");
    auto* ee = add_common(app.add_subcommand(
        "e2e", "full experiment: datasets, steering, teacher, student, report"));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    const char* audit_path = std::getenv("PSTEER_AUDIT");
    if (audit_path != nullptr && *audit_path != '\0') {
        audit::enable(true);
        audit::reset();
    }

    int rc = 0;
    try {
        if (gen->parsed()) {
            rc = cmd_gen_data(a);
        } else if (cap->parsed()) {
            rc = cmd_captions(a);
        } else if (st->parsed()) {
            rc = cmd_steer(a);
        } else if (at->parsed()) {
            rc = cmd_adapt_teacher(a);
        } else if (pl->parsed()) {
            rc = cmd_pseudo_label(a);
        } else if (as->parsed()) {
            rc = cmd_adapt_student(a);
        } else if (ev->parsed()) {
            rc = cmd_eval(a);
        } else if (ee->parsed()) {
            rc = cmd_e2e(a);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        rc = 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        rc = 2;
    }

    if (audit_path != nullptr && *audit_path != '\0') {
        dump_audit(audit_path);
    }
    return rc;
}
