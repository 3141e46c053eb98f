#include "psteer/pipeline.hpp"

#include "psteer/audit.hpp"
#include "psteer/errors.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace psteer::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Independent deterministic stream per (family, index) pair. Family constants
// live in the high bits so distinct families never collide for any sane
// index; all randomness in a run descends from cfg.seed through here.
enum StreamFamily : std::uint64_t {
    kStreamSourceTrain = 1,
    kStreamSourceEval = 2,
    kStreamCache = 3,
    kStreamTargetAdapt = 4,
    kStreamTargetEval = 5,
    kStreamFinetune = 6,
    kStreamTeacherInit = 7,
    kStreamStudentInit = 8,
};

SeededRng stream(std::uint64_t seed, std::uint64_t family, std::uint64_t index) {
    return SeededRng(seed ^ (family << 40) ^ index);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t family,
                          std::uint64_t index) {
    return seed ^ (family << 40) ^ index;
}

void format_real(std::string& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

det::DomainConfig domain_from_json(const json& j) {
    det::DomainConfig d;
    d.name = j.at("name").get<std::string>();
    const auto gain = j.at("channel_gain").get<std::vector<double>>();
    const auto bias = j.at("channel_bias").get<std::vector<double>>();
    if (gain.size() != 3 || bias.size() != 3) {
        throw SchemaError("run config: channel_gain/channel_bias must have 3 entries");
    }
    std::copy(gain.begin(), gain.end(), d.channel_gain.begin());
    std::copy(bias.begin(), bias.end(), d.channel_bias.begin());
    d.gray_blend = j.at("gray_blend").get<double>();
    d.noise_std = j.at("noise_std").get<double>();
    det::validate_domain(d);
    return d;
}

json domain_to_json(const det::DomainConfig& d) {
    return {{"name", d.name},
            {"channel_gain", {d.channel_gain[0], d.channel_gain[1], d.channel_gain[2]}},
            {"channel_bias", {d.channel_bias[0], d.channel_bias[1], d.channel_bias[2]}},
            {"gray_blend", d.gray_blend},
            {"noise_std", d.noise_std}};
}

captions::CaptionRecord caption_from_json(const json& j, const std::string& id) {
    captions::CaptionRecord r;
    r.where = j.at("where").get<std::string>();
    r.when = j.at("when").get<std::string>();
    r.weather = j.at("weather").get<std::string>();
    r.source_id = id;
    if (r.where.empty() || r.when.empty() || r.weather.empty()) {
        throw SchemaError("run config: caption fields must be non-empty");
    }
    return r;
}

json caption_to_json(const captions::CaptionRecord& r) {
    return {{"where", r.where}, {"when", r.when}, {"weather", r.weather}};
}

Schedule schedule_from_json(const json& j) {
    Schedule s;
    s.epochs = j.at("epochs").get<int>();
    s.lr = j.at("lr").get<double>();
    if (s.epochs < 0 || s.lr < 0.0) {
        throw SchemaError("run config: schedule epochs/lr must be non-negative");
    }
    return s;
}

json schedule_to_json(const Schedule& s) {
    return {{"epochs", s.epochs}, {"lr", s.lr}};
}

// Effective-configuration dump: every field, defaults included, keys sorted
// by nlohmann's object ordering. The config hash is taken over this dump, so
// it reflects what actually ran, not merely what the file said.
json config_to_json(const RunConfig& c) {
    json targets = json::array();
    for (const auto& t : c.targets) {
        targets.push_back(
            {{"domain", domain_to_json(t.domain)}, {"caption", caption_to_json(t.caption)}});
    }
    return {
        {"seed", c.seed},
        {"weights_seed", c.weights_seed},
        {"steering",
         {{"steps", c.steering.steps},
          {"lr", c.steering.lr},
          {"momentum", c.steering.momentum},
          {"sigma_min", c.steering.sigma_min},
          {"eps", c.steering.eps}}},
        {"tau", c.tau},
        {"conf_floor", c.conf_floor},
        {"schedules",
         {{"teacher_source", schedule_to_json(c.teacher_source)},
          {"teacher_finetune", schedule_to_json(c.teacher_finetune)},
          {"student_source", schedule_to_json(c.student_source)},
          {"student_adapt", schedule_to_json(c.student_adapt)},
          {"student_oracle", schedule_to_json(c.student_oracle)}}},
        {"counts",
         {{"source_train", c.counts.source_train},
          {"source_eval", c.counts.source_eval},
          {"target_adapt", c.counts.target_adapt},
          {"target_eval", c.counts.target_eval}}},
        {"source",
         {{"domain", domain_to_json(c.source.domain)},
          {"caption", caption_to_json(c.source.caption)}}},
        {"targets", targets},
    };
}

std::vector<det::Scene> gen_scene_set(const RunConfig& cfg,
                                      const det::DomainConfig& domain,
                                      std::uint64_t family, std::uint64_t base_index,
                                      int count) {
    std::vector<det::Scene> scenes;
    scenes.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        auto rng =
            stream(cfg.seed, family, base_index + static_cast<std::uint64_t>(i));
        scenes.push_back(det::gen_scene(domain, rng));
    }
    return scenes;
}

det::EvalReport eval_student(const det::StudentModel& student,
                             const std::vector<det::Scene>& scenes, double conf_floor) {
    std::vector<det::Detections> preds;
    std::vector<std::vector<det::GroundTruthBox>> truths;
    preds.reserve(scenes.size());
    truths.reserve(scenes.size());
    for (const auto& s : scenes) {
        preds.push_back(det::student_detect(s.image, student, conf_floor));
        truths.push_back(s.truth);
    }
    return det::evaluate_map(preds, truths);
}

} // namespace

RunConfig read_run_config(const fs::path& path) {
    audit::record_file_open(path.string());
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open: " + path.string());
    }
    json j;
    try {
        j = json::parse(f);
    } catch (const json::exception& e) {
        throw ParseError("run config: " + std::string(e.what()));
    }

    RunConfig cfg;
    try {
        cfg.seed = j.at("seed").get<std::uint64_t>();
        cfg.weights_seed = j.value("weights_seed", cfg.seed);
        if (j.contains("steering")) {
            const auto& s = j.at("steering");
            cfg.steering.steps = s.value("steps", cfg.steering.steps);
            cfg.steering.lr = s.value("lr", cfg.steering.lr);
            cfg.steering.momentum = s.value("momentum", cfg.steering.momentum);
            cfg.steering.sigma_min = s.value("sigma_min", cfg.steering.sigma_min);
            cfg.steering.eps = s.value("eps", cfg.steering.eps);
        }
        cfg.tau = j.value("tau", cfg.tau);
        cfg.conf_floor = j.value("conf_floor", cfg.conf_floor);
        if (j.contains("schedules")) {
            const auto& s = j.at("schedules");
            if (s.contains("teacher_source")) {
                cfg.teacher_source = schedule_from_json(s.at("teacher_source"));
            }
            if (s.contains("teacher_finetune")) {
                cfg.teacher_finetune = schedule_from_json(s.at("teacher_finetune"));
            }
            if (s.contains("student_source")) {
                cfg.student_source = schedule_from_json(s.at("student_source"));
            }
            if (s.contains("student_adapt")) {
                cfg.student_adapt = schedule_from_json(s.at("student_adapt"));
            }
            if (s.contains("student_oracle")) {
                cfg.student_oracle = schedule_from_json(s.at("student_oracle"));
            }
        }
        if (j.contains("counts")) {
            const auto& c = j.at("counts");
            cfg.counts.source_train = c.value("source_train", cfg.counts.source_train);
            cfg.counts.source_eval = c.value("source_eval", cfg.counts.source_eval);
            cfg.counts.target_adapt = c.value("target_adapt", cfg.counts.target_adapt);
            cfg.counts.target_eval = c.value("target_eval", cfg.counts.target_eval);
        }
        cfg.source.domain = domain_from_json(j.at("source").at("domain"));
        cfg.source.caption =
            caption_from_json(j.at("source").at("caption"), "config:source");
        for (const auto& t : j.at("targets")) {
            DomainSpec spec;
            spec.domain = domain_from_json(t.at("domain"));
            spec.caption =
                caption_from_json(t.at("caption"), "config:" + spec.domain.name);
            cfg.targets.push_back(std::move(spec));
        }
    } catch (const json::exception& e) {
        throw SchemaError("run config: " + std::string(e.what()));
    }

    if (cfg.targets.empty()) {
        throw SchemaError("run config: at least one target domain is required");
    }
    if (cfg.tau < 0.0 || cfg.tau > 1.0) {
        throw SchemaError("run config: tau must lie in [0,1]");
    }
    if (cfg.counts.source_train < 1 || cfg.counts.source_eval < 1 ||
        cfg.counts.target_adapt < 1 || cfg.counts.target_eval < 1) {
        throw SchemaError("run config: all counts must be positive");
    }
    refresh_canonical(cfg);
    return cfg;
}

void refresh_canonical(RunConfig& cfg) {
    cfg.canonical_json = config_to_json(cfg).dump();
}

std::vector<det::Scene> gen_cache_scenes(const RunConfig& cfg) {
    return gen_scene_set(cfg, cfg.source.domain, kStreamCache, 0,
                         static_cast<int>(det::SourceCache::kSize));
}

std::vector<det::Scene> gen_source_train_scenes(const RunConfig& cfg) {
    return gen_scene_set(cfg, cfg.source.domain, kStreamSourceTrain, 0,
                         cfg.counts.source_train);
}

det::StudentModel init_student(const RunConfig& cfg) {
    return det::StudentModel::init(stream_seed(cfg.seed, kStreamStudentInit, 0));
}

det::TeacherHead init_teacher(const RunConfig& cfg) {
    return det::CellHead::init(stream_seed(cfg.seed, kStreamTeacherInit, 0));
}

SeededRng finetune_rng(const RunConfig& cfg, std::size_t target_index) {
    return stream(cfg.seed, kStreamFinetune, target_index);
}

std::string meta_json(const RunConfig& cfg) {
    char hash[17];
    std::snprintf(hash, sizeof(hash), "%016llx",
                  static_cast<unsigned long long>(enc::fnv1a64(cfg.canonical_json)));
    json m = {{"config_hash", hash}, {"seed", cfg.seed}, {"tool_version", kToolVersion}};
    return m.dump();
}

void write_meta_sidecar(const fs::path& artifact, const std::string& meta) {
    fs::path side = artifact;
    side += ".meta.json";
    std::ofstream f(side, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for write: " + side.string());
    }
    f << meta << "\n";
    if (!f) {
        throw IoError("write failed: " + side.string());
    }
}

DatasetPaths dataset_paths(const RunConfig& cfg, const fs::path& out) {
    const fs::path data = out / "data";
    DatasetPaths p;
    p.source_train = data / "source_train.jsonl";
    p.source_eval = data / "source_eval.jsonl";
    p.cache = data / "cache.jsonl";
    for (const auto& t : cfg.targets) {
        p.target_adapt.push_back(data / (t.domain.name + "_adapt.jsonl"));
        p.target_eval.push_back(data / (t.domain.name + "_eval.jsonl"));
    }
    return p;
}

DatasetPaths generate_datasets(const RunConfig& cfg, const fs::path& out) {
    const auto paths = dataset_paths(cfg, out);
    fs::create_directories(out / "data");
    const std::string meta = meta_json(cfg);

    const auto gen_set = [&](const det::DomainConfig& domain, std::uint64_t family,
                             std::uint64_t base_index, int count,
                             const fs::path& manifest) {
        det::write_dataset(manifest,
                           gen_scene_set(cfg, domain, family, base_index, count));
        write_meta_sidecar(manifest, meta);
    };

    gen_set(cfg.source.domain, kStreamSourceTrain, 0, cfg.counts.source_train,
            paths.source_train);
    gen_set(cfg.source.domain, kStreamSourceEval, 0, cfg.counts.source_eval,
            paths.source_eval);
    gen_set(cfg.source.domain, kStreamCache, 0,
            static_cast<int>(det::SourceCache::kSize), paths.cache);
    for (std::size_t d = 0; d < cfg.targets.size(); ++d) {
        const std::uint64_t base = d << 20;
        gen_set(cfg.targets[d].domain, kStreamTargetAdapt, base,
                cfg.counts.target_adapt, paths.target_adapt[d]);
        gen_set(cfg.targets[d].domain, kStreamTargetEval, base, cfg.counts.target_eval,
                paths.target_eval[d]);
    }
    return paths;
}

CaptionStageResult run_caption_stage(const fs::path& raw_path,
                                     const fs::path& synonyms_path,
                                     const fs::path& policy_path) {
    const auto table = captions::read_synonyms_file(synonyms_path);
    const auto policy = captions::read_policy_file(policy_path);
    const auto raws = captions::read_raw_captions(raw_path);

    CaptionStageResult res;
    std::vector<captions::CaptionRecord> parsed;
    for (const auto& raw : raws) {
        try {
            parsed.push_back(
                captions::normalize(captions::parse_caption(raw.raw, raw.source_id),
                                    table));
        } catch (const ParseError& e) {
            captions::CaptionRecord stub;
            stub.source_id = raw.source_id;
            res.rejected.push_back({stub, std::string("parse:") + e.what()});
        } catch (const SchemaError& e) {
            captions::CaptionRecord stub;
            stub.source_id = raw.source_id;
            res.rejected.push_back({stub, std::string("schema:") + e.what()});
        }
    }
    auto filtered = captions::filter(parsed, policy);
    res.kept = std::move(filtered.kept);
    for (auto& r : filtered.rejected) {
        res.rejected.push_back(std::move(r));
    }
    return res;
}

E2eSummary run_e2e(const RunConfig& cfg, const fs::path& out) {
    fs::create_directories(out);
    const std::string meta = meta_json(cfg);
    const enc::EncoderWeights w(cfg.weights_seed);

    audit::set_phase("setup");
    const auto paths = generate_datasets(cfg, out);
    const auto source_train = det::read_dataset(paths.source_train);
    const auto source_eval = det::read_dataset(paths.source_eval);
    const det::SourceCache cache(det::read_dataset(paths.cache), w);

    // Deployable student, pre-trained on labeled source scenes.
    const auto base =
        det::train_student(init_student(cfg), source_train,
                           cfg.student_source.epochs, cfg.student_source.lr);
    det::write_student_file(out / "student_source.json", base.student, meta);

    // Teacher head, trained on the five cached source scenes.
    const auto teacher_base =
        det::train_teacher_head(cache, init_teacher(cfg),
                                cfg.teacher_source.epochs, cfg.teacher_source.lr);
    det::write_head_file(out / "teacher_source.json", teacher_base.head, meta);

    E2eSummary summary;
    {
        const auto report = eval_student(base.student, source_eval, cfg.conf_floor);
        det::write_eval_report(out / "eval_clear_noadapt.json", report, meta);
        summary.clear_map50 = report.map50;
    }

    for (std::size_t d = 0; d < cfg.targets.size(); ++d) {
        const auto& spec = cfg.targets[d];
        const std::string& name = spec.domain.name;

        // Everything the zero-shot claim covers happens in this phase: no
        // target truth, no source imagery beyond the in-memory 5-scene cache.
        audit::set_phase("adapt:" + name);
        const auto trg = enc::encode_text(captions::assemble_prompt(spec.caption), w);
        const auto styles = steer::steer(cache.features(), trg, cfg.steering, w);
        steer::write_styleset_file(out / (name + "_styles.json"), styles, meta);

        auto ft_rng = finetune_rng(cfg, d);
        const auto ft =
            det::finetune_teacher(cache, styles, teacher_base.head,
                                  cfg.teacher_finetune.epochs,
                                  cfg.teacher_finetune.lr, ft_rng);
        det::write_head_file(out / (name + "_teacher.json"), ft.head, meta);

        const auto images = det::read_dataset_images(paths.target_adapt[d]);
        const auto adapted =
            det::adapt_student(base.student, images, ft.head, w, cfg.tau,
                               cfg.student_adapt.epochs, cfg.student_adapt.lr);
        det::write_student_file(out / (name + "_student_adapted.json"),
                                adapted.student, meta);

        audit::set_phase("eval:" + name);
        const auto eval_scenes = det::read_dataset(paths.target_eval[d]);
        DomainOutcome oc;
        oc.name = name;
        {
            const auto rep = eval_student(base.student, eval_scenes, cfg.conf_floor);
            det::write_eval_report(out / ("eval_" + name + "_noadapt.json"), rep, meta);
            oc.no_adapt = rep.map50;
        }
        {
            const auto rep = eval_student(adapted.student, eval_scenes, cfg.conf_floor);
            det::write_eval_report(out / ("eval_" + name + "_adapted.json"), rep, meta);
            oc.adapted = rep.map50;
        }

        // Diagnostic upper bound: same schedule, true target labels. Lives
        // outside the adapt phase because it deliberately breaks the
        // zero-shot rules.
        audit::set_phase("oracle:" + name);
        const auto oracle_scenes = det::read_dataset(paths.target_adapt[d]);
        const auto oracle =
            det::train_student(base.student, oracle_scenes,
                               cfg.student_oracle.epochs, cfg.student_oracle.lr);
        {
            const auto rep = eval_student(oracle.student, eval_scenes, cfg.conf_floor);
            det::write_eval_report(out / ("eval_" + name + "_oracle.json"), rep, meta);
            oc.oracle = rep.map50;
        }
        summary.domains.push_back(oc);
    }

    audit::set_phase("report");
    const std::string table = format_summary_table(summary);
    std::ofstream txt(out / "summary.txt", std::ios::binary);
    if (!txt) {
        throw IoError("cannot open for write: " + (out / "summary.txt").string());
    }
    txt << table;
    write_summary_json(out / "summary.json", summary, meta);
    return summary;
}

std::string format_summary_table(const E2eSummary& s) {
    char line[128];
    std::string out;
    out += "domain        no-adapt    adapted     oracle\n";
    out += "------------  --------   --------   --------\n";
    std::snprintf(line, sizeof(line), "%-12s  %8.3f   %8s   %8s\n", "clear",
                  s.clear_map50, "-", "-");
    out += line;
    for (const auto& d : s.domains) {
        std::snprintf(line, sizeof(line), "%-12s  %8.3f   %8.3f   %8.3f\n",
                      d.name.c_str(), d.no_adapt, d.adapted, d.oracle);
        out += line;
    }
    return out;
}

void write_summary_json(const fs::path& path, const E2eSummary& s,
                        const std::string& meta) {
    std::string out = "{\n  \"clear_map50\": ";
    format_real(out, s.clear_map50);
    out += ",\n  \"domains\": [\n";
    for (std::size_t i = 0; i < s.domains.size(); ++i) {
        const auto& d = s.domains[i];
        out += "    {\"adapted\": ";
        format_real(out, d.adapted);
        out += ", \"name\": \"" + d.name + "\", \"no_adapt\": ";
        format_real(out, d.no_adapt);
        out += ", \"oracle\": ";
        format_real(out, d.oracle);
        out += "}";
        if (i + 1 < s.domains.size()) {
            out += ",";
        }
        out += "\n";
    }
    out += "  ]";
    if (!meta.empty()) {
        out += ",\n  \"meta\": " + meta;
    }
    out += "\n}\n";

    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open for write: " + path.string());
    }
    f << out;
    if (!f) {
        throw IoError("write failed: " + path.string());
    }
}

} // namespace psteer::pipeline
