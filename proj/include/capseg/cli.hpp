#pragma once

// Command implementations behind the `capseg` tool. Everything here runs
// in-process so the test suite can drive the commands directly.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "capseg/checkpoint.hpp"
#include "capseg/dataset_io.hpp"
#include "capseg/report.hpp"
#include "capseg/trainer.hpp"

#ifndef CAPSEG_CODE_VERSION
#define CAPSEG_CODE_VERSION "unknown"
#endif

namespace capseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

/// Bad flags, missing inputs or unwritable outputs; maps to exit code 2.
class UsageError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

inline const std::vector<std::string>& loss_names() {
    static const std::vector<std::string> names{"adaptive_focal", "focal", "ag_bce"};
    return names;
}

inline LossKind require_loss_kind(const std::string& name) {
    if (auto k = parse_loss_kind(name)) return *k;
    std::string valid;
    for (const auto& n : loss_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw UsageError("unknown loss '" + name + "'; valid names: " + valid);
}

inline std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline void ensure_writable_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw UsageError("cannot create output directory " + dir.string());
    const fs::path probe = dir / ".write_probe";
    {
        std::ofstream f(probe);
        if (!f) throw UsageError("output directory is not writable: " + dir.string());
    }
    fs::remove(probe, ec);
}

struct RunManifest {
    std::string command;
    KeyValues resolved_config;
    std::string dataset_fingerprint;
    std::string code_version = CAPSEG_CODE_VERSION;
    std::string started;
    std::string finished;

    json to_json() const {
        json cfg = json::object();
        for (const auto& [k, v] : resolved_config) cfg[k] = v;
        return {{"command", command},
                {"resolved_config", cfg},
                {"dataset_fingerprint", dataset_fingerprint},
                {"code_version", code_version},
                {"timestamps", {{"started", started}, {"finished", finished}}}};
    }
};

inline void write_manifest(const fs::path& path, const RunManifest& m) {
    auto out = open_out(path);
    out << m.to_json().dump(2) << '\n';
}

inline KeyValues resolved_config(const ModelConfig& m, const TrainConfig& t, const LossConfig& l) {
    KeyValues kv;
    flatten_json(to_json(m), "model", kv);
    flatten_json(to_json(t), "train", kv);
    flatten_json(to_json(l), "loss", kv);
    return kv;
}

inline std::vector<SegSample> load_split(const fs::path& root, Split split, Spacing spacing, std::ostream& err) {
    if (!fs::is_directory(root / to_string(split)))
        throw UsageError("dataset split not found: " + (root / to_string(split)).string());
    auto loaded = load_dataset(root, split, spacing);
    for (const auto& w : loaded.warnings) err << "warning: " << w << '\n';
    if (loaded.samples.empty()) throw UsageError("no samples in " + (root / to_string(split)).string());
    return std::move(loaded.samples);
}

// ---------------------------------------------------------------- synth

struct SynthJob {
    fs::path out;
    int count = 128;
    int size = 64;
    std::uint64_t seed = 0;
    SynthParams params{};
    int test_count = 40;
    int test_slices_per_case = 2;
};

struct DisagreementStats {
    double mean_fraction = 0.0;  ///< |expert XOR non-expert| / pixels
    double max_fraction = 0.0;
    double mean_dice = 0.0;      ///< expert vs non-expert
};

inline DisagreementStats disagreement_stats(const std::vector<SegSample>& samples) {
    DisagreementStats s;
    for (const auto& x : samples) {
        const double f = static_cast<double>(count_foreground(mask_xor(x.expert_mask, x.nonexpert_mask))) /
                         static_cast<double>(x.expert_mask.size());
        s.mean_fraction += f;
        s.max_fraction = std::max(s.max_fraction, f);
        s.mean_dice += dice_coefficient(x.expert_mask, x.nonexpert_mask);
    }
    if (!samples.empty()) {
        s.mean_fraction /= static_cast<double>(samples.size());
        s.mean_dice /= static_cast<double>(samples.size());
    }
    return s;
}

/// The test split uses its own seed stream and case ids after the training cases.
inline std::vector<SegSample> synth_test_split(const SynthJob& job) {
    SynthParams p = job.params;
    p.slices_per_case = job.test_slices_per_case;
    p.case_offset = job.params.case_offset + (job.count + job.params.slices_per_case - 1) / job.params.slices_per_case;
    return synth_generate(job.test_count, job.size, p, job.seed ^ 0x9e3779b97f4a7c15ULL);
}

inline int cmd_synth(const SynthJob& job, std::ostream& out) {
    ensure_writable_dir(job.out);
    const auto train = synth_generate(job.count, job.size, job.params, job.seed);
    write_dataset(job.out, Split::train, train);
    const auto st = disagreement_stats(train);
    out << "wrote " << train.size() << " training samples to " << (job.out / "train").string() << '\n';
    if (job.test_count > 0) {
        const auto test = synth_test_split(job);
        write_dataset(job.out, Split::test, test);
        out << "wrote " << test.size() << " test samples to " << (job.out / "test").string() << '\n';
    }
    out << "expert/non-expert disagreement: mean " << fmt_double(st.mean_fraction) << " of pixels, max "
        << fmt_double(st.max_fraction) << ", mean DSC " << fmt_double(st.mean_dice) << '\n';
    out << "content hash " << hex64(content_hash(job.out)) << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainJob {
    fs::path data;
    fs::path out;
    ModelConfig model = ModelConfig::tiny();
    TrainConfig train{};
    LossConfig loss{};
    std::optional<fs::path> resume;
    std::optional<int> epochs_override;  ///< only consulted when resuming
    int checkpoint_every = 0;            ///< also keep checkpoint_epoch_NNN.json every k epochs
    bool quiet = false;
    std::string command;
};

struct TrainOutcome {
    std::unique_ptr<SegmentationModel> model;
    ModelConfig model_config;
    TrainConfig train_config;
    LossConfig loss_config;
    std::vector<EpochLog> logs;
    std::vector<BatchRecord> batches;
};

inline std::string epoch_checkpoint_name(int epoch) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "checkpoint_epoch_%03d.json", epoch);
    return buf;
}

inline TrainOutcome run_train(const TrainJob& job, std::ostream& out, std::ostream& err) {
    RunManifest manifest;
    manifest.command = job.command;
    manifest.started = utc_timestamp();
    if (!fs::is_directory(job.data)) throw UsageError("dataset directory not found: " + job.data.string());
    ensure_writable_dir(job.out);

    std::optional<Checkpoint> ckpt;
    TrainOutcome res;
    res.model_config = job.model;
    res.train_config = job.train;
    res.loss_config = job.loss;
    if (job.resume) {
        if (!fs::is_regular_file(*job.resume)) throw UsageError("checkpoint not found: " + job.resume->string());
        ckpt = load_checkpoint(*job.resume);
        res.model_config = ckpt->model_config;
        res.train_config = ckpt->train_config;
        res.loss_config = ckpt->loss_config;
        if (job.epochs_override) res.train_config.epochs = *job.epochs_override;
        if (res.train_config.epochs < ckpt->epoch)
            throw UsageError("checkpoint is already past the requested epoch count");
    }
    res.model_config.validate();
    res.train_config.validate();
    res.loss_config.validate();

    res.model = std::make_unique<SegmentationModel>(res.model_config);
    Trainer trainer(*res.model, res.train_config, res.loss_config);
    if (ckpt) {
        load_weights(*res.model, *ckpt);
        trainer.restore(ckpt->epoch, ckpt->logs, ckpt->batches, ckpt->optimizer, ckpt->rng_state);
    }

    const auto data = prepare_for_model(load_split(job.data, Split::train, {}, err), res.model_config.input_size);
    manifest.dataset_fingerprint = hex64(content_hash(job.data / to_string(Split::train)));
    manifest.resolved_config = resolved_config(res.model_config, res.train_config, res.loss_config);
    write_config_echo(job.out / "config.txt", manifest.resolved_config);
    write_manifest(job.out / "manifest.json", manifest);
    if (!job.quiet) {
        out << "training " << to_string(res.train_config.loss_kind) << " on " << data.size() << " samples, "
            << res.model->parameter_count() << " parameters\n";
    }

    trainer.train(data, [&](const EpochLog& log) {
        write_loss_log(job.out / "loss_log.csv", trainer.logs());
        write_batch_log(job.out / "batches.csv", trainer.batches());
        const auto snap = snapshot(trainer, *res.model);
        save_checkpoint(job.out / "checkpoint_last.json", snap);
        if (job.checkpoint_every > 0 && log.epoch % job.checkpoint_every == 0)
            save_checkpoint(job.out / epoch_checkpoint_name(log.epoch), snap);
        if (!job.quiet) {
            char buf[96];
            std::snprintf(buf, sizeof buf, "epoch %d/%d  loss %.6f  (%.1f s)\n", log.epoch, res.train_config.epochs,
                          log.mean_loss, log.wall_seconds);
            out << buf << std::flush;
        }
    });
    // Resuming a finished run still refreshes the logs.
    write_loss_log(job.out / "loss_log.csv", trainer.logs());
    write_batch_log(job.out / "batches.csv", trainer.batches());

    manifest.finished = utc_timestamp();
    write_manifest(job.out / "manifest.json", manifest);
    res.logs = trainer.logs();
    res.batches = trainer.batches();
    return res;
}

// ---------------------------------------------------------------- eval

struct EvalOptions {
    double threshold = 0.5;
    PostprocessConfig postprocess{};
    Spacing spacing{};
    bool overlays = true;
};

/// Evaluates on the test split and writes metrics.csv plus overlays/ under `out`.
inline EvaluationReport evaluate_to_dir(const SegmentationModel& model, const fs::path& data, const fs::path& out,
                                        const EvalOptions& opt, std::ostream& err) {
    const auto samples = load_split(data, Split::test, opt.spacing, err);
    auto report = evaluate(model, samples, opt.threshold, std::nullopt, opt.postprocess);
    write_metrics_csv(out / "metrics.csv", report);
    if (opt.overlays) {
        fs::create_directories(out / "overlays");
        for (const auto& s : report.slices) {
            SegSample key;
            key.case_id = s.case_id;
            key.slice_index = s.slice_index;
            io::write_rgb_png(out / "overlays" / (slice_stem(key) + ".png"), overlay(s.image, s.truth, s.prediction));
        }
    }
    return report;
}

struct EvalJob {
    fs::path checkpoint;
    fs::path data;
    fs::path out;
    EvalOptions options{};
    std::string command;
};

inline EvaluationReport run_eval(const EvalJob& job, std::ostream& out, std::ostream& err) {
    RunManifest manifest;
    manifest.command = job.command;
    manifest.started = utc_timestamp();
    if (!fs::is_regular_file(job.checkpoint)) throw UsageError("checkpoint not found: " + job.checkpoint.string());
    if (!fs::is_directory(job.data)) throw UsageError("dataset directory not found: " + job.data.string());
    ensure_writable_dir(job.out);
    const auto ckpt = load_checkpoint(job.checkpoint);
    SegmentationModel model(ckpt.model_config);
    load_weights(model, ckpt);

    const auto report = evaluate_to_dir(model, job.data, job.out, job.options, err);
    manifest.resolved_config = resolved_config(ckpt.model_config, ckpt.train_config, ckpt.loss_config);
    manifest.resolved_config.emplace_back("eval.checkpoint", job.checkpoint.string());
    manifest.resolved_config.emplace_back("eval.threshold", fmt_double(job.options.threshold));
    manifest.resolved_config.emplace_back("eval.opening", job.options.postprocess.opening ? "true" : "false");
    manifest.resolved_config.emplace_back("eval.largest_component",
                                          job.options.postprocess.largest_component ? "true" : "false");
    manifest.resolved_config.emplace_back("eval.spacing_dy", fmt_double(job.options.spacing.dy));
    manifest.resolved_config.emplace_back("eval.spacing_dx", fmt_double(job.options.spacing.dx));
    manifest.dataset_fingerprint = hex64(content_hash(job.data / to_string(Split::test)));
    manifest.finished = utc_timestamp();
    write_config_echo(job.out / "config.txt", manifest.resolved_config);
    write_manifest(job.out / "manifest.json", manifest);
    out << report.cases.size() << " cases, " << report.slices.size() << " slices: mean DSC "
        << fmt_double(report.mean_dice) << ", mean HD95 " << fmt_double(report.mean_hd95) << " mm\n";
    return report;
}

// ---------------------------------------------------------------- compare

struct CompareJob {
    TrainJob base;  ///< data, out, configs and seed shared by every run; loss kind is replaced
    std::vector<LossKind> losses{LossKind::adaptive_focal, LossKind::standard_focal, LossKind::ag_bce};
    EvalOptions eval{};
};

struct CompareRun {
    std::string name;
    std::vector<EpochLog> logs;
    std::vector<BatchRecord> batches;
    EvaluationReport report;
};

inline std::vector<CompareRun> run_compare(const CompareJob& job, std::ostream& out, std::ostream& err) {
    if (job.losses.empty()) throw UsageError("compare needs at least one loss");
    if (!fs::is_directory(job.base.data)) throw UsageError("dataset directory not found: " + job.base.data.string());
    ensure_writable_dir(job.base.out);
    std::vector<CompareRun> runs;
    for (LossKind kind : job.losses) {
        TrainJob t = job.base;
        const std::string name(to_string(kind));
        t.train.loss_kind = kind;
        t.out = job.base.out / name;
        t.resume.reset();
        auto res = run_train(t, out, err);
        CompareRun r;
        r.name = name;
        r.logs = res.logs;
        r.batches = res.batches;
        r.report = evaluate_to_dir(*res.model, job.base.data, t.out, job.eval, err);
        out << name << ": mean DSC " << fmt_double(r.report.mean_dice) << ", mean HD95 "
            << fmt_double(r.report.mean_hd95) << " mm\n";
        runs.push_back(std::move(r));
    }

    std::vector<std::pair<std::string, std::vector<EpochLog>>> loss_cols;
    std::vector<std::pair<std::string, EvaluationReport>> metric_cols;
    std::vector<std::pair<std::string, std::vector<double>>> curves;
    for (const auto& r : runs) {
        loss_cols.emplace_back(r.name, r.logs);
        metric_cols.emplace_back(r.name, r.report);
        std::vector<double> ys;
        for (const auto& l : r.logs) ys.push_back(l.mean_loss);
        curves.emplace_back(r.name, ys);
    }
    write_loss_table(job.base.out / "loss_table.csv", loss_cols);
    write_metrics_table(job.base.out / "metrics_table.csv", metric_cols);
    io::write_rgb_png(job.base.out / "loss_curves.png", plot_curves(curves));
    {
        auto legend = open_out(job.base.out / "loss_curves_legend.txt");
        const auto& pal = series_palette();
        for (std::size_t i = 0; i < curves.size(); ++i) {
            const auto& c = pal[i % pal.size()];
            legend << curves[i].first << " rgb(" << int(c[0]) << ',' << int(c[1]) << ',' << int(c[2]) << ")\n";
        }
    }

    RunManifest manifest;
    manifest.command = job.base.command;
    manifest.started = utc_timestamp();
    manifest.resolved_config = resolved_config(job.base.model, job.base.train, job.base.loss);
    std::string names;
    for (const auto& r : runs) names += (names.empty() ? "" : ",") + r.name;
    manifest.resolved_config.emplace_back("compare.losses", names);
    manifest.resolved_config.emplace_back("eval.threshold", fmt_double(job.eval.threshold));
    manifest.dataset_fingerprint = hex64(content_hash(job.base.data));
    manifest.finished = manifest.started;
    write_config_echo(job.base.out / "config.txt", manifest.resolved_config);
    write_manifest(job.base.out / "manifest.json", manifest);

    out << "\nepoch";
    for (const auto& r : runs) out << "  " << r.name;
    out << '\n';
    for (std::size_t e = 0; e < runs.front().logs.size(); ++e) {
        out << e + 1;
        for (const auto& r : runs) out << "  " << (e < r.logs.size() ? fmt_double(r.logs[e].mean_loss) : "-");
        out << '\n';
    }
    return runs;
}

// ---------------------------------------------------------------- argument parsing

/// Raw flag values shared by train and compare.
struct TrainFlags {
    std::string data, out;
    std::string loss = "adaptive_focal";
    int epochs = 10;
    double lr = 0.01, momentum = 0.9, weight_decay = 1e-4;
    int batch = 8;
    int ks = 5;
    double beta = 1.0, gamma_f = 2.0, epsilon = 1e-7;
    std::string variability_mode = "literal";
    double hard_weight = 4.0, easy_weight = 1.0;
    bool combine_dice = false;
    double dice_weight = 1.0;
    std::string optimizer = "sgd";
    std::string lr_schedule = "constant";
    double poly_power = 0.9;
    std::uint64_t seed = 0;
    int input_size = 0;
    std::string preset = "tiny";
    bool no_augment = false;
    std::uint64_t aug_seed = 0;
    int checkpoint_every = 0;
    bool quiet = false;
    std::string resume;
};

inline void add_train_flags(CLI::App* app, TrainFlags& f, bool with_loss) {
    app->add_option("--data", f.data, "dataset root holding train/ and test/")->required();
    app->add_option("--out", f.out, "run directory")->required();
    if (with_loss) app->add_option("--loss", f.loss, "adaptive_focal | focal | ag_bce")->capture_default_str();
    app->add_option("--epochs", f.epochs)->capture_default_str();
    app->add_option("--lr", f.lr)->capture_default_str();
    app->add_option("--momentum", f.momentum)->capture_default_str();
    app->add_option("--weight-decay", f.weight_decay)->capture_default_str();
    app->add_option("--batch", f.batch)->capture_default_str();
    app->add_option("--ks", f.ks, "hard-region dilation kernel size")->capture_default_str();
    app->add_option("--beta", f.beta)->capture_default_str();
    app->add_option("--gamma-f", f.gamma_f)->capture_default_str();
    app->add_option("--epsilon", f.epsilon)->capture_default_str();
    app->add_option("--variability-mode", f.variability_mode, "literal | disagreement")->capture_default_str();
    app->add_option("--hard-weight", f.hard_weight, "AG-BCE hard-region weight")->capture_default_str();
    app->add_option("--easy-weight", f.easy_weight, "AG-BCE easy-region weight")->capture_default_str();
    app->add_flag("--combine-dice", f.combine_dice, "add a Dice term on the full-resolution head");
    app->add_option("--dice-weight", f.dice_weight)->capture_default_str();
    app->add_option("--optimizer", f.optimizer, "sgd | adam")->capture_default_str();
    app->add_option("--lr-schedule", f.lr_schedule, "constant | poly")->capture_default_str();
    app->add_option("--poly-power", f.poly_power)->capture_default_str();
    app->add_option("--seed", f.seed, "initialisation and shuffling seed")->capture_default_str();
    app->add_option("--input-size", f.input_size, "model input size (0: preset default)")->capture_default_str();
    app->add_option("--preset", f.preset, "tiny | paper")->capture_default_str();
    app->add_flag("--no-augment", f.no_augment);
    app->add_option("--aug-seed", f.aug_seed)->capture_default_str();
    app->add_option("--checkpoint-every", f.checkpoint_every, "keep a checkpoint every k epochs (0: last only)")
        ->capture_default_str();
    app->add_flag("--quiet", f.quiet);
}

inline TrainJob to_train_job(const TrainFlags& f, const std::string& command) {
    TrainJob job;
    job.data = f.data;
    job.out = f.out;
    job.command = command;
    if (f.preset == "tiny") job.model = ModelConfig::tiny();
    else if (f.preset == "paper") job.model = ModelConfig::paper();
    else throw UsageError("unknown preset '" + f.preset + "'; valid: tiny, paper");
    if (f.input_size > 0) job.model.input_size = f.input_size;
    job.model.init_seed = f.seed;

    auto& t = job.train;
    t.loss_kind = require_loss_kind(f.loss);
    t.combine_dice = f.combine_dice;
    t.dice_weight = f.dice_weight;
    t.epochs = f.epochs;
    t.batch_size = f.batch;
    t.learning_rate = f.lr;
    t.momentum = f.momentum;
    t.weight_decay = f.weight_decay;
    if (f.optimizer == "sgd" || f.optimizer == "sgd_momentum") t.optimizer = OptimizerKind::sgd_momentum;
    else if (f.optimizer == "adam") t.optimizer = OptimizerKind::adam;
    else throw UsageError("unknown optimizer '" + f.optimizer + "'; valid: sgd, adam");
    if (f.lr_schedule == "constant") t.schedule = LrSchedule::constant;
    else if (f.lr_schedule == "poly") t.schedule = LrSchedule::polynomial;
    else throw UsageError("unknown lr schedule '" + f.lr_schedule + "'; valid: constant, poly");
    t.poly_power = f.poly_power;
    t.augment = !f.no_augment;
    t.augmentation.seed = f.aug_seed;
    t.seed = f.seed;

    auto& l = job.loss;
    l.beta = f.beta;
    l.gamma_f = f.gamma_f;
    l.epsilon = f.epsilon;
    l.kernel_size = f.ks;
    const auto mode = parse_variability_mode(f.variability_mode);
    if (!mode) throw UsageError("unknown variability mode '" + f.variability_mode + "'; valid: literal, disagreement");
    l.variability_mode = *mode;
    l.hard_weight = f.hard_weight;
    l.easy_weight = f.easy_weight;

    job.checkpoint_every = f.checkpoint_every;
    job.quiet = f.quiet;
    if (!f.resume.empty()) job.resume = fs::path(f.resume);
    return job;
}

/// Runs the tool on `args` (without the program name) and returns the exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::string command = "capseg";
    for (const auto& a : args) command += " " + a;

    CLI::App app{"Segmentation training with an adaptive focal loss"};
    app.require_subcommand(1);

    SynthJob synth;
    std::string synth_out;
    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset");
    synth_cmd->add_option("--out", synth_out, "dataset root")->required();
    synth_cmd->add_option("--count", synth.count, "training samples")->capture_default_str();
    synth_cmd->add_option("--size", synth.size)->capture_default_str();
    synth_cmd->add_option("--seed", synth.seed)->capture_default_str();
    synth_cmd->add_option("--perturb", synth.params.perturb, "non-expert boundary offset, fraction of size")
        ->capture_default_str();
    synth_cmd->add_option("--speckle", synth.params.speckle)->capture_default_str();
    synth_cmd->add_option("--slices-per-case", synth.params.slices_per_case)->capture_default_str();
    synth_cmd->add_option("--test-count", synth.test_count, "test samples (0: no test split)")->capture_default_str();
    synth_cmd->add_option("--test-slices-per-case", synth.test_slices_per_case)->capture_default_str();

    TrainFlags train_flags;
    auto* train_cmd = app.add_subcommand("train", "train one model");
    add_train_flags(train_cmd, train_flags, true);
    train_cmd->add_option("--resume", train_flags.resume,
                          "continue from a checkpoint; its configuration wins except --epochs");

    EvalJob eval;
    std::string ckpt_path, eval_data, eval_out;
    std::vector<double> spacing{1.0};
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    eval_cmd->add_option("--checkpoint", ckpt_path)->required();
    eval_cmd->add_option("--data", eval_data, "dataset root holding test/")->required();
    eval_cmd->add_option("--out", eval_out)->required();
    eval_cmd->add_option("--threshold", eval.options.threshold)->capture_default_str();
    eval_cmd->add_flag("--opening", eval.options.postprocess.opening, "3x3 morphological opening");
    eval_cmd->add_flag("--largest-component", eval.options.postprocess.largest_component);
    eval_cmd->add_option("--spacing", spacing, "pixel spacing in mm: one value, or dy dx")->expected(1, 2);
    eval_cmd->add_flag("!--no-overlays", eval.options.overlays);

    TrainFlags cmp_flags;
    std::vector<std::string> cmp_losses = loss_names();
    double cmp_threshold = 0.5;
    auto* cmp_cmd = app.add_subcommand("compare", "train and evaluate several losses under one seed");
    add_train_flags(cmp_cmd, cmp_flags, false);
    cmp_cmd->add_option("--losses", cmp_losses)->capture_default_str();
    cmp_cmd->add_option("--threshold", cmp_threshold)->capture_default_str();

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitUsage;
    }

    try {
        if (*synth_cmd) {
            synth.out = synth_out;
            return cmd_synth(synth, out);
        }
        if (*train_cmd) {
            TrainJob j = to_train_job(train_flags, command);
            if (train_cmd->count("--epochs")) j.epochs_override = train_flags.epochs;
            run_train(j, out, err);
            return kExitOk;
        }
        if (*eval_cmd) {
            eval.checkpoint = ckpt_path;
            eval.data = eval_data;
            eval.out = eval_out;
            eval.command = command;
            eval.options.spacing = spacing.size() == 2 ? Spacing{spacing[0], spacing[1]} : Spacing{spacing[0], spacing[0]};
            run_eval(eval, out, err);
            return kExitOk;
        }
        if (*cmp_cmd) {
            CompareJob job;
            job.base = to_train_job(cmp_flags, command);
            job.losses.clear();
            for (const auto& n : cmp_losses) job.losses.push_back(require_loss_kind(n));
            job.eval.threshold = cmp_threshold;
            run_compare(job, out, err);
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace capseg::cli
