#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "capseg/data.hpp"
#include "capseg/error.hpp"
#include "capseg/losses.hpp"
#include "capseg/metrics.hpp"
#include "capseg/model.hpp"
#include "capseg/morphology.hpp"

namespace capseg {

enum class OptimizerKind { sgd_momentum, adam };
enum class LrSchedule { constant, polynomial };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd_momentum"; }
inline std::string to_string(LrSchedule s) { return s == LrSchedule::polynomial ? "poly" : "constant"; }

struct TrainConfig {
    LossKind loss_kind = LossKind::adaptive_focal;
    bool combine_dice = false;
    double dice_weight = 1.0;
    int epochs = 10;
    int batch_size = 8;
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    OptimizerKind optimizer = OptimizerKind::sgd_momentum;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    LrSchedule schedule = LrSchedule::constant;
    double poly_power = 0.9;
    bool augment = true;
    AugmentConfig augmentation{};
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (!(learning_rate >= 0)) throw ConfigError("learning rate must be >= 0");
        if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
        if (!(weight_decay >= 0)) throw ConfigError("weight decay must be >= 0");
        if (!(dice_weight >= 0)) throw ConfigError("dice weight must be >= 0");
        augmentation.validate();
    }
};

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0.0;
    double wall_seconds = 0.0;
};

/// One optimizer step's bookkeeping; `hash` identifies the sample indices in the batch.
struct BatchRecord {
    int epoch = 0;
    int batch = 0;
    std::uint64_t hash = 0;
    double loss = 0.0;
};

struct OptimizerState {
    std::vector<std::vector<double>> first;   ///< velocity (SGD) or first moment (Adam)
    std::vector<std::vector<double>> second;  ///< Adam second moment
    std::int64_t step = 0;
};

/// Updates `params` in place from `grads`. Weight decay is coupled: it is
/// added to the gradient before the momentum or moment update.
inline void optimizer_step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads,
                           OptimizerState& state, const TrainConfig& cfg, double lr) {
    if (params.size() != grads.size()) throw InvalidInput("optimizer_step: params/grads count mismatch");
    if (state.first.empty()) {
        for (const auto& p : params) {
            state.first.emplace_back(p.size(), 0.0);
            if (cfg.optimizer == OptimizerKind::adam) state.second.emplace_back(p.size(), 0.0);
        }
    }
    if (state.first.size() != params.size()) throw InvalidInput("optimizer_step: state does not match params");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].size() != grads[i].size() || state.first[i].size() != params[i].size())
            throw InvalidInput("optimizer_step: shape mismatch at parameter " + std::to_string(i));
        for (double g : grads[i])
            if (!std::isfinite(g)) throw TrainingDiverged("non-finite gradient at parameter " + std::to_string(i));
    }
    ++state.step;
    if (cfg.optimizer == OptimizerKind::sgd_momentum) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& v = state.first[i];
            for (std::size_t j = 0; j < v.size(); ++j) {
                v[j] = cfg.momentum * v[j] + (grads[i][j] + cfg.weight_decay * params[i][j]);
                params[i][j] -= lr * v[j];
            }
        }
        return;
    }
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& m = state.first[i];
        auto& v = state.second[i];
        for (std::size_t j = 0; j < m.size(); ++j) {
            const double g = grads[i][j] + cfg.weight_decay * params[i][j];
            m[j] = b1 * m[j] + (1 - b1) * g;
            v[j] = b2 * v[j] + (1 - b2) * g * g;
            params[i][j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg.adam_epsilon);
        }
    }
}

inline std::uint64_t hash_indices(std::span<const std::size_t> idx) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t v : idx) {
        for (int b = 0; b < 8; ++b) {
            h ^= (static_cast<std::uint64_t>(v) >> (8 * b)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    }
    return h;
}

/// Mini-batch trainer. Owns the optimizer state and the shuffling stream so a
/// run can be checkpointed and resumed exactly.
class Trainer {
public:
    Trainer(SegmentationModel& model, TrainConfig train_cfg, LossConfig loss_cfg)
        : model_(model), cfg_(std::move(train_cfg)), loss_cfg_(loss_cfg), shuffle_rng_(cfg_.seed) {
        cfg_.validate();
        loss_cfg_.validate();
    }

    const TrainConfig& config() const noexcept { return cfg_; }
    const LossConfig& loss_config() const noexcept { return loss_cfg_; }
    int epochs_done() const noexcept { return epochs_done_; }
    const std::vector<EpochLog>& logs() const noexcept { return logs_; }
    const std::vector<BatchRecord>& batches() const noexcept { return batches_; }
    const OptimizerState& optimizer_state() const noexcept { return opt_; }
    SegmentationModel& model() noexcept { return model_; }

    std::string rng_state() const {
        std::ostringstream os;
        os << shuffle_rng_;
        return os.str();
    }

    /// Restores the trainer-side state saved by a checkpoint.
    void restore(int epochs_done, std::vector<EpochLog> logs, std::vector<BatchRecord> batches, OptimizerState opt,
                 const std::string& rng_state) {
        epochs_done_ = epochs_done;
        logs_ = std::move(logs);
        batches_ = std::move(batches);
        opt_ = std::move(opt);
        std::istringstream is(rng_state);
        is >> shuffle_rng_;
        if (!is) throw InvalidInput("corrupt RNG state in checkpoint");
    }

    /// Loss for one sample (multi-scale, plus optional Dice on the full head).
    MultiScaleLoss sample_loss(const MultiScalePrediction& pred, const SegSample& s) const {
        auto ms = multiscale_loss(pred, s.expert_mask, s.nonexpert_mask, cfg_.loss_kind, loss_cfg_,
                                  model_.config().scale_weights);
        if (cfg_.combine_dice && cfg_.dice_weight > 0) {
            auto d = dice_loss_logits(pred.full_logits, s.expert_mask, loss_cfg_.dice_smooth);
            ms.value += cfg_.dice_weight * d.value;
            auto& g = ms.grads[1];
            if (g.empty()) g = RealGrid(d.grad.rows(), d.grad.cols(), 0.0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += cfg_.dice_weight * d.grad[i];
        }
        return ms;
    }

    /// Runs one epoch over `data`, whose images must match the model input size.
    EpochLog run_epoch(const std::vector<SegSample>& data) {
        if (data.empty()) throw InvalidInput("train: empty dataset");
        const auto start = std::chrono::steady_clock::now();
        const int epoch = epochs_done_ + 1;
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), shuffle_rng_);

        const std::size_t bs = static_cast<std::size_t>(cfg_.batch_size);
        const std::size_t steps_per_epoch = (data.size() + bs - 1) / bs;
        double loss_sum = 0.0;
        int batch_no = 0;
        for (std::size_t first = 0; first < order.size(); first += bs, ++batch_no) {
            const std::size_t last = std::min(first + bs, order.size());
            std::span<const std::size_t> idx(order.data() + first, last - first);
            std::vector<SegSample> batch;
            batch.reserve(idx.size());
            for (std::size_t i : idx) {
                if (cfg_.augment) {
                    auto rng = derived_rng(cfg_.augmentation.seed ^ cfg_.seed, static_cast<std::uint64_t>(epoch), i);
                    batch.push_back(augment(data[i], cfg_.augmentation, rng));
                } else {
                    batch.push_back(data[i]);
                }
            }
            const double loss = step(batch, epoch, batch_no, steps_per_epoch);
            batches_.push_back({epoch, batch_no, hash_indices(idx), loss});
            loss_sum += loss;
        }
        EpochLog log;
        log.epoch = epoch;
        log.mean_loss = loss_sum / batch_no;
        log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        logs_.push_back(log);
        epochs_done_ = epoch;
        return log;
    }

    /// Trains until cfg.epochs epochs are done in total (resumes count).
    const std::vector<EpochLog>& train(const std::vector<SegSample>& data,
                                       const std::function<void(const EpochLog&)>& on_epoch = {}) {
        while (epochs_done_ < cfg_.epochs) {
            const auto log = run_epoch(data);
            if (on_epoch) on_epoch(log);
        }
        return logs_;
    }

    double learning_rate_at(std::int64_t step, std::size_t steps_per_epoch) const {
        if (cfg_.schedule == LrSchedule::constant) return cfg_.learning_rate;
        const double total = static_cast<double>(steps_per_epoch) * cfg_.epochs;
        const double frac = std::min(1.0, static_cast<double>(step) / total);
        return cfg_.learning_rate * std::pow(1.0 - frac, cfg_.poly_power);
    }

private:
    double step(const std::vector<SegSample>& batch, int epoch, int batch_no, std::size_t steps_per_epoch) {
        std::vector<const RealGrid*> images;
        for (const auto& s : batch) images.push_back(&s.image);
        model_.zero_grad();
        ForwardOutputs out = model_.forward(images);

        std::vector<nn::Var> roots{out.full};
        for (auto& [scale, v] : out.side) roots.push_back(v);
        for (auto& r : roots) r->ensure_grad();
        const double inv_b = 1.0 / static_cast<double>(batch.size());
        double total = 0.0;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            const auto pred = out.sample(static_cast<int>(i));
            auto finite = [](const RealGrid& g) { return std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); }); };
            bool ok = finite(pred.full_logits);
            for (const auto& [scale, g] : pred.side_logits) ok = ok && finite(g);
            if (!ok) {
                std::ostringstream msg;
                msg << "non-finite logits at epoch " << epoch << ", batch " << batch_no << ", sample " << i << " (case "
                    << batch[i].case_id << ")";
                throw TrainingDiverged(msg.str());
            }
            const auto ms = sample_loss(pred, batch[i]);
            if (!std::isfinite(ms.value)) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << ", batch " << batch_no << ", sample " << i
                    << " (case " << batch[i].case_id << ")";
                for (auto [scale, v] : ms.per_scale) msg << "; scale 1/" << scale << " loss " << v;
                throw TrainingDiverged(msg.str());
            }
            total += ms.value;
            for (const auto& [scale, g] : ms.grads) {
                const nn::Var& node = scale == 1 ? out.full : out.side.at(scale);
                const std::size_t plane = g.size();
                double* dst = node->grad.ptr() + i * plane;
                for (std::size_t j = 0; j < plane; ++j) dst[j] += g[j] * inv_b;
            }
        }
        nn::backward(roots);

        std::vector<std::span<double>> params;
        std::vector<std::span<const double>> grads;
        for (auto& [name, v] : model_.parameters()) {
            v->ensure_grad();
            params.emplace_back(v->value.data);
            grads.emplace_back(v->grad.data);
        }
        const double lr = learning_rate_at(opt_.step, steps_per_epoch);
        optimizer_step(params, grads, opt_, cfg_, lr);
        return total * inv_b;
    }

    SegmentationModel& model_;
    TrainConfig cfg_;
    LossConfig loss_cfg_;
    std::mt19937_64 shuffle_rng_;
    OptimizerState opt_;
    int epochs_done_ = 0;
    std::vector<EpochLog> logs_;
    std::vector<BatchRecord> batches_;
};

/// Resizes every sample to the model input size when needed.
inline std::vector<SegSample> prepare_for_model(const std::vector<SegSample>& data, int input_size) {
    std::vector<SegSample> out;
    out.reserve(data.size());
    for (const auto& s : data) out.push_back(resize(s, input_size));
    return out;
}

/// Convenience wrapper: trains `model` in place and returns the epoch logs.
inline std::vector<EpochLog> train(SegmentationModel& model, const std::vector<SegSample>& dataset,
                                   const TrainConfig& train_cfg, const LossConfig& loss_cfg) {
    Trainer t(model, train_cfg, loss_cfg);
    return t.train(prepare_for_model(dataset, model.config().input_size));
}

struct PostprocessConfig {
    bool opening = false;            ///< 3x3 morphological opening
    bool largest_component = false;  ///< keep only the largest 8-connected component
};

inline Mask threshold_probabilities(const RealGrid& probs, double threshold) {
    Mask m(probs.rows(), probs.cols());
    for (std::size_t i = 0; i < probs.size(); ++i) m[i] = probs[i] > threshold ? 1 : 0;
    return m;
}

inline Mask postprocess(Mask m, const PostprocessConfig& pp) {
    if (pp.opening) m = opening(m, 3);
    if (pp.largest_component) m = largest_component(m);
    return m;
}

inline Mask predict_mask(const SegmentationModel& model, const RealGrid& image, double threshold = 0.5,
                         const PostprocessConfig& pp = {}) {
    const auto pred = model.predict(image);
    return postprocess(threshold_probabilities(logistic_probabilities(pred.full_logits), threshold), pp);
}

struct SlicePrediction {
    std::string case_id;
    int slice_index = 0;
    RealGrid image;
    Mask truth;
    Mask prediction;
    SliceMetrics metrics;
};

struct EvaluationReport {
    std::vector<CaseMetrics> cases;
    double mean_dice = 0.0;
    double mean_hd95 = 0.0;  ///< over cases with a defined HD95
    std::vector<SlicePrediction> slices;
};

/// Arithmetic mean over cases (not slices), as in a per-case results table.
inline void summarize(EvaluationReport& r) {
    double dsum = 0.0, hsum = 0.0;
    std::size_t hn = 0;
    for (const auto& c : r.cases) {
        dsum += c.mean_dice;
        if (std::isfinite(c.mean_hd95)) {
            hsum += c.mean_hd95;
            ++hn;
        }
    }
    r.mean_dice = r.cases.empty() ? 0.0 : dsum / static_cast<double>(r.cases.size());
    r.mean_hd95 = hn ? hsum / static_cast<double>(hn) : std::numeric_limits<double>::quiet_NaN();
}

/// Predicts every slice, groups by case id (sorted) and aggregates per case.
/// `spacing` overrides the per-sample spacing when given.
inline EvaluationReport evaluate(const SegmentationModel& model, const std::vector<SegSample>& test_samples,
                                 double threshold = 0.5, std::optional<Spacing> spacing = std::nullopt,
                                 const PostprocessConfig& pp = {}) {
    if (test_samples.empty()) throw InvalidInput("evaluate: empty test set");
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < test_samples.size(); ++i) groups[test_samples[i].case_id].push_back(i);
    EvaluationReport report;
    for (const auto& [case_id, idx] : groups) {
        std::vector<Mask> preds, truths;
        Spacing sp{};
        for (std::size_t i : idx) {
            const SegSample s = resize(test_samples[i], model.config().input_size);
            sp = spacing.value_or(s.spacing);
            Mask p = predict_mask(model, s.image, threshold, pp);
            report.slices.push_back({s.case_id, s.slice_index, s.image, s.expert_mask, p,
                                     evaluate_slice(p, s.expert_mask, sp)});
            preds.push_back(std::move(p));
            truths.push_back(s.expert_mask);
        }
        report.cases.push_back(evaluate_case(preds, truths, sp, case_id));
    }
    summarize(report);
    return report;
}

}  // namespace capseg
