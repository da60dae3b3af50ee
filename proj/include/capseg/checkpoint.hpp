#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capseg/error.hpp"
#include "capseg/losses.hpp"
#include "capseg/model.hpp"
#include "capseg/trainer.hpp"

namespace capseg {

using json = nlohmann::json;

inline constexpr const char* kCheckpointFormat = "capseg-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline json to_json(const ModelConfig& c) {
    json w = json::object();
    for (auto [scale, weight] : c.scale_weights) w[std::to_string(scale)] = weight;
    return {{"input_size", c.input_size},
            {"patch_size", c.patch_size},
            {"embed_dim", c.embed_dim},
            {"depth", c.depth},
            {"heads", c.heads},
            {"mlp_dim", c.mlp_dim},
            {"stem_channels", c.stem_channels},
            {"decoder_channels", c.decoder_channels},
            {"supervision_scales", c.supervision_scales},
            {"scale_weights", w},
            {"norm_groups", c.norm_groups},
            {"decoder_convs", c.decoder_convs},
            {"bilinear_upsampling", c.bilinear_upsampling},
            {"full_res_channels", c.full_res_channels},
            {"head_prior", c.head_prior},
            {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    j.at("input_size").get_to(c.input_size);
    j.at("patch_size").get_to(c.patch_size);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("depth").get_to(c.depth);
    j.at("heads").get_to(c.heads);
    j.at("mlp_dim").get_to(c.mlp_dim);
    j.at("stem_channels").get_to(c.stem_channels);
    j.at("decoder_channels").get_to(c.decoder_channels);
    j.at("supervision_scales").get_to(c.supervision_scales);
    c.scale_weights.clear();
    for (const auto& [k, v] : j.at("scale_weights").items()) c.scale_weights[std::stoi(k)] = v.get<double>();
    j.at("norm_groups").get_to(c.norm_groups);
    j.at("decoder_convs").get_to(c.decoder_convs);
    j.at("bilinear_upsampling").get_to(c.bilinear_upsampling);
    j.at("full_res_channels").get_to(c.full_res_channels);
    j.at("head_prior").get_to(c.head_prior);
    j.at("init_seed").get_to(c.init_seed);
    return c;
}

inline json to_json(const LossConfig& c) {
    return {{"beta", c.beta},
            {"gamma_f", c.gamma_f},
            {"epsilon", c.epsilon},
            {"kernel_size", c.kernel_size},
            {"gamma_min", c.gamma_min},
            {"gamma_max", c.gamma_max},
            {"variability_mode", std::string(to_string(c.variability_mode))},
            {"hard_weight", c.hard_weight},
            {"easy_weight", c.easy_weight},
            {"dice_smooth", c.dice_smooth}};
}

inline LossConfig loss_config_from_json(const json& j) {
    LossConfig c;
    j.at("beta").get_to(c.beta);
    j.at("gamma_f").get_to(c.gamma_f);
    j.at("epsilon").get_to(c.epsilon);
    j.at("kernel_size").get_to(c.kernel_size);
    j.at("gamma_min").get_to(c.gamma_min);
    j.at("gamma_max").get_to(c.gamma_max);
    const auto mode = parse_variability_mode(j.at("variability_mode").get<std::string>());
    if (!mode) throw InvalidInput("checkpoint: unknown variability mode");
    c.variability_mode = *mode;
    j.at("hard_weight").get_to(c.hard_weight);
    j.at("easy_weight").get_to(c.easy_weight);
    j.at("dice_smooth").get_to(c.dice_smooth);
    return c;
}

inline json to_json(const TrainConfig& c) {
    const auto& a = c.augmentation;
    return {{"loss", std::string(to_string(c.loss_kind))},
            {"combine_dice", c.combine_dice},
            {"dice_weight", c.dice_weight},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"optimizer", to_string(c.optimizer)},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_epsilon", c.adam_epsilon},
            {"lr_schedule", to_string(c.schedule)},
            {"poly_power", c.poly_power},
            {"augment", c.augment},
            {"aug_max_rotation", a.max_rotation_degrees},
            {"aug_flip", a.horizontal_flip},
            {"aug_scale", {a.intensity_scale_range.first, a.intensity_scale_range.second}},
            {"aug_shift", {a.intensity_shift_range.first, a.intensity_shift_range.second}},
            {"aug_seed", a.seed},
            {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    const auto kind = parse_loss_kind(j.at("loss").get<std::string>());
    if (!kind) throw InvalidInput("checkpoint: unknown loss kind");
    c.loss_kind = *kind;
    j.at("combine_dice").get_to(c.combine_dice);
    j.at("dice_weight").get_to(c.dice_weight);
    j.at("epochs").get_to(c.epochs);
    j.at("batch_size").get_to(c.batch_size);
    j.at("learning_rate").get_to(c.learning_rate);
    j.at("momentum").get_to(c.momentum);
    j.at("weight_decay").get_to(c.weight_decay);
    c.optimizer = j.at("optimizer").get<std::string>() == "adam" ? OptimizerKind::adam : OptimizerKind::sgd_momentum;
    j.at("adam_beta1").get_to(c.adam_beta1);
    j.at("adam_beta2").get_to(c.adam_beta2);
    j.at("adam_epsilon").get_to(c.adam_epsilon);
    c.schedule = j.at("lr_schedule").get<std::string>() == "poly" ? LrSchedule::polynomial : LrSchedule::constant;
    j.at("poly_power").get_to(c.poly_power);
    j.at("augment").get_to(c.augment);
    auto& a = c.augmentation;
    j.at("aug_max_rotation").get_to(a.max_rotation_degrees);
    j.at("aug_flip").get_to(a.horizontal_flip);
    a.intensity_scale_range = {j.at("aug_scale")[0].get<double>(), j.at("aug_scale")[1].get<double>()};
    a.intensity_shift_range = {j.at("aug_shift")[0].get<double>(), j.at("aug_shift")[1].get<double>()};
    j.at("aug_seed").get_to(a.seed);
    j.at("seed").get_to(c.seed);
    return c;
}

/// Everything needed to rebuild a model and continue its training exactly.
struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    LossConfig loss_config;
    int epoch = 0;
    std::string rng_state;
    std::vector<std::pair<std::string, nn::Tensor>> params;
    OptimizerState optimizer;
    std::vector<EpochLog> logs;
    std::vector<BatchRecord> batches;
};

inline Checkpoint snapshot(const Trainer& trainer, const SegmentationModel& model) {
    Checkpoint c;
    c.model_config = model.config();
    c.train_config = trainer.config();
    c.loss_config = trainer.loss_config();
    c.epoch = trainer.epochs_done();
    c.rng_state = trainer.rng_state();
    for (const auto& [name, v] : model.parameters()) c.params.emplace_back(name, v->value);
    c.optimizer = trainer.optimizer_state();
    c.logs = trainer.logs();
    c.batches = trainer.batches();
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    json j;
    j["format"] = kCheckpointFormat;
    j["version"] = kCheckpointVersion;
    j["model_config"] = to_json(c.model_config);
    j["train_config"] = to_json(c.train_config);
    j["loss_config"] = to_json(c.loss_config);
    j["epoch"] = c.epoch;
    j["rng_state"] = c.rng_state;
    json params = json::array();
    for (const auto& [name, t] : c.params) params.push_back({{"name", name}, {"shape", t.shape}, {"data", t.data}});
    j["params"] = std::move(params);
    j["optimizer"] = {{"step", c.optimizer.step}, {"first", c.optimizer.first}, {"second", c.optimizer.second}};
    json logs = json::array();
    for (const auto& l : c.logs) logs.push_back({{"epoch", l.epoch}, {"mean_loss", l.mean_loss}, {"wall_seconds", l.wall_seconds}});
    j["logs"] = std::move(logs);
    json batches = json::array();
    for (const auto& b : c.batches) batches.push_back({b.epoch, b.batch, b.hash, b.loss});
    j["batches"] = std::move(batches);

    const auto tmp = std::filesystem::path(path).concat(".tmp");
    {
        std::ofstream out(tmp);
        if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
        out << j.dump();
        if (!out) throw std::runtime_error("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InvalidInput("cannot open checkpoint " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw InvalidInput("corrupt checkpoint " + path.string() + ": " + e.what());
    }
    if (j.value("format", "") != kCheckpointFormat) throw InvalidInput("not a checkpoint: " + path.string());
    if (j.value("version", 0) != kCheckpointVersion) throw InvalidInput("unsupported checkpoint version");
    Checkpoint c;
    c.model_config = model_config_from_json(j.at("model_config"));
    c.train_config = train_config_from_json(j.at("train_config"));
    c.loss_config = loss_config_from_json(j.at("loss_config"));
    j.at("epoch").get_to(c.epoch);
    j.at("rng_state").get_to(c.rng_state);
    for (const auto& p : j.at("params")) {
        c.params.emplace_back(p.at("name").get<std::string>(),
                              nn::Tensor(p.at("shape").get<std::vector<int>>(), p.at("data").get<std::vector<double>>()));
    }
    const auto& o = j.at("optimizer");
    o.at("step").get_to(c.optimizer.step);
    o.at("first").get_to(c.optimizer.first);
    o.at("second").get_to(c.optimizer.second);
    for (const auto& l : j.at("logs"))
        c.logs.push_back({l.at("epoch").get<int>(), l.at("mean_loss").get<double>(), l.at("wall_seconds").get<double>()});
    for (const auto& b : j.at("batches"))
        c.batches.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<std::uint64_t>(), b[3].get<double>()});
    return c;
}

/// Copies checkpoint weights into a model built from the same config.
inline void load_weights(SegmentationModel& model, const Checkpoint& c) {
    const auto& params = model.parameters();
    if (params.size() != c.params.size()) throw InvalidInput("checkpoint parameter count does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].first != c.params[i].first || params[i].second->value.shape != c.params[i].second.shape)
            throw InvalidInput("checkpoint parameter mismatch at " + params[i].first);
        params[i].second->value = c.params[i].second;
    }
}

}  // namespace capseg
