#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "capseg/error.hpp"
#include "capseg/grid.hpp"
#include "capseg/losses.hpp"
#include "capseg/nn/autograd.hpp"
#include "capseg/nn/ops.hpp"

namespace capseg {

/// Encoder-decoder configuration. Scales are stored as downsampling
/// denominators: 2 means 1/2 resolution, 1 is the full-resolution head.
struct ModelConfig {
    int input_size = 64;
    int patch_size = 8;                      ///< in input pixels
    int embed_dim = 64;
    int depth = 2;
    int heads = 2;
    int mlp_dim = 128;
    std::vector<int> stem_channels{16, 32, 64};
    std::vector<int> decoder_channels{64, 32, 32, 16};
    std::vector<int> supervision_scales{2, 4, 8};
    std::map<int, double> scale_weights{{1, 1.0}, {2, 1.0}, {4, 1.0}, {8, 1.0}};
    int norm_groups = 4;  ///< group-norm groups per conv block; 0 disables normalisation
    int decoder_convs = 1;    ///< conv blocks per decoder level
    bool bilinear_upsampling = true;
    int full_res_channels = 0;  ///< width of a stride-1 conv on the input used as the last skip; 0 skips the raw image
    double head_prior = 0.0;    ///< initial foreground probability of every head; 0 leaves head biases at zero
    std::uint64_t init_seed = 0;

    /// Desk-scale model: 64 px input, 3 stride-2 stem stages, D=64, L=2, 2 heads.
    static ModelConfig tiny() { return ModelConfig{}; }

    /// 224 px input with 16 px patches.
    static ModelConfig paper() {
        ModelConfig c;
        c.input_size = 224;
        c.patch_size = 16;
        c.embed_dim = 128;
        c.depth = 4;
        c.heads = 4;
        c.mlp_dim = 256;
        c.stem_channels = {32, 64, 128};
        c.decoder_channels = {128, 64, 32, 16};
        return c;
    }

    int stem_factor() const { return 1 << stem_channels.size(); }
    int feature_patch() const { return patch_size / stem_factor(); }
    int token_grid() const { return input_size / patch_size; }
    int token_count() const { return token_grid() * token_grid(); }

    void validate() const {
        if (input_size <= 0 || patch_size <= 0 || embed_dim <= 0 || depth <= 0 || heads <= 0 || mlp_dim <= 0)
            throw ConfigError("model dimensions must be positive");
        if (stem_channels.empty()) throw ConfigError("need at least one stem stage");
        if (decoder_channels.size() != stem_channels.size() + 1)
            throw ConfigError("decoder_channels needs one entry per stem stage plus the full-resolution stage");
        if (input_size % stem_factor() != 0) throw ConfigError("input_size must be divisible by the stem factor");
        if (patch_size % stem_factor() != 0)
            throw ConfigError("patch_size must be a multiple of the stem downsampling factor");
        if ((input_size / stem_factor()) % feature_patch() != 0)
            throw ConfigError("post-stem feature size not divisible by the feature patch size");
        if (embed_dim % heads != 0) throw ConfigError("embed_dim must be divisible by heads");
        if (norm_groups < 0) throw ConfigError("norm_groups must be >= 0");
        if (decoder_convs < 1) throw ConfigError("decoder_convs must be >= 1");
        if (full_res_channels < 0) throw ConfigError("full_res_channels must be >= 0");
        if (!(head_prior >= 0 && head_prior < 1)) throw ConfigError("head_prior must lie in [0, 1)");
        if (norm_groups > 0 && full_res_channels % norm_groups != 0)
            throw ConfigError("full_res_channels must be divisible by norm_groups");
        if (norm_groups > 0) {
            for (int ch : stem_channels)
                if (ch % norm_groups != 0) throw ConfigError("stem channels must be divisible by norm_groups");
            for (int ch : decoder_channels)
                if (ch % norm_groups != 0) throw ConfigError("decoder channels must be divisible by norm_groups");
        }
        for (int s : supervision_scales) {
            if (s < 2 || s > stem_factor() || (s & (s - 1)) != 0)
                throw ConfigError("supervision scale 1/" + std::to_string(s) + " has no decoder level");
            if (input_size % s != 0) throw ConfigError("supervision scale must divide input_size");
        }
        bool any_positive = false;
        for (auto [scale, w] : scale_weights) {
            if (!(w >= 0)) throw ConfigError("scale weights must be >= 0");
            any_positive = any_positive || w > 0;
            const bool known = scale == 1 || std::find(supervision_scales.begin(), supervision_scales.end(),
                                                       scale) != supervision_scales.end();
            if (w > 0 && !known) throw ConfigError("weight given for unsupervised scale 1/" + std::to_string(scale));
        }
        if (!any_positive) throw ConfigError("at least one scale weight must be > 0");
    }
};

/// Full-resolution logits plus side-output logits keyed by scale denominator.
struct MultiScalePrediction {
    RealGrid full_logits;
    std::map<int, RealGrid> side_logits;
};

/// Graph outputs of one batched forward pass, each [B, 1, h, w].
struct ForwardOutputs {
    nn::Var full;
    std::map<int, nn::Var> side;

    MultiScalePrediction sample(int index) const {
        MultiScalePrediction p;
        p.full_logits = extract(full, index);
        for (const auto& [s, v] : side) p.side_logits.emplace(s, extract(v, index));
        return p;
    }

    static RealGrid extract(const nn::Var& v, int index) {
        const int h = v->value.dim(2), w = v->value.dim(3);
        const auto* begin = v->value.ptr() + static_cast<std::size_t>(index) * h * w;
        return RealGrid(h, w, std::vector<double>(begin, begin + static_cast<std::size_t>(h) * w));
    }
};

struct TransformerLayerParams {
    nn::Var ln1_scale, ln1_shift, qkv_w, qkv_b, proj_w, proj_b;
    nn::Var ln2_scale, ln2_shift, fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Projects non-overlapping patch x patch blocks of `features` [B, C, H, W]
/// to D-dimensional tokens and adds positional embeddings. weight: [D, C, P, P].
inline nn::Var patch_embed(const nn::Var& features, const nn::Var& weight, const nn::Var& bias, const nn::Var& pos,
                           int patch) {
    const auto& s = features->value.shape;
    if (s.size() != 4 || s[2] % patch != 0 || s[3] % patch != 0)
        throw ConfigError("patch_embed: feature size " + features->value.shape_str() +
                          " not divisible by patch " + std::to_string(patch));
    return nn::add_broadcast(nn::grid_to_tokens(nn::conv2d(features, weight, bias, patch, 0)), pos);
}

/// Pre-norm transformer block: z' = MHSA(LN(z)) + z; out = FFN(LN(z')) + z'.
inline nn::Var transformer_layer(const nn::Var& tokens, const TransformerLayerParams& p, int heads) {
    const int d = tokens->value.shape.back();
    if (heads < 1 || d % heads != 0) throw ConfigError("transformer_layer: D not divisible by head count");
    auto h = nn::layer_norm(tokens, p.ln1_scale, p.ln1_shift);
    h = nn::linear(nn::attention(nn::linear(h, p.qkv_w, p.qkv_b), heads), p.proj_w, p.proj_b);
    auto z = nn::add(tokens, h);
    auto f = nn::layer_norm(z, p.ln2_scale, p.ln2_shift);
    f = nn::linear(nn::gelu(nn::linear(f, p.fc1_w, p.fc1_b)), p.fc2_w, p.fc2_b);
    return nn::add(z, f);
}

/// Convolutional stem, transformer bottleneck and skip-connected decoder
/// with 1x1 supervision heads.
class SegmentationModel {
public:
    explicit SegmentationModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::mt19937_64 rng(cfg_.init_seed);
        const int stages = static_cast<int>(cfg_.stem_channels.size());
        if (cfg_.full_res_channels > 0) full_res_ = conv_block("full_res", cfg_.full_res_channels, 1, rng);
        int in_ch = 1;
        for (int i = 0; i < stages; ++i) {
            const int ch = cfg_.stem_channels[i];
            const std::string n = "stem" + std::to_string(i);
            stem_.push_back({conv_block(n + ".down", ch, in_ch, rng), conv_block(n + ".conv", ch, ch, rng)});
            in_ch = ch;
        }
        const int d = cfg_.embed_dim;
        const int fp = cfg_.feature_patch();
        embed_w_ = conv_weight("embed", d, in_ch, fp, rng);
        embed_b_ = bias("embed", d);
        pos_ = add_param("pos_embed", normal({cfg_.token_count(), d}, 0.02, rng));
        for (int l = 0; l < cfg_.depth; ++l) {
            const std::string n = "block" + std::to_string(l) + ".";
            TransformerLayerParams p;
            p.ln1_scale = add_param(n + "ln1.scale", nn::Tensor({d}, 1.0));
            p.ln1_shift = add_param(n + "ln1.shift", nn::Tensor({d}, 0.0));
            p.qkv_w = linear_weight(n + "qkv", d, 3 * d, rng);
            p.qkv_b = add_param(n + "qkv.bias", nn::Tensor({3 * d}, 0.0));
            p.proj_w = linear_weight(n + "proj", d, d, rng);
            p.proj_b = add_param(n + "proj.bias", nn::Tensor({d}, 0.0));
            p.ln2_scale = add_param(n + "ln2.scale", nn::Tensor({d}, 1.0));
            p.ln2_shift = add_param(n + "ln2.shift", nn::Tensor({d}, 0.0));
            p.fc1_w = linear_weight(n + "fc1", d, cfg_.mlp_dim, rng);
            p.fc1_b = add_param(n + "fc1.bias", nn::Tensor({cfg_.mlp_dim}, 0.0));
            p.fc2_w = linear_weight(n + "fc2", cfg_.mlp_dim, d, rng);
            p.fc2_b = add_param(n + "fc2.bias", nn::Tensor({d}, 0.0));
            blocks_.push_back(p);
        }
        norm_scale_ = add_param("encoder_norm.scale", nn::Tensor({d}, 1.0));
        norm_shift_ = add_param("encoder_norm.shift", nn::Tensor({d}, 0.0));

        // Decoder level j works at 1/2^(stages-j); the last level is full resolution.
        int prev = d;
        for (int j = 0; j <= stages; ++j) {
            const int skip_ch = j < stages                    ? cfg_.stem_channels[stages - 1 - j]
                                : cfg_.full_res_channels > 0 ? cfg_.full_res_channels
                                                             : 1;
            const int out = cfg_.decoder_channels[j];
            const std::string n = "dec" + std::to_string(j);
            std::vector<ConvBlock> level{conv_block(n + ".conv0", out, prev + skip_ch, rng)};
            for (int k = 1; k < cfg_.decoder_convs; ++k)
                level.push_back(conv_block(n + ".conv" + std::to_string(k), out, out, rng));
            decoder_.push_back(std::move(level));
            const int scale = 1 << (stages - j);
            const bool supervised =
                scale == 1 || std::find(cfg_.supervision_scales.begin(), cfg_.supervision_scales.end(), scale) !=
                                  cfg_.supervision_scales.end();
            if (supervised) {
                const std::string hn = "head" + std::to_string(scale);
                ConvParams head{conv_weight(hn, 1, out, 1, rng), bias(hn, 1)};
                if (cfg_.head_prior > 0) head.b->value.data[0] = std::log(cfg_.head_prior / (1 - cfg_.head_prior));
                heads_.emplace(scale, head);
            }
            prev = out;
        }
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    const std::vector<std::pair<std::string, nn::Var>>& parameters() const noexcept { return params_; }
    const std::vector<TransformerLayerParams>& blocks() const noexcept { return blocks_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& [name, v] : params_) n += v->value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, v] : params_) v->zero_grad();
    }

    /// Batched forward pass; every image must be input_size x input_size.
    ForwardOutputs forward(const std::vector<const RealGrid*>& images) const {
        const int s = cfg_.input_size;
        if (images.empty()) throw InvalidInput("forward: empty batch");
        nn::Tensor x({static_cast<int>(images.size()), 1, s, s});
        for (std::size_t i = 0; i < images.size(); ++i) {
            const RealGrid& img = *images[i];
            if (img.rows() != static_cast<std::size_t>(s) || img.cols() != static_cast<std::size_t>(s))
                throw InvalidInput("forward: expected " + std::to_string(s) + "x" + std::to_string(s) + " input, got " +
                                   std::to_string(img.rows()) + "x" + std::to_string(img.cols()));
            std::copy(img.begin(), img.end(), x.ptr() + i * static_cast<std::size_t>(s) * s);
        }
        const nn::Var input = nn::constant(std::move(x));
        const nn::Var full_skip = full_res_.w ? apply_block(input, full_res_, 1) : input;

        std::vector<nn::Var> skips;
        nn::Var h = input;
        for (const auto& st : stem_) {
            h = apply_block(h, st.down, 2);
            h = apply_block(h, st.conv, 1);
            skips.push_back(h);
        }
        const int fp = cfg_.feature_patch();
        nn::Var z = patch_embed(h, embed_w_, embed_b_, pos_, fp);
        for (const auto& blk : blocks_) z = transformer_layer(z, blk, cfg_.heads);
        z = nn::layer_norm(z, norm_scale_, norm_shift_);
        const int g = cfg_.token_grid();
        h = nn::upsample_nearest(nn::tokens_to_grid(z, g, g), fp);

        ForwardOutputs out;
        const int stages = static_cast<int>(stem_.size());
        for (int j = 0; j <= stages; ++j) {
            if (j > 0) h = cfg_.bilinear_upsampling ? nn::upsample_bilinear(h, 2) : nn::upsample_nearest(h, 2);
            const nn::Var& skip = j < stages ? skips[stages - 1 - j] : full_skip;
            h = nn::concat_channels(h, skip);
            for (const auto& blk : decoder_[j]) h = apply_block(h, blk, 1);
            const int scale = 1 << (stages - j);
            if (auto it = heads_.find(scale); it != heads_.end()) {
                auto logits = nn::conv2d(h, it->second.w, it->second.b, 1, 0);
                if (scale == 1) {
                    out.full = logits;
                } else {
                    out.side.emplace(scale, logits);
                }
            }
        }
        return out;
    }

    MultiScalePrediction predict(const RealGrid& image) const {
        nn::NoGradGuard guard;
        return forward({&image}).sample(0);
    }

private:
    struct ConvParams {
        nn::Var w, b;
    };
    // 3x3 convolution, optional group norm, ReLU.
    struct ConvBlock {
        nn::Var w, b, norm_scale, norm_shift;
    };
    struct StemStage {
        ConvBlock down, conv;
    };

    ConvBlock conv_block(const std::string& name, int out, int in, std::mt19937_64& rng) {
        ConvBlock blk{conv_weight(name, out, in, 3, rng), bias(name, out), nullptr, nullptr};
        if (cfg_.norm_groups > 0) {
            blk.norm_scale = add_param(name + ".norm.scale", nn::Tensor({out}, 1.0));
            blk.norm_shift = add_param(name + ".norm.shift", nn::Tensor({out}, 0.0));
        }
        return blk;
    }

    nn::Var apply_block(const nn::Var& x, const ConvBlock& blk, int stride) const {
        auto h = nn::conv2d(x, blk.w, blk.b, stride, 1);
        if (blk.norm_scale) h = nn::group_norm(h, blk.norm_scale, blk.norm_shift, cfg_.norm_groups);
        return nn::relu(h);
    }

    nn::Var add_param(std::string name, nn::Tensor t) {
        auto v = nn::parameter(std::move(t));
        params_.emplace_back(std::move(name), v);
        return v;
    }
    static nn::Tensor normal(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
        nn::Tensor t(std::move(shape));
        std::normal_distribution<double> dist(0.0, stddev);
        for (auto& v : t.data) v = dist(rng);
        return t;
    }
    nn::Var conv_weight(const std::string& name, int out, int in, int k, std::mt19937_64& rng) {
        return add_param(name + ".weight", normal({out, in, k, k}, std::sqrt(2.0 / (in * k * k)), rng));
    }
    nn::Var bias(const std::string& name, int n) { return add_param(name + ".bias", nn::Tensor({n}, 0.0)); }
    nn::Var linear_weight(const std::string& name, int in, int out, std::mt19937_64& rng) {
        return add_param(name + ".weight", normal({in, out}, std::sqrt(2.0 / (in + out)), rng));
    }

    ModelConfig cfg_;
    std::vector<std::pair<std::string, nn::Var>> params_;
    ConvBlock full_res_{};
    std::vector<StemStage> stem_;
    nn::Var embed_w_, embed_b_, pos_;
    std::vector<TransformerLayerParams> blocks_;
    nn::Var norm_scale_, norm_shift_;
    std::vector<std::vector<ConvBlock>> decoder_;
    std::map<int, ConvParams> heads_;
};

/// Nearest-neighbour subsampling: keeps pixel (r*factor, c*factor).
inline Mask downsample_mask(const Mask& mask, int factor) {
    if (factor < 1 || (factor & (factor - 1)) != 0)
        throw InvalidInput("downsample_mask: factor must be a power of two");
    if (mask.rows() % factor != 0 || mask.cols() % factor != 0)
        throw InvalidInput("downsample_mask: dimensions not divisible by factor " + std::to_string(factor));
    if (factor == 1) return mask;
    const auto f = static_cast<std::size_t>(factor);
    Mask out(mask.rows() / f, mask.cols() / f);
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) = mask(r * f, c * f);
    return out;
}

struct MultiScaleLoss {
    double value = 0.0;
    std::map<int, double> per_scale;
    std::map<int, RealGrid> grads;  ///< d value / d logits, keyed by scale (1 = full)
};

/// Weighted mean of the selected loss over every head with positive weight.
/// Masks are downsampled to each head's scale and hard regions recomputed there.
inline MultiScaleLoss multiscale_loss(const MultiScalePrediction& pred, const Mask& expert, const Mask& nonexpert,
                                      LossKind kind, const LossConfig& cfg, const std::map<int, double>& weights) {
    MultiScaleLoss out;
    double wsum = 0.0;
    for (auto [scale, w] : weights) {
        if (!(w >= 0)) throw ConfigError("multiscale_loss: negative scale weight");
        if (w == 0.0) continue;
        const RealGrid* logits = nullptr;
        if (scale == 1) {
            logits = &pred.full_logits;
        } else if (auto it = pred.side_logits.find(scale); it != pred.side_logits.end()) {
            logits = &it->second;
        }
        if (logits == nullptr || logits->empty())
            throw ConfigError("multiscale_loss: no output for scale 1/" + std::to_string(scale));
        const Mask e = downsample_mask(expert, scale);
        const Mask n = downsample_mask(nonexpert, scale);
        auto lv = evaluate_loss(kind, *logits, e, n, cfg);
        out.per_scale[scale] = lv.value;
        out.value += w * lv.value;
        wsum += w;
        for (auto& g : lv.grad) g *= w;
        out.grads.emplace(scale, std::move(lv.grad));
    }
    if (wsum == 0.0) throw ConfigError("multiscale_loss: all scale weights are zero");
    out.value /= wsum;
    for (auto& [scale, g] : out.grads)
        for (auto& v : g) v /= wsum;
    return out;
}

}  // namespace capseg
