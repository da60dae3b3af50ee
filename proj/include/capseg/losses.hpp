#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "capseg/error.hpp"
#include "capseg/grid.hpp"
#include "capseg/morphology.hpp"

namespace capseg {

/// How the annotation-variability term of the adaptive gamma is measured.
/// `literal` takes the foreground fraction of the non-expert mask;
/// `disagreement` takes the fraction of pixels where the two annotators differ.
enum class VariabilityMode { literal, disagreement };

enum class LossKind { adaptive_focal, standard_focal, ag_bce };

inline std::string_view to_string(LossKind k) {
    switch (k) {
        case LossKind::adaptive_focal: return "adaptive_focal";
        case LossKind::standard_focal: return "focal";
        case LossKind::ag_bce: return "ag_bce";
    }
    return "?";
}

inline std::optional<LossKind> parse_loss_kind(std::string_view s) {
    if (s == "adaptive_focal") return LossKind::adaptive_focal;
    if (s == "focal" || s == "standard_focal") return LossKind::standard_focal;
    if (s == "ag_bce") return LossKind::ag_bce;
    return std::nullopt;
}

inline std::string_view to_string(VariabilityMode m) {
    return m == VariabilityMode::literal ? "literal" : "disagreement";
}

inline std::optional<VariabilityMode> parse_variability_mode(std::string_view s) {
    if (s == "literal") return VariabilityMode::literal;
    if (s == "disagreement") return VariabilityMode::disagreement;
    return std::nullopt;
}

struct LossConfig {
    double beta = 1.0;           ///< balancing factor
    double gamma_f = 2.0;        ///< fixed focal exponent
    double epsilon = 1e-7;       ///< log stabiliser; 0 selects the exact log-sigmoid path
    int kernel_size = 5;         ///< hard-region dilation kernel side
    double gamma_min = 0.05;
    double gamma_max = 2.0;
    VariabilityMode variability_mode = VariabilityMode::literal;
    double hard_weight = 4.0;    ///< AG-BCE weight on the hard region
    double easy_weight = 1.0;    ///< AG-BCE weight on the easy region
    double dice_smooth = 1.0;

    void validate() const {
        if (!(beta > 0)) throw ConfigError("beta must be > 0");
        if (!(gamma_f >= 0)) throw ConfigError("gamma_f must be >= 0");
        if (!(epsilon >= 0 && epsilon < 1e-3)) throw ConfigError("epsilon must lie in [0, 1e-3)");
        if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("kernel_size must be odd and >= 1");
        if (!(gamma_min > 0 && gamma_min <= gamma_max)) throw ConfigError("need 0 < gamma_min <= gamma_max");
        if (!(hard_weight > 0 && easy_weight > 0)) throw ConfigError("AG-BCE weights must be > 0");
        if (!(dice_smooth >= 0)) throw ConfigError("dice_smooth must be >= 0");
    }
};

/// Scalar loss with its gradient with respect to the logits.
struct LossValue {
    double value = 0.0;
    RealGrid grad;
};

/// Intermediate quantities of one adaptive focal loss evaluation.
struct AdaptiveLossBreakdown {
    Mask hard_map;
    Mask easy_map;
    double hard_loss = 0.0;
    double easy_loss = 0.0;
    double sample_difficulty = 0.0;
    double annotation_variability = 0.0;
    double gamma_a = 1.0;
    std::size_t n_pixels = 0;
    double total = 0.0;

    /// Recomputes the final loss from the stored fields.
    double recompute_total() const {
        return (gamma_a * hard_loss + (1.0 / gamma_a) * easy_loss) / static_cast<double>(n_pixels);
    }
};

struct AdaptiveLossResult {
    double value = 0.0;
    RealGrid grad;
    AdaptiveLossBreakdown breakdown;
};

inline double logistic(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
    return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline RealGrid logistic_probabilities(const RealGrid& logits) {
    require_finite(logits, "logistic_probabilities");
    RealGrid out(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logistic(logits[i]);
    return out;
}

namespace detail {

struct PixelFocal {
    double value;
    double dlogit;
};

// Focal term for one pixel evaluated from its logit. With epsilon == 0 the
// log is taken as -softplus(-u) so saturated logits stay finite.
inline PixelFocal focal_from_logit(double z, bool positive, double beta, double gamma, double eps) {
    const double s = positive ? 1.0 : -1.0;
    const double u = s * z;
    const double pt = logistic(u);
    const double q = logistic(-u);
    const double log_pt = eps == 0.0 ? -softplus(-u) : std::log(pt + eps);
    const double qg = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    const double ratio = eps == 0.0 ? 1.0 : pt / (pt + eps);
    PixelFocal out;
    out.value = -beta * qg * log_pt;
    out.dlogit = -beta * s * (qg * q * ratio - gamma * qg * pt * log_pt);
    return out;
}

inline void check_loss_inputs(const RealGrid& logits, const Mask& a, const Mask& b, const char* what) {
    require_same_shape(logits, a, what);
    require_same_shape(logits, b, what);
    require_binary(a, what);
    require_binary(b, what);
    require_finite(logits, what);
    if (logits.empty()) throw InvalidInput(std::string(what) + ": empty input");
}

}  // namespace detail

/// Per-pixel focal loss from probabilities; unreduced.
inline RealGrid focal_loss_map(const RealGrid& probs, const Mask& targets, const LossConfig& cfg) {
    require_same_shape(probs, targets, "focal_loss_map");
    require_binary(targets, "focal_loss_map");
    RealGrid out(probs.rows(), probs.cols());
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double y = targets[i] ? 1.0 : 0.0;
        const double pt = probs[i] * y + (1.0 - probs[i]) * (1.0 - y);
        const double qg = cfg.gamma_f == 0.0 ? 1.0 : std::pow(1.0 - pt, cfg.gamma_f);
        out[i] = -cfg.beta * qg * std::log(pt + cfg.epsilon);
        if (out[i] == 0.0) out[i] = 0.0;  // normalise -0
    }
    return out;
}

/// Pixels where the annotators disagree, dilated by a square kernel.
inline Mask hard_region_map(const Mask& expert, const Mask& nonexpert, int kernel_size) {
    require_same_shape(expert, nonexpert, "hard_region_map");
    require_binary(expert, "hard_region_map");
    require_binary(nonexpert, "hard_region_map");
    return dilate(mask_xor(expert, nonexpert), kernel_size);
}

inline double sample_difficulty(const RealGrid& probs) {
    if (probs.empty()) throw InvalidInput("sample_difficulty: empty tensor");
    double sum = 0.0;
    for (double p : probs) sum += p;
    return 1.0 - sum / static_cast<double>(probs.size());
}

inline double annotation_variability(const Mask& nonexpert, const Mask& expert, VariabilityMode mode) {
    require_same_shape(nonexpert, expert, "annotation_variability");
    if (nonexpert.empty()) throw InvalidInput("annotation_variability: empty mask");
    require_binary(nonexpert, "annotation_variability");
    require_binary(expert, "annotation_variability");
    const std::size_t count = mode == VariabilityMode::literal ? count_foreground(nonexpert)
                                                               : count_foreground(mask_xor(nonexpert, expert));
    return static_cast<double>(count) / static_cast<double>(nonexpert.size());
}

inline double adaptive_gamma(double difficulty, double variability, const LossConfig& cfg) {
    return std::clamp(difficulty + variability, cfg.gamma_min, cfg.gamma_max);
}

/// Adaptive focal loss. Hard pixels (dilated annotator disagreement) are
/// weighted by gamma_a, easy pixels by 1/gamma_a, where gamma_a is the clamped
/// sum of sample difficulty and annotation variability. gamma_a is held
/// constant in the gradient. `gamma_override` replaces the computed gamma_a.
inline AdaptiveLossResult adaptive_focal_loss(const RealGrid& logits, const Mask& expert, const Mask& nonexpert,
                                              const LossConfig& cfg,
                                              std::optional<double> gamma_override = std::nullopt) {
    detail::check_loss_inputs(logits, expert, nonexpert, "adaptive_focal_loss");
    AdaptiveLossResult res;
    auto& bd = res.breakdown;
    bd.n_pixels = logits.size();
    bd.hard_map = hard_region_map(expert, nonexpert, cfg.kernel_size);
    bd.easy_map = Mask(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < bd.hard_map.size(); ++i) bd.easy_map[i] = 1 - bd.hard_map[i];

    RealGrid dfocal(logits.rows(), logits.cols());
    double prob_sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto px = detail::focal_from_logit(logits[i], expert[i] != 0, cfg.beta, cfg.gamma_f, cfg.epsilon);
        dfocal[i] = px.dlogit;
        if (bd.hard_map[i]) {
            bd.hard_loss += px.value;
        } else {
            bd.easy_loss += px.value;
        }
        prob_sum += logistic(logits[i]);
    }
    bd.sample_difficulty = 1.0 - prob_sum / static_cast<double>(bd.n_pixels);
    bd.annotation_variability = annotation_variability(nonexpert, expert, cfg.variability_mode);
    bd.gamma_a = gamma_override ? *gamma_override
                                : adaptive_gamma(bd.sample_difficulty, bd.annotation_variability, cfg);
    if (!(bd.gamma_a > 0) || !std::isfinite(bd.gamma_a)) throw InvalidInput("adaptive gamma must be positive");
    bd.total = bd.recompute_total();

    const double n = static_cast<double>(bd.n_pixels);
    res.grad = RealGrid(logits.rows(), logits.cols());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double w = bd.hard_map[i] ? bd.gamma_a : 1.0 / bd.gamma_a;
        res.grad[i] = w * dfocal[i] / n;
    }
    res.value = bd.total;
    return res;
}

/// Fixed-gamma focal loss averaged over all pixels.
inline LossValue standard_focal_loss(const RealGrid& logits, const Mask& targets, const LossConfig& cfg) {
    detail::check_loss_inputs(logits, targets, targets, "standard_focal_loss");
    LossValue out{0.0, RealGrid(logits.rows(), logits.cols())};
    const double n = static_cast<double>(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto px = detail::focal_from_logit(logits[i], targets[i] != 0, cfg.beta, cfg.gamma_f, cfg.epsilon);
        out.value += px.value;
        out.grad[i] = px.dlogit / n;
    }
    out.value /= n;
    return out;
}

/// Annotation-guided BCE: BCE against the expert mask with a static weight on
/// the hard region and another on the easy region.
inline LossValue ag_bce_loss(const RealGrid& logits, const Mask& expert, const Mask& nonexpert,
                             const LossConfig& cfg) {
    detail::check_loss_inputs(logits, expert, nonexpert, "ag_bce_loss");
    const Mask hard = hard_region_map(expert, nonexpert, cfg.kernel_size);
    LossValue out{0.0, RealGrid(logits.rows(), logits.cols())};
    double hard_sum = 0.0, easy_sum = 0.0;
    const double n = static_cast<double>(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const auto px = detail::focal_from_logit(logits[i], expert[i] != 0, 1.0, 0.0, cfg.epsilon);
        const double w = hard[i] ? cfg.hard_weight : cfg.easy_weight;
        (hard[i] ? hard_sum : easy_sum) += px.value;
        out.grad[i] = w * px.dlogit / n;
    }
    out.value = (cfg.hard_weight * hard_sum + cfg.easy_weight * easy_sum) / n;
    return out;
}

/// Mean binary cross-entropy from probabilities, -log(p_t + eps) per pixel.
inline double mean_bce(const RealGrid& probs, const Mask& targets, double eps) {
    require_same_shape(probs, targets, "mean_bce");
    if (probs.empty()) throw InvalidInput("mean_bce: empty input");
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        sum -= targets[i] ? std::log(probs[i] + eps) : std::log(1.0 - probs[i] + eps);
    }
    return sum / static_cast<double>(probs.size());
}

/// Soft Dice loss on probabilities; gradient is with respect to the probabilities.
/// Both sums zero with zero smoothing counts as perfect agreement.
inline LossValue dice_loss(const RealGrid& probs, const Mask& targets, double smooth = 1.0) {
    require_same_shape(probs, targets, "dice_loss");
    require_binary(targets, "dice_loss");
    double inter = 0.0, psum = 0.0, tsum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        inter += probs[i] * targets[i];
        psum += probs[i];
        tsum += targets[i];
    }
    LossValue out{0.0, RealGrid(probs.rows(), probs.cols())};
    const double den = psum + tsum + smooth;
    if (den == 0.0) return out;
    const double num = 2.0 * inter + smooth;
    out.value = 1.0 - num / den;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        out.grad[i] = -(2.0 * targets[i] * den - num) / (den * den);
    }
    return out;
}

/// Dice loss evaluated on logits, gradient with respect to the logits.
inline LossValue dice_loss_logits(const RealGrid& logits, const Mask& targets, double smooth = 1.0) {
    const RealGrid probs = logistic_probabilities(logits);
    LossValue out = dice_loss(probs, targets, smooth);
    for (std::size_t i = 0; i < probs.size(); ++i) out.grad[i] *= probs[i] * (1.0 - probs[i]);
    return out;
}

/// Dispatches to the selected loss. Standard focal uses the expert mask as target.
inline LossValue evaluate_loss(LossKind kind, const RealGrid& logits, const Mask& expert, const Mask& nonexpert,
                               const LossConfig& cfg) {
    switch (kind) {
        case LossKind::adaptive_focal: {
            auto r = adaptive_focal_loss(logits, expert, nonexpert, cfg);
            return {r.value, std::move(r.grad)};
        }
        case LossKind::standard_focal:
            return standard_focal_loss(logits, expert, cfg);
        case LossKind::ag_bce:
            return ag_bce_loss(logits, expert, nonexpert, cfg);
    }
    throw InvalidInput("unknown loss kind");
}

}  // namespace capseg
