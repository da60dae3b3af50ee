#pragma once

// Independent reference implementations and fixtures shared by the unit
// tests and the acceptance runner. The oracles are deliberately naive.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "capseg/grid.hpp"
#include "capseg/nn/ops.hpp"

namespace capseg::testing {

namespace fs = std::filesystem;

inline Mask random_mask(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double p) {
    std::bernoulli_distribution on(p);
    Mask m(rows, cols);
    for (auto& v : m) v = on(rng) ? 1 : 0;
    return m;
}

/// Random blob-ish mask: union of a few random rectangles.
inline Mask random_blobs(std::mt19937_64& rng, std::size_t rows, std::size_t cols, int count) {
    Mask m(rows, cols);
    std::uniform_int_distribution<std::size_t> rr(0, rows - 1), cc(0, cols - 1);
    for (int k = 0; k < count; ++k) {
        std::size_t r0 = rr(rng), r1 = rr(rng), c0 = cc(rng), c1 = cc(rng);
        if (r0 > r1) std::swap(r0, r1);
        if (c0 > c1) std::swap(c0, c1);
        for (std::size_t r = r0; r <= r1; ++r)
            for (std::size_t c = c0; c <= c1; ++c) m(r, c) = 1;
    }
    return m;
}

inline RealGrid random_grid(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    RealGrid g(rows, cols);
    for (auto& v : g) v = u(rng);
    return g;
}

// ------------------------------------------------------------------ oracles

inline Mask oracle_dilate(const Mask& m, int k) {
    const long h = k / 2, rows = static_cast<long>(m.rows()), cols = static_cast<long>(m.cols());
    Mask out(m.rows(), m.cols());
    for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) {
            bool any = false;
            for (long dr = -h; dr <= h && !any; ++dr)
                for (long dc = -h; dc <= h && !any; ++dc) {
                    const long y = r + dr, x = c + dc;
                    if (y >= 0 && y < rows && x >= 0 && x < cols && m(y, x)) any = true;
                }
            out(r, c) = any ? 1 : 0;
        }
    return out;
}

/// 2|g∩p|/(|g|+|p|) from integer counts; both empty gives 1.
inline double oracle_dice(const Mask& g, const Mask& p) {
    long inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        inter += (g[i] && p[i]) ? 1 : 0;
        a += g[i] ? 1 : 0;
        b += p[i] ? 1 : 0;
    }
    if (a + b == 0) return 1.0;
    return static_cast<double>(2 * inter) / static_cast<double>(a + b);
}

struct Pt {
    double y, x;
};

inline std::vector<Pt> oracle_boundary(const Mask& m, double dy, double dx) {
    std::vector<Pt> out;
    const long rows = static_cast<long>(m.rows()), cols = static_cast<long>(m.cols());
    auto fg = [&](long r, long c) { return r >= 0 && r < rows && c >= 0 && c < cols && m(r, c) != 0; };
    for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c)
            if (fg(r, c) && !(fg(r - 1, c) && fg(r + 1, c) && fg(r, c - 1) && fg(r, c + 1)))
                out.push_back({r * dy, c * dx});
    return out;
}

/// All pairwise distances, nearest per point in each direction, pooled.
inline std::vector<double> oracle_pooled(const Mask& g, const Mask& p, double dy, double dx) {
    const auto a = oracle_boundary(g, dy, dx), b = oracle_boundary(p, dy, dx);
    std::vector<std::vector<double>> d(a.size(), std::vector<double>(b.size()));
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) d[i][j] = std::hypot(a[i].y - b[j].y, a[i].x - b[j].x);
    std::vector<double> pooled;
    for (std::size_t i = 0; i < a.size(); ++i) pooled.push_back(*std::min_element(d[i].begin(), d[i].end()));
    for (std::size_t j = 0; j < b.size(); ++j) {
        double best = INFINITY;
        for (std::size_t i = 0; i < a.size(); ++i) best = std::min(best, d[i][j]);
        pooled.push_back(best);
    }
    return pooled;
}

inline double oracle_hd(const Mask& g, const Mask& p, double dy = 1, double dx = 1) {
    const auto v = oracle_pooled(g, p, dy, dx);
    return *std::max_element(v.begin(), v.end());
}

/// Linear-interpolation percentile, position q*(n-1) in the sorted sample.
inline double oracle_hd95(const Mask& g, const Mask& p, double dy = 1, double dx = 1) {
    auto v = oracle_pooled(g, p, dy, dx);
    std::sort(v.begin(), v.end());
    const double pos = 0.95 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline double oracle_sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

inline double oracle_focal(double prob, int target, double beta, double gamma, double eps) {
    const double pt = target ? prob : 1.0 - prob;
    return -beta * std::pow(1.0 - pt, gamma) * std::log(pt + eps);
}

inline double oracle_mean_focal(const RealGrid& logits, const Mask& t, double beta, double gamma, double eps) {
    double s = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) s += oracle_focal(oracle_sigmoid(logits[i]), t[i], beta, gamma, eps);
    return s / static_cast<double>(logits.size());
}

inline double oracle_mean_bce(const RealGrid& logits, const Mask& t, double eps) {
    return oracle_mean_focal(logits, t, 1.0, 0.0, eps);
}

// ------------------------------------------------------------------ toy model

/// Two conv layers with a tanh between them: 3x3 conv (2 -> hidden), 1x1 conv
/// (hidden -> 1). Produces one logit per pixel of an 8x8 input.
struct ToyNet {
    nn::Var w1, b1, w2, b2;
    nn::Var input;

    ToyNet(std::mt19937_64& rng, int size, int hidden = 4) {
        std::normal_distribution<double> n(0.0, 0.5);
        auto fill = [&](std::vector<int> shape) {
            nn::Tensor t(std::move(shape));
            for (auto& v : t.data) v = n(rng);
            return t;
        };
        w1 = nn::parameter(fill({hidden, 2, 3, 3}));
        b1 = nn::parameter(fill({hidden}));
        w2 = nn::parameter(fill({1, hidden, 1, 1}));
        b2 = nn::parameter(fill({1}));
        input = nn::constant(fill({1, 2, size, size}));
    }

    std::vector<nn::Var> params() const { return {w1, b1, w2, b2}; }

    nn::Var forward() const {
        return nn::conv2d(nn::tanh(nn::conv2d(input, w1, b1, 1, 1)), w2, b2, 1, 0);
    }

    RealGrid logits() const {
        const auto out = forward();
        const int h = out->value.dim(2), w = out->value.dim(3);
        return RealGrid(h, w, out->value.data);
    }
};

/// Loss value and d loss / d logits for a fixed grid of logits.
using LossFn = std::function<std::pair<double, RealGrid>(const RealGrid&)>;

/// Largest elementwise relative error between the backpropagated parameter
/// gradient and central differences with step h.
inline double toy_gradient_error(ToyNet& net, const LossFn& loss, double h = 1e-4) {
    for (auto& p : net.params()) p->grad = nn::Tensor();
    auto out = net.forward();
    const auto [value, dlogits] = loss(RealGrid(out->value.dim(2), out->value.dim(3), out->value.data));
    (void)value;
    out->ensure_grad();
    out->grad.data = dlogits.storage();
    nn::backward(std::span<const nn::Var>(&out, 1));

    double worst = 0.0;
    for (auto& p : net.params()) {
        for (std::size_t i = 0; i < p->value.data.size(); ++i) {
            const double keep = p->value.data[i];
            p->value.data[i] = keep + h;
            const double up = loss(net.logits()).first;
            p->value.data[i] = keep - h;
            const double down = loss(net.logits()).first;
            p->value.data[i] = keep;
            const double numeric = (up - down) / (2 * h);
            const double analytic = p->grad.data[i];
            const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            worst = std::max(worst, std::abs(numeric - analytic) / scale);
        }
    }
    return worst;
}

// ------------------------------------------------------------------ files

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = fs::temp_directory_path() / ("capseg_" + tag + "_" + std::to_string(rd()));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

inline std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
    std::ifstream in(path);
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.emplace_back();
        rows.push_back(cells);
    }
    return rows;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace capseg::testing
