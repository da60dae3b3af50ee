#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "capseg/error.hpp"
#include "capseg/nn/autograd.hpp"

namespace capseg::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;
using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

namespace detail {

inline void require_rank(const Tensor& t, std::size_t r, const char* what) {
    if (t.rank() != r) throw InvalidInput(std::string(what) + ": expected rank " + std::to_string(r) + ", got " + t.shape_str());
}

inline void im2col(const double* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, double* col) {
    for (int ch = 0; ch < c; ++ch) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                double* row = col + static_cast<std::size_t>((ch * k + ki) * k + kj) * ho * wo;
                const double* plane = x + static_cast<std::size_t>(ch) * h * w;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    double* out = row + oy * wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(out, out + wo, 0.0);
                        continue;
                    }
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        out[ox] = (ix >= 0 && ix < w) ? plane[iy * w + ix] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im(const double* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo, double* x) {
    for (int ch = 0; ch < c; ++ch) {
        for (int ki = 0; ki < k; ++ki) {
            for (int kj = 0; kj < k; ++kj) {
                const double* row = col + static_cast<std::size_t>((ch * k + ki) * k + kj) * ho * wo;
                double* plane = x + static_cast<std::size_t>(ch) * h * w;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + ki;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + kj;
                        if (ix >= 0 && ix < w) plane[iy * w + ix] += row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

template <typename F, typename G>
Var unary(const Var& x, F f, G df) {
    Tensor out(x->value.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = f(x->value.data[i]);
    return make_op(std::move(out), {x}, [x, df](Node& self) {
        auto& g = x->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i] * df(x->value.data[i], self.value.data[i]);
    });
}

}  // namespace detail

/// 2D convolution. x: [B, C, H, W], weight: [O, C, k, k], bias: [O].
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
    const Tensor& xv = x->value;
    const Tensor& wv = weight->value;
    detail::require_rank(xv, 4, "conv2d input");
    detail::require_rank(wv, 4, "conv2d weight");
    const int b = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const int o = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != c) throw InvalidInput("conv2d: channel mismatch " + xv.shape_str() + " vs " + wv.shape_str());
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (w + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0) throw InvalidInput("conv2d: input too small");
    const int ckk = c * k * k;
    const int hw = ho * wo;
    const bool direct = (k == 1 && stride == 1 && pad == 0);

    auto cols = std::make_shared<std::vector<double>>();
    if (!direct) cols->resize(static_cast<std::size_t>(b) * ckk * hw);
    Tensor out({b, o, ho, wo});
    ConstMatMap wm(wv.ptr(), o, ckk);
    for (int n = 0; n < b; ++n) {
        const double* src = xv.ptr() + static_cast<std::size_t>(n) * c * h * w;
        const double* colp = src;
        if (!direct) {
            double* dst = cols->data() + static_cast<std::size_t>(n) * ckk * hw;
            detail::im2col(src, c, h, w, k, stride, pad, ho, wo, dst);
            colp = dst;
        }
        MatMap om(out.ptr() + static_cast<std::size_t>(n) * o * hw, o, hw);
        om.noalias() = wm * ConstMatMap(colp, ckk, hw);
        for (int oc = 0; oc < o; ++oc) om.row(oc).array() += bias->value.data[oc];
    }
    return make_op(std::move(out), {x, weight, bias},
                   [x, weight, bias, cols, b, c, h, w, o, k, stride, pad, ho, wo, ckk, hw, direct](Node& self) {
        ConstMatMap wm(weight->value.ptr(), o, ckk);
        std::vector<double> dcol(x->requires_grad ? static_cast<std::size_t>(ckk) * hw : 0);
        for (int n = 0; n < b; ++n) {
            ConstMatMap dout(self.grad.ptr() + static_cast<std::size_t>(n) * o * hw, o, hw);
            const double* colp = direct ? x->value.ptr() + static_cast<std::size_t>(n) * c * h * w
                                        : cols->data() + static_cast<std::size_t>(n) * ckk * hw;
            if (weight->requires_grad) {
                MatMap(weight->ensure_grad().ptr(), o, ckk).noalias() += dout * ConstMatMap(colp, ckk, hw).transpose();
            }
            if (bias->requires_grad) {
                auto& bg = bias->ensure_grad();
                for (int oc = 0; oc < o; ++oc) bg.data[oc] += dout.row(oc).sum();
            }
            if (x->requires_grad) {
                double* dx = x->ensure_grad().ptr() + static_cast<std::size_t>(n) * c * h * w;
                if (direct) {
                    MatMap(dx, ckk, hw).noalias() += wm.transpose() * dout;
                } else {
                    MatMap(dcol.data(), ckk, hw).noalias() = wm.transpose() * dout;
                    detail::col2im(dcol.data(), c, h, w, k, stride, pad, ho, wo, dx);
                }
            }
        }
    });
}

inline Var relu(const Var& x) {
    return detail::unary(x, [](double v) { return v > 0 ? v : 0.0; },
                         [](double in, double) { return in > 0 ? 1.0 : 0.0; });
}

inline Var tanh(const Var& x) {
    return detail::unary(x, [](double v) { return std::tanh(v); },
                         [](double, double out) { return 1.0 - out * out; });
}

/// GELU, tanh approximation.
inline Var gelu(const Var& x) {
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double a = 0.044715;
    return detail::unary(
        x,
        [](double v) { return 0.5 * v * (1.0 + std::tanh(k * (v + a * v * v * v))); },
        [](double v, double) {
            const double t = std::tanh(k * (v + a * v * v * v));
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * a * v * v);
        });
}

inline Var add(const Var& a, const Var& b) {
    if (a->value.shape != b->value.shape) throw InvalidInput("add: shape mismatch");
    Tensor out(a->value.shape);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = a->value.data[i] + b->value.data[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        for (const Var* p : {&a, &b}) {
            if (!(*p)->requires_grad) continue;
            auto& g = (*p)->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i];
        }
    });
}

/// Adds a [N, D] table to every batch item of a [B, N, D] tensor.
inline Var add_broadcast(const Var& x, const Var& table) {
    const auto& xs = x->value.shape;
    detail::require_rank(x->value, 3, "add_broadcast");
    if (table->value.shape != std::vector<int>{xs[1], xs[2]}) throw InvalidInput("add_broadcast: table shape mismatch");
    const std::size_t per = table->value.numel();
    Tensor out(xs);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data[i] = x->value.data[i] + table->value.data[i % per];
    return make_op(std::move(out), {x, table}, [x, table, per](Node& self) {
        if (x->requires_grad) {
            auto& g = x->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[i];
        }
        if (table->requires_grad) {
            auto& g = table->ensure_grad();
            for (std::size_t i = 0; i < self.grad.numel(); ++i) g.data[i % per] += self.grad.data[i];
        }
    });
}

/// Channel concatenation of [B, Ca, H, W] and [B, Cb, H, W].
inline Var concat_channels(const Var& a, const Var& b) {
    const auto& as = a->value.shape;
    const auto& bs = b->value.shape;
    if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3]) {
        throw InvalidInput("concat_channels: incompatible " + a->value.shape_str() + " and " + b->value.shape_str());
    }
    const int n = as[0];
    const std::size_t sa = Tensor::count({as[1], as[2], as[3]});
    const std::size_t sb = Tensor::count({bs[1], bs[2], bs[3]});
    Tensor out({n, as[1] + bs[1], as[2], as[3]});
    for (int i = 0; i < n; ++i) {
        std::copy_n(a->value.ptr() + i * sa, sa, out.ptr() + i * (sa + sb));
        std::copy_n(b->value.ptr() + i * sb, sb, out.ptr() + i * (sa + sb) + sa);
    }
    return make_op(std::move(out), {a, b}, [a, b, n, sa, sb](Node& self) {
        for (int i = 0; i < n; ++i) {
            const double* g = self.grad.ptr() + i * (sa + sb);
            if (a->requires_grad) {
                double* d = a->ensure_grad().ptr() + i * sa;
                for (std::size_t j = 0; j < sa; ++j) d[j] += g[j];
            }
            if (b->requires_grad) {
                double* d = b->ensure_grad().ptr() + i * sb;
                for (std::size_t j = 0; j < sb; ++j) d[j] += g[sa + j];
            }
        }
    });
}

/// Nearest-neighbour upsampling of [B, C, H, W] by an integer factor.
inline Var upsample_nearest(const Var& x, int factor) {
    if (factor == 1) return x;
    const auto& s = x->value.shape;
    detail::require_rank(x->value, 4, "upsample_nearest");
    const int planes = s[0] * s[1], h = s[2], w = s[3];
    const int H = h * factor, W = w * factor;
    Tensor out({s[0], s[1], H, W});
    for (int p = 0; p < planes; ++p) {
        const double* src = x->value.ptr() + static_cast<std::size_t>(p) * h * w;
        double* dst = out.ptr() + static_cast<std::size_t>(p) * H * W;
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) dst[y * W + xx] = src[(y / factor) * w + xx / factor];
    }
    return make_op(std::move(out), {x}, [x, planes, h, w, H, W, factor](Node& self) {
        auto& g = x->ensure_grad();
        for (int p = 0; p < planes; ++p) {
            const double* src = self.grad.ptr() + static_cast<std::size_t>(p) * H * W;
            double* dst = g.ptr() + static_cast<std::size_t>(p) * h * w;
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) dst[(y / factor) * w + xx / factor] += src[y * W + xx];
        }
    });
}

/// Bilinear upsampling of [B, C, H, W] by an integer factor. Output pixel
/// factor*i equals input pixel i; the trailing edge is clamped.
inline Var upsample_bilinear(const Var& x, int factor) {
    if (factor == 1) return x;
    detail::require_rank(x->value, 4, "upsample_bilinear");
    const auto& s = x->value.shape;
    const int planes = s[0] * s[1], h = s[2], w = s[3];
    const int H = h * factor, W = w * factor;
    struct Tap {
        int i0, i1;
        double w1;
    };
    // Output o reads input position o/factor, the lattice a stride-2 conv samples.
    auto taps = [factor](int in, int out) {
        std::vector<Tap> t(out);
        for (int o = 0; o < out; ++o) {
            const double src = std::min(static_cast<double>(o) / factor, static_cast<double>(in - 1));
            const int i0 = std::min(static_cast<int>(src), in - 1);
            const int i1 = std::min(i0 + 1, in - 1);
            t[o] = {i0, i1, src - i0};
        }
        return t;
    };
    auto ty = std::make_shared<std::vector<Tap>>(taps(h, H));
    auto tx = std::make_shared<std::vector<Tap>>(taps(w, W));
    Tensor out({s[0], s[1], H, W});
    for (int p = 0; p < planes; ++p) {
        const double* src = x->value.ptr() + static_cast<std::size_t>(p) * h * w;
        double* dst = out.ptr() + static_cast<std::size_t>(p) * H * W;
        for (int y = 0; y < H; ++y) {
            const Tap& a = (*ty)[y];
            const double* r0 = src + a.i0 * w;
            const double* r1 = src + a.i1 * w;
            for (int xx = 0; xx < W; ++xx) {
                const Tap& b = (*tx)[xx];
                const double top = r0[b.i0] + b.w1 * (r0[b.i1] - r0[b.i0]);
                const double bot = r1[b.i0] + b.w1 * (r1[b.i1] - r1[b.i0]);
                dst[y * W + xx] = top + a.w1 * (bot - top);
            }
        }
    }
    return make_op(std::move(out), {x}, [x, ty, tx, planes, h, w, H, W](Node& self) {
        auto& g = x->ensure_grad();
        for (int p = 0; p < planes; ++p) {
            const double* go = self.grad.ptr() + static_cast<std::size_t>(p) * H * W;
            double* gi = g.ptr() + static_cast<std::size_t>(p) * h * w;
            for (int y = 0; y < H; ++y) {
                const Tap& a = (*ty)[y];
                for (int xx = 0; xx < W; ++xx) {
                    const Tap& b = (*tx)[xx];
                    const double v = go[y * W + xx];
                    gi[a.i0 * w + b.i0] += v * (1 - a.w1) * (1 - b.w1);
                    gi[a.i0 * w + b.i1] += v * (1 - a.w1) * b.w1;
                    gi[a.i1 * w + b.i0] += v * a.w1 * (1 - b.w1);
                    gi[a.i1 * w + b.i1] += v * a.w1 * b.w1;
                }
            }
        }
    });
}

/// [B, D, h, w] feature grid to [B, h*w, D] tokens in raster order.
inline Var grid_to_tokens(const Var& x) {
    detail::require_rank(x->value, 4, "grid_to_tokens");
    const auto& s = x->value.shape;
    const int b = s[0], d = s[1], n = s[2] * s[3];
    Tensor out({b, n, d});
    for (int i = 0; i < b; ++i) {
        MatMap(out.ptr() + static_cast<std::size_t>(i) * n * d, n, d) =
            ConstMatMap(x->value.ptr() + static_cast<std::size_t>(i) * d * n, d, n).transpose();
    }
    return make_op(std::move(out), {x}, [x, b, d, n](Node& self) {
        auto& g = x->ensure_grad();
        for (int i = 0; i < b; ++i) {
            MatMap(g.ptr() + static_cast<std::size_t>(i) * d * n, d, n) +=
                ConstMatMap(self.grad.ptr() + static_cast<std::size_t>(i) * n * d, n, d).transpose();
        }
    });
}

/// [B, N, D] tokens back to a [B, D, h, w] grid (N = h*w).
inline Var tokens_to_grid(const Var& t, int h, int w) {
    detail::require_rank(t->value, 3, "tokens_to_grid");
    const int b = t->value.dim(0), n = t->value.dim(1), d = t->value.dim(2);
    if (n != h * w) throw InvalidInput("tokens_to_grid: token count does not match grid");
    Tensor out({b, d, h, w});
    for (int i = 0; i < b; ++i) {
        MatMap(out.ptr() + static_cast<std::size_t>(i) * d * n, d, n) =
            ConstMatMap(t->value.ptr() + static_cast<std::size_t>(i) * n * d, n, d).transpose();
    }
    return make_op(std::move(out), {t}, [t, b, d, n](Node& self) {
        auto& g = t->ensure_grad();
        for (int i = 0; i < b; ++i) {
            MatMap(g.ptr() + static_cast<std::size_t>(i) * n * d, n, d) +=
                ConstMatMap(self.grad.ptr() + static_cast<std::size_t>(i) * d * n, d, n).transpose();
        }
    });
}

/// Affine map over the last axis: x [..., Din] · weight [Din, Dout] + bias [Dout].
inline Var linear(const Var& x, const Var& weight, const Var& bias) {
    const int din = weight->value.dim(0), dout = weight->value.dim(1);
    if (x->value.shape.back() != din) throw InvalidInput("linear: input width mismatch");
    const int m = static_cast<int>(x->value.numel() / din);
    auto shape = x->value.shape;
    shape.back() = dout;
    Tensor out(shape);
    MatMap om(out.ptr(), m, dout);
    om.noalias() = ConstMatMap(x->value.ptr(), m, din) * ConstMatMap(weight->value.ptr(), din, dout);
    om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias->value.ptr(), dout);
    return make_op(std::move(out), {x, weight, bias}, [x, weight, bias, m, din, dout](Node& self) {
        ConstMatMap g(self.grad.ptr(), m, dout);
        if (weight->requires_grad)
            MatMap(weight->ensure_grad().ptr(), din, dout).noalias() += ConstMatMap(x->value.ptr(), m, din).transpose() * g;
        if (bias->requires_grad)
            Eigen::Map<Eigen::RowVectorXd>(bias->ensure_grad().ptr(), dout) += g.colwise().sum();
        if (x->requires_grad)
            MatMap(x->ensure_grad().ptr(), m, din).noalias() += g * ConstMatMap(weight->value.ptr(), din, dout).transpose();
    });
}

/// Layer normalisation over the last axis with learned scale and shift.
inline Var layer_norm(const Var& x, const Var& scale, const Var& shift, double eps = 1e-5) {
    const int d = x->value.shape.back();
    const int m = static_cast<int>(x->value.numel() / d);
    Tensor out(x->value.shape);
    auto xhat = std::make_shared<std::vector<double>>(x->value.numel());
    auto inv_std = std::make_shared<std::vector<double>>(m);
    for (int r = 0; r < m; ++r) {
        const double* in = x->value.ptr() + static_cast<std::size_t>(r) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += in[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (int j = 0; j < d; ++j) {
            const double xh = (in[j] - mean) * is;
            (*xhat)[static_cast<std::size_t>(r) * d + j] = xh;
            out.data[static_cast<std::size_t>(r) * d + j] = xh * scale->value.data[j] + shift->value.data[j];
        }
    }
    return make_op(std::move(out), {x, scale, shift}, [x, scale, shift, xhat, inv_std, m, d](Node& self) {
        std::vector<double> gx(d);
        for (int r = 0; r < m; ++r) {
            const double* g = self.grad.ptr() + static_cast<std::size_t>(r) * d;
            const double* xh = xhat->data() + static_cast<std::size_t>(r) * d;
            if (scale->requires_grad) {
                auto& gs = scale->ensure_grad();
                for (int j = 0; j < d; ++j) gs.data[j] += g[j] * xh[j];
            }
            if (shift->requires_grad) {
                auto& gb = shift->ensure_grad();
                for (int j = 0; j < d; ++j) gb.data[j] += g[j];
            }
            if (x->requires_grad) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (int j = 0; j < d; ++j) {
                    gx[j] = g[j] * scale->value.data[j];
                    sum_g += gx[j];
                    sum_gx += gx[j] * xh[j];
                }
                double* dx = x->ensure_grad().ptr() + static_cast<std::size_t>(r) * d;
                const double is = (*inv_std)[r];
                for (int j = 0; j < d; ++j) dx[j] += is * (gx[j] - sum_g / d - xh[j] * sum_gx / d);
            }
        }
    });
}

/// Group normalisation of [B, C, H, W] with per-channel scale and shift.
inline Var group_norm(const Var& x, const Var& scale, const Var& shift, int groups, double eps = 1e-5) {
    detail::require_rank(x->value, 4, "group_norm");
    const int b = x->value.dim(0), c = x->value.dim(1);
    const int hw = x->value.dim(2) * x->value.dim(3);
    if (groups < 1 || c % groups != 0) throw ConfigError("group_norm: channels not divisible by groups");
    const int cg = c / groups;
    const std::size_t gsize = static_cast<std::size_t>(cg) * hw;
    Tensor out(x->value.shape);
    auto xhat = std::make_shared<std::vector<double>>(x->value.numel());
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b) * groups);
    for (int n = 0; n < b; ++n) {
        for (int g = 0; g < groups; ++g) {
            const std::size_t off = (static_cast<std::size_t>(n) * c + static_cast<std::size_t>(g) * cg) * hw;
            const double* in = x->value.ptr() + off;
            double mean = 0.0;
            for (std::size_t j = 0; j < gsize; ++j) mean += in[j];
            mean /= static_cast<double>(gsize);
            double var = 0.0;
            for (std::size_t j = 0; j < gsize; ++j) var += (in[j] - mean) * (in[j] - mean);
            var /= static_cast<double>(gsize);
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[static_cast<std::size_t>(n) * groups + g] = is;
            for (std::size_t j = 0; j < gsize; ++j) {
                const int ch = g * cg + static_cast<int>(j / hw);
                const double xh = (in[j] - mean) * is;
                (*xhat)[off + j] = xh;
                out.data[off + j] = xh * scale->value.data[ch] + shift->value.data[ch];
            }
        }
    }
    return make_op(std::move(out), {x, scale, shift}, [x, scale, shift, xhat, inv_std, b, c, hw, groups, cg, gsize](Node& self) {
        std::vector<double> gx(gsize);
        double* gscale = scale->requires_grad ? scale->ensure_grad().ptr() : nullptr;
        double* gshift = shift->requires_grad ? shift->ensure_grad().ptr() : nullptr;
        for (int n = 0; n < b; ++n) {
            for (int g = 0; g < groups; ++g) {
                const std::size_t off = (static_cast<std::size_t>(n) * c + static_cast<std::size_t>(g) * cg) * hw;
                const double* go = self.grad.ptr() + off;
                const double* xh = xhat->data() + off;
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t j = 0; j < gsize; ++j) {
                    const int ch = g * cg + static_cast<int>(j / hw);
                    if (gscale) gscale[ch] += go[j] * xh[j];
                    if (gshift) gshift[ch] += go[j];
                    gx[j] = go[j] * scale->value.data[ch];
                    sum_g += gx[j];
                    sum_gx += gx[j] * xh[j];
                }
                if (!x->requires_grad) continue;
                double* dx = x->ensure_grad().ptr() + off;
                const double is = (*inv_std)[static_cast<std::size_t>(n) * groups + g];
                const double m = static_cast<double>(gsize);
                for (std::size_t j = 0; j < gsize; ++j) dx[j] += is * (gx[j] - sum_g / m - xh[j] * sum_gx / m);
            }
        }
    });
}

/// Row-softmax attention probabilities for one batch item and head.
/// qkv: [B, N, 3D] packed as [queries | keys | values].
inline RowMatrix attention_probabilities(const Tensor& qkv, int heads, int batch, int head) {
    const int n = qkv.dim(1), d = qkv.dim(2) / 3, dh = d / heads;
    const double* base = qkv.ptr() + static_cast<std::size_t>(batch) * n * 3 * d;
    ConstStridedMap q(base + head * dh, n, dh, Eigen::OuterStride<>(3 * d));
    ConstStridedMap k(base + d + head * dh, n, dh, Eigen::OuterStride<>(3 * d));
    RowMatrix s = (q * k.transpose()) / std::sqrt(static_cast<double>(dh));
    for (int r = 0; r < n; ++r) {
        const double mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
    }
    return s;
}

/// Multi-head scaled dot-product self-attention on packed projections.
/// qkv: [B, N, 3D] -> [B, N, D].
inline Var attention(const Var& qkv, int heads) {
    detail::require_rank(qkv->value, 3, "attention");
    const int b = qkv->value.dim(0), n = qkv->value.dim(1), d3 = qkv->value.dim(2);
    if (d3 % 3 != 0) throw InvalidInput("attention: packed width must be 3*D");
    const int d = d3 / 3;
    if (heads < 1 || d % heads != 0) throw ConfigError("attention: embedding width not divisible by head count");
    const int dh = d / heads;
    auto probs = std::make_shared<std::vector<RowMatrix>>();
    probs->reserve(static_cast<std::size_t>(b) * heads);
    Tensor out({b, n, d});
    for (int i = 0; i < b; ++i) {
        const double* base = qkv->value.ptr() + static_cast<std::size_t>(i) * n * d3;
        for (int h = 0; h < heads; ++h) {
            probs->push_back(attention_probabilities(qkv->value, heads, i, h));
            ConstStridedMap v(base + 2 * d + h * dh, n, dh, Eigen::OuterStride<>(d3));
            StridedMap o(out.ptr() + static_cast<std::size_t>(i) * n * d + h * dh, n, dh, Eigen::OuterStride<>(d));
            o.noalias() = probs->back() * v;
        }
    }
    return make_op(std::move(out), {qkv}, [qkv, probs, b, n, d, d3, heads, dh](Node& self) {
        auto& g = qkv->ensure_grad();
        const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
        for (int i = 0; i < b; ++i) {
            const double* base = qkv->value.ptr() + static_cast<std::size_t>(i) * n * d3;
            double* gbase = g.ptr() + static_cast<std::size_t>(i) * n * d3;
            for (int h = 0; h < heads; ++h) {
                const RowMatrix& p = (*probs)[static_cast<std::size_t>(i) * heads + h];
                ConstStridedMap q(base + h * dh, n, dh, Eigen::OuterStride<>(d3));
                ConstStridedMap k(base + d + h * dh, n, dh, Eigen::OuterStride<>(d3));
                ConstStridedMap v(base + 2 * d + h * dh, n, dh, Eigen::OuterStride<>(d3));
                ConstStridedMap go(self.grad.ptr() + static_cast<std::size_t>(i) * n * d + h * dh, n, dh,
                                   Eigen::OuterStride<>(d));
                StridedMap gq(gbase + h * dh, n, dh, Eigen::OuterStride<>(d3));
                StridedMap gk(gbase + d + h * dh, n, dh, Eigen::OuterStride<>(d3));
                StridedMap gv(gbase + 2 * d + h * dh, n, dh, Eigen::OuterStride<>(d3));
                gv.noalias() += p.transpose() * go;
                RowMatrix gp = go * v.transpose();
                RowMatrix gs = p.array() * (gp.colwise() - (gp.array() * p.array()).rowwise().sum().matrix()).array();
                gs *= scale;
                gq.noalias() += gs * k;
                gk.noalias() += gs.transpose() * q;
            }
        }
    });
}

/// Sum of all elements times a constant, as a scalar node (used by tests and
/// toy models to close a graph).
inline Var weighted_sum(const Var& x, const Tensor& weights) {
    if (weights.numel() != x->value.numel()) throw InvalidInput("weighted_sum: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < weights.numel(); ++i) s += weights.data[i] * x->value.data[i];
    return make_op(Tensor({1}, {s}), {x}, [x, weights](Node& self) {
        auto& g = x->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g.data[i] += self.grad.data[0] * weights.data[i];
    });
}

}  // namespace capseg::nn
