#pragma once

/// @file graph.hpp
/// @brief Tape-based reverse-mode differentiation over NCHW tensors.
///
/// A Graph records every op in creation order; backward() replays the tape in
/// reverse. Nodes only allocate and propagate gradients when some input
/// requires one, so a forward pass over frozen parameters costs no backward
/// work. Per-sample weight-gradient partials are reduced in sample order,
/// which keeps results independent of the worker-thread count.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "emd/errors.hpp"
#include "emd/parallel.hpp"
#include "emd/tensor.hpp"

namespace emd {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <class T>
class Graph {
public:
    using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapMat = Eigen::Map<RowMat>;
    using ConstMapMat = Eigen::Map<const RowMat>;

    explicit Graph(bool training) : training_(training) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool training() const { return training_; }

    /// Weight of the current batch when batch norm updates its running
    /// statistics in training mode (0.1 unless changed).
    void set_bn_momentum(T m) { bn_momentum_ = m; }

    /// Constant input; never receives a gradient.
    Var input(Tensor<T> value) { return push(std::move(value), false, {}); }

    /// Leaf bound to a parameter. When `grad_sink` is non-null the gradient is
    /// accumulated into it by backward().
    Var param(const Tensor<T>& value, Tensor<T>* grad_sink) {
        Var v = push(value, grad_sink != nullptr, {});
        nodes_[v.id].sink = grad_sink;
        return v;
    }

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

    /// Gradient of the last backward() target w.r.t. v (zeros if none flowed).
    Tensor<T> grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        return n.grad.empty() ? Tensor<T>(n.value.shape()) : n.grad;
    }

    void backward(Var loss) {
        Node& root = nodes_.at(loss.id);
        if (root.value.size() != 1) throw PreconditionError("backward: loss must be a scalar");
        if (!root.needs_grad) return;
        grad_ref(loss.id).fill(T(1));
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty()) continue;
            if (n.back) n.back();
            if (n.sink) {
                T* dst = n.sink->data();
                const T* src = n.grad.data();
                for (std::size_t k = 0; k < n.grad.size(); ++k) dst[k] += src[k];
            }
        }
    }

    // ---------------------------------------------------------------- ops

    /// Stride-1 "same" convolution; weight {Cout, Cin, k, k}, optional bias {1, Cout, 1, 1}.
    Var conv2d(Var x, Var w, Var b, int dilation = 1) {
        const Shape xs = value(x).shape();
        const Shape ws = value(w).shape();
        if (ws.c != xs.c || ws.h != ws.w || ws.h % 2 == 0) {
            throw PreconditionError("conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
        }
        const int cout = ws.n;
        const int k = ws.h;
        const int pad = dilation * (k - 1) / 2;
        const int kdim = xs.c * k * k;
        const int hw = static_cast<int>(xs.plane());
        Tensor<T> out(Shape{xs.n, cout, xs.h, xs.w});
        {
            const Tensor<T>& xv = value(x);
            const Tensor<T>& wv = value(w);
            const T* bias = b.valid() ? value(b).data() : nullptr;
            parallel_for(static_cast<std::size_t>(xs.n), [&](std::size_t n) {
                ConstMapMat wm(wv.data(), cout, kdim);
                MapMat ym(out.plane(static_cast<int>(n), 0), cout, hw);
                if (k == 1) {
                    ym.noalias() = wm * ConstMapMat(xv.plane(static_cast<int>(n), 0), xs.c, hw);
                } else {
                    std::vector<T> cols(static_cast<std::size_t>(kdim) * hw);
                    im2col(xv.plane(static_cast<int>(n), 0), xs.c, xs.h, xs.w, k, dilation, pad, cols.data());
                    ym.noalias() = wm * ConstMapMat(cols.data(), kdim, hw);
                }
                if (bias) {
                    for (int c = 0; c < cout; ++c) ym.row(c).array() += bias[c];
                }
            });
        }
        Var y = push(std::move(out), any_grad({x, w, b}), {});
        set_back(y, [this, x, w, b, y, xs, cout, k, dilation, pad, kdim, hw] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            const Tensor<T>& xv = value(x);
            const Tensor<T>& wv = value(w);
            const bool gx = needs_grad(x), gw = needs_grad(w), gb = b.valid() && needs_grad(b);
            std::vector<Tensor<T>> dw_part(gw ? xs.n : 0);
            Tensor<T>* dx = gx ? &grad_ref(x.id) : nullptr;
            parallel_for(static_cast<std::size_t>(xs.n), [&](std::size_t ni) {
                const int n = static_cast<int>(ni);
                ConstMapMat dym(dy.plane(n, 0), cout, hw);
                ConstMapMat wm(wv.data(), cout, kdim);
                if (k == 1) {
                    if (gw) {
                        dw_part[ni] = Tensor<T>(Shape{cout, xs.c, 1, 1});
                        MapMat(dw_part[ni].data(), cout, kdim).noalias() =
                            dym * ConstMapMat(xv.plane(n, 0), xs.c, hw).transpose();
                    }
                    if (gx) MapMat(dx->plane(n, 0), xs.c, hw).noalias() += wm.transpose() * dym;
                    return;
                }
                std::vector<T> cols(static_cast<std::size_t>(kdim) * hw);
                if (gw) {
                    im2col(xv.plane(n, 0), xs.c, xs.h, xs.w, k, dilation, pad, cols.data());
                    dw_part[ni] = Tensor<T>(Shape{cout, xs.c, k, k});
                    MapMat(dw_part[ni].data(), cout, kdim).noalias() =
                        dym * ConstMapMat(cols.data(), kdim, hw).transpose();
                }
                if (gx) {
                    MapMat(cols.data(), kdim, hw).noalias() = wm.transpose() * dym;
                    col2im_add(cols.data(), xs.c, xs.h, xs.w, k, dilation, pad, dx->plane(n, 0));
                }
            });
            if (gw) {
                Tensor<T>& dw = grad_ref(w.id);
                for (const auto& part : dw_part) {
                    for (std::size_t i = 0; i < part.size(); ++i) dw[i] += part[i];
                }
            }
            if (gb) {
                Tensor<T>& db = grad_ref(b.id);
                for (int n = 0; n < xs.n; ++n) {
                    for (int c = 0; c < cout; ++c) {
                        const T* p = dy.plane(n, c);
                        T s = T(0);
                        for (int i = 0; i < hw; ++i) s += p[i];
                        db[c] += s;
                    }
                }
            }
        });
        return y;
    }

    /// Depthwise "same" convolution; weight {C, 1, k, k}, no bias.
    Var depthwise_conv2d(Var x, Var w, int dilation = 1) {
        const Shape xs = value(x).shape();
        const Shape ws = value(w).shape();
        if (ws.n != xs.c || ws.c != 1 || ws.h != ws.w || ws.h % 2 == 0) {
            throw PreconditionError("depthwise_conv2d: weight " + ws.str() + " incompatible with input " + xs.str());
        }
        const int k = ws.h;
        const int r = k / 2;
        Tensor<T> out(xs);
        const Tensor<T>& xv = value(x);
        const Tensor<T>& wv = value(w);
        for (int n = 0; n < xs.n; ++n) {
            for (int c = 0; c < xs.c; ++c) {
                const T* src = xv.plane(n, c);
                T* dst = out.plane(n, c);
                const T* kw = wv.plane(c, 0);
                for (int ky = 0; ky < k; ++ky) {
                    const int oy = (ky - r) * dilation;
                    for (int kx = 0; kx < k; ++kx) {
                        const int ox = (kx - r) * dilation;
                        const T wt = kw[ky * k + kx];
                        const int y0 = std::max(0, -oy), y1 = std::min(xs.h, xs.h - oy);
                        const int x0 = std::max(0, -ox), x1 = std::min(xs.w, xs.w - ox);
                        for (int yy = y0; yy < y1; ++yy) {
                            const T* s = src + (yy + oy) * xs.w + ox;
                            T* d = dst + yy * xs.w;
                            for (int xx = x0; xx < x1; ++xx) d[xx] += wt * s[xx];
                        }
                    }
                }
            }
        }
        Var y = push(std::move(out), any_grad({x, w}), {});
        set_back(y, [this, x, w, y, xs, k, r, dilation] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            const Tensor<T>& xv = value(x);
            const Tensor<T>& wv = value(w);
            Tensor<T>* dx = needs_grad(x) ? &grad_ref(x.id) : nullptr;
            Tensor<T>* dw = needs_grad(w) ? &grad_ref(w.id) : nullptr;
            for (int n = 0; n < xs.n; ++n) {
                for (int c = 0; c < xs.c; ++c) {
                    const T* g = dy.plane(n, c);
                    const T* src = xv.plane(n, c);
                    const T* kw = wv.plane(c, 0);
                    for (int ky = 0; ky < k; ++ky) {
                        const int oy = (ky - r) * dilation;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ox = (kx - r) * dilation;
                            const int y0 = std::max(0, -oy), y1 = std::min(xs.h, xs.h - oy);
                            const int x0 = std::max(0, -ox), x1 = std::min(xs.w, xs.w - ox);
                            T acc = T(0);
                            const T wt = kw[ky * k + kx];
                            for (int yy = y0; yy < y1; ++yy) {
                                const T* gr = g + yy * xs.w;
                                const T* s = src + (yy + oy) * xs.w + ox;
                                if (dw) {
                                    for (int xx = x0; xx < x1; ++xx) acc += gr[xx] * s[xx];
                                }
                                if (dx) {
                                    T* d = dx->plane(n, c) + (yy + oy) * xs.w + ox;
                                    for (int xx = x0; xx < x1; ++xx) d[xx] += wt * gr[xx];
                                }
                            }
                            if (dw) dw->at(c, 0, ky, kx) += acc;
                        }
                    }
                }
            }
        });
        return y;
    }

    /// Per-channel batch normalization. `running_mean`/`running_var` ({1,C,1,1})
    /// are read in inference mode and updated in training mode.
    Var batch_norm(Var x, Var gamma, Var beta, Tensor<T>& running_mean, Tensor<T>& running_var, T eps = T(1e-5)) {
        const T momentum = bn_momentum_;
        const Shape xs = value(x).shape();
        const int C = xs.c;
        const std::size_t hw = xs.plane();
        const std::size_t count = static_cast<std::size_t>(xs.n) * hw;
        std::vector<T> mean(C), invstd(C);
        const Tensor<T>& xv = value(x);
        if (training_) {
            for (int c = 0; c < C; ++c) {
                T s = T(0);
                for (int n = 0; n < xs.n; ++n) {
                    const T* p = xv.plane(n, c);
                    for (std::size_t i = 0; i < hw; ++i) s += p[i];
                }
                const T m = s / static_cast<T>(count);
                T v = T(0);
                for (int n = 0; n < xs.n; ++n) {
                    const T* p = xv.plane(n, c);
                    for (std::size_t i = 0; i < hw; ++i) v += (p[i] - m) * (p[i] - m);
                }
                const T var = v / static_cast<T>(count);
                mean[c] = m;
                invstd[c] = T(1) / std::sqrt(var + eps);
                const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : var;
                running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
                running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
            }
        } else {
            for (int c = 0; c < C; ++c) {
                mean[c] = running_mean[c];
                invstd[c] = T(1) / std::sqrt(running_var[c] + eps);
            }
        }
        const Tensor<T>& gv = value(gamma);
        const Tensor<T>& bv = value(beta);
        Tensor<T> out(xs);
        for (int n = 0; n < xs.n; ++n) {
            for (int c = 0; c < C; ++c) {
                const T* p = xv.plane(n, c);
                T* o = out.plane(n, c);
                const T a = gv[c] * invstd[c];
                const T bb = bv[c] - a * mean[c];
                for (std::size_t i = 0; i < hw; ++i) o[i] = a * p[i] + bb;
            }
        }
        Var y = push(std::move(out), any_grad({x, gamma, beta}), {});
        const bool batch_stats = training_;
        set_back(y, [this, x, gamma, beta, y, xs, C, hw, count, mean, invstd, batch_stats] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            const Tensor<T>& xv = value(x);
            const Tensor<T>& gv = value(gamma);
            Tensor<T>* dx = needs_grad(x) ? &grad_ref(x.id) : nullptr;
            Tensor<T>* dg = needs_grad(gamma) ? &grad_ref(gamma.id) : nullptr;
            Tensor<T>* db = needs_grad(beta) ? &grad_ref(beta.id) : nullptr;
            for (int c = 0; c < C; ++c) {
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (int n = 0; n < xs.n; ++n) {
                    const T* p = xv.plane(n, c);
                    const T* g = dy.plane(n, c);
                    for (std::size_t i = 0; i < hw; ++i) {
                        sum_dy += g[i];
                        sum_dy_xhat += g[i] * (p[i] - mean[c]) * invstd[c];
                    }
                }
                if (dg) (*dg)[c] += sum_dy_xhat;
                if (db) (*db)[c] += sum_dy;
                if (!dx) continue;
                const T scale = gv[c] * invstd[c];
                const T inv_count = T(1) / static_cast<T>(count);
                for (int n = 0; n < xs.n; ++n) {
                    const T* p = xv.plane(n, c);
                    const T* g = dy.plane(n, c);
                    T* d = dx->plane(n, c);
                    for (std::size_t i = 0; i < hw; ++i) {
                        if (batch_stats) {
                            const T xhat = (p[i] - mean[c]) * invstd[c];
                            d[i] += scale * (g[i] - inv_count * sum_dy - xhat * inv_count * sum_dy_xhat);
                        } else {
                            d[i] += scale * g[i];
                        }
                    }
                }
            }
        });
        return y;
    }

    /// x * sigmoid(x).
    Var silu(Var x) {
        Tensor<T> out(value(x).shape());
        const Tensor<T>& xv = value(x);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sigmoid_scalar(xv[i]);
        Var y = push(std::move(out), any_grad({x}), {});
        set_back(y, [this, x, y] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            const Tensor<T>& xv = value(x);
            Tensor<T>& dx = grad_ref(x.id);
            for (std::size_t i = 0; i < dx.size(); ++i) {
                const T s = sigmoid_scalar(xv[i]);
                dx[i] += dy[i] * s * (T(1) + xv[i] * (T(1) - s));
            }
        });
        return y;
    }

    Var sigmoid(Var x) {
        Tensor<T> out(value(x).shape());
        const Tensor<T>& xv = value(x);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(xv[i]);
        Var y = push(std::move(out), any_grad({x}), {});
        set_back(y, [this, x, y] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            const Tensor<T>& yv = value(y);
            Tensor<T>& dx = grad_ref(x.id);
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i] * yv[i] * (T(1) - yv[i]);
        });
        return y;
    }

    /// 2x2 average pooling; H and W must be even.
    Var avg_pool2(Var x) {
        const Shape xs = value(x).shape();
        if (xs.h % 2 || xs.w % 2) throw PreconditionError("avg_pool2: odd spatial size " + xs.str());
        const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
        Tensor<T> out(os);
        const Tensor<T>& xv = value(x);
        for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < xs.c; ++c)
                for (int i = 0; i < os.h; ++i)
                    for (int j = 0; j < os.w; ++j)
                        out.at(n, c, i, j) = T(0.25) * (xv.at(n, c, 2 * i, 2 * j) + xv.at(n, c, 2 * i, 2 * j + 1) +
                                                        xv.at(n, c, 2 * i + 1, 2 * j) + xv.at(n, c, 2 * i + 1, 2 * j + 1));
        Var y = push(std::move(out), any_grad({x}), {});
        set_back(y, [this, x, y, os] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            Tensor<T>& dx = grad_ref(x.id);
            for (int n = 0; n < os.n; ++n)
                for (int c = 0; c < os.c; ++c)
                    for (int i = 0; i < os.h; ++i)
                        for (int j = 0; j < os.w; ++j) {
                            const T g = T(0.25) * dy.at(n, c, i, j);
                            dx.at(n, c, 2 * i, 2 * j) += g;
                            dx.at(n, c, 2 * i, 2 * j + 1) += g;
                            dx.at(n, c, 2 * i + 1, 2 * j) += g;
                            dx.at(n, c, 2 * i + 1, 2 * j + 1) += g;
                        }
        });
        return y;
    }

    /// 2x2 max pooling, stride 2. The gradient goes to the first maximum of each window.
    Var max_pool2(Var x) {
        const Shape xs = value(x).shape();
        if (xs.h % 2 || xs.w % 2) throw PreconditionError("max_pool2: odd spatial size " + xs.str());
        const Shape os{xs.n, xs.c, xs.h / 2, xs.w / 2};
        Tensor<T> out(os);
        std::vector<std::uint32_t> arg(os.numel());
        const Tensor<T>& xv = value(x);
        std::size_t k = 0;
        for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < xs.c; ++c)
                for (int i = 0; i < os.h; ++i)
                    for (int j = 0; j < os.w; ++j, ++k) {
                        std::uint32_t best = 0;
                        T m = xv.at(n, c, 2 * i, 2 * j);
                        for (std::uint32_t q = 1; q < 4; ++q) {
                            const T v = xv.at(n, c, 2 * i + static_cast<int>(q >> 1), 2 * j + static_cast<int>(q & 1));
                            if (v > m) {
                                m = v;
                                best = q;
                            }
                        }
                        out[k] = m;
                        arg[k] = best;
                    }
        Var y = push(std::move(out), any_grad({x}), {});
        set_back(y, [this, x, y, os, arg = std::move(arg)] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            Tensor<T>& dx = grad_ref(x.id);
            std::size_t k = 0;
            for (int n = 0; n < os.n; ++n)
                for (int c = 0; c < os.c; ++c)
                    for (int i = 0; i < os.h; ++i)
                        for (int j = 0; j < os.w; ++j, ++k) {
                            dx.at(n, c, 2 * i + static_cast<int>(arg[k] >> 1), 2 * j + static_cast<int>(arg[k] & 1)) +=
                                dy[k];
                        }
        });
        return y;
    }

    /// Global average pool to {N, C, 1, 1}.
    Var global_avg_pool(Var x) {
        const Shape xs = value(x).shape();
        const std::size_t hw = xs.plane();
        Tensor<T> out(Shape{xs.n, xs.c, 1, 1});
        const Tensor<T>& xv = value(x);
        for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < xs.c; ++c) {
                const T* p = xv.plane(n, c);
                T s = T(0);
                for (std::size_t i = 0; i < hw; ++i) s += p[i];
                out.at(n, c, 0, 0) = s / static_cast<T>(hw);
            }
        Var y = push(std::move(out), any_grad({x}), {});
        set_back(y, [this, x, y, xs, hw] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            Tensor<T>& dx = grad_ref(x.id);
            for (int n = 0; n < xs.n; ++n)
                for (int c = 0; c < xs.c; ++c) {
                    const T g = dy.at(n, c, 0, 0) / static_cast<T>(hw);
                    T* d = dx.plane(n, c);
                    for (std::size_t i = 0; i < hw; ++i) d[i] += g;
                }
        });
        return y;
    }

    /// Softmax over the channel axis of an {N, C, 1, 1} tensor.
    Var softmax(Var x) {
        const Shape xs = value(x).shape();
        if (xs.h != 1 || xs.w != 1) throw PreconditionError("softmax: expects {N,C,1,1}, got " + xs.str());
        Tensor<T> out(xs);
        const Tensor<T>& xv = value(x);
        for (int n = 0; n < xs.n; ++n) {
            const T* z = xv.data() + static_cast<std::size_t>(n) * xs.c;
            T* p = out.data() + static_cast<std::size_t>(n) * xs.c;
            const T mx = *std::max_element(z, z + xs.c);
            T s = T(0);
            for (int c = 0; c < xs.c; ++c) s += (p[c] = std::exp(z[c] - mx));
            for (int c = 0; c < xs.c; ++c) p[c] /= s;
        }
        Var y = push(std::move(out), any_grad({x}), {});
        set_back(y, [this, x, y, xs] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            const Tensor<T>& yv = value(y);
            Tensor<T>& dx = grad_ref(x.id);
            for (int n = 0; n < xs.n; ++n) {
                const std::size_t o = static_cast<std::size_t>(n) * xs.c;
                T dot = T(0);
                for (int c = 0; c < xs.c; ++c) dot += dy[o + c] * yv[o + c];
                for (int c = 0; c < xs.c; ++c) dx[o + c] += yv[o + c] * (dy[o + c] - dot);
            }
        });
        return y;
    }

    /// Channel concatenation of tensors sharing N, H, W.
    Var concat_channels(const std::vector<Var>& xs) {
        if (xs.empty()) throw PreconditionError("concat_channels: no inputs");
        Shape s = value(xs.front()).shape();
        int total = 0;
        for (Var v : xs) {
            const Shape vs = value(v).shape();
            if (vs.n != s.n || vs.h != s.h || vs.w != s.w) {
                throw PreconditionError("concat_channels: " + vs.str() + " vs " + s.str());
            }
            total += vs.c;
        }
        const Shape os{s.n, total, s.h, s.w};
        Tensor<T> out(os);
        const std::size_t hw = s.plane();
        int off = 0;
        for (Var v : xs) {
            const Tensor<T>& vv = value(v);
            for (int n = 0; n < s.n; ++n) std::copy_n(vv.plane(n, 0), vv.shape().c * hw, out.plane(n, off));
            off += vv.shape().c;
        }
        Var y = push(std::move(out), any_grad(xs), {});
        set_back(y, [this, xs, y, s, hw] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            int off = 0;
            for (Var v : xs) {
                const int c = value(v).shape().c;
                if (needs_grad(v)) {
                    Tensor<T>& dv = grad_ref(v.id);
                    for (int n = 0; n < s.n; ++n) {
                        const T* src = dy.plane(n, off);
                        T* dst = dv.plane(n, 0);
                        for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
                    }
                }
                off += c;
            }
        });
        return y;
    }

    /// Bilinear resize with half-pixel centers (align_corners = false).
    /// Same-size resizing is the identity; a 1x1 input broadcasts.
    Var resize_bilinear(Var x, int out_h, int out_w) {
        const Shape xs = value(x).shape();
        if (out_h == xs.h && out_w == xs.w) return identity(x);
        const auto ay = bilinear_axis(xs.h, out_h);
        const auto ax = bilinear_axis(xs.w, out_w);
        const Shape os{xs.n, xs.c, out_h, out_w};
        Tensor<T> out(os);
        const Tensor<T>& xv = value(x);
        for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < xs.c; ++c) {
                const T* p = xv.plane(n, c);
                T* o = out.plane(n, c);
                for (int i = 0; i < out_h; ++i) {
                    const auto& yi = ay[i];
                    for (int j = 0; j < out_w; ++j) {
                        const auto& xj = ax[j];
                        o[i * out_w + j] =
                            (T(1) - yi.frac) * ((T(1) - xj.frac) * p[yi.lo * xs.w + xj.lo] + xj.frac * p[yi.lo * xs.w + xj.hi]) +
                            yi.frac * ((T(1) - xj.frac) * p[yi.hi * xs.w + xj.lo] + xj.frac * p[yi.hi * xs.w + xj.hi]);
                    }
                }
            }
        Var y = push(std::move(out), any_grad({x}), {});
        set_back(y, [this, x, y, xs, os, ay, ax] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            Tensor<T>& dx = grad_ref(x.id);
            for (int n = 0; n < xs.n; ++n)
                for (int c = 0; c < xs.c; ++c) {
                    const T* g = dy.plane(n, c);
                    T* d = dx.plane(n, c);
                    for (int i = 0; i < os.h; ++i) {
                        const auto& yi = ay[i];
                        for (int j = 0; j < os.w; ++j) {
                            const auto& xj = ax[j];
                            const T v = g[i * os.w + j];
                            d[yi.lo * xs.w + xj.lo] += (T(1) - yi.frac) * (T(1) - xj.frac) * v;
                            d[yi.lo * xs.w + xj.hi] += (T(1) - yi.frac) * xj.frac * v;
                            d[yi.hi * xs.w + xj.lo] += yi.frac * (T(1) - xj.frac) * v;
                            d[yi.hi * xs.w + xj.hi] += yi.frac * xj.frac * v;
                        }
                    }
                }
        });
        return y;
    }

    Var add(Var a, Var b) {
        if (value(a).shape() != value(b).shape()) throw PreconditionError("add: shape mismatch");
        Tensor<T> out = value(a);
        const Tensor<T>& bv = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
        Var y = push(std::move(out), any_grad({a, b}), {});
        set_back(y, [this, a, b, y] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            for (Var v : {a, b}) {
                if (!needs_grad(v)) continue;
                Tensor<T>& d = grad_ref(v.id);
                for (std::size_t i = 0; i < d.size(); ++i) d[i] += dy[i];
            }
        });
        return y;
    }

    /// Mean over the batch of -log(max(p[true], eps)) for {N, C, 1, 1} probabilities.
    /// Only the lower clamp matters for the true-class term.
    Var nll_clamped(Var probs, const std::vector<int>& labels, T eps) {
        const Shape ps = value(probs).shape();
        if (static_cast<int>(labels.size()) != ps.n) throw PreconditionError("nll_clamped: label count mismatch");
        const Tensor<T>& pv = value(probs);
        T loss = T(0);
        for (int n = 0; n < ps.n; ++n) {
            if (labels[n] < 0 || labels[n] >= ps.c) throw PreconditionError("nll_clamped: label out of range");
            loss -= std::log(std::max(pv.at(n, labels[n], 0, 0), eps));
        }
        loss /= static_cast<T>(ps.n);
        Var y = push(Tensor<T>(Shape{1, 1, 1, 1}, loss), any_grad({probs}), {});
        set_back(y, [this, probs, labels, eps, y, ps] {
            const T g = nodes_[y.id].grad[0] / static_cast<T>(ps.n);
            const Tensor<T>& pv = value(probs);
            Tensor<T>& dp = grad_ref(probs.id);
            for (int n = 0; n < ps.n; ++n) {
                const T p = pv.at(n, labels[n], 0, 0);
                if (p > eps) dp.at(n, labels[n], 0, 0) -= g / p;
            }
        });
        return y;
    }

    /// Mean over all elements of -[t log p + (1 - t) log(1 - p)], p clamped to [eps, 1 - eps].
    Var bce_clamped(Var probs, const Tensor<T>& target, T eps) {
        const Tensor<T>& pv = value(probs);
        if (pv.shape() != target.shape()) {
            throw PreconditionError("bce_clamped: " + pv.shape().str() + " vs target " + target.shape().str());
        }
        T loss = T(0);
        for (std::size_t i = 0; i < pv.size(); ++i) {
            const T p = std::clamp(pv[i], eps, T(1) - eps);
            loss -= target[i] * std::log(p) + (T(1) - target[i]) * std::log(T(1) - p);
        }
        loss /= static_cast<T>(pv.size());
        Var y = push(Tensor<T>(Shape{1, 1, 1, 1}, loss), any_grad({probs}), {});
        set_back(y, [this, probs, target, eps, y] {
            const Tensor<T>& pv = value(probs);
            const T g = nodes_[y.id].grad[0] / static_cast<T>(pv.size());
            Tensor<T>& dp = grad_ref(probs.id);
            for (std::size_t i = 0; i < pv.size(); ++i) {
                const T p = pv[i];
                if (p <= eps || p >= T(1) - eps) continue;
                dp[i] += g * (-target[i] / p + (T(1) - target[i]) / (T(1) - p));
            }
        });
        return y;
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad = false;
        Tensor<T>* sink = nullptr;
        std::function<void()> back;
    };

    struct AxisTap {
        int lo = 0;
        int hi = 0;
        T frac = T(0);
    };

    static T sigmoid_scalar(T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
    }

    static std::vector<AxisTap> bilinear_axis(int in, int out) {
        std::vector<AxisTap> taps(out);
        const double scale = static_cast<double>(in) / out;
        for (int i = 0; i < out; ++i) {
            double src = (i + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            int lo = static_cast<int>(std::floor(src));
            if (lo > in - 1) lo = in - 1;
            const int hi = std::min(lo + 1, in - 1);
            taps[i] = {lo, hi, static_cast<T>(src - lo)};
            if (hi == lo) taps[i].frac = T(0);
        }
        return taps;
    }

    static void im2col(const T* x, int c, int h, int w, int k, int dil, int pad, T* cols) {
        const int hw = h * w;
        for (int ch = 0; ch < c; ++ch)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    T* row = cols + static_cast<std::size_t>((ch * k + ky) * k + kx) * hw;
                    const int oy = ky * dil - pad, ox = kx * dil - pad;
                    const T* src = x + static_cast<std::size_t>(ch) * hw;
                    for (int yy = 0; yy < h; ++yy) {
                        const int sy = yy + oy;
                        T* r = row + yy * w;
                        if (sy < 0 || sy >= h) {
                            std::fill(r, r + w, T(0));
                            continue;
                        }
                        for (int xx = 0; xx < w; ++xx) {
                            const int sx = xx + ox;
                            r[xx] = (sx >= 0 && sx < w) ? src[sy * w + sx] : T(0);
                        }
                    }
                }
    }

    static void col2im_add(const T* cols, int c, int h, int w, int k, int dil, int pad, T* x) {
        const int hw = h * w;
        for (int ch = 0; ch < c; ++ch)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T* row = cols + static_cast<std::size_t>((ch * k + ky) * k + kx) * hw;
                    const int oy = ky * dil - pad, ox = kx * dil - pad;
                    T* dst = x + static_cast<std::size_t>(ch) * hw;
                    for (int yy = 0; yy < h; ++yy) {
                        const int sy = yy + oy;
                        if (sy < 0 || sy >= h) continue;
                        for (int xx = 0; xx < w; ++xx) {
                            const int sx = xx + ox;
                            if (sx >= 0 && sx < w) dst[sy * w + sx] += row[yy * w + xx];
                        }
                    }
                }
    }

    Var identity(Var x) {
        Var y = push(value(x), any_grad({x}), {});
        set_back(y, [this, x, y] {
            const Tensor<T>& dy = nodes_[y.id].grad;
            Tensor<T>& dx = grad_ref(x.id);
            for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];
        });
        return y;
    }

    bool any_grad(std::initializer_list<Var> vs) const {
        for (Var v : vs)
            if (v.valid() && nodes_[v.id].needs_grad) return true;
        return false;
    }
    bool any_grad(const std::vector<Var>& vs) const {
        for (Var v : vs)
            if (v.valid() && nodes_[v.id].needs_grad) return true;
        return false;
    }

    Var push(Tensor<T> value, bool needs_grad, std::function<void()> back) {
        nodes_.push_back(Node{std::move(value), {}, needs_grad, nullptr, std::move(back)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void set_back(Var y, std::function<void()> back) {
        if (nodes_[y.id].needs_grad) nodes_[y.id].back = std::move(back);
    }

    Tensor<T>& grad_ref(int id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    bool training_;
    T bn_momentum_ = T(0.1);
    std::vector<Node> nodes_;
};

}  // namespace emd
