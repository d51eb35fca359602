#include <doctest.h>

#include <cmath>
#include <functional>

#include "emd/graph.hpp"
#include "emd/params.hpp"
#include "emd/parallel.hpp"
#include "emd/training.hpp"
#include "support.hpp"

using namespace emd;
using emd::test::random_tensor;

namespace {

using OpFn = std::function<Var(Graph<double>&, Binder<double>&, Var)>;

/// Smooth scalar readout of an op's output: BCE of sigmoid(op(x)) against a fixed target.
double op_readout_loss(const OpFn& op, const Tensor<double>& x, const Tensor<double>& target, ParamSet<double>& ps,
                       bool grads) {
    Graph<double> g(true);
    Binder<double> b(g, ps, grads, false);
    Var y = g.sigmoid(op(g, b, g.input(x)));
    Var loss = g.bce_clamped(y, target, 1e-12);
    if (grads) g.backward(loss);
    return g.value(loss)[0];
}

/// Gradcheck of an op w.r.t. its parameters and (through an "x" parameter) its input.
double op_gradcheck(const OpFn& op, Shape in, Shape out, ParamSet<double> ps, std::uint64_t seed) {
    Rng rng(seed);
    ps.add("x", in) = random_tensor<double>(in, rng);
    const Tensor<double> target = random_tensor<double>(out, rng, 0.0, 1.0);
    const OpFn through_x = [&](Graph<double>& g, Binder<double>& b, Var) { return op(g, b, b.weight("x")); };
    return finite_diff_gradcheck(
        [&](ParamSet<double>& p, bool grads) { return op_readout_loss(through_x, Tensor<double>(in), target, p, grads); },
        ps, 40, 1e-5, seed);
}

Tensor<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* bias, int dil) {
    const Shape xs = x.shape(), ws = w.shape();
    const int k = ws.h, pad = dil * (k - 1) / 2;
    Tensor<double> out(Shape{xs.n, ws.n, xs.h, xs.w});
    for (int n = 0; n < xs.n; ++n)
        for (int o = 0; o < ws.n; ++o)
            for (int y = 0; y < xs.h; ++y)
                for (int xx = 0; xx < xs.w; ++xx) {
                    double s = bias ? (*bias)[o] : 0.0;
                    for (int c = 0; c < xs.c; ++c)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int sy = y + ky * dil - pad, sx = xx + kx * dil - pad;
                                if (sy < 0 || sy >= xs.h || sx < 0 || sx >= xs.w) continue;
                                s += w.at(o, c, ky, kx) * x.at(n, c, sy, sx);
                            }
                    out.at(n, o, y, xx) = s;
                }
    return out;
}

void check_close(const Tensor<double>& a, const Tensor<double>& b, double tol) {
    REQUIRE(a.shape() == b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(tol).scale(1.0));
}

}  // namespace

TEST_CASE("conv2d matches a direct summation") {
    Rng rng(1);
    for (int k : {1, 3, 5})
        for (int dil : {1, 2}) {
            const auto x = random_tensor<double>(Shape{2, 3, 7, 6}, rng);
            const auto w = random_tensor<double>(Shape{4, 3, k, k}, rng);
            const auto bias = random_tensor<double>(Shape{1, 4, 1, 1}, rng);
            Graph<double> g(false);
            Var y = g.conv2d(g.input(x), g.input(w), g.input(bias), dil);
            check_close(g.value(y), naive_conv(x, w, &bias, dil), 1e-12);
        }
}

TEST_CASE("depthwise_conv2d matches per-channel direct summation") {
    Rng rng(2);
    for (int dil : {1, 2, 4}) {
        const auto x = random_tensor<double>(Shape{2, 3, 9, 9}, rng);
        const auto w = random_tensor<double>(Shape{3, 1, 3, 3}, rng);
        Graph<double> g(false);
        Var y = g.depthwise_conv2d(g.input(x), g.input(w), dil);
        for (int c = 0; c < 3; ++c) {
            Tensor<double> xc(Shape{2, 1, 9, 9}), wc(Shape{1, 1, 3, 3});
            for (int n = 0; n < 2; ++n)
                for (int i = 0; i < 81; ++i) xc[n * 81 + i] = x.plane(n, c)[i];
            for (int i = 0; i < 9; ++i) wc[i] = w.plane(c, 0)[i];
            const auto ref = naive_conv(xc, wc, nullptr, dil);
            for (int n = 0; n < 2; ++n)
                for (int i = 0; i < 81; ++i) CHECK(g.value(y).plane(n, c)[i] == doctest::Approx(ref[n * 81 + i]));
        }
    }
}

TEST_CASE("max_pool2 takes window maxima and routes ties to the first element") {
    Tensor<double> x(Shape{1, 1, 2, 4}, {1, 5, 2, 2, 3, 0, 2, 2});
    Graph<double> g(true);
    Tensor<double> grad(x.shape());
    Var xv = g.param(x, &grad);
    Var y = g.max_pool2(xv);
    CHECK(g.value(y).vec() == std::vector<double>{5, 2});
    Var loss = g.bce_clamped(g.sigmoid(y), Tensor<double>(Shape{1, 1, 1, 2}, 1.0), 1e-12);
    g.backward(loss);
    CHECK(grad[1] != 0.0);
    CHECK(grad[2] != 0.0);  // first of the four tied 2s
    for (int i : {0, 3, 4, 5, 6, 7}) CHECK(grad[i] == 0.0);
}

TEST_CASE("avg_pool2 and global_avg_pool average their windows") {
    Tensor<double> x(Shape{1, 1, 2, 4}, {1, 5, 2, 2, 3, 0, 2, 6});
    Graph<double> g(false);
    CHECK(g.value(g.avg_pool2(g.input(x))).vec() == std::vector<double>{2.25, 3.0});
    CHECK(g.value(g.global_avg_pool(g.input(x)))[0] == doctest::Approx(21.0 / 8));
}

TEST_CASE("resize_bilinear uses half-pixel centers") {
    // Ramp f(y, x) = x + 4y on a 4 x 4 grid; 2x downsampling samples at
    // source coordinate 2i + 0.5, i.e. the mean of each 2 x 2 block.
    Tensor<double> ramp(Shape{1, 1, 4, 4});
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) ramp.at(0, 0, y, x) = x + 4 * y;
    Graph<double> g(false);
    const auto& down = g.value(g.resize_bilinear(g.input(ramp), 2, 2));
    CHECK(down.vec() == std::vector<double>{2.5, 4.5, 10.5, 12.5});

    CHECK(g.value(g.resize_bilinear(g.input(ramp), 4, 4)) == ramp);

    // 2 -> 4 upsampling: sources at -0.25 (clamped), 0.25, 0.75, 1.25 (clamped).
    Tensor<double> two(Shape{1, 1, 1, 2}, {0.0, 1.0});
    const auto& up = g.value(g.resize_bilinear(g.input(two), 1, 4));
    CHECK(up.vec() == std::vector<double>{0.0, 0.25, 0.75, 1.0});
}

TEST_CASE("softmax rows are distributions and concat preserves order") {
    Rng rng(3);
    Graph<double> g(false);
    const auto logits = random_tensor<double>(Shape{5, 7, 1, 1}, rng, -20, 20);
    const auto& p = g.value(g.softmax(g.input(logits)));
    for (int n = 0; n < 5; ++n) {
        double s = 0;
        for (int c = 0; c < 7; ++c) {
            CHECK(p.at(n, c, 0, 0) >= 0.0);
            s += p.at(n, c, 0, 0);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    const auto a = random_tensor<double>(Shape{2, 2, 3, 3}, rng);
    const auto b = random_tensor<double>(Shape{2, 1, 3, 3}, rng);
    const auto& cat = g.value(g.concat_channels({g.input(a), g.input(b)}));
    REQUIRE(cat.shape() == Shape{2, 3, 3, 3});
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 9; ++i) {
            CHECK(cat.plane(n, 1)[i] == a.plane(n, 1)[i]);
            CHECK(cat.plane(n, 2)[i] == b.plane(n, 0)[i]);
        }
}

TEST_CASE("batch_norm normalizes in training mode and uses running statistics otherwise") {
    Rng rng(4);
    const auto x = random_tensor<double>(Shape{4, 2, 3, 3}, rng, 2.0, 5.0);
    Tensor<double> gamma(Shape{1, 2, 1, 1}, 1.0), beta(Shape{1, 2, 1, 1}, 0.0);
    Tensor<double> mean(Shape{1, 2, 1, 1}, 0.0), var(Shape{1, 2, 1, 1}, 1.0);

    Graph<double> train(true);
    train.set_bn_momentum(1.0);
    const auto& y = train.value(train.batch_norm(train.input(x), train.input(gamma), train.input(beta), mean, var));
    for (int c = 0; c < 2; ++c) {
        double m = 0, s = 0, bm = 0;
        for (int n = 0; n < 4; ++n)
            for (int i = 0; i < 9; ++i) {
                m += y.plane(n, c)[i] / 36;
                s += y.plane(n, c)[i] * y.plane(n, c)[i] / 36;
                bm += x.plane(n, c)[i] / 36;
            }
        CHECK(m == doctest::Approx(0.0).scale(1.0));
        CHECK(s == doctest::Approx(1.0).epsilon(1e-4));
        CHECK(mean[c] == doctest::Approx(bm));
    }

    Graph<double> eval(false);
    Tensor<double> m0(Shape{1, 2, 1, 1}, 1.0), v0(Shape{1, 2, 1, 1}, 4.0);
    const auto& z = eval.value(eval.batch_norm(eval.input(x), eval.input(gamma), eval.input(beta), m0, v0));
    CHECK(z[0] == doctest::Approx((x[0] - 1.0) / std::sqrt(4.0 + 1e-5)));
    CHECK(m0[0] == 1.0);
}

TEST_CASE("op gradients match central differences") {
    Rng rng(5);
    const Shape in{2, 3, 6, 6};
    SUBCASE("conv2d with bias and dilation") {
        ParamSet<double> ps;
        ps.add("w", Shape{4, 3, 3, 3}) = random_tensor<double>(Shape{4, 3, 3, 3}, rng);
        ps.add("b", Shape{1, 4, 1, 1}) = random_tensor<double>(Shape{1, 4, 1, 1}, rng);
        const OpFn op = [](Graph<double>& g, Binder<double>& b, Var x) {
            return g.conv2d(x, b.weight("w"), b.weight("b"), 2);
        };
        CHECK(op_gradcheck(op, in, Shape{2, 4, 6, 6}, ps, 10) < 1e-6);
    }
    SUBCASE("depthwise_conv2d") {
        ParamSet<double> ps;
        ps.add("w", Shape{3, 1, 3, 3}) = random_tensor<double>(Shape{3, 1, 3, 3}, rng);
        const OpFn op = [](Graph<double>& g, Binder<double>& b, Var x) {
            return g.depthwise_conv2d(x, b.weight("w"), 2);
        };
        CHECK(op_gradcheck(op, in, in, ps, 11) < 1e-6);
    }
    SUBCASE("batch_norm in training mode") {
        ParamSet<double> ps;
        ps.add("gamma", Shape{1, 3, 1, 1}) = random_tensor<double>(Shape{1, 3, 1, 1}, rng, 0.5, 1.5);
        ps.add("beta", Shape{1, 3, 1, 1}) = random_tensor<double>(Shape{1, 3, 1, 1}, rng);
        const OpFn op = [](Graph<double>& g, Binder<double>& b, Var x) {
            Tensor<double> m(Shape{1, 3, 1, 1}), v(Shape{1, 3, 1, 1}, 1.0);
            return g.batch_norm(x, b.weight("gamma"), b.weight("beta"), m, v);
        };
        CHECK(op_gradcheck(op, in, in, ps, 12) < 1e-5);
    }
    SUBCASE("silu, pooling, resize and concat") {
        const OpFn op = [](Graph<double>& g, Binder<double>&, Var x) {
            Var a = g.max_pool2(g.silu(x));
            Var b = g.avg_pool2(x);
            Var up = g.resize_bilinear(g.concat_channels({a, b}), 5, 7);
            return g.add(up, g.resize_bilinear(g.global_avg_pool(up), 5, 7));
        };
        CHECK(op_gradcheck(op, in, Shape{2, 6, 5, 7}, ParamSet<double>{}, 13) < 1e-6);
    }
    SUBCASE("softmax into the clamped likelihood") {
        ParamSet<double> ps;
        ps.add("x", Shape{3, 5, 1, 1}) = random_tensor<double>(Shape{3, 5, 1, 1}, rng, -2, 2);
        const double err = finite_diff_gradcheck(
            [](ParamSet<double>& p, bool grads) {
                Graph<double> g(true);
                Binder<double> b(g, p, grads, false);
                Var loss = g.nll_clamped(g.softmax(b.weight("x")), {0, 4, 2}, 1e-7);
                if (grads) g.backward(loss);
                return g.value(loss)[0];
            },
            ps, 15, 1e-5, 14);
        CHECK(err < 1e-7);
    }
}

TEST_CASE("conv gradients do not depend on the worker count") {
    Rng rng(6);
    const auto x = random_tensor<double>(Shape{6, 3, 8, 8}, rng);
    const auto target = random_tensor<double>(Shape{6, 5, 8, 8}, rng, 0.0, 1.0);
    auto run = [&](int threads) {
        set_thread_count(threads);
        ParamSet<double> ps;
        Rng wr(7);
        ps.add("w", Shape{5, 3, 3, 3}) = random_tensor<double>(Shape{5, 3, 3, 3}, wr);
        const OpFn op = [](Graph<double>& g, Binder<double>& b, Var in) { return g.conv2d(in, b.weight("w"), Var{}); };
        op_readout_loss(op, x, target, ps, true);
        return ps.entry("w").grad;
    };
    const auto one = run(1);
    const auto many = run(4);
    set_thread_count(1);
    CHECK(one == many);
}

TEST_CASE("finite_diff_gradcheck on a quadratic") {
    ParamSet<double> ps;
    Rng rng(8);
    ps.add("p", Shape{1, 1, 4, 5}) = random_tensor<double>(Shape{1, 1, 4, 5}, rng);
    const double err = finite_diff_gradcheck(
        [](ParamSet<double>& p, bool grads) {
            auto& e = p.entry("p");
            double s = 0;
            for (std::size_t i = 0; i < e.value.size(); ++i) {
                s += e.value[i] * e.value[i];
                if (grads) e.grad[i] += 2 * e.value[i];
            }
            return s;
        },
        ps, 20, 1e-4, 1);
    CHECK(err < 1e-9);
}
