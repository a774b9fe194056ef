#include "refface/autodiff.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <unordered_set>

namespace refface::ad {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace {

thread_local bool g_grad_enabled = true;

NodePtr raw_node(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return n;
}

bool any_requires(std::initializer_list<const Var*> vars) {
    for (const Var* v : vars)
        if (v->defined() && v->requires_grad()) return true;
    return false;
}

// Builds the result node; attaches the backward closure only when grad
// recording is on and some input needs it.
Var make_op(Tensor value, std::initializer_list<const Var*> inputs,
            std::function<void(Node&)> backward_fn) {
    auto n = raw_node(std::move(value));
    if (g_grad_enabled && any_requires(inputs)) {
        n->requires_grad = true;
        for (const Var* v : inputs)
            if (v->defined()) n->parents.push_back(v->node());
        n->backward_fn = std::move(backward_fn);
    }
    return Var(n);
}

void accumulate(const NodePtr& p, const Tensor& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    const int64_t n = g.numel();
    double* dst = p->grad.data.data();
    const double* src = g.data.data();
    for (int64_t i = 0; i < n; i++) dst[i] += src[i];
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.val().same_shape(b.val()))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.val().shape_str() + " vs " +
                         b.val().shape_str());
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

Var make_leaf(Tensor v, bool requires_grad) {
    auto n = raw_node(std::move(v));
    n->requires_grad = requires_grad;
    return Var(n);
}

Var make_const(Tensor v) { return Var(raw_node(std::move(v))); }

void backward(const Var& loss) {
    if (loss.val().numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!loss.node()->requires_grad) return;

    // post-order DFS, then reverse
    std::vector<Node*> order;
    std::vector<std::pair<Node*, size_t>> stack;
    std::unordered_set<Node*> seen;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad.data[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
}

/*----------------------------- arithmetic ---------------------------------*/

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a.val();
    const double* pb = b.val().data.data();
    for (int64_t i = 0; i < out.numel(); i++) out.data[i] += pb[i];
    return make_op(std::move(out), {&a, &b}, [a, b](Node& n) {
        accumulate(a.node(), n.grad);
        accumulate(b.node(), n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.val();
    const double* pb = b.val().data.data();
    for (int64_t i = 0; i < out.numel(); i++) out.data[i] -= pb[i];
    return make_op(std::move(out), {&a, &b}, [a, b](Node& n) {
        accumulate(a.node(), n.grad);
        if (b.requires_grad()) {
            Tensor g = n.grad;
            for (double& x : g.data) x = -x;
            accumulate(b.node(), g);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a.val();
    const double* pb = b.val().data.data();
    for (int64_t i = 0; i < out.numel(); i++) out.data[i] *= pb[i];
    return make_op(std::move(out), {&a, &b}, [a, b](Node& n) {
        if (a.requires_grad()) {
            Tensor g = n.grad;
            const double* pb2 = b.val().data.data();
            for (int64_t i = 0; i < g.numel(); i++) g.data[i] *= pb2[i];
            accumulate(a.node(), g);
        }
        if (b.requires_grad()) {
            Tensor g = n.grad;
            const double* pa = a.val().data.data();
            for (int64_t i = 0; i < g.numel(); i++) g.data[i] *= pa[i];
            accumulate(b.node(), g);
        }
    });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
    Tensor out = a.val();
    for (double& x : out.data) x *= c;
    return make_op(std::move(out), {&a}, [a, c](Node& n) {
        Tensor g = n.grad;
        for (double& x : g.data) x *= c;
        accumulate(a.node(), g);
    });
}

Var add_scalar(const Var& a, double c) {
    Tensor out = a.val();
    for (double& x : out.data) x += c;
    return make_op(std::move(out), {&a}, [a](Node& n) { accumulate(a.node(), n.grad); });
}

Var silu(const Var& a) {
    Tensor out = a.val();
    for (double& x : out.data) x = x / (1.0 + std::exp(-x));
    return make_op(std::move(out), {&a}, [a](Node& n) {
        Tensor g = n.grad;
        const double* px = a.val().data.data();
        for (int64_t i = 0; i < g.numel(); i++) {
            double s = 1.0 / (1.0 + std::exp(-px[i]));
            g.data[i] *= s * (1.0 + px[i] * (1.0 - s));
        }
        accumulate(a.node(), g);
    });
}

/*--------------------------- linear algebra -------------------------------*/

Var matmul(const Var& a, const Var& b) {
    const auto& sa = a.val().shape;
    const auto& sb = b.val().shape;
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) throw ShapeError("matmul: bad shapes");
    const int64_t m = sa[0], k = sa[1], n = sb[1];
    Tensor out({m, n});
    CMapRM ma(a.val().data.data(), m, k), mb(b.val().data.data(), k, n);
    MapRM(out.data.data(), m, n).noalias() = ma * mb;
    return make_op(std::move(out), {&a, &b}, [a, b, m, k, n](Node& nd) {
        CMapRM gy(nd.grad.data.data(), m, n);
        if (a.requires_grad()) {
            Tensor ga({m, k});
            CMapRM mb2(b.val().data.data(), k, n);
            MapRM(ga.data.data(), m, k).noalias() = gy * mb2.transpose();
            accumulate(a.node(), ga);
        }
        if (b.requires_grad()) {
            Tensor gb({k, n});
            CMapRM ma2(a.val().data.data(), m, k);
            MapRM(gb.data.data(), k, n).noalias() = ma2.transpose() * gy;
            accumulate(b.node(), gb);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const auto& sx = x.val().shape;
    const auto& sw = w.val().shape;
    if (sw.size() != 2 || sx.empty() || sx.back() != sw[1]) throw ShapeError("linear: bad shapes");
    const int64_t din = sw[1], dout = sw[0];
    const int64_t rows = x.val().numel() / din;

    std::vector<int64_t> out_shape(sx.begin(), sx.end() - 1);
    out_shape.push_back(dout);
    Tensor out(out_shape);
    CMapRM mx(x.val().data.data(), rows, din), mw(w.val().data.data(), dout, din);
    MapRM my(out.data.data(), rows, dout);
    my.noalias() = mx * mw.transpose();
    if (b.defined()) {
        const double* pb = b.val().data.data();
        for (int64_t r = 0; r < rows; r++)
            for (int64_t c = 0; c < dout; c++) out.data[r * dout + c] += pb[c];
    }
    return make_op(std::move(out), {&x, &w, &b}, [x, w, b, rows, din, dout](Node& n) {
        CMapRM gy(n.grad.data.data(), rows, dout);
        if (x.requires_grad()) {
            Tensor gx(x.val().shape);
            CMapRM mw2(w.val().data.data(), dout, din);
            MapRM(gx.data.data(), rows, din).noalias() = gy * mw2;
            accumulate(x.node(), gx);
        }
        if (w.requires_grad()) {
            Tensor gw({dout, din});
            CMapRM mx2(x.val().data.data(), rows, din);
            MapRM(gw.data.data(), dout, din).noalias() = gy.transpose() * mx2;
            accumulate(w.node(), gw);
        }
        if (b.defined() && b.requires_grad()) {
            Tensor gb({dout});
            for (int64_t r = 0; r < rows; r++)
                for (int64_t c = 0; c < dout; c++) gb.data[c] += n.grad.data[r * dout + c];
            accumulate(b.node(), gb);
        }
    });
}

namespace {

// cols is row-major [Ci*kh*kw, Ho*Wo] for one sample.
void im2col(const double* img, int64_t C, int64_t H, int64_t W, int kh, int kw, int stride,
            int pad, int64_t Ho, int64_t Wo, double* cols) {
    const int64_t m = Ho * Wo;
    int64_t row = 0;
    for (int64_t ci = 0; ci < C; ci++) {
        for (int ky = 0; ky < kh; ky++) {
            for (int kx = 0; kx < kw; kx++, row++) {
                double* dst = cols + row * m;
                for (int64_t y = 0; y < Ho; y++) {
                    const int64_t iy = y * stride - pad + ky;
                    if (iy < 0 || iy >= H) {
                        for (int64_t xo = 0; xo < Wo; xo++) dst[y * Wo + xo] = 0.0;
                        continue;
                    }
                    const double* src = img + (ci * H + iy) * W;
                    for (int64_t xo = 0; xo < Wo; xo++) {
                        const int64_t ix = xo * stride - pad + kx;
                        dst[y * Wo + xo] = (ix >= 0 && ix < W) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* cols, int64_t C, int64_t H, int64_t W, int kh, int kw, int stride,
                int pad, int64_t Ho, int64_t Wo, double* img) {
    const int64_t m = Ho * Wo;
    int64_t row = 0;
    for (int64_t ci = 0; ci < C; ci++) {
        for (int ky = 0; ky < kh; ky++) {
            for (int kx = 0; kx < kw; kx++, row++) {
                const double* src = cols + row * m;
                for (int64_t y = 0; y < Ho; y++) {
                    const int64_t iy = y * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    double* dst = img + (ci * H + iy) * W;
                    for (int64_t xo = 0; xo < Wo; xo++) {
                        const int64_t ix = xo * stride - pad + kx;
                        if (ix >= 0 && ix < W) dst[ix] += src[y * Wo + xo];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const auto& sx = x.val().shape;
    const auto& sw = w.val().shape;
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1]) throw ShapeError("conv2d: bad shapes");
    const int64_t N = sx[0], C = sx[1], H = sx[2], W = sx[3];
    const int64_t Co = sw[0];
    const int kh = static_cast<int>(sw[2]), kw = static_cast<int>(sw[3]);
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    const int64_t K = C * kh * kw, M = Ho * Wo;

    Tensor out({N, Co, Ho, Wo});
    std::vector<double> cols(K * M);
    CMapRM mw(w.val().data.data(), Co, K);
    for (int64_t n = 0; n < N; n++) {
        im2col(x.val().data.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
               cols.data());
        CMapRM mc(cols.data(), K, M);
        MapRM(out.data.data() + n * Co * M, Co, M).noalias() = mw * mc;
    }
    if (b.defined()) {
        const double* pb = b.val().data.data();
        for (int64_t n = 0; n < N; n++)
            for (int64_t co = 0; co < Co; co++) {
                double* dst = out.data.data() + (n * Co + co) * M;
                for (int64_t i = 0; i < M; i++) dst[i] += pb[co];
            }
    }

    // im2col is recomputed in backward instead of cached: the GEMM dominates
    // and the column buffers would otherwise pin ~K*M doubles per conv node.
    return make_op(std::move(out), {&x, &w, &b},
                   [x, w, b, N, C, H, W, Co, kh, kw, stride, pad, Ho, Wo, K, M](Node& nd) {
        std::vector<double> cols2(K * M);
        Tensor gx, gw, gb;
        if (x.requires_grad()) gx = Tensor::zeros(x.val().shape);
        if (w.requires_grad()) gw = Tensor::zeros({Co, C, (int64_t)kh, (int64_t)kw});
        if (b.defined() && b.requires_grad()) gb = Tensor::zeros({Co});
        CMapRM mw2(w.val().data.data(), Co, K);
        std::vector<double> dcols(K * M);
        for (int64_t n = 0; n < N; n++) {
            CMapRM gy(nd.grad.data.data() + n * Co * M, Co, M);
            if (x.requires_grad()) {
                MapRM(dcols.data(), K, M).noalias() = mw2.transpose() * gy;
                col2im_add(dcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                           gx.data.data() + n * C * H * W);
            }
            if (w.requires_grad()) {
                im2col(x.val().data.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
                       cols2.data());
                CMapRM mc(cols2.data(), K, M);
                MapRM(gw.data.data(), Co, K).noalias() += gy * mc.transpose();
            }
            if (gb.numel() > 0)
                for (int64_t co = 0; co < Co; co++) gb.data[co] += gy.row(co).sum();
        }
        if (gx.numel() > 0) accumulate(x.node(), gx);
        if (gw.numel() > 0) accumulate(w.node(), gw);
        if (gb.numel() > 0) accumulate(b.node(), gb);
    });
}

Var upsample2x(const Var& x) {
    const auto& s = x.val().shape;
    if (s.size() != 4) throw ShapeError("upsample2x: expects NCHW");
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    Tensor out({N, C, H * 2, W * 2});
    for (int64_t nc = 0; nc < N * C; nc++) {
        const double* src = x.val().data.data() + nc * H * W;
        double* dst = out.data.data() + nc * 4 * H * W;
        for (int64_t y = 0; y < H; y++)
            for (int64_t xx = 0; xx < W; xx++) {
                double v = src[y * W + xx];
                double* d = dst + (2 * y) * (2 * W) + 2 * xx;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
    }
    return make_op(std::move(out), {&x}, [x, N, C, H, W](Node& n) {
        Tensor g({N, C, H, W});
        for (int64_t nc = 0; nc < N * C; nc++) {
            const double* src = n.grad.data.data() + nc * 4 * H * W;
            double* dst = g.data.data() + nc * H * W;
            for (int64_t y = 0; y < H; y++)
                for (int64_t xx = 0; xx < W; xx++) {
                    const double* sp = src + (2 * y) * (2 * W) + 2 * xx;
                    dst[y * W + xx] = sp[0] + sp[1] + sp[2 * W] + sp[2 * W + 1];
                }
        }
        accumulate(x.node(), g);
    });
}

Var global_avg_pool(const Var& x) {
    const auto& s = x.val().shape;
    if (s.size() != 4) throw ShapeError("global_avg_pool: expects NCHW");
    const int64_t N = s[0], C = s[1], hw = s[2] * s[3];
    Tensor out({N, C});
    for (int64_t nc = 0; nc < N * C; nc++) {
        const double* src = x.val().data.data() + nc * hw;
        double acc = 0;
        for (int64_t i = 0; i < hw; i++) acc += src[i];
        out.data[nc] = acc / static_cast<double>(hw);
    }
    return make_op(std::move(out), {&x}, [x, N, C, hw](Node& n) {
        Tensor g(x.val().shape);
        for (int64_t nc = 0; nc < N * C; nc++) {
            double v = n.grad.data[nc] / static_cast<double>(hw);
            double* dst = g.data.data() + nc * hw;
            for (int64_t i = 0; i < hw; i++) dst[i] = v;
        }
        accumulate(x.node(), g);
    });
}

/*--------------------------- normalization --------------------------------*/

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const auto& s = x.val().shape;
    if (s.size() != 4 || s[1] % groups != 0) throw ShapeError("group_norm: bad shapes");
    const int64_t N = s[0], C = s[1], hw = s[2] * s[3];
    const int64_t cg = C / groups, gsize = cg * hw;

    Tensor out(s);
    std::vector<double> means(N * groups), invstds(N * groups);
    const double* px = x.val().data.data();
    const double* pg = gamma.val().data.data();
    const double* pb = beta.val().data.data();
    for (int64_t n = 0; n < N; n++) {
        for (int64_t g = 0; g < groups; g++) {
            const double* base = px + (n * C + g * cg) * hw;
            double mean = 0;
            for (int64_t i = 0; i < gsize; i++) mean += base[i];
            mean /= static_cast<double>(gsize);
            double var = 0;
            for (int64_t i = 0; i < gsize; i++) {
                double d = base[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            double inv = 1.0 / std::sqrt(var + eps);
            means[n * groups + g] = mean;
            invstds[n * groups + g] = inv;
            for (int64_t c = 0; c < cg; c++) {
                const int64_t ch = g * cg + c;
                const double* sp = px + (n * C + ch) * hw;
                double* dp = out.data.data() + (n * C + ch) * hw;
                for (int64_t i = 0; i < hw; i++) dp[i] = pg[ch] * (sp[i] - mean) * inv + pb[ch];
            }
        }
    }
    return make_op(std::move(out), {&x, &gamma, &beta},
                   [x, gamma, beta, N, C, hw, groups, cg, gsize, means, invstds](Node& nd) {
        const double* px2 = x.val().data.data();
        const double* pg2 = gamma.val().data.data();
        const double* gy = nd.grad.data.data();
        Tensor gx, ggamma, gbeta;
        if (x.requires_grad()) gx = Tensor::zeros(x.val().shape);
        if (gamma.requires_grad()) ggamma = Tensor::zeros({C});
        if (beta.requires_grad()) gbeta = Tensor::zeros({C});
        std::vector<double> xhat(gsize), gvec(gsize);
        for (int64_t n = 0; n < N; n++) {
            for (int64_t g = 0; g < groups; g++) {
                const double mean = means[n * groups + g], inv = invstds[n * groups + g];
                double sum_g = 0, sum_gx = 0;
                for (int64_t c = 0; c < cg; c++) {
                    const int64_t ch = g * cg + c;
                    const double* sp = px2 + (n * C + ch) * hw;
                    const double* gp = gy + (n * C + ch) * hw;
                    for (int64_t i = 0; i < hw; i++) {
                        const int64_t k = c * hw + i;
                        xhat[k] = (sp[i] - mean) * inv;
                        gvec[k] = gp[i] * pg2[ch];
                        sum_g += gvec[k];
                        sum_gx += gvec[k] * xhat[k];
                        if (ggamma.numel() > 0) ggamma.data[ch] += gp[i] * xhat[k];
                        if (gbeta.numel() > 0) gbeta.data[ch] += gp[i];
                    }
                }
                if (gx.numel() > 0) {
                    const double mg = sum_g / static_cast<double>(gsize);
                    const double mgx = sum_gx / static_cast<double>(gsize);
                    for (int64_t c = 0; c < cg; c++) {
                        const int64_t ch = g * cg + c;
                        double* dp = gx.data.data() + (n * C + ch) * hw;
                        for (int64_t i = 0; i < hw; i++) {
                            const int64_t k = c * hw + i;
                            dp[i] = inv * (gvec[k] - mg - xhat[k] * mgx);
                        }
                    }
                }
            }
        }
        if (gx.numel() > 0) accumulate(x.node(), gx);
        if (ggamma.numel() > 0) accumulate(gamma.node(), ggamma);
        if (gbeta.numel() > 0) accumulate(beta.node(), gbeta);
    });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const auto& s = x.val().shape;
    const int64_t D = s.back();
    const int64_t rows = x.val().numel() / D;
    Tensor out(s);
    std::vector<double> means(rows), invstds(rows);
    const double* px = x.val().data.data();
    const double* pg = gamma.val().data.data();
    const double* pb = beta.val().data.data();
    for (int64_t r = 0; r < rows; r++) {
        const double* sp = px + r * D;
        double mean = 0;
        for (int64_t i = 0; i < D; i++) mean += sp[i];
        mean /= static_cast<double>(D);
        double var = 0;
        for (int64_t i = 0; i < D; i++) {
            double d = sp[i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(D);
        double inv = 1.0 / std::sqrt(var + eps);
        means[r] = mean;
        invstds[r] = inv;
        double* dp = out.data.data() + r * D;
        for (int64_t i = 0; i < D; i++) dp[i] = pg[i] * (sp[i] - mean) * inv + pb[i];
    }
    return make_op(std::move(out), {&x, &gamma, &beta},
                   [x, gamma, beta, rows, D, means, invstds](Node& nd) {
        const double* px2 = x.val().data.data();
        const double* pg2 = gamma.val().data.data();
        const double* gy = nd.grad.data.data();
        Tensor gx, ggamma, gbeta;
        if (x.requires_grad()) gx = Tensor::zeros(x.val().shape);
        if (gamma.requires_grad()) ggamma = Tensor::zeros({D});
        if (beta.requires_grad()) gbeta = Tensor::zeros({D});
        for (int64_t r = 0; r < rows; r++) {
            const double mean = means[r], inv = invstds[r];
            const double* sp = px2 + r * D;
            const double* gp = gy + r * D;
            double sum_g = 0, sum_gx = 0;
            for (int64_t i = 0; i < D; i++) {
                const double xh = (sp[i] - mean) * inv;
                const double gv = gp[i] * pg2[i];
                sum_g += gv;
                sum_gx += gv * xh;
                if (ggamma.numel() > 0) ggamma.data[i] += gp[i] * xh;
                if (gbeta.numel() > 0) gbeta.data[i] += gp[i];
            }
            if (gx.numel() > 0) {
                double* dp = gx.data.data() + r * D;
                const double mg = sum_g / static_cast<double>(D);
                const double mgx = sum_gx / static_cast<double>(D);
                for (int64_t i = 0; i < D; i++) {
                    const double xh = (sp[i] - mean) * inv;
                    dp[i] = inv * (gp[i] * pg2[i] - mg - xh * mgx);
                }
            }
        }
        if (gx.numel() > 0) accumulate(x.node(), gx);
        if (ggamma.numel() > 0) accumulate(gamma.node(), ggamma);
        if (gbeta.numel() > 0) accumulate(beta.node(), gbeta);
    });
}

Var l2_normalize_rows(const Var& x, double eps) {
    const auto& s = x.val().shape;
    const int64_t D = s.back();
    const int64_t rows = x.val().numel() / D;
    Tensor out(s);
    std::vector<double> rnorm(rows);
    const double* px = x.val().data.data();
    for (int64_t r = 0; r < rows; r++) {
        const double* sp = px + r * D;
        double ss = eps;
        for (int64_t i = 0; i < D; i++) ss += sp[i] * sp[i];
        const double rn = std::sqrt(ss);
        rnorm[r] = rn;
        double* dp = out.data.data() + r * D;
        for (int64_t i = 0; i < D; i++) dp[i] = sp[i] / rn;
    }
    return make_op(std::move(out), {&x}, [x, rows, D, rnorm](Node& nd) {
        Tensor gx(x.val().shape);
        const double* gy = nd.grad.data.data();
        const double* py = nd.value.data.data();
        for (int64_t r = 0; r < rows; r++) {
            const double* yp = py + r * D;
            const double* gp = gy + r * D;
            double dot = 0;
            for (int64_t i = 0; i < D; i++) dot += yp[i] * gp[i];
            double* dp = gx.data.data() + r * D;
            for (int64_t i = 0; i < D; i++) dp[i] = (gp[i] - yp[i] * dot) / rnorm[r];
        }
        accumulate(x.node(), gx);
    });
}

/*----------------------------- attention ----------------------------------*/

Var masked_attention(const Var& q, const Var& k, const Var& v, const std::vector<uint8_t>& mask) {
    const auto& sq = q.val().shape;
    const auto& sk = k.val().shape;
    if (sq.size() != 3 || sk.size() != 3 || sq[0] != sk[0] || sq[2] != sk[2] ||
        !k.val().same_shape(v.val()))
        throw ShapeError("masked_attention: bad shapes");
    const int64_t N = sq[0], Lq = sq[1], Lk = sk[1], D = sq[2];
    if (static_cast<int64_t>(mask.size()) != N * Lk)
        throw ShapeError("masked_attention: mask size mismatch");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

    Tensor out({N, Lq, D});
    Tensor attn({N, Lq, Lk});  // cached weights, exactly 0 on masked lanes
    for (int64_t n = 0; n < N; n++) {
        CMapRM mq(q.val().data.data() + n * Lq * D, Lq, D);
        CMapRM mk(k.val().data.data() + n * Lk * D, Lk, D);
        CMapRM mv(v.val().data.data() + n * Lk * D, Lk, D);
        const uint8_t* msk = mask.data() + n * Lk;
        MatRM scores = (mq * mk.transpose()) * inv_sqrt_d;
        MapRM ma(attn.data.data() + n * Lq * Lk, Lq, Lk);
        for (int64_t i = 0; i < Lq; i++) {
            double mx = -1e300;
            for (int64_t j = 0; j < Lk; j++)
                if (msk[j] && scores(i, j) > mx) mx = scores(i, j);
            double denom = 0;
            for (int64_t j = 0; j < Lk; j++) {
                double w = msk[j] ? std::exp(scores(i, j) - mx) : 0.0;
                ma(i, j) = w;
                denom += w;
            }
            if (denom > 0)
                for (int64_t j = 0; j < Lk; j++) ma(i, j) /= denom;
            // all lanes masked: attention row stays identically zero
        }
        MapRM(out.data.data() + n * Lq * D, Lq, D).noalias() = ma * mv;
    }
    return make_op(std::move(out), {&q, &k, &v},
                   [q, k, v, attn, N, Lq, Lk, D, inv_sqrt_d](Node& nd) {
        Tensor gq, gk, gv;
        if (q.requires_grad()) gq = Tensor::zeros(q.val().shape);
        if (k.requires_grad()) gk = Tensor::zeros(k.val().shape);
        if (v.requires_grad()) gv = Tensor::zeros(v.val().shape);
        for (int64_t n = 0; n < N; n++) {
            CMapRM ma(attn.data.data() + n * Lq * Lk, Lq, Lk);
            CMapRM go(nd.grad.data.data() + n * Lq * D, Lq, D);
            CMapRM mv(v.val().data.data() + n * Lk * D, Lk, D);
            if (gv.numel() > 0)
                MapRM(gv.data.data() + n * Lk * D, Lk, D).noalias() += ma.transpose() * go;
            if (gq.numel() > 0 || gk.numel() > 0) {
                MatRM dattn = go * mv.transpose();  // [Lq,Lk]
                // softmax backward; zero rows/lanes stay zero
                MatRM dscore(Lq, Lk);
                for (int64_t i = 0; i < Lq; i++) {
                    double dot = 0;
                    for (int64_t j = 0; j < Lk; j++) dot += dattn(i, j) * ma(i, j);
                    for (int64_t j = 0; j < Lk; j++)
                        dscore(i, j) = ma(i, j) * (dattn(i, j) - dot) * inv_sqrt_d;
                }
                CMapRM mq(q.val().data.data() + n * Lq * D, Lq, D);
                CMapRM mk(k.val().data.data() + n * Lk * D, Lk, D);
                if (gq.numel() > 0)
                    MapRM(gq.data.data() + n * Lq * D, Lq, D).noalias() += dscore * mk;
                if (gk.numel() > 0)
                    MapRM(gk.data.data() + n * Lk * D, Lk, D).noalias() += dscore.transpose() * mq;
            }
        }
        if (gq.numel() > 0) accumulate(q.node(), gq);
        if (gk.numel() > 0) accumulate(k.node(), gk);
        if (gv.numel() > 0) accumulate(v.node(), gv);
    });
}

/*------------------------------- shape ------------------------------------*/

Var reshape(const Var& x, std::vector<int64_t> shape) {
    if (Tensor::count(shape) != x.val().numel()) throw ShapeError("reshape: numel mismatch");
    Tensor out(std::move(shape), x.val().data);
    return make_op(std::move(out), {&x}, [x](Node& n) {
        Tensor g(x.val().shape, n.grad.data);
        accumulate(x.node(), g);
    });
}

namespace {
void axis_extents(const std::vector<int64_t>& shape, int axis, int64_t& outer, int64_t& inner) {
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; i++) outer *= shape[i];
    for (size_t i = axis + 1; i < shape.size(); i++) inner *= shape[i];
}
}  // namespace

Var concat(const Var& a, const Var& b, int axis) {
    const auto& sa = a.val().shape;
    const auto& sb = b.val().shape;
    if (sa.size() != sb.size()) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < sa.size(); i++)
        if (static_cast<int>(i) != axis && sa[i] != sb[i]) throw ShapeError("concat: dim mismatch");
    std::vector<int64_t> so = sa;
    so[axis] = sa[axis] + sb[axis];
    int64_t outer, inner;
    axis_extents(sa, axis, outer, inner);
    const int64_t wa = sa[axis] * inner, wb = sb[axis] * inner, wo = wa + wb;
    Tensor out(so);
    for (int64_t o = 0; o < outer; o++) {
        std::copy_n(a.val().data.data() + o * wa, wa, out.data.data() + o * wo);
        std::copy_n(b.val().data.data() + o * wb, wb, out.data.data() + o * wo + wa);
    }
    return make_op(std::move(out), {&a, &b}, [a, b, outer, wa, wb, wo](Node& n) {
        if (a.requires_grad()) {
            Tensor g(a.val().shape);
            for (int64_t o = 0; o < outer; o++)
                std::copy_n(n.grad.data.data() + o * wo, wa, g.data.data() + o * wa);
            accumulate(a.node(), g);
        }
        if (b.requires_grad()) {
            Tensor g(b.val().shape);
            for (int64_t o = 0; o < outer; o++)
                std::copy_n(n.grad.data.data() + o * wo + wa, wb, g.data.data() + o * wb);
            accumulate(b.node(), g);
        }
    });
}

Var slice(const Var& x, int axis, int64_t start, int64_t len) {
    const auto& s = x.val().shape;
    if (start < 0 || start + len > s[axis]) throw ShapeError("slice: out of range");
    std::vector<int64_t> so = s;
    so[axis] = len;
    int64_t outer, inner;
    axis_extents(s, axis, outer, inner);
    const int64_t wi = s[axis] * inner, wo = len * inner, off = start * inner;
    Tensor out(so);
    for (int64_t o = 0; o < outer; o++)
        std::copy_n(x.val().data.data() + o * wi + off, wo, out.data.data() + o * wo);
    return make_op(std::move(out), {&x}, [x, outer, wi, wo, off](Node& n) {
        Tensor g = Tensor::zeros(x.val().shape);
        for (int64_t o = 0; o < outer; o++)
            std::copy_n(n.grad.data.data() + o * wo, wo, g.data.data() + o * wi + off);
        accumulate(x.node(), g);
    });
}

Var chw_to_tokens(const Var& x) {
    const auto& s = x.val().shape;
    if (s.size() != 4) throw ShapeError("chw_to_tokens: expects NCHW");
    const int64_t N = s[0], C = s[1], L = s[2] * s[3];
    Tensor out({N, L, C});
    for (int64_t n = 0; n < N; n++)
        for (int64_t c = 0; c < C; c++) {
            const double* src = x.val().data.data() + (n * C + c) * L;
            double* dst = out.data.data() + n * L * C + c;
            for (int64_t l = 0; l < L; l++) dst[l * C] = src[l];
        }
    return make_op(std::move(out), {&x}, [x, N, C, L](Node& nd) {
        Tensor g(x.val().shape);
        for (int64_t n = 0; n < N; n++)
            for (int64_t c = 0; c < C; c++) {
                double* dst = g.data.data() + (n * C + c) * L;
                const double* src = nd.grad.data.data() + n * L * C + c;
                for (int64_t l = 0; l < L; l++) dst[l] = src[l * C];
            }
        accumulate(x.node(), g);
    });
}

Var tokens_to_chw(const Var& x, int64_t c, int64_t h, int64_t w) {
    const auto& s = x.val().shape;
    if (s.size() != 3 || s[1] != h * w || s[2] != c) throw ShapeError("tokens_to_chw: bad shapes");
    const int64_t N = s[0], L = h * w;
    Tensor out({N, c, h, w});
    for (int64_t n = 0; n < N; n++)
        for (int64_t ch = 0; ch < c; ch++) {
            double* dst = out.data.data() + (n * c + ch) * L;
            const double* src = x.val().data.data() + n * L * c + ch;
            for (int64_t l = 0; l < L; l++) dst[l] = src[l * c];
        }
    return make_op(std::move(out), {&x}, [x, N, c, L](Node& nd) {
        Tensor g(x.val().shape);
        for (int64_t n = 0; n < N; n++)
            for (int64_t ch = 0; ch < c; ch++) {
                const double* src = nd.grad.data.data() + (n * c + ch) * L;
                double* dst = g.data.data() + n * L * c + ch;
                for (int64_t l = 0; l < L; l++) dst[l * c] = src[l];
            }
        accumulate(x.node(), g);
    });
}

namespace {
// token features ordered channel-major: (c, py, px)
void patch_copy(const double* img, int64_t C, int64_t H, int64_t W, int p, double* tokens,
                bool forward) {
    const int64_t gw = W / p;
    const int64_t F = C * p * p;
    for (int64_t c = 0; c < C; c++)
        for (int64_t y = 0; y < H; y++)
            for (int64_t x = 0; x < W; x++) {
                const int64_t l = (y / p) * gw + (x / p);
                const int64_t f = (c * p + (y % p)) * p + (x % p);
                if (forward)
                    tokens[l * F + f] = img[(c * H + y) * W + x];
                else
                    const_cast<double*>(img)[(c * H + y) * W + x] = tokens[l * F + f];
            }
}
}  // namespace

Var patchify(const Var& x, int p) {
    const auto& s = x.val().shape;
    if (s.size() != 4 || s[2] % p != 0 || s[3] % p != 0) throw ShapeError("patchify: bad shapes");
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    const int64_t L = (H / p) * (W / p), F = C * p * p;
    Tensor out({N, L, F});
    for (int64_t n = 0; n < N; n++)
        patch_copy(x.val().data.data() + n * C * H * W, C, H, W, p,
                   out.data.data() + n * L * F, true);
    return make_op(std::move(out), {&x}, [x, N, C, H, W, p, L, F](Node& nd) {
        Tensor g(x.val().shape);
        for (int64_t n = 0; n < N; n++)
            patch_copy(g.data.data() + n * C * H * W, C, H, W, p,
                       const_cast<double*>(nd.grad.data.data()) + n * L * F, false);
        accumulate(x.node(), g);
    });
}

Var unpatchify(const Var& x, int64_t c, int64_t h, int64_t w, int p) {
    const auto& s = x.val().shape;
    const int64_t L = (h / p) * (w / p), F = c * p * p;
    if (s.size() != 3 || s[1] != L || s[2] != F) throw ShapeError("unpatchify: bad shapes");
    const int64_t N = s[0];
    Tensor out({N, c, h, w});
    for (int64_t n = 0; n < N; n++)
        patch_copy(out.data.data() + n * c * h * w, c, h, w, p,
                   const_cast<double*>(x.val().data.data()) + n * L * F, false);
    return make_op(std::move(out), {&x, }, [x, N, c, h, w, p, L, F](Node& nd) {
        Tensor g(x.val().shape);
        for (int64_t n = 0; n < N; n++)
            patch_copy(nd.grad.data.data() + n * c * h * w, c, h, w, p,
                       g.data.data() + n * L * F, true);
        accumulate(x.node(), g);
    });
}

/*-------------------------- indexed / per-sample --------------------------*/

Var gather_rows(const Var& table, const std::vector<int64_t>& idx) {
    const auto& s = table.val().shape;
    if (s.size() != 2) throw ShapeError("gather_rows: table must be 2-D");
    const int64_t D = s[1], N = static_cast<int64_t>(idx.size());
    Tensor out({N, D});
    for (int64_t n = 0; n < N; n++)
        std::copy_n(table.val().data.data() + idx[n] * D, D, out.data.data() + n * D);
    return make_op(std::move(out), {&table}, [table, idx, N, D](Node& nd) {
        Tensor g = Tensor::zeros(table.val().shape);
        for (int64_t n = 0; n < N; n++) {
            const double* src = nd.grad.data.data() + n * D;
            double* dst = g.data.data() + idx[n] * D;
            for (int64_t i = 0; i < D; i++) dst[i] += src[i];
        }
        accumulate(table.node(), g);
    });
}

Var rows_scale(const Var& x, const Var& s) {
    const int64_t N = x.val().shape[0];
    if (s.val().numel() != N) throw ShapeError("rows_scale: scale length mismatch");
    const int64_t B = x.val().numel() / N;
    Tensor out = x.val();
    for (int64_t n = 0; n < N; n++) {
        const double c = s.val().data[n];
        double* p = out.data.data() + n * B;
        for (int64_t i = 0; i < B; i++) p[i] *= c;
    }
    return make_op(std::move(out), {&x, &s}, [x, s, N, B](Node& nd) {
        if (x.requires_grad()) {
            Tensor g = nd.grad;
            for (int64_t n = 0; n < N; n++) {
                const double c = s.val().data[n];
                double* p = g.data.data() + n * B;
                for (int64_t i = 0; i < B; i++) p[i] *= c;
            }
            accumulate(x.node(), g);
        }
        if (s.requires_grad()) {
            Tensor g(s.val().shape);
            for (int64_t n = 0; n < N; n++) {
                double acc = 0;
                const double* gp = nd.grad.data.data() + n * B;
                const double* xp = x.val().data.data() + n * B;
                for (int64_t i = 0; i < B; i++) acc += gp[i] * xp[i];
                g.data[n] = acc;
            }
            accumulate(s.node(), g);
        }
    });
}

Var rows_dot(const Var& a, const Var& b) {
    check_same_shape(a, b, "rows_dot");
    const int64_t N = a.val().shape[0];
    const int64_t D = a.val().numel() / N;
    Tensor out({N});
    for (int64_t n = 0; n < N; n++) {
        const double* pa = a.val().data.data() + n * D;
        const double* pb = b.val().data.data() + n * D;
        double acc = 0;
        for (int64_t i = 0; i < D; i++) acc += pa[i] * pb[i];
        out.data[n] = acc;
    }
    return make_op(std::move(out), {&a, &b}, [a, b, N, D](Node& nd) {
        for (int pass = 0; pass < 2; pass++) {
            const Var& dst = pass == 0 ? a : b;
            const Var& other = pass == 0 ? b : a;
            if (!dst.requires_grad()) continue;
            Tensor g(dst.val().shape);
            for (int64_t n = 0; n < N; n++) {
                const double c = nd.grad.data[n];
                const double* po = other.val().data.data() + n * D;
                double* pg = g.data.data() + n * D;
                for (int64_t i = 0; i < D; i++) pg[i] = c * po[i];
            }
            accumulate(dst.node(), g);
        }
    });
}

Var add_channel_bias(const Var& x, const Var& bias) {
    const auto& s = x.val().shape;
    if (s.size() != 4 || bias.val().shape != std::vector<int64_t>{s[0], s[1]})
        throw ShapeError("add_channel_bias: bad shapes");
    const int64_t NC = s[0] * s[1], hw = s[2] * s[3];
    Tensor out = x.val();
    for (int64_t nc = 0; nc < NC; nc++) {
        const double v = bias.val().data[nc];
        double* p = out.data.data() + nc * hw;
        for (int64_t i = 0; i < hw; i++) p[i] += v;
    }
    return make_op(std::move(out), {&x, &bias}, [x, bias, NC, hw](Node& nd) {
        accumulate(x.node(), nd.grad);
        if (bias.requires_grad()) {
            Tensor g(bias.val().shape);
            for (int64_t nc = 0; nc < NC; nc++) {
                const double* gp = nd.grad.data.data() + nc * hw;
                double acc = 0;
                for (int64_t i = 0; i < hw; i++) acc += gp[i];
                g.data[nc] = acc;
            }
            accumulate(bias.node(), g);
        }
    });
}

Var select_tokens(const std::vector<uint8_t>& cond, const Var& a, const Var& b) {
    check_same_shape(a, b, "select_tokens");
    const auto& s = a.val().shape;
    if (s.size() != 3 || static_cast<int64_t>(cond.size()) != s[0] * s[1])
        throw ShapeError("select_tokens: bad shapes");
    const int64_t NL = s[0] * s[1], D = s[2];
    Tensor out(s);
    for (int64_t t = 0; t < NL; t++) {
        const double* src = (cond[t] ? a : b).val().data.data() + t * D;
        std::copy_n(src, D, out.data.data() + t * D);
    }
    return make_op(std::move(out), {&a, &b}, [a, b, cond, NL, D](Node& nd) {
        for (int pass = 0; pass < 2; pass++) {
            const Var& dst = pass == 0 ? a : b;
            if (!dst.requires_grad()) continue;
            Tensor g = Tensor::zeros(dst.val().shape);
            for (int64_t t = 0; t < NL; t++) {
                if ((cond[t] != 0) != (pass == 0)) continue;
                std::copy_n(nd.grad.data.data() + t * D, D, g.data.data() + t * D);
            }
            accumulate(dst.node(), g);
        }
    });
}

/*-------------------------- reductions / losses ---------------------------*/

Var sum_all(const Var& x) {
    double acc = 0;
    for (double v : x.val().data) acc += v;
    return make_op(Tensor::scalar(acc), {&x}, [x](Node& nd) {
        Tensor g = Tensor::full(x.val().shape, nd.grad.data[0]);
        accumulate(x.node(), g);
    });
}

Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.val().numel())); }

Var l1_loss(const Var& a, const Var& b) {
    check_same_shape(a, b, "l1_loss");
    const int64_t n = a.val().numel();
    double acc = 0;
    for (int64_t i = 0; i < n; i++) acc += std::abs(a.val().data[i] - b.val().data[i]);
    acc /= static_cast<double>(n);
    return make_op(Tensor::scalar(acc), {&a, &b}, [a, b, n](Node& nd) {
        const double c = nd.grad.data[0] / static_cast<double>(n);
        for (int pass = 0; pass < 2; pass++) {
            const Var& dst = pass == 0 ? a : b;
            if (!dst.requires_grad()) continue;
            const double sgn = pass == 0 ? 1.0 : -1.0;
            Tensor g(dst.val().shape);
            for (int64_t i = 0; i < n; i++) {
                const double d = a.val().data[i] - b.val().data[i];
                g.data[i] = c * sgn * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
            }
            accumulate(dst.node(), g);
        }
    });
}

Var mse_loss(const Var& a, const Var& b) {
    check_same_shape(a, b, "mse_loss");
    const int64_t n = a.val().numel();
    double acc = 0;
    for (int64_t i = 0; i < n; i++) {
        const double d = a.val().data[i] - b.val().data[i];
        acc += d * d;
    }
    acc /= static_cast<double>(n);
    return make_op(Tensor::scalar(acc), {&a, &b}, [a, b, n](Node& nd) {
        const double c = 2.0 * nd.grad.data[0] / static_cast<double>(n);
        for (int pass = 0; pass < 2; pass++) {
            const Var& dst = pass == 0 ? a : b;
            if (!dst.requires_grad()) continue;
            const double sgn = pass == 0 ? 1.0 : -1.0;
            Tensor g(dst.val().shape);
            for (int64_t i = 0; i < n; i++)
                g.data[i] = c * sgn * (a.val().data[i] - b.val().data[i]);
            accumulate(dst.node(), g);
        }
    });
}

Var softmax_xent(const Var& logits, const std::vector<int64_t>& labels) {
    const auto& s = logits.val().shape;
    if (s.size() != 2 || static_cast<int64_t>(labels.size()) != s[0])
        throw ShapeError("softmax_xent: bad shapes");
    const int64_t N = s[0], C = s[1];
    Tensor probs({N, C});
    double loss = 0;
    for (int64_t n = 0; n < N; n++) {
        const double* lp = logits.val().data.data() + n * C;
        double mx = lp[0];
        for (int64_t c = 1; c < C; c++) mx = std::max(mx, lp[c]);
        double denom = 0;
        for (int64_t c = 0; c < C; c++) denom += std::exp(lp[c] - mx);
        const double log_denom = std::log(denom);
        for (int64_t c = 0; c < C; c++) probs.data[n * C + c] = std::exp(lp[c] - mx) / denom;
        loss -= lp[labels[n]] - mx - log_denom;
    }
    loss /= static_cast<double>(N);
    return make_op(Tensor::scalar(loss), {&logits}, [logits, labels, probs, N, C](Node& nd) {
        Tensor g({N, C});
        const double c0 = nd.grad.data[0] / static_cast<double>(N);
        for (int64_t n = 0; n < N; n++)
            for (int64_t c = 0; c < C; c++)
                g.data[n * C + c] =
                    c0 * (probs.data[n * C + c] - (c == labels[n] ? 1.0 : 0.0));
        accumulate(logits.node(), g);
    });
}

Var arc_margin(const Var& cos_logits, const std::vector<int64_t>& labels, double margin) {
    const auto& s = cos_logits.val().shape;
    if (s.size() != 2 || static_cast<int64_t>(labels.size()) != s[0])
        throw ShapeError("arc_margin: bad shapes");
    const int64_t N = s[0], C = s[1];
    const double cm = std::cos(margin), sm = std::sin(margin);
    Tensor out = cos_logits.val();
    std::vector<double> dtarget(N, 1.0);
    for (int64_t n = 0; n < N; n++) {
        const double cosv = out.data[n * C + labels[n]];
        if (cosv > 0) {
            const double sinv = std::sqrt(std::max(1.0 - cosv * cosv, 1e-12));
            out.data[n * C + labels[n]] = cosv * cm - sinv * sm;
            dtarget[n] = cm + cosv / sinv * sm;
        }
    }
    return make_op(std::move(out), {&cos_logits}, [cos_logits, labels, dtarget, N, C](Node& nd) {
        Tensor g = nd.grad;
        for (int64_t n = 0; n < N; n++) g.data[n * C + labels[n]] *= dtarget[n];
        accumulate(cos_logits.node(), g);
    });
}

}  // namespace refface::ad
