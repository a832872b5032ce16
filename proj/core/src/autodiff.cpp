#include "xfake/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace xfake::ad {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using CMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

namespace {

thread_local int g_no_grad_depth = 0;

NodePtr make_node(Tensor value, std::vector<NodePtr> inputs, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rg = grad_enabled();
    if (rg) {
        rg = false;
        for (const auto& in : inputs)
            if (in->requires_grad) rg = true;
    }
    if (rg) {
        n->requires_grad = true;
        n->inputs = std::move(inputs);
        n->backward = std::move(bw);
    }
    return n;
}

}  // namespace

void Node::accumulate(const Tensor& g) {
    if (grad.empty()) grad = Tensor(value.shape());
    const int64_t n = grad.size();
    double* dst = grad.data();
    const double* src = g.data();
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

Var Var::leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(n);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

void backward(const Var& root) {
    if (root.value().size() != 1) throw InvalidArgument("backward: root must be a scalar");
    if (!root.requires_grad()) return;

    // iterative post-order topo sort
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->inputs.size()) {
            Node* next = node->inputs[idx++].get();
            if (next->requires_grad && !visited.count(next)) {
                visited.insert(next);
                stack.emplace_back(next, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.node()->grad = Tensor({1}, {1.0});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

namespace {

Var unary_op(const Var& a, std::function<double(double)> f,
             std::function<double(double /*x*/, double /*y*/)> dfdx) {
    Tensor out(a.shape());
    const int64_t n = out.size();
    for (int64_t i = 0; i < n; ++i) out[i] = f(a.value()[i]);
    NodePtr an = a.node();
    return Var(make_node(std::move(out), {an}, [an, dfdx](Node& self) {
        Tensor g(self.value.shape());
        for (int64_t i = 0; i < g.size(); ++i)
            g[i] = self.grad[i] * dfdx(an->value[i], self.value[i]);
        an->accumulate(g);
    }));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.value().same_shape(b.value()))
        throw InvalidArgument(std::string(op) + ": shape mismatch");
}

}  // namespace

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    NodePtr an = a.node(), bn = b.node();
    return Var(make_node(std::move(out), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (bn->requires_grad) bn->accumulate(self.grad);
    }));
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
    NodePtr an = a.node(), bn = b.node();
    return Var(make_node(std::move(out), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (bn->requires_grad) {
            Tensor g(self.value.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = -self.grad[i];
            bn->accumulate(g);
        }
    }));
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    NodePtr an = a.node(), bn = b.node();
    return Var(make_node(std::move(out), {an, bn}, [an, bn](Node& self) {
        if (an->requires_grad) {
            Tensor g(self.value.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * bn->value[i];
            an->accumulate(g);
        }
        if (bn->requires_grad) {
            Tensor g(self.value.shape());
            for (int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * an->value[i];
            bn->accumulate(g);
        }
    }));
}

Var add_scalar(const Var& a, double s) {
    return unary_op(
        a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_scalar(const Var& a, double s) {
    return unary_op(
        a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var square(const Var& a) {
    return unary_op(
        a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt_floor(const Var& a, double floor) {
    return unary_op(
        a, [floor](double x) { return std::sqrt(std::max(x, floor)); },
        [floor](double x, double y) { return x > floor ? 0.5 / y : 0.0; });
}

Var exp_(const Var& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log_(const Var& a) {
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs_(const Var& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var relu(const Var& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, double slope) {
    return unary_op(
        a, [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& a) {
    return unary_op(
        a,
        [](double x) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& a) {
    // log(1 + e^x), overflow-safe
    return unary_op(
        a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
        [](double x, double) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
}

Var clamp_min(const Var& a, double m) {
    return unary_op(
        a, [m](double x) { return std::max(x, m); },
        [m](double x, double) { return x > m ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions / shape
// ---------------------------------------------------------------------------

Var sum(const Var& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a.value().size(); ++i) s += a.value()[i];
    NodePtr an = a.node();
    return Var(make_node(Tensor::scalar(s), {an}, [an](Node& self) {
        Tensor g = Tensor::full(an->value.shape(), self.grad[0]);
        an->accumulate(g);
    }));
}

Var mean(const Var& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_rows(const Var& a) {
    if (a.value().ndim() != 2) throw InvalidArgument("sum_rows: expects 2-D tensor");
    const int n = a.value().dim(0), d = a.value().dim(1);
    Tensor out({n});
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += a.value()[static_cast<int64_t>(i) * d + j];
        out[i] = s;
    }
    NodePtr an = a.node();
    return Var(make_node(std::move(out), {an}, [an, n, d](Node& self) {
        Tensor g({n, d});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) g[static_cast<int64_t>(i) * d + j] = self.grad[i];
        an->accumulate(g);
    }));
}

Var reshape(const Var& a, std::vector<int> shape) {
    if (Tensor::count(shape) != a.value().size()) throw InvalidArgument("reshape: size mismatch");
    Tensor out(std::move(shape));
    std::copy(a.value().data(), a.value().data() + a.value().size(), out.data());
    NodePtr an = a.node();
    return Var(make_node(std::move(out), {an}, [an](Node& self) {
        Tensor g(an->value.shape());
        std::copy(self.grad.data(), self.grad.data() + self.grad.size(), g.data());
        an->accumulate(g);
    }));
}

Var detach(const Var& a) { return Var::leaf(a.value(), false); }

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    if (a.value().ndim() != 2 || b.value().ndim() != 2 || a.value().dim(1) != b.value().dim(0))
        throw InvalidArgument("matmul: incompatible shapes");
    const int m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
    Tensor out({m, n});
    {
        CMatMap am(a.value().data(), m, k), bm(b.value().data(), k, n);
        MatMap om(out.data(), m, n);
        om.noalias() = am * bm;
    }
    NodePtr an = a.node(), bn = b.node();
    return Var(make_node(std::move(out), {an, bn}, [an, bn, m, k, n](Node& self) {
        CMatMap g(self.grad.data(), m, n);
        if (an->requires_grad) {
            Tensor ga({m, k});
            CMatMap bm(bn->value.data(), k, n);
            MatMap gm(ga.data(), m, k);
            gm.noalias() = g * bm.transpose();
            an->accumulate(ga);
        }
        if (bn->requires_grad) {
            Tensor gb({k, n});
            CMatMap am(an->value.data(), m, k);
            MatMap gm(gb.data(), k, n);
            gm.noalias() = am.transpose() * g;
            bn->accumulate(gb);
        }
    }));
}

Var linear(const Var& x, const Var& w, const Var& b) {
    if (x.value().ndim() != 2 || w.value().ndim() != 2 || x.value().dim(1) != w.value().dim(1) ||
        b.value().ndim() != 1 || b.value().dim(0) != w.value().dim(0))
        throw InvalidArgument("linear: incompatible shapes");
    const int n = x.value().dim(0), f = x.value().dim(1), o = w.value().dim(0);
    Tensor out({n, o});
    {
        CMatMap xm(x.value().data(), n, f), wm(w.value().data(), o, f);
        MatMap om(out.data(), n, o);
        om.noalias() = xm * wm.transpose();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < o; ++j) out.at(i, j) += b.value()[j];
    }
    NodePtr xn = x.node(), wn = w.node(), bn = b.node();
    return Var(make_node(std::move(out), {xn, wn, bn}, [xn, wn, bn, n, f, o](Node& self) {
        CMatMap g(self.grad.data(), n, o);
        if (xn->requires_grad) {
            Tensor gx({n, f});
            CMatMap wm(wn->value.data(), o, f);
            MatMap gm(gx.data(), n, f);
            gm.noalias() = g * wm;
            xn->accumulate(gx);
        }
        if (wn->requires_grad) {
            Tensor gw({o, f});
            CMatMap xm(xn->value.data(), n, f);
            MatMap gm(gw.data(), o, f);
            gm.noalias() = g.transpose() * xm;
            wn->accumulate(gw);
        }
        if (bn->requires_grad) {
            Tensor gb({o});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < o; ++j) gb[j] += self.grad[static_cast<int64_t>(i) * o + j];
            bn->accumulate(gb);
        }
    }));
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
    int n, c, h, w;    // input
    int o, kh, kw;     // kernel
    int stride, pad;
    int ho, wo;        // output
    int ckk() const { return c * kh * kw; }
};

ConvGeom conv_geom(const Tensor& x, const Tensor& wt, int stride, int pad) {
    if (x.ndim() != 4 || wt.ndim() != 4) throw InvalidArgument("conv2d: expects 4-D tensors");
    ConvGeom g;
    g.n = x.dim(0);
    g.c = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.o = wt.dim(0);
    g.kh = wt.dim(2);
    g.kw = wt.dim(3);
    g.stride = stride;
    g.pad = pad;
    if (wt.dim(1) != g.c) throw InvalidArgument("conv2d: channel mismatch");
    g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
    g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
    if (g.ho <= 0 || g.wo <= 0) throw InvalidArgument("conv2d: kernel larger than padded input");
    return g;
}

// Gathers one sample's patches into col [C*kh*kw, Ho*Wo].
void im2col(const double* x, const ConvGeom& g, double* col) {
    const int how = g.ho * g.wo;
    for (int c = 0; c < g.c; ++c) {
        const double* xc = x + static_cast<int64_t>(c) * g.h * g.w;
        for (int i = 0; i < g.kh; ++i) {
            for (int j = 0; j < g.kw; ++j) {
                double* row = col + static_cast<int64_t>((c * g.kh + i) * g.kw + j) * how;
                for (int y = 0; y < g.ho; ++y) {
                    const int iy = y * g.stride - g.pad + i;
                    double* dst = row + static_cast<int64_t>(y) * g.wo;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.wo, 0.0);
                        continue;
                    }
                    const double* src = xc + static_cast<int64_t>(iy) * g.w;
                    for (int xo = 0; xo < g.wo; ++xo) {
                        const int ix = xo * g.stride - g.pad + j;
                        dst[xo] = (ix >= 0 && ix < g.w) ? src[ix] : 0.0;
                    }
                }
            }
        }
    }
}

// Scatters col gradients back onto one sample's input gradient.
void col2im_acc(const double* col, const ConvGeom& g, double* gx) {
    const int how = g.ho * g.wo;
    for (int c = 0; c < g.c; ++c) {
        double* xc = gx + static_cast<int64_t>(c) * g.h * g.w;
        for (int i = 0; i < g.kh; ++i) {
            for (int j = 0; j < g.kw; ++j) {
                const double* row = col + static_cast<int64_t>((c * g.kh + i) * g.kw + j) * how;
                for (int y = 0; y < g.ho; ++y) {
                    const int iy = y * g.stride - g.pad + i;
                    if (iy < 0 || iy >= g.h) continue;
                    double* dst = xc + static_cast<int64_t>(iy) * g.w;
                    const double* src = row + static_cast<int64_t>(y) * g.wo;
                    for (int xo = 0; xo < g.wo; ++xo) {
                        const int ix = xo * g.stride - g.pad + j;
                        if (ix >= 0 && ix < g.w) dst[ix] += src[xo];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, int stride, int pad) {
    const ConvGeom g = conv_geom(x.value(), w.value(), stride, pad);
    const int how = g.ho * g.wo;
    Tensor out({g.n, g.o, g.ho, g.wo});
    std::vector<double> col(static_cast<size_t>(g.ckk()) * how);
    {
        CMatMap wm(w.value().data(), g.o, g.ckk());
        for (int n = 0; n < g.n; ++n) {
            im2col(x.value().data() + static_cast<int64_t>(n) * g.c * g.h * g.w, g, col.data());
            CMatMap cm(col.data(), g.ckk(), how);
            MatMap om(out.data() + static_cast<int64_t>(n) * g.o * how, g.o, how);
            om.noalias() = wm * cm;
        }
    }
    NodePtr xn = x.node(), wn = w.node();
    return Var(make_node(std::move(out), {xn, wn}, [xn, wn, g, how](Node& self) {
        std::vector<double> col(static_cast<size_t>(g.ckk()) * how);
        Tensor gw, gx;
        if (wn->requires_grad) gw = Tensor(wn->value.shape());
        if (xn->requires_grad) gx = Tensor(xn->value.shape());
        CMatMap wm(wn->value.data(), g.o, g.ckk());
        for (int n = 0; n < g.n; ++n) {
            CMatMap gm(self.grad.data() + static_cast<int64_t>(n) * g.o * how, g.o, how);
            if (wn->requires_grad) {
                im2col(xn->value.data() + static_cast<int64_t>(n) * g.c * g.h * g.w, g,
                       col.data());
                CMatMap cm(col.data(), g.ckk(), how);
                MatMap gwm(gw.data(), g.o, g.ckk());
                gwm.noalias() += gm * cm.transpose();
            }
            if (xn->requires_grad) {
                MatMap cm(col.data(), g.ckk(), how);
                cm.noalias() = wm.transpose() * gm;
                col2im_acc(col.data(), g,
                           gx.data() + static_cast<int64_t>(n) * g.c * g.h * g.w);
            }
        }
        if (wn->requires_grad) wn->accumulate(gw);
        if (xn->requires_grad) xn->accumulate(gx);
    }));
}

Var add_channel_bias(const Var& x, const Var& b) {
    if (x.value().ndim() != 4 || b.value().ndim() != 1 || b.value().dim(0) != x.value().dim(1))
        throw InvalidArgument("add_channel_bias: incompatible shapes");
    const int n = x.value().dim(0), c = x.value().dim(1);
    const int64_t hw = static_cast<int64_t>(x.value().dim(2)) * x.value().dim(3);
    Tensor out(x.shape());
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            const double bj = b.value()[j];
            const int64_t off = (static_cast<int64_t>(i) * c + j) * hw;
            for (int64_t k = 0; k < hw; ++k) out[off + k] = x.value()[off + k] + bj;
        }
    NodePtr xn = x.node(), bn = b.node();
    return Var(make_node(std::move(out), {xn, bn}, [xn, bn, n, c, hw](Node& self) {
        if (xn->requires_grad) xn->accumulate(self.grad);
        if (bn->requires_grad) {
            Tensor gb({c});
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j) {
                    const int64_t off = (static_cast<int64_t>(i) * c + j) * hw;
                    double s = 0.0;
                    for (int64_t k = 0; k < hw; ++k) s += self.grad[off + k];
                    gb[j] += s;
                }
            bn->accumulate(gb);
        }
    }));
}

Var upsample2(const Var& x) {
    if (x.value().ndim() != 4) throw InvalidArgument("upsample2: expects 4-D tensor");
    const int n = x.value().dim(0), c = x.value().dim(1), h = x.value().dim(2),
              w = x.value().dim(3);
    Tensor out({n, c, 2 * h, 2 * w});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const double v = x.value().at(i, j, y, xx);
                    out.at(i, j, 2 * y, 2 * xx) = v;
                    out.at(i, j, 2 * y, 2 * xx + 1) = v;
                    out.at(i, j, 2 * y + 1, 2 * xx) = v;
                    out.at(i, j, 2 * y + 1, 2 * xx + 1) = v;
                }
    NodePtr xn = x.node();
    return Var(make_node(std::move(out), {xn}, [xn, n, c, h, w](Node& self) {
        Tensor g({n, c, h, w});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j)
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx)
                        g.at(i, j, y, xx) = self.grad.at(i, j, 2 * y, 2 * xx) +
                                            self.grad.at(i, j, 2 * y, 2 * xx + 1) +
                                            self.grad.at(i, j, 2 * y + 1, 2 * xx) +
                                            self.grad.at(i, j, 2 * y + 1, 2 * xx + 1);
        xn->accumulate(g);
    }));
}

Var crop2d(const Var& x, int out_h, int out_w) {
    if (x.value().ndim() != 4) throw InvalidArgument("crop2d: expects 4-D tensor");
    const int n = x.value().dim(0), c = x.value().dim(1), h = x.value().dim(2),
              w = x.value().dim(3);
    if (out_h > h || out_w > w) throw InvalidArgument("crop2d: target larger than input");
    Tensor out({n, c, out_h, out_w});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            for (int y = 0; y < out_h; ++y)
                for (int xx = 0; xx < out_w; ++xx) out.at(i, j, y, xx) = x.value().at(i, j, y, xx);
    NodePtr xn = x.node();
    return Var(make_node(std::move(out), {xn}, [xn, n, c, h, w, out_h, out_w](Node& self) {
        Tensor g({n, c, h, w});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j)
                for (int y = 0; y < out_h; ++y)
                    for (int xx = 0; xx < out_w; ++xx)
                        g.at(i, j, y, xx) = self.grad.at(i, j, y, xx);
        xn->accumulate(g);
    }));
}

Var global_avg_pool(const Var& x) {
    if (x.value().ndim() != 4) throw InvalidArgument("global_avg_pool: expects 4-D tensor");
    const int n = x.value().dim(0), c = x.value().dim(1), h = x.value().dim(2),
              w = x.value().dim(3);
    const double inv = 1.0 / (static_cast<double>(h) * w);
    Tensor out({n, c});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
            double s = 0.0;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) s += x.value().at(i, j, y, xx);
            out.at(i, j) = s * inv;
        }
    NodePtr xn = x.node();
    return Var(make_node(std::move(out), {xn}, [xn, n, c, h, w, inv](Node& self) {
        Tensor g({n, c, h, w});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) {
                const double gv = self.grad.at(i, j) * inv;
                for (int y = 0; y < h; ++y)
                    for (int xx = 0; xx < w; ++xx) g.at(i, j, y, xx) = gv;
            }
        xn->accumulate(g);
    }));
}

namespace {

void softmax_row(const double* in, double* out, int c) {
    double mx = in[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
        out[j] = std::exp(in[j] - mx);
        s += out[j];
    }
    for (int j = 0; j < c; ++j) out[j] /= s;
}

}  // namespace

Var softmax_rows(const Var& x) {
    if (x.value().ndim() != 2) throw InvalidArgument("softmax_rows: expects 2-D tensor");
    const int n = x.value().dim(0), c = x.value().dim(1);
    Tensor out({n, c});
    for (int i = 0; i < n; ++i)
        softmax_row(x.value().data() + static_cast<int64_t>(i) * c,
                    out.data() + static_cast<int64_t>(i) * c, c);
    NodePtr xn = x.node();
    return Var(make_node(std::move(out), {xn}, [xn, n, c](Node& self) {
        Tensor g({n, c});
        for (int i = 0; i < n; ++i) {
            const double* y = self.value.data() + static_cast<int64_t>(i) * c;
            const double* go = self.grad.data() + static_cast<int64_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += go[j] * y[j];
            double* gi = g.data() + static_cast<int64_t>(i) * c;
            for (int j = 0; j < c; ++j) gi[j] = y[j] * (go[j] - dot);
        }
        xn->accumulate(g);
    }));
}

Var log_softmax_rows(const Var& x) {
    if (x.value().ndim() != 2) throw InvalidArgument("log_softmax_rows: expects 2-D tensor");
    const int n = x.value().dim(0), c = x.value().dim(1);
    Tensor out({n, c});
    for (int i = 0; i < n; ++i) {
        const double* in = x.value().data() + static_cast<int64_t>(i) * c;
        double* o = out.data() + static_cast<int64_t>(i) * c;
        double mx = in[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, in[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(in[j] - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < c; ++j) o[j] = in[j] - lse;
    }
    NodePtr xn = x.node();
    return Var(make_node(std::move(out), {xn}, [xn, n, c](Node& self) {
        Tensor g({n, c});
        for (int i = 0; i < n; ++i) {
            const double* lp = self.value.data() + static_cast<int64_t>(i) * c;
            const double* go = self.grad.data() + static_cast<int64_t>(i) * c;
            double gsum = 0.0;
            for (int j = 0; j < c; ++j) gsum += go[j];
            double* gi = g.data() + static_cast<int64_t>(i) * c;
            for (int j = 0; j < c; ++j) gi[j] = go[j] - std::exp(lp[j]) * gsum;
        }
        xn->accumulate(g);
    }));
}

Var dropout(const Var& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw InvalidArgument("dropout: rate must be in [0, 1)");
    const double scale = 1.0 / (1.0 - rate);
    Tensor mask(x.shape());
    for (int64_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() >= rate ? scale : 0.0;
    Tensor out(x.shape());
    for (int64_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * mask[i];
    NodePtr xn = x.node();
    auto m = std::make_shared<Tensor>(std::move(mask));
    return Var(make_node(std::move(out), {xn}, [xn, m](Node& self) {
        Tensor g(self.value.shape());
        for (int64_t i = 0; i < g.size(); ++i) g[i] = self.grad[i] * (*m)[i];
        xn->accumulate(g);
    }));
}

Var gaussian_like(const std::vector<int>& shape, Rng& rng) {
    Tensor t(shape);
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return Var::leaf(std::move(t), false);
}

}  // namespace xfake::ad
