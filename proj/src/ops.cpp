#include "kd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace kd {

using detail::TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

namespace detail {

bool track(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::active()) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// Grid coordinates that land within rounding error of a pixel center are
// snapped to it, so the identity crop reproduces the image bit-exactly and
// border pixels do not bleed zero padding.
double snap_pixel(double p) {
    const double r = std::nearbyint(p);
    return std::fabs(p - r) < 1e-9 ? r : p;
}

}  // namespace detail

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// ---- dense gemm kernels, fixed accumulation order ----

// C[M,N] += A[M,K] * B[K,N]
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        double* crow = c + static_cast<int64_t>(i) * n;
        const double* arow = a + static_cast<int64_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double av = arow[p];
            const double* brow = b + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[K,M]^T * B[K,N]
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c) {
    for (int p = 0; p < k; ++p) {
        const double* arow = a + static_cast<int64_t>(p) * m;
        const double* brow = b + static_cast<int64_t>(p) * n;
        for (int i = 0; i < m; ++i) {
            const double av = arow[i];
            double* crow = c + static_cast<int64_t>(i) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<int64_t>(i) * k;
        double* crow = c + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<int64_t>(j) * k;
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

using UnaryFwd = double (*)(double);

Tensor unary_op(const Tensor& a, UnaryFwd f, double (*df)(double x, double y), const char*) {
    Tensor out = Tensor::zeros(a.shape());
    auto av = a.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
    if (detail::track({&a})) {
        out.set_requires_grad(true);
        NodePtr an = a.node(), on = out.node();
        Tape::active()->record({an}, on, [an, on, df] {
            for (size_t i = 0; i < an->data.size(); ++i)
                an->grad[i] += df(an->data[i], on->data[i]) * on->grad[i];
        });
    }
    return out;
}

enum class Pointwise { add, sub, mul };

Tensor binary_op(const Tensor& a, const Tensor& b, Pointwise mode) {
    const bool a_scalar = a.numel() == 1 && b.numel() != 1;
    const bool b_scalar = b.numel() == 1 && a.numel() != 1;
    if (!a_scalar && !b_scalar) {
        const char* name = mode == Pointwise::add ? "add" : mode == Pointwise::sub ? "sub" : "mul";
        check_same_shape(a, b, name);
    }
    const Tensor& big = a_scalar ? b : a;
    Tensor out = Tensor::zeros(big.shape());
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.values_mut();
    const size_t n = ov.size();
    for (size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        ov[i] = mode == Pointwise::add ? x + y : mode == Pointwise::sub ? x - y : x * y;
    }
    if (detail::track({&a, &b})) {
        out.set_requires_grad(true);
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        Tape::active()->record({an, bn}, on, [an, bn, on, ga, gb, a_scalar, b_scalar, mode] {
            const auto& g = on->grad;
            const size_t n = g.size();
            if (ga) {
                for (size_t i = 0; i < n; ++i) {
                    double gi = g[i];
                    if (mode == Pointwise::mul) gi *= bn->data[b_scalar ? 0 : i];
                    an->grad[a_scalar ? 0 : i] += gi;
                }
            }
            if (gb) {
                for (size_t i = 0; i < n; ++i) {
                    double gi = g[i];
                    if (mode == Pointwise::mul)
                        gi *= an->data[a_scalar ? 0 : i];
                    else if (mode == Pointwise::sub)
                        gi = -gi;
                    bn->grad[b_scalar ? 0 : i] += gi;
                }
            }
        });
    }
    return out;
}

Tensor affine_scalar(const Tensor& a, double scale, double shift) {
    Tensor out = Tensor::zeros(a.shape());
    auto av = a.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * scale + shift;
    if (detail::track({&a})) {
        out.set_requires_grad(true);
        NodePtr an = a.node(), on = out.node();
        Tape::active()->record({an}, on, [an, on, scale] {
            for (size_t i = 0; i < an->data.size(); ++i) an->grad[i] += scale * on->grad[i];
        });
    }
    return out;
}

int64_t stride_product(const Shape& shape, size_t from) {
    int64_t p = 1;
    for (size_t i = from; i < shape.size(); ++i) p *= shape[i];
    return p;
}

}  // namespace

// ---- pointwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, Pointwise::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, Pointwise::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, Pointwise::mul); }
Tensor add(const Tensor& a, double c) { return affine_scalar(a, 1.0, c); }
Tensor sub(const Tensor& a, double c) { return affine_scalar(a, 1.0, -c); }
Tensor sub(double c, const Tensor& a) { return affine_scalar(a, -1.0, c); }
Tensor mul(const Tensor& a, double c) { return affine_scalar(a, c, 0.0); }
Tensor neg(const Tensor& a) { return affine_scalar(a, -1.0, 0.0); }

Tensor exp_(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

Tensor log_(const Tensor& a) {
    for (double v : a.values())
        if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
    return unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

Tensor relu(const Tensor& a) {
    return unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

Tensor abs_(const Tensor& a) {
    return unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }, "abs");
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = Tensor::zeros({m, n});
    gemm_nn(m, n, k, a.values().data(), b.values().data(), out.values_mut().data());
    if (detail::track({&a, &b})) {
        out.set_requires_grad(true);
        NodePtr an = a.node(), bn = b.node(), on = out.node();
        const bool ga = a.requires_grad(), gb = b.requires_grad();
        Tape::active()->record({an, bn}, on, [an, bn, on, ga, gb, m, k, n] {
            if (ga) gemm_nt(m, k, n, on->grad.data(), bn->data.data(), an->grad.data());
            if (gb) gemm_tn(k, n, m, an->data.data(), on->grad.data(), bn->grad.data());
        });
    }
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0))
        throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " x " +
                         shape_str(w.shape()));
    if (b.ndim() != 1 || b.dim(0) != w.dim(1))
        throw ShapeError("linear: bias shape " + shape_str(b.shape()));
    const int m = x.dim(0), k = x.dim(1), n = w.dim(1);
    Tensor out = Tensor::zeros({m, n});
    double* o = out.values_mut().data();
    const double* bias = b.values().data();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) o[static_cast<int64_t>(i) * n + j] = bias[j];
    gemm_nn(m, n, k, x.values().data(), w.values().data(), o);
    if (detail::track({&x, &w, &b})) {
        out.set_requires_grad(true);
        NodePtr xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
        const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = b.requires_grad();
        Tape::active()->record({xn, wn, bn}, on, [xn, wn, bn, on, gx, gw, gb, m, k, n] {
            if (gx) gemm_nt(m, k, n, on->grad.data(), wn->data.data(), xn->grad.data());
            if (gw) gemm_tn(k, n, m, xn->data.data(), on->grad.data(), wn->grad.data());
            if (gb) {
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        bn->grad[j] += on->grad[static_cast<int64_t>(i) * n + j];
            }
        });
    }
    return out;
}

namespace {

void im2col(const double* img, int c, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, double* col) {
    // col is [c*kh*kw, oh*ow]
    int64_t r = 0;
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = img + static_cast<int64_t>(ch) * h * w;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j, ++r) {
                double* dst = col + r * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + i - pad;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) dst[oy * ow + ox] = 0.0;
                        continue;
                    }
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + j - pad;
                        dst[oy * ow + ox] = (ix < 0 || ix >= w) ? 0.0 : plane[iy * w + ix];
                    }
                }
            }
        }
    }
}

void col2im_accum(const double* col, int c, int h, int w, int kh, int kw, int stride, int pad,
                  int oh, int ow, double* img_grad) {
    int64_t r = 0;
    for (int ch = 0; ch < c; ++ch) {
        double* plane = img_grad + static_cast<int64_t>(ch) * h * w;
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j, ++r) {
                const double* src = col + r * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + i - pad;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + j - pad;
                        if (ix >= 0 && ix < w) plane[iy * w + ix] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad) {
    if (x.ndim() != 4 || k.ndim() != 4 || x.dim(1) != k.dim(1))
        throw ShapeError("conv2d: incompatible shapes " + shape_str(x.shape()) + " with kernel " +
                         shape_str(k.shape()));
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/pad");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    if (kh > h + 2 * pad || kw > w + 2 * pad)
        throw ShapeError("conv2d: kernel larger than padded input");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (w + 2 * pad - kw) / stride + 1;
    const int ck = c * kh * kw;

    Tensor out = Tensor::zeros({n, f, oh, ow});
    const bool tracked = detail::track({&x, &k});
    const bool need_col_kept = tracked && k.requires_grad();

    auto cols = std::make_shared<std::vector<double>>();
    if (need_col_kept) cols->resize(static_cast<size_t>(n) * ck * oh * ow);
    std::vector<double> scratch;
    if (!need_col_kept) scratch.resize(static_cast<size_t>(ck) * oh * ow);

    for (int img = 0; img < n; ++img) {
        double* col = need_col_kept ? cols->data() + static_cast<int64_t>(img) * ck * oh * ow
                                    : scratch.data();
        im2col(x.values().data() + static_cast<int64_t>(img) * c * h * w, c, h, w, kh, kw, stride,
               pad, oh, ow, col);
        gemm_nn(f, oh * ow, ck, k.values().data(), col,
                out.values_mut().data() + static_cast<int64_t>(img) * f * oh * ow);
    }

    if (tracked) {
        out.set_requires_grad(true);
        NodePtr xn = x.node(), kn = k.node(), on = out.node();
        const bool gx = x.requires_grad(), gk = k.requires_grad();
        Tape::active()->record(
            {xn, kn}, on, [xn, kn, on, cols, gx, gk, n, c, h, w, f, kh, kw, stride, pad, oh, ow] {
                const int ck = c * kh * kw;
                std::vector<double> dcol(static_cast<size_t>(ck) * oh * ow);
                for (int img = 0; img < n; ++img) {
                    const double* gout = on->grad.data() + static_cast<int64_t>(img) * f * oh * ow;
                    if (gk) {
                        const double* col = cols->data() + static_cast<int64_t>(img) * ck * oh * ow;
                        gemm_nt(f, ck, oh * ow, gout, col, kn->grad.data());
                    }
                    if (gx) {
                        std::fill(dcol.begin(), dcol.end(), 0.0);
                        gemm_tn(ck, oh * ow, f, kn->data.data(), gout, dcol.data());
                        col2im_accum(dcol.data(), c, h, w, kh, kw, stride, pad, oh, ow,
                                     xn->grad.data() + static_cast<int64_t>(img) * c * h * w);
                    }
                }
            });
    }
    return out;
}

Tensor bias_channels(const Tensor& x, const Tensor& b) {
    if (x.ndim() != 4 || b.ndim() != 1 || b.dim(0) != x.dim(1))
        throw ShapeError("bias_channels: shapes " + shape_str(x.shape()) + " + " +
                         shape_str(b.shape()));
    const int n = x.dim(0), f = x.dim(1);
    const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
    Tensor out = Tensor::zeros(x.shape());
    auto xv = x.values();
    auto bv = b.values();
    auto ov = out.values_mut();
    int64_t idx = 0;
    for (int img = 0; img < n; ++img)
        for (int ch = 0; ch < f; ++ch) {
            const double bias = bv[ch];
            for (int64_t i = 0; i < hw; ++i, ++idx) ov[idx] = xv[idx] + bias;
        }
    if (detail::track({&x, &b})) {
        out.set_requires_grad(true);
        NodePtr xn = x.node(), bn = b.node(), on = out.node();
        const bool gx = x.requires_grad(), gb = b.requires_grad();
        Tape::active()->record({xn, bn}, on, [xn, bn, on, gx, gb, n, f, hw] {
            const auto& g = on->grad;
            if (gx)
                for (size_t i = 0; i < g.size(); ++i) xn->grad[i] += g[i];
            if (gb) {
                int64_t idx = 0;
                for (int img = 0; img < n; ++img)
                    for (int ch = 0; ch < f; ++ch) {
                        double acc = 0.0;
                        for (int64_t i = 0; i < hw; ++i, ++idx) acc += g[idx];
                        bn->grad[ch] += acc;
                    }
            }
        });
    }
    return out;
}

// ---- reductions -------------------------------------------------------------

Tensor reduce(const Tensor& x, const std::vector<int>& axes, Reduce mode) {
    const int nd = x.ndim();
    std::vector<bool> reduced(static_cast<size_t>(nd), false);
    for (int a : axes) {
        if (a < 0 || a >= nd) throw ShapeError("reduce: invalid axis " + std::to_string(a));
        if (reduced[static_cast<size_t>(a)]) throw ShapeError("reduce: duplicate axis");
        reduced[static_cast<size_t>(a)] = true;
    }
    Shape out_shape;
    int64_t count = 1;
    for (int i = 0; i < nd; ++i) {
        if (reduced[static_cast<size_t>(i)])
            count *= x.dim(i);
        else
            out_shape.push_back(x.dim(i));
    }

    // input linear index -> output linear index, shared with the backward rule
    const int64_t in_n = x.numel();
    auto out_of_in = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(in_n));
    {
        std::vector<int64_t> out_strides(static_cast<size_t>(nd), 0);
        int64_t s = 1;
        for (int i = nd - 1; i >= 0; --i) {
            if (!reduced[static_cast<size_t>(i)]) {
                out_strides[static_cast<size_t>(i)] = s;
                s *= x.dim(i);
            }
        }
        std::vector<int64_t> coord(static_cast<size_t>(nd), 0);
        int64_t o = 0;
        for (int64_t lin = 0; lin < in_n; ++lin) {
            (*out_of_in)[static_cast<size_t>(lin)] = o;
            for (int i = nd - 1; i >= 0; --i) {
                o += out_strides[static_cast<size_t>(i)];
                if (++coord[static_cast<size_t>(i)] < x.dim(i)) break;
                coord[static_cast<size_t>(i)] = 0;
                o -= out_strides[static_cast<size_t>(i)] * x.dim(i);
            }
        }
    }

    Tensor out = Tensor::zeros(out_shape);
    auto xv = x.values();
    auto ov = out.values_mut();
    auto argmax = std::make_shared<std::vector<int64_t>>();
    if (mode == Reduce::max) {
        argmax->assign(ov.size(), -1);
        for (int64_t i = 0; i < in_n; ++i) {
            const int64_t o = (*out_of_in)[static_cast<size_t>(i)];
            // first maximal element wins on ties
            if ((*argmax)[static_cast<size_t>(o)] < 0 || xv[static_cast<size_t>(i)] > ov[static_cast<size_t>(o)]) {
                ov[static_cast<size_t>(o)] = xv[static_cast<size_t>(i)];
                (*argmax)[static_cast<size_t>(o)] = i;
            }
        }
    } else {
        for (int64_t i = 0; i < in_n; ++i)
            ov[static_cast<size_t>((*out_of_in)[static_cast<size_t>(i)])] += xv[static_cast<size_t>(i)];
        if (mode == Reduce::mean)
            for (size_t i = 0; i < ov.size(); ++i) ov[i] /= static_cast<double>(count);
    }

    if (detail::track({&x})) {
        out.set_requires_grad(true);
        NodePtr xn = x.node(), on = out.node();
        Tape::active()->record({xn}, on, [xn, on, mode, count, argmax, out_of_in, in_n] {
            if (mode == Reduce::max) {
                for (size_t o = 0; o < argmax->size(); ++o)
                    xn->grad[static_cast<size_t>((*argmax)[o])] += on->grad[o];
            } else {
                const double scale = mode == Reduce::mean ? 1.0 / static_cast<double>(count) : 1.0;
                for (int64_t i = 0; i < in_n; ++i)
                    xn->grad[static_cast<size_t>(i)] +=
                        scale * on->grad[static_cast<size_t>((*out_of_in)[static_cast<size_t>(i)])];
            }
        });
    }
    return out;
}

namespace {
std::vector<int> all_axes(const Tensor& x) {
    std::vector<int> axes(static_cast<size_t>(x.ndim()));
    for (int i = 0; i < x.ndim(); ++i) axes[static_cast<size_t>(i)] = i;
    return axes;
}
}  // namespace

Tensor sum_all(const Tensor& x) { return reduce(x, all_axes(x), Reduce::sum); }
Tensor mean_all(const Tensor& x) { return reduce(x, all_axes(x), Reduce::mean); }
Tensor max_all(const Tensor& x) { return reduce(x, all_axes(x), Reduce::max); }

// ---- softened heads ---------------------------------------------------------

Tensor softmax_t(const Tensor& z, double temperature) {
    if (!(temperature > 0.0)) throw DomainError("softmax_t: temperature must be positive");
    if (z.ndim() < 1) throw ShapeError("softmax_t: needs a class axis");
    const int classes = z.dim(z.ndim() - 1);
    const int64_t rows = z.numel() / classes;
    Tensor out = Tensor::zeros(z.shape());
    auto zv = z.values();
    auto ov = out.values_mut();
    for (int64_t r = 0; r < rows; ++r) {
        const double* zr = zv.data() + r * classes;
        double* por = ov.data() + r * classes;
        double zmax = zr[0];
        for (int c = 1; c < classes; ++c) zmax = std::max(zmax, zr[c]);
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) {
            por[c] = std::exp((zr[c] - zmax) / temperature);
            denom += por[c];
        }
        for (int c = 0; c < classes; ++c) por[c] /= denom;
    }
    if (detail::track({&z})) {
        out.set_requires_grad(true);
        NodePtr zn = z.node(), on = out.node();
        Tape::active()->record({zn}, on, [zn, on, rows, classes, temperature] {
            for (int64_t r = 0; r < rows; ++r) {
                const double* p = on->data.data() + r * classes;
                const double* g = on->grad.data() + r * classes;
                double dot = 0.0;
                for (int c = 0; c < classes; ++c) dot += g[c] * p[c];
                double* gz = zn->grad.data() + r * classes;
                for (int c = 0; c < classes; ++c) gz[c] += p[c] * (g[c] - dot) / temperature;
            }
        });
    }
    return out;
}

Tensor sigmoid_t(const Tensor& z, double temperature) {
    if (!(temperature > 0.0)) throw DomainError("sigmoid_t: temperature must be positive");
    Tensor out = Tensor::zeros(z.shape());
    auto zv = z.values();
    auto ov = out.values_mut();
    // saturated values are nudged to the nearest representable neighbor so
    // outputs stay strictly inside (0,1)
    constexpr double lo = std::numeric_limits<double>::min();
    const double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    for (size_t i = 0; i < zv.size(); ++i) {
        const double a = zv[i] / temperature;
        double p;
        if (a >= 0.0) {
            p = 1.0 / (1.0 + std::exp(-a));
        } else {
            const double e = std::exp(a);
            p = e / (1.0 + e);
        }
        ov[i] = std::clamp(p, lo, hi);
    }
    if (detail::track({&z})) {
        out.set_requires_grad(true);
        NodePtr zn = z.node(), on = out.node();
        Tape::active()->record({zn}, on, [zn, on, temperature] {
            for (size_t i = 0; i < on->data.size(); ++i) {
                const double p = on->data[i];
                zn->grad[i] += p * (1.0 - p) / temperature * on->grad[i];
            }
        });
    }
    return out;
}

// ---- shape surgery ----------------------------------------------------------

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    Tensor out = Tensor::from(std::move(new_shape),
                              std::vector<double>(x.values().begin(), x.values().end()));
    if (detail::track({&x})) {
        out.set_requires_grad(true);
        NodePtr xn = x.node(), on = out.node();
        Tape::active()->record({xn}, on, [xn, on] {
            for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

Tensor index_rows(const Tensor& x, const std::vector<int>& rows) {
    if (x.ndim() < 1) throw ShapeError("index_rows: needs a leading axis");
    const int r = x.dim(0);
    for (int i : rows)
        if (i < 0 || i >= r) throw ShapeError("index_rows: row " + std::to_string(i) + " out of range");
    if (rows.empty()) throw ShapeError("index_rows: empty selection");
    const int64_t row_sz = stride_product(x.shape(), 1);
    Shape out_shape = x.shape();
    out_shape[0] = static_cast<int>(rows.size());
    Tensor out = Tensor::zeros(out_shape);
    auto xv = x.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < rows.size(); ++i)
        std::memcpy(ov.data() + i * row_sz, xv.data() + static_cast<int64_t>(rows[i]) * row_sz,
                    static_cast<size_t>(row_sz) * sizeof(double));
    if (detail::track({&x})) {
        out.set_requires_grad(true);
        NodePtr xn = x.node(), on = out.node();
        auto idx = std::make_shared<std::vector<int>>(rows);
        Tape::active()->record({xn}, on, [xn, on, idx, row_sz] {
            for (size_t i = 0; i < idx->size(); ++i) {
                double* dst = xn->grad.data() + static_cast<int64_t>((*idx)[i]) * row_sz;
                const double* src = on->grad.data() + i * row_sz;
                for (int64_t j = 0; j < row_sz; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
    if (axis < 0 || axis >= x.ndim()) throw ShapeError("slice: invalid axis");
    if (start < 0 || length <= 0 || start + length > x.dim(axis))
        throw ShapeError("slice: range out of bounds");
    const int64_t inner = stride_product(x.shape(), static_cast<size_t>(axis) + 1);
    const int64_t outer = x.numel() / (inner * x.dim(axis));
    Shape out_shape = x.shape();
    out_shape[static_cast<size_t>(axis)] = length;
    Tensor out = Tensor::zeros(out_shape);
    auto xv = x.values();
    auto ov = out.values_mut();
    const int axis_dim = x.dim(axis);
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(ov.data() + o * length * inner,
                    xv.data() + (o * axis_dim + start) * inner,
                    static_cast<size_t>(length * inner) * sizeof(double));
    if (detail::track({&x})) {
        out.set_requires_grad(true);
        NodePtr xn = x.node(), on = out.node();
        Tape::active()->record({xn}, on, [xn, on, outer, inner, length, axis_dim, start] {
            for (int64_t o = 0; o < outer; ++o) {
                double* dst = xn->grad.data() + (o * axis_dim + start) * inner;
                const double* src = on->grad.data() + o * length * inner;
                for (int64_t j = 0; j < length * inner; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no parts");
    const Tensor& first = parts.front();
    if (axis < 0 || axis >= first.ndim()) throw ShapeError("concat: invalid axis");
    int axis_total = 0;
    for (const Tensor& p : parts) {
        if (p.ndim() != first.ndim()) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < first.ndim(); ++i)
            if (i != axis && p.dim(i) != first.dim(i))
                throw ShapeError("concat: shape mismatch on axis " + std::to_string(i));
        axis_total += p.dim(axis);
    }
    Shape out_shape = first.shape();
    out_shape[static_cast<size_t>(axis)] = axis_total;
    Tensor out = Tensor::zeros(out_shape);
    const int64_t inner = stride_product(first.shape(), static_cast<size_t>(axis) + 1);
    const int64_t outer = out.numel() / (inner * axis_total);

    auto ov = out.values_mut();
    int64_t offset = 0;
    for (const Tensor& p : parts) {
        const int64_t block = p.dim(axis) * inner;
        auto pv = p.values();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(ov.data() + o * axis_total * inner + offset, pv.data() + o * block,
                        static_cast<size_t>(block) * sizeof(double));
        offset += block;
    }

    bool any_grad = false;
    for (const Tensor& p : parts)
        if (p.requires_grad()) any_grad = true;
    if (Tape::active() && any_grad) {
        out.set_requires_grad(true);
        std::vector<NodePtr> in_nodes;
        auto shapes = std::make_shared<std::vector<int64_t>>();  // per-part block size
        auto grads = std::make_shared<std::vector<bool>>();
        for (const Tensor& p : parts) {
            in_nodes.push_back(p.node());
            shapes->push_back(p.dim(axis) * inner);
            grads->push_back(p.requires_grad());
        }
        NodePtr on = out.node();
        auto nodes = std::make_shared<std::vector<NodePtr>>(in_nodes);
        Tape::active()->record(in_nodes, on,
                               [nodes, on, shapes, grads, outer, inner, axis_total] {
                                   int64_t offset = 0;
                                   for (size_t pi = 0; pi < nodes->size(); ++pi) {
                                       const int64_t block = (*shapes)[pi];
                                       if ((*grads)[pi]) {
                                           auto& gin = (*nodes)[pi]->grad;
                                           for (int64_t o = 0; o < outer; ++o) {
                                               const double* src =
                                                   on->grad.data() + o * axis_total * inner + offset;
                                               double* dst = gin.data() + o * block;
                                               for (int64_t j = 0; j < block; ++j) dst[j] += src[j];
                                           }
                                       }
                                       offset += block;
                                   }
                               });
    }
    return out;
}

// ---- loss primitives --------------------------------------------------------

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw ShapeError("cross_entropy_rows: logits must be [K,D]");
    const int k = logits.dim(0), d = logits.dim(1);
    if (static_cast<int>(labels.size()) != k)
        throw ShapeError("cross_entropy_rows: label count mismatch");
    for (int l : labels)
        if (l < 0 || l >= d) throw ShapeError("cross_entropy_rows: label out of range");
    Tensor out = Tensor::zeros({k});
    auto zv = logits.values();
    auto ov = out.values_mut();
    for (int r = 0; r < k; ++r) {
        const double* z = zv.data() + static_cast<int64_t>(r) * d;
        double m = z[0];
        for (int c = 1; c < d; ++c) m = std::max(m, z[c]);
        double denom = 0.0;
        for (int c = 0; c < d; ++c) denom += std::exp(z[c] - m);
        ov[r] = std::log(denom) + m - z[labels[static_cast<size_t>(r)]];
    }
    if (detail::track({&logits})) {
        out.set_requires_grad(true);
        NodePtr zn = logits.node(), on = out.node();
        auto lab = std::make_shared<std::vector<int>>(labels);
        Tape::active()->record({zn}, on, [zn, on, lab, k, d] {
            for (int r = 0; r < k; ++r) {
                const double* z = zn->data.data() + static_cast<int64_t>(r) * d;
                double* gz = zn->grad.data() + static_cast<int64_t>(r) * d;
                const double g = on->grad[static_cast<size_t>(r)];
                double m = z[0];
                for (int c = 1; c < d; ++c) m = std::max(m, z[c]);
                double denom = 0.0;
                for (int c = 0; c < d; ++c) denom += std::exp(z[c] - m);
                for (int c = 0; c < d; ++c) {
                    double p = std::exp(z[c] - m) / denom;
                    if (c == (*lab)[static_cast<size_t>(r)]) p -= 1.0;
                    gz[c] += g * p;
                }
            }
        });
    }
    return out;
}

namespace {
double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}
}  // namespace

Tensor focal_bce(const Tensor& logits, const Tensor& targets, double gamma, double alpha) {
    check_same_shape(logits, targets, "focal_bce");
    Tensor out = Tensor::zeros(logits.shape());
    auto zv = logits.values();
    auto tv = targets.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < zv.size(); ++i) {
        const double z = zv[i];
        const double logp = -softplus(-z);
        const double log1mp = -softplus(z);
        if (tv[i] > 0.5) {
            const double onemp = std::exp(log1mp);
            ov[i] = -alpha * std::pow(onemp, gamma) * logp;
        } else {
            const double p = std::exp(logp);
            ov[i] = -(1.0 - alpha) * std::pow(p, gamma) * log1mp;
        }
    }
    if (detail::track({&logits})) {
        out.set_requires_grad(true);
        NodePtr zn = logits.node(), tn = targets.node(), on = out.node();
        Tape::active()->record({zn, tn}, on, [zn, tn, on, gamma, alpha] {
            for (size_t i = 0; i < zn->data.size(); ++i) {
                const double z = zn->data[i];
                const double logp = -softplus(-z);
                const double log1mp = -softplus(z);
                const double p = std::exp(logp);
                const double onemp = std::exp(log1mp);
                double dz;
                if (tn->data[i] > 0.5) {
                    dz = -alpha *
                         (std::pow(onemp, gamma + 1.0) - gamma * std::pow(onemp, gamma) * p * logp);
                } else {
                    dz = (1.0 - alpha) * (std::pow(p, gamma + 1.0) -
                                          gamma * std::pow(p, gamma) * onemp * log1mp);
                }
                zn->grad[i] += dz * on->grad[i];
            }
        });
    }
    return out;
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "smooth_l1");
    Tensor out = Tensor::zeros(pred.shape());
    auto pv = pred.values();
    auto tv = target.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < pv.size(); ++i) {
        const double d = pv[i] - tv[i];
        ov[i] = std::fabs(d) < 1.0 ? 0.5 * d * d : std::fabs(d) - 0.5;
    }
    if (detail::track({&pred})) {
        out.set_requires_grad(true);
        NodePtr pn = pred.node(), tn = target.node(), on = out.node();
        Tape::active()->record({pn, tn}, on, [pn, tn, on] {
            for (size_t i = 0; i < pn->data.size(); ++i) {
                const double d = pn->data[i] - tn->data[i];
                pn->grad[i] += std::clamp(d, -1.0, 1.0) * on->grad[i];
            }
        });
    }
    return out;
}

// ---- spatial ----------------------------------------------------------------

Tensor adaptive_avg_pool(const Tensor& x, int out_h, int out_w) {
    if (x.ndim() < 2) throw ShapeError("adaptive_avg_pool: needs two trailing spatial axes");
    const int h = x.dim(x.ndim() - 2), w = x.dim(x.ndim() - 1);
    if (out_h <= 0 || out_w <= 0 || out_h > h || out_w > w)
        throw ShapeError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" +
                         std::to_string(out_w) + " larger than input " + std::to_string(h) + "x" +
                         std::to_string(w));
    const int64_t planes = x.numel() / (static_cast<int64_t>(h) * w);
    Shape out_shape = x.shape();
    out_shape[out_shape.size() - 2] = out_h;
    out_shape[out_shape.size() - 1] = out_w;
    Tensor out = Tensor::zeros(out_shape);
    auto xv = x.values();
    auto ov = out.values_mut();
    for (int64_t pl = 0; pl < planes; ++pl) {
        const double* in = xv.data() + pl * h * w;
        double* o = ov.data() + pl * out_h * out_w;
        for (int i = 0; i < out_h; ++i) {
            const int r0 = (i * h) / out_h;
            const int r1 = ((i + 1) * h + out_h - 1) / out_h;
            for (int j = 0; j < out_w; ++j) {
                const int c0 = (j * w) / out_w;
                const int c1 = ((j + 1) * w + out_w - 1) / out_w;
                double acc = 0.0;
                for (int r = r0; r < r1; ++r)
                    for (int c = c0; c < c1; ++c) acc += in[r * w + c];
                o[i * out_w + j] = acc / static_cast<double>((r1 - r0) * (c1 - c0));
            }
        }
    }
    if (detail::track({&x})) {
        out.set_requires_grad(true);
        NodePtr xn = x.node(), on = out.node();
        Tape::active()->record({xn}, on, [xn, on, planes, h, w, out_h, out_w] {
            for (int64_t pl = 0; pl < planes; ++pl) {
                double* gin = xn->grad.data() + pl * h * w;
                const double* g = on->grad.data() + pl * out_h * out_w;
                for (int i = 0; i < out_h; ++i) {
                    const int r0 = (i * h) / out_h;
                    const int r1 = ((i + 1) * h + out_h - 1) / out_h;
                    for (int j = 0; j < out_w; ++j) {
                        const int c0 = (j * w) / out_w;
                        const int c1 = ((j + 1) * w + out_w - 1) / out_w;
                        const double share =
                            g[i * out_w + j] / static_cast<double>((r1 - r0) * (c1 - c0));
                        for (int r = r0; r < r1; ++r)
                            for (int c = c0; c < c1; ++c) gin[r * w + c] += share;
                    }
                }
            }
        });
    }
    return out;
}

Tensor box_to_affine(const Tensor& box, double image_w, double image_h) {
    if (box.numel() != 4) throw ShapeError("box_to_affine: box must hold 4 values");
    if (!(image_w > 0.0) || !(image_h > 0.0)) throw DomainError("box_to_affine: bad image size");
    auto bv = box.values();
    const double x1 = bv[0], y1 = bv[1], x2 = bv[2], y2 = bv[3];
    if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) || !std::isfinite(y2) ||
        x1 >= x2 || y1 >= y2)
        throw DegenerateBoxError("box_to_affine: degenerate box (" + std::to_string(x1) + "," +
                                 std::to_string(y1) + "," + std::to_string(x2) + "," +
                                 std::to_string(y2) + ")");
    Tensor out = Tensor::from({2, 3}, {(x2 - x1) / image_w, 0.0, (x1 + x2) / image_w - 1.0, 0.0,
                                       (y2 - y1) / image_h, (y1 + y2) / image_h - 1.0});
    if (detail::track({&box})) {
        out.set_requires_grad(true);
        NodePtr bn = box.node(), on = out.node();
        Tape::active()->record({bn}, on, [bn, on, image_w, image_h] {
            const auto& g = on->grad;  // [a00 a01 a02; a10 a11 a12]
            bn->grad[0] += (-g[0] + g[2]) / image_w;
            bn->grad[2] += (g[0] + g[2]) / image_w;
            bn->grad[1] += (-g[4] + g[5]) / image_h;
            bn->grad[3] += (g[4] + g[5]) / image_h;
        });
    }
    return out;
}

Tensor spatial_transform_crop(const Tensor& affine, const Tensor& img, int s) {
    if (affine.ndim() != 2 || affine.dim(0) != 2 || affine.dim(1) != 3)
        throw ShapeError("spatial_transform_crop: affine must be [2,3]");
    if (img.ndim() != 3) throw ShapeError("spatial_transform_crop: image must be [C,H,W]");
    if (s < 2) throw ShapeError("spatial_transform_crop: sampling size must be >= 2");
    const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
    auto av = affine.values();
    const double a00 = av[0], a01 = av[1], a02 = av[2];
    const double a10 = av[3], a11 = av[4], a12 = av[5];

    Tensor out = Tensor::zeros({c, s, s});
    auto iv = img.values();
    auto ov = out.values_mut();

    auto sample = [&](int ch, int y, int x) -> double {
        if (x < 0 || x >= w || y < 0 || y >= h) return 0.0;
        return iv[(static_cast<int64_t>(ch) * h + y) * w + x];
    };

    for (int i = 0; i < s; ++i) {
        const double gy = -1.0 + (2.0 * i + 1.0) / s;
        for (int j = 0; j < s; ++j) {
            const double gx = -1.0 + (2.0 * j + 1.0) / s;
            const double xn = a00 * gx + a01 * gy + a02;
            const double yn = a10 * gx + a11 * gy + a12;
            const double px = detail::snap_pixel(((xn + 1.0) * w - 1.0) / 2.0);
            const double py = detail::snap_pixel(((yn + 1.0) * h - 1.0) / 2.0);
            const int x0 = static_cast<int>(std::floor(px));
            const int y0 = static_cast<int>(std::floor(py));
            const double wx = px - x0, wy = py - y0;
            for (int ch = 0; ch < c; ++ch) {
                const double v = (1.0 - wy) * ((1.0 - wx) * sample(ch, y0, x0) +
                                               wx * sample(ch, y0, x0 + 1)) +
                                 wy * ((1.0 - wx) * sample(ch, y0 + 1, x0) +
                                       wx * sample(ch, y0 + 1, x0 + 1));
                ov[(static_cast<int64_t>(ch) * s + i) * s + j] = v;
            }
        }
    }

    if (detail::track({&affine, &img})) {
        out.set_requires_grad(true);
        NodePtr an = affine.node(), in = img.node(), on = out.node();
        const bool ga = affine.requires_grad(), gi = img.requires_grad();
        Tape::active()->record({an, in}, on, [an, in, on, ga, gi, c, h, w, s] {
            const double a00 = an->data[0], a01 = an->data[1], a02 = an->data[2];
            const double a10 = an->data[3], a11 = an->data[4], a12 = an->data[5];
            auto sample = [&](int ch, int y, int x) -> double {
                if (x < 0 || x >= w || y < 0 || y >= h) return 0.0;
                return in->data[(static_cast<int64_t>(ch) * h + y) * w + x];
            };
            auto scatter = [&](int ch, int y, int x, double v) {
                if (x < 0 || x >= w || y < 0 || y >= h) return;
                in->grad[(static_cast<int64_t>(ch) * h + y) * w + x] += v;
            };
            for (int i = 0; i < s; ++i) {
                const double gy = -1.0 + (2.0 * i + 1.0) / s;
                for (int j = 0; j < s; ++j) {
                    const double gx = -1.0 + (2.0 * j + 1.0) / s;
                    const double xn = a00 * gx + a01 * gy + a02;
                    const double yn = a10 * gx + a11 * gy + a12;
                    const double px = detail::snap_pixel(((xn + 1.0) * w - 1.0) / 2.0);
                    const double py = detail::snap_pixel(((yn + 1.0) * h - 1.0) / 2.0);
                    const int x0 = static_cast<int>(std::floor(px));
                    const int y0 = static_cast<int>(std::floor(py));
                    const double wx = px - x0, wy = py - y0;
                    double gpx = 0.0, gpy = 0.0;
                    for (int ch = 0; ch < c; ++ch) {
                        const double g = on->grad[(static_cast<int64_t>(ch) * s + i) * s + j];
                        if (g == 0.0) continue;
                        const double v00 = sample(ch, y0, x0), v01 = sample(ch, y0, x0 + 1);
                        const double v10 = sample(ch, y0 + 1, x0), v11 = sample(ch, y0 + 1, x0 + 1);
                        if (ga) {
                            gpx += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
                            gpy += g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
                        }
                        if (gi) {
                            scatter(ch, y0, x0, g * (1.0 - wy) * (1.0 - wx));
                            scatter(ch, y0, x0 + 1, g * (1.0 - wy) * wx);
                            scatter(ch, y0 + 1, x0, g * wy * (1.0 - wx));
                            scatter(ch, y0 + 1, x0 + 1, g * wy * wx);
                        }
                    }
                    if (ga) {
                        const double gxn = gpx * w / 2.0;
                        const double gyn = gpy * h / 2.0;
                        an->grad[0] += gxn * gx;
                        an->grad[1] += gxn * gy;
                        an->grad[2] += gxn;
                        an->grad[3] += gyn * gx;
                        an->grad[4] += gyn * gy;
                        an->grad[5] += gyn;
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace kd
