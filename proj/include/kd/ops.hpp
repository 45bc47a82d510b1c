#pragma once

#include <vector>

#include "kd/tensor.hpp"

namespace kd {

// ---- pointwise -----------------------------------------------------------
// Tensor-tensor forms require equal shapes, except that a 1-element operand
// broadcasts against the other. Scalar (double) forms are constants and
// never tracked.
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, double c);
Tensor sub(double c, const Tensor& a);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor exp_(const Tensor& a);
Tensor log_(const Tensor& a);  // DomainError on non-positive input
Tensor relu(const Tensor& a);
Tensor abs_(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, c); }

// ---- linear algebra ------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);            // [M,K]x[K,N] -> [M,N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x*w + b

// y[N,F,H',W'] from x[N,C,H,W], k[F,C,kh,kw]; zero padding
Tensor conv2d(const Tensor& x, const Tensor& k, int stride, int pad);
Tensor bias_channels(const Tensor& x, const Tensor& b);  // x[N,F,H,W] + b[F]

// ---- reductions ----------------------------------------------------------
enum class Reduce { sum, mean, max };
Tensor reduce(const Tensor& x, const std::vector<int>& axes, Reduce mode);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor max_all(const Tensor& x);

// ---- softened heads ------------------------------------------------------
// softmax over the last axis of z at temperature T, max-subtracted
Tensor softmax_t(const Tensor& z, double temperature);
// elementwise (1 + exp(-z/T))^-1, safe branch for negative arguments
Tensor sigmoid_t(const Tensor& z, double temperature);

// ---- shape surgery -------------------------------------------------------
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor index_rows(const Tensor& x, const std::vector<int>& rows);  // gather on axis 0
Tensor slice(const Tensor& x, int axis, int start, int length);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// ---- loss primitives -----------------------------------------------------
// per-row  logsumexp(z) - z[label];  logits [K,D], labels in [0,D)
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& labels);
// elementwise focal binary cross-entropy; targets is a same-shape 0/1
// constant. gamma=0, alpha=0.5 reduces to 0.5 * BCE.
Tensor focal_bce(const Tensor& logits, const Tensor& targets, double gamma, double alpha);
// elementwise 0.5 d^2 for |d|<1 else |d|-0.5, d = pred - target(constant)
Tensor smooth_l1(const Tensor& pred, const Tensor& target);

// ---- spatial -------------------------------------------------------------
// pools the trailing two axes to (out_h, out_w); window for output cell i
// spans rows [floor(i*H/out_h), ceil((i+1)*H/out_h))
Tensor adaptive_avg_pool(const Tensor& x, int out_h, int out_w);

// 2x3 affine from a corner-form box tensor [x1,y1,x2,y2]; maps the
// normalized [-1,1]^2 output grid into normalized input coordinates
Tensor box_to_affine(const Tensor& box, double image_w, double image_h);

// samples img [C,H,W] on an s-by-s grid mapped through affine [2,3] with
// bilinear interpolation and zero padding; grid points sit at cell centers
// (-1 + (2u+1)/s), so the identity affine at s == image size reproduces the
// image exactly. Differentiable w.r.t. both img and the affine.
Tensor spatial_transform_crop(const Tensor& affine, const Tensor& img, int s);

namespace detail {
// true when an op applied to these inputs must be recorded
bool track(std::initializer_list<const Tensor*> inputs);
// snaps near-integer grid coordinates onto pixel centers
double snap_pixel(double p);
}  // namespace detail

}  // namespace kd
