#include "kd/kd_cls.hpp"

#include <cmath>

namespace kd {

namespace {

// teacher-side entropy with the 0 log 0 convention; plain number, no graph
double entropy_term(const Tensor& probs) {
    double acc = 0.0;
    for (double p : probs.values())
        if (p > 0.0) acc += p * std::log(p);
    return acc;
}

void check_match(const SoftenedDistribution& pt, const SoftenedDistribution& ps,
                 double temperature, const char* op) {
    if (pt.probs.shape() != ps.probs.shape())
        throw ShapeError(std::string(op) + ": teacher/student shape mismatch " +
                         shape_str(pt.probs.shape()) + " vs " + shape_str(ps.probs.shape()));
    if (pt.temperature != temperature || ps.temperature != temperature)
        throw ShapeError(std::string(op) + ": temperature mismatch");
}

}  // namespace

SoftenedDistribution soften_categorical(const Tensor& logits, double temperature) {
    return {softmax_t(logits, temperature), temperature, HeadKind::categorical};
}

SoftenedDistribution soften_binary(const Tensor& logits, double temperature) {
    return binary_two_class_expand(sigmoid_t(logits, temperature), temperature);
}

SoftenedDistribution teacher_background_augment(const SoftenedDistribution& pt) {
    if (pt.kind != HeadKind::categorical)
        throw KindError("teacher_background_augment: categorical distribution required");
    if (pt.probs.ndim() != 2) throw ShapeError("teacher_background_augment: probs must be [K,C]");
    const int k = pt.probs.dim(0);
    Tensor zeros_col = Tensor::zeros({k, 1});
    return {concat({pt.probs, zeros_col}, 1), pt.temperature, HeadKind::categorical};
}

SoftenedDistribution binary_two_class_expand(const Tensor& probs, double temperature) {
    if (probs.ndim() != 2) throw ShapeError("binary_two_class_expand: probs must be [K,C]");
    for (double p : probs.values())
        if (!(p > 0.0 && p < 1.0))
            throw DomainError("binary_two_class_expand: probability " + std::to_string(p) +
                              " outside (0,1)");
    const int k = probs.dim(0), c = probs.dim(1);
    Tensor p3 = reshape(probs, {k, c, 1});
    Tensor pairs = concat({sub(1.0, p3), p3}, 2);
    return {pairs, temperature, HeadKind::binary};
}

Tensor kl_categorical(const SoftenedDistribution& pt, const SoftenedDistribution& ps,
                      double temperature) {
    check_match(pt, ps, temperature, "kl_categorical");
    if (ps.probs.ndim() != 2) throw ShapeError("kl_categorical: probs must be [K,D]");
    const int k = ps.probs.dim(0);
    Tensor pt_const = pt.probs.detach();
    Tensor cross = sum_all(mul(pt_const, log_(ps.probs)));
    Tensor kl = sub(entropy_term(pt_const), cross);
    return mul(kl, temperature * temperature / k);
}

Tensor kl_binary(const SoftenedDistribution& pt, const SoftenedDistribution& ps,
                 double temperature) {
    check_match(pt, ps, temperature, "kl_binary");
    if (ps.probs.ndim() != 3 || ps.probs.dim(2) != 2)
        throw ShapeError("kl_binary: probs must be [K,C,2]");
    const int k = ps.probs.dim(0), c = ps.probs.dim(1);
    Tensor pt_const = pt.probs.detach();
    Tensor cross = sum_all(mul(pt_const, log_(ps.probs)));
    Tensor kl = sub(entropy_term(pt_const), cross);
    return mul(kl, temperature * temperature / (static_cast<double>(k) * c));
}

Tensor kd_cls_loss(const Tensor& student_logits, const Tensor& teacher_logits, HeadKind kind,
                   double temperature) {
    if (!student_logits.defined() || !teacher_logits.defined())
        return Tensor::scalar(0.0);  // no positive boxes in this batch
    if (student_logits.ndim() != 2 || teacher_logits.ndim() != 2 ||
        student_logits.dim(0) != teacher_logits.dim(0))
        throw ShapeError("kd_cls_loss: logit shapes " + shape_str(student_logits.shape()) +
                         " vs " + shape_str(teacher_logits.shape()));
    Tensor teacher_const = teacher_logits.detach();
    if (kind == HeadKind::categorical) {
        if (student_logits.dim(1) != teacher_logits.dim(1) + 1)
            throw ShapeError("kd_cls_loss: categorical student must have C+1 columns");
        SoftenedDistribution ps = soften_categorical(student_logits, temperature);
        SoftenedDistribution pt =
            teacher_background_augment(soften_categorical(teacher_const, temperature));
        return kl_categorical(pt, ps, temperature);
    }
    if (student_logits.dim(1) != teacher_logits.dim(1))
        throw ShapeError("kd_cls_loss: binary heads must share the class count");
    SoftenedDistribution ps = soften_binary(student_logits, temperature);
    SoftenedDistribution pt = soften_binary(teacher_const, temperature);
    return kl_binary(pt, ps, temperature);
}

}  // namespace kd
