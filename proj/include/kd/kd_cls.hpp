#pragma once

#include "kd/ops.hpp"

namespace kd {

enum class HeadKind { categorical, binary };

// Temperature-softened probabilities. Categorical heads hold [K, D] rows
// summing to 1; binary heads hold [K, C, 2] per-class (False, True) pairs.
struct SoftenedDistribution {
    Tensor probs;
    double temperature = 1.0;
    HeadKind kind = HeadKind::categorical;
};

SoftenedDistribution soften_categorical(const Tensor& logits, double temperature);
SoftenedDistribution soften_binary(const Tensor& logits, double temperature);

// Appends a background column of exact zeros to a C-way teacher
// distribution: true objects are classified as background with 0 probability.
SoftenedDistribution teacher_background_augment(const SoftenedDistribution& pt);

// Per-scalar expansion p -> [1-p, p] into (False, True) pairs.
SoftenedDistribution binary_two_class_expand(const Tensor& probs, double temperature);

// (1/K) sum_k T^2 sum_c [pt log pt - pt log ps], teacher treated as a
// constant, 0 log 0 := 0 on the teacher's background column.
Tensor kl_categorical(const SoftenedDistribution& pt, const SoftenedDistribution& ps, double temperature);

// (1/K) sum_k (T^2/C) sum_c sum_i [pt(i) log pt(i) - pt(i) log ps(i)]
Tensor kl_binary(const SoftenedDistribution& pt, const SoftenedDistribution& ps, double temperature);

// Classification distillation loss over K positive boxes. Categorical
// students carry C+1 logits against a C-way teacher (background augmented
// with zero probability); binary heads carry C logits on both sides.
// Undefined logit tensors mean K = 0 and yield an exact gradient-free zero.
Tensor kd_cls_loss(const Tensor& student_logits, const Tensor& teacher_logits, HeadKind kind,
                   double temperature);

}  // namespace kd
