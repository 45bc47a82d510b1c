#pragma once

#include <vector>

#include "kd/box.hpp"
#include "kd/models.hpp"
#include "kd/ops.hpp"

namespace kd {

// Hyperparameters of the distillation losses; lambda_kc/temperature drive
// the classification side, the rest the localization side.
struct DistillConfig {
    double lambda_kc = 0.4;
    double lambda_kl = 1.0;
    double temperature = 2.0;
    int sampling_size = 32;  // spatial transformer grid
    int pool_w = 4;
    int pool_h = 4;
    bool layer0 = true;   // pixel-level term, no teacher
    bool layer1 = true;   // first teacher conv block
    bool layer2 = false;  // second teacher conv block

    void validate() const;
};

// Indices of predicted boxes that can enter the localization losses:
// finite, non-degenerate, and intersecting the image. Filtered boxes are
// excluded from K instead of being clamped, which would zero the gradient
// exactly where the box needs correcting.
std::vector<int> filter_boxes_for_loc(const Tensor& pred_boxes, double image_w, double image_h);

// Crops pred/gt regions at the config sampling size, runs both through the
// frozen teacher, adaptive-pools to pool_h x pool_w and accumulates L1
// differences; per-layer normalization by K*M*H*W, averaged over enabled
// feature layers. Gradients reach pred_boxes only.
Tensor kd_loc_feature_loss(const Tensor& pred_boxes, const std::vector<Box>& gt_boxes,
                           const Tensor& image, const TeacherModel& teacher,
                           const DistillConfig& cfg);

// Teacher-free variant: L1 between adaptive-pooled raw crops, normalized by
// K*M*H*W with M the image channel count.
Tensor kd_loc_pixel_loss(const Tensor& pred_boxes, const std::vector<Box>& gt_boxes,
                         const Tensor& image, const DistillConfig& cfg);

}  // namespace kd
