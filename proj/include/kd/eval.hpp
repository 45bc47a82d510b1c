#pragma once

#include <array>
#include <string>
#include <vector>

#include "kd/box.hpp"

namespace kd {

struct Detection {
    int image_id = 0;
    Box box;
    int label = 0;
    double score = 0.0;
};

struct GtBox {
    int image_id = 0;
    Box box;
    int label = 0;
};

// Greedy per-class suppression by descending score; ties by insertion order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh);

// 101-point interpolated AP for one class at one IoU threshold, greedy
// confidence-descending matching, each ground truth matched at most once.
// NaN when the class has no ground truth (excluded from class means).
double average_precision(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                         int class_id, double iou_thresh);

// area cutoffs scaled to the toy image size (COCO's absolute pixel cutoffs
// are meaningless at 64x64)
struct SizeBuckets {
    double small_max_area = 144.0;   // < 12^2
    double large_min_area = 576.0;   // > 24^2
};

struct CocoMetrics {
    std::array<double, 10> ap_per_iou{};  // IoU 0.50 .. 0.95 step 0.05
    double mAP = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    double mAR = 0.0;  // at 100 detections per image
    double ap_small = 0.0;
    double ap_medium = 0.0;
    double ap_large = 0.0;
};

CocoMetrics coco_metrics(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                         const SizeBuckets& buckets = {}, int num_classes = -1);

// Simplified TIDE-style decomposition. Every false positive lands in
// exactly one bucket; unmatched ground truths are counted as missed.
struct ErrorReport {
    double fg_iou_thresh = 0.5;
    int64_t true_positives = 0;
    int64_t detections = 0;
    int64_t classification = 0;
    int64_t localization = 0;
    int64_t both = 0;
    int64_t duplicate = 0;
    int64_t background = 0;
    int64_t missed_gt = 0;
    // change in mAP at fg_iou_thresh when the bucket is oracle-corrected
    double impact_classification = 0.0;
    double impact_localization = 0.0;
    double impact_both = 0.0;
    double impact_duplicate = 0.0;
    double impact_background = 0.0;
    double impact_missed_gt = 0.0;
};

ErrorReport error_decomposition(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                                double fg_iou_thresh);

// thresholds 0.5 .. 0.9 step 0.05
std::vector<ErrorReport> error_sweep(const std::vector<Detection>& dets,
                                     const std::vector<GtBox>& gts);

}  // namespace kd
