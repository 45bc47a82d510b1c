#pragma once

#include <array>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kd/box.hpp"
#include "kd/kd_cls.hpp"
#include "kd/ops.hpp"
#include "kd/rng.hpp"

namespace kd {

// ---- teacher ---------------------------------------------------------------

struct TeacherConfig {
    int input_size = 32;
    int num_classes = 6;
    int channels1 = 16;
    int channels2 = 32;
};

// Toy classifier: two conv blocks (conv3x3 + bias + relu + 2x down pool),
// global average pool, linear head. Blocks double as the feature taps l1/l2
// for localization distillation.
class TeacherModel {
  public:
    TeacherModel(const TeacherConfig& cfg, Rng& rng);

    struct Output {
        Tensor logits;                  // [N, C]
        std::map<int, Tensor> features;  // tap layer -> feature map
    };

    // full classifier pass; spatial size must equal input_size
    Output forward(const Tensor& x, const std::vector<int>& tap_layers = {}) const;

    // conv features only, any spatial size; returns taps 1..max_layer
    std::vector<Tensor> feature_stack(const Tensor& x, int max_layer) const;

    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    void set_frozen(bool frozen);
    const TeacherConfig& config() const { return cfg_; }

  private:
    TeacherConfig cfg_;
    Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_, fc_w_, fc_b_;
};

// ---- anchors ---------------------------------------------------------------

struct AnchorSpec {
    int stride = 8;
    std::vector<double> scales = {16.0, 28.0};
    std::vector<double> ratios = {1.0};  // h/w
};

// Row-major cell enumeration, centers at cell centers, scales then ratios
// within a cell. Anchors may extend past the image border.
std::vector<Box> generate_anchors(int image_size, const AnchorSpec& spec);

struct AnchorAssignment {
    std::vector<int> positive;    // ascending anchor ids, the K of the KD losses
    std::vector<int> matched_gt;  // per positive: ground-truth index
    std::vector<int> negatives;   // ascending anchor ids below the negative band
};

// Max-IoU matching with a forced best-anchor match per ground truth; the
// IoU band [neg_thresh, pos_thresh) is ignored. Ties take the first
// ground truth / first anchor.
AnchorAssignment assign_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gt_boxes,
                                double pos_thresh, double neg_thresh);

// ---- differentiable box decoding --------------------------------------------

// cx = acx + tx*aw, cy = acy + ty*ah, w = aw*exp(tw), h = ah*exp(th),
// returned in corner form [A,4]. tw/th are clamped to +-4 before exp.
Tensor decode_boxes(const Tensor& offsets, const std::vector<Box>& anchors);

// inverse of decode_boxes for |tw|,|th| within the clamp
std::array<double, 4> encode_box(const Box& anchor, const Box& target);

// ---- student ----------------------------------------------------------------

struct StudentConfig {
    int image_size = 64;
    int num_classes = 6;
    HeadKind head = HeadKind::categorical;
    int channels1 = 8;
    int channels2 = 16;
    int channels3 = 32;
    AnchorSpec anchors;
};

// Anchor-based single-stage detector: three conv blocks at strides 2/4/8,
// then 1x1 class and box-offset heads over the final grid.
class StudentDetector {
  public:
    StudentDetector(const StudentConfig& cfg, Rng& rng);

    struct Output {
        Tensor class_logits;  // [N, A, C+1] categorical or [N, A, C] binary
        Tensor box_offsets;   // [N, A, 4]
    };
    Output forward(const Tensor& x) const;

    const std::vector<Box>& anchors() const { return anchors_; }
    int logit_width() const;
    std::vector<std::pair<std::string, Tensor>> named_params();
    std::vector<std::pair<std::string, Tensor>> named_params() const;
    const StudentConfig& config() const { return cfg_; }

  private:
    StudentConfig cfg_;
    int grid_ = 0;
    std::vector<Box> anchors_;
    Tensor b1_w_, b1_b_, b2_w_, b2_b_, b3_w_, b3_b_;
    Tensor cls_w_, cls_b_, box_w_, box_b_;
};

// ---- detection loss -----------------------------------------------------------

struct ImageGroundTruth {
    std::vector<Box> boxes;
    std::vector<int> labels;
};

// Categorical heads: cross-entropy over positives plus 3:1 hard-mined
// background negatives, with smooth-L1 on positive offsets. Binary heads:
// focal loss (gamma, alpha) over all non-ignored anchors plus smooth-L1.
// Normalized by the positive count of the whole batch.
struct DetectionLossConfig {
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    double neg_pos_ratio = 3.0;
    int min_negatives = 8;
};

Tensor detection_loss(const Tensor& class_logits, const Tensor& box_offsets,
                      const std::vector<AnchorAssignment>& assignments,
                      const std::vector<Box>& anchors, const std::vector<ImageGroundTruth>& gts,
                      HeadKind kind, const DetectionLossConfig& cfg = {});

}  // namespace kd
