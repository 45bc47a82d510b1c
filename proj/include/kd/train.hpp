#pragma once

#include <ostream>
#include <vector>

#include "kd/eval.hpp"
#include "kd/kd_loc.hpp"
#include "kd/models.hpp"
#include "kd/synthdata.hpp"

namespace kd {

// v <- mu v + g; p <- p - lr v; gradients cleared after the step
class SgdOptimizer {
  public:
    SgdOptimizer(std::vector<Tensor> params, double momentum);
    void step(double lr);
    void zero_grad();

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_;
};

// L = L_det + lambda_kc * L_kd-cls + lambda_kl * L_kd-loc. Undefined
// tensors and zero weights drop their term from the graph entirely, so the
// baseline loss is recovered exactly. Non-finite components raise
// NumericalError naming the offender.
Tensor total_loss(const Tensor& det, const Tensor& kd_cls, const Tensor& kd_loc,
                  const DistillConfig& cfg);

// step decay: x0.1 at 2/3 and 11/12 of the epoch budget
double lr_at_epoch(double base_lr, int epoch, int total_epochs);

enum class TeacherLossKind { categorical, binary, joint };

struct TrainConfig {
    int epochs = 20;
    int batch_size = 32;
    uint64_t seed = 1;
    double lr = 0.05;
    double momentum = 0.9;
    double flip_prob = 0.5;

    // student-only switches
    DistillConfig distill;
    bool enable_kd_cls = false;
    bool enable_kd_loc = false;   // teacher feature term, layers from distill
    bool enable_kd_loc0 = false;  // teacher-free pixel term
    HeadKind head = HeadKind::categorical;
    double pos_thresh = 0.5;
    double neg_thresh = 0.4;
};

struct EpochMetrics {
    int epoch = 0;
    double loss = 0.0;
    double loss_det = 0.0;
    double loss_kd_cls = 0.0;
    double loss_kd_loc = 0.0;
    double val_top1 = 0.0;  // teacher runs
    double val_map = 0.0;   // student runs
    double val_ap50 = 0.0;
    double val_ap75 = 0.0;
    double lr = 0.0;
};

struct TeacherTrainResult {
    TeacherModel model;
    std::vector<EpochMetrics> history;
    double best_val_top1 = 0.0;
    int best_epoch = -1;
};

// Trains in an image-classification manner with categorical CE, one-vs-all
// binary CE, or their sum; keeps the best-on-validation parameters.
// `metrics` receives one JSON object per line per epoch when non-null.
// `stop_at_top1` ends training early once validation reaches the mark.
TeacherTrainResult train_teacher(const CropDataset& train_set, const CropDataset& val_set,
                                 TeacherLossKind loss_kind, const TrainConfig& cfg,
                                 TeacherConfig model_cfg = {}, std::ostream* metrics = nullptr,
                                 double stop_at_top1 = 1.1);

struct StudentTrainResult {
    StudentDetector model;
    std::vector<EpochMetrics> history;
    CocoMetrics final_val;
};

// Student loop: detection loss plus the enabled distillation terms; the
// teacher may be null when only teacher-free terms are active.
StudentTrainResult train_student(const DetDataset& train_set, const DetDataset& val_set,
                                 const TeacherModel* teacher, const TrainConfig& cfg,
                                 StudentConfig model_cfg = {}, std::ostream* metrics = nullptr);

// ---- inference -------------------------------------------------------------

struct DetectConfig {
    double score_thresh = 0.05;
    double nms_iou = 0.5;
    int max_per_image = 100;
    int batch_size = 32;
};

std::vector<Detection> detect(const StudentDetector& model, const DetDataset& data,
                              const DetectConfig& cfg = {});
std::vector<GtBox> dataset_ground_truth(const DetDataset& data);

double top1_accuracy(const TeacherModel& model, const CropDataset& data, int batch_size = 64);

// dataset record -> [3,S,S] tensor (optionally mirrored)
Tensor image_tensor(const std::vector<float>& pixels, int size, bool flip = false);

void write_metrics_line(std::ostream& os, const EpochMetrics& m, bool student);

}  // namespace kd
