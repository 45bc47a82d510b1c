#include "kd/kd_loc.hpp"

#include <cmath>

namespace kd {

void DistillConfig::validate() const {
    if (lambda_kc < 0.0 || lambda_kl < 0.0)
        throw ConfigError("distill config: loss weights must be non-negative");
    if (!(temperature > 0.0)) throw ConfigError("distill config: temperature must be positive");
    if (sampling_size < 2) throw ConfigError("distill config: sampling size must be >= 2");
    if (pool_w < 1 || pool_h < 1) throw ConfigError("distill config: pool size must be positive");
}

std::vector<int> filter_boxes_for_loc(const Tensor& pred_boxes, double image_w, double image_h) {
    if (!pred_boxes.defined()) return {};
    if (pred_boxes.ndim() != 2 || pred_boxes.dim(1) != 4)
        throw ShapeError("filter_boxes_for_loc: boxes must be [K,4]");
    std::vector<int> kept;
    auto bv = pred_boxes.values();
    for (int k = 0; k < pred_boxes.dim(0); ++k) {
        const double x1 = bv[static_cast<size_t>(k) * 4 + 0];
        const double y1 = bv[static_cast<size_t>(k) * 4 + 1];
        const double x2 = bv[static_cast<size_t>(k) * 4 + 2];
        const double y2 = bv[static_cast<size_t>(k) * 4 + 3];
        if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) || !std::isfinite(y2))
            continue;
        if (x2 - x1 < 1e-6 || y2 - y1 < 1e-6) continue;
        if (x2 <= 0.0 || y2 <= 0.0 || x1 >= image_w || y1 >= image_h) continue;
        kept.push_back(k);
    }
    return kept;
}

namespace {

Tensor crop_batch_pred(const Tensor& pred_boxes, const Tensor& image, int s) {
    const int c = image.dim(0);
    std::vector<Tensor> crops;
    const double w = image.dim(2), h = image.dim(1);
    for (int k = 0; k < pred_boxes.dim(0); ++k) {
        Tensor affine = box_to_affine(reshape(index_rows(pred_boxes, {k}), {4}), w, h);
        crops.push_back(reshape(spatial_transform_crop(affine, image, s), {1, c, s, s}));
    }
    return concat(crops, 0);
}

Tensor crop_batch_gt(const std::vector<Box>& boxes, const Tensor& image, int s) {
    const int c = image.dim(0);
    std::vector<Tensor> crops;
    const double w = image.dim(2), h = image.dim(1);
    for (const Box& b : boxes) {
        Tensor box = Tensor::from({4}, {b.x1, b.y1, b.x2, b.y2});
        Tensor affine = box_to_affine(box, w, h);
        crops.push_back(reshape(spatial_transform_crop(affine, image, s), {1, c, s, s}));
    }
    return concat(crops, 0);
}

void check_loc_inputs(const Tensor& pred_boxes, const std::vector<Box>& gt_boxes,
                      const Tensor& image, const char* op) {
    if (pred_boxes.ndim() != 2 || pred_boxes.dim(1) != 4)
        throw ShapeError(std::string(op) + ": pred boxes must be [K,4]");
    if (static_cast<size_t>(pred_boxes.dim(0)) != gt_boxes.size())
        throw ShapeError(std::string(op) + ": pred/gt box count mismatch");
    if (image.ndim() != 3) throw ShapeError(std::string(op) + ": image must be [C,H,W]");
}

}  // namespace

Tensor kd_loc_feature_loss(const Tensor& pred_boxes, const std::vector<Box>& gt_boxes,
                           const Tensor& image, const TeacherModel& teacher,
                           const DistillConfig& cfg) {
    cfg.validate();
    if (!cfg.layer1 && !cfg.layer2)
        throw ConfigError("kd_loc_feature_loss: no teacher feature layer enabled");
    if (!pred_boxes.defined() || gt_boxes.empty()) return Tensor::scalar(0.0);
    check_loc_inputs(pred_boxes, gt_boxes, image, "kd_loc_feature_loss");

    const int k = pred_boxes.dim(0);
    const int max_layer = cfg.layer2 ? 2 : 1;
    Tensor pred_crops = crop_batch_pred(pred_boxes, image, cfg.sampling_size);
    Tensor gt_crops = crop_batch_gt(gt_boxes, image, cfg.sampling_size);
    std::vector<Tensor> pred_feats = teacher.feature_stack(pred_crops, max_layer);
    std::vector<Tensor> gt_feats = teacher.feature_stack(gt_crops, max_layer);

    Tensor total;
    int layers = 0;
    for (int layer = 1; layer <= 2; ++layer) {
        if ((layer == 1 && !cfg.layer1) || (layer == 2 && !cfg.layer2)) continue;
        const Tensor& fp = pred_feats[static_cast<size_t>(layer - 1)];
        const Tensor& fg = gt_feats[static_cast<size_t>(layer - 1)];
        const double channels = fp.dim(1);
        Tensor diff = abs_(sub(adaptive_avg_pool(fp, cfg.pool_h, cfg.pool_w),
                               adaptive_avg_pool(fg, cfg.pool_h, cfg.pool_w)));
        Tensor term = mul(sum_all(diff), 1.0 / (k * channels * cfg.pool_h * cfg.pool_w));
        total = total.defined() ? add(total, term) : term;
        ++layers;
    }
    return mul(total, 1.0 / layers);
}

Tensor kd_loc_pixel_loss(const Tensor& pred_boxes, const std::vector<Box>& gt_boxes,
                         const Tensor& image, const DistillConfig& cfg) {
    cfg.validate();
    if (!pred_boxes.defined() || gt_boxes.empty()) return Tensor::scalar(0.0);
    check_loc_inputs(pred_boxes, gt_boxes, image, "kd_loc_pixel_loss");

    const int k = pred_boxes.dim(0);
    const double channels = image.dim(0);
    Tensor pred_crops = crop_batch_pred(pred_boxes, image, cfg.sampling_size);
    Tensor gt_crops = crop_batch_gt(gt_boxes, image, cfg.sampling_size);
    Tensor diff = abs_(sub(adaptive_avg_pool(pred_crops, cfg.pool_h, cfg.pool_w),
                           adaptive_avg_pool(gt_crops, cfg.pool_h, cfg.pool_w)));
    return mul(sum_all(diff), 1.0 / (k * channels * cfg.pool_h * cfg.pool_w));
}

}  // namespace kd
