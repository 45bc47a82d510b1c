#include "kd/models.hpp"

#include <algorithm>
#include <cmath>

namespace kd {

namespace {

Tensor he_conv(Rng& rng, int out_ch, int in_ch, int k) {
    const double stddev = std::sqrt(2.0 / (in_ch * k * k));
    std::vector<double> data(static_cast<size_t>(out_ch) * in_ch * k * k);
    for (double& v : data) v = rng.normal(0.0, stddev);
    return Tensor::from({out_ch, in_ch, k, k}, std::move(data), true);
}

Tensor he_linear(Rng& rng, int in_dim, int out_dim) {
    const double stddev = std::sqrt(2.0 / in_dim);
    std::vector<double> data(static_cast<size_t>(in_dim) * out_dim);
    for (double& v : data) v = rng.normal(0.0, stddev);
    return Tensor::from({in_dim, out_dim}, std::move(data), true);
}

// conv3x3(pad 1) + bias + relu + 2x down pool
Tensor conv_block(const Tensor& x, const Tensor& w, const Tensor& b) {
    Tensor a = relu(bias_channels(conv2d(x, w, 1, 1), b));
    const int h = a.dim(2), wd = a.dim(3);
    const int oh = std::max(1, h / 2), ow = std::max(1, wd / 2);
    if (oh == h && ow == wd) return a;
    return adaptive_avg_pool(a, oh, ow);
}

}  // namespace

// ---- teacher -----------------------------------------------------------------

TeacherModel::TeacherModel(const TeacherConfig& cfg, Rng& rng) : cfg_(cfg) {
    conv1_w_ = he_conv(rng, cfg.channels1, 3, 3);
    conv1_b_ = Tensor::zeros({cfg.channels1}, true);
    conv2_w_ = he_conv(rng, cfg.channels2, cfg.channels1, 3);
    conv2_b_ = Tensor::zeros({cfg.channels2}, true);
    fc_w_ = he_linear(rng, cfg.channels2, cfg.num_classes);
    fc_b_ = Tensor::zeros({cfg.num_classes}, true);
}

TeacherModel::Output TeacherModel::forward(const Tensor& x,
                                           const std::vector<int>& tap_layers) const {
    if (x.ndim() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.input_size ||
        x.dim(3) != cfg_.input_size)
        throw ShapeError("teacher forward: expected [N,3," + std::to_string(cfg_.input_size) +
                         "," + std::to_string(cfg_.input_size) + "], got " + shape_str(x.shape()));
    Output out;
    Tensor f1 = conv_block(x, conv1_w_, conv1_b_);
    Tensor f2 = conv_block(f1, conv2_w_, conv2_b_);
    for (int tap : tap_layers) {
        if (tap == 1)
            out.features[1] = f1;
        else if (tap == 2)
            out.features[2] = f2;
        else
            throw ConfigError("teacher forward: unknown tap layer " + std::to_string(tap));
    }
    Tensor pooled = reduce(f2, {2, 3}, Reduce::mean);
    out.logits = linear(pooled, fc_w_, fc_b_);
    return out;
}

std::vector<Tensor> TeacherModel::feature_stack(const Tensor& x, int max_layer) const {
    if (x.ndim() != 4 || x.dim(1) != 3)
        throw ShapeError("teacher features: expected [N,3,H,W], got " + shape_str(x.shape()));
    if (max_layer < 1 || max_layer > 2)
        throw ConfigError("teacher features: layer must be 1 or 2");
    std::vector<Tensor> taps;
    taps.push_back(conv_block(x, conv1_w_, conv1_b_));
    if (max_layer >= 2) taps.push_back(conv_block(taps.back(), conv2_w_, conv2_b_));
    return taps;
}

std::vector<std::pair<std::string, Tensor>> TeacherModel::named_params() {
    return {{"conv1.w", conv1_w_}, {"conv1.b", conv1_b_}, {"conv2.w", conv2_w_},
            {"conv2.b", conv2_b_}, {"fc.w", fc_w_},       {"fc.b", fc_b_}};
}

std::vector<std::pair<std::string, Tensor>> TeacherModel::named_params() const {
    return const_cast<TeacherModel*>(this)->named_params();
}

void TeacherModel::set_frozen(bool frozen) {
    for (auto& [name, p] : named_params()) p.set_requires_grad(!frozen);
}

// ---- anchors -----------------------------------------------------------------

std::vector<Box> generate_anchors(int image_size, const AnchorSpec& spec) {
    if (spec.stride <= 0 || image_size % spec.stride != 0)
        throw ConfigError("generate_anchors: stride must divide the image size");
    const int grid = image_size / spec.stride;
    std::vector<Box> anchors;
    anchors.reserve(static_cast<size_t>(grid) * grid * spec.scales.size() * spec.ratios.size());
    for (int gy = 0; gy < grid; ++gy) {
        for (int gx = 0; gx < grid; ++gx) {
            const double cx = (gx + 0.5) * spec.stride;
            const double cy = (gy + 0.5) * spec.stride;
            for (double scale : spec.scales) {
                for (double ratio : spec.ratios) {
                    const double w = scale / std::sqrt(ratio);
                    const double h = scale * std::sqrt(ratio);
                    anchors.push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
                }
            }
        }
    }
    return anchors;
}

AnchorAssignment assign_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gt_boxes,
                                double pos_thresh, double neg_thresh) {
    if (!(0.0 <= neg_thresh && neg_thresh <= pos_thresh && pos_thresh <= 1.0))
        throw ConfigError("assign_anchors: need 0 <= neg_thresh <= pos_thresh <= 1");
    const int a_count = static_cast<int>(anchors.size());
    const int g_count = static_cast<int>(gt_boxes.size());

    std::vector<double> best_iou(static_cast<size_t>(a_count), 0.0);
    std::vector<int> best_gt(static_cast<size_t>(a_count), -1);
    for (int a = 0; a < a_count; ++a) {
        for (int g = 0; g < g_count; ++g) {
            const double v = iou(anchors[static_cast<size_t>(a)], gt_boxes[static_cast<size_t>(g)]);
            if (v > best_iou[static_cast<size_t>(a)]) {  // first gt wins ties
                best_iou[static_cast<size_t>(a)] = v;
                best_gt[static_cast<size_t>(a)] = g;
            }
        }
    }

    std::vector<int> match(static_cast<size_t>(a_count), -1);
    for (int a = 0; a < a_count; ++a)
        if (best_gt[static_cast<size_t>(a)] >= 0 && best_iou[static_cast<size_t>(a)] >= pos_thresh)
            match[static_cast<size_t>(a)] = best_gt[static_cast<size_t>(a)];

    // each ground truth forces its single best anchor positive
    std::vector<bool> forced(static_cast<size_t>(a_count), false);
    for (int g = 0; g < g_count; ++g) {
        int best_a = -1;
        double best_v = 0.0;
        for (int a = 0; a < a_count; ++a) {
            const double v = iou(anchors[static_cast<size_t>(a)], gt_boxes[static_cast<size_t>(g)]);
            if (v > best_v) {  // first anchor wins ties
                best_v = v;
                best_a = a;
            }
        }
        if (best_a >= 0 && !forced[static_cast<size_t>(best_a)]) {
            match[static_cast<size_t>(best_a)] = g;
            forced[static_cast<size_t>(best_a)] = true;
        }
    }

    AnchorAssignment out;
    for (int a = 0; a < a_count; ++a) {
        if (match[static_cast<size_t>(a)] >= 0) {
            out.positive.push_back(a);
            out.matched_gt.push_back(match[static_cast<size_t>(a)]);
        } else if (best_iou[static_cast<size_t>(a)] < neg_thresh) {
            out.negatives.push_back(a);
        }
    }
    return out;
}

// ---- differentiable box decoding ----------------------------------------------

Tensor decode_boxes(const Tensor& offsets, const std::vector<Box>& anchors) {
    if (offsets.ndim() != 2 || offsets.dim(1) != 4 ||
        offsets.dim(0) != static_cast<int>(anchors.size()))
        throw ShapeError("decode_boxes: offsets must be [A,4] matching the anchor list");
    for (double v : offsets.values())
        if (!std::isfinite(v)) throw DomainError("decode_boxes: non-finite offset");
    const int a_count = static_cast<int>(anchors.size());
    Tensor out = Tensor::zeros({a_count, 4});
    auto tv = offsets.values();
    auto ov = out.values_mut();
    for (int a = 0; a < a_count; ++a) {
        const Box& an = anchors[static_cast<size_t>(a)];
        const double tx = tv[static_cast<size_t>(a) * 4 + 0];
        const double ty = tv[static_cast<size_t>(a) * 4 + 1];
        const double tw = std::clamp(tv[static_cast<size_t>(a) * 4 + 2], -4.0, 4.0);
        const double th = std::clamp(tv[static_cast<size_t>(a) * 4 + 3], -4.0, 4.0);
        const double cx = an.cx() + tx * an.width();
        const double cy = an.cy() + ty * an.height();
        const double w = an.width() * std::exp(tw);
        const double h = an.height() * std::exp(th);
        ov[static_cast<size_t>(a) * 4 + 0] = cx - w / 2;
        ov[static_cast<size_t>(a) * 4 + 1] = cy - h / 2;
        ov[static_cast<size_t>(a) * 4 + 2] = cx + w / 2;
        ov[static_cast<size_t>(a) * 4 + 3] = cy + h / 2;
    }
    if (detail::track({&offsets})) {
        out.set_requires_grad(true);
        auto tn = offsets.node();
        auto on = out.node();
        auto boxes = std::make_shared<std::vector<Box>>(anchors);
        Tape::active()->record({tn}, on, [tn, on, boxes, a_count] {
            for (int a = 0; a < a_count; ++a) {
                const Box& an = (*boxes)[static_cast<size_t>(a)];
                const double tw = tn->data[static_cast<size_t>(a) * 4 + 2];
                const double th = tn->data[static_cast<size_t>(a) * 4 + 3];
                const double gx1 = on->grad[static_cast<size_t>(a) * 4 + 0];
                const double gy1 = on->grad[static_cast<size_t>(a) * 4 + 1];
                const double gx2 = on->grad[static_cast<size_t>(a) * 4 + 2];
                const double gy2 = on->grad[static_cast<size_t>(a) * 4 + 3];
                const double w = an.width() * std::exp(std::clamp(tw, -4.0, 4.0));
                const double h = an.height() * std::exp(std::clamp(th, -4.0, 4.0));
                tn->grad[static_cast<size_t>(a) * 4 + 0] += an.width() * (gx1 + gx2);
                tn->grad[static_cast<size_t>(a) * 4 + 1] += an.height() * (gy1 + gy2);
                if (std::fabs(tw) < 4.0)
                    tn->grad[static_cast<size_t>(a) * 4 + 2] += w / 2 * (gx2 - gx1);
                if (std::fabs(th) < 4.0)
                    tn->grad[static_cast<size_t>(a) * 4 + 3] += h / 2 * (gy2 - gy1);
            }
        });
    }
    return out;
}

std::array<double, 4> encode_box(const Box& anchor, const Box& target) {
    return {(target.cx() - anchor.cx()) / anchor.width(),
            (target.cy() - anchor.cy()) / anchor.height(), std::log(target.width() / anchor.width()),
            std::log(target.height() / anchor.height())};
}

// ---- student -------------------------------------------------------------------

namespace {

// (n, a*d + j, gy, gx) -> (n, (gy*grid+gx)*apc + a, j)
Tensor anchor_major(const Tensor& x, int apc, int d) {
    const int n = x.dim(0), ch = x.dim(1), grid = x.dim(2);
    if (ch != apc * d || x.dim(3) != grid) throw ShapeError("anchor_major: bad head layout");
    const int a_total = grid * grid * apc;
    auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(x.numel()));
    int64_t o = 0;
    for (int img = 0; img < n; ++img)
        for (int gy = 0; gy < grid; ++gy)
            for (int gx = 0; gx < grid; ++gx)
                for (int a = 0; a < apc; ++a)
                    for (int j = 0; j < d; ++j, ++o)
                        (*map)[static_cast<size_t>(o)] =
                            ((static_cast<int64_t>(img) * ch + a * d + j) * grid + gy) * grid + gx;
    Tensor out = Tensor::zeros({n, a_total, d});
    auto xv = x.values();
    auto ov = out.values_mut();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[static_cast<size_t>((*map)[i])];
    if (detail::track({&x})) {
        out.set_requires_grad(true);
        auto xn = x.node();
        auto on = out.node();
        Tape::active()->record({xn}, on, [xn, on, map] {
            for (size_t i = 0; i < on->grad.size(); ++i)
                xn->grad[static_cast<size_t>((*map)[i])] += on->grad[i];
        });
    }
    return out;
}

}  // namespace

StudentDetector::StudentDetector(const StudentConfig& cfg, Rng& rng) : cfg_(cfg) {
    grid_ = cfg.image_size / cfg.anchors.stride;
    anchors_ = generate_anchors(cfg.image_size, cfg.anchors);
    b1_w_ = he_conv(rng, cfg.channels1, 3, 3);
    b1_b_ = Tensor::zeros({cfg.channels1}, true);
    b2_w_ = he_conv(rng, cfg.channels2, cfg.channels1, 3);
    b2_b_ = Tensor::zeros({cfg.channels2}, true);
    b3_w_ = he_conv(rng, cfg.channels3, cfg.channels2, 3);
    b3_b_ = Tensor::zeros({cfg.channels3}, true);
    const int apc =
        static_cast<int>(cfg.anchors.scales.size()) * static_cast<int>(cfg.anchors.ratios.size());
    cls_w_ = he_conv(rng, apc * logit_width(), cfg.channels3, 1);
    // binary heads start biased toward background so the focal loss is stable
    const double prior = cfg.head == HeadKind::binary ? -3.9 : 0.0;
    cls_b_ = Tensor::full({apc * logit_width()}, prior, true);
    box_w_ = he_conv(rng, apc * 4, cfg.channels3, 1);
    box_b_ = Tensor::zeros({apc * 4}, true);
}

int StudentDetector::logit_width() const {
    return cfg_.head == HeadKind::categorical ? cfg_.num_classes + 1 : cfg_.num_classes;
}

StudentDetector::Output StudentDetector::forward(const Tensor& x) const {
    if (x.ndim() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.image_size ||
        x.dim(3) != cfg_.image_size)
        throw ShapeError("student forward: expected [N,3," + std::to_string(cfg_.image_size) +
                         "," + std::to_string(cfg_.image_size) + "], got " + shape_str(x.shape()));
    Tensor f = conv_block(x, b1_w_, b1_b_);
    f = conv_block(f, b2_w_, b2_b_);
    f = conv_block(f, b3_w_, b3_b_);
    const int apc =
        static_cast<int>(cfg_.anchors.scales.size()) * static_cast<int>(cfg_.anchors.ratios.size());
    Tensor cls = bias_channels(conv2d(f, cls_w_, 1, 0), cls_b_);
    Tensor box = bias_channels(conv2d(f, box_w_, 1, 0), box_b_);
    return {anchor_major(cls, apc, logit_width()), anchor_major(box, apc, 4)};
}

std::vector<std::pair<std::string, Tensor>> StudentDetector::named_params() {
    return {{"block1.w", b1_w_},   {"block1.b", b1_b_},   {"block2.w", b2_w_},
            {"block2.b", b2_b_},   {"block3.w", b3_w_},   {"block3.b", b3_b_},
            {"cls_head.w", cls_w_}, {"cls_head.b", cls_b_}, {"box_head.w", box_w_},
            {"box_head.b", box_b_}};
}

std::vector<std::pair<std::string, Tensor>> StudentDetector::named_params() const {
    return const_cast<StudentDetector*>(this)->named_params();
}

// ---- detection loss --------------------------------------------------------------

Tensor detection_loss(const Tensor& class_logits, const Tensor& box_offsets,
                      const std::vector<AnchorAssignment>& assignments,
                      const std::vector<Box>& anchors, const std::vector<ImageGroundTruth>& gts,
                      HeadKind kind, const DetectionLossConfig& cfg) {
    if (class_logits.ndim() != 3 || box_offsets.ndim() != 3)
        throw ShapeError("detection_loss: logits/offsets must be [N,A,*]");
    const int n = class_logits.dim(0), a_count = class_logits.dim(1), d = class_logits.dim(2);
    if (static_cast<int>(assignments.size()) != n || static_cast<int>(gts.size()) != n)
        throw ShapeError("detection_loss: assignment count mismatch");
    if (static_cast<int>(anchors.size()) != a_count)
        throw ShapeError("detection_loss: anchor count mismatch");

    std::vector<int> pos_rows, pos_labels;
    std::vector<double> loc_targets;
    for (int img = 0; img < n; ++img) {
        const AnchorAssignment& as = assignments[static_cast<size_t>(img)];
        for (size_t i = 0; i < as.positive.size(); ++i) {
            const int a = as.positive[i];
            const int g = as.matched_gt[i];
            pos_rows.push_back(img * a_count + a);
            pos_labels.push_back(gts[static_cast<size_t>(img)].labels[static_cast<size_t>(g)]);
            const auto t = encode_box(anchors[static_cast<size_t>(a)],
                                      gts[static_cast<size_t>(img)].boxes[static_cast<size_t>(g)]);
            loc_targets.insert(loc_targets.end(), t.begin(), t.end());
        }
    }
    const int k = static_cast<int>(pos_rows.size());
    const double norm = std::max(k, 1);

    Tensor flat_cls = reshape(class_logits, {n * a_count, d});
    Tensor flat_box = reshape(box_offsets, {n * a_count, 4});

    Tensor cls_loss;
    if (kind == HeadKind::categorical) {
        const int background = d - 1;
        // rank negatives by their background cross-entropy, forward values only
        std::vector<std::pair<double, int>> neg_ce;
        auto lv = flat_cls.values();
        for (int img = 0; img < n; ++img) {
            for (int a : assignments[static_cast<size_t>(img)].negatives) {
                const int row = img * a_count + a;
                const double* z = lv.data() + static_cast<int64_t>(row) * d;
                double m = z[0];
                for (int c = 1; c < d; ++c) m = std::max(m, z[c]);
                double denom = 0.0;
                for (int c = 0; c < d; ++c) denom += std::exp(z[c] - m);
                neg_ce.emplace_back(std::log(denom) + m - z[background], row);
            }
        }
        const size_t want = std::min(neg_ce.size(),
                                     static_cast<size_t>(std::max(
                                         cfg.neg_pos_ratio * k, double(cfg.min_negatives))));
        std::stable_sort(neg_ce.begin(), neg_ce.end(), [](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first > y.first;
            return x.second < y.second;
        });
        std::vector<int> rows = pos_rows;
        std::vector<int> labels = pos_labels;
        for (size_t i = 0; i < want; ++i) {
            rows.push_back(neg_ce[i].second);
            labels.push_back(background);
        }
        if (rows.empty()) return Tensor::scalar(0.0);
        cls_loss = mul(sum_all(cross_entropy_rows(index_rows(flat_cls, rows), labels)), 1.0 / norm);
    } else {
        std::vector<int> rows;
        std::vector<double> targets;
        for (int img = 0; img < n; ++img) {
            const AnchorAssignment& as = assignments[static_cast<size_t>(img)];
            std::vector<int> label_of(static_cast<size_t>(a_count), -1);  // -1 background
            for (size_t i = 0; i < as.positive.size(); ++i)
                label_of[static_cast<size_t>(as.positive[i])] =
                    gts[static_cast<size_t>(img)]
                        .labels[static_cast<size_t>(as.matched_gt[i])];
            for (size_t i = 0; i < as.positive.size(); ++i) {
                rows.push_back(img * a_count + as.positive[i]);
                for (int c = 0; c < d; ++c)
                    targets.push_back(
                        label_of[static_cast<size_t>(as.positive[i])] == c ? 1.0 : 0.0);
            }
            for (int a : as.negatives) {
                rows.push_back(img * a_count + a);
                for (int c = 0; c < d; ++c) targets.push_back(0.0);
            }
        }
        if (rows.empty()) return Tensor::scalar(0.0);
        Tensor t = Tensor::from({static_cast<int>(rows.size()), d}, std::move(targets));
        cls_loss = mul(sum_all(focal_bce(index_rows(flat_cls, rows), t, cfg.focal_gamma,
                                         cfg.focal_alpha)),
                       1.0 / norm);
    }

    if (k == 0) return cls_loss;
    Tensor targets = Tensor::from({k, 4}, std::move(loc_targets));
    Tensor loc_loss =
        mul(sum_all(smooth_l1(index_rows(flat_box, pos_rows), targets)), 1.0 / norm);
    return add(cls_loss, loc_loss);
}

}  // namespace kd
