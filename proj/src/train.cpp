#include "kd/train.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "kd/kd_cls.hpp"

namespace kd {

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double momentum)
    : params_(std::move(params)), momentum_(momentum) {
    for (const Tensor& p : params_)
        velocity_.emplace_back(static_cast<size_t>(p.numel()), 0.0);
}

void SgdOptimizer::step(double lr) {
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        auto g = p.grad();
        auto v = velocity_[i].data();
        auto x = p.values_mut();
        for (size_t j = 0; j < x.size(); ++j) {
            v[j] = momentum_ * v[j] + g[j];
            x[j] -= lr * v[j];
        }
    }
    zero_grad();
}

void SgdOptimizer::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

Tensor total_loss(const Tensor& det, const Tensor& kd_cls, const Tensor& kd_loc,
                  const DistillConfig& cfg) {
    auto check = [](const Tensor& t, const char* name) {
        if (t.defined() && !std::isfinite(t.value()))
            throw NumericalError(std::string("total_loss: non-finite ") + name + " component");
    };
    check(det, "detection");
    check(kd_cls, "kd_cls");
    check(kd_loc, "kd_loc");
    Tensor total = det;
    if (kd_cls.defined() && cfg.lambda_kc > 0.0) {
        Tensor term = mul(kd_cls, cfg.lambda_kc);
        total = total.defined() ? add(total, term) : term;
    }
    if (kd_loc.defined() && cfg.lambda_kl > 0.0) {
        Tensor term = mul(kd_loc, cfg.lambda_kl);
        total = total.defined() ? add(total, term) : term;
    }
    if (!total.defined()) throw ConfigError("total_loss: every component is disabled");
    return total;
}

double lr_at_epoch(double base_lr, int epoch, int total_epochs) {
    double lr = base_lr;
    if (epoch >= total_epochs * 2 / 3) lr *= 0.1;
    if (epoch >= total_epochs * 11 / 12) lr *= 0.1;
    return lr;
}

Tensor image_tensor(const std::vector<float>& pixels, int size, bool flip) {
    std::vector<double> data(pixels.size());
    if (!flip) {
        for (size_t i = 0; i < pixels.size(); ++i) data[i] = pixels[i];
    } else {
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    data[static_cast<size_t>((c * size + y) * size + x)] =
                        pixels[static_cast<size_t>((c * size + y) * size + (size - 1 - x))];
    }
    return Tensor::from({3, size, size}, std::move(data));
}

void write_metrics_line(std::ostream& os, const EpochMetrics& m, bool student) {
    nlohmann::json j;
    j["epoch"] = m.epoch;
    j["lr"] = m.lr;
    if (student) {
        j["loss_det"] = m.loss_det;
        j["loss_kd_cls"] = m.loss_kd_cls;
        j["loss_kd_loc"] = m.loss_kd_loc;
        j["val_mAP"] = m.val_map;
        j["val_AP50"] = m.val_ap50;
        j["val_AP75"] = m.val_ap75;
    } else {
        j["loss"] = m.loss;
        j["val_top1"] = m.val_top1;
    }
    os << j.dump() << "\n";
}

namespace {

std::vector<int> shuffled_indices(size_t n, Rng& rng) {
    std::vector<int> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
    for (size_t i = n; i > 1; --i) {
        const size_t j = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

Tensor stack_images(const std::vector<Tensor>& images) {
    std::vector<Tensor> views;
    views.reserve(images.size());
    for (const Tensor& t : images)
        views.push_back(reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)}));
    return concat(views, 0);
}

std::vector<double> snapshot_params(const std::vector<std::pair<std::string, Tensor>>& params) {
    std::vector<double> flat;
    for (const auto& [name, p] : params)
        flat.insert(flat.end(), p.values().begin(), p.values().end());
    return flat;
}

void restore_params(std::vector<std::pair<std::string, Tensor>> params,
                    const std::vector<double>& flat) {
    size_t off = 0;
    for (auto& [name, p] : params) {
        auto dst = p.values_mut();
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                  flat.begin() + static_cast<std::ptrdiff_t>(off + dst.size()), dst.begin());
        off += dst.size();
    }
}

}  // namespace

double top1_accuracy(const TeacherModel& model, const CropDataset& data, int batch_size) {
    if (data.records.empty()) return 0.0;
    int64_t correct = 0;
    for (size_t start = 0; start < data.records.size(); start += static_cast<size_t>(batch_size)) {
        const size_t end = std::min(data.records.size(), start + static_cast<size_t>(batch_size));
        std::vector<Tensor> images;
        for (size_t i = start; i < end; ++i)
            images.push_back(image_tensor(data.records[i].image, data.crop_size));
        auto out = model.forward(stack_images(images));
        const int c_count = out.logits.dim(1);
        for (size_t i = start; i < end; ++i) {
            const int row = static_cast<int>(i - start);
            int best = 0;
            for (int c = 1; c < c_count; ++c)
                if (out.logits.at({row, c}) > out.logits.at({row, best})) best = c;
            if (best == data.records[i].label) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.records.size());
}

TeacherTrainResult train_teacher(const CropDataset& train_set, const CropDataset& val_set,
                                 TeacherLossKind loss_kind, const TrainConfig& cfg,
                                 TeacherConfig model_cfg, std::ostream* metrics,
                                 double stop_at_top1) {
    if (train_set.records.empty()) throw ConfigError("train_teacher: empty training set");
    model_cfg.input_size = train_set.crop_size;
    model_cfg.num_classes = train_set.num_classes;

    Rng init_rng = Rng::derive(cfg.seed, 1);
    TeacherTrainResult result{TeacherModel(model_cfg, init_rng), {}, 0.0, -1};
    TeacherModel& model = result.model;

    std::vector<Tensor> params;
    for (auto& [name, p] : model.named_params()) params.push_back(p);
    SgdOptimizer opt(params, cfg.momentum);
    std::vector<double> best_params = snapshot_params(model.named_params());

    const int c_count = train_set.num_classes;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg.lr, epoch, cfg.epochs);
        Rng order_rng = Rng::derive(cfg.seed, 100 + static_cast<uint64_t>(epoch));
        Rng flip_rng = Rng::derive(cfg.seed, 10000 + static_cast<uint64_t>(epoch));
        const std::vector<int> order = shuffled_indices(train_set.records.size(), order_rng);

        double epoch_loss = 0.0;
        int64_t samples = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const int bsz = static_cast<int>(end - start);
            std::vector<Tensor> images;
            std::vector<int> labels;
            for (size_t i = start; i < end; ++i) {
                const CropRecord& rec = train_set.records[static_cast<size_t>(order[i])];
                images.push_back(image_tensor(rec.image, train_set.crop_size,
                                              flip_rng.uniform() < cfg.flip_prob));
                labels.push_back(rec.label);
            }
            Tape tape;
            Tensor logits = model.forward(stack_images(images)).logits;
            Tensor loss;
            if (loss_kind == TeacherLossKind::categorical ||
                loss_kind == TeacherLossKind::joint) {
                loss = mean_all(cross_entropy_rows(logits, labels));
            }
            if (loss_kind == TeacherLossKind::binary || loss_kind == TeacherLossKind::joint) {
                std::vector<double> onehot(static_cast<size_t>(bsz) * c_count, 0.0);
                for (int i = 0; i < bsz; ++i)
                    onehot[static_cast<size_t>(i * c_count + labels[static_cast<size_t>(i)])] = 1.0;
                Tensor targets = Tensor::from({bsz, c_count}, std::move(onehot));
                // focal at gamma 0, alpha 0.5 is half the binary cross-entropy
                Tensor bce = mul(sum_all(focal_bce(logits, targets, 0.0, 0.5)), 2.0 / bsz);
                loss = loss.defined() ? add(loss, bce) : bce;
            }
            if (!std::isfinite(loss.value()))
                throw NumericalError("train_teacher: non-finite loss at batch " +
                                     std::to_string(start / static_cast<size_t>(cfg.batch_size)));
            tape.backward(loss);
            opt.step(lr);
            epoch_loss += loss.value() * bsz;
            samples += bsz;
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.lr = lr;
        m.loss = epoch_loss / static_cast<double>(samples);
        m.val_top1 = top1_accuracy(model, val_set);
        result.history.push_back(m);
        if (metrics) write_metrics_line(*metrics, m, false);

        if (m.val_top1 > result.best_val_top1) {
            result.best_val_top1 = m.val_top1;
            result.best_epoch = epoch;
            best_params = snapshot_params(model.named_params());
        }
        if (result.best_val_top1 >= stop_at_top1) break;
    }
    restore_params(model.named_params(), best_params);
    return result;
}

namespace {

struct BatchPositive {
    int image_in_batch;
    int anchor;
    int flat_row;  // image_in_batch * A + anchor
    int gt_index;
};

}  // namespace

StudentTrainResult train_student(const DetDataset& train_set, const DetDataset& val_set,
                                 const TeacherModel* teacher, const TrainConfig& cfg,
                                 StudentConfig model_cfg, std::ostream* metrics) {
    if (train_set.records.empty()) throw ConfigError("train_student: empty training set");
    cfg.distill.validate();
    model_cfg.image_size = train_set.image_size;
    model_cfg.num_classes = train_set.num_classes;
    model_cfg.head = cfg.head;

    const bool kd_cls_on = cfg.enable_kd_cls && cfg.distill.lambda_kc > 0.0;
    const bool feature_on =
        cfg.enable_kd_loc && (cfg.distill.layer1 || cfg.distill.layer2) && cfg.distill.lambda_kl > 0.0;
    if (cfg.enable_kd_loc && !cfg.distill.layer1 && !cfg.distill.layer2 && !cfg.distill.layer0)
        throw ConfigError("train_student: kd_loc enabled with an empty layer set");
    const bool pixel_on = (cfg.enable_kd_loc0 || (cfg.enable_kd_loc && cfg.distill.layer0)) &&
                          cfg.distill.lambda_kl > 0.0;
    if ((kd_cls_on || feature_on) && teacher == nullptr)
        throw ConfigError("train_student: kd_cls/kd_loc require a teacher checkpoint");
    if (teacher && kd_cls_on && teacher->config().num_classes != train_set.num_classes)
        throw ConfigError("train_student: teacher class count mismatch");

    Rng init_rng = Rng::derive(cfg.seed, 2);
    StudentTrainResult result{StudentDetector(model_cfg, init_rng), {}, {}};
    StudentDetector& model = result.model;
    const std::vector<Box>& anchors = model.anchors();
    const int a_count = static_cast<int>(anchors.size());
    const int d_width = model.logit_width();
    const int img_size = train_set.image_size;

    std::vector<Tensor> params;
    for (auto& [name, p] : model.named_params()) params.push_back(p);
    SgdOptimizer opt(params, cfg.momentum);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg.lr, epoch, cfg.epochs);
        Rng order_rng = Rng::derive(cfg.seed, 200 + static_cast<uint64_t>(epoch));
        Rng flip_rng = Rng::derive(cfg.seed, 20000 + static_cast<uint64_t>(epoch));
        const std::vector<int> order = shuffled_indices(train_set.records.size(), order_rng);

        double ep_det = 0.0, ep_cls = 0.0, ep_loc = 0.0;
        int64_t samples = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const int bsz = static_cast<int>(end - start);
            const size_t batch_index = start / static_cast<size_t>(cfg.batch_size);

            std::vector<Tensor> images;
            std::vector<ImageGroundTruth> gts;
            std::vector<AnchorAssignment> assignments;
            std::vector<BatchPositive> positives;
            for (size_t i = start; i < end; ++i) {
                const DetRecord& rec = train_set.records[static_cast<size_t>(order[i])];
                const bool flip = flip_rng.uniform() < cfg.flip_prob;
                images.push_back(image_tensor(rec.image, img_size, flip));
                ImageGroundTruth gt;
                gt.labels = rec.ann.labels;
                for (const Box& b : rec.ann.boxes) {
                    Box bb = b;
                    if (flip) {
                        bb.x1 = img_size - b.x2;
                        bb.x2 = img_size - b.x1;
                    }
                    gt.boxes.push_back(bb);
                }
                gts.push_back(std::move(gt));
                assignments.push_back(
                    assign_anchors(anchors, gts.back().boxes, cfg.pos_thresh, cfg.neg_thresh));
                const AnchorAssignment& as = assignments.back();
                const int in_batch = static_cast<int>(i - start);
                for (size_t pi = 0; pi < as.positive.size(); ++pi)
                    positives.push_back({in_batch, as.positive[pi],
                                         in_batch * a_count + as.positive[pi], as.matched_gt[pi]});
            }

            Tape tape;
            auto out = model.forward(stack_images(images));
            Tensor det = detection_loss(out.class_logits, out.box_offsets, assignments, anchors,
                                        gts, cfg.head);

            Tensor kd_cls_term, kd_loc_term;
            const int total_k = static_cast<int>(positives.size());

            if (kd_cls_on && total_k > 0) {
                // teacher sees the ground-truth crops, resized to its input
                const int ts = teacher->config().input_size;
                std::vector<Tensor> crops;
                std::vector<int> pos_rows;
                for (const BatchPositive& p : positives) {
                    const Box& g = gts[static_cast<size_t>(p.image_in_batch)]
                                       .boxes[static_cast<size_t>(p.gt_index)];
                    Tensor gt_box = Tensor::from({4}, {g.x1, g.y1, g.x2, g.y2});
                    Tensor crop = spatial_transform_crop(
                        box_to_affine(gt_box, img_size, img_size),
                        images[static_cast<size_t>(p.image_in_batch)], ts);
                    crops.push_back(reshape(crop, {1, 3, ts, ts}));
                    pos_rows.push_back(p.flat_row);
                }
                Tensor teacher_logits = teacher->forward(concat(crops, 0)).logits;
                Tensor student_logits =
                    index_rows(reshape(out.class_logits, {bsz * a_count, d_width}), pos_rows);
                kd_cls_term =
                    kd_cls_loss(student_logits, teacher_logits, cfg.head, cfg.distill.temperature);
            }

            if ((feature_on || pixel_on) && total_k > 0) {
                Tensor flat_offsets = reshape(out.box_offsets, {bsz * a_count, 4});
                Tensor feature_total, pixel_total;
                int kept_total = 0;
                std::vector<std::pair<Tensor, std::vector<Box>>> per_image;  // kept boxes + gts
                std::vector<int> per_image_idx;
                for (int img = 0; img < bsz; ++img) {
                    std::vector<int> rows;
                    std::vector<Box> anchor_subset;
                    std::vector<Box> gt_subset;
                    for (const BatchPositive& p : positives) {
                        if (p.image_in_batch != img) continue;
                        rows.push_back(p.flat_row);
                        anchor_subset.push_back(anchors[static_cast<size_t>(p.anchor)]);
                        gt_subset.push_back(
                            gts[static_cast<size_t>(img)].boxes[static_cast<size_t>(p.gt_index)]);
                    }
                    if (rows.empty()) continue;
                    Tensor boxes =
                        decode_boxes(index_rows(flat_offsets, rows), anchor_subset);
                    const std::vector<int> kept = filter_boxes_for_loc(boxes, img_size, img_size);
                    if (kept.empty()) continue;
                    std::vector<Box> kept_gts;
                    for (int k : kept) kept_gts.push_back(gt_subset[static_cast<size_t>(k)]);
                    per_image.emplace_back(index_rows(boxes, kept), std::move(kept_gts));
                    per_image_idx.push_back(img);
                    kept_total += static_cast<int>(kept.size());
                }
                for (size_t i = 0; i < per_image.size(); ++i) {
                    const Tensor& boxes = per_image[i].first;
                    const std::vector<Box>& kept_gts = per_image[i].second;
                    const Tensor& image = images[static_cast<size_t>(per_image_idx[i])];
                    const double weight = static_cast<double>(boxes.dim(0)) / kept_total;
                    if (feature_on) {
                        Tensor term = mul(
                            kd_loc_feature_loss(boxes, kept_gts, image, *teacher, cfg.distill),
                            weight);
                        feature_total = feature_total.defined() ? add(feature_total, term) : term;
                    }
                    if (pixel_on) {
                        Tensor term =
                            mul(kd_loc_pixel_loss(boxes, kept_gts, image, cfg.distill), weight);
                        pixel_total = pixel_total.defined() ? add(pixel_total, term) : term;
                    }
                }
                if (feature_total.defined() && pixel_total.defined())
                    kd_loc_term = mul(add(feature_total, pixel_total), 0.5);
                else if (feature_total.defined())
                    kd_loc_term = feature_total;
                else if (pixel_total.defined())
                    kd_loc_term = pixel_total;
            }

            Tensor total;
            try {
                total = total_loss(det, kd_cls_term, kd_loc_term, cfg.distill);
            } catch (const NumericalError& e) {
                throw NumericalError(std::string(e.what()) + " at batch " +
                                     std::to_string(batch_index));
            }
            tape.backward(total);
            opt.step(lr);

            ep_det += det.value() * bsz;
            if (kd_cls_term.defined()) ep_cls += kd_cls_term.value() * bsz;
            if (kd_loc_term.defined()) ep_loc += kd_loc_term.value() * bsz;
            samples += bsz;
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.lr = lr;
        m.loss_det = ep_det / static_cast<double>(samples);
        m.loss_kd_cls = ep_cls / static_cast<double>(samples);
        m.loss_kd_loc = ep_loc / static_cast<double>(samples);
        m.loss = m.loss_det + cfg.distill.lambda_kc * m.loss_kd_cls +
                 cfg.distill.lambda_kl * m.loss_kd_loc;
        CocoMetrics vm = coco_metrics(detect(model, val_set), dataset_ground_truth(val_set), {},
                                      val_set.num_classes);
        m.val_map = vm.mAP;
        m.val_ap50 = vm.ap50;
        m.val_ap75 = vm.ap75;
        result.history.push_back(m);
        if (metrics) write_metrics_line(*metrics, m, true);
        result.final_val = vm;
    }
    return result;
}

std::vector<GtBox> dataset_ground_truth(const DetDataset& data) {
    std::vector<GtBox> gts;
    for (size_t i = 0; i < data.records.size(); ++i)
        for (size_t a = 0; a < data.records[i].ann.boxes.size(); ++a)
            gts.push_back({static_cast<int>(i), data.records[i].ann.boxes[a],
                           data.records[i].ann.labels[a]});
    return gts;
}

std::vector<Detection> detect(const StudentDetector& model, const DetDataset& data,
                              const DetectConfig& cfg) {
    const StudentConfig& scfg = model.config();
    const std::vector<Box>& anchors = model.anchors();
    const int a_count = static_cast<int>(anchors.size());
    const int d_width = model.logit_width();
    const int c_count = scfg.num_classes;
    const bool categorical = scfg.head == HeadKind::categorical;

    std::vector<Detection> all;
    for (size_t start = 0; start < data.records.size();
         start += static_cast<size_t>(cfg.batch_size)) {
        const size_t end = std::min(data.records.size(), start + static_cast<size_t>(cfg.batch_size));
        std::vector<Tensor> images;
        for (size_t i = start; i < end; ++i)
            images.push_back(image_tensor(data.records[i].image, data.image_size));
        auto out = model.forward(stack_images(images));

        for (size_t i = start; i < end; ++i) {
            const int row = static_cast<int>(i - start);
            std::vector<Detection> cands;
            for (int a = 0; a < a_count; ++a) {
                // per-anchor class scores
                double denom = 0.0, zmax = -1e300;
                if (categorical) {
                    for (int c = 0; c < d_width; ++c)
                        zmax = std::max(zmax, out.class_logits.at({row, a, c}));
                    for (int c = 0; c < d_width; ++c)
                        denom += std::exp(out.class_logits.at({row, a, c}) - zmax);
                }
                Box decoded;
                bool have_box = false;
                for (int c = 0; c < c_count; ++c) {
                    const double z = out.class_logits.at({row, a, c});
                    const double score = categorical
                                             ? std::exp(z - zmax) / denom
                                             : 1.0 / (1.0 + std::exp(-z));
                    if (score < cfg.score_thresh) continue;
                    if (!have_box) {
                        const Box& an = anchors[static_cast<size_t>(a)];
                        const double tx = out.box_offsets.at({row, a, 0});
                        const double ty = out.box_offsets.at({row, a, 1});
                        const double tw = std::clamp(out.box_offsets.at({row, a, 2}), -4.0, 4.0);
                        const double th = std::clamp(out.box_offsets.at({row, a, 3}), -4.0, 4.0);
                        const double cx = an.cx() + tx * an.width();
                        const double cy = an.cy() + ty * an.height();
                        const double w = an.width() * std::exp(tw);
                        const double h = an.height() * std::exp(th);
                        decoded = {std::clamp(cx - w / 2, 0.0, double(data.image_size)),
                                   std::clamp(cy - h / 2, 0.0, double(data.image_size)),
                                   std::clamp(cx + w / 2, 0.0, double(data.image_size)),
                                   std::clamp(cy + h / 2, 0.0, double(data.image_size))};
                        have_box = true;
                    }
                    if (decoded.valid())
                        cands.push_back({static_cast<int>(i), decoded, c, score});
                }
            }
            std::vector<Detection> kept = nms(cands, cfg.nms_iou);
            if (static_cast<int>(kept.size()) > cfg.max_per_image)
                kept.resize(static_cast<size_t>(cfg.max_per_image));  // nms returns score-sorted
            all.insert(all.end(), kept.begin(), kept.end());
        }
    }
    return all;
}

}  // namespace kd
