#include <cmath>

#include "kd/grad_check.hpp"
#include "kd/kd_cls.hpp"
#include "kd/kd_loc.hpp"
#include "kd/models.hpp"
#include "kd/rng.hpp"
#include "kd/train.hpp"

namespace kd {

namespace {

constexpr double kEps = 1e-4;

Tensor rand_tensor(Rng& rng, Shape shape, double lo, double hi) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& v : data) v = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(data), true);
}

// magnitudes in [0.1, 1] with random sign, clear of relu/abs kinks
Tensor rand_signed_away(Rng& rng, Shape shape) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& v : data) v = rng.uniform(0.1, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
    return Tensor::from(std::move(shape), std::move(data), true);
}

// rows whose top-2 gap is wide enough that max stays single-valued under
// the probe step
Tensor rand_max_safe(Rng& rng, int rows, int cols) {
    while (true) {
        Tensor t = rand_tensor(rng, {rows, cols}, -1.0, 1.0);
        bool ok = true;
        for (int r = 0; r < rows && ok; ++r) {
            double top = -2.0, second = -2.0;
            for (int c = 0; c < cols; ++c) {
                const double v = t.at({r, c});
                if (v > top) {
                    second = top;
                    top = v;
                } else if (v > second) {
                    second = v;
                }
            }
            ok = top - second > 1e-2;
        }
        if (ok) return t;
    }
}

double check_pointwise(uint64_t seed) {
    Rng rng = Rng::derive(seed, 301);
    Tensor a = rand_signed_away(rng, {3, 4});
    Tensor b = rand_signed_away(rng, {3, 4});
    auto f = [&] {
        Tensor t1 = mul(relu(mul(a, 2.0)), abs_(b));
        Tensor t2 = exp_(mul(sub(a, b), 0.3));
        Tensor t3 = log_(add(exp_(b), 1.2));
        return sum_all(add(add(t1, t2), mul(t3, 0.7)));
    };
    return grad_check(f, {a, b}, kEps);
}

double check_linear_map(uint64_t seed) {
    Rng rng = Rng::derive(seed, 302);
    Tensor x = rand_tensor(rng, {3, 4}, -1, 1);
    Tensor w = rand_tensor(rng, {4, 2}, -1, 1);
    Tensor b = rand_tensor(rng, {2}, -1, 1);
    auto f = [&] {
        Tensor y = linear(x, w, b);
        return sum_all(mul(y, y));
    };
    return grad_check(f, {x, w, b}, kEps);
}

double check_conv2d(uint64_t seed) {
    Rng rng = Rng::derive(seed, 303);
    Tensor x = rand_tensor(rng, {2, 3, 8, 8}, -1, 1);
    Tensor k = rand_tensor(rng, {4, 3, 3, 3}, -0.5, 0.5);
    auto f = [&] {
        Tensor y = conv2d(x, k, 2, 1);
        return mean_all(mul(y, y));
    };
    return grad_check(f, {x, k}, kEps);
}

double check_reduce(uint64_t seed) {
    Rng rng = Rng::derive(seed, 304);
    Tensor x = rand_max_safe(rng, 4, 5);
    auto f = [&] {
        Tensor m = reduce(x, {1}, Reduce::max);
        Tensor s = reduce(x, {0}, Reduce::sum);
        Tensor a = reduce(x, {0, 1}, Reduce::mean);
        return add(add(sum_all(mul(m, m)), mean_all(mul(s, s))), mul(a, 3.0));
    };
    return grad_check(f, {x}, kEps);
}

double check_softmax_t(uint64_t seed) {
    Rng rng = Rng::derive(seed, 305);
    Tensor z = rand_tensor(rng, {3, 5}, -2, 2);
    const double t = seed % 2 == 0 ? 0.7 : 2.0;
    auto f = [&] {
        Tensor p = softmax_t(z, t);
        return sum_all(mul(p, log_(p)));
    };
    return grad_check(f, {z}, kEps);
}

double check_sigmoid_t(uint64_t seed) {
    Rng rng = Rng::derive(seed, 306);
    Tensor z = rand_tensor(rng, {2, 6}, -3, 3);
    const double t = seed % 2 == 0 ? 1.0 : 2.5;
    auto f = [&] {
        Tensor p = sigmoid_t(z, t);
        return sum_all(mul(p, p));
    };
    return grad_check(f, {z}, kEps);
}

double check_decode_boxes(uint64_t seed) {
    Rng rng = Rng::derive(seed, 307);
    const std::vector<Box> anchors = {{8, 8, 24, 24}, {16, 4, 32, 28}, {0, 0, 12, 12}};
    Tensor t = rand_tensor(rng, {3, 4}, -1.5, 1.5);
    auto f = [&] {
        Tensor dec = decode_boxes(t, anchors);
        return mul(mean_all(mul(dec, dec)), 0.01);
    };
    return grad_check(f, {t}, kEps);
}

double check_spatial_transform_crop(uint64_t seed) {
    Rng rng = Rng::derive(seed, 308);
    Tensor img = rand_tensor(rng, {1, 8, 8}, 0, 1);
    // near-identity keeps sample points close to half-integer offsets,
    // inside one bilinear cell for the probe step
    std::vector<double> a = {1, 0, 0, 0, 1, 0};
    for (double& v : a) v += rng.uniform(-0.04, 0.04);
    Tensor affine = Tensor::from({2, 3}, std::move(a), true);
    auto f = [&] {
        Tensor crop = spatial_transform_crop(affine, img, 4);
        return mean_all(mul(crop, crop));
    };
    return grad_check(f, {affine, img}, kEps);
}

double check_adaptive_avg_pool(uint64_t seed) {
    Rng rng = Rng::derive(seed, 309);
    Tensor x = rand_tensor(rng, {2, 5, 7}, -1, 1);
    auto f = [&] {
        Tensor y = adaptive_avg_pool(x, 2, 3);
        return sum_all(mul(y, y));
    };
    return grad_check(f, {x}, kEps);
}

double check_kd_cls_categorical(uint64_t seed) {
    Rng rng = Rng::derive(seed, 310);
    Tensor zs = rand_tensor(rng, {3, 5}, -2, 2);
    Tensor zt = rand_tensor(rng, {3, 4}, -2, 2);
    auto f = [&] { return kd_cls_loss(zs, zt, HeadKind::categorical, 2.0); };
    return grad_check(f, {zs}, kEps);
}

double check_kd_cls_binary(uint64_t seed) {
    Rng rng = Rng::derive(seed, 311);
    Tensor zs = rand_tensor(rng, {3, 4}, -2, 2);
    Tensor zt = rand_tensor(rng, {3, 4}, -2, 2);
    auto f = [&] { return kd_cls_loss(zs, zt, HeadKind::binary, 1.5); };
    return grad_check(f, {zs}, kEps);
}

Tensor ramp_image(Rng& rng, int size) {
    std::vector<double> data(static_cast<size_t>(3) * size * size);
    const double sx = rng.uniform(0.5, 1.5) / size;
    const double sy = rng.uniform(0.2, 1.0) / size;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                data[static_cast<size_t>((c * size + y) * size + x)] =
                    (sx * x + sy * y) / (c + 1.0);
    return Tensor::from({3, size, size}, std::move(data));
}

// boxes of width == sampling size whose corners sit at half-integer pixels:
// sample points stay inside one bilinear cell under the probe step
Tensor loc_boxes(Rng& rng, int k, int s, int image_size) {
    std::vector<double> data;
    for (int i = 0; i < k; ++i) {
        const double x1 = rng.uniform_int(2, image_size - s - 3) + 0.5 + rng.uniform(-0.1, 0.1);
        const double y1 = rng.uniform_int(2, image_size - s - 3) + 0.5 + rng.uniform(-0.1, 0.1);
        data.insert(data.end(), {x1, y1, x1 + s, y1 + s});
    }
    return Tensor::from({k, 4}, std::move(data), true);
}

DistillConfig loc_cfg() {
    DistillConfig cfg;
    cfg.sampling_size = 8;
    cfg.pool_w = 2;
    cfg.pool_h = 2;
    return cfg;
}

std::vector<Box> loc_gts(Rng& rng, int k, int image_size) {
    std::vector<Box> gts;
    for (int i = 0; i < k; ++i) {
        const double x1 = rng.uniform(2, image_size - 14);
        const double y1 = rng.uniform(2, image_size - 14);
        gts.push_back({x1, y1, x1 + rng.uniform(6, 10), y1 + rng.uniform(6, 10)});
    }
    return gts;
}

double check_kd_loc_pixel(uint64_t seed) {
    Rng rng = Rng::derive(seed, 312);
    DistillConfig cfg = loc_cfg();
    Tensor img = ramp_image(rng, 24);
    Tensor pred = loc_boxes(rng, 2, cfg.sampling_size, 24);
    const std::vector<Box> gts = loc_gts(rng, 2, 24);
    auto f = [&] { return kd_loc_pixel_loss(pred, gts, img, cfg); };
    return grad_check(f, {pred}, kEps);
}

double check_kd_loc_feature(uint64_t seed) {
    Rng rng = Rng::derive(seed, 313);
    TeacherConfig tc;
    tc.input_size = 8;
    tc.num_classes = 3;
    tc.channels1 = 4;
    tc.channels2 = 6;
    Rng wrng = Rng::derive(seed, 314);
    TeacherModel teacher(tc, wrng);
    teacher.set_frozen(true);
    // positive bias offsets keep pre-activations off the relu kink
    for (auto& [name, p] : teacher.named_params())
        if (name == "conv1.b" || name == "conv2.b")
            for (double& v : p.values_mut()) v = wrng.uniform(0.1, 0.3);

    DistillConfig cfg = loc_cfg();
    cfg.layer1 = true;
    cfg.layer2 = true;
    Tensor img = ramp_image(rng, 24);
    Tensor pred = loc_boxes(rng, 2, cfg.sampling_size, 24);
    const std::vector<Box> gts = loc_gts(rng, 2, 24);
    auto f = [&] { return kd_loc_feature_loss(pred, gts, img, teacher, cfg); };
    return grad_check(f, {pred}, kEps);
}

double check_detection_loss(uint64_t seed) {
    Rng rng = Rng::derive(seed, 315);
    const std::vector<Box> anchors = {{0, 0, 10, 10}, {20, 20, 30, 30}, {5, 18, 15, 30}};
    std::vector<ImageGroundTruth> gts(1);
    gts[0].boxes = {{1, 1, 11, 11}};
    gts[0].labels = {rng.uniform_int(0, 2)};
    const AnchorAssignment as = assign_anchors(anchors, gts[0].boxes, 0.5, 0.4);
    Tensor cls = rand_tensor(rng, {1, 3, 4}, -1, 1);
    Tensor box = rand_tensor(rng, {1, 3, 4}, -0.4, 0.4);
    Tensor cls_b = rand_tensor(rng, {1, 3, 3}, -1, 1);
    auto f = [&] {
        return add(detection_loss(cls, box, {as}, anchors, gts, HeadKind::categorical),
                   detection_loss(cls_b, box, {as}, anchors, gts, HeadKind::binary));
    };
    return grad_check(f, {cls, cls_b, box}, kEps);
}

double check_total_loss(uint64_t seed) {
    Rng rng = Rng::derive(seed, 316);
    DistillConfig cfg = loc_cfg();
    cfg.lambda_kc = 0.4;
    cfg.lambda_kl = 0.7;
    Tensor x = rand_tensor(rng, {4}, -1, 1);
    Tensor zs = rand_tensor(rng, {2, 5}, -2, 2);
    Tensor zt = rand_tensor(rng, {2, 4}, -2, 2);
    Tensor img = ramp_image(rng, 24);
    Tensor pred = loc_boxes(rng, 1, cfg.sampling_size, 24);
    const std::vector<Box> gts = loc_gts(rng, 1, 24);
    auto f = [&] {
        Tensor det = sum_all(mul(x, x));
        Tensor cls = kd_cls_loss(zs, zt, HeadKind::categorical, cfg.temperature);
        Tensor loc = kd_loc_pixel_loss(pred, gts, img, cfg);
        return total_loss(det, cls, loc, cfg);
    };
    return grad_check(f, {x, zs, pred}, kEps);
}

}  // namespace

std::vector<GradCheckCase> gradcheck_registry() {
    return {
        {"pointwise", check_pointwise, 1e-3, 20},
        {"linear_map", check_linear_map, 1e-3, 20},
        {"conv2d", check_conv2d, 1e-3, 20},
        {"reduce", check_reduce, 1e-3, 20},
        {"softmax_t", check_softmax_t, 1e-3, 20},
        {"sigmoid_t", check_sigmoid_t, 1e-3, 20},
        {"decode_boxes", check_decode_boxes, 1e-3, 20},
        {"spatial_transform_crop", check_spatial_transform_crop, 1e-3, 20},
        {"adaptive_avg_pool", check_adaptive_avg_pool, 1e-3, 20},
        {"kd_cls_loss_categorical", check_kd_cls_categorical, 1e-3, 20},
        {"kd_cls_loss_binary", check_kd_cls_binary, 1e-3, 20},
        {"kd_loc_feature_loss", check_kd_loc_feature, 1e-3, 20},
        {"kd_loc_pixel_loss", check_kd_loc_pixel, 1e-3, 20},
        {"detection_loss", check_detection_loss, 1e-3, 20},
        {"total_loss", check_total_loss, 1e-3, 20},
    };
}

}  // namespace kd
