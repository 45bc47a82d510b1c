#include "kd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace kd {

namespace {

// deterministic detection order: score desc, then image, then insertion
std::vector<int> score_order(const std::vector<Detection>& dets) {
    std::vector<int> order(dets.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        const Detection& da = dets[static_cast<size_t>(a)];
        const Detection& db = dets[static_cast<size_t>(b)];
        if (da.score != db.score) return da.score > db.score;
        if (da.image_id != db.image_id) return da.image_id < db.image_id;
        return a < b;
    });
    return order;
}

// greedy matching at one threshold; returns per-detection matched gt index
// (-1 for false positives) and the per-gt matched flag
struct MatchResult {
    std::vector<int> det_match;
    std::vector<bool> gt_matched;
};

MatchResult match_greedy(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                         double iou_thresh) {
    MatchResult r;
    r.det_match.assign(dets.size(), -1);
    r.gt_matched.assign(gts.size(), false);
    const std::vector<int> order = score_order(dets);
    for (int di : order) {
        const Detection& d = dets[static_cast<size_t>(di)];
        int best_gt = -1;
        double best_iou = iou_thresh;  // must reach the threshold
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            const GtBox& g = gts[gi];
            if (g.image_id != d.image_id || g.label != d.label || r.gt_matched[gi]) continue;
            const double v = iou(d.box, g.box);
            if (v > best_iou || (v == best_iou && v > 0.0 && best_gt < 0)) {
                best_iou = v;
                best_gt = static_cast<int>(gi);
            }
        }
        if (best_gt >= 0) {
            r.det_match[static_cast<size_t>(di)] = best_gt;
            r.gt_matched[static_cast<size_t>(best_gt)] = true;
        }
    }
    return r;
}

double ap_from_matches(const std::vector<Detection>& dets, const MatchResult& m, int64_t gt_count) {
    if (gt_count == 0) return std::numeric_limits<double>::quiet_NaN();
    const std::vector<int> order = score_order(dets);
    std::vector<double> precision, recall;
    int64_t tp = 0, fp = 0;
    for (int di : order) {
        if (m.det_match[static_cast<size_t>(di)] >= 0)
            ++tp;
        else
            ++fp;
        precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
        recall.push_back(static_cast<double>(tp) / static_cast<double>(gt_count));
    }
    // 101-point interpolation: each recall point takes the best precision
    // at any recall at or above it
    std::vector<double> max_prec(precision.size());
    double best = 0.0;
    for (size_t i = precision.size(); i-- > 0;) {
        best = std::max(best, precision[i]);
        max_prec[i] = best;
    }
    double ap = 0.0;
    size_t idx = 0;
    for (int p = 0; p <= 100; ++p) {
        const double r = p / 100.0;
        while (idx < recall.size() && recall[idx] < r) ++idx;
        if (idx == recall.size()) break;
        ap += max_prec[idx];
    }
    return ap / 101.0;
}

std::vector<Detection> filter_class(const std::vector<Detection>& dets, int class_id) {
    std::vector<Detection> out;
    for (const Detection& d : dets)
        if (d.label == class_id) out.push_back(d);
    return out;
}

std::vector<GtBox> filter_class(const std::vector<GtBox>& gts, int class_id) {
    std::vector<GtBox> out;
    for (const GtBox& g : gts)
        if (g.label == class_id) out.push_back(g);
    return out;
}

int max_label(const std::vector<Detection>& dets, const std::vector<GtBox>& gts) {
    int m = -1;
    for (const Detection& d : dets) m = std::max(m, d.label);
    for (const GtBox& g : gts) m = std::max(m, g.label);
    return m;
}

// cap at the top-scoring `cap` detections per image
std::vector<Detection> cap_per_image(const std::vector<Detection>& dets, int cap) {
    std::map<int, int> seen;
    std::vector<Detection> out;
    for (int di : score_order(dets)) {
        const Detection& d = dets[static_cast<size_t>(di)];
        if (seen[d.image_id] < cap) {
            ++seen[d.image_id];
            out.push_back(d);
        }
    }
    return out;
}

double mean_ap_over_classes(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                            int num_classes, double thresh) {
    double acc = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        const double ap = average_precision(dets, gts, c, thresh);
        if (!std::isnan(ap)) {
            acc += ap;
            ++present;
        }
    }
    return present > 0 ? acc / present : 0.0;
}

}  // namespace

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh) {
    std::vector<Detection> kept;
    const std::vector<int> order = score_order(dets);
    std::vector<bool> suppressed(dets.size(), false);
    for (size_t oi = 0; oi < order.size(); ++oi) {
        const int di = order[oi];
        if (suppressed[static_cast<size_t>(di)]) continue;
        const Detection& d = dets[static_cast<size_t>(di)];
        kept.push_back(d);
        for (size_t oj = oi + 1; oj < order.size(); ++oj) {
            const int dj = order[oj];
            if (suppressed[static_cast<size_t>(dj)]) continue;
            const Detection& e = dets[static_cast<size_t>(dj)];
            if (e.image_id == d.image_id && e.label == d.label && iou(d.box, e.box) > iou_thresh)
                suppressed[static_cast<size_t>(dj)] = true;
        }
    }
    return kept;
}

double average_precision(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                         int class_id, double iou_thresh) {
    const std::vector<Detection> cd = filter_class(dets, class_id);
    const std::vector<GtBox> cg = filter_class(gts, class_id);
    if (cg.empty()) return std::numeric_limits<double>::quiet_NaN();
    if (cd.empty()) return 0.0;
    const MatchResult m = match_greedy(cd, cg, iou_thresh);
    return ap_from_matches(cd, m, static_cast<int64_t>(cg.size()));
}

CocoMetrics coco_metrics(const std::vector<Detection>& dets_in, const std::vector<GtBox>& gts,
                         const SizeBuckets& buckets, int num_classes) {
    CocoMetrics out;
    if (num_classes < 0) num_classes = max_label(dets_in, gts) + 1;
    const std::vector<Detection> dets = cap_per_image(dets_in, 100);

    for (int t = 0; t < 10; ++t) {
        const double thresh = 0.5 + 0.05 * t;
        out.ap_per_iou[static_cast<size_t>(t)] =
            mean_ap_over_classes(dets, gts, num_classes, thresh);
        out.mAP += out.ap_per_iou[static_cast<size_t>(t)] / 10.0;
    }
    out.ap50 = out.ap_per_iou[0];
    out.ap75 = out.ap_per_iou[5];

    // recall at 100 detections, averaged over thresholds and classes with gt
    double ar_acc = 0.0;
    int ar_terms = 0;
    for (int t = 0; t < 10; ++t) {
        const double thresh = 0.5 + 0.05 * t;
        for (int c = 0; c < num_classes; ++c) {
            const std::vector<GtBox> cg = filter_class(gts, c);
            if (cg.empty()) continue;
            const std::vector<Detection> cd = filter_class(dets, c);
            const MatchResult m = match_greedy(cd, cg, thresh);
            int64_t matched = 0;
            for (bool flag : m.gt_matched) matched += flag ? 1 : 0;
            ar_acc += static_cast<double>(matched) / static_cast<double>(cg.size());
            ++ar_terms;
        }
    }
    out.mAR = ar_terms > 0 ? ar_acc / ar_terms : 0.0;

    // size buckets filter both sides by their own box area
    auto bucket_map = [&](double area) {
        if (area < buckets.small_max_area) return 0;
        if (area > buckets.large_min_area) return 2;
        return 1;
    };
    for (int b = 0; b < 3; ++b) {
        std::vector<Detection> bd;
        std::vector<GtBox> bg;
        for (const Detection& d : dets)
            if (bucket_map(d.box.area()) == b) bd.push_back(d);
        for (const GtBox& g : gts)
            if (bucket_map(g.box.area()) == b) bg.push_back(g);
        double acc = 0.0;
        for (int t = 0; t < 10; ++t) acc += mean_ap_over_classes(bd, bg, num_classes, 0.5 + 0.05 * t);
        acc /= 10.0;
        if (b == 0)
            out.ap_small = acc;
        else if (b == 1)
            out.ap_medium = acc;
        else
            out.ap_large = acc;
    }
    return out;
}

ErrorReport error_decomposition(const std::vector<Detection>& dets, const std::vector<GtBox>& gts,
                                double fg_iou_thresh) {
    ErrorReport r;
    r.fg_iou_thresh = fg_iou_thresh;
    r.detections = static_cast<int64_t>(dets.size());
    const int num_classes = max_label(dets, gts) + 1;

    // class-aware greedy matching at the foreground threshold
    MatchResult m = match_greedy(dets, gts, fg_iou_thresh);

    std::vector<int> type_of(dets.size(), -1);  // 0..4 per FP bucket
    for (size_t di = 0; di < dets.size(); ++di) {
        if (m.det_match[di] >= 0) {
            ++r.true_positives;
            continue;
        }
        const Detection& d = dets[di];
        double max_same = 0.0, max_diff = 0.0;
        for (const GtBox& g : gts) {
            if (g.image_id != d.image_id) continue;
            const double v = iou(d.box, g.box);
            if (g.label == d.label)
                max_same = std::max(max_same, v);
            else
                max_diff = std::max(max_diff, v);
        }
        int type;
        if (max_same >= fg_iou_thresh)
            type = 3;  // duplicate: the overlapping gt is necessarily matched
        else if (max_diff >= fg_iou_thresh)
            type = 0;  // classification
        else if (max_same >= 0.1)
            type = 1;  // localization
        else if (max_diff >= 0.1)
            type = 2;  // both
        else
            type = 4;  // background
        type_of[di] = type;
        switch (type) {
            case 0: ++r.classification; break;
            case 1: ++r.localization; break;
            case 2: ++r.both; break;
            case 3: ++r.duplicate; break;
            default: ++r.background; break;
        }
    }
    for (bool flag : m.gt_matched)
        if (!flag) ++r.missed_gt;

    // impact: mAP at this threshold after deleting the bucket's detections
    const double base = mean_ap_over_classes(dets, gts, num_classes, fg_iou_thresh);
    auto without_type = [&](int type) {
        std::vector<Detection> kept;
        for (size_t di = 0; di < dets.size(); ++di)
            if (type_of[di] != type) kept.push_back(dets[di]);
        return mean_ap_over_classes(kept, gts, num_classes, fg_iou_thresh) - base;
    };
    r.impact_classification = without_type(0);
    r.impact_localization = without_type(1);
    r.impact_both = without_type(2);
    r.impact_duplicate = without_type(3);
    r.impact_background = without_type(4);
    {
        std::vector<GtBox> kept;
        for (size_t gi = 0; gi < gts.size(); ++gi)
            if (m.gt_matched[gi]) kept.push_back(gts[gi]);
        if (!kept.empty())
            r.impact_missed_gt = mean_ap_over_classes(dets, kept, num_classes, fg_iou_thresh) - base;
    }
    return r;
}

std::vector<ErrorReport> error_sweep(const std::vector<Detection>& dets,
                                     const std::vector<GtBox>& gts) {
    std::vector<ErrorReport> reports;
    for (int i = 0; i <= 8; ++i) reports.push_back(error_decomposition(dets, gts, 0.5 + 0.05 * i));
    return reports;
}

}  // namespace kd
