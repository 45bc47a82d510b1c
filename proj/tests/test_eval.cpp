#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "kd/eval.hpp"
#include "kd/rng.hpp"

using namespace kd;

namespace {

// Brute-force reference AP: naive loops, no shared code with the evaluator.
double ap_oracle(std::vector<Detection> dets, std::vector<GtBox> gts, int cls, double thresh) {
    dets.erase(std::remove_if(dets.begin(), dets.end(),
                              [&](const Detection& d) { return d.label != cls; }),
               dets.end());
    gts.erase(std::remove_if(gts.begin(), gts.end(),
                             [&](const GtBox& g) { return g.label != cls; }),
              gts.end());
    if (gts.empty()) return std::numeric_limits<double>::quiet_NaN();

    // selection-sort by score desc, image asc,original order preserved via stable pick
    std::vector<bool> used(dets.size(), false);
    std::vector<int> order;
    for (size_t n = 0; n < dets.size(); ++n) {
        int pick = -1;
        for (size_t i = 0; i < dets.size(); ++i) {
            if (used[i]) continue;
            if (pick < 0) {
                pick = static_cast<int>(i);
                continue;
            }
            const Detection& a = dets[i];
            const Detection& b = dets[static_cast<size_t>(pick)];
            if (a.score > b.score || (a.score == b.score && a.image_id < b.image_id)) {
                pick = static_cast<int>(i);
            }
        }
        used[static_cast<size_t>(pick)] = true;
        order.push_back(pick);
    }

    std::vector<bool> taken(gts.size(), false);
    std::vector<bool> is_tp;
    for (int di : order) {
        int best = -1;
        double best_v = -1.0;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (taken[gi] || gts[gi].image_id != dets[static_cast<size_t>(di)].image_id) continue;
            const double v = iou(dets[static_cast<size_t>(di)].box, gts[gi].box);
            if (v > best_v) {
                best_v = v;
                best = static_cast<int>(gi);
            }
        }
        if (best >= 0 && best_v >= thresh) {
            taken[static_cast<size_t>(best)] = true;
            is_tp.push_back(true);
        } else {
            is_tp.push_back(false);
        }
    }

    double ap = 0.0;
    for (int p = 0; p <= 100; ++p) {
        const double want_recall = p / 100.0;
        double best_precision = 0.0;
        int tp = 0, seen = 0;
        for (bool flag : is_tp) {
            ++seen;
            if (flag) ++tp;
            const double recall = double(tp) / double(gts.size());
            const double precision = double(tp) / double(seen);
            if (recall >= want_recall) best_precision = std::max(best_precision, precision);
        }
        ap += best_precision;
    }
    return ap / 101.0;
}

std::vector<Detection> perfect_detections(const std::vector<GtBox>& gts) {
    std::vector<Detection> dets;
    for (const GtBox& g : gts) dets.push_back({g.image_id, g.box, g.label, 1.0});
    return dets;
}

}  // namespace

TEST_CASE("iou basics") {
    Box a{0, 0, 2, 2};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, {5, 5, 7, 7}) == 0.0);
    CHECK(iou(a, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7).epsilon(1e-12));
    CHECK(iou(a, {1, 1, 3, 3}) == iou({1, 1, 3, 3}, a));
}

TEST_CASE("nms") {
    SUBCASE("single detection unchanged") {
        std::vector<Detection> d = {{0, {0, 0, 10, 10}, 1, 0.7}};
        auto kept = nms(d, 0.5);
        REQUIRE(kept.size() == 1);
        CHECK(kept[0].score == 0.7);
    }

    SUBCASE("two identical boxes keep the higher score") {
        std::vector<Detection> d = {{0, {0, 0, 10, 10}, 1, 0.6}, {0, {0, 0, 10, 10}, 1, 0.9}};
        auto kept = nms(d, 0.5);
        REQUIRE(kept.size() == 1);
        CHECK(kept[0].score == 0.9);
    }

    SUBCASE("different classes and images never suppress each other") {
        std::vector<Detection> d = {{0, {0, 0, 10, 10}, 1, 0.6},
                                    {0, {0, 0, 10, 10}, 2, 0.5},
                                    {1, {0, 0, 10, 10}, 1, 0.4}};
        CHECK(nms(d, 0.5).size() == 3);
    }

    SUBCASE("five-box case against an exhaustive greedy oracle") {
        std::vector<Detection> d = {{0, {0, 0, 10, 10}, 0, 0.9},
                                    {0, {1, 1, 11, 11}, 0, 0.8},   // iou vs first ~0.68
                                    {0, {20, 20, 30, 30}, 0, 0.7},
                                    {0, {21, 20, 31, 30}, 0, 0.95},  // beats the third
                                    {0, {0, 0, 10, 10}, 1, 0.1}};    // other class
        auto kept = nms(d, 0.5);
        REQUIRE(kept.size() == 3);
        CHECK(kept[0].score == 0.95);
        CHECK(kept[1].score == 0.9);
        CHECK(kept[2].score == 0.1);
    }
}

TEST_CASE("average_precision") {
    std::vector<GtBox> gts = {{0, {10, 10, 20, 20}, 0}, {0, {40, 40, 52, 52}, 0},
                              {1, {5, 5, 15, 15}, 0}};

    SUBCASE("perfect detections reach AP 1 at every threshold") {
        auto dets = perfect_detections(gts);
        for (int t = 0; t < 10; ++t)
            CHECK(average_precision(dets, gts, 0, 0.5 + 0.05 * t) == doctest::Approx(1.0));
    }

    SUBCASE("no detections means AP 0") {
        CHECK(average_precision({}, gts, 0, 0.5) == 0.0);
    }

    SUBCASE("no ground truth of the class means AP undefined") {
        CHECK(std::isnan(average_precision(perfect_detections(gts), gts, 3, 0.5)));
    }

    SUBCASE("three detections, two gts, hand case") {
        std::vector<GtBox> g2 = {{0, {0, 0, 10, 10}, 0}, {0, {20, 0, 30, 10}, 0}};
        std::vector<Detection> dets = {
            {0, {0, 0, 10, 10}, 0, 0.9},    // TP
            {0, {0, 0, 10, 10}, 0, 0.8},    // duplicate -> FP
            {0, {20, 1, 30, 11}, 0, 0.7},   // iou 9/11 -> TP
        };
        // ranks: TP, FP, TP -> precision 1, 1/2, 2/3 at recall .5, .5, 1
        // 101-pt: recall<=0.5 -> precision 1 (51 pts), recall in (0.5,1] -> 2/3 (50 pts)
        const double expect = (51 * 1.0 + 50 * (2.0 / 3.0)) / 101.0;
        CHECK(average_precision(dets, g2, 0, 0.5) == doctest::Approx(expect).epsilon(1e-12));
        CHECK(average_precision(dets, g2, 0, 0.5) ==
              doctest::Approx(ap_oracle(dets, g2, 0, 0.5)).epsilon(1e-12));
    }

    SUBCASE("matches the brute-force matcher on randomized instances") {
        Rng rng(61);
        for (int trial = 0; trial < 60; ++trial) {
            std::vector<GtBox> g;
            std::vector<Detection> d;
            const int n_gt = rng.uniform_int(1, 4);
            for (int i = 0; i < n_gt; ++i) {
                const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
                g.push_back({rng.uniform_int(0, 1), {x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)},
                             rng.uniform_int(0, 1)});
            }
            const int n_det = rng.uniform_int(1, 10);
            for (int i = 0; i < n_det; ++i) {
                if (rng.uniform() < 0.6 && !g.empty()) {
                    const GtBox& base = g[static_cast<size_t>(rng.uniform_int(0, n_gt - 1))];
                    Box b = base.box;
                    b.x1 += rng.uniform(-3, 3);
                    b.y1 += rng.uniform(-3, 3);
                    b.x2 += rng.uniform(-3, 3);
                    b.y2 += rng.uniform(-3, 3);
                    if (!b.valid()) continue;
                    d.push_back({base.image_id, b, rng.uniform_int(0, 1), rng.uniform(0.1, 1.0)});
                } else {
                    const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
                    d.push_back({rng.uniform_int(0, 1),
                                 {x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)},
                                 rng.uniform_int(0, 1), rng.uniform(0.1, 1.0)});
                }
            }
            for (double t : {0.5, 0.75}) {
                const double got = average_precision(d, g, 0, t);
                const double expect = ap_oracle(d, g, 0, t);
                if (std::isnan(expect))
                    CHECK(std::isnan(got));
                else
                    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
            }
        }
    }

    SUBCASE("AP is monotone non-increasing in the IoU threshold") {
        Rng rng(62);
        for (int trial = 0; trial < 10; ++trial) {
            std::vector<GtBox> g;
            std::vector<Detection> d;
            for (int i = 0; i < 3; ++i) {
                const double x = rng.uniform(0, 30), y = rng.uniform(0, 30);
                g.push_back({0, {x, y, x + rng.uniform(8, 20), y + rng.uniform(8, 20)}, 0});
                Box b = g.back().box;
                b.x1 += rng.uniform(-2, 2);
                b.y2 += rng.uniform(-2, 2);
                if (b.valid()) d.push_back({0, b, 0, rng.uniform(0.2, 1.0)});
            }
            double prev = 2.0;
            for (int t = 0; t < 10; ++t) {
                const double ap = average_precision(d, g, 0, 0.5 + 0.05 * t);
                CHECK(ap <= prev + 1e-12);
                prev = ap;
            }
        }
    }

    SUBCASE("positive scaling of scores leaves AP unchanged") {
        Rng rng(63);
        std::vector<GtBox> g = {{0, {5, 5, 20, 20}, 0}, {0, {30, 30, 45, 45}, 0}};
        std::vector<Detection> d;
        for (int i = 0; i < 6; ++i) {
            const double x = rng.uniform(0, 30), y = rng.uniform(0, 30);
            d.push_back({0, {x, y, x + 15, y + 15}, 0, rng.uniform(0.1, 0.9)});
        }
        const double base = average_precision(d, g, 0, 0.5);
        for (double scale : {0.1, 3.7}) {
            std::vector<Detection> scaled = d;
            for (Detection& dd : scaled) dd.score *= scale;
            CHECK(average_precision(scaled, g, 0, 0.5) == base);
        }
    }
}

TEST_CASE("coco_metrics") {
    std::vector<GtBox> gts = {{0, {10, 10, 20, 20}, 0},
                              {0, {40, 40, 52, 56}, 1},
                              {1, {5, 5, 30, 30}, 2},
                              {1, {33, 8, 40, 16}, 0}};

    SUBCASE("perfect detections give mAP 1") {
        CocoMetrics m = coco_metrics(perfect_detections(gts), gts);
        for (double ap : m.ap_per_iou) CHECK(ap == doctest::Approx(1.0));
        CHECK(m.mAP == doctest::Approx(1.0));
        CHECK(m.ap50 == doctest::Approx(1.0));
        CHECK(m.ap75 == doctest::Approx(1.0));
        CHECK(m.mAR == doctest::Approx(1.0));
    }

    SUBCASE("mAP equals the mean of the per-threshold APs") {
        Rng rng(64);
        std::vector<Detection> d;
        for (int i = 0; i < 12; ++i) {
            const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
            d.push_back({rng.uniform_int(0, 1), {x, y, x + rng.uniform(6, 20), y + rng.uniform(6, 20)},
                         rng.uniform_int(0, 2), rng.uniform(0.05, 1.0)});
        }
        CocoMetrics m = coco_metrics(d, gts);
        double mean = 0.0;
        for (double ap : m.ap_per_iou) mean += ap / 10.0;
        CHECK(m.mAP == doctest::Approx(mean).epsilon(1e-12));
        CHECK(m.ap50 == m.ap_per_iou[0]);
        CHECK(m.ap75 == m.ap_per_iou[5]);
    }
}

TEST_CASE("error_decomposition") {
    SUBCASE("perfect detections produce no errors") {
        std::vector<GtBox> gts = {{0, {10, 10, 20, 20}, 0}, {1, {5, 5, 15, 15}, 1}};
        ErrorReport r = error_decomposition(perfect_detections(gts), gts, 0.5);
        CHECK(r.true_positives == 2);
        CHECK(r.classification + r.localization + r.both + r.duplicate + r.background == 0);
        CHECK(r.missed_gt == 0);
    }

    SUBCASE("right box, wrong label is one classification error") {
        std::vector<GtBox> gts = {{0, {10, 10, 20, 20}, 0}};
        std::vector<Detection> d = {{0, {10, 10, 20, 20}, 1, 0.9}};
        ErrorReport r = error_decomposition(d, gts, 0.5);
        CHECK(r.classification == 1);
        CHECK(r.true_positives == 0);
        CHECK(r.missed_gt == 1);
    }

    SUBCASE("constructed six-detection fixture hits every bucket once") {
        std::vector<GtBox> gts = {{0, {10, 10, 20, 20}, 0}, {0, {40, 40, 50, 50}, 1}};
        std::vector<Detection> d = {
            {0, {10, 10, 20, 20}, 0, 0.95},  // true positive on g0
            {0, {11, 10, 21, 20}, 0, 0.90},  // duplicate of g0
            {0, {10, 10, 20, 19}, 1, 0.85},  // classification: wrong class on g0
            {0, {44, 44, 56, 56}, 1, 0.80},  // localization: iou(g1) ~ 0.17
            {0, {43, 43, 53, 53}, 0, 0.75},  // both: wrong class, iou(g1) ~ 0.32
            {0, {28, 28, 34, 34}, 0, 0.70},  // background
        };
        ErrorReport r = error_decomposition(d, gts, 0.5);
        CHECK(r.true_positives == 1);
        CHECK(r.duplicate == 1);
        CHECK(r.classification == 1);
        CHECK(r.localization == 1);
        CHECK(r.both == 1);
        CHECK(r.background == 1);
        CHECK(r.missed_gt == 1);  // g1 never matched
        // removing any error bucket cannot lower the mAP
        CHECK(r.impact_classification >= 0.0);
        CHECK(r.impact_duplicate >= 0.0);
        CHECK(r.impact_background >= 0.0);
    }

    SUBCASE("partition identity holds on random instances") {
        Rng rng(65);
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<GtBox> g;
            std::vector<Detection> d;
            for (int i = 0; i < rng.uniform_int(1, 5); ++i) {
                const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
                g.push_back({rng.uniform_int(0, 1),
                             {x, y, x + rng.uniform(6, 18), y + rng.uniform(6, 18)},
                             rng.uniform_int(0, 2)});
            }
            for (int i = 0; i < rng.uniform_int(0, 12); ++i) {
                const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
                d.push_back({rng.uniform_int(0, 1),
                             {x, y, x + rng.uniform(6, 18), y + rng.uniform(6, 18)},
                             rng.uniform_int(0, 2), rng.uniform(0.05, 1.0)});
            }
            for (double t : {0.5, 0.7, 0.9}) {
                ErrorReport r = error_decomposition(d, g, t);
                CHECK(r.true_positives + r.classification + r.localization + r.both +
                          r.duplicate + r.background ==
                      r.detections);
            }
        }
    }

    SUBCASE("sweep covers 0.5 to 0.9") {
        auto reports = error_sweep({}, {{0, {1, 1, 5, 5}, 0}});
        REQUIRE(reports.size() == 9);
        CHECK(reports.front().fg_iou_thresh == doctest::Approx(0.5));
        CHECK(reports.back().fg_iou_thresh == doctest::Approx(0.9));
    }
}
