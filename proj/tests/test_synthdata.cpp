#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "kd/synthdata.hpp"

using namespace kd;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/kd_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("generate_scene determinism and bounds") {
    SceneSpec spec;
    Scene a = generate_scene(1234, spec);
    Scene b = generate_scene(1234, spec);
    REQUIRE(a.pixels.size() == b.pixels.size());
    for (size_t i = 0; i < a.pixels.size(); ++i) CHECK(a.pixels[i] == b.pixels[i]);
    CHECK(a.ann.boxes.size() == b.ann.boxes.size());

    for (float v : a.pixels) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("object count stays within the spec range over many seeds") {
    SceneSpec spec;
    int64_t total = 0;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        Scene s = generate_scene(Rng::derive(99, seed).next_u64(), spec);
        const int n = static_cast<int>(s.ann.boxes.size());
        CHECK(n >= 1);
        CHECK(n <= spec.max_objects);
        total += n;
    }
    CHECK(total > 1000);
}

TEST_CASE("rendered boxes tightly bound their shapes") {
    // single-object scenes so occlusion cannot blur ownership; shape pixels
    // are detected by their distance from the background palette
    SceneSpec spec;
    spec.min_objects = 1;
    spec.max_objects = 1;
    for (uint64_t seed = 0; seed < 40; ++seed) {
        Scene s = generate_scene(Rng::derive(123, seed).next_u64(), spec);
        REQUIRE(s.ann.boxes.size() == 1);
        const Box& box = s.ann.boxes[0];
        const int sz = spec.image_size;
        const double* color = nullptr;
        // reconstruct the palette color from the label
        static constexpr double palette[4][3] = {{0.85, 0.15, 0.15},
                                                 {0.15, 0.30, 0.85},
                                                 {0.15, 0.75, 0.20},
                                                 {0.90, 0.80, 0.10}};
        color = palette[s.ann.labels[0] / 3];
        int min_x = sz, min_y = sz, max_x = -1, max_y = -1;
        for (int y = 0; y < sz; ++y)
            for (int x = 0; x < sz; ++x) {
                double dist = 0.0;
                for (int c = 0; c < 3; ++c)
                    dist += std::fabs(s.pixels[static_cast<size_t>((c * sz + y) * sz + x)] -
                                      color[c]);
                if (dist < 0.15) {  // shape pixel
                    min_x = std::min(min_x, x);
                    max_x = std::max(max_x, x);
                    min_y = std::min(min_y, y);
                    max_y = std::max(max_y, y);
                    CHECK(x + 0.5 >= box.x1);
                    CHECK(x + 0.5 <= box.x2);
                    CHECK(y + 0.5 >= box.y1);
                    CHECK(y + 0.5 <= box.y2);
                }
            }
        REQUIRE(max_x >= 0);
        CHECK(std::fabs(box.x1 - min_x) <= 1.0);
        CHECK(std::fabs(box.x2 - (max_x + 1)) <= 1.0);
        CHECK(std::fabs(box.y1 - min_y) <= 1.0);
        CHECK(std::fabs(box.y2 - (max_y + 1)) <= 1.0);
    }
}

TEST_CASE("detection split determinism and annotation invariants") {
    SceneSpec spec;
    DetDataset ds = build_detection_split(7, 10, false, spec);
    CHECK(ds.records.size() == 10);

    TempFile f1("det1.kdds"), f2("det2.kdds");
    save_detection_dataset(ds, f1.path);
    save_detection_dataset(build_detection_split(7, 10, false, spec), f2.path);
    CHECK(slurp(f1.path) == slurp(f2.path));
    CHECK(!slurp(f1.path).empty());

    // train and validation streams differ
    DetDataset val = build_detection_split(7, 10, true, spec);
    bool any_diff = false;
    for (size_t i = 0; i < ds.records[0].image.size(); ++i)
        if (ds.records[0].image[i] != val.records[0].image[i]) any_diff = true;
    CHECK(any_diff);

    for (const DetRecord& r : ds.records) {
        CHECK(!r.ann.boxes.empty());
        for (size_t a = 0; a < r.ann.boxes.size(); ++a) {
            const Box& b = r.ann.boxes[a];
            CHECK(b.valid());
            CHECK(b.x1 >= 0);
            CHECK(b.y1 >= 0);
            CHECK(b.x2 <= spec.image_size);
            CHECK(b.y2 <= spec.image_size);
            CHECK(b.area() >= spec.min_area);
            CHECK(r.ann.labels[a] >= 0);
            CHECK(r.ann.labels[a] < spec.num_classes);
        }
    }
}

TEST_CASE("dataset files round-trip exactly") {
    SceneSpec spec;
    DetDataset ds = build_detection_split(11, 5, false, spec);
    TempFile f("roundtrip.kdds");
    save_detection_dataset(ds, f.path);
    DetDataset back = load_detection_dataset(f.path);
    CHECK(back.num_classes == ds.num_classes);
    CHECK(back.image_size == ds.image_size);
    REQUIRE(back.records.size() == ds.records.size());
    for (size_t i = 0; i < ds.records.size(); ++i) {
        for (size_t p = 0; p < ds.records[i].image.size(); ++p)
            CHECK(back.records[i].image[p] == ds.records[i].image[p]);
        REQUIRE(back.records[i].ann.boxes.size() == ds.records[i].ann.boxes.size());
        for (size_t a = 0; a < ds.records[i].ann.boxes.size(); ++a) {
            CHECK(back.records[i].ann.boxes[a].x1 ==
                  doctest::Approx(ds.records[i].ann.boxes[a].x1).epsilon(1e-6));
            CHECK(back.records[i].ann.labels[a] == ds.records[i].ann.labels[a]);
        }
    }

    TempFile f2("again.kdds");
    save_detection_dataset(back, f2.path);
    CHECK(slurp(f.path) == slurp(f2.path));

    CHECK_THROWS_AS(load_detection_dataset("/tmp/kd_test_missing.kdds"), IoError);
}

TEST_CASE("crop derivation") {
    SUBCASE("one crop per annotation, labels preserved") {
        SceneSpec spec;
        DetDataset ds = build_detection_split(13, 30, false, spec);
        CropDataset crops = derive_classification_crops(ds, 32);
        CHECK(static_cast<int64_t>(crops.records.size()) == ds.annotation_count());
        CHECK(crops.crop_size == 32);
        size_t idx = 0;
        for (const DetRecord& r : ds.records)
            for (int label : r.ann.labels) CHECK(crops.records[idx++].label == label);
    }

    SUBCASE("crop of a square on a white canvas holds only the square color") {
        DetDataset ds;
        ds.num_classes = 2;
        ds.image_size = 32;
        DetRecord rec;
        rec.image.assign(3 * 32 * 32, 1.0f);
        for (int c = 0; c < 3; ++c)
            for (int y = 8; y < 20; ++y)
                for (int x = 10; x < 22; ++x)
                    rec.image[static_cast<size_t>((c * 32 + y) * 32 + x)] = c == 0 ? 0.8f : 0.1f;
        rec.ann.boxes = {{10, 8, 22, 20}};
        rec.ann.labels = {1};
        ds.records.push_back(rec);
        CropDataset crops = derive_classification_crops(ds, 16);
        REQUIRE(crops.records.size() == 1);
        const auto& img = crops.records[0].image;
        // outermost samples sit within half a source pixel of the box border
        // and legitimately blend with the canvas; the interior must be pure
        for (int i = 1; i < 15; ++i)
            for (int j = 1; j < 15; ++j) {
                CHECK(img[static_cast<size_t>((0 * 16 + i) * 16 + j)] ==
                      doctest::Approx(0.8).epsilon(1e-5));
                CHECK(img[static_cast<size_t>((1 * 16 + i) * 16 + j)] ==
                      doctest::Approx(0.1).epsilon(1e-5));
            }
    }

    SUBCASE("corrupt records are reported with their index") {
        DetDataset ds;
        ds.num_classes = 2;
        ds.image_size = 16;
        DetRecord rec;
        rec.image.assign(3 * 16 * 16, 0.5f);
        rec.ann.boxes = {{4, 4, 12, 12}};
        rec.ann.labels = {7};  // out of range
        ds.records.push_back(rec);
        CHECK_THROWS_WITH_AS(derive_classification_crops(ds, 8),
                             doctest::Contains("record 0"), IoError);
    }
}

TEST_CASE("crop files round-trip") {
    SceneSpec spec;
    CropDataset crops = derive_classification_crops(build_detection_split(17, 8, false, spec), 24);
    TempFile f("crops.kdcl");
    save_crop_dataset(crops, f.path);
    CropDataset back = load_crop_dataset(f.path);
    CHECK(back.num_classes == crops.num_classes);
    REQUIRE(back.records.size() == crops.records.size());
    for (size_t i = 0; i < crops.records.size(); ++i) {
        CHECK(back.records[i].label == crops.records[i].label);
        for (size_t p = 0; p < crops.records[i].image.size(); ++p)
            CHECK(back.records[i].image[p] == crops.records[i].image[p]);
    }
}

TEST_CASE("class frequencies are approximately uniform") {
    SceneSpec spec;
    std::vector<int64_t> counts(static_cast<size_t>(spec.num_classes), 0);
    int64_t total = 0;
    for (uint64_t seed = 0; seed < 600; ++seed) {
        Scene s = generate_scene(Rng::derive(31, seed).next_u64(), spec);
        for (int label : s.ann.labels) {
            ++counts[static_cast<size_t>(label)];
            ++total;
        }
    }
    REQUIRE(total >= 1000);
    const double mean = static_cast<double>(total) / spec.num_classes;
    for (int64_t c : counts) {
        CHECK(static_cast<double>(c) > 0.8 * mean);
        CHECK(static_cast<double>(c) < 1.2 * mean);
    }
}
