#include "kd/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "kd/io.hpp"
#include "kd/tensor.hpp"

namespace kd {

void SceneSpec::validate() const {
    if (num_classes < 2) throw ConfigError("scene spec: need at least 2 classes");
    if (num_classes > 12) throw ConfigError("scene spec: palette supports at most 12 classes");
    if (image_size < 16) throw ConfigError("scene spec: image size too small");
    if (min_objects < 1 || max_objects < min_objects)
        throw ConfigError("scene spec: bad object count range");
    if (min_size < 4.0 || max_size < min_size || max_size > image_size - 4)
        throw ConfigError("scene spec: bad size range");
}

namespace {

constexpr double kPalette[4][3] = {
    {0.85, 0.15, 0.15},  // red
    {0.15, 0.30, 0.85},  // blue
    {0.15, 0.75, 0.20},  // green
    {0.90, 0.80, 0.10},  // yellow
};

enum ShapeKind { kCircle = 0, kSquare = 1, kTriangle = 2 };

bool inside_shape(ShapeKind shape, double px, double py, double cx, double cy, double size) {
    const double dx = px - cx, dy = py - cy, half = size / 2.0;
    switch (shape) {
        case kCircle:
            return dx * dx + dy * dy <= half * half;
        case kSquare:
            return std::fabs(dx) <= half && std::fabs(dy) <= half;
        case kTriangle: {
            if (dy < -half || dy > half) return false;
            const double width_here = (dy + half) / size * half;
            return std::fabs(dx) <= width_here;
        }
    }
    return false;
}

}  // namespace

Scene generate_scene(uint64_t seed, const SceneSpec& spec) {
    spec.validate();
    Rng rng(seed);
    const int s = spec.image_size;

    Scene scene;
    scene.pixels.assign(static_cast<size_t>(3) * s * s, 0.0f);

    // background: per-channel base, slow gradient, per-pixel noise
    double base[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
        base[c] = rng.uniform(0.40, 0.60);
        gx[c] = rng.uniform(-0.10, 0.10) / s;
        gy[c] = rng.uniform(-0.10, 0.10) / s;
    }
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double v = base[c] + gx[c] * x + gy[c] * y +
                                 rng.uniform(-spec.noise_amplitude, spec.noise_amplitude);
                scene.pixels[static_cast<size_t>((c * s + y) * s + x)] =
                    static_cast<float>(std::clamp(v, 0.0, 1.0));
            }

    const int target = rng.uniform_int(spec.min_objects, spec.max_objects);
    std::vector<uint8_t> mask(static_cast<size_t>(s) * s);
    for (int obj = 0; obj < target; ++obj) {
        for (int attempt = 0; attempt < 100; ++attempt) {
            const int label = rng.uniform_int(0, spec.num_classes - 1);
            const ShapeKind shape = static_cast<ShapeKind>(label % 3);
            const double* color = kPalette[label / 3];
            const double size = rng.uniform(spec.min_size, spec.max_size);
            const double cx = rng.uniform(size / 2 + 1.0, s - size / 2 - 1.0);
            const double cy = rng.uniform(size / 2 + 1.0, s - size / 2 - 1.0);

            std::fill(mask.begin(), mask.end(), 0);
            int min_x = s, min_y = s, max_x = -1, max_y = -1;
            for (int y = 0; y < s; ++y)
                for (int x = 0; x < s; ++x)
                    if (inside_shape(shape, x + 0.5, y + 0.5, cx, cy, size)) {
                        mask[static_cast<size_t>(y * s + x)] = 1;
                        min_x = std::min(min_x, x);
                        min_y = std::min(min_y, y);
                        max_x = std::max(max_x, x);
                        max_y = std::max(max_y, y);
                    }
            if (max_x < 0) continue;
            const Box box{double(min_x), double(min_y), double(max_x + 1), double(max_y + 1)};
            if (box.area() < spec.min_area) continue;
            bool overlaps = false;
            for (const Box& other : scene.ann.boxes)
                if (iou(box, other) > spec.max_overlap) {
                    overlaps = true;
                    break;
                }
            if (overlaps) continue;

            for (int y = min_y; y <= max_y; ++y)
                for (int x = min_x; x <= max_x; ++x) {
                    if (!mask[static_cast<size_t>(y * s + x)]) continue;
                    const double shade = rng.uniform(-0.03, 0.03);
                    for (int c = 0; c < 3; ++c)
                        scene.pixels[static_cast<size_t>((c * s + y) * s + x)] =
                            static_cast<float>(std::clamp(color[c] + shade, 0.0, 1.0));
                }
            scene.ann.boxes.push_back(box);
            scene.ann.labels.push_back(label);
            break;  // placed; failure after 100 retries drops the object
        }
    }
    return scene;
}

int64_t DetDataset::annotation_count() const {
    int64_t n = 0;
    for (const DetRecord& r : records) n += static_cast<int64_t>(r.ann.boxes.size());
    return n;
}

DetDataset build_detection_split(uint64_t seed, int count, bool validation,
                                 const SceneSpec& spec) {
    if (count < 1) throw ConfigError("detection split: need at least one record");
    DetDataset ds;
    ds.num_classes = spec.num_classes;
    ds.image_size = spec.image_size;
    ds.records.reserve(static_cast<size_t>(count));
    const uint64_t stream_base = validation ? 0x8000000000000000ULL : 0;
    for (int i = 0; i < count; ++i) {
        Scene scene = generate_scene(Rng::derive(seed, stream_base + static_cast<uint64_t>(i))
                                         .next_u64(),
                                     spec);
        ds.records.push_back({std::move(scene.pixels), std::move(scene.ann)});
    }
    return ds;
}

namespace {

// bilinear resize of one box region, grid points at cell centers
std::vector<float> resize_crop(const std::vector<float>& img, int s, const Box& b, int target) {
    std::vector<float> out(static_cast<size_t>(3) * target * target);
    for (int c = 0; c < 3; ++c) {
        const float* plane = img.data() + static_cast<size_t>(c) * s * s;
        auto pixel = [&](int y, int x) -> double {
            if (x < 0 || x >= s || y < 0 || y >= s) return 0.0;
            return plane[y * s + x];
        };
        for (int i = 0; i < target; ++i) {
            const double py = b.y1 + b.height() * (2.0 * i + 1.0) / (2.0 * target) - 0.5;
            for (int j = 0; j < target; ++j) {
                const double px = b.x1 + b.width() * (2.0 * j + 1.0) / (2.0 * target) - 0.5;
                const int x0 = static_cast<int>(std::floor(px));
                const int y0 = static_cast<int>(std::floor(py));
                const double fx = px - x0, fy = py - y0;
                const double v = (1 - fy) * ((1 - fx) * pixel(y0, x0) + fx * pixel(y0, x0 + 1)) +
                                 fy * ((1 - fx) * pixel(y0 + 1, x0) + fx * pixel(y0 + 1, x0 + 1));
                out[static_cast<size_t>((c * target + i) * target + j)] = static_cast<float>(v);
            }
        }
    }
    return out;
}

}  // namespace

CropDataset derive_classification_crops(const DetDataset& det, int target_size) {
    if (target_size < 2) throw ConfigError("crop derivation: target size too small");
    CropDataset crops;
    crops.num_classes = det.num_classes;
    crops.crop_size = target_size;
    for (size_t r = 0; r < det.records.size(); ++r) {
        const DetRecord& rec = det.records[r];
        if (rec.ann.boxes.size() != rec.ann.labels.size())
            throw IoError("crop derivation: corrupt record " + std::to_string(r));
        for (size_t a = 0; a < rec.ann.boxes.size(); ++a) {
            const Box& b = rec.ann.boxes[a];
            if (!b.valid() || rec.ann.labels[a] < 0 || rec.ann.labels[a] >= det.num_classes)
                throw IoError("crop derivation: corrupt annotation in record " + std::to_string(r));
            crops.records.push_back(
                {resize_crop(rec.image, det.image_size, b, target_size), rec.ann.labels[a]});
        }
    }
    return crops;
}

// ---- file formats ---------------------------------------------------------

namespace {
constexpr uint32_t kVersion = 1;
}

void save_detection_dataset(const DetDataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    io::write_magic(f, "KDDS");
    io::write_u32(f, kVersion);
    io::write_u32(f, static_cast<uint32_t>(ds.num_classes));
    io::write_u32(f, static_cast<uint32_t>(ds.image_size));
    io::write_u32(f, static_cast<uint32_t>(ds.records.size()));
    for (const DetRecord& r : ds.records) {
        io::write_f32_array(f, r.image);
        io::write_u32(f, static_cast<uint32_t>(r.ann.boxes.size()));
        for (size_t a = 0; a < r.ann.boxes.size(); ++a) {
            const Box& b = r.ann.boxes[a];
            io::write_f32(f, static_cast<float>(b.x1));
            io::write_f32(f, static_cast<float>(b.y1));
            io::write_f32(f, static_cast<float>(b.x2));
            io::write_f32(f, static_cast<float>(b.y2));
            io::write_u32(f, static_cast<uint32_t>(r.ann.labels[a]));
        }
    }
    if (!f) throw IoError("write failed for " + path);
}

DetDataset load_detection_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    io::read_magic(f, "KDDS", path);
    if (io::read_u32(f) != kVersion) throw IoError(path + ": unsupported version");
    DetDataset ds;
    ds.num_classes = static_cast<int>(io::read_u32(f));
    ds.image_size = static_cast<int>(io::read_u32(f));
    const uint32_t count = io::read_u32(f);
    const size_t pixels = static_cast<size_t>(3) * ds.image_size * ds.image_size;
    ds.records.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
        DetRecord& r = ds.records[i];
        r.image = io::read_f32_array(f, pixels);
        const uint32_t anns = io::read_u32(f);
        for (uint32_t a = 0; a < anns; ++a) {
            Box b;
            b.x1 = io::read_f32(f);
            b.y1 = io::read_f32(f);
            b.x2 = io::read_f32(f);
            b.y2 = io::read_f32(f);
            r.ann.boxes.push_back(b);
            r.ann.labels.push_back(static_cast<int>(io::read_u32(f)));
        }
    }
    if (!f) throw IoError(path + ": truncated file");
    return ds;
}

void save_crop_dataset(const CropDataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    io::write_magic(f, "KDCL");
    io::write_u32(f, kVersion);
    io::write_u32(f, static_cast<uint32_t>(ds.num_classes));
    io::write_u32(f, static_cast<uint32_t>(ds.crop_size));
    io::write_u32(f, static_cast<uint32_t>(ds.records.size()));
    for (const CropRecord& r : ds.records) {
        io::write_f32_array(f, r.image);
        io::write_u32(f, static_cast<uint32_t>(r.label));
    }
    if (!f) throw IoError("write failed for " + path);
}

CropDataset load_crop_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    io::read_magic(f, "KDCL", path);
    if (io::read_u32(f) != kVersion) throw IoError(path + ": unsupported version");
    CropDataset ds;
    ds.num_classes = static_cast<int>(io::read_u32(f));
    ds.crop_size = static_cast<int>(io::read_u32(f));
    const uint32_t count = io::read_u32(f);
    const size_t pixels = static_cast<size_t>(3) * ds.crop_size * ds.crop_size;
    ds.records.resize(count);
    for (uint32_t i = 0; i < count; ++i) {
        ds.records[i].image = io::read_f32_array(f, pixels);
        ds.records[i].label = static_cast<int>(io::read_u32(f));
    }
    if (!f) throw IoError(path + ": truncated file");
    return ds;
}

uint64_t dataset_meta_hash(int num_classes, int image_size, int record_count) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    mix(static_cast<uint64_t>(num_classes));
    mix(static_cast<uint64_t>(image_size));
    mix(static_cast<uint64_t>(record_count));
    return h;
}

}  // namespace kd
