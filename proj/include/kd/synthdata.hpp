#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kd/box.hpp"
#include "kd/rng.hpp"
#include "kd/tensor.hpp"

namespace kd {

struct SceneSpec {
    int image_size = 64;
    int num_classes = 6;  // (shape, color) pairs: shape = c % 3, color = c / 3
    int min_objects = 1;
    int max_objects = 3;
    double min_size = 10.0;
    double max_size = 28.0;
    double max_overlap = 0.3;      // pairwise IoU cap between placed boxes
    double noise_amplitude = 0.06;  // background texture
    double min_area = 16.0;

    void validate() const;
};

struct Annotation {
    std::vector<Box> boxes;
    std::vector<int> labels;
};

// Image stored as float32 CHW in [0,1]; all heavier math runs in f64.
struct Scene {
    std::vector<float> pixels;
    Annotation ann;
};

// Geometric shapes (circle / square / triangle in distinct colors) on a
// noisy, gently graded background. Deterministic function of the seed.
Scene generate_scene(uint64_t seed, const SceneSpec& spec);

struct DetRecord {
    std::vector<float> image;
    Annotation ann;
};

struct DetDataset {
    int num_classes = 0;
    int image_size = 0;
    std::vector<DetRecord> records;

    int64_t annotation_count() const;
};

struct CropRecord {
    std::vector<float> image;
    int label = 0;
};

struct CropDataset {
    int num_classes = 0;
    int crop_size = 0;
    std::vector<CropRecord> records;
};

// Train and validation streams draw from disjoint seed ranges.
DetDataset build_detection_split(uint64_t seed, int count, bool validation, const SceneSpec& spec);

// One crop per annotated object, bilinearly resized to target_size.
CropDataset derive_classification_crops(const DetDataset& det, int target_size);

// "KDDS" / "KDCL" little-endian file formats
void save_detection_dataset(const DetDataset& ds, const std::string& path);
DetDataset load_detection_dataset(const std::string& path);
void save_crop_dataset(const CropDataset& ds, const std::string& path);
CropDataset load_crop_dataset(const std::string& path);

// FNV-1a dataset identity; checkpoints store it with record_count 0 so any
// split of the same family matches
uint64_t dataset_meta_hash(int num_classes, int image_size, int record_count);

}  // namespace kd
