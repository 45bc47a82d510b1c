#pragma once

#include <optional>
#include <string>
#include <vector>

#include "kd/models.hpp"
#include "kd/tensor.hpp"

namespace kd {

// "KDCK" container: named f32 tensors. Model metadata rides along as small
// "meta.*" entries so a checkpoint is self-describing; training configs are
// written as JSON sidecars by the CLI.
struct CheckpointEntry {
    std::string name;
    Shape shape;                // empty = scalar
    std::vector<float> data;
};

struct Checkpoint {
    std::vector<CheckpointEntry> entries;

    void add(const std::string& name, const Tensor& t);
    void add_scalar(const std::string& name, double v);
    const CheckpointEntry* find(const std::string& name) const;
    double scalar(const std::string& name) const;
    Tensor tensor(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// model kind tags stored under "meta.kind"
inline constexpr double kKindTeacher = 0.0;
inline constexpr double kKindStudentCategorical = 1.0;
inline constexpr double kKindStudentBinary = 2.0;

void save_teacher(const TeacherModel& model, const std::string& path, uint64_t dataset_hash);
TeacherModel load_teacher(const std::string& path, uint64_t* dataset_hash = nullptr);

void save_student(const StudentDetector& model, const std::string& path, uint64_t dataset_hash);
StudentDetector load_student(const std::string& path, uint64_t* dataset_hash = nullptr);

}  // namespace kd
