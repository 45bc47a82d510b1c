#include "kd/checkpoint.hpp"

#include <cmath>
#include <fstream>

#include "kd/io.hpp"

namespace kd {

namespace {
constexpr uint32_t kVersion = 1;

// u64 split into three f32-exact 22-bit limbs
void add_hash(Checkpoint& ck, uint64_t hash) {
    CheckpointEntry e;
    e.name = "meta.data_hash";
    e.shape = {3};
    for (int i = 0; i < 3; ++i)
        e.data.push_back(static_cast<float>((hash >> (22 * i)) & 0x3fffffULL));
    ck.entries.push_back(std::move(e));
}

uint64_t read_hash(const Checkpoint& ck) {
    const CheckpointEntry* e = ck.find("meta.data_hash");
    if (!e || e->data.size() != 3) return 0;
    uint64_t h = 0;
    for (int i = 0; i < 3; ++i)
        h |= static_cast<uint64_t>(e->data[static_cast<size_t>(i)]) << (22 * i);
    return h;
}
}  // namespace

void Checkpoint::add(const std::string& name, const Tensor& t) {
    CheckpointEntry e;
    e.name = name;
    e.shape = t.shape();
    e.data.reserve(static_cast<size_t>(t.numel()));
    for (double v : t.values()) e.data.push_back(static_cast<float>(v));
    entries.push_back(std::move(e));
}

void Checkpoint::add_scalar(const std::string& name, double v) {
    entries.push_back({name, {}, {static_cast<float>(v)}});
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const CheckpointEntry& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

double Checkpoint::scalar(const std::string& name) const {
    const CheckpointEntry* e = find(name);
    if (!e || e->data.size() != 1) throw IoError("checkpoint: missing scalar " + name);
    return e->data[0];
}

Tensor Checkpoint::tensor(const std::string& name) const {
    const CheckpointEntry* e = find(name);
    if (!e) throw IoError("checkpoint: missing tensor " + name);
    std::vector<double> data(e->data.begin(), e->data.end());
    return Tensor::from(e->shape, std::move(data));
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    io::write_magic(f, "KDCK");
    io::write_u32(f, kVersion);
    io::write_u32(f, static_cast<uint32_t>(ck.entries.size()));
    for (const CheckpointEntry& e : ck.entries) {
        io::write_u32(f, static_cast<uint32_t>(e.name.size()));
        f.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        io::write_u32(f, static_cast<uint32_t>(e.shape.size()));
        for (int d : e.shape) io::write_u32(f, static_cast<uint32_t>(d));
        io::write_f32_array(f, e.data);
    }
    if (!f) throw IoError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    io::read_magic(f, "KDCK", path);
    if (io::read_u32(f) != kVersion) throw IoError(path + ": unsupported version");
    Checkpoint ck;
    const uint32_t count = io::read_u32(f);
    for (uint32_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const uint32_t name_len = io::read_u32(f);
        e.name.resize(name_len);
        f.read(e.name.data(), name_len);
        const uint32_t rank = io::read_u32(f);
        size_t numel = 1;
        for (uint32_t d = 0; d < rank; ++d) {
            e.shape.push_back(static_cast<int>(io::read_u32(f)));
            numel *= static_cast<size_t>(e.shape.back());
        }
        e.data = io::read_f32_array(f, numel);
        ck.entries.push_back(std::move(e));
    }
    if (!f) throw IoError(path + ": truncated file");
    return ck;
}

namespace {

void load_params_into(std::vector<std::pair<std::string, Tensor>> params, const Checkpoint& ck) {
    for (auto& [name, p] : params) {
        Tensor stored = ck.tensor(name);
        if (stored.shape() != p.shape())
            throw IoError("checkpoint: shape mismatch for " + name + ": " +
                          shape_str(stored.shape()) + " vs " + shape_str(p.shape()));
        auto dst = p.values_mut();
        auto src = stored.values();
        for (size_t i = 0; i < dst.size(); ++i) dst[i] = src[i];
    }
}

}  // namespace

void save_teacher(const TeacherModel& model, const std::string& path, uint64_t dataset_hash) {
    Checkpoint ck;
    ck.add_scalar("meta.kind", kKindTeacher);
    ck.add_scalar("meta.input_size", model.config().input_size);
    add_hash(ck, dataset_hash);
    for (const auto& [name, p] : model.named_params()) ck.add(name, p);
    save_checkpoint(ck, path);
}

TeacherModel load_teacher(const std::string& path, uint64_t* dataset_hash) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.scalar("meta.kind") != kKindTeacher) throw IoError(path + ": not a teacher checkpoint");
    TeacherConfig cfg;
    cfg.input_size = static_cast<int>(ck.scalar("meta.input_size"));
    const Tensor c1 = ck.tensor("conv1.w");
    const Tensor c2 = ck.tensor("conv2.w");
    const Tensor fc = ck.tensor("fc.w");
    cfg.channels1 = c1.dim(0);
    cfg.channels2 = c2.dim(0);
    cfg.num_classes = fc.dim(1);
    Rng rng(0);
    TeacherModel model(cfg, rng);
    load_params_into(model.named_params(), ck);
    if (dataset_hash) *dataset_hash = read_hash(ck);
    return model;
}

void save_student(const StudentDetector& model, const std::string& path, uint64_t dataset_hash) {
    Checkpoint ck;
    const StudentConfig& cfg = model.config();
    ck.add_scalar("meta.kind", cfg.head == HeadKind::categorical ? kKindStudentCategorical
                                                                 : kKindStudentBinary);
    ck.add_scalar("meta.image_size", cfg.image_size);
    ck.add_scalar("meta.num_classes", cfg.num_classes);
    ck.add_scalar("meta.stride", cfg.anchors.stride);
    {
        CheckpointEntry scales{"meta.scales", {static_cast<int>(cfg.anchors.scales.size())}, {}};
        for (double s : cfg.anchors.scales) scales.data.push_back(static_cast<float>(s));
        ck.entries.push_back(std::move(scales));
        CheckpointEntry ratios{"meta.ratios", {static_cast<int>(cfg.anchors.ratios.size())}, {}};
        for (double r : cfg.anchors.ratios) ratios.data.push_back(static_cast<float>(r));
        ck.entries.push_back(std::move(ratios));
    }
    add_hash(ck, dataset_hash);
    for (const auto& [name, p] : model.named_params()) ck.add(name, p);
    save_checkpoint(ck, path);
}

StudentDetector load_student(const std::string& path, uint64_t* dataset_hash) {
    Checkpoint ck = load_checkpoint(path);
    const double kind = ck.scalar("meta.kind");
    if (kind != kKindStudentCategorical && kind != kKindStudentBinary)
        throw IoError(path + ": not a student checkpoint");
    StudentConfig cfg;
    cfg.head = kind == kKindStudentCategorical ? HeadKind::categorical : HeadKind::binary;
    cfg.image_size = static_cast<int>(ck.scalar("meta.image_size"));
    cfg.num_classes = static_cast<int>(ck.scalar("meta.num_classes"));
    cfg.anchors.stride = static_cast<int>(ck.scalar("meta.stride"));
    cfg.anchors.scales.clear();
    for (float s : ck.find("meta.scales")->data) cfg.anchors.scales.push_back(s);
    cfg.anchors.ratios.clear();
    for (float r : ck.find("meta.ratios")->data) cfg.anchors.ratios.push_back(r);
    cfg.channels1 = ck.tensor("block1.w").dim(0);
    cfg.channels2 = ck.tensor("block2.w").dim(0);
    cfg.channels3 = ck.tensor("block3.w").dim(0);
    Rng rng(0);
    StudentDetector model(cfg, rng);
    load_params_into(model.named_params(), ck);
    if (dataset_hash) *dataset_hash = read_hash(ck);
    return model;
}

}  // namespace kd
