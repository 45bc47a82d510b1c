#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "kd/checkpoint.hpp"
#include "kd/eval.hpp"
#include "kd/grad_check.hpp"
#include "kd/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace kd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path + " for writing");
    f << text;
    if (!f) throw IoError("write failed for " + path);
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

// strict parse: every key must be recognized and applied
void apply_config_file(const std::string& path, json& target) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    json loaded;
    try {
        loaded = json::parse(f);
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    for (auto& [key, value] : loaded.items()) {
        if (!target.contains(key))
            throw ConfigError("config " + path + ": unknown key \"" + key + "\"");
        target[key] = value;
    }
}

HeadKind parse_head(const std::string& head) {
    if (head == "categorical") return HeadKind::categorical;
    if (head == "binary") return HeadKind::binary;
    throw ConfigError("unknown head kind \"" + head + "\"");
}

bool parse_switch(const std::string& v, const char* flag) {
    if (v == "on") return true;
    if (v == "off") return false;
    throw ConfigError(std::string(flag) + " expects on|off, got \"" + v + "\"");
}

// ---- gen-data ---------------------------------------------------------------

struct GenDataArgs {
    uint64_t seed = 1;
    int num_train = 2000;
    int num_val = 200;
    int image_size = 64;
    int classes = 6;
    int crop_size = 32;
    int min_objects = 1;
    int max_objects = 3;
    std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
    SceneSpec spec;
    spec.image_size = a.image_size;
    spec.num_classes = a.classes;
    spec.min_objects = a.min_objects;
    spec.max_objects = a.max_objects;
    spec.validate();
    if (a.num_train < 1 || a.num_val < 1) throw ConfigError("need at least one record per split");
    ensure_dir(a.out);

    DetDataset train = build_detection_split(a.seed, a.num_train, false, spec);
    DetDataset val = build_detection_split(a.seed, a.num_val, true, spec);
    save_detection_dataset(train, a.out + "/det_train.kdds");
    save_detection_dataset(val, a.out + "/det_val.kdds");
    CropDataset crops_train = derive_classification_crops(train, a.crop_size);
    CropDataset crops_val = derive_classification_crops(val, a.crop_size);
    save_crop_dataset(crops_train, a.out + "/cls_train.kdcl");
    save_crop_dataset(crops_val, a.out + "/cls_val.kdcl");

    json cfg = {{"seed", a.seed},       {"num_train", a.num_train}, {"num_val", a.num_val},
                {"image_size", a.image_size}, {"classes", a.classes},     {"crop_size", a.crop_size},
                {"min_objects", a.min_objects}, {"max_objects", a.max_objects}};
    write_text(a.out + "/config.json", cfg.dump(2) + "\n");

    std::printf("wrote %s: C=%d size=%d train=%d val=%d crops=%zu/%zu\n", a.out.c_str(), a.classes,
                a.image_size, a.num_train, a.num_val, crops_train.records.size(),
                crops_val.records.size());
    return kExitOk;
}

// ---- train-teacher ------------------------------------------------------------

int cmd_train_teacher(const std::string& data_dir, const std::string& out_dir,
                      const std::string& config_path, json cfg) {
    if (!config_path.empty()) apply_config_file(config_path, cfg);

    TrainConfig tc;
    tc.epochs = cfg["epochs"];
    tc.batch_size = cfg["batch_size"];
    tc.seed = cfg["seed"];
    tc.lr = cfg["lr"];
    tc.momentum = cfg["momentum"];
    TeacherLossKind kind;
    const std::string loss = cfg["loss"];
    if (loss == "categorical")
        kind = TeacherLossKind::categorical;
    else if (loss == "binary")
        kind = TeacherLossKind::binary;
    else if (loss == "joint")
        kind = TeacherLossKind::joint;
    else
        throw ConfigError("unknown teacher loss \"" + loss + "\"");

    CropDataset train = load_crop_dataset(data_dir + "/cls_train.kdcl");
    CropDataset val = load_crop_dataset(data_dir + "/cls_val.kdcl");
    ensure_dir(out_dir);
    write_text(out_dir + "/config.json", cfg.dump(2) + "\n");

    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::binary);
    if (!metrics) throw IoError("cannot open metrics file");
    TeacherTrainResult r = train_teacher(train, val, kind, tc, {}, &metrics);
    const uint64_t hash = dataset_meta_hash(train.num_classes, train.crop_size, 0);
    save_teacher(r.model, out_dir + "/teacher.kdck", hash);
    std::printf("teacher: best val top-1 %.4f at epoch %d -> %s/teacher.kdck\n", r.best_val_top1,
                r.best_epoch, out_dir.c_str());
    return kExitOk;
}

// ---- train-student --------------------------------------------------------------

int cmd_train_student(const std::string& data_dir, const std::string& out_dir,
                      const std::string& teacher_path, const std::string& config_path, json cfg) {
    if (!config_path.empty()) apply_config_file(config_path, cfg);

    TrainConfig tc;
    tc.epochs = cfg["epochs"];
    tc.batch_size = cfg["batch_size"];
    tc.seed = cfg["seed"];
    tc.lr = cfg["lr"];
    tc.momentum = cfg["momentum"];
    tc.head = parse_head(cfg["head"]);
    tc.enable_kd_cls = cfg["kd_cls"];
    tc.enable_kd_loc = cfg["kd_loc"];
    tc.enable_kd_loc0 = cfg["kd_loc0"];
    tc.distill.lambda_kc = cfg["lambda_kc"];
    tc.distill.lambda_kl = cfg["lambda_kl"];
    tc.distill.temperature = cfg["temperature"];
    tc.distill.sampling_size = cfg["sampling_size"];
    tc.distill.pool_w = cfg["pool_size"];
    tc.distill.pool_h = cfg["pool_size"];
    tc.distill.layer0 = false;
    tc.distill.layer1 = false;
    tc.distill.layer2 = false;
    for (const std::string layer : cfg["layers"]) {
        if (layer == "l0")
            tc.distill.layer0 = true;
        else if (layer == "l1")
            tc.distill.layer1 = true;
        else if (layer == "l2")
            tc.distill.layer2 = true;
        else
            throw ConfigError("unknown layer \"" + layer + "\" (expected l0/l1/l2)");
    }
    tc.distill.validate();

    const bool needs_teacher = tc.enable_kd_cls || tc.enable_kd_loc;
    if (needs_teacher && teacher_path.empty())
        throw ConfigError(
            "kd-cls/kd-loc distillation needs --teacher (only kd-loc0 is teacher-free)");

    DetDataset train = load_detection_dataset(data_dir + "/det_train.kdds");
    DetDataset val = load_detection_dataset(data_dir + "/det_val.kdds");

    std::optional<TeacherModel> teacher;
    if (!teacher_path.empty()) {
        uint64_t teacher_hash = 0;
        teacher.emplace(load_teacher(teacher_path, &teacher_hash));
        teacher->set_frozen(true);
    }

    ensure_dir(out_dir);
    cfg["teacher"] = teacher_path;
    write_text(out_dir + "/config.json", cfg.dump(2) + "\n");

    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::binary);
    if (!metrics) throw IoError("cannot open metrics file");
    StudentTrainResult r =
        train_student(train, val, teacher ? &*teacher : nullptr, tc, {}, &metrics);
    const uint64_t hash = dataset_meta_hash(train.num_classes, train.image_size, 0);
    save_student(r.model, out_dir + "/student.kdck", hash);
    std::printf("student: val mAP %.4f AP50 %.4f AP75 %.4f -> %s/student.kdck\n", r.final_val.mAP,
                r.final_val.ap50, r.final_val.ap75, out_dir.c_str());
    return kExitOk;
}

// ---- eval / error-analysis --------------------------------------------------------

json metrics_to_json(const CocoMetrics& m) {
    json j;
    for (int t = 0; t < 10; ++t) {
        char key[8];
        std::snprintf(key, sizeof key, "AP%d", 50 + 5 * t);
        j[key] = m.ap_per_iou[static_cast<size_t>(t)];
    }
    j["mAP"] = m.mAP;
    j["AP50"] = m.ap50;
    j["AP75"] = m.ap75;
    j["mAR"] = m.mAR;
    j["AP_small"] = m.ap_small;
    j["AP_medium"] = m.ap_medium;
    j["AP_large"] = m.ap_large;
    return j;
}

json report_to_json(const ErrorReport& r) {
    return json{{"fg_iou_thresh", r.fg_iou_thresh},
                {"true_positives", r.true_positives},
                {"detections", r.detections},
                {"counts",
                 {{"classification", r.classification},
                  {"localization", r.localization},
                  {"both", r.both},
                  {"duplicate", r.duplicate},
                  {"background", r.background},
                  {"missed_gt", r.missed_gt}}},
                {"map_impact",
                 {{"classification", r.impact_classification},
                  {"localization", r.impact_localization},
                  {"both", r.impact_both},
                  {"duplicate", r.impact_duplicate},
                  {"background", r.impact_background},
                  {"missed_gt", r.impact_missed_gt}}}};
}

struct EvalInputs {
    StudentDetector model;
    DetDataset data;
    std::vector<Detection> dets;
    std::vector<GtBox> gts;
};

EvalInputs load_eval_inputs(const std::string& model_path, const std::string& data_dir,
                            const std::string& split) {
    uint64_t model_hash = 0;
    EvalInputs in{load_student(model_path, &model_hash),
                  load_detection_dataset(data_dir + "/det_" + split + ".kdds"),
                  {},
                  {}};
    const uint64_t data_hash = dataset_meta_hash(in.data.num_classes, in.data.image_size, 0);
    if (model_hash != 0 && model_hash != data_hash)
        std::fprintf(stderr,
                     "warning: checkpoint was trained against a different dataset "
                     "(hash %llx vs %llx)\n",
                     static_cast<unsigned long long>(model_hash),
                     static_cast<unsigned long long>(data_hash));
    in.dets = detect(in.model, in.data);
    in.gts = dataset_ground_truth(in.data);
    return in;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir, const std::string& split,
             const std::string& out_path) {
    EvalInputs in = load_eval_inputs(model_path, data_dir, split);
    CocoMetrics m = coco_metrics(in.dets, in.gts, {}, in.data.num_classes);

    json j;
    j["model"] = model_path;
    j["split"] = split;
    j["num_images"] = in.data.records.size();
    j["num_detections"] = in.dets.size();
    j["metrics"] = metrics_to_json(m);
    j["error_decomposition"] = report_to_json(error_decomposition(in.dets, in.gts, 0.5));
    write_text(out_path, j.dump(2) + "\n");

    json cfg = {{"model", model_path}, {"data", data_dir}, {"split", split}, {"out", out_path}};
    write_text(out_path + ".config.json", cfg.dump(2) + "\n");
    std::printf("mAP %.4f AP50 %.4f AP75 %.4f mAR %.4f -> %s\n", m.mAP, m.ap50, m.ap75, m.mAR,
                out_path.c_str());
    return kExitOk;
}

int cmd_error_analysis(const std::string& model_path, const std::string& data_dir,
                       const std::string& split, const std::string& out_path) {
    EvalInputs in = load_eval_inputs(model_path, data_dir, split);
    json sweep = json::array();
    for (const ErrorReport& r : error_sweep(in.dets, in.gts)) sweep.push_back(report_to_json(r));
    json j;
    j["model"] = model_path;
    j["split"] = split;
    j["sweep"] = sweep;
    write_text(out_path, j.dump(2) + "\n");
    json cfg = {{"model", model_path}, {"data", data_dir}, {"split", split}, {"out", out_path}};
    write_text(out_path + ".config.json", cfg.dump(2) + "\n");
    std::printf("error analysis over %zu thresholds -> %s\n", sweep.size(), out_path.c_str());
    return kExitOk;
}

// ---- gradcheck -----------------------------------------------------------------

int cmd_gradcheck(uint64_t seed, const std::string& op_filter) {
    const auto results = run_gradcheck(gradcheck_registry(), op_filter, seed);
    if (results.empty()) {
        std::fprintf(stderr, "no registered op matches \"%s\"\n", op_filter.c_str());
        return kExitUsage;
    }
    bool all_ok = true;
    for (const GradCheckResult& r : results) {
        std::printf("%-28s max rel err %.3e  (tol %.0e)  %s\n", r.name.c_str(), r.max_error,
                    r.tolerance, r.ok ? "ok" : "FAIL");
        all_ok = all_ok && r.ok;
    }
    return all_ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"classifier-to-detector knowledge distillation workbench"};
    app.require_subcommand(1);

    std::function<int()> action;

    // gen-data
    GenDataArgs gd;
    CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic detection + crop datasets");
    gen->add_option("--seed", gd.seed);
    gen->add_option("--num-train", gd.num_train);
    gen->add_option("--num-val", gd.num_val);
    gen->add_option("--image-size", gd.image_size);
    gen->add_option("--classes", gd.classes);
    gen->add_option("--crop-size", gd.crop_size);
    gen->add_option("--min-objects", gd.min_objects);
    gen->add_option("--max-objects", gd.max_objects);
    gen->add_option("--out", gd.out)->required();
    gen->callback([&] { action = [&] { return cmd_gen_data(gd); }; });

    // train-teacher
    std::string tt_data, tt_out, tt_config;
    json tt_cfg = {{"epochs", 20}, {"batch_size", 32}, {"seed", 1},
                   {"lr", 0.05},   {"momentum", 0.9},  {"loss", "categorical"}};
    CLI::App* tt = app.add_subcommand("train-teacher", "train the classification teacher");
    tt->add_option("--data", tt_data)->required();
    tt->add_option("--out", tt_out)->required();
    tt->add_option("--config", tt_config);
    tt->add_option_function<int>("--epochs", [&](int v) { tt_cfg["epochs"] = v; });
    tt->add_option_function<int>("--batch-size", [&](int v) { tt_cfg["batch_size"] = v; });
    tt->add_option_function<uint64_t>("--seed", [&](uint64_t v) { tt_cfg["seed"] = v; });
    tt->add_option_function<double>("--lr", [&](double v) { tt_cfg["lr"] = v; });
    tt->add_option_function<double>("--momentum", [&](double v) { tt_cfg["momentum"] = v; });
    tt->add_option_function<std::string>("--loss", [&](const std::string& v) { tt_cfg["loss"] = v; })
        ->check(CLI::IsMember({"categorical", "binary", "joint"}));
    tt->callback(
        [&] { action = [&] { return cmd_train_teacher(tt_data, tt_out, tt_config, tt_cfg); }; });

    // train-student
    std::string ts_data, ts_out, ts_teacher, ts_config;
    json ts_cfg = {{"epochs", 10},      {"batch_size", 16}, {"seed", 1},
                   {"lr", 0.02},        {"momentum", 0.9},  {"head", "categorical"},
                   {"kd_cls", false},   {"kd_loc", false},  {"kd_loc0", false},
                   {"lambda_kc", 0.4},  {"lambda_kl", 1.0}, {"temperature", 2.0},
                   {"sampling_size", 32}, {"pool_size", 4}, {"layers", json::array({"l0", "l1"})}};
    CLI::App* ts = app.add_subcommand("train-student", "train the detector student");
    ts->add_option("--data", ts_data)->required();
    ts->add_option("--out", ts_out)->required();
    ts->add_option("--teacher", ts_teacher);
    ts->add_option("--config", ts_config);
    ts->add_option_function<int>("--epochs", [&](int v) { ts_cfg["epochs"] = v; });
    ts->add_option_function<int>("--batch-size", [&](int v) { ts_cfg["batch_size"] = v; });
    ts->add_option_function<uint64_t>("--seed", [&](uint64_t v) { ts_cfg["seed"] = v; });
    ts->add_option_function<double>("--lr", [&](double v) { ts_cfg["lr"] = v; });
    ts->add_option_function<double>("--momentum", [&](double v) { ts_cfg["momentum"] = v; });
    ts->add_option_function<std::string>("--head", [&](const std::string& v) { ts_cfg["head"] = v; })
        ->check(CLI::IsMember({"categorical", "binary"}));
    ts->add_option_function<std::string>(
          "--kd-cls", [&](const std::string& v) { ts_cfg["kd_cls"] = parse_switch(v, "--kd-cls"); })
        ->check(CLI::IsMember({"on", "off"}));
    ts->add_option_function<std::string>(
          "--kd-loc", [&](const std::string& v) { ts_cfg["kd_loc"] = parse_switch(v, "--kd-loc"); })
        ->check(CLI::IsMember({"on", "off"}));
    ts->add_option_function<std::string>(
          "--kd-loc0",
          [&](const std::string& v) { ts_cfg["kd_loc0"] = parse_switch(v, "--kd-loc0"); })
        ->check(CLI::IsMember({"on", "off"}));
    ts->add_option_function<double>("--lambda-kc", [&](double v) { ts_cfg["lambda_kc"] = v; });
    ts->add_option_function<double>("--lambda-kl", [&](double v) { ts_cfg["lambda_kl"] = v; });
    ts->add_option_function<double>("--temperature", [&](double v) { ts_cfg["temperature"] = v; });
    ts->add_option_function<int>("--sampling-size",
                                 [&](int v) { ts_cfg["sampling_size"] = v; });
    ts->add_option_function<int>("--pool-size", [&](int v) { ts_cfg["pool_size"] = v; });
    ts->add_option_function<std::string>("--layers", [&](const std::string& v) {
        json layers = json::array();
        std::string item;
        for (char ch : v + ",") {
            if (ch == ',') {
                if (!item.empty()) layers.push_back(item);
                item.clear();
            } else {
                item += ch;
            }
        }
        ts_cfg["layers"] = layers;
    });
    ts->callback([&] {
        action = [&] { return cmd_train_student(ts_data, ts_out, ts_teacher, ts_config, ts_cfg); };
    });

    // eval
    std::string ev_model, ev_data, ev_out, ev_split = "val";
    CLI::App* ev = app.add_subcommand("eval", "COCO-style evaluation of a student checkpoint");
    ev->add_option("--model", ev_model)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val"}));
    ev->add_option("--out", ev_out)->required();
    ev->callback([&] { action = [&] { return cmd_eval(ev_model, ev_data, ev_split, ev_out); }; });

    // error-analysis
    std::string ea_model, ea_data, ea_out, ea_split = "val";
    CLI::App* ea = app.add_subcommand("error-analysis", "detection error decomposition sweep");
    ea->add_option("--model", ea_model)->required();
    ea->add_option("--data", ea_data)->required();
    ea->add_option("--split", ea_split)->check(CLI::IsMember({"train", "val"}));
    ea->add_option("--out", ea_out)->required();
    ea->callback(
        [&] { action = [&] { return cmd_error_analysis(ea_model, ea_data, ea_split, ea_out); }; });

    // gradcheck
    uint64_t gc_seed = 1;
    std::string gc_op;
    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    gc->add_option("--seed", gc_seed);
    gc->add_option("--op", gc_op);
    gc->callback([&] { action = [&] { return cmd_gradcheck(gc_seed, gc_op); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        return action();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return kExitIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "failed: %s\n", e.what());
        return kExitCheckFailed;
    }
}
