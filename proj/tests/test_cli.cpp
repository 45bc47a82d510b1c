#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string cli = KD_CLI_PATH;
const std::string work = "/tmp/kd_cli_test";

int run(const std::string& args) {
    const int status = std::system((cli + " " + args + " > /dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct Workspace {
    Workspace() {
        fs::remove_all(work);
        fs::create_directories(work);
    }
    ~Workspace() { fs::remove_all(work); }
};

}  // namespace

TEST_CASE("cli end to end") {
    Workspace ws;

    SUBCASE("gen-data is byte-deterministic and validates flags") {
        REQUIRE(run("gen-data --seed 3 --num-train 8 --num-val 4 --out " + work + "/a") == 0);
        REQUIRE(run("gen-data --seed 3 --num-train 8 --num-val 4 --out " + work + "/b") == 0);
        for (const char* name :
             {"det_train.kdds", "det_val.kdds", "cls_train.kdcl", "cls_val.kdcl", "config.json"}) {
            CHECK(slurp(work + "/a/" + name) == slurp(work + "/b/" + name));
            CHECK(!slurp(work + "/a/" + name).empty());
        }
        CHECK(run("gen-data --classes 1 --out " + work + "/bad") == 2);
        CHECK(run("gen-data --bogus-flag 1 --out " + work + "/bad") == 2);
        CHECK(run("gen-data --num-train 5 --num-val 2 --out /proc/nope/x") == 3);
    }

    SUBCASE("student without teacher but with kd enabled is a usage error") {
        REQUIRE(run("gen-data --seed 4 --num-train 6 --num-val 2 --out " + work + "/d") == 0);
        CHECK(run("train-student --data " + work + "/d --out " + work + "/s --kd-cls on --epochs 1") ==
              2);
        // kd-loc0 alone is teacher-free
        CHECK(run("train-student --data " + work + "/d --out " + work +
                  "/s0 --kd-loc0 on --epochs 1 --batch-size 4") == 0);
    }

    SUBCASE("strict config parsing rejects unknown keys") {
        REQUIRE(run("gen-data --seed 5 --num-train 6 --num-val 2 --out " + work + "/d2") == 0);
        std::ofstream f(work + "/cfg.json");
        f << "{\"epochs\": 1, \"learning_rate\": 0.1}\n";  // misspelled key
        f.close();
        CHECK(run("train-teacher --data " + work + "/d2 --out " + work + "/t --config " + work +
                  "/cfg.json") == 2);
        std::ofstream g(work + "/cfg_ok.json");
        g << "{\"epochs\": 1, \"lr\": 0.1}\n";
        g.close();
        CHECK(run("train-teacher --data " + work + "/d2 --out " + work + "/t --config " + work +
                  "/cfg_ok.json") == 0);
        // resolved config embeds the applied values
        CHECK(slurp(work + "/t/config.json").find("\"epochs\": 1") != std::string::npos);
    }

    SUBCASE("training, eval and error analysis round trip deterministically") {
        REQUIRE(run("gen-data --seed 6 --num-train 12 --num-val 6 --out " + work + "/d3") == 0);
        REQUIRE(run("train-teacher --data " + work + "/d3 --out " + work +
                    "/t1 --epochs 2 --seed 9") == 0);
        REQUIRE(run("train-teacher --data " + work + "/d3 --out " + work +
                    "/t2 --epochs 2 --seed 9") == 0);
        CHECK(slurp(work + "/t1/teacher.kdck") == slurp(work + "/t2/teacher.kdck"));
        CHECK(slurp(work + "/t1/metrics.jsonl") == slurp(work + "/t2/metrics.jsonl"));

        REQUIRE(run("train-student --data " + work + "/d3 --out " + work + "/s1 --teacher " + work +
                    "/t1/teacher.kdck --kd-cls on --kd-loc on --kd-loc0 on --epochs 1 "
                    "--batch-size 4 --seed 9") == 0);
        REQUIRE(run("train-student --data " + work + "/d3 --out " + work + "/s2 --teacher " + work +
                    "/t1/teacher.kdck --kd-cls on --kd-loc on --kd-loc0 on --epochs 1 "
                    "--batch-size 4 --seed 9") == 0);
        CHECK(slurp(work + "/s1/student.kdck") == slurp(work + "/s2/student.kdck"));
        CHECK(slurp(work + "/s1/metrics.jsonl") == slurp(work + "/s2/metrics.jsonl"));

        REQUIRE(run("eval --model " + work + "/s1/student.kdck --data " + work + "/d3 --out " +
                    work + "/r1.json") == 0);
        REQUIRE(run("eval --model " + work + "/s1/student.kdck --data " + work + "/d3 --out " +
                    work + "/r2.json") == 0);
        CHECK(slurp(work + "/r1.json") == slurp(work + "/r2.json"));
        CHECK(!slurp(work + "/r1.json").empty());
        CHECK(fs::exists(work + "/r1.json.config.json"));

        REQUIRE(run("error-analysis --model " + work + "/s1/student.kdck --data " + work +
                    "/d3 --out " + work + "/e1.json") == 0);
        CHECK(slurp(work + "/e1.json").find("\"sweep\"") != std::string::npos);
    }

    SUBCASE("gradcheck filtering and exit codes") {
        CHECK(run("gradcheck --op sigmoid_t") == 0);
        CHECK(run("gradcheck --op not_a_real_op") == 2);
    }
}
