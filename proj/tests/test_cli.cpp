#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dlra/checkpoint.hpp"
#include "dlra/glyphgen.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;  // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args) {
    RunResult r;
    const std::string cmd = std::string(DLRA_CLI_PATH) + " " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.out.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

fs::path fresh_dir(const std::string& tag) {
    auto dir = fs::temp_directory_path() / ("dlra_cli_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE_MESSAGE(in.good(), "cannot open ", p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

// Small config that still exercises the full pipeline.
std::string tiny_config(const std::string& tasks) {
    return "lr = 1e-3\nmax_epochs = 2\nmicro_batch = 4\naccumulation_steps = 1\n"
           "rank = 2\nlambda = 0\nprune_epsilon = 0\nseed = 0\ntasks = " +
           tasks + "\n";
}

// Generates a dataset directory via the CLI and returns its path.
fs::path make_dataset(const std::string& tag, int family, int per_class, int seed) {
    auto dir = fresh_dir(tag);
    auto r = run_cli("generate-data --family " + std::to_string(family) + " --per-class " +
                     std::to_string(per_class) + " --seed " + std::to_string(seed) + " --out " +
                     dir.string());
    REQUIRE_MESSAGE(r.code == 0, r.out);
    return dir;
}

double printed_metric(const std::string& out, const std::string& name) {
    const std::string key = name + " = ";
    const auto pos = out.find(key);
    REQUIRE_MESSAGE(pos != std::string::npos, "missing '", key, "' in: ", out);
    return std::stod(out.substr(pos + key.size()));
}

int data_rows(const std::string& csv) {
    int lines = 0;
    for (char c : csv) lines += c == '\n';
    return lines - 1;  // minus header
}

}  // namespace

TEST_CASE("generate-data writes a dataset pair plus manifest") {
    auto dir = make_dataset("gen", 0, 3, 0);
    CHECK(fs::exists(dir / "train.gly1"));
    CHECK(fs::exists(dir / "test.gly1"));
    CHECK(fs::exists(dir / "manifest.txt"));

    auto train = dlra::read_gly1((dir / "train.gly1").string());
    auto test = dlra::read_gly1((dir / "test.gly1").string());
    CHECK(train.n_classes == 10);
    CHECK(train.size() == 30);   // 3 per class
    CHECK(test.size() == 20);    // max(2, 3/5) per class

    auto man = slurp(dir / "manifest.txt");
    CHECK(man.find("family = 0") != std::string::npos);
    CHECK(man.find("seed = 0") != std::string::npos);
}

TEST_CASE("generate-data is deterministic in the seed") {
    auto a = make_dataset("gen_a", 1, 2, 7);
    auto b = make_dataset("gen_b", 1, 2, 7);
    auto c = make_dataset("gen_c", 1, 2, 8);
    CHECK(slurp(a / "train.gly1") == slurp(b / "train.gly1"));
    CHECK(slurp(a / "test.gly1") == slurp(b / "test.gly1"));
    CHECK(slurp(a / "train.gly1") != slurp(c / "train.gly1"));
}

TEST_CASE("generate-data rejects an out-of-range family") {
    auto dir = fresh_dir("gen_bad");
    auto r = run_cli("generate-data --family 4 --per-class 2 --seed 0 --out " + dir.string());
    CHECK(r.code == 2);
}

TEST_CASE("train emits the fixed output names and is reproducible") {
    auto data = make_dataset("train_data", 0, 4, 0);
    auto dir = fresh_dir("train_out");
    write_text(dir / "run.cfg", tiny_config(data.string()));

    auto r1 = run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                      (dir / "a").string());
    REQUIRE_MESSAGE(r1.code == 0, r1.out);
    for (const char* name : {"model.dlra", "report.csv", "report.md", "manifest.txt", "task0.dlra"})
        CHECK_MESSAGE(fs::exists(dir / "a" / name), name);
    CHECK(r1.out.find("task 0") != std::string::npos);

    auto r2 = run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                      (dir / "b").string());
    REQUIRE(r2.code == 0);
    CHECK(slurp(dir / "a" / "report.csv") == slurp(dir / "b" / "report.csv"));
    CHECK(slurp(dir / "a" / "model.dlra") == slurp(dir / "b" / "model.dlra"));

    auto man = slurp(dir / "a" / "manifest.txt");
    CHECK(man.find("lr = 0.001") != std::string::npos);
    CHECK(man.find("rank = 2") != std::string::npos);
    CHECK(man.find("tasks = ") != std::string::npos);
}

TEST_CASE("train honors --mode and --no-merge overrides in the manifest") {
    auto data = make_dataset("train_ovr_data", 0, 3, 1);
    auto dir = fresh_dir("train_ovr");
    write_text(dir / "run.cfg", tiny_config(data.string()));

    auto r = run_cli("train --config " + (dir / "run.cfg").string() + " --mode full_ft --out " +
                     (dir / "full").string());
    REQUIRE_MESSAGE(r.code == 0, r.out);
    CHECK(slurp(dir / "full" / "manifest.txt").find("mode = full_ft") != std::string::npos);

    auto r2 = run_cli("train --config " + (dir / "run.cfg").string() + " --no-merge --out " +
                      (dir / "nm").string());
    REQUIRE(r2.code == 0);
    CHECK(slurp(dir / "nm" / "manifest.txt").find("merge_after_task = 0") != std::string::npos);
}

TEST_CASE("train maps error categories onto exit codes") {
    auto dir = fresh_dir("train_err");

    // dataset directory that does not exist -> data error
    write_text(dir / "missing.cfg", tiny_config((dir / "nowhere").string()));
    auto r = run_cli("train --config " + (dir / "missing.cfg").string() + " --out " +
                     (dir / "o1").string());
    CHECK(r.code == 3);

    // malformed config -> usage error
    write_text(dir / "bad.cfg", "learning_rate = 1e-3\ntasks = x\n");
    auto r2 = run_cli("train --config " + (dir / "bad.cfg").string() + " --out " +
                      (dir / "o2").string());
    CHECK(r2.code == 2);
    CHECK(r2.out.find("learning_rate") != std::string::npos);

    // config file itself missing -> data error
    auto r3 = run_cli("train --config " + (dir / "absent.cfg").string() + " --out " +
                      (dir / "o3").string());
    CHECK(r3.code == 3);
}

TEST_CASE("eval prints accuracy, macro recall and macro f1") {
    auto data = make_dataset("eval_data", 0, 4, 2);
    auto dir = fresh_dir("eval_out");
    write_text(dir / "run.cfg", tiny_config(data.string()));
    auto tr = run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                      (dir / "m").string());
    REQUIRE_MESSAGE(tr.code == 0, tr.out);

    auto ev = run_cli("eval --checkpoint " + (dir / "m" / "model.dlra").string() + " --data " +
                      (data / "test.gly1").string() + " --out " + (dir / "ev").string());
    REQUIRE_MESSAGE(ev.code == 0, ev.out);
    const double acc = printed_metric(ev.out, "accuracy");
    const double rec = printed_metric(ev.out, "macro_recall");
    const double f1 = printed_metric(ev.out, "macro_f1");
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    CHECK(rec >= 0.0);
    CHECK(f1 >= 0.0);
    CHECK(fs::exists(dir / "ev" / "report.csv"));
    CHECK(fs::exists(dir / "ev" / "manifest.txt"));

    auto csv = slurp(dir / "ev" / "report.csv");
    CHECK(csv.find("accuracy") != std::string::npos);
    CHECK(csv.find("macro_recall") != std::string::npos);
    CHECK(csv.find("macro_f1") != std::string::npos);
}

TEST_CASE("eval rejects a head/dataset class mismatch") {
    auto data10 = make_dataset("mm_10", 0, 3, 3);
    auto data30 = make_dataset("mm_30", 3, 2, 3);
    auto dir = fresh_dir("mm_out");
    write_text(dir / "run.cfg", tiny_config(data10.string()));
    auto tr = run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                      (dir / "m").string());
    REQUIRE(tr.code == 0);

    auto ev = run_cli("eval --checkpoint " + (dir / "m" / "model.dlra").string() + " --data " +
                      (data30 / "test.gly1").string() + " --out " + (dir / "ev").string());
    CHECK(ev.code == 2);
    CHECK(ev.out.find("30") != std::string::npos);
    CHECK(ev.out.find("10") != std::string::npos);

    auto ev2 = run_cli("eval --checkpoint " + (dir / "m" / "model.dlra").string() + " --data " +
                       (dir / "ghost.gly1").string() + " --out " + (dir / "ev2").string());
    CHECK(ev2.code == 3);
}

TEST_CASE("merge strips every adapter entry and preserves predictions") {
    auto data = make_dataset("merge_data", 2, 3, 4);
    auto dir = fresh_dir("merge_out");
    write_text(dir / "run.cfg", tiny_config(data.string()));
    auto tr = run_cli("train --config " + (dir / "run.cfg").string() + " --out " +
                      (dir / "m").string());
    REQUIRE_MESSAGE(tr.code == 0, tr.out);

    auto mg = run_cli("merge --checkpoint " + (dir / "m" / "task0.dlra").string() + " --out " +
                      (dir / "merged").string());
    REQUIRE_MESSAGE(mg.code == 0, mg.out);
    REQUIRE(fs::exists(dir / "merged" / "model.dlra"));

    auto ck = dlra::Checkpoint::load((dir / "merged" / "model.dlra").string());
    for (const auto& name : ck.names()) CHECK(name.rfind("lora.", 0) != 0);

    auto before = run_cli("eval --checkpoint " + (dir / "m" / "task0.dlra").string() + " --data " +
                          (data / "test.gly1").string() + " --out " + (dir / "e1").string());
    auto after = run_cli("eval --checkpoint " + (dir / "merged" / "model.dlra").string() +
                         " --data " + (data / "test.gly1").string() + " --out " +
                         (dir / "e2").string());
    REQUIRE(before.code == 0);
    REQUIRE(after.code == 0);
    CHECK(printed_metric(before.out, "accuracy") ==
          doctest::Approx(printed_metric(after.out, "accuracy")).epsilon(1e-6));
}

TEST_CASE("ablate component sweep emits one accuracy row per switch") {
    auto data = make_dataset("abl_data", 0, 3, 5);
    auto dir = fresh_dir("abl_out");
    write_text(dir / "run.cfg", tiny_config(data.string()));

    auto r = run_cli("ablate --config " + (dir / "run.cfg").string() +
                     " --components dynamic_rank,mlp,attention,sparsity --out " +
                     (dir / "a").string());
    REQUIRE_MESSAGE(r.code == 0, r.out);

    auto csv = slurp(dir / "a" / "report.csv");
    CHECK(data_rows(csv) == 4);
    for (const char* label : {"no_dynamic_rank", "no_mlp", "no_attention", "no_sparsity"})
        CHECK_MESSAGE(csv.find(label) != std::string::npos, label);

    auto man = slurp(dir / "a" / "manifest.txt");
    CHECK(man.find("lambda = 0") != std::string::npos);
    CHECK(man.find("train_importance = 0") != std::string::npos);
}

TEST_CASE("ablate grid crosses every axis value") {
    auto data = make_dataset("grid_data", 0, 3, 6);
    auto dir = fresh_dir("grid_out");
    write_text(dir / "run.cfg", tiny_config(data.string()));

    auto r = run_cli("ablate --config " + (dir / "run.cfg").string() +
                     " --grid lr=1e-3,1e-2 batch=2,4 --out " + (dir / "g").string());
    REQUIRE_MESSAGE(r.code == 0, r.out);

    auto csv = slurp(dir / "g" / "report.csv");
    CHECK(data_rows(csv) == 4);
    for (const char* label :
         {"lr=1e-3 batch=2", "lr=1e-3 batch=4", "lr=1e-2 batch=2", "lr=1e-2 batch=4"})
        CHECK_MESSAGE(csv.find(label) != std::string::npos, label);
}

TEST_CASE("ablate validates its sweep arguments") {
    auto data = make_dataset("ablv_data", 0, 2, 7);
    auto dir = fresh_dir("ablv_out");
    write_text(dir / "run.cfg", tiny_config(data.string()));
    const std::string base = "ablate --config " + (dir / "run.cfg").string() + " --out " +
                             (dir / "x").string();

    CHECK(run_cli(base).code == 2);                                        // neither sweep
    CHECK(run_cli(base + " --grid lr=1 --components mlp").code == 2);      // both sweeps
    CHECK(run_cli(base + " --components bogus").code == 2);                // unknown switch
    CHECK(run_cli(base + " --components mlp,mlp").code == 2);              // duplicate switch
    CHECK(run_cli(base + " --grid momentum=0.9").code == 2);               // unknown axis
    CHECK(run_cli(base + " --grid lr=abc").code == 2);                     // bad value
}

TEST_CASE("usage errors exit 2") {
    CHECK(run_cli("").code == 2);
    CHECK(run_cli("--bogus").code == 2);
    CHECK(run_cli("generate-data --per-class 2 --out /tmp/x").code == 2);  // --family required
    CHECK(run_cli("train").code == 2);                                     // --config required
}
