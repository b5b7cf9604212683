#include <catch_amalgamated.hpp>

#include "protoalign/protoalign.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace protoalign;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string output;
};

struct ScratchDir {
    fs::path path;
    ScratchDir() : path(fs::temp_directory_path() / ("protoalign_cli_" + std::to_string(::getpid()))) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

const fs::path& scratch() {
    static const ScratchDir dir;
    return dir.path;
}

RunResult run(const std::string& args, const std::string& env = "") {
    const fs::path log = scratch() / "last_output.txt";
    const std::string cmd = env + (env.empty() ? "" : " ") + "'" + std::string(PROTOALIGN_CLI_PATH) + "' " + args + " > '" +
                            log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream in(log);
    std::ostringstream s;
    s << in.rdbuf();
    r.output = s.str();
    return r;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// A small synthetic problem and a short schedule keep each run well under a second.
const std::string kSmall =
    "--no-env --set synthetic.n_target=200 --set synthetic.n_aux=400 --set model.stage_sizes=[16,16,16,16] "
    "--set model.hidden_dim_f=16 --set model.proj_dim=8 --set model.disc_hidden=16 ";
const std::string kShortTrain = "--epochs 3 --warmup 1 --batch-size 32 --lr 0.001 ";

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_CASE("cli: gen-data is deterministic and reports the flip count", "[cli]") {
    const fs::path a = scratch() / "gen_a", b = scratch() / "gen_b";
    const RunResult ra = run(kSmall + "gen-data --seed 3 --output-dir " + a.string());
    REQUIRE(ra.code == 0);
    CHECK(ra.output.find("auxiliary label flips: 120 (boundary") != std::string::npos);
    REQUIRE(run(kSmall + "gen-data --seed 3 --output-dir " + b.string()).code == 0);
    for (const char* f : {"target.manifest", "aux.manifest", "target_train.manifest", "target_test.manifest"}) {
        REQUIRE(fs::exists(a / f));
        CHECK(slurp(a / f) == slurp(b / f));
    }
    CHECK(slurp(a / "produced_files.txt") == slurp(b / "produced_files.txt"));
    const DatasetManifest train = read_manifest(a / "target_train.manifest");
    const DatasetManifest test = read_manifest(a / "target_test.manifest");
    CHECK(train.size() == 160);
    CHECK(test.size() == 40);

    const RunResult rc = run(kSmall + "gen-data --mismatch-rate 0.25 --output-dir " + (scratch() / "gen_c").string());
    CHECK(rc.output.find("auxiliary label flips: 100 ") != std::string::npos);
    CHECK(run(kSmall + "gen-data --seed 4 --output-dir " + (scratch() / "gen_d").string()).code == 0);
    CHECK(slurp(scratch() / "gen_d" / "aux.manifest") != slurp(a / "aux.manifest"));
}

TEST_CASE("cli: train writes its artifacts and is byte-deterministic", "[cli]") {
    const fs::path a = scratch() / "train_a", b = scratch() / "train_b";
    const std::string args = kSmall + "train " + kShortTrain + "--seed 7 --diagnostics --output-dir ";
    const RunResult ra = run(args + a.string());
    INFO(ra.output);
    REQUIRE(ra.code == 0);
    REQUIRE(run(args + b.string()).code == 0);
    for (const char* f : {"config.json", "history.csv", "checkpoint.json", "produced_files.txt", "diagnostics/epoch_000.csv",
                          "diagnostics/epoch_002.csv"})
        CHECK(fs::exists(a / f));
    CHECK(slurp(a / "history.csv") == slurp(b / "history.csv"));
    const json ca = json::parse(slurp(a / "checkpoint.json")), cb = json::parse(slurp(b / "checkpoint.json"));
    CHECK(ca["parameters"] == cb["parameters"]);
    CHECK(ca["rng_state"] == cb["rng_state"]);
    const std::string history = slurp(a / "history.csv");
    CHECK(line_count(history) == 4);
    CHECK(history.rfind("epoch,L_clf,L_eda,L_psa,total,n_aux_used_clf,n_aux_used_align,val_accuracy,val_auc\n", 0) == 0);
    CHECK(slurp(a / "diagnostics/epoch_001.csv").rfind("sample_id,eta,filtered_align,filtered_clf\n", 0) == 0);

    const json cfg = json::parse(slurp(a / "config.json"));
    CHECK(cfg["train"]["seed"] == 7);
    CHECK(cfg["train"]["alpha"] == 0.1);
    CHECK(cfg["train"]["beta"] == 0.01);
    CHECK(cfg["train"]["gamma"] == 0.1);
    CHECK(cfg["train"]["sigma_align"] == 0.4);
    CHECK(cfg["train"]["sigma_clf"] == 0.9);
    CHECK(load_checkpoint(a / "checkpoint.json").epoch == 3);
}

TEST_CASE("cli: default flags carry the reference settings", "[cli]") {
    const RunResult r = run("--no-env --print-config train");
    REQUIRE(r.code == 0);
    const json cfg = json::parse(r.output);
    CHECK(cfg["train"]["alpha"] == 0.1);
    CHECK(cfg["train"]["beta"] == 0.01);
    CHECK(cfg["train"]["gamma"] == 0.1);
    CHECK(cfg["train"]["warmup_epochs"] == 5);
    CHECK(cfg["train"]["total_epochs"] == 20);
    CHECK(cfg["train"]["sigma_align"] == 0.4);
    CHECK(cfg["train"]["sigma_clf"] == 0.9);
    CHECK(cfg["train"]["batch_size_target"] == 128);
    CHECK(cfg["train"]["learning_rate"] == 1e-4);
    CHECK(cfg["train"]["weight_decay"] == 1e-3);

    const RunResult env = run("--print-config train", "PROTOALIGN_TRAIN_ALPHA=0.5");
    REQUIRE(env.code == 0);
    CHECK(json::parse(env.output)["train"]["alpha"] == 0.5);
    const RunResult flag = run("--print-config train --alpha 0.7", "PROTOALIGN_TRAIN_ALPHA=0.5");
    CHECK(json::parse(flag.output)["train"]["alpha"] == 0.7);
    CHECK(run("--print-config train", "PROTOALIGN_TRAIN_ALPAH=0.5").code == 2);
}

TEST_CASE("cli: target-only baseline flags", "[cli]") {
    const fs::path dir = scratch() / "baseline";
    const RunResult r = run(kSmall + "train " + kShortTrain + "--no-psa --gamma 0 --eda off --no-aux --output-dir " + dir.string());
    INFO(r.output);
    REQUIRE(r.code == 0);
    CHECK(r.output.find("auxiliary 0") != std::string::npos);
    const std::string h = slurp(dir / "history.csv");
    std::istringstream lines(h);
    std::string line;
    std::getline(lines, line);
    while (std::getline(lines, line)) {
        const auto f = split_string(line, ',');
        CHECK(f[2] == "0");  // L_eda
        CHECK(f[3] == "0");  // L_psa
        CHECK(f[5] == "0");  // n_aux_used_clf
    }
}

TEST_CASE("cli: eval writes reports and rejects mismatched inputs cleanly", "[cli]") {
    const fs::path data = scratch() / "eval_data", run_dir = scratch() / "eval_run";
    REQUIRE(run(kSmall + "gen-data --output-dir " + data.string()).code == 0);
    REQUIRE(run(kSmall + "train --epochs 6 --warmup 1 --batch-size 32 --lr 0.003 --train-manifest " +
                (data / "target_train.manifest").string() + " --aux-manifest " + (data / "aux.manifest").string() +
                " --test-manifest " + (data / "target_test.manifest").string() + " --output-dir " + run_dir.string())
                .code == 0);
    const std::string ck = (run_dir / "checkpoint.json").string();

    const RunResult held = run("--no-env eval --checkpoint " + ck);
    INFO(held.output);
    REQUIRE(held.code == 0);
    for (const char* f : {"metrics.json", "roc.csv", "prediction_distribution.csv", "produced_files.txt"})
        CHECK(fs::exists(run_dir / "eval" / f));
    const json m = json::parse(slurp(run_dir / "eval" / "metrics.json"));
    CHECK(m["checkpoint_epoch"] == 6);
    CHECK(m["n_samples"] == 40);
    const std::string roc = slurp(run_dir / "eval" / "roc.csv");
    CHECK(roc.rfind("fpr,tpr\n0,0\n", 0) == 0);
    CHECK(roc.find("\n1,1\n") != std::string::npos);

    // The training split of a fitted model scores at least as well as held-out data.
    const fs::path train_eval = scratch() / "eval_train";
    REQUIRE(run("--no-env eval --checkpoint " + ck + " --manifest " + (data / "target_train.manifest").string() + " --output-dir " +
                train_eval.string())
                .code == 0);
    const json mt = json::parse(slurp(train_eval / "metrics.json"));
    CHECK(mt["accuracy"].get<double>() >= m["accuracy"].get<double>());

    // Three classes against a two-class checkpoint.
    const fs::path three = scratch() / "three";
    REQUIRE(run("--no-env --set synthetic.num_classes=3 --set synthetic.n_target=60 --set synthetic.n_aux=30 gen-data --output-dir " +
                three.string())
                .code == 0);
    const fs::path bad_out = scratch() / "eval_bad";
    const RunResult k = run("--no-env eval --checkpoint " + ck + " --manifest " + (three / "target.manifest").string() +
                            " --output-dir " + bad_out.string());
    CHECK(k.code == 3);
    CHECK(k.output.find("num_classes mismatch") != std::string::npos);
    CHECK_FALSE(fs::exists(bad_out));

    DatasetManifest empty = read_manifest(data / "target_test.manifest");
    empty.records.clear();
    write_manifest(scratch() / "empty.manifest", empty);
    const RunResult e = run("--no-env eval --checkpoint " + ck + " --manifest " + (scratch() / "empty.manifest").string() +
                            " --output-dir " + bad_out.string());
    CHECK(e.code == 3);
    CHECK(e.output.find("no samples") != std::string::npos);
    CHECK_FALSE(fs::exists(bad_out));

    const RunResult arch = run("--no-env --set model.proj_dim=4 eval --checkpoint " + ck + " --output-dir " + bad_out.string());
    CHECK(arch.code == 2);
    CHECK(arch.output.find("model.proj_dim") != std::string::npos);
    CHECK_FALSE(fs::exists(bad_out));
}

TEST_CASE("cli: sweep shape and axis validation", "[cli]") {
    const fs::path dir = scratch() / "sweep";
    const RunResult r = run(kSmall + "sweep " + kShortTrain + "--axis sigma_clf --grid 0,0.5,0.9 --seeds 0,1 --jobs 2 --output-dir " +
                            dir.string());
    INFO(r.output);
    REQUIRE(r.code == 0);
    const std::string rows = slurp(dir / "sweep.csv");
    CHECK(rows.rfind("sigma_clf,seed,accuracy\n", 0) == 0);
    CHECK(line_count(rows) == 1 + 3 * 2);
    CHECK(line_count(slurp(dir / "sweep_summary.csv")) == 1 + 3);
    CHECK(r.output.find("best sigma_clf = ") != std::string::npos);

    const RunResult bad = run(kSmall + "sweep --axis learning_rate --grid 0.1 --output-dir " + (scratch() / "sweep_bad").string());
    CHECK(bad.code == 2);
    CHECK(bad.output.find("unknown sweep axis") != std::string::npos);
    CHECK_FALSE(fs::exists(scratch() / "sweep_bad"));
}

TEST_CASE("cli: exit codes", "[cli]") {
    CHECK(run("--no-env train --sigma-clf 2 --output-dir " + (scratch() / "never").string()).code == 2);
    CHECK_FALSE(fs::exists(scratch() / "never"));
    CHECK(run("--no-env --set train.alpah=1 train").code == 2);
    CHECK(run("--no-env frobnicate").code == 2);
    CHECK(run("--no-env train --eda sideways").code == 2);
    CHECK(run("--no-env eval --checkpoint " + (scratch() / "missing.json").string()).code == 3);
    CHECK(run("--no-env train --train-manifest " + (scratch() / "missing.manifest").string()).code == 3);
    CHECK(run("--help").code == 0);

    // A non-finite input sample aborts training with the numeric exit code.
    const fs::path data = scratch() / "nan_data";
    REQUIRE(run(kSmall + "gen-data --output-dir " + data.string()).code == 0);
    DatasetManifest m = read_manifest(data / "target_train.manifest");
    m.records[3].locator = "vec:nan" + m.records[3].locator.substr(m.records[3].locator.find(','));
    write_manifest(data / "poisoned.manifest", m);
    const RunResult nan = run(kSmall + "train " + kShortTrain + "--train-manifest " + (data / "poisoned.manifest").string() +
                              " --aux-manifest " + (data / "aux.manifest").string() + " --output-dir " + (scratch() / "nan_run").string());
    CHECK(nan.code == 4);
    CHECK(nan.output.find("epoch 0 batch ") != std::string::npos);
}
