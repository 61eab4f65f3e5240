#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

#include "smx/config.hpp"
#include "smx/gradcheck.hpp"
#include "smx/io.hpp"
#include "smx/synth.hpp"
#include "smx/train.hpp"

using namespace smx;

namespace {

std::string tmp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "smx_harness_tests" / name;
    std::filesystem::create_directories(dir);
    return dir.string();
}

/// Small pyramid that trains in about a second.
RunConfig tiny_run(const std::string& out) {
    RunConfig rc;
    rc.side = 8;
    rc.channels = {4, 4, 8, 8};
    rc.heads = {1, 2, 2, 4};
    rc.blocks = {1, 1, 1, 1};
    rc.volumes = 2;
    rc.batch = 2;
    rc.steps = 3;
    rc.log_every = 2;
    rc.lr = 1e-3;
    rc.seed = 11;
    rc.out_dir = out;
    return rc;
}

int run_cli(const std::string& args, std::string* captured = nullptr) {
    static int counter = 0;
    const std::string outfile = tmp_dir("cli") + "/out" + std::to_string(counter++) + ".txt";
    const std::string cmd = std::string(SMX_CLI_PATH) + " " + args + " > " + outfile + " 2>&1";
    const int status = std::system(cmd.c_str());
    if (captured) {
        std::ifstream in(outfile);
        std::stringstream ss;
        ss << in.rdbuf();
        *captured = ss.str();
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp_text(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("dataset generation is deterministic in the seed") {
    SynthSpec sp;
    sp.side = 16;
    sp.count = 3;
    const Dataset a = synth_dataset(sp, 5);
    const Dataset b = synth_dataset(sp, 5);
    const Dataset c = synth_dataset(sp, 6);
    REQUIRE(a.items.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
        CHECK(a.items[i].vol == b.items[i].vol);
        CHECK(a.items[i].mask == b.items[i].mask);
    }
    bool any_diff = false;
    for (size_t i = 0; i < 3; ++i)
        if (a.items[i].vol != c.items[i].vol) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("generated samples have bounded intensities and nonempty masks") {
    SynthSpec sphere;
    sphere.side = 16;
    sphere.count = 4;
    for (const auto& item : synth_dataset(sphere, 9).items) {
        int64_t fg = 0;
        for (uint8_t v : item.mask) fg += v != 0;
        CHECK(fg > 0);
        for (float v : item.vol) {
            CHECK(v >= 0.f);
            CHECK(v <= 1.f);
        }
    }

    SynthSpec blobs;
    blobs.side = 16;
    blobs.count = 3;
    blobs.classes = 3;
    blobs.multi_blob = true;
    for (const auto& item : synth_dataset(blobs, 9).items) {
        std::array<int64_t, 3> per_class{};
        for (uint8_t v : item.mask) {
            REQUIRE(v < 3);
            ++per_class[v];
        }
        CHECK(per_class[1] > 0);  // every foreground class present
        CHECK(per_class[2] > 0);
    }
}

TEST_CASE("sphere voxel count tracks the analytic ball") {
    std::mt19937_64 rng(4);
    const Sample s = sphere_sample(32, {16.0, 16.0, 16.0}, 8.0, rng);
    int64_t count = 0;
    for (uint8_t v : s.mask) count += v != 0;
    const double analytic = 4.0 / 3.0 * 3.14159265358979323846 * 8.0 * 8.0 * 8.0;
    CHECK(std::abs(static_cast<double>(count) - analytic) <= 0.2 * analytic);
}

TEST_CASE("config text parses defaults and overrides") {
    const RunConfig d = parse_config_text("");
    CHECK(d.side == 32);
    CHECK(d.batch == 4);
    CHECK(d.steps == 300);
    CHECK(d.lr == 5e-4);
    CHECK(d.channels == std::array<int64_t, 4>{16, 32, 64, 128});

    const RunConfig rc = parse_config_text(
        "# comment line\n"
        "task = multi-blob\n"
        "side = 16   # trailing comment\n"
        "batch = 2\n"
        "steps = 7\n"
        "volumes = 3\n"
        "classes = 3\n"
        "lr = 0.001\n"
        "seed = 42\n"
        "log_every = 5\n"
        "precision = f64\n"
        "out = /tmp/somewhere\n"
        "ases = spatial-only\n"
        "skip = catskip\n"
        "ablate = no-mixing\n"
        "channels = 4, 8, 16, 32\n"
        "heads = 1,2,4,8\n"
        "blocks = 1,1,1,1\n"
        "window = 2\n");
    CHECK(rc.task == "multi-blob");
    CHECK(rc.side == 16);
    CHECK(rc.steps == 7);
    CHECK(rc.classes == 3);
    CHECK(rc.seed == 42);
    CHECK(rc.precision == "f64");
    CHECK(rc.ases == AsesMode::SpatialOnly);
    CHECK(rc.skip == SkipKind::CatSkip);
    CHECK(rc.ablate == BlockAblation::NoMixing);
    CHECK(rc.channels == std::array<int64_t, 4>{4, 8, 16, 32});
    CHECK(rc.window == 2);
}

TEST_CASE("config parser rejects bad input") {
    CHECK_THROWS_WITH(parse_config_text("speed = 3\n"),
                      Catch::Matchers::ContainsSubstring("unknown config key 'speed'"));
    CHECK_THROWS_WITH(parse_config_text("side = 8\nside = 16\n"),
                      Catch::Matchers::ContainsSubstring("repeated"));
    CHECK_THROWS_AS(parse_config_text("side = eight\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("lr = fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("channels = 1,2,3\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("channels = 1,2,3,4,5\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("ases = sometimes\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("precision = f16\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("task = spirals\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("just a line\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("side =\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("lr = -1\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("batch = 0\n"), ConfigError);
}

TEST_CASE("run config maps onto the pyramid") {
    RunConfig rc = tiny_run("unused");
    const PyramidConfig cfg = pyramid_of(rc);
    CHECK(cfg.side == 8);
    CHECK(cfg.out_channels == 2);
    CHECK(cfg.stages[0].channels == 4);
    CHECK(cfg.stages[3].heads == 4);
    CHECK(cfg.stages[1].window == 4);

    rc.task = "multi-blob";
    rc.classes = 3;
    CHECK(pyramid_of(rc).out_channels == 3);

    rc.side = 20;  // not divisible by the deepest stage
    CHECK_THROWS_AS(pyramid_of(rc), ConfigError);
}

TEST_CASE("segmentation loss matches a hand computation") {
    Graph<double> g;
    auto logits = from_values<double>({2, 2, 1, 2}, {0.3, -0.2, 1.1, 0.4, -0.6, 0.9, 0.0, 0.0});
    const std::vector<uint8_t> labels = {0, 1, 1, 0};
    const double got = segmentation_loss(g, logits, labels)->data[0];

    // Independent arithmetic, scalar style.
    const double eps = 1e-5;
    double ce = 0, inter = 0, psum = 0;
    int fg = 0;
    const double raw[4][2] = {{0.3, -0.2}, {1.1, 0.4}, {-0.6, 0.9}, {0.0, 0.0}};
    for (int i = 0; i < 4; ++i) {
        const double z = std::exp(raw[i][0]) + std::exp(raw[i][1]);
        const double p1 = std::exp(raw[i][1]) / z;
        const double py = labels[i] ? p1 : 1.0 - p1;
        ce += -std::log(py) / 4.0;
        psum += p1;
        if (labels[i]) {
            inter += p1;
            ++fg;
        }
    }
    const double dice_soft = (2.0 * inter + eps) / (psum + fg + eps);
    const double want = 0.5 * ((1.0 - dice_soft) + ce);
    CHECK(got == Catch::Approx(want).epsilon(1e-12));
}

TEST_CASE("segmentation loss is near zero for confident correct logits") {
    Graph<double> g;
    std::vector<double> v(16, 0.0);
    std::vector<uint8_t> labels(8);
    for (int i = 0; i < 8; ++i) {
        labels[static_cast<size_t>(i)] = i % 3 == 0 ? 1 : 0;
        v[static_cast<size_t>(2 * i + labels[static_cast<size_t>(i)])] = 20.0;
    }
    auto logits = from_values<double>({8, 2}, v);
    CHECK(segmentation_loss(g, logits, labels)->data[0] < 1e-3);
}

TEST_CASE("segmentation loss gradients match finite differences") {
    ParamRegistry<double> reg;
    auto logits = reg.param("logits", {4, 2});
    logits->data = {0.3, -0.2, 1.1, 0.4, -0.6, 0.9, 0.2, -0.1};
    const std::vector<uint8_t> labels = {0, 1, 1, 0};
    {
        Graph<double> g;
        g.backward(segmentation_loss(g, logits, labels));
    }
    auto loss = [&]() {
        Graph<double> g(false);
        return segmentation_loss(g, logits, labels)->data[0];
    };
    const FdReport rep = fd_audit<double>(reg, loss);
    CHECK(rep.probes == 8);
    CHECK(rep.worst < 1e-7);
}

TEST_CASE("segmentation loss validates labels and sizes") {
    Graph<double> g;
    auto logits = from_values<double>({2, 2}, {0.0, 0.0, 0.0, 0.0});
    CHECK_THROWS_AS(segmentation_loss(g, logits, {0}), ShapeError);
    CHECK_THROWS_AS(segmentation_loss(g, logits, {0, 5}), std::invalid_argument);
}

TEST_CASE("tiny training run is deterministic and logs in a fixed format") {
    const RunConfig rc = tiny_run(tmp_dir("det_a"));
    const TrainResult a = train_loop<float>(rc);
    RunConfig rc2 = rc;
    rc2.out_dir = tmp_dir("det_b");
    const TrainResult b = train_loop<float>(rc2);

    REQUIRE(a.lines.size() == b.lines.size());
    CHECK(a.lines == b.lines);
    // steps 0,1,2 each log a loss; dice fires at step 1 (period) and 2 (last).
    REQUIRE(a.lines.size() == 5);
    CHECK(a.lines[0].rfind("step=0 loss=", 0) == 0);
    CHECK(a.lines[2].rfind("step=1 dice=0.", 0) == 0);
    CHECK(a.lines[4].rfind("step=2 dice=0.", 0) == 0);

    CHECK(std::filesystem::exists(rc.out_dir + "/train.log"));
    CHECK(std::filesystem::exists(rc.out_dir + "/final.smck"));
    CHECK(std::filesystem::exists(rc.out_dir + "/best.smck"));
    std::string joined;
    for (const auto& line : a.lines) joined += line + "\n";
    CHECK(slurp_text(rc.out_dir + "/train.log") == joined);
}

TEST_CASE("training aborts with a named op on numeric blowup") {
    RunConfig rc = tiny_run(tmp_dir("blowup"));
    rc.lr = 1e28;
    rc.steps = 4;
    try {
        train_loop<float>(rc);
        FAIL("expected a numeric failure");
    } catch (const NumericError& e) {
        CHECK_FALSE(e.op_kind.empty());
    }
}

TEST_CASE("trained model evaluates within metric bounds") {
    RunConfig rc = tiny_run(tmp_dir("evalrun"));
    const TrainResult res = train_loop<float>(rc);
    Model<float> m = build_model<float>(pyramid_of(rc), rc.seed);
    load_checkpoint(res.final_ckpt, m.reg);

    SynthSpec sp;
    sp.side = rc.side;
    sp.count = rc.volumes;
    const Dataset ds = synth_dataset(sp, rc.seed + 1);
    const double d = dataset_dice(m, ds);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    const CaseReport rep = eval_case(m, ds.items[0]);
    CHECK(rep.dice >= 0.0);
    CHECK(rep.dice <= 1.0);
    CHECK(rep.jaccard <= rep.dice + 1e-15);
}

// ---------------------------------------------------------------------------
// Command-line surface, exercised through the real binary.

TEST_CASE("cli rejects bad usage with the config exit code") {
    CHECK(run_cli("train --ases sometimes --out " + tmp_dir("cli_bad")) == 2);
    CHECK(run_cli("train --config /nonexistent.cfg") == 2);
    CHECK(run_cli("train --frobnicate") == 2);
    CHECK(run_cli("") == 2);  // missing subcommand

    const std::string cfg = tmp_dir("cli_bad") + "/bad.cfg";
    std::ofstream(cfg) << "speed = 3\n";
    std::string out;
    CHECK(run_cli("train --config " + cfg, &out) == 2);
    CHECK(out.find("unknown config key") != std::string::npos);
}

TEST_CASE("cli synth writes readable volume files") {
    const std::string dir = tmp_dir("cli_synth");
    std::string out;
    const std::string cfg = dir + "/synth.cfg";
    std::ofstream(cfg) << "side = 16\nvolumes = 2\n";
    REQUIRE(run_cli("synth --config " + cfg + " --out " + dir + " --seed 3", &out) == 0);
    CHECK(out.find("count=2") != std::string::npos);
    const Volume v = read_volume(dir + "/vol_000.smvx");
    CHECK(v.dtype == VolDType::F32);
    CHECK(v.dims == std::vector<int64_t>{16, 16, 16});
    const Volume mk = read_volume(dir + "/mask_001.smvx");
    CHECK(mk.dtype == VolDType::U8);
    CHECK(mk.u.size() == 16u * 16u * 16u);
}

TEST_CASE("cli train and eval run a tiny config end to end") {
    const std::string dir_a = tmp_dir("cli_train_a");
    const std::string dir_b = tmp_dir("cli_train_b");
    const std::string cfg = tmp_dir("cli_train_a") + "/run.cfg";
    std::ofstream(cfg) << "side = 8\nchannels = 4,4,8,8\nheads = 1,2,2,4\nblocks = 1,1,1,1\n"
                       << "steps = 2\nvolumes = 2\nbatch = 2\nlog_every = 2\nlr = 0.001\n";
    REQUIRE(run_cli("train --config " + cfg + " --out " + dir_a + " --seed 7") == 0);
    REQUIRE(run_cli("train --config " + cfg + " --out " + dir_b + " --seed 7") == 0);
    CHECK(slurp_text(dir_a + "/train.log") == slurp_text(dir_b + "/train.log"));
    CHECK(!slurp_text(dir_a + "/train.log").empty());

    std::string out;
    REQUIRE(run_cli("eval --config " + cfg + " --out " + dir_a + " --seed 7", &out) == 0);
    CHECK(out.find("aggregate dice=") != std::string::npos);
    CHECK(out.find("case=0 dice=") != std::string::npos);
}

TEST_CASE("cli analyze audits the desk defaults") {
    std::string out;
    REQUIRE(run_cli("analyze", &out) == 0);
    CHECK(out.find("param_audit=pass") != std::string::npos);
    CHECK(out.find("total_params=1574969") != std::string::npos);
    CHECK(out.find("instantiated_params=1574969") != std::string::npos);
}

TEST_CASE("cli gradcheck passes on its default tiny model") {
    std::string out;
    REQUIRE(run_cli("gradcheck --seed 2", &out) == 0);
    CHECK(out.find("gradcheck=pass") != std::string::npos);
    CHECK(out.find("primitive=") != std::string::npos);
    CHECK(out.find("site=") != std::string::npos);
}
