#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

#include "smx/complexity.hpp"
#include "smx/gradcheck.hpp"
#include "smx/train.hpp"

namespace {

using namespace smx;

struct Flags {
    std::string config;
    std::string out;
    long long seed = -1;
    std::string precision, ablate, skip, ases;
    std::string checkpoint;  // eval only
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.config, "key=value run configuration file");
    cmd->add_option("--seed", f.seed, "override the run seed")->check(CLI::NonNegativeNumber);
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--precision", f.precision, "f32 or f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--ablate", f.ablate,
                    "no-shuffle|single-view|no-mixing|dense-mlp|mixer-first|no-ape-s|no-ape-v");
    cmd->add_option("--skip", f.skip, "crossmerge|catlinear|catskip|crossskip|catcrossskip");
    cmd->add_option("--ases", f.ases, "on|off|spatial-only|channel-only");
}

RunConfig resolve(const Flags& f) {
    RunConfig rc = f.config.empty() ? RunConfig{} : parse_config_file(f.config);
    if (f.seed >= 0) rc.seed = static_cast<uint64_t>(f.seed);
    if (!f.out.empty()) rc.out_dir = f.out;
    if (!f.precision.empty()) rc.precision = f.precision;
    if (!f.ablate.empty()) rc.ablate = parse_ablation(f.ablate);
    if (!f.skip.empty()) rc.skip = parse_skip(f.skip);
    if (!f.ases.empty()) rc.ases = parse_ases(f.ases);
    return rc;
}

int run_train(const RunConfig& rc) {
    const TrainResult res = rc.precision == "f64" ? train_loop<double>(rc, &std::cout)
                                                  : train_loop<float>(rc, &std::cout);
    std::printf("best_dice=%.6f\n", res.best_dice);
    std::printf("final_dice=%.6f\n", res.final_dice);
    std::printf("checkpoint=%s\n", res.final_ckpt.c_str());
    return 0;
}

template <typename T>
int run_eval_typed(const RunConfig& rc, const std::string& ckpt) {
    Model<T> m = build_model<T>(pyramid_of(rc), rc.seed);
    load_checkpoint(ckpt, m.reg);
    SynthSpec sp;
    sp.side = rc.side;
    sp.count = rc.volumes;
    sp.classes = rc.classes;
    sp.multi_blob = rc.task == "multi-blob";
    const Dataset ds = synth_dataset(sp, rc.seed + 1);

    std::printf("%-5s %-8s %-8s %-10s %-8s %-8s\n", "case", "dice", "jaccard", "precision",
                "recall", "hd95");
    double sd = 0, sj = 0, sp_ = 0, sr = 0, sh = 0;
    int64_t hd_cases = 0;
    for (size_t i = 0; i < ds.items.size(); ++i) {
        const CaseReport r = eval_case(m, ds.items[i]);
        sd += r.dice;
        sj += r.jaccard;
        sp_ += r.precision;
        sr += r.recall;
        char hd[32];
        if (r.hd95_defined) {
            ++hd_cases;
            sh += r.hd95;
            std::snprintf(hd, sizeof(hd), "%.4f", r.hd95);
        } else {
            std::snprintf(hd, sizeof(hd), "na");
        }
        std::printf("%-5zu %-8.4f %-8.4f %-10.4f %-8.4f %-8s\n", i, r.dice, r.jaccard, r.precision,
                    r.recall, hd);
        std::printf("case=%zu dice=%.6f jaccard=%.6f precision=%.6f recall=%.6f hd95=%s\n", i,
                    r.dice, r.jaccard, r.precision, r.recall, hd);
    }
    const auto n = static_cast<double>(ds.items.size());
    std::printf("aggregate dice=%.6f jaccard=%.6f precision=%.6f recall=%.6f", sd / n, sj / n,
                sp_ / n, sr / n);
    if (hd_cases > 0)
        std::printf(" hd95=%.6f\n", sh / static_cast<double>(hd_cases));
    else
        std::printf(" hd95=na\n");
    return 0;
}

int run_eval(const RunConfig& rc, std::string ckpt) {
    if (ckpt.empty()) ckpt = rc.out_dir + "/final.smck";
    return rc.precision == "f64" ? run_eval_typed<double>(rc, ckpt)
                                 : run_eval_typed<float>(rc, ckpt);
}

/// Small double-precision model for the whole-network audit; flag-selected
/// gates, skips, and ablations are honoured, geometry stays tiny.
RunConfig gradcheck_defaults(const Flags& f) {
    RunConfig rc = resolve(f);
    if (f.config.empty()) {
        rc.side = 8;
        rc.channels = {4, 4, 8, 8};
        rc.heads = {1, 2, 2, 4};
        rc.blocks = {1, 1, 1, 1};
    }
    if (rc.side > 16) throw ConfigError("gradcheck needs side <= 16, got " + std::to_string(rc.side));
    return rc;
}

int run_gradcheck(const RunConfig& rc) {
    int failures = 0;
    const double prim_tol = 1e-6;
    for (auto& check : primitive_audit_table<double>()) {
        const double err = check.max_rel_err(1e-5);
        const bool ok = err < prim_tol;
        if (!ok) ++failures;
        std::printf("primitive=%s rel=%.3e %s\n", check.name.c_str(), err, ok ? "ok" : "FAIL");
    }

    const Model<double> m = build_model<double>(pyramid_of(rc), rc.seed);
    SynthSpec sp;
    sp.side = rc.side;
    sp.count = 1;
    sp.classes = rc.classes;
    sp.multi_blob = rc.task == "multi-blob";
    const Dataset ds = synth_dataset(sp, rc.seed + 1);
    auto x = make_tensor<double>({1, rc.side, rc.side, rc.side, 1});
    for (size_t i = 0; i < ds.items[0].vol.size(); ++i)
        x->data[i] = static_cast<double>(ds.items[0].vol[i]);

    {
        Graph<double> g;
        g.backward(mean_all(g, network_forward(g, x, m, true)));
    }
    auto loss = [&]() {
        Graph<double> g(false);
        const auto out = network_forward(g, x, m, true);
        double acc = 0;
        for (const double v : out->data) acc += v;
        return acc / static_cast<double>(out->numel());
    };
    FdOptions opt;
    opt.tol = 1e-4;
    opt.max_probes_per_tensor = 2;
    const FdReport rep = fd_audit<double>(m.reg, loss, opt);
    for (const auto& s : rep.sites)
        std::printf("site=%s[%lld] analytic=%.6e numeric=%.6e rel=%.3e\n", s.tensor.c_str(),
                    static_cast<long long>(s.index), s.analytic, s.numeric, s.rel_err);
    std::printf("probes=%lld worst=%.3e at=%s\n", static_cast<long long>(rep.probes), rep.worst,
                rep.worst_site.c_str());
    for (const auto& s : rep.sites)
        if (s.rel_err > opt.tol) {
            ++failures;
            std::printf("FAIL site=%s[%lld] rel=%.3e\n", s.tensor.c_str(),
                        static_cast<long long>(s.index), s.rel_err);
        }
    if (failures > 0) {
        std::printf("gradcheck=fail failures=%d\n", failures);
        return 3;
    }
    std::printf("gradcheck=pass\n");
    return 0;
}

int run_analyze(const RunConfig& rc) {
    const PyramidConfig cfg = pyramid_of(rc);
    const CostReport rep = build_cost_report(cfg);
    std::printf("%-6s %-5s %-7s %-12s %-12s %-12s %-12s %-14s %-12s\n", "stage", "side", "blocks",
                "wmsa", "global", "axial", "dense", "stage_flops", "params");
    for (int s = 0; s < 4; ++s) {
        const auto& row = rep.stages[static_cast<size_t>(s)];
        std::printf("%-6d %-5lld %-7lld %-12lld %-12lld %-12lld %-12lld %-14lld %-12lld\n", s + 1,
                    static_cast<long long>(row.side), static_cast<long long>(row.blocks),
                    static_cast<long long>(row.windowed_attention),
                    static_cast<long long>(row.global_attention),
                    static_cast<long long>(row.axial_mixing),
                    static_cast<long long>(row.dense_mixing),
                    static_cast<long long>(row.stage_flops),
                    static_cast<long long>(row.stage_params));
        std::printf("stage%d_flops=%lld\n", s + 1, static_cast<long long>(row.stage_flops));
        std::printf("stage%d_params=%lld\n", s + 1, static_cast<long long>(row.stage_params));
    }
    std::printf("plumbing_params=%lld\n", static_cast<long long>(rep.plumbing_params));
    std::printf("total_flops=%lld\n", static_cast<long long>(rep.total_flops));
    std::printf("total_params=%lld\n", static_cast<long long>(rep.total_params));

    const Model<float> m = build_model<float>(cfg, rc.seed);
    const ParamAudit audit = audit_params(m);
    std::printf("instantiated_params=%lld\n", static_cast<long long>(audit.instantiated));
    for (const auto& line : audit.mismatches) std::printf("mismatch=%s\n", line.c_str());
    std::printf("param_audit=%s\n", audit.passed ? "pass" : "fail");
    return audit.passed ? 0 : 4;
}

int run_synth(const RunConfig& rc) {
    SynthSpec sp;
    sp.side = rc.side;
    sp.count = rc.volumes;
    sp.classes = rc.classes;
    sp.multi_blob = rc.task == "multi-blob";
    const Dataset ds = synth_dataset(sp, rc.seed + 1);
    std::filesystem::create_directories(rc.out_dir);
    for (size_t i = 0; i < ds.items.size(); ++i) {
        char name[64];
        Volume vol;
        vol.dtype = VolDType::F32;
        vol.dims = {rc.side, rc.side, rc.side};
        vol.f = ds.items[i].vol;
        std::snprintf(name, sizeof(name), "/vol_%03zu.smvx", i);
        write_volume(rc.out_dir + name, vol);
        std::printf("volume=%s\n", (rc.out_dir + name).c_str());

        Volume mask;
        mask.dtype = VolDType::U8;
        mask.dims = {rc.side, rc.side, rc.side};
        mask.u = ds.items[i].mask;
        std::snprintf(name, sizeof(name), "/mask_%03zu.smvx", i);
        write_volume(rc.out_dir + name, mask);
        std::printf("mask=%s\n", (rc.out_dir + name).c_str());
    }
    std::printf("count=%zu\n", ds.items.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3d shuffle-mixer segmentation workbench"};
    app.require_subcommand(1);

    Flags f;
    auto* train = app.add_subcommand("train", "train on the synthetic task");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    auto* analyze = app.add_subcommand("analyze", "cost formulas and parameter audit");
    auto* synth = app.add_subcommand("synth", "write synthetic volumes to disk");
    for (CLI::App* cmd : {train, eval, gradcheck, analyze, synth}) add_common(cmd, f);
    eval->add_option("checkpoint", f.checkpoint, "checkpoint path (default OUT/final.smck)");

    try {
        app.parse(argc, argv);
        if (train->parsed()) return run_train(resolve(f));
        if (eval->parsed()) return run_eval(resolve(f), f.checkpoint);
        if (gradcheck->parsed()) return run_gradcheck(gradcheck_defaults(f));
        if (analyze->parsed()) return run_analyze(resolve(f));
        if (synth->parsed()) return run_synth(resolve(f));
        return 2;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
