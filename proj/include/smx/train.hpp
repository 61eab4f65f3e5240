#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "smx/config.hpp"
#include "smx/io.hpp"
#include "smx/metrics.hpp"
#include "smx/synth.hpp"

namespace smx {

/// 0.5 * (1 - soft Dice) + 0.5 * voxel cross-entropy. Logits may carry any
/// leading geometry as long as the last axis is the class axis; labels are
/// flat voxel classes in matching row-major order. The Dice term is the mean
/// of per-volume soft Dice over `volumes` equal row chunks, matching how the
/// reported metric averages; cross-entropy averages per voxel.
template <typename T>
TensorPtr<T> segmentation_loss(Graph<T>& g, const TensorPtr<T>& logits,
                               const std::vector<uint8_t>& labels, int64_t volumes = 1) {
    const int64_t k = logits->dim(logits->rank() - 1);
    const int64_t n = logits->numel() / k;
    if (static_cast<int64_t>(labels.size()) != n)
        throw ShapeError("segmentation_loss: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(n) + " voxels");
    if (volumes < 1 || n % volumes != 0)
        throw ShapeError("segmentation_loss: " + std::to_string(n) + " voxels not split by " +
                         std::to_string(volumes) + " volumes");
    const T eps = T(1e-5);

    auto onehot = make_tensor<T>({n, k});
    auto fg_onehot = make_tensor<T>({n, k});
    auto fg_cols = make_tensor<T>({n, k});
    const int64_t per = n / volumes;
    std::vector<int64_t> fg_count(static_cast<size_t>(volumes), 0);
    for (int64_t i = 0; i < n; ++i) {
        const auto lab = static_cast<int64_t>(labels[static_cast<size_t>(i)]);
        if (lab < 0 || lab >= k)
            throw std::invalid_argument("segmentation_loss: label " + std::to_string(lab) +
                                        " outside " + std::to_string(k) + " classes");
        onehot->data[static_cast<size_t>(i * k + lab)] = T(1);
        if (lab > 0) {
            fg_onehot->data[static_cast<size_t>(i * k + lab)] = T(1);
            ++fg_count[static_cast<size_t>(i / per)];
        }
        for (int64_t c = 1; c < k; ++c) fg_cols->data[static_cast<size_t>(i * k + c)] = T(1);
    }

    auto flat = reshape(g, logits, {n, k});
    auto lp = log_softmax(g, flat);
    auto p = softmax(g, flat);
    auto ce = scale(g, sum_all(g, mul(g, lp, onehot)), T(-1.0 / static_cast<double>(n)));

    auto inter_rows = mul(g, p, fg_onehot);
    auto psum_rows = mul(g, p, fg_cols);
    const std::vector<int64_t> chunk_rows(static_cast<size_t>(volumes), per);
    const auto inter_chunks =
        volumes == 1 ? std::vector<TensorPtr<T>>{inter_rows} : split(g, inter_rows, 0, chunk_rows);
    const auto psum_chunks =
        volumes == 1 ? std::vector<TensorPtr<T>>{psum_rows} : split(g, psum_rows, 0, chunk_rows);
    TensorPtr<T> dice_sum;
    for (int64_t v = 0; v < volumes; ++v) {
        const auto vi = static_cast<size_t>(v);
        auto d = div(g, add_const(g, scale(g, sum_all(g, inter_chunks[vi]), T(2)), eps),
                     add_const(g, sum_all(g, psum_chunks[vi]),
                               static_cast<T>(fg_count[vi]) + eps));
        dice_sum = v == 0 ? d : add(g, dice_sum, d);
    }
    auto dice = scale(g, dice_sum, T(1) / static_cast<T>(volumes));
    auto dice_loss = add_const(g, scale(g, dice, T(-1)), T(1));
    return scale(g, add(g, dice_loss, ce), T(0.5));
}

/// Raw eval-mode network output for one volume; used for bitwise comparisons.
template <typename T>
std::vector<T> forward_values(const Model<T>& m, const std::vector<float>& vol) {
    const int64_t side = m.cfg.side;
    Graph<T> g(false);
    auto x = make_tensor<T>({1, side, side, side, m.cfg.in_channels});
    if (static_cast<int64_t>(vol.size()) != x->numel())
        throw ShapeError("forward_values: volume has " + std::to_string(vol.size()) +
                         " voxels, model expects " + std::to_string(x->numel()));
    for (size_t i = 0; i < vol.size(); ++i) x->data[i] = static_cast<T>(vol[i]);
    return network_forward(g, x, m, false)->data;
}

/// Eval-mode argmax labels (ties resolve to the lowest class index).
template <typename T>
std::vector<uint8_t> predict_labels(const Model<T>& m, const std::vector<float>& vol) {
    const auto out = forward_values(m, vol);
    const auto k = static_cast<size_t>(m.cfg.out_channels);
    std::vector<uint8_t> labels(out.size() / k);
    for (size_t i = 0; i < labels.size(); ++i) {
        size_t best = 0;
        for (size_t c = 1; c < k; ++c)
            if (out[i * k + c] > out[i * k + best]) best = c;
        labels[i] = static_cast<uint8_t>(best);
    }
    return labels;
}

namespace detail {

inline std::vector<uint8_t> foreground(const std::vector<uint8_t>& labels) {
    std::vector<uint8_t> fg(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) fg[i] = labels[i] > 0 ? 1 : 0;
    return fg;
}

}  // namespace detail

/// Mean foreground Dice over a dataset.
template <typename T>
double dataset_dice(const Model<T>& m, const Dataset& ds) {
    double acc = 0;
    for (const auto& item : ds.items) {
        const auto pred = detail::foreground(predict_labels(m, item.vol));
        acc += dice(pred, detail::foreground(item.mask));
    }
    return acc / static_cast<double>(ds.items.size());
}

struct CaseReport {
    double dice = 0, jaccard = 0, precision = 0, recall = 0;
    double hd95 = 0;
    bool hd95_defined = false;
};

template <typename T>
CaseReport eval_case(const Model<T>& m, const Sample& item) {
    const int64_t side = m.cfg.side;
    const auto pred = detail::foreground(predict_labels(m, item.vol));
    const auto truth = detail::foreground(item.mask);
    const Confusion c = confusion(pred, truth);
    CaseReport rep;
    rep.dice = dice(c);
    rep.jaccard = jaccard(c);
    rep.precision = precision(c);
    rep.recall = recall(c);
    MaskVolume mp = make_mask({side, side, side});
    MaskVolume mt = make_mask({side, side, side});
    mp.v = pred;
    mt.v = truth;
    if (!surface_voxels(mp).empty() && !surface_voxels(mt).empty()) {
        rep.hd95 = hd95(mp, mt);
        rep.hd95_defined = true;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
    std::vector<std::string> lines;  // exact log lines, in emission order
    double final_dice = 0;
    double best_dice = -1;  // any first evaluation beats it
    std::string final_ckpt, best_ckpt;
};

namespace detail {

inline std::string fmt_loss_line(int64_t step, double loss) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "step=%lld loss=%.9e", static_cast<long long>(step), loss);
    return buf;
}

inline std::string fmt_dice_line(int64_t step, double d) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "step=%lld dice=%.6f", static_cast<long long>(step), d);
    return buf;
}

}  // namespace detail

/// Deterministic full loop: fixed volume rotation, one Adam step per batch,
/// periodic train-set Dice, best and final checkpoints under the run
/// directory. Non-finite values surface as NumericError from the op concerned.
template <typename T>
TrainResult train_loop(const RunConfig& rc, std::ostream* echo = nullptr) {
    const PyramidConfig cfg = pyramid_of(rc);
    const Model<T> m = build_model<T>(cfg, rc.seed);
    SynthSpec sp;
    sp.side = rc.side;
    sp.count = rc.volumes;
    sp.classes = rc.classes;
    sp.multi_blob = rc.task == "multi-blob";
    const Dataset ds = synth_dataset(sp, rc.seed + 1);  // data stream distinct from init

    AdamState<T> adam;
    adam.lr = static_cast<T>(rc.lr);
    // Runs here are a few hundred steps; the stock 0.999 second-moment decay
    // averages over ~1000 steps, so late steps shrink against stale-large v.
    adam.beta2 = static_cast<T>(0.99);
    const auto params = m.reg.learnable();
    adam.init(params);

    std::filesystem::create_directories(rc.out_dir);
    TrainResult res;
    res.best_ckpt = rc.out_dir + "/best.smck";
    res.final_ckpt = rc.out_dir + "/final.smck";
    auto emit = [&](const std::string& line) {
        res.lines.push_back(line);
        if (echo) *echo << line << "\n";
    };

    const auto vox = static_cast<size_t>(rc.side * rc.side * rc.side);
    for (int64_t step = 0; step < rc.steps; ++step) {
        Graph<T> g;
        auto x = make_tensor<T>({rc.batch, rc.side, rc.side, rc.side, 1});
        std::vector<uint8_t> labels(static_cast<size_t>(rc.batch) * vox);
        for (int64_t b = 0; b < rc.batch; ++b) {
            const auto& item =
                ds.items[static_cast<size_t>((step * rc.batch + b) %
                                             static_cast<int64_t>(ds.items.size()))];
            for (size_t i = 0; i < vox; ++i) {
                x->data[static_cast<size_t>(b) * vox + i] = static_cast<T>(item.vol[i]);
                labels[static_cast<size_t>(b) * vox + i] = item.mask[i];
            }
        }
        const auto loss = segmentation_loss(g, network_forward(g, x, m, true), labels, rc.batch);
        g.backward(loss);
        adam.step(params);
        emit(detail::fmt_loss_line(step, static_cast<double>(loss->data[0])));

        const bool last = step + 1 == rc.steps;
        if ((step + 1) % rc.log_every == 0 || last) {
            const double d = dataset_dice(m, ds);
            emit(detail::fmt_dice_line(step, d));
            if (d > res.best_dice) {
                res.best_dice = d;
                save_checkpoint(res.best_ckpt, m.reg);
            }
            if (last) res.final_dice = d;
        }
    }
    save_checkpoint(res.final_ckpt, m.reg);

    std::ofstream log(rc.out_dir + "/train.log", std::ios::trunc);
    for (const auto& line : res.lines) log << line << "\n";
    return res;
}

}  // namespace smx
