#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <vector>

#include "nanotfm/model.hpp"
#include "nanotfm/optim.hpp"
#include "nanotfm/prior.hpp"

namespace nanotfm {

template <class T>
TableBatch<T> cast_batch(const TableBatch<float>& b) {
    if constexpr (std::is_same_v<T, float>) {
        return b;
    } else {
        TableBatch<T> out;
        out.split = b.split;
        out.x = Tensor<T>::uninit(b.x.shape());
        out.y = Tensor<T>::uninit(b.y.shape());
        auto xs = b.x.data();
        auto xd = out.x.data();
        for (std::int64_t i = 0; i < b.x.numel(); ++i) xd[i] = static_cast<T>(xs[i]);
        auto ys = b.y.data();
        auto yd = out.y.data();
        for (std::int64_t i = 0; i < b.y.numel(); ++i) yd[i] = static_cast<T>(ys[i]);
        return out;
    }
}

// Cross-entropy over the test cells only (predictions exist only for rows
// past the split).
template <class T>
Tensor<T> batch_loss(const TableBatch<T>& batch, const ModelParameters<T>& params,
                     const ModelConfig& cfg) {
    Tensor<T> logits = forward(batch, params, cfg);  // B x T x K
    const std::int64_t b = logits.dim(0), t = logits.dim(1), k = logits.dim(2);
    const std::int64_t r = batch.y.dim(1);
    std::vector<std::int32_t> labels(static_cast<std::size_t>(b) * t);
    const auto yd = batch.y.data();
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < t; ++j)
            labels[i * t + j] = static_cast<std::int32_t>(
                std::llround(static_cast<double>(yd[i * r + batch.split + j])));
    return cross_entropy(reshape(logits, {b * t, k}), labels);
}

struct TrainResult {
    std::vector<double> loss_history;        // one entry per step
    std::vector<double> cumulative_seconds;  // training time only, same length
};

// Called with the step index, cumulative training seconds and the parameters
// holding the averaged iterate; evaluation/checkpoint time spent here does
// not count towards the training clock.
template <class T>
using SnapshotCallback =
    std::function<void(int step, double cumulative_seconds, ModelParameters<T>&)>;

// One optimizer step over one loader batch, accumulating gradients over
// micro-batches when cfg.micro_batch is smaller than the batch. Returns the
// loss (mean over all test cells of the batch).
template <class T>
double train_step(const TableBatch<T>& batch, ModelParameters<T>& params,
                  const ModelConfig& mcfg, ScheduleFreeAdamW<T>& opt,
                  const TrainConfig& tcfg) {
    opt.to_eval_point();
    params.zero_grad();
    const std::int64_t b = batch.x.dim(0);
    const std::int64_t mb =
        tcfg.micro_batch > 0 ? std::min<std::int64_t>(tcfg.micro_batch, b) : b;
    double loss = 0.0;
    for (std::int64_t off = 0; off < b; off += mb) {
        const std::int64_t len = std::min(mb, b - off);
        TableBatch<T> sub;
        sub.split = batch.split;
        if (len == b) {
            sub.x = batch.x;
            sub.y = batch.y;
        } else {
            sub.x = slice(batch.x, 0, off, len);
            sub.y = slice(batch.y, 0, off, len);
        }
        Tensor<T> l = scale(batch_loss(sub, params, mcfg),
                            static_cast<double>(len) / static_cast<double>(b));
        loss += static_cast<double>(l.item());
        backward(l);
    }
    if (!std::isfinite(loss))
        throw NumericError("non-finite loss at step " +
                           std::to_string(opt.step_count() + 1));
    if (tcfg.grad_clip > 0) {
        auto named = params.named();
        clip_grad_norm(named, tcfg.grad_clip);
    }
    opt.step();
    return loss;
}

// Full training run: num_steps batches from the source, schedule-free steps,
// loss and cumulative wall-clock recorded per step. Leaves the averaged
// iterate in params. snapshot_steps must be sorted ascending.
template <class T>
TrainResult train(ModelParameters<T>& params, const ModelConfig& mcfg,
                  BatchSource& source, const TrainConfig& tcfg,
                  ScheduleFreeAdamW<T>& opt,
                  const std::vector<int>& snapshot_steps = {},
                  const SnapshotCallback<T>& on_snapshot = nullptr) {
    mcfg.validate();
    tcfg.validate();
    TrainResult res;
    res.loss_history.reserve(tcfg.num_steps);
    res.cumulative_seconds.reserve(tcfg.num_steps);
    double cumulative = 0.0;
    std::size_t snap_i = 0;
    const int start_step = static_cast<int>(opt.step_count());
    while (snap_i < snapshot_steps.size() && snapshot_steps[snap_i] <= start_step)
        ++snap_i;

    for (int step = start_step + 1; step <= tcfg.num_steps; ++step) {
        const auto t0 = std::chrono::steady_clock::now();
        TableBatch<float> fb;
        if (!source.next(fb))
            throw IoError("data source exhausted at step " + std::to_string(step) +
                          " of " + std::to_string(tcfg.num_steps));
        TableBatch<T> batch = cast_batch<T>(fb);
        const double loss = train_step(batch, params, mcfg, opt, tcfg);
        cumulative +=
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.loss_history.push_back(loss);
        res.cumulative_seconds.push_back(cumulative);

        if (on_snapshot && snap_i < snapshot_steps.size() &&
            step == snapshot_steps[snap_i]) {
            ++snap_i;
            opt.write_averaged();
            on_snapshot(step, cumulative, params);
        }
    }
    opt.write_averaged();
    return res;
}

}  // namespace nanotfm
