// Training loop: loss recording, determinism, checkpoint resume, abort paths.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "nanotfm/checkpoint.hpp"
#include "nanotfm/train.hpp"

using namespace nanotfm;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.embedding_size = 8;
    c.num_attention_heads = 2;
    c.mlp_hidden_size = 16;
    c.num_layers = 1;
    c.num_outputs = 2;
    return c;
}

// deterministic in-memory source of easy, learnable tables: label = x0 > 0
class ToySource : public BatchSource {
public:
    ToySource(std::int64_t steps, std::int64_t batch, std::int64_t rows,
              std::int64_t cols, std::uint64_t seed, bool poison_step = false)
        : steps_(steps), batch_(batch), rows_(rows), cols_(cols), rng_(seed),
          poison_(poison_step) {}

    bool next(TableBatch<float>& out) override {
        if (done_ >= steps_) return false;
        ++done_;
        out.x = Tensor<float>::uninit({batch_, rows_, cols_});
        out.y = Tensor<float>::uninit({batch_, rows_});
        auto xd = out.x.data();
        auto yd = out.y.data();
        for (std::int64_t b = 0; b < batch_; ++b)
            for (std::int64_t r = 0; r < rows_; ++r) {
                float first = 0.0f;
                for (std::int64_t c = 0; c < cols_; ++c) {
                    const float v = static_cast<float>(rng_.normal());
                    xd[(b * rows_ + r) * cols_ + c] = v;
                    if (c == 0) first = v;
                }
                yd[b * rows_ + r] = first > 0 ? 1.0f : 0.0f;
            }
        if (poison_ && done_ == 2) xd[0] = std::numeric_limits<float>::quiet_NaN();
        out.split = rows_ / 2;
        drawn_ += batch_;
        return true;
    }
    std::int64_t datasets_drawn() const override { return drawn_; }

private:
    std::int64_t steps_, batch_, rows_, cols_;
    Rng rng_;
    bool poison_;
    std::int64_t done_ = 0, drawn_ = 0;
};

template <class T>
TrainResult run_toy(std::uint64_t seed, int steps, ModelParameters<T>* out_params,
                    int micro_batch = 0) {
    const ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.lr = 5e-3;
    tcfg.num_steps = steps;
    tcfg.batch_size = 4;
    tcfg.warmup_steps = 10;
    tcfg.micro_batch = micro_batch;
    tcfg.seed = seed;
    Rng rng(seed);
    auto params = ModelParameters<T>::init(mcfg, rng);
    ScheduleFreeAdamW<T> opt(params.named(), tcfg);
    ToySource src(steps, 4, 12, 3, seed);
    auto res = train<T>(params, mcfg, src, tcfg, opt);
    if (out_params) *out_params = std::move(params);
    return res;
}

}  // namespace

TEST_CASE("loss history has one entry per step and finite values") {
    auto res = run_toy<float>(1, 8, nullptr);
    CHECK(res.loss_history.size() == 8);
    CHECK(res.cumulative_seconds.size() == 8);
    for (double l : res.loss_history) CHECK(std::isfinite(l));
    for (std::size_t i = 1; i < res.cumulative_seconds.size(); ++i)
        CHECK(res.cumulative_seconds[i] >= res.cumulative_seconds[i - 1]);
}

TEST_CASE("two seeded runs produce bit-identical loss histories") {
    auto a = run_toy<float>(7, 10, nullptr);
    auto b = run_toy<float>(7, 10, nullptr);
    REQUIRE(a.loss_history.size() == b.loss_history.size());
    for (std::size_t i = 0; i < a.loss_history.size(); ++i)
        CHECK(a.loss_history[i] == b.loss_history[i]);

    ModelParameters<float> pa, pb;
    run_toy<float>(3, 6, &pa);
    run_toy<float>(3, 6, &pb);
    auto na = pa.named(), nb = pb.named();
    for (std::size_t i = 0; i < na.size(); ++i) {
        const auto da = na[i].tensor.data(), db = nb[i].tensor.data();
        for (std::size_t j = 0; j < da.size(); ++j) CHECK(da[j] == db[j]);
    }
}

TEST_CASE("training reduces the smoothed loss on an easy toy problem") {
    auto res = run_toy<float>(11, 160, nullptr);
    auto window = [&](std::size_t lo, std::size_t hi) {
        double s = 0;
        for (std::size_t i = lo; i < hi; ++i) s += res.loss_history[i];
        return s / (hi - lo);
    };
    CHECK(window(140, 160) < window(0, 20));
}

TEST_CASE("micro-batched gradient accumulation matches the full batch closely") {
    auto full = run_toy<float>(5, 6, nullptr, /*micro_batch=*/0);
    auto micro = run_toy<float>(5, 6, nullptr, /*micro_batch=*/2);
    for (std::size_t i = 0; i < full.loss_history.size(); ++i)
        CHECK(std::abs(full.loss_history[i] - micro.loss_history[i]) < 1e-4);
}

TEST_CASE("source exhaustion before num_steps raises an error") {
    const ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.num_steps = 10;
    tcfg.batch_size = 4;
    Rng rng(1);
    auto params = ModelParameters<float>::init(mcfg, rng);
    ScheduleFreeAdamW<float> opt(params.named(), tcfg);
    ToySource src(3, 4, 12, 3, 1);  // only 3 batches available
    CHECK_THROWS_WITH_AS((train<float>(params, mcfg, src, tcfg, opt)),
                         doctest::Contains("step 4"), IoError);
}

TEST_CASE("non-finite inputs abort training with the step index") {
    const ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.num_steps = 4;
    tcfg.batch_size = 4;
    Rng rng(1);
    auto params = ModelParameters<float>::init(mcfg, rng);
    ScheduleFreeAdamW<float> opt(params.named(), tcfg);
    ToySource src(4, 4, 12, 3, 1, /*poison_step=*/true);
    CHECK_THROWS_AS((train<float>(params, mcfg, src, tcfg, opt)), NumericError);
}

TEST_CASE("train checkpoint round trip restores parameters and optimizer state") {
    const std::string path = "/tmp/nanotfm_train_ckpt.ntpf";
    const ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.num_steps = 5;
    tcfg.batch_size = 4;
    tcfg.seed = 42;
    Rng rng(42);
    auto params = ModelParameters<float>::init(mcfg, rng);
    ScheduleFreeAdamW<float> opt(params.named(), tcfg);
    ToySource src(5, 4, 12, 3, 42);
    train<float>(params, mcfg, src, tcfg, opt);
    save_checkpoint(path, mcfg, params, &opt);

    auto lc = load_checkpoint<float>(path);
    CHECK(lc.has_optimizer);
    CHECK(lc.step == 5);
    CHECK(lc.train_config.seed == 42);
    CHECK(lc.gamma_sq_sum == opt.gamma_sq_sum());
    auto a = params.named();
    auto b = lc.params.named();
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto da = a[i].tensor.data(), db = b[i].tensor.data();
        for (std::size_t j = 0; j < da.size(); ++j) CHECK(da[j] == db[j]);
        for (std::size_t j = 0; j < da.size(); ++j) {
            CHECK(lc.z[i][j] == opt.z_state()[i][j]);
            CHECK(lc.v[i][j] == opt.v_state()[i][j]);
            CHECK(lc.x[i][j] == opt.x_state()[i][j]);
        }
    }
    std::filesystem::remove(path);
}

TEST_CASE("resume continues the identical trajectory (dump loader + skip)") {
    namespace fs = std::filesystem;
    const std::string dump = "/tmp/nanotfm_resume_dump.h5";
    const ModelConfig mcfg = tiny_config();
    SyntheticPriorConfig pcf;
    pcf.rows = 16;
    pcf.cols = 3;
    pcf.seed = 5;
    write_dump(dump, pcf, 32);

    TrainConfig tcfg;
    tcfg.lr = 5e-3;
    tcfg.num_steps = 6;
    tcfg.batch_size = 4;
    tcfg.warmup_steps = 4;
    tcfg.seed = 9;

    // straight run of 6 steps
    Rng rng1(9);
    auto p_straight = ModelParameters<float>::init(mcfg, rng1);
    ScheduleFreeAdamW<float> opt1(p_straight.named(), tcfg);
    PriorDumpLoader l1(dump, 6, 4, 9);
    auto res_straight = train<float>(p_straight, mcfg, l1, tcfg, opt1);

    // 3 steps, checkpoint, resume 3 more
    const std::string ckpt = "/tmp/nanotfm_resume.ntpf";
    TrainConfig half = tcfg;
    half.num_steps = 3;
    Rng rng2(9);
    auto p_half = ModelParameters<float>::init(mcfg, rng2);
    ScheduleFreeAdamW<float> opt2(p_half.named(), half);
    PriorDumpLoader l2(dump, 6, 4, 9);
    auto res_a = train<float>(p_half, mcfg, l2, half, opt2);
    save_checkpoint(ckpt, mcfg, p_half, &opt2);

    auto lc = load_checkpoint<float>(ckpt);
    lc.params.set_requires_grad(true);
    TrainConfig full = lc.train_config;
    full.num_steps = 6;
    ScheduleFreeAdamW<float> opt3(lc.params.named(), full);
    opt3.restore(lc.step, lc.gamma_sq_sum, std::move(lc.z), std::move(lc.x),
                 std::move(lc.v));
    PriorDumpLoader l3(dump, 6, 4, 9);
    l3.skip(3);
    auto res_b = train<float>(lc.params, mcfg, l3, full, opt3);

    // identical final loss and identical parameters
    REQUIRE(res_b.loss_history.size() == 3);
    for (int i = 0; i < 3; ++i)
        CHECK(res_b.loss_history[i] == res_straight.loss_history[3 + i]);
    auto na = p_straight.named(), nb = lc.params.named();
    for (std::size_t i = 0; i < na.size(); ++i) {
        const auto da = na[i].tensor.data(), db = nb[i].tensor.data();
        for (std::size_t j = 0; j < da.size(); ++j) CHECK(da[j] == db[j]);
    }
    fs::remove(dump);
    fs::remove(ckpt);
}

TEST_CASE("snapshot callback fires at the requested steps with averaged params") {
    const ModelConfig mcfg = tiny_config();
    TrainConfig tcfg;
    tcfg.num_steps = 8;
    tcfg.batch_size = 4;
    Rng rng(2);
    auto params = ModelParameters<float>::init(mcfg, rng);
    ScheduleFreeAdamW<float> opt(params.named(), tcfg);
    ToySource src(8, 4, 12, 3, 2);
    std::vector<int> fired;
    train<float>(params, mcfg, src, tcfg, opt, {3, 6},
                 [&](int step, double secs, ModelParameters<float>& p) {
                     fired.push_back(step);
                     CHECK(secs >= 0.0);
                     // callback params hold the averaged iterate
                     CHECK(p.feat_w.data()[0] == opt.x_state()[0][0]);
                 });
    CHECK(fired == std::vector<int>{3, 6});
}

TEST_CASE("f64 training runs end to end") {
    auto res = run_toy<double>(21, 4, nullptr);
    CHECK(res.loss_history.size() == 4);
    for (double l : res.loss_history) CHECK(std::isfinite(l));
}
