#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nanotfm/tensor.hpp"

namespace nanotfm {

struct TrainConfig {
    double lr = 4e-3;
    int num_steps = 2500;
    int batch_size = 32;
    int warmup_steps = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // zero reproduces the reference training setup
    std::uint64_t seed = 0;
    int checkpoint_every = 0;  // steps between snapshots; 0 = final only
    int micro_batch = 8;       // gradient-accumulation slice; 0 = whole batch
    double grad_clip = 0.0;    // global-norm clip; 0 = off

    void validate(bool for_training = true) const {
        if (for_training && lr <= 0) throw ConfigError("lr must be positive");
        if (lr < 0) throw ConfigError("lr must be non-negative");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("betas must lie in [0, 1)");
        if (eps <= 0) throw ConfigError("eps must be positive");
        if (num_steps <= 0 || batch_size <= 0)
            throw ConfigError("num_steps and batch_size must be positive");
        if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
        if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
        if (micro_batch < 0) throw ConfigError("micro_batch must be >= 0");
    }
};

// Schedule-free AdamW. Keeps a fast iterate z, an averaged iterate x and a
// second-moment accumulator v per parameter. Gradients must be taken at the
// interpolation y = (1-beta1) z + beta1 x; inference always uses x.
//
// Per step t (1-based), with warmup gamma_t = lr * min(1, t/warmup_steps):
//   v <- beta2 v + (1-beta2) g^2,  vhat = v / (1 - beta2^t)
//   z <- z - gamma_t (g / (sqrt(vhat) + eps) + weight_decay * y)
//   c_t = gamma_t^2 / sum_{i<=t} gamma_i^2,  x <- (1-c_t) x + c_t z
// With constant gamma, c_t = 1/t and x is the running mean of the z iterates.
template <class T>
class ScheduleFreeAdamW {
public:
    ScheduleFreeAdamW(std::vector<Parameter<T>> params, const TrainConfig& cfg)
        : cfg_(cfg), params_(std::move(params)) {
        cfg_.validate(/*for_training=*/false);
        z_.reserve(params_.size());
        x_.reserve(params_.size());
        v_.reserve(params_.size());
        for (auto& p : params_) {
            const auto d = p.tensor.data();
            z_.emplace_back(d.begin(), d.end());
            x_.emplace_back(d.begin(), d.end());
            v_.emplace_back(d.size(), T(0));
        }
    }

    // params.data <- y = (1-beta1) z + beta1 x
    void to_eval_point() {
        const T b1 = static_cast<T>(cfg_.beta1);
        for (std::size_t i = 0; i < params_.size(); ++i)
            kernels::lerp(z_[i].data(), x_[i].data(), b1,
                          params_[i].tensor.data().data(), z_[i].size());
    }

    // Consumes the gradients stored on the parameters (computed at y).
    void step() {
        ++t_;
        const double warm =
            cfg_.warmup_steps > 0
                ? std::min(1.0, static_cast<double>(t_) / cfg_.warmup_steps)
                : 1.0;
        const double gamma = cfg_.lr * warm;
        const double bias_corr = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        gamma_sq_sum_ += gamma * gamma;
        const double c = gamma_sq_sum_ > 0 ? gamma * gamma / gamma_sq_sum_ : 0.0;

        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].tensor;
            if (!p.has_grad()) p.grad();  // missing grad treated as zero
            const auto g = p.grad();
            for (std::size_t j = 0; j < g.size(); ++j)
                if (!std::isfinite(static_cast<double>(g[j])))
                    throw NumericError("non-finite gradient in " + params_[i].name +
                                       " at step " + std::to_string(t_));
            kernels::sf_update(z_[i].data(), v_[i].data(), g.data(),
                               p.data().data(), g.size(), static_cast<T>(gamma),
                               static_cast<T>(cfg_.beta2),
                               static_cast<T>(1.0 / bias_corr), static_cast<T>(cfg_.eps),
                               static_cast<T>(cfg_.weight_decay));
            kernels::lerp(x_[i].data(), z_[i].data(), static_cast<T>(c), x_[i].data(),
                          x_[i].size());
        }
    }

    // params.data <- x (the averaged iterate used for inference)
    void write_averaged() {
        for (std::size_t i = 0; i < params_.size(); ++i)
            std::copy(x_[i].begin(), x_[i].end(), params_[i].tensor.data().begin());
    }

    std::uint64_t step_count() const { return t_; }
    double gamma_sq_sum() const { return gamma_sq_sum_; }
    const std::vector<std::vector<T>>& z_state() const { return z_; }
    const std::vector<std::vector<T>>& x_state() const { return x_; }
    const std::vector<std::vector<T>>& v_state() const { return v_; }
    const TrainConfig& config() const { return cfg_; }

    // Restores a serialized state; sizes must match the registered parameters.
    void restore(std::uint64_t t, double gamma_sq_sum, std::vector<std::vector<T>> z,
                 std::vector<std::vector<T>> x, std::vector<std::vector<T>> v) {
        if (z.size() != params_.size() || v.size() != params_.size() ||
            x.size() != params_.size())
            throw FormatError("optimizer state parameter count mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i)
            if (z[i].size() != z_[i].size() || v[i].size() != v_[i].size() ||
                x[i].size() != x_[i].size())
                throw FormatError("optimizer state size mismatch in " + params_[i].name);
        t_ = t;
        gamma_sq_sum_ = gamma_sq_sum;
        z_ = std::move(z);
        x_ = std::move(x);
        v_ = std::move(v);
    }

private:
    TrainConfig cfg_;
    std::vector<Parameter<T>> params_;
    std::uint64_t t_ = 0;
    double gamma_sq_sum_ = 0.0;
    std::vector<std::vector<T>> z_, x_, v_;
};

// Scales all parameter gradients so their global L2 norm is at most max_norm.
template <class T>
double clip_grad_norm(std::vector<Parameter<T>>& params, double max_norm) {
    double sq = 0.0;
    for (auto& p : params) {
        if (!p.tensor.has_grad()) continue;
        for (T g : p.tensor.grad()) sq += static_cast<double>(g) * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& p : params) {
            if (!p.tensor.has_grad()) continue;
            auto g = p.tensor.grad();
            kernels::scale(s, g.data(), g.data(), g.size());
        }
    }
    return norm;
}

}  // namespace nanotfm
