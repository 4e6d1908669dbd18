#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nanotfm/tensor.hpp"

// The table transformer: a scalar-to-embedding encoder per cell, alternating
// attention over the feature axis and the datapoint axis with train/test
// masking, and a logits decoder over the target column of the test rows.

namespace nanotfm {

enum class Activation { gelu, relu };

inline const char* activation_name(Activation a) {
    return a == Activation::gelu ? "gelu" : "relu";
}

struct ModelConfig {
    int embedding_size = 96;
    int num_attention_heads = 4;
    int mlp_hidden_size = 192;
    int num_layers = 3;
    int num_outputs = 2;
    double clip_z = 10.0;
    Activation activation = Activation::gelu;

    void validate() const {
        if (embedding_size <= 0 || num_attention_heads <= 0 || mlp_hidden_size <= 0 ||
            num_layers <= 0 || num_outputs <= 0)
            throw ConfigError("model config fields must be positive");
        if (embedding_size % num_attention_heads != 0)
            throw ConfigError("embedding_size " + std::to_string(embedding_size) +
                              " not divisible by num_attention_heads " +
                              std::to_string(num_attention_heads));
        if (clip_z <= 0) throw ConfigError("clip_z must be positive");
    }
};

// One batch of tables. Rows [0, split) are the in-context training rows;
// rows [split, R) are the rows to predict. y holds class indices as reals.
template <class T>
struct TableBatch {
    Tensor<T> x;  // B x R x C
    Tensor<T> y;  // B x R
    std::int64_t split = 0;
};

template <class T>
struct AttentionParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <class T>
struct LayerParams {
    AttentionParams<T> feat_attn;
    AttentionParams<T> data_attn;
    Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    Tensor<T> ln1_gain, ln1_bias, ln2_gain, ln2_bias, ln3_gain, ln3_bias;
};

template <class T>
struct ModelParameters {
    Tensor<T> feat_w, feat_b;  // shared scalar -> E map for feature cells
    Tensor<T> targ_w, targ_b;  // shared scalar -> E map for target cells
    std::vector<LayerParams<T>> layers;
    Tensor<T> dec_w1, dec_b1, dec_w2, dec_b2;

    // Weights ~ N(0, 1/fan_in), biases zero, layer norm gain one / bias zero.
    static ModelParameters init(const ModelConfig& cfg, Rng& rng) {
        return build(cfg, [&rng](Shape s, std::int64_t fan_in) {
            return Tensor<T>::randn(s, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        });
    }

    // All-zero weights; used as the target of checkpoint loading.
    static ModelParameters zeros_init(const ModelConfig& cfg) {
        return build(cfg, [](Shape s, std::int64_t) { return Tensor<T>::zeros(s); });
    }

    template <class WeightFn>
    static ModelParameters build(const ModelConfig& cfg, WeightFn&& w) {
        cfg.validate();
        const std::int64_t e = cfg.embedding_size;
        const std::int64_t h = cfg.mlp_hidden_size;
        const std::int64_t k = cfg.num_outputs;
        ModelParameters p;
        p.feat_w = w(Shape{1, e}, 1);
        p.feat_b = Tensor<T>::zeros({e});
        p.targ_w = w({1, e}, 1);
        p.targ_b = Tensor<T>::zeros({e});
        p.layers.resize(cfg.num_layers);
        for (auto& lp : p.layers) {
            for (AttentionParams<T>* ap : {&lp.feat_attn, &lp.data_attn}) {
                ap->wq = w({e, e}, e);
                ap->wk = w({e, e}, e);
                ap->wv = w({e, e}, e);
                ap->wo = w({e, e}, e);
                ap->bq = Tensor<T>::zeros({e});
                ap->bk = Tensor<T>::zeros({e});
                ap->bv = Tensor<T>::zeros({e});
                ap->bo = Tensor<T>::zeros({e});
            }
            lp.mlp_w1 = w({e, h}, e);
            lp.mlp_b1 = Tensor<T>::zeros({h});
            lp.mlp_w2 = w({h, e}, h);
            lp.mlp_b2 = Tensor<T>::zeros({e});
            for (Tensor<T>* g : {&lp.ln1_gain, &lp.ln2_gain, &lp.ln3_gain})
                *g = Tensor<T>::filled({e}, T(1));
            for (Tensor<T>* b : {&lp.ln1_bias, &lp.ln2_bias, &lp.ln3_bias})
                *b = Tensor<T>::zeros({e});
        }
        p.dec_w1 = w({e, h}, e);
        p.dec_b1 = Tensor<T>::zeros({h});
        p.dec_w2 = w({h, k}, h);
        p.dec_b2 = Tensor<T>::zeros({k});
        p.set_requires_grad(true);
        return p;
    }

    // Fixed registration order; names are unique by construction.
    std::vector<Parameter<T>> named() const {
        std::vector<Parameter<T>> out;
        out.push_back({"feature_embed.weight", feat_w});
        out.push_back({"feature_embed.bias", feat_b});
        out.push_back({"target_embed.weight", targ_w});
        out.push_back({"target_embed.bias", targ_b});
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& lp = layers[i];
            const std::string base = "layer." + std::to_string(i) + ".";
            auto attn = [&out, &base](const char* tag, const AttentionParams<T>& ap) {
                out.push_back({base + tag + ".Wq", ap.wq});
                out.push_back({base + tag + ".bq", ap.bq});
                out.push_back({base + tag + ".Wk", ap.wk});
                out.push_back({base + tag + ".bk", ap.bk});
                out.push_back({base + tag + ".Wv", ap.wv});
                out.push_back({base + tag + ".bv", ap.bv});
                out.push_back({base + tag + ".Wo", ap.wo});
                out.push_back({base + tag + ".bo", ap.bo});
            };
            attn("feat_attn", lp.feat_attn);
            attn("data_attn", lp.data_attn);
            out.push_back({base + "mlp.W1", lp.mlp_w1});
            out.push_back({base + "mlp.b1", lp.mlp_b1});
            out.push_back({base + "mlp.W2", lp.mlp_w2});
            out.push_back({base + "mlp.b2", lp.mlp_b2});
            out.push_back({base + "ln1.gain", lp.ln1_gain});
            out.push_back({base + "ln1.bias", lp.ln1_bias});
            out.push_back({base + "ln2.gain", lp.ln2_gain});
            out.push_back({base + "ln2.bias", lp.ln2_bias});
            out.push_back({base + "ln3.gain", lp.ln3_gain});
            out.push_back({base + "ln3.bias", lp.ln3_bias});
        }
        out.push_back({"decoder.W1", dec_w1});
        out.push_back({"decoder.b1", dec_b1});
        out.push_back({"decoder.W2", dec_w2});
        out.push_back({"decoder.b2", dec_b2});
        return out;
    }

    // Deep copy with no graph attached; requires_grad mirrors the source.
    ModelParameters clone() const {
        ModelParameters c;
        auto cp = [](const Tensor<T>& t) {
            Tensor<T> d = t.detached_copy();
            d.set_requires_grad(t.requires_grad());
            return d;
        };
        c.feat_w = cp(feat_w);
        c.feat_b = cp(feat_b);
        c.targ_w = cp(targ_w);
        c.targ_b = cp(targ_b);
        c.layers.resize(layers.size());
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& s = layers[i];
            auto& d = c.layers[i];
            for (auto [src, dst] : {std::pair{&s.feat_attn, &d.feat_attn},
                                    std::pair{&s.data_attn, &d.data_attn}}) {
                dst->wq = cp(src->wq);
                dst->bq = cp(src->bq);
                dst->wk = cp(src->wk);
                dst->bk = cp(src->bk);
                dst->wv = cp(src->wv);
                dst->bv = cp(src->bv);
                dst->wo = cp(src->wo);
                dst->bo = cp(src->bo);
            }
            d.mlp_w1 = cp(s.mlp_w1);
            d.mlp_b1 = cp(s.mlp_b1);
            d.mlp_w2 = cp(s.mlp_w2);
            d.mlp_b2 = cp(s.mlp_b2);
            d.ln1_gain = cp(s.ln1_gain);
            d.ln1_bias = cp(s.ln1_bias);
            d.ln2_gain = cp(s.ln2_gain);
            d.ln2_bias = cp(s.ln2_bias);
            d.ln3_gain = cp(s.ln3_gain);
            d.ln3_bias = cp(s.ln3_bias);
        }
        c.dec_w1 = cp(dec_w1);
        c.dec_b1 = cp(dec_b1);
        c.dec_w2 = cp(dec_w2);
        c.dec_b2 = cp(dec_b2);
        return c;
    }

    void set_requires_grad(bool on) {
        for (auto& p : named()) const_cast<Tensor<T>&>(p.tensor).set_requires_grad(on);
    }

    void zero_grad() {
        for (auto& p : named()) const_cast<Tensor<T>&>(p.tensor).zero_grad();
    }

    std::int64_t count() const {
        std::int64_t n = 0;
        for (const auto& p : named()) n += p.tensor.numel();
        return n;
    }
};

inline std::int64_t parameter_count(const ModelConfig& cfg) {
    const std::int64_t e = cfg.embedding_size;
    const std::int64_t h = cfg.mlp_hidden_size;
    const std::int64_t k = cfg.num_outputs;
    const std::int64_t embeds = 2 * (e + e);
    const std::int64_t attn = 4 * (e * e) + 4 * e;
    const std::int64_t mlp = e * h + h + h * e + e;
    const std::int64_t norms = 3 * 2 * e;
    const std::int64_t decoder = e * h + h + h * k + k;
    return embeds + cfg.num_layers * (2 * attn + mlp + norms) + decoder;
}

template <class T>
Tensor<T> apply_activation(const Tensor<T>& t, Activation a) {
    return a == Activation::gelu ? gelu(t) : relu(t);
}

// ---------------------------------------------------------------------------
// architecture pieces
// ---------------------------------------------------------------------------

// Scaled dot-product multi-head attention; q_in (N, Sq, E) attends to
// kv_in (N, Sk, E). Scale is 1/sqrt(E/heads).
template <class T>
Tensor<T> multihead_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                              const AttentionParams<T>& p, int heads) {
    const std::int64_t n = q_in.dim(0), sq = q_in.dim(1), e = q_in.dim(2);
    const std::int64_t sk = kv_in.dim(1);
    const std::int64_t dh = e / heads;
    Tensor<T> q = linear(q_in, p.wq, p.bq);
    Tensor<T> k = linear(kv_in, p.wk, p.bk);
    Tensor<T> v = linear(kv_in, p.wv, p.bv);
    q = transpose(reshape(q, {n, sq, heads, dh}), 1, 2);  // N x h x Sq x Dh
    k = transpose(reshape(k, {n, sk, heads, dh}), 1, 2);
    v = transpose(reshape(v, {n, sk, heads, dh}), 1, 2);
    Tensor<T> scores = matmul(q, k, /*trans_b=*/true, 1.0 / std::sqrt(double(dh)));
    Tensor<T> attn = softmax(scores, -1);            // N x h x Sq x Sk
    Tensor<T> ctx = matmul(attn, v);                 // N x h x Sq x Dh
    ctx = reshape(transpose(ctx, 1, 2), {n, sq, e});
    return linear(ctx, p.wo, p.bo);
}

// Self-attention over the column axis, independently per (batch, row). All
// C+1 columns, the target column included, attend to each other.
template <class T>
Tensor<T> feature_attention(const Tensor<T>& cells, const AttentionParams<T>& p,
                            int heads) {
    const std::int64_t b = cells.dim(0), r = cells.dim(1), s = cells.dim(2),
                       e = cells.dim(3);
    Tensor<T> v = reshape(cells, {b * r, s, e});
    return reshape(multihead_attention(v, v, p, heads), {b, r, s, e});
}

// Attention over the row axis, independently per (batch, column). Training
// rows attend among themselves; test rows attend only to training rows, not
// to themselves, which keeps every test row's output independent of the
// other test rows.
template <class T>
Tensor<T> datapoint_attention(const Tensor<T>& cells, std::int64_t split,
                              const AttentionParams<T>& p, int heads) {
    const std::int64_t b = cells.dim(0), r = cells.dim(1), s = cells.dim(2),
                       e = cells.dim(3);
    if (split < 1 || split > r)
        throw ConfigError("datapoint_attention: split " + std::to_string(split) +
                          " outside [1, " + std::to_string(r) + "]");
    Tensor<T> v = reshape(transpose(cells, 1, 2), {b * s, r, e});
    Tensor<T> train = slice(v, 1, 0, split);
    Tensor<T> out = multihead_attention(train, train, p, heads);
    if (split < r) {
        Tensor<T> test = slice(v, 1, split, r - split);
        out = concat(out, multihead_attention(test, train, p, heads), 1);
    }
    return transpose(reshape(out, {b, s, r, e}), 1, 2);
}

// Post-norm residual composition: each skip connection is followed by a
// layer norm, and the cell-wise two-layer MLP comes after both attentions.
template <class T>
Tensor<T> transformer_layer(const Tensor<T>& cells, std::int64_t split,
                            const LayerParams<T>& lp, const ModelConfig& cfg) {
    Tensor<T> h1 = layer_norm(add(cells, feature_attention(cells, lp.feat_attn,
                                                           cfg.num_attention_heads)),
                              lp.ln1_gain, lp.ln1_bias);
    Tensor<T> h2 = layer_norm(
        add(h1, datapoint_attention(h1, split, lp.data_attn, cfg.num_attention_heads)),
        lp.ln2_gain, lp.ln2_bias);
    Tensor<T> mlp = linear(
        apply_activation(linear(h2, lp.mlp_w1, lp.mlp_b1), cfg.activation), lp.mlp_w2,
        lp.mlp_b2);
    return layer_norm(add(h2, mlp), lp.ln3_gain, lp.ln3_bias);
}

// Per (batch, column): z = (x - mean_train) / max(std_train, 1e-8), clipped to
// [-clip_z, clip_z], then the shared scalar -> E map on every cell.
template <class T>
Tensor<T> encode_features(const Tensor<T>& x, std::int64_t split,
                          const ModelParameters<T>& params, const ModelConfig& cfg) {
    const std::int64_t b = x.dim(0), r = x.dim(1), c = x.dim(2);
    if (split < 2)
        throw ConfigError("encode_features: split must be >= 2, got " +
                          std::to_string(split));
    if (split > r)
        throw ConfigError("encode_features: split " + std::to_string(split) +
                          " exceeds row count " + std::to_string(r));
    Tensor<T> xt = slice(x, 1, 0, split);
    Tensor<T> mu = mean(xt, 1, true);  // B x 1 x C
    Tensor<T> d = sub(xt, mu);
    Tensor<T> var = mean(mul(d, d), 1, true);
    // max(sqrt(var), 1e-8) == sqrt(max(var, 1e-16)), with a safe gradient at 0
    Tensor<T> denom = sqrt(clamp_min(var, 1e-16));
    Tensor<T> z = clamp(div(sub(x, mu), denom), -cfg.clip_z, cfg.clip_z);
    Tensor<T> e = linear(reshape(z, {b * r * c, 1}), params.feat_w, params.feat_b);
    return reshape(e, {b, r, c, cfg.embedding_size});
}

// Test-row targets are replaced by the training-target mean, then the shared
// scalar -> E map is applied. Targets enter as raw class indices cast to real.
template <class T>
Tensor<T> encode_targets(const Tensor<T>& y, std::int64_t split,
                         const ModelParameters<T>& params) {
    const std::int64_t b = y.dim(0), r = y.dim(1);
    if (split < 2 || split > r)
        throw ConfigError("encode_targets: split " + std::to_string(split) +
                          " outside [2, " + std::to_string(r) + "]");
    Tensor<T> yt = slice(y, 1, 0, split);
    Tensor<T> m = mean(yt, 1, true);                              // B x 1
    Tensor<T> fill = mul(Tensor<T>::filled({b, r - split}, T(1)), m);
    Tensor<T> ycat = concat(yt, fill, 1);                          // B x R
    const std::int64_t e = params.targ_w.dim(1);
    Tensor<T> emb = linear(reshape(ycat, {b * r, 1}), params.targ_w, params.targ_b);
    return reshape(emb, {b, r, 1, e});
}

namespace detail {

template <class T>
void check_params_match(const ModelParameters<T>& params, const ModelConfig& cfg) {
    if (params.feat_w.dim(1) != cfg.embedding_size)
        throw ConfigError("parameters embed width " + std::to_string(params.feat_w.dim(1)) +
                          " != config embedding_size " + std::to_string(cfg.embedding_size));
    if (static_cast<int>(params.layers.size()) != cfg.num_layers)
        throw ConfigError("parameters have " + std::to_string(params.layers.size()) +
                          " layers, config says " + std::to_string(cfg.num_layers));
    if (params.dec_w2.dim(1) != cfg.num_outputs)
        throw ConfigError("decoder output width " + std::to_string(params.dec_w2.dim(1)) +
                          " != config num_outputs " + std::to_string(cfg.num_outputs));
    if (params.dec_w1.dim(1) != cfg.mlp_hidden_size)
        throw ConfigError("decoder hidden width " + std::to_string(params.dec_w1.dim(1)) +
                          " != config mlp_hidden_size " +
                          std::to_string(cfg.mlp_hidden_size));
}

}  // namespace detail

// Full pass: encode, L transformer layers, then the decoder MLP on the target
// column of the test rows. Returns logits (B, R - split, num_outputs).
template <class T>
Tensor<T> forward(const TableBatch<T>& batch, const ModelParameters<T>& params,
                  const ModelConfig& cfg) {
    cfg.validate();
    detail::check_params_match(params, cfg);
    const std::int64_t b = batch.x.dim(0), r = batch.x.dim(1), c = batch.x.dim(2);
    if (c < 1) throw ConfigError("forward: need at least one feature column, got 0");
    if (batch.y.dim(0) != b || batch.y.dim(1) != r)
        throw ShapeError("forward: y shape " + batch.y.shape().str() +
                         " does not match x " + batch.x.shape().str());
    Tensor<T> fe = encode_features(batch.x, batch.split, params, cfg);
    Tensor<T> te = encode_targets(batch.y, batch.split, params);
    Tensor<T> cells = concat(fe, te, 2);  // B x R x (C+1) x E
    for (const auto& lp : params.layers)
        cells = transformer_layer(cells, batch.split, lp, cfg);
    const std::int64_t t = r - batch.split;
    Tensor<T> test = slice(cells, 1, batch.split, t);
    Tensor<T> targ = reshape(slice(test, 2, c, 1), {b, t, cfg.embedding_size});
    Tensor<T> h = apply_activation(linear(targ, params.dec_w1, params.dec_b1),
                                   cfg.activation);
    return linear(h, params.dec_w2, params.dec_b2);
}

template <class T>
Tensor<T> predict_proba(const TableBatch<T>& batch, const ModelParameters<T>& params,
                        const ModelConfig& cfg) {
    return softmax(forward(batch, params, cfg), -1);
}

}  // namespace nanotfm
