#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "nanotfm/model.hpp"
#include "nanotfm/optim.hpp"

// Checkpoint container, explicit little-endian layout:
//   "NTPF" | u32 version | u32 flags (bit0: optimizer section)
//   model config: u32 embedding_size, heads, mlp_hidden, layers, outputs;
//                 f64 clip_z; u32 activation
//   u32 num_params, then per parameter (registration order):
//     u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 data[numel]
//   optimizer section, when present:
//     train config (f64 lr, u32 num_steps/batch/warmup, f64 beta1/beta2/eps/
//     weight_decay, u64 seed, u32 checkpoint_every, u32 micro_batch,
//     f64 grad_clip) | u64 step | f64 gamma_sq_sum |
//     per parameter: f32 z[numel] | f32 v[numel]
// Parameter payloads are raw 32-bit floats; the model section holds the
// averaged iterate. Round trips are bit-exact.

namespace nanotfm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

inline void put_u32(std::string& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& b, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f32(std::string& b, float v) { put_u32(b, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::string& b, double v) { put_u64(b, std::bit_cast<std::uint64_t>(v)); }

struct Reader {
    const unsigned char* p;
    const unsigned char* end;
    std::string path;

    void need(std::size_t n) const {
        if (static_cast<std::size_t>(end - p) < n)
            throw FormatError("truncated checkpoint: " + path);
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
        p += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
        p += 8;
        return v;
    }
    float f32() { return std::bit_cast<float>(u32()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(p), n);
        p += n;
        return s;
    }
    void f32_block(float* dst, std::size_t n) {
        need(4 * n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint32_t v = 0;
            for (int q = 0; q < 4; ++q)
                v |= static_cast<std::uint32_t>(p[4 * i + q]) << (8 * q);
            dst[i] = std::bit_cast<float>(v);
        }
        p += 4 * n;
    }
};

template <class T>
void put_values_f32(std::string& b, const T* v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) put_f32(b, static_cast<float>(v[i]));
}

inline void put_train_config(std::string& b, const TrainConfig& c) {
    put_f64(b, c.lr);
    put_u32(b, static_cast<std::uint32_t>(c.num_steps));
    put_u32(b, static_cast<std::uint32_t>(c.batch_size));
    put_u32(b, static_cast<std::uint32_t>(c.warmup_steps));
    put_f64(b, c.beta1);
    put_f64(b, c.beta2);
    put_f64(b, c.eps);
    put_f64(b, c.weight_decay);
    put_u64(b, c.seed);
    put_u32(b, static_cast<std::uint32_t>(c.checkpoint_every));
    put_u32(b, static_cast<std::uint32_t>(c.micro_batch));
    put_f64(b, c.grad_clip);
}

inline TrainConfig read_train_config(Reader& r) {
    TrainConfig c;
    c.lr = r.f64();
    c.num_steps = static_cast<int>(r.u32());
    c.batch_size = static_cast<int>(r.u32());
    c.warmup_steps = static_cast<int>(r.u32());
    c.beta1 = r.f64();
    c.beta2 = r.f64();
    c.eps = r.f64();
    c.weight_decay = r.f64();
    c.seed = r.u64();
    c.checkpoint_every = static_cast<int>(r.u32());
    c.micro_batch = static_cast<int>(r.u32());
    c.grad_clip = r.f64();
    return c;
}

}  // namespace ckpt_detail

template <class T>
struct LoadedCheckpoint {
    ModelConfig config;
    ModelParameters<T> params;  // holds the averaged iterate
    bool has_optimizer = false;
    TrainConfig train_config;
    std::uint64_t step = 0;
    double gamma_sq_sum = 0.0;
    std::vector<std::vector<T>> z, x, v;
};

// opt == nullptr writes a model-only checkpoint from the parameter values;
// with an optimizer, the canonical averaged iterate comes from its state.
template <class T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParameters<T>& params,
                     const ScheduleFreeAdamW<T>* opt = nullptr) {
    using namespace ckpt_detail;
    std::string b;
    b += "NTPF";
    put_u32(b, kCheckpointVersion);
    put_u32(b, opt ? 1u : 0u);
    put_u32(b, static_cast<std::uint32_t>(cfg.embedding_size));
    put_u32(b, static_cast<std::uint32_t>(cfg.num_attention_heads));
    put_u32(b, static_cast<std::uint32_t>(cfg.mlp_hidden_size));
    put_u32(b, static_cast<std::uint32_t>(cfg.num_layers));
    put_u32(b, static_cast<std::uint32_t>(cfg.num_outputs));
    put_f64(b, cfg.clip_z);
    put_u32(b, cfg.activation == Activation::gelu ? 0u : 1u);

    const auto named = params.named();
    put_u32(b, static_cast<std::uint32_t>(named.size()));
    for (std::size_t i = 0; i < named.size(); ++i) {
        const auto& p = named[i];
        put_u32(b, static_cast<std::uint32_t>(p.name.size()));
        b += p.name;
        put_u32(b, static_cast<std::uint32_t>(p.tensor.rank()));
        for (int d = 0; d < p.tensor.rank(); ++d)
            put_u32(b, static_cast<std::uint32_t>(p.tensor.dim(d)));
        if (opt)
            put_values_f32(b, opt->x_state()[i].data(), opt->x_state()[i].size());
        else
            put_values_f32(b, p.tensor.data().data(), p.tensor.data().size());
    }

    if (opt) {
        put_train_config(b, opt->config());
        put_u64(b, opt->step_count());
        put_f64(b, opt->gamma_sq_sum());
        for (std::size_t i = 0; i < named.size(); ++i) {
            put_values_f32(b, opt->z_state()[i].data(), opt->z_state()[i].size());
            put_values_f32(b, opt->v_state()[i].data(), opt->v_state()[i].size());
        }
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!f) throw IoError("checkpoint write failed: " + path);
}

// Parses the whole file before constructing anything, so a malformed file
// leaves no partial state behind.
template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)),
                      std::istreambuf_iterator<char>());
    Reader r{reinterpret_cast<const unsigned char*>(bytes.data()),
             reinterpret_cast<const unsigned char*>(bytes.data()) + bytes.size(), path};

    if (r.str(4) != "NTPF") throw FormatError("bad checkpoint magic in " + path);
    const std::uint32_t version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                          " in " + path);
    const std::uint32_t flags = r.u32();

    LoadedCheckpoint<T> out;
    out.config.embedding_size = static_cast<int>(r.u32());
    out.config.num_attention_heads = static_cast<int>(r.u32());
    out.config.mlp_hidden_size = static_cast<int>(r.u32());
    out.config.num_layers = static_cast<int>(r.u32());
    out.config.num_outputs = static_cast<int>(r.u32());
    out.config.clip_z = r.f64();
    out.config.activation = r.u32() == 0 ? Activation::gelu : Activation::relu;
    out.config.validate();

    out.params = ModelParameters<T>::zeros_init(out.config);
    auto named = out.params.named();
    const std::uint32_t np = r.u32();
    if (np != named.size())
        throw FormatError("checkpoint has " + std::to_string(np) + " parameters, config implies " +
                          std::to_string(named.size()) + ": " + path);

    std::vector<float> scratch;
    for (std::size_t i = 0; i < named.size(); ++i) {
        const std::string name = r.str(r.u32());
        if (name != named[i].name)
            throw FormatError("unexpected parameter '" + name + "' (want '" +
                              named[i].name + "') in " + path);
        const std::uint32_t rank = r.u32();
        Shape s;
        s.rank = static_cast<int>(rank);
        if (rank > Shape::kMaxRank)
            throw FormatError("parameter rank " + std::to_string(rank) + " in " + path);
        for (std::uint32_t d = 0; d < rank; ++d) s.d[d] = r.u32();
        if (!(s == named[i].tensor.shape()))
            throw FormatError("parameter '" + name + "' has shape " + s.str() +
                              ", expected " + named[i].tensor.shape().str() + ": " + path);
        scratch.resize(static_cast<std::size_t>(s.numel()));
        r.f32_block(scratch.data(), scratch.size());
        auto dst = const_cast<Tensor<T>&>(named[i].tensor).data();
        for (std::size_t j = 0; j < scratch.size(); ++j) dst[j] = static_cast<T>(scratch[j]);
    }

    if (flags & 1u) {
        out.has_optimizer = true;
        out.train_config = read_train_config(r);
        out.step = r.u64();
        out.gamma_sq_sum = r.f64();
        out.z.resize(named.size());
        out.v.resize(named.size());
        out.x.resize(named.size());
        for (std::size_t i = 0; i < named.size(); ++i) {
            const std::size_t n = static_cast<std::size_t>(named[i].tensor.numel());
            scratch.resize(n);
            r.f32_block(scratch.data(), n);
            out.z[i].assign(scratch.begin(), scratch.end());
            r.f32_block(scratch.data(), n);
            out.v[i].assign(scratch.begin(), scratch.end());
            const auto xd = named[i].tensor.data();
            out.x[i].assign(xd.begin(), xd.end());
        }
    }
    if (r.p != r.end) throw FormatError("trailing bytes in checkpoint: " + path);
    return out;
}

}  // namespace nanotfm
