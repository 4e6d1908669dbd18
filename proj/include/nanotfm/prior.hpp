#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "nanotfm/model.hpp"
#include "nanotfm/rng.hpp"

// Pre-generated training data: a simple synthetic tabular prior, an HDF5 dump
// writer and a streaming loader. Dumps are homogeneous per file (fixed rows,
// cols and class count).

namespace nanotfm {

struct SyntheticPriorConfig {
    int rows = 150;
    int cols = 5;
    int num_classes = 2;
    int latent_dim = 4;
    int hidden_dim = 16;
    double noise_scale = 0.1;
    std::uint64_t seed = 0;

    void validate() const {
        if (rows < 10) throw ConfigError("prior rows must be >= 10");
        if (cols < 1) throw ConfigError("prior cols must be >= 1");
        if (num_classes < 2) throw ConfigError("prior num_classes must be >= 2");
        if (num_classes > rows) throw ConfigError("more classes than rows");
        if (latent_dim < 1 || hidden_dim < 1)
            throw ConfigError("latent_dim and hidden_dim must be >= 1");
        if (noise_scale < 0) throw ConfigError("noise_scale must be >= 0");
    }
};

struct PriorDumpHeader {
    std::int64_t num_datasets = 0;
    int rows = 0;
    int cols = 0;
    int num_classes = 0;
    int format_version = 0;
    std::int64_t generator_seed = 0;
};

inline constexpr int kDumpFormatVersion = 1;

// e.g. "dump_150x5_2.h5"
std::string default_dump_name(const SyntheticPriorConfig& cfg);

// One synthetic table: features from a random two-layer nonlinear map of
// latent Gaussians plus noise and a per-column random affine; labels from
// quantile-binning the map's score column (near-balanced classes).
void generate_dataset(const SyntheticPriorConfig& cfg, Rng& rng, std::vector<float>& x,
                      std::vector<std::int16_t>& y);

// HDF5 layout: "/X" float32 (N, R, C) chunked along axis 0, "/y" int16 (N, R),
// root attributes rows/cols/num_classes/format_version/generator_seed.
void write_dump(const std::string& path, const SyntheticPriorConfig& cfg,
                std::int64_t num_datasets);

PriorDumpHeader read_dump_header(const std::string& path);

// Anything that can feed the training loop.
class BatchSource {
public:
    virtual ~BatchSource() = default;
    virtual bool next(TableBatch<float>& out) = 0;  // false once exhausted
    virtual std::int64_t datasets_drawn() const = 0;
};

// Streams batches from a dump: samples datasets without replacement per epoch
// (reshuffling each epoch, partial tails dropped) and draws the split position
// uniformly from [max(2, ceil(0.1 R)), min(R - 1, floor(0.9 R))] per batch.
// Stops after num_steps batches. Memory stays O(batch), not O(file).
class PriorDumpLoader : public BatchSource {
public:
    PriorDumpLoader(const std::string& path, std::int64_t num_steps,
                    std::int64_t batch_size, std::uint64_t seed);
    ~PriorDumpLoader() override;
    PriorDumpLoader(const PriorDumpLoader&) = delete;

    const PriorDumpHeader& header() const { return header_; }
    std::int64_t num_steps() const { return num_steps_; }
    std::int64_t batch_size() const { return batch_size_; }

    bool next(TableBatch<float>& out) override;
    std::int64_t datasets_drawn() const override { return drawn_; }

    // Replays the index/split draws for n batches without reading data;
    // used to resume training from a checkpoint.
    void skip(std::int64_t batches);

    struct Hdf5;  // opaque HDF5 handle bundle

private:
    void advance_epoch_if_needed();
    std::int64_t draw_split();

    std::unique_ptr<Hdf5> h5_;
    PriorDumpHeader header_;
    std::int64_t num_steps_ = 0;
    std::int64_t batch_size_ = 0;
    std::int64_t steps_done_ = 0;
    std::int64_t drawn_ = 0;
    std::int64_t pos_ = 0;
    std::vector<std::int64_t> perm_;
    Rng rng_;
};

// Bounded prefetcher: one worker thread pulls batches from the wrapped source
// ahead of the consumer; order is unchanged, so seeded runs stay deterministic.
class PrefetchingSource : public BatchSource {
public:
    PrefetchingSource(BatchSource& inner, int depth = 2);
    ~PrefetchingSource() override;
    bool next(TableBatch<float>& out) override;
    std::int64_t datasets_drawn() const override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace nanotfm
