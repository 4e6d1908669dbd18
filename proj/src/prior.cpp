#include "nanotfm/prior.hpp"

#include <hdf5.h>

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>
#include <numeric>
#include <thread>

namespace nanotfm {

std::string default_dump_name(const SyntheticPriorConfig& cfg) {
    return "dump_" + std::to_string(cfg.rows) + "x" + std::to_string(cfg.cols) + "_" +
           std::to_string(cfg.num_classes) + ".h5";
}

void generate_dataset(const SyntheticPriorConfig& cfg, Rng& rng, std::vector<float>& x,
                      std::vector<std::int16_t>& y) {
    cfg.validate();
    const int r = cfg.rows, c = cfg.cols, l = cfg.latent_dim, h = cfg.hidden_dim;
    x.assign(static_cast<std::size_t>(r) * c, 0.0f);
    y.assign(r, 0);

    // random two-layer map: latent -> hidden (tanh) -> C features + 1 score
    std::vector<double> w1(static_cast<std::size_t>(l) * h), b1(h);
    std::vector<double> w2(static_cast<std::size_t>(h) * (c + 1)), b2(c + 1);
    const double s1 = 1.0 / std::sqrt(static_cast<double>(l));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(h));
    for (auto& v : w1) v = rng.normal() * s1;
    for (auto& v : b1) v = rng.normal() * 0.3;
    for (auto& v : w2) v = rng.normal() * s2;
    for (auto& v : b2) v = rng.normal() * 0.3;

    std::vector<double> scores(r);
    std::vector<double> latent(l), hidden(h);
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < l; ++j) latent[j] = rng.normal();
        for (int j = 0; j < h; ++j) {
            double s = b1[j];
            for (int q = 0; q < l; ++q) s += latent[q] * w1[q * h + j];
            hidden[j] = std::tanh(s);
        }
        for (int j = 0; j <= c; ++j) {
            double s = b2[j];
            for (int q = 0; q < h; ++q) s += hidden[q] * w2[q * (c + 1) + j];
            if (j < c)
                x[static_cast<std::size_t>(i) * c + j] =
                    static_cast<float>(s + cfg.noise_scale * rng.normal());
            else
                scores[i] = s;
        }
    }

    // per-dataset random affine rescaling of the feature columns
    for (int j = 0; j < c; ++j) {
        const float sc = static_cast<float>(std::exp(rng.uniform(-1.5, 1.5)));
        const float sh = static_cast<float>(rng.normal());
        for (int i = 0; i < r; ++i) {
            float& v = x[static_cast<std::size_t>(i) * c + j];
            v = v * sc + sh;
        }
    }

    // labels: quantile-bin the score at empirical quantiles -> class counts
    // differ by at most one
    std::vector<int> order(r);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] < scores[b];
        return a < b;
    });
    for (int rank = 0; rank < r; ++rank)
        y[order[rank]] = static_cast<std::int16_t>(
            (static_cast<std::int64_t>(rank) * cfg.num_classes) / r);
}

// ---------------------------------------------------------------------------
// HDF5 helpers
// ---------------------------------------------------------------------------

namespace {

struct H5Err {
    std::string path;
    [[noreturn]] void io(const std::string& what) const {
        throw IoError(what + ": " + path);
    }
    [[noreturn]] void fmt(const std::string& what) const {
        throw FormatError(what + " in " + path);
    }
};

void write_i64_attr(hid_t loc, const char* name, std::int64_t value) {
    hid_t space = H5Screate(H5S_SCALAR);
    hid_t attr = H5Acreate2(loc, name, H5T_STD_I64LE, space, H5P_DEFAULT, H5P_DEFAULT);
    H5Awrite(attr, H5T_NATIVE_INT64, &value);
    H5Aclose(attr);
    H5Sclose(space);
}

std::int64_t read_i64_attr(hid_t loc, const char* name, const H5Err& err) {
    if (H5Aexists(loc, name) <= 0) err.fmt(std::string("missing attribute '") + name + "'");
    hid_t attr = H5Aopen(loc, name, H5P_DEFAULT);
    std::int64_t v = 0;
    if (H5Aread(attr, H5T_NATIVE_INT64, &v) < 0) {
        H5Aclose(attr);
        err.fmt(std::string("unreadable attribute '") + name + "'");
    }
    H5Aclose(attr);
    return v;
}

}  // namespace

void write_dump(const std::string& path, const SyntheticPriorConfig& cfg,
                std::int64_t num_datasets) {
    cfg.validate();
    if (num_datasets <= 0) throw ConfigError("num_datasets must be positive");
    const H5Err err{path};
    const hsize_t n = static_cast<hsize_t>(num_datasets);
    const hsize_t r = static_cast<hsize_t>(cfg.rows);
    const hsize_t c = static_cast<hsize_t>(cfg.cols);

    // no object timestamps: files with the same seed must be byte-identical
    hid_t fcpl = H5Pcreate(H5P_FILE_CREATE);
    H5Pset_obj_track_times(fcpl, 0);
    hid_t file = H5Fcreate(path.c_str(), H5F_ACC_TRUNC, fcpl, H5P_DEFAULT);
    H5Pclose(fcpl);
    if (file < 0) err.io("cannot create dump file");

    const hsize_t chunk_n = std::min<hsize_t>(256, n);
    hsize_t xdims[3] = {n, r, c};
    hsize_t xchunk[3] = {chunk_n, r, c};
    hid_t xspace = H5Screate_simple(3, xdims, nullptr);
    hid_t xdcpl = H5Pcreate(H5P_DATASET_CREATE);
    H5Pset_chunk(xdcpl, 3, xchunk);
    H5Pset_obj_track_times(xdcpl, 0);
    hid_t xset = H5Dcreate2(file, "/X", H5T_IEEE_F32LE, xspace, H5P_DEFAULT, xdcpl,
                            H5P_DEFAULT);

    hsize_t ydims[2] = {n, r};
    hsize_t ychunk[2] = {chunk_n, r};
    hid_t yspace = H5Screate_simple(2, ydims, nullptr);
    hid_t ydcpl = H5Pcreate(H5P_DATASET_CREATE);
    H5Pset_chunk(ydcpl, 2, ychunk);
    H5Pset_obj_track_times(ydcpl, 0);
    hid_t yset = H5Dcreate2(file, "/y", H5T_STD_I16LE, yspace, H5P_DEFAULT, ydcpl,
                            H5P_DEFAULT);
    if (xset < 0 || yset < 0) err.io("cannot create datasets");

    write_i64_attr(file, "rows", cfg.rows);
    write_i64_attr(file, "cols", cfg.cols);
    write_i64_attr(file, "num_classes", cfg.num_classes);
    write_i64_attr(file, "format_version", kDumpFormatVersion);
    write_i64_attr(file, "generator_seed", static_cast<std::int64_t>(cfg.seed));

    // generate and write block-wise so memory stays bounded
    Rng rng(cfg.seed);
    std::vector<float> xb;
    std::vector<std::int16_t> yb;
    std::vector<float> xblock;
    std::vector<std::int16_t> yblock;
    const hsize_t block = chunk_n;
    xblock.reserve(block * r * c);
    yblock.reserve(block * r);
    for (hsize_t start = 0; start < n; start += block) {
        const hsize_t len = std::min(block, n - start);
        xblock.clear();
        yblock.clear();
        for (hsize_t i = 0; i < len; ++i) {
            generate_dataset(cfg, rng, xb, yb);
            xblock.insert(xblock.end(), xb.begin(), xb.end());
            yblock.insert(yblock.end(), yb.begin(), yb.end());
        }
        hsize_t xoff[3] = {start, 0, 0};
        hsize_t xcnt[3] = {len, r, c};
        hid_t xmem = H5Screate_simple(3, xcnt, nullptr);
        H5Sselect_hyperslab(xspace, H5S_SELECT_SET, xoff, nullptr, xcnt, nullptr);
        if (H5Dwrite(xset, H5T_NATIVE_FLOAT, xmem, xspace, H5P_DEFAULT, xblock.data()) < 0)
            err.io("write to /X failed");
        H5Sclose(xmem);

        hsize_t yoff[2] = {start, 0};
        hsize_t ycnt[2] = {len, r};
        hid_t ymem = H5Screate_simple(2, ycnt, nullptr);
        H5Sselect_hyperslab(yspace, H5S_SELECT_SET, yoff, nullptr, ycnt, nullptr);
        if (H5Dwrite(yset, H5T_NATIVE_INT16, ymem, yspace, H5P_DEFAULT, yblock.data()) < 0)
            err.io("write to /y failed");
        H5Sclose(ymem);
    }

    H5Pclose(xdcpl);
    H5Pclose(ydcpl);
    H5Sclose(xspace);
    H5Sclose(yspace);
    H5Dclose(xset);
    H5Dclose(yset);
    if (H5Fclose(file) < 0) err.io("close failed");
}

// ---------------------------------------------------------------------------
// loader
// ---------------------------------------------------------------------------

struct PriorDumpLoader::Hdf5 {
    hid_t file = -1;
    hid_t xset = -1, yset = -1;
    hid_t xspace = -1, yspace = -1;
    std::string path;

    ~Hdf5() {
        if (xspace >= 0) H5Sclose(xspace);
        if (yspace >= 0) H5Sclose(yspace);
        if (xset >= 0) H5Dclose(xset);
        if (yset >= 0) H5Dclose(yset);
        if (file >= 0) H5Fclose(file);
    }
};

namespace {

PriorDumpHeader open_and_check(PriorDumpLoader::Hdf5& h5, const std::string& path);

}  // namespace

PriorDumpHeader read_dump_header(const std::string& path) {
    PriorDumpLoader::Hdf5 h5;
    return open_and_check(h5, path);
}

namespace {

PriorDumpHeader open_and_check(PriorDumpLoader::Hdf5& h5, const std::string& path) {
    const H5Err err{path};
    h5.path = path;
    // quiet HDF5's default stderr spew; we report through exceptions
    H5Eset_auto2(H5E_DEFAULT, nullptr, nullptr);
    h5.file = H5Fopen(path.c_str(), H5F_ACC_RDONLY, H5P_DEFAULT);
    if (h5.file < 0) err.io("cannot open dump file");

    PriorDumpHeader hd;
    hd.rows = static_cast<int>(read_i64_attr(h5.file, "rows", err));
    hd.cols = static_cast<int>(read_i64_attr(h5.file, "cols", err));
    hd.num_classes = static_cast<int>(read_i64_attr(h5.file, "num_classes", err));
    hd.format_version = static_cast<int>(read_i64_attr(h5.file, "format_version", err));
    hd.generator_seed = read_i64_attr(h5.file, "generator_seed", err);
    if (hd.format_version != kDumpFormatVersion)
        err.fmt("unsupported dump format_version " + std::to_string(hd.format_version));

    if (H5Lexists(h5.file, "/X", H5P_DEFAULT) <= 0) err.fmt("missing dataset /X");
    if (H5Lexists(h5.file, "/y", H5P_DEFAULT) <= 0) err.fmt("missing dataset /y");
    h5.xset = H5Dopen2(h5.file, "/X", H5P_DEFAULT);
    h5.yset = H5Dopen2(h5.file, "/y", H5P_DEFAULT);
    if (h5.xset < 0 || h5.yset < 0) err.fmt("unreadable dataset /X or /y");

    h5.xspace = H5Dget_space(h5.xset);
    h5.yspace = H5Dget_space(h5.yset);
    hsize_t xdims[3] = {0, 0, 0}, ydims[2] = {0, 0};
    if (H5Sget_simple_extent_ndims(h5.xspace) != 3) err.fmt("/X must have rank 3");
    if (H5Sget_simple_extent_ndims(h5.yspace) != 2) err.fmt("/y must have rank 2");
    H5Sget_simple_extent_dims(h5.xspace, xdims, nullptr);
    H5Sget_simple_extent_dims(h5.yspace, ydims, nullptr);
    if (static_cast<int>(xdims[1]) != hd.rows || static_cast<int>(xdims[2]) != hd.cols)
        err.fmt("/X extents disagree with rows/cols attributes");
    if (ydims[0] != xdims[0] || static_cast<int>(ydims[1]) != hd.rows)
        err.fmt("/y extents disagree with /X");
    hd.num_datasets = static_cast<std::int64_t>(xdims[0]);
    return hd;
}

}  // namespace

PriorDumpLoader::PriorDumpLoader(const std::string& path, std::int64_t num_steps,
                                 std::int64_t batch_size, std::uint64_t seed)
    : h5_(std::make_unique<Hdf5>()),
      num_steps_(num_steps),
      batch_size_(batch_size),
      rng_(seed) {
    if (num_steps <= 0 || batch_size <= 0)
        throw ConfigError("loader num_steps and batch_size must be positive");
    header_ = open_and_check(*h5_, path);
    if (batch_size_ > header_.num_datasets)
        throw ConfigError("batch_size " + std::to_string(batch_size_) +
                          " exceeds dump size " + std::to_string(header_.num_datasets));
    if (header_.rows < 3)
        throw FormatError("dump rows " + std::to_string(header_.rows) +
                          " too small to split in " + path);
    perm_.resize(header_.num_datasets);
    std::iota(perm_.begin(), perm_.end(), 0);
    rng_.shuffle(perm_);
}

PriorDumpLoader::~PriorDumpLoader() = default;

void PriorDumpLoader::advance_epoch_if_needed() {
    if (pos_ + batch_size_ > static_cast<std::int64_t>(perm_.size())) {
        rng_.shuffle(perm_);
        pos_ = 0;
    }
}

std::int64_t PriorDumpLoader::draw_split() {
    const std::int64_t r = header_.rows;
    const std::int64_t lo = std::max<std::int64_t>(2, (r + 9) / 10);
    const std::int64_t hi = std::min<std::int64_t>(r - 1, (9 * r) / 10);
    return lo + static_cast<std::int64_t>(rng_.uniform_int(hi - lo + 1));
}

bool PriorDumpLoader::next(TableBatch<float>& out) {
    if (steps_done_ >= num_steps_) return false;
    advance_epoch_if_needed();
    const std::int64_t split = draw_split();

    const std::int64_t r = header_.rows, c = header_.cols, b = batch_size_;
    std::vector<float> xbuf(static_cast<std::size_t>(b) * r * c);
    std::vector<float> ybuf(static_cast<std::size_t>(b) * r);
    std::vector<std::int16_t> yrow(r);
    for (std::int64_t i = 0; i < b; ++i) {
        const hsize_t idx = static_cast<hsize_t>(perm_[pos_ + i]);
        hsize_t xoff[3] = {idx, 0, 0};
        hsize_t xcnt[3] = {1, static_cast<hsize_t>(r), static_cast<hsize_t>(c)};
        hid_t xmem = H5Screate_simple(3, xcnt, nullptr);
        H5Sselect_hyperslab(h5_->xspace, H5S_SELECT_SET, xoff, nullptr, xcnt, nullptr);
        if (H5Dread(h5_->xset, H5T_NATIVE_FLOAT, xmem, h5_->xspace, H5P_DEFAULT,
                    xbuf.data() + i * r * c) < 0) {
            H5Sclose(xmem);
            throw IoError("read from /X failed: " + h5_->path);
        }
        H5Sclose(xmem);

        hsize_t yoff[2] = {idx, 0};
        hsize_t ycnt[2] = {1, static_cast<hsize_t>(r)};
        hid_t ymem = H5Screate_simple(2, ycnt, nullptr);
        H5Sselect_hyperslab(h5_->yspace, H5S_SELECT_SET, yoff, nullptr, ycnt, nullptr);
        if (H5Dread(h5_->yset, H5T_NATIVE_INT16, ymem, h5_->yspace, H5P_DEFAULT,
                    yrow.data()) < 0) {
            H5Sclose(ymem);
            throw IoError("read from /y failed: " + h5_->path);
        }
        H5Sclose(ymem);
        for (std::int64_t j = 0; j < r; ++j)
            ybuf[i * r + j] = static_cast<float>(yrow[j]);
    }
    pos_ += b;
    drawn_ += b;
    ++steps_done_;

    out.x = Tensor<float>::from({b, r, c}, std::move(xbuf));
    out.y = Tensor<float>::from({b, r}, std::move(ybuf));
    out.split = split;
    return true;
}

void PriorDumpLoader::skip(std::int64_t batches) {
    for (std::int64_t s = 0; s < batches; ++s) {
        if (steps_done_ >= num_steps_)
            throw ConfigError("cannot skip past the loader's num_steps");
        advance_epoch_if_needed();
        (void)draw_split();
        pos_ += batch_size_;
        drawn_ += batch_size_;
        ++steps_done_;
    }
}

// ---------------------------------------------------------------------------
// prefetcher
// ---------------------------------------------------------------------------

struct PrefetchingSource::Impl {
    BatchSource& inner;
    int depth;
    std::mutex m;
    std::condition_variable cv_room, cv_data;
    std::deque<TableBatch<float>> q;
    bool done = false;
    bool stop = false;
    std::exception_ptr error;
    std::int64_t delivered_datasets = 0;
    std::thread worker;

    explicit Impl(BatchSource& src, int d) : inner(src), depth(d) {
        worker = std::thread([this] { run(); });
    }

    void run() {
        for (;;) {
            TableBatch<float> b;
            bool ok = false;
            try {
                ok = inner.next(b);
            } catch (...) {
                std::lock_guard lk(m);
                error = std::current_exception();
                done = true;
                cv_data.notify_all();
                return;
            }
            std::unique_lock lk(m);
            if (!ok) {
                done = true;
                cv_data.notify_all();
                return;
            }
            cv_room.wait(lk, [&] { return stop || static_cast<int>(q.size()) < depth; });
            if (stop) return;
            q.push_back(std::move(b));
            cv_data.notify_all();
        }
    }

    ~Impl() {
        {
            std::lock_guard lk(m);
            stop = true;
        }
        cv_room.notify_all();
        worker.join();
    }
};

PrefetchingSource::PrefetchingSource(BatchSource& inner, int depth)
    : impl_(std::make_unique<Impl>(inner, std::max(1, depth))) {}

PrefetchingSource::~PrefetchingSource() = default;

bool PrefetchingSource::next(TableBatch<float>& out) {
    std::unique_lock lk(impl_->m);
    impl_->cv_data.wait(lk, [&] { return !impl_->q.empty() || impl_->done; });
    if (impl_->q.empty()) {
        if (impl_->error) std::rethrow_exception(impl_->error);
        return false;
    }
    out = std::move(impl_->q.front());
    impl_->q.pop_front();
    impl_->delivered_datasets += out.x.dim(0);
    lk.unlock();
    impl_->cv_room.notify_one();
    return true;
}

std::int64_t PrefetchingSource::datasets_drawn() const {
    std::lock_guard lk(impl_->m);
    return impl_->delivered_datasets;
}

}  // namespace nanotfm
