#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>

namespace nanotfm {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Shape: dense row-major extents, rank <= 4
// ---------------------------------------------------------------------------

struct Shape {
    static constexpr int kMaxRank = 4;

    std::array<std::int64_t, kMaxRank> d{1, 1, 1, 1};
    int rank = 0;

    Shape() = default;
    Shape(std::initializer_list<std::int64_t> dims) {
        if (static_cast<int>(dims.size()) > kMaxRank)
            throw ShapeError("rank > 4 not supported");
        rank = static_cast<int>(dims.size());
        int i = 0;
        for (auto v : dims) {
            if (v < 0) throw ShapeError("negative extent in shape");
            d[i++] = v;
        }
    }

    std::int64_t operator[](int i) const { return d[i]; }
    std::int64_t& operator[](int i) { return d[i]; }

    std::int64_t numel() const {
        std::int64_t n = 1;
        for (int i = 0; i < rank; ++i) n *= d[i];
        return n;
    }

    bool operator==(const Shape& o) const {
        if (rank != o.rank) return false;
        for (int i = 0; i < rank; ++i)
            if (d[i] != o.d[i]) return false;
        return true;
    }
    bool operator!=(const Shape& o) const { return !(*this == o); }

    std::string str() const {
        if (rank == 0) return "scalar";
        std::string s;
        for (int i = 0; i < rank; ++i) {
            if (i) s += "x";
            s += std::to_string(d[i]);
        }
        return s;
    }
};

// ---------------------------------------------------------------------------
// Deterministic mode. All reductions in this library already run in a fixed
// order; the flag additionally pins the kernel backend and thread count at
// the moment it is enabled so a run's effective configuration is frozen.
// ---------------------------------------------------------------------------

void set_deterministic(bool on);
bool deterministic();

// Reads a positive integer environment variable; fallback on absence/garbage.
int env_int(const char* name, int fallback);

}  // namespace nanotfm
