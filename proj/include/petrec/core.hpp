#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace petrec {

inline constexpr const char* kVersion = "0.1.0";

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian; big-endian hosts are unsupported");

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

/// Dense row-major f64 tensor. The single value type shared by images,
/// sinograms, feature maps and parameter blocks.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
        data.assign(numel_of(shape), fill);
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor dims must be positive");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool is_scalar() const { return data.size() == 1; }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    // 2D access (row, col)
    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }

    // 3D access (chan, row, col)
    double& at(int ch, int r, int c) {
        return data[(static_cast<std::size_t>(ch) * shape[1] + r) * shape[2] + c];
    }
    double at(int ch, int r, int c) const {
        return data[(static_cast<std::size_t>(ch) * shape[1] + r) * shape[2] + c];
    }

    double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }
    double min() const { return data.empty() ? 0.0 : *std::min_element(data.begin(), data.end()); }
    double max() const { return data.empty() ? 0.0 : *std::max_element(data.begin(), data.end()); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

using Image = Tensor;     // (n, n) activity map
using Sinogram = Tensor;  // (n_angles, n_bins) counts

inline double dot(const Tensor& a, const Tensor& b) {
    check(a.numel() == b.numel(), "dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.data[i] * b.data[i];
    return s;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

/// Sparse CSR matrix with exact transpose application.
struct CsrMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint64_t> row_offsets;  // rows + 1
    std::vector<std::uint32_t> col_idx;
    std::vector<double> vals;

    std::size_t nnz() const { return vals.size(); }

    void apply(const double* x, double* y) const {
        for (int r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::uint64_t k = row_offsets[r]; k < row_offsets[r + 1]; ++k)
                s += vals[k] * x[col_idx[k]];
            y[r] = s;
        }
    }

    void apply_transpose(const double* s, double* x) const {
        std::fill(x, x + cols, 0.0);
        for (int r = 0; r < rows; ++r) {
            const double sr = s[r];
            if (sr == 0.0) continue;
            for (std::uint64_t k = row_offsets[r]; k < row_offsets[r + 1]; ++k)
                x[col_idx[k]] += vals[k] * sr;
        }
    }
};

/// Exact 90-degree grid rotation; `quarter_turns` counted counter-clockwise.
/// out[r][c] = in[c][n-1-r] for one CCW turn (square images only).
inline Tensor rot90(const Tensor& img, int quarter_turns) {
    check(img.shape.size() == 2 && img.shape[0] == img.shape[1], "rot90: square 2D image required");
    const int n = img.shape[0];
    int q = ((quarter_turns % 4) + 4) % 4;
    if (q == 0) return img;
    Tensor out(img.shape);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            double v = img.at(r, c);
            if (q == 1) out.at(n - 1 - c, r) = v;
            else if (q == 2) out.at(n - 1 - r, n - 1 - c) = v;
            else out.at(c, n - 1 - r) = v;
        }
    return out;
}

/// FNV-1a 64-bit, used for file payload checksums and seed stream derivation.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

constexpr std::uint64_t fnv1a64_str(const char* s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (; *s; ++s) {
        h ^= static_cast<unsigned char>(*s);
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Static partition of [0, n) over at most `jobs` threads. Each index is
/// processed exactly once; callers keep determinism by writing to disjoint
/// per-index slots. jobs <= 1 runs inline.
template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
    if (n == 0) return;
    unsigned hw = std::thread::hardware_concurrency();
    std::size_t nthreads = jobs <= 0 ? (hw ? hw : 1) : static_cast<std::size_t>(jobs);
    nthreads = std::min<std::size_t>(nthreads, n);
    if (nthreads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    std::exception_ptr first_error;
    std::mutex err_mx;
    for (std::size_t t = 0; t < nthreads; ++t) {
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += nthreads) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mx);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace petrec
