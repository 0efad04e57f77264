#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "petrec/core.hpp"

// Parallel-beam strip-integral system model. Each matrix entry is the exact
// area of a pixel square clipped against a detector strip, divided by the
// bin width, so forward projection integrates activity over strips.

namespace petrec {

struct GridSpec {
    int n_pixels_per_side = 64;
    double pixel_size = 1.0;
};

struct SinogramSpec {
    int n_angles = 90;  // views over [0, pi)
    int n_bins = 96;    // radial bins, centered on the axis
    double bin_width = 1.0;
};

struct SystemModel {
    CsrMatrix matrix;    // (n_angles*n_bins) x (n^2)
    Image sensitivity;   // A^T 1, reshaped to the grid
    Image fov;           // 1 inside the inscribed circle, 0 outside
    GridSpec grid;
    SinogramSpec sino;
};

namespace detail {

struct Vec2 {
    double x, y;
};

// Clips a convex polygon against the half-plane x*nx + y*ny <= c.
inline int clip_halfplane(const Vec2* in, int n_in, Vec2* out, double nx, double ny, double c) {
    int n_out = 0;
    for (int i = 0; i < n_in; ++i) {
        const Vec2& p = in[i];
        const Vec2& q = in[(i + 1) % n_in];
        const double dp = p.x * nx + p.y * ny - c;
        const double dq = q.x * nx + q.y * ny - c;
        if (dp <= 0.0) out[n_out++] = p;
        if ((dp < 0.0 && dq > 0.0) || (dp > 0.0 && dq < 0.0)) {
            const double t = dp / (dp - dq);
            out[n_out++] = {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
        }
    }
    return n_out;
}

inline double polygon_area(const Vec2* v, int n) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const Vec2& p = v[i];
        const Vec2& q = v[(i + 1) % n];
        acc += p.x * q.y - q.x * p.y;
    }
    return 0.5 * acc;
}

/// Area of the pixel square centered at (xc,yc) with the band
/// u_lo <= x cos(phi) + y sin(phi) <= u_hi.
inline double pixel_strip_area(double xc, double yc, double half, double cph, double sph,
                               double u_lo, double u_hi) {
    Vec2 a[8] = {{xc - half, yc - half},
                 {xc + half, yc - half},
                 {xc + half, yc + half},
                 {xc - half, yc + half}};
    Vec2 b[8];
    int n = clip_halfplane(a, 4, b, cph, sph, u_hi);
    if (n < 3) return 0.0;
    n = clip_halfplane(b, n, a, -cph, -sph, -u_lo);
    if (n < 3) return 0.0;
    return polygon_area(a, n);
}

}  // namespace detail

inline SystemModel build_system_model(const GridSpec& grid, const SinogramSpec& sino) {
    const int n = grid.n_pixels_per_side;
    const double ps = grid.pixel_size;
    const int na = sino.n_angles, nb = sino.n_bins;
    const double w = sino.bin_width;
    check(n >= 1 && ps > 0.0, "build_system_model: invalid grid");
    check(na >= 1 && nb >= 1 && w > 0.0, "build_system_model: invalid sinogram spec");
    check(nb * w >= n * ps - 1e-12,
          "build_system_model: radial extent does not cover the field of view");

    const double half_idx = 0.5 * (n - 1);
    const double r_fov = 0.5 * n * ps;
    const double half_px = 0.5 * ps;
    const int n_pix = n * n;

    SystemModel model;
    model.grid = grid;
    model.sino = sino;
    model.fov = Tensor({n, n});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            const double xc = (c - half_idx) * ps;
            const double yc = (half_idx - r) * ps;
            model.fov.at(r, c) = std::hypot(xc, yc) <= r_fov ? 1.0 : 0.0;
        }

    CsrMatrix& m = model.matrix;
    m.rows = na * nb;
    m.cols = n_pix;
    m.row_offsets.assign(static_cast<std::size_t>(m.rows) + 1, 0);

    std::vector<std::vector<std::pair<std::uint32_t, double>>> buckets(nb);
    const double area_floor = 1e-16 * ps * ps;
    for (int a = 0; a < na; ++a) {
        const double phi = a * std::numbers::pi / na;
        const double cph = std::cos(phi), sph = std::sin(phi);
        const double reach = half_px * (std::abs(cph) + std::abs(sph));
        for (auto& bucket : buckets) bucket.clear();
        for (int r = 0; r < n; ++r) {
            for (int c = 0; c < n; ++c) {
                if (model.fov.at(r, c) == 0.0) continue;
                const double xc = (c - half_idx) * ps;
                const double yc = (half_idx - r) * ps;
                const double u0 = xc * cph + yc * sph;
                int t_lo = static_cast<int>(std::floor((u0 - reach) / w + 0.5 * nb));
                int t_hi = static_cast<int>(std::floor((u0 + reach) / w + 0.5 * nb));
                t_lo = std::max(t_lo, 0);
                t_hi = std::min(t_hi, nb - 1);
                for (int t = t_lo; t <= t_hi; ++t) {
                    const double u_lo = (t - 0.5 * nb) * w;
                    const double area = detail::pixel_strip_area(xc, yc, half_px, cph, sph,
                                                                 u_lo, u_lo + w);
                    if (area > area_floor)
                        buckets[t].emplace_back(static_cast<std::uint32_t>(r * n + c), area / w);
                }
            }
        }
        for (int t = 0; t < nb; ++t) {
            // pixels were visited in column-index order, so each bucket is sorted
            for (const auto& [col, val] : buckets[t]) {
                m.col_idx.push_back(col);
                m.vals.push_back(val);
            }
            m.row_offsets[static_cast<std::size_t>(a) * nb + t + 1] = m.col_idx.size();
        }
    }

    Tensor ones({m.rows}, 1.0);
    model.sensitivity = Tensor({n, n});
    m.apply_transpose(ones.data.data(), model.sensitivity.data.data());
    return model;
}

inline Sinogram forward(const SystemModel& model, const Image& x, const Sinogram& b) {
    check(static_cast<int>(x.numel()) == model.matrix.cols, "forward: image size mismatch");
    check(static_cast<int>(b.numel()) == model.matrix.rows, "forward: background size mismatch");
    Sinogram out({model.sino.n_angles, model.sino.n_bins});
    model.matrix.apply(x.data.data(), out.data.data());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b[i];
    return out;
}

inline Image backproject(const SystemModel& model, const Sinogram& s) {
    check(static_cast<int>(s.numel()) == model.matrix.rows, "backproject: size mismatch");
    Image out({model.grid.n_pixels_per_side, model.grid.n_pixels_per_side});
    model.matrix.apply_transpose(s.data.data(), out.data.data());
    return out;
}

/// Sinogram of rot90(f, 1) expressed in terms of the sinogram of f:
/// views shift by a quarter of the angular range, wrapped views flip in s.
/// Requires an even number of views.
inline Sinogram rotate_sinogram_quarter(const Sinogram& s, int quarter_turns) {
    check(s.shape.size() == 2, "rotate_sinogram_quarter: 2D sinogram required");
    const int na = s.shape[0], nb = s.shape[1];
    check(na % 2 == 0, "rotate_sinogram_quarter: even view count required");
    const int q = ((quarter_turns % 4) + 4) % 4;
    Sinogram out = s;
    for (int k = 0; k < q; ++k) {
        Sinogram next({na, nb});
        const int shift = na / 2;
        for (int a = 0; a < na; ++a)
            for (int t = 0; t < nb; ++t)
                next.at(a, t) = a >= shift ? out.at(a - shift, t)
                                           : out.at(a + shift, nb - 1 - t);
        out = std::move(next);
    }
    return out;
}

}  // namespace petrec
