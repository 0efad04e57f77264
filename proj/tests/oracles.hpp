#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "petrec/core.hpp"

// Test-side oracles, implemented independently of the library code under
// test: finite differences, geometric areas by closed form and subsampling,
// and sample statistics.

namespace oracles {

// Central finite differences of a scalar function of a flat vector.
inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double h) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double x0 = x[i];
        x[i] = x0 + h;
        const double fp = f(x);
        x[i] = x0 - h;
        const double fm = f(x);
        x[i] = x0;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want,
                          double floor = 1.0) {
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double scale = std::max(floor, std::fabs(want[i]));
        worst = std::max(worst, std::fabs(got[i] - want[i]) / scale);
    }
    return worst;
}

// Area of {p : p.n <= u} inside a disk of radius R centered at the origin.
inline double disk_halfplane_area(double u, double R) {
    if (u <= -R) return 0.0;
    if (u >= R) return std::numbers::pi * R * R;
    return R * R * std::acos(-u / R) + u * std::sqrt(R * R - u * u);
}

// Area of the strip u in [u1, u2] inside the disk.
inline double disk_strip_area(double u1, double u2, double R) {
    return disk_halfplane_area(u2, R) - disk_halfplane_area(u1, R);
}

// Strip coverage of one pixel square by regular subsampling; an independent
// check of the polygon-clipping areas in the projector.
inline double pixel_strip_area_subsampled(double cx, double cy, double ps, double angle,
                                          double u1, double u2, int samples_per_side) {
    const double nx = std::cos(angle), ny = std::sin(angle);
    const int m = samples_per_side;
    long hits = 0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) {
            const double x = cx + ps * ((i + 0.5) / m - 0.5);
            const double y = cy + ps * ((j + 0.5) / m - 0.5);
            const double u = x * nx + y * ny;
            if (u >= u1 && u < u2) ++hits;
        }
    return ps * ps * static_cast<double>(hits) / (static_cast<double>(m) * m);
}

struct Moments {
    double mean = 0.0;
    double var = 0.0;
};

inline Moments moments(const std::vector<double>& xs) {
    Moments m;
    for (double x : xs) m.mean += x;
    m.mean /= static_cast<double>(xs.size());
    for (double x : xs) m.var += (x - m.mean) * (x - m.mean);
    m.var /= static_cast<double>(xs.size() > 1 ? xs.size() - 1 : 1);
    return m;
}

// Scratch directory per test binary, recreated on first use.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const std::filesystem::path dir = std::filesystem::temp_directory_path() / ("petrec_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline petrec::Tensor random_tensor(std::mt19937_64& gen, std::vector<int> shape, double lo,
                                    double hi) {
    petrec::Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& v : t.data) v = d(gen);
    return t;
}

}  // namespace oracles
