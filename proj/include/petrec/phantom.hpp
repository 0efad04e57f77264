#pragma once

#include <cmath>
#include <map>
#include <string>

#include "petrec/core.hpp"
#include "petrec/metrics.hpp"
#include "petrec/projector.hpp"
#include "petrec/rng.hpp"

// Procedural ellipse-composite brain phantoms: a tilted brain ellipse with a
// gray-matter ring, white-matter interior, a few low-contrast texture
// ellipses, and hot tumor disks of distinct radii. All geometry is drawn
// from the spec seed, so phantoms are bit-reproducible.

namespace petrec {

struct PhantomSpec {
    std::uint64_t seed = 0;
    int n_background_ellipses = 3;
    int n_tumors = 2;
    double tumor_radius_min = 2.5;  // pixels
    double tumor_radius_max = 5.5;
    std::map<std::string, double> activity_levels = {
        {"background", 0.0}, {"gray", 1.0}, {"white", 0.5}, {"ellipse", 0.75}, {"tumor", 2.0}};
};

struct ScanSpec {
    double total_counts = 1e6;
    double randoms_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct PhantomData {
    Image image;
    RoiSpec roi;
};

namespace detail {

struct Ellipse {
    double cx, cy, a, b, tilt;

    bool contains(double x, double y, double scale = 1.0) const {
        const double dx = x - cx, dy = y - cy;
        const double ct = std::cos(tilt), st = std::sin(tilt);
        const double u = dx * ct + dy * st;
        const double v = -dx * st + dy * ct;
        const double sa = a * scale, sb = b * scale;
        return (u * u) / (sa * sa) + (v * v) / (sb * sb) <= 1.0;
    }
};

}  // namespace detail

namespace detail {

inline PhantomData make_phantom_attempt(const PhantomSpec& spec, const GridSpec& grid,
                                        std::uint64_t attempt) {
    const int n = grid.n_pixels_per_side;
    const double ps = grid.pixel_size;
    const double half_idx = 0.5 * (n - 1);
    Rng rng(substream(spec.seed, "phantom", attempt));

    auto level = [&](const char* name) {
        auto it = spec.activity_levels.find(name);
        return it == spec.activity_levels.end() ? 0.0 : it->second;
    };

    detail::Ellipse brain;
    brain.cx = rng.uniform(-0.02, 0.02) * n * ps;
    brain.cy = rng.uniform(-0.02, 0.02) * n * ps;
    brain.a = rng.uniform(0.34, 0.38) * n * ps;
    brain.b = rng.uniform(0.40, 0.45) * n * ps;
    brain.tilt = rng.uniform(0.0, std::numbers::pi);
    const double inner_scale = rng.uniform(0.76, 0.82);

    std::vector<detail::Ellipse> textures;
    for (int i = 0; i < spec.n_background_ellipses; ++i) {
        // center drawn well inside the white-matter ellipse
        double ux, uy;
        do {
            ux = rng.uniform(-1.0, 1.0);
            uy = rng.uniform(-1.0, 1.0);
        } while (ux * ux + uy * uy > 1.0);
        const double ct = std::cos(brain.tilt), st = std::sin(brain.tilt);
        const double ex = 0.55 * inner_scale * (ux * brain.a);
        const double ey = 0.55 * inner_scale * (uy * brain.b);
        detail::Ellipse e;
        e.cx = brain.cx + ex * ct - ey * st;
        e.cy = brain.cy + ex * st + ey * ct;
        e.a = rng.uniform(0.05, 0.12) * n * ps;
        e.b = rng.uniform(0.05, 0.12) * n * ps;
        e.tilt = rng.uniform(0.0, std::numbers::pi);
        textures.push_back(e);
    }

    struct Tumor {
        double cx, cy, r;
    };
    std::vector<Tumor> tumors;
    const double span = spec.tumor_radius_max - spec.tumor_radius_min;
    for (int i = 0; i < spec.n_tumors; ++i) {
        Tumor t{};
        // distinct radii: each tumor draws from its own sub-interval
        const double lo = spec.tumor_radius_min + span * i / spec.n_tumors;
        const double hi = spec.tumor_radius_min + span * (i + 0.8) / spec.n_tumors;
        t.r = rng.uniform(lo, hi) * ps;
        const double min_axis = std::min(brain.a, brain.b) * inner_scale;
        for (int attempt = 0; attempt < 200; ++attempt) {
            double ux, uy;
            do {
                ux = rng.uniform(-1.0, 1.0);
                uy = rng.uniform(-1.0, 1.0);
            } while (ux * ux + uy * uy > 1.0);
            const double shrink = std::max(0.1, 1.0 - (t.r + 2.0 * ps) / min_axis);
            const double ct = std::cos(brain.tilt), st = std::sin(brain.tilt);
            const double ex = shrink * inner_scale * ux * brain.a;
            const double ey = shrink * inner_scale * uy * brain.b;
            t.cx = brain.cx + ex * ct - ey * st;
            t.cy = brain.cy + ex * st + ey * ct;
            bool clear = true;
            for (const Tumor& other : tumors)
                if (std::hypot(t.cx - other.cx, t.cy - other.cy) < t.r + other.r + 2.0 * ps)
                    clear = false;
            if (clear) break;
        }
        tumors.push_back(t);
    }

    PhantomData out;
    out.image = Tensor({n, n});
    Image labels({n, n});  // 0 bkg, 1 gray, 2 white, 3 texture, 4.. tumors
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            const double x = (c - half_idx) * ps;
            const double y = (half_idx - r) * ps;
            double v = level("background");
            double lab = 0.0;
            if (brain.contains(x, y)) {
                v = level("gray");
                lab = 1.0;
                if (brain.contains(x, y, inner_scale)) {
                    v = level("white");
                    lab = 2.0;
                    for (const detail::Ellipse& e : textures)
                        if (e.contains(x, y)) {
                            v = level("ellipse");
                            lab = 3.0;
                        }
                    for (std::size_t t = 0; t < tumors.size(); ++t)
                        if (std::hypot(x - tumors[t].cx, y - tumors[t].cy) <= tumors[t].r) {
                            v = level("tumor");
                            lab = 4.0 + static_cast<double>(t);
                        }
                }
            }
            out.image.at(r, c) = v;
            labels.at(r, c) = lab;
        }

    for (std::size_t t = 0; t < tumors.size(); ++t) {
        Image mask({n, n});
        for (std::size_t i = 0; i < labels.numel(); ++i)
            mask[i] = labels[i] == 4.0 + static_cast<double>(t) ? 1.0 : 0.0;
        out.roi.tumor_masks.push_back(std::move(mask));
    }
    // background ROI: plain white matter, kept clear of tumors and the ring
    out.roi.background_mask = Tensor({n, n});
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            if (labels.at(r, c) != 2.0) continue;
            const double x = (c - half_idx) * ps;
            const double y = (half_idx - r) * ps;
            if (!brain.contains(x, y, inner_scale * 0.92)) continue;
            bool clear = true;
            for (const Tumor& t : tumors)
                if (std::hypot(x - t.cx, y - t.cy) <= t.r + 2.0 * ps) clear = false;
            if (clear) out.roi.background_mask.at(r, c) = 1.0;
        }
    return out;
}

}  // namespace detail

inline PhantomData make_phantom_full(const PhantomSpec& spec, const GridSpec& grid) {
    for (const auto& [name, level] : spec.activity_levels)
        check(level >= 0.0, "make_phantom: negative activity for region " + name);
    check(spec.n_tumors >= 0 && spec.n_background_ellipses >= 0, "make_phantom: negative counts");
    check(spec.tumor_radius_min > 0.0 && spec.tumor_radius_max >= spec.tumor_radius_min,
          "make_phantom: bad tumor radius range");

    // A draw is degenerate when a ROI mask covers no pixel centers (tumors
    // too large for the grid, or crowding out the background region). Retry
    // with chained seeds so results stay deterministic; give up loudly.
    for (std::uint64_t attempt = 0; attempt < 20; ++attempt) {
        PhantomData out = detail::make_phantom_attempt(spec, grid, attempt);
        bool ok = out.roi.background_mask.sum() >= 4.0;
        for (const Image& m : out.roi.tumor_masks) ok = ok && m.sum() >= 1.0;
        if (ok) return out;
    }
    check(false,
          "make_phantom: no valid ROI layout after 20 attempts; tumor radii are "
          "likely too large for this grid");
    return {};  // unreachable
}

inline Image make_phantom(const PhantomSpec& spec, const GridSpec& grid) {
    return make_phantom_full(spec, grid).image;
}

struct ScanData {
    Sinogram y;           // observed counts
    Sinogram b;           // known mean of uniform randoms
    Image x_scaled;       // phantom in count-consistent activity units
    double count_scale = 0.0;
};

/// Scales the phantom so expected trues hit (1-randoms_fraction)*total_counts,
/// adds a uniform randoms mean, and draws Poisson counts.
inline ScanData simulate_scan(const Image& x_true, const SystemModel& model,
                              const ScanSpec& scan) {
    check(scan.total_counts > 0.0, "simulate_scan: total_counts must be positive");
    check(scan.randoms_fraction >= 0.0 && scan.randoms_fraction < 1.0,
          "simulate_scan: randoms_fraction outside [0,1)");
    check(static_cast<int>(x_true.numel()) == model.matrix.cols,
          "simulate_scan: image/grid mismatch");
    for (std::size_t i = 0; i < x_true.numel(); ++i)
        check(x_true[i] >= 0.0, "simulate_scan: negative activity");

    Sinogram trues({model.sino.n_angles, model.sino.n_bins});
    model.matrix.apply(x_true.data.data(), trues.data.data());
    const double t_sum = trues.sum();
    check(t_sum > 0.0, "simulate_scan: phantom projects to zero counts, cannot scale");

    ScanData out;
    out.count_scale = (1.0 - scan.randoms_fraction) * scan.total_counts / t_sum;
    out.b = Tensor({model.sino.n_angles, model.sino.n_bins},
                   scan.randoms_fraction * scan.total_counts /
                       static_cast<double>(model.matrix.rows));
    out.x_scaled = x_true;
    for (double& v : out.x_scaled.data) v *= out.count_scale;

    Rng rng(substream(scan.seed, "scan"));
    out.y = Tensor({model.sino.n_angles, model.sino.n_bins});
    for (std::size_t i = 0; i < out.y.numel(); ++i)
        out.y[i] = static_cast<double>(rng.poisson(out.count_scale * trues[i] + out.b[i]));
    return out;
}

}  // namespace petrec
