#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include "json.hpp"
#include "petrec/core.hpp"

namespace petrec {

struct RoiSpec {
    std::vector<Image> tumor_masks;  // 0/1 images, disjoint
    Image background_mask;
};

inline double rmse(const Image& xhat, const Image& x_true) {
    check(xhat.same_shape(x_true), "rmse: shape mismatch");
    const double ref = norm2(x_true);
    check(ref > 0.0, "rmse: reference image is identically zero");
    double acc = 0.0;
    for (std::size_t i = 0; i < xhat.numel(); ++i) {
        const double d = xhat[i] - x_true[i];
        acc += d * d;
    }
    return std::sqrt(acc) / ref;
}

/// Peak taken as max of the ground truth; identical images give +inf.
inline double psnr(const Image& xhat, const Image& x_true) {
    check(xhat.same_shape(x_true), "psnr: shape mismatch");
    const double peak = x_true.max();
    check(peak > 0.0, "psnr: reference image has no positive peak");
    double acc = 0.0;
    for (std::size_t i = 0; i < xhat.numel(); ++i) {
        const double d = xhat[i] - x_true[i];
        acc += d * d;
    }
    if (acc == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(peak / std::sqrt(acc / static_cast<double>(xhat.numel())));
}

namespace detail {

inline int reflect_index(int i, int n) {
    while (i < 0 || i >= n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - 1 - i;
    }
    return i;
}

/// Separable Gaussian filter with symmetric boundary reflection.
inline Image gauss_filter(const Image& x, const std::vector<double>& k) {
    const int n0 = x.shape[0], n1 = x.shape[1];
    const int half = static_cast<int>(k.size()) / 2;
    Image tmp({n0, n1}), out({n0, n1});
    for (int r = 0; r < n0; ++r)
        for (int c = 0; c < n1; ++c) {
            double acc = 0.0;
            for (int d = -half; d <= half; ++d)
                acc += k[d + half] * x.at(r, reflect_index(c + d, n1));
            tmp.at(r, c) = acc;
        }
    for (int r = 0; r < n0; ++r)
        for (int c = 0; c < n1; ++c) {
            double acc = 0.0;
            for (int d = -half; d <= half; ++d)
                acc += k[d + half] * tmp.at(reflect_index(r + d, n0), c);
            out.at(r, c) = acc;
        }
    return out;
}

}  // namespace detail

/// Mean SSIM with an 11x11 Gaussian window (std 1.5); the dynamic range is
/// the maximum of the ground truth.
inline double ssim(const Image& xhat, const Image& x_true) {
    check(xhat.same_shape(x_true) && xhat.shape.size() == 2, "ssim: 2D images required");
    const double peak = x_true.max();
    check(peak > 0.0, "ssim: reference image has no positive peak");
    const double c1 = 0.01 * peak * 0.01 * peak;
    const double c2 = 0.03 * peak * 0.03 * peak;

    std::vector<double> k(11);
    double ksum = 0.0;
    for (int i = 0; i < 11; ++i) {
        const double d = i - 5;
        k[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        ksum += k[i];
    }
    for (double& v : k) v /= ksum;

    Image mu1 = detail::gauss_filter(xhat, k);
    Image mu2 = detail::gauss_filter(x_true, k);
    Image x11({xhat.shape[0], xhat.shape[1]}), x22 = x11, x12 = x11;
    for (std::size_t i = 0; i < xhat.numel(); ++i) {
        x11[i] = xhat[i] * xhat[i];
        x22[i] = x_true[i] * x_true[i];
        x12[i] = xhat[i] * x_true[i];
    }
    Image e11 = detail::gauss_filter(x11, k);
    Image e22 = detail::gauss_filter(x22, k);
    Image e12 = detail::gauss_filter(x12, k);

    double acc = 0.0;
    for (std::size_t i = 0; i < xhat.numel(); ++i) {
        const double m1 = mu1[i], m2 = mu2[i];
        const double s1 = e11[i] - m1 * m1;
        const double s2 = e22[i] - m2 * m2;
        const double s12 = e12[i] - m1 * m2;
        acc += ((2.0 * m1 * m2 + c1) * (2.0 * s12 + c2)) /
               ((m1 * m1 + m2 * m2 + c1) * (s1 + s2 + c2));
    }
    return acc / static_cast<double>(xhat.numel());
}

inline double masked_mean(const Image& x, const Image& mask) {
    check(x.same_shape(mask), "masked_mean: shape mismatch");
    double acc = 0.0, cnt = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (mask[i] > 0.0) {
            acc += x[i];
            cnt += 1.0;
        }
    check(cnt > 0.0, "masked_mean: empty mask");
    return acc / cnt;
}

/// Contrast recovery per tumor: measured over-background contrast divided
/// by the true contrast.
inline std::vector<double> crc(const Image& xhat, const Image& x_true, const RoiSpec& roi) {
    check(!roi.tumor_masks.empty(), "crc: no tumor masks");
    const double bkg_hat = masked_mean(xhat, roi.background_mask);
    const double bkg_true = masked_mean(x_true, roi.background_mask);
    check(bkg_hat != 0.0 && bkg_true != 0.0, "crc: zero background mean");
    std::vector<double> out;
    out.reserve(roi.tumor_masks.size());
    for (const Image& mask : roi.tumor_masks) {
        const double contrast_true = masked_mean(x_true, mask) / bkg_true - 1.0;
        check(contrast_true != 0.0, "crc: true tumor/background contrast is 1");
        out.push_back((masked_mean(xhat, mask) / bkg_hat - 1.0) / contrast_true);
    }
    return out;
}

struct BiasVariance {
    double bias = 0.0;
    double variance = 0.0;
};

inline BiasVariance bias_variance(const std::vector<Image>& recs, const Image& x_true) {
    check(recs.size() >= 2, "bias_variance: at least 2 realizations required");
    Image mean(x_true.shape);
    for (const Image& r : recs) {
        check(r.same_shape(x_true), "bias_variance: shape mismatch");
        for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] += r[i];
    }
    for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] /= static_cast<double>(recs.size());

    const double ref = norm2(x_true);
    const double mean_norm = norm2(mean);
    check(ref > 0.0 && mean_norm > 0.0, "bias_variance: degenerate norms");
    double bias_acc = 0.0;
    for (std::size_t i = 0; i < mean.numel(); ++i) {
        const double d = mean[i] - x_true[i];
        bias_acc += d * d;
    }
    double var_acc = 0.0;
    for (const Image& r : recs) {
        double acc = 0.0;
        for (std::size_t i = 0; i < mean.numel(); ++i) {
            const double d = r[i] - mean[i];
            acc += d * d;
        }
        var_acc += acc;
    }
    BiasVariance bv;
    bv.bias = std::sqrt(bias_acc) / ref;
    bv.variance = var_acc / static_cast<double>(recs.size()) / (mean_norm * mean_norm);
    return bv;
}

struct SliceMetrics {
    std::string name;
    double psnr = 0.0;
    double ssim = 0.0;
    double rmse = 0.0;
    std::vector<double> crc;
};

struct EvalReport {
    std::vector<SliceMetrics> slices;
    bool has_bias_variance = false;
    BiasVariance bv;
};

inline SliceMetrics evaluate_slice(const std::string& name, const Image& xhat,
                                   const Image& x_true, const RoiSpec& roi) {
    SliceMetrics m;
    m.name = name;
    m.psnr = psnr(xhat, x_true);
    m.ssim = ssim(xhat, x_true);
    m.rmse = rmse(xhat, x_true);
    m.crc = crc(xhat, x_true, roi);
    return m;
}

namespace detail {

inline double finite_or(double v, double fallback) { return std::isfinite(v) ? v : fallback; }

struct ColumnStats {
    double mean = 0.0, stddev = 0.0;
};

inline ColumnStats column_stats(const std::vector<double>& v) {
    ColumnStats s;
    if (v.empty()) return s;
    for (double x : v) s.mean += x;
    s.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        double acc = 0.0;
        for (double x : v) acc += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(acc / static_cast<double>(v.size() - 1));
    }
    return s;
}

}  // namespace detail

inline nlohmann::ordered_json eval_report_json(const EvalReport& rep) {
    nlohmann::ordered_json j;
    j["slices"] = nlohmann::ordered_json::array();
    for (const SliceMetrics& m : rep.slices) {
        nlohmann::ordered_json s;
        s["name"] = m.name;
        if (std::isfinite(m.psnr))
            s["psnr_db"] = m.psnr;
        else
            s["psnr_db"] = "+inf";
        s["ssim"] = m.ssim;
        s["rmse"] = m.rmse;
        s["crc"] = m.crc;
        j["slices"].push_back(std::move(s));
    }
    if (rep.has_bias_variance) {
        j["bias"] = rep.bv.bias;
        j["variance"] = rep.bv.variance;
    }
    return j;
}

/// Aligned table with one row per slice plus mean/std summary rows.
inline std::string format_eval_table(const EvalReport& rep) {
    std::size_t n_crc = 0;
    for (const SliceMetrics& m : rep.slices) n_crc = std::max(n_crc, m.crc.size());

    std::string out;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-14s %10s %8s %8s", "slice", "PSNR(dB)", "SSIM", "RMSE");
    out += buf;
    for (std::size_t t = 0; t < n_crc; ++t) {
        std::snprintf(buf, sizeof buf, "   CRC%zu", t + 1);
        out += buf;
    }
    out += '\n';

    std::vector<std::vector<double>> cols(3 + n_crc);
    for (const SliceMetrics& m : rep.slices) {
        if (std::isfinite(m.psnr))
            std::snprintf(buf, sizeof buf, "%-14s %10.3f %8.4f %8.4f", m.name.c_str(), m.psnr,
                          m.ssim, m.rmse);
        else
            std::snprintf(buf, sizeof buf, "%-14s %10s %8.4f %8.4f", m.name.c_str(), "+inf",
                          m.ssim, m.rmse);
        out += buf;
        cols[0].push_back(detail::finite_or(m.psnr, 0.0));
        cols[1].push_back(m.ssim);
        cols[2].push_back(m.rmse);
        for (std::size_t t = 0; t < n_crc; ++t) {
            const double v = t < m.crc.size() ? m.crc[t] : 0.0;
            std::snprintf(buf, sizeof buf, " %6.4f", v);
            out += buf;
            cols[3 + t].push_back(v);
        }
        out += '\n';
    }
    if (rep.slices.size() > 1) {
        const char* labels[2] = {"mean", "std"};
        for (int row = 0; row < 2; ++row) {
            std::snprintf(buf, sizeof buf, "%-14s", labels[row]);
            out += buf;
            for (std::size_t c = 0; c < cols.size(); ++c) {
                detail::ColumnStats s = detail::column_stats(cols[c]);
                const double v = row == 0 ? s.mean : s.stddev;
                if (c == 0)
                    std::snprintf(buf, sizeof buf, " %10.3f", v);
                else if (c < 3)
                    std::snprintf(buf, sizeof buf, " %8.4f", v);
                else
                    std::snprintf(buf, sizeof buf, " %6.4f", v);
                out += buf;
            }
            out += '\n';
        }
    }
    if (rep.has_bias_variance) {
        std::snprintf(buf, sizeof buf, "bias %.6f  variance %.6f\n", rep.bv.bias,
                      rep.bv.variance);
        out += buf;
    }
    return out;
}

}  // namespace petrec
