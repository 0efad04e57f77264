#pragma once

#include <cmath>

#include "petrec/core.hpp"

// Plain tensor math. The autodiff tape wraps these for recorded graphs and
// the solvers call them directly for value-only work (line search, MLEM),
// so both paths compute bit-identical numbers.

namespace petrec::kernels {

struct Chw {
    int c, h, w;
};

/// Interprets a 2D (H,W) tensor as a single-channel (1,H,W) volume.
inline Chw as_chw(const Tensor& t, const char* who) {
    if (t.shape.size() == 2) return {1, t.shape[0], t.shape[1]};
    check(t.shape.size() == 3, std::string(who) + ": expected 2D or 3D tensor");
    return {t.shape[0], t.shape[1], t.shape[2]};
}

inline Tensor ewise_add(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "add: shape mismatch");
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
    return out;
}

inline Tensor ewise_sub(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "sub: shape mismatch");
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
    return out;
}

inline Tensor ewise_mul(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "mul: shape mismatch");
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
    return out;
}

inline Tensor ewise_div(const Tensor& a, const Tensor& b) {
    check(a.same_shape(b), "div: shape mismatch");
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] / b[i];
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * c;
    return out;
}

inline Tensor ewise_exp(const Tensor& a) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = std::exp(a[i]);
    return out;
}

inline Tensor clip_min(const Tensor& a, double lo) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] < lo ? lo : a[i];
    return out;
}

// Smoothed ReLU: 0 below -delta, identity above delta, and the C1 quadratic
// x^2/(4 delta) + x/2 + delta/4 in between.
inline double srelu(double x, double delta) {
    if (x <= -delta) return 0.0;
    if (x >= delta) return x;
    return x * x / (4.0 * delta) + 0.5 * x + 0.25 * delta;
}

inline double srelu_deriv(double x, double delta) {
    if (x <= -delta) return 0.0;
    if (x >= delta) return 1.0;
    return x / (2.0 * delta) + 0.5;
}

inline double srelu_second(double x, double delta) {
    if (x <= -delta || x >= delta) return 0.0;
    return 1.0 / (2.0 * delta);
}

inline Tensor srelu(const Tensor& a, double delta) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = srelu(a[i], delta);
    return out;
}

inline Tensor srelu_deriv(const Tensor& a, double delta) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = srelu_deriv(a[i], delta);
    return out;
}

/// Huber-type smoothing of |n|: n^2/(2 eps) for n <= eps, n - eps/2 above.
/// Applied to per-position feature norms; both branches meet at eps/2.
inline double huber_eps(double n, double eps) {
    return n <= eps ? n * n / (2.0 * eps) : n - 0.5 * eps;
}

inline double huber_eps_deriv(double n, double eps) { return n <= eps ? n / eps : 1.0; }

inline Tensor huber_eps(const Tensor& a, double eps) {
    Tensor out(a.shape);
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = huber_eps(a[i], eps);
    return out;
}

/// Per-position Euclidean norm over channels: (C,H,W) -> (H,W).
inline Tensor channel_l2norm(const Tensor& g) {
    Chw s = as_chw(g, "channel_l2norm");
    Tensor out({s.h, s.w});
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (std::size_t p = 0; p < plane; ++p) {
        double acc = 0.0;
        for (int c = 0; c < s.c; ++c) {
            double v = g.data[c * plane + p];
            acc += v * v;
        }
        out[p] = std::sqrt(acc);
    }
    return out;
}

/// Replicates an (H,W) map across `channels`: adjoint of channel summation.
inline Tensor channel_broadcast(const Tensor& m, int channels) {
    check(m.shape.size() == 2, "channel_broadcast: 2D input required");
    Tensor out({channels, m.shape[0], m.shape[1]});
    const std::size_t plane = m.numel();
    for (int c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) out.data[c * plane + p] = m.data[p];
    return out;
}

inline Tensor channel_sum(const Tensor& g) {
    Chw s = as_chw(g, "channel_sum");
    Tensor out({s.h, s.w});
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int c = 0; c < s.c; ++c)
        for (std::size_t p = 0; p < plane; ++p) out[p] += g.data[c * plane + p];
    return out;
}

/// 2D cross-correlation, stride 1, zero padding preserving H x W.
/// input (Cin,H,W), kernel (Cout,Cin,kh,kw) with odd kh,kw -> (Cout,H,W).
inline Tensor conv2d(const Tensor& in, const Tensor& k) {
    Chw s = as_chw(in, "conv2d");
    check(k.shape.size() == 4, "conv2d: kernel must be (Cout,Cin,kh,kw)");
    const int cout = k.shape[0], cin = k.shape[1], kh = k.shape[2], kw = k.shape[3];
    check(cin == s.c, "conv2d: channel mismatch");
    check(kh % 2 == 1 && kw % 2 == 1, "conv2d: odd kernel sizes required");
    const int ph = kh / 2, pw = kw / 2;
    Tensor out({cout, s.h, s.w});
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int o = 0; o < cout; ++o) {
        double* op = out.data.data() + o * plane;
        for (int c = 0; c < cin; ++c) {
            const double* ip = in.data.data() + c * plane;
            const double* kp = k.data.data() + ((static_cast<std::size_t>(o) * cin) + c) * kh * kw;
            for (int dy = 0; dy < kh; ++dy) {
                for (int dx = 0; dx < kw; ++dx) {
                    const double kv = kp[dy * kw + dx];
                    if (kv == 0.0) continue;
                    const int oy = dy - ph, ox = dx - pw;
                    const int y0 = std::max(0, -oy), y1 = std::min(s.h, s.h - oy);
                    const int x0 = std::max(0, -ox), x1 = std::min(s.w, s.w - ox);
                    for (int y = y0; y < y1; ++y) {
                        double* orow = op + static_cast<std::size_t>(y) * s.w;
                        const double* irow = ip + static_cast<std::size_t>(y + oy) * s.w + ox;
                        for (int x = x0; x < x1; ++x) orow[x] += kv * irow[x];
                    }
                }
            }
        }
    }
    return out;
}

/// Adjoint of conv2d with respect to its input: (Cout,H,W) -> (Cin,H,W).
inline Tensor conv2d_adj_input(const Tensor& g, const Tensor& k) {
    Chw s = as_chw(g, "conv2d_adj_input");
    check(k.shape.size() == 4, "conv2d_adj_input: kernel must be 4D");
    const int cout = k.shape[0], cin = k.shape[1], kh = k.shape[2], kw = k.shape[3];
    check(cout == s.c, "conv2d_adj_input: channel mismatch");
    const int ph = kh / 2, pw = kw / 2;
    Tensor out({cin, s.h, s.w});
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    for (int o = 0; o < cout; ++o) {
        const double* gp = g.data.data() + o * plane;
        for (int c = 0; c < cin; ++c) {
            double* op = out.data.data() + c * plane;
            const double* kp = k.data.data() + ((static_cast<std::size_t>(o) * cin) + c) * kh * kw;
            for (int dy = 0; dy < kh; ++dy) {
                for (int dx = 0; dx < kw; ++dx) {
                    const double kv = kp[dy * kw + dx];
                    if (kv == 0.0) continue;
                    // adjoint scatter of out[o,y,x] += kv * in[c,y+oy,x+ox]
                    const int oy = dy - ph, ox = dx - pw;
                    const int y0 = std::max(0, -oy), y1 = std::min(s.h, s.h - oy);
                    const int x0 = std::max(0, -ox), x1 = std::min(s.w, s.w - ox);
                    for (int y = y0; y < y1; ++y) {
                        const double* grow = gp + static_cast<std::size_t>(y) * s.w;
                        double* orow = op + static_cast<std::size_t>(y + oy) * s.w + ox;
                        for (int x = x0; x < x1; ++x) orow[x] += kv * grow[x];
                    }
                }
            }
        }
    }
    return out;
}

/// Gradient of conv2d with respect to the kernel, given output adjoint g and
/// the forward input. Returns (Cout,Cin,kh,kw).
inline Tensor conv2d_kernel_grad(const Tensor& g, const Tensor& in, int kh, int kw) {
    Chw sg = as_chw(g, "conv2d_kernel_grad");
    Chw si = as_chw(in, "conv2d_kernel_grad");
    check(sg.h == si.h && sg.w == si.w, "conv2d_kernel_grad: plane mismatch");
    const int ph = kh / 2, pw = kw / 2;
    Tensor out({sg.c, si.c, kh, kw});
    const std::size_t plane = static_cast<std::size_t>(sg.h) * sg.w;
    for (int o = 0; o < sg.c; ++o) {
        const double* gp = g.data.data() + o * plane;
        for (int c = 0; c < si.c; ++c) {
            const double* ip = in.data.data() + c * plane;
            double* kp = out.data.data() + ((static_cast<std::size_t>(o) * si.c) + c) * kh * kw;
            for (int dy = 0; dy < kh; ++dy) {
                for (int dx = 0; dx < kw; ++dx) {
                    const int oy = dy - ph, ox = dx - pw;
                    const int y0 = std::max(0, -oy), y1 = std::min(sg.h, sg.h - oy);
                    const int x0 = std::max(0, -ox), x1 = std::min(sg.w, sg.w - ox);
                    double acc = 0.0;
                    for (int y = y0; y < y1; ++y) {
                        const double* grow = gp + static_cast<std::size_t>(y) * sg.w;
                        const double* irow = ip + static_cast<std::size_t>(y + oy) * sg.w + ox;
                        for (int x = x0; x < x1; ++x) acc += grow[x] * irow[x];
                    }
                    kp[dy * kw + dx] = acc;
                }
            }
        }
    }
    return out;
}

/// Rotation by an arbitrary angle (radians, counterclockwise) about the
/// image center with bilinear interpolation; samples outside map to 0.
inline Tensor rot_bilinear(const Tensor& img, double angle) {
    check(img.shape.size() == 2, "rot_bilinear: 2D image required");
    const int n0 = img.shape[0], n1 = img.shape[1];
    const double c0 = 0.5 * (n0 - 1), c1 = 0.5 * (n1 - 1);
    const double ca = std::cos(angle), sa = std::sin(angle);
    Tensor out({n0, n1});
    for (int r = 0; r < n0; ++r)
        for (int c = 0; c < n1; ++c) {
            // inverse-rotate the target pixel into source coordinates
            const double x = c - c1, y = c0 - r;
            const double xs = ca * x + sa * y, ys = -sa * x + ca * y;
            const double sc = xs + c1, sr = c0 - ys;
            const int r0 = static_cast<int>(std::floor(sr)), cc0 = static_cast<int>(std::floor(sc));
            const double fr = sr - r0, fc = sc - cc0;
            double acc = 0.0;
            for (int dr = 0; dr <= 1; ++dr)
                for (int dc = 0; dc <= 1; ++dc) {
                    const int rr = r0 + dr, cc = cc0 + dc;
                    if (rr < 0 || rr >= n0 || cc < 0 || cc >= n1) continue;
                    const double w = (dr ? fr : 1.0 - fr) * (dc ? fc : 1.0 - fc);
                    acc += w * img.at(rr, cc);
                }
            out.at(r, c) = acc;
        }
    return out;
}

/// Adjoint of rot_bilinear at the same angle (scatter with the same weights).
inline Tensor rot_bilinear_adjoint(const Tensor& g, double angle) {
    check(g.shape.size() == 2, "rot_bilinear_adjoint: 2D image required");
    const int n0 = g.shape[0], n1 = g.shape[1];
    const double c0 = 0.5 * (n0 - 1), c1 = 0.5 * (n1 - 1);
    const double ca = std::cos(angle), sa = std::sin(angle);
    Tensor out({n0, n1});
    for (int r = 0; r < n0; ++r)
        for (int c = 0; c < n1; ++c) {
            const double x = c - c1, y = c0 - r;
            const double xs = ca * x + sa * y, ys = -sa * x + ca * y;
            const double sc = xs + c1, sr = c0 - ys;
            const int r0 = static_cast<int>(std::floor(sr)), cc0 = static_cast<int>(std::floor(sc));
            const double fr = sr - r0, fc = sc - cc0;
            for (int dr = 0; dr <= 1; ++dr)
                for (int dc = 0; dc <= 1; ++dc) {
                    const int rr = r0 + dr, cc = cc0 + dc;
                    if (rr < 0 || rr >= n0 || cc < 0 || cc >= n1) continue;
                    const double w = (dr ? fr : 1.0 - fr) * (dc ? fc : 1.0 - fc);
                    out.at(rr, cc) += w * g.at(r, c);
                }
        }
    return out;
}

inline Tensor matvec(const CsrMatrix& m, const Tensor& x, bool transpose,
                     const std::vector<int>& out_shape) {
    Tensor out(out_shape);
    if (!transpose) {
        check(static_cast<int>(x.numel()) == m.cols, "matvec: size mismatch");
        check(static_cast<int>(out.numel()) == m.rows, "matvec: bad output shape");
        m.apply(x.data.data(), out.data.data());
    } else {
        check(static_cast<int>(x.numel()) == m.rows, "matvec^T: size mismatch");
        check(static_cast<int>(out.numel()) == m.cols, "matvec^T: bad output shape");
        m.apply_transpose(x.data.data(), out.data.data());
    }
    return out;
}

}  // namespace petrec::kernels
