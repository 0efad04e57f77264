#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "petrec/autodiff.hpp"
#include "petrec/projector.hpp"
#include "petrec/regularizer.hpp"

// Reconstruction solvers: MLEM and EM-TV baselines plus the unrolled learned
// descent algorithm. The LDA body is written once against the tape; running
// it with non-differentiable leaves gives the plain value path.

namespace petrec {

/// -L(y|x) = sum(ybar - y log ybar), ybar = Ax + b, with 0 log 0 = 0.
/// A zero ybar under observed counts makes the objective +inf (reported).
inline double neg_loglik(const Sinogram& y, const Image& x, const SystemModel& model,
                         const Sinogram& b) {
    Sinogram ybar = forward(model, x, b);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) {
        if (y[i] > 0.0) {
            if (ybar[i] <= 0.0) return std::numeric_limits<double>::infinity();
            acc += ybar[i] - y[i] * std::log(ybar[i]);
        } else {
            acc += ybar[i];
        }
    }
    return acc;
}

/// Gradient of -L wrt x: A^T 1 - A^T(y/ybar). Zero-count zero-mean bins
/// contribute nothing.
inline Image grad_neg_loglik(const Sinogram& y, const Image& x, const SystemModel& model,
                             const Sinogram& b) {
    Sinogram ybar = forward(model, x, b);
    Sinogram ratio({model.sino.n_angles, model.sino.n_bins});
    for (std::size_t i = 0; i < y.numel(); ++i)
        ratio[i] = y[i] > 0.0 ? y[i] / ybar[i] : 0.0;
    Image bp = backproject(model, ratio);
    Image out = model.sensitivity;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bp[i];
    return out;
}

/// Smoothed objective phi_eps = -L + P_eps.
inline double phi_value(const Sinogram& y, const Image& x, const SystemModel& model,
                        const Sinogram& b, const RegularizerParams& theta, double eps) {
    return neg_loglik(y, x, model, b) + p_smoothed(theta, x, eps);
}

inline Image mlem_step(const Image& x, const Sinogram& y, const SystemModel& model,
                       const Sinogram& b) {
    Sinogram ybar = forward(model, x, b);
    Sinogram ratio({model.sino.n_angles, model.sino.n_bins});
    for (std::size_t i = 0; i < y.numel(); ++i) {
        check(!(y[i] > 0.0 && ybar[i] <= 0.0), "mlem_step: zero model mean under observed counts");
        ratio[i] = y[i] > 0.0 ? y[i] / ybar[i] : 0.0;
    }
    Image bp = backproject(model, ratio);
    Image out(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i)
        out[i] = model.sensitivity[i] > 0.0 ? x[i] / model.sensitivity[i] * bp[i] : 0.0;
    return out;
}

inline Image mlem_initial(const SystemModel& model, double fill) {
    Image x = model.fov;
    for (double& v : x.data) v *= fill;
    return x;
}

inline Image mlem_run(const Sinogram& y, const SystemModel& model, const Sinogram& b,
                      int iterations, double x0_value = 1.0) {
    check(iterations >= 0, "mlem_run: negative iteration count");
    Image x = mlem_initial(model, x0_value);
    for (int it = 0; it < iterations; ++it) x = mlem_step(x, y, model, b);
    return x;
}

/// Lagged-diffusivity gradient of isotropic TV with smoothing constant sm:
/// -div(grad x / |grad x|_sm), forward differences, Neumann boundaries.
inline Image tv_gradient(const Image& x, double sm) {
    const int n0 = x.shape[0], n1 = x.shape[1];
    Image px({n0, n1}), py({n0, n1});
    for (int r = 0; r < n0; ++r)
        for (int c = 0; c < n1; ++c) {
            const double dx = c + 1 < n1 ? x.at(r, c + 1) - x.at(r, c) : 0.0;
            const double dy = r + 1 < n0 ? x.at(r + 1, c) - x.at(r, c) : 0.0;
            const double mag = std::sqrt(dx * dx + dy * dy + sm * sm);
            px.at(r, c) = dx / mag;
            py.at(r, c) = dy / mag;
        }
    Image g({n0, n1});
    for (int r = 0; r < n0; ++r)
        for (int c = 0; c < n1; ++c) {
            const double divx = px.at(r, c) - (c > 0 ? px.at(r, c - 1) : 0.0);
            const double divy = py.at(r, c) - (r > 0 ? py.at(r - 1, c) : 0.0);
            g.at(r, c) = -(divx + divy);
        }
    return g;
}

/// One MLEM step followed by a weighted TV descent step (EM-TV splitting);
/// the EM preconditioner x/sensitivity scales the TV gradient.
inline Image emtv_step(const Image& x, const Sinogram& y, const SystemModel& model,
                       const Sinogram& b, double penalty, double tv_smoothing = 1e-8) {
    check(penalty >= 0.0, "emtv_step: negative penalty");
    Image out = mlem_step(x, y, model, b);
    if (penalty == 0.0) return out;
    Image tvg = tv_gradient(out, tv_smoothing);
    for (std::size_t i = 0; i < out.numel(); ++i) {
        if (model.sensitivity[i] <= 0.0) continue;
        out[i] -= penalty * out[i] / model.sensitivity[i] * tvg[i];
        if (out[i] < 0.0) out[i] = 0.0;
    }
    return out;
}

inline Image emtv_run(const Sinogram& y, const SystemModel& model, const Sinogram& b,
                      int iterations, double penalty, double x0_value = 1.0,
                      double tv_smoothing = 1e-8) {
    check(iterations >= 0, "emtv_run: negative iteration count");
    Image x = mlem_initial(model, x0_value);
    for (int it = 0; it < iterations; ++it)
        x = emtv_step(x, y, model, b, penalty, tv_smoothing);
    return x;
}

struct LdaConfig {
    int phases = 4;               // K
    int line_search_max = 10;     // I
    double rho = 0.5;             // line-search shrink
    double gamma = 0.9;           // eps shrink
    double sigma_tol = 1.0;       // eps-shrink threshold scale
    double eps0 = 1e-3;           // initial smoothing
    double x0_value = 1.0;        // initial image fill inside the FOV
    bool keep_images = false;     // store per-phase iterates in the trace
};

inline void validate(const LdaConfig& c) {
    check(c.phases >= 1, "lda: phases must be >= 1");
    check(c.line_search_max >= 1, "lda: line_search_max must be >= 1");
    check(c.rho > 0.0 && c.rho < 1.0, "lda: rho must lie in (0,1)");
    check(c.gamma > 0.0 && c.gamma < 1.0, "lda: gamma must lie in (0,1)");
    check(c.sigma_tol > 0.0, "lda: sigma_tol must be positive");
    check(c.eps0 > 0.0, "lda: eps0 must be positive");
    check(c.x0_value >= 0.0, "lda: x0_value must be nonnegative");
}

struct LdaPhase {
    double phi_start = 0.0;       // phi_eps at x_{k-1}
    double phi_u = 0.0;
    double phi_v = 0.0;
    double phi_end = 0.0;         // phi_eps at accepted x_k (same eps)
    double alpha = 0.0;           // step after line search
    double tau = 0.0;
    double eps_in = 0.0;
    double eps_out = 0.0;
    double grad_phi_norm = 0.0;   // at x_k, FOV-restricted
    int ls_trials = 0;
    bool ls_ok = true;
    char branch = 'u';
    Image x, r, u, v;             // only filled when keep_images
};

struct SolverTrace {
    std::vector<LdaPhase> phases;
    bool ok = true;
    std::string message;
};

class SolverAbort : public std::runtime_error {
  public:
    SolverAbort(const std::string& what, SolverTrace t)
        : std::runtime_error(what), trace(std::move(t)) {}
    SolverTrace trace;
};

inline nlohmann::ordered_json solver_trace_json(const SolverTrace& t) {
    nlohmann::ordered_json j;
    j["ok"] = t.ok;
    if (!t.message.empty()) j["message"] = t.message;
    j["phases"] = nlohmann::ordered_json::array();
    for (const LdaPhase& p : t.phases) {
        nlohmann::ordered_json q;
        q["phi_start"] = p.phi_start;
        q["phi_u"] = p.phi_u;
        q["phi_v"] = p.phi_v;
        q["phi_end"] = p.phi_end;
        q["alpha"] = p.alpha;
        q["tau"] = p.tau;
        q["eps_in"] = p.eps_in;
        q["eps_out"] = p.eps_out;
        q["grad_phi_norm"] = p.grad_phi_norm;
        q["ls_trials"] = p.ls_trials;
        q["ls_ok"] = p.ls_ok;
        q["branch"] = std::string(1, p.branch);
        j["phases"].push_back(std::move(q));
    }
    return j;
}

namespace detail {

inline RegularizerParams params_from_vars(const RegularizerVars& v) {
    RegularizerParams p;
    p.delta = v.delta;
    for (const ad::Var& k : v.conv_layers) p.conv_layers.push_back(k.value());
    for (const ad::Var& a : v.log_alpha) p.per_phase_log_alpha.push_back(a.value()[0]);
    for (const ad::Var& b : v.log_beta) p.per_phase_log_beta.push_back(b.value()[0]);
    return p;
}

inline double fov_grad_norm(const Image& g, const Image& fov) {
    double acc = 0.0;
    for (std::size_t i = 0; i < g.numel(); ++i)
        if (fov[i] > 0.0) acc += g[i] * g[i];
    return std::sqrt(acc);
}

}  // namespace detail

struct LdaResult {
    ad::Var x;
    SolverTrace trace;
};

/// Unrolled learned descent. Each phase takes the likelihood ascent step
/// r_k, the regularizer correction u_k, and the safeguarded full gradient
/// step v_k, keeps whichever of u/v has the lower smoothed objective, and
/// shrinks the smoothing when the iterate is near-stationary. Line-search
/// and branch decisions are made on values and enter the tape as constants;
/// the learned step sizes stay differentiable through the accepted shrink.
inline LdaResult lda_reconstruct_var(ad::Tape& tape, const ad::Var& y, const SystemModel& model,
                                     const ad::Var& b, const RegularizerVars& theta,
                                     const LdaConfig& cfg) {
    validate(cfg);
    const int K = cfg.phases;
    check(static_cast<int>(theta.log_alpha.size()) >= K &&
              static_cast<int>(theta.log_beta.size()) >= K,
          "lda: fewer per-phase step sizes than phases");
    for (std::size_t i = 0; i < y.value().numel(); ++i)
        check(y.value()[i] >= 0.0, "lda: negative measurement");

    const int n = model.grid.n_pixels_per_side;
    const std::vector<int> img_shape{n, n};
    const RegularizerParams theta_val = detail::params_from_vars(theta);
    const Sinogram& y_val = y.value();
    const Sinogram& b_val = b.value();

    ad::Var fov = tape.constant(model.fov);
    ad::Var sens = tape.constant(model.sensitivity);
    ad::Var x = tape.constant(mlem_initial(model, cfg.x0_value));

    auto clip_fov = [&](const ad::Var& z) { return ad::mul(ad::clip_min(z, 0.0), fov); };
    auto phi_at = [&](const Image& img, double eps) {
        return phi_value(y_val, img, model, b_val, theta_val, eps);
    };

    SolverTrace trace;
    double eps = cfg.eps0;
    for (int k = 0; k < K; ++k) {
        LdaPhase ph;
        ph.eps_in = eps;
        ph.phi_start = phi_at(x.value(), eps);
        if (!std::isfinite(ph.phi_start)) {
            trace.ok = false;
            trace.message = "non-finite objective entering phase " + std::to_string(k + 1);
            trace.phases.push_back(std::move(ph));
            std::string msg = trace.message;  // copy before the move empties it
            throw SolverAbort(msg, std::move(trace));
        }

        ad::Var alpha = ad::vexp(theta.log_alpha[k]);
        ad::Var beta = ad::vexp(theta.log_beta[k]);
        ad::Var tau = ad::div(ad::mul(alpha, beta), ad::add(alpha, beta));
        ph.tau = tau.value()[0];

        // shared likelihood gradient at x_{k-1}
        ad::Var ybar = ad::add(ad::matvec(x, model.matrix, false, y_val.shape), b);
        ad::Var ratio = ad::div(y, ybar);
        ad::Var bp = ad::matvec(ratio, model.matrix, true, img_shape);
        ad::Var ascent = ad::sub(bp, sens);  // gradient of L; its negation drives v_k

        // r_k and the regularizer correction u_k
        ad::Var r = clip_fov(ad::add(x, ad::mul(ascent, alpha)));
        ad::Var u = clip_fov(ad::sub(r, ad::mul(grad_p_smoothed_var(theta, r, eps), tau)));
        ph.phi_u = phi_at(u.value(), eps);

        // safeguard v_k with backtracking on values
        ad::Var total_grad = ad::sub(grad_p_smoothed_var(theta, x, eps), ascent);
        double shrink = 1.0;
        ad::Var v = clip_fov(ad::sub(x, ad::mul(total_grad, alpha)));
        ph.ls_trials = 1;
        ph.ls_ok = false;
        for (int j = 0; j < cfg.line_search_max; ++j) {
            if (j > 0) {
                shrink *= cfg.rho;
                v = clip_fov(ad::sub(x, ad::mul(total_grad, ad::scale(alpha, shrink))));
                ph.ls_trials = j + 1;
            }
            ph.phi_v = phi_at(v.value(), eps);
            if (ph.phi_v <= ph.phi_start) {
                ph.ls_ok = true;
                break;
            }
        }
        ph.alpha = alpha.value()[0] * shrink;

        if (!std::isfinite(ph.phi_u) && !std::isfinite(ph.phi_v)) {
            trace.ok = false;
            trace.message = "non-finite objective for both candidates in phase " +
                            std::to_string(k + 1);
            trace.phases.push_back(std::move(ph));
            std::string msg = trace.message;
            throw SolverAbort(msg, std::move(trace));
        }

        bool take_u;
        if (!std::isfinite(ph.phi_v))
            take_u = true;
        else if (!std::isfinite(ph.phi_u))
            take_u = false;
        else
            take_u = ph.phi_u <= ph.phi_v;
        ph.branch = take_u ? 'u' : 'v';
        ad::Var x_next = take_u ? u : v;
        ph.phi_end = take_u ? ph.phi_u : ph.phi_v;

        // eps update from the FOV-restricted gradient norm at x_k
        Image gphi = grad_neg_loglik(y_val, x_next.value(), model, b_val);
        Image gp = grad_p_smoothed(theta_val, x_next.value(), eps);
        for (std::size_t i = 0; i < gphi.numel(); ++i) gphi[i] += gp[i];
        ph.grad_phi_norm = detail::fov_grad_norm(gphi, model.fov);
        if (ph.grad_phi_norm < cfg.sigma_tol * cfg.gamma * eps) eps *= cfg.gamma;
        ph.eps_out = eps;

        if (cfg.keep_images) {
            ph.x = x_next.value();
            ph.r = r.value();
            ph.u = u.value();
            ph.v = v.value();
        }
        trace.phases.push_back(std::move(ph));
        x = x_next;
    }
    return {x, std::move(trace)};
}

inline std::pair<Image, SolverTrace> lda_reconstruct(const Sinogram& y, const SystemModel& model,
                                                     const Sinogram& b,
                                                     const RegularizerParams& theta,
                                                     const LdaConfig& cfg,
                                                     bool record_tape = false) {
    ad::Tape tape;
    RegularizerVars tv = lift(tape, theta, record_tape);
    ad::Var yv = tape.constant(y);
    ad::Var bv = tape.constant(b);
    LdaResult res = lda_reconstruct_var(tape, yv, model, bv, tv, cfg);
    return {res.x.value(), std::move(res.trace)};
}

}  // namespace petrec
