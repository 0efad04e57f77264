#pragma once

#include <filesystem>
#include <fstream>
#include <vector>

#include "petrec/autodiff.hpp"
#include "petrec/core.hpp"
#include "petrec/io.hpp"
#include "petrec/rng.hpp"

// Learnable sparsifying regularizer P(x;theta) = ||g_theta(x)||_{2,1} with a
// small conv stack for g, Huber-type smoothing P_eps, and its analytic image
// gradient. Every piece exists twice: a plain value path and a taped path
// whose backward pass yields parameter derivatives.

namespace petrec {

struct RegularizerParams {
    std::vector<Tensor> conv_layers;         // (Cout,Cin,kh,kw) each, no bias
    double delta = 0.002;                    // smoothed-ReLU width
    std::vector<double> per_phase_log_alpha; // likelihood step sizes, log domain
    std::vector<double> per_phase_log_beta;  // regularizer step sizes, log domain
};

inline void validate(const RegularizerParams& p) {
    check(p.delta > 0.0, "regularizer: delta must be positive");
    check(!p.conv_layers.empty(), "regularizer: no conv layers");
    int ch = 1;
    for (const Tensor& k : p.conv_layers) {
        check(k.shape.size() == 4, "regularizer: kernel must be 4D");
        check(k.shape[1] == ch, "regularizer: channel chain broken");
        check(k.shape[2] % 2 == 1 && k.shape[3] % 2 == 1, "regularizer: odd kernels required");
        ch = k.shape[0];
    }
    check(p.per_phase_log_alpha.size() == p.per_phase_log_beta.size(),
          "regularizer: alpha/beta phase counts differ");
}

/// Fan-in-scaled uniform kernels plus per-phase log step sizes.
inline RegularizerParams make_regularizer_params(const std::vector<int>& channels, int ksize,
                                                 int phases, double delta, double alpha0,
                                                 double beta0, std::uint64_t seed) {
    check(channels.size() >= 2 && channels.front() == 1, "regularizer: bad channel chain");
    check(alpha0 > 0.0 && beta0 > 0.0, "regularizer: step sizes must be positive");
    RegularizerParams p;
    p.delta = delta;
    Rng rng(substream(seed, "theta-init"));
    for (std::size_t l = 0; l + 1 < channels.size(); ++l) {
        Tensor k({channels[l + 1], channels[l], ksize, ksize});
        const double bound = 1.0 / std::sqrt(static_cast<double>(channels[l]) * ksize * ksize);
        for (double& v : k.data) v = rng.uniform(-bound, bound);
        p.conv_layers.push_back(std::move(k));
    }
    p.per_phase_log_alpha.assign(phases, std::log(alpha0));
    p.per_phase_log_beta.assign(phases, std::log(beta0));
    validate(p);
    return p;
}

inline RegularizerParams default_regularizer_params(int phases, std::uint64_t seed) {
    return make_regularizer_params({1, 8, 8, 8}, 3, phases, 0.002, 0.01, 0.02, seed);
}

inline std::size_t param_count(const RegularizerParams& p) {
    std::size_t n = 0;
    for (const Tensor& k : p.conv_layers) n += k.numel();
    return n + p.per_phase_log_alpha.size() + p.per_phase_log_beta.size();
}

/// Flattens theta in a fixed order: kernels, then log alpha, then log beta.
inline Tensor pack_params(const RegularizerParams& p) {
    Tensor flat({static_cast<int>(param_count(p))});
    std::size_t at = 0;
    for (const Tensor& k : p.conv_layers)
        for (double v : k.data) flat[at++] = v;
    for (double v : p.per_phase_log_alpha) flat[at++] = v;
    for (double v : p.per_phase_log_beta) flat[at++] = v;
    return flat;
}

inline RegularizerParams unpack_params(const Tensor& flat, const RegularizerParams& like) {
    check(flat.numel() == param_count(like), "unpack_params: size mismatch");
    RegularizerParams p = like;
    std::size_t at = 0;
    for (Tensor& k : p.conv_layers)
        for (double& v : k.data) v = flat[at++];
    for (double& v : p.per_phase_log_alpha) v = flat[at++];
    for (double& v : p.per_phase_log_beta) v = flat[at++];
    return p;
}

inline double smoothed_relu(double x, double delta) { return kernels::srelu(x, delta); }
inline double smoothed_relu_deriv(double x, double delta) { return kernels::srelu_deriv(x, delta); }

inline Tensor extract_features(const RegularizerParams& p, const Image& x) {
    Tensor h = x;
    for (std::size_t l = 0; l < p.conv_layers.size(); ++l) {
        h = kernels::conv2d(h, p.conv_layers[l]);
        if (l + 1 < p.conv_layers.size()) h = kernels::srelu(h, p.delta);
    }
    return h;
}

inline double p_smoothed(const RegularizerParams& p, const Image& x, double eps) {
    check(eps > 0.0, "p_smoothed: eps must be positive");
    Tensor n = kernels::channel_l2norm(extract_features(p, x));
    return kernels::huber_eps(n, eps).sum();
}

/// Analytic image gradient of p_smoothed: one reverse pass through the
/// feature stack seeded with g_i / max(||g_i||, eps).
inline Image grad_p_smoothed(const RegularizerParams& p, const Image& x, double eps) {
    check(eps > 0.0, "grad_p_smoothed: eps must be positive");
    const std::size_t n_layers = p.conv_layers.size();
    std::vector<Tensor> pre(n_layers);  // pre-activation of each conv
    Tensor h = x;
    for (std::size_t l = 0; l < n_layers; ++l) {
        pre[l] = kernels::conv2d(h, p.conv_layers[l]);
        h = l + 1 < n_layers ? kernels::srelu(pre[l], p.delta) : pre[l];
    }
    const Tensor& g = pre[n_layers - 1];
    Tensor denom = kernels::clip_min(kernels::channel_l2norm(g), eps);
    Tensor adj = kernels::ewise_div(g, kernels::channel_broadcast(denom, g.shape[0]));
    for (std::size_t l = n_layers; l-- > 0;) {
        if (l + 1 < n_layers)
            adj = kernels::ewise_mul(adj, kernels::srelu_deriv(pre[l], p.delta));
        adj = kernels::conv2d_adj_input(adj, p.conv_layers[l]);
    }
    adj.shape = x.shape;
    return adj;
}

/// Taped parameter set: kernels plus per-phase log step sizes as leaves.
struct RegularizerVars {
    std::vector<ad::Var> conv_layers;
    std::vector<ad::Var> log_alpha;
    std::vector<ad::Var> log_beta;
    double delta = 0.0;
};

inline RegularizerVars lift(ad::Tape& tape, const RegularizerParams& p, bool requires_grad) {
    RegularizerVars v;
    v.delta = p.delta;
    for (const Tensor& k : p.conv_layers) v.conv_layers.push_back(tape.leaf(k, requires_grad));
    for (double a : p.per_phase_log_alpha)
        v.log_alpha.push_back(tape.leaf(Tensor({1}, a), requires_grad));
    for (double b : p.per_phase_log_beta)
        v.log_beta.push_back(tape.leaf(Tensor({1}, b), requires_grad));
    return v;
}

inline ad::Var extract_features_var(const RegularizerVars& p, const ad::Var& x) {
    ad::Var h = x;
    for (std::size_t l = 0; l < p.conv_layers.size(); ++l) {
        h = ad::conv2d(h, p.conv_layers[l]);
        if (l + 1 < p.conv_layers.size()) h = ad::srelu(h, p.delta);
    }
    return h;
}

inline ad::Var p_smoothed_var(const RegularizerVars& p, const ad::Var& x, double eps) {
    ad::Var n = ad::channel_l2norm(extract_features_var(p, x));
    return ad::vsum(ad::huber(n, eps));
}

/// The analytic gradient rebuilt from taped primitives, so differentiating
/// the result reaches both x and theta through the second-order terms.
inline ad::Var grad_p_smoothed_var(const RegularizerVars& p, const ad::Var& x, double eps) {
    const std::size_t n_layers = p.conv_layers.size();
    std::vector<ad::Var> pre(n_layers);
    ad::Var h = x;
    for (std::size_t l = 0; l < n_layers; ++l) {
        pre[l] = ad::conv2d(h, p.conv_layers[l]);
        h = l + 1 < n_layers ? ad::srelu(pre[l], p.delta) : pre[l];
    }
    const ad::Var& g = pre[n_layers - 1];
    ad::Var denom = ad::clip_min(ad::channel_l2norm(g), eps);
    ad::Var adj = ad::div(g, ad::channel_broadcast(denom, g.value().shape[0]));
    for (std::size_t l = n_layers; l-- > 0;) {
        if (l + 1 < n_layers) adj = ad::mul(adj, ad::srelu_deriv(pre[l], p.delta));
        adj = ad::conv2d_adj_input(adj, p.conv_layers[l]);
    }
    return ad::reshape(adj, x.value().shape);
}

inline void save_params(const std::filesystem::path& path, const RegularizerParams& p) {
    validate(p);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "cannot write " + path.string());
    io::json h;
    h["format"] = "petrec-params";
    h["delta"] = p.delta;
    h["log_alpha"] = p.per_phase_log_alpha;
    h["log_beta"] = p.per_phase_log_beta;
    h["layer_shapes"] = io::json::array();
    for (const Tensor& k : p.conv_layers) h["layer_shapes"].push_back(k.shape);
    out << h.dump() << '\n';
    for (const Tensor& k : p.conv_layers) io::detail::write_raw(out, k.data.data(), k.numel());
    check(out.good(), "short write to " + path.string());
}

inline RegularizerParams load_params(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open " + path.string());
    io::json h = io::detail::read_header_line(in, path.string());
    check(h.value("format", "") == "petrec-params", "not a parameter file: " + path.string());
    RegularizerParams p;
    p.delta = h.at("delta").get<double>();
    p.per_phase_log_alpha = h.at("log_alpha").get<std::vector<double>>();
    p.per_phase_log_beta = h.at("log_beta").get<std::vector<double>>();
    for (const auto& shape : h.at("layer_shapes")) {
        Tensor k(shape.get<std::vector<int>>());
        io::detail::read_raw(in, k.data.data(), k.numel());
        p.conv_layers.push_back(std::move(k));
    }
    validate(p);
    return p;
}

}  // namespace petrec
