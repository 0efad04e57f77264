#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "petrec/io.hpp"
#include "petrec/rng.hpp"
#include "petrec/solvers.hpp"

// Dual-domain unsupervised training. No image labels: the image-domain loss
// enforces rotation equivariance of the reconstruction, the measurement-
// domain loss enforces data consistency under noise augmentation.

namespace petrec {

struct TrainConfig {
    double lambda = 0.1;                          // loss ratio
    double learning_rate = 1e-4;
    int batch_size = 8;
    int epochs = 100;
    std::vector<int> rotation_set = {90, 180, 270};  // degrees
    bool noise_poisson = true;                    // xi = Poisson resample of y
    double noise_gaussian_std = 0.0;              // used when noise_poisson is off
    bool allow_arbitrary_rotation = false;        // bilinear path for non-90 angles
    std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
    check(c.lambda >= 0.0, "train: lambda must be nonnegative");
    check(c.learning_rate > 0.0, "train: learning_rate must be positive");
    check(c.batch_size >= 1, "train: batch_size must be >= 1");
    check(c.epochs >= 0, "train: epochs must be nonnegative");
    check(!c.rotation_set.empty(), "train: empty rotation_set");
    for (int deg : c.rotation_set)
        check(c.allow_arbitrary_rotation || deg % 90 == 0,
              "train: non-90-degree rotation without allow_arbitrary_rotation");
    if (!c.noise_poisson)
        check(c.noise_gaussian_std >= 0.0, "train: negative gaussian noise std");
}

enum class LossMode { kImage, kMeasure, kDual };

inline const char* loss_mode_name(LossMode m) {
    switch (m) {
        case LossMode::kImage: return "image";
        case LossMode::kMeasure: return "measure";
        default: return "dual";
    }
}

struct Sample {
    Sinogram y;
    Sinogram b;
    std::string name;
};

struct LossReport {
    double l_image = 0.0;
    double l_measure = 0.0;
    double l_dual = 0.0;  // l_image + lambda * l_measure by construction
    std::vector<std::array<double, 3>> per_sample;
};

namespace detail {

inline ad::Var rotate_var(const ad::Var& img, int degrees) {
    const int d = ((degrees % 360) + 360) % 360;
    if (d % 90 == 0) return ad::rot90(img, d / 90);
    return ad::rot_bilinear(img, d * std::numbers::pi / 180.0);
}

struct SampleDraw {
    int rotation_deg = 0;
    Tensor y_aug;  // max(y + xi, 0)
};

inline SampleDraw draw_augmentation(const Sample& s, const TrainConfig& cfg, std::uint64_t epoch,
                                    std::uint64_t index, const char* stream) {
    SampleDraw d;
    Rng rot_rng(substream(cfg.seed, stream, epoch, index, 0));
    d.rotation_deg = cfg.rotation_set[rot_rng.uniform_int(
        0, static_cast<int>(cfg.rotation_set.size()) - 1)];
    Rng xi_rng(substream(cfg.seed, stream, epoch, index, 1));
    d.y_aug = s.y;
    if (cfg.noise_poisson) {
        for (double& v : d.y_aug.data) v = static_cast<double>(xi_rng.poisson(v));
    } else {
        for (double& v : d.y_aug.data) {
            v += cfg.noise_gaussian_std * xi_rng.normal();
            if (v < 0.0) v = 0.0;
        }
    }
    return d;
}

}  // namespace detail

/// Records the dual-domain loss for one sample on the given tape and returns
/// (loss-to-optimize, l_image value, l_measure value). Both parts are always
/// built so reports stay complete; `mode` selects what the gradient sees.
struct SampleLoss {
    ad::Var objective;
    double l_image = 0.0;
    double l_measure = 0.0;
};

inline SampleLoss build_sample_loss(ad::Tape& tape, const RegularizerVars& theta,
                                    const Sample& sample, const SystemModel& model,
                                    const LdaConfig& lda_cfg, const TrainConfig& cfg,
                                    const detail::SampleDraw& draw, LossMode mode) {
    ad::Var b = tape.constant(sample.b);

    // image domain: rotation equivariance of the reconstruction
    ad::Var y = tape.constant(sample.y);
    ad::Var x_t = lda_reconstruct_var(tape, y, model, b, theta, lda_cfg).x;
    ad::Var x_tr = detail::rotate_var(x_t, draw.rotation_deg);
    ad::Var y_rot = ad::add(ad::matvec(x_tr, model.matrix, false, sample.y.shape), b);
    ad::Var x_rec = lda_reconstruct_var(tape, y_rot, model, b, theta, lda_cfg).x;
    ad::Var d_img = ad::sub(x_tr, x_rec);
    ad::Var l_img = ad::vdot(d_img, d_img);

    // measurement domain: data consistency under re-noised counts
    ad::Var y_aug = tape.constant(draw.y_aug);
    ad::Var x_m = lda_reconstruct_var(tape, y_aug, model, b, theta, lda_cfg).x;
    ad::Var d_meas = ad::sub(y_aug, ad::add(ad::matvec(x_m, model.matrix, false,
                                                       sample.y.shape), b));
    ad::Var l_meas = ad::vdot(d_meas, d_meas);

    SampleLoss out;
    out.l_image = l_img.value()[0];
    out.l_measure = l_meas.value()[0];
    switch (mode) {
        case LossMode::kImage: out.objective = l_img; break;
        case LossMode::kMeasure: out.objective = l_meas; break;
        default: out.objective = ad::add(l_img, ad::scale(l_meas, cfg.lambda)); break;
    }
    return out;
}

/// Value-only loss over a sample set with frozen (epoch-0) augmentation
/// draws from the given stream; used for validation and ablation tables.
inline LossReport evaluate_loss(const std::vector<Sample>& samples,
                                const SystemModel& model, const RegularizerParams& params,
                                const LdaConfig& lda_cfg, const TrainConfig& cfg,
                                const char* stream = "val") {
    check(!samples.empty(), "evaluate_loss: empty sample set");
    LossReport rep;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        ad::Tape tape;
        RegularizerVars theta = lift(tape, params, false);
        detail::SampleDraw draw = detail::draw_augmentation(samples[i], cfg, 0, i, stream);
        SampleLoss l = build_sample_loss(tape, theta, samples[i], model, lda_cfg, cfg, draw,
                                         LossMode::kDual);
        rep.per_sample.push_back({l.l_image, l.l_measure, l.l_image + cfg.lambda * l.l_measure});
        rep.l_image += l.l_image;
        rep.l_measure += l.l_measure;
    }
    rep.l_image /= static_cast<double>(samples.size());
    rep.l_measure /= static_cast<double>(samples.size());
    rep.l_dual = rep.l_image + cfg.lambda * rep.l_measure;
    return rep;
}

struct Checkpoint {
    RegularizerParams params;
    Tensor adam_m, adam_v;
    long step = 0;
    int epoch = 0;        // epochs completed
    double lr = 0.0;
    std::uint64_t seed = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& cp) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    check(out.good(), "cannot write " + path.string());
    io::json h;
    h["format"] = "petrec-checkpoint";
    h["epoch"] = cp.epoch;
    h["step"] = cp.step;
    h["lr"] = cp.lr;
    h["seed"] = cp.seed;
    h["delta"] = cp.params.delta;
    h["log_alpha"] = cp.params.per_phase_log_alpha;
    h["log_beta"] = cp.params.per_phase_log_beta;
    h["layer_shapes"] = io::json::array();
    for (const Tensor& k : cp.params.conv_layers) h["layer_shapes"].push_back(k.shape);
    h["moments"] = cp.adam_m.numel();
    out << h.dump() << '\n';
    for (const Tensor& k : cp.params.conv_layers)
        io::detail::write_raw(out, k.data.data(), k.numel());
    io::detail::write_raw(out, cp.adam_m.data.data(), cp.adam_m.numel());
    io::detail::write_raw(out, cp.adam_v.data.data(), cp.adam_v.numel());
    check(out.good(), "short write to " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open " + path.string());
    io::json h = io::detail::read_header_line(in, path.string());
    check(h.value("format", "") == "petrec-checkpoint", "not a checkpoint: " + path.string());
    Checkpoint cp;
    cp.epoch = h.at("epoch").get<int>();
    cp.step = h.at("step").get<long>();
    cp.lr = h.at("lr").get<double>();
    cp.seed = h.at("seed").get<std::uint64_t>();
    cp.params.delta = h.at("delta").get<double>();
    cp.params.per_phase_log_alpha = h.at("log_alpha").get<std::vector<double>>();
    cp.params.per_phase_log_beta = h.at("log_beta").get<std::vector<double>>();
    for (const auto& shape : h.at("layer_shapes")) {
        Tensor k(shape.get<std::vector<int>>());
        io::detail::read_raw(in, k.data.data(), k.numel());
        cp.params.conv_layers.push_back(std::move(k));
    }
    const auto n_moments = h.at("moments").get<std::size_t>();
    cp.adam_m = Tensor({static_cast<int>(n_moments)});
    cp.adam_v = Tensor({static_cast<int>(n_moments)});
    io::detail::read_raw(in, cp.adam_m.data.data(), n_moments);
    io::detail::read_raw(in, cp.adam_v.data.data(), n_moments);
    validate(cp.params);
    return cp;
}

struct TrainStepLog {
    int epoch = 0;
    long step = 0;
    double l_image = 0.0, l_measure = 0.0, l_dual = 0.0;
    double wall_s = 0.0;
};

struct TrainHistory {
    std::vector<TrainStepLog> steps;
    std::vector<double> val_l_dual;  // one entry per completed epoch
    int best_epoch = -1;
};

struct TrainHooks {
    // called after each completed epoch with the up-to-date optimizer state
    std::function<void(const Checkpoint&, const TrainHistory&)> on_epoch;
};

struct TrainResult {
    RegularizerParams best;
    RegularizerParams last;
    TrainHistory history;
    Checkpoint final_state;
};

class TrainAbort : public std::runtime_error {
  public:
    explicit TrainAbort(const std::string& what) : std::runtime_error(what) {}
};

/// Adam over mean sample loss. Deterministic given cfg.seed: shuffles,
/// rotations and noise draws are all keyed by (seed, epoch, sample).
/// Non-finite losses roll the step back, halve the learning rate and retry;
/// five consecutive failures abort.
inline TrainResult train(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                         const SystemModel& model, const RegularizerParams& theta0,
                         const LdaConfig& lda_cfg, const TrainConfig& cfg,
                         LossMode mode = LossMode::kDual, const TrainHooks* hooks = nullptr,
                         const Checkpoint* resume = nullptr) {
    validate(cfg);
    validate(theta0);
    check(!train_set.empty(), "train: empty dataset");

    const std::size_t n_params = param_count(theta0);
    Tensor theta_flat = pack_params(theta0);
    Tensor adam_m({static_cast<int>(n_params)});
    Tensor adam_v({static_cast<int>(n_params)});
    double lr = cfg.learning_rate;
    long step = 0;
    int start_epoch = 0;
    if (resume) {
        check(param_count(resume->params) == n_params, "train: checkpoint shape mismatch");
        theta_flat = pack_params(resume->params);
        adam_m = resume->adam_m;
        adam_v = resume->adam_v;
        lr = resume->lr;
        step = resume->step;
        start_epoch = resume->epoch;
    }

    TrainResult res;
    res.history.best_epoch = -1;
    double best_val = std::numeric_limits<double>::infinity();
    res.best = unpack_params(theta_flat, theta0);

    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    int consecutive_failures = 0;
    const auto t_start = std::chrono::steady_clock::now();

    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(train_set.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(substream(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(0, static_cast<int>(i) - 1)]);

        for (std::size_t at = 0; at < order.size();) {
            const std::size_t batch_end =
                std::min(order.size(), at + static_cast<std::size_t>(cfg.batch_size));
            const Tensor theta_before = theta_flat;

            Tensor grad({static_cast<int>(n_params)});
            double sum_img = 0.0, sum_meas = 0.0;
            bool finite = true;
            RegularizerParams cur = unpack_params(theta_flat, theta0);
            for (std::size_t bi = at; bi < batch_end && finite; ++bi) {
                const Sample& s = train_set[order[bi]];
                detail::SampleDraw draw = detail::draw_augmentation(
                    s, cfg, static_cast<std::uint64_t>(epoch), order[bi], "train");
                try {
                    ad::Tape tape;
                    RegularizerVars theta = lift(tape, cur, true);
                    SampleLoss l =
                        build_sample_loss(tape, theta, s, model, lda_cfg, cfg, draw, mode);
                    if (!std::isfinite(l.objective.value()[0])) {
                        finite = false;
                        break;
                    }
                    tape.backward(l.objective);
                    std::size_t off = 0;
                    auto take = [&](const ad::Var& v) {
                        const Tensor& g = v.grad();
                        for (std::size_t i = 0; i < v.value().numel(); ++i)
                            grad[off++] += g.data.empty() ? 0.0 : g[i];
                    };
                    for (const ad::Var& k : theta.conv_layers) take(k);
                    for (const ad::Var& a : theta.log_alpha) take(a);
                    for (const ad::Var& b : theta.log_beta) take(b);
                    sum_img += l.l_image;
                    sum_meas += l.l_measure;
                } catch (const SolverAbort&) {
                    finite = false;
                }
            }
            if (finite)
                for (std::size_t i = 0; i < n_params; ++i) {
                    grad[i] /= static_cast<double>(batch_end - at);
                    if (!std::isfinite(grad[i])) finite = false;
                }

            if (!finite) {
                theta_flat = theta_before;
                lr *= 0.5;
                if (++consecutive_failures >= 5)
                    throw TrainAbort("non-finite loss for 5 consecutive attempts at epoch " +
                                     std::to_string(epoch));
                continue;  // retry the same batch with the halved learning rate
            }
            consecutive_failures = 0;

            ++step;
            const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
            for (std::size_t i = 0; i < n_params; ++i) {
                adam_m[i] = beta1 * adam_m[i] + (1.0 - beta1) * grad[i];
                adam_v[i] = beta2 * adam_v[i] + (1.0 - beta2) * grad[i] * grad[i];
                theta_flat[i] -=
                    lr * (adam_m[i] / bc1) / (std::sqrt(adam_v[i] / bc2) + adam_eps);
            }

            TrainStepLog log;
            log.epoch = epoch;
            log.step = step;
            const double inv = 1.0 / static_cast<double>(batch_end - at);
            log.l_image = sum_img * inv;
            log.l_measure = sum_meas * inv;
            log.l_dual = log.l_image + cfg.lambda * log.l_measure;
            log.wall_s =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
                    .count();
            res.history.steps.push_back(log);
            at = batch_end;
        }

        RegularizerParams cur = unpack_params(theta_flat, theta0);
        double epoch_val;
        if (!val_set.empty()) {
            epoch_val = evaluate_loss(val_set, model, cur, lda_cfg, cfg).l_dual;
        } else {
            // no validation split: fall back to the epoch's mean training loss
            double acc = 0.0;
            std::size_t cnt = 0;
            for (const TrainStepLog& l : res.history.steps)
                if (l.epoch == epoch) {
                    acc += l.l_dual;
                    ++cnt;
                }
            epoch_val = cnt ? acc / static_cast<double>(cnt)
                            : std::numeric_limits<double>::infinity();
        }
        res.history.val_l_dual.push_back(epoch_val);
        if (epoch_val < best_val) {
            best_val = epoch_val;
            res.best = cur;
            res.history.best_epoch = epoch;
        }

        if (hooks && hooks->on_epoch) {
            Checkpoint cp;
            cp.params = cur;
            cp.adam_m = adam_m;
            cp.adam_v = adam_v;
            cp.step = step;
            cp.epoch = epoch + 1;
            cp.lr = lr;
            cp.seed = cfg.seed;
            hooks->on_epoch(cp, res.history);
        }
    }

    res.last = unpack_params(theta_flat, theta0);
    if (res.history.best_epoch < 0) res.best = res.last;
    res.final_state.params = res.last;
    res.final_state.adam_m = adam_m;
    res.final_state.adam_v = adam_v;
    res.final_state.step = step;
    res.final_state.epoch = cfg.epochs;
    res.final_state.lr = lr;
    res.final_state.seed = cfg.seed;
    return res;
}

inline std::string history_jsonl(const TrainHistory& h) {
    std::string out;
    for (const TrainStepLog& l : h.steps) {
        io::json j;
        j["epoch"] = l.epoch;
        j["step"] = l.step;
        j["l_image"] = l.l_image;
        j["l_measure"] = l.l_measure;
        j["l_dual"] = l.l_dual;
        j["wall_s"] = l.wall_s;
        out += j.dump();
        out += '\n';
    }
    return out;
}

}  // namespace petrec
