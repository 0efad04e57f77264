#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "petrec/config.hpp"
#include "petrec/io.hpp"
#include "petrec/metrics.hpp"
#include "petrec/phantom.hpp"
#include "petrec/solvers.hpp"
#include "petrec/trainer.hpp"

// Command implementations behind the CLI. Each run_* validates everything
// before its first filesystem write and throws typed errors which the CLI
// maps to exit codes: ConfigError -> 2, TrainAbort -> 3, EvalError -> 4.
// Timing lives only in run_manifest.json; all other artifacts are
// byte-reproducible for a fixed config.

namespace petrec {

class EvalError : public std::runtime_error {
  public:
    explicit EvalError(const std::string& what) : std::runtime_error(what) {}
};

namespace pipe_detail {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

inline double elapsed(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline std::string sample_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample_%04d", index);
    return buf;
}

inline void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
    io::write_text_file(path, j.dump(2) + "\n");
}

inline io::json read_json(const fs::path& path, const char* what) {
    if (!fs::exists(path)) throw ConfigError(std::string(what) + " not found: " + path.string());
    io::json j = io::json::parse(io::read_text_file(path), nullptr, false);
    if (j.is_discarded())
        throw ConfigError(std::string(what) + ": invalid JSON in " + path.string());
    return j;
}

inline void write_run_manifest(const fs::path& dir, const std::string& command,
                               const Config& cfg, const std::vector<std::string>& outputs,
                               double wall_s) {
    nlohmann::ordered_json j;
    j["format"] = "petrec-run";
    j["command"] = command;
    j["version"] = kVersion;
    j["seed"] = cfg.seed;
    j["outputs"] = outputs;
    j["wall_s"] = wall_s;
    j["config"] = config_to_json(cfg);
    write_json(dir / "run_manifest.json", j);
}

inline SystemModel make_model(const Config& cfg) {
    if (cfg.model_cache.empty()) return build_system_model(cfg.grid, cfg.sino);
    return io::load_or_build_system_model(cfg.model_cache, cfg.grid, cfg.sino);
}

inline Tensor roi_to_tensor(const RoiSpec& roi) {
    const int n0 = roi.background_mask.shape[0], n1 = roi.background_mask.shape[1];
    Tensor t({1 + static_cast<int>(roi.tumor_masks.size()), n0, n1});
    std::copy(roi.background_mask.data.begin(), roi.background_mask.data.end(), t.data.begin());
    for (std::size_t k = 0; k < roi.tumor_masks.size(); ++k) {
        check(roi.tumor_masks[k].shape[0] == n0 && roi.tumor_masks[k].shape[1] == n1,
              "roi mask shape mismatch");
        std::copy(roi.tumor_masks[k].data.begin(), roi.tumor_masks[k].data.end(),
                  t.data.begin() + (k + 1) * static_cast<std::size_t>(n0) * n1);
    }
    return t;
}

inline RoiSpec roi_from_tensor(const Tensor& t) {
    check(t.shape.size() == 3 && t.shape[0] >= 1, "roi tensor must be (1+T, n, n)");
    const int n0 = t.shape[1], n1 = t.shape[2];
    RoiSpec roi;
    roi.background_mask = Image({n0, n1});
    const std::size_t plane = static_cast<std::size_t>(n0) * n1;
    std::copy(t.data.begin(), t.data.begin() + plane, roi.background_mask.data.begin());
    for (int k = 1; k < t.shape[0]; ++k) {
        Image m({n0, n1});
        std::copy(t.data.begin() + k * plane, t.data.begin() + (k + 1) * plane, m.data.begin());
        roi.tumor_masks.push_back(std::move(m));
    }
    return roi;
}

struct DatasetEntry {
    std::string name;
    std::string split;
    std::uint64_t ph_seed = 0;
    std::uint64_t scan_seed = 0;
    double count_scale = 0.0;
};

struct DatasetIndex {
    fs::path dir;
    std::uint64_t seed = 0;
    std::vector<DatasetEntry> entries;

    std::vector<DatasetEntry> split(const std::string& which) const {
        std::vector<DatasetEntry> out;
        for (const DatasetEntry& e : entries)
            if (which == "all" || e.split == which) out.push_back(e);
        return out;
    }
};

inline DatasetIndex load_dataset_index(const fs::path& dir) {
    io::json j = read_json(dir / "manifest.json", "dataset manifest");
    if (j.value("format", "") != "petrec-dataset")
        throw ConfigError("not a dataset manifest: " + (dir / "manifest.json").string());
    DatasetIndex idx;
    idx.dir = dir;
    idx.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("samples")) {
        DatasetEntry d;
        d.name = e.at("name").get<std::string>();
        d.split = e.at("split").get<std::string>();
        d.ph_seed = e.at("ph_seed").get<std::uint64_t>();
        d.scan_seed = e.at("scan_seed").get<std::uint64_t>();
        d.count_scale = e.at("count_scale").get<double>();
        idx.entries.push_back(std::move(d));
    }
    return idx;
}

inline Sample load_sample(const DatasetIndex& idx, const DatasetEntry& e) {
    Sample s;
    s.name = e.name;
    s.y = io::load_tensor(idx.dir / (e.name + ".y.tensor")).tensor;
    s.b = io::load_tensor(idx.dir / (e.name + ".b.tensor")).tensor;
    return s;
}

inline void check_split(const std::string& split) {
    if (split != "train" && split != "val" && split != "test" && split != "all")
        throw ConfigError("unknown split \"" + split + "\" (want train|val|test|all)");
}

}  // namespace pipe_detail

/// Generates the dataset: per sample a phantom, a noisy sinogram, the
/// randoms estimate and the ROI masks, plus a split manifest.
inline int run_simulate(const Config& cfg, const std::filesystem::path& out_dir) {
    namespace pd = pipe_detail;
    const auto t0 = pd::Clock::now();
    const int total = cfg.dataset.n_train + cfg.dataset.n_val + cfg.dataset.n_test;
    if (total <= 0) throw ConfigError("dataset: no samples requested");
    SystemModel model = pd::make_model(cfg);

    std::filesystem::create_directories(out_dir);
    std::vector<pd::DatasetEntry> entries(total);
    std::vector<std::string> outputs;
    std::mutex mx;
    parallel_for(static_cast<std::size_t>(total), cfg.jobs, [&](std::size_t i) {
        pd::DatasetEntry e;
        e.name = pd::sample_name(static_cast<int>(i));
        e.split = static_cast<int>(i) < cfg.dataset.n_train ? "train"
                  : static_cast<int>(i) < cfg.dataset.n_train + cfg.dataset.n_val ? "val"
                                                                                  : "test";
        e.ph_seed = substream(cfg.seed, "sample-phantom", i);
        e.scan_seed = substream(cfg.seed, "sample-scan", i);

        PhantomSpec ps = cfg.phantom;
        ps.seed = e.ph_seed;
        PhantomData ph = make_phantom_full(ps, cfg.grid);
        ScanSpec ss = cfg.scan;
        ss.seed = e.scan_seed;
        ScanData scan = simulate_scan(ph.image, model, ss);
        e.count_scale = scan.count_scale;

        io::save_tensor(out_dir / (e.name + ".x.tensor"), scan.x_scaled, "x_true", e.ph_seed);
        io::save_tensor(out_dir / (e.name + ".y.tensor"), scan.y, "y", e.scan_seed);
        io::save_tensor(out_dir / (e.name + ".b.tensor"), scan.b, "b", e.scan_seed);
        io::save_tensor(out_dir / (e.name + ".roi.tensor"), pd::roi_to_tensor(ph.roi), "roi",
                        e.ph_seed);
        std::lock_guard<std::mutex> lk(mx);
        entries[i] = std::move(e);
    });

    nlohmann::ordered_json m;
    m["format"] = "petrec-dataset";
    m["seed"] = cfg.seed;
    m["grid"] = {{"n_pixels", cfg.grid.n_pixels_per_side}, {"pixel_size", cfg.grid.pixel_size}};
    m["sino"] = {{"n_angles", cfg.sino.n_angles},
                 {"n_bins", cfg.sino.n_bins},
                 {"bin_width", cfg.sino.bin_width}};
    m["samples"] = nlohmann::ordered_json::array();
    for (const pd::DatasetEntry& e : entries) {
        m["samples"].push_back({{"name", e.name},
                                {"split", e.split},
                                {"ph_seed", e.ph_seed},
                                {"scan_seed", e.scan_seed},
                                {"count_scale", e.count_scale}});
        for (const char* suffix : {".x.tensor", ".y.tensor", ".b.tensor", ".roi.tensor"})
            outputs.push_back(e.name + suffix);
    }
    pd::write_json(out_dir / "manifest.json", m);
    outputs.push_back("manifest.json");
    pd::write_run_manifest(out_dir, "simulate", cfg, outputs, pd::elapsed(t0));
    return 0;
}

/// Trains the unrolled reconstructor on the dataset's train split; writes
/// per-epoch checkpoints, best/last checkpoints and a JSONL loss history.
inline int run_train(const Config& cfg, const std::filesystem::path& dataset_dir,
                     const std::filesystem::path& out_dir,
                     const std::filesystem::path& resume_path = {},
                     LossMode mode = LossMode::kDual) {
    namespace pd = pipe_detail;
    const auto t0 = pd::Clock::now();
    pd::DatasetIndex idx = pd::load_dataset_index(dataset_dir);
    std::vector<Sample> train_set, val_set;
    for (const pd::DatasetEntry& e : idx.split("train")) train_set.push_back(pd::load_sample(idx, e));
    for (const pd::DatasetEntry& e : idx.split("val")) val_set.push_back(pd::load_sample(idx, e));
    if (train_set.empty()) throw ConfigError("dataset has no train split");

    Checkpoint resume;
    const bool resuming = !resume_path.empty();
    if (resuming) resume = load_checkpoint(resume_path);

    SystemModel model = pd::make_model(cfg);
    RegularizerParams theta0 = initial_params(cfg);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;

    std::filesystem::create_directories(out_dir);
    std::vector<std::string> outputs;
    TrainHooks hooks;
    hooks.on_epoch = [&](const Checkpoint& cp, const TrainHistory& h) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "epoch_%04d.ckpt", cp.epoch);
        save_checkpoint(out_dir / buf, cp);
        outputs.push_back(buf);
        io::write_text_file(out_dir / "history.jsonl", history_jsonl(h));
    };

    TrainResult res = train(train_set, val_set, model, theta0, cfg.lda, tc, mode, &hooks,
                            resuming ? &resume : nullptr);

    Checkpoint best;
    best.params = res.best;
    best.adam_m = res.final_state.adam_m;
    best.adam_v = res.final_state.adam_v;
    best.step = res.final_state.step;
    best.epoch = res.history.best_epoch >= 0 ? res.history.best_epoch + 1 : cfg.train.epochs;
    best.lr = res.final_state.lr;
    best.seed = cfg.seed;
    save_checkpoint(out_dir / "checkpoint_best.ckpt", best);
    save_checkpoint(out_dir / "checkpoint_last.ckpt", res.final_state);
    io::write_text_file(out_dir / "history.jsonl", history_jsonl(res.history));
    for (const char* f : {"checkpoint_best.ckpt", "checkpoint_last.ckpt", "history.jsonl"})
        outputs.push_back(f);
    pd::write_run_manifest(out_dir, "train", cfg, outputs, pd::elapsed(t0));
    return 0;
}

/// Reconstructs one split of the dataset with mlem, emtv or lda (the latter
/// needs a trained checkpoint) and records per-sample images and, for lda,
/// the per-phase traces.
inline int run_reconstruct(const Config& cfg, const std::string& method,
                           const std::filesystem::path& dataset_dir,
                           const std::filesystem::path& out_dir,
                           const std::filesystem::path& checkpoint_path = {},
                           const std::string& split = "test") {
    namespace pd = pipe_detail;
    const auto t0 = pd::Clock::now();
    if (method != "mlem" && method != "emtv" && method != "lda")
        throw ConfigError("unknown method \"" + method + "\" (want mlem|emtv|lda)");
    pd::check_split(split);
    pd::DatasetIndex idx = pd::load_dataset_index(dataset_dir);
    std::vector<pd::DatasetEntry> entries = idx.split(split);
    if (entries.empty()) throw ConfigError("dataset split \"" + split + "\" is empty");

    RegularizerParams theta;
    if (method == "lda") {
        if (checkpoint_path.empty())
            throw ConfigError("method lda requires --checkpoint");
        if (!std::filesystem::exists(checkpoint_path))
            throw ConfigError("checkpoint not found: " + checkpoint_path.string());
        theta = load_checkpoint(checkpoint_path).params;
        if (static_cast<int>(theta.per_phase_log_alpha.size()) != cfg.lda.phases)
            throw ConfigError("checkpoint phase count " +
                              std::to_string(theta.per_phase_log_alpha.size()) +
                              " does not match lda.phases " + std::to_string(cfg.lda.phases));
    }
    SystemModel model = pd::make_model(cfg);

    std::filesystem::create_directories(out_dir);
    std::vector<nlohmann::ordered_json> traces(entries.size());
    parallel_for(entries.size(), cfg.jobs, [&](std::size_t i) {
        Sample s = pd::load_sample(idx, entries[i]);
        Image rec;
        if (method == "mlem") {
            rec = mlem_run(s.y, model, s.b, cfg.mlem.iterations, cfg.lda.x0_value);
        } else if (method == "emtv") {
            rec = emtv_run(s.y, model, s.b, cfg.emtv.iterations, cfg.emtv.penalty,
                           cfg.lda.x0_value, cfg.emtv.tv_smoothing);
        } else {
            auto [img, trace] = lda_reconstruct(s.y, model, s.b, theta, cfg.lda);
            rec = std::move(img);
            traces[i] = solver_trace_json(trace);
        }
        io::save_tensor(out_dir / (entries[i].name + ".recon.tensor"), rec, "recon",
                        entries[i].scan_seed);
    });

    std::vector<std::string> outputs;
    nlohmann::ordered_json m;
    m["format"] = "petrec-recon";
    m["method"] = method;
    m["split"] = split;
    m["dataset"] = dataset_dir.string();
    if (method == "mlem") m["params"] = {{"iterations", cfg.mlem.iterations}};
    if (method == "emtv")
        m["params"] = {{"iterations", cfg.emtv.iterations},
                       {"penalty", cfg.emtv.penalty},
                       {"tv_smoothing", cfg.emtv.tv_smoothing}};
    if (method == "lda") {
        m["params"] = {{"phases", cfg.lda.phases}};
        m["checkpoint"] = checkpoint_path.string();
    }
    m["samples"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < entries.size(); ++i) {
        m["samples"].push_back(entries[i].name);
        outputs.push_back(entries[i].name + ".recon.tensor");
        if (method == "lda") {
            pd::write_json(out_dir / (entries[i].name + ".trace.json"), traces[i]);
            outputs.push_back(entries[i].name + ".trace.json");
        }
    }
    pd::write_json(out_dir / "manifest.json", m);
    outputs.push_back("manifest.json");
    pd::write_run_manifest(out_dir, "reconstruct", cfg, outputs, pd::elapsed(t0));
    return 0;
}

namespace pipe_detail {

struct ReconDirInfo {
    fs::path dir;
    std::string label;   // directory basename, used for file naming and table rows
    std::string method;  // mlem | emtv | lda | truth
    io::json params;
    fs::path checkpoint;
    std::vector<std::string> samples;
};

inline ReconDirInfo load_recon_dir(const fs::path& dir) {
    ReconDirInfo info;
    info.dir = dir;
    fs::path base = dir;
    if (base.has_filename() == false) base = base.parent_path();
    info.label = base.filename().string();
    io::json m = read_json(dir / "manifest.json", "recon manifest");
    const std::string format = m.value("format", "");
    if (format == "petrec-dataset") {
        // evaluating a dataset against itself: treat truth images as recons
        info.method = "truth";
        for (const auto& e : m.at("samples"))
            info.samples.push_back(e.at("name").get<std::string>());
        return info;
    }
    if (format != "petrec-recon")
        throw ConfigError("not a recon or dataset manifest: " +
                          (dir / "manifest.json").string());
    info.method = m.at("method").get<std::string>();
    info.params = m.value("params", io::json::object());
    if (m.contains("checkpoint")) info.checkpoint = m.at("checkpoint").get<std::string>();
    for (const auto& e : m.at("samples")) info.samples.push_back(e.get<std::string>());
    return info;
}

inline Image load_recon_image(const ReconDirInfo& info, const std::string& sample) {
    const fs::path path =
        info.dir / (sample + (info.method == "truth" ? ".x.tensor" : ".recon.tensor"));
    if (!fs::exists(path)) throw EvalError("missing reconstruction: " + path.string());
    return io::load_tensor(path).tensor;
}

inline Image reconstruct_with(const ReconDirInfo& info, const Sinogram& y, const Sinogram& b,
                              const SystemModel& model, const Config& cfg,
                              const RegularizerParams* theta) {
    if (info.method == "mlem")
        return mlem_run(y, model, b, info.params.at("iterations").get<int>(), cfg.lda.x0_value);
    if (info.method == "emtv")
        return emtv_run(y, model, b, info.params.at("iterations").get<int>(),
                        info.params.at("penalty").get<double>(), cfg.lda.x0_value,
                        info.params.at("tv_smoothing").get<double>());
    check(theta != nullptr, "lda bias-variance needs a checkpoint");
    LdaConfig lc = cfg.lda;
    lc.phases = info.params.at("phases").get<int>();
    return lda_reconstruct(y, model, b, *theta, lc).first;
}

}  // namespace pipe_detail

/// Scores recon directories against the dataset's truth split: per-method
/// JSON reports, a combined comparison table, and (optionally) the R-
/// realization bias/variance protocol re-run per method.
inline int run_evaluate(const Config& cfg, const std::vector<std::filesystem::path>& recon_dirs,
                        const std::filesystem::path& truth_dir,
                        const std::filesystem::path& out_dir, const std::string& split = "test") {
    namespace pd = pipe_detail;
    const auto t0 = pd::Clock::now();
    if (recon_dirs.empty()) throw ConfigError("evaluate: no recon directories given");
    pd::check_split(split);
    pd::DatasetIndex idx = pd::load_dataset_index(truth_dir);
    std::vector<pd::DatasetEntry> entries = idx.split(split);
    if (entries.empty()) throw ConfigError("dataset split \"" + split + "\" is empty");
    std::vector<pd::ReconDirInfo> infos;
    for (const auto& dir : recon_dirs) infos.push_back(pd::load_recon_dir(dir));
    for (const pd::ReconDirInfo& info : infos)
        for (const pd::DatasetEntry& e : entries) {
            bool found = false;
            for (const std::string& s : info.samples) found = found || s == e.name;
            if (!found)
                throw EvalError("recon dir " + info.dir.string() + " is missing sample " +
                                e.name);
        }

    // truth + ROI, loaded once
    std::vector<Image> truth(entries.size());
    std::vector<RoiSpec> rois(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) {
        truth[i] = io::load_tensor(truth_dir / (entries[i].name + ".x.tensor")).tensor;
        rois[i] = pd::roi_from_tensor(
            io::load_tensor(truth_dir / (entries[i].name + ".roi.tensor")).tensor);
    }

    const bool want_bv = cfg.evaluate.bias_variance;
    SystemModel model;
    Image bv_truth;
    Sinogram bv_b;
    std::vector<Sinogram> bv_ys;
    if (want_bv) {
        // R noise realizations of the first evaluated phantom, shared by all
        // methods; deterministic in (dataset seed, realization index)
        model = pd::make_model(cfg);
        PhantomSpec ps = cfg.phantom;
        ps.seed = entries.front().ph_seed;
        PhantomData ph = make_phantom_full(ps, cfg.grid);
        for (int r = 0; r < cfg.evaluate.realizations; ++r) {
            ScanSpec ss = cfg.scan;
            ss.seed = substream(idx.seed, "bias-variance", static_cast<std::uint64_t>(r));
            ScanData scan = simulate_scan(ph.image, model, ss);
            if (r == 0) {
                bv_truth = scan.x_scaled;
                bv_b = scan.b;
            }
            bv_ys.push_back(std::move(scan.y));
        }
    }

    std::filesystem::create_directories(out_dir);
    std::vector<std::string> outputs;
    std::string table;
    char line[256];
    std::snprintf(line, sizeof line, "%-12s %10s %8s %8s %8s %10s %10s\n", "method",
                  "psnr", "ssim", "rmse", "crc", "bias", "variance");
    table += line;

    for (const pd::ReconDirInfo& info : infos) {
        EvalReport rep;
        rep.slices.resize(entries.size());
        parallel_for(entries.size(), cfg.jobs, [&](std::size_t i) {
            Image rec = pd::load_recon_image(info, entries[i].name);
            if (!rec.same_shape(truth[i]))
                throw EvalError("shape mismatch for " + entries[i].name + " in " +
                                info.dir.string());
            rep.slices[i] = evaluate_slice(entries[i].name, rec, truth[i], rois[i]);
        });

        if (want_bv && info.method != "truth") {
            RegularizerParams theta;
            const bool is_lda = info.method == "lda";
            if (is_lda) {
                if (info.checkpoint.empty() || !std::filesystem::exists(info.checkpoint))
                    throw ConfigError("bias-variance needs the checkpoint recorded in " +
                                      info.dir.string());
                theta = load_checkpoint(info.checkpoint).params;
            }
            std::vector<Image> recs(bv_ys.size());
            parallel_for(bv_ys.size(), cfg.jobs, [&](std::size_t r) {
                recs[r] = pd::reconstruct_with(info, bv_ys[r], bv_b, model, cfg,
                                               is_lda ? &theta : nullptr);
            });
            rep.bv = bias_variance(recs, bv_truth);
            rep.has_bias_variance = true;
        }

        nlohmann::ordered_json rj = eval_report_json(rep);
        rj["method"] = info.method;
        rj["label"] = info.label;
        pd::write_json(out_dir / (info.label + ".eval.json"), rj);
        outputs.push_back(info.label + ".eval.json");

        double mp = 0, ms = 0, mr = 0, mc = 0;
        std::size_t nc = 0;
        for (const SliceMetrics& s : rep.slices) {
            mp += s.psnr;
            ms += s.ssim;
            mr += s.rmse;
            for (double c : s.crc) {
                mc += c;
                ++nc;
            }
        }
        const double n = static_cast<double>(rep.slices.size());
        if (rep.has_bias_variance)
            std::snprintf(line, sizeof line, "%-12s %10.4f %8.4f %8.4f %8.4f %10.6f %10.6f\n",
                          info.label.c_str(), mp / n, ms / n, mr / n,
                          nc ? mc / static_cast<double>(nc) : 0.0, rep.bv.bias,
                          rep.bv.variance);
        else
            std::snprintf(line, sizeof line, "%-12s %10.4f %8.4f %8.4f %8.4f %10s %10s\n",
                          info.label.c_str(), mp / n, ms / n, mr / n,
                          nc ? mc / static_cast<double>(nc) : 0.0, "-", "-");
        table += line;
    }

    io::write_text_file(out_dir / "comparison.txt", table);
    outputs.push_back("comparison.txt");
    pd::write_run_manifest(out_dir, "evaluate", cfg, outputs, pd::elapsed(t0));
    std::fputs(table.c_str(), stdout);
    return 0;
}

struct AblationRow {
    std::string name;
    int phases = 0;
    std::string mode;
    double train_l_image = 0.0;
    double train_l_measure = 0.0;
    double train_l_dual = 0.0;
    double test_psnr = 0.0;
};

/// Sweep driver: trains the phase-count ladder with the dual loss plus the
/// two single-loss modes at the default phase count, then scores every
/// trained model with the same dual-loss evaluation on the training split
/// and mean PSNR on the test split.
inline int run_ablate(const Config& cfg, const std::filesystem::path& dataset_dir,
                      const std::filesystem::path& out_dir) {
    namespace pd = pipe_detail;
    const auto t0 = pd::Clock::now();
    pd::DatasetIndex idx = pd::load_dataset_index(dataset_dir);
    std::vector<Sample> train_set;
    for (const pd::DatasetEntry& e : idx.split("train")) train_set.push_back(pd::load_sample(idx, e));
    if (train_set.empty()) throw ConfigError("dataset has no train split");
    std::vector<pd::DatasetEntry> test_entries = idx.split("test");
    std::vector<Sample> test_set;
    std::vector<Image> test_truth;
    for (const pd::DatasetEntry& e : test_entries) {
        test_set.push_back(pd::load_sample(idx, e));
        test_truth.push_back(io::load_tensor(dataset_dir / (e.name + ".x.tensor")).tensor);
    }
    SystemModel model = pd::make_model(cfg);

    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    tc.epochs = cfg.ablate.epochs;

    struct RunSpec {
        std::string name;
        int phases;
        LossMode mode;
    };
    std::vector<RunSpec> runs;
    for (int p : cfg.ablate.phases)
        runs.push_back({"phases_" + std::to_string(p) + "_dual", p, LossMode::kDual});
    bool default_in_sweep = false;
    for (int p : cfg.ablate.phases) default_in_sweep = default_in_sweep || p == cfg.lda.phases;
    if (!default_in_sweep)
        runs.push_back({"phases_" + std::to_string(cfg.lda.phases) + "_dual", cfg.lda.phases,
                        LossMode::kDual});
    runs.push_back({"mode_image", cfg.lda.phases, LossMode::kImage});
    runs.push_back({"mode_measure", cfg.lda.phases, LossMode::kMeasure});

    std::filesystem::create_directories(out_dir);
    std::vector<std::string> outputs;
    std::vector<AblationRow> rows;
    for (const RunSpec& run : runs) {
        LdaConfig lc = cfg.lda;
        lc.phases = run.phases;
        RegularizerParams theta0 =
            make_regularizer_params(cfg.regularizer.channels, cfg.regularizer.kernel_size,
                                    run.phases, cfg.regularizer.delta, cfg.regularizer.alpha0,
                                    cfg.regularizer.beta0, cfg.seed);
        TrainResult res = train(train_set, {}, model, theta0, lc, tc, run.mode);
        const RegularizerParams& theta = res.last;  // the model at convergence

        AblationRow row;
        row.name = run.name;
        row.phases = run.phases;
        row.mode = loss_mode_name(run.mode);
        LossReport train_eval = evaluate_loss(train_set, model, theta, lc, tc, "ablate-eval");
        row.train_l_image = train_eval.l_image;
        row.train_l_measure = train_eval.l_measure;
        row.train_l_dual = train_eval.l_dual;
        if (!test_set.empty()) {
            double acc = 0.0;
            for (std::size_t i = 0; i < test_set.size(); ++i) {
                Image rec =
                    lda_reconstruct(test_set[i].y, model, test_set[i].b, theta, lc).first;
                acc += psnr(rec, test_truth[i]);
            }
            row.test_psnr = acc / static_cast<double>(test_set.size());
        }
        rows.push_back(row);

        Checkpoint cp;
        cp.params = theta;
        cp.adam_m = res.final_state.adam_m;
        cp.adam_v = res.final_state.adam_v;
        cp.step = res.final_state.step;
        cp.epoch = res.final_state.epoch;
        cp.lr = res.final_state.lr;
        cp.seed = cfg.seed;
        save_checkpoint(out_dir / (run.name + ".ckpt"), cp);
        outputs.push_back(run.name + ".ckpt");
    }

    nlohmann::ordered_json aj;
    aj["format"] = "petrec-ablation";
    aj["epochs"] = cfg.ablate.epochs;
    aj["rows"] = nlohmann::ordered_json::array();
    std::string table;
    char line[256];
    std::snprintf(line, sizeof line, "%-18s %7s %8s %14s %14s %14s %10s\n", "run", "phases",
                  "mode", "train_l_image", "train_l_meas", "train_l_dual", "test_psnr");
    table += line;
    for (const AblationRow& r : rows) {
        aj["rows"].push_back({{"name", r.name},
                              {"phases", r.phases},
                              {"mode", r.mode},
                              {"train_l_image", r.train_l_image},
                              {"train_l_measure", r.train_l_measure},
                              {"train_l_dual", r.train_l_dual},
                              {"test_psnr", r.test_psnr}});
        std::snprintf(line, sizeof line, "%-18s %7d %8s %14.6e %14.6e %14.6e %10.4f\n",
                      r.name.c_str(), r.phases, r.mode.c_str(), r.train_l_image,
                      r.train_l_measure, r.train_l_dual, r.test_psnr);
        table += line;
    }
    pd::write_json(out_dir / "ablation.json", aj);
    io::write_text_file(out_dir / "ablation.txt", table);
    outputs.push_back("ablation.json");
    outputs.push_back("ablation.txt");
    pd::write_run_manifest(out_dir, "ablate", cfg, outputs, pd::elapsed(t0));
    std::fputs(table.c_str(), stdout);
    return 0;
}

/// Maps pipeline exceptions to process exit codes (0 ok, 2 config/input,
/// 3 training abort, 4 evaluation mismatch, 1 anything else).
template <class Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const TrainAbort& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const EvalError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace petrec
