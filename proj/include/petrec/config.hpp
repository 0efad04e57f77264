#pragma once

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "petrec/io.hpp"
#include "petrec/phantom.hpp"
#include "petrec/regularizer.hpp"
#include "petrec/solvers.hpp"
#include "petrec/trainer.hpp"

// Single JSON config with full-schema validation: unknown keys are rejected,
// every value is type- and range-checked, missing keys take the defaults
// below. `print-config` dumps the effective config.

namespace petrec {

struct DatasetConfig {
    int n_train = 40;
    int n_val = 8;
    int n_test = 16;
};

struct MlemConfig {
    int iterations = 25;
};

struct EmtvConfig {
    int iterations = 25;
    double penalty = 2e-5;
    double tv_smoothing = 1e-8;
};

struct AblateConfig {
    std::vector<int> phases = {2, 4, 6, 8, 10};
    int epochs = 20;
};

struct EvaluateConfig {
    bool bias_variance = true;
    int realizations = 5;
};

struct RegularizerConfig {
    std::vector<int> channels = {1, 8, 8, 8};
    int kernel_size = 3;
    double delta = 0.002;
    double alpha0 = 0.01;
    double beta0 = 0.02;
};

struct Config {
    std::uint64_t seed = 1234;
    int jobs = 0;  // 0 = all available cores
    std::string model_cache;
    GridSpec grid;
    SinogramSpec sino;
    PhantomSpec phantom;
    ScanSpec scan;
    DatasetConfig dataset;
    RegularizerConfig regularizer;
    LdaConfig lda;
    TrainConfig train;
    MlemConfig mlem;
    EmtvConfig emtv;
    AblateConfig ablate;
    EvaluateConfig evaluate;
};

class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail_config {

inline void fail(const std::string& where, const std::string& what) {
    throw ConfigError("config: " + where + ": " + what);
}

inline void expect_object(const io::json& j, const std::string& where) {
    if (!j.is_object()) fail(where, "expected an object");
}

inline void reject_unknown(const io::json& j, const std::vector<std::string>& known,
                           const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const std::string& k : known) ok = ok || k == key;
        if (!ok) fail(where, "unknown key \"" + key + "\"");
    }
}

template <class T>
T get_number(const io::json& j, const std::string& where) {
    if constexpr (std::is_same_v<T, bool>) {
        if (!j.is_boolean()) fail(where, "expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
        if (!j.is_number_integer() && !j.is_number_unsigned())
            fail(where, "expected an integer");
    } else {
        if (!j.is_number()) fail(where, "expected a number");
    }
    return j.get<T>();
}

template <class T>
void read_field(const io::json& sec, const std::string& where, const std::string& key, T& out) {
    if (!sec.contains(key)) return;
    const io::json& v = sec.at(key);
    const std::string at = where.empty() ? key : where + "." + key;
    if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) fail(at, "expected a string");
        out = v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
        if (!v.is_array()) fail(at, "expected an array of integers");
        out.clear();
        for (const auto& e : v) out.push_back(get_number<int>(e, at));
    } else {
        out = get_number<T>(v, at);
    }
}

inline void range(bool ok, const std::string& where, const std::string& what) {
    if (!ok) fail(where, what);
}

}  // namespace detail_config

inline nlohmann::ordered_json config_to_json(const Config& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["jobs"] = c.jobs;
    j["model_cache"] = c.model_cache;
    j["grid"] = {{"n_pixels", c.grid.n_pixels_per_side}, {"pixel_size", c.grid.pixel_size}};
    j["sino"] = {{"n_angles", c.sino.n_angles},
                 {"n_bins", c.sino.n_bins},
                 {"bin_width", c.sino.bin_width}};
    j["phantom"] = {{"n_background_ellipses", c.phantom.n_background_ellipses},
                    {"n_tumors", c.phantom.n_tumors},
                    {"tumor_radius_min", c.phantom.tumor_radius_min},
                    {"tumor_radius_max", c.phantom.tumor_radius_max},
                    {"activities",
                     {{"gray", c.phantom.activity_levels.at("gray")},
                      {"white", c.phantom.activity_levels.at("white")},
                      {"ellipse", c.phantom.activity_levels.at("ellipse")},
                      {"tumor", c.phantom.activity_levels.at("tumor")}}}};
    j["scan"] = {{"total_counts", c.scan.total_counts},
                 {"randoms_fraction", c.scan.randoms_fraction}};
    j["dataset"] = {{"n_train", c.dataset.n_train},
                    {"n_val", c.dataset.n_val},
                    {"n_test", c.dataset.n_test}};
    j["regularizer"] = {{"channels", c.regularizer.channels},
                        {"kernel_size", c.regularizer.kernel_size},
                        {"delta", c.regularizer.delta},
                        {"alpha0", c.regularizer.alpha0},
                        {"beta0", c.regularizer.beta0}};
    j["lda"] = {{"phases", c.lda.phases},
                {"line_search_max", c.lda.line_search_max},
                {"rho", c.lda.rho},
                {"gamma", c.lda.gamma},
                {"sigma_tol", c.lda.sigma_tol},
                {"eps0", c.lda.eps0},
                {"x0_value", c.lda.x0_value}};
    j["train"] = {{"lambda", c.train.lambda},
                  {"learning_rate", c.train.learning_rate},
                  {"batch_size", c.train.batch_size},
                  {"epochs", c.train.epochs},
                  {"rotation_set", c.train.rotation_set},
                  {"noise_poisson", c.train.noise_poisson},
                  {"noise_gaussian_std", c.train.noise_gaussian_std},
                  {"allow_arbitrary_rotation", c.train.allow_arbitrary_rotation}};
    j["mlem"] = {{"iterations", c.mlem.iterations}};
    j["emtv"] = {{"iterations", c.emtv.iterations},
                 {"penalty", c.emtv.penalty},
                 {"tv_smoothing", c.emtv.tv_smoothing}};
    j["ablate"] = {{"phases", c.ablate.phases}, {"epochs", c.ablate.epochs}};
    j["evaluate"] = {{"bias_variance", c.evaluate.bias_variance},
                     {"realizations", c.evaluate.realizations}};
    return j;
}

inline Config config_from_json(const io::json& j) {
    namespace dc = detail_config;
    Config c;
    dc::expect_object(j, "top level");
    dc::reject_unknown(j,
                       {"seed", "jobs", "model_cache", "grid", "sino", "phantom", "scan",
                        "dataset", "regularizer", "lda", "train", "mlem", "emtv", "ablate",
                        "evaluate"},
                       "top level");
    dc::read_field(j, "", "seed", c.seed);
    dc::read_field(j, "", "jobs", c.jobs);
    dc::read_field(j, "", "model_cache", c.model_cache);
    dc::range(c.jobs >= 0, "jobs", "must be >= 0");

    if (j.contains("grid")) {
        const io::json& s = j.at("grid");
        dc::expect_object(s, "grid");
        dc::reject_unknown(s, {"n_pixels", "pixel_size"}, "grid");
        dc::read_field(s, "grid", "n_pixels", c.grid.n_pixels_per_side);
        dc::read_field(s, "grid", "pixel_size", c.grid.pixel_size);
        dc::range(c.grid.n_pixels_per_side >= 8, "grid.n_pixels", "must be >= 8");
        dc::range(c.grid.pixel_size > 0.0, "grid.pixel_size", "must be positive");
    }
    if (j.contains("sino")) {
        const io::json& s = j.at("sino");
        dc::expect_object(s, "sino");
        dc::reject_unknown(s, {"n_angles", "n_bins", "bin_width"}, "sino");
        dc::read_field(s, "sino", "n_angles", c.sino.n_angles);
        dc::read_field(s, "sino", "n_bins", c.sino.n_bins);
        dc::read_field(s, "sino", "bin_width", c.sino.bin_width);
        dc::range(c.sino.n_angles >= 2, "sino.n_angles", "must be >= 2");
        dc::range(c.sino.n_bins >= 4, "sino.n_bins", "must be >= 4");
        dc::range(c.sino.bin_width > 0.0, "sino.bin_width", "must be positive");
    }
    dc::range(c.sino.n_bins * c.sino.bin_width >=
                  c.grid.n_pixels_per_side * c.grid.pixel_size - 1e-12,
              "sino", "detector must cover the grid diameter");
    if (j.contains("phantom")) {
        const io::json& s = j.at("phantom");
        dc::expect_object(s, "phantom");
        dc::reject_unknown(
            s, {"n_background_ellipses", "n_tumors", "tumor_radius_min", "tumor_radius_max",
                "activities"},
            "phantom");
        dc::read_field(s, "phantom", "n_background_ellipses", c.phantom.n_background_ellipses);
        dc::read_field(s, "phantom", "n_tumors", c.phantom.n_tumors);
        dc::read_field(s, "phantom", "tumor_radius_min", c.phantom.tumor_radius_min);
        dc::read_field(s, "phantom", "tumor_radius_max", c.phantom.tumor_radius_max);
        if (s.contains("activities")) {
            const io::json& a = s.at("activities");
            dc::expect_object(a, "phantom.activities");
            dc::reject_unknown(a, {"gray", "white", "ellipse", "tumor"}, "phantom.activities");
            for (const char* name : {"gray", "white", "ellipse", "tumor"})
                dc::read_field(a, "phantom.activities", name, c.phantom.activity_levels[name]);
        }
        dc::range(c.phantom.n_background_ellipses >= 0, "phantom.n_background_ellipses",
                  "must be >= 0");
        dc::range(c.phantom.n_tumors >= 0, "phantom.n_tumors", "must be >= 0");
        dc::range(c.phantom.tumor_radius_min > 0.0 &&
                      c.phantom.tumor_radius_max >= c.phantom.tumor_radius_min,
                  "phantom.tumor_radius", "need 0 < min <= max");
        for (const auto& [name, level] : c.phantom.activity_levels)
            dc::range(level >= 0.0, "phantom.activities", name + " must be nonnegative");
        dc::range(c.phantom.activity_levels.at("tumor") > 0.0, "phantom.activities",
                  "tumor must be positive");
    }
    if (j.contains("scan")) {
        const io::json& s = j.at("scan");
        dc::expect_object(s, "scan");
        dc::reject_unknown(s, {"total_counts", "randoms_fraction"}, "scan");
        dc::read_field(s, "scan", "total_counts", c.scan.total_counts);
        dc::read_field(s, "scan", "randoms_fraction", c.scan.randoms_fraction);
        dc::range(c.scan.total_counts > 0.0, "scan.total_counts", "must be positive");
        dc::range(c.scan.randoms_fraction >= 0.0 && c.scan.randoms_fraction < 1.0,
                  "scan.randoms_fraction", "must be in [0, 1)");
    }
    if (j.contains("dataset")) {
        const io::json& s = j.at("dataset");
        dc::expect_object(s, "dataset");
        dc::reject_unknown(s, {"n_train", "n_val", "n_test"}, "dataset");
        dc::read_field(s, "dataset", "n_train", c.dataset.n_train);
        dc::read_field(s, "dataset", "n_val", c.dataset.n_val);
        dc::read_field(s, "dataset", "n_test", c.dataset.n_test);
        dc::range(c.dataset.n_train >= 0 && c.dataset.n_val >= 0 && c.dataset.n_test >= 0,
                  "dataset", "sample counts must be >= 0");
        dc::range(c.dataset.n_train + c.dataset.n_val + c.dataset.n_test > 0, "dataset",
                  "at least one sample is required");
    }
    if (j.contains("regularizer")) {
        const io::json& s = j.at("regularizer");
        dc::expect_object(s, "regularizer");
        dc::reject_unknown(s, {"channels", "kernel_size", "delta", "alpha0", "beta0"},
                           "regularizer");
        dc::read_field(s, "regularizer", "channels", c.regularizer.channels);
        dc::read_field(s, "regularizer", "kernel_size", c.regularizer.kernel_size);
        dc::read_field(s, "regularizer", "delta", c.regularizer.delta);
        dc::read_field(s, "regularizer", "alpha0", c.regularizer.alpha0);
        dc::read_field(s, "regularizer", "beta0", c.regularizer.beta0);
        dc::range(c.regularizer.channels.size() >= 2 && c.regularizer.channels.front() == 1,
                  "regularizer.channels", "need [1, ...] with at least one conv layer");
        for (int ch : c.regularizer.channels)
            dc::range(ch >= 1, "regularizer.channels", "channel counts must be >= 1");
        dc::range(c.regularizer.kernel_size >= 1 && c.regularizer.kernel_size % 2 == 1,
                  "regularizer.kernel_size", "must be odd and >= 1");
        dc::range(c.regularizer.delta > 0.0, "regularizer.delta", "must be positive");
        dc::range(c.regularizer.alpha0 > 0.0 && c.regularizer.beta0 > 0.0,
                  "regularizer.alpha0/beta0", "must be positive");
    }
    if (j.contains("lda")) {
        const io::json& s = j.at("lda");
        dc::expect_object(s, "lda");
        dc::reject_unknown(
            s, {"phases", "line_search_max", "rho", "gamma", "sigma_tol", "eps0", "x0_value"},
            "lda");
        dc::read_field(s, "lda", "phases", c.lda.phases);
        dc::read_field(s, "lda", "line_search_max", c.lda.line_search_max);
        dc::read_field(s, "lda", "rho", c.lda.rho);
        dc::read_field(s, "lda", "gamma", c.lda.gamma);
        dc::read_field(s, "lda", "sigma_tol", c.lda.sigma_tol);
        dc::read_field(s, "lda", "eps0", c.lda.eps0);
        dc::read_field(s, "lda", "x0_value", c.lda.x0_value);
        try {
            validate(c.lda);
        } catch (const std::exception& e) {
            dc::fail("lda", e.what());
        }
    }
    if (j.contains("train")) {
        const io::json& s = j.at("train");
        dc::expect_object(s, "train");
        dc::reject_unknown(s,
                           {"lambda", "learning_rate", "batch_size", "epochs", "rotation_set",
                            "noise_poisson", "noise_gaussian_std", "allow_arbitrary_rotation"},
                           "train");
        dc::read_field(s, "train", "lambda", c.train.lambda);
        dc::read_field(s, "train", "learning_rate", c.train.learning_rate);
        dc::read_field(s, "train", "batch_size", c.train.batch_size);
        dc::read_field(s, "train", "epochs", c.train.epochs);
        dc::read_field(s, "train", "rotation_set", c.train.rotation_set);
        dc::read_field(s, "train", "noise_poisson", c.train.noise_poisson);
        dc::read_field(s, "train", "noise_gaussian_std", c.train.noise_gaussian_std);
        dc::read_field(s, "train", "allow_arbitrary_rotation",
                       c.train.allow_arbitrary_rotation);
        try {
            validate(c.train);
        } catch (const std::exception& e) {
            dc::fail("train", e.what());
        }
    }
    if (j.contains("mlem")) {
        const io::json& s = j.at("mlem");
        dc::expect_object(s, "mlem");
        dc::reject_unknown(s, {"iterations"}, "mlem");
        dc::read_field(s, "mlem", "iterations", c.mlem.iterations);
        dc::range(c.mlem.iterations >= 1, "mlem.iterations", "must be >= 1");
    }
    if (j.contains("emtv")) {
        const io::json& s = j.at("emtv");
        dc::expect_object(s, "emtv");
        dc::reject_unknown(s, {"iterations", "penalty", "tv_smoothing"}, "emtv");
        dc::read_field(s, "emtv", "iterations", c.emtv.iterations);
        dc::read_field(s, "emtv", "penalty", c.emtv.penalty);
        dc::read_field(s, "emtv", "tv_smoothing", c.emtv.tv_smoothing);
        dc::range(c.emtv.iterations >= 1, "emtv.iterations", "must be >= 1");
        dc::range(c.emtv.penalty >= 0.0, "emtv.penalty", "must be >= 0");
        dc::range(c.emtv.tv_smoothing > 0.0, "emtv.tv_smoothing", "must be positive");
    }
    if (j.contains("ablate")) {
        const io::json& s = j.at("ablate");
        dc::expect_object(s, "ablate");
        dc::reject_unknown(s, {"phases", "epochs"}, "ablate");
        dc::read_field(s, "ablate", "phases", c.ablate.phases);
        dc::read_field(s, "ablate", "epochs", c.ablate.epochs);
        dc::range(!c.ablate.phases.empty(), "ablate.phases", "must not be empty");
        for (int p : c.ablate.phases)
            dc::range(p >= 1, "ablate.phases", "phase counts must be >= 1");
        dc::range(c.ablate.epochs >= 1, "ablate.epochs", "must be >= 1");
    }
    if (j.contains("evaluate")) {
        const io::json& s = j.at("evaluate");
        dc::expect_object(s, "evaluate");
        dc::reject_unknown(s, {"bias_variance", "realizations"}, "evaluate");
        dc::read_field(s, "evaluate", "bias_variance", c.evaluate.bias_variance);
        dc::read_field(s, "evaluate", "realizations", c.evaluate.realizations);
        dc::range(c.evaluate.realizations >= 2, "evaluate.realizations", "must be >= 2");
    }
    return c;
}

inline Config load_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = io::read_text_file(path);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    io::json j = io::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config: " + path.string() + ": invalid JSON");
    return config_from_json(j);
}

inline RegularizerParams initial_params(const Config& c) {
    return make_regularizer_params(c.regularizer.channels, c.regularizer.kernel_size,
                                   c.lda.phases, c.regularizer.delta, c.regularizer.alpha0,
                                   c.regularizer.beta0, c.seed);
}

}  // namespace petrec
