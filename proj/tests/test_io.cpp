#include <catch2/catch_amalgamated.hpp>

#include <fstream>

#include "oracles.hpp"
#include "petrec/config.hpp"
#include "petrec/io.hpp"

using namespace petrec;
using namespace petrec::io;

TEST_CASE("tensors round trip bitwise with header metadata") {
    auto dir = oracles::scratch_dir("tensorio");
    Tensor t({3, 4});
    Rng rng(substream(1, "io"));
    for (double& v : t.data) v = rng.uniform(-1e6, 1e6);
    t[0] = 0.1;  // not exactly representable: catches text round trips
    t[1] = -0.0;
    t[2] = std::numeric_limits<double>::infinity();
    t[3] = 4.9406564584124654e-324;  // smallest denormal

    save_tensor(dir / "t.tensor", t, "test-role", 987);
    TensorFile f = load_tensor(dir / "t.tensor");
    REQUIRE(f.tensor.shape == t.shape);
    for (std::size_t i = 0; i < t.numel(); ++i) {
        REQUIRE(std::memcmp(&f.tensor[i], &t[i], sizeof(double)) == 0);
    }
    REQUIRE(f.role == "test-role");
    REQUIRE(f.seed == 987);

    // the header is one self-describing JSON line
    std::ifstream in(dir / "t.tensor", std::ios::binary);
    std::string line;
    std::getline(in, line);
    io::json h = io::json::parse(line);
    REQUIRE(h["dtype"] == "f64le");
    REQUIRE(h["shape"] == std::vector<int>{3, 4});
    std::filesystem::remove_all(dir);
}

TEST_CASE("corrupt tensor files fail loudly") {
    auto dir = oracles::scratch_dir("tensorbad");
    Tensor t({4, 4}, 1.5);
    save_tensor(dir / "t.tensor", t, "x", 0);

    // truncate the payload
    auto size = std::filesystem::file_size(dir / "t.tensor");
    std::filesystem::resize_file(dir / "t.tensor", size - 8);
    REQUIRE_THROWS(load_tensor(dir / "t.tensor"));

    io::write_text_file(dir / "garbage.tensor", "not json\n");
    REQUIRE_THROWS(load_tensor(dir / "garbage.tensor"));
    io::write_text_file(dir / "empty.tensor", "");
    REQUIRE_THROWS(load_tensor(dir / "empty.tensor"));
    io::write_text_file(dir / "dtype.tensor", "{\"shape\":[1],\"dtype\":\"f32le\"}\n");
    REQUIRE_THROWS(load_tensor(dir / "dtype.tensor"));
    REQUIRE_THROWS(load_tensor(dir / "missing.tensor"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("system models round trip and reject tampered payloads") {
    auto dir = oracles::scratch_dir("modelio");
    SystemModel m = build_system_model(GridSpec{16, 1.0}, SinogramSpec{12, 24, 1.0});
    save_system_model(dir / "m.bin", m);
    SystemModel q = load_system_model(dir / "m.bin");
    REQUIRE(q.matrix.vals == m.matrix.vals);
    REQUIRE(q.matrix.col_idx == m.matrix.col_idx);
    REQUIRE(q.matrix.row_offsets == m.matrix.row_offsets);
    REQUIRE(q.fov.data == m.fov.data);
    REQUIRE(q.sensitivity.data == m.sensitivity.data);
    REQUIRE(q.grid.n_pixels_per_side == 16);
    REQUIRE(q.sino.n_bins == 24);

    // flip one payload byte past the header: the checksum must catch it
    std::fstream f(dir / "m.bin", std::ios::binary | std::ios::in | std::ios::out);
    std::string line;
    std::getline(f, line);
    f.seekp(static_cast<std::streamoff>(line.size()) + 1 + 200);
    char c;
    f.seekg(f.tellp());
    f.get(c);
    f.seekp(f.tellg() - std::streamoff(1));
    c = static_cast<char>(c ^ 0x40);
    f.put(c);
    f.close();
    REQUIRE_THROWS(load_system_model(dir / "m.bin"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("the model cache builds once and reuses compatible entries") {
    auto dir = oracles::scratch_dir("modelcache");
    const GridSpec g{16, 1.0};
    const SinogramSpec s{12, 24, 1.0};

    SystemModel built = load_or_build_system_model(dir / "cache.bin", g, s);
    REQUIRE(std::filesystem::exists(dir / "cache.bin"));
    auto stamp = std::filesystem::last_write_time(dir / "cache.bin");

    SystemModel reused = load_or_build_system_model(dir / "cache.bin", g, s);
    REQUIRE(std::filesystem::last_write_time(dir / "cache.bin") == stamp);
    REQUIRE(reused.matrix.vals == built.matrix.vals);

    // a different geometry must not reuse the stale cache
    SystemModel other = load_or_build_system_model(dir / "cache.bin", GridSpec{8, 1.0}, s);
    REQUIRE(other.grid.n_pixels_per_side == 8);
    REQUIRE(other.matrix.vals != built.matrix.vals);

    // empty path: always build, never touch the disk
    SystemModel nocache = load_or_build_system_model("", g, s);
    REQUIRE(nocache.matrix.vals == built.matrix.vals);
    std::filesystem::remove_all(dir);
}

TEST_CASE("the default config survives a json round trip") {
    Config c;
    nlohmann::ordered_json j = config_to_json(c);
    Config back = config_from_json(io::json::parse(j.dump()));
    REQUIRE(config_to_json(back).dump(2) == j.dump(2));
    REQUIRE(back.grid.n_pixels_per_side == c.grid.n_pixels_per_side);
    REQUIRE(back.train.lambda == c.train.lambda);
    REQUIRE(back.lda.phases == c.lda.phases);
    REQUIRE(back.dataset.n_train == c.dataset.n_train);
}

TEST_CASE("partial configs override only what they mention") {
    io::json j = io::json::parse(R"({"seed": 77, "train": {"epochs": 3}})");
    Config c = config_from_json(j);
    REQUIRE(c.seed == 77);
    REQUIRE(c.train.epochs == 3);
    Config d;
    REQUIRE(c.train.lambda == d.train.lambda);
    REQUIRE(c.grid.n_pixels_per_side == d.grid.n_pixels_per_side);
}

TEST_CASE("unknown keys are rejected at every nesting level") {
    REQUIRE_THROWS_AS(config_from_json(io::json::parse(R"({"sed": 1})")), ConfigError);
    REQUIRE_THROWS_AS(config_from_json(io::json::parse(R"({"train": {"epoch": 1}})")),
                      ConfigError);
    REQUIRE_THROWS_AS(config_from_json(io::json::parse(R"({"grid": {"pixels": 64}})")),
                      ConfigError);
    REQUIRE_THROWS_AS(
        config_from_json(io::json::parse(R"({"phantom": {"activity": {"grey": 1.0}}})")),
        ConfigError);
    // the error message names the offending key
    try {
        config_from_json(io::json::parse(R"({"train": {"epoch": 1}})"));
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        REQUIRE(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("type and range violations become config errors") {
    REQUIRE_THROWS_AS(config_from_json(io::json::parse(R"({"seed": "abc"})")), ConfigError);
    REQUIRE_THROWS_AS(config_from_json(io::json::parse(R"({"train": {"epochs": -1}})")),
                      ConfigError);
    REQUIRE_THROWS_AS(config_from_json(io::json::parse(R"({"grid": {"n_pixels": 4}})")),
                      ConfigError);
    REQUIRE_THROWS_AS(config_from_json(io::json::parse(R"({"lda": {"rho": 1.5}})")),
                      ConfigError);
    REQUIRE_THROWS_AS(config_from_json(io::json::parse(R"({"train": {"lambda": -0.5}})")),
                      ConfigError);
    REQUIRE_THROWS_AS(config_from_json(io::json::parse("[1,2,3]")), ConfigError);

    // sinogram must cover the grid diagonal footprint
    io::json j = io::json::parse(R"({"sinogram": {"n_bins": 8, "bin_width": 1.0}})");
    REQUIRE_THROWS_AS(config_from_json(j), ConfigError);
}

TEST_CASE("config files load from disk and report parse errors") {
    auto dir = oracles::scratch_dir("cfg");
    io::write_text_file(dir / "ok.json", config_to_json(Config{}).dump(2));
    Config c = load_config(dir / "ok.json");
    REQUIRE(c.mlem.iterations == Config{}.mlem.iterations);

    io::write_text_file(dir / "bad.json", "{nope");
    REQUIRE_THROWS_AS(load_config(dir / "bad.json"), ConfigError);
    REQUIRE_THROWS_AS(load_config(dir / "missing.json"), ConfigError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("initial parameters derive from the config deterministically") {
    Config c;
    c.lda.phases = 3;
    RegularizerParams p = initial_params(c);
    REQUIRE(p.per_phase_log_alpha.size() == 3);
    REQUIRE(p.conv_layers.size() == c.regularizer.channels.size() - 1);
    REQUIRE(p.delta == c.regularizer.delta);
    RegularizerParams q = initial_params(c);
    REQUIRE(pack_params(p).data == pack_params(q).data);
    c.seed += 1;
    RegularizerParams r = initial_params(c);
    REQUIRE(pack_params(p).data != pack_params(r).data);
}
