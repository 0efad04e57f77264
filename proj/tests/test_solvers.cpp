#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "petrec/phantom.hpp"
#include "petrec/solvers.hpp"

using namespace petrec;

namespace {

const GridSpec kGrid{16, 1.0};
const SinogramSpec kSino{12, 24, 1.0};

const SystemModel& model16() {
    static SystemModel m = build_system_model(kGrid, kSino);
    return m;
}

ScanData scan16(std::uint64_t ph_seed, std::uint64_t scan_seed, double counts = 2e4) {
    PhantomSpec spec;
    spec.seed = ph_seed;
    spec.tumor_radius_min = 1.5;
    spec.tumor_radius_max = 2.5;
    Image img = make_phantom(spec, kGrid);
    ScanSpec scan;
    scan.total_counts = counts;
    scan.seed = scan_seed;
    return simulate_scan(img, model16(), scan);
}

// test-side oracle: the smoothed isotropic TV whose exact gradient the
// solver uses (forward differences, zero at the far boundary)
double tv_value(const Image& x, double sm) {
    const int n0 = x.shape[0], n1 = x.shape[1];
    double acc = 0.0;
    for (int r = 0; r < n0; ++r)
        for (int c = 0; c < n1; ++c) {
            const double dx = c + 1 < n1 ? x.at(r, c + 1) - x.at(r, c) : 0.0;
            const double dy = r + 1 < n0 ? x.at(r + 1, c) - x.at(r, c) : 0.0;
            acc += std::sqrt(dx * dx + dy * dy + sm * sm);
        }
    return acc;
}

double masked_var(const Image& x, const Image& mask) {
    double sum = 0.0, n = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (mask[i] > 0.0) {
            sum += x[i];
            n += 1.0;
        }
    const double mean = sum / n;
    double acc = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i)
        if (mask[i] > 0.0) acc += (x[i] - mean) * (x[i] - mean);
    return acc / n;
}

}  // namespace

TEST_CASE("negative log likelihood on a hand-checked one pixel system") {
    SystemModel m = build_system_model(GridSpec{1, 2.0}, SinogramSpec{1, 1, 2.0});
    REQUIRE(m.matrix.vals.size() == 1);
    REQUIRE(m.matrix.vals[0] == 2.0);

    Image x({1, 1}, 1.5);
    Sinogram b({1, 1}, 0.5);  // ybar = 2*1.5 + 0.5 = 3.5
    Sinogram y({1, 1}, 2.0);
    REQUIRE(neg_loglik(y, x, m, b) == Catch::Approx(3.5 - 2.0 * std::log(3.5)).epsilon(1e-15));

    y[0] = 0.0;  // 0*log(0) convention: only the mean survives
    REQUIRE(neg_loglik(y, x, m, b) == 3.5);

    Image zero({1, 1}, 0.0);
    REQUIRE(neg_loglik(y, zero, m, b) == 0.5);

    Sinogram nob({1, 1}, 0.0);
    y[0] = 1.0;  // counts where the model says zero mean
    REQUIRE(std::isinf(neg_loglik(y, zero, m, nob)));
}

TEST_CASE("likelihood gradient matches central differences") {
    const SystemModel& m = model16();
    ScanData sd = scan16(31, 7);
    Rng rng(substream(12, "nll-grad"));
    Image x = m.fov;
    for (double& v : x.data) v *= rng.uniform(0.2, 2.0);

    Image g = grad_neg_loglik(sd.y, x, m, sd.b);
    auto fd = oracles::fd_gradient(
        [&](const std::vector<double>& q) {
            Image xq({16, 16});
            xq.data = q;
            return neg_loglik(sd.y, xq, m, sd.b);
        },
        x.data, 1e-6);
    REQUIRE(oracles::max_rel_err(g.data, fd, 1e-3) < 1e-6);
}

TEST_CASE("mlem is a fixed point on noiseless data started at the truth") {
    const SystemModel& m = model16();
    PhantomSpec spec;
    spec.seed = 2;
    spec.tumor_radius_min = 1.5;
    spec.tumor_radius_max = 2.5;
    Image x = make_phantom(spec, kGrid);
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] *= m.fov[i];  // supported inside the FOV

    Sinogram b({kSino.n_angles, kSino.n_bins}, 0.2);
    Sinogram y = forward(m, x, b);
    Image next = mlem_step(x, y, m, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i)
        worst = std::max(worst, std::fabs(next[i] - x[i]) / (1.0 + std::fabs(x[i])));
    REQUIRE(worst < 1e-12);
}

TEST_CASE("mlem monotonically decreases the negative log likelihood") {
    const SystemModel& m = model16();
    for (std::uint64_t seed : {1ull, 5ull, 9ull}) {
        ScanData sd = scan16(seed, seed + 100);
        Image x = mlem_initial(m, 1.0);
        double prev = neg_loglik(sd.y, x, m, sd.b);
        for (int it = 0; it < 25; ++it) {
            x = mlem_step(x, sd.y, m, sd.b);
            const double cur = neg_loglik(sd.y, x, m, sd.b);
            REQUIRE(cur <= prev + 1e-10 * (1.0 + std::fabs(prev)));
            prev = cur;
        }
        REQUIRE(x.min() >= 0.0);
    }
}

TEST_CASE("mlem run helpers: zero iterations, zero stays zero, bad input") {
    const SystemModel& m = model16();
    ScanData sd = scan16(3, 4);
    REQUIRE(mlem_run(sd.y, m, sd.b, 0, 0.7).data == mlem_initial(m, 0.7).data);
    REQUIRE_THROWS(mlem_run(sd.y, m, sd.b, -1));

    Image x = mlem_initial(m, 1.0);
    x[17 * 16 / 2] = 0.0;  // a pixel forced to zero never recovers
    Image stepped = mlem_step(x, sd.y, m, sd.b);
    REQUIRE(stepped[17 * 16 / 2] == 0.0);
}

TEST_CASE("tv gradient is the exact gradient of the smoothed total variation") {
    Rng rng(substream(8, "tv"));
    Image x({7, 7});
    for (double& v : x.data) v = rng.uniform(0.0, 2.0);
    const double sm = 0.05;
    Image g = tv_gradient(x, sm);
    auto fd = oracles::fd_gradient(
        [&](const std::vector<double>& q) {
            Image xq({7, 7});
            xq.data = q;
            return tv_value(xq, sm);
        },
        x.data, 1e-6);
    REQUIRE(oracles::max_rel_err(g.data, fd, 1e-3) < 1e-6);

    Image flat({7, 7}, 3.25);
    REQUIRE(tv_gradient(flat, sm).data == std::vector<double>(49, 0.0));
}

TEST_CASE("emtv with zero penalty is mlem bitwise") {
    const SystemModel& m = model16();
    ScanData sd = scan16(6, 61);
    REQUIRE(emtv_run(sd.y, m, sd.b, 8, 0.0).data == mlem_run(sd.y, m, sd.b, 8).data);
    REQUIRE_THROWS(emtv_step(mlem_initial(m, 1.0), sd.y, m, sd.b, -1e-3));
}

TEST_CASE("the tv penalty suppresses noise in flat regions") {
    const SystemModel& m = model16();
    PhantomSpec spec;
    spec.seed = 14;
    spec.tumor_radius_min = 1.5;
    spec.tumor_radius_max = 2.5;
    PhantomData ph = make_phantom_full(spec, kGrid);
    ScanSpec scan;
    scan.total_counts = 5e3;  // low counts so mlem gets noisy
    scan.seed = 77;
    ScanData sd = simulate_scan(ph.image, m, scan);

    Image plain = mlem_run(sd.y, m, sd.b, 25);
    Image smooth = emtv_run(sd.y, m, sd.b, 25, 0.05);
    REQUIRE(smooth.min() >= 0.0);
    REQUIRE(tv_value(smooth, 1e-8) < tv_value(plain, 1e-8));
    REQUIRE(masked_var(smooth, ph.roi.background_mask) <
            masked_var(plain, ph.roi.background_mask));
}

TEST_CASE("learned phases with zero kernels reduce to the likelihood ascent step") {
    const SystemModel& m = model16();
    ScanData sd = scan16(4, 8);
    RegularizerParams theta = default_regularizer_params(3, 1);
    for (Tensor& k : theta.conv_layers) k = Tensor(k.shape, 0.0);

    LdaConfig cfg;
    cfg.phases = 3;
    cfg.keep_images = true;
    auto [x, trace] = lda_reconstruct(sd.y, m, sd.b, theta, cfg);
    REQUIRE(trace.ok);
    for (const LdaPhase& ph : trace.phases) {
        REQUIRE(ph.u.data == ph.r.data);  // no regularizer correction
        REQUIRE(ph.tau == Catch::Approx(1.0 / 150.0).epsilon(1e-14));
    }
    REQUIRE(x.min() >= 0.0);
}

TEST_CASE("each phase descends the smoothed objective at the incoming eps") {
    const SystemModel& m = model16();
    LdaConfig cfg;
    cfg.phases = 5;
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        ScanData sd = scan16(seed, 50 + seed);
        RegularizerParams theta = default_regularizer_params(cfg.phases, 1000 + seed);
        auto [x, trace] = lda_reconstruct(sd.y, m, sd.b, theta, cfg);
        REQUIRE(trace.ok);
        REQUIRE(trace.phases.size() == 5);
        for (const LdaPhase& ph : trace.phases) {
            REQUIRE(ph.phi_end <= ph.phi_start + 1e-10 * (1.0 + std::fabs(ph.phi_start)));
            REQUIRE(ph.eps_out <= ph.eps_in);
            REQUIRE(ph.ls_ok);
            REQUIRE(ph.x.numel() == 0);  // keep_images off by default
        }
        for (std::size_t i = 0; i < x.numel(); ++i) {
            REQUIRE(x[i] >= 0.0);
            if (m.fov[i] == 0.0) REQUIRE(x[i] == 0.0);
        }
    }
}

TEST_CASE("a permissive tolerance shrinks eps geometrically every phase") {
    const SystemModel& m = model16();
    ScanData sd = scan16(2, 3);
    RegularizerParams theta = default_regularizer_params(4, 5);
    LdaConfig cfg;
    cfg.phases = 4;
    cfg.sigma_tol = 1e12;
    cfg.gamma = 0.5;
    cfg.eps0 = 1e-2;
    auto [x, trace] = lda_reconstruct(sd.y, m, sd.b, theta, cfg);
    double eps = cfg.eps0;
    for (const LdaPhase& ph : trace.phases) {
        REQUIRE(ph.eps_in == eps);
        REQUIRE(ph.eps_out == 0.5 * eps);
        eps *= 0.5;
    }
}

TEST_CASE("an oversized learned step triggers the backtracking safeguard") {
    const SystemModel& m = model16();
    ScanData sd = scan16(11, 13);
    RegularizerParams theta = default_regularizer_params(2, 6);
    theta.per_phase_log_alpha.assign(2, std::log(50.0));  // wildly too large
    LdaConfig cfg;
    cfg.phases = 2;
    cfg.line_search_max = 20;
    auto [x, trace] = lda_reconstruct(sd.y, m, sd.b, theta, cfg);
    bool shrunk = false;
    for (const LdaPhase& ph : trace.phases) {
        if (ph.ls_trials > 1) {
            shrunk = true;
            REQUIRE(ph.alpha < 50.0);
        }
        REQUIRE(ph.phi_end <= ph.phi_start + 1e-10 * (1.0 + std::fabs(ph.phi_start)));
    }
    REQUIRE(shrunk);
}

TEST_CASE("counts in a dead bin abort the solve with a partial trace") {
    SystemModel m = build_system_model(GridSpec{8, 1.0}, SinogramSpec{4, 32, 1.0});
    Sinogram y({4, 32}, 0.0);
    y[0] = 5.0;  // leftmost bin lies outside every pixel's footprint
    REQUIRE(m.matrix.row_offsets[1] == m.matrix.row_offsets[0]);  // really a dead bin
    Sinogram b({4, 32}, 0.0);
    RegularizerParams theta = default_regularizer_params(2, 2);
    LdaConfig cfg;
    cfg.phases = 2;
    try {
        lda_reconstruct(y, m, b, theta, cfg);
        FAIL("expected SolverAbort");
    } catch (const SolverAbort& e) {
        REQUIRE_FALSE(e.trace.ok);
        REQUIRE(e.trace.phases.size() == 1);
        REQUIRE(std::string(e.what()).find("phase 1") != std::string::npos);
    }
}

TEST_CASE("gradients reach the learned parameters through the unrolled solve") {
    const SystemModel& m = model16();
    ScanData sd = scan16(9, 19);
    RegularizerParams theta = default_regularizer_params(3, 21);
    LdaConfig cfg;
    cfg.phases = 3;

    ad::Tape tape;
    RegularizerVars tv = lift(tape, theta, true);
    ad::Var yv = tape.constant(sd.y);
    ad::Var bv = tape.constant(sd.b);
    LdaResult res = lda_reconstruct_var(tape, yv, m, bv, tv, cfg);
    tape.backward(ad::vsum(res.x));

    REQUIRE(norm2(tv.conv_layers[0].grad()) > 0.0);
    REQUIRE(std::fabs(tv.log_alpha[0].grad()[0]) > 0.0);
    REQUIRE(res.trace.ok);
}

TEST_CASE("solver configuration is validated") {
    LdaConfig bad;
    bad.phases = 0;
    REQUIRE_THROWS(validate(bad));
    bad = LdaConfig{};
    bad.rho = 1.0;
    REQUIRE_THROWS(validate(bad));
    bad = LdaConfig{};
    bad.gamma = 0.0;
    REQUIRE_THROWS(validate(bad));
    bad = LdaConfig{};
    bad.eps0 = -1.0;
    REQUIRE_THROWS(validate(bad));

    // fewer learned step sizes than phases
    const SystemModel& m = model16();
    ScanData sd = scan16(1, 2);
    RegularizerParams theta = default_regularizer_params(2, 3);
    LdaConfig cfg;
    cfg.phases = 4;
    REQUIRE_THROWS(lda_reconstruct(sd.y, m, sd.b, theta, cfg));
}
