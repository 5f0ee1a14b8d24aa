#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dsplats/diffusion.hpp"
#include "oracles.hpp"

using namespace dsplats;

namespace {

LatentGrid make_grid(int views, int th, int tw, float fill) {
    std::vector<Latent> tiles(views, Latent(th, tw));
    for (auto& z : tiles)
        for (float& v : z.data) v = fill;
    return assemble_grid(tiles);
}

LatentGrid random_grid(Rng& rng, int views, int th, int tw) {
    std::vector<Latent> tiles(views, Latent(th, tw));
    for (auto& z : tiles)
        for (float& v : z.data) v = static_cast<float>(rng.normal());
    return assemble_grid(tiles);
}

}  // namespace

TEST_CASE("cosine schedule starts clean and decreases strictly") {
    NoiseSchedule sched = cosine_schedule(1000);
    REQUIRE(sched.T == 1000);
    REQUIRE(sched.alpha_bar.size() == 1001);
    REQUIRE(sched.alpha_bar[0] == 1.0);
    for (int t = 1; t <= 1000; ++t) {
        REQUIRE(sched.alpha_bar[t] < sched.alpha_bar[t - 1]);
        REQUIRE(sched.alpha_bar[t] > 0.0);
    }
    CHECK_THROWS_AS(cosine_schedule(0), ValueError);
}

TEST_CASE("schedule values match the closed-form cosine expression") {
    NoiseSchedule sched = cosine_schedule(1000);
    // Recompute from scratch at a few interior points.
    const double s = 0.008;
    auto f = [&](double t) {
        double c = std::cos((t / 1000.0 + s) / (1.0 + s) * 3.14159265358979323846 / 2.0);
        return c * c;
    };
    for (int t : {1, 100, 500, 900}) {
        double expect = f(t) / f(0);
        REQUIRE(sched.alpha_bar[t] == Catch::Approx(expect).margin(1e-12));
    }
    // Near t = T the raw ratio collapses to ~0 and the per-step floor
    // (beta <= 0.999) takes over.
    REQUIRE(sched.alpha_bar[1000] == Catch::Approx(sched.alpha_bar[999] * 0.001).margin(1e-18));
}

TEST_CASE("forward noising has the scheduled first and second moments") {
    NoiseSchedule sched = cosine_schedule(1000);
    const float z0_val = 0.7f;
    LatentGrid z0 = make_grid(6, 24, 24, z0_val);
    std::vector<uint8_t> mask(6, 0);
    mask[0] = 1;
    Rng rng(4242);

    for (int t : {100, 500, 900}) {
        NoisyLatentGrid zt = add_noise(z0, t, sched, rng, mask);
        REQUIRE(zt.t == t);
        double sab = sched.sqrt_ab(t), snab = sched.sqrt_one_minus_ab(t);

        // Normalized residuals over the five noised views: mean ~ 0, var ~ 1.
        double sum = 0, sum2 = 0;
        size_t n = 0;
        int cols = 3;
        for (int view = 1; view < 6; ++view) {
            int row = view / cols, col = view % cols;
            for (int y = 0; y < 24; ++y)
                for (int x = 0; x < 24; ++x)
                    for (int c = 0; c < 4; ++c) {
                        double r =
                            (zt.grid.at(row * 24 + y, col * 24 + x, c) - sab * z0_val) / snab;
                        sum += r;
                        sum2 += r * r;
                        ++n;
                    }
        }
        REQUIRE(n == 5u * 24 * 24 * 4);
        double mean = sum / n, var = sum2 / n;
        INFO("t=" << t << " mean=" << mean << " var=" << var);
        REQUIRE(std::abs(mean) < 0.03);
        REQUIRE(var == Catch::Approx(1.0).margin(0.04));
    }
}

TEST_CASE("conditioning views pass through noising untouched") {
    NoiseSchedule sched = cosine_schedule(1000);
    Rng rng(11);
    LatentGrid z0 = random_grid(rng, 6, 8, 8);
    std::vector<uint8_t> mask(6, 0);
    mask[0] = 1;
    mask[3] = 1;
    NoisyLatentGrid zt = add_noise(z0, 700, sched, rng, mask);
    for (int view : {0, 3}) {
        int row = view / 3, col = view % 3;
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x)
                for (int c = 0; c < 4; ++c) {
                    REQUIRE(zt.grid.at(row * 8 + y, col * 8 + x, c) ==
                            z0.at(row * 8 + y, col * 8 + x, c));
                    REQUIRE(zt.epsilon.at(row * 8 + y, col * 8 + x, c) == 0.f);
                }
    }
    // Noised views actually changed.
    bool changed = false;
    for (int y = 0; y < 8 && !changed; ++y)
        for (int x = 0; x < 8 && !changed; ++x)
            changed = zt.grid.at(y, 8 + x, 0) != z0.at(y, 8 + x, 0);
    REQUIRE(changed);
}

TEST_CASE("noising validates timestep and mask shape") {
    NoiseSchedule sched = cosine_schedule(100);
    Rng rng(1);
    LatentGrid z0 = make_grid(2, 4, 4, 0.f);
    std::vector<uint8_t> mask(2, 0);
    CHECK_THROWS_AS(add_noise(z0, 0, sched, rng, mask), ValueError);
    CHECK_THROWS_AS(add_noise(z0, 101, sched, rng, mask), ValueError);
    std::vector<uint8_t> bad_mask(3, 0);
    CHECK_THROWS_AS(add_noise(z0, 50, sched, rng, bad_mask), ShapeError);
}

TEST_CASE("sampled timesteps cover the full range") {
    NoiseSchedule sched = cosine_schedule(1000);
    Rng rng(77);
    int lo = 1 << 30, hi = 0;
    for (int i = 0; i < 20000; ++i) {
        int t = sample_timestep(sched, rng);
        REQUIRE(t >= 1);
        REQUIRE(t <= 1000);
        lo = std::min(lo, t);
        hi = std::max(hi, t);
    }
    CHECK(lo < 25);
    CHECK(hi > 975);
}

TEST_CASE("ddim step with the true prediction inverts the noising algebra") {
    NoiseSchedule sched = cosine_schedule(1000);
    Rng rng(123);
    LatentGrid z0 = random_grid(rng, 6, 8, 8);
    std::vector<uint8_t> mask(6, 0);
    int t = 600, t_prev = 350;
    NoisyLatentGrid zt = add_noise(z0, t, sched, rng, mask);

    NoisyLatentGrid out = ddim_step(zt, z0, t, t_prev, sched);
    REQUIRE(out.t == t_prev);
    double sab_p = sched.sqrt_ab(t_prev), snab_p = sched.sqrt_one_minus_ab(t_prev);
    for (int y = 0; y < out.grid.height(); ++y)
        for (int x = 0; x < out.grid.width(); ++x)
            for (int c = 0; c < 4; ++c) {
                // Recovered eps_hat must be the recorded realization, so the
                // output is exactly the forward noising at t_prev.
                double expect = sab_p * z0.at(y, x, c) + snab_p * zt.epsilon.at(y, x, c);
                REQUIRE(out.grid.at(y, x, c) == Catch::Approx(expect).margin(2e-5));
                REQUIRE(out.epsilon.at(y, x, c) ==
                        Catch::Approx(zt.epsilon.at(y, x, c)).margin(2e-4));
            }
}

TEST_CASE("ddim step to zero copies the prediction bit for bit") {
    NoiseSchedule sched = cosine_schedule(1000);
    Rng rng(321);
    LatentGrid z0 = random_grid(rng, 2, 6, 6);
    std::vector<uint8_t> mask(2, 0);
    NoisyLatentGrid zt = add_noise(z0, 40, sched, rng, mask);
    LatentGrid pred = random_grid(rng, 2, 6, 6);
    NoisyLatentGrid out = ddim_step(zt, pred, 40, 0, sched);
    REQUIRE(out.grid.data == pred.data);
}

TEST_CASE("ddim step validates its arguments") {
    NoiseSchedule sched = cosine_schedule(1000);
    Rng rng(5);
    LatentGrid z0 = make_grid(2, 4, 4, 0.2f);
    std::vector<uint8_t> mask(2, 0);
    NoisyLatentGrid zt = add_noise(z0, 500, sched, rng, mask);
    CHECK_THROWS_AS(ddim_step(zt, z0, 500, 500, sched), ValueError);
    CHECK_THROWS_AS(ddim_step(zt, z0, 500, 600, sched), ValueError);
    CHECK_THROWS_AS(ddim_step(zt, z0, 400, 200, sched), ValueError);  // grid is at t=500
    LatentGrid wrong = make_grid(2, 4, 5, 0.2f);
    CHECK_THROWS_AS(ddim_step(zt, wrong, 500, 300, sched), ShapeError);
}

TEST_CASE("ddim timestep ladder is uniform and complete") {
    std::vector<int> ts = ddim_timesteps(1000, 50);
    REQUIRE(ts.size() == 50);
    REQUIRE(ts.front() == 1000);
    REQUIRE(ts.back() == 20);
    for (size_t i = 1; i < ts.size(); ++i) REQUIRE(ts[i - 1] - ts[i] == 20);

    std::vector<int> one = ddim_timesteps(1000, 1);
    REQUIRE(one == std::vector<int>{1000});

    std::vector<int> full = ddim_timesteps(10, 10);
    REQUIRE(full == std::vector<int>{10, 9, 8, 7, 6, 5, 4, 3, 2, 1});
}

namespace {

// Test double: returns a fixed prediction and records every grid it sees.
class RecordingOracle final : public DenoisingStep {
  public:
    LatentGrid z0_fixed;
    GaussianCloud cloud_fixed;
    std::vector<LatentGrid> seen;
    std::vector<int> seen_t;

    void run(const NoisyLatentGrid& z_t, const ViewRig& rig, LatentGrid& z0_hat,
             GaussianCloud& cloud, std::vector<RenderOutput>& renders) override {
        seen.push_back(z_t.grid);
        seen_t.push_back(z_t.t);
        z0_hat = z0_fixed;
        cloud = cloud_fixed;
        renders = render_rig(cloud_fixed, rig);
    }
};

}  // namespace

TEST_CASE("sampler drives the denoiser K times along the ladder") {
    NoiseSchedule sched = cosine_schedule(1000);
    ViewRig rig = rig_default(6, 32, 32);
    Rng crng(9);
    RecordingOracle oracle;
    oracle.cloud_fixed = oracles::random_cloud(crng, 12);
    {
        std::vector<Latent> tiles(6, Latent(4, 4));
        Rng zr(10);
        for (auto& z : tiles)
            for (float& v : z.data) v = static_cast<float>(zr.normal() * 0.1);
        oracle.z0_fixed = assemble_grid(tiles);
    }
    Image input = render(oracle.cloud_fixed, rig.poses[0]).color;

    SampleResult res = sample(input, rig, oracle, sched, 6, 99);
    REQUIRE(oracle.seen.size() == 6);
    REQUIRE(oracle.seen_t == ddim_timesteps(1000, 6));
    REQUIRE(res.cloud.size() == oracle.cloud_fixed.size());
    REQUIRE(res.renders.size() == 6);

    // Conditioning tile of every observed grid equals the encoded input.
    Latent z_cond = encode(input);
    for (const LatentGrid& g : oracle.seen)
        for (int y = 0; y < 4; ++y)
            for (int x = 0; x < 4; ++x)
                for (int c = 0; c < 4; ++c) REQUIRE(g.at(y, x, c) == z_cond.at(y, x, c));

    // Non-conditioning tiles follow the DDIM recursion computed here from
    // scratch: eps_hat = (z_t - sab_t z0)/snab_t, next = sab_p z0 + snab_p eps_hat.
    for (size_t i = 0; i + 1 < oracle.seen.size(); ++i) {
        int t = oracle.seen_t[i], tp = oracle.seen_t[i + 1];
        double sab_t = std::sqrt(sched.alpha_bar[t]);
        double snab_t = std::sqrt(1.0 - sched.alpha_bar[t]);
        double sab_p = std::sqrt(sched.alpha_bar[tp]);
        double snab_p = std::sqrt(1.0 - sched.alpha_bar[tp]);
        const LatentGrid& cur = oracle.seen[i];
        const LatentGrid& nxt = oracle.seen[i + 1];
        for (int y = 0; y < cur.height(); ++y)
            for (int x = 4; x < cur.width(); ++x)  // skip the conditioning tile column band
                for (int c = 0; c < 4; ++c) {
                    if (y < 4 && x < 4) continue;
                    double z0v = oracle.z0_fixed.at(y, x, c);
                    double eps_hat = (cur.at(y, x, c) - sab_t * z0v) / snab_t;
                    double expect = sab_p * z0v + snab_p * eps_hat;
                    REQUIRE(nxt.at(y, x, c) == Catch::Approx(expect).margin(1e-4));
                }
    }
}

TEST_CASE("single-step sampling calls the denoiser exactly once") {
    NoiseSchedule sched = cosine_schedule(1000);
    ViewRig rig = rig_default(6, 16, 16);
    Rng crng(13);
    RecordingOracle oracle;
    oracle.cloud_fixed = oracles::random_cloud(crng, 4);
    oracle.z0_fixed = make_grid(6, 2, 2, 0.f);
    Image input = render(oracle.cloud_fixed, rig.poses[0]).color;
    SampleResult res = sample(input, rig, oracle, sched, 1, 7);
    REQUIRE(oracle.seen.size() == 1);
    REQUIRE(oracle.seen_t == std::vector<int>{1000});
    REQUIRE(res.renders.size() == 6);
}

TEST_CASE("identical seeds reproduce the sample bit for bit") {
    NoiseSchedule sched = cosine_schedule(1000);
    ViewRig rig = rig_default(6, 16, 16);
    Rng crng(17);
    RecordingOracle a, b;
    a.cloud_fixed = b.cloud_fixed = oracles::random_cloud(crng, 8);
    a.z0_fixed = b.z0_fixed = make_grid(6, 2, 2, 0.3f);
    Image input = render(a.cloud_fixed, rig.poses[0]).color;
    SampleResult ra = sample(input, rig, a, sched, 4, 12345);
    SampleResult rb = sample(input, rig, b, sched, 4, 12345);
    REQUIRE(a.seen.size() == b.seen.size());
    for (size_t i = 0; i < a.seen.size(); ++i) REQUIRE(a.seen[i].data == b.seen[i].data);
    for (size_t v = 0; v < 6; ++v)
        REQUIRE(ra.renders[v].color.data == rb.renders[v].color.data);

    RecordingOracle c;
    c.cloud_fixed = a.cloud_fixed;
    c.z0_fixed = a.z0_fixed;
    SampleResult rc = sample(input, rig, c, sched, 4, 54321);
    REQUIRE(c.seen[0].data != a.seen[0].data);  // different seed, different noise
}

TEST_CASE("sampler validates the rig and step count") {
    NoiseSchedule sched = cosine_schedule(100);
    RecordingOracle oracle;
    oracle.z0_fixed = make_grid(6, 2, 2, 0.f);
    Image input(16, 16, 3);

    ViewRig rig5 = rig_default(6, 16, 16);
    rig5.poses.pop_back();
    CHECK_THROWS_AS(sample(input, rig5, oracle, sched, 4, 1), ValueError);

    ViewRig rig = rig_default(6, 16, 16);
    CHECK_THROWS_AS(sample(input, rig, oracle, sched, 0, 1), ValueError);
    CHECK_THROWS_AS(sample(input, rig, oracle, sched, 101, 1), ValueError);

    Image wrong(8, 16, 3);
    CHECK_THROWS_AS(sample(wrong, rig, oracle, sched, 4, 1), ShapeError);
}
