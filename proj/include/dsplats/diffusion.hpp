#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dsplats/camera.hpp"
#include "dsplats/common.hpp"
#include "dsplats/gaussians.hpp"
#include "dsplats/image.hpp"
#include "dsplats/latent_codec.hpp"
#include "dsplats/splat_renderer.hpp"

namespace dsplats {

// Index 0 means clean; alpha_bar[t] is the cumulative signal fraction at
// step t of the forward noising z_t = sqrt(ab_t) z_0 + sqrt(1-ab_t) eps.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha_bar;  // length T+1, alpha_bar[0] == 1, strictly decreasing

    double sqrt_ab(int t) const { return std::sqrt(alpha_bar[t]); }
    double sqrt_one_minus_ab(int t) const { return std::sqrt(1.0 - alpha_bar[t]); }
};

// Cosine schedule: ab_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1+s)) * pi/2),
// s = 0.008, with per-step beta capped at 0.999 near the tail.
inline NoiseSchedule cosine_schedule(int T = 1000) {
    if (T < 1) throw ValueError("cosine_schedule: T must be >= 1, got " + std::to_string(T));
    constexpr double s = 0.008;
    auto f = [&](double t) {
        double a = std::cos((t / T + s) / (1.0 + s) * kPi / 2.0);
        return a * a;
    };
    NoiseSchedule sched;
    sched.T = T;
    sched.alpha_bar.resize(T + 1);
    sched.alpha_bar[0] = 1.0;
    double f0 = f(0.0);
    for (int t = 1; t <= T; ++t) {
        double ab = f(static_cast<double>(t)) / f0;
        double floor_ab = sched.alpha_bar[t - 1] * (1.0 - 0.999);  // beta <= 0.999
        sched.alpha_bar[t] = std::max(ab, floor_ab);
    }
    return sched;
}

struct NoisyLatentGrid {
    LatentGrid grid;
    int t = 0;
    LatentGrid epsilon;                      // noise realization, zero on clean views
    std::vector<uint8_t> conditioning_mask;  // per view, nonzero = kept clean
};

namespace detail {

inline void copy_tile(const LatentGrid& src, LatentGrid& dst, int view) {
    int cols = src.views / 2;
    int row = view / cols, col = view % cols;
    for (int y = 0; y < src.tile_height; ++y)
        for (int x = 0; x < src.tile_width; ++x)
            for (int c = 0; c < kLatentChannels; ++c)
                dst.at(row * src.tile_height + y, col * src.tile_width + x, c) =
                    src.at(row * src.tile_height + y, col * src.tile_width + x, c);
}

inline void set_tile(LatentGrid& dst, int view, const Latent& z) {
    int cols = dst.views / 2;
    int row = view / cols, col = view % cols;
    for (int y = 0; y < dst.tile_height; ++y)
        for (int x = 0; x < dst.tile_width; ++x)
            for (int c = 0; c < kLatentChannels; ++c)
                dst.at(row * dst.tile_height + y, col * dst.tile_width + x, c) = z.at(y, x, c);
}

inline Latent get_tile(const LatentGrid& src, int view) {
    int cols = src.views / 2;
    int row = view / cols, col = view % cols;
    Latent z(src.tile_height, src.tile_width);
    for (int y = 0; y < src.tile_height; ++y)
        for (int x = 0; x < src.tile_width; ++x)
            for (int c = 0; c < kLatentChannels; ++c)
                z.at(y, x, c) = src.at(row * src.tile_height + y, col * src.tile_width + x, c);
    return z;
}

}  // namespace detail

// Forward noising. Views flagged in the conditioning mask are copied clean;
// noise is drawn per element in view order (row-major within each tile) for
// the noised views only.
inline NoisyLatentGrid add_noise(const LatentGrid& grid, int t, const NoiseSchedule& sched,
                                 Rng& rng, const std::vector<uint8_t>& conditioning_mask) {
    if (t < 1 || t > sched.T)
        throw ValueError("add_noise: t=" + std::to_string(t) + " outside [1," +
                         std::to_string(sched.T) + "]");
    if (conditioning_mask.size() != static_cast<size_t>(grid.views))
        throw ShapeError("add_noise: mask length " + std::to_string(conditioning_mask.size()) +
                         " != view count " + std::to_string(grid.views));
    NoisyLatentGrid out;
    out.grid = grid;
    out.t = t;
    out.epsilon = grid;
    std::fill(out.epsilon.data.begin(), out.epsilon.data.end(), 0.f);
    out.conditioning_mask = conditioning_mask;
    double sab = sched.sqrt_ab(t), snab = sched.sqrt_one_minus_ab(t);
    int cols = grid.views / 2;
    for (int view = 0; view < grid.views; ++view) {
        if (conditioning_mask[view]) continue;
        int row = view / cols, col = view % cols;
        for (int y = 0; y < grid.tile_height; ++y)
            for (int x = 0; x < grid.tile_width; ++x)
                for (int c = 0; c < kLatentChannels; ++c) {
                    int gy = row * grid.tile_height + y, gx = col * grid.tile_width + x;
                    double eps = rng.normal();
                    out.epsilon.at(gy, gx, c) = static_cast<float>(eps);
                    out.grid.at(gy, gx, c) =
                        static_cast<float>(sab * grid.at(gy, gx, c) + snab * eps);
                }
    }
    return out;
}

inline int sample_timestep(const NoiseSchedule& sched, Rng& rng) {
    return static_cast<int>(rng.uniform_int(1, sched.T));
}

// Deterministic (eta = 0) DDIM update from t to t_prev using an x0-prediction.
inline NoisyLatentGrid ddim_step(const NoisyLatentGrid& z_t, const LatentGrid& z0_hat, int t,
                                 int t_prev, const NoiseSchedule& sched) {
    if (t_prev >= t)
        throw ValueError("ddim_step: t_prev=" + std::to_string(t_prev) +
                         " must be < t=" + std::to_string(t));
    if (t != z_t.t)
        throw ValueError("ddim_step: t=" + std::to_string(t) + " but grid is at t=" +
                         std::to_string(z_t.t));
    if (t < 1 || t > sched.T || t_prev < 0) throw ValueError("ddim_step: timestep out of range");
    if (z0_hat.views != z_t.grid.views || z0_hat.tile_height != z_t.grid.tile_height ||
        z0_hat.tile_width != z_t.grid.tile_width)
        throw ShapeError("ddim_step: z0_hat dims do not match grid");

    NoisyLatentGrid out;
    out.grid = z_t.grid;
    out.t = t_prev;
    out.epsilon = z_t.grid;
    std::fill(out.epsilon.data.begin(), out.epsilon.data.end(), 0.f);
    out.conditioning_mask = z_t.conditioning_mask;

    double sab_t = sched.sqrt_ab(t), snab_t = sched.sqrt_one_minus_ab(t);
    double sab_p = sched.sqrt_ab(t_prev), snab_p = sched.sqrt_one_minus_ab(t_prev);
    int cols = z_t.grid.views / 2;
    for (int view = 0; view < z_t.grid.views; ++view) {
        if (!z_t.conditioning_mask.empty() && z_t.conditioning_mask[view]) continue;
        int row = view / cols, col = view % cols;
        for (int y = 0; y < z_t.grid.tile_height; ++y)
            for (int x = 0; x < z_t.grid.tile_width; ++x)
                for (int c = 0; c < kLatentChannels; ++c) {
                    int gy = row * z_t.grid.tile_height + y, gx = col * z_t.grid.tile_width + x;
                    double zh = z0_hat.at(gy, gx, c);
                    if (t_prev == 0) {
                        out.grid.at(gy, gx, c) = static_cast<float>(zh);
                        continue;
                    }
                    double eps_hat = (z_t.grid.at(gy, gx, c) - sab_t * zh) / snab_t;
                    out.epsilon.at(gy, gx, c) = static_cast<float>(eps_hat);
                    out.grid.at(gy, gx, c) = static_cast<float>(sab_p * zh + snab_p * eps_hat);
                }
    }
    return out;
}

// One full application of the 3D-aware denoising step: noisy grid in, clean
// prediction plus the Gaussian scene and its rig renders out. Implemented by
// the denoiser module; test doubles stand in for it here.
class DenoisingStep {
  public:
    virtual ~DenoisingStep() = default;
    virtual void run(const NoisyLatentGrid& z_t, const ViewRig& rig, LatentGrid& z0_hat,
                     GaussianCloud& cloud, std::vector<RenderOutput>& renders) = 0;
};

struct SampleResult {
    GaussianCloud cloud;
    std::vector<RenderOutput> renders;
};

// Uniform-stride descending DDIM timestep sequence over [0, T]: K entries,
// starting at T and ending at round(T/K); the implicit final target is 0.
inline std::vector<int> ddim_timesteps(int T, int K) {
    std::vector<int> ts(K);
    for (int i = 0; i < K; ++i)
        ts[i] = static_cast<int>(std::lround(static_cast<double>(T) * (K - i) / K));
    return ts;
}

// Single-image inference: view 0 of the rig carries the clean conditioning
// latent, all other views start as pure noise at t=T and are denoised K times
// through the 3D representation.
inline SampleResult sample(const Image& input_image, const ViewRig& rig, DenoisingStep& denoiser,
                           const NoiseSchedule& sched, int K, uint64_t seed) {
    int v = static_cast<int>(rig.poses.size());
    if (v < 2 || v % 2 != 0)
        throw ValueError("sample: rig view count must be even and >= 2, got " + std::to_string(v));
    if (K < 1 || K > sched.T)
        throw ValueError("sample: K=" + std::to_string(K) + " outside [1," +
                         std::to_string(sched.T) + "]");
    if (input_image.width != rig.poses[0].width || input_image.height != rig.poses[0].height)
        throw_shape_mismatch("sample: input image vs rig view",
                             {input_image.height, input_image.width},
                             {rig.poses[0].height, rig.poses[0].width});

    Latent z_cond = encode(input_image);
    Rng rng(seed);

    NoisyLatentGrid zt;
    zt.conditioning_mask.assign(v, 0);
    zt.conditioning_mask[0] = 1;
    {
        std::vector<Latent> init(v, Latent(z_cond.height, z_cond.width));
        init[0] = z_cond;
        zt.grid = assemble_grid(init);
        zt.epsilon = zt.grid;
        std::fill(zt.epsilon.data.begin(), zt.epsilon.data.end(), 0.f);
        int cols = v / 2;
        for (int view = 1; view < v; ++view) {
            int row = view / cols, col = view % cols;
            for (int y = 0; y < zt.grid.tile_height; ++y)
                for (int x = 0; x < zt.grid.tile_width; ++x)
                    for (int c = 0; c < kLatentChannels; ++c) {
                        float eps = static_cast<float>(rng.normal());
                        zt.grid.at(row * zt.grid.tile_height + y, col * zt.grid.tile_width + x,
                                   c) = eps;
                        zt.epsilon.at(row * zt.grid.tile_height + y, col * zt.grid.tile_width + x,
                                      c) = eps;
                    }
        }
    }

    std::vector<int> ts = ddim_timesteps(sched.T, K);
    SampleResult result;
    for (int i = 0; i < K; ++i) {
        zt.t = ts[i];
        LatentGrid z0_hat;
        GaussianCloud cloud;
        std::vector<RenderOutput> renders;
        denoiser.run(zt, rig, z0_hat, cloud, renders);
        if (z0_hat.views != zt.grid.views || z0_hat.tile_height != zt.grid.tile_height ||
            z0_hat.tile_width != zt.grid.tile_width)
            throw Error("sample: denoiser returned a mismatched latent grid");
        detail::set_tile(z0_hat, 0, z_cond);
        if (i + 1 == K) {
            result.cloud = std::move(cloud);
            result.renders = std::move(renders);
            break;
        }
        int t_prev = (i + 1 < K) ? ts[i + 1] : 0;
        zt = ddim_step(zt, z0_hat, ts[i], t_prev, sched);
        detail::set_tile(zt.grid, 0, z_cond);
    }
    return result;
}

}  // namespace dsplats
