#pragma once

#include <chrono>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "dsplats/autodiff.hpp"
#include "dsplats/camera.hpp"
#include "dsplats/common.hpp"
#include "dsplats/denoiser.hpp"
#include "dsplats/diffusion.hpp"
#include "dsplats/gaussians.hpp"
#include "dsplats/latent_codec.hpp"
#include "dsplats/splat_renderer.hpp"

namespace dsplats {

struct LossWeights {
    double lambda1 = 1.0;  // render pixel term
    double lambda2 = 0.0;  // perceptual term, reserved; must stay 0
    double lambda3 = 1.0;  // latent reconstruction term
};

inline void validate_weights(const LossWeights& w) {
    if (w.lambda1 < 0 || w.lambda2 < 0 || w.lambda3 < 0)
        throw ValueError("loss weights must be nonnegative");
    if (w.lambda2 != 0.0)
        throw ValueError("perceptual loss weight is reserved and must be 0");
}

enum class PixelLoss { L1, L2 };

struct TrainConfig {
    int views = 6;
    int width = 128;
    int height = 128;
    int batch_size = 1;
    double learning_rate = 2e-4;
    int total_steps = 2000;
    uint64_t seed = 0;
    double jitter_prob = 0.5;
    double distortion_prob = 0.5;
    double distortion_strength = 0.02;
    PixelLoss pixel_loss = PixelLoss::L1;
    int unseen_per_step = 2;
    LossWeights weights;
    int checkpoint_every = 500;
};

inline void validate_train_config(const TrainConfig& c) {
    if (c.jitter_prob < 0 || c.jitter_prob > 1 || c.distortion_prob < 0 || c.distortion_prob > 1)
        throw ValueError("augmentation probabilities must lie in [0,1]");
    if (c.unseen_per_step < 0) throw ValueError("unseen view count must be >= 0");
    if (c.batch_size < 1 || c.total_steps < 0 || c.learning_rate <= 0)
        throw ValueError("bad train config");
    validate_weights(c.weights);
}

// ---------------------------------------------------------------------------
// Losses. Plain scalar forms for evaluation and tests, graph forms for the
// training tape.
// ---------------------------------------------------------------------------

inline double render_loss(const std::vector<RenderOutput>& renders,
                          const std::vector<Image>& targets, const LossWeights& w,
                          PixelLoss kind = PixelLoss::L1) {
    validate_weights(w);
    if (renders.size() != targets.size())
        throw Error("render_loss: " + std::to_string(renders.size()) + " renders vs " +
                    std::to_string(targets.size()) + " targets");
    if (renders.empty()) throw Error("render_loss: empty lists");
    double acc = 0;
    size_t n = 0;
    for (size_t i = 0; i < renders.size(); ++i) {
        const Image& r = renders[i].color;
        const Image& t = targets[i];
        if (r.width != t.width || r.height != t.height || t.channels != 3)
            throw_shape_mismatch("render_loss: view " + std::to_string(i), {r.height, r.width},
                                 {t.height, t.width});
        for (size_t k = 0; k < r.data.size(); ++k) {
            double d = static_cast<double>(r.data[k]) - t.data[k];
            acc += kind == PixelLoss::L1 ? std::abs(d) : d * d;
        }
        n += r.data.size();
    }
    return w.lambda1 * acc / static_cast<double>(n);
}

inline double diffusion_loss(const LatentGrid& z0_hat, const LatentGrid& z0,
                             const std::vector<uint8_t>& conditioning_mask, const LossWeights& w) {
    validate_weights(w);
    if (z0_hat.views != z0.views || z0_hat.tile_height != z0.tile_height ||
        z0_hat.tile_width != z0.tile_width)
        throw_shape_mismatch("diffusion_loss", {z0_hat.views, z0_hat.tile_height, z0_hat.tile_width},
                             {z0.views, z0.tile_height, z0.tile_width});
    if (static_cast<int>(conditioning_mask.size()) != z0.views)
        throw ShapeError("diffusion_loss: mask size vs views");
    double acc = 0;
    size_t n = 0;
    int cols = z0.views / 2;
    for (int view = 0; view < z0.views; ++view) {
        if (conditioning_mask[view]) continue;
        int row = view / cols, col = view % cols;
        for (int y = 0; y < z0.tile_height; ++y)
            for (int x = 0; x < z0.tile_width; ++x)
                for (int c = 0; c < kLatentChannels; ++c) {
                    int my = row * z0.tile_height + y, mx = col * z0.tile_width + x;
                    double d = static_cast<double>(z0_hat.at(my, mx, c)) - z0.at(my, mx, c);
                    acc += d * d;
                    ++n;
                }
    }
    if (n == 0) throw ValueError("diffusion_loss: every view is a conditioning view");
    return w.lambda3 * acc / static_cast<double>(n);
}

namespace detail {

inline Tensor render_loss_graph(const Tensor& renders, const std::vector<Image>& targets,
                                const LossWeights& w, PixelLoss kind) {
    const int P = renders.shape[0], H = renders.shape[1], W = renders.shape[2];
    if (static_cast<int>(targets.size()) != P)
        throw Error("render_loss: renders vs targets misaligned");
    std::vector<float> tv(static_cast<size_t>(P) * H * W * 3);
    for (int p = 0; p < P; ++p) {
        if (targets[p].width != W || targets[p].height != H || targets[p].channels != 3)
            throw_shape_mismatch("render_loss: view " + std::to_string(p),
                                 {targets[p].height, targets[p].width}, {H, W});
        std::copy(targets[p].data.begin(), targets[p].data.end(),
                  tv.begin() + static_cast<size_t>(p) * H * W * 3);
    }
    Tensor diff = sub(renders, make_constant(renders.shape, std::move(tv)));
    Tensor per = kind == PixelLoss::L1 ? abs(diff) : mul(diff, diff);
    return scale(mean(per), static_cast<float>(w.lambda1));
}

inline Tensor diffusion_loss_graph(const Tensor& z0_hat, const LatentGrid& z0,
                                   const std::vector<uint8_t>& conditioning_mask,
                                   const LossWeights& w) {
    if (z0_hat.shape != std::vector<int>{z0.height(), z0.width(), kLatentChannels})
        throw_shape_mismatch("diffusion_loss", z0_hat.shape,
                             {z0.height(), z0.width(), kLatentChannels});
    std::vector<float> maskv(z0.data.size(), 1.f);
    size_t included = z0.data.size();
    int cols = z0.views / 2;
    for (int view = 0; view < z0.views; ++view) {
        if (!conditioning_mask[view]) continue;
        int row = view / cols, col = view % cols;
        for (int y = 0; y < z0.tile_height; ++y)
            for (int x = 0; x < z0.tile_width; ++x)
                for (int c = 0; c < kLatentChannels; ++c) {
                    maskv[((static_cast<size_t>(row * z0.tile_height + y) * z0.width()) +
                           col * z0.tile_width + x) *
                              kLatentChannels +
                          c] = 0.f;
                    --included;
                }
    }
    if (included == 0) throw ValueError("diffusion_loss: every view is a conditioning view");
    Tensor diff = sub(z0_hat, make_constant(z0_hat.shape, z0.data));
    Tensor masked = mul(mul(diff, diff), make_constant(z0_hat.shape, std::move(maskv)));
    return scale(sum(masked), static_cast<float>(w.lambda3 / static_cast<double>(included)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Augmentations.
// ---------------------------------------------------------------------------

// Smooth random warp from an 8x8 control grid of displacements, bilinear
// resampling, displacements bounded by strength * width. The first view is
// the conditioning view and is returned untouched.
inline std::vector<Image> grid_distortion(const std::vector<Image>& views, double strength,
                                          Rng& rng) {
    if (strength < 0) throw ValueError("grid_distortion: negative strength");
    constexpr int kGrid = 8;
    std::vector<Image> out;
    out.reserve(views.size());
    for (size_t i = 0; i < views.size(); ++i) {
        if (i == 0) {
            out.push_back(views[0]);
            continue;
        }
        const Image& src = views[i];
        double max_disp = strength * src.width;
        double dx[kGrid][kGrid], dy[kGrid][kGrid];
        for (int gy = 0; gy < kGrid; ++gy)
            for (int gx = 0; gx < kGrid; ++gx) {
                dx[gy][gx] = max_disp * rng.uniform(-1.0, 1.0);
                dy[gy][gx] = max_disp * rng.uniform(-1.0, 1.0);
            }
        Image dst(src.width, src.height, src.channels);
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x) {
                double gu = src.width > 1
                                ? static_cast<double>(x) / (src.width - 1) * (kGrid - 1)
                                : 0.0;
                double gv = src.height > 1
                                ? static_cast<double>(y) / (src.height - 1) * (kGrid - 1)
                                : 0.0;
                int g0x = std::min(static_cast<int>(gu), kGrid - 2);
                int g0y = std::min(static_cast<int>(gv), kGrid - 2);
                double fu = gu - g0x, fv = gv - g0y;
                double ddx = (1 - fv) * ((1 - fu) * dx[g0y][g0x] + fu * dx[g0y][g0x + 1]) +
                             fv * ((1 - fu) * dx[g0y + 1][g0x] + fu * dx[g0y + 1][g0x + 1]);
                double ddy = (1 - fv) * ((1 - fu) * dy[g0y][g0x] + fu * dy[g0y][g0x + 1]) +
                             fv * ((1 - fu) * dy[g0y + 1][g0x] + fu * dy[g0y + 1][g0x + 1]);
                double sx = std::clamp(x + ddx, 0.0, src.width - 1.0);
                double sy = std::clamp(y + ddy, 0.0, src.height - 1.0);
                int x0 = std::min(static_cast<int>(sx), src.width - 2 >= 0 ? src.width - 2 : 0);
                int y0 = std::min(static_cast<int>(sy), src.height - 2 >= 0 ? src.height - 2 : 0);
                double fx = sx - x0, fy = sy - y0;
                int x1 = std::min(x0 + 1, src.width - 1), y1 = std::min(y0 + 1, src.height - 1);
                for (int c = 0; c < src.channels; ++c) {
                    double v = (1 - fy) * ((1 - fx) * src.at(y0, x0, c) + fx * src.at(y0, x1, c)) +
                               fy * ((1 - fx) * src.at(y1, x0, c) + fx * src.at(y1, x1, c));
                    dst.at(y, x, c) = static_cast<float>(v);
                }
            }
        out.push_back(std::move(dst));
    }
    return out;
}

// Perturbs each orbit pose: azimuth/elevation jitter (1.5 deg std), radius
// jitter (0.01 std), and a small in-place rotation (1 deg std), all scaled by
// sigma. Ray maps are derived from poses downstream, so they stay consistent
// automatically.
inline ViewRig orbital_jitter(const ViewRig& rig, Rng& rng, double sigma = 1.0) {
    if (sigma < 0) throw ValueError("orbital_jitter: negative sigma");
    ViewRig out;
    out.radius = rig.radius;
    for (size_t i = 0; i < rig.poses.size(); ++i) {
        const CameraPose& p = rig.poses[i];
        double az = rig.azimuths_deg[i] + sigma * 1.5 * rng.normal();
        double el = rig.elevations_deg[i] + sigma * 1.5 * rng.normal();
        double r = norm(p.origin) + sigma * 0.01 * rng.normal();
        Vec3d axis{rng.normal(), rng.normal(), rng.normal()};
        double angle = deg_to_rad(sigma * 1.0 * rng.normal());
        CameraPose q = look_at(spherical_to_cartesian(az, el, r), {0, 0, 0}, p.fov_deg, p.width,
                               p.height);
        double an = norm(axis);
        if (an > 1e-12 && angle != 0.0) {
            Mat3d d = quat_to_matrix(quat_from_axis_angle(axis / an, angle));
            q.rotation = q.rotation * d;
        }
        out.poses.push_back(q);
        out.azimuths_deg.push_back(az);
        out.elevations_deg.push_back(el);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer state and the training step.
// ---------------------------------------------------------------------------

struct TrainObject {
    std::string id;
    GaussianCloud cloud;
};

struct TrainMetrics {
    int64_t step = 0;
    double l_render = 0;
    double l_diff = 0;
    double grad_norm = 0;
    double wall_ms = 0;
};

inline std::string format_metrics(const TrainMetrics& m) {
    std::ostringstream os;
    os.precision(10);
    os << "step=" << m.step << " l_render=" << m.l_render << " l_diff=" << m.l_diff
       << " grad_norm=" << m.grad_norm << " wall_ms=" << m.wall_ms;
    return os.str();
}

struct TrainState {
    TrainConfig config;
    DenoiserParams params;
    std::vector<std::vector<float>> adam_m, adam_v;
    int64_t step = 0;
    Rng rng;
    NoiseSchedule schedule;
};

inline TrainState init_train_state(const TrainConfig& tc, const DenoiserConfig& dc) {
    validate_train_config(tc);
    TrainState st;
    st.config = tc;
    st.params = init_denoiser(dc, tc.seed);
    st.adam_m.resize(st.params.tensors.size());
    st.adam_v.resize(st.params.tensors.size());
    for (size_t i = 0; i < st.params.tensors.size(); ++i) {
        st.adam_m[i].assign(st.params.tensors[i].values.size(), 0.f);
        st.adam_v[i].assign(st.params.tensors[i].values.size(), 0.f);
    }
    st.rng = Rng(derive_seed(tc.seed, 0x7261));
    st.schedule = cosine_schedule();
    return st;
}

inline Checkpoint make_checkpoint(const TrainState& st) {
    Checkpoint ck;
    ck.config = st.params.config;
    ck.tensors = st.params.tensors;
    for (size_t i = 0; i < st.params.tensors.size(); ++i) {
        const NamedTensor& t = st.params.tensors[i];
        ck.tensors.push_back({"adam.m." + t.name, t.shape, st.adam_m[i]});
        ck.tensors.push_back({"adam.v." + t.name, t.shape, st.adam_v[i]});
    }
    ck.step = st.step;
    ck.rng_state = st.rng.serialize_state();
    return ck;
}

inline TrainState restore_train_state(const Checkpoint& ck, const TrainConfig& tc) {
    TrainState st = init_train_state(tc, ck.config);
    for (size_t i = 0; i < st.params.tensors.size(); ++i) {
        NamedTensor& t = st.params.tensors[i];
        const NamedTensor* src = nullptr;
        for (const auto& c : ck.tensors)
            if (c.name == t.name) {
                src = &c;
                break;
            }
        if (!src || src->shape != t.shape)
            throw IoError("restore: checkpoint missing parameter " + t.name);
        t.values = src->values;
        // Optimizer state is optional: a missing moment tensor means fresh moments.
        for (const auto& c : ck.tensors) {
            if (c.name == "adam.m." + t.name) st.adam_m[i] = c.values;
            if (c.name == "adam.v." + t.name) st.adam_v[i] = c.values;
        }
    }
    st.step = ck.step;
    if (!ck.rng_state.empty()) st.rng.restore_state(ck.rng_state);
    return st;
}

// One optimization step over a batch of objects. Per object: maybe jitter the
// rig, render clean targets (plus u fresh unseen views), maybe grid-distort
// the encoder inputs, noise the latents with the conditioning view masked,
// run the denoising step, and take gradients of render + latent losses.
// Gradients are averaged over the batch before a single Adam update.
inline TrainMetrics train_step(TrainState& st, const std::vector<TrainObject>& batch) {
    auto t_start = std::chrono::steady_clock::now();
    validate_train_config(st.config);
    if (batch.empty()) throw ValueError("train_step: empty batch");
    const TrainConfig& cfg = st.config;

    std::vector<std::vector<float>> gacc(st.params.tensors.size());
    for (size_t i = 0; i < gacc.size(); ++i)
        gacc[i].assign(st.params.tensors[i].values.size(), 0.f);

    double l_render_sum = 0, l_diff_sum = 0;
    for (const TrainObject& obj : batch) {
        bool jitter = st.rng.bernoulli(cfg.jitter_prob);
        bool distort = st.rng.bernoulli(cfg.distortion_prob);

        ViewRig rig = rig_default(cfg.views, cfg.width, cfg.height);
        if (jitter) rig = orbital_jitter(rig, st.rng);

        std::vector<Image> clean;
        clean.reserve(rig.poses.size());
        for (const auto& pose : rig.poses) clean.push_back(render(obj.cloud, pose).color);

        std::vector<CameraPose> unseen;
        std::vector<Image> targets = clean;
        for (int u = 0; u < cfg.unseen_per_step; ++u) {
            CameraPose p =
                sample_sphere_pose(st.rng, kRigRadius, cfg.width, cfg.height).to_camera_pose();
            targets.push_back(render(obj.cloud, p).color);
            unseen.push_back(p);
        }

        const std::vector<Image>& enc_views =
            distort ? grid_distortion(clean, cfg.distortion_strength, st.rng) : clean;
        std::vector<Latent> latents;
        latents.reserve(enc_views.size());
        for (const auto& img : enc_views) latents.push_back(encode(img));
        LatentGrid z0 = assemble_grid(latents);

        int t = sample_timestep(st.schedule, st.rng);
        std::vector<uint8_t> mask(rig.poses.size(), 0);
        mask[0] = 1;
        NoisyLatentGrid zt = add_noise(z0, t, st.schedule, st.rng, mask);

        Tape tape;
        SGraphResult g;
        Tensor lr, ld, total;
        double lr_val, ld_val;
        try {
            g = denoise_step_graph(tape, st.params, zt, rig, unseen, {1.f, 1.f, 1.f}, true);
            lr = detail::render_loss_graph(g.renders, targets, cfg.weights, cfg.pixel_loss);
            ld = detail::diffusion_loss_graph(g.z0_hat, z0, mask, cfg.weights);
            total = add(lr, ld);
            lr_val = (*lr.values)[0];
            ld_val = (*ld.values)[0];
            if (!std::isfinite(lr_val) || !std::isfinite(ld_val))
                throw ValueError("non-finite loss");
            tape.backward(total);
        } catch (const ValueError& e) {
            throw ValueError(std::string(e.what()) + " [step=" + std::to_string(st.step) +
                             " t=" + std::to_string(t) + " seed=" + std::to_string(cfg.seed) +
                             " object=" + obj.id + "]");
        }
        l_render_sum += lr_val;
        l_diff_sum += ld_val;
        for (size_t i = 0; i < g.leaves.size(); ++i) {
            const std::vector<float>& gi = tape.grad(g.leaves[i]);
            for (size_t k = 0; k < gi.size(); ++k) gacc[i][k] += gi[k];
        }
    }

    const float inv_b = 1.f / static_cast<float>(batch.size());
    double gnorm2 = 0;
    for (auto& g : gacc)
        for (auto& v : g) {
            v *= inv_b;
            gnorm2 += static_cast<double>(v) * v;
        }

    st.step += 1;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (size_t i = 0; i < gacc.size(); ++i) {
        std::vector<float>& p = st.params.tensors[i].values;
        std::vector<float>& m = st.adam_m[i];
        std::vector<float>& v = st.adam_v[i];
        for (size_t k = 0; k < p.size(); ++k) {
            double gk = gacc[i][k];
            double mk = b1 * m[k] + (1 - b1) * gk;
            double vk = b2 * v[k] + (1 - b2) * gk * gk;
            m[k] = static_cast<float>(mk);
            v[k] = static_cast<float>(vk);
            p[k] = static_cast<float>(p[k] - cfg.learning_rate * (mk / bc1) /
                                                (std::sqrt(vk / bc2) + eps));
        }
    }

    TrainMetrics mt;
    mt.step = st.step;
    mt.l_render = l_render_sum / batch.size();
    mt.l_diff = l_diff_sum / batch.size();
    mt.grad_norm = std::sqrt(gnorm2);
    mt.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                           t_start)
                     .count();
    return mt;
}

}  // namespace dsplats
