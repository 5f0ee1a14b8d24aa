#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dsplats/autodiff.hpp"
#include "dsplats/camera.hpp"
#include "dsplats/common.hpp"
#include "dsplats/diffusion.hpp"
#include "dsplats/gaussians.hpp"
#include "dsplats/latent_codec.hpp"
#include "dsplats/splat_renderer.hpp"

namespace dsplats {

// Compact 3-scale U-Net with skip connections, group norm, SiLU, and
// sinusoidal time conditioning added to every residual block. The input is
// the 2 x (v/2) latent mosaic concatenated channel-wise with a matching
// ray-map mosaic; the head upsamples 4x and emits 14 feature channels per
// pixel, one Gaussian per pixel.

struct DenoiserConfig {
    int base_channels = 32;
    std::vector<int> channel_multipliers{1, 2, 4};
    int blocks_per_scale = 2;
    int latent_channels = kLatentChannels;  // 4
    int raymap_channels = 6;
    int time_embed_dim = 128;
    int out_channels = kGaussianChannels;  // 14
    int head_upscale = 4;                  // latent res -> feature res
    int norm_groups = 8;
};

inline void validate_config(const DenoiserConfig& c) {
    if (c.out_channels != kGaussianChannels)
        throw ValueError("config: out_channels must be 14");
    if (c.channel_multipliers.empty())
        throw ValueError("config: channel_multipliers must be nonempty");
    for (size_t i = 1; i < c.channel_multipliers.size(); ++i)
        if (c.channel_multipliers[i] <= c.channel_multipliers[i - 1])
            throw ValueError("config: channel_multipliers must be increasing");
    if (c.base_channels < 1 || c.blocks_per_scale < 1 || c.time_embed_dim < 2)
        throw ValueError("config: non-positive size field");
    for (int m : c.channel_multipliers)
        if ((c.base_channels * m) % c.norm_groups != 0)
            throw ValueError("config: channel count " + std::to_string(c.base_channels * m) +
                             " not divisible by norm groups");
    if (c.head_upscale != 4) throw ValueError("config: head_upscale must be 4");
}

struct NamedTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
};

struct DenoiserParams {
    DenoiserConfig config;
    std::vector<NamedTensor> tensors;

    size_t total_values() const {
        size_t n = 0;
        for (const auto& t : tensors) n += t.values.size();
        return n;
    }
    const NamedTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
};

namespace detail {

// Walks the architecture in a fixed order, calling back once per parameter
// tensor. Initialization and graph construction share this walk so the
// parameter order cannot drift between them.
template <class Fn>
void walk_params(const DenoiserConfig& c, Fn&& emit) {
    const int D = c.time_embed_dim;
    const int S = static_cast<int>(c.channel_multipliers.size());
    auto ch = [&](int s) { return c.base_channels * c.channel_multipliers[s]; };

    emit("time.fc1.w", std::vector<int>{D, D}, "linear");
    emit("time.fc1.b", std::vector<int>{D}, "zero");
    emit("time.fc2.w", std::vector<int>{D, D}, "linear");
    emit("time.fc2.b", std::vector<int>{D}, "zero");

    int cin0 = c.latent_channels + c.raymap_channels;
    emit("stem.w", std::vector<int>{3, 3, cin0, ch(0)}, "conv");
    emit("stem.b", std::vector<int>{ch(0)}, "zero");

    auto resblock = [&](const std::string& prefix, int cin, int cout) {
        emit(prefix + ".gn1.g", std::vector<int>{cin}, "one");
        emit(prefix + ".gn1.b", std::vector<int>{cin}, "zero");
        emit(prefix + ".conv1.w", std::vector<int>{3, 3, cin, cout}, "conv");
        emit(prefix + ".conv1.b", std::vector<int>{cout}, "zero");
        emit(prefix + ".temb.w", std::vector<int>{D, cout}, "zero");
        emit(prefix + ".temb.b", std::vector<int>{cout}, "zero");
        emit(prefix + ".gn2.g", std::vector<int>{cout}, "one");
        emit(prefix + ".gn2.b", std::vector<int>{cout}, "zero");
        emit(prefix + ".conv2.w", std::vector<int>{3, 3, cout, cout}, "zero");
        emit(prefix + ".conv2.b", std::vector<int>{cout}, "zero");
        if (cin != cout) {
            emit(prefix + ".skip.w", std::vector<int>{1, 1, cin, cout}, "conv");
            emit(prefix + ".skip.b", std::vector<int>{cout}, "zero");
        }
    };

    for (int s = 0; s < S; ++s) {
        for (int b = 0; b < c.blocks_per_scale; ++b)
            resblock("enc" + std::to_string(s) + ".rb" + std::to_string(b), ch(s), ch(s));
        if (s + 1 < S) {
            emit("down" + std::to_string(s) + ".w", std::vector<int>{3, 3, ch(s), ch(s + 1)},
                 "conv");
            emit("down" + std::to_string(s) + ".b", std::vector<int>{ch(s + 1)}, "zero");
        }
    }
    for (int s = S - 2; s >= 0; --s) {
        emit("up" + std::to_string(s) + ".w", std::vector<int>{3, 3, ch(s + 1), ch(s)}, "conv");
        emit("up" + std::to_string(s) + ".b", std::vector<int>{ch(s)}, "zero");
        for (int b = 0; b < c.blocks_per_scale; ++b)
            resblock("dec" + std::to_string(s) + ".rb" + std::to_string(b),
                     b == 0 ? 2 * ch(s) : ch(s), ch(s));
    }

    emit("head.gn.g", std::vector<int>{ch(0)}, "one");
    emit("head.gn.b", std::vector<int>{ch(0)}, "zero");
    emit("head.conv1.w", std::vector<int>{3, 3, ch(0), ch(0)}, "conv");
    emit("head.conv1.b", std::vector<int>{ch(0)}, "zero");
    emit("head.conv2.w", std::vector<int>{3, 3, ch(0), ch(0)}, "conv");
    emit("head.conv2.b", std::vector<int>{ch(0)}, "zero");
    emit("head.out.w", std::vector<int>{3, 3, ch(0), c.out_channels}, "zero");
    emit("head.out.b", std::vector<int>{c.out_channels}, "zero");
}

}  // namespace detail

// He-style normal init for convs and linears; residual-block second convs,
// time projections, and the output head start at zero so the untrained net
// emits all-zero features.
inline DenoiserParams init_denoiser(const DenoiserConfig& config, uint64_t seed) {
    validate_config(config);
    DenoiserParams out;
    out.config = config;
    Rng rng(derive_seed(seed, 0x9e1d));
    detail::walk_params(config, [&](const std::string& name, const std::vector<int>& shape,
                                    const std::string& kind) {
        NamedTensor t;
        t.name = name;
        t.shape = shape;
        t.values.assign(shape_product(shape), 0.f);
        if (kind == "conv") {
            size_t fan_in = 1;
            for (size_t i = 0; i + 1 < shape.size(); ++i) fan_in *= shape[i];
            float std = std::sqrt(2.f / static_cast<float>(fan_in));
            for (auto& v : t.values) v = static_cast<float>(rng.normal()) * std;
        } else if (kind == "linear") {
            float std = std::sqrt(2.f / static_cast<float>(shape[0]));
            for (auto& v : t.values) v = static_cast<float>(rng.normal()) * std;
        } else if (kind == "one") {
            for (auto& v : t.values) v = 1.f;
        }  // "zero" stays zero
        out.tensors.push_back(std::move(t));
    });
    return out;
}

inline std::vector<float> sinusoidal_time_embedding(int t, int dim) {
    std::vector<float> emb(dim, 0.f);
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        emb[i] = static_cast<float>(std::sin(t * freq));
        emb[half + i] = static_cast<float>(std::cos(t * freq));
    }
    return emb;
}

struct UnetGraph {
    Tensor output;               // feature mosaic (Hm*4, Wm*4, 14)
    std::vector<Tensor> leaves;  // aligned with params.tensors
};

// Builds the U-Net forward graph on the tape. With track=false the parameters
// enter as constants and no backward graph is recorded.
inline UnetGraph build_unet(Tape& tape, const DenoiserParams& P, const LatentGrid& grid,
                            const std::vector<RayMap>& latent_raymaps, int t, bool track) {
    validate_config(P.config);
    const DenoiserConfig& c = P.config;
    if (grid.views < 2 || grid.views % 2 != 0)
        throw ShapeError("build_unet: invalid mosaic view count " + std::to_string(grid.views));
    if (static_cast<int>(latent_raymaps.size()) != grid.views)
        throw ShapeError("build_unet: " + std::to_string(latent_raymaps.size()) +
                         " ray maps for " + std::to_string(grid.views) + " views");
    for (const auto& rm : latent_raymaps)
        if (rm.width != grid.tile_width || rm.height != grid.tile_height)
            throw_shape_mismatch("build_unet: ray map vs latent tile", {rm.height, rm.width},
                                 {grid.tile_height, grid.tile_width});

    const int Hm = grid.height(), Wm = grid.width();

    UnetGraph gph;
    size_t cursor = 0;
    auto param = [&](const std::string& expect) -> Tensor {
        if (cursor >= P.tensors.size() || P.tensors[cursor].name != expect)
            throw Error("build_unet: parameter order mismatch at " + expect);
        const NamedTensor& nt = P.tensors[cursor++];
        Tensor t0 = track ? make_leaf(tape, nt.shape, nt.values)
                          : make_constant(nt.shape, nt.values);
        gph.leaves.push_back(t0);
        return t0;
    };

    // Input mosaic: latent channels then ray-map channels.
    Tensor zin = make_constant({Hm, Wm, c.latent_channels}, grid.data);
    std::vector<float> rays(static_cast<size_t>(Hm) * Wm * c.raymap_channels, 0.f);
    {
        int cols = grid.views / 2;
        for (int view = 0; view < grid.views; ++view) {
            int row = view / cols, col = view % cols;
            const RayMap& rm = latent_raymaps[view];
            for (int y = 0; y < grid.tile_height; ++y)
                for (int x = 0; x < grid.tile_width; ++x)
                    for (int ch = 0; ch < 6; ++ch)
                        rays[((static_cast<size_t>(row * grid.tile_height + y) * Wm) +
                              col * grid.tile_width + x) *
                                 c.raymap_channels +
                             ch] = rm.data[(static_cast<size_t>(y) * rm.width + x) * 6 + ch];
        }
    }
    Tensor rin = make_constant({Hm, Wm, c.raymap_channels}, std::move(rays));

    // Time embedding MLP.
    Tensor temb = make_constant({1, c.time_embed_dim}, sinusoidal_time_embedding(t, c.time_embed_dim));
    {
        Tensor w1 = param("time.fc1.w"), b1 = param("time.fc1.b");
        Tensor w2 = param("time.fc2.w"), b2 = param("time.fc2.b");
        temb = silu(add(matmul(temb, w1), reshape(b1, {1, c.time_embed_dim})));
        temb = add(matmul(temb, w2), reshape(b2, {1, c.time_embed_dim}));
    }

    auto resblock = [&](Tensor x, const std::string& prefix, int cin, int cout) -> Tensor {
        Tensor g1 = param(prefix + ".gn1.g"), be1 = param(prefix + ".gn1.b");
        Tensor w1 = param(prefix + ".conv1.w"), b1 = param(prefix + ".conv1.b");
        Tensor tw = param(prefix + ".temb.w"), tb = param(prefix + ".temb.b");
        Tensor g2 = param(prefix + ".gn2.g"), be2 = param(prefix + ".gn2.b");
        Tensor w2 = param(prefix + ".conv2.w"), b2 = param(prefix + ".conv2.b");
        Tensor h = add_bias(conv2d(silu(group_norm(x, g1, be1, c.norm_groups)), w1, 1, 1), b1);
        Tensor tproj = reshape(add(matmul(temb, tw), reshape(tb, {1, cout})), {cout});
        h = add_bias(h, tproj);
        h = add_bias(conv2d(silu(group_norm(h, g2, be2, c.norm_groups)), w2, 1, 1), b2);
        Tensor sc = x;
        if (cin != cout) {
            Tensor sw = param(prefix + ".skip.w"), sb = param(prefix + ".skip.b");
            sc = add_bias(conv2d(x, sw, 1, 0), sb);
        }
        return add(sc, h);
    };

    const int S = static_cast<int>(c.channel_multipliers.size());
    auto ch = [&](int s) { return c.base_channels * c.channel_multipliers[s]; };

    // Fetch weight/bias pairs as separate statements: param() consumes the
    // tensor list in order, and argument evaluation order is unspecified.
    Tensor stem_w = param("stem.w"), stem_b = param("stem.b");
    Tensor x = add_bias(conv2d(concat_channels({zin, rin}), stem_w, 1, 1), stem_b);
    std::vector<Tensor> skips;
    for (int s = 0; s < S; ++s) {
        for (int b = 0; b < c.blocks_per_scale; ++b)
            x = resblock(x, "enc" + std::to_string(s) + ".rb" + std::to_string(b), ch(s), ch(s));
        if (s + 1 < S) {
            skips.push_back(x);
            Tensor dw = param("down" + std::to_string(s) + ".w");
            Tensor db = param("down" + std::to_string(s) + ".b");
            x = add_bias(conv2d(x, dw, 2, 1), db);
        }
    }
    for (int s = S - 2; s >= 0; --s) {
        Tensor uw = param("up" + std::to_string(s) + ".w");
        Tensor ub = param("up" + std::to_string(s) + ".b");
        x = add_bias(conv2d(upsample_nearest(x, 2), uw, 1, 1), ub);
        x = concat_channels({x, skips[s]});
        for (int b = 0; b < c.blocks_per_scale; ++b)
            x = resblock(x, "dec" + std::to_string(s) + ".rb" + std::to_string(b),
                         b == 0 ? 2 * ch(s) : ch(s), ch(s));
    }

    Tensor hg = param("head.gn.g"), hb = param("head.gn.b");
    x = silu(group_norm(x, hg, hb, c.norm_groups));
    Tensor h1w = param("head.conv1.w"), h1b = param("head.conv1.b");
    x = silu(add_bias(conv2d(upsample_nearest(x, 2), h1w, 1, 1), h1b));
    Tensor h2w = param("head.conv2.w"), h2b = param("head.conv2.b");
    x = silu(add_bias(conv2d(upsample_nearest(x, 2), h2w, 1, 1), h2b));
    Tensor ow = param("head.out.w"), ob = param("head.out.b");
    gph.output = add_bias(conv2d(x, ow, 1, 1), ob);
    if (cursor != P.tensors.size())
        throw Error("build_unet: " + std::to_string(P.tensors.size() - cursor) +
                    " unused parameters");
    return gph;
}

// Plain forward: per-view raw Gaussian feature maps at 4x latent resolution.
inline std::vector<GaussianFeatureMap> unet_forward(const DenoiserParams& P,
                                                    const NoisyLatentGrid& grid,
                                                    const std::vector<RayMap>& latent_raymaps,
                                                    int t) {
    Tape tape;
    UnetGraph g = build_unet(tape, P, grid.grid, latent_raymaps, t, false);
    const int fh = grid.grid.tile_height * P.config.head_upscale;
    const int fw = grid.grid.tile_width * P.config.head_upscale;
    const int cols = grid.grid.views / 2;
    const int Wf = cols * fw;
    std::vector<GaussianFeatureMap> out;
    out.reserve(grid.grid.views);
    for (int view = 0; view < grid.grid.views; ++view) {
        int row = view / cols, col = view % cols;
        GaussianFeatureMap m(fw, fh);
        for (int y = 0; y < fh; ++y)
            for (int x = 0; x < fw; ++x)
                for (int ch2 = 0; ch2 < kGaussianChannels; ++ch2)
                    m.data[(static_cast<size_t>(y) * fw + x) * kGaussianChannels + ch2] =
                        (*g.output.values)[((static_cast<size_t>(row * fh + y) * Wf) +
                                            col * fw + x) *
                                               kGaussianChannels +
                                           ch2];
        out.push_back(std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splat bridge: feature mosaic -> activated Gaussians -> pruned cloud ->
// renders, as one custom node with the renderer's analytic backward. The
// encode bridge then maps renders back to a latent mosaic.
// ---------------------------------------------------------------------------

struct BridgeResult {
    Tensor renders;                  // (P, H, W, 3)
    GaussianCloud cloud;             // after pruning; source_view filled
    std::vector<RenderOutput> outs;  // per pose, order matches poses
};

inline BridgeResult splat_bridge(const Tensor& feature_mosaic,
                                 const std::vector<CameraPose>& poses,
                                 const std::vector<RayMap>& head_raymaps, int views,
                                 const Vec3f& background,
                                 float prune_threshold = kOpacityPruneThreshold) {
    if (feature_mosaic.shape.size() != 3 || feature_mosaic.shape[2] != kGaussianChannels)
        throw ShapeError("splat_bridge: feature mosaic must be (H,W,14), got " +
                         shape_string(feature_mosaic.shape));
    if (views < 2 || views % 2 != 0 || static_cast<int>(head_raymaps.size()) != views)
        throw ShapeError("splat_bridge: need one ray map per view, views even");
    const int cols = views / 2;
    const int fh = feature_mosaic.shape[0] / 2, fw = feature_mosaic.shape[1] / cols;
    if (fh * 2 != feature_mosaic.shape[0] || fw * cols != feature_mosaic.shape[1])
        throw ShapeError("splat_bridge: mosaic dims not divisible into tiles");
    for (const auto& rm : head_raymaps)
        if (rm.width != fw || rm.height != fh)
            throw_shape_mismatch("splat_bridge: ray map vs feature tile", {rm.height, rm.width},
                                 {fh, fw});
    if (poses.empty()) throw ValueError("splat_bridge: no poses");

    struct State {
        GaussianCloud cloud;
        std::vector<int> kept;  // cloud index -> pre-prune flat index
        std::shared_ptr<std::vector<float>> features;
        std::vector<RayMap> raymaps;
        std::vector<CameraPose> poses;
        Vec3d background;
        int views, fh, fw, cols;
    };
    auto st = std::make_shared<State>();
    st->features = feature_mosaic.values;
    st->raymaps = head_raymaps;
    st->poses = poses;
    st->background = Vec3d(background);
    st->views = views;
    st->fh = fh;
    st->fw = fw;
    st->cols = cols;

    const int Wf = feature_mosaic.shape[1];
    const std::vector<float>& fv = *feature_mosaic.values;
    const size_t per_view = static_cast<size_t>(fh) * fw;
    for (int view = 0; view < views; ++view) {
        int row = view / cols, col = view % cols;
        const RayMap& rm = head_raymaps[view];
        for (int y = 0; y < fh; ++y)
            for (int x = 0; x < fw; ++x) {
                double raw[14], params[14];
                for (int ch2 = 0; ch2 < 14; ++ch2)
                    raw[ch2] = fv[((static_cast<size_t>(row * fh + y) * Wf) + col * fw + x) * 14 +
                                  ch2];
                activation::forward(raw, rm.origin, rm.direction(y, x), params);
                if (params[9] < prune_threshold) continue;
                Gaussian g;
                g.position = {static_cast<float>(params[0]), static_cast<float>(params[1]),
                              static_cast<float>(params[2])};
                g.scale = {static_cast<float>(params[3]), static_cast<float>(params[4]),
                           static_cast<float>(params[5])};
                g.color = {static_cast<float>(params[6]), static_cast<float>(params[7]),
                           static_cast<float>(params[8])};
                g.opacity = static_cast<float>(params[9]);
                g.orientation = {static_cast<float>(params[10]), static_cast<float>(params[11]),
                                 static_cast<float>(params[12]), static_cast<float>(params[13])};
                st->cloud.gaussians.push_back(g);
                st->cloud.source_view.push_back(view);
                st->kept.push_back(static_cast<int>(view * per_view + y * fw + x));
            }
    }

    BridgeResult res;
    res.cloud = st->cloud;
    const int P = static_cast<int>(poses.size());
    const int H = poses[0].height, W = poses[0].width;
    std::vector<float> stacked(static_cast<size_t>(P) * H * W * 3, 0.f);
    for (int p = 0; p < P; ++p) {
        if (poses[p].width != W || poses[p].height != H)
            throw ShapeError("splat_bridge: all poses must share image dims");
        RenderOutput ro = render(st->cloud, poses[p], background);
        std::copy(ro.color.data.begin(), ro.color.data.end(),
                  stacked.begin() + static_cast<size_t>(p) * H * W * 3);
        res.outs.push_back(std::move(ro));
    }

    res.renders = custom_op(
        {feature_mosaic}, {P, H, W, 3}, std::move(stacked),
        [st, P, H, W](const std::vector<float>& g_out) {
            size_t n = st->cloud.size();
            RenderGradients total;
            total.resize_zero(n);
            std::vector<double> gslice(static_cast<size_t>(H) * W * 3);
            for (int p = 0; p < P; ++p) {
                const float* src = g_out.data() + static_cast<size_t>(p) * H * W * 3;
                bool any = false;
                for (size_t i = 0; i < gslice.size(); ++i) {
                    gslice[i] = src[i];
                    any = any || src[i] != 0.f;
                }
                if (!any) continue;
                RenderGradients g =
                    render_backward(st->cloud, st->poses[p], st->background, gslice);
                for (size_t i = 0; i < n; ++i) {
                    total.position[i] += g.position[i];
                    total.scale[i] += g.scale[i];
                    total.color[i] += g.color[i];
                    total.opacity[i] += g.opacity[i];
                    for (int k = 0; k < 4; ++k) total.orientation[i][k] += g.orientation[i][k];
                }
            }
            const int Wf2 = st->cols * st->fw;
            std::vector<float> gmosaic(static_cast<size_t>(2 * st->fh) * Wf2 * 14, 0.f);
            const std::vector<float>& fv2 = *st->features;
            const size_t pv = static_cast<size_t>(st->fh) * st->fw;
            for (size_t i = 0; i < n; ++i) {
                int flat = st->kept[i];
                int view = static_cast<int>(flat / pv);
                int pix = static_cast<int>(flat % pv);
                int y = pix / st->fw, x = pix % st->fw;
                int row = view / st->cols, col = view % st->cols;
                size_t base = ((static_cast<size_t>(row * st->fh + y) * Wf2) + col * st->fw + x) *
                              14;
                double raw[14], gp[14], graw[14];
                for (int ch2 = 0; ch2 < 14; ++ch2) raw[ch2] = fv2[base + ch2];
                gp[0] = total.position[i].x;
                gp[1] = total.position[i].y;
                gp[2] = total.position[i].z;
                gp[3] = total.scale[i].x;
                gp[4] = total.scale[i].y;
                gp[5] = total.scale[i].z;
                gp[6] = total.color[i].x;
                gp[7] = total.color[i].y;
                gp[8] = total.color[i].z;
                gp[9] = total.opacity[i];
                gp[10] = total.orientation[i].w;
                gp[11] = total.orientation[i].x;
                gp[12] = total.orientation[i].y;
                gp[13] = total.orientation[i].z;
                const RayMap& rm = st->raymaps[view];
                activation::backward(raw, rm.origin, rm.direction(y, x), gp, graw);
                for (int ch2 = 0; ch2 < 14; ++ch2)
                    gmosaic[base + ch2] = static_cast<float>(graw[ch2]);
            }
            return std::vector<std::vector<float>>{std::move(gmosaic)};
        });
    return res;
}

// Encodes the first `views` renders into a latent mosaic; the adjoint of the
// linear codec carries gradients back to the render tensor.
inline Tensor encode_renders(const Tensor& renders, int views) {
    if (renders.shape.size() != 4 || renders.shape[3] != 3)
        throw ShapeError("encode_renders: need (P,H,W,3), got " + shape_string(renders.shape));
    const int P = renders.shape[0], H = renders.shape[1], W = renders.shape[2];
    if (views < 2 || views % 2 != 0 || views > P)
        throw ShapeError("encode_renders: bad view count " + std::to_string(views));
    if (H % kPatchSize != 0 || W % kPatchSize != 0)
        throw ShapeError("encode_renders: render dims not divisible by 8");
    std::vector<Latent> latents;
    latents.reserve(views);
    for (int p = 0; p < views; ++p) {
        Image img(W, H, 3);
        std::copy(renders.values->begin() + static_cast<size_t>(p) * H * W * 3,
                  renders.values->begin() + static_cast<size_t>(p + 1) * H * W * 3,
                  img.data.begin());
        latents.push_back(encode(img));
    }
    LatentGrid grid = assemble_grid(latents);
    int th = grid.tile_height, tw = grid.tile_width, cols = views / 2;
    return custom_op(
        {renders}, {grid.height(), grid.width(), kLatentChannels}, grid.data,
        [P, H, W, views, th, tw, cols](const std::vector<float>& g_out) {
            std::vector<float> gr(static_cast<size_t>(P) * H * W * 3, 0.f);
            int Wm = cols * tw;
            for (int view = 0; view < views; ++view) {
                int row = view / cols, col = view % cols;
                Latent gz(th, tw);
                for (int y = 0; y < th; ++y)
                    for (int x = 0; x < tw; ++x)
                        for (int c = 0; c < kLatentChannels; ++c)
                            gz.at(y, x, c) =
                                g_out[((static_cast<size_t>(row * th + y) * Wm) + col * tw + x) *
                                          kLatentChannels +
                                      c];
                Image gimg = encode_adjoint(gz, H, W);
                std::copy(gimg.data.begin(), gimg.data.end(),
                          gr.begin() + static_cast<size_t>(view) * H * W * 3);
            }
            return std::vector<std::vector<float>>{std::move(gr)};
        });
}

// ---------------------------------------------------------------------------
// Composed denoising step S: U-Net -> Gaussians -> render -> encode.
// ---------------------------------------------------------------------------

struct SGraphResult {
    std::vector<Tensor> leaves;      // parameter leaves (training)
    Tensor feature_mosaic;           // raw U-Net output
    Tensor renders;                  // (P,H,W,3): rig views then extra poses
    Tensor z0_hat;                   // latent mosaic
    GaussianCloud cloud;             // pruned
    std::vector<RenderOutput> outs;  // per pose
};

inline CameraPose pose_at_resolution(CameraPose pose, int width, int height) {
    pose.width = width;
    pose.height = height;
    return pose;
}

inline SGraphResult denoise_step_graph(Tape& tape, const DenoiserParams& P,
                                       const NoisyLatentGrid& grid, const ViewRig& rig,
                                       const std::vector<CameraPose>& extra_poses,
                                       const Vec3f& background, bool track) {
    const int v = static_cast<int>(rig.poses.size());
    if (v != grid.grid.views)
        throw ShapeError("denoise_step: rig has " + std::to_string(v) + " poses but grid has " +
                         std::to_string(grid.grid.views) + " views");
    const int W = rig.poses[0].width, H = rig.poses[0].height;
    if (W % kPatchSize != 0 || H % kPatchSize != 0)
        throw ShapeError("denoise_step: view dims must be divisible by 8");
    if (grid.grid.tile_width != W / kPatchSize || grid.grid.tile_height != H / kPatchSize)
        throw_shape_mismatch("denoise_step: latent tile vs view size",
                             {grid.grid.tile_height, grid.grid.tile_width},
                             {H / kPatchSize, W / kPatchSize});

    std::vector<RayMap> latent_rays, head_rays;
    latent_rays.reserve(v);
    head_rays.reserve(v);
    for (const auto& pose : rig.poses) {
        latent_rays.push_back(downsample_raymap(plucker_map(pose), kPatchSize));
        head_rays.push_back(plucker_map(pose_at_resolution(pose, W / 2, H / 2)));
    }

    UnetGraph un = build_unet(tape, P, grid.grid, latent_rays, grid.t, track);

    std::vector<CameraPose> all_poses = rig.poses;
    for (const auto& p : extra_poses) all_poses.push_back(pose_at_resolution(p, W, H));

    BridgeResult br = splat_bridge(un.output, all_poses, head_rays, v, background);

    SGraphResult out;
    out.leaves = std::move(un.leaves);
    out.feature_mosaic = un.output;
    out.renders = br.renders;
    out.z0_hat = encode_renders(br.renders, v);
    out.cloud = std::move(br.cloud);
    out.outs = std::move(br.outs);
    return out;
}

struct DenoiseStepResult {
    LatentGrid z0_hat;
    GaussianCloud cloud;
    std::vector<RenderOutput> renders;
};

inline DenoiseStepResult denoise_step_S(const DenoiserParams& P, const NoisyLatentGrid& grid,
                                        const ViewRig& rig,
                                        const Vec3f& background = {1.f, 1.f, 1.f}) {
    Tape tape;
    SGraphResult g = denoise_step_graph(tape, P, grid, rig, {}, background, false);
    DenoiseStepResult out;
    out.z0_hat.views = grid.grid.views;
    out.z0_hat.tile_height = grid.grid.tile_height;
    out.z0_hat.tile_width = grid.grid.tile_width;
    out.z0_hat.data = *g.z0_hat.values;
    out.cloud = std::move(g.cloud);
    out.renders = std::move(g.outs);
    return out;
}

// Adapter for the sampler loop.
class NetDenoisingStep final : public DenoisingStep {
  public:
    NetDenoisingStep(const DenoiserParams& params, Vec3f background = {1.f, 1.f, 1.f})
        : params_(&params), background_(background) {}

    void run(const NoisyLatentGrid& z_t, const ViewRig& rig, LatentGrid& z0_hat,
             GaussianCloud& cloud, std::vector<RenderOutput>& renders) override {
        DenoiseStepResult r = denoise_step_S(*params_, z_t, rig, background_);
        z0_hat = std::move(r.z0_hat);
        cloud = std::move(r.cloud);
        renders = std::move(r.renders);
    }

  private:
    const DenoiserParams* params_;
    Vec3f background_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic "DSCK", version, length-prefixed config text, step
// counter, rng state, then named float32 tensor blobs. Bit-exact round trip.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    DenoiserConfig config;
    std::vector<NamedTensor> tensors;  // parameters plus optimizer state
    int64_t step = 0;
    std::string rng_state;
};

inline std::string serialize_config(const DenoiserConfig& c) {
    std::ostringstream os;
    os << "base_channels=" << c.base_channels << "\n";
    os << "channel_multipliers=";
    for (size_t i = 0; i < c.channel_multipliers.size(); ++i)
        os << (i ? "," : "") << c.channel_multipliers[i];
    os << "\n";
    os << "blocks_per_scale=" << c.blocks_per_scale << "\n";
    os << "latent_channels=" << c.latent_channels << "\n";
    os << "raymap_channels=" << c.raymap_channels << "\n";
    os << "time_embed_dim=" << c.time_embed_dim << "\n";
    os << "out_channels=" << c.out_channels << "\n";
    os << "head_upscale=" << c.head_upscale << "\n";
    os << "norm_groups=" << c.norm_groups << "\n";
    return os.str();
}

inline DenoiserConfig parse_config(const std::string& text) {
    DenoiserConfig c;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("config: bad line '" + line + "'");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "channel_multipliers") {
            c.channel_multipliers.clear();
            std::istringstream vs(val);
            std::string tok;
            while (std::getline(vs, tok, ',')) c.channel_multipliers.push_back(std::stoi(tok));
        } else if (key == "base_channels")
            c.base_channels = std::stoi(val);
        else if (key == "blocks_per_scale")
            c.blocks_per_scale = std::stoi(val);
        else if (key == "latent_channels")
            c.latent_channels = std::stoi(val);
        else if (key == "raymap_channels")
            c.raymap_channels = std::stoi(val);
        else if (key == "time_embed_dim")
            c.time_embed_dim = std::stoi(val);
        else if (key == "out_channels")
            c.out_channels = std::stoi(val);
        else if (key == "head_upscale")
            c.head_upscale = std::stoi(val);
        else if (key == "norm_groups")
            c.norm_groups = std::stoi(val);
        else
            throw IoError("config: unknown key '" + key + "'");
    }
    validate_config(c);
    return c;
}

namespace detail {

template <class T>
void write_pod(std::ofstream& f, T v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::ifstream& f, const std::string& path) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!f) throw IoError("checkpoint: truncated file " + path);
    return v;
}
inline void write_string(std::ofstream& f, const std::string& s) {
    write_pod<uint64_t>(f, s.size());
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::ifstream& f, const std::string& path) {
    uint64_t n = read_pod<uint64_t>(f, path);
    if (n > (1ull << 32)) throw IoError("checkpoint: corrupt string length in " + path);
    std::string s(n, '\0');
    f.read(s.data(), static_cast<std::streamsize>(n));
    if (!f) throw IoError("checkpoint: truncated file " + path);
    return s;
}

}  // namespace detail

// Network parameters are the non-optimizer tensors, in stored order.
inline DenoiserParams params_from_checkpoint(const Checkpoint& ck) {
    DenoiserParams p;
    p.config = ck.config;
    for (const auto& t : ck.tensors)
        if (t.name.rfind("adam.", 0) != 0) p.tensors.push_back(t);
    return p;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);
    f.write("DSCK", 4);
    detail::write_pod<uint32_t>(f, kCheckpointVersion);
    detail::write_string(f, serialize_config(ck.config));
    detail::write_pod<int64_t>(f, ck.step);
    detail::write_string(f, ck.rng_state);
    detail::write_pod<uint64_t>(f, ck.tensors.size());
    for (const auto& t : ck.tensors) {
        detail::write_string(f, t.name);
        detail::write_pod<uint8_t>(f, 0);  // dtype float32
        detail::write_pod<uint32_t>(f, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::write_pod<int32_t>(f, d);
        detail::write_pod<uint64_t>(f, t.values.size());
        f.write(reinterpret_cast<const char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(float)));
    }
    if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "DSCK", 4) != 0)
        throw IoError("load_checkpoint: bad magic in " + path);
    uint32_t version = detail::read_pod<uint32_t>(f, path);
    if (version != kCheckpointVersion)
        throw IoError("load_checkpoint: unsupported version " + std::to_string(version) + " in " +
                      path);
    Checkpoint ck;
    ck.config = parse_config(detail::read_string(f, path));
    ck.step = detail::read_pod<int64_t>(f, path);
    ck.rng_state = detail::read_string(f, path);
    uint64_t count = detail::read_pod<uint64_t>(f, path);
    ck.tensors.resize(count);
    for (auto& t : ck.tensors) {
        t.name = detail::read_string(f, path);
        uint8_t dtype = detail::read_pod<uint8_t>(f, path);
        if (dtype != 0) throw IoError("load_checkpoint: unknown dtype in " + path);
        uint32_t ndim = detail::read_pod<uint32_t>(f, path);
        if (ndim > 8) throw IoError("load_checkpoint: corrupt rank in " + path);
        t.shape.resize(ndim);
        for (auto& d : t.shape) d = detail::read_pod<int32_t>(f, path);
        uint64_t n = detail::read_pod<uint64_t>(f, path);
        if (n != shape_product(t.shape))
            throw IoError("load_checkpoint: shape/count mismatch for " + t.name + " in " + path);
        t.values.resize(n);
        f.read(reinterpret_cast<char*>(t.values.data()),
               static_cast<std::streamsize>(n * sizeof(float)));
        if (!f) throw IoError("load_checkpoint: truncated file " + path);
    }
    return ck;
}

}  // namespace dsplats
