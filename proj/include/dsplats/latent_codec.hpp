#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "dsplats/common.hpp"
#include "dsplats/image.hpp"
#include "dsplats/vec.hpp"

namespace dsplats {

// Fixed linear image codec: each 8x8x3 patch is projected onto 4 orthonormal
// basis vectors (luma DC, first horizontal and vertical luma harmonics, DC of
// the R-B chroma difference), centered so mid-gray encodes to zero and scaled
// by a fixed gain so typical latents land in roughly [-1, 1].

inline constexpr int kPatchSize = 8;
inline constexpr int kLatentChannels = 4;
inline constexpr double kCodecGain = 0.125;

struct Latent {
    int height = 0;  // h / 8
    int width = 0;   // w / 8
    std::vector<float> data;  // (height, width, 4)

    Latent() = default;
    Latent(int h, int w)
        : height(h), width(w), data(static_cast<size_t>(h) * w * kLatentChannels, 0.f) {}

    float& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width + x) * kLatentChannels + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width + x) * kLatentChannels + c];
    }
};

// v latent tiles in a 2 x (v/2) mosaic; views 0..v/2-1 fill the top row.
struct LatentGrid {
    int views = 0;
    int tile_height = 0;
    int tile_width = 0;
    std::vector<float> data;  // (2*tile_height, (views/2)*tile_width, 4)

    int height() const { return 2 * tile_height; }
    int width() const { return (views / 2) * tile_width; }

    float& at(int y, int x, int c) {
        return data[(static_cast<size_t>(y) * width() + x) * kLatentChannels + c];
    }
    float at(int y, int x, int c) const {
        return data[(static_cast<size_t>(y) * width() + x) * kLatentChannels + c];
    }
};

namespace detail {

// 4 x 192 projection matrix with orthonormal rows. Patch element order:
// (py * 8 + px) * 3 + channel.
inline const std::array<std::array<double, 192>, 4>& codec_basis() {
    static const auto basis = [] {
        std::array<std::array<double, 192>, 4> b{};
        auto phi = [](int k, int n) {
            if (k == 0) return std::sqrt(1.0 / 8.0);
            return std::sqrt(2.0 / 8.0) * std::cos(kPi * (2 * n + 1) * k / 16.0);
        };
        const double luma[3] = {1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0), 1.0 / std::sqrt(3.0)};
        const double chroma[3] = {1.0 / std::sqrt(2.0), 0.0, -1.0 / std::sqrt(2.0)};
        for (int py = 0; py < 8; ++py)
            for (int px = 0; px < 8; ++px)
                for (int c = 0; c < 3; ++c) {
                    int i = (py * 8 + px) * 3 + c;
                    b[0][i] = phi(0, py) * phi(0, px) * luma[c];
                    b[1][i] = phi(0, py) * phi(1, px) * luma[c];
                    b[2][i] = phi(1, py) * phi(0, px) * luma[c];
                    b[3][i] = phi(0, py) * phi(0, px) * chroma[c];
                }
        return b;
    }();
    return basis;
}

}  // namespace detail

inline Latent encode(const Image& image) {
    if (image.channels != 3)
        throw ShapeError("encode: expected 3-channel image, got " +
                         std::to_string(image.channels));
    if (image.width % kPatchSize != 0 || image.height % kPatchSize != 0)
        throw ShapeError("encode: image dims " + std::to_string(image.width) + "x" +
                         std::to_string(image.height) + " not divisible by 8");
    const auto& basis = detail::codec_basis();
    Latent z(image.height / kPatchSize, image.width / kPatchSize);
    for (int ty = 0; ty < z.height; ++ty)
        for (int tx = 0; tx < z.width; ++tx) {
            double acc[4] = {0, 0, 0, 0};
            for (int py = 0; py < 8; ++py)
                for (int px = 0; px < 8; ++px)
                    for (int c = 0; c < 3; ++c) {
                        double v = image.at(ty * 8 + py, tx * 8 + px, c) - 0.5;
                        int i = (py * 8 + px) * 3 + c;
                        for (int j = 0; j < 4; ++j) acc[j] += v * basis[j][i];
                    }
            for (int j = 0; j < 4; ++j) z.at(ty, tx, j) = static_cast<float>(acc[j] * kCodecGain);
        }
    return z;
}

// Transpose of the encoding projection (gain inverted), clamped to [0,1].
inline Image decode(const Latent& z) {
    const auto& basis = detail::codec_basis();
    Image img(z.width * kPatchSize, z.height * kPatchSize, 3);
    for (int ty = 0; ty < z.height; ++ty)
        for (int tx = 0; tx < z.width; ++tx) {
            double coef[4];
            for (int j = 0; j < 4; ++j) coef[j] = z.at(ty, tx, j) / kCodecGain;
            for (int py = 0; py < 8; ++py)
                for (int px = 0; px < 8; ++px)
                    for (int c = 0; c < 3; ++c) {
                        int i = (py * 8 + px) * 3 + c;
                        double v = 0.5;
                        for (int j = 0; j < 4; ++j) v += coef[j] * basis[j][i];
                        img.at(ty * 8 + py, tx * 8 + px, c) =
                            static_cast<float>(std::clamp(v, 0.0, 1.0));
                    }
        }
    return img;
}

// Adjoint of encode's linear part (no centering, no clamp); maps a latent
// gradient back to an image gradient. Used by the training graph.
inline Image encode_adjoint(const Latent& g, int image_height, int image_width) {
    if (g.height * kPatchSize != image_height || g.width * kPatchSize != image_width)
        throw_shape_mismatch("encode_adjoint", {g.height * kPatchSize, g.width * kPatchSize},
                             {image_height, image_width});
    const auto& basis = detail::codec_basis();
    Image img(image_width, image_height, 3);
    for (int ty = 0; ty < g.height; ++ty)
        for (int tx = 0; tx < g.width; ++tx) {
            double coef[4];
            for (int j = 0; j < 4; ++j) coef[j] = g.at(ty, tx, j) * kCodecGain;
            for (int py = 0; py < 8; ++py)
                for (int px = 0; px < 8; ++px)
                    for (int c = 0; c < 3; ++c) {
                        int i = (py * 8 + px) * 3 + c;
                        double v = 0.0;
                        for (int j = 0; j < 4; ++j) v += coef[j] * basis[j][i];
                        img.at(ty * 8 + py, tx * 8 + px, c) = static_cast<float>(v);
                    }
        }
    return img;
}

inline LatentGrid assemble_grid(const std::vector<Latent>& latents) {
    int v = static_cast<int>(latents.size());
    if (v < 2 || v % 2 != 0)
        throw ShapeError("assemble_grid: need an even view count >= 2, got " + std::to_string(v));
    for (const auto& z : latents)
        if (z.height != latents[0].height || z.width != latents[0].width)
            throw_shape_mismatch("assemble_grid", {latents[0].height, latents[0].width},
                                 {z.height, z.width});
    LatentGrid grid;
    grid.views = v;
    grid.tile_height = latents[0].height;
    grid.tile_width = latents[0].width;
    grid.data.assign(static_cast<size_t>(grid.height()) * grid.width() * kLatentChannels, 0.f);
    int cols = v / 2;
    for (int view = 0; view < v; ++view) {
        int row = view / cols, col = view % cols;
        for (int y = 0; y < grid.tile_height; ++y)
            for (int x = 0; x < grid.tile_width; ++x)
                for (int c = 0; c < kLatentChannels; ++c)
                    grid.at(row * grid.tile_height + y, col * grid.tile_width + x, c) =
                        latents[view].at(y, x, c);
    }
    return grid;
}

inline std::vector<Latent> split_grid(const LatentGrid& grid) {
    if (grid.views < 2 || grid.views % 2 != 0)
        throw ShapeError("split_grid: invalid view count " + std::to_string(grid.views));
    std::vector<Latent> out(grid.views, Latent(grid.tile_height, grid.tile_width));
    int cols = grid.views / 2;
    for (int view = 0; view < grid.views; ++view) {
        int row = view / cols, col = view % cols;
        for (int y = 0; y < grid.tile_height; ++y)
            for (int x = 0; x < grid.tile_width; ++x)
                for (int c = 0; c < kLatentChannels; ++c)
                    out[view].at(y, x, c) =
                        grid.at(row * grid.tile_height + y, col * grid.tile_width + x, c);
    }
    return out;
}

}  // namespace dsplats
