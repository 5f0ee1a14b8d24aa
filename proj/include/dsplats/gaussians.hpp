#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dsplats/camera.hpp"
#include "dsplats/common.hpp"
#include "dsplats/vec.hpp"

namespace dsplats {

struct Gaussian {
    Vec3f position{0, 0, 0};
    Vec3f scale{1, 1, 1};        // strictly positive, world units
    Vec3f color{0.5f, 0.5f, 0.5f};
    float opacity = 1.f;
    Quatf orientation{1, 0, 0, 0};  // unit quaternion, (w,x,y,z)
};

struct GaussianCloud {
    std::vector<Gaussian> gaussians;
    std::vector<int32_t> source_view;  // optional; empty or one entry per Gaussian

    size_t size() const { return gaussians.size(); }
    bool empty() const { return gaussians.empty(); }
};

// Raw network output: 14 channels per pixel.
struct GaussianFeatureMap {
    int width = 0;
    int height = 0;
    std::vector<float> data;  // (height, width, 14)

    GaussianFeatureMap() = default;
    GaussianFeatureMap(int w, int h)
        : width(w), height(h), data(static_cast<size_t>(w) * h * 14, 0.f) {}

    float* pixel(int y, int x) { return &data[(static_cast<size_t>(y) * width + x) * 14]; }
    const float* pixel(int y, int x) const {
        return &data[(static_cast<size_t>(y) * width + x) * 14];
    }
};

inline constexpr int kGaussianChannels = 14;
inline constexpr float kOpacityPruneThreshold = 0.005f;

// ---------------------------------------------------------------------------
// Feature activation. Channel layout of the raw 14-vector:
//   0      depth along the pixel ray (sigmoid, scaled to [0, t_max])
//   1-2    tangential offset off the ray (tanh, bounded)
//   3-5    log-scale (clamped then exponentiated)
//   6-8    color (sigmoid)
//   9      opacity (sigmoid)
//   10-13  orientation quaternion wxyz (normalized; zero -> identity)
// ---------------------------------------------------------------------------

namespace activation {

inline constexpr double kTMax = 3.0;          // ray depth range; object fits [-1,1]^3 from r=1.5
inline constexpr double kTangentMax = 0.5;    // max tangential offset, world units
inline constexpr double kLogScaleLo = -10.0;
inline constexpr double kLogScaleHi = 2.0;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Orthonormal basis perpendicular to the unit direction d, using the same
// +Z-up / +X-fallback convention as the camera look-at.
inline void tangent_basis(const Vec3d& d, Vec3d& e1, Vec3d& e2) {
    Vec3d up{0, 0, 1};
    if (std::abs(dot(d, up)) > 1.0 - 1e-9) up = {1, 0, 0};
    e1 = normalized(cross(up, d));
    e2 = cross(d, e1);
}

// raw[14] -> params[14] = (pos xyz, scale xyz, color rgb, opacity, quat wxyz),
// for a pixel whose unit ray is (origin, d).
inline void forward(const double raw[14], const Vec3d& origin, const Vec3d& d, double params[14]) {
    Vec3d e1, e2;
    tangent_basis(d, e1, e2);
    double t = sigmoid(raw[0]) * kTMax;
    Vec3d pos = origin + d * t + e1 * (std::tanh(raw[1]) * kTangentMax) +
                e2 * (std::tanh(raw[2]) * kTangentMax);
    params[0] = pos.x;
    params[1] = pos.y;
    params[2] = pos.z;
    for (int j = 0; j < 3; ++j) {
        double c = std::clamp(raw[3 + j], kLogScaleLo, kLogScaleHi);
        params[3 + j] = std::exp(c);
    }
    for (int j = 0; j < 3; ++j) params[6 + j] = sigmoid(raw[6 + j]);
    params[9] = sigmoid(raw[9]);
    Quatd q{raw[10], raw[11], raw[12], raw[13]};
    Quatd qn = quat_normalized(q);
    params[10] = qn.w;
    params[11] = qn.x;
    params[12] = qn.y;
    params[13] = qn.z;
}

// Chain rule through forward: grads w.r.t. the 14 activated params ->
// grads w.r.t. the 14 raw channels. The quaternion gradient arrives already
// tangent to the unit sphere from the renderer; the normalization chain
// divides by the raw norm and re-projects.
inline void backward(const double raw[14], const Vec3d& /*origin*/, const Vec3d& d,
                     const double g_params[14], double g_raw[14]) {
    Vec3d e1, e2;
    tangent_basis(d, e1, e2);
    Vec3d g_pos{g_params[0], g_params[1], g_params[2]};
    double s0 = sigmoid(raw[0]);
    g_raw[0] = dot(g_pos, d) * kTMax * s0 * (1.0 - s0);
    double th1 = std::tanh(raw[1]), th2 = std::tanh(raw[2]);
    g_raw[1] = dot(g_pos, e1) * kTangentMax * (1.0 - th1 * th1);
    g_raw[2] = dot(g_pos, e2) * kTangentMax * (1.0 - th2 * th2);
    for (int j = 0; j < 3; ++j) {
        bool inside = raw[3 + j] > kLogScaleLo && raw[3 + j] < kLogScaleHi;
        double scale = std::exp(std::clamp(raw[3 + j], kLogScaleLo, kLogScaleHi));
        g_raw[3 + j] = inside ? g_params[3 + j] * scale : 0.0;
    }
    for (int j = 0; j < 3; ++j) {
        double s = sigmoid(raw[6 + j]);
        g_raw[6 + j] = g_params[6 + j] * s * (1.0 - s);
    }
    double s9 = sigmoid(raw[9]);
    g_raw[9] = g_params[9] * s9 * (1.0 - s9);

    Quatd q{raw[10], raw[11], raw[12], raw[13]};
    double n = q.norm();
    if (n < 1e-12) {
        g_raw[10] = g_raw[11] = g_raw[12] = g_raw[13] = 0.0;
        return;
    }
    Quatd qn{q.w / n, q.x / n, q.y / n, q.z / n};
    double gdotq = g_params[10] * qn.w + g_params[11] * qn.x + g_params[12] * qn.y +
                   g_params[13] * qn.z;
    for (int j = 0; j < 4; ++j) g_raw[10 + j] = (g_params[10 + j] - gdotq * qn[j]) / n;
}

}  // namespace activation

// Activates a raw feature map into pixel-aligned Gaussians, one per pixel in
// row-major order. The ray map supplies per-pixel rays and must match the
// feature map's spatial dims.
inline std::vector<Gaussian> activate_features(const GaussianFeatureMap& raw,
                                               const RayMap& ray_map) {
    if (raw.width != ray_map.width || raw.height != ray_map.height)
        throw_shape_mismatch("activate_features", {raw.height, raw.width},
                             {ray_map.height, ray_map.width});
    std::vector<Gaussian> out;
    out.reserve(static_cast<size_t>(raw.width) * raw.height);
    for (int y = 0; y < raw.height; ++y)
        for (int x = 0; x < raw.width; ++x) {
            const float* px = raw.pixel(y, x);
            double rawd[14], params[14];
            for (int c = 0; c < 14; ++c) rawd[c] = px[c];
            activation::forward(rawd, ray_map.origin, ray_map.direction(y, x), params);
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
            out.push_back(g);
        }
    return out;
}

// Drops Gaussians with opacity below the threshold; survivor order preserved.
inline GaussianCloud prune(const GaussianCloud& cloud, float threshold = kOpacityPruneThreshold) {
    if (threshold < 0.f || threshold > 1.f)
        throw ValueError("prune: threshold must be in [0,1], got " + std::to_string(threshold));
    GaussianCloud out;
    bool track = cloud.source_view.size() == cloud.gaussians.size();
    for (size_t i = 0; i < cloud.gaussians.size(); ++i) {
        if (cloud.gaussians[i].opacity < threshold) continue;
        out.gaussians.push_back(cloud.gaussians[i]);
        if (track) out.source_view.push_back(cloud.source_view[i]);
    }
    return out;
}

// 3D covariance Σ = R(q) diag(scale²) R(q)ᵀ.
inline Mat3d covariance(const Gaussian& g) {
    Mat3d r = quat_to_matrix(quat_normalized(Quatd(g.orientation)));
    Vec3d s2{static_cast<double>(g.scale.x) * g.scale.x,
             static_cast<double>(g.scale.y) * g.scale.y,
             static_cast<double>(g.scale.z) * g.scale.z};
    Mat3d out;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            out(i, j) = r(i, 0) * s2.x * r(j, 0) + r(i, 1) * s2.y * r(j, 1) +
                        r(i, 2) * s2.z * r(j, 2);
    return out;
}

// ---------------------------------------------------------------------------
// Cloud file format: little-endian, magic "DSPL", u32 version, u64 count,
// then 14 float32 per Gaussian (pos xyz, scale xyz, color rgb, opacity,
// quat wxyz).
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCloudFormatVersion = 1;

inline void save_cloud(const GaussianCloud& cloud, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_cloud: cannot open " + path);
    f.write("DSPL", 4);
    uint32_t version = kCloudFormatVersion;
    uint64_t count = cloud.gaussians.size();
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& g : cloud.gaussians) {
        float rec[14] = {g.position.x, g.position.y, g.position.z, g.scale.x,      g.scale.y,
                         g.scale.z,    g.color.x,    g.color.y,    g.color.z,      g.opacity,
                         g.orientation.w, g.orientation.x, g.orientation.y, g.orientation.z};
        f.write(reinterpret_cast<const char*>(rec), sizeof(rec));
    }
    if (!f) throw IoError("save_cloud: write failed for " + path);
}

inline GaussianCloud load_cloud(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_cloud: cannot open " + path);
    char magic[4];
    uint32_t version = 0;
    uint64_t count = 0;
    f.read(magic, 4);
    f.read(reinterpret_cast<char*>(&version), 4);
    f.read(reinterpret_cast<char*>(&count), 8);
    if (!f || std::memcmp(magic, "DSPL", 4) != 0)
        throw IoError("load_cloud: bad magic in " + path);
    if (version != kCloudFormatVersion)
        throw IoError("load_cloud: unsupported version " + std::to_string(version) + " in " + path);
    GaussianCloud cloud;
    cloud.gaussians.resize(count);
    for (auto& g : cloud.gaussians) {
        float rec[14];
        f.read(reinterpret_cast<char*>(rec), sizeof(rec));
        if (!f) throw IoError("load_cloud: truncated file " + path);
        g.position = {rec[0], rec[1], rec[2]};
        g.scale = {rec[3], rec[4], rec[5]};
        g.color = {rec[6], rec[7], rec[8]};
        g.opacity = rec[9];
        g.orientation = {rec[10], rec[11], rec[12], rec[13]};
    }
    return cloud;
}

}  // namespace dsplats
