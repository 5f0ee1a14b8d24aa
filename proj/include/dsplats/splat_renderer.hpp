#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dsplats/camera.hpp"
#include "dsplats/common.hpp"
#include "dsplats/gaussians.hpp"
#include "dsplats/image.hpp"
#include "dsplats/vec.hpp"

namespace dsplats {

// Differentiable Gaussian splatting. Projection, compositing, and gradients
// run in double; images are cast to float at the public boundary.
//
// Compositing model, front-to-back over depth-sorted Gaussians:
//   alpha_i = opacity_i * exp(-0.5 * d' Lam d),  Lam = (J W Sig W' J' + 0.3 I)^-1
//   C = sum c_i alpha_i T_i,  T_i = prod_{j<i} (1 - alpha_j)
//   color = C + (1 - A) * background,  A = sum alpha_i T_i
// The kernel is truncated at 6 sigma: the discarded weight is at most
// exp(-18) ~ 1.5e-8 per Gaussian, so the tiled/culled output stays within
// 1e-6 of an untruncated all-Gaussians-per-pixel evaluation.

inline constexpr double kNearPlane = 0.01;
inline constexpr double kCovarianceFloor = 0.3;   // isotropic 2D dilation, px^2
inline constexpr double kAlphaMax = 0.999;
inline constexpr double kAlphaSkip = 1e-4;
inline constexpr double kKernelCutoff = 36.0;     // chi^2 at 6 sigma
inline constexpr double kBinningSigma = 6.0;      // sqrt(kKernelCutoff)
inline constexpr double kTransmitStop = 1e-6;

struct RenderOutput {
    Image color;  // (H,W,3) in [0,1]
    Image alpha;  // (H,W,1) in [0,1]
    Image depth;  // (H,W,1) alpha-weighted mean view-space depth, diagnostics
};

struct RenderOutputD {
    int width = 0, height = 0;
    std::vector<double> color;  // (H,W,3)
    std::vector<double> alpha;  // (H,W)
    std::vector<double> depth;  // (H,W)
};

struct RenderGradients {
    std::vector<Vec3d> position;
    std::vector<Vec3d> scale;
    std::vector<Vec3d> color;
    std::vector<double> opacity;
    std::vector<Quatd> orientation;  // tangent to the unit sphere at q/|q|

    void resize_zero(size_t n) {
        position.assign(n, {0, 0, 0});
        scale.assign(n, {0, 0, 0});
        color.assign(n, {0, 0, 0});
        opacity.assign(n, 0.0);
        orientation.assign(n, {0, 0, 0, 0});
    }
};

namespace detail {

inline constexpr int kTileSize = 16;

struct SplatRecord {
    double u = 0, v = 0;              // projected center, pixel coords
    double l00 = 0, l01 = 0, l11 = 0; // inverse 2D covariance
    double depth = 0;                 // view-space z
    double radius = 0;                // binning radius (kBinningSigma sigmas)
    double opacity = 0;
    Vec3d color{0, 0, 0};
    Vec3d tcam{0, 0, 0};              // view-space position
    int index = -1;                   // into the cloud
};

struct ProjectedScene {
    std::vector<SplatRecord> records;           // front-to-back
    std::vector<std::vector<int>> tile_records; // record indices per 16x16 tile
    int tiles_x = 0, tiles_y = 0;
};

// Pixel index range whose centers fall inside [lo, hi].
inline void pixel_span(double lo, double hi, int limit, int& i0, int& i1) {
    i0 = std::max(0, static_cast<int>(std::floor(lo - 0.5)));
    i1 = std::min(limit - 1, static_cast<int>(std::ceil(hi - 0.5)));
}

inline ProjectedScene project_scene(const GaussianCloud& cloud, const CameraPose& pose) {
    const int n = static_cast<int>(cloud.size());
    const double f = pose.focal_px();
    const double cx = pose.width * 0.5, cy = pose.height * 0.5;
    const Mat3d w2c = pose.rotation.transposed();

    ProjectedScene scene;
    scene.tiles_x = (pose.width + kTileSize - 1) / kTileSize;
    scene.tiles_y = (pose.height + kTileSize - 1) / kTileSize;

    std::vector<SplatRecord> recs(n);
    std::vector<uint8_t> keep(n, 0);
    parallel_for(n, 512, [&](size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            const Gaussian& g = cloud.gaussians[i];
            if (g.opacity < kAlphaSkip) continue;  // alpha < skip at every pixel
            Vec3d t = w2c * (Vec3d(g.position) - pose.origin);
            if (t.z < kNearPlane) continue;
            Mat3d sc = w2c * covariance(g) * pose.rotation;  // W Sig W'
            double j00 = f / t.z, j02 = -f * t.x / (t.z * t.z);
            double j11 = -f / t.z, j12 = f * t.y / (t.z * t.z);
            // rows of J * Sig_cam
            double a00 = j00 * sc(0, 0) + j02 * sc(2, 0);
            double a01 = j00 * sc(0, 1) + j02 * sc(2, 1);
            double a02 = j00 * sc(0, 2) + j02 * sc(2, 2);
            double a11 = j11 * sc(1, 1) + j12 * sc(2, 1);
            double a12 = j11 * sc(1, 2) + j12 * sc(2, 2);
            double v00 = a00 * j00 + a02 * j02 + kCovarianceFloor;
            double v01 = a01 * j11 + a02 * j12;
            double v11 = a11 * j11 + a12 * j12 + kCovarianceFloor;
            double det = v00 * v11 - v01 * v01;
            double mid = 0.5 * (v00 + v11);
            double radius =
                kBinningSigma * std::sqrt(mid + std::sqrt(std::max(0.0, mid * mid - det)));
            double u = cx + f * t.x / t.z;
            double v = cy - f * t.y / t.z;
            if (u + radius < 0.5 || u - radius > pose.width - 0.5 || v + radius < 0.5 ||
                v - radius > pose.height - 0.5)
                continue;
            SplatRecord& r = recs[i];
            r.u = u;
            r.v = v;
            r.l00 = v11 / det;
            r.l01 = -v01 / det;
            r.l11 = v00 / det;
            r.depth = t.z;
            r.radius = radius;
            r.opacity = g.opacity;
            r.color = Vec3d(g.color);
            r.tcam = t;
            r.index = static_cast<int>(i);
            keep[i] = 1;
        }
    });

    scene.records.reserve(n);
    for (int i = 0; i < n; ++i)
        if (keep[i]) scene.records.push_back(recs[i]);
    std::sort(scene.records.begin(), scene.records.end(),
              [](const SplatRecord& a, const SplatRecord& b) {
                  if (a.depth != b.depth) return a.depth < b.depth;
                  return a.index < b.index;
              });

    scene.tile_records.assign(static_cast<size_t>(scene.tiles_x) * scene.tiles_y, {});
    for (int r = 0; r < static_cast<int>(scene.records.size()); ++r) {
        const SplatRecord& s = scene.records[r];
        int x0, x1, y0, y1;
        pixel_span(s.u - s.radius, s.u + s.radius, pose.width, x0, x1);
        pixel_span(s.v - s.radius, s.v + s.radius, pose.height, y0, y1);
        for (int ty = y0 / kTileSize; ty <= y1 / kTileSize; ++ty)
            for (int tx = x0 / kTileSize; tx <= x1 / kTileSize; ++tx)
                scene.tile_records[static_cast<size_t>(ty) * scene.tiles_x + tx].push_back(r);
    }
    return scene;
}

inline void check_background(const Vec3d& bg) {
    for (int c = 0; c < 3; ++c)
        if (!(bg[c] >= 0.0 && bg[c] <= 1.0))
            throw ValueError("render: background component out of [0,1]");
}

}  // namespace detail

inline RenderOutputD render_double(const GaussianCloud& cloud, const CameraPose& pose,
                                   const Vec3d& background) {
    validate_pose(pose);
    detail::check_background(background);
    const int W = pose.width, H = pose.height;
    RenderOutputD out;
    out.width = W;
    out.height = H;
    out.color.assign(static_cast<size_t>(H) * W * 3, 0.0);
    out.alpha.assign(static_cast<size_t>(H) * W, 0.0);
    out.depth.assign(static_cast<size_t>(H) * W, 0.0);

    detail::ProjectedScene scene = detail::project_scene(cloud, pose);

    parallel_for(scene.tiles_y, 1, [&](size_t band0, size_t band1) {
        for (size_t ty = band0; ty < band1; ++ty) {
            for (int tx = 0; tx < scene.tiles_x; ++tx) {
                const auto& list = scene.tile_records[ty * scene.tiles_x + tx];
                int y0 = static_cast<int>(ty) * detail::kTileSize;
                int y1 = std::min(H, y0 + detail::kTileSize);
                int x0 = tx * detail::kTileSize;
                int x1 = std::min(W, x0 + detail::kTileSize);
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) {
                        double px = x + 0.5, py = y + 0.5;
                        double T = 1.0, A = 0.0, D = 0.0;
                        Vec3d C{0, 0, 0};
                        for (int r : list) {
                            const detail::SplatRecord& s = scene.records[r];
                            double dx = px - s.u, dy = py - s.v;
                            double q = s.l00 * dx * dx + 2.0 * s.l01 * dx * dy +
                                       s.l11 * dy * dy;
                            if (q > kKernelCutoff) continue;
                            double alpha = std::min(s.opacity * std::exp(-0.5 * q), kAlphaMax);
                            if (alpha < kAlphaSkip) continue;
                            double w = alpha * T;
                            C += s.color * w;
                            A += w;
                            D += s.depth * w;
                            T *= 1.0 - alpha;
                            if (T < kTransmitStop) break;
                        }
                        size_t pix = static_cast<size_t>(y) * W + x;
                        for (int c = 0; c < 3; ++c)
                            out.color[pix * 3 + c] = C[c] + (1.0 - A) * background[c];
                        out.alpha[pix] = A;
                        out.depth[pix] = A > 1e-12 ? D / A : 0.0;
                    }
            }
        }
    });
    return out;
}

inline RenderOutput render(const GaussianCloud& cloud, const CameraPose& pose,
                           const Vec3f& background = {1.f, 1.f, 1.f}) {
    RenderOutputD r = render_double(cloud, pose, Vec3d(background));
    RenderOutput out;
    out.color = Image(r.width, r.height, 3);
    out.alpha = Image(r.width, r.height, 1);
    out.depth = Image(r.width, r.height, 1);
    for (size_t i = 0; i < r.color.size(); ++i) out.color.data[i] = static_cast<float>(r.color[i]);
    for (size_t i = 0; i < r.alpha.size(); ++i) {
        out.alpha.data[i] = static_cast<float>(r.alpha[i]);
        out.depth.data[i] = static_cast<float>(r.depth[i]);
    }
    return out;
}

inline std::vector<RenderOutput> render_rig(const GaussianCloud& cloud, const ViewRig& rig,
                                            const Vec3f& background = {1.f, 1.f, 1.f}) {
    std::vector<RenderOutput> out;
    out.reserve(rig.poses.size());
    for (const auto& pose : rig.poses) out.push_back(render(cloud, pose, background));
    return out;
}

// Gradients of a scalar loss w.r.t. all Gaussian parameters, given per-pixel
// upstream gradients for the color image and (optionally) the alpha mask.
// Runs its own forward to rebuild per-pixel contributor lists.
inline RenderGradients render_backward(const GaussianCloud& cloud, const CameraPose& pose,
                                       const Vec3d& background,
                                       const std::vector<double>& grad_color,
                                       const std::vector<double>& grad_alpha = {}) {
    validate_pose(pose);
    detail::check_background(background);
    const int W = pose.width, H = pose.height;
    if (grad_color.size() != static_cast<size_t>(H) * W * 3)
        throw ShapeError("render_backward: grad_color size " + std::to_string(grad_color.size()) +
                         ", expected " + std::to_string(static_cast<size_t>(H) * W * 3));
    if (!grad_alpha.empty() && grad_alpha.size() != static_cast<size_t>(H) * W)
        throw ShapeError("render_backward: grad_alpha size mismatch");

    RenderGradients grads;
    grads.resize_zero(cloud.size());
    detail::ProjectedScene scene = detail::project_scene(cloud, pose);
    const size_t nrec = scene.records.size();
    if (nrec == 0) return grads;

    // Per-record screen-space accumulators, 9 doubles each:
    // color rgb, opacity, mu_u, mu_v, L00, L01, L11. One block per tile row
    // ("band"), merged in band order so results do not depend on thread count.
    std::vector<std::vector<double>> band_acc(scene.tiles_y);

    struct Contrib {
        int rec;
        double alpha, T;
        bool clamped;
    };

    parallel_for(scene.tiles_y, 1, [&](size_t band0, size_t band1) {
        for (size_t ty = band0; ty < band1; ++ty) {
            std::vector<double>& acc = band_acc[ty];
            acc.assign(nrec * 9, 0.0);
            std::vector<Contrib> stack;
            stack.reserve(64);
            for (int tx = 0; tx < scene.tiles_x; ++tx) {
                const auto& list = scene.tile_records[ty * scene.tiles_x + tx];
                if (list.empty()) continue;
                int y0 = static_cast<int>(ty) * detail::kTileSize;
                int y1 = std::min(H, y0 + detail::kTileSize);
                int x0 = tx * detail::kTileSize;
                int x1 = std::min(W, x0 + detail::kTileSize);
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) {
                        double px = x + 0.5, py = y + 0.5;
                        stack.clear();
                        double T = 1.0;
                        for (int r : list) {
                            const detail::SplatRecord& s = scene.records[r];
                            double dx = px - s.u, dy = py - s.v;
                            double q = s.l00 * dx * dx + 2.0 * s.l01 * dx * dy +
                                       s.l11 * dy * dy;
                            if (q > kKernelCutoff) continue;
                            double raw = s.opacity * std::exp(-0.5 * q);
                            bool clamped = raw > kAlphaMax;
                            double alpha = clamped ? kAlphaMax : raw;
                            if (alpha < kAlphaSkip) continue;
                            stack.push_back({r, alpha, T, clamped});
                            T *= 1.0 - alpha;
                            if (T < kTransmitStop) break;
                        }
                        if (stack.empty()) continue;
                        size_t pix = static_cast<size_t>(y) * W + x;
                        Vec3d gC{grad_color[pix * 3], grad_color[pix * 3 + 1],
                                 grad_color[pix * 3 + 2]};
                        // color = C + (1 - A) * bg folds the background into
                        // an effective gradient on A.
                        double gA = (grad_alpha.empty() ? 0.0 : grad_alpha[pix]) -
                                    dot(gC, background);
                        Vec3d Sc{0, 0, 0};  // suffix of c_j alpha_j T_j
                        double Sa = 0.0;    // suffix of alpha_j T_j
                        for (size_t k = stack.size(); k-- > 0;) {
                            const Contrib& ct = stack[k];
                            const detail::SplatRecord& s = scene.records[ct.rec];
                            double om = 1.0 - ct.alpha;
                            double g_alpha =
                                dot(gC, s.color * ct.T - Sc / om) + gA * (ct.T - Sa / om);
                            double* a = &acc[static_cast<size_t>(ct.rec) * 9];
                            double w = ct.alpha * ct.T;
                            a[0] += gC.x * w;
                            a[1] += gC.y * w;
                            a[2] += gC.z * w;
                            Sc += s.color * w;
                            Sa += w;
                            if (ct.clamped) continue;
                            double dx = px - s.u, dy = py - s.v;
                            double q = s.l00 * dx * dx + 2.0 * s.l01 * dx * dy +
                                       s.l11 * dy * dy;
                            double G = std::exp(-0.5 * q);
                            a[3] += g_alpha * G;                     // opacity
                            double g_q = -0.5 * G * s.opacity * g_alpha;
                            double ldx = s.l00 * dx + s.l01 * dy;
                            double ldy = s.l01 * dx + s.l11 * dy;
                            a[4] += -2.0 * g_q * ldx;                // mu_u
                            a[5] += -2.0 * g_q * ldy;                // mu_v
                            a[6] += g_q * dx * dx;                   // L00
                            a[7] += g_q * dx * dy;                   // L01
                            a[8] += g_q * dy * dy;                   // L11
                        }
                    }
            }
        }
    });

    std::vector<double> acc(nrec * 9, 0.0);
    for (int b = 0; b < scene.tiles_y; ++b) {
        const auto& src = band_acc[b];
        for (size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
    }

    // Chain from screen space back to the 3D parameters, per record.
    const double f = pose.focal_px();
    const Mat3d w2c = pose.rotation.transposed();
    parallel_for(nrec, 64, [&](size_t begin, size_t end) {
        for (size_t r = begin; r < end; ++r) {
            const double* a = &acc[r * 9];
            bool any = false;
            for (int i = 0; i < 9 && !any; ++i) any = a[i] != 0.0;
            if (!any) continue;
            const detail::SplatRecord& s = scene.records[r];
            const Gaussian& g = cloud.gaussians[s.index];

            grads.color[s.index] += Vec3d{a[0], a[1], a[2]};
            grads.opacity[s.index] += a[3];

            // Recompute the projection pieces for this Gaussian.
            Quatd qraw(g.orientation);
            double qn = qraw.norm();
            Quatd qh = quat_normalized(qraw);
            Mat3d R3 = quat_to_matrix(qh);
            Vec3d sv(g.scale);
            Mat3d M = R3;  // columns scaled below: M = R3 * diag(s)
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) M(i, j) *= sv[j];
            Mat3d sig;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    sig(i, j) = M(i, 0) * M(j, 0) + M(i, 1) * M(j, 1) + M(i, 2) * M(j, 2);
            Mat3d sc = w2c * sig * pose.rotation;
            const Vec3d& t = s.tcam;
            double z = t.z, z2 = z * z, z3 = z2 * z;
            double j00 = f / z, j02 = -f * t.x / z2;
            double j11 = -f / z, j12 = f * t.y / z2;
            double a2[2][3] = {{j00 * sc(0, 0) + j02 * sc(2, 0), j00 * sc(0, 1) + j02 * sc(2, 1),
                                j00 * sc(0, 2) + j02 * sc(2, 2)},
                               {j11 * sc(1, 0) + j12 * sc(2, 0), j11 * sc(1, 1) + j12 * sc(2, 1),
                                j11 * sc(1, 2) + j12 * sc(2, 2)}};

            // gL -> gV = -Lam gL Lam
            double gl00 = a[6], gl01 = a[7], gl11 = a[8];
            double m00 = s.l00 * gl00 + s.l01 * gl01, m01 = s.l00 * gl01 + s.l01 * gl11;
            double m10 = s.l01 * gl00 + s.l11 * gl01, m11 = s.l01 * gl01 + s.l11 * gl11;
            double gv00 = -(m00 * s.l00 + m01 * s.l01);
            double gv01 = -(m00 * s.l01 + m01 * s.l11);
            double gv11 = -(m10 * s.l01 + m11 * s.l11);

            // gV -> g_Sig_cam = J' gV J, with J columns (j00,0), (0,j11), (j02,j12)
            double jc[3][2] = {{j00, 0.0}, {0.0, j11}, {j02, j12}};
            Mat3d gsc;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    gsc(i, j) = jc[i][0] * (gv00 * jc[j][0] + gv01 * jc[j][1]) +
                                jc[i][1] * (gv01 * jc[j][0] + gv11 * jc[j][1]);

            // gV -> gJ = 2 gV (J Sig_cam)
            double gJ00 = 2.0 * (gv00 * a2[0][0] + gv01 * a2[1][0]);
            double gJ02 = 2.0 * (gv00 * a2[0][2] + gv01 * a2[1][2]);
            double gJ11 = 2.0 * (gv01 * a2[0][1] + gv11 * a2[1][1]);
            double gJ12 = 2.0 * (gv01 * a2[0][2] + gv11 * a2[1][2]);

            // screen center + Jacobian entries -> view-space position
            double gu = a[4], gv = a[5];
            Vec3d gt;
            gt.x = gu * (f / z) + gJ02 * (-f / z2);
            gt.y = gv * (-f / z) + gJ12 * (f / z2);
            gt.z = gu * (-f * t.x / z2) + gv * (f * t.y / z2) + gJ00 * (-f / z2) +
                   gJ11 * (f / z2) + gJ02 * (2.0 * f * t.x / z3) + gJ12 * (-2.0 * f * t.y / z3);
            grads.position[s.index] += pose.rotation * gt;

            // g_Sig_cam -> g_Sig (world) -> gM = 2 g_Sig M
            Mat3d gsig = pose.rotation * gsc * w2c;
            Mat3d gM;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    gM(i, j) = 2.0 * (gsig(i, 0) * M(0, j) + gsig(i, 1) * M(1, j) +
                                      gsig(i, 2) * M(2, j));

            Vec3d gs{0, 0, 0};
            Mat3d gR;
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) {
                    gs[j] += gM(i, j) * R3(i, j);
                    gR(i, j) = gM(i, j) * sv[j];
                }
            grads.scale[s.index] += gs;

            // gR -> unit quaternion, then project to the tangent space and
            // undo the internal normalization.
            double w = qh.w, x = qh.x, y = qh.y, zz = qh.z;
            double dqw = 2.0 * (gR(0, 1) * -zz + gR(0, 2) * y + gR(1, 0) * zz + gR(1, 2) * -x +
                                gR(2, 0) * -y + gR(2, 1) * x);
            double dqx = 2.0 * (gR(0, 1) * y + gR(0, 2) * zz + gR(1, 0) * y +
                                gR(1, 1) * -2.0 * x + gR(1, 2) * -w + gR(2, 0) * zz +
                                gR(2, 1) * w + gR(2, 2) * -2.0 * x);
            double dqy = 2.0 * (gR(0, 0) * -2.0 * y + gR(0, 1) * x + gR(0, 2) * w + gR(1, 0) * x +
                                gR(1, 2) * zz + gR(2, 0) * -w + gR(2, 1) * zz +
                                gR(2, 2) * -2.0 * y);
            double dqz = 2.0 * (gR(0, 0) * -2.0 * zz + gR(0, 1) * -w + gR(0, 2) * x +
                                gR(1, 0) * w + gR(1, 1) * -2.0 * zz + gR(1, 2) * y +
                                gR(2, 0) * x + gR(2, 1) * y);
            Quatd gq{dqw, dqx, dqy, dqz};
            double gdq = gq.w * qh.w + gq.x * qh.x + gq.y * qh.y + gq.z * qh.z;
            double inv = qn > 1e-12 ? 1.0 / qn : 0.0;
            Quatd& go = grads.orientation[s.index];
            go.w += (gq.w - gdq * qh.w) * inv;
            go.x += (gq.x - gdq * qh.x) * inv;
            go.y += (gq.y - gdq * qh.y) * inv;
            go.z += (gq.z - gdq * qh.z) * inv;
        }
    });
    return grads;
}

}  // namespace dsplats
