#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dsplats/common.hpp"
#include "dsplats/vec.hpp"

namespace dsplats {

// Camera-to-world pose. Rotation columns are [right, up, forward] with the
// forward axis pointing from the camera into the scene. World up is +Z.
struct CameraPose {
    Vec3d origin{0, 0, 0};
    Mat3d rotation = Mat3d::identity();
    double fov_deg = 50.0;  // vertical field of view
    int width = 128;
    int height = 128;

    Vec3d right() const { return rotation.col(0); }
    Vec3d up() const { return rotation.col(1); }
    Vec3d forward() const { return rotation.col(2); }

    // Focal length in pixels for the pinhole model (square pixels,
    // principal point at the image center).
    double focal_px() const { return (height / 2.0) / std::tan(deg_to_rad(fov_deg) / 2.0); }
};

inline bool rotation_is_valid(const Mat3d& r, double tol = 1e-6) {
    Mat3d rtr = r.transposed() * r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double expect = i == j ? 1.0 : 0.0;
            if (std::abs(rtr(i, j) - expect) > tol) return false;
        }
    return std::abs(r.det() - 1.0) <= tol;
}

inline void validate_pose(const CameraPose& pose) {
    if (!(pose.fov_deg > 0.0 && pose.fov_deg < 180.0))
        throw ValueError("camera: fov_deg out of (0,180): " + std::to_string(pose.fov_deg));
    if (pose.width < 1 || pose.height < 1)
        throw ValueError("camera: non-positive image size");
    if (!rotation_is_valid(pose.rotation))
        throw ValueError("camera: rotation is not a proper orthonormal matrix");
}

// Look-at pose with world +Z up; when the view direction is parallel to +Z
// the up hint falls back to +X.
inline CameraPose look_at(const Vec3d& origin, const Vec3d& target, double fov_deg, int width,
                          int height) {
    Vec3d f = target - origin;
    double n = norm(f);
    if (n < 1e-12) throw ValueError("look_at: origin coincides with target");
    f = f / n;
    Vec3d up_hint{0, 0, 1};
    if (std::abs(dot(f, up_hint)) > 1.0 - 1e-9) up_hint = {1, 0, 0};
    Vec3d r = normalized(cross(up_hint, f));
    Vec3d u = cross(f, r);
    CameraPose pose;
    pose.origin = origin;
    pose.rotation = Mat3d::from_columns(r, u, f);
    pose.fov_deg = fov_deg;
    pose.width = width;
    pose.height = height;
    return pose;
}

// Orbit position with world +Z up: azimuth in the XY plane, elevation above it.
inline Vec3d spherical_to_cartesian(double azimuth_deg, double elevation_deg, double radius) {
    double az = deg_to_rad(azimuth_deg), el = deg_to_rad(elevation_deg);
    return {radius * std::cos(el) * std::cos(az), radius * std::cos(el) * std::sin(az),
            radius * std::sin(el)};
}

struct ViewRig {
    std::vector<CameraPose> poses;
    std::vector<double> azimuths_deg;
    std::vector<double> elevations_deg;
    double radius = 1.5;

    int views() const { return static_cast<int>(poses.size()); }
};

inline constexpr double kRigRadius = 1.5;
inline constexpr double kRigFovDeg = 50.0;
inline constexpr double kRigAzimuthsDeg[6] = {30, 90, 150, 210, 270, 330};
inline constexpr double kRigElevationsDeg[6] = {20, -10, 20, -10, 20, -10};

// The fixed training rig: v poses orbiting the origin at radius 1.5, fov 50°.
// v < 6 takes the first v azimuth/elevation entries.
inline ViewRig rig_default(int v, int width = 128, int height = 128) {
    if (v < 1 || v > 6) throw ValueError("rig_default: view count must be in [1,6], got " +
                                         std::to_string(v));
    ViewRig rig;
    rig.radius = kRigRadius;
    for (int i = 0; i < v; ++i) {
        double az = kRigAzimuthsDeg[i], el = kRigElevationsDeg[i];
        rig.azimuths_deg.push_back(az);
        rig.elevations_deg.push_back(el);
        rig.poses.push_back(look_at(spherical_to_cartesian(az, el, kRigRadius), {0, 0, 0},
                                    kRigFovDeg, width, height));
    }
    return rig;
}

// Canonical target of relative-pose normalization: the rig's first view.
inline CameraPose canonical_first_pose(int width = 128, int height = 128) {
    return look_at(spherical_to_cartesian(kRigAzimuthsDeg[0], kRigElevationsDeg[0], kRigRadius),
                   {0, 0, 0}, kRigFovDeg, width, height);
}

// Applies the rigid world transform that carries poses[0] onto the canonical
// first-view pose to the whole list. Invariant under any global rigid motion
// of the input and idempotent.
inline std::vector<CameraPose> normalize_relative(const std::vector<CameraPose>& poses) {
    if (poses.empty()) throw ValueError("normalize_relative: empty pose list");
    for (const auto& p : poses) validate_pose(p);
    CameraPose canon = canonical_first_pose(poses[0].width, poses[0].height);
    canon.fov_deg = poses[0].fov_deg;
    Mat3d g = canon.rotation * poses[0].rotation.transposed();
    Vec3d t = canon.origin - g * poses[0].origin;
    std::vector<CameraPose> out;
    out.reserve(poses.size());
    for (const auto& p : poses) {
        CameraPose q = p;
        q.rotation = g * p.rotation;
        q.origin = g * p.origin + t;
        out.push_back(q);
    }
    return out;
}

// Per-pixel Plücker ray encoding: channels 0-2 the unit direction d, channels
// 3-5 the moment origin × d. The camera origin is kept so downsampling can
// rebuild exact moments.
struct RayMap {
    int width = 0;
    int height = 0;
    Vec3d origin{0, 0, 0};
    std::vector<float> data;  // (height, width, 6)

    RayMap() = default;
    RayMap(int w, int h) : width(w), height(h), data(static_cast<size_t>(w) * h * 6, 0.f) {}

    float* pixel(int y, int x) { return &data[(static_cast<size_t>(y) * width + x) * 6]; }
    const float* pixel(int y, int x) const {
        return &data[(static_cast<size_t>(y) * width + x) * 6];
    }

    Vec3d direction(int y, int x) const {
        const float* p = pixel(y, x);
        return {p[0], p[1], p[2]};
    }
    Vec3d moment(int y, int x) const {
        const float* p = pixel(y, x);
        return {p[3], p[4], p[5]};
    }
};

// Unit ray direction through a pixel center, in world coordinates.
inline Vec3d pixel_ray_direction(const CameraPose& pose, double px, double py) {
    double f = pose.focal_px();
    double xc = (px - pose.width / 2.0) / f;
    double yc = (pose.height / 2.0 - py) / f;  // image y grows downward
    return normalized(pose.rotation * Vec3d{xc, yc, 1.0});
}

inline RayMap plucker_map(const CameraPose& pose) {
    validate_pose(pose);
    RayMap map(pose.width, pose.height);
    map.origin = pose.origin;
    for (int y = 0; y < pose.height; ++y)
        for (int x = 0; x < pose.width; ++x) {
            Vec3d d = pixel_ray_direction(pose, x + 0.5, y + 0.5);
            Vec3d m = cross(pose.origin, d);
            float* p = map.pixel(y, x);
            p[0] = static_cast<float>(d.x);
            p[1] = static_cast<float>(d.y);
            p[2] = static_cast<float>(d.z);
            p[3] = static_cast<float>(m.x);
            p[4] = static_cast<float>(m.y);
            p[5] = static_cast<float>(m.z);
        }
    return map;
}

// Area-average pooling of directions, re-normalized; moments are rebuilt as
// origin × d so the orthogonality invariant holds exactly.
inline RayMap downsample_raymap(const RayMap& map, int factor) {
    if (factor < 1) throw ValueError("downsample_raymap: factor must be >= 1");
    if (map.width % factor || map.height % factor)
        throw ShapeError("downsample_raymap: factor " + std::to_string(factor) +
                         " does not divide " + std::to_string(map.width) + "x" +
                         std::to_string(map.height));
    RayMap out(map.width / factor, map.height / factor);
    out.origin = map.origin;
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x) {
            Vec3d sum{0, 0, 0};
            for (int dy = 0; dy < factor; ++dy)
                for (int dx = 0; dx < factor; ++dx)
                    sum += map.direction(y * factor + dy, x * factor + dx);
            Vec3d d = normalized(sum / static_cast<double>(factor * factor));
            Vec3d m = cross(map.origin, d);
            float* p = out.pixel(y, x);
            p[0] = static_cast<float>(d.x);
            p[1] = static_cast<float>(d.y);
            p[2] = static_cast<float>(d.z);
            p[3] = static_cast<float>(m.x);
            p[4] = static_cast<float>(m.y);
            p[5] = static_cast<float>(m.z);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Pose files: one "view" record per line with orbital parameters.
//   view azimuth_deg=30 elevation_deg=20 radius=1.5 fov_deg=50 width=128 height=128
// ---------------------------------------------------------------------------

struct OrbitPose {
    double azimuth_deg = 0;
    double elevation_deg = 0;
    double radius = kRigRadius;
    double fov_deg = kRigFovDeg;
    int width = 128;
    int height = 128;

    CameraPose to_camera_pose() const {
        return look_at(spherical_to_cartesian(azimuth_deg, elevation_deg, radius), {0, 0, 0},
                       fov_deg, width, height);
    }
};

inline OrbitPose orbit_pose_of_rig_view(const ViewRig& rig, int i) {
    OrbitPose o;
    o.azimuth_deg = rig.azimuths_deg[i];
    o.elevation_deg = rig.elevations_deg[i];
    o.radius = rig.radius;
    o.fov_deg = rig.poses[i].fov_deg;
    o.width = rig.poses[i].width;
    o.height = rig.poses[i].height;
    return o;
}

// Uniform over the sphere: azimuth uniform, sin(elevation) uniform.
inline OrbitPose sample_sphere_pose(Rng& rng, double radius = kRigRadius, int width = 128,
                                    int height = 128) {
    OrbitPose o;
    o.azimuth_deg = rng.uniform() * 360.0;
    o.elevation_deg = rad_to_deg(std::asin(rng.uniform() * 2.0 - 1.0));
    o.radius = radius;
    o.width = width;
    o.height = height;
    return o;
}

inline void save_pose_file(const std::vector<OrbitPose>& poses, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("save_pose_file: cannot open " + path);
    f << "# dsplats poses v1\n";
    f.precision(17);
    for (const auto& p : poses) {
        f << "view azimuth_deg=" << p.azimuth_deg << " elevation_deg=" << p.elevation_deg
          << " radius=" << p.radius << " fov_deg=" << p.fov_deg << " width=" << p.width
          << " height=" << p.height << "\n";
    }
    if (!f) throw IoError("save_pose_file: write failed for " + path);
}

inline std::vector<OrbitPose> load_pose_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_pose_file: cannot open " + path);
    std::vector<OrbitPose> poses;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        std::string tag;
        is >> tag;
        if (tag != "view") throw IoError("load_pose_file: unexpected record '" + tag + "' in " + path);
        OrbitPose p;
        std::string kv;
        while (is >> kv) {
            auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw IoError("load_pose_file: malformed field '" + kv + "' in " + path);
            std::string key = kv.substr(0, eq);
            double val = std::stod(kv.substr(eq + 1));
            if (key == "azimuth_deg") p.azimuth_deg = val;
            else if (key == "elevation_deg") p.elevation_deg = val;
            else if (key == "radius") p.radius = val;
            else if (key == "fov_deg") p.fov_deg = val;
            else if (key == "width") p.width = static_cast<int>(val);
            else if (key == "height") p.height = static_cast<int>(val);
            else throw IoError("load_pose_file: unknown field '" + key + "' in " + path);
        }
        poses.push_back(p);
    }
    if (poses.empty()) throw IoError("load_pose_file: no view records in " + path);
    return poses;
}

}  // namespace dsplats
