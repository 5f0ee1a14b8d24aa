#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dsplats/camera.hpp"
#include "dsplats/common.hpp"
#include "dsplats/gaussians.hpp"
#include "dsplats/image.hpp"
#include "dsplats/splat_renderer.hpp"

namespace dsplats {

// Procedural ground truth: compositions of surface-sampled primitives. The
// generated object is itself a Gaussian cloud, so every dataset image is a
// render of a known cloud and pipeline tests have an exact oracle.

enum class PrimitiveKind { Sphere, Box, Capsule };

struct PrimitiveSpec {
    PrimitiveKind kind = PrimitiveKind::Sphere;
    Vec3f color{0.8f, 0.8f, 0.8f};
    Vec3d position{0, 0, 0};
    // Sphere: (r, r, r). Box: half extents. Capsule: (r, r, half_length).
    Vec3d scale{0.3, 0.3, 0.3};
    Quatd rotation{1, 0, 0, 0};
    int count = 200;
};

struct SceneSpec {
    uint64_t seed = 0;
    std::vector<PrimitiveSpec> primitives;
};

namespace detail {

inline Vec3d sample_unit_sphere(Rng& rng) {
    while (true) {
        Vec3d v{rng.normal(), rng.normal(), rng.normal()};
        double n = norm(v);
        if (n > 1e-9) return v / n;
    }
}

// Rotation carrying +Z onto `n`, then a random twist about `n` so surface
// tangent frames vary.
inline Quatd orient_to_normal(const Vec3d& n, Rng& rng) {
    Vec3d z{0, 0, 1};
    double c = dot(z, n);
    Quatd align;
    if (c > 1.0 - 1e-12) {
        align = {1, 0, 0, 0};
    } else if (c < -1.0 + 1e-12) {
        align = quat_from_axis_angle({1, 0, 0}, kPi);
    } else {
        align = quat_from_axis_angle(normalized(cross(z, n)), std::acos(std::clamp(c, -1.0, 1.0)));
    }
    Quatd twist = quat_from_axis_angle(n, rng.uniform() * 2.0 * kPi);
    return quat_normalized(quat_multiply(twist, align));
}

struct SurfaceSample {
    Vec3d point;   // in primitive-local frame, before rotation/translation
    Vec3d normal;  // outward, local frame
};

inline SurfaceSample sample_surface(const PrimitiveSpec& p, Rng& rng) {
    SurfaceSample s;
    switch (p.kind) {
        case PrimitiveKind::Sphere: {
            Vec3d d = sample_unit_sphere(rng);
            s.point = d * p.scale.x;
            s.normal = d;
            break;
        }
        case PrimitiveKind::Box: {
            const Vec3d h = p.scale;
            double areas[3] = {h.y * h.z, h.x * h.z, h.x * h.y};  // x, y, z face pairs
            double total = 2 * (areas[0] + areas[1] + areas[2]);
            double pick = rng.uniform() * total;
            int axis = 0;
            for (; axis < 2; ++axis) {
                if (pick < 2 * areas[axis]) break;
                pick -= 2 * areas[axis];
            }
            double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
            Vec3d pt{rng.uniform(-h.x, h.x), rng.uniform(-h.y, h.y), rng.uniform(-h.z, h.z)};
            pt[axis] = sign * h[axis];
            s.point = pt;
            s.normal = {0, 0, 0};
            s.normal[axis] = sign;
            break;
        }
        case PrimitiveKind::Capsule: {
            const double r = p.scale.x, hl = p.scale.z;
            double side_area = 2.0 * kPi * r * (2.0 * hl);
            double cap_area = 4.0 * kPi * r * r;
            if (rng.uniform() * (side_area + cap_area) < side_area) {
                double ang = rng.uniform() * 2.0 * kPi;
                double z = rng.uniform(-hl, hl);
                Vec3d radial{std::cos(ang), std::sin(ang), 0};
                s.point = radial * r + Vec3d{0, 0, z};
                s.normal = radial;
            } else {
                Vec3d d = sample_unit_sphere(rng);
                double cz = d.z >= 0 ? hl : -hl;
                s.point = d * r + Vec3d{0, 0, cz};
                s.normal = d;
            }
            break;
        }
    }
    return s;
}

inline double surface_area(const PrimitiveSpec& p) {
    switch (p.kind) {
        case PrimitiveKind::Sphere:
            return 4.0 * kPi * p.scale.x * p.scale.x;
        case PrimitiveKind::Box:
            return 8.0 * (p.scale.x * p.scale.y + p.scale.x * p.scale.z + p.scale.y * p.scale.z);
        case PrimitiveKind::Capsule:
            return 2.0 * kPi * p.scale.x * (2.0 * p.scale.z) + 4.0 * kPi * p.scale.x * p.scale.x;
    }
    return 0;
}

// Circumscribed radius, used to keep the composed object inside [-1,1]^3.
inline double bounding_radius(const PrimitiveSpec& p) {
    switch (p.kind) {
        case PrimitiveKind::Sphere:
            return p.scale.x;
        case PrimitiveKind::Box:
            return norm(p.scale);
        case PrimitiveKind::Capsule:
            return p.scale.x + p.scale.z;
    }
    return 0;
}

}  // namespace detail

// Surfel-like Gaussians on the primitive surface: tangential extent sized by
// surface area per sample, thin along the outward normal.
inline void sample_primitive_cloud(const PrimitiveSpec& p, Rng& rng, GaussianCloud& out) {
    Mat3d rot = quat_to_matrix(quat_normalized(p.rotation));
    double sigma_t =
        std::max(0.005, 0.9 * std::sqrt(detail::surface_area(p) / std::max(1, p.count)));
    double sigma_n = std::max(0.005, 0.15 * sigma_t);
    for (int i = 0; i < p.count; ++i) {
        detail::SurfaceSample s = detail::sample_surface(p, rng);
        Quatd local = detail::orient_to_normal(s.normal, rng);
        Quatd world = quat_normalized(quat_multiply(matrix_to_quat(rot), local));
        Gaussian g;
        Vec3d pos = rot * s.point + p.position;
        g.position = {static_cast<float>(pos.x), static_cast<float>(pos.y),
                      static_cast<float>(pos.z)};
        g.scale = {static_cast<float>(sigma_t), static_cast<float>(sigma_t),
                   static_cast<float>(sigma_n)};
        g.orientation = {static_cast<float>(world.w), static_cast<float>(world.x),
                         static_cast<float>(world.y), static_cast<float>(world.z)};
        float jr = static_cast<float>(rng.uniform(-0.05, 0.05));
        float jg = static_cast<float>(rng.uniform(-0.05, 0.05));
        float jb = static_cast<float>(rng.uniform(-0.05, 0.05));
        g.color = {std::clamp(p.color.x + jr, 0.f, 1.f), std::clamp(p.color.y + jg, 0.f, 1.f),
                   std::clamp(p.color.z + jb, 0.f, 1.f)};
        g.opacity = static_cast<float>(rng.uniform(0.6, 0.95));
        out.gaussians.push_back(g);
    }
}

inline std::pair<SceneSpec, GaussianCloud> generate_scene(uint64_t seed) {
    Rng rng(derive_seed(seed, 0x5ce9e));
    SceneSpec spec;
    spec.seed = seed;
    int n = static_cast<int>(rng.uniform_int(1, 4));
    for (int i = 0; i < n; ++i) {
        PrimitiveSpec p;
        p.kind = static_cast<PrimitiveKind>(rng.uniform_int(0, 2));
        switch (p.kind) {
            case PrimitiveKind::Sphere: {
                double r = rng.uniform(0.1, 0.5);
                p.scale = {r, r, r};
                break;
            }
            case PrimitiveKind::Box:
                p.scale = {rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5), rng.uniform(0.1, 0.5)};
                break;
            case PrimitiveKind::Capsule: {
                double r = rng.uniform(0.1, 0.25);
                p.scale = {r, r, rng.uniform(0.1, 0.35)};
                break;
            }
        }
        p.rotation = quat_from_axis_angle(detail::sample_unit_sphere(rng),
                                          rng.uniform() * 2.0 * kPi);
        double bound = detail::bounding_radius(p);
        double m = std::min(0.6, 1.0 - bound);
        p.position = {rng.uniform(-m, m), rng.uniform(-m, m), rng.uniform(-m, m)};
        p.color = {static_cast<float>(rng.uniform(0.1, 0.95)),
                   static_cast<float>(rng.uniform(0.1, 0.95)),
                   static_cast<float>(rng.uniform(0.1, 0.95))};
        p.count = static_cast<int>(rng.uniform_int(50, 400));
        spec.primitives.push_back(p);
    }
    GaussianCloud cloud;
    for (const auto& p : spec.primitives) sample_primitive_cloud(p, rng, cloud);
    return {spec, cloud};
}

// ---------------------------------------------------------------------------
// Dataset on disk: manifest + per-object directory of PNGs, poses, cloud.
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string id;
    uint64_t seed = 0;
    std::string checksum;  // fnv1a-64 over cloud then images, hex
};

struct DatasetManifest {
    int views = 6;
    int unseen = 2;
    int width = 128;
    int height = 128;
    uint64_t seed = 0;
    std::vector<ManifestEntry> entries;
};

namespace detail {

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t file_fnv1a64(const std::string& path, uint64_t h) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checksum: cannot open " + path);
    char buf[65536];
    while (f.read(buf, sizeof buf) || f.gcount() > 0)
        h = fnv1a64(buf, static_cast<size_t>(f.gcount()), h);
    return h;
}

inline std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

}  // namespace detail

inline std::string object_id(int index) {
    std::ostringstream os;
    os << "obj_" << std::setw(4) << std::setfill('0') << index;
    return os.str();
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("save_manifest: cannot open " + path);
    f << "# dsplats dataset v1\n";
    f << "views=" << m.views << " unseen=" << m.unseen << " width=" << m.width
      << " height=" << m.height << " seed=" << m.seed << "\n";
    for (const auto& e : m.entries)
        f << "object id=" << e.id << " seed=" << e.seed << " checksum=" << e.checksum << "\n";
    if (!f) throw IoError("save_manifest: write failed for " + path);
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("load_manifest: cannot open " + path);
    DatasetManifest m;
    std::string line;
    if (!std::getline(f, line) || line != "# dsplats dataset v1")
        throw IoError("load_manifest: bad header in " + path);
    if (!std::getline(f, line)) throw IoError("load_manifest: truncated " + path);
    if (std::sscanf(line.c_str(), "views=%d unseen=%d width=%d height=%d seed=%llu", &m.views,
                    &m.unseen, &m.width, &m.height,
                    reinterpret_cast<unsigned long long*>(&m.seed)) != 5)
        throw IoError("load_manifest: bad global line in " + path);
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        ManifestEntry e;
        char id[128], sum[64];
        unsigned long long seed;
        if (std::sscanf(line.c_str(), "object id=%127s seed=%llu checksum=%63s", id, &seed,
                        sum) != 3)
            throw IoError("load_manifest: bad object line in " + path);
        e.id = id;
        e.seed = seed;
        e.checksum = sum;
        m.entries.push_back(e);
    }
    return m;
}

inline DatasetManifest build_dataset(int n_objects, const ViewRig& rig, int unseen,
                                     const std::string& out_dir, uint64_t seed) {
    if (n_objects < 1) throw ValueError("build_dataset: need at least one object");
    if (unseen < 0) throw ValueError("build_dataset: negative unseen count");
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("build_dataset: cannot create " + out_dir + ": " + ec.message());

    DatasetManifest manifest;
    manifest.views = rig.views();
    manifest.unseen = unseen;
    manifest.width = rig.poses.at(0).width;
    manifest.height = rig.poses.at(0).height;
    manifest.seed = seed;

    for (int i = 0; i < n_objects; ++i) {
        uint64_t obj_seed = derive_seed(seed, static_cast<uint64_t>(i));
        auto [spec, cloud] = generate_scene(obj_seed);
        std::string id = object_id(i);
        std::string dir = out_dir + "/" + id;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("build_dataset: cannot create " + dir + ": " + ec.message());

        save_cloud(cloud, dir + "/cloud.dspl");

        std::vector<OrbitPose> rig_orbits;
        for (int vi = 0; vi < rig.views(); ++vi) rig_orbits.push_back(orbit_pose_of_rig_view(rig, vi));
        save_pose_file(rig_orbits, dir + "/rig_poses.txt");

        Rng pose_rng(derive_seed(obj_seed, 0xA05E));
        std::vector<OrbitPose> unseen_orbits;
        for (int u = 0; u < unseen; ++u)
            unseen_orbits.push_back(
                sample_sphere_pose(pose_rng, kRigRadius, manifest.width, manifest.height));
        save_pose_file(unseen_orbits, dir + "/unseen_poses.txt");

        uint64_t sum = detail::file_fnv1a64(dir + "/cloud.dspl", 0xcbf29ce484222325ull);
        char name[32];
        for (int vi = 0; vi < rig.views(); ++vi) {
            std::snprintf(name, sizeof name, "/rig_%02d.png", vi);
            save_png(render(cloud, rig.poses[vi]).color, dir + name);
            sum = detail::file_fnv1a64(dir + name, sum);
        }
        for (int u = 0; u < unseen; ++u) {
            std::snprintf(name, sizeof name, "/unseen_%02d.png", u);
            save_png(render(cloud, unseen_orbits[u].to_camera_pose()).color, dir + name);
            sum = detail::file_fnv1a64(dir + name, sum);
        }

        ManifestEntry e;
        e.id = id;
        e.seed = obj_seed;
        e.checksum = detail::hex64(sum);
        manifest.entries.push_back(e);
    }
    save_manifest(manifest, out_dir + "/manifest.txt");
    return manifest;
}

}  // namespace dsplats
