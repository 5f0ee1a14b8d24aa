#pragma once

#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "dsplats/camera.hpp"
#include "dsplats/common.hpp"
#include "dsplats/denoiser.hpp"
#include "dsplats/diffusion.hpp"
#include "dsplats/image.hpp"
#include "dsplats/splat_renderer.hpp"
#include "dsplats/synthetic_data.hpp"

namespace dsplats {

// PSNR on unit dynamic range; identical images return +infinity. Callers that
// aggregate must exclude infinite pairs (see EvalReport).
inline double psnr(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw_shape_mismatch("psnr", {a.height, a.width, a.channels},
                             {b.height, b.width, b.channels});
    double mse = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

namespace detail {

inline const std::array<double, 64>& ssim_window() {
    static const std::array<double, 64> w = [] {
        std::array<double, 64> v{};
        double sum = 0, sigma = 1.5;
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                double dy = y - 3.5, dx = x - 3.5;
                v[y * 8 + x] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
                sum += v[y * 8 + x];
            }
        for (auto& e : v) e /= sum;
        return v;
    }();
    return w;
}

}  // namespace detail

// Mean SSIM over all 8x8 windows (stride 1, Gaussian weights sigma=1.5) and
// channels, constants C1=(0.01)^2 and C2=(0.03)^2 on unit range.
inline double ssim(const Image& a, const Image& b) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw_shape_mismatch("ssim", {a.height, a.width, a.channels},
                             {b.height, b.width, b.channels});
    if (a.width < 8 || a.height < 8)
        throw ValueError("ssim: image smaller than the 8x8 window");
    const auto& w = detail::ssim_window();
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    double total = 0;
    size_t windows = 0;
    for (int c = 0; c < a.channels; ++c)
        for (int y = 0; y + 8 <= a.height; ++y)
            for (int x = 0; x + 8 <= a.width; ++x) {
                double mx = 0, my = 0;
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j) {
                        double wij = w[i * 8 + j];
                        mx += wij * a.at(y + i, x + j, c);
                        my += wij * b.at(y + i, x + j, c);
                    }
                double vx = 0, vy = 0, cov = 0;
                for (int i = 0; i < 8; ++i)
                    for (int j = 0; j < 8; ++j) {
                        double wij = w[i * 8 + j];
                        double da = a.at(y + i, x + j, c) - mx;
                        double db = b.at(y + i, x + j, c) - my;
                        vx += wij * da * da;
                        vy += wij * db * db;
                        cov += wij * da * db;
                    }
                total += ((2 * mx * my + C1) * (2 * cov + C2)) /
                         ((mx * mx + my * my + C1) * (vx + vy + C2));
                ++windows;
            }
    return total / static_cast<double>(windows);
}

// ---------------------------------------------------------------------------
// Evaluation: condition on rig view 0, sample, score the remaining rig views
// plus the dataset's unseen views against renders of the ground-truth cloud.
// ---------------------------------------------------------------------------

struct ViewScore {
    std::string view;
    double psnr_db = 0;  // +inf for identical pairs
    double ssim_val = 0;
};

struct ObjectScore {
    std::string id;
    std::vector<ViewScore> views;
};

struct EvalReport {
    std::string checkpoint_id;
    std::string config_snapshot;
    uint64_t seed = 0;
    int sample_steps = 0;
    std::vector<ObjectScore> objects;
    double mean_psnr = 0;     // over finite pairs
    size_t psnr_pairs = 0;    // finite pairs included
    size_t psnr_excluded = 0; // identical pairs excluded from the mean
    double mean_ssim = 0;
};

inline EvalReport evaluate(const DenoiserParams& params, const std::string& checkpoint_id,
                           const std::string& dataset_dir, int sample_steps, uint64_t seed,
                           int limit_objects = 0) {
    DatasetManifest manifest = load_manifest(dataset_dir + "/manifest.txt");
    NoiseSchedule sched = cosine_schedule();
    NetDenoisingStep step(params);

    EvalReport rep;
    rep.checkpoint_id = checkpoint_id;
    rep.config_snapshot = serialize_config(params.config);
    rep.seed = seed;
    rep.sample_steps = sample_steps;

    double psnr_sum = 0, ssim_sum = 0;
    size_t ssim_count = 0;
    int n = static_cast<int>(manifest.entries.size());
    if (limit_objects > 0 && limit_objects < n) n = limit_objects;
    for (int oi = 0; oi < n; ++oi) {
        const ManifestEntry& entry = manifest.entries[oi];
        std::string dir = dataset_dir + "/" + entry.id;
        GaussianCloud cloud;
        std::vector<OrbitPose> rig_orbits, unseen_orbits;
        try {
            cloud = load_cloud(dir + "/cloud.dspl");
            rig_orbits = load_pose_file(dir + "/rig_poses.txt");
            unseen_orbits = load_pose_file(dir + "/unseen_poses.txt");
        } catch (const Error& e) {
            throw IoError("evaluate: object " + entry.id + ": " + e.what());
        }
        ViewRig rig;
        rig.radius = rig_orbits.at(0).radius;
        for (const auto& o : rig_orbits) {
            rig.poses.push_back(o.to_camera_pose());
            rig.azimuths_deg.push_back(o.azimuth_deg);
            rig.elevations_deg.push_back(o.elevation_deg);
        }

        Image input = render(cloud, rig.poses[0]).color;
        SampleResult sr = sample(input, rig, step, sched, sample_steps,
                                 derive_seed(seed, static_cast<uint64_t>(oi)));

        ObjectScore os;
        os.id = entry.id;
        auto score = [&](const std::string& name, const Image& got, const Image& want) {
            ViewScore vs;
            vs.view = name;
            vs.psnr_db = psnr(got, want);
            vs.ssim_val = ssim(got, want);
            if (std::isinf(vs.psnr_db)) {
                ++rep.psnr_excluded;
            } else {
                psnr_sum += vs.psnr_db;
                ++rep.psnr_pairs;
            }
            ssim_sum += vs.ssim_val;
            ++ssim_count;
            os.views.push_back(vs);
        };
        for (size_t vi = 1; vi < rig.poses.size(); ++vi)
            score("rig_" + std::to_string(vi), sr.renders[vi].color,
                  render(cloud, rig.poses[vi]).color);
        for (size_t u = 0; u < unseen_orbits.size(); ++u) {
            CameraPose pose = unseen_orbits[u].to_camera_pose();
            score("unseen_" + std::to_string(u), render(sr.cloud, pose).color,
                  render(cloud, pose).color);
        }
        rep.objects.push_back(std::move(os));
    }
    rep.mean_psnr = rep.psnr_pairs ? psnr_sum / static_cast<double>(rep.psnr_pairs) : 0.0;
    rep.mean_ssim = ssim_count ? ssim_sum / static_cast<double>(ssim_count) : 0.0;
    return rep;
}

inline std::string format_psnr(double v) {
    if (std::isinf(v)) return "inf";
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

inline void save_report(const EvalReport& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("save_report: cannot open " + path);
    f << "# dsplats eval v1\n";
    f << "checkpoint=" << r.checkpoint_id << "\n";
    f << "seed=" << r.seed << " steps=" << r.sample_steps << "\n";
    std::istringstream cfg(r.config_snapshot);
    std::string line;
    while (std::getline(cfg, line)) f << "config " << line << "\n";
    f << std::setprecision(10);
    for (const auto& o : r.objects)
        for (const auto& v : o.views)
            f << "object " << o.id << " view " << v.view << " psnr=" << format_psnr(v.psnr_db)
              << " ssim=" << v.ssim_val << "\n";
    f << "aggregate mean_psnr=" << r.mean_psnr << " pairs=" << r.psnr_pairs
      << " inf_excluded=" << r.psnr_excluded << " mean_ssim=" << r.mean_ssim << "\n";
    if (!f) throw IoError("save_report: write failed for " + path);
}

}  // namespace dsplats
