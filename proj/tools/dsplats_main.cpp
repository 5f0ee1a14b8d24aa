// Command-line front end: dataset generation, training, single-image
// sampling, cloud rendering, and evaluation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dsplats/camera.hpp"
#include "dsplats/denoiser.hpp"
#include "dsplats/diffusion.hpp"
#include "dsplats/gaussians.hpp"
#include "dsplats/image.hpp"
#include "dsplats/metrics.hpp"
#include "dsplats/splat_renderer.hpp"
#include "dsplats/synthetic_data.hpp"
#include "dsplats/training.hpp"

namespace {

namespace fs = std::filesystem;
using namespace dsplats;

int cmd_gen_data(const std::string& out, int objects, int views, int unseen, int width,
                 int height, uint64_t seed) {
    ViewRig rig = rig_default(views, width, height);
    DatasetManifest m = build_dataset(objects, rig, unseen, out, seed);
    std::cout << "wrote " << m.entries.size() << " objects to " << out << "\n";
    return 0;
}

std::vector<TrainObject> load_objects(const std::string& data_dir,
                                      const DatasetManifest& manifest) {
    std::vector<TrainObject> objs;
    for (const auto& e : manifest.entries)
        objs.push_back({e.id, load_cloud(data_dir + "/" + e.id + "/cloud.dspl")});
    return objs;
}

int cmd_train(const std::string& data, const std::string& out, const std::string& resume,
              TrainConfig tc) {
    fs::create_directories(out);
    DatasetManifest manifest = load_manifest(data + "/manifest.txt");
    tc.views = manifest.views;
    tc.width = manifest.width;
    tc.height = manifest.height;
    std::vector<TrainObject> objects = load_objects(data, manifest);

    TrainState st;
    if (!resume.empty()) {
        st = restore_train_state(load_checkpoint(resume), tc);
        std::cout << "resumed from " << resume << " at step " << st.step << "\n";
    } else {
        DenoiserConfig dc;
        st = init_train_state(tc, dc);
    }

    std::ofstream log(out + "/train.log", std::ios::app);
    if (!log) throw IoError("train: cannot open log in " + out);
    while (st.step < tc.total_steps) {
        std::vector<TrainObject> batch;
        for (int k = 0; k < tc.batch_size; ++k)
            batch.push_back(objects[(static_cast<size_t>(st.step) * tc.batch_size + k) %
                                    objects.size()]);
        TrainMetrics m = train_step(st, batch);
        std::string line = format_metrics(m);
        log << line << "\n";
        log.flush();
        if (m.step % 25 == 0 || m.step == tc.total_steps) std::cout << line << std::endl;
        if (tc.checkpoint_every > 0 && m.step % tc.checkpoint_every == 0)
            save_checkpoint(make_checkpoint(st),
                            out + "/ckpt_" + std::to_string(m.step) + ".dsck");
    }
    save_checkpoint(make_checkpoint(st), out + "/ckpt_final.dsck");
    std::cout << "final checkpoint: " << out << "/ckpt_final.dsck\n";
    return 0;
}

int cmd_sample(const std::string& ckpt_path, const std::string& input_path,
               const std::string& out, int steps, uint64_t seed) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    DenoiserParams params = params_from_checkpoint(ck);
    Image input = load_png(input_path);
    if (input.channels != 3) throw ValueError("sample: input must be a 3-channel PNG");
    fs::create_directories(out);

    ViewRig rig = rig_default(6, input.width, input.height);
    NoiseSchedule sched = cosine_schedule();
    NetDenoisingStep den(params);
    SampleResult res = sample(input, rig, den, sched, steps, seed);

    save_cloud(res.cloud, out + "/cloud.dspl");
    for (size_t i = 0; i < res.renders.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "/render_%02zu.png", i);
        save_png(res.renders[i].color, out + name);
    }
    std::cout << "sampled " << res.cloud.size() << " gaussians -> " << out << "\n";
    return 0;
}

int cmd_render(const std::string& cloud_path, const std::string& poses_path,
               const std::string& out, int width, int height) {
    GaussianCloud cloud = load_cloud(cloud_path);
    fs::create_directories(out);
    std::vector<CameraPose> poses;
    if (!poses_path.empty()) {
        for (const auto& o : load_pose_file(poses_path)) poses.push_back(o.to_camera_pose());
    } else {
        for (const auto& p : rig_default(6, width, height).poses) poses.push_back(p);
    }
    for (size_t i = 0; i < poses.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "/render_%02zu.png", i);
        save_png(render(cloud, poses[i]).color, out + name);
    }
    std::cout << "rendered " << poses.size() << " views -> " << out << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::string& out,
             int steps, uint64_t seed, int limit) {
    Checkpoint ck = load_checkpoint(ckpt_path);
    DenoiserParams params = params_from_checkpoint(ck);
    std::string ckpt_id = ckpt_path + "@step" + std::to_string(ck.step);
    EvalReport rep = evaluate(params, ckpt_id, data, steps, seed, limit);
    save_report(rep, out);
    std::cout << "mean_psnr=" << format_psnr(rep.mean_psnr) << " pairs=" << rep.psnr_pairs
              << " inf_excluded=" << rep.psnr_excluded << " mean_ssim=" << rep.mean_ssim << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dsplats: multiview latent diffusion through 3D Gaussian splatting"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    uint64_t seed = 0;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic object dataset");
    std::string gen_out;
    int gen_objects = 4, gen_views = 6, gen_unseen = 2, gen_w = 128, gen_h = 128;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--objects", gen_objects, "Number of objects");
    gen->add_option("--views", gen_views, "Rig views (max 6)");
    gen->add_option("--unseen", gen_unseen, "Held-out views per object");
    gen->add_option("--width", gen_w, "Image width");
    gen->add_option("--height", gen_h, "Image height");
    gen->add_option("--seed", seed, "Random seed");

    auto* train = app.add_subcommand("train", "Train the denoiser on a dataset");
    std::string train_data, train_out, train_resume;
    TrainConfig tc;
    train->add_option("--data", train_data, "Dataset directory")->required();
    train->add_option("--out", train_out, "Output directory")->required();
    train->add_option("--steps", tc.total_steps, "Total optimization steps");
    train->add_option("--lr", tc.learning_rate, "Learning rate");
    train->add_option("--batch", tc.batch_size, "Objects per step");
    train->add_option("--unseen-per-step", tc.unseen_per_step, "Extra supervision views");
    train->add_option("--checkpoint-every", tc.checkpoint_every, "Checkpoint interval");
    train->add_option("--resume", train_resume, "Checkpoint to resume from");
    train->add_option("--seed", seed, "Random seed");

    auto* sample_cmd = app.add_subcommand("sample", "Sample a 3D object from one image");
    std::string s_ckpt, s_input, s_out;
    int s_steps = 50;
    sample_cmd->add_option("--checkpoint", s_ckpt, "Checkpoint file")->required();
    sample_cmd->add_option("--input", s_input, "Conditioning image (PNG)")->required();
    sample_cmd->add_option("--out", s_out, "Output directory")->required();
    sample_cmd->add_option("--steps", s_steps, "Sampler steps");
    sample_cmd->add_option("--seed", seed, "Random seed");

    auto* render_cmd = app.add_subcommand("render", "Render a Gaussian cloud file");
    std::string r_cloud, r_poses, r_out;
    int r_w = 128, r_h = 128;
    render_cmd->add_option("--cloud", r_cloud, "Cloud file")->required();
    render_cmd->add_option("--poses", r_poses, "Pose file (default: the 6-view rig)");
    render_cmd->add_option("--out", r_out, "Output directory")->required();
    render_cmd->add_option("--width", r_w, "Image width");
    render_cmd->add_option("--height", r_h, "Image height");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string e_ckpt, e_data, e_out;
    int e_steps = 50, e_limit = 0;
    eval_cmd->add_option("--checkpoint", e_ckpt, "Checkpoint file")->required();
    eval_cmd->add_option("--data", e_data, "Dataset directory")->required();
    eval_cmd->add_option("--out", e_out, "Report file")->required();
    eval_cmd->add_option("--steps", e_steps, "Sampler steps");
    eval_cmd->add_option("--limit", e_limit, "Evaluate only the first N objects");
    eval_cmd->add_option("--seed", seed, "Random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed())
            return cmd_gen_data(gen_out, gen_objects, gen_views, gen_unseen, gen_w, gen_h, seed);
        if (train->parsed()) {
            tc.seed = seed;
            return cmd_train(train_data, train_out, train_resume, tc);
        }
        if (sample_cmd->parsed()) return cmd_sample(s_ckpt, s_input, s_out, s_steps, seed);
        if (render_cmd->parsed()) return cmd_render(r_cloud, r_poses, r_out, r_w, r_h);
        if (eval_cmd->parsed()) return cmd_eval(e_ckpt, e_data, e_out, e_steps, seed, e_limit);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
