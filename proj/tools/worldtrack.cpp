// worldtrack command-line tool: synthesize oracle sequences, solve cameras,
// run test-time adaptation, evaluate, and check gradients.

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "worldtrack/worldtrack.hpp"

namespace fs = std::filesystem;
using namespace worldtrack;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

SceneOptions parse_resolution(const std::string& text, int frames) {
  int w = 0, h = 0;
  char x = 0, extra = 0;
  if (std::sscanf(text.c_str(), "%d%c%d%c", &w, &x, &h, &extra) != 3 || (x != 'x' && x != 'X') || w < 8 || h < 8)
    throw UsageError("--resolution must look like WxH with both sides at least 8");
  return {frames, w, h};
}

/// Rejects output locations inside or equal to an input directory.
void require_outside(const fs::path& out, const fs::path& input_dir) {
  const auto a = fs::weakly_canonical(out), b = fs::weakly_canonical(input_dir);
  auto ai = a.begin();
  for (auto bi = b.begin(); bi != b.end(); ++bi, ++ai)
    if (ai == a.end() || *ai != *bi) return;
  throw UsageError("output " + out.string() + " must not be inside the input " + input_dir.string());
}

fs::path sequence_dir(const fs::path& p) { return fs::is_directory(p) ? p : p.parent_path(); }

struct SynthArgs {
  std::string preset;
  std::uint64_t seed = 0;
  std::string out;
  int frames = 64;
  std::string resolution = "64x48";
  double noise = 0.0;
  double drift = 0.0;
  std::uint64_t corrupt_seed = 0;
  bool corrupt_recon = false;
};

int cmd_synth(const SynthArgs& a) {
  const SceneOptions opts = parse_resolution(a.resolution, a.frames);
  RenderedSequence seq = render(generate_scene(a.preset, a.seed, opts));
  if (a.noise > 0.0 || a.drift > 0.0) seq = corrupt(seq, a.noise, a.drift, a.corrupt_seed, {true, a.corrupt_recon});
  std::printf("%s\n", write_sequence(seq, a.out).string().c_str());
  return kExitOk;
}

struct SolveArgs {
  std::string seq;
  std::string out;
  std::uint64_t seed = 0;
  double inlier_threshold = 2.0;
};

int cmd_solve_camera(const SolveArgs& a) {
  const fs::path dir = sequence_dir(a.seq);
  fs::path out = a.out;
  if (out.empty()) {
    out = dir.lexically_normal();
    if (!out.has_filename()) out = out.parent_path();
    out += ".cameras.json";
  }
  require_outside(out, dir);
  const RenderedSequence seq = read_sequence(a.seq);
  RansacConfig ransac;
  ransac.seed = a.seed;
  ransac.inlier_threshold = a.inlier_threshold;
  const GNConfig gn;
  const int weiszfeld_iterations = 10;
  const VideoCameras cams = solve_cameras_for_video(seq.recon_pointmaps, seq.grid(), ransac, gn, weiszfeld_iterations);

  ordered_json j;
  j["focal"] = cams.intrinsics.focal;
  j["cx"] = cams.intrinsics.cx;
  j["cy"] = cams.intrinsics.cy;
  j["seed"] = a.seed;
  j["solver"] = {{"ransac",
                  {{"max_iterations", ransac.max_iterations},
                   {"inlier_threshold", ransac.inlier_threshold},
                   {"min_sample", ransac.min_sample},
                   {"confidence", ransac.confidence}}},
                 {"gn", {{"damping", gn.damping}, {"num_steps", gn.num_steps}}},
                 {"weiszfeld_iterations", weiszfeld_iterations}};
  ordered_json frames = ordered_json::array();
  std::printf("focal %s\n", fmt(cams.intrinsics.focal).c_str());
  for (std::size_t f = 0; f < cams.poses.size(); ++f) {
    const auto& p = cams.poses[f];
    ordered_json rot = ordered_json::array();
    for (int r = 0; r < 3; ++r) rot.push_back({p.pose.rotation(r, 0), p.pose.rotation(r, 1), p.pose.rotation(r, 2)});
    frames.push_back({{"frame", f},
                      {"rotation", rot},
                      {"translation", {p.pose.translation.x(), p.pose.translation.y(), p.pose.translation.z()}},
                      {"rms_reprojection_error", p.rms_reprojection_error},
                      {"num_inliers", cams.inlier_pixels[f].size()}});
    std::printf("frame %zu rms %s inliers %zu\n", f, fmt(p.rms_reprojection_error).c_str(), cams.inlier_pixels[f].size());
  }
  j["frames"] = frames;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  io::write_atomic(out, j.dump(2) + "\n");
  std::printf("%s\n", out.string().c_str());
  return kExitOk;
}

struct AdaptArgs {
  std::string seq;
  std::string out;
  int steps = 500;
  double lr = 1e-2;
  bool freeze_recon = true;
  std::vector<double> weights{1.0, 10.0, 5.0};
  std::uint64_t seed = 0;
  bool cosine = false;
};

int cmd_adapt(const AdaptArgs& a) {
  if (a.weights.size() != 3) throw UsageError("--weights takes three values: traj,depth,align");
  require_outside(a.out, sequence_dir(a.seq));
  RenderedSequence seq = read_sequence(a.seq);
  AdaptState state{seq.tracking_pointmaps, seq.recon_pointmaps, a.freeze_recon, a.lr, a.steps, a.seed, a.cosine};
  const LossWeights weights{a.weights[0], a.weights[1], a.weights[2]};
  const AdaptResult res = tta_optimize(std::move(state), seq.track_supervision(), seq.depth_supervision(), weights, {});
  seq.tracking_pointmaps = res.state.tracking;
  seq.recon_pointmaps = res.state.recon;
  const fs::path manifest = write_sequence(seq, a.out);

  std::string csv = "step,traj,depth,align,total\n";
  for (std::size_t s = 0; s < res.trace.size(); ++s) {
    const auto& l = res.trace[s];
    csv += std::to_string(s) + "," + fmt(l.traj) + "," + fmt(l.depth) + "," + fmt(l.align) + "," + fmt(l.total) + "\n";
  }
  io::write_atomic(fs::path(a.out) / "loss_trace.csv", csv);
  if (!res.trace.empty())
    std::printf("loss %s -> %s over %zu steps\n", fmt(res.trace.front().total).c_str(), fmt(res.trace.back().total).c_str(),
                res.trace.size());
  std::printf("%s\n", manifest.string().c_str());
  return kExitOk;
}

struct EvalArgs {
  std::string seq;
  std::string pred;
  std::string task = "track";
  std::string mode = "median";
  std::vector<double> thresholds{0.1, 0.3, 0.5, 1.0};
  std::size_t subsample = 1000;
  std::uint64_t seed = 0;
  std::size_t frames = 64;
  std::string out;
};

int cmd_eval(const EvalArgs& a) {
  Thresholds thr{a.thresholds};
  try {
    thr.validate();
  } catch (const Error& e) {
    throw UsageError(e.message());
  }
  std::string prefix = a.out;
  if (prefix.empty()) {
    fs::path p = sequence_dir(a.pred).lexically_normal();
    if (!p.has_filename()) p = p.parent_path();
    prefix = p.string() + ".eval_" + a.task + "_" + a.mode;
  }
  require_outside(prefix + ".json", sequence_dir(a.seq));
  require_outside(prefix + ".json", sequence_dir(a.pred));
  const RenderedSequence gt = read_sequence(a.seq);
  const RenderedSequence pred = read_sequence(a.pred);
  if (pred.width != gt.width || pred.height != gt.height || pred.num_frames() != gt.num_frames())
    throw Error(ErrorCode::ShapeMismatch, "prediction and ground-truth sequences differ in shape");
  const AlignmentMode mode = a.mode == "sim3" ? AlignmentMode::Sim3 : AlignmentMode::MedianScale;

  ordered_json config{{"task", a.task}, {"mode", a.mode}, {"thresholds", a.thresholds}, {"frames", a.frames}};
  MetricReport report;
  if (a.task == "track") {
    config["subsample"] = a.subsample;
    config["seed"] = a.seed;
    const auto idx = subsample_indices(gt.queries.size(), a.subsample, a.seed);
    const TrackSet3 gt_tracks = gt.tracks3d_world.select(idx);
    const TrackSet3 pred_tracks = assemble_trajectories(pred.tracking_pointmaps, gt.queries).select(idx);
    bool any_dynamic = false;
    for (std::size_t n = 0; n < gt_tracks.num_points(); ++n) any_dynamic = any_dynamic || gt_tracks.dynamic(n);
    report = eval_tracking(pred_tracks, gt_tracks, {mode, thr, a.frames, any_dynamic});
  } else {
    ReconEvalOptions opts;
    opts.mode = mode;
    opts.thresholds = thr;
    opts.max_frames = a.frames;
    config["depth_range"] = {opts.min_depth, opts.max_depth};
    report = eval_recon(pred.recon_pointmaps, gt.recon_pointmaps, opts, gt.depth);
  }

  std::printf("all apd %s epe %s pairs %zu\n", fmt(report.all.apd_percent).c_str(), fmt(report.all.epe_meters).c_str(),
              report.all.num_pairs);
  if (report.dynamic)
    std::printf("dynamic apd %s epe %s pairs %zu\n", fmt(report.dynamic->apd_percent).c_str(),
                fmt(report.dynamic->epe_meters).c_str(), report.dynamic->num_pairs);
  if (const fs::path parent = fs::path(prefix).parent_path(); !parent.empty()) fs::create_directories(parent);
  io::write_atomic(prefix + ".json", report_json(report, config).dump(2) + "\n");
  io::write_atomic(prefix + ".csv", report_csv(report));
  std::printf("%s.json\n%s.csv\n", prefix.c_str(), prefix.c_str());
  return kExitOk;
}

struct GradArgs {
  std::uint64_t seed = 0;
  int trials = 50;
  bool inject_sign_flip = false;
};

int cmd_check_grads(const GradArgs& a) {
  GradcheckConfig cfg;
  cfg.seed = a.seed;
  cfg.trials = a.trials;
  cfg.inject_sign_flip = a.inject_sign_flip;
  const GradcheckReport report = run_gradient_checks(cfg);
  std::printf("%-12s %-14s %-9s %s\n", "component", "max_rel_error", "instances", "status");
  for (const auto& c : report.components)
    std::printf("%-12s %-14.6e %-9d %s\n", c.name.c_str(), c.max_relative_error, c.instances, c.passed ? "pass" : "FAIL");
  return report.passed() ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"worldtrack: world-frame tracking toolkit"};
  app.require_subcommand(1);

  std::vector<std::string> presets(kScenePresets.begin(), kScenePresets.end());

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Render an oracle sequence and write it to disk");
  s->add_option("--preset", synth.preset, "Scene preset")->required()->check(CLI::IsMember(presets));
  s->add_option("--seed", synth.seed, "Scene seed");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--frames", synth.frames, "Number of frames")->check(CLI::Range(1, 100000));
  s->add_option("--resolution", synth.resolution, "Image size WxH");
  s->add_option("--noise", synth.noise, "Gaussian noise std on tracking points (m)")->check(CLI::NonNegativeNumber);
  s->add_option("--drift", synth.drift, "Drift per frame on tracking points (m)")->check(CLI::NonNegativeNumber);
  s->add_option("--corrupt-seed", synth.corrupt_seed, "Seed of the corruption");
  s->add_flag("--corrupt-recon", synth.corrupt_recon, "Also corrupt the reconstruction pointmaps");

  SolveArgs solve;
  auto* c = app.add_subcommand("solve-camera", "Estimate focal and per-frame poses from the reconstruction pointmaps");
  c->add_option("--seq", solve.seq, "Sequence directory or manifest")->required();
  c->add_option("--out", solve.out, "Output JSON (default: <seq>.cameras.json next to the sequence)");
  c->add_option("--seed", solve.seed, "RANSAC seed");
  c->add_option("--inlier-threshold", solve.inlier_threshold, "RANSAC inlier threshold (px)")->check(CLI::PositiveNumber);

  AdaptArgs adapt;
  auto* d = app.add_subcommand("adapt", "Test-time adaptation of the tracking pointmaps");
  d->add_option("--seq", adapt.seq, "Sequence directory or manifest")->required();
  d->add_option("--out", adapt.out, "Output directory for the adapted sequence")->required();
  d->add_option("--steps", adapt.steps, "Optimization steps")->check(CLI::Range(0, 1000000));
  d->add_option("--lr", adapt.lr, "Step size")->check(CLI::PositiveNumber);
  d->add_flag("--freeze-recon,!--no-freeze-recon", adapt.freeze_recon, "Keep reconstruction pointmaps fixed");
  d->add_option("--weights", adapt.weights, "Loss weights traj,depth,align")->delimiter(',')->expected(3);
  d->add_option("--seed", adapt.seed, "Camera solver seed");
  d->add_flag("--cosine", adapt.cosine, "Cosine step-size decay");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Score predictions against ground truth");
  e->add_option("--seq", eval.seq, "Ground-truth sequence")->required();
  e->add_option("--pred", eval.pred, "Predicted sequence")->required();
  e->add_option("--task", eval.task, "track or recon")->check(CLI::IsMember({"track", "recon"}));
  e->add_option("--mode", eval.mode, "median or sim3")->check(CLI::IsMember({"median", "sim3"}));
  e->add_option("--thresholds", eval.thresholds, "Distance thresholds (m)")->delimiter(',');
  e->add_option("--subsample", eval.subsample, "Query subsample target")->check(CLI::Range(1, 100000000));
  e->add_option("--seed", eval.seed, "Subsample seed");
  e->add_option("--frames", eval.frames, "Evaluation window")->check(CLI::Range(1, 100000));
  e->add_option("--out", eval.out, "Report prefix (default: <pred>.eval_<task>_<mode> next to the prediction)");

  GradArgs grads;
  auto* g = app.add_subcommand("check-grads", "Finite-difference checks of every analytic gradient");
  g->add_option("--seed", grads.seed, "Instance seed");
  g->add_option("--trials", grads.trials, "Instances per component")->check(CLI::Range(1, 100000));
  g->add_flag("--inject-sign-flip", grads.inject_sign_flip)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*c) return cmd_solve_camera(solve);
    if (*d) return cmd_adapt(adapt);
    if (*e) return cmd_eval(eval);
    if (*g) return cmd_check_grads(grads);
  } catch (const UsageError& ex) {
    std::fprintf(stderr, "usage error: %s\n", ex.what());
    return kExitUsage;
  } catch (const Error& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kExitRuntime;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
