// Acceptance suite: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <string>

#include "cli_runner.hpp"
#include "oracles.hpp"
#include "worldtrack/worldtrack.hpp"

using namespace worldtrack;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::Quaterniond q(g(rng), g(rng), g(rng), g(rng));
  return q.normalized().toRotationMatrix();
}

TrackSet3 random_tracks(std::mt19937_64& rng, std::size_t n, std::size_t frames, bool with_dynamic) {
  std::uniform_real_distribution<double> u(-2.0, 2.0), coin(0.0, 1.0);
  TrackSet3 t(n, frames);
  for (std::size_t i = 0; i < n; ++i) {
    t.set_dynamic(i, with_dynamic && coin(rng) < 0.3);
    const Vec3 base(u(rng), u(rng), 3.0 + u(rng));
    for (std::size_t f = 0; f < frames; ++f) {
      t.at(i, f) = base + 0.3 * Vec3(u(rng), u(rng), u(rng));
      t.set_visible(i, f, coin(rng) < 0.85);
    }
  }
  return t;
}

bool same(const SubsetMetrics& m, const oracle::BruteSubset& b) {
  return m.apd_percent == b.apd && m.epe_meters == b.epe && m.num_pairs == b.count && m.per_threshold == b.fractions;
}

// 1
Outcome diff_pnp_gradients() {
  const auto t0 = Clock::now();
  GradcheckConfig cfg;
  double worst = 0.0;
  const int instances = 50;
  for (int t = 0; t < instances; ++t) {
    gradcheck::Rng rng(1000 + static_cast<std::uint64_t>(t));
    worst = std::max(worst, gradcheck::diff_pnp_instance(rng, cfg));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 30.0, fmt("max rel err %.3e over 50 instances, %.2f s", worst, secs)};
}

// 2
Outcome loss_gradients() {
  GradcheckConfig cfg;
  const std::vector<std::pair<const char*, double (*)(gradcheck::Rng&, const GradcheckConfig&)>> parts = {
      {"traj", gradcheck::traj_instance},
      {"depth", gradcheck::depth_instance},
      {"align", gradcheck::align_instance},
      {"supervised", gradcheck::supervised_instance}};
  bool ok = true;
  std::string detail;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
      gradcheck::Rng rng(2000 + 100 * k + static_cast<std::uint64_t>(t));
      worst = std::max(worst, parts[k].second(rng, cfg));
    }
    ok = ok && worst < 1e-4;
    detail += std::string(k ? ", " : "") + parts[k].first + fmt(" %.3e", worst);
  }
  return {ok, "max rel err " + detail};
}

// 3
Outcome traj_scale_invariance() {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> ux(0.0, 64.0), uy(0.0, 48.0), uk(0.1, 10.0);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Vec2 c(32.0, 24.0);
    const std::size_t n = 10 + static_cast<std::size_t>(t % 40);
    std::vector<Vec2> pred(n), gt(n), scaled(n);
    std::vector<std::uint8_t> vis(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = Vec2(ux(rng), uy(rng));
      gt[i] = Vec2(ux(rng), uy(rng));
    }
    const double k = uk(rng);
    for (std::size_t i = 0; i < n; ++i) scaled[i] = c + k * (pred[i] - c);
    const double a = traj_loss(pred, gt, c, vis).value;
    const double b = traj_loss(scaled, gt, c, vis).value;
    worst = std::max(worst, std::abs(a - b) / std::abs(a));
  }
  return {worst < 1e-9, fmt("max relative change %.3e over 100 instances", worst)};
}

// 4
Outcome alpha_optimality() {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.3, 6.0);
  int failures = 0;
  double worst_gap = 0.0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 5 + static_cast<std::size_t>(t % 30);
    std::vector<double> z(n), m(n);
    Pointmap recon(static_cast<int>(n), 1, recon_tag(1));
    DepthMap mono(static_cast<int>(n), 1);
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = u(rng);
      m[i] = u(rng);
      recon.set(i, Vec3(0.0, 0.0, z[i]));
      mono.set(i, m[i]);
    }
    const DepthLoss l = depth_loss(recon, PoseSE3::identity(), mono);
    const double hi = 4.0 * l.alpha;
    double grid_min = std::numeric_limits<double>::infinity();
    for (int g = 0; g <= 20000; ++g) grid_min = std::min(grid_min, oracle::depth_objective(hi * g / 20000.0, z, m));
    const double at_alpha = oracle::depth_objective(l.alpha, z, m);
    worst_gap = std::max(worst_gap, at_alpha - grid_min);
    if (at_alpha > grid_min + 1e-12 || std::abs(at_alpha - l.value) > 1e-12) ++failures;
  }
  return {failures == 0, fmt("%.0f of 100 instances beaten by the grid, worst excess %.3e", failures, worst_gap)};
}

// 5
Outcome camera_round_trip() {
  bool ok = true;
  std::string detail;
  for (auto preset : kScenePresets) {
    const RenderedSequence s = render(generate_scene(preset, 5, {64, 64, 48}));
    const auto t0 = Clock::now();
    const VideoCameras cams = solve_cameras_for_video(s.recon_pointmaps, s.grid());
    const double secs = seconds_since(t0);
    const double focal_err = std::abs(cams.intrinsics.focal - s.intrinsics.focal) / s.intrinsics.focal;
    double rot = 0.0, trans = 0.0;
    for (std::size_t j = 0; j < s.num_frames(); ++j) {
      rot = std::max(rot, rotation_angle_between(cams.poses[j].pose.rotation, s.cameras[j].rotation));
      trans = std::max(trans, (cams.poses[j].pose.translation - s.cameras[j].translation).norm());
    }
    ok = ok && focal_err < 1e-3 && rot < 1e-4 && trans < 1e-4 && secs < 60.0;
    detail += std::string(detail.empty() ? "" : "; ") + std::string(preset) +
              fmt(" focal %.1e rot %.1e trans %.1e", focal_err, rot, trans) + fmt(" %.2f s", secs);
  }
  return {ok, detail};
}

// 6
Outcome metric_equivalence() {
  std::mt19937_64 rng(6);
  const Thresholds thr;
  int mismatches = 0, instances = 0;
  for (int t = 0; t < 25; ++t) {
    const TrackSet3 gt = random_tracks(rng, 30 + t, 10, true);
    TrackSet3 pred = random_tracks(rng, 30 + t, 10, false);
    for (std::size_t i = 0; i < gt.num_points(); ++i)
      for (std::size_t f = 0; f < 10; ++f) pred.at(i, f) = 0.8 * gt.at(i, f) + 0.1 * pred.at(i, f);
    const auto raw = oracle::track_pairs(pred, gt, 64);
    for (auto mode : {AlignmentMode::MedianScale, AlignmentMode::Sim3}) {
      const MetricReport r = eval_tracking(pred, gt, {mode});
      const oracle::BruteReport b = oracle::brute_score(raw, thr.deltas, mode == AlignmentMode::Sim3 ? &r.alignment : nullptr);
      const bool ok = same(r.all, b.all) && r.dynamic && same(*r.dynamic, b.dynamic) &&
                      (mode == AlignmentMode::Sim3 || r.alignment.scale == b.scale);
      mismatches += ok ? 0 : 1;
      ++instances;
    }

    const RenderedSequence s = render(generate_scene(kScenePresets[t % 4], 60 + t, {3, 16, 12}));
    const RenderedSequence noisy = corrupt(s, 0.05, 0.01, 70 + t, {false, true});
    const auto rraw = oracle::recon_pairs(noisy.recon_pointmaps, s.recon_pointmaps, &s.depth, 0.1, 5.0);
    for (auto mode : {AlignmentMode::MedianScale, AlignmentMode::Sim3}) {
      ReconEvalOptions opts;
      opts.mode = mode;
      const MetricReport r = eval_recon(noisy.recon_pointmaps, s.recon_pointmaps, opts, s.depth);
      const oracle::BruteReport b = oracle::brute_score(rraw, thr.deltas, mode == AlignmentMode::Sim3 ? &r.alignment : nullptr);
      mismatches += same(r.all, b.all) ? 0 : 1;
      ++instances;
    }
  }

  const RenderedSequence s = render(generate_scene("dyn-cam-dyn-scene", 1, {8, 32, 24}));
  const MetricReport perfect = eval_tracking(s.tracks3d_world, s.tracks3d_world);
  const MetricReport perfect_recon = eval_recon(s.recon_pointmaps, s.recon_pointmaps);
  const bool perfect_ok = perfect.all.apd_percent == 100.0 && perfect.all.epe_meters == 0.0 &&
                          perfect.dynamic->apd_percent == 100.0 && perfect_recon.all.apd_percent == 100.0 &&
                          perfect_recon.all.epe_meters == 0.0;

  TrackSet3 g(1, 1), p(1, 1);
  g.at(0, 0) = Vec3(0.0, 0.0, 2.0);
  p.at(0, 0) = Vec3(0.2, 0.0, 2.0);
  g.set_visible(0, 0, true);
  p.set_visible(0, 0, true);
  const double apd = apd_3d(p, g, thr).percent;

  return {mismatches == 0 && perfect_ok && apd == 75.0,
          fmt("%.0f/%.0f instances bit-identical to brute force", instances - mismatches, instances) +
              (perfect_ok ? ", perfect APD 100 EPE 0" : ", perfect case wrong") + fmt(", 0.2 m case APD %.17g", apd)};
}

// 7
Outcome alignment_recovery() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ls(std::log(0.1), std::log(10.0)), u(-3.0, 3.0), c(-2.0, 2.0);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    std::vector<Vec3> pred(20), gt(20);
    const double s = std::exp(ls(rng));
    const Mat3 r = random_rotation(rng);
    const Vec3 tr(u(rng), u(rng), u(rng));
    for (std::size_t i = 0; i < 20; ++i) {
      pred[i] = Vec3(c(rng), c(rng), 3.0 + c(rng));
      gt[i] = s * r * pred[i] + tr;
    }
    const Sim3Fit f = umeyama_sim3_align(pred, gt);
    for (std::size_t i = 0; i < 20; ++i) worst = std::max(worst, (f.points[i] - gt[i]).norm());
  }

  const TrackSet3 gt = random_tracks(rng, 60, 10, true);
  TrackSet3 pred = gt;
  const TrackSet3 noise = random_tracks(rng, 60, 10, false);
  for (std::size_t i = 0; i < 60; ++i)
    for (std::size_t f = 0; f < 10; ++f) pred.at(i, f) += 0.05 * noise.at(i, f);
  const MetricReport base = eval_tracking(pred, gt, {AlignmentMode::Sim3});
  double drift = 0.0;
  for (int t = 0; t < 50; ++t) {
    const double s = std::exp(ls(rng));
    const Mat3 r = random_rotation(rng);
    const Vec3 tr(u(rng), u(rng), u(rng));
    TrackSet3 moved = pred;
    for (std::size_t i = 0; i < 60; ++i)
      for (std::size_t f = 0; f < 10; ++f) moved.at(i, f) = s * r * pred.at(i, f) + tr;
    const MetricReport m = eval_tracking(moved, gt, {AlignmentMode::Sim3});
    drift = std::max({drift, std::abs(m.all.apd_percent - base.all.apd_percent),
                      std::abs(m.all.epe_meters - base.all.epe_meters),
                      std::abs(m.dynamic->apd_percent - base.dynamic->apd_percent),
                      std::abs(m.dynamic->epe_meters - base.dynamic->epe_meters)});
  }
  return {worst < 1e-9 && drift < 1e-9,
          fmt("max residual %.3e over 1000 transforms, sim3 metric change %.3e over 50 transforms", worst, drift)};
}

// 8
Outcome tta_convergence() {
  setenv("WORLDTRACK_THREADS", "1", 1);
  bool ok = true;
  std::string detail;
  const auto t0 = Clock::now();
  for (auto preset : kScenePresets) {
    const RenderedSequence clean = render(generate_scene(preset, 8, {24, 64, 48}));
    const RenderedSequence noisy = corrupt(clean, 0.05, 0.01, 18);
    AdaptState st;
    st.tracking = noisy.tracking_pointmaps;
    st.recon = noisy.recon_pointmaps;
    st.steps = 500;
    const AdaptResult r = tta_optimize(st, clean.track_supervision(), clean.depth_supervision(), {1.0, 10.0, 5.0}, {});
    const double ratio = r.trace.back().total / r.trace.front().total;

    bool any_dynamic = false;
    for (std::size_t n = 0; n < clean.tracks3d_world.num_points(); ++n) any_dynamic = any_dynamic || clean.tracks3d_world.dynamic(n);
    const TrackEvalOptions opts{AlignmentMode::MedianScale, {}, 64, any_dynamic};
    const double before =
        eval_tracking(assemble_trajectories(noisy.tracking_pointmaps, clean.queries), clean.tracks3d_world, opts).all.apd_percent;
    const double after =
        eval_tracking(assemble_trajectories(r.state.tracking, clean.queries), clean.tracks3d_world, opts).all.apd_percent;
    const bool frozen = r.state.recon == noisy.recon_pointmaps;
    ok = ok && ratio < 0.1 && after > before && frozen;
    detail += std::string(detail.empty() ? "" : "; ") + std::string(preset) +
              fmt(" loss ratio %.4f, APD %.2f -> %.2f", ratio, before, after) + (frozen ? "" : ", recon changed");
  }
  unsetenv("WORLDTRACK_THREADS");
  const double secs = seconds_since(t0);
  ok = ok && secs < 300.0;
  return {ok, detail + fmt("; %.1f s total", secs)};
}

// 9
using Snapshot = std::map<std::string, std::string>;

Snapshot snapshot(const fs::path& root) {
  Snapshot s;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) s[fs::relative(e.path(), root).string()] = cli::read_all(e.path());
  return s;
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "worldtrack_acceptance_cli";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string r = root.string() + "/";
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth", "synth --preset dyn-cam-dyn-scene --seed 3 --frames 6 --resolution 32x24 --out " + r + "gt"},
      {"synth-noisy", "synth --preset dyn-cam-dyn-scene --seed 3 --frames 6 --resolution 32x24 --noise 0.05 --drift 0.01 "
                      "--corrupt-seed 1 --out " + r + "noisy"},
      {"solve-camera", "solve-camera --seq " + r + "noisy --seed 2 --out " + r + "cams.json"},
      {"adapt", "adapt --seq " + r + "noisy --out " + r + "adapted --steps 25 --seed 2"},
      {"eval-track", "eval --seq " + r + "gt --pred " + r + "adapted --task track --subsample 300 --seed 5 --out " + r + "track"},
      {"eval-recon", "eval --seq " + r + "gt --pred " + r + "noisy --task recon --mode sim3 --out " + r + "recon"},
      {"check-grads", "check-grads --seed 4 --trials 2"}};
  bool ok = true;
  std::string failed;
  for (const auto& [name, args] : commands) {
    const cli::Run a = cli::run(args);
    const Snapshot sa = snapshot(root);
    const cli::Run b = cli::run(args);
    const Snapshot sb = snapshot(root);
    const bool same_run = a.exit_code == 0 && b.exit_code == 0 && a.out == b.out && sa == sb;
    if (!same_run) failed += " " + name + (a.exit_code ? " (exit " + std::to_string(a.exit_code) + ": " + a.err + ")" : "");
    ok = ok && same_run;
  }
  fs::remove_all(root);
  return {ok, ok ? std::to_string(commands.size()) + " commands byte-identical on re-run" : "differs:" + failed};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"differentiable PnP gradient check", diff_pnp_gradients},
      {"loss-stack gradient checks", loss_gradients},
      {"trajectory loss scale invariance", traj_scale_invariance},
      {"closed-form depth scale optimality", alpha_optimality},
      {"camera round-trip on all presets", camera_round_trip},
      {"metric oracle equivalence", metric_equivalence},
      {"similarity alignment recovery", alignment_recovery},
      {"test-time adaptation convergence", tta_convergence},
      {"CLI determinism", cli_determinism}};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("criterion %zu %s: %s (%s)\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
