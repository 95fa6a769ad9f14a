#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "worldtrack/adaptation.hpp"
#include "worldtrack/camera_solver.hpp"
#include "worldtrack/losses.hpp"
#include "worldtrack/oracle.hpp"

namespace worldtrack {

struct GradcheckConfig {
  std::uint64_t seed = 0;
  int trials = 50;
  double loss_step = 1e-6;
  double pnp_step = 1e-5;
  double tolerance = 1e-4;
  /// Negates every analytic gradient; used to confirm the checker can fail.
  bool inject_sign_flip = false;
};

struct ComponentResult {
  std::string name;
  double max_relative_error = 0.0;
  int instances = 0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<ComponentResult> components;
  bool passed() const {
    return std::all_of(components.begin(), components.end(), [](const auto& c) { return c.passed; });
  }
};

/// max|a - n| / max(|a|_inf, |n|_inf); zero when both vectors vanish.
inline double gradient_relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return scale > 0.0 ? diff / scale : 0.0;
}

namespace gradcheck {

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
inline Vec3 uniform3(Rng& rng, double lo, double hi) { return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)}; }

inline double central(const std::function<double(double)>& f, double h) { return (f(h) - f(-h)) / (2.0 * h); }

inline PoseSE3 random_pose(Rng& rng, double rot, double trans) {
  return {so3_exp(uniform3(rng, -rot, rot)), uniform3(rng, -trans, trans)};
}

/// Dense random pointmap in front of the identity camera.
inline Pointmap random_pointmap(Rng& rng, int w, int h, FrameTag tag) {
  Pointmap pm(w, h, tag);
  for (std::size_t i = 0; i < pm.size(); ++i) pm.set(i, Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, 2, 5)));
  return pm;
}

inline double traj_instance(Rng& rng, const GradcheckConfig& cfg) {
  const std::size_t n = 12;
  const Vec2 center(32.0, 24.0);
  std::vector<Vec2> pred(n), gt(n);
  std::vector<std::uint8_t> vis(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    gt[i] = Vec2(uniform(rng, 2, 62), uniform(rng, 2, 46));
    pred[i] = gt[i] + Vec2(uniform(rng, -3, 3), uniform(rng, -3, 3));
  }
  vis[3] = 0;
  const TrajLoss base = traj_loss(pred, gt, center, vis);
  std::vector<double> a, num;
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 2; ++c) {
      a.push_back(base.grad[i](c));
      num.push_back(central(
          [&](double h) {
            auto p = pred;
            p[i](c) += h;
            return traj_loss(p, gt, center, vis).value;
          },
          cfg.loss_step));
    }
  if (cfg.inject_sign_flip)
    for (auto& v : a) v = -v;
  return gradient_relative_error(a, num);
}

inline double depth_instance(Rng& rng, const GradcheckConfig& cfg) {
  const int w = 6, h = 5;
  Pointmap recon = random_pointmap(rng, w, h, recon_tag(1));
  recon.invalidate(4);
  const PoseSE3 pose = random_pose(rng, 0.1, 0.2);
  DepthMap mono(w, h);
  for (std::size_t i = 0; i < mono.size(); ++i)
    if (i != 7 && recon.valid(i)) mono.set(i, 0.7 * pose.apply(recon.point(i)).z() * (1.0 + uniform(rng, -0.2, 0.2)));

  const DepthLoss base = depth_loss(recon, pose, mono);
  std::vector<double> a, num;
  for (std::size_t i = 0; i < recon.size(); ++i) {
    if (!recon.valid(i)) continue;
    for (int c = 0; c < 3; ++c) {
      a.push_back(base.grad_points[i](c));
      num.push_back(central(
          [&](double d) {
            Pointmap p = recon;
            Vec3 delta = Vec3::Zero();
            delta(c) = d;
            p.displace(i, delta);
            return depth_loss(p, pose, mono).value;
          },
          cfg.loss_step));
    }
  }
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) {
      a.push_back(c < 3 ? base.grad_pose.rotation(r, c) : base.grad_pose.translation(r));
      num.push_back(central(
          [&](double d) {
            PoseSE3 p = pose;
            if (c < 3) p.rotation(r, c) += d;
            else p.translation(r) += d;
            return depth_loss(recon, p, mono).value;
          },
          cfg.loss_step));
    }
  if (cfg.inject_sign_flip)
    for (auto& v : a) v = -v;
  return gradient_relative_error(a, num);
}

inline double align_instance(Rng& rng, const GradcheckConfig& cfg) {
  const int w = 6, h = 5;
  const PixelGrid grid{w, h};
  Pointmap tracking = random_pointmap(rng, w, h, tracking_tag(2));
  Pointmap recon = random_pointmap(rng, w, h, recon_tag(2));
  TrackSet2 tracks(8, 3);
  std::uniform_int_distribution<int> col(0, w - 1), row(0, h - 1);
  for (std::size_t n = 0; n < tracks.num_points(); ++n)
    for (std::size_t t = 0; t < 3; ++t) {
      tracks.at(n, t) = grid.coordinate(Pixel{row(rng), col(rng)}) + Vec2(uniform(rng, -0.4, 0.4), uniform(rng, -0.4, 0.4));
      tracks.set_visible(n, t, t == 0 || uniform(rng, 0, 1) < 0.8);
    }
  const TrackSupervision sup = TrackSupervision::from_tracks(tracks, grid);
  const AlignLoss base = align_loss(tracking, recon, sup, 2);
  std::vector<double> a, num;
  auto probe = [&](Pointmap& target, const std::vector<Vec3>& grad) {
    for (std::size_t i = 0; i < target.size(); ++i)
      for (int c = 0; c < 3; ++c) {
        a.push_back(grad[i](c));
        num.push_back(central(
            [&](double d) {
              const Vec3 saved = target.point(i);
              Vec3 moved = saved;
              moved(c) += d;
              target.set(i, moved);
              const double v = align_loss(tracking, recon, sup, 2).value;
              target.set(i, saved);
              return v;
            },
            cfg.loss_step));
      }
  };
  probe(tracking, base.grad_tracking);
  probe(recon, base.grad_recon);
  if (cfg.inject_sign_flip)
    for (auto& v : a) v = -v;
  return gradient_relative_error(a, num);
}

inline double supervised_instance(Rng& rng, const GradcheckConfig& cfg) {
  const int w = 6, h = 5;
  Pointmap pred = random_pointmap(rng, w, h, recon_tag(0));
  Pointmap gt = random_pointmap(rng, w, h, recon_tag(0));
  std::vector<std::uint8_t> mask(pred.size(), 1);
  mask[2] = 0;
  mask[11] = 0;
  const SupervisedLoss base = supervised_pointmap_loss(pred, gt, mask);
  std::vector<double> a, num;
  for (std::size_t i = 0; i < pred.size(); ++i)
    for (int c = 0; c < 3; ++c) {
      a.push_back(base.grad[i](c));
      num.push_back(central(
          [&](double d) {
            Pointmap p = pred;
            Vec3 delta = Vec3::Zero();
            delta(c) = d;
            p.displace(i, delta);
            return supervised_pointmap_loss(p, gt, mask).value;
          },
          cfg.loss_step));
    }
  if (cfg.inject_sign_flip)
    for (auto& v : a) v = -v;
  return gradient_relative_error(a, num);
}

/// L(X) = <A, R(X)> + <b, T(X)> for the GN-refined pose R(X), T(X).
inline double diff_pnp_instance(Rng& rng, const GradcheckConfig& cfg) {
  const Intrinsics k = Intrinsics::centered(56.0, 64, 48);
  const PoseSE3 truth = random_pose(rng, 0.2, 0.3);
  Correspondences2D3D corr;
  std::normal_distribution<double> noise(0.0, 0.5);
  while (corr.size() < 24) {
    const Vec3 y(uniform(rng, -1.5, 1.5), uniform(rng, -1.1, 1.1), uniform(rng, 2.0, 5.0));
    const auto px = project_camera_point(k, y);
    if (!px) continue;
    corr.points.push_back(truth.inverse().apply(y));
    corr.pixels.push_back(*px + Vec2(noise(rng), noise(rng)));
    corr.weights.push_back(uniform(rng, 0.5, 1.5));
  }
  PoseEstimate start;
  start.pose = detail::apply_increment((Vec6() << uniform3(rng, -0.01, 0.01), uniform3(rng, -0.02, 0.02)).finished(), truth);
  const GNConfig gn;

  PoseGradient upstream;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) upstream.rotation(r, c) = uniform(rng, -1, 1);
    upstream.translation(r) = uniform(rng, -1, 1);
  }
  auto objective = [&](const Correspondences2D3D& c) {
    const PoseSE3 p = gauss_newton_refine(start, c, k, gn).pose;
    return (upstream.rotation.array() * p.rotation.array()).sum() + upstream.translation.dot(p.translation);
  };

  const PoseEstimate refined = gauss_newton_refine(start, corr, k, gn);
  const auto grads = pose_gradient_wrt_points(refined, corr, k, upstream, gn);
  std::vector<double> a, num;
  for (std::size_t i = 0; i < corr.size(); ++i)
    for (int c = 0; c < 3; ++c) {
      a.push_back(grads[i](c));
      num.push_back(central(
          [&](double d) {
            Correspondences2D3D moved = corr;
            moved.points[i](c) += d;
            return objective(moved);
          },
          cfg.pnp_step));
    }
  if (cfg.inject_sign_flip)
    for (auto& v : a) v = -v;
  return gradient_relative_error(a, num);
}

/// Total self-supervised loss on a small oracle video with poses re-derived
/// from the reconstruction points; probes a sample of reconstruction coordinates.
inline double pose_chain_instance(Rng& rng, std::uint64_t seed, const GradcheckConfig& cfg) {
  const SceneOptions opts{4, 16, 12};
  const RenderedSequence clean = render(generate_scene("dyn-cam-dyn-scene", seed, opts));
  const RenderedSequence seq = corrupt(clean, 0.02, 0.005, seed, {true, true});
  const TrackSupervision sup = seq.track_supervision();
  const DepthSupervision depth = seq.depth_supervision();
  const LossWeights weights;
  const GNConfig gn;
  RansacConfig ransac;
  ransac.seed = seed;
  ransac.inlier_threshold = 4.0;
  const VideoCameras cams = solve_cameras_for_video(seq.recon_pointmaps, seq.grid(), ransac, gn);
  const ChainedLoss base = evaluate_with_pose_chain(seq.tracking_pointmaps, seq.recon_pointmaps, cams, sup, depth, weights, gn);

  std::vector<double> a, num;
  std::uniform_int_distribution<std::size_t> frame(1, seq.num_frames() - 1);
  for (int probe = 0; probe < 12; ++probe) {
    const std::size_t j = frame(rng);
    const auto& pixels = cams.inlier_pixels[j];
    const std::size_t pix = pixels[std::uniform_int_distribution<std::size_t>(0, pixels.size() - 1)(rng)];
    const int c = static_cast<int>(probe % 3);
    a.push_back(base.grads.recon[j][pix](c));
    num.push_back(central(
        [&](double d) {
          std::vector<Pointmap> recon = seq.recon_pointmaps;
          Vec3 delta = Vec3::Zero();
          delta(c) = d;
          recon[j].displace(pix, delta);
          return evaluate_with_pose_chain(seq.tracking_pointmaps, recon, cams, sup, depth, weights, gn).loss.total;
        },
        cfg.loss_step));
  }
  if (cfg.inject_sign_flip)
    for (auto& v : a) v = -v;
  return gradient_relative_error(a, num);
}

}  // namespace gradcheck

/// Finite-difference checks of every analytic gradient in the loss stack and
/// the differentiable PnP chain. Each component runs `trials` random instances.
inline GradcheckReport run_gradient_checks(const GradcheckConfig& cfg) {
  if (cfg.trials < 1) throw Error(ErrorCode::InvalidArgument, "trials must be at least 1");
  GradcheckReport report;
  auto run = [&](const std::string& name, std::uint64_t salt, const std::function<double(gradcheck::Rng&, std::uint64_t)>& fn) {
    ComponentResult res{name, 0.0, cfg.trials, false};
    for (int t = 0; t < cfg.trials; ++t) {
      const std::uint64_t s = cfg.seed * 1000003ull + salt * 7919ull + static_cast<std::uint64_t>(t);
      gradcheck::Rng rng(s);
      res.max_relative_error = std::max(res.max_relative_error, fn(rng, s));
    }
    res.passed = res.max_relative_error < cfg.tolerance;
    report.components.push_back(res);
  };
  run("traj", 1, [&](auto& rng, auto) { return gradcheck::traj_instance(rng, cfg); });
  run("depth", 2, [&](auto& rng, auto) { return gradcheck::depth_instance(rng, cfg); });
  run("align", 3, [&](auto& rng, auto) { return gradcheck::align_instance(rng, cfg); });
  run("supervised", 4, [&](auto& rng, auto) { return gradcheck::supervised_instance(rng, cfg); });
  run("diff_pnp", 5, [&](auto& rng, auto) { return gradcheck::diff_pnp_instance(rng, cfg); });
  run("pose_chain", 6, [&](auto& rng, auto s) { return gradcheck::pose_chain_instance(rng, s, cfg); });
  return report;
}

}  // namespace worldtrack
