#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "worldtrack/camera_solver.hpp"
#include "worldtrack/error.hpp"
#include "worldtrack/geometry.hpp"
#include "worldtrack/losses.hpp"

namespace worldtrack {

struct SolverConfigs {
  RansacConfig ransac;
  GNConfig gn;
  int weiszfeld_iterations = 10;
};

/// Free per-frame pointmaps standing in for the network outputs being adapted.
struct AdaptState {
  std::vector<Pointmap> tracking;
  std::vector<Pointmap> recon;
  bool freeze_recon = true;
  double step_size = 1e-2;
  int steps = 500;
  std::uint64_t seed = 0;
  bool cosine_decay = false;
};

struct AdaptResult {
  AdaptState state;
  /// Loss at the start of every step, before that step's update.
  std::vector<LossBreakdown> trace;
  VideoCameras cameras;
};

struct ChainedLoss {
  LossBreakdown loss;
  LossGradients grads;
  std::vector<PoseEstimate> poses;
};

/// One differentiable GN step per frame from the detached poses in `cams`,
/// using the current reconstruction points at each frame's inlier pixels.
inline std::vector<PoseEstimate> refine_poses(std::span<const Pointmap> recon, const VideoCameras& cams,
                                              const GNConfig& gn) {
  std::vector<PoseEstimate> poses(recon.size());
  poses[0] = cams.poses[0];
  for (std::size_t j = 1; j < recon.size(); ++j) {
    try {
      PoseEstimate base;
      base.pose = cams.poses[j].detached;
      base.inliers = cams.poses[j].inliers;
      poses[j] = gauss_newton_refine(base, gather_correspondences(recon[j], cams.inlier_pixels[j]), cams.intrinsics, gn);
    } catch (const Error& e) {
      throw e.at_frame(static_cast<int>(j));
    }
  }
  return poses;
}

/// Total loss with camera poses that depend on the reconstruction points
/// through the GN increment; reconstruction gradients include that path.
inline ChainedLoss evaluate_with_pose_chain(std::span<const Pointmap> tracking, std::span<const Pointmap> recon,
                                            const VideoCameras& cams, const TrackSupervision& sup,
                                            const DepthSupervision& depth, const LossWeights& weights,
                                            const GNConfig& gn) {
  ChainedLoss out;
  out.poses = refine_poses(recon, cams, gn);
  std::vector<PoseSE3> poses;
  poses.reserve(out.poses.size());
  for (const auto& p : out.poses) poses.push_back(p.pose);
  LossInputs in{tracking, recon, cams.intrinsics, poses, &sup, &depth};
  out.loss = total_loss(in, weights, &out.grads);
  for (std::size_t j = 1; j < recon.size(); ++j) {
    const auto& pixels = cams.inlier_pixels[j];
    const auto corr = gather_correspondences(recon[j], pixels);
    const auto g = pose_gradient_wrt_points(out.poses[j], corr, cams.intrinsics, out.grads.poses[j], gn);
    for (std::size_t n = 0; n < pixels.size(); ++n) out.grads.recon[j][pixels[n]] += g[n];
  }
  return out;
}

/// Gradient-descent adaptation of the tracking pointmaps (and, when not
/// frozen, the reconstruction pointmaps) against track and depth supervision.
inline AdaptResult tta_optimize(AdaptState state, const TrackSupervision& sup, const DepthSupervision& depth,
                                const LossWeights& weights, const SolverConfigs& solvers) {
  weights.validate();
  if (state.steps < 0) throw Error(ErrorCode::InvalidArgument, "steps must be nonnegative");
  if (!(state.step_size > 0.0)) throw Error(ErrorCode::InvalidArgument, "step size must be positive");
  const std::size_t frames = state.tracking.size();
  if (frames == 0) throw Error(ErrorCode::EmptyVideo, "no frames to adapt");
  if (state.recon.size() != frames || sup.num_frames() != frames || depth.frames.size() != frames)
    throw Error(ErrorCode::ShapeMismatch, "adaptation inputs disagree on the number of frames");

  AdaptResult result;
  if (state.steps == 0) {
    result.state = std::move(state);
    return result;
  }

  RansacConfig ransac = solvers.ransac;
  ransac.seed = state.seed;
  VideoCameras cams = solve_cameras_for_video(state.recon, state.recon.front().grid(), ransac, solvers.gn,
                                              solvers.weiszfeld_iterations);
  std::vector<PoseSE3> frozen_poses;
  for (const auto& p : cams.poses) frozen_poses.push_back(p.pose);

  double initial = 0.0;
  result.trace.reserve(static_cast<std::size_t>(state.steps));
  for (int step = 0; step < state.steps; ++step) {
    LossBreakdown loss;
    LossGradients grads;
    if (state.freeze_recon) {
      LossInputs in{state.tracking, state.recon, cams.intrinsics, frozen_poses, &sup, &depth};
      loss = total_loss(in, weights, &grads);
    } else {
      if (step > 0) {
        for (std::size_t j = 1; j < frames; ++j) {
          const auto corr = gather_correspondences(state.recon[j], cams.inlier_pixels[j]);
          cams.poses[j].detached = detail::polish(cams.poses[j].detached, corr, cams.intrinsics);
        }
      }
      ChainedLoss chained = evaluate_with_pose_chain(state.tracking, state.recon, cams, sup, depth, weights, solvers.gn);
      for (std::size_t j = 1; j < frames; ++j) {
        cams.poses[j].pose = chained.poses[j].pose;
        cams.poses[j].increment = chained.poses[j].increment;
        cams.poses[j].rms_reprojection_error = chained.poses[j].rms_reprojection_error;
      }
      loss = std::move(chained.loss);
      grads = std::move(chained.grads);
    }

    if (step == 0) initial = loss.total;
    if (!std::isfinite(loss.total) || loss.total > 10.0 * initial + 1e-12)
      throw Error(ErrorCode::DivergenceDetected,
                  "total loss " + std::to_string(loss.total) + " exceeds 10x its initial value " + std::to_string(initial));
    result.trace.push_back(std::move(loss));

    double lr = state.step_size;
    if (state.cosine_decay) lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * step / state.steps));
    for (std::size_t j = 0; j < frames; ++j) {
      for (std::size_t i = 0; i < state.tracking[j].size(); ++i) state.tracking[j].displace(i, -lr * grads.tracking[j][i]);
      if (!state.freeze_recon)
        for (std::size_t i = 0; i < state.recon[j].size(); ++i) state.recon[j].displace(i, -lr * grads.recon[j][i]);
    }
  }
  result.state = std::move(state);
  result.cameras = std::move(cams);
  return result;
}

}  // namespace worldtrack
