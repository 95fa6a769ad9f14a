#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "worldtrack/camera_solver.hpp"
#include "worldtrack/error.hpp"
#include "worldtrack/geometry.hpp"

namespace worldtrack {

/// 2D track supervision (pseudo ground truth) for N queries over T frames.
struct TrackSupervision {
  PixelGrid grid;
  TrackSet2 tracks2d;
  std::vector<Pixel> query_pixels;
  /// Row-major N x T: pixel index in frame j that query n maps to, or -1.
  std::vector<std::int64_t> correspondence;

  std::size_t num_queries() const { return query_pixels.size(); }
  std::size_t num_frames() const { return tracks2d.num_frames(); }
  bool visible(std::size_t n, std::size_t j) const { return tracks2d.visible(n, j); }
  std::optional<std::size_t> corresponding_pixel(std::size_t n, std::size_t j) const {
    const auto c = correspondence[n * num_frames() + j];
    if (c < 0) return std::nullopt;
    return static_cast<std::size_t>(c);
  }

  /// Queries are the pixels holding each track's frame-0 position; the
  /// correspondence in frame j is the pixel containing the visible track.
  static TrackSupervision from_tracks(const TrackSet2& tracks, const PixelGrid& grid) {
    TrackSupervision sup;
    sup.grid = grid;
    sup.tracks2d = tracks;
    sup.query_pixels.resize(tracks.num_points());
    sup.correspondence.assign(tracks.num_points() * tracks.num_frames(), -1);
    for (std::size_t n = 0; n < tracks.num_points(); ++n) {
      if (tracks.num_frames() == 0 || !tracks.visible(n, 0))
        throw Error(ErrorCode::InvalidArgument, "every query must be visible in the anchor frame");
      const auto q = grid.containing(tracks.at(n, 0));
      if (!q) throw Error(ErrorCode::QueryOutOfBounds, "query pixel outside the grid");
      sup.query_pixels[n] = *q;
      for (std::size_t j = 0; j < tracks.num_frames(); ++j) {
        if (!tracks.visible(n, j)) continue;
        if (const auto p = grid.containing(tracks.at(n, j)))
          sup.correspondence[n * tracks.num_frames() + j] = static_cast<std::int64_t>(grid.index(*p));
      }
    }
    return sup;
  }
};

struct DepthMap {
  int width = 0;
  int height = 0;
  std::vector<double> depth;
  std::vector<std::uint8_t> valid;

  DepthMap() = default;
  DepthMap(int w, int h) : width(w), height(h), depth(static_cast<std::size_t>(w) * h, 0.0), valid(depth.size(), 0) {}
  std::size_t size() const { return depth.size(); }
  void set(std::size_t i, double z) {
    if (!(z > 0.0) || !std::isfinite(z)) throw Error(ErrorCode::InvalidArgument, "valid depths must be finite and positive");
    depth[i] = z;
    valid[i] = 1;
  }
  bool operator==(const DepthMap&) const = default;
};

struct DepthSupervision {
  std::vector<DepthMap> frames;
};

struct LossWeights {
  double traj = 1.0;
  double depth = 10.0;
  double align = 5.0;

  void validate() const {
    if (!(traj >= 0.0 && depth >= 0.0 && align >= 0.0))
      throw Error(ErrorCode::InvalidArgument, "loss weights must be nonnegative");
  }
};

struct FrameLoss {
  double traj = 0.0;
  double depth = 0.0;
  double align = 0.0;
  double total = 0.0;
  bool align_empty = false;
};

struct LossBreakdown {
  double traj = 0.0;
  double depth = 0.0;
  double align = 0.0;
  double total = 0.0;
  std::vector<FrameLoss> per_frame;
};

struct Reprojection {
  std::vector<Vec2> pixels;
  std::vector<Vec3> camera_points;
  std::vector<std::uint8_t> valid;
};

/// Projects the tracking-branch point of every query pixel into frame j.
/// Points with nonpositive camera depth, or invalid pointmap entries, are masked.
inline Reprojection reproject_tracks(const Pointmap& tracking, const PoseSE3& pose, const Intrinsics& k,
                                     std::span<const Pixel> queries) {
  require_tracking_branch(tracking, "reproject_tracks");
  const PixelGrid grid = tracking.grid();
  Reprojection out;
  out.pixels.assign(queries.size(), Vec2::Zero());
  out.camera_points.assign(queries.size(), Vec3::Zero());
  out.valid.assign(queries.size(), 0);
  for (std::size_t n = 0; n < queries.size(); ++n) {
    if (!grid.contains(queries[n])) throw Error(ErrorCode::QueryOutOfBounds, "query pixel outside the grid");
    const std::size_t idx = grid.index(queries[n]);
    if (!tracking.valid(idx)) continue;
    const Vec3 y = pose.apply(tracking.point(idx));
    out.camera_points[n] = y;
    if (const auto px = project_camera_point(k, y)) {
      out.pixels[n] = *px;
      out.valid[n] = 1;
    }
  }
  return out;
}

struct TrajLoss {
  double value = 0.0;
  double scale = 1.0;
  std::vector<Vec2> grad;  // d value / d pred, zero for unused pairs
  std::size_t used = 0;
  std::size_t dropped = 0;
};

inline constexpr double kMinTrackRadius = 1e-8;

/// Scale-invariant reprojection loss. Predictions are rescaled about `center`
/// by the mean ratio of target to predicted radii before the squared error.
inline TrajLoss traj_loss(std::span<const Vec2> pred, std::span<const Vec2> gt, const Vec2& center,
                          std::span<const std::uint8_t> visible) {
  if (pred.size() != gt.size() || pred.size() != visible.size())
    throw Error(ErrorCode::ShapeMismatch, "traj_loss inputs differ in length");
  TrajLoss out;
  out.grad.assign(pred.size(), Vec2::Zero());
  std::vector<std::size_t> used;
  bool any_visible = false;
  for (std::size_t n = 0; n < pred.size(); ++n) {
    if (!visible[n]) continue;
    any_visible = true;
    if ((pred[n] - center).norm() < kMinTrackRadius) {
      ++out.dropped;
      continue;
    }
    used.push_back(n);
  }
  if (!any_visible) throw Error(ErrorCode::AllOccluded, "no visible track pairs");
  if (used.empty()) throw Error(ErrorCode::DegenerateRadius, "every visible prediction sits on the image center");
  out.used = used.size();
  const double inv_n = 1.0 / static_cast<double>(used.size());

  double s = 0.0;
  for (std::size_t n : used) s += (gt[n] - center).norm() / (pred[n] - center).norm();
  s *= inv_n;
  out.scale = s;

  double loss = 0.0;
  double dl_ds = 0.0;
  for (std::size_t n : used) {
    const Vec2 d = pred[n] - center;
    const Vec2 res = s * d - (gt[n] - center);
    loss += res.squaredNorm();
    dl_ds += res.dot(d);
  }
  out.value = loss * inv_n;
  dl_ds *= 2.0 * inv_n;

  for (std::size_t n : used) {
    const Vec2 d = pred[n] - center;
    const double r = d.norm();
    const double a = (gt[n] - center).norm();
    const Vec2 res = s * d - (gt[n] - center);
    const Vec2 ds_dd = -(a / (r * r * r)) * inv_n * d;
    out.grad[n] = 2.0 * inv_n * s * res + dl_ds * ds_dd;
  }
  return out;
}

struct DepthLoss {
  double value = 0.0;
  double alpha = 1.0;
  std::vector<Vec3> grad_points;  // per pixel of the reconstruction pointmap
  PoseGradient grad_pose;
  std::size_t used = 0;
  std::size_t masked_nonpositive = 0;
};

/// Scale-aligned depth loss between the projected depth of a reconstruction
/// pointmap and a monocular depth map of unknown scale.
inline DepthLoss depth_loss(const Pointmap& recon, const PoseSE3& pose, const DepthMap& mono) {
  require_recon_branch(recon, "depth_loss");
  if (mono.width != recon.width() || mono.height != recon.height())
    throw Error(ErrorCode::ShapeMismatch, "depth map resolution differs from the pointmap");
  DepthLoss out;
  out.grad_points.assign(recon.size(), Vec3::Zero());
  std::vector<std::size_t> idx;
  std::vector<double> zp, zm;
  bool overlap = false;
  for (std::size_t i = 0; i < recon.size(); ++i) {
    if (!recon.valid(i) || !mono.valid[i]) continue;
    overlap = true;
    const double z = pose.rotation.row(2).dot(recon.point(i)) + pose.translation.z();
    if (!(z > 0.0)) {
      ++out.masked_nonpositive;
      continue;
    }
    idx.push_back(i);
    zp.push_back(z);
    zm.push_back(mono.depth[i]);
  }
  if (!overlap) throw Error(ErrorCode::NoOverlap, "no pixel is valid in both the pointmap and the depth map");
  if (idx.empty()) throw Error(ErrorCode::NonPositiveProjectedDepth, "every overlapping pixel projects behind the camera");
  out.used = idx.size();
  const double inv_n = 1.0 / static_cast<double>(idx.size());

  double szm = 0.0, szz = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    szm += zp[k] * zm[k];
    szz += zp[k] * zp[k];
  }
  const double alpha = szm / szz;
  out.alpha = alpha;

  double loss = 0.0, dl_dalpha = 0.0;
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const double r = alpha * zp[k] - zm[k];
    loss += r * r;
    dl_dalpha += r * zp[k];
  }
  out.value = loss * inv_n;
  dl_dalpha *= 2.0 * inv_n;  // vanishes at the optimum up to rounding

  const Vec3 r_row = pose.rotation.row(2).transpose();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const double r = alpha * zp[k] - zm[k];
    const double dalpha_dz = (zm[k] - 2.0 * alpha * zp[k]) / szz;
    const double g = 2.0 * inv_n * r * alpha + dl_dalpha * dalpha_dz;
    const Vec3& x = recon.point(idx[k]);
    out.grad_points[idx[k]] = g * r_row;
    out.grad_pose.rotation.row(2) += g * x.transpose();
    out.grad_pose.translation.z() += g;
  }
  return out;
}

struct AlignLoss {
  double value = 0.0;
  std::vector<Vec3> grad_tracking;  // per pixel
  std::vector<Vec3> grad_recon;     // per pixel
  std::size_t pairs = 0;
  bool no_visible_pairs = false;
};

/// 3D self-consistency between the tracking point of each query and the
/// reconstruction point at its corresponding pixel in frame j (summed).
inline AlignLoss align_loss(const Pointmap& tracking, const Pointmap& recon, const TrackSupervision& sup,
                            std::size_t frame) {
  require_tracking_branch(tracking, "align_loss");
  require_recon_branch(recon, "align_loss");
  if (tracking.width() != recon.width() || tracking.height() != recon.height())
    throw Error(ErrorCode::ShapeMismatch, "branch pointmaps differ in resolution");
  AlignLoss out;
  out.grad_tracking.assign(tracking.size(), Vec3::Zero());
  out.grad_recon.assign(recon.size(), Vec3::Zero());
  const PixelGrid grid = tracking.grid();
  for (std::size_t n = 0; n < sup.num_queries(); ++n) {
    if (!sup.visible(n, frame)) continue;
    const auto other = sup.corresponding_pixel(n, frame);
    if (!other) continue;
    const std::size_t q = grid.index(sup.query_pixels[n]);
    if (!tracking.valid(q) || !recon.valid(*other)) continue;
    const Vec3 d = tracking.point(q) - recon.point(*other);
    out.value += d.squaredNorm();
    out.grad_tracking[q] += 2.0 * d;
    out.grad_recon[*other] -= 2.0 * d;
    ++out.pairs;
  }
  out.no_visible_pairs = out.pairs == 0;
  return out;
}

struct SupervisedLoss {
  double value = 0.0;
  std::vector<Vec3> grad;  // d value / d pred, per pixel
  std::size_t used = 0;
};

/// Scale-normalized L2 regression: each cloud is divided by its mean point norm
/// over the masked pixels, then the mean squared distance is taken.
inline SupervisedLoss supervised_pointmap_loss(const Pointmap& pred, const Pointmap& gt,
                                               std::span<const std::uint8_t> mask) {
  if (pred.width() != gt.width() || pred.height() != gt.height() || mask.size() != pred.size())
    throw Error(ErrorCode::ShapeMismatch, "supervised loss inputs differ in shape");
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (mask[i] && pred.valid(i) && gt.valid(i)) idx.push_back(i);
  if (idx.empty()) throw Error(ErrorCode::EmptyMask, "no masked-in pixel is valid in both pointmaps");
  const double inv_m = 1.0 / static_cast<double>(idx.size());

  double mp = 0.0, mg = 0.0;
  for (std::size_t i : idx) {
    mp += pred.point(i).norm();
    mg += gt.point(i).norm();
  }
  mp *= inv_m;
  mg *= inv_m;
  if (!(mp > 0.0) || !(mg > 0.0)) throw Error(ErrorCode::DegenerateGeometry, "point cloud has zero mean norm");

  SupervisedLoss out;
  out.used = idx.size();
  out.grad.assign(pred.size(), Vec3::Zero());
  double loss = 0.0;
  double dl_dmp = 0.0;
  for (std::size_t i : idx) {
    const Vec3 d = pred.point(i) / mp - gt.point(i) / mg;
    loss += d.squaredNorm();
    dl_dmp += d.dot(pred.point(i));
  }
  out.value = loss * inv_m;
  dl_dmp *= -2.0 * inv_m / (mp * mp);
  for (std::size_t i : idx) {
    const Vec3& p = pred.point(i);
    const Vec3 d = p / mp - gt.point(i) / mg;
    const double norm = p.norm();
    const Vec3 dmp_dp = norm > 0.0 ? Vec3(inv_m * p / norm) : Vec3::Zero();
    out.grad[i] = 2.0 * inv_m * d / mp + dl_dmp * dmp_dp;
  }
  return out;
}

/// Everything the self-supervision objective reads for one video.
struct LossInputs {
  std::span<const Pointmap> tracking;
  std::span<const Pointmap> recon;
  Intrinsics intrinsics;
  std::span<const PoseSE3> poses;
  const TrackSupervision* tracks = nullptr;
  const DepthSupervision* depth = nullptr;
};

struct LossGradients {
  std::vector<std::vector<Vec3>> tracking;
  std::vector<std::vector<Vec3>> recon;
  std::vector<PoseGradient> poses;
};

/// Weighted sum of the trajectory, depth and alignment terms, each averaged
/// over frames. Fills `grads` (scaled by the weights) when non-null.
inline LossBreakdown total_loss(const LossInputs& in, const LossWeights& weights, LossGradients* grads = nullptr) {
  weights.validate();
  const std::size_t frames = in.tracking.size();
  if (frames == 0) throw Error(ErrorCode::EmptyVideo, "no frames");
  if (in.recon.size() != frames || in.poses.size() != frames || !in.tracks || !in.depth ||
      in.tracks->num_frames() != frames || in.depth->frames.size() != frames)
    throw Error(ErrorCode::ShapeMismatch, "loss inputs disagree on the number of frames");

  const TrackSupervision& sup = *in.tracks;
  const Vec2 center = sup.grid.center();
  const double inv_t = 1.0 / static_cast<double>(frames);
  if (grads) {
    grads->tracking.assign(frames, std::vector<Vec3>(in.tracking.front().size(), Vec3::Zero()));
    grads->recon.assign(frames, std::vector<Vec3>(in.recon.front().size(), Vec3::Zero()));
    grads->poses.assign(frames, PoseGradient{});
  }

  LossBreakdown out;
  out.per_frame.resize(frames);
  for (std::size_t j = 0; j < frames; ++j) {
    try {
      FrameLoss& fl = out.per_frame[j];
      const PoseSE3& pose = in.poses[j];

      const Reprojection rp = reproject_tracks(in.tracking[j], pose, in.intrinsics, sup.query_pixels);
      std::vector<Vec2> gt(sup.num_queries());
      std::vector<std::uint8_t> vis(sup.num_queries());
      for (std::size_t n = 0; n < sup.num_queries(); ++n) {
        gt[n] = sup.tracks2d.at(n, j);
        vis[n] = (sup.visible(n, j) && rp.valid[n]) ? 1 : 0;
      }
      const TrajLoss traj = traj_loss(rp.pixels, gt, center, vis);
      fl.traj = traj.value;

      const DepthLoss depth = depth_loss(in.recon[j], pose, in.depth->frames[j]);
      fl.depth = depth.value;

      const AlignLoss align = align_loss(in.tracking[j], in.recon[j], sup, j);
      fl.align = align.value;
      fl.align_empty = align.no_visible_pairs;
      fl.total = weights.traj * fl.traj + weights.depth * fl.depth + weights.align * fl.align;

      if (grads) {
        const double wt = weights.traj * inv_t, wd = weights.depth * inv_t, wa = weights.align * inv_t;
        auto& gtr = grads->tracking[j];
        auto& grc = grads->recon[j];
        PoseGradient& gp = grads->poses[j];
        const PixelGrid grid = in.tracking[j].grid();
        for (std::size_t n = 0; n < sup.num_queries(); ++n) {
          if (traj.grad[n].isZero(0.0)) continue;
          const std::size_t q = grid.index(sup.query_pixels[n]);
          const Vec3 gy = wt * (projection_jacobian(in.intrinsics, rp.camera_points[n]).transpose() * traj.grad[n]);
          gtr[q] += pose.rotation.transpose() * gy;
          gp.rotation += gy * in.tracking[j].point(q).transpose();
          gp.translation += gy;
        }
        for (std::size_t i = 0; i < grc.size(); ++i) grc[i] += wd * depth.grad_points[i];
        gp.rotation += wd * depth.grad_pose.rotation;
        gp.translation += wd * depth.grad_pose.translation;
        for (std::size_t i = 0; i < gtr.size(); ++i) gtr[i] += wa * align.grad_tracking[i];
        for (std::size_t i = 0; i < grc.size(); ++i) grc[i] += wa * align.grad_recon[i];
      }
    } catch (const Error& e) {
      throw e.at_frame(static_cast<int>(j));
    }
  }
  for (const auto& fl : out.per_frame) {
    out.traj += fl.traj;
    out.depth += fl.depth;
    out.align += fl.align;
  }
  out.traj *= inv_t;
  out.depth *= inv_t;
  out.align *= inv_t;
  out.total = weights.traj * out.traj + weights.depth * out.depth + weights.align * out.align;
  return out;
}

}  // namespace worldtrack
