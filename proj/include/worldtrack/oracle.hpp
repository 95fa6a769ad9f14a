#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Geometry>

#include "worldtrack/error.hpp"
#include "worldtrack/geometry.hpp"
#include "worldtrack/losses.hpp"
#include "worldtrack/parallel.hpp"

namespace worldtrack {

/// Analytic surface: a rectangle (center, two orthogonal half-extent axes) or a sphere.
struct Primitive {
  enum class Kind { Quad, Sphere };

  Kind kind = Kind::Quad;
  Vec3 center = Vec3::Zero();
  Vec3 axis_u = Vec3::UnitX();
  Vec3 axis_v = Vec3::UnitY();
  double radius = 0.0;

  static Primitive quad(const Vec3& center, const Vec3& half_u, const Vec3& half_v) {
    return {Kind::Quad, center, half_u, half_v, 0.0};
  }
  static Primitive sphere(const Vec3& center, double radius) {
    return {Kind::Sphere, center, Vec3::Zero(), Vec3::Zero(), radius};
  }

  /// Smallest ray parameter t > min_t at which origin + t * dir meets the surface.
  std::optional<double> intersect(const Vec3& origin, const Vec3& dir, double min_t = 1e-9) const {
    if (kind == Kind::Quad) {
      const Vec3 normal = axis_u.cross(axis_v);
      const double denom = normal.dot(dir);
      if (std::abs(denom) < 1e-15) return std::nullopt;
      const double t = normal.dot(center - origin) / denom;
      if (!(t > min_t)) return std::nullopt;
      const Vec3 rel = origin + t * dir - center;
      const double a = rel.dot(axis_u) / axis_u.squaredNorm();
      const double b = rel.dot(axis_v) / axis_v.squaredNorm();
      if (std::abs(a) > 1.0 || std::abs(b) > 1.0) return std::nullopt;
      return t;
    }
    const Vec3 oc = origin - center;
    const double qa = dir.squaredNorm();
    const double qb = oc.dot(dir);
    const double qc = oc.squaredNorm() - radius * radius;
    const double disc = qb * qb - qa * qc;
    if (disc < 0.0) return std::nullopt;
    const double root = std::sqrt(disc);
    const double t0 = (-qb - root) / qa;
    if (t0 > min_t) return t0;
    const double t1 = (-qb + root) / qa;
    if (t1 > min_t) return t1;
    return std::nullopt;
  }
};

/// Rigid body: primitives in frame-0 world coordinates and, per frame, the
/// motion taking frame-0 positions to frame-j positions (identity at frame 0).
struct Body {
  std::vector<Primitive> primitives;
  std::vector<PoseSE3> trajectory;

  bool is_moving() const {
    for (const auto& m : trajectory)
      if (!m.rotation.isIdentity(0.0) || !m.translation.isZero(0.0)) return true;
    return false;
  }
};

struct SceneSpec {
  std::string preset;
  std::vector<Primitive> static_primitives;
  std::vector<Body> bodies;
  std::vector<PoseSE3> camera_path;  // world-to-camera; frame 0 is the world
  Intrinsics intrinsics;
  int width = 64;
  int height = 48;
  int num_frames = 64;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_frames < 1) throw Error(ErrorCode::EmptyVideo, "scene needs at least one frame");
    if (width < 1 || height < 1) throw Error(ErrorCode::InvalidArgument, "resolution must be positive");
    if (camera_path.size() != static_cast<std::size_t>(num_frames))
      throw Error(ErrorCode::ShapeMismatch, "camera path length differs from the frame count");
    for (const auto& b : bodies)
      if (b.trajectory.size() != static_cast<std::size_t>(num_frames))
        throw Error(ErrorCode::ShapeMismatch, "body trajectory length differs from the frame count");
  }
};

struct SceneOptions {
  int num_frames = 64;
  int width = 64;
  int height = 48;
};

inline constexpr std::array<std::string_view, 4> kScenePresets = {
    "static-cam-dyn-scene", "dyn-cam-static-scene", "dyn-cam-dyn-scene", "degenerate-planar"};

struct CorruptionRecord {
  double noise_std = 0.0;
  double drift_per_frame = 0.0;
  Vec3 drift_direction = Vec3::Zero();
  std::uint64_t seed = 0;
  bool recon = false;
};

/// Exact outputs of the ideal two-branch predictor for a scene, plus ground truth.
struct RenderedSequence {
  std::string preset;
  std::uint64_t seed = 0;
  int width = 0;
  int height = 0;
  Intrinsics intrinsics;
  std::vector<PoseSE3> cameras;
  std::vector<Pointmap> tracking_pointmaps;  // anchor content at time j
  std::vector<Pointmap> recon_pointmaps;     // frame j content at time j
  std::vector<DepthMap> depth;
  std::vector<Pixel> queries;                // every valid anchor pixel, row-major
  TrackSet3 tracks3d_world;
  TrackSet2 tracks2d;
  std::optional<CorruptionRecord> corruption;

  std::size_t num_frames() const { return cameras.size(); }
  PixelGrid grid() const { return {width, height}; }
  TrackSupervision track_supervision() const { return TrackSupervision::from_tracks(tracks2d, grid()); }
  DepthSupervision depth_supervision() const { return {depth}; }
};

namespace detail {

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  int owner = -1;  // -1: static geometry, otherwise body index
  Vec3 local = Vec3::Zero();
};

inline std::optional<Hit> cast_ray(const SceneSpec& spec, std::size_t frame, const Vec3& origin, const Vec3& dir) {
  Hit best;
  bool found = false;
  for (const auto& prim : spec.static_primitives) {
    if (const auto t = prim.intersect(origin, dir); t && *t < best.t) {
      best = {*t, -1, origin + *t * dir};
      found = true;
    }
  }
  for (std::size_t b = 0; b < spec.bodies.size(); ++b) {
    const PoseSE3 inv = spec.bodies[b].trajectory[frame].inverse();
    const Vec3 lo = inv.apply(origin);
    const Vec3 ld = inv.rotation * dir;
    for (const auto& prim : spec.bodies[b].primitives) {
      if (const auto t = prim.intersect(lo, ld); t && *t < best.t) {
        best = {*t, static_cast<int>(b), lo + *t * ld};
        found = true;
      }
    }
  }
  if (!found) return std::nullopt;
  return best;
}

/// World-space ray through an image position of camera `pose`; its parameter equals camera depth.
inline std::pair<Vec3, Vec3> camera_ray(const Intrinsics& k, const PoseSE3& pose, const Vec2& x) {
  const Vec3 d_cam((x.x() - k.cx) / k.focal, (x.y() - k.cy) / k.focal, 1.0);
  return {pose.center(), pose.rotation.transpose() * d_cam};
}

/// Rigid motion rotating by `rot` about `pivot` and then translating by `shift`.
inline PoseSE3 motion_about(const Vec3& pivot, const Mat3& rot, const Vec3& shift) {
  return {rot, pivot + shift - rot * pivot};
}

inline std::vector<Primitive> box(const Vec3& center, const Mat3& orientation, double half) {
  std::vector<Primitive> faces;
  for (int axis = 0; axis < 3; ++axis) {
    const Vec3 n = orientation.col(axis) * half;
    const Vec3 u = orientation.col((axis + 1) % 3) * half;
    const Vec3 v = orientation.col((axis + 2) % 3) * half;
    faces.push_back(Primitive::quad(center + n, u, v));
    faces.push_back(Primitive::quad(center - n, u, v));
  }
  return faces;
}

inline Mat3 rot_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }
inline Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
inline Mat3 rot_z(double a) { return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix(); }

}  // namespace detail

/// Deterministic scene per (preset, seed). Frame 0's camera is the world frame.
inline SceneSpec generate_scene(std::string_view preset, std::uint64_t seed, const SceneOptions& opts = {}) {
  const bool known = std::find(kScenePresets.begin(), kScenePresets.end(), preset) != kScenePresets.end();
  if (!known) throw Error(ErrorCode::UnknownPreset, "unknown scene preset '" + std::string(preset) + "'");
  if (opts.num_frames < 1) throw Error(ErrorCode::EmptyVideo, "scene needs at least one frame");

  SceneSpec spec;
  spec.preset = std::string(preset);
  spec.seed = seed;
  spec.width = opts.width;
  spec.height = opts.height;
  spec.num_frames = opts.num_frames;
  spec.intrinsics = Intrinsics::centered(0.875 * opts.width, opts.width, opts.height);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  auto vary = [&](double base, double rel) { return base * (1.0 + rel * jitter(rng)); };

  const auto frames = static_cast<std::size_t>(opts.num_frames);
  const bool moving_camera = preset != "static-cam-dyn-scene";
  const bool moving_bodies = preset == "static-cam-dyn-scene" || preset == "dyn-cam-dyn-scene";

  if (preset == "degenerate-planar") {
    const Mat3 tilt = detail::rot_y(vary(0.35, 0.3)) * detail::rot_x(vary(0.15, 0.5));
    spec.static_primitives.push_back(
        Primitive::quad(Vec3(0.0, 0.0, vary(3.5, 0.1)), tilt * Vec3(9.0, 0.0, 0.0), tilt * Vec3(0.0, 9.0, 0.0)));
  } else {
    spec.static_primitives.push_back(Primitive::quad(Vec3(0.0, 0.0, 4.5), Vec3(7.0, 0.0, 0.0), Vec3(0.0, 5.0, 0.0)));
    spec.static_primitives.push_back(Primitive::quad(Vec3(0.0, 1.2, 2.5), Vec3(7.0, 0.0, 0.0), Vec3(0.0, 0.0, 2.0)));

    const Vec3 box_center(vary(-0.75, 0.1), vary(0.35, 0.2), vary(2.4, 0.05));
    const double box_half = vary(0.35, 0.1);
    const Vec3 box_velocity(vary(0.010, 0.3), 0.0, vary(-0.004, 0.3));
    const double box_spin = vary(0.012, 0.3);
    Body box;
    box.primitives = detail::box(box_center, detail::rot_y(vary(0.5, 0.3)), box_half);

    const Vec3 ball_center(vary(0.85, 0.1), vary(0.2, 0.3), vary(3.3, 0.05));
    const double ball_swing = vary(0.3, 0.2);
    Body ball;
    ball.primitives.push_back(Primitive::sphere(ball_center, vary(0.45, 0.1)));

    for (std::size_t j = 0; j < frames; ++j) {
      const double t = static_cast<double>(j);
      if (moving_bodies && j > 0) {
        box.trajectory.push_back(detail::motion_about(box_center, detail::rot_y(box_spin * t), box_velocity * t));
        ball.trajectory.push_back(detail::motion_about(
            ball_center, detail::rot_z(0.02 * t),
            Vec3(ball_swing * std::sin(0.08 * t), -0.1 * std::sin(0.05 * t), 0.0)));
      } else {
        box.trajectory.push_back(PoseSE3::identity());
        ball.trajectory.push_back(PoseSE3::identity());
      }
    }
    spec.bodies.push_back(std::move(box));
    spec.bodies.push_back(std::move(ball));
  }

  const double ax = vary(0.35, 0.2), ay = vary(0.08, 0.2), az = vary(0.3, 0.2);
  const double yaw = vary(0.06, 0.3), pitch = vary(0.03, 0.3), roll = vary(0.01, 0.3);
  for (std::size_t j = 0; j < frames; ++j) {
    if (!moving_camera || j == 0) {
      spec.camera_path.push_back(PoseSE3::identity());
      continue;
    }
    const double t = static_cast<double>(j);
    const Vec3 center(ax * std::sin(0.05 * t), ay * (1.0 - std::cos(0.07 * t)), az * t / 64.0);
    const Mat3 cam_to_world = detail::rot_y(yaw * std::sin(0.04 * t)) * detail::rot_x(pitch * std::sin(0.06 * t)) *
                              detail::rot_z(roll * std::sin(0.05 * t));
    const Mat3 r = cam_to_world.transpose();
    spec.camera_path.push_back({r, -(r * center)});
  }
  return spec;
}

/// Ray-casts every frame at pixel centers. Anchor pixels own the surface point
/// they see at frame 0; the tracking pointmap carries that point along its
/// body's motion, the reconstruction pointmap stores what each frame sees.
inline RenderedSequence render(const SceneSpec& spec) {
  spec.validate();
  const PixelGrid grid{spec.width, spec.height};
  const auto frames = static_cast<std::size_t>(spec.num_frames);
  const Intrinsics& k = spec.intrinsics;

  RenderedSequence seq;
  seq.preset = spec.preset;
  seq.seed = spec.seed;
  seq.width = spec.width;
  seq.height = spec.height;
  seq.intrinsics = k;
  seq.cameras = spec.camera_path;
  seq.recon_pointmaps.resize(frames);
  seq.depth.resize(frames);

  std::vector<detail::Hit> anchor_hits(grid.size());
  std::vector<std::uint8_t> anchor_valid(grid.size(), 0);

  parallel_for(frames, [&](std::size_t j) {
    Pointmap recon(spec.width, spec.height, recon_tag(static_cast<FrameId>(j)));
    DepthMap depth(spec.width, spec.height);
    for (std::size_t i = 0; i < grid.size(); ++i) {
      const auto [origin, dir] = detail::camera_ray(k, spec.camera_path[j], grid.coordinate(i));
      const auto hit = detail::cast_ray(spec, j, origin, dir);
      if (!hit) continue;
      recon.set(i, origin + hit->t * dir);
      depth.set(i, hit->t);
      if (j == 0) {
        anchor_hits[i] = *hit;
        anchor_valid[i] = 1;
      }
    }
    if (recon.num_valid() == 0)
      throw Error(ErrorCode::EmptyRaster, "no surface is visible", static_cast<int>(j));
    seq.recon_pointmaps[j] = std::move(recon);
    seq.depth[j] = std::move(depth);
  });

  for (std::size_t i = 0; i < grid.size(); ++i)
    if (anchor_valid[i]) seq.queries.push_back(grid.pixel(i));

  seq.tracking_pointmaps.resize(frames);
  seq.tracking_pointmaps[0] = seq.recon_pointmaps[0];
  seq.tracking_pointmaps[0].set_tag(tracking_tag(0));
  for (std::size_t j = 1; j < frames; ++j) {
    Pointmap tracking(spec.width, spec.height, tracking_tag(static_cast<FrameId>(j)));
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (!anchor_valid[i]) continue;
      const auto& hit = anchor_hits[i];
      if (hit.owner < 0) {
        tracking.set(i, seq.recon_pointmaps[0].point(i));
      } else {
        tracking.set(i, spec.bodies[static_cast<std::size_t>(hit.owner)].trajectory[j].apply(hit.local));
      }
    }
    seq.tracking_pointmaps[j] = std::move(tracking);
  }

  const std::size_t n_tracks = seq.queries.size();
  seq.tracks3d_world = TrackSet3(n_tracks, frames);
  seq.tracks2d = TrackSet2(n_tracks, frames);
  parallel_for(n_tracks, [&](std::size_t n) {
    const std::size_t idx = grid.index(seq.queries[n]);
    const int owner = anchor_hits[idx].owner;
    const bool dynamic = owner >= 0 && spec.bodies[static_cast<std::size_t>(owner)].is_moving();
    seq.tracks3d_world.set_dynamic(n, dynamic);
    seq.tracks2d.set_dynamic(n, dynamic);
    for (std::size_t j = 0; j < frames; ++j) {
      const Vec3& x = seq.tracking_pointmaps[j].point(idx);
      seq.tracks3d_world.at(n, j) = x;
      seq.tracks3d_world.set_visible(n, j, true);
      if (j == 0) {
        seq.tracks2d.at(n, j) = grid.coordinate(idx);
        seq.tracks2d.set_visible(n, j, true);
        continue;
      }
      const Vec3 y = seq.cameras[j].apply(x);
      const auto px = project_camera_point(k, y);
      if (!px) continue;
      seq.tracks2d.at(n, j) = *px;
      if (!grid.containing(*px)) continue;
      const auto [origin, dir] = detail::camera_ray(k, seq.cameras[j], *px);
      const auto hit = detail::cast_ray(spec, j, origin, dir);
      seq.tracks2d.set_visible(n, j, hit && std::abs(hit->t - y.z()) <= 1e-9 * std::max(1.0, y.z()));
    }
  });
  return seq;
}

struct CorruptTargets {
  bool tracking = true;
  bool recon = false;
};

/// Seeded Gaussian noise plus a drift growing linearly with the frame index,
/// applied to the selected pointmaps. Ground-truth tracks, depth and cameras are untouched.
inline RenderedSequence corrupt(const RenderedSequence& seq, double noise_std, double drift_per_frame,
                                std::uint64_t seed, CorruptTargets targets = {}) {
  if (!(noise_std >= 0.0) || !(drift_per_frame >= 0.0))
    throw Error(ErrorCode::InvalidArgument, "noise and drift must be nonnegative");
  RenderedSequence out = seq;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vec3 dir(gauss(rng), gauss(rng), gauss(rng));
  dir.normalize();
  out.corruption = CorruptionRecord{noise_std, drift_per_frame, dir, seed, targets.recon};
  if (noise_std == 0.0 && drift_per_frame == 0.0) return out;

  auto perturb = [&](std::vector<Pointmap>& maps) {
    for (std::size_t j = 0; j < maps.size(); ++j) {
      const Vec3 drift = drift_per_frame * static_cast<double>(j) * dir;
      for (std::size_t i = 0; i < maps[j].size(); ++i) {
        if (!maps[j].valid(i)) continue;
        Vec3 delta = drift;
        if (noise_std > 0.0) delta += noise_std * Vec3(gauss(rng), gauss(rng), gauss(rng));
        maps[j].displace(i, delta);
      }
    }
  };
  if (targets.tracking) perturb(out.tracking_pointmaps);
  if (targets.recon) perturb(out.recon_pointmaps);
  return out;
}

}  // namespace worldtrack
