#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "worldtrack/error.hpp"
#include "worldtrack/lie.hpp"

namespace worldtrack {

/// Zero-based frame index; the anchor (first) frame is 0.
using FrameId = int;
inline constexpr FrameId kAnchorFrame = 0;

/// Frame tags of a pointmap aX^b_t: coordinate frame a, content frame b, time t.
struct FrameTag {
  FrameId coord_frame = kAnchorFrame;
  FrameId content_frame = kAnchorFrame;
  FrameId time = kAnchorFrame;

  bool operator==(const FrameTag&) const = default;
};

/// Tag of the tracking-branch output at time j: anchor content in anchor coordinates.
inline FrameTag tracking_tag(FrameId time) { return {kAnchorFrame, kAnchorFrame, time}; }
/// Tag of the reconstruction-branch output at time j: frame j content in anchor coordinates.
inline FrameTag recon_tag(FrameId time) { return {kAnchorFrame, time, time}; }

struct Pixel {
  int row = 0;
  int col = 0;

  bool operator==(const Pixel&) const = default;
};

/// Pixel-center convention: pixel (r, c) sits at (c + 0.5, r + 0.5).
struct PixelGrid {
  int width = 0;
  int height = 0;

  std::size_t size() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
  bool contains(const Pixel& p) const { return p.row >= 0 && p.col >= 0 && p.row < height && p.col < width; }
  std::size_t index(const Pixel& p) const {
    return static_cast<std::size_t>(p.row) * static_cast<std::size_t>(width) + static_cast<std::size_t>(p.col);
  }
  Pixel pixel(std::size_t index) const {
    return {static_cast<int>(index / static_cast<std::size_t>(width)), static_cast<int>(index % static_cast<std::size_t>(width))};
  }
  Vec2 coordinate(const Pixel& p) const { return {p.col + 0.5, p.row + 0.5}; }
  Vec2 coordinate(std::size_t index) const { return coordinate(pixel(index)); }
  Vec2 center() const { return {0.5 * width, 0.5 * height}; }
  /// Pixel containing a continuous image position, if inside the grid.
  std::optional<Pixel> containing(const Vec2& x) const {
    if (!(x.x() >= 0.0 && x.y() >= 0.0 && x.x() < width && x.y() < height)) return std::nullopt;
    return Pixel{static_cast<int>(std::floor(x.y())), static_cast<int>(std::floor(x.x()))};
  }
};

/// Pinhole intrinsics with square pixels (fx = fy).
struct Intrinsics {
  double focal = 1.0;
  double cx = 0.0;
  double cy = 0.0;

  static Intrinsics centered(double focal, int width, int height) {
    return {focal, 0.5 * width, 0.5 * height};
  }
  Vec2 principal_point() const { return {cx, cy}; }
  Mat3 matrix() const {
    Mat3 k;
    k << focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0;
    return k;
  }
};

/// Rigid world-to-camera transform x_cam = R x_world + T.
struct PoseSE3 {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static PoseSE3 identity() { return {}; }

  Vec3 apply(const Vec3& x) const { return rotation * x + translation; }
  PoseSE3 inverse() const { return {rotation.transpose(), -(rotation.transpose() * translation)}; }
  /// (this * other)(x) = this(other(x))
  PoseSE3 operator*(const PoseSE3& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation};
  }
  /// Camera center in world coordinates.
  Vec3 center() const { return -(rotation.transpose() * translation); }

  bool is_valid(double tol = 1e-9) const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(rotation.determinant() - 1.0) <= tol && translation.allFinite();
  }
};

struct FramePair {
  FrameId anchor_index = kAnchorFrame;
  FrameId other_index = kAnchorFrame;

  bool operator==(const FramePair&) const = default;
};

/// H x W grid of 3D points with a validity mask. Invalid entries hold (0, 0, 0).
class Pointmap {
 public:
  Pointmap() = default;
  Pointmap(int width, int height, FrameTag tag = {})
      : width_(width), height_(height), tag_(tag),
        points_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), Vec3::Zero()),
        valid_(points_.size(), 0) {
    if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "pointmap dimensions must be positive");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  PixelGrid grid() const { return {width_, height_}; }
  std::size_t size() const { return points_.size(); }
  std::size_t index(const Pixel& p) const { return grid().index(p); }

  const FrameTag& tag() const { return tag_; }
  void set_tag(const FrameTag& tag) { tag_ = tag; }
  bool is_tracking_branch() const { return tag_.content_frame == kAnchorFrame && tag_.coord_frame == kAnchorFrame; }
  bool is_recon_branch() const { return tag_.coord_frame == kAnchorFrame && tag_.content_frame == tag_.time; }

  const Vec3& point(std::size_t i) const { return points_[i]; }
  bool valid(std::size_t i) const { return valid_[i] != 0; }

  void set(std::size_t i, const Vec3& p) {
    if (!p.allFinite()) throw Error(ErrorCode::InvalidArgument, "valid pointmap entries must be finite");
    points_[i] = p;
    valid_[i] = 1;
  }
  void invalidate(std::size_t i) {
    points_[i].setZero();
    valid_[i] = 0;
  }
  /// Moves a valid point by delta; invalid entries are left untouched.
  void displace(std::size_t i, const Vec3& delta) {
    if (valid_[i]) set(i, points_[i] + delta);
  }

  std::span<const Vec3> points() const { return points_; }
  std::span<const std::uint8_t> valid_mask() const { return valid_; }
  std::size_t num_valid() const {
    std::size_t n = 0;
    for (auto v : valid_) n += v ? 1 : 0;
    return n;
  }

  bool operator==(const Pointmap& other) const {
    return width_ == other.width_ && height_ == other.height_ && tag_ == other.tag_ &&
           valid_ == other.valid_ && points_ == other.points_;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  FrameTag tag_{};
  std::vector<Vec3> points_;
  std::vector<std::uint8_t> valid_;
};

inline void require_tracking_branch(const Pointmap& pm, const char* who) {
  if (!pm.is_tracking_branch())
    throw Error(ErrorCode::BranchMismatch, std::string(who) + " expects a tracking-branch pointmap");
}

inline void require_recon_branch(const Pointmap& pm, const char* who) {
  if (!pm.is_recon_branch())
    throw Error(ErrorCode::BranchMismatch, std::string(who) + " expects a reconstruction-branch pointmap");
}

/// N tracks over T frames, stored track-major. Each track has a per-frame
/// visibility bit and one dynamic/static label.
template <int Dim>
class TrackSet {
 public:
  using Point = Eigen::Matrix<double, Dim, 1>;

  TrackSet() = default;
  TrackSet(std::size_t num_points, std::size_t num_frames)
      : num_points_(num_points), num_frames_(num_frames),
        positions_(num_points * num_frames, Point::Zero()),
        visible_(num_points * num_frames, 0),
        dynamic_(num_points, 0) {}

  std::size_t num_points() const { return num_points_; }
  std::size_t num_frames() const { return num_frames_; }

  const Point& at(std::size_t n, std::size_t t) const { return positions_[n * num_frames_ + t]; }
  Point& at(std::size_t n, std::size_t t) { return positions_[n * num_frames_ + t]; }
  bool visible(std::size_t n, std::size_t t) const { return visible_[n * num_frames_ + t] != 0; }
  void set_visible(std::size_t n, std::size_t t, bool v) { visible_[n * num_frames_ + t] = v ? 1 : 0; }
  bool dynamic(std::size_t n) const { return dynamic_[n] != 0; }
  void set_dynamic(std::size_t n, bool v) { dynamic_[n] = v ? 1 : 0; }

  std::span<const Point> positions() const { return positions_; }
  std::span<const std::uint8_t> visibility() const { return visible_; }
  std::span<const std::uint8_t> dynamic_mask() const { return dynamic_; }

  /// Tracks restricted to the given rows, in the given order.
  TrackSet select(std::span<const std::size_t> rows) const {
    TrackSet out(rows.size(), num_frames_);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      for (std::size_t t = 0; t < num_frames_; ++t) {
        out.at(k, t) = at(rows[k], t);
        out.set_visible(k, t, visible(rows[k], t));
      }
      out.set_dynamic(k, dynamic(rows[k]));
    }
    return out;
  }

  /// The first `frames` frames (all of them if there are fewer).
  TrackSet first_frames(std::size_t frames) const {
    const std::size_t keep = std::min(frames, num_frames_);
    TrackSet out(num_points_, keep);
    for (std::size_t n = 0; n < num_points_; ++n) {
      for (std::size_t t = 0; t < keep; ++t) {
        out.at(n, t) = at(n, t);
        out.set_visible(n, t, visible(n, t));
      }
      out.set_dynamic(n, dynamic(n));
    }
    return out;
  }

  bool operator==(const TrackSet& other) const {
    return num_points_ == other.num_points_ && num_frames_ == other.num_frames_ && positions_ == other.positions_ &&
           visible_ == other.visible_ && dynamic_ == other.dynamic_;
  }

 private:
  std::size_t num_points_ = 0;
  std::size_t num_frames_ = 0;
  std::vector<Point> positions_;
  std::vector<std::uint8_t> visible_;
  std::vector<std::uint8_t> dynamic_;
};

using TrackSet2 = TrackSet<2>;
using TrackSet3 = TrackSet<3>;

inline constexpr double kMinProjectionDepth = 1e-12;

/// Camera-frame projection of an already transformed point, if in front of the camera.
inline std::optional<Vec2> project_camera_point(const Intrinsics& k, const Vec3& y) {
  if (!(y.z() > kMinProjectionDepth)) return std::nullopt;
  return Vec2(k.focal * y.x() / y.z() + k.cx, k.focal * y.y() / y.z() + k.cy);
}

inline Vec2 project(const Intrinsics& k, const PoseSE3& pose, const Vec3& x) {
  const Vec3 y = pose.apply(x);
  auto px = project_camera_point(k, y);
  if (!px) throw Error(ErrorCode::NonPositiveDepth, "point is behind or on the camera plane");
  return *px;
}

/// d(pixel)/d(camera point) for a camera-frame point with z > 0.
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Intrinsics& k, const Vec3& y) {
  const double iz = 1.0 / y.z();
  Eigen::Matrix<double, 2, 3> d;
  d << k.focal * iz, 0.0, -k.focal * y.x() * iz * iz,
       0.0, k.focal * iz, -k.focal * y.y() * iz * iz;
  return d;
}

/// Camera-frame point at the given depth along the ray through an image position.
inline Vec3 backproject(const Intrinsics& k, const Vec2& pixel, double depth) {
  return {(pixel.x() - k.cx) / k.focal * depth, (pixel.y() - k.cy) / k.focal * depth, depth};
}

/// Applies pose to every valid point; the result is tagged with target_frame as its coordinate frame.
inline Pointmap transform_points(const PoseSE3& pose, const Pointmap& pm, FrameId target_frame) {
  Pointmap out = pm;
  FrameTag tag = pm.tag();
  tag.coord_frame = target_frame;
  out.set_tag(tag);
  for (std::size_t i = 0; i < pm.size(); ++i) {
    if (pm.valid(i)) out.set(i, pose.apply(pm.point(i)));
  }
  return out;
}

inline Pointmap transform_points(const PoseSE3& pose, const Pointmap& pm) {
  return transform_points(pose, pm, pm.tag().coord_frame);
}

/// Anchor-frame pairing of a video: every frame is paired with frame 0.
inline std::vector<FramePair> build_video_pairs(std::size_t num_frames) {
  if (num_frames == 0) throw Error(ErrorCode::EmptyVideo, "a video needs at least one frame");
  std::vector<FramePair> pairs;
  pairs.reserve(num_frames);
  for (std::size_t j = 0; j < num_frames; ++j) pairs.push_back({kAnchorFrame, static_cast<FrameId>(j)});
  return pairs;
}

/// World-frame trajectories read from the tracking branch at fixed anchor pixels.
inline TrackSet3 assemble_trajectories(std::span<const Pointmap> tracking, std::span<const Pixel> queries) {
  if (tracking.empty()) throw Error(ErrorCode::EmptyVideo, "no tracking pointmaps");
  const PixelGrid grid = tracking.front().grid();
  for (const auto& pm : tracking) {
    require_tracking_branch(pm, "assemble_trajectories");
    if (pm.width() != grid.width || pm.height() != grid.height)
      throw Error(ErrorCode::ShapeMismatch, "tracking pointmaps differ in resolution");
  }
  TrackSet3 out(queries.size(), tracking.size());
  for (std::size_t n = 0; n < queries.size(); ++n) {
    if (!grid.contains(queries[n])) throw Error(ErrorCode::QueryOutOfBounds, "query pixel outside the grid");
    const std::size_t idx = grid.index(queries[n]);
    for (std::size_t t = 0; t < tracking.size(); ++t) {
      out.at(n, t) = tracking[t].point(idx);
      out.set_visible(n, t, tracking[t].valid(idx));
    }
  }
  return out;
}

}  // namespace worldtrack
