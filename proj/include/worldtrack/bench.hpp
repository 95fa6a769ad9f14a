#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "worldtrack/error.hpp"
#include "worldtrack/geometry.hpp"
#include "worldtrack/losses.hpp"

namespace worldtrack {

enum class AlignmentMode { MedianScale, Sim3 };

inline const char* to_string(AlignmentMode m) { return m == AlignmentMode::MedianScale ? "median" : "sim3"; }

struct Thresholds {
  std::vector<double> deltas{0.1, 0.3, 0.5, 1.0};

  void validate() const {
    if (deltas.empty()) throw Error(ErrorCode::InvalidArgument, "at least one threshold is required");
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      if (!(deltas[i] > 0.0)) throw Error(ErrorCode::InvalidArgument, "thresholds must be positive");
      if (i > 0 && !(deltas[i] > deltas[i - 1])) throw Error(ErrorCode::InvalidArgument, "thresholds must ascend");
    }
  }
};

/// Similarity x -> scale * R x + t. Median-scale alignment uses R = I, t = 0.
struct Alignment {
  AlignmentMode mode = AlignmentMode::MedianScale;
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const {
    Vec3 out;
    for (int i = 0; i < 3; ++i)
      out(i) = scale * (rotation(i, 0) * p(0) + rotation(i, 1) * p(1) + rotation(i, 2) * p(2)) + translation(i);
    return out;
  }
};

inline constexpr const char* kMedianStatistic =
    "median Euclidean norm about the world origin over all valid (point, frame) pairs; lower-middle element for even counts";

struct SubsetMetrics {
  double apd_percent = 0.0;
  double epe_meters = 0.0;
  std::vector<double> per_threshold;
  std::size_t num_pairs = 0;
};

struct MetricReport {
  Alignment alignment;
  Thresholds thresholds;
  SubsetMetrics all;
  std::optional<SubsetMetrics> dynamic;
  std::size_t num_points = 0;
  std::size_t num_frames = 0;
  std::string median_statistic = kMedianStatistic;
};

inline double point_distance(const Vec3& a, const Vec3& b) {
  const double dx = a(0) - b(0), dy = a(1) - b(1), dz = a(2) - b(2);
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

inline double point_norm(const Vec3& a) { return std::sqrt(a(0) * a(0) + a(1) * a(1) + a(2) * a(2)); }

/// Lower-middle median; the input is reordered.
inline double lower_median(std::vector<double>& values) {
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>((values.size() - 1) / 2);
  std::nth_element(values.begin(), mid, values.end());
  return *mid;
}

/// Matched (prediction, ground truth) pairs, pooled for alignment and scoring.
struct PointPairs {
  std::vector<Vec3> pred;
  std::vector<Vec3> gt;
  std::vector<std::uint8_t> dynamic;

  std::size_t size() const { return pred.size(); }
  void push(const Vec3& p, const Vec3& g, bool dyn) {
    pred.push_back(p);
    gt.push_back(g);
    dynamic.push_back(dyn ? 1 : 0);
  }
};

/// Global scale s = median|gt| / median|pred|.
inline double median_scale(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  if (pred.empty() || gt.empty()) throw Error(ErrorCode::InvalidArgument, "median-scale alignment needs points");
  std::vector<double> np(pred.size()), ng(gt.size());
  for (std::size_t i = 0; i < pred.size(); ++i) np[i] = point_norm(pred[i]);
  for (std::size_t i = 0; i < gt.size(); ++i) ng[i] = point_norm(gt[i]);
  const double mp = lower_median(np);
  if (mp < 1e-12) throw Error(ErrorCode::ZeroMedian, "median prediction norm is zero");
  return lower_median(ng) / mp;
}

struct ScaledPoints {
  std::vector<Vec3> points;
  double scale = 1.0;
};

inline ScaledPoints median_scale_align(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  ScaledPoints out;
  out.scale = median_scale(pred, gt);
  Alignment a;
  a.scale = out.scale;
  out.points.reserve(pred.size());
  for (const auto& p : pred) out.points.push_back(a.apply(p));
  return out;
}

/// Pair-wise validity for tracks: both the prediction and ground truth are defined.
inline PointPairs track_pairs(const TrackSet3& pred, const TrackSet3& gt, std::size_t max_frames) {
  if (pred.num_points() != gt.num_points() || pred.num_frames() != gt.num_frames())
    throw Error(ErrorCode::ShapeMismatch, "prediction and ground-truth tracks differ in shape");
  const std::size_t frames = std::min(max_frames, gt.num_frames());
  PointPairs pairs;
  for (std::size_t i = 0; i < gt.num_points(); ++i)
    for (std::size_t t = 0; t < frames; ++t)
      if (gt.visible(i, t) && pred.visible(i, t)) pairs.push(pred.at(i, t), gt.at(i, t), gt.dynamic(i));
  return pairs;
}

/// Track-level median-scale alignment over the valid (point, frame) pairs.
inline std::pair<TrackSet3, double> median_scale_align(const TrackSet3& pred, const TrackSet3& gt) {
  const PointPairs pairs = track_pairs(pred, gt, gt.num_frames());
  const double s = median_scale(pairs.pred, pairs.gt);
  TrackSet3 out = pred;
  for (std::size_t i = 0; i < out.num_points(); ++i)
    for (std::size_t t = 0; t < out.num_frames(); ++t) out.at(i, t) = s * out.at(i, t);
  return {out, s};
}

struct Sim3Fit {
  std::vector<Vec3> points;
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
};

/// Closed-form least-squares similarity mapping pred onto gt (Umeyama).
inline Sim3Fit umeyama_sim3_align(std::span<const Vec3> pred, std::span<const Vec3> gt) {
  if (pred.size() != gt.size()) throw Error(ErrorCode::ShapeMismatch, "point sets differ in size");
  if (pred.size() < 3) throw Error(ErrorCode::DegenerateCovariance, "need at least three points");
  const double inv_n = 1.0 / static_cast<double>(pred.size());
  Vec3 mp = Vec3::Zero(), mg = Vec3::Zero();
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mg += gt[i];
  }
  mp *= inv_n;
  mg *= inv_n;
  Mat3 cov = Mat3::Zero();
  double var_pred = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Vec3 dp = pred[i] - mp;
    cov += (gt[i] - mg) * dp.transpose();
    var_pred += dp.squaredNorm();
  }
  cov *= inv_n;
  var_pred *= inv_n;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(var_pred > 1e-24) || !(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0))
    throw Error(ErrorCode::DegenerateCovariance, "points are coincident or collinear");
  Vec3 d = Vec3::Ones();
  if (svd.matrixU().determinant() * svd.matrixV().determinant() < 0.0) d(2) = -1.0;
  Sim3Fit fit;
  fit.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  fit.scale = sv.dot(d) / var_pred;
  fit.translation = mg - fit.scale * fit.rotation * mp;
  Alignment a{AlignmentMode::Sim3, fit.scale, fit.rotation, fit.translation};
  fit.points.reserve(pred.size());
  for (const auto& p : pred) fit.points.push_back(a.apply(p));
  return fit;
}

/// Fraction of pairs closer than each threshold, and their mean as a percentage.
struct ApdResult {
  std::vector<double> per_threshold;
  double percent = 0.0;
};

inline ApdResult apd_from_distances(std::span<const double> dist, const Thresholds& thr) {
  ApdResult out;
  out.per_threshold.assign(thr.deltas.size(), 0.0);
  if (dist.empty()) return out;
  for (std::size_t k = 0; k < thr.deltas.size(); ++k) {
    std::size_t hits = 0;
    for (double d : dist) hits += d < thr.deltas[k] ? 1 : 0;
    out.per_threshold[k] = static_cast<double>(hits) / static_cast<double>(dist.size());
  }
  double sum = 0.0;
  for (double f : out.per_threshold) sum += f;
  out.percent = 100.0 * (sum / static_cast<double>(out.per_threshold.size()));
  return out;
}

inline double mean_of(std::span<const double> values) {
  if (values.empty()) return 0.0;
  double sum = 0.0;
  for (double v : values) sum += v;
  return sum / static_cast<double>(values.size());
}

/// APD over the first `max_frames` frames of already-aligned tracks.
inline ApdResult apd_3d(const TrackSet3& pred, const TrackSet3& gt, const Thresholds& thr, std::size_t max_frames = 64) {
  thr.validate();
  const PointPairs pairs = track_pairs(pred, gt, max_frames);
  std::vector<double> dist(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) dist[i] = point_distance(pairs.pred[i], pairs.gt[i]);
  return apd_from_distances(dist, thr);
}

/// Mean Euclidean end-point error of already-aligned tracks.
inline double epe(const TrackSet3& pred, const TrackSet3& gt, std::size_t max_frames = 64) {
  const PointPairs pairs = track_pairs(pred, gt, max_frames);
  std::vector<double> dist(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) dist[i] = point_distance(pairs.pred[i], pairs.gt[i]);
  return mean_of(dist);
}

namespace detail {

inline SubsetMetrics score_subset(const std::vector<double>& dist, const Thresholds& thr) {
  SubsetMetrics m;
  const ApdResult apd = apd_from_distances(dist, thr);
  m.per_threshold = apd.per_threshold;
  m.apd_percent = apd.percent;
  m.epe_meters = mean_of(dist);
  m.num_pairs = dist.size();
  return m;
}

/// Fits the alignment on all pairs and scores both subsets with it.
inline MetricReport score_pairs(const PointPairs& pairs, AlignmentMode mode, const Thresholds& thr, bool want_dynamic) {
  thr.validate();
  if (pairs.size() == 0) throw Error(ErrorCode::NoOverlap, "no valid prediction/ground-truth pairs");
  MetricReport report;
  report.thresholds = thr;
  report.alignment.mode = mode;
  if (mode == AlignmentMode::MedianScale) {
    report.alignment.scale = median_scale(pairs.pred, pairs.gt);
  } else {
    const Sim3Fit fit = umeyama_sim3_align(pairs.pred, pairs.gt);
    report.alignment.scale = fit.scale;
    report.alignment.rotation = fit.rotation;
    report.alignment.translation = fit.translation;
  }
  std::vector<double> all, dyn;
  all.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const double d = point_distance(report.alignment.apply(pairs.pred[i]), pairs.gt[i]);
    all.push_back(d);
    if (pairs.dynamic[i]) dyn.push_back(d);
  }
  report.all = score_subset(all, thr);
  if (want_dynamic) {
    if (dyn.empty()) throw Error(ErrorCode::EmptyDynamicSubset, "no dynamic points to score");
    report.dynamic = score_subset(dyn, thr);
  }
  return report;
}

}  // namespace detail

struct TrackEvalOptions {
  AlignmentMode mode = AlignmentMode::MedianScale;
  Thresholds thresholds;
  std::size_t max_frames = 64;
  bool dynamic_subset = true;
};

/// World-frame tracking metrics. Dynamic labels come from the ground truth.
inline MetricReport eval_tracking(const TrackSet3& pred, const TrackSet3& gt, const TrackEvalOptions& opts = {}) {
  const PointPairs pairs = track_pairs(pred, gt, opts.max_frames);
  MetricReport report = detail::score_pairs(pairs, opts.mode, opts.thresholds, opts.dynamic_subset);
  report.num_points = gt.num_points();
  report.num_frames = std::min(opts.max_frames, gt.num_frames());
  return report;
}

struct ReconEvalOptions {
  AlignmentMode mode = AlignmentMode::MedianScale;
  Thresholds thresholds;
  std::size_t max_frames = 64;
  /// Ground-truth depth range kept for scoring, applied when depth maps are given.
  double min_depth = 0.1;
  double max_depth = 5.0;
};

/// Reconstruction metrics over per-pixel pairs pooled across frames.
inline MetricReport eval_recon(std::span<const Pointmap> pred, std::span<const Pointmap> gt,
                               const ReconEvalOptions& opts = {}, std::span<const DepthMap> gt_depth = {}) {
  if (pred.size() != gt.size()) throw Error(ErrorCode::ShapeMismatch, "frame counts differ");
  if (!gt_depth.empty() && gt_depth.size() != gt.size())
    throw Error(ErrorCode::ShapeMismatch, "depth maps do not cover every frame");
  const std::size_t frames = std::min(opts.max_frames, gt.size());
  PointPairs pairs;
  for (std::size_t j = 0; j < frames; ++j) {
    if (pred[j].width() != gt[j].width() || pred[j].height() != gt[j].height())
      throw Error(ErrorCode::ShapeMismatch, "pointmap resolutions differ", static_cast<int>(j));
    for (std::size_t i = 0; i < gt[j].size(); ++i) {
      if (!pred[j].valid(i) || !gt[j].valid(i)) continue;
      if (!gt_depth.empty()) {
        if (!gt_depth[j].valid[i]) continue;
        const double z = gt_depth[j].depth[i];
        if (z < opts.min_depth || z > opts.max_depth) continue;
      }
      pairs.push(pred[j].point(i), gt[j].point(i), false);
    }
  }
  if (pairs.size() == 0) throw Error(ErrorCode::NoOverlap, "no pixel is valid in both reconstructions");
  MetricReport report = detail::score_pairs(pairs, opts.mode, opts.thresholds, false);
  report.num_points = pairs.size();
  report.num_frames = frames;
  return report;
}

/// Uniform subsample of track indices without replacement, returned in ascending order.
inline std::vector<std::size_t> subsample_indices(std::size_t total, std::size_t target, std::uint64_t seed) {
  if (target < 1) throw Error(ErrorCode::InvalidArgument, "subsample target must be at least 1");
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (target >= total) return idx;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < target; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, total - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(target);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <int Dim>
TrackSet<Dim> subsample_queries(const TrackSet<Dim>& tracks, std::size_t target, std::uint64_t seed) {
  const auto idx = subsample_indices(tracks.num_points(), target, seed);
  return tracks.select(idx);
}

}  // namespace worldtrack
