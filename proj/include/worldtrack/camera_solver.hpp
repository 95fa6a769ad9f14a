#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <unsupported/Eigen/AutoDiff>

#include "worldtrack/error.hpp"
#include "worldtrack/geometry.hpp"
#include "worldtrack/lie.hpp"
#include "worldtrack/parallel.hpp"

namespace worldtrack {

struct Correspondences2D3D {
  std::vector<Vec2> pixels;
  std::vector<Vec3> points;
  /// Nonnegative per-correspondence weights; empty means all ones.
  std::vector<double> weights;

  std::size_t size() const { return pixels.size(); }
  double weight(std::size_t i) const { return weights.empty() ? 1.0 : weights[i]; }

  void validate(std::size_t minimum) const {
    if (pixels.size() != points.size() || (!weights.empty() && weights.size() != pixels.size()))
      throw Error(ErrorCode::ShapeMismatch, "correspondence arrays differ in length");
    if (pixels.size() < minimum)
      throw Error(ErrorCode::TooFewCorrespondences,
                  "need at least " + std::to_string(minimum) + " correspondences, got " + std::to_string(pixels.size()));
    for (double w : weights)
      if (!(w >= 0.0)) throw Error(ErrorCode::InvalidArgument, "correspondence weights must be nonnegative");
  }

  Correspondences2D3D subset(std::span<const std::uint8_t> mask) const {
    Correspondences2D3D out;
    for (std::size_t i = 0; i < size(); ++i) {
      if (!mask[i]) continue;
      out.pixels.push_back(pixels[i]);
      out.points.push_back(points[i]);
      if (!weights.empty()) out.weights.push_back(weights[i]);
    }
    return out;
  }
};

struct RansacConfig {
  int max_iterations = 256;
  double inlier_threshold = 2.0;  // pixels
  int min_sample = 6;
  std::uint64_t seed = 0;
  double confidence = 0.999;

  void validate() const {
    if (min_sample < 6) throw Error(ErrorCode::InvalidArgument, "RANSAC min_sample must be at least 6");
    if (!(confidence > 0.0 && confidence < 1.0)) throw Error(ErrorCode::InvalidArgument, "RANSAC confidence must be in (0, 1)");
    if (max_iterations < 1) throw Error(ErrorCode::InvalidArgument, "RANSAC needs at least one iteration");
    if (!(inlier_threshold > 0.0)) throw Error(ErrorCode::InvalidArgument, "inlier threshold must be positive");
  }
};

struct GNConfig {
  /// Relative damping: damping * trace(J^T J) / 6 is added to the diagonal.
  double damping = 1e-9;
  int num_steps = 1;

  void validate() const {
    if (!(damping >= 0.0)) throw Error(ErrorCode::InvalidArgument, "damping must be nonnegative");
    if (num_steps < 1) throw Error(ErrorCode::InvalidArgument, "num_steps must be at least 1");
  }
};

/// A camera pose with its provenance. For a refined estimate, `pose` equals
/// exp(increment) * detached, where only `increment` depends differentiably on
/// the 3D points. The twist is ordered (rotation, translation).
struct PoseEstimate {
  PoseSE3 pose;
  PoseSE3 detached;
  std::vector<std::uint8_t> inliers;
  double rms_reprojection_error = 0.0;
  Vec6 increment = Vec6::Zero();

  std::size_t num_inliers() const {
    return static_cast<std::size_t>(std::count(inliers.begin(), inliers.end(), std::uint8_t{1}));
  }
};

/// Euclidean partial derivatives of a scalar with respect to the entries of R and T.
struct PoseGradient {
  Mat3 rotation = Mat3::Zero();
  Vec3 translation = Vec3::Zero();

  PoseGradient& operator+=(const PoseGradient& o) {
    rotation += o.rotation;
    translation += o.translation;
    return *this;
  }
  bool is_zero() const { return rotation.isZero(0.0) && translation.isZero(0.0); }
};

namespace detail {

/// Left update exp(xi) * base with xi = (omega, v): R = Exp(omega) R*, T = Exp(omega) T* + v.
inline PoseSE3 apply_increment(const Vec6& xi, const PoseSE3& base) {
  const Mat3 r = so3_exp(xi.head<3>());
  return {r * base.rotation, r * base.translation + xi.tail<3>()};
}

/// Weighted reprojection residual f = sqrt(w) (x - pi(K y)) and its Jacobian with
/// respect to a left twist applied to the camera-frame point y.
template <typename S>
void residual_and_jacobian(const Eigen::Matrix<S, 3, 1>& y, const Vec2& x, double sqrt_w, const Intrinsics& k,
                           Eigen::Matrix<S, 2, 1>& f, Eigen::Matrix<S, 2, 6>& jac) {
  const S a = y(0), b = y(1), c = y(2);
  const S iz = S(1.0) / c;
  const S fo = S(k.focal);
  const S u = fo * a * iz + S(k.cx);
  const S v = fo * b * iz + S(k.cy);
  f(0) = S(sqrt_w) * (S(x.x()) - u);
  f(1) = S(sqrt_w) * (S(x.y()) - v);
  const S ab = a * b * iz * iz;
  const S sw = S(-sqrt_w);
  jac(0, 0) = sw * (-fo * ab);
  jac(0, 1) = sw * (fo + fo * a * a * iz * iz);
  jac(0, 2) = sw * (-fo * b * iz);
  jac(0, 3) = sw * (fo * iz);
  jac(0, 4) = S(0.0);
  jac(0, 5) = sw * (-fo * a * iz * iz);
  jac(1, 0) = sw * (-fo - fo * b * b * iz * iz);
  jac(1, 1) = sw * (fo * ab);
  jac(1, 2) = sw * (fo * a * iz);
  jac(1, 3) = S(0.0);
  jac(1, 4) = sw * (fo * iz);
  jac(1, 5) = sw * (-fo * b * iz * iz);
}

struct NormalEquations {
  Eigen::Matrix<double, 6, 6> jtj = Eigen::Matrix<double, 6, 6>::Zero();
  Vec6 jtf = Vec6::Zero();
  double cost = 0.0;  // sum of squared weighted residuals
  std::size_t used = 0;
};

/// Correspondences whose camera-frame depth is not positive are skipped.
inline NormalEquations accumulate(const PoseSE3& pose, const Correspondences2D3D& corr, const Intrinsics& k) {
  NormalEquations ne;
  Eigen::Matrix<double, 2, 1> f;
  Eigen::Matrix<double, 2, 6> jac;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const Vec3 y = pose.apply(corr.points[i]);
    if (!(y.z() > kMinProjectionDepth)) continue;
    residual_and_jacobian<double>(y, corr.pixels[i], std::sqrt(corr.weight(i)), k, f, jac);
    ne.jtj.noalias() += jac.transpose() * jac;
    ne.jtf.noalias() += jac.transpose() * f;
    ne.cost += f.squaredNorm();
    ++ne.used;
  }
  return ne;
}

inline double cost(const PoseSE3& pose, const Correspondences2D3D& corr, const Intrinsics& k) {
  double c = 0.0;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const auto px = project_camera_point(k, pose.apply(corr.points[i]));
    if (!px) return std::numeric_limits<double>::infinity();
    c += corr.weight(i) * (corr.pixels[i] - *px).squaredNorm();
  }
  return c;
}

inline Eigen::Matrix<double, 6, 6> damped_system(const NormalEquations& ne, double damping) {
  const double eps = damping * ne.jtj.trace() / 6.0;
  Eigen::Matrix<double, 6, 6> a = ne.jtj;
  a.diagonal().array() += eps;
  return a;
}

inline void require_invertible(const Eigen::Matrix<double, 6, 6>& a) {
  if (!a.allFinite()) throw Error(ErrorCode::SingularNormalEquations, "normal equations are not finite");
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> eig(a, Eigen::EigenvaluesOnly);
  const double hi = eig.eigenvalues().maxCoeff();
  const double lo = eig.eigenvalues().minCoeff();
  if (!(hi > 0.0) || lo <= 1e-14 * hi)
    throw Error(ErrorCode::SingularNormalEquations, "damped J^T J is not invertible (degenerate geometry)");
}

/// Damped Gauss-Newton increment -(J^T J + eps I)^{-1} J^T F.
inline Vec6 gn_increment(const NormalEquations& ne, double damping) {
  const auto a = damped_system(ne, damping);
  require_invertible(a);
  return -a.ldlt().solve(ne.jtf);
}

/// Levenberg-Marquardt polish; not differentiable, used for detached solutions.
inline PoseSE3 polish(PoseSE3 pose, const Correspondences2D3D& corr, const Intrinsics& k, int max_iterations = 50) {
  double current = cost(pose, corr, k);
  if (!std::isfinite(current)) return pose;
  double lambda = 1e-6;
  for (int it = 0; it < max_iterations && current > 0.0; ++it) {
    const NormalEquations ne = accumulate(pose, corr, k);
    Eigen::Matrix<double, 6, 6> a = ne.jtj;
    a.diagonal() += lambda * ne.jtj.diagonal() + Vec6::Constant(1e-300);
    const Vec6 step = -a.ldlt().solve(ne.jtf);
    if (!step.allFinite()) break;
    const PoseSE3 candidate = apply_increment(step, pose);
    const double next = cost(candidate, corr, k);
    if (next < current) {
      const double gain = current - next;
      pose = candidate;
      current = next;
      lambda = std::max(lambda * 0.1, 1e-12);
      if (step.norm() < 1e-15 || gain <= 1e-16 * current) break;
    } else {
      lambda *= 10.0;
      if (lambda > 1e10) break;
    }
  }
  pose.rotation = project_to_so3(pose.rotation);
  return pose;
}

inline std::vector<std::uint8_t> classify_inliers(const PoseSE3& pose, const Correspondences2D3D& corr,
                                                  const Intrinsics& k, double threshold, std::size_t& count) {
  std::vector<std::uint8_t> mask(corr.size(), 0);
  const double t2 = threshold * threshold;
  count = 0;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const auto px = project_camera_point(k, pose.apply(corr.points[i]));
    if (px && (corr.pixels[i] - *px).squaredNorm() < t2) {
      mask[i] = 1;
      ++count;
    }
  }
  return mask;
}

inline double rms_error(const PoseSE3& pose, const Correspondences2D3D& corr, const Intrinsics& k) {
  if (corr.size() == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const auto px = project_camera_point(k, pose.apply(corr.points[i]));
    sum += px ? (corr.pixels[i] - *px).squaredNorm() : std::numeric_limits<double>::infinity();
  }
  return std::sqrt(sum / static_cast<double>(corr.size()));
}

/// Pose from the 3x4 camera matrix estimated by linear DLT on normalized image coordinates.
inline std::optional<PoseSE3> pose_from_dlt(std::span<const Vec3> pts, std::span<const Vec2> rays) {
  const std::size_t n = pts.size();
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(n);
  double spread = 0.0;
  for (const auto& p : pts) spread += (p - mean).norm();
  spread /= static_cast<double>(n);
  if (!(spread > 0.0)) return std::nullopt;
  const double scale = std::sqrt(3.0) / spread;

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(2 * n), 12);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 x = (pts[i] - mean) * scale;
    const auto r = static_cast<Eigen::Index>(2 * i);
    a.block<1, 3>(r, 0) = x.transpose();
    a(r, 3) = 1.0;
    a.block<1, 3>(r, 8) = -rays[i].x() * x.transpose();
    a(r, 11) = -rays[i].x();
    a.block<1, 3>(r + 1, 4) = x.transpose();
    a(r + 1, 7) = 1.0;
    a.block<1, 3>(r + 1, 8) = -rays[i].y() * x.transpose();
    a(r + 1, 11) = -rays[i].y();
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd p = svd.matrixV().col(11);
  Eigen::Matrix<double, 3, 4> cam;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) cam(r, c) = p(4 * r + c);

  // Undo the 3D normalization: x_n = (x - mean) * scale.
  Mat3 m = cam.leftCols<3>() * scale;
  Vec3 t = cam.col(3) - m * mean;
  if (m.determinant() < 0.0) {
    m = -m;
    t = -t;
  }
  Eigen::JacobiSVD<Mat3> msvd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const double lambda = msvd.singularValues().mean();
  if (!(lambda > 0.0) || !std::isfinite(lambda)) return std::nullopt;
  PoseSE3 pose{project_to_so3(m), t / lambda};
  if (!pose.rotation.allFinite() || !pose.translation.allFinite()) return std::nullopt;
  return pose;
}

/// Pose of a planar point set from the plane-to-image homography.
inline std::optional<PoseSE3> pose_from_homography(std::span<const Vec3> pts, std::span<const Vec2> rays,
                                                   const Vec3& mean, const Mat3& basis) {
  const std::size_t n = pts.size();
  std::vector<Vec2> plane(n);
  double spread = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Vec3 d = pts[i] - mean;
    plane[i] = {basis.col(0).dot(d), basis.col(1).dot(d)};
    spread += plane[i].norm();
  }
  spread /= static_cast<double>(n);
  if (!(spread > 0.0)) return std::nullopt;
  const double sigma = spread / std::sqrt(2.0);

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(2 * n), 9);
  for (std::size_t i = 0; i < n; ++i) {
    const double pa = plane[i].x() / sigma, pb = plane[i].y() / sigma;
    const double mx = rays[i].x(), my = rays[i].y();
    const auto r = static_cast<Eigen::Index>(2 * i);
    a.row(r) << pa, pb, 1.0, 0.0, 0.0, 0.0, -mx * pa, -mx * pb, -mx;
    a.row(r + 1) << 0.0, 0.0, 0.0, pa, pb, 1.0, -my * pa, -my * pb, -my;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Mat3 hm;
  hm << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);

  // hm ~ kappa [sigma R e1, sigma R e2, R mean + T]
  double kappa = (hm.col(0).norm() + hm.col(1).norm()) / (2.0 * sigma);
  if (!(kappa > 0.0)) return std::nullopt;
  if (hm(2, 2) < 0.0) kappa = -kappa;
  const Vec3 r1 = hm.col(0) / (kappa * sigma);
  const Vec3 r2 = hm.col(1) / (kappa * sigma);
  const Vec3 centroid_cam = hm.col(2) / kappa;
  Mat3 q;
  q.col(0) = r1;
  q.col(1) = r2;
  q.col(2) = r1.cross(r2);
  Mat3 e;
  e.col(0) = basis.col(0);
  e.col(1) = basis.col(1);
  e.col(2) = basis.col(0).cross(basis.col(1));
  const Mat3 rot = project_to_so3(q) * e.transpose();
  PoseSE3 pose{project_to_so3(rot), centroid_cam - rot * mean};
  if (!pose.rotation.allFinite() || !pose.translation.allFinite()) return std::nullopt;
  return pose;
}

/// Minimal-sample pose: homography route for (near-)planar samples, DLT otherwise.
inline std::optional<PoseSE3> minimal_pose(std::span<const Vec3> pts, std::span<const Vec2> rays) {
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) cov += (p - mean) * (p - mean).transpose();
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU);
  const Vec3 s = svd.singularValues().cwiseSqrt();
  if (!(s(0) > 0.0) || s(1) <= 1e-6 * s(0)) return std::nullopt;  // coincident or collinear
  if (s(2) <= 1e-6 * s(0)) return pose_from_homography(pts, rays, mean, svd.matrixU());
  return pose_from_dlt(pts, rays);
}

/// Adjoint of the damped GN increment: given dL/d(increment), the gradient of L
/// with respect to each correspondence's 3D point. Differentiates J and F(P*)
/// (and the trace-scaled damping) through the camera-frame points.
inline std::vector<Vec3> increment_adjoint(const PoseSE3& detached, const Vec6& increment, const Vec6& grad_increment,
                                           const Correspondences2D3D& corr, const Intrinsics& k, double damping) {
  using Ad = Eigen::AutoDiffScalar<Vec3>;
  const NormalEquations ne = accumulate(detached, corr, k);
  const auto a = damped_system(ne, damping);
  require_invertible(a);
  const Vec6 lambda = a.ldlt().solve(grad_increment);
  const double kappa = damping / 3.0 * lambda.dot(increment);

  std::vector<Vec3> grads(corr.size(), Vec3::Zero());
  Eigen::Matrix<double, 2, 1> f0;
  Eigen::Matrix<double, 2, 6> j0;
  for (std::size_t i = 0; i < corr.size(); ++i) {
    const Vec3 y0 = detached.apply(corr.points[i]);
    if (!(y0.z() > kMinProjectionDepth)) continue;
    const double sw = std::sqrt(corr.weight(i));
    if (sw == 0.0) continue;
    residual_and_jacobian<double>(y0, corr.pixels[i], sw, k, f0, j0);
    const Vec2 r = f0 + j0 * increment;
    const Vec2 u = j0 * lambda;

    Eigen::Matrix<Ad, 3, 1> y;
    for (int d = 0; d < 3; ++d) y(d) = Ad(y0(d), 3, d);
    Eigen::Matrix<Ad, 2, 1> f;
    Eigen::Matrix<Ad, 2, 6> jac;
    residual_and_jacobian<Ad>(y, corr.pixels[i], sw, k, f, jac);

    Ad phi(0.0, Vec3::Zero());
    for (int row = 0; row < 2; ++row) {
      for (int col = 0; col < 6; ++col) {
        const double coeff = r(row) * lambda(col) + u(row) * increment(col) + kappa * j0(row, col);
        phi += coeff * jac(row, col);
      }
      phi += u(row) * f(row);
    }
    const Vec3 grad_y = -phi.derivatives();
    grads[i] = detached.rotation.transpose() * grad_y;
  }
  return grads;
}

/// Chains a Euclidean pose gradient through P = exp(xi) * P* to dL/dxi.
inline Vec6 increment_gradient(const PoseGradient& upstream, const Vec6& increment, const PoseSE3& detached) {
  const Vec3 omega = increment.head<3>();
  const Mat3 r_exp = so3_exp(omega);
  const Mat3 r = r_exp * detached.rotation;
  const Vec3 rotated_t = r_exp * detached.translation;
  Vec3 grad_theta;
  for (int kdim = 0; kdim < 3; ++kdim) {
    const Mat3 gen = skew(Vec3::Unit(kdim));
    grad_theta(kdim) = upstream.rotation.cwiseProduct(gen * r).sum() + upstream.translation.dot(gen * rotated_t);
  }
  Vec6 g;
  g.head<3>() = so3_left_jacobian(omega).transpose() * grad_theta;
  g.tail<3>() = upstream.translation;
  return g;
}

}  // namespace detail

/// Robust focal estimate from a pointmap expressed in its own camera frame,
/// principal point fixed at the image center. Minimizes sum_n |u_n - f q_n| by
/// iteratively reweighted least squares started from the L2 solution.
inline Intrinsics estimate_focal_weiszfeld(const Pointmap& pm, const PixelGrid& grid, int iterations = 10) {
  if (grid.width != pm.width() || grid.height != pm.height())
    throw Error(ErrorCode::ShapeMismatch, "pixel grid does not match the pointmap");
  const Vec2 center = grid.center();
  std::vector<Vec2> us, qs;
  for (std::size_t i = 0; i < pm.size(); ++i) {
    if (!pm.valid(i)) continue;
    const Vec3& x = pm.point(i);
    if (!(x.z() > 0.0)) continue;
    us.push_back(grid.coordinate(i) - center);
    qs.emplace_back(x.x() / x.z(), x.y() / x.z());
  }
  if (us.size() < 10) throw Error(ErrorCode::InsufficientValidPoints, "focal estimation needs at least 10 valid points");
  double num = 0.0, den = 0.0;
  for (std::size_t n = 0; n < us.size(); ++n) {
    num += us[n].dot(qs[n]);
    den += qs[n].squaredNorm();
  }
  if (den < 1e-12) throw Error(ErrorCode::DegenerateGeometry, "all points lie on the optical axis");
  double focal = num / den;
  for (int it = 0; it < iterations; ++it) {
    num = den = 0.0;
    for (std::size_t n = 0; n < us.size(); ++n) {
      const double w = 1.0 / std::max((us[n] - focal * qs[n]).norm(), 1e-8);
      num += w * us[n].dot(qs[n]);
      den += w * qs[n].squaredNorm();
    }
    focal = num / den;
  }
  if (!(focal > 0.0) || !std::isfinite(focal)) throw Error(ErrorCode::DegenerateGeometry, "non-positive focal estimate");
  return Intrinsics::centered(focal, grid.width, grid.height);
}

/// Detached pose from RANSAC over minimal DLT/homography samples, polished on
/// the consensus set. The returned increment is zero.
inline PoseEstimate solve_pnp_ransac(const Correspondences2D3D& corr, const Intrinsics& k, const RansacConfig& cfg) {
  cfg.validate();
  const auto sample_size = static_cast<std::size_t>(cfg.min_sample);
  corr.validate(sample_size);

  std::vector<Vec2> rays(corr.size());
  for (std::size_t i = 0; i < corr.size(); ++i) rays[i] = (corr.pixels[i] - k.principal_point()) / k.focal;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(corr.size());
  std::vector<Vec3> sample_pts(sample_size);
  std::vector<Vec2> sample_rays(sample_size);
  Correspondences2D3D sample;
  sample.points.resize(sample_size);
  sample.pixels.resize(sample_size);

  std::size_t best_count = 0;
  PoseSE3 best_pose;
  std::size_t needed = static_cast<std::size_t>(cfg.max_iterations);
  for (std::size_t it = 0; it < needed; ++it) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t s = 0; s < sample_size; ++s) {
      std::uniform_int_distribution<std::size_t> pick(s, order.size() - 1);
      std::swap(order[s], order[pick(rng)]);
      sample_pts[s] = corr.points[order[s]];
      sample_rays[s] = rays[order[s]];
      sample.points[s] = corr.points[order[s]];
      sample.pixels[s] = corr.pixels[order[s]];
    }
    const auto linear = detail::minimal_pose(sample_pts, sample_rays);
    if (!linear) continue;
    // The linear solution ignores the rotation constraint and is noise-sensitive;
    // a few rigid refinement steps on the sample make the hypothesis usable.
    const PoseSE3 hypothesis = detail::polish(*linear, sample, k, 10);
    std::size_t count = 0;
    detail::classify_inliers(hypothesis, corr, k, cfg.inlier_threshold, count);
    if (count > best_count) {
      best_count = count;
      best_pose = hypothesis;
      const double ratio = static_cast<double>(count) / static_cast<double>(corr.size());
      const double all_good = std::pow(ratio, static_cast<double>(sample_size));
      if (all_good >= 1.0 - 1e-15) {
        needed = it + 1;
      } else {
        const double est = std::log(1.0 - cfg.confidence) / std::log(1.0 - all_good);
        if (std::isfinite(est)) needed = std::min(needed, std::max(it + 1, static_cast<std::size_t>(std::ceil(est))));
      }
    }
  }
  if (best_count < sample_size)
    throw Error(ErrorCode::NoConsensus, "best consensus set has " + std::to_string(best_count) + " inliers");

  std::size_t count = 0;
  auto mask = detail::classify_inliers(best_pose, corr, k, cfg.inlier_threshold, count);
  PoseSE3 pose = detail::polish(best_pose, corr.subset(mask), k);
  for (int round = 0; round < 2; ++round) {
    mask = detail::classify_inliers(pose, corr, k, cfg.inlier_threshold, count);
    if (count < sample_size) break;
    pose = detail::polish(pose, corr.subset(mask), k);
  }
  mask = detail::classify_inliers(pose, corr, k, cfg.inlier_threshold, count);
  if (count < sample_size)
    throw Error(ErrorCode::NoConsensus, "polished consensus set has " + std::to_string(count) + " inliers");

  PoseEstimate out;
  out.pose = pose;
  out.detached = pose;
  out.rms_reprojection_error = detail::rms_error(pose, corr.subset(mask), k);
  out.inliers = std::move(mask);
  return out;
}

/// Damped Gauss-Newton refinement P = exp(dP) * P*. With num_steps > 1 the
/// earlier steps are treated as detached and only the last one is recorded
/// as the differentiable increment. `corr` should hold inliers only.
inline PoseEstimate gauss_newton_refine(const PoseEstimate& detached, const Correspondences2D3D& corr,
                                        const Intrinsics& k, const GNConfig& cfg) {
  cfg.validate();
  corr.validate(3);
  PoseSE3 base = detached.pose;
  PoseEstimate out = detached;
  for (int step = 0; step < cfg.num_steps; ++step) {
    const Vec6 dp = detail::gn_increment(detail::accumulate(base, corr, k), cfg.damping);
    if (step + 1 < cfg.num_steps) {
      base = detail::apply_increment(dp, base);
      continue;
    }
    out.detached = base;
    out.increment = dp;
    out.pose = detail::apply_increment(dp, base);
  }
  out.rms_reprojection_error = detail::rms_error(out.pose, corr, k);
  return out;
}

/// Gradient of a scalar loss with respect to each correspondence's 3D point,
/// flowing only through the GN increment (the detached pose is a constant).
inline std::vector<Vec3> pose_gradient_wrt_points(const PoseEstimate& refined, const Correspondences2D3D& corr,
                                                  const Intrinsics& k, const PoseGradient& upstream,
                                                  const GNConfig& cfg = {}) {
  cfg.validate();
  corr.validate(3);
  if (upstream.is_zero()) return std::vector<Vec3>(corr.size(), Vec3::Zero());
  const Vec6 g = detail::increment_gradient(upstream, refined.increment, refined.detached);
  return detail::increment_adjoint(refined.detached, refined.increment, g, corr, k, cfg.damping);
}

/// Correspondences (pixel center, 3D point) at the given pixel indices of a pointmap.
inline Correspondences2D3D gather_correspondences(const Pointmap& pm, std::span<const std::size_t> pixel_indices) {
  Correspondences2D3D corr;
  const PixelGrid grid = pm.grid();
  corr.pixels.reserve(pixel_indices.size());
  corr.points.reserve(pixel_indices.size());
  for (std::size_t idx : pixel_indices) {
    corr.pixels.push_back(grid.coordinate(idx));
    corr.points.push_back(pm.point(idx));
  }
  return corr;
}

inline std::vector<std::size_t> valid_pixel_indices(const Pointmap& pm) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pm.size(); ++i)
    if (pm.valid(i)) out.push_back(i);
  return out;
}

struct VideoCameras {
  Intrinsics intrinsics;
  std::vector<PoseEstimate> poses;
  /// Per frame, the pixel indices used in the final refinement (RANSAC inliers).
  std::vector<std::vector<std::size_t>> inlier_pixels;
};

/// Shared focal from the anchor pointmap, then per-frame RANSAC-PnP plus one
/// differentiable GN step. Frame 0 defines the world and gets the identity.
inline VideoCameras solve_cameras_for_video(std::span<const Pointmap> recon, const PixelGrid& grid,
                                            const RansacConfig& ransac = {}, const GNConfig& gn = {},
                                            int weiszfeld_iterations = 10) {
  if (recon.empty()) throw Error(ErrorCode::EmptyVideo, "no reconstruction pointmaps");
  for (std::size_t j = 0; j < recon.size(); ++j) {
    require_recon_branch(recon[j], "solve_cameras_for_video");
    if (recon[j].tag().coord_frame != recon.front().tag().coord_frame)
      throw Error(ErrorCode::BranchMismatch, "pointmaps do not share a coordinate frame", static_cast<int>(j));
    if (recon[j].width() != grid.width || recon[j].height() != grid.height)
      throw Error(ErrorCode::ShapeMismatch, "pointmap resolution differs from the grid", static_cast<int>(j));
  }
  VideoCameras out;
  try {
    out.intrinsics = estimate_focal_weiszfeld(recon.front(), grid, weiszfeld_iterations);
  } catch (const Error& e) {
    throw e.at_frame(0);
  }
  out.poses.resize(recon.size());
  out.inlier_pixels.resize(recon.size());

  out.inlier_pixels[0] = valid_pixel_indices(recon[0]);
  out.poses[0].inliers.assign(out.inlier_pixels[0].size(), 1);
  out.poses[0].rms_reprojection_error =
      detail::rms_error(PoseSE3::identity(), gather_correspondences(recon[0], out.inlier_pixels[0]), out.intrinsics);

  parallel_for(recon.size() - 1, [&](std::size_t i) {
    const std::size_t j = i + 1;
    try {
      const auto pixels = valid_pixel_indices(recon[j]);
      const auto corr = gather_correspondences(recon[j], pixels);
      RansacConfig frame_cfg = ransac;
      frame_cfg.seed = ransac.seed ^ (0x9E3779B97F4A7C15ull * (j + 1));
      const PoseEstimate detached = solve_pnp_ransac(corr, out.intrinsics, frame_cfg);
      std::vector<std::size_t> inliers;
      for (std::size_t n = 0; n < pixels.size(); ++n)
        if (detached.inliers[n]) inliers.push_back(pixels[n]);
      out.poses[j] = gauss_newton_refine(detached, gather_correspondences(recon[j], inliers), out.intrinsics, gn);
      out.inlier_pixels[j] = std::move(inliers);
    } catch (const Error& e) {
      throw e.at_frame(static_cast<int>(j));
    }
  });
  return out;
}

}  // namespace worldtrack
