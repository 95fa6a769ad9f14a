#pragma once

// Straight-loop reference implementations used as test oracles.

#include <algorithm>
#include <cmath>
#include <vector>

#include "worldtrack/bench.hpp"

namespace oracle {

using worldtrack::Mat3;
using worldtrack::Vec3;

struct BruteSubset {
  std::vector<double> fractions;
  double apd = 0.0;
  double epe = 0.0;
  std::size_t count = 0;
};

struct BruteReport {
  double scale = 1.0;
  BruteSubset all;
  BruteSubset dynamic;
};

struct RawPair {
  double p[3];
  double g[3];
  bool dynamic;
};

inline double lower_middle(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[(v.size() - 1) / 2];
}

inline BruteSubset brute_subset(const std::vector<double>& dist, const std::vector<double>& thr) {
  BruteSubset out;
  out.count = dist.size();
  double fsum = 0.0;
  for (double d : thr) {
    std::size_t hits = 0;
    for (double e : dist)
      if (e < d) ++hits;
    const double f = static_cast<double>(hits) / static_cast<double>(dist.size());
    out.fractions.push_back(f);
    fsum += f;
  }
  out.apd = 100.0 * (fsum / static_cast<double>(thr.size()));
  double s = 0.0;
  for (double e : dist) s += e;
  out.epe = s / static_cast<double>(dist.size());
  return out;
}

/// Scores raw pairs. With `sim3` null the global median scale is computed here;
/// otherwise the given similarity is applied as is.
inline BruteReport brute_score(const std::vector<RawPair>& pairs, const std::vector<double>& thr,
                               const worldtrack::Alignment* sim3) {
  BruteReport out;
  double s = 1.0;
  double r[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  double t[3] = {0, 0, 0};
  if (sim3) {
    s = sim3->scale;
    for (int i = 0; i < 3; ++i) {
      t[i] = sim3->translation(i);
      for (int j = 0; j < 3; ++j) r[i][j] = sim3->rotation(i, j);
    }
  } else {
    std::vector<double> np, ng;
    for (const auto& q : pairs) {
      np.push_back(std::sqrt(q.p[0] * q.p[0] + q.p[1] * q.p[1] + q.p[2] * q.p[2]));
      ng.push_back(std::sqrt(q.g[0] * q.g[0] + q.g[1] * q.g[1] + q.g[2] * q.g[2]));
    }
    s = lower_middle(ng) / lower_middle(np);
  }
  out.scale = s;
  std::vector<double> all, dyn;
  for (const auto& q : pairs) {
    double sq = 0.0;
    double d[3];
    for (int i = 0; i < 3; ++i) {
      const double a = s * (r[i][0] * q.p[0] + r[i][1] * q.p[1] + r[i][2] * q.p[2]) + t[i];
      d[i] = a - q.g[i];
    }
    sq = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    all.push_back(std::sqrt(sq));
    if (q.dynamic) dyn.push_back(std::sqrt(sq));
  }
  out.all = brute_subset(all, thr);
  if (!dyn.empty()) out.dynamic = brute_subset(dyn, thr);
  return out;
}

inline std::vector<RawPair> track_pairs(const worldtrack::TrackSet3& pred, const worldtrack::TrackSet3& gt,
                                        std::size_t frames) {
  std::vector<RawPair> out;
  const std::size_t tmax = std::min(frames, gt.num_frames());
  for (std::size_t n = 0; n < gt.num_points(); ++n)
    for (std::size_t t = 0; t < tmax; ++t) {
      if (!gt.visible(n, t) || !pred.visible(n, t)) continue;
      RawPair q{};
      for (int i = 0; i < 3; ++i) {
        q.p[i] = pred.at(n, t)(i);
        q.g[i] = gt.at(n, t)(i);
      }
      q.dynamic = gt.dynamic(n);
      out.push_back(q);
    }
  return out;
}

inline std::vector<RawPair> recon_pairs(const std::vector<worldtrack::Pointmap>& pred,
                                        const std::vector<worldtrack::Pointmap>& gt,
                                        const std::vector<worldtrack::DepthMap>* depth, double zmin, double zmax) {
  std::vector<RawPair> out;
  for (std::size_t j = 0; j < gt.size(); ++j)
    for (std::size_t i = 0; i < gt[j].size(); ++i) {
      if (!pred[j].valid(i) || !gt[j].valid(i)) continue;
      if (depth) {
        const auto& dm = (*depth)[j];
        if (!dm.valid[i] || dm.depth[i] < zmin || dm.depth[i] > zmax) continue;
      }
      RawPair q{};
      for (int k = 0; k < 3; ++k) {
        q.p[k] = pred[j].point(i)(k);
        q.g[k] = gt[j].point(i)(k);
      }
      q.dynamic = false;
      out.push_back(q);
    }
  return out;
}

/// Mean over pairs of (alpha * z - m)^2, evaluated directly.
inline double depth_objective(double alpha, const std::vector<double>& z, const std::vector<double>& m) {
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (alpha * z[i] - m[i]) * (alpha * z[i] - m[i]);
  return s / static_cast<double>(z.size());
}

}  // namespace oracle
