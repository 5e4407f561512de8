// Trajectory and depth evaluation: Sim(3) Umeyama alignment, ATE, RPE, and
// scale/shift-invariant depth metrics (Abs Rel, delta < 1.25).
//
// Trajectory poses are world_from_cam (TUM convention); camera position is
// the translation component.
#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "dynrec/geom.hpp"

namespace dynrec {

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrajectoryEntry {
  int frame_id = 0;
  PoseSE3 world_from_cam;
};

using Trajectory = std::vector<TrajectoryEntry>;

inline void check_paired(const Trajectory& pred, const Trajectory& gt) {
  if (pred.size() != gt.size())
    throw EvalError("trajectories differ in length");
  if (pred.size() < 3) throw EvalError("need at least 3 poses");
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i].frame_id != gt[i].frame_id)
      throw EvalError("trajectories disagree on frame ids");
  for (size_t i = 1; i < pred.size(); ++i)
    if (pred[i].frame_id <= pred[i - 1].frame_id)
      throw EvalError("frame ids must be strictly increasing");
}

// Closed-form least-squares Sim(3) aligning predicted positions to ground
// truth: centroids, covariance SVD with reflection guard, scale from the
// variance ratio. Throws EvalError for degenerate (collinear) inputs.
inline Sim3 umeyama_sim3(const Trajectory& pred, const Trajectory& gt) {
  check_paired(pred, gt);
  const int n = int(pred.size());

  Eigen::Vector3d mp = Eigen::Vector3d::Zero(), mg = Eigen::Vector3d::Zero();
  for (int i = 0; i < n; ++i) {
    mp += pred[size_t(i)].world_from_cam.translation;
    mg += gt[size_t(i)].world_from_cam.translation;
  }
  mp /= n;
  mg /= n;

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double var_pred = 0;
  for (int i = 0; i < n; ++i) {
    const Eigen::Vector3d dp = pred[size_t(i)].world_from_cam.translation - mp;
    const Eigen::Vector3d dg = gt[size_t(i)].world_from_cam.translation - mg;
    cov += dg * dp.transpose();
    var_pred += dp.squaredNorm();
  }
  cov /= n;
  var_pred /= n;

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (var_pred < 1e-18 || sv(1) < 1e-12 * std::max(1.0, sv(0)))
    throw EvalError("umeyama_sim3: degenerate (collinear or coincident) positions");

  Eigen::Vector3d d(1, 1, 1);
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2) = -1;
  const Eigen::Matrix3d rot =
      svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  const double scale = sv.dot(d) / var_pred;
  if (!(scale > 0)) throw EvalError("umeyama_sim3: non-positive scale");

  Sim3 out;
  out.scale = scale;
  out.rotation = rot;
  out.translation = mg - scale * (rot * mp);
  return out;
}

// RMSE of camera positions after Sim(3) alignment of pred onto gt.
inline double ate(const Trajectory& pred, const Trajectory& gt) {
  const Sim3 align = umeyama_sim3(pred, gt);
  double sq = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const Eigen::Vector3d e =
        align.apply(pred[i].world_from_cam.translation) -
        gt[i].world_from_cam.translation;
    sq += e.squaredNorm();
  }
  return std::sqrt(sq / double(pred.size()));
}

struct RpeResult {
  double trans = 0;     // RMSE of relative translation error magnitude
  double rot_deg = 0;   // RMSE of relative rotation angle, degrees
};

// Relative pose error over a step of `delta` frames. The prediction is scale
// corrected with the Umeyama Sim(3) scale before comparing relative motions.
inline RpeResult rpe(const Trajectory& pred, const Trajectory& gt,
                     int delta = 1) {
  check_paired(pred, gt);
  if (delta < 1 || int(pred.size()) <= delta)
    throw std::invalid_argument("rpe: trajectory shorter than delta");
  const double scale = umeyama_sim3(pred, gt).scale;

  auto scaled = [&](const TrajectoryEntry& e) {
    PoseSE3 p = e.world_from_cam;
    p.translation *= scale;
    return p;
  };

  double sq_t = 0, sq_r = 0;
  const int m = int(pred.size()) - delta;
  for (int i = 0; i < m; ++i) {
    const PoseSE3 rel_gt = gt[size_t(i)].world_from_cam.inverse() *
                           gt[size_t(i + delta)].world_from_cam;
    const PoseSE3 rel_pred =
        scaled(pred[size_t(i)]).inverse() * scaled(pred[size_t(i + delta)]);
    const PoseSE3 err = rel_gt.inverse() * rel_pred;
    sq_t += err.translation.squaredNorm();
    // atan2 form of the rotation angle; exact at zero, stable near pi
    const Eigen::Matrix3d& r = err.rotation;
    const double s = 0.5 * Eigen::Vector3d(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0),
                                           r(1, 0) - r(0, 1))
                               .norm();
    const double c = 0.5 * (r.trace() - 1.0);
    const double angle_deg = std::atan2(s, c) * 180.0 / M_PI;
    sq_r += angle_deg * angle_deg;
  }
  return {std::sqrt(sq_t / m), std::sqrt(sq_r / m)};
}

// Takes the first `count` entries at the given temporal stride (the standard
// subsampling protocol for long sequences).
inline Trajectory subsample_trajectory(const Trajectory& traj, int count,
                                       int stride) {
  Trajectory out;
  for (size_t i = 0; i < traj.size() && int(out.size()) < count;
       i += size_t(stride))
    out.push_back(traj[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Depth alignment and metrics
// ---------------------------------------------------------------------------

enum class DepthAlignMode { kScaleShift, kScale, kPerFrameMedian };

inline DepthAlignMode parse_align_mode(const std::string& name) {
  if (name == "scale_shift") return DepthAlignMode::kScaleShift;
  if (name == "scale") return DepthAlignMode::kScale;
  if (name == "per_frame_median") return DepthAlignMode::kPerFrameMedian;
  throw std::invalid_argument("unknown depth alignment mode: " + name);
}

struct AlignedDepth {
  std::vector<DepthMap> aligned;
  double scale = 1.0;
  double shift = 0.0;                    // used by kScaleShift only
  std::vector<double> per_frame_scales;  // used by kPerFrameMedian only
};

// Sequence-level depth alignment. kScaleShift fits one (s, b) minimizing
// sum (s * pred + b - gt)^2 over all valid pixels of the whole sequence;
// kScale fits s only; kPerFrameMedian scales each frame by
// median(gt) / median(pred).
inline AlignedDepth align_depth(const std::vector<DepthMap>& pred,
                                const std::vector<DepthMap>& gt,
                                DepthAlignMode mode) {
  if (pred.size() != gt.size() || pred.empty())
    throw EvalError("align_depth: sequence length mismatch");

  auto overlap_valid = [](const DepthMap& p, const DepthMap& g, int u, int v) {
    return p.valid.at(u, v) && g.valid.at(u, v);
  };

  AlignedDepth out;
  out.aligned = pred;

  if (mode == DepthAlignMode::kPerFrameMedian) {
    for (size_t f = 0; f < pred.size(); ++f) {
      if (pred[f].size() != gt[f].size())
        throw EvalError("align_depth: frame size mismatch");
      std::vector<double> ps, gs;
      for (int v = 0; v < pred[f].size().height; ++v)
        for (int u = 0; u < pred[f].size().width; ++u)
          if (overlap_valid(pred[f], gt[f], u, v)) {
            ps.push_back(pred[f].depth.at(u, v));
            gs.push_back(gt[f].depth.at(u, v));
          }
      if (ps.empty())
        throw EvalError("align_depth: no valid overlap in frame " +
                        std::to_string(f));
      auto median = [](std::vector<double>& x) {
        std::nth_element(x.begin(), x.begin() + x.size() / 2, x.end());
        return x[x.size() / 2];
      };
      const double mp = median(ps);
      if (std::abs(mp) < 1e-18)
        throw EvalError("align_depth: zero median prediction");
      const double s = median(gs) / mp;
      out.per_frame_scales.push_back(s);
      for (auto& d : out.aligned[f].depth.data()) d *= s;
    }
    return out;
  }

  double spp = 0, sp = 0, sg = 0, spg = 0;
  long count = 0;
  for (size_t f = 0; f < pred.size(); ++f) {
    if (pred[f].size() != gt[f].size())
      throw EvalError("align_depth: frame size mismatch");
    long frame_count = 0;
    for (int v = 0; v < pred[f].size().height; ++v)
      for (int u = 0; u < pred[f].size().width; ++u) {
        if (!overlap_valid(pred[f], gt[f], u, v)) continue;
        const double p = pred[f].depth.at(u, v);
        const double g = gt[f].depth.at(u, v);
        spp += p * p;
        sp += p;
        sg += g;
        spg += p * g;
        ++frame_count;
      }
    if (frame_count == 0)
      throw EvalError("align_depth: no valid overlap in frame " +
                      std::to_string(f));
    count += frame_count;
  }

  if (mode == DepthAlignMode::kScale) {
    if (spp < 1e-18) throw EvalError("align_depth: degenerate prediction");
    out.scale = spg / spp;
  } else {
    const double det = spp * count - sp * sp;
    if (std::abs(det) < 1e-18)
      throw EvalError("align_depth: degenerate least-squares system");
    out.scale = (spg * count - sp * sg) / det;
    out.shift = (sg * spp - sp * spg) / det;
  }
  for (auto& frame : out.aligned)
    for (auto& d : frame.depth.data()) d = out.scale * d + out.shift;
  return out;
}

struct DepthEvalReport {
  double abs_rel = 0;
  double delta_125 = 0;
  double scale = 1.0;
  double shift = 0.0;
  long pixel_count = 0;
};

// Abs Rel = mean |p - g| / g; delta_125 = fraction with max(p/g, g/p) < 1.25,
// over pixels valid in both maps. Non-positive aligned predictions count as
// delta outliers.
inline DepthEvalReport depth_metrics(const std::vector<DepthMap>& pred_aligned,
                                     const std::vector<DepthMap>& gt) {
  if (pred_aligned.size() != gt.size() || pred_aligned.empty())
    throw EvalError("depth_metrics: sequence length mismatch");
  DepthEvalReport report;
  double abs_rel_sum = 0;
  long inliers = 0;
  for (size_t f = 0; f < pred_aligned.size(); ++f) {
    if (pred_aligned[f].size() != gt[f].size())
      throw EvalError("depth_metrics: frame size mismatch");
    for (int v = 0; v < gt[f].size().height; ++v)
      for (int u = 0; u < gt[f].size().width; ++u) {
        if (!pred_aligned[f].valid.at(u, v) || !gt[f].valid.at(u, v)) continue;
        const double p = pred_aligned[f].depth.at(u, v);
        const double g = gt[f].depth.at(u, v);
        abs_rel_sum += std::abs(p - g) / g;
        if (p > 0 && std::max(p / g, g / p) < 1.25) ++inliers;
        ++report.pixel_count;
      }
  }
  if (report.pixel_count == 0) throw EvalError("depth_metrics: no valid pixels");
  report.abs_rel = abs_rel_sum / double(report.pixel_count);
  report.delta_125 = double(inliers) / double(report.pixel_count);
  return report;
}

}  // namespace dynrec
