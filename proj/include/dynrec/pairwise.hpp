// Per-pair geometry: focal recovery from a pointmap, robust relative pose
// via RANSAC + PnP, camera-induced flow, and static-mask inference.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>

#include "dynrec/geom.hpp"

namespace dynrec {

struct EstimationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Pairwise prediction for a directed edge (t, t'): both pointmaps live in the
// frame-t camera; `pointmap_self` covers frame t at time t, `pointmap_other`
// frame t' at time t'.
struct PairEstimate {
  Pointmap pointmap_self;
  Pointmap pointmap_other;
  ConfidenceMap conf_self;
  ConfidenceMap conf_other;
  int frame_self = 0;
  int frame_other = 1;

  const ImageSize& size() const { return pointmap_self.size(); }

  void validate() const {
    if (frame_self == frame_other)
      throw std::invalid_argument("PairEstimate: frame ids must differ");
    const ImageSize& s = pointmap_self.size();
    if (pointmap_other.size() != s || conf_self.size() != s ||
        conf_other.size() != s)
      throw std::invalid_argument("PairEstimate: grids disagree in size");
  }
};

struct RelativePoseResult {
  PoseSE3 pose;  // camera t' relative to frame t: x_{t'} = R x_t + T
  Grid<std::uint8_t> inlier_mask;
  int inlier_count = 0;
};

struct RansacParams {
  int max_iterations = 200;
  double inlier_threshold_px = 2.0;
  int min_inliers = 4;
  std::uint64_t seed = 0;
  bool confidence_weighted_sampling = true;
};

// ---------------------------------------------------------------------------
// Focal estimation
// ---------------------------------------------------------------------------

// Robust focal length from a pointmap expressed in its own camera frame.
// Initialized from the median of per-pixel closed-form focals
// f = z * |(u - cx, v - cy)| / |(x, y)| and refined by IRLS (Weiszfeld) on
// the 2D residuals f * (x/z, y/z) - (u - cx, v - cy).
inline double estimate_focal(const Pointmap& pm) {
  const ImageSize size = pm.size();
  require_valid(size);
  const double cx = 0.5 * (size.width - 1);
  const double cy = 0.5 * (size.height - 1);

  std::vector<Eigen::Vector2d> dirs;   // (x/z, y/z)
  std::vector<Eigen::Vector2d> pix;    // (u - cx, v - cy)
  std::vector<double> init_samples;
  int valid_positive = 0;
  for (int v = 0; v < size.height; ++v) {
    for (int u = 0; u < size.width; ++u) {
      if (!pm.valid.at(u, v)) continue;
      const Eigen::Vector3d& p = pm.points.at(u, v);
      if (!(p.z() > 0)) continue;
      ++valid_positive;
      const double rxy = std::hypot(p.x(), p.y());
      if (rxy < 1e-12 * p.z()) continue;  // on the optical axis
      dirs.emplace_back(p.x() / p.z(), p.y() / p.z());
      pix.emplace_back(u - cx, v - cy);
      const double duv = pix.back().norm();
      if (duv > 0.5) init_samples.push_back(p.z() * duv / rxy);
    }
  }
  if (valid_positive < 32)
    throw EstimationError("estimate_focal: fewer than 32 valid pixels");
  if (dirs.empty() || init_samples.empty())
    throw EstimationError("estimate_focal: degenerate axis-only geometry");

  std::nth_element(init_samples.begin(),
                   init_samples.begin() + init_samples.size() / 2,
                   init_samples.end());
  double f = init_samples[init_samples.size() / 2];

  for (int iter = 0; iter < 50; ++iter) {
    double num = 0, den = 0;
    for (size_t i = 0; i < dirs.size(); ++i) {
      const double resid = (f * dirs[i] - pix[i]).norm();
      const double w = 1.0 / std::max(resid, 1e-9);
      num += w * dirs[i].dot(pix[i]);
      den += w * dirs[i].squaredNorm();
    }
    if (den <= 0)
      throw EstimationError("estimate_focal: degenerate geometry");
    const double f_next = num / den;
    const bool done = std::abs(f_next - f) <= 1e-6 * std::abs(f);
    f = f_next;
    if (done) break;
  }
  if (!(f > 0) || !std::isfinite(f))
    throw EstimationError("estimate_focal: no positive solution");
  return f;
}

// ---------------------------------------------------------------------------
// Minimal PnP solver (3 points + 1 for disambiguation)
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::vector<double> poly_mul(const std::vector<double>& a,
                                    const std::vector<double>& b) {
  std::vector<double> out(a.size() + b.size() - 1, 0.0);
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  return out;
}

// Real roots of a polynomial (ascending coefficients) via the companion
// matrix, polished with a few Newton steps.
inline std::vector<double> real_roots(std::vector<double> coeffs) {
  while (coeffs.size() > 1 && std::abs(coeffs.back()) < 1e-14)
    coeffs.pop_back();
  const int deg = int(coeffs.size()) - 1;
  if (deg < 1) return {};
  if (deg == 1) return {-coeffs[0] / coeffs[1]};

  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(deg, deg);
  for (int i = 0; i < deg; ++i) companion(i, deg - 1) = -coeffs[size_t(i)] / coeffs.back();
  for (int i = 1; i < deg; ++i) companion(i, i - 1) = 1.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(companion, false);

  auto eval = [&](double x, double* dfdx) {
    double p = 0, dp = 0;
    for (int i = deg; i >= 0; --i) {
      dp = dp * x + p;
      p = p * x + coeffs[size_t(i)];
    }
    *dfdx = dp;
    return p;
  };

  std::vector<double> roots;
  for (int i = 0; i < deg; ++i) {
    const auto ev = es.eigenvalues()(i);
    if (std::abs(ev.imag()) > 1e-8 * (1.0 + std::abs(ev.real()))) continue;
    double x = ev.real();
    for (int it = 0; it < 3; ++it) {
      double dp;
      const double p = eval(x, &dp);
      if (std::abs(dp) < 1e-14) break;
      x -= p / dp;
    }
    roots.push_back(x);
  }
  return roots;
}

// Least-squares rigid fit: R * src + t ~= dst (Kabsch).
inline PoseSE3 rigid_fit(const std::vector<Eigen::Vector3d>& src,
                         const std::vector<Eigen::Vector3d>& dst,
                         const std::vector<double>* weights = nullptr) {
  Eigen::Vector3d cs = Eigen::Vector3d::Zero(), cd = Eigen::Vector3d::Zero();
  double wsum = 0;
  for (size_t i = 0; i < src.size(); ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    cs += w * src[i];
    cd += w * dst[i];
    wsum += w;
  }
  cs /= wsum;
  cd /= wsum;
  Eigen::Matrix3d h = Eigen::Matrix3d::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    h += w * (src[i] - cs) * (dst[i] - cd).transpose();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1 : 1;
  PoseSE3 out;
  out.rotation = svd.matrixV() * d * svd.matrixU().transpose();
  out.translation = cd - out.rotation * cs;
  return out;
}

// Grunert's three-point pose: distances s_i of the camera center to three
// world points, from the pairwise angle/distance constraints
//   s_i^2 + s_j^2 - 2 s_i s_j cos(theta_ij) = |W_i - W_j|^2.
// Substituting s2 = u s1, s3 = v s1 reduces the system to a quartic in v.
inline std::vector<PoseSE3> solve_p3p(const Eigen::Vector3d world[3],
                                      const Eigen::Vector3d bearing[3]) {
  const double a2 = (world[1] - world[2]).squaredNorm();
  const double b2 = (world[0] - world[2]).squaredNorm();
  const double c2 = (world[0] - world[1]).squaredNorm();
  if (a2 < 1e-16 || b2 < 1e-16 || c2 < 1e-16) return {};
  const double p = 2.0 * bearing[1].dot(bearing[2]);
  const double q = 2.0 * bearing[0].dot(bearing[2]);
  const double r = 2.0 * bearing[0].dot(bearing[1]);

  // u = N(v) / D(v); substituted into u^2 - p v u + E(v) = 0 this gives
  // N^2 - p v N D + E D^2 = 0, a quartic in v.
  const std::vector<double> n_poly = {-(a2 + b2 - c2) / b2,
                                      -q * (c2 - a2) / b2,
                                      -(a2 - b2 - c2) / b2};
  const std::vector<double> d_poly = {-r, p};
  const std::vector<double> e_poly = {-a2 / b2, a2 * q / b2, (b2 - a2) / b2};

  std::vector<double> quartic = poly_mul(n_poly, n_poly);
  const std::vector<double> pvnd =
      poly_mul({0.0, p}, poly_mul(n_poly, d_poly));
  const std::vector<double> edd = poly_mul(e_poly, poly_mul(d_poly, d_poly));
  quartic.resize(5, 0.0);
  for (size_t i = 0; i < quartic.size(); ++i) {
    if (i < pvnd.size()) quartic[i] -= pvnd[i];
    if (i < edd.size()) quartic[i] += edd[i];
  }

  std::vector<PoseSE3> out;
  for (double v : real_roots(quartic)) {
    if (!(v > 0) || !std::isfinite(v)) continue;
    const double denom = p * v - r;
    if (std::abs(denom) < 1e-12) continue;
    const double u =
        (n_poly[2] * v * v + n_poly[1] * v + n_poly[0]) / denom;
    if (!(u > 0)) continue;
    const double s1_sq = b2 / (1.0 + v * v - q * v);
    if (!(s1_sq > 0)) continue;
    const double s1 = std::sqrt(s1_sq);
    const double s2 = u * s1, s3 = v * s1;
    // keep only roots that satisfy all three constraints
    const double e1 = s2 * s2 + s3 * s3 - s2 * s3 * p - a2;
    const double e2 = s1 * s1 + s3 * s3 - s1 * s3 * q - b2;
    const double e3 = s1 * s1 + s2 * s2 - s1 * s2 * r - c2;
    const double scale = a2 + b2 + c2;
    if (std::abs(e1) + std::abs(e2) + std::abs(e3) > 1e-6 * scale) continue;

    const std::vector<Eigen::Vector3d> cam = {s1 * bearing[0], s2 * bearing[1],
                                              s3 * bearing[2]};
    const std::vector<Eigen::Vector3d> wld = {world[0], world[1], world[2]};
    out.push_back(rigid_fit(wld, cam));
  }
  return out;
}

inline Eigen::Matrix3d so3_exp(const Eigen::Vector3d& w) {
  const double theta = w.norm();
  if (theta < 1e-12) {
    Eigen::Matrix3d skew;
    skew << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
    return Eigen::Matrix3d::Identity() + skew;
  }
  return Eigen::AngleAxisd(theta, w / theta).toRotationMatrix();
}

// Gauss-Newton refinement of a camera pose on 2D-3D correspondences,
// minimizing squared reprojection error.
inline PoseSE3 refine_pnp(PoseSE3 pose, const std::vector<Eigen::Vector3d>& world,
                          const std::vector<Eigen::Vector2d>& pixels,
                          const Intrinsics& k, int iterations = 15) {
  for (int it = 0; it < iterations; ++it) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
    for (size_t i = 0; i < world.size(); ++i) {
      const Eigen::Vector3d y = pose.apply(world[i]);
      if (!(y.z() > 1e-9)) continue;
      const double iz = 1.0 / y.z();
      const Eigen::Vector2d e(
          k.focal * y.x() * iz + k.principal_point.x() - pixels[i].x(),
          k.focal * y.y() * iz + k.principal_point.y() - pixels[i].y());
      Eigen::Matrix<double, 2, 3> dpi;
      dpi << k.focal * iz, 0, -k.focal * y.x() * iz * iz, 0, k.focal * iz,
          -k.focal * y.y() * iz * iz;
      const Eigen::Vector3d rw = y - pose.translation;  // R * world
      Eigen::Matrix3d skew;
      skew << 0, -rw.z(), rw.y(), rw.z(), 0, -rw.x(), -rw.y(), rw.x(), 0;
      Eigen::Matrix<double, 2, 6> jac;
      jac.block<2, 3>(0, 0) = dpi * (-skew);  // d y / d omega = -[R w]x
      jac.block<2, 3>(0, 3) = dpi;
      h += jac.transpose() * jac;
      g += jac.transpose() * e;
    }
    h.diagonal().array() += 1e-12;
    const Eigen::Matrix<double, 6, 1> delta = h.ldlt().solve(-g);
    if (!delta.allFinite()) break;
    pose.rotation = so3_exp(delta.head<3>()) * pose.rotation;
    pose.translation += delta.tail<3>();
    if (delta.norm() < 1e-14) break;
  }
  // round-off guard: keep the rotation orthonormal
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      pose.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  pose.rotation = svd.matrixU() * svd.matrixV().transpose();
  return pose;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// RANSAC + PnP relative pose
// ---------------------------------------------------------------------------

// Relative pose of camera t' with respect to frame t, from the frame-t'
// pixel grid and the 3D points of frame t' expressed in frame-t coordinates.
// Returns nullopt when RANSAC cannot find min_inliers support.
inline std::optional<RelativePoseResult> estimate_relative_pose(
    const PairEstimate& pair, const Intrinsics& k_other,
    const RansacParams& params) {
  pair.validate();
  const ImageSize size = pair.size();

  std::vector<Eigen::Vector3d> world;
  std::vector<Eigen::Vector2d> pixels;
  std::vector<double> conf;
  std::vector<int> pixel_index;
  for (int v = 0; v < size.height; ++v) {
    for (int u = 0; u < size.width; ++u) {
      if (!pair.pointmap_other.valid.at(u, v)) continue;
      world.push_back(pair.pointmap_other.points.at(u, v));
      pixels.emplace_back(double(u), double(v));
      conf.push_back(std::max(0.0, pair.conf_other.values.at(u, v)));
      pixel_index.push_back(v * size.width + u);
    }
  }
  const int n = int(world.size());
  if (n < 6)
    throw std::invalid_argument(
        "estimate_relative_pose: fewer than 6 valid pixels");

  std::mt19937_64 rng(params.seed);
  const double conf_sum = std::accumulate(conf.begin(), conf.end(), 0.0);
  std::discrete_distribution<int> weighted;
  if (params.confidence_weighted_sampling && conf_sum > 0)
    weighted = std::discrete_distribution<int>(conf.begin(), conf.end());
  std::uniform_int_distribution<int> uniform(0, n - 1);
  auto draw = [&]() {
    return (params.confidence_weighted_sampling && conf_sum > 0)
               ? weighted(rng)
               : uniform(rng);
  };

  auto reprojection_error = [&](const PoseSE3& pose, int i) {
    const Eigen::Vector3d y = pose.apply(world[size_t(i)]);
    if (!(y.z() > 1e-12)) return std::numeric_limits<double>::infinity();
    const Eigen::Vector2d p(
        k_other.focal * y.x() / y.z() + k_other.principal_point.x(),
        k_other.focal * y.y() / y.z() + k_other.principal_point.y());
    return (p - pixels[size_t(i)]).norm();
  };

  int best_count = 0;
  PoseSE3 best_pose;
  for (int iter = 0; iter < params.max_iterations; ++iter) {
    int idx[4];
    bool distinct = true;
    for (int j = 0; j < 4; ++j) {
      int candidate = draw();
      for (int tries = 0; tries < 64; ++tries) {
        bool dup = false;
        for (int m = 0; m < j; ++m) dup |= (idx[m] == candidate);
        if (!dup) break;
        candidate = draw();
        if (tries == 63) distinct = false;
      }
      idx[j] = candidate;
    }
    if (!distinct) continue;

    Eigen::Vector3d w3[3];
    Eigen::Vector3d bearings[3];
    for (int j = 0; j < 3; ++j) {
      w3[j] = world[size_t(idx[j])];
      bearings[j] = backproject(pixels[size_t(idx[j])], 1.0, k_other).normalized();
    }
    // Fourth sample disambiguates among the up-to-four solutions.
    for (const PoseSE3& cand : detail::solve_p3p(w3, bearings)) {
      if (reprojection_error(cand, idx[3]) > params.inlier_threshold_px)
        continue;
      int count = 0;
      for (int i = 0; i < n; ++i)
        count += reprojection_error(cand, i) < params.inlier_threshold_px;
      if (count > best_count) {
        best_count = count;
        best_pose = cand;
      }
    }
  }

  if (best_count < std::max(4, params.min_inliers)) return std::nullopt;

  // Refine on all inliers, then rebuild the inlier set with the refined pose.
  for (int round = 0; round < 2; ++round) {
    std::vector<Eigen::Vector3d> in_world;
    std::vector<Eigen::Vector2d> in_pixels;
    for (int i = 0; i < n; ++i) {
      if (reprojection_error(best_pose, i) < params.inlier_threshold_px) {
        in_world.push_back(world[size_t(i)]);
        in_pixels.push_back(pixels[size_t(i)]);
      }
    }
    if (int(in_world.size()) < 4) break;
    best_pose = detail::refine_pnp(best_pose, in_world, in_pixels, k_other);
  }

  RelativePoseResult result;
  result.pose = best_pose;
  result.inlier_mask = Grid<std::uint8_t>(size, 0);
  result.inlier_count = 0;
  for (int i = 0; i < n; ++i) {
    if (reprojection_error(best_pose, i) < params.inlier_threshold_px) {
      result.inlier_mask.data()[size_t(pixel_index[size_t(i)])] = 1;
      ++result.inlier_count;
    }
  }
  if (result.inlier_count < std::max(4, params.min_inliers))
    return std::nullopt;
  return result;
}

// ---------------------------------------------------------------------------
// Camera-induced flow and static mask
// ---------------------------------------------------------------------------

// Flow produced by pure camera motion: each frame-t pixel is backprojected
// with depth_t / k_t, moved by `rel` (frame-t coords -> frame-t' coords),
// and reprojected with k_t2. Pixels whose transformed depth is non-positive
// (or whose input depth is invalid) are marked invalid.
inline FlowField induced_flow(const DepthMap& depth_t, const Intrinsics& k_t,
                              const Intrinsics& k_t2, const PoseSE3& rel) {
  FlowField out(depth_t.size());
  for (int v = 0; v < depth_t.size().height; ++v) {
    for (int u = 0; u < depth_t.size().width; ++u) {
      const double d = depth_t.depth.at(u, v);
      if (!depth_t.valid.at(u, v) || !(d > 0)) {
        out.valid.at(u, v) = 0;
        continue;
      }
      const Eigen::Vector3d y =
          rel.apply(backproject({double(u), double(v)}, d, k_t));
      if (!(y.z() > 0)) {
        out.valid.at(u, v) = 0;
        continue;
      }
      out.flow.at(u, v) =
          project(y, k_t2) - Eigen::Vector2d(double(u), double(v));
    }
  }
  return out;
}

// Smooth-L1 of a flow residual, summed over the two components
// (transition beta = 1 px).
inline double smooth_l1(const Eigen::Vector2d& r, double beta = 1.0) {
  double total = 0;
  for (int i = 0; i < 2; ++i) {
    const double a = std::abs(r[i]);
    total += a < beta ? 0.5 * a * a / beta : a - 0.5 * beta;
  }
  return total;
}

// 1% of the image diagonal; the default static-mask threshold.
inline double default_static_mask_alpha(const ImageSize& size) {
  return 0.01 * std::hypot(double(size.height), double(size.width));
}

// A pixel is static when alpha > smoothL1(F_cam - F_est). Pixels where
// either flow is invalid are conservatively marked non-static so they drop
// out of every mask-gated reduction.
inline StaticMask static_mask(const FlowField& f_cam, const FlowField& f_est,
                              double alpha) {
  if (f_cam.size() != f_est.size())
    throw std::invalid_argument("static_mask: size mismatch");
  StaticMask out(f_cam.size(), 0);
  for (int v = 0; v < f_cam.size().height; ++v) {
    for (int u = 0; u < f_cam.size().width; ++u) {
      if (!f_cam.valid.at(u, v) || !f_est.valid.at(u, v)) continue;
      out.is_static.at(u, v) =
          alpha > smooth_l1(f_cam.flow.at(u, v) - f_est.flow.at(u, v)) ? 1 : 0;
    }
  }
  return out;
}

}  // namespace dynrec
