// Global dynamic point-cloud and camera-pose optimization.
//
// Variables: per frame a camera pose (unit quaternion + translation,
// cam_from_world), a log-depth grid and a log-focal; per edge a log scale and
// an alignment pose mapping edge-local coordinates into the world frame.
// The objective is
//     L_align + w_smooth * L_smooth + w_flow * L_flow
// where L_align sums confidence-weighted distances between the
// reparameterized global pointmaps and the scaled, rigidly aligned pairwise
// pointmaps; L_smooth penalizes consecutive-frame pose changes; and L_flow
// penalizes disagreement between camera-induced flow (from the global
// variables) and the supplied flow on confidently static pixels. The flow
// term stays disabled until its mean per-pixel value first drops below
// OptimSchedule::flow_enable_threshold, then latches on.
//
// Gauge fixing: the frame-0 pose is pinned to the identity and the mean of
// the edge log scales is re-projected to zero after every optimizer step.
//
// Gradients are hand-written reverse-mode accumulations; unit quaternions
// enter through a scale-invariant rotation formula R(q) = M(q) / |q|^2 so
// the gradient is well defined for the (renormalized-after-step) raw
// quaternion coordinates.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "dynrec/geom.hpp"
#include "dynrec/graph.hpp"
#include "dynrec/pairwise.hpp"

namespace dynrec {

struct InitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct OptimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FrameVariables {
  Eigen::Vector4d q{1, 0, 0, 0};  // (w, x, y, z), cam_from_world
  Eigen::Vector3d t{0, 0, 0};
  Grid<double> log_depth;
  double log_focal = 0;
};

struct EdgeVariables {
  double log_scale = 0;
  Eigen::Vector4d q{1, 0, 0, 0};  // world_from_edge alignment pose
  Eigen::Vector3d t{0, 0, 0};
};

struct OptimSchedule {
  int iterations = 300;
  double learning_rate = 0.01;
  // Cosine decay target; annealing the step is what lets the L1 objective
  // settle instead of orbiting the optimum at a fixed step size.
  double lr_end = 0.0;
  double w_smooth = 0.01;
  double w_flow = 0.01;
  double flow_enable_threshold = 20.0;
  double mask_update_threshold = 50.0;
  int mask_update_interval = 10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct GlobalState {
  std::vector<FrameVariables> frames;
  std::map<Edge, EdgeVariables> edges;
  VideoGraph graph;
  std::map<Edge, StaticMask> masks;
  ImageSize size;
  Eigen::Vector2d principal_point{0, 0};

  Intrinsics frame_intrinsics(int f) const {
    return Intrinsics{std::exp(frames[size_t(f)].log_focal), principal_point,
                      size};
  }

  PoseSE3 frame_pose(int f) const;      // cam_from_world
  PoseSE3 edge_pose(const Edge& e) const;  // world_from_edge
};

// ---------------------------------------------------------------------------
// Quaternion-to-rotation with Jacobian
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::Matrix3d quat_matrix(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const double n = q.squaredNorm();
  Eigen::Matrix3d m;
  m << w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z;
  return m / n;
}

struct QuatRot {
  Eigen::Matrix3d r;
  Eigen::Matrix3d dr[4];  // dR / dq_k for the scale-invariant formula
};

inline QuatRot quat_rot_jac(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  const double n = q.squaredNorm();
  QuatRot out;
  Eigen::Matrix3d m;
  m << w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z;
  out.r = m / n;

  Eigen::Matrix3d dm[4];
  dm[0] << 2 * w, -2 * z, 2 * y, 2 * z, 2 * w, -2 * x, -2 * y, 2 * x, 2 * w;
  dm[1] << 2 * x, 2 * y, 2 * z, 2 * y, -2 * x, -2 * w, 2 * z, 2 * w, -2 * x;
  dm[2] << -2 * y, 2 * x, 2 * w, 2 * x, 2 * y, 2 * z, -2 * w, 2 * z, -2 * y;
  dm[3] << -2 * z, -2 * w, 2 * x, 2 * w, -2 * z, 2 * y, 2 * x, 2 * y, 2 * z;
  for (int k = 0; k < 4; ++k) out.dr[k] = (dm[k] - 2.0 * q[k] * out.r) / n;
  return out;
}

inline Eigen::Vector4d quat_from_rotation(const Eigen::Matrix3d& r) {
  Eigen::Quaterniond q(r);
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  return {q.w(), q.x(), q.y(), q.z()};
}

}  // namespace detail

inline PoseSE3 GlobalState::frame_pose(int f) const {
  PoseSE3 p;
  p.rotation = detail::quat_matrix(frames[size_t(f)].q);
  p.translation = frames[size_t(f)].t;
  return p;
}

inline PoseSE3 GlobalState::edge_pose(const Edge& e) const {
  const EdgeVariables& ev = edges.at(e);
  PoseSE3 p;
  p.rotation = detail::quat_matrix(ev.q);
  p.translation = ev.t;
  return p;
}

// ---------------------------------------------------------------------------
// Parameter layout (flat vector used by the optimizer and gradient checks)
// ---------------------------------------------------------------------------

enum class ParamClass { kQuaternion, kTranslation, kLogDepth, kLogFocal, kLogScale };

namespace detail {

// [frame 0 .. F-1: q(4) t(3) lf(1)] [all log-depth grids] [edge: ls q(4) t(3)]
struct ParamLayout {
  int num_frames = 0;
  int cells = 0;  // H * W
  int num_edges = 0;

  size_t frame_q(int f) const { return size_t(f) * 8; }
  size_t frame_t(int f) const { return size_t(f) * 8 + 4; }
  size_t frame_lf(int f) const { return size_t(f) * 8 + 7; }
  size_t frame_ld(int f, int cell) const {
    return size_t(num_frames) * 8 + size_t(f) * size_t(cells) + size_t(cell);
  }
  size_t edge_base(int i) const {
    return size_t(num_frames) * 8 + size_t(num_frames) * size_t(cells) +
           size_t(i) * 8;
  }
  size_t edge_ls(int i) const { return edge_base(i); }
  size_t edge_q(int i) const { return edge_base(i) + 1; }
  size_t edge_t(int i) const { return edge_base(i) + 5; }
  size_t total() const { return edge_base(num_edges); }

  static ParamLayout of(const GlobalState& s) {
    ParamLayout l;
    l.num_frames = int(s.frames.size());
    l.cells = s.size.pixels();
    l.num_edges = int(s.edges.size());
    return l;
  }
};

inline std::string describe_param(const GlobalState& s, size_t index) {
  const ParamLayout l = ParamLayout::of(s);
  if (index < size_t(l.num_frames) * 8) {
    const int f = int(index / 8);
    const int k = int(index % 8);
    if (k < 4) return "frame " + std::to_string(f) + " quaternion";
    if (k < 7) return "frame " + std::to_string(f) + " translation";
    return "frame " + std::to_string(f) + " log_focal";
  }
  if (index < l.frame_ld(l.num_frames - 1, l.cells - 1) + 1) {
    const size_t rel = index - size_t(l.num_frames) * 8;
    return "frame " + std::to_string(rel / size_t(l.cells)) + " log_depth";
  }
  const size_t rel = index - l.edge_base(0);
  const int e = int(rel / 8);
  const int k = int(rel % 8);
  if (k == 0) return "edge " + std::to_string(e) + " log_scale";
  if (k < 5) return "edge " + std::to_string(e) + " align quaternion";
  return "edge " + std::to_string(e) + " align translation";
}

}  // namespace detail

inline ParamClass param_class(const GlobalState& s, size_t index) {
  const detail::ParamLayout l = detail::ParamLayout::of(s);
  if (index < size_t(l.num_frames) * 8) {
    const int k = int(index % 8);
    if (k < 4) return ParamClass::kQuaternion;
    if (k < 7) return ParamClass::kTranslation;
    return ParamClass::kLogFocal;
  }
  if (index < l.edge_base(0)) return ParamClass::kLogDepth;
  const int k = int((index - l.edge_base(0)) % 8);
  if (k == 0) return ParamClass::kLogScale;
  if (k < 5) return ParamClass::kQuaternion;
  return ParamClass::kTranslation;
}

inline size_t parameter_count(const GlobalState& s) {
  return detail::ParamLayout::of(s).total();
}

inline std::vector<double> pack_parameters(const GlobalState& s) {
  const detail::ParamLayout l = detail::ParamLayout::of(s);
  std::vector<double> x(l.total());
  for (int f = 0; f < l.num_frames; ++f) {
    const FrameVariables& fv = s.frames[size_t(f)];
    for (int k = 0; k < 4; ++k) x[l.frame_q(f) + size_t(k)] = fv.q[k];
    for (int k = 0; k < 3; ++k) x[l.frame_t(f) + size_t(k)] = fv.t[k];
    x[l.frame_lf(f)] = fv.log_focal;
    for (int c = 0; c < l.cells; ++c)
      x[l.frame_ld(f, c)] = fv.log_depth.data()[size_t(c)];
  }
  int i = 0;
  for (const auto& [e, ev] : s.edges) {
    x[l.edge_ls(i)] = ev.log_scale;
    for (int k = 0; k < 4; ++k) x[l.edge_q(i) + size_t(k)] = ev.q[k];
    for (int k = 0; k < 3; ++k) x[l.edge_t(i) + size_t(k)] = ev.t[k];
    ++i;
  }
  return x;
}

inline void apply_parameters(GlobalState& s, const std::vector<double>& x) {
  const detail::ParamLayout l = detail::ParamLayout::of(s);
  if (x.size() != l.total())
    throw std::invalid_argument("apply_parameters: size mismatch");
  for (int f = 0; f < l.num_frames; ++f) {
    FrameVariables& fv = s.frames[size_t(f)];
    for (int k = 0; k < 4; ++k) fv.q[k] = x[l.frame_q(f) + size_t(k)];
    for (int k = 0; k < 3; ++k) fv.t[k] = x[l.frame_t(f) + size_t(k)];
    fv.log_focal = x[l.frame_lf(f)];
    for (int c = 0; c < l.cells; ++c)
      fv.log_depth.data()[size_t(c)] = x[l.frame_ld(f, c)];
  }
  int i = 0;
  for (auto& [e, ev] : s.edges) {
    ev.log_scale = x[l.edge_ls(i)];
    for (int k = 0; k < 4; ++k) ev.q[k] = x[l.edge_q(i) + size_t(k)];
    for (int k = 0; k < 3; ++k) ev.t[k] = x[l.edge_t(i) + size_t(k)];
    ++i;
  }
}

// ---------------------------------------------------------------------------
// Loss terms with reverse-mode gradients
// ---------------------------------------------------------------------------

namespace detail {

// Numerical smoothing scale for the absolute-value kinks in the align and
// flow losses. Values change by at most kKinkEps per pixel (and are exactly
// zero at zero residual), while gradients decay smoothly below this scale
// instead of flipping sign on machine noise, which would otherwise drive
// Adam's normalized steps into a random walk around the optimum.
constexpr double kKinkEps = 1e-6;

struct FrameCtx {
  QuatRot rot;
  double focal = 1;
  std::vector<double> depth;  // exp(log_depth), row-major
};

struct EdgeCtx {
  QuatRot rot;
  double sigma = 1;
};

struct EvalCtx {
  std::vector<FrameCtx> frames;
  std::vector<EdgeCtx> edges;  // in state.edges (sorted map) order

  static EvalCtx of(const GlobalState& s) {
    EvalCtx ctx;
    ctx.frames.resize(s.frames.size());
    for (size_t f = 0; f < s.frames.size(); ++f) {
      FrameCtx& fc = ctx.frames[f];
      fc.rot = quat_rot_jac(s.frames[f].q);
      fc.focal = std::exp(s.frames[f].log_focal);
      const auto& ld = s.frames[f].log_depth.data();
      fc.depth.resize(ld.size());
      for (size_t i = 0; i < ld.size(); ++i) fc.depth[i] = std::exp(ld[i]);
    }
    ctx.edges.reserve(s.edges.size());
    for (const auto& [e, ev] : s.edges)
      ctx.edges.push_back({quat_rot_jac(ev.q), std::exp(ev.log_scale)});
    return ctx;
  }
};

// Confidence-weighted sum over pixels of |X_global - sigma * (R_e p + T_e)|_2
// for both frames of every edge. Summation order: edges in sorted order, the
// two frames of each edge in (first, second) order, then rows, then columns.
inline double align_term(const GlobalState& s,
                         const std::map<Edge, PairEstimate>& pairs,
                         const EvalCtx& ctx, std::vector<double>* grad) {
  const ParamLayout layout = ParamLayout::of(s);
  const double cx = s.principal_point.x(), cy = s.principal_point.y();
  const int w = s.size.width, h = s.size.height;
  double loss = 0;

  int edge_index = -1;
  for (const auto& [e, ev] : s.edges) {
    ++edge_index;
    const auto it = pairs.find(e);
    if (it == pairs.end())
      throw std::invalid_argument("loss_align: missing pair for an edge");
    const PairEstimate& pair = it->second;
    const EdgeCtx& ec = ctx.edges[size_t(edge_index)];
    const double sigma = ec.sigma;

    for (int side = 0; side < 2; ++side) {
      const int f = side == 0 ? e.first : e.second;
      const Pointmap& pm = side == 0 ? pair.pointmap_self : pair.pointmap_other;
      const ConfidenceMap& cm = side == 0 ? pair.conf_self : pair.conf_other;
      const FrameCtx& fc = ctx.frames[size_t(f)];
      const double inv_f = 1.0 / fc.focal;
      const Eigen::Matrix3d& rf = fc.rot.r;
      const Eigen::Matrix3d& re = ec.rot.r;
      const Eigen::Vector3d tf = s.frames[size_t(f)].t;
      const Eigen::Vector3d te = s.edges.at(e).t;

      for (int v = 0; v < h; ++v) {
        for (int u = 0; u < w; ++u) {
          const int cell = v * w + u;
          if (!pm.valid.data()[size_t(cell)]) continue;
          const double c = cm.values.data()[size_t(cell)];
          if (!(c > 0)) continue;
          const double d = fc.depth[size_t(cell)];
          const Eigen::Vector3d v3((u - cx) * d * inv_f, (v - cy) * d * inv_f,
                                   d);
          const Eigen::Vector3d world = rf.transpose() * (v3 - tf);
          const Eigen::Vector3d p = pm.points.data()[size_t(cell)];
          const Eigen::Vector3d target = sigma * (re * p + te);
          const Eigen::Vector3d diff = world - target;
          const double soft = std::sqrt(diff.squaredNorm() + kKinkEps * kKinkEps);
          loss += c * (soft - kKinkEps);

          if (!grad) continue;
          const Eigen::Vector3d g = (c / soft) * diff;
          const Eigen::Vector3d gv = rf * g;  // dL/dv3
          double* gr = grad->data();
          // frame side
          for (int k = 0; k < 3; ++k) gr[layout.frame_t(f) + size_t(k)] -= gv[k];
          const Eigen::Vector3d lever = v3 - tf;
          for (int k = 0; k < 4; ++k)
            gr[layout.frame_q(f) + size_t(k)] += (fc.rot.dr[k] * g).dot(lever);
          gr[layout.frame_ld(f, cell)] += gv.dot(v3);
          gr[layout.frame_lf(f)] -= gv.x() * v3.x() + gv.y() * v3.y();
          // edge side
          gr[layout.edge_ls(edge_index)] -= g.dot(target);
          for (int k = 0; k < 3; ++k)
            gr[layout.edge_t(edge_index) + size_t(k)] -= sigma * g[k];
          for (int k = 0; k < 4; ++k)
            gr[layout.edge_q(edge_index) + size_t(k)] -=
                sigma * g.dot(ec.rot.dr[k] * p);
        }
      }
    }
  }
  return loss;
}

// sum_t ( |R_t^T R_{t+1} - I|_F + |R_t^T (T_{t+1} - T_t)|_2 )
inline double smooth_term(const GlobalState& s, const EvalCtx& ctx,
                          std::vector<double>* grad) {
  if (s.frames.size() < 2)
    throw std::invalid_argument("loss_smooth: need at least 2 frames");
  const ParamLayout layout = ParamLayout::of(s);
  double loss = 0;
  for (int t = 0; t + 1 < int(s.frames.size()); ++t) {
    const QuatRot& ra = ctx.frames[size_t(t)].rot;
    const QuatRot& rb = ctx.frames[size_t(t) + 1].rot;
    const Eigen::Matrix3d rel = ra.r.transpose() * rb.r;
    const Eigen::Matrix3d a = rel - Eigen::Matrix3d::Identity();
    const double na = a.norm();
    loss += na;
    const Eigen::Vector3d dt =
        s.frames[size_t(t) + 1].t - s.frames[size_t(t)].t;
    const Eigen::Vector3d u = ra.r.transpose() * dt;
    const double nu = u.norm();
    loss += nu;
    if (!grad) continue;
    double* gr = grad->data();
    if (na > 1e-15) {
      const Eigen::Matrix3d g = a / na;
      for (int k = 0; k < 4; ++k) {
        gr[layout.frame_q(t) + size_t(k)] +=
            (ra.dr[k].transpose() * rb.r).cwiseProduct(g).sum();
        gr[layout.frame_q(t + 1) + size_t(k)] +=
            (ra.r.transpose() * rb.dr[k]).cwiseProduct(g).sum();
      }
    }
    if (nu > 1e-15) {
      const Eigen::Vector3d gu = u / nu;
      const Eigen::Vector3d gt = ra.r * gu;
      for (int k = 0; k < 3; ++k) {
        gr[layout.frame_t(t + 1) + size_t(k)] += gt[k];
        gr[layout.frame_t(t) + size_t(k)] -= gt[k];
      }
      for (int k = 0; k < 4; ++k)
        gr[layout.frame_q(t) + size_t(k)] += gu.dot(ra.dr[k].transpose() * dt);
    }
  }
  return loss;
}

struct FlowStats {
  double loss = 0;             // sum over masked static pixels of |rx| + |ry|
  long pixel_count = 0;        // contributing pixels
  double mean_residual() const {
    return pixel_count > 0 ? loss / double(pixel_count) : 0.0;
  }
};

// Per masked-static pixel: residual between the camera-induced flow of the
// global variables and the supplied flow, |rx| + |ry|.
inline FlowStats flow_term(const GlobalState& s,
                           const std::map<Edge, FlowField>& flows,
                           const EvalCtx& ctx, std::vector<double>* grad) {
  const ParamLayout layout = ParamLayout::of(s);
  const double cx = s.principal_point.x(), cy = s.principal_point.y();
  const int w = s.size.width, h = s.size.height;
  FlowStats stats;

  for (const auto& [e, ev] : s.edges) {
    const auto it = flows.find(e);
    if (it == flows.end())
      throw std::invalid_argument("loss_flow: missing flow for an edge");
    const FlowField& fest = it->second;
    const StaticMask& mask = s.masks.at(e);
    const int fa = e.first, fb = e.second;
    const FrameCtx& ca = ctx.frames[size_t(fa)];
    const FrameCtx& cb = ctx.frames[size_t(fb)];
    const double inv_f = 1.0 / ca.focal;
    const Eigen::Vector3d ta = s.frames[size_t(fa)].t;
    const Eigen::Vector3d tb = s.frames[size_t(fb)].t;

    for (int v = 0; v < h; ++v) {
      for (int u = 0; u < w; ++u) {
        const int cell = v * w + u;
        if (!mask.is_static.data()[size_t(cell)]) continue;
        if (!fest.valid.data()[size_t(cell)]) continue;
        const double d = ca.depth[size_t(cell)];
        const Eigen::Vector3d v3((u - cx) * d * inv_f, (v - cy) * d * inv_f, d);
        const Eigen::Vector3d world = ca.rot.r.transpose() * (v3 - ta);
        const Eigen::Vector3d y = cb.rot.r * world + tb;
        if (!(y.z() > 1e-12)) continue;
        const double iz = 1.0 / y.z();
        const Eigen::Vector2d proj(cb.focal * y.x() * iz + cx,
                                   cb.focal * y.y() * iz + cy);
        const Eigen::Vector2d r = proj - Eigen::Vector2d(u, v) -
                                  fest.flow.data()[size_t(cell)];
        const double soft_x = std::sqrt(r.x() * r.x() + kKinkEps * kKinkEps);
        const double soft_y = std::sqrt(r.y() * r.y() + kKinkEps * kKinkEps);
        stats.loss += soft_x + soft_y - 2 * kKinkEps;
        ++stats.pixel_count;

        if (!grad) continue;
        const double sx = r.x() / soft_x;
        const double sy = r.y() / soft_y;
        double* gr = grad->data();
        gr[layout.frame_lf(fb)] +=
            sx * cb.focal * y.x() * iz + sy * cb.focal * y.y() * iz;
        const Eigen::Vector3d gy(
            sx * cb.focal * iz, sy * cb.focal * iz,
            -(sx * y.x() + sy * y.y()) * cb.focal * iz * iz);
        for (int k = 0; k < 3; ++k) gr[layout.frame_t(fb) + size_t(k)] += gy[k];
        for (int k = 0; k < 4; ++k)
          gr[layout.frame_q(fb) + size_t(k)] += gy.dot(cb.rot.dr[k] * world);
        const Eigen::Vector3d gw = cb.rot.r.transpose() * gy;
        const Eigen::Vector3d gv = ca.rot.r * gw;
        for (int k = 0; k < 3; ++k) gr[layout.frame_t(fa) + size_t(k)] -= gv[k];
        const Eigen::Vector3d lever = v3 - ta;
        for (int k = 0; k < 4; ++k)
          gr[layout.frame_q(fa) + size_t(k)] += (ca.rot.dr[k] * gw).dot(lever);
        gr[layout.frame_ld(fa, cell)] += gv.dot(v3);
        gr[layout.frame_lf(fa)] -= gv.x() * v3.x() + gv.y() * v3.y();
      }
    }
  }
  return stats;
}

}  // namespace detail

// --- public loss surface ---------------------------------------------------

inline double loss_align(const GlobalState& s,
                         const std::map<Edge, PairEstimate>& pairs) {
  const auto ctx = detail::EvalCtx::of(s);
  return detail::align_term(s, pairs, ctx, nullptr);
}

inline double loss_smooth(const GlobalState& s) {
  const auto ctx = detail::EvalCtx::of(s);
  return detail::smooth_term(s, ctx, nullptr);
}

inline double loss_flow(const GlobalState& s,
                        const std::map<Edge, FlowField>& flows) {
  const auto ctx = detail::EvalCtx::of(s);
  return detail::flow_term(s, flows, ctx, nullptr).loss;
}

// Latching flow gate: the flow term enters the objective at the first
// evaluation whose mean per-pixel flow residual is below the threshold, and
// stays active afterwards.
struct IterationContext {
  bool flow_gate_latched = false;
};

inline double total_objective(const GlobalState& s,
                              const std::map<Edge, PairEstimate>& pairs,
                              const std::map<Edge, FlowField>& flows,
                              const OptimSchedule& schedule,
                              IterationContext* ctx_io = nullptr) {
  const auto ctx = detail::EvalCtx::of(s);
  const double align = detail::align_term(s, pairs, ctx, nullptr);
  const double smooth = detail::smooth_term(s, ctx, nullptr);
  const auto flow = detail::flow_term(s, flows, ctx, nullptr);
  IterationContext local;
  IterationContext* gate = ctx_io ? ctx_io : &local;
  if (!gate->flow_gate_latched &&
      flow.mean_residual() < schedule.flow_enable_threshold)
    gate->flow_gate_latched = true;
  double total = align + schedule.w_smooth * smooth;
  if (gate->flow_gate_latched) total += schedule.w_flow * flow.loss;
  return total;
}

enum class LossTerm { kAlign, kSmooth, kFlow };

// Value and gradient of one loss term with respect to the flat parameter
// vector (see pack_parameters for the layout).
inline double loss_with_gradient(LossTerm term, const GlobalState& s,
                                 const std::map<Edge, PairEstimate>& pairs,
                                 const std::map<Edge, FlowField>& flows,
                                 std::vector<double>* grad) {
  if (grad) grad->assign(parameter_count(s), 0.0);
  const auto ctx = detail::EvalCtx::of(s);
  switch (term) {
    case LossTerm::kAlign:
      return detail::align_term(s, pairs, ctx, grad);
    case LossTerm::kSmooth:
      return detail::smooth_term(s, ctx, grad);
    case LossTerm::kFlow:
      return detail::flow_term(s, flows, ctx, grad).loss;
  }
  throw std::invalid_argument("unknown loss term");
}

// Flips static pixels whose per-pixel flow residual exceeds
// schedule.mask_update_threshold to dynamic. Residuals are evaluated for all
// valid pixels, so already-dynamic pixels simply stay dynamic.
inline GlobalState update_masks(const GlobalState& s,
                                const std::map<Edge, FlowField>& flows,
                                const OptimSchedule& schedule) {
  GlobalState out = s;
  const auto ctx = detail::EvalCtx::of(s);
  const double cx = s.principal_point.x(), cy = s.principal_point.y();
  for (auto& [e, mask] : out.masks) {
    const FlowField& fest = flows.at(e);
    const detail::FrameCtx& ca = ctx.frames[size_t(e.first)];
    const detail::FrameCtx& cb = ctx.frames[size_t(e.second)];
    const double inv_f = 1.0 / ca.focal;
    const Eigen::Vector3d ta = s.frames[size_t(e.first)].t;
    const Eigen::Vector3d tb = s.frames[size_t(e.second)].t;
    for (int v = 0; v < s.size.height; ++v) {
      for (int u = 0; u < s.size.width; ++u) {
        const int cell = v * s.size.width + u;
        if (!fest.valid.data()[size_t(cell)]) continue;
        const double d = ca.depth[size_t(cell)];
        const Eigen::Vector3d v3((u - cx) * d * inv_f, (v - cy) * d * inv_f, d);
        const Eigen::Vector3d y =
            cb.rot.r * (ca.rot.r.transpose() * (v3 - ta)) + tb;
        if (!(y.z() > 1e-12)) continue;
        const Eigen::Vector2d proj(cb.focal * y.x() / y.z() + cx,
                                   cb.focal * y.y() / y.z() + cy);
        const Eigen::Vector2d r = proj - Eigen::Vector2d(u, v) -
                                  fest.flow.data()[size_t(cell)];
        if (std::abs(r.x()) + std::abs(r.y()) > schedule.mask_update_threshold)
          mask.is_static.at(u, v) = 0;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

struct InitReport {
  std::vector<Edge> untrusted_edges;  // identity fallback was used
  std::vector<std::string> warnings;
};

// Builds the starting state: frame poses chained from adjacent relative
// poses, depth from each frame's pointmap in its earliest adjacent edge,
// focals from the pairwise estimates, per-edge alignment poses from a
// weighted closed-form rigid fit on confident static pixels, unit scales,
// and static masks thresholded from the pairwise camera-induced flow.
//
// A failed edge pose is signalled by inlier_count == 0; adjacent failures
// degrade to identity chaining with a warning. A *missing* adjacent edge is
// an InitError that lists the broken frames.
inline GlobalState init_global_state(
    const VideoGraph& graph, const std::map<Edge, PairEstimate>& pairs,
    const std::map<Edge, RelativePoseResult>& poses,
    const std::map<int, double>& focals,
    const std::map<Edge, FlowField>& flows, double alpha,
    InitReport* report = nullptr) {
  if (graph.num_frames < 2)
    throw InitError("init_global_state: need at least 2 frames");
  std::string broken;
  for (int t = 0; t + 1 < graph.num_frames; ++t) {
    const Edge e{t, t + 1};
    if (!graph.has_edge(t, t + 1) || !pairs.count(e) || !poses.count(e))
      broken += (broken.empty() ? "" : ", ") + std::to_string(t);
  }
  if (!broken.empty())
    throw InitError("init_global_state: missing adjacent edge for frames " +
                    broken);
  for (int f = 0; f < graph.num_frames; ++f)
    if (!focals.count(f))
      throw InitError("init_global_state: missing focal for frame " +
                      std::to_string(f));

  const ImageSize size = pairs.begin()->second.size();
  InitReport local_report;
  InitReport& rep = report ? *report : local_report;

  GlobalState s;
  s.graph = graph;
  s.size = size;
  s.principal_point = {0.5 * (size.width - 1), 0.5 * (size.height - 1)};
  s.frames.resize(size_t(graph.num_frames));

  auto trusted = [&](const Edge& e) {
    const auto it = poses.find(e);
    return it != poses.end() && it->second.inlier_count > 0;
  };

  // Poses by chaining adjacent relative motions from the pinned frame 0.
  std::vector<PoseSE3> cam_from_world(size_t(graph.num_frames));
  cam_from_world[0] = PoseSE3::identity();
  for (int t = 0; t + 1 < graph.num_frames; ++t) {
    const Edge e{t, t + 1};
    PoseSE3 rel = poses.at(e).pose;
    if (!trusted(e)) {
      rel = PoseSE3::identity();
      rep.untrusted_edges.push_back(e);
      rep.warnings.push_back("adjacent edge (" + std::to_string(t) + "," +
                             std::to_string(t + 1) +
                             ") pose failed; using identity");
    }
    cam_from_world[size_t(t) + 1] = rel * cam_from_world[size_t(t)];
  }

  for (int f = 0; f < graph.num_frames; ++f) {
    FrameVariables& fv = s.frames[size_t(f)];
    fv.q = detail::quat_from_rotation(cam_from_world[size_t(f)].rotation);
    fv.t = cam_from_world[size_t(f)].translation;
    fv.log_focal = std::log(focals.at(f));
    fv.log_depth = Grid<double>(size, 0.0);
  }

  // Depth from the earliest adjacent edge containing each frame.
  for (int f = 0; f < graph.num_frames; ++f) {
    DepthMap d;
    if (f == 0) {
      d = depth_from_pointmap(pairs.at({0, 1}).pointmap_self,
                              PoseSE3::identity());
    } else {
      const Edge e{f - 1, f};
      const PoseSE3 rel =
          trusted(e) ? poses.at(e).pose : PoseSE3::identity();
      d = depth_from_pointmap(pairs.at(e).pointmap_other, rel);
    }
    std::vector<double> valid_depths;
    for (size_t i = 0; i < d.depth.data().size(); ++i)
      if (d.valid.data()[i]) valid_depths.push_back(d.depth.data()[i]);
    if (valid_depths.empty())
      throw InitError("init_global_state: no valid depth for frame " +
                      std::to_string(f));
    std::nth_element(valid_depths.begin(),
                     valid_depths.begin() + valid_depths.size() / 2,
                     valid_depths.end());
    const double fill = valid_depths[valid_depths.size() / 2];
    for (size_t i = 0; i < d.depth.data().size(); ++i)
      s.frames[size_t(f)].log_depth.data()[i] =
          std::log(d.valid.data()[i] ? d.depth.data()[i] : fill);
  }

  // Static masks from the pairwise relative poses (camera-induced flow vs the
  // supplied flow).
  for (const Edge& e : graph.edges) {
    const auto pit = pairs.find(e);
    const auto fit = flows.find(e);
    if (pit == pairs.end() || fit == flows.end())
      throw InitError("init_global_state: missing pair or flow for edge (" +
                      std::to_string(e.first) + "," +
                      std::to_string(e.second) + ")");
    const Intrinsics ka{focals.at(e.first), s.principal_point, size};
    const Intrinsics kb{focals.at(e.second), s.principal_point, size};
    if (trusted(e)) {
      const DepthMap d =
          depth_from_pointmap(pit->second.pointmap_self, PoseSE3::identity());
      const FlowField f_cam = induced_flow(d, ka, kb, poses.at(e).pose);
      s.masks.emplace(e, static_mask(f_cam, fit->second, alpha));
    } else {
      if (std::find(rep.untrusted_edges.begin(), rep.untrusted_edges.end(),
                    e) == rep.untrusted_edges.end())
        rep.untrusted_edges.push_back(e);
      s.masks.emplace(e, StaticMask(size, 0));  // exclude from the flow loss
    }
  }

  // Edge alignment poses: weighted rigid fit of the pairwise points onto the
  // initialized global pointmaps. Self-side pixels are weighted by
  // confidence * static mask, other-side pixels by confidence * PnP inliers.
  for (const Edge& e : graph.edges) {
    const PairEstimate& pair = pairs.at(e);
    EdgeVariables ev;
    std::vector<Eigen::Vector3d> src, dst;
    std::vector<double> weight;
    const StaticMask& mask = s.masks.at(e);
    const Grid<std::uint8_t>* inliers =
        trusted(e) ? &poses.at(e).inlier_mask : nullptr;
    for (int side = 0; side < 2; ++side) {
      const int f = side == 0 ? e.first : e.second;
      const Pointmap& pm = side == 0 ? pair.pointmap_self : pair.pointmap_other;
      const ConfidenceMap& cm = side == 0 ? pair.conf_self : pair.conf_other;
      const PoseSE3 world_from_cam = cam_from_world[size_t(f)].inverse();
      const Intrinsics k{focals.at(f), s.principal_point, size};
      for (int v = 0; v < size.height; ++v) {
        for (int u = 0; u < size.width; ++u) {
          if (!pm.valid.at(u, v)) continue;
          const double gate = side == 0
                                  ? double(mask.is_static.at(u, v))
                                  : (inliers ? double(inliers->at(u, v)) : 0.0);
          const double wgt = gate * cm.values.at(u, v);
          if (!(wgt > 0)) continue;
          const double d =
              std::exp(s.frames[size_t(f)].log_depth.at(u, v));
          src.push_back(pm.points.at(u, v));
          dst.push_back(world_from_cam.apply(
              backproject({double(u), double(v)}, d, k)));
          weight.push_back(wgt);
        }
      }
    }
    if (src.size() >= 3) {
      const PoseSE3 fit = detail::rigid_fit(src, dst, &weight);
      ev.q = detail::quat_from_rotation(fit.rotation);
      ev.t = fit.translation;
    } else {
      // no usable support; start from the chained pose of the anchor frame
      const PoseSE3 guess = cam_from_world[size_t(e.first)].inverse();
      ev.q = detail::quat_from_rotation(guess.rotation);
      ev.t = guess.translation;
      rep.warnings.push_back("edge (" + std::to_string(e.first) + "," +
                             std::to_string(e.second) +
                             ") align pose fell back to the chained pose");
    }
    s.edges.emplace(e, ev);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Pairwise stage aggregation (focals and relative poses for a whole graph)
// ---------------------------------------------------------------------------

struct PairwiseStage {
  std::map<Edge, RelativePoseResult> poses;  // inlier_count == 0: failed edge
  std::map<int, double> focals;
  std::vector<Edge> failed_edges;
};

// Per-frame focal estimates (median over the edges anchored at each frame;
// frames that anchor no edge inherit the median of the others) followed by
// RANSAC PnP per edge. Failed edges degrade to a flagged identity.
inline PairwiseStage run_pairwise_stage(
    const VideoGraph& graph, const std::map<Edge, PairEstimate>& pairs,
    const RansacParams& ransac, bool shared_focal = false) {
  PairwiseStage out;
  std::map<int, std::vector<double>> samples;
  for (const auto& [e, pair] : pairs) {
    try {
      samples[e.first].push_back(estimate_focal(pair.pointmap_self));
    } catch (const EstimationError&) {
      // a frame may still get its focal from another anchored edge
    }
  }
  auto median = [](std::vector<double> x) {
    std::nth_element(x.begin(), x.begin() + x.size() / 2, x.end());
    return x[x.size() / 2];
  };
  std::vector<double> all;
  for (auto& [f, v] : samples) all.insert(all.end(), v.begin(), v.end());
  if (all.empty())
    throw EstimationError("run_pairwise_stage: no focal could be estimated");
  const double global = median(all);
  for (int f = 0; f < graph.num_frames; ++f) {
    const auto it = samples.find(f);
    out.focals[f] = (shared_focal || it == samples.end()) ? global
                                                          : median(it->second);
  }

  const ImageSize size = pairs.begin()->second.size();
  for (const auto& [e, pair] : pairs) {
    RansacParams params = ransac;
    params.seed = detail::splitmix64(
        ransac.seed ^ (std::uint64_t(std::uint32_t(e.first)) << 32) ^
        std::uint64_t(std::uint32_t(e.second)));
    const Intrinsics k_other{out.focals[e.second],
                             {0.5 * (size.width - 1), 0.5 * (size.height - 1)},
                             size};
    std::optional<RelativePoseResult> result;
    try {
      result = estimate_relative_pose(pair, k_other, params);
    } catch (const std::invalid_argument&) {
      result = std::nullopt;
    }
    if (result) {
      out.poses.emplace(e, std::move(*result));
    } else {
      RelativePoseResult failed;
      failed.pose = PoseSE3::identity();
      failed.inlier_mask = Grid<std::uint8_t>(size, 0);
      failed.inlier_count = 0;
      out.poses.emplace(e, std::move(failed));
      out.failed_edges.push_back(e);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimization loop
// ---------------------------------------------------------------------------

struct LossTraceEntry {
  int iteration = 0;
  double total = 0;
  double align = 0;
  double smooth = 0;
  double flow = 0;                // unweighted flow loss
  double mean_flow_residual = 0;  // gating statistic
  double lr = 0;
  bool flow_gate_active = false;
};

struct GlobalResult {
  std::vector<PoseSE3> cam_from_world;
  std::vector<DepthMap> depth;          // the video depth
  std::vector<Intrinsics> intrinsics;
  std::map<Edge, StaticMask> masks;
  std::vector<LossTraceEntry> trace;
  GlobalState state;
  InitReport init_report;
  std::vector<Edge> failed_edges;
};

struct RunOptions {
  OptimSchedule schedule;
  RansacParams ransac;
  double alpha = -1;  // < 0: default_static_mask_alpha(image size)
  bool shared_focal = false;
};

namespace detail {

inline double cosine_lr(const OptimSchedule& s, int iter) {
  if (s.iterations <= 1) return s.learning_rate;
  const double t = double(iter) / double(s.iterations - 1);
  const double c = 0.5 * (1.0 + std::cos(M_PI * t));
  // squared cosine: a longer small-step tail lets the L1 objective settle
  const double lr = s.lr_end + (s.learning_rate - s.lr_end) * c * c;
  // short warmup so a warm start is not blasted away by full-size first steps
  const int warmup = std::min(10, s.iterations / 4);
  if (iter < warmup) return lr * double(iter + 1) / double(warmup);
  return lr;
}

inline void check_finite(double value, int iteration, const char* term) {
  if (!std::isfinite(value))
    throw OptimError("iteration " + std::to_string(iteration) + ": " + term +
                     " loss is non-finite");
}

inline void check_grad_finite(const GlobalState& s,
                              const std::vector<double>& grad, int iteration,
                              const char* term) {
  for (size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      throw OptimError("iteration " + std::to_string(iteration) + ": " + term +
                       " gradient is non-finite at " + describe_param(s, i));
}

}  // namespace detail

inline void validate(const OptimSchedule& s) {
  if (s.iterations < 0 || !(s.learning_rate > 0) || s.lr_end < 0 ||
      s.w_smooth < 0 || s.w_flow < 0 || !(s.flow_enable_threshold > 0) ||
      !(s.mask_update_threshold > 0) || s.mask_update_interval < 1 ||
      !(s.adam_beta1 > 0 && s.adam_beta1 < 1) ||
      !(s.adam_beta2 > 0 && s.adam_beta2 < 1) || !(s.adam_eps > 0))
    throw std::invalid_argument("OptimSchedule: parameters must be positive");
}

inline GlobalResult run_global_optimization(
    const VideoGraph& graph, const std::map<Edge, PairEstimate>& pairs,
    const std::map<Edge, FlowField>& flows, const RunOptions& options,
    std::uint64_t seed = 0) {
  validate(options.schedule);
  if (pairs.empty())
    throw std::invalid_argument("run_global_optimization: no pairs");
  RansacParams ransac = options.ransac;
  ransac.seed ^= seed;
  const PairwiseStage stage =
      run_pairwise_stage(graph, pairs, ransac, options.shared_focal);

  const ImageSize size = pairs.begin()->second.size();
  const double alpha = options.alpha > 0 ? options.alpha
                                         : default_static_mask_alpha(size);
  GlobalResult result;
  result.failed_edges = stage.failed_edges;
  GlobalState state = init_global_state(graph, pairs, stage.poses,
                                        stage.focals, flows, alpha,
                                        &result.init_report);

  const OptimSchedule& sched = options.schedule;
  const detail::ParamLayout layout = detail::ParamLayout::of(state);
  std::vector<double> params = pack_parameters(state);
  std::vector<double> grad(params.size());
  std::vector<double> flow_grad;
  std::vector<double> adam_m(params.size(), 0.0);
  std::vector<double> adam_v(params.size(), 0.0);
  bool gate = false;

  auto run_iteration = [&](int iteration, bool with_grad) -> LossTraceEntry {
    const auto ctx = detail::EvalCtx::of(state);
    LossTraceEntry entry;
    entry.iteration = iteration;

    if (with_grad) std::fill(grad.begin(), grad.end(), 0.0);
    entry.align =
        detail::align_term(state, pairs, ctx, with_grad ? &grad : nullptr);
    detail::check_finite(entry.align, iteration, "align");

    std::vector<double> smooth_grad;
    if (with_grad) smooth_grad.assign(params.size(), 0.0);
    entry.smooth = detail::smooth_term(state, ctx,
                                       with_grad ? &smooth_grad : nullptr);
    detail::check_finite(entry.smooth, iteration, "smooth");

    if (with_grad) flow_grad.assign(params.size(), 0.0);
    const auto flow_stats = detail::flow_term(
        state, flows, ctx, with_grad && gate ? &flow_grad : nullptr);
    detail::check_finite(flow_stats.loss, iteration, "flow");
    entry.flow = flow_stats.loss;
    entry.mean_flow_residual = flow_stats.mean_residual();

    bool flow_grad_ready = gate;
    if (!gate && entry.mean_flow_residual < sched.flow_enable_threshold)
      gate = true;
    if (with_grad && gate && !flow_grad_ready) {
      flow_grad.assign(params.size(), 0.0);
      detail::flow_term(state, flows, ctx, &flow_grad);
    }

    entry.flow_gate_active = gate;
    entry.total = entry.align + sched.w_smooth * entry.smooth +
                  (gate ? sched.w_flow * entry.flow : 0.0);
    detail::check_finite(entry.total, iteration, "total");

    if (with_grad) {
      for (size_t i = 0; i < grad.size(); ++i) {
        grad[i] += sched.w_smooth * smooth_grad[i];
        if (gate) grad[i] += sched.w_flow * flow_grad[i];
      }
      detail::check_grad_finite(state, grad, iteration, "total");
    }
    return entry;
  };

  if (sched.iterations == 0) {
    LossTraceEntry entry = run_iteration(0, false);
    entry.lr = 0;
    result.trace.push_back(entry);
  }

  for (int iter = 0; iter < sched.iterations; ++iter) {
    LossTraceEntry entry = run_iteration(iter, true);
    entry.lr = detail::cosine_lr(sched, iter);
    result.trace.push_back(entry);

    // Adam step; the frame-0 pose block [0, 7) is pinned.
    const double b1 = sched.adam_beta1, b2 = sched.adam_beta2;
    const double bc1 = 1.0 - std::pow(b1, iter + 1);
    const double bc2 = 1.0 - std::pow(b2, iter + 1);
    for (size_t i = 7; i < params.size(); ++i) {
      adam_m[i] = b1 * adam_m[i] + (1 - b1) * grad[i];
      adam_v[i] = b2 * adam_v[i] + (1 - b2) * grad[i] * grad[i];
      const double mhat = adam_m[i] / bc1;
      const double vhat = adam_v[i] / bc2;
      params[i] -= entry.lr * mhat / (std::sqrt(vhat) + sched.adam_eps);
    }

    // Gauge projection: mean edge log-scale back to zero.
    if (layout.num_edges > 0) {
      double mean_ls = 0;
      for (int ei = 0; ei < layout.num_edges; ++ei)
        mean_ls += params[layout.edge_ls(ei)];
      mean_ls /= layout.num_edges;
      for (int ei = 0; ei < layout.num_edges; ++ei)
        params[layout.edge_ls(ei)] -= mean_ls;
    }

    // Renormalize quaternions (the rotation formula is scale invariant, so
    // this does not change the objective).
    auto renorm = [&](size_t base) {
      double n = 0;
      for (int k = 0; k < 4; ++k) n += params[base + size_t(k)] * params[base + size_t(k)];
      n = std::sqrt(n);
      if (n > 0)
        for (int k = 0; k < 4; ++k) params[base + size_t(k)] /= n;
    };
    for (int f = 1; f < layout.num_frames; ++f) renorm(layout.frame_q(f));
    for (int ei = 0; ei < layout.num_edges; ++ei) renorm(layout.edge_q(ei));

    // Shared-focal option: keep all log-focals identical by averaging.
    if (options.shared_focal && layout.num_frames > 0) {
      double mean_lf = 0;
      for (int f = 0; f < layout.num_frames; ++f)
        mean_lf += params[layout.frame_lf(f)];
      mean_lf /= layout.num_frames;
      for (int f = 0; f < layout.num_frames; ++f)
        params[layout.frame_lf(f)] = mean_lf;
    }

    apply_parameters(state, params);

    if (gate && sched.mask_update_interval > 0 &&
        (iter + 1) % sched.mask_update_interval == 0)
      state = update_masks(state, flows, sched);
  }

  result.state = state;
  result.masks = state.masks;
  for (int f = 0; f < graph.num_frames; ++f) {
    result.cam_from_world.push_back(state.frame_pose(f));
    result.intrinsics.push_back(state.frame_intrinsics(f));
    DepthMap d(state.size);
    for (size_t i = 0; i < d.depth.data().size(); ++i)
      d.depth.data()[i] = std::exp(state.frames[size_t(f)].log_depth.data()[i]);
    result.depth.push_back(std::move(d));
  }
  return result;
}

// Convenience overload matching the schedule-only call shape.
inline GlobalResult run_global_optimization(
    const VideoGraph& graph, const std::map<Edge, PairEstimate>& pairs,
    const std::map<Edge, FlowField>& flows, const OptimSchedule& schedule,
    std::uint64_t seed = 0) {
  RunOptions options;
  options.schedule = schedule;
  return run_global_optimization(graph, pairs, flows, options, seed);
}

}  // namespace dynrec
