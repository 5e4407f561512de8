// Procedural synthetic dynamic scenes with exact analytic ground truth.
//
// Scenes are built from ray-castable primitives (planes and spheres, some of
// them rigidly moving) seen by a camera on a parametric trajectory. The
// products a pairwise pointmap network would emit (per-edge pointmaps,
// confidence, optical flow, relative poses) are all derived in closed form,
// so downstream stages can be verified without any learned component.
//
// Pairwise semantics for an edge (t, t'): both pointmaps live in the frame-t
// camera; the first covers frame-t content at time t, the second frame-t'
// content at time t', mapped by the ground-truth relative camera pose.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include "dynrec/geom.hpp"
#include "dynrec/graph.hpp"
#include "dynrec/pairwise.hpp"

namespace dynrec {

struct SceneError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Infinite plane n . x = offset.
struct PlaneSurface {
  Eigen::Vector3d normal{0, 1, 0};
  double offset = 0;
};

struct SphereSurface {
  Eigen::Vector3d center{0, 0, 0};
  double radius = 1;
};

// A rigidly moving sphere. Linear movers translate by `velocity` per frame;
// circular movers rotate about (orbit_center, orbit_axis) by orbit_step_deg
// per frame.
struct DynamicSphere {
  SphereSurface sphere;  // position at frame 0
  enum class Motion { kLinear, kCircular } motion = Motion::kLinear;
  Eigen::Vector3d velocity{0, 0, 0};
  Eigen::Vector3d orbit_center{0, 0, 0};
  Eigen::Vector3d orbit_axis{0, 1, 0};
  double orbit_step_deg = 0;

  // Rigid world motion of the object from frame `from` to frame `to`.
  PoseSE3 motion_between(int from, int to) const {
    if (motion == Motion::kLinear) {
      PoseSE3 m;
      m.translation = velocity * double(to - from);
      return m;
    }
    const double angle = orbit_step_deg * M_PI / 180.0 * double(to - from);
    const Eigen::Matrix3d r =
        Eigen::AngleAxisd(angle, orbit_axis.normalized()).toRotationMatrix();
    PoseSE3 m;
    m.rotation = r;
    m.translation = orbit_center - r * orbit_center;
    return m;
  }

  Eigen::Vector3d center_at(int frame) const {
    return motion_between(0, frame).apply(sphere.center);
  }
};

// Camera paths. All presets keep the scene in front of the camera; world
// coordinates follow the camera convention (y down, z forward).
struct CameraPath {
  enum class Kind { kStatic, kDolly, kOrbit, kDollyOrbit, kKeyframes };
  Kind kind = Kind::kStatic;

  // dolly: translate along `dolly_dir` by dolly_step per frame.
  Eigen::Vector3d start{0, 0, 0};
  Eigen::Vector3d dolly_dir{0, 0, 1};
  double dolly_step = 0;

  // orbit / dolly-orbit: look at `target` from a circle of given radius;
  // radius shrinks by radius_step per frame for the dolly-orbit preset.
  Eigen::Vector3d target{0, 0, 4};
  double radius = 3;
  double height = -0.5;
  double angle_start_deg = 0;
  double angle_step_deg = 2;
  double radius_step = 0;

  std::vector<PoseSE3> keyframes;  // world_from_cam, used by kKeyframes

  static CameraPath statics() { return CameraPath{}; }

  static CameraPath dolly(Eigen::Vector3d dir, double step) {
    CameraPath p;
    p.kind = Kind::kDolly;
    p.dolly_dir = dir;
    p.dolly_step = step;
    return p;
  }

  static CameraPath orbit(Eigen::Vector3d target, double radius, double height,
                          double angle_step_deg) {
    CameraPath p;
    p.kind = Kind::kOrbit;
    p.target = target;
    p.radius = radius;
    p.height = height;
    p.angle_step_deg = angle_step_deg;
    return p;
  }

  static CameraPath dolly_orbit(Eigen::Vector3d target, double radius,
                                double height, double angle_step_deg,
                                double radius_step) {
    CameraPath p = orbit(target, radius, height, angle_step_deg);
    p.kind = Kind::kDollyOrbit;
    p.radius_step = radius_step;
    return p;
  }

  // cam_from_world extrinsics for the given frame.
  PoseSE3 pose_at(int frame) const;
};

namespace detail {

// Camera orientation looking from `eye` toward `target`, x right, y down,
// z forward, in a y-down world.
inline Eigen::Matrix3d look_at_rotation(const Eigen::Vector3d& eye,
                                        const Eigen::Vector3d& target) {
  const Eigen::Vector3d z = (target - eye).normalized();
  Eigen::Vector3d y_hint(0, 1, 0);
  if (std::abs(z.dot(y_hint)) > 0.999) y_hint = Eigen::Vector3d(0, 0, 1);
  const Eigen::Vector3d x = y_hint.cross(z).normalized();
  const Eigen::Vector3d y = z.cross(x);
  Eigen::Matrix3d r_world_from_cam;
  r_world_from_cam.col(0) = x;
  r_world_from_cam.col(1) = y;
  r_world_from_cam.col(2) = z;
  return r_world_from_cam;
}

inline PoseSE3 cam_from_world_at(const Eigen::Vector3d& eye,
                                 const Eigen::Matrix3d& r_world_from_cam) {
  PoseSE3 world_from_cam;
  world_from_cam.rotation = r_world_from_cam;
  world_from_cam.translation = eye;
  return world_from_cam.inverse();
}

}  // namespace detail

inline PoseSE3 CameraPath::pose_at(int frame) const {
  switch (kind) {
    case Kind::kStatic:
      return detail::cam_from_world_at(start, Eigen::Matrix3d::Identity());
    case Kind::kDolly: {
      const Eigen::Vector3d eye = start + dolly_dir * (dolly_step * frame);
      return detail::cam_from_world_at(eye, Eigen::Matrix3d::Identity());
    }
    case Kind::kOrbit:
    case Kind::kDollyOrbit: {
      const double r = radius + radius_step * frame;
      const double a = (angle_start_deg + angle_step_deg * frame) * M_PI / 180.0;
      const Eigen::Vector3d eye =
          target + Eigen::Vector3d(r * std::sin(a), height, -r * std::cos(a));
      return detail::cam_from_world_at(eye,
                                       detail::look_at_rotation(eye, target));
    }
    case Kind::kKeyframes: {
      if (frame < 0 || frame >= int(keyframes.size()))
        throw SceneError("camera keyframe index out of range");
      return keyframes[size_t(frame)].inverse();
    }
  }
  throw SceneError("unknown camera path kind");
}

struct NoiseSpec {
  double depth_sigma = 0;        // relative, per pixel
  double confidence_floor = 0.1;
};

struct SceneSpec {
  std::vector<PlaneSurface> planes;
  std::vector<SphereSurface> spheres;
  std::vector<DynamicSphere> movers;
  CameraPath camera;
  Intrinsics intrinsics;
  int num_frames = 2;
  NoiseSpec noise;
  std::uint64_t seed = 0;
  // Default (false): other-view pointmaps are per-timestep, i.e. moving
  // objects appear where they are at their own frame's time, mapped by the
  // true camera motion, so every pixel is a perfect 2D-3D correspondence.
  // When true, moving-object points in the other view are placed at their
  // anchor-frame (time t) positions instead, emulating a predictor with a
  // static-scene prior; those pixels become genuine PnP outliers.
  bool anchor_dynamic_content = false;
};

struct OracleFrame {
  DepthMap depth;                 // clean ground truth
  PoseSE3 cam_from_world;
  Intrinsics intrinsics;
  Grid<std::uint8_t> dynamic_mask;
  Grid<int> mover_id;             // index into SceneSpec::movers, -1 = static
};

struct OracleEdge {
  PairEstimate pair;       // possibly noisy, per SceneSpec.noise
  FlowField flow;          // exact flow t -> t', occlusions marked invalid
  PoseSE3 rel_pose;        // frame-t coords -> frame-t' coords
};

struct OracleSequence {
  SceneSpec spec;
  std::vector<OracleFrame> frames;
  std::map<Edge, OracleEdge> edges;

  double camera_path_length() const {
    double len = 0;
    for (size_t i = 1; i < frames.size(); ++i) {
      const Eigen::Vector3d a =
          frames[i - 1].cam_from_world.inverse().translation;
      const Eigen::Vector3d b = frames[i].cam_from_world.inverse().translation;
      len += (b - a).norm();
    }
    return len;
  }
};

namespace detail {

struct RayHit {
  double depth = 0;               // camera-frame z of the hit
  Eigen::Vector3d world_point{0, 0, 0};
  int mover_id = -1;              // >= 0 when the hit surface is dynamic
};

// Nearest hit along origin + s * dir, s > eps. dir has unit camera-frame z,
// so the ray parameter equals the camera-frame depth.
inline std::optional<RayHit> cast_ray(const SceneSpec& spec, int frame,
                                      const Eigen::Vector3d& origin,
                                      const Eigen::Vector3d& dir,
                                      double eps = 1e-9) {
  std::optional<RayHit> best;
  auto consider = [&](double s, int mover_id) {
    if (s <= eps) return;
    if (!best || s < best->depth) {
      best = RayHit{s, origin + s * dir, mover_id};
    }
  };
  for (const auto& plane : spec.planes) {
    const double denom = plane.normal.dot(dir);
    if (std::abs(denom) < 1e-14) continue;
    consider((plane.offset - plane.normal.dot(origin)) / denom, -1);
  }
  auto sphere_hit = [&](const Eigen::Vector3d& c, double r, int mover_id) {
    const Eigen::Vector3d oc = origin - c;
    const double a = dir.squaredNorm();
    const double b = 2.0 * oc.dot(dir);
    const double cc = oc.squaredNorm() - r * r;
    const double disc = b * b - 4 * a * cc;
    if (disc < 0) return;
    const double sq = std::sqrt(disc);
    const double s0 = (-b - sq) / (2 * a);
    const double s1 = (-b + sq) / (2 * a);
    if (s0 > eps)
      consider(s0, mover_id);
    else if (s1 > eps)
      consider(s1, mover_id);
  };
  for (const auto& sp : spec.spheres) sphere_hit(sp.center, sp.radius, -1);
  for (size_t i = 0; i < spec.movers.size(); ++i)
    sphere_hit(spec.movers[i].center_at(frame), spec.movers[i].sphere.radius,
               int(i));
  return best;
}

inline std::uint64_t edge_noise_seed(std::uint64_t master, int t, int t2,
                                     int view) {
  std::uint64_t h = splitmix64(master ^ 0x7dc1f2a35ULL);
  h = splitmix64(h ^ (std::uint64_t(std::uint32_t(t)) << 1));
  h = splitmix64(h ^ (std::uint64_t(std::uint32_t(t2)) << 33));
  return splitmix64(h ^ std::uint64_t(view));
}

// Maps an other-view pointmap (camera-t' coordinates) into the anchor frame.
// Per-timestep semantics use the camera motion for every pixel; the anchored
// variant sends moving-object points back to their time-t world positions.
inline void map_other_view_into_anchor(const SceneSpec& spec,
                                       const OracleFrame& frame_a,
                                       const OracleFrame& frame_b, int t,
                                       int t2, Pointmap* other_cam2) {
  const PoseSE3 rel = frame_b.cam_from_world * frame_a.cam_from_world.inverse();
  const PoseSE3 t_from_t2 = rel.inverse();
  if (!spec.anchor_dynamic_content || spec.movers.empty()) {
    for (auto& p : other_cam2->points.data()) p = t_from_t2.apply(p);
    return;
  }
  const PoseSE3 world_from_cam2 = frame_b.cam_from_world.inverse();
  const ImageSize size = other_cam2->size();
  for (int v = 0; v < size.height; ++v) {
    for (int u = 0; u < size.width; ++u) {
      Eigen::Vector3d& p = other_cam2->points.at(u, v);
      const int mover = frame_b.mover_id.at(u, v);
      if (mover < 0) {
        p = t_from_t2.apply(p);
      } else {
        const Eigen::Vector3d world_t = spec.movers[size_t(mover)]
                                            .motion_between(t2, t)
                                            .apply(world_from_cam2.apply(p));
        p = frame_a.cam_from_world.apply(world_t);
      }
    }
  }
}

// Backprojects a clean depth map, optionally injecting per-pixel Gaussian
// depth noise, and reports the matching confidence map.
inline void noisy_view(const DepthMap& clean, const Intrinsics& k,
                       const NoiseSpec& noise, std::uint64_t seed,
                       Pointmap* points_cam, ConfidenceMap* conf) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  *points_cam = Pointmap(clean.size());
  *conf = ConfidenceMap(clean.size());
  for (int v = 0; v < clean.size().height; ++v) {
    for (int u = 0; u < clean.size().width; ++u) {
      if (!clean.valid.at(u, v)) {
        points_cam->valid.at(u, v) = 0;
        conf->values.at(u, v) = 0;
        continue;
      }
      const double d = clean.depth.at(u, v);
      double injected = 0;
      if (noise.depth_sigma > 0) {
        injected = gauss(rng) * noise.depth_sigma * d;
        // keep the view geometrically meaningful
        if (d + injected < 1e-3 * d) injected = 1e-3 * d - d;
      }
      points_cam->points.at(u, v) =
          backproject({double(u), double(v)}, d + injected, k);
      conf->values.at(u, v) = std::max(
          noise.confidence_floor, 1.0 / (1.0 + std::abs(injected) / d));
    }
  }
}

}  // namespace detail

// Renders ground truth for all frames and for every canonical edge of the
// graph. Throws SceneError if any pixel ray escapes the scene.
inline OracleSequence render_sequence(const SceneSpec& spec,
                                      const VideoGraph& graph) {
  if (graph.num_frames != spec.num_frames)
    throw std::invalid_argument("render_sequence: frame count mismatch");
  const Intrinsics& k = spec.intrinsics;
  require_valid(k.size);

  OracleSequence seq;
  seq.spec = spec;
  seq.frames.resize(size_t(spec.num_frames));

  // Per-frame depth, camera, dynamic mask, plus hit bookkeeping for flow.
  std::vector<Grid<Eigen::Vector3d>> hit_points;
  hit_points.reserve(size_t(spec.num_frames));
  for (int t = 0; t < spec.num_frames; ++t) {
    OracleFrame& fr = seq.frames[size_t(t)];
    fr.cam_from_world = spec.camera.pose_at(t);
    fr.intrinsics = k;
    fr.depth = DepthMap(k.size);
    fr.dynamic_mask = Grid<std::uint8_t>(k.size, 0);
    fr.mover_id = Grid<int>(k.size, -1);
    hit_points.emplace_back(k.size, Eigen::Vector3d::Zero());

    const PoseSE3 world_from_cam = fr.cam_from_world.inverse();
    const Eigen::Vector3d origin = world_from_cam.translation;
    for (int v = 0; v < k.size.height; ++v) {
      for (int u = 0; u < k.size.width; ++u) {
        const Eigen::Vector3d dir_cam = backproject({double(u), double(v)}, 1.0, k);
        const Eigen::Vector3d dir = world_from_cam.rotation * dir_cam;
        const auto hit = detail::cast_ray(spec, t, origin, dir);
        if (!hit)
          throw SceneError(
              "render_sequence: a pixel ray hits no surface; add a background "
              "surface to the scene");
        fr.depth.depth.at(u, v) = hit->depth;
        fr.dynamic_mask.at(u, v) = hit->mover_id >= 0 ? 1 : 0;
        fr.mover_id.at(u, v) = hit->mover_id;
        hit_points[size_t(t)].at(u, v) = hit->world_point;
      }
    }
  }

  for (const Edge& e : graph.edges) {
    const int t = e.first, t2 = e.second;
    const OracleFrame& fa = seq.frames[size_t(t)];
    const OracleFrame& fb = seq.frames[size_t(t2)];
    OracleEdge oe;
    oe.rel_pose = fb.cam_from_world * fa.cam_from_world.inverse();

    // Pointmaps in frame-t coordinates, with per-view noise.
    Pointmap self_cam, other_cam;
    ConfidenceMap conf_self, conf_other;
    detail::noisy_view(fa.depth, k, spec.noise,
                       detail::edge_noise_seed(spec.seed, t, t2, 0), &self_cam,
                       &conf_self);
    detail::noisy_view(fb.depth, k, spec.noise,
                       detail::edge_noise_seed(spec.seed, t, t2, 1), &other_cam,
                       &conf_other);
    detail::map_other_view_into_anchor(spec, fa, fb, t, t2, &other_cam);

    oe.pair.pointmap_self = std::move(self_cam);
    oe.pair.pointmap_other = std::move(other_cam);
    oe.pair.conf_self = std::move(conf_self);
    oe.pair.conf_other = std::move(conf_other);
    oe.pair.frame_self = t;
    oe.pair.frame_other = t2;

    // Exact flow t -> t' with occlusion-aware validity.
    oe.flow = FlowField(k.size);
    const PoseSE3 world_from_cam2 = fb.cam_from_world.inverse();
    for (int v = 0; v < k.size.height; ++v) {
      for (int u = 0; u < k.size.width; ++u) {
        Eigen::Vector3d target = hit_points[size_t(t)].at(u, v);
        const int mover = fa.mover_id.at(u, v);
        if (mover >= 0)
          target = spec.movers[size_t(mover)].motion_between(t, t2).apply(target);
        const Eigen::Vector3d in_cam2 = fb.cam_from_world.apply(target);
        if (!(in_cam2.z() > 0)) {
          oe.flow.valid.at(u, v) = 0;
          continue;
        }
        const Eigen::Vector2d px2 = project(in_cam2, k);
        // Occlusion check: cast the frame-t' ray toward the target.
        const Eigen::Vector3d dir =
            world_from_cam2.rotation * backproject(px2, 1.0, k);
        const auto hit = detail::cast_ray(spec, t2, world_from_cam2.translation, dir);
        if (!hit || hit->depth < in_cam2.z() * (1.0 - 1e-9) - 1e-9) {
          oe.flow.valid.at(u, v) = 0;
          continue;
        }
        oe.flow.flow.at(u, v) = px2 - Eigen::Vector2d(double(u), double(v));
      }
    }
    seq.edges.emplace(e, std::move(oe));
  }
  return seq;
}

// Re-applies noise to the clean per-frame ground truth of `seq`,
// deterministically under `seed`. Clean fields are untouched.
inline OracleSequence perturb(const OracleSequence& seq, const NoiseSpec& noise,
                              std::uint64_t seed) {
  OracleSequence out = seq;
  out.spec.noise = noise;
  out.spec.seed = seed;
  const Intrinsics& k = seq.spec.intrinsics;
  for (auto& [e, oe] : out.edges) {
    Pointmap self_cam, other_cam;
    ConfidenceMap conf_self, conf_other;
    detail::noisy_view(seq.frames[size_t(e.first)].depth, k, noise,
                       detail::edge_noise_seed(seed, e.first, e.second, 0),
                       &self_cam, &conf_self);
    detail::noisy_view(seq.frames[size_t(e.second)].depth, k, noise,
                       detail::edge_noise_seed(seed, e.first, e.second, 1),
                       &other_cam, &conf_other);
    detail::map_other_view_into_anchor(out.spec, seq.frames[size_t(e.first)],
                                       seq.frames[size_t(e.second)], e.first,
                                       e.second, &other_cam);
    oe.pair.pointmap_self = std::move(self_cam);
    oe.pair.pointmap_other = std::move(other_cam);
    oe.pair.conf_self = std::move(conf_self);
    oe.pair.conf_other = std::move(conf_other);
  }
  return out;
}

}  // namespace dynrec
