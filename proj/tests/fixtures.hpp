// Shared synthetic scenes for the test suites.
#pragma once

#include <map>

#include "dynrec/evalkit.hpp"
#include "dynrec/optim.hpp"
#include "dynrec/oracle.hpp"

namespace fixtures {

using namespace dynrec;

// Static camera over a plane plus two spheres; nothing moves.
inline SceneSpec static_scene(int num_frames = 2, int width = 32,
                              int height = 24) {
  SceneSpec spec;
  spec.planes.push_back({{0, 1, 0}, 1.5});   // ground, y down
  spec.planes.push_back({{0, 0, 1}, 30.0});  // far background
  spec.spheres.push_back({{-0.6, 0.4, 3.5}, 0.9});
  spec.spheres.push_back({{1.0, 0.7, 5.0}, 1.2});
  spec.camera = CameraPath::statics();
  spec.intrinsics = Intrinsics::centered(30.0, {height, width});
  spec.num_frames = num_frames;
  return spec;
}

// Forward dolly over the ground plane.
inline SceneSpec dolly_scene(int num_frames = 8, int width = 32,
                             int height = 24) {
  SceneSpec spec = static_scene(num_frames, width, height);
  spec.camera = CameraPath::dolly({0, 0, 1}, 0.04);
  return spec;
}

// Orbit with a slow dolly-in; the camera both rotates and translates every
// frame. Path length is close to (but not exactly) `angle * radius * frames`.
inline SceneSpec dolly_orbit_scene(int num_frames = 30, int width = 64,
                                   int height = 48) {
  SceneSpec spec;
  spec.planes.push_back({{0, 1, 0}, 1.5});
  spec.spheres.push_back({{0, 0.4, 4.0}, 1.0});
  spec.spheres.push_back({{-1.3, 0.8, 5.0}, 0.7});
  spec.spheres.push_back({{0, 0, 4.0}, 60.0});  // enclosure, seen from inside
  spec.camera = CameraPath::dolly_orbit({0, 0, 4.0}, 3.0, -0.4, 1.1, -0.008);
  spec.intrinsics = Intrinsics::centered(60.0, {height, width});
  spec.num_frames = num_frames;
  return spec;
}

// Adds one laterally moving sphere sized to cover roughly a fifth of the
// image from the dolly-orbit start pose.
inline SceneSpec moving_sphere_scene(int num_frames = 30, int width = 64,
                                     int height = 48) {
  SceneSpec spec = dolly_orbit_scene(num_frames, width, height);
  DynamicSphere mover;
  mover.sphere = {{-0.45, 0.15, 2.55}, 0.40};
  mover.motion = DynamicSphere::Motion::kLinear;
  mover.velocity = {0.05, 0.0, 0.02};
  spec.movers.push_back(mover);
  return spec;
}

inline std::map<Edge, PairEstimate> pairs_of(const OracleSequence& seq) {
  std::map<Edge, PairEstimate> out;
  for (const auto& [e, oe] : seq.edges) out.emplace(e, oe.pair);
  return out;
}

inline std::map<Edge, FlowField> flows_of(const OracleSequence& seq) {
  std::map<Edge, FlowField> out;
  for (const auto& [e, oe] : seq.edges) out.emplace(e, oe.flow);
  return out;
}

inline Trajectory gt_trajectory(const OracleSequence& seq) {
  Trajectory out;
  for (size_t f = 0; f < seq.frames.size(); ++f)
    out.push_back({int(f), seq.frames[f].cam_from_world.inverse()});
  return out;
}

inline Trajectory result_trajectory(const GlobalResult& result) {
  Trajectory out;
  for (size_t f = 0; f < result.cam_from_world.size(); ++f)
    out.push_back({int(f), result.cam_from_world[f].inverse()});
  return out;
}

// The exact optimum of the objective on clean oracle data: ground-truth
// poses, depths and focals; unit edge scales; align poses equal to the
// anchor frame's world_from_cam; masks = ground-truth static pixels with a
// valid flow target.
inline GlobalState ground_truth_state(const OracleSequence& seq,
                                      const VideoGraph& graph) {
  GlobalState s;
  s.graph = graph;
  s.size = seq.spec.intrinsics.size;
  s.principal_point = seq.spec.intrinsics.principal_point;
  s.frames.resize(seq.frames.size());
  for (size_t f = 0; f < seq.frames.size(); ++f) {
    FrameVariables& fv = s.frames[f];
    fv.q = dynrec::detail::quat_from_rotation(seq.frames[f].cam_from_world.rotation);
    fv.t = seq.frames[f].cam_from_world.translation;
    fv.log_focal = std::log(seq.spec.intrinsics.focal);
    fv.log_depth = Grid<double>(s.size);
    for (size_t i = 0; i < fv.log_depth.data().size(); ++i)
      fv.log_depth.data()[i] = std::log(seq.frames[f].depth.depth.data()[i]);
  }
  for (const auto& [e, oe] : seq.edges) {
    EdgeVariables ev;
    const PoseSE3 world_from_anchor =
        seq.frames[size_t(e.first)].cam_from_world.inverse();
    ev.q = dynrec::detail::quat_from_rotation(world_from_anchor.rotation);
    ev.t = world_from_anchor.translation;
    ev.log_scale = 0;
    s.edges.emplace(e, ev);

    StaticMask mask(s.size, 0);
    for (int v = 0; v < s.size.height; ++v)
      for (int u = 0; u < s.size.width; ++u)
        mask.is_static.at(u, v) =
            (!seq.frames[size_t(e.first)].dynamic_mask.at(u, v) &&
             oe.flow.valid.at(u, v))
                ? 1
                : 0;
    s.masks.emplace(e, mask);
  }
  return s;
}

}  // namespace fixtures
