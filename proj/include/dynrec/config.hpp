// Run and scene configuration, parsed from the plain "key = value" format
// (see io.hpp). Unknown keys are rejected so typos fail loudly.
#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynrec/evalkit.hpp"
#include "dynrec/io.hpp"
#include "dynrec/optim.hpp"
#include "dynrec/oracle.hpp"

namespace dynrec {

struct RunConfig {
  int window = -1;  // <= 0: take the value recorded in the input directory
  int stride = -1;
  OptimSchedule schedule;
  RansacParams ransac;
  double alpha = -1;  // < 0: default_static_mask_alpha of the image size
  DepthAlignMode align_mode = DepthAlignMode::kScaleShift;
  bool shared_focal = false;
  std::uint64_t seed = 0;
  std::string input;
  std::string output;
};

namespace detail {

inline double to_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw IoError("config: bad numeric value for '" + key + "': " + v);
  }
}

inline long to_long(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const long x = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw IoError("config: bad integer value for '" + key + "': " + v);
  }
}

inline bool to_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw IoError("config: bad boolean value for '" + key + "': " + v);
}

inline std::vector<double> to_doubles(const std::string& v,
                                      const std::string& key, size_t count) {
  std::istringstream ss(v);
  std::vector<double> out;
  double x;
  while (ss >> x) out.push_back(x);
  if (out.size() != count)
    throw IoError("config: '" + key + "' expects " + std::to_string(count) +
                  " numbers, got: " + v);
  return out;
}

}  // namespace detail

inline RunConfig run_config_from(const KeyValues& kv) {
  RunConfig c;
  for (const auto& [key, value] : kv) {
    if (key == "window") c.window = int(detail::to_long(value, key));
    else if (key == "stride") c.stride = int(detail::to_long(value, key));
    else if (key == "iterations") c.schedule.iterations = int(detail::to_long(value, key));
    else if (key == "learning_rate") c.schedule.learning_rate = detail::to_double(value, key);
    else if (key == "lr_end") c.schedule.lr_end = detail::to_double(value, key);
    else if (key == "w_smooth") c.schedule.w_smooth = detail::to_double(value, key);
    else if (key == "w_flow") c.schedule.w_flow = detail::to_double(value, key);
    else if (key == "flow_enable_threshold") c.schedule.flow_enable_threshold = detail::to_double(value, key);
    else if (key == "mask_update_threshold") c.schedule.mask_update_threshold = detail::to_double(value, key);
    else if (key == "mask_update_interval") c.schedule.mask_update_interval = int(detail::to_long(value, key));
    else if (key == "adam_beta1") c.schedule.adam_beta1 = detail::to_double(value, key);
    else if (key == "adam_beta2") c.schedule.adam_beta2 = detail::to_double(value, key);
    else if (key == "adam_eps") c.schedule.adam_eps = detail::to_double(value, key);
    else if (key == "ransac_iterations") c.ransac.max_iterations = int(detail::to_long(value, key));
    else if (key == "ransac_threshold_px") c.ransac.inlier_threshold_px = detail::to_double(value, key);
    else if (key == "ransac_min_inliers") c.ransac.min_inliers = int(detail::to_long(value, key));
    else if (key == "alpha") c.alpha = detail::to_double(value, key);
    else if (key == "align") c.align_mode = parse_align_mode(value);
    else if (key == "shared_focal") c.shared_focal = detail::to_bool(value, key);
    else if (key == "seed") c.seed = std::uint64_t(detail::to_long(value, key));
    else if (key == "input") c.input = value;
    else if (key == "output") c.output = value;
    else throw IoError("config: unknown key '" + key + "'");
  }
  return c;
}

inline RunConfig read_run_config(const std::string& path) {
  return run_config_from(read_key_values(path));
}

// Scene description keys:
//   num_frames, width, height, focal, seed, depth_sigma, confidence_floor,
//   anchor_dynamic_content,
//   camera = static | dolly dx dy dz step |
//            orbit tx ty tz radius height step_deg |
//            dolly_orbit tx ty tz radius height step_deg radius_step
//   plane  = nx ny nz offset                      (repeatable)
//   sphere = cx cy cz r                           (repeatable)
//   mover_linear   = cx cy cz r vx vy vz          (repeatable)
//   mover_circular = cx cy cz r ox oy oz ax ay az step_deg  (repeatable)
inline SceneSpec scene_spec_from(const KeyValues& kv) {
  SceneSpec spec;
  int width = 64, height = 48;
  double focal = 60.0;
  for (const auto& [key, value] : kv) {
    if (key == "num_frames") spec.num_frames = int(detail::to_long(value, key));
    else if (key == "width") width = int(detail::to_long(value, key));
    else if (key == "height") height = int(detail::to_long(value, key));
    else if (key == "focal") focal = detail::to_double(value, key);
    else if (key == "seed") spec.seed = std::uint64_t(detail::to_long(value, key));
    else if (key == "depth_sigma") spec.noise.depth_sigma = detail::to_double(value, key);
    else if (key == "confidence_floor") spec.noise.confidence_floor = detail::to_double(value, key);
    else if (key == "anchor_dynamic_content") spec.anchor_dynamic_content = detail::to_bool(value, key);
    else if (key == "plane") {
      const auto v = detail::to_doubles(value, key, 4);
      spec.planes.push_back({{v[0], v[1], v[2]}, v[3]});
    } else if (key == "sphere") {
      const auto v = detail::to_doubles(value, key, 4);
      spec.spheres.push_back({{v[0], v[1], v[2]}, v[3]});
    } else if (key == "mover_linear") {
      const auto v = detail::to_doubles(value, key, 7);
      DynamicSphere m;
      m.sphere = {{v[0], v[1], v[2]}, v[3]};
      m.motion = DynamicSphere::Motion::kLinear;
      m.velocity = {v[4], v[5], v[6]};
      spec.movers.push_back(m);
    } else if (key == "mover_circular") {
      const auto v = detail::to_doubles(value, key, 11);
      DynamicSphere m;
      m.sphere = {{v[0], v[1], v[2]}, v[3]};
      m.motion = DynamicSphere::Motion::kCircular;
      m.orbit_center = {v[4], v[5], v[6]};
      m.orbit_axis = {v[7], v[8], v[9]};
      m.orbit_step_deg = v[10];
      spec.movers.push_back(m);
    } else if (key == "camera") {
      std::istringstream ss(value);
      std::string preset;
      ss >> preset;
      std::vector<double> v;
      double x;
      while (ss >> x) v.push_back(x);
      if (preset == "static" && v.empty()) {
        spec.camera = CameraPath::statics();
      } else if (preset == "dolly" && v.size() == 4) {
        spec.camera = CameraPath::dolly({v[0], v[1], v[2]}, v[3]);
      } else if (preset == "orbit" && v.size() == 6) {
        spec.camera = CameraPath::orbit({v[0], v[1], v[2]}, v[3], v[4], v[5]);
      } else if (preset == "dolly_orbit" && v.size() == 7) {
        spec.camera = CameraPath::dolly_orbit({v[0], v[1], v[2]}, v[3], v[4],
                                              v[5], v[6]);
      } else {
        throw IoError("config: bad camera preset: " + value);
      }
    } else {
      throw IoError("config: unknown scene key '" + key + "'");
    }
  }
  spec.intrinsics = Intrinsics::centered(focal, {height, width});
  return spec;
}

inline SceneSpec read_scene_spec(const std::string& path) {
  return scene_spec_from(read_key_values(path));
}

}  // namespace dynrec
