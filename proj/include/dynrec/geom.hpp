// Core geometric types and the pinhole projection algebra used everywhere else.
//
// Conventions (used consistently across the library and all file formats):
//   * Pixel coordinates are (u, v) = (column, row), origin at the top-left
//     pixel, pixel centers at integer coordinates.
//   * The principal point defaults to the image center ((W-1)/2, (H-1)/2).
//   * A camera pose stored as "cam_from_world" maps world points into the
//     camera frame: x_cam = R * x_world + T. Trajectory files (TUM) store the
//     inverse (world_from_cam), as is customary for that format.
//   * Depth is the camera-frame z coordinate, not the ray length.
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace dynrec {

struct ImageSize {
  int height = 0;
  int width = 0;

  bool operator==(const ImageSize&) const = default;
  int pixels() const { return height * width; }
};

inline void require_valid(const ImageSize& s) {
  if (s.height < 1 || s.width < 1)
    throw std::invalid_argument("ImageSize must be at least 1x1");
}

// Dense row-major H x W grid. Cells are addressed as (u, v) = (col, row).
template <typename T>
class Grid {
 public:
  Grid() = default;
  Grid(ImageSize size, const T& fill = T{}) : size_(size) {
    require_valid(size);
    data_.assign(static_cast<size_t>(size.pixels()), fill);
  }

  const ImageSize& size() const { return size_; }
  bool empty() const { return data_.empty(); }

  T& at(int u, int v) { return data_[static_cast<size_t>(v) * size_.width + u]; }
  const T& at(int u, int v) const {
    return data_[static_cast<size_t>(v) * size_.width + u];
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool operator==(const Grid&) const = default;

 private:
  ImageSize size_;
  std::vector<T> data_;
};

struct Intrinsics {
  double focal = 1.0;                       // pixels
  Eigen::Vector2d principal_point{0, 0};    // (cx, cy), pixels
  ImageSize size;

  // Focal plus the default centered principal point.
  static Intrinsics centered(double focal, ImageSize size) {
    require_valid(size);
    if (!(focal > 0)) throw std::invalid_argument("focal must be positive");
    return Intrinsics{focal,
                      {0.5 * (size.width - 1), 0.5 * (size.height - 1)},
                      size};
  }
};

namespace detail {
constexpr double kRotationTol = 1e-9;

inline bool is_rotation(const Eigen::Matrix3d& r, double tol = kRotationTol) {
  return (r.transpose() * r - Eigen::Matrix3d::Identity()).norm() < tol &&
         std::abs(r.determinant() - 1.0) < tol;
}
}  // namespace detail

// Rigid transform x -> R x + T. Which frames it maps between is documented at
// each use site (see the conventions note at the top of this header).
struct PoseSE3 {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  PoseSE3() = default;
  PoseSE3(const Eigen::Matrix3d& r, const Eigen::Vector3d& t)
      : rotation(r), translation(t) {
    if (!detail::is_rotation(r))
      throw std::invalid_argument("PoseSE3: rotation is not orthonormal");
  }

  static PoseSE3 identity() { return PoseSE3{}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return rotation * p + translation;
  }

  PoseSE3 inverse() const {
    PoseSE3 out;
    out.rotation = rotation.transpose();
    out.translation = -(rotation.transpose() * translation);
    return out;
  }

  // this ∘ other: first apply `other`, then `this`.
  PoseSE3 operator*(const PoseSE3& other) const {
    PoseSE3 out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }
};

// Similarity transform x -> s R x + T.
struct Sim3 {
  double scale = 1.0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Sim3() = default;
  Sim3(double s, const Eigen::Matrix3d& r, const Eigen::Vector3d& t)
      : scale(s), rotation(r), translation(t) {
    if (!(s > 0)) throw std::invalid_argument("Sim3: scale must be positive");
    if (!detail::is_rotation(r))
      throw std::invalid_argument("Sim3: rotation is not orthonormal");
  }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const {
    return scale * (rotation * p) + translation;
  }

  Sim3 inverse() const {
    Sim3 out;
    out.scale = 1.0 / scale;
    out.rotation = rotation.transpose();
    out.translation = -(rotation.transpose() * translation) / scale;
    return out;
  }
};

// Per-pixel 3D positions in some designated frame, with a validity plane.
// Invalid cells are skipped by every reduction in the library.
struct Pointmap {
  Grid<Eigen::Vector3d> points;
  Grid<std::uint8_t> valid;

  Pointmap() = default;
  explicit Pointmap(ImageSize size)
      : points(size, Eigen::Vector3d::Zero()), valid(size, 1) {}

  const ImageSize& size() const { return points.size(); }
};

struct ConfidenceMap {
  Grid<double> values;

  ConfidenceMap() = default;
  explicit ConfidenceMap(ImageSize size, double fill = 1.0)
      : values(size, fill) {}

  const ImageSize& size() const { return values.size(); }
};

struct DepthMap {
  Grid<double> depth;
  Grid<std::uint8_t> valid;

  DepthMap() = default;
  explicit DepthMap(ImageSize size, double fill = 1.0)
      : depth(size, fill), valid(size, 1) {}

  const ImageSize& size() const { return depth.size(); }
};

// 2D displacement per pixel. `valid` marks pixels with a usable target
// (e.g. not occluded and in front of the camera).
struct FlowField {
  Grid<Eigen::Vector2d> flow;
  Grid<std::uint8_t> valid;

  FlowField() = default;
  explicit FlowField(ImageSize size)
      : flow(size, Eigen::Vector2d::Zero()), valid(size, 1) {}

  const ImageSize& size() const { return flow.size(); }
};

struct StaticMask {
  Grid<std::uint8_t> is_static;

  StaticMask() = default;
  explicit StaticMask(ImageSize size, std::uint8_t fill = 1)
      : is_static(size, fill) {}

  const ImageSize& size() const { return is_static.size(); }

  int count_static() const {
    int n = 0;
    for (auto v : is_static.data()) n += (v != 0);
    return n;
  }
};

// Pinhole projection. Throws std::domain_error for points at or behind the
// camera plane.
inline Eigen::Vector2d project(const Eigen::Vector3d& point,
                               const Intrinsics& k) {
  if (!(point.z() > 0))
    throw std::domain_error("project: point has non-positive depth");
  return {k.focal * point.x() / point.z() + k.principal_point.x(),
          k.focal * point.y() / point.z() + k.principal_point.y()};
}

inline Eigen::Vector3d backproject(const Eigen::Vector2d& pixel, double depth,
                                   const Intrinsics& k) {
  if (!(depth > 0))
    throw std::domain_error("backproject: non-positive depth");
  return {(pixel.x() - k.principal_point.x()) * depth / k.focal,
          (pixel.y() - k.principal_point.y()) * depth / k.focal, depth};
}

inline Eigen::Vector3d apply_pose(const PoseSE3& pose,
                                  const Eigen::Vector3d& point) {
  return pose.apply(point);
}

// Lifts a depth map to a pointmap in the world frame of `cam_from_world`:
// X(u,v) = cam_from_world^-1 ( backproject((u,v), D(u,v), K) ).
// Invalid depths yield invalid points.
inline Pointmap pointmap_from_depth(const DepthMap& depth, const Intrinsics& k,
                                    const PoseSE3& cam_from_world) {
  if (depth.size() != k.size)
    throw std::invalid_argument("pointmap_from_depth: size mismatch");
  Pointmap out(depth.size());
  const PoseSE3 world_from_cam = cam_from_world.inverse();
  for (int v = 0; v < depth.size().height; ++v) {
    for (int u = 0; u < depth.size().width; ++u) {
      const double d = depth.depth.at(u, v);
      if (!depth.valid.at(u, v) || !(d > 0) || !std::isfinite(d)) {
        out.valid.at(u, v) = 0;
        continue;
      }
      out.points.at(u, v) =
          world_from_cam.apply(backproject({double(u), double(v)}, d, k));
    }
  }
  return out;
}

// z coordinate of each point in the camera frame of `cam_from_world`.
// Points that land at non-positive depth are marked invalid.
inline DepthMap depth_from_pointmap(const Pointmap& pm,
                                    const PoseSE3& cam_from_world) {
  DepthMap out(pm.size());
  for (int v = 0; v < pm.size().height; ++v) {
    for (int u = 0; u < pm.size().width; ++u) {
      if (!pm.valid.at(u, v)) {
        out.valid.at(u, v) = 0;
        out.depth.at(u, v) = 0;
        continue;
      }
      const double z = cam_from_world.apply(pm.points.at(u, v)).z();
      out.depth.at(u, v) = z;
      out.valid.at(u, v) = (z > 0 && std::isfinite(z)) ? 1 : 0;
    }
  }
  return out;
}

}  // namespace dynrec
