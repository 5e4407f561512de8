// File formats and configuration.
//
// PMG1 grid container (binary, little-endian):
//   bytes 0..3   magic "PMG1"
//   u32 version (1)
//   u32 height, u32 width, u32 channels
//   u32 dtype (1 = float32 little-endian)
//   u32 validity flag (0 or 1)
//   payload: height*width*channels float32, row-major, channel-interleaved,
//   followed by height*width uint8 validity bytes when the flag is set.
//
// Trajectories use the TUM text format, one pose per line:
//   timestamp tx ty tz qx qy qz qw        (world_from_cam)
// written with enough digits (%.17g) that reading reproduces the exact
// doubles.
//
// Config files are plain text, one "key = value" per line, '#' comments.
// Unknown keys are rejected.
#pragma once

#include <array>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "dynrec/evalkit.hpp"
#include "dynrec/geom.hpp"

namespace dynrec {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// PMG1 grid container
// ---------------------------------------------------------------------------

struct GridContainer {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> data;                      // h*w*channels, interleaved
  std::optional<std::vector<std::uint8_t>> validity;  // h*w when present

  float& at(int u, int v, int c) {
    return data[(size_t(v) * width + u) * channels + size_t(c)];
  }
  float at(int u, int v, int c) const {
    return data[(size_t(v) * width + u) * channels + size_t(c)];
  }
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(char((x >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::string& in, size_t pos) {
  std::uint32_t x = 0;
  for (int i = 0; i < 4; ++i)
    x |= std::uint32_t(std::uint8_t(in[pos + size_t(i)])) << (8 * i);
  return x;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(bytes.data(), std::streamsize(bytes.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string encode_grid(const GridContainer& gc) {
  if (gc.height < 1 || gc.width < 1 || gc.channels < 1)
    throw IoError("encode_grid: bad dimensions");
  const size_t cells = size_t(gc.height) * size_t(gc.width);
  if (gc.data.size() != cells * size_t(gc.channels))
    throw IoError("encode_grid: payload size mismatch");
  if (gc.validity && gc.validity->size() != cells)
    throw IoError("encode_grid: validity size mismatch");

  std::string out;
  out.reserve(28 + gc.data.size() * 4 + (gc.validity ? cells : 0));
  out += "PMG1";
  detail::put_u32(out, 1);
  detail::put_u32(out, std::uint32_t(gc.height));
  detail::put_u32(out, std::uint32_t(gc.width));
  detail::put_u32(out, std::uint32_t(gc.channels));
  detail::put_u32(out, 1);  // dtype f32
  detail::put_u32(out, gc.validity ? 1 : 0);
  // x86 floats are already little-endian IEEE754
  static_assert(sizeof(float) == 4);
  out.append(reinterpret_cast<const char*>(gc.data.data()),
             gc.data.size() * 4);
  if (gc.validity)
    out.append(reinterpret_cast<const char*>(gc.validity->data()), cells);
  return out;
}

inline GridContainer decode_grid(const std::string& bytes,
                                 const std::string& origin = "<memory>") {
  if (bytes.size() < 28 || bytes.compare(0, 4, "PMG1") != 0)
    throw IoError("not a PMG1 container: " + origin);
  if (detail::get_u32(bytes, 4) != 1)
    throw IoError("unsupported PMG1 version: " + origin);
  GridContainer gc;
  gc.height = int(detail::get_u32(bytes, 8));
  gc.width = int(detail::get_u32(bytes, 12));
  gc.channels = int(detail::get_u32(bytes, 16));
  if (detail::get_u32(bytes, 20) != 1)
    throw IoError("unsupported PMG1 dtype: " + origin);
  const bool has_validity = detail::get_u32(bytes, 24) != 0;
  if (gc.height < 1 || gc.width < 1 || gc.channels < 1)
    throw IoError("bad PMG1 dimensions: " + origin);
  const size_t cells = size_t(gc.height) * size_t(gc.width);
  const size_t expect = 28 + cells * size_t(gc.channels) * 4 +
                        (has_validity ? cells : 0);
  if (bytes.size() != expect)
    throw IoError("truncated PMG1 payload: " + origin);
  gc.data.resize(cells * size_t(gc.channels));
  std::memcpy(gc.data.data(), bytes.data() + 28, gc.data.size() * 4);
  if (has_validity) {
    gc.validity.emplace(cells);
    std::memcpy(gc.validity->data(), bytes.data() + 28 + gc.data.size() * 4,
                cells);
  }
  return gc;
}

inline void write_grid(const std::string& path, const GridContainer& gc) {
  detail::write_file(path, encode_grid(gc));
}

inline GridContainer read_grid(const std::string& path) {
  return decode_grid(detail::read_file(path), path);
}

// --- conversions between grids and geometry types (f32 storage) -----------

inline GridContainer to_grid(const DepthMap& d) {
  GridContainer gc;
  gc.height = d.size().height;
  gc.width = d.size().width;
  gc.channels = 1;
  gc.data.reserve(d.depth.data().size());
  for (double x : d.depth.data()) gc.data.push_back(float(x));
  gc.validity = std::vector<std::uint8_t>(d.valid.data());
  return gc;
}

inline DepthMap depth_from_grid(const GridContainer& gc) {
  if (gc.channels != 1) throw IoError("depth grid must have 1 channel");
  DepthMap d(ImageSize{gc.height, gc.width});
  for (size_t i = 0; i < gc.data.size(); ++i)
    d.depth.data()[i] = double(gc.data[i]);
  if (gc.validity) d.valid.data() = *gc.validity;
  return d;
}

inline GridContainer to_grid(const Pointmap& pm) {
  GridContainer gc;
  gc.height = pm.size().height;
  gc.width = pm.size().width;
  gc.channels = 3;
  gc.data.reserve(pm.points.data().size() * 3);
  for (const auto& p : pm.points.data()) {
    gc.data.push_back(float(p.x()));
    gc.data.push_back(float(p.y()));
    gc.data.push_back(float(p.z()));
  }
  gc.validity = std::vector<std::uint8_t>(pm.valid.data());
  return gc;
}

inline Pointmap pointmap_from_grid(const GridContainer& gc) {
  if (gc.channels != 3) throw IoError("pointmap grid must have 3 channels");
  Pointmap pm(ImageSize{gc.height, gc.width});
  for (size_t i = 0; i < pm.points.data().size(); ++i)
    pm.points.data()[i] = Eigen::Vector3d(
        gc.data[3 * i], gc.data[3 * i + 1], gc.data[3 * i + 2]);
  if (gc.validity) pm.valid.data() = *gc.validity;
  return pm;
}

inline GridContainer to_grid(const ConfidenceMap& c) {
  GridContainer gc;
  gc.height = c.size().height;
  gc.width = c.size().width;
  gc.channels = 1;
  for (double x : c.values.data()) gc.data.push_back(float(x));
  return gc;
}

inline ConfidenceMap confidence_from_grid(const GridContainer& gc) {
  if (gc.channels != 1) throw IoError("confidence grid must have 1 channel");
  ConfidenceMap c(ImageSize{gc.height, gc.width});
  for (size_t i = 0; i < gc.data.size(); ++i)
    c.values.data()[i] = double(gc.data[i]);
  return c;
}

inline GridContainer to_grid(const FlowField& f) {
  GridContainer gc;
  gc.height = f.size().height;
  gc.width = f.size().width;
  gc.channels = 2;
  for (const auto& x : f.flow.data()) {
    gc.data.push_back(float(x.x()));
    gc.data.push_back(float(x.y()));
  }
  gc.validity = std::vector<std::uint8_t>(f.valid.data());
  return gc;
}

inline FlowField flow_from_grid(const GridContainer& gc) {
  if (gc.channels != 2) throw IoError("flow grid must have 2 channels");
  FlowField f(ImageSize{gc.height, gc.width});
  for (size_t i = 0; i < f.flow.data().size(); ++i)
    f.flow.data()[i] = Eigen::Vector2d(gc.data[2 * i], gc.data[2 * i + 1]);
  if (gc.validity) f.valid.data() = *gc.validity;
  return f;
}

inline GridContainer to_grid(const StaticMask& m) {
  GridContainer gc;
  gc.height = m.size().height;
  gc.width = m.size().width;
  gc.channels = 1;
  for (auto x : m.is_static.data()) gc.data.push_back(x ? 1.0f : 0.0f);
  return gc;
}

inline StaticMask mask_from_grid(const GridContainer& gc) {
  if (gc.channels != 1) throw IoError("mask grid must have 1 channel");
  StaticMask m(ImageSize{gc.height, gc.width});
  for (size_t i = 0; i < gc.data.size(); ++i)
    m.is_static.data()[i] = gc.data[i] > 0.5f ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------------------
// TUM trajectories
// ---------------------------------------------------------------------------

struct TumRow {
  double timestamp = 0;
  Eigen::Vector3d t{0, 0, 0};
  Eigen::Quaterniond q{1, 0, 0, 0};  // (w, x, y, z) internally; file is xyzw
};

inline std::string format_g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string encode_tum(const std::vector<TumRow>& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += format_g17(r.timestamp);
    for (double v : {r.t.x(), r.t.y(), r.t.z(), r.q.x(), r.q.y(), r.q.z(),
                     r.q.w()}) {
      out += ' ';
      out += format_g17(v);
    }
    out += '\n';
  }
  return out;
}

inline std::vector<TumRow> decode_tum(const std::string& text,
                                      const std::string& origin = "<memory>") {
  std::vector<TumRow> rows;
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    TumRow r;
    double qx, qy, qz, qw;
    if (!(ls >> r.timestamp >> r.t.x() >> r.t.y() >> r.t.z() >> qx >> qy >>
          qz >> qw))
      throw IoError(origin + ":" + std::to_string(lineno) +
                    ": malformed TUM line");
    r.q = Eigen::Quaterniond(qw, qx, qy, qz);
    rows.push_back(r);
  }
  return rows;
}

inline void write_tum(const std::string& path, const std::vector<TumRow>& rows) {
  detail::write_file(path, encode_tum(rows));
}

inline std::vector<TumRow> read_tum(const std::string& path) {
  return decode_tum(detail::read_file(path), path);
}

inline std::vector<TumRow> trajectory_to_tum(const Trajectory& traj) {
  std::vector<TumRow> rows;
  rows.reserve(traj.size());
  for (const auto& e : traj) {
    TumRow r;
    r.timestamp = double(e.frame_id);
    r.t = e.world_from_cam.translation;
    r.q = Eigen::Quaterniond(e.world_from_cam.rotation);
    if (r.q.w() < 0) r.q.coeffs() = -r.q.coeffs();
    rows.push_back(r);
  }
  return rows;
}

inline Trajectory tum_to_trajectory(const std::vector<TumRow>& rows) {
  Trajectory traj;
  traj.reserve(rows.size());
  for (const auto& r : rows) {
    TrajectoryEntry e;
    e.frame_id = int(std::llround(r.timestamp));
    e.world_from_cam.rotation = r.q.normalized().toRotationMatrix();
    e.world_from_cam.translation = r.t;
    traj.push_back(e);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// key = value config files
// ---------------------------------------------------------------------------

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline KeyValues parse_key_values(const std::string& text,
                                  const std::string& origin = "<memory>") {
  KeyValues out;
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const char* ws = " \t\r\n";
      const size_t b = s.find_first_not_of(ws);
      if (b == std::string::npos) return std::string();
      const size_t e = s.find_last_not_of(ws);
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError(origin + ":" + std::to_string(lineno) +
                    ": expected 'key = value'");
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    if (out.back().first.empty())
      throw IoError(origin + ":" + std::to_string(lineno) + ": empty key");
  }
  return out;
}

inline KeyValues read_key_values(const std::string& path) {
  return parse_key_values(detail::read_file(path), path);
}

// ---------------------------------------------------------------------------
// Binary little-endian PLY point cloud (xyz float + rgb uchar)
// ---------------------------------------------------------------------------

struct PlyPoint {
  Eigen::Vector3f xyz;
  std::array<std::uint8_t, 3> rgb;
};

inline void write_ply(const std::string& path,
                      const std::vector<PlyPoint>& points) {
  std::string out;
  out += "ply\nformat binary_little_endian 1.0\n";
  out += "element vertex " + std::to_string(points.size()) + "\n";
  out +=
      "property float x\nproperty float y\nproperty float z\n"
      "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      "end_header\n";
  for (const auto& p : points) {
    out.append(reinterpret_cast<const char*>(p.xyz.data()), 12);
    out.append(reinterpret_cast<const char*>(p.rgb.data()), 3);
  }
  detail::write_file(path, out);
}

// ---------------------------------------------------------------------------
// CSV <-> grid (debugging aid for the convert subcommand)
// ---------------------------------------------------------------------------

inline std::string grid_to_csv(const GridContainer& gc) {
  std::string out = "height,width,channels,validity\n";
  out += std::to_string(gc.height) + "," + std::to_string(gc.width) + "," +
         std::to_string(gc.channels) + "," + (gc.validity ? "1" : "0") + "\n";
  for (int v = 0; v < gc.height; ++v)
    for (int u = 0; u < gc.width; ++u) {
      out += std::to_string(v) + "," + std::to_string(u);
      for (int c = 0; c < gc.channels; ++c) {
        out += ',';
        out += format_g17(double(gc.at(u, v, c)));
      }
      if (gc.validity)
        out += "," + std::to_string(int((*gc.validity)[size_t(v) * gc.width + u]));
      out += '\n';
    }
  return out;
}

inline GridContainer grid_from_csv(const std::string& text,
                                   const std::string& origin = "<csv>") {
  std::istringstream ss(text);
  std::string line;
  if (!std::getline(ss, line)) throw IoError(origin + ": empty csv");
  if (!std::getline(ss, line)) throw IoError(origin + ": missing header row");
  GridContainer gc;
  int has_validity = 0;
  if (std::sscanf(line.c_str(), "%d,%d,%d,%d", &gc.height, &gc.width,
                  &gc.channels, &has_validity) != 4)
    throw IoError(origin + ": malformed header row");
  if (gc.height < 1 || gc.width < 1 || gc.channels < 1)
    throw IoError(origin + ": bad dimensions");
  const size_t cells = size_t(gc.height) * size_t(gc.width);
  gc.data.assign(cells * size_t(gc.channels), 0.0f);
  if (has_validity) gc.validity.emplace(cells, 1);
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    auto next = [&]() {
      if (!std::getline(ls, cell, ',')) throw IoError(origin + ": short row");
      return cell;
    };
    const int v = std::stoi(next());
    const int u = std::stoi(next());
    if (v < 0 || v >= gc.height || u < 0 || u >= gc.width)
      throw IoError(origin + ": cell out of range");
    for (int c = 0; c < gc.channels; ++c)
      gc.at(u, v, c) = std::stof(next());
    if (has_validity)
      (*gc.validity)[size_t(v) * gc.width + u] = std::uint8_t(std::stoi(next()));
  }
  return gc;
}

}  // namespace dynrec
