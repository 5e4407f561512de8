// dynrec command line: synthesize oracle scenes, run the global alignment,
// and evaluate trajectories, depth and masks.
//
// Subcommands: synth | align | eval-pose | eval-depth | mask | convert.
// Verbosity comes from the DYNREC_LOG environment variable
// (quiet | info | debug, default info). All randomness derives from --seed;
// identical invocations produce byte-identical outputs.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "dynrec/config.hpp"
#include "dynrec/evalkit.hpp"
#include "dynrec/io.hpp"
#include "dynrec/optim.hpp"
#include "dynrec/oracle.hpp"

namespace fs = std::filesystem;
using namespace dynrec;

namespace {

int log_level() {
  const char* env = std::getenv("DYNREC_LOG");
  if (!env) return 1;
  const std::string v(env);
  if (v == "quiet") return 0;
  if (v == "debug") return 2;
  return 1;
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[dynrec] " << msg << "\n";
}

void log_debug(const std::string& msg) {
  if (log_level() >= 2) std::cerr << "[dynrec] " << msg << "\n";
}

std::string frame_name(int f, const std::string& kind) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "frame_%04d_%s.pmg", f, kind.c_str());
  return buf;
}

std::string edge_name(const Edge& e, const std::string& kind) {
  char buf[80];
  std::snprintf(buf, sizeof buf, "edge_%04d_%04d_%s.pmg", e.first, e.second,
                kind.c_str());
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  detail::write_file(path.string(), text);
}

// --------------------------------------------------------------------------
// synth
// --------------------------------------------------------------------------

int cmd_synth(const std::string& scene_path, const std::string& out_dir,
              int window, int stride, std::uint64_t seed, bool have_seed) {
  SceneSpec spec = read_scene_spec(scene_path);
  if (have_seed) spec.seed = seed;
  const VideoGraph graph = build_window_graph(spec.num_frames, window, stride);
  log_info("rendering " + std::to_string(spec.num_frames) + " frames, " +
           std::to_string(graph.edges.size()) + " edges");
  const OracleSequence seq = render_sequence(spec, graph);

  fs::create_directories(out_dir);
  const fs::path dir(out_dir);

  std::string meta;
  meta += "num_frames = " + std::to_string(spec.num_frames) + "\n";
  meta += "width = " + std::to_string(spec.intrinsics.size.width) + "\n";
  meta += "height = " + std::to_string(spec.intrinsics.size.height) + "\n";
  meta += "window = " + std::to_string(window) + "\n";
  meta += "stride = " + std::to_string(stride) + "\n";
  meta += "seed = " + std::to_string(spec.seed) + "\n";
  write_text(dir / "meta.cfg", meta);
  write_text(dir / "gt_intrinsics.cfg",
             "focal = " + format_g17(spec.intrinsics.focal) + "\n");

  Trajectory gt;
  for (int f = 0; f < spec.num_frames; ++f)
    gt.push_back({f, seq.frames[size_t(f)].cam_from_world.inverse()});
  write_tum((dir / "gt_trajectory.tum").string(), trajectory_to_tum(gt));

  for (int f = 0; f < spec.num_frames; ++f) {
    write_grid((dir / frame_name(f, "depth")).string(),
               to_grid(seq.frames[size_t(f)].depth));
    StaticMask dyn(spec.intrinsics.size, 0);
    for (size_t i = 0; i < dyn.is_static.data().size(); ++i)
      dyn.is_static.data()[i] = seq.frames[size_t(f)].dynamic_mask.data()[i];
    write_grid((dir / frame_name(f, "dynmask")).string(), to_grid(dyn));
  }

  for (const auto& [e, oe] : seq.edges) {
    write_grid((dir / edge_name(e, "self")).string(),
               to_grid(oe.pair.pointmap_self));
    write_grid((dir / edge_name(e, "other")).string(),
               to_grid(oe.pair.pointmap_other));
    write_grid((dir / edge_name(e, "conf_self")).string(),
               to_grid(oe.pair.conf_self));
    write_grid((dir / edge_name(e, "conf_other")).string(),
               to_grid(oe.pair.conf_other));
    write_grid((dir / edge_name(e, "flow")).string(), to_grid(oe.flow));
  }
  log_info("scene written to " + out_dir);
  return 0;
}

// --------------------------------------------------------------------------
// align
// --------------------------------------------------------------------------

struct SceneDir {
  VideoGraph graph;
  std::map<Edge, PairEstimate> pairs;
  std::map<Edge, FlowField> flows;
  ImageSize size;
};

// window/stride <= 0 take the values recorded by synth in meta.cfg.
SceneDir load_scene_dir(const std::string& in_dir, int window_override = -1,
                        int stride_override = -1) {
  const fs::path dir(in_dir);
  const fs::path meta_path = dir / "meta.cfg";
  if (!fs::exists(meta_path))
    throw IoError("input directory is missing " + meta_path.string());

  int num_frames = 0, width = 0, height = 0, window = 0, stride = 1;
  for (const auto& [key, value] : read_key_values(meta_path.string())) {
    if (key == "num_frames") num_frames = std::stoi(value);
    else if (key == "width") width = std::stoi(value);
    else if (key == "height") height = std::stoi(value);
    else if (key == "window") window = std::stoi(value);
    else if (key == "stride") stride = std::stoi(value);
    else if (key == "seed") continue;
    else throw IoError(meta_path.string() + ": unknown key '" + key + "'");
  }
  if (window_override > 0) window = window_override;
  if (stride_override > 0) stride = stride_override;

  SceneDir scene;
  scene.size = {height, width};
  scene.graph = build_window_graph(num_frames, window, stride);
  for (const Edge& e : scene.graph.edges) {
    PairEstimate pair;
    pair.frame_self = e.first;
    pair.frame_other = e.second;
    auto need = [&](const std::string& name) {
      const fs::path p = dir / name;
      if (!fs::exists(p)) throw IoError("missing input file: " + p.string());
      return read_grid(p.string());
    };
    pair.pointmap_self = pointmap_from_grid(need(edge_name(e, "self")));
    pair.pointmap_other = pointmap_from_grid(need(edge_name(e, "other")));
    pair.conf_self = confidence_from_grid(need(edge_name(e, "conf_self")));
    pair.conf_other = confidence_from_grid(need(edge_name(e, "conf_other")));
    pair.validate();
    if (pair.size() != scene.size)
      throw IoError("grid size disagrees with meta.cfg in " +
                    edge_name(e, "self"));
    scene.pairs.emplace(e, std::move(pair));
    scene.flows.emplace(e, flow_from_grid(need(edge_name(e, "flow"))));
  }
  return scene;
}

int cmd_align(const RunConfig& config) {
  const SceneDir scene = load_scene_dir(config.input, config.window,
                                        config.stride);
  log_info("loaded " + std::to_string(scene.graph.edges.size()) + " edges at " +
           std::to_string(scene.size.width) + "x" +
           std::to_string(scene.size.height));

  RunOptions options;
  options.schedule = config.schedule;
  options.ransac = config.ransac;
  options.alpha = config.alpha;
  options.shared_focal = config.shared_focal;
  const GlobalResult result = run_global_optimization(
      scene.graph, scene.pairs, scene.flows, options, config.seed);
  for (const auto& w : result.init_report.warnings) log_info("warning: " + w);

  fs::create_directories(config.output);
  const fs::path dir(config.output);

  Trajectory traj;
  for (int f = 0; f < scene.graph.num_frames; ++f)
    traj.push_back({f, result.cam_from_world[size_t(f)].inverse()});
  write_tum((dir / "trajectory.tum").string(), trajectory_to_tum(traj));

  for (int f = 0; f < scene.graph.num_frames; ++f)
    write_grid((dir / frame_name(f, "depth")).string(),
               to_grid(result.depth[size_t(f)]));

  for (const auto& [e, mask] : result.masks)
    write_grid((dir / edge_name(e, "mask")).string(), to_grid(mask));

  std::string intr;
  intr += "cx = " + format_g17(result.state.principal_point.x()) + "\n";
  intr += "cy = " + format_g17(result.state.principal_point.y()) + "\n";
  for (int f = 0; f < scene.graph.num_frames; ++f) {
    char key[32];
    std::snprintf(key, sizeof key, "focal_%04d", f);
    intr += std::string(key) + " = " +
            format_g17(result.intrinsics[size_t(f)].focal) + "\n";
  }
  write_text(dir / "intrinsics.cfg", intr);

  std::string csv =
      "iteration,total,align,smooth,flow,mean_flow_residual,lr,"
      "flow_gate_active\n";
  for (const auto& t : result.trace) {
    csv += std::to_string(t.iteration) + "," + format_g17(t.total) + "," +
           format_g17(t.align) + "," + format_g17(t.smooth) + "," +
           format_g17(t.flow) + "," + format_g17(t.mean_flow_residual) + "," +
           format_g17(t.lr) + "," + (t.flow_gate_active ? "1" : "0") + "\n";
  }
  write_text(dir / "loss_trace.csv", csv);

  // fused cloud, one hue per frame
  std::vector<PlyPoint> cloud;
  cloud.reserve(size_t(scene.graph.num_frames) * size_t(scene.size.pixels()));
  for (int f = 0; f < scene.graph.num_frames; ++f) {
    const Pointmap pm =
        pointmap_from_depth(result.depth[size_t(f)],
                            result.intrinsics[size_t(f)],
                            result.cam_from_world[size_t(f)]);
    const double hue = double(f) / std::max(1, scene.graph.num_frames - 1);
    const auto channel = [&](double phase) {
      return std::uint8_t(127.5 * (1.0 + std::sin(2 * M_PI * (hue + phase))));
    };
    PlyPoint p;
    p.rgb = {channel(0.0), channel(1.0 / 3.0), channel(2.0 / 3.0)};
    for (int v = 0; v < scene.size.height; ++v)
      for (int u = 0; u < scene.size.width; ++u) {
        if (!pm.valid.at(u, v)) continue;
        p.xyz = pm.points.at(u, v).cast<float>();
        cloud.push_back(p);
      }
  }
  write_ply((dir / "cloud.ply").string(), cloud);

  std::string report;
  report += "iterations = " + std::to_string(config.schedule.iterations) + "\n";
  report += "failed_edges = " + std::to_string(result.failed_edges.size()) + "\n";
  report += "warnings = " + std::to_string(result.init_report.warnings.size()) + "\n";
  report += "final_total = " + format_g17(result.trace.back().total) + "\n";
  report += "final_align = " + format_g17(result.trace.back().align) + "\n";
  report += "final_smooth = " + format_g17(result.trace.back().smooth) + "\n";
  report += "final_flow = " + format_g17(result.trace.back().flow) + "\n";
  write_text(dir / "report.cfg", report);

  log_info("results written to " + config.output);
  return 0;
}

// --------------------------------------------------------------------------
// eval-pose / eval-depth
// --------------------------------------------------------------------------

int cmd_eval_pose(const std::string& pred_path, const std::string& gt_path,
                  int delta, const std::string& out_path) {
  const Trajectory pred = tum_to_trajectory(read_tum(pred_path));
  const Trajectory gt = tum_to_trajectory(read_tum(gt_path));
  if (pred.size() != gt.size())
    throw EvalError("trajectory lengths differ: " + std::to_string(pred.size()) +
                    " vs " + std::to_string(gt.size()));
  const double ate_value = ate(pred, gt);
  const RpeResult rpe_value = rpe(pred, gt, delta);
  std::string text;
  text += "frames = " + std::to_string(pred.size()) + "\n";
  text += "delta = " + std::to_string(delta) + "\n";
  text += "ate = " + format_g17(ate_value) + "\n";
  text += "rpe_trans = " + format_g17(rpe_value.trans) + "\n";
  text += "rpe_rot_deg = " + format_g17(rpe_value.rot_deg) + "\n";
  std::fputs(text.c_str(), stdout);
  if (!out_path.empty()) write_text(out_path, text);
  return 0;
}

std::vector<DepthMap> load_depth_dir(const std::string& path) {
  std::vector<fs::path> files;
  if (!fs::is_directory(path)) throw IoError("not a directory: " + path);
  for (const auto& entry : fs::directory_iterator(path)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("frame_", 0) == 0 &&
        name.find("_depth.pmg") != std::string::npos)
      files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no frame_*_depth.pmg files in " + path);
  std::vector<DepthMap> out;
  for (const auto& f : files) out.push_back(depth_from_grid(read_grid(f.string())));
  return out;
}

int cmd_eval_depth(const std::string& pred_dir, const std::string& gt_dir,
                   const std::string& align_mode, const std::string& out_path) {
  const std::vector<DepthMap> pred = load_depth_dir(pred_dir);
  const std::vector<DepthMap> gt = load_depth_dir(gt_dir);
  if (pred.size() != gt.size())
    throw EvalError("depth sequence lengths differ: " +
                    std::to_string(pred.size()) + " vs " +
                    std::to_string(gt.size()));
  const DepthAlignMode mode = parse_align_mode(align_mode);
  const AlignedDepth aligned = align_depth(pred, gt, mode);
  const DepthEvalReport rep = depth_metrics(aligned.aligned, gt);
  std::string text;
  text += "frames = " + std::to_string(pred.size()) + "\n";
  text += "align = " + align_mode + "\n";
  text += "abs_rel = " + format_g17(rep.abs_rel) + "\n";
  text += "delta_125 = " + format_g17(rep.delta_125) + "\n";
  text += "scale = " + format_g17(aligned.scale) + "\n";
  text += "shift = " + format_g17(aligned.shift) + "\n";
  text += "pixels = " + std::to_string(rep.pixel_count) + "\n";
  std::fputs(text.c_str(), stdout);
  if (!out_path.empty()) write_text(out_path, text);
  return 0;
}

// --------------------------------------------------------------------------
// mask
// --------------------------------------------------------------------------

int cmd_mask(const std::string& self_path, const std::string& other_path,
             const std::string& conf_self_path,
             const std::string& conf_other_path, const std::string& flow_path,
             const std::string& out_path, double alpha, std::uint64_t seed) {
  PairEstimate pair;
  pair.pointmap_self = pointmap_from_grid(read_grid(self_path));
  pair.pointmap_other = pointmap_from_grid(read_grid(other_path));
  pair.conf_self = confidence_from_grid(read_grid(conf_self_path));
  pair.conf_other = confidence_from_grid(read_grid(conf_other_path));
  pair.frame_self = 0;
  pair.frame_other = 1;
  pair.validate();
  const FlowField flow_est = flow_from_grid(read_grid(flow_path));
  const ImageSize size = pair.size();
  if (flow_est.size() != size) throw IoError("flow size disagrees with pair");

  // single-pair setting: both frames share the self-estimated focal
  const double focal = estimate_focal(pair.pointmap_self);
  const Intrinsics k{focal,
                     {0.5 * (size.width - 1), 0.5 * (size.height - 1)},
                     size};
  RansacParams ransac;
  ransac.seed = seed;
  const auto pose = estimate_relative_pose(pair, k, ransac);
  if (!pose) throw EstimationError("relative pose estimation failed");
  const DepthMap depth =
      depth_from_pointmap(pair.pointmap_self, PoseSE3::identity());
  const FlowField f_cam = induced_flow(depth, k, k, pose->pose);
  const double used_alpha = alpha > 0 ? alpha : default_static_mask_alpha(size);
  const StaticMask mask = static_mask(f_cam, flow_est, used_alpha);
  write_grid(out_path, to_grid(mask));

  std::string text;
  text += "alpha = " + format_g17(used_alpha) + "\n";
  text += "focal = " + format_g17(focal) + "\n";
  text += "pnp_inliers = " + std::to_string(pose->inlier_count) + "\n";
  text += "static_fraction = " +
          format_g17(double(mask.count_static()) / size.pixels()) + "\n";
  std::fputs(text.c_str(), stdout);
  return 0;
}

// --------------------------------------------------------------------------
// convert
// --------------------------------------------------------------------------

int cmd_convert(const std::string& in_path, const std::string& out_path) {
  auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (ends_with(in_path, ".pmg") && ends_with(out_path, ".csv")) {
    write_text(out_path, grid_to_csv(read_grid(in_path)));
  } else if (ends_with(in_path, ".csv") && ends_with(out_path, ".pmg")) {
    write_grid(out_path, grid_from_csv(detail::read_file(in_path), in_path));
  } else {
    throw IoError("convert: expects .pmg -> .csv or .csv -> .pmg");
  }
  log_debug("converted " + in_path + " -> " + out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynamic scene reconstruction from pairwise pointmaps"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "render a synthetic scene to disk");
  std::string synth_scene, synth_out;
  int synth_window = 9, synth_stride = 2;
  std::uint64_t synth_seed = 0;
  synth->add_option("--scene", synth_scene, "scene config file")->required();
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--window", synth_window, "temporal window size");
  synth->add_option("--stride", synth_stride, "gap stride inside the window");
  auto* synth_seed_opt = synth->add_option("--seed", synth_seed, "noise seed");

  // align
  auto* align = app.add_subcommand("align", "global pose/depth optimization");
  std::string align_config, align_in, align_out;
  int align_window = -1, align_stride = -1, align_iterations = -1;
  double align_alpha = 0;
  std::uint64_t align_seed = 0;
  align->add_option("--config", align_config, "run config file");
  align->add_option("--in", align_in, "input scene directory");
  align->add_option("--out", align_out, "output directory");
  auto* ao_window = align->add_option("--window", align_window);
  auto* ao_stride = align->add_option("--stride", align_stride);
  auto* ao_iters = align->add_option("--iterations", align_iterations);
  auto* ao_alpha = align->add_option("--alpha", align_alpha);
  auto* ao_seed = align->add_option("--seed", align_seed);

  // eval-pose
  auto* evalp = app.add_subcommand("eval-pose", "trajectory metrics (TUM files)");
  std::string ep_pred, ep_gt, ep_out;
  int ep_delta = 1;
  evalp->add_option("pred", ep_pred, "predicted trajectory")->required();
  evalp->add_option("gt", ep_gt, "ground-truth trajectory")->required();
  evalp->add_option("--delta", ep_delta, "RPE frame step");
  evalp->add_option("--out", ep_out, "also write the report here");

  // eval-depth
  auto* evald = app.add_subcommand("eval-depth", "depth metrics over directories");
  std::string ed_pred, ed_gt, ed_align = "scale_shift", ed_out;
  evald->add_option("pred", ed_pred, "predicted depth directory")->required();
  evald->add_option("gt", ed_gt, "ground-truth depth directory")->required();
  evald->add_option("--align", ed_align,
                    "scale_shift | scale | per_frame_median");
  evald->add_option("--out", ed_out, "also write the report here");

  // mask
  auto* mask = app.add_subcommand("mask", "static mask from a pair and a flow");
  std::string m_self, m_other, m_cself, m_cother, m_flow, m_out;
  double m_alpha = 0;
  std::uint64_t m_seed = 0;
  mask->add_option("--self", m_self)->required();
  mask->add_option("--other", m_other)->required();
  mask->add_option("--conf-self", m_cself)->required();
  mask->add_option("--conf-other", m_cother)->required();
  mask->add_option("--flow", m_flow)->required();
  mask->add_option("--out", m_out)->required();
  mask->add_option("--alpha", m_alpha, "static threshold (default 1% of diag)");
  mask->add_option("--seed", m_seed);

  // convert
  auto* convert = app.add_subcommand("convert", "convert .pmg <-> .csv");
  std::string c_in, c_out;
  convert->add_option("input", c_in)->required();
  convert->add_option("output", c_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed())
      return cmd_synth(synth_scene, synth_out, synth_window, synth_stride,
                       synth_seed, synth_seed_opt->count() > 0);
    if (align->parsed()) {
      RunConfig config =
          align_config.empty() ? RunConfig{} : read_run_config(align_config);
      if (!align_in.empty()) config.input = align_in;
      if (!align_out.empty()) config.output = align_out;
      if (ao_window->count()) config.window = align_window;
      if (ao_stride->count()) config.stride = align_stride;
      if (ao_iters->count()) config.schedule.iterations = align_iterations;
      if (ao_alpha->count()) config.alpha = align_alpha;
      if (ao_seed->count()) config.seed = align_seed;
      if (config.input.empty() || config.output.empty())
        throw IoError("align: --in and --out (or config input/output) required");
      return cmd_align(config);
    }
    if (evalp->parsed()) return cmd_eval_pose(ep_pred, ep_gt, ep_delta, ep_out);
    if (evald->parsed())
      return cmd_eval_depth(ed_pred, ed_gt, ed_align, ed_out);
    if (mask->parsed())
      return cmd_mask(m_self, m_other, m_cself, m_cother, m_flow, m_out,
                      m_alpha, m_seed);
    if (convert->parsed()) return cmd_convert(c_in, c_out);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
