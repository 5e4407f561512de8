#include <doctest.h>

#include <random>

#include "dynrec/evalkit.hpp"
#include "reference.hpp"

using namespace dynrec;

namespace {

Trajectory random_trajectory(std::uint64_t seed, int n, double spread = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0, 1);
  Trajectory traj;
  for (int i = 0; i < n; ++i) {
    TrajectoryEntry e;
    e.frame_id = i;
    const Eigen::Quaterniond q = Eigen::Quaterniond(gauss(rng), gauss(rng),
                                                    gauss(rng), gauss(rng))
                                     .normalized();
    e.world_from_cam.rotation = q.toRotationMatrix();
    e.world_from_cam.translation =
        spread * Eigen::Vector3d(gauss(rng), gauss(rng), gauss(rng));
    traj.push_back(e);
  }
  return traj;
}

Trajectory transformed(const Trajectory& traj, const Sim3& g) {
  Trajectory out = traj;
  for (auto& e : out) {
    e.world_from_cam.translation = g.apply(e.world_from_cam.translation);
    e.world_from_cam.rotation = g.rotation * e.world_from_cam.rotation;
  }
  return out;
}

Eigen::Matrix3d rz(double deg) {
  const double a = deg * M_PI / 180.0;
  Eigen::Matrix3d r;
  r << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
  return r;
}

}  // namespace

TEST_CASE("umeyama on identical trajectories is the identity") {
  const Trajectory t = random_trajectory(1, 20);
  const Sim3 s = umeyama_sim3(t, t);
  CHECK(std::abs(s.scale - 1.0) < 1e-9);
  CHECK((s.rotation - Eigen::Matrix3d::Identity()).norm() < 1e-9);
  CHECK(s.translation.norm() < 1e-9);
}

TEST_CASE("umeyama recovers an injected similarity") {
  const Trajectory gt = random_trajectory(2, 25);
  const Sim3 g(2.0, rz(90), {1, 2, 3});
  // pred = g(gt): aligning pred back onto gt must recover g^-1
  const Trajectory pred = transformed(gt, g);
  const Sim3 rec = umeyama_sim3(pred, gt);
  const Sim3 ginv = g.inverse();
  CHECK(std::abs(rec.scale - ginv.scale) < 1e-6);
  CHECK((rec.rotation - ginv.rotation).norm() < 1e-6);
  CHECK((rec.translation - ginv.translation).norm() < 1e-6);
}

TEST_CASE("umeyama rejects collinear positions") {
  Trajectory a, b;
  for (int i = 0; i < 3; ++i) {
    TrajectoryEntry e;
    e.frame_id = i;
    e.world_from_cam.translation = {double(i), 0, 0};
    a.push_back(e);
    e.world_from_cam.translation = {0, double(i), 0};
    b.push_back(e);
  }
  CHECK_THROWS_AS(umeyama_sim3(a, b), EvalError);
}

TEST_CASE("ate basics") {
  const Trajectory t = random_trajectory(3, 30);
  CHECK(ate(t, t) < 1e-12);

  Trajectory shifted = t;
  for (auto& e : shifted) e.world_from_cam.translation += Eigen::Vector3d(1, 0, 0);
  CHECK(ate(shifted, t) < 1e-9);  // absorbed by the alignment

  CHECK(ate(transformed(t, Sim3(0.5, rz(33), {-2, 1, 7})), t) < 1e-9);
}

TEST_CASE("ate of a single perturbed pose matches the reference") {
  Trajectory gt = random_trajectory(4, 30, 2.0);
  Trajectory pred = gt;
  pred[7].world_from_cam.translation += Eigen::Vector3d(0.3, 0, 0);
  CHECK(std::abs(ate(pred, gt) - reference::ate(pred, gt)) < 1e-9);
}

TEST_CASE("rpe is zero for identical and rigidly transformed trajectories") {
  const Trajectory t = random_trajectory(5, 15);
  const RpeResult self = rpe(t, t, 1);
  CHECK(self.trans < 1e-9);
  CHECK(self.rot_deg < 1e-7);

  const Sim3 g(1.0, rz(25), {4, -1, 2});
  const RpeResult rigid = rpe(transformed(t, g), t, 1);
  CHECK(rigid.trans < 1e-9);
  CHECK(rigid.rot_deg < 1e-6);
}

TEST_CASE("constructed 1 degree per-step drift shows up as rpe_rot") {
  Trajectory gt;
  std::mt19937_64 rng(6);
  std::normal_distribution<double> gauss(0, 1);
  for (int i = 0; i < 20; ++i) {
    TrajectoryEntry e;
    e.frame_id = i;
    e.world_from_cam.translation = {gauss(rng), gauss(rng), gauss(rng)};
    gt.push_back(e);
  }
  Trajectory pred = gt;
  for (int i = 0; i < 20; ++i)
    pred[size_t(i)].world_from_cam.rotation = rz(double(i));
  const RpeResult r = rpe(pred, gt, 1);
  CHECK(std::abs(r.rot_deg - 1.0) < 1e-6);
}

TEST_CASE("rpe matches the reference on random trajectories") {
  for (int trial = 0; trial < 5; ++trial) {
    const Trajectory gt = random_trajectory(100 + trial, 25, 1.5);
    const Trajectory pred = random_trajectory(200 + trial, 25, 1.5);
    for (int delta : {1, 3}) {
      const RpeResult mine = rpe(pred, gt, delta);
      const reference::RpeRef ref = reference::rpe(pred, gt, delta);
      CHECK(std::abs(mine.trans - ref.trans) < 1e-9);
      CHECK(std::abs(mine.rot_deg - ref.rot_deg) < 1e-9);
    }
  }
}

TEST_CASE("rpe rejects too-short trajectories") {
  const Trajectory t = random_trajectory(7, 5);
  CHECK_THROWS_AS(rpe(t, t, 5), std::invalid_argument);
}

TEST_CASE("trajectory subsampling applies count and stride") {
  const Trajectory t = random_trajectory(8, 100);
  const Trajectory s = subsample_trajectory(t, 30, 3);
  REQUIRE(s.size() == 30);
  CHECK(s[0].frame_id == 0);
  CHECK(s[1].frame_id == 3);
  CHECK(s[29].frame_id == 87);
}

namespace {

std::vector<DepthMap> random_depths(std::uint64_t seed, int frames,
                                    ImageSize size) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 8.0);
  std::vector<DepthMap> out;
  for (int f = 0; f < frames; ++f) {
    DepthMap d(size);
    for (auto& x : d.depth.data()) x = u(rng);
    out.push_back(d);
  }
  return out;
}

}  // namespace

TEST_CASE("align_depth recovers constructed scale and shift") {
  const std::vector<DepthMap> gt = random_depths(9, 3, {12, 16});

  SUBCASE("identity") {
    const AlignedDepth a = align_depth(gt, gt, DepthAlignMode::kScaleShift);
    CHECK(std::abs(a.scale - 1.0) < 1e-9);
    CHECK(std::abs(a.shift) < 1e-9);
  }

  SUBCASE("scale and shift") {
    std::vector<DepthMap> pred = gt;
    for (auto& f : pred)
      for (auto& d : f.depth.data()) d = 0.5 * d + 2.0;
    const AlignedDepth a = align_depth(pred, gt, DepthAlignMode::kScaleShift);
    CHECK(std::abs(a.scale - 2.0) < 1e-9);
    CHECK(std::abs(a.shift + 4.0) < 1e-9);
    const DepthEvalReport rep = depth_metrics(a.aligned, gt);
    CHECK(rep.abs_rel < 1e-12);
    CHECK(rep.delta_125 == 1.0);
  }

  SUBCASE("scale only") {
    std::vector<DepthMap> pred = gt;
    for (auto& f : pred)
      for (auto& d : f.depth.data()) d *= 1.3;
    const AlignedDepth a = align_depth(pred, gt, DepthAlignMode::kScale);
    CHECK(std::abs(a.scale - 1.0 / 1.3) < 1e-9);
    CHECK(depth_metrics(a.aligned, gt).abs_rel < 1e-12);
  }

  SUBCASE("per frame median") {
    std::vector<DepthMap> pred = gt;
    for (size_t f = 0; f < pred.size(); ++f)
      for (auto& d : pred[f].depth.data()) d *= (1.0 + 0.5 * double(f));
    const AlignedDepth a =
        align_depth(pred, gt, DepthAlignMode::kPerFrameMedian);
    REQUIRE(a.per_frame_scales.size() == pred.size());
    for (size_t f = 0; f < pred.size(); ++f)
      CHECK(std::abs(a.per_frame_scales[f] - 1.0 / (1.0 + 0.5 * double(f))) <
            1e-9);
    CHECK(depth_metrics(a.aligned, gt).abs_rel < 1e-12);
  }
}

TEST_CASE("align_depth fails without valid overlap") {
  std::vector<DepthMap> gt = random_depths(10, 1, {4, 4});
  std::vector<DepthMap> pred = gt;
  for (auto& v : pred[0].valid.data()) v = 0;
  CHECK_THROWS_AS(align_depth(pred, gt, DepthAlignMode::kScaleShift),
                  EvalError);
}

TEST_CASE("depth metric arithmetic") {
  const std::vector<DepthMap> gt = random_depths(11, 2, {8, 8});

  SUBCASE("uniform 1.3x scale without alignment") {
    std::vector<DepthMap> pred = gt;
    for (auto& f : pred)
      for (auto& d : f.depth.data()) d *= 1.3;
    const DepthEvalReport rep = depth_metrics(pred, gt);
    CHECK(std::abs(rep.abs_rel - 0.3) < 1e-9);
    CHECK(rep.delta_125 == 0.0);  // ratio 1.3 >= 1.25 everywhere
  }

  SUBCASE("half the pixels at ratio 1.2, half at 1.3") {
    std::vector<DepthMap> pred = gt;
    bool odd = false;
    for (auto& f : pred)
      for (auto& d : f.depth.data()) {
        d *= odd ? 1.2 : 1.3;
        odd = !odd;
      }
    const DepthEvalReport rep = depth_metrics(pred, gt);
    CHECK(std::abs(rep.delta_125 - 0.5) < 1e-12);
  }

  SUBCASE("matches the reference implementation") {
    const std::vector<DepthMap> pred = random_depths(12, 2, {8, 8});
    const DepthEvalReport rep = depth_metrics(pred, gt);
    CHECK(std::abs(rep.abs_rel - reference::abs_rel(pred, gt)) < 1e-12);
    CHECK(std::abs(rep.delta_125 - reference::delta_125(pred, gt)) < 1e-12);
  }
}

TEST_CASE("depth metrics after scale alignment are scale invariant") {
  const std::vector<DepthMap> gt = random_depths(13, 2, {10, 12});
  std::vector<DepthMap> pred = random_depths(14, 2, {10, 12});
  const AlignedDepth base = align_depth(pred, gt, DepthAlignMode::kScale);
  const DepthEvalReport rep_base = depth_metrics(base.aligned, gt);
  for (auto& f : pred)
    for (auto& d : f.depth.data()) d *= 7.3;
  const AlignedDepth scaled = align_depth(pred, gt, DepthAlignMode::kScale);
  const DepthEvalReport rep_scaled = depth_metrics(scaled.aligned, gt);
  CHECK(std::abs(rep_base.abs_rel - rep_scaled.abs_rel) < 1e-9);
  CHECK(std::abs(rep_base.delta_125 - rep_scaled.delta_125) < 1e-12);
}

TEST_CASE("ate is invariant under any global Sim3 on predictions") {
  const Trajectory gt = random_trajectory(15, 20, 2.0);
  Trajectory pred = random_trajectory(16, 20, 2.0);
  const double base = ate(pred, gt);
  std::mt19937_64 rng(17);
  std::normal_distribution<double> gauss(0, 1);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::Quaterniond q = Eigen::Quaterniond(gauss(rng), gauss(rng),
                                                    gauss(rng), gauss(rng))
                                     .normalized();
    const Sim3 g(std::exp(gauss(rng)), q.toRotationMatrix(),
                 {gauss(rng), gauss(rng), gauss(rng)});
    CHECK(std::abs(ate(transformed(pred, g), gt) - base) < 1e-9);
  }
}
