#include <doctest.h>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "mpiforge/metrics.hpp"
#include "mpiforge/refiner.hpp"
#include "mpiforge/scene.hpp"
#include "oracles/oracles.hpp"
#include "support.hpp"

using namespace mpiforge;

namespace {

// Colour seen along one ray: the nearest layer it hits inside its rectangle.
std::array<double, 3> cast(const SyntheticScene& scene, const PinholeCamera& cam, double u, double v) {
  const oracle::Vec3 dir = oracle::ray_direction(cam, u, v);
  std::array<double, 3> rgb{0, 0, 0};
  double nearest = std::numeric_limits<double>::infinity();
  for (const auto& layer : scene.layers) {
    if (layer.at_infinity()) {
      if (std::isinf(nearest))
        rgb = layer.color(kBackgroundTextureScale * dir[0] / dir[2], kBackgroundTextureScale * dir[1] / dir[2]);
      continue;
    }
    const double t = (layer.depth - cam.translation.z()) / dir[2];
    const double x = cam.translation.x() + t * dir[0], y = cam.translation.y() + t * dir[1];
    if (t > 0 && t < nearest && x >= layer.x_min && x <= layer.x_max && y >= layer.y_min && y <= layer.y_max) {
      nearest = t;
      rgb = layer.color(x, y);
    }
  }
  return rgb;
}

double masked_psnr(const Array& pred, const Array& target, const Array& edge_distance, double min_distance) {
  double se = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < edge_distance.size(); ++p) {
    if (edge_distance[p] <= min_distance) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = pred[p * 3 + c] - target[p * 3 + c];
      se += d * d;
      ++count;
    }
  }
  return 10.0 * std::log10(static_cast<double>(count) / se);
}

}  // namespace

TEST_CASE("scenes are deterministic in their seed") {
  SceneSpec spec;
  spec.layers = 3;
  const SyntheticScene a = generate_scene(5, spec), b = generate_scene(5, spec), c = generate_scene(6, spec);
  REQUIRE(a.layers.size() == 3);
  CHECK(a.layers[1].depth == b.layers[1].depth);
  CHECK(a.layers[2].x_min == b.layers[2].x_min);
  CHECK(a.layers[1].depth != c.layers[1].depth);
  CHECK(render_analytic(a, a.rig[4]) == render_analytic(b, b.rig[4]));
}

TEST_CASE("scene layers sit in the requested depth range, back to front") {
  SceneSpec spec;
  spec.layers = 4;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SyntheticScene s = generate_scene(seed, spec);
    CHECK(s.layers[0].at_infinity());
    for (std::size_t l = 1; l < s.layers.size(); ++l) {
      CHECK(s.layers[l].depth >= spec.z_near * (1 - 1e-12));
      CHECK(s.layers[l].depth <= spec.z_near * spec.depth_ratio * (1 + 1e-12));
      CHECK(s.layers[l].depth <= s.layers[l - 1].depth);
      CHECK(s.layers[l].x_min < s.layers[l].x_max);
    }
    for (const auto& layer : s.layers)
      for (double x : {-1.0, 0.0, 0.7})
        for (double c : layer.color(x, 0.3 * x)) {
          CHECK(c >= 0.0);
          CHECK(c <= 1.0);
        }
  }
}

TEST_CASE("grid rig layout and names") {
  SceneSpec spec;
  spec.width = 16;
  spec.height = 12;
  const auto rig = make_grid_rig(spec);
  REQUIRE(rig.size() == 9);
  CHECK(rig[0].name == "c00");
  CHECK(rig[5].name == "c12");
  CHECK(rig[8].name == "c22");
  CHECK((rig[4].translation).norm() == 0.0);
  CHECK(rig[5].translation.x() == doctest::Approx(0.2));
  CHECK(rig[7].translation.y() == doctest::Approx(0.2));
  CHECK(rig[0].intrinsics(0, 0) == 16.0);
  CHECK(rig[0].intrinsics(0, 2) == 7.5);
  CHECK(rig[0].intrinsics(1, 2) == 5.5);
  for (const auto& cam : rig) CHECK_NOTHROW(validate_camera(cam));
}

TEST_CASE("single-sample rendering matches direct ray casting") {
  SceneSpec spec;
  spec.width = 20;
  spec.height = 16;
  spec.layers = 3;
  spec.antialias = 1;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const SyntheticScene s = generate_scene(seed, spec);
    for (const auto& cam : {s.rig[0], s.rig[4], s.rig[7]}) {
      const Array img = render_analytic(s, cam);
      double worst = 0.0;
      for (int v = 0; v < 16; ++v)
        for (int u = 0; u < 20; ++u) {
          const auto rgb = cast(s, cam, u, v);
          for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(img(v, u, c) - rgb[c]));
        }
      CHECK(worst < 1e-12);
    }
  }
}

TEST_CASE("supersampling averages shifted single-sample renders") {
  SceneSpec spec;
  spec.width = 16;
  spec.height = 16;
  spec.antialias = 2;
  const SyntheticScene s = generate_scene(3, spec);
  const Array fine = render_analytic(s, s.rig[2]);
  SyntheticScene single = s;
  single.spec.antialias = 1;
  Array average({16, 16, 3});
  for (double dx : {-0.25, 0.25})
    for (double dy : {-0.25, 0.25}) {
      PinholeCamera cam = s.rig[2];
      cam.intrinsics(0, 2) -= dx;
      cam.intrinsics(1, 2) -= dy;
      const Array img = render_analytic(single, cam);
      for (std::size_t i = 0; i < img.size(); ++i) average[i] += img[i] / 4;
    }
  CHECK(testing::max_abs_diff(fine.values(), average.values()) < 1e-12);
}

TEST_CASE("ground-truth opacities are coverage fractions on the layer planes") {
  SceneSpec spec;
  spec.layers = 3;
  spec.snap_planes = 8;
  const SyntheticScene s = generate_scene(4, spec);
  const DepthPlanes planes = scene_planes(spec);
  const PinholeCamera ref = s.rig[4];
  const Mpi mpi = ground_truth_mpi(s, planes, ref);
  const AlphaVolume alpha = ground_truth_alpha(s, planes, ref);
  const std::size_t hw = 32 * 32;
  int partial = 0, occupied_planes = 0;
  for (std::size_t d = 0; d < planes.count(); ++d) {
    bool any = false;
    for (std::size_t p = 0; p < hw; ++p) {
      const double a = mpi.data[(d * hw + p) * 4 + 3];
      CHECK(a >= 0.0);
      CHECK(a <= 1.0);
      if (a > 0.0) any = true;
      if (a > 0.0 && a < 1.0) ++partial;
      // Coverage is a multiple of one sixteenth with 4 x 4 samples.
      CHECK(a * 16 == doctest::Approx(std::round(a * 16)));
      const double logit = alpha.logits[d * hw + p];
      CHECK(std::abs(logit) <= kSolidLogit);
      if (a > 0.0 && a < 1.0) CHECK(sigmoid(logit) == doctest::Approx(a).epsilon(1e-9));
    }
    if (any) ++occupied_planes;
  }
  CHECK(occupied_planes == 3);
  CHECK(partial > 0);
  for (std::size_t p = 0; p < hw; ++p) CHECK(alpha.logits[p] == kSolidLogit);

  SceneSpec loose = spec;
  loose.snap_planes = 0;
  CHECK_THROWS_AS(ground_truth_mpi(generate_scene(4, loose), planes, ref), std::domain_error);
  PinholeCamera tilted = ref;
  tilted.rotation = Eigen::AngleAxisd(0.1, Eigen::Vector3d::UnitY()).toRotationMatrix();
  CHECK_THROWS_AS(ground_truth_mpi(s, planes, tilted), std::domain_error);
  SceneSpec crowded = spec;
  crowded.layers = 9;
  CHECK_THROWS_AS(validate_scene_spec(crowded), std::domain_error);
}

TEST_CASE("ground-truth MPI reproduces the reference view") {
  SceneSpec spec;
  spec.layers = 3;
  spec.snap_planes = 8;
  const SyntheticScene s = generate_scene(8, spec);
  const Mpi mpi = ground_truth_mpi(s, scene_planes(spec), s.rig[4]);
  const Array rendered = over_background(render_novel_view(mpi, s.rig[4]), {0.5, 0.5, 0.5});
  CHECK(psnr(rendered, render_analytic(s, s.rig[4])) > 40.0);
}

TEST_CASE("colourised ground truth renders held-out views") {
  SceneSpec spec;
  spec.layers = 3;
  spec.snap_planes = 8;
  const SyntheticScene s = generate_scene(9, spec);
  const RigCapture cap = capture_scene(s);
  CHECK(cap.rows == 3);
  CHECK(cap.views.count() == 9);
  const std::vector<std::string> names{"c00", "c02", "c20", "c22"};
  const ImageStack inputs = select_views(cap.views, names);
  const PinholeCamera ref = average_reference_camera(inputs.views);
  const DepthPlanes planes = scene_planes(spec);
  const Mpi mpi = colorize_mpi(ground_truth_alpha(s, planes, ref), build_psv(inputs, ref, planes));
  for (const auto& cam : {s.rig[1], s.rig[4], s.rig[5]}) {
    const Array pred = over_background(render_novel_view(mpi, cam), {0.5, 0.5, 0.5});
    CHECK(masked_psnr(pred, render_analytic(s, cam), layer_edge_distance(s, cam), 2.0) > 30.0);
  }
}

TEST_CASE("edge distance is measured in pixels") {
  SceneSpec spec;
  spec.layers = 2;
  spec.antialias = 1;
  SyntheticScene s = generate_scene(1, spec);
  // Replace the foreground with a known rectangle at depth 2.
  TexturedLayer& l = s.layers[1];
  l.depth = 2.0;
  l.x_min = -0.5;
  l.x_max = 0.5;
  l.y_min = -0.5;
  l.y_max = 0.5;
  const PinholeCamera cam = s.rig[4];
  const Array dist = layer_edge_distance(s, cam);
  // Pixel 15 is half a pixel off the optical axis, so its ray meets the
  // layer 0.5 - 1/32 m from the nearest edge; at focal 32 and depth 2 that is 7.5 px.
  const double expected = (0.5 - 1.0 / 32) * 32 / 2.0;
  CHECK(dist(15, 15) == doctest::Approx(expected));
  SyntheticScene empty = s;
  empty.layers.resize(1);
  const Array none = layer_edge_distance(empty, cam);
  for (double v : none.values()) CHECK(std::isinf(v));
}
