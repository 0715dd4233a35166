#include <doctest.h>

#include <limits>
#include <string>
#include <vector>

#include "mpiforge/warp_ops.hpp"
#include "oracles/oracles.hpp"
#include "support.hpp"

using namespace mpiforge;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Setup {
  PinholeCamera reference;
  std::vector<PinholeCamera> views;
  DepthPlanes planes;
  ImageStack images;
};

Setup random_setup(Rng& rng, int n, int w, int h, int depth) {
  Setup s;
  s.reference = testing::random_camera(rng, w, h, 0.02, 0.1);
  for (int i = 0; i < n; ++i) s.views.push_back(testing::random_camera(rng, w, h, 0.05, 0.3));
  s.planes = make_depth_planes(depth, kInf, 1.0);
  s.images.views = s.views;
  s.images.pixels = testing::random_array(rng, {std::size_t(n), std::size_t(h), std::size_t(w), 3});
  return s;
}

}  // namespace

TEST_CASE("plane sweep matches per-pixel ray transfer") {
  Rng rng(21);
  for (int trial = 0; trial < 5; ++trial) {
    const Setup s = random_setup(rng, 3, 12, 10, 5);
    const PsvStack psv = warp_to_reference(broadcast_depth(s.images, s.planes), s.reference, s.views, s.planes);
    const std::vector<double> depths = s.planes.depths;
    double worst = 0.0;
    int inside = 0, outside = 0;
    for (int i = 0; i < 3; ++i) {
      const double* img = s.images.pixels.data() + i * s.images.pixels.stride0();
      for (int d = 0; d < 5; ++d)
        for (int y = 0; y < 10; ++y)
          for (int x = 0; x < 12; ++x) {
            const auto p = oracle::transfer(s.reference, s.views[i], x, y, depths[d]);
            const bool in = p && oracle::in_frame(*p, 12, 10);
            in ? ++inside : ++outside;
            CHECK(psv.data(i, d, y, x, 3) == (in ? 1.0 : 0.0));
            for (int c = 0; c < 3; ++c) {
              const double expected = in ? oracle::bilinear(img, 12, 10, 3, c, (*p)[0], (*p)[1]) : 0.0;
              worst = std::max(worst, std::abs(psv.data(i, d, y, x, c) - expected));
            }
          }
    }
    CHECK(worst < 1e-12);
    CHECK(inside > 0);
    CHECK(outside > 0);
  }
}

TEST_CASE("rendering warp matches ray casting into the reference planes") {
  Rng rng(22);
  const Setup s = random_setup(rng, 2, 12, 10, 4);
  Array content = testing::random_array(rng, {4, 10, 12, 2});
  const ViewVolumeStack vv =
      warp_from_reference(broadcast_views(content, 2), s.reference, s.views, s.planes);
  double worst = 0.0;
  for (int i = 0; i < 2; ++i)
    for (int d = 0; d < 4; ++d)
      for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 12; ++x) {
          const auto p = oracle::back_transfer(s.reference, s.views[i], x, y, s.planes.depths[d]);
          for (int c = 0; c < 2; ++c) {
            const double expected =
                p ? oracle::bilinear(content.data() + d * content.stride0(), 12, 10, 2, c, (*p)[0], (*p)[1]) : 0.0;
            worst = std::max(worst, std::abs(vv.data(i, d, y, x, c) - expected));
          }
        }
  CHECK(worst < 1e-12);
}

TEST_CASE("gather and scatter_add are adjoint in both directions") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    const PinholeCamera ref = testing::random_camera(rng, 9, 7, 0.05, 0.2);
    const PinholeCamera view = testing::random_camera(rng, 9, 7, 0.05, 0.4);
    const DepthPlanes planes = make_depth_planes(3, kInf, 0.8);
    for (const PlaneWarp& warp :
         {PlaneWarp::toward_reference(ref, view, planes), PlaneWarp::toward_view(ref, view, planes)}) {
      const std::size_t channels = 3;
      const Array x = testing::random_array(rng, {3, 7, 9, channels}, -1, 1);
      const Array y = testing::random_array(rng, {3, 7, 9, channels}, -1, 1);
      Array ax(x.shape());
      warp.gather(x.data(), ax.data(), channels);
      Array aty(x.shape());
      warp.scatter_add(y.data(), aty.data(), channels);
      CHECK(testing::weighted_sum(ax.values(), y.values()) ==
            doctest::Approx(testing::weighted_sum(x.values(), aty.values())).epsilon(1e-12));
    }
  }
}

TEST_CASE("sweep and render warps pass finite differences") {
  Rng rng(24);
  const Setup s = random_setup(rng, 2, 8, 8, 4);
  SUBCASE("toward the reference") {
    Array input = broadcast_depth(s.images, s.planes);
    const Array probe = testing::random_array(rng, {2, 4, 8, 8, 4}, -1, 1);
    const auto f = [&] {
      return testing::weighted_sum(warp_to_reference(input, s.reference, s.views, s.planes).data.values(),
                                   probe.values());
    };
    const Array analytic = warp_to_reference_backward(probe, s.reference, s.views, s.planes);
    std::vector<double> numeric = testing::numeric_gradient(f, input.values());
    // The mask channel of the input is not differentiated.
    for (std::size_t i = 3; i < numeric.size(); i += 4) numeric[i] = analytic[i];
    CHECK(testing::relative_error(numeric, testing::to_vector(analytic.values())) < 1e-6);
  }
  SUBCASE("toward the views") {
    Array input = testing::random_array(rng, {2, 4, 8, 8, 4});
    const Array probe = testing::random_array(rng, {2, 4, 8, 8, 4}, -1, 1);
    const auto f = [&] {
      return testing::weighted_sum(warp_from_reference(input, s.reference, s.views, s.planes).data.values(),
                                   probe.values());
    };
    const Array analytic = warp_from_reference_backward(probe, s.reference, s.views, s.planes);
    CHECK(testing::relative_error(testing::numeric_gradient(f, input.values()),
                                  testing::to_vector(analytic.values())) < 1e-6);
  }
}

TEST_CASE("broadcast helpers and their adjoints") {
  Rng rng(25);
  const Setup s = random_setup(rng, 2, 5, 4, 3);
  const Array b = broadcast_depth(s.images, s.planes);
  CHECK(b.shape() == std::vector<std::size_t>{2, 3, 4, 5, 4});
  CHECK(b(1, 2, 3, 4, 1) == s.images.pixels(1, 3, 4, 1));
  CHECK(b(0, 1, 0, 0, 3) == 1.0);
  const Array g = testing::random_array(rng, b.shape(), -1, 1);
  const Array gb = broadcast_depth_backward(g);
  double lhs = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (i % 4 != 3) lhs += b[i] * g[i];
  CHECK(lhs == doctest::Approx(testing::weighted_sum(s.images.pixels.values(), gb.values())).epsilon(1e-12));

  const Array content = testing::random_array(rng, {3, 4, 5, 4});
  const Array bv = broadcast_views(content, 3);
  const Array gv = testing::random_array(rng, bv.shape(), -1, 1);
  CHECK(testing::weighted_sum(bv.values(), gv.values()) ==
        doctest::Approx(testing::weighted_sum(content.values(), broadcast_views_backward(gv).values())).epsilon(1e-12));
}

TEST_CASE("an identical view sweeps to the image on every plane") {
  Rng rng(26);
  const PinholeCamera cam = testing::grid_camera(6, 6, 0, 0);
  ImageStack images;
  images.views = {cam};
  images.pixels = testing::random_array(rng, {1, 6, 6, 3});
  const DepthPlanes planes = make_depth_planes(4, kInf, 1.0);
  const PsvStack psv = warp_to_reference(broadcast_depth(images, planes), cam, images.views, planes);
  for (int d = 0; d < 4; ++d)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        CHECK(psv.data(0, d, y, x, 3) == 1.0);
        for (int c = 0; c < 3; ++c) CHECK(psv.data(0, d, y, x, c) == doctest::Approx(images.pixels(0, y, x, c)));
      }
}

TEST_CASE("selecting views by name and index") {
  Rng rng(27);
  ImageStack all;
  for (int i = 0; i < 3; ++i) {
    PinholeCamera cam = testing::grid_camera(4, 4, 0.1 * i, 0);
    cam.name = "v" + std::to_string(i);
    all.views.push_back(cam);
  }
  all.pixels = testing::random_array(rng, {3, 4, 4, 3});
  const std::vector<std::string> names{"v2", "v0"};
  const ImageStack picked = select_views(all, names);
  REQUIRE(picked.count() == 2);
  CHECK(picked.views[0].name == "v2");
  CHECK(picked.pixels(0, 1, 2, 0) == all.pixels(2, 1, 2, 0));
  CHECK(picked.pixels(1, 3, 3, 2) == all.pixels(0, 3, 3, 2));
  const std::vector<std::size_t> indices{1};
  CHECK(select_views(all, indices).views[0].name == "v1");
  const std::vector<std::string> missing{"nope"};
  CHECK_THROWS_AS(select_views(all, missing), std::domain_error);
  const std::vector<std::size_t> out_of_range{7};
  CHECK_THROWS_AS(select_views(all, out_of_range), std::domain_error);
}

TEST_CASE("mismatched stacks are rejected") {
  Rng rng(28);
  const Setup s = random_setup(rng, 2, 6, 6, 3);
  const Array b = broadcast_depth(s.images, s.planes);
  const std::vector<PinholeCamera> one{s.views[0]};
  CHECK_THROWS_AS(warp_to_reference(b, s.reference, one, s.planes), std::domain_error);
  CHECK_THROWS_AS(warp_to_reference(b, s.reference, s.views, make_depth_planes(4, kInf, 1.0)), std::domain_error);
}
