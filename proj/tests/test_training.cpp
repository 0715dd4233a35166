#include <doctest.h>

#include <algorithm>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include "mpiforge/training.hpp"
#include "oracles/oracles.hpp"
#include "support.hpp"

using namespace mpiforge;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

TrainConfig small_config() {
  TrainConfig c;
  c.total_iterations = 4;
  c.views_min = 2;
  c.views_max = 3;
  c.planes_min = 8;
  c.planes_max = 8;
  c.seed = 3;
  c.learning_rate = 1e-3;
  c.scene.width = 16;
  c.scene.height = 16;
  return c;
}

std::vector<double> flatten(NetworkParams p) {
  std::vector<double> out;
  for (const auto& t : parameter_tensors(p)) out.insert(out.end(), t.values.begin(), t.values.end());
  return out;
}

// Smallest plane count whose adjacent planes move at most one pixel at the
// image corners and centre, searched directly.
int brute_force_planes(const PinholeCamera& ref, const std::vector<PinholeCamera>& views, double z_near) {
  for (int d = 2;; ++d) {
    double worst = 0.0;
    for (int k = 0; k + 1 < d; ++k) {
      const double za = k == 0 ? kInf : 1.0 / (k / (d - 1.0) / z_near);
      const double zb = 1.0 / ((k + 1) / (d - 1.0) / z_near);
      for (const auto& view : views)
        for (auto [u, v] : {std::pair{0.0, 0.0}, {ref.width - 1.0, 0.0}, {0.0, ref.height - 1.0},
                            {ref.width - 1.0, ref.height - 1.0}, {(ref.width - 1) / 2.0, (ref.height - 1) / 2.0}}) {
          const auto a = oracle::transfer(ref, view, u, v, za);
          const auto b = oracle::transfer(ref, view, u, v, zb);
          worst = std::max(worst, std::hypot((*a)[0] - (*b)[0], (*a)[1] - (*b)[1]));
        }
    }
    if (worst <= 1.0 + 1e-9) return d;
  }
}

}  // namespace

TEST_CASE("default curriculum grows the refinement steps") {
  TrainConfig c;
  c.total_iterations = 2000;
  const auto steps = default_curriculum(2000);
  REQUIRE(steps.size() == 3);
  CHECK(steps[1].iteration == 200);
  CHECK(steps[2].iteration == 400);
  CHECK(curriculum_iterations(c, 0) == 2);
  CHECK(curriculum_iterations(c, 199) == 2);
  CHECK(curriculum_iterations(c, 200) == 3);
  CHECK(curriculum_iterations(c, 399) == 3);
  CHECK(curriculum_iterations(c, 1999) == 4);
  c.curriculum = {{0, 1}, {5, 6}};
  CHECK(curriculum_iterations(c, 4) == 1);
  CHECK(curriculum_iterations(c, 5) == 6);
}

TEST_CASE("training configuration validation") {
  CHECK_NOTHROW(validate_train_config(small_config()));
  TrainConfig c = small_config();
  c.curriculum = {{3, 2}};
  CHECK_THROWS_AS(validate_train_config(c), std::domain_error);
  c = small_config();
  c.curriculum = {{0, 3}, {5, 2}};
  CHECK_THROWS_AS(validate_train_config(c), std::domain_error);
  c = small_config();
  c.planes_min = 9;
  c.planes_max = 11;
  CHECK_THROWS_AS(validate_train_config(c), std::domain_error);
  c = small_config();
  c.scene.width = 18;
  CHECK_THROWS_AS(validate_train_config(c), std::domain_error);
  c = small_config();
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(validate_train_config(c), std::domain_error);
}

TEST_CASE("batches split a three-by-three sub-rig into inputs and targets") {
  TrainConfig c = small_config();
  c.views_max = 5;
  c.planes_min = 8;
  c.planes_max = 14;
  SceneSpec spec = c.scene;
  spec.grid = 4;
  const std::vector<RigCapture> pool{capture_scene(generate_scene(1, spec))};
  Rng rng(81);
  std::set<int> view_counts, plane_counts;
  for (int trial = 0; trial < 40; ++trial) {
    const Batch b = sample_batch(rng, c, pool);
    const int n = static_cast<int>(b.inputs.count());
    view_counts.insert(n);
    CHECK(n >= 2);
    CHECK(n <= 5);
    CHECK(b.inputs.count() + b.targets.count() == 9);
    std::set<std::string> names;
    std::set<int> rows, cols;
    for (const auto* stack : {&b.inputs, &b.targets})
      for (const auto& v : stack->views) {
        names.insert(v.name);
        rows.insert(v.name[1] - '0');
        cols.insert(v.name[2] - '0');
      }
    CHECK(names.size() == 9);
    CHECK(rows.size() == 3);
    CHECK(*rows.rbegin() - *rows.begin() == 2);
    CHECK(*cols.rbegin() - *cols.begin() == 2);
    const int d = static_cast<int>(b.planes.count());
    plane_counts.insert(d);
    CHECK(d % 4 == 0);
    CHECK(d >= 8);
    CHECK(d <= 14);
    CHECK(std::isinf(b.planes.depths.front()));
    CHECK(b.planes.depths.back() == doctest::Approx(c.z_near));
    const PinholeCamera ref = average_reference_camera(b.inputs.views);
    CHECK(b.reference.translation == ref.translation);
    for (std::size_t i = 0; i < b.inputs.count(); ++i) {
      const std::size_t idx = std::stoul(b.inputs.views[i].name.substr(1, 1)) * 4 +
                              std::stoul(b.inputs.views[i].name.substr(2, 1));
      CHECK(b.inputs.pixels(i, 5, 7, 1) == pool[0].views.pixels(idx, 5, 7, 1));
    }
  }
  CHECK(view_counts.size() == 4);
  CHECK(plane_counts == std::set<int>{8, 12});

  Rng a(82), b(82);
  const Batch x = sample_batch(a, c, pool), y = sample_batch(b, c, pool);
  CHECK(x.inputs.pixels == y.inputs.pixels);
  CHECK(x.planes.depths == y.planes.depths);
}

TEST_CASE("batches refuse plane spacings above one pixel") {
  TrainConfig c = small_config();
  c.scene.baseline = 2.0;
  c.views_min = 3;
  const std::vector<RigCapture> pool{capture_scene(generate_scene(2, c.scene))};
  Rng rng(83);
  try {
    (void)sample_batch(rng, c, pool);
    FAIL("expected a plane-count error");
  } catch (const std::domain_error& e) {
    CHECK(std::string(e.what()).find("need at least D =") != std::string::npos);
  }
}

TEST_CASE("minimum plane count matches a direct search") {
  Rng rng(84);
  for (int trial = 0; trial < 5; ++trial) {
    const PinholeCamera ref = testing::grid_camera(16, 16, 0, 0);
    std::vector<PinholeCamera> views{testing::random_camera(rng, 16, 16, 0.01, 0.3),
                                     testing::random_camera(rng, 16, 16, 0.01, 0.3)};
    for (auto& v : views) v.rotation.setIdentity();
    CHECK(minimum_plane_count(ref, views, kInf, 1.5) == brute_force_planes(ref, views, 1.5));
  }
}

TEST_CASE("render loss is one minus mean ssim and its gradient passes finite differences") {
  SceneSpec spec;
  spec.width = 8;
  spec.height = 8;
  const RigCapture cap = capture_scene(generate_scene(3, spec));
  const std::vector<std::size_t> target_idx{0, 5};
  const ImageStack targets = select_views(cap.views, target_idx);
  Rng rng(85);
  Mpi mpi{testing::random_array(rng, {4, 8, 8, 4}), make_depth_planes(4, kInf, 1.5), cap.views.views[4]};
  const std::array<double, 3> bg{0.5, 0.5, 0.5};
  const RenderLoss rl = render_loss(mpi, targets, bg, true);
  double mean_ssim = 0.0;
  for (std::size_t i = 0; i < 2; ++i) {
    const Array pred = over_background(render_novel_view(mpi, targets.views[i]), bg);
    Array t({8, 8, 3});
    std::copy_n(targets.pixels.data() + i * t.size(), t.size(), t.data());
    mean_ssim += ssim(pred, t) / 2;
  }
  CHECK(rl.loss == doctest::Approx(1.0 - mean_ssim).epsilon(1e-12));
  CHECK(rl.mean_metrics.ssim == doctest::Approx(mean_ssim));
  const auto f = [&] { return render_loss(mpi, targets, bg, false).loss; };
  CHECK(testing::relative_error(testing::numeric_gradient(f, mpi.data.values()),
                                testing::to_vector(rl.grad_mpi.values())) < 1e-6);
}

TEST_CASE("end-to-end loss gradient passes finite differences") {
  TrainConfig c = small_config();
  c.scene.width = 8;
  c.scene.height = 8;
  c.planes_min = c.planes_max = 4;
  const std::vector<RigCapture> pool{capture_scene(generate_scene(4, c.scene))};
  Rng rng(86);
  const Batch batch = sample_batch(rng, c, pool);
  NetworkParams params = init_params(5);
  NetworkParams grads = zeros_like(params);
  const StepMetrics m = loss_and_gradient(params, batch, c, 2, grads);
  CHECK(m.iterations == 2);
  CHECK(m.loss > 0.0);
  const auto f = [&] {
    NetworkParams scratch = zeros_like(params);
    return loss_and_gradient(params, batch, c, 2, scratch).loss;
  };
  std::vector<double> numeric, analytic;
  auto tensors = parameter_tensors(params);
  auto grad_tensors = parameter_tensors(grads);
  for (std::size_t t = 0; t < tensors.size(); t += 3) {
    const std::size_t i = static_cast<std::size_t>(rng.uniform_int(0, int(tensors[t].values.size()) - 1));
    numeric.push_back(testing::numeric_gradient(f, tensors[t].values.subspan(i, 1))[0]);
    analytic.push_back(grad_tensors[t].values[i]);
  }
  CHECK(testing::relative_error(numeric, analytic) < 1e-3);
}

TEST_CASE("training is reproducible and resumable") {
  const TrainConfig c = small_config();
  const std::vector<RigCapture> pool = make_test_pool(c.scene, 2, 9);
  TrainState a = init_train_state(c), b = init_train_state(c);
  std::vector<StepMetrics> log;
  train(a, c, pool, [&](const StepMetrics& m) { log.push_back(m); });
  REQUIRE(log.size() == 4);
  CHECK(log[3].iteration == 3);
  CHECK(a.iteration == 4);
  CHECK(a.adam.step == 4);

  TrainConfig half = c;
  half.total_iterations = 2;
  half.curriculum = effective_curriculum(c);
  TrainConfig full = c;
  full.curriculum = half.curriculum;
  train(b, half, pool);
  CHECK(b.iteration == 2);
  train(b, full, pool);
  CHECK(flatten(a.params) == flatten(b.params));
  CHECK(a.rng.state() == b.rng.state());
  CHECK(flatten(a.params) != flatten(init_params(c.seed)));
}

TEST_CASE("procedural training draws fresh scenes deterministically") {
  TrainConfig c = small_config();
  c.total_iterations = 2;
  TrainState a = init_train_state(c), b = init_train_state(c);
  std::vector<double> la, lb;
  train(a, c, {}, [&](const StepMetrics& m) { la.push_back(m.loss); });
  train(b, c, {}, [&](const StepMetrics& m) { lb.push_back(m.loss); });
  CHECK(la == lb);
  CHECK(flatten(a.params) == flatten(b.params));
}

TEST_CASE("test pools are deterministic and distinct per seed") {
  SceneSpec spec;
  spec.width = 8;
  spec.height = 8;
  const auto a = make_test_pool(spec, 2, 7), b = make_test_pool(spec, 2, 7), c = make_test_pool(spec, 2, 8);
  CHECK(a[1].views.pixels == b[1].views.pixels);
  CHECK(a[0].views.pixels != a[1].views.pixels);
  CHECK(a[0].views.pixels != c[0].views.pixels);
}

TEST_CASE("evaluation reads every K off one refinement pass") {
  SceneSpec spec;
  spec.width = 16;
  spec.height = 16;
  const auto pool = make_test_pool(spec, 2, 10);
  const NetworkParams params = init_params(11);
  EvalProtocol protocol;
  const std::vector<int> ks{2, 1};
  const auto rows = evaluate(params, pool, ks, protocol);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].iterations == 2);
  for (std::size_t j = 0; j < 2; ++j) {
    double psnr_sum = 0.0, ssim_sum = 0.0;
    for (const auto& cap : pool) {
      const ImageStack inputs = select_views(cap.views, std::span<const std::string>(protocol.inputs));
      const std::vector<std::string> t{protocol.target};
      const ImageStack target = select_views(cap.views, std::span<const std::string>(t));
      RefinerConfig rc;
      rc.iterations = ks[j];
      rc.planes = make_depth_planes(protocol.planes, protocol.z_far, protocol.z_near);
      const Mpi mpi = run_refiner(inputs, rc, params);
      const Array pred = over_background(render_novel_view(mpi, target.views[0]), protocol.background);
      Array img({16, 16, 3});
      std::copy_n(target.pixels.data(), img.size(), img.data());
      psnr_sum += std::min(psnr(pred, img), kPsnrCap);
      ssim_sum += ssim(pred, img);
    }
    CHECK(rows[j].psnr == doctest::Approx(psnr_sum / 2).epsilon(1e-12));
    CHECK(rows[j].ssim == doctest::Approx(ssim_sum / 2).epsilon(1e-12));
  }
}

TEST_CASE("diverging steps are reported") {
  TrainConfig c = small_config();
  const std::vector<RigCapture> pool{capture_scene(generate_scene(5, c.scene))};
  Rng rng(87);
  const Batch batch = sample_batch(rng, c, pool);
  NetworkParams params = init_params(1);
  params.layers.back().bias[0] = std::nan("");
  AdamState adam = make_adam_state(params);
  try {
    (void)training_step(params, adam, batch, c, 1);
    FAIL("expected divergence to be reported");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK((msg.find("diverged") != std::string::npos || msg.find("non-finite") != std::string::npos));
  }
}
