#include "mpiforge/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mpiforge {
namespace {

constexpr std::uint64_t kProceduralSeedBit = std::uint64_t{1} << 63;

int snap_planes(int d, int lo) {
  const int down = d - d % 4;
  return down >= lo ? down : down + 4;
}

Array view_slice(const ImageStack& stack, std::size_t i) {
  Array img({stack.pixels.dim(1), stack.pixels.dim(2), 3});
  std::copy_n(stack.pixels.data() + i * img.size(), img.size(), img.data());
  return img;
}

double squared_norm(const NetworkParams& p) {
  double acc = 0.0;
  for (const auto& layer : p.layers) {
    for (const auto* v : {&layer.kernel, &layer.bias, &layer.norm_scale, &layer.norm_shift}) {
      for (double x : *v) acc += x * x;
    }
  }
  return acc;
}

std::string diagnostics(const Batch& batch, int k, double loss, const NetworkParams& params,
                        const NetworkParams* grads) {
  std::ostringstream os;
  os << "training diverged: loss " << loss << ", K " << k << ", N " << batch.inputs.count() << ", D "
     << batch.planes.count() << ", targets " << batch.targets.count() << ", |params| "
     << std::sqrt(squared_norm(params));
  if (grads) os << ", |grad| " << std::sqrt(squared_norm(*grads));
  os << ", inputs";
  for (const auto& v : batch.inputs.views) os << ' ' << v.name;
  return os.str();
}

}  // namespace

std::vector<CurriculumStep> default_curriculum(long total_iterations) {
  return {{0, 2}, {total_iterations / 10, 3}, {total_iterations / 5, 4}};
}

std::vector<CurriculumStep> effective_curriculum(const TrainConfig& config) {
  return config.curriculum.empty() ? default_curriculum(config.total_iterations) : config.curriculum;
}

int curriculum_iterations(const TrainConfig& config, long iteration) {
  int k = 0;
  for (const auto& step : effective_curriculum(config)) {
    if (step.iteration <= iteration) k = step.iterations;
  }
  return k;
}

void validate_train_config(const TrainConfig& config) {
  require(config.total_iterations >= 0, "train: iteration count must be non-negative");
  const auto curriculum = effective_curriculum(config);
  require(curriculum.front().iteration == 0, "train: curriculum must start at iteration 0");
  for (std::size_t i = 0; i < curriculum.size(); ++i) {
    require(curriculum[i].iterations >= 1, "train: curriculum refinement steps must be at least 1");
    if (i > 0) {
      require(curriculum[i].iteration >= curriculum[i - 1].iteration &&
                  curriculum[i].iterations >= curriculum[i - 1].iterations,
              "train: curriculum must be sorted with non-decreasing refinement steps");
    }
  }
  require(config.views_min >= 1 && config.views_max >= config.views_min, "train: bad view count range");
  require(config.planes_min >= 4 && config.planes_max >= config.planes_min, "train: bad plane count range");
  require(snap_planes(config.planes_max, config.planes_min) <= config.planes_max,
          "train: plane range [" + std::to_string(config.planes_min) + ", " + std::to_string(config.planes_max) +
              "] contains no multiple of 4");
  require(config.z_near > 0.0 && config.z_far > config.z_near, "train: need 0 < z_near < z_far");
  require(config.learning_rate > 0.0, "train: learning rate must be positive");
  validate_scene_spec(config.scene);
  require(config.scene.width % 4 == 0 && config.scene.height % 4 == 0,
          "train: scene resolution must be divisible by 4");
}

int minimum_plane_count(const PinholeCamera& reference, std::span<const PinholeCamera> views, double z_far,
                        double z_near) {
  const double total = max_interplane_displacement(reference, views, make_depth_planes(2, z_far, z_near));
  return std::max(2, static_cast<int>(std::ceil(total - 1e-9)) + 1);
}

Batch sample_batch(Rng& rng, const TrainConfig& config, std::span<const RigCapture> pool) {
  require(!pool.empty(), "sample_batch: empty scene pool");
  const RigCapture& capture = pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
  const int sub_rows = std::min(3, capture.rows), sub_cols = std::min(3, capture.cols);
  const int r0 = rng.uniform_int(0, capture.rows - sub_rows), c0 = rng.uniform_int(0, capture.cols - sub_cols);
  std::vector<std::size_t> sub;
  for (int r = r0; r < r0 + sub_rows; ++r) {
    for (int c = c0; c < c0 + sub_cols; ++c) sub.push_back(static_cast<std::size_t>(r * capture.cols + c));
  }
  const int total = static_cast<int>(sub.size());
  require(total >= config.views_min + 1, "sample_batch: sub-rig too small for the requested view count");
  const int n = rng.uniform_int(config.views_min, std::min(config.views_max, total - 1));
  for (int i = total - 1; i > 0; --i) std::swap(sub[i], sub[rng.uniform_int(0, i)]);
  std::vector<std::size_t> inputs(sub.begin(), sub.begin() + n), targets(sub.begin() + n, sub.end());
  std::sort(inputs.begin(), inputs.end());
  std::sort(targets.begin(), targets.end());

  const int d = snap_planes(rng.uniform_int(config.planes_min, config.planes_max), config.planes_min);
  Batch batch;
  batch.inputs = select_views(capture.views, std::span<const std::size_t>(inputs));
  batch.targets = select_views(capture.views, std::span<const std::size_t>(targets));
  batch.reference = average_reference_camera(batch.inputs.views);
  batch.planes = make_depth_planes(d, config.z_far, config.z_near);
  const double step = max_interplane_displacement(batch.reference, batch.inputs.views, batch.planes);
  if (step > 1.0 + 1e-9) {
    const int needed = minimum_plane_count(batch.reference, batch.inputs.views, config.z_far, config.z_near);
    throw std::domain_error("sample_batch: " + std::to_string(d) + " planes move up to " + std::to_string(step) +
                            " px between slices; need at least D = " + std::to_string(needed) +
                            " (a multiple of 4: " + std::to_string((needed + 3) / 4 * 4) + ")");
  }
  return batch;
}

RenderLoss render_loss(const Mpi& mpi, const ImageStack& targets, const std::array<double, 3>& background,
                       bool with_gradient) {
  const std::size_t t = targets.count();
  require(t > 0, "render_loss: no target views");
  const ViewVolumeStack volumes =
      warp_from_reference(broadcast_views(mpi.data, t), mpi.reference, targets.views, mpi.planes);
  const Composite comp = composite_over(volumes);
  const std::size_t h = targets.pixels.dim(1), w = targets.pixels.dim(2), hw = h * w;

  RenderLoss out;
  Array grad_rgb, grad_alpha;
  if (with_gradient) {
    grad_rgb = Array(comp.rgb.shape());
    grad_alpha = Array(comp.alpha.shape());
  }
  double ssim_sum = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    Array pred({h, w, 3});
    for (std::size_t p = 0; p < hw; ++p) {
      const double transmit = 1.0 - comp.alpha[i * hw + p];
      for (int c = 0; c < 3; ++c) pred[p * 3 + c] = comp.rgb[(i * hw + p) * 3 + c] + transmit * background[c];
    }
    const Array target = view_slice(targets, i);
    const ImageMetrics m = image_metrics(pred, target);
    ssim_sum += m.ssim;
    out.mean_metrics.psnr += std::min(m.psnr, kPsnrCap) / static_cast<double>(t);
    out.mean_metrics.ssim += m.ssim / static_cast<double>(t);
    out.mean_metrics.mae += m.mae / static_cast<double>(t);
    if (!with_gradient) continue;
    const Array g = ssim_gradient(pred, target);
    const double scale = -1.0 / static_cast<double>(t);
    for (std::size_t p = 0; p < hw; ++p) {
      double ga = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double gc = scale * g[p * 3 + c];
        grad_rgb[(i * hw + p) * 3 + c] = gc;
        ga -= gc * background[c];
      }
      grad_alpha[i * hw + p] = ga;
    }
  }
  out.loss = 1.0 - ssim_sum / static_cast<double>(t);
  if (with_gradient) {
    const Array grad_views = composite_over_backward(volumes, grad_rgb, grad_alpha);
    out.grad_mpi = broadcast_views_backward(
        warp_from_reference_backward(grad_views, mpi.reference, targets.views, mpi.planes));
  }
  return out;
}

StepMetrics loss_and_gradient(const NetworkParams& params, const Batch& batch, const TrainConfig& config, int k,
                              NetworkParams& grads) {
  RefinerConfig rc;
  rc.iterations = k;
  rc.planes = batch.planes;
  rc.reduction = config.reduction;
  const UnrolledRefiner refiner(build_psv(batch.inputs, batch.reference, batch.planes), rc);
  const UnrolledRefiner::Tape tape = refiner.forward(params);
  const RenderLoss rl = render_loss(tape.mpi, batch.targets, config.background, true);
  if (!std::isfinite(rl.loss)) throw std::runtime_error(diagnostics(batch, k, rl.loss, params, nullptr));
  refiner.backward(tape, rl.grad_mpi, params, grads);
  StepMetrics m;
  m.loss = rl.loss;
  m.psnr = rl.mean_metrics.psnr;
  m.ssim = rl.mean_metrics.ssim;
  m.mae = rl.mean_metrics.mae;
  m.iterations = k;
  return m;
}

StepMetrics training_step(NetworkParams& params, AdamState& state, const Batch& batch, const TrainConfig& config,
                          int k) {
  NetworkParams grads = zeros_like(params);
  StepMetrics m = loss_and_gradient(params, batch, config, k, grads);
  if (!std::isfinite(squared_norm(grads))) throw std::runtime_error(diagnostics(batch, k, m.loss, params, &grads));
  adam_step(params, grads, state);
  return m;
}

std::vector<EvalRow> evaluate(const NetworkParams& params, std::span<const RigCapture> test_pool,
                              std::span<const int> k_values, const EvalProtocol& protocol) {
  require(!k_values.empty(), "evaluate: no refinement step counts given");
  const int k_max = *std::max_element(k_values.begin(), k_values.end());
  require(*std::min_element(k_values.begin(), k_values.end()) >= 1, "evaluate: step counts must be at least 1");
  std::vector<EvalRow> rows(k_values.size());
  for (std::size_t j = 0; j < k_values.size(); ++j) rows[j].iterations = k_values[j];
  if (test_pool.empty()) return rows;

  for (const RigCapture& capture : test_pool) {
    const ImageStack inputs = select_views(capture.views, std::span<const std::string>(protocol.inputs));
    const std::vector<std::string> target_name{protocol.target};
    const ImageStack target = select_views(capture.views, std::span<const std::string>(target_name));
    const Array target_image = view_slice(target, 0);
    RefinerConfig rc;
    rc.iterations = k_max;
    rc.planes = make_depth_planes(protocol.planes, protocol.z_far, protocol.z_near);
    rc.reduction = protocol.reduction;
    const PinholeCamera reference = average_reference_camera(inputs.views);
    const PsvStack psv = build_psv(inputs, reference, rc.planes);
    const RigWarps warps = build_rig_warps(reference, psv.views, psv.planes);
    const ClueEvaluator evaluator(psv, warps, rc.reduction);

    // K steps of one run equal a separate K-step run, so every K is read off a
    // single pass.
    AlphaVolume alpha = init_alpha(rc, reference);
    for (int k = 1; k <= k_max; ++k) {
      const ClueTape clues = evaluator.forward(alpha.alphas());
      const FeatureVolume delta = unet_forward(assemble_features(alpha.logits, clues.clues), params);
      for (std::size_t v = 0; v < alpha.logits.size(); ++v) alpha.logits[v] += delta.data[v];
      for (std::size_t j = 0; j < k_values.size(); ++j) {
        if (k_values[j] != k) continue;
        const Array alphas = alpha.alphas();
        const Mpi mpi{assemble_rgba(evaluator.forward(alphas).clues.mean_color, alphas), rc.planes, reference};
        const Array pred = over_background(render_novel_view(mpi, target.views.front()), protocol.background);
        const ImageMetrics m = image_metrics(pred, target_image);
        const double count = static_cast<double>(test_pool.size());
        rows[j].psnr += std::min(m.psnr, kPsnrCap) / count;
        rows[j].ssim += m.ssim / count;
        rows[j].mae += m.mae / count;
      }
    }
  }
  return rows;
}

std::vector<RigCapture> make_test_pool(const SceneSpec& spec, int count, std::uint64_t seed) {
  std::vector<RigCapture> pool;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t scene_seed = ((seed << 20) + static_cast<std::uint64_t>(i)) & ~kProceduralSeedBit;
    pool.push_back(capture_scene(generate_scene(scene_seed, spec)));
  }
  return pool;
}

TrainState init_train_state(const TrainConfig& config) {
  validate_train_config(config);
  TrainState state{init_params(config.seed), {}, Rng(config.seed * 0x9E3779B97F4A7C15ULL + 1), 0};
  state.adam = make_adam_state(state.params);
  state.adam.learning_rate = config.learning_rate;
  state.adam.beta1 = config.beta1;
  state.adam.beta2 = config.beta2;
  state.adam.epsilon = config.epsilon;
  return state;
}

void train(TrainState& state, const TrainConfig& config, std::span<const RigCapture> pool,
           const std::function<void(const StepMetrics&)>& on_step) {
  validate_train_config(config);
  while (state.iteration < config.total_iterations) {
    const int k = curriculum_iterations(config, state.iteration);
    Batch batch;
    if (pool.empty()) {
      const RigCapture capture = capture_scene(generate_scene(state.rng.next() | kProceduralSeedBit, config.scene));
      batch = sample_batch(state.rng, config, std::span<const RigCapture>(&capture, 1));
    } else {
      batch = sample_batch(state.rng, config, pool);
    }
    StepMetrics m = training_step(state.params, state.adam, batch, config, k);
    m.iteration = state.iteration;
    ++state.iteration;
    if (on_step) on_step(m);
  }
}

}  // namespace mpiforge
