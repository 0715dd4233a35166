#include "mpiforge/refiner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace mpiforge {
namespace {

void check_dims(const PinholeCamera& reference, const DepthPlanes& planes) {
  require(planes.count() % 4 == 0 && reference.width % 4 == 0 && reference.height % 4 == 0,
          "refiner: plane count and resolution must be divisible by 4 (got " + std::to_string(reference.width) +
              "x" + std::to_string(reference.height) + "x" + std::to_string(planes.count()) + ")");
}

Array sigmoid_of(const Array& logits) {
  Array out(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = sigmoid(logits[i]);
  return out;
}

Array add_update(const Array& logits, const FeatureVolume& delta) {
  Array out = logits;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += delta.data[i];
  return out;
}

// Channels [first, first + count) as [D][H][W] for one channel, else [count][D][H][W].
Array channel_slice(const FeatureVolume& f, int first, int count) {
  std::vector<std::size_t> shape{static_cast<std::size_t>(f.depth), static_cast<std::size_t>(f.height),
                                 static_cast<std::size_t>(f.width)};
  if (count > 1) shape.insert(shape.begin(), static_cast<std::size_t>(count));
  Array a(shape);
  std::copy_n(f.channel(first), count * f.voxels(), a.data());
  return a;
}

}  // namespace

void validate_config(const RefinerConfig& config) {
  require(config.iterations >= 1, "refiner: iteration count must be at least 1");
  require(config.planes.count() >= 2, "refiner: need at least two depth planes");
  require(sigmoid(config.init_logit_empty) < 0.01, "refiner: empty-space logit must give opacity below 0.01");
  require(sigmoid(config.init_logit_background) > 0.99, "refiner: background logit must give opacity above 0.99");
}

AlphaVolume init_alpha(const RefinerConfig& config, const PinholeCamera& reference) {
  require(config.planes.count() >= 2, "init_alpha: need at least two depth planes");
  const std::size_t depth = config.planes.count(), h = reference.height, w = reference.width;
  AlphaVolume alpha{Array({depth, h, w}, config.init_logit_empty), config.planes, reference};
  std::fill_n(alpha.logits.data(), h * w, config.init_logit_background);
  return alpha;
}

FeatureVolume assemble_features(const Array& logits, const VisualClues& clues) {
  require(logits.rank() == 3, "assemble_features: logits must be [D][H][W]");
  const int depth = static_cast<int>(logits.dim(0)), h = static_cast<int>(logits.dim(1)),
            w = static_cast<int>(logits.dim(2));
  const std::size_t voxels = logits.size();
  require(clues.total_visibility.size() == voxels && clues.mean_color.size() == 3 * voxels &&
              clues.color_variance.size() == 3 * voxels,
          "assemble_features: clue volumes do not match the logits");
  FeatureVolume f(kFeatureChannels, depth, h, w);
  std::copy_n(logits.data(), voxels, f.channel(0));
  std::copy_n(clues.total_visibility.data(), voxels, f.channel(1));
  std::copy_n(clues.mean_color.data(), 3 * voxels, f.channel(2));
  std::copy_n(clues.color_variance.data(), 3 * voxels, f.channel(5));
  return f;
}

FeatureVolume assemble_features(const AlphaVolume& alpha, const PsvStack& psv, Reduction mode) {
  return assemble_features(alpha.logits, compute_clues(alpha, psv, mode));
}

AlphaVolume refine_step(const AlphaVolume& alpha, const PsvStack& psv, const NetworkParams& params,
                        Reduction mode) {
  check_dims(alpha.reference, alpha.planes);
  const FeatureVolume delta = unet_forward(assemble_features(alpha, psv, mode), params);
  return {add_update(alpha.logits, delta), alpha.planes, alpha.reference};
}

PsvStack build_psv(const ImageStack& images, const PinholeCamera& reference, const DepthPlanes& planes) {
  return warp_to_reference(broadcast_depth(images, planes), reference, images.views, planes);
}

Mpi run_refiner(const ImageStack& images, const RefinerConfig& config, const NetworkParams& params,
                const IterationObserver& observer) {
  validate_config(config);
  require(!images.views.empty(), "run_refiner: no input views");
  require(images.pixels.rank() == 4 && images.pixels.dim(0) == images.views.size(),
          "run_refiner: " + std::to_string(images.views.size()) + " cameras for an image stack of shape " +
              shape_string(images.pixels.shape()));
  const PinholeCamera reference = average_reference_camera(images.views);
  check_dims(reference, config.planes);
  const PsvStack psv = build_psv(images, reference, config.planes);
  const RigWarps warps = build_rig_warps(reference, psv.views, psv.planes);
  const ClueEvaluator evaluator(psv, warps, config.reduction);

  AlphaVolume alpha = init_alpha(config, reference);
  for (int k = 0; k < config.iterations; ++k) {
    const auto start = std::chrono::steady_clock::now();
    const ClueTape clues = evaluator.forward(alpha.alphas());
    const FeatureVolume delta = unet_forward(assemble_features(alpha.logits, clues.clues), params);
    alpha.logits = add_update(alpha.logits, delta);
    if (observer) {
      observer(k, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
  }
  const Array alphas = alpha.alphas();
  return {assemble_rgba(evaluator.forward(alphas).clues.mean_color, alphas), config.planes, reference};
}

UnrolledRefiner::UnrolledRefiner(PsvStack psv, RefinerConfig config)
    : psv_(std::move(psv)),
      config_(std::move(config)),
      warps_(build_rig_warps(psv_.reference, psv_.views, psv_.planes)),
      evaluator_(psv_, warps_, config_.reduction) {
  validate_config(config_);
  require(config_.planes.depths == psv_.planes.depths, "UnrolledRefiner: planes differ from the sweep planes");
  check_dims(psv_.reference, psv_.planes);
}

UnrolledRefiner::Tape UnrolledRefiner::forward(const NetworkParams& params) const {
  Tape tape;
  tape.logits.push_back(init_alpha(config_, psv_.reference).logits);
  for (int k = 0; k < config_.iterations; ++k) {
    Iteration it;
    it.clues = evaluator_.forward(sigmoid_of(tape.logits.back()));
    const FeatureVolume delta =
        unet_forward(assemble_features(tape.logits.back(), it.clues.clues), params, &it.network);
    tape.logits.push_back(add_update(tape.logits.back(), delta));
    tape.iterations.push_back(std::move(it));
  }
  tape.final_clues = evaluator_.forward(sigmoid_of(tape.logits.back()));
  tape.mpi = {assemble_rgba(tape.final_clues.clues.mean_color, tape.final_clues.alphas), psv_.planes,
              psv_.reference};
  return tape;
}

void UnrolledRefiner::backward(const Tape& tape, const Array& grad_mpi, const NetworkParams& params,
                               NetworkParams& grads) const {
  const Array& alphas = tape.final_clues.alphas;
  const std::size_t voxels = alphas.size();
  require(grad_mpi.size() == voxels * 4, "UnrolledRefiner::backward: gradient does not match the MPI");

  // Colourisation: rgba = (clamp(mean colour), alpha).
  Array grad_mean({3, alphas.dim(0), alphas.dim(1), alphas.dim(2)});
  Array grad_alpha(alphas.shape());
  const Array& mean = tape.final_clues.clues.mean_color;
  for (std::size_t v = 0; v < voxels; ++v) {
    for (std::size_t c = 0; c < 3; ++c) {
      const double m = mean[c * voxels + v];
      if (m >= 0.0 && m <= 1.0) grad_mean[c * voxels + v] = grad_mpi[v * 4 + c];
    }
    grad_alpha[v] = grad_mpi[v * 4 + 3];
  }
  const Array through_colour = evaluator_.backward(tape.final_clues, Array(), grad_mean, Array());
  Array grad_logits(alphas.shape());
  for (std::size_t v = 0; v < voxels; ++v) {
    grad_logits[v] = (grad_alpha[v] + through_colour[v]) * alphas[v] * (1.0 - alphas[v]);
  }

  for (int k = config_.iterations - 1; k >= 0; --k) {
    const Iteration& it = tape.iterations[k];
    FeatureVolume grad_delta(1, static_cast<int>(alphas.dim(0)), static_cast<int>(alphas.dim(1)),
                             static_cast<int>(alphas.dim(2)));
    std::copy_n(grad_logits.data(), voxels, grad_delta.data.data());
    const FeatureVolume grad_features = unet_backward(it.network, grad_delta, params, grads);

    const Array grad_clue_alpha = evaluator_.backward(it.clues, channel_slice(grad_features, 1, 1),
                                                            channel_slice(grad_features, 2, 3),
                                                            channel_slice(grad_features, 5, 3));
    const Array& a = it.clues.alphas;
    const double* g_direct = grad_features.channel(0);
    for (std::size_t v = 0; v < voxels; ++v) {
      grad_logits[v] += g_direct[v] + grad_clue_alpha[v] * a[v] * (1.0 - a[v]);
    }
  }
}

}  // namespace mpiforge
