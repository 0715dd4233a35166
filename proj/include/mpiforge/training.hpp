#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mpiforge/metrics.hpp"
#include "mpiforge/neural.hpp"
#include "mpiforge/refiner.hpp"
#include "mpiforge/rng.hpp"
#include "mpiforge/scene.hpp"

namespace mpiforge {

struct CurriculumStep {
  long iteration = 0;
  int iterations = 1;  // refinement steps K from this training iteration on
};

struct TrainConfig {
  long total_iterations = 2000;
  std::vector<CurriculumStep> curriculum;  // empty: default_curriculum(total_iterations)
  int views_min = 2;
  int views_max = 5;
  int planes_min = 8;
  int planes_max = 16;
  double z_far = std::numeric_limits<double>::infinity();
  double z_near = 1.5;
  std::uint64_t seed = 0;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::array<double, 3> background{0.5, 0.5, 0.5};
  Reduction reduction = Reduction::Deterministic;
  SceneSpec scene;
};

// K = 2, then 3 after 10% and 4 after 20% of the run.
std::vector<CurriculumStep> default_curriculum(long total_iterations);
std::vector<CurriculumStep> effective_curriculum(const TrainConfig& config);
int curriculum_iterations(const TrainConfig& config, long iteration);

void validate_train_config(const TrainConfig& config);

struct Batch {
  ImageStack inputs;
  ImageStack targets;
  PinholeCamera reference;
  DepthPlanes planes;
};

// Random sub-rig of up to 3 x 3 views, N input views, D planes snapped to a
// multiple of 4, remaining sub-rig views as targets. Throws std::domain_error
// naming the minimum plane count when adjacent planes would move more than one
// pixel in some input view.
Batch sample_batch(Rng& rng, const TrainConfig& config, std::span<const RigCapture> pool);

// Smallest plane count keeping adjacent planes within one pixel for `views`.
int minimum_plane_count(const PinholeCamera& reference, std::span<const PinholeCamera> views, double z_far,
                        double z_near);

struct RenderLoss {
  double loss = 0.0;  // 1 - mean SSIM over targets
  ImageMetrics mean_metrics;
  Array grad_mpi;  // d loss / d mpi.data when requested
};

// Renders every target view from the MPI over `background` and scores it.
RenderLoss render_loss(const Mpi& mpi, const ImageStack& targets, const std::array<double, 3>& background,
                       bool with_gradient);

struct StepMetrics {
  long iteration = 0;
  double loss = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  double mae = 0.0;
  int iterations = 0;  // K used for this step
};

// Loss and parameter gradients for one batch. Gradients are added to `grads`.
StepMetrics loss_and_gradient(const NetworkParams& params, const Batch& batch, const TrainConfig& config, int k,
                              NetworkParams& grads);

// Forward, backward and one Adam update. Throws std::runtime_error with a
// diagnostic summary when the loss or a gradient is not finite.
StepMetrics training_step(NetworkParams& params, AdamState& state, const Batch& batch, const TrainConfig& config,
                          int k);

// Evaluation protocol: given input views, one held-out target view.
struct EvalProtocol {
  std::vector<std::string> inputs{"c00", "c02", "c20", "c22"};
  std::string target = "c11";
  int planes = 8;
  double z_far = std::numeric_limits<double>::infinity();
  double z_near = 1.5;
  std::array<double, 3> background{0.5, 0.5, 0.5};
  Reduction reduction = Reduction::Deterministic;
};

struct EvalRow {
  int iterations = 0;
  double psnr = 0.0;  // capped at kPsnrCap
  double ssim = 0.0;
  double mae = 0.0;
};

std::vector<EvalRow> evaluate(const NetworkParams& params, std::span<const RigCapture> test_pool,
                              std::span<const int> k_values, const EvalProtocol& protocol);

// Held-out scenes of the training scene family, disjoint from training draws.
std::vector<RigCapture> make_test_pool(const SceneSpec& spec, int count, std::uint64_t seed);

struct TrainState {
  NetworkParams params;
  AdamState adam;
  Rng rng;
  long iteration = 0;
};

TrainState init_train_state(const TrainConfig& config);

// Runs training from state.iteration to config.total_iterations. With an
// empty pool every step draws a fresh procedural scene.
void train(TrainState& state, const TrainConfig& config, std::span<const RigCapture> pool,
           const std::function<void(const StepMetrics&)>& on_step = {});

}  // namespace mpiforge
