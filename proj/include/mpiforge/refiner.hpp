#pragma once

#include <functional>
#include <vector>

#include "mpiforge/array.hpp"
#include "mpiforge/geometry.hpp"
#include "mpiforge/mpi_render.hpp"
#include "mpiforge/neural.hpp"
#include "mpiforge/warp_ops.hpp"

namespace mpiforge {

struct RefinerConfig {
  int iterations = 1;
  DepthPlanes planes;
  double init_logit_empty = -8.0;
  double init_logit_background = 8.0;
  Reduction reduction = Reduction::Deterministic;
};

void validate_config(const RefinerConfig& config);

// Empty geometry in front of an opaque back plane.
AlphaVolume init_alpha(const RefinerConfig& config, const PinholeCamera& reference);

// Network input, channels in this order:
//   0     alpha logits
//   1     total visibility / N
//   2..4  mean visible colour
//   5..7  visible colour variance
FeatureVolume assemble_features(const AlphaVolume& alpha, const PsvStack& psv,
                                Reduction mode = Reduction::Deterministic);
FeatureVolume assemble_features(const Array& logits, const VisualClues& clues);

// One residual update: logits + unet(features).
AlphaVolume refine_step(const AlphaVolume& alpha, const PsvStack& psv, const NetworkParams& params,
                        Reduction mode = Reduction::Deterministic);

PsvStack build_psv(const ImageStack& images, const PinholeCamera& reference, const DepthPlanes& planes);

// Called after each refinement iteration with its index and wall time.
using IterationObserver = std::function<void(int iteration, double seconds)>;

// Averages the reference camera, sweeps the inputs, runs config.iterations
// refinement steps from init_alpha and colourises the result.
Mpi run_refiner(const ImageStack& images, const RefinerConfig& config, const NetworkParams& params,
                const IterationObserver& observer = {});

// Unrolled refiner over a fixed plane-sweep stack, keeping everything needed
// to backpropagate from the final MPI to the network parameters.
class UnrolledRefiner {
 public:
  struct Iteration {
    ClueTape clues;
    UnetTape network;
  };

  struct Tape {
    std::vector<Array> logits;  // K + 1 entries, [D][H][W]
    std::vector<Iteration> iterations;
    ClueTape final_clues;
    Mpi mpi;
  };

  UnrolledRefiner(PsvStack psv, RefinerConfig config);
  UnrolledRefiner(const UnrolledRefiner&) = delete;
  UnrolledRefiner& operator=(const UnrolledRefiner&) = delete;

  [[nodiscard]] Tape forward(const NetworkParams& params) const;

  // grad_mpi: d loss / d mpi.data, [D][H][W][4]. Parameter gradients are
  // accumulated into `grads`.
  void backward(const Tape& tape, const Array& grad_mpi, const NetworkParams& params, NetworkParams& grads) const;

  [[nodiscard]] const PsvStack& psv() const { return psv_; }
  [[nodiscard]] const RefinerConfig& config() const { return config_; }

 private:
  PsvStack psv_;
  RefinerConfig config_;
  RigWarps warps_;
  ClueEvaluator evaluator_;
};

}  // namespace mpiforge
