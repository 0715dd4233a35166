#pragma once

#include <array>
#include <span>
#include <vector>

#include "mpiforge/array.hpp"
#include "mpiforge/geometry.hpp"
#include "mpiforge/warp_ops.hpp"

namespace mpiforge {

// Unbounded opacity logits in the reference frame, [D][H][W].
struct AlphaVolume {
  Array logits;
  DepthPlanes planes;
  PinholeCamera reference;

  // sigmoid(logits), same layout.
  [[nodiscard]] Array alphas() const;
};

// RGBA layers in the reference frame, [D][H][W][4], back to front.
struct Mpi {
  Array data;
  DepthPlanes planes;
  PinholeCamera reference;
};

struct VisibilityStack {
  Array per_view;          // V* in the reference frame, [N][D][H][W]
  Array per_view_frustum;  // visibility in each view's own frame, [N][D][H][W]
  Array total;             // sum over views of V* gated by the in-frame mask, [D][H][W]
};

// Network inputs derived from the current geometry. Colour arrays are planar,
// [3][D][H][W]; total_visibility is the total visibility divided by N.
struct VisualClues {
  Array total_visibility;
  Array mean_color;
  Array color_variance;
};

// Order in which per-view terms are summed. Deterministic sorts the terms of
// each voxel by value first, so results are bit-identical under any view
// permutation.
enum class Reduction { Deterministic, Fast };

inline constexpr double kVisibilityEpsilon = 1e-8;

double sigmoid(double x);

struct Composite {
  Array rgb;    // premultiplied, [N][H][W][3]
  Array alpha;  // accumulated opacity, [N][H][W]
};

// Back-to-front over-compositing of [N][D][H][W][4] view volumes.
Composite composite_over(const ViewVolumeStack& volumes);
// Gradient with respect to the view volumes, [N][D][H][W][4].
Array composite_over_backward(const ViewVolumeStack& volumes, const Array& grad_rgb, const Array& grad_alpha);

// V_d = prod_{i > d} (1 - alpha_i) along `depth_axis` of an arbitrary-rank array.
Array visibility_along_depth(const Array& alphas, std::size_t depth_axis);
Array visibility_along_depth_backward(const Array& alphas, const Array& grad_visibility, std::size_t depth_axis);

VisibilityStack mpi_referenced_visibility(const AlphaVolume& alpha, std::span<const PinholeCamera> views);

Array mean_visible_color(const PsvStack& psv, const VisibilityStack& vis,
                         Reduction mode = Reduction::Deterministic);
Array visible_color_variance(const PsvStack& psv, const VisibilityStack& vis, const Array& mu,
                             Reduction mode = Reduction::Deterministic);

// Everything the clue computation keeps for its backward pass.
struct ClueTape {
  Array alphas;             // [D][H][W]
  std::vector<Array> view_alphas;      // per view, [D][Hv][Wv]
  std::vector<Array> view_visibility;  // per view, [D][Hv][Wv]
  std::vector<Array> weights;          // per view, V* times mask, [D][H][W]
  Array weight_sum;         // [D][H][W]
  VisualClues clues;
};

// Clue computation against a fixed plane-sweep stack, with a backward pass to
// the opacities.
class ClueEvaluator {
 public:
  ClueEvaluator(const PsvStack& psv, const RigWarps& warps, Reduction mode = Reduction::Deterministic);

  // alphas: opacities in [0, 1], [D][H][W].
  [[nodiscard]] ClueTape forward(const Array& alphas) const;

  // Gradients of the three clue arrays in, gradient of the opacities out.
  // Any of the incoming gradients may be empty.
  [[nodiscard]] Array backward(const ClueTape& tape, const Array& grad_total, const Array& grad_mean,
                               const Array& grad_variance) const;

  [[nodiscard]] const PsvStack& psv() const { return psv_; }

 private:
  const PsvStack& psv_;
  const RigWarps& warps_;
  Reduction mode_;
};

VisualClues compute_clues(const AlphaVolume& alpha, const PsvStack& psv,
                          Reduction mode = Reduction::Deterministic);

// MPI with opacities sigmoid(logits) and colours equal to the mean visible
// colour, clamped to [0, 1].
Mpi colorize_mpi(const AlphaVolume& alpha, const PsvStack& psv, Reduction mode = Reduction::Deterministic);

// Interleaves planar colours and opacities into an [D][H][W][4] MPI payload.
Array assemble_rgba(const Array& mean_color, const Array& alphas);

struct RenderedView {
  Array rgb;    // premultiplied, [H][W][3]
  Array alpha;  // [H][W]
};

RenderedView render_novel_view(const Mpi& mpi, const PinholeCamera& target);

// rgb + (1 - alpha) * background, [H][W][3].
Array over_background(const RenderedView& view, const std::array<double, 3>& background);

}  // namespace mpiforge
