#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mpiforge/array.hpp"
#include "mpiforge/geometry.hpp"
#include "mpiforge/mpi_render.hpp"
#include "mpiforge/warp_ops.hpp"

namespace mpiforge {

// One sinusoid of a layer texture: amplitude * sin(2 pi (fx x + fy y) + phase).
struct TextureWave {
  double fx = 0.0;
  double fy = 0.0;
  double phase = 0.0;
  double amplitude = 0.0;
};

// Fronto-parallel textured layer of the rig frame. Finite layers are opaque
// rectangles textured in rig coordinates (metres). The layer at infinite depth
// covers every direction and is textured by direction, scaled by
// kBackgroundTextureScale.
struct TexturedLayer {
  double depth = 0.0;
  double x_min = 0.0, x_max = 0.0, y_min = 0.0, y_max = 0.0;
  std::array<double, 3> base{};
  std::array<std::vector<TextureWave>, 3> waves;

  [[nodiscard]] bool at_infinity() const;
  [[nodiscard]] bool covers(double x, double y) const;
  [[nodiscard]] std::array<double, 3> color(double x, double y) const;
};

inline constexpr double kBackgroundTextureScale = 3.0;

struct SceneSpec {
  int width = 32;
  int height = 32;
  int grid = 3;          // grid x grid cameras named cRC
  int layers = 2;        // including the background at infinity
  double z_near = 1.5;
  double depth_ratio = 3.0;  // foreground depths lie in [z_near, z_near * depth_ratio]
  double baseline = 0.2;     // metres between neighbouring cameras
  double focal = 0.0;        // pixels; 0 selects the image width
  int snap_planes = 0;       // when > 0, foreground depths sit on these disparity-linear planes
  double max_frequency = 1.5;  // texture cycles per unit
  int antialias = 4;           // samples per pixel axis, box filtered
};

void validate_scene_spec(const SceneSpec& spec);

struct SyntheticScene {
  std::vector<TexturedLayer> layers;  // back to front; layers[0] is at infinity
  std::vector<PinholeCamera> rig;     // row-major over the grid
  std::uint64_t seed = 0;
  SceneSpec spec;
};

std::vector<PinholeCamera> make_grid_rig(const SceneSpec& spec);

// Deterministic in (seed, spec).
SyntheticScene generate_scene(std::uint64_t seed, const SceneSpec& spec);

// Planes implied by spec.snap_planes, from infinity to z_near.
DepthPlanes scene_planes(const SceneSpec& spec);

// Exact rendering by intersecting pixel rays with the layers and compositing
// back to front, averaged over spec.antialias^2 samples per pixel. The
// background makes every pixel opaque.
Array render_analytic(const SyntheticScene& scene, const PinholeCamera& camera);

// Distance in pixels from each pixel's ray hit to the nearest foreground
// rectangle border, [H][W]. Large where no border is nearby.
Array layer_edge_distance(const SyntheticScene& scene, const PinholeCamera& camera);

ImageStack render_views(const SyntheticScene& scene, const std::vector<PinholeCamera>& cameras);

// Logit used for fully opaque or empty ground-truth voxels.
inline constexpr double kSolidLogit = 30.0;

// Opacities of a scene whose layer depths coincide with `planes`: the fraction
// of each reference pixel covered by the layer on that plane.
// Throws std::domain_error when a layer falls between planes.
AlphaVolume ground_truth_alpha(const SyntheticScene& scene, const DepthPlanes& planes,
                               const PinholeCamera& reference);
// RGBA layers: texture colour at the pixel centre with the ground-truth opacities.
Mpi ground_truth_mpi(const SyntheticScene& scene, const DepthPlanes& planes, const PinholeCamera& reference);

// Every view of a rig, row-major over a rows x cols grid.
struct RigCapture {
  ImageStack views;
  int rows = 0;
  int cols = 0;
};

RigCapture capture_scene(const SyntheticScene& scene);

}  // namespace mpiforge
