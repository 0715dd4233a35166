#include "mpiforge/scene.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "mpiforge/rng.hpp"

namespace mpiforge {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double focal_of(const SceneSpec& spec) { return spec.focal > 0.0 ? spec.focal : spec.width; }

std::array<std::vector<TextureWave>, 3> random_waves(Rng& rng, double max_frequency) {
  std::array<std::vector<TextureWave>, 3> waves;
  for (auto& channel : waves) {
    for (int j = 0; j < 3; ++j) {
      const double freq = rng.uniform(0.3, 1.0) * max_frequency;
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      channel.push_back({freq * std::cos(angle), freq * std::sin(angle), rng.uniform(0.0, 2.0 * std::numbers::pi),
                         rng.uniform(0.03, 0.1)});
    }
  }
  return waves;
}

std::array<double, 3> random_base(Rng& rng) {
  return {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
}

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;
};

Ray pixel_ray(const PinholeCamera& cam, double u, double v) {
  const Eigen::Vector3d d = cam.rotation * (cam.intrinsics.inverse() * Eigen::Vector3d(u, v, 1.0));
  return {cam.translation, d};
}

// Texture coordinates where the ray meets the layer; false when it does not.
bool hit(const TexturedLayer& layer, const Ray& ray, double& x, double& y, double& distance) {
  if (ray.direction.z() <= 0.0) return false;
  if (layer.at_infinity()) {
    x = kBackgroundTextureScale * ray.direction.x() / ray.direction.z();
    y = kBackgroundTextureScale * ray.direction.y() / ray.direction.z();
    distance = kInf;
    return true;
  }
  const double t = (layer.depth - ray.origin.z()) / ray.direction.z();
  if (t <= 0.0) return false;
  const Eigen::Vector3d p = ray.origin + t * ray.direction;
  x = p.x();
  y = p.y();
  distance = t;
  return true;
}

// Sample positions within a pixel along one axis, relative to its centre.
std::vector<double> subpixel_offsets(int samples) {
  std::vector<double> out;
  for (int i = 0; i < samples; ++i) out.push_back((i + 0.5) / samples - 0.5);
  return out;
}

bool same_depth(double a, double b) {
  if (std::isinf(a) || std::isinf(b)) return a == b;
  return std::abs(a - b) <= 1e-9 * std::max(std::abs(a), std::abs(b));
}

}  // namespace

bool TexturedLayer::at_infinity() const { return std::isinf(depth); }

bool TexturedLayer::covers(double x, double y) const {
  return at_infinity() || (x >= x_min && x <= x_max && y >= y_min && y <= y_max);
}

std::array<double, 3> TexturedLayer::color(double x, double y) const {
  std::array<double, 3> out = base;
  for (int c = 0; c < 3; ++c) {
    for (const auto& w : waves[c]) {
      out[c] += w.amplitude * std::sin(2.0 * std::numbers::pi * (w.fx * x + w.fy * y) + w.phase);
    }
    out[c] = std::clamp(out[c], 0.0, 1.0);
  }
  return out;
}

void validate_scene_spec(const SceneSpec& spec) {
  require(spec.width > 0 && spec.height > 0, "scene: resolution must be positive");
  require(spec.antialias >= 1, "scene: need at least one sample per pixel axis");
  require(spec.grid >= 1, "scene: grid must have at least one camera");
  require(spec.layers >= 1, "scene: need at least the background layer");
  require(spec.z_near > 0.0 && spec.depth_ratio >= 1.0, "scene: need z_near > 0 and depth_ratio >= 1");
  require(spec.baseline >= 0.0 && spec.focal >= 0.0 && spec.max_frequency >= 0.0,
          "scene: baseline, focal and frequency must be non-negative");
  if (spec.snap_planes > 0) {
    const DepthPlanes planes = scene_planes(spec);
    int usable = 0;
    for (std::size_t d = 1; d < planes.count(); ++d) {
      if (planes.depths[d] <= spec.z_near * spec.depth_ratio * (1.0 + 1e-12)) ++usable;
    }
    require(usable >= spec.layers - 1, "scene: not enough planes within the foreground depth range for " +
                                           std::to_string(spec.layers - 1) + " foreground layers");
  }
}

std::vector<PinholeCamera> make_grid_rig(const SceneSpec& spec) {
  const double f = focal_of(spec);
  Eigen::Matrix3d K;
  K << f, 0, (spec.width - 1) / 2.0, 0, f, (spec.height - 1) / 2.0, 0, 0, 1;
  std::vector<PinholeCamera> rig;
  const double centre = (spec.grid - 1) / 2.0;
  for (int r = 0; r < spec.grid; ++r) {
    for (int c = 0; c < spec.grid; ++c) {
      PinholeCamera cam;
      cam.intrinsics = K;
      cam.translation = Eigen::Vector3d((c - centre) * spec.baseline, (r - centre) * spec.baseline, 0.0);
      cam.width = spec.width;
      cam.height = spec.height;
      cam.name = "c" + std::to_string(r) + std::to_string(c);
      rig.push_back(cam);
    }
  }
  return rig;
}

DepthPlanes scene_planes(const SceneSpec& spec) { return make_depth_planes(spec.snap_planes, kInf, spec.z_near); }

SyntheticScene generate_scene(std::uint64_t seed, const SceneSpec& spec) {
  validate_scene_spec(spec);
  Rng rng(seed);
  SyntheticScene scene;
  scene.seed = seed;
  scene.spec = spec;
  scene.rig = make_grid_rig(spec);

  TexturedLayer background;
  background.depth = kInf;
  background.base = random_base(rng);
  background.waves = random_waves(rng, spec.max_frequency);
  scene.layers.push_back(background);

  const int foreground = spec.layers - 1;
  std::vector<double> depths;
  if (spec.snap_planes > 0) {
    const DepthPlanes planes = scene_planes(spec);
    std::vector<double> candidates;
    for (std::size_t d = 1; d < planes.count(); ++d) {
      if (planes.depths[d] <= spec.z_near * spec.depth_ratio * (1.0 + 1e-12)) candidates.push_back(planes.depths[d]);
    }
    for (int i = 0; i < foreground; ++i) {
      const int pick = rng.uniform_int(0, static_cast<int>(candidates.size()) - 1);
      depths.push_back(candidates[pick]);
      candidates.erase(candidates.begin() + pick);
    }
  } else {
    const double near_disp = 1.0 / spec.z_near, far_disp = 1.0 / (spec.z_near * spec.depth_ratio);
    for (int i = 0; i < foreground; ++i) depths.push_back(1.0 / rng.uniform(far_disp, near_disp));
  }
  std::sort(depths.begin(), depths.end(), std::greater<>());

  const double f = focal_of(spec);
  for (double z : depths) {
    const double half_x = z * spec.width / (2.0 * f);
    const double half_y = z * spec.height / (2.0 * f);
    const double cx = rng.uniform(-0.4, 0.4) * half_x, cy = rng.uniform(-0.4, 0.4) * half_y;
    const double sx = rng.uniform(0.25, 0.5) * half_x, sy = rng.uniform(0.25, 0.5) * half_y;
    TexturedLayer layer;
    layer.depth = z;
    layer.x_min = cx - sx;
    layer.x_max = cx + sx;
    layer.y_min = cy - sy;
    layer.y_max = cy + sy;
    layer.base = random_base(rng);
    layer.waves = random_waves(rng, spec.max_frequency);
    scene.layers.push_back(layer);
  }
  return scene;
}

Array render_analytic(const SyntheticScene& scene, const PinholeCamera& camera) {
  const std::size_t h = camera.height, w = camera.width;
  const std::vector<double> offsets = subpixel_offsets(scene.spec.antialias);
  const double weight = 1.0 / static_cast<double>(offsets.size() * offsets.size());
  Array out({h, w, 3});
  for (std::size_t v = 0; v < h; ++v) {
    for (std::size_t u = 0; u < w; ++u) {
      for (double oy : offsets) {
        for (double ox : offsets) {
          const Ray ray = pixel_ray(camera, static_cast<double>(u) + ox, static_cast<double>(v) + oy);
          std::array<double, 3> rgb{0.0, 0.0, 0.0};
          for (const auto& layer : scene.layers) {
            double x, y, t;
            if (!hit(layer, ray, x, y, t) || !layer.covers(x, y)) continue;
            rgb = layer.color(x, y);  // opaque layers, back to front
          }
          for (int c = 0; c < 3; ++c) out(v, u, c) += weight * rgb[c];
        }
      }
    }
  }
  return out;
}

Array layer_edge_distance(const SyntheticScene& scene, const PinholeCamera& camera) {
  const std::size_t h = camera.height, w = camera.width;
  Array out({h, w}, kInf);
  const double focal = std::min(camera.intrinsics(0, 0), camera.intrinsics(1, 1));
  for (std::size_t v = 0; v < h; ++v) {
    for (std::size_t u = 0; u < w; ++u) {
      const Ray ray = pixel_ray(camera, static_cast<double>(u), static_cast<double>(v));
      for (const auto& layer : scene.layers) {
        double x, y, t;
        if (layer.at_infinity() || !hit(layer, ray, x, y, t)) continue;
        // Distance to the rectangle outline, in metres on the layer.
        const double dx = std::max({layer.x_min - x, 0.0, x - layer.x_max});
        const double dy = std::max({layer.y_min - y, 0.0, y - layer.y_max});
        double metres;
        if (dx == 0.0 && dy == 0.0) {
          metres = std::min({x - layer.x_min, layer.x_max - x, y - layer.y_min, layer.y_max - y});
        } else {
          metres = std::hypot(dx, dy);
        }
        const double depth = (camera.rotation.transpose() * (t * ray.direction)).z();
        out(v, u) = std::min(out(v, u), metres * focal / depth);
      }
    }
  }
  return out;
}

ImageStack render_views(const SyntheticScene& scene, const std::vector<PinholeCamera>& cameras) {
  require(!cameras.empty(), "render_views: no cameras");
  const std::size_t h = cameras.front().height, w = cameras.front().width;
  ImageStack stack{Array({cameras.size(), h, w, 3}), cameras};
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    require(cameras[i].width == cameras.front().width && cameras[i].height == cameras.front().height,
            "render_views: cameras must share a resolution");
    const Array img = render_analytic(scene, cameras[i]);
    std::copy(img.values().begin(), img.values().end(), stack.pixels.data() + i * img.size());
  }
  return stack;
}

namespace {

// Layer index on each plane, or -1.
std::vector<int> layers_on_planes(const SyntheticScene& scene, const DepthPlanes& planes) {
  std::vector<int> on_plane(planes.count(), -1);
  for (std::size_t l = 0; l < scene.layers.size(); ++l) {
    bool placed = false;
    for (std::size_t d = 0; d < planes.count(); ++d) {
      if (same_depth(scene.layers[l].depth, planes.depths[d])) {
        require(on_plane[d] < 0, "ground truth: two layers share a plane");
        on_plane[d] = static_cast<int>(l);
        placed = true;
      }
    }
    require(placed, "ground truth: layer at depth " + std::to_string(scene.layers[l].depth) +
                        " does not lie on a depth plane");
  }
  return on_plane;
}

}  // namespace

AlphaVolume ground_truth_alpha(const SyntheticScene& scene, const DepthPlanes& planes,
                               const PinholeCamera& reference) {
  const Mpi mpi = ground_truth_mpi(scene, planes, reference);
  AlphaVolume alpha{Array({planes.count(), static_cast<std::size_t>(reference.height),
                           static_cast<std::size_t>(reference.width)}),
                    planes, reference};
  for (std::size_t v = 0; v < alpha.logits.size(); ++v) {
    const double a = mpi.data[v * 4 + 3];
    alpha.logits[v] = std::clamp(std::log(a) - std::log1p(-a), -kSolidLogit, kSolidLogit);
  }
  return alpha;
}

Mpi ground_truth_mpi(const SyntheticScene& scene, const DepthPlanes& planes, const PinholeCamera& reference) {
  require(reference.rotation.isIdentity(1e-12) && std::abs(reference.translation.z()) < 1e-12,
          "ground truth: the reference camera must face the layers from the rig plane");
  const std::vector<int> on_plane = layers_on_planes(scene, planes);
  const std::size_t depth = planes.count(), h = reference.height, w = reference.width;
  const std::vector<double> offsets = subpixel_offsets(scene.spec.antialias);
  const double weight = 1.0 / static_cast<double>(offsets.size() * offsets.size());
  Mpi mpi{Array({depth, h, w, 4}), planes, reference};
  for (std::size_t d = 0; d < depth; ++d) {
    if (on_plane[d] < 0) continue;
    const TexturedLayer& layer = scene.layers[on_plane[d]];
    for (std::size_t v = 0; v < h; ++v) {
      for (std::size_t u = 0; u < w; ++u) {
        const Ray ray = pixel_ray(reference, static_cast<double>(u), static_cast<double>(v));
        double x, y, t;
        if (!hit(layer, ray, x, y, t)) continue;
        const auto rgb = layer.color(x, y);
        double* out = mpi.data.data() + ((d * h + v) * w + u) * 4;
        out[0] = rgb[0];
        out[1] = rgb[1];
        out[2] = rgb[2];
        double coverage = 0.0;
        for (double oy : offsets) {
          for (double ox : offsets) {
            const Ray sub = pixel_ray(reference, static_cast<double>(u) + ox, static_cast<double>(v) + oy);
            if (hit(layer, sub, x, y, t) && layer.covers(x, y)) coverage += weight;
          }
        }
        out[3] = coverage;
      }
    }
  }
  return mpi;
}

RigCapture capture_scene(const SyntheticScene& scene) {
  return {render_views(scene, scene.rig), scene.spec.grid, scene.spec.grid};
}

}  // namespace mpiforge
