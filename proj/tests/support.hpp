#pragma once

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mpiforge/array.hpp"
#include "mpiforge/geometry.hpp"
#include "mpiforge/neural.hpp"
#include "mpiforge/rng.hpp"

namespace testing {

using mpiforge::Array;
using mpiforge::PinholeCamera;
using mpiforge::Rng;

inline Array random_array(Rng& rng, std::vector<std::size_t> shape, double lo = 0.0, double hi = 1.0) {
  Array a(std::move(shape));
  for (double& v : a.values()) v = rng.uniform(lo, hi);
  return a;
}

inline mpiforge::FeatureVolume random_volume(Rng& rng, int c, int d, int h, int w, double scale = 1.0) {
  mpiforge::FeatureVolume v(c, d, h, w);
  for (double& x : v.data) x = rng.normal(0.0, scale);
  return v;
}

inline Eigen::Matrix3d random_rotation(Rng& rng, double max_angle) {
  Eigen::Vector3d axis(rng.normal(), rng.normal(), rng.normal());
  axis.normalize();
  return Eigen::AngleAxisd(rng.uniform(-max_angle, max_angle), axis).toRotationMatrix();
}

inline Eigen::Matrix3d intrinsics(double f, int w, int h) {
  Eigen::Matrix3d k = Eigen::Matrix3d::Identity();
  k(0, 0) = f;
  k(1, 1) = f;
  k(0, 2) = (w - 1) / 2.0;
  k(1, 2) = (h - 1) / 2.0;
  return k;
}

// A camera near the rig origin looking down +z.
inline PinholeCamera random_camera(Rng& rng, int w, int h, double max_angle = 0.05, double max_offset = 0.2) {
  PinholeCamera cam;
  cam.width = w;
  cam.height = h;
  const double f = w * rng.uniform(0.8, 1.2);
  cam.intrinsics = intrinsics(f, w, h);
  cam.intrinsics(0, 1) = rng.uniform(-0.01, 0.01) * f;
  cam.intrinsics(0, 2) += rng.uniform(-1.0, 1.0);
  cam.intrinsics(1, 2) += rng.uniform(-1.0, 1.0);
  cam.rotation = random_rotation(rng, max_angle);
  cam.translation = Eigen::Vector3d(rng.uniform(-max_offset, max_offset), rng.uniform(-max_offset, max_offset),
                                    rng.uniform(-max_offset / 4, max_offset / 4));
  return cam;
}

// Camera at `x, y` with identity rotation, as in a planar grid rig.
inline PinholeCamera grid_camera(int w, int h, double x, double y) {
  PinholeCamera cam;
  cam.width = w;
  cam.height = h;
  cam.intrinsics = intrinsics(w, w, h);
  cam.translation = Eigen::Vector3d(x, y, 0.0);
  return cam;
}

// ||a - b|| / max(||a||, ||b||), zero when both vanish.
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

// Central differences of a scalar function over every entry of `x`.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, std::span<double> x,
                                            double h = 1e-6) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double weighted_sum(std::span<const double> values, std::span<const double> weights) {
  double s = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) s += values[i] * weights[i];
  return s;
}

inline std::vector<double> to_vector(std::span<const double> s) { return {s.begin(), s.end()}; }

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing
