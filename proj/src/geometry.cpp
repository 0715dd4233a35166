#include "mpiforge/geometry.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <Eigen/LU>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "mpiforge/array.hpp"

namespace mpiforge {

void validate_camera(const PinholeCamera& cam) {
  const auto& K = cam.intrinsics;
  require(K(1, 0) == 0.0 && K(2, 0) == 0.0 && K(2, 1) == 0.0,
          "camera '" + cam.name + "': intrinsics must be upper-triangular");
  require(K(2, 2) == 1.0, "camera '" + cam.name + "': K[2][2] must be 1");
  require(K(0, 0) > 0.0 && K(1, 1) > 0.0, "camera '" + cam.name + "': focal lengths must be positive");
  const Eigen::Matrix3d& R = cam.rotation;
  require((R.transpose() * R - Eigen::Matrix3d::Identity()).norm() < 1e-9,
          "camera '" + cam.name + "': rotation is not orthonormal");
  require(std::abs(R.determinant() - 1.0) < 1e-9, "camera '" + cam.name + "': rotation determinant must be +1");
  require(cam.width > 0 && cam.height > 0, "camera '" + cam.name + "': resolution must be positive");
}

PinholeCamera relative_to(const PinholeCamera& reference, const PinholeCamera& other) {
  PinholeCamera rel = other;
  rel.rotation = reference.rotation.transpose() * other.rotation;
  rel.translation = reference.rotation.transpose() * (other.translation - reference.translation);
  return rel;
}

Eigen::Vector3d world_to_camera(const PinholeCamera& cam, const Eigen::Vector3d& world_point) {
  return cam.rotation.transpose() * (world_point - cam.translation);
}

Eigen::Vector3d camera_to_world(const PinholeCamera& cam, const Eigen::Vector3d& cam_point) {
  return cam.rotation * cam_point + cam.translation;
}

ProjectedPoint project_point(const PinholeCamera& cam, const Eigen::Vector3d& cam_point) {
  require(cam_point.z() > 0.0, "project_point: point must have positive depth");
  const Eigen::Vector3d p = cam.intrinsics * cam_point;
  return {p.x() / p.z(), p.y() / p.z(), cam_point.z()};
}

Eigen::Vector3d unproject_pixel(const PinholeCamera& cam, double u, double v, double depth) {
  require(depth > 0.0, "unproject_pixel: depth must be positive");
  const Eigen::Vector3d ray = cam.intrinsics.inverse() * Eigen::Vector3d(u, v, 1.0);
  return ray * (depth / ray.z());
}

DepthPlanes make_depth_planes(int count, double z_far, double z_near) {
  require(count >= 2, "make_depth_planes: need at least 2 planes");
  require(z_near > 0.0 && std::isfinite(z_near), "make_depth_planes: z_near must be positive and finite");
  require(z_far > z_near, "make_depth_planes: z_far must exceed z_near");
  const double disp_far = std::isinf(z_far) ? 0.0 : 1.0 / z_far;
  const double disp_near = 1.0 / z_near;
  const double step = (disp_near - disp_far) / static_cast<double>(count - 1);
  DepthPlanes planes;
  planes.disparities.resize(count);
  planes.depths.resize(count);
  for (int d = 0; d < count; ++d) {
    const double disp = d == count - 1 ? disp_near : disp_far + step * static_cast<double>(d);
    planes.disparities[d] = disp;
    planes.depths[d] = disp == 0.0 ? std::numeric_limits<double>::infinity() : 1.0 / disp;
  }
  return planes;
}

Eigen::Matrix3d homography_at_disparity(const PinholeCamera& reference, const PinholeCamera& other,
                                        double disparity) {
  const Eigen::FullPivLU<Eigen::Matrix3d> lu(reference.intrinsics);
  require(lu.isInvertible(), "homography: reference intrinsics are singular");
  const PinholeCamera rel = relative_to(reference, other);
  const Eigen::Matrix3d KRt = other.intrinsics * rel.rotation.transpose();
  Eigen::Matrix3d H = KRt * lu.inverse();
  if (disparity != 0.0) H.col(2) -= disparity * (KRt * rel.translation);
  return H;
}

Homography homography_at_depth(const PinholeCamera& reference, const PinholeCamera& other, double z) {
  require(z > 0.0, "homography_at_depth: depth must be positive");
  const double disparity = std::isinf(z) ? 0.0 : 1.0 / z;
  return {homography_at_disparity(reference, other, disparity), z};
}

Eigen::Vector4d rotation_to_quaternion(const Eigen::Matrix3d& rotation) {
  Eigen::Quaterniond q(rotation);
  q.normalize();
  Eigen::Vector4d v(q.w(), q.x(), q.y(), q.z());
  if (v[0] < 0.0) v = -v;
  return v;
}

Eigen::Matrix3d quaternion_to_rotation(const Eigen::Vector4d& q) {
  Eigen::Quaterniond quat(q[0], q[1], q[2], q[3]);
  quat.normalize();
  return quat.toRotationMatrix();
}

namespace {

// Lexicographic key over every numeric field; fixes the summation order.
std::vector<double> camera_key(const PinholeCamera& cam) {
  std::vector<double> key;
  key.reserve(23);
  for (int i = 0; i < 3; ++i) key.push_back(cam.translation[i]);
  for (int i = 0; i < 9; ++i) key.push_back(cam.rotation.data()[i]);
  for (int i = 0; i < 9; ++i) key.push_back(cam.intrinsics.data()[i]);
  key.push_back(cam.width);
  key.push_back(cam.height);
  return key;
}

}  // namespace

PinholeCamera average_reference_camera(std::span<const PinholeCamera> cameras) {
  require(!cameras.empty(), "average_reference_camera: empty camera list");
  for (const auto& cam : cameras) {
    require(cam.width == cameras.front().width && cam.height == cameras.front().height,
            "average_reference_camera: cameras must share a resolution");
  }
  std::vector<std::size_t> order(cameras.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::vector<double>> keys;
  keys.reserve(cameras.size());
  for (const auto& cam : cameras) keys.push_back(camera_key(cam));
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });

  const double n = static_cast<double>(cameras.size());
  Eigen::Vector3d centre = Eigen::Vector3d::Zero();
  Eigen::Matrix3d K = Eigen::Matrix3d::Zero();
  Eigen::Matrix4d accumulator = Eigen::Matrix4d::Zero();
  const Eigen::Vector4d q_first = rotation_to_quaternion(cameras[order.front()].rotation);
  for (std::size_t idx : order) {
    const auto& cam = cameras[idx];
    centre += cam.translation;
    K += cam.intrinsics;
    Eigen::Vector4d q = rotation_to_quaternion(cam.rotation);
    if (q.dot(q_first) < 0.0) q = -q;
    accumulator += q * q.transpose();
  }

  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> solver(accumulator);
  Eigen::Vector4d q_mean = solver.eigenvectors().col(3);
  if (q_mean.dot(q_first) < 0.0) q_mean = -q_mean;

  PinholeCamera ref;
  ref.translation = centre / n;
  ref.intrinsics = K / n;
  ref.intrinsics(1, 0) = ref.intrinsics(2, 0) = ref.intrinsics(2, 1) = 0.0;
  ref.intrinsics(2, 2) = 1.0;
  ref.rotation = quaternion_to_rotation(q_mean);
  ref.width = cameras.front().width;
  ref.height = cameras.front().height;
  ref.name = "reference";
  return ref;
}

double max_interplane_displacement(const PinholeCamera& reference,
                                   std::span<const PinholeCamera> views, const DepthPlanes& planes) {
  const double w = reference.width - 1.0;
  const double h = reference.height - 1.0;
  const Eigen::Vector3d probes[] = {{0, 0, 1}, {w, 0, 1}, {0, h, 1}, {w, h, 1}, {w / 2, h / 2, 1}};
  double worst = 0.0;
  for (const auto& view : views) {
    for (std::size_t d = 0; d + 1 < planes.count(); ++d) {
      const Eigen::Matrix3d H0 = homography_at_disparity(reference, view, planes.disparities[d]);
      const Eigen::Matrix3d H1 = homography_at_disparity(reference, view, planes.disparities[d + 1]);
      for (const auto& p : probes) {
        const Eigen::Vector3d a = H0 * p;
        const Eigen::Vector3d b = H1 * p;
        worst = std::max(worst, (a.hnormalized() - b.hnormalized()).norm());
      }
    }
  }
  return worst;
}

}  // namespace mpiforge
