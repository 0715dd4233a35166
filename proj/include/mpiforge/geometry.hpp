#pragma once

#include <Eigen/Core>
#include <span>
#include <string>
#include <vector>

namespace mpiforge {

// Distortion-free pinhole camera. Poses live in a shared rig frame:
// `rotation` maps camera axes to rig axes and `translation` is the camera
// centre in rig coordinates, so a rig point X maps to camera coordinates
// rotation^T * (X - translation).
struct PinholeCamera {
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  int width = 0;
  int height = 0;
  std::string name;
};

// Throws std::domain_error unless K is upper-triangular with K(2,2) = 1 and
// positive focal lengths, R is a proper rotation, and the resolution is positive.
void validate_camera(const PinholeCamera& cam);

// Re-expresses `other` in the coordinate system of `reference`.
PinholeCamera relative_to(const PinholeCamera& reference, const PinholeCamera& other);

Eigen::Vector3d world_to_camera(const PinholeCamera& cam, const Eigen::Vector3d& world_point);
Eigen::Vector3d camera_to_world(const PinholeCamera& cam, const Eigen::Vector3d& cam_point);

struct ProjectedPoint {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

// Projects a point given in the camera frame. Requires positive depth.
ProjectedPoint project_point(const PinholeCamera& cam, const Eigen::Vector3d& cam_point);

// Inverse of project_point: the camera-frame point at `depth` behind pixel (u, v).
Eigen::Vector3d unproject_pixel(const PinholeCamera& cam, double u, double v, double depth);

// Fronto-parallel planes of the reference camera, back to front. Plane 0 is
// the farthest and may sit at +infinity (disparity 0). Disparities are
// equally spaced.
struct DepthPlanes {
  std::vector<double> depths;
  std::vector<double> disparities;

  [[nodiscard]] std::size_t count() const { return depths.size(); }
};

DepthPlanes make_depth_planes(int count, double z_far, double z_near);

struct Homography {
  Eigen::Matrix3d matrix = Eigen::Matrix3d::Identity();
  double plane_depth = 0.0;
};

// Maps homogeneous reference pixels on the plane at depth z to pixels of
// `other`: H = K R^T K_r^-1 - (1/z) [0 0 | K R^T T], with R, T the pose of
// `other` relative to `reference`. z may be +infinity.
Homography homography_at_depth(const PinholeCamera& reference, const PinholeCamera& other, double z);

// Same homography parameterised by disparity 1/z (0 for the plane at infinity).
Eigen::Matrix3d homography_at_disparity(const PinholeCamera& reference, const PinholeCamera& other,
                                        double disparity);

// Virtual reference camera for a set of views: mean centre, quaternion-average
// orientation and elementwise-mean intrinsics. Summation follows a canonical
// camera order, so the result does not depend on the input order.
PinholeCamera average_reference_camera(std::span<const PinholeCamera> cameras);

// Unit quaternion (w, x, y, z) of a rotation matrix, with w >= 0.
Eigen::Vector4d rotation_to_quaternion(const Eigen::Matrix3d& rotation);
Eigen::Matrix3d quaternion_to_rotation(const Eigen::Vector4d& q);

// Largest pixel displacement between adjacent planes for any of `views`,
// sampled at the reference image corners and centre.
double max_interplane_displacement(const PinholeCamera& reference,
                                   std::span<const PinholeCamera> views, const DepthPlanes& planes);

}  // namespace mpiforge
