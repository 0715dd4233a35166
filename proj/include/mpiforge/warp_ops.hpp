#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpiforge/array.hpp"
#include "mpiforge/geometry.hpp"

namespace mpiforge {

// N input views, pixels laid out [N][H][W][3] in [0, 1].
struct ImageStack {
  Array pixels;
  std::vector<PinholeCamera> views;

  [[nodiscard]] std::size_t count() const { return views.size(); }
  [[nodiscard]] int width() const { return views.empty() ? 0 : views.front().width; }
  [[nodiscard]] int height() const { return views.empty() ? 0 : views.front().height; }
};

// The named views of `all`, in the order given. Throws std::domain_error for
// unknown names.
ImageStack select_views(const ImageStack& all, std::span<const std::string> names);
ImageStack select_views(const ImageStack& all, std::span<const std::size_t> indices);

// Plane-sweep volumes of every view in the reference frame, [N][D][H][W][4].
// Channel 3 is the in-frame mask and RGB is zero wherever the mask is zero.
struct PsvStack {
  Array data;
  DepthPlanes planes;
  PinholeCamera reference;
  std::vector<PinholeCamera> views;
};

// Reference-frame content warped into each view frame, [N][D][H][W][C].
struct ViewVolumeStack {
  Array data;
  DepthPlanes planes;
  std::vector<PinholeCamera> views;
};

// Bilinear gather from a source camera's planes into a destination camera's
// planes, precomputed for one camera pair over every depth plane. Integer
// coordinates are pixel centres; the frame is [0, W-1] x [0, H-1].
class PlaneWarp {
 public:
  // Destination is the reference camera, source is `view` (plane sweep).
  // Samples outside the source frame get no taps, so their mask and value are 0.
  static PlaneWarp toward_reference(const PinholeCamera& reference, const PinholeCamera& view,
                                    const DepthPlanes& planes);
  // Destination is `view`, source is the reference camera (MPI rendering).
  // Samples straddling the source border blend with zero padding.
  static PlaneWarp toward_view(const PinholeCamera& reference, const PinholeCamera& view,
                               const DepthPlanes& planes);

  // src: [D][src_h][src_w][C], dst: [D][dst_h][dst_w][C] (overwritten).
  void gather(const double* src, double* dst, std::size_t channels) const;
  // Adjoint of gather; accumulates into grad_src.
  void scatter_add(const double* grad_dst, double* grad_src, std::size_t channels) const;

  // 1 if the sample for (plane, dst pixel) lies inside the source frame.
  [[nodiscard]] double mask(std::size_t plane, std::size_t pixel) const {
    return samples_[plane * dst_pixels() + pixel].inside ? 1.0 : 0.0;
  }

  [[nodiscard]] std::size_t depth() const { return depth_; }
  [[nodiscard]] std::size_t dst_pixels() const { return static_cast<std::size_t>(dst_w_) * dst_h_; }
  [[nodiscard]] std::size_t src_pixels() const { return static_cast<std::size_t>(src_w_) * src_h_; }
  [[nodiscard]] int dst_width() const { return dst_w_; }
  [[nodiscard]] int dst_height() const { return dst_h_; }

 private:
  struct Sample {
    std::int32_t index[4] = {-1, -1, -1, -1};
    double weight[4] = {0, 0, 0, 0};
    bool inside = false;
  };

  static PlaneWarp build(const std::vector<Eigen::Matrix3d>& homographies, int dst_w, int dst_h, int src_w,
                         int src_h, bool taps_only_inside);

  std::vector<Sample> samples_;
  std::size_t depth_ = 0;
  int dst_w_ = 0, dst_h_ = 0, src_w_ = 0, src_h_ = 0;
};

// Both warp directions for every view of a rig.
struct RigWarps {
  std::vector<PlaneWarp> to_reference;
  std::vector<PlaneWarp> to_view;
};

RigWarps build_rig_warps(const PinholeCamera& reference, std::span<const PinholeCamera> views,
                         const DepthPlanes& planes);

// Tiles the images along a new depth axis and appends a unit mask channel:
// [N][H][W][3] -> [N][D][H][W][4].
Array broadcast_depth(const ImageStack& images, const DepthPlanes& planes);
// Adjoint of broadcast_depth restricted to the RGB channels: [N][D][H][W][4] -> [N][H][W][3].
Array broadcast_depth_backward(const Array& grad);

PsvStack warp_to_reference(const Array& broadcast, const PinholeCamera& reference,
                           std::span<const PinholeCamera> views, const DepthPlanes& planes);
// Gradient of the PSV RGB channels with respect to the broadcast input. The
// mask channel carries no gradient.
Array warp_to_reference_backward(const Array& grad_psv, const PinholeCamera& reference,
                                 std::span<const PinholeCamera> views, const DepthPlanes& planes);

// [D][H][W][C] -> [N][D][H][W][C]
Array broadcast_views(const Array& mpi_content, std::size_t n_views);
Array broadcast_views_backward(const Array& grad);

ViewVolumeStack warp_from_reference(const Array& broadcast_mpi, const PinholeCamera& reference,
                                    std::span<const PinholeCamera> views, const DepthPlanes& planes);
Array warp_from_reference_backward(const Array& grad_views, const PinholeCamera& reference,
                                   std::span<const PinholeCamera> views, const DepthPlanes& planes);

}  // namespace mpiforge
