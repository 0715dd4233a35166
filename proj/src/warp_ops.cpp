#include "mpiforge/warp_ops.hpp"

#include <Eigen/LU>
#include <algorithm>
#include <cmath>

#include "mpiforge/parallel.hpp"

namespace mpiforge {

PlaneWarp PlaneWarp::build(const std::vector<Eigen::Matrix3d>& homographies, int dst_w, int dst_h, int src_w,
                           int src_h, bool taps_only_inside) {
  PlaneWarp warp;
  warp.depth_ = homographies.size();
  warp.dst_w_ = dst_w;
  warp.dst_h_ = dst_h;
  warp.src_w_ = src_w;
  warp.src_h_ = src_h;
  warp.samples_.resize(warp.depth_ * warp.dst_pixels());
  const double max_x = src_w - 1.0;
  const double max_y = src_h - 1.0;
  for (std::size_t d = 0; d < warp.depth_; ++d) {
    const Eigen::Matrix3d& H = homographies[d];
    for (int v = 0; v < dst_h; ++v) {
      for (int u = 0; u < dst_w; ++u) {
        Sample& s = warp.samples_[(d * dst_h + v) * dst_w + u];
        if (!H.allFinite()) continue;
        const Eigen::Vector3d p = H * Eigen::Vector3d(u, v, 1.0);
        // Degenerate or behind the source camera.
        if (!(p.z() > 1e-12)) continue;
        const double x = p.x() / p.z();
        const double y = p.y() / p.z();
        s.inside = x >= 0.0 && x <= max_x && y >= 0.0 && y <= max_y;
        if (taps_only_inside && !s.inside) continue;
        if (!(x > -1.0 && x < src_w && y > -1.0 && y < src_h)) continue;
        const double fx0 = std::floor(x);
        const double fy0 = std::floor(y);
        const int x0 = static_cast<int>(fx0);
        const int y0 = static_cast<int>(fy0);
        const double ax = x - fx0;
        const double ay = y - fy0;
        const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
        const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
        const double ws[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        for (int t = 0; t < 4; ++t) {
          if (xs[t] < 0 || xs[t] >= src_w || ys[t] < 0 || ys[t] >= src_h || ws[t] == 0.0) continue;
          s.index[t] = ys[t] * src_w + xs[t];
          s.weight[t] = ws[t];
        }
      }
    }
  }
  return warp;
}

PlaneWarp PlaneWarp::toward_reference(const PinholeCamera& reference, const PinholeCamera& view,
                                      const DepthPlanes& planes) {
  std::vector<Eigen::Matrix3d> hs;
  hs.reserve(planes.count());
  for (double disp : planes.disparities) hs.push_back(homography_at_disparity(reference, view, disp));
  return build(hs, reference.width, reference.height, view.width, view.height, true);
}

PlaneWarp PlaneWarp::toward_view(const PinholeCamera& reference, const PinholeCamera& view,
                                 const DepthPlanes& planes) {
  std::vector<Eigen::Matrix3d> hs;
  hs.reserve(planes.count());
  for (double disp : planes.disparities) {
    const Eigen::FullPivLU<Eigen::Matrix3d> lu(homography_at_disparity(reference, view, disp));
    if (lu.isInvertible()) {
      hs.push_back(lu.inverse());
    } else {
      hs.push_back(Eigen::Matrix3d::Constant(std::nan("")));
    }
  }
  return build(hs, view.width, view.height, reference.width, reference.height, false);
}

void PlaneWarp::gather(const double* src, double* dst, std::size_t channels) const {
  const std::size_t dst_n = dst_pixels();
  const std::size_t src_n = src_pixels();
  parallel_for(0, depth_, [&](std::size_t d) {
    const double* src_plane = src + d * src_n * channels;
    double* dst_plane = dst + d * dst_n * channels;
    for (std::size_t p = 0; p < dst_n; ++p) {
      const Sample& s = samples_[d * dst_n + p];
      double* out = dst_plane + p * channels;
      for (std::size_t c = 0; c < channels; ++c) out[c] = 0.0;
      for (int t = 0; t < 4; ++t) {
        if (s.index[t] < 0) continue;
        const double* in = src_plane + static_cast<std::size_t>(s.index[t]) * channels;
        for (std::size_t c = 0; c < channels; ++c) out[c] += s.weight[t] * in[c];
      }
    }
  });
}

void PlaneWarp::scatter_add(const double* grad_dst, double* grad_src, std::size_t channels) const {
  const std::size_t dst_n = dst_pixels();
  const std::size_t src_n = src_pixels();
  // Planes are independent, so the per-plane scatter order is fixed.
  parallel_for(0, depth_, [&](std::size_t d) {
    const double* g_plane = grad_dst + d * dst_n * channels;
    double* src_plane = grad_src + d * src_n * channels;
    for (std::size_t p = 0; p < dst_n; ++p) {
      const Sample& s = samples_[d * dst_n + p];
      const double* g = g_plane + p * channels;
      for (int t = 0; t < 4; ++t) {
        if (s.index[t] < 0) continue;
        double* out = src_plane + static_cast<std::size_t>(s.index[t]) * channels;
        for (std::size_t c = 0; c < channels; ++c) out[c] += s.weight[t] * g[c];
      }
    }
  });
}

ImageStack select_views(const ImageStack& all, std::span<const std::size_t> indices) {
  require(all.pixels.rank() == 4 && all.pixels.dim(0) == all.views.size(), "select_views: malformed image stack");
  const std::size_t slice = all.pixels.stride0();
  ImageStack out{Array({indices.size(), all.pixels.dim(1), all.pixels.dim(2), all.pixels.dim(3)}), {}};
  for (std::size_t k = 0; k < indices.size(); ++k) {
    require(indices[k] < all.views.size(), "select_views: view index out of range");
    std::copy_n(all.pixels.data() + indices[k] * slice, slice, out.pixels.data() + k * slice);
    out.views.push_back(all.views[indices[k]]);
  }
  return out;
}

ImageStack select_views(const ImageStack& all, std::span<const std::string> names) {
  std::vector<std::size_t> indices;
  for (const auto& name : names) {
    const auto it = std::find_if(all.views.begin(), all.views.end(),
                                 [&](const PinholeCamera& cam) { return cam.name == name; });
    require(it != all.views.end(), "select_views: no view named '" + name + "'");
    indices.push_back(static_cast<std::size_t>(it - all.views.begin()));
  }
  return select_views(all, std::span<const std::size_t>(indices));
}

RigWarps build_rig_warps(const PinholeCamera& reference, std::span<const PinholeCamera> views,
                         const DepthPlanes& planes) {
  RigWarps rig;
  rig.to_reference.reserve(views.size());
  rig.to_view.reserve(views.size());
  for (const auto& view : views) {
    rig.to_reference.push_back(PlaneWarp::toward_reference(reference, view, planes));
    rig.to_view.push_back(PlaneWarp::toward_view(reference, view, planes));
  }
  return rig;
}

Array broadcast_depth(const ImageStack& images, const DepthPlanes& planes) {
  const auto& px = images.pixels;
  require(px.rank() == 4 && px.dim(3) == 3, "broadcast_depth: images must be [N][H][W][3]");
  const std::size_t n = px.dim(0), h = px.dim(1), w = px.dim(2), depth = planes.count();
  Array out({n, depth, h, w, 4});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < depth; ++d) {
      for (std::size_t p = 0; p < h * w; ++p) {
        const double* in = px.data() + (i * h * w + p) * 3;
        double* o = out.data() + ((i * depth + d) * h * w + p) * 4;
        o[0] = in[0];
        o[1] = in[1];
        o[2] = in[2];
        o[3] = 1.0;
      }
    }
  }
  return out;
}

Array broadcast_depth_backward(const Array& grad) {
  require(grad.rank() == 5 && grad.dim(4) == 4, "broadcast_depth_backward: expected [N][D][H][W][4]");
  const std::size_t n = grad.dim(0), depth = grad.dim(1), h = grad.dim(2), w = grad.dim(3);
  Array out({n, h, w, 3});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t d = 0; d < depth; ++d) {
      for (std::size_t p = 0; p < h * w; ++p) {
        const double* g = grad.data() + ((i * depth + d) * h * w + p) * 4;
        double* o = out.data() + (i * h * w + p) * 3;
        o[0] += g[0];
        o[1] += g[1];
        o[2] += g[2];
      }
    }
  }
  return out;
}

PsvStack warp_to_reference(const Array& broadcast, const PinholeCamera& reference,
                           std::span<const PinholeCamera> views, const DepthPlanes& planes) {
  require(broadcast.rank() == 5 && broadcast.dim(4) == 4, "warp_to_reference: expected [N][D][H][W][4]");
  require(broadcast.dim(0) == views.size(), "warp_to_reference: view count does not match the stack");
  require(broadcast.dim(1) == planes.count(), "warp_to_reference: plane count does not match the stack");
  const std::size_t n = views.size(), depth = planes.count();
  const std::size_t h = reference.height, w = reference.width;
  PsvStack psv;
  psv.data = Array({n, depth, h, w, 4});
  psv.planes = planes;
  psv.reference = reference;
  psv.views.assign(views.begin(), views.end());
  const std::size_t src_slice = broadcast.stride0();
  for (std::size_t i = 0; i < n; ++i) {
    const PlaneWarp warp = PlaneWarp::toward_reference(reference, views[i], planes);
    require(warp.src_pixels() * depth * 4 == src_slice, "warp_to_reference: view resolution mismatch");
    double* dst = psv.data.data() + i * psv.data.stride0();
    warp.gather(broadcast.data() + i * src_slice, dst, 4);
    for (std::size_t d = 0; d < depth; ++d) {
      for (std::size_t p = 0; p < h * w; ++p) dst[(d * h * w + p) * 4 + 3] = warp.mask(d, p);
    }
  }
  return psv;
}

Array warp_to_reference_backward(const Array& grad_psv, const PinholeCamera& reference,
                                 std::span<const PinholeCamera> views, const DepthPlanes& planes) {
  require(grad_psv.rank() == 5 && grad_psv.dim(0) == views.size(), "warp_to_reference_backward: bad shape");
  const std::size_t n = views.size(), depth = planes.count();
  Array grad({n, depth, static_cast<std::size_t>(views.front().height),
              static_cast<std::size_t>(views.front().width), 4});
  Array g_rgb = grad_psv;
  for (std::size_t i = 3; i < g_rgb.size(); i += 4) g_rgb[i] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const PlaneWarp warp = PlaneWarp::toward_reference(reference, views[i], planes);
    warp.scatter_add(g_rgb.data() + i * g_rgb.stride0(), grad.data() + i * grad.stride0(), 4);
  }
  return grad;
}

Array broadcast_views(const Array& mpi_content, std::size_t n_views) {
  require(n_views >= 1, "broadcast_views: need at least one view");
  std::vector<std::size_t> shape{n_views};
  shape.insert(shape.end(), mpi_content.shape().begin(), mpi_content.shape().end());
  Array out(shape);
  for (std::size_t i = 0; i < n_views; ++i) {
    std::copy(mpi_content.values().begin(), mpi_content.values().end(), out.data() + i * mpi_content.size());
  }
  return out;
}

Array broadcast_views_backward(const Array& grad) {
  std::vector<std::size_t> shape(grad.shape().begin() + 1, grad.shape().end());
  Array out(shape);
  const std::size_t slice = grad.stride0();
  for (std::size_t i = 0; i < grad.dim(0); ++i) {
    for (std::size_t j = 0; j < slice; ++j) out[j] += grad[i * slice + j];
  }
  return out;
}

ViewVolumeStack warp_from_reference(const Array& broadcast_mpi, const PinholeCamera& reference,
                                    std::span<const PinholeCamera> views, const DepthPlanes& planes) {
  require(broadcast_mpi.rank() == 5, "warp_from_reference: expected [N][D][H][W][C]");
  require(broadcast_mpi.dim(0) == views.size(), "warp_from_reference: view count does not match the stack");
  require(broadcast_mpi.dim(1) == planes.count(), "warp_from_reference: plane count does not match the stack");
  require(broadcast_mpi.dim(2) == static_cast<std::size_t>(reference.height) &&
              broadcast_mpi.dim(3) == static_cast<std::size_t>(reference.width),
          "warp_from_reference: volume does not match the reference resolution");
  const std::size_t n = views.size(), depth = planes.count(), channels = broadcast_mpi.dim(4);
  ViewVolumeStack out;
  out.planes = planes;
  out.views.assign(views.begin(), views.end());
  out.data = Array({n, depth, static_cast<std::size_t>(views.front().height),
                    static_cast<std::size_t>(views.front().width), channels});
  for (std::size_t i = 0; i < n; ++i) {
    require(views[i].width == views.front().width && views[i].height == views.front().height,
            "warp_from_reference: all views must share a resolution");
    const PlaneWarp warp = PlaneWarp::toward_view(reference, views[i], planes);
    warp.gather(broadcast_mpi.data() + i * broadcast_mpi.stride0(), out.data.data() + i * out.data.stride0(),
                channels);
  }
  return out;
}

Array warp_from_reference_backward(const Array& grad_views, const PinholeCamera& reference,
                                   std::span<const PinholeCamera> views, const DepthPlanes& planes) {
  require(grad_views.rank() == 5 && grad_views.dim(0) == views.size(), "warp_from_reference_backward: bad shape");
  const std::size_t n = views.size(), depth = planes.count(), channels = grad_views.dim(4);
  Array grad({n, depth, static_cast<std::size_t>(reference.height), static_cast<std::size_t>(reference.width),
              channels});
  for (std::size_t i = 0; i < n; ++i) {
    const PlaneWarp warp = PlaneWarp::toward_view(reference, views[i], planes);
    warp.scatter_add(grad_views.data() + i * grad_views.stride0(), grad.data() + i * grad.stride0(), channels);
  }
  return grad;
}

}  // namespace mpiforge
