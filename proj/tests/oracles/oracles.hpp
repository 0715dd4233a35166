#pragma once

// Slow, direct reference implementations used only by the tests. None of these
// share code with the library beyond its data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <vector>

#include "mpiforge/array.hpp"
#include "mpiforge/geometry.hpp"
#include "mpiforge/neural.hpp"

namespace oracle {

using mpiforge::Array;
using mpiforge::PinholeCamera;

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

inline Mat3 to_mat(const Eigen::Matrix3d& m) {
  Mat3 out{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out[r][c] = m(r, c);
  return out;
}

inline Vec3 mul(const Mat3& m, const Vec3& v) {
  Vec3 out{};
  for (int r = 0; r < 3; ++r) out[r] = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2];
  return out;
}

inline Mat3 transpose(const Mat3& m) {
  Mat3 out{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) out[r][c] = m[c][r];
  return out;
}

// Cofactor inverse.
inline Mat3 inverse(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 out{};
  out[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  out[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  out[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  out[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  out[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  out[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  out[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  out[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  out[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return out;
}

inline Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 vec(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

using Pixel = std::array<double, 2>;

// Camera-frame point -> pixel, written out by hand.
inline std::optional<Pixel> project(const PinholeCamera& cam, const Vec3& world) {
  const Vec3 local = mul(transpose(to_mat(cam.rotation)), sub(world, vec(cam.translation)));
  if (local[2] <= 0.0) return std::nullopt;
  const Vec3 p = mul(to_mat(cam.intrinsics), local);
  return Pixel{p[0] / p[2], p[1] / p[2]};
}

// Rig-frame direction of the ray through pixel (u, v).
inline Vec3 ray_direction(const PinholeCamera& cam, double u, double v) {
  return mul(to_mat(cam.rotation), mul(inverse(to_mat(cam.intrinsics)), Vec3{u, v, 1.0}));
}

// Reference pixel (u, v) lifted to reference depth z (possibly infinite) and
// seen from `other`.
inline std::optional<Pixel> transfer(const PinholeCamera& ref, const PinholeCamera& other, double u, double v,
                                     double z) {
  const Vec3 dir = ray_direction(ref, u, v);
  if (std::isinf(z)) {
    const Vec3 local = mul(transpose(to_mat(other.rotation)), dir);
    if (local[2] <= 0.0) return std::nullopt;
    const Vec3 p = mul(to_mat(other.intrinsics), local);
    return Pixel{p[0] / p[2], p[1] / p[2]};
  }
  const Vec3 ref_point = scale(mul(inverse(to_mat(ref.intrinsics)), Vec3{u, v, 1.0}), z);
  const Vec3 world = add(mul(to_mat(ref.rotation), ref_point), vec(ref.translation));
  return project(other, world);
}

// Pixel (u, v) of `view` followed along its ray to the reference plane at
// depth z, then projected into the reference camera.
inline std::optional<Pixel> back_transfer(const PinholeCamera& ref, const PinholeCamera& view, double u, double v,
                                          double z) {
  const Vec3 dir = ray_direction(view, u, v);
  if (std::isinf(z)) {
    const Vec3 local = mul(transpose(to_mat(ref.rotation)), dir);
    if (local[2] <= 0.0) return std::nullopt;
    const Vec3 p = mul(to_mat(ref.intrinsics), local);
    return Pixel{p[0] / p[2], p[1] / p[2]};
  }
  const Vec3 normal{ref.rotation(0, 2), ref.rotation(1, 2), ref.rotation(2, 2)};
  const Vec3 origin = vec(view.translation);
  const double denom = dot(normal, dir);
  if (denom == 0.0) return std::nullopt;
  const double t = (z - dot(normal, sub(origin, vec(ref.translation)))) / denom;
  if (t <= 0.0) return std::nullopt;
  return project(ref, add(origin, scale(dir, t)));
}

// Bilinear sample of channel c of an interleaved h x w x channels plane, with
// zeros outside.
inline double bilinear(const double* plane, int w, int h, int channels, int c, double x, double y) {
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const double ax = x - x0, ay = y - y0;
  double acc = 0.0;
  for (int dy = 0; dy < 2; ++dy) {
    for (int dx = 0; dx < 2; ++dx) {
      const int xi = x0 + dx, yi = y0 + dy;
      if (xi < 0 || xi >= w || yi < 0 || yi >= h) continue;
      const double wt = (dx ? ax : 1 - ax) * (dy ? ay : 1 - ay);
      acc += wt * plane[(static_cast<std::size_t>(yi) * w + xi) * channels + c];
    }
  }
  return acc;
}

inline bool in_frame(const Pixel& p, int w, int h) {
  return p[0] >= 0.0 && p[0] <= w - 1.0 && p[1] >= 0.0 && p[1] <= h - 1.0;
}

struct Clues {
  Array total;     // [D][H][W], divided by N
  Array mean;      // [3][D][H][W]
  Array variance;  // [3][D][H][W]
  Array psv;       // [N][D][H][W][4]
};

// Visual clues from first principles: per-ray transfers, per-view visibility
// products and plain weighted moments.
inline Clues clues(const Array& images, const std::vector<PinholeCamera>& views, const PinholeCamera& ref,
                   const std::vector<double>& depths, const Array& alphas) {
  const int n = static_cast<int>(views.size()), nd = static_cast<int>(depths.size());
  const int H = ref.height, W = ref.width;
  const int vh = views[0].height, vw = views[0].width;
  Clues out{Array({static_cast<std::size_t>(nd), static_cast<std::size_t>(H), static_cast<std::size_t>(W)}),
            Array({3, static_cast<std::size_t>(nd), static_cast<std::size_t>(H), static_cast<std::size_t>(W)}),
            Array({3, static_cast<std::size_t>(nd), static_cast<std::size_t>(H), static_cast<std::size_t>(W)}),
            Array({static_cast<std::size_t>(n), static_cast<std::size_t>(nd), static_cast<std::size_t>(H),
                   static_cast<std::size_t>(W), 4})};
  std::vector<std::vector<double>> weight(n, std::vector<double>(static_cast<std::size_t>(nd) * H * W));
  for (int i = 0; i < n; ++i) {
    // Opacity of every plane seen from view i, then visibility there.
    std::vector<double> va(static_cast<std::size_t>(nd) * vh * vw, 0.0);
    for (int d = 0; d < nd; ++d) {
      for (int y = 0; y < vh; ++y) {
        for (int x = 0; x < vw; ++x) {
          const auto p = back_transfer(ref, views[i], x, y, depths[d]);
          if (!p) continue;
          va[(static_cast<std::size_t>(d) * vh + y) * vw + x] =
              bilinear(alphas.data() + static_cast<std::size_t>(d) * H * W, W, H, 1, 0, (*p)[0], (*p)[1]);
        }
      }
    }
    std::vector<double> vis(va.size(), 1.0);
    for (int d = 0; d < nd; ++d) {
      for (int q = 0; q < vh * vw; ++q) {
        double prod = 1.0;
        for (int k = d + 1; k < nd; ++k) prod *= 1.0 - va[static_cast<std::size_t>(k) * vh * vw + q];
        vis[static_cast<std::size_t>(d) * vh * vw + q] = prod;
      }
    }
    const double* img = images.data() + static_cast<std::size_t>(i) * vh * vw * 3;
    for (int d = 0; d < nd; ++d) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const std::size_t vox = (static_cast<std::size_t>(d) * H + y) * W + x;
          const auto p = transfer(ref, views[i], x, y, depths[d]);
          if (!p || !in_frame(*p, vw, vh)) continue;
          weight[i][vox] = bilinear(vis.data() + static_cast<std::size_t>(d) * vh * vw, vw, vh, 1, 0, (*p)[0], (*p)[1]);
          double* psv = out.psv.data() + (static_cast<std::size_t>(i) * nd * H * W + vox) * 4;
          for (int c = 0; c < 3; ++c) psv[c] = bilinear(img, vw, vh, 3, c, (*p)[0], (*p)[1]);
          psv[3] = 1.0;
        }
      }
    }
  }
  const std::size_t voxels = static_cast<std::size_t>(nd) * H * W;
  for (std::size_t v = 0; v < voxels; ++v) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += weight[i][v];
    out.total[v] = s / n;
    if (s < 1e-8) continue;
    for (int c = 0; c < 3; ++c) {
      double m = 0.0;
      for (int i = 0; i < n; ++i) m += weight[i][v] * out.psv[(i * voxels + v) * 4 + c];
      m /= s;
      double var = 0.0;
      for (int i = 0; i < n; ++i) {
        const double diff = out.psv[(i * voxels + v) * 4 + c] - m;
        var += weight[i][v] * diff * diff;
      }
      out.mean[c * voxels + v] = m;
      out.variance[c * voxels + v] = var / s;
    }
  }
  return out;
}

// Renders an RGBA MPI [D][H][W][4] at `target` by following each target ray
// to every plane and compositing back to front.
inline Array render(const Array& mpi, const PinholeCamera& ref, const std::vector<double>& depths,
                    const PinholeCamera& target, Array* alpha_out = nullptr) {
  const int nd = static_cast<int>(depths.size()), H = ref.height, W = ref.width;
  Array rgb({static_cast<std::size_t>(target.height), static_cast<std::size_t>(target.width), 3});
  if (alpha_out) *alpha_out = Array({static_cast<std::size_t>(target.height), static_cast<std::size_t>(target.width)});
  for (int y = 0; y < target.height; ++y) {
    for (int x = 0; x < target.width; ++x) {
      double acc[4] = {0, 0, 0, 0};
      for (int d = 0; d < nd; ++d) {
        const auto p = back_transfer(ref, target, x, y, depths[d]);
        if (!p) continue;
        const double* plane = mpi.data() + static_cast<std::size_t>(d) * H * W * 4;
        double s[4];
        for (int c = 0; c < 4; ++c) s[c] = bilinear(plane, W, H, 4, c, (*p)[0], (*p)[1]);
        for (int c = 0; c < 3; ++c) acc[c] = s[3] * s[c] + (1.0 - s[3]) * acc[c];
        acc[3] = s[3] + (1.0 - s[3]) * acc[3];
      }
      for (int c = 0; c < 3; ++c) rgb(y, x, c) = acc[c];
      if (alpha_out) (*alpha_out)(y, x) = acc[3];
    }
  }
  return rgb;
}

// Seven nested loops; input index = o * stride + k - 1.
inline mpiforge::FeatureVolume conv3d(const mpiforge::FeatureVolume& in, const mpiforge::Conv3dLayer& layer,
                                      mpiforge::Boundary boundary) {
  const int s = layer.stride;
  mpiforge::FeatureVolume out(layer.out_channels, in.depth / s, in.height / s, in.width / s);
  const auto at = [&](int c, int d, int h, int w) -> double {
    if (boundary == mpiforge::Boundary::Periodic) {
      d = (d + in.depth) % in.depth;
      h = (h + in.height) % in.height;
      w = (w + in.width) % in.width;
    } else if (d < 0 || d >= in.depth || h < 0 || h >= in.height || w < 0 || w >= in.width) {
      return 0.0;
    }
    return in.data[((static_cast<std::size_t>(c) * in.depth + d) * in.height + h) * in.width + w];
  };
  for (int co = 0; co < layer.out_channels; ++co)
    for (int od = 0; od < out.depth; ++od)
      for (int oh = 0; oh < out.height; ++oh)
        for (int ow = 0; ow < out.width; ++ow) {
          double acc = layer.bias[co];
          for (int ci = 0; ci < layer.in_channels; ++ci)
            for (int kd = 0; kd < 3; ++kd)
              for (int kh = 0; kh < 3; ++kh)
                for (int kw = 0; kw < 3; ++kw) {
                  const double wt =
                      layer.kernel[(((static_cast<std::size_t>(co) * layer.in_channels + ci) * 3 + kd) * 3 + kh) * 3 +
                                   kw];
                  acc += wt * at(ci, od * s + kd - 1, oh * s + kh - 1, ow * s + kw - 1);
                }
          out.data[((static_cast<std::size_t>(co) * out.depth + od) * out.height + oh) * out.width + ow] = acc;
        }
  return out;
}

inline mpiforge::FeatureVolume instance_norm(const mpiforge::FeatureVolume& in, const std::vector<double>& scale,
                                             const std::vector<double>& shift) {
  mpiforge::FeatureVolume out = in;
  const std::size_t n = in.voxels();
  for (int c = 0; c < in.channels; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += in.channel(c)[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (in.channel(c)[i] - mean) * (in.channel(c)[i] - mean);
    var /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      out.channel(c)[i] = scale[c] * (in.channel(c)[i] - mean) / std::sqrt(var + 1e-5) + shift[c];
    }
  }
  return out;
}

// Sample position (j + 0.5) / 2 - 0.5 along each axis.
inline mpiforge::FeatureVolume upsample(const mpiforge::FeatureVolume& in, mpiforge::Boundary boundary) {
  mpiforge::FeatureVolume out(in.channels, 2 * in.depth, 2 * in.height, 2 * in.width);
  const auto axis = [&](int j, int n, int& lo, int& hi, double& frac) {
    double x = (j + 0.5) / 2.0 - 0.5;
    if (boundary == mpiforge::Boundary::Periodic) {
      lo = static_cast<int>(std::floor(x));
      frac = x - lo;
      hi = (lo + 1 + n) % n;
      lo = (lo + n) % n;
    } else {
      x = std::clamp(x, 0.0, n - 1.0);
      lo = static_cast<int>(std::floor(x));
      hi = std::min(lo + 1, n - 1);
      frac = x - lo;
    }
  };
  for (int c = 0; c < in.channels; ++c)
    for (int d = 0; d < out.depth; ++d)
      for (int h = 0; h < out.height; ++h)
        for (int w = 0; w < out.width; ++w) {
          int d0, d1, h0, h1, w0, w1;
          double fd, fh, fw;
          axis(d, in.depth, d0, d1, fd);
          axis(h, in.height, h0, h1, fh);
          axis(w, in.width, w0, w1, fw);
          double acc = 0.0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) {
                const double wt = (a ? fd : 1 - fd) * (b ? fh : 1 - fh) * (e ? fw : 1 - fw);
                const int dd = a ? d1 : d0, hh = b ? h1 : h0, ww = e ? w1 : w0;
                acc += wt * in.data[((static_cast<std::size_t>(c) * in.depth + dd) * in.height + hh) * in.width + ww];
              }
          out.data[((static_cast<std::size_t>(c) * out.depth + d) * out.height + h) * out.width + w] = acc;
        }
  return out;
}

// Mean SSIM over every valid window position, each window summed directly
// with 2D Gaussian weights.
inline double ssim(const Array& x, const Array& y, int window = 11, double sigma = 1.5) {
  const int H = static_cast<int>(x.dim(0)), W = static_cast<int>(x.dim(1)), C = static_cast<int>(x.dim(2));
  int win = std::min({window, H, W});
  if (win % 2 == 0) --win;
  std::vector<double> g(static_cast<std::size_t>(win) * win);
  double total_w = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      const double di = i - win / 2, dj = j - win / 2;
      g[i * win + j] = std::exp(-(di * di + dj * dj) / (2 * sigma * sigma));
      total_w += g[i * win + j];
    }
  for (double& v : g) v /= total_w;
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double sum = 0.0;
  int count = 0;
  for (int c = 0; c < C; ++c)
    for (int r = 0; r + win <= H; ++r)
      for (int q = 0; q + win <= W; ++q) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int i = 0; i < win; ++i)
          for (int j = 0; j < win; ++j) {
            const double a = x(r + i, q + j, c), b = y(r + i, q + j, c), wt = g[i * win + j];
            mx += wt * a;
            my += wt * b;
            xx += wt * a * a;
            yy += wt * b * b;
            xy += wt * a * b;
          }
        const double vx = xx - mx * mx, vy = yy - my * my, cxy = xy - mx * my;
        sum += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
  return sum / count;
}

}  // namespace oracle
