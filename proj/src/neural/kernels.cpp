#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mpiforge/array.hpp"
#include "mpiforge/neural.hpp"
#include "mpiforge/parallel.hpp"

namespace mpiforge {

FeatureVolume::FeatureVolume(int c, int d, int h, int w, double fill)
    : channels(c), depth(d), height(h), width(w), data(static_cast<std::size_t>(c) * d * h * w, fill) {}

namespace {

int wrap(int i, int n) { return ((i % n) + n) % n; }

// Copies `in` into a volume with a one-voxel border on each spatial side.
FeatureVolume pad_one(const FeatureVolume& in, Boundary boundary) {
  const int D = in.depth, H = in.height, W = in.width;
  FeatureVolume out(in.channels, D + 2, H + 2, W + 2);
  for (int c = 0; c < in.channels; ++c) {
    const double* src = in.channel(c);
    double* dst = out.channel(c);
    for (int d = 0; d < D + 2; ++d) {
      for (int h = 0; h < H + 2; ++h) {
        double* row = dst + (static_cast<std::size_t>(d) * (H + 2) + h) * (W + 2);
        const bool interior = d >= 1 && d <= D && h >= 1 && h <= H;
        if (boundary == Boundary::Zero) {
          if (!interior) continue;
          std::copy_n(src + (static_cast<std::size_t>(d - 1) * H + (h - 1)) * W, W, row + 1);
        } else {
          const double* srow = src + (static_cast<std::size_t>(wrap(d - 1, D)) * H + wrap(h - 1, H)) * W;
          std::copy_n(srow, W, row + 1);
          row[0] = srow[W - 1];
          row[W + 1] = srow[0];
        }
      }
    }
  }
  return out;
}

// Adjoint of pad_one.
FeatureVolume unpad_one(const FeatureVolume& padded, int D, int H, int W, Boundary boundary) {
  FeatureVolume out(padded.channels, D, H, W);
  for (int c = 0; c < padded.channels; ++c) {
    const double* src = padded.channel(c);
    double* dst = out.channel(c);
    for (int d = 0; d < D + 2; ++d) {
      for (int h = 0; h < H + 2; ++h) {
        const double* row = src + (static_cast<std::size_t>(d) * (H + 2) + h) * (W + 2);
        if (boundary == Boundary::Zero) {
          if (d < 1 || d > D || h < 1 || h > H) continue;
          double* drow = dst + (static_cast<std::size_t>(d - 1) * H + (h - 1)) * W;
          for (int w = 0; w < W; ++w) drow[w] += row[w + 1];
        } else {
          double* drow = dst + (static_cast<std::size_t>(wrap(d - 1, D)) * H + wrap(h - 1, H)) * W;
          for (int w = 0; w < W; ++w) drow[w] += row[w + 1];
          drow[W - 1] += row[0];
          drow[0] += row[W + 1];
        }
      }
    }
  }
  return out;
}

void check_conv_input(const FeatureVolume& input, const Conv3dLayer& layer) {
  require(input.channels == layer.in_channels,
          "conv3d " + layer.name + ": expected " + std::to_string(layer.in_channels) + " input channels, got " +
              std::to_string(input.channels));
  require(layer.stride == 1 || layer.stride == 2, "conv3d " + layer.name + ": stride must be 1 or 2");
  if (layer.stride == 2) {
    require(input.depth % 2 == 0 && input.height % 2 == 0 && input.width % 2 == 0,
            "conv3d " + layer.name + ": stride-2 input dims must be even");
  }
  require(layer.kernel.size() ==
              static_cast<std::size_t>(layer.out_channels) * layer.in_channels * kKernelVolume,
          "conv3d " + layer.name + ": kernel size mismatch");
}

// Position of one output row inside the padded input for kernel offset (kd, kh).
inline const double* padded_row(const FeatureVolume& pad, int c, int d, int h) {
  return pad.channel(c) + (static_cast<std::size_t>(d) * pad.height + h) * pad.width;
}

}  // namespace

FeatureVolume conv3d_forward(const FeatureVolume& input, const Conv3dLayer& layer, Boundary boundary) {
  check_conv_input(input, layer);
  const int s = layer.stride;
  const int OD = input.depth / s, OH = input.height / s, OW = input.width / s;
  const FeatureVolume pad = pad_one(input, boundary);
  FeatureVolume out(layer.out_channels, OD, OH, OW);
  parallel_for(0, static_cast<std::size_t>(layer.out_channels), [&](std::size_t co_idx) {
    const int co = static_cast<int>(co_idx);
    double* dst = out.channel(co);
    std::fill_n(dst, out.voxels(), layer.bias.empty() ? 0.0 : layer.bias[co]);
    for (int ci = 0; ci < layer.in_channels; ++ci) {
      const double* w = layer.kernel.data() + (static_cast<std::size_t>(co) * layer.in_channels + ci) * kKernelVolume;
      for (int od = 0; od < OD; ++od) {
        for (int oh = 0; oh < OH; ++oh) {
          double* orow = dst + (static_cast<std::size_t>(od) * OH + oh) * OW;
          for (int kd = 0; kd < 3; ++kd) {
            for (int kh = 0; kh < 3; ++kh) {
              const double* irow = padded_row(pad, ci, od * s + kd, oh * s + kh);
              const double w0 = w[(kd * 3 + kh) * 3 + 0];
              const double w1 = w[(kd * 3 + kh) * 3 + 1];
              const double w2 = w[(kd * 3 + kh) * 3 + 2];
              if (s == 1) {
                for (int ow = 0; ow < OW; ++ow) orow[ow] += w0 * irow[ow] + w1 * irow[ow + 1] + w2 * irow[ow + 2];
              } else {
                for (int ow = 0; ow < OW; ++ow) {
                  const double* p = irow + 2 * ow;
                  orow[ow] += w0 * p[0] + w1 * p[1] + w2 * p[2];
                }
              }
            }
          }
        }
      }
    }
  });
  return out;
}

Conv3dGrads conv3d_backward(const FeatureVolume& input, const Conv3dLayer& layer, const FeatureVolume& grad_output,
                            Boundary boundary) {
  check_conv_input(input, layer);
  const int s = layer.stride;
  const int OD = input.depth / s, OH = input.height / s, OW = input.width / s;
  require(grad_output.channels == layer.out_channels && grad_output.depth == OD && grad_output.height == OH &&
              grad_output.width == OW,
          "conv3d_backward " + layer.name + ": grad_output shape mismatch");
  const FeatureVolume pad = pad_one(input, boundary);
  Conv3dGrads grads;
  grads.kernel.assign(layer.kernel.size(), 0.0);
  grads.bias.assign(layer.out_channels, 0.0);

  parallel_for(0, static_cast<std::size_t>(layer.out_channels), [&](std::size_t co_idx) {
    const int co = static_cast<int>(co_idx);
    const double* g = grad_output.channel(co);
    double bias_acc = 0.0;
    for (std::size_t i = 0; i < grad_output.voxels(); ++i) bias_acc += g[i];
    grads.bias[co] = bias_acc;
    for (int ci = 0; ci < layer.in_channels; ++ci) {
      double* gw = grads.kernel.data() + (static_cast<std::size_t>(co) * layer.in_channels + ci) * kKernelVolume;
      for (int od = 0; od < OD; ++od) {
        for (int oh = 0; oh < OH; ++oh) {
          const double* grow = g + (static_cast<std::size_t>(od) * OH + oh) * OW;
          for (int kd = 0; kd < 3; ++kd) {
            for (int kh = 0; kh < 3; ++kh) {
              const double* irow = padded_row(pad, ci, od * s + kd, oh * s + kh);
              double a0 = 0.0, a1 = 0.0, a2 = 0.0;
              for (int ow = 0; ow < OW; ++ow) {
                const double* p = irow + s * ow;
                a0 += grow[ow] * p[0];
                a1 += grow[ow] * p[1];
                a2 += grow[ow] * p[2];
              }
              gw[(kd * 3 + kh) * 3 + 0] += a0;
              gw[(kd * 3 + kh) * 3 + 1] += a1;
              gw[(kd * 3 + kh) * 3 + 2] += a2;
            }
          }
        }
      }
    }
  });

  FeatureVolume grad_pad(input.channels, input.depth + 2, input.height + 2, input.width + 2);
  parallel_for(0, static_cast<std::size_t>(layer.in_channels), [&](std::size_t ci_idx) {
    const int ci = static_cast<int>(ci_idx);
    double* gp = grad_pad.channel(ci);
    for (int co = 0; co < layer.out_channels; ++co) {
      const double* w = layer.kernel.data() + (static_cast<std::size_t>(co) * layer.in_channels + ci) * kKernelVolume;
      const double* g = grad_output.channel(co);
      for (int od = 0; od < OD; ++od) {
        for (int oh = 0; oh < OH; ++oh) {
          const double* grow = g + (static_cast<std::size_t>(od) * OH + oh) * OW;
          for (int kd = 0; kd < 3; ++kd) {
            for (int kh = 0; kh < 3; ++kh) {
              double* prow = gp + (static_cast<std::size_t>(od * s + kd) * grad_pad.height + (oh * s + kh)) *
                                      grad_pad.width;
              const double w0 = w[(kd * 3 + kh) * 3 + 0];
              const double w1 = w[(kd * 3 + kh) * 3 + 1];
              const double w2 = w[(kd * 3 + kh) * 3 + 2];
              if (s == 1) {
                for (int ow = 0; ow < OW; ++ow) prow[ow] += w0 * grow[ow];
                for (int ow = 0; ow < OW; ++ow) prow[ow + 1] += w1 * grow[ow];
                for (int ow = 0; ow < OW; ++ow) prow[ow + 2] += w2 * grow[ow];
              } else {
                for (int ow = 0; ow < OW; ++ow) {
                  double* p = prow + 2 * ow;
                  p[0] += w0 * grow[ow];
                  p[1] += w1 * grow[ow];
                  p[2] += w2 * grow[ow];
                }
              }
            }
          }
        }
      }
    }
  });
  grads.input = unpad_one(grad_pad, input.depth, input.height, input.width, boundary);
  return grads;
}

FeatureVolume instance_norm_forward(const FeatureVolume& input, std::span<const double> scale,
                                    std::span<const double> shift, InstanceNormCache* cache) {
  require(input.voxels() >= 2, "instance_norm: need at least two voxels per channel");
  require(scale.size() == static_cast<std::size_t>(input.channels) && shift.size() == scale.size(),
          "instance_norm: affine parameter count mismatch");
  const std::size_t n = input.voxels();
  FeatureVolume out(input.channels, input.depth, input.height, input.width);
  if (cache) {
    cache->normalized = FeatureVolume(input.channels, input.depth, input.height, input.width);
    cache->inv_std.assign(input.channels, 0.0);
  }
  for (int c = 0; c < input.channels; ++c) {
    const double* x = input.channel(c);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(n);
    const double inv_std = 1.0 / std::sqrt(var + kInstanceNormEpsilon);
    double* y = out.channel(c);
    double* xhat = cache ? cache->normalized.channel(c) : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const double h = (x[i] - mean) * inv_std;
      if (xhat) xhat[i] = h;
      y[i] = scale[c] * h + shift[c];
    }
    if (cache) cache->inv_std[c] = inv_std;
  }
  return out;
}

InstanceNormGrads instance_norm_backward(const InstanceNormCache& cache, std::span<const double> scale,
                                         const FeatureVolume& grad_output) {
  const FeatureVolume& xhat = cache.normalized;
  require(xhat.same_dims(grad_output), "instance_norm_backward: shape mismatch");
  const std::size_t n = xhat.voxels();
  InstanceNormGrads grads{FeatureVolume(xhat.channels, xhat.depth, xhat.height, xhat.width),
                          std::vector<double>(xhat.channels, 0.0), std::vector<double>(xhat.channels, 0.0)};
  for (int c = 0; c < xhat.channels; ++c) {
    const double* g = grad_output.channel(c);
    const double* h = xhat.channel(c);
    double sum_g = 0.0, sum_gh = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_g += g[i];
      sum_gh += g[i] * h[i];
    }
    grads.shift[c] = sum_g;
    grads.scale[c] = sum_gh;
    // Gradient with respect to the normalised value is g * scale.
    const double mean_g = scale[c] * sum_g / static_cast<double>(n);
    const double mean_gh = scale[c] * sum_gh / static_cast<double>(n);
    double* gx = grads.input.channel(c);
    for (std::size_t i = 0; i < n; ++i) gx[i] = cache.inv_std[c] * (scale[c] * g[i] - mean_g - h[i] * mean_gh);
  }
  return grads;
}

namespace {

struct LinearTap {
  int lo = 0, hi = 0;
  double frac = 0.0;  // weight of hi
};

std::vector<LinearTap> upsample_taps(int n, Boundary boundary) {
  std::vector<LinearTap> taps(2 * n);
  for (int j = 0; j < 2 * n; ++j) {
    double src = (j + 0.5) / 2.0 - 0.5;
    LinearTap t;
    if (boundary == Boundary::Periodic) {
      const double f = std::floor(src);
      t.frac = src - f;
      t.lo = wrap(static_cast<int>(f), n);
      t.hi = wrap(static_cast<int>(f) + 1, n);
    } else {
      src = std::max(src, 0.0);
      const double f = std::floor(src);
      t.lo = static_cast<int>(f);
      t.hi = std::min(t.lo + 1, n - 1);
      t.frac = src - f;
    }
    taps[j] = t;
  }
  return taps;
}

}  // namespace

FeatureVolume trilinear_upsample2x(const FeatureVolume& input, Boundary boundary) {
  const int D = input.depth, H = input.height, W = input.width;
  const auto td = upsample_taps(D, boundary), th = upsample_taps(H, boundary), tw = upsample_taps(W, boundary);
  FeatureVolume out(input.channels, 2 * D, 2 * H, 2 * W);
  for (int c = 0; c < input.channels; ++c) {
    const double* src = input.channel(c);
    double* dst = out.channel(c);
    for (int d = 0; d < 2 * D; ++d) {
      for (int h = 0; h < 2 * H; ++h) {
        for (int w = 0; w < 2 * W; ++w) {
          const int ds[2] = {td[d].lo, td[d].hi}, hs[2] = {th[h].lo, th[h].hi}, ws[2] = {tw[w].lo, tw[w].hi};
          const double wd[2] = {1 - td[d].frac, td[d].frac}, wh[2] = {1 - th[h].frac, th[h].frac},
                       ww[2] = {1 - tw[w].frac, tw[w].frac};
          double acc = 0.0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e)
                acc += wd[a] * wh[b] * ww[e] * src[(static_cast<std::size_t>(ds[a]) * H + hs[b]) * W + ws[e]];
          dst[(static_cast<std::size_t>(d) * 2 * H + h) * 2 * W + w] = acc;
        }
      }
    }
  }
  return out;
}

FeatureVolume trilinear_upsample2x_backward(const FeatureVolume& grad_output, Boundary boundary) {
  require(grad_output.depth % 2 == 0 && grad_output.height % 2 == 0 && grad_output.width % 2 == 0,
          "trilinear_upsample2x_backward: odd gradient dims");
  const int D = grad_output.depth / 2, H = grad_output.height / 2, W = grad_output.width / 2;
  const auto td = upsample_taps(D, boundary), th = upsample_taps(H, boundary), tw = upsample_taps(W, boundary);
  FeatureVolume out(grad_output.channels, D, H, W);
  for (int c = 0; c < grad_output.channels; ++c) {
    const double* g = grad_output.channel(c);
    double* dst = out.channel(c);
    for (int d = 0; d < 2 * D; ++d) {
      for (int h = 0; h < 2 * H; ++h) {
        for (int w = 0; w < 2 * W; ++w) {
          const double gv = g[(static_cast<std::size_t>(d) * 2 * H + h) * 2 * W + w];
          const int ds[2] = {td[d].lo, td[d].hi}, hs[2] = {th[h].lo, th[h].hi}, ws[2] = {tw[w].lo, tw[w].hi};
          const double wd[2] = {1 - td[d].frac, td[d].frac}, wh[2] = {1 - th[h].frac, th[h].frac},
                       ww[2] = {1 - tw[w].frac, tw[w].frac};
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e)
                dst[(static_cast<std::size_t>(ds[a]) * H + hs[b]) * W + ws[e]] += wd[a] * wh[b] * ww[e] * gv;
        }
      }
    }
  }
  return out;
}

FeatureVolume concat_channels(const FeatureVolume& a, const FeatureVolume& b) {
  require(a.depth == b.depth && a.height == b.height && a.width == b.width, "concat_channels: spatial dims differ");
  FeatureVolume out(a.channels + b.channels, a.depth, a.height, a.width);
  std::copy(a.data.begin(), a.data.end(), out.data.begin());
  std::copy(b.data.begin(), b.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()));
  return out;
}

}  // namespace mpiforge
