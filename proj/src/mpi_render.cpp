#include "mpiforge/mpi_render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <tuple>

#include "mpiforge/parallel.hpp"

namespace mpiforge {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Array AlphaVolume::alphas() const {
  Array out(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = sigmoid(logits[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Compositing

Composite composite_over(const ViewVolumeStack& volumes) {
  const Array& v = volumes.data;
  require(v.rank() == 5 && v.dim(4) == 4, "composite_over: expected [N][D][H][W][4]");
  const std::size_t n = v.dim(0), depth = v.dim(1), h = v.dim(2), w = v.dim(3), hw = h * w;
  Composite out{Array({n, h, w, 3}), Array({n, h, w})};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < hw; ++p) {
      double r = 0, g = 0, b = 0, a = 0;
      for (std::size_t d = 0; d < depth; ++d) {
        const double* s = v.data() + (((i * depth + d) * hw) + p) * 4;
        const double t = 1.0 - s[3];
        r = r * t + s[3] * s[0];
        g = g * t + s[3] * s[1];
        b = b * t + s[3] * s[2];
        a = a * t + s[3];
      }
      double* o = out.rgb.data() + (i * hw + p) * 3;
      o[0] = r;
      o[1] = g;
      o[2] = b;
      out.alpha[i * hw + p] = a;
    }
  }
  return out;
}

Array composite_over_backward(const ViewVolumeStack& volumes, const Array& grad_rgb, const Array& grad_alpha) {
  const Array& v = volumes.data;
  const std::size_t n = v.dim(0), depth = v.dim(1), h = v.dim(2), w = v.dim(3), hw = h * w;
  Array grad(v.shape());
  // below[d] holds the composite of planes behind d (colour, then opacity).
  std::vector<std::array<double, 4>> below(depth);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < hw; ++p) {
      const auto at = [&](std::size_t d) { return v.data() + (((i * depth + d) * hw) + p) * 4; };
      std::array<double, 4> acc{0, 0, 0, 0};
      for (std::size_t d = 0; d < depth; ++d) {
        below[d] = acc;
        const double* s = at(d);
        const double t = 1.0 - s[3];
        for (int c = 0; c < 3; ++c) acc[c] = acc[c] * t + s[3] * s[c];
        acc[3] = acc[3] * t + s[3];
      }
      const double* gr = grad_rgb.empty() ? nullptr : grad_rgb.data() + (i * hw + p) * 3;
      const double ga = grad_alpha.empty() ? 0.0 : grad_alpha[i * hw + p];
      double vis = 1.0;
      for (std::size_t d = depth; d-- > 0;) {
        const double* s = at(d);
        double* g = grad.data() + (((i * depth + d) * hw) + p) * 4;
        double g_alpha = ga * (1.0 - below[d][3]);
        if (gr) {
          for (int c = 0; c < 3; ++c) {
            g[c] = gr[c] * s[3] * vis;
            g_alpha += gr[c] * (s[c] - below[d][c]);
          }
        }
        g[3] = g_alpha * vis;
        vis *= 1.0 - s[3];
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Visibility

namespace {

struct AxisSplit {
  std::size_t outer = 1, depth = 1, inner = 1;
};

AxisSplit split_axis(const Array& a, std::size_t axis) {
  require(axis < a.rank(), "visibility_along_depth: depth axis out of range");
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= a.dim(i);
  s.depth = a.dim(axis);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) s.inner *= a.dim(i);
  return s;
}

void visibility_kernel(const double* alphas, double* vis, std::size_t depth, std::size_t inner) {
  for (std::size_t i = 0; i < inner; ++i) vis[(depth - 1) * inner + i] = 1.0;
  for (std::size_t d = depth - 1; d-- > 0;) {
    for (std::size_t i = 0; i < inner; ++i) {
      vis[d * inner + i] = vis[(d + 1) * inner + i] * (1.0 - alphas[(d + 1) * inner + i]);
    }
  }
}

// grad_alpha_i = -V_i * S_i with S_{i+1} = S_i (1 - alpha_i) + g_i, S_0 = 0.
void visibility_backward_kernel(const double* alphas, const double* grad_vis, double* grad_alpha,
                                std::size_t depth, std::size_t inner, std::vector<double>& vis,
                                std::vector<double>& running) {
  vis.resize(depth * inner);
  running.assign(inner, 0.0);
  visibility_kernel(alphas, vis.data(), depth, inner);
  for (std::size_t d = 0; d < depth; ++d) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t k = d * inner + i;
      grad_alpha[k] += -vis[k] * running[i];
      running[i] = running[i] * (1.0 - alphas[k]) + grad_vis[k];
    }
  }
}

}  // namespace

Array visibility_along_depth(const Array& alphas, std::size_t depth_axis) {
  const AxisSplit s = split_axis(alphas, depth_axis);
  Array vis(alphas.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    visibility_kernel(alphas.data() + o * s.depth * s.inner, vis.data() + o * s.depth * s.inner, s.depth, s.inner);
  }
  return vis;
}

Array visibility_along_depth_backward(const Array& alphas, const Array& grad_visibility, std::size_t depth_axis) {
  require(alphas.same_shape(grad_visibility), "visibility_along_depth_backward: shape mismatch");
  const AxisSplit s = split_axis(alphas, depth_axis);
  Array grad(alphas.shape());
  std::vector<double> vis, running;
  for (std::size_t o = 0; o < s.outer; ++o) {
    const std::size_t off = o * s.depth * s.inner;
    visibility_backward_kernel(alphas.data() + off, grad_visibility.data() + off, grad.data() + off, s.depth,
                               s.inner, vis, running);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Visual clues

namespace {

// Weighted first and second colour moments over views for every voxel.
// weights[n] and the PSV share the reference-frame voxel grid.
void reduce_moments(const PsvStack& psv, const std::vector<const double*>& weights, Reduction mode,
                    Array* weight_sum, Array* mean, Array* variance, const Array* given_mean = nullptr) {
  const std::size_t n = psv.data.dim(0), depth = psv.data.dim(1), hw = psv.data.dim(2) * psv.data.dim(3);
  const std::size_t voxels = depth * hw;
  parallel_for(0, depth, [&](std::size_t d) {
    std::vector<std::size_t> order(n);
    std::array<double, 3> mu{};
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t vox = d * hw + p;
      const auto colour = [&](std::size_t view) { return psv.data.data() + ((view * depth + d) * hw + p) * 4; };
      std::iota(order.begin(), order.end(), std::size_t{0});
      if (mode == Reduction::Deterministic && n > 1) {
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          const double* ca = colour(a);
          const double* cb = colour(b);
          return std::make_tuple(weights[a][vox], ca[0], ca[1], ca[2]) <
                 std::make_tuple(weights[b][vox], cb[0], cb[1], cb[2]);
        });
      }
      double sum = 0.0;
      for (std::size_t k : order) sum += weights[k][vox];
      if (weight_sum) (*weight_sum)[vox] = sum;
      if (!mean && !variance) continue;
      if (sum < kVisibilityEpsilon) {
        for (int c = 0; c < 3; ++c) {
          if (mean) (*mean)[c * voxels + vox] = 0.0;
          if (variance) (*variance)[c * voxels + vox] = 0.0;
        }
        continue;
      }
      for (int c = 0; c < 3; ++c) {
        if (given_mean) {
          mu[c] = (*given_mean)[c * voxels + vox];
          continue;
        }
        double acc = 0.0;
        for (std::size_t k : order) acc += weights[k][vox] * colour(k)[c];
        mu[c] = acc / sum;
        if (mean) (*mean)[c * voxels + vox] = mu[c];
      }
      if (!variance) continue;
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (std::size_t k : order) {
          const double diff = mu[c] - colour(k)[c];
          acc += weights[k][vox] * diff * diff;
        }
        (*variance)[c * voxels + vox] = acc / sum;
      }
    }
  });
}

std::vector<Array> gated_weights(const PsvStack& psv, const Array& per_view) {
  const std::size_t n = psv.data.dim(0), voxels = per_view.stride0();
  std::vector<Array> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Array w({psv.data.dim(1), psv.data.dim(2), psv.data.dim(3)});
    for (std::size_t v = 0; v < voxels; ++v) {
      w[v] = per_view[i * voxels + v] * psv.data[(i * voxels + v) * 4 + 3];
    }
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<const double*> pointers(const std::vector<Array>& arrays) {
  std::vector<const double*> ptrs;
  for (const auto& a : arrays) ptrs.push_back(a.data());
  return ptrs;
}

}  // namespace

VisibilityStack mpi_referenced_visibility(const AlphaVolume& alpha, std::span<const PinholeCamera> views) {
  const std::size_t n = views.size(), depth = alpha.planes.count();
  const std::size_t h = alpha.reference.height, w = alpha.reference.width;
  require(alpha.logits.shape() == std::vector<std::size_t>({depth, h, w}), "mpi_referenced_visibility: bad alpha shape");
  const Array alphas = alpha.alphas();
  VisibilityStack vis;
  vis.per_view = Array({n, depth, h, w});
  vis.total = Array({depth, h, w});
  std::vector<Array> gated;
  for (std::size_t i = 0; i < n; ++i) {
    const PlaneWarp to_view = PlaneWarp::toward_view(alpha.reference, views[i], alpha.planes);
    const PlaneWarp to_ref = PlaneWarp::toward_reference(alpha.reference, views[i], alpha.planes);
    Array view_alpha({depth, static_cast<std::size_t>(views[i].height), static_cast<std::size_t>(views[i].width)});
    to_view.gather(alphas.data(), view_alpha.data(), 1);
    const Array view_vis = visibility_along_depth(view_alpha, 0);
    if (i == 0) vis.per_view_frustum = Array({n, view_vis.dim(0), view_vis.dim(1), view_vis.dim(2)});
    std::copy(view_vis.values().begin(), view_vis.values().end(), vis.per_view_frustum.data() + i * view_vis.size());
    to_ref.gather(view_vis.data(), vis.per_view.data() + i * depth * h * w, 1);
    Array g({depth, h, w});
    for (std::size_t v = 0; v < depth * h * w; ++v) {
      g[v] = vis.per_view[i * depth * h * w + v] * to_ref.mask(v / (h * w), v % (h * w));
    }
    gated.push_back(std::move(g));
  }
  for (std::size_t v = 0; v < depth * h * w; ++v) {
    std::vector<double> terms(n);
    for (std::size_t i = 0; i < n; ++i) terms[i] = gated[i][v];
    std::sort(terms.begin(), terms.end());
    double sum = 0.0;
    for (double t : terms) sum += t;
    vis.total[v] = sum;
  }
  return vis;
}

Array mean_visible_color(const PsvStack& psv, const VisibilityStack& vis, Reduction mode) {
  const auto weights = gated_weights(psv, vis.per_view);
  Array mu({3, psv.data.dim(1), psv.data.dim(2), psv.data.dim(3)});
  reduce_moments(psv, pointers(weights), mode, nullptr, &mu, nullptr);
  return mu;
}

Array visible_color_variance(const PsvStack& psv, const VisibilityStack& vis, const Array& mu, Reduction mode) {
  const auto weights = gated_weights(psv, vis.per_view);
  Array var({3, psv.data.dim(1), psv.data.dim(2), psv.data.dim(3)});
  require(mu.same_shape(var), "visible_color_variance: mean colour shape mismatch");
  reduce_moments(psv, pointers(weights), mode, nullptr, nullptr, &var, &mu);
  return var;
}

ClueEvaluator::ClueEvaluator(const PsvStack& psv, const RigWarps& warps, Reduction mode)
    : psv_(psv), warps_(warps), mode_(mode) {
  require(warps.to_view.size() == psv.data.dim(0) && warps.to_reference.size() == psv.data.dim(0),
          "ClueEvaluator: warp count does not match the plane-sweep stack");
}

ClueTape ClueEvaluator::forward(const Array& alphas) const {
  const std::size_t n = psv_.data.dim(0), depth = psv_.data.dim(1), h = psv_.data.dim(2), w = psv_.data.dim(3);
  const std::size_t voxels = depth * h * w;
  require(alphas.size() == voxels, "ClueEvaluator: alpha volume does not match the plane-sweep stack");
  ClueTape tape;
  tape.alphas = alphas;
  for (std::size_t i = 0; i < n; ++i) {
    const PlaneWarp& to_view = warps_.to_view[i];
    Array view_alpha({depth, static_cast<std::size_t>(to_view.dst_height()),
                      static_cast<std::size_t>(to_view.dst_width())});
    to_view.gather(alphas.data(), view_alpha.data(), 1);
    Array view_vis = visibility_along_depth(view_alpha, 0);
    Array weight({depth, h, w});
    warps_.to_reference[i].gather(view_vis.data(), weight.data(), 1);
    const double* psv_view = psv_.data.data() + i * psv_.data.stride0();
    for (std::size_t v = 0; v < voxels; ++v) weight[v] *= psv_view[v * 4 + 3];
    tape.view_alphas.push_back(std::move(view_alpha));
    tape.view_visibility.push_back(std::move(view_vis));
    tape.weights.push_back(std::move(weight));
  }
  tape.weight_sum = Array({depth, h, w});
  tape.clues.mean_color = Array({3, depth, h, w});
  tape.clues.color_variance = Array({3, depth, h, w});
  reduce_moments(psv_, pointers(tape.weights), mode_, &tape.weight_sum, &tape.clues.mean_color,
                 &tape.clues.color_variance);
  tape.clues.total_visibility = Array({depth, h, w});
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t v = 0; v < voxels; ++v) tape.clues.total_visibility[v] = tape.weight_sum[v] * inv_n;
  return tape;
}

Array ClueEvaluator::backward(const ClueTape& tape, const Array& grad_total, const Array& grad_mean,
                              const Array& grad_variance) const {
  const std::size_t n = psv_.data.dim(0), depth = psv_.data.dim(1), h = psv_.data.dim(2), w = psv_.data.dim(3);
  const std::size_t voxels = depth * h * w;
  const double inv_n = 1.0 / static_cast<double>(n);
  Array grad_alpha({depth, h, w});
  for (std::size_t i = 0; i < n; ++i) {
    const double* psv_view = psv_.data.data() + i * psv_.data.stride0();
    Array grad_weight({depth, h, w});
    for (std::size_t v = 0; v < voxels; ++v) {
      const double mask = psv_view[v * 4 + 3];
      if (mask == 0.0) continue;
      double g = grad_total.empty() ? 0.0 : grad_total[v] * inv_n;
      const double sum = tape.weight_sum[v];
      if (sum >= kVisibilityEpsilon) {
        for (int c = 0; c < 3; ++c) {
          const double colour = psv_view[v * 4 + c];
          const double mu = tape.clues.mean_color[c * voxels + v];
          if (!grad_mean.empty()) g += grad_mean[c * voxels + v] * (colour - mu) / sum;
          if (!grad_variance.empty()) {
            const double diff = mu - colour;
            g += grad_variance[c * voxels + v] * (diff * diff - tape.clues.color_variance[c * voxels + v]) / sum;
          }
        }
      }
      grad_weight[v] = g * mask;
    }
    Array grad_view_vis(tape.view_visibility[i].shape());
    warps_.to_reference[i].scatter_add(grad_weight.data(), grad_view_vis.data(), 1);
    const Array grad_view_alpha = visibility_along_depth_backward(tape.view_alphas[i], grad_view_vis, 0);
    warps_.to_view[i].scatter_add(grad_view_alpha.data(), grad_alpha.data(), 1);
  }
  return grad_alpha;
}

VisualClues compute_clues(const AlphaVolume& alpha, const PsvStack& psv, Reduction mode) {
  const RigWarps warps = build_rig_warps(psv.reference, psv.views, psv.planes);
  const ClueEvaluator evaluator(psv, warps, mode);
  return evaluator.forward(alpha.alphas()).clues;
}

Array assemble_rgba(const Array& mean_color, const Array& alphas) {
  const std::size_t voxels = alphas.size();
  require(mean_color.size() == 3 * voxels, "assemble_rgba: colour and alpha volumes disagree");
  std::vector<std::size_t> shape = alphas.shape();
  shape.push_back(4);
  Array rgba(shape);
  for (std::size_t v = 0; v < voxels; ++v) {
    for (std::size_t c = 0; c < 3; ++c) rgba[v * 4 + c] = std::clamp(mean_color[c * voxels + v], 0.0, 1.0);
    rgba[v * 4 + 3] = alphas[v];
  }
  return rgba;
}

Mpi colorize_mpi(const AlphaVolume& alpha, const PsvStack& psv, Reduction mode) {
  const Array alphas = alpha.alphas();
  const RigWarps warps = build_rig_warps(psv.reference, psv.views, psv.planes);
  const ClueEvaluator evaluator(psv, warps, mode);
  const ClueTape tape = evaluator.forward(alphas);
  return {assemble_rgba(tape.clues.mean_color, alphas), alpha.planes, alpha.reference};
}

RenderedView render_novel_view(const Mpi& mpi, const PinholeCamera& target) {
  const std::vector<PinholeCamera> views{target};
  const ViewVolumeStack volumes =
      warp_from_reference(broadcast_views(mpi.data, 1), mpi.reference, views, mpi.planes);
  Composite comp = composite_over(volumes);
  const std::size_t h = target.height, w = target.width;
  RenderedView out{Array({h, w, 3}), Array({h, w})};
  std::copy(comp.rgb.values().begin(), comp.rgb.values().end(), out.rgb.data());
  std::copy(comp.alpha.values().begin(), comp.alpha.values().end(), out.alpha.data());
  return out;
}

Array over_background(const RenderedView& view, const std::array<double, 3>& background) {
  Array out(view.rgb.shape());
  for (std::size_t p = 0; p < view.alpha.size(); ++p) {
    const double t = 1.0 - view.alpha[p];
    for (int c = 0; c < 3; ++c) out[p * 3 + c] = view.rgb[p * 3 + c] + t * background[c];
  }
  return out;
}

}  // namespace mpiforge
