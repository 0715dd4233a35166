#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mpiforge/array.hpp"
#include "mpiforge/neural.hpp"
#include "mpiforge/rng.hpp"

namespace mpiforge {
namespace {

struct LayerSpec {
  const char* name;
  int in, out, stride;
  bool last;
};

// Execution order of the refiner network. The two concatenations feed
// conv2_5 (conv2_2 | up(conv2_4)) and conv1_5 (conv1_2 | up(conv1_4)).
constexpr LayerSpec kLayers[] = {
    {"conv1_1", 8, 8, 1, false},   {"conv1_2", 8, 8, 1, false},   {"conv1_3", 8, 16, 2, false},
    {"conv2_1", 16, 16, 1, false}, {"conv2_2", 16, 16, 1, false}, {"conv2_3", 16, 32, 2, false},
    {"conv3_1", 32, 32, 1, false}, {"conv3_2", 32, 32, 1, false}, {"conv3_3", 32, 32, 1, false},
    {"conv3_4", 32, 32, 1, false}, {"conv2_4", 32, 16, 1, false}, {"conv2_5", 32, 16, 1, false},
    {"conv2_6", 16, 16, 1, false}, {"conv1_4", 16, 8, 1, false},  {"conv1_5", 16, 8, 1, false},
    {"conv1_6", 8, 8, 1, false},   {"conv1_7", 8, 1, 1, true},
};

enum Index {
  c11, c12, c13, c21, c22, c23, c31, c32, c33, c34, c24, c25, c26, c14, c15, c16, c17, kLayerCount
};

void check_finite(const FeatureVolume& v, const std::string& where) {
  for (double x : v.data) {
    if (!std::isfinite(x)) throw std::runtime_error("unet_forward: non-finite activation after " + where);
  }
}

FeatureVolume apply_layer(const Conv3dLayer& layer, const FeatureVolume& input, LayerTape* tape,
                          const UnetOptions& options) {
  FeatureVolume y = conv3d_forward(input, layer, options.boundary);
  if (layer.has_norm) y = instance_norm_forward(y, layer.norm_scale, layer.norm_shift, tape ? &tape->norm : nullptr);
  if (layer.has_activation) {
    for (double& v : y.data) v = std::max(v, 0.0);
  }
  if (options.check_finite) check_finite(y, layer.name);
  if (tape) {
    tape->input = input;
    tape->output = y;
  }
  return y;
}

FeatureVolume layer_backward(const Conv3dLayer& layer, const LayerTape& tape, FeatureVolume grad, Conv3dLayer& acc,
                             Boundary boundary) {
  if (layer.has_activation) {
    for (std::size_t i = 0; i < grad.data.size(); ++i) {
      if (tape.output.data[i] <= 0.0) grad.data[i] = 0.0;
    }
  }
  if (layer.has_norm) {
    InstanceNormGrads ng = instance_norm_backward(tape.norm, layer.norm_scale, grad);
    for (int c = 0; c < layer.out_channels; ++c) {
      acc.norm_scale[c] += ng.scale[c];
      acc.norm_shift[c] += ng.shift[c];
    }
    grad = std::move(ng.input);
  }
  Conv3dGrads cg = conv3d_backward(tape.input, layer, grad, boundary);
  for (std::size_t i = 0; i < cg.kernel.size(); ++i) acc.kernel[i] += cg.kernel[i];
  for (std::size_t i = 0; i < cg.bias.size(); ++i) acc.bias[i] += cg.bias[i];
  return std::move(cg.input);
}

void split_channels(const FeatureVolume& joined, int first, FeatureVolume& a, FeatureVolume& b) {
  a = FeatureVolume(first, joined.depth, joined.height, joined.width);
  b = FeatureVolume(joined.channels - first, joined.depth, joined.height, joined.width);
  std::copy_n(joined.data.begin(), a.data.size(), a.data.begin());
  std::copy(joined.data.begin() + static_cast<std::ptrdiff_t>(a.data.size()), joined.data.end(), b.data.begin());
}

void add_into(FeatureVolume& dst, const FeatureVolume& src) {
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace

std::size_t NetworkParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.parameter_count();
  return n;
}

const Conv3dLayer& NetworkParams::layer(std::string_view name) const {
  for (const auto& l : layers) {
    if (l.name == name) return l;
  }
  throw std::out_of_range("NetworkParams: no layer named " + std::string(name));
}

NetworkParams unet_layout() {
  NetworkParams p;
  for (const auto& spec : kLayers) {
    Conv3dLayer l;
    l.name = spec.name;
    l.in_channels = spec.in;
    l.out_channels = spec.out;
    l.stride = spec.stride;
    l.has_activation = !spec.last;
    l.has_norm = !spec.last;
    l.kernel.assign(static_cast<std::size_t>(spec.in) * spec.out * kKernelVolume, 0.0);
    l.bias.assign(spec.out, 0.0);
    if (l.has_norm) {
      l.norm_scale.assign(spec.out, 0.0);
      l.norm_shift.assign(spec.out, 0.0);
    }
    p.layers.push_back(std::move(l));
  }
  return p;
}

NetworkParams init_params(std::uint64_t seed) {
  NetworkParams p = unet_layout();
  Rng rng(seed);
  for (auto& l : p.layers) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(l.in_channels) * kKernelVolume));
    for (double& w : l.kernel) w = rng.normal(0.0, stddev);
    std::fill(l.norm_scale.begin(), l.norm_scale.end(), 1.0);
  }
  return p;
}

NetworkParams zeros_like(const NetworkParams& params) {
  NetworkParams z = params;
  for (auto& l : z.layers) {
    std::fill(l.kernel.begin(), l.kernel.end(), 0.0);
    std::fill(l.bias.begin(), l.bias.end(), 0.0);
    std::fill(l.norm_scale.begin(), l.norm_scale.end(), 0.0);
    std::fill(l.norm_shift.begin(), l.norm_shift.end(), 0.0);
  }
  return z;
}

std::vector<ParamTensor> parameter_tensors(NetworkParams& params) {
  std::vector<ParamTensor> out;
  for (auto& l : params.layers) {
    const auto co = static_cast<std::size_t>(l.out_channels), ci = static_cast<std::size_t>(l.in_channels);
    out.push_back({l.name + ".kernel", {co, ci, 3, 3, 3}, l.kernel});
    out.push_back({l.name + ".bias", {co}, l.bias});
    if (l.has_norm) {
      out.push_back({l.name + ".norm_scale", {co}, l.norm_scale});
      out.push_back({l.name + ".norm_shift", {co}, l.norm_shift});
    }
  }
  return out;
}

FeatureVolume unet_forward(const FeatureVolume& features, const NetworkParams& params, UnetTape* tape,
                           const UnetOptions& options) {
  require(features.channels == kFeatureChannels, "unet_forward: expected 8 feature channels, got " +
                                                      std::to_string(features.channels));
  require(features.depth % 4 == 0 && features.height % 4 == 0 && features.width % 4 == 0 && features.depth > 0 &&
              features.height > 0 && features.width > 0,
          "unet_forward: D, H and W must be positive multiples of 4 (got " + std::to_string(features.depth) + "x" +
              std::to_string(features.height) + "x" + std::to_string(features.width) + ")");
  require(params.layers.size() == kLayerCount, "unet_forward: parameter set does not match the network layout");
  if (tape) {
    tape->layers.assign(kLayerCount, LayerTape{});
    tape->boundary = options.boundary;
  }
  const auto& L = params.layers;
  auto run = [&](int i, const FeatureVolume& in) {
    return apply_layer(L[i], in, tape ? &tape->layers[i] : nullptr, options);
  };
  const FeatureVolume a11 = run(c11, features);
  const FeatureVolume a12 = run(c12, a11);
  const FeatureVolume a13 = run(c13, a12);
  const FeatureVolume a21 = run(c21, a13);
  const FeatureVolume a22 = run(c22, a21);
  const FeatureVolume a23 = run(c23, a22);
  FeatureVolume a3 = run(c31, a23);
  a3 = run(c32, a3);
  a3 = run(c33, a3);
  a3 = run(c34, a3);
  const FeatureVolume a24 = run(c24, a3);
  const FeatureVolume a25 = run(c25, concat_channels(a22, trilinear_upsample2x(a24, options.boundary)));
  const FeatureVolume a26 = run(c26, a25);
  const FeatureVolume a14 = run(c14, a26);
  const FeatureVolume a15 = run(c15, concat_channels(a12, trilinear_upsample2x(a14, options.boundary)));
  const FeatureVolume a16 = run(c16, a15);
  return run(c17, a16);
}

FeatureVolume unet_backward(const UnetTape& tape, const FeatureVolume& grad_output, const NetworkParams& params,
                            NetworkParams& grads) {
  require(tape.layers.size() == kLayerCount, "unet_backward: tape does not come from unet_forward");
  require(grads.layers.size() == kLayerCount, "unet_backward: gradient set does not match the network layout");
  require(grad_output.same_dims(tape.layers[c17].output), "unet_backward: grad_output shape mismatch");
  const auto& L = params.layers;
  const Boundary b = tape.boundary;
  auto back = [&](int i, FeatureVolume g) { return layer_backward(L[i], tape.layers[i], std::move(g), grads.layers[i], b); };

  FeatureVolume g = back(c17, grad_output);
  g = back(c16, std::move(g));
  FeatureVolume g_cat1 = back(c15, std::move(g));
  FeatureVolume g12_skip, g_up1;
  split_channels(g_cat1, L[c12].out_channels, g12_skip, g_up1);
  g = back(c14, trilinear_upsample2x_backward(g_up1, b));
  g = back(c26, std::move(g));
  FeatureVolume g_cat2 = back(c25, std::move(g));
  FeatureVolume g22_skip, g_up2;
  split_channels(g_cat2, L[c22].out_channels, g22_skip, g_up2);
  g = back(c24, trilinear_upsample2x_backward(g_up2, b));
  g = back(c34, std::move(g));
  g = back(c33, std::move(g));
  g = back(c32, std::move(g));
  g = back(c31, std::move(g));
  g = back(c23, std::move(g));
  add_into(g, g22_skip);
  g = back(c22, std::move(g));
  g = back(c21, std::move(g));
  g = back(c13, std::move(g));
  add_into(g, g12_skip);
  g = back(c12, std::move(g));
  return back(c11, std::move(g));
}

AdamState make_adam_state(const NetworkParams& params) {
  AdamState s;
  s.first_moment = zeros_like(params);
  s.second_moment = zeros_like(params);
  return s;
}

void adam_step(NetworkParams& params, const NetworkParams& grads, AdamState& state) {
  require(params.layers.size() == grads.layers.size(), "adam_step: shape mismatch");
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& gl = grads.layers[l];
    require(gl.parameter_count() == params.layers[l].parameter_count(),
            "adam_step: shape mismatch in " + params.layers[l].name);
    for (const auto* vec : {&gl.kernel, &gl.bias, &gl.norm_scale, &gl.norm_shift}) {
      for (double x : *vec) {
        if (!std::isfinite(x)) throw std::runtime_error("adam_step: non-finite gradient in " + gl.name);
      }
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                    std::vector<double>& v) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= state.learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
  };
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& p = params.layers[l];
    const auto& g = grads.layers[l];
    auto& m = state.first_moment.layers[l];
    auto& v = state.second_moment.layers[l];
    update(p.kernel, g.kernel, m.kernel, v.kernel);
    update(p.bias, g.bias, m.bias, v.bias);
    update(p.norm_scale, g.norm_scale, m.norm_scale, v.norm_scale);
    update(p.norm_shift, g.norm_shift, m.norm_shift, v.norm_shift);
  }
}

}  // namespace mpiforge
