#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mpiforge {

// Dense activations, [C][D][H][W].
struct FeatureVolume {
  int channels = 0;
  int depth = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  FeatureVolume() = default;
  FeatureVolume(int c, int d, int h, int w, double fill = 0.0);

  [[nodiscard]] std::size_t voxels() const { return static_cast<std::size_t>(depth) * height * width; }
  [[nodiscard]] double* channel(int c) { return data.data() + c * voxels(); }
  [[nodiscard]] const double* channel(int c) const { return data.data() + c * voxels(); }
  [[nodiscard]] bool same_dims(const FeatureVolume& o) const {
    return channels == o.channels && depth == o.depth && height == o.height && width == o.width;
  }
};

// How kernels treat samples beyond the volume. Zero pads convolutions with
// zeros and clamps upsampling at the edges; Periodic wraps both.
enum class Boundary { Zero, Periodic };

// conv 3x3x3 -> optional instance norm -> optional ReLU.
struct Conv3dLayer {
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  bool has_activation = true;
  bool has_norm = true;
  std::vector<double> kernel;  // [Cout][Cin][3][3][3]
  std::vector<double> bias;    // [Cout]
  std::vector<double> norm_scale;
  std::vector<double> norm_shift;

  [[nodiscard]] std::size_t parameter_count() const {
    return kernel.size() + bias.size() + norm_scale.size() + norm_shift.size();
  }
};

inline constexpr int kKernelVolume = 27;
inline constexpr double kInstanceNormEpsilon = 1e-5;

// Same-padded 3x3x3 convolution; output dims are input dims / stride.
FeatureVolume conv3d_forward(const FeatureVolume& input, const Conv3dLayer& layer,
                             Boundary boundary = Boundary::Zero);

struct Conv3dGrads {
  FeatureVolume input;
  std::vector<double> kernel;
  std::vector<double> bias;
};

Conv3dGrads conv3d_backward(const FeatureVolume& input, const Conv3dLayer& layer, const FeatureVolume& grad_output,
                            Boundary boundary = Boundary::Zero);

struct InstanceNormCache {
  FeatureVolume normalized;  // before the affine transform
  std::vector<double> inv_std;
};

FeatureVolume instance_norm_forward(const FeatureVolume& input, std::span<const double> scale,
                                    std::span<const double> shift, InstanceNormCache* cache = nullptr);

struct InstanceNormGrads {
  FeatureVolume input;
  std::vector<double> scale;
  std::vector<double> shift;
};

InstanceNormGrads instance_norm_backward(const InstanceNormCache& cache, std::span<const double> scale,
                                         const FeatureVolume& grad_output);

// 2x trilinear upsampling with half-pixel (align-corners-false) sample centres.
FeatureVolume trilinear_upsample2x(const FeatureVolume& input, Boundary boundary = Boundary::Zero);
FeatureVolume trilinear_upsample2x_backward(const FeatureVolume& grad_output, Boundary boundary = Boundary::Zero);

FeatureVolume concat_channels(const FeatureVolume& a, const FeatureVolume& b);

// The refiner U-Net. Layers are stored in execution order:
// conv1_1 conv1_2 conv1_3 conv2_1 conv2_2 conv2_3 conv3_1 conv3_2 conv3_3
// conv3_4 conv2_4 conv2_5 conv2_6 conv1_4 conv1_5 conv1_6 conv1_7.
struct NetworkParams {
  std::vector<Conv3dLayer> layers;

  [[nodiscard]] std::size_t parameter_count() const;
  [[nodiscard]] const Conv3dLayer& layer(std::string_view name) const;
};

inline constexpr int kFeatureChannels = 8;

// Layer graph with every parameter set to zero (norm scales included).
NetworkParams unet_layout();
// He-normal kernels (std sqrt(2 / fan_in)), zero biases, unit norm scales,
// zero norm shifts.
NetworkParams init_params(std::uint64_t seed);
NetworkParams zeros_like(const NetworkParams& params);

struct ParamTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<double> values;
};

// Every parameter tensor in a fixed order, named "<layer>.<kind>".
std::vector<ParamTensor> parameter_tensors(NetworkParams& params);

struct LayerTape {
  FeatureVolume input;
  FeatureVolume output;
  InstanceNormCache norm;
};

struct UnetTape {
  std::vector<LayerTape> layers;
  Boundary boundary = Boundary::Zero;
};

struct UnetOptions {
  Boundary boundary = Boundary::Zero;
#ifdef NDEBUG
  bool check_finite = false;
#else
  bool check_finite = true;
#endif
};

// features: 8 x D x H x W with D, H, W divisible by 4. Returns 1 x D x H x W.
FeatureVolume unet_forward(const FeatureVolume& features, const NetworkParams& params, UnetTape* tape = nullptr,
                           const UnetOptions& options = {});

// Accumulates parameter gradients into `grads` and returns d loss / d features.
FeatureVolume unet_backward(const UnetTape& tape, const FeatureVolume& grad_output, const NetworkParams& params,
                            NetworkParams& grads);

struct AdamState {
  NetworkParams first_moment;
  NetworkParams second_moment;
  long step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double learning_rate = 1e-4;
  double epsilon = 1e-8;
};

AdamState make_adam_state(const NetworkParams& params);

// Bias-corrected Adam update. Throws std::runtime_error on non-finite gradients.
void adam_step(NetworkParams& params, const NetworkParams& grads, AdamState& state);

}  // namespace mpiforge
