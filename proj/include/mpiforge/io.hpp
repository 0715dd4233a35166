#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpiforge/array.hpp"
#include "mpiforge/geometry.hpp"
#include "mpiforge/mpi_render.hpp"
#include "mpiforge/neural.hpp"
#include "mpiforge/training.hpp"

namespace mpiforge {

// Malformed or unreadable files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit RGB PNG <-> [H][W][3] in [0, 1]. Values are treated as linear; no
// gamma conversion happens in either direction.
Array read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Array& image);

// Camera rig JSON: {"cameras": [{"K", "R", "T", "width", "height", "name"}]}
// with row-major 3x3 matrices and T in metres.
nlohmann::json camera_to_json(const PinholeCamera& cam);
PinholeCamera camera_from_json(const nlohmann::json& j);
std::vector<PinholeCamera> read_cameras(const std::filesystem::path& path);
void write_cameras(const std::filesystem::path& path, const std::vector<PinholeCamera>& cameras);

// MPI container: "MPIV", version, W, H, D, reference camera JSON, D f64
// depths, then D planes of W x H x 4 little-endian f32, back to front.
inline constexpr std::uint32_t kMpiVersion = 1;
std::vector<std::uint8_t> encode_mpi(const Mpi& mpi);
Mpi decode_mpi(const std::vector<std::uint8_t>& bytes);
void write_mpi(const std::filesystem::path& path, const Mpi& mpi);
Mpi read_mpi(const std::filesystem::path& path);

// Weights file: "MPNW", version, length-prefixed JSON manifest of tensor
// names, shapes and byte offsets, then little-endian f32 data in manifest order.
inline constexpr std::uint32_t kWeightsVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

std::vector<std::uint8_t> encode_tensors(const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> decode_tensors(const std::vector<std::uint8_t>& bytes);

void write_weights(const std::filesystem::path& path, const NetworkParams& params);
// Loads every network tensor by name; extra tensors in the file are ignored.
NetworkParams read_weights(const std::filesystem::path& path);

nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

// Checkpoint: weights file at `path` (network plus Adam moments under
// "adam.m." and "adam.v.") and a JSON sidecar at `path` + ".json" holding the
// training config, iteration count, Adam step and RNG state.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state, const TrainConfig& config);
TrainState load_checkpoint(const std::filesystem::path& path, TrainConfig* config = nullptr);

// {"iter":, "loss":, "psnr":, "ssim":, "mae":, "k":}
std::string metrics_json_line(const StepMetrics& m);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace mpiforge
