#include "mpiforge/io.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

namespace mpiforge {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const std::string& s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  void expect_magic(const char* magic) {
    if (raw(4) != magic) throw FormatError(what_ + ": bad magic, expected " + magic);
  }
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated");
  }

  const std::vector<std::uint8_t>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

json matrix_to_json(const Eigen::Matrix3d& m) {
  json rows = json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return rows;
}

Eigen::Matrix3d matrix_from_json(const json& j, const char* field) {
  if (!j.is_array() || j.size() != 3) throw FormatError(std::string("camera: '") + field + "' must be 3x3");
  Eigen::Matrix3d m;
  for (int r = 0; r < 3; ++r) {
    if (!j[r].is_array() || j[r].size() != 3) throw FormatError(std::string("camera: '") + field + "' must be 3x3");
    for (int c = 0; c < 3; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

// JSON has no infinity; infinite depths are written as the string "inf".
json depth_to_json(double z) { return std::isinf(z) ? json("inf") : json(z); }
double depth_from_json(const json& j) {
  if (j.is_string() && j.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
  return j.get<double>();
}

std::vector<NamedTensor> network_tensors(const NetworkParams& params, const std::string& prefix) {
  NetworkParams copy = params;
  std::vector<NamedTensor> out;
  for (const ParamTensor& t : parameter_tensors(copy)) {
    out.push_back({prefix + t.name, t.shape, std::vector<float>(t.values.begin(), t.values.end())});
  }
  return out;
}

void load_network_tensors(NetworkParams& params, const std::map<std::string, const NamedTensor*>& by_name,
                          const std::string& prefix) {
  for (ParamTensor& t : parameter_tensors(params)) {
    const auto it = by_name.find(prefix + t.name);
    if (it == by_name.end()) throw FormatError("weights: missing tensor '" + prefix + t.name + "'");
    if (it->second->shape != t.shape) {
      throw FormatError("weights: tensor '" + prefix + t.name + "' has shape " + shape_string(it->second->shape) +
                        ", expected " + shape_string(t.shape));
    }
    std::copy(it->second->values.begin(), it->second->values.end(), t.values.begin());
  }
}

std::map<std::string, const NamedTensor*> index_tensors(const std::vector<NamedTensor>& tensors) {
  std::map<std::string, const NamedTensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t;
  return by_name;
}

}  // namespace

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// PNG

Array read_png(const fs::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw std::runtime_error("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("cannot decode PNG " + path.string() + ": " + image.message);
  }
  Array out({image.height, image.width, 3});
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = buffer[i] / 255.0;
  return out;
}

void write_png(const fs::path& path, const Array& img) {
  require(img.rank() == 3 && img.dim(2) == 3, "write_png: expected an [H][W][3] image");
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.dim(1));
  image.height = static_cast<png_uint_32>(img.dim(0));
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    buffer[i] = static_cast<png_byte>(std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0));
  }
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write PNG " + path.string() + ": " + image.message);
  }
}

// ---------------------------------------------------------------------------
// Cameras

json camera_to_json(const PinholeCamera& cam) {
  return {{"K", matrix_to_json(cam.intrinsics)},
          {"R", matrix_to_json(cam.rotation)},
          {"T", {cam.translation.x(), cam.translation.y(), cam.translation.z()}},
          {"width", cam.width},
          {"height", cam.height},
          {"name", cam.name}};
}

PinholeCamera camera_from_json(const json& j) {
  PinholeCamera cam;
  try {
    cam.intrinsics = matrix_from_json(j.at("K"), "K");
    cam.rotation = matrix_from_json(j.at("R"), "R");
    const json& t = j.at("T");
    if (!t.is_array() || t.size() != 3) throw FormatError("camera: 'T' must have 3 entries");
    cam.translation = Eigen::Vector3d(t[0].get<double>(), t[1].get<double>(), t[2].get<double>());
    cam.width = j.at("width").get<int>();
    cam.height = j.at("height").get<int>();
    cam.name = j.value("name", std::string());
  } catch (const json::exception& e) {
    throw FormatError(std::string("camera: ") + e.what());
  }
  try {
    validate_camera(cam);
  } catch (const std::domain_error& e) {
    throw FormatError("camera '" + cam.name + "': " + e.what());
  }
  return cam;
}

std::vector<PinholeCamera> read_cameras(const fs::path& path) {
  const auto bytes = read_file(path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!doc.contains("cameras") || !doc["cameras"].is_array()) {
    throw FormatError(path.string() + ": expected an object with a 'cameras' array");
  }
  std::vector<PinholeCamera> cams;
  for (const auto& c : doc["cameras"]) cams.push_back(camera_from_json(c));
  return cams;
}

void write_cameras(const fs::path& path, const std::vector<PinholeCamera>& cameras) {
  json doc{{"cameras", json::array()}};
  for (const auto& cam : cameras) doc["cameras"].push_back(camera_to_json(cam));
  const std::string text = doc.dump(2) + "\n";
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

// ---------------------------------------------------------------------------
// MPI container

std::vector<std::uint8_t> encode_mpi(const Mpi& mpi) {
  const std::size_t depth = mpi.planes.count(), h = mpi.reference.height, w = mpi.reference.width;
  require(mpi.data.shape() == std::vector<std::size_t>({depth, h, w, 4}),
          "encode_mpi: payload " + shape_string(mpi.data.shape()) + " does not match the planes and camera");
  ByteWriter out;
  out.raw("MPIV");
  out.u32(kMpiVersion);
  out.u32(static_cast<std::uint32_t>(w));
  out.u32(static_cast<std::uint32_t>(h));
  out.u32(static_cast<std::uint32_t>(depth));
  const std::string camera = camera_to_json(mpi.reference).dump();
  out.u32(static_cast<std::uint32_t>(camera.size()));
  out.raw(camera);
  for (double z : mpi.planes.depths) out.f64(z);
  for (double v : mpi.data.values()) out.f32(static_cast<float>(v));
  return out.take();
}

Mpi decode_mpi(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes, "MPI container");
  in.expect_magic("MPIV");
  const std::uint32_t version = in.u32();
  if (version != kMpiVersion) throw FormatError("MPI container: unsupported version " + std::to_string(version));
  const std::size_t w = in.u32(), h = in.u32(), depth = in.u32();
  const std::string camera = in.raw(in.u32());
  Mpi mpi;
  try {
    mpi.reference = camera_from_json(json::parse(camera));
  } catch (const json::exception& e) {
    throw FormatError(std::string("MPI container: camera blob: ") + e.what());
  }
  if (static_cast<std::size_t>(mpi.reference.width) != w || static_cast<std::size_t>(mpi.reference.height) != h) {
    throw FormatError("MPI container: header size disagrees with the reference camera");
  }
  for (std::size_t d = 0; d < depth; ++d) {
    const double z = in.f64();
    mpi.planes.depths.push_back(z);
    mpi.planes.disparities.push_back(std::isinf(z) ? 0.0 : 1.0 / z);
  }
  if (in.remaining() != depth * h * w * 4 * 4) throw FormatError("MPI container: payload size mismatch");
  mpi.data = Array({depth, h, w, 4});
  for (std::size_t i = 0; i < mpi.data.size(); ++i) mpi.data[i] = in.f32();
  return mpi;
}

void write_mpi(const fs::path& path, const Mpi& mpi) { write_file(path, encode_mpi(mpi)); }
Mpi read_mpi(const fs::path& path) { return decode_mpi(read_file(path)); }

// ---------------------------------------------------------------------------
// Weights

std::vector<std::uint8_t> encode_tensors(const std::vector<NamedTensor>& tensors) {
  json manifest{{"tensors", json::array()}};
  std::size_t offset = 0;
  for (const auto& t : tensors) {
    std::size_t count = 1;
    for (std::size_t d : t.shape) count *= d;
    require(count == t.values.size(), "encode_tensors: tensor '" + t.name + "' size does not match its shape");
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += count * sizeof(float);
  }
  const std::string text = manifest.dump();
  ByteWriter out;
  out.raw("MPNW");
  out.u32(kWeightsVersion);
  out.u32(static_cast<std::uint32_t>(text.size()));
  out.raw(text);
  for (const auto& t : tensors) {
    for (float v : t.values) out.f32(v);
  }
  return out.take();
}

std::vector<NamedTensor> decode_tensors(const std::vector<std::uint8_t>& bytes) {
  ByteReader in(bytes, "weights file");
  in.expect_magic("MPNW");
  const std::uint32_t version = in.u32();
  if (version != kWeightsVersion) throw FormatError("weights file: unsupported version " + std::to_string(version));
  json manifest;
  try {
    manifest = json::parse(in.raw(in.u32()));
  } catch (const json::exception& e) {
    throw FormatError(std::string("weights file: manifest: ") + e.what());
  }
  std::vector<NamedTensor> tensors;
  std::size_t expected_offset = 0;
  try {
    for (const auto& entry : manifest.at("tensors")) {
      NamedTensor t;
      t.name = entry.at("name").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      if (entry.at("offset").get<std::size_t>() != expected_offset) {
        throw FormatError("weights file: tensor '" + t.name + "' is not stored in manifest order");
      }
      std::size_t count = 1;
      for (std::size_t d : t.shape) count *= d;
      t.values.resize(count);
      expected_offset += count * sizeof(float);
      tensors.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("weights file: manifest: ") + e.what());
  }
  if (in.remaining() != expected_offset) throw FormatError("weights file: payload size mismatch");
  for (auto& t : tensors) {
    for (float& v : t.values) v = in.f32();
  }
  return tensors;
}

void write_weights(const fs::path& path, const NetworkParams& params) {
  write_file(path, encode_tensors(network_tensors(params, "")));
}

NetworkParams read_weights(const fs::path& path) {
  const auto tensors = decode_tensors(read_file(path));
  NetworkParams params = unet_layout();
  load_network_tensors(params, index_tensors(tensors), "");
  return params;
}

// ---------------------------------------------------------------------------
// Training state

json train_config_to_json(const TrainConfig& c) {
  json curriculum = json::array();
  for (const auto& step : effective_curriculum(c)) {
    curriculum.push_back({{"iteration", step.iteration}, {"k", step.iterations}});
  }
  const SceneSpec& s = c.scene;
  return {{"total_iterations", c.total_iterations},
          {"curriculum", curriculum},
          {"views", {c.views_min, c.views_max}},
          {"planes", {c.planes_min, c.planes_max}},
          {"z_far", depth_to_json(c.z_far)},
          {"z_near", c.z_near},
          {"seed", c.seed},
          {"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"background", c.background},
          {"deterministic", c.reduction == Reduction::Deterministic},
          {"scene",
           {{"width", s.width},
            {"height", s.height},
            {"grid", s.grid},
            {"layers", s.layers},
            {"z_near", s.z_near},
            {"depth_ratio", s.depth_ratio},
            {"baseline", s.baseline},
            {"focal", s.focal},
            {"snap_planes", s.snap_planes},
            {"max_frequency", s.max_frequency},
            {"antialias", s.antialias}}}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.total_iterations = j.at("total_iterations").get<long>();
    for (const auto& step : j.at("curriculum")) {
      c.curriculum.push_back({step.at("iteration").get<long>(), step.at("k").get<int>()});
    }
    c.views_min = j.at("views").at(0).get<int>();
    c.views_max = j.at("views").at(1).get<int>();
    c.planes_min = j.at("planes").at(0).get<int>();
    c.planes_max = j.at("planes").at(1).get<int>();
    c.z_far = depth_from_json(j.at("z_far"));
    c.z_near = j.at("z_near").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.epsilon = j.at("epsilon").get<double>();
    c.background = j.at("background").get<std::array<double, 3>>();
    c.reduction = j.at("deterministic").get<bool>() ? Reduction::Deterministic : Reduction::Fast;
    const json& s = j.at("scene");
    c.scene.width = s.at("width").get<int>();
    c.scene.height = s.at("height").get<int>();
    c.scene.grid = s.at("grid").get<int>();
    c.scene.layers = s.at("layers").get<int>();
    c.scene.z_near = s.at("z_near").get<double>();
    c.scene.depth_ratio = s.at("depth_ratio").get<double>();
    c.scene.baseline = s.at("baseline").get<double>();
    c.scene.focal = s.at("focal").get<double>();
    c.scene.snap_planes = s.at("snap_planes").get<int>();
    c.scene.max_frequency = s.at("max_frequency").get<double>();
    c.scene.antialias = s.at("antialias").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("training config: ") + e.what());
  }
  return c;
}

void save_checkpoint(const fs::path& path, const TrainState& state, const TrainConfig& config) {
  std::vector<NamedTensor> tensors = network_tensors(state.params, "");
  for (auto&& t : network_tensors(state.adam.first_moment, "adam.m.")) tensors.push_back(std::move(t));
  for (auto&& t : network_tensors(state.adam.second_moment, "adam.v.")) tensors.push_back(std::move(t));
  write_file(path, encode_tensors(tensors));
  const json sidecar{{"config", train_config_to_json(config)},
                     {"iteration", state.iteration},
                     {"adam_step", state.adam.step},
                     {"rng_state", state.rng.state()}};
  const std::string text = sidecar.dump(2) + "\n";
  write_file(fs::path(path.string() + ".json"), std::vector<std::uint8_t>(text.begin(), text.end()));
}

TrainState load_checkpoint(const fs::path& path, TrainConfig* config) {
  const auto tensors = decode_tensors(read_file(path));
  const auto by_name = index_tensors(tensors);
  const auto side_bytes = read_file(fs::path(path.string() + ".json"));
  json sidecar;
  try {
    sidecar = json::parse(side_bytes.begin(), side_bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ".json: " + e.what());
  }
  const TrainConfig cfg = train_config_from_json(sidecar.at("config"));
  TrainState state = init_train_state(cfg);
  load_network_tensors(state.params, by_name, "");
  load_network_tensors(state.adam.first_moment, by_name, "adam.m.");
  load_network_tensors(state.adam.second_moment, by_name, "adam.v.");
  try {
    state.iteration = sidecar.at("iteration").get<long>();
    state.adam.step = sidecar.at("adam_step").get<long>();
    state.rng.set_state(sidecar.at("rng_state").get<std::string>());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ".json: " + e.what());
  }
  if (config) *config = cfg;
  return state;
}

std::string metrics_json_line(const StepMetrics& m) {
  return json{{"iter", m.iteration}, {"loss", m.loss}, {"psnr", m.psnr},
              {"ssim", m.ssim},      {"mae", m.mae},   {"k", m.iterations}}
      .dump();
}

}  // namespace mpiforge
