// mpiforge: synthetic scenes, MPI refinement, rendering, training and evaluation.

#include <fmt/core.h>

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <regex>
#include <sstream>

#include "mpiforge/io.hpp"
#include "mpiforge/parallel.hpp"
#include "mpiforge/refiner.hpp"
#include "mpiforge/scene.hpp"
#include "mpiforge/training.hpp"

namespace fs = std::filesystem;
using namespace mpiforge;
using nlohmann::json;

namespace {

// Bad arguments detected after parsing; reported with exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  int threads = 0;
  bool json_output = false;
  bool deterministic = false;

  [[nodiscard]] Reduction reduction() const {
    return deterministic ? Reduction::Deterministic : Reduction::Fast;
  }
};

std::pair<int, int> parse_size(const std::string& text) {
  static const std::regex pattern(R"((\d+)x(\d+))");
  std::smatch m;
  if (!std::regex_match(text, m, pattern)) throw UsageError("--size must look like WxH, got '" + text + "'");
  return {std::stoi(m[1]), std::stoi(m[2])};
}

std::array<double, 3> parse_color(const std::string& text) {
  static const std::regex pattern(R"(#([0-9a-fA-F]{6}))");
  std::smatch m;
  if (!std::regex_match(text, m, pattern)) throw UsageError("colour must look like #rrggbb, got '" + text + "'");
  const unsigned long v = std::stoul(m[1], nullptr, 16);
  return {((v >> 16) & 0xff) / 255.0, ((v >> 8) & 0xff) / 255.0, (v & 0xff) / 255.0};
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::pair<int, int> parse_range(const std::string& text, const char* flag) {
  const auto parts = split_list(text);
  try {
    if (parts.size() == 1) return {std::stoi(parts[0]), std::stoi(parts[0])};
    if (parts.size() == 2) return {std::stoi(parts[0]), std::stoi(parts[1])};
  } catch (const std::exception&) {
  }
  throw UsageError(std::string(flag) + " must be N or MIN,MAX, got '" + text + "'");
}

double parse_depth(const std::string& text) {
  if (text == "inf") return std::numeric_limits<double>::infinity();
  try {
    return std::stod(text);
  } catch (const std::exception&) {
    throw UsageError("bad depth '" + text + "'");
  }
}

std::string planes_hint(int d) {
  const int down = std::max(4, d - d % 4);
  return fmt::format("; try --planes {} or {}", down, down + 4);
}

// Loads <dir>/<name>.png for every camera, in camera order.
ImageStack load_images(const std::vector<PinholeCamera>& cameras, const fs::path& dir) {
  require(!cameras.empty(), "no cameras selected");
  ImageStack stack{Array({cameras.size(), static_cast<std::size_t>(cameras.front().height),
                          static_cast<std::size_t>(cameras.front().width), 3}),
                   cameras};
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    const Array img = read_png(dir / (cameras[i].name + ".png"));
    if (img.dim(0) != static_cast<std::size_t>(cameras[i].height) ||
        img.dim(1) != static_cast<std::size_t>(cameras[i].width)) {
      throw UsageError(fmt::format("image {} is {}x{} but camera '{}' is {}x{}", cameras[i].name, img.dim(1),
                                   img.dim(0), cameras[i].name, cameras[i].width, cameras[i].height));
    }
    require(img.size() == stack.pixels.stride0(), "all views must share a resolution");
    std::copy(img.values().begin(), img.values().end(), stack.pixels.data() + i * img.size());
  }
  return stack;
}

std::vector<PinholeCamera> select_cameras(const std::vector<PinholeCamera>& all,
                                          const std::vector<std::string>& names) {
  if (names.empty()) return all;
  std::vector<PinholeCamera> out;
  for (const auto& name : names) {
    const auto it = std::find_if(all.begin(), all.end(), [&](const PinholeCamera& c) { return c.name == name; });
    if (it == all.end()) throw UsageError("no camera named '" + name + "'");
    out.push_back(*it);
  }
  return out;
}

// A rig file with one camera, a rig file plus a view name, or a bare camera object.
PinholeCamera load_single_camera(const fs::path& path, const std::string& view) {
  const auto bytes = read_file(path);
  json doc;
  try {
    doc = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (!doc.contains("cameras")) return camera_from_json(doc);
  const auto cams = read_cameras(path);
  if (!view.empty()) return select_cameras(cams, {view}).front();
  if (cams.size() != 1) throw UsageError(path.string() + " holds several cameras; pick one with --view");
  return cams.front();
}

void print_json(const json& j) { std::cout << j.dump() << '\n'; }

// ---------------------------------------------------------------------------

struct SceneArgs {
  fs::path out;
  std::uint64_t seed = 0;
  std::string size = "64x64";
  int views = 9;
  int layers = 2;
  double z_near = 1.5;
  int planes = 16;
  double baseline = 0.2;
  double depth_ratio = 3.0;
};

int run_scene_generate(const SceneArgs& a, const Globals& g) {
  const auto [w, h] = parse_size(a.size);
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(a.views))));
  if (grid * grid != a.views) throw UsageError(fmt::format("--views must be a square number, got {}", a.views));
  SceneSpec spec;
  spec.width = w;
  spec.height = h;
  spec.grid = grid;
  spec.layers = a.layers;
  spec.z_near = a.z_near;
  spec.snap_planes = a.planes;
  spec.baseline = a.baseline;
  spec.depth_ratio = a.depth_ratio;
  const SyntheticScene scene = generate_scene(a.seed, spec);
  fs::create_directories(a.out);
  const RigCapture capture = capture_scene(scene);
  for (std::size_t i = 0; i < scene.rig.size(); ++i) {
    const std::vector<std::size_t> one{i};
    const ImageStack view = select_views(capture.views, std::span<const std::size_t>(one));
    Array img({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3});
    std::copy(view.pixels.values().begin(), view.pixels.values().end(), img.data());
    write_png(a.out / (scene.rig[i].name + ".png"), img);
  }
  write_cameras(a.out / "cameras.json", scene.rig);
  const PinholeCamera reference = average_reference_camera(scene.rig);
  write_mpi(a.out / "ground_truth.mpi", ground_truth_mpi(scene, scene_planes(spec), reference));
  if (g.json_output) {
    print_json({{"out", a.out.string()}, {"views", a.views}, {"layers", a.layers}, {"planes", a.planes}});
  } else {
    fmt::print("wrote {} views, cameras.json and ground_truth.mpi to {}\n", a.views, a.out.string());
  }
  return 0;
}

struct RefineArgs {
  fs::path cameras, images, weights, out;
  std::string views;
  int planes = 16;
  double z_near = 1.5;
  std::string z_far = "inf";
  int iters = 4;
};

int run_refine(const RefineArgs& a, const Globals& g) {
  if (a.planes < 2 || a.planes % 4 != 0) {
    throw UsageError(fmt::format("--planes must be at least 2 and divisible by 4, got {}{}", a.planes,
                                 planes_hint(a.planes)));
  }
  if (a.iters < 1) throw UsageError("--iters must be at least 1");
  const auto cameras = select_cameras(read_cameras(a.cameras), split_list(a.views));
  for (const auto& cam : cameras) {
    if (cam.width % 4 != 0 || cam.height % 4 != 0) {
      throw UsageError(fmt::format("image size {}x{} must be divisible by 4; crop or pad to {}x{}", cam.width,
                                   cam.height, cam.width - cam.width % 4, cam.height - cam.height % 4));
    }
  }
  const ImageStack images = load_images(cameras, a.images);
  const NetworkParams params = read_weights(a.weights);
  RefinerConfig config;
  config.iterations = a.iters;
  config.planes = make_depth_planes(a.planes, parse_depth(a.z_far), a.z_near);
  config.reduction = g.reduction();

  const PinholeCamera reference = average_reference_camera(cameras);
  const double step = max_interplane_displacement(reference, cameras, config.planes);
  if (step > 1.0 + 1e-9) {
    std::cerr << fmt::format("warning: adjacent planes move up to {:.2f} px; at least {} planes keep this under 1 px\n",
                             step, minimum_plane_count(reference, cameras, config.planes.depths.front(), a.z_near));
  }
  std::vector<double> seconds;
  const Mpi mpi = run_refiner(images, config, params, [&](int k, double s) {
    seconds.push_back(s);
    std::cerr << fmt::format("iteration {}: {:.3f} s\n", k + 1, s);
  });
  write_mpi(a.out, mpi);
  if (g.json_output) {
    print_json({{"out", a.out.string()}, {"iterations", a.iters}, {"seconds", seconds}});
  } else {
    fmt::print("wrote {} ({}x{}x{}, {} views, {} iterations)\n", a.out.string(), mpi.reference.width,
               mpi.reference.height, mpi.planes.count(), cameras.size(), a.iters);
  }
  return 0;
}

struct RenderArgs {
  fs::path mpi, camera, out;
  std::string view;
  std::string background = "#808080";
};

int run_render(const RenderArgs& a, const Globals& g) {
  const Mpi mpi = read_mpi(a.mpi);
  const PinholeCamera camera = load_single_camera(a.camera, a.view);
  if (camera.width != mpi.reference.width || camera.height != mpi.reference.height) {
    throw UsageError(fmt::format("camera resolution {}x{} does not match the MPI ({}x{})", camera.width,
                                 camera.height, mpi.reference.width, mpi.reference.height));
  }
  const Array img = over_background(render_novel_view(mpi, camera), parse_color(a.background));
  write_png(a.out, img);
  if (g.json_output) {
    print_json({{"out", a.out.string()}, {"width", camera.width}, {"height", camera.height}});
  } else {
    fmt::print("wrote {}\n", a.out.string());
  }
  return 0;
}

struct TrainArgs {
  fs::path scenes, out, metrics;
  bool procedural = false;
  bool resume = false;
  long iters = 2000;
  std::uint64_t seed = 0;
  double learning_rate = 1e-4;
  std::string size = "32x32";
  std::string views = "2,5";
  std::string planes = "8,16";
  int layers = 2;
  double z_near = 1.5;
  double baseline = 0.2;
};

// Captures named cRC, arranged on their grid.
RigCapture load_capture(const fs::path& dir) {
  auto cams = read_cameras(dir / "cameras.json");
  static const std::regex pattern(R"(c(\d)(\d))");
  int rows = 0, cols = 0;
  for (const auto& cam : cams) {
    std::smatch m;
    if (!std::regex_match(cam.name, m, pattern)) throw FormatError("camera name '" + cam.name + "' is not cRC");
    rows = std::max(rows, std::stoi(m[1]) + 1);
    cols = std::max(cols, std::stoi(m[2]) + 1);
  }
  if (static_cast<std::size_t>(rows * cols) != cams.size()) throw FormatError(dir.string() + ": incomplete rig grid");
  std::sort(cams.begin(), cams.end(), [](const auto& x, const auto& y) { return x.name < y.name; });
  return {load_images(cams, dir), rows, cols};
}

std::vector<RigCapture> load_scene_pool(const fs::path& dir) {
  if (fs::exists(dir / "cameras.json")) return {load_capture(dir)};
  std::vector<fs::path> subdirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "cameras.json")) subdirs.push_back(entry.path());
  }
  std::sort(subdirs.begin(), subdirs.end());
  if (subdirs.empty()) throw UsageError("no scenes found under " + dir.string());
  std::vector<RigCapture> pool;
  for (const auto& d : subdirs) pool.push_back(load_capture(d));
  return pool;
}

int run_train(const TrainArgs& a, const Globals& g) {
  TrainConfig config;
  TrainState state;
  std::vector<RigCapture> pool;
  if (a.resume) {
    state = load_checkpoint(a.out, &config);
    config.total_iterations = std::max(config.total_iterations, a.iters);
  } else {
    config.total_iterations = a.iters;
    config.seed = a.seed;
    config.learning_rate = a.learning_rate;
    std::tie(config.views_min, config.views_max) = parse_range(a.views, "--views");
    std::tie(config.planes_min, config.planes_max) = parse_range(a.planes, "--planes");
    std::tie(config.scene.width, config.scene.height) = parse_size(a.size);
    config.scene.layers = a.layers;
    config.scene.baseline = a.baseline;
    config.z_near = config.scene.z_near = a.z_near;
    config.reduction = g.reduction();
  }
  if (!a.procedural) {
    pool = load_scene_pool(a.scenes);
    config.scene.width = pool.front().views.width();
    config.scene.height = pool.front().views.height();
  }
  if (!a.resume) state = init_train_state(config);

  const fs::path metrics_path = a.metrics.empty() ? fs::path(a.out.string() + ".metrics.jsonl") : a.metrics;
  std::ofstream metrics(metrics_path, a.resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot write " + metrics_path.string());
  StepMetrics last;
  train(state, config, pool, [&](const StepMetrics& m) {
    metrics << metrics_json_line(m) << '\n';
    last = m;
  });
  metrics.flush();
  save_checkpoint(a.out, state, config);
  if (g.json_output) {
    print_json({{"out", a.out.string()}, {"iterations", state.iteration}, {"loss", last.loss}});
  } else {
    fmt::print("trained {} iterations, last loss {:.4f}; checkpoint {}\n", state.iteration, last.loss,
               a.out.string());
  }
  return 0;
}

struct EvalArgs {
  fs::path pred, target, mpi, cameras, images;
  std::string target_view;
  std::string background = "#808080";
};

int run_eval(const EvalArgs& a, const Globals&) {
  Array pred, target;
  if (!a.pred.empty()) {
    if (a.target.empty()) throw UsageError("--pred needs --target");
    pred = read_png(a.pred);
    target = read_png(a.target);
  } else {
    if (a.mpi.empty() || a.cameras.empty() || a.images.empty() || a.target_view.empty()) {
      throw UsageError("give --pred/--target or --mpi, --cameras, --images and --target-view");
    }
    const Mpi mpi = read_mpi(a.mpi);
    const auto cams = select_cameras(read_cameras(a.cameras), {a.target_view});
    target = read_png(a.images / (a.target_view + ".png"));
    if (cams.front().width != mpi.reference.width || cams.front().height != mpi.reference.height) {
      throw UsageError("target camera resolution does not match the MPI");
    }
    pred = over_background(render_novel_view(mpi, cams.front()), parse_color(a.background));
  }
  if (!pred.same_shape(target)) {
    throw UsageError("image sizes differ: " + shape_string(pred.shape()) + " vs " + shape_string(target.shape()));
  }
  const ImageMetrics m = image_metrics(pred, target);
  print_json({{"psnr", std::min(m.psnr, kPsnrCap)}, {"ssim", m.ssim}, {"mae", m.mae}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-plane image synthesis from sparse calibrated views", "mpiforge"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--threads", g.threads, "Worker threads (default: MPIFORGE_THREADS or 1)")
      ->check(CLI::PositiveNumber);
  app.add_flag("--json", g.json_output, "Machine-readable output");
  app.add_flag("--deterministic", g.deterministic, "Order-independent, bit-reproducible reductions");

  auto* scene = app.add_subcommand("scene", "Synthetic scenes");
  scene->require_subcommand(1);
  SceneArgs sa;
  auto* generate = scene->add_subcommand("generate", "Render a synthetic rig with ground truth");
  generate->add_option("--out", sa.out, "Output directory")->required();
  generate->add_option("--seed", sa.seed, "Scene seed");
  generate->add_option("--size", sa.size, "Image size WxH");
  generate->add_option("--views", sa.views, "Camera count (square grid)")->check(CLI::PositiveNumber);
  generate->add_option("--layers", sa.layers, "Layers including the background")->check(CLI::PositiveNumber);
  generate->add_option("--znear", sa.z_near, "Nearest depth in metres")->check(CLI::PositiveNumber);
  generate->add_option("--planes", sa.planes, "Depth planes of the ground-truth MPI")->check(CLI::Range(2, 1024));
  generate->add_option("--baseline", sa.baseline, "Camera spacing in metres")->check(CLI::NonNegativeNumber);
  generate->add_option("--depth-ratio", sa.depth_ratio, "Farthest foreground depth over znear");

  RefineArgs ra;
  auto* refine = app.add_subcommand("refine", "Build an MPI from input views");
  refine->add_option("--cameras", ra.cameras, "Camera rig JSON")->required()->check(CLI::ExistingFile);
  refine->add_option("--images", ra.images, "Directory of <view>.png")->required()->check(CLI::ExistingDirectory);
  refine->add_option("--views", ra.views, "Comma-separated input view names (default: all)");
  refine->add_option("--planes", ra.planes, "Depth plane count")->required();
  refine->add_option("--znear", ra.z_near, "Nearest plane depth in metres")->check(CLI::PositiveNumber);
  refine->add_option("--zfar", ra.z_far, "Farthest plane depth in metres or inf");
  refine->add_option("--iters", ra.iters, "Refinement iterations")->required();
  refine->add_option("--weights", ra.weights, "Network weights")->required()->check(CLI::ExistingFile);
  refine->add_option("--out", ra.out, "Output MPI container")->required();

  RenderArgs rna;
  auto* render = app.add_subcommand("render", "Render an MPI at a camera");
  render->add_option("--mpi", rna.mpi, "MPI container")->required()->check(CLI::ExistingFile);
  render->add_option("--camera", rna.camera, "Camera JSON or rig JSON")->required()->check(CLI::ExistingFile);
  render->add_option("--view", rna.view, "View name within a rig file");
  render->add_option("--out", rna.out, "Output PNG")->required();
  render->add_option("--background", rna.background, "Background colour #rrggbb");

  TrainArgs ta;
  auto* trainer = app.add_subcommand("train", "Train the refiner network");
  auto* scenes_opt = trainer->add_option("--scenes", ta.scenes, "Scene directory or directory of scenes")
                         ->check(CLI::ExistingDirectory);
  auto* procedural_opt = trainer->add_flag("--procedural", ta.procedural, "Draw a fresh synthetic scene per step");
  scenes_opt->excludes(procedural_opt);
  trainer->add_option("--iters", ta.iters, "Total training iterations")->check(CLI::NonNegativeNumber);
  trainer->add_option("--seed", ta.seed, "Training seed");
  trainer->add_option("--out", ta.out, "Checkpoint path")->required();
  trainer->add_option("--metrics", ta.metrics, "Metrics JSON lines (default: <out>.metrics.jsonl)");
  trainer->add_option("--lr", ta.learning_rate, "Adam learning rate")->check(CLI::PositiveNumber);
  trainer->add_option("--size", ta.size, "Procedural image size WxH");
  trainer->add_option("--views", ta.views, "Input view count N or MIN,MAX");
  trainer->add_option("--planes", ta.planes, "Plane count D or MIN,MAX");
  trainer->add_option("--layers", ta.layers, "Procedural layers including the background");
  trainer->add_option("--znear", ta.z_near, "Nearest depth in metres")->check(CLI::PositiveNumber);
  trainer->add_option("--baseline", ta.baseline, "Procedural camera spacing in metres");
  trainer->add_flag("--resume", ta.resume, "Continue from the checkpoint at --out");
  trainer->add_flag("--deterministic", g.deterministic, "Same as the global flag");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Image quality metrics");
  eval->add_option("--pred", ea.pred, "Predicted PNG")->check(CLI::ExistingFile);
  eval->add_option("--target", ea.target, "Target PNG")->check(CLI::ExistingFile);
  eval->add_option("--mpi", ea.mpi, "MPI container")->check(CLI::ExistingFile);
  eval->add_option("--cameras", ea.cameras, "Camera rig JSON")->check(CLI::ExistingFile);
  eval->add_option("--images", ea.images, "Directory of <view>.png")->check(CLI::ExistingDirectory);
  eval->add_option("--target-view", ea.target_view, "Held-out view name");
  eval->add_option("--background", ea.background, "Background colour #rrggbb");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (g.threads > 0) set_thread_count(g.threads);
    if (*trainer && !ta.procedural && ta.scenes.empty()) {
      throw UsageError("train needs --scenes DIR or --procedural");
    }
    if (*generate) return run_scene_generate(sa, g);
    if (*refine) return run_refine(ra, g);
    if (*render) return run_render(rna, g);
    if (*trainer) return run_train(ta, g);
    if (*eval) return run_eval(ea, g);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
