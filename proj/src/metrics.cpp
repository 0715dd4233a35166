#include "mpiforge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace mpiforge {
namespace {

void check_pair(const Array& pred, const Array& target) {
  require(pred.rank() == 3, "metrics: images must be [H][W][C]");
  require(pred.same_shape(target), "metrics: image shapes differ " + shape_string(pred.shape()) + " vs " +
                                       shape_string(target.shape()));
}

std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(size);
  const int centre = size / 2;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    const double x = i - centre;
    g[i] = std::exp(-x * x / (2.0 * sigma * sigma));
    sum += g[i];
  }
  for (double& v : g) v /= sum;
  return g;
}

int effective_window(int requested, std::size_t h, std::size_t w) {
  int fit = static_cast<int>(std::min(h, w));
  if (fit % 2 == 0) --fit;
  return std::max(1, std::min(requested, fit));
}

// Separable valid-mode filtering of an h x w plane.
struct ValidFilter {
  std::vector<double> g;
  std::size_t h, w, oh, ow;

  ValidFilter(std::vector<double> taps, std::size_t rows, std::size_t cols)
      : g(std::move(taps)), h(rows), w(cols), oh(rows - g.size() + 1), ow(cols - g.size() + 1) {}

  std::vector<double> apply(const std::vector<double>& in) const {
    const std::size_t k = g.size();
    std::vector<double> rows(h * ow, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < k; ++t) acc += g[t] * in[i * w + j + t];
        rows[i * ow + j] = acc;
      }
    }
    std::vector<double> out(oh * ow, 0.0);
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t j = 0; j < ow; ++j) out[i * ow + j] += g[t] * rows[(i + t) * ow + j];
      }
    }
    return out;
  }

  std::vector<double> adjoint(const std::vector<double>& m) const {
    const std::size_t k = g.size();
    std::vector<double> rows(h * ow, 0.0);
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t t = 0; t < k; ++t) {
        for (std::size_t j = 0; j < ow; ++j) rows[(i + t) * ow + j] += g[t] * m[i * ow + j];
      }
    }
    std::vector<double> out(h * w, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        for (std::size_t t = 0; t < k; ++t) out[i * w + j + t] += g[t] * rows[i * ow + j];
      }
    }
    return out;
  }
};

// Mean SSIM and, when grad is non-null, its gradient with respect to pred.
double ssim_impl(const Array& pred, const Array& target, const SsimOptions& opt, Array* grad) {
  check_pair(pred, target);
  const std::size_t h = pred.dim(0), w = pred.dim(1), channels = pred.dim(2);
  const int win = effective_window(opt.window, h, w);
  const ValidFilter filter(gaussian_window(win, opt.sigma), h, w);
  const double c1 = (opt.k1 * opt.peak) * (opt.k1 * opt.peak);
  const double c2 = (opt.k2 * opt.peak) * (opt.k2 * opt.peak);
  const std::size_t positions = filter.oh * filter.ow;
  const double norm = 1.0 / static_cast<double>(positions * channels);
  if (grad) *grad = Array(pred.shape());

  double total = 0.0;
  std::vector<double> x(h * w), y(h * w), xx(h * w), yy(h * w), xy(h * w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < h * w; ++p) {
      x[p] = pred[p * channels + c];
      y[p] = target[p * channels + c];
      xx[p] = x[p] * x[p];
      yy[p] = y[p] * y[p];
      xy[p] = x[p] * y[p];
    }
    const auto mx = filter.apply(x), my = filter.apply(y);
    const auto exx = filter.apply(xx), eyy = filter.apply(yy), exy = filter.apply(xy);
    std::vector<double> d_mx(positions), d_exx(positions), d_exy(positions);
    for (std::size_t p = 0; p < positions; ++p) {
      const double vx = exx[p] - mx[p] * mx[p];
      const double vy = eyy[p] - my[p] * my[p];
      const double cxy = exy[p] - mx[p] * my[p];
      const double a1 = 2.0 * mx[p] * my[p] + c1;
      const double a2 = 2.0 * cxy + c2;
      const double b1 = mx[p] * mx[p] + my[p] * my[p] + c1;
      const double b2 = vx + vy + c2;
      const double s = (a1 * a2) / (b1 * b2);
      total += s;
      if (!grad) continue;
      const double denom = b1 * b2;
      d_mx[p] = (2.0 * my[p] * a2 - 2.0 * my[p] * a1) / denom - s * (2.0 * mx[p] / b1 - 2.0 * mx[p] / b2);
      d_exx[p] = -s / b2;
      d_exy[p] = 2.0 * a1 / denom;
    }
    if (!grad) continue;
    const auto g_mx = filter.adjoint(d_mx), g_exx = filter.adjoint(d_exx), g_exy = filter.adjoint(d_exy);
    for (std::size_t p = 0; p < h * w; ++p) {
      (*grad)[p * channels + c] = norm * (g_mx[p] + 2.0 * x[p] * g_exx[p] + y[p] * g_exy[p]);
    }
  }
  return total * norm;
}

}  // namespace

double psnr(const Array& pred, const Array& target, double peak) {
  check_pair(pred, target);
  double se = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(pred.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

double mean_absolute_error(const Array& pred, const Array& target) {
  check_pair(pred, target);
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

double ssim(const Array& pred, const Array& target, const SsimOptions& options) {
  return ssim_impl(pred, target, options, nullptr);
}

Array ssim_gradient(const Array& pred, const Array& target, const SsimOptions& options) {
  Array grad;
  ssim_impl(pred, target, options, &grad);
  return grad;
}

ImageMetrics image_metrics(const Array& pred, const Array& target, const SsimOptions& options) {
  return {psnr(pred, target, options.peak), ssim(pred, target, options), mean_absolute_error(pred, target)};
}

}  // namespace mpiforge
