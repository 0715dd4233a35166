#pragma once

#include "mpiforge/array.hpp"

namespace mpiforge {

// Gaussian-window SSIM over the valid region of the image. Images smaller than
// the window use the largest odd window that fits.
struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double peak = 1.0;
};

struct ImageMetrics {
  double psnr = 0.0;  // dB, +infinity for identical images
  double ssim = 0.0;
  double mae = 0.0;
};

// All functions take [H][W][C] images of equal shape.
double psnr(const Array& pred, const Array& target, double peak = 1.0);
double mean_absolute_error(const Array& pred, const Array& target);
double ssim(const Array& pred, const Array& target, const SsimOptions& options = {});
// d ssim(pred, target) / d pred.
Array ssim_gradient(const Array& pred, const Array& target, const SsimOptions& options = {});

ImageMetrics image_metrics(const Array& pred, const Array& target, const SsimOptions& options = {});

// Value written for an infinite PSNR in machine-readable output.
inline constexpr double kPsnrCap = 99.0;

}  // namespace mpiforge
