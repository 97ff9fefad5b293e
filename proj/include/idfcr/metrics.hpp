#pragma once

#include <string>
#include <vector>

#include "idfcr/nn/tensor.hpp"

namespace idfcr::metrics {

inline constexpr double kPsnrCap = 99.0;

// All take [C,H,W] images of equal shape; mismatches raise DataError.
double rmse(const nn::Tensor& a, const nn::Tensor& b);
// 10 log10(peak^2 / mse), capped for identical images.
double psnr(const nn::Tensor& a, const nn::Tensor& b, double peak = 1.0);
// Single-scale SSIM on the channel-mean image, Gaussian window over valid
// positions only.
double ssim(const nn::Tensor& a, const nn::Tensor& b, int window = 11, double sigma = 1.5,
            double peak = 1.0);

struct ImageScore {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
  double rmse = 0.0;
};

struct MetricReport {
  std::vector<ImageScore> per_image;
  ImageScore mean;  // id "mean"
};

ImageScore score(const nn::Tensor& pred, const nn::Tensor& label, std::string id = {});
// Aggregate is the plain mean of the per-image values. Empty input is an error.
MetricReport summarize(std::vector<ImageScore> scores);

}  // namespace idfcr::metrics
