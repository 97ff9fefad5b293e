#include "idfcr/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "idfcr/error.hpp"

namespace idfcr::metrics {

using nn::Tensor;

namespace {

void require_same(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 3) {
    throw DataError("image shapes differ or are not [C,H,W]: " + nn::to_string(a.shape()) + " vs " +
                    nn::to_string(b.shape()));
  }
}

double mse(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return acc / static_cast<double>(a.size());
}

// [H*W] channel mean.
std::vector<double> gray(const Tensor& t) {
  const int c = t.dim(0), n = t.dim(1) * t.dim(2);
  std::vector<double> out(n, 0.0);
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < n; ++p) out[p] += t[static_cast<std::size_t>(ch) * n + p];
  for (double& v : out) v /= c;
  return out;
}

// Valid-mode separable filtering of an h x w image.
std::vector<double> filter_valid(const std::vector<double>& img, int h, int w,
                                 const std::vector<double>& k) {
  const int r = static_cast<int>(k.size());
  const int oh = h - r + 1, ow = w - r + 1;
  std::vector<double> rows(static_cast<std::size_t>(h) * ow, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < r; ++i) acc += k[i] * img[static_cast<std::size_t>(y) * w + x + i];
      rows[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0.0;
      for (int i = 0; i < r; ++i) acc += k[i] * rows[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace

double rmse(const Tensor& a, const Tensor& b) {
  require_same(a, b);
  return std::sqrt(mse(a, b));
}

double psnr(const Tensor& a, const Tensor& b, double peak) {
  require_same(a, b);
  const double m = mse(a, b);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / m));
}

double ssim(const Tensor& a, const Tensor& b, int window, double sigma, double peak) {
  require_same(a, b);
  const int h = a.dim(1), w = a.dim(2);
  if (window < 1 || h < window || w < window) {
    throw DataError("image " + std::to_string(h) + "x" + std::to_string(w) +
                    " is smaller than the SSIM window " + std::to_string(window));
  }
  std::vector<double> k(window);
  double norm = 0.0;
  const double centre = (window - 1) / 2.0;
  for (int i = 0; i < window; ++i) {
    k[i] = std::exp(-(i - centre) * (i - centre) / (2 * sigma * sigma));
    norm += k[i];
  }
  for (double& v : k) v /= norm;

  const std::vector<double> x = gray(a), y = gray(b);
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = filter_valid(x, h, w, k), my = filter_valid(y, h, w, k);
  const auto sxx = filter_valid(xx, h, w, k), syy = filter_valid(yy, h, w, k),
             sxy = filter_valid(xy, h, w, k);
  const double c1 = (0.01 * peak) * (0.01 * peak), c2 = (0.03 * peak) * (0.03 * peak);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double va = sxx[i] - mx[i] * mx[i];
    const double vb = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += (2 * mx[i] * my[i] + c1) * (2 * cov + c2) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mx.size());
}

ImageScore score(const Tensor& pred, const Tensor& label, std::string id) {
  return {std::move(id), psnr(pred, label), ssim(pred, label), rmse(pred, label)};
}

MetricReport summarize(std::vector<ImageScore> scores) {
  if (scores.empty()) throw DataError("no images to evaluate");
  MetricReport report;
  report.mean.id = "mean";
  for (const auto& s : scores) {
    report.mean.psnr += s.psnr;
    report.mean.ssim += s.ssim;
    report.mean.rmse += s.rmse;
  }
  const double n = static_cast<double>(scores.size());
  report.mean.psnr /= n;
  report.mean.ssim /= n;
  report.mean.rmse /= n;
  report.per_image = std::move(scores);
  return report;
}

}  // namespace idfcr::metrics
