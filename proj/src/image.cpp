#include "flowgate/image.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace flowgate {

namespace {

void check_dims(int width, int height, int channels) {
  if (width <= 0 || height <= 0) throw std::invalid_argument("image dimensions must be positive");
  if (channels != 1 && channels != 3) throw std::invalid_argument("image must have 1 or 3 channels");
}

}  // namespace

ImageBuffer::ImageBuffer(int width, int height, int channels) : ImageBuffer(width, height, channels, 0.0) {}

ImageBuffer::ImageBuffer(int width, int height, int channels, double fill)
    : width_(width), height_(height), channels_(channels) {
  check_dims(width, height, channels);
  if (!(fill >= 0.0 && fill <= 1.0)) throw std::invalid_argument("fill value outside [0,1]");
  samples_.assign(static_cast<std::size_t>(width) * height * channels, fill);
}

ImageBuffer::ImageBuffer(int width, int height, int channels, std::vector<double> samples)
    : width_(width), height_(height), channels_(channels), samples_(std::move(samples)) {
  check_dims(width, height, channels);
  if (samples_.size() != static_cast<std::size_t>(width) * height * channels)
    throw std::invalid_argument("sample count does not match dimensions");
  for (double s : samples_) {
    if (!std::isfinite(s) || s < 0.0 || s > 1.0)
      throw std::invalid_argument("image samples must be finite and in [0,1]");
  }
}

double ImageBuffer::clamped(int x, int y, int c) const {
  x = std::clamp(x, 0, width_ - 1);
  y = std::clamp(y, 0, height_ - 1);
  return samples_[index(x, y, c)];
}

double ImageBuffer::sample(double x, double y, int c) const {
  x = std::clamp(x, 0.0, static_cast<double>(width_ - 1));
  y = std::clamp(y, 0.0, static_cast<double>(height_ - 1));
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, width_ - 1);
  const int y1 = std::min(y0 + 1, height_ - 1);
  const double fx = x - x0;
  const double fy = y - y0;
  const double top = samples_[index(x0, y0, c)] * (1.0 - fx) + samples_[index(x1, y0, c)] * fx;
  const double bottom = samples_[index(x0, y1, c)] * (1.0 - fx) + samples_[index(x1, y1, c)] * fx;
  return top * (1.0 - fy) + bottom * fy;
}

void ImageBuffer::clamp_unit() {
  for (double& s : samples_) s = std::isfinite(s) ? std::clamp(s, 0.0, 1.0) : 0.0;
}

ImageBuffer to_gray(const ImageBuffer& img) {
  if (img.channels() == 1) return img;
  ImageBuffer out(img.width(), img.height(), 1);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      out.at(x, y) = 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
    }
  }
  return out;
}

Transform2D::Transform2D(const Eigen::Matrix3d& m) : m_(m) {
  if (!m_.allFinite()) throw std::invalid_argument("transform has non-finite entries");
  if (std::abs(m_.determinant()) <= 1e-12) throw std::invalid_argument("singular transform");
}

Transform2D Transform2D::translation(double dx, double dy) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(0, 2) = dx;
  m(1, 2) = dy;
  return Transform2D(m);
}

Transform2D Transform2D::rotation(double radians, Point center) {
  const double c = std::cos(radians);
  const double s = std::sin(radians);
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  r << c, -s, 0, s, c, 0, 0, 0, 1;
  return translation(center.x, center.y) * Transform2D(r) * translation(-center.x, -center.y);
}

Transform2D Transform2D::scaling(double sx, double sy, Point center) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(0, 0) = sx;
  m(1, 1) = sy;
  return translation(center.x, center.y) * Transform2D(m) * translation(-center.x, -center.y);
}

Transform2D Transform2D::perspective(const std::array<Point, 4>& src, const std::array<Point, 4>& dst) {
  // Direct linear solve with h33 fixed to 1.
  Eigen::Matrix<double, 8, 8> a;
  Eigen::Matrix<double, 8, 1> b;
  for (int i = 0; i < 4; ++i) {
    const double x = src[i].x, y = src[i].y, u = dst[i].x, v = dst[i].y;
    a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
    b(2 * i) = u;
    b(2 * i + 1) = v;
  }
  const Eigen::Matrix<double, 8, 1> h = a.fullPivLu().solve(b);
  Eigen::Matrix3d m;
  m << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
  return Transform2D(m);
}

Transform2D Transform2D::inverse() const { return Transform2D(m_.inverse()); }

Transform2D Transform2D::then(const Transform2D& next) const { return next * (*this); }

Point Transform2D::apply(Point p) const {
  const Eigen::Vector3d q = m_ * Eigen::Vector3d(p.x, p.y, 1.0);
  return {q.x() / q.z(), q.y() / q.z()};
}

bool Transform2D::is_affine() const {
  return m_(2, 0) == 0.0 && m_(2, 1) == 0.0 && m_(2, 2) == 1.0;
}

Transform2D operator*(const Transform2D& a, const Transform2D& b) { return Transform2D(a.matrix() * b.matrix()); }

ImageBuffer resize(const ImageBuffer& img, int w, int h) {
  if (w < 1 || h < 1) throw std::invalid_argument("resize target must be non-empty");
  if (w == img.width() && h == img.height()) return img;
  ImageBuffer out(w, h, img.channels());
  const double sx = static_cast<double>(img.width()) / w;
  const double sy = static_cast<double>(img.height()) / h;
  for (int y = 0; y < h; ++y) {
    const double src_y = (y + 0.5) * sy - 0.5;
    for (int x = 0; x < w; ++x) {
      const double src_x = (x + 0.5) * sx - 0.5;
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.sample(src_x, src_y, c);
    }
  }
  return out;
}

ImageBuffer warp(const ImageBuffer& img, const Transform2D& t, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw std::invalid_argument("warp target must be non-empty");
  const Eigen::Matrix3d inv = t.inverse().matrix();
  ImageBuffer out(out_w, out_h, img.channels());
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const double w = inv(2, 0) * x + inv(2, 1) * y + inv(2, 2);
      const double sx = (inv(0, 0) * x + inv(0, 1) * y + inv(0, 2)) / w;
      const double sy = (inv(1, 0) * x + inv(1, 1) * y + inv(1, 2)) / w;
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.sample(sx, sy, c);
    }
  }
  return out;
}

double blur_sigma(int kernel_px) { return 0.3 * ((kernel_px - 1) * 0.5 - 1.0) + 0.8; }

std::vector<double> gaussian_kernel(int kernel_px) {
  if (kernel_px < 1 || kernel_px % 2 == 0)
    throw std::invalid_argument("blur kernel must be odd and positive, got " + std::to_string(kernel_px));
  if (kernel_px == 1) return {1.0};
  const double sigma = blur_sigma(kernel_px);
  const int r = kernel_px / 2;
  std::vector<double> k(kernel_px);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + r];
  }
  for (double& v : k) v /= sum;
  return k;
}

namespace {

ImageBuffer convolve_separable(const ImageBuffer& img, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size()) / 2;
  ImageBuffer tmp(img.width(), img.height(), img.channels());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < img.channels(); ++c) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * img.clamped(x + i, y, c);
        tmp.at(x, y, c) = acc;
      }
    }
  }
  ImageBuffer out(img.width(), img.height(), img.channels());
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      for (int c = 0; c < img.channels(); ++c) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.clamped(x, y + i, c);
        out.at(x, y, c) = acc;
      }
    }
  }
  out.clamp_unit();
  return out;
}

}  // namespace

ImageBuffer gaussian_blur(const ImageBuffer& img, int kernel_px) {
  const auto k = gaussian_kernel(kernel_px);
  if (k.size() == 1) return img;
  return convolve_separable(img, k);
}

ImageBuffer gaussian_blur_sigma(const ImageBuffer& img, double sigma) {
  if (!(sigma > 0.0)) return img;
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + r];
  }
  for (double& v : k) v /= sum;
  return convolve_separable(img, k);
}

double rms_difference(const ImageBuffer& a, const ImageBuffer& b, double fraction) {
  if (a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels())
    throw std::invalid_argument("rms_difference: dimension mismatch");
  const int mx = static_cast<int>(std::round(a.width() * (1.0 - fraction) / 2.0));
  const int my = static_cast<int>(std::round(a.height() * (1.0 - fraction) / 2.0));
  double acc = 0.0;
  std::size_t n = 0;
  for (int y = my; y < a.height() - my; ++y) {
    for (int x = mx; x < a.width() - mx; ++x) {
      for (int c = 0; c < a.channels(); ++c) {
        const double d = a.at(x, y, c) - b.at(x, y, c);
        acc += d * d;
        ++n;
      }
    }
  }
  return n == 0 ? 0.0 : std::sqrt(acc / n);
}

}  // namespace flowgate
