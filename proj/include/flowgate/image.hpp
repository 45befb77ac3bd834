#pragma once

// Raster images, 2-D projective transforms and the resampling primitives
// shared by every stage of the pipeline.
//
// Sampling convention: pixel centers sit at integer coordinates and
// resizing never aligns corners, i.e. destination pixel x reads source
// coordinate (x + 0.5) * in / out - 0.5. Reads outside the raster
// replicate the nearest edge pixel.

#include <Eigen/Dense>

#include <array>
#include <cstddef>
#include <span>
#include <vector>

namespace flowgate {

class ImageBuffer {
 public:
  ImageBuffer() = default;
  // Zero-filled image.
  ImageBuffer(int width, int height, int channels);
  // Takes ownership of row-major interleaved samples. Throws
  // std::invalid_argument on size mismatch or non-finite / out-of-range
  // values.
  ImageBuffer(int width, int height, int channels, std::vector<double> samples);
  ImageBuffer(int width, int height, int channels, double fill);

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return samples_.empty(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

  double at(int x, int y, int c = 0) const { return samples_[index(x, y, c)]; }
  double& at(int x, int y, int c = 0) { return samples_[index(x, y, c)]; }

  // Edge-replicated read.
  double clamped(int x, int y, int c = 0) const;
  // Bilinear read at a real coordinate, edge-replicated.
  double sample(double x, double y, int c = 0) const;

  std::span<const double> samples() const { return samples_; }
  std::span<double> samples() { return samples_; }

  // Clamps every sample into [0,1]; used by producers that synthesize
  // values (renderers, noise) before handing images on.
  void clamp_unit();

  friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> samples_;
};

// Luminance (Rec. 601 weights); grayscale input is returned unchanged.
ImageBuffer to_gray(const ImageBuffer& img);

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

// Homogeneous 3x3 transform in pixel units mapping source coordinates to
// destination coordinates.
class Transform2D {
 public:
  Transform2D() : m_(Eigen::Matrix3d::Identity()) {}
  // Throws std::invalid_argument when |det| <= 1e-12 or entries are not finite.
  explicit Transform2D(const Eigen::Matrix3d& m);

  static Transform2D identity() { return {}; }
  static Transform2D translation(double dx, double dy);
  static Transform2D rotation(double radians, Point center = {});
  static Transform2D scaling(double sx, double sy, Point center = {});
  // Maps four source points onto four destination points.
  static Transform2D perspective(const std::array<Point, 4>& src, const std::array<Point, 4>& dst);

  const Eigen::Matrix3d& matrix() const { return m_; }
  Transform2D inverse() const;
  // `next` applied after *this.
  Transform2D then(const Transform2D& next) const;
  Point apply(Point p) const;
  bool is_affine() const;

 private:
  Eigen::Matrix3d m_;
};

Transform2D operator*(const Transform2D& a, const Transform2D& b);

// Bilinear resample to exactly w x h. Throws on w < 1 or h < 1.
ImageBuffer resize(const ImageBuffer& img, int w, int h);

// Inverse-mapped bilinear warp: out(p) = img(t^-1 p).
ImageBuffer warp(const ImageBuffer& img, const Transform2D& t, int out_w, int out_h);

// Sigma used for a given odd kernel size.
double blur_sigma(int kernel_px);
std::vector<double> gaussian_kernel(int kernel_px);
// Separable Gaussian blur with edge replication. Throws on even or
// nonpositive kernel sizes.
ImageBuffer gaussian_blur(const ImageBuffer& img, int kernel_px);
// Same, parameterized by sigma directly (kernel radius ceil(3 sigma)).
ImageBuffer gaussian_blur_sigma(const ImageBuffer& img, double sigma);

// Root-mean-square difference over a centered window covering `fraction`
// of each dimension.
double rms_difference(const ImageBuffer& a, const ImageBuffer& b, double fraction = 1.0);

}  // namespace flowgate
