#include "flowgate/geometry.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "flowgate/errors.hpp"

namespace flowgate {

namespace {

bool finite(Point p) { return std::isfinite(p.x) && std::isfinite(p.y); }

// Downscaling by more than this factor is prefiltered before the single
// bilinear resample.
constexpr double kPrefilterBelow = 0.8;

ImageBuffer resample_crop(const ImageBuffer& frame, const Transform2D& frame_to_crop, double scale, int size) {
  if (scale < kPrefilterBelow) {
    const double sigma = 0.5 * std::sqrt(1.0 / (scale * scale) - 1.0);
    return warp(gaussian_blur_sigma(frame, sigma), frame_to_crop, size, size);
  }
  return warp(frame, frame_to_crop, size, size);
}

}  // namespace

bool KeyPoints::finite() const {
  return flowgate::finite(left_eye) && flowgate::finite(right_eye) && flowgate::finite(nose) &&
         flowgate::finite(mouth_left) && flowgate::finite(mouth_right);
}

KeyPoints KeyPoints::mapped(const Transform2D& t) const {
  return {t.apply(left_eye), t.apply(right_eye), t.apply(nose), t.apply(mouth_left), t.apply(mouth_right)};
}

bool FaceBox::valid() const {
  return std::isfinite(x) && std::isfinite(y) && std::isfinite(w) && std::isfinite(h) && w > 0.0 && h > 0.0;
}

FaceBox FaceBox::mapped(const Transform2D& t) const {
  const std::array<Point, 4> corners{Point{x, y}, Point{x + w, y}, Point{x, y + h}, Point{x + w, y + h}};
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const Point& c : corners) {
    const Point p = t.apply(c);
    x0 = std::min(x0, p.x);
    y0 = std::min(y0, p.y);
    x1 = std::max(x1, p.x);
    y1 = std::max(y1, p.y);
  }
  return {x0, y0, x1 - x0, y1 - y0};
}

Transform2D rigid_alignment_transform(const KeyPoints& points, int width, int height) {
  if (!points.finite()) throw std::invalid_argument("keypoints must be finite");
  const double dx = points.right_eye.x - points.left_eye.x;
  const double dy = points.right_eye.y - points.left_eye.y;
  if (std::hypot(dx, dy) <= 2.0) throw std::invalid_argument("eye keypoints coincide (distance <= 2 px)");
  const double angle = -std::atan2(dy, dx);
  const Point mid{(points.left_eye.x + points.right_eye.x) / 2.0, (points.left_eye.y + points.right_eye.y) / 2.0};
  const Point anchor{(width - 1) / 2.0, (height - 1) / 2.0};
  return Transform2D::translation(anchor.x, anchor.y) * Transform2D::rotation(angle) *
         Transform2D::translation(-mid.x, -mid.y);
}

AlignResult rigid_align(const KeyPoints& points, const ImageBuffer& img) {
  const Transform2D t = rigid_alignment_transform(points, img.width(), img.height());
  const double angle = std::atan2(t.matrix()(1, 0), t.matrix()(0, 0));
  return {warp(img, t, img.width(), img.height()), t, angle};
}

CropRect margin_crop_rect(const FaceBox& box, double margin) {
  if (!box.valid()) throw std::invalid_argument("face box must have positive size");
  if (!(margin >= 0.0)) throw std::invalid_argument("margin must be nonnegative");
  const double side = std::max(box.w, box.h) * (1.0 + 2.0 * margin);
  const Point c = box.center();
  return {c.x - side / 2.0, c.y - side / 2.0, side};
}

Transform2D crop_transform(const CropRect& rect, int size) {
  // Inverse of crop_with_margin's sampling: out = k (src - rect.x) - 0.5.
  const double k = size / rect.side;
  return Transform2D::translation(-0.5, -0.5) * Transform2D::scaling(k, k) * Transform2D::translation(-rect.x, -rect.y);
}

ImageBuffer crop_with_margin(const ImageBuffer& img, const FaceBox& box, double margin) {
  const CropRect rect = margin_crop_rect(box, margin);
  const int size = std::max(1, static_cast<int>(std::lround(rect.side)));
  const double step = rect.side / size;
  ImageBuffer out(size, size, img.channels());
  for (int y = 0; y < size; ++y) {
    const double sy = rect.y + (y + 0.5) * step;
    for (int x = 0; x < size; ++x) {
      const double sx = rect.x + (x + 0.5) * step;
      for (int c = 0; c < img.channels(); ++c) out.at(x, y, c) = img.sample(sx, sy, c);
    }
  }
  return out;
}

PreprocessedPair preprocess_triplet(const ImageBuffer& f1, const ImageBuffer& f2, const ImageBuffer& f3,
                                    const KeyPoints& kp1, const KeyPoints& /*kp2*/, const KeyPoints& kp3,
                                    const FaceBox& box1, const FaceBox& box2, const FaceBox& box3,
                                    const PreprocessConfig& cfg) {
  if (cfg.crop_size < 2) throw std::invalid_argument("crop size must be at least 2");
  const int size = cfg.crop_size;
  const Transform2D align1 = rigid_alignment_transform(kp1, f1.width(), f1.height());
  const Transform2D align3 = rigid_alignment_transform(kp3, f3.width(), f3.height());

  // Rotation preserves the box size; only its center moves.
  auto aligned_rect = [&](const FaceBox& box, const Transform2D& align) {
    CropRect r = margin_crop_rect(box, cfg.margin);
    const Point c = align.apply(box.center());
    r.x = c.x - r.side / 2.0;
    r.y = c.y - r.side / 2.0;
    return r;
  };
  const CropRect rect3 = aligned_rect(box3, align3);
  const CropRect rect1 = cfg.shared_box ? rect3 : aligned_rect(box1, align1);
  const CropRect rect2 = margin_crop_rect(box2, cfg.margin);

  PreprocessedPair out;
  out.f1_transform = crop_transform(rect1, size) * align1;
  out.f3_transform = crop_transform(rect3, size) * align3;
  out.f2_transform = crop_transform(rect2, size);
  out.f1_crop = resample_crop(f1, out.f1_transform, size / rect1.side, size);
  out.f3_crop = resample_crop(f3, out.f3_transform, size / rect3.side, size);
  out.f2_crop = resample_crop(f2, out.f2_transform, size / rect2.side, size);
  out.crop_side_f1 = rect1.side;
  return out;
}

void to_json(nlohmann::json& j, const Point& p) { j = nlohmann::json::array({p.x, p.y}); }

void from_json(const nlohmann::json& j, Point& p) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw DataError("point must be [x, y]");
  p = {j[0].get<double>(), j[1].get<double>()};
}

void to_json(nlohmann::json& j, const KeyPoints& k) {
  j = {{"left_eye", k.left_eye},
       {"right_eye", k.right_eye},
       {"nose", k.nose},
       {"mouth_left", k.mouth_left},
       {"mouth_right", k.mouth_right}};
}

void from_json(const nlohmann::json& j, KeyPoints& k) {
  if (!j.is_object()) throw DataError("keypoints must be an object");
  try {
    k.left_eye = j.at("left_eye").get<Point>();
    k.right_eye = j.at("right_eye").get<Point>();
    k.nose = j.at("nose").get<Point>();
    k.mouth_left = j.at("mouth_left").get<Point>();
    k.mouth_right = j.at("mouth_right").get<Point>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("keypoints: ") + e.what());
  }
  if (!k.finite()) throw DataError("keypoints must be finite");
}

void to_json(nlohmann::json& j, const FaceBox& b) { j = nlohmann::json::array({b.x, b.y, b.w, b.h}); }

void from_json(const nlohmann::json& j, FaceBox& b) {
  if (!j.is_array() || j.size() != 4) throw DataError("box must be [x, y, w, h]");
  for (const auto& v : j) {
    if (!v.is_number()) throw DataError("box entries must be numbers");
  }
  b = {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  if (!b.valid()) throw DataError("box must have positive finite size");
}

}  // namespace flowgate
