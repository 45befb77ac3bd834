#pragma once

#include <nlohmann/json_fwd.hpp>

#include "flowgate/image.hpp"

namespace flowgate {

struct KeyPoints {
  Point left_eye;
  Point right_eye;
  Point nose;
  Point mouth_left;
  Point mouth_right;

  bool finite() const;
  KeyPoints mapped(const Transform2D& t) const;
  friend bool operator==(const KeyPoints&, const KeyPoints&) = default;
};

// Axis-aligned face box in continuous pixel coordinates (pixel centers at
// integers); the box spans [x, x + w] x [y, y + h].
struct FaceBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool valid() const;
  Point center() const { return {x + w / 2.0, y + h / 2.0}; }
  // Bounding box of the four mapped corners.
  FaceBox mapped(const Transform2D& t) const;
  friend bool operator==(const FaceBox&, const FaceBox&) = default;
};

// Square crop window [x, x + side]^2. Crops sample it at `side` evenly
// spaced pixel centers, symmetric about the window center.
struct CropRect {
  double x = 0.0;
  double y = 0.0;
  double side = 0.0;
};

struct AlignResult {
  ImageBuffer image;
  Transform2D transform;
  double angle = 0.0;  // radians applied to level the eyes
};

struct PreprocessConfig {
  double margin = 0.10;
  int crop_size = 256;
  // Crop f1 with the f3 box (placed relative to the aligned eye anchor)
  // instead of its own box.
  bool shared_box = false;
};

struct PreprocessedPair {
  ImageBuffer f1_crop;
  ImageBuffer f2_crop;
  ImageBuffer f3_crop;
  double crop_side_f1 = 0.0;
  // Frame -> crop mappings actually applied.
  Transform2D f1_transform;
  Transform2D f2_transform;
  Transform2D f3_transform;
};

// Rotation about the eye midpoint that levels the eyes, followed by the
// translation that puts the midpoint on the image center. No scaling.
// Throws std::invalid_argument when the eyes are closer than 2 px.
Transform2D rigid_alignment_transform(const KeyPoints& points, int width, int height);
AlignResult rigid_align(const KeyPoints& points, const ImageBuffer& img);

// Box expanded by margin * side on each end, then squared up around its
// center.
CropRect margin_crop_rect(const FaceBox& box, double margin = 0.10);
ImageBuffer crop_with_margin(const ImageBuffer& img, const FaceBox& box, double margin = 0.10);

// Frame -> crop transform for a crop window resampled to `size` pixels.
Transform2D crop_transform(const CropRect& rect, int size);

PreprocessedPair preprocess_triplet(const ImageBuffer& f1, const ImageBuffer& f2, const ImageBuffer& f3,
                                    const KeyPoints& kp1, const KeyPoints& kp2, const KeyPoints& kp3,
                                    const FaceBox& box1, const FaceBox& box2, const FaceBox& box3,
                                    const PreprocessConfig& cfg = {});

// Sidecar annotation JSON: {"box":[x,y,w,h],"keypoints":{"left_eye":[x,y],...}}.
void to_json(nlohmann::json& j, const Point& p);
void from_json(const nlohmann::json& j, Point& p);
void to_json(nlohmann::json& j, const KeyPoints& k);
void from_json(const nlohmann::json& j, KeyPoints& k);
void to_json(nlohmann::json& j, const FaceBox& b);
void from_json(const nlohmann::json& j, FaceBox& b);

}  // namespace flowgate
