#include "flowgate/simulator.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <stdexcept>

#include "flowgate/errors.hpp"
#include "flowgate/image_io.hpp"

namespace flowgate {

// ---------------------------------------------------------------------------
// Scene primitives
// ---------------------------------------------------------------------------

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
  Rgb operator*(double s) const { return {r * s, g * s, b * s}; }
  Rgb operator+(const Rgb& o) const { return {r + o.r, g + o.g, b + o.b}; }
  Rgb operator*(const Rgb& o) const { return {r * o.r, g * o.g, b * o.b}; }
  double luma() const { return 0.299 * r + 0.587 * g + 0.114 * b; }
};

Rgb mix(const Rgb& a, const Rgb& b, double t) { return a * (1.0 - t) + b * t; }

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(gen_); }
  double normal(double sigma) { return std::normal_distribution<double>(0.0, sigma)(gen_); }
  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

// Zero-mean sum of random plane waves with frequencies (cycles per unit)
// in [fmin, fmax] and 1/f amplitudes, normalized to unit variance.
class BandTexture {
 public:
  BandTexture() = default;
  BandTexture(Rng& rng, int waves, double fmin, double fmax) {
    double power = 0.0;
    for (int i = 0; i < waves; ++i) {
      const double f = fmin * std::pow(fmax / fmin, rng.uniform(0.0, 1.0));
      const double theta = rng.uniform(0.0, kTwoPi);
      const double amp = 1.0 / f;
      waves_.push_back({kTwoPi * f * std::cos(theta), kTwoPi * f * std::sin(theta), rng.uniform(0.0, kTwoPi), amp});
      power += 0.5 * amp * amp;
    }
    const double norm = 1.0 / std::sqrt(power);
    for (auto& w : waves_) w.amp *= norm;
  }

  double operator()(double x, double y) const {
    double s = 0.0;
    for (const auto& w : waves_) s += w.amp * std::sin(w.kx * x + w.ky * y + w.phase);
    return s;
  }

 private:
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::vector<Wave> waves_;
};

struct Camera {
  int width = 320;
  int height = 240;
  double f = 240.0;
  double cx = 159.5;
  double cy = 119.5;

  static Camera for_frame(int w, int h) { return {w, h, static_cast<double>(h), (w - 1) / 2.0, (h - 1) / 2.0}; }
  Point project(double x, double y, double z) const { return {cx + f * x / z, cy + f * y / z}; }
  bool inside(Point p) const { return p.x >= 0.0 && p.y >= 0.0 && p.x <= width - 1 && p.y <= height - 1; }
};

Point rotate(Point p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {c * p.x - s * p.y, s * p.x + c * p.y};
}

// Face-local coordinates: origin at the face ellipse center, p to the
// image right, q downward, unit = face height.
struct LocalKeyPoints {
  std::array<Point, 5> pts;  // left_eye, right_eye, nose, mouth_left, mouth_right
};

// Textured head: a paraboloid cap over the face ellipse plus a nose ridge
// and shallow eye sockets, protruding toward the camera.
class FaceModel {
 public:
  FaceModel(std::uint64_t seed, double depth_amplitude) {
    Rng rng(seed);
    half_w_ = rng.uniform(0.37, 0.41);
    // Skull curvature from the silhouette to the cheeks, with the nose
    // protruding depth_amplitude * face width above it.
    head_amp_ = kHeadDepth * 2.0 * half_w_;
    nose_q_ = 0.03;
    nose_amp_ = depth_amplitude * 2.0 * half_w_;
    const double eye_dx = rng.uniform(0.15, 0.175);
    const double eye_q = rng.uniform(-0.08, -0.05);
    const double mouth_dx = rng.uniform(0.10, 0.13);
    const double mouth_q = rng.uniform(0.22, 0.26);
    kp_.pts = {Point{-eye_dx, eye_q}, Point{eye_dx, eye_q}, Point{0.0, 0.06}, Point{-mouth_dx, mouth_q},
               Point{mouth_dx, mouth_q}};
    const double tone = rng.uniform(0.45, 0.9);
    skin_ = {std::min(0.95, tone + 0.08), tone * rng.uniform(0.72, 0.8), tone * rng.uniform(0.58, 0.68)};
    hair_ = Rgb{0.15, 0.11, 0.08} * rng.uniform(0.6, 2.2);
    lip_ = {skin_.r * 0.85, skin_.g * 0.55, skin_.b * 0.6};
    hairline_ = rng.uniform(-0.36, -0.30);
    fine_ = BandTexture(rng, 16, 8.0, 24.0);
    coarse_ = BandTexture(rng, 12, 1.5, 8.0);
    chroma_ = BandTexture(rng, 8, 2.0, 10.0);
  }

  double half_width() const { return half_w_; }
  double max_height() const { return head_amp_ + nose_amp_; }
  static constexpr double half_height() { return kHalfH; }
  const LocalKeyPoints& keypoints() const { return kp_; }

  double ellipse_r2(double p, double q) const {
    return (p / half_w_) * (p / half_w_) + (q / kHalfH) * (q / kHalfH);
  }
  bool inside(double p, double q) const { return ellipse_r2(p, q) < 1.0; }

  double height(double p, double q) const {
    const double r2 = ellipse_r2(p, q);
    if (r2 >= 1.0) return 0.0;
    double h = head_amp_ * (1.0 - r2);
    const double dn = p * p / (2 * 0.045 * 0.045) + (q - nose_q_) * (q - nose_q_) / (2 * 0.11 * 0.11);
    h += nose_amp_ * std::exp(-dn);
    for (int e = 0; e < 2; ++e) {
      const double ex = p - kp_.pts[e].x, ey = q - kp_.pts[e].y;
      h -= 0.2 * head_amp_ * std::exp(-(ex * ex + ey * ey) / (2 * 0.05 * 0.05));
    }
    // Fade toward the silhouette so the surface meets the rim smoothly.
    return h * smoothstep(1.0, 0.9, r2);
  }

  Rgb albedo(double p, double q) const {
    Rgb c = skin_ * (1.0 + 0.10 * coarse_(p, q) + 0.07 * fine_(p, q));
    c.r *= 1.0 + 0.04 * chroma_(p, q);
    // Hair above the hairline.
    const double hairline = hairline_ + 0.04 * std::cos(p * 9.0);
    c = mix(c, hair_ * (1.0 + 0.25 * fine_(p * 1.7, q * 0.6)), smoothstep(hairline + 0.015, hairline - 0.015, q));
    for (int e = 0; e < 2; ++e) {
      const Point eye = kp_.pts[e];
      const double dx = (p - eye.x) / 0.048, dy = (q - eye.y) / 0.022;
      const double eye_mask = smoothstep(1.0, 0.7, dx * dx + dy * dy);
      const double iris = smoothstep(0.35, 0.2, ((p - eye.x) / 0.022) * ((p - eye.x) / 0.022) + dy * dy * 0.25);
      c = mix(c, mix(Rgb{0.85, 0.85, 0.82}, Rgb{0.12, 0.08, 0.06}, iris), eye_mask);
      const double bx = (p - eye.x) / 0.06, by = (q - (eye.y - 0.055)) / 0.012;
      c = mix(c, hair_, 0.8 * smoothstep(1.0, 0.6, bx * bx + by * by));
    }
    const double mx = p / (kp_.pts[4].x + 0.01), my = (q - kp_.pts[4].y) / 0.028;
    c = mix(c, lip_, smoothstep(1.0, 0.7, mx * mx + my * my));
    return c;
  }

 private:
  static constexpr double kHalfH = 0.5;
  static constexpr double kHeadDepth = 0.4;
  double half_w_ = 0.39;
  double head_amp_ = 0.1;
  double nose_amp_ = 0.1;
  double nose_q_ = 0.03;
  double hairline_ = -0.33;
  LocalKeyPoints kp_;
  Rgb skin_, hair_, lip_;
  BandTexture fine_, coarse_, chroma_;
};

// Static textured wall behind the subject.
class Background {
 public:
  Background(std::uint64_t seed) {
    Rng rng(seed);
    depth_ = rng.uniform(3.5, 6.0);
    base_ = {rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75)};
    accent_ = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)};
    luma_ = BandTexture(rng, 16, 0.8, 7.0);
    hue_ = BandTexture(rng, 10, 0.3, 2.5);
  }
  double depth() const { return depth_; }
  Rgb albedo(double x, double y) const {
    const double t = 0.5 + 0.35 * hue_(x, y);
    return mix(base_, accent_, std::clamp(t, 0.0, 1.0)) * (1.0 + 0.22 * luma_(x, y));
  }

 private:
  double depth_ = 4.0;
  Rgb base_, accent_;
  BandTexture luma_, hue_;
};

struct Lighting {
  double ambient = 0.4;
  double lx = -0.3, ly = -0.4, lz = -1.0;

  static Lighting random(Rng& rng) {
    Lighting l;
    l.ambient = rng.uniform(0.35, 0.5);
    l.lx = rng.uniform(-0.5, 0.5);
    l.ly = rng.uniform(-0.6, -0.1);
    const double n = std::sqrt(l.lx * l.lx + l.ly * l.ly + 1.0);
    l.lx /= n;
    l.ly /= n;
    l.lz = -1.0 / n;
    return l;
  }
  // Lambertian factor for a surface normal facing the camera.
  double shade(double nx, double ny, double nz) const {
    const double d = std::max(0.0, nx * lx + ny * ly + nz * lz);
    return ambient + (1.0 - ambient) * d / std::sqrt(nx * nx + ny * ny + nz * nz);
  }
};

// Per-frame placement of a face-sized target: the silhouette plane depth,
// the target center in world units and the in-plane roll.
struct Pose {
  double z = 2.0;
  double x0 = 0.0;
  double y0 = 0.0;
  double roll = 0.0;
};

// Half extents of the bounding box of a rolled ellipse.
Point rolled_half_extents(double a, double b, double roll) {
  const double c = std::cos(roll), s = std::sin(roll);
  return {std::sqrt(a * a * c * c + b * b * s * s), std::sqrt(a * a * s * s + b * b * c * c)};
}

// Pose whose projected ellipse box has height rel * frame height and whose
// center sits at (cx + off_x, cy + off_y).
Pose pose_for(const Camera& cam, double half_w, double half_h, double rel, double off_x, double off_y, double roll) {
  const Point ext = rolled_half_extents(half_w, half_h, roll);
  Pose p;
  p.z = cam.f * 2.0 * ext.y / (rel * cam.height);
  p.x0 = off_x * p.z / cam.f;
  p.y0 = off_y * p.z / cam.f;
  p.roll = roll;
  return p;
}

FrameAnnotation annotate_ellipse(const Camera& cam, const Pose& pose, double half_w, double half_h,
                                 const LocalKeyPoints& kp, const std::array<double, 5>& kp_depth) {
  const Point ext = rolled_half_extents(half_w, half_h, pose.roll);
  const Point c = cam.project(pose.x0, pose.y0, pose.z);
  FrameAnnotation a;
  a.box = {c.x - cam.f * ext.x / pose.z, c.y - cam.f * ext.y / pose.z, 2.0 * cam.f * ext.x / pose.z,
           2.0 * cam.f * ext.y / pose.z};
  std::array<Point, 5> img;
  for (int k = 0; k < 5; ++k) {
    const Point w = rotate(kp.pts[k], pose.roll);
    img[k] = cam.project(pose.x0 + w.x, pose.y0 + w.y, pose.z - kp_depth[k]);
  }
  a.keypoints = {img[0], img[1], img[2], img[3], img[4]};
  a.rel_height = a.box.h / cam.height;
  return a;
}

ImageBuffer to_image(const std::vector<Rgb>& px, int w, int h) {
  ImageBuffer img(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Rgb& c = px[static_cast<std::size_t>(y) * w + x];
      img.at(x, y, 0) = c.r;
      img.at(x, y, 1) = c.g;
      img.at(x, y, 2) = c.b;
    }
  img.clamp_unit();
  return img;
}

Rgb sample_rgb(const ImageBuffer& img, double x, double y) {
  return {img.sample(x, y, 0), img.sample(x, y, 1), img.sample(x, y, 2)};
}

}  // namespace

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

class Scene {
 public:
  virtual ~Scene() = default;
  // Noiseless RGB image of the given frame.
  virtual ImageBuffer radiance(int frame) const = 0;
  virtual FrameAnnotation annotation(int frame) const = 0;
  // Where the surface point seen at `px` in frame i appears in frame j;
  // nullopt when it is occluded there or leaves the frame.
  virtual std::optional<Point> track(int i, Point px, int j) const = 0;
  virtual const Camera& camera() const = 0;
};

namespace {

// A live head in front of a static wall.
class LiveScene final : public Scene {
 public:
  LiveScene(Camera cam, FaceModel face, Background bg, Lighting light, std::vector<Pose> poses)
      : cam_(cam), face_(std::move(face)), bg_(std::move(bg)), light_(light), poses_(std::move(poses)) {}

  const Camera& camera() const override { return cam_; }
  const FaceModel& face() const { return face_; }

  struct Hit {
    bool on_face = false;
    double p = 0.0, q = 0.0;  // face-local (on_face) or wall coordinates
    double z = 0.0;
  };

  Hit trace(int frame, Point px) const {
    const Pose& pose = poses_[frame];
    const double dx = (px.x - cam_.cx) / cam_.f;
    const double dy = (px.y - cam_.cy) / cam_.f;
    double t = pose.z;
    Point local{};
    for (int it = 0; it < 12; ++it) {
      local = rotate({t * dx - pose.x0, t * dy - pose.y0}, -pose.roll);
      const double next = pose.z - face_.height(local.x, local.y);
      if (std::abs(next - t) < 1e-10) {
        t = next;
        break;
      }
      t = next;
    }
    local = rotate({t * dx - pose.x0, t * dy - pose.y0}, -pose.roll);
    if (face_.inside(local.x, local.y)) return {true, local.x, local.y, t};
    const double zb = bg_.depth();
    return {false, zb * dx, zb * dy, zb};
  }

  Rgb color(int frame, const Hit& hit) const {
    if (!hit.on_face) return bg_.albedo(hit.p, hit.q) * (light_.ambient + 0.9 * (1.0 - light_.ambient));
    constexpr double e = 1e-4;
    const double hp = (face_.height(hit.p + e, hit.q) - face_.height(hit.p - e, hit.q)) / (2 * e);
    const double hq = (face_.height(hit.p, hit.q + e) - face_.height(hit.p, hit.q - e)) / (2 * e);
    const Point g = rotate({hp, hq}, poses_[frame].roll);
    return face_.albedo(hit.p, hit.q) * light_.shade(-g.x, -g.y, -1.0);
  }

  ImageBuffer radiance(int frame) const override {
    std::vector<Rgb> px(static_cast<std::size_t>(cam_.width) * cam_.height);
    for (int y = 0; y < cam_.height; ++y)
      for (int x = 0; x < cam_.width; ++x) {
        const Point p{static_cast<double>(x), static_cast<double>(y)};
        px[static_cast<std::size_t>(y) * cam_.width + x] = color(frame, trace(frame, p));
      }
    return to_image(px, cam_.width, cam_.height);
  }

  FrameAnnotation annotation(int frame) const override {
    std::array<double, 5> depth{};
    const auto& kp = face_.keypoints();
    for (int k = 0; k < 5; ++k) depth[k] = face_.height(kp.pts[k].x, kp.pts[k].y);
    return annotate_ellipse(cam_, poses_[frame], face_.half_width(), FaceModel::half_height(), kp, depth);
  }

  Point face_point(int frame, double p, double q) const {
    const Pose& pose = poses_[frame];
    const Point w = rotate({p, q}, pose.roll);
    return cam_.project(pose.x0 + w.x, pose.y0 + w.y, pose.z - face_.height(p, q));
  }

  std::optional<Point> track(int i, Point px, int j) const override {
    const Hit hit = trace(i, px);
    if (!hit.on_face) {
      if (trace(j, px).on_face) return std::nullopt;
      return px;
    }
    const Point dst = face_point(j, hit.p, hit.q);
    if (!cam_.inside(dst)) return std::nullopt;
    const Hit back = trace(j, dst);
    if (!back.on_face || std::hypot(back.p - hit.p, back.q - hit.q) > 2e-3) return std::nullopt;
    return dst;
  }

 private:
  Camera cam_;
  FaceModel face_;
  Background bg_;
  Lighting light_;
  std::vector<Pose> poses_;
};

// Source recording of a live scene rendered offline; used as the content of
// photos, screens and masks. Maps content pixels to face-local units.
struct SourceShot {
  ImageBuffer image;
  Point face_center;       // content pixels
  double px_per_unit = 1;  // content pixels per face height
  LocalKeyPoints keypoints;
  double half_w = 0.39;
};

SourceShot shoot_source(const LiveScene& scene, int frame) {
  SourceShot s;
  s.image = scene.radiance(frame);
  const FrameAnnotation a = scene.annotation(frame);
  s.face_center = a.box.center();
  s.px_per_unit = a.box.h;
  s.keypoints = scene.face().keypoints();
  s.half_w = scene.face().half_width();
  return s;
}

std::vector<double> schedule(const SceneSpec& spec) {
  if (!spec.height_script.empty()) return spec.height_script;
  const int n = spec.frames;
  std::vector<double> rel(n);
  const double start = 0.5, end = 0.5 * spec.approach;
  for (int i = 0; i < n; ++i) rel[i] = start + (end - start) * i / (n - 1);
  return rel;
}

// Target placement shared by all scene kinds: small constant image offset
// from the frame center and a slowly drifting roll.
struct Placement {
  double off_x = 0.0, off_y = 0.0, roll0 = 0.0, roll_drift = 0.0;
  static Placement random(Rng& rng, const Camera& cam) {
    Placement p;
    p.off_x = rng.uniform(-0.04, 0.04) * cam.height;
    p.off_y = rng.uniform(-0.04, 0.04) * cam.height;
    p.roll0 = rng.uniform(-0.08, 0.08);
    p.roll_drift = rng.uniform(-0.03, 0.03);
    return p;
  }
  double roll(int i, int n) const { return roll0 + roll_drift * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.0); }
};

LiveScene make_live_scene(std::uint64_t seed, const Camera& cam, const std::vector<double>& rel, double depth_amp,
                          bool placed = true) {
  Rng rng(mix_seed(seed, 11));
  FaceModel face(mix_seed(seed, 1), depth_amp);
  Background bg(mix_seed(seed, 2));
  const Lighting light = Lighting::random(rng);
  const Placement place = placed ? Placement::random(rng, cam) : Placement{};
  std::vector<Pose> poses;
  const int n = static_cast<int>(rel.size());
  for (int i = 0; i < n; ++i)
    poses.push_back(pose_for(cam, face.half_width(), FaceModel::half_height(), rel[i], place.off_x, place.off_y,
                             place.roll(i, n)));
  return LiveScene(cam, std::move(face), std::move(bg), light, std::move(poses));
}

// Face-sized source shot framed with the face at `rel` of the content height.
LiveScene make_source_scene(std::uint64_t seed, int w, int h, const std::vector<double>& rel) {
  return make_live_scene(seed, Camera::for_frame(w, h), rel, 0.25, false);
}

// Appearance change of printed media.
Rgb print_transfer(const Rgb& c) {
  Rgb o{0.06 + 0.84 * c.r, 0.06 + 0.84 * c.g, 0.06 + 0.84 * c.b};
  return mix(o, Rgb{o.luma(), o.luma(), o.luma()}, 0.3);
}

// Emission curve of a display plus its sub-pixel grid seen by the camera.
// (sx, sy) are screen coordinates in units of screen pixels.
Rgb screen_transfer(const Rgb& c, double sx, double sy, double strength) {
  auto emit = [](double v) { return 0.03 + 0.95 * std::pow(std::clamp(v, 0.0, 1.0), 0.8); };
  Rgb o{emit(c.r), emit(c.g), emit(c.b)};
  const double row = 0.5 * strength * std::cos(kTwoPi * sy);
  o.r *= 1.0 + strength * std::cos(kTwoPi * sx) + row;
  o.g *= 1.0 + strength * std::cos(kTwoPi * sx - kTwoPi / 3.0) + row;
  o.b *= 1.0 + strength * std::cos(kTwoPi * sx - 2.0 * kTwoPi / 3.0) + row;
  return o;
}

// A flat medium moving toward the camera: printed photo, photo on a screen,
// or a screen replaying an almost static face.
class PlaneScene final : public Scene {
 public:
  enum class Medium { Print, Screen };

  PlaneScene(Camera cam, Medium medium, std::vector<SourceShot> shots, std::vector<Point> shot_jitter,
             Background bg, std::vector<Pose> poses, ScreenArtifacts artifacts)
      : cam_(cam),
        medium_(medium),
        shots_(std::move(shots)),
        jitter_(std::move(shot_jitter)),
        bg_(std::move(bg)),
        poses_(std::move(poses)),
        artifacts_(artifacts) {
    // Screen pixel pitch in face units so that it spans pixel_grid_period
    // camera pixels at the first frame.
    pitch_ = artifacts_.pixel_grid_period * poses_.front().z / cam_.f;
    Rng rng(7);
    paper_ = BandTexture(rng, 8, 20.0, 40.0);
  }

  const Camera& camera() const override { return cam_; }

  // Plane-local coordinates (face units about the displayed face center at
  // frame i) of a camera pixel.
  Point local(int frame, Point px) const {
    const Pose& pose = poses_[frame];
    const double x = (px.x - cam_.cx) * pose.z / cam_.f - pose.x0;
    const double y = (px.y - cam_.cy) * pose.z / cam_.f - pose.y0;
    return rotate({x, y}, -pose.roll);
  }

  Point to_camera(int frame, Point l) const {
    const Pose& pose = poses_[frame];
    const Point w = rotate(l, pose.roll);
    return cam_.project(pose.x0 + w.x, pose.y0 + w.y, pose.z);
  }

  const SourceShot& shot(int frame) const { return shots_[std::min<std::size_t>(frame, shots_.size() - 1)]; }
  Point jitter(int frame) const { return jitter_.empty() ? Point{} : jitter_[std::min<std::size_t>(frame, jitter_.size() - 1)]; }

  // Content pixel for a plane-local point at frame i.
  Point content_px(int frame, Point l) const {
    const SourceShot& s = shot(frame);
    const Point j = jitter(frame);
    return {s.face_center.x + (l.x - j.x) * s.px_per_unit, s.face_center.y + (l.y - j.y) * s.px_per_unit};
  }
  bool in_content(int frame, Point c) const {
    const SourceShot& s = shot(frame);
    return c.x >= 0 && c.y >= 0 && c.x <= s.image.width() - 1 && c.y <= s.image.height() - 1;
  }

  ImageBuffer radiance(int frame) const override {
    std::vector<Rgb> px(static_cast<std::size_t>(cam_.width) * cam_.height);
    const SourceShot& s = shot(frame);
    for (int y = 0; y < cam_.height; ++y)
      for (int x = 0; x < cam_.width; ++x) {
        const Point p{static_cast<double>(x), static_cast<double>(y)};
        const Point l = local(frame, p);
        const Point c = content_px(frame, l);
        Rgb out;
        if (!in_content(frame, c)) {
          const double zb = bg_.depth();
          out = bg_.albedo(zb * (p.x - cam_.cx) / cam_.f, zb * (p.y - cam_.cy) / cam_.f) * 0.95;
        } else {
          const Rgb src = sample_rgb(s.image, c.x, c.y);
          if (medium_ == Medium::Print) {
            out = print_transfer(src) * (1.0 + 0.02 * paper_(l.x, l.y));
          } else {
            out = screen_transfer(src, l.x / pitch_, l.y / pitch_, artifacts_.moire_strength);
          }
        }
        px[static_cast<std::size_t>(y) * cam_.width + x] = out;
      }
    return to_image(px, cam_.width, cam_.height);
  }

  FrameAnnotation annotation(int frame) const override {
    const SourceShot& s = shot(frame);
    const Pose& pose = poses_[frame];
    // Displayed face offset inside the medium (replays jitter slightly).
    const Point j = jitter(frame);
    Pose shifted = pose;
    const Point jw = rotate(j, pose.roll);
    shifted.x0 += jw.x;
    shifted.y0 += jw.y;
    return annotate_ellipse(cam_, shifted, s.half_w, FaceModel::half_height(), s.keypoints, {0, 0, 0, 0, 0});
  }

  std::optional<Point> track(int i, Point px, int j) const override {
    const Point li = local(i, px);
    if (!in_content(i, content_px(i, li))) {
      if (in_content(j, content_px(j, local(j, px)))) return std::nullopt;
      return px;
    }
    // Displayed content moves with its jitter between the two frames.
    const Point ji = jitter(i), jj = jitter(j);
    const Point lj{li.x - ji.x + jj.x, li.y - ji.y + jj.y};
    const Point dst = to_camera(j, lj);
    if (!cam_.inside(dst)) return std::nullopt;
    return dst;
  }

 private:
  Camera cam_;
  Medium medium_;
  std::vector<SourceShot> shots_;
  std::vector<Point> jitter_;
  Background bg_;
  std::vector<Pose> poses_;
  ScreenArtifacts artifacts_;
  double pitch_ = 0.01;
  BandTexture paper_;
};

// Flat printed face cut to the face outline with eye holes, held in front
// of the attacker's head and moved toward the camera; the room behind is
// static.
class MaskScene final : public Scene {
 public:
  MaskScene(Camera cam, SourceShot print, FaceModel wearer, Background bg, Lighting light, std::vector<Pose> poses,
            double wearer_gap)
      : cam_(cam),
        print_(std::move(print)),
        wearer_(std::move(wearer)),
        bg_(std::move(bg)),
        light_(light),
        poses_(std::move(poses)),
        gap_(wearer_gap) {}

  const Camera& camera() const override { return cam_; }

  enum class Surface { Mask, Wearer, Wall };
  struct Hit {
    Surface surface = Surface::Wall;
    double p = 0.0, q = 0.0;
  };

  bool in_hole(double p, double q) const {
    for (int e = 0; e < 2; ++e) {
      const Point eye = print_.keypoints.pts[e];
      if (std::hypot(p - eye.x, (q - eye.y) * 1.6) < kHoleRadius) return true;
    }
    return false;
  }

  bool on_mask(double p, double q) const {
    const double a = print_.half_w, b = FaceModel::half_height();
    return (p / a) * (p / a) + (q / b) * (q / b) < 1.0 && !in_hole(p, q);
  }

  Hit trace(int frame, Point px) const {
    const Pose& pose = poses_[frame];
    const double dx = (px.x - cam_.cx) / cam_.f, dy = (px.y - cam_.cy) / cam_.f;
    const Point l = rotate({pose.z * dx - pose.x0, pose.z * dy - pose.y0}, -pose.roll);
    const double a = print_.half_w, b = FaceModel::half_height();
    if ((l.x / a) * (l.x / a) + (l.y / b) * (l.y / b) < 1.0) {
      if (!in_hole(l.x, l.y)) return {Surface::Mask, l.x, l.y};
      // Through the eye hole onto the wearer's face.
      const double zw = pose.z + gap_;
      double t = zw;
      Point wl{};
      for (int it = 0; it < 12; ++it) {
        wl = rotate({t * dx - pose.x0, t * dy - pose.y0}, -pose.roll);
        t = zw - wearer_.height(wl.x, wl.y);
      }
      wl = rotate({t * dx - pose.x0, t * dy - pose.y0}, -pose.roll);
      if (wearer_.inside(wl.x, wl.y)) return {Surface::Wearer, wl.x, wl.y};
    }
    const double zb = bg_.depth();
    return {Surface::Wall, zb * dx, zb * dy};
  }

  ImageBuffer radiance(int frame) const override {
    std::vector<Rgb> px(static_cast<std::size_t>(cam_.width) * cam_.height);
    for (int y = 0; y < cam_.height; ++y)
      for (int x = 0; x < cam_.width; ++x) {
        const Hit h = trace(frame, {static_cast<double>(x), static_cast<double>(y)});
        Rgb out;
        switch (h.surface) {
          case Surface::Mask: {
            const Rgb src = sample_rgb(print_.image, print_.face_center.x + h.p * print_.px_per_unit,
                                       print_.face_center.y + h.q * print_.px_per_unit);
            out = print_transfer(src);
            break;
          }
          case Surface::Wearer:
            out = wearer_.albedo(h.p, h.q) * (light_.ambient * 0.8);
            break;
          case Surface::Wall:
            out = bg_.albedo(h.p, h.q) * (light_.ambient + 0.9 * (1.0 - light_.ambient));
            break;
        }
        px[static_cast<std::size_t>(y) * cam_.width + x] = out;
      }
    return to_image(px, cam_.width, cam_.height);
  }

  FrameAnnotation annotation(int frame) const override {
    return annotate_ellipse(cam_, poses_[frame], print_.half_w, FaceModel::half_height(), print_.keypoints,
                            {0, 0, 0, 0, 0});
  }

  std::optional<Point> track(int i, Point px, int j) const override {
    const Hit hit = trace(i, px);
    Point dst = px;
    const Pose& pose = poses_[j];
    if (hit.surface == Surface::Wall) {
      if (trace(j, px).surface != Surface::Wall) return std::nullopt;
      return px;
    }
    const Point w = rotate({hit.p, hit.q}, pose.roll);
    if (hit.surface == Surface::Mask) {
      dst = cam_.project(pose.x0 + w.x, pose.y0 + w.y, pose.z);
    } else {
      dst = cam_.project(pose.x0 + w.x, pose.y0 + w.y, pose.z + gap_ - wearer_.height(hit.p, hit.q));
    }
    if (!cam_.inside(dst)) return std::nullopt;
    const Hit back = trace(j, dst);
    if (back.surface != hit.surface || std::hypot(back.p - hit.p, back.q - hit.q) > 2e-3) return std::nullopt;
    return dst;
  }

 private:
  static constexpr double kHoleRadius = 0.045;
  Camera cam_;
  SourceShot print_;
  FaceModel wearer_;
  Background bg_;
  Lighting light_;
  std::vector<Pose> poses_;
  double gap_ = 0.25;
};

// A static screen filling the camera view while replaying a recording of a
// live approach.
class ReplayScene final : public Scene {
 public:
  ReplayScene(Camera cam, LiveScene source, double display_scale, ScreenArtifacts artifacts)
      : cam_(cam), source_(std::move(source)), scale_(display_scale), artifacts_(artifacts) {}

  const Camera& camera() const override { return cam_; }

  Point to_source(Point px) const {
    const Camera& s = source_.camera();
    return {s.cx + (px.x - cam_.cx) / scale_, s.cy + (px.y - cam_.cy) / scale_};
  }
  Point to_camera(Point sp) const {
    const Camera& s = source_.camera();
    return {cam_.cx + (sp.x - s.cx) * scale_, cam_.cy + (sp.y - s.cy) * scale_};
  }

  ImageBuffer radiance(int frame) const override {
    const ImageBuffer content = source_.radiance(frame);
    std::vector<Rgb> px(static_cast<std::size_t>(cam_.width) * cam_.height);
    for (int y = 0; y < cam_.height; ++y)
      for (int x = 0; x < cam_.width; ++x) {
        const Point p{static_cast<double>(x), static_cast<double>(y)};
        const Point sp = to_source(p);
        const Rgb src = sample_rgb(content, sp.x, sp.y);
        px[static_cast<std::size_t>(y) * cam_.width + x] =
            screen_transfer(src, x / artifacts_.pixel_grid_period, y / artifacts_.pixel_grid_period,
                            artifacts_.moire_strength);
      }
    return to_image(px, cam_.width, cam_.height);
  }

  FrameAnnotation annotation(int frame) const override {
    FrameAnnotation a = source_.annotation(frame);
    const Point tl = to_camera({a.box.x, a.box.y});
    a.box = {tl.x, tl.y, a.box.w * scale_, a.box.h * scale_};
    a.keypoints = {to_camera(a.keypoints.left_eye), to_camera(a.keypoints.right_eye), to_camera(a.keypoints.nose),
                   to_camera(a.keypoints.mouth_left), to_camera(a.keypoints.mouth_right)};
    a.rel_height = a.box.h / cam_.height;
    return a;
  }

  std::optional<Point> track(int i, Point px, int j) const override {
    const auto moved = source_.track(i, to_source(px), j);
    if (!moved) return std::nullopt;
    const Point dst = to_camera(*moved);
    if (!cam_.inside(dst)) return std::nullopt;
    return dst;
  }

 private:
  Camera cam_;
  LiveScene source_;
  double scale_ = 1.0;
  ScreenArtifacts artifacts_;
};

// Source rendering size for photos: face occupies 0.35 of the content
// height, so the medium overfills the camera view at every checkpoint.
constexpr double kPhotoFaceRel = 0.35;

std::unique_ptr<Scene> build_scene(const SceneSpec& spec) {
  const Camera cam = Camera::for_frame(spec.width, spec.height);
  const std::vector<double> rel = schedule(spec);
  const int n = static_cast<int>(rel.size());
  const std::uint64_t seed = mix_seed(spec.texture_seed, static_cast<std::uint64_t>(spec.attack) + 101);
  Rng rng(mix_seed(seed, 3));

  switch (spec.attack) {
    case AttackClass::Real:
      return std::make_unique<LiveScene>(
          make_live_scene(spec.texture_seed, cam, rel, spec.effective_depth_amplitude(), spec.random_placement));

    case AttackClass::PrintedPhoto:
    case AttackClass::ScreenPhoto:
    case AttackClass::StaticVideo: {
      const int sw = spec.width * 3 / 2, sh = spec.height * 3 / 2;
      const bool replay = spec.attack == AttackClass::StaticVideo;
      // Replays hold the face still up to a small sway.
      std::vector<double> src_rel(replay ? n : 1, kPhotoFaceRel);
      const LiveScene source = make_source_scene(mix_seed(seed, 4), sw, sh, src_rel);
      std::vector<SourceShot> shots;
      std::vector<Point> jitter;
      if (replay) {
        const double amp = rng.uniform(0.006, 0.015), phase = rng.uniform(0.0, kTwoPi);
        const double freq = rng.uniform(0.2, 0.5);
        for (int i = 0; i < n; ++i) jitter.push_back({amp * std::sin(freq * i + phase), 0.5 * amp * std::cos(freq * i)});
        // Content is a still shot whose face sways inside the medium.
        shots.push_back(shoot_source(source, 0));
      } else {
        shots.push_back(shoot_source(source, 0));
      }
      Placement place = Placement::random(rng, cam);
      if (!spec.random_placement) place = {};
      std::vector<Pose> poses;
      for (int i = 0; i < n; ++i)
        poses.push_back(pose_for(cam, shots.front().half_w, FaceModel::half_height(), rel[i], place.off_x,
                                 place.off_y, place.roll(i, n)));
      const auto medium = spec.attack == AttackClass::PrintedPhoto ? PlaneScene::Medium::Print : PlaneScene::Medium::Screen;
      return std::make_unique<PlaneScene>(cam, medium, std::move(shots), std::move(jitter),
                                          Background(mix_seed(seed, 5)), std::move(poses), spec.screen_artifacts);
    }

    case AttackClass::PrintedMask: {
      const int sw = spec.width * 3 / 2, sh = spec.height * 3 / 2;
      const LiveScene source = make_source_scene(mix_seed(seed, 4), sw, sh, {kPhotoFaceRel});
      SourceShot print = shoot_source(source, 0);
      FaceModel wearer(mix_seed(seed, 6), 0.25);
      const double gap = wearer.max_height() + 0.02;
      Placement place = Placement::random(rng, cam);
      if (!spec.random_placement) place = {};
      const Lighting light = Lighting::random(rng);
      std::vector<Pose> poses;
      for (int i = 0; i < n; ++i)
        poses.push_back(
            pose_for(cam, print.half_w, FaceModel::half_height(), rel[i], place.off_x, place.off_y, place.roll(i, n)));
      return std::make_unique<MaskScene>(cam, std::move(print), std::move(wearer), Background(mix_seed(seed, 5)),
                                         light, std::move(poses), gap);
    }

    case AttackClass::DynamicVideo: {
      // The recording overfills the screen by 10%; its face heights are
      // chosen so the displayed face follows the requested schedule.
      const int sw = spec.width * 5 / 4, sh = spec.height * 5 / 4;
      const double scale = 1.1 * spec.width / sw;
      std::vector<double> src_rel(n);
      for (int i = 0; i < n; ++i) src_rel[i] = rel[i] * spec.height / (scale * sh);
      LiveScene source = make_live_scene(mix_seed(seed, 4), Camera::for_frame(sw, sh), src_rel, 0.25);
      return std::make_unique<ReplayScene>(cam, std::move(source), scale, spec.screen_artifacts);
    }
  }
  throw std::invalid_argument("unknown attack class");
}

}  // namespace

// ---------------------------------------------------------------------------
// Public API
// ---------------------------------------------------------------------------

std::string to_string(AttackClass c) {
  switch (c) {
    case AttackClass::Real:
      return "Real";
    case AttackClass::ScreenPhoto:
      return "ScreenPhoto";
    case AttackClass::PrintedPhoto:
      return "PrintedPhoto";
    case AttackClass::PrintedMask:
      return "PrintedMask";
    case AttackClass::DynamicVideo:
      return "DynamicVideo";
    case AttackClass::StaticVideo:
      return "StaticVideo";
  }
  return "Unknown";
}

AttackClass attack_class_from_string(const std::string& s) {
  for (AttackClass c : kAllClasses) {
    if (to_string(c) == s) return c;
  }
  throw DataError("unknown attack class: " + s);
}

bool is_screen_class(AttackClass c) {
  return c == AttackClass::ScreenPhoto || c == AttackClass::DynamicVideo || c == AttackClass::StaticVideo;
}

void SceneSpec::validate() const {
  if (frame_count() < 3) throw std::invalid_argument("scene needs at least 3 frames");
  if (!(approach > 1.0) || 0.5 * approach >= 1.0) throw std::invalid_argument("approach ratio must be in (1, 2)");
  if (depth_amplitude && attack != AttackClass::Real)
    throw std::invalid_argument("depth_amplitude only applies to Real scenes");
  if (depth_amplitude && !(*depth_amplitude >= 0.0 && *depth_amplitude <= 0.5))
    throw std::invalid_argument("depth_amplitude must be in [0, 0.5]");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise sigma must be nonnegative");
  if (width < 32 || height < 32) throw std::invalid_argument("frame must be at least 32x32");
  if (!(screen_artifacts.pixel_grid_period >= 2.0) || !(screen_artifacts.moire_strength >= 0.0))
    throw std::invalid_argument("invalid screen artifacts");
  for (double r : height_script) {
    if (!(r > 0.05 && r < 0.95)) throw std::invalid_argument("scripted heights must be in (0.05, 0.95)");
  }
}

double SceneSpec::effective_depth_amplitude() const { return depth_amplitude.value_or(0.25); }

int SceneSpec::frame_count() const { return height_script.empty() ? frames : static_cast<int>(height_script.size()); }

SceneRenderer::SceneRenderer(const SceneSpec& spec) : spec_(spec) {
  spec_.validate();
  scene_ = build_scene(spec_);
}

SceneRenderer::~SceneRenderer() = default;
SceneRenderer::SceneRenderer(SceneRenderer&&) noexcept = default;
SceneRenderer& SceneRenderer::operator=(SceneRenderer&&) noexcept = default;

ImageBuffer SceneRenderer::frame(int i) const {
  if (i < 0 || i >= frame_count()) throw std::out_of_range("frame index out of range");
  ImageBuffer img = scene_->radiance(i);
  if (spec_.noise_sigma > 0.0) {
    Rng rng(mix_seed(mix_seed(spec_.texture_seed, static_cast<std::uint64_t>(spec_.attack) + 7), 1000 + i));
    for (double& s : img.samples()) s += rng.normal(spec_.noise_sigma);
    img.clamp_unit();
  }
  return img;
}

FrameAnnotation SceneRenderer::annotation(int i) const {
  if (i < 0 || i >= frame_count()) throw std::out_of_range("frame index out of range");
  return scene_->annotation(i);
}

GroundTruthFlow SceneRenderer::ground_truth_flow(int i, int j) const {
  if (i < 0 || j < 0 || i >= frame_count() || j >= frame_count()) throw std::out_of_range("frame index out of range");
  const Camera& cam = scene_->camera();
  GroundTruthFlow gt{FlowField(cam.width, cam.height),
                     std::vector<std::uint8_t>(static_cast<std::size_t>(cam.width) * cam.height, 1)};
  if (i == j) return gt;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const std::size_t k = gt.flow.index(x, y);
      const Point p{static_cast<double>(x), static_cast<double>(y)};
      const auto dst = scene_->track(i, p, j);
      if (!dst) {
        gt.valid[k] = 0;
        continue;
      }
      gt.flow.u[k] = dst->x - p.x;
      gt.flow.v[k] = dst->y - p.y;
    }
  return gt;
}

RenderedSequence render(const SceneSpec& spec) {
  SceneRenderer r(spec);
  RenderedSequence seq;
  seq.spec = r.spec();
  seq.label = spec.attack;
  for (int i = 0; i < r.frame_count(); ++i) {
    seq.frames.push_back(r.frame(i));
    seq.annotations.push_back(r.annotation(i));
  }
  return seq;
}

GroundTruthFlow ground_truth_flow(const RenderedSequence& seq, int i, int j, bool after_preprocess,
                                  const PreprocessConfig& cfg) {
  SceneRenderer r(seq.spec);
  GroundTruthFlow frame_gt = r.ground_truth_flow(i, j);
  if (!after_preprocess) return frame_gt;

  const auto& ai = seq.annotations.at(i);
  const auto& aj = seq.annotations.at(j);
  // Use the exact mappings the preprocessing applies.
  const PreprocessedPair pp = preprocess_triplet(seq.frames.at(i), seq.frames.at(i), seq.frames.at(j), ai.keypoints,
                                                 ai.keypoints, aj.keypoints, ai.box, ai.box, aj.box, cfg);
  const Transform2D from_crop_i = pp.f1_transform.inverse();
  const Transform2D& to_crop_j = pp.f3_transform;

  const int n = cfg.crop_size;
  GroundTruthFlow out{FlowField(n, n), std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n, 0)};
  const FlowField& f = frame_gt.flow;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const Point fp = from_crop_i.apply({static_cast<double>(x), static_cast<double>(y)});
      const int ix = static_cast<int>(std::lround(fp.x)), iy = static_cast<int>(std::lround(fp.y));
      if (ix < 0 || iy < 0 || ix >= f.width || iy >= f.height) continue;
      // Nearest-pixel validity, bilinear motion.
      if (!frame_gt.valid[f.index(ix, iy)]) continue;
      const double cx = std::clamp(fp.x, 0.0, f.width - 1.0), cy = std::clamp(fp.y, 0.0, f.height - 1.0);
      const int x0 = static_cast<int>(cx), y0 = static_cast<int>(cy);
      const int x1 = std::min(x0 + 1, f.width - 1), y1 = std::min(y0 + 1, f.height - 1);
      const double fx = cx - x0, fy = cy - y0;
      auto bil = [&](const std::vector<double>& c) {
        return (c[f.index(x0, y0)] * (1 - fx) + c[f.index(x1, y0)] * fx) * (1 - fy) +
               (c[f.index(x0, y1)] * (1 - fx) + c[f.index(x1, y1)] * fx) * fy;
      };
      const Point moved{fp.x + bil(f.u), fp.y + bil(f.v)};
      const Point cj = to_crop_j.apply(moved);
      const std::size_t k = out.flow.index(x, y);
      out.flow.u[k] = cj.x - x;
      out.flow.v[k] = cj.y - y;
      out.valid[k] = 1;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets and serialization
// ---------------------------------------------------------------------------

std::vector<const DatasetItem*> Dataset::subset(Split split) const {
  std::vector<const DatasetItem*> out;
  for (const auto& item : items) {
    if (item.split == split) out.push_back(&item);
  }
  return out;
}

Dataset make_dataset(int n_per_class, std::uint64_t seed, const std::vector<AttackClass>& classes) {
  if (n_per_class < 1) throw std::invalid_argument("n_per_class must be at least 1");
  Dataset d;
  d.seed = seed;
  Rng rng(mix_seed(seed, 0xDA7A));
  const int n_train = static_cast<int>(std::lround(0.8 * n_per_class));
  std::uint64_t counter = 0;
  for (AttackClass c : classes) {
    for (int k = 0; k < n_per_class; ++k) {
      DatasetItem item;
      item.spec.attack = c;
      item.spec.texture_seed = mix_seed(seed, ++counter);
      if (c == AttackClass::Real) item.spec.depth_amplitude = rng.uniform(0.20, 0.30);
      item.spec.noise_sigma = rng.uniform(0.006, 0.014);
      if (is_screen_class(c)) {
        item.spec.screen_artifacts.moire_strength = rng.uniform(0.08, 0.16);
        item.spec.screen_artifacts.pixel_grid_period = rng.uniform(2.6, 3.6);
      }
      item.split = k < n_train ? Split::Train : Split::Test;
      char id[64];
      std::snprintf(id, sizeof(id), "%s_%04d", to_string(c).c_str(), k);
      item.id = id;
      d.items.push_back(std::move(item));
    }
  }
  return d;
}

void to_json(nlohmann::json& j, const SceneSpec& s) {
  j = {{"attack", to_string(s.attack)},
       {"texture_seed", s.texture_seed},
       {"approach", s.approach},
       {"frames", s.frames},
       {"screen_artifacts",
        {{"moire_strength", s.screen_artifacts.moire_strength},
         {"pixel_grid_period", s.screen_artifacts.pixel_grid_period}}},
       {"noise_sigma", s.noise_sigma},
       {"width", s.width},
       {"height", s.height}};
  if (s.depth_amplitude) j["depth_amplitude"] = *s.depth_amplitude;
  if (!s.height_script.empty()) j["height_script"] = s.height_script;
  if (!s.random_placement) j["random_placement"] = false;
}

void from_json(const nlohmann::json& j, SceneSpec& s) {
  try {
    s.attack = attack_class_from_string(j.at("attack").get<std::string>());
    s.texture_seed = j.at("texture_seed").get<std::uint64_t>();
    s.approach = j.value("approach", 1.5);
    s.frames = j.value("frames", 30);
    if (j.contains("screen_artifacts")) {
      s.screen_artifacts.moire_strength = j["screen_artifacts"].value("moire_strength", 0.12);
      s.screen_artifacts.pixel_grid_period = j["screen_artifacts"].value("pixel_grid_period", 3.0);
    }
    s.noise_sigma = j.value("noise_sigma", 0.01);
    s.width = j.value("width", 320);
    s.height = j.value("height", 240);
    if (j.contains("depth_amplitude")) s.depth_amplitude = j["depth_amplitude"].get<double>();
    if (j.contains("height_script")) s.height_script = j["height_script"].get<std::vector<double>>();
    s.random_placement = j.value("random_placement", true);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("scene spec: ") + e.what());
  }
}

void to_json(nlohmann::json& j, const Dataset& d) {
  j = {{"seed", d.seed}, {"items", nlohmann::json::array()}};
  for (const auto& item : d.items) {
    j["items"].push_back({{"id", item.id}, {"split", item.split == Split::Train ? "train" : "test"}, {"spec", item.spec}});
  }
}

void from_json(const nlohmann::json& j, Dataset& d) {
  try {
    d.seed = j.at("seed").get<std::uint64_t>();
    d.items.clear();
    for (const auto& it : j.at("items")) {
      DatasetItem item;
      item.id = it.at("id").get<std::string>();
      const auto split = it.at("split").get<std::string>();
      if (split != "train" && split != "test") throw DataError("dataset split must be train or test");
      item.split = split == "train" ? Split::Train : Split::Test;
      item.spec = it.at("spec").get<SceneSpec>();
      d.items.push_back(std::move(item));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("dataset manifest: ") + e.what());
  }
}

nlohmann::json annotations_to_json(const std::vector<FrameAnnotation>& ann, int frame_w, int frame_h) {
  nlohmann::json j = {{"frame_width", frame_w}, {"frame_height", frame_h}, {"frames", nlohmann::json::array()}};
  for (const auto& a : ann) {
    j["frames"].push_back({{"box", a.box}, {"keypoints", a.keypoints}, {"rel_height", a.rel_height}});
  }
  return j;
}

void write_sequence(const std::filesystem::path& dir, const RenderedSequence& seq) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03zu.png", i);
    write_image(dir / name, seq.frames[i]);
  }
  nlohmann::json ann = annotations_to_json(seq.annotations, seq.spec.width, seq.spec.height);
  ann["spec"] = seq.spec;
  std::ofstream(dir / "annotations.json") << ann.dump(2) << '\n';
  std::ofstream(dir / "label") << to_string(seq.label) << '\n';
}

void write_dataset(const std::filesystem::path& root, const Dataset& dataset) {
  std::filesystem::create_directories(root);
  for (const auto& item : dataset.items) {
    write_sequence(root / to_string(item.spec.attack) / item.id, render(item.spec));
  }
  std::ofstream(root / "dataset.json") << nlohmann::json(dataset).dump(2) << '\n';
}

LoadedSequence read_sequence(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("sequence directory not found: " + dir.string());
  LoadedSequence seq;
  for (int i = 0;; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03d.png", i);
    const auto path = dir / name;
    if (!std::filesystem::exists(path)) break;
    seq.frames.push_back(read_image(path));
  }
  if (seq.frames.empty()) throw DataError("no frames in " + dir.string());

  const auto ann_path = dir / "annotations.json";
  if (!std::filesystem::exists(ann_path)) throw DataError("missing annotations.json in " + dir.string());
  nlohmann::json j;
  try {
    std::ifstream in(ann_path);
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed annotations.json: " + std::string(e.what()));
  }
  if (!j.contains("frames") || !j["frames"].is_array()) throw DataError("annotations.json lacks a frames array");
  const auto& frames = j["frames"];
  if (frames.size() != seq.frames.size()) throw DataError("annotation count does not match frame count");
  for (const auto& f : frames) {
    if (f.is_null() || !f.contains("box")) {
      seq.annotations.emplace_back(std::nullopt);
      continue;
    }
    FrameAnnotation a;
    a.box = f.at("box").get<FaceBox>();
    if (!f.contains("keypoints")) throw DataError("annotation with a box must carry keypoints");
    a.keypoints = f.at("keypoints").get<KeyPoints>();
    a.rel_height = a.box.h / seq.frames.front().height();
    seq.annotations.emplace_back(a);
  }
  if (j.contains("spec")) seq.spec = j["spec"].get<SceneSpec>();
  const auto label_path = dir / "label";
  if (std::filesystem::exists(label_path)) {
    std::ifstream in(label_path);
    std::string name;
    in >> name;
    seq.label = attack_class_from_string(name);
  }
  return seq;
}

}  // namespace flowgate
