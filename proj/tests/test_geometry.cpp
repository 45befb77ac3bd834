#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "flowgate/errors.hpp"
#include "flowgate/geometry.hpp"
#include "test_util.hpp"

using namespace flowgate;

namespace {

KeyPoints upright(Point c, double eye_dist) {
  const double h = eye_dist / 2;
  return {{c.x - h, c.y}, {c.x + h, c.y}, {c.x, c.y + 0.6 * eye_dist}, {c.x - 0.7 * h, c.y + 1.1 * eye_dist},
          {c.x + 0.7 * h, c.y + 1.1 * eye_dist}};
}

double max_abs_diff(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("level, centered eyes give the identity alignment") {
  const int w = 101, h = 81;
  const KeyPoints kp = upright({50, 40}, 30);
  const Transform2D t = rigid_alignment_transform(kp, w, h);
  CHECK(max_abs_diff(t.matrix(), Eigen::Matrix3d::Identity()) < 1e-12);
}

TEST_CASE("45 degree eye tilt is undone by a -45 degree rotation") {
  KeyPoints kp = upright({50, 50}, 20);
  kp.left_eye = {40, 40};
  kp.right_eye = {60, 60};
  const ImageBuffer img(100, 100, 1, 0.5);
  const AlignResult r = rigid_align(kp, img);
  CHECK(r.angle == doctest::Approx(-std::numbers::pi / 4).epsilon(1e-12));
  const Point l = r.transform.apply(kp.left_eye), rr = r.transform.apply(kp.right_eye);
  CHECK(std::abs(l.y - rr.y) < 1e-9);
}

TEST_CASE("alignment cancels any rigid motion of the face") {
  std::mt19937 rng(12);
  std::uniform_real_distribution<double> ang(-0.6, 0.6), sh(-30, 30);
  const KeyPoints kp = upright({160, 120}, 40);
  const Transform2D base = rigid_alignment_transform(kp, 320, 240);
  for (int trial = 0; trial < 20; ++trial) {
    const Transform2D m = Transform2D::translation(sh(rng), sh(rng)) * Transform2D::rotation(ang(rng), {160, 120});
    const Transform2D moved = rigid_alignment_transform(kp.mapped(m), 320, 240);
    // moved * m must equal base: the composition returns the face to the
    // same canonical placement.
    const Eigen::Matrix3d residual = (moved * m * base.inverse()).matrix();
    CHECK(max_abs_diff(residual, Eigen::Matrix3d::Identity()) < 1e-6);
    const Eigen::Matrix2d lin = moved.matrix().topLeftCorner<2, 2>();
    CHECK(std::abs(lin.determinant() - 1.0) < 1e-9);
  }
}

TEST_CASE("coincident eyes are rejected") {
  KeyPoints kp = upright({50, 50}, 20);
  kp.right_eye = {kp.left_eye.x + 1.0, kp.left_eye.y + 1.0};
  CHECK_THROWS_AS(rigid_alignment_transform(kp, 100, 100), std::invalid_argument);
}

TEST_CASE("margin crop rectangles") {
  const CropRect r = margin_crop_rect({100, 100, 100, 100}, 0.10);
  CHECK(r.x == doctest::Approx(90));
  CHECK(r.y == doctest::Approx(90));
  CHECK(r.side == doctest::Approx(120));
  const CropRect z = margin_crop_rect({10, 20, 50, 50}, 0.0);
  CHECK(z.x == doctest::Approx(10));
  CHECK(z.y == doctest::Approx(20));
  CHECK(z.side == doctest::Approx(50));
  CHECK_THROWS_AS(margin_crop_rect({0, 0, 0, 10}), std::invalid_argument);
  CHECK_THROWS_AS(margin_crop_rect({0, 0, -5, 10}), std::invalid_argument);
}

TEST_CASE("crop with margin samples the window and replicates edges") {
  const ImageBuffer img = test::smooth_texture(200, 160, 2);
  SUBCASE("margin 0 reproduces the box pixels") {
    const ImageBuffer c = crop_with_margin(img, {39.5, 19.5, 50, 50}, 0.0);
    REQUIRE(c.width() == 50);
    for (int y = 0; y < 50; ++y) {
      for (int x = 0; x < 50; ++x) CHECK(c.at(x, y) == doctest::Approx(img.at(40 + x, 20 + y)).epsilon(1e-12));
    }
  }
  SUBCASE("box at the image corner keeps the 1.2 side") {
    const ImageBuffer c = crop_with_margin(img, {-0.5, -0.5, 60, 60}, 0.10);
    CHECK(c.width() == 72);
    CHECK(c.height() == 72);
    CHECK(c.at(0, 0) == doctest::Approx(img.at(0, 0)));
  }
}

TEST_CASE("crop with margin is translation equivariant") {
  const ImageBuffer img = test::smooth_texture(200, 160, 8);
  const Transform2D shift = Transform2D::translation(7, -4);
  const ImageBuffer moved = warp(img, shift, 200, 160);
  const FaceBox box{60, 50, 70, 70};
  const ImageBuffer a = crop_with_margin(img, box);
  const ImageBuffer b = crop_with_margin(moved, box.mapped(shift));
  REQUIRE(a.width() == b.width());
  for (int y = 0; y < a.height(); ++y) {
    for (int x = 0; x < a.width(); ++x) CHECK(std::abs(a.at(x, y) - b.at(x, y)) < 1e-9);
  }
}

TEST_CASE("preprocess triplet") {
  const ImageBuffer f = test::smooth_texture(320, 240, 4, 6.0, 3);
  const KeyPoints kp = upright({160, 110}, 40);
  const FaceBox box{110, 70, 100, 110};

  SUBCASE("identical f1 and f3 give identical crops") {
    const PreprocessedPair p = preprocess_triplet(f, f, f, kp, kp, kp, box, box, box);
    CHECK(p.f1_crop.width() == 256);
    CHECK(p.f1_crop.height() == 256);
    CHECK(p.f2_crop.width() == 256);
    CHECK(p.f1_crop == p.f3_crop);
    CHECK(p.crop_side_f1 == doctest::Approx(110 * 1.2));
  }
  SUBCASE("deterministic") {
    const PreprocessedPair a = preprocess_triplet(f, f, f, kp, kp, kp, box, box, box);
    const PreprocessedPair b = preprocess_triplet(f, f, f, kp, kp, kp, box, box, box);
    CHECK(a.f1_crop == b.f1_crop);
    CHECK(a.f2_crop == b.f2_crop);
  }
  SUBCASE("a rolled f2 is not de-rolled") {
    const Transform2D roll = Transform2D::rotation(20.0 * std::numbers::pi / 180.0, {160, 120});
    const KeyPoints rolled = kp.mapped(roll);
    const PreprocessedPair p = preprocess_triplet(f, f, f, rolled, rolled, rolled, box, box, box);
    // f2 goes through crop + resize only: axis-aligned scaling.
    const Eigen::Matrix3d m2 = p.f2_transform.matrix();
    CHECK(std::abs(m2(0, 1)) < 1e-12);
    CHECK(std::abs(m2(1, 0)) < 1e-12);
    // f1 is levelled: its linear part contains the -20 degree rotation.
    const Eigen::Matrix3d m1 = p.f1_transform.matrix();
    CHECK(std::atan2(m1(1, 0), m1(0, 0)) == doctest::Approx(-20.0 * std::numbers::pi / 180.0).epsilon(1e-9));
  }
}

TEST_CASE("annotation JSON") {
  const KeyPoints kp = upright({10, 20}, 8);
  nlohmann::json j = kp;
  CHECK(j.get<KeyPoints>() == kp);
  nlohmann::json b = FaceBox{1, 2, 3, 4};
  CHECK(b.dump() == "[1.0,2.0,3.0,4.0]");
  CHECK_THROWS_AS(nlohmann::json::parse("[1,2,3]").get<FaceBox>(), DataError);
  CHECK_THROWS_AS(nlohmann::json::parse("[1,2,0,4]").get<FaceBox>(), DataError);
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"left_eye":[1,2]})").get<KeyPoints>(), DataError);
}
