#include <doctest.h>

#include <nlohmann/json.hpp>

#include <cmath>
#include <random>

#include "flowgate/eval.hpp"
#include "test_util.hpp"

using namespace flowgate;

namespace {

// P(real > spoof) + 0.5 P(tie) by enumerating every pair.
double pairwise_auc(const std::vector<double>& real, const std::vector<double>& spoof) {
  double wins = 0;
  for (double r : real) {
    for (double s : spoof) wins += r > s ? 1.0 : r == s ? 0.5 : 0.0;
  }
  return wins / (static_cast<double>(real.size()) * spoof.size());
}

}  // namespace

TEST_CASE("roc_auc examples") {
  CHECK(roc_auc(std::vector{0.9, 0.8}, std::vector{0.1, 0.2}) == 1.0);
  CHECK(roc_auc(std::vector{0.8, 0.4}, std::vector{0.6, 0.2}) == 0.75);
  CHECK(roc_auc(std::vector{0.3, 0.3, 0.3}, std::vector{0.3, 0.3}) == 0.5);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{}, std::vector{0.1}), std::invalid_argument);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{NAN}, std::vector{0.1}), std::invalid_argument);
}

TEST_CASE("roc_auc equals the pairwise count and is antisymmetric") {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    std::uniform_int_distribution<int> len(1, 200), level(0, 20);
    std::vector<double> real(len(rng)), spoof(len(rng));
    // Coarse levels force plenty of ties.
    for (auto& v : real) v = level(rng) / 20.0;
    for (auto& v : spoof) v = level(rng) / 20.0 - 0.1;
    const double a = roc_auc(real, spoof);
    REQUIRE(std::abs(a - pairwise_auc(real, spoof)) <= 1e-12);
    REQUIRE(a + roc_auc(spoof, real) == 1.0);
  }
}

TEST_CASE("blur kernels round up to odd") {
  CHECK(blur_kernel_for(0.01, 250) == 3);
  CHECK(blur_kernel_for(0.06, 250) == 15);
  CHECK(blur_kernel_for(0.12, 250) == 31);
  CHECK(blur_kernel_for(0.01, 80) == 1);
  CHECK(blur_kernel_for(0.06, 200) == 13);
  CHECK_THROWS_AS(blur_kernel_for(0, 100), std::invalid_argument);
}

TEST_CASE("stabilized average of identical frames is the plain crop") {
  const ImageBuffer f = test::smooth_texture(200, 160, 4, 8.0, 3);
  Detection d;
  d.box = {60, 30, 80, 100};
  d.keypoints = {{85, 65}, {115, 65}, {100, 85}, {88, 105}, {112, 105}};
  const std::vector<ImageBuffer> frames(5, f);
  const std::vector<Detection> dets(5, d);
  PreprocessConfig cfg;
  const ImageBuffer avg = stabilized_average_crop(frames, dets, d, cfg);
  const ImageBuffer crop = warp(f, crop_transform(margin_crop_rect(d.box, cfg.margin), cfg.crop_size), cfg.crop_size,
                                cfg.crop_size);
  REQUIRE(avg.width() == crop.width());
  double worst = 0;
  for (std::size_t k = 0; k < avg.samples().size(); ++k)
    worst = std::max(worst, std::abs(avg.samples()[k] - crop.samples()[k]));
  CHECK(worst < 1e-9);
  CHECK_THROWS_AS(stabilized_average_crop(frames, std::span(dets).first(4), d, cfg), std::invalid_argument);
}

TEST_CASE("suites on a small dataset") {
  const Dataset d = make_dataset(3, 17);
  EvalOptions opt;
  opt.seed = 17;
  opt.train.epochs = 300;
  Evaluator ev(eval_dataset(d), opt);
  CHECK_THROWS_AS(ev.run("no_such_suite"), std::invalid_argument);

  const EvalReport r = ev.run("flow_processing");
  REQUIRE(r.rows.size() == 3);
  CHECK(r.rows[0].name == "raw_flow");
  CHECK(r.rows[1].name == "magnitude");
  CHECK(r.rows[2].name == "clipped_magnitude");
  for (const auto& row : r.rows) {
    for (AttackClass c : kAllClasses) {
      if (c == AttackClass::Real) continue;
      REQUIRE(row.auc.count(c));
      CHECK(row.auc.at(c) >= 0.0);
      CHECK(row.auc.at(c) <= 1.0);
    }
    CHECK(row.n_train == 12);
    CHECK(row.n_test == 6);
  }
  CHECK(r.config_hash.size() == 16);

  const EvalReport arch = ev.run("architecture");
  REQUIRE(arch.rows.size() == 2);
  CHECK(arch.rows[0].name == "flow_only");
  CHECK(arch.rows[1].name == "dual");

  // A fresh evaluator on the same seed reproduces the numbers.
  Evaluator again(eval_dataset(d), opt);
  const EvalReport r2 = again.run("flow_processing");
  for (std::size_t i = 0; i < r.rows.size(); ++i) CHECK(r.rows[i].auc == r2.rows[i].auc);
  CHECK(r.config_hash == r2.config_hash);

  const nlohmann::json j = r;
  CHECK(j["suite"] == "flow_processing");
  CHECK(j["rows"].size() == 3);
  CHECK(report_text(r).find("clipped_magnitude") != std::string::npos);
  CHECK(report_csv(r).find("raw_flow") != std::string::npos);
}
