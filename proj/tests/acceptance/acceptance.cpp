// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed here.
//
//   flowgate_acceptance [--n 50] [--seed 2024] [--phenomenology-n 10]
//
// Exit status 0 only when every criterion passes.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "flow_oracles.hpp"
#include "flowgate/cli.hpp"
#include "flowgate/eval.hpp"
#include "flowgate/features.hpp"
#include "flowgate/service.hpp"
#include "protocol_table.hpp"
#include "service_driver.hpp"
#include "service_fuzz.hpp"
#include "test_util.hpp"

using namespace flowgate;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- flow ------------------------------------------------------------------

Outcome flow_correctness() {
  std::mt19937 rng(77);
  std::uniform_int_distribution<int> shift(-6, 6);
  double epe_sum = 0.0, epe_max = 0.0;
  for (int pair = 0; pair < 20; ++pair) {
    int dx = 0, dy = 0;
    while (dx == 0 && dy == 0) dx = shift(rng), dy = shift(rng);
    const int n = 96;
    const ImageBuffer a = test::smooth_texture(n, n, 1000 + pair, 8.0);
    const ImageBuffer b = warp(a, Transform2D::translation(dx, dy), n, n);
    FlowConfig cfg;
    cfg.resolution = n;
    const FlowField f = estimate_flow(a, b, cfg);
    FlowField truth(n, n);
    std::fill(truth.u.begin(), truth.u.end(), static_cast<float>(dx));
    std::fill(truth.v.begin(), truth.v.end(), static_cast<float>(dy));
    const double e = mean_epe(f, truth, 0.75);
    epe_sum += e;
    epe_max = std::max(epe_max, e);
  }
  const double epe = epe_sum / 20;

  const int zn = 128;
  const ImageBuffer za = test::smooth_texture(zn, zn, 5, 8.0);
  const double c = (zn - 1) / 2.0;
  FlowConfig zcfg;
  zcfg.resolution = zn;
  const double k = test::expansion_scale(
      estimate_flow(za, warp(za, Transform2D::scaling(1.10, 1.10, {c, c}), zn, zn), zcfg), 0.75);

  const ImageBuffer big = test::smooth_texture(256, 256, 9, 8.0, 3);
  double ident = 0.0;
  for (const auto& m : magnitude(estimate_flow(big, big)).m) ident = std::max(ident, m);

  // Timing: 256x256 pair, default 3 refinement passes, this thread only.
  const ImageBuffer big2 = warp(big, Transform2D::scaling(1.05, 1.05, {127.5, 127.5}), 256, 256);
  double best = 1e9;
  for (int rep = 0; rep < 3; ++rep) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)estimate_flow(big, big2);
    best = std::min(best, seconds_since(t0));
  }
  const bool pass = epe <= 0.3 && std::abs(k - 1.10) <= 0.02 && ident < 1e-3 && best <= 2.0;
  return {pass, fmt("shift EPE mean %.4f (max %.4f) <= 0.3; zoom %.4f in [1.08,1.12]; identity max %.2e < 1e-3; "
                    "256x256 pair %.3f s <= 2 s",
                    epe, epe_max, k, ident, best)};
}

// ---- phenomenology ---------------------------------------------------------

struct Regions {
  std::vector<std::size_t> face, ring;
};

// Face disc |d| < 0.6 and outer ring max(|dx|,|dy|) > 0.8 of the half extent.
Regions regions(int n) {
  Regions r;
  const double c = (n - 1) / 2.0;
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double dx = (x - c) / (n / 2.0), dy = (y - c) / (n / 2.0);
      const std::size_t k = static_cast<std::size_t>(y) * n + x;
      if (dx * dx + dy * dy < 0.36) r.face.push_back(k);
      if (std::max(std::abs(dx), std::abs(dy)) > 0.8) r.ring.push_back(k);
    }
  }
  return r;
}

// RMS left after the least-squares fit u = s (x - c) + a, v = s (y - c) + b.
double expansion_residual(const FlowField& f, const std::vector<std::size_t>& px) {
  const double c = (f.width - 1) / 2.0;
  Eigen::MatrixXd A(2 * px.size(), 3);
  Eigen::VectorXd rhs(2 * px.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    const double x = static_cast<double>(px[i] % f.width) - c, y = static_cast<double>(px[i] / f.width) - c;
    A.row(2 * i) << x, 1, 0;
    A.row(2 * i + 1) << y, 0, 1;
    rhs(2 * i) = f.u[px[i]];
    rhs(2 * i + 1) = f.v[px[i]];
  }
  const Eigen::VectorXd p = A.colPivHouseholderQr().solve(rhs);
  return std::sqrt((A * p - rhs).squaredNorm() / px.size());
}

double mean_over(const MagnitudeMap& m, const std::vector<std::size_t>& px) {
  double s = 0.0;
  for (std::size_t k : px) s += m.m[k];
  return s / px.size();
}

Outcome phenomenology(const Dataset& d, Outcome& protocol_heights) {
  const Regions reg = regions(256);
  std::map<AttackClass, std::vector<double>> face_mag, ratio, residual, mag_residual;
  int height_misses = 0, sequences = 0;
  double worst_height = 0.0;
  for (const auto& item : d.items) {
    const auto src = make_renderer_source(item.spec);
    const auto session = capture(*src, {});
    ++sequences;
    if (!session) {
      ++height_misses;
      continue;
    }
    const int idx[3] = {*session->checkpoints.first, *session->checkpoints.middle, *session->checkpoints.last};
    const double want[3] = {0.500, 0.625, 0.750};
    const SceneRenderer r(item.spec);
    for (int k = 0; k < 3; ++k) {
      const double err = std::abs(r.annotation(idx[k]).rel_height - want[k]);
      worst_height = std::max(worst_height, err);
      if (err > 0.01) ++height_misses;
    }
    SampleSelection sel;
    sel.f1 = idx[0];
    sel.f2 = idx[1];
    sel.f3 = idx[2];
    const FlowSample s = run_flow_stage(load_triplet(*src, sel), {}, {});
    const MagnitudeMap m = clip_magnitude(magnitude(s.flow), s.flow.width);
    const AttackClass c = item.spec.attack;
    const double fm = mean_over(m, reg.face);
    face_mag[c].push_back(fm);
    ratio[c].push_back(mean_over(m, reg.ring) / std::max(fm, 1e-9));
    residual[c].push_back(expansion_residual(s.flow, reg.face));
    mag_residual[c].push_back(magnitude_features(m)[7]);
  }
  protocol_heights = {height_misses == 0, fmt("%d sequences, worst checkpoint height error %.4f <= 0.01", sequences,
                                              worst_height)};

  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  const double printed = mean(face_mag[AttackClass::PrintedPhoto]), screen = mean(face_mag[AttackClass::ScreenPhoto]);
  const double mask_ratio = mean(ratio[AttackClass::PrintedMask]);
  double flat_max = 0.0;
  for (AttackClass c : {AttackClass::PrintedPhoto, AttackClass::ScreenPhoto})
    flat_max = std::max(flat_max, *std::max_element(residual[c].begin(), residual[c].end()));
  const double real_min = *std::min_element(residual[AttackClass::Real].begin(), residual[AttackClass::Real].end());
  double mflat = 0.0;
  for (AttackClass c : {AttackClass::PrintedPhoto, AttackClass::ScreenPhoto})
    mflat = std::max(mflat, *std::max_element(mag_residual[c].begin(), mag_residual[c].end()));
  const double mreal = *std::min_element(mag_residual[AttackClass::Real].begin(), mag_residual[AttackClass::Real].end());
  const bool pass = printed < 1.0 && screen < 1.0 && mask_ratio >= 5.0 && real_min >= 5.0 * flat_max;
  return {pass, fmt("face |flow| PrintedPhoto %.3f, ScreenPhoto %.3f < 1; PrintedMask ring/face %.2f >= 5; "
                    "Real residual min %.3f >= 5 x flat max %.3f (x%.1f; magnitude-fit feature x%.1f)",
                    printed, screen, mask_ratio, real_min, flat_max, real_min / std::max(flat_max, 1e-12),
                    mreal / std::max(mflat, 1e-12))};
}

// ---- benchmark suites ------------------------------------------------------

std::string auc_list(const EvalRow& row) {
  std::string s;
  for (const auto& [c, a] : row.auc) s += fmt("%s %.3f ", to_string(c).c_str(), a);
  if (!s.empty()) s.pop_back();
  return s;
}

std::vector<AttackClass> attacks() {
  std::vector<AttackClass> out;
  for (AttackClass c : kAllClasses)
    if (c != AttackClass::Real) out.push_back(c);
  return out;
}

Outcome clipping(const EvalReport& r) {
  const EvalRow &raw = r.row("raw_flow"), &mag = r.row("magnitude"), &clip = r.row("clipped_magnitude");
  bool ok = true;
  AttackClass hardest = attacks().front();
  double hardest_mean = 2.0;
  for (AttackClass c : attacks()) {
    ok &= clip.auc.at(c) >= raw.auc.at(c) - 0.01;
    const double m = (raw.auc.at(c) + mag.auc.at(c) + clip.auc.at(c)) / 3;
    if (m < hardest_mean) hardest_mean = m, hardest = c;
  }
  const bool strict = clip.auc.at(hardest) > raw.auc.at(hardest) && clip.auc.at(hardest) > mag.auc.at(hardest);
  return {ok && strict,
          fmt("clipped >= raw - 0.01 everywhere: %s; hardest %s raw %.3f / magnitude %.3f / clipped %.3f; suite %.0f s",
              ok ? "yes" : "no", to_string(hardest).c_str(), raw.auc.at(hardest), mag.auc.at(hardest),
              clip.auc.at(hardest), r.seconds)};
}

Outcome architecture(const EvalReport& r) {
  const EvalRow &flow = r.row("flow_only"), &dual = r.row("dual");
  const AttackClass dv = AttackClass::DynamicVideo;
  bool minimum = true, kept = true;
  for (AttackClass c : attacks()) {
    if (c == dv) continue;
    minimum &= flow.auc.at(dv) <= flow.auc.at(c);
    kept &= dual.auc.at(c) >= flow.auc.at(c) - 0.02;
  }
  const double gain = dual.auc.at(dv) - flow.auc.at(dv);
  return {minimum && gain >= 0.10 && kept,
          fmt("flow_only DynamicVideo %.3f is minimum: %s; dual gain %+.3f >= 0.10; others within 0.02: %s",
              flow.auc.at(dv), minimum ? "yes" : "no", gain, kept ? "yes" : "no")};
}

Outcome absolute(const EvalReport& r) {
  const EvalRow& dual = r.row("dual");
  bool ok = true;
  for (AttackClass c : attacks()) ok &= dual.auc.at(c) >= 0.95;
  return {ok, "dual AUC >= 0.95: " + auc_list(dual)};
}

Outcome blur(const EvalReport& r) {
  const char* names[4] = {"no_blur", "low", "medium", "high"};
  std::string violations;
  for (AttackClass c : attacks()) {
    for (int k = 1; k < 4; ++k) {
      const double prev = r.row(names[k - 1]).auc.at(c), cur = r.row(names[k]).auc.at(c);
      if (cur > prev) violations += fmt("%s %s %.3f > %s %.3f; ", to_string(c).c_str(), names[k], cur, names[k - 1], prev);
    }
  }
  std::string rows;
  for (const char* n : names) rows += fmt("%s [%s] ", n, auc_list(r.row(n)).c_str());
  if (!violations.empty()) violations.resize(violations.size() - 2);
  return {violations.empty(), violations.empty() ? "ordering holds: " + rows : "violations: " + violations};
}

// ---- AUC, training, protocol -----------------------------------------------

Outcome auc_oracle() {
  std::mt19937 rng(13);
  double worst = 0.0;
  bool complement = true;
  for (int trial = 0; trial < 1000; ++trial) {
    std::uniform_int_distribution<int> len(1, 200), level(0, 30);
    std::vector<double> a(len(rng)), b(len(rng));
    for (auto& v : a) v = level(rng) / 30.0;
    for (auto& v : b) v = level(rng) / 30.0 - 0.1;
    double wins = 0;
    for (double x : a)
      for (double y : b) wins += x > y ? 1.0 : x == y ? 0.5 : 0.0;
    const double brute = wins / (static_cast<double>(a.size()) * b.size());
    const double auc = roc_auc(a, b);
    worst = std::max(worst, std::abs(auc - brute));
    complement &= auc + roc_auc(b, a) == 1.0;
  }
  return {worst <= 1e-12 && complement,
          fmt("1000 pairs, max |auc - pairwise| %.1e <= 1e-12; complement exact: %s", worst, complement ? "yes" : "no")};
}

Outcome training(Evaluator& ev) {
  std::mt19937 rng(3);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> z(60, std::vector<double>(8));
  std::vector<int> y(60);
  for (int i = 0; i < 60; ++i) {
    for (auto& v : z[i]) v = g(rng);
    y[i] = z[i][0] + 0.5 * g(rng) > 0;
  }
  const double eps = 1e-5, l2 = 1e-3;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<double> w(8);
    for (auto& v : w) v = g(rng);
    const double b = g(rng);
    const LossGradient lg = logistic_loss_gradient(w, b, z, y, l2);
    for (std::size_t k = 0; k <= w.size(); ++k) {
      auto wp = w, wm = w;
      double bp = b, bm = b;
      (k < w.size() ? wp[k] : bp) += eps;
      (k < w.size() ? wm[k] : bm) -= eps;
      const double fd =
          (logistic_loss_gradient(wp, bp, z, y, l2).loss - logistic_loss_gradient(wm, bm, z, y, l2).loss) / (2 * eps);
      worst = std::max(worst, std::abs(fd - (k < w.size() ? lg.grad_w[k] : lg.grad_b)));
    }
  }
  const std::string h1 = nlohmann::json(ev.train(StreamMode::Dual, FlowRepresentation::ClippedMagnitude)).dump();
  const std::string h2 = nlohmann::json(ev.train(StreamMode::Dual, FlowRepresentation::ClippedMagnitude)).dump();
  return {worst < 1e-6 && h1 == h2, fmt("max |grad - central difference| %.2e < 1e-6; benchmark head retrained "
                                        "bit-identical: %s",
                                        worst, h1 == h2 ? "yes" : "no")};
}

Outcome protocol(const Outcome& heights) {
  int failures = 0, rows = 0;
  const auto traces = test::protocol_traces();
  for (const auto& t : traces) {
    rows += static_cast<int>(t.rows.size());
    for (const auto& f : test::run_trace(t)) {
      ++failures;
      spdlog::error("{}", f);
    }
  }
  return {failures == 0 && heights.pass, fmt("%zu traces / %d steps, %d mismatches; ", traces.size(), rows, failures) +
                                             heights.detail};
}

// ---- service ---------------------------------------------------------------

Outcome service(const LinearHead& head, const Dataset& d) {
  const fs::path dir = fs::temp_directory_path() / "flowgate_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::ofstream(dir / "head.json") << nlohmann::json(head).dump(2);

  // A held-out live recording, written to disk as the CLI reads it.
  const auto it = std::find_if(d.items.begin(), d.items.end(), [](const DatasetItem& i) {
    return i.split == Split::Test && i.spec.attack == AttackClass::Real;
  });
  write_sequence(dir / "real", render(it->spec));

  SessionService svc(head, {});
  const test::DriveResult r = test::drive_sequence(svc, dir / "real");
  std::ostringstream out, err;
  const int code = run_cli({"classify", "--seq", (dir / "real").string(), "--head", (dir / "head.json").string()}, out, err);
  const bool identical = code == kExitOk && r.verdict.status == 200 && out.str() == r.verdict.body;
  double score = -1;
  if (r.verdict.status == 200) score = nlohmann::json::parse(r.verdict.body)["score"];

  SessionService fuzz(head, {});
  const auto failures = test::fuzz_sessions(fuzz, head, 100, 8);
  for (const auto& f : failures) spdlog::error("{}", f);
  fs::remove_all(dir);
  return {identical && failures.empty(),
          fmt("verdict == CLI classify bytes: %s (live score %.3f); 100 concurrent sessions, %zu with cross-talk",
              identical ? "yes" : "no", score, failures.size())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowgate acceptance run"};
  int n = 50, phen_n = 10;
  std::uint64_t seed = 2024;
  app.add_option("--n", n, "benchmark sequences per class")->capture_default_str();
  app.add_option("--seed", seed, "benchmark seed")->capture_default_str();
  app.add_option("--phenomenology-n", phen_n, "phenomenology sequences per class")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::pair<std::string, Outcome>> results;
  auto report = [&](const std::string& name, const Outcome& o) {
    results.emplace_back(name, o);
    std::printf("%s %-22s %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  };

  report("flow_correctness", flow_correctness());
  Outcome heights;
  report("phenomenology", phenomenology(make_dataset(phen_n, seed + 1), heights));

  const Dataset bench = make_dataset(n, seed);
  EvalOptions opt;
  opt.seed = seed;
  opt.train.seed = seed;
  Evaluator ev(eval_dataset(bench), opt);
  const EvalReport flow_rep = ev.run("flow_processing");
  report("clipping_ablation", clipping(flow_rep));
  const EvalReport arch_rep = ev.run("architecture");
  report("architecture_ablation", architecture(arch_rep));
  report("absolute_targets", absolute(arch_rep));
  report("blur_robustness", blur(ev.run("blur")));
  report("auc_oracle", auc_oracle());
  report("training", training(ev));
  report("protocol", protocol(heights));
  report("service", service(ev.train(StreamMode::Dual, FlowRepresentation::ClippedMagnitude), bench));

  int failed = 0;
  for (const auto& [name, o] : results) failed += !o.pass;
  std::printf("%zu criteria, %d failed, %.0f s\n", results.size(), failed, seconds_since(t0));
  return failed == 0 ? 0 : 1;
}
