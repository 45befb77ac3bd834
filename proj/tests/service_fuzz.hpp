#pragma once

// Many sessions replaying the scripted protocol traces concurrently, each
// with its own frames. Every response is checked against a private replay of
// the state machine, and every verdict against scoring that session's own
// checkpoint frames directly.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "flowgate/image_io.hpp"
#include "flowgate/service.hpp"
#include "protocol_table.hpp"
#include "test_util.hpp"

namespace flowgate::test {

inline KeyPoints keypoints_for(const FaceBox& b) {
  return {{b.x + 0.3 * b.w, b.y + 0.4 * b.h},
          {b.x + 0.7 * b.w, b.y + 0.4 * b.h},
          {b.x + 0.5 * b.w, b.y + 0.6 * b.h},
          {b.x + 0.35 * b.w, b.y + 0.8 * b.h},
          {b.x + 0.65 * b.w, b.y + 0.8 * b.h}};
}

inline std::string annotation(const std::optional<FaceBox>& box) {
  nlohmann::json j;
  if (box) {
    j["box"] = *box;
    j["keypoints"] = keypoints_for(*box);
  } else {
    j["box"] = nullptr;
  }
  return j.dump();
}

// Returns one message per misbehaving session.
inline std::vector<std::string> fuzz_sessions(SessionService& svc, const LinearHead& head, int sessions,
                                              int threads) {
  const auto traces = protocol_traces();
  std::vector<std::string> failures(sessions);
  std::vector<std::thread> workers;
  for (int w = 0; w < threads; ++w) {
    workers.emplace_back([&, w] {
      for (int n = w; n < sessions; n += threads) {
        std::mt19937 rng(n);
        const auto& trace = traces[n % traces.size()];
        const ImageBuffer base = smooth_texture(kW, kH, 100 + n, 8.0, 3);
        const std::string id = nlohmann::json::parse(svc.create_session().body)["id"];
        CaptureSession expected;
        std::array<ImageBuffer, 3> kept;
        std::array<Detection, 3> kept_det;
        for (std::size_t i = 0; i < trace.rows.size() && failures[n].empty(); ++i) {
          ImageBuffer f = base;
          const double shift = std::uniform_real_distribution<double>(-0.02, 0.02)(rng);
          for (double& v : f.samples()) v = std::clamp(v + shift, 0.0, 1.0);
          const auto bytes = encode_png(f);
          const auto& row = trace.rows[i];
          const auto box = row.rel ? centered_box(*row.rel, row.dx) : std::nullopt;
          const auto r = svc.post_frame(id, bytes, annotation(box));
          const StepResult want = step(expected, static_cast<int>(i), box, kW, kH);
          if (!want.noop) expected = want.session;
          const auto j = nlohmann::json::parse(r.body);
          if (r.status != 200 || j["state"] != to_string(expected.state) || j["restarted"] != want.restarted) {
            failures[n] = "session " + std::to_string(n) + " (" + trace.name + ") diverged at step " + std::to_string(i);
            break;
          }
          const int slot = want.hit == CheckpointHit::First    ? 0
                           : want.hit == CheckpointHit::Middle ? 1
                           : want.hit == CheckpointHit::Last   ? 2
                                                               : -1;
          if (slot >= 0) {
            kept[slot] = decode_image(bytes);
            kept_det[slot] = {*box, keypoints_for(*box)};
          }
        }
        if (!failures[n].empty()) continue;
        const auto v = svc.verdict(id);
        if (expected.state != CaptureState::Done) {
          if (v.status != 409) failures[n] = "session " + std::to_string(n) + ": early verdict answered " + std::to_string(v.status);
          continue;
        }
        Triplet t;
        t.frames = kept;
        t.detections = kept_det;
        if (v.status != 200 || v.body != verdict_text(classify_triplet(t, head, {})))
          failures[n] = "session " + std::to_string(n) + ": verdict differs from its own frames";
      }
    });
  }
  for (auto& t : workers) t.join();
  std::erase(failures, std::string());
  return failures;
}

}  // namespace flowgate::test
