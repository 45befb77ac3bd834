#pragma once

// Pipeline samples from short simulator scenes, shared by the feature,
// classifier and service tests.

#include <stdexcept>

#include "flowgate/pipeline.hpp"
#include "flowgate/simulator.hpp"

namespace flowgate::test {

inline SceneSpec scene(AttackClass c, std::uint64_t seed) {
  SceneSpec s;
  s.attack = c;
  s.texture_seed = seed;
  return s;
}

// Checkpoint triplet of a rendered scene.
inline Triplet checkpoint_triplet(const SceneSpec& spec, const ProtocolConfig& cfg = {}) {
  const auto src = make_renderer_source(spec);
  const auto session = capture(*src, cfg);
  if (!session) throw std::runtime_error("scene never completes the protocol");
  SampleSelection sel;
  sel.f1 = *session->checkpoints.first;
  sel.f2 = *session->checkpoints.middle;
  sel.f3 = *session->checkpoints.last;
  return load_triplet(*src, sel);
}

inline FlowSample flow_sample(AttackClass c, std::uint64_t seed) {
  return run_flow_stage(checkpoint_triplet(scene(c, seed)), {}, {});
}

}  // namespace flowgate::test
