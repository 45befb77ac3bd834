#pragma once

// Synthetic "approaching face" recordings. A pinhole camera (focal length
// equal to the frame height, principal point at the frame center) films
// either a live head (a textured height field in front of a static
// background) or one of five presentation attacks. Every frame comes with
// exact face box, keypoints and relative face height, and the renderer can
// produce the exact image motion between any two frames.

#include <nlohmann/json_fwd.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "flowgate/flow.hpp"
#include "flowgate/geometry.hpp"
#include "flowgate/image.hpp"

namespace flowgate {

enum class AttackClass { Real, ScreenPhoto, PrintedPhoto, PrintedMask, DynamicVideo, StaticVideo };

inline constexpr std::array<AttackClass, 6> kAllClasses{AttackClass::Real,         AttackClass::ScreenPhoto,
                                                        AttackClass::PrintedPhoto, AttackClass::PrintedMask,
                                                        AttackClass::DynamicVideo, AttackClass::StaticVideo};
inline constexpr std::array<AttackClass, 5> kAttackClasses{AttackClass::ScreenPhoto, AttackClass::PrintedPhoto,
                                                           AttackClass::PrintedMask, AttackClass::DynamicVideo,
                                                           AttackClass::StaticVideo};

std::string to_string(AttackClass c);
// Throws DataError on unknown names.
AttackClass attack_class_from_string(const std::string& s);
bool is_screen_class(AttackClass c);

struct ScreenArtifacts {
  double moire_strength = 0.12;
  double pixel_grid_period = 3.0;  // camera pixels at the first frame
};

struct SceneSpec {
  AttackClass attack = AttackClass::Real;
  std::uint64_t texture_seed = 0;
  // Nose protrusion as a fraction of face width. Real only; defaults to
  // 0.25 when unset.
  std::optional<double> depth_amplitude;
  // Start/end camera-to-target distance ratio; 0.50 -> 0.75 face height.
  double approach = 1.5;
  int frames = 30;
  ScreenArtifacts screen_artifacts;
  double noise_sigma = 0.01;
  int width = 320;
  int height = 240;
  // Optional per-frame relative face height, overriding the monotone
  // approach schedule (used to script retreats and hesitations).
  std::vector<double> height_script;
  // Random image offset and roll drift; off gives a pure axial approach.
  bool random_placement = true;

  // Throws std::invalid_argument on an inconsistent spec.
  void validate() const;
  double effective_depth_amplitude() const;
  int frame_count() const;
};

void to_json(nlohmann::json& j, const SceneSpec& s);
void from_json(const nlohmann::json& j, SceneSpec& s);

struct FrameAnnotation {
  FaceBox box;
  KeyPoints keypoints;
  double rel_height = 0.0;
};

struct GroundTruthFlow {
  FlowField flow;
  std::vector<std::uint8_t> valid;  // 0 where the point is occluded or leaves the frame
};

class Scene;

// Lazily renders frames of one scene. Thread-safe for concurrent const use.
class SceneRenderer {
 public:
  explicit SceneRenderer(const SceneSpec& spec);
  ~SceneRenderer();
  SceneRenderer(SceneRenderer&&) noexcept;
  SceneRenderer& operator=(SceneRenderer&&) noexcept;

  const SceneSpec& spec() const { return spec_; }
  int frame_count() const { return spec_.frame_count(); }
  ImageBuffer frame(int i) const;
  FrameAnnotation annotation(int i) const;
  // Exact motion from frame i to frame j in frame pixel coordinates.
  GroundTruthFlow ground_truth_flow(int i, int j) const;

 private:
  SceneSpec spec_;
  std::unique_ptr<Scene> scene_;
};

struct RenderedSequence {
  SceneSpec spec;
  std::vector<ImageBuffer> frames;
  std::vector<FrameAnnotation> annotations;
  AttackClass label = AttackClass::Real;
};

RenderedSequence render(const SceneSpec& spec);

// Frame-space motion, or crop-space motion after the standard preprocessing
// of frames i (as f1) and j (as f3) when after_preprocess is set.
GroundTruthFlow ground_truth_flow(const RenderedSequence& seq, int i, int j, bool after_preprocess,
                                  const PreprocessConfig& cfg = {});

enum class Split { Train, Test };

struct DatasetItem {
  std::string id;
  SceneSpec spec;
  Split split = Split::Train;
};

struct Dataset {
  std::uint64_t seed = 0;
  std::vector<DatasetItem> items;

  std::vector<const DatasetItem*> subset(Split split) const;
};

// Balanced classes, deterministic per seed; per class the first 80% of
// items train and the rest test. Texture seeds are unique across the whole
// set. Throws std::invalid_argument when n_per_class < 1.
Dataset make_dataset(int n_per_class, std::uint64_t seed,
                     const std::vector<AttackClass>& classes = {kAllClasses.begin(), kAllClasses.end()});

void to_json(nlohmann::json& j, const Dataset& d);
void from_json(const nlohmann::json& j, Dataset& d);

// Directory layout: <class>/<seq_id>/frame_%03d.png, annotations.json, label.
void write_sequence(const std::filesystem::path& dir, const RenderedSequence& seq);
void write_dataset(const std::filesystem::path& root, const Dataset& dataset);

struct LoadedSequence {
  std::vector<ImageBuffer> frames;
  std::vector<std::optional<FrameAnnotation>> annotations;
  std::optional<AttackClass> label;
  std::optional<SceneSpec> spec;
};

// Throws DataError on missing files or malformed annotations.
LoadedSequence read_sequence(const std::filesystem::path& dir);

nlohmann::json annotations_to_json(const std::vector<FrameAnnotation>& ann, int frame_w, int frame_h);

}  // namespace flowgate
