#pragma once

// Per-attack ROC AUC and the ablation / robustness harness run on
// simulator (or on-disk) datasets.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "flowgate/classifier.hpp"
#include "flowgate/pipeline.hpp"
#include "flowgate/simulator.hpp"

namespace flowgate {

// P(random live score > random spoof score), ties counted 1/2. Throws
// std::invalid_argument on an empty list or non-finite scores.
double roc_auc(std::span<const double> real, std::span<const double> spoof);

struct EvalItem {
  std::string id;
  AttackClass label = AttackClass::Real;
  Split split = Split::Train;
  std::function<std::unique_ptr<SequenceSource>()> open;
};

struct EvalDataset {
  std::uint64_t seed = 0;
  std::vector<EvalItem> items;
};

// Sequences rendered on demand from the specs.
EvalDataset eval_dataset(const Dataset& d);
// Tree written by write_dataset (dataset.json + class/id directories).
// Throws DataError when the manifest or a sequence directory is missing.
EvalDataset load_eval_dataset(const std::filesystem::path& root);

struct EvalOptions {
  PipelineConfig pipeline;
  TrainConfig train;
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0 = hardware concurrency
};

struct EvalRow {
  std::string name;
  nlohmann::json config;
  std::map<AttackClass, double> auc;  // every attack class
  std::map<AttackClass, std::vector<double>> scores;  // test logits, Real included
  int n_train = 0;
  int n_test = 0;
  double feature_seconds = 0.0;  // wall time spent producing this row's samples
  double mean_flow_seconds = 0.0;
};

struct EvalReport {
  std::string suite;
  std::uint64_t seed = 0;
  std::string config_hash;
  nlohmann::json config;
  std::vector<EvalRow> rows;
  double seconds = 0.0;

  const EvalRow& row(const std::string& name) const;
};

void to_json(nlohmann::json& j, const EvalReport& r);
std::string report_text(const EvalReport& r);
std::string report_csv(const EvalReport& r);

const std::vector<std::string>& suite_names();

// Blur kernel for a fraction of the mean f1 crop side, rounded up to odd.
int blur_kernel_for(double fraction, double mean_crop_side);

// Crop of the average of `frames` after aligning each to the reference
// detection with a least-squares similarity on the keypoints; the crop uses
// the reference box. Throws std::invalid_argument on size mismatches.
ImageBuffer stabilized_average_crop(std::span<const ImageBuffer> frames, std::span<const Detection> detections,
                                    const Detection& reference, const PreprocessConfig& cfg);

// Five evenly spaced frames between the f1 and f3 checkpoints, aligned to
// f3, averaged, scored with the rgb_only head. Throws std::invalid_argument
// when fewer than 5 frames are available or the head is not rgb_only, and
// DataError when the protocol never completes.
double baseline_stabilized_average(const SequenceSource& seq, const LinearHead& head, const PipelineConfig& cfg);

// Trains one head per suite row on the train split and reports per-attack
// AUC on the test split. Samples are cached across suites run by the same
// evaluator.
class Evaluator {
 public:
  Evaluator(EvalDataset data, EvalOptions opt);
  ~Evaluator();

  // Throws std::invalid_argument for an unknown suite.
  EvalReport run(const std::string& suite);

  // Head trained on the whole train split with the given settings.
  LinearHead train(StreamMode mode, FlowRepresentation rep, const AugmentConfig& aug = {});

  const EvalDataset& data() const { return data_; }
  // Cached samples stay valid: training settings do not affect them.
  void set_train_config(const TrainConfig& cfg) { opt_.train = cfg; }

 private:
  struct Impl;
  EvalDataset data_;
  EvalOptions opt_;
  std::unique_ptr<Impl> impl_;
};

EvalReport run_suite(const std::string& suite, const EvalDataset& data, const EvalOptions& opt);

}  // namespace flowgate
