#include "flowgate/eval.hpp"

#include <Eigen/Geometry>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "flowgate/errors.hpp"
#include "flowgate/parallel.hpp"

namespace flowgate {

// ---------------------------------------------------------------------------
// AUC and reports
// ---------------------------------------------------------------------------

double roc_auc(std::span<const double> real, std::span<const double> spoof) {
  if (real.empty() || spoof.empty()) throw std::invalid_argument("roc_auc needs both classes");
  struct Entry {
    double score;
    bool real;
  };
  std::vector<Entry> all;
  all.reserve(real.size() + spoof.size());
  for (double s : real) all.push_back({s, true});
  for (double s : spoof) all.push_back({s, false});
  for (const auto& e : all) {
    if (!std::isfinite(e.score)) throw std::invalid_argument("roc_auc scores must be finite");
  }
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });
  // Mann-Whitney U with midranks; counts are kept as integers (twice the
  // rank sum) so the result is exact up to the final division.
  long double twice_rank_sum = 0;
  std::size_t i = 0;
  while (i < all.size()) {
    std::size_t j = i;
    while (j < all.size() && all[j].score == all[i].score) ++j;
    // Ranks i+1 .. j share the midrank (i + 1 + j) / 2.
    std::size_t reals = 0;
    for (std::size_t k = i; k < j; ++k) reals += all[k].real;
    twice_rank_sum += static_cast<long double>(reals) * static_cast<long double>(i + 1 + j);
    i = j;
  }
  const long double nr = real.size(), ns = spoof.size();
  const long double twice_u = twice_rank_sum - nr * (nr + 1);
  return static_cast<double>(twice_u / (2 * nr * ns));
}

const EvalRow& EvalReport::row(const std::string& name) const {
  for (const auto& r : rows) {
    if (r.name == name) return r;
  }
  throw std::out_of_range("no report row named " + name);
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  j = {{"suite", r.suite},
       {"seed", r.seed},
       {"config_hash", r.config_hash},
       {"config", r.config},
       {"seconds", r.seconds},
       {"rows", nlohmann::json::array()}};
  for (const auto& row : r.rows) {
    nlohmann::json auc = nlohmann::json::object();
    for (const auto& [c, v] : row.auc) auc[to_string(c)] = v;
    nlohmann::json scores = nlohmann::json::object();
    for (const auto& [c, v] : row.scores) scores[to_string(c)] = v;
    j["rows"].push_back({{"name", row.name},
                         {"config", row.config},
                         {"auc", auc},
                         {"scores", scores},
                         {"n_train", row.n_train},
                         {"n_test", row.n_test},
                         {"feature_seconds", row.feature_seconds},
                         {"mean_flow_seconds", row.mean_flow_seconds}});
  }
}

std::string report_text(const EvalReport& r) {
  std::ostringstream out;
  std::size_t name_w = 8;
  for (const auto& row : r.rows) name_w = std::max(name_w, row.name.size());
  out << "suite " << r.suite << "  seed " << r.seed << "  config " << r.config_hash << "\n";
  out << std::left << std::setw(static_cast<int>(name_w) + 2) << "row";
  for (AttackClass c : kAttackClasses) out << std::right << std::setw(14) << to_string(c);
  out << std::setw(12) << "flow s" << "\n";
  for (const auto& row : r.rows) {
    out << std::left << std::setw(static_cast<int>(name_w) + 2) << row.name << std::right << std::fixed
        << std::setprecision(3);
    for (AttackClass c : kAttackClasses) out << std::setw(14) << row.auc.at(c);
    out << std::setw(12) << row.mean_flow_seconds << "\n";
  }
  return out.str();
}

std::string report_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "suite,row,attack,auc\n";
  out << std::setprecision(17);
  for (const auto& row : r.rows)
    for (AttackClass c : kAttackClasses) out << r.suite << ',' << row.name << ',' << to_string(c) << ',' << row.auc.at(c) << "\n";
  return out.str();
}

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"flow_processing", "architecture", "augmentation", "blur",
                                              "resolution",      "iterations",   "baselines"};
  return names;
}

int blur_kernel_for(double fraction, double mean_crop_side) {
  if (!(fraction > 0) || !(mean_crop_side > 0)) throw std::invalid_argument("blur fraction and crop side must be positive");
  int k = static_cast<int>(std::ceil(fraction * mean_crop_side - 1e-9));
  if (k % 2 == 0) ++k;
  return std::max(k, 1);
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

EvalDataset eval_dataset(const Dataset& d) {
  EvalDataset out;
  out.seed = d.seed;
  for (const auto& item : d.items) {
    const SceneSpec spec = item.spec;
    out.items.push_back({item.id, spec.attack, item.split, [spec] { return make_renderer_source(spec); }});
  }
  return out;
}

EvalDataset load_eval_dataset(const std::filesystem::path& root) {
  std::ifstream in(root / "dataset.json");
  if (!in) throw DataError("missing dataset.json in " + root.string());
  Dataset d;
  try {
    d = nlohmann::json::parse(in).get<Dataset>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset.json: " + std::string(e.what()));
  }
  EvalDataset out;
  out.seed = d.seed;
  for (const auto& item : d.items) {
    const auto dir = root / to_string(item.spec.attack) / item.id;
    if (!std::filesystem::is_directory(dir)) throw DataError("missing sequence directory " + dir.string());
    out.items.push_back({item.id, item.spec.attack, item.split, [dir] { return make_directory_source(dir); }});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stabilized averaging baseline
// ---------------------------------------------------------------------------

ImageBuffer stabilized_average_crop(std::span<const ImageBuffer> frames, std::span<const Detection> detections,
                                    const Detection& reference, const PreprocessConfig& cfg) {
  if (frames.empty() || frames.size() != detections.size())
    throw std::invalid_argument("stabilization needs one detection per frame");
  auto points = [](const KeyPoints& k) {
    Eigen::Matrix<double, 2, 5> m;
    const std::array<Point, 5> p{k.left_eye, k.right_eye, k.nose, k.mouth_left, k.mouth_right};
    for (int i = 0; i < 5; ++i) m.col(i) << p[i].x, p[i].y;
    return m;
  };
  const CropRect rect = margin_crop_rect(reference.box, cfg.margin);
  const Transform2D to_crop = crop_transform(rect, cfg.crop_size);
  const int size = cfg.crop_size;
  const int channels = frames.front().channels();
  std::vector<double> acc(static_cast<std::size_t>(size) * size * channels, 0.0);
  for (std::size_t k = 0; k < frames.size(); ++k) {
    if (frames[k].channels() != channels) throw std::invalid_argument("frames differ in channel count");
    const Eigen::Matrix3d sim = Eigen::umeyama(points(detections[k].keypoints), points(reference.keypoints), true);
    const ImageBuffer crop = warp(frames[k], to_crop * Transform2D(sim), size, size);
    const auto s = crop.samples();
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += s[i];
  }
  for (double& v : acc) v = std::clamp(v / frames.size(), 0.0, 1.0);
  return ImageBuffer(size, size, channels, std::move(acc));
}

namespace {

constexpr int kStabilizedFrames = 5;

std::vector<int> stabilized_indices(const CaptureSession& s) {
  const int a = *s.checkpoints.first, b = *s.checkpoints.last;
  std::vector<int> idx;
  for (int k = 0; k < kStabilizedFrames; ++k)
    idx.push_back(a + static_cast<int>(std::lround((b - a) * k / double(kStabilizedFrames - 1))));
  return idx;
}

std::vector<double> stabilized_rgb_features(const SequenceSource& seq, const CaptureSession& session,
                                            const PreprocessConfig& cfg) {
  std::vector<ImageBuffer> frames;
  std::vector<Detection> dets;
  for (int i : stabilized_indices(session)) {
    const auto d = seq.detection(i);
    if (!d) throw DataError("stabilization frame " + std::to_string(i) + " has no detection");
    frames.push_back(seq.frame(i));
    dets.push_back(*d);
  }
  return rgb_features(stabilized_average_crop(frames, dets, dets.back(), cfg));
}

}  // namespace

double baseline_stabilized_average(const SequenceSource& seq, const LinearHead& head, const PipelineConfig& cfg) {
  if (seq.frame_count() < kStabilizedFrames) throw std::invalid_argument("stabilized average needs at least 5 frames");
  if (head.mode != StreamMode::RgbOnly) throw std::invalid_argument("stabilized average scores with an rgb_only head");
  const auto session = capture(seq, cfg.protocol);
  if (!session) throw DataError("capture protocol never completed");
  FeatureVector fv;
  fv.rgb = stabilized_rgb_features(seq, *session, cfg.preprocess);
  fv.flow.assign(head.dim() - fv.rgb.size(), 0.0);
  return score(head, fv);
}

// ---------------------------------------------------------------------------
// Evaluator
// ---------------------------------------------------------------------------

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t item_seed(std::uint64_t base, std::size_t item, std::uint64_t salt) {
  return fnv1a(std::to_string(base) + ":" + std::to_string(item) + ":" + std::to_string(salt));
}

// How one sample is produced from its sequence.
struct SampleSpec {
  AugmentConfig aug;
  std::uint64_t aug_salt = 0;
  std::optional<int> resolution;
  std::optional<int> refine_iters;
  int blur_kernel = 0;
  bool stabilized = false;

  std::string key() const {
    nlohmann::json j = {{"aug", aug},
                        {"salt", aug_salt},
                        {"res", resolution ? *resolution : 0},
                        {"iters", refine_iters ? *refine_iters : 0},
                        {"blur", blur_kernel},
                        {"stab", stabilized}};
    return j.dump();
  }
};

struct Sample {
  std::vector<double> raw, mag, clipped, rgb;
  double crop_side_f1 = 0.0;
  double flow_seconds = 0.0;
};

std::vector<double> assemble(const Sample& s, StreamMode mode, FlowRepresentation rep) {
  const std::vector<double>& flow =
      rep == FlowRepresentation::Raw ? s.raw : rep == FlowRepresentation::Magnitude ? s.mag : s.clipped;
  std::vector<double> x = mode == StreamMode::RgbOnly ? std::vector<double>(flow.size(), 0.0) : flow;
  if (mode == StreamMode::FlowOnly) {
    x.insert(x.end(), s.rgb.size(), 0.0);
  } else {
    x.insert(x.end(), s.rgb.begin(), s.rgb.end());
  }
  return x;
}

}  // namespace

struct Evaluator::Impl {
  std::mutex mutex;
  std::map<std::pair<std::size_t, std::string>, Sample> cache;
};

Evaluator::Evaluator(EvalDataset data, EvalOptions opt)
    : data_(std::move(data)), opt_(std::move(opt)), impl_(std::make_unique<Impl>()) {
  opt_.pipeline.validate();
  if (data_.items.empty()) throw DataError("dataset is empty");
}

Evaluator::~Evaluator() = default;

namespace {

Sample compute_sample(const EvalItem& item, std::size_t index, const SampleSpec& spec, const EvalOptions& opt) {
  const auto src = item.open();
  const auto session = capture(*src, opt.pipeline.protocol);
  if (!session) throw DataError("capture protocol never completed for " + item.id);
  Sample s;
  if (spec.stabilized) {
    s.rgb = stabilized_rgb_features(*src, *session, opt.pipeline.preprocess);
    s.raw.assign(kRawFlowFeatureNames.size(), 0.0);
    s.mag.assign(kMagnitudeFeatureNames.size(), 0.0);
    s.clipped = s.mag;
    return s;
  }
  std::vector<FaceBox> boxes;
  for (int i = 0; i < src->frame_count(); ++i) {
    const auto d = src->detection(i);
    boxes.push_back(d ? d->box : FaceBox{0, 0, 0, 0});
  }
  const SampleSelection sel =
      augment_sample(boxes, session->checkpoints, spec.aug, item_seed(opt.seed, index, spec.aug_salt));
  if (sel.degraded) spdlog::warn("{}: sequence too short for frame pools, using checkpoints", item.id);
  Triplet t = load_triplet(*src, sel);
  if (spec.blur_kernel > 1) {
    for (auto& f : t.frames) f = gaussian_blur(f, spec.blur_kernel);
  }
  FlowConfig fc = opt.pipeline.flow;
  if (spec.resolution) fc.resolution = *spec.resolution;
  if (sel.flow_resolution) fc.resolution = *sel.flow_resolution;
  if (spec.refine_iters) fc.refine_iters = *spec.refine_iters;

  const auto t0 = std::chrono::steady_clock::now();
  const FlowSample fs = run_flow_stage(t, opt.pipeline.preprocess, fc);
  s.flow_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const MagnitudeMap m = magnitude(fs.flow);
  s.raw = raw_flow_features(fs.flow);
  s.mag = magnitude_features(m);
  s.clipped = magnitude_features(clip_magnitude(m, fs.pair.f1_crop.width()));
  s.rgb = rgb_features(fs.pair.f2_crop);
  s.crop_side_f1 = fs.pair.crop_side_f1;
  return s;
}

struct RowSpec {
  std::string name;
  StreamMode mode = StreamMode::Dual;
  FlowRepresentation rep = FlowRepresentation::ClippedMagnitude;
  SampleSpec train;
  SampleSpec test;
};

nlohmann::json row_config(const RowSpec& r) {
  return {{"mode", to_string(r.mode)},
          {"representation", to_string(r.rep)},
          {"train_sample", nlohmann::json::parse(r.train.key())},
          {"test_sample", nlohmann::json::parse(r.test.key())}};
}

}  // namespace

namespace {

// Cached sample lookup; computes missing entries in parallel.
class SampleStore {
 public:
  SampleStore(const EvalDataset& data, const EvalOptions& opt, std::mutex& mutex,
              std::map<std::pair<std::size_t, std::string>, Sample>& cache)
      : data_(data), opt_(opt), mutex_(mutex), cache_(cache) {}

  // Returns samples in the order of `items`, plus the wall time spent.
  std::pair<std::vector<Sample>, double> get(const std::vector<std::size_t>& items, const SampleSpec& spec) {
    const std::string key = spec.key();
    std::vector<std::size_t> missing;
    {
      std::lock_guard lock(mutex_);
      for (std::size_t i : items) {
        if (!cache_.count({i, key})) missing.push_back(i);
      }
    }
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<Sample> computed(missing.size());
    parallel_for(missing.size(), opt_.threads,
                 [&](std::size_t k) { computed[k] = compute_sample(data_.items[missing[k]], missing[k], spec, opt_); });
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::vector<Sample> out;
    std::lock_guard lock(mutex_);
    for (std::size_t k = 0; k < missing.size(); ++k) cache_[{missing[k], key}] = std::move(computed[k]);
    for (std::size_t i : items) out.push_back(cache_.at({i, key}));
    return {std::move(out), seconds};
  }

 private:
  const EvalDataset& data_;
  const EvalOptions& opt_;
  std::mutex& mutex_;
  std::map<std::pair<std::size_t, std::string>, Sample>& cache_;
};

std::vector<std::size_t> split_items(const EvalDataset& d, Split s) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < d.items.size(); ++i) {
    if (d.items[i].split == s) out.push_back(i);
  }
  return out;
}

}  // namespace

LinearHead Evaluator::train(StreamMode mode, FlowRepresentation rep, const AugmentConfig& aug) {
  SampleStore store(data_, opt_, impl_->mutex, impl_->cache);
  SampleSpec spec;
  spec.aug = aug;
  if (aug.random_frame || aug.multires || aug.perspective) spec.aug_salt = 1;
  const auto train_items = split_items(data_, Split::Train);
  const auto [samples, secs] = store.get(train_items, spec);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    x.push_back(assemble(samples[k], mode, rep));
    y.push_back(data_.items[train_items[k]].label == AttackClass::Real ? 1 : 0);
  }
  return train_head(x, y, mode, rep, opt_.train).head;
}

EvalReport Evaluator::run(const std::string& suite) {
  const auto& names = suite_names();
  if (std::find(names.begin(), names.end(), suite) == names.end())
    throw std::invalid_argument("unknown suite: " + suite);
  const auto start = std::chrono::steady_clock::now();
  SampleStore store(data_, opt_, impl_->mutex, impl_->cache);
  const auto train_items = split_items(data_, Split::Train);
  const auto test_items = split_items(data_, Split::Test);
  if (train_items.empty() || test_items.empty()) throw DataError("dataset needs both train and test items");
  for (AttackClass c : kAllClasses) {
    if (std::none_of(test_items.begin(), test_items.end(), [&](std::size_t i) { return data_.items[i].label == c; }))
      throw DataError("test split has no " + to_string(c) + " sequences");
  }

  std::vector<RowSpec> rows;
  const SampleSpec clean;
  auto add = [&](std::string name, StreamMode mode, FlowRepresentation rep, SampleSpec train, SampleSpec test) {
    rows.push_back({std::move(name), mode, rep, std::move(train), std::move(test)});
  };
  using R = FlowRepresentation;
  if (suite == "flow_processing") {
    for (R rep : {R::Raw, R::Magnitude, R::ClippedMagnitude}) add(to_string(rep), StreamMode::FlowOnly, rep, clean, clean);
  } else if (suite == "architecture") {
    add("flow_only", StreamMode::FlowOnly, R::ClippedMagnitude, clean, clean);
    add("dual", StreamMode::Dual, R::ClippedMagnitude, clean, clean);
  } else if (suite == "augmentation") {
    SampleSpec rf;
    rf.aug.random_frame = true;
    rf.aug_salt = 1;
    SampleSpec rfm = rf;
    rfm.aug.multires = true;
    SampleSpec persp;
    persp.aug.perspective = true;
    persp.aug_salt = 2;
    add("none", StreamMode::FlowOnly, R::ClippedMagnitude, clean, clean);
    add("random_frame", StreamMode::FlowOnly, R::ClippedMagnitude, rf, clean);
    add("random_frame+multires", StreamMode::FlowOnly, R::ClippedMagnitude, rfm, clean);
    add("dual", StreamMode::Dual, R::ClippedMagnitude, clean, clean);
    add("dual+perspective", StreamMode::Dual, R::ClippedMagnitude, persp, clean);
  } else if (suite == "blur") {
    const auto [clean_test, secs] = store.get(test_items, clean);
    double side = 0.0;
    for (const auto& s : clean_test) side += s.crop_side_f1;
    side /= clean_test.size();
    add("no_blur", StreamMode::Dual, R::ClippedMagnitude, clean, clean);
    const std::array<std::pair<const char*, double>, 3> levels{{{"low", 0.01}, {"medium", 0.06}, {"high", 0.12}}};
    for (const auto& [name, frac] : levels) {
      SampleSpec blurred;
      blurred.blur_kernel = blur_kernel_for(frac, side);
      add(name, StreamMode::Dual, R::ClippedMagnitude, clean, blurred);
    }
  } else if (suite == "resolution") {
    for (int res : {128, 192, 256, 320}) {
      SampleSpec s;
      s.resolution = res;
      add("res_" + std::to_string(res), StreamMode::FlowOnly, R::ClippedMagnitude, s, s);
    }
  } else if (suite == "iterations") {
    for (int it : {1, 2, 3, 5}) {
      SampleSpec s;
      s.refine_iters = it;
      add("iters_" + std::to_string(it), StreamMode::FlowOnly, R::ClippedMagnitude, s, s);
    }
  } else if (suite == "baselines") {
    SampleSpec stab;
    stab.stabilized = true;
    add("single_shot", StreamMode::RgbOnly, R::ClippedMagnitude, clean, clean);
    add("stabilized_average", StreamMode::RgbOnly, R::ClippedMagnitude, stab, stab);
    add("proposed", StreamMode::Dual, R::ClippedMagnitude, clean, clean);
  }

  EvalReport report;
  report.suite = suite;
  report.seed = opt_.seed;
  report.config = {{"suite", suite},
                   {"pipeline", opt_.pipeline},
                   {"train", {{"epochs", opt_.train.epochs}, {"lr", opt_.train.lr}, {"l2", opt_.train.l2}}},
                   {"seed", opt_.seed},
                   {"dataset_seed", data_.seed},
                   {"items", data_.items.size()}};
  report.config_hash = hex64(fnv1a(report.config.dump()));

  for (const RowSpec& spec : rows) {
    spdlog::info("suite {}: row {}", suite, spec.name);
    const auto [train_s, train_secs] = store.get(train_items, spec.train);
    const auto [test_s, test_secs] = store.get(test_items, spec.test);
    std::vector<std::vector<double>> x;
    std::vector<int> y;
    for (std::size_t k = 0; k < train_s.size(); ++k) {
      x.push_back(assemble(train_s[k], spec.mode, spec.rep));
      y.push_back(data_.items[train_items[k]].label == AttackClass::Real ? 1 : 0);
    }
    const LinearHead head = train_head(x, y, spec.mode, spec.rep, opt_.train).head;

    std::map<AttackClass, std::vector<double>> scores;
    double flow_secs = 0.0;
    int flow_n = 0;
    for (std::size_t k = 0; k < test_s.size(); ++k) {
      // Ranked by logit: far from the boundary the sigmoid rounds to exactly
      // 0 or 1 and would turn distinct scores into ties.
      const std::vector<double> x_test = assemble(test_s[k], spec.mode, spec.rep);
      score(head, x_test);  // validates dimension and finiteness
      scores[data_.items[test_items[k]].label].push_back(head.logit(x_test));
      if (test_s[k].flow_seconds > 0) {
        flow_secs += test_s[k].flow_seconds;
        ++flow_n;
      }
    }
    EvalRow row;
    row.name = spec.name;
    row.config = row_config(spec);
    for (AttackClass c : kAttackClasses) row.auc[c] = roc_auc(scores[AttackClass::Real], scores[c]);
    row.scores = std::move(scores);
    row.n_train = static_cast<int>(train_s.size());
    row.n_test = static_cast<int>(test_s.size());
    row.feature_seconds = train_secs + test_secs;
    row.mean_flow_seconds = flow_n ? flow_secs / flow_n : 0.0;
    report.rows.push_back(std::move(row));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

EvalReport run_suite(const std::string& suite, const EvalDataset& data, const EvalOptions& opt) {
  Evaluator ev(data, opt);
  return ev.run(suite);
}

}  // namespace flowgate
