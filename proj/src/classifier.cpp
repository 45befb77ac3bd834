#include "flowgate/classifier.hpp"

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "flowgate/errors.hpp"

namespace flowgate {

namespace {

constexpr double kMinStd = 1e-12;

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

LinearHead LinearHead::zero(int dim, StreamMode mode, FlowRepresentation rep) {
  LinearHead h;
  h.mode = mode;
  h.representation = rep;
  h.mean.assign(dim, 0.0);
  h.std.assign(dim, 1.0);
  h.retained.assign(dim, true);
  h.weights.assign(dim, 0.0);
  h.fitted = true;
  return h;
}

std::vector<double> LinearHead::standardize(std::span<const double> x) const {
  std::vector<double> z(x.size(), 0.0);
  const bool clamp = !feature_min.empty();
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (!retained[k]) continue;
    const double v = clamp ? std::clamp(x[k], feature_min[k], feature_max[k]) : x[k];
    z[k] = (v - mean[k]) / std[k];
  }
  return z;
}

double LinearHead::logit(std::span<const double> x) const {
  const std::vector<double> z = standardize(x);
  double s = bias;
  for (std::size_t k = 0; k < z.size(); ++k) s += weights[k] * z[k];
  return s;
}

double score(const LinearHead& head, std::span<const double> x) {
  if (!head.fitted) throw std::logic_error("linear head is not fitted");
  if (static_cast<int>(x.size()) != head.dim())
    throw std::invalid_argument("feature dimension " + std::to_string(x.size()) + " does not match head dimension " +
                                std::to_string(head.dim()));
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument("features must be finite");
  }
  // Kept strictly inside (0, 1): the sigmoid alone rounds to 0 or 1 for
  // large logits.
  return std::clamp(sigmoid(head.logit(x)), std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0));
}

double score(const LinearHead& head, const FeatureVector& fv) { return score(head, fv.joined()); }

void to_json(nlohmann::json& j, const LinearHead& h) {
  j = {{"schema_version", LinearHead::kSchemaVersion},
       {"mode", to_string(h.mode)},
       {"representation", to_string(h.representation)},
       {"mean", h.mean},
       {"std", h.std},
       {"retained", h.retained},
       {"feature_min", h.feature_min},
       {"feature_max", h.feature_max},
       {"weights", h.weights},
       {"bias", h.bias},
       {"fitted", h.fitted}};
}

void from_json(const nlohmann::json& j, LinearHead& h) {
  try {
    if (j.at("schema_version").get<int>() != LinearHead::kSchemaVersion)
      throw DataError("unsupported head schema version");
    h.mode = stream_mode_from_string(j.at("mode").get<std::string>());
    h.representation = flow_representation_from_string(j.at("representation").get<std::string>());
    h.mean = j.at("mean").get<std::vector<double>>();
    h.std = j.at("std").get<std::vector<double>>();
    h.retained = j.at("retained").get<std::vector<bool>>();
    h.feature_min = j.value("feature_min", std::vector<double>{});
    h.feature_max = j.value("feature_max", std::vector<double>{});
    h.weights = j.at("weights").get<std::vector<double>>();
    h.bias = j.at("bias").get<double>();
    h.fitted = j.value("fitted", true);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("head file: ") + e.what());
  }
  const std::size_t d = h.weights.size();
  if (h.mean.size() != d || h.std.size() != d || h.retained.size() != d)
    throw DataError("head file: inconsistent vector sizes");
  if (h.feature_min.size() != h.feature_max.size() || (!h.feature_min.empty() && h.feature_min.size() != d))
    throw DataError("head file: inconsistent feature range sizes");
  for (std::size_t k = 0; k < h.feature_min.size(); ++k) {
    if (!(h.feature_min[k] <= h.feature_max[k])) throw DataError("head file: empty feature range");
  }
  for (std::size_t k = 0; k < d; ++k) {
    if (h.retained[k] && !(h.std[k] > kMinStd)) throw DataError("head file: retained feature with zero std");
    if (!std::isfinite(h.mean[k]) || !std::isfinite(h.weights[k])) throw DataError("head file: non-finite values");
  }
}

LossGradient logistic_loss_gradient(std::span<const double> w, double b, const std::vector<std::vector<double>>& z,
                                    std::span<const int> labels, double l2) {
  LossGradient out;
  out.grad_w.assign(w.size(), 0.0);
  const double n = static_cast<double>(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    double s = b;
    for (std::size_t k = 0; k < w.size(); ++k) s += w[k] * z[i][k];
    out.loss += softplus(s) - labels[i] * s;
    const double r = sigmoid(s) - labels[i];
    for (std::size_t k = 0; k < w.size(); ++k) out.grad_w[k] += r * z[i][k];
    out.grad_b += r;
  }
  out.loss /= n;
  out.grad_b /= n;
  double reg = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k) {
    out.grad_w[k] = out.grad_w[k] / n + l2 * w[k];
    reg += w[k] * w[k];
  }
  out.loss += 0.5 * l2 * reg;
  return out;
}

TrainResult train_head(const std::vector<std::vector<double>>& x, std::span<const int> labels, StreamMode mode,
                       FlowRepresentation rep, const TrainConfig& cfg) {
  if (x.empty() || x.size() != labels.size()) throw TrainingError("training set is empty or labels do not match");
  const std::size_t d = x.front().size();
  int positives = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != d) throw TrainingError("ragged feature matrix");
    for (double v : x[i]) {
      if (!std::isfinite(v)) throw TrainingError("non-finite feature in training set");
    }
    if (labels[i] != 0 && labels[i] != 1) throw TrainingError("labels must be 0 or 1");
    positives += labels[i];
  }
  if (positives == 0 || positives == static_cast<int>(x.size()))
    throw TrainingError("training set contains a single class");
  if (cfg.epochs < 0 || cfg.lr < 0 || cfg.l2 < 0) throw TrainingError("invalid training configuration");

  LinearHead head = LinearHead::zero(static_cast<int>(d), mode, rep);
  const double n = static_cast<double>(x.size());
  for (std::size_t k = 0; k < d; ++k) {
    double m = 0.0;
    for (const auto& row : x) m += row[k];
    m /= n;
    double v = 0.0;
    for (const auto& row : x) v += (row[k] - m) * (row[k] - m);
    head.mean[k] = m;
    head.std[k] = std::sqrt(v / n);
    head.retained[k] = head.std[k] > kMinStd;
    if (!head.retained[k]) head.std[k] = 1.0;
  }
  head.feature_min = x.front();
  head.feature_max = x.front();
  for (const auto& row : x) {
    for (std::size_t k = 0; k < d; ++k) {
      head.feature_min[k] = std::min(head.feature_min[k], row[k]);
      head.feature_max[k] = std::max(head.feature_max[k], row[k]);
    }
  }

  // Deterministic sample order for the (order-sensitive) floating-point sums.
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<double>> z;
  std::vector<int> y;
  for (std::size_t i : order) {
    z.push_back(head.standardize(x[i]));
    y.push_back(labels[i]);
  }

  double lr = cfg.lr;
  if (lr == 0.0) {
    // Hessian of the mean logistic loss is bounded by [Z 1]^T [Z 1] / (4n).
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(d + 1, d + 1);
    for (const auto& row : z) {
      Eigen::VectorXd v(d + 1);
      for (std::size_t k = 0; k < d; ++k) v(k) = row[k];
      v(d) = 1.0;
      a += v * v.transpose();
    }
    const double lmax = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a / (4.0 * n)).eigenvalues().maxCoeff();
    lr = 1.0 / (lmax + cfg.l2);
  }

  TrainResult result;
  result.lr = lr;
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  LossGradient lg = logistic_loss_gradient(w, b, z, y, cfg.l2);
  const double initial = lg.loss;
  result.loss_history.push_back(lg.loss);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t k = 0; k < d; ++k) {
      if (head.retained[k]) w[k] -= lr * lg.grad_w[k];
    }
    b -= lr * lg.grad_b;
    const double prev = lg.loss;
    lg = logistic_loss_gradient(w, b, z, y, cfg.l2);
    result.loss_history.push_back(lg.loss);
    if (!std::isfinite(lg.loss) || lg.loss > 10.0 * initial) {
      std::ostringstream msg;
      msg << "training diverged at epoch " << epoch << ": loss " << lg.loss << " (initial " << initial << ", lr " << lr
          << ")";
      throw TrainingError(msg.str());
    }
    if (lg.loss > prev + 1e-12 * std::max(1.0, prev)) {
      std::ostringstream msg;
      msg << "loss increased at epoch " << epoch << " from " << prev << " to " << lg.loss << " (lr " << lr
          << "); lower the learning rate";
      throw TrainingError(msg.str());
    }
  }
  head.weights = w;
  head.bias = b;
  head.fitted = true;
  result.head = std::move(head);
  return result;
}

void AugmentConfig::validate() const {
  if (!(frame_pool_frac > 0.0 && frame_pool_frac <= 0.5)) throw std::invalid_argument("frame_pool_frac must be in (0, 0.5]");
  if (res_min < 64 || res_max > 1024 || res_min > res_max) throw std::invalid_argument("invalid multires range");
  if (!(corner_jitter >= 0.0 && corner_jitter <= 0.05)) throw std::invalid_argument("corner_jitter must be in [0, 0.05]");
}

void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = {{"random_frame", c.random_frame}, {"frame_pool_frac", c.frame_pool_frac},
       {"multires", c.multires},         {"res_min", c.res_min},
       {"res_max", c.res_max},           {"perspective", c.perspective},
       {"corner_jitter", c.corner_jitter}, {"independent_perspective", c.independent_perspective}};
}

void from_json(const nlohmann::json& j, AugmentConfig& c) {
  if (!j.is_object()) throw DataError("augment config must be an object");
  try {
    c.random_frame = j.value("random_frame", c.random_frame);
    c.frame_pool_frac = j.value("frame_pool_frac", c.frame_pool_frac);
    c.multires = j.value("multires", c.multires);
    c.res_min = j.value("res_min", c.res_min);
    c.res_max = j.value("res_max", c.res_max);
    c.perspective = j.value("perspective", c.perspective);
    c.corner_jitter = j.value("corner_jitter", c.corner_jitter);
    c.independent_perspective = j.value("independent_perspective", c.independent_perspective);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("augment config: ") + e.what());
  }
}

SampleSelection augment_sample(std::span<const FaceBox> boxes, const Checkpoints& checkpoints,
                               const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (!checkpoints.complete()) throw std::invalid_argument("augmentation needs complete protocol checkpoints");
  SampleSelection sel;
  sel.f1 = *checkpoints.first;
  sel.f2 = *checkpoints.middle;
  sel.f3 = *checkpoints.last;
  std::mt19937_64 rng(seed);
  const int n = static_cast<int>(boxes.size());

  if (cfg.random_frame) {
    if (n < 10) {
      sel.degraded = true;
    } else {
      std::vector<int> idx(n);
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return boxes[a].h < boxes[b].h; });
      const int pool = std::max(1, static_cast<int>(std::lround(cfg.frame_pool_frac * n)));
      std::uniform_int_distribution<int> pick(0, pool - 1);
      sel.f1 = idx[pick(rng)];
      sel.f3 = idx[n - 1 - pick(rng)];
    }
  }
  if (cfg.multires) sel.flow_resolution = std::uniform_int_distribution<int>(cfg.res_min, cfg.res_max)(rng);
  if (cfg.perspective) {
    // Corner offsets in units of the crop side.
    std::uniform_real_distribution<double> d(-cfg.corner_jitter, cfg.corner_jitter);
    auto draw = [&] {
      std::array<Point, 4> o;
      for (auto& p : o) {
        p.x = d(rng);
        p.y = d(rng);
      }
      return o;
    };
    auto jitter = [](const FaceBox& box, const std::array<Point, 4>& o) {
      const CropRect r = margin_crop_rect(box);
      const std::array<Point, 4> src{Point{r.x, r.y}, Point{r.x + r.side, r.y}, Point{r.x + r.side, r.y + r.side},
                                     Point{r.x, r.y + r.side}};
      std::array<Point, 4> dst = src;
      for (int k = 0; k < 4; ++k) {
        dst[k].x += o[k].x * r.side;
        dst[k].y += o[k].y * r.side;
      }
      return Transform2D::perspective(src, dst);
    };
    const auto o1 = draw();
    const auto o3 = cfg.independent_perspective ? draw() : o1;
    sel.warp_f1 = jitter(boxes[sel.f1], o1);
    sel.warp_f3 = jitter(boxes[sel.f3], o3);
  }
  return sel;
}

}  // namespace flowgate
