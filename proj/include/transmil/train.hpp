#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "transmil/attention.hpp"
#include "transmil/data.hpp"
#include "transmil/errors.hpp"
#include "transmil/model.hpp"
#include "transmil/ops.hpp"
#include "transmil/tensor.hpp"

namespace transmil {

struct TrainConfig {
  double learning_rate = 2e-4;
  double weight_decay = 1e-5;
  std::size_t epochs = 50;
  std::size_t lookahead_k = 5;
  double lookahead_alpha = 0.5;
  AttentionMode mode = AttentionMode::nystrom;
  std::uint64_t seed = 1;
  // Inner adaptive-moment optimiser.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay must be >= 0");
    if (!(lookahead_alpha > 0.0 && lookahead_alpha <= 1.0)) throw ParameterError("lookahead_alpha must be in (0, 1]");
    if (lookahead_k == 0) throw ParameterError("lookahead_k must be >= 1");
  }
};

/// -log softmax(logits)[label], via log-sum-exp with max subtraction.
inline Tensor cross_entropy_loss(const Tensor& logits, std::size_t label) {
  const std::size_t c = logits.size();
  if (label >= c)
    throw ParameterError("label " + std::to_string(label) + " out of range for " + std::to_string(c) + " classes");
  const auto z = logits.data();
  const double mx = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  Tensor out = Tensor::scalar(lse - z[label]);
  if (detail::tracking({&logits})) {
    detail::record(out, [logits, out, label, lse, c]() {
      const double g = out.grad()[0];
      auto gl = logits.mutable_grad();
      for (std::size_t i = 0; i < c; ++i) gl[i] += g * (std::exp(logits[i] - lse) - (i == label ? 1.0 : 0.0));
    });
  }
  return out;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

// ---------------------------------------------------------------------------
// Optimiser

/// Lookahead around AdamW: an adaptive-moment inner step with decoupled
/// weight decay on the fast weights; every k steps
///   slow <- slow + alpha (fast - slow),  fast <- slow.
class LookaheadOptimizer {
 public:
  LookaheadOptimizer(std::vector<Tensor> params, const TrainConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    for (const auto& p : params_) {
      slow_.emplace_back(p.data().begin(), p.data().end());
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
  }

  /// One inner step from the gradients currently stored on the parameters.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto w = params_[pi].mutable_data();
      const auto g = params_[pi].grad();
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.adam_eps);
        w[i] -= cfg_.learning_rate * (update + cfg_.weight_decay * w[i]);
      }
    }
    if (++counter_ == cfg_.lookahead_k) {
      counter_ = 0;
      for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        auto w = params_[pi].mutable_data();
        auto& slow = slow_[pi];
        for (std::size_t i = 0; i < w.size(); ++i) {
          slow[i] = (1.0 - cfg_.lookahead_alpha) * slow[i] + cfg_.lookahead_alpha * w[i];
          w[i] = slow[i];
        }
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t counter() const { return counter_; }
  const std::vector<std::vector<double>>& slow_weights() const { return slow_; }

 private:
  std::vector<Tensor> params_;
  TrainConfig cfg_;
  std::vector<std::vector<double>> slow_, m_, v_;
  std::size_t t_ = 0;
  std::size_t counter_ = 0;
};

// ---------------------------------------------------------------------------
// Metrics

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly, ties count 1/2.
inline double auc_binary(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc_binary: scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double correct = 0.0, neg_below = 0.0, pos_total = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos : neg) += 1.0;
      ++j;
    }
    correct += pos * neg_below + 0.5 * pos * neg;
    neg_below += neg;
    pos_total += pos;
    i = j;
  }
  if (pos_total == 0.0 || neg_below == 0.0) throw UndefinedMetricError("AUC needs both positive and negative samples");
  return correct / (pos_total * neg_below);
}

/// One-vs-rest AUC of every class; `scores` is row-major samples x classes.
inline std::vector<double> auc_ovr_per_class(std::span<const double> scores, std::span<const int> labels,
                                             std::size_t classes) {
  if (scores.size() != labels.size() * classes) throw DimensionError("auc_macro_ovr: score matrix has wrong size");
  std::vector<double> out;
  std::vector<double> column(labels.size());
  std::vector<int> is_class(labels.size());
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      column[i] = scores[i * classes + c];
      is_class[i] = labels[i] == static_cast<int>(c) ? 1 : 0;
    }
    if (std::find(is_class.begin(), is_class.end(), 1) == is_class.end())
      throw UndefinedMetricError("class " + std::to_string(c) + " has no samples");
    out.push_back(auc_binary(column, is_class));
  }
  return out;
}

/// Unweighted mean of the per-class one-vs-rest AUCs.
inline double auc_macro_ovr(std::span<const double> scores, std::span<const int> labels, std::size_t classes) {
  const auto per = auc_ovr_per_class(scores, labels, classes);
  return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

/// Positive iff probability > threshold; exactly at the threshold predicts negative.
inline double accuracy_binary(std::span<const double> positive_prob, std::span<const int> labels,
                              double threshold = 0.5) {
  if (positive_prob.size() != labels.size() || labels.empty())
    throw DimensionError("accuracy: probabilities and labels differ in length");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += (positive_prob[i] > threshold ? 1 : 0) == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Argmax accuracy over a row-major samples x classes score matrix.
inline double accuracy_argmax(std::span<const double> scores, std::span<const int> labels, std::size_t classes) {
  if (scores.size() != labels.size() * classes || labels.empty())
    throw DimensionError("accuracy: score matrix has wrong size");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = scores.subspan(i * classes, classes);
    hit += static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()) == labels[i];
  }
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Threshold rule for two classes (on the class-1 probability), argmax otherwise.
inline double accuracy(std::span<const double> probs, std::span<const int> labels, std::size_t classes,
                       double threshold = 0.5) {
  if (classes != 2) return accuracy_argmax(probs, labels, classes);
  std::vector<double> pos(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) pos[i] = probs[i * 2 + 1];
  return accuracy_binary(pos, labels, threshold);
}

// ---------------------------------------------------------------------------
// Evaluation and training

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_auc = 0.0;
  double val_acc = 0.0;
  double seconds = 0.0;
};

struct EvalReport {
  double accuracy = 0.0;
  double auc = 0.0;  // binary AUC for two classes, macro OvR otherwise
  std::vector<double> per_class_auc;
  double mean_loss = 0.0;
  std::vector<double> loss_curve;  // mean train loss per epoch (index 0 = initialisation)
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

/// Softmax probabilities per bag (row-major bags x classes) under the given model.
template <class Model>
std::vector<double> predict_probabilities(const std::vector<Bag>& bags, const Model& model, const ForwardOptions& opt) {
  std::vector<double> probs;
  for (const auto& b : bags) {
    const Tensor logits = model.forward(b.instances, opt);
    const auto p = softmax(logits.data());
    probs.insert(probs.end(), p.begin(), p.end());
  }
  return probs;
}

template <class Model>
EvalReport evaluate(const std::vector<Bag>& bags, const Model& model, const ForwardOptions& opt, std::size_t classes) {
  if (bags.empty()) throw ParameterError("cannot evaluate an empty bag set");
  std::vector<int> labels;
  for (const auto& b : bags) labels.push_back(b.label);
  const auto probs = predict_probabilities(bags, model, opt);
  EvalReport r;
  r.per_class_auc = auc_ovr_per_class(probs, labels, classes);
  if (classes == 2) {
    std::vector<double> pos(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) pos[i] = probs[i * 2 + 1];
    r.auc = auc_binary(pos, labels);
  } else {
    r.auc = std::accumulate(r.per_class_auc.begin(), r.per_class_auc.end(), 0.0) /
            static_cast<double>(classes);
  }
  r.accuracy = accuracy(probs, labels, classes);
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    loss -= std::log(std::max(probs[i * classes + static_cast<std::size_t>(labels[i])], 1e-300));
  r.mean_loss = loss / static_cast<double>(labels.size());
  return r;
}

namespace detail {

inline std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> s;
  for (const auto& p : params) s.emplace_back(p.data().begin(), p.data().end());
  return s;
}

inline void restore(std::vector<Tensor>& params, const std::vector<std::vector<double>>& s) {
  for (std::size_t i = 0; i < params.size(); ++i) std::copy(s[i].begin(), s[i].end(), params[i].mutable_data().begin());
}

}  // namespace detail

/// Trains with one bag per step, seeded epoch shuffling and best-validation-AUC
/// model selection. On return the model holds the best-validation weights.
/// Epoch 0 of the history holds the metrics of the initial weights.
template <class Model>
EvalReport train_loop(const std::vector<Bag>& train, const std::vector<Bag>& val, Model& model,
                      const TrainConfig& cfg, std::size_t classes,
                      const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (train.empty() || val.empty()) throw ParameterError("train and validation splits must be nonempty");
  for (const auto* set : {&train, &val})
    for (const auto& b : *set) {
      if (b.dim() != model.input_dim())
        throw DimensionError("bag '" + b.id + "' has width " + std::to_string(b.dim()) + " but the model expects " +
                             std::to_string(model.input_dim()));
      if (b.label < 0 || static_cast<std::size_t>(b.label) >= classes)
        throw ParameterError("bag '" + b.id + "' has label outside [0, " + std::to_string(classes) + ")");
    }

  using clock = std::chrono::steady_clock;
  const ForwardOptions opt{cfg.mode, PositionEncoding::ppeg};
  auto params = model.parameters();
  LookaheadOptimizer optimizer(params, cfg);
  std::mt19937_64 rng(cfg.seed);

  EvalReport report;
  auto t0 = clock::now();
  {
    const EvalReport init_train = evaluate(train, model, opt, classes);
    const EvalReport init_val = evaluate(val, model, opt, classes);
    EpochRecord rec{0, init_train.mean_loss, init_val.auc, init_val.accuracy,
                    std::chrono::duration<double>(clock::now() - t0).count()};
    report.history.push_back(rec);
    report.loss_curve.push_back(rec.train_loss);
    report.accuracy = init_val.accuracy;
    report.auc = init_val.auc;
    report.per_class_auc = init_val.per_class_auc;
    if (on_epoch) on_epoch(rec);
  }
  auto best = detail::snapshot(params);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    t0 = clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      optimizer.zero_grad();
      GradTape tape;
      const Tensor logits = model.forward(train[idx].instances, opt);
      const Tensor loss = cross_entropy_loss(logits, static_cast<std::size_t>(train[idx].label));
      tape.backward(loss);
      loss_sum += loss.item();
      optimizer.step();
    }
    const EvalReport v = evaluate(val, model, opt, classes);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(train.size()), v.auc, v.accuracy,
                    std::chrono::duration<double>(clock::now() - t0).count()};
    report.history.push_back(rec);
    report.loss_curve.push_back(rec.train_loss);
    if (v.auc > report.auc) {
      report.auc = v.auc;
      report.accuracy = v.accuracy;
      report.per_class_auc = v.per_class_auc;
      report.best_epoch = epoch;
      best = detail::snapshot(params);
    }
    if (on_epoch) on_epoch(rec);
  }
  detail::restore(params, best);
  return report;
}

/// CSV `epoch,train_loss,val_auc,val_acc,seconds`, LF endings.
inline void write_training_log(const std::vector<EpochRecord>& history, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << "epoch,train_loss,val_auc,val_acc,seconds\n" << std::setprecision(17);
  for (const auto& r : history)
    out << r.epoch << ',' << r.train_loss << ',' << r.val_auc << ',' << r.val_acc << ',' << r.seconds << '\n';
}

}  // namespace transmil
