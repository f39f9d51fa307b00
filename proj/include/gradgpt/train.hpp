#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradgpt/model.hpp"

namespace gradgpt {

enum class OptimizerKind { sgd, adamw };

OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::sgd;
  double lr = 3e-3;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
};

struct TrainConfig {
  std::string corpus_path;
  ModelConfig model;
  OptimizerSettings optimizer;
  std::size_t batch = 8;
  std::size_t seq_len = 64;
  std::size_t steps = 500;
  std::uint64_t seed = 0;
  std::string checkpoint_out;
  std::size_t log_interval = 10;
  double init_std = 0.02;
  /// Fixed windows scored before and after training.
  std::size_t eval_windows = 16;
};

void validate(const TrainConfig& t);

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Start offsets of seq_len + 1 token windows. Walks every admissible start
/// once per cycle with a fixed stride coprime to their count, beginning at a
/// seed-derived offset.
class WindowSampler {
 public:
  WindowSampler(std::size_t n_tokens, std::size_t window, std::uint64_t seed);
  std::size_t next();
  std::size_t starts() const { return n_starts_; }
  std::size_t stride() const { return stride_; }

 private:
  std::size_t n_starts_ = 0;
  std::size_t offset_ = 0;
  std::size_t stride_ = 0;
  std::size_t k_ = 0;
};

/// Evenly spaced window starts for evaluation.
std::vector<std::size_t> eval_window_starts(std::size_t n_tokens, std::size_t window, std::size_t count);

/// Input tokens and shift-by-one targets of the window starting at start.
struct Window {
  std::vector<TokenId> input;
  Targets targets;
};
Window make_window(std::span<const TokenId> tokens, std::size_t start, std::size_t seq_len);

template <typename T>
class Optimizer {
 public:
  Optimizer(const OptimizerSettings& s, const ModelParams<T>& params, const ModelConfig& c, bool freeze_base)
      : s_(s) {
    for_each_tensor(params, [&](const auto& slot) {
      trainable_.push_back(is_trainable(slot.role, c, freeze_base));
      decays_.push_back(slot.rows > 1);
      m_.emplace_back(slot.values.size(), T(0));
      if (s.kind == OptimizerKind::adamw) v_.emplace_back(slot.values.size(), T(0));
    });
  }

  void step(ModelParams<T>& params, const ModelGrads<T>& grads) {
    ++t_;
    std::vector<std::span<const T>> g;
    for_each_tensor(grads, [&](const auto& slot) { g.push_back(slot.values); });
    const T lr = static_cast<T>(s_.lr);
    const double bc1 = 1.0 - std::pow(s_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(s_.beta2, double(t_));
    std::size_t i = 0;
    for_each_tensor(params, [&](const auto& slot) {
      const std::size_t idx = i++;
      if (!trainable_[idx]) return;
      auto& m = m_[idx];
      const auto& gs = g.at(idx);
      for (std::size_t j = 0; j < slot.values.size(); ++j) {
        T& w = slot.values[j];
        if (s_.kind == OptimizerKind::sgd) {
          if (s_.momentum > 0) {
            m[j] = static_cast<T>(s_.momentum) * m[j] + gs[j];
            w -= lr * m[j];
          } else {
            w -= lr * gs[j];
          }
        } else {
          auto& v = v_[idx];
          m[j] = static_cast<T>(s_.beta1) * m[j] + static_cast<T>(1 - s_.beta1) * gs[j];
          v[j] = static_cast<T>(s_.beta2) * v[j] + static_cast<T>(1 - s_.beta2) * gs[j] * gs[j];
          const T mh = m[j] / static_cast<T>(bc1);
          const T vh = v[j] / static_cast<T>(bc2);
          if (decays_[idx]) w -= lr * static_cast<T>(s_.weight_decay) * w;
          w -= lr * mh / (std::sqrt(vh) + static_cast<T>(s_.epsilon));
        }
      }
    });
  }

 private:
  OptimizerSettings s_;
  std::vector<bool> trainable_;
  std::vector<bool> decays_;
  std::vector<std::vector<T>> m_, v_;
  std::size_t t_ = 0;
};

template <typename T>
double mean_window_loss(std::span<const TokenId> tokens, const std::vector<std::size_t>& starts, std::size_t seq_len,
                        const ModelParams<T>& p, const ModelConfig& c) {
  double total = 0.0;
  for (std::size_t s : starts) {
    const Window w = make_window(tokens, s, seq_len);
    total += static_cast<double>(model_loss(std::span<const TokenId>(w.input), w.targets, p, c));
  }
  return total / static_cast<double>(starts.size());
}

template <typename T>
struct TrainResult {
  ModelParams<T> params;
  std::vector<double> step_losses;
  double eval_before = 0.0;
  double eval_after = 0.0;
  double seconds = 0.0;
};

/// Mini-batch training: per step, gradients of batch windows are summed and
/// one optimizer update is applied. With freeze_base only adapters move.
template <typename T>
TrainResult<T> train_model(std::span<const TokenId> tokens, const TrainConfig& cfg, const ModelConfig& mc,
                           ModelParams<T> params, bool freeze_base = false, std::ostream* log = nullptr) {
  validate(cfg);
  if (cfg.seq_len > mc.n_context) throw std::invalid_argument("train: seq_len exceeds n_context");
  const std::size_t window = cfg.seq_len + 1;
  if (tokens.size() < window) {
    throw std::invalid_argument("train: corpus has " + std::to_string(tokens.size()) + " tokens, need at least " +
                                std::to_string(window));
  }
  const auto t0 = std::chrono::steady_clock::now();
  WindowSampler sampler(tokens.size(), window, cfg.seed);
  const auto eval_starts = eval_window_starts(tokens.size(), window, cfg.eval_windows);
  Optimizer<T> opt(cfg.optimizer, params, mc, freeze_base);

  TrainResult<T> out;
  out.eval_before = mean_window_loss(tokens, eval_starts, cfg.seq_len, params, mc);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    ModelGrads<T> total = zeros_like(params);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const std::size_t start = sampler.next();
      const Window w = make_window(tokens, start, cfg.seq_len);
      auto fwd = model_forward(std::span<const TokenId>(w.input), params, mc);
      const double loss = static_cast<double>(loss_forward(fwd.logits, w.targets).loss);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("train: non-finite loss at step " + std::to_string(step) + " on the window at offset " +
                               std::to_string(start) + " (lr " + std::to_string(cfg.optimizer.lr) + ")");
      }
      loss_sum += loss;
      const auto g = model_backward(fwd.trace, w.targets, params, mc, freeze_base);
      std::vector<std::span<const T>> src;
      for_each_tensor(g, [&](const auto& s) { src.push_back(s.values); });
      std::size_t k = 0;
      for_each_tensor(total, [&](const auto& s) {
        const auto& from = src[k++];
        for (std::size_t j = 0; j < s.values.size(); ++j) s.values[j] += from[j];
      });
    }
    const double mean = loss_sum / static_cast<double>(cfg.batch);
    out.step_losses.push_back(mean);
    if (log && (step % cfg.log_interval == 0 || step + 1 == cfg.steps)) {
      *log << "step " << step << " loss " << std::setprecision(6) << std::fixed << mean << std::defaultfloat << '\n';
    }
    opt.step(params, total);
  }
  out.eval_after = mean_window_loss(tokens, eval_starts, cfg.seq_len, params, mc);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (log) {
    *log << "summary steps=" << cfg.steps << " first_loss=" << std::setprecision(6) << std::fixed
         << out.step_losses.front() << " last_loss=" << out.step_losses.back() << " eval_before=" << out.eval_before
         << " eval_after=" << out.eval_after << " eval_ratio=" << out.eval_after / out.eval_before
         << " seconds=" << std::setprecision(2) << out.seconds << std::defaultfloat << '\n';
  }
  out.params = std::move(params);
  return out;
}

}  // namespace gradgpt
