#include "gradgpt/train.hpp"

#include <numeric>
#include <random>

namespace gradgpt {

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "sgd") return OptimizerKind::sgd;
  if (name == "adamw") return OptimizerKind::adamw;
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "' (expected sgd or adamw)");
}

void validate(const TrainConfig& t) {
  validate(t.model);
  if (!(t.optimizer.lr > 0.0)) throw std::invalid_argument("train config: lr must be positive");
  if (t.optimizer.momentum < 0.0 || t.optimizer.momentum >= 1.0) {
    throw std::invalid_argument("train config: momentum must lie in [0, 1)");
  }
  if (t.steps == 0) throw std::invalid_argument("train config: steps must be at least 1");
  if (t.batch == 0) throw std::invalid_argument("train config: batch must be at least 1");
  if (t.seq_len == 0) throw std::invalid_argument("train config: seq_len must be at least 1");
  if (t.seq_len > t.model.n_context) {
    throw std::invalid_argument("train config: seq_len " + std::to_string(t.seq_len) + " exceeds n_context " +
                                std::to_string(t.model.n_context));
  }
  if (t.log_interval == 0) throw std::invalid_argument("train config: log interval must be at least 1");
  if (t.eval_windows == 0) throw std::invalid_argument("train config: eval_windows must be at least 1");
}

WindowSampler::WindowSampler(std::size_t n_tokens, std::size_t window, std::uint64_t seed) {
  if (window == 0 || n_tokens < window) throw std::invalid_argument("WindowSampler: corpus shorter than one window");
  n_starts_ = n_tokens - window + 1;
  std::mt19937_64 rng(seed);
  offset_ = static_cast<std::size_t>(rng() % n_starts_);
  // golden-ratio stride spreads consecutive windows across the corpus
  stride_ = static_cast<std::size_t>(0.6180339887498949 * double(n_starts_)) % n_starts_;
  if (stride_ == 0) stride_ = 1;
  while (std::gcd(stride_, n_starts_) != 1) ++stride_;
  stride_ %= n_starts_;
}

std::size_t WindowSampler::next() {
  const std::size_t s = (offset_ + (k_ % n_starts_) * stride_) % n_starts_;
  ++k_;
  return s;
}

std::vector<std::size_t> eval_window_starts(std::size_t n_tokens, std::size_t window, std::size_t count) {
  if (window == 0 || n_tokens < window) throw std::invalid_argument("eval_window_starts: corpus too short");
  const std::size_t n_starts = n_tokens - window + 1;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(i * n_starts / count);
  return out;
}

Window make_window(std::span<const TokenId> tokens, std::size_t start, std::size_t seq_len) {
  if (start + seq_len + 1 > tokens.size()) throw std::out_of_range("make_window: window runs past the corpus");
  Window w;
  w.input.assign(tokens.begin() + start, tokens.begin() + start + seq_len);
  w.targets.reserve(seq_len);
  for (std::size_t t = 0; t < seq_len; ++t) w.targets.emplace_back(tokens[start + t + 1]);
  return w;
}

}  // namespace gradgpt
