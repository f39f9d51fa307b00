#pragma once

// Finite-difference oracle for the analytical backward pass.
//
// The numerical side only ever calls model_forward + loss_forward; no
// backward code participates in producing the reference values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "gradgpt/model.hpp"

namespace gradgpt {

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Central difference (L(x + h) - L(x - h)) / 2h with h = 1e-5 * max(1, |x|),
/// evaluated in the wider of T and double. The element is restored before
/// returning.
template <typename T, typename LossFn>
auto finite_diff(LossFn&& loss_fn, T& element) {
  using W = std::common_type_t<T, double, decltype(loss_fn())>;
  const T original = element;
  const W h = W(1e-5) * std::max(W(1), std::abs(static_cast<W>(original)));
  element = static_cast<T>(static_cast<W>(original) + h);
  const W plus = loss_fn();
  element = static_cast<T>(static_cast<W>(original) - h);
  const W minus = loss_fn();
  element = original;
  if (!std::isfinite(plus) || !std::isfinite(minus)) {
    throw NonFiniteLoss("finite_diff: loss is not finite (" + std::to_string(static_cast<double>(plus)) + ", " +
                        std::to_string(static_cast<double>(minus)) + ")");
  }
  return (plus - minus) / (W(2) * h);
}

/// Copies a parameter set into another element type.
template <typename To, typename From>
ModelParams<To> convert_params(const ModelParams<From>& src, const ModelConfig& c) {
  ModelParams<To> out = zero_params<To>(c);
  std::vector<std::span<const From>> values;
  for_each_tensor(src, [&](const auto& s) { values.push_back(s.values); });
  std::size_t k = 0;
  for_each_tensor(out, [&](const auto& s) {
    if (k >= values.size() || values[k].size() != s.values.size()) {
      throw ShapeError("convert_params: parameter set does not match the configuration at " + s.name);
    }
    const auto& from = values[k++];
    for (std::size_t j = 0; j < s.values.size(); ++j) s.values[j] = static_cast<To>(from[j]);
  });
  if (k != values.size()) throw ShapeError("convert_params: parameter set has extra tensors");
  return out;
}

struct GradcheckSettings {
  double tolerance = 1e-6;
  double floor = 1e-8;
  /// Tensors with more elements than this are sampled.
  std::size_t full_coverage_limit = 200;
  std::size_t samples_per_tensor = 25;
  std::uint64_t seed = 0;
  /// Structurally-zero gradients (the key biases) must see numeric values below this.
  double zero_grad_bound = 1e-9;
  /// Compare frozen base tensors too (they are zero analytically otherwise).
  bool freeze_base = false;
  /// Evaluate the oracle's forward passes in extended precision (long
  /// double). The stencil and step are unchanged; only the roundoff in
  /// L(x + h) - L(x - h) shrinks.
  bool extended_oracle = true;
  /// Fault injection: tensor name whose analytic gradient is shifted by corrupt_amount.
  std::optional<std::string> corrupt;
  double corrupt_amount = 1e-3;
};

struct TensorCheck {
  std::string name;
  std::size_t elements = 0;
  std::size_t checked = 0;
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t worst_index = 0;
  bool structural_zero = false;
  bool skipped = false;
  bool pass = true;
  std::string note;
};

struct GradReport {
  std::vector<TensorCheck> tensors;
  GradcheckSettings settings;
  bool pass = true;

  const TensorCheck* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& t : tensors)
      if (!t.pass) out.push_back(t.name);
    return out;
  }
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Gradient of a key bias, which the loss never depends on.
inline bool is_structurally_zero(const std::string& tensor_name) {
  return tensor_name.size() >= 4 && tensor_name.compare(tensor_name.size() - 4, 4, ".k.b") == 0;
}

namespace detail {

inline std::vector<std::size_t> probe_indices(std::size_t n, const GradcheckSettings& s, const std::string& name) {
  std::vector<std::size_t> idx;
  if (n <= s.full_coverage_limit) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
  }
  // One element per equal-width stratum.
  std::mt19937_64 rng(s.seed ^ std::hash<std::string>{}(name));
  const std::size_t strata = s.samples_per_tensor;
  for (std::size_t k = 0; k < strata; ++k) {
    const std::size_t lo = k * n / strata;
    const std::size_t hi = (k + 1) * n / strata;
    idx.push_back(lo + static_cast<std::size_t>(rng() % (hi - lo)));
  }
  return idx;
}

template <typename O, typename T>
GradReport compare(ModelParams<O>& probe, const ModelConfig& config,
                   const std::vector<std::vector<TokenId>>& probe_batch, const std::vector<Targets>& targets,
                   const std::vector<TensorSlot<T>>& grad_slots, const GradcheckSettings& settings) {
  auto loss_fn = [&]() {
    O total = O(0);
    for (std::size_t i = 0; i < probe_batch.size(); ++i) {
      total += model_loss(std::span<const TokenId>(probe_batch[i]), targets[i], probe, config);
    }
    return total;
  };

  GradReport report;
  report.settings = settings;
  std::size_t slot = 0;
  for_each_tensor(probe, [&](const auto& s) {
    const auto& g = grad_slots[slot++];
    TensorCheck tc;
    tc.name = s.name;
    tc.elements = s.values.size();
    tc.structural_zero = is_structurally_zero(s.name);
    if (!is_trainable(s.role, config, settings.freeze_base)) {
      tc.skipped = true;
      tc.note = "frozen";
      report.tensors.push_back(std::move(tc));
      return;
    }
    try {
      for (std::size_t idx : probe_indices(s.values.size(), settings, s.name)) {
        const double numeric = static_cast<double>(finite_diff(loss_fn, s.values[idx]));
        const double a = static_cast<double>(g.values[idx]);
        const double rel = relative_error(a, numeric, settings.floor);
        const double abs_err = std::abs(a - numeric);
        ++tc.checked;
        if (tc.structural_zero) {
          // analytic must be exactly zero and the loss must not move
          if (a != 0.0 || std::abs(numeric) >= settings.zero_grad_bound) tc.pass = false;
        }
        if (tc.checked == 1 || (tc.structural_zero ? abs_err > tc.max_absolute_error : rel > tc.max_relative_error)) {
          tc.worst_index = idx;
        }
        tc.max_relative_error = std::max(tc.max_relative_error, rel);
        tc.max_absolute_error = std::max(tc.max_absolute_error, abs_err);
      }
      if (!tc.structural_zero && !(tc.max_relative_error < settings.tolerance)) tc.pass = false;
      if (tc.structural_zero && !tc.pass) tc.note = "key-bias gradient not identically zero";
    } catch (const NonFiniteLoss& e) {
      tc.pass = false;
      tc.note = e.what();
    }
    if (!tc.pass) report.pass = false;
    report.tensors.push_back(std::move(tc));
  });
  return report;
}

}  // namespace detail

/// Compares analytical gradients of the summed per-sequence loss over
/// probe_batch against central differences.
template <typename T>
GradReport sweep(const ModelParams<T>& params, const ModelConfig& config,
                 const std::vector<std::vector<TokenId>>& probe_batch, const GradcheckSettings& settings = {}) {
  if (probe_batch.empty()) throw std::invalid_argument("sweep: empty probe batch");
  std::vector<Targets> targets;
  for (const auto& seq : probe_batch) targets.push_back(next_token_targets(seq));

  ModelGrads<T> analytic = zeros_like(params);
  for (std::size_t i = 0; i < probe_batch.size(); ++i) {
    auto fwd = model_forward(std::span<const TokenId>(probe_batch[i]), params, config);
    auto g = model_backward(fwd.trace, targets[i], params, config, settings.freeze_base);
    std::vector<std::span<const T>> src;
    for_each_tensor(g, [&](const auto& s) { src.push_back(s.values); });
    std::size_t k = 0;
    for_each_tensor(analytic, [&](const auto& s) {
      const auto& from = src[k++];
      for (std::size_t j = 0; j < s.values.size(); ++j) s.values[j] += from[j];
    });
  }

  std::vector<TensorSlot<T>> grad_slots;
  for_each_tensor(analytic, [&](const auto& s) { grad_slots.push_back(s); });
  if (settings.corrupt) {
    bool found = false;
    for (auto& s : grad_slots) {
      if (s.name != *settings.corrupt) continue;
      for (auto& x : s.values) x += static_cast<T>(settings.corrupt_amount);
      found = true;
    }
    if (!found) throw std::invalid_argument("sweep: no tensor named '" + *settings.corrupt + "' to corrupt");
  }

  if (settings.extended_oracle) {
    auto probe = convert_params<long double>(params, config);
    return detail::compare(probe, config, probe_batch, targets, grad_slots, settings);
  }
  auto probe = convert_params<T>(params, config);
  return detail::compare(probe, config, probe_batch, targets, grad_slots, settings);
}

/// Human-readable table, one line per tensor.
inline std::string format_report_table(const GradReport& r) {
  std::ostringstream os;
  os << std::left << std::setw(30) << "tensor" << std::right << std::setw(8) << "checked" << std::setw(14)
     << "max_rel" << std::setw(14) << "max_abs" << std::setw(8) << "worst"
     << "  status\n";
  for (const auto& t : r.tensors) {
    os << std::left << std::setw(30) << t.name << std::right << std::setw(8) << t.checked << std::scientific
       << std::setprecision(3) << std::setw(14) << t.max_relative_error << std::setw(14) << t.max_absolute_error
       << std::defaultfloat << std::setw(8) << t.worst_index << "  "
       << (t.skipped ? "skip" : t.pass ? "ok" : "FAIL");
    if (t.structural_zero) os << " (zero-gradient)";
    if (!t.note.empty()) os << " " << t.note;
    os << '\n';
  }
  os << "tolerance " << r.settings.tolerance << " floor " << r.settings.floor << " -> "
     << (r.pass ? "PASS" : "FAIL") << '\n';
  return os.str();
}

/// Machine-readable key: value dump.
inline std::string format_report_kv(const GradReport& r) {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "pass: " << (r.pass ? "true" : "false") << '\n';
  os << "tolerance: " << r.settings.tolerance << '\n';
  os << "floor: " << r.settings.floor << '\n';
  os << "tensors: " << r.tensors.size() << '\n';
  for (const auto& t : r.tensors) {
    const std::string p = "tensor." + t.name + ".";
    os << p << "max_relative_error: " << t.max_relative_error << '\n';
    os << p << "max_absolute_error: " << t.max_absolute_error << '\n';
    os << p << "worst_index: " << t.worst_index << '\n';
    os << p << "checked: " << t.checked << '\n';
    os << p << "pass: " << (t.skipped ? "skipped" : t.pass ? "true" : "false") << '\n';
  }
  const auto bad = r.failing();
  if (!bad.empty()) {
    os << "failing:";
    for (const auto& n : bad) os << ' ' << n;
    os << '\n';
  }
  return os.str();
}

}  // namespace gradgpt
