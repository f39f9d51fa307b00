#include <cmath>
#include <random>

#include "doctest.h"
#include "gradgpt/gradcheck.hpp"

using namespace gradgpt;

namespace {

const std::vector<std::vector<TokenId>> kProbe = {{1, 4, 2, 9, 3}};

ModelParams<double> fixture(const ModelConfig& c, std::uint64_t seed) {
  auto p = init_params<double>(c, seed, {0.3, 0.3, 0.3});
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0.0, 0.3);
  for_each_tensor(p, [&](const auto& s) {
    if (s.role == ParamRole::adapter)
      for (auto& x : s.values) x = n(rng);
  });
  return p;
}

}  // namespace

TEST_CASE("central difference on closed forms") {
  double x = 3.0;
  CHECK(finite_diff([&] { return x * x; }, x) == doctest::Approx(6.0).epsilon(1e-9));
  CHECK(x == 3.0);
  CHECK(finite_diff([&] { return 5.0; }, x) == 0.0);
  double y = 1e4;
  CHECK(finite_diff([&] { return y * y * y; }, y) == doctest::Approx(3e8).epsilon(1e-8));
  double z = 0.0;
  CHECK_THROWS_AS(finite_diff([&] { return std::log(z); }, z), NonFiniteLoss);
  CHECK(z == 0.0);
}

TEST_CASE("relative error and structural zeros") {
  CHECK(relative_error(1.0, 1.0, 1e-8) == 0.0);
  CHECK(relative_error(0.0, 1e-12, 1e-8) == doctest::Approx(1e-4));
  CHECK(is_structurally_zero("blocks.1.heads.0.k.b"));
  CHECK_FALSE(is_structurally_zero("blocks.1.heads.0.q.b"));
}

TEST_CASE("tiny model passes the full sweep") {
  const auto c = tiny_config();
  GradcheckSettings s;
  s.full_coverage_limit = 1u << 20;
  const auto report = sweep(fixture(c, 0), c, kProbe, s);
  CHECK(report.pass);
  CHECK(report.failing().empty());
  for (const auto& t : report.tensors) {
    CHECK(t.checked == t.elements);
    if (!t.structural_zero) CHECK(t.max_relative_error < 1e-6);
  }
  const auto* bk = report.find("blocks.0.heads.1.k.b");
  REQUIRE(bk);
  CHECK(bk->structural_zero);
  CHECK(bk->pass);
}

TEST_CASE("sweep covers tying, relu, adapters and frozen bases") {
  auto c = tiny_config();
  c.weight_tying = true;
  c.activation = Activation::relu;
  CHECK(sweep(fixture(c, 1), c, kProbe).pass);

  c = tiny_config();
  c.lora = LoRAConfig{2, 1.5, all_attach_points()};
  const auto p = fixture(c, 2);
  CHECK(sweep(p, c, kProbe).pass);
  GradcheckSettings frozen;
  frozen.freeze_base = true;
  const auto r = sweep(p, c, kProbe, frozen);
  CHECK(r.pass);
  CHECK(r.find("tok.w")->skipped);
  CHECK_FALSE(r.find("blocks.0.lora.q.d")->skipped);
}

TEST_CASE("batched sweep sums per-sequence gradients") {
  const auto c = tiny_config();
  const std::vector<std::vector<TokenId>> batch = {{1, 4, 2, 9, 3}, {0, 10, 10, 5}};
  CHECK(sweep(fixture(c, 3), c, batch).pass);
}

TEST_CASE("a corrupted gradient is reported by name") {
  const auto c = tiny_config();
  GradcheckSettings s;
  s.corrupt = "blocks.0.heads.0.v.w";
  const auto r = sweep(fixture(c, 0), c, kProbe, s);
  CHECK_FALSE(r.pass);
  const auto bad = r.failing();
  REQUIRE(bad.size() == 1);
  CHECK(bad[0] == "blocks.0.heads.0.v.w");
  CHECK(format_report_kv(r).find("failing: blocks.0.heads.0.v.w") != std::string::npos);

  s.corrupt = "no.such.tensor";
  CHECK_THROWS_AS(sweep(fixture(c, 0), c, kProbe, s), std::invalid_argument);
}

TEST_CASE("an unreachable tolerance fails") {
  const auto c = tiny_config();
  GradcheckSettings s;
  s.tolerance = 1e-12;
  CHECK_FALSE(sweep(fixture(c, 0), c, kProbe, s).pass);
}

TEST_CASE("sampling large tensors is stratified and deterministic") {
  auto c = tiny_config();
  c.n_vocab = 60;
  GradcheckSettings s;
  s.full_coverage_limit = 100;
  s.samples_per_tensor = 10;
  const auto p = fixture(c, 4);
  const auto a = sweep(p, c, kProbe, s);
  const auto b = sweep(p, c, kProbe, s);
  CHECK(a.pass);
  const auto* tok = a.find("tok.w");
  REQUIRE(tok);
  CHECK(tok->elements == 480);
  CHECK(tok->checked == 10);
  CHECK(format_report_kv(a) == format_report_kv(b));
  CHECK(format_report_table(a).find("PASS") != std::string::npos);
}

TEST_CASE("convert_params rejects mismatched shapes") {
  const auto c = tiny_config();
  auto other = c;
  other.d_rho = 4;
  CHECK_THROWS_AS(convert_params<long double>(fixture(c, 0), other), ShapeError);
}
