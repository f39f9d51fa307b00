#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <set>

#include "doctest.h"
#include "gradgpt/checkpoint.hpp"
#include "gradgpt/corpus.hpp"
#include "gradgpt/train.hpp"
#include "support/synthetic_text.hpp"

using namespace gradgpt;

namespace {

ModelConfig byte_config() {
  ModelConfig c;
  c.d = 16;
  c.n_h = 2;
  c.d_h = 8;
  c.d_rho = 8;
  c.n_blocks = 1;
  c.n_vocab = 256;
  c.n_context = 16;
  return c;
}

std::vector<double> flat(const ModelParams<double>& p) {
  std::vector<double> out;
  for_each_tensor(p, [&](const auto& s) { out.insert(out.end(), s.values.begin(), s.values.end()); });
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// vocabulary

TEST_CASE("byte vocabulary round-trips arbitrary text") {
  const auto v = Vocabulary::bytes();
  CHECK(v.size() == 256);
  const std::string text = gradgpt::testing::synthetic_text(100'000);
  CHECK(text.size() >= 100'000);
  const auto ids = v.encode(text);
  CHECK(ids.size() == text.size());
  CHECK(v.decode(ids) == text);
  std::string all(256, '\0');
  std::iota(all.begin(), all.end(), char(0));
  CHECK(v.decode(v.encode(all)) == all);
  CHECK(v.encode("A")[0] == 65);
}

TEST_CASE("charset vocabulary") {
  const auto v = Vocabulary::charset_of("banana");
  CHECK(v.size() == 3);
  CHECK(v.encode("abn") == std::vector<TokenId>{0, 1, 2});
  CHECK(v.decode(v.encode("nab")) == "nab");
  try {
    v.encode("bad!");
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("offset 2") != std::string::npos);
  }
  const std::vector<TokenId> bad = {0, 3};
  CHECK_THROWS_AS(v.decode(bad), std::out_of_range);

  const auto again = Vocabulary::parse(v.describe());
  CHECK(again.kind() == VocabKind::charset);
  CHECK(again.describe() == v.describe());
  CHECK(Vocabulary::parse("byte").size() == 256);
  CHECK_THROWS_AS(Vocabulary::parse("charset:zz"), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary::charset_of(""), std::invalid_argument);
}

TEST_CASE("corpus from file") {
  const auto path = std::filesystem::temp_directory_path() / "gradgpt_corpus_test.txt";
  write_file_bytes(path, "hello world\n");
  const auto corpus = Corpus::from_file(path, VocabKind::charset);
  CHECK(corpus.text == "hello world\n");
  CHECK(corpus.tokens.size() == 12);
  CHECK(corpus.vocab.size() == 9);
  std::filesystem::remove(path);
  CHECK_THROWS(Corpus::from_file(path));
}

// ---------------------------------------------------------------------------
// checkpoints

TEST_CASE("SHA-256 content hash") {
  CHECK(content_hash("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(content_hash("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("model checkpoints round-trip byte for byte") {
  auto c = byte_config();
  c.weight_tying = true;
  const auto p = init_params<double>(c, 3, {0.5, 0.1, 0.1});
  const std::string bytes = serialize_checkpoint(model_checkpoint(p, c, {{"vocab", "byte"}}));
  const auto ck = parse_checkpoint(bytes);
  CHECK(ck.get("vocab") == std::string("byte"));
  CHECK(serialize_checkpoint(ck) == bytes);

  const auto loaded = load_model<double>(ck);
  CHECK(loaded.config.weight_tying);
  CHECK(loaded.config.d_rho == c.d_rho);
  CHECK(flat(loaded.params) == flat(p));
  CHECK(serialize_checkpoint(model_checkpoint(loaded.params, loaded.config, {{"vocab", "byte"}})) == bytes);

  const auto narrow = load_model<float>(ck);
  CHECK(narrow.params.tok.w_emb(1, 2) == static_cast<float>(p.tok.w_emb(1, 2)));
}

TEST_CASE("payloads are little-endian") {
  const double one[] = {1.0};
  const auto r = encode_tensor<double>("x", std::span<const double>(one), 1, 1);
  const std::vector<std::uint8_t> expected = {0, 0, 0, 0, 0, 0, 0xf0, 0x3f};
  CHECK(r.payload == expected);
  const float half[] = {0.5f};
  const std::vector<std::uint8_t> f32 = {0, 0, 0, 0x3f};
  CHECK(encode_tensor<float>("y", std::span<const float>(half), 1, 1).payload == f32);
}

TEST_CASE("malformed checkpoints are rejected") {
  const auto c = byte_config();
  const auto p = init_params<double>(c, 4);
  const std::string bytes = serialize_checkpoint(model_checkpoint(p, c));
  CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 1)), CheckpointError);
  CHECK_THROWS_AS(parse_checkpoint(bytes + "x"), CheckpointError);
  CHECK_THROWS_AS(parse_checkpoint("no header"), CheckpointError);

  auto ck = parse_checkpoint(bytes);
  ck.tensors.pop_back();
  CHECK_THROWS_AS(load_model<double>(ck), CheckpointError);
  ck = parse_checkpoint(bytes);
  ck.header[1].second = "adapter";
  CHECK_THROWS_AS(load_model<double>(ck), CheckpointError);
}

TEST_CASE("adapters bind to the exact base bytes") {
  auto c = byte_config();
  const auto base = init_params<double>(c, 5);
  const std::string base_bytes = serialize_checkpoint(model_checkpoint(base, c));
  const std::string hash = content_hash(base_bytes);

  auto lc = c;
  lc.lora = LoRAConfig{2, 4.0, {AttachPoint::q, AttachPoint::logits}};
  auto tuned = init_params<double>(lc, 6);
  tuned.lora_logits->u_mat(1, 3) = 0.25;
  const auto adapter = parse_checkpoint(serialize_checkpoint(adapter_checkpoint(tuned, lc, hash)));
  CHECK(adapter.tensors.size() == 4);

  auto model = load_model<double>(parse_checkpoint(base_bytes));
  CHECK_THROWS_AS(apply_adapter(adapter, model, content_hash(base_bytes + " ")), CheckpointError);
  apply_adapter(adapter, model, hash);
  REQUIRE(model.params.lora_logits.has_value());
  CHECK(model.params.lora_logits->u_mat(1, 3) == 0.25);
  CHECK(model.params.lora_logits->alpha == 4.0);
  CHECK(model.params.blocks[0].lora.q.has_value());
}

// ---------------------------------------------------------------------------
// training

TEST_CASE("window sampler visits every start once per cycle") {
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    WindowSampler s(1000, 65, seed);
    CHECK(s.starts() == 936);
    CHECK(std::gcd(s.stride(), s.starts()) == 1);
    std::set<std::size_t> seen;
    for (std::size_t i = 0; i < s.starts(); ++i) seen.insert(s.next());
    CHECK(seen.size() == s.starts());
    CHECK(*seen.rbegin() == 935);
  }
  WindowSampler a(1000, 65, 0), b(1000, 65, 1);
  CHECK(a.next() != b.next());
  WindowSampler single(10, 10, 3);
  CHECK(single.next() == 0);
  CHECK(single.next() == 0);
  CHECK_THROWS_AS(WindowSampler(5, 10, 0), std::invalid_argument);
}

TEST_CASE("evaluation windows and window slicing") {
  const auto starts = eval_window_starts(1000, 65, 16);
  CHECK(starts.size() == 16);
  CHECK(starts.front() == 0);
  CHECK(starts.back() <= 935);
  CHECK(std::is_sorted(starts.begin(), starts.end()));

  const std::vector<TokenId> tokens = {10, 11, 12, 13, 14};
  const auto w = make_window(std::span<const TokenId>(tokens), 1, 3);
  CHECK(w.input == std::vector<TokenId>{11, 12, 13});
  CHECK(w.targets == Targets{12, 13, 14});
  CHECK_THROWS_AS(make_window(std::span<const TokenId>(tokens), 2, 3), std::out_of_range);
}

TEST_CASE("optimizers") {
  auto c = byte_config();
  c.attention_bias = false;
  auto p = init_params<double>(c, 7);
  const auto before = flat(p);
  auto g = zeros_like(p);
  for_each_tensor(g, [](const auto& s) { std::fill(s.values.begin(), s.values.end(), 1.0); });

  OptimizerSettings sgd;
  sgd.lr = 0.5;
  Optimizer<double> o(sgd, p, c, false);
  o.step(p, g);
  CHECK(p.tok.w_emb(0, 0) == before[0] - 0.5);
  CHECK(p.blocks[0].heads[0].q.b[0] == 0.0);

  OptimizerSettings adam;
  adam.kind = OptimizerKind::adamw;
  adam.lr = 0.01;
  adam.weight_decay = 0.1;
  auto q = init_params<double>(c, 7);
  Optimizer<double> oa(adam, q, c, false);
  oa.step(q, g);
  const double w0 = before[0];
  CHECK(q.tok.w_emb(0, 0) == doctest::Approx(w0 - 0.01 * 0.1 * w0 - 0.01).epsilon(1e-9));
  CHECK(q.ln_final.w[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));

  CHECK(parse_optimizer("adamw") == OptimizerKind::adamw);
  CHECK_THROWS_AS(parse_optimizer("lion"), std::invalid_argument);
}

TEST_CASE("training is deterministic and reduces the loss") {
  const std::string text = gradgpt::testing::synthetic_text(20'000, 7);
  const auto corpus = Corpus::from_text(text);
  TrainConfig cfg;
  cfg.model = byte_config();
  cfg.seq_len = 16;
  cfg.batch = 4;
  cfg.steps = 60;
  cfg.optimizer.kind = OptimizerKind::adamw;
  cfg.optimizer.lr = 1e-2;
  const auto p0 = init_params<double>(cfg.model, 0, {cfg.init_std});
  const auto a = train_model<double>(corpus.tokens, cfg, cfg.model, p0);
  const auto b = train_model<double>(corpus.tokens, cfg, cfg.model, p0);
  CHECK(a.step_losses == b.step_losses);
  CHECK(flat(a.params) == flat(b.params));
  CHECK(std::abs(a.step_losses.front() - std::log(256.0)) / std::log(256.0) < 0.02);
  CHECK(a.eval_after < 0.8 * a.eval_before);

  cfg.seed = 1;
  CHECK(train_model<double>(corpus.tokens, cfg, cfg.model, p0).step_losses != a.step_losses);
}

TEST_CASE("frozen-base training moves adapters only") {
  const auto corpus = Corpus::from_text(gradgpt::testing::synthetic_text(5'000, 8));
  TrainConfig cfg;
  cfg.model = byte_config();
  cfg.model.lora = LoRAConfig{2, 2.0, all_attach_points()};
  cfg.seq_len = 8;
  cfg.batch = 2;
  cfg.steps = 5;
  cfg.optimizer.lr = 0.1;
  const auto p0 = init_params<double>(cfg.model, 1);
  const auto r = train_model<double>(corpus.tokens, cfg, cfg.model, p0, true);
  bool adapters_moved = false;
  std::vector<std::span<const double>> before;
  for_each_tensor(p0, [&](const auto& s) { before.push_back(s.values); });
  std::size_t k = 0;
  for_each_tensor(r.params, [&](const auto& s) {
    const auto& old = before[k++];
    const bool same = std::memcmp(old.data(), s.values.data(), old.size_bytes()) == 0;
    if (s.role == ParamRole::adapter) adapters_moved |= !same;
    else CHECK_MESSAGE(same, s.name);
  });
  CHECK(adapters_moved);
}

TEST_CASE("training configuration errors") {
  TrainConfig cfg;
  cfg.model = byte_config();
  cfg.seq_len = 16;
  CHECK_NOTHROW(validate(cfg));
  auto bad = cfg;
  bad.optimizer.lr = 0.0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.seq_len = 17;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.optimizer.momentum = 1.0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);

  const std::vector<TokenId> short_corpus(10, 1);
  CHECK_THROWS_AS(train_model<double>(short_corpus, cfg, cfg.model, init_params<double>(cfg.model, 0)),
                  std::invalid_argument);

  auto wild = cfg;
  wild.optimizer.lr = 1e30;
  wild.steps = 20;
  const auto corpus = Corpus::from_text(gradgpt::testing::synthetic_text(2'000, 9));
  CHECK_THROWS_AS(train_model<double>(corpus.tokens, wild, wild.model, init_params<double>(wild.model, 0)),
                  TrainingDiverged);
}
