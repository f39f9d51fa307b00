// gradgpt command-line front end.

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "gradgpt/checkpoint.hpp"
#include "gradgpt/corpus.hpp"
#include "gradgpt/gradcheck.hpp"
#include "gradgpt/inference.hpp"
#include "gradgpt/train.hpp"

using namespace gradgpt;

namespace {

enum class Precision { f32, f64 };

Precision precision_from_env() {
  const char* env = std::getenv("GRADGPT_PRECISION");
  if (!env || std::string(env).empty() || std::string(env) == "f64") return Precision::f64;
  if (std::string(env) == "f32") return Precision::f32;
  throw std::invalid_argument("GRADGPT_PRECISION must be f32 or f64, got '" + std::string(env) + "'");
}

struct ModelFlags {
  std::size_t d = 64;
  std::size_t n_h = 4;
  std::size_t d_h = 0;  // 0: d / n_h
  std::size_t d_rho = 0;  // 0: d_h
  std::size_t n_blocks = 2;
  std::size_t n_context = 64;
  std::string activation = "gelu";
  double eps = 1e-5;
  bool weight_tying = false;
  bool no_attention_bias = false;

  void add_to(CLI::App* app) {
    app->add_option("--d", d, "model width")->capture_default_str();
    app->add_option("--n-h", n_h, "attention heads")->capture_default_str();
    app->add_option("--d-h", d_h, "value width per head (default d / n-h)");
    app->add_option("--d-rho", d_rho, "query/key width per head (default d-h)");
    app->add_option("--n-blocks", n_blocks, "transformer blocks")->capture_default_str();
    app->add_option("--n-context", n_context, "maximum sequence length")->capture_default_str();
    app->add_option("--activation", activation, "relu or gelu")->capture_default_str();
    app->add_option("--eps", eps, "layer-norm epsilon")->capture_default_str();
    app->add_flag("--weight-tying", weight_tying, "share the token table with the logits layer");
    app->add_flag("--no-attention-bias", no_attention_bias, "keep query/key/value biases at zero");
  }

  ModelConfig build(std::size_t n_vocab) const {
    ModelConfig c;
    c.d = d;
    c.n_h = n_h;
    c.d_h = d_h ? d_h : (n_h ? d / n_h : 0);
    c.d_rho = d_rho ? d_rho : c.d_h;
    c.n_blocks = n_blocks;
    c.n_vocab = n_vocab;
    c.n_context = n_context;
    c.activation = parse_activation(activation);
    c.eps = eps;
    c.weight_tying = weight_tying;
    c.attention_bias = !no_attention_bias;
    validate(c);
    return c;
  }
};

struct LoraFlags {
  std::size_t r = 16;
  double alpha = 16.0;
  std::string attach = "all";

  void add_to(CLI::App* app) {
    app->add_option("--lora-r", r, "adapter rank")->capture_default_str();
    app->add_option("--lora-alpha", alpha, "adapter scale")->capture_default_str();
    app->add_option("--lora-attach", attach, "comma list of q,k,v,att_proj,expand,contract,logits or 'all'")
        ->capture_default_str();
  }

  LoRAConfig build() const { return {r, alpha, parse_attach_points(attach)}; }
};

struct TrainFlags {
  std::string corpus;
  std::string vocab = "byte";
  std::string optimizer = "sgd";
  OptimizerSettings opt;
  std::size_t batch = 8;
  std::size_t seq_len = 64;
  std::size_t steps = 500;
  std::uint64_t seed = 0;
  std::string out;
  std::size_t log_interval = 10;
  double init_std = 0.02;
  std::size_t eval_windows = 16;

  void add_to(CLI::App* app, bool with_vocab) {
    app->add_option("--corpus", corpus, "training text file")->required()->check(CLI::ExistingFile);
    if (with_vocab) app->add_option("--vocab", vocab, "byte or charset")->capture_default_str();
    app->add_option("--optimizer", optimizer, "sgd or adamw")->capture_default_str();
    app->add_option("--lr", opt.lr, "learning rate")->capture_default_str();
    app->add_option("--momentum", opt.momentum, "SGD momentum")->capture_default_str();
    app->add_option("--beta1", opt.beta1, "AdamW beta1")->capture_default_str();
    app->add_option("--beta2", opt.beta2, "AdamW beta2")->capture_default_str();
    app->add_option("--adam-eps", opt.epsilon, "AdamW epsilon")->capture_default_str();
    app->add_option("--weight-decay", opt.weight_decay, "AdamW decoupled weight decay")->capture_default_str();
    app->add_option("--batch", batch, "sequences per step")->capture_default_str();
    app->add_option("--seq-len", seq_len, "tokens per sequence")->capture_default_str();
    app->add_option("--steps", steps, "optimizer steps")->capture_default_str();
    app->add_option("--seed", seed, "initialization and window seed")->capture_default_str();
    app->add_option("--out", out, "output checkpoint path")->required();
    app->add_option("--log-interval", log_interval, "steps between loss lines")->capture_default_str();
    app->add_option("--init-std", init_std, "weight initialization std")->capture_default_str();
    app->add_option("--eval-windows", eval_windows, "fixed windows scored before and after")->capture_default_str();
  }

  TrainConfig build(const ModelConfig& model) const {
    TrainConfig t;
    t.corpus_path = corpus;
    t.model = model;
    t.optimizer = opt;
    t.optimizer.kind = parse_optimizer(optimizer);
    t.batch = batch;
    t.seq_len = seq_len;
    t.steps = steps;
    t.seed = seed;
    t.checkpoint_out = out;
    t.log_interval = log_interval;
    t.init_std = init_std;
    t.eval_windows = eval_windows;
    validate(t);
    return t;
  }
};

VocabKind parse_vocab_kind(const std::string& s) {
  if (s == "byte") return VocabKind::byte;
  if (s == "charset") return VocabKind::charset;
  throw std::invalid_argument("--vocab must be byte or charset");
}

std::string precision_name(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

template <typename T>
int run_train(const ModelFlags& mf, const TrainFlags& tf, Precision prec) {
  const Corpus corpus = Corpus::from_file(tf.corpus, parse_vocab_kind(tf.vocab));
  const ModelConfig mc = mf.build(corpus.vocab.size());
  const TrainConfig tc = tf.build(mc);
  std::cout << "corpus " << corpus.text.size() << " bytes, vocabulary " << corpus.vocab.size() << ", "
            << total_elements(zero_params<T>(mc)) << " parameters, precision " << precision_name(prec) << '\n';
  auto params = init_params<T>(mc, tc.seed, InitOptions{tc.init_std});
  auto result = train_model(std::span<const TokenId>(corpus.tokens), tc, mc, std::move(params), false, &std::cout);
  const auto ck = model_checkpoint(result.params, mc, {{"vocab", corpus.vocab.describe()}});
  const std::string bytes = serialize_checkpoint(ck);
  write_file_bytes(tc.checkpoint_out, bytes);
  std::cout << "wrote " << tc.checkpoint_out << " (" << bytes.size() << " bytes, sha256 " << content_hash(bytes)
            << ")\n";
  return 0;
}

struct GenerateFlags {
  std::string checkpoint;
  std::string adapter;
  std::string prompt;
  std::size_t n_new = 64;
  std::string strategy = "greedy";
  double temperature = 1.0;
  std::size_t top_k = 10;
  std::uint64_t seed = 0;
};

SamplerSettings build_sampler(const GenerateFlags& g) {
  SamplerSettings s;
  if (g.strategy == "greedy") s.strategy = SamplingStrategy::greedy;
  else if (g.strategy == "temperature") s.strategy = SamplingStrategy::temperature;
  else if (g.strategy == "top-k" || g.strategy == "top_k") s.strategy = SamplingStrategy::top_k;
  else throw std::invalid_argument("--strategy must be greedy, temperature or top-k");
  s.temperature = g.temperature;
  s.top_k = g.top_k;
  s.seed = g.seed;
  return s;
}

template <typename T>
int run_generate(const GenerateFlags& g) {
  const std::string base_bytes = read_file_bytes(g.checkpoint);
  const Checkpoint base_ck = parse_checkpoint(base_bytes);
  auto model = load_model<T>(base_ck);
  if (!g.adapter.empty()) {
    apply_adapter(parse_checkpoint(read_file_bytes(g.adapter)), model, content_hash(base_bytes));
  }
  const Vocabulary vocab = Vocabulary::parse(base_ck.get("vocab").value_or("byte"));
  if (vocab.size() != model.config.n_vocab) throw CheckpointError("checkpoint vocabulary does not match n_vocab");
  const auto prompt = vocab.encode(g.prompt);
  const auto tokens = generate(std::span<const TokenId>(prompt), g.n_new, build_sampler(g), model.params, model.config);
  std::cout << vocab.decode(tokens) << '\n';
  return 0;
}

struct GradcheckFlags {
  double tolerance = 1e-6;
  std::string corrupt;
  double corrupt_amount = 1e-3;
  std::uint64_t seed = 0;
  double scale = 0.3;
  std::vector<TokenId> tokens = {1, 4, 2, 9, 3};
  std::string format = "table";
  std::string oracle = "extended";
  bool lora = false;
  bool weight_tying = false;
};

std::string resolve_tensor_alias(const std::string& name) {
  static const std::map<std::string, std::string> aliases = {
      {"w_q", "blocks.0.heads.0.q.w"}, {"b_q", "blocks.0.heads.0.q.b"}, {"w_k", "blocks.0.heads.0.k.w"},
      {"w_v", "blocks.0.heads.0.v.w"}, {"b_v", "blocks.0.heads.0.v.b"}, {"w_tok", "tok.w"},
      {"w_pos", "pos.w"},
  };
  const auto it = aliases.find(name);
  return it == aliases.end() ? name : it->second;
}

template <typename T>
int run_gradcheck(const GradcheckFlags& f) {
  ModelConfig c = tiny_config();
  c.weight_tying = f.weight_tying;
  if (f.lora) c.lora = LoRAConfig{2, 1.5, all_attach_points()};
  validate(c);
  auto params = init_params<T>(c, f.seed, InitOptions{f.scale, f.scale, f.scale});
  if (f.lora) {
    // nonzero u so that every adapter gradient is exercised
    std::mt19937_64 rng(f.seed + 1);
    std::normal_distribution<double> normal(0.0, f.scale);
    for_each_tensor(params, [&](const auto& s) {
      if (s.role == ParamRole::adapter)
        for (auto& x : s.values) x = static_cast<T>(normal(rng));
    });
  }
  GradcheckSettings s;
  s.tolerance = f.tolerance;
  s.seed = f.seed;
  s.corrupt_amount = f.corrupt_amount;
  if (f.oracle == "f64") s.extended_oracle = false;
  else if (f.oracle != "extended") throw std::invalid_argument("--oracle-precision must be extended or f64");
  if (!f.corrupt.empty()) s.corrupt = resolve_tensor_alias(f.corrupt);
  const GradReport report = sweep(params, c, {f.tokens}, s);
  if (f.format == "kv") std::cout << format_report_kv(report);
  else std::cout << format_report_table(report);
  if (!report.pass) {
    std::cout << "failing tensors:";
    for (const auto& n : report.failing()) std::cout << ' ' << n;
    std::cout << '\n';
  }
  return report.pass ? 0 : 1;
}

std::string group_digits(std::uint64_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

struct ParamsFlags {
  std::string preset = "gpt2-small";
  std::size_t n_blocks = 12;
  bool weight_tying = false;
  bool lora = false;
  LoraFlags lora_flags;
};

int run_params(const ParamsFlags& f) {
  ModelConfig c;
  if (f.preset == "gpt2-small") c = gpt2_small_config(f.n_blocks);
  else if (f.preset == "tiny") {
    c = tiny_config();
    c.n_blocks = f.n_blocks;
  } else throw std::invalid_argument("--preset must be gpt2-small or tiny");
  c.weight_tying = f.weight_tying;
  if (f.lora) c.lora = f.lora_flags.build();
  validate(c);

  const ParamBreakdown b = count_params(c);
  std::cout << std::left << std::setw(34) << "component" << std::setw(16) << "shape" << std::right
            << std::setw(14) << "parameters" << "\n";
  for (const auto& comp : b.components) {
    std::cout << std::left << std::setw(34) << comp.name + (comp.per_block ? " [per block]" : "") << std::setw(16)
              << comp.shape << std::right << std::setw(14) << group_digits(comp.count) << '\n';
  }
  std::cout << "block total: " << group_digits(b.block_total) << '\n';
  std::cout << "blocks: " << c.n_blocks << '\n';
  std::cout << "untied total: " << group_digits(b.untied_total) << '\n';
  std::cout << "weight-tying savings: " << group_digits(b.tying_savings) << '\n';
  std::cout << "tied total: " << group_digits(b.tied_total) << '\n';
  std::cout << "total (" << (c.weight_tying ? "tied" : "untied") << "): " << group_digits(b.grand_total) << '\n';
  if (c.lora) {
    const std::uint64_t trainable = count_lora_params(c);
    const double fraction = double(trainable) / double(b.grand_total);
    std::cout << "lora trainable (r=" << c.lora->r << ", " << format_attach_points(c.lora->attach)
              << "): " << group_digits(trainable) << '\n';
    std::cout << std::fixed << std::setprecision(2) << "lora trainable fraction: " << 100.0 * fraction << "%\n"
              << "lora reduction: " << 100.0 * (1.0 - fraction) << "%\n";
  }
  return 0;
}

struct FinetuneFlags {
  std::string checkpoint;
  TrainFlags train;
  LoraFlags lora;
};

template <typename T>
int run_finetune(const FinetuneFlags& f) {
  const std::string base_bytes = read_file_bytes(f.checkpoint);
  const std::string base_hash = content_hash(base_bytes);
  const Checkpoint base_ck = parse_checkpoint(base_bytes);
  auto model = load_model<T>(base_ck);
  const Vocabulary vocab = Vocabulary::parse(base_ck.get("vocab").value_or("byte"));

  ModelConfig mc = model.config;
  mc.lora = f.lora.build();
  validate(mc);
  attach_lora_shapes(model.params, mc);
  const TrainConfig tc = f.train.build(mc);
  {
    // d ~ Normal(0, init_std), u = 0
    const auto fresh = init_params<T>(mc, tc.seed, InitOptions{tc.init_std});
    std::vector<std::span<const T>> src;
    for_each_tensor(fresh, [&](const auto& s) { src.push_back(s.values); });
    std::size_t k = 0;
    for_each_tensor(model.params, [&](const auto& s) {
      const auto& from = src[k++];
      if (s.role == ParamRole::adapter) std::copy(from.begin(), from.end(), s.values.begin());
    });
  }

  const auto tokens = vocab.encode(read_file_bytes(tc.corpus_path));

  const std::uint64_t trainable = count_lora_params(mc);
  const std::uint64_t base_total = count_params(mc).grand_total;
  std::cout << "lora trainable " << trainable << " of " << base_total << " base parameters (" << std::fixed
            << std::setprecision(2) << 100.0 * double(trainable) / double(base_total) << "%)" << std::defaultfloat
            << '\n';
  auto result = train_model(std::span<const TokenId>(tokens), tc, mc, std::move(model.params), true, &std::cout);

  const std::string adapter_bytes = serialize_checkpoint(adapter_checkpoint(result.params, mc, base_hash));
  write_file_bytes(tc.checkpoint_out, adapter_bytes);
  if (content_hash(read_file_bytes(f.checkpoint)) != base_hash) {
    std::cerr << "error: base checkpoint changed on disk during fine-tuning\n";
    return 1;
  }
  std::cout << "wrote adapter " << tc.checkpoint_out << " (" << adapter_bytes.size() << " bytes, base sha256 "
            << base_hash << ")\n";
  return 0;
}

template <typename F>
int dispatch(Precision p, F&& f) {
  return p == Precision::f32 ? f(float{}) : f(double{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gradgpt: a transformer with hand-written backward passes"};
  app.require_subcommand(1);

  ModelFlags train_model_flags;
  TrainFlags train_flags;
  auto* train = app.add_subcommand("train", "train a model on a text corpus");
  train_model_flags.add_to(train);
  train_flags.add_to(train, true);

  GenerateFlags gen;
  auto* generate_cmd = app.add_subcommand("generate", "sample text from a checkpoint");
  generate_cmd->add_option("--checkpoint", gen.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  generate_cmd->add_option("--adapter", gen.adapter, "LoRA adapter checkpoint")->check(CLI::ExistingFile);
  generate_cmd->add_option("--prompt", gen.prompt, "prompt text")->required();
  generate_cmd->add_option("--n-new", gen.n_new, "tokens to generate")->capture_default_str();
  generate_cmd->add_option("--strategy", gen.strategy, "greedy, temperature or top-k")->capture_default_str();
  generate_cmd->add_option("--temperature", gen.temperature, "softmax temperature")->capture_default_str();
  generate_cmd->add_option("--top-k", gen.top_k, "candidates kept by top-k")->capture_default_str();
  generate_cmd->add_option("--seed", gen.seed, "sampling seed")->capture_default_str();

  GradcheckFlags gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  gradcheck->add_option("--tolerance", gc.tolerance, "maximum relative error")->capture_default_str();
  gradcheck->add_option("--corrupt", gc.corrupt, "tensor whose analytic gradient is shifted (e.g. w_v)");
  gradcheck->add_option("--corrupt-amount", gc.corrupt_amount, "shift applied by --corrupt")->capture_default_str();
  gradcheck->add_option("--seed", gc.seed, "fixture seed")->capture_default_str();
  gradcheck->add_option("--scale", gc.scale, "fixture parameter std")->capture_default_str();
  gradcheck->add_option("--tokens", gc.tokens, "probe sequence")->capture_default_str();
  gradcheck->add_option("--format", gc.format, "table or kv")->capture_default_str();
  gradcheck->add_option("--oracle-precision", gc.oracle, "extended or f64")->capture_default_str();
  gradcheck->add_flag("--lora", gc.lora, "attach adapters at every point");
  gradcheck->add_flag("--weight-tying", gc.weight_tying, "tie the logits layer to the token table");

  ParamsFlags pf;
  auto* params = app.add_subcommand("params", "print the parameter breakdown");
  params->add_option("--preset", pf.preset, "gpt2-small or tiny")->capture_default_str();
  params->add_option("--n-blocks", pf.n_blocks, "transformer blocks")->capture_default_str();
  params->add_flag("--weight-tying", pf.weight_tying, "share the token table with the logits layer");
  params->add_flag("--lora", pf.lora, "report LoRA trainable parameters");
  pf.lora_flags.add_to(params);

  FinetuneFlags ff;
  auto* finetune = app.add_subcommand("finetune-lora", "train LoRA adapters on a frozen base checkpoint");
  finetune->add_option("--checkpoint", ff.checkpoint, "base checkpoint")->required()->check(CLI::ExistingFile);
  ff.train.add_to(finetune, false);
  ff.lora.add_to(finetune);

  CLI11_PARSE(app, argc, argv);

  try {
    const Precision prec = precision_from_env();
    if (train->parsed()) {
      return dispatch(prec, [&](auto t) { return run_train<decltype(t)>(train_model_flags, train_flags, prec); });
    }
    if (generate_cmd->parsed()) return dispatch(prec, [&](auto t) { return run_generate<decltype(t)>(gen); });
    if (gradcheck->parsed()) return dispatch(prec, [&](auto t) { return run_gradcheck<decltype(t)>(gc); });
    if (params->parsed()) return run_params(pf);
    if (finetune->parsed()) return dispatch(prec, [&](auto t) { return run_finetune<decltype(t)>(ff); });
  } catch (const TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
