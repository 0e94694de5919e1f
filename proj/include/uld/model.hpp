#pragma once

// Decoder-only transformer with pre-norm blocks, rotary or learned position
// encoding, low-rank adapters, and the prefix-assistant construction that
// reuses the first K layers of a frozen base model.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uld/errors.hpp"
#include "uld/rng.hpp"
#include "uld/tensor.hpp"

namespace uld {

enum class Positional { kRope, kLearned };

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 64;
  Positional positional = Positional::kRope;

  void validate() const {
    if (vocab_size < 2) throw ContractError("model config: vocab_size must be >= 2");
    if (n_layers < 1) throw ContractError("model config: n_layers must be >= 1");
    if (n_heads < 1 || d_model % n_heads != 0) {
      throw ContractError("model config: d_model must be divisible by n_heads");
    }
  }
};

inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
  j = nlohmann::ordered_json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                             {"n_layers", c.n_layers},     {"n_heads", c.n_heads},
                             {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
                             {"positional", c.positional == Positional::kRope ? "rope" : "learned"}};
}

inline void from_json(const nlohmann::ordered_json& j, ModelConfig& c) {
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.positional = j.at("positional").get<std::string>() == "learned" ? Positional::kLearned
                                                                    : Positional::kRope;
}

template <typename T>
struct LayerParams {
  Tensor<T> ln1_gain;               // [d]
  Tensor<T> wq, wk, wv, wo;         // [d, d]
  Tensor<T> ln2_gain;               // [d]
  Tensor<T> w1;                     // [d, d_ff]
  Tensor<T> w2;                     // [d_ff, d]
};

template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> embedding;      // [V, d]
  Tensor<T> pos_embedding;  // [max_seq_len, d], learned positions only
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_gain;     // [d]
  Tensor<T> head;           // [d, V]
};

inline constexpr double kInitStd = 0.08;

template <typename T>
ModelParams<T> init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const T std_dev = static_cast<T>(kInitStd);
  ModelParams<T> p;
  p.config = config;
  p.embedding = Tensor<T>::randn({v, d}, rng, std_dev);
  if (config.positional == Positional::kLearned) {
    p.pos_embedding = Tensor<T>::randn({static_cast<std::size_t>(config.max_seq_len), d}, rng, std_dev);
  }
  for (int l = 0; l < config.n_layers; ++l) {
    LayerParams<T> layer;
    layer.ln1_gain = Tensor<T>({d}, T(1));
    layer.wq = Tensor<T>::randn({d, d}, rng, std_dev);
    layer.wk = Tensor<T>::randn({d, d}, rng, std_dev);
    layer.wv = Tensor<T>::randn({d, d}, rng, std_dev);
    layer.wo = Tensor<T>::randn({d, d}, rng, std_dev);
    layer.ln2_gain = Tensor<T>({d}, T(1));
    layer.w1 = Tensor<T>::randn({d, ff}, rng, std_dev);
    layer.w2 = Tensor<T>::randn({ff, d}, rng, std_dev);
    p.layers.push_back(std::move(layer));
  }
  p.final_gain = Tensor<T>({d}, T(1));
  p.head = Tensor<T>::randn({d, v}, rng, std_dev);
  return p;
}

template <typename T, typename Fn>
void for_each_tensor(ModelParams<T>& p, Fn&& fn) {
  fn("embedding", p.embedding);
  if (p.pos_embedding.defined()) fn("pos_embedding", p.pos_embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    fn(prefix + "ln1_gain", p.layers[l].ln1_gain);
    fn(prefix + "wq", p.layers[l].wq);
    fn(prefix + "wk", p.layers[l].wk);
    fn(prefix + "wv", p.layers[l].wv);
    fn(prefix + "wo", p.layers[l].wo);
    fn(prefix + "ln2_gain", p.layers[l].ln2_gain);
    fn(prefix + "w1", p.layers[l].w1);
    fn(prefix + "w2", p.layers[l].w2);
  }
  fn("final_gain", p.final_gain);
  fn("head", p.head);
}

template <typename T, typename Fn>
void for_each_tensor(const ModelParams<T>& p, Fn&& fn) {
  for_each_tensor(const_cast<ModelParams<T>&>(p), std::forward<Fn>(fn));
}

template <typename T>
std::vector<Tensor<T>> all_tensors(const ModelParams<T>& p) {
  std::vector<Tensor<T>> out;
  for_each_tensor(p, [&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <typename T>
void set_trainable(ModelParams<T>& p, bool flag) {
  for_each_tensor(p, [&](const std::string&, Tensor<T>& t) { t.set_requires_grad(flag); });
}

template <typename T>
ModelParams<T> deep_copy(const ModelParams<T>& p) {
  ModelParams<T> out;
  out.config = p.config;
  out.embedding = p.embedding.clone();
  if (p.pos_embedding.defined()) out.pos_embedding = p.pos_embedding.clone();
  for (const auto& layer : p.layers) {
    LayerParams<T> l;
    l.ln1_gain = layer.ln1_gain.clone();
    l.wq = layer.wq.clone();
    l.wk = layer.wk.clone();
    l.wv = layer.wv.clone();
    l.wo = layer.wo.clone();
    l.ln2_gain = layer.ln2_gain.clone();
    l.w1 = layer.w1.clone();
    l.w2 = layer.w2.clone();
    out.layers.push_back(std::move(l));
  }
  out.final_gain = p.final_gain.clone();
  out.head = p.head.clone();
  return out;
}

// ---------------------------------------------------------------------------
// low-rank adapters

template <typename T>
struct LoraAdapter {
  int rank = 0;
  T alpha = T(0);
  Tensor<T> a;  // [d_in, r]
  Tensor<T> b;  // [r, d_out], zero-initialized so the initial update vanishes

  static LoraAdapter make(std::size_t d_in, std::size_t d_out, int rank, T alpha, Rng& rng) {
    if (rank < 1) throw ContractError("lora adapter: rank must be >= 1");
    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.a = Tensor<T>::randn({d_in, static_cast<std::size_t>(rank)}, rng, static_cast<T>(kInitStd));
    ad.b = Tensor<T>({static_cast<std::size_t>(rank), d_out}, T(0));
    return ad;
  }
};

template <typename T>
struct LayerAdapters {
  LoraAdapter<T> wq, wk, wv, wo, w1, w2;
};

// Frozen K-layer prefix of a target model plus the trainable adapters. Shares
// the target's embedding, layers 1..K, final norm, and head by reference.
template <typename T>
struct AssistantModel {
  std::shared_ptr<const ModelParams<T>> target;
  int prefix_layers = 0;  // K
  int rank = 0;
  T lora_alpha = T(0);
  std::vector<LayerAdapters<T>> adapters;  // one per prefix layer
};

template <typename T>
AssistantModel<T> build_assistant(std::shared_ptr<const ModelParams<T>> target, int prefix_layers,
                                  int rank, T alpha, std::uint64_t seed = 0) {
  const int total_layers = target->config.n_layers;
  if (prefix_layers < 1 || prefix_layers >= total_layers) {
    throw ContractError("build_assistant: prefix depth must satisfy 1 <= K < n_layers");
  }
  for_each_tensor(*target, [](const std::string& name, const Tensor<T>& t) {
    if (t.requires_grad()) {
      throw ContractError("build_assistant: target tensor '" + name + "' is not frozen");
    }
  });
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(target->config.d_model);
  const auto ff = static_cast<std::size_t>(target->config.d_ff);
  AssistantModel<T> assistant;
  assistant.target = std::move(target);
  assistant.prefix_layers = prefix_layers;
  assistant.rank = rank;
  assistant.lora_alpha = alpha;
  for (int l = 0; l < prefix_layers; ++l) {
    LayerAdapters<T> ad;
    ad.wq = LoraAdapter<T>::make(d, d, rank, alpha, rng);
    ad.wk = LoraAdapter<T>::make(d, d, rank, alpha, rng);
    ad.wv = LoraAdapter<T>::make(d, d, rank, alpha, rng);
    ad.wo = LoraAdapter<T>::make(d, d, rank, alpha, rng);
    ad.w1 = LoraAdapter<T>::make(d, ff, rank, alpha, rng);
    ad.w2 = LoraAdapter<T>::make(ff, d, rank, alpha, rng);
    assistant.adapters.push_back(std::move(ad));
  }
  return assistant;
}

template <typename T, typename Fn>
void for_each_adapter_tensor(AssistantModel<T>& assistant, Fn&& fn) {
  for (std::size_t l = 0; l < assistant.adapters.size(); ++l) {
    const std::string prefix = "layers." + std::to_string(l) + ".";
    auto visit = [&](const char* name, LoraAdapter<T>& ad) {
      fn(prefix + name + ".lora_a", ad.a);
      fn(prefix + name + ".lora_b", ad.b);
    };
    visit("wq", assistant.adapters[l].wq);
    visit("wk", assistant.adapters[l].wk);
    visit("wv", assistant.adapters[l].wv);
    visit("wo", assistant.adapters[l].wo);
    visit("w1", assistant.adapters[l].w1);
    visit("w2", assistant.adapters[l].w2);
  }
}

template <typename T>
std::vector<Tensor<T>> adapter_tensors(AssistantModel<T>& assistant) {
  std::vector<Tensor<T>> out;
  for_each_adapter_tensor(assistant, [&](const std::string&, Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <typename T>
void set_adapters_trainable(AssistantModel<T>& assistant, bool flag) {
  for_each_adapter_tensor(assistant,
                          [&](const std::string&, Tensor<T>& t) { t.set_requires_grad(flag); });
}

// Number of scalar parameters currently marked trainable.
template <typename T>
long long count_trainable(const ModelParams<T>& p) {
  long long n = 0;
  for_each_tensor(p, [&](const std::string&, const Tensor<T>& t) {
    if (t.requires_grad()) n += static_cast<long long>(t.numel());
  });
  return n;
}

template <typename T>
long long count_trainable(const AssistantModel<T>& assistant) {
  long long n = 0;
  for_each_adapter_tensor(const_cast<AssistantModel<T>&>(assistant),
                          [&](const std::string&, Tensor<T>& t) {
                            if (t.requires_grad()) n += static_cast<long long>(t.numel());
                          });
  return n;
}

template <typename T>
long long count_total(const ModelParams<T>& p) {
  long long n = 0;
  for_each_tensor(p, [&](const std::string&, const Tensor<T>& t) {
    n += static_cast<long long>(t.numel());
  });
  return n;
}

// ---------------------------------------------------------------------------
// forward pass

namespace detail {

template <typename T>
Tensor<T> apply_linear(const Tensor<T>& x, const Tensor<T>& w, const LoraAdapter<T>* lora) {
  Tensor<T> y = matmul(x, w);
  if (lora != nullptr) {
    const T s = lora->alpha / static_cast<T>(lora->rank);
    y = add(y, scale(matmul(matmul(x, lora->a), lora->b), s));
  }
  return y;
}

template <typename T>
Tensor<T> forward_prefix(const ModelParams<T>& p, const std::vector<LayerAdapters<T>>* adapters,
                         int n_layers, std::span<const int> tokens) {
  const auto& cfg = p.config;
  if (tokens.empty()) throw ContractError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw ContractError("forward: sequence exceeds max_seq_len");
  }
  for (int t : tokens) {
    if (t < 0 || t >= cfg.vocab_size) throw std::out_of_range("forward: token id out of range");
  }
  const auto n_heads = static_cast<std::size_t>(cfg.n_heads);
  const std::size_t head_dim = static_cast<std::size_t>(cfg.d_model) / n_heads;
  const T att_scale = T(1) / std::sqrt(static_cast<T>(head_dim));

  Tensor<T> x = embedding_lookup(p.embedding, tokens);
  if (cfg.positional == Positional::kLearned) {
    std::vector<int> positions(tokens.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
    x = add(x, embedding_lookup(p.pos_embedding, positions));
  }
  for (int l = 0; l < n_layers; ++l) {
    const LayerParams<T>& layer = p.layers[static_cast<std::size_t>(l)];
    const LayerAdapters<T>* ad = adapters ? &(*adapters)[static_cast<std::size_t>(l)] : nullptr;

    Tensor<T> h = rms_norm(x, layer.ln1_gain);
    Tensor<T> q = apply_linear(h, layer.wq, ad ? &ad->wq : nullptr);
    Tensor<T> k = apply_linear(h, layer.wk, ad ? &ad->wk : nullptr);
    Tensor<T> v = apply_linear(h, layer.wv, ad ? &ad->wv : nullptr);
    if (cfg.positional == Positional::kRope) {
      q = rope(q, n_heads);
      k = rope(k, n_heads);
    }
    std::vector<Tensor<T>> contexts;
    contexts.reserve(n_heads);
    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      Tensor<T> qh = slice_cols(q, hd * head_dim, head_dim);
      Tensor<T> kh = slice_cols(k, hd * head_dim, head_dim);
      Tensor<T> vh = slice_cols(v, hd * head_dim, head_dim);
      Tensor<T> probs = softmax(causal_mask(scale(matmul_nt(qh, kh), att_scale)));
      contexts.push_back(matmul(probs, vh));
    }
    Tensor<T> attn_out =
        apply_linear(concat_cols(contexts), layer.wo, ad ? &ad->wo : nullptr);
    x = add(x, attn_out);

    Tensor<T> h2 = rms_norm(x, layer.ln2_gain);
    Tensor<T> up = silu(apply_linear(h2, layer.w1, ad ? &ad->w1 : nullptr));
    Tensor<T> mlp_out = apply_linear(up, layer.w2, ad ? &ad->w2 : nullptr);
    x = add(x, mlp_out);
  }
  return matmul(rms_norm(x, p.final_gain), p.head);
}

}  // namespace detail

// Causal next-token logits [T x V] from the full model.
template <typename T>
Tensor<T> forward_logits(const ModelParams<T>& p, std::span<const int> tokens) {
  const std::vector<LayerAdapters<T>>* no_adapters = nullptr;
  return detail::forward_prefix(p, no_adapters, p.config.n_layers, tokens);
}

// Logits from the adapted K-layer prefix plus the shared norm and head.
template <typename T>
Tensor<T> assistant_forward(const AssistantModel<T>& assistant, std::span<const int> tokens) {
  return detail::forward_prefix(*assistant.target, &assistant.adapters, assistant.prefix_layers,
                                tokens);
}

// Sum of next-token log-probabilities of `answer` given `prompt`, under any
// callable producing [T x V] logits. Never differentiates.
template <typename T, typename LogitsFn>
double sequence_logprob(LogitsFn&& logits_fn, std::span<const int> prompt,
                        std::span<const int> answer) {
  if (answer.empty()) throw ContractError("sequence_logprob: empty answer");
  if (prompt.empty()) throw ContractError("sequence_logprob: empty prompt");
  std::vector<int> tokens(prompt.begin(), prompt.end());
  tokens.insert(tokens.end(), answer.begin(), answer.end());
  typename Tape<T>::Scope no_grad(nullptr);
  Tensor<T> logits = logits_fn(std::span<const int>(tokens));
  const std::size_t vocab = logits.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < answer.size(); ++i) {
    if (answer[i] < 0 || static_cast<std::size_t>(answer[i]) >= vocab) {
      throw std::out_of_range("sequence_logprob: answer token out of range");
    }
    const std::size_t pos = prompt.size() + i - 1;  // row predicting answer[i]
    const T* row = logits.data() + pos * vocab;
    const T lse = detail::row_logsumexp(row, vocab);
    total += static_cast<double>(row[static_cast<std::size_t>(answer[i])] - lse);
  }
  return total;
}

// ---------------------------------------------------------------------------
// checkpoints
//
// Little-endian container. Full model: magic "ULDC". Assistant: magic "ULDA",
// config block carries {prefix_layers, rank, alpha} and only adapter tensors
// follow. Layout: magic, u32 version, u32 json length + bytes, u32 tensor
// count, then per tensor: u16 name length, name, u8 dtype (0 = f32), u8 rank,
// u64 dims, raw data.

namespace detail {

constexpr std::uint32_t kCheckpointVersion = 1;

class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open checkpoint for writing: " + path, 0);
  }
  void bytes(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  }
  template <typename U>
  void pod(U v) {
    bytes(&v, sizeof(U));
  }
  void finish() {
    out_.flush();
    if (!out_) throw FormatError("checkpoint write failed", 0);
  }

 private:
  std::ofstream out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : in_(path, std::ios::binary) {
    if (!in_) throw FormatError("cannot open checkpoint: " + path, 0);
  }
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError("truncated checkpoint", offset_);
    }
    offset_ += n;
  }
  template <typename U>
  U pod() {
    U v;
    bytes(&v, sizeof(U));
    return v;
  }
  std::size_t offset() const { return offset_; }

 private:
  std::ifstream in_;
  std::size_t offset_ = 0;
};

inline void write_tensor_f32(ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  w.pod<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.pod<std::uint8_t>(0);  // dtype f32
  w.pod<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) w.pod<std::uint64_t>(static_cast<std::uint64_t>(d));
  w.bytes(t.data(), t.numel() * sizeof(float));
}

inline std::pair<std::string, Tensor<float>> read_tensor_f32(ByteReader& r) {
  const auto name_len = r.pod<std::uint16_t>();
  std::string name(name_len, '\0');
  r.bytes(name.data(), name_len);
  const auto dtype = r.pod<std::uint8_t>();
  if (dtype != 0) throw FormatError("unsupported dtype code " + std::to_string(dtype), r.offset() - 1);
  const auto rank = r.pod<std::uint8_t>();
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(r.pod<std::uint64_t>());
  Tensor<float> t(shape);
  r.bytes(t.data(), t.numel() * sizeof(float));
  return {std::move(name), std::move(t)};
}

inline nlohmann::ordered_json read_header(ByteReader& r, const char* expected_magic) {
  char magic[4];
  r.bytes(magic, 4);
  if (std::string(magic, 4) != expected_magic) throw FormatError("bad checkpoint magic", 0);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const auto json_len = r.pod<std::uint32_t>();
  std::string json_text(json_len, '\0');
  r.bytes(json_text.data(), json_len);
  auto parsed = nlohmann::ordered_json::parse(json_text, nullptr, false);
  if (parsed.is_discarded()) throw FormatError("malformed checkpoint config block", 12);
  return parsed;
}

inline void write_header(ByteWriter& w, const char* magic, const nlohmann::ordered_json& config) {
  w.bytes(magic, 4);
  w.pod<std::uint32_t>(kCheckpointVersion);
  const std::string json_text = config.dump();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(json_text.size()));
  w.bytes(json_text.data(), json_text.size());
}

}  // namespace detail

inline void save_checkpoint(const ModelParams<float>& params, const std::string& path) {
  detail::ByteWriter w(path);
  nlohmann::ordered_json config;
  to_json(config, params.config);
  detail::write_header(w, "ULDC", config);
  std::uint32_t count = 0;
  for_each_tensor(params, [&](const std::string&, const Tensor<float>&) { ++count; });
  w.pod<std::uint32_t>(count);
  for_each_tensor(params, [&](const std::string& name, const Tensor<float>& t) {
    detail::write_tensor_f32(w, name, t);
  });
  w.finish();
}

inline ModelParams<float> load_checkpoint(const std::string& path) {
  detail::ByteReader r(path);
  const auto config_json = detail::read_header(r, "ULDC");
  ModelConfig config;
  from_json(config_json, config);
  ModelParams<float> params = init_params<float>(config, 0);
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, tensor] = detail::read_tensor_f32(r);
    bool placed = false;
    for_each_tensor(params, [&](const std::string& field, Tensor<float>& dst) {
      if (field == name) {
        if (dst.shape() != tensor.shape()) {
          throw FormatError("tensor '" + name + "' has unexpected shape", r.offset());
        }
        dst.values() = tensor.values();
        placed = true;
      }
    });
    if (!placed) throw FormatError("unknown tensor name '" + name + "'", r.offset());
  }
  return params;
}

inline void save_assistant(const AssistantModel<float>& assistant, const std::string& path) {
  detail::ByteWriter w(path);
  nlohmann::ordered_json config{{"prefix_layers", assistant.prefix_layers},
                                {"rank", assistant.rank},
                                {"alpha", assistant.lora_alpha}};
  detail::write_header(w, "ULDA", config);
  std::uint32_t count = 0;
  for_each_adapter_tensor(const_cast<AssistantModel<float>&>(assistant),
                          [&](const std::string&, Tensor<float>&) { ++count; });
  w.pod<std::uint32_t>(count);
  for_each_adapter_tensor(const_cast<AssistantModel<float>&>(assistant),
                          [&](const std::string& name, Tensor<float>& t) {
                            detail::write_tensor_f32(w, name, t);
                          });
  w.finish();
}

inline AssistantModel<float> load_assistant(const std::string& path,
                                            std::shared_ptr<const ModelParams<float>> target) {
  detail::ByteReader r(path);
  const auto config = detail::read_header(r, "ULDA");
  AssistantModel<float> assistant =
      build_assistant<float>(std::move(target), config.at("prefix_layers").get<int>(),
                             config.at("rank").get<int>(), config.at("alpha").get<float>());
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, tensor] = detail::read_tensor_f32(r);
    bool placed = false;
    for_each_adapter_tensor(assistant, [&](const std::string& field, Tensor<float>& dst) {
      if (field == name) {
        if (dst.shape() != tensor.shape()) {
          throw FormatError("tensor '" + name + "' has unexpected shape", r.offset());
        }
        dst.values() = tensor.values();
        placed = true;
      }
    });
    if (!placed) throw FormatError("unknown tensor name '" + name + "'", r.offset());
  }
  return assistant;
}

// FNV-1a over the raw bytes of every tensor, for cheap frozen-base checks.
template <typename T>
std::uint64_t fingerprint(const ModelParams<T>& params) {
  std::uint64_t hash = 1469598103934665603ull;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash ^= bytes[i];
      hash *= 1099511628211ull;
    }
  };
  for_each_tensor(params, [&](const std::string&, const Tensor<T>& t) {
    mix(t.data(), t.numel() * sizeof(T));
  });
  return hash;
}

}  // namespace uld
