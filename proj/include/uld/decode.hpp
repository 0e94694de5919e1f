#pragma once

// Inference-time logit arithmetic: the target-minus-assistant subtraction
// with plausibility filtering, the offset composition, greedy decoding,
// sequence scoring, and perplexity.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "uld/data.hpp"
#include "uld/errors.hpp"
#include "uld/model.hpp"
#include "uld/tensor.hpp"

namespace uld {

enum class CombineMode { kIdentity, kUld, kOffset };

struct CombinerConfig {
  CombineMode mode = CombineMode::kIdentity;
  double alpha = 0.75;      // subtraction / offset weight
  double filter_rate = 1e-2;  // plausibility threshold in (0, 1]

  void validate() const {
    if (alpha < 0.0) throw ContractError("combiner: alpha must be >= 0");
    if (!(filter_rate > 0.0) || filter_rate > 1.0) {
      throw ContractError("combiner: filter_rate must lie in (0, 1]");
    }
  }
};

inline const char* combine_mode_name(CombineMode m) {
  switch (m) {
    case CombineMode::kIdentity: return "identity";
    case CombineMode::kUld: return "uld";
    case CombineMode::kOffset: return "offset";
  }
  return "identity";
}

inline CombineMode combine_mode_from(const std::string& s) {
  if (s == "identity") return CombineMode::kIdentity;
  if (s == "uld") return CombineMode::kUld;
  if (s == "offset") return CombineMode::kOffset;
  throw ConfigError("unknown combine mode '" + s + "'");
}

// Tokens whose target probability falls below filter_rate * max survive the
// subtraction; everything else becomes -inf and can never be decoded.
template <typename T>
Tensor<T> combine_logits(const Tensor<T>& target, const Tensor<T>& assistant,
                         const CombinerConfig& cfg) {
  cfg.validate();
  if (target.rank() != 1 || assistant.rank() != 1 || target.shape() != assistant.shape()) {
    throw ContractError("combine_logits: vocabulary mismatch");
  }
  const std::size_t vocab = target.shape()[0];
  // p(y) >= filter_rate * max p  <=>  logit(y) >= max logit + log(filter_rate)
  T max_logit = target[0];
  for (std::size_t i = 1; i < vocab; ++i) max_logit = std::max(max_logit, target[i]);
  const T cutoff = max_logit + static_cast<T>(std::log(cfg.filter_rate));
  Tensor<T> out(target.shape());
  const T alpha = static_cast<T>(cfg.alpha);
  for (std::size_t i = 0; i < vocab; ++i) {
    out[i] = target[i] >= cutoff ? target[i] - alpha * assistant[i]
                                 : -std::numeric_limits<T>::infinity();
  }
  return out;
}

// log p_f = log p_target + alpha (log p_assistant - log p_reference),
// renormalized to proper log-probabilities.
template <typename T>
Tensor<T> offset_combine(const Tensor<T>& target, const Tensor<T>& assistant,
                         const Tensor<T>& reference_assistant, T alpha) {
  if (target.rank() != 1 || target.shape() != assistant.shape() ||
      target.shape() != reference_assistant.shape()) {
    throw ContractError("offset_combine: vocabulary mismatch");
  }
  typename Tape<T>::Scope no_grad(nullptr);
  Tensor<T> z = add(log_softmax(target),
                    scale(sub(log_softmax(assistant), log_softmax(reference_assistant)), alpha));
  return log_softmax(z);
}

namespace detail {

template <typename T>
Tensor<T> row_of(const Tensor<T>& matrix, std::size_t row) {
  const std::size_t cols = matrix.cols();
  std::vector<T> data(matrix.data() + row * cols, matrix.data() + (row + 1) * cols);
  return Tensor<T>({cols}, std::move(data));
}

}  // namespace detail

// A model under a combiner: identity (target only), the subtraction combiner
// (target, assistant), or the offset composition (target, fine-tuned
// assistant, untouched assistant). Pure scoring interface, no gradients.
template <typename T>
class CombinedModel {
 public:
  using LogitsFn = std::function<Tensor<T>(std::span<const int>)>;

  static CombinedModel identity(LogitsFn target) {
    CombinedModel m;
    m.cfg_.mode = CombineMode::kIdentity;
    m.target_ = std::move(target);
    return m;
  }

  static CombinedModel uld(LogitsFn target, LogitsFn assistant, const CombinerConfig& cfg) {
    cfg.validate();
    CombinedModel m;
    m.cfg_ = cfg;
    m.cfg_.mode = CombineMode::kUld;
    m.target_ = std::move(target);
    m.assistant_ = std::move(assistant);
    return m;
  }

  static CombinedModel offset(LogitsFn target, LogitsFn assistant, LogitsFn reference,
                              const CombinerConfig& cfg) {
    cfg.validate();
    CombinedModel m;
    m.cfg_ = cfg;
    m.cfg_.mode = CombineMode::kOffset;
    m.target_ = std::move(target);
    m.assistant_ = std::move(assistant);
    m.reference_ = std::move(reference);
    return m;
  }

  const CombinerConfig& config() const { return cfg_; }

  // Decoding view: one combined logit row per position; filtered tokens are
  // -inf under the subtraction combiner.
  std::vector<Tensor<T>> decode_rows(std::span<const int> tokens) const {
    typename Tape<T>::Scope no_grad(nullptr);
    Tensor<T> zt = target_(tokens);
    std::vector<Tensor<T>> rows;
    rows.reserve(zt.rows());
    if (cfg_.mode == CombineMode::kIdentity) {
      for (std::size_t r = 0; r < zt.rows(); ++r) rows.push_back(detail::row_of(zt, r));
      return rows;
    }
    Tensor<T> za = assistant_(tokens);
    if (cfg_.mode == CombineMode::kUld) {
      for (std::size_t r = 0; r < zt.rows(); ++r) {
        rows.push_back(combine_logits(detail::row_of(zt, r), detail::row_of(za, r), cfg_));
      }
      return rows;
    }
    Tensor<T> za0 = reference_(tokens);
    for (std::size_t r = 0; r < zt.rows(); ++r) {
      rows.push_back(offset_combine(detail::row_of(zt, r), detail::row_of(za, r),
                                    detail::row_of(za0, r), static_cast<T>(cfg_.alpha)));
    }
    return rows;
  }

  // Scoring view: normalized log-probabilities per position. The filter is a
  // decoding device, not a probability model: tokens it removes are scored
  // from the unfiltered subtraction instead of receiving -inf.
  std::vector<std::vector<T>> score_rows(std::span<const int> tokens) const {
    typename Tape<T>::Scope no_grad(nullptr);
    Tensor<T> zt = target_(tokens);
    const std::size_t vocab = zt.cols();
    std::vector<std::vector<T>> rows;
    rows.reserve(zt.rows());
    if (cfg_.mode == CombineMode::kIdentity) {
      Tensor<T> lp = log_softmax(zt);
      for (std::size_t r = 0; r < zt.rows(); ++r) {
        rows.emplace_back(lp.data() + r * vocab, lp.data() + (r + 1) * vocab);
      }
      return rows;
    }
    Tensor<T> za = assistant_(tokens);
    if (cfg_.mode == CombineMode::kUld) {
      for (std::size_t r = 0; r < zt.rows(); ++r) {
        std::vector<T> raw(vocab);
        for (std::size_t c = 0; c < vocab; ++c) {
          raw[c] = zt.at(r, c) - static_cast<T>(cfg_.alpha) * za.at(r, c);
        }
        const T lse = detail::row_logsumexp(raw.data(), vocab);
        for (auto& v : raw) v -= lse;
        rows.push_back(std::move(raw));
      }
      return rows;
    }
    Tensor<T> za0 = reference_(tokens);
    for (std::size_t r = 0; r < zt.rows(); ++r) {
      Tensor<T> lp = offset_combine(detail::row_of(zt, r), detail::row_of(za, r),
                                    detail::row_of(za0, r), static_cast<T>(cfg_.alpha));
      rows.emplace_back(lp.data(), lp.data() + vocab);
    }
    return rows;
  }

  // Sum of combined log-probabilities of `answer` given `prompt`.
  double sequence_logprob(std::span<const int> prompt, std::span<const int> answer) const {
    if (answer.empty()) throw ContractError("sequence_logprob: empty answer");
    if (prompt.empty()) throw ContractError("sequence_logprob: empty prompt");
    std::vector<int> tokens(prompt.begin(), prompt.end());
    tokens.insert(tokens.end(), answer.begin(), answer.end());
    const auto rows = score_rows(tokens);
    double total = 0.0;
    for (std::size_t i = 0; i < answer.size(); ++i) {
      total += static_cast<double>(rows[prompt.size() + i - 1][static_cast<std::size_t>(answer[i])]);
    }
    return total;
  }

 private:
  CombinerConfig cfg_;
  LogitsFn target_;
  LogitsFn assistant_;
  LogitsFn reference_;
};

template <typename T>
CombinedModel<T> model_source(const ModelParams<T>& params) {
  return CombinedModel<T>::identity(
      [&params](std::span<const int> tokens) { return forward_logits(params, tokens); });
}

template <typename T>
CombinedModel<T> uld_source(const ModelParams<T>& target, const AssistantModel<T>& assistant,
                            const CombinerConfig& cfg) {
  return CombinedModel<T>::uld(
      [&target](std::span<const int> tokens) { return forward_logits(target, tokens); },
      [&assistant](std::span<const int> tokens) { return assistant_forward(assistant, tokens); },
      cfg);
}

template <typename T>
CombinedModel<T> offset_source(const ModelParams<T>& target, const ModelParams<T>& assistant,
                               const ModelParams<T>& reference, const CombinerConfig& cfg) {
  return CombinedModel<T>::offset(
      [&target](std::span<const int> tokens) { return forward_logits(target, tokens); },
      [&assistant](std::span<const int> tokens) { return forward_logits(assistant, tokens); },
      [&reference](std::span<const int> tokens) { return forward_logits(reference, tokens); },
      cfg);
}

// ---------------------------------------------------------------------------
// decoding

struct DecodeResult {
  std::vector<int> tokens;  // generated continuation, <eos> excluded
  enum class Stop { kEos, kMaxLength } stop = Stop::kMaxLength;
};

// Greedy decoding over the combined logits; ties break toward the lowest
// token id. Stops at <eos> or after max_new tokens.
template <typename T>
DecodeResult greedy_decode(const CombinedModel<T>& model, std::span<const int> prompt,
                           int max_new, int eos_id = Tokenizer::kEos) {
  if (prompt.empty()) throw ContractError("greedy_decode: empty prompt");
  std::vector<int> tokens(prompt.begin(), prompt.end());
  DecodeResult result;
  for (int step = 0; step < max_new; ++step) {
    const auto rows = model.decode_rows(tokens);
    const Tensor<T>& last = rows.back();
    std::size_t best = 0;
    for (std::size_t c = 1; c < last.numel(); ++c) {
      if (last[c] > last[best]) best = c;
    }
    const int next = static_cast<int>(best);
    if (next == eos_id) {
      result.stop = DecodeResult::Stop::kEos;
      return result;
    }
    result.tokens.push_back(next);
    tokens.push_back(next);
  }
  result.stop = DecodeResult::Stop::kMaxLength;
  return result;
}

// exp(mean next-token negative log-likelihood) under the combined scores.
template <typename T>
double perplexity(const CombinedModel<T>& model, std::span<const int> tokens) {
  if (tokens.size() < 2) throw ContractError("perplexity: need at least two tokens");
  const auto rows = model.score_rows(tokens);
  double nll = 0.0;
  for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
    nll -= static_cast<double>(rows[i][static_cast<std::size_t>(tokens[i + 1])]);
  }
  return std::exp(nll / static_cast<double>(tokens.size() - 1));
}

// ---------------------------------------------------------------------------
// scoring dump consumed by the evaluation suite

struct ScoredExample {
  int id = -1;
  std::string split;
  std::string prompt;
  std::string reference;
  std::string generation;
  double true_logprob = 0.0;
  std::vector<double> paraphrased_logprobs;
  std::vector<double> perturbed_logprobs;
};

template <typename T>
ScoredExample score_example(const CombinedModel<T>& model, const Tokenizer& tok, const QaPair& qa,
                            const std::string& split, int max_new_tokens) {
  ScoredExample ex;
  ex.id = qa.id;
  ex.split = split;
  ex.prompt = qa.question;
  ex.reference = qa.answer;

  std::vector<int> prompt{Tokenizer::kBos};
  for (int t : tok.encode(qa.question)) prompt.push_back(t);
  ex.generation = tok.decode(greedy_decode(model, prompt, max_new_tokens).tokens);

  auto lp = [&](const std::string& answer) {
    return model.sequence_logprob(prompt, tok.encode(answer));
  };
  ex.true_logprob = lp(qa.answer);
  for (const auto& a : qa.paraphrased_answers) ex.paraphrased_logprobs.push_back(lp(a));
  for (const auto& a : qa.perturbed_answers) ex.perturbed_logprobs.push_back(lp(a));
  return ex;
}

template <typename T>
std::vector<ScoredExample> score_split(const CombinedModel<T>& model, const Tokenizer& tok,
                                       const Corpus& corpus, const std::vector<int>& ids,
                                       const std::string& split, int max_new_tokens) {
  std::vector<ScoredExample> out;
  out.reserve(ids.size());
  for (int id : ids) {
    out.push_back(score_example(model, tok, corpus.qa(id), split, max_new_tokens));
  }
  return out;
}

inline nlohmann::ordered_json scored_example_to_json(const ScoredExample& ex) {
  return nlohmann::ordered_json{
      {"id", ex.id},
      {"split", ex.split},
      {"prompt", ex.prompt},
      {"reference", ex.reference},
      {"generation", ex.generation},
      {"answer_logprobs",
       nlohmann::ordered_json{{"true", ex.true_logprob},
                              {"paraphrased", ex.paraphrased_logprobs},
                              {"perturbed", ex.perturbed_logprobs}}}};
}

inline ScoredExample scored_example_from_json(const nlohmann::ordered_json& j) {
  ScoredExample ex;
  ex.id = j.at("id").get<int>();
  ex.split = j.at("split").get<std::string>();
  ex.prompt = j.at("prompt").get<std::string>();
  ex.reference = j.at("reference").get<std::string>();
  ex.generation = j.at("generation").get<std::string>();
  const auto& lp = j.at("answer_logprobs");
  ex.true_logprob = lp.at("true").get<double>();
  ex.paraphrased_logprobs = lp.at("paraphrased").get<std::vector<double>>();
  ex.perturbed_logprobs = lp.at("perturbed").get<std::vector<double>>();
  return ex;
}

inline void write_score_dump(const std::vector<ScoredExample>& examples, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open score dump for writing: " + path);
  for (const auto& ex : examples) out << scored_example_to_json(ex).dump() << '\n';
}

inline std::vector<ScoredExample> read_score_dump(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open score dump: " + path);
  std::vector<ScoredExample> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(scored_example_from_json(nlohmann::ordered_json::parse(line)));
  }
  return out;
}

}  // namespace uld
