#pragma once

// Every unlearning objective: gradient-ascent, preference losses (DPO/NPO),
// retain regularizers (GD/KL), their weighted combinations, the reversed
// assistant objective, and the offset-composition objective.
//
// Loss functions are generic over a callable producing [T x V] logits for a
// token sequence, so the same code path serves a full model, an adapted
// prefix, or a logit composition.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "uld/data.hpp"
#include "uld/errors.hpp"
#include "uld/model.hpp"
#include "uld/tensor.hpp"

namespace uld {

enum class ForgetKind { kGa, kDpo, kNpo };
enum class RetainKind { kNone, kGd, kKl };

// Parsed method tag, e.g. "ga+kl", "npo", "offset-dpo+gd", "uld".
struct MethodTag {
  bool uld = false;
  bool offset = false;
  ForgetKind forget = ForgetKind::kGa;
  RetainKind retain = RetainKind::kNone;
  std::string text;

  static MethodTag parse(std::string tag) {
    MethodTag m;
    m.text = tag;
    for (auto& c : tag) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (tag == "uld") {
      m.uld = true;
      return m;
    }
    std::string rest = tag;
    if (rest.rfind("offset-", 0) == 0) {
      m.offset = true;
      rest = rest.substr(7);
    }
    std::string forget_part = rest;
    std::string retain_part;
    if (auto plus = rest.find('+'); plus != std::string::npos) {
      forget_part = rest.substr(0, plus);
      retain_part = rest.substr(plus + 1);
    }
    if (forget_part == "ga") {
      m.forget = ForgetKind::kGa;
    } else if (forget_part == "dpo") {
      m.forget = ForgetKind::kDpo;
    } else if (forget_part == "npo") {
      m.forget = ForgetKind::kNpo;
    } else {
      throw ConfigError("unknown method tag '" + m.text + "'");
    }
    if (retain_part.empty()) {
      m.retain = RetainKind::kNone;
    } else if (retain_part == "gd") {
      m.retain = RetainKind::kGd;
    } else if (retain_part == "kl") {
      m.retain = RetainKind::kKl;
    } else {
      throw ConfigError("unknown method tag '" + m.text + "'");
    }
    return m;
  }
};

struct LossConfig {
  std::string method = "uld";
  double retain_weight = 1.0;      // weight on the retain term
  double preference_beta = 0.1;    // beta inside DPO/NPO
  bool length_normalize_preference = false;  // divide answer log-probs by length
};

// One QA example ready for the model: prompt tokens (with <bos>) and answer
// tokens (with <eos>). The loss mask covers exactly the answer span.
struct Batch {
  enum class Source { kForget, kRetain, kIdk };
  std::vector<int> prompt;
  std::vector<int> answer;
  Source source = Source::kForget;

  std::vector<int> full() const {
    std::vector<int> tokens = prompt;
    tokens.insert(tokens.end(), answer.begin(), answer.end());
    return tokens;
  }

  // Per-logit-row target ids; -1 marks rows outside the answer span.
  std::vector<int> targets() const {
    const std::size_t total = prompt.size() + answer.size();
    std::vector<int> t(total, -1);
    for (std::size_t i = 0; i < answer.size(); ++i) t[prompt.size() + i - 1] = answer[i];
    return t;
  }

  std::vector<bool> answer_mask() const {
    const std::size_t total = prompt.size() + answer.size();
    std::vector<bool> m(total, false);
    for (std::size_t i = 0; i < answer.size(); ++i) m[prompt.size() + i - 1] = true;
    return m;
  }

  std::size_t mask_count() const { return answer.size(); }
};

inline Batch make_batch(const Tokenizer& tok, const std::string& question,
                        const std::string& answer, Batch::Source source) {
  Batch b;
  b.prompt.push_back(Tokenizer::kBos);
  for (int t : tok.encode(question)) b.prompt.push_back(t);
  b.answer = tok.encode(answer);
  b.answer.push_back(Tokenizer::kEos);
  b.source = source;
  return b;
}

inline std::vector<Batch> make_batches(const Tokenizer& tok, const std::vector<QaText>& items,
                                       Batch::Source source) {
  std::vector<Batch> out;
  out.reserve(items.size());
  for (const auto& item : items) out.push_back(make_batch(tok, item.question, item.answer, source));
  return out;
}

namespace detail {

// Mean over batch items of the per-item mean masked cross entropy.
template <typename T, typename LogitsFn>
Tensor<T> mean_masked_ce(LogitsFn&& logits_fn, std::span<const Batch> batch) {
  if (batch.empty()) throw ContractError("loss: empty batch");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (const Batch& item : batch) {
    const auto tokens = item.full();
    Tensor<T> logits = logits_fn(std::span<const int>(tokens));
    Tensor<T> ce = masked_ce_sum(logits, item.targets());
    total = add(total, scale(ce, T(1) / static_cast<T>(item.mask_count())));
  }
  return scale(total, T(1) / static_cast<T>(batch.size()));
}

// Answer log-probability (sum over the masked span) as a taped scalar.
template <typename T, typename LogitsFn>
Tensor<T> answer_logprob(LogitsFn&& logits_fn, const Batch& item, bool length_normalize) {
  const auto tokens = item.full();
  Tensor<T> logits = logits_fn(std::span<const int>(tokens));
  Tensor<T> lp = neg(masked_ce_sum(logits, item.targets()));
  if (length_normalize) lp = scale(lp, T(1) / static_cast<T>(item.mask_count()));
  return lp;
}

}  // namespace detail

// Mean answer-token log-probability, to be minimized: the gradient-ascent
// forget objective. Unbounded below by construction.
template <typename T, typename LogitsFn>
Tensor<T> loss_ga(LogitsFn&& logits_fn, std::span<const Batch> batch) {
  return neg(detail::mean_masked_ce<T>(logits_fn, batch));
}

// Plain retain cross entropy.
template <typename T, typename LogitsFn>
Tensor<T> loss_gd(LogitsFn&& logits_fn, std::span<const Batch> batch) {
  return detail::mean_masked_ce<T>(logits_fn, batch);
}

// Token-averaged KL(model || reference) over the answer span.
template <typename T, typename ModelFn, typename RefFn>
Tensor<T> loss_kl(ModelFn&& model_fn, RefFn&& ref_fn, std::span<const Batch> batch) {
  if (batch.empty()) throw ContractError("loss_kl: empty batch");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (const Batch& item : batch) {
    const auto tokens = item.full();
    Tensor<T> ref_logits;
    {
      typename Tape<T>::Scope no_grad(nullptr);
      ref_logits = ref_fn(std::span<const int>(tokens));
    }
    Tensor<T> logits = model_fn(std::span<const int>(tokens));
    Tensor<T> kl = kl_divergence_sum(logits, ref_logits, item.answer_mask());
    total = add(total, scale(kl, T(1) / static_cast<T>(item.mask_count())));
  }
  return scale(total, T(1) / static_cast<T>(batch.size()));
}

// Preference core shared by DPO and its hand-value tests: given the two
// log-probability advantages over the reference, -(1/beta) log sigmoid
// (beta * (idk advantage - answer advantage)).
template <typename T>
Tensor<T> dpo_core(const Tensor<T>& delta_idk, const Tensor<T>& delta_answer, T beta) {
  Tensor<T> z = scale(sub(delta_idk, delta_answer), beta);
  return scale(logsigmoid(z), T(-1) / beta);
}

// NPO core: -(2/beta) log sigmoid(-beta * answer advantage).
template <typename T>
Tensor<T> npo_core(const Tensor<T>& delta_answer, T beta) {
  Tensor<T> z = scale(delta_answer, -beta);
  return scale(logsigmoid(z), T(-2) / beta);
}

// Direct-preference loss favoring the paired refusal answer over the true
// one. `idk_batch` must hold the same prompts with refusal answers.
template <typename T, typename ModelFn, typename RefFn>
Tensor<T> loss_dpo(ModelFn&& model_fn, RefFn&& ref_fn, std::span<const Batch> forget_batch,
                   std::span<const Batch> idk_batch, const LossConfig& cfg) {
  if (forget_batch.empty() || forget_batch.size() != idk_batch.size()) {
    throw ContractError("loss_dpo: forget/idk batches must align");
  }
  const T beta = static_cast<T>(cfg.preference_beta);
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (std::size_t i = 0; i < forget_batch.size(); ++i) {
    auto delta = [&](const Batch& item) {
      T ref_lp;
      {
        typename Tape<T>::Scope no_grad(nullptr);
        ref_lp = detail::answer_logprob<T>(ref_fn, item, cfg.length_normalize_preference).item();
      }
      Tensor<T> lp = detail::answer_logprob<T>(model_fn, item, cfg.length_normalize_preference);
      return sub(lp, Tensor<T>::scalar(ref_lp));
    };
    total = add(total, dpo_core(delta(idk_batch[i]), delta(forget_batch[i]), beta));
  }
  return scale(total, T(1) / static_cast<T>(forget_batch.size()));
}

// Negative-preference loss: the DPO structure with the refusal term dropped.
// Bounded below by zero.
template <typename T, typename ModelFn, typename RefFn>
Tensor<T> loss_npo(ModelFn&& model_fn, RefFn&& ref_fn, std::span<const Batch> forget_batch,
                   const LossConfig& cfg) {
  if (forget_batch.empty()) throw ContractError("loss_npo: empty batch");
  const T beta = static_cast<T>(cfg.preference_beta);
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (const Batch& item : forget_batch) {
    T ref_lp;
    {
      typename Tape<T>::Scope no_grad(nullptr);
      ref_lp = detail::answer_logprob<T>(ref_fn, item, cfg.length_normalize_preference).item();
    }
    Tensor<T> lp = detail::answer_logprob<T>(model_fn, item, cfg.length_normalize_preference);
    total = add(total, npo_core(sub(lp, Tensor<T>::scalar(ref_lp)), beta));
  }
  return scale(total, T(1) / static_cast<T>(forget_batch.size()));
}

// Assistant objective: remember the augmented forget data, flatten the
// augmented retain data. CE(forget') + w * CE(retain' -> uniform); bounded
// below by w * ln(V).
template <typename T, typename LogitsFn>
Tensor<T> loss_uld_assistant(LogitsFn&& logits_fn, std::span<const Batch> forget_prime,
                             std::span<const Batch> retain_prime, T retain_weight) {
  if (forget_prime.empty() || retain_prime.empty()) {
    throw ContractError("loss_uld_assistant: empty batch");
  }
  Tensor<T> ce_forget = detail::mean_masked_ce<T>(logits_fn, forget_prime);
  Tensor<T> ce_uniform = Tensor<T>::scalar(T(0));
  for (const Batch& item : retain_prime) {
    const auto tokens = item.full();
    Tensor<T> logits = logits_fn(std::span<const int>(tokens));
    Tensor<T> u = uniform_ce_sum(logits, item.answer_mask());
    ce_uniform = add(ce_uniform, scale(u, T(1) / static_cast<T>(item.mask_count())));
  }
  ce_uniform = scale(ce_uniform, T(1) / static_cast<T>(retain_prime.size()));
  return add(ce_forget, scale(ce_uniform, retain_weight));
}

// Weighted assembly of a conventional objective from its parts. The forget
// term already carries its optimization sign (loss_ga is the negated CE;
// DPO/NPO are minimized directly).
template <typename T>
Tensor<T> combine_conventional(const MethodTag& tag, const Tensor<T>& forget_term,
                               const Tensor<T>* retain_term, T retain_weight) {
  if (tag.uld) throw ConfigError("combine_conventional: 'uld' is not a conventional objective");
  if (tag.retain == RetainKind::kNone) return forget_term;
  if (retain_term == nullptr) throw ContractError("combine_conventional: missing retain term");
  return add(forget_term, scale(*retain_term, retain_weight));
}

// Offset composition: log p_f = log p_target + alpha * (log p_a - log p_a0),
// renormalization deferred to the softmax inside whichever objective consumes
// the result. Gradients flow only through the fine-tuned assistant logits.
template <typename T>
Tensor<T> offset_logits(const Tensor<T>& target_logits, const Tensor<T>& assistant_logits,
                        const Tensor<T>& reference_assistant_logits, T alpha) {
  if (target_logits.shape() != assistant_logits.shape() ||
      target_logits.shape() != reference_assistant_logits.shape()) {
    throw ContractError("offset_logits: vocabulary mismatch");
  }
  Tensor<T> shift = sub(log_softmax(assistant_logits), log_softmax(reference_assistant_logits));
  return add(log_softmax(target_logits), scale(shift, alpha));
}

// Conventional objective evaluated on the offset-composed logits; only the
// fine-tuned assistant receives gradients.
template <typename T, typename TargetFn, typename AssistFn, typename AssistRefFn>
Tensor<T> loss_offset(TargetFn&& target_fn, AssistFn&& assistant_fn, AssistRefFn&& assistant_ref_fn,
                      T alpha, const MethodTag& tag, std::span<const Batch> forget_batch,
                      std::span<const Batch> retain_batch, std::span<const Batch> idk_batch,
                      const LossConfig& cfg) {
  auto combined = [&](std::span<const int> tokens) {
    Tensor<T> zt, za0;
    {
      typename Tape<T>::Scope no_grad(nullptr);
      zt = target_fn(tokens);
      za0 = assistant_ref_fn(tokens);
    }
    return offset_logits(zt, assistant_fn(tokens), za0, alpha);
  };
  // With the untrained assistant the composition collapses to the target
  // distribution, which is exactly the reference the retain losses need.
  auto combined_ref = [&](std::span<const int> tokens) { return target_fn(tokens); };

  Tensor<T> forget_term;
  switch (tag.forget) {
    case ForgetKind::kGa:
      forget_term = loss_ga<T>(combined, forget_batch);
      break;
    case ForgetKind::kDpo:
      forget_term = loss_dpo<T>(combined, combined_ref, forget_batch, idk_batch, cfg);
      break;
    case ForgetKind::kNpo:
      forget_term = loss_npo<T>(combined, combined_ref, forget_batch, cfg);
      break;
  }
  if (tag.retain == RetainKind::kNone) return forget_term;
  Tensor<T> retain_term = tag.retain == RetainKind::kGd
                              ? loss_gd<T>(combined, retain_batch)
                              : loss_kl<T>(combined, combined_ref, retain_batch);
  return combine_conventional(tag, forget_term, &retain_term, static_cast<T>(cfg.retain_weight));
}

}  // namespace uld
