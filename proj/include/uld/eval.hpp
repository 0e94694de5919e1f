#pragma once

// Metric suite: ROUGE-L recall, length-normalized answer probability, truth
// ratio, two-sample Kolmogorov-Smirnov forget quality, and the nine-way
// harmonic-mean model utility.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "uld/data.hpp"
#include "uld/decode.hpp"
#include "uld/errors.hpp"

namespace uld {

// Longest common subsequence length over word tokens.
inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// LCS recall against the reference: LCS(ref, hyp) / |ref|. Empty reference
// scores zero.
inline double rouge_l(const std::string& reference, const std::string& hypothesis) {
  const auto ref = Tokenizer::split_words(reference);
  if (ref.empty()) return 0.0;
  const auto hyp = Tokenizer::split_words(hypothesis);
  return static_cast<double>(lcs_length(ref, hyp)) / static_cast<double>(ref.size());
}

// p(answer | question)^(1 / answer length) from a summed log-probability.
inline double normalized_prob(double logprob_sum, std::size_t answer_len) {
  if (answer_len == 0) throw ContractError("normalized_prob: empty answer");
  return std::exp(logprob_sum / static_cast<double>(answer_len));
}

template <typename T>
double answer_prob(const CombinedModel<T>& model, const Tokenizer& tok, const std::string& question,
                   const std::string& answer) {
  std::vector<int> prompt{Tokenizer::kBos};
  for (int t : tok.encode(question)) prompt.push_back(t);
  const auto ans = tok.encode(answer);
  if (ans.empty()) throw ContractError("answer_prob: empty answer");
  return normalized_prob(model.sequence_logprob(prompt, ans), ans.size());
}

inline constexpr double kTruthRatioFloor = 1e-30;

// Mean normalized probability of the paraphrased correct answers over that
// of the incorrect answers.
inline double truth_ratio(std::span<const double> correct_normprobs,
                          std::span<const double> incorrect_normprobs) {
  if (correct_normprobs.empty() || incorrect_normprobs.empty()) {
    throw ContractError("truth_ratio: need at least one answer on each side");
  }
  double num = 0.0, den = 0.0;
  for (double p : correct_normprobs) num += p;
  for (double p : incorrect_normprobs) den += p;
  num /= static_cast<double>(correct_normprobs.size());
  den /= static_cast<double>(incorrect_normprobs.size());
  return num / std::max(den, kTruthRatioFloor);
}

// Truth ratio of one scored example; paraphrased answers are the correct
// side, perturbed answers the incorrect side.
inline double truth_ratio(const ScoredExample& ex, const Tokenizer& tok, const QaPair& qa) {
  std::vector<double> correct, incorrect;
  for (std::size_t i = 0; i < ex.paraphrased_logprobs.size(); ++i) {
    correct.push_back(
        normalized_prob(ex.paraphrased_logprobs[i], tok.encode(qa.paraphrased_answers[i]).size()));
  }
  for (std::size_t i = 0; i < ex.perturbed_logprobs.size(); ++i) {
    incorrect.push_back(
        normalized_prob(ex.perturbed_logprobs[i], tok.encode(qa.perturbed_answers[i]).size()));
  }
  return truth_ratio(correct, incorrect);
}

// Bounded monotone mapping of a truth ratio for the utility aggregate.
inline double truth_ratio_score(double ratio) {
  if (ratio <= 0.0) return 0.0;
  return std::max(0.0, 1.0 - 1.0 / ratio);
}

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

namespace detail {

// Asymptotic Kolmogorov survival series 2 sum (-1)^(k-1) exp(-2 k^2 x^2),
// truncated once terms drop below 1e-10; a non-converging sum means the
// distributions are indistinguishable and the p-value saturates at 1.
inline double kolmogorov_pvalue(double lambda) {
  double total = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 1000; ++k) {
    const double term = std::exp(-2.0 * static_cast<double>(k) * static_cast<double>(k) *
                                 lambda * lambda);
    total += sign * term;
    if (term < 1e-10) return std::clamp(2.0 * total, 0.0, 1.0);
    sign = -sign;
  }
  return 1.0;
}

}  // namespace detail

// Two-sample KS test: D = sup |ECDF_a - ECDF_b|, p-value via the asymptotic
// series with the small-sample effective size correction.
inline KsResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractError("ks_two_sample: empty sample");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const double na = static_cast<double>(sa.size());
  const double nb = static_cast<double>(sb.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < sa.size() && j < sb.size()) {
    const double t = std::min(sa[i], sb[j]);
    while (i < sa.size() && sa[i] <= t) ++i;
    while (j < sb.size() && sb[j] <= t) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  KsResult result;
  result.statistic = d;
  const double effective = std::sqrt(na * nb / (na + nb));
  const double lambda = (effective + 0.12 + 0.11 / effective) * d;
  result.p_value = detail::kolmogorov_pvalue(lambda);
  return result;
}

// KS p-value between the unlearned model's truth-ratio distribution on the
// forget set and the retain-only model's; higher means closer.
inline double forget_quality(std::span<const double> unlearned_ratios,
                             std::span<const double> retain_ratios) {
  return ks_two_sample(unlearned_ratios, retain_ratios).p_value;
}

// Harmonic mean of the nine group metrics; zero annihilates.
inline double model_utility(std::span<const double> nine_values) {
  if (nine_values.size() != 9) throw ContractError("model_utility: expected nine values");
  double denom = 0.0;
  for (double v : nine_values) {
    if (v < 0.0 || v > 1.0) throw ContractError("model_utility: value outside [0, 1]");
    if (v == 0.0) return 0.0;
    denom += 1.0 / v;
  }
  return 9.0 / denom;
}

// ---------------------------------------------------------------------------
// report assembly

struct GroupMetrics {
  double rouge = 0.0;        // mean ROUGE-L of greedy generations
  double prob = 0.0;         // mean normalized true-answer probability
  double truth_score = 0.0;  // mean bounded truth-ratio score
};

struct EvalReport {
  double forget_quality = 0.0;
  double model_utility = 0.0;
  double forget_rouge = 0.0;
  double perplexity = 0.0;
  GroupMetrics holdout_fictional;
  GroupMetrics famous;
  GroupMetrics world_facts;
  std::vector<double> forget_truth_ratios;
};

inline GroupMetrics group_metrics(const std::vector<ScoredExample>& examples, const Corpus& corpus,
                                  const Tokenizer& tok) {
  if (examples.empty()) throw ContractError("group_metrics: empty group");
  GroupMetrics g;
  for (const auto& ex : examples) {
    const QaPair& qa = corpus.qa(ex.id);
    g.rouge += rouge_l(ex.reference, ex.generation);
    g.prob += normalized_prob(ex.true_logprob, tok.encode(qa.answer).size());
    g.truth_score += truth_ratio_score(truth_ratio(ex, tok, qa));
  }
  const double n = static_cast<double>(examples.size());
  g.rouge /= n;
  g.prob /= n;
  g.truth_score /= n;
  return g;
}

inline std::vector<double> truth_ratios(const std::vector<ScoredExample>& examples,
                                        const Corpus& corpus, const Tokenizer& tok) {
  std::vector<double> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(truth_ratio(ex, tok, corpus.qa(ex.id)));
  return out;
}

inline double mean_rouge(const std::vector<ScoredExample>& examples) {
  if (examples.empty()) throw ContractError("mean_rouge: empty group");
  double total = 0.0;
  for (const auto& ex : examples) total += rouge_l(ex.reference, ex.generation);
  return total / static_cast<double>(examples.size());
}

// Assembles the full report from per-split score dumps plus the retain
// model's truth ratios on the same forget examples.
inline EvalReport build_report(const std::vector<ScoredExample>& forget_examples,
                               const std::vector<ScoredExample>& holdout_examples,
                               const std::vector<ScoredExample>& famous_examples,
                               const std::vector<ScoredExample>& world_examples,
                               std::span<const double> retain_truth_ratios, double ppl,
                               const Corpus& corpus, const Tokenizer& tok) {
  EvalReport report;
  report.forget_truth_ratios = truth_ratios(forget_examples, corpus, tok);
  report.forget_quality = forget_quality(report.forget_truth_ratios, retain_truth_ratios);
  report.forget_rouge = mean_rouge(forget_examples);
  report.holdout_fictional = group_metrics(holdout_examples, corpus, tok);
  report.famous = group_metrics(famous_examples, corpus, tok);
  report.world_facts = group_metrics(world_examples, corpus, tok);
  const double nine[9] = {report.holdout_fictional.rouge, report.holdout_fictional.prob,
                          report.holdout_fictional.truth_score, report.famous.rouge,
                          report.famous.prob, report.famous.truth_score, report.world_facts.rouge,
                          report.world_facts.prob, report.world_facts.truth_score};
  report.model_utility = model_utility(std::span<const double>(nine, 9));
  report.perplexity = ppl;
  return report;
}

inline nlohmann::ordered_json report_to_json(const EvalReport& r) {
  auto group = [](const GroupMetrics& g) {
    return nlohmann::ordered_json{
        {"rouge", g.rouge}, {"prob", g.prob}, {"truth_score", g.truth_score}};
  };
  return nlohmann::ordered_json{{"forget_quality", r.forget_quality},
                                {"model_utility", r.model_utility},
                                {"forget_rouge", r.forget_rouge},
                                {"perplexity", r.perplexity},
                                {"groups",
                                 nlohmann::ordered_json{{"holdout_fictional", group(r.holdout_fictional)},
                                                        {"famous", group(r.famous)},
                                                        {"world_facts", group(r.world_facts)}}},
                                {"forget_truth_ratios", r.forget_truth_ratios}};
}

}  // namespace uld
