#pragma once

// Training machinery: AdamW with decoupled weight decay, plain fine-tuning
// for the target/retain models, and the unlearning driver that runs any
// method tag, snapshots per-epoch metrics, and writes the run directory.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "uld/data.hpp"
#include "uld/decode.hpp"
#include "uld/errors.hpp"
#include "uld/eval.hpp"
#include "uld/model.hpp"
#include "uld/objectives.hpp"
#include "uld/tensor.hpp"

namespace uld {

// ---------------------------------------------------------------------------
// optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  long long step = 0;
};

// Decoupled-weight-decay update, in place, over the trainable tensor set.
template <typename T>
void adamw_step(std::span<const Tensor<T>> params, AdamState<T>& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ContractError("adamw_step: state size mismatch");
  state.step += 1;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T correction1 = T(1) - std::pow(b1, static_cast<T>(state.step));
  const T correction2 = T(1) - std::pow(b2, static_cast<T>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& p = params[i];
    if (state.m[i].size() != p.numel()) throw ContractError("adamw_step: shape mismatch");
    const auto& g = p.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T m_hat = m[j] / correction1;
      const T v_hat = v[j] / correction2;
      p[j] -= static_cast<T>(cfg.lr) *
              (m_hat / (std::sqrt(v_hat) + static_cast<T>(cfg.eps)) +
               static_cast<T>(cfg.weight_decay) * p[j]);
    }
  }
}

template <typename T>
void clip_global_norm(std::span<const Tensor<T>> params, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const auto& p : params) {
    for (const T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  const T factor = static_cast<T>(max_norm / norm);
  for (const auto& p : params) {
    for (auto& g : p.grad()) g *= factor;
  }
}

template <typename T>
void zero_grads(std::span<const Tensor<T>> params) {
  for (const auto& p : params) p.zero_grad();
}

// ---------------------------------------------------------------------------
// training configuration

struct TrainConfig {
  double lr = 1e-3;
  int batch_size = 16;
  int epochs = 30;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::uint64_t seed = 7;
  double clip_norm = 1.0;
  LossConfig loss;

  AdamConfig adam() const { return {lr, beta1, beta2, eps, weight_decay}; }

  void validate() const {
    if (lr <= 0.0) throw ContractError("train config: lr must be positive");
    if (epochs < 0) throw ContractError("train config: epochs must be >= 0");
    if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  }
};

using LogFn = std::function<void(const std::string&)>;

// Plain answer-masked cross-entropy fine-tuning, in place. Deterministic
// under a fixed seed; epochs = 0 leaves the parameters untouched.
template <typename T>
void finetune(ModelParams<T>& params, std::span<const Batch> data, const TrainConfig& cfg,
              const LogFn& log = nullptr) {
  cfg.validate();
  if (data.empty()) throw ContractError("finetune: empty dataset");
  set_trainable(params, true);
  auto trainable = all_tensors(params);
  AdamState<T> state;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Batch> minibatch;
      for (std::size_t i = start; i < stop; ++i) minibatch.push_back(data[order[i]]);
      Tape<T> tape;
      typename Tape<T>::Scope scope(&tape);
      Tensor<T> loss = loss_gd<T>(
          [&](std::span<const int> toks) { return forward_logits(params, toks); },
          std::span<const Batch>(minibatch));
      if (!std::isfinite(loss.item())) {
        set_trainable(params, false);
        throw NanLossError(epoch, batches);
      }
      tape.backward(loss);
      clip_global_norm<T>(trainable, cfg.clip_norm);
      adamw_step<T>(trainable, state, cfg.adam());
      zero_grads<T>(trainable);
      epoch_loss += static_cast<double>(loss.item());
      ++batches;
    }
    if (log) {
      char line[128];
      std::snprintf(line, sizeof(line), "epoch %d/%d loss %.4f", epoch, cfg.epochs,
                    epoch_loss / std::max(1, batches));
      log(line);
    }
  }
  set_trainable(params, false);
}

// ---------------------------------------------------------------------------
// unlearning runs

struct UnlearnConfig {
  TrainConfig train;
  CombinerConfig combiner;
  int lora_rank = 4;
  double lora_alpha = 4.0;
  int prefix_layers = 0;  // 0 = max(1, n_layers / 4)
  bool use_forget_augmentation = true;
  bool use_retain_augmentation = true;
  int eval_max_examples = 32;
  int eval_max_new_tokens = 16;
  std::string out_dir;  // empty: keep everything in memory

  int resolved_prefix(int n_layers) const {
    return prefix_layers > 0 ? prefix_layers : std::max(1, n_layers / 4);
  }
};

inline void to_json(nlohmann::ordered_json& j, const UnlearnConfig& c) {
  j = nlohmann::ordered_json{{"method", c.train.loss.method},
                             {"lr", c.train.lr},
                             {"batch_size", c.train.batch_size},
                             {"epochs", c.train.epochs},
                             {"weight_decay", c.train.weight_decay},
                             {"adam_beta1", c.train.beta1},
                             {"adam_beta2", c.train.beta2},
                             {"adam_eps", c.train.eps},
                             {"seed", c.train.seed},
                             {"clip_norm", c.train.clip_norm},
                             {"retain_weight", c.train.loss.retain_weight},
                             {"preference_beta", c.train.loss.preference_beta},
                             {"length_normalize_preference", c.train.loss.length_normalize_preference},
                             {"combiner_alpha", c.combiner.alpha},
                             {"combiner_filter_rate", c.combiner.filter_rate},
                             {"lora_rank", c.lora_rank},
                             {"lora_alpha", c.lora_alpha},
                             {"prefix_layers", c.prefix_layers},
                             {"use_forget_augmentation", c.use_forget_augmentation},
                             {"use_retain_augmentation", c.use_retain_augmentation},
                             {"eval_max_examples", c.eval_max_examples},
                             {"eval_max_new_tokens", c.eval_max_new_tokens}};
}

struct EpochRecord {
  int epoch = 0;
  double forget_ce = 0.0;
  double holdout_ce = 0.0;
  double forget_quality = 0.0;
  double model_utility = 0.0;
  double forget_rouge = 0.0;
  double retain_rouge = 0.0;
  double seconds = 0.0;     // training wall-clock for this epoch
  double train_loss = 0.0;  // mean step loss
  double min_step_loss = 0.0;
  double perplexity = 0.0;
  std::string checkpoint;
};

struct RunRecord {
  std::string method;
  EpochRecord initial;             // pre-training state
  std::vector<EpochRecord> epochs; // one entry per training epoch
  long long trainable_params = 0;
  long long total_params = 0;

  // Highest forget quality; ties break toward higher model utility.
  const EpochRecord& best() const {
    if (epochs.empty()) throw ContractError("run record: no epochs");
    const EpochRecord* best = &epochs.front();
    for (const auto& e : epochs) {
      if (e.forget_quality > best->forget_quality ||
          (e.forget_quality == best->forget_quality && e.model_utility > best->model_utility)) {
        best = &e;
      }
    }
    return *best;
  }
};

// Evenly spread subset of at most `cap` ids, deterministic.
inline std::vector<int> eval_subset(const std::vector<int>& ids, int cap) {
  if (cap <= 0 || ids.size() <= static_cast<std::size_t>(cap)) return ids;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(cap));
  for (int i = 0; i < cap; ++i) {
    out.push_back(ids[static_cast<std::size_t>(i) * ids.size() / static_cast<std::size_t>(cap)]);
  }
  return out;
}

// Mean per-example masked cross entropy under a combined model's scores.
template <typename T>
double combined_ce(const CombinedModel<T>& model, std::span<const Batch> batches) {
  if (batches.empty()) throw ContractError("combined_ce: empty batch");
  double total = 0.0;
  for (const Batch& item : batches) {
    const auto rows = model.score_rows(item.full());
    const auto targets = item.targets();
    double nll = 0.0;
    for (std::size_t r = 0; r < targets.size(); ++r) {
      if (targets[r] < 0) continue;
      nll -= static_cast<double>(rows[r][static_cast<std::size_t>(targets[r])]);
    }
    total += nll / static_cast<double>(item.mask_count());
  }
  return total / static_cast<double>(batches.size());
}

// Corpus-level perplexity over full QA token sequences.
template <typename T>
double corpus_perplexity(const CombinedModel<T>& model, const Tokenizer& tok,
                         const std::vector<QaText>& items) {
  if (items.empty()) throw ContractError("corpus_perplexity: empty text set");
  double nll = 0.0;
  long long count = 0;
  for (const auto& item : items) {
    Batch b = make_batch(tok, item.question, item.answer, Batch::Source::kRetain);
    const auto tokens = b.full();
    const auto rows = model.score_rows(tokens);
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
      nll -= static_cast<double>(rows[i][static_cast<std::size_t>(tokens[i + 1])]);
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

namespace detail {

struct EvalContext {
  const Corpus* corpus = nullptr;
  const Tokenizer* tok = nullptr;
  std::vector<int> forget_ids, holdout_ids, famous_ids, world_ids;
  std::vector<Batch> forget_batches, holdout_batches;
  std::vector<QaText> ppl_items;
  std::vector<double> retain_truth_ratios;
  int max_new_tokens = 16;

  static EvalContext make(const Corpus& corpus, const Tokenizer& tok,
                          std::span<const double> retain_ratios, const UnlearnConfig& cfg) {
    EvalContext ctx;
    ctx.corpus = &corpus;
    ctx.tok = &tok;
    ctx.forget_ids = eval_subset(corpus.forget_ids, cfg.eval_max_examples);
    ctx.holdout_ids = eval_subset(corpus.holdout_ids, cfg.eval_max_examples);
    ctx.famous_ids = eval_subset(corpus.famous_ids, cfg.eval_max_examples);
    ctx.world_ids = eval_subset(corpus.world_ids, cfg.eval_max_examples);
    ctx.forget_batches = make_batches(tok, corpus.texts(ctx.forget_ids), Batch::Source::kForget);
    ctx.holdout_batches = make_batches(tok, corpus.texts(ctx.holdout_ids), Batch::Source::kRetain);
    ctx.ppl_items = corpus.texts(ctx.holdout_ids);
    ctx.retain_truth_ratios.assign(retain_ratios.begin(), retain_ratios.end());
    ctx.max_new_tokens = cfg.eval_max_new_tokens;
    if (ctx.retain_truth_ratios.size() != ctx.forget_ids.size()) {
      throw ContractError("unlearn: retain truth ratios must cover the forget evaluation subset");
    }
    return ctx;
  }

  template <typename T>
  EpochRecord snapshot(const CombinedModel<T>& model, int epoch) const {
    EpochRecord rec;
    rec.epoch = epoch;
    auto forget_scores = score_split(model, *tok, *corpus, forget_ids, "forget", max_new_tokens);
    auto holdout_scores =
        score_split(model, *tok, *corpus, holdout_ids, "holdout_fictional", max_new_tokens);
    auto famous_scores = score_split(model, *tok, *corpus, famous_ids, "famous", max_new_tokens);
    auto world_scores = score_split(model, *tok, *corpus, world_ids, "world_facts", max_new_tokens);
    const double ppl = corpus_perplexity(model, *tok, ppl_items);
    EvalReport report = build_report(forget_scores, holdout_scores, famous_scores, world_scores,
                                     retain_truth_ratios, ppl, *corpus, *tok);
    rec.forget_ce = combined_ce(model, std::span<const Batch>(forget_batches));
    rec.holdout_ce = combined_ce(model, std::span<const Batch>(holdout_batches));
    rec.forget_quality = report.forget_quality;
    rec.model_utility = report.model_utility;
    rec.forget_rouge = report.forget_rouge;
    rec.retain_rouge = report.holdout_fictional.rouge;
    rec.perplexity = report.perplexity;
    return rec;
  }
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_epochs_csv(const RunRecord& run, const std::string& path) {
  std::ofstream out(path);
  out << "epoch,forget_ce,holdout_retain_ce,forget_quality,model_utility,forget_rouge,"
         "retain_rouge,seconds\n";
  for (const auto& e : run.epochs) {
    out << e.epoch << ',' << format_double(e.forget_ce) << ',' << format_double(e.holdout_ce)
        << ',' << format_double(e.forget_quality) << ',' << format_double(e.model_utility) << ','
        << format_double(e.forget_rouge) << ',' << format_double(e.retain_rouge) << ',';
    char seconds[32];
    std::snprintf(seconds, sizeof(seconds), "%.6f", e.seconds);
    out << seconds << '\n';
  }
}

inline nlohmann::ordered_json epoch_to_json(const EpochRecord& e) {
  return nlohmann::ordered_json{{"epoch", e.epoch},
                                {"forget_ce", e.forget_ce},
                                {"holdout_retain_ce", e.holdout_ce},
                                {"forget_quality", e.forget_quality},
                                {"model_utility", e.model_utility},
                                {"forget_rouge", e.forget_rouge},
                                {"retain_rouge", e.retain_rouge},
                                {"seconds", e.seconds},
                                {"train_loss", e.train_loss},
                                {"min_step_loss", e.min_step_loss},
                                {"perplexity", e.perplexity},
                                {"checkpoint", e.checkpoint}};
}

inline void write_metrics_json(const RunRecord& run, const std::string& path) {
  nlohmann::ordered_json j{{"method", run.method},
                           {"trainable_params", run.trainable_params},
                           {"total_params", run.total_params},
                           {"initial", epoch_to_json(run.initial)},
                           {"epochs", nlohmann::ordered_json::array()}};
  for (const auto& e : run.epochs) j["epochs"].push_back(epoch_to_json(e));
  std::ofstream out(path);
  out << j.dump(2) << '\n';
}

}  // namespace detail

// Runs one unlearning method against a frozen target model. Baselines mutate
// a deep copy; the subtraction and offset methods leave the target bitwise
// untouched (verified per epoch). `retain_truth_ratios` are the retain-only
// model's truth ratios on the forget evaluation subset.
inline RunRecord unlearn(std::shared_ptr<const ModelParams<float>> target, const Corpus& corpus,
                         const Tokenizer& tok, std::span<const double> retain_truth_ratios,
                         const UnlearnConfig& cfg, const LogFn& log = nullptr) {
  cfg.train.validate();
  cfg.combiner.validate();
  const MethodTag tag = MethodTag::parse(cfg.train.loss.method);
  const auto ctx = detail::EvalContext::make(corpus, tok, retain_truth_ratios, cfg);
  const std::uint64_t base_fingerprint = fingerprint(*target);

  const bool needs_dir = !cfg.out_dir.empty();
  if (needs_dir) {
    std::filesystem::create_directories(cfg.out_dir + "/ckpt");
    nlohmann::ordered_json config_json;
    to_json(config_json, cfg);
    std::ofstream out(cfg.out_dir + "/run.json");
    out << config_json.dump(2) << '\n';
  }

  RunRecord run;
  run.method = tag.text;
  run.total_params = count_total(*target);

  // --- assemble training streams -----------------------------------------
  std::vector<Batch> forget_train, retain_train, idk_train;
  const std::vector<QaText> forget_canonical = corpus.texts(corpus.forget_ids);
  const std::vector<QaText> retain_canonical = corpus.texts(corpus.retain_ids);
  if (tag.uld) {
    forget_train = make_batches(
        tok, cfg.use_forget_augmentation ? corpus.forget_prime : forget_canonical,
        Batch::Source::kForget);
    retain_train = make_batches(
        tok, cfg.use_retain_augmentation ? corpus.retain_prime : retain_canonical,
        Batch::Source::kRetain);
  } else {
    forget_train = make_batches(tok, forget_canonical, Batch::Source::kForget);
    retain_train = make_batches(tok, retain_canonical, Batch::Source::kRetain);
  }
  if (tag.forget == ForgetKind::kDpo && !tag.uld) {
    for (const auto& item : forget_canonical) {
      const auto& refusal =
          corpus.idk_pool[static_cast<std::size_t>(item.source_id) % corpus.idk_pool.size()];
      idk_train.push_back(make_batch(tok, item.question, refusal, Batch::Source::kIdk));
    }
  }

  // --- method state --------------------------------------------------------
  ModelParams<float> baseline_model;      // baselines fine-tune this copy
  AssistantModel<float> assistant;        // subtraction method
  ModelParams<float> offset_model, offset_reference;
  std::vector<Tensor<float>> trainable;

  auto target_fn = [&target](std::span<const int> t) { return forward_logits(*target, t); };
  CombinedModel<float> eval_model = CombinedModel<float>::identity(target_fn);
  CombinerConfig run_combiner = cfg.combiner;

  if (tag.uld) {
    assistant = build_assistant<float>(target, cfg.resolved_prefix(target->config.n_layers),
                                       cfg.lora_rank, static_cast<float>(cfg.lora_alpha),
                                       cfg.train.seed);
    set_adapters_trainable(assistant, true);
    trainable = adapter_tensors(assistant);
    run.trainable_params = count_trainable(assistant);
    run_combiner.mode = CombineMode::kUld;
    eval_model = CombinedModel<float>::uld(
        target_fn,
        [&assistant](std::span<const int> t) { return assistant_forward(assistant, t); },
        run_combiner);
  } else if (tag.offset) {
    ModelConfig offset_config = target->config;
    offset_config.n_layers = cfg.resolved_prefix(target->config.n_layers);
    offset_model = init_params<float>(offset_config, cfg.train.seed + 1);
    offset_reference = deep_copy(offset_model);
    set_trainable(offset_model, true);
    trainable = all_tensors(offset_model);
    run.trainable_params = count_trainable(offset_model);
    run_combiner.mode = CombineMode::kOffset;
    eval_model = CombinedModel<float>::offset(
        target_fn,
        [&offset_model](std::span<const int> t) { return forward_logits(offset_model, t); },
        [&offset_reference](std::span<const int> t) { return forward_logits(offset_reference, t); },
        run_combiner);
  } else {
    baseline_model = deep_copy(*target);
    set_trainable(baseline_model, true);
    trainable = all_tensors(baseline_model);
    run.trainable_params = count_trainable(baseline_model);
    eval_model = CombinedModel<float>::identity(
        [&baseline_model](std::span<const int> t) { return forward_logits(baseline_model, t); });
  }

  // --- one optimization step over paired forget/retain views ---------------
  const LossConfig& loss_cfg = cfg.train.loss;
  auto step_loss = [&](std::span<const Batch> fb, std::span<const Batch> rb,
                       std::span<const Batch> ib) {
    if (tag.uld) {
      return loss_uld_assistant<float>(
          [&assistant](std::span<const int> t) { return assistant_forward(assistant, t); }, fb, rb,
          static_cast<float>(loss_cfg.retain_weight));
    }
    if (tag.offset) {
      return loss_offset<float>(
          target_fn,
          [&offset_model](std::span<const int> t) { return forward_logits(offset_model, t); },
          [&offset_reference](std::span<const int> t) { return forward_logits(offset_reference, t); },
          static_cast<float>(cfg.combiner.alpha), tag, fb, rb, ib, loss_cfg);
    }
    auto model_fn = [&baseline_model](std::span<const int> t) {
      return forward_logits(baseline_model, t);
    };
    Tensor<float> forget_term;
    switch (tag.forget) {
      case ForgetKind::kGa:
        forget_term = loss_ga<float>(model_fn, fb);
        break;
      case ForgetKind::kDpo:
        forget_term = loss_dpo<float>(model_fn, target_fn, fb, ib, loss_cfg);
        break;
      case ForgetKind::kNpo:
        forget_term = loss_npo<float>(model_fn, target_fn, fb, loss_cfg);
        break;
    }
    if (tag.retain == RetainKind::kNone) return forget_term;
    Tensor<float> retain_term = tag.retain == RetainKind::kGd
                                    ? loss_gd<float>(model_fn, rb)
                                    : loss_kl<float>(model_fn, target_fn, rb);
    return combine_conventional(tag, forget_term, &retain_term,
                                static_cast<float>(loss_cfg.retain_weight));
  };

  // --- epoch 0 snapshot ------------------------------------------------------
  // No unlearning has been applied yet, so the pre-run row records the target
  // model itself for every method.
  run.initial = ctx.snapshot(CombinedModel<float>::identity(target_fn), 0);
  if (log) log("epoch 0: forget_ce " + detail::format_double(run.initial.forget_ce));

  AdamState<float> state;
  Rng rng(cfg.train.seed);
  std::vector<std::size_t> forget_order(forget_train.size());
  for (std::size_t i = 0; i < forget_order.size(); ++i) forget_order[i] = i;
  std::vector<std::size_t> retain_order(retain_train.size());
  for (std::size_t i = 0; i < retain_order.size(); ++i) retain_order[i] = i;
  std::size_t retain_cursor = retain_order.size();  // force reshuffle on first use

  const auto batch_size = static_cast<std::size_t>(cfg.train.batch_size);
  for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
    const auto start_time = std::chrono::steady_clock::now();
    rng.shuffle(forget_order);
    double epoch_loss = 0.0;
    double min_loss = std::numeric_limits<double>::infinity();
    int batches = 0;
    for (std::size_t start = 0; start < forget_order.size(); start += batch_size) {
      const std::size_t stop = std::min(forget_order.size(), start + batch_size);
      std::vector<Batch> fb, rb, ib;
      for (std::size_t i = start; i < stop; ++i) {
        fb.push_back(forget_train[forget_order[i]]);
        if (!idk_train.empty()) ib.push_back(idk_train[forget_order[i]]);
      }
      for (std::size_t i = start; i < stop; ++i) {
        if (retain_cursor >= retain_order.size()) {
          rng.shuffle(retain_order);
          retain_cursor = 0;
        }
        rb.push_back(retain_train[retain_order[retain_cursor++]]);
      }
      Tape<float> tape;
      Tape<float>::Scope scope(&tape);
      Tensor<float> loss = step_loss(fb, rb, ib);
      if (!std::isfinite(loss.item())) throw NanLossError(epoch, batches);
      tape.backward(loss);
      clip_global_norm<float>(trainable, cfg.train.clip_norm);
      adamw_step<float>(trainable, state, cfg.train.adam());
      zero_grads<float>(trainable);
      epoch_loss += static_cast<double>(loss.item());
      min_loss = std::min(min_loss, static_cast<double>(loss.item()));
      ++batches;
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();

    if ((tag.uld || tag.offset) && fingerprint(*target) != base_fingerprint) {
      throw FrozenParamError("target parameters changed during a frozen-base run (epoch " +
                             std::to_string(epoch) + ")");
    }

    EpochRecord rec = ctx.snapshot(eval_model, epoch);
    rec.seconds = seconds;
    rec.train_loss = epoch_loss / std::max(1, batches);
    rec.min_step_loss = min_loss;
    if (needs_dir) {
      if (tag.uld) {
        rec.checkpoint = cfg.out_dir + "/ckpt/epoch_" + std::to_string(epoch) + ".ulda";
        save_assistant(assistant, rec.checkpoint);
      } else {
        rec.checkpoint = cfg.out_dir + "/ckpt/epoch_" + std::to_string(epoch) + ".uldc";
        save_checkpoint(tag.offset ? offset_model : baseline_model, rec.checkpoint);
      }
    }
    run.epochs.push_back(rec);
    if (log) {
      char line[256];
      std::snprintf(line, sizeof(line),
                    "epoch %d/%d loss %.4f forget_ce %.3f holdout_ce %.3f fq %.3g mu %.3f", epoch,
                    cfg.train.epochs, rec.train_loss, rec.forget_ce, rec.holdout_ce,
                    rec.forget_quality, rec.model_utility);
      log(line);
    }
  }

  if ((tag.uld || tag.offset) && fingerprint(*target) != base_fingerprint) {
    throw FrozenParamError("target parameters changed during a frozen-base run");
  }
  if (!tag.uld && !tag.offset) set_trainable(baseline_model, false);

  if (needs_dir) {
    detail::write_epochs_csv(run, cfg.out_dir + "/epochs.csv");
    detail::write_metrics_json(run, cfg.out_dir + "/metrics.json");
  }
  return run;
}

// Truth ratios of a model over the forget evaluation subset; used to score
// the retain reference once and feed every later run.
inline std::vector<double> forget_truth_ratios(const ModelParams<float>& params,
                                               const Corpus& corpus, const Tokenizer& tok,
                                               int eval_max_examples, int max_new_tokens = 16) {
  auto model = model_source(params);
  const auto ids = eval_subset(corpus.forget_ids, eval_max_examples);
  const auto scores = score_split(model, tok, corpus, ids, "forget", max_new_tokens);
  return truth_ratios(scores, corpus, tok);
}

}  // namespace uld
