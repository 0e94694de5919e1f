// Command-line driver: corpus generation, target/retain training, unlearning
// runs for every method tag, scoring, and report emission.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "uld/uld.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "out";
  uld::CorpusConfig corpus;
  uld::ModelConfig model;

  double pretrain_lr = 1e-3;
  int pretrain_batch = 16;
  int pretrain_epochs = 30;

  double baseline_lr = 1e-4;
  double uld_lr = 1e-2;
  int unlearn_batch = 16;
  int unlearn_epochs = 10;
  double retain_weight = 1.0;
  double uld_retain_weight = 6.5;
  double preference_beta = 0.1;
  bool length_normalize_preference = false;
  int lora_rank = 4;
  double lora_alpha = 4.0;
  int prefix_layers = 0;  // 0 = n_layers / 4
  double weight_decay = 0.01;
  double clip_norm = 1.0;

  double combiner_alpha = 0.75;
  double filter_rate = 1e-2;

  std::vector<std::string> methods{"ga+kl", "npo+kl", "dpo+kl", "offset-npo+kl", "uld"};
  int eval_max_examples = 24;
  int eval_max_new_tokens = 16;

  std::string corpus_path() const { return out_dir + "/corpus.json"; }
  std::string vocab_path() const { return out_dir + "/vocab.json"; }
  std::string target_path() const { return out_dir + "/target.uldc"; }
  std::string retain_path() const { return out_dir + "/retain.uldc"; }
  std::string ratios_path() const { return out_dir + "/retain_ratios.json"; }
  std::string run_dir(const std::string& method) const { return out_dir + "/runs/" + method; }
};

ExperimentConfig load_config(const std::string& path) {
  ExperimentConfig cfg;
  cfg.model.d_model = 64;
  cfg.model.n_layers = 4;
  cfg.model.n_heads = 4;
  cfg.model.d_ff = 128;
  cfg.model.max_seq_len = 48;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw uld::ConfigError("cannot open config file: " + path);
    ordered_json j = ordered_json::parse(in, nullptr, false);
    if (j.is_discarded()) throw uld::ConfigError("malformed config file: " + path);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    if (j.contains("corpus")) from_json(j.at("corpus"), cfg.corpus);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      cfg.model.d_model = m.value("d_model", cfg.model.d_model);
      cfg.model.n_layers = m.value("n_layers", cfg.model.n_layers);
      cfg.model.n_heads = m.value("n_heads", cfg.model.n_heads);
      cfg.model.d_ff = m.value("d_ff", cfg.model.d_ff);
      cfg.model.max_seq_len = m.value("max_seq_len", cfg.model.max_seq_len);
      cfg.model.positional = m.value("positional", std::string("rope")) == "learned"
                                 ? uld::Positional::kLearned
                                 : uld::Positional::kRope;
    }
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      cfg.pretrain_lr = p.value("lr", cfg.pretrain_lr);
      cfg.pretrain_batch = p.value("batch_size", cfg.pretrain_batch);
      cfg.pretrain_epochs = p.value("epochs", cfg.pretrain_epochs);
    }
    if (j.contains("unlearn")) {
      const auto& u = j.at("unlearn");
      cfg.baseline_lr = u.value("lr", cfg.baseline_lr);
      cfg.uld_lr = u.value("uld_lr", cfg.uld_lr);
      cfg.unlearn_batch = u.value("batch_size", cfg.unlearn_batch);
      cfg.unlearn_epochs = u.value("epochs", cfg.unlearn_epochs);
      cfg.retain_weight = u.value("retain_weight", cfg.retain_weight);
      cfg.uld_retain_weight = u.value("uld_retain_weight", cfg.uld_retain_weight);
      cfg.preference_beta = u.value("preference_beta", cfg.preference_beta);
      cfg.length_normalize_preference =
          u.value("length_normalize_preference", cfg.length_normalize_preference);
      cfg.lora_rank = u.value("lora_rank", cfg.lora_rank);
      cfg.lora_alpha = u.value("lora_alpha", cfg.lora_alpha);
      cfg.prefix_layers = u.value("prefix_layers", cfg.prefix_layers);
      cfg.weight_decay = u.value("weight_decay", cfg.weight_decay);
      cfg.clip_norm = u.value("clip_norm", cfg.clip_norm);
    }
    if (j.contains("combiner")) {
      const auto& c = j.at("combiner");
      cfg.combiner_alpha = c.value("alpha", cfg.combiner_alpha);
      cfg.filter_rate = c.value("filter_rate", cfg.filter_rate);
    }
    cfg.methods = j.value("methods", cfg.methods);
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      cfg.eval_max_examples = e.value("max_examples", cfg.eval_max_examples);
      cfg.eval_max_new_tokens = e.value("max_new_tokens", cfg.eval_max_new_tokens);
    }
  }
  if (const char* env_seed = std::getenv("ULD_SEED")) {
    cfg.seed = std::strtoull(env_seed, nullptr, 10);
  }
  cfg.corpus.seed = cfg.seed;
  return cfg;
}

void log_line(const std::string& s) { std::cout << s << '\n' << std::flush; }

uld::Corpus ensure_corpus(const ExperimentConfig& cfg, bool regenerate) {
  if (!regenerate && fs::exists(cfg.corpus_path())) {
    std::ifstream in(cfg.corpus_path());
    return uld::corpus_from_json(ordered_json::parse(in));
  }
  fs::create_directories(cfg.out_dir);
  uld::Corpus corpus = uld::generate_corpus(cfg.corpus);
  {
    std::ofstream out(cfg.corpus_path());
    out << uld::corpus_to_json(corpus).dump(2) << '\n';
  }
  {
    uld::Tokenizer tok = uld::Tokenizer::build(corpus);
    std::ofstream out(cfg.vocab_path());
    out << ordered_json(tok.vocab()).dump(2) << '\n';
  }
  return corpus;
}

uld::TrainConfig pretrain_config(const ExperimentConfig& cfg) {
  uld::TrainConfig t;
  t.lr = cfg.pretrain_lr;
  t.batch_size = cfg.pretrain_batch;
  t.epochs = cfg.pretrain_epochs;
  t.weight_decay = cfg.weight_decay;
  t.clip_norm = cfg.clip_norm;
  t.seed = cfg.seed + 1;
  return t;
}

int cmd_gen_corpus(const ExperimentConfig& cfg) {
  uld::Corpus corpus = ensure_corpus(cfg, true);
  log_line("corpus written to " + cfg.corpus_path());
  log_line("forget " + std::to_string(corpus.forget_ids.size()) + ", retain " +
           std::to_string(corpus.retain_ids.size()) + ", forget' " +
           std::to_string(corpus.forget_prime.size()) + ", retain' " +
           std::to_string(corpus.retain_prime.size()) + ", holdout " +
           std::to_string(corpus.holdout_ids.size()));
  return 0;
}

int train_model(const ExperimentConfig& cfg, bool include_forget) {
  uld::Corpus corpus = ensure_corpus(cfg, false);
  uld::Tokenizer tok = uld::Tokenizer::build(corpus);
  uld::ModelConfig mc = cfg.model;
  mc.vocab_size = tok.vocab_size();
  uld::ModelParams<float> params = uld::init_params<float>(mc, cfg.seed);
  const auto items = uld::pretraining_items(corpus, include_forget);
  const auto batches = uld::make_batches(tok, items, uld::Batch::Source::kRetain);
  log_line(std::string(include_forget ? "target" : "retain") + " model: " +
           std::to_string(uld::count_total(params)) + " params, " + std::to_string(items.size()) +
           " training items");
  uld::TrainConfig tc = pretrain_config(cfg);
  if (!include_forget) tc.seed = cfg.seed + 2;
  uld::finetune(params, batches, tc, log_line);
  const std::string path = include_forget ? cfg.target_path() : cfg.retain_path();
  uld::save_checkpoint(params, path);
  log_line("saved " + path);
  if (!include_forget) {
    const auto ratios = uld::forget_truth_ratios(params, corpus, tok, cfg.eval_max_examples,
                                                 cfg.eval_max_new_tokens);
    std::ofstream out(cfg.ratios_path());
    out << ordered_json(ratios).dump(2) << '\n';
    log_line("saved " + cfg.ratios_path());
  }
  return 0;
}

uld::UnlearnConfig unlearn_config(const ExperimentConfig& cfg, const std::string& method) {
  const uld::MethodTag tag = uld::MethodTag::parse(method);
  uld::UnlearnConfig u;
  u.train.lr = tag.uld ? cfg.uld_lr : cfg.baseline_lr;
  u.train.batch_size = cfg.unlearn_batch;
  u.train.epochs = cfg.unlearn_epochs;
  u.train.weight_decay = cfg.weight_decay;
  u.train.clip_norm = cfg.clip_norm;
  u.train.seed = cfg.seed + 3;
  u.train.loss.method = tag.text;
  u.train.loss.retain_weight = tag.uld ? cfg.uld_retain_weight : cfg.retain_weight;
  u.train.loss.preference_beta = cfg.preference_beta;
  u.train.loss.length_normalize_preference = cfg.length_normalize_preference;
  u.combiner.alpha = cfg.combiner_alpha;
  u.combiner.filter_rate = cfg.filter_rate;
  u.lora_rank = cfg.lora_rank;
  u.lora_alpha = cfg.lora_alpha;
  u.prefix_layers = cfg.prefix_layers;
  u.eval_max_examples = cfg.eval_max_examples;
  u.eval_max_new_tokens = cfg.eval_max_new_tokens;
  u.out_dir = cfg.run_dir(tag.text);
  return u;
}

std::vector<double> load_ratios(const ExperimentConfig& cfg) {
  std::ifstream in(cfg.ratios_path());
  if (!in) {
    throw uld::ConfigError("missing " + cfg.ratios_path() +
                           "; run train-retain first or pass --all");
  }
  return ordered_json::parse(in).get<std::vector<double>>();
}

int cmd_unlearn(const ExperimentConfig& cfg, const std::string& method, bool run_all) {
  ensure_corpus(cfg, false);
  if (!fs::exists(cfg.target_path())) {
    if (!run_all) throw uld::ConfigError("missing " + cfg.target_path() + "; run train-target first");
    train_model(cfg, true);
  }
  if (!fs::exists(cfg.retain_path()) || !fs::exists(cfg.ratios_path())) {
    if (!run_all) throw uld::ConfigError("missing " + cfg.retain_path() + "; run train-retain first");
    train_model(cfg, false);
  }
  uld::Corpus corpus = ensure_corpus(cfg, false);
  uld::Tokenizer tok = uld::Tokenizer::build(corpus);
  auto target =
      std::make_shared<const uld::ModelParams<float>>(uld::load_checkpoint(cfg.target_path()));
  const auto ratios = load_ratios(cfg);

  const std::vector<std::string> methods =
      run_all ? cfg.methods : std::vector<std::string>{method};
  for (const auto& m : methods) {
    log_line("=== unlearn " + m + " ===");
    uld::UnlearnConfig u = unlearn_config(cfg, m);
    uld::RunRecord run = uld::unlearn(target, corpus, tok, ratios, u, log_line);
    const auto& best = run.best();
    log_line("best epoch " + std::to_string(best.epoch) + ": forget_quality " +
             std::to_string(best.forget_quality) + ", model_utility " +
             std::to_string(best.model_utility));
    log_line("run directory: " + u.out_dir);
  }
  return 0;
}

// Rebuilds the chosen epoch's combined model for a finished run and emits the
// score dump plus report.json / report.csv.
int cmd_eval(const ExperimentConfig& cfg, const std::string& run_dir, int epoch) {
  std::ifstream metrics_in(run_dir + "/metrics.json");
  if (!metrics_in) throw uld::ConfigError("missing metrics.json under " + run_dir);
  ordered_json metrics = ordered_json::parse(metrics_in);
  const std::string method = metrics.at("method").get<std::string>();
  const uld::MethodTag tag = uld::MethodTag::parse(method);

  if (epoch <= 0) {
    double best_fq = -1.0, best_mu = -1.0;
    for (const auto& e : metrics.at("epochs")) {
      const double fq = e.at("forget_quality").get<double>();
      const double mu = e.at("model_utility").get<double>();
      if (fq > best_fq || (fq == best_fq && mu > best_mu)) {
        best_fq = fq;
        best_mu = mu;
        epoch = e.at("epoch").get<int>();
      }
    }
  }
  const std::string stem = run_dir + "/ckpt/epoch_" + std::to_string(epoch);

  uld::Corpus corpus = ensure_corpus(cfg, false);
  uld::Tokenizer tok = uld::Tokenizer::build(corpus);
  auto target =
      std::make_shared<const uld::ModelParams<float>>(uld::load_checkpoint(cfg.target_path()));
  const auto ratios = load_ratios(cfg);

  uld::CombinerConfig combiner;
  combiner.alpha = cfg.combiner_alpha;
  combiner.filter_rate = cfg.filter_rate;

  uld::AssistantModel<float> assistant;
  uld::ModelParams<float> loaded_model, offset_reference;
  uld::CombinedModel<float> model = uld::model_source(*target);
  if (tag.uld) {
    assistant = uld::load_assistant(stem + ".ulda", target);
    combiner.mode = uld::CombineMode::kUld;
    model = uld::uld_source(*target, assistant, combiner);
  } else if (tag.offset) {
    loaded_model = uld::load_checkpoint(stem + ".uldc");
    std::ifstream run_in(run_dir + "/run.json");
    ordered_json run_json = ordered_json::parse(run_in);
    // The pre-fine-tuning snapshot is reproducible from the recorded seed.
    offset_reference =
        uld::init_params<float>(loaded_model.config, run_json.at("seed").get<std::uint64_t>() + 1);
    combiner.mode = uld::CombineMode::kOffset;
    model = uld::offset_source(*target, loaded_model, offset_reference, combiner);
  } else {
    loaded_model = uld::load_checkpoint(stem + ".uldc");
    model = uld::model_source(loaded_model);
  }

  const int cap = cfg.eval_max_examples;
  auto forget_scores = uld::score_split(model, tok, corpus, uld::eval_subset(corpus.forget_ids, cap),
                                        "forget", cfg.eval_max_new_tokens);
  auto holdout_scores =
      uld::score_split(model, tok, corpus, uld::eval_subset(corpus.holdout_ids, cap),
                       "holdout_fictional", cfg.eval_max_new_tokens);
  auto famous_scores = uld::score_split(model, tok, corpus, uld::eval_subset(corpus.famous_ids, cap),
                                        "famous", cfg.eval_max_new_tokens);
  auto world_scores = uld::score_split(model, tok, corpus, uld::eval_subset(corpus.world_ids, cap),
                                       "world_facts", cfg.eval_max_new_tokens);

  std::vector<uld::ScoredExample> all_scores;
  for (const auto* group : {&forget_scores, &holdout_scores, &famous_scores, &world_scores}) {
    all_scores.insert(all_scores.end(), group->begin(), group->end());
  }
  uld::write_score_dump(all_scores, run_dir + "/scores_epoch_" + std::to_string(epoch) + ".jsonl");

  const double ppl =
      uld::corpus_perplexity(model, tok, corpus.texts(uld::eval_subset(corpus.holdout_ids, cap)));
  uld::EvalReport report = uld::build_report(forget_scores, holdout_scores, famous_scores,
                                             world_scores, ratios, ppl, corpus, tok);
  {
    std::ofstream out(run_dir + "/report.json");
    out << uld::report_to_json(report).dump(2) << '\n';
  }
  {
    std::ofstream out(run_dir + "/report.csv");
    out << "method,epoch,forget_quality,forget_rouge,model_utility,retain_rouge,perplexity\n";
    char line[256];
    std::snprintf(line, sizeof(line), "%s,%d,%.17g,%.17g,%.17g,%.17g,%.17g", method.c_str(), epoch,
                  report.forget_quality, report.forget_rouge, report.model_utility,
                  report.holdout_fictional.rouge, report.perplexity);
    out << line << '\n';
  }
  log_line("wrote " + run_dir + "/report.json");
  return 0;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  ordered_json summary = ordered_json::array();
  for (const auto& dir : run_dirs) {
    std::ifstream metrics_in(dir + "/metrics.json");
    if (!metrics_in) throw uld::ConfigError("missing metrics.json under " + dir);
    ordered_json metrics = ordered_json::parse(metrics_in);
    const ordered_json* best = nullptr;
    double seconds_total = 0.0;
    for (const auto& e : metrics.at("epochs")) {
      seconds_total += e.at("seconds").get<double>();
      if (best == nullptr ||
          e.at("forget_quality").get<double>() > best->at("forget_quality").get<double>() ||
          (e.at("forget_quality").get<double>() == best->at("forget_quality").get<double>() &&
           e.at("model_utility").get<double>() > best->at("model_utility").get<double>())) {
        best = &e;
      }
    }
    if (best == nullptr) throw uld::ConfigError("run has no epochs: " + dir);
    const double n_epochs = static_cast<double>(metrics.at("epochs").size());
    const double trainable = metrics.at("trainable_params").get<double>();
    const double total = metrics.at("total_params").get<double>();
    summary.push_back(ordered_json{{"method", metrics.at("method")},
                                   {"best_epoch", best->at("epoch")},
                                   {"forget_quality", best->at("forget_quality")},
                                   {"forget_rouge", best->at("forget_rouge")},
                                   {"model_utility", best->at("model_utility")},
                                   {"retain_rouge", best->at("retain_rouge")},
                                   {"perplexity", best->at("perplexity")},
                                   {"trainable_fraction", trainable / total},
                                   {"seconds_per_epoch", seconds_total / n_epochs}});
  }
  fs::create_directories(out_dir);
  {
    std::ofstream out(out_dir + "/summary.json");
    out << summary.dump(2) << '\n';
  }
  {
    std::ofstream out(out_dir + "/summary.csv");
    out << "method,best_epoch,forget_quality,forget_rouge,model_utility,retain_rouge,perplexity,"
           "trainable_fraction,seconds_per_epoch\n";
    for (const auto& row : summary) {
      char line[512];
      std::snprintf(line, sizeof(line), "%s,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.6f",
                    row.at("method").get<std::string>().c_str(), row.at("best_epoch").get<int>(),
                    row.at("forget_quality").get<double>(), row.at("forget_rouge").get<double>(),
                    row.at("model_utility").get<double>(), row.at("retain_rouge").get<double>(),
                    row.at("perplexity").get<double>(), row.at("trainable_fraction").get<double>(),
                    row.at("seconds_per_epoch").get<double>());
      out << line << '\n';
    }
  }
  log_line("wrote " + out_dir + "/summary.csv");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale unlearning laboratory"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  app.add_option("--config", config_path, "experiment config JSON")->envname("ULD_CONFIG");
  app.add_option("--out", out_override, "override the output directory");

  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus");
  auto* train_target = app.add_subcommand("train-target", "train the target model on everything");
  auto* train_retain = app.add_subcommand("train-retain", "train the retain-only reference model");

  auto* unlearn_cmd = app.add_subcommand("unlearn", "run an unlearning method");
  std::string method = "uld";
  bool run_all = false;
  unlearn_cmd->add_option("--method", method, "method tag, e.g. ga+kl, npo+gd, offset-npo+kl, uld");
  unlearn_cmd->add_flag("--all", run_all, "run every configured method; builds prerequisites");

  auto* eval_cmd = app.add_subcommand("eval", "score a finished run");
  std::string eval_run;
  int eval_epoch = 0;
  eval_cmd->add_option("--run", eval_run, "run directory")->required();
  eval_cmd->add_option("--epoch", eval_epoch, "epoch to evaluate (default: best)");

  auto* report_cmd = app.add_subcommand("report", "summarize finished runs");
  std::vector<std::string> report_dirs;
  report_cmd->add_option("dirs", report_dirs, "run directories")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = load_config(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (gen->parsed()) return cmd_gen_corpus(cfg);
    if (train_target->parsed()) return train_model(cfg, true);
    if (train_retain->parsed()) return train_model(cfg, false);
    if (unlearn_cmd->parsed()) return cmd_unlearn(cfg, method, run_all);
    if (eval_cmd->parsed()) return cmd_eval(cfg, eval_run, eval_epoch);
    if (report_cmd->parsed()) return cmd_report(report_dirs, cfg.out_dir);
  } catch (const uld::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const uld::CapacityError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const uld::FrozenParamError& e) {
    std::cerr << "frozen-parameter violation: " << e.what() << '\n';
    return 3;
  } catch (const uld::NanLossError& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
