// Copyright 2026 The ehrbert Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ehrbert/cli/manifest.hpp"
#include "ehrbert/ehr/jsonl.hpp"
#include "ehrbert/eval/experiments.hpp"
#include "ehrbert/eval/grad_suite.hpp"
#include "ehrbert/pretrain/pretrainer.hpp"
#include "ehrbert/viz/attention.hpp"

namespace ehrbert::cli {

/// Bad flags, unknown keys or malformed values: exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

/// "key = value" lines; '#' starts a comment.
inline std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> out;
  std::istringstream is(text);
  std::string line;
  for (std::size_t no = 1; std::getline(is, line); ++no) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(origin + ":" + std::to_string(no) + ": expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError(origin + ":" + std::to_string(no) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

inline std::string to_text(const std::string& v) { return v; }
inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(double v) { return format_double(v); }
inline std::string to_text(std::size_t v) { return std::to_string(v); }
inline std::string to_text(int v) { return std::to_string(v); }
inline std::string to_text(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline const char* type_name(const std::string&) { return "TEXT"; }
inline const char* type_name(bool) { return "BOOL"; }
inline const char* type_name(double) { return "FLOAT"; }
inline const char* type_name(std::size_t) { return "UINT"; }
inline const char* type_name(int) { return "UINT"; }
inline const char* type_name(const std::vector<std::size_t>&) { return "UINT,..."; }

inline std::size_t parse_size(const std::string& s) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) throw UsageError("not a count: '" + s + "'");
  try {
    return static_cast<std::size_t>(std::stoull(s));
  } catch (const std::exception&) {
    throw UsageError("count out of range: '" + s + "'");
  }
}

inline void from_text(const std::string& s, std::string& v) { v = s; }
inline void from_text(const std::string& s, std::size_t& v) { v = parse_size(s); }
inline void from_text(const std::string& s, int& v) {
  const auto n = parse_size(s);
  if (n > 1000000) throw UsageError("value too large: '" + s + "'");
  v = static_cast<int>(n);
}
inline void from_text(const std::string& s, double& v) {
  try {
    v = parse_double(s);
  } catch (const IoError&) {
    throw UsageError("not a number: '" + s + "'");
  }
}
inline void from_text(const std::string& s, bool& v) {
  if (s == "true" || s == "1" || s == "yes") {
    v = true;
  } else if (s == "false" || s == "0" || s == "no") {
    v = false;
  } else {
    throw UsageError("not a boolean: '" + s + "'");
  }
}
inline void from_text(const std::string& s, std::vector<std::size_t>& v) {
  v.clear();
  std::istringstream is(s);
  std::string item;
  while (std::getline(is, item, ',')) v.push_back(parse_size(trim(item)));
  if (v.empty()) throw UsageError("empty list");
}

}  // namespace detail

/// One subcommand's flat key set. Every key is a --flag and may also come
/// from --config; flags win over the file, the file over defaults.
class Command {
 public:
  Command(CLI::App& app, const std::string& name, const std::string& description)
      : name_(name), app_(app.add_subcommand(name, description)) {
    app_->add_option("--config", config_path_, "flat key = value file; flags override it");
  }

  const std::string& name() const { return name_; }
  CLI::App* app() const { return app_; }
  bool parsed() const { return app_->parsed(); }

  template <typename V>
  void key(const std::string& name, V& target, const std::string& help, const std::string& alias = "") {
    auto k = std::make_unique<Key>();
    k->name = name;
    k->value = detail::to_text(target);
    k->set = [&target, name](const std::string& s) {
      try {
        detail::from_text(s, target);
      } catch (const UsageError& e) {
        throw UsageError("--" + name + ": " + e.what());
      }
    };
    const std::string flags = "--" + name + (alias.empty() ? "" : ",--" + alias);
    k->option = app_->add_option(flags, k->flag, help)->default_str(k->value)->type_name(detail::type_name(target));
    keys_.push_back(std::move(k));
  }

  /// Key that must be given (by flag or config file).
  void required(const std::string& name, std::string& target, const std::string& help) {
    key(name, target, help + " [required]");
    keys_.back()->required = true;
  }

  /// Applies config file, then flags; rejects unknown and missing keys.
  void resolve() {
    if (!config_path_.empty()) {
      const auto file = detail::parse_config_text(read_file(config_path_), config_path_);
      for (const auto& [k, v] : file) {
        Key* key = find(k);
        if (!key) throw UsageError(config_path_ + ": unknown key '" + k + "' for '" + name_ + "'");
        key->value = v;
        key->given = true;
      }
    }
    for (auto& k : keys_) {
      if (k->option->count() > 0) {
        k->value = k->flag;
        k->given = true;
      }
      if (k->required && (!k->given || k->value.empty())) throw UsageError("--" + k->name + " is required");
      k->set(k->value);
    }
  }

  std::map<std::string, std::string> snapshot() const {
    std::map<std::string, std::string> out;
    for (const auto& k : keys_) out[k->name] = k->value;
    return out;
  }

 private:
  struct Key {
    std::string name, value, flag;
    bool required = false, given = false;
    std::function<void(const std::string&)> set;
    CLI::Option* option = nullptr;
  };

  Key* find(const std::string& name) {
    for (auto& k : keys_)
      if (k->name == name) return k.get();
    return nullptr;
  }

  std::string name_;
  CLI::App* app_;
  std::string config_path_;
  std::vector<std::unique_ptr<Key>> keys_;
};

namespace detail {

struct Common {
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
  std::string out;
};

inline void add_common(Command& c, Common& common, bool out_required, const std::string& out_help) {
  c.key("seed", common.seed, "single seed for all randomness");
  c.key("jobs", common.jobs, "worker threads (0 = hardware concurrency)");
  if (out_required) {
    c.required("out", common.out, out_help);
  } else {
    c.key("out", common.out, out_help);
  }
}

inline void add_synth_keys(Command& c, synth::SynthConfig& s) {
  c.key("n_patients", s.n_patients, "patients to generate", "n");
  c.key("vocab_size", s.vocab_size, "distinct diagnosis codes");
  c.key("mean_visits", s.mean_visits, "mean visits per patient");
  c.key("mean_codes_per_visit", s.mean_codes_per_visit, "mean codes per visit");
  c.key("outcome_prevalence", s.outcome_prevalence, "target outcome rate");
  c.key("signal_strength", s.signal_strength, "outcome log-odds per distinct risk code");
  c.key("prolonged_los_rate", s.prolonged_los_rate, "target prolonged-stay patient rate");
  c.key("world_seed", s.world_seed, "seed of the shared code population (topics, risk codes)");
  c.key("n_topics", s.n_topics, "latent code topics");
  c.key("topic_affinity", s.topic_affinity, "chance a code comes from the patient's topics");
  c.key("zipf_exponent", s.zipf_exponent, "code popularity exponent");
  c.key("risk_code_cap", s.risk_code_cap, "distinct risk codes counted at most");
  c.key("los_burden_slope", s.los_burden_slope, "prolonged-stay log-odds per sd of code count");
}

inline void add_model_keys(Command& c, model::MedBertConfig& m) {
  c.key("n_layers", m.n_layers, "transformer layers");
  c.key("n_heads", m.n_heads, "attention heads");
  c.key("head_dim", m.head_dim, "width per head");
  c.key("hidden_dim", m.hidden_dim, "model width (n_heads * head_dim)");
  c.key("ffn_dim", m.ffn_dim, "feed-forward inner width");
  c.key("max_seq_len", m.max_seq_len, "codes kept per patient (most recent)");
  c.key("max_visits", m.max_visits, "visit embedding rows");
  c.key("max_codes_per_visit", m.max_codes_per_visit, "serialization embedding rows");
  c.key("dropout_rate", m.dropout_rate, "dropout probability");
  c.key("init_std", m.init_std, "weight init standard deviation");
  c.key("layer_norm_eps", m.layer_norm_eps, "layer norm epsilon");
  c.key("pre_norm", m.pre_norm, "pre-norm encoder blocks");
  c.key("tie_mlm_weights", m.tie_mlm_weights, "tie MLM output to code embeddings");
}

struct FinetuneKeys {
  eval::FinetuneConfig ft;
  std::string cohort, vocab, med_bert, skipgram;
  std::string model = "GRU";
  std::size_t train_size = 0;
};

inline void add_finetune_keys(Command& c, FinetuneKeys& f, bool with_model) {
  c.required("cohort", f.cohort, "labelled cohort JSONL (split 7:1:2 by --seed)");
  c.required("vocab", f.vocab, "vocabulary file (from pretrain or vocab)");
  c.key("med_bert", f.med_bert, "pretrained Med-BERT checkpoint");
  c.key("skipgram", f.skipgram, "skip-gram checkpoint");
  if (with_model) {
    c.key("model", f.model, "condition label, e.g. GRU, Bi-GRU+t-W2V, RETAIN+Med-BERT, Med-BERT_only (FFL)");
    c.key("train_size", f.train_size, "subsample the training split (0 = all)");
  }
  c.key("max_epochs", f.ft.max_epochs, "training epochs at most");
  c.key("batch_size", f.ft.batch_size, "patients per step");
  c.key("lr", f.ft.lr, "AdamW learning rate");
  c.key("weight_decay", f.ft.weight_decay, "AdamW decoupled weight decay");
  c.key("max_grad_norm", f.ft.max_grad_norm, "global gradient clipping norm (0 = off)");
  c.key("early_stop_patience", f.ft.early_stop_patience, "epochs without validation gain before stopping");
  c.key("rnn_hidden", f.ft.rnn_hidden, "GRU/RETAIN hidden width");
  c.key("freeze_encoder", f.ft.freeze_encoder, "keep Med-BERT encoder weights fixed");
}

struct SkipGramKeys {
  baselines::SkipGramConfig sg;
  std::string cohort;
};

inline void add_skipgram_keys(Command& c, SkipGramKeys& s) {
  s.sg.dim = 0;
  c.key("sg_cohort", s.cohort, "cohort for skip-gram training when no checkpoint is given (default: training split)");
  c.key("sg_dim", s.sg.dim, "skip-gram width (0 = Med-BERT hidden_dim, else 32)");
  c.key("sg_window", s.sg.window, "skip-gram context window");
  c.key("sg_negatives", s.sg.negatives, "negative samples per pair");
  c.key("sg_steps", s.sg.steps, "skip-gram optimizer steps");
  c.key("sg_batch_size", s.sg.batch_size, "skip-gram pairs per step");
  c.key("sg_lr", s.sg.lr, "skip-gram learning rate");
}

struct Loaded {
  ehr::Vocabulary vocab;
  std::vector<ehr::ModelInput> train, valid, test;
  std::optional<model::MedBert<float>> med_bert;
  std::optional<baselines::SkipGramParams> skipgram;
  std::vector<std::string> inputs;
};

inline std::vector<ehr::ModelInput> encode_all(const std::vector<ehr::PatientRecord>& records,
                                               const ehr::Vocabulary& vocab, std::size_t max_len) {
  std::vector<ehr::ModelInput> out;
  out.reserve(records.size());
  for (const auto& p : records) out.push_back(ehr::encode_patient(p, vocab, {max_len, false}));
  return out;
}

inline Loaded load_finetune_inputs(const FinetuneKeys& f, std::uint64_t seed) {
  Loaded l;
  l.vocab = ehr::Vocabulary::load(f.vocab);
  l.inputs = {f.cohort, f.vocab};
  std::size_t max_len = model::MedBertConfig{}.max_seq_len;
  if (!f.med_bert.empty()) {
    l.med_bert.emplace(model::load_med_bert<float>(f.med_bert));
    if (l.med_bert->config().vocab_size != l.vocab.size())
      throw ConfigError(f.med_bert + " was trained with a vocabulary of " +
                        std::to_string(l.med_bert->config().vocab_size) + " tokens; " + f.vocab + " has " +
                        std::to_string(l.vocab.size()));
    max_len = l.med_bert->config().max_seq_len;
    l.inputs.push_back(f.med_bert);
  }
  if (!f.skipgram.empty()) {
    l.skipgram = baselines::load_skipgram(f.skipgram);
    l.inputs.push_back(f.skipgram);
  }
  const auto cohort = ehr::load_jsonl(f.cohort);
  const auto split = synth::split_cohort(cohort, {}, seed);
  l.train = encode_all(split.train, l.vocab, max_len);
  l.valid = encode_all(split.valid, l.vocab, max_len);
  l.test = encode_all(split.test, l.vocab, max_len);
  return l;
}

/// Trains skip-gram embeddings when a requested condition needs them and
/// no checkpoint was given; writes out_dir/skipgram.ckpt.
inline void ensure_skipgram(Loaded& l, const std::vector<baselines::ModelSpec>& conditions, SkipGramKeys s,
                            std::uint64_t seed, const std::string& out_dir, std::vector<std::string>& outputs,
                            std::ostream& out) {
  bool needed = false;
  for (const auto& c : conditions) needed = needed || c.needs_skipgram();
  if (!needed || l.skipgram) return;
  if (s.sg.dim == 0) s.sg.dim = l.med_bert ? l.med_bert->config().hidden_dim : 32;
  s.sg.seed = derive_seed(seed, {0x736b67ULL});
  std::vector<ehr::ModelInput> corpus;
  if (s.cohort.empty()) {
    corpus = l.train;
  } else {
    corpus = encode_all(ehr::load_jsonl(s.cohort), l.vocab, model::MedBertConfig{}.max_seq_len);
    l.inputs.push_back(s.cohort);
  }
  out << "training skip-gram embeddings (" << s.sg.steps << " steps, dim " << s.sg.dim << ")\n";
  l.skipgram = baselines::train_skipgram(corpus, l.vocab.size(), s.sg);
  const std::string path = out_dir + "/skipgram.ckpt";
  baselines::save_skipgram(path, *l.skipgram);
  outputs.push_back(path);
}

inline std::vector<baselines::ModelSpec> parse_conditions(const std::string& text) {
  if (text == "all") return baselines::ex1_conditions();
  std::vector<baselines::ModelSpec> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(baselines::ModelSpec::parse(trim(item)));
  if (out.empty()) throw ConfigError("no conditions given");
  return out;
}

inline void write_manifest(const Command& c, const std::string& dir, std::vector<std::string> inputs,
                           std::vector<std::string> outputs) {
  const std::string config_path = dir + "/run.config";
  write_file(config_path, config_text(c.snapshot()));
  outputs.push_back(config_path);
  Manifest m{c.name(), c.snapshot(), std::move(inputs), std::move(outputs)};
  m.write(dir + "/manifest.json");
}

inline void print_report(const eval::ExperimentReport& rep, std::ostream& out) {
  for (const auto& r : rep.rows) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%6zu  %-22s  %.4f +- %.4f  (n=%zu)\n", r.size, r.condition.c_str(), r.mean, r.std,
                  r.aucs.size());
    out << buf;
  }
}

}  // namespace detail

/// Parses and runs one subcommand. Returns the process exit code:
/// 0 success, 1 usage or configuration error, 2 runtime error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Med-BERT style pretraining and evaluation on structured EHR sequences", "ehrbert"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  detail::Common common;
  synth::SynthConfig synth_cfg;
  model::MedBertConfig model_cfg;
  pretrain::PretrainConfig pre_cfg;
  std::string cohort, resume_from, vocab_path;
  detail::FinetuneKeys ft;
  detail::SkipGramKeys sg;
  std::size_t replicates = 10;
  std::string conditions = "all";
  std::vector<std::size_t> sizes = {100, 300, 500, 1000, 2000, 5000};
  double sweep_valid_fraction = 0.25;
  std::string patient_id, head = "all";
  std::size_t layer = 0;
  double threshold = 0.05;
  model::MedBertConfig micro = eval::micro_med_bert_config();
  ad::GradCheckOptions gc_opt;
  std::string gc_models = "all";

  Command synth_cmd(app, "synth", "generate a synthetic cohort (JSONL)");
  detail::add_common(synth_cmd, common, true, "output JSONL path");
  detail::add_synth_keys(synth_cmd, synth_cfg);

  Command vocab_cmd(app, "vocab", "build the vocabulary of a cohort");
  detail::add_common(vocab_cmd, common, true, "output vocabulary path");
  vocab_cmd.required("cohort", cohort, "cohort JSONL");

  Command pre_cmd(app, "pretrain", "pretrain Med-BERT (masked LM + prolonged LOS)");
  detail::add_common(pre_cmd, common, true, "output directory");
  pre_cmd.required("cohort", cohort, "cohort JSONL");
  pre_cmd.key("resume_from", resume_from, "checkpoint to resume from (vocabulary read from --out)");
  detail::add_model_keys(pre_cmd, model_cfg);
  pre_cmd.key("batch_size", pre_cfg.batch_size, "patients per step");
  pre_cmd.key("total_steps", pre_cfg.total_steps, "optimizer steps");
  pre_cmd.key("lr", pre_cfg.lr, "AdamW learning rate");
  pre_cmd.key("weight_decay", pre_cfg.weight_decay, "AdamW decoupled weight decay");
  pre_cmd.key("max_grad_norm", pre_cfg.max_grad_norm, "global gradient clipping norm (0 = off)");
  pre_cmd.key("warmup_steps", pre_cfg.warmup_steps, "linear learning-rate warmup steps");
  pre_cmd.key("los_loss_weight", pre_cfg.los_loss_weight, "weight of the prolonged-LOS loss");
  pre_cmd.key("los_task", pre_cfg.los_task, "train the prolonged-LOS head");
  pre_cmd.key("eval_every", pre_cfg.eval_every, "steps between validation LOS AUC rows");
  pre_cmd.key("checkpoint_every", pre_cfg.checkpoint_every, "steps between checkpoints (0 = final only)");
  pre_cmd.key("valid_fraction", pre_cfg.valid_fraction, "held-out fraction for LOS AUC");

  Command ft_cmd(app, "finetune", "fine-tune one predictor on the outcome label");
  detail::add_common(ft_cmd, common, true, "output directory");
  detail::add_finetune_keys(ft_cmd, ft, true);

  Command ex1_cmd(app, "ex1", "every baseline with and without pretrained inputs, replicated");
  detail::add_common(ex1_cmd, common, true, "output directory");
  detail::add_finetune_keys(ex1_cmd, ft, false);
  detail::add_skipgram_keys(ex1_cmd, sg);
  ex1_cmd.key("replicates", replicates, "re-initialised runs per condition");
  ex1_cmd.key("conditions", conditions, "comma-separated condition labels or 'all'");

  Command sweep_cmd(app, "sweep", "training-size sweep over bootstrap subsamples");
  detail::add_common(sweep_cmd, common, true, "output directory");
  detail::add_finetune_keys(sweep_cmd, ft, false);
  detail::add_skipgram_keys(sweep_cmd, sg);
  sweep_cmd.key("replicates", replicates, "subsamples per size");
  sweep_cmd.key("conditions", conditions, "comma-separated condition labels or 'all'");
  sweep_cmd.key("sizes", sizes, "comma-separated training sizes");
  sweep_cmd.key("sweep_valid_fraction", sweep_valid_fraction, "validation share of each subsample");

  Command viz_cmd(app, "viz", "attention maps of one patient as HTML, JSON and locality CSV");
  detail::add_common(viz_cmd, common, true, "output directory");
  viz_cmd.required("med_bert", ft.med_bert, "Med-BERT checkpoint");
  viz_cmd.required("vocab", vocab_path, "vocabulary file");
  viz_cmd.required("cohort", cohort, "cohort JSONL");
  viz_cmd.key("patient_id", patient_id, "patient to show (default: first)");
  viz_cmd.key("layer", layer, "layer to render");
  viz_cmd.key("head", head, "head to render or 'all'");
  viz_cmd.key("threshold", threshold, "smallest weight drawn");

  Command gc_cmd(app, "gradcheck", "finite-difference gradient checks at float64");
  detail::add_common(gc_cmd, common, false, "optional output directory");
  micro.dropout_rate = 0.0;
  gc_cmd.key("vocab_size", micro.vocab_size, "micro Med-BERT vocabulary");
  detail::add_model_keys(gc_cmd, micro);
  gc_cmd.key("models", gc_models, "comma-separated subset of med_bert,gru,bigru,retain,skipgram or 'all'");
  gc_cmd.key("tolerance", gc_opt.tolerance, "largest accepted relative error");
  gc_cmd.key("step", gc_opt.step, "central-difference step");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int code = app.exit(e, out, err);
      return code == 0 ? kExitOk : kExitUsage;
    }
    const std::vector<Command*> commands = {&synth_cmd, &vocab_cmd, &pre_cmd,   &ft_cmd,
                                            &ex1_cmd,   &sweep_cmd, &viz_cmd, &gc_cmd};
    Command* cmd = nullptr;
    for (auto* c : commands)
      if (c->parsed()) cmd = c;
    cmd->resolve();
    const std::string& name = cmd->name();
    const std::size_t jobs = resolve_jobs(common.jobs);

    if (name == "synth") {
      synth_cfg.seed = common.seed;
      const auto records = synth::generate_cohort(synth_cfg);
      ehr::save_jsonl(common.out, records);
      write_file(common.out + ".config", config_text(cmd->snapshot()));
      Manifest{name, cmd->snapshot(), {}, {common.out, common.out + ".config"}}.write(common.out + ".manifest.json");
      out << "wrote " << records.size() << " patients to " << common.out << "\n";
      return kExitOk;
    }
    if (name == "vocab") {
      const auto vocab = ehr::build_vocabulary(ehr::load_jsonl(cohort));
      vocab.save(common.out);
      Manifest{name, cmd->snapshot(), {cohort}, {common.out}}.write(common.out + ".manifest.json");
      out << "vocabulary of " << vocab.size() << " tokens written to " << common.out << "\n";
      return kExitOk;
    }

    if (!common.out.empty()) std::filesystem::create_directories(common.out);
    const std::string& dir = common.out;

    if (name == "pretrain") {
      pre_cfg.seed = common.seed;
      pre_cfg.jobs = jobs;
      const auto rep = pretrain::run_pretraining(cohort, model_cfg, pre_cfg, dir, resume_from);
      pretrain::PretrainOutput po{dir};
      std::vector<std::string> outputs = {dir + "/vocab.tsv", dir + "/pretrain_config.json", po.curve_path(),
                                          po.final_checkpoint()};
      outputs.insert(outputs.end(), rep.checkpoints.begin(), rep.checkpoints.end());
      std::vector<std::string> inputs = {cohort};
      if (!resume_from.empty()) inputs.push_back(resume_from);
      detail::write_manifest(*cmd, dir, inputs, outputs);
      out << "pretrained " << pre_cfg.total_steps << " steps; final masked-LM loss " << rep.final_mlm_loss
          << "; checkpoint " << po.final_checkpoint() << "\n";
      return kExitOk;
    }
    if (name == "finetune") {
      auto l = detail::load_finetune_inputs(ft, common.seed);
      ft.ft.spec = baselines::ModelSpec::parse(ft.model);
      ft.ft.seed = common.seed;
      ft.ft.jobs = jobs;
      if (ft.train_size > 0) {
        l.train = synth::subsample_items(l.train, ft.train_size, derive_seed(common.seed, {0x747273ULL}),
                                         [](const ehr::ModelInput& in) { return in.outcome_label.value_or(false); });
      }
      const baselines::Artifacts<float> artifacts{l.med_bert ? &*l.med_bert : nullptr,
                                                  l.skipgram ? &*l.skipgram : nullptr};
      std::unique_ptr<baselines::Predictor<float>> model;
      const auto r = eval::run_finetune<float>(l.train, l.valid, l.test, ft.ft, artifacts, l.vocab.size(), &model);
      const std::string result_path = dir + "/result.json", model_path = dir + "/model.ckpt";
      write_file(result_path, nlohmann::ordered_json{{"model", ft.model},
                                                     {"train_size", l.train.size()},
                                                     {"test_auc", r.test_auc},
                                                     {"best_valid_auc", r.best_valid_auc},
                                                     {"best_epoch", r.best_epoch},
                                                     {"epochs_run", r.epochs_run},
                                                     {"valid_auc_per_epoch", r.valid_auc_per_epoch}}
                                      .dump(2) + "\n");
      baselines::save_predictor(model_path, *model, eval::predictor_config(ft.ft, artifacts, l.vocab.size()));
      detail::write_manifest(*cmd, dir, l.inputs, {result_path, model_path});
      out << ft.model << ": test AUC " << r.test_auc << " (best validation AUC " << r.best_valid_auc << " at epoch "
          << r.best_epoch << ")\n";
      return kExitOk;
    }
    if (name == "ex1" || name == "sweep") {
      auto l = detail::load_finetune_inputs(ft, common.seed);
      eval::ExperimentConfig ec;
      ec.conditions = detail::parse_conditions(conditions);
      ec.replicates = replicates;
      ec.finetune = ft.ft;
      ec.sweep_valid_fraction = sweep_valid_fraction;
      ec.seed = common.seed;
      ec.jobs = jobs;
      std::vector<std::string> outputs;
      detail::ensure_skipgram(l, ec.conditions, sg, common.seed, dir, outputs, out);
      const baselines::Artifacts<float> artifacts{l.med_bert ? &*l.med_bert : nullptr,
                                                  l.skipgram ? &*l.skipgram : nullptr};
      const auto rep = name == "ex1"
                           ? eval::run_ex1<float>(l.train, l.valid, l.test, ec, artifacts, l.vocab.size())
                           : eval::run_size_sweep<float>(l.train, l.test, sizes, ec, artifacts, l.vocab.size());
      const std::string base = dir + "/" + name;
      write_file(base + ".csv", rep.to_csv());
      write_file(base + "_long.csv", rep.to_long_csv());
      write_file(base + ".json", rep.to_json().dump(2) + "\n");
      outputs.insert(outputs.end(), {base + ".csv", base + "_long.csv", base + ".json"});
      detail::write_manifest(*cmd, dir, l.inputs, outputs);
      detail::print_report(rep, out);
      return kExitOk;
    }
    if (name == "viz") {
      const auto vocab = ehr::Vocabulary::load(vocab_path);
      const auto records = ehr::load_jsonl(cohort);
      if (records.empty()) throw EmptyCohort(cohort + " holds no patients");
      const ehr::PatientRecord* p = &records.front();
      if (!patient_id.empty()) {
        p = nullptr;
        for (const auto& r : records)
          if (r.patient_id == patient_id) p = &r;
        if (!p) throw ConfigError("patient '" + patient_id + "' not in " + cohort);
      }
      const auto rec = viz::extract_attention(ft.med_bert, *p, vocab);
      std::optional<std::size_t> h;
      if (head != "all") h = detail::parse_size(head);
      const std::string html = dir + "/attention.html", json = dir + "/attention.json", csv = dir + "/locality.csv";
      write_file(html, viz::render_attention(rec, layer, h, threshold));
      write_file(json, rec.to_json().dump() + "\n");
      write_file(csv, viz::locality_csv(viz::summarize_locality(rec)));
      detail::write_manifest(*cmd, dir, {ft.med_bert, vocab_path, cohort}, {html, json, csv});
      out << "attention of patient " << rec.patient_id << " (" << rec.length() << " codes) written to " << html
          << "\n";
      return kExitOk;
    }
    if (name == "gradcheck") {
      eval::GradSuiteConfig gc;
      gc.med_bert = micro;
      gc.options = gc_opt;
      gc.seed = common.seed;
      if (gc_models != "all") {
        std::istringstream is(gc_models);
        std::string item;
        while (std::getline(is, item, ',')) gc.models.push_back(detail::trim(item));
      }
      const auto results = eval::run_grad_suite(gc);
      bool ok = true;
      nlohmann::ordered_json j = nlohmann::ordered_json::array();
      for (const auto& r : results) {
        out << r.model << ": max relative error " << r.report.max_rel_error << (r.report.passed ? "  ok" : "  FAILED")
            << "\n";
        ok = ok && r.report.passed;
        j.push_back({{"model", r.model}, {"max_rel_error", r.report.max_rel_error}, {"passed", r.report.passed}});
      }
      if (!common.out.empty()) {
        std::filesystem::create_directories(common.out);
        write_file(common.out + "/gradcheck.json", j.dump(2) + "\n");
        detail::write_manifest(*cmd, common.out, {}, {common.out + "/gradcheck.json"});
      }
      return ok ? kExitOk : kExitRuntime;
    }
    throw UsageError("unknown subcommand");
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\nRun with --help for usage.\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv = {"ehrbert"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace ehrbert::cli
