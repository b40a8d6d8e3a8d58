// SPDX-License-Identifier: Apache-2.0

#include "nmt/cli.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "nmt/data.hpp"
#include "nmt/decoding.hpp"
#include "nmt/inspector.hpp"
#include "nmt/interpret.hpp"
#include "nmt/metrics.hpp"
#include "nmt/model.hpp"
#include "nmt/training.hpp"

namespace nmt {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> read_lines(const std::string& path) {
  std::vector<std::string> lines;
  std::string line;
  if (path == "-") {
    while (std::getline(std::cin, line)) lines.push_back(line);
    return lines;
  }
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

std::vector<SentencePair> load_pairs(const std::string& src_path, const std::string& tgt_path,
                                     const Vocabulary& src_vocab, const Vocabulary& tgt_vocab) {
  const auto src = read_corpus(src_path);
  const auto tgt = read_corpus(tgt_path);
  if (src.size() != tgt.size()) {
    throw std::runtime_error(src_path + " and " + tgt_path + " have different line counts");
  }
  std::vector<SentencePair> pairs;
  for (std::size_t i = 0; i < src.size(); ++i) pairs.push_back({src_vocab.encode(src[i]), tgt_vocab.encode(tgt[i])});
  return pairs;
}

std::vector<IdSequence> load_mono(const std::string& path, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<IdSequence> out;
  if (path.empty()) return out;
  for (const auto& s : read_corpus(path)) {
    if (!s.empty() && s.size() <= max_len) out.push_back(vocab.encode(s));
  }
  return out;
}

void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path == "-" || path.empty()) {
    out << text;
    return;
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

// Training flags that mirror config keys; set flags override the config file.
struct MappedFlag {
  std::string flag;
  std::string key;
  std::string value;
  CLI::Option* option = nullptr;
};

struct TrainArgs {
  std::vector<std::unique_ptr<MappedFlag>> mapped;
  std::string train_src, train_tgt, dev_src, dev_tgt, mono_src, mono_tgt;
  std::string src_vocab, tgt_vocab, output, reverse_output, init_checkpoint, init_reverse_checkpoint, log;
};

void add_mapped(CLI::App* sub, TrainArgs& args, const std::string& flag, const std::string& key,
                const std::string& help) {
  auto m = std::make_unique<MappedFlag>();
  m->flag = flag;
  m->key = key;
  m->option = sub->add_option(flag, m->value, help);
  args.mapped.push_back(std::move(m));
}

TrainConfig resolve_config(const std::string& config_path, const TrainArgs& args, CLI::Option* seed_opt,
                           std::uint64_t seed) {
  TrainConfig cfg;
  if (!config_path.empty()) {
    try {
      cfg = load_config(config_path);
    } catch (const ConfigError& e) {
      throw UsageError(std::string("--config: ") + e.what());
    }
  }
  for (const auto& m : args.mapped) {
    if (m->option->count() == 0) continue;
    try {
      apply_config_entry(cfg, m->key, m->value);
    } catch (const ConfigError& e) {
      throw UsageError(m->flag + ": " + e.what());
    }
  }
  if (seed_opt->count() > 0) cfg.seed = seed;
  return cfg;
}

int do_train(const TrainArgs& args, TrainConfig cfg, std::ostream& out) {
  if (cfg.criterion != Criterion::kMle && args.init_checkpoint.empty()) {
    throw UsageError("--init-checkpoint is required for --criterion " + criterion_name(cfg.criterion) + ": " +
                     criterion_name(cfg.criterion) + " training starts from an MLE-trained model");
  }
  if (cfg.criterion == Criterion::kSst && (args.init_reverse_checkpoint.empty() || args.reverse_output.empty())) {
    throw UsageError(
        "--init-reverse-checkpoint and --reverse-output are required for --criterion sst: the target-to-source "
        "model also starts from MLE");
  }
  if (!cfg.seed) throw UsageError("--seed: a seed is required (flag or `seed` in --config)");
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }

  const Vocabulary src_vocab = Vocabulary::load(args.src_vocab);
  const Vocabulary tgt_vocab = Vocabulary::load(args.tgt_vocab);
  cfg.src_vocab_size = src_vocab.size();
  cfg.tgt_vocab_size = tgt_vocab.size();

  TrainCorpora corpora;
  corpora.train = filter_by_length(load_pairs(args.train_src, args.train_tgt, src_vocab, tgt_vocab), cfg.max_length);
  if (!args.dev_src.empty()) {
    for (auto& p : load_pairs(args.dev_src, args.dev_tgt, src_vocab, tgt_vocab)) {
      if (!p.src.empty()) corpora.dev.push_back(std::move(p));
    }
  }
  corpora.mono_src = load_mono(args.mono_src, src_vocab, cfg.max_length);
  corpora.mono_tgt = load_mono(args.mono_tgt, tgt_vocab, cfg.max_length);

  TrainInit init;
  if (!args.init_checkpoint.empty()) init.model = load_checkpoint(args.init_checkpoint);
  if (!args.init_reverse_checkpoint.empty()) init.reverse = load_checkpoint(args.init_reverse_checkpoint);
  if (init.model && (init.model->dims.src_vocab != src_vocab.size() || init.model->dims.tgt_vocab != tgt_vocab.size())) {
    throw std::runtime_error("--init-checkpoint vocabulary sizes do not match the vocabularies");
  }

  const std::string log_path = args.log.empty() ? args.output + ".log" : args.log;
  std::ofstream log(log_path, std::ios::app);
  if (!log) throw std::runtime_error("cannot write " + log_path);
  TrainHooks hooks;
  hooks.log = &log;
  TrainResult result = train(cfg, std::move(init), corpora, hooks);
  save_checkpoint(result.best, args.output);
  if (result.best_reverse) save_checkpoint(*result.best_reverse, args.reverse_output);
  out << "trained " << result.iterations << " iterations";
  if (!result.records.empty()) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2f", result.best_dev_bleu);
    out << ", best dev BLEU " << buf << " at iteration " << result.best_iteration;
  }
  if (result.skipped_updates > 0) out << ", " << result.skipped_updates << " skipped updates";
  out << '\n';
  return kExitOk;
}

struct TranslateArgs {
  std::string checkpoint, src_vocab, tgt_vocab, input = "-", output = "-", dict;
  std::size_t beam = 10;
  std::size_t max_len = 0;
  std::size_t threads = 1;
  bool length_norm = false;
  bool replace_unk = false;
};

int do_translate(const TranslateArgs& a, std::ostream& out) {
  if (a.beam < 1) throw UsageError("--beam: must be >= 1");
  if (a.threads < 1) throw UsageError("--threads: must be >= 1");
  if (a.replace_unk && a.dict.empty()) throw UsageError("--replace-unk needs --dict");
  const RnnSearchModel model = load_checkpoint(a.checkpoint);
  const Vocabulary src_vocab = Vocabulary::load(a.src_vocab);
  const Vocabulary tgt_vocab = Vocabulary::load(a.tgt_vocab);
  BilingualDictionary dict;
  if (a.replace_unk) dict = BilingualDictionary::load(a.dict);
  const std::vector<std::string> lines = read_lines(a.input);

  std::vector<std::string> results(lines.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < lines.size(); i = next++) {
      const Sentence tokens = tokenize(lines[i]);
      if (tokens.empty()) continue;
      const IdSequence src = with_eos(src_vocab.encode(tokens));
      BeamOptions opts;
      opts.beam = a.beam;
      opts.max_len = a.max_len ? a.max_len : default_max_len(src.size());
      opts.length_norm = a.length_norm;
      const Hypothesis best = beam_search(model, src, opts).front();
      results[i] = detokenize(a.replace_unk ? replace_unk(best, tokens, dict, tgt_vocab) : tgt_vocab.decode(best.output()));
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < a.threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ostringstream text;
  for (const auto& r : results) text << r << '\n';
  write_text(a.output, text.str(), out);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attention-based neural machine translation toolkit", "nmt"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "Training config file of `key = value` lines");
  CLI::Option* seed_opt = app.add_option("--seed", seed, "Random seed (overrides the config file)");

  // build-vocab
  auto* vocab_cmd = app.add_subcommand("build-vocab", "Build a frequency-ranked vocabulary file");
  std::string vocab_input, vocab_output;
  std::size_t vocab_cap = 30000;
  vocab_cmd->add_option("--input", vocab_input, "Tokenized corpus")->required();
  vocab_cmd->add_option("--output", vocab_output, "Vocabulary file to write")->required();
  vocab_cmd->add_option("--cap", vocab_cap, "Maximum number of word types");

  // build-dict
  auto* dict_cmd = app.add_subcommand("build-dict", "Induce a bilingual dictionary with IBM Model 1");
  std::string dict_src, dict_tgt, dict_output;
  int dict_iters = 5;
  double dict_min_prob = 0.01;
  dict_cmd->add_option("--src", dict_src, "Source side of the parallel corpus")->required();
  dict_cmd->add_option("--tgt", dict_tgt, "Target side of the parallel corpus")->required();
  dict_cmd->add_option("--output", dict_output, "Dictionary file to write")->required();
  dict_cmd->add_option("--iters", dict_iters, "EM iterations");
  dict_cmd->add_option("--min-prob", dict_min_prob, "Minimum translation probability kept");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train a model with MLE, MRT or SST");
  TrainArgs targs;
  train_cmd->add_option("--train-src", targs.train_src, "Training source corpus")->required();
  train_cmd->add_option("--train-tgt", targs.train_tgt, "Training target corpus")->required();
  train_cmd->add_option("--dev-src", targs.dev_src, "Validation source corpus");
  train_cmd->add_option("--dev-tgt", targs.dev_tgt, "Validation target corpus");
  train_cmd->add_option("--mono-src", targs.mono_src, "Source-side monolingual corpus (sst)");
  train_cmd->add_option("--mono-tgt", targs.mono_tgt, "Target-side monolingual corpus (sst)");
  train_cmd->add_option("--src-vocab", targs.src_vocab, "Source vocabulary")->required();
  train_cmd->add_option("--tgt-vocab", targs.tgt_vocab, "Target vocabulary")->required();
  train_cmd->add_option("--output", targs.output, "Checkpoint to write (best dev BLEU)")->required();
  train_cmd->add_option("--reverse-output", targs.reverse_output, "Target-to-source checkpoint to write (sst)");
  train_cmd->add_option("--init-checkpoint", targs.init_checkpoint, "MLE checkpoint to start from (mrt, sst)");
  train_cmd->add_option("--init-reverse-checkpoint", targs.init_reverse_checkpoint,
                        "MLE target-to-source checkpoint to start from (sst)");
  train_cmd->add_option("--log", targs.log, "Training log (default: <output>.log)");
  add_mapped(train_cmd, targs, "--criterion", "criterion", "mle, mrt or sst (default: mle)");
  add_mapped(train_cmd, targs, "--optimizer", "optimizer", "sgd, adadelta or adam (default: adam)");
  add_mapped(train_cmd, targs, "--learning-rate", "learning_rate",
             "Step size (default: adam 0.0005 mle / 0.00001 mrt / 0.00005 sst, sgd 0.5)");
  add_mapped(train_cmd, targs, "--batch-size", "batch_size", "Sentences per batch (default: 80)");
  add_mapped(train_cmd, targs, "--max-iterations", "max_iterations", "Training iterations (default: 10000)");
  add_mapped(train_cmd, targs, "--validate-every", "validate_every", "Iterations between validations (default: 1000)");
  add_mapped(train_cmd, targs, "--mrt-sample-size", "mrt_sample_size", "Samples per sentence for mrt (default: 25)");
  add_mapped(train_cmd, targs, "--mrt-alpha", "mrt_alpha", "Sharpness of the mrt distribution (default: 0.005)");
  add_mapped(train_cmd, targs, "--sst-lambda", "sst_lambda", "Weight of the reconstruction term (default: 0.1)");
  add_mapped(train_cmd, targs, "--sst-sample-size", "sst_sample_size", "Samples per monolingual sentence (default: 2)");
  add_mapped(train_cmd, targs, "--clip-norm", "clip_norm", "Global gradient norm limit (default: 1.0)");
  add_mapped(train_cmd, targs, "--embed-dim", "embed_dim", "Word embedding size (default: 620)");
  add_mapped(train_cmd, targs, "--hidden-dim", "hidden_dim", "Recurrent state size (default: 1000)");
  add_mapped(train_cmd, targs, "--attention-dim", "attention_dim", "Attention layer size (default: 1000)");
  add_mapped(train_cmd, targs, "--readout-dim", "readout_dim", "Readout layer size (default: 1000)");
  add_mapped(train_cmd, targs, "--readout", "readout", "tanh or maxout (default: tanh)");
  add_mapped(train_cmd, targs, "--init-scale", "init_scale", "Uniform initialization range (default: 0.08)");
  add_mapped(train_cmd, targs, "--max-length", "max_length", "Longest training sentence kept (default: 50)");

  // translate
  auto* translate_cmd = app.add_subcommand("translate", "Translate one sentence per line");
  TranslateArgs xargs;
  translate_cmd->add_option("--checkpoint", xargs.checkpoint, "Model checkpoint")->required();
  translate_cmd->add_option("--src-vocab", xargs.src_vocab, "Source vocabulary")->required();
  translate_cmd->add_option("--tgt-vocab", xargs.tgt_vocab, "Target vocabulary")->required();
  translate_cmd->add_option("--input", xargs.input, "Input file, - for stdin");
  translate_cmd->add_option("--output", xargs.output, "Output file, - for stdout");
  translate_cmd->add_option("--beam", xargs.beam, "Beam size");
  translate_cmd->add_option("--max-len", xargs.max_len, "Decoding steps, 0 for 2 * source length + 10");
  translate_cmd->add_flag("--length-norm", xargs.length_norm, "Rank finished hypotheses by per-token log-prob");
  translate_cmd->add_flag("--replace-unk", xargs.replace_unk, "Replace <unk> outputs via attention and --dict");
  translate_cmd->add_option("--dict", xargs.dict, "Bilingual dictionary for --replace-unk");
  translate_cmd->add_option("--threads", xargs.threads, "Worker threads");

  // evaluate
  auto* eval_cmd = app.add_subcommand("evaluate", "Corpus BLEU of a translation");
  std::string eval_hyp;
  std::vector<std::string> eval_refs;
  eval_cmd->add_option("--hyp", eval_hyp, "Translation to score")->required();
  eval_cmd->add_option("--ref", eval_refs, "Reference file(s), line-aligned with --hyp")->required();

  // export-relevance
  auto* export_cmd = app.add_subcommand("export-relevance", "Write a relevance document for one sentence pair");
  std::string ex_checkpoint, ex_src_vocab, ex_tgt_vocab, ex_src, ex_tgt, ex_output = "-";
  double ex_epsilon = 1e-6;
  std::vector<std::string> ex_nodes;
  std::size_t ex_beam = 10;
  export_cmd->add_option("--checkpoint", ex_checkpoint, "Model checkpoint")->required();
  export_cmd->add_option("--src-vocab", ex_src_vocab, "Source vocabulary")->required();
  export_cmd->add_option("--tgt-vocab", ex_tgt_vocab, "Target vocabulary")->required();
  export_cmd->add_option("--src", ex_src, "Source sentence")->required();
  export_cmd->add_option("--tgt", ex_tgt, "Target sentence; decoded when omitted");
  export_cmd->add_option("--output", ex_output, "Document file, - for stdout");
  export_cmd->add_option("--epsilon", ex_epsilon, "Stabilizer of the epsilon rule");
  export_cmd->add_option("--nodes", ex_nodes, "Node ids such as output:0 (default: all)")->delimiter(',');
  export_cmd->add_option("--beam", ex_beam, "Beam size when decoding");

  // serve-inspector
  auto* serve_cmd = app.add_subcommand("serve-inspector", "Serve a relevance document and the inspector UI");
  std::string sv_document, sv_static, sv_host = "127.0.0.1";
  int sv_port = 8080;
  serve_cmd->add_option("--document", sv_document, "Relevance document (JSON)")->required();
  serve_cmd->add_option("--static-dir", sv_static, "UI bundle directory containing index.html");
  serve_cmd->add_option("--host", sv_host, "Listen address");
  serve_cmd->add_option("--port", sv_port, "Listen port");

  std::vector<const char*> argv{"nmt"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (vocab_cmd->parsed()) {
      if (vocab_cap < 1) throw UsageError("--cap: must be >= 1");
      const Vocabulary v = Vocabulary::build(read_corpus(vocab_input), vocab_cap);
      v.save(vocab_output);
      out << "vocabulary: " << v.size() << " entries\n";
    } else if (dict_cmd->parsed()) {
      if (!(dict_min_prob > 0.0 && dict_min_prob < 1.0)) throw UsageError("--min-prob: must lie in (0, 1)");
      if (dict_iters < 1) throw UsageError("--iters: must be >= 1");
      const auto src = read_corpus(dict_src);
      const auto tgt = read_corpus(dict_tgt);
      if (src.size() != tgt.size()) throw std::runtime_error("--src and --tgt have different line counts");
      std::vector<std::pair<Sentence, Sentence>> parallel;
      for (std::size_t i = 0; i < src.size(); ++i) parallel.emplace_back(src[i], tgt[i]);
      const BilingualDictionary d = induce_dictionary(parallel, dict_iters, dict_min_prob);
      d.save(dict_output);
      out << "dictionary: " << d.size() << " entries\n";
    } else if (train_cmd->parsed()) {
      return do_train(targs, resolve_config(config_path, targs, seed_opt, seed), out);
    } else if (translate_cmd->parsed()) {
      return do_translate(xargs, out);
    } else if (eval_cmd->parsed()) {
      const auto hyps = read_corpus(eval_hyp);
      std::vector<std::vector<Sentence>> refs(hyps.size());
      for (const auto& path : eval_refs) {
        const auto r = read_corpus(path);
        if (r.size() != hyps.size()) throw std::runtime_error(path + " and --hyp have different line counts");
        for (std::size_t i = 0; i < r.size(); ++i) refs[i].push_back(r[i]);
      }
      out << format_bleu(corpus_bleu(hyps, refs)) << '\n';
    } else if (export_cmd->parsed()) {
      if (!(ex_epsilon > 0.0)) throw UsageError("--epsilon: must be positive");
      const RnnSearchModel model = load_checkpoint(ex_checkpoint);
      LrpConfig cfg;
      cfg.epsilon = ex_epsilon;
      cfg.nodes = ex_nodes;
      const Sentence src = tokenize(ex_src);
      if (src.empty()) throw UsageError("--src: empty sentence");
      const RelevanceDocument doc = export_relevance(model, Vocabulary::load(ex_src_vocab),
                                                     Vocabulary::load(ex_tgt_vocab), src, tokenize(ex_tgt), cfg, ex_beam);
      for (const auto& w : doc.warnings) err << "warning: " << w << '\n';
      write_text(ex_output, to_json(doc).dump(2) + "\n", out);
    } else if (serve_cmd->parsed()) {
      std::ifstream in(sv_document);
      if (!in) throw std::runtime_error("cannot open " + sv_document);
      const nlohmann::json doc = nlohmann::json::parse(in);
      relevance_document_from_json(doc);
      auto server = make_inspector_server(doc, sv_static);
      out << "serving " << sv_document << " on http://" << sv_host << ":" << sv_port << "/\n" << std::flush;
      if (!server->listen(sv_host, sv_port)) throw std::runtime_error("cannot listen on " + sv_host);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace nmt
