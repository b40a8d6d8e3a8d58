// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite. Prints one PASS/FAIL line per criterion and exits with
// the number of failures. Criterion names given on the command line select
// a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>

#include "bleu_oracle.hpp"
#include "nmt/cli.hpp"
#include "nmt/data.hpp"
#include "nmt/decoding.hpp"
#include "nmt/interpret.hpp"
#include "nmt/metrics.hpp"
#include "nmt/model.hpp"
#include "nmt/training.hpp"
#include "toy.hpp"

namespace nmt {
namespace {

// --- Pinned thresholds -----------------------------------------------------

constexpr double kGradTolerance = 1e-4;
constexpr double kGradSeconds = 60.0;
constexpr double kToyAccuracy = 0.95;
constexpr std::size_t kToyIterations = 3000;
constexpr double kToySeconds = 15 * 60.0;
constexpr double kMrtMaxBleuDrop = 0.5;
constexpr double kMrtSeconds = 30 * 60.0;
constexpr double kOptimizerRatio = 2.0;
constexpr double kBleuTolerance = 1e-12;
constexpr double kBeamTolerance = 1e-10;
constexpr double kLrpEpsilonUnits = 10.0;
constexpr double kLrpSumTolerance = 1e-6;

// --- Toy task --------------------------------------------------------------

constexpr std::size_t kToyVocab = 20;
constexpr std::size_t kToyMaxLen = 8;
constexpr std::size_t kToyTrain = 2000;
constexpr std::size_t kToyDev = 200;
constexpr double kToyLearningRate = 0.001;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

TrainConfig toy_config(std::uint64_t seed, OptimizerKind optimizer = OptimizerKind::kAdam) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.optimizer = optimizer;
  cfg.src_vocab_size = cfg.tgt_vocab_size = kToyVocab;
  cfg.embed_dim = 32;
  cfg.hidden_dim = cfg.attention_dim = cfg.readout_dim = 64;
  cfg.batch_size = 80;
  cfg.max_iterations = kToyIterations;
  cfg.validate_every = 500;
  return cfg;
}

TrainCorpora toy_corpora(std::uint64_t seed) {
  TrainCorpora c;
  c.train = testing::copy_task(kToyTrain, seed, kToyVocab, kToyMaxLen);
  c.dev = testing::copy_task(kToyDev, seed + 1000, kToyVocab, kToyMaxLen);
  return c;
}

std::vector<SentencePair> reversed(const std::vector<SentencePair>& pairs) {
  std::vector<SentencePair> out;
  for (const auto& p : pairs) out.push_back({p.tgt, p.src});
  return out;
}

// Mean of the last `window` entries ending at index i (inclusive).
std::vector<double> trailing_mean(const std::vector<double>& xs, std::size_t window) {
  std::vector<double> out(xs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

// --- Criteria --------------------------------------------------------------

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  ModelDims d = testing::tiny_dims(12, 12, 6, 6);
  RnnSearchModel m = init_parameters(d, 2024, 0.5);
  const Batch batch = make_batch({{{4, 5, 6, 7}, {8, 9}}, {{10, 11}, {4, 5, 6}}, {{9}, {11, 10, 7, 6}}});
  const auto r = testing::check_gradients(m.named_parameters(), [&] { return mle_loss(m, batch); });
  m.set_requires_grad(false);
  const double secs = seconds_since(t0);
  return {r.max_rel_error < kGradTolerance && secs < kGradSeconds,
          fmt::format("max rel err {:.2e} at {} (analytic {:.6e}, numeric {:.6e}) over {} entries (< {:.0e}), "
                      "{:.1f}s (< {:.0f}s)",
                      r.max_rel_error, r.worst, r.worst_analytic, r.worst_numeric, r.checked, kGradTolerance, secs,
                      kGradSeconds)};
}

Outcome toy_convergence() {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainCorpora c = toy_corpora(101);
  TrainConfig cfg = toy_config(1);
  cfg.learning_rate = kToyLearningRate;
  const TrainResult r = train(cfg, {}, c);
  const double acc = testing::greedy_accuracy(r.best, c.dev);
  const double secs = seconds_since(t0);
  return {acc >= kToyAccuracy && r.iterations <= kToyIterations && secs < kToySeconds,
          fmt::format("dev accuracy {:.3f} (>= {:.2f}) after {} iterations, {:.0f}s (< {:.0f}s)", acc, kToyAccuracy,
                      r.iterations, secs, kToySeconds)};
}

Outcome nan_safe_adam() {
  const TrainCorpora c = toy_corpora(101);
  TrainConfig cfg = toy_config(1);
  cfg.learning_rate = kToyLearningRate;
  constexpr std::size_t kInject = kToyIterations / 2;
  std::vector<double> before;
  AdamState state_before;
  bool unchanged = false;
  bool skipped = false;
  TrainHooks hooks;
  hooks.after_backward = [&](std::size_t iter, const Optimizer& opt) {
    if (iter != kInject) return;
    opt.params()[3].grad()[0] = std::numeric_limits<double>::quiet_NaN();
    before.clear();
    for (const auto& p : opt.params()) before.insert(before.end(), p.data().begin(), p.data().end());
    state_before = opt.adam();
  };
  hooks.after_step = [&](std::size_t iter, double, bool applied, const Optimizer& opt) {
    if (iter != kInject) return;
    skipped = !applied;
    std::vector<double> after;
    for (const auto& p : opt.params()) after.insert(after.end(), p.data().begin(), p.data().end());
    const AdamState& s = opt.adam();
    unchanged = after == before && s.step == state_before.step && s.m == state_before.m && s.v == state_before.v;
  };
  const TrainResult r = train(cfg, {}, c, hooks);
  const double acc = testing::greedy_accuracy(r.best, c.dev);
  return {skipped && unchanged && r.skipped_updates == 1 && acc >= kToyAccuracy,
          fmt::format("NaN at iteration {}: skipped={} bitwise-unchanged={}, skipped updates {}, dev accuracy {:.3f} "
                      "(>= {:.2f})",
                      kInject, skipped, unchanged, r.skipped_updates, acc, kToyAccuracy)};
}

struct StopTraining {};

Outcome optimizer_direction() {
  const TrainCorpora c_full = toy_corpora(101);
  TrainCorpora c;
  c.train = c_full.train;  // no dev: only the training loss matters here
  constexpr std::size_t kWindow = 100;

  TrainConfig adam_cfg = toy_config(3, OptimizerKind::kAdam);
  adam_cfg.learning_rate = kToyLearningRate;
  const TrainResult adam = train(adam_cfg, {}, c);
  const std::vector<double> adam_mean = trailing_mean(adam.losses, kWindow);
  const double target = adam_mean.back();
  std::size_t n_adam = 0;
  while (adam_mean[n_adam] > target) ++n_adam;
  ++n_adam;  // iterations are 1-based
  progress(fmt::format("adam reaches {:.4f} at iteration {}", target, n_adam));

  TrainConfig cfg = toy_config(3, OptimizerKind::kAdadelta);
  cfg.max_iterations = static_cast<std::size_t>(kOptimizerRatio * static_cast<double>(n_adam));
  std::vector<double> losses;
  std::size_t n_adadelta = 0;
  TrainHooks hooks;
  hooks.after_step = [&](std::size_t iter, double loss, bool, const Optimizer&) {
    losses.push_back(loss);
    const std::size_t from = losses.size() > kWindow ? losses.size() - kWindow : 0;
    const double mean = std::accumulate(losses.begin() + static_cast<std::ptrdiff_t>(from), losses.end(), 0.0) /
                        static_cast<double>(losses.size() - from);
    if (mean <= target) {
      n_adadelta = iter;
      throw StopTraining{};
    }
  };
  try {
    train(cfg, {}, c, hooks);
  } catch (const StopTraining&) {
  }
  const double final_mean = trailing_mean(losses, kWindow).back();
  if (n_adadelta == 0) {
    return {true, fmt::format("adam reaches its final loss {:.4f} at iteration {}; adadelta not there after {} "
                              "iterations (loss {:.4f}), ratio > {:.1f}",
                              target, n_adam, cfg.max_iterations, final_mean, kOptimizerRatio)};
  }
  const double ratio = static_cast<double>(n_adadelta) / static_cast<double>(n_adam);
  return {ratio >= kOptimizerRatio,
          fmt::format("adam reaches {:.4f} at iteration {}, adadelta at {}: ratio {:.2f} (>= {:.1f})", target, n_adam,
                      n_adadelta, ratio, kOptimizerRatio)};
}

Outcome mrt_direction() {
  const auto t0 = std::chrono::steady_clock::now();
  TrainCorpora c = toy_corpora(301);
  std::mt19937_64 noise(302);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<int> tok(kNumReserved, static_cast<int>(kToyVocab) - 1);
  std::size_t corrupted = 0, total = 0;
  for (auto& p : c.train) {
    for (int& y : p.tgt) {
      ++total;
      if (coin(noise) < 0.1) {
        int z = tok(noise);
        while (z == y) z = tok(noise);
        y = z;
        ++corrupted;
      }
    }
  }
  TrainConfig mle_cfg = toy_config(4);
  mle_cfg.learning_rate = kToyLearningRate;
  const TrainResult mle = train(mle_cfg, {}, c);
  progress(fmt::format("noisy mle done, dev BLEU {:.2f}", mle.best_dev_bleu));

  const std::vector<SentencePair> probe(c.dev.begin(), c.dev.begin() + 50);
  constexpr std::size_t kSamples = 25;
  constexpr double kAlpha = 0.005;
  constexpr std::uint64_t kProbeSeed = 777;
  const double risk_before = mrt_expected_risk(mle.best, probe, kSamples, kAlpha, kProbeSeed);
  const double bleu_before = dev_bleu(mle.best, c.dev);

  TrainConfig cfg = toy_config(5);
  cfg.criterion = Criterion::kMrt;
  cfg.batch_size = 10;
  cfg.max_iterations = 200;
  cfg.validate_every = 50;
  cfg.mrt_sample_size = kSamples;
  cfg.mrt_alpha = kAlpha;
  cfg.learning_rate = 1e-4;
  TrainInit init;
  init.model = mle.best.clone();
  const TrainResult mrt = train(cfg, std::move(init), c);
  const double risk_after = mrt_expected_risk(mrt.last, probe, kSamples, kAlpha, kProbeSeed);
  const double bleu_after = dev_bleu(mrt.last, c.dev);
  const double secs = seconds_since(t0);
  return {risk_after < risk_before && bleu_after >= bleu_before - kMrtMaxBleuDrop && secs < kMrtSeconds,
          fmt::format("{:.1f}% target tokens corrupted; probe risk {:.6f} -> {:.6f}; dev BLEU {:.2f} -> {:.2f} "
                      "(drop <= {:.1f}); {:.0f}s",
                      100.0 * static_cast<double>(corrupted) / static_cast<double>(total), risk_before, risk_after,
                      bleu_before, bleu_after, kMrtMaxBleuDrop, secs)};
}

Outcome sst_direction() {
  TrainCorpora base;
  base.train = testing::copy_task(500, 401, kToyVocab, kToyMaxLen);
  base.dev = testing::copy_task(kToyDev, 402, kToyVocab, kToyMaxLen);
  TrainCorpora back;
  back.train = reversed(base.train);
  back.dev = reversed(base.dev);

  TrainConfig mle_cfg = toy_config(6);
  mle_cfg.learning_rate = kToyLearningRate;
  mle_cfg.max_iterations = 1500;
  const TrainResult s2t = train(mle_cfg, {}, base);
  const TrainResult t2s = train(mle_cfg, {}, back);
  const double base_s2t = dev_bleu(s2t.best, base.dev);
  const double base_t2s = dev_bleu(t2s.best, back.dev);
  progress(fmt::format("baselines {:.2f} / {:.2f}", base_s2t, base_t2s));

  TrainCorpora sst = base;
  for (const auto& p : testing::copy_task(1500, 403, kToyVocab, kToyMaxLen)) sst.mono_src.push_back(p.src);
  for (const auto& p : testing::copy_task(1500, 404, kToyVocab, kToyMaxLen)) sst.mono_tgt.push_back(p.tgt);
  TrainConfig cfg = toy_config(7);
  cfg.criterion = Criterion::kSst;
  cfg.sst_lambda = 0.1;
  cfg.sst_sample_size = 2;
  cfg.batch_size = 40;
  cfg.max_iterations = 300;
  cfg.validate_every = 100;
  TrainInit init;
  init.model = s2t.best.clone();
  init.reverse = t2s.best.clone();
  const TrainResult r = train(cfg, std::move(init), sst);
  const double sst_s2t = dev_bleu(r.best, base.dev);
  const double sst_t2s = dev_bleu(*r.best_reverse, back.dev);
  return {sst_s2t >= base_s2t && sst_t2s >= base_t2s,
          fmt::format("dev BLEU s2t {:.2f} vs baseline {:.2f}; t2s {:.2f} vs baseline {:.2f}", sst_s2t, base_s2t,
                      sst_t2s, base_t2s)};
}

std::string join(const Sentence& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + s[i];
  return out;
}

int cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

Outcome unk_replacement() {
  testing::TempDir dir;
  auto path = [&](const std::string& name) { return (dir / name).string(); };
  const auto train_pairs = testing::copy_task(kToyTrain, 501, kToyVocab, kToyMaxLen);
  const auto dev_pairs = testing::copy_task(kToyDev, 502, kToyVocab, kToyMaxLen);
  auto dump = [&](const std::vector<SentencePair>& pairs, const std::string& stem) {
    std::vector<std::string> src, tgt;
    for (const auto& p : pairs) {
      src.push_back(join(testing::words(p.src)));
      // Target words differ from source words so copying the source word is no shortcut.
      Sentence t = testing::words(p.tgt);
      for (auto& w : t) w = "t" + w.substr(1);
      tgt.push_back(join(t));
    }
    testing::write_lines(path(stem + ".src"), src);
    testing::write_lines(path(stem + ".tgt"), tgt);
  };
  dump(train_pairs, "train");
  dump(dev_pairs, "dev");

  // 16 word types; 3 (20%) are held out of both vocabularies.
  const std::set<int> held_out{17, 18, 19};
  std::vector<std::string> sv, tv;
  for (int id = kNumReserved; id < static_cast<int>(kToyVocab); ++id) {
    if (held_out.count(id)) continue;
    sv.push_back("w" + std::to_string(id));
    tv.push_back("t" + std::to_string(id));
  }
  testing::write_lines(path("vocab.src"), sv);
  testing::write_lines(path("vocab.tgt"), tv);

  if (cli({"build-dict", "--src", path("train.src"), "--tgt", path("train.tgt"), "--output", path("dict")}) != 0) {
    return {false, "build-dict failed"};
  }
  const BilingualDictionary dict = BilingualDictionary::load(path("dict"));
  std::size_t complete = 0;
  for (int id = kNumReserved; id < static_cast<int>(kToyVocab); ++id) {
    const auto hit = dict.find("w" + std::to_string(id));
    complete += hit && hit->target == "t" + std::to_string(id) ? 1 : 0;
  }
  if (cli({"--seed", "8", "train", "--train-src", path("train.src"), "--train-tgt", path("train.tgt"), "--dev-src",
           path("dev.src"), "--dev-tgt", path("dev.tgt"), "--src-vocab", path("vocab.src"), "--tgt-vocab",
           path("vocab.tgt"), "--output", path("model"), "--max-iterations", "2000", "--validate-every", "500",
           "--embed-dim", "32", "--hidden-dim", "64", "--attention-dim", "64", "--readout-dim", "64",
           "--learning-rate", "0.001"}) != 0) {
    return {false, "train failed"};
  }
  const std::vector<std::string> common{"translate",         "--checkpoint", path("model"),   "--src-vocab",
                                        path("vocab.src"),   "--tgt-vocab",  path("vocab.tgt"), "--input",
                                        path("dev.src")};
  auto plain = common, replaced = common;
  plain.insert(plain.end(), {"--output", path("plain.hyp")});
  replaced.insert(replaced.end(), {"--output", path("replaced.hyp"), "--replace-unk", "--dict", path("dict")});
  if (cli(plain) != 0 || cli(replaced) != 0) return {false, "translate failed"};

  const auto refs = read_corpus(path("dev.tgt"));
  const auto hyp_plain = read_corpus(path("plain.hyp"));
  const auto hyp_replaced = read_corpus(path("replaced.hyp"));
  std::size_t unk_plain = 0, unk_replaced = 0;
  for (const auto& s : hyp_plain) unk_plain += std::count(s.begin(), s.end(), "<unk>");
  for (const auto& s : hyp_replaced) unk_replaced += std::count(s.begin(), s.end(), "<unk>");
  const double bleu_plain = corpus_bleu(hyp_plain, refs).bleu * 100.0;
  const double bleu_replaced = corpus_bleu(hyp_replaced, refs).bleu * 100.0;
  return {unk_replaced == 0 && bleu_replaced >= bleu_plain,
          fmt::format("dictionary covers {}/16 types; <unk> tokens {} -> {}; dev BLEU {:.2f} -> {:.2f}", complete,
                      unk_plain, unk_replaced, bleu_plain, bleu_replaced)};
}

Outcome bleu_oracle() {
  double worst = 0.0;
  std::vector<testing::Tokens> all_h, all_r;
  for (unsigned seed = 1; seed <= 20; ++seed) {
    std::vector<testing::Tokens> h, r;
    testing::random_bleu_pairs(seed, 1, h, r);
    worst = std::max(worst, std::abs(corpus_bleu(h, r).bleu - testing::brute_force_corpus_bleu(h, r)));
    all_h.push_back(h[0]);
    all_r.push_back(r[0]);
  }
  worst = std::max(worst, std::abs(corpus_bleu(all_h, all_r).bleu - testing::brute_force_corpus_bleu(all_h, all_r)));
  const double clip = corpus_bleu(std::vector<Sentence>{tokenize("the the the the the the the")},
                                  std::vector<Sentence>{tokenize("the cat is on the mat")})
                          .bleu;
  return {worst <= kBleuTolerance && clip == 0.0,
          fmt::format("max |diff| {:.2e} over 20 pairs and their corpus (<= {:.0e}); clipping example {}", worst,
                      kBleuTolerance, clip)};
}

// Best EOS-terminated sequence over the emittable tokens, reachable by a
// search with the given step budget (a truncated hypothesis carries a forced
// EOS after max_len tokens).
std::pair<IdSequence, double> enumerate_best(const RnnSearchModel& m, const IdSequence& src, std::size_t max_len) {
  IdSequence best_seq;
  double best = -std::numeric_limits<double>::infinity();
  IdSequence prefix;
  std::function<void()> rec = [&] {
    IdSequence full = prefix;
    full.push_back(kEosId);
    const double lp = score_sequence(m, src, full);
    if (lp > best) {
      best = lp;
      best_seq = full;
    }
    if (prefix.size() == max_len) return;
    for (int w = kUnkId; w < static_cast<int>(m.dims.tgt_vocab); ++w) {
      prefix.push_back(w);
      rec();
      prefix.pop_back();
    }
  };
  rec();
  return {best_seq, best};
}

Outcome beam_optimality() {
  constexpr std::size_t kVt = 5, kMaxLen = 5;
  std::size_t ok = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const RnnSearchModel m = init_parameters(testing::tiny_dims(7, kVt, 3, 4), 600 + seed, 1.5);
    const IdSequence src{4, 5, 6, kEosId};
    const auto [seq, lp] = enumerate_best(m, src, kMaxLen);
    const auto beam = beam_search(m, src, {.beam = kVt, .max_len = kMaxLen});
    const IdSequence got(beam[0].tokens.begin() + 1, beam[0].tokens.end());
    worst = std::max(worst, std::abs(beam[0].log_prob - lp));
    ok += got == seq && std::abs(beam[0].log_prob - lp) <= kBeamTolerance ? 1 : 0;
  }
  return {ok == 10, fmt::format("{}/10 micro-models match the enumeration argmax, max |dlogp| {:.1e}", ok, worst)};
}

Outcome lrp_conservation() {
  std::mt19937_64 rng(700);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<std::size_t> size(2, 8);
  constexpr double kEps = 1e-6;
  std::size_t layers_ok = 0;
  double worst_excess = 0.0;
  for (int layer = 0; layer < 100; ++layer) {
    const std::size_t in = size(rng), out = size(rng);
    Vec a(in), w(in * out), b(out), v(out, 0.0), r(out);
    for (double& x : a) x = u(rng);
    for (double& x : w) x = u(rng);
    for (double& x : b) x = u(rng);
    for (std::size_t k = 0; k < out; ++k) {
      v[k] = b[k];
      for (std::size_t i = 0; i < in; ++i) v[k] += a[i] * w[i * out + k];
    }
    // Relevance arriving from an upper epsilon-rule layer through tanh: tanh(v_k) times a share in [-1, 1].
    for (std::size_t k = 0; k < out; ++k) r[k] = std::tanh(v[k]) * u(rng);
    const Vec back = lrp::linear(a, w, out, v, r, kEps);
    double bias_share = 0.0;
    for (std::size_t k = 0; k < out; ++k) bias_share += b[k] * r[k] / (v[k] + kEps * (v[k] >= 0.0 ? 1.0 : -1.0));
    const double sum_out = std::accumulate(r.begin(), r.end(), 0.0);
    const double sum_in = std::accumulate(back.begin(), back.end(), 0.0);
    const double gap = std::abs(sum_out - sum_in - bias_share);
    const double bound = kLrpEpsilonUnits * kEps * static_cast<double>(out);
    worst_excess = std::max(worst_excess, gap / bound);
    layers_ok += gap <= bound ? 1 : 0;
  }

  // Gates, on traces of random models.
  bool gates_zero = true;
  std::size_t docs_nodes = 0;
  double worst_sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ModelDims d = testing::tiny_dims(10, 10, 4, 5);
    d.readout_kind = seed % 2 ? ReadoutKind::kTanh : ReadoutKind::kMaxout;
    const RnnSearchModel m = init_parameters(d, 710 + seed, 0.8);
    const IdSequence src{4, 5, 6, 7}, tgt{8, 9, 4};
    const ActivationTrace t = capture_trace(m, src, tgt);
    for (const auto& g : t.enc_fwd) {
      const auto rel = lrp::gru(m.enc_fwd, g, Vec(g.h.size(), 0.3), kEps);
      gates_zero = gates_zero && std::all_of(rel.z.begin(), rel.z.end(), [](double x) { return x == 0.0; }) &&
                   std::all_of(rel.r.begin(), rel.r.end(), [](double x) { return x == 0.0; });
    }
    for (const auto& st : t.steps) {
      const auto rel = lrp::gru(m.dec, st.gru, Vec(st.gru.h.size(), 0.3), kEps);
      gates_zero = gates_zero && std::all_of(rel.z.begin(), rel.z.end(), [](double x) { return x == 0.0; }) &&
                   std::all_of(rel.r.begin(), rel.r.end(), [](double x) { return x == 0.0; });
    }
    const auto split = lrp::gate_product(Vec{0.1, -0.2, 0.3});
    gates_zero = gates_zero && split.gate == Vec(3, 0.0);

    const RelevanceDocument doc = build_relevance_document(m, {"a", "b", "c", "d"}, src, {"x", "y", "z"}, tgt);
    const auto j = relevance_document_from_json(nlohmann::json::parse(to_json(doc).dump()));
    for (const auto& n : j.nodes) {
      const double s = std::accumulate(n.relevance.src.begin(), n.relevance.src.end(), 0.0) +
                       std::accumulate(n.relevance.tgt_prefix.begin(), n.relevance.tgt_prefix.end(), 0.0);
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      ++docs_nodes;
    }
  }
  return {layers_ok == 100 && gates_zero && worst_sum <= kLrpSumTolerance,
          fmt::format("{}/100 layers within bias share + {:.0f} eps per unit (worst gap/bound {:.3f}); gate "
                      "relevance zero: {}; {} exported nodes, max |sum - 1| {:.1e}",
                      layers_ok, kLrpEpsilonUnits, worst_excess, gates_zero, docs_nodes, worst_sum)};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  auto run = [](const testing::TempDir& dir) {
    auto path = [&](const std::string& name) { return (dir / name).string(); };
    std::vector<std::string> src, tgt;
    for (const auto& p : testing::copy_task(300, 801, kToyVocab, kToyMaxLen)) {
      src.push_back(join(testing::words(p.src)));
      tgt.push_back(join(testing::words(p.tgt)));
    }
    testing::write_lines(path("train.src"), src);
    testing::write_lines(path("train.tgt"), tgt);
    testing::write_lines(path("config"), {"seed = 99", "batch_size = 32", "max_iterations = 150",
                                          "validate_every = 50", "embed_dim = 12", "hidden_dim = 16",
                                          "attention_dim = 16", "readout_dim = 16", "learning_rate = 0.002"});
    bool ok = cli({"build-vocab", "--input", path("train.src"), "--output", path("vocab.src")}) == 0 &&
              cli({"build-vocab", "--input", path("train.tgt"), "--output", path("vocab.tgt")}) == 0 &&
              cli({"--config", path("config"), "train", "--train-src", path("train.src"), "--train-tgt",
                   path("train.tgt"), "--dev-src", path("train.src"), "--dev-tgt", path("train.tgt"), "--src-vocab",
                   path("vocab.src"), "--tgt-vocab", path("vocab.tgt"), "--output", path("model")}) == 0 &&
              cli({"translate", "--checkpoint", path("model"), "--src-vocab", path("vocab.src"), "--tgt-vocab",
                   path("vocab.tgt"), "--input", path("train.src"), "--output", path("out"), "--threads", "2"}) == 0;
    return std::make_tuple(ok, slurp(path("model")) + slurp(path("model.meta")), slurp(path("out")));
  };
  testing::TempDir a, b;
  const auto [ok_a, ckpt_a, out_a] = run(a);
  const auto [ok_b, ckpt_b, out_b] = run(b);
  const bool same_ckpt = ckpt_a == ckpt_b;
  const bool same_out = out_a == out_b;
  return {ok_a && ok_b && same_ckpt && same_out && !ckpt_a.empty(),
          fmt::format("pipelines ran: {}/{}; checkpoints bitwise identical: {} ({} bytes); translations identical: {}",
                      ok_a, ok_b, same_ckpt, ckpt_a.size(), same_out)};
}

}  // namespace
}  // namespace nmt

int main(int argc, char** argv) {
  using Criterion = std::pair<std::string, std::function<nmt::Outcome()>>;
  const std::vector<Criterion> criteria{
      {"gradient-correctness", nmt::gradient_correctness},
      {"toy-convergence", nmt::toy_convergence},
      {"mrt-direction", nmt::mrt_direction},
      {"optimizer-direction", nmt::optimizer_direction},
      {"sst-direction", nmt::sst_direction},
      {"unk-replacement", nmt::unk_replacement},
      {"nan-safe-adam", nmt::nan_safe_adam},
      {"bleu-oracle", nmt::bleu_oracle},
      {"beam-optimality", nmt::beam_optimality},
      {"lrp-conservation", nmt::lrp_conservation},
      {"determinism", nmt::determinism},
  };
  std::set<std::string> selected(argv + 1, argv + argc);
  for (const auto& name : selected) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const Criterion& c) { return c.first == name; })) {
      std::cerr << "unknown criterion " << name << '\n';
      return 64;
    }
  }
  int failures = 0;
  for (const auto& [name, fn] : criteria) {
    if (!selected.empty() && !selected.count(name)) continue;
    std::cerr << "running " << name << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    nmt::Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail
              << fmt::format(" [{:.1f}s]", nmt::seconds_since(t0)) << std::endl;
  }
  return failures;
}
