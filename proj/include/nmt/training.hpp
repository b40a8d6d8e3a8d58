// SPDX-License-Identifier: Apache-2.0
//
// Training criteria (MLE, minimum risk, semi-supervised round trip), the
// three optimizers, and the validation-driven training loop.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "nmt/data.hpp"
#include "nmt/model.hpp"

namespace nmt {

enum class Criterion { kMle, kMrt, kSst };
enum class OptimizerKind { kSgd, kAdadelta, kAdam };

Criterion parse_criterion(const std::string& name);
std::string criterion_name(Criterion c);
OptimizerKind parse_optimizer(const std::string& name);
std::string optimizer_name(OptimizerKind k);

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Criterion criterion = Criterion::kMle;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  /// Unset means the per-criterion default (see default_learning_rate).
  std::optional<double> learning_rate;
  std::size_t batch_size = 80;
  std::size_t mrt_sample_size = 25;
  double mrt_alpha = 0.005;
  double sst_lambda = 0.1;
  std::size_t sst_sample_size = 2;
  double clip_norm = 1.0;
  std::size_t max_iterations = 10000;
  std::size_t validate_every = 1000;
  std::optional<std::uint64_t> seed;

  std::size_t embed_dim = 620;
  std::size_t hidden_dim = 1000;
  std::size_t attention_dim = 1000;
  std::size_t readout_dim = 1000;
  ReadoutKind readout = ReadoutKind::kTanh;
  double init_scale = 0.08;
  std::size_t src_vocab_size = 30000;
  std::size_t tgt_vocab_size = 30000;
  std::size_t max_length = 50;

  double adadelta_rho = 0.95;
  double adadelta_eps = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  double resolved_learning_rate() const;
  /// Throws ConfigError when a value is out of range.
  void validate() const;
};

double default_learning_rate(Criterion c, OptimizerKind k);

/// Sets one `key = value` entry; unknown keys and malformed values throw.
void apply_config_entry(TrainConfig& cfg, std::string_view key, std::string_view value);
/// Flat `key = value` lines; `#` starts a comment.
TrainConfig parse_config(std::string_view text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
std::vector<std::string> config_keys();

// ---------------------------------------------------------------------------
// Criteria. All losses are recorded on the active graph.

/// -(1/B) * sum of masked target log-probabilities.
Tensor mle_loss(const RnnSearchModel& model, const Batch& batch);

/// Expected cost sum_y Q(y) cost(y), Q = softmax(alpha * log_probs).
Tensor risk_from_log_probs(const Tensor& log_probs, std::span<const double> costs, double alpha);

/// Gold plus up to `sample_size` distinct samples (gold first, no repeats).
std::vector<IdSequence> mrt_candidates(const RnnSearchModel& model, const IdSequence& src, const IdSequence& gold,
                                       std::size_t sample_size, std::mt19937_64& rng);

/// Minimum-risk objective for one sentence pair; src and gold exclude EOS.
Tensor mrt_loss(const RnnSearchModel& model, const IdSequence& src, const IdSequence& gold, std::size_t sample_size,
                double alpha, std::mt19937_64& rng);

/// Mean MRT risk over pairs, evaluated without gradients; the rng for pair i
/// is seeded with seed + i.
double mrt_expected_risk(const RnnSearchModel& model, const std::vector<SentencePair>& pairs, std::size_t sample_size,
                         double alpha, std::uint64_t seed);

/// Per-direction losses {source-to-target, target-to-source}. Monolingual
/// sentences exclude EOS. Sampling for mono_src happens before mono_tgt.
std::pair<Tensor, Tensor> sst_loss(const RnnSearchModel& s2t, const RnnSearchModel& t2s,
                                   const std::vector<SentencePair>& parallel, const std::vector<IdSequence>& mono_src,
                                   const std::vector<IdSequence>& mono_tgt, double lambda, std::size_t sample_size,
                                   std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Optimizers. Each reads the gradient buffers attached to the parameters.

void sgd_step(std::span<const Tensor> params, double lr);

struct AdadeltaState {
  double rho = 0.95;
  double eps = 1e-6;
  std::vector<std::vector<double>> sq_grad;
  std::vector<std::vector<double>> sq_update;
};

struct AdamState {
  double lr = 0.0005;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

AdadeltaState make_adadelta_state(std::span<const Tensor> params, double rho = 0.95, double eps = 1e-6);
AdamState make_adam_state(std::span<const Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                          double eps = 1e-8);

void adadelta_step(std::span<const Tensor> params, AdadeltaState& state);
/// Returns false, touching nothing, when any gradient entry is non-finite.
bool adam_step(std::span<const Tensor> params, AdamState& state);

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::vector<Tensor> params);

  /// Applies one update; false when the step was skipped.
  bool step();
  OptimizerKind kind() const { return kind_; }
  const std::vector<Tensor>& params() const { return params_; }
  const AdadeltaState& adadelta() const { return adadelta_; }
  const AdamState& adam() const { return adam_; }

 private:
  OptimizerKind kind_;
  double lr_;
  std::vector<Tensor> params_;
  AdadeltaState adadelta_;
  AdamState adam_;
};

// ---------------------------------------------------------------------------
// Training loop.

struct TrainCorpora {
  std::vector<SentencePair> train;
  std::vector<SentencePair> dev;
  std::vector<IdSequence> mono_src;
  std::vector<IdSequence> mono_tgt;
};

struct TrainInit {
  std::optional<RnnSearchModel> model;
  /// Target-to-source model; required for SST.
  std::optional<RnnSearchModel> reverse;
};

struct ValidationRecord {
  std::size_t iteration = 0;
  Criterion criterion = Criterion::kMle;
  double loss = 0.0;      // mean training loss since the previous record
  double dev_bleu = 0.0;  // x100
  double seconds = 0.0;
};

std::string format_record(const ValidationRecord& r);

struct TrainHooks {
  /// Runs after backward and before clipping; may edit gradients.
  std::function<void(std::size_t iter, const Optimizer& opt)> after_backward;
  std::function<void(std::size_t iter, double loss, bool applied, const Optimizer& opt)> after_step;
  /// Return true to stop training early.
  std::function<bool(const ValidationRecord&)> on_validate;
  std::ostream* log = nullptr;
};

struct TrainResult {
  RnnSearchModel best;
  std::optional<RnnSearchModel> best_reverse;
  RnnSearchModel last;
  std::vector<ValidationRecord> records;
  double best_dev_bleu = -1.0;
  std::size_t best_iteration = 0;
  std::size_t iterations = 0;
  std::size_t skipped_updates = 0;
  /// Training loss per iteration.
  std::vector<double> losses;
};

/// Greedy dev BLEU (x100) of a model.
double dev_bleu(const RnnSearchModel& model, const std::vector<SentencePair>& dev);

TrainResult train(const TrainConfig& cfg, TrainInit init, const TrainCorpora& corpora, const TrainHooks& hooks = {});

}  // namespace nmt
