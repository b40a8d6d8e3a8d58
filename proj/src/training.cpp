// SPDX-License-Identifier: Apache-2.0

#include "nmt/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "nmt/decoding.hpp"
#include "nmt/metrics.hpp"

namespace nmt {

// ---------------------------------------------------------------------------
// Names

Criterion parse_criterion(const std::string& name) {
  if (name == "mle") return Criterion::kMle;
  if (name == "mrt") return Criterion::kMrt;
  if (name == "sst") return Criterion::kSst;
  throw ConfigError("unknown criterion '" + name + "' (expected mle, mrt or sst)");
}

std::string criterion_name(Criterion c) {
  switch (c) {
    case Criterion::kMle: return "mle";
    case Criterion::kMrt: return "mrt";
    case Criterion::kSst: return "sst";
  }
  return "?";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adadelta") return OptimizerKind::kAdadelta;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd, adadelta or adam)");
}

std::string optimizer_name(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kAdadelta: return "adadelta";
    case OptimizerKind::kAdam: return "adam";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Config

double default_learning_rate(Criterion c, OptimizerKind k) {
  if (k == OptimizerKind::kSgd) return 0.5;
  if (k == OptimizerKind::kAdadelta) return 1.0;  // unused: AdaDelta has no step size
  switch (c) {
    case Criterion::kMle: return 0.0005;
    case Criterion::kMrt: return 0.00001;
    case Criterion::kSst: return 0.00005;
  }
  return 0.0005;
}

double TrainConfig::resolved_learning_rate() const {
  return learning_rate ? *learning_rate : default_learning_rate(criterion, optimizer);
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(!learning_rate || *learning_rate > 0.0, "learning_rate must be positive");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(mrt_sample_size >= 1, "mrt_sample_size must be >= 1");
  require(mrt_alpha > 0.0, "mrt_alpha must be positive");
  require(sst_lambda >= 0.0 && sst_lambda <= 1.0, "sst_lambda must lie in [0, 1]");
  require(sst_sample_size >= 1, "sst_sample_size must be >= 1");
  require(clip_norm > 0.0, "clip_norm must be positive");
  require(validate_every >= 1, "validate_every must be >= 1");
  require(embed_dim >= 1 && hidden_dim >= 1 && attention_dim >= 1 && readout_dim >= 1,
          "model dimensions must be >= 1");
  require(init_scale > 0.0, "init_scale must be positive");
  require(src_vocab_size >= 1 && tgt_vocab_size >= 1, "vocabulary sizes must be >= 1");
  require(max_length >= 1, "max_length must be >= 1");
  require(adadelta_rho > 0.0 && adadelta_rho < 1.0, "adadelta_rho must lie in (0, 1)");
  require(adadelta_eps > 0.0, "adadelta_eps must be positive");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError("invalid value '" + std::string(value) + "' for " + std::string(key));
  }
  return out;
}

using Setter = void (*)(TrainConfig&, std::string_view, std::string_view);

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"criterion", [](TrainConfig& c, std::string_view, std::string_view v) { c.criterion = parse_criterion(std::string(v)); }},
      {"optimizer", [](TrainConfig& c, std::string_view, std::string_view v) { c.optimizer = parse_optimizer(std::string(v)); }},
      {"learning_rate", [](TrainConfig& c, std::string_view k, std::string_view v) { c.learning_rate = parse_number<double>(k, v); }},
      {"batch_size", [](TrainConfig& c, std::string_view k, std::string_view v) { c.batch_size = parse_number<std::size_t>(k, v); }},
      {"mrt_sample_size", [](TrainConfig& c, std::string_view k, std::string_view v) { c.mrt_sample_size = parse_number<std::size_t>(k, v); }},
      {"mrt_alpha", [](TrainConfig& c, std::string_view k, std::string_view v) { c.mrt_alpha = parse_number<double>(k, v); }},
      {"sst_lambda", [](TrainConfig& c, std::string_view k, std::string_view v) { c.sst_lambda = parse_number<double>(k, v); }},
      {"sst_sample_size", [](TrainConfig& c, std::string_view k, std::string_view v) { c.sst_sample_size = parse_number<std::size_t>(k, v); }},
      {"clip_norm", [](TrainConfig& c, std::string_view k, std::string_view v) { c.clip_norm = parse_number<double>(k, v); }},
      {"max_iterations", [](TrainConfig& c, std::string_view k, std::string_view v) { c.max_iterations = parse_number<std::size_t>(k, v); }},
      {"validate_every", [](TrainConfig& c, std::string_view k, std::string_view v) { c.validate_every = parse_number<std::size_t>(k, v); }},
      {"seed", [](TrainConfig& c, std::string_view k, std::string_view v) { c.seed = parse_number<std::uint64_t>(k, v); }},
      {"embed_dim", [](TrainConfig& c, std::string_view k, std::string_view v) { c.embed_dim = parse_number<std::size_t>(k, v); }},
      {"hidden_dim", [](TrainConfig& c, std::string_view k, std::string_view v) { c.hidden_dim = parse_number<std::size_t>(k, v); }},
      {"attention_dim", [](TrainConfig& c, std::string_view k, std::string_view v) { c.attention_dim = parse_number<std::size_t>(k, v); }},
      {"readout_dim", [](TrainConfig& c, std::string_view k, std::string_view v) { c.readout_dim = parse_number<std::size_t>(k, v); }},
      {"readout", [](TrainConfig& c, std::string_view, std::string_view v) {
         try {
           c.readout = parse_readout(std::string(v));
         } catch (const std::invalid_argument& e) {
           throw ConfigError(e.what());
         }
       }},
      {"init_scale", [](TrainConfig& c, std::string_view k, std::string_view v) { c.init_scale = parse_number<double>(k, v); }},
      {"src_vocab_size", [](TrainConfig& c, std::string_view k, std::string_view v) { c.src_vocab_size = parse_number<std::size_t>(k, v); }},
      {"tgt_vocab_size", [](TrainConfig& c, std::string_view k, std::string_view v) { c.tgt_vocab_size = parse_number<std::size_t>(k, v); }},
      {"max_length", [](TrainConfig& c, std::string_view k, std::string_view v) { c.max_length = parse_number<std::size_t>(k, v); }},
      {"adadelta_rho", [](TrainConfig& c, std::string_view k, std::string_view v) { c.adadelta_rho = parse_number<double>(k, v); }},
      {"adadelta_eps", [](TrainConfig& c, std::string_view k, std::string_view v) { c.adadelta_eps = parse_number<double>(k, v); }},
      {"adam_beta1", [](TrainConfig& c, std::string_view k, std::string_view v) { c.adam_beta1 = parse_number<double>(k, v); }},
      {"adam_beta2", [](TrainConfig& c, std::string_view k, std::string_view v) { c.adam_beta2 = parse_number<double>(k, v); }},
      {"adam_eps", [](TrainConfig& c, std::string_view k, std::string_view v) { c.adam_eps = parse_number<double>(k, v); }},
  };
  return table;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, _] : setters()) keys.push_back(k);
  return keys;
}

void apply_config_entry(TrainConfig& cfg, std::string_view key, std::string_view value) {
  auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + std::string(key) + "'");
  it->second(cfg, key, value);
}

TrainConfig parse_config(std::string_view text, TrainConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    apply_config_entry(base, key, value);
  }
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), std::move(base));
}

// ---------------------------------------------------------------------------
// Criteria

Tensor mle_loss(const RnnSearchModel& model, const Batch& batch) {
  Tensor lp = sequence_log_probs(model, batch);
  return scale(sum(lp), -1.0 / static_cast<double>(batch.size));
}

Tensor risk_from_log_probs(const Tensor& log_probs, std::span<const double> costs, double alpha) {
  if (log_probs.size() != costs.size() || costs.empty()) {
    throw std::invalid_argument("risk_from_log_probs: need one cost per candidate");
  }
  const std::size_t n = costs.size();
  Tensor q = softmax_rows(reshape(scale(log_probs, alpha), {1, n}));
  Tensor c = Tensor::from({1, n}, std::vector<double>(costs.begin(), costs.end()));
  return sum(mul(q, c));
}

std::vector<IdSequence> mrt_candidates(const RnnSearchModel& model, const IdSequence& src, const IdSequence& gold,
                                       std::size_t sample_size, std::mt19937_64& rng) {
  if (sample_size < 1) throw std::invalid_argument("mrt: sample_size must be >= 1");
  std::vector<IdSequence> candidates{gold};
  std::set<IdSequence> seen{gold};
  const IdSequence source = with_eos(src);
  for (const Hypothesis& h : sample_many(model, source, sample_size, rng, default_max_len(source.size()))) {
    IdSequence out = h.output();
    if (seen.insert(out).second) candidates.push_back(std::move(out));
  }
  return candidates;
}

namespace {

Tensor candidate_log_probs(const RnnSearchModel& model, const IdSequence& src, const std::vector<IdSequence>& cands) {
  std::vector<SentencePair> pairs;
  pairs.reserve(cands.size());
  for (const auto& c : cands) pairs.push_back({src, c});
  return sequence_log_probs(model, make_batch(pairs));
}

Tensor risk_for(const RnnSearchModel& model, const IdSequence& src, const IdSequence& gold,
                const std::vector<IdSequence>& cands, double alpha) {
  std::vector<double> costs;
  costs.reserve(cands.size());
  for (const auto& c : cands) costs.push_back(-sentence_bleu_smoothed(c, gold));
  return risk_from_log_probs(candidate_log_probs(model, src, cands), costs, alpha);
}

}  // namespace

Tensor mrt_loss(const RnnSearchModel& model, const IdSequence& src, const IdSequence& gold, std::size_t sample_size,
                double alpha, std::mt19937_64& rng) {
  return risk_for(model, src, gold, mrt_candidates(model, src, gold, sample_size, rng), alpha);
}

double mrt_expected_risk(const RnnSearchModel& model, const std::vector<SentencePair>& pairs, std::size_t sample_size,
                         double alpha, std::uint64_t seed) {
  if (pairs.empty()) throw std::invalid_argument("mrt_expected_risk: no pairs");
  NoGradScope no_grad;
  double total = 0.0;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    std::mt19937_64 rng(seed + i);
    total += mrt_loss(model, pairs[i].src, pairs[i].tgt, sample_size, alpha, rng).item();
  }
  return total / static_cast<double>(pairs.size());
}

namespace {

// -(1/(M K)) sum_x sum_k log p_reverse(x | y_k), y_k sampled from `forward`.
Tensor reconstruction(const RnnSearchModel& forward, const RnnSearchModel& reverse,
                      const std::vector<IdSequence>& mono, std::size_t sample_size, std::mt19937_64& rng) {
  std::vector<SentencePair> pairs;
  for (const auto& x : mono) {
    const IdSequence source = with_eos(x);
    for (const Hypothesis& h : sample_many(forward, source, sample_size, rng, default_max_len(source.size()))) {
      pairs.push_back({h.output(), x});
    }
  }
  Tensor lp = sequence_log_probs(reverse, make_batch(pairs));
  return scale(sum(lp), -1.0 / static_cast<double>(pairs.size()));
}

std::vector<SentencePair> reversed(const std::vector<SentencePair>& pairs) {
  std::vector<SentencePair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.tgt, p.src});
  return out;
}

}  // namespace

std::pair<Tensor, Tensor> sst_loss(const RnnSearchModel& s2t, const RnnSearchModel& t2s,
                                   const std::vector<SentencePair>& parallel, const std::vector<IdSequence>& mono_src,
                                   const std::vector<IdSequence>& mono_tgt, double lambda, std::size_t sample_size,
                                   std::mt19937_64& rng) {
  if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("sst_loss: lambda must lie in [0, 1]");
  if (sample_size < 1) throw std::invalid_argument("sst_loss: sample_size must be >= 1");
  if (parallel.empty()) throw std::invalid_argument("sst_loss: empty parallel batch");
  Tensor loss_s2t = mle_loss(s2t, make_batch(parallel));
  Tensor loss_t2s = mle_loss(t2s, make_batch(reversed(parallel)));
  if (lambda == 0.0) return {loss_s2t, loss_t2s};
  // Source-side monolingual text trains the reverse model and vice versa.
  if (!mono_src.empty()) loss_t2s = add(loss_t2s, scale(reconstruction(s2t, t2s, mono_src, sample_size, rng), lambda));
  if (!mono_tgt.empty()) loss_s2t = add(loss_s2t, scale(reconstruction(t2s, s2t, mono_tgt, sample_size, rng), lambda));
  return {loss_s2t, loss_t2s};
}

// ---------------------------------------------------------------------------
// Optimizers

namespace {

std::vector<std::vector<double>> zeros_like(std::span<const Tensor> params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const Tensor& p : params) out.emplace_back(p.size(), 0.0);
  return out;
}

void check_state(std::span<const Tensor> params, const std::vector<std::vector<double>>& acc, const char* who) {
  if (acc.size() != params.size()) throw std::invalid_argument(std::string(who) + ": state/parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (acc[i].size() != params[i].size()) throw std::invalid_argument(std::string(who) + ": state shape mismatch");
  }
}

}  // namespace

void sgd_step(std::span<const Tensor> params, double lr) {
  for (Tensor p : params) {
    auto theta = p.data();
    auto g = p.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * g[i];
  }
}

AdadeltaState make_adadelta_state(std::span<const Tensor> params, double rho, double eps) {
  AdadeltaState s;
  s.rho = rho;
  s.eps = eps;
  s.sq_grad = zeros_like(params);
  s.sq_update = zeros_like(params);
  return s;
}

AdamState make_adam_state(std::span<const Tensor> params, double lr, double beta1, double beta2, double eps) {
  AdamState s;
  s.lr = lr;
  s.beta1 = beta1;
  s.beta2 = beta2;
  s.eps = eps;
  s.m = zeros_like(params);
  s.v = zeros_like(params);
  return s;
}

void adadelta_step(std::span<const Tensor> params, AdadeltaState& state) {
  check_state(params, state.sq_grad, "adadelta_step");
  check_state(params, state.sq_update, "adadelta_step");
  const double rho = state.rho;
  const double eps = state.eps;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto theta = p.data();
    auto g = p.grad();
    auto& eg = state.sq_grad[k];
    auto& ed = state.sq_update[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      eg[i] = rho * eg[i] + (1.0 - rho) * g[i] * g[i];
      const double delta = -(std::sqrt(ed[i] + eps) / std::sqrt(eg[i] + eps)) * g[i];
      ed[i] = rho * ed[i] + (1.0 - rho) * delta * delta;
      theta[i] += delta;
    }
  }
}

bool adam_step(std::span<const Tensor> params, AdamState& state) {
  check_state(params, state.m, "adam_step");
  check_state(params, state.v, "adam_step");
  for (Tensor p : params) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) return false;
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor p = params[k];
    auto theta = p.data();
    auto g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      theta[i] -= state.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
  return true;
}

Optimizer::Optimizer(const TrainConfig& cfg, std::vector<Tensor> params)
    : kind_(cfg.optimizer), lr_(cfg.resolved_learning_rate()), params_(std::move(params)) {
  if (kind_ == OptimizerKind::kAdadelta) adadelta_ = make_adadelta_state(params_, cfg.adadelta_rho, cfg.adadelta_eps);
  if (kind_ == OptimizerKind::kAdam) {
    adam_ = make_adam_state(params_, lr_, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  }
}

bool Optimizer::step() {
  switch (kind_) {
    case OptimizerKind::kSgd:
      sgd_step(params_, lr_);
      return true;
    case OptimizerKind::kAdadelta:
      adadelta_step(params_, adadelta_);
      return true;
    case OptimizerKind::kAdam:
      return adam_step(params_, adam_);
  }
  return false;
}

// ---------------------------------------------------------------------------
// Training loop

std::string format_record(const ValidationRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%s\t%.6f\t%.4f\t%.3f", r.iteration, criterion_name(r.criterion).c_str(), r.loss,
                r.dev_bleu, r.seconds);
  return buf;
}

double dev_bleu(const RnnSearchModel& model, const std::vector<SentencePair>& dev) {
  if (dev.empty()) throw std::invalid_argument("dev_bleu: empty dev set");
  std::vector<IdSequence> srcs;
  std::vector<IdSequence> refs;
  for (const auto& p : dev) {
    srcs.push_back(with_eos(p.src));
    refs.push_back(p.tgt);
  }
  return corpus_bleu_ids(greedy_decode_batch(model, srcs), refs).bleu * 100.0;
}

namespace {

// Cycles through a list in fixed-size chunks.
template <typename T>
class Cycler {
 public:
  Cycler(const std::vector<T>& items, std::size_t chunk) : items_(items), chunk_(chunk) {}
  std::vector<T> next() {
    std::vector<T> out;
    if (items_.empty()) return out;
    for (std::size_t i = 0; i < std::min(chunk_, items_.size()); ++i) {
      out.push_back(items_[pos_]);
      pos_ = (pos_ + 1) % items_.size();
    }
    return out;
  }

 private:
  const std::vector<T>& items_;
  std::size_t chunk_;
  std::size_t pos_ = 0;
};

ModelDims dims_from(const TrainConfig& cfg) {
  ModelDims d;
  d.src_vocab = cfg.src_vocab_size;
  d.tgt_vocab = cfg.tgt_vocab_size;
  d.embed = cfg.embed_dim;
  d.hidden = cfg.hidden_dim;
  d.attention = cfg.attention_dim;
  d.readout = cfg.readout_dim;
  d.readout_kind = cfg.readout;
  return d;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, TrainInit init, const TrainCorpora& corpora, const TrainHooks& hooks) {
  cfg.validate();
  if (!cfg.seed) throw ConfigError("a seed is required (set `seed` in the config or pass --seed)");
  const std::uint64_t seed = *cfg.seed;
  if (cfg.criterion != Criterion::kMle && !init.model) {
    throw TrainingError(criterion_name(cfg.criterion) + " training must start from an MLE-trained model");
  }
  if (cfg.criterion == Criterion::kSst && !init.reverse) {
    throw TrainingError("sst training needs an MLE-trained target-to-source model as well");
  }
  if (corpora.train.empty()) throw TrainingError("empty training corpus");

  RnnSearchModel model = init.model ? init.model->clone() : init_parameters(dims_from(cfg), seed, cfg.init_scale);
  std::optional<RnnSearchModel> reverse;
  if (cfg.criterion == Criterion::kSst) reverse = init.reverse->clone();

  std::vector<Tensor> params = model.parameters();
  if (reverse) {
    for (const Tensor& p : reverse->parameters()) params.push_back(p);
  }
  for (Tensor& p : params) {
    p.set_requires_grad(true);
    p.grad();
  }
  Optimizer opt(cfg, params);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);

  const std::vector<SentencePair> dev_reverse = reversed(corpora.dev);
  Cycler<IdSequence> mono_src(corpora.mono_src, cfg.batch_size);
  Cycler<IdSequence> mono_tgt(corpora.mono_tgt, cfg.batch_size);

  TrainResult result;
  result.best = model.clone();
  if (reverse) result.best_reverse = reverse->clone();
  const auto start = std::chrono::steady_clock::now();

  std::size_t epoch = 0;
  std::vector<Batch> batches = make_batches(corpora.train, cfg.batch_size, seed);
  std::size_t next_batch = 0;
  double loss_acc = 0.0;
  std::size_t loss_count = 0;

  for (std::size_t iter = 1; iter <= cfg.max_iterations; ++iter) {
    if (next_batch == batches.size()) {
      ++epoch;
      batches = make_batches(corpora.train, cfg.batch_size, seed + epoch);
      next_batch = 0;
    }
    const Batch& batch = batches[next_batch++];
    for (Tensor& p : params) p.zero_grad();

    Graph graph;
    Tensor loss;
    {
      GraphScope scope(graph);
      switch (cfg.criterion) {
        case Criterion::kMle:
          loss = mle_loss(model, batch);
          break;
        case Criterion::kMrt: {
          for (std::size_t origin : batch.origin) {
            const SentencePair& pair = corpora.train[origin];
            Tensor risk = mrt_loss(model, pair.src, pair.tgt, cfg.mrt_sample_size, cfg.mrt_alpha, rng);
            loss = loss.defined() ? add(loss, risk) : risk;
          }
          loss = scale(loss, 1.0 / static_cast<double>(batch.origin.size()));
          break;
        }
        case Criterion::kSst: {
          std::vector<SentencePair> pairs;
          for (std::size_t origin : batch.origin) pairs.push_back(corpora.train[origin]);
          auto [a, b] = sst_loss(model, *reverse, pairs, mono_src.next(), mono_tgt.next(), cfg.sst_lambda,
                                 cfg.sst_sample_size, rng);
          loss = add(a, b);
          break;
        }
      }
    }
    backward(graph, loss);
    graph.clear();
    if (hooks.after_backward) hooks.after_backward(iter, opt);

    const double loss_value = loss.item();
    const double norm = clip_gradients(params, cfg.clip_norm);
    const bool finite = std::isfinite(loss_value) && std::isfinite(norm);
    if (!finite && cfg.optimizer != OptimizerKind::kAdam) {
      throw TrainingError("non-finite " + std::string(std::isfinite(loss_value) ? "gradient" : "loss") +
                          " at iteration " + std::to_string(iter) + " under " + optimizer_name(cfg.optimizer));
    }
    const bool applied = opt.step();
    if (!applied) ++result.skipped_updates;
    if (hooks.after_step) hooks.after_step(iter, loss_value, applied, opt);
    result.losses.push_back(loss_value);
    if (std::isfinite(loss_value)) {
      loss_acc += loss_value;
      ++loss_count;
    }
    result.iterations = iter;

    const bool validate_now = !corpora.dev.empty() && (iter % cfg.validate_every == 0 || iter == cfg.max_iterations);
    if (!validate_now) continue;
    ValidationRecord record;
    record.iteration = iter;
    record.criterion = cfg.criterion;
    record.loss = loss_count ? loss_acc / static_cast<double>(loss_count) : std::nan("");
    record.dev_bleu = dev_bleu(model, corpora.dev);
    if (reverse) record.dev_bleu = 0.5 * (record.dev_bleu + dev_bleu(*reverse, dev_reverse));
    record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    loss_acc = 0.0;
    loss_count = 0;
    result.records.push_back(record);
    if (hooks.log) *hooks.log << format_record(record) << '\n' << std::flush;
    if (record.dev_bleu > result.best_dev_bleu) {
      result.best_dev_bleu = record.dev_bleu;
      result.best_iteration = iter;
      result.best = model.clone();
      if (reverse) result.best_reverse = reverse->clone();
    }
    if (hooks.on_validate && hooks.on_validate(record)) break;
  }

  result.last = model.clone();
  if (result.records.empty()) {
    result.best = model.clone();
    if (reverse) result.best_reverse = reverse->clone();
  }
  return result;
}

}  // namespace nmt
