// SPDX-License-Identifier: Apache-2.0

#include "nmt/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace nmt {

namespace {

std::vector<double> row_of(const Tensor& t, std::size_t row) {
  const std::size_t width = t.size() / t.dim(0);
  auto d = t.data();
  return std::vector<double>(d.begin() + static_cast<std::ptrdiff_t>(row * width),
                             d.begin() + static_cast<std::ptrdiff_t>((row + 1) * width));
}

void check_source(const IdSequence& src) {
  if (src.empty()) throw std::invalid_argument("decode: empty source");
  if (src.back() != kEosId) throw std::invalid_argument("decode: source must end with EOS");
}

// Appends a forced EOS to every hypothesis in `rows` by running one more step.
void force_eos(const RnnSearchModel& model, const EncoderAnnotations& ann, std::vector<Hypothesis*>& rows) {
  if (rows.empty()) return;
  std::vector<std::size_t> index(rows.size(), 0);
  EncoderAnnotations expanded = select_rows(ann, index);
  std::vector<int> prev;
  std::vector<double> stacked;
  for (Hypothesis* h : rows) {
    prev.push_back(h->tokens.back());
    auto s = h->state.data();
    stacked.insert(stacked.end(), s.begin(), s.end());
  }
  Tensor state = Tensor::from({rows.size(), model.dims.hidden}, std::move(stacked));
  DecodeStep step = decode_step(model, state, prev, expanded);
  Tensor logp = log_softmax_rows(step.logits);
  const std::size_t vocab = model.dims.tgt_vocab;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Hypothesis& h = *rows[i];
    h.log_prob += logp[i * vocab + kEosId];
    h.tokens.push_back(kEosId);
    h.attn_trail.push_back(row_of(step.weights, i));
    h.state = select_rows(step.state, std::vector<std::size_t>{i});
    h.truncated = true;
    h.finished = false;
  }
}

Tensor stack_states(const std::vector<Hypothesis>& hyps, std::size_t hidden) {
  std::vector<double> values;
  values.reserve(hyps.size() * hidden);
  for (const auto& h : hyps) {
    auto s = h.state.data();
    values.insert(values.end(), s.begin(), s.end());
  }
  return Tensor::from({hyps.size(), hidden}, std::move(values));
}

}  // namespace

IdSequence Hypothesis::output() const {
  IdSequence out(tokens.begin() + 1, tokens.end());
  if (!out.empty() && out.back() == kEosId) out.pop_back();
  return out;
}

IdSequence with_eos(IdSequence ids) {
  ids.push_back(kEosId);
  return ids;
}

std::size_t default_max_len(std::size_t src_len) { return 2 * src_len + 10; }

std::vector<Hypothesis> beam_search(const RnnSearchModel& model, const IdSequence& src, const BeamOptions& opts) {
  NoGradScope no_grad;
  check_source(src);
  if (opts.beam < 1) throw std::invalid_argument("beam_search: beam must be >= 1");
  if (opts.max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");
  const std::size_t vocab = model.dims.tgt_vocab;
  const std::size_t hidden = model.dims.hidden;

  EncoderAnnotations ann = encode(model, src);
  std::vector<Hypothesis> live(1);
  live[0].state = decoder_init(model, ann);
  std::vector<Hypothesis> completed;

  auto score = [&](const Hypothesis& h) {
    return opts.length_norm ? h.log_prob / static_cast<double>(h.length()) : h.log_prob;
  };

  for (std::size_t t = 0; t < opts.max_len && !live.empty(); ++t) {
    std::vector<std::size_t> rows(live.size(), 0);
    EncoderAnnotations expanded = select_rows(ann, rows);
    std::vector<int> prev;
    for (const auto& h : live) prev.push_back(h.tokens.back());
    DecodeStep step = decode_step(model, stack_states(live, hidden), prev, expanded);
    Tensor logp = log_softmax_rows(step.logits);

    struct Candidate {
      double log_prob;
      std::size_t hyp;
      int token;
    };
    std::vector<Candidate> candidates;
    candidates.reserve(live.size() * vocab);
    for (std::size_t h = 0; h < live.size(); ++h) {
      for (std::size_t w = 0; w < vocab; ++w) {
        if (w == kPadId || w == kBosId) continue;
        candidates.push_back({live[h].log_prob + logp[h * vocab + w], h, static_cast<int>(w)});
      }
    }
    const std::size_t keep = std::min(candidates.size(), opts.beam - completed.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });

    std::vector<Hypothesis> next;
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = candidates[c];
      Hypothesis h;
      h.tokens = live[cand.hyp].tokens;
      h.tokens.push_back(cand.token);
      h.log_prob = cand.log_prob;
      h.attn_trail = live[cand.hyp].attn_trail;
      h.attn_trail.push_back(row_of(step.weights, cand.hyp));
      h.state = select_rows(step.state, std::vector<std::size_t>{cand.hyp});
      if (cand.token == kEosId) {
        h.finished = true;
        h.completion_rank = completed.size();
        completed.push_back(std::move(h));
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
    if (completed.size() >= opts.beam) break;

    // Scores only fall as hypotheses grow, so without length normalization a
    // live hypothesis that cannot beat the worst completed one never will.
    if (!opts.length_norm && !completed.empty() && !live.empty()) {
      double worst = std::numeric_limits<double>::infinity();
      for (const auto& h : completed) worst = std::min(worst, h.log_prob);
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& h : live) best_live = std::max(best_live, h.log_prob);
      if (best_live <= worst) live.clear();
    }
  }

  if (!live.empty()) {
    std::vector<Hypothesis*> rows;
    for (auto& h : live) rows.push_back(&h);
    force_eos(model, ann, rows);
    for (auto& h : live) {
      h.completion_rank = completed.size();
      completed.push_back(std::move(h));
    }
  }

  std::sort(completed.begin(), completed.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    const double sa = score(a);
    const double sb = score(b);
    if (sa != sb) return sa > sb;
    if (a.completion_rank != b.completion_rank) return a.completion_rank < b.completion_rank;
    return a.tokens < b.tokens;
  });
  if (completed.size() > opts.beam) completed.resize(opts.beam);
  return completed;
}

Hypothesis greedy_decode(const RnnSearchModel& model, const IdSequence& src, std::size_t max_len) {
  NoGradScope no_grad;
  check_source(src);
  if (max_len < 1) throw std::invalid_argument("greedy_decode: max_len must be >= 1");
  const std::size_t vocab = model.dims.tgt_vocab;
  EncoderAnnotations ann = encode(model, src);
  Hypothesis h;
  h.state = decoder_init(model, ann);
  for (std::size_t t = 0; t < max_len; ++t) {
    DecodeStep step = decode_step(model, h.state, std::vector<int>{h.tokens.back()}, ann);
    Tensor logp = log_softmax_rows(step.logits);
    std::size_t best = kEosId;
    for (std::size_t w = 0; w < vocab; ++w) {
      if (w == kPadId || w == kBosId) continue;
      if (logp[w] > logp[best] || (logp[w] == logp[best] && w < best)) best = w;
    }
    h.tokens.push_back(static_cast<int>(best));
    h.log_prob += logp[best];
    h.attn_trail.push_back(row_of(step.weights, 0));
    h.state = step.state;
    if (best == static_cast<std::size_t>(kEosId)) {
      h.finished = true;
      return h;
    }
  }
  std::vector<Hypothesis*> rows{&h};
  force_eos(model, ann, rows);
  return h;
}

std::vector<IdSequence> greedy_decode_batch(const RnnSearchModel& model, const std::vector<IdSequence>& srcs,
                                            std::size_t max_len) {
  NoGradScope no_grad;
  std::vector<IdSequence> outputs(srcs.size());
  if (srcs.empty()) return outputs;
  std::vector<IdSequence> stripped;
  for (const auto& s : srcs) {
    check_source(s);
    stripped.emplace_back(s.begin(), s.end() - 1);
  }
  std::vector<int> ids;
  std::vector<double> mask;
  std::size_t len = 0;
  pad_sequences(stripped, ids, mask, len);
  const std::size_t batch = srcs.size();
  const std::size_t vocab = model.dims.tgt_vocab;
  EncoderAnnotations ann = encode(model, ids, mask, batch, len);
  Tensor state = decoder_init(model, ann);

  std::vector<std::size_t> budget(batch);
  std::size_t steps = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    budget[b] = max_len ? max_len : default_max_len(srcs[b].size());
    steps = std::max(steps, budget[b]);
  }
  std::vector<int> prev(batch, kBosId);
  std::vector<bool> done(batch, false);
  std::vector<std::size_t> active(batch);
  std::iota(active.begin(), active.end(), 0);
  for (std::size_t t = 0; t < steps && !active.empty(); ++t) {
    DecodeStep step = decode_step(model, state, prev, ann);
    std::vector<std::size_t> keep;
    std::vector<int> next_prev;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const std::size_t b = active[i];
      const double* row = &step.logits.data()[i * vocab];
      std::size_t best = kEosId;
      for (std::size_t w = 0; w < vocab; ++w) {
        if (w == kPadId || w == kBosId) continue;
        if (row[w] > row[best] || (row[w] == row[best] && w < best)) best = w;
      }
      if (best == static_cast<std::size_t>(kEosId)) continue;
      outputs[b].push_back(static_cast<int>(best));
      if (t + 1 >= budget[b]) continue;
      keep.push_back(i);
      next_prev.push_back(static_cast<int>(best));
    }
    if (keep.size() != active.size()) {
      std::vector<std::size_t> next_active;
      for (std::size_t i : keep) next_active.push_back(active[i]);
      active = std::move(next_active);
      if (active.empty()) break;
      ann = select_rows(ann, keep);
      state = select_rows(step.state, keep);
    } else {
      state = step.state;
    }
    prev = std::move(next_prev);
  }
  return outputs;
}

std::vector<Hypothesis> sample_many(const RnnSearchModel& model, const IdSequence& src, std::size_t count,
                                    std::mt19937_64& rng, std::size_t max_len) {
  NoGradScope no_grad;
  check_source(src);
  if (max_len < 1) throw std::invalid_argument("sample: max_len must be >= 1");
  std::vector<Hypothesis> hyps(count);
  if (count == 0) return hyps;
  const std::size_t vocab = model.dims.tgt_vocab;
  EncoderAnnotations base = encode(model, src);
  std::vector<std::size_t> zeros(count, 0);
  EncoderAnnotations ann = select_rows(base, zeros);
  Tensor state = select_rows(decoder_init(model, base), zeros);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  std::vector<std::size_t> active(count);
  std::iota(active.begin(), active.end(), 0);
  for (std::size_t t = 0; t < max_len && !active.empty(); ++t) {
    std::vector<int> prev;
    for (std::size_t h : active) prev.push_back(hyps[h].tokens.back());
    DecodeStep step = decode_step(model, state, prev, ann);
    Tensor logp = log_softmax_rows(step.logits);
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < active.size(); ++i) {
      Hypothesis& h = hyps[active[i]];
      // PAD and BOS are never drawn; u covers the remaining mass.
      double mass = 0.0;
      for (std::size_t w = 0; w < vocab; ++w) {
        if (w != kPadId && w != kBosId) mass += std::exp(logp[i * vocab + w]);
      }
      const double u = uniform(rng) * mass;
      double cumulative = 0.0;
      std::size_t drawn = vocab;
      for (std::size_t w = 0; w < vocab; ++w) {
        if (w == kPadId || w == kBosId) continue;
        cumulative += std::exp(logp[i * vocab + w]);
        if (u < cumulative) {
          drawn = w;
          break;
        }
      }
      if (drawn == vocab) {  // rounding left u above the final cumulative sum
        drawn = vocab - 1;
        while (logp[i * vocab + drawn] == -std::numeric_limits<double>::infinity()) --drawn;
      }
      h.tokens.push_back(static_cast<int>(drawn));
      h.log_prob += logp[i * vocab + drawn];
      h.attn_trail.push_back(row_of(step.weights, i));
      h.state = select_rows(step.state, std::vector<std::size_t>{i});
      if (drawn == static_cast<std::size_t>(kEosId)) {
        h.finished = true;
      } else {
        keep.push_back(i);
      }
    }
    if (keep.empty()) {
      active.clear();
      break;
    }
    std::vector<std::size_t> next_active;
    for (std::size_t i : keep) next_active.push_back(active[i]);
    if (keep.size() != active.size()) ann = select_rows(ann, keep);
    state = select_rows(step.state, keep);
    active = std::move(next_active);
  }
  if (!active.empty()) {
    std::vector<Hypothesis*> rows;
    for (std::size_t h : active) rows.push_back(&hyps[h]);
    force_eos(model, base, rows);
  }
  return hyps;
}

Hypothesis sample(const RnnSearchModel& model, const IdSequence& src, std::mt19937_64& rng, std::size_t max_len) {
  return sample_many(model, src, 1, rng, max_len).front();
}

double score_sequence(const RnnSearchModel& model, const IdSequence& src, const IdSequence& tgt) {
  NoGradScope no_grad;
  check_source(src);
  if (tgt.empty() || tgt.back() != kEosId) throw std::invalid_argument("score_sequence: target must end with EOS");
  EncoderAnnotations ann = encode(model, src);
  Tensor state = decoder_init(model, ann);
  int prev = kBosId;
  double total = 0.0;
  for (int y : tgt) {
    DecodeStep step = decode_step(model, state, std::vector<int>{prev}, ann);
    Tensor logp = log_softmax_rows(step.logits);
    total += logp[static_cast<std::size_t>(y)];
    state = step.state;
    prev = y;
  }
  return total;
}

Sentence replace_unk(const Hypothesis& hyp, const Sentence& src_tokens, const BilingualDictionary& dict,
                     const Vocabulary& tgt_vocab) {
  Sentence out;
  const IdSequence emitted = hyp.output();
  for (std::size_t t = 0; t < emitted.size(); ++t) {
    const int id = emitted[t];
    if (id != kUnkId) {
      out.push_back(tgt_vocab.token(id));
      continue;
    }
    if (t >= hyp.attn_trail.size()) throw std::invalid_argument("replace_unk: attention trail is incomplete");
    const auto& weights = hyp.attn_trail[t];
    std::size_t best = 0;
    for (std::size_t j = 1; j < weights.size(); ++j) {
      if (weights[j] > weights[best]) best = j;
    }
    if (best >= src_tokens.size()) {  // attended to the source EOS
      out.push_back(tgt_vocab.token(kUnkId));
      continue;
    }
    const std::string& word = src_tokens[best];
    auto entry = dict.find(word);
    out.push_back(entry ? entry->target : word);
  }
  return out;
}

}  // namespace nmt
