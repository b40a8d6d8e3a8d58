// SPDX-License-Identifier: Apache-2.0
//
// Beam search, greedy and ancestral-sampling decoders over a frozen model,
// plus attention-based unknown-word replacement.

#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "nmt/data.hpp"
#include "nmt/model.hpp"

namespace nmt {

struct Hypothesis {
  IdSequence tokens{kBosId};  // BOS first
  double log_prob = 0.0;
  Tensor state;  // decoder state after the last token, [1, d_h]
  std::vector<std::vector<double>> attn_trail;  // one source-length row per emitted token
  bool finished = false;
  /// Free decoding ran out of steps; EOS was appended and scored.
  bool truncated = false;
  /// Order in which the hypothesis entered the completed pool.
  std::size_t completion_rank = 0;

  /// Emitted tokens without BOS and without a trailing EOS.
  IdSequence output() const;
  std::size_t length() const { return tokens.size() - 1; }
};

struct BeamOptions {
  std::size_t beam = 10;
  std::size_t max_len = 100;
  bool length_norm = false;
};

/// Default decoding budget for a source of the given length (EOS included).
std::size_t default_max_len(std::size_t src_len);

/// Expands live hypotheses over the target vocabulary and keeps the best
/// (beam - completed) candidates; EOS candidates retire to the completed
/// pool. Returns completed hypotheses best-first.
std::vector<Hypothesis> beam_search(const RnnSearchModel& model, const IdSequence& src, const BeamOptions& opts);

/// Argmax decoding, one sentence (ties to the smallest id).
Hypothesis greedy_decode(const RnnSearchModel& model, const IdSequence& src, std::size_t max_len);

/// Greedy decoding of many sentences in one padded batch; returns outputs
/// without EOS. max_len = 0 picks default_max_len per sentence.
std::vector<IdSequence> greedy_decode_batch(const RnnSearchModel& model, const std::vector<IdSequence>& srcs,
                                            std::size_t max_len = 0);

/// Ancestral sampling of `count` independent sequences for one source.
std::vector<Hypothesis> sample_many(const RnnSearchModel& model, const IdSequence& src, std::size_t count,
                                    std::mt19937_64& rng, std::size_t max_len);
Hypothesis sample(const RnnSearchModel& model, const IdSequence& src, std::mt19937_64& rng, std::size_t max_len);

/// Teacher-forced log p(tgt | src); tgt must end with EOS (BOS is implicit).
double score_sequence(const RnnSearchModel& model, const IdSequence& src, const IdSequence& tgt);

/// Replaces every UNK output by the dictionary translation of the source word
/// with the highest attention weight, or by that source word itself.
Sentence replace_unk(const Hypothesis& hyp, const Sentence& src_tokens, const BilingualDictionary& dict,
                     const Vocabulary& tgt_vocab);

/// Source ids with EOS appended.
IdSequence with_eos(IdSequence ids);

}  // namespace nmt
