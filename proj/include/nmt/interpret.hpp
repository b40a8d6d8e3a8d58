// SPDX-License-Identifier: Apache-2.0
//
// Layer-wise relevance propagation for the attention model. A trace records
// every intermediate vector of one forced translation; relevance is pushed
// from a chosen node back to the source words and the target prefix with
// the epsilon rule for weighted sums, identity for elementwise
// nonlinearities, and signal-takes-all for gate products.

#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nmt/data.hpp"
#include "nmt/model.hpp"
#include "json.hpp"

namespace nmt {

using Vec = std::vector<double>;

struct GruTrace {
  Vec x;
  Vec h_prev;
  Vec z;
  Vec r;
  Vec rh;        // r * h_prev
  Vec cand_pre;  // x Wc + rh Uc + bc
  Vec cand;
  Vec h;
};

struct DecoderStepTrace {
  int y_prev = kBosId;
  int y = kEosId;
  Vec emb;       // embedding of y_prev
  Vec s_prev;
  Vec alpha;     // attention weights over source positions (EOS included)
  Vec context;
  GruTrace gru;  // input [emb ; context]
  Vec readout_pre;
  Vec readout;
  Vec logits;
  Vec probs;
};

struct ActivationTrace {
  IdSequence src;  // with EOS
  IdSequence tgt;  // without EOS
  std::vector<Vec> src_embed;
  std::vector<GruTrace> enc_fwd;
  std::vector<GruTrace> enc_bwd;
  Vec init_pre;
  Vec s0;
  std::vector<DecoderStepTrace> steps;

  /// Number of source words (EOS excluded) and target words.
  std::size_t src_words() const { return src.size() - 1; }
  std::size_t tgt_words() const { return tgt.size(); }

  /// Every recorded vector keyed by (layer name, position).
  std::map<std::pair<std::string, std::size_t>, Vec> entries() const;
};

/// Layers that can be selected for propagation, bottom to top.
const std::vector<std::string>& relevance_layers();
/// "layer:pos" for every selectable node: 3 * source words + 4 * target words.
std::vector<std::string> node_ids(const ActivationTrace& trace);
std::size_t node_count(std::size_t src_words, std::size_t tgt_words);

/// Forced forward pass over src (EOS appended here) and tgt.
ActivationTrace capture_trace(const RnnSearchModel& model, const IdSequence& src, const IdSequence& tgt);

struct LrpConfig {
  double epsilon = 1e-6;
  /// Empty selects every node.
  std::vector<std::string> nodes;
};

struct RelevanceMap {
  Vec src;         // one value per source word
  Vec tgt_prefix;  // one value per target word before the node's step
  double raw_sum = 0.0;
};

/// Unnormalized relevance reaching the word embeddings from `node_id`
/// seeded with `seed` (scalar node) or seed / n per component (vector node).
RelevanceMap propagate_raw(const RnnSearchModel& model, const ActivationTrace& trace, const std::string& node_id,
                           double epsilon, double seed = 1.0);

/// Rescales to sum 1; a zero or non-finite sum yields the uniform map.
RelevanceMap normalize(RelevanceMap map);

RelevanceMap lrp_propagate(const RnnSearchModel& model, const ActivationTrace& trace, const std::string& node_id,
                           const LrpConfig& cfg = {});

// Propagation rules, exposed for testing.
namespace lrp {

/// v = a W (+ b, + other groups); returns the relevance of a given the full
/// pre-activation v and the output relevance. W is [in, out].
Vec linear(std::span<const double> a, const Tensor& w, std::span<const double> v, std::span<const double> r_out,
           double epsilon);
/// Same with a dense row-major weight block.
Vec linear(std::span<const double> a, std::span<const double> w, std::size_t out, std::span<const double> v,
           std::span<const double> r_out, double epsilon);

/// Elementwise nonlinearity: relevance passes through unchanged.
Vec nonlinearity(std::span<const double> r_out);

/// Maxout over two halves: the winning half takes the unit's relevance.
Vec maxout(std::span<const double> pre, std::span<const double> r_out);

struct GateSplit {
  Vec signal;
  Vec gate;
};
/// s * g: everything to the signal, nothing to the gate.
GateSplit gate_product(std::span<const double> r_out);

struct GruRelevance {
  Vec x;
  Vec h_prev;
  Vec z;  // always zero
  Vec r;  // always zero
};
GruRelevance gru(const GruParams& params, const GruTrace& t, std::span<const double> r_out, double epsilon);

}  // namespace lrp

struct RelevanceNode {
  std::string id;
  std::string layer;
  std::size_t pos = 0;
  RelevanceMap relevance;
};

struct RelevanceDocument {
  Sentence src;
  Sentence tgt;
  std::vector<std::string> layers;
  std::vector<RelevanceNode> nodes;
  /// Not serialized.
  std::vector<std::string> warnings;
};

RelevanceDocument build_relevance_document(const RnnSearchModel& model, const Sentence& src_tokens,
                                           const IdSequence& src_ids, const Sentence& tgt_tokens,
                                           const IdSequence& tgt_ids, const LrpConfig& cfg = {});

/// Encodes both sides with the vocabularies; an empty target decodes one
/// with beam search first.
RelevanceDocument export_relevance(const RnnSearchModel& model, const Vocabulary& src_vocab,
                                   const Vocabulary& tgt_vocab, const Sentence& src, const Sentence& tgt,
                                   const LrpConfig& cfg = {}, std::size_t beam = 10);

nlohmann::json to_json(const RelevanceDocument& doc);
/// Validates the version-1 schema; throws std::invalid_argument naming the
/// failing path.
RelevanceDocument relevance_document_from_json(const nlohmann::json& j);

/// Rounds to 9 significant digits.
double round9(double v);

}  // namespace nmt
