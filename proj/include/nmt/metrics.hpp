// SPDX-License-Identifier: Apache-2.0
//
// BLEU-4. Corpus BLEU follows Papineni et al. with clipped counts summed over
// the corpus; the sentence-level variant adds one to numerator and
// denominator of the 2..4-gram precisions.

#pragma once

#include <array>
#include <string>
#include <vector>

#include "nmt/data.hpp"

namespace nmt {

struct BleuReport {
  double bleu = 0.0;                     // [0, 1]
  std::array<double, 4> precisions{};    // p1..p4
  double brevity_penalty = 1.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;           // effective (closest) reference length

  double ratio() const {
    return ref_length == 0 ? 0.0 : static_cast<double>(hyp_length) / static_cast<double>(ref_length);
  }
};

/// Case-insensitive. `refs[i]` holds every reference for hypothesis i.
BleuReport corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<std::vector<Sentence>>& refs);
BleuReport corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs);

/// Same statistic over id sequences (no case folding); used for validation.
BleuReport corpus_bleu_ids(const std::vector<IdSequence>& hyps, const std::vector<IdSequence>& refs);

double sentence_bleu_smoothed(const Sentence& hyp, const Sentence& ref);
double sentence_bleu_smoothed(const IdSequence& hyp, const IdSequence& ref);

/// `BLEU = 24.61 (58.20/30.90/18.40/11.30, BP=0.981, ratio=0.981)`
std::string format_bleu(const BleuReport& report);

}  // namespace nmt
