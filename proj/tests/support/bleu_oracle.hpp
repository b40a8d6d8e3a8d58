// SPDX-License-Identifier: Apache-2.0
//
// Brute-force BLEU-4 used as an independent reference: n-gram occurrences are
// counted by direct scanning, with no shared code from the library.

#pragma once

#include <string>
#include <vector>

namespace nmt::testing {

using Tokens = std::vector<std::string>;

/// Single-reference corpus BLEU with lowercasing and clipped counts. An order
/// without any hypothesis n-gram counts as precision 1.
double brute_force_corpus_bleu(const std::vector<Tokens>& hyps, const std::vector<Tokens>& refs);

/// Random pairs over a tiny vocabulary with mixed case.
void random_bleu_pairs(unsigned seed, std::size_t n, std::vector<Tokens>& hyps, std::vector<Tokens>& refs);

}  // namespace nmt::testing
