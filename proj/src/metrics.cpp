// SPDX-License-Identifier: Apache-2.0

#include "nmt/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace nmt {

namespace {

constexpr int kMaxOrder = 4;

template <typename Token>
using NgramCounts = std::map<std::vector<Token>, std::size_t>;

template <typename Token>
NgramCounts<Token> count_ngrams(const std::vector<Token>& seq, int n) {
  NgramCounts<Token> counts;
  const std::size_t len = static_cast<std::size_t>(n);
  if (seq.size() < len) return counts;
  for (std::size_t i = 0; i + len <= seq.size(); ++i) {
    ++counts[std::vector<Token>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                seq.begin() + static_cast<std::ptrdiff_t>(i + len))];
  }
  return counts;
}

struct Stats {
  std::array<std::size_t, kMaxOrder> matches{};
  std::array<std::size_t, kMaxOrder> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

// Closest reference length, ties resolved to the shorter reference.
template <typename Token>
std::size_t closest_length(std::size_t hyp_len, const std::vector<std::vector<Token>>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto diff = [&](std::size_t len) { return len > hyp_len ? len - hyp_len : hyp_len - len; };
    if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) best = r.size();
  }
  return best;
}

template <typename Token>
void accumulate(Stats& stats, const std::vector<Token>& hyp, const std::vector<std::vector<Token>>& refs) {
  stats.hyp_len += hyp.size();
  stats.ref_len += closest_length(hyp.size(), refs);
  for (int n = 1; n <= kMaxOrder; ++n) {
    const auto hyp_counts = count_ngrams(hyp, n);
    NgramCounts<Token> max_ref;
    for (const auto& r : refs) {
      for (const auto& [gram, c] : count_ngrams(r, n)) max_ref[gram] = std::max(max_ref[gram], c);
    }
    for (const auto& [gram, c] : hyp_counts) {
      auto it = max_ref.find(gram);
      stats.matches[n - 1] += std::min(c, it == max_ref.end() ? std::size_t{0} : it->second);
      stats.totals[n - 1] += c;
    }
  }
}

BleuReport finish(const Stats& stats) {
  BleuReport report;
  report.hyp_length = stats.hyp_len;
  report.ref_length = stats.ref_len;
  bool zero = false;
  double log_sum = 0.0;
  for (int n = 0; n < kMaxOrder; ++n) {
    // An order with no hypothesis n-grams at all (every hypothesis shorter
    // than n) is vacuous and counts as 1; otherwise bleu(x, x) = 0 for short x.
    const double p = stats.totals[n] == 0 ? (stats.hyp_len > 0 ? 1.0 : 0.0)
                                          : static_cast<double>(stats.matches[n]) / static_cast<double>(stats.totals[n]);
    report.precisions[n] = p;
    if (p == 0.0) {
      zero = true;
    } else {
      log_sum += std::log(p);
    }
  }
  if (stats.hyp_len == 0) {
    report.brevity_penalty = 0.0;
  } else if (stats.hyp_len < stats.ref_len) {
    report.brevity_penalty =
        std::exp(1.0 - static_cast<double>(stats.ref_len) / static_cast<double>(stats.hyp_len));
  }
  report.bleu = zero ? 0.0 : report.brevity_penalty * std::exp(log_sum / kMaxOrder);
  return report;
}

Sentence lowercase(const Sentence& s) {
  Sentence out = s;
  for (auto& tok : out) {
    for (auto& ch : tok) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  }
  return out;
}

template <typename Token>
double smoothed(const std::vector<Token>& hyp, const std::vector<Token>& ref) {
  if (ref.empty()) throw std::invalid_argument("sentence_bleu_smoothed: empty reference");
  if (hyp.empty()) return 0.0;
  Stats stats;
  accumulate(stats, hyp, std::vector<std::vector<Token>>{ref});
  if (stats.matches[0] == 0) return 0.0;
  double log_sum = std::log(static_cast<double>(stats.matches[0]) / static_cast<double>(stats.totals[0]));
  for (int n = 1; n < kMaxOrder; ++n) {
    log_sum += std::log((static_cast<double>(stats.matches[n]) + 1.0) / (static_cast<double>(stats.totals[n]) + 1.0));
  }
  double bp = 1.0;
  if (hyp.size() < ref.size()) bp = std::exp(1.0 - static_cast<double>(ref.size()) / static_cast<double>(hyp.size()));
  return bp * std::exp(log_sum / kMaxOrder);
}

}  // namespace

BleuReport corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<std::vector<Sentence>>& refs) {
  if (hyps.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size()) throw std::invalid_argument("corpus_bleu: hypothesis/reference count mismatch");
  Stats stats;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    if (refs[i].empty()) throw std::invalid_argument("corpus_bleu: hypothesis without reference");
    std::vector<Sentence> lowered;
    for (const auto& r : refs[i]) lowered.push_back(lowercase(r));
    accumulate(stats, lowercase(hyps[i]), lowered);
  }
  return finish(stats);
}

BleuReport corpus_bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs) {
  std::vector<std::vector<Sentence>> wrapped;
  wrapped.reserve(refs.size());
  for (const auto& r : refs) wrapped.push_back({r});
  return corpus_bleu(hyps, wrapped);
}

BleuReport corpus_bleu_ids(const std::vector<IdSequence>& hyps, const std::vector<IdSequence>& refs) {
  if (hyps.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  if (hyps.size() != refs.size()) throw std::invalid_argument("corpus_bleu: hypothesis/reference count mismatch");
  Stats stats;
  for (std::size_t i = 0; i < hyps.size(); ++i) accumulate(stats, hyps[i], std::vector<IdSequence>{refs[i]});
  return finish(stats);
}

double sentence_bleu_smoothed(const Sentence& hyp, const Sentence& ref) { return smoothed(hyp, ref); }
double sentence_bleu_smoothed(const IdSequence& hyp, const IdSequence& ref) { return smoothed(hyp, ref); }

std::string format_bleu(const BleuReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "BLEU = %.2f (%.2f/%.2f/%.2f/%.2f, BP=%.3f, ratio=%.3f)", r.bleu * 100.0,
                r.precisions[0] * 100.0, r.precisions[1] * 100.0, r.precisions[2] * 100.0, r.precisions[3] * 100.0,
                r.brevity_penalty, r.ratio());
  return buf;
}

}  // namespace nmt
