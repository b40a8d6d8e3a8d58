// SPDX-License-Identifier: Apache-2.0

#include "nmt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace nmt {

namespace {
const char* const kReservedTokens[kNumReserved] = {"<pad>", "<s>", "</s>", "<unk>"};
constexpr std::size_t kBucketWidth = 4;
}  // namespace

Sentence tokenize(std::string_view line) {
  Sentence out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

std::string detokenize(const Sentence& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  for (const char* tok : kReservedTokens) add(tok);
}

void Vocabulary::add(std::string token) {
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocabulary Vocabulary::build(const std::vector<Sentence>& corpus, std::size_t cap) {
  struct Stat {
    std::size_t count = 0;
    std::size_t first = 0;
  };
  std::unordered_map<std::string, Stat> stats;
  std::size_t position = 0;
  for (const auto& sentence : corpus) {
    for (const auto& tok : sentence) {
      auto [it, inserted] = stats.try_emplace(tok);
      if (inserted) it->second.first = position;
      ++it->second.count;
      ++position;
    }
  }
  if (stats.empty()) throw std::invalid_argument("build_vocab: empty corpus");

  std::vector<std::pair<std::string, Stat>> ranked(stats.begin(), stats.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second.count != b.second.count) return a.second.count > b.second.count;
    return a.second.first < b.second.first;
  });
  Vocabulary vocab;
  for (std::size_t i = 0; i < ranked.size() && i < cap; ++i) {
    if (vocab.index_.count(ranked[i].first)) continue;  // literal reserved tokens in the corpus
    vocab.add(ranked[i].first);
  }
  return vocab;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocabulary " + path.string());
  Vocabulary vocab;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw std::runtime_error("empty line in vocabulary " + path.string());
    if (vocab.index_.count(line)) throw std::runtime_error("duplicate token '" + line + "' in " + path.string());
    vocab.add(line);
  }
  return vocab;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (std::size_t i = kNumReserved; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

int Vocabulary::lookup(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

IdSequence Vocabulary::encode(const Sentence& tokens) const {
  IdSequence ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(lookup(t));
  return ids;
}

Sentence Vocabulary::decode(const IdSequence& ids) const {
  Sentence out;
  for (int id : ids) {
    if (id == kEosId) break;
    if (id == kPadId || id == kBosId) continue;
    out.push_back(token(id));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batching

void pad_sequences(const std::vector<IdSequence>& seqs, std::vector<int>& ids, std::vector<double>& mask,
                   std::size_t& max_len) {
  max_len = 0;
  for (const auto& s : seqs) max_len = std::max(max_len, s.size() + 1);
  ids.assign(seqs.size() * max_len, kPadId);
  mask.assign(seqs.size() * max_len, 0.0);
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    const auto& s = seqs[r];
    for (std::size_t j = 0; j < s.size(); ++j) {
      ids[r * max_len + j] = s[j];
      mask[r * max_len + j] = 1.0;
    }
    ids[r * max_len + s.size()] = kEosId;
    mask[r * max_len + s.size()] = 1.0;
  }
}

Batch make_batch(const std::vector<SentencePair>& pairs) {
  Batch batch;
  batch.size = pairs.size();
  std::vector<IdSequence> src;
  std::vector<IdSequence> tgt;
  for (const auto& p : pairs) {
    src.push_back(p.src);
    tgt.push_back(p.tgt);
  }
  pad_sequences(src, batch.src_ids, batch.src_mask, batch.src_len);
  pad_sequences(tgt, batch.tgt_ids, batch.tgt_mask, batch.tgt_len);
  batch.origin.resize(pairs.size());
  std::iota(batch.origin.begin(), batch.origin.end(), 0);
  return batch;
}

std::vector<Batch> make_batches(const std::vector<SentencePair>& pairs, std::size_t batch_size,
                                std::uint64_t shuffle_seed) {
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch_size must be positive");
  std::vector<Batch> batches;
  if (pairs.empty()) return batches;
  for (const auto& p : pairs) {
    if (p.src.empty() || p.tgt.empty()) throw std::invalid_argument("make_batches: empty sequence");
  }

  std::mt19937_64 rng(shuffle_seed);
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  auto bucket = [&](std::size_t i) {
    const std::size_t len = std::max(pairs[i].src.size(), pairs[i].tgt.size()) + 1;
    return (len - 1) / kBucketWidth;
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return bucket(a) < bucket(b); });

  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<SentencePair> members;
    for (std::size_t i = start; i < end; ++i) members.push_back(pairs[order[i]]);
    Batch b = make_batch(members);
    for (std::size_t i = start; i < end; ++i) b.origin[i - start] = order[i];
    batches.push_back(std::move(b));
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

std::vector<SentencePair> filter_by_length(const std::vector<SentencePair>& pairs, std::size_t max_len) {
  std::vector<SentencePair> kept;
  for (const auto& p : pairs) {
    if (p.src.empty() || p.tgt.empty()) continue;
    if (p.src.size() > max_len || p.tgt.size() > max_len) continue;
    kept.push_back(p);
  }
  return kept;
}

std::vector<Sentence> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path.string());
  std::vector<Sentence> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(tokenize(line));
  return lines;
}

void write_corpus(const std::filesystem::path& path, const std::vector<Sentence>& lines) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write corpus " + path.string());
  for (const auto& s : lines) out << detokenize(s) << '\n';
}

// ---------------------------------------------------------------------------
// Dictionary

void BilingualDictionary::offer(const std::string& source, const std::string& target, double prob) {
  if (prob < min_prob_ || !(prob > 0.0)) return;
  auto it = entries_.find(source);
  if (it == entries_.end()) {
    entries_.emplace(source, DictionaryEntry{target, prob});
  } else if (prob > it->second.prob) {
    it->second = DictionaryEntry{target, prob};
  }
}

std::optional<DictionaryEntry> BilingualDictionary::find(std::string_view source) const {
  auto it = entries_.find(std::string(source));
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void BilingualDictionary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dictionary " + path.string());
  std::map<std::string, DictionaryEntry> sorted(entries_.begin(), entries_.end());
  out << std::setprecision(9);
  for (const auto& [src, e] : sorted) out << src << '\t' << e.target << '\t' << e.prob << '\n';
}

BilingualDictionary BilingualDictionary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dictionary " + path.string());
  BilingualDictionary dict(0.0);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected src<TAB>tgt<TAB>prob");
    }
    const double prob = std::stod(line.substr(t2 + 1));
    dict.offer(line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), prob);
  }
  return dict;
}

LexicalTable train_model1(const std::vector<std::pair<Sentence, Sentence>>& parallel, int em_iters) {
  if (parallel.empty()) throw std::invalid_argument("induce_dictionary: empty parallel corpus");
  if (em_iters < 1) throw std::invalid_argument("induce_dictionary: em_iters must be >= 1");

  LexicalTable table;
  std::unordered_map<std::string, int> src_index;
  std::unordered_map<std::string, int> tgt_index;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> corpus;
  auto intern = [](std::unordered_map<std::string, int>& index, std::vector<std::string>& types,
                   const std::string& tok) {
    auto [it, inserted] = index.try_emplace(tok, static_cast<int>(types.size()));
    if (inserted) types.push_back(tok);
    return it->second;
  };
  for (const auto& [src, tgt] : parallel) {
    std::vector<int> s;
    std::vector<int> t;
    for (const auto& w : src) s.push_back(intern(src_index, table.src_types, w));
    for (const auto& w : tgt) t.push_back(intern(tgt_index, table.tgt_types, w));
    if (!s.empty() && !t.empty()) corpus.emplace_back(std::move(s), std::move(t));
  }
  const std::size_t ns = table.src_types.size();
  const std::size_t nt = table.tgt_types.size();
  if (corpus.empty()) throw std::invalid_argument("induce_dictionary: no non-empty sentence pairs");

  table.prob.assign(ns, std::vector<double>(nt, 1.0 / static_cast<double>(nt)));
  std::vector<std::vector<double>> counts(ns, std::vector<double>(nt, 0.0));
  std::vector<double> totals(ns, 0.0);

  for (int iter = 0; iter < em_iters; ++iter) {
    for (auto& row : counts) std::fill(row.begin(), row.end(), 0.0);
    std::fill(totals.begin(), totals.end(), 0.0);
    for (const auto& [s, t] : corpus) {
      for (int tw : t) {
        double denom = 0.0;
        for (int sw : s) denom += table.prob[sw][tw];
        for (int sw : s) {
          const double c = table.prob[sw][tw] / denom;
          counts[sw][tw] += c;
          totals[sw] += c;
        }
      }
    }
    for (std::size_t sw = 0; sw < ns; ++sw) {
      for (std::size_t tw = 0; tw < nt; ++tw) table.prob[sw][tw] = counts[sw][tw] / totals[sw];
    }
    double ll = 0.0;
    for (const auto& [s, t] : corpus) {
      const double norm = std::log(static_cast<double>(s.size()));
      for (int tw : t) {
        double sum = 0.0;
        for (int sw : s) sum += table.prob[sw][tw];
        ll += std::log(sum) - norm;
      }
    }
    table.log_likelihood.push_back(ll);
  }
  return table;
}

BilingualDictionary induce_dictionary(const std::vector<std::pair<Sentence, Sentence>>& parallel, int em_iters,
                                      double min_prob) {
  if (!(min_prob > 0.0 && min_prob < 1.0)) throw std::invalid_argument("induce_dictionary: min_prob must be in (0,1)");
  const LexicalTable table = train_model1(parallel, em_iters);
  BilingualDictionary dict(min_prob);
  for (std::size_t s = 0; s < table.src_types.size(); ++s) {
    const auto& row = table.prob[s];
    // First maximum wins on ties so the result does not depend on hashing.
    std::size_t best = 0;
    for (std::size_t t = 1; t < row.size(); ++t) {
      if (row[t] > row[best]) best = t;
    }
    dict.offer(table.src_types[s], table.tgt_types[best], row[best]);
  }
  return dict;
}

}  // namespace nmt
