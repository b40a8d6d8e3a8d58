// SPDX-License-Identifier: Apache-2.0
//
// Vocabularies, corpus loading, padded mini-batches and IBM Model 1
// dictionary induction.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace nmt {

using Sentence = std::vector<std::string>;
using IdSequence = std::vector<int>;

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

/// Whitespace tokenization.
Sentence tokenize(std::string_view line);
std::string detokenize(const Sentence& tokens);

class Vocabulary {
 public:
  Vocabulary();

  /// Keeps the `cap` most frequent tokens; frequency ties go to the token
  /// seen first. Throws std::invalid_argument on an empty corpus.
  static Vocabulary build(const std::vector<Sentence>& corpus, std::size_t cap);
  /// One token per line; the token on line n (1-based) gets id n + 3.
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int lookup(std::string_view token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const { return index_.count(std::string(token)) > 0; }

  IdSequence encode(const Sentence& tokens) const;
  /// Maps ids back to tokens, stopping at EOS and skipping PAD/BOS.
  Sentence decode(const IdSequence& ids) const;

 private:
  void add(std::string token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

struct SentencePair {
  IdSequence src;
  IdSequence tgt;
};

/// Row-major id matrices with 0/1 masks. Every row ends in EOS at its last
/// unmasked position.
struct Batch {
  std::size_t size = 0;
  std::size_t src_len = 0;
  std::size_t tgt_len = 0;
  std::vector<int> src_ids;
  std::vector<int> tgt_ids;
  std::vector<double> src_mask;
  std::vector<double> tgt_mask;
  /// Positions of the member pairs in the input list.
  std::vector<std::size_t> origin;

  int src(std::size_t row, std::size_t pos) const { return src_ids[row * src_len + pos]; }
  int tgt(std::size_t row, std::size_t pos) const { return tgt_ids[row * tgt_len + pos]; }
};

/// Pads a list of id sequences (EOS appended) into a batch-major matrix.
void pad_sequences(const std::vector<IdSequence>& seqs, std::vector<int>& ids, std::vector<double>& mask,
                   std::size_t& max_len);

/// Groups pairs into length buckets of width 4, chunks the bucket-sorted list
/// into batches and shuffles batch order. EOS is appended to both sides.
/// Deterministic for a given seed.
std::vector<Batch> make_batches(const std::vector<SentencePair>& pairs, std::size_t batch_size,
                                std::uint64_t shuffle_seed);

/// Builds one batch from exactly the given pairs, in order.
Batch make_batch(const std::vector<SentencePair>& pairs);

std::vector<Sentence> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path, const std::vector<Sentence>& lines);

/// Drops pairs where either side exceeds max_len tokens (before EOS) or is empty.
std::vector<SentencePair> filter_by_length(const std::vector<SentencePair>& pairs, std::size_t max_len);

// ---------------------------------------------------------------------------
// Lexical translation table estimated with IBM Model 1.

struct DictionaryEntry {
  std::string target;
  double prob = 0.0;
};

class BilingualDictionary {
 public:
  explicit BilingualDictionary(double min_prob = 0.0) : min_prob_(min_prob) {}

  /// Inserts only when prob >= min_prob and prob beats the current entry.
  void offer(const std::string& source, const std::string& target, double prob);
  std::optional<DictionaryEntry> find(std::string_view source) const;
  std::size_t size() const { return entries_.size(); }
  double min_prob() const { return min_prob_; }
  const std::unordered_map<std::string, DictionaryEntry>& entries() const { return entries_; }

  /// Lines of `src<TAB>tgt<TAB>prob`, sorted by source token.
  void save(const std::filesystem::path& path) const;
  static BilingualDictionary load(const std::filesystem::path& path);

 private:
  double min_prob_;
  std::unordered_map<std::string, DictionaryEntry> entries_;
};

/// t(tgt | src) tables after EM, plus the corpus log-likelihood recorded
/// after every iteration.
struct LexicalTable {
  std::vector<std::string> src_types;
  std::vector<std::string> tgt_types;
  /// prob[s][t]
  std::vector<std::vector<double>> prob;
  std::vector<double> log_likelihood;
};

/// Model 1 EM with uniform initialization over target types, no NULL word.
LexicalTable train_model1(const std::vector<std::pair<Sentence, Sentence>>& parallel, int em_iters);

BilingualDictionary induce_dictionary(const std::vector<std::pair<Sentence, Sentence>>& parallel, int em_iters,
                                      double min_prob);

}  // namespace nmt
