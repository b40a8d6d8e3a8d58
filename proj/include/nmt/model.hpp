// SPDX-License-Identifier: Apache-2.0
//
// Attention-based encoder-decoder: bidirectional GRU encoder, additive
// attention, single-GRU decoder conditioned on [embedding ; context], and a
// one-layer readout feeding the output softmax.
//
// Conventions: activations are row vectors, so every weight matrix is
// [input_dim, output_dim] and a layer computes x * W + b. All functions work on
// batches ([B, ...] tensors); single-sentence overloads wrap B = 1.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nmt/data.hpp"
#include "nmt/tensor.hpp"

namespace nmt {

enum class ReadoutKind { kTanh, kMaxout };

ReadoutKind parse_readout(const std::string& name);
std::string readout_name(ReadoutKind kind);

struct ModelDims {
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  std::size_t embed = 620;
  std::size_t hidden = 1000;
  std::size_t attention = 1000;
  std::size_t readout = 1000;
  ReadoutKind readout_kind = ReadoutKind::kTanh;

  bool operator==(const ModelDims&) const = default;
};

struct GruParams {
  Tensor w_update, u_update, b_update;
  Tensor w_reset, u_reset, b_reset;
  Tensor w_cand, u_cand, b_cand;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct RnnSearchModel {
  ModelDims dims;
  std::uint64_t seed = 0;

  Tensor src_embed;  // [V_s, d_e]
  Tensor tgt_embed;  // [V_t, d_e]
  GruParams enc_fwd;
  GruParams enc_bwd;
  GruParams dec;  // input [d_e + 2 d_h]
  Tensor att_w_state;  // [d_h, d_a]
  Tensor att_w_annot;  // [2 d_h, d_a]
  Tensor att_v;        // [d_a]
  Tensor init_w;       // [d_h, d_h]
  Tensor init_b;       // [d_h]
  Tensor read_w_state;    // [d_h, R]
  Tensor read_w_embed;    // [d_e, R]
  Tensor read_w_context;  // [2 d_h, R]
  Tensor read_b;          // [R], R = d_r (tanh) or 2 d_r (maxout)
  Tensor out_w;           // [d_r, V_t]
  Tensor out_b;           // [V_t]

  /// All parameters in checkpoint order.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;
  /// Deep copy of every parameter.
  RnnSearchModel clone() const;
  void set_requires_grad(bool on) const;
  void zero_grad() const;
};

/// Closed-form number of scalar parameters.
std::size_t parameter_count(const ModelDims& dims);

/// Uniform(-init_scale, init_scale) weights, orthogonal recurrent matrices,
/// zero biases. Deterministic in `seed`.
RnnSearchModel init_parameters(const ModelDims& dims, std::uint64_t seed, double init_scale = 0.08);

/// z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
/// c = tanh(x Wc + (r * h) Uc + bc), h' = (1 - z) * h + z * c.
Tensor gru_cell(const GruParams& params, const Tensor& x, const Tensor& h);

struct EncoderAnnotations {
  Tensor states;  // [B, L, 2 d_h], forward half first
  Tensor keys;    // [B, L, d_a], states projected for attention
  Tensor mask;    // [B, L]
  std::vector<Tensor> forward;   // L x [B, d_h]
  std::vector<Tensor> backward;  // L x [B, d_h]

  std::size_t batch() const { return states.dim(0); }
  std::size_t length() const { return states.dim(1); }
};

/// Batch-major ids [B, L] with a 0/1 mask; padded positions leave the
/// recurrent state untouched.
EncoderAnnotations encode(const RnnSearchModel& model, std::span<const int> ids, std::span<const double> mask,
                          std::size_t batch, std::size_t length);
/// Single sentence; must be non-empty and end with EOS.
EncoderAnnotations encode(const RnnSearchModel& model, const IdSequence& src);

struct AttentionOutput {
  Tensor context;  // [B, 2 d_h]
  Tensor weights;  // [B, L]
};

AttentionOutput attention(const RnnSearchModel& model, const EncoderAnnotations& annotations, const Tensor& s_prev);

/// s0 = tanh(backward_state_at_first_position * W_init + b_init).
Tensor decoder_init(const RnnSearchModel& model, const EncoderAnnotations& annotations);

struct DecodeStep {
  Tensor state;    // [B, d_h]
  Tensor logits;   // [B, V_t]
  Tensor weights;  // [B, L]
};

DecodeStep decode_step(const RnnSearchModel& model, const Tensor& s_prev, std::span<const int> y_prev,
                       const EncoderAnnotations& annotations);

/// Sum over target positions of mask * log p(y_t | y_<t, x); one entry per
/// batch row. Differentiable when recorded.
Tensor sequence_log_probs(const RnnSearchModel& model, const Batch& batch);

/// Copies the given batch rows (no gradient tracking).
Tensor select_rows(const Tensor& t, std::span<const std::size_t> rows);
EncoderAnnotations select_rows(const EncoderAnnotations& ann, std::span<const std::size_t> rows);

// ---------------------------------------------------------------------------
// Checkpoints: a text header (format version, dims, vocab sizes, seed) closed by
// a blank line, then every parameter as name, shape and little-endian doubles.
// `<path>.meta` lists name, shape and FNV-1a checksum per parameter.

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(const RnnSearchModel& model, const std::filesystem::path& path);
RnnSearchModel load_checkpoint(const std::filesystem::path& path);
std::uint64_t fnv1a64(std::span<const double> values);

}  // namespace nmt
