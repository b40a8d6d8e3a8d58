// SPDX-License-Identifier: Apache-2.0

#include "nmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>
#include <stdexcept>

namespace nmt {

ReadoutKind parse_readout(const std::string& name) {
  if (name == "tanh") return ReadoutKind::kTanh;
  if (name == "maxout") return ReadoutKind::kMaxout;
  throw std::invalid_argument("unknown readout '" + name + "' (expected tanh or maxout)");
}

std::string readout_name(ReadoutKind kind) { return kind == ReadoutKind::kTanh ? "tanh" : "maxout"; }

namespace {

std::size_t readout_width(const ModelDims& d) {
  return d.readout_kind == ReadoutKind::kMaxout ? 2 * d.readout : d.readout;
}

void append_gru(std::vector<NamedTensor>& out, const std::string& prefix, const GruParams& g) {
  out.push_back({prefix + ".w_update", g.w_update});
  out.push_back({prefix + ".u_update", g.u_update});
  out.push_back({prefix + ".b_update", g.b_update});
  out.push_back({prefix + ".w_reset", g.w_reset});
  out.push_back({prefix + ".u_reset", g.u_reset});
  out.push_back({prefix + ".b_reset", g.b_reset});
  out.push_back({prefix + ".w_cand", g.w_cand});
  out.push_back({prefix + ".u_cand", g.u_cand});
  out.push_back({prefix + ".b_cand", g.b_cand});
}

// Expected shapes in checkpoint order; mirrors named_parameters().
std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelDims& d) {
  const std::size_t R = readout_width(d);
  std::vector<std::pair<std::string, Shape>> out;
  out.push_back({"src_embed", {d.src_vocab, d.embed}});
  out.push_back({"tgt_embed", {d.tgt_vocab, d.embed}});
  auto gru = [&](const std::string& p, std::size_t in) {
    for (const char* gate : {"update", "reset", "cand"}) {
      out.push_back({p + ".w_" + gate, {in, d.hidden}});
      out.push_back({p + ".u_" + gate, {d.hidden, d.hidden}});
      out.push_back({p + ".b_" + gate, {d.hidden}});
    }
  };
  gru("enc_fwd", d.embed);
  gru("enc_bwd", d.embed);
  gru("dec", d.embed + 2 * d.hidden);
  out.push_back({"att_w_state", {d.hidden, d.attention}});
  out.push_back({"att_w_annot", {2 * d.hidden, d.attention}});
  out.push_back({"att_v", {d.attention}});
  out.push_back({"init_w", {d.hidden, d.hidden}});
  out.push_back({"init_b", {d.hidden}});
  out.push_back({"read_w_state", {d.hidden, R}});
  out.push_back({"read_w_embed", {d.embed, R}});
  out.push_back({"read_w_context", {2 * d.hidden, R}});
  out.push_back({"read_b", {R}});
  out.push_back({"out_w", {d.readout, d.tgt_vocab}});
  out.push_back({"out_b", {d.tgt_vocab}});
  return out;
}

std::vector<Tensor*> parameter_slots(RnnSearchModel& m) {
  std::vector<Tensor*> out{&m.src_embed, &m.tgt_embed};
  for (GruParams* g : {&m.enc_fwd, &m.enc_bwd, &m.dec}) {
    for (Tensor* t : {&g->w_update, &g->u_update, &g->b_update, &g->w_reset, &g->u_reset, &g->b_reset,
                      &g->w_cand, &g->u_cand, &g->b_cand}) {
      out.push_back(t);
    }
  }
  for (Tensor* t : {&m.att_w_state, &m.att_w_annot, &m.att_v, &m.init_w, &m.init_b, &m.read_w_state,
                    &m.read_w_embed, &m.read_w_context, &m.read_b, &m.out_w, &m.out_b}) {
    out.push_back(t);
  }
  return out;
}

bool is_recurrent(const std::string& name) { return name.find(".u_") != std::string::npos; }
bool is_bias(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  return leaf.rfind("b_", 0) == 0 || leaf == "init_b" || leaf == "read_b" || leaf == "out_b";
}

// Modified Gram-Schmidt applied twice over the columns of a square matrix.
void orthogonalize(Tensor& m) {
  const std::size_t n = m.dim(0);
  auto a = m.data();
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < j; ++k) {
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += a[i * n + j] * a[i * n + k];
        for (std::size_t i = 0; i < n; ++i) a[i * n + j] -= dot * a[i * n + k];
      }
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) norm += a[i * n + j] * a[i * n + j];
      norm = std::sqrt(norm);
      if (norm == 0.0) throw std::runtime_error("orthogonalize: degenerate matrix");
      for (std::size_t i = 0; i < n; ++i) a[i * n + j] /= norm;
    }
  }
}

Tensor column_ids_mask(std::span<const double> mask, std::size_t batch, std::size_t length, std::size_t pos) {
  Tensor m = Tensor::zeros({batch});
  for (std::size_t b = 0; b < batch; ++b) m[b] = mask[b * length + pos];
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// RnnSearchModel

std::vector<NamedTensor> RnnSearchModel::named_parameters() const {
  std::vector<NamedTensor> out{{"src_embed", src_embed}, {"tgt_embed", tgt_embed}};
  append_gru(out, "enc_fwd", enc_fwd);
  append_gru(out, "enc_bwd", enc_bwd);
  append_gru(out, "dec", dec);
  out.push_back({"att_w_state", att_w_state});
  out.push_back({"att_w_annot", att_w_annot});
  out.push_back({"att_v", att_v});
  out.push_back({"init_w", init_w});
  out.push_back({"init_b", init_b});
  out.push_back({"read_w_state", read_w_state});
  out.push_back({"read_w_embed", read_w_embed});
  out.push_back({"read_w_context", read_w_context});
  out.push_back({"read_b", read_b});
  out.push_back({"out_w", out_w});
  out.push_back({"out_b", out_b});
  return out;
}

std::vector<Tensor> RnnSearchModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

std::size_t RnnSearchModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.size();
  return n;
}

RnnSearchModel RnnSearchModel::clone() const {
  RnnSearchModel copy = *this;
  for (Tensor* slot : parameter_slots(copy)) {
    const bool grad = slot->requires_grad();
    *slot = slot->clone();
    slot->set_requires_grad(grad);
  }
  return copy;
}

void RnnSearchModel::set_requires_grad(bool on) const {
  for (auto& p : named_parameters()) p.tensor.set_requires_grad(on);
}

void RnnSearchModel::zero_grad() const {
  for (auto& p : named_parameters()) p.tensor.zero_grad();
}

std::size_t parameter_count(const ModelDims& d) {
  auto gru = [&](std::size_t in) { return 3 * (in * d.hidden + d.hidden * d.hidden + d.hidden); };
  const std::size_t R = readout_width(d);
  return d.src_vocab * d.embed + d.tgt_vocab * d.embed + 2 * gru(d.embed) + gru(d.embed + 2 * d.hidden) +
         d.hidden * d.attention + 2 * d.hidden * d.attention + d.attention + d.hidden * d.hidden + d.hidden +
         R * (d.hidden + d.embed + 2 * d.hidden) + R + d.readout * d.tgt_vocab + d.tgt_vocab;
}

RnnSearchModel init_parameters(const ModelDims& dims, std::uint64_t seed, double init_scale) {
  if (dims.src_vocab == 0 || dims.tgt_vocab == 0 || dims.embed == 0 || dims.hidden == 0 || dims.attention == 0 ||
      dims.readout == 0) {
    throw std::invalid_argument("init_parameters: all dimensions must be positive");
  }
  RnnSearchModel model;
  model.dims = dims;
  model.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(-init_scale, init_scale);
  auto layout = parameter_layout(dims);
  auto slots = parameter_slots(model);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& [name, shape] = layout[i];
    Tensor t = Tensor::zeros(shape, true);
    if (!is_bias(name)) {
      for (double& v : t.data()) v = uniform(rng);
      if (is_recurrent(name)) orthogonalize(t);
    }
    *slots[i] = t;
  }
  return model;
}

// ---------------------------------------------------------------------------
// Forward computation

Tensor gru_cell(const GruParams& p, const Tensor& x, const Tensor& h) {
  Tensor z = sigmoid(add(add(matmul(x, p.w_update), matmul(h, p.u_update)), p.b_update));
  Tensor r = sigmoid(add(add(matmul(x, p.w_reset), matmul(h, p.u_reset)), p.b_reset));
  Tensor c = tanh(add(add(matmul(x, p.w_cand), matmul(mul(r, h), p.u_cand)), p.b_cand));
  // (1 - z) * h + z * c, written as h + z * (c - h)
  return add(h, mul(z, sub(c, h)));
}

EncoderAnnotations encode(const RnnSearchModel& model, std::span<const int> ids, std::span<const double> mask,
                          std::size_t batch, std::size_t length) {
  if (batch == 0 || length == 0) throw std::invalid_argument("encode: empty source");
  if (ids.size() != batch * length || mask.size() != batch * length) {
    throw std::invalid_argument("encode: ids/mask do not match [" + std::to_string(batch) + "," +
                                std::to_string(length) + "]");
  }
  const std::size_t d_h = model.dims.hidden;
  EncoderAnnotations ann;
  ann.forward.resize(length);
  ann.backward.resize(length);
  std::vector<Tensor> embedded(length);
  std::vector<Tensor> masks(length);
  for (std::size_t j = 0; j < length; ++j) {
    std::vector<int> column(batch);
    for (std::size_t b = 0; b < batch; ++b) column[b] = ids[b * length + j];
    embedded[j] = lookup_rows(model.src_embed, column);
    masks[j] = column_ids_mask(mask, batch, length, j);
  }
  Tensor h = Tensor::zeros({batch, d_h});
  for (std::size_t j = 0; j < length; ++j) {
    h = blend_rows(gru_cell(model.enc_fwd, embedded[j], h), h, masks[j]);
    ann.forward[j] = h;
  }
  h = Tensor::zeros({batch, d_h});
  for (std::size_t j = length; j-- > 0;) {
    h = blend_rows(gru_cell(model.enc_bwd, embedded[j], h), h, masks[j]);
    ann.backward[j] = h;
  }
  std::vector<Tensor> rows(length);
  for (std::size_t j = 0; j < length; ++j) rows[j] = concat({ann.forward[j], ann.backward[j]});
  ann.states = stack_positions(rows);
  ann.keys = matmul(ann.states, model.att_w_annot);
  ann.mask = Tensor::from({batch, length}, std::vector<double>(mask.begin(), mask.end()));
  return ann;
}

EncoderAnnotations encode(const RnnSearchModel& model, const IdSequence& src) {
  if (src.empty()) throw std::invalid_argument("encode: empty source");
  if (src.back() != kEosId) throw std::invalid_argument("encode: source must end with EOS");
  std::vector<double> mask(src.size(), 1.0);
  return encode(model, src, mask, 1, src.size());
}

AttentionOutput attention(const RnnSearchModel& model, const EncoderAnnotations& ann, const Tensor& s_prev) {
  const std::size_t batch = ann.batch();
  const std::size_t length = ann.length();
  const std::size_t d_a = model.dims.attention;
  Tensor query = matmul(s_prev, model.att_w_state);
  Tensor hidden = tanh(add_over_positions(ann.keys, query));
  Tensor scores = reshape(matmul(hidden, reshape(model.att_v, {d_a, 1})), {batch, length});
  AttentionOutput out;
  out.weights = masked_softmax_rows(scores, ann.mask);
  out.context = weighted_sum_positions(out.weights, ann.states);
  return out;
}

Tensor decoder_init(const RnnSearchModel& model, const EncoderAnnotations& ann) {
  return tanh(add(matmul(ann.backward.front(), model.init_w), model.init_b));
}

DecodeStep decode_step(const RnnSearchModel& model, const Tensor& s_prev, std::span<const int> y_prev,
                       const EncoderAnnotations& ann) {
  if (y_prev.size() != s_prev.dim(0)) throw std::invalid_argument("decode_step: batch size mismatch");
  AttentionOutput att = attention(model, ann, s_prev);
  Tensor emb = lookup_rows(model.tgt_embed, y_prev);
  Tensor state = gru_cell(model.dec, concat({emb, att.context}), s_prev);
  Tensor pre = add(add(add(matmul(state, model.read_w_state), matmul(emb, model.read_w_embed)),
                       matmul(att.context, model.read_w_context)),
                   model.read_b);
  Tensor readout;
  if (model.dims.readout_kind == ReadoutKind::kMaxout) {
    const std::size_t d_r = model.dims.readout;
    readout = maximum_pairwise(slice(pre, 0, d_r), slice(pre, d_r, 2 * d_r));
  } else {
    readout = tanh(pre);
  }
  DecodeStep step;
  step.state = state;
  step.logits = add(matmul(readout, model.out_w), model.out_b);
  step.weights = att.weights;
  return step;
}

Tensor sequence_log_probs(const RnnSearchModel& model, const Batch& batch) {
  EncoderAnnotations ann = encode(model, batch.src_ids, batch.src_mask, batch.size, batch.src_len);
  Tensor state = decoder_init(model, ann);
  std::vector<int> y_prev(batch.size, kBosId);
  std::vector<int> y(batch.size);
  Tensor total;
  for (std::size_t t = 0; t < batch.tgt_len; ++t) {
    for (std::size_t b = 0; b < batch.size; ++b) y[b] = batch.tgt(b, t);
    DecodeStep step = decode_step(model, state, y_prev, ann);
    Tensor mask = column_ids_mask(batch.tgt_mask, batch.size, batch.tgt_len, t);
    Tensor term = mul(pick(log_softmax_rows(step.logits), y), mask);
    total = total.defined() ? add(total, term) : term;
    state = step.state;
    y_prev = y;
  }
  return total;
}

Tensor select_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Shape shape = t.shape();
  const std::size_t width = t.size() / shape[0];
  shape[0] = rows.size();
  std::vector<double> values(rows.size() * width);
  auto src = t.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(&src[rows[i] * width], width, &values[i * width]);
  }
  return Tensor::from(std::move(shape), std::move(values));
}

EncoderAnnotations select_rows(const EncoderAnnotations& ann, std::span<const std::size_t> rows) {
  EncoderAnnotations out;
  out.states = select_rows(ann.states, rows);
  out.keys = select_rows(ann.keys, rows);
  out.mask = select_rows(ann.mask, rows);
  for (const auto& f : ann.forward) out.forward.push_back(select_rows(f, rows));
  for (const auto& b : ann.backward) out.backward.push_back(select_rows(b, rows));
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::uint64_t fnv1a64(std::span<const double> values) {
  std::uint64_t h = 14695981039346656037ull;
  for (double v : values) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(buf, 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const RnnSearchModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const auto& d = model.dims;
  const auto params = model.named_parameters();
  out << "NMT-CHECKPOINT\n"
      << "version " << kCheckpointVersion << '\n'
      << "vocab " << d.src_vocab << ' ' << d.tgt_vocab << '\n'
      << "dims " << d.embed << ' ' << d.hidden << ' ' << d.attention << ' ' << d.readout << '\n'
      << "readout " << readout_name(d.readout_kind) << '\n'
      << "seed " << model.seed << '\n'
      << "params " << params.size() << "\n\n";
  std::ofstream meta(path.string() + ".meta");
  if (!meta) throw std::runtime_error("cannot write checkpoint sidecar " + path.string() + ".meta");
  for (const auto& p : params) {
    write_u64(out, p.name.size());
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_u64(out, p.tensor.rank());
    for (std::size_t dim : p.tensor.shape()) write_u64(out, dim);
    for (double v : p.tensor.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      write_u64(out, bits);
    }
    meta << p.name << '\t' << shape_str(p.tensor.shape()) << '\t' << std::hex << std::setw(16) << std::setfill('0')
         << fnv1a64(p.tensor.data()) << std::dec << '\n';
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

RnnSearchModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "NMT-CHECKPOINT") throw std::runtime_error(path.string() + ": not a checkpoint");
  ModelDims dims;
  std::uint64_t seed = 0;
  std::size_t count = 0;
  int version = 0;
  while (std::getline(in, line) && !line.empty()) {
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key == "version") {
      fields >> version;
    } else if (key == "vocab") {
      fields >> dims.src_vocab >> dims.tgt_vocab;
    } else if (key == "dims") {
      fields >> dims.embed >> dims.hidden >> dims.attention >> dims.readout;
    } else if (key == "readout") {
      std::string kind;
      fields >> kind;
      dims.readout_kind = parse_readout(kind);
    } else if (key == "seed") {
      fields >> seed;
    } else if (key == "params") {
      fields >> count;
    } else {
      throw std::runtime_error(path.string() + ": unknown header key '" + key + "'");
    }
    if (fields.fail()) throw std::runtime_error(path.string() + ": malformed header line '" + line + "'");
  }
  if (version != kCheckpointVersion) {
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto layout = parameter_layout(dims);
  if (count != layout.size()) throw std::runtime_error(path.string() + ": parameter count mismatch");

  RnnSearchModel model;
  model.dims = dims;
  model.seed = seed;
  auto slots = parameter_slots(model);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const std::size_t name_len = read_u64(in);
    if (name_len > 256) throw std::runtime_error(path.string() + ": corrupt parameter name");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::size_t rank = read_u64(in);
    if (rank > 8) throw std::runtime_error(path.string() + ": corrupt parameter rank");
    Shape shape(rank);
    for (auto& d : shape) d = read_u64(in);
    if (name != layout[i].first || shape != layout[i].second) {
      throw std::runtime_error(path.string() + ": expected " + layout[i].first + shape_str(layout[i].second) +
                               ", found " + name + shape_str(shape));
    }
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) {
      const std::uint64_t bits = read_u64(in);
      std::memcpy(&v, &bits, sizeof v);
    }
    *slots[i] = Tensor::from(shape, std::move(values), true);
  }

  std::ifstream meta(path.string() + ".meta");
  if (meta) {
    std::size_t i = 0;
    while (std::getline(meta, line)) {
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (i >= slots.size() || tab == std::string::npos) {
        throw std::runtime_error(path.string() + ".meta: unexpected line '" + line + "'");
      }
      const std::uint64_t expected = std::stoull(line.substr(tab + 1), nullptr, 16);
      if (expected != fnv1a64(slots[i]->data())) {
        throw std::runtime_error(path.string() + ": checksum mismatch for " + layout[i].first);
      }
      ++i;
    }
  }
  return model;
}

}  // namespace nmt
