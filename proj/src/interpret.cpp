// SPDX-License-Identifier: Apache-2.0

#include "nmt/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <stdexcept>

#include "nmt/decoding.hpp"

namespace nmt {

namespace {

Vec vec_of(const Tensor& t) {
  auto d = t.data();
  return Vec(d.begin(), d.end());
}

GruTrace trace_gru(const GruParams& p, const Tensor& x, const Tensor& h, Tensor& h_next) {
  Tensor z = sigmoid(add(add(matmul(x, p.w_update), matmul(h, p.u_update)), p.b_update));
  Tensor r = sigmoid(add(add(matmul(x, p.w_reset), matmul(h, p.u_reset)), p.b_reset));
  Tensor rh = mul(r, h);
  Tensor pre = add(add(matmul(x, p.w_cand), matmul(rh, p.u_cand)), p.b_cand);
  Tensor c = tanh(pre);
  h_next = add(h, mul(z, sub(c, h)));
  GruTrace t;
  t.x = vec_of(x);
  t.h_prev = vec_of(h);
  t.z = vec_of(z);
  t.r = vec_of(r);
  t.rh = vec_of(rh);
  t.cand_pre = vec_of(pre);
  t.cand = vec_of(c);
  t.h = vec_of(h_next);
  return t;
}

double sign_of(double v) { return v >= 0.0 ? 1.0 : -1.0; }

bool is_encoder_layer(const std::string& layer) {
  return layer == "src_embed" || layer == "enc_fwd" || layer == "enc_bwd";
}

void add_into(Vec& dst, const Vec& src, std::size_t offset = 0) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[offset + i];
}

double total(const Vec& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Trace

const std::vector<std::string>& relevance_layers() {
  static const std::vector<std::string> layers = {"src_embed", "enc_fwd",  "enc_bwd", "context",
                                                  "dec_state", "readout", "output"};
  return layers;
}

std::size_t node_count(std::size_t src_words, std::size_t tgt_words) { return 3 * src_words + 4 * tgt_words; }

std::vector<std::string> node_ids(const ActivationTrace& trace) {
  std::vector<std::string> ids;
  for (const auto& layer : relevance_layers()) {
    const std::size_t n = is_encoder_layer(layer) ? trace.src_words() : trace.tgt_words();
    for (std::size_t p = 0; p < n; ++p) ids.push_back(layer + ":" + std::to_string(p));
  }
  return ids;
}

std::map<std::pair<std::string, std::size_t>, Vec> ActivationTrace::entries() const {
  std::map<std::pair<std::string, std::size_t>, Vec> out;
  auto put_gru = [&](const std::string& name, std::size_t pos, const GruTrace& g) {
    out[{name + ".z", pos}] = g.z;
    out[{name + ".r", pos}] = g.r;
    out[{name + ".cand", pos}] = g.cand;
    out[{name, pos}] = g.h;
  };
  for (std::size_t j = 0; j < src.size(); ++j) {
    out[{"src_embed", j}] = src_embed[j];
    put_gru("enc_fwd", j, enc_fwd[j]);
    put_gru("enc_bwd", j, enc_bwd[j]);
  }
  out[{"dec_init", 0}] = s0;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto& s = steps[t];
    out[{"tgt_embed", t}] = s.emb;
    out[{"attention", t}] = s.alpha;
    out[{"context", t}] = s.context;
    put_gru("dec_state", t, s.gru);
    out[{"readout", t}] = s.readout;
    out[{"logits", t}] = s.logits;
    out[{"probs", t}] = s.probs;
    out[{"output", t}] = Vec{s.logits[static_cast<std::size_t>(s.y)]};
  }
  return out;
}

ActivationTrace capture_trace(const RnnSearchModel& model, const IdSequence& src, const IdSequence& tgt) {
  if (src.empty()) throw std::invalid_argument("capture_trace: empty source");
  for (int y : tgt) {
    if (y < 0 || static_cast<std::size_t>(y) >= model.dims.tgt_vocab) {
      throw std::out_of_range("capture_trace: target id out of range");
    }
  }
  NoGradScope no_grad;
  ActivationTrace trace;
  trace.src = with_eos(src);
  trace.tgt = tgt;
  const std::size_t length = trace.src.size();
  const std::size_t d_h = model.dims.hidden;

  std::vector<Tensor> emb(length);
  for (std::size_t j = 0; j < length; ++j) {
    emb[j] = lookup_rows(model.src_embed, std::vector<int>{trace.src[j]});
    trace.src_embed.push_back(vec_of(emb[j]));
  }
  Tensor h = Tensor::zeros({1, d_h});
  for (std::size_t j = 0; j < length; ++j) {
    Tensor next;
    trace.enc_fwd.push_back(trace_gru(model.enc_fwd, emb[j], h, next));
    h = next;
  }
  trace.enc_bwd.resize(length);
  h = Tensor::zeros({1, d_h});
  std::vector<Tensor> backward(length);
  for (std::size_t j = length; j-- > 0;) {
    Tensor next;
    trace.enc_bwd[j] = trace_gru(model.enc_bwd, emb[j], h, next);
    h = next;
    backward[j] = next;
  }

  EncoderAnnotations ann = encode(model, trace.src);
  Tensor init_pre = add(matmul(backward.front(), model.init_w), model.init_b);
  Tensor s = tanh(init_pre);
  trace.init_pre = vec_of(init_pre);
  trace.s0 = vec_of(s);

  for (std::size_t t = 0; t < tgt.size(); ++t) {
    DecoderStepTrace st;
    st.y_prev = t == 0 ? kBosId : tgt[t - 1];
    st.y = tgt[t];
    st.s_prev = vec_of(s);
    AttentionOutput att = attention(model, ann, s);
    Tensor e = lookup_rows(model.tgt_embed, std::vector<int>{st.y_prev});
    Tensor next;
    st.gru = trace_gru(model.dec, concat({e, att.context}), s, next);
    Tensor pre = add(add(add(matmul(next, model.read_w_state), matmul(e, model.read_w_embed)),
                         matmul(att.context, model.read_w_context)),
                     model.read_b);
    Tensor readout;
    if (model.dims.readout_kind == ReadoutKind::kMaxout) {
      const std::size_t d_r = model.dims.readout;
      readout = maximum_pairwise(slice(pre, 0, d_r), slice(pre, d_r, 2 * d_r));
    } else {
      readout = tanh(pre);
    }
    Tensor logits = add(matmul(readout, model.out_w), model.out_b);
    st.emb = vec_of(e);
    st.alpha = vec_of(att.weights);
    st.context = vec_of(att.context);
    st.readout_pre = vec_of(pre);
    st.readout = vec_of(readout);
    st.logits = vec_of(logits);
    st.probs = vec_of(softmax_rows(logits));
    trace.steps.push_back(std::move(st));
    s = next;
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Rules

namespace lrp {

Vec linear(std::span<const double> a, std::span<const double> w, std::size_t out, std::span<const double> v,
           std::span<const double> r_out, double epsilon) {
  if (w.size() != a.size() * out || v.size() != out || r_out.size() != out) {
    throw std::invalid_argument("lrp::linear: shape mismatch");
  }
  Vec factor(out);
  for (std::size_t k = 0; k < out; ++k) factor[k] = r_out[k] / (v[k] + epsilon * sign_of(v[k]));
  Vec r_in(a.size(), 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double* wi = &w[i * out];
    double acc = 0.0;
    for (std::size_t k = 0; k < out; ++k) acc += a[i] * wi[k] * factor[k];
    r_in[i] = acc;
  }
  return r_in;
}

Vec linear(std::span<const double> a, const Tensor& w, std::span<const double> v, std::span<const double> r_out,
           double epsilon) {
  if (w.rank() != 2) throw std::invalid_argument("lrp::linear: weight must be a matrix");
  return linear(a, w.data(), w.dim(1), v, r_out, epsilon);
}

Vec nonlinearity(std::span<const double> r_out) { return Vec(r_out.begin(), r_out.end()); }

Vec maxout(std::span<const double> pre, std::span<const double> r_out) {
  const std::size_t d = r_out.size();
  if (pre.size() != 2 * d) throw std::invalid_argument("lrp::maxout: shape mismatch");
  Vec r_in(2 * d, 0.0);
  for (std::size_t k = 0; k < d; ++k) r_in[pre[k] >= pre[k + d] ? k : k + d] = r_out[k];
  return r_in;
}

GateSplit gate_product(std::span<const double> r_out) {
  return {Vec(r_out.begin(), r_out.end()), Vec(r_out.size(), 0.0)};
}

GruRelevance gru(const GruParams& params, const GruTrace& t, std::span<const double> r_out, double epsilon) {
  const std::size_t d = t.h.size();
  if (r_out.size() != d) throw std::invalid_argument("lrp::gru: shape mismatch");
  GruRelevance out;
  out.h_prev.assign(d, 0.0);
  Vec r_cand(d);
  // h' = (1 - z) h + z c: a two-term weighted sum with the gates as weights.
  for (std::size_t k = 0; k < d; ++k) {
    const double denom = t.h[k] + epsilon * sign_of(t.h[k]);
    out.h_prev[k] = (1.0 - t.z[k]) * t.h_prev[k] / denom * r_out[k];
    r_cand[k] = t.z[k] * t.cand[k] / denom * r_out[k];
  }
  const Vec r_pre = nonlinearity(r_cand);
  out.x = linear(t.x, params.w_cand, t.cand_pre, r_pre, epsilon);
  const GateSplit reset = gate_product(linear(t.rh, params.u_cand, t.cand_pre, r_pre, epsilon));
  add_into(out.h_prev, reset.signal);
  out.r = reset.gate;
  out.z.assign(d, 0.0);
  return out;
}

}  // namespace lrp

// ---------------------------------------------------------------------------
// Propagation

RelevanceMap propagate_raw(const RnnSearchModel& model, const ActivationTrace& trace, const std::string& node_id,
                           double epsilon, double seed) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("lrp: epsilon must be positive");
  const auto colon = node_id.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("unknown node '" + node_id + "'");
  const std::string layer = node_id.substr(0, colon);
  const auto& layers = relevance_layers();
  if (std::find(layers.begin(), layers.end(), layer) == layers.end()) {
    throw std::invalid_argument("unknown node '" + node_id + "'");
  }
  char* end = nullptr;
  const std::string pos_text = node_id.substr(colon + 1);
  const unsigned long pos_value = std::strtoul(pos_text.c_str(), &end, 10);
  if (pos_text.empty() || *end != '\0') throw std::invalid_argument("unknown node '" + node_id + "'");
  const std::size_t pos = pos_value;
  const bool encoder = is_encoder_layer(layer);
  if (pos >= (encoder ? trace.src_words() : trace.tgt_words())) {
    throw std::invalid_argument("unknown node '" + node_id + "'");
  }

  const ModelDims& d = model.dims;
  const std::size_t length = trace.src.size();
  const std::size_t steps = trace.steps.size();
  std::vector<Vec> r_src(length, Vec(d.embed, 0.0));
  std::vector<Vec> r_fwd(length, Vec(d.hidden, 0.0));
  std::vector<Vec> r_bwd(length, Vec(d.hidden, 0.0));
  Vec r_s0(d.hidden, 0.0);
  std::vector<Vec> r_ctx(steps, Vec(2 * d.hidden, 0.0));
  std::vector<Vec> r_state(steps, Vec(d.hidden, 0.0));
  std::vector<Vec> r_read(steps, Vec(d.readout, 0.0));
  std::vector<Vec> r_temb(steps, Vec(d.embed, 0.0));
  Vec r_out(steps, 0.0);

  auto seed_vector = [&](Vec& v) { std::fill(v.begin(), v.end(), seed / static_cast<double>(v.size())); };
  if (layer == "src_embed") seed_vector(r_src[pos]);
  if (layer == "enc_fwd") seed_vector(r_fwd[pos]);
  if (layer == "enc_bwd") seed_vector(r_bwd[pos]);
  if (layer == "context") seed_vector(r_ctx[pos]);
  if (layer == "dec_state") seed_vector(r_state[pos]);
  if (layer == "readout") seed_vector(r_read[pos]);
  if (layer == "output") r_out[pos] = seed;

  const auto out_w = model.out_w.data();
  for (std::size_t t = steps; t-- > 0;) {
    const DecoderStepTrace& st = trace.steps[t];
    // Logit of the emitted word: one output unit of the final projection.
    Vec column(d.readout);
    const std::size_t y = static_cast<std::size_t>(st.y);
    for (std::size_t i = 0; i < d.readout; ++i) column[i] = out_w[i * d.tgt_vocab + y];
    add_into(r_read[t], lrp::linear(st.readout, column, 1, Vec{st.logits[y]}, Vec{r_out[t]}, epsilon));

    const Vec r_pre = d.readout_kind == ReadoutKind::kMaxout ? lrp::maxout(st.readout_pre, r_read[t])
                                                             : lrp::nonlinearity(r_read[t]);
    add_into(r_state[t], lrp::linear(st.gru.h, model.read_w_state, st.readout_pre, r_pre, epsilon));
    add_into(r_temb[t], lrp::linear(st.emb, model.read_w_embed, st.readout_pre, r_pre, epsilon));
    add_into(r_ctx[t], lrp::linear(st.context, model.read_w_context, st.readout_pre, r_pre, epsilon));

    const lrp::GruRelevance g = lrp::gru(model.dec, st.gru, r_state[t], epsilon);
    add_into(r_temb[t], g.x, 0);
    add_into(r_ctx[t], g.x, d.embed);
    add_into(t > 0 ? r_state[t - 1] : r_s0, g.h_prev);

    // context = sum_j alpha_j [fwd_j ; bwd_j]
    for (std::size_t k = 0; k < 2 * d.hidden; ++k) {
      const double f = r_ctx[t][k] / (st.context[k] + epsilon * sign_of(st.context[k]));
      for (std::size_t j = 0; j < length; ++j) {
        const double a = k < d.hidden ? trace.enc_fwd[j].h[k] : trace.enc_bwd[j].h[k - d.hidden];
        const double share = st.alpha[j] * a * f;
        if (k < d.hidden) {
          r_fwd[j][k] += share;
        } else {
          r_bwd[j][k - d.hidden] += share;
        }
      }
    }
  }

  add_into(r_bwd[0], lrp::linear(trace.enc_bwd[0].h, model.init_w, trace.init_pre, lrp::nonlinearity(r_s0), epsilon));
  for (std::size_t j = 0; j < length; ++j) {
    const lrp::GruRelevance g = lrp::gru(model.enc_bwd, trace.enc_bwd[j], r_bwd[j], epsilon);
    add_into(r_src[j], g.x);
    if (j + 1 < length) add_into(r_bwd[j + 1], g.h_prev);
  }
  for (std::size_t j = length; j-- > 0;) {
    const lrp::GruRelevance g = lrp::gru(model.enc_fwd, trace.enc_fwd[j], r_fwd[j], epsilon);
    add_into(r_src[j], g.x);
    if (j > 0) add_into(r_fwd[j - 1], g.h_prev);
  }

  RelevanceMap map;
  for (std::size_t j = 0; j < trace.src_words(); ++j) map.src.push_back(total(r_src[j]));
  if (!encoder) {
    // Word i of the target feeds step i + 1; step 0 reads BOS, which is dropped.
    for (std::size_t i = 0; i < pos; ++i) map.tgt_prefix.push_back(total(r_temb[i + 1]));
  }
  map.raw_sum = total(map.src) + total(map.tgt_prefix);
  return map;
}

RelevanceMap normalize(RelevanceMap map) {
  const std::size_t n = map.src.size() + map.tgt_prefix.size();
  if (n == 0) return map;
  const double s = total(map.src) + total(map.tgt_prefix);
  if (s == 0.0 || !std::isfinite(s)) {
    std::fill(map.src.begin(), map.src.end(), 1.0 / static_cast<double>(n));
    std::fill(map.tgt_prefix.begin(), map.tgt_prefix.end(), 1.0 / static_cast<double>(n));
    return map;
  }
  for (double& v : map.src) v /= s;
  for (double& v : map.tgt_prefix) v /= s;
  return map;
}

RelevanceMap lrp_propagate(const RnnSearchModel& model, const ActivationTrace& trace, const std::string& node_id,
                           const LrpConfig& cfg) {
  return normalize(propagate_raw(model, trace, node_id, cfg.epsilon));
}

// ---------------------------------------------------------------------------
// Documents

double round9(double v) {
  if (!std::isfinite(v)) return v;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return std::strtod(buf, nullptr);
}

RelevanceDocument build_relevance_document(const RnnSearchModel& model, const Sentence& src_tokens,
                                           const IdSequence& src_ids, const Sentence& tgt_tokens,
                                           const IdSequence& tgt_ids, const LrpConfig& cfg) {
  if (src_tokens.size() != src_ids.size() || tgt_tokens.size() != tgt_ids.size()) {
    throw std::invalid_argument("build_relevance_document: token/id length mismatch");
  }
  const ActivationTrace trace = capture_trace(model, src_ids, tgt_ids);
  RelevanceDocument doc;
  doc.src = src_tokens;
  doc.tgt = tgt_tokens;
  doc.layers = relevance_layers();
  const std::vector<std::string> ids = cfg.nodes.empty() ? node_ids(trace) : cfg.nodes;
  for (const auto& id : ids) {
    RelevanceNode node;
    node.id = id;
    const auto colon = id.rfind(':');
    node.relevance = lrp_propagate(model, trace, id, cfg);
    node.layer = id.substr(0, colon);
    node.pos = std::stoul(id.substr(colon + 1));
    doc.nodes.push_back(std::move(node));
  }
  return doc;
}

RelevanceDocument export_relevance(const RnnSearchModel& model, const Vocabulary& src_vocab,
                                   const Vocabulary& tgt_vocab, const Sentence& src, const Sentence& tgt,
                                   const LrpConfig& cfg, std::size_t beam) {
  if (src.empty()) throw std::invalid_argument("export_relevance: empty source sentence");
  const IdSequence src_ids = src_vocab.encode(src);
  std::vector<std::string> warnings;
  if (std::all_of(src_ids.begin(), src_ids.end(), [](int id) { return id == kUnkId; })) {
    warnings.push_back("every source token is out of vocabulary; UNK embeddings are used");
  }
  IdSequence tgt_ids;
  Sentence tgt_tokens = tgt;
  if (tgt.empty()) {
    BeamOptions opts;
    opts.beam = beam;
    opts.max_len = default_max_len(src_ids.size() + 1);
    tgt_ids = beam_search(model, with_eos(src_ids), opts).front().output();
    tgt_tokens.clear();
    for (int id : tgt_ids) tgt_tokens.push_back(tgt_vocab.token(id));
  } else {
    tgt_ids = tgt_vocab.encode(tgt);
  }
  RelevanceDocument doc = build_relevance_document(model, src, src_ids, tgt_tokens, tgt_ids, cfg);
  doc.warnings = std::move(warnings);
  return doc;
}

nlohmann::json to_json(const RelevanceDocument& doc) {
  auto reals = [](const Vec& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (double x : v) arr.push_back(round9(x));
    return arr;
  };
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : doc.nodes) {
    nlohmann::json raw = std::isfinite(n.relevance.raw_sum) ? nlohmann::json(round9(n.relevance.raw_sum))
                                                             : nlohmann::json(nullptr);
    nodes.push_back({{"id", n.id},
                     {"layer", n.layer},
                     {"pos", n.pos},
                     {"relevance", {{"src", reals(n.relevance.src)}, {"tgt_prefix", reals(n.relevance.tgt_prefix)}}},
                     {"raw_sum", raw}});
  }
  return {{"version", 1}, {"src", doc.src}, {"tgt", doc.tgt}, {"layers", doc.layers}, {"nodes", nodes}};
}

namespace {

[[noreturn]] void schema_fail(const std::string& path, const std::string& what) {
  throw std::invalid_argument("relevance document: " + path + ": " + what);
}

const nlohmann::json& field(const nlohmann::json& obj, const char* key, const std::string& path) {
  if (!obj.is_object()) schema_fail(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) schema_fail(path + "." + key, "missing");
  return *it;
}

Sentence strings(const nlohmann::json& arr, const std::string& path) {
  if (!arr.is_array()) schema_fail(path, "expected an array of strings");
  Sentence out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_string()) schema_fail(path + "[" + std::to_string(i) + "]", "expected a string");
    out.push_back(arr[i].get<std::string>());
  }
  return out;
}

Vec numbers(const nlohmann::json& arr, const std::string& path) {
  if (!arr.is_array()) schema_fail(path, "expected an array of numbers");
  Vec out;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (!arr[i].is_number()) schema_fail(path + "[" + std::to_string(i) + "]", "expected a number");
    out.push_back(arr[i].get<double>());
  }
  return out;
}

}  // namespace

RelevanceDocument relevance_document_from_json(const nlohmann::json& j) {
  const std::string root = "$";
  const auto& version = field(j, "version", root);
  if (!version.is_number_integer() || version.get<int>() != 1) schema_fail("$.version", "expected 1");
  RelevanceDocument doc;
  doc.src = strings(field(j, "src", root), "$.src");
  doc.tgt = strings(field(j, "tgt", root), "$.tgt");
  doc.layers = strings(field(j, "layers", root), "$.layers");
  const auto& nodes = field(j, "nodes", root);
  if (!nodes.is_array()) schema_fail("$.nodes", "expected an array");
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const std::string path = "$.nodes[" + std::to_string(i) + "]";
    const auto& n = nodes[i];
    RelevanceNode node;
    const auto& id = field(n, "id", path);
    if (!id.is_string()) schema_fail(path + ".id", "expected a string");
    node.id = id.get<std::string>();
    const auto& layer = field(n, "layer", path);
    if (!layer.is_string()) schema_fail(path + ".layer", "expected a string");
    node.layer = layer.get<std::string>();
    if (std::find(doc.layers.begin(), doc.layers.end(), node.layer) == doc.layers.end()) {
      schema_fail(path + ".layer", "not listed in $.layers");
    }
    const auto& pos = field(n, "pos", path);
    if (!pos.is_number_integer() || pos.get<long long>() < 0) schema_fail(path + ".pos", "expected a non-negative integer");
    node.pos = pos.get<std::size_t>();
    const auto& rel = field(n, "relevance", path);
    node.relevance.src = numbers(field(rel, "src", path + ".relevance"), path + ".relevance.src");
    node.relevance.tgt_prefix = numbers(field(rel, "tgt_prefix", path + ".relevance"), path + ".relevance.tgt_prefix");
    if (node.relevance.src.size() != doc.src.size()) {
      schema_fail(path + ".relevance.src", "length differs from $.src");
    }
    if (node.relevance.tgt_prefix.size() > doc.tgt.size()) {
      schema_fail(path + ".relevance.tgt_prefix", "longer than $.tgt");
    }
    if (auto raw = n.find("raw_sum"); raw != n.end() && raw->is_number()) node.relevance.raw_sum = raw->get<double>();
    doc.nodes.push_back(std::move(node));
  }
  return doc;
}

}  // namespace nmt
