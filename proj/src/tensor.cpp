// SPDX-License-Identifier: Apache-2.0

#include "nmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace nmt {

namespace {

thread_local Graph* g_active = nullptr;

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

std::string shapes2(const Tensor& a, const Tensor& b) {
  return shape_str(a.shape()) + " vs " + shape_str(b.shape());
}

bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (g_active == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

bool tracking_span(std::span<const Tensor> inputs) {
  if (g_active == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

// Rows/cols view of a tensor whose last dim is the row width.
std::size_t last_dim(const Tensor& a) { return a.rank() == 0 ? 1 : a.shape().back(); }

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const bool track = tracking({&a});
  Tensor out = Tensor::zeros(a.shape(), track);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  if (track) {
    g_active->record(op, {a}, out, [a, out, deriv]() mutable {
      auto gx = a.grad();
      auto gy = out.grad();
      auto xv = a.data();
      auto yv = out.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i]);
    });
  }
  return out;
}

void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(op, "shape mismatch " + shapes2(a, b));
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::Storage>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor: zero extent in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::Storage>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

double Tensor::at(std::size_t row, std::size_t col) const {
  const std::size_t width = last_dim(*this);
  return impl_->data.at(row * width + col);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

std::span<double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return from(impl_->shape, impl_->data, false);
}

// ---------------------------------------------------------------------------
// Graph

void Graph::record(const char* op, std::vector<Tensor> inputs, Tensor output,
                   std::function<void()> backward) {
  nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
}

GraphScope::GraphScope(Graph& graph) : previous_(g_active) { g_active = &graph; }
GraphScope::~GraphScope() { g_active = previous_; }

NoGradScope::NoGradScope() : previous_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = previous_; }

Graph* active_graph() { return g_active; }

void backward(Graph& graph, const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  }
  if (graph.empty() || !loss.requires_grad()) return;
  for (const auto& node : graph.nodes()) {
    Tensor out = node.output;
    out.zero_grad();
  }
  Tensor seed = loss;
  seed.grad()[0] += 1.0;
  const auto& nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    if (it->output.has_grad()) it->backward();
  }
}

double clip_global_norm(std::span<const std::span<double>> grads, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (auto g : grads) {
    for (double v : g) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return norm;
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto g : grads) {
      for (double& v : g) v *= factor;
    }
  }
  return norm;
}

double clip_gradients(std::span<Tensor> params, double max_norm) {
  std::vector<std::span<double>> grads;
  grads.reserve(params.size());
  for (Tensor& p : params) grads.push_back(p.grad());
  return clip_global_norm(grads, max_norm);
}

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || b.rank() != 2) {
    shape_fail("matmul", "expects [...,k] x [k,n], got " + shapes2(a, b));
  }
  const std::size_t k = a.shape().back();
  if (k != b.dim(0)) shape_fail("matmul", "inner dims differ " + shapes2(a, b));
  const std::size_t n = b.dim(1);
  const std::size_t m = a.size() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  const bool track = tracking({&a, &b});
  Tensor out = Tensor::zeros(out_shape, track);
  {
    auto A = a.data();
    auto B = b.data();
    auto C = out.data();
    for (std::size_t i = 0; i < m; ++i) {
      double* c = &C[i * n];
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        const double* brow = &B[p * n];
        for (std::size_t j = 0; j < n; ++j) c[j] += aip * brow[j];
      }
    }
  }
  if (track) {
    g_active->record("matmul", {a, b}, out, [a, b, out, m, k, n]() mutable {
      auto G = out.grad();
      if (a.requires_grad()) {
        auto gA = a.grad();
        auto B = b.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = &G[i * n];
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = &B[p * n];
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
            gA[i * k + p] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        auto gB = b.grad();
        auto A = a.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double* g = &G[i * n];
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = A[i * k + p];
            double* gb = &gB[p * n];
            for (std::size_t j = 0; j < n; ++j) gb[j] += aip * g[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  const bool bias = a.shape() != b.shape();
  if (bias && !(b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.shape().back())) {
    shape_fail("add", "expects equal shapes or trailing bias vector, got " + shapes2(a, b));
  }
  const bool track = tracking({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), track);
  const std::size_t width = b.size();
  {
    auto x = a.data();
    auto y = b.data();
    auto z = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] + y[bias ? i % width : i];
  }
  if (track) {
    g_active->record("add", {a, b}, out, [a, b, out, bias, width]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[bias ? i % width : i] += g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same("sub", a, b);
  const bool track = tracking({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), track);
  {
    auto x = a.data();
    auto y = b.data();
    auto z = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] - y[i];
  }
  if (track) {
    g_active->record("sub", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same("mul", a, b);
  const bool track = tracking({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), track);
  {
    auto x = a.data();
    auto y = b.data();
    auto z = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] * y[i];
  }
  if (track) {
    g_active->record("mul", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor maximum_pairwise(const Tensor& a, const Tensor& b) {
  require_same("maximum_pairwise", a, b);
  const bool track = tracking({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), track);
  {
    auto x = a.data();
    auto y = b.data();
    auto z = out.data();
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] >= y[i] ? x[i] : y[i];
  }
  if (track) {
    g_active->record("maximum_pairwise", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      auto x = a.data();
      auto y = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] >= y[i]) ga[i] += g[i];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] < y[i]) gb[i] += g[i];
        }
      }
    });
  }
  return out;
}

namespace {

// Shared by the three softmax flavours. mask may be null.
Tensor softmax_impl(const char* op, const Tensor& a, const Tensor* mask, bool log_space) {
  if (a.rank() < 1) shape_fail(op, "expects at least a vector, got " + shape_str(a.shape()));
  const std::size_t width = a.shape().back();
  if (width == 0) shape_fail(op, "empty row");
  if (mask != nullptr && mask->shape() != a.shape()) {
    shape_fail(op, "mask shape mismatch " + shapes2(a, *mask));
  }
  const std::size_t rows = a.size() / width;
  const bool track = tracking({&a});
  Tensor out = Tensor::zeros(a.shape(), track);
  auto x = a.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x[r * width];
    double* yr = &y[r * width];
    const double* mr = mask ? &mask->data()[r * width] : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < width; ++j) {
      if (mr && mr[j] == 0.0) continue;
      mx = std::max(mx, xr[j]);
      any = true;
    }
    if (!any) shape_fail(op, "row " + std::to_string(r) + " is fully masked");
    double z = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      if (mr && mr[j] == 0.0) continue;
      z += std::exp(xr[j] - mx);
    }
    if (log_space) {
      const double lse = mx + std::log(z);
      for (std::size_t j = 0; j < width; ++j) yr[j] = xr[j] - lse;
    } else {
      for (std::size_t j = 0; j < width; ++j) {
        yr[j] = (mr && mr[j] == 0.0) ? 0.0 : std::exp(xr[j] - mx) / z;
      }
    }
  }
  if (track) {
    g_active->record(op, {a}, out, [a, out, rows, width, log_space]() mutable {
      auto g = out.grad();
      auto gx = a.grad();
      auto y = out.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gr = &g[r * width];
        const double* yr = &y[r * width];
        double* gxr = &gx[r * width];
        if (log_space) {
          double gs = 0.0;
          for (std::size_t j = 0; j < width; ++j) gs += gr[j];
          for (std::size_t j = 0; j < width; ++j) gxr[j] += gr[j] - std::exp(yr[j]) * gs;
        } else {
          double dot = 0.0;
          for (std::size_t j = 0; j < width; ++j) dot += gr[j] * yr[j];
          for (std::size_t j = 0; j < width; ++j) gxr[j] += yr[j] * (gr[j] - dot);
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& a) { return softmax_impl("softmax_rows", a, nullptr, false); }
Tensor log_softmax_rows(const Tensor& a) { return softmax_impl("log_softmax_rows", a, nullptr, true); }
Tensor masked_softmax_rows(const Tensor& a, const Tensor& mask) {
  return softmax_impl("masked_softmax_rows", a, &mask, false);
}

Tensor sum(const Tensor& a) {
  const bool track = tracking({&a});
  Tensor out = Tensor::zeros({}, track);
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out[0] = acc;
  if (track) {
    g_active->record("sum", {a}, out, [a, out]() mutable {
      const double g = out.grad()[0];
      for (double& v : a.grad()) v += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& a) {
  const bool track = tracking({&a});
  Tensor out = Tensor::zeros({}, track);
  const double n = static_cast<double>(a.size());
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out[0] = acc / n;
  if (track) {
    g_active->record("mean", {a}, out, [a, out, n]() mutable {
      const double g = out.grad()[0] / n;
      for (double& v : a.grad()) v += g;
    });
  }
  return out;
}

Tensor concat(std::initializer_list<Tensor> parts) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  const Tensor& first = parts.front();
  if (first.rank() < 1) shape_fail("concat", "scalar input");
  Shape lead(first.shape().begin(), first.shape().end() - 1);
  const std::size_t rows = first.size() / first.shape().back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape pl(p.shape().begin(), p.shape().end() - (p.rank() ? 1 : 0));
    if (p.rank() != first.rank() || pl != lead) {
      shape_fail("concat", "leading dims differ " + shapes2(first, p));
    }
    widths.push_back(p.shape().back());
    total += p.shape().back();
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  const bool track = tracking_span(parts);
  Tensor out = Tensor::zeros(out_shape, track);
  {
    auto y = out.data();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      auto x = parts[i].data();
      const std::size_t w = widths[i];
      for (std::size_t r = 0; r < rows; ++r) {
        std::copy_n(&x[r * w], w, &y[r * total + offset]);
      }
      offset += w;
    }
  }
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    g_active->record("concat", inputs, out, [inputs, out, widths, rows, total]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const std::size_t w = widths[i];
        if (inputs[i].requires_grad()) {
          auto gx = inputs[i].grad();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < w; ++j) gx[r * w + j] += g[r * total + offset + j];
          }
        }
        offset += w;
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() < 1) shape_fail("slice", "scalar input");
  const std::size_t width = a.shape().back();
  if (begin >= end || end > width) {
    shape_fail("slice", "invalid range [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                            shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  const std::size_t rows = a.size() / width;
  Shape out_shape = a.shape();
  out_shape.back() = w;
  const bool track = tracking({&a});
  Tensor out = Tensor::zeros(out_shape, track);
  {
    auto x = a.data();
    auto y = out.data();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(&x[r * width + begin], w, &y[r * w]);
  }
  if (track) {
    g_active->record("slice", {a}, out, [a, out, rows, width, begin, w]() mutable {
      auto g = out.grad();
      auto gx = a.grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) gx[r * width + begin + j] += g[r * w + j];
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    shape_fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const bool track = tracking({&a});
  Tensor out = Tensor::from(std::move(shape), std::vector<double>(a.data().begin(), a.data().end()), track);
  if (track) {
    g_active->record("reshape", {a}, out, [a, out]() mutable {
      auto g = out.grad();
      auto gx = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

Tensor lookup_rows(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) shape_fail("lookup_rows", "table must be 2-d, got " + shape_str(table.shape()));
  if (ids.empty()) shape_fail("lookup_rows", "no ids");
  const std::size_t rows = table.dim(0);
  const std::size_t d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= rows) {
      throw std::out_of_range("lookup_rows: id " + std::to_string(id) + " outside table of " +
                              std::to_string(rows) + " rows");
    }
  }
  const bool track = tracking({&table});
  Tensor out = Tensor::zeros({ids.size(), d}, track);
  {
    auto x = table.data();
    auto y = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      std::copy_n(&x[static_cast<std::size_t>(ids[i]) * d], d, &y[i * d]);
    }
  }
  if (track) {
    std::vector<int> idv(ids.begin(), ids.end());
    g_active->record("lookup_rows", {table}, out, [table, out, idv, d]() mutable {
      auto g = out.grad();
      auto gt = table.grad();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        double* dst = &gt[static_cast<std::size_t>(idv[i]) * d];
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor pick(const Tensor& a, std::span<const int> ids) {
  if (a.rank() != 2 || a.dim(0) != ids.size()) {
    shape_fail("pick", "expects [B,V] with B ids, got " + shape_str(a.shape()) + " and " +
                           std::to_string(ids.size()) + " ids");
  }
  const std::size_t width = a.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= width) {
      throw std::out_of_range("pick: id " + std::to_string(id) + " outside row of " + std::to_string(width));
    }
  }
  const bool track = tracking({&a});
  Tensor out = Tensor::zeros({ids.size()}, track);
  for (std::size_t i = 0; i < ids.size(); ++i) out[i] = a[i * width + static_cast<std::size_t>(ids[i])];
  if (track) {
    std::vector<int> idv(ids.begin(), ids.end());
    g_active->record("pick", {a}, out, [a, out, idv, width]() mutable {
      auto g = out.grad();
      auto gx = a.grad();
      for (std::size_t i = 0; i < idv.size(); ++i) gx[i * width + static_cast<std::size_t>(idv[i])] += g[i];
    });
  }
  return out;
}

Tensor blend_rows(const Tensor& a, const Tensor& b, const Tensor& mask) {
  require_same("blend_rows", a, b);
  if (a.rank() != 2 || mask.size() != a.dim(0)) {
    shape_fail("blend_rows", "expects [B,d] inputs and B mask entries, got " + shapes2(a, mask));
  }
  const std::size_t rows = a.dim(0);
  const std::size_t d = a.dim(1);
  const bool track = tracking({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), track);
  {
    auto x = a.data();
    auto y = b.data();
    auto z = out.data();
    auto m = mask.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        const std::size_t i = r * d + j;
        if (m[r] == 1.0) {
          z[i] = x[i];
        } else if (m[r] == 0.0) {
          z[i] = y[i];
        } else {
          z[i] = m[r] * x[i] + (1.0 - m[r]) * y[i];
        }
      }
    }
  }
  if (track) {
    g_active->record("blend_rows", {a, b}, out, [a, b, out, mask, rows, d]() mutable {
      auto g = out.grad();
      auto m = mask.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += m[r] * g[r * d + j];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) gb[r * d + j] += (1.0 - m[r]) * g[r * d + j];
        }
      }
    });
  }
  return out;
}

Tensor stack_positions(std::span<const Tensor> parts) {
  if (parts.empty()) shape_fail("stack_positions", "no inputs");
  const Shape& s0 = parts.front().shape();
  if (s0.size() != 2) shape_fail("stack_positions", "expects [B,d] parts, got " + shape_str(s0));
  for (const Tensor& p : parts) {
    if (p.shape() != s0) shape_fail("stack_positions", "part shapes differ " + shapes2(parts.front(), p));
  }
  const std::size_t batch = s0[0];
  const std::size_t d = s0[1];
  const std::size_t len = parts.size();
  const bool track = tracking_span(parts);
  Tensor out = Tensor::zeros({batch, len, d}, track);
  {
    auto y = out.data();
    for (std::size_t j = 0; j < len; ++j) {
      auto x = parts[j].data();
      for (std::size_t b = 0; b < batch; ++b) std::copy_n(&x[b * d], d, &y[(b * len + j) * d]);
    }
  }
  if (track) {
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    g_active->record("stack_positions", inputs, out, [inputs, out, batch, len, d]() mutable {
      auto g = out.grad();
      for (std::size_t j = 0; j < len; ++j) {
        if (!inputs[j].requires_grad()) continue;
        auto gx = inputs[j].grad();
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t k = 0; k < d; ++k) gx[b * d + k] += g[(b * len + j) * d + k];
        }
      }
    });
  }
  return out;
}

Tensor add_over_positions(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 2 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    shape_fail("add_over_positions", "expects [B,L,d] + [B,d], got " + shapes2(a, b));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t len = a.dim(1);
  const std::size_t d = a.dim(2);
  const bool track = tracking({&a, &b});
  Tensor out = Tensor::zeros(a.shape(), track);
  {
    auto x = a.data();
    auto y = b.data();
    auto z = out.data();
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t j = 0; j < len; ++j) {
        for (std::size_t k = 0; k < d; ++k) {
          const std::size_t i = (n * len + j) * d + k;
          z[i] = x[i] + y[n * d + k];
        }
      }
    }
  }
  if (track) {
    g_active->record("add_over_positions", {a, b}, out, [a, b, out, batch, len, d]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t j = 0; j < len; ++j) {
            for (std::size_t k = 0; k < d; ++k) gb[n * d + k] += g[(n * len + j) * d + k];
          }
        }
      }
    });
  }
  return out;
}

Tensor weighted_sum_positions(const Tensor& w, const Tensor& x) {
  if (w.rank() != 2 || x.rank() != 3 || w.dim(0) != x.dim(0) || w.dim(1) != x.dim(1)) {
    shape_fail("weighted_sum_positions", "expects [B,L] and [B,L,d], got " + shapes2(w, x));
  }
  const std::size_t batch = x.dim(0);
  const std::size_t len = x.dim(1);
  const std::size_t d = x.dim(2);
  const bool track = tracking({&w, &x});
  Tensor out = Tensor::zeros({batch, d}, track);
  {
    auto wv = w.data();
    auto xv = x.data();
    auto y = out.data();
    for (std::size_t n = 0; n < batch; ++n) {
      for (std::size_t j = 0; j < len; ++j) {
        const double wj = wv[n * len + j];
        const double* xr = &xv[(n * len + j) * d];
        for (std::size_t k = 0; k < d; ++k) y[n * d + k] += wj * xr[k];
      }
    }
  }
  if (track) {
    g_active->record("weighted_sum_positions", {w, x}, out, [w, x, out, batch, len, d]() mutable {
      auto g = out.grad();
      if (w.requires_grad()) {
        auto gw = w.grad();
        auto xv = x.data();
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t j = 0; j < len; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += g[n * d + k] * xv[(n * len + j) * d + k];
            gw[n * len + j] += acc;
          }
        }
      }
      if (x.requires_grad()) {
        auto gx = x.grad();
        auto wv = w.data();
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t j = 0; j < len; ++j) {
            const double wj = wv[n * len + j];
            for (std::size_t k = 0; k < d; ++k) gx[(n * len + j) * d + k] += wj * g[n * d + k];
          }
        }
      }
    });
  }
  return out;
}

}  // namespace nmt
