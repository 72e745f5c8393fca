#include "aimlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace aimlab {

namespace {

constexpr double kAtanhClamp = 1.0 - 1e-6;

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "{";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "}";
  return os.str();
}

void check_shape_positive(const Shape& s, const char* who) {
  for (int d : s)
    if (d <= 0) fail(std::string(who) + ": non-positive extent in shape " + shape_str(s));
}

// number of lines along `axis` and the stride between consecutive elements of
// one line, for row-major data
struct AxisView {
  int64_t lines;        // number of independent 1-d slices along axis
  int64_t line_len;     // extent of axis
  int64_t inner;        // stride between consecutive axis elements
  int64_t outer_stride; // stride between the first elements of blocks of lines
};

AxisView axis_view(const Shape& shape, int axis) {
  AxisView v{};
  v.line_len = shape[axis];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= shape[i];
  for (size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  v.inner = inner;
  v.lines = outer * inner;
  v.outer_stride = v.line_len * inner;
  return v;
}

// start offset of line `li` under an AxisView
int64_t line_base(const AxisView& v, int64_t li) {
  int64_t block = li / v.inner;
  int64_t within = li % v.inner;
  return block * v.outer_stride + within;
}

struct Conv1dGeometry {
  int out_len;
  int pad_left;
};

Conv1dGeometry conv1d_geometry(int in_len, int filter_width, int stride) {
  Conv1dGeometry g{};
  g.out_len = (in_len + stride - 1) / stride;  // ceil(L / stride)
  int pad_total = std::max((g.out_len - 1) * stride + filter_width - in_len, 0);
  g.pad_left = pad_total / 2;
  return g;
}

void check_finite(const Node& n) {
  for (double v : n.value)
    if (!std::isfinite(v))
      fail(std::string("non-finite value produced by op ") + op_kind_name(n.kind) +
           (n.name.empty() ? "" : " (" + n.name + ")"));
}

void forward_compute(Node& n);

NodePtr make_op(OpKind kind, std::vector<NodePtr> inputs) {
  auto n = std::make_shared<Node>();
  n->kind = kind;
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs)
    if (in->requires_grad) n->requires_grad = true;
  return n;
}

// Eagerly evaluates if all inputs carry values; otherwise the node stays
// unevaluated until evaluate() binds the placeholders.
Tensor finish_op(NodePtr n) {
  bool ready = true;
  for (const auto& in : n->inputs)
    if (!in->evaluated) ready = false;
  if (ready) forward_compute(*n);
  return Tensor(std::move(n));
}

void forward_compute(Node& n) {
  const auto& in = n.inputs;
  switch (n.kind) {
    case OpKind::kLeaf:
      fail("evaluate: unbound input" + (n.name.empty() ? "" : ": " + n.name));
    case OpKind::kMatmul: {
      const auto& a = *in[0];
      const auto& b = *in[1];
      int m = a.shape[0], k = a.shape[1];
      if (b.shape.size() == 2) {
        int nn = b.shape[1];
        n.shape = {m, nn};
        n.value.assign(static_cast<size_t>(m) * nn, 0.0);
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            double av = a.value[i * k + kk];
            if (av == 0.0) continue;
            const double* brow = &b.value[static_cast<size_t>(kk) * nn];
            double* crow = &n.value[static_cast<size_t>(i) * nn];
            for (int j = 0; j < nn; ++j) crow[j] += av * brow[j];
          }
      } else {
        n.shape = {m};
        n.value.assign(m, 0.0);
        for (int i = 0; i < m; ++i) {
          double acc = 0.0;
          const double* arow = &a.value[static_cast<size_t>(i) * k];
          for (int kk = 0; kk < k; ++kk) acc += arow[kk] * b.value[kk];
          n.value[i] = acc;
        }
      }
      break;
    }
    case OpKind::kConv1d: {
      const auto& x = *in[0];
      const auto& w = *in[1];
      int L = x.shape[0], C = x.shape[1];
      int oc = w.shape[1];
      auto g = conv1d_geometry(L, n.filter_width, n.stride);
      n.shape = {g.out_len, oc};
      n.value.assign(static_cast<size_t>(g.out_len) * oc, 0.0);
      for (int j = 0; j < g.out_len; ++j) {
        int base = j * n.stride - g.pad_left;
        for (int k = 0; k < n.filter_width; ++k) {
          int r = base + k;
          if (r < 0 || r >= L) continue;
          for (int c = 0; c < C; ++c) {
            double xv = x.value[static_cast<size_t>(r) * C + c];
            if (xv == 0.0) continue;
            const double* wrow = &w.value[static_cast<size_t>(k * C + c) * oc];
            double* orow = &n.value[static_cast<size_t>(j) * oc];
            for (int o = 0; o < oc; ++o) orow[o] += xv * wrow[o];
          }
        }
      }
      break;
    }
    case OpKind::kAdd: {
      const auto& a = *in[0];
      const auto& b = *in[1];
      n.shape = a.shape;
      n.value = a.value;
      if (a.shape == b.shape) {
        for (size_t i = 0; i < n.value.size(); ++i) n.value[i] += b.value[i];
      } else {  // row broadcast {m,n} + {n}
        int m = a.shape[0], w = a.shape[1];
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j) n.value[static_cast<size_t>(i) * w + j] += b.value[j];
      }
      break;
    }
    case OpKind::kElementwiseMul: {
      const auto& a = *in[0];
      const auto& b = *in[1];
      n.shape = a.shape;
      n.value.resize(a.value.size());
      for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = a.value[i] * b.value[i];
      break;
    }
    case OpKind::kConcat: {
      n.shape = in[0]->shape;
      n.shape[n.axis] = 0;
      for (const auto& p : in) n.shape[n.axis] += p->shape[n.axis];
      n.value.assign(numel(n.shape), 0.0);
      auto vout = axis_view(n.shape, n.axis);
      int64_t off = 0;
      for (const auto& p : in) {
        auto vin = axis_view(p->shape, n.axis);
        for (int64_t li = 0; li < vin.lines; ++li) {
          int64_t src = line_base(vin, li);
          int64_t dst = line_base(vout, li) + off * vout.inner;
          for (int64_t e = 0; e < vin.line_len; ++e)
            n.value[dst + e * vout.inner] = p->value[src + e * vin.inner];
        }
        off += p->shape[n.axis];
      }
      break;
    }
    case OpKind::kSlice: {
      const auto& x = *in[0];
      n.shape = x.shape;
      n.shape[n.axis] = n.len;
      n.value.assign(numel(n.shape), 0.0);
      auto vin = axis_view(x.shape, n.axis);
      auto vout = axis_view(n.shape, n.axis);
      for (int64_t li = 0; li < vout.lines; ++li) {
        int64_t src = line_base(vin, li) + static_cast<int64_t>(n.start) * vin.inner;
        int64_t dst = line_base(vout, li);
        for (int64_t e = 0; e < n.len; ++e)
          n.value[dst + e * vout.inner] = x.value[src + e * vin.inner];
      }
      break;
    }
    case OpKind::kTanh:
    case OpKind::kSigmoid:
    case OpKind::kExp:
    case OpKind::kLog:
    case OpKind::kAtanh: {
      const auto& x = *in[0];
      n.shape = x.shape;
      n.value.resize(x.value.size());
      for (size_t i = 0; i < x.value.size(); ++i) {
        double v = x.value[i];
        switch (n.kind) {
          case OpKind::kTanh: n.value[i] = std::tanh(v); break;
          case OpKind::kSigmoid: n.value[i] = 1.0 / (1.0 + std::exp(-v)); break;
          case OpKind::kExp: n.value[i] = std::exp(v); break;
          case OpKind::kLog:
            if (v <= 0.0) fail("log: non-positive argument");
            n.value[i] = std::log(v);
            break;
          case OpKind::kAtanh:
            n.value[i] = std::atanh(std::clamp(v, -kAtanhClamp, kAtanhClamp));
            break;
          default: break;
        }
      }
      break;
    }
    case OpKind::kSoftmax:
    case OpKind::kLogSoftmax: {
      const auto& x = *in[0];
      n.shape = x.shape;
      n.value.resize(x.value.size());
      auto v = axis_view(x.shape, n.axis);
      for (int64_t li = 0; li < v.lines; ++li) {
        int64_t base = line_base(v, li);
        double mx = -HUGE_VAL;
        for (int64_t e = 0; e < v.line_len; ++e)
          mx = std::max(mx, x.value[base + e * v.inner] / n.temperature);
        double z = 0.0;
        for (int64_t e = 0; e < v.line_len; ++e)
          z += std::exp(x.value[base + e * v.inner] / n.temperature - mx);
        double logz = std::log(z);
        for (int64_t e = 0; e < v.line_len; ++e) {
          double sc = x.value[base + e * v.inner] / n.temperature - mx;
          n.value[base + e * v.inner] =
              n.kind == OpKind::kSoftmax ? std::exp(sc) / z : sc - logz;
        }
      }
      break;
    }
    case OpKind::kReduceSum:
    case OpKind::kReduceMean: {
      const auto& x = *in[0];
      n.shape = {1};
      double acc = 0.0;
      for (double v : x.value) acc += v;
      if (n.kind == OpKind::kReduceMean) acc /= static_cast<double>(x.value.size());
      n.value = {acc};
      break;
    }
    case OpKind::kMaxOverAxis: {
      const auto& x = *in[0];
      n.shape.clear();
      for (size_t i = 0; i < x.shape.size(); ++i)
        if (static_cast<int>(i) != n.axis) n.shape.push_back(x.shape[i]);
      if (n.shape.empty()) n.shape = {1};
      auto v = axis_view(x.shape, n.axis);
      n.value.assign(v.lines, 0.0);
      for (int64_t li = 0; li < v.lines; ++li) {
        int64_t base = line_base(v, li);
        double mx = x.value[base];
        for (int64_t e = 1; e < v.line_len; ++e)
          mx = std::max(mx, x.value[base + e * v.inner]);
        n.value[li] = mx;
      }
      break;
    }
    case OpKind::kCosineSimilarity: {
      const auto& a = *in[0];
      const auto& b = *in[1];
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (size_t i = 0; i < a.value.size(); ++i) {
        dot += a.value[i] * b.value[i];
        na += a.value[i] * a.value[i];
        nb += b.value[i] * b.value[i];
      }
      if (na == 0.0 || nb == 0.0) fail("cosine_similarity: zero-norm vector");
      n.shape = {1};
      n.value = {dot / (std::sqrt(na) * std::sqrt(nb))};
      break;
    }
    case OpKind::kEmbeddingLookup: {
      const auto& t = *in[0];
      int d = t.shape[1];
      n.shape = {static_cast<int>(n.ids.size()), d};
      n.value.resize(n.ids.size() * static_cast<size_t>(d));
      for (size_t r = 0; r < n.ids.size(); ++r)
        std::copy_n(&t.value[static_cast<size_t>(n.ids[r]) * d], d, &n.value[r * d]);
      break;
    }
    case OpKind::kLstmCell: {
      const auto& x = *in[0];
      const auto& h = *in[1];
      const auto& c = *in[2];
      const auto& wx = *in[3];
      const auto& wh = *in[4];
      const auto& b = *in[5];
      int H = h.shape[0];
      int X = x.shape[0];
      std::vector<double> z(4 * H);
      for (int r = 0; r < 4 * H; ++r) {
        double acc = b.value[r];
        const double* wxr = &wx.value[static_cast<size_t>(r) * X];
        for (int j = 0; j < X; ++j) acc += wxr[j] * x.value[j];
        const double* whr = &wh.value[static_cast<size_t>(r) * H];
        for (int j = 0; j < H; ++j) acc += whr[j] * h.value[j];
        z[r] = acc;
      }
      n.shape = {2 * H};
      n.value.assign(2 * H, 0.0);
      for (int j = 0; j < H; ++j) {
        double ig = 1.0 / (1.0 + std::exp(-z[j]));
        double fg = 1.0 / (1.0 + std::exp(-z[H + j]));
        double og = 1.0 / (1.0 + std::exp(-z[2 * H + j]));
        double gg = std::tanh(z[3 * H + j]);
        double cn = fg * c.value[j] + ig * gg;
        n.value[H + j] = cn;
        n.value[j] = og * std::tanh(cn);
      }
      break;
    }
    case OpKind::kReshape: {
      n.value = in[0]->value;  // shape fixed at construction
      break;
    }
    case OpKind::kScale: {
      const auto& x = *in[0];
      n.shape = x.shape;
      n.value.resize(x.value.size());
      for (size_t i = 0; i < x.value.size(); ++i) n.value[i] = n.alpha * x.value[i];
      break;
    }
  }
  n.evaluated = true;
  check_finite(n);
}

void backward_compute(Node& n) {
  const auto& in = n.inputs;
  auto needs = [&](size_t i) { return in[i]->requires_grad; };
  switch (n.kind) {
    case OpKind::kLeaf:
      break;
    case OpKind::kMatmul: {
      auto& a = *in[0];
      auto& b = *in[1];
      int m = a.shape[0], k = a.shape[1];
      if (b.shape.size() == 2) {
        int nn = b.shape[1];
        if (needs(0))
          for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              const double* grow = &n.grad[static_cast<size_t>(i) * nn];
              const double* brow = &b.value[static_cast<size_t>(kk) * nn];
              for (int j = 0; j < nn; ++j) acc += grow[j] * brow[j];
              a.grad[static_cast<size_t>(i) * k + kk] += acc;
            }
        if (needs(1))
          for (int kk = 0; kk < k; ++kk)
            for (int i = 0; i < m; ++i) {
              double av = a.value[static_cast<size_t>(i) * k + kk];
              if (av == 0.0) continue;
              const double* grow = &n.grad[static_cast<size_t>(i) * nn];
              double* brow = &b.grad[static_cast<size_t>(kk) * nn];
              for (int j = 0; j < nn; ++j) brow[j] += av * grow[j];
            }
      } else {
        if (needs(0))
          for (int i = 0; i < m; ++i) {
            double g = n.grad[i];
            if (g == 0.0) continue;
            double* arow = &a.grad[static_cast<size_t>(i) * k];
            for (int kk = 0; kk < k; ++kk) arow[kk] += g * b.value[kk];
          }
        if (needs(1))
          for (int i = 0; i < m; ++i) {
            double g = n.grad[i];
            if (g == 0.0) continue;
            const double* arow = &a.value[static_cast<size_t>(i) * k];
            for (int kk = 0; kk < k; ++kk) b.grad[kk] += g * arow[kk];
          }
      }
      break;
    }
    case OpKind::kConv1d: {
      auto& x = *in[0];
      auto& w = *in[1];
      int L = x.shape[0], C = x.shape[1];
      int oc = w.shape[1];
      auto g = conv1d_geometry(L, n.filter_width, n.stride);
      for (int j = 0; j < g.out_len; ++j) {
        int base = j * n.stride - g.pad_left;
        const double* grow = &n.grad[static_cast<size_t>(j) * oc];
        for (int k = 0; k < n.filter_width; ++k) {
          int r = base + k;
          if (r < 0 || r >= L) continue;
          for (int c = 0; c < C; ++c) {
            const double* wrow = &w.value[static_cast<size_t>(k * C + c) * oc];
            if (needs(0)) {
              double acc = 0.0;
              for (int o = 0; o < oc; ++o) acc += grow[o] * wrow[o];
              x.grad[static_cast<size_t>(r) * C + c] += acc;
            }
            if (needs(1)) {
              double xv = x.value[static_cast<size_t>(r) * C + c];
              if (xv == 0.0) continue;
              double* wg = &w.grad[static_cast<size_t>(k * C + c) * oc];
              for (int o = 0; o < oc; ++o) wg[o] += xv * grow[o];
            }
          }
        }
      }
      break;
    }
    case OpKind::kAdd: {
      auto& a = *in[0];
      auto& b = *in[1];
      if (needs(0))
        for (size_t i = 0; i < n.grad.size(); ++i) a.grad[i] += n.grad[i];
      if (needs(1)) {
        if (a.shape == b.shape) {
          for (size_t i = 0; i < n.grad.size(); ++i) b.grad[i] += n.grad[i];
        } else {
          int m = a.shape[0], w = a.shape[1];
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < w; ++j) b.grad[j] += n.grad[static_cast<size_t>(i) * w + j];
        }
      }
      break;
    }
    case OpKind::kElementwiseMul: {
      auto& a = *in[0];
      auto& b = *in[1];
      for (size_t i = 0; i < n.grad.size(); ++i) {
        if (needs(0)) a.grad[i] += n.grad[i] * b.value[i];
        if (needs(1)) b.grad[i] += n.grad[i] * a.value[i];
      }
      break;
    }
    case OpKind::kConcat: {
      auto vout = axis_view(n.shape, n.axis);
      int64_t off = 0;
      for (const auto& p : in) {
        auto vin = axis_view(p->shape, n.axis);
        if (p->requires_grad)
          for (int64_t li = 0; li < vin.lines; ++li) {
            int64_t dst = line_base(vin, li);
            int64_t src = line_base(vout, li) + off * vout.inner;
            for (int64_t e = 0; e < vin.line_len; ++e)
              p->grad[dst + e * vin.inner] += n.grad[src + e * vout.inner];
          }
        off += p->shape[n.axis];
      }
      break;
    }
    case OpKind::kSlice: {
      auto& x = *in[0];
      auto vin = axis_view(x.shape, n.axis);
      auto vout = axis_view(n.shape, n.axis);
      for (int64_t li = 0; li < vout.lines; ++li) {
        int64_t dst = line_base(vin, li) + static_cast<int64_t>(n.start) * vin.inner;
        int64_t src = line_base(vout, li);
        for (int64_t e = 0; e < n.len; ++e)
          x.grad[dst + e * vin.inner] += n.grad[src + e * vout.inner];
      }
      break;
    }
    case OpKind::kTanh: {
      auto& x = *in[0];
      for (size_t i = 0; i < n.grad.size(); ++i)
        x.grad[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
      break;
    }
    case OpKind::kSigmoid: {
      auto& x = *in[0];
      for (size_t i = 0; i < n.grad.size(); ++i)
        x.grad[i] += n.grad[i] * n.value[i] * (1.0 - n.value[i]);
      break;
    }
    case OpKind::kExp: {
      auto& x = *in[0];
      for (size_t i = 0; i < n.grad.size(); ++i) x.grad[i] += n.grad[i] * n.value[i];
      break;
    }
    case OpKind::kLog: {
      auto& x = *in[0];
      for (size_t i = 0; i < n.grad.size(); ++i) x.grad[i] += n.grad[i] / x.value[i];
      break;
    }
    case OpKind::kAtanh: {
      auto& x = *in[0];
      for (size_t i = 0; i < n.grad.size(); ++i) {
        double v = x.value[i];
        if (v > -kAtanhClamp && v < kAtanhClamp)
          x.grad[i] += n.grad[i] / (1.0 - v * v);
        // saturated coordinates: clamp is flat, derivative 0
      }
      break;
    }
    case OpKind::kSoftmax: {
      auto& x = *in[0];
      auto v = axis_view(n.shape, n.axis);
      for (int64_t li = 0; li < v.lines; ++li) {
        int64_t base = line_base(v, li);
        double gs = 0.0;
        for (int64_t e = 0; e < v.line_len; ++e)
          gs += n.grad[base + e * v.inner] * n.value[base + e * v.inner];
        for (int64_t e = 0; e < v.line_len; ++e) {
          int64_t idx = base + e * v.inner;
          x.grad[idx] += n.value[idx] * (n.grad[idx] - gs) / n.temperature;
        }
      }
      break;
    }
    case OpKind::kLogSoftmax: {
      auto& x = *in[0];
      auto v = axis_view(n.shape, n.axis);
      for (int64_t li = 0; li < v.lines; ++li) {
        int64_t base = line_base(v, li);
        double gs = 0.0;
        for (int64_t e = 0; e < v.line_len; ++e) gs += n.grad[base + e * v.inner];
        for (int64_t e = 0; e < v.line_len; ++e) {
          int64_t idx = base + e * v.inner;
          x.grad[idx] += (n.grad[idx] - std::exp(n.value[idx]) * gs) / n.temperature;
        }
      }
      break;
    }
    case OpKind::kReduceSum: {
      auto& x = *in[0];
      for (size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += n.grad[0];
      break;
    }
    case OpKind::kReduceMean: {
      auto& x = *in[0];
      double g = n.grad[0] / static_cast<double>(x.value.size());
      for (size_t i = 0; i < x.grad.size(); ++i) x.grad[i] += g;
      break;
    }
    case OpKind::kMaxOverAxis: {
      auto& x = *in[0];
      auto v = axis_view(x.shape, n.axis);
      for (int64_t li = 0; li < v.lines; ++li) {
        int64_t base = line_base(v, li);
        int64_t arg = 0;
        double mx = x.value[base];
        for (int64_t e = 1; e < v.line_len; ++e)
          if (x.value[base + e * v.inner] > mx) {
            mx = x.value[base + e * v.inner];
            arg = e;
          }
        x.grad[base + arg * v.inner] += n.grad[li];
      }
      break;
    }
    case OpKind::kCosineSimilarity: {
      auto& a = *in[0];
      auto& b = *in[1];
      double dot = 0.0, na2 = 0.0, nb2 = 0.0;
      for (size_t i = 0; i < a.value.size(); ++i) {
        dot += a.value[i] * b.value[i];
        na2 += a.value[i] * a.value[i];
        nb2 += b.value[i] * b.value[i];
      }
      double na = std::sqrt(na2), nb = std::sqrt(nb2);
      double cosv = n.value[0];
      double g = n.grad[0];
      for (size_t i = 0; i < a.value.size(); ++i) {
        if (needs(0)) a.grad[i] += g * (b.value[i] / (na * nb) - cosv * a.value[i] / na2);
        if (needs(1)) b.grad[i] += g * (a.value[i] / (na * nb) - cosv * b.value[i] / nb2);
      }
      break;
    }
    case OpKind::kEmbeddingLookup: {
      auto& t = *in[0];
      int d = t.shape[1];
      for (size_t r = 0; r < n.ids.size(); ++r) {
        double* trow = &t.grad[static_cast<size_t>(n.ids[r]) * d];
        const double* grow = &n.grad[r * d];
        for (int j = 0; j < d; ++j) trow[j] += grow[j];
      }
      break;
    }
    case OpKind::kLstmCell: {
      auto& x = *in[0];
      auto& h = *in[1];
      auto& c = *in[2];
      auto& wx = *in[3];
      auto& wh = *in[4];
      auto& b = *in[5];
      int H = h.shape[0];
      int X = x.shape[0];
      // recompute gate activations from inputs
      std::vector<double> z(4 * H);
      for (int r = 0; r < 4 * H; ++r) {
        double acc = b.value[r];
        const double* wxr = &wx.value[static_cast<size_t>(r) * X];
        for (int j = 0; j < X; ++j) acc += wxr[j] * x.value[j];
        const double* whr = &wh.value[static_cast<size_t>(r) * H];
        for (int j = 0; j < H; ++j) acc += whr[j] * h.value[j];
        z[r] = acc;
      }
      std::vector<double> dz(4 * H);
      for (int j = 0; j < H; ++j) {
        double ig = 1.0 / (1.0 + std::exp(-z[j]));
        double fg = 1.0 / (1.0 + std::exp(-z[H + j]));
        double og = 1.0 / (1.0 + std::exp(-z[2 * H + j]));
        double gg = std::tanh(z[3 * H + j]);
        double cn = n.value[H + j];
        double tc = std::tanh(cn);
        double gh = n.grad[j];
        double gc = n.grad[H + j] + gh * og * (1.0 - tc * tc);
        double dig = gc * gg;
        double dfg = gc * c.value[j];
        double dog = gh * tc;
        double dgg = gc * ig;
        dz[j] = dig * ig * (1.0 - ig);
        dz[H + j] = dfg * fg * (1.0 - fg);
        dz[2 * H + j] = dog * og * (1.0 - og);
        dz[3 * H + j] = dgg * (1.0 - gg * gg);
        if (needs(2)) c.grad[j] += gc * fg;
      }
      for (int r = 0; r < 4 * H; ++r) {
        double d = dz[r];
        if (d == 0.0) continue;
        if (needs(0)) {
          const double* wxr = &wx.value[static_cast<size_t>(r) * X];
          for (int j = 0; j < X; ++j) x.grad[j] += d * wxr[j];
        }
        if (needs(1)) {
          const double* whr = &wh.value[static_cast<size_t>(r) * H];
          for (int j = 0; j < H; ++j) h.grad[j] += d * whr[j];
        }
        if (needs(3)) {
          double* wxg = &wx.grad[static_cast<size_t>(r) * X];
          for (int j = 0; j < X; ++j) wxg[j] += d * x.value[j];
        }
        if (needs(4)) {
          double* whg = &wh.grad[static_cast<size_t>(r) * H];
          for (int j = 0; j < H; ++j) whg[j] += d * h.value[j];
        }
        if (needs(5)) b.grad[r] += d;
      }
      break;
    }
    case OpKind::kReshape: {
      auto& x = *in[0];
      for (size_t i = 0; i < n.grad.size(); ++i) x.grad[i] += n.grad[i];
      break;
    }
    case OpKind::kScale: {
      auto& x = *in[0];
      for (size_t i = 0; i < n.grad.size(); ++i) x.grad[i] += n.alpha * n.grad[i];
      break;
    }
  }
}

// post-order DFS; result is a topological order (inputs before consumers)
std::vector<Node*> topo_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      Node* next = node->inputs[idx++].get();
      if (seen.insert(next).second) stack.emplace_back(next, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

const char* op_kind_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kConv1d: return "conv1d";
    case OpKind::kAdd: return "add";
    case OpKind::kElementwiseMul: return "elementwise_mul";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLogSoftmax: return "log_softmax";
    case OpKind::kReduceSum: return "reduce_sum";
    case OpKind::kReduceMean: return "reduce_mean";
    case OpKind::kMaxOverAxis: return "max_over_axis";
    case OpKind::kCosineSimilarity: return "cosine_similarity";
    case OpKind::kAtanh: return "atanh";
    case OpKind::kEmbeddingLookup: return "embedding_lookup";
    case OpKind::kLstmCell: return "lstm_cell";
    case OpKind::kReshape: return "reshape";
    case OpKind::kScale: return "scale";
  }
  return "?";
}

Tensor Tensor::leaf(std::string name, Shape shape, std::vector<double> data,
                    bool requires_grad) {
  check_shape_positive(shape, "leaf");
  if (static_cast<int64_t>(data.size()) != numel(shape))
    fail("leaf " + name + ": data length " + std::to_string(data.size()) +
         " does not match shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->name = std::move(name);
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  n->evaluated = true;
  return Tensor(std::move(n));
}

Tensor Tensor::placeholder(std::string name, Shape shape, bool requires_grad) {
  check_shape_positive(shape, "placeholder");
  auto n = std::make_shared<Node>();
  n->name = std::move(name);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  n->evaluated = false;
  return Tensor(std::move(n));
}

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
  return leaf("", std::move(shape), std::move(data), false);
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(numel(shape), 0.0);
  return leaf("", std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double v) {
  std::vector<double> d(numel(shape), v);
  return constant(std::move(shape), std::move(d));
}

const Shape& Tensor::shape() const { return node_->shape; }
const std::vector<double>& Tensor::data() const {
  if (!node_->evaluated) fail("Tensor::data: node not evaluated");
  return node_->value;
}
std::vector<double>& Tensor::mutable_data() { return node_->value; }
double Tensor::item() const {
  if (size() != 1) fail("Tensor::item: tensor is not scalar, shape " + shape_str(shape()));
  return data()[0];
}
bool Tensor::requires_grad() const { return node_->requires_grad; }
const std::string& Tensor::name() const { return node_->name; }
const std::vector<double>& Tensor::grad() const { return node_->grad; }

namespace {
void require_rank(const Tensor& t, size_t rank, const char* who) {
  if (t.shape().size() != rank)
    fail(std::string(who) + ": expected rank " + std::to_string(rank) + ", got shape " +
         shape_str(t.shape()));
}
void require_defined(const Tensor& t, const char* who) {
  if (!t.defined()) fail(std::string(who) + ": undefined tensor");
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  require_rank(a, 2, "matmul lhs");
  if (b.shape().size() != 1 && b.shape().size() != 2)
    fail("matmul rhs: expected rank 1 or 2, got " + shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    fail("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
         shape_str(b.shape()));
  return finish_op(make_op(OpKind::kMatmul, {a.node(), b.node()}));
}

Tensor conv1d(const Tensor& x, const Tensor& w, int filter_width, int stride) {
  require_rank(x, 2, "conv1d input");
  require_rank(w, 2, "conv1d weight");
  if (filter_width < 1 || stride < 1) fail("conv1d: filter_width and stride must be >= 1");
  if (w.shape()[0] != filter_width * x.shape()[1])
    fail("conv1d: weight rows " + std::to_string(w.shape()[0]) + " != filter_width*channels " +
         std::to_string(filter_width * x.shape()[1]));
  auto n = make_op(OpKind::kConv1d, {x.node(), w.node()});
  n->filter_width = filter_width;
  n->stride = stride;
  return finish_op(std::move(n));
}

Tensor add(const Tensor& a, const Tensor& b) {
  bool same = a.shape() == b.shape();
  bool bias = a.shape().size() == 2 && b.shape().size() == 1 && a.shape()[1] == b.shape()[0];
  if (!same && !bias)
    fail("add: incompatible shapes " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  return finish_op(make_op(OpKind::kAdd, {a.node(), b.node()}));
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail("elementwise_mul: shapes differ, " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
  return finish_op(make_op(OpKind::kElementwiseMul, {a.node(), b.node()}));
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size())) fail("concat: axis out of range");
  std::vector<NodePtr> ins;
  for (const auto& p : parts) {
    if (p.shape().size() != s0.size()) fail("concat: rank mismatch");
    for (size_t i = 0; i < s0.size(); ++i)
      if (static_cast<int>(i) != axis && p.shape()[i] != s0[i])
        fail("concat: extent mismatch off axis");
    ins.push_back(p.node());
  }
  auto n = make_op(OpKind::kConcat, std::move(ins));
  n->axis = axis;
  return finish_op(std::move(n));
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  if (axis < 0 || axis >= static_cast<int>(x.shape().size())) fail("slice: axis out of range");
  if (len < 1 || start < 0 || start + len > x.shape()[axis])
    fail("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
         ") out of bounds for extent " + std::to_string(x.shape()[axis]));
  auto n = make_op(OpKind::kSlice, {x.node()});
  n->axis = axis;
  n->start = start;
  n->len = len;
  return finish_op(std::move(n));
}

namespace {
Tensor unary(OpKind kind, const Tensor& x) {
  require_defined(x, op_kind_name(kind));
  return finish_op(make_op(kind, {x.node()}));
}
}  // namespace

Tensor tanh(const Tensor& x) { return unary(OpKind::kTanh, x); }
Tensor sigmoid(const Tensor& x) { return unary(OpKind::kSigmoid, x); }
Tensor exp(const Tensor& x) { return unary(OpKind::kExp, x); }
Tensor log(const Tensor& x) { return unary(OpKind::kLog, x); }
Tensor atanh(const Tensor& x) { return unary(OpKind::kAtanh, x); }

Tensor softmax(const Tensor& x, int axis, double temperature) {
  if (temperature <= 0.0) fail("softmax: temperature must be positive");
  if (axis < 0 || axis >= static_cast<int>(x.shape().size())) fail("softmax: axis out of range");
  auto n = make_op(OpKind::kSoftmax, {x.node()});
  n->axis = axis;
  n->temperature = temperature;
  return finish_op(std::move(n));
}

Tensor log_softmax(const Tensor& x, int axis, double temperature) {
  if (temperature <= 0.0) fail("log_softmax: temperature must be positive");
  if (axis < 0 || axis >= static_cast<int>(x.shape().size()))
    fail("log_softmax: axis out of range");
  auto n = make_op(OpKind::kLogSoftmax, {x.node()});
  n->axis = axis;
  n->temperature = temperature;
  return finish_op(std::move(n));
}

Tensor reduce_sum(const Tensor& x) { return unary(OpKind::kReduceSum, x); }
Tensor reduce_mean(const Tensor& x) { return unary(OpKind::kReduceMean, x); }

Tensor max_over_axis(const Tensor& x, int axis) {
  if (axis < 0 || axis >= static_cast<int>(x.shape().size()))
    fail("max_over_axis: axis out of range");
  auto n = make_op(OpKind::kMaxOverAxis, {x.node()});
  n->axis = axis;
  return finish_op(std::move(n));
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_rank(a, 1, "cosine_similarity");
  require_rank(b, 1, "cosine_similarity");
  if (a.shape() != b.shape()) fail("cosine_similarity: shapes differ");
  return finish_op(make_op(OpKind::kCosineSimilarity, {a.node(), b.node()}));
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  require_rank(table, 2, "embedding_lookup");
  if (ids.empty()) fail("embedding_lookup: empty id list");
  for (int id : ids)
    if (id < 0 || id >= table.shape()[0])
      fail("embedding_lookup: token id " + std::to_string(id) +
           " outside vocabulary range [0," + std::to_string(table.shape()[0]) + ")");
  auto n = make_op(OpKind::kEmbeddingLookup, {table.node()});
  n->ids = ids;
  return finish_op(std::move(n));
}

Tensor lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c, const Tensor& w_x,
                 const Tensor& w_h, const Tensor& b) {
  require_rank(x, 1, "lstm_cell x");
  require_rank(h, 1, "lstm_cell h");
  require_rank(c, 1, "lstm_cell c");
  require_rank(w_x, 2, "lstm_cell w_x");
  require_rank(w_h, 2, "lstm_cell w_h");
  require_rank(b, 1, "lstm_cell b");
  int H = h.shape()[0];
  if (c.shape()[0] != H || w_x.shape()[0] != 4 * H || w_x.shape()[1] != x.shape()[0] ||
      w_h.shape()[0] != 4 * H || w_h.shape()[1] != H || b.shape()[0] != 4 * H)
    fail("lstm_cell: inconsistent shapes");
  return finish_op(
      make_op(OpKind::kLstmCell, {x.node(), h.node(), c.node(), w_x.node(), w_h.node(), b.node()}));
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape_positive(shape, "reshape");
  if (numel(shape) != x.size())
    fail("reshape: element count mismatch, " + shape_str(x.shape()) + " -> " + shape_str(shape));
  auto n = make_op(OpKind::kReshape, {x.node()});
  n->shape = std::move(shape);
  return finish_op(std::move(n));
}

Tensor scale(const Tensor& x, double alpha) {
  auto n = make_op(OpKind::kScale, {x.node()});
  n->alpha = alpha;
  return finish_op(std::move(n));
}

Tensor evaluate(const Tensor& root,
                const std::unordered_map<std::string, std::vector<double>>& bindings) {
  require_defined(root, "evaluate");
  auto order = topo_order(root.node().get());
  if (!bindings.empty()) {
    std::unordered_map<std::string, Node*> leaves;
    for (Node* n : order)
      if (n->kind == OpKind::kLeaf && !n->name.empty()) leaves[n->name] = n;
    for (const auto& [name, data] : bindings) {
      auto it = leaves.find(name);
      if (it == leaves.end()) fail("evaluate: no leaf named " + name);
      if (static_cast<int64_t>(data.size()) != numel(it->second->shape))
        fail("evaluate: binding for " + name + " has wrong length");
      it->second->value = data;
      it->second->evaluated = true;
    }
  }
  for (Node* n : order) {
    if (n->kind == OpKind::kLeaf) {
      if (!n->evaluated) fail("evaluate: unbound input: " + n->name);
      continue;
    }
    forward_compute(*n);
  }
  return root;
}

std::unordered_map<std::string, Tensor> backward(const Tensor& root, const Tensor& seed) {
  require_defined(root, "backward");
  if (!root.node()->evaluated) fail("backward: forward evaluation has not run");
  if (seed.shape() != root.shape())
    fail("backward: seed shape " + shape_str(seed.shape()) + " does not match output shape " +
         shape_str(root.shape()));
  auto order = topo_order(root.node().get());
  for (Node* n : order) {
    if (!n->evaluated) fail("backward: forward evaluation has not run");
    n->grad.assign(n->value.size(), 0.0);
  }
  root.node()->grad = seed.data();
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->kind != OpKind::kLeaf && (*it)->requires_grad) backward_compute(**it);
  std::unordered_map<std::string, Tensor> grads;
  for (Node* n : order)
    if (n->kind == OpKind::kLeaf && n->requires_grad && !n->name.empty())
      grads.emplace(n->name, Tensor::constant(n->shape, n->grad));
  return grads;
}

std::unordered_map<std::string, Tensor> backward(const Tensor& root) {
  if (root.size() != 1) fail("backward: default seed requires a scalar output");
  return backward(root, Tensor::full(root.shape(), 1.0));
}

GradReport grad_check(const Tensor& root, double epsilon, double tolerance) {
  if (epsilon <= 0.0) fail("grad_check: epsilon must be positive");
  if (root.size() != 1) fail("grad_check: graph output is not scalar");
  GradReport report;
  report.epsilon = epsilon;
  auto analytic = backward(root, Tensor::full(root.shape(), 1.0));
  auto order = topo_order(root.node().get());
  std::vector<Node*> leaves;
  for (Node* n : order)
    if (n->kind == OpKind::kLeaf && n->requires_grad && !n->name.empty()) leaves.push_back(n);
  for (Node* leaf : leaves) {
    const auto& a = analytic.at(leaf->name).data();
    double worst = 0.0;
    for (size_t i = 0; i < leaf->value.size(); ++i) {
      double saved = leaf->value[i];
      leaf->value[i] = saved + epsilon;
      double fp = evaluate(root).item();
      leaf->value[i] = saved - epsilon;
      double fm = evaluate(root).item();
      leaf->value[i] = saved;
      double numeric = (fp - fm) / (2.0 * epsilon);
      double denom = std::max({std::abs(a[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a[i] - numeric) / denom);
    }
    report.per_param_max_rel_error[leaf->name] = worst;
    report.max_rel_error = std::max(report.max_rel_error, worst);
  }
  evaluate(root);  // restore forward values
  report.pass = report.max_rel_error <= tolerance;
  return report;
}

}  // namespace aimlab
