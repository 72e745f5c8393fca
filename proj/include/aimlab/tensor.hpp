#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace aimlab {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);

enum class OpKind {
  kLeaf,
  kMatmul,
  kConv1d,
  kAdd,
  kElementwiseMul,
  kConcat,
  kSlice,
  kTanh,
  kSigmoid,
  kExp,
  kLog,
  kSoftmax,
  kLogSoftmax,
  kReduceSum,
  kReduceMean,
  kMaxOverAxis,
  kCosineSimilarity,
  kAtanh,
  kEmbeddingLookup,
  kLstmCell,
  kReshape,
  kScale,
};

const char* op_kind_name(OpKind kind);

// One node of a define-by-run computation graph. Values are computed eagerly
// when an op is built; the stored op kind and attributes allow the graph to be
// re-evaluated after leaf rebinding (used by grad_check and evaluate()).
struct Node {
  OpKind kind = OpKind::kLeaf;
  std::string name;  // named leaves only
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool evaluated = false;
  std::vector<std::shared_ptr<Node>> inputs;

  // op attributes
  int axis = 0;
  int start = 0;
  int len = 0;
  int stride = 1;
  int filter_width = 0;
  double temperature = 1.0;
  double alpha = 1.0;       // kScale factor
  std::vector<int> ids;     // kEmbeddingLookup row indices
};

using NodePtr = std::shared_ptr<Node>;

// Value-semantic handle onto a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor leaf(std::string name, Shape shape, std::vector<double> data,
                     bool requires_grad);
  // leaf with a declared shape but no value yet; must be bound via evaluate()
  static Tensor placeholder(std::string name, Shape shape, bool requires_grad = false);
  static Tensor constant(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t size() const { return numel(shape()); }
  const std::vector<double>& data() const;
  std::vector<double>& mutable_data();
  double item() const;  // requires size()==1
  bool requires_grad() const;
  const std::string& name() const;
  const std::vector<double>& grad() const;  // valid after backward()

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// --- op constructors -------------------------------------------------------
// {m,k}x{k,n}->{m,n} or {m,k}x{k}->{m}
Tensor matmul(const Tensor& a, const Tensor& b);
// x:{L,C} w:{filter_width*C, OC} -> {ceil(L/stride), OC}; zero same-padding
Tensor conv1d(const Tensor& x, const Tensor& w, int filter_width, int stride);
// same shape, or a:{m,n} + b:{n} broadcast over rows
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor elementwise_mul(const Tensor& a, const Tensor& b);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softmax(const Tensor& x, int axis, double temperature = 1.0);
Tensor log_softmax(const Tensor& x, int axis, double temperature = 1.0);
Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);
Tensor max_over_axis(const Tensor& x, int axis);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
// argument clamped to [-1+1e-6, 1-1e-6]; gradient is zero in the clamped range
Tensor atanh(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
// x:{X} h:{H} c:{H} w_x:{4H,X} w_h:{4H,H} b:{4H} -> {2H} laid out [h'; c'].
// Gate rows ordered input, forget, output, candidate.
Tensor lstm_cell(const Tensor& x, const Tensor& h, const Tensor& c,
                 const Tensor& w_x, const Tensor& w_h, const Tensor& b);
Tensor reshape(const Tensor& x, Shape shape);
Tensor scale(const Tensor& x, double alpha);

// --- engine -----------------------------------------------------------------
// Binds named leaves then recomputes every interior node in topological order.
Tensor evaluate(const Tensor& root,
                const std::unordered_map<std::string, std::vector<double>>& bindings = {});

// Reverse-mode sweep from root with the given seed (shape must match root).
// Returns gradients keyed by leaf name for every named requires_grad leaf in
// the graph; each node is visited exactly once.
std::unordered_map<std::string, Tensor> backward(const Tensor& root, const Tensor& seed);
std::unordered_map<std::string, Tensor> backward(const Tensor& root);  // scalar root, seed 1

struct GradReport {
  std::unordered_map<std::string, double> per_param_max_rel_error;
  double max_rel_error = 0.0;
  double epsilon = 0.0;
  bool pass = false;
};

// Central-difference check of backward() on a scalar-valued graph. Relative
// error uses denominator max(|analytic|, |numeric|, 1e-8).
GradReport grad_check(const Tensor& root, double epsilon, double tolerance);

}  // namespace aimlab
