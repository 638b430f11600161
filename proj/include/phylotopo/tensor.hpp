#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <deque>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "phylotopo/error.hpp"

namespace phylotopo::nn {

// Row-major dense matrix; rows are items (nodes, edges, graphs), columns are features.
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Mat value, grad, m, v;
};

class ParameterStore {
 public:
  int add(const std::string& name, Mat init) {
    if (index_of(name) >= 0) throw ValidationError("duplicate parameter '" + name + "'");
    Parameter p{name, std::move(init), {}, {}, {}};
    p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    p.m = p.grad;
    p.v = p.grad;
    params_.push_back(std::move(p));
    return static_cast<int>(params_.size() - 1);
  }

  int size() const noexcept { return static_cast<int>(params_.size()); }
  Parameter& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
  const Parameter& operator[](int i) const { return params_[static_cast<std::size_t>(i)]; }
  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return static_cast<int>(i);
    return -1;
  }
  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }
  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }
  long step() const noexcept { return step_; }
  long& step() noexcept { return step_; }

 private:
  std::vector<Parameter> params_;
  long step_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam on every parameter, then clears gradients.
inline void adam_step(ParameterStore& store, const AdamConfig& cfg) {
  const long t = ++store.step();
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (int i = 0; i < store.size(); ++i) {
    auto& p = store[i];
    p.m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * p.grad;
    p.v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= cfg.lr * (p.m.array() / c1) / ((p.v.array() / c2).sqrt() + cfg.eps);
    p.grad.setZero();
  }
}

template <class Rng>
Mat glorot_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Mat w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  return w;
}

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

// Records matrix operations for reverse accumulation. Parameter gradients stay on the tape
// until flushed into a store, so several tapes can run against one store concurrently.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const noexcept { return record_; }

  Var constant(Mat value) { return push(std::move(value), false); }

  Var param(const ParameterStore& store, int index) {
    Var v = push(store[index].value, record_);
    nodes_[static_cast<std::size_t>(v.id)].param = index;
    return v;
  }

  const Mat& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  const Mat& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  // Adds seed into d(output)/d(v); call backward() once after seeding.
  void seed(Var v, const Mat& g) {
    check_same(value(v), g, "seed");
    accumulate(v.id, g);
  }

  void backward() {
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() > 0) n.backward(n.grad);
    }
  }

  void backward(Var scalar) {
    if (value(scalar).size() != 1) throw ValidationError("backward(Var) needs a 1x1 value");
    seed(scalar, Mat::Ones(1, 1));
    backward();
  }

  // Adds parameter-leaf gradients into the store (single writer).
  void flush_grads(ParameterStore& store, double scale = 1.0) const {
    for (const auto& n : nodes_)
      if (n.param >= 0 && n.grad.size() > 0) store[n.param].grad += scale * n.grad;
  }

  // Gradient of every parameter leaf, summed over repeated uses.
  std::vector<std::pair<int, Mat>> param_grads() const {
    std::vector<std::pair<int, Mat>> out;
    for (const auto& n : nodes_)
      if (n.param >= 0 && n.grad.size() > 0) out.emplace_back(n.param, n.grad);
    return out;
  }

  // Internal: creates a node whose backward receives the output gradient.
  template <class F>
  Var op(Mat value, std::initializer_list<Var> inputs, F&& backward) {
    bool needs = false;
    if (record_)
      for (Var in : inputs) needs = needs || needs_grad(in);
    Var v = push(std::move(value), needs);
    if (needs) nodes_[static_cast<std::size_t>(v.id)].backward = std::forward<F>(backward);
    return v;
  }

  void accumulate(int id, const Mat& g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = g;
    else n.grad += g;
  }

  void accumulate(int id, Mat&& g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) n.grad = std::move(g);
    else n.grad += g;
  }

  // Gradient buffer of a node, zero-filled on first use, for ops that write into part of it.
  Mat* grad_buffer(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return nullptr;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return &n.grad;
  }

  static void check_same(const Mat& a, const Mat& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
      throw ValidationError(std::string(what) + ": shape mismatch " + shape(a) + " vs " + shape(b));
  }
  static std::string shape(const Mat& a) { return std::to_string(a.rows()) + "x" + std::to_string(a.cols()); }

 private:
  struct Node {
    Mat value, grad;
    std::function<void(const Mat&)> backward;
    bool needs_grad = false;
    int param = -1;
  };

  Var push(Mat value, bool needs) {
    // Any NaN or infinity makes the sum non-finite.
    if (!std::isfinite(value.sum())) throw Error("non-finite value in tensor computation");
    nodes_.push_back({std::move(value), {}, {}, needs, -1});
    return {this, static_cast<int>(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;  // deque keeps value references stable while the tape grows
  bool record_;
};

inline const Mat& Var::value() const { return tape->value(*this); }

// ---- primitive operations ----

inline Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  if (a.cols() != b.rows()) throw ValidationError("matmul: shape mismatch " + Tape::shape(a.value()) + " * " + Tape::shape(b.value()));
  return t.op(a.value() * b.value(), {a, b}, [&t, a, b](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a.id, g * t.value(b).transpose());
    if (t.needs_grad(b)) t.accumulate(b.id, t.value(a).transpose() * g);
  });
}

inline Var add(Var a, Var b) {
  Tape& t = *a.tape;
  Tape::check_same(a.value(), b.value(), "add");
  return t.op(a.value() + b.value(), {a, b}, [&t, a, b](const Mat& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  Tape::check_same(a.value(), b.value(), "sub");
  return t.op(a.value() - b.value(), {a, b}, [&t, a, b](const Mat& g) {
    t.accumulate(a.id, g);
    t.accumulate(b.id, -g);
  });
}

// a (n x d) plus a 1 x d row broadcast over rows.
inline Var add_row(Var a, Var row) {
  Tape& t = *a.tape;
  if (row.rows() != 1 || row.cols() != a.cols()) throw ValidationError("add_row: shape mismatch");
  Mat out = a.value();
  out.rowwise() += row.value().row(0);
  return t.op(std::move(out), {a, row}, [&t, a, row](const Mat& g) {
    t.accumulate(a.id, g);
    if (t.needs_grad(row)) t.accumulate(row.id, g.colwise().sum());
  });
}

inline Var hadamard(Var a, Var b) {
  Tape& t = *a.tape;
  Tape::check_same(a.value(), b.value(), "hadamard");
  return t.op(a.value().cwiseProduct(b.value()), {a, b}, [&t, a, b](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a.id, g.cwiseProduct(t.value(b)));
    if (t.needs_grad(b)) t.accumulate(b.id, g.cwiseProduct(t.value(a)));
  });
}

inline Var scale(Var a, double s) {
  Tape& t = *a.tape;
  return t.op(s * a.value(), {a}, [&t, a, s](const Mat& g) { t.accumulate(a.id, s * g); });
}

// a times a 1x1 variable.
inline Var scale_by(Var a, Var s) {
  Tape& t = *a.tape;
  if (s.value().size() != 1) throw ValidationError("scale_by: scalar must be 1x1");
  return t.op(s.value()(0, 0) * a.value(), {a, s}, [&t, a, s](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a.id, t.value(s)(0, 0) * g);
    if (t.needs_grad(s)) t.accumulate(s.id, Mat::Constant(1, 1, g.cwiseProduct(t.value(a)).sum()));
  });
}

// Each row i multiplied by the fixed weight w[i].
inline Var row_scale(Var a, const Eigen::VectorXd& w) {
  Tape& t = *a.tape;
  if (w.size() != a.rows()) throw ValidationError("row_scale: weight count mismatch");
  Mat out = w.asDiagonal() * a.value();
  return t.op(std::move(out), {a}, [&t, a, w](const Mat& g) { t.accumulate(a.id, w.asDiagonal() * g); });
}

inline Var elu(Var a) {
  Tape& t = *a.tape;
  const auto& x = a.value().array();
  Mat out = (x > 0.0).select(x, x.min(0.0).exp() - 1.0).matrix();
  return t.op(std::move(out), {a}, [&t, a](const Mat& g) {
    const auto& x = t.value(a).array();
    t.accumulate(a.id, (g.array() * (x > 0.0).select(1.0, x.min(0.0).exp())).matrix());
  });
}

inline Var sigmoid(Var a) {
  Tape& t = *a.tape;
  // exp(-|x|) never overflows; the two branches are the usual stable forms.
  const auto& x = a.value().array();
  const auto e = (-x.abs()).exp().eval();
  Mat out = (x >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e)).matrix();
  Mat s = out;
  return t.op(std::move(out), {a}, [&t, a, s](const Mat& g) {
    t.accumulate(a.id, g.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
  });
}

inline Var tanh(Var a) {
  Tape& t = *a.tape;
  // tanh(x) = sign(x) (1 - e) / (1 + e) with e = exp(-2|x|).
  const auto& x = a.value().array();
  const auto e = (-2.0 * x.abs()).exp().eval();
  Mat out = (x.sign() * (1.0 - e) / (1.0 + e)).matrix();
  Mat y = out;
  return t.op(std::move(out), {a}, [&t, a, y](const Mat& g) {
    t.accumulate(a.id, g.cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

inline Var concat_cols(Var a, Var b) {
  Tape& t = *a.tape;
  if (a.rows() != b.rows()) throw ValidationError("concat_cols: row count mismatch");
  Mat out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const auto ca = a.cols(), cb = b.cols();
  return t.op(std::move(out), {a, b}, [&t, a, b, ca, cb](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a.id, g.leftCols(ca));
    if (t.needs_grad(b)) t.accumulate(b.id, g.rightCols(cb));
  });
}

inline Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  Tape& t = *a.tape;
  if (start < 0 || count < 0 || start + count > a.cols()) throw ValidationError("slice_cols: range out of bounds");
  return t.op(a.value().middleCols(start, count), {a}, [&t, a, start, count](const Mat& g) {
    if (Mat* d = t.grad_buffer(a.id)) d->middleCols(start, count) += g;
  });
}

// Pads columns with zeros up to width.
inline Var pad_cols(Var a, Eigen::Index width) {
  Tape& t = *a.tape;
  if (width < a.cols()) throw ValidationError("pad_cols: input wider than target");
  Mat out = Mat::Zero(a.rows(), width);
  out.leftCols(a.cols()) = a.value();
  const auto c = a.cols();
  return t.op(std::move(out), {a}, [&t, a, c](const Mat& g) { t.accumulate(a.id, g.leftCols(c)); });
}

inline Var sum_rows(Var a) {
  Tape& t = *a.tape;
  const auto n = a.rows();
  return t.op(a.value().colwise().sum(), {a}, [&t, a, n](const Mat& g) { t.accumulate(a.id, g.replicate(n, 1)); });
}

inline Var sum_all(Var a) {
  Tape& t = *a.tape;
  const auto r = a.rows(), c = a.cols();
  return t.op(Mat::Constant(1, 1, a.value().sum()), {a}, [&t, a, r, c](const Mat& g) {
    t.accumulate(a.id, Mat::Constant(r, c, g(0, 0)));
  });
}

// out[i] = a[index[i]].
inline Var gather_rows(Var a, std::vector<int> index) {
  Tape& t = *a.tape;
  Mat out(static_cast<Eigen::Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.rows()) throw ValidationError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(index[i]);
  }
  return t.op(std::move(out), {a}, [&t, a, index = std::move(index)](const Mat& g) {
    if (Mat* d = t.grad_buffer(a.id))
      for (std::size_t i = 0; i < index.size(); ++i) d->row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

// out[index[i]] += a[i], out has `rows` rows.
inline Var scatter_add_rows(Var a, std::vector<int> index, Eigen::Index rows) {
  Tape& t = *a.tape;
  if (static_cast<Eigen::Index>(index.size()) != a.rows()) throw ValidationError("scatter_add_rows: index count mismatch");
  Mat out = Mat::Zero(rows, a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= rows) throw ValidationError("scatter_add_rows: index out of range");
    out.row(index[i]) += a.value().row(static_cast<Eigen::Index>(i));
  }
  return t.op(std::move(out), {a}, [&t, a, index = std::move(index)](const Mat& g) {
    Mat d(static_cast<Eigen::Index>(index.size()), g.cols());
    for (std::size_t i = 0; i < index.size(); ++i) d.row(static_cast<Eigen::Index>(i)) = g.row(index[i]);
    t.accumulate(a.id, d);
  });
}

// Elementwise maximum; ties send the gradient to the first argument.
inline Var maximum(Var a, Var b) {
  Tape& t = *a.tape;
  Tape::check_same(a.value(), b.value(), "maximum");
  Mat out = a.value().cwiseMax(b.value());
  using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mask first = a.value().array() >= b.value().array();
  return t.op(std::move(out), {a, b}, [&t, a, b, first](const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a.id, first.select(g.array(), 0.0).matrix());
    if (t.needs_grad(b)) t.accumulate(b.id, first.select(0.0, g.array()).matrix());
  });
}

// Row i of the result sums the rows of `a` whose segment is i.
inline Var segment_sum(Var a, const std::vector<int>& segment, Eigen::Index count) {
  return scatter_add_rows(a, segment, count);
}

}  // namespace phylotopo::nn
