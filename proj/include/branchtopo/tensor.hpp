#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "branchtopo/common.hpp"
#include "branchtopo/pointops.hpp"

// Reverse-mode autodiff over row-major 2-D tensors. Shapes are always
// rows x cols; scalars are 1x1 and grouped (K x max_k x C) blocks are stored
// as (K*max_k) x C. Graph recording is skipped whenever grad mode is off or
// no input requires gradients, so eval-mode forwards allocate no graph.
namespace branchtopo::ad {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct Node {
  int rows = 0;
  int cols = 0;
  std::vector<T> value;
  std::vector<T> grad;  // sized lazily by backward / zero_grad
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;  // inputs that require grad
  std::function<void(Node&)> backfn;           // accumulates into captured inputs
};

template <typename T>
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  static Tensor zeros(int rows, int cols, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value.assign(static_cast<size_t>(rows) * cols, T(0));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(int rows, int cols, T fill) {
    Tensor t = zeros(rows, cols);
    std::fill(t.value().begin(), t.value().end(), fill);
    return t;
  }

  static Tensor from(int rows, int cols, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != static_cast<size_t>(rows) * cols) {
      throw Error("Tensor::from: data length does not match shape");
    }
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  template <typename U>
  static Tensor from_cast(int rows, int cols, const std::vector<U>& data,
                          bool requires_grad = false) {
    std::vector<T> v(data.size());
    for (size_t i = 0; i < data.size(); ++i) v[i] = static_cast<T>(data[i]);
    return from(rows, cols, std::move(v), requires_grad);
  }

  static Tensor scalar_of(T v) { return from(1, 1, {v}); }

  bool defined() const { return n_ != nullptr; }
  int rows() const { return n_->rows; }
  int cols() const { return n_->cols; }
  size_t count() const { return n_->value.size(); }
  std::vector<T>& value() { return n_->value; }
  const std::vector<T>& value() const { return n_->value; }
  std::vector<T>& grad() { return n_->grad; }
  const std::vector<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }
  const std::string& name() const { return n_->name; }
  void set_name(std::string s) { n_->name = std::move(s); }
  T at(int r, int c) const { return n_->value[static_cast<size_t>(r) * n_->cols + c]; }
  T& at(int r, int c) { return n_->value[static_cast<size_t>(r) * n_->cols + c]; }

  T item() const {
    if (count() != 1) throw Error("Tensor::item: tensor is not a scalar");
    return n_->value[0];
  }

  Node<T>* node() const { return n_.get(); }
  const std::shared_ptr<Node<T>>& ptr() const { return n_; }

private:
  std::shared_ptr<Node<T>> n_;
};

namespace detail {

inline std::string shape_str(int r, int c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <typename T>
bool record(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_mode_flag()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T, typename F>
void attach(Tensor<T>& out, std::initializer_list<const Tensor<T>*> inputs, F&& backfn) {
  out.node()->requires_grad = true;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) out.node()->parents.push_back(t->ptr());
  }
  out.node()->backfn = std::forward<F>(backfn);
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---- construction helpers ----

template <typename T>
Tensor<T> constant_from_points(const PointArray& pts) {
  return Tensor<T>::template from_cast<double>(pts.size(), pts.dim, pts.data);
}

// ---- primitives ----

// Matrix product. The forward pass computes each output row independently so
// the result is bitwise invariant under row permutations of `a` (the blocked
// product is not, and permutation equivariance of the network is checked at
// the bit level).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows()) {
    throw Error("matmul: shape mismatch " + detail::shape_str(a.rows(), a.cols()) + " * " +
                detail::shape_str(b.rows(), b.cols()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.rows(), b.cols());
  {
    detail::CMapMat<T> am(a.value().data(), a.rows(), a.cols());
    detail::CMapMat<T> bm(b.value().data(), b.rows(), b.cols());
    detail::MapMat<T> om(out.value().data(), out.rows(), out.cols());
    for (int i = 0; i < a.rows(); ++i) om.row(i).noalias() = am.row(i) * bm;
  }
  if (detail::record<T>({&a, &b})) {
    auto an = a.ptr();
    auto bn = b.ptr();
    detail::attach(out, {&a, &b}, [an, bn](Node<T>& self) {
      detail::CMapMat<T> g(self.grad.data(), self.rows, self.cols);
      detail::CMapMat<T> am(an->value.data(), an->rows, an->cols);
      detail::CMapMat<T> bm(bn->value.data(), bn->rows, bn->cols);
      if (an->requires_grad) {
        detail::MapMat<T> ga(an->grad.data(), an->rows, an->cols);
        ga.noalias() += g * bm.transpose();
      }
      if (bn->requires_grad) {
        detail::MapMat<T> gb(bn->grad.data(), bn->rows, bn->cols);
        gb.noalias() += am.transpose() * g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error("add: shape mismatch " + detail::shape_str(a.rows(), a.cols()) + " vs " +
                detail::shape_str(b.rows(), b.cols()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.rows(), a.cols());
  for (size_t i = 0; i < out.count(); ++i) out.value()[i] = a.value()[i] + b.value()[i];
  if (detail::record<T>({&a, &b})) {
    auto an = a.ptr();
    auto bn = b.ptr();
    detail::attach(out, {&a, &b}, [an, bn](Node<T>& self) {
      if (an->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error("sub: shape mismatch " + detail::shape_str(a.rows(), a.cols()) + " vs " +
                detail::shape_str(b.rows(), b.cols()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.rows(), a.cols());
  for (size_t i = 0; i < out.count(); ++i) out.value()[i] = a.value()[i] - b.value()[i];
  if (detail::record<T>({&a, &b})) {
    auto an = a.ptr();
    auto bn = b.ptr();
    detail::attach(out, {&a, &b}, [an, bn](Node<T>& self) {
      if (an->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error("mul: shape mismatch " + detail::shape_str(a.rows(), a.cols()) + " vs " +
                detail::shape_str(b.rows(), b.cols()));
  }
  Tensor<T> out = Tensor<T>::zeros(a.rows(), a.cols());
  for (size_t i = 0; i < out.count(); ++i) out.value()[i] = a.value()[i] * b.value()[i];
  if (detail::record<T>({&a, &b})) {
    auto an = a.ptr();
    auto bn = b.ptr();
    detail::attach(out, {&a, &b}, [an, bn](Node<T>& self) {
      if (an->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
      if (bn->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    });
  }
  return out;
}

// Broadcast a 1 x C row over every row of x.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (v.rows() != 1 || v.cols() != x.cols()) {
    throw Error("add_rowvec: shape mismatch " + detail::shape_str(x.rows(), x.cols()) + " + " +
                detail::shape_str(v.rows(), v.cols()));
  }
  Tensor<T> out = Tensor<T>::zeros(x.rows(), x.cols());
  const int c = x.cols();
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < c; ++j)
      out.value()[static_cast<size_t>(i) * c + j] = x.value()[static_cast<size_t>(i) * c + j] + v.value()[j];
  if (detail::record<T>({&x, &v})) {
    auto xn = x.ptr();
    auto vn = v.ptr();
    detail::attach(out, {&x, &v}, [xn, vn](Node<T>& self) {
      const int c = self.cols;
      if (xn->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
      if (vn->requires_grad)
        for (int i = 0; i < self.rows; ++i)
          for (int j = 0; j < c; ++j) vn->grad[j] += self.grad[static_cast<size_t>(i) * c + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (v.rows() != 1 || v.cols() != x.cols()) {
    throw Error("sub_rowvec: shape mismatch " + detail::shape_str(x.rows(), x.cols()) + " - " +
                detail::shape_str(v.rows(), v.cols()));
  }
  Tensor<T> out = Tensor<T>::zeros(x.rows(), x.cols());
  const int c = x.cols();
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < c; ++j)
      out.value()[static_cast<size_t>(i) * c + j] = x.value()[static_cast<size_t>(i) * c + j] - v.value()[j];
  if (detail::record<T>({&x, &v})) {
    auto xn = x.ptr();
    auto vn = v.ptr();
    detail::attach(out, {&x, &v}, [xn, vn](Node<T>& self) {
      const int c = self.cols;
      if (xn->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
      if (vn->requires_grad)
        for (int i = 0; i < self.rows; ++i)
          for (int j = 0; j < c; ++j) vn->grad[j] -= self.grad[static_cast<size_t>(i) * c + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  Tensor<T> out = Tensor<T>::zeros(x.rows(), x.cols());
  const T ts = static_cast<T>(s);
  for (size_t i = 0; i < out.count(); ++i) out.value()[i] = x.value()[i] * ts;
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn, ts](Node<T>& self) {
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * ts;
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& x, double c) {
  Tensor<T> out = Tensor<T>::zeros(x.rows(), x.cols());
  const T tc = static_cast<T>(c);
  for (size_t i = 0; i < out.count(); ++i) out.value()[i] = x.value()[i] + tc;
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn](Node<T>& self) {
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    });
  }
  return out;
}

// max(0, x). Subgradient at exactly 0 is 0. Doubles as the loss hinge.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.rows(), x.cols());
  for (size_t i = 0; i < out.count(); ++i) out.value()[i] = x.value()[i] > T(0) ? x.value()[i] : T(0);
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn](Node<T>& self) {
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (xn->value[i] > T(0)) xn->grad[i] += self.grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.rows(), x.cols());
  for (size_t i = 0; i < out.count(); ++i) out.value()[i] = x.value()[i] * x.value()[i];
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn](Node<T>& self) {
      for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += T(2) * xn->value[i] * self.grad[i];
    });
  }
  return out;
}

// Elementwise sqrt; the derivative at 0 is taken as 0 (kink policy).
template <typename T>
Tensor<T> sqrt_elem(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.rows(), x.cols());
  for (size_t i = 0; i < out.count(); ++i) out.value()[i] = std::sqrt(x.value()[i]);
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn](Node<T>& self) {
      for (size_t i = 0; i < self.grad.size(); ++i)
        if (self.value[i] > T(0)) xn->grad[i] += self.grad[i] / (T(2) * self.value[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(1, 1);
  T s = T(0);
  for (size_t i = 0; i < x.count(); ++i) s += x.value()[i];
  out.value()[0] = s;
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn](Node<T>& self) {
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.count() == 0) throw Error("mean: empty tensor");
  Tensor<T> out = Tensor<T>::zeros(1, 1);
  T s = T(0);
  for (size_t i = 0; i < x.count(); ++i) s += x.value()[i];
  const T inv = T(1) / static_cast<T>(x.count());
  out.value()[0] = s * inv;
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn, inv](Node<T>& self) {
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += self.grad[0] * inv;
    });
  }
  return out;
}

// Column means: N x C -> 1 x C.
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  if (x.rows() == 0) throw Error("mean_rows: empty tensor");
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros(1, c);
  for (int i = 0; i < x.rows(); ++i)
    for (int j = 0; j < c; ++j) out.value()[j] += x.value()[static_cast<size_t>(i) * c + j];
  const T inv = T(1) / static_cast<T>(x.rows());
  for (int j = 0; j < c; ++j) out.value()[j] *= inv;
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn, inv](Node<T>& self) {
      const int c = self.cols;
      for (int i = 0; i < xn->rows; ++i)
        for (int j = 0; j < c; ++j) xn->grad[static_cast<size_t>(i) * c + j] += self.grad[j] * inv;
    });
  }
  return out;
}

// Row-wise softmax with max-subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const int c = x.cols();
  if (c < 1) throw Error("softmax_rows: empty rows");
  Tensor<T> out = Tensor<T>::zeros(x.rows(), c);
  for (int i = 0; i < x.rows(); ++i) {
    const T* xr = x.value().data() + static_cast<size_t>(i) * c;
    T* orow = out.value().data() + static_cast<size_t>(i) * c;
    T mx = xr[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    T s = T(0);
    for (int j = 0; j < c; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      s += orow[j];
    }
    for (int j = 0; j < c; ++j) orow[j] /= s;
  }
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn](Node<T>& self) {
      const int c = self.cols;
      for (int i = 0; i < self.rows; ++i) {
        const T* p = self.value.data() + static_cast<size_t>(i) * c;
        const T* g = self.grad.data() + static_cast<size_t>(i) * c;
        T dot = T(0);
        for (int j = 0; j < c; ++j) dot += g[j] * p[j];
        T* gx = xn->grad.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) gx[j] += p[j] * (g[j] - dot);
      }
    });
  }
  return out;
}

// Max over fixed-size row groups: (G*group) x C -> G x C. Ties go to the
// first maximal row in the group (subgradient splits to one winner).
template <typename T>
Tensor<T> group_max(const Tensor<T>& x, int group) {
  if (group < 1 || x.rows() % group != 0) {
    throw Error("group_max: rows " + std::to_string(x.rows()) + " not divisible by group " +
                std::to_string(group));
  }
  const int groups = x.rows() / group;
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros(groups, c);
  std::vector<int> argmax(static_cast<size_t>(groups) * c);
  for (int gidx = 0; gidx < groups; ++gidx) {
    for (int j = 0; j < c; ++j) {
      int best = gidx * group;
      T bv = x.value()[static_cast<size_t>(best) * c + j];
      for (int r = 1; r < group; ++r) {
        const int row = gidx * group + r;
        const T v = x.value()[static_cast<size_t>(row) * c + j];
        if (v > bv) {
          bv = v;
          best = row;
        }
      }
      out.value()[static_cast<size_t>(gidx) * c + j] = bv;
      argmax[static_cast<size_t>(gidx) * c + j] = best;
    }
  }
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn, argmax = std::move(argmax)](Node<T>& self) {
      const int c = self.cols;
      for (size_t i = 0; i < self.grad.size(); ++i) {
        xn->grad[static_cast<size_t>(argmax[i]) * c + i % c] += self.grad[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows()) {
    throw Error("concat_cols: row mismatch " + detail::shape_str(a.rows(), a.cols()) + " vs " +
                detail::shape_str(b.rows(), b.cols()));
  }
  const int ca = a.cols(), cb = b.cols();
  Tensor<T> out = Tensor<T>::zeros(a.rows(), ca + cb);
  for (int i = 0; i < a.rows(); ++i) {
    T* orow = out.value().data() + static_cast<size_t>(i) * (ca + cb);
    std::copy_n(a.value().data() + static_cast<size_t>(i) * ca, ca, orow);
    std::copy_n(b.value().data() + static_cast<size_t>(i) * cb, cb, orow + ca);
  }
  if (detail::record<T>({&a, &b})) {
    auto an = a.ptr();
    auto bn = b.ptr();
    detail::attach(out, {&a, &b}, [an, bn, ca, cb](Node<T>& self) {
      for (int i = 0; i < self.rows; ++i) {
        const T* g = self.grad.data() + static_cast<size_t>(i) * (ca + cb);
        if (an->requires_grad) {
          T* ga = an->grad.data() + static_cast<size_t>(i) * ca;
          for (int j = 0; j < ca; ++j) ga[j] += g[j];
        }
        if (bn->requires_grad) {
          T* gb = bn->grad.data() + static_cast<size_t>(i) * cb;
          for (int j = 0; j < cb; ++j) gb[j] += g[ca + j];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  const int c = parts[0].cols();
  int rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw Error("concat_rows: column mismatch");
    rows += p.rows();
  }
  Tensor<T> out = Tensor<T>::zeros(rows, c);
  size_t w = 0;
  for (const auto& p : parts) {
    std::copy(p.value().begin(), p.value().end(), out.value().begin() + w);
    w += p.count();
  }
  bool rec = grad_mode_flag();
  if (rec) {
    rec = false;
    for (const auto& p : parts)
      if (p.requires_grad()) rec = true;
  }
  if (rec) {
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.ptr());
    out.node()->requires_grad = true;
    for (const auto& p : parts)
      if (p.requires_grad()) out.node()->parents.push_back(p.ptr());
    out.node()->backfn = [nodes](Node<T>& self) {
      size_t off = 0;
      for (const auto& n : nodes) {
        if (n->requires_grad) {
          for (size_t i = 0; i < n->grad.size(); ++i) n->grad[i] += self.grad[off + i];
        }
        off += n->value.size();
      }
    };
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros(static_cast<int>(idx.size()), c);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.rows()) throw Error("gather_rows: index out of range");
    std::copy_n(x.value().data() + static_cast<size_t>(idx[i]) * c, c,
                out.value().data() + i * c);
  }
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn, idx](Node<T>& self) {
      const int c = self.cols;
      for (size_t i = 0; i < idx.size(); ++i) {
        const T* g = self.grad.data() + i * c;
        T* gx = xn->grad.data() + static_cast<size_t>(idx[i]) * c;
        for (int j = 0; j < c; ++j) gx[j] += g[j];
      }
    });
  }
  return out;
}

// Row Euclidean norms: N x C -> N x 1. Zero rows get subgradient 0.
template <typename T>
Tensor<T> rows_norm(const Tensor<T>& x) {
  const int c = x.cols();
  Tensor<T> out = Tensor<T>::zeros(x.rows(), 1);
  for (int i = 0; i < x.rows(); ++i) {
    T s = T(0);
    const T* xr = x.value().data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) s += xr[j] * xr[j];
    out.value()[i] = std::sqrt(s);
  }
  if (detail::record<T>({&x})) {
    auto xn = x.ptr();
    detail::attach(out, {&x}, [xn](Node<T>& self) {
      const int c = xn->cols;
      for (int i = 0; i < self.rows; ++i) {
        const T norm = self.value[i];
        if (norm <= T(0)) continue;
        const T g = self.grad[i] / norm;
        const T* xr = xn->value.data() + static_cast<size_t>(i) * c;
        T* gx = xn->grad.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) gx[j] += g * xr[j];
      }
    });
  }
  return out;
}

// Weighted gather-sum per destination row (inverse-distance interpolation).
template <typename T>
Tensor<T> interp_rows(const Tensor<T>& src, const pts::InterpPlan& plan) {
  const int c = src.cols();
  Tensor<T> out = Tensor<T>::zeros(plan.n_dst, c);
  for (int d = 0; d < plan.n_dst; ++d) {
    T* orow = out.value().data() + static_cast<size_t>(d) * c;
    for (int j = 0; j < plan.k; ++j) {
      const int idx = plan.indices[static_cast<size_t>(d) * plan.k + j];
      const T w = static_cast<T>(plan.weights[static_cast<size_t>(d) * plan.k + j]);
      const T* srow = src.value().data() + static_cast<size_t>(idx) * c;
      for (int f = 0; f < c; ++f) orow[f] += w * srow[f];
    }
  }
  if (detail::record<T>({&src})) {
    auto sn = src.ptr();
    detail::attach(out, {&src}, [sn, plan](Node<T>& self) {
      const int c = self.cols;
      for (int d = 0; d < plan.n_dst; ++d) {
        const T* g = self.grad.data() + static_cast<size_t>(d) * c;
        for (int j = 0; j < plan.k; ++j) {
          const int idx = plan.indices[static_cast<size_t>(d) * plan.k + j];
          const T w = static_cast<T>(plan.weights[static_cast<size_t>(d) * plan.k + j]);
          T* gs = sn->grad.data() + static_cast<size_t>(idx) * c;
          for (int f = 0; f < c; ++f) gs[f] += w * g[f];
        }
      }
    });
  }
  return out;
}

// Per-feature batch normalization over all rows. Running statistics live in
// plain (non-gradient) tensors and are updated in train mode only; eval mode
// is a pure affine map using the frozen statistics.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& running_mean, Tensor<T>& running_var, bool train,
                    double momentum = 0.9, double eps = 1e-5) {
  const int n = x.rows(), c = x.cols();
  if (gamma.cols() != c || beta.cols() != c || running_mean.cols() != c || running_var.cols() != c) {
    throw Error("batchnorm: feature width mismatch at " + detail::shape_str(n, c));
  }
  if (n < 1) throw Error("batchnorm: empty batch");

  Tensor<T> out = Tensor<T>::zeros(n, c);
  std::vector<T> inv_std(c), xhat;
  if (train) {
    std::vector<T> mu(c, T(0)), var(c, T(0));
    for (int i = 0; i < n; ++i) {
      const T* xr = x.value().data() + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) mu[j] += xr[j];
    }
    for (int j = 0; j < c; ++j) mu[j] /= static_cast<T>(n);
    for (int i = 0; i < n; ++i) {
      const T* xr = x.value().data() + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) {
        const T d = xr[j] - mu[j];
        var[j] += d * d;
      }
    }
    for (int j = 0; j < c; ++j) var[j] /= static_cast<T>(n);
    const T mom = static_cast<T>(momentum);
    for (int j = 0; j < c; ++j) {
      running_mean.value()[j] = mom * running_mean.value()[j] + (T(1) - mom) * mu[j];
      running_var.value()[j] = mom * running_var.value()[j] + (T(1) - mom) * var[j];
      inv_std[j] = T(1) / std::sqrt(var[j] + static_cast<T>(eps));
    }
    xhat.resize(static_cast<size_t>(n) * c);
    for (int i = 0; i < n; ++i) {
      const T* xr = x.value().data() + static_cast<size_t>(i) * c;
      T* hr = xhat.data() + static_cast<size_t>(i) * c;
      T* orow = out.value().data() + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) {
        hr[j] = (xr[j] - mu[j]) * inv_std[j];
        orow[j] = gamma.value()[j] * hr[j] + beta.value()[j];
      }
    }
  } else {
    for (int j = 0; j < c; ++j) {
      inv_std[j] = T(1) / std::sqrt(running_var.value()[j] + static_cast<T>(eps));
    }
    for (int i = 0; i < n; ++i) {
      const T* xr = x.value().data() + static_cast<size_t>(i) * c;
      T* orow = out.value().data() + static_cast<size_t>(i) * c;
      for (int j = 0; j < c; ++j) {
        orow[j] = gamma.value()[j] * (xr[j] - running_mean.value()[j]) * inv_std[j] + beta.value()[j];
      }
    }
  }

  if (detail::record<T>({&x, &gamma, &beta})) {
    auto xn = x.ptr();
    auto gn = gamma.ptr();
    auto bn = beta.ptr();
    if (train) {
      detail::attach(
          out, {&x, &gamma, &beta},
          [xn, gn, bn, inv_std = std::move(inv_std), xhat = std::move(xhat)](Node<T>& self) {
            const int n = self.rows, c = self.cols;
            const T invn = T(1) / static_cast<T>(n);
            std::vector<T> gsum(c, T(0)), gxsum(c, T(0));
            for (int i = 0; i < n; ++i) {
              const T* g = self.grad.data() + static_cast<size_t>(i) * c;
              const T* h = xhat.data() + static_cast<size_t>(i) * c;
              for (int j = 0; j < c; ++j) {
                gsum[j] += g[j];
                gxsum[j] += g[j] * h[j];
              }
            }
            if (bn->requires_grad)
              for (int j = 0; j < c; ++j) bn->grad[j] += gsum[j];
            if (gn->requires_grad)
              for (int j = 0; j < c; ++j) gn->grad[j] += gxsum[j];
            if (xn->requires_grad) {
              for (int i = 0; i < n; ++i) {
                const T* g = self.grad.data() + static_cast<size_t>(i) * c;
                const T* h = xhat.data() + static_cast<size_t>(i) * c;
                T* gx = xn->grad.data() + static_cast<size_t>(i) * c;
                for (int j = 0; j < c; ++j) {
                  gx[j] += gn->value[j] * inv_std[j] *
                           (g[j] - gsum[j] * invn - h[j] * gxsum[j] * invn);
                }
              }
            }
          });
    } else {
      auto rm = running_mean.ptr();
      detail::attach(out, {&x, &gamma, &beta},
                     [xn, gn, bn, rm, inv_std = std::move(inv_std)](Node<T>& self) {
                       const int n = self.rows, c = self.cols;
                       for (int i = 0; i < n; ++i) {
                         const T* g = self.grad.data() + static_cast<size_t>(i) * c;
                         const T* xr = xn->value.data() + static_cast<size_t>(i) * c;
                         for (int j = 0; j < c; ++j) {
                           if (xn->requires_grad) {
                             xn->grad[static_cast<size_t>(i) * c + j] +=
                                 g[j] * gn->value[j] * inv_std[j];
                           }
                           if (gn->requires_grad) {
                             gn->grad[j] += g[j] * (xr[j] - rm->value[j]) * inv_std[j];
                           }
                           if (bn->requires_grad) bn->grad[j] += g[j];
                         }
                       }
                     });
    }
  }
  return out;
}

// Mean over rows of -log softmax(logits)[label]; fused for stability.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const int n = logits.rows(), c = logits.cols();
  if (static_cast<int>(labels.size()) != n) {
    throw Error("softmax_cross_entropy: label count mismatch");
  }
  std::vector<T> probs(static_cast<size_t>(n) * c);
  T total = T(0);
  for (int i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= c) throw Error("softmax_cross_entropy: label out of range");
    const T* z = logits.value().data() + static_cast<size_t>(i) * c;
    T mx = z[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    T s = T(0);
    T* p = probs.data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) {
      p[j] = std::exp(z[j] - mx);
      s += p[j];
    }
    for (int j = 0; j < c; ++j) p[j] /= s;
    total += std::log(s) + mx - z[y];
  }
  Tensor<T> out = Tensor<T>::zeros(1, 1);
  out.value()[0] = total / static_cast<T>(n);
  if (detail::record<T>({&logits})) {
    auto ln = logits.ptr();
    detail::attach(out, {&logits}, [ln, labels, probs = std::move(probs)](Node<T>& self) {
      const int n = ln->rows, c = ln->cols;
      const T g = self.grad[0] / static_cast<T>(n);
      for (int i = 0; i < n; ++i) {
        const T* p = probs.data() + static_cast<size_t>(i) * c;
        T* gl = ln->grad.data() + static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) gl[j] += g * (p[j] - (j == labels[i] ? T(1) : T(0)));
      }
    });
  }
  return out;
}

// ---- backward pass ----

template <typename T>
void zero_grad(const std::vector<Tensor<T>>& params) {
  for (const auto& p : params) p.node()->grad.assign(p.count(), T(0));
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.count() != 1) throw Error("backward: loss must be a scalar");

  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node<T>* n : order) n->grad.assign(n->value.size(), T(0));
  loss.node()->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backfn) (*it)->backfn(**it);
  }
}

// ---- gradient checking ----

// Central-difference check of d f / d wrt for every component of every listed
// tensor. Relative error denominator is max(|analytic|, |numeric|, 1e-8).
template <typename T>
double gradcheck_many(const std::function<Tensor<T>()>& f, const std::vector<Tensor<T>>& wrt,
                      double h) {
  zero_grad(wrt);
  Tensor<T> y = f();
  backward(y);
  std::vector<std::vector<T>> analytic;
  analytic.reserve(wrt.size());
  for (const auto& p : wrt) analytic.push_back(p.grad());

  double max_rel = 0.0;
  NoGradGuard ng;
  for (size_t pi = 0; pi < wrt.size(); ++pi) {
    auto& vals = wrt[pi].node()->value;
    for (size_t i = 0; i < vals.size(); ++i) {
      const T orig = vals[i];
      vals[i] = orig + static_cast<T>(h);
      const double fp = static_cast<double>(f().item());
      vals[i] = orig - static_cast<T>(h);
      const double fm = static_cast<double>(f().item());
      vals[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = static_cast<double>(analytic[pi][i]);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

template <typename T>
double gradcheck(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x,
                 double h) {
  Tensor<T> xi = x;
  xi.set_requires_grad(true);
  return gradcheck_many<T>([&]() { return f(xi); }, {xi}, h);
}

}  // namespace branchtopo::ad
