#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "swayflow/common.hpp"
#include "swayflow/tensor.hpp"

namespace swayflow {

namespace detail {

// Materializes an op result and registers the backward closure on the
// active graph when any input wants gradients.
template <class S>
Tensor<S> finish_op(Shape out_shape, std::vector<S> out_value,
                    std::initializer_list<Tensor<S>> inputs,
                    std::function<void(Node<S>&)> backward) {
  auto out = std::make_shared<Node<S>>();
  out->shape = std::move(out_shape);
  out->value = std::move(out_value);
  auto* g = Graph<S>::current();
  if (g != nullptr) {
    bool want = false;
    for (const auto& t : inputs) want = want || t.impl()->requires_grad;
    if (want && backward) {
      out->requires_grad = true;
      std::vector<NodePtr<S>> in_nodes;
      in_nodes.reserve(inputs.size());
      for (const auto& t : inputs) in_nodes.push_back(t.impl());
      auto fn = std::move(backward);
      g->record(out, std::move(in_nodes), [fn, out]() { fn(*out); });
    }
  }
  return Tensor<S>::from_node(std::move(out));
}

template <class S>
void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    fail(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
}

template <class S>
void check_rank(const char* op, const Tensor<S>& t, int64_t rank) {
  if (t.rank() != rank)
    fail(op, ": expected rank ", rank, " tensor, got shape ", shape_str(t.shape()));
}

inline double norm_cdf(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }
inline double norm_pdf(double x) { return std::exp(-0.5 * x * x) * 0.39894228040143267794; }

// Raw permutation of a dense buffer; shared by forward and backward paths.
template <class S>
std::vector<S> permute_raw(const Shape& in_shape, const std::vector<S>& in,
                           const std::vector<int64_t>& axes, Shape* out_shape) {
  const int64_t rank = static_cast<int64_t>(in_shape.size());
  Shape oshape(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) oshape[i] = in_shape[axes[i]];
  auto in_strides = strides_of(in_shape);
  std::vector<int64_t> gather(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) gather[i] = in_strides[axes[i]];
  auto out_strides = strides_of(oshape);
  std::vector<S> out(in.size());
  const int64_t n = static_cast<int64_t>(in.size());
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int64_t d = 0; d < rank; ++d) {
      int64_t idx = rem / out_strides[d];
      rem -= idx * out_strides[d];
      src += idx * gather[d];
    }
    out[o] = in[src];
  }
  if (out_shape) *out_shape = std::move(oshape);
  return out;
}

// C[m,n] += A[m,k] @ B[k,n]
template <class S>
void matmul_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    S* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      const S* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] @ B^T where B is [k,n]  (i.e. rows of A dotted with rows of B)
template <class S>
void matmul_nt_acc(const S* a, const S* b, S* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * n;
    S* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const S* brow = b + p * n;
      S acc = S(0);
      for (int64_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k,n] += A^T @ B where A is [m,k], B is [m,n]
template <class S>
void matmul_tn_acc(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const S* arow = a + i * k;
    const S* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const S av = arow[p];
      if (av == S(0)) continue;
      S* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ----- elementwise arithmetic -----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("add", a, b);
  std::vector<S> v(a.data());
  const auto& bv = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += bv[i];
  auto an = a.impl(), bn = b.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a, b}, [an, bn](detail::Node<S>& out) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] += out.grad[i];
    }
  });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<S> v(a.data());
  const auto& bv = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= bv[i];
  auto an = a.impl(), bn = b.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a, b}, [an, bn](detail::Node<S>& out) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i) bn->grad[i] -= out.grad[i];
    }
  });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<S> v(a.data());
  const auto& bv = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  auto an = a.impl(), bn = b.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a, b}, [an, bn](detail::Node<S>& out) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        an->grad[i] += out.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        bn->grad[i] += out.grad[i] * an->value[i];
    }
  });
}

template <class S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape("div", a, b);
  std::vector<S> v(a.data());
  const auto& bv = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] /= bv[i];
  auto an = a.impl(), bn = b.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a, b}, [an, bn](detail::Node<S>& out) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        an->grad[i] += out.grad[i] / bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < out.grad.size(); ++i)
        bn->grad[i] -= out.grad[i] * out.value[i] / bn->value[i];
    }
  });
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, double c) {
  std::vector<S> v(a.data());
  for (auto& x : v) x += static_cast<S>(c);
  auto an = a.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a}, [an](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
  });
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, double c) {
  std::vector<S> v(a.data());
  const S cs = static_cast<S>(c);
  for (auto& x : v) x *= cs;
  auto an = a.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a}, [an, cs](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += cs * out.grad[i];
  });
}

template <class S>
Tensor<S> neg(const Tensor<S>& a) {
  return mul_scalar(a, -1.0);
}

template <class S>
Tensor<S> sqrt(const Tensor<S>& a) {
  std::vector<S> v(a.data());
  for (auto& x : v) x = static_cast<S>(std::sqrt(static_cast<double>(x)));
  auto an = a.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a}, [an](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i)
      an->grad[i] += out.grad[i] * S(0.5) / out.value[i];
  });
}

// ----- matrix products -----

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_rank("matmul", a, 2);
  detail::check_rank("matmul", b, 2);
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    fail("matmul: inner dimensions differ, ", shape_str(a.shape()), " @ ",
         shape_str(b.shape()));
  std::vector<S> v(static_cast<std::size_t>(m * n), S(0));
  detail::matmul_acc(a.data().data(), b.data().data(), v.data(), m, k, n);
  auto an = a.impl(), bn = b.impl();
  return detail::finish_op<S>({m, n}, std::move(v), {a, b},
                              [an, bn, m, k, n](detail::Node<S>& out) {
    if (an->requires_grad) {
      an->ensure_grad();
      // gA += gC @ B^T
      detail::matmul_nt_acc(out.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      // gB += A^T @ gC
      detail::matmul_tn_acc(an->value.data(), out.grad.data(), bn->grad.data(), m, k, n);
    }
  });
}

// Batched matmul over matching leading batch dimension.
template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_rank("bmm", a, 3);
  detail::check_rank("bmm", b, 3);
  const int64_t bsz = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bsz || b.dim(1) != k)
    fail("bmm: incompatible shapes ", shape_str(a.shape()), " @ ", shape_str(b.shape()));
  std::vector<S> v(static_cast<std::size_t>(bsz * m * n), S(0));
  for (int64_t t = 0; t < bsz; ++t)
    detail::matmul_acc(a.data().data() + t * m * k, b.data().data() + t * k * n,
                       v.data() + t * m * n, m, k, n);
  auto an = a.impl(), bn = b.impl();
  return detail::finish_op<S>({bsz, m, n}, std::move(v), {a, b},
                              [an, bn, bsz, m, k, n](detail::Node<S>& out) {
    for (int64_t t = 0; t < bsz; ++t) {
      if (an->requires_grad) {
        an->ensure_grad();
        detail::matmul_nt_acc(out.grad.data() + t * m * n, bn->value.data() + t * k * n,
                              an->grad.data() + t * m * k, m, n, k);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::matmul_tn_acc(an->value.data() + t * m * k, out.grad.data() + t * m * n,
                              bn->grad.data() + t * k * n, m, k, n);
      }
    }
  });
}

// ----- movement ops -----

template <class S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int64_t>& axes) {
  const int64_t rank = a.rank();
  if (static_cast<int64_t>(axes.size()) != rank)
    fail("permute: axes ", shape_str(Shape(axes.begin(), axes.end())),
         " do not match rank of shape ", shape_str(a.shape()));
  std::vector<bool> seen(axes.size(), false);
  for (int64_t ax : axes) {
    if (ax < 0 || ax >= rank || seen[ax]) fail("permute: invalid axis list");
    seen[ax] = true;
  }
  Shape oshape;
  std::vector<S> v = detail::permute_raw(a.shape(), a.data(), axes, &oshape);
  auto an = a.impl();
  std::vector<int64_t> inverse(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = static_cast<int64_t>(i);
  Shape saved = oshape;
  return detail::finish_op<S>(std::move(oshape), std::move(v), {a},
                              [an, inverse, saved](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    std::vector<S> g = detail::permute_raw(saved, out.grad, inverse, nullptr);
    for (std::size_t i = 0; i < g.size(); ++i) an->grad[i] += g[i];
  });
}

// Swaps the last two axes.
template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() < 2)
    fail("transpose: requires rank >= 2, got shape ", shape_str(a.shape()));
  std::vector<int64_t> axes(a.rank());
  for (int64_t i = 0; i < a.rank(); ++i) axes[i] = i;
  std::swap(axes[a.rank() - 2], axes[a.rank() - 1]);
  return permute(a, axes);
}

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape new_shape) {
  validate_shape(new_shape);
  if (numel(new_shape) != a.numel())
    fail("reshape: cannot view ", shape_str(a.shape()), " as ", shape_str(new_shape),
         " (element counts differ)");
  std::vector<S> v(a.data());
  auto an = a.impl();
  return detail::finish_op<S>(std::move(new_shape), std::move(v), {a},
                              [an](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) an->grad[i] += out.grad[i];
  });
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int64_t axis) {
  if (parts.empty()) fail("concat: needs at least one tensor");
  const int64_t rank = parts[0].rank();
  if (axis < 0 || axis >= rank) fail("concat: axis ", axis, " out of range for rank ", rank);
  Shape oshape = parts[0].shape();
  int64_t total_axis = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) fail("concat: rank mismatch");
    for (int64_t d = 0; d < rank; ++d)
      if (d != axis && p.dim(d) != oshape[d])
        fail("concat: shape ", shape_str(p.shape()), " incompatible with ",
             shape_str(oshape), " along axis ", axis);
    total_axis += p.dim(axis);
  }
  oshape[axis] = total_axis;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= oshape[d];
  for (int64_t d = axis + 1; d < rank; ++d) inner *= oshape[d];
  std::vector<S> v(static_cast<std::size_t>(numel(oshape)));
  const int64_t out_row = total_axis * inner;
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t mid = p.dim(axis) * inner;
    const auto& pv = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(pv.begin() + o * mid, pv.begin() + (o + 1) * mid,
                v.begin() + o * out_row + offset);
    offset += mid;
  }
  std::vector<detail::NodePtr<S>> nodes;
  std::vector<int64_t> mids;
  for (const auto& p : parts) {
    nodes.push_back(p.impl());
    mids.push_back(p.dim(axis) * inner);
  }
  auto out = std::make_shared<detail::Node<S>>();
  out->shape = oshape;
  out->value = std::move(v);
  auto* g = Graph<S>::current();
  bool want = false;
  for (const auto& n : nodes) want = want || n->requires_grad;
  if (g != nullptr && want) {
    out->requires_grad = true;
    auto backward = [nodes, mids, outer, out_row](detail::Node<S>& o) {
      int64_t off = 0;
      for (std::size_t t = 0; t < nodes.size(); ++t) {
        const int64_t mid = mids[t];
        if (nodes[t]->requires_grad) {
          nodes[t]->ensure_grad();
          for (int64_t r = 0; r < outer; ++r)
            for (int64_t i = 0; i < mid; ++i)
              nodes[t]->grad[r * mid + i] += o.grad[r * out_row + off + i];
        }
        off += mid;
      }
    };
    auto out_copy = out;
    g->record(out, nodes, [backward, out_copy]() { backward(*out_copy); });
  }
  return Tensor<S>::from_node(std::move(out));
}

template <class S>
Tensor<S> slice(const Tensor<S>& a, int64_t axis, int64_t start, int64_t length) {
  const int64_t rank = a.rank();
  if (axis < 0 || axis >= rank) fail("slice: axis ", axis, " out of range for rank ", rank);
  if (start < 0 || length < 0 || start + length > a.dim(axis))
    fail("slice: range [", start, ", ", start + length, ") outside axis ", axis,
         " of shape ", shape_str(a.shape()));
  Shape oshape = a.shape();
  oshape[axis] = length;
  int64_t outer = 1, inner = 1;
  for (int64_t d = 0; d < axis; ++d) outer *= a.dim(d);
  for (int64_t d = axis + 1; d < rank; ++d) inner *= a.dim(d);
  const int64_t in_row = a.dim(axis) * inner;
  const int64_t out_row = length * inner;
  std::vector<S> v(static_cast<std::size_t>(outer * out_row));
  const auto& av = a.data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(av.begin() + o * in_row + start * inner,
              av.begin() + o * in_row + (start + length) * inner, v.begin() + o * out_row);
  auto an = a.impl();
  return detail::finish_op<S>(std::move(oshape), std::move(v), {a},
                              [an, outer, inner, in_row, out_row, start](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < out_row; ++i)
        an->grad[o * in_row + start * inner + i] += out.grad[o * out_row + i];
  });
}

// Broadcasts `a` to `target` (right-aligned; each axis must match or be 1).
template <class S>
Tensor<S> expand(const Tensor<S>& a, const Shape& target) {
  validate_shape(target);
  const int64_t ra = a.rank(), rt = static_cast<int64_t>(target.size());
  if (ra > rt)
    fail("expand: rank of ", shape_str(a.shape()), " exceeds target ", shape_str(target));
  const int64_t pad = rt - ra;
  for (int64_t d = 0; d < ra; ++d)
    if (a.dim(d) != 1 && a.dim(d) != target[pad + d])
      fail("expand: cannot broadcast ", shape_str(a.shape()), " to ", shape_str(target));
  auto in_strides = strides_of(a.shape());
  std::vector<int64_t> gather(rt, 0);
  for (int64_t d = 0; d < ra; ++d)
    gather[pad + d] = (a.dim(d) == 1) ? 0 : in_strides[d];
  auto out_strides = strides_of(target);
  const int64_t n = numel(target);
  std::vector<S> v(static_cast<std::size_t>(n));
  const auto& av = a.data();
  for (int64_t o = 0; o < n; ++o) {
    int64_t rem = o, src = 0;
    for (int64_t d = 0; d < rt; ++d) {
      int64_t idx = rem / out_strides[d];
      rem -= idx * out_strides[d];
      src += idx * gather[d];
    }
    v[o] = av[src];
  }
  auto an = a.impl();
  return detail::finish_op<S>(Shape(target), std::move(v), {a},
                              [an, gather, out_strides, rt, n](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t o = 0; o < n; ++o) {
      int64_t rem = o, src = 0;
      for (int64_t d = 0; d < rt; ++d) {
        int64_t idx = rem / out_strides[d];
        rem -= idx * out_strides[d];
        src += idx * gather[d];
      }
      an->grad[src] += out.grad[o];
    }
  });
}

// ----- reductions -----

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  S acc = S(0);
  for (S x : a.data()) acc += x;
  auto an = a.impl();
  return detail::finish_op<S>({1}, {acc}, {a}, [an](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const S g = out.grad[0];
    for (auto& gi : an->grad) gi += g;
  });
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  if (a.numel() == 0) fail("mean: empty tensor");
  S acc = S(0);
  for (S x : a.data()) acc += x;
  const S inv = S(1) / static_cast<S>(a.numel());
  auto an = a.impl();
  return detail::finish_op<S>({1}, {acc * inv}, {a}, [an, inv](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    const S g = out.grad[0] * inv;
    for (auto& gi : an->grad) gi += g;
  });
}

// ----- activations -----

// Row-wise softmax over the last axis, max-shifted for stability.
template <class S>
Tensor<S> softmax(const Tensor<S>& a) {
  if (a.rank() < 1 || a.dim(a.rank() - 1) == 0)
    fail("softmax: needs a non-empty last axis, got shape ", shape_str(a.shape()));
  const int64_t cols = a.dim(a.rank() - 1);
  const int64_t rows = a.numel() / cols;
  std::vector<S> v(a.data());
  for (int64_t r = 0; r < rows; ++r) {
    S* row = v.data() + r * cols;
    S m = row[0];
    for (int64_t j = 1; j < cols; ++j) m = std::max(m, row[j]);
    S s = S(0);
    for (int64_t j = 0; j < cols; ++j) {
      row[j] = static_cast<S>(std::exp(static_cast<double>(row[j] - m)));
      s += row[j];
    }
    const S inv = S(1) / s;
    for (int64_t j = 0; j < cols; ++j) row[j] *= inv;
  }
  auto an = a.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a},
                              [an, rows, cols](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const S* y = out.value.data() + r * cols;
      const S* g = out.grad.data() + r * cols;
      S dot = S(0);
      for (int64_t j = 0; j < cols; ++j) dot += g[j] * y[j];
      S* gx = an->grad.data() + r * cols;
      for (int64_t j = 0; j < cols; ++j) gx[j] += (g[j] - dot) * y[j];
    }
  });
}

// Exact Gaussian-CDF form: x * Phi(x).
template <class S>
Tensor<S> gelu(const Tensor<S>& a) {
  std::vector<S> v(a.data());
  for (auto& x : v) {
    const double xd = static_cast<double>(x);
    x = static_cast<S>(xd * detail::norm_cdf(xd));
  }
  auto an = a.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a}, [an](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      const double x = static_cast<double>(an->value[i]);
      const double d = detail::norm_cdf(x) + x * detail::norm_pdf(x);
      an->grad[i] += out.grad[i] * static_cast<S>(d);
    }
  });
}

template <class S>
Tensor<S> silu(const Tensor<S>& a) {
  std::vector<S> v(a.data());
  for (auto& x : v) {
    const double xd = static_cast<double>(x);
    x = static_cast<S>(xd / (1.0 + std::exp(-xd)));
  }
  auto an = a.impl();
  return detail::finish_op<S>(a.shape(), std::move(v), {a}, [an](detail::Node<S>& out) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < out.grad.size(); ++i) {
      const double x = static_cast<double>(an->value[i]);
      const double s = 1.0 / (1.0 + std::exp(-x));
      an->grad[i] += out.grad[i] * static_cast<S>(s * (1.0 + x * (1.0 - s)));
    }
  });
}

// ----- layer norm -----

namespace detail {

template <class S>
Tensor<S> layer_norm_impl(const Tensor<S>& x, const Tensor<S>* gamma,
                          const Tensor<S>* beta, double eps) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) == 0)
    fail("layer_norm: needs a non-empty last axis, got shape ", shape_str(x.shape()));
  const int64_t cols = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / cols;
  if (gamma) {
    if (gamma->numel() != cols || beta == nullptr || beta->numel() != cols)
      fail("layer_norm: affine parameters must have ", cols, " elements");
  }
  std::vector<S> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<S> rstd(static_cast<std::size_t>(rows));
  std::vector<S> v(static_cast<std::size_t>(x.numel()));
  const auto& xv = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = xv.data() + r * cols;
    double m = 0.0;
    for (int64_t j = 0; j < cols; ++j) m += static_cast<double>(row[j]);
    m /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      const double d = static_cast<double>(row[j]) - m;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = static_cast<S>(rs);
    for (int64_t j = 0; j < cols; ++j) {
      const S h = static_cast<S>((static_cast<double>(row[j]) - m) * rs);
      xhat[r * cols + j] = h;
      v[r * cols + j] =
          gamma ? h * gamma->data()[j] + beta->data()[j] : h;
    }
  }
  auto xn = x.impl();
  detail::NodePtr<S> gn = gamma ? gamma->impl() : nullptr;
  detail::NodePtr<S> bn = beta ? beta->impl() : nullptr;
  auto backward = [xn, gn, bn, xhat, rstd, rows, cols](detail::Node<S>& out) {
    std::vector<S> gh(static_cast<std::size_t>(rows * cols));
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < cols; ++j)
        gh[r * cols + j] = gn ? out.grad[r * cols + j] * gn->value[j]
                              : out.grad[r * cols + j];
    if (gn && gn->requires_grad) {
      gn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cols; ++j)
          gn->grad[j] += out.grad[r * cols + j] * xhat[r * cols + j];
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < cols; ++j) bn->grad[j] += out.grad[r * cols + j];
    }
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        double a = 0.0, b = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
          a += static_cast<double>(gh[r * cols + j]);
          b += static_cast<double>(gh[r * cols + j]) *
               static_cast<double>(xhat[r * cols + j]);
        }
        a /= static_cast<double>(cols);
        b /= static_cast<double>(cols);
        for (int64_t j = 0; j < cols; ++j) {
          const double gx = static_cast<double>(rstd[r]) *
                            (static_cast<double>(gh[r * cols + j]) - a -
                             static_cast<double>(xhat[r * cols + j]) * b);
          xn->grad[r * cols + j] += static_cast<S>(gx);
        }
      }
    }
  };
  if (gamma)
    return detail::finish_op<S>(x.shape(), std::move(v), {x, *gamma, *beta},
                                std::move(backward));
  return detail::finish_op<S>(x.shape(), std::move(v), {x}, std::move(backward));
}

}  // namespace detail

// Normalizes the last axis to zero mean / unit variance (epsilon inside the
// square root), without learned affine parameters.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, double eps = 1e-6) {
  return detail::layer_norm_impl<S>(x, nullptr, nullptr, eps);
}

// Layer norm with learned per-channel gain and shift.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-6) {
  return detail::layer_norm_impl<S>(x, &gamma, &beta, eps);
}

// ----- embedding lookup -----

template <class S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int64_t>& ids) {
  detail::check_rank("embedding", table, 2);
  const int64_t vocab = table.dim(0), width = table.dim(1);
  const int64_t n = static_cast<int64_t>(ids.size());
  std::vector<S> v(static_cast<std::size_t>(n * width));
  const auto& tv = table.data();
  for (int64_t i = 0; i < n; ++i) {
    const int64_t id = ids[i];
    if (id < 0 || id >= vocab)
      fail("embedding: id ", id, " at position ", i, " outside table of size ", vocab);
    std::copy(tv.begin() + id * width, tv.begin() + (id + 1) * width,
              v.begin() + i * width);
  }
  auto tn = table.impl();
  return detail::finish_op<S>({n, width}, std::move(v), {table},
                              [tn, ids, width](detail::Node<S>& out) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (int64_t j = 0; j < width; ++j)
        tn->grad[ids[i] * width + j] += out.grad[static_cast<int64_t>(i) * width + j];
  });
}

// ----- 1-D convolutions (sequence-major layout: x is [T, C]) -----

namespace detail {

template <class S>
void check_conv_kernel(const char* op, int64_t k) {
  if (k % 2 == 0 || k < 1) fail(op, ": kernel size must be odd, got ", k);
}

}  // namespace detail

// Depthwise convolution with zero "same" padding. w is [C, K], bias [C].
template <class S>
Tensor<S> conv1d_depthwise(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias = nullptr) {
  detail::check_rank("conv1d_depthwise", x, 2);
  detail::check_rank("conv1d_depthwise", w, 2);
  const int64_t t_len = x.dim(0), ch = x.dim(1), k = w.dim(1);
  if (w.dim(0) != ch)
    fail("conv1d_depthwise: weight channels ", w.dim(0), " != input channels ", ch);
  detail::check_conv_kernel<S>("conv1d_depthwise", k);
  if (bias && bias->numel() != ch)
    fail("conv1d_depthwise: bias must have ", ch, " elements");
  const int64_t off = k / 2;
  std::vector<S> v(static_cast<std::size_t>(t_len * ch), S(0));
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (int64_t t = 0; t < t_len; ++t)
    for (int64_t c = 0; c < ch; ++c) {
      S acc = bias ? bias->data()[c] : S(0);
      for (int64_t j = 0; j < k; ++j) {
        const int64_t s = t + j - off;
        if (s >= 0 && s < t_len) acc += xv[s * ch + c] * wv[c * k + j];
      }
      v[t * ch + c] = acc;
    }
  auto xn = x.impl(), wn = w.impl();
  detail::NodePtr<S> bn = bias ? bias->impl() : nullptr;
  auto backward = [xn, wn, bn, t_len, ch, k, off](detail::Node<S>& out) {
    if (xn->requires_grad) xn->ensure_grad();
    if (wn->requires_grad) wn->ensure_grad();
    if (bn && bn->requires_grad) bn->ensure_grad();
    for (int64_t t = 0; t < t_len; ++t)
      for (int64_t c = 0; c < ch; ++c) {
        const S g = out.grad[t * ch + c];
        if (g == S(0)) continue;
        if (bn && bn->requires_grad) bn->grad[c] += g;
        for (int64_t j = 0; j < k; ++j) {
          const int64_t s = t + j - off;
          if (s < 0 || s >= t_len) continue;
          if (xn->requires_grad) xn->grad[s * ch + c] += g * wn->value[c * k + j];
          if (wn->requires_grad) wn->grad[c * k + j] += g * xn->value[s * ch + c];
        }
      }
  };
  if (bias)
    return detail::finish_op<S>({t_len, ch}, std::move(v), {x, w, *bias}, std::move(backward));
  return detail::finish_op<S>({t_len, ch}, std::move(v), {x, w}, std::move(backward));
}

// Dense convolution with zero "same" padding. w is [Cout, Cin, K], bias [Cout].
template <class S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>* bias = nullptr) {
  detail::check_rank("conv1d", x, 2);
  detail::check_rank("conv1d", w, 3);
  const int64_t t_len = x.dim(0), cin = x.dim(1);
  const int64_t cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != cin)
    fail("conv1d: weight input channels ", w.dim(1), " != input channels ", cin);
  detail::check_conv_kernel<S>("conv1d", k);
  if (bias && bias->numel() != cout) fail("conv1d: bias must have ", cout, " elements");
  const int64_t off = k / 2;
  std::vector<S> v(static_cast<std::size_t>(t_len * cout), S(0));
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (int64_t t = 0; t < t_len; ++t)
    for (int64_t o = 0; o < cout; ++o) {
      S acc = bias ? bias->data()[o] : S(0);
      for (int64_t j = 0; j < k; ++j) {
        const int64_t s = t + j - off;
        if (s < 0 || s >= t_len) continue;
        for (int64_t c = 0; c < cin; ++c)
          acc += xv[s * cin + c] * wv[(o * cin + c) * k + j];
      }
      v[t * cout + o] = acc;
    }
  auto xn = x.impl(), wn = w.impl();
  detail::NodePtr<S> bn = bias ? bias->impl() : nullptr;
  auto backward = [xn, wn, bn, t_len, cin, cout, k, off](detail::Node<S>& out) {
    if (xn->requires_grad) xn->ensure_grad();
    if (wn->requires_grad) wn->ensure_grad();
    if (bn && bn->requires_grad) bn->ensure_grad();
    for (int64_t t = 0; t < t_len; ++t)
      for (int64_t o = 0; o < cout; ++o) {
        const S g = out.grad[t * cout + o];
        if (g == S(0)) continue;
        if (bn && bn->requires_grad) bn->grad[o] += g;
        for (int64_t j = 0; j < k; ++j) {
          const int64_t s = t + j - off;
          if (s < 0 || s >= t_len) continue;
          for (int64_t c = 0; c < cin; ++c) {
            if (xn->requires_grad)
              xn->grad[s * cin + c] += g * wn->value[(o * cin + c) * k + j];
            if (wn->requires_grad)
              wn->grad[(o * cin + c) * k + j] += g * xn->value[s * cin + c];
          }
        }
      }
  };
  if (bias)
    return detail::finish_op<S>({t_len, cout}, std::move(v), {x, w, *bias}, std::move(backward));
  return detail::finish_op<S>({t_len, cout}, std::move(v), {x, w}, std::move(backward));
}

// ----- dynamic primitive catalogue -----

struct PrimitiveAttrs {
  double scalar = 0.0;
  double eps = 1e-6;
  int64_t axis = 0;
  int64_t start = 0;
  int64_t length = 0;
  std::vector<int64_t> axes;
  Shape shape;
  std::vector<int64_t> ids;
};

inline const std::vector<std::string>& primitive_catalogue() {
  static const std::vector<std::string> kinds = {
      "add",        "sub",     "mul",     "div",       "add_scalar",
      "mul_scalar", "sqrt",    "matmul",  "bmm",       "transpose",
      "permute",    "reshape", "concat",  "slice",     "expand",
      "sum",        "mean",    "softmax", "gelu",      "silu",
      "layer_norm", "layer_norm_affine",  "embedding", "conv1d_depthwise",
      "conv1d"};
  return kinds;
}

// Dispatch by op-kind string; unknown kinds are rejected.
template <class S>
Tensor<S> apply_primitive(const std::string& kind, const std::vector<Tensor<S>>& in,
                          const PrimitiveAttrs& attrs = {}) {
  auto want = [&](std::size_t n) {
    if (in.size() != n)
      fail("primitive '", kind, "' expects ", n, " inputs, got ", in.size());
  };
  if (kind == "add") { want(2); return add(in[0], in[1]); }
  if (kind == "sub") { want(2); return sub(in[0], in[1]); }
  if (kind == "mul") { want(2); return mul(in[0], in[1]); }
  if (kind == "div") { want(2); return div(in[0], in[1]); }
  if (kind == "add_scalar") { want(1); return add_scalar(in[0], attrs.scalar); }
  if (kind == "mul_scalar") { want(1); return mul_scalar(in[0], attrs.scalar); }
  if (kind == "sqrt") { want(1); return sqrt(in[0]); }
  if (kind == "matmul") { want(2); return matmul(in[0], in[1]); }
  if (kind == "bmm") { want(2); return bmm(in[0], in[1]); }
  if (kind == "transpose") { want(1); return transpose(in[0]); }
  if (kind == "permute") { want(1); return permute(in[0], attrs.axes); }
  if (kind == "reshape") { want(1); return reshape(in[0], attrs.shape); }
  if (kind == "concat") { return concat(in, attrs.axis); }
  if (kind == "slice") { want(1); return slice(in[0], attrs.axis, attrs.start, attrs.length); }
  if (kind == "expand") { want(1); return expand(in[0], attrs.shape); }
  if (kind == "sum") { want(1); return sum(in[0]); }
  if (kind == "mean") { want(1); return mean(in[0]); }
  if (kind == "softmax") { want(1); return softmax(in[0]); }
  if (kind == "gelu") { want(1); return gelu(in[0]); }
  if (kind == "silu") { want(1); return silu(in[0]); }
  if (kind == "layer_norm") { want(1); return layer_norm(in[0], attrs.eps); }
  if (kind == "layer_norm_affine") {
    want(3);
    return layer_norm(in[0], in[1], in[2], attrs.eps);
  }
  if (kind == "embedding") { want(1); return embedding(in[0], attrs.ids); }
  if (kind == "conv1d_depthwise") {
    if (in.size() == 2) return conv1d_depthwise(in[0], in[1]);
    want(3);
    return conv1d_depthwise(in[0], in[1], &in[2]);
  }
  if (kind == "conv1d") {
    if (in.size() == 2) return conv1d(in[0], in[1]);
    want(3);
    return conv1d(in[0], in[1], &in[2]);
  }
  fail("unknown primitive op-kind '", kind, "'");
}

}  // namespace swayflow
