#include "agglo/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "agglo/errors.hpp"

namespace agglo {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> inputs) {
  if (active_tape<T>() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T, typename F>
void record(const char* op, Tensor<T>& out, F&& backward) {
  out.set_requires_grad(true);
  active_tape<T>()->record(op, out.node(), std::forward<F>(backward));
}

template <typename T>
std::vector<T>& grad_of(TensorNode<T>& node) {
  if (node.grad.empty()) node.grad.assign(node.value.size(), T(0));
  return node.grad;
}

int norm_axis(int axis, const Shape& shape) {
  const int r = static_cast<int>(shape.size());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  return a;
}

struct AxisSplit {
  Index outer = 1;
  Index len = 1;
  Index inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// ---------------------------------------------------------------------------
// Broadcasting

enum class BroadcastKind { Same, SuffixB, General };

struct Broadcast {
  Shape out;
  std::vector<Index> stride_a;  // per output axis, 0 where broadcast
  std::vector<Index> stride_b;
  BroadcastKind kind = BroadcastKind::General;
};

std::vector<Index> padded_strides(const Shape& s, std::size_t rank, const Shape& out) {
  std::vector<Index> strides(rank, 0);
  Index stride = 1;
  const std::size_t offset = rank - s.size();
  for (std::size_t i = s.size(); i-- > 0;) {
    strides[offset + i] = (s[i] == 1 && out[offset + i] != 1) ? 0 : stride;
    stride *= s[i];
  }
  return strides;
}

Broadcast broadcast(const Shape& a, const Shape& b) {
  Broadcast bc;
  if (a == b) {
    bc.out = a;
    bc.kind = BroadcastKind::Same;
    return bc;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  bc.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    }
    bc.out[i] = std::max(ea, eb);
  }
  bc.stride_a = padded_strides(a, rank, bc.out);
  bc.stride_b = padded_strides(b, rank, bc.out);
  if (bc.out == a && b.size() <= a.size() &&
      std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    bc.kind = BroadcastKind::SuffixB;
  }
  return bc;
}

// Calls f(out_index, a_index, b_index) for every output element, in order.
template <typename F>
void for_each_broadcast(const Broadcast& bc, Index na, Index nb, F&& f) {
  const Index n = numel_of(bc.out);
  switch (bc.kind) {
    case BroadcastKind::Same:
      for (Index i = 0; i < n; ++i) f(i, i, i);
      return;
    case BroadcastKind::SuffixB:
      for (Index o = 0; o < n; o += nb) {
        for (Index j = 0; j < nb; ++j) f(o + j, o + j, j);
      }
      return;
    case BroadcastKind::General:
      break;
  }
  (void)na;
  const std::size_t rank = bc.out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const Index last = bc.out[rank - 1];
  const Index sa_last = bc.stride_a[rank - 1];
  const Index sb_last = bc.stride_b[rank - 1];
  std::vector<Index> idx(rank, 0);
  Index ia = 0;
  Index ib = 0;
  for (Index o = 0; o < n; o += last) {
    for (Index j = 0; j < last; ++j) f(o + j, ia + j * sa_last, ib + j * sb_last);
    // advance odometer over all axes but the last
    for (std::size_t ax = rank - 1; ax-- > 0;) {
      ++idx[ax];
      ia += bc.stride_a[ax];
      ib += bc.stride_b[ax];
      if (idx[ax] < bc.out[ax]) break;
      ia -= bc.stride_a[ax] * idx[ax];
      ib -= bc.stride_b[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary(BinOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const Broadcast bc = broadcast(a.shape(), b.shape());
  Tensor<T> out(bc.out);
  T* o = out.mutable_values().data();
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  const T eps = static_cast<T>(kDivEpsilon);
  const Index na = a.numel();
  const Index nb = b.numel();
  switch (op) {
    case BinOp::Add:
      for_each_broadcast(bc, na, nb, [&](Index i, Index ia, Index ib) { o[i] = pa[ia] + pb[ib]; });
      break;
    case BinOp::Sub:
      for_each_broadcast(bc, na, nb, [&](Index i, Index ia, Index ib) { o[i] = pa[ia] - pb[ib]; });
      break;
    case BinOp::Mul:
      for_each_broadcast(bc, na, nb, [&](Index i, Index ia, Index ib) { o[i] = pa[ia] * pb[ib]; });
      break;
    case BinOp::Div:
      for_each_broadcast(bc, na, nb, [&](Index i, Index ia, Index ib) { o[i] = pa[ia] / (pb[ib] + eps); });
      break;
  }
  if (!tracking<T>({&a, &b})) return out;

  static constexpr const char* kNames[] = {"add", "sub", "mul", "div"};
  auto an = a.node();
  auto bn = b.node();
  auto* on = out.node().get();
  record(kNames[static_cast<int>(op)], out, [=]() {
    const T* g = on->grad.data();
    const T* va = an->value.data();
    const T* vb = bn->value.data();
    T* ga = an->requires_grad ? grad_of(*an).data() : nullptr;
    T* gb = bn->requires_grad ? grad_of(*bn).data() : nullptr;
    switch (op) {
      case BinOp::Add:
        for_each_broadcast(bc, na, nb, [&](Index i, Index ia, Index ib) {
          if (ga) ga[ia] += g[i];
          if (gb) gb[ib] += g[i];
        });
        break;
      case BinOp::Sub:
        for_each_broadcast(bc, na, nb, [&](Index i, Index ia, Index ib) {
          if (ga) ga[ia] += g[i];
          if (gb) gb[ib] -= g[i];
        });
        break;
      case BinOp::Mul:
        for_each_broadcast(bc, na, nb, [&](Index i, Index ia, Index ib) {
          if (ga) ga[ia] += g[i] * vb[ib];
          if (gb) gb[ib] += g[i] * va[ia];
        });
        break;
      case BinOp::Div:
        for_each_broadcast(bc, na, nb, [&](Index i, Index ia, Index ib) {
          const T inv = T(1) / (vb[ib] + eps);
          if (ga) ga[ia] += g[i] * inv;
          if (gb) gb[ib] -= g[i] * va[ia] * inv * inv;
        });
        break;
    }
  });
  return out;
}

// C (+)= op(A) * op(B) for row-major storage.
template <typename T>
void gemm(const T* a, Index a_rows, Index a_cols, bool trans_a, const T* b, Index b_rows, Index b_cols, bool trans_b,
          T* c, bool accumulate) {
  ConstMap<T> A(a, a_rows, a_cols);
  ConstMap<T> B(b, b_rows, b_cols);
  const Index m = trans_a ? a_cols : a_rows;
  const Index n = trans_b ? b_rows : b_cols;
  MutMap<T> C(c, m, n);
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b) {
    C.noalias() += A * B;
  } else if (!trans_a && trans_b) {
    C.noalias() += A * B.transpose();
  } else if (trans_a && !trans_b) {
    C.noalias() += A.transpose() * B;
  } else {
    C.noalias() += A.transpose() * B.transpose();
  }
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto mismatch = [&]() {
    return DimensionError("matmul shape mismatch: " + shape_str(sa) + " x " + shape_str(sb) +
                          (transpose_b ? " (b transposed)" : ""));
  };
  if (sa.size() < 2 || sb.size() < 2) throw mismatch();
  const Index p = sa[sa.size() - 2];
  const Index q = sa.back();
  const Index b_rows = sb[sb.size() - 2];
  const Index b_cols = sb.back();
  const Index bq = transpose_b ? b_cols : b_rows;
  const Index r = transpose_b ? b_rows : b_cols;
  if (bq != q) throw mismatch();

  Index batches = 1;
  bool shared_b = sb.size() == 2;
  if (!shared_b) {
    if (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw mismatch();
  }
  for (std::size_t i = 0; i + 2 < sa.size(); ++i) batches *= sa[i];

  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(r);
  Tensor<T> out(out_shape);
  T* o = out.mutable_values().data();
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  if (shared_b) {
    gemm(pa, batches * p, q, false, pb, b_rows, b_cols, transpose_b, o, true);
  } else {
    for (Index i = 0; i < batches; ++i) {
      gemm(pa + i * p * q, p, q, false, pb + i * q * r, b_rows, b_cols, transpose_b, o + i * p * r, true);
    }
  }
  if (!tracking<T>({&a, &b})) return out;

  auto an = a.node();
  auto bn = b.node();
  auto* on = out.node().get();
  record("matmul", out, [=]() {
    const T* g = on->grad.data();
    const T* va = an->value.data();
    const T* vb = bn->value.data();
    const Index rows = shared_b ? batches * p : p;
    const Index reps = shared_b ? 1 : batches;
    for (Index i = 0; i < reps; ++i) {
      const T* gi = g + i * rows * r;
      const T* ai = va + i * rows * q;
      const T* bi = vb + (shared_b ? 0 : i * q * r);
      if (an->requires_grad) {
        // dA = dC * op(B)^T
        gemm(gi, rows, r, false, bi, b_rows, b_cols, !transpose_b, grad_of(*an).data() + i * rows * q, true);
      }
      if (bn->requires_grad) {
        T* gb = grad_of(*bn).data() + (shared_b ? 0 : i * q * r);
        if (!transpose_b) {
          gemm(ai, rows, q, true, gi, rows, r, false, gb, true);  // A^T dC
        } else {
          gemm(gi, rows, r, true, ai, rows, q, false, gb, true);  // dC^T A
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinOp::Add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinOp::Sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinOp::Mul, a, b);
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(BinOp::Div, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_values();
  auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) o[i] = v[i] * factor;
  if (!tracking<T>({&x})) return out;
  auto xn = x.node();
  auto* on = out.node().get();
  record("scale", out, [=]() {
    auto& gx = grad_of(*xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto o = out.mutable_values();
  auto v = x.values();
  for (std::size_t i = 0; i < v.size(); ++i) o[i] = v[i] > T(0) ? v[i] : T(0);
  if (!tracking<T>({&x})) return out;
  auto xn = x.node();
  auto* on = out.node().get();
  record("relu", out, [=]() {
    auto& gx = grad_of(*xn);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xn->value[i] > T(0)) gx[i] += on->grad[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int ax = norm_axis(axis, x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  Tensor<T> out(x.shape());
  T* o = out.mutable_values().data();
  const T* v = x.values().data();
  if (s.inner == 1) {
    for (Index r = 0; r < s.outer; ++r) {
      const T* row = v + r * s.len;
      T* orow = o + r * s.len;
      T mx = row[0];
      for (Index l = 1; l < s.len; ++l) mx = std::max(mx, row[l]);
      T total = 0;
      for (Index l = 0; l < s.len; ++l) {
        orow[l] = std::exp(row[l] - mx);
        total += orow[l];
      }
      const T inv = T(1) / total;
      for (Index l = 0; l < s.len; ++l) orow[l] *= inv;
    }
  } else {
    std::vector<T> mx(s.inner);
    std::vector<T> total(s.inner);
    for (Index r = 0; r < s.outer; ++r) {
      const T* blk = v + r * s.len * s.inner;
      T* oblk = o + r * s.len * s.inner;
      std::copy(blk, blk + s.inner, mx.begin());
      for (Index l = 1; l < s.len; ++l) {
        for (Index i = 0; i < s.inner; ++i) mx[i] = std::max(mx[i], blk[l * s.inner + i]);
      }
      std::fill(total.begin(), total.end(), T(0));
      for (Index l = 0; l < s.len; ++l) {
        for (Index i = 0; i < s.inner; ++i) {
          const T e = std::exp(blk[l * s.inner + i] - mx[i]);
          oblk[l * s.inner + i] = e;
          total[i] += e;
        }
      }
      for (Index i = 0; i < s.inner; ++i) total[i] = T(1) / total[i];
      for (Index l = 0; l < s.len; ++l) {
        for (Index i = 0; i < s.inner; ++i) oblk[l * s.inner + i] *= total[i];
      }
    }
  }
  if (!tracking<T>({&x})) return out;
  auto xn = x.node();
  auto* on = out.node().get();
  record("softmax", out, [=]() {
    const T* g = on->grad.data();
    const T* y = on->value.data();
    T* gx = grad_of(*xn).data();
    for (Index r = 0; r < s.outer; ++r) {
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = r * s.len * s.inner + i;
        T dot = 0;
        for (Index l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
        for (Index l = 0; l < s.len; ++l) {
          const Index k = base + l * s.inner;
          gx[k] += y[k] * (g[k] - dot);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> cumsum(const Tensor<T>& x, int axis) {
  const int ax = norm_axis(axis, x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  Tensor<T> out(x.shape());
  T* o = out.mutable_values().data();
  const T* v = x.values().data();
  const Index block = s.len * s.inner;
  for (Index r = 0; r < s.outer; ++r) {
    const T* src = v + r * block;
    T* dst = o + r * block;
    std::copy(src, src + s.inner, dst);
    for (Index l = 1; l < s.len; ++l) {
      for (Index i = 0; i < s.inner; ++i) dst[l * s.inner + i] = dst[(l - 1) * s.inner + i] + src[l * s.inner + i];
    }
  }
  if (!tracking<T>({&x})) return out;
  auto xn = x.node();
  auto* on = out.node().get();
  record("cumsum", out, [=]() {
    const T* g = on->grad.data();
    T* gx = grad_of(*xn).data();
    std::vector<T> running(s.inner);
    for (Index r = 0; r < s.outer; ++r) {
      std::fill(running.begin(), running.end(), T(0));
      for (Index l = s.len; l-- > 0;) {
        for (Index i = 0; i < s.inner; ++i) {
          const Index k = r * block + l * s.inner + i;
          running[i] += g[k];
          gx[k] += running[i];
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim) {
  const int ax = norm_axis(axis, x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  Shape shape = x.shape();
  if (keepdim) {
    shape[ax] = 1;
  } else {
    shape.erase(shape.begin() + ax);
  }
  Tensor<T> out(shape);
  T* o = out.mutable_values().data();
  const T* v = x.values().data();
  for (Index r = 0; r < s.outer; ++r) {
    for (Index l = 0; l < s.len; ++l) {
      for (Index i = 0; i < s.inner; ++i) o[r * s.inner + i] += v[(r * s.len + l) * s.inner + i];
    }
  }
  if (!tracking<T>({&x})) return out;
  auto xn = x.node();
  auto* on = out.node().get();
  record("sum", out, [=]() {
    const T* g = on->grad.data();
    T* gx = grad_of(*xn).data();
    for (Index r = 0; r < s.outer; ++r) {
      for (Index l = 0; l < s.len; ++l) {
        for (Index i = 0; i < s.inner; ++i) gx[(r * s.len + l) * s.inner + i] += g[r * s.inner + i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.values()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  if (!tracking<T>({&x})) return out;
  auto xn = x.node();
  auto* on = out.node().get();
  record("sum_all", out, [=]() {
    auto& gx = grad_of(*xn);
    const T g = on->grad[0];
    for (auto& v : gx) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> concat(std::span<const Tensor<T>> parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  const int ax = norm_axis(axis, first);
  Shape shape = first;
  shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    bool ok = ps.size() == first.size();
    for (std::size_t i = 0; ok && i < ps.size(); ++i) {
      if (static_cast<int>(i) != ax && ps[i] != first[i]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat along axis " + std::to_string(axis) + ": incompatible shapes " +
                           shape_str(first) + " and " + shape_str(ps));
    }
    shape[ax] += ps[ax];
  }
  const AxisSplit os = split_at(shape, ax);
  Tensor<T> out(shape);
  T* o = out.mutable_values().data();
  std::vector<Index> offsets;  // start along axis for each part
  Index offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const Index chunk = p.shape()[ax] * os.inner;
    const T* src = p.values().data();
    for (Index r = 0; r < os.outer; ++r) {
      std::copy(src + r * chunk, src + (r + 1) * chunk, o + r * os.len * os.inner + offset * os.inner);
    }
    offset += p.shape()[ax];
  }
  if (active_tape<T>() == nullptr) return out;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return out;
  std::vector<std::shared_ptr<TensorNode<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  auto* on = out.node().get();
  record("concat", out, [=]() {
    const T* g = on->grad.data();
    for (std::size_t k = 0; k < nodes.size(); ++k) {
      if (!nodes[k]->requires_grad) continue;
      T* gp = grad_of(*nodes[k]).data();
      const Index chunk = nodes[k]->shape[ax] * os.inner;
      for (Index r = 0; r < os.outer; ++r) {
        const T* src = g + r * os.len * os.inner + offsets[k] * os.inner;
        T* dst = gp + r * chunk;
        for (Index i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, Index begin, Index end) {
  const int ax = norm_axis(axis, x.shape());
  const AxisSplit s = split_at(x.shape(), ax);
  if (begin < 0 || end > s.len || begin >= end) {
    throw DimensionError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[ax] = end - begin;
  Tensor<T> out(shape);
  T* o = out.mutable_values().data();
  const T* v = x.values().data();
  const Index chunk = (end - begin) * s.inner;
  for (Index r = 0; r < s.outer; ++r) {
    const T* src = v + (r * s.len + begin) * s.inner;
    std::copy(src, src + chunk, o + r * chunk);
  }
  if (!tracking<T>({&x})) return out;
  auto xn = x.node();
  auto* on = out.node().get();
  record("slice", out, [=]() {
    const T* g = on->grad.data();
    T* gx = grad_of(*xn).data();
    for (Index r = 0; r < s.outer; ++r) {
      T* dst = gx + (r * s.len + begin) * s.inner;
      const T* src = g + r * chunk;
      for (Index i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
  return out;
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, Index parts) {
  const Index len = x.dim(axis);
  if (parts <= 0 || len % parts != 0) {
    throw DimensionError("cannot split extent " + std::to_string(len) + " into " + std::to_string(parts) +
                         " equal parts");
  }
  const Index step = len / parts;
  std::vector<Tensor<T>> out;
  out.reserve(static_cast<std::size_t>(parts));
  for (Index k = 0; k < parts; ++k) out.push_back(slice(x, axis, k * step, (k + 1) * step));
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
  if (!tracking<T>({&x})) return out;
  auto xn = x.node();
  auto* on = out.node().get();
  record("reshape", out, [=]() {
    auto& gx = grad_of(*xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += on->grad[i];
  });
  return out;
}

namespace {

// Copies `src` (shape `in`) into `dst` with axes lo < hi swapped; if
// `accumulate`, adds instead. `forward` selects the direction of the mapping:
// false maps a swapped-layout source back onto the original layout.
template <typename T>
void swap_axes_copy(const T* src, T* dst, const Shape& in, int lo, int hi, bool accumulate, bool forward) {
  Index inner = 1;
  for (std::size_t i = hi + 1; i < in.size(); ++i) inner *= in[i];
  Shape out = in;
  std::swap(out[lo], out[hi]);
  // strides of the swapped layout, in units of inner blocks, over axes 0..hi
  std::vector<Index> out_stride(hi + 1);
  Index st = 1;
  for (int i = hi; i >= 0; --i) {
    out_stride[i] = st;
    st *= out[i];
  }
  std::vector<Index> idx(hi + 1, 0);
  const Index blocks = [&] {
    Index n = 1;
    for (int i = 0; i <= hi; ++i) n *= in[i];
    return n;
  }();
  for (Index blk = 0; blk < blocks; ++blk) {
    Index oi = 0;
    for (int i = 0; i <= hi; ++i) {
      const int oax = i == lo ? hi : (i == hi ? lo : i);
      oi += idx[i] * out_stride[oax];
    }
    const T* s = forward ? src + blk * inner : src + oi * inner;
    T* d = forward ? dst + oi * inner : dst + blk * inner;
    if (accumulate) {
      for (Index k = 0; k < inner; ++k) d[k] += s[k];
    } else {
      std::copy(s, s + inner, d);
    }
    for (int ax = hi; ax >= 0; --ax) {
      if (++idx[ax] < in[ax]) break;
      idx[ax] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> transpose(const Tensor<T>& x, int axis_a, int axis_b) {
  int lo = norm_axis(axis_a, x.shape());
  int hi = norm_axis(axis_b, x.shape());
  if (lo > hi) std::swap(lo, hi);
  Shape shape = x.shape();
  std::swap(shape[lo], shape[hi]);
  Tensor<T> out(shape);
  if (lo == hi) {
    std::copy(x.values().begin(), x.values().end(), out.mutable_values().begin());
  } else {
    swap_axes_copy(x.values().data(), out.mutable_values().data(), x.shape(), lo, hi, false, true);
  }
  if (!tracking<T>({&x})) return out;
  auto xn = x.node();
  auto* on = out.node().get();
  record("transpose", out, [=]() {
    T* gx = grad_of(*xn).data();
    if (lo == hi) {
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    } else {
      swap_axes_copy(on->grad.data(), gx, xn->shape, lo, hi, true, false);
    }
  });
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, const IntTensor& ids) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + shape_str(table.shape()));
  const Index vocab = table.dim(0);
  const Index width = table.dim(1);
  for (auto id : ids.values) {
    if (id < 0 || id >= vocab) {
      throw DataError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  Shape shape = ids.shape;
  shape.push_back(width);
  Tensor<T> out(shape);
  T* o = out.mutable_values().data();
  const T* tv = table.values().data();
  for (std::size_t i = 0; i < ids.values.size(); ++i) {
    std::copy(tv + ids.values[i] * width, tv + (ids.values[i] + 1) * width, o + static_cast<Index>(i) * width);
  }
  if (!tracking<T>({&table})) return out;
  auto tn = table.node();
  auto* on = out.node().get();
  auto id_copy = ids.values;
  record("embedding", out, [=]() {
    T* gt = grad_of(*tn).data();
    const T* g = on->grad.data();
    for (std::size_t i = 0; i < id_copy.size(); ++i) {
      T* row = gt + id_copy[i] * width;
      const T* src = g + static_cast<Index>(i) * width;
      for (Index k = 0; k < width; ++k) row[k] += src[k];
    }
  });
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const Index d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()) +
                         " and bias " + shape_str(bias.shape()));
  }
  const Index rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<std::size_t>(rows));
  const T* v = x.values().data();
  const T* gv = gain.values().data();
  const T* bv = bias.values().data();
  T* o = out.mutable_values().data();
  for (Index r = 0; r < rows; ++r) {
    const T* row = v + r * d;
    T mean = 0;
    for (Index k = 0; k < d; ++k) mean += row[k];
    mean /= static_cast<T>(d);
    T var = 0;
    for (Index k = 0; k < d; ++k) var += (row[k] - mean) * (row[k] - mean);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (Index k = 0; k < d; ++k) {
      const T h = (row[k] - mean) * is;
      xhat[r * d + k] = h;
      o[r * d + k] = h * gv[k] + bv[k];
    }
  }
  if (!tracking<T>({&x, &gain, &bias})) return out;
  auto xn = x.node();
  auto gn = gain.node();
  auto bn = bias.node();
  auto* on = out.node().get();
  record("layer_norm", out, [=, xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
    const T* g = on->grad.data();
    const T* gv2 = gn->value.data();
    T* gg = gn->requires_grad ? grad_of(*gn).data() : nullptr;
    T* gb = bn->requires_grad ? grad_of(*bn).data() : nullptr;
    T* gx = xn->requires_grad ? grad_of(*xn).data() : nullptr;
    for (Index r = 0; r < rows; ++r) {
      const T* gr = g + r * d;
      const T* hr = xhat.data() + r * d;
      T mean_dh = 0;
      T mean_dh_h = 0;
      for (Index k = 0; k < d; ++k) {
        const T dh = gr[k] * gv2[k];
        mean_dh += dh;
        mean_dh_h += dh * hr[k];
        if (gg) gg[k] += gr[k] * hr[k];
        if (gb) gb[k] += gr[k];
      }
      if (!gx) continue;
      mean_dh /= static_cast<T>(d);
      mean_dh_h /= static_cast<T>(d);
      for (Index k = 0; k < d; ++k) {
        gx[r * d + k] += inv_std[r] * (gr[k] * gv2[k] - mean_dh - hr[k] * mean_dh_h);
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> causal_conv1d(const Tensor<T>& x, const Tensor<T>& filter) {
  if (x.rank() != 3 || filter.rank() != 3 || filter.dim(1) != x.dim(2)) {
    throw DimensionError("causal_conv1d: input " + shape_str(x.shape()) + " incompatible with filter " +
                         shape_str(filter.shape()));
  }
  const Index batch = x.dim(0);
  const Index t = x.dim(1);
  const Index cin = x.dim(2);
  const Index taps = filter.dim(0);
  const Index cout = filter.dim(2);
  Tensor<T> out(Shape{batch, t, cout});
  const T* xv = x.values().data();
  const T* fv = filter.values().data();
  T* o = out.mutable_values().data();
  // tap j reads input i - shift with shift = taps-1-j
  for (Index bi = 0; bi < batch; ++bi) {
    for (Index j = 0; j < taps; ++j) {
      const Index shift = taps - 1 - j;
      if (shift >= t) continue;
      gemm(xv + bi * t * cin, t - shift, cin, false, fv + j * cin * cout, cin, cout, false,
           o + (bi * t + shift) * cout, true);
    }
  }
  if (!tracking<T>({&x, &filter})) return out;
  auto xn = x.node();
  auto fn = filter.node();
  auto* on = out.node().get();
  record("causal_conv1d", out, [=]() {
    const T* g = on->grad.data();
    for (Index bi = 0; bi < batch; ++bi) {
      for (Index j = 0; j < taps; ++j) {
        const Index shift = taps - 1 - j;
        if (shift >= t) continue;
        const T* gi = g + (bi * t + shift) * cout;
        if (xn->requires_grad) {
          gemm(gi, t - shift, cout, false, fn->value.data() + j * cin * cout, cin, cout, true,
               grad_of(*xn).data() + bi * t * cin, true);
        }
        if (fn->requires_grad) {
          gemm(xn->value.data() + bi * t * cin, t - shift, cin, true, gi, t - shift, cout, false,
               grad_of(*fn).data() + j * cin * cout, true);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const IntTensor& targets) {
  const Index vocab = logits.dim(-1);
  const Index rows = logits.numel() / vocab;
  if (targets.numel() != rows) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape));
  }
  for (auto id : targets.values) {
    if (id < 0 || id >= vocab) throw DataError("target id " + std::to_string(id) + " outside vocabulary");
  }
  const T* v = logits.values().data();
  double total = 0;
  for (Index r = 0; r < rows; ++r) {
    const T* row = v + r * vocab;
    T mx = row[0];
    for (Index k = 1; k < vocab; ++k) mx = std::max(mx, row[k]);
    double z = 0;
    for (Index k = 0; k < vocab; ++k) z += std::exp(static_cast<double>(row[k] - mx));
    total += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[targets.values[r]]);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows)));
  if (!tracking<T>({&logits})) return out;
  auto ln = logits.node();
  auto* on = out.node().get();
  auto tgt = targets.values;
  record("cross_entropy", out, [=]() {
    const T g = on->grad[0] / static_cast<T>(rows);
    T* gl = grad_of(*ln).data();
    const T* lv = ln->value.data();
    for (Index r = 0; r < rows; ++r) {
      const T* row = lv + r * vocab;
      T mx = row[0];
      for (Index k = 1; k < vocab; ++k) mx = std::max(mx, row[k]);
      T z = 0;
      for (Index k = 0; k < vocab; ++k) z += std::exp(row[k] - mx);
      for (Index k = 0; k < vocab; ++k) {
        const T p = std::exp(row[k] - mx) / z;
        gl[r * vocab + k] += g * (p - (k == tgt[r] ? T(1) : T(0)));
      }
    }
  });
  return out;
}

#define AGGLO_INSTANTIATE(T)                                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> softmax(const Tensor<T>&, int);                                           \
  template Tensor<T> cumsum(const Tensor<T>&, int);                                            \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                         \
  template Tensor<T> sum_all(const Tensor<T>&);                                                \
  template Tensor<T> mean_all(const Tensor<T>&);                                               \
  template Tensor<T> concat(std::span<const Tensor<T>>, int);                                  \
  template Tensor<T> slice(const Tensor<T>&, int, Index, Index);                               \
  template std::vector<Tensor<T>> split(const Tensor<T>&, int, Index);                         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> transpose(const Tensor<T>&, int, int);                                    \
  template Tensor<T> embedding(const Tensor<T>&, const IntTensor&);                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> causal_conv1d(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> cross_entropy(const Tensor<T>&, const IntTensor&);

AGGLO_INSTANTIATE(float)
AGGLO_INSTANTIATE(double)

#undef AGGLO_INSTANTIATE

}  // namespace agglo
