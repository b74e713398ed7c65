// Copyright 2026 The d2mlp Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "d2mlp/parallel.hpp"
#include "d2mlp/tape.hpp"
#include "d2mlp/tensor.hpp"

namespace d2mlp {

enum class GeluMode { exact, tanh };

namespace fault {
/// Test hook: scales the GELU input gradient. Anything but 1 breaks gradcheck.
inline std::atomic<double>& gelu_backward_scale() {
  static std::atomic<double> scale{1.0};
  return scale;
}
}  // namespace fault

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

/// Views a rank-3 (C,H,W) or rank-4 (B,C,H,W) shape as four extents.
struct Image4 {
  std::size_t n, c, h, w;
};

inline Image4 as_image4(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw ShapeError(std::string(op) + ": expected rank 3 or 4 input, got " + to_string(s));
}

inline Shape image_shape_like(const Shape& in, std::size_t c, std::size_t h, std::size_t w) {
  if (in.size() == 4) return {in[0], c, h, w};
  return {c, h, w};
}

template <class T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.raw();
  const T* s = src.raw();
  for (std::size_t i = 0, n = dst.size(); i < n; ++i) d[i] += s[i];
}

/// Broadcast strides of `in` against `out` (equal rank; 0 where in has extent 1).
inline Shape broadcast_strides(const Shape& in, const Shape& out) {
  Shape st = row_major_strides(in);
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (in[i] == 1 && out[i] != 1) st[i] = 0;
  }
  return st;
}

/// Calls fn(out_flat, offset_a, offset_b) for every output element in order.
template <class Fn>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, Fn&& fn) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  const std::size_t total = shape_numel(out);
  for (std::size_t flat = 0; flat < total; ++flat) {
    fn(flat, oa, ob);
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
}

template <class T>
T gelu_value(T x, GeluMode mode) {
  if (mode == GeluMode::exact) {
    return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  }
  const T k = std::sqrt(T(2) / std::numbers::pi_v<T>);
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <class T>
T gelu_derivative(T x, GeluMode mode) {
  if (mode == GeluMode::exact) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
    const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    return cdf + x * pdf;
  }
  const T k = std::sqrt(T(2) / std::numbers::pi_v<T>);
  const T u = k * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = k * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  detail::accumulate(out, b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    if (tape.requires_grad(a)) detail::accumulate(tape.grad_buffer(a), g);
    if (tape.requires_grad(b)) detail::accumulate(tape.grad_buffer(b), g);
  });
}

template <class T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  return add(a, b);
}

/// Elementwise product with limited broadcasting: equal rank, and each extent
/// either matches or is 1 in one of the operands.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size()) throw ShapeError("mul: rank mismatch " + to_string(sa) + " vs " + to_string(sb));
  Shape out_shape(sa.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (sa[i] != sb[i] && sa[i] != 1 && sb[i] != 1) {
      throw ShapeError("mul: cannot broadcast " + to_string(sa) + " with " + to_string(sb));
    }
    out_shape[i] = std::max(sa[i], sb[i]);
  }
  const Shape st_a = detail::broadcast_strides(sa, out_shape);
  const Shape st_b = detail::broadcast_strides(sb, out_shape);
  Tensor<T> out(out_shape);
  const T* pa = a.value().raw();
  const T* pb = b.value().raw();
  T* po = out.raw();
  if (sa == sb) {
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * pb[i];
  } else {
    detail::for_each_broadcast(out_shape, st_a, st_b,
                               [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = pa[ia] * pb[ib]; });
  }
  return a.tape().record(std::move(out), {a, b},
                         [a, b, out_shape, st_a, st_b](Tape<T>& tape, const Tensor<T>& g) {
                           const T* pa = a.value().raw();
                           const T* pb = b.value().raw();
                           const T* pg = g.raw();
                           const bool ga = tape.requires_grad(a);
                           const bool gb = tape.requires_grad(b);
                           T* da = ga ? tape.grad_buffer(a).raw() : nullptr;
                           T* db = gb ? tape.grad_buffer(b).raw() : nullptr;
                           detail::for_each_broadcast(out_shape, st_a, st_b,
                                                      [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                                        if (da) da[ia] += pg[o] * pb[ib];
                                                        if (db) db[ib] += pg[o] * pa[ia];
                                                      });
                         });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape<T>& tape, const Tensor<T>& g) {
    T* d = tape.grad_buffer(a).raw();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += s * g[i];
  });
}

/// Sum of all elements as a one-element tensor.
template <class T>
Var<T> sum(const Var<T>& a) {
  double acc = 0;
  for (T v : a.value().data()) acc += v;
  return a.tape().record(Tensor<T>::scalar(static_cast<T>(acc)), {a},
                         [a](Tape<T>& tape, const Tensor<T>& g) {
                           const T gv = g[0];
                           for (auto& v : tape.grad_buffer(a).data()) v += gv;
                         });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

/// Sum over one axis, keeping it with extent 1.
template <class T>
Var<T> sum_axis(const Var<T>& a, std::size_t axis) {
  const AxisView v = axis_view(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = 1;
  Tensor<T> out(out_shape);
  const T* pa = a.value().raw();
  for (std::size_t o = 0; o < v.outer; ++o) {
    T* dst = out.raw() + o * v.inner;
    for (std::size_t k = 0; k < v.extent; ++k) {
      const T* src = pa + (o * v.extent + k) * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
    }
  }
  return a.tape().record(std::move(out), {a}, [a, v](Tape<T>& tape, const Tensor<T>& g) {
    T* d = tape.grad_buffer(a).raw();
    for (std::size_t o = 0; o < v.outer; ++o) {
      const T* src = g.raw() + o * v.inner;
      for (std::size_t k = 0; k < v.extent; ++k) {
        T* dst = d + (o * v.extent + k) * v.inner;
        for (std::size_t i = 0; i < v.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <class T>
Var<T> gelu(const Var<T>& x, GeluMode mode = GeluMode::exact) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = detail::gelu_value(v, mode);
  return x.tape().record(std::move(out), {x}, [x, mode](Tape<T>& tape, const Tensor<T>& g) {
    const T fault_scale = static_cast<T>(fault::gelu_backward_scale().load());
    const T* px = x.value().raw();
    T* d = tape.grad_buffer(x).raw();
    for (std::size_t i = 0; i < g.size(); ++i) {
      d[i] += fault_scale * g[i] * detail::gelu_derivative(px[i], mode);
    }
  });
}

/// Max-subtracted softmax along `axis`.
template <class T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  const AxisView v = axis_view(x.shape(), axis);
  Tensor<T> out(x.shape());
  const T* px = x.value().raw();
  T* po = out.raw();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.extent * v.inner + i;
      T mx = px[base];
      for (std::size_t k = 0; k < v.extent; ++k) {
        const T val = px[base + k * v.inner];
        if (!std::isfinite(val)) throw NumericError("softmax: non-finite input");
        mx = std::max(mx, val);
      }
      T total = 0;
      for (std::size_t k = 0; k < v.extent; ++k) {
        const T e = std::exp(px[base + k * v.inner] - mx);
        po[base + k * v.inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < v.extent; ++k) po[base + k * v.inner] /= total;
    }
  }
  Tape<T>& tape = x.tape();
  const Var<T> y(&tape, tape.next_id());
  return tape.record(std::move(out), {x}, [x, y, v](Tape<T>& tape, const Tensor<T>& g) {
    const T* py = y.value().raw();
    T* d = tape.grad_buffer(x).raw();
    for (std::size_t o = 0; o < v.outer; ++o) {
      for (std::size_t i = 0; i < v.inner; ++i) {
        const std::size_t base = o * v.extent * v.inner + i;
        T dot = 0;
        for (std::size_t k = 0; k < v.extent; ++k) dot += g[base + k * v.inner] * py[base + k * v.inner];
        for (std::size_t k = 0; k < v.extent; ++k) {
          const std::size_t idx = base + k * v.inner;
          d[idx] += py[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Rearrangement
// ---------------------------------------------------------------------------

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    T* d = tape.grad_buffer(x).raw();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

namespace kernels {

/// out[j...] = in[i...] with out axis k = in axis perm[k].
template <class T>
Tensor<T> permute(const Tensor<T>& in, const std::vector<std::size_t>& perm) {
  const Shape& s = in.shape();
  if (perm.size() != s.size()) throw ShapeError("permute: permutation rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (std::size_t p : perm) {
    if (p >= perm.size() || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) out_shape[k] = s[perm[k]];
  const Shape in_strides = row_major_strides(s);
  Shape gather(s.size());
  for (std::size_t k = 0; k < s.size(); ++k) gather[k] = in_strides[perm[k]];
  Tensor<T> out(out_shape);
  const Shape zero(s.size(), 0);
  const T* pi = in.raw();
  T* po = out.raw();
  detail::for_each_broadcast(out_shape, gather, zero,
                             [&](std::size_t o, std::size_t i, std::size_t) { po[o] = pi[i]; });
  return out;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
  return inv;
}

}  // namespace kernels

template <class T>
Var<T> permute(const Var<T>& x, std::vector<std::size_t> perm) {
  Tensor<T> out = kernels::permute(x.value(), perm);
  return x.tape().record(std::move(out), {x}, [x, perm](Tape<T>& tape, const Tensor<T>& g) {
    detail::accumulate(tape.grad_buffer(x), kernels::permute(g, kernels::inverse_permutation(perm)));
  });
}

template <class T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != parts[0].shape()[i]) throw ShapeError("concat: extent mismatch off-axis");
    }
    out_shape[axis] += s[axis];
  }
  const AxisView ov = axis_view(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> starts;
  std::size_t start = 0;
  for (const auto& p : parts) {
    starts.push_back(start);
    const std::size_t len = p.shape()[axis];
    const T* src = p.value().raw();
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(src + o * len * ov.inner, len * ov.inner,
                  out.raw() + (o * ov.extent + start) * ov.inner);
    }
    start += len;
  }
  std::vector<Var<T>> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(
      std::move(out), std::span<const Var<T>>(inputs), [inputs, starts, ov, axis](Tape<T>& tape, const Tensor<T>& g) {
        for (std::size_t k = 0; k < inputs.size(); ++k) {
          if (!tape.requires_grad(inputs[k])) continue;
          const std::size_t len = inputs[k].shape()[axis];
          T* d = tape.grad_buffer(inputs[k]).raw();
          for (std::size_t o = 0; o < ov.outer; ++o) {
            const T* src = g.raw() + (o * ov.extent + starts[k]) * ov.inner;
            T* dst = d + o * len * ov.inner;
            for (std::size_t i = 0; i < len * ov.inner; ++i) dst[i] += src[i];
          }
        }
      });
}

template <class T>
Var<T> concat(std::initializer_list<Var<T>> parts, std::size_t axis) {
  return concat(std::span<const Var<T>>(parts.begin(), parts.size()), axis);
}

/// Sub-range [start, start+length) along `axis`.
template <class T>
Var<T> slice(const Var<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisView v = axis_view(x.shape(), axis);
  if (length == 0 || start + length > v.extent) throw ShapeError("slice: range out of bounds");
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  Tensor<T> out(out_shape);
  const T* src = x.value().raw();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(src + (o * v.extent + start) * v.inner, length * v.inner, out.raw() + o * length * v.inner);
  }
  return x.tape().record(std::move(out), {x}, [x, v, start, length](Tape<T>& tape, const Tensor<T>& g) {
    T* d = tape.grad_buffer(x).raw();
    for (std::size_t o = 0; o < v.outer; ++o) {
      T* dst = d + (o * v.extent + start) * v.inner;
      const T* s = g.raw() + o * length * v.inner;
      for (std::size_t i = 0; i < length * v.inner; ++i) dst[i] += s[i];
    }
  });
}

/// Splits `axis` into `parts` equal pieces.
template <class T>
std::vector<Var<T>> split(const Var<T>& x, std::size_t axis, std::size_t parts) {
  const std::size_t ext = axis_view(x.shape(), axis).extent;
  if (parts == 0 || ext % parts != 0) {
    throw ShapeError("split: extent " + std::to_string(ext) + " not divisible into " + std::to_string(parts));
  }
  std::vector<Var<T>> out;
  const std::size_t len = ext / parts;
  for (std::size_t p = 0; p < parts; ++p) out.push_back(slice(x, axis, p * len, len));
  return out;
}

// ---------------------------------------------------------------------------
// Linear maps and convolutions
// ---------------------------------------------------------------------------

/// out[.., o, ..] = sum_i W[o, i] * X[.., i, ..] + b[o], contracting `axis`.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t axis) {
  const Shape& xs = x.shape();
  if (axis >= xs.size()) throw ShapeError("linear: axis " + std::to_string(axis) + " out of range for " + to_string(xs));
  if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2");
  const std::size_t n_out = w.shape()[0];
  const std::size_t n_in = w.shape()[1];
  if (b.shape() != Shape{n_out}) throw ShapeError("linear: bias shape " + to_string(b.shape()));
  if (xs[axis] != n_in) {
    throw ShapeError("linear: input extent " + std::to_string(xs[axis]) + " along axis " + std::to_string(axis) +
                     " does not match weight in-features " + std::to_string(n_in));
  }
  AxisView v = axis_view(xs, axis);
  Shape out_shape = xs;
  out_shape[axis] = n_out;
  Tensor<T> out(out_shape);
  const T* px = x.value().raw();
  const T* pw = w.value().raw();
  const T* pb = b.value().raw();
  T* po = out.raw();
  parallel_for(v.outer * n_out, n_in * v.inner, [&](std::size_t job) {
    const std::size_t o = job / n_out;
    const std::size_t r = job % n_out;
    T* dst = po + (o * n_out + r) * v.inner;
    std::fill_n(dst, v.inner, pb[r]);
    for (std::size_t c = 0; c < n_in; ++c) {
      const T wv = pw[r * n_in + c];
      const T* src = px + (o * n_in + c) * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) dst[i] += wv * src[i];
    }
  });
  return x.tape().record(std::move(out), {x, w, b}, [x, w, b, v, n_in, n_out](Tape<T>& tape, const Tensor<T>& g) {
    const T* px = x.value().raw();
    const T* pw = w.value().raw();
    const T* pg = g.raw();
    if (tape.requires_grad(x)) {
      T* dx = tape.grad_buffer(x).raw();
      parallel_for(v.outer * n_in, n_out * v.inner, [&](std::size_t job) {
        const std::size_t o = job / n_in;
        const std::size_t c = job % n_in;
        T* dst = dx + (o * n_in + c) * v.inner;
        for (std::size_t r = 0; r < n_out; ++r) {
          const T wv = pw[r * n_in + c];
          const T* src = pg + (o * n_out + r) * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i) dst[i] += wv * src[i];
        }
      });
    }
    if (tape.requires_grad(w)) {
      T* dw = tape.grad_buffer(w).raw();
      parallel_for(n_out, n_in * v.outer * v.inner, [&](std::size_t r) {
        for (std::size_t c = 0; c < n_in; ++c) {
          T acc = 0;
          for (std::size_t o = 0; o < v.outer; ++o) {
            const T* gs = pg + (o * n_out + r) * v.inner;
            const T* xs = px + (o * n_in + c) * v.inner;
            for (std::size_t i = 0; i < v.inner; ++i) acc += gs[i] * xs[i];
          }
          dw[r * n_in + c] += acc;
        }
      });
    }
    if (tape.requires_grad(b)) {
      T* db = tape.grad_buffer(b).raw();
      for (std::size_t r = 0; r < n_out; ++r) {
        T acc = 0;
        for (std::size_t o = 0; o < v.outer; ++o) {
          const T* gs = pg + (o * n_out + r) * v.inner;
          for (std::size_t i = 0; i < v.inner; ++i) acc += gs[i];
        }
        db[r] += acc;
      }
    }
  });
}

/// Per-channel "same" cross-correlation with zero padding. Kernel [C, kh, kw], odd extents.
template <class T>
Var<T> dwconv2d(const Var<T>& x, const Var<T>& k, const Var<T>& b) {
  const detail::Image4 s = detail::as_image4(x.shape(), "dwconv2d");
  if (k.rank() != 3) throw ShapeError("dwconv2d: kernel must be [C, kh, kw]");
  const std::size_t kh = k.shape()[1], kw = k.shape()[2];
  if (k.shape()[0] != s.c) {
    throw ShapeError("dwconv2d: kernel has " + std::to_string(k.shape()[0]) + " channels, input has " +
                     std::to_string(s.c));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("dwconv2d: kernel extents must be odd");
  if (b.shape() != Shape{s.c}) throw ShapeError("dwconv2d: bias shape mismatch");
  const long ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  const long H = static_cast<long>(s.h), W = static_cast<long>(s.w);
  Tensor<T> out(x.shape());
  const T* px = x.value().raw();
  const T* pk = k.value().raw();
  const T* pb = b.value().raw();
  T* po = out.raw();
  // Visits every (output row i, input row ii, kernel tap) with the valid column span.
  auto for_taps = [=](auto&& body) {
    for (long u = 0; u < static_cast<long>(kh); ++u) {
      for (long vv = 0; vv < static_cast<long>(kw); ++vv) {
        const long dx = vv - pw;
        const long j0 = std::max(0L, -dx), j1 = std::min(W, W - dx);
        for (long i = 0; i < H; ++i) {
          const long ii = i + u - ph;
          if (ii < 0 || ii >= H || j0 >= j1) continue;
          body(static_cast<std::size_t>(u * static_cast<long>(kw) + vv), i, ii, dx, j0, j1);
        }
      }
    }
  };
  parallel_for(s.n * s.c, s.h * s.w * kh * kw, [&](std::size_t nc) {
    const std::size_t c = nc % s.c;
    const T* xin = px + nc * s.h * s.w;
    T* y = po + nc * s.h * s.w;
    std::fill_n(y, s.h * s.w, pb[c]);
    for_taps([&](std::size_t tap, long i, long ii, long dx, long j0, long j1) {
      const T kv = pk[c * kh * kw + tap];
      T* yr = y + i * W;
      const T* xr = xin + ii * W + dx;
      for (long j = j0; j < j1; ++j) yr[j] += kv * xr[j];
    });
  });
  return x.tape().record(std::move(out), {x, k, b}, [x, k, b, s, kh, kw, for_taps](Tape<T>& tape, const Tensor<T>& g) {
    const T* px = x.value().raw();
    const T* pk = k.value().raw();
    const T* pg = g.raw();
    const long W = static_cast<long>(s.w);
    const bool need_x = tape.requires_grad(x);
    const bool need_k = tape.requires_grad(k);
    T* dx = need_x ? tape.grad_buffer(x).raw() : nullptr;
    T* dk = need_k ? tape.grad_buffer(k).raw() : nullptr;
    if (need_x) {
      parallel_for(s.n * s.c, s.h * s.w * kh * kw, [&](std::size_t nc) {
        const std::size_t c = nc % s.c;
        const T* gy = pg + nc * s.h * s.w;
        T* gx = dx + nc * s.h * s.w;
        for_taps([&](std::size_t tap, long i, long ii, long off, long j0, long j1) {
          const T kv = pk[c * kh * kw + tap];
          const T* gr = gy + i * W;
          T* xr = gx + ii * W + off;
          for (long j = j0; j < j1; ++j) xr[j] += kv * gr[j];
        });
      });
    }
    if (need_k) {
      parallel_for(s.c, s.n * s.h * s.w * kh * kw, [&](std::size_t c) {
        for (std::size_t n = 0; n < s.n; ++n) {
          const std::size_t nc = n * s.c + c;
          const T* gy = pg + nc * s.h * s.w;
          const T* xin = px + nc * s.h * s.w;
          for_taps([&](std::size_t tap, long i, long ii, long off, long j0, long j1) {
            const T* gr = gy + i * W;
            const T* xr = xin + ii * W + off;
            T acc = 0;
            for (long j = j0; j < j1; ++j) acc += gr[j] * xr[j];
            dk[c * kh * kw + tap] += acc;
          });
        }
      });
    }
    if (tape.requires_grad(b)) {
      T* db = tape.grad_buffer(b).raw();
      for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        T acc = 0;
        for (std::size_t i = 0; i < s.h * s.w; ++i) acc += pg[nc * s.h * s.w + i];
        db[nc % s.c] += acc;
      }
    }
  });
}

/// Dense cross-correlation. Weight [Cout, Cin, kh, kw]; symmetric zero padding.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t padding) {
  const detail::Image4 s = detail::as_image4(x.shape(), "conv2d");
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be [Cout, Cin, kh, kw]");
  const std::size_t cout = w.shape()[0], cin = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  if (cin != s.c) throw ShapeError("conv2d: weight expects " + std::to_string(cin) + " input channels, got " + std::to_string(s.c));
  if (b.shape() != Shape{cout}) throw ShapeError("conv2d: bias shape mismatch");
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const long hp = static_cast<long>(s.h + 2 * padding) - static_cast<long>(kh);
  const long wp = static_cast<long>(s.w + 2 * padding) - static_cast<long>(kw);
  if (hp < 0 || wp < 0) throw ShapeError("conv2d: non-positive output extent");
  const std::size_t ho = static_cast<std::size_t>(hp) / stride + 1;
  const std::size_t wo = static_cast<std::size_t>(wp) / stride + 1;
  Tensor<T> out(detail::image_shape_like(x.shape(), cout, ho, wo));
  const long P = static_cast<long>(padding), S = static_cast<long>(stride);
  const long H = static_cast<long>(s.h), W = static_cast<long>(s.w);
  // For output column j the input column is j*S + v - P; this is its valid j range.
  auto col_range = [=](long v, long& j0, long& j1) {
    const long off = v - P;
    j0 = off >= 0 ? 0 : (-off + S - 1) / S;
    j1 = std::min(static_cast<long>(wo), off < W ? (W - 1 - off) / S + 1 : 0L);
  };
  const T* px = x.value().raw();
  const T* pw = w.value().raw();
  const T* pb = b.value().raw();
  T* po = out.raw();
  parallel_for(s.n * cout, cin * kh * kw * ho * wo, [&](std::size_t job) {
    const std::size_t n = job / cout, co = job % cout;
    T* y = po + job * ho * wo;
    std::fill_n(y, ho * wo, pb[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xin = px + (n * cin + ci) * s.h * s.w;
      for (long u = 0; u < static_cast<long>(kh); ++u) {
        for (long v = 0; v < static_cast<long>(kw); ++v) {
          const T wv = pw[((co * cin + ci) * kh + u) * kw + v];
          long j0, j1;
          col_range(v, j0, j1);
          for (long i = 0; i < static_cast<long>(ho); ++i) {
            const long ii = i * S + u - P;
            if (ii < 0 || ii >= H) continue;
            T* yr = y + i * static_cast<long>(wo);
            const T* xr = xin + ii * W + v - P;
            for (long j = j0; j < j1; ++j) yr[j] += wv * xr[j * S];
          }
        }
      }
    }
  });
  return x.tape().record(
      std::move(out), {x, w, b}, [x, w, b, s, cout, cin, kh, kw, ho, wo, P, S, col_range](Tape<T>& tape, const Tensor<T>& g) {
        const long H = static_cast<long>(s.h), W = static_cast<long>(s.w);
        const T* px = x.value().raw();
        const T* pw = w.value().raw();
        const T* pg = g.raw();
        if (tape.requires_grad(x)) {
          T* dx = tape.grad_buffer(x).raw();
          parallel_for(s.n * cin, cout * kh * kw * ho * wo, [&](std::size_t job) {
            const std::size_t n = job / cin, ci = job % cin;
            T* gx = dx + job * s.h * s.w;
            for (std::size_t co = 0; co < cout; ++co) {
              const T* gy = pg + (n * cout + co) * ho * wo;
              for (long u = 0; u < static_cast<long>(kh); ++u) {
                for (long v = 0; v < static_cast<long>(kw); ++v) {
                  const T wv = pw[((co * cin + ci) * kh + u) * kw + v];
                  long j0, j1;
                  col_range(v, j0, j1);
                  for (long i = 0; i < static_cast<long>(ho); ++i) {
                    const long ii = i * S + u - P;
                    if (ii < 0 || ii >= H) continue;
                    const T* gr = gy + i * static_cast<long>(wo);
                    T* xr = gx + ii * W + v - P;
                    for (long j = j0; j < j1; ++j) xr[j * S] += wv * gr[j];
                  }
                }
              }
            }
          });
        }
        if (tape.requires_grad(w)) {
          T* dw = tape.grad_buffer(w).raw();
          parallel_for(cout, s.n * cin * kh * kw * ho * wo, [&](std::size_t co) {
            for (std::size_t ci = 0; ci < cin; ++ci) {
              for (long u = 0; u < static_cast<long>(kh); ++u) {
                for (long v = 0; v < static_cast<long>(kw); ++v) {
                  long j0, j1;
                  col_range(v, j0, j1);
                  T acc = 0;
                  for (std::size_t n = 0; n < s.n; ++n) {
                    const T* gy = pg + (n * cout + co) * ho * wo;
                    const T* xin = px + (n * cin + ci) * s.h * s.w;
                    for (long i = 0; i < static_cast<long>(ho); ++i) {
                      const long ii = i * S + u - P;
                      if (ii < 0 || ii >= H) continue;
                      const T* gr = gy + i * static_cast<long>(wo);
                      const T* xr = xin + ii * W + v - P;
                      for (long j = j0; j < j1; ++j) acc += gr[j] * xr[j * S];
                    }
                  }
                  dw[((co * cin + ci) * kh + u) * kw + v] += acc;
                }
              }
            }
          });
        }
        if (tape.requires_grad(b)) {
          T* db = tape.grad_buffer(b).raw();
          for (std::size_t n = 0; n < s.n; ++n) {
            for (std::size_t co = 0; co < cout; ++co) {
              T acc = 0;
              const T* gy = pg + (n * cout + co) * ho * wo;
              for (std::size_t i = 0; i < ho * wo; ++i) acc += gy[i];
              db[co] += acc;
            }
          }
        }
      });
}

/// Transposed convolution without padding. Weight [Cin, Cout, kh, kw];
/// output extent (H-1)*stride + kh, so k = stride = 2 doubles the input.
template <class T>
Var<T> tconv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride) {
  const detail::Image4 s = detail::as_image4(x.shape(), "tconv2d");
  if (w.rank() != 4) throw ShapeError("tconv2d: weight must be [Cin, Cout, kh, kw]");
  const std::size_t cin = w.shape()[0], cout = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
  if (cin != s.c) throw ShapeError("tconv2d: weight expects " + std::to_string(cin) + " input channels, got " + std::to_string(s.c));
  if (b.shape() != Shape{cout}) throw ShapeError("tconv2d: bias shape mismatch");
  if (stride == 0) throw ShapeError("tconv2d: stride must be positive");
  const std::size_t ho = (s.h - 1) * stride + kh;
  const std::size_t wo = (s.w - 1) * stride + kw;
  Tensor<T> out(detail::image_shape_like(x.shape(), cout, ho, wo));
  const T* px = x.value().raw();
  const T* pw = w.value().raw();
  const T* pb = b.value().raw();
  T* po = out.raw();
  parallel_for(s.n * cout, cin * kh * kw * s.h * s.w, [&](std::size_t job) {
    const std::size_t n = job / cout, co = job % cout;
    T* y = po + job * ho * wo;
    std::fill_n(y, ho * wo, pb[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xin = px + (n * cin + ci) * s.h * s.w;
      for (std::size_t u = 0; u < kh; ++u) {
        for (std::size_t v = 0; v < kw; ++v) {
          const T wv = pw[((ci * cout + co) * kh + u) * kw + v];
          for (std::size_t i = 0; i < s.h; ++i) {
            T* yr = y + (i * stride + u) * wo + v;
            const T* xr = xin + i * s.w;
            for (std::size_t j = 0; j < s.w; ++j) yr[j * stride] += wv * xr[j];
          }
        }
      }
    }
  });
  return x.tape().record(std::move(out), {x, w, b}, [x, w, b, s, cin, cout, kh, kw, ho, wo, stride](Tape<T>& tape, const Tensor<T>& g) {
    const T* px = x.value().raw();
    const T* pw = w.value().raw();
    const T* pg = g.raw();
    if (tape.requires_grad(x)) {
      T* dx = tape.grad_buffer(x).raw();
      parallel_for(s.n * cin, cout * kh * kw * s.h * s.w, [&](std::size_t job) {
        const std::size_t n = job / cin, ci = job % cin;
        T* gx = dx + job * s.h * s.w;
        for (std::size_t co = 0; co < cout; ++co) {
          const T* gy = pg + (n * cout + co) * ho * wo;
          for (std::size_t u = 0; u < kh; ++u) {
            for (std::size_t v = 0; v < kw; ++v) {
              const T wv = pw[((ci * cout + co) * kh + u) * kw + v];
              for (std::size_t i = 0; i < s.h; ++i) {
                const T* gr = gy + (i * stride + u) * wo + v;
                T* xr = gx + i * s.w;
                for (std::size_t j = 0; j < s.w; ++j) xr[j] += wv * gr[j * stride];
              }
            }
          }
        }
      });
    }
    if (tape.requires_grad(w)) {
      T* dw = tape.grad_buffer(w).raw();
      parallel_for(cin, s.n * cout * kh * kw * s.h * s.w, [&](std::size_t ci) {
        for (std::size_t co = 0; co < cout; ++co) {
          for (std::size_t u = 0; u < kh; ++u) {
            for (std::size_t v = 0; v < kw; ++v) {
              T acc = 0;
              for (std::size_t n = 0; n < s.n; ++n) {
                const T* gy = pg + (n * cout + co) * ho * wo;
                const T* xin = px + (n * cin + ci) * s.h * s.w;
                for (std::size_t i = 0; i < s.h; ++i) {
                  const T* gr = gy + (i * stride + u) * wo + v;
                  const T* xr = xin + i * s.w;
                  for (std::size_t j = 0; j < s.w; ++j) acc += gr[j * stride] * xr[j];
                }
              }
              dw[((ci * cout + co) * kh + u) * kw + v] += acc;
            }
          }
        }
      });
    }
    if (tape.requires_grad(b)) {
      T* db = tape.grad_buffer(b).raw();
      for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t co = 0; co < cout; ++co) {
          T acc = 0;
          const T* gy = pg + (n * cout + co) * ho * wo;
          for (std::size_t i = 0; i < ho * wo; ++i) acc += gy[i];
          db[co] += acc;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Normalization and pooling
// ---------------------------------------------------------------------------

enum class BNMode { train, eval };

/// Learnable affine plus running statistics. The running tensors are owned by
/// the parameter store and updated in place in train mode.
template <class T>
struct BatchNorm {
  Var<T> gamma;
  Var<T> beta;
  Tensor<T>* running_mean = nullptr;
  Tensor<T>* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Train mode normalizes with biased batch statistics over (B, H, W) and folds
/// the unbiased batch variance into running_var; eval mode uses running stats.
template <class T>
Var<T> batchnorm2d(const Var<T>& x, const BatchNorm<T>& bn, BNMode mode) {
  const detail::Image4 s = detail::as_image4(x.shape(), "batchnorm2d");
  if (bn.gamma.shape() != Shape{s.c} || bn.beta.shape() != Shape{s.c}) {
    throw ShapeError("batchnorm2d: affine parameters must have " + std::to_string(s.c) + " entries");
  }
  if (!bn.running_mean || !bn.running_var || bn.running_mean->shape() != Shape{s.c} ||
      bn.running_var->shape() != Shape{s.c}) {
    throw ShapeError("batchnorm2d: running statistics missing or mis-shaped");
  }
  const std::size_t hw = s.h * s.w;
  const std::size_t count = s.n * hw;
  if (mode == BNMode::train && count < 2) {
    throw ShapeError("batchnorm2d: train mode needs at least 2 values per channel");
  }
  const T* px = x.value().raw();
  const T* pg = bn.gamma.value().raw();
  const T* pb = bn.beta.value().raw();
  std::vector<T> mean(s.c), inv_std(s.c);
  for (std::size_t c = 0; c < s.c; ++c) {
    if (mode == BNMode::train) {
      double acc = 0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* src = px + (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += src[i];
      }
      const double mu = acc / static_cast<double>(count);
      double sq = 0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const T* src = px + (n * s.c + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = src[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + bn.eps));
      const double unbiased = sq / static_cast<double>(count - 1);
      T& rm = (*bn.running_mean)[c];
      T& rv = (*bn.running_var)[c];
      rm = static_cast<T>((1.0 - bn.momentum) * rm + bn.momentum * mu);
      rv = static_cast<T>((1.0 - bn.momentum) * rv + bn.momentum * unbiased);
    } else {
      mean[c] = (*bn.running_mean)[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>((*bn.running_var)[c]) + bn.eps));
    }
  }
  Tensor<T> out(x.shape());
  T* po = out.raw();
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      const T* src = px + (n * s.c + c) * hw;
      T* dst = po + (n * s.c + c) * hw;
      const T a = pg[c] * inv_std[c];
      const T shift = pb[c] - a * mean[c];
      for (std::size_t i = 0; i < hw; ++i) dst[i] = a * src[i] + shift;
    }
  }
  Var<T> gamma = bn.gamma, beta = bn.beta;
  return x.tape().record(std::move(out), {x, gamma, beta},
                         [x, gamma, beta, s, mode, mean, inv_std](Tape<T>& tape, const Tensor<T>& g) {
                           const std::size_t hw = s.h * s.w;
                           const T m = static_cast<T>(s.n * hw);
                           const T* px = x.value().raw();
                           const T* pgam = gamma.value().raw();
                           const T* pg = g.raw();
                           T* dx = tape.requires_grad(x) ? tape.grad_buffer(x).raw() : nullptr;
                           T* dgam = tape.requires_grad(gamma) ? tape.grad_buffer(gamma).raw() : nullptr;
                           T* dbet = tape.requires_grad(beta) ? tape.grad_buffer(beta).raw() : nullptr;
                           for (std::size_t c = 0; c < s.c; ++c) {
                             T sum_g = 0, sum_gx = 0;
                             for (std::size_t n = 0; n < s.n; ++n) {
                               const std::size_t base = (n * s.c + c) * hw;
                               for (std::size_t i = 0; i < hw; ++i) {
                                 const T xhat = (px[base + i] - mean[c]) * inv_std[c];
                                 sum_g += pg[base + i];
                                 sum_gx += pg[base + i] * xhat;
                               }
                             }
                             if (dgam) dgam[c] += sum_gx;
                             if (dbet) dbet[c] += sum_g;
                             if (!dx) continue;
                             const T a = pgam[c] * inv_std[c];
                             for (std::size_t n = 0; n < s.n; ++n) {
                               const std::size_t base = (n * s.c + c) * hw;
                               for (std::size_t i = 0; i < hw; ++i) {
                                 if (mode == BNMode::eval) {
                                   dx[base + i] += a * pg[base + i];
                                 } else {
                                   const T xhat = (px[base + i] - mean[c]) * inv_std[c];
                                   dx[base + i] += a * (pg[base + i] - sum_g / m - xhat * sum_gx / m);
                                 }
                               }
                             }
                           }
                         });
}

/// Per-channel spatial mean: (B,C,H,W) -> (B,C,1,1), (C,H,W) -> (C,1,1).
template <class T>
Var<T> global_avgpool(const Var<T>& x) {
  const detail::Image4 s = detail::as_image4(x.shape(), "global_avgpool");
  const std::size_t hw = s.h * s.w;
  Tensor<T> out(detail::image_shape_like(x.shape(), s.c, 1, 1));
  const T* px = x.value().raw();
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    double acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += px[nc * hw + i];
    out[nc] = static_cast<T>(acc / static_cast<double>(hw));
  }
  return x.tape().record(std::move(out), {x}, [x, s, hw](Tape<T>& tape, const Tensor<T>& g) {
    T* d = tape.grad_buffer(x).raw();
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
      const T gv = g[nc] * inv;
      for (std::size_t i = 0; i < hw; ++i) d[nc * hw + i] += gv;
    }
  });
}

}  // namespace d2mlp
