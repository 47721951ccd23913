#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "vqacl/tensor.hpp"

namespace vqacl {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using CVecMap = Eigen::Map<const Eigen::VectorXd>;

namespace detail {

inline void axpy(double* dst, const double* src, std::int64_t n, double a = 1.0) {
  for (std::int64_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

struct AxisSpan {
  std::int64_t outer, len, inner;
};

inline AxisSpan axis_span(const Shape& shape, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw std::invalid_argument(std::string(op) + ": axis out of range for " + shape_str(shape));
  AxisSpan s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
    s.inner *= shape[static_cast<std::size_t>(i)];
  if (s.len == 0) throw std::invalid_argument(std::string(op) + ": empty axis");
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* py = y.mutable_data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] + pb[i];
  check_finite(y, "add");
  const int an = tape.node_of(a), bn = tape.node_of(b);
  if (tape.recording() && (an >= 0 || bn >= 0)) {
    const int yn = tape.intern(y);
    const Shape sh = a.shape();
    tape.push_op("add", {an, bn}, yn, [an, bn, yn, sh, n](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* da = Tape::grad_accum(g, an, sh)) detail::axpy(da, go, n);
      if (double* db = Tape::grad_accum(g, bn, sh)) detail::axpy(db, go, n);
    });
  }
  return y;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* py = y.mutable_data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
  check_finite(y, "mul");
  const int an = tape.node_of(a), bn = tape.node_of(b);
  if (tape.recording() && (an >= 0 || bn >= 0)) {
    const int yn = tape.intern(y);
    const Shape sh = a.shape();
    tape.push_op("mul", {an, bn}, yn, [a, b, an, bn, yn, sh, n](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* da = Tape::grad_accum(g, an, sh)) {
        const double* pb2 = b.data();
        for (std::int64_t i = 0; i < n; ++i) da[i] += go[i] * pb2[i];
      }
      if (double* db = Tape::grad_accum(g, bn, sh)) {
        const double* pa2 = a.data();
        for (std::int64_t i = 0; i < n; ++i) db[i] += go[i] * pa2[i];
      }
    });
  }
  return y;
}

inline Tensor scale_shift(Tape& tape, const Tensor& x, double scale, double shift) {
  Tensor y(x.shape());
  const double* px = x.data();
  double* py = y.mutable_data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) py[i] = scale * px[i] + shift;
  check_finite(y, "scale_shift");
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("scale_shift", {xn}, yn, [xn, yn, sh, n, scale](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) detail::axpy(dx, go, n, scale);
    });
  }
  return y;
}

// Subgradient at 0 is 0.
inline Tensor relu(Tape& tape, const Tensor& x) {
  Tensor y(x.shape());
  const double* px = x.data();
  double* py = y.mutable_data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) py[i] = px[i] > 0.0 ? px[i] : 0.0;
  check_finite(y, "relu");
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("relu", {xn}, yn, [x, xn, yn, sh, n](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        const double* px2 = x.data();
        for (std::int64_t i = 0; i < n; ++i)
          if (px2[i] > 0.0) dx[i] += go[i];
      }
    });
  }
  return y;
}

inline Tensor tanh(Tape& tape, const Tensor& x) {
  Tensor y(x.shape());
  const double* px = x.data();
  double* py = y.mutable_data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) py[i] = std::tanh(px[i]);
  check_finite(y, "tanh");
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("tanh", {xn}, yn, [y, xn, yn, sh, n](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        const double* py2 = y.data();
        for (std::int64_t i = 0; i < n; ++i) dx[i] += go[i] * (1.0 - py2[i] * py2[i]);
      }
    });
  }
  return y;
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
  Tensor y(x.shape());
  const double* px = x.data();
  double* py = y.mutable_data();
  const std::int64_t n = y.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double v = px[i];
    py[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                     : std::exp(v) / (1.0 + std::exp(v));
  }
  check_finite(y, "sigmoid");
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("sigmoid", {xn}, yn, [y, xn, yn, sh, n](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        const double* py2 = y.data();
        for (std::int64_t i = 0; i < n; ++i) dx[i] += go[i] * py2[i] * (1.0 - py2[i]);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  Tensor y = x.reshaped(std::move(shape));
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    const std::int64_t n = x.numel();
    tape.push_op("reshape", {xn}, yn, [xn, yn, sh, n](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) detail::axpy(dx, go, n);
    });
  }
  return y;
}

// 2-D column slice [c0, c1)
inline Tensor slice_cols(Tape& tape, const Tensor& x, int c0, int c1) {
  if (x.ndim() != 2) throw std::invalid_argument("slice_cols: expected 2-D tensor");
  const int rows = x.dim(0), cols = x.dim(1);
  if (c0 < 0 || c1 > cols || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad column range");
  const int w = c1 - c0;
  Tensor y({rows, w});
  const double* px = x.data();
  double* py = y.mutable_data();
  for (int r = 0; r < rows; ++r)
    std::copy(px + static_cast<std::int64_t>(r) * cols + c0,
              px + static_cast<std::int64_t>(r) * cols + c1,
              py + static_cast<std::int64_t>(r) * w);
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("slice_cols", {xn}, yn, [xn, yn, sh, rows, cols, c0, w](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        for (int r = 0; r < rows; ++r)
          detail::axpy(dx + static_cast<std::int64_t>(r) * cols + c0,
                       go + static_cast<std::int64_t>(r) * w, w);
      }
    });
  }
  return y;
}

inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input list");
  const int rows = xs[0].dim(0);
  int total = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != 2 || t.dim(0) != rows)
      throw std::invalid_argument("concat_cols: inputs must be 2-D with equal rows");
    total += t.dim(1);
  }
  Tensor y({rows, total});
  double* py = y.mutable_data();
  int off = 0;
  for (const Tensor& t : xs) {
    const int w = t.dim(1);
    const double* pt = t.data();
    for (int r = 0; r < rows; ++r)
      std::copy(pt + static_cast<std::int64_t>(r) * w,
                pt + static_cast<std::int64_t>(r + 1) * w,
                py + static_cast<std::int64_t>(r) * total + off);
    off += w;
  }
  bool any = false;
  std::vector<int> nodes;
  std::vector<Shape> shapes;
  std::vector<int> widths;
  for (const Tensor& t : xs) {
    nodes.push_back(tape.node_of(t));
    shapes.push_back(t.shape());
    widths.push_back(t.dim(1));
    any = any || nodes.back() >= 0;
  }
  if (tape.recording() && any) {
    const int yn = tape.intern(y);
    tape.push_op("concat_cols", nodes, yn,
                 [nodes, yn, shapes, widths, rows, total](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      int off2 = 0;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const int w = widths[k];
        if (double* dx = Tape::grad_accum(g, nodes[k], shapes[k])) {
          for (int r = 0; r < rows; ++r)
            detail::axpy(dx + static_cast<std::int64_t>(r) * w,
                         go + static_cast<std::int64_t>(r) * total + off2, w);
        }
        off2 += w;
      }
    });
  }
  return y;
}

// 4-D channel slice [c0, c1) on axis 1
inline Tensor slice_channels(Tape& tape, const Tensor& x, int c0, int c1) {
  if (x.ndim() != 4) throw std::invalid_argument("slice_channels: expected 4-D tensor");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1)
    throw std::invalid_argument("slice_channels: bad channel range");
  const int w = c1 - c0;
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  Tensor y({N, w, H, W});
  const double* px = x.data();
  double* py = y.mutable_data();
  for (int n = 0; n < N; ++n)
    std::copy(px + (static_cast<std::int64_t>(n) * C + c0) * hw,
              px + (static_cast<std::int64_t>(n) * C + c1) * hw,
              py + static_cast<std::int64_t>(n) * w * hw);
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("slice_channels", {xn}, yn,
                 [xn, yn, sh, N, C, c0, w, hw](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        for (int n = 0; n < N; ++n)
          detail::axpy(dx + (static_cast<std::int64_t>(n) * C + c0) * hw,
                       go + static_cast<std::int64_t>(n) * w * hw, w * hw);
      }
    });
  }
  return y;
}

inline Tensor concat_channels(Tape& tape, const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const int N = xs[0].dim(0), H = xs[0].dim(2), W = xs[0].dim(3);
  int C = 0;
  for (const Tensor& t : xs) {
    if (t.ndim() != 4 || t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
      throw std::invalid_argument("concat_channels: incompatible shapes");
    C += t.dim(1);
  }
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  Tensor y({N, C, H, W});
  double* py = y.mutable_data();
  int off = 0;
  for (const Tensor& t : xs) {
    const int c = t.dim(1);
    const double* pt = t.data();
    for (int n = 0; n < N; ++n)
      std::copy(pt + static_cast<std::int64_t>(n) * c * hw,
                pt + static_cast<std::int64_t>(n + 1) * c * hw,
                py + (static_cast<std::int64_t>(n) * C + off) * hw);
    off += c;
  }
  bool any = false;
  std::vector<int> nodes;
  std::vector<Shape> shapes;
  std::vector<int> chans;
  for (const Tensor& t : xs) {
    nodes.push_back(tape.node_of(t));
    shapes.push_back(t.shape());
    chans.push_back(t.dim(1));
    any = any || nodes.back() >= 0;
  }
  if (tape.recording() && any) {
    const int yn = tape.intern(y);
    tape.push_op("concat_channels", nodes, yn,
                 [nodes, yn, shapes, chans, N, C, hw](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      int off2 = 0;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        const int c = chans[k];
        if (double* dx = Tape::grad_accum(g, nodes[k], shapes[k])) {
          for (int n = 0; n < N; ++n)
            detail::axpy(dx + static_cast<std::int64_t>(n) * c * hw,
                         go + (static_cast<std::int64_t>(n) * C + off2) * hw, c * hw);
        }
        off2 += c;
      }
    });
  }
  return y;
}

// y = mask * on + (1 - mask) * off, mask N x 1 broadcast over columns.
// The mask is treated as a constant even if it carries a node.
inline Tensor lerp_mask(Tape& tape, const Tensor& on, const Tensor& off, const Tensor& mask) {
  require_same_shape(on, off, "lerp_mask");
  if (on.ndim() != 2 || mask.ndim() != 2 || mask.dim(0) != on.dim(0) || mask.dim(1) != 1)
    throw std::invalid_argument("lerp_mask: expected N x L inputs and N x 1 mask");
  const int N = on.dim(0), L = on.dim(1);
  Tensor y(on.shape());
  const double* pon = on.data();
  const double* poff = off.data();
  const double* pm = mask.data();
  double* py = y.mutable_data();
  for (int i = 0; i < N; ++i) {
    const double m = pm[i];
    const std::int64_t base = static_cast<std::int64_t>(i) * L;
    for (int j = 0; j < L; ++j) py[base + j] = m * pon[base + j] + (1.0 - m) * poff[base + j];
  }
  check_finite(y, "lerp_mask");
  const int on_n = tape.node_of(on), off_n = tape.node_of(off);
  if (tape.recording() && (on_n >= 0 || off_n >= 0)) {
    const int yn = tape.intern(y);
    const Shape sh = on.shape();
    tape.push_op("lerp_mask", {on_n, off_n}, yn,
                 [mask, on_n, off_n, yn, sh, N, L](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      const double* pm2 = mask.data();
      if (double* d = Tape::grad_accum(g, on_n, sh)) {
        for (int i = 0; i < N; ++i) {
          const std::int64_t base = static_cast<std::int64_t>(i) * L;
          for (int j = 0; j < L; ++j) d[base + j] += pm2[i] * go[base + j];
        }
      }
      if (double* d = Tape::grad_accum(g, off_n, sh)) {
        for (int i = 0; i < N; ++i) {
          const std::int64_t base = static_cast<std::int64_t>(i) * L;
          for (int j = 0; j < L; ++j) d[base + j] += (1.0 - pm2[i]) * go[base + j];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// reductions and normalizations
// ---------------------------------------------------------------------------

inline Tensor softmax(Tape& tape, const Tensor& x, int axis) {
  const detail::AxisSpan s = detail::axis_span(x.shape(), axis, "softmax");
  Tensor y(x.shape());
  const double* px = x.data();
  double* py = y.mutable_data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.len * s.inner + i;
      double m = px[base];
      for (std::int64_t k = 1; k < s.len; ++k)
        m = std::max(m, px[base + k * s.inner]);
      double z = 0.0;
      for (std::int64_t k = 0; k < s.len; ++k) {
        const double e = std::exp(px[base + k * s.inner] - m);
        py[base + k * s.inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::int64_t k = 0; k < s.len; ++k) py[base + k * s.inner] *= inv;
    }
  }
  check_finite(y, "softmax");
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("softmax", {xn}, yn, [y, xn, yn, sh, s](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        const double* py2 = y.data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
          for (std::int64_t i = 0; i < s.inner; ++i) {
            const std::int64_t base = o * s.len * s.inner + i;
            double dot = 0.0;
            for (std::int64_t k = 0; k < s.len; ++k)
              dot += go[base + k * s.inner] * py2[base + k * s.inner];
            for (std::int64_t k = 0; k < s.len; ++k)
              dx[base + k * s.inner] +=
                  py2[base + k * s.inner] * (go[base + k * s.inner] - dot);
          }
        }
      }
    });
  }
  return y;
}

// y = x / max(||x||_2 along axis, eps)
inline Tensor l2_normalize(Tape& tape, const Tensor& x, int axis, double eps = 1e-12) {
  if (!(eps > 0.0)) throw std::invalid_argument("l2_normalize: eps must be > 0");
  const detail::AxisSpan s = detail::axis_span(x.shape(), axis, "l2_normalize");
  Tensor y(x.shape());
  const double* px = x.data();
  double* py = y.mutable_data();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      const std::int64_t base = o * s.len * s.inner + i;
      double sq = 0.0;
      for (std::int64_t k = 0; k < s.len; ++k) {
        const double v = px[base + k * s.inner];
        sq += v * v;
      }
      const double norm = std::sqrt(sq);
      const double m = norm > eps ? norm : eps;
      const double inv = 1.0 / m;
      for (std::int64_t k = 0; k < s.len; ++k)
        py[base + k * s.inner] = px[base + k * s.inner] * inv;
    }
  }
  check_finite(y, "l2_normalize");
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("l2_normalize", {xn}, yn, [x, xn, yn, sh, s, eps](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        const double* px2 = x.data();
        for (std::int64_t o = 0; o < s.outer; ++o) {
          for (std::int64_t i = 0; i < s.inner; ++i) {
            const std::int64_t base = o * s.len * s.inner + i;
            double sq = 0.0;
            for (std::int64_t k = 0; k < s.len; ++k) {
              const double v = px2[base + k * s.inner];
              sq += v * v;
            }
            const double norm = std::sqrt(sq);
            if (norm > eps) {
              double dot = 0.0;
              for (std::int64_t k = 0; k < s.len; ++k)
                dot += go[base + k * s.inner] * px2[base + k * s.inner];
              const double inv = 1.0 / norm;
              const double inv3 = inv * inv * inv;
              for (std::int64_t k = 0; k < s.len; ++k)
                dx[base + k * s.inner] +=
                    go[base + k * s.inner] * inv - px2[base + k * s.inner] * dot * inv3;
            } else {
              const double inv = 1.0 / eps;
              for (std::int64_t k = 0; k < s.len; ++k)
                dx[base + k * s.inner] += go[base + k * s.inner] * inv;
            }
          }
        }
      }
    });
  }
  return y;
}

// N x C x H x W -> N x C
inline Tensor global_avg_pool(Tape& tape, const Tensor& x) {
  if (x.ndim() != 4) throw std::invalid_argument("global_avg_pool: expected 4-D tensor");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  Tensor y({N, C});
  const double* px = x.data();
  double* py = y.mutable_data();
  const double inv = 1.0 / static_cast<double>(hw);
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    double acc = 0.0;
    const double* p = px + nc * hw;
    for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
    py[nc] = acc * inv;
  }
  check_finite(y, "global_avg_pool");
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("global_avg_pool", {xn}, yn, [xn, yn, sh, N, C, hw, inv](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
          const double v = go[nc] * inv;
          double* p = dx + nc * hw;
          for (std::int64_t i = 0; i < hw; ++i) p[i] += v;
        }
      }
    });
  }
  return y;
}

// N x C -> N x C x H x W (each spatial location gets the same vector)
inline Tensor broadcast_spatial(Tape& tape, const Tensor& v, int H, int W) {
  if (v.ndim() != 2) throw std::invalid_argument("broadcast_spatial: expected 2-D tensor");
  const int N = v.dim(0), C = v.dim(1);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  Tensor y({N, C, H, W});
  const double* pv = v.data();
  double* py = y.mutable_data();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    double* p = py + nc * hw;
    const double val = pv[nc];
    for (std::int64_t i = 0; i < hw; ++i) p[i] = val;
  }
  const int vn = tape.node_of(v);
  if (tape.recording() && vn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = v.shape();
    tape.push_op("broadcast_spatial", {vn}, yn, [vn, yn, sh, N, C, hw](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dv = Tape::grad_accum(g, vn, sh)) {
        for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
          const double* p = go + nc * hw;
          double acc = 0.0;
          for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
          dv[nc] += acc;
        }
      }
    });
  }
  return y;
}

// scalar = sum_i w_i * x_i (fixed functional head used by gradient checks)
inline Tensor weighted_sum_all(Tape& tape, const Tensor& x, const std::vector<double>& w) {
  if (static_cast<std::int64_t>(w.size()) != x.numel())
    throw std::invalid_argument("weighted_sum_all: weight count mismatch");
  const double* px = x.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * px[i];
  Tensor y = Tensor::scalar(acc);
  check_finite(y, "weighted_sum_all");
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("weighted_sum_all", {xn}, yn, [w, xn, yn, sh](std::vector<Tensor>& g) {
      const double go = g[static_cast<std::size_t>(yn)].data()[0];
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        for (std::size_t i = 0; i < w.size(); ++i) dx[i] += go * w[i];
      }
    });
  }
  return y;
}

// scalar = sum_i w_i * x_i / denom over a 1-D tensor (batch objective)
inline Tensor weighted_mean(Tape& tape, const Tensor& x, const std::vector<double>& w,
                            double denom) {
  if (x.ndim() != 1) throw std::invalid_argument("weighted_mean: expected 1-D tensor");
  if (static_cast<std::int64_t>(w.size()) != x.numel())
    throw std::invalid_argument("weighted_mean: weight count mismatch");
  if (!(denom > 0.0)) throw std::invalid_argument("weighted_mean: denom must be > 0");
  const double* px = x.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) acc += w[i] * px[i];
  Tensor y = Tensor::scalar(acc / denom);
  check_finite(y, "weighted_mean");
  const int xn = tape.node_of(x);
  if (tape.recording() && xn >= 0) {
    const int yn = tape.intern(y);
    const Shape sh = x.shape();
    tape.push_op("weighted_mean", {xn}, yn, [w, xn, yn, sh, denom](std::vector<Tensor>& g) {
      const double go = g[static_cast<std::size_t>(yn)].data()[0];
      if (double* dx = Tape::grad_accum(g, xn, sh)) {
        for (std::size_t i = 0; i < w.size(); ++i) dx[i] += go * w[i] / denom;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// y = x * W^T + b, x: N x I, W: O x I, b: O
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || b.ndim() != 1)
    throw std::invalid_argument("linear: expected x N x I, w O x I, b O");
  const int N = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (w.dim(1) != I || b.dim(0) != O)
    throw std::invalid_argument("linear: dimension mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(w.shape()));
  Tensor y({N, O});
  {
    CMapRM xm(x.data(), N, I);
    CMapRM wm(w.data(), O, I);
    CVecMap bv(b.data(), O);
    MapRM ym(y.mutable_data(), N, O);
    ym.noalias() = xm * wm.transpose();
    ym.rowwise() += bv.transpose();
  }
  check_finite(y, "linear");
  const int xn = tape.node_of(x), wn = tape.node_of(w), bn = tape.node_of(b);
  if (tape.recording() && (xn >= 0 || wn >= 0 || bn >= 0)) {
    const int yn = tape.intern(y);
    const Shape xs = x.shape(), ws = w.shape(), bs = b.shape();
    tape.push_op("linear", {xn, wn, bn}, yn,
                 [x, w, xn, wn, bn, yn, xs, ws, bs, N, I, O](std::vector<Tensor>& g) {
      CMapRM gm(g[static_cast<std::size_t>(yn)].data(), N, O);
      if (double* dx = Tape::grad_accum(g, xn, xs)) {
        CMapRM wm(w.data(), O, I);
        MapRM dxm(dx, N, I);
        dxm.noalias() += gm * wm;
      }
      if (double* dw = Tape::grad_accum(g, wn, ws)) {
        CMapRM xm(x.data(), N, I);
        MapRM dwm(dw, O, I);
        dwm.noalias() += gm.transpose() * xm;
      }
      if (double* db = Tape::grad_accum(g, bn, bs)) {
        VecMap dbv(db, O);
        dbv.noalias() += gm.colwise().sum().transpose();
      }
    });
  }
  return y;
}

// plain 2-D matmul, a: m x k, b: k x n
inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor y({m, n});
  {
    CMapRM am(a.data(), m, k);
    CMapRM bm(b.data(), k, n);
    MapRM ym(y.mutable_data(), m, n);
    ym.noalias() = am * bm;
  }
  check_finite(y, "matmul");
  const int an = tape.node_of(a), bn = tape.node_of(b);
  if (tape.recording() && (an >= 0 || bn >= 0)) {
    const int yn = tape.intern(y);
    const Shape as = a.shape(), bs = b.shape();
    tape.push_op("matmul", {an, bn}, yn, [a, b, an, bn, yn, as, bs, m, k, n](std::vector<Tensor>& g) {
      CMapRM gm(g[static_cast<std::size_t>(yn)].data(), m, n);
      if (double* da = Tape::grad_accum(g, an, as)) {
        CMapRM bm(b.data(), k, n);
        MapRM dam(da, m, k);
        dam.noalias() += gm * bm.transpose();
      }
      if (double* db = Tape::grad_accum(g, bn, bs)) {
        CMapRM am(a.data(), m, k);
        MapRM dbm(db, k, n);
        dbm.noalias() += am.transpose() * gm;
      }
    });
  }
  return y;
}

// Batched matmul over leading dim N with optional per-operand transposes.
inline Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
    throw std::invalid_argument("bmm: expected 3-D tensors with equal batch");
  const int N = a.dim(0);
  const int ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const int m = trans_a ? ac : ar;
  const int ka = trans_a ? ar : ac;
  const int kb = trans_b ? bc : br;
  const int n = trans_b ? br : bc;
  if (ka != kb)
    throw std::invalid_argument("bmm: inner dimension mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  Tensor y({N, m, n});
  {
    double* py = y.mutable_data();
    const double* pa = a.data();
    const double* pb = b.data();
    for (int i = 0; i < N; ++i) {
      CMapRM am(pa + static_cast<std::int64_t>(i) * ar * ac, ar, ac);
      CMapRM bm(pb + static_cast<std::int64_t>(i) * br * bc, br, bc);
      MapRM ym(py + static_cast<std::int64_t>(i) * m * n, m, n);
      if (!trans_a && !trans_b) ym.noalias() = am * bm;
      else if (trans_a && !trans_b) ym.noalias() = am.transpose() * bm;
      else if (!trans_a && trans_b) ym.noalias() = am * bm.transpose();
      else ym.noalias() = am.transpose() * bm.transpose();
    }
  }
  check_finite(y, "bmm");
  const int an = tape.node_of(a), bn = tape.node_of(b);
  if (tape.recording() && (an >= 0 || bn >= 0)) {
    const int yn = tape.intern(y);
    const Shape as = a.shape(), bs = b.shape();
    tape.push_op("bmm", {an, bn}, yn,
                 [a, b, an, bn, yn, as, bs, N, ar, ac, br, bc, m, n, trans_a,
                  trans_b](std::vector<Tensor>& g) {
      const double* pg = g[static_cast<std::size_t>(yn)].data();
      double* da = Tape::grad_accum(g, an, as);
      double* db = Tape::grad_accum(g, bn, bs);
      const double* pa = a.data();
      const double* pb = b.data();
      for (int i = 0; i < N; ++i) {
        CMapRM gm(pg + static_cast<std::int64_t>(i) * m * n, m, n);
        CMapRM am(pa + static_cast<std::int64_t>(i) * ar * ac, ar, ac);
        CMapRM bm(pb + static_cast<std::int64_t>(i) * br * bc, br, bc);
        if (da) {
          MapRM dam(da + static_cast<std::int64_t>(i) * ar * ac, ar, ac);
          if (!trans_a && !trans_b) dam.noalias() += gm * bm.transpose();
          else if (trans_a && !trans_b) dam.noalias() += bm * gm.transpose();
          else if (!trans_a && trans_b) dam.noalias() += gm * bm;
          else dam.noalias() += bm.transpose() * gm.transpose();
        }
        if (db) {
          MapRM dbm(db + static_cast<std::int64_t>(i) * br * bc, br, bc);
          if (!trans_a && !trans_b) dbm.noalias() += am.transpose() * gm;
          else if (trans_a && !trans_b) dbm.noalias() += am * gm;
          else if (!trans_a && trans_b) dbm.noalias() += gm.transpose() * am;
          else dbm.noalias() += gm.transpose() * am.transpose();
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
  int N, Ci, H, W, Co, kh, kw, stride, pad, Ho, Wo;
  std::int64_t K() const { return static_cast<std::int64_t>(Ci) * kh * kw; }
  std::int64_t M() const { return static_cast<std::int64_t>(N) * Ho * Wo; }
};

inline void im2col(const double* x, const ConvDims& d, double* cols) {
  const std::int64_t hw = static_cast<std::int64_t>(d.H) * d.W;
  const std::int64_t ohw = static_cast<std::int64_t>(d.Ho) * d.Wo;
  const std::int64_t M = d.M();
  for (int ci = 0; ci < d.Ci; ++ci) {
    for (int dy = 0; dy < d.kh; ++dy) {
      for (int dx = 0; dx < d.kw; ++dx) {
        const std::int64_t k = (static_cast<std::int64_t>(ci) * d.kh + dy) * d.kw + dx;
        double* row = cols + k * M;
        for (int n = 0; n < d.N; ++n) {
          const double* xn = x + (static_cast<std::int64_t>(n) * d.Ci + ci) * hw;
          double* out = row + static_cast<std::int64_t>(n) * ohw;
          for (int oh = 0; oh < d.Ho; ++oh) {
            const int ih = oh * d.stride - d.pad + dy;
            if (ih < 0 || ih >= d.H) {
              std::fill(out, out + d.Wo, 0.0);
              out += d.Wo;
              continue;
            }
            const double* xr = xn + static_cast<std::int64_t>(ih) * d.W;
            for (int ow = 0; ow < d.Wo; ++ow) {
              const int iw = ow * d.stride - d.pad + dx;
              *out++ = (iw < 0 || iw >= d.W) ? 0.0 : xr[iw];
            }
          }
        }
      }
    }
  }
}

inline void col2im_accum(const double* cols, const ConvDims& d, double* dx) {
  const std::int64_t hw = static_cast<std::int64_t>(d.H) * d.W;
  const std::int64_t ohw = static_cast<std::int64_t>(d.Ho) * d.Wo;
  const std::int64_t M = d.M();
  for (int ci = 0; ci < d.Ci; ++ci) {
    for (int dy = 0; dy < d.kh; ++dy) {
      for (int dx2 = 0; dx2 < d.kw; ++dx2) {
        const std::int64_t k = (static_cast<std::int64_t>(ci) * d.kh + dy) * d.kw + dx2;
        const double* row = cols + k * M;
        for (int n = 0; n < d.N; ++n) {
          double* xn = dx + (static_cast<std::int64_t>(n) * d.Ci + ci) * hw;
          const double* in = row + static_cast<std::int64_t>(n) * ohw;
          for (int oh = 0; oh < d.Ho; ++oh) {
            const int ih = oh * d.stride - d.pad + dy;
            if (ih < 0 || ih >= d.H) {
              in += d.Wo;
              continue;
            }
            double* xr = xn + static_cast<std::int64_t>(ih) * d.W;
            for (int ow = 0; ow < d.Wo; ++ow) {
              const int iw = ow * d.stride - d.pad + dx2;
              if (iw >= 0 && iw < d.W) xr[iw] += in[ow];
            }
            in += d.Wo;
          }
        }
      }
    }
  }
}

}  // namespace detail

// x: N x Ci x H x W, w: Co x Ci x kh x kw, b: Co
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& b,
                     int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || b.ndim() != 1)
    throw std::invalid_argument("conv2d: expected 4-D input and weights, 1-D bias");
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride or pad");
  detail::ConvDims d;
  d.N = x.dim(0); d.Ci = x.dim(1); d.H = x.dim(2); d.W = x.dim(3);
  d.Co = w.dim(0); d.kh = w.dim(2); d.kw = w.dim(3);
  d.stride = stride; d.pad = pad;
  if (w.dim(1) != d.Ci)
    throw std::invalid_argument("conv2d: channel mismatch " + shape_str(x.shape()) +
                                " vs " + shape_str(w.shape()));
  if (b.dim(0) != d.Co) throw std::invalid_argument("conv2d: bias size mismatch");
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  if (d.Ho < 1 || d.Wo < 1) throw std::invalid_argument("conv2d: output would be empty");

  const bool pointwise = (d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0);
  const std::int64_t K = d.K();
  const std::int64_t M = d.M();
  const std::int64_t ohw = static_cast<std::int64_t>(d.Ho) * d.Wo;

  Tensor y({d.N, d.Co, d.Ho, d.Wo});
  std::shared_ptr<Buffer> cols;
  {
    double* py = y.mutable_data();
    const double* pb = b.data();
    if (pointwise) {
      // 1x1 stride-1: per-sample GEMM directly on the feature map
      for (int n = 0; n < d.N; ++n) {
        CMapRM xm(x.data() + static_cast<std::int64_t>(n) * d.Ci * ohw, d.Ci, ohw);
        CMapRM wm(w.data(), d.Co, d.Ci);
        MapRM ym(py + static_cast<std::int64_t>(n) * d.Co * ohw, d.Co, ohw);
        ym.noalias() = wm * xm;
        ym.colwise() += CVecMap(pb, d.Co);
      }
    } else {
      cols = std::make_shared<Buffer>(static_cast<std::size_t>(K * M));
      detail::im2col(x.data(), d, cols->data());
      Buffer ybuf(static_cast<std::size_t>(d.Co) * M);
      {
        CMapRM wm(w.data(), d.Co, static_cast<int>(K));
        CMapRM cm(cols->data(), static_cast<int>(K), static_cast<int>(M));
        MapRM ym(ybuf.data(), d.Co, static_cast<int>(M));
        ym.noalias() = wm * cm;
      }
      for (int n = 0; n < d.N; ++n)
        for (int co = 0; co < d.Co; ++co) {
          const double* src = ybuf.data() + co * M + static_cast<std::int64_t>(n) * ohw;
          double* dst = py + (static_cast<std::int64_t>(n) * d.Co + co) * ohw;
          const double bias = pb[co];
          for (std::int64_t i = 0; i < ohw; ++i) dst[i] = src[i] + bias;
        }
    }
  }
  check_finite(y, "conv2d");

  const int xn = tape.node_of(x), wn = tape.node_of(w), bn = tape.node_of(b);
  if (tape.recording() && (xn >= 0 || wn >= 0 || bn >= 0)) {
    const int yn = tape.intern(y);
    const Shape xs = x.shape(), ws = w.shape(), bs = b.shape();
    tape.push_op("conv2d", {xn, wn, bn}, yn,
                 [x, w, cols, xn, wn, bn, yn, xs, ws, bs, d, K, M, ohw,
                  pointwise](std::vector<Tensor>& g) {
      const double* pg = g[static_cast<std::size_t>(yn)].data();
      double* dx = Tape::grad_accum(g, xn, xs);
      double* dw = Tape::grad_accum(g, wn, ws);
      double* db = Tape::grad_accum(g, bn, bs);
      if (pointwise) {
        for (int n = 0; n < d.N; ++n) {
          CMapRM gm(pg + static_cast<std::int64_t>(n) * d.Co * ohw, d.Co, ohw);
          if (dx) {
            CMapRM wm(w.data(), d.Co, d.Ci);
            MapRM dxm(dx + static_cast<std::int64_t>(n) * d.Ci * ohw, d.Ci, ohw);
            dxm.noalias() += wm.transpose() * gm;
          }
          if (dw) {
            CMapRM xm(x.data() + static_cast<std::int64_t>(n) * d.Ci * ohw, d.Ci, ohw);
            MapRM dwm(dw, d.Co, d.Ci);
            dwm.noalias() += gm * xm.transpose();
          }
          if (db) VecMap(db, d.Co).noalias() += gm.rowwise().sum();
        }
      } else {
        // gather dY into Co x M layout matching the saved column matrix
        Buffer gbuf(static_cast<std::size_t>(d.Co) * M);
        for (int n = 0; n < d.N; ++n)
          for (int co = 0; co < d.Co; ++co)
            std::copy(pg + (static_cast<std::int64_t>(n) * d.Co + co) * ohw,
                      pg + (static_cast<std::int64_t>(n) * d.Co + co + 1) * ohw,
                      gbuf.data() + co * M + static_cast<std::int64_t>(n) * ohw);
        CMapRM gm(gbuf.data(), d.Co, static_cast<int>(M));
        if (dw) {
          CMapRM cm(cols->data(), static_cast<int>(K), static_cast<int>(M));
          MapRM dwm(dw, d.Co, static_cast<int>(K));
          dwm.noalias() += gm * cm.transpose();
        }
        if (db) VecMap(db, d.Co).noalias() += gm.rowwise().sum();
        if (dx) {
          Buffer dcols(static_cast<std::size_t>(K * M));
          CMapRM wm(w.data(), d.Co, static_cast<int>(K));
          MapRM dcm(dcols.data(), static_cast<int>(K), static_cast<int>(M));
          dcm.noalias() = wm.transpose() * gm;
          detail::col2im_accum(dcols.data(), d, dx);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// embedding and loss
// ---------------------------------------------------------------------------

inline Tensor embedding_gather(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw std::invalid_argument("embedding_gather: expected 2-D table");
  const int V = table.dim(0), E = table.dim(1);
  const int N = static_cast<int>(ids.size());
  for (int id : ids)
    if (id < 0 || id >= V)
      throw std::invalid_argument("embedding_gather: token index out of range");
  Tensor y({N, E});
  const double* pt = table.data();
  double* py = y.mutable_data();
  for (int i = 0; i < N; ++i)
    std::copy(pt + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)]) * E,
              pt + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)] + 1) * E,
              py + static_cast<std::int64_t>(i) * E);
  const int tn = tape.node_of(table);
  if (tape.recording() && tn >= 0) {
    const int yn = tape.intern(y);
    const Shape ts = table.shape();
    tape.push_op("embedding_gather", {tn}, yn, [ids, tn, yn, ts, E, N](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dt = Tape::grad_accum(g, tn, ts)) {
        for (int i = 0; i < N; ++i)
          detail::axpy(dt + static_cast<std::int64_t>(ids[static_cast<std::size_t>(i)]) * E,
                       go + static_cast<std::int64_t>(i) * E, E);
      }
    });
  }
  return y;
}

// Per-sample negative log softmax probability of the integer label, shape N.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy: expected 2-D logits");
  const int N = logits.dim(0), K = logits.dim(1);
  if (static_cast<int>(labels.size()) != N)
    throw std::invalid_argument("cross_entropy: label count mismatch");
  for (int l : labels)
    if (l < 0 || l >= K) throw std::invalid_argument("cross_entropy: label out of range");
  Tensor y({N});
  auto probs = std::make_shared<Buffer>(static_cast<std::size_t>(N) * K);
  const double* pl = logits.data();
  double* py = y.mutable_data();
  for (int i = 0; i < N; ++i) {
    const double* row = pl + static_cast<std::int64_t>(i) * K;
    double m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
    const double lse = m + std::log(z);
    py[i] = lse - row[labels[static_cast<std::size_t>(i)]];
    double* prow = probs->data() + static_cast<std::int64_t>(i) * K;
    for (int k = 0; k < K; ++k) prow[k] = std::exp(row[k] - lse);
  }
  check_finite(y, "cross_entropy");
  const int ln = tape.node_of(logits);
  if (tape.recording() && ln >= 0) {
    const int yn = tape.intern(y);
    const Shape ls = logits.shape();
    tape.push_op("cross_entropy", {ln}, yn, [probs, labels, ln, yn, ls, N, K](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dl = Tape::grad_accum(g, ln, ls)) {
        for (int i = 0; i < N; ++i) {
          const double gi = go[i];
          const double* prow = probs->data() + static_cast<std::int64_t>(i) * K;
          double* drow = dl + static_cast<std::int64_t>(i) * K;
          for (int k = 0; k < K; ++k) drow[k] += gi * prow[k];
          drow[labels[static_cast<std::size_t>(i)]] -= gi;
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// spatial transformer primitives
// ---------------------------------------------------------------------------

// Normalized [-1,1] coordinate of pixel j along an axis of given size.
inline double pixel_to_norm(int j, int size) {
  return size > 1 ? 2.0 * static_cast<double>(j) / static_cast<double>(size - 1) - 1.0 : 0.0;
}

// Normalized coordinate -> pixel units. Coordinates within kPixelSnap of a
// pixel center are treated as exactly on it, so sampling through an identity
// transform copies the input. Part of the sampler contract.
inline constexpr double kPixelSnap = 1e-8;

inline double norm_to_pixel(double coord, int size) {
  if (size <= 1) return 0.0;
  double p = (coord + 1.0) * 0.5 * static_cast<double>(size - 1);
  const double r = std::nearbyint(p);
  if (std::abs(p - r) <= kPixelSnap) p = r;
  return p;
}

// theta: N x 4 rows [s1, s2, tx, ty] -> grid N x H x W x 2 with last axis (x, y):
// x = s1 * bx + tx, y = s2 * by + ty over the canonical base grid.
inline Tensor affine_grid(Tape& tape, const Tensor& theta, int H, int W) {
  if (theta.ndim() != 2 || theta.dim(1) != 4)
    throw std::invalid_argument("affine_grid: expected N x 4 parameters");
  if (H < 1 || W < 1) throw std::invalid_argument("affine_grid: bad output size");
  const int N = theta.dim(0);
  Tensor y({N, H, W, 2});
  const double* pt = theta.data();
  double* py = y.mutable_data();
  for (int n = 0; n < N; ++n) {
    const double s1 = pt[n * 4 + 0], s2 = pt[n * 4 + 1];
    const double tx = pt[n * 4 + 2], ty = pt[n * 4 + 3];
    double* out = py + static_cast<std::int64_t>(n) * H * W * 2;
    for (int r = 0; r < H; ++r) {
      const double by = pixel_to_norm(r, H);
      for (int c = 0; c < W; ++c) {
        const double bx = pixel_to_norm(c, W);
        *out++ = s1 * bx + tx;
        *out++ = s2 * by + ty;
      }
    }
  }
  check_finite(y, "affine_grid");
  const int tn = tape.node_of(theta);
  if (tape.recording() && tn >= 0) {
    const int yn = tape.intern(y);
    const Shape ts = theta.shape();
    tape.push_op("affine_grid", {tn}, yn, [tn, yn, ts, N, H, W](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dt = Tape::grad_accum(g, tn, ts)) {
        for (int n = 0; n < N; ++n) {
          const double* gn = go + static_cast<std::int64_t>(n) * H * W * 2;
          double ds1 = 0.0, ds2 = 0.0, dtx = 0.0, dty = 0.0;
          for (int r = 0; r < H; ++r) {
            const double by = pixel_to_norm(r, H);
            for (int c = 0; c < W; ++c) {
              const double bx = pixel_to_norm(c, W);
              const double gx = gn[(static_cast<std::int64_t>(r) * W + c) * 2];
              const double gy = gn[(static_cast<std::int64_t>(r) * W + c) * 2 + 1];
              ds1 += bx * gx;
              ds2 += by * gy;
              dtx += gx;
              dty += gy;
            }
          }
          dt[n * 4 + 0] += ds1;
          dt[n * 4 + 1] += ds2;
          dt[n * 4 + 2] += dtx;
          dt[n * 4 + 3] += dty;
        }
      }
    });
  }
  return y;
}

// f: N x C x H x W, grid: N x Ho x Wo x 2 normalized coords, zero padding
// outside the source extent. Gradients flow to both the features and the
// grid coordinates.
inline Tensor bilinear_sample(Tape& tape, const Tensor& f, const Tensor& grid) {
  if (f.ndim() != 4 || grid.ndim() != 4 || grid.dim(3) != 2)
    throw std::invalid_argument("bilinear_sample: expected N x C x H x W and N x Ho x Wo x 2");
  if (grid.dim(0) != f.dim(0))
    throw std::invalid_argument("bilinear_sample: batch mismatch");
  const int N = f.dim(0), C = f.dim(1), H = f.dim(2), W = f.dim(3);
  const int Ho = grid.dim(1), Wo = grid.dim(2);
  const std::int64_t hw = static_cast<std::int64_t>(H) * W;
  const std::int64_t ohw = static_cast<std::int64_t>(Ho) * Wo;
  Tensor y({N, C, Ho, Wo});
  {
    const double* pf = f.data();
    const double* pgrid = grid.data();
    double* py = y.mutable_data();
    for (int n = 0; n < N; ++n) {
      const double* gbase = pgrid + static_cast<std::int64_t>(n) * ohw * 2;
      const double* fbase = pf + static_cast<std::int64_t>(n) * C * hw;
      double* obase = py + static_cast<std::int64_t>(n) * C * ohw;
      for (std::int64_t p = 0; p < ohw; ++p) {
        const double px = norm_to_pixel(gbase[p * 2], W);
        const double pyc = norm_to_pixel(gbase[p * 2 + 1], H);
        const int x0 = static_cast<int>(std::floor(px));
        const int y0 = static_cast<int>(std::floor(pyc));
        const double wx = px - x0, wy = pyc - y0;
        const double w00 = (1.0 - wx) * (1.0 - wy);
        const double w01 = wx * (1.0 - wy);
        const double w10 = (1.0 - wx) * wy;
        const double w11 = wx * wy;
        const bool v00 = (x0 >= 0 && x0 < W && y0 >= 0 && y0 < H);
        const bool v01 = (x0 + 1 >= 0 && x0 + 1 < W && y0 >= 0 && y0 < H);
        const bool v10 = (x0 >= 0 && x0 < W && y0 + 1 >= 0 && y0 + 1 < H);
        const bool v11 = (x0 + 1 >= 0 && x0 + 1 < W && y0 + 1 >= 0 && y0 + 1 < H);
        const std::int64_t i00 = static_cast<std::int64_t>(y0) * W + x0;
        for (int c = 0; c < C; ++c) {
          const double* fc = fbase + static_cast<std::int64_t>(c) * hw;
          double acc = 0.0;
          if (v00) acc += w00 * fc[i00];
          if (v01) acc += w01 * fc[i00 + 1];
          if (v10) acc += w10 * fc[i00 + W];
          if (v11) acc += w11 * fc[i00 + W + 1];
          obase[static_cast<std::int64_t>(c) * ohw + p] = acc;
        }
      }
    }
  }
  check_finite(y, "bilinear_sample");
  const int fn = tape.node_of(f), gn = tape.node_of(grid);
  if (tape.recording() && (fn >= 0 || gn >= 0)) {
    const int yn = tape.intern(y);
    const Shape fs = f.shape(), gs = grid.shape();
    tape.push_op("bilinear_sample", {fn, gn}, yn,
                 [f, grid, fn, gn, yn, fs, gs, N, C, H, W, Ho, Wo, hw,
                  ohw](std::vector<Tensor>& g) {
      const double* pg = g[static_cast<std::size_t>(yn)].data();
      double* df = Tape::grad_accum(g, fn, fs);
      double* dgrid = Tape::grad_accum(g, gn, gs);
      const double* pf = f.data();
      const double* pgrid = grid.data();
      const double sx = W > 1 ? 0.5 * static_cast<double>(W - 1) : 0.0;
      const double sy = H > 1 ? 0.5 * static_cast<double>(H - 1) : 0.0;
      for (int n = 0; n < N; ++n) {
        const double* gbase = pgrid + static_cast<std::int64_t>(n) * ohw * 2;
        const double* fbase = pf + static_cast<std::int64_t>(n) * C * hw;
        const double* obase = pg + static_cast<std::int64_t>(n) * C * ohw;
        for (std::int64_t p = 0; p < ohw; ++p) {
          const double px = norm_to_pixel(gbase[p * 2], W);
          const double pyc = norm_to_pixel(gbase[p * 2 + 1], H);
          const int x0 = static_cast<int>(std::floor(px));
          const int y0 = static_cast<int>(std::floor(pyc));
          const double wx = px - x0, wy = pyc - y0;
          const bool vx0 = (x0 >= 0 && x0 < W);
          const bool vx1 = (x0 + 1 >= 0 && x0 + 1 < W);
          const bool vy0 = (y0 >= 0 && y0 < H);
          const bool vy1 = (y0 + 1 >= 0 && y0 + 1 < H);
          const std::int64_t i00 = static_cast<std::int64_t>(y0) * W + x0;
          double dpx = 0.0, dpy = 0.0;
          for (int c = 0; c < C; ++c) {
            const double go = obase[static_cast<std::int64_t>(c) * ohw + p];
            if (go == 0.0 && !df) continue;
            const double* fc = fbase + static_cast<std::int64_t>(c) * hw;
            const double f00 = (vx0 && vy0) ? fc[i00] : 0.0;
            const double f01 = (vx1 && vy0) ? fc[i00 + 1] : 0.0;
            const double f10 = (vx0 && vy1) ? fc[i00 + W] : 0.0;
            const double f11 = (vx1 && vy1) ? fc[i00 + W + 1] : 0.0;
            if (df) {
              double* dfc = df + (static_cast<std::int64_t>(n) * C + c) * hw;
              if (vx0 && vy0) dfc[i00] += go * (1.0 - wx) * (1.0 - wy);
              if (vx1 && vy0) dfc[i00 + 1] += go * wx * (1.0 - wy);
              if (vx0 && vy1) dfc[i00 + W] += go * (1.0 - wx) * wy;
              if (vx1 && vy1) dfc[i00 + W + 1] += go * wx * wy;
            }
            dpx += go * ((f01 - f00) * (1.0 - wy) + (f11 - f10) * wy);
            dpy += go * ((f10 - f00) * (1.0 - wx) + (f11 - f01) * wx);
          }
          if (dgrid) {
            double* dg = dgrid + static_cast<std::int64_t>(n) * ohw * 2 + p * 2;
            dg[0] += dpx * sx;
            dg[1] += dpy * sy;
          }
        }
      }
    });
  }
  return y;
}

// raw N x 4 -> [s_max*sigmoid(r0), s_max*sigmoid(r1), tanh(r2), tanh(r3)]
inline Tensor squash_affine(Tape& tape, const Tensor& raw, double scale_max) {
  if (raw.ndim() != 2 || raw.dim(1) != 4)
    throw std::invalid_argument("squash_affine: expected N x 4 tensor");
  if (!(scale_max > 0.0)) throw std::invalid_argument("squash_affine: scale_max must be > 0");
  const int N = raw.dim(0);
  Tensor y(raw.shape());
  const double* pr = raw.data();
  double* py = y.mutable_data();
  for (int n = 0; n < N; ++n) {
    for (int j = 0; j < 2; ++j) {
      const double v = pr[n * 4 + j];
      const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                : std::exp(v) / (1.0 + std::exp(v));
      py[n * 4 + j] = scale_max * s;
    }
    py[n * 4 + 2] = std::tanh(pr[n * 4 + 2]);
    py[n * 4 + 3] = std::tanh(pr[n * 4 + 3]);
  }
  check_finite(y, "squash_affine");
  const int rn = tape.node_of(raw);
  if (tape.recording() && rn >= 0) {
    const int yn = tape.intern(y);
    const Shape rs = raw.shape();
    tape.push_op("squash_affine", {rn}, yn, [y, rn, yn, rs, N, scale_max](std::vector<Tensor>& g) {
      const double* go = g[static_cast<std::size_t>(yn)].data();
      if (double* dr = Tape::grad_accum(g, rn, rs)) {
        const double* py2 = y.data();
        for (int n = 0; n < N; ++n) {
          for (int j = 0; j < 2; ++j) {
            const double s = py2[n * 4 + j] / scale_max;
            dr[n * 4 + j] += go[n * 4 + j] * scale_max * s * (1.0 - s);
          }
          for (int j = 2; j < 4; ++j) {
            const double t = py2[n * 4 + j];
            dr[n * 4 + j] += go[n * 4 + j] * (1.0 - t * t);
          }
        }
      }
    });
  }
  return y;
}

}  // namespace vqacl
