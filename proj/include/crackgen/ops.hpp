#pragma once

// Differentiable tensor operations recorded on a Graph. All spatial ops work on
// channel-major tensors (channels x pixels, see Tensor).

#include "crackgen/autograd.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace crackgen::ops {

namespace detail {

template <typename Scalar>
Matrix<Scalar> im2col(const Tensor<Scalar>& in, Index kernel) {
  const Index c = in.channels(), h = in.height, w = in.width, pad = kernel / 2;
  Matrix<Scalar> col = Matrix<Scalar>::Zero(c * kernel * kernel, h * w);
  for (Index ky = 0; ky < kernel; ++ky)
    for (Index kx = 0; kx < kernel; ++kx) {
      const Index row0 = (ky * kernel + kx) * c;
      for (Index y = 0; y < h; ++y) {
        const Index sy = y + ky - pad;
        if (sy < 0 || sy >= h) continue;
        for (Index x = 0; x < w; ++x) {
          const Index sx = x + kx - pad;
          if (sx < 0 || sx >= w) continue;
          col.block(row0, y * w + x, c, 1) = in.data.col(sy * w + sx);
        }
      }
    }
  return col;
}

template <typename Scalar>
Matrix<Scalar> col2im(const Matrix<Scalar>& col, Index c, Index h, Index w, Index kernel) {
  const Index pad = kernel / 2;
  Matrix<Scalar> out = Matrix<Scalar>::Zero(c, h * w);
  for (Index ky = 0; ky < kernel; ++ky)
    for (Index kx = 0; kx < kernel; ++kx) {
      const Index row0 = (ky * kernel + kx) * c;
      for (Index y = 0; y < h; ++y) {
        const Index sy = y + ky - pad;
        if (sy < 0 || sy >= h) continue;
        for (Index x = 0; x < w; ++x) {
          const Index sx = x + kx - pad;
          if (sx < 0 || sx >= w) continue;
          out.col(sy * w + sx) += col.block(row0, y * w + x, c, 1);
        }
      }
    }
  return out;
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

}  // namespace detail

/// Same-padded stride-1 convolution. Weight is Cout x (k*k*Cin), bias Cout x 1.
template <typename Scalar>
Var conv2d(Graph<Scalar>& g, Var x, Var weight, Var bias, Index kernel) {
  const Tensor<Scalar>& in = g.value(x);
  const Matrix<Scalar>& wt = g.data(weight);
  if (wt.cols() != kernel * kernel * in.channels())
    throw ShapeError("conv2d: weight expects " + std::to_string(wt.cols() / (kernel * kernel)) +
                     " input channels, got " + shape_string(in));
  Matrix<Scalar> col = kernel == 1 ? Matrix<Scalar>() : detail::im2col(in, kernel);
  const Matrix<Scalar>& src = kernel == 1 ? in.data : col;
  Tensor<Scalar> out(wt * src, in.height, in.width);
  if (bias) out.data.colwise() += g.data(bias).col(0);
  const bool rg = g.requires_grad(x) || g.requires_grad(weight) || g.requires_grad(bias);
  const Index c = in.channels(), h = in.height, w = in.width;
  return g.record(std::move(out), rg,
                  [=, col = std::move(col)](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    const Matrix<Scalar>& s = kernel == 1 ? gr.data(x) : col;
                    if (gr.requires_grad(weight)) gr.accumulate(weight, dy * s.transpose());
                    if (gr.requires_grad(bias)) gr.accumulate(bias, dy.rowwise().sum());
                    if (gr.requires_grad(x)) {
                      if (kernel == 1)
                        gr.accumulate(x, gr.data(weight).transpose() * dy);
                      else
                        gr.accumulate(x, detail::col2im<Scalar>(gr.data(weight).transpose() * dy,
                                                                c, h, w, kernel));
                    }
                  });
}

/// Dense layer on column vectors: W (out x in) * x (in x n) + b.
template <typename Scalar>
Var linear(Graph<Scalar>& g, Var weight, Var x, Var bias = {}) {
  const Tensor<Scalar>& in = g.value(x);
  Matrix<Scalar> y = g.data(weight) * in.data;
  if (bias) y.colwise() += g.data(bias).col(0);
  const bool rg = g.requires_grad(x) || g.requires_grad(weight) || g.requires_grad(bias);
  return g.record(Tensor<Scalar>(std::move(y), in.height, in.width), rg,
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    gr.accumulate(weight, dy * gr.data(x).transpose());
                    if (bias) gr.accumulate(bias, dy.rowwise().sum());
                    if (gr.requires_grad(x)) gr.accumulate(x, gr.data(weight).transpose() * dy);
                  });
}

template <typename Scalar>
Var add(Graph<Scalar>& g, Var a, Var b) {
  if (!b) return a;
  if (!a) return b;
  const Tensor<Scalar>& va = g.value(a);
  if (va.data.rows() != g.data(b).rows() || va.data.cols() != g.data(b).cols())
    throw ShapeError("add: shape mismatch " + shape_string(va) + " vs " + shape_string(g.value(b)));
  Tensor<Scalar> out(va.data + g.data(b), va.height, va.width);
  return g.record(std::move(out), g.requires_grad(a) || g.requires_grad(b),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    gr.accumulate(a, dy);
                    gr.accumulate(b, dy);
                  });
}

/// alpha * a + beta * b, elementwise.
template <typename Scalar>
Var axpby(Graph<Scalar>& g, Scalar alpha, Var a, Scalar beta, Var b) {
  const Tensor<Scalar>& va = g.value(a);
  if (va.data.rows() != g.data(b).rows() || va.data.cols() != g.data(b).cols())
    throw ShapeError("axpby: shape mismatch");
  Tensor<Scalar> out(alpha * va.data + beta * g.data(b), va.height, va.width);
  return g.record(std::move(out), g.requires_grad(a) || g.requires_grad(b),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    gr.accumulate(a, alpha * dy);
                    gr.accumulate(b, beta * dy);
                  });
}

template <typename Scalar>
Var scale(Graph<Scalar>& g, Var a, Scalar s) {
  const Tensor<Scalar>& va = g.value(a);
  return g.record(Tensor<Scalar>(s * va.data, va.height, va.width), g.requires_grad(a),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) { gr.accumulate(a, s * dy); });
}

/// Adds a per-channel vector (C x 1) to every pixel.
template <typename Scalar>
Var add_channel_bias(Graph<Scalar>& g, Var x, Var v) {
  const Tensor<Scalar>& vx = g.value(x);
  if (g.data(v).rows() != vx.channels() || g.data(v).cols() != 1)
    throw ShapeError("add_channel_bias: vector does not match channels");
  Tensor<Scalar> out = vx;
  out.data.colwise() += g.data(v).col(0);
  return g.record(std::move(out), g.requires_grad(x) || g.requires_grad(v),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    gr.accumulate(x, dy);
                    gr.accumulate(v, dy.rowwise().sum());
                  });
}

/// Feature-wise modulation: x * (1 + scale) + shift with per-channel vectors.
template <typename Scalar>
Var modulate(Graph<Scalar>& g, Var x, Var scale_v, Var shift_v) {
  const Tensor<Scalar>& vx = g.value(x);
  const Index c = vx.channels();
  if (g.data(scale_v).rows() != c || g.data(shift_v).rows() != c)
    throw ShapeError("modulate: vector does not match channels");
  Tensor<Scalar> out = vx;
  const Vector<Scalar> gain = (g.data(scale_v).col(0).array() + Scalar(1)).matrix();
  out.data = gain.asDiagonal() * vx.data;
  out.data.colwise() += g.data(shift_v).col(0);
  const bool rg = g.requires_grad(x) || g.requires_grad(scale_v) || g.requires_grad(shift_v);
  return g.record(std::move(out), rg, [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
    if (gr.requires_grad(x)) gr.accumulate(x, gain.asDiagonal() * dy);
    if (gr.requires_grad(scale_v))
      gr.accumulate(scale_v, dy.cwiseProduct(gr.data(x)).rowwise().sum());
    gr.accumulate(shift_v, dy.rowwise().sum());
  });
}

template <typename Scalar>
Var silu(Graph<Scalar>& g, Var x) {
  const Tensor<Scalar>& vx = g.value(x);
  Tensor<Scalar> out = vx;
  out.data = vx.data.unaryExpr([](Scalar v) { return v * detail::sigmoid(v); });
  return g.record(std::move(out), g.requires_grad(x),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    const Matrix<Scalar> d = gr.data(x).unaryExpr([](Scalar v) {
                      const Scalar s = detail::sigmoid(v);
                      return s * (Scalar(1) + v * (Scalar(1) - s));
                    });
                    gr.accumulate(x, dy.cwiseProduct(d));
                  });
}

template <typename Scalar>
Var relu(Graph<Scalar>& g, Var x) {
  const Tensor<Scalar>& vx = g.value(x);
  Tensor<Scalar> out = vx;
  out.data = vx.data.cwiseMax(Scalar(0));
  return g.record(std::move(out), g.requires_grad(x),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    gr.accumulate(x, (gr.data(x).array() > Scalar(0)).select(dy, Scalar(0)));
                  });
}

/// Non-overlapping f x f mean pooling.
template <typename Scalar>
Var avg_pool(Graph<Scalar>& g, Var x, Index f) {
  const Tensor<Scalar>& in = g.value(x);
  if (in.height % f != 0 || in.width % f != 0)
    throw ShapeError("avg_pool: " + shape_string(in) + " not divisible by " + std::to_string(f));
  const Index h = in.height / f, w = in.width / f, iw = in.width;
  Tensor<Scalar> out(in.channels(), h, w);
  const Scalar inv = Scalar(1) / Scalar(f * f);
  for (Index y = 0; y < in.height; ++y)
    for (Index xx = 0; xx < in.width; ++xx) out.data.col((y / f) * w + xx / f) += in.data.col(y * iw + xx);
  out.data *= inv;
  return g.record(std::move(out), g.requires_grad(x),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    Matrix<Scalar> dx(dy.rows(), h * f * w * f);
                    for (Index y = 0; y < h * f; ++y)
                      for (Index xx = 0; xx < w * f; ++xx)
                        dx.col(y * iw + xx) = inv * dy.col((y / f) * w + xx / f);
                    gr.accumulate(x, dx);
                  });
}

/// Nearest-neighbour upsampling by integer factor.
template <typename Scalar>
Var upsample(Graph<Scalar>& g, Var x, Index f) {
  const Tensor<Scalar>& in = g.value(x);
  const Index h = in.height * f, w = in.width * f, iw = in.width;
  Tensor<Scalar> out(in.channels(), h, w);
  for (Index y = 0; y < h; ++y)
    for (Index xx = 0; xx < w; ++xx) out.data.col(y * w + xx) = in.data.col((y / f) * iw + xx / f);
  return g.record(std::move(out), g.requires_grad(x),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    Matrix<Scalar> dx = Matrix<Scalar>::Zero(dy.rows(), (h / f) * iw);
                    for (Index y = 0; y < h; ++y)
                      for (Index xx = 0; xx < w; ++xx) dx.col((y / f) * iw + xx / f) += dy.col(y * w + xx);
                    gr.accumulate(x, dx);
                  });
}

/// Stacks channels of a then b.
template <typename Scalar>
Var concat(Graph<Scalar>& g, Var a, Var b) {
  const Tensor<Scalar>& va = g.value(a);
  const Tensor<Scalar>& vb = g.value(b);
  if (va.height != vb.height || va.width != vb.width) throw ShapeError("concat: spatial mismatch");
  Tensor<Scalar> out(va.channels() + vb.channels(), va.height, va.width);
  out.data.topRows(va.channels()) = va.data;
  out.data.bottomRows(vb.channels()) = vb.data;
  const Index ca = va.channels(), cb = vb.channels();
  return g.record(std::move(out), g.requires_grad(a) || g.requires_grad(b),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    gr.accumulate(a, dy.topRows(ca));
                    gr.accumulate(b, dy.bottomRows(cb));
                  });
}

/// Rows [start, start+count) of x.
template <typename Scalar>
Var slice_rows(Graph<Scalar>& g, Var x, Index start, Index count) {
  const Tensor<Scalar>& in = g.value(x);
  Tensor<Scalar> out(in.data.middleRows(start, count), in.height, in.width);
  const Index rows = in.data.rows();
  return g.record(std::move(out), g.requires_grad(x),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    Matrix<Scalar> dx = Matrix<Scalar>::Zero(rows, dy.cols());
                    dx.middleRows(start, count) = dy;
                    gr.accumulate(x, dx);
                  });
}

/// Selects columns of a table (D x V) by index, producing D x L.
template <typename Scalar>
Var gather_columns(Graph<Scalar>& g, Var table, std::vector<int> indices) {
  const Matrix<Scalar>& t = g.data(table);
  Matrix<Scalar> out(t.rows(), static_cast<Index>(indices.size()));
  for (size_t i = 0; i < indices.size(); ++i) out.col(static_cast<Index>(i)) = t.col(indices[i]);
  const Index cols = t.cols();
  const Index n = out.cols();
  return g.record(Tensor<Scalar>(std::move(out), 1, n), g.requires_grad(table),
                  [=, idx = std::move(indices)](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    Matrix<Scalar> dt = Matrix<Scalar>::Zero(dy.rows(), cols);
                    for (size_t i = 0; i < idx.size(); ++i) dt.col(idx[i]) += dy.col(static_cast<Index>(i));
                    gr.accumulate(table, dt);
                  });
}

/// Mean over columns (pixels or tokens), producing rows x 1.
template <typename Scalar>
Var mean_columns(Graph<Scalar>& g, Var x) {
  const Matrix<Scalar>& in = g.data(x);
  const Index n = in.cols();
  return g.record(Tensor<Scalar>(in.rowwise().mean(), 1, 1), g.requires_grad(x),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    gr.accumulate(x, dy.col(0).replicate(1, n) / Scalar(n));
                  });
}

/// Mean squared error over all elements; b may be a constant.
template <typename Scalar>
Var mse(Graph<Scalar>& g, Var a, Var b) {
  const Matrix<Scalar>& va = g.data(a);
  const Matrix<Scalar>& vb = g.data(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) throw ShapeError("mse: shape mismatch");
  Matrix<Scalar> diff = va - vb;
  const Scalar n = Scalar(diff.size());
  Matrix<Scalar> loss(1, 1);
  loss(0, 0) = diff.squaredNorm() / n;
  return g.record(Tensor<Scalar>(std::move(loss), 1, 1), g.requires_grad(a) || g.requires_grad(b),
                  [=, diff = std::move(diff)](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    const Scalar k = Scalar(2) * dy(0, 0) / n;
                    gr.accumulate(a, k * diff);
                    gr.accumulate(b, -k * diff);
                  });
}

/// Mean over elements of KL(N(mu, exp(logvar)) || N(0, 1)).
template <typename Scalar>
Var kl_standard_normal(Graph<Scalar>& g, Var mu, Var logvar) {
  const Matrix<Scalar>& m = g.data(mu);
  const Matrix<Scalar>& lv = g.data(logvar);
  const Scalar n = Scalar(m.size());
  Matrix<Scalar> loss(1, 1);
  loss(0, 0) = Scalar(0.5) *
               (m.array().square() + lv.array().exp() - Scalar(1) - lv.array()).sum() / n;
  return g.record(Tensor<Scalar>(std::move(loss), 1, 1),
                  g.requires_grad(mu) || g.requires_grad(logvar),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    const Scalar k = dy(0, 0) / n;
                    gr.accumulate(mu, k * gr.data(mu));
                    gr.accumulate(logvar, (k * Scalar(0.5)) *
                                              (gr.data(logvar).array().exp() - Scalar(1)).matrix());
                  });
}

/// mu + exp(logvar / 2) * eps, with eps constant.
template <typename Scalar>
Var reparameterize(Graph<Scalar>& g, Var mu, Var logvar, const Matrix<Scalar>& eps) {
  const Tensor<Scalar>& m = g.value(mu);
  Matrix<Scalar> stdv = (Scalar(0.5) * g.data(logvar).array()).exp().matrix();
  Tensor<Scalar> out(m.data + stdv.cwiseProduct(eps), m.height, m.width);
  return g.record(std::move(out), g.requires_grad(mu) || g.requires_grad(logvar),
                  [=, stdv = std::move(stdv)](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    gr.accumulate(mu, dy);
                    gr.accumulate(logvar, Scalar(0.5) * dy.cwiseProduct(stdv).cwiseProduct(eps));
                  });
}

/// Per-pixel softmax cross-entropy, averaged with per-class weights.
template <typename Scalar>
Var softmax_cross_entropy(Graph<Scalar>& g, Var logits, std::span<const int> labels,
                          std::span<const Scalar> class_weights) {
  const Matrix<Scalar>& z = g.data(logits);
  const Index c = z.rows(), p = z.cols();
  if (static_cast<Index>(labels.size()) != p) throw ShapeError("softmax_cross_entropy: label count");
  Matrix<Scalar> prob(c, p);
  Scalar total = 0, weight_sum = 0;
  std::vector<Scalar> w(static_cast<size_t>(p));
  for (Index j = 0; j < p; ++j) {
    const Scalar mx = z.col(j).maxCoeff();
    prob.col(j) = (z.col(j).array() - mx).exp().matrix();
    const Scalar s = prob.col(j).sum();
    prob.col(j) /= s;
    const int lab = labels[static_cast<size_t>(j)];
    w[static_cast<size_t>(j)] = class_weights.empty() ? Scalar(1) : class_weights[static_cast<size_t>(lab)];
    total -= w[static_cast<size_t>(j)] * std::log(std::max(prob(lab, j), Scalar(1e-30)));
    weight_sum += w[static_cast<size_t>(j)];
  }
  Matrix<Scalar> loss(1, 1);
  loss(0, 0) = total / weight_sum;
  std::vector<int> labs(labels.begin(), labels.end());
  return g.record(Tensor<Scalar>(std::move(loss), 1, 1), g.requires_grad(logits),
                  [=, prob = std::move(prob), w = std::move(w), labs = std::move(labs)](
                      Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    Matrix<Scalar> dz = prob;
                    for (Index j = 0; j < p; ++j) {
                      dz(labs[static_cast<size_t>(j)], j) -= Scalar(1);
                      dz.col(j) *= w[static_cast<size_t>(j)];
                    }
                    gr.accumulate(logits, (dy(0, 0) / weight_sum) * dz);
                  });
}

/// Binary cross-entropy on a 1 x 1 logit.
template <typename Scalar>
Var bce_with_logits(Graph<Scalar>& g, Var logit, Scalar target) {
  const Scalar z = g.scalar(logit);
  // log(1 + exp(-|z|)) + max(z, 0) - z * target
  Matrix<Scalar> loss(1, 1);
  loss(0, 0) = std::log1p(std::exp(-std::abs(z))) + std::max(z, Scalar(0)) - z * target;
  const Scalar s = detail::sigmoid(z);
  return g.record(Tensor<Scalar>(std::move(loss), 1, 1), g.requires_grad(logit),
                  [=](Graph<Scalar>& gr, const Matrix<Scalar>& dy) {
                    gr.accumulate(logit, Matrix<Scalar>::Constant(1, 1, dy(0, 0) * (s - target)));
                  });
}

}  // namespace crackgen::ops
