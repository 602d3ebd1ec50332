#include "q2a/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace q2a {

namespace {

thread_local bool g_grad_enabled = true;

std::string shape_of(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

// ---- raw matmul kernels (accumulate into C) ----

void mm_nn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n) {
  // 4-row blocks so each loaded B row feeds four accumulator rows.
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * k;
    const double* a1 = a0 + k;
    const double* a2 = a1 + k;
    const double* a3 = a2 + k;
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = bp[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c (m x r) += a (m x k) * b(r x k)^T. Goes through an explicit transpose so
// the inner loop is a vectorizable axpy rather than a serial dot product.
void mm_nt(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t r) {
  thread_local std::vector<double> bt;
  bt.resize(k * r);
  for (std::size_t j = 0; j < r; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * r + j] = b[j * k + p];
  mm_nn(a, bt.data(), c, m, k, r);
}

// c (k x n) += a (m x k)^T * b (m x n)
void mm_tn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < m; ++p) {
    const double* ap = a + p * k;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < k; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

using NodePtr = std::shared_ptr<detail::Node>;

}  // namespace

// ---- Tensor basics --------------------------------------------------------

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : node_(std::make_shared<detail::Node>()) {
  node_->rows = rows;
  node_->cols = cols;
  node_->data.assign(rows * cols, fill);
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::vector<double> data)
    : node_(std::make_shared<detail::Node>()) {
  if (data.size() != rows * cols)
    throw std::invalid_argument("Tensor: data length " +
                                std::to_string(data.size()) +
                                " does not match shape " + shape_of(rows, cols));
  node_->rows = rows;
  node_->cols = cols;
  node_->data = std::move(data);
}

Tensor Tensor::from_rows(
    std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c)
      throw std::invalid_argument("Tensor::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(r, c, std::move(data));
}

Tensor Tensor::row_vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(1, n, std::move(values));
}

Tensor Tensor::col_vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(n, 1, std::move(values));
}

Tensor Tensor::scalar(double value) { return Tensor(1, 1, {value}); }

Tensor Tensor::randn(std::size_t rows, std::size_t cols, Rng& rng,
                     double stddev) {
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->data[r * node_->cols + c];
}

double& Tensor::at(std::size_t r, std::size_t c) {
  return node_->data[r * node_->cols + c];
}

double Tensor::item() const {
  if (size() != 1)
    throw std::invalid_argument("Tensor::item: tensor is " + shape_str() +
                                ", expected scalar");
  return node_->data[0];
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

double Tensor::grad_at(std::size_t r, std::size_t c) const {
  if (node_->grad.empty()) return 0.0;
  return node_->grad[r * node_->cols + c];
}

Tensor& Tensor::set_requires_grad(bool v) {
  node_->requires_grad = v;
  return *this;
}

void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

Tensor Tensor::clone_values() const {
  return Tensor(rows(), cols(), node_->data);
}

std::string Tensor::shape_str() const { return shape_of(rows(), cols()); }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- op construction ------------------------------------------------------

Tensor make_op(std::size_t rows, std::size_t cols, std::vector<double> data,
               const std::vector<Tensor>& inputs,
               std::function<void(detail::Node&)> backprop) {
  Tensor out(rows, cols, std::move(data));
  if (!g_grad_enabled) return out;
  bool tracked = false;
  for (const auto& in : inputs)
    if (in.requires_grad()) tracked = true;
  if (!tracked) return out;
  auto node = out.node();
  node->requires_grad = true;
  node->is_leaf = false;
  for (const auto& in : inputs)
    if (in.requires_grad()) node->parents.push_back(in.node());
  node->backprop = std::move(backprop);
  return out;
}

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions mismatch: " +
                                a.shape_str() + " vs " + b.shape_str());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> out(m * n, 0.0);
  mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node(), bn = b.node();
  return make_op(m, n, std::move(out), {a, b},
                 [an, bn, m, k, n](detail::Node& self) {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     mm_nt(self.grad.data(), bn->data.data(), an->grad.data(),
                           m, n, k);
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     mm_tn(an->data.data(), self.grad.data(), bn->grad.data(),
                           m, k, n);
                   }
                 });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: inner dimensions mismatch: " +
                                a.shape_str() + " vs " + b.shape_str() + "^T");
  const std::size_t m = a.rows(), k = a.cols(), r = b.rows();
  std::vector<double> out(m * r, 0.0);
  mm_nt(a.data().data(), b.data().data(), out.data(), m, k, r);
  auto an = a.node(), bn = b.node();
  return make_op(m, r, std::move(out), {a, b},
                 [an, bn, m, k, r](detail::Node& self) {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     mm_nn(self.grad.data(), bn->data.data(), an->grad.data(),
                           m, r, k);
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     mm_tn(self.grad.data(), an->data.data(), bn->grad.data(),
                           m, r, k);
                   }
                 });
}

// ---- elementwise ----------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch: " +
                                a.shape_str() + " vs " + b.shape_str());
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op(a.rows(), a.cols(), std::move(out), {a, b},
                 [an, bn](detail::Node& self) {
                   for (auto* p : {an.get(), bn.get()}) {
                     if (!p->requires_grad) continue;
                     p->ensure_grad();
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       p->grad[i] += self.grad[i];
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op(a.rows(), a.cols(), std::move(out), {a, b},
                 [an, bn](detail::Node& self) {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       an->grad[i] += self.grad[i];
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       bn->grad[i] -= self.grad[i];
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.data());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.data()[i];
  auto an = a.node(), bn = b.node();
  return make_op(a.rows(), a.cols(), std::move(out), {a, b},
                 [an, bn](detail::Node& self) {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       an->grad[i] += self.grad[i] * bn->data[i];
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       bn->grad[i] += self.grad[i] * an->data[i];
                   }
                 });
}

Tensor add_row(const Tensor& m, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != m.cols())
    throw std::invalid_argument("add_row: expected 1x" +
                                std::to_string(m.cols()) + " row, got " +
                                row.shape_str());
  std::vector<double> out(m.data());
  const std::size_t r = m.rows(), c = m.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += row.data()[j];
  auto mn = m.node(), rn = row.node();
  return make_op(r, c, std::move(out), {m, row},
                 [mn, rn, r, c](detail::Node& self) {
                   if (mn->requires_grad) {
                     mn->ensure_grad();
                     for (std::size_t i = 0; i < self.grad.size(); ++i)
                       mn->grad[i] += self.grad[i];
                   }
                   if (rn->requires_grad) {
                     rn->ensure_grad();
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j)
                         rn->grad[j] += self.grad[i * c + j];
                   }
                 });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (auto& v : out) v *= s;
  auto an = a.node();
  return make_op(a.rows(), a.cols(), std::move(out), {a},
                 [an, s](detail::Node& self) {
                   an->ensure_grad();
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     an->grad[i] += s * self.grad[i];
                 });
}

// ---- softmax / concat / slicing ------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  if (c == 0) throw std::invalid_argument("softmax_rows: empty rows");
  for (double v : x.data())
    if (std::isnan(v))
      throw std::invalid_argument("softmax_rows: NaN input");
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data().data() + i * c;
    double mx = xi[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      out[i * c + j] = std::exp(xi[j] - mx);
      sum += out[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= sum;
  }
  auto xn = x.node();
  return make_op(r, c, std::move(out), {x},
                 [xn, r, c](detail::Node& self) {
                   xn->ensure_grad();
                   for (std::size_t i = 0; i < r; ++i) {
                     const double* y = self.data.data() + i * c;
                     const double* dy = self.grad.data() + i * c;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
                     double* dx = xn->grad.data() + i * c;
                     for (std::size_t j = 0; j < c; ++j)
                       dx[j] += y[j] * (dy[j] - dot);
                   }
                 });
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("concat_rows: feature dim mismatch: " +
                                a.shape_str() + " vs " + b.shape_str());
  const std::size_t c = a.cols(), ra = a.rows(), rb = b.rows();
  std::vector<double> out;
  out.reserve((ra + rb) * c);
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  auto an = a.node(), bn = b.node();
  return make_op(ra + rb, c, std::move(out), {a, b},
                 [an, bn, ra, rb, c](detail::Node& self) {
                   if (an->requires_grad) {
                     an->ensure_grad();
                     for (std::size_t i = 0; i < ra * c; ++i)
                       an->grad[i] += self.grad[i];
                   }
                   if (bn->requires_grad) {
                     bn->ensure_grad();
                     for (std::size_t i = 0; i < rb * c; ++i)
                       bn->grad[i] += self.grad[ra * c + i];
                   }
                 });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t r = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r)
      throw std::invalid_argument("concat_cols: row count mismatch: " +
                                  parts.front().shape_str() + " vs " +
                                  p.shape_str());
    total += p.cols();
  }
  std::vector<double> out(r * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(p.data().data() + i * c, c, out.data() + i * total + off);
    off += c;
  }
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.cols());
  }
  return make_op(r, total, std::move(out), parts,
                 [nodes, widths, r, total](detail::Node& self) {
                   std::size_t off = 0;
                   for (std::size_t t = 0; t < nodes.size(); ++t) {
                     const std::size_t c = widths[t];
                     auto* p = nodes[t].get();
                     if (p->requires_grad) {
                       p->ensure_grad();
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           p->grad[i * c + j] +=
                               self.grad[i * total + off + j];
                     }
                     off += c;
                   }
                 });
}

Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1) {
  if (r0 > r1 || r1 > x.rows())
    throw std::invalid_argument("slice_rows: bad range [" +
                                std::to_string(r0) + "," +
                                std::to_string(r1) + ") for " + x.shape_str());
  const std::size_t c = x.cols(), r = r1 - r0;
  std::vector<double> out(x.data().begin() + r0 * c,
                          x.data().begin() + r1 * c);
  auto xn = x.node();
  return make_op(r, c, std::move(out), {x},
                 [xn, r0, r, c](detail::Node& self) {
                   xn->ensure_grad();
                   for (std::size_t i = 0; i < r * c; ++i)
                     xn->grad[r0 * c + i] += self.grad[i];
                 });
}

Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1) {
  if (c0 > c1 || c1 > x.cols())
    throw std::invalid_argument("slice_cols: bad range [" +
                                std::to_string(c0) + "," +
                                std::to_string(c1) + ") for " + x.shape_str());
  const std::size_t r = x.rows(), cw = c1 - c0, c = x.cols();
  std::vector<double> out(r * cw);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(x.data().data() + i * c + c0, cw, out.data() + i * cw);
  auto xn = x.node();
  return make_op(r, cw, std::move(out), {x},
                 [xn, c0, r, cw, c](detail::Node& self) {
                   xn->ensure_grad();
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < cw; ++j)
                       xn->grad[i * c + c0 + j] += self.grad[i * cw + j];
                 });
}

// ---- layer norm -----------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (c < 1) throw std::invalid_argument("layer_norm: empty feature dim");
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  if (gain.size() != c || bias.size() != c)
    throw std::invalid_argument("layer_norm: gain/bias size mismatch: " +
                                gain.shape_str() + ", " + bias.shape_str() +
                                " for " + x.shape_str());
  std::vector<double> out(r * c);
  auto xhat = std::make_shared<std::vector<double>>(r * c);
  auto inv_sigma = std::make_shared<std::vector<double>>(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = x.data().data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xi[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xi[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (xi[j] - mean) * is;
      (*xhat)[i * c + j] = xh;
      out[i * c + j] = gain.data()[j] * xh + bias.data()[j];
    }
  }
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return make_op(
      r, c, std::move(out), {x, gain, bias},
      [xn, gn, bn, xhat, inv_sigma, r, c](detail::Node& self) {
        for (std::size_t i = 0; i < r; ++i) {
          const double* dy = self.grad.data() + i * c;
          const double* xh = xhat->data() + i * c;
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (std::size_t j = 0; j < c; ++j)
              gn->grad[j] += dy[j] * xh[j];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t j = 0; j < c; ++j) bn->grad[j] += dy[j];
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = dy[j] * gn->data[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xh[j];
            }
            const double inv_c = 1.0 / static_cast<double>(c);
            const double is = (*inv_sigma)[i];
            double* dx = xn->grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = dy[j] * gn->data[j];
              dx[j] += is * (dxh - inv_c * sum_dxh -
                             xh[j] * inv_c * sum_dxh_xh);
            }
          }
        }
      });
}

// ---- activations ----------------------------------------------------------

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double act_forward(double v, Activation kind) {
  switch (kind) {
    case Activation::Sigmoid:
      return 1.0 / (1.0 + std::exp(-v));
    case Activation::Relu:
      return v > 0.0 ? v : 0.0;
    case Activation::Gelu:
      return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  return 0.0;
}

double act_backward(double v, double y, Activation kind) {
  switch (kind) {
    case Activation::Sigmoid:
      return y * (1.0 - y);
    case Activation::Relu:
      return v > 0.0 ? 1.0 : 0.0;
    case Activation::Gelu:
      return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
             v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
  }
  return 0.0;
}

}  // namespace

Tensor activation(const Tensor& x, Activation kind) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = act_forward(x.data()[i], kind);
  auto xn = x.node();
  return make_op(x.rows(), x.cols(), std::move(out), {x},
                 [xn, kind](detail::Node& self) {
                   xn->ensure_grad();
                   for (std::size_t i = 0; i < self.grad.size(); ++i)
                     xn->grad[i] += self.grad[i] *
                                    act_backward(xn->data[i], self.data[i],
                                                 kind);
                 });
}

Tensor sigmoid(const Tensor& x) { return activation(x, Activation::Sigmoid); }
Tensor relu(const Tensor& x) { return activation(x, Activation::Relu); }
Tensor gelu(const Tensor& x) { return activation(x, Activation::Gelu); }

// ---- reductions / gathers -------------------------------------------------

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return make_op(1, 1, {s}, {x}, [xn](detail::Node& self) {
    xn->ensure_grad();
    for (auto& g : xn->grad) g += self.grad[0];
  });
}

Tensor mean_rows(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  if (r == 0) throw std::invalid_argument("mean_rows: no rows");
  std::vector<double> out(c, 0.0);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j] += x.data()[i * c + j];
  const double inv = 1.0 / static_cast<double>(r);
  for (auto& v : out) v *= inv;
  auto xn = x.node();
  return make_op(1, c, std::move(out), {x},
                 [xn, r, c, inv](detail::Node& self) {
                   xn->ensure_grad();
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < c; ++j)
                       xn->grad[i * c + j] += inv * self.grad[j];
                 });
}

Tensor pool_rows(const Tensor& x, std::size_t chunks) {
  const std::size_t r = x.rows(), c = x.cols();
  if (chunks == 0 || chunks > r)
    throw std::invalid_argument("pool_rows: invalid chunk count " +
                                std::to_string(chunks) + " for " +
                                x.shape_str());
  // Contiguous chunk boundaries; remainder rows go to the leading chunks.
  auto bounds = std::make_shared<std::vector<std::size_t>>(chunks + 1, 0);
  const std::size_t base = r / chunks, rem = r % chunks;
  for (std::size_t t = 0; t < chunks; ++t)
    (*bounds)[t + 1] = (*bounds)[t] + base + (t < rem ? 1 : 0);
  std::vector<double> out(chunks * c, 0.0);
  for (std::size_t t = 0; t < chunks; ++t) {
    const std::size_t lo = (*bounds)[t], hi = (*bounds)[t + 1];
    const double inv = 1.0 / static_cast<double>(hi - lo);
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t j = 0; j < c; ++j)
        out[t * c + j] += inv * x.data()[i * c + j];
  }
  auto xn = x.node();
  return make_op(chunks, c, std::move(out), {x},
                 [xn, bounds, chunks, c](detail::Node& self) {
                   xn->ensure_grad();
                   for (std::size_t t = 0; t < chunks; ++t) {
                     const std::size_t lo = (*bounds)[t], hi = (*bounds)[t + 1];
                     const double inv = 1.0 / static_cast<double>(hi - lo);
                     for (std::size_t i = lo; i < hi; ++i)
                       for (std::size_t j = 0; j < c; ++j)
                         xn->grad[i * c + j] += inv * self.grad[t * c + j];
                   }
                 });
}

Tensor embed_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
  const std::size_t c = table.cols();
  std::vector<double> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= table.rows())
      throw std::invalid_argument("embed_rows: id " + std::to_string(ids[i]) +
                                  " out of range for " + table.shape_str());
    std::copy_n(table.data().data() + ids[i] * c, c, out.data() + i * c);
  }
  auto tn = table.node();
  auto ids_copy = std::make_shared<std::vector<std::size_t>>(ids);
  return make_op(ids.size(), c, std::move(out), {table},
                 [tn, ids_copy, c](detail::Node& self) {
                   tn->ensure_grad();
                   for (std::size_t i = 0; i < ids_copy->size(); ++i)
                     for (std::size_t j = 0; j < c; ++j)
                       tn->grad[(*ids_copy)[i] * c + j] +=
                           self.grad[i * c + j];
                 });
}

// ---- asymmetric loss ------------------------------------------------------

Tensor asymmetric_loss(const Tensor& p, const std::vector<int>& y,
                       double gamma_plus, double gamma_minus) {
  const std::size_t n = p.size();
  if (y.size() != n)
    throw std::invalid_argument("asymmetric_loss: label length " +
                                std::to_string(y.size()) +
                                " vs probability length " + std::to_string(n));
  constexpr double kFloor = 1e-12;
  auto q = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = p.data()[i];
    if (std::isnan(v) || v < 0.0 || v > 1.0)
      throw std::invalid_argument(
          "asymmetric_loss: probability out of (0,1) at index " +
          std::to_string(i) + ": " + std::to_string(v));
    (*q)[i] = std::clamp(v, kFloor, 1.0 - kFloor);
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double qc = (*q)[i];
    if (y[i])
      acc += std::pow(1.0 - qc, gamma_plus) * std::log(qc);
    else
      acc += std::pow(qc, gamma_minus) * std::log(1.0 - qc);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  auto pn = p.node();
  auto labels = std::make_shared<std::vector<int>>(y);
  return make_op(
      1, 1, {-inv_n * acc}, {p},
      [pn, q, labels, gamma_plus, gamma_minus, inv_n](detail::Node& self) {
        pn->ensure_grad();
        const double up = self.grad[0];
        for (std::size_t i = 0; i < q->size(); ++i) {
          const double qc = (*q)[i];
          double d;
          if ((*labels)[i]) {
            d = std::pow(1.0 - qc, gamma_plus) / qc;
            if (gamma_plus != 0.0)
              d -= gamma_plus * std::pow(1.0 - qc, gamma_plus - 1.0) *
                   std::log(qc);
          } else {
            d = -std::pow(qc, gamma_minus) / (1.0 - qc);
            if (gamma_minus != 0.0)
              d += gamma_minus * std::pow(qc, gamma_minus - 1.0) *
                   std::log(1.0 - qc);
          }
          pn->grad[i] += up * (-inv_n) * d;
        }
      });
}

// ---- reverse pass ---------------------------------------------------------

void backward(const Tensor& loss) {
  detail::Node* root = loss.node().get();
  if (root->size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                loss.shape_str());
  if (!root->requires_grad) return;

  // Postorder DFS puts parents before children; reversing yields the order
  // in which upstream gradients are complete. The order holds strong
  // references so freeing edges mid-pass cannot drop pending nodes.
  std::vector<NodePtr> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      NodePtr p = n->parents[idx++];
      if (visited.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = it->get();
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
    if (!n->is_leaf) {
      n->parents.clear();
      n->backprop = nullptr;
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

// ---- gradient check -------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           Tensor x, double h, double tol) {
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tensor loss = f(x);
    backward(loss);
  }
  std::vector<double> analytic = x.grad();

  GradCheckReport report;
  NoGradGuard ng;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + h;
    const double fp = f(x).item();
    x.data()[i] = orig - h;
    const double fm = f(x).item();
    x.data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) /
                       std::max({1.0, std::abs(a), std::abs(numeric)});
    if (err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_index = i;
      report.analytic = a;
      report.numeric = numeric;
    }
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace q2a
