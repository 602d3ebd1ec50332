#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "q2a/rng.hpp"

namespace q2a {

namespace detail {

struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily, same length as data
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense row-major matrix with optional reverse-mode gradient tracking.
// Vectors are 1xn or nx1 matrices. Copies share the underlying node.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) {}
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row_vector(std::vector<double> values);
  static Tensor col_vector(std::vector<double> values);
  static Tensor scalar(double value);
  // Entries drawn i.i.d. normal(0, stddev^2).
  static Tensor randn(std::size_t rows, std::size_t cols, Rng& rng, double stddev);

  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->size(); }

  double at(std::size_t r, std::size_t c) const;
  double& at(std::size_t r, std::size_t c);
  double item() const;  // requires size() == 1

  const std::vector<double>& data() const { return node_->data; }
  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& grad() const;
  double grad_at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v);
  void zero_grad();

  // Deep copy of the values; result is an untracked leaf.
  Tensor clone_values() const;

  std::string shape_str() const;

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
  friend Tensor make_op(std::size_t, std::size_t, std::vector<double>,
                        const std::vector<Tensor>&,
                        std::function<void(detail::Node&)>);
};

// Disables graph construction while alive (evaluation / finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- differentiable operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T; avoids materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// m (rxn) + row (1xn) broadcast over rows.
Tensor add_row(const Tensor& m, const Tensor& row);
Tensor scale(const Tensor& a, double s);

Tensor softmax_rows(const Tensor& x);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t r1);
Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t c1);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);

enum class Activation { Sigmoid, Relu, Gelu };
Tensor activation(const Tensor& x, Activation kind);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);

Tensor sum_all(const Tensor& x);      // 1x1
Tensor mean_rows(const Tensor& x);    // 1xn column means
// Splits the rows of x into `chunks` contiguous groups and averages each.
Tensor pool_rows(const Tensor& x, std::size_t chunks);
// Gathers table rows by index; gradient scatters back into the table.
Tensor embed_rows(const Tensor& table, const std::vector<std::size_t>& ids);

// -(1/C) sum_c [ y_c (1-p_c)^gp log p_c + (1-y_c) p_c^gm log(1-p_c) ].
// p holds C probabilities in (0,1); y is the one-hot ground truth.
Tensor asymmetric_loss(const Tensor& p, const std::vector<int>& y,
                       double gamma_plus, double gamma_minus);

// ---- reverse pass ---------------------------------------------------------

// Propagates d(loss)/d(leaf) into every reachable leaf's grad (accumulating),
// then frees the graph. loss must be scalar.
void backward(const Tensor& loss);

struct GradCheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Compares reverse-mode d f/d x against central finite differences.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           Tensor x, double h = 1e-5, double tol = 1e-4);

}  // namespace q2a
