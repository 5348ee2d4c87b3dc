// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors with reverse-mode automatic differentiation on a dynamic
// tape. The op set is exactly what the rest of the project needs; there is no
// general broadcasting and no in-place mutation of values after creation.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "slotmerge/errors.hpp"

namespace slotmerge {

struct TensorData {
    std::vector<std::size_t> shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first touched
    bool requires_grad = false;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
    static Tensor full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
    static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                       bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return impl_->shape; }
    std::size_t ndim() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->values.size(); }
    std::size_t rows() const { return impl_->shape.at(0); }
    std::size_t cols() const { return impl_->shape.at(1); }

    std::span<double> values() { return impl_->values; }
    std::span<const double> values() const { return impl_->values; }
    double value() const;  // numel()==1

    double at(std::size_t i) const { return impl_->values[i]; }
    double at(std::size_t i, std::size_t j) const { return impl_->values[i * cols() + j]; }
    double& at(std::size_t i) { return impl_->values[i]; }
    double& at(std::size_t i, std::size_t j) { return impl_->values[i * cols() + j]; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    // Gradient accumulator, allocated (zeroed) on first access.
    std::span<double> grad();
    std::span<const double> grad() const;
    bool grad_allocated() const { return !impl_->grad.empty(); }
    void zero_grad();

    // Deep copy of values; fresh zero gradient.
    Tensor clone(bool requires_grad) const;

    TensorData* raw() const { return impl_.get(); }
    std::shared_ptr<TensorData> shared() const { return impl_; }

    bool all_finite() const;

private:
    explicit Tensor(std::shared_ptr<TensorData> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorData> impl_;
};

// Dynamic tape. Operations evaluate eagerly; when recording is on and an
// input requires grad, a node is appended whose closure accumulates into the
// input gradients during backward(). Topological order equals append order.
// A Graph is single-owner: never share one across threads.
class Graph {
public:
    explicit Graph(bool recording = true) : recording_(recording) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return recording_; }
    std::size_t node_count() const { return nodes_.size(); }
    const char* op_name(std::size_t i) const { return nodes_[i].op; }

    // --- core linear algebra ---
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor transpose(const Tensor& a);
    Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x*w + row-broadcast b

    // --- elementwise ---
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    // Safe division: a / (b + eps). The epsilon is explicit at every call
    // site so that each stabilizer in the model is auditable.
    Tensor div(const Tensor& a, const Tensor& b, double eps);
    Tensor scale(const Tensor& a, double c);
    Tensor add_const(const Tensor& a, double c);
    Tensor sigmoid(const Tensor& a);
    Tensor tanh(const Tensor& a);
    Tensor relu(const Tensor& a);
    Tensor exp(const Tensor& a);
    Tensor mul_scalar(const Tensor& a, const Tensor& s);  // s: 1-element tensor

    // --- reductions / shape ---
    Tensor sum(const Tensor& a, std::size_t axis);  // 2-D -> 1-D
    Tensor sum_all(const Tensor& a);                // -> scalar
    Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len);
    Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
    Tensor concat_cols(const std::vector<Tensor>& parts);
    Tensor masked_select_rows(const Tensor& a, const std::vector<bool>& keep);
    Tensor replace_row(const Tensor& a, std::size_t row, const Tensor& r);
    Tensor replace_col(const Tensor& a, std::size_t col, const Tensor& c);
    Tensor tile_rows(const Tensor& v, std::size_t n_rows);

    // --- row/column broadcasts ---
    Tensor add_rowvec(const Tensor& a, const Tensor& v);
    Tensor div_rowvec(const Tensor& a, const Tensor& v, double eps);
    Tensor mul_colvec(const Tensor& a, const Tensor& v);

    // --- normalization ---
    Tensor softmax(const Tensor& a, std::size_t axis);
    // Softmax over columns (axis 1) restricted to active columns; inactive
    // columns are exactly zero in the output.
    Tensor softmax_masked_cols(const Tensor& a, const std::vector<bool>& active);
    Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                     double eps = 1e-5);

    // Constant copy, cut from the tape.
    Tensor detach(const Tensor& a);

    // Reverse sweep from a scalar loss. Node-output gradients are zeroed
    // first, so calling backward() repeatedly on the same graph accumulates
    // into leaf gradients only.
    void backward(const Tensor& loss);

private:
    struct Node {
        const char* op;
        std::shared_ptr<TensorData> out;
        std::function<void()> back;
    };

    bool recording_;
    std::vector<Node> nodes_;
};

}  // namespace slotmerge
