// SPDX-License-Identifier: Apache-2.0
#include "slotmerge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace slotmerge {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

void require(bool cond, const char* msg) {
    if (!cond) throw DimensionError(msg);
}

// grad buffer of a tensor, allocated (zeroed) on demand
double* grad_of(const std::shared_ptr<TensorData>& t) {
    if (t->grad.empty()) t->grad.assign(t->values.size(), 0.0);
    return t->grad.data();
}

}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
    auto impl = std::make_shared<TensorData>();
    impl->values.assign(product(shape), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
    auto impl = std::make_shared<TensorData>();
    impl->values.assign(product(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values,
                    bool requires_grad) {
    if (product(shape) != values.size())
        throw DimensionError("tensor shape does not match value count");
    auto impl = std::make_shared<TensorData>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from({1}, {value}, requires_grad);
}

double Tensor::value() const {
    if (numel() != 1) throw DimensionError("value() requires a 1-element tensor");
    return impl_->values[0];
}

std::span<double> Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
    return impl_->grad;
}

std::span<const double> Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const {
    auto impl = std::make_shared<TensorData>();
    impl->shape = impl_->shape;
    impl->values = impl_->values;
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

bool Tensor::all_finite() const {
    for (double v : impl_->values)
        if (!std::isfinite(v)) return false;
    return true;
}

// Every op follows the same pattern: compute values eagerly, then, when the
// graph is recording and any input requires grad, append a node whose
// closure accumulates into the inputs' gradient buffers.
#define SLOTMERGE_RECORD(opname, out, needs, ...)                       \
    do {                                                                \
        if (recording_ && (needs)) {                                    \
            (out).set_requires_grad(true);                              \
            nodes_.push_back({opname, (out).shared(), __VA_ARGS__});    \
        }                                                               \
    } while (0)

// ---------------------------------------------------------------- matmul

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
    require(a.ndim() == 2 && b.ndim() == 2, "matmul expects 2-D tensors");
    require(a.cols() == b.rows(), "matmul inner dimensions disagree");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    {
        const double* pa = a.values().data();
        const double* pb = b.values().data();
        for (std::size_t i = 0; i < m; ++i) {
            double* po = out.data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = pa[i * k + p];
                const double* pbr = pb + p * n;
                for (std::size_t j = 0; j < n; ++j) po[j] += aip * pbr[j];
            }
        }
    }
    Tensor o = Tensor::from({m, n}, std::move(out));
    auto as = a.shared(), bs = b.shared(), os = o.shared();
    SLOTMERGE_RECORD("matmul", o, a.requires_grad() || b.requires_grad(),
        [as, bs, os, m, k, n]() {
            const double* go = os->grad.data();
            const double* pa = as->values.data();
            const double* pb = bs->values.data();
            if (as->requires_grad) {
                double* ga = grad_of(as);
                // dA[i,p] += sum_j go[i,j] * B[p,j]
                for (std::size_t i = 0; i < m; ++i) {
                    const double* goi = go + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* pbr = pb + p * n;
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += goi[j] * pbr[j];
                        ga[i * k + p] += s;
                    }
                }
            }
            if (bs->requires_grad) {
                double* gb = grad_of(bs);
                // dB[p,j] += sum_i A[i,p] * go[i,j]
                for (std::size_t i = 0; i < m; ++i) {
                    const double* goi = go + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = pa[i * k + p];
                        double* gbr = gb + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbr[j] += aip * goi[j];
                    }
                }
            }
        });
    return o;
}

Tensor Graph::transpose(const Tensor& a) {
    require(a.ndim() == 2, "transpose expects a 2-D tensor");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.at(i, j);
    Tensor o = Tensor::from({n, m}, std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("transpose", o, a.requires_grad(), [as, os, m, n]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    });
    return o;
}

Tensor Graph::linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    require(x.ndim() == 2 && w.ndim() == 2, "linear expects 2-D input and weight");
    require(x.cols() == w.rows(), "linear inner dimensions disagree");
    require(b.numel() == w.cols(), "linear bias length must equal output width");
    const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
    std::vector<double> out(m * n);
    {
        const double* px = x.values().data();
        const double* pw = w.values().data();
        const double* pbv = b.values().data();
        for (std::size_t i = 0; i < m; ++i) {
            double* po = out.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) po[j] = pbv[j];
            for (std::size_t p = 0; p < k; ++p) {
                const double xip = px[i * k + p];
                const double* pwr = pw + p * n;
                for (std::size_t j = 0; j < n; ++j) po[j] += xip * pwr[j];
            }
        }
    }
    Tensor o = Tensor::from({m, n}, std::move(out));
    auto xs = x.shared(), ws = w.shared(), bs = b.shared(), os = o.shared();
    SLOTMERGE_RECORD("linear", o,
        x.requires_grad() || w.requires_grad() || b.requires_grad(),
        [xs, ws, bs, os, m, k, n]() {
            const double* go = os->grad.data();
            if (xs->requires_grad) {
                double* gx = grad_of(xs);
                const double* pw = ws->values.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* goi = go + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* pwr = pw + p * n;
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += goi[j] * pwr[j];
                        gx[i * k + p] += s;
                    }
                }
            }
            if (ws->requires_grad) {
                double* gw = grad_of(ws);
                const double* px = xs->values.data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* goi = go + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double xip = px[i * k + p];
                        double* gwr = gw + p * n;
                        for (std::size_t j = 0; j < n; ++j) gwr[j] += xip * goi[j];
                    }
                }
            }
            if (bs->requires_grad) {
                double* gb = grad_of(bs);
                for (std::size_t i = 0; i < m; ++i) {
                    const double* goi = go + i * n;
                    for (std::size_t j = 0; j < n; ++j) gb[j] += goi[j];
                }
            }
        });
    return o;
}

// ----------------------------------------------------------- elementwise

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch");
}
}  // namespace

Tensor Graph::add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) + b.at(i);
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), bs = b.shared(), os = o.shared();
    SLOTMERGE_RECORD("add", o, a.requires_grad() || b.requires_grad(), [as, bs, os, n]() {
        const double* go = os->grad.data();
        if (as->requires_grad) {
            double* ga = grad_of(as);
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
        }
        if (bs->requires_grad) {
            double* gb = grad_of(bs);
            for (std::size_t i = 0; i < n; ++i) gb[i] += go[i];
        }
    });
    return o;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) - b.at(i);
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), bs = b.shared(), os = o.shared();
    SLOTMERGE_RECORD("sub", o, a.requires_grad() || b.requires_grad(), [as, bs, os, n]() {
        const double* go = os->grad.data();
        if (as->requires_grad) {
            double* ga = grad_of(as);
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
        }
        if (bs->requires_grad) {
            double* gb = grad_of(bs);
            for (std::size_t i = 0; i < n; ++i) gb[i] -= go[i];
        }
    });
    return o;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) * b.at(i);
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), bs = b.shared(), os = o.shared();
    SLOTMERGE_RECORD("mul", o, a.requires_grad() || b.requires_grad(), [as, bs, os, n]() {
        const double* go = os->grad.data();
        if (as->requires_grad) {
            double* ga = grad_of(as);
            const double* pb = bs->values.data();
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * pb[i];
        }
        if (bs->requires_grad) {
            double* gb = grad_of(bs);
            const double* pa = as->values.data();
            for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * pa[i];
        }
    });
    return o;
}

Tensor Graph::div(const Tensor& a, const Tensor& b, double eps) {
    require_same_shape(a, b, "div");
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) / (b.at(i) + eps);
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), bs = b.shared(), os = o.shared();
    SLOTMERGE_RECORD("div", o, a.requires_grad() || b.requires_grad(), [as, bs, os, n, eps]() {
        const double* go = os->grad.data();
        const double* pa = as->values.data();
        const double* pb = bs->values.data();
        if (as->requires_grad) {
            double* ga = grad_of(as);
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] / (pb[i] + eps);
        }
        if (bs->requires_grad) {
            double* gb = grad_of(bs);
            for (std::size_t i = 0; i < n; ++i) {
                const double d = pb[i] + eps;
                gb[i] -= go[i] * pa[i] / (d * d);
            }
        }
    });
    return o;
}

Tensor Graph::scale(const Tensor& a, double c) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) * c;
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("scale", o, a.requires_grad(), [as, os, n, c]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * c;
    });
    return o;
}

Tensor Graph::add_const(const Tensor& a, double c) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) + c;
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("add_const", o, a.requires_grad(), [as, os, n]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
    });
    return o;
}

Tensor Graph::sigmoid(const Tensor& a) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = 1.0 / (1.0 + std::exp(-a.at(i)));
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("sigmoid", o, a.requires_grad(), [as, os, n]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        const double* y = os->values.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * y[i] * (1.0 - y[i]);
    });
    return o;
}

Tensor Graph::tanh(const Tensor& a) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(a.at(i));
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("tanh", o, a.requires_grad(), [as, os, n]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        const double* y = os->values.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * (1.0 - y[i] * y[i]);
    });
    return o;
}

Tensor Graph::relu(const Tensor& a) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("relu", o, a.requires_grad(), [as, os, n]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        const double* x = as->values.data();
        for (std::size_t i = 0; i < n; ++i)
            if (x[i] > 0.0) ga[i] += go[i];
    });
    return o;
}

Tensor Graph::exp(const Tensor& a) {
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a.at(i));
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("exp", o, a.requires_grad(), [as, os, n]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        const double* y = os->values.data();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * y[i];
    });
    return o;
}

Tensor Graph::mul_scalar(const Tensor& a, const Tensor& s) {
    require(s.numel() == 1, "mul_scalar expects a 1-element scalar tensor");
    const double sv = s.at(0);
    const std::size_t n = a.numel();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = a.at(i) * sv;
    Tensor o = Tensor::from(a.shape(), std::move(out));
    auto as = a.shared(), ss = s.shared(), os = o.shared();
    SLOTMERGE_RECORD("mul_scalar", o, a.requires_grad() || s.requires_grad(),
        [as, ss, os, n]() {
            const double* go = os->grad.data();
            if (as->requires_grad) {
                double* ga = grad_of(as);
                const double sv2 = ss->values[0];
                for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * sv2;
            }
            if (ss->requires_grad) {
                double* gs = grad_of(ss);
                const double* pa = as->values.data();
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += go[i] * pa[i];
                gs[0] += acc;
            }
        });
    return o;
}

// ---------------------------------------------------------- reductions

Tensor Graph::sum(const Tensor& a, std::size_t axis) {
    require(a.ndim() == 2, "sum(axis) expects a 2-D tensor");
    require(axis < 2, "sum axis out of range");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(axis == 0 ? n : m, 0.0);
    if (axis == 0) {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j] += a.at(i, j);
    } else {
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += a.at(i, j);
            out[i] = s;
        }
    }
    Tensor o = Tensor::from({out.size()}, std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("sum", o, a.requires_grad(), [as, os, m, n, axis]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        if (axis == 0) {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j];
        } else {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[i];
        }
    });
    return o;
}

Tensor Graph::sum_all(const Tensor& a) {
    const std::size_t n = a.numel();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += a.at(i);
    Tensor o = Tensor::scalar(s);
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("sum_all", o, a.requires_grad(), [as, os, n]() {
        double* ga = grad_of(as);
        const double g = os->grad[0];
        for (std::size_t i = 0; i < n; ++i) ga[i] += g;
    });
    return o;
}

Tensor Graph::slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t len) {
    require(a.ndim() <= 2, "slice expects a 1-D or 2-D tensor");
    if (a.ndim() == 1) {
        require(axis == 0 && start + len <= a.numel(), "slice out of range");
        std::vector<double> out(a.values().begin() + start, a.values().begin() + start + len);
        Tensor o = Tensor::from({len}, std::move(out));
        auto as = a.shared(), os = o.shared();
        SLOTMERGE_RECORD("slice", o, a.requires_grad(), [as, os, start, len]() {
            double* ga = grad_of(as);
            const double* go = os->grad.data();
            for (std::size_t i = 0; i < len; ++i) ga[start + i] += go[i];
        });
        return o;
    }
    const std::size_t m = a.rows(), n = a.cols();
    require(axis < 2, "slice axis out of range");
    if (axis == 0) {
        require(start + len <= m, "slice out of range");
        std::vector<double> out(a.values().begin() + start * n,
                                a.values().begin() + (start + len) * n);
        Tensor o = Tensor::from({len, n}, std::move(out));
        auto as = a.shared(), os = o.shared();
        SLOTMERGE_RECORD("slice", o, a.requires_grad(), [as, os, start, len, n]() {
            double* ga = grad_of(as);
            const double* go = os->grad.data();
            for (std::size_t i = 0; i < len * n; ++i) ga[start * n + i] += go[i];
        });
        return o;
    }
    require(start + len <= n, "slice out of range");
    std::vector<double> out(m * len);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) out[i * len + j] = a.at(i, start + j);
    Tensor o = Tensor::from({m, len}, std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("slice", o, a.requires_grad(), [as, os, m, n, start, len]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < len; ++j) ga[i * n + start + j] += go[i * len + j];
    });
    return o;
}

Tensor Graph::concat(const Tensor& a, const Tensor& b, std::size_t axis) {
    require(a.ndim() == 2 && b.ndim() == 2, "concat expects 2-D tensors");
    require(axis < 2, "concat axis out of range");
    if (axis == 0) {
        require(a.cols() == b.cols(), "concat: column counts disagree");
        const std::size_t n = a.cols(), ma = a.rows(), mb = b.rows();
        std::vector<double> out;
        out.reserve((ma + mb) * n);
        out.insert(out.end(), a.values().begin(), a.values().end());
        out.insert(out.end(), b.values().begin(), b.values().end());
        Tensor o = Tensor::from({ma + mb, n}, std::move(out));
        auto as = a.shared(), bs = b.shared(), os = o.shared();
        SLOTMERGE_RECORD("concat", o, a.requires_grad() || b.requires_grad(),
            [as, bs, os, ma, mb, n]() {
                const double* go = os->grad.data();
                if (as->requires_grad) {
                    double* ga = grad_of(as);
                    for (std::size_t i = 0; i < ma * n; ++i) ga[i] += go[i];
                }
                if (bs->requires_grad) {
                    double* gb = grad_of(bs);
                    for (std::size_t i = 0; i < mb * n; ++i) gb[i] += go[ma * n + i];
                }
            });
        return o;
    }
    return concat_cols({a, b});
}

Tensor Graph::concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const std::size_t m = parts.front().rows();
    std::size_t total = 0;
    bool needs = false;
    for (const Tensor& p : parts) {
        require(p.ndim() == 2 && p.rows() == m, "concat_cols: row counts disagree");
        total += p.cols();
        needs = needs || p.requires_grad();
    }
    std::vector<double> out(m * total);
    std::size_t off = 0;
    for (const Tensor& p : parts) {
        const std::size_t pc = p.cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < pc; ++j) out[i * total + off + j] = p.at(i, j);
        off += pc;
    }
    Tensor o = Tensor::from({m, total}, std::move(out));
    std::vector<std::shared_ptr<TensorData>> srcs;
    srcs.reserve(parts.size());
    for (const Tensor& p : parts) srcs.push_back(p.shared());
    auto os = o.shared();
    SLOTMERGE_RECORD("concat_cols", o, needs, [srcs, os, m, total]() {
        const double* go = os->grad.data();
        std::size_t off2 = 0;
        for (const auto& src : srcs) {
            const std::size_t pc = src->values.size() / m;
            if (src->requires_grad) {
                double* g = grad_of(src);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < pc; ++j)
                        g[i * pc + j] += go[i * total + off2 + j];
            }
            off2 += pc;
        }
    });
    return o;
}

Tensor Graph::masked_select_rows(const Tensor& a, const std::vector<bool>& keep) {
    require(a.ndim() == 2, "masked_select_rows expects a 2-D tensor");
    require(keep.size() == a.rows(), "masked_select_rows: mask length mismatch");
    const std::size_t n = a.cols();
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) idx.push_back(i);
    std::vector<double> out(idx.size() * n);
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = a.at(idx[r], j);
    Tensor o = Tensor::from({idx.size(), n}, std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("masked_select_rows", o, a.requires_grad(), [as, os, idx, n]() {
        double* ga = grad_of(as);
        const double* go = os->grad.data();
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t j = 0; j < n; ++j) ga[idx[r] * n + j] += go[r * n + j];
    });
    return o;
}

Tensor Graph::replace_row(const Tensor& a, std::size_t row, const Tensor& r) {
    require(a.ndim() == 2, "replace_row expects a 2-D tensor");
    require(row < a.rows(), "replace_row: row out of range");
    require(r.numel() == a.cols(), "replace_row: row length mismatch");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(a.values().begin(), a.values().end());
    for (std::size_t j = 0; j < n; ++j) out[row * n + j] = r.at(j);
    Tensor o = Tensor::from({m, n}, std::move(out));
    auto as = a.shared(), rs = r.shared(), os = o.shared();
    SLOTMERGE_RECORD("replace_row", o, a.requires_grad() || r.requires_grad(),
        [as, rs, os, row, m, n]() {
            const double* go = os->grad.data();
            if (as->requires_grad) {
                double* ga = grad_of(as);
                for (std::size_t i = 0; i < m; ++i) {
                    if (i == row) continue;
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[i * n + j];
                }
            }
            if (rs->requires_grad) {
                double* gr = grad_of(rs);
                for (std::size_t j = 0; j < n; ++j) gr[j] += go[row * n + j];
            }
        });
    return o;
}

Tensor Graph::replace_col(const Tensor& a, std::size_t col, const Tensor& c) {
    require(a.ndim() == 2, "replace_col expects a 2-D tensor");
    require(col < a.cols(), "replace_col: column out of range");
    require(c.numel() == a.rows(), "replace_col: column length mismatch");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < m; ++i) out[i * n + col] = c.at(i);
    Tensor o = Tensor::from({m, n}, std::move(out));
    auto as = a.shared(), cs = c.shared(), os = o.shared();
    SLOTMERGE_RECORD("replace_col", o, a.requires_grad() || c.requires_grad(),
        [as, cs, os, col, m, n]() {
            const double* go = os->grad.data();
            if (as->requires_grad) {
                double* ga = grad_of(as);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        if (j != col) ga[i * n + j] += go[i * n + j];
            }
            if (cs->requires_grad) {
                double* gc = grad_of(cs);
                for (std::size_t i = 0; i < m; ++i) gc[i] += go[i * n + col];
            }
        });
    return o;
}

Tensor Graph::tile_rows(const Tensor& v, std::size_t n_rows) {
    const std::size_t n = v.numel();
    std::vector<double> out(n_rows * n);
    for (std::size_t i = 0; i < n_rows; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v.at(j);
    Tensor o = Tensor::from({n_rows, n}, std::move(out));
    auto vs = v.shared(), os = o.shared();
    SLOTMERGE_RECORD("tile_rows", o, v.requires_grad(), [vs, os, n_rows, n]() {
        double* gv = grad_of(vs);
        const double* go = os->grad.data();
        for (std::size_t i = 0; i < n_rows; ++i)
            for (std::size_t j = 0; j < n; ++j) gv[j] += go[i * n + j];
    });
    return o;
}

// ------------------------------------------------------ row/col broadcast

Tensor Graph::add_rowvec(const Tensor& a, const Tensor& v) {
    require(a.ndim() == 2, "add_rowvec expects a 2-D tensor");
    require(v.numel() == a.cols(), "add_rowvec: vector length mismatch");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i, j) + v.at(j);
    Tensor o = Tensor::from({m, n}, std::move(out));
    auto as = a.shared(), vs = v.shared(), os = o.shared();
    SLOTMERGE_RECORD("add_rowvec", o, a.requires_grad() || v.requires_grad(),
        [as, vs, os, m, n]() {
            const double* go = os->grad.data();
            if (as->requires_grad) {
                double* ga = grad_of(as);
                for (std::size_t i = 0; i < m * n; ++i) ga[i] += go[i];
            }
            if (vs->requires_grad) {
                double* gv = grad_of(vs);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gv[j] += go[i * n + j];
            }
        });
    return o;
}

Tensor Graph::div_rowvec(const Tensor& a, const Tensor& v, double eps) {
    require(a.ndim() == 2, "div_rowvec expects a 2-D tensor");
    require(v.numel() == a.cols(), "div_rowvec: vector length mismatch");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i, j) / (v.at(j) + eps);
    Tensor o = Tensor::from({m, n}, std::move(out));
    auto as = a.shared(), vs = v.shared(), os = o.shared();
    SLOTMERGE_RECORD("div_rowvec", o, a.requires_grad() || v.requires_grad(),
        [as, vs, os, m, n, eps]() {
            const double* go = os->grad.data();
            const double* pa = as->values.data();
            const double* pv = vs->values.data();
            if (as->requires_grad) {
                double* ga = grad_of(as);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        ga[i * n + j] += go[i * n + j] / (pv[j] + eps);
            }
            if (vs->requires_grad) {
                double* gv = grad_of(vs);
                for (std::size_t j = 0; j < n; ++j) {
                    const double d = pv[j] + eps;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < m; ++i)
                        acc -= go[i * n + j] * pa[i * n + j];
                    gv[j] += acc / (d * d);
                }
            }
        });
    return o;
}

Tensor Graph::mul_colvec(const Tensor& a, const Tensor& v) {
    require(a.ndim() == 2, "mul_colvec expects a 2-D tensor");
    require(v.numel() == a.rows(), "mul_colvec: vector length mismatch");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double vi = v.at(i);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.at(i, j) * vi;
    }
    Tensor o = Tensor::from({m, n}, std::move(out));
    auto as = a.shared(), vs = v.shared(), os = o.shared();
    SLOTMERGE_RECORD("mul_colvec", o, a.requires_grad() || v.requires_grad(),
        [as, vs, os, m, n]() {
            const double* go = os->grad.data();
            const double* pa = as->values.data();
            const double* pv = vs->values.data();
            if (as->requires_grad) {
                double* ga = grad_of(as);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[i * n + j] * pv[i];
            }
            if (vs->requires_grad) {
                double* gv = grad_of(vs);
                for (std::size_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j) acc += go[i * n + j] * pa[i * n + j];
                    gv[i] += acc;
                }
            }
        });
    return o;
}

// --------------------------------------------------------- normalization

namespace {
// softmax over one contiguous-strided lane; max-subtracted for stability
void softmax_lane(const double* x, double* y, std::size_t len, std::size_t stride) {
    double mx = x[0];
    for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, x[i * stride]);
    double denom = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
        const double e = std::exp(x[i * stride] - mx);
        y[i * stride] = e;
        denom += e;
    }
    for (std::size_t i = 0; i < len; ++i) y[i * stride] /= denom;
}

void softmax_lane_backward(const double* y, const double* go, double* gx,
                           std::size_t len, std::size_t stride) {
    double dot = 0.0;
    for (std::size_t i = 0; i < len; ++i) dot += go[i * stride] * y[i * stride];
    for (std::size_t i = 0; i < len; ++i)
        gx[i * stride] += y[i * stride] * (go[i * stride] - dot);
}
}  // namespace

Tensor Graph::softmax(const Tensor& a, std::size_t axis) {
    if (a.ndim() == 1) {
        require(axis == 0, "softmax axis out of range");
        std::vector<double> out(a.numel());
        softmax_lane(a.values().data(), out.data(), a.numel(), 1);
        Tensor o = Tensor::from(a.shape(), std::move(out));
        auto as = a.shared(), os = o.shared();
        const std::size_t n = a.numel();
        SLOTMERGE_RECORD("softmax", o, a.requires_grad(), [as, os, n]() {
            softmax_lane_backward(os->values.data(), os->grad.data(), grad_of(as), n, 1);
        });
        return o;
    }
    require(a.ndim() == 2 && axis < 2, "softmax expects 1-D or 2-D with valid axis");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    if (axis == 1) {
        for (std::size_t i = 0; i < m; ++i)
            softmax_lane(a.values().data() + i * n, out.data() + i * n, n, 1);
    } else {
        for (std::size_t j = 0; j < n; ++j)
            softmax_lane(a.values().data() + j, out.data() + j, m, n);
    }
    Tensor o = Tensor::from({m, n}, std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("softmax", o, a.requires_grad(), [as, os, m, n, axis]() {
        double* ga = grad_of(as);
        if (axis == 1) {
            for (std::size_t i = 0; i < m; ++i)
                softmax_lane_backward(os->values.data() + i * n, os->grad.data() + i * n,
                                      ga + i * n, n, 1);
        } else {
            for (std::size_t j = 0; j < n; ++j)
                softmax_lane_backward(os->values.data() + j, os->grad.data() + j, ga + j, m, n);
        }
    });
    return o;
}

Tensor Graph::softmax_masked_cols(const Tensor& a, const std::vector<bool>& active) {
    require(a.ndim() == 2, "softmax_masked_cols expects a 2-D tensor");
    require(active.size() == a.cols(), "softmax_masked_cols: mask length mismatch");
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < active.size(); ++k)
        if (active[k]) idx.push_back(k);
    if (idx.empty()) throw StateError("softmax_masked_cols: no active columns");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = a.values().data() + i * n;
        double* y = out.data() + i * n;
        double mx = x[idx[0]];
        for (std::size_t t = 1; t < idx.size(); ++t) mx = std::max(mx, x[idx[t]]);
        double denom = 0.0;
        for (std::size_t t = 0; t < idx.size(); ++t) {
            const double e = std::exp(x[idx[t]] - mx);
            y[idx[t]] = e;
            denom += e;
        }
        for (std::size_t t = 0; t < idx.size(); ++t) y[idx[t]] /= denom;
    }
    Tensor o = Tensor::from({m, n}, std::move(out));
    auto as = a.shared(), os = o.shared();
    SLOTMERGE_RECORD("softmax_masked_cols", o, a.requires_grad(), [as, os, idx, m, n]() {
        double* ga = grad_of(as);
        for (std::size_t i = 0; i < m; ++i) {
            const double* y = os->values.data() + i * n;
            const double* go = os->grad.data() + i * n;
            double dot = 0.0;
            for (std::size_t t = 0; t < idx.size(); ++t) dot += go[idx[t]] * y[idx[t]];
            for (std::size_t t = 0; t < idx.size(); ++t)
                ga[i * n + idx[t]] += y[idx[t]] * (go[idx[t]] - dot);
        }
    });
    return o;
}

Tensor Graph::layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t n = x.ndim() == 2 ? x.cols() : x.numel();
    const std::size_t m = x.ndim() == 2 ? x.rows() : 1;
    require(gain.numel() == n && bias.numel() == n, "layernorm: affine length mismatch");
    std::vector<double> out(m * n);
    std::vector<double> inv_std(m), mean(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = x.values().data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xi[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = xi[j] - mu;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = is;
        for (std::size_t j = 0; j < n; ++j)
            out[i * n + j] = (xi[j] - mu) * is * gain.at(j) + bias.at(j);
    }
    Tensor o = Tensor::from(x.shape(), std::move(out));
    auto xs = x.shared(), gs = gain.shared(), bs = bias.shared(), os = o.shared();
    SLOTMERGE_RECORD("layernorm", o,
        x.requires_grad() || gain.requires_grad() || bias.requires_grad(),
        [xs, gs, bs, os, m, n, mean, inv_std]() {
            const double* go = os->grad.data();
            const double* pg = gs->values.data();
            for (std::size_t i = 0; i < m; ++i) {
                const double* xi = xs->values.data() + i * n;
                const double* goi = go + i * n;
                const double mu = mean[i];
                const double is = inv_std[i];
                if (gs->requires_grad || bs->requires_grad) {
                    double* gg = gs->requires_grad ? grad_of(gs) : nullptr;
                    double* gb = bs->requires_grad ? grad_of(bs) : nullptr;
                    for (std::size_t j = 0; j < n; ++j) {
                        if (gg) gg[j] += goi[j] * (xi[j] - mu) * is;
                        if (gb) gb[j] += goi[j];
                    }
                }
                if (xs->requires_grad) {
                    double* gx = grad_of(xs) + i * n;
                    // dL/dxhat_j = go_j * gain_j; standard layernorm backward
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxhat = goi[j] * pg[j];
                        const double xhat = (xi[j] - mu) * is;
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    const double inv_n = 1.0 / static_cast<double>(n);
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dxhat = goi[j] * pg[j];
                        const double xhat = (xi[j] - mu) * is;
                        gx[j] += is * (dxhat - inv_n * sum_dxhat - inv_n * xhat * sum_dxhat_xhat);
                    }
                }
            }
        });
    return o;
}

Tensor Graph::detach(const Tensor& a) {
    return a.clone(false);
}

void Graph::backward(const Tensor& loss) {
    if (loss.numel() != 1) throw DimensionError("backward expects a scalar loss");
    // Zero node-output grads so repeated sweeps accumulate into leaves only.
    for (Node& node : nodes_) {
        if (node.out->grad.empty())
            node.out->grad.assign(node.out->values.size(), 0.0);
        else
            std::fill(node.out->grad.begin(), node.out->grad.end(), 0.0);
    }
    if (!loss.grad_allocated()) loss.raw()->grad.assign(1, 0.0);
    loss.raw()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
}

}  // namespace slotmerge
