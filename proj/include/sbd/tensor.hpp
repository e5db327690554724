#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Operations that read a
// tensor requiring gradients record their inputs and a backward rule on the
// result; calling backward() on a scalar walks the recorded graph in reverse
// topological order and accumulates gradients into every reachable node.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "sbd/common.hpp"

namespace sbd {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until some gradient reaches this node
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
   public:
    using Scalar = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        if (numel_of(shape) != values.size()) {
            throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(numel_of(shape)) +
                             " values, got " + std::to_string(values.size()));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = numel_of(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) { return Tensor(Shape{}, std::vector<T>{v}, requires_grad); }

    static Tensor from_node(std::shared_ptr<Node<T>> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }
    std::span<const T> data() const { return node_->data; }
    std::span<T> mutable_data() { return node_->data; }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }
    const char* op_name() const { return node_->op; }
    T item() const {
        if (numel() != 1) throw ContractError("item: tensor " + shape_str(shape()) + " is not a scalar");
        return node_->data[0];
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }
    bool same_node(const Tensor& o) const { return node_ == o.node_; }

    // Computes d(this)/d(leaf) for every reachable node requiring gradients.
    // Leaf gradients accumulate across calls; interior gradients are reset.
    void backward() const;

   private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
    for (const T x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

// Builds an op result. `fn` receives the result node once its gradient is
// known and must scatter into parents that require gradients.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> fn) {
    check_finite(data, op);
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->op = op;
    n->is_leaf = false;
    bool needs = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        n->requires_grad = true;
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::move(fn);
    }
    return Tensor<T>::from_node(std::move(n));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

inline std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

inline bool is_suffix(const Shape& whole, const Shape& suffix) {
    if (suffix.size() > whole.size()) return false;
    return std::equal(suffix.rbegin(), suffix.rend(), whole.rbegin());
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(shape()));
    if (!requires_grad()) return;

    // Iterative post-order DFS yields a topological order; each node once.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node<T>* n : order) {
        if (!n->is_leaf) n->grad.clear();
    }
    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel_of(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    return detail::make_result<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// Identity on values; gradients stop here.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
    return Tensor<T>(x.shape(), std::vector<T>(x.data().begin(), x.data().end()), false);
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. `b` may match `a` exactly or match a suffix of its
// shape, in which case it is broadcast over the leading dimensions.

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!detail::is_suffix(a.shape(), b.shape())) {
        throw ShapeError("add: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
    }
    const std::size_t n = a.numel(), m = b.numel();
    std::vector<T> out(n);
    const auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i % m];
    return detail::make_result<T>("add", a.shape(), std::move(out), {a, b}, [n, m](Node<T>& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i % m] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t n = a.numel();
    std::vector<T> out(n);
    const auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i];
    return detail::make_result<T>("sub", a.shape(), std::move(out), {a, b}, [n](Node<T>& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (!detail::is_suffix(a.shape(), b.shape())) {
        throw ShapeError("mul: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
    }
    const std::size_t n = a.numel(), m = b.numel();
    std::vector<T> out(n);
    const auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i % m];
    return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [n, m](Node<T>& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * bv[i % m];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->grad_buffer();
            for (std::size_t i = 0; i < n; ++i) g[i % m] += self.grad[i] * av[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v *= s;
    return detail::make_result<T>("scale", x.shape(), std::move(out), {x}, [s](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.data().begin(), x.data().end());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    return detail::make_result<T>("relu", x.shape(), std::move(out), {x}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        const auto& xv = self.parents[0]->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > T(0)) g[i] += self.grad[i];
        }
    });
}

// Inverted dropout: Bernoulli keep-mask scaled by 1/(1-p), drawn from a
// stream fully determined by `seed`.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, std::uint64_t seed) {
    if (p <= 0.0) return x;
    if (p >= 1.0) throw ContractError("dropout: probability must be < 1");
    std::mt19937_64 eng(seed);
    const T keep_scale = T(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<T>>(x.numel());
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*mask)[i] = uniform01(eng) < p ? T(0) : keep_scale;
        out[i] = xd[i] * (*mask)[i];
    }
    return detail::make_result<T>("dropout", x.shape(), std::move(out), {x}, [mask](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// Matrix products

enum class Trans { kNo, kYes };

// a: [..., m, k]. b: [k, n] (shared across the leading dims of a) or
// [batch, k, n] matching a's single leading dim. With Trans::kYes, b is read
// transposed: [n, k] or [batch, n, k].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, Trans tb = Trans::kNo) {
    using detail::ConstMap;
    using detail::MutMap;
    const bool tr = tb == Trans::kYes;
    auto mismatch = [&] {
        return ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                          (tr ? " (b transposed)" : ""));
    };
    if (a.rank() < 1 || b.rank() < 2) throw mismatch();

    if (b.rank() == 2) {
        const std::size_t k = a.shape().back();
        const std::size_t bk = tr ? b.dim(1) : b.dim(0);
        const std::size_t n = tr ? b.dim(0) : b.dim(1);
        if (k != bk) throw mismatch();
        const std::size_t rows = a.numel() / std::max<std::size_t>(k, 1);
        Shape out_shape = a.shape();
        out_shape.back() = n;
        std::vector<T> out(rows * n);
        ConstMap<T> A(a.data().data(), rows, k);
        ConstMap<T> B(b.data().data(), b.dim(0), b.dim(1));
        MutMap<T> C(out.data(), rows, n);
        if (tr)
            C.noalias() = A * B.transpose();
        else
            C.noalias() = A * B;
        return detail::make_result<T>(
            "matmul", std::move(out_shape), std::move(out), {a, b}, [rows, k, n, tr](Node<T>& self) {
                auto& pa = *self.parents[0];
                auto& pb = *self.parents[1];
                ConstMap<T> G(self.grad.data(), rows, n);
                const std::size_t br = tr ? n : k, bc = tr ? k : n;
                if (pa.requires_grad) {
                    MutMap<T> dA(pa.grad_buffer().data(), rows, k);
                    ConstMap<T> B(pb.data.data(), br, bc);
                    if (tr)
                        dA.noalias() += G * B;
                    else
                        dA.noalias() += G * B.transpose();
                }
                if (pb.requires_grad) {
                    MutMap<T> dB(pb.grad_buffer().data(), br, bc);
                    ConstMap<T> A(pa.data.data(), rows, k);
                    if (tr)
                        dB.noalias() += G.transpose() * A;
                    else
                        dB.noalias() += A.transpose() * G;
                }
            });
    }

    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) throw mismatch();
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t bk = tr ? b.dim(2) : b.dim(1);
    const std::size_t n = tr ? b.dim(1) : b.dim(2);
    if (k != bk) throw mismatch();
    const std::size_t br = b.dim(1), bc = b.dim(2);
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
        ConstMap<T> A(a.data().data() + i * m * k, m, k);
        ConstMap<T> B(b.data().data() + i * br * bc, br, bc);
        MutMap<T> C(out.data() + i * m * n, m, n);
        if (tr)
            C.noalias() = A * B.transpose();
        else
            C.noalias() = A * B;
    }
    return detail::make_result<T>(
        "bmm", Shape{batch, m, n}, std::move(out), {a, b}, [batch, m, k, n, br, bc, tr](Node<T>& self) {
            auto& pa = *self.parents[0];
            auto& pb = *self.parents[1];
            T* ga = pa.requires_grad ? pa.grad_buffer().data() : nullptr;
            T* gb = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
            for (std::size_t i = 0; i < batch; ++i) {
                ConstMap<T> G(self.grad.data() + i * m * n, m, n);
                if (ga) {
                    MutMap<T> dA(ga + i * m * k, m, k);
                    ConstMap<T> B(pb.data.data() + i * br * bc, br, bc);
                    if (tr)
                        dA.noalias() += G * B;
                    else
                        dA.noalias() += G * B.transpose();
                }
                if (gb) {
                    MutMap<T> dB(gb + i * br * bc, br, bc);
                    ConstMap<T> A(pa.data.data() + i * m * k, m, k);
                    if (tr)
                        dB.noalias() += G.transpose() * A;
                    else
                        dB.noalias() += A.transpose() * G;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Normalizations over the last dimension

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
    const std::size_t d = detail::last_dim(x.shape());
    if (d == 0 || x.rank() == 0) throw ShapeError("softmax: empty last dimension in " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xd.data() + r * d;
        T* o = out.data() + r * d;
        const T mx = *std::max_element(in, in + d);
        T sum = 0;
        for (std::size_t j = 0; j < d; ++j) sum += (o[j] = std::exp(in[j] - mx));
        for (std::size_t j = 0; j < d; ++j) o[j] /= sum;
    }
    return detail::make_result<T>("softmax", x.shape(), std::move(out), {x}, [rows, d](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * d;
            const T* gy = self.grad.data() + r * d;
            T dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (gy[j] - dot);
        }
    });
}

template <typename T>
Tensor<T> log_softmax_lastdim(const Tensor<T>& x) {
    const std::size_t d = detail::last_dim(x.shape());
    if (d == 0 || x.rank() == 0) throw ShapeError("log_softmax: empty last dimension in " + shape_str(x.shape()));
    const std::size_t rows = x.numel() / d;
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xd.data() + r * d;
        T* o = out.data() + r * d;
        const T mx = *std::max_element(in, in + d);
        T sum = 0;
        for (std::size_t j = 0; j < d; ++j) sum += std::exp(in[j] - mx);
        const T lse = mx + std::log(sum);
        for (std::size_t j = 0; j < d; ++j) o[j] = in[j] - lse;
    }
    return detail::make_result<T>("log_softmax", x.shape(), std::move(out), {x}, [rows, d](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * d;
            const T* gy = self.grad.data() + r * d;
            T gsum = 0;
            for (std::size_t j = 0; j < d; ++j) gsum += gy[j];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[j] - std::exp(y[j]) * gsum;
        }
    });
}

// Attention mask shared by all heads of a batch row: allowed[b][q][k].
struct AttentionMask {
    std::size_t batch = 0, queries = 0, keys = 0;
    std::vector<std::uint8_t> allowed;

    bool at(std::size_t b, std::size_t q, std::size_t k) const { return allowed[(b * queries + q) * keys + k] != 0; }
};

// Softmax over keys restricted to allowed entries. scores: [batch*heads, Q, K].
// Disallowed entries get probability exactly 0; a row with nothing allowed is
// all zeros.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& scores, std::shared_ptr<const AttentionMask> mask, std::size_t heads) {
    if (scores.rank() != 3 || heads == 0 || scores.dim(0) != mask->batch * heads || scores.dim(1) != mask->queries ||
        scores.dim(2) != mask->keys) {
        throw ShapeError("masked_softmax: scores " + shape_str(scores.shape()) + " do not match mask [" +
                         std::to_string(mask->batch) + "x" + std::to_string(heads) + " heads, " +
                         std::to_string(mask->queries) + "x" + std::to_string(mask->keys) + "]");
    }
    const std::size_t groups = scores.dim(0), q = scores.dim(1), k = scores.dim(2);
    std::vector<T> out(scores.numel(), T(0));
    const auto sd = scores.data();
    for (std::size_t g = 0; g < groups; ++g) {
        const std::size_t b = g / heads;
        for (std::size_t i = 0; i < q; ++i) {
            const std::size_t row = (g * q + i) * k;
            const std::uint8_t* allow = mask->allowed.data() + (b * q + i) * k;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < k; ++j) {
                if (allow[j]) mx = std::max(mx, sd[row + j]);
            }
            if (mx == -std::numeric_limits<T>::infinity()) continue;
            T sum = 0;
            for (std::size_t j = 0; j < k; ++j) {
                if (allow[j]) sum += (out[row + j] = std::exp(sd[row + j] - mx));
            }
            for (std::size_t j = 0; j < k; ++j) out[row + j] /= sum;
        }
    }
    const std::size_t rows = groups * q;
    return detail::make_result<T>("masked_softmax", scores.shape(), std::move(out), {scores}, [rows, k](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * k;
            const T* gy = self.grad.data() + r * k;
            T dot = 0;
            for (std::size_t j = 0; j < k; ++j) dot += gy[j] * y[j];
            for (std::size_t j = 0; j < k; ++j) g[r * k + j] += y[j] * (gy[j] - dot);
        }
    });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
    const std::size_t d = detail::last_dim(x.shape());
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " vs gain " + shape_str(gain.shape()) +
                         " / bias " + shape_str(bias.shape()));
    }
    const std::size_t rows = x.numel() / d;
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    std::vector<T> out(x.numel());
    const auto xd = x.data(), gd = gain.data(), bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = xd.data() + r * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= T(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (in[j] - mean) * is;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = h * gd[j] + bd[j];
        }
    }
    return detail::make_result<T>(
        "layer_norm", x.shape(), std::move(out), {x, gain, bias}, [rows, d, xhat, inv_std](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pg = *self.parents[1];
            auto& pb = *self.parents[2];
            const auto& gv = pg.data;
            if (pg.requires_grad) {
                auto& gg = pg.grad_buffer();
                for (std::size_t i = 0; i < rows * d; ++i) gg[i % d] += self.grad[i] * (*xhat)[i];
            }
            if (pb.requires_grad) {
                auto& gb = pb.grad_buffer();
                for (std::size_t i = 0; i < rows * d; ++i) gb[i % d] += self.grad[i];
            }
            if (px.requires_grad) {
                auto& gx = px.grad_buffer();
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* gy = self.grad.data() + r * d;
                    const T* h = xhat->data() + r * d;
                    T mean_dh = 0, mean_dh_h = 0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const T dh = gy[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= T(d);
                    mean_dh_h /= T(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        gx[r * d + j] += (*inv_std)[r] * (gy[j] * gv[j] - mean_dh - h[j] * mean_dh_h);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Lookup, head reshuffles, reductions

// Gathers rows of table [V, d] for each id; result shape is ids_shape + [d].
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const TokenId> ids, Shape ids_shape) {
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2, got " + shape_str(table.shape()));
    if (numel_of(ids_shape) != ids.size()) throw ShapeError("embedding: id count does not match id shape");
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    auto idx = std::make_shared<std::vector<TokenId>>(ids.begin(), ids.end());
    std::vector<T> out(ids.size() * d);
    const auto td = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const TokenId id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw InputError("embedding: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
        }
        std::copy_n(td.data() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
    }
    Shape out_shape = std::move(ids_shape);
    out_shape.push_back(d);
    return detail::make_result<T>("embedding", std::move(out_shape), std::move(out), {table}, [idx, d](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < idx->size(); ++i) {
            T* row = g.data() + static_cast<std::size_t>((*idx)[i]) * d;
            const T* gy = self.grad.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += gy[j];
        }
    });
}

// [B, T, H*dh] -> [B*H, T, dh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.rank() != 3 || heads == 0 || x.dim(2) % heads != 0) {
        throw ShapeError("split_heads: cannot split " + shape_str(x.shape()) + " into " + std::to_string(heads) +
                         " heads");
    }
    const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2), dh = d / heads;
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t s = 0; s < t; ++s)
            for (std::size_t h = 0; h < heads; ++h)
                std::copy_n(xd.data() + (i * t + s) * d + h * dh, dh, out.data() + ((i * heads + h) * t + s) * dh);
    return detail::make_result<T>(
        "split_heads", Shape{b * heads, t, dh}, std::move(out), {x}, [b, t, d, dh, heads](Node<T>& self) {
            auto& g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t s = 0; s < t; ++s)
                    for (std::size_t h = 0; h < heads; ++h) {
                        const T* src = self.grad.data() + ((i * heads + h) * t + s) * dh;
                        T* dst = g.data() + (i * t + s) * d + h * dh;
                        for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                    }
        });
}

// [B*H, T, dh] -> [B, T, H*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.rank() != 3 || heads == 0 || x.dim(0) % heads != 0) {
        throw ShapeError("merge_heads: cannot merge " + shape_str(x.shape()) + " over " + std::to_string(heads) +
                         " heads");
    }
    const std::size_t b = x.dim(0) / heads, t = x.dim(1), dh = x.dim(2), d = dh * heads;
    std::vector<T> out(x.numel());
    const auto xd = x.data();
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t s = 0; s < t; ++s)
                std::copy_n(xd.data() + ((i * heads + h) * t + s) * dh, dh, out.data() + (i * t + s) * d + h * dh);
    return detail::make_result<T>(
        "merge_heads", Shape{b, t, d}, std::move(out), {x}, [b, t, d, dh, heads](Node<T>& self) {
            auto& g = self.parents[0]->grad_buffer();
            for (std::size_t i = 0; i < b; ++i)
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t s = 0; s < t; ++s) {
                        const T* src = self.grad.data() + (i * t + s) * d + h * dh;
                        T* dst = g.data() + ((i * heads + h) * t + s) * dh;
                        for (std::size_t j = 0; j < dh; ++j) dst[j] += src[j];
                    }
        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s = 0;
    for (const T v : x.data()) s += v;
    return detail::make_result<T>("sum", Shape{}, std::vector<T>{s}, {x}, [](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

// Scalar sum of x[i] * weights[i] with constant weights.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, std::shared_ptr<const std::vector<T>> weights) {
    if (weights->size() != x.numel()) {
        throw ShapeError("weighted_sum: " + std::to_string(weights->size()) + " weights for tensor " +
                         shape_str(x.shape()));
    }
    T s = 0;
    const auto xd = x.data();
    for (std::size_t i = 0; i < xd.size(); ++i) s += xd[i] * (*weights)[i];
    return detail::make_result<T>("weighted_sum", Shape{}, std::vector<T>{s}, {x}, [weights](Node<T>& self) {
        auto& g = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * (*weights)[i];
    });
}

}  // namespace sbd
