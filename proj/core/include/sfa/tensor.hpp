#pragma once

// Dense row-major tensors with reverse-mode autodiff. The scalar type is a
// template parameter: the library instantiates float (see Real below), tests
// instantiate double when an oracle needs the headroom.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace sfa {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Shape/contract violations raised by ops.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& m) : std::runtime_error(m) {}
};

class ParameterError : public std::runtime_error {
public:
    explicit ParameterError(const std::string& m) : std::runtime_error(m) {}
};

// Rectangular pass-through window used as the surrogate derivative of
// non-differentiable elementwise maps.
struct SurrogateSpec {
    enum class Kind { rectangular };
    Kind kind = Kind::rectangular;
    double lower = 0.0;
    double upper = 1.0;

    SurrogateSpec() = default;
    SurrogateSpec(double lo, double hi) : lower(lo), upper(hi) {
        if (!(lower < upper)) throw ParameterError("SurrogateSpec: lower must be < upper");
    }
};

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated on demand, same length as data
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode<T>>> parents;
    std::function<void(TensorNode<T>&)> backward;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Value-semantic handle over a shared graph node.
template <class T>
class TensorT {
public:
    using Node = TensorNode<T>;

    TensorT() = default;

    TensorT(const Shape& shape, T fill = T(0)) : n_(std::make_shared<Node>()) {
        n_->shape = shape;
        n_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    }

    static TensorT from_data(const Shape& shape, std::vector<T> values) {
        if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
            throw DimensionError("from_data: " + std::to_string(values.size()) +
                                 " values for shape " + shape_str(shape));
        TensorT t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = shape;
        t.n_->data = std::move(values);
        return t;
    }

    static TensorT zeros(const Shape& shape) { return TensorT(shape, T(0)); }
    static TensorT ones(const Shape& shape) { return TensorT(shape, T(1)); }

    static TensorT randn(const Shape& shape, std::mt19937& rng, T stddev = T(1)) {
        TensorT t(shape);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& v : t.n_->data) v = static_cast<T>(dist(rng)) * stddev;
        return t;
    }

    static TensorT uniform(const Shape& shape, std::mt19937& rng, T lo, T hi) {
        TensorT t(shape);
        std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
        for (auto& v : t.n_->data) v = static_cast<T>(dist(rng));
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t numel() const { return n_->numel(); }

    std::vector<T>& data() { return n_->data; }
    const std::vector<T>& data() const { return n_->data; }
    std::vector<T>& grad() { return n_->grad; }
    const std::vector<T>& grad() const { return n_->grad; }

    T operator[](std::int64_t i) const { return n_->data[static_cast<std::size_t>(i)]; }
    T& operator[](std::int64_t i) { return n_->data[static_cast<std::size_t>(i)]; }

    bool requires_grad() const { return n_->requires_grad; }
    TensorT& set_requires_grad(bool rg) {
        n_->requires_grad = rg;
        if (rg) n_->ensure_grad();
        return *this;
    }

    void zero_grad() {
        if (n_->requires_grad) n_->grad.assign(n_->data.size(), T(0));
    }

    std::shared_ptr<Node> node() const { return n_; }

    static TensorT wrap(std::shared_ptr<Node> n) {
        TensorT t;
        t.n_ = std::move(n);
        return t;
    }

    // Detached copy: same values, no history.
    TensorT detach() const {
        TensorT t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = n_->shape;
        t.n_->data = n_->data;
        return t;
    }

    // Reverse-mode sweep from this node. A non-scalar root is seeded with
    // ones, i.e. the gradient of sum(output).
    void backward() {
        std::vector<Node*> order;
        topo_collect(order);
        n_->ensure_grad();
        std::fill(n_->grad.begin(), n_->grad.end(), T(1));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* node = *it;
            if (node->backward) node->backward(*node);
        }
    }

private:
    void topo_collect(std::vector<Node*>& order) const {
        std::unordered_set<Node*> visited;
        // Iterative post-order DFS; the graph is acyclic by construction.
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(n_.get(), 0);
        visited.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* p = node->parents[idx].get();
                ++idx;
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> n_;
};

namespace detail {

template <class T>
std::shared_ptr<TensorNode<T>> make_node(const Shape& shape,
                                         std::vector<std::shared_ptr<TensorNode<T>>> parents) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = shape;
    n->data.assign(static_cast<std::size_t>(shape_numel(shape)), T(0));
    for (auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    n->parents = std::move(parents);
    return n;
}

template <class T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "add");
    auto n = detail::make_node<T>(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] + b.data()[i];
    n->backward = [](TensorNode<T>& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = self.parents[static_cast<std::size_t>(k)];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    };
    return TensorT<T>::wrap(n);
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "sub");
    auto n = detail::make_node<T>(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] - b.data()[i];
    n->backward = [](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    };
    return TensorT<T>::wrap(n);
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape(a, b, "mul");
    auto n = detail::make_node<T>(a.shape(), {a.node(), b.node()});
    for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] * b.data()[i];
    n->backward = [](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                pb->grad[i] += self.grad[i] * pa->data[i];
        }
    };
    return TensorT<T>::wrap(n);
}

template <class T>
TensorT<T> scale(const TensorT<T>& a, T c) {
    auto n = detail::make_node<T>(a.shape(), {a.node()});
    for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] * c;
    n->backward = [c](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * c;
    };
    return TensorT<T>::wrap(n);
}

template <class T>
TensorT<T> relu(const TensorT<T>& a) {
    auto n = detail::make_node<T>(a.shape(), {a.node()});
    for (std::size_t i = 0; i < n->data.size(); ++i)
        n->data[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    n->backward = [](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (p->data[i] > T(0)) p->grad[i] += self.grad[i];
    };
    return TensorT<T>::wrap(n);
}

// Elementwise map with a rectangular surrogate derivative: backward passes
// the upstream gradient unchanged where lower <= input <= upper (closed
// interval on both ends) and blocks it elsewhere.
template <class T, class F>
TensorT<T> custom_grad(const TensorT<T>& x, F&& fwd, const SurrogateSpec& s) {
    auto n = detail::make_node<T>(x.shape(), {x.node()});
    for (std::size_t i = 0; i < n->data.size(); ++i) n->data[i] = fwd(x.data()[i]);
    const T lo = static_cast<T>(s.lower);
    const T hi = static_cast<T>(s.upper);
    n->backward = [lo, hi](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T v = p->data[i];
            if (v >= lo && v <= hi) p->grad[i] += self.grad[i];
        }
    };
    return TensorT<T>::wrap(n);
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> reshape(const TensorT<T>& x, const Shape& new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(new_shape));
    auto n = detail::make_node<T>(new_shape, {x.node()});
    n->data = x.data();
    n->backward = [](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    };
    return TensorT<T>::wrap(n);
}

// [B, L, C] -> [B*heads, L, C/heads]; the channel axis is sliced per head.
template <class T>
TensorT<T> split_heads(const TensorT<T>& x, int heads) {
    if (x.ndim() != 3) throw DimensionError("split_heads: expected rank-3 tokens");
    const int B = x.dim(0), L = x.dim(1), C = x.dim(2);
    if (C % heads != 0) throw ParameterError("split_heads: channels not divisible by heads");
    const int Ch = C / heads;
    auto n = detail::make_node<T>({B * heads, L, Ch}, {x.node()});
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int l = 0; l < L; ++l)
                for (int c = 0; c < Ch; ++c)
                    n->data[static_cast<std::size_t>((((b * heads + h) * L) + l) * Ch + c)] =
                        x.data()[static_cast<std::size_t>((b * L + l) * C + h * Ch + c)];
    n->backward = [B, L, C, heads, Ch](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int l = 0; l < L; ++l)
                    for (int c = 0; c < Ch; ++c)
                        p->grad[static_cast<std::size_t>((b * L + l) * C + h * Ch + c)] +=
                            self.grad[static_cast<std::size_t>((((b * heads + h) * L) + l) * Ch + c)];
    };
    return TensorT<T>::wrap(n);
}

// Inverse of split_heads: [B*heads, L, Ch] -> [B, L, Ch*heads].
template <class T>
TensorT<T> merge_heads(const TensorT<T>& x, int heads) {
    if (x.ndim() != 3) throw DimensionError("merge_heads: expected rank-3 tokens");
    if (x.dim(0) % heads != 0) throw ParameterError("merge_heads: batch not divisible by heads");
    const int B = x.dim(0) / heads, L = x.dim(1), Ch = x.dim(2);
    const int C = Ch * heads;
    auto n = detail::make_node<T>({B, L, C}, {x.node()});
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int l = 0; l < L; ++l)
                for (int c = 0; c < Ch; ++c)
                    n->data[static_cast<std::size_t>((b * L + l) * C + h * Ch + c)] =
                        x.data()[static_cast<std::size_t>((((b * heads + h) * L) + l) * Ch + c)];
    n->backward = [B, L, C, heads, Ch](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int l = 0; l < L; ++l)
                    for (int c = 0; c < Ch; ++c)
                        p->grad[static_cast<std::size_t>((((b * heads + h) * L) + l) * Ch + c)] +=
                            self.grad[static_cast<std::size_t>((b * L + l) * C + h * Ch + c)];
    };
    return TensorT<T>::wrap(n);
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

// 2-D matrix product. Accumulation runs in double regardless of T.
template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw DimensionError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const int M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
    if (K != K2)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    auto n = detail::make_node<T>({M, N}, {a.node(), b.node()});
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc += static_cast<double>(pa[i * K + k]) * static_cast<double>(pb[k * N + j]);
            n->data[static_cast<std::size_t>(i * N + j)] = static_cast<T>(acc);
        }
    n->backward = [M, K, N](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            // dA = dC * B^T
            for (int i = 0; i < M; ++i)
                for (int k = 0; k < K; ++k) {
                    double acc = 0.0;
                    for (int j = 0; j < N; ++j)
                        acc += static_cast<double>(self.grad[static_cast<std::size_t>(i * N + j)]) *
                               static_cast<double>(pb->data[static_cast<std::size_t>(k * N + j)]);
                    pa->grad[static_cast<std::size_t>(i * K + k)] += static_cast<T>(acc);
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // dB = A^T * dC
            for (int k = 0; k < K; ++k)
                for (int j = 0; j < N; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < M; ++i)
                        acc += static_cast<double>(pa->data[static_cast<std::size_t>(i * K + k)]) *
                               static_cast<double>(self.grad[static_cast<std::size_t>(i * N + j)]);
                    pb->grad[static_cast<std::size_t>(k * N + j)] += static_cast<T>(acc);
                }
        }
    };
    return TensorT<T>::wrap(n);
}

// Batched product over [B, M, K] x [B, K, N], with optional transposes of
// the last two axes of either operand.
template <class T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool trans_a = false,
               bool trans_b = false) {
    if (a.ndim() != 3 || b.ndim() != 3) throw DimensionError("bmm: expected rank-3 operands");
    if (a.dim(0) != b.dim(0)) throw DimensionError("bmm: batch dimensions disagree");
    const int B = a.dim(0);
    const int M = trans_a ? a.dim(2) : a.dim(1);
    const int K = trans_a ? a.dim(1) : a.dim(2);
    const int Kb = trans_b ? b.dim(2) : b.dim(1);
    const int N = trans_b ? b.dim(1) : b.dim(2);
    if (K != Kb) throw DimensionError("bmm: inner dimensions disagree");

    const int a_rows = a.dim(1), a_cols = a.dim(2);
    const int b_rows = b.dim(1), b_cols = b.dim(2);
    auto at = [&](const std::vector<T>& v, int batch, int i, int k) -> T {
        return trans_a ? v[static_cast<std::size_t>((batch * a_rows + k) * a_cols + i)]
                       : v[static_cast<std::size_t>((batch * a_rows + i) * a_cols + k)];
    };
    auto bt = [&](const std::vector<T>& v, int batch, int k, int j) -> T {
        return trans_b ? v[static_cast<std::size_t>((batch * b_rows + j) * b_cols + k)]
                       : v[static_cast<std::size_t>((batch * b_rows + k) * b_cols + j)];
    };

    auto n = detail::make_node<T>({B, M, N}, {a.node(), b.node()});
    for (int bb = 0; bb < B; ++bb)
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) {
                double acc = 0.0;
                for (int k = 0; k < K; ++k)
                    acc += static_cast<double>(at(a.data(), bb, i, k)) *
                           static_cast<double>(bt(b.data(), bb, k, j));
                n->data[static_cast<std::size_t>((bb * M + i) * N + j)] = static_cast<T>(acc);
            }

    n->backward = [B, M, K, N, trans_a, trans_b, a_rows, a_cols, b_rows,
                   b_cols](TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        auto g = [&](int batch, int i, int j) -> T {
            return self.grad[static_cast<std::size_t>((batch * M + i) * N + j)];
        };
        auto aval = [&](int batch, int i, int k) -> T {
            return trans_a ? pa->data[static_cast<std::size_t>((batch * a_rows + k) * a_cols + i)]
                           : pa->data[static_cast<std::size_t>((batch * a_rows + i) * a_cols + k)];
        };
        auto bval = [&](int batch, int k, int j) -> T {
            return trans_b ? pb->data[static_cast<std::size_t>((batch * b_rows + j) * b_cols + k)]
                           : pb->data[static_cast<std::size_t>((batch * b_rows + k) * b_cols + j)];
        };
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (int bb = 0; bb < B; ++bb)
                for (int i = 0; i < M; ++i)
                    for (int k = 0; k < K; ++k) {
                        double acc = 0.0;
                        for (int j = 0; j < N; ++j)
                            acc += static_cast<double>(g(bb, i, j)) *
                                   static_cast<double>(bval(bb, k, j));
                        const std::size_t idx =
                            trans_a ? static_cast<std::size_t>((bb * a_rows + k) * a_cols + i)
                                    : static_cast<std::size_t>((bb * a_rows + i) * a_cols + k);
                        pa->grad[idx] += static_cast<T>(acc);
                    }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int bb = 0; bb < B; ++bb)
                for (int k = 0; k < K; ++k)
                    for (int j = 0; j < N; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < M; ++i)
                            acc += static_cast<double>(aval(bb, i, k)) *
                                   static_cast<double>(g(bb, i, j));
                        const std::size_t idx =
                            trans_b ? static_cast<std::size_t>((bb * b_rows + j) * b_cols + k)
                                    : static_cast<std::size_t>((bb * b_rows + k) * b_cols + j);
                        pb->grad[idx] += static_cast<T>(acc);
                    }
        }
    };
    return TensorT<T>::wrap(n);
}

// Row-wise bias add: x is [M, N], b is [N].
template <class T>
TensorT<T> bias_add_rows(const TensorT<T>& x, const TensorT<T>& b) {
    if (x.ndim() != 2 || b.ndim() != 1 || x.dim(1) != b.dim(0))
        throw DimensionError("bias_add_rows: incompatible shapes " + shape_str(x.shape()) +
                             " and " + shape_str(b.shape()));
    const int M = x.dim(0), N = x.dim(1);
    auto n = detail::make_node<T>(x.shape(), {x.node(), b.node()});
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j)
            n->data[static_cast<std::size_t>(i * N + j)] =
                x.data()[static_cast<std::size_t>(i * N + j)] + b.data()[static_cast<std::size_t>(j)];
    n->backward = [M, N](TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pb = self.parents[1];
        if (px->requires_grad) {
            px->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j)
                    pb->grad[static_cast<std::size_t>(j)] +=
                        self.grad[static_cast<std::size_t>(i * N + j)];
        }
    };
    return TensorT<T>::wrap(n);
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
    auto n = detail::make_node<T>({1}, {x.node()});
    double acc = 0.0;
    for (T v : x.data()) acc += static_cast<double>(v);
    n->data[0] = static_cast<T>(acc);
    n->backward = [](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += self.grad[0];
    };
    return TensorT<T>::wrap(n);
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
    const T inv = static_cast<T>(1.0 / static_cast<double>(x.numel()));
    return scale(sum_all(x), inv);
}

// Mean squared error against a constant target, optionally restricted by a
// 0/1 element weight. The mean runs over weighted elements only.
template <class T>
TensorT<T> mse_loss(const TensorT<T>& pred, const std::vector<T>& target,
                    const std::vector<T>* weight = nullptr) {
    if (static_cast<std::int64_t>(target.size()) != pred.numel())
        throw DimensionError("mse_loss: target size mismatch");
    if (weight && weight->size() != target.size())
        throw DimensionError("mse_loss: weight size mismatch");
    auto n = detail::make_node<T>({1}, {pred.node()});
    double acc = 0.0, wsum = 0.0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        const double w = weight ? static_cast<double>((*weight)[i]) : 1.0;
        const double d = static_cast<double>(pred.data()[i]) - static_cast<double>(target[i]);
        acc += w * d * d;
        wsum += w;
    }
    if (wsum <= 0.0) wsum = 1.0;
    n->data[0] = static_cast<T>(acc / wsum);
    std::vector<T> tgt = target;
    std::vector<T> wv = weight ? *weight : std::vector<T>();
    n->backward = [tgt, wv, wsum](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double s = 2.0 / wsum * static_cast<double>(self.grad[0]);
        for (std::size_t i = 0; i < tgt.size(); ++i) {
            const double w = wv.empty() ? 1.0 : static_cast<double>(wv[i]);
            p->grad[i] += static_cast<T>(
                s * w * (static_cast<double>(p->data[i]) - static_cast<double>(tgt[i])));
        }
    };
    return TensorT<T>::wrap(n);
}

// Fused stable softmax + cross entropy over rows of logits [N, K];
// labels holds one class index per row. Returns the mean loss.
template <class T>
TensorT<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw DimensionError("softmax_cross_entropy: expected [N,K] logits");
    const int N = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != N)
        throw DimensionError("softmax_cross_entropy: label count mismatch");
    for (int lbl : labels)
        if (lbl < 0 || lbl >= K) throw ParameterError("softmax_cross_entropy: label out of range");

    auto n = detail::make_node<T>({1}, {logits.node()});
    std::vector<double> probs(static_cast<std::size_t>(N) * K);
    double loss = 0.0;
    for (int i = 0; i < N; ++i) {
        double mx = -1e300;
        for (int k = 0; k < K; ++k)
            mx = std::max(mx, static_cast<double>(logits.data()[static_cast<std::size_t>(i * K + k)]));
        double z = 0.0;
        for (int k = 0; k < K; ++k) {
            const double e =
                std::exp(static_cast<double>(logits.data()[static_cast<std::size_t>(i * K + k)]) - mx);
            probs[static_cast<std::size_t>(i * K + k)] = e;
            z += e;
        }
        for (int k = 0; k < K; ++k) probs[static_cast<std::size_t>(i * K + k)] /= z;
        loss -= std::log(std::max(probs[static_cast<std::size_t>(i * K + labels[static_cast<std::size_t>(i)])], 1e-300));
    }
    n->data[0] = static_cast<T>(loss / N);
    n->backward = [probs, labels, N, K](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double s = static_cast<double>(self.grad[0]) / N;
        for (int i = 0; i < N; ++i)
            for (int k = 0; k < K; ++k) {
                double g = probs[static_cast<std::size_t>(i * K + k)];
                if (k == labels[static_cast<std::size_t>(i)]) g -= 1.0;
                p->grad[static_cast<std::size_t>(i * K + k)] += static_cast<T>(s * g);
            }
    };
    return TensorT<T>::wrap(n);
}

// Softmax over the last axis of a rank-2 or rank-3 tensor.
template <class T>
TensorT<T> softmax_lastdim(const TensorT<T>& x) {
    if (x.ndim() < 2) throw DimensionError("softmax_lastdim: rank must be >= 2");
    const int K = x.dim(x.ndim() - 1);
    const std::int64_t rows = x.numel() / K;
    auto n = detail::make_node<T>(x.shape(), {x.node()});
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * K;
        T* out = n->data.data() + r * K;
        double mx = -1e300;
        for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(in[k]));
        double z = 0.0;
        for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(in[k]) - mx);
        for (int k = 0; k < K; ++k)
            out[k] = static_cast<T>(std::exp(static_cast<double>(in[k]) - mx) / z);
    }
    n->backward = [K, rows](TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* y = self.data.data() + r * K;
            const T* gy = self.grad.data() + r * K;
            double dot = 0.0;
            for (int k = 0; k < K; ++k) dot += static_cast<double>(y[k]) * static_cast<double>(gy[k]);
            for (int k = 0; k < K; ++k)
                p->grad[static_cast<std::size_t>(r * K + k)] +=
                    static_cast<T>(static_cast<double>(y[k]) *
                                   (static_cast<double>(gy[k]) - dot));
        }
    };
    return TensorT<T>::wrap(n);
}

// LayerNorm over the last axis with learnable affine.
template <class T>
TensorT<T> layernorm_lastdim(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                             T eps = static_cast<T>(1e-5)) {
    const int K = x.dim(x.ndim() - 1);
    if (gamma.numel() != K || beta.numel() != K)
        throw DimensionError("layernorm: affine parameter length mismatch");
    const std::int64_t rows = x.numel() / K;
    auto n = detail::make_node<T>(x.shape(), {x.node(), gamma.node(), beta.node()});
    std::vector<double> means(static_cast<std::size_t>(rows)), istds(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* in = x.data().data() + r * K;
        double m = 0.0;
        for (int k = 0; k < K; ++k) m += static_cast<double>(in[k]);
        m /= K;
        double v = 0.0;
        for (int k = 0; k < K; ++k) {
            const double d = static_cast<double>(in[k]) - m;
            v += d * d;
        }
        v /= K;
        const double istd = 1.0 / std::sqrt(v + static_cast<double>(eps));
        means[static_cast<std::size_t>(r)] = m;
        istds[static_cast<std::size_t>(r)] = istd;
        for (int k = 0; k < K; ++k)
            n->data[static_cast<std::size_t>(r * K + k)] =
                static_cast<T>((static_cast<double>(in[k]) - m) * istd *
                                   static_cast<double>(gamma.data()[static_cast<std::size_t>(k)]) +
                               static_cast<double>(beta.data()[static_cast<std::size_t>(k)]));
    }
    n->backward = [K, rows, means, istds](TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* in = px->data.data() + r * K;
            const T* gy = self.grad.data() + r * K;
            const double m = means[static_cast<std::size_t>(r)];
            const double istd = istds[static_cast<std::size_t>(r)];
            // xhat and gradient contractions
            double sum_gyg = 0.0, sum_gyg_xhat = 0.0;
            for (int k = 0; k < K; ++k) {
                const double xhat = (static_cast<double>(in[k]) - m) * istd;
                const double gyg = static_cast<double>(gy[k]) *
                                   static_cast<double>(pg->data[static_cast<std::size_t>(k)]);
                sum_gyg += gyg;
                sum_gyg_xhat += gyg * xhat;
            }
            if (px->requires_grad) {
                px->ensure_grad();
                for (int k = 0; k < K; ++k) {
                    const double xhat = (static_cast<double>(in[k]) - m) * istd;
                    const double gyg = static_cast<double>(gy[k]) *
                                       static_cast<double>(pg->data[static_cast<std::size_t>(k)]);
                    px->grad[static_cast<std::size_t>(r * K + k)] += static_cast<T>(
                        istd * (gyg - sum_gyg / K - xhat * sum_gyg_xhat / K));
                }
            }
            if (pg->requires_grad) {
                pg->ensure_grad();
                for (int k = 0; k < K; ++k) {
                    const double xhat = (static_cast<double>(in[k]) - m) * istd;
                    pg->grad[static_cast<std::size_t>(k)] +=
                        static_cast<T>(static_cast<double>(gy[k]) * xhat);
                }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (int k = 0; k < K; ++k)
                    pb->grad[static_cast<std::size_t>(k)] += gy[k];
            }
        }
    };
    return TensorT<T>::wrap(n);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adam with decoupled weight decay. Parameter order defines state slots, so
// callers must pass a stable parameter list across steps.
template <class T>
class AdamW {
public:
    struct Hyper {
        T lr = static_cast<T>(1e-3);
        T beta1 = static_cast<T>(0.9);
        T beta2 = static_cast<T>(0.999);
        T eps = static_cast<T>(1e-8);
        T weight_decay = static_cast<T>(0.0);
    };

    explicit AdamW(Hyper h = {}) : h_(h) {}

    const Hyper& hyper() const { return h_; }
    void set_lr(T lr) { h_.lr = lr; }

    void step(std::vector<TensorT<T>>& params) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i].data().size(), T(0));
                v_[i].assign(params[i].data().size(), T(0));
            }
        }
        if (m_.size() != params.size()) throw ParameterError("AdamW: parameter list changed size");
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(h_.beta1), t_);
        const double bc2 = 1.0 - std::pow(static_cast<double>(h_.beta2), t_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            if (!p.requires_grad()) continue;
            auto& g = p.grad();
            auto& d = p.data();
            if (g.size() != d.size()) continue;  // no gradient accumulated this step
            for (std::size_t j = 0; j < d.size(); ++j) {
                const double gj = static_cast<double>(g[j]);
                if (!std::isfinite(gj))
                    throw std::runtime_error("AdamW: non-finite gradient in parameter " +
                                             std::to_string(i) + " at element " + std::to_string(j));
                double mj = static_cast<double>(h_.beta1) * m_[i][j] + (1.0 - h_.beta1) * gj;
                double vj = static_cast<double>(h_.beta2) * v_[i][j] + (1.0 - h_.beta2) * gj * gj;
                m_[i][j] = static_cast<T>(mj);
                v_[i][j] = static_cast<T>(vj);
                const double mhat = mj / bc1;
                const double vhat = vj / bc2;
                double upd = mhat / (std::sqrt(vhat) + static_cast<double>(h_.eps));
                upd += static_cast<double>(h_.weight_decay) * static_cast<double>(d[j]);
                d[j] = static_cast<T>(static_cast<double>(d[j]) - static_cast<double>(h_.lr) * upd);
            }
        }
    }

private:
    Hyper h_;
    long t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

// Library-wide scalar type. Tests instantiate TensorT<double> directly when
// an oracle needs 64-bit arithmetic.
using Real = float;
using Tensor = TensorT<Real>;

}  // namespace sfa
