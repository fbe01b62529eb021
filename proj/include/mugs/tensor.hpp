#pragma once

// Dense f32 tensor with reverse-mode automatic differentiation.
//
// Every differentiable operation builds a node holding its output value, the
// tracked input nodes, and a backward closure. backward() on a scalar walks
// the recorded nodes in exact reverse execution order (monotonic sequence
// numbers) and accumulates gradients into the leaves. Operations whose inputs
// are all untracked produce plain value nodes with no closure, so e.g. a
// frozen teacher forward records nothing.
//
// Layout is row major and every reduction runs left to right in a fixed
// order, so identical inputs give bitwise-identical outputs within one build.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace mugs {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Configuration / usage problems (CLI maps these to exit code 2).
struct ConfigError : Error {
    using Error::Error;
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until a gradient reaches this node
    bool requires_grad = false;
    bool leaf = false;
    uint64_t seq = 0;
    std::vector<std::shared_ptr<Node>> parents;     // tracked inputs only
    std::function<void(Node&)> backprop;

    void ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0f);
    }
};

inline uint64_t next_seq() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

// ---- raw gemm kernels (row major) ----

// C += A[m x k] * B[k x n]
inline void gemm_nn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* ai = a + i * k;
        float* ci = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const float av = ai[p];
            const float* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C += A[m x k] * B[n x k]^T
inline void gemm_nt(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* ai = a + i * k;
        float* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const float* bj = b + j * k;
            float acc = 0.0f;
            for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// C += A[m x k]^T * B[m x n]  ->  C is [k x n]
inline void gemm_tn(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* ai = a + i * k;
        const float* bi = b + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const float av = ai[p];
            float* cp = c + p * n;
            for (int64_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

    static Tensor from_data(Shape shape, std::vector<float> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw Error("tensor data size " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->leaf = true;
        n->seq = detail::next_seq();
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<float> d(static_cast<size_t>(shape_numel(shape)), 0.0f);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, float v, bool requires_grad = false) {
        std::vector<float> d(static_cast<size_t>(shape_numel(shape)), v);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(float v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return node_ref().shape; }
    size_t ndim() const { return node_ref().shape.size(); }
    int64_t dim(size_t i) const { return node_ref().shape.at(i); }
    int64_t numel() const { return static_cast<int64_t>(node_ref().value.size()); }

    const std::vector<float>& data() const { return node_ref().value; }

    // In-place mutation is reserved for leaves (optimizer / EMA updates);
    // graph nodes are immutable once created. Tensor is a handle type, so a
    // const handle still exposes the mutable leaf storage.
    std::vector<float>& raw_data() const {
        auto& n = node_ref();
        if (!n.leaf) throw Error("raw_data(): only leaf tensors may be mutated in place");
        return n.value;
    }

    bool requires_grad() const { return node_ref().requires_grad; }
    bool is_leaf() const { return node_ref().leaf; }
    bool has_grad() const { return !node_ref().grad.empty(); }

    const std::vector<float>& grad() const {
        const auto& n = node_ref();
        if (n.grad.empty()) throw Error("grad(): no gradient has been accumulated on this tensor");
        return n.grad;
    }

    // mutable gradient view for clipping; same handle-type caveat as raw_data()
    std::vector<float>& raw_grad() const {
        auto& n = node_ref();
        if (n.grad.empty()) throw Error("raw_grad(): no gradient has been accumulated on this tensor");
        return n.grad;
    }

    void zero_grad() const { node_ref().grad.clear(); }

    float item() const {
        const auto& n = node_ref();
        if (n.value.size() != 1) throw Error("item(): tensor has " + shape_str(n.shape) + ", expected a scalar");
        return n.value[0];
    }

    Tensor detach() const {
        const auto& n = node_ref();
        return from_data(n.shape, n.value, false);
    }

    // Reverse-mode sweep from a scalar. Visits recorded operations in exact
    // reverse execution order and accumulates into every tracked node.
    void backward() const {
        auto& root = node_ref();
        if (root.value.size() != 1) throw Error("backward(): loss must be a scalar, got " + shape_str(root.shape));
        if (!root.requires_grad) return;

        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> seen;
        std::vector<detail::Node*> stack{&root};
        seen.insert(&root);
        while (!stack.empty()) {
            detail::Node* cur = stack.back();
            stack.pop_back();
            order.push_back(cur);
            for (auto& p : cur->parents) {
                if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
            }
        }
        std::sort(order.begin(), order.end(),
                  [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

        root.ensure_grad();
        root.grad[0] += 1.0f;
        for (detail::Node* n : order) {
            if (n->backprop && !n->grad.empty()) n->backprop(*n);
        }
    }

    std::shared_ptr<detail::Node> node() const { return n_; }

private:
    detail::Node& node_ref() const {
        if (!n_) throw Error("operation on an undefined tensor");
        return *n_;
    }
    std::shared_ptr<detail::Node> n_;
};

namespace detail {

inline void accumulate(Node& n, const std::vector<float>& contrib) {
    n.ensure_grad();
    for (size_t i = 0; i < contrib.size(); ++i) n.grad[i] += contrib[i];
}

inline Tensor make_op(Shape shape, std::vector<float> value,
                      const std::vector<Tensor>& inputs,
                      const std::function<void(Node&)>& backprop) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool tracked = false;
    for (const auto& t : inputs)
        if (t.defined() && t.requires_grad()) tracked = true;
    n->requires_grad = tracked;
    n->seq = next_seq();
    if (tracked) {
        for (const auto& t : inputs)
            if (t.defined() && t.requires_grad()) n->parents.push_back(t.node());
        n->backprop = backprop;
    }
    return Tensor(std::move(n));
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<float> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
        if (an->requires_grad) detail::accumulate(*an, self.grad);
        if (bn->requires_grad) detail::accumulate(*bn, self.grad);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check(a.shape() == b.shape(),
                  "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<float> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
        if (an->requires_grad) detail::accumulate(*an, self.grad);
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check(a.shape() == b.shape(),
                  "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<float> out(a.data());
    const auto& bd = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
        }
    });
}

inline Tensor mul_scalar(const Tensor& a, float s) {
    std::vector<float> out(a.data());
    for (auto& v : out) v *= s;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an, s](detail::Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * s;
    });
}

inline Tensor add_scalar(const Tensor& a, float s) {
    std::vector<float> out(a.data());
    for (auto& v : out) v += s;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        detail::accumulate(*an, self.grad);
    });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0f); }

inline Tensor exp_t(const Tensor& a) {
    std::vector<float> out(a.data());
    for (auto& v : out) v = std::exp(v);
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * self.value[i];
    });
}

// log(max(x, eps)); gradient is 1/x where x > eps and 0 where clamped.
inline Tensor log_clamped(const Tensor& a, float eps = 1e-12f) {
    std::vector<float> out(a.data());
    for (auto& v : out) v = std::log(std::max(v, eps));
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an, eps](detail::Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const float x = an->value[i];
            if (x > eps) an->grad[i] += self.grad[i] / x;
        }
    });
}

inline Tensor gelu(const Tensor& a) {
    // exact variant: x * Phi(x) with the Gaussian CDF via erf
    constexpr float kInvSqrt2 = 0.7071067811865475f;
    constexpr float kInvSqrt2Pi = 0.3989422804014327f;
    std::vector<float> out(a.data());
    for (auto& v : out) {
        const float phi = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
        v = v * phi;
    }
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const float x = an->value[i];
            const float phi = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
            const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
            an->grad[i] += self.grad[i] * (phi + x * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// matrix products
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
                  "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<float> out(static_cast<size_t>(m * n), 0.0f);
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto an = a.node(), bn = b.node();
    return detail::make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::gemm_nt(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::gemm_tn(an->value.data(), self.grad.data(), bn->grad.data(), m, k, n);
        }
    });
}

// a [m x k] * b[n x k]^T -> [m x n]
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
                  "matmul_nt: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<float> out(static_cast<size_t>(m * n), 0.0f);
    detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto an = a.node(), bn = b.node();
    return detail::make_op({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            detail::gemm_nn(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            detail::gemm_tn(self.grad.data(), an->value.data(), bn->grad.data(), m, n, k);
        }
    });
}

inline Tensor bmm(const Tensor& a, const Tensor& b) {
    detail::check(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<float> out(static_cast<size_t>(B * m * n), 0.0f);
    for (int64_t i = 0; i < B; ++i)
        detail::gemm_nn(a.data().data() + i * m * k, b.data().data() + i * k * n, out.data() + i * m * n, m, k, n);
    auto an = a.node(), bn = b.node();
    return detail::make_op({B, m, n}, std::move(out), {a, b}, [an, bn, B, m, k, n](detail::Node& self) {
        for (int64_t i = 0; i < B; ++i) {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nt(self.grad.data() + i * m * n, bn->value.data() + i * k * n,
                                an->grad.data() + i * m * k, m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(an->value.data() + i * m * k, self.grad.data() + i * m * n,
                                bn->grad.data() + i * k * n, m, k, n);
            }
        }
    });
}

// a [B x m x k] * b[B x n x k]^T -> [B x m x n]
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    detail::check(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
                  "bmm_nt: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    std::vector<float> out(static_cast<size_t>(B * m * n), 0.0f);
    for (int64_t i = 0; i < B; ++i)
        detail::gemm_nt(a.data().data() + i * m * k, b.data().data() + i * n * k, out.data() + i * m * n, m, k, n);
    auto an = a.node(), bn = b.node();
    return detail::make_op({B, m, n}, std::move(out), {a, b}, [an, bn, B, m, k, n](detail::Node& self) {
        for (int64_t i = 0; i < B; ++i) {
            if (an->requires_grad) {
                an->ensure_grad();
                detail::gemm_nn(self.grad.data() + i * m * n, bn->value.data() + i * n * k,
                                an->grad.data() + i * m * k, m, n, k);
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::gemm_tn(self.grad.data() + i * m * n, an->value.data() + i * m * k,
                                bn->grad.data() + i * n * k, m, n, k);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    detail::check(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    std::vector<float> out(a.data());
    auto an = a.node();
    return detail::make_op(std::move(shape), std::move(out), {a}, [an](detail::Node& self) {
        detail::accumulate(*an, self.grad);
    });
}

inline Tensor slice_rows(const Tensor& a, int64_t start, int64_t len) {
    detail::check(a.ndim() == 2 && start >= 0 && len >= 1 && start + len <= a.dim(0),
                  "slice_rows: invalid range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                      ") for " + shape_str(a.shape()));
    const int64_t c = a.dim(1);
    std::vector<float> out(a.data().begin() + start * c, a.data().begin() + (start + len) * c);
    auto an = a.node();
    return detail::make_op({len, c}, std::move(out), {a}, [an, start, c](detail::Node& self) {
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[static_cast<size_t>(start * c) + i] += self.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& a, int64_t start, int64_t len) {
    detail::check(a.ndim() == 2 && start >= 0 && len >= 1 && start + len <= a.dim(1),
                  "slice_cols: invalid range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                      ") for " + shape_str(a.shape()));
    const int64_t r = a.dim(0), c = a.dim(1);
    std::vector<float> out(static_cast<size_t>(r * len));
    for (int64_t i = 0; i < r; ++i)
        std::memcpy(out.data() + i * len, a.data().data() + i * c + start, static_cast<size_t>(len) * sizeof(float));
    auto an = a.node();
    return detail::make_op({r, len}, std::move(out), {a}, [an, r, c, start, len](detail::Node& self) {
        an->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < len; ++j) an->grad[i * c + start + j] += self.grad[i * len + j];
    });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2 && a.dim(0) == b.dim(0),
                  "concat_cols: row mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t r = a.dim(0), p = a.dim(1), q = b.dim(1);
    std::vector<float> out(static_cast<size_t>(r * (p + q)));
    for (int64_t i = 0; i < r; ++i) {
        std::memcpy(out.data() + i * (p + q), a.data().data() + i * p, static_cast<size_t>(p) * sizeof(float));
        std::memcpy(out.data() + i * (p + q) + p, b.data().data() + i * q, static_cast<size_t>(q) * sizeof(float));
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op({r, p + q}, std::move(out), {a, b}, [an, bn, r, p, q](detail::Node& self) {
        for (int64_t i = 0; i < r; ++i) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t j = 0; j < p; ++j) an->grad[i * p + j] += self.grad[i * (p + q) + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t j = 0; j < q; ++j) bn->grad[i * q + j] += self.grad[i * (p + q) + p + j];
            }
        }
    });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    detail::check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1),
                  "concat_rows: column mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t p = a.dim(0), q = b.dim(0), c = a.dim(1);
    std::vector<float> out;
    out.reserve(static_cast<size_t>((p + q) * c));
    out.insert(out.end(), a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    auto an = a.node(), bn = b.node();
    return detail::make_op({p + q, c}, std::move(out), {a, b}, [an, bn, p, q, c](detail::Node& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t i = 0; i < p * c; ++i) an->grad[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t i = 0; i < q * c; ++i) bn->grad[i] += self.grad[p * c + i];
        }
    });
}

// [B x T x (h*dh)] -> [(B*h) x T x dh]
inline Tensor split_heads(const Tensor& a, int64_t heads) {
    detail::check(a.ndim() == 3 && a.dim(2) % heads == 0,
                  "split_heads: " + shape_str(a.shape()) + " not divisible into " + std::to_string(heads) + " heads");
    const int64_t B = a.dim(0), T = a.dim(1), d = a.dim(2), dh = d / heads;
    std::vector<float> out(a.data().size());
    const float* src = a.data().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t t = 0; t < T; ++t)
                std::memcpy(out.data() + (((b * heads + h) * T + t) * dh),
                            src + ((b * T + t) * d + h * dh), static_cast<size_t>(dh) * sizeof(float));
    auto an = a.node();
    return detail::make_op({B * heads, T, dh}, std::move(out), {a}, [an, B, T, d, dh, heads](detail::Node& self) {
        an->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t j = 0; j < dh; ++j)
                        an->grad[(b * T + t) * d + h * dh + j] += self.grad[((b * heads + h) * T + t) * dh + j];
    });
}

// [(B*h) x T x dh] -> [B x T x (h*dh)]
inline Tensor merge_heads(const Tensor& a, int64_t heads) {
    detail::check(a.ndim() == 3 && a.dim(0) % heads == 0,
                  "merge_heads: batch dim of " + shape_str(a.shape()) + " not divisible by " + std::to_string(heads));
    const int64_t B = a.dim(0) / heads, T = a.dim(1), dh = a.dim(2), d = heads * dh;
    std::vector<float> out(a.data().size());
    const float* src = a.data().data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t t = 0; t < T; ++t)
                std::memcpy(out.data() + ((b * T + t) * d + h * dh),
                            src + (((b * heads + h) * T + t) * dh), static_cast<size_t>(dh) * sizeof(float));
    auto an = a.node();
    return detail::make_op({B, T, d}, std::move(out), {a}, [an, B, T, d, dh, heads](detail::Node& self) {
        an->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t h = 0; h < heads; ++h)
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t j = 0; j < dh; ++j)
                        an->grad[((b * heads + h) * T + t) * dh + j] += self.grad[(b * T + t) * d + h * dh + j];
    });
}

inline Tensor select_token(const Tensor& a, int64_t t) {
    detail::check(a.ndim() == 3 && t >= 0 && t < a.dim(1),
                  "select_token: token " + std::to_string(t) + " out of range for " + shape_str(a.shape()));
    const int64_t B = a.dim(0), T = a.dim(1), d = a.dim(2);
    std::vector<float> out(static_cast<size_t>(B * d));
    for (int64_t b = 0; b < B; ++b)
        std::memcpy(out.data() + b * d, a.data().data() + (b * T + t) * d, static_cast<size_t>(d) * sizeof(float));
    auto an = a.node();
    return detail::make_op({B, d}, std::move(out), {a}, [an, B, T, d, t](detail::Node& self) {
        an->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t j = 0; j < d; ++j) an->grad[(b * T + t) * d + j] += self.grad[b * d + j];
    });
}

inline Tensor slice_tokens(const Tensor& a, int64_t start, int64_t len) {
    detail::check(a.ndim() == 3 && start >= 0 && len >= 1 && start + len <= a.dim(1),
                  "slice_tokens: invalid range for " + shape_str(a.shape()));
    const int64_t B = a.dim(0), T = a.dim(1), d = a.dim(2);
    std::vector<float> out(static_cast<size_t>(B * len * d));
    for (int64_t b = 0; b < B; ++b)
        std::memcpy(out.data() + b * len * d, a.data().data() + (b * T + start) * d,
                    static_cast<size_t>(len * d) * sizeof(float));
    auto an = a.node();
    return detail::make_op({B, len, d}, std::move(out), {a}, [an, B, T, d, start, len](detail::Node& self) {
        an->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < len * d; ++i) an->grad[(b * T + start) * d + i] += self.grad[(b * len) * d + i];
    });
}

inline Tensor concat_tokens(const Tensor& a, const Tensor& b) {
    detail::check(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
                  "concat_tokens: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const int64_t B = a.dim(0), t1 = a.dim(1), t2 = b.dim(1), d = a.dim(2);
    std::vector<float> out(static_cast<size_t>(B * (t1 + t2) * d));
    for (int64_t i = 0; i < B; ++i) {
        std::memcpy(out.data() + i * (t1 + t2) * d, a.data().data() + i * t1 * d,
                    static_cast<size_t>(t1 * d) * sizeof(float));
        std::memcpy(out.data() + (i * (t1 + t2) + t1) * d, b.data().data() + i * t2 * d,
                    static_cast<size_t>(t2 * d) * sizeof(float));
    }
    auto an = a.node(), bn = b.node();
    return detail::make_op({B, t1 + t2, d}, std::move(out), {a, b}, [an, bn, B, t1, t2, d](detail::Node& self) {
        for (int64_t i = 0; i < B; ++i) {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t j = 0; j < t1 * d; ++j) an->grad[i * t1 * d + j] += self.grad[i * (t1 + t2) * d + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t j = 0; j < t2 * d; ++j)
                    bn->grad[i * t2 * d + j] += self.grad[(i * (t1 + t2) + t1) * d + j];
            }
        }
    });
}

// class token [d] broadcast over the batch and prepended as token 0
inline Tensor prepend_class_token(const Tensor& cls, const Tensor& a) {
    detail::check(cls.ndim() == 1 && a.ndim() == 3 && cls.dim(0) == a.dim(2),
                  "prepend_class_token: incompatible " + shape_str(cls.shape()) + " and " + shape_str(a.shape()));
    const int64_t B = a.dim(0), P = a.dim(1), d = a.dim(2);
    std::vector<float> out(static_cast<size_t>(B * (P + 1) * d));
    for (int64_t b = 0; b < B; ++b) {
        std::memcpy(out.data() + b * (P + 1) * d, cls.data().data(), static_cast<size_t>(d) * sizeof(float));
        std::memcpy(out.data() + (b * (P + 1) + 1) * d, a.data().data() + b * P * d,
                    static_cast<size_t>(P * d) * sizeof(float));
    }
    auto cn = cls.node(), an = a.node();
    return detail::make_op({B, P + 1, d}, std::move(out), {cls, a}, [cn, an, B, P, d](detail::Node& self) {
        if (cn->requires_grad) {
            cn->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t j = 0; j < d; ++j) cn->grad[j] += self.grad[b * (P + 1) * d + j];
        }
        if (an->requires_grad) {
            an->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t j = 0; j < P * d; ++j)
                    an->grad[b * P * d + j] += self.grad[(b * (P + 1) + 1) * d + j];
        }
    });
}

// x [B x T x d] + pos [T x d], pos broadcast over the batch
inline Tensor add_tokens_broadcast(const Tensor& a, const Tensor& pos) {
    detail::check(a.ndim() == 3 && pos.ndim() == 2 && a.dim(1) == pos.dim(0) && a.dim(2) == pos.dim(1),
                  "add_tokens_broadcast: incompatible " + shape_str(a.shape()) + " and " + shape_str(pos.shape()));
    const int64_t B = a.dim(0), Td = a.dim(1) * a.dim(2);
    std::vector<float> out(a.data());
    const auto& pd = pos.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < Td; ++i) out[b * Td + i] += pd[i];
    auto an = a.node(), pn = pos.node();
    return detail::make_op(a.shape(), std::move(out), {a, pos}, [an, pn, B, Td](detail::Node& self) {
        if (an->requires_grad) detail::accumulate(*an, self.grad);
        if (pn->requires_grad) {
            pn->ensure_grad();
            for (int64_t b = 0; b < B; ++b)
                for (int64_t i = 0; i < Td; ++i) pn->grad[i] += self.grad[b * Td + i];
        }
    });
}

// broadcast row vector over the leading dims (bias add)
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
    detail::check(a.ndim() >= 1 && v.ndim() == 1 && a.dim(a.ndim() - 1) == v.dim(0),
                  "add_rowvec: incompatible " + shape_str(a.shape()) + " and " + shape_str(v.shape()));
    const int64_t c = v.dim(0), rows = a.numel() / c;
    std::vector<float> out(a.data());
    const auto& vd = v.data();
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < c; ++j) out[i * c + j] += vd[j];
    auto an = a.node(), vn = v.node();
    return detail::make_op(a.shape(), std::move(out), {a, v}, [an, vn, rows, c](detail::Node& self) {
        if (an->requires_grad) detail::accumulate(*an, self.grad);
        if (vn->requires_grad) {
            vn->ensure_grad();
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < c; ++j) vn->grad[j] += self.grad[i * c + j];
        }
    });
}

// per-example scaling of [B x T x d] by a constant weight vector (drop path)
inline Tensor scale_examples(const Tensor& a, const std::vector<float>& w) {
    detail::check(a.ndim() == 3 && static_cast<int64_t>(w.size()) == a.dim(0),
                  "scale_examples: weight count does not match batch of " + shape_str(a.shape()));
    const int64_t B = a.dim(0), Td = a.dim(1) * a.dim(2);
    std::vector<float> out(a.data());
    for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < Td; ++i) out[b * Td + i] *= w[static_cast<size_t>(b)];
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an, w, B, Td](detail::Node& self) {
        an->ensure_grad();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < Td; ++i) an->grad[b * Td + i] += self.grad[b * Td + i] * w[static_cast<size_t>(b)];
    });
}

// ---------------------------------------------------------------------------
// rowwise / reduction ops
// ---------------------------------------------------------------------------

// softmax over the last axis, max-subtracted
inline Tensor softmax_rows(const Tensor& a) {
    detail::check(a.ndim() >= 1 && a.dim(a.ndim() - 1) >= 1,
                  "softmax_rows: empty axis in " + shape_str(a.shape()));
    const int64_t n = a.dim(a.ndim() - 1), rows = a.numel() / n;
    std::vector<float> out(a.data().size());
    const float* src = a.data().data();
    for (int64_t i = 0; i < rows; ++i) {
        const float* x = src + i * n;
        float* y = out.data() + i * n;
        float mx = x[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        float sum = 0.0f;
        for (int64_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            sum += y[j];
        }
        for (int64_t j = 0; j < n; ++j) y[j] /= sum;
    }
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an, rows, n](detail::Node& self) {
        an->ensure_grad();
        for (int64_t i = 0; i < rows; ++i) {
            const float* s = self.value.data() + i * n;
            const float* u = self.grad.data() + i * n;
            float dot = 0.0f;
            for (int64_t j = 0; j < n; ++j) dot += u[j] * s[j];
            for (int64_t j = 0; j < n; ++j) an->grad[i * n + j] += s[j] * (u[j] - dot);
        }
    });
}

// log(sum(exp(row))) per row, max-subtracted
inline Tensor logsumexp_rows(const Tensor& a) {
    detail::check(a.ndim() == 2 && a.dim(1) >= 1, "logsumexp_rows: expected [r x n], got " + shape_str(a.shape()));
    const int64_t r = a.dim(0), n = a.dim(1);
    std::vector<float> out(static_cast<size_t>(r));
    const float* src = a.data().data();
    for (int64_t i = 0; i < r; ++i) {
        const float* x = src + i * n;
        float mx = x[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
        float sum = 0.0f;
        for (int64_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
        out[static_cast<size_t>(i)] = mx + std::log(sum);
    }
    auto an = a.node();
    return detail::make_op({r}, std::move(out), {a}, [an, r, n](detail::Node& self) {
        an->ensure_grad();
        for (int64_t i = 0; i < r; ++i) {
            const float u = self.grad[static_cast<size_t>(i)];
            const float lse = self.value[static_cast<size_t>(i)];
            for (int64_t j = 0; j < n; ++j)
                an->grad[i * n + j] += u * std::exp(an->value[i * n + j] - lse);
        }
    });
}

inline Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    detail::check(a.ndim() >= 1 && gamma.ndim() == 1 && beta.ndim() == 1 &&
                      a.dim(a.ndim() - 1) == gamma.dim(0) && gamma.dim(0) == beta.dim(0),
                  "layer_norm: incompatible " + shape_str(a.shape()) + ", " + shape_str(gamma.shape()) + ", " +
                      shape_str(beta.shape()));
    detail::check(eps > 0.0f, "layer_norm: eps must be positive");
    const int64_t d = a.dim(a.ndim() - 1), rows = a.numel() / d;
    std::vector<float> out(a.data().size());
    auto xhat = std::make_shared<std::vector<float>>(a.data().size());
    auto inv_std = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
    const float* src = a.data().data();
    const float* g = gamma.data().data();
    const float* bt = beta.data().data();
    for (int64_t i = 0; i < rows; ++i) {
        const float* x = src + i * d;
        float mean = 0.0f;
        for (int64_t j = 0; j < d; ++j) mean += x[j];
        mean /= static_cast<float>(d);
        float var = 0.0f;
        for (int64_t j = 0; j < d; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<float>(d);
        const float is = 1.0f / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < d; ++j) {
            const float xh = (x[j] - mean) * is;
            (*xhat)[i * d + j] = xh;
            out[i * d + j] = g[j] * xh + bt[j];
        }
    }
    auto an = a.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_op(a.shape(), std::move(out), {a, gamma, beta},
                           [an, gn, bn, xhat, inv_std, rows, d](detail::Node& self) {
        for (int64_t i = 0; i < rows; ++i) {
            const float* u = self.grad.data() + i * d;
            const float* xh = xhat->data() + i * d;
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (int64_t j = 0; j < d; ++j) gn->grad[j] += u[j] * xh[j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t j = 0; j < d; ++j) bn->grad[j] += u[j];
            }
            if (an->requires_grad) {
                an->ensure_grad();
                const float is = (*inv_std)[static_cast<size_t>(i)];
                float sum_gu = 0.0f, sum_gux = 0.0f;
                for (int64_t j = 0; j < d; ++j) {
                    const float gu = gn->value[j] * u[j];
                    sum_gu += gu;
                    sum_gux += gu * xh[j];
                }
                const float inv_d = 1.0f / static_cast<float>(d);
                for (int64_t j = 0; j < d; ++j) {
                    const float gu = gn->value[j] * u[j];
                    an->grad[i * d + j] += is * (gu - inv_d * sum_gu - xh[j] * inv_d * sum_gux);
                }
            }
        }
    });
}

inline Tensor l2_normalize_rows(const Tensor& a) {
    detail::check(a.ndim() >= 1, "l2_normalize_rows: undefined input");
    const int64_t d = a.dim(a.ndim() - 1), rows = a.numel() / d;
    std::vector<float> out(a.data().size());
    auto norms = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
    const float* src = a.data().data();
    for (int64_t i = 0; i < rows; ++i) {
        const float* x = src + i * d;
        float sq = 0.0f;
        for (int64_t j = 0; j < d; ++j) sq += x[j] * x[j];
        const float norm = std::sqrt(sq);
        if (norm <= 1e-12f)
            throw Error("l2_normalize_rows: degenerate input, row " + std::to_string(i) + " has near-zero norm");
        (*norms)[static_cast<size_t>(i)] = norm;
        for (int64_t j = 0; j < d; ++j) out[i * d + j] = x[j] / norm;
    }
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out), {a}, [an, norms, rows, d](detail::Node& self) {
        an->ensure_grad();
        for (int64_t i = 0; i < rows; ++i) {
            const float* y = self.value.data() + i * d;
            const float* u = self.grad.data() + i * d;
            float dot = 0.0f;
            for (int64_t j = 0; j < d; ++j) dot += u[j] * y[j];
            const float inv_norm = 1.0f / (*norms)[static_cast<size_t>(i)];
            for (int64_t j = 0; j < d; ++j) an->grad[i * d + j] += (u[j] - y[j] * dot) * inv_norm;
        }
    });
}

inline Tensor rowwise_dot(const Tensor& a, const Tensor& b) {
    detail::check(a.ndim() == 2 && a.shape() == b.shape(),
                  "rowwise_dot: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const int64_t r = a.dim(0), d = a.dim(1);
    std::vector<float> out(static_cast<size_t>(r), 0.0f);
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(i)] += a.data()[i * d + j] * b.data()[i * d + j];
    auto an = a.node(), bn = b.node();
    return detail::make_op({r}, std::move(out), {a, b}, [an, bn, r, d](detail::Node& self) {
        for (int64_t i = 0; i < r; ++i) {
            const float u = self.grad[static_cast<size_t>(i)];
            if (an->requires_grad) {
                an->ensure_grad();
                for (int64_t j = 0; j < d; ++j) an->grad[i * d + j] += u * bn->value[i * d + j];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int64_t j = 0; j < d; ++j) bn->grad[i * d + j] += u * an->value[i * d + j];
            }
        }
    });
}

inline Tensor sum_rows(const Tensor& a) {
    detail::check(a.ndim() == 2, "sum_rows: expected [r x c], got " + shape_str(a.shape()));
    const int64_t r = a.dim(0), c = a.dim(1);
    std::vector<float> out(static_cast<size_t>(r), 0.0f);
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(i)] += a.data()[i * c + j];
    auto an = a.node();
    return detail::make_op({r}, std::move(out), {a}, [an, r, c](detail::Node& self) {
        an->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) an->grad[i * c + j] += self.grad[static_cast<size_t>(i)];
    });
}

// arithmetic mean over the first axis: [n x d] -> [d]
inline Tensor mean_rows(const Tensor& a) {
    detail::check(a.ndim() == 2 && a.dim(0) >= 1, "mean_rows: empty input " + shape_str(a.shape()));
    const int64_t n = a.dim(0), d = a.dim(1);
    std::vector<float> out(static_cast<size_t>(d), 0.0f);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) out[static_cast<size_t>(j)] += a.data()[i * d + j];
    for (auto& v : out) v /= static_cast<float>(n);
    auto an = a.node();
    return detail::make_op({d}, std::move(out), {a}, [an, n, d](detail::Node& self) {
        an->ensure_grad();
        const float inv = 1.0f / static_cast<float>(n);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) an->grad[i * d + j] += self.grad[static_cast<size_t>(j)] * inv;
    });
}

// mean over the token axis: [B x T x d] -> [B x d]
inline Tensor mean_tokens(const Tensor& a) {
    detail::check(a.ndim() == 3 && a.dim(1) >= 1, "mean_tokens: empty token axis in " + shape_str(a.shape()));
    const int64_t B = a.dim(0), T = a.dim(1), d = a.dim(2);
    std::vector<float> out(static_cast<size_t>(B * d), 0.0f);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t t = 0; t < T; ++t)
            for (int64_t j = 0; j < d; ++j) out[b * d + j] += a.data()[(b * T + t) * d + j];
    for (auto& v : out) v /= static_cast<float>(T);
    auto an = a.node();
    return detail::make_op({B, d}, std::move(out), {a}, [an, B, T, d](detail::Node& self) {
        an->ensure_grad();
        const float inv = 1.0f / static_cast<float>(T);
        for (int64_t b = 0; b < B; ++b)
            for (int64_t t = 0; t < T; ++t)
                for (int64_t j = 0; j < d; ++j) an->grad[(b * T + t) * d + j] += self.grad[b * d + j] * inv;
    });
}

inline Tensor sum_all(const Tensor& a) {
    float s = 0.0f;
    for (float v : a.data()) s += v;
    auto an = a.node();
    return detail::make_op({1}, {s}, {a}, [an](detail::Node& self) {
        an->ensure_grad();
        for (auto& g : an->grad) g += self.grad[0];
    });
}

inline Tensor mean_all(const Tensor& a) {
    detail::check(a.numel() >= 1, "mean_all: empty input");
    float s = 0.0f;
    for (float v : a.data()) s += v;
    const float inv = 1.0f / static_cast<float>(a.numel());
    auto an = a.node();
    return detail::make_op({1}, {s * inv}, {a}, [an, inv](detail::Node& self) {
        an->ensure_grad();
        for (auto& g : an->grad) g += self.grad[0] * inv;
    });
}

// ---------------------------------------------------------------------------
// composites and non-differentiable helpers
// ---------------------------------------------------------------------------

// x [... x in] * W [in x out] + b; accepts 2D or 3D x
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::check(w.ndim() == 2, "linear: weight must be 2D, got " + shape_str(w.shape()));
    if (x.ndim() == 2) return add_rowvec(matmul(x, w), b);
    detail::check(x.ndim() == 3 && x.dim(2) == w.dim(0),
                  "linear: incompatible " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int64_t B = x.dim(0), T = x.dim(1);
    Tensor flat = reshape(x, {B * T, x.dim(2)});
    Tensor y = add_rowvec(matmul(flat, w), b);
    return reshape(y, {B, T, w.dim(1)});
}

inline float cosine_similarity(const Tensor& a, const Tensor& b) {
    detail::check(a.shape() == b.shape() && a.ndim() == 1,
                  "cosine_similarity: expected equal vectors, got " + shape_str(a.shape()) + " and " +
                      shape_str(b.shape()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += static_cast<double>(a.data()[static_cast<size_t>(i)]) * b.data()[static_cast<size_t>(i)];
        na += static_cast<double>(a.data()[static_cast<size_t>(i)]) * a.data()[static_cast<size_t>(i)];
        nb += static_cast<double>(b.data()[static_cast<size_t>(i)]) * b.data()[static_cast<size_t>(i)];
    }
    if (na <= 1e-24 || nb <= 1e-24) throw Error("cosine_similarity: degenerate zero vector");
    return static_cast<float>(dot / (std::sqrt(na) * std::sqrt(nb)));
}

inline bool all_finite(const Tensor& a) {
    for (float v : a.data())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace mugs
