#pragma once

// Dense NCHW tensors plus a reverse-mode autodiff tape.
//
// A Tensor is a shared handle to flat storage; ops build fresh output tensors
// and, while gradients are enabled and some input requires them, push a node
// with a backward rule onto the thread-local Graph. Graph::backward seeds the
// scalar loss with 1, walks the tape in reverse through per-pass gradient
// buffers, and finally accumulates into each tensor's persistent .grad()
// (so calling backward twice without zeroing yields exactly 2x).

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lmbf/errors.hpp"

namespace lmbf {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline void check_extents(const Shape& s) {
    if (s.empty()) throw shape_error("invalid shape: empty extent list");
    for (int64_t d : s)
        if (d < 1) throw shape_error("invalid shape: extent " + std::to_string(d) + " in " + shape_str(s));
}

template <typename T>
class Tensor {
    struct Impl {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;          // empty until first touched
        bool requires_grad = false;
    };
    std::shared_ptr<Impl> impl_;

    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

public:
    using value_type = T;

    Tensor() = default;

    static Tensor from_data(Shape shape, std::vector<T> data) {
        check_extents(shape);
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw shape_error("data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        auto impl = std::make_shared<Impl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        return Tensor(std::move(impl));
    }

    static Tensor full(Shape shape, T value) {
        check_extents(shape);
        auto impl = std::make_shared<Impl>();
        impl->data.assign(static_cast<size_t>(shape_numel(shape)), value);
        impl->shape = std::move(shape);
        return Tensor(std::move(impl));
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor zeros_like(const Tensor& other) { return zeros(other.shape()); }
    static Tensor ones_like(const Tensor& other) { return ones(other.shape()); }

    static Tensor scalar(T value) { return full({1}, value); }

    bool defined() const { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    size_t rank() const { return impl_->shape.size(); }
    int64_t dim(size_t i) const { return impl_->shape.at(i); }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }
    T* ptr() { return impl_->data.data(); }
    const T* ptr() const { return impl_->data.data(); }

    // NCHW element access, mostly for tests and small utilities.
    T& at4(int64_t n, int64_t c, int64_t y, int64_t x) {
        const Shape& s = impl_->shape;
        return impl_->data[((n * s[1] + c) * s[2] + y) * s[3] + x];
    }
    T at4(int64_t n, int64_t c, int64_t y, int64_t x) const {
        const Shape& s = impl_->shape;
        return impl_->data[((n * s[1] + c) * s[2] + y) * s[3] + x];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on = true) {
        impl_->requires_grad = on;
        return *this;
    }

    // Persistent gradient buffer; allocated (zeroed) on first access.
    std::vector<T>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
        return impl_->grad;
    }
    const std::vector<T>& grad() const { return const_cast<Tensor*>(this)->grad(); }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    // Stable identity for tape bookkeeping.
    const void* id() const { return impl_.get(); }
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
};

// ---------------------------------------------------------------------------
// Autograd mode (thread-local). NoGradGuard disables recording in its scope.
// ---------------------------------------------------------------------------

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }
inline void set_grad_enabled(bool on) { detail::grad_mode_flag() = on; }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---------------------------------------------------------------------------
// Per-backward-pass gradient buffers, keyed by tensor identity.
// ---------------------------------------------------------------------------

template <typename T>
class GradBuffers {
public:
    std::vector<T>& of(const Tensor<T>& t) {
        auto it = map_.find(t.id());
        if (it == map_.end()) {
            it = map_.emplace(t.id(), Entry{t, std::vector<T>(t.numel(), T(0))}).first;
        }
        return it->second.grad;
    }
    const std::vector<T>* find(const Tensor<T>& t) const {
        auto it = map_.find(t.id());
        return it == map_.end() ? nullptr : &it->second.grad;
    }

private:
    struct Entry {
        Tensor<T> tensor;
        std::vector<T> grad;
    };
    std::unordered_map<const void*, Entry> map_;

    template <typename U>
    friend class Graph;
};

// ---------------------------------------------------------------------------
// The tape. Nodes are recorded in execution order, so inputs always precede
// the node that consumes them; backward walks the list in reverse.
// ---------------------------------------------------------------------------

template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(GradBuffers<T>&)>;

    struct Node {
        const char* op;
        std::vector<Tensor<T>> inputs;
        Tensor<T> output;
        BackwardFn backward;
    };

    static Graph& current() {
        thread_local Graph g;
        return g;
    }

    void record(const char* op, std::vector<Tensor<T>> inputs, const Tensor<T>& output, BackwardFn fn) {
        nodes_.push_back(Node{op, std::move(inputs), output, std::move(fn)});
    }

    // Accumulates d(loss)/d(t) into .grad() of every requires_grad tensor on
    // the tape. Gradients from tensors used at several sites are summed.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw contract_error("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
        GradBuffers<T> gb;
        gb.of(loss)[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (gb.find(it->output) == nullptr) continue; // dead branch
            it->backward(gb);
        }
        for (auto& [key, entry] : gb.map_) {
            (void)key;
            if (!entry.tensor.requires_grad()) continue;
            auto& g = entry.tensor.grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += entry.grad[i];
        }
    }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }

private:
    std::vector<Node> nodes_;
};

// Free-function form used throughout the tests.
template <typename T>
inline void backward(Graph<T>& g, const Tensor<T>& loss) {
    g.backward(loss);
}

namespace detail {

template <typename T>
inline bool any_requires_grad(std::initializer_list<Tensor<T>> ts) {
    for (const auto& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

// Marks the output and pushes a node when this op should be differentiated.
template <typename T>
inline void maybe_record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
                         typename Graph<T>::BackwardFn fn) {
    if (!grad_enabled()) return;
    bool needed = false;
    for (const auto& t : inputs)
        if (t.requires_grad()) { needed = true; break; }
    if (!needed) return;
    output.set_requires_grad(true);
    Graph<T>::current().record(op, std::move(inputs), output, std::move(fn));
}

} // namespace detail

// ---------------------------------------------------------------------------
// tensor_full — the checked factory exposed as an operation.
// ---------------------------------------------------------------------------

template <typename T>
inline Tensor<T> tensor_full(const Shape& shape, T value) {
    return Tensor<T>::full(shape, value);
}

// ---------------------------------------------------------------------------
// elementwise add/mul with same-rank broadcasting (any extent may be 1 on
// either side). Backward sum-reduces over the broadcast axes.
// ---------------------------------------------------------------------------

enum class EwOp { add, mul };

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    if (a.size() != b.size())
        throw shape_error("elementwise rank mismatch: " + shape_str(a) + " vs " + shape_str(b));
    Shape out(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i]) out[i] = a[i];
        else if (a[i] == 1) out[i] = b[i];
        else if (b[i] == 1) out[i] = a[i];
        else
            throw shape_error("elementwise shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
    }
    return out;
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

// Strides for reading `in` as if broadcast to `out` (0 where extent is 1).
inline std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out) {
    auto st = row_major_strides(in);
    for (size_t i = 0; i < in.size(); ++i)
        if (in[i] == 1 && out[i] != 1) st[i] = 0;
    return st;
}

template <typename T, typename F>
inline void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& body) {
    const auto stc = row_major_strides(out);
    const auto sta = broadcast_strides(sa, out);
    const auto stb = broadcast_strides(sb, out);
    const int64_t total = shape_numel(out);
    const size_t r = out.size();
    std::vector<int64_t> idx(r, 0);
    int64_t ia = 0, ib = 0;
    for (int64_t ic = 0; ic < total; ++ic) {
        body(ic, ia, ib);
        for (size_t d = r; d-- > 0;) {
            ++idx[d];
            ia += sta[d];
            ib += stb[d];
            if (idx[d] < out[d]) break;
            idx[d] = 0;
            ia -= sta[d] * out[d];
            ib -= stb[d] * out[d];
        }
    }
}

// Reduce an out-shaped gradient onto an input that was broadcast to out.
template <typename T>
inline void reduce_to(const Shape& out, const Shape& in, const std::vector<T>& gout,
                      const T* factor, std::vector<T>& gin) {
    const auto sti = broadcast_strides(in, out);
    const size_t r = out.size();
    std::vector<int64_t> idx(r, 0);
    int64_t ii = 0;
    const int64_t total = shape_numel(out);
    for (int64_t ic = 0; ic < total; ++ic) {
        gin[ii] += factor ? gout[ic] * factor[ic] : gout[ic];
        for (size_t d = r; d-- > 0;) {
            ++idx[d];
            ii += sti[d];
            if (idx[d] < out[d]) break;
            idx[d] = 0;
            ii -= sti[d] * out[d];
        }
    }
}

} // namespace detail

template <typename T>
inline Tensor<T> elementwise(EwOp op, const Tensor<T>& a, const Tensor<T>& b) {
    const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();

    if (a.shape() == b.shape()) {
        const int64_t n = out.numel();
        if (op == EwOp::add)
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        else
            for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    } else {
        detail::for_each_broadcast<T>(out_shape, a.shape(), b.shape(),
            [&](int64_t ic, int64_t ia, int64_t ib) {
                po[ic] = (op == EwOp::add) ? pa[ia] + pb[ib] : pa[ia] * pb[ib];
            });
    }

    const char* tag = (op == EwOp::add) ? "add" : "mul";
    detail::maybe_record<T>(tag, {a, b}, out, [op, a, b, out](GradBuffers<T>& gb) {
        const auto& go = gb.of(out);
        if (op == EwOp::add) {
            if (a.requires_grad()) detail::reduce_to<T>(out.shape(), a.shape(), go, nullptr, gb.of(a));
            if (b.requires_grad()) detail::reduce_to<T>(out.shape(), b.shape(), go, nullptr, gb.of(b));
        } else {
            // Product rule; the partner operand is materialized at out shape.
            if (a.requires_grad()) {
                std::vector<T> bf(go.size());
                detail::for_each_broadcast<T>(out.shape(), a.shape(), b.shape(),
                    [&](int64_t ic, int64_t, int64_t ib) { bf[ic] = b.ptr()[ib]; });
                detail::reduce_to<T>(out.shape(), a.shape(), go, bf.data(), gb.of(a));
            }
            if (b.requires_grad()) {
                std::vector<T> af(go.size());
                detail::for_each_broadcast<T>(out.shape(), a.shape(), b.shape(),
                    [&](int64_t ic, int64_t ia, int64_t) { af[ic] = a.ptr()[ia]; });
                detail::reduce_to<T>(out.shape(), b.shape(), go, af.data(), gb.of(b));
            }
        }
    });
    return out;
}

template <typename T>
inline Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(EwOp::add, a, b); }

template <typename T>
inline Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(EwOp::mul, a, b); }

// Sum of all elements to a scalar of shape [1].
template <typename T>
inline Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    const T* px = x.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) acc += px[i];
    Tensor<T> out = Tensor<T>::scalar(acc);
    detail::maybe_record<T>("sum", {x}, out, [x, out](GradBuffers<T>& gb) {
        const T g = gb.of(out)[0];
        auto& gx = gb.of(x);
        for (auto& v : gx) v += g;
    });
    return out;
}

// Multiply by a compile-time-known constant (plumbing for losses/tests).
template <typename T>
inline Tensor<T> scale(const Tensor<T>& x, T factor) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.ptr();
    T* po = out.ptr();
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) po[i] = px[i] * factor;
    detail::maybe_record<T>("scale", {x}, out, [x, out, factor](GradBuffers<T>& gb) {
        const auto& go = gb.of(out);
        auto& gx = gb.of(x);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * factor;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences.
// ---------------------------------------------------------------------------

struct GradcheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    int worst_input = -1;     // index into the checked input list
    int64_t worst_element = -1;
};

// fn: Tensor<double>(const std::vector<Tensor<double>>&) returning a scalar.
// Analytic gradients of `inputs` are compared elementwise with
// (f(x+eps) - f(x-eps)) / (2 eps); relative error uses
// max(|analytic|, |numeric|, 1e-8) as denominator.
template <typename Fn>
inline GradcheckReport gradcheck(Fn&& fn, std::vector<Tensor<double>> inputs,
                                 double eps = 1e-5, double tol = 1e-4) {
    auto& tape = Graph<double>::current();
    tape.clear();
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    Tensor<double> out = fn(inputs);
    if (out.numel() != 1)
        throw contract_error("gradcheck: fn must return a scalar, got " + shape_str(out.shape()));
    if (!std::isfinite(out.data()[0]))
        throw numeric_error("gradcheck: non-finite forward value");
    tape.backward(out);
    tape.clear();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto& t : inputs) analytic.push_back(t.grad());

    GradcheckReport rep;
    NoGradGuard ng;
    for (size_t i = 0; i < inputs.size(); ++i) {
        auto& data = inputs[i].data();
        for (size_t j = 0; j < data.size(); ++j) {
            const double saved = data[j];
            data[j] = saved + eps;
            const double f_plus = fn(inputs).data()[0];
            data[j] = saved - eps;
            const double f_minus = fn(inputs).data()[0];
            data[j] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * eps);
            const double a = analytic[i][j];
            if (!std::isfinite(numeric) || !std::isfinite(a))
                throw numeric_error("gradcheck: non-finite gradient at input " + std::to_string(i) +
                                    " element " + std::to_string(j));
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_input = static_cast<int>(i);
                rep.worst_element = static_cast<int64_t>(j);
            }
        }
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

} // namespace lmbf
