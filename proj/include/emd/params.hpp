#pragma once

/// @file params.hpp
/// @brief Named parameter collections, their initialization, and the
/// building blocks (conv / separable conv / batch norm) shared by both networks.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "emd/graph.hpp"
#include "emd/rng.hpp"
#include "emd/tensor.hpp"

namespace emd {

/// Ordered, named tensors. Buffers (batch-norm running statistics) are
/// stored alongside weights but are never optimized.
template <class T>
class ParamSet {
public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        Tensor<T> grad;
        bool buffer = false;
    };

    Tensor<T>& add(const std::string& name, Shape shape, bool buffer = false) {
        if (index_.count(name)) throw PreconditionError("duplicate parameter " + name);
        index_[name] = entries_.size();
        entries_.push_back(Entry{name, Tensor<T>(shape), buffer ? Tensor<T>() : Tensor<T>(shape), buffer});
        return entries_.back().value;
    }

    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    Entry& entry(const std::string& name) { return entries_.at(lookup(name)); }
    const Entry& entry(const std::string& name) const { return entries_.at(lookup(name)); }
    Tensor<T>& value(const std::string& name) { return entry(name).value; }
    const Tensor<T>& value(const std::string& name) const { return entry(name).value; }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grad() {
        for (auto& e : entries_)
            if (!e.buffer) e.grad.fill(T(0));
    }

    std::size_t trainable_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_)
            if (!e.buffer) n += e.value.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& e : entries_)
            if (!e.value.all_finite()) return false;
        return true;
    }

    template <class U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& e : entries_) out.add(e.name, e.value.shape(), e.buffer) = e.value.template cast<U>();
        return out;
    }

    /// Byte-level fingerprint over names, shapes and values.
    std::uint64_t fingerprint() const {
        std::uint64_t h = 0x84222325CBF29CE4ULL;
        for (const auto& e : entries_) {
            h = mix64(h ^ hash_string(e.name));
            const auto* bytes = reinterpret_cast<const unsigned char*>(e.value.data());
            for (std::size_t i = 0; i < e.value.size() * sizeof(T); ++i) {
                h ^= bytes[i];
                h *= 0x100000001B3ULL;
            }
        }
        return h;
    }

    bool operator==(const ParamSet& o) const {
        if (entries_.size() != o.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& a = entries_[i];
            const auto& b = o.entries_[i];
            if (a.name != b.name || a.buffer != b.buffer || !(a.value == b.value)) return false;
        }
        return true;
    }

private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw PreconditionError("unknown parameter " + name);
        return it->second;
    }

    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Binds a ParamSet into a Graph for one forward pass.
template <class T>
class Binder {
public:
    using Filter = std::function<bool(const std::string&)>;

    /// `with_grads` requests gradients for every weight accepted by `trainable`
    /// (all weights when no filter is given). `update_buffers` lets training-mode
    /// batch norm write its running statistics back into `params`.
    Binder(Graph<T>& g, ParamSet<T>& params, bool with_grads, bool update_buffers, Filter trainable = {})
        : g_(g), params_(params), mutable_(&params), grads_(with_grads), update_buffers_(update_buffers),
          trainable_(std::move(trainable)) {}

    /// Read-only binding: no gradients, no buffer updates.
    Binder(Graph<T>& g, const ParamSet<T>& params) : g_(g), params_(params) {}

    Graph<T>& graph() { return g_; }

    Var weight(const std::string& name) {
        if (mutable_ && grads_ && (!trainable_ || trainable_(name))) {
            auto& e = mutable_->entry(name);
            return g_.param(e.value, &e.grad);
        }
        return g_.param(params_.value(name), nullptr);
    }

    Tensor<T>& buffer(const std::string& name) {
        if (mutable_ && update_buffers_) return mutable_->value(name);
        scratch_.push_back(params_.value(name));
        return scratch_.back();
    }

private:
    Graph<T>& g_;
    const ParamSet<T>& params_;
    ParamSet<T>* mutable_ = nullptr;
    bool grads_ = false;
    bool update_buffers_ = false;
    Filter trainable_;
    std::deque<Tensor<T>> scratch_;
};

// ------------------------------------------------------------ initialization

/// Fan-in scaled uniform init, one RNG stream per parameter name.
template <class T>
void init_uniform(Tensor<T>& t, std::uint64_t seed, const std::string& name, double bound) {
    Rng rng(seed, name);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
}

template <class T>
void add_conv(ParamSet<T>& ps, const std::string& name, int cout, int cin, int k, bool bias, std::uint64_t seed) {
    auto& w = ps.add(name + ".w", Shape{cout, cin, k, k});
    init_uniform(w, seed, name + ".w", std::sqrt(6.0 / (cin * k * k)));
    if (bias) ps.add(name + ".b", Shape{1, cout, 1, 1});
}

/// Final linear layers use the smaller 1/sqrt(fan_in) bound.
template <class T>
void add_linear(ParamSet<T>& ps, const std::string& name, int cout, int cin, std::uint64_t seed) {
    auto& w = ps.add(name + ".w", Shape{cout, cin, 1, 1});
    init_uniform(w, seed, name + ".w", 1.0 / std::sqrt(static_cast<double>(cin)));
    ps.add(name + ".b", Shape{1, cout, 1, 1});
}

template <class T>
void add_batch_norm(ParamSet<T>& ps, const std::string& name, int c) {
    ps.add(name + ".gamma", Shape{1, c, 1, 1}).fill(T(1));
    ps.add(name + ".beta", Shape{1, c, 1, 1});
    ps.add(name + ".mean", Shape{1, c, 1, 1}, true);
    ps.add(name + ".var", Shape{1, c, 1, 1}, true).fill(T(1));
}

/// Depthwise k x k followed by pointwise 1 x 1.
template <class T>
void add_separable(ParamSet<T>& ps, const std::string& name, int cout, int cin, int k, std::uint64_t seed) {
    auto& dw = ps.add(name + ".dw.w", Shape{cin, 1, k, k});
    init_uniform(dw, seed, name + ".dw.w", std::sqrt(6.0 / (k * k)));
    auto& pw = ps.add(name + ".pw.w", Shape{cout, cin, 1, 1});
    init_uniform(pw, seed, name + ".pw.w", std::sqrt(6.0 / cin));
}

// ------------------------------------------------------------------- blocks

template <class T>
Var batch_norm(Binder<T>& b, Var x, const std::string& name) {
    return b.graph().batch_norm(x, b.weight(name + ".gamma"), b.weight(name + ".beta"), b.buffer(name + ".mean"),
                                b.buffer(name + ".var"));
}

/// conv -> batch norm -> SiLU.
template <class T>
Var conv_bn_act(Binder<T>& b, Var x, const std::string& name, int dilation = 1) {
    auto& g = b.graph();
    Var y = g.conv2d(x, b.weight(name + ".w"), Var{}, dilation);
    return g.silu(batch_norm(b, y, name + ".bn"));
}

/// separable conv -> batch norm -> SiLU.
template <class T>
Var separable_bn_act(Binder<T>& b, Var x, const std::string& name, int dilation = 1) {
    auto& g = b.graph();
    Var y = g.depthwise_conv2d(x, b.weight(name + ".dw.w"), dilation);
    y = g.conv2d(y, b.weight(name + ".pw.w"), Var{});
    return g.silu(batch_norm(b, y, name + ".bn"));
}

template <class T>
Var linear(Binder<T>& b, Var x, const std::string& name) {
    return b.graph().conv2d(x, b.weight(name + ".w"), b.weight(name + ".b"));
}

}  // namespace emd
