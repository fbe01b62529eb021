#pragma once

// Named parameter registry. Modules register their leaf tensors under
// hierarchical names; the optimizer, EMA update, and checkpoint code iterate
// the registry in insertion order, which is fixed by construction order and
// therefore deterministic.

#include <string>
#include <utility>
#include <vector>

#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"

namespace mugs {

class ParamStore {
public:
    void add(const std::string& name, const Tensor& t) {
        if (!t.defined() || !t.is_leaf())
            throw Error("ParamStore::add: parameter '" + name + "' must be a defined leaf tensor");
        if (contains(name)) throw Error("ParamStore::add: duplicate parameter name '" + name + "'");
        items_.emplace_back(name, t);
    }

    bool contains(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return true;
        return false;
    }

    const Tensor& at(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return t;
        throw Error("ParamStore::at: unknown parameter '" + name + "'");
    }

    size_t size() const { return items_.size(); }

    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

    std::pair<std::string, Tensor>& entry(size_t i) { return items_.at(i); }
    const std::pair<std::string, Tensor>& entry(size_t i) const { return items_.at(i); }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

// Truncated normal init (resample outside +/- 2 std), the ViT convention.
inline Tensor trunc_normal_param(Shape shape, float std, Rng& rng, bool trainable) {
    std::vector<float> d(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : d) {
        double x;
        do {
            x = rng.normal(0.0, std);
        } while (std::abs(x) > 2.0 * std);
        v = static_cast<float>(x);
    }
    return Tensor::from_data(std::move(shape), std::move(d), trainable);
}

inline Tensor const_param(Shape shape, float v, bool trainable) {
    return Tensor::full(std::move(shape), v, trainable);
}

}  // namespace mugs
