#pragma once

#include "gapelab/numerics.hpp"

#include <algorithm>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace gapelab {

/// One named parameter tensor, stored row-major.
template <class T>
struct ParamEntry {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<T> data;
    bool requires_grad = true;

    std::size_t numel() const { return data.size(); }
};

/// Ordered collection of named tensors; the model's parameter set and the
/// unit of checkpointing.
template <class T>
class BasicParamStore {
public:
    using value_type = T;

    ParamEntry<T>& add(std::string name, std::vector<std::size_t> shape, T fill = T(0), bool requires_grad = true) {
        if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
        std::size_t n = 1;
        for (auto s : shape) n *= s;
        index_[name] = entries_.size();
        entries_.push_back({std::move(name), std::move(shape), std::vector<T>(n, fill), requires_grad});
        return entries_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    ParamEntry<T>& get(const std::string& name) {
        const auto it = index_.find(name);
        if (it == index_.end()) throw Error("no parameter named '" + name + "'");
        return entries_[it->second];
    }
    const ParamEntry<T>& get(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) throw Error("no parameter named '" + name + "'");
        return entries_[it->second];
    }

    std::vector<ParamEntry<T>>& entries() { return entries_; }
    const std::vector<ParamEntry<T>>& entries() const { return entries_; }
    std::size_t size() const { return entries_.size(); }

    std::size_t numel() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.numel();
        return n;
    }

    /// Same names and shapes, all zeros.
    BasicParamStore zeros_like() const {
        BasicParamStore z;
        for (const auto& e : entries_) z.add(e.name, e.shape, T(0), e.requires_grad);
        return z;
    }

    template <class U>
    BasicParamStore<U> cast() const {
        BasicParamStore<U> out;
        for (const auto& e : entries_) {
            auto& d = out.add(e.name, e.shape, U(0), e.requires_grad);
            for (std::size_t i = 0; i < e.data.size(); ++i) d.data[i] = static_cast<U>(e.data[i]);
        }
        return out;
    }

    void fill(T v) {
        for (auto& e : entries_) std::fill(e.data.begin(), e.data.end(), v);
    }

private:
    std::vector<ParamEntry<T>> entries_;
    std::map<std::string, std::size_t> index_;
};

using ParamStore = BasicParamStore<float>;
using ParamStore64 = BasicParamStore<double>;

} // namespace gapelab
