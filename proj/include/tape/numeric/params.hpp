// SPDX-License-Identifier: Apache-2.0
//
// Named, role-tagged parameter collections. Every model in the project keeps
// its weights in one of these; the role tag decides what a freeze plan trains
// and how tensors are persisted.

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tape/numeric/errors.hpp"
#include "tape/numeric/tensor.hpp"

namespace tape {

enum class Role : std::uint8_t {
    Backbone = 0,
    DomainAdapter = 1,
    TaskAdapter = 2,
    Decoder = 3,
    Head = 4,
};

inline constexpr Role kAllRoles[] = {Role::Backbone, Role::DomainAdapter, Role::TaskAdapter, Role::Decoder, Role::Head};

std::string_view role_name(Role role);
Role parse_role(std::string_view name);
Role role_from_code(std::uint8_t code);

template <typename T>
class BasicParamStore {
public:
    struct Entry {
        std::string name;
        Role role;
        BasicTensor<T> tensor;
    };

    BasicTensor<T>& add(std::string name, Role role, BasicTensor<T> tensor) {
        if (index_.contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.push_back({std::move(name), role, std::move(tensor)});
        return entries_.back().tensor;
    }

    bool contains(std::string_view name) const { return index_.contains(std::string(name)); }

    const Entry& entry(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw ConfigError("unknown parameter '" + std::string(name) + "'");
        return entries_[it->second];
    }

    const BasicTensor<T>& get(std::string_view name) const { return entry(name).tensor; }
    BasicTensor<T>& get(std::string_view name) { return const_cast<Entry&>(entry(name)).tensor; }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }
    std::size_t size() const { return entries_.size(); }

    /// Drops every tensor with the given role, keeping the order of the rest.
    void erase_role(Role role) {
        std::vector<Entry> kept;
        for (auto& e : entries_)
            if (e.role != role) kept.push_back(std::move(e));
        entries_ = std::move(kept);
        reindex();
    }

    std::int64_t count(Role role) const {
        std::int64_t n = 0;
        for (const auto& e : entries_)
            if (e.role == role) n += e.tensor.numel();
        return n;
    }

    std::int64_t count_all() const {
        std::int64_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    std::int64_t count_trainable() const {
        std::int64_t n = 0;
        for (const auto& e : entries_)
            if (e.tensor.requires_grad()) n += e.tensor.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    void clear_grad() {
        for (auto& e : entries_) e.tensor.clear_grad();
    }

    /// Deep copy; requires_grad flags are preserved, gradients are not.
    BasicParamStore clone() const {
        BasicParamStore out;
        for (const auto& e : entries_) {
            auto t = e.tensor.clone();
            t.set_requires_grad(e.tensor.requires_grad());
            out.add(e.name, e.role, std::move(t));
        }
        return out;
    }

    template <typename U>
    BasicParamStore<U> cast() const {
        BasicParamStore<U> out;
        for (const auto& e : entries_) out.add(e.name, e.role, e.tensor.template cast<U>());
        return out;
    }

private:
    void reindex() {
        index_.clear();
        for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].name, i);
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = BasicParamStore<float>;
using ParamStore64 = BasicParamStore<double>;

}  // namespace tape
