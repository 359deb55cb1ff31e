// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "centermask/autodiff.hpp"
#include "centermask/tensor.hpp"

namespace centermask {

// One named trainable tensor plus its optimizer state.
struct Param {
    Tensor<float> value;
    Tensor<float> grad;
    Tensor<float> momentum;
};

// Insertion-ordered bag of named parameters. Names are unique; order is the
// serialization and iteration order, so construction must be deterministic.
class ParamStore {
public:
    Param& add(const std::string& name, Tensor<float> init);
    Param& get(const std::string& name);
    const Param& get(const std::string& name) const;
    bool has(const std::string& name) const;

    const std::vector<std::string>& names() const { return names_; }
    std::size_t count() const { return names_.size(); }

    void zero_grads();
    std::int64_t total_values() const;

private:
    std::vector<std::string> names_;
    std::vector<Param> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Deterministic weight initialization. One instance is threaded through model
// construction so the draw order is fixed by parameter creation order.
class WeightInit {
public:
    explicit WeightInit(std::uint64_t seed) : rng_(seed) {}

    Tensor<float> he_normal(const std::vector<int>& shape, int fan_in);
    Tensor<float> normal(const std::vector<int>& shape, float stddev);
    static Tensor<float> constant(const std::vector<int>& shape, float v);

private:
    std::mt19937_64 rng_;
};

// Binds parameters into one tape pass as leaf nodes, created lazily by name.
template <typename T>
class Leaves {
public:
    using Provider = std::function<Tensor<T>(const std::string&)>;

    Leaves(ad::Tape<T>& tape, Provider provider)
        : tape_(&tape), provider_(std::move(provider)) {}

    // Float training path: leaves read straight from the store.
    Leaves(ad::Tape<T>& tape, const ParamStore& store)
        : tape_(&tape), provider_([&store](const std::string& name) {
              return store.get(name).value.template cast<T>();
          }) {}

    ad::Id operator[](const std::string& name) {
        auto it = ids_.find(name);
        if (it != ids_.end()) return it->second;
        ad::Id id = tape_->leaf(provider_(name));
        ids_.emplace(name, id);
        order_.push_back(name);
        return id;
    }

    // After backward: accumulate tape gradients into the store.
    void add_grads_to(ParamStore& store) const {
        for (const std::string& name : order_) {
            const ad::Id id = ids_.at(name);
            if (!tape_->has_grad(id)) continue;
            const Tensor<T>& g = tape_->grad(id);
            Tensor<float>& dst = store.get(name).grad;
            for (std::int64_t i = 0; i < g.size(); ++i) dst[i] += static_cast<float>(g[i]);
        }
    }

    const std::vector<std::string>& used() const { return order_; }

private:
    ad::Tape<T>* tape_;
    Provider provider_;
    std::unordered_map<std::string, ad::Id> ids_;
    std::vector<std::string> order_;
};

}  // namespace centermask
