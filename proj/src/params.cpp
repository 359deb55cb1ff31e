// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "centermask/params.hpp"

#include <cmath>
#include <stdexcept>

namespace centermask {

Param& ParamStore::add(const std::string& name, Tensor<float> init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_.emplace(name, params_.size());
    names_.push_back(name);
    Param p;
    p.grad = Tensor<float>(init.shape());
    p.momentum = Tensor<float>(init.shape());
    p.value = std::move(init);
    params_.push_back(std::move(p));
    return params_.back();
}

Param& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

void ParamStore::zero_grads() {
    for (Param& p : params_) p.grad.fill(0.0f);
}

std::int64_t ParamStore::total_values() const {
    std::int64_t n = 0;
    for (const Param& p : params_) n += p.value.size();
    return n;
}

Tensor<float> WeightInit::he_normal(const std::vector<int>& shape, int fan_in) {
    return normal(shape, std::sqrt(2.0f / static_cast<float>(fan_in)));
}

Tensor<float> WeightInit::normal(const std::vector<int>& shape, float stddev) {
    Tensor<float> t(shape);
    std::normal_distribution<float> dist(0.0f, stddev);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng_);
    return t;
}

Tensor<float> WeightInit::constant(const std::vector<int>& shape, float v) {
    Tensor<float> t(shape);
    t.fill(v);
    return t;
}

}  // namespace centermask
