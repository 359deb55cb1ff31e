// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification of tape gradients. The analytic side runs
// the normal float path; the numeric side re-executes the identical
// (templated) loss in double precision with central differences, so float
// rounding never masquerades as a wrong backward rule.

#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "centermask/params.hpp"

namespace centermask {

struct GradCheckEntry {
    std::string param;
    double max_rel_err = 0.0;
    double max_abs_grad = 0.0;
    int samples = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst_rel_err = 0.0;

    bool within(double tol) const { return worst_rel_err < tol; }
};

struct GradCheckOptions {
    double step = 1e-3;
    // FD samples per parameter tensor; <= 0 checks every element.
    int samples_per_tensor = 4;
    std::uint64_t seed = 7;
};

// LossFn must be callable as loss(tape, leaves) -> scalar node id for both
// Tape<float>/Leaves<float> and Tape<double>/Leaves<double>.
template <typename LossFn>
GradCheckReport check_gradients(ParamStore& store, LossFn&& loss, GradCheckOptions opt = {}) {
    // Analytic gradients via the float tape.
    store.zero_grads();
    std::vector<std::string> used;
    {
        ad::Tape<float> tape;
        Leaves<float> leaves(tape, store);
        ad::Id l = loss(tape, leaves);
        tape.backward(l);
        leaves.add_grads_to(store);
        used = leaves.used();
    }

    // Double-precision copies the FD loop perturbs in place.
    std::vector<std::pair<std::string, Tensor<double>>> shadow;
    for (const std::string& name : used)
        shadow.emplace_back(name, store.get(name).value.cast<double>());

    auto eval = [&]() {
        ad::Tape<double> tape;
        Leaves<double> leaves(tape, [&shadow](const std::string& name) {
            for (const auto& [n, v] : shadow)
                if (n == name) return v;
            throw std::out_of_range("gradcheck: loss used unexpected parameter " + name);
        });
        ad::Id l = loss(tape, leaves);
        return static_cast<double>(tape.value(l)[0]);
    };

    GradCheckReport report;
    std::mt19937_64 rng(opt.seed);
    for (auto& [name, values] : shadow) {
        const Tensor<float>& analytic = store.get(name).grad;
        GradCheckEntry entry;
        entry.param = name;
        for (std::int64_t i = 0; i < analytic.size(); ++i)
            entry.max_abs_grad = std::max(entry.max_abs_grad,
                                          std::abs(static_cast<double>(analytic[i])));

        std::vector<std::int64_t> picks;
        if (opt.samples_per_tensor <= 0 || analytic.size() <= opt.samples_per_tensor) {
            for (std::int64_t i = 0; i < analytic.size(); ++i) picks.push_back(i);
        } else {
            // Largest-magnitude gradient plus random draws.
            std::int64_t argmax = 0;
            for (std::int64_t i = 1; i < analytic.size(); ++i)
                if (std::abs(analytic[i]) > std::abs(analytic[argmax])) argmax = i;
            picks.push_back(argmax);
            std::uniform_int_distribution<std::int64_t> dist(0, analytic.size() - 1);
            while (static_cast<int>(picks.size()) < opt.samples_per_tensor)
                picks.push_back(dist(rng));
        }

        for (std::int64_t i : picks) {
            const double saved = values[i];
            values[i] = saved + opt.step;
            const double up = eval();
            values[i] = saved - opt.step;
            const double down = eval();
            values[i] = saved;
            const double fd = (up - down) / (2.0 * opt.step);
            const double an = static_cast<double>(analytic[i]);
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
            entry.max_rel_err = std::max(entry.max_rel_err, std::abs(fd - an) / denom);
            ++entry.samples;
        }
        report.worst_rel_err = std::max(report.worst_rel_err, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace centermask
