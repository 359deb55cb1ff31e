// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation on an operation tape. One tape serves one
// forward/backward pass; it is not shared across concurrent steps. Values are
// stored per node; gradient buffers are allocated lazily during backward.
//
// Everything is templated on the scalar type: float is the deployment
// precision, double exists so the finite-difference gradient checker can
// re-execute a loss at higher precision through the very same code path.

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "centermask/tensor.hpp"

namespace centermask::ad {

using Id = std::int32_t;

template <typename T>
class Tape {
public:
    using scalar_type = T;

    // When set, every emitted value is scanned and a non-finite result throws.
    bool finite_checks = true;

    Id leaf(Tensor<T> value) { return emit(std::move(value), {}, nullptr, "leaf"); }

    Id emit(Tensor<T> value, std::vector<Id> inputs,
            std::function<void(Tape&, Id)> backward, const char* op_name) {
        if (finite_checks && backward != nullptr && !value.all_finite())
            throw std::runtime_error(std::string("non-finite output from op ") + op_name);
        nodes_.push_back(Node{std::move(value), Tensor<T>{}, std::move(inputs), std::move(backward)});
        return static_cast<Id>(nodes_.size() - 1);
    }

    const Tensor<T>& value(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    bool has_grad(Id id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() > 0; }

    // Gradient of the last backward() w.r.t. node id; zeros if the node was
    // not on the differentiated path (or the tape was never run).
    const Tensor<T>& grad(Id id) {
        return grad_buffer(id);
    }

    Tensor<T>& grad_buffer(Id id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    // Accumulates d(loss)/d(node) for every recorded node, running recorded
    // backward rules in reverse order. loss must be a scalar node.
    void backward(Id loss) {
        if (value(loss).size() != 1)
            throw std::invalid_argument("backward requires a scalar loss node");
        grad_buffer(loss)[0] = T(1);
        for (Id i = loss; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.backward && n.grad.size() > 0) n.backward(*this, i);
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (n.grad.size() > 0 && !n.grad.all_finite())
                throw std::runtime_error("non-finite gradient at tape node " + std::to_string(i));
        }
    }

    void reset() { nodes_.clear(); }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        std::vector<Id> inputs;
        std::function<void(Tape&, Id)> backward;
    };
    // deque keeps value/grad references stable while new nodes are emitted
    std::deque<Node> nodes_;
};

enum class ReduceMode { kMax, kAvg };
enum class Activation { kSigmoid, kRelu };

// A detection box routed into roi_align. Coordinates are input-image pixels;
// level selects which pyramid tensor the features come from.
struct RoiWindow {
    int batch = 0;
    int level = 3;
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// -- forward operators (each records its backward rule on the tape) --------

// x: N x C x H x W, w: C' x C x kh x kw, b: C'. Zero padding, floor rule.
template <typename T>
Id conv2d(Tape<T>& t, Id x, Id w, Id b, int stride, int pad);

// Transposed convolution, kernel 2x2, stride 2 (exact 2x upsample).
// w: C x C' x 2 x 2.
template <typename T>
Id deconv2d_2x2(Tape<T>& t, Id x, Id w, Id b);

// x: N x C, w: C' x C, b: C'.
template <typename T>
Id fully_connected(Tape<T>& t, Id x, Id w, Id b);

template <typename T>
Id activation(Tape<T>& t, Id x, Activation kind);

// y = exp(min(x, limit)); keeps the box head positive without overflow.
template <typename T>
Id exp_clamped(Tape<T>& t, Id x, T limit = T(16));

// y = x * s, s a learnable 1-element tensor.
template <typename T>
Id mul_scalar_param(Tape<T>& t, Id x, Id s);

template <typename T>
Id concat_channels(Tape<T>& t, const std::vector<Id>& xs);

// N x C x H x W -> N x 1 x H x W (max routes gradient to the first argmax).
template <typename T>
Id reduce_channel(Tape<T>& t, Id x, ReduceMode mode);

// N x C x H x W -> N x C x 1 x 1.
template <typename T>
Id global_avg_pool(Tape<T>& t, Id x);

template <typename T>
Id add(Tape<T>& t, Id a, Id b);

template <typename T>
Id mul(Tape<T>& t, Id a, Id b);

// x: N x C x H x W, gate: N x C x 1 x 1.
template <typename T>
Id mul_channel_gate(Tape<T>& t, Id x, Id gate);

// x: N x C x H x W, gate: N x 1 x H x W.
template <typename T>
Id mul_spatial_gate(Tape<T>& t, Id x, Id gate);

template <typename T>
Id maxpool2d(Tape<T>& t, Id x, int kernel, int stride, int pad);

template <typename T>
Id upsample_nearest2x(Tape<T>& t, Id x);

template <typename T>
Id reshape(Tape<T>& t, Id x, std::vector<int> new_shape);

// N x C x H x W -> (N*H*W) x C row matrix (location-major).
template <typename T>
Id nchw_to_rows(Tape<T>& t, Id x);

// Stacks row matrices with equal column counts.
template <typename T>
Id concat_rows(Tape<T>& t, const std::vector<Id>& xs);

// out[i] = x[indices[i]] (rows of a 2-D matrix).
template <typename T>
Id gather_rows(Tape<T>& t, Id x, std::vector<int> indices);

// x: N x K x H x W, labels[N] in [0,K) -> N x 1 x H x W.
template <typename T>
Id select_channel(Tape<T>& t, Id x, std::vector<int> labels);

// x: N x K, labels[N] -> N x 1.
template <typename T>
Id select_column(Tape<T>& t, Id x, std::vector<int> labels);

// Pools each RoI window into out_size x out_size bins; every bin averages
// sampling x sampling bilinear taps at regular sub-bin centers. Boxes are
// mapped to feature coordinates by dividing by 2^level (no rounding);
// out-of-range taps clamp to the feature border.
template <typename T>
Id roi_align(Tape<T>& t, const std::map<int, Id>& levels,
             const std::vector<RoiWindow>& rois, int out_size, int sampling);

// Single bilinear tap at continuous feature coordinates, x: 1 x C x H x W
// -> 1 x C. Border-clamped like roi_align.
template <typename T>
Id bilinear_point(Tape<T>& t, Id x, double px, double py);

// -- loss heads (scalar outputs) --------------------------------------------
// Targets are plain tensors, not tape nodes: no gradient flows into them.

// logits: M x K; class_targets[M] in [-1, K) with -1 = background. Sigmoid
// focal loss summed over locations and classes, divided by max(1, positives).
template <typename T>
Id focal_loss(Tape<T>& t, Id logits, const std::vector<int>& class_targets,
              T alpha, T gamma);

// pred/target: M x 4 positive (l,t,r,b) offsets sharing a location;
// -log IoU per row, weighted by `weights`, normalized by their sum.
template <typename T>
Id iou_loss(Tape<T>& t, Id pred, const Tensor<T>& target, const Tensor<T>& weights);

// Mean over all elements of the stable logit-form binary cross entropy.
template <typename T>
Id bce_mean(Tape<T>& t, Id logits, const Tensor<T>& targets);

template <typename T>
Id mse_mean(Tape<T>& t, Id pred, const Tensor<T>& target);

template <typename T>
Id add_scalars(Tape<T>& t, const std::vector<Id>& parts);

// Sum of every element -> scalar.
template <typename T>
Id sum_all(Tape<T>& t, Id x);

// -- plain helpers (no tape) -------------------------------------------------

// 4-neighbor bilinear interpolation with border clamping; x: 1 x C x H x W or
// C x H x W equivalent; writes C values.
template <typename T>
void bilinear_sample(const Tensor<T>& x, double px, double py, T* out);

template <typename T>
T sigmoid_scalar(T v);

}  // namespace centermask::ad
