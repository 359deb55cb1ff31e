// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Spatial-attention-guided mask branch: detections become RoIs assigned to a
// pyramid level, pooled by roi_align, passed through the conv stack + SAM
// gate + 2x upsample to class-specific 28x28 mask logits, scored by a
// mask-IoU head, and pasted back onto the image canvas.

#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "centermask/fcos_head.hpp"
#include "centermask/params.hpp"

namespace centermask {

struct AssignConfig {
    int k0 = 4;            // canonical-rule base level
    int canonical = 224;   // canonical-rule box size
    int k_min = 3;
    int k_max = 5;
    bool adaptive = true;  // scale-adaptive rule; false selects the canonical rule
};

struct MaskConfig {
    int conv_count = 4;       // 2 in lite
    int conv_channels = 256;  // 128 in lite
    int roi_size = 14;
    int mask_size = 28;
    int sampling = 2;  // roi_align taps per bin axis
    int class_count = 3;
    // mask-IoU scoring head: conv stack (last conv stride 2) + two FCs
    int maskiou_conv_count = 4;   // 2 in lite
    int maskiou_channels = 256;   // 128 in lite
    int maskiou_fc = 256;
    float paste_threshold = 0.5f;
};

struct Roi {
    int batch = 0;
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    int level = 3;
    Detection source;
};

// floor(k0 + log2(sqrt(w h) / canonical)), clamped to [k_min, k_max]
int assign_level_canonical(float w, float h, const AssignConfig& cfg);

// ceil(k_max - log2(A_input / A_RoI)), clamped to [k_min, k_max]
int assign_level_adaptive(float w, float h, float input_area, const AssignConfig& cfg);

// Drops zero-area boxes, assigns levels per the configured rule.
std::vector<Roi> make_rois(const std::vector<Detection>& dets, const AssignConfig& cfg,
                           int image_w, int image_h);

void register_mask_params(ParamStore& store, WeightInit& init, const MaskConfig& cfg,
                          int fpn_channels);

// gate = sigmoid(conv3x3(concat(maxpool_c(x), avgpool_c(x)))); out = gate (x) x
template <typename T>
ad::Id sam_forward(ad::Tape<T>& tape, ad::Id x, ad::Id w, ad::Id b);

// roi feature batch R x C x 14 x 14 -> mask logits R x K x 28 x 28
template <typename T>
ad::Id mask_head_forward(ad::Tape<T>& tape, Leaves<T>& params, ad::Id roi_features,
                         const MaskConfig& cfg);

// roi features + predicted-class mask probabilities (R x 1 x 28 x 28)
// -> R x K raw mask-IoU regressions (clamp to [0,1] at use)
template <typename T>
ad::Id maskiou_forward(ad::Tape<T>& tape, Leaves<T>& params, ad::Id roi_features, ad::Id mask_probs,
                       const MaskConfig& cfg);

// product recalibration; inputs validated to [0,1]
float recalibrate_score(float cls_score, float mask_iou);

// sigmoid(logits) resized into the clipped box on a zero canvas, thresholded.
// mask_logits: 28 x 28 (any shape with 28*28 values); returns H*W bytes in {0,1}.
std::vector<std::uint8_t> paste_mask(const Tensor<float>& mask_logits, float x1, float y1,
                                     float x2, float y2, int image_w, int image_h,
                                     float threshold);

}  // namespace centermask
