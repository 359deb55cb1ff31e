// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Target assignment and loss-side helpers. The differentiable loss kernels
// (focal, IoU, BCE, MSE) live on the tape; this module builds their targets.

#pragma once

#include <array>
#include <cstdint>
#include <tuple>
#include <vector>

#include "centermask/fcos_head.hpp"
#include "centermask/tensor.hpp"

namespace centermask {

struct GtBox {
    int label = 0;
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Per-level location targets, aligned with location_grid order.
struct LevelTargets {
    int level = 3;
    int h = 0, w = 0;
    std::vector<int> cls;                    // -1 = background
    std::vector<std::array<float, 4>> box;   // (l,t,r,b), meaningful at positives
    std::vector<float> centerness;           // meaningful at positives
};

// sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b))), offsets must be positive
float centerness_target(float l, float t, float r, float b);

// A location is positive for a box when it lies strictly inside it and
// max(l,t,r,b) falls inside its level's range; the smallest-area box wins.
// levels: (k, H, W) triples; range_splits as in HeadConfig.
std::vector<LevelTargets> fcos_assign_targets(const std::vector<GtBox>& gts,
                                              const std::vector<std::tuple<int, int, int>>& levels,
                                              const std::array<float, 6>& range_splits);

// Ground-truth mask cropped to the box, bilinearly resized to out x out,
// binarized at 0.5. gt_mask is H*W bytes in {0,1}.
Tensor<float> mask_target(const std::vector<std::uint8_t>& gt_mask, int image_w, int image_h,
                          float x1, float y1, float x2, float y2, int out);

// IoU of two binarized grids of equal shape (threshold 0.5); empty vs empty
// counts as 1.
float binary_mask_iou(const Tensor<float>& a, const Tensor<float>& b);

}  // namespace centermask
