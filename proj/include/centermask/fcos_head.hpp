// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Anchor-free per-pixel detection head: classification and box towers shared
// across pyramid levels, centerness predicted from the box tower, exp-scaled
// positive offsets, score filtering and greedy NMS.

#pragma once

#include <map>
#include <vector>

#include "centermask/backbone.hpp"
#include "centermask/params.hpp"

namespace centermask {

struct HeadConfig {
    int tower_depth = 4;       // 2 in lite
    int tower_channels = 256;  // 128 in lite
    int class_count = 3;
    float score_threshold = 0.03f;
    float nms_iou = 0.6f;
    int max_detections_train = 100;
    int max_detections_infer = 50;
    // centerness joins the score before NMS ordering (config switch; the
    // alternative multiplies it in after suppression)
    bool centerness_before_nms = true;
    bool sqrt_score = false;  // score = sqrt(p_cls * p_ctr) instead of the plain product
    // regression range per level P3..P7: positives have max(l,t,r,b) inside
    std::array<float, 6> level_range_splits{64.0f, 128.0f, 256.0f, 512.0f, 1e8f, 0.0f};
};

struct Detection {
    float x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    int label = 0;
    float score = 0;
    int level = 3;
    float centerness = 0;
    int batch = 0;
};

void register_head_params(ParamStore& store, WeightInit& init, const HeadConfig& cfg,
                          int fpn_channels);

struct HeadLevelOut {
    ad::Id cls_logits;  // N x K x H x W
    ad::Id ctr_logits;  // N x 1 x H x W
    ad::Id offsets;     // N x 4 x H x W, positive (l,t,r,b) in image pixels
};

template <typename T>
std::map<int, HeadLevelOut> head_forward(ad::Tape<T>& tape, Leaves<T>& params,
                                         const std::map<int, ad::Id>& pyramid,
                                         const HeadConfig& cfg);

// cell (i, j) of level k maps to image point (s/2 + j*s, s/2 + i*s), s = 2^k,
// in row-major cell order.
std::vector<std::pair<float, float>> location_grid(int level, int height, int width);

// Host-side single-image raw outputs for decoding.
struct RawLevelOutput {
    int level = 3;
    Tensor<float> cls_logits;  // K x H x W
    Tensor<float> ctr_logits;  // 1 x H x W
    Tensor<float> offsets;     // 4 x H x W
};

// Threshold, decode to image-space boxes, clip, run class-wise NMS, truncate
// to the budget. Detections come back sorted by descending score.
std::vector<Detection> decode_detections(const std::vector<RawLevelOutput>& raw,
                                         const HeadConfig& cfg, int image_w, int image_h,
                                         int budget);

std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold, int budget);

float box_iou(float ax1, float ay1, float ax2, float ay2, float bx1, float by1, float bx2,
              float by2);

}  // namespace centermask
