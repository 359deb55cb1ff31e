// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "centermask/fcos_head.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace centermask {

void register_head_params(ParamStore& store, WeightInit& init, const HeadConfig& cfg,
                          int fpn_channels) {
    int in_ch = fpn_channels;
    for (int i = 1; i <= cfg.tower_depth; ++i) {
        for (const char* tower : {"cls_tower", "box_tower"}) {
            const std::string name =
                std::string("head.") + tower + ".conv" + std::to_string(i);
            store.add(name + ".w",
                      init.he_normal({cfg.tower_channels, in_ch, 3, 3}, in_ch * 9));
            store.add(name + ".b", WeightInit::constant({cfg.tower_channels}, 0.0f));
        }
        in_ch = cfg.tower_channels;
    }
    // focal-style prior: every location starts out predicting background
    const float prior = 0.01f;
    const float cls_bias = -std::log((1.0f - prior) / prior);
    store.add("head.cls_pred.w",
              init.normal({cfg.class_count, cfg.tower_channels, 3, 3}, 0.01f));
    store.add("head.cls_pred.b", WeightInit::constant({cfg.class_count}, cls_bias));
    store.add("head.box_pred.w", init.normal({4, cfg.tower_channels, 3, 3}, 0.01f));
    store.add("head.box_pred.b", WeightInit::constant({4}, 0.0f));
    store.add("head.ctr_pred.w", init.normal({1, cfg.tower_channels, 3, 3}, 0.01f));
    store.add("head.ctr_pred.b", WeightInit::constant({1}, 0.0f));
    for (int k = 3; k <= 7; ++k)
        store.add("head.scale.p" + std::to_string(k), WeightInit::constant({1}, 1.0f));
}

template <typename T>
std::map<int, HeadLevelOut> head_forward(ad::Tape<T>& tape, Leaves<T>& params,
                                         const std::map<int, ad::Id>& pyramid,
                                         const HeadConfig& cfg) {
    std::map<int, HeadLevelOut> out;
    for (const auto& [k, p] : pyramid) {
        ad::Id cls = p;
        ad::Id box = p;
        for (int i = 1; i <= cfg.tower_depth; ++i) {
            const std::string ci = ".conv" + std::to_string(i);
            cls = ad::conv2d(tape, cls, params["head.cls_tower" + ci + ".w"],
                             params["head.cls_tower" + ci + ".b"], 1, 1);
            cls = ad::activation(tape, cls, ad::Activation::kRelu);
            box = ad::conv2d(tape, box, params["head.box_tower" + ci + ".w"],
                             params["head.box_tower" + ci + ".b"], 1, 1);
            box = ad::activation(tape, box, ad::Activation::kRelu);
        }
        HeadLevelOut lvl;
        lvl.cls_logits =
            ad::conv2d(tape, cls, params["head.cls_pred.w"], params["head.cls_pred.b"], 1, 1);
        lvl.ctr_logits =
            ad::conv2d(tape, box, params["head.ctr_pred.w"], params["head.ctr_pred.b"], 1, 1);
        ad::Id raw =
            ad::conv2d(tape, box, params["head.box_pred.w"], params["head.box_pred.b"], 1, 1);
        raw = ad::mul_scalar_param(tape, raw, params["head.scale.p" + std::to_string(k)]);
        lvl.offsets = ad::exp_clamped(tape, raw);
        out[k] = lvl;
    }
    return out;
}

std::vector<std::pair<float, float>> location_grid(int level, int height, int width) {
    if (level < 3 || level > 7) throw std::invalid_argument("location_grid: level must be in [3,7]");
    const float s = static_cast<float>(1 << level);
    std::vector<std::pair<float, float>> grid;
    grid.reserve(static_cast<std::size_t>(height) * width);
    for (int i = 0; i < height; ++i)
        for (int j = 0; j < width; ++j)
            grid.emplace_back(s / 2 + j * s, s / 2 + i * s);
    return grid;
}

float box_iou(float ax1, float ay1, float ax2, float ay2, float bx1, float by1, float bx2,
              float by2) {
    const float iw = std::min(ax2, bx2) - std::max(ax1, bx1);
    const float ih = std::min(ay2, by2) - std::max(ay1, by1);
    if (iw <= 0.0f || ih <= 0.0f) return 0.0f;
    const float inter = iw * ih;
    const float area_a = (ax2 - ax1) * (ay2 - ay1);
    const float area_b = (bx2 - bx1) * (by2 - by1);
    const float uni = area_a + area_b - inter;
    return uni > 0.0f ? inter / uni : 0.0f;
}

namespace {

float sigmoidf(float z) {
    if (z >= 0.0f) return 1.0f / (1.0f + std::exp(-z));
    const float e = std::exp(z);
    return e / (1.0f + e);
}

}  // namespace

std::vector<Detection> decode_detections(const std::vector<RawLevelOutput>& raw,
                                         const HeadConfig& cfg, int image_w, int image_h,
                                         int budget) {
    std::vector<Detection> candidates;
    for (const RawLevelOutput& lv : raw) {
        const int K = lv.cls_logits.dim(0);
        const int H = lv.cls_logits.dim(1);
        const int W = lv.cls_logits.dim(2);
        const auto grid = location_grid(lv.level, H, W);
        const std::size_t HW = static_cast<std::size_t>(H) * W;
        for (std::size_t p = 0; p < HW; ++p) {
            const float pctr = sigmoidf(lv.ctr_logits[static_cast<std::int64_t>(p)]);
            const float x = grid[p].first;
            const float y = grid[p].second;
            const float l = lv.offsets[static_cast<std::int64_t>(0 * HW + p)];
            const float t = lv.offsets[static_cast<std::int64_t>(1 * HW + p)];
            const float r = lv.offsets[static_cast<std::int64_t>(2 * HW + p)];
            const float b = lv.offsets[static_cast<std::int64_t>(3 * HW + p)];
            for (int k = 0; k < K; ++k) {
                const float pcls = sigmoidf(lv.cls_logits[static_cast<std::int64_t>(k * HW + p)]);
                float score;
                if (cfg.centerness_before_nms) {
                    score = pcls * pctr;
                    if (cfg.sqrt_score) score = std::sqrt(score);
                } else {
                    score = pcls;
                }
                if (score < cfg.score_threshold) continue;
                Detection d;
                d.x1 = std::max(0.0f, std::min(x - l, static_cast<float>(image_w)));
                d.y1 = std::max(0.0f, std::min(y - t, static_cast<float>(image_h)));
                d.x2 = std::max(0.0f, std::min(x + r, static_cast<float>(image_w)));
                d.y2 = std::max(0.0f, std::min(y + b, static_cast<float>(image_h)));
                d.label = k;
                d.score = score;
                d.level = lv.level;
                d.centerness = pctr;
                candidates.push_back(d);
            }
        }
    }
    std::vector<Detection> kept = nms(candidates, cfg.nms_iou, budget);
    if (!cfg.centerness_before_nms)
        for (Detection& d : kept) d.score *= d.centerness;
    return kept;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold, int budget) {
    if (budget < 1) throw std::invalid_argument("nms: budget must be >= 1");
    std::vector<int> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return dets[static_cast<std::size_t>(a)].score > dets[static_cast<std::size_t>(b)].score;
    });
    std::vector<Detection> kept;
    for (int idx : order) {
        const Detection& d = dets[static_cast<std::size_t>(idx)];
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.label != d.label || k.batch != d.batch) continue;
            if (box_iou(k.x1, k.y1, k.x2, k.y2, d.x1, d.y1, d.x2, d.y2) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    if (static_cast<int>(kept.size()) > budget) kept.resize(static_cast<std::size_t>(budget));
    return kept;
}

template std::map<int, HeadLevelOut> head_forward<float>(ad::Tape<float>&, Leaves<float>&,
                                                         const std::map<int, ad::Id>&,
                                                         const HeadConfig&);
template std::map<int, HeadLevelOut> head_forward<double>(ad::Tape<double>&, Leaves<double>&,
                                                          const std::map<int, ad::Id>&,
                                                          const HeadConfig&);

}  // namespace centermask
