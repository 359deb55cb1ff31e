// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "centermask/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "centermask/autodiff.hpp"

namespace centermask {

float centerness_target(float l, float t, float r, float b) {
    if (l <= 0.0f || t <= 0.0f || r <= 0.0f || b <= 0.0f)
        throw std::invalid_argument("centerness_target: offsets must be positive");
    const float lr = std::min(l, r) / std::max(l, r);
    const float tb = std::min(t, b) / std::max(t, b);
    return std::sqrt(lr * tb);
}

std::vector<LevelTargets> fcos_assign_targets(const std::vector<GtBox>& gts,
                                              const std::vector<std::tuple<int, int, int>>& levels,
                                              const std::array<float, 6>& range_splits) {
    std::vector<LevelTargets> out;
    for (std::size_t li = 0; li < levels.size(); ++li) {
        const auto [k, H, W] = levels[li];
        LevelTargets lt;
        lt.level = k;
        lt.h = H;
        lt.w = W;
        const std::size_t count = static_cast<std::size_t>(H) * W;
        lt.cls.assign(count, -1);
        lt.box.assign(count, {0, 0, 0, 0});
        lt.centerness.assign(count, 0.0f);

        const float range_lo = li == 0 ? 0.0f : range_splits[li - 1];
        const float range_hi = range_splits[li];
        const auto grid = location_grid(k, H, W);
        for (std::size_t p = 0; p < count; ++p) {
            const float x = grid[p].first;
            const float y = grid[p].second;
            float best_area = 0.0f;
            for (const GtBox& g : gts) {
                const float l = x - g.x1, t = y - g.y1, r = g.x2 - x, b = g.y2 - y;
                if (l <= 0.0f || t <= 0.0f || r <= 0.0f || b <= 0.0f) continue;
                const float m = std::max(std::max(l, t), std::max(r, b));
                if (m <= range_lo || m > range_hi) continue;
                const float area = (g.x2 - g.x1) * (g.y2 - g.y1);
                if (lt.cls[p] >= 0 && area >= best_area) continue;
                best_area = area;
                lt.cls[p] = g.label;
                lt.box[p] = {l, t, r, b};
                lt.centerness[p] = centerness_target(l, t, r, b);
            }
        }
        out.push_back(std::move(lt));
    }
    return out;
}

Tensor<float> mask_target(const std::vector<std::uint8_t>& gt_mask, int image_w, int image_h,
                          float x1, float y1, float x2, float y2, int out) {
    if (static_cast<int>(gt_mask.size()) != image_w * image_h)
        throw std::invalid_argument("mask_target: mask size does not match image extents");
    Tensor<float> mask({1, 1, image_h, image_w});
    for (std::int64_t i = 0; i < mask.size(); ++i)
        mask[i] = static_cast<float>(gt_mask[static_cast<std::size_t>(i)]);

    Tensor<float> target({1, 1, out, out});
    const float bw = x2 - x1;
    const float bh = y2 - y1;
    if (bw <= 0.0f || bh <= 0.0f) return target;
    for (int i = 0; i < out; ++i) {
        const double py = y1 + (i + 0.5) * bh / out - 0.5;
        for (int j = 0; j < out; ++j) {
            const double px = x1 + (j + 0.5) * bw / out - 0.5;
            float v = 0.0f;
            ad::bilinear_sample(mask, px, py, &v);
            target[static_cast<std::int64_t>(i) * out + j] = v >= 0.5f ? 1.0f : 0.0f;
        }
    }
    return target;
}

float binary_mask_iou(const Tensor<float>& a, const Tensor<float>& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("binary_mask_iou: shape mismatch");
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        const bool pa = a[i] >= 0.5f;
        const bool pb = b[i] >= 0.5f;
        inter += pa && pb;
        uni += pa || pb;
    }
    return uni == 0 ? 1.0f : static_cast<float>(inter) / static_cast<float>(uni);
}

}  // namespace centermask
