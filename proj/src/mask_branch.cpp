// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "centermask/mask_branch.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace centermask {

int assign_level_canonical(float w, float h, const AssignConfig& cfg) {
    if (w <= 0.0f || h <= 0.0f)
        throw std::invalid_argument("assign_level_canonical: extents must be positive");
    const double k = cfg.k0 + std::log2(std::sqrt(static_cast<double>(w) * h) / cfg.canonical);
    const int level = static_cast<int>(std::floor(k));
    return std::clamp(level, cfg.k_min, cfg.k_max);
}

int assign_level_adaptive(float w, float h, float input_area, const AssignConfig& cfg) {
    if (w <= 0.0f || h <= 0.0f || input_area <= 0.0f)
        throw std::invalid_argument("assign_level_adaptive: areas must be positive");
    const double roi_area = static_cast<double>(w) * h;
    const double k = cfg.k_max - std::log2(static_cast<double>(input_area) / roi_area);
    const int level = static_cast<int>(std::ceil(k));
    return std::clamp(level, cfg.k_min, cfg.k_max);
}

std::vector<Roi> make_rois(const std::vector<Detection>& dets, const AssignConfig& cfg,
                           int image_w, int image_h) {
    const float input_area = static_cast<float>(image_w) * static_cast<float>(image_h);
    std::vector<Roi> rois;
    for (const Detection& d : dets) {
        const float w = d.x2 - d.x1;
        const float h = d.y2 - d.y1;
        if (w <= 0.0f || h <= 0.0f) continue;
        Roi roi;
        roi.batch = d.batch;
        roi.x1 = d.x1;
        roi.y1 = d.y1;
        roi.x2 = d.x2;
        roi.y2 = d.y2;
        roi.level = cfg.adaptive ? assign_level_adaptive(w, h, input_area, cfg)
                                 : assign_level_canonical(w, h, cfg);
        roi.source = d;
        rois.push_back(roi);
    }
    return rois;
}

void register_mask_params(ParamStore& store, WeightInit& init, const MaskConfig& cfg,
                          int fpn_channels) {
    int ch = fpn_channels;
    for (int i = 1; i <= cfg.conv_count; ++i) {
        const std::string name = "mask.conv" + std::to_string(i);
        store.add(name + ".w", init.he_normal({cfg.conv_channels, ch, 3, 3}, ch * 9));
        store.add(name + ".b", WeightInit::constant({cfg.conv_channels}, 0.0f));
        ch = cfg.conv_channels;
    }
    store.add("mask.sam.w", init.normal({1, 2, 3, 3}, 0.1f));
    store.add("mask.sam.b", WeightInit::constant({1}, 0.0f));
    store.add("mask.deconv.w", init.he_normal({ch, ch, 2, 2}, ch * 4));
    store.add("mask.deconv.b", WeightInit::constant({ch}, 0.0f));
    store.add("mask.pred.w", init.normal({cfg.class_count, ch, 1, 1}, 0.01f));
    store.add("mask.pred.b", WeightInit::constant({cfg.class_count}, 0.0f));

    int mch = fpn_channels + 1;  // roi features plus the pooled mask plane
    for (int i = 1; i <= cfg.maskiou_conv_count; ++i) {
        const std::string name = "maskiou.conv" + std::to_string(i);
        store.add(name + ".w", init.he_normal({cfg.maskiou_channels, mch, 3, 3}, mch * 9));
        store.add(name + ".b", WeightInit::constant({cfg.maskiou_channels}, 0.0f));
        mch = cfg.maskiou_channels;
    }
    const int half = cfg.roi_size / 2;  // stride-2 final conv: 14 -> 7
    store.add("maskiou.fc1.w",
              init.he_normal({cfg.maskiou_fc, mch * half * half}, mch * half * half));
    store.add("maskiou.fc1.b", WeightInit::constant({cfg.maskiou_fc}, 0.0f));
    store.add("maskiou.fc2.w", init.normal({cfg.class_count, cfg.maskiou_fc}, 0.01f));
    store.add("maskiou.fc2.b", WeightInit::constant({cfg.class_count}, 0.0f));
}

template <typename T>
ad::Id sam_forward(ad::Tape<T>& tape, ad::Id x, ad::Id w, ad::Id b) {
    ad::Id pmax = ad::reduce_channel(tape, x, ad::ReduceMode::kMax);
    ad::Id pavg = ad::reduce_channel(tape, x, ad::ReduceMode::kAvg);
    ad::Id cat = ad::concat_channels(tape, {pmax, pavg});
    ad::Id z = ad::conv2d(tape, cat, w, b, 1, 1);
    ad::Id gate = ad::activation(tape, z, ad::Activation::kSigmoid);
    return ad::mul_spatial_gate(tape, x, gate);
}

template <typename T>
ad::Id mask_head_forward(ad::Tape<T>& tape, Leaves<T>& params, ad::Id roi_features,
                         const MaskConfig& cfg) {
    ad::Id h = roi_features;
    for (int i = 1; i <= cfg.conv_count; ++i) {
        const std::string name = "mask.conv" + std::to_string(i);
        h = ad::conv2d(tape, h, params[name + ".w"], params[name + ".b"], 1, 1);
        h = ad::activation(tape, h, ad::Activation::kRelu);
    }
    h = sam_forward(tape, h, params["mask.sam.w"], params["mask.sam.b"]);
    h = ad::deconv2d_2x2(tape, h, params["mask.deconv.w"], params["mask.deconv.b"]);
    return ad::conv2d(tape, h, params["mask.pred.w"], params["mask.pred.b"], 1, 0);
}

template <typename T>
ad::Id maskiou_forward(ad::Tape<T>& tape, Leaves<T>& params, ad::Id roi_features, ad::Id mask_probs,
                       const MaskConfig& cfg) {
    ad::Id pooled = ad::maxpool2d(tape, mask_probs, 2, 2, 0);  // 28 -> 14
    ad::Id h = ad::concat_channels(tape, {roi_features, pooled});
    for (int i = 1; i <= cfg.maskiou_conv_count; ++i) {
        const std::string name = "maskiou.conv" + std::to_string(i);
        const int stride = (i == cfg.maskiou_conv_count) ? 2 : 1;
        h = ad::conv2d(tape, h, params[name + ".w"], params[name + ".b"], stride, 1);
        h = ad::activation(tape, h, ad::Activation::kRelu);
    }
    const auto shape = tape.value(h).shape();
    ad::Id flat = ad::reshape(tape, h, {shape[0], shape[1] * shape[2] * shape[3]});
    ad::Id f1 = ad::fully_connected(tape, flat, params["maskiou.fc1.w"], params["maskiou.fc1.b"]);
    f1 = ad::activation(tape, f1, ad::Activation::kRelu);
    return ad::fully_connected(tape, f1, params["maskiou.fc2.w"], params["maskiou.fc2.b"]);
}

float recalibrate_score(float cls_score, float mask_iou) {
    if (cls_score < 0.0f || cls_score > 1.0f)
        throw std::invalid_argument("recalibrate_score: classification score outside [0,1]");
    if (mask_iou < 0.0f || mask_iou > 1.0f)
        throw std::invalid_argument("recalibrate_score: mask IoU outside [0,1]");
    return cls_score * mask_iou;
}

std::vector<std::uint8_t> paste_mask(const Tensor<float>& mask_logits, float x1, float y1,
                                     float x2, float y2, int image_w, int image_h,
                                     float threshold) {
    std::vector<std::uint8_t> canvas(static_cast<std::size_t>(image_w) * image_h, 0);
    const auto& shape = mask_logits.shape();
    const int mh = shape[shape.size() - 2];
    const int mw = shape[shape.size() - 1];
    const float bw = x2 - x1;
    const float bh = y2 - y1;
    if (bw <= 0.0f || bh <= 0.0f) return canvas;  // zero-area box -> empty mask

    Tensor<float> probs({1, 1, mh, mw});
    for (std::int64_t i = 0; i < probs.size(); ++i)
        probs[i] = ad::sigmoid_scalar(mask_logits[i]);

    const int px0 = std::max(0, static_cast<int>(std::floor(x1)));
    const int px1 = std::min(image_w, static_cast<int>(std::ceil(x2)));
    const int py0 = std::max(0, static_cast<int>(std::floor(y1)));
    const int py1 = std::min(image_h, static_cast<int>(std::ceil(y2)));
    for (int py = py0; py < py1; ++py) {
        const double my = (py + 0.5 - y1) / bh * mh - 0.5;
        for (int px = px0; px < px1; ++px) {
            const double mx = (px + 0.5 - x1) / bw * mw - 0.5;
            float v = 0.0f;
            ad::bilinear_sample(probs, mx, my, &v);
            if (v >= threshold)
                canvas[static_cast<std::size_t>(py) * image_w + px] = 1;
        }
    }
    return canvas;
}

#define CENTERMASK_INSTANTIATE_MASK(T)                                                        \
    template ad::Id sam_forward<T>(ad::Tape<T>&, ad::Id, ad::Id, ad::Id);                     \
    template ad::Id mask_head_forward<T>(ad::Tape<T>&, Leaves<T>&, ad::Id, const MaskConfig&); \
    template ad::Id maskiou_forward<T>(ad::Tape<T>&, Leaves<T>&, ad::Id, ad::Id,              \
                                       const MaskConfig&);

CENTERMASK_INSTANTIATE_MASK(float)
CENTERMASK_INSTANTIATE_MASK(double)

#undef CENTERMASK_INSTANTIATE_MASK

}  // namespace centermask
