// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// VoVNet-style backbone: a three-conv stem, four stages of one-shot
// aggregation (OSA) modules with optional residual connection and channel
// attention, and the P3..P7 feature pyramid on top.

#pragma once

#include <array>
#include <map>
#include <string>

#include "centermask/params.hpp"

namespace centermask {

struct OsaConfig {
    enum class Attention { kNone, kSe, kEse };

    int conv_count = 5;      // 3x3 convs per module (3 for the 19 variant)
    int conv_channels = 128; // width of each 3x3 conv
    int out_channels = 256;  // width after the 1x1 aggregation
    int module_count = 1;    // OSA modules in the stage
    bool residual = true;    // identity path; active only when in == out
    Attention attention = Attention::kEse;
    int se_reduction = 16;
};

struct BackboneConfig {
    std::string variant = "V2-19";
    std::array<int, 3> stem_channels{64, 64, 128};
    std::array<int, 3> stem_strides{2, 2, 1};  // overall stem stride 4
    std::array<OsaConfig, 4> stages;           // producing C2..C5
    int fpn_channels = 256;                    // 128 in the lite configuration
    float ese_bias_init = 2.0f;                // keeps early gates near open
};

// Variant tables for V2-19 / V2-39 / V2-57 / V2-99; lite halves FPN width.
BackboneConfig make_backbone_config(const std::string& variant, bool lite);

void register_backbone_params(ParamStore& store, WeightInit& init, const BackboneConfig& cfg);

// channels of C2..C5 given a config
std::array<int, 4> backbone_stage_channels(const BackboneConfig& cfg);

std::int64_t ese_param_count(int channels);
std::int64_t se_param_count(int channels, int reduction);

struct BackboneOut {
    ad::Id c2, c3, c4, c5;
};

// gate = sigmoid(FC(gap(x_div))), full channel width; output gate (x) x_div
template <typename T>
ad::Id ese_forward(ad::Tape<T>& tape, ad::Id x_div, ad::Id w, ad::Id b);

// classic reduce-then-expand channel gate
template <typename T>
ad::Id se_forward(ad::Tape<T>& tape, ad::Id x, ad::Id w1, ad::Id b1, ad::Id w2, ad::Id b2);

template <typename T>
ad::Id osa_forward(ad::Tape<T>& tape, Leaves<T>& params, ad::Id x, const OsaConfig& cfg,
                   const std::string& prefix);

// image N x 3 x H x W with H, W divisible by 32 -> C2..C5 (strides 4/8/16/32)
template <typename T>
BackboneOut backbone_forward(ad::Tape<T>& tape, Leaves<T>& params, ad::Id image,
                             const BackboneConfig& cfg);

// C3..C5 -> P3..P7 feature pyramid at fpn_channels
template <typename T>
std::map<int, ad::Id> fpn_forward(ad::Tape<T>& tape, Leaves<T>& params, const BackboneOut& c,
                                  const BackboneConfig& cfg);

}  // namespace centermask
