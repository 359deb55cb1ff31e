// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#include "centermask/backbone.hpp"

#include <stdexcept>

namespace centermask {

namespace {

std::string stage_prefix(int stage_index) {  // 0..3 -> stage2..stage5
    return "stage" + std::to_string(stage_index + 2);
}

int se_hidden(int channels, int reduction) {
    return std::max(1, channels / reduction);
}

}  // namespace

BackboneConfig make_backbone_config(const std::string& variant, bool lite) {
    BackboneConfig cfg;
    cfg.variant = variant;
    const std::array<int, 4> conv_ch{128, 160, 192, 224};
    const std::array<int, 4> out_ch{256, 512, 768, 1024};
    std::array<int, 4> modules{1, 1, 1, 1};
    int conv_count = 5;
    if (variant == "V2-19") {
        modules = {1, 1, 1, 1};
        conv_count = 3;
    } else if (variant == "V2-39") {
        modules = {1, 1, 2, 2};
    } else if (variant == "V2-57") {
        modules = {1, 1, 4, 3};
    } else if (variant == "V2-99") {
        modules = {1, 3, 9, 3};
    } else {
        throw std::invalid_argument("unknown backbone variant: " + variant);
    }
    for (int s = 0; s < 4; ++s) {
        cfg.stages[s].conv_count = conv_count;
        cfg.stages[s].conv_channels = conv_ch[s];
        cfg.stages[s].out_channels = out_ch[s];
        cfg.stages[s].module_count = modules[s];
        cfg.stages[s].residual = true;
        cfg.stages[s].attention = OsaConfig::Attention::kEse;
    }
    cfg.fpn_channels = lite ? 128 : 256;
    return cfg;
}

std::array<int, 4> backbone_stage_channels(const BackboneConfig& cfg) {
    return {cfg.stages[0].out_channels, cfg.stages[1].out_channels, cfg.stages[2].out_channels,
            cfg.stages[3].out_channels};
}

std::int64_t ese_param_count(int channels) {
    return static_cast<std::int64_t>(channels) * channels + channels;
}

std::int64_t se_param_count(int channels, int reduction) {
    const std::int64_t hidden = se_hidden(channels, reduction);
    return 2 * channels * hidden + hidden + channels;
}

void register_backbone_params(ParamStore& store, WeightInit& init, const BackboneConfig& cfg) {
    int in_ch = 3;
    for (int i = 0; i < 3; ++i) {
        const int out = cfg.stem_channels[static_cast<std::size_t>(i)];
        const std::string name = "stem.conv" + std::to_string(i + 1);
        store.add(name + ".w", init.he_normal({out, in_ch, 3, 3}, in_ch * 9));
        store.add(name + ".b", WeightInit::constant({out}, 0.0f));
        in_ch = out;
    }
    for (int s = 0; s < 4; ++s) {
        const OsaConfig& osa = cfg.stages[static_cast<std::size_t>(s)];
        for (int m = 1; m <= osa.module_count; ++m) {
            const std::string prefix = stage_prefix(s) + ".osa" + std::to_string(m);
            int ch = in_ch;
            for (int l = 1; l <= osa.conv_count; ++l) {
                const std::string cname = prefix + ".conv" + std::to_string(l);
                store.add(cname + ".w", init.he_normal({osa.conv_channels, ch, 3, 3}, ch * 9));
                store.add(cname + ".b", WeightInit::constant({osa.conv_channels}, 0.0f));
                ch = osa.conv_channels;
            }
            const int concat_ch = in_ch + osa.conv_count * osa.conv_channels;
            store.add(prefix + ".agg.w",
                      init.he_normal({osa.out_channels, concat_ch, 1, 1}, concat_ch));
            store.add(prefix + ".agg.b", WeightInit::constant({osa.out_channels}, 0.0f));
            if (osa.attention == OsaConfig::Attention::kEse) {
                store.add(prefix + ".ese.w",
                          init.normal({osa.out_channels, osa.out_channels}, 0.01f));
                store.add(prefix + ".ese.b",
                          WeightInit::constant({osa.out_channels}, cfg.ese_bias_init));
            } else if (osa.attention == OsaConfig::Attention::kSe) {
                const int hidden = se_hidden(osa.out_channels, osa.se_reduction);
                store.add(prefix + ".se.w1", init.normal({hidden, osa.out_channels}, 0.01f));
                store.add(prefix + ".se.b1", WeightInit::constant({hidden}, 0.0f));
                store.add(prefix + ".se.w2", init.normal({osa.out_channels, hidden}, 0.01f));
                store.add(prefix + ".se.b2",
                          WeightInit::constant({osa.out_channels}, cfg.ese_bias_init));
            }
            in_ch = osa.out_channels;
        }
    }

    const std::array<int, 4> stage_ch = backbone_stage_channels(cfg);
    const int F = cfg.fpn_channels;
    for (int k = 3; k <= 5; ++k) {
        const int c_in = stage_ch[static_cast<std::size_t>(k - 2)];
        store.add("fpn.lat" + std::to_string(k) + ".w", init.he_normal({F, c_in, 1, 1}, c_in));
        store.add("fpn.lat" + std::to_string(k) + ".b", WeightInit::constant({F}, 0.0f));
        store.add("fpn.out" + std::to_string(k) + ".w", init.he_normal({F, F, 3, 3}, F * 9));
        store.add("fpn.out" + std::to_string(k) + ".b", WeightInit::constant({F}, 0.0f));
    }
    store.add("fpn.p6.w", init.he_normal({F, F, 3, 3}, F * 9));
    store.add("fpn.p6.b", WeightInit::constant({F}, 0.0f));
    store.add("fpn.p7.w", init.he_normal({F, F, 3, 3}, F * 9));
    store.add("fpn.p7.b", WeightInit::constant({F}, 0.0f));
}

template <typename T>
ad::Id ese_forward(ad::Tape<T>& tape, ad::Id x_div, ad::Id w, ad::Id b) {
    const auto& xs = tape.value(x_div).shape();
    const auto& ws = tape.value(w).shape();
    if (ws.size() != 2 || ws[0] != ws[1] || ws[0] != xs[1])
        throw std::invalid_argument("ese_forward: weight must be square C x C");
    ad::Id pooled = ad::global_avg_pool(tape, x_div);
    ad::Id flat = ad::reshape(tape, pooled, {xs[0], xs[1]});
    ad::Id z = ad::fully_connected(tape, flat, w, b);
    ad::Id gate = ad::activation(tape, z, ad::Activation::kSigmoid);
    ad::Id gate4 = ad::reshape(tape, gate, {xs[0], xs[1], 1, 1});
    return ad::mul_channel_gate(tape, x_div, gate4);
}

template <typename T>
ad::Id se_forward(ad::Tape<T>& tape, ad::Id x, ad::Id w1, ad::Id b1, ad::Id w2, ad::Id b2) {
    const auto& xs = tape.value(x).shape();
    ad::Id pooled = ad::global_avg_pool(tape, x);
    ad::Id flat = ad::reshape(tape, pooled, {xs[0], xs[1]});
    ad::Id h = ad::fully_connected(tape, flat, w1, b1);
    h = ad::activation(tape, h, ad::Activation::kRelu);
    h = ad::fully_connected(tape, h, w2, b2);
    ad::Id gate = ad::activation(tape, h, ad::Activation::kSigmoid);
    ad::Id gate4 = ad::reshape(tape, gate, {xs[0], xs[1], 1, 1});
    return ad::mul_channel_gate(tape, x, gate4);
}

template <typename T>
ad::Id osa_forward(ad::Tape<T>& tape, Leaves<T>& params, ad::Id x, const OsaConfig& cfg,
                   const std::string& prefix) {
    const int in_ch = tape.value(x).shape()[1];
    std::vector<ad::Id> to_concat{x};
    ad::Id h = x;
    for (int l = 1; l <= cfg.conv_count; ++l) {
        const std::string cname = prefix + ".conv" + std::to_string(l);
        h = ad::conv2d(tape, h, params[cname + ".w"], params[cname + ".b"], 1, 1);
        h = ad::activation(tape, h, ad::Activation::kRelu);
        to_concat.push_back(h);
    }
    ad::Id cat = ad::concat_channels(tape, to_concat);
    ad::Id agg = ad::conv2d(tape, cat, params[prefix + ".agg.w"], params[prefix + ".agg.b"], 1, 0);
    agg = ad::activation(tape, agg, ad::Activation::kRelu);

    ad::Id refined = agg;
    if (cfg.attention == OsaConfig::Attention::kEse) {
        refined = ese_forward(tape, agg, params[prefix + ".ese.w"], params[prefix + ".ese.b"]);
    } else if (cfg.attention == OsaConfig::Attention::kSe) {
        refined = se_forward(tape, agg, params[prefix + ".se.w1"], params[prefix + ".se.b1"],
                             params[prefix + ".se.w2"], params[prefix + ".se.b2"]);
    }
    if (cfg.residual) {
        if (in_ch == cfg.out_channels) return ad::add(tape, refined, x);
        // identity addition impossible across widths; the first module of a
        // stage runs without the residual path
    }
    return refined;
}

template <typename T>
BackboneOut backbone_forward(ad::Tape<T>& tape, Leaves<T>& params, ad::Id image,
                             const BackboneConfig& cfg) {
    const auto& shape = tape.value(image).shape();
    if (shape.size() != 4 || shape[1] != 3)
        throw std::invalid_argument("backbone_forward: image must be N x 3 x H x W");
    if (shape[2] % 32 != 0 || shape[3] % 32 != 0)
        throw std::invalid_argument("backbone_forward: extents must be divisible by 32, got " +
                                    shape_to_string(shape));

    ad::Id h = image;
    for (int i = 0; i < 3; ++i) {
        const std::string name = "stem.conv" + std::to_string(i + 1);
        h = ad::conv2d(tape, h, params[name + ".w"], params[name + ".b"],
                       cfg.stem_strides[static_cast<std::size_t>(i)], 1);
        h = ad::activation(tape, h, ad::Activation::kRelu);
    }

    std::array<ad::Id, 4> outs{};
    for (int s = 0; s < 4; ++s) {
        if (s > 0) h = ad::maxpool2d(tape, h, 3, 2, 1);
        const OsaConfig& osa = cfg.stages[static_cast<std::size_t>(s)];
        for (int m = 1; m <= osa.module_count; ++m)
            h = osa_forward(tape, params, h, osa, stage_prefix(s) + ".osa" + std::to_string(m));
        outs[static_cast<std::size_t>(s)] = h;
    }
    return BackboneOut{outs[0], outs[1], outs[2], outs[3]};
}

template <typename T>
std::map<int, ad::Id> fpn_forward(ad::Tape<T>& tape, Leaves<T>& params, const BackboneOut& c,
                                  const BackboneConfig& cfg) {
    (void)cfg;
    const std::array<ad::Id, 3> cs{c.c3, c.c4, c.c5};
    std::array<ad::Id, 3> laterals{};
    for (int k = 3; k <= 5; ++k) {
        const std::string name = "fpn.lat" + std::to_string(k);
        laterals[static_cast<std::size_t>(k - 3)] =
            ad::conv2d(tape, cs[static_cast<std::size_t>(k - 3)], params[name + ".w"],
                       params[name + ".b"], 1, 0);
    }
    // top-down merge
    ad::Id m5 = laterals[2];
    ad::Id m4 = ad::add(tape, laterals[1], ad::upsample_nearest2x(tape, m5));
    ad::Id m3 = ad::add(tape, laterals[0], ad::upsample_nearest2x(tape, m4));

    std::map<int, ad::Id> pyramid;
    const std::array<ad::Id, 3> merged{m3, m4, m5};
    for (int k = 3; k <= 5; ++k) {
        const std::string name = "fpn.out" + std::to_string(k);
        pyramid[k] = ad::conv2d(tape, merged[static_cast<std::size_t>(k - 3)],
                                params[name + ".w"], params[name + ".b"], 1, 1);
    }
    pyramid[6] = ad::conv2d(tape, pyramid[5], params["fpn.p6.w"], params["fpn.p6.b"], 2, 1);
    ad::Id p6r = ad::activation(tape, pyramid[6], ad::Activation::kRelu);
    pyramid[7] = ad::conv2d(tape, p6r, params["fpn.p7.w"], params["fpn.p7.b"], 2, 1);
    return pyramid;
}

#define CENTERMASK_INSTANTIATE_BACKBONE(T)                                                    \
    template ad::Id ese_forward<T>(ad::Tape<T>&, ad::Id, ad::Id, ad::Id);                     \
    template ad::Id se_forward<T>(ad::Tape<T>&, ad::Id, ad::Id, ad::Id, ad::Id, ad::Id);      \
    template ad::Id osa_forward<T>(ad::Tape<T>&, Leaves<T>&, ad::Id, const OsaConfig&,        \
                                   const std::string&);                                       \
    template BackboneOut backbone_forward<T>(ad::Tape<T>&, Leaves<T>&, ad::Id,                \
                                             const BackboneConfig&);                          \
    template std::map<int, ad::Id> fpn_forward<T>(ad::Tape<T>&, Leaves<T>&, const BackboneOut&, \
                                                  const BackboneConfig&);

CENTERMASK_INSTANTIATE_BACKBONE(float)
CENTERMASK_INSTANTIATE_BACKBONE(double)

#undef CENTERMASK_INSTANTIATE_BACKBONE

}  // namespace centermask
