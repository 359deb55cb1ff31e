// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "centermask/backbone.hpp"
#include "centermask/gradcheck.hpp"

using namespace centermask;
namespace ad = centermask::ad;

namespace {

Tensor<float> random_tensor(std::vector<int> shape, std::uint32_t seed, float lo = -1.0f,
                            float hi = 1.0f) {
    Tensor<float> t(std::move(shape));
    std::mt19937 rng(seed);
    std::uniform_real_distribution<float> dist(lo, hi);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

}  // namespace

TEST_CASE("ese: zero weights gate everything by exactly 0.5") {
    ad::Tape<float> tape;
    Tensor<float> x = random_tensor({2, 3, 4, 4}, 1);
    ad::Id y = ese_forward(tape, tape.leaf(x), tape.leaf(Tensor<float>({3, 3})),
                           tape.leaf(Tensor<float>({3})));
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == 0.5f * x[i]);
}

TEST_CASE("ese: saturated bias passes the input through") {
    ad::Tape<float> tape;
    Tensor<float> x = random_tensor({1, 4, 3, 3}, 2);
    Tensor<float> b({4});
    b.fill(20.0f);
    ad::Id y = ese_forward(tape, tape.leaf(x), tape.leaf(Tensor<float>({4, 4})), tape.leaf(b));
    for (std::int64_t i = 0; i < x.size(); ++i)
        CHECK(std::abs(tape.value(y)[i] - x[i]) < 1e-6f);
}

TEST_CASE("ese: identity weight on constant channels gives sigmoid of the channel mean") {
    ad::Tape<float> tape;
    Tensor<float> x({1, 2, 2, 2});
    for (int i = 0; i < 4; ++i) x[i] = 0.0f;
    for (int i = 4; i < 8; ++i) x[i] = 4.0f;
    Tensor<float> eye({2, 2});
    eye[0] = 1.0f;
    eye[3] = 1.0f;
    ad::Id y = ese_forward(tape, tape.leaf(x), tape.leaf(eye), tape.leaf(Tensor<float>({2})));
    // gates: sigmoid(0) = 0.5, sigmoid(4) = 0.98201
    CHECK(tape.value(y)[0] == doctest::Approx(0.0f));
    CHECK(tape.value(y)[4] == doctest::Approx(4.0f * 0.98201f).epsilon(1e-4));
}

TEST_CASE("ese gate lies in (0,1) and never amplifies") {
    ad::Tape<float> tape;
    Tensor<float> x = random_tensor({2, 5, 4, 4}, 3, -3.0f, 3.0f);
    Tensor<float> w = random_tensor({5, 5}, 4);
    Tensor<float> b = random_tensor({5}, 5);
    ad::Id y = ese_forward(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b));
    for (std::int64_t i = 0; i < x.size(); ++i)
        CHECK(std::abs(tape.value(y)[i]) <= std::abs(x[i]));
}

TEST_CASE("ese rejects non-square weights") {
    ad::Tape<float> tape;
    ad::Id x = tape.leaf(random_tensor({1, 3, 2, 2}, 6));
    CHECK_THROWS(ese_forward(tape, x, tape.leaf(Tensor<float>({3, 2})),
                             tape.leaf(Tensor<float>({3}))));
}

TEST_CASE("se: zero weights halve the input; hidden width floors to >= 1") {
    ad::Tape<float> tape;
    Tensor<float> x = random_tensor({1, 16, 2, 2}, 7);
    // C=16, r=16 -> hidden width 1
    ad::Id y = se_forward(tape, tape.leaf(x), tape.leaf(Tensor<float>({1, 16})),
                          tape.leaf(Tensor<float>({1})), tape.leaf(Tensor<float>({16, 1})),
                          tape.leaf(Tensor<float>({16})));
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == 0.5f * x[i]);
}

TEST_CASE("se with hidden width 1 matches a scalar hand trace") {
    ad::Tape<float> tape;
    Tensor<float> x = random_tensor({1, 16, 3, 3}, 8);
    Tensor<float> w1 = random_tensor({1, 16}, 9);
    Tensor<float> b1 = random_tensor({1}, 10);
    Tensor<float> w2 = random_tensor({16, 1}, 11);
    Tensor<float> b2 = random_tensor({16}, 12);
    ad::Id y = se_forward(tape, tape.leaf(x), tape.leaf(w1), tape.leaf(b1), tape.leaf(w2),
                          tape.leaf(b2));
    // hand trace with plain scalar arithmetic
    double means[16];
    for (int c = 0; c < 16; ++c) {
        double acc = 0;
        for (int i = 0; i < 9; ++i) acc += x[c * 9 + i];
        means[c] = acc / 9.0;
    }
    double hidden = b1[0];
    for (int c = 0; c < 16; ++c) hidden += w1[c] * means[c];
    hidden = std::max(hidden, 0.0);
    for (int c = 0; c < 16; ++c) {
        const double z = w2[c] * hidden + b2[c];
        const double gate = 1.0 / (1.0 + std::exp(-z));
        for (int i = 0; i < 9; ++i)
            CHECK(std::abs(tape.value(y)[c * 9 + i] - gate * x[c * 9 + i]) <= 1e-6);
    }
}

TEST_CASE("attention parameter counts") {
    // C=32, r=16: SE holds 2*(32*2) + 2 + 32 = 162 values, eSE 32*32 + 32 = 1056
    CHECK(se_param_count(32, 16) == 162);
    CHECK(ese_param_count(32) == 1056);
    for (int c : {256, 512, 768, 1024}) {
        CHECK(ese_param_count(c) == static_cast<std::int64_t>(c) * c + c);
        CHECK(ese_param_count(c) > se_param_count(c, 16));
    }
    // registered tensors agree with the formulas
    ParamStore store;
    WeightInit init(13);
    BackboneConfig cfg = make_backbone_config("V2-19", false);
    register_backbone_params(store, init, cfg);
    const auto& w = store.get("stage2.osa1.ese.w").value;
    const auto& b = store.get("stage2.osa1.ese.b").value;
    CHECK(w.size() + b.size() == ese_param_count(cfg.stages[0].out_channels));
}

TEST_CASE("osa: residual with zero branch weights is the exact identity") {
    OsaConfig cfg;
    cfg.conv_count = 2;
    cfg.conv_channels = 4;
    cfg.out_channels = 6;
    cfg.residual = true;
    cfg.attention = OsaConfig::Attention::kNone;

    ParamStore store;
    // all-zero weights of the right shapes
    store.add("m.conv1.w", Tensor<float>({4, 6, 3, 3}));
    store.add("m.conv1.b", Tensor<float>({4}));
    store.add("m.conv2.w", Tensor<float>({4, 4, 3, 3}));
    store.add("m.conv2.b", Tensor<float>({4}));
    store.add("m.agg.w", Tensor<float>({6, 14, 1, 1}));
    store.add("m.agg.b", Tensor<float>({6}));

    ad::Tape<float> tape;
    Leaves<float> leaves(tape, store);
    Tensor<float> x = random_tensor({1, 6, 5, 5}, 21);
    ad::Id y = osa_forward(tape, leaves, tape.leaf(x), cfg, "m");
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == x[i]);
}

TEST_CASE("osa: residual with zero branch weights and eSE attention is still the identity") {
    OsaConfig cfg;
    cfg.conv_count = 1;
    cfg.conv_channels = 3;
    cfg.out_channels = 4;
    cfg.residual = true;
    cfg.attention = OsaConfig::Attention::kEse;

    ParamStore store;
    store.add("m.conv1.w", Tensor<float>({3, 4, 3, 3}));
    store.add("m.conv1.b", Tensor<float>({3}));
    store.add("m.agg.w", Tensor<float>({4, 7, 1, 1}));
    store.add("m.agg.b", Tensor<float>({4}));
    store.add("m.ese.w", Tensor<float>({4, 4}));
    store.add("m.ese.b", Tensor<float>({4}));

    ad::Tape<float> tape;
    Leaves<float> leaves(tape, store);
    Tensor<float> x = random_tensor({1, 4, 4, 4}, 22);
    ad::Id y = osa_forward(tape, leaves, tape.leaf(x), cfg, "m");
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(tape.value(y)[i] == x[i]);
}

TEST_CASE("osa concat width is input plus conv_count x conv_channels") {
    ParamStore store;
    WeightInit init(23);
    BackboneConfig cfg = make_backbone_config("V2-39", false);
    register_backbone_params(store, init, cfg);
    // stage2: input 128, conv 5 x 128 -> aggregation sees 128 + 5*128
    CHECK(store.get("stage2.osa1.agg.w").value.shape() ==
          std::vector<int>{256, 128 + 5 * 128, 1, 1});
    // V2-19 stage2: 128 + 3*128
    ParamStore store19;
    WeightInit init19(24);
    register_backbone_params(store19, init19, make_backbone_config("V2-19", false));
    CHECK(store19.get("stage2.osa1.agg.w").value.shape() ==
          std::vector<int>{256, 128 + 3 * 128, 1, 1});
}

TEST_CASE("osa on a single pixel matches a hand-composed conv+concat+conv trace") {
    OsaConfig cfg;
    cfg.conv_count = 1;
    cfg.conv_channels = 2;
    cfg.out_channels = 3;
    cfg.residual = false;
    cfg.attention = OsaConfig::Attention::kNone;

    ParamStore store;
    WeightInit init(25);
    Tensor<float> w1 = init.normal({2, 2, 3, 3}, 0.7f);
    Tensor<float> b1 = init.normal({2}, 0.3f);
    Tensor<float> wa = init.normal({3, 4, 1, 1}, 0.7f);
    Tensor<float> ba = init.normal({3}, 0.3f);
    store.add("m.conv1.w", w1);
    store.add("m.conv1.b", b1);
    store.add("m.agg.w", wa);
    store.add("m.agg.b", ba);

    Tensor<float> x = random_tensor({1, 2, 1, 1}, 26);
    ad::Tape<float> tape;
    Leaves<float> leaves(tape, store);
    ad::Id y = osa_forward(tape, leaves, tape.leaf(x), cfg, "m");

    // by hand: 3x3 conv on a lone pixel uses only the kernel center
    double h[2];
    for (int co = 0; co < 2; ++co) {
        double acc = b1[co];
        for (int c = 0; c < 2; ++c) acc += w1.at(co, c, 1, 1) * x[c];
        h[co] = std::max(acc, 0.0);
    }
    const double cat[4] = {x[0], x[1], h[0], h[1]};
    for (int co = 0; co < 3; ++co) {
        double acc = ba[co];
        for (int c = 0; c < 4; ++c) acc += wa[co * 4 + c] * cat[c];
        acc = std::max(acc, 0.0);
        CHECK(std::abs(tape.value(y)[co] - acc) <= 1e-6);
    }
}

TEST_CASE("backbone: stage extents, strides, and the zero network") {
    BackboneConfig cfg = make_backbone_config("V2-19", true);
    ParamStore store;
    WeightInit init(31);
    register_backbone_params(store, init, cfg);

    ad::Tape<float> tape;
    Leaves<float> leaves(tape, store);
    Tensor<float> img = random_tensor({1, 3, 64, 64}, 32);
    BackboneOut outs = backbone_forward(tape, leaves, tape.leaf(img), cfg);
    CHECK(tape.value(outs.c2).shape() == std::vector<int>{1, 256, 16, 16});
    CHECK(tape.value(outs.c3).shape() == std::vector<int>{1, 512, 8, 8});
    CHECK(tape.value(outs.c4).shape() == std::vector<int>{1, 768, 4, 4});
    CHECK(tape.value(outs.c5).shape() == std::vector<int>{1, 1024, 2, 2});
    // stride of C5 = 64 / 2 = 32 = 2^5

    // indivisible extents are rejected
    ad::Tape<float> tape2;
    Leaves<float> leaves2(tape2, store);
    CHECK_THROWS(backbone_forward(tape2, leaves2, tape2.leaf(random_tensor({1, 3, 60, 64}, 33)),
                                  cfg));

    // all-zero weights, residual off -> all-zero features of the right shape
    BackboneConfig zcfg = cfg;
    for (auto& s : zcfg.stages) {
        s.residual = false;
        s.attention = OsaConfig::Attention::kNone;
    }
    ParamStore zstore;
    WeightInit zinit(34);
    register_backbone_params(zstore, zinit, zcfg);
    for (const auto& name : zstore.names()) zstore.get(name).value.fill(0.0f);
    ad::Tape<float> tape3;
    Leaves<float> leaves3(tape3, zstore);
    BackboneOut zouts = backbone_forward(tape3, leaves3, tape3.leaf(img), zcfg);
    for (ad::Id id : {zouts.c2, zouts.c3, zouts.c4, zouts.c5})
        for (std::int64_t i = 0; i < tape3.value(id).size(); ++i)
            CHECK(tape3.value(id)[i] == 0.0f);
}

TEST_CASE("fpn: level widths, shapes, zero network, and top-down wiring") {
    BackboneConfig cfg = make_backbone_config("V2-19", true);
    REQUIRE(cfg.fpn_channels == 128);
    ParamStore store;
    WeightInit init(41);
    register_backbone_params(store, init, cfg);

    ad::Tape<float> tape;
    Leaves<float> leaves(tape, store);
    Tensor<float> img = random_tensor({1, 3, 64, 64}, 42, -0.5f, 0.5f);
    BackboneOut outs = backbone_forward(tape, leaves, tape.leaf(img), cfg);
    auto pyramid = fpn_forward(tape, leaves, outs, cfg);
    REQUIRE(pyramid.size() == 5);
    const std::map<int, int> want_extent{{3, 8}, {4, 4}, {5, 2}, {6, 1}, {7, 1}};
    for (const auto& [k, id] : pyramid) {
        CHECK(tape.value(id).dim(1) == 128);
        CHECK(tape.value(id).dim(2) == want_extent.at(k));
    }

    // wiring: P3 must equal out3(lat3(C3) + up2(lat4(C4) + up2(lat5(C5))))
    ad::Id l3 = ad::conv2d(tape, outs.c3, leaves["fpn.lat3.w"], leaves["fpn.lat3.b"], 1, 0);
    ad::Id l4 = ad::conv2d(tape, outs.c4, leaves["fpn.lat4.w"], leaves["fpn.lat4.b"], 1, 0);
    ad::Id l5 = ad::conv2d(tape, outs.c5, leaves["fpn.lat5.w"], leaves["fpn.lat5.b"], 1, 0);
    ad::Id m4 = ad::add(tape, l4, ad::upsample_nearest2x(tape, l5));
    ad::Id m3 = ad::add(tape, l3, ad::upsample_nearest2x(tape, m4));
    ad::Id p3 = ad::conv2d(tape, m3, leaves["fpn.out3.w"], leaves["fpn.out3.b"], 1, 1);
    for (std::int64_t i = 0; i < tape.value(p3).size(); ++i)
        CHECK(tape.value(p3)[i] == tape.value(pyramid.at(3))[i]);

    // zero weights -> zero pyramid
    for (const auto& name : store.names()) store.get(name).value.fill(0.0f);
    ad::Tape<float> tape2;
    Leaves<float> leaves2(tape2, store);
    BackboneOut zouts = backbone_forward(tape2, leaves2, tape2.leaf(img), cfg);
    auto zpyr = fpn_forward(tape2, leaves2, zouts, cfg);
    for (const auto& [k, id] : zpyr)
        for (std::int64_t i = 0; i < tape2.value(id).size(); ++i)
            CHECK(tape2.value(id)[i] == 0.0f);
}

TEST_CASE("backbone forward is deterministic and shape-stable across calls") {
    BackboneConfig cfg = make_backbone_config("V2-19", true);
    ParamStore store;
    WeightInit init(51);
    register_backbone_params(store, init, cfg);
    Tensor<float> img = random_tensor({1, 3, 64, 64}, 52);
    auto run = [&] {
        ad::Tape<float> tape;
        Leaves<float> leaves(tape, store);
        BackboneOut outs = backbone_forward(tape, leaves, tape.leaf(img), cfg);
        auto pyr = fpn_forward(tape, leaves, outs, cfg);
        std::vector<float> flat;
        for (const auto& [k, id] : pyr)
            flat.insert(flat.end(), tape.value(id).data(),
                        tape.value(id).data() + tape.value(id).size());
        return flat;
    };
    CHECK(run() == run());
}

TEST_CASE("attention and residual paths pass the gradient check") {
    OsaConfig cfg;
    cfg.conv_count = 1;
    cfg.conv_channels = 3;
    cfg.out_channels = 4;
    cfg.residual = true;

    for (auto attention : {OsaConfig::Attention::kNone, OsaConfig::Attention::kSe,
                           OsaConfig::Attention::kEse}) {
        cfg.attention = attention;
        cfg.se_reduction = 2;
        ParamStore store;
        WeightInit init(61);
        store.add("x", init.normal({1, 4, 4, 4}, 0.8f));
        store.add("m.conv1.w", init.he_normal({3, 4, 3, 3}, 36));
        store.add("m.conv1.b", init.normal({3}, 0.1f));
        store.add("m.agg.w", init.he_normal({4, 7, 1, 1}, 7));
        store.add("m.agg.b", init.normal({4}, 0.1f));
        if (attention == OsaConfig::Attention::kEse) {
            store.add("m.ese.w", init.normal({4, 4}, 0.5f));
            store.add("m.ese.b", init.normal({4}, 0.5f));
        } else if (attention == OsaConfig::Attention::kSe) {
            store.add("m.se.w1", init.normal({2, 4}, 0.5f));
            store.add("m.se.b1", init.normal({2}, 0.5f));
            store.add("m.se.w2", init.normal({4, 2}, 0.5f));
            store.add("m.se.b2", init.normal({4}, 0.5f));
        }
        auto loss = [&](auto& tape, auto& p) {
            return ad::sum_all(tape, osa_forward(tape, p, p["x"], cfg, "m"));
        };
        auto report = check_gradients(store, loss, {1e-3, 0, 7});
        CAPTURE(static_cast<int>(attention));
        CAPTURE(report.worst_rel_err);
        CHECK(report.within(1e-3));
    }
}
