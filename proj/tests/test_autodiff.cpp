// Copyright (c) 2026 centermask-cpp authors
// SPDX-License-Identifier: Apache-2.0
//
// Backward rules vs central finite differences (double re-execution,
// step 1e-3), plus the tape contracts.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "centermask/gradcheck.hpp"

using centermask::GradCheckOptions;
using centermask::ParamStore;
using centermask::Tensor;
using centermask::WeightInit;
namespace ad = centermask::ad;

namespace {

constexpr double kUnitTol = 1e-3;

Tensor<double> random_target(std::vector<int> shape, std::uint32_t seed) {
    Tensor<double> t(std::move(shape));
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
    return t;
}

// Scalarize an op output against a fixed target so every element's gradient
// is exercised.
template <typename TapeT>
ad::Id against(TapeT& tape, ad::Id y, const Tensor<double>& target) {
    using T = typename TapeT::scalar_type;
    return ad::mse_mean(tape, y, target.template cast<T>());
}

GradCheckOptions exhaustive() {
    GradCheckOptions opt;
    opt.samples_per_tensor = 0;  // every element
    return opt;
}

}  // namespace

TEST_CASE("constant loss has zero gradients everywhere") {
    ParamStore store;
    WeightInit init(3);
    store.add("w", init.normal({2, 2}, 1.0f));
    ad::Tape<float> tape;
    centermask::Leaves<float> leaves(tape, store);
    (void)leaves["w"];
    Tensor<float> c({1});
    c[0] = 4.2f;
    ad::Id loss = tape.leaf(std::move(c));
    tape.backward(loss);
    leaves.add_grads_to(store);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(store.get("w").grad[i] == 0.0f);
}

TEST_CASE("sigmoid at zero has derivative 0.25") {
    ad::Tape<float> tape;
    Tensor<float> w({1});
    ad::Id wl = tape.leaf(w);
    ad::Id s = ad::activation(tape, wl, ad::Activation::kSigmoid);
    tape.backward(s);
    CHECK(tape.grad(wl)[0] == doctest::Approx(0.25f));
}

TEST_CASE("gradients accumulate additively across shared uses") {
    ad::Tape<float> tape;
    Tensor<float> x({1});
    x[0] = 3.0f;
    ad::Id xl = tape.leaf(x);
    // loss = x + x  ->  dloss/dx = 2
    ad::Id loss = ad::add_scalars(tape, {xl, xl});
    tape.backward(loss);
    CHECK(tape.grad(xl)[0] == 2.0f);
}

TEST_CASE("a cleared tape yields zero gradients") {
    ad::Tape<float> tape;
    ad::Id a = tape.leaf(Tensor<float>({2, 2}));
    tape.backward(ad::sum_all(tape, a));
    tape.reset();
    ad::Id b = tape.leaf(Tensor<float>({3}));
    for (std::int64_t i = 0; i < 3; ++i) CHECK(tape.grad(b)[i] == 0.0f);
}

TEST_CASE("two-layer conv+relu+sum loss passes the finite-difference check") {
    ParamStore store;
    // Fixed seed keeps every relu pre-activation away from zero, so the
    // +-1e-3 FD window never crosses a kink.
    WeightInit init(13);
    store.add("x", init.normal({1, 2, 6, 6}, 1.0f));
    store.add("w1", init.he_normal({4, 2, 3, 3}, 18));
    store.add("b1", init.normal({4}, 0.1f));
    store.add("w2", init.he_normal({3, 4, 3, 3}, 36));
    store.add("b2", init.normal({3}, 0.1f));
    auto loss = [](auto& tape, auto& p) {
        ad::Id h = ad::conv2d(tape, p["x"], p["w1"], p["b1"], 1, 1);
        h = ad::activation(tape, h, ad::Activation::kRelu);
        h = ad::conv2d(tape, h, p["w2"], p["b2"], 2, 1);
        h = ad::activation(tape, h, ad::Activation::kRelu);
        return ad::sum_all(tape, h);
    };
    auto report = centermask::check_gradients(store, loss, exhaustive());
    CAPTURE(report.worst_rel_err);
    CHECK(report.within(kUnitTol));
}

TEST_CASE("conv2d strided / padded gradient check") {
    ParamStore store;
    WeightInit init(21);
    store.add("x", init.normal({2, 3, 5, 5}, 1.0f));
    store.add("w", init.he_normal({4, 3, 3, 3}, 27));
    store.add("b", init.normal({4}, 0.2f));
    Tensor<double> target = random_target({2, 4, 3, 3}, 500);
    auto loss = [&](auto& tape, auto& p) {
        return against(tape, ad::conv2d(tape, p["x"], p["w"], p["b"], 2, 1), target);
    };
    auto report = centermask::check_gradients(store, loss, exhaustive());
    CHECK(report.within(kUnitTol));
}

TEST_CASE("deconv2d_2x2 gradient check") {
    ParamStore store;
    WeightInit init(22);
    store.add("x", init.normal({1, 3, 4, 4}, 1.0f));
    store.add("w", init.normal({3, 2, 2, 2}, 0.5f));
    store.add("b", init.normal({2}, 0.2f));
    Tensor<double> target = random_target({1, 2, 8, 8}, 501);
    auto loss = [&](auto& tape, auto& p) {
        return against(tape, ad::deconv2d_2x2(tape, p["x"], p["w"], p["b"]), target);
    };
    CHECK(centermask::check_gradients(store, loss, exhaustive()).within(kUnitTol));
}

TEST_CASE("fully_connected gradient check") {
    ParamStore store;
    WeightInit init(23);
    store.add("x", init.normal({3, 5}, 1.0f));
    store.add("w", init.normal({4, 5}, 0.5f));
    store.add("b", init.normal({4}, 0.2f));
    Tensor<double> target = random_target({3, 4}, 502);
    auto loss = [&](auto& tape, auto& p) {
        return against(tape, ad::fully_connected(tape, p["x"], p["w"], p["b"]), target);
    };
    CHECK(centermask::check_gradients(store, loss, exhaustive()).within(kUnitTol));
}

TEST_CASE("activations, exp_clamped, scalar parameter scale") {
    ParamStore store;
    WeightInit init(24);
    store.add("x", init.normal({2, 6}, 1.0f));
    store.add("s", init.normal({1}, 0.5f));
    Tensor<double> target = random_target({2, 6}, 503);
    auto loss = [&](auto& tape, auto& p) {
        ad::Id h = ad::activation(tape, p["x"], ad::Activation::kSigmoid);
        h = ad::mul_scalar_param(tape, h, p["s"]);
        h = ad::exp_clamped(tape, h);
        return against(tape, h, target);
    };
    CHECK(centermask::check_gradients(store, loss, exhaustive()).within(kUnitTol));
}

TEST_CASE("channel plumbing gradient checks") {
    ParamStore store;
    WeightInit init(25);
    store.add("a", init.normal({1, 2, 4, 4}, 1.0f));
    store.add("b", init.normal({1, 3, 4, 4}, 1.0f));
    Tensor<double> target = random_target({1, 5, 4, 4}, 504);
    auto loss = [&](auto& tape, auto& p) {
        return against(tape, ad::concat_channels(tape, {p["a"], p["b"]}), target);
    };
    CHECK(centermask::check_gradients(store, loss, exhaustive()).within(kUnitTol));

    Tensor<double> target2 = random_target({1, 1, 4, 4}, 505);
    auto loss_max = [&](auto& tape, auto& p) {
        return against(tape, ad::reduce_channel(tape, p["a"], ad::ReduceMode::kMax), target2);
    };
    CHECK(centermask::check_gradients(store, loss_max, exhaustive()).within(kUnitTol));
    auto loss_avg = [&](auto& tape, auto& p) {
        return against(tape, ad::reduce_channel(tape, p["b"], ad::ReduceMode::kAvg), target2);
    };
    CHECK(centermask::check_gradients(store, loss_avg, exhaustive()).within(kUnitTol));

    Tensor<double> target3 = random_target({1, 2, 1, 1}, 506);
    auto loss_gap = [&](auto& tape, auto& p) {
        return against(tape, ad::global_avg_pool(tape, p["a"]), target3);
    };
    CHECK(centermask::check_gradients(store, loss_gap, exhaustive()).within(kUnitTol));
}

TEST_CASE("elementwise and gate gradient checks") {
    ParamStore store;
    WeightInit init(26);
    store.add("x", init.normal({2, 3, 3, 3}, 1.0f));
    store.add("y", init.normal({2, 3, 3, 3}, 1.0f));
    store.add("cg", init.normal({2, 3, 1, 1}, 1.0f));
    store.add("sg", init.normal({2, 1, 3, 3}, 1.0f));
    Tensor<double> target = random_target({2, 3, 3, 3}, 507);
    auto loss_add = [&](auto& tape, auto& p) {
        return against(tape, ad::add(tape, p["x"], p["y"]), target);
    };
    CHECK(centermask::check_gradients(store, loss_add, exhaustive()).within(kUnitTol));
    auto loss_mul = [&](auto& tape, auto& p) {
        return against(tape, ad::mul(tape, p["x"], p["y"]), target);
    };
    CHECK(centermask::check_gradients(store, loss_mul, exhaustive()).within(kUnitTol));
    auto loss_cg = [&](auto& tape, auto& p) {
        return against(tape, ad::mul_channel_gate(tape, p["x"], p["cg"]), target);
    };
    CHECK(centermask::check_gradients(store, loss_cg, exhaustive()).within(kUnitTol));
    auto loss_sg = [&](auto& tape, auto& p) {
        return against(tape, ad::mul_spatial_gate(tape, p["x"], p["sg"]), target);
    };
    CHECK(centermask::check_gradients(store, loss_sg, exhaustive()).within(kUnitTol));
}

TEST_CASE("pooling / resize gradient checks") {
    ParamStore store;
    WeightInit init(27);
    store.add("x", init.normal({1, 2, 6, 6}, 1.0f));
    Tensor<double> target = random_target({1, 2, 3, 3}, 508);
    auto loss_mp = [&](auto& tape, auto& p) {
        return against(tape, ad::maxpool2d(tape, p["x"], 3, 2, 1), target);
    };
    CHECK(centermask::check_gradients(store, loss_mp, exhaustive()).within(kUnitTol));

    Tensor<double> target_up = random_target({1, 2, 12, 12}, 509);
    auto loss_up = [&](auto& tape, auto& p) {
        return against(tape, ad::upsample_nearest2x(tape, p["x"]), target_up);
    };
    CHECK(centermask::check_gradients(store, loss_up, exhaustive()).within(kUnitTol));
}

TEST_CASE("row/selection plumbing gradient checks") {
    ParamStore store;
    WeightInit init(28);
    store.add("x", init.normal({2, 3, 2, 2}, 1.0f));
    store.add("m", init.normal({4, 3}, 1.0f));
    Tensor<double> target_rows = random_target({8, 3}, 510);
    auto loss_rows = [&](auto& tape, auto& p) {
        return against(tape, ad::nchw_to_rows(tape, p["x"]), target_rows);
    };
    CHECK(centermask::check_gradients(store, loss_rows, exhaustive()).within(kUnitTol));

    Tensor<double> target_gather = random_target({3, 3}, 511);
    auto loss_gather = [&](auto& tape, auto& p) {
        return against(tape, ad::gather_rows(tape, p["m"], {0, 2, 2}), target_gather);
    };
    CHECK(centermask::check_gradients(store, loss_gather, exhaustive()).within(kUnitTol));

    Tensor<double> target_sel = random_target({2, 1, 2, 2}, 512);
    auto loss_sel = [&](auto& tape, auto& p) {
        return against(tape, ad::select_channel(tape, p["x"], {1, 0}), target_sel);
    };
    CHECK(centermask::check_gradients(store, loss_sel, exhaustive()).within(kUnitTol));

    Tensor<double> target_col = random_target({4, 1}, 513);
    auto loss_col = [&](auto& tape, auto& p) {
        return against(tape, ad::select_column(tape, p["m"], {2, 0, 1, 1}), target_col);
    };
    CHECK(centermask::check_gradients(store, loss_col, exhaustive()).within(kUnitTol));

    Tensor<double> target_cat = random_target({8, 3}, 514);
    auto loss_cat = [&](auto& tape, auto& p) {
        return against(tape, ad::concat_rows(tape, {p["m"], p["m"]}), target_cat);
    };
    CHECK(centermask::check_gradients(store, loss_cat, exhaustive()).within(kUnitTol));
}

TEST_CASE("roi_align and bilinear_point gradient checks") {
    ParamStore store;
    WeightInit init(29);
    store.add("p3", init.normal({1, 2, 8, 8}, 1.0f));
    store.add("p4", init.normal({1, 2, 4, 4}, 1.0f));
    std::vector<ad::RoiWindow> rois = {
        {0, 3, 5.0f, 6.0f, 40.0f, 30.0f},
        {0, 4, 0.0f, 0.0f, 60.0f, 60.0f},
    };
    Tensor<double> target = random_target({2, 2, 7, 7}, 515);
    auto loss_roi = [&](auto& tape, auto& p) {
        std::map<int, ad::Id> levels{{3, p["p3"]}, {4, p["p4"]}};
        return against(tape, ad::roi_align(tape, levels, rois, 7, 2), target);
    };
    CHECK(centermask::check_gradients(store, loss_roi, exhaustive()).within(kUnitTol));

    Tensor<double> target_pt = random_target({1, 2}, 516);
    auto loss_pt = [&](auto& tape, auto& p) {
        return against(tape, ad::bilinear_point(tape, p["p3"], 3.3, 4.7), target_pt);
    };
    CHECK(centermask::check_gradients(store, loss_pt, exhaustive()).within(kUnitTol));
}

TEST_CASE("loss heads gradient checks") {
    ParamStore store;
    WeightInit init(30);
    store.add("logits", init.normal({6, 3}, 1.5f));
    store.add("box", init.normal({5, 4}, 0.3f));
    store.add("z", init.normal({2, 3, 4, 4}, 1.0f));
    store.add("pred", init.normal({7, 1}, 0.5f));

    auto loss_focal = [&](auto& tape, auto& p) {
        using T = typename std::decay_t<decltype(tape)>::scalar_type;
        return ad::focal_loss(tape, p["logits"], {0, -1, 2, 1, -1, 0}, T(0.25), T(2));
    };
    CHECK(centermask::check_gradients(store, loss_focal, exhaustive()).within(kUnitTol));

    Tensor<double> box_target({5, 4});
    Tensor<double> box_weights({5});
    std::mt19937 rng(517);
    std::uniform_real_distribution<double> pos(0.5, 3.0);
    for (std::int64_t i = 0; i < box_target.size(); ++i) box_target[i] = pos(rng);
    for (std::int64_t i = 0; i < 5; ++i) box_weights[i] = pos(rng);
    auto loss_iou = [&](auto& tape, auto& p) {
        using T = typename std::decay_t<decltype(tape)>::scalar_type;
        ad::Id positive = ad::exp_clamped(tape, p["box"]);
        return ad::iou_loss(tape, positive, box_target.cast<T>(), box_weights.cast<T>());
    };
    CHECK(centermask::check_gradients(store, loss_iou, exhaustive()).within(kUnitTol));

    Tensor<double> bce_targets({2, 3, 4, 4});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::int64_t i = 0; i < bce_targets.size(); ++i) bce_targets[i] = unit(rng);
    auto loss_bce = [&](auto& tape, auto& p) {
        using T = typename std::decay_t<decltype(tape)>::scalar_type;
        return ad::bce_mean(tape, p["z"], bce_targets.cast<T>());
    };
    CHECK(centermask::check_gradients(store, loss_bce, exhaustive()).within(kUnitTol));

    Tensor<double> mse_target = random_target({7, 1}, 518);
    auto loss_mse = [&](auto& tape, auto& p) { return against(tape, p["pred"], mse_target); };
    CHECK(centermask::check_gradients(store, loss_mse, exhaustive()).within(kUnitTol));
}

TEST_CASE("gradient of a sum equals the sum of part gradients") {
    ParamStore store;
    WeightInit init(31);
    store.add("x", init.normal({3, 2}, 1.0f));
    Tensor<double> t1 = random_target({3, 2}, 519);
    Tensor<double> t2 = random_target({3, 2}, 520);

    auto total = [&](auto& tape, auto& p) {
        ad::Id a = against(tape, p["x"], t1);
        ad::Id b = against(tape, p["x"], t2);
        return ad::add_scalars(tape, {a, b});
    };
    CHECK(centermask::check_gradients(store, total, exhaustive()).within(kUnitTol));

    // analytic: grad(total) == grad(a) + grad(b)
    ad::Tape<float> tape;
    centermask::Leaves<float> leaves(tape, store);
    ad::Id a = against(tape, leaves["x"], t1);
    tape.backward(a);
    std::vector<float> ga(tape.grad(leaves["x"]).data(), tape.grad(leaves["x"]).data() + 6);

    ad::Tape<float> tape2;
    centermask::Leaves<float> leaves2(tape2, store);
    ad::Id b = against(tape2, leaves2["x"], t2);
    tape2.backward(b);
    std::vector<float> gb(tape2.grad(leaves2["x"]).data(), tape2.grad(leaves2["x"]).data() + 6);

    ad::Tape<float> tape3;
    centermask::Leaves<float> leaves3(tape3, store);
    ad::Id s = ad::add_scalars(tape3, {against(tape3, leaves3["x"], t1),
                                       against(tape3, leaves3["x"], t2)});
    tape3.backward(s);
    for (int i = 0; i < 6; ++i)
        CHECK(tape3.grad(leaves3["x"])[i] == doctest::Approx(ga[i] + gb[i]).epsilon(1e-5));
}

TEST_CASE("backward rejects non-scalar losses and untracked gradients stay empty") {
    ad::Tape<float> tape;
    ad::Id x = tape.leaf(Tensor<float>({2, 2}));
    CHECK_THROWS(tape.backward(x));
}
