#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dualseg/loss.hpp"
#include "dualseg/rng.hpp"

using namespace dualseg;

namespace {

Mask mask_of(int w, int h, std::initializer_list<int> fg) {
    Mask m(w, h, 1);
    for (int idx : fg) m.px[static_cast<size_t>(idx)] = 255;
    return m;
}

Tensor<double> tensor_of_mask(const Mask& m) {
    Tensor<double> t({1, 1, m.h, m.w});
    for (size_t i = 0; i < m.px.size(); ++i) t.data()[i] = m.px[i] ? 1.0 : 0.0;
    return t;
}

}  // namespace

TEST_CASE("bce of a 0.5 prediction is ln 2") {
    Tape<double> tape(false);
    Tensor<double> pred = Tensor<double>::full({1, 1, 4, 4}, 0.5);
    Tensor<double> gt({1, 1, 4, 4});
    for (int64_t i = 0; i < gt.numel(); ++i) gt.data()[i] = i % 3 == 0 ? 1.0 : 0.0;
    CHECK(std::abs(bce_loss(tape, pred, gt).item() - std::log(2.0)) < 1e-9);
}

TEST_CASE("bce of the clamped perfect prediction is about zero") {
    Tape<double> tape(false);
    Tensor<double> gt({1, 1, 3, 3});
    for (int64_t i = 0; i < 9; ++i) gt.data()[i] = i < 4 ? 1.0 : 0.0;
    CHECK(bce_loss(tape, gt.clone(), gt).item() <= -std::log(1.0 - 1e-7) + 1e-12);
}

TEST_CASE("bce single pixel analytic value") {
    Tape<double> tape(false);
    Tensor<double> pred = Tensor<double>::from({1, 1, 1, 1}, {0.8});
    Tensor<double> gt = Tensor<double>::from({1, 1, 1, 1}, {1.0});
    CHECK(bce_loss(tape, pred, gt).item() == doctest::Approx(-std::log(0.8)).epsilon(1e-9));
}

TEST_CASE("bce rejects mismatched shapes") {
    Tape<double> tape(false);
    CHECK_THROWS_AS(bce_loss(tape, Tensor<double>({1, 1, 2, 2}), Tensor<double>({1, 1, 2, 3})),
                    ShapeError);
}

TEST_CASE("iou_score on identical, disjoint and partial masks") {
    Mask a = mask_of(4, 4, {0, 1, 4, 5});
    CHECK(iou_score(a, a) == 1.0);
    Mask b = mask_of(4, 4, {10, 11});
    CHECK(iou_score(a, b) == 0.0);

    // gt has 4 foreground pixels, pred covers 2 of them plus 2 extra
    Mask gt = mask_of(4, 4, {0, 1, 4, 5});
    Mask pred = mask_of(4, 4, {0, 1, 10, 11});
    int tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < gt.px.size(); ++i) {
        tp += (pred.px[i] != 0 && gt.px[i] != 0);
        fp += (pred.px[i] != 0 && gt.px[i] == 0);
        fn += (pred.px[i] == 0 && gt.px[i] != 0);
    }
    REQUIRE(tp == 2);
    REQUIRE(fp == 2);
    REQUIRE(fn == 2);
    CHECK(iou_score(pred, gt) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("iou_score of two empty masks is one") {
    Mask e(5, 5, 1);
    CHECK(iou_score(e, e) == 1.0);
}

TEST_CASE("iou_score is symmetric") {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        Mask a(8, 8, 1), b(8, 8, 1);
        for (size_t i = 0; i < a.px.size(); ++i) {
            a.px[i] = rng.uniform() < 0.4 ? 255 : 0;
            b.px[i] = rng.uniform() < 0.4 ? 255 : 0;
        }
        CHECK(iou_score(a, b) == iou_score(b, a));
    }
}

TEST_CASE("soft iou of an exact binary prediction is zero") {
    Tape<double> tape(false);
    Mask gt = mask_of(3, 3, {0, 4, 8});
    Tensor<double> t = tensor_of_mask(gt);
    CHECK(soft_iou_loss(tape, t.clone(), t).item() == 0.0);
}

TEST_CASE("soft iou equals 1 - hard iou for binary predictions") {
    Tape<double> tape(false);
    Rng rng(9);
    for (int t = 0; t < 50; ++t) {
        Mask pred(6, 6, 1), gt(6, 6, 1);
        for (size_t i = 0; i < pred.px.size(); ++i) {
            pred.px[i] = rng.uniform() < 0.5 ? 255 : 0;
            gt.px[i] = rng.uniform() < 0.5 ? 255 : 0;
        }
        const double soft = soft_iou_loss(tape, tensor_of_mask(pred), tensor_of_mask(gt)).item();
        CHECK(soft + iou_score(pred, gt) == 1.0);
    }
}

TEST_CASE("soft iou hand-expanded half-probability case") {
    Tape<double> tape(false);
    Tensor<double> pred = Tensor<double>::full({1, 1, 1, 2}, 0.5);
    Tensor<double> gt = Tensor<double>::from({1, 1, 1, 2}, {1.0, 0.0});
    // TPs = 0.5, FPs = 0.5, FNs = 0.5 -> 1 - 0.5/1.5 = 2/3
    CHECK(soft_iou_loss(tape, pred, gt).item() == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("soft iou monotone: raising pred where gt=1 never increases the loss") {
    Tape<double> tape(false);
    Rng rng(13);
    for (int t = 0; t < 30; ++t) {
        Tensor<double> pred({1, 1, 4, 4});
        Tensor<double> gt({1, 1, 4, 4});
        for (int64_t i = 0; i < 16; ++i) {
            pred.data()[i] = rng.uniform(0.05, 0.9);
            gt.data()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
        }
        gt.data()[3] = 1.0;
        const double before = soft_iou_loss(tape, pred, gt).item();
        pred.data()[3] += 0.05;
        const double after = soft_iou_loss(tape, pred, gt).item();
        CHECK(after <= before + 1e-15);
    }
}

TEST_CASE("total loss is exactly the sum of its parts") {
    Tape<double> tape(false);
    Rng rng(21);
    for (int t = 0; t < 10; ++t) {
        Tensor<double> pred({1, 1, 5, 5});
        Tensor<double> gt({1, 1, 5, 5});
        for (int64_t i = 0; i < 25; ++i) {
            pred.data()[i] = rng.uniform(0.01, 0.99);
            gt.data()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
        }
        auto tl = total_loss(tape, pred, gt);
        CHECK(tl.value.total == tl.value.bce + tl.value.iou_loss);
        // independent recomposition
        const double bce = bce_loss(tape, pred, gt).item();
        const double iou = soft_iou_loss(tape, pred, gt).item();
        CHECK(tl.value.bce == bce);
        CHECK(tl.value.iou_loss == iou);
        CHECK(tl.tensor.item() == bce + iou);
    }
}

TEST_CASE("perfect prediction gives near-zero total loss") {
    Tape<double> tape(false);
    Mask gt = mask_of(4, 4, {0, 1, 2, 5});
    Tensor<double> t = tensor_of_mask(gt);
    CHECK(total_loss(tape, t.clone(), t).value.total <= 2e-7);
}

TEST_CASE("bce is non-negative") {
    Tape<double> tape(false);
    Rng rng(31);
    for (int t = 0; t < 30; ++t) {
        Tensor<double> pred({1, 1, 3, 3});
        Tensor<double> gt({1, 1, 3, 3});
        for (int64_t i = 0; i < 9; ++i) {
            pred.data()[i] = rng.uniform(0.0, 1.0);
            gt.data()[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
        }
        CHECK(bce_loss(tape, pred, gt).item() >= 0.0);
    }
}

TEST_CASE("median and IQR under the stated quantile rule") {
    auto [m1, q1] = median_iqr({1, 2, 3, 4, 5});
    CHECK(m1 == 3.0);
    CHECK(q1 == 2.0);

    auto [m2, q2] = median_iqr({7});
    CHECK(m2 == 7.0);
    CHECK(q2 == 0.0);

    auto [m3, q3] = median_iqr({2.5, 2.5, 2.5, 2.5});
    CHECK(m3 == 2.5);
    CHECK(q3 == 0.0);

    // even count uses the midpoint rule
    auto [m4, q4] = median_iqr({1, 2, 3, 4});
    CHECK(m4 == 2.5);
    CHECK(q4 == doctest::Approx(1.5));

    CHECK_THROWS_AS(median_iqr({}), ValueError);
}
