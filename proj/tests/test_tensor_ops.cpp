#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <vector>

#include "dualseg/ops.hpp"
#include "dualseg/rng.hpp"

using namespace dualseg;

namespace {

// Reference convolution: the plainest possible nested loops, written against
// the operation contract and kept independent of the kernel code paths.
template <typename T>
std::vector<T> conv_oracle(const std::vector<T>& in, int64_t B, int64_t Cin, int64_t H, int64_t W,
                           const std::vector<T>& w, int64_t Cout, int64_t kh, int64_t kw,
                           const std::vector<T>& bias, int64_t sh, int64_t sw, int64_t ph,
                           int64_t pw) {
    const int64_t OH = (H + 2 * ph - kh) / sh + 1;
    const int64_t OW = (W + 2 * pw - kw) / sw + 1;
    std::vector<T> out(static_cast<size_t>(B * Cout * OH * OW), T(0));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Cout; ++co)
            for (int64_t oy = 0; oy < OH; ++oy)
                for (int64_t ox = 0; ox < OW; ++ox) {
                    T acc = bias[static_cast<size_t>(co)];
                    for (int64_t ci = 0; ci < Cin; ++ci)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const int64_t iy = oy * sh - ph + ky;
                                const int64_t ix = ox * sw - pw + kx;
                                if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                acc += in[static_cast<size_t>(((b * Cin + ci) * H + iy) * W + ix)] *
                                       w[static_cast<size_t>(((co * Cin + ci) * kh + ky) * kw + kx)];
                            }
                    out[static_cast<size_t>(((b * Cout + co) * OH + oy) * OW + ox)] = acc;
                }
    return out;
}

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    T* p = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

}  // namespace

TEST_CASE("conv2d 1x1 identity kernel") {
    Tape<float> tape(false);
    Rng rng(7);
    Tensor<float> x = random_tensor<float>(rng, {1, 1, 3, 4});
    Tensor<float> w = Tensor<float>::from({1, 1, 1, 1}, {1.0f});
    Tensor<float> b = Tensor<float>::zeros({1});
    Tensor<float> y = ops::conv2d(tape, x, w, b);
    REQUIRE(y.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d 3x3 ones kernel on 3x3 ones input") {
    Tape<float> tape(false);
    Tensor<float> x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    Tensor<float> w = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
    Tensor<float> b = Tensor<float>::zeros({1});
    Tensor<float> y = ops::conv2d(tape, x, w, b);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.item() == doctest::Approx(9.0));
}

TEST_CASE("conv2d matches nested-loop reference") {
    Rng rng(11);
    for (int trial = 0; trial < 4; ++trial) {
        const int64_t sh = 1 + trial % 2, sw = 1 + trial / 2 % 2;
        const int64_t ph = trial % 2, pw = 1;
        Tensor<double> x = random_tensor<double>(rng, {2, 3, 8, 8});
        Tensor<double> w = random_tensor<double>(rng, {4, 3, 3, 3});
        Tensor<double> b = random_tensor<double>(rng, {4}, -0.1, 0.1);
        Tape<double> tape(false);
        Tensor<double> y = ops::conv2d(tape, x, w, b, ops::Conv2dSpec{sh, sw, ph, pw});
        auto ref = conv_oracle<double>(
            {x.data(), x.data() + x.numel()}, 2, 3, 8, 8, {w.data(), w.data() + w.numel()}, 4, 3, 3,
            {b.data(), b.data() + b.numel()}, sh, sw, ph, pw);
        REQUIRE(y.numel() == static_cast<int64_t>(ref.size()));
        for (int64_t i = 0; i < y.numel(); ++i)
            CHECK(y.data()[i] == doctest::Approx(ref[static_cast<size_t>(i)]).epsilon(1e-6));
    }
}

TEST_CASE("conv2d channel mismatch raises a structured error") {
    Tape<float> tape(false);
    Tensor<float> x({2, 5, 8, 8});
    Tensor<float> w({4, 3, 3, 3});
    Tensor<float> b({4});
    try {
        ops::conv2d(tape, x, w, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,5,8,8]") != std::string::npos);
        CHECK(msg.find("[4,3,3,3]") != std::string::npos);
    }
}

TEST_CASE("conv2d output shape formula matches placement enumeration") {
    Tape<float> tape(false);
    for (int64_t H = 1; H <= 8; ++H)
        for (int64_t k = 1; k <= 3; ++k)
            for (int64_t s = 1; s <= 3; ++s)
                for (int64_t p = 0; p <= 2; ++p) {
                    if (H + 2 * p < k) continue;
                    int64_t expect = 0;
                    for (int64_t y0 = -p; y0 + k <= H + p; y0 += s) ++expect;
                    Tensor<float> x({1, 1, H, H});
                    Tensor<float> w({1, 1, k, k});
                    Tensor<float> b({1});
                    Tensor<float> y = ops::conv2d(tape, x, w, b, ops::Conv2dSpec{s, s, p, p});
                    CHECK(y.dim(2) == expect);
                    CHECK(y.dim(3) == expect);
                }
}

TEST_CASE("conv2d is linear in its input when bias is zero") {
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor<double> x = random_tensor<double>(rng, {1, 2, 6, 6});
        Tensor<double> w = random_tensor<double>(rng, {3, 2, 3, 3});
        Tensor<double> b = Tensor<double>::zeros({3});
        const double a = rng.uniform(-3.0, 3.0);
        Tensor<double> ax = x.clone();
        for (int64_t i = 0; i < ax.numel(); ++i) ax.data()[i] *= a;
        Tape<double> tape(false);
        Tensor<double> y1 = ops::conv2d(tape, ax, w, b, ops::Conv2dSpec{1, 1, 1, 1});
        Tensor<double> y2 = ops::conv2d(tape, x, w, b, ops::Conv2dSpec{1, 1, 1, 1});
        for (int64_t i = 0; i < y1.numel(); ++i) {
            const double want = a * y2.data()[i];
            CHECK(std::abs(y1.data()[i] - want) <= 1e-6 * std::max(1.0, std::abs(want)));
        }
    }
}

TEST_CASE("forward ops are bit-deterministic across repeat runs") {
    auto run = [](uint64_t seed) {
        Rng rng(seed);
        Tape<float> tape(false);
        Tensor<float> x = random_tensor<float>(rng, {2, 3, 16, 16});
        Tensor<float> w = random_tensor<float>(rng, {4, 3, 3, 3});
        Tensor<float> b = random_tensor<float>(rng, {4});
        Tensor<float> y = ops::conv2d(tape, x, w, b, ops::Conv2dSpec{1, 1, 1, 1});
        y = ops::relu(tape, y);
        y = ops::maxpool2d(tape, y, 3, 2, 1);
        y = ops::sigmoid(tape, y);
        return std::vector<float>(y.data(), y.data() + y.numel());
    };
    auto a = run(5), b = run(5);
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

TEST_CASE("batchnorm train mode with unit statistics is near identity") {
    Tape<float> tape(false);
    // alternating +-1 has exact zero mean and unit (biased) variance
    Tensor<float> x({1, 2, 2, 4});
    for (int64_t i = 0; i < x.numel(); ++i) x.data()[i] = i % 2 == 0 ? 1.0f : -1.0f;
    Tensor<float> gamma = Tensor<float>::full({2}, 1.0f);
    Tensor<float> beta({2});
    Tensor<float> rm({2}), rv = Tensor<float>::full({2}, 1.0f);
    Tensor<float> y = ops::batch_norm2d(tape, x, gamma, beta, rm, rv, true, 0.99f, 1e-5f);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(std::abs(y.data()[i] - x.data()[i]) < 1e-3f);
}

TEST_CASE("batchnorm gamma=0 collapses output to beta") {
    Tape<float> tape(false);
    Rng rng(3);
    Tensor<float> x = random_tensor<float>(rng, {2, 3, 4, 4});
    Tensor<float> gamma({3});
    Tensor<float> beta = Tensor<float>::from({3}, {0.5f, -1.0f, 2.0f});
    Tensor<float> rm({3}), rv = Tensor<float>::full({3}, 1.0f);
    Tensor<float> y = ops::batch_norm2d(tape, x, gamma, beta, rm, rv, true, 0.99f, 1e-5f);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t i = 0; i < 16; ++i)
                CHECK(y.data()[(b * 3 + c) * 16 + i] == beta.data()[c]);
}

TEST_CASE("batchnorm train output statistics are normalized") {
    Tape<double> tape(false);
    Rng rng(17);
    Tensor<double> x = random_tensor<double>(rng, {4, 3, 8, 8}, -2.0, 5.0);
    Tensor<double> gamma = Tensor<double>::full({3}, 1.0);
    Tensor<double> beta({3});
    Tensor<double> rm({3}), rv = Tensor<double>::full({3}, 1.0);
    Tensor<double> y = ops::batch_norm2d(tape, x, gamma, beta, rm, rv, true, 0.99, 1e-5);
    // independent recomputation of the per-channel statistics
    for (int64_t c = 0; c < 3; ++c) {
        double sum = 0.0, sq = 0.0;
        int64_t n = 0;
        for (int64_t b = 0; b < 4; ++b)
            for (int64_t i = 0; i < 64; ++i) {
                const double v = y.data()[(b * 3 + c) * 64 + i];
                sum += v;
                sq += v * v;
                ++n;
            }
        const double mean = sum / n;
        const double var = sq / n - mean * mean;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("batchnorm train mode rejects single-element statistics") {
    Tape<float> tape(false);
    Tensor<float> x({1, 3, 1, 1});
    Tensor<float> gamma = Tensor<float>::full({3}, 1.0f);
    Tensor<float> beta({3});
    Tensor<float> rm({3}), rv = Tensor<float>::full({3}, 1.0f);
    CHECK_THROWS_AS(ops::batch_norm2d(tape, x, gamma, beta, rm, rv, true, 0.99f, 1e-5f), ValueError);
}

TEST_CASE("relu and sigmoid point values") {
    Tape<float> tape(false);
    Tensor<float> x = Tensor<float>::from({3}, {-1.0f, 2.0f, 0.0f});
    Tensor<float> y = ops::relu(tape, x);
    CHECK(y.data()[0] == 0.0f);
    CHECK(y.data()[1] == 2.0f);
    CHECK(y.data()[2] == 0.0f);
    Tensor<float> z = ops::sigmoid(tape, Tensor<float>::zeros({1}));
    CHECK(z.item() == doctest::Approx(0.5));
}

TEST_CASE("concat_channels keeps argument order and checks dims") {
    Tape<float> tape(false);
    Tensor<float> a = Tensor<float>::full({1, 2, 3, 4}, 1.0f);
    Tensor<float> b = Tensor<float>::full({1, 3, 3, 4}, 2.0f);
    Tensor<float> y = ops::concat_channels(tape, {a, b});
    REQUIRE(y.shape() == Shape{1, 5, 3, 4});
    for (int64_t c = 0; c < 5; ++c)
        for (int64_t i = 0; i < 12; ++i) CHECK(y.data()[c * 12 + i] == (c < 2 ? 1.0f : 2.0f));

    Tensor<float> bad({1, 3, 5, 4});
    CHECK_THROWS_AS(ops::concat_channels(tape, {a, bad}), ShapeError);
}

TEST_CASE("maxpool2d window max and shape") {
    Tape<float> tape(false);
    Tensor<float> x({1, 1, 4, 4});
    for (int64_t i = 0; i < 16; ++i) x.data()[i] = static_cast<float>(i);
    Tensor<float> y = ops::maxpool2d(tape, x, 3, 2, 1);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y.data()[0] == 5.0f);   // rows 0-1, cols 0-1
    CHECK(y.data()[1] == 7.0f);   // rows 0-1, cols 1-3
    CHECK(y.data()[2] == 13.0f);  // rows 1-3, cols 0-1
    CHECK(y.data()[3] == 15.0f);
}

TEST_CASE("upsample_nearest2x duplicates each pixel to a 2x2 block") {
    Tape<float> tape(false);
    Tensor<float> x = Tensor<float>::from({1, 1, 2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    Tensor<float> y = ops::upsample_nearest2x(tape, x);
    REQUIRE(y.shape() == Shape{1, 1, 4, 4});
    const float want[16] = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    for (int i = 0; i < 16; ++i) CHECK(y.data()[i] == want[i]);
}

TEST_CASE("global_avg_pool averages each channel plane") {
    Tape<float> tape(false);
    Tensor<float> x = Tensor<float>::from({1, 2, 1, 2}, {1.0f, 3.0f, 10.0f, 20.0f});
    Tensor<float> y = ops::global_avg_pool(tape, x);
    REQUIRE(y.shape() == Shape{1, 2, 1, 1});
    CHECK(y.data()[0] == doctest::Approx(2.0));
    CHECK(y.data()[1] == doctest::Approx(15.0));
}
