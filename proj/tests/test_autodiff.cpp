#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dualseg/gradcheck.hpp"
#include "dualseg/ops.hpp"

using namespace dualseg;

TEST_CASE("backward of sum fills leaves with ones") {
    Tape<double> tape;
    Tensor<double> x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor<double> loss = ops::sum_all(tape, x);
    tape.backward(loss);
    for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward of sum of squares is 2x") {
    Tape<double> tape;
    Tensor<double> x = Tensor<double>::from({3}, {1, 2, 3}, true);
    Tensor<double> loss = ops::sum_all(tape, ops::mul(tape, x, x));
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
    CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("backward requires a scalar loss") {
    Tape<double> tape;
    Tensor<double> x = Tensor<double>::from({2}, {1, 2}, true);
    Tensor<double> y = ops::mul(tape, x, x);
    CHECK_THROWS_AS(tape.backward(y), ValueError);
}

TEST_CASE("a consumed graph refuses a second backward") {
    Tape<double> tape;
    Tensor<double> x = Tensor<double>::from({2}, {1, 2}, true);
    Tensor<double> loss = ops::sum_all(tape, x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ValueError);
}

TEST_CASE("gradients accumulate additively across steps") {
    Tensor<double> x = Tensor<double>::from({2}, {1.0, 2.0}, true);
    for (int step = 0; step < 2; ++step) {
        Tape<double> tape;
        Tensor<double> loss = ops::sum_all(tape, x);
        tape.backward(loss);
    }
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == 2.0);
}

TEST_CASE("disabled tape records nothing and propagates no grad flags") {
    Tape<double> tape(false);
    Tensor<double> x = Tensor<double>::from({2}, {1, 2}, true);
    Tensor<double> y = ops::mul(tape, x, x);
    CHECK(tape.size() == 0);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("every op passes central finite differences over 10 seeds") {
    auto results = gradcheck::run_op_suite(42, 10, 1e-4);
    REQUIRE(!results.empty());
    for (const auto& r : results) {
        INFO(r.op, " max_rel_err=", r.max_rel_err);
        CHECK(r.pass);
    }
}

TEST_CASE("corrupted analytic gradient is caught (negative control)") {
    auto results = gradcheck::run_op_suite(42, 2, 1e-4, "conv2d");
    bool conv_failed = false;
    for (const auto& r : results)
        if (r.op == "conv2d" && !r.pass) conv_failed = true;
    CHECK(conv_failed);
}
