// optimizer update rules against hand-computed steps
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include "lmlab/optim.hpp"
#include "lmlab/rng.hpp"
#include "lmlab/tensor.hpp"

using namespace lmlab;

namespace {

struct Fixture {
    Tensor<double> theta;
    opt::ParamRefs<double> params;

    Fixture() : theta({3}) {
        theta[0] = 1.0, theta[1] = -2.0, theta[2] = 0.5;
        params.emplace_back("theta", &theta);
    }
};

TensorMap<double> grads_of(double a, double b, double c) {
    Tensor<double> g({3});
    g[0] = a, g[1] = b, g[2] = c;
    TensorMap<double> m;
    m.add("theta", std::move(g));
    return m;
}

opt::OptimizerSpec spec_of(opt::Kind kind, double eta = 0.1) {
    opt::OptimizerSpec spec;
    spec.kind = kind;
    spec.eta = eta;
    spec.weight_decay = 0.0;
    return spec;
}

void check_theta(const Tensor<double>& theta, double a, double b, double c) {
    CHECK(theta[0] == doctest::Approx(a).epsilon(1e-12));
    CHECK(theta[1] == doctest::Approx(b).epsilon(1e-12));
    CHECK(theta[2] == doctest::Approx(c).epsilon(1e-12));
}

}  // namespace

TEST_CASE("optimizer names round-trip") {
    for (auto kind : {opt::Kind::SGD, opt::Kind::Adagrad, opt::Kind::RMSProp,
                      opt::Kind::Adam})
        CHECK(opt::kind_from_string(opt::to_string(kind)) == kind);
    CHECK_THROWS_AS(opt::kind_from_string("sgdm"), std::invalid_argument);
}

TEST_CASE("spec validation") {
    opt::OptimizerSpec spec;
    CHECK_NOTHROW(spec.validate());
    spec.eta = 0.0;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = {}, spec.beta2 = 1.0;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = {}, spec.weight_decay = -0.1;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = {}, spec.epsilon = 0.0;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

// two hand-traced steps per rule: theta0 = (1, -2, 0.5), eta = 0.1,
// g1 = (0.1, -0.2, 0.4), g2 = (-0.3, 0.1, 0.2)

TEST_CASE("sgd follows theta -= eta * g") {
    Fixture f;
    auto spec = spec_of(opt::Kind::SGD);
    auto state = opt::make_state(spec, f.params);
    opt::step(spec, state, f.params, grads_of(0.1, -0.2, 0.4));
    check_theta(f.theta, 0.99, -1.98, 0.46);
    opt::step(spec, state, f.params, grads_of(-0.3, 0.1, 0.2));
    check_theta(f.theta, 1.02, -1.99, 0.44);
    CHECK(state.t == 2);
}

TEST_CASE("adagrad accumulates squared gradients") {
    Fixture f;
    auto spec = spec_of(opt::Kind::Adagrad);
    auto state = opt::make_state(spec, f.params);
    opt::step(spec, state, f.params, grads_of(0.1, -0.2, 0.4));
    check_theta(f.theta, 0.900000009999999, -1.9000000049999998, 0.4000000024999999);
    CHECK(state.g_sum.at("theta")[0] == doctest::Approx(0.01).epsilon(1e-15));
    opt::step(spec, state, f.params, grads_of(-0.3, 0.1, 0.2));
    check_theta(f.theta, 0.99486833680505047, -1.9447213625499956, 0.35527864395000412);
    CHECK(state.g_sum.at("theta")[0] == doctest::Approx(0.10).epsilon(1e-15));
}

TEST_CASE("rmsprop tracks a squared-gradient moving average") {
    Fixture f;
    auto spec = spec_of(opt::Kind::RMSProp);
    auto state = opt::make_state(spec, f.params);
    opt::step(spec, state, f.params, grads_of(0.1, -0.2, 0.4));
    check_theta(f.theta, 0.68377233398313044, -1.6837722839831542, 0.18377225898316009);
    opt::step(spec, state, f.params, grads_of(-0.3, 0.1, 0.2));
    check_theta(f.theta, 0.98528364825786681, -1.8312142183989241, 0.036330313697827373);
}

TEST_CASE("adam omits bias correction by default") {
    Fixture f;
    auto spec = spec_of(opt::Kind::Adam);
    auto state = opt::make_state(spec, f.params);
    opt::step(spec, state, f.params, grads_of(0.1, -0.2, 0.4));
    check_theta(f.theta, 0.68377323397999980, -1.6837727339823715, 0.18377248398296442);
    opt::step(spec, state, f.params, grads_of(-0.3, 0.1, 0.2));
    check_theta(f.theta, 0.89378352474677336, -1.5705905271153889, -0.21236552027505940);
}

TEST_CASE("adam with bias correction restores the standard form") {
    Fixture f;
    auto spec = spec_of(opt::Kind::Adam);
    spec.adam_bias_correction = true;
    auto state = opt::make_state(spec, f.params);
    opt::step(spec, state, f.params, grads_of(0.1, -0.2, 0.4));
    // first corrected step reduces to the adagrad-like eta * g / (|g| + eps)
    check_theta(f.theta, 0.900000009999999, -1.9000000049999998, 0.4000000024999999);
    opt::step(spec, state, f.params, grads_of(-0.3, 0.1, 0.2));
    check_theta(f.theta, 0.94941899112006579, -1.8733663027186756, 0.30678204156711228);
}

TEST_CASE("zero gradients leave parameters bit-identical") {
    for (auto kind : {opt::Kind::SGD, opt::Kind::Adagrad, opt::Kind::RMSProp,
                      opt::Kind::Adam}) {
        Fixture f;
        Tensor<double> before = f.theta;
        auto spec = spec_of(kind);
        auto state = opt::make_state(spec, f.params);
        for (int i = 0; i < 3; ++i)
            opt::step(spec, state, f.params, grads_of(0.0, 0.0, 0.0));
        CHECK(std::memcmp(f.theta.data(), before.data(), sizeof(double) * 3) == 0);
    }
}

TEST_CASE("weight decay shrinks parameters before the update") {
    Fixture f;
    auto spec = spec_of(opt::Kind::SGD);
    spec.weight_decay = 0.5;
    auto state = opt::make_state(spec, f.params);
    opt::step(spec, state, f.params, grads_of(0.1, -0.2, 0.4));
    check_theta(f.theta, 0.94, -1.88, 0.435);

    // decay applies even when the gradient is zero (decoupled form)
    Fixture g;
    opt::step(spec, state, g.params, grads_of(0.0, 0.0, 0.0));
    const double shrink = 1.0 - 0.1 * 0.5;
    CHECK(g.theta[0] == 1.0 * shrink);
    CHECK(g.theta[1] == -2.0 * shrink);
    CHECK(g.theta[2] == 0.5 * shrink);
}

TEST_CASE("adagrad accumulator never decreases") {
    Fixture f;
    auto spec = spec_of(opt::Kind::Adagrad);
    auto state = opt::make_state(spec, f.params);
    Rng rng(42);
    std::vector<double> prev(3, 0.0);
    for (int s = 0; s < 50; ++s) {
        opt::step(spec, state, f.params,
                  grads_of(rng.normal(), rng.normal(), rng.normal()));
        for (int i = 0; i < 3; ++i) {
            CHECK(state.g_sum.at("theta")[i] >= prev[i]);
            prev[i] = state.g_sum.at("theta")[i];
        }
    }
}

TEST_CASE("identical runs stay bitwise identical") {
    for (auto kind : {opt::Kind::SGD, opt::Kind::Adagrad, opt::Kind::RMSProp,
                      opt::Kind::Adam}) {
        Fixture a, b;
        auto spec = spec_of(kind);
        spec.weight_decay = 0.01;
        auto sa = opt::make_state(spec, a.params);
        auto sb = opt::make_state(spec, b.params);
        Rng ra(7), rb(7);
        for (int s = 0; s < 20; ++s) {
            opt::step(spec, sa, a.params, grads_of(ra.normal(), ra.normal(), ra.normal()));
            opt::step(spec, sb, b.params, grads_of(rb.normal(), rb.normal(), rb.normal()));
        }
        CHECK(std::memcmp(a.theta.data(), b.theta.data(), sizeof(double) * 3) == 0);
    }
}

TEST_CASE("every rule minimizes a separable quadratic") {
    // grad of 0.5 * ||theta||^2 is theta itself; adagrad's 1/sqrt(t) decay
    // needs a larger rate to cover the same ground in 500 steps
    struct Case {
        opt::Kind kind;
        double eta;
    };
    for (const Case& c : {Case{opt::Kind::SGD, 0.05}, Case{opt::Kind::Adagrad, 0.5},
                          Case{opt::Kind::RMSProp, 0.05}, Case{opt::Kind::Adam, 0.05}}) {
        Tensor<double> theta({3});
        theta[0] = 5.0, theta[1] = -8.0, theta[2] = 3.0;
        opt::ParamRefs<double> params = {{"theta", &theta}};
        auto spec = spec_of(c.kind, c.eta);
        auto state = opt::make_state(spec, params);
        const double start = 25.0 + 64.0 + 9.0;
        for (int s = 0; s < 500; ++s)
            opt::step(spec, state, params, grads_of(theta[0], theta[1], theta[2]));
        double end = theta[0] * theta[0] + theta[1] * theta[1] + theta[2] * theta[2];
        INFO(opt::to_string(c.kind));
        CHECK(end / start < 0.01);
    }
}

TEST_CASE("gradient validation names the offending tensor") {
    Fixture f;
    auto spec = spec_of(opt::Kind::SGD);
    auto state = opt::make_state(spec, f.params);

    CHECK_THROWS_WITH_AS(
        opt::step(spec, state, f.params,
                  grads_of(0.1, std::numeric_limits<double>::quiet_NaN(), 0.0)),
        "optim: non-finite gradient in tensor theta", std::runtime_error);
    CHECK_THROWS_AS(
        opt::step(spec, state, f.params,
                  grads_of(0.1, std::numeric_limits<double>::infinity(), 0.0)),
        std::runtime_error);

    TensorMap<double> wrong_key;
    wrong_key.add("other", Tensor<double>({3}));
    CHECK_THROWS_AS(opt::step(spec, state, f.params, wrong_key), std::invalid_argument);

    TensorMap<double> wrong_shape;
    wrong_shape.add("theta", Tensor<double>({4}));
    CHECK_THROWS_AS(opt::step(spec, state, f.params, wrong_shape), std::invalid_argument);

    TensorMap<double> empty;
    CHECK_THROWS_AS(opt::step(spec, state, f.params, empty), std::invalid_argument);
}

TEST_CASE("accumulation buffer releases the mean on the target-th call") {
    Fixture f;
    opt::AccumulationBuffer<double> buffer(f.params, 4);
    CHECK(buffer.target() == 4);

    // values with short mantissas keep the sums exact
    CHECK(!buffer.add(grads_of(0.125, -0.75, 2.5)).has_value());
    CHECK(buffer.micro_steps_seen() == 1);
    CHECK(!buffer.add(grads_of(0.375, 0.25, -1.5)).has_value());
    CHECK(!buffer.add(grads_of(-0.5, 1.0, 0.5)).has_value());
    auto mean = buffer.add(grads_of(1.0, -0.5, 2.0));
    REQUIRE(mean.has_value());
    CHECK(mean->at("theta")[0] == (0.125 + 0.375 - 0.5 + 1.0) / 4.0);
    CHECK(mean->at("theta")[1] == (-0.75 + 0.25 + 1.0 - 0.5) / 4.0);
    CHECK(mean->at("theta")[2] == (2.5 - 1.5 + 0.5 + 2.0) / 4.0);
    CHECK(buffer.micro_steps_seen() == 0);  // reset for the next cycle

    // identical micro-batches reproduce the single gradient exactly
    for (int i = 0; i < 3; ++i) CHECK(!buffer.add(grads_of(0.25, -0.5, 1.25)).has_value());
    auto repeat = buffer.add(grads_of(0.25, -0.5, 1.25));
    REQUIRE(repeat.has_value());
    CHECK(repeat->at("theta")[0] == 0.25);
    CHECK(repeat->at("theta")[1] == -0.5);
    CHECK(repeat->at("theta")[2] == 1.25);
}

TEST_CASE("accumulation target one passes gradients straight through") {
    Fixture f;
    opt::AccumulationBuffer<double> buffer(f.params, 1);
    auto out = buffer.add(grads_of(0.1, 0.2, 0.3));
    REQUIRE(out.has_value());
    CHECK(out->at("theta")[0] == 0.1);
    CHECK(out->at("theta")[1] == 0.2);
    CHECK(out->at("theta")[2] == 0.3);
}

TEST_CASE("accumulated updates match one step on the mean gradient") {
    Fixture accumulated, direct;
    auto spec = spec_of(opt::Kind::Adam);
    auto sa = opt::make_state(spec, accumulated.params);
    auto sd = opt::make_state(spec, direct.params);

    opt::AccumulationBuffer<double> buffer(accumulated.params, 2);
    CHECK(!buffer.add(grads_of(0.5, -1.0, 0.25)).has_value());
    auto mean = buffer.add(grads_of(0.25, 0.5, -0.75));
    REQUIRE(mean.has_value());
    opt::step(spec, sa, accumulated.params, *mean);
    opt::step(spec, sd, direct.params, grads_of(0.375, -0.25, -0.25));
    CHECK(std::memcmp(accumulated.theta.data(), direct.theta.data(),
                      sizeof(double) * 3) == 0);
}

TEST_CASE("accumulation buffer validates its inputs") {
    Fixture f;
    CHECK_THROWS_AS(opt::AccumulationBuffer<double>(f.params, 0), std::invalid_argument);
    opt::AccumulationBuffer<double> buffer(f.params, 2);
    TensorMap<double> wrong;
    wrong.add("other", Tensor<double>({3}));
    CHECK_THROWS_AS(buffer.add(wrong), std::invalid_argument);
}
