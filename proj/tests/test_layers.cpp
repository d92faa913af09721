#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "refgame/gradcheck.hpp"
#include "refgame/layers.hpp"

using refgame::Rng;
namespace ad = refgame::ad;
namespace nn = refgame::nn;
using ad::TensorPtr;

namespace {

TensorPtr weighted(const TensorPtr& t, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(static_cast<size_t>(t->numel()));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return ad::dot(ad::reshape(t, {t->numel()}), ad::constant({t->numel()}, w));
}

void fill_uniform(const TensorPtr& t, Rng& rng, double lo, double hi) {
    for (int64_t i = 0; i < t->numel(); ++i) t->write(i, rng.uniform(lo, hi));
}

}  // namespace

// ---------------------------------------------------------------- linear

TEST_CASE("linear with identity weight and zero bias returns its input") {
    Rng rng(1);
    nn::Linear lin(3, 3, rng);
    for (int64_t i = 0; i < 9; ++i) lin.w->write(i, i % 4 == 0 ? 1.0 : 0.0);
    auto x = ad::constant({3}, {0.3, -1.2, 2.5});
    auto y = lin.forward(x);
    for (int64_t i = 0; i < 3; ++i) CHECK(y->read(i) == doctest::Approx(x->read(i)));
}

TEST_CASE("linear with zero weight returns its bias") {
    Rng rng(2);
    nn::Linear lin(4, 2, rng);
    for (int64_t i = 0; i < 8; ++i) lin.w->write(i, 0.0);
    lin.b->write(0, 0.7);
    lin.b->write(1, -0.1);
    auto y = lin.forward(ad::constant({4}, {1, 2, 3, 4}));
    CHECK(y->read(0) == doctest::Approx(0.7));
    CHECK(y->read(1) == doctest::Approx(-0.1));
}

TEST_CASE("linear matches an explicit matrix-vector product") {
    Rng rng(3);
    nn::Linear lin(5, 3, rng);
    auto x = ad::make_tensor({5});
    fill_uniform(x, rng, -2.0, 2.0);
    auto y = lin.forward(x);
    for (int64_t o = 0; o < 3; ++o) {
        double acc = lin.b->read(o);
        for (int64_t i = 0; i < 5; ++i) acc += x->read(i) * lin.w->read(i * 3 + o);
        CHECK(y->read(o) == doctest::Approx(acc).epsilon(1e-5));
    }
}

TEST_CASE("linear rejects inputs of the wrong width") {
    Rng rng(4);
    nn::Linear lin(5, 3, rng);
    CHECK_THROWS_AS(lin.forward(ad::make_tensor({4})), std::runtime_error);
    CHECK_THROWS_AS(lin.forward(ad::make_tensor({2, 4})), std::runtime_error);
}

TEST_CASE("initialization stays inside the fan-in bound") {
    Rng rng(5);
    nn::Linear lin(16, 8, rng);
    const double k = 1.0 / 4.0;
    for (int64_t i = 0; i < lin.w->numel(); ++i) {
        CHECK(lin.w->read(i) >= -k);
        CHECK(lin.w->read(i) <= k);
    }
    for (int64_t i = 0; i < 8; ++i) CHECK(lin.b->read(i) == 0.0);
}

// ---------------------------------------------------------------- gru

TEST_CASE("gru step with all-zero parameters halves the state") {
    Rng rng(6);
    nn::GruCell cell(3, 4, rng);
    nn::ParamList ps;
    cell.params(ps, "gru");
    for (auto& p : ps)
        for (int64_t i = 0; i < p.t->numel(); ++i) p.t->write(i, 0.0);

    auto h = ad::constant({1, 4}, {0.8, -0.4, 0.2, 0.6});
    auto x = ad::constant({1, 3}, {1.0, 2.0, 3.0});
    auto h2 = cell.step(h, x);
    for (int64_t i = 0; i < 4; ++i) CHECK(h2->read(i) == doctest::Approx(0.5 * h->read(i)));

    auto h0 = ad::make_tensor({1, 4});
    auto h3 = cell.step(h0, x);
    for (int64_t i = 0; i < 4; ++i) CHECK(h3->read(i) == doctest::Approx(0.0));
}

TEST_CASE("gru state stays bounded for arbitrary finite inputs") {
    Rng rng(7);
    nn::GruCell cell(6, 8, rng);
    nn::ParamList ps;
    cell.params(ps, "gru");

    // moderate regime: strictly inside (-1,1)
    for (auto& p : ps) fill_uniform(p.t, rng, -2.0, 2.0);
    auto h = ad::make_tensor({2, 8});
    fill_uniform(h, rng, -0.9, 0.9);
    auto x = ad::make_tensor({2, 6});
    fill_uniform(x, rng, -3.0, 3.0);
    for (int step = 0; step < 5; ++step) {
        h = cell.step(h, x);
        for (int64_t i = 0; i < h->numel(); ++i) {
            CHECK(h->read(i) > -1.0);
            CHECK(h->read(i) < 1.0);
        }
    }

    // saturating regime: tanh rounds to +-1 in float, but the gate can
    // never push the state past the unit box
    for (auto& p : ps) fill_uniform(p.t, rng, -50.0, 50.0);
    fill_uniform(x, rng, -100.0, 100.0);
    for (int step = 0; step < 5; ++step) {
        h = cell.step(h, x);
        for (int64_t i = 0; i < h->numel(); ++i) {
            CHECK(h->read(i) >= -1.0);
            CHECK(h->read(i) <= 1.0);
        }
    }
}

TEST_CASE("gru step rejects mismatched dimensions") {
    Rng rng(8);
    nn::GruCell cell(3, 4, rng);
    CHECK_THROWS_AS(cell.step(ad::make_tensor({1, 5}), ad::make_tensor({1, 3})), std::runtime_error);
    CHECK_THROWS_AS(cell.step(ad::make_tensor({1, 4}), ad::make_tensor({2, 3})), std::runtime_error);
}

TEST_CASE("gru gradients match finite differences") {
    ad::CheckModeGuard guard;
    Rng rng(9);
    nn::GruCell cell(4, 5, rng);
    auto h = ad::make_tensor({2, 5}, true);
    fill_uniform(h, rng, -0.9, 0.9);
    auto x = ad::make_tensor({2, 4}, true);
    fill_uniform(x, rng, -1.0, 1.0);
    std::vector<TensorPtr> leaves = {h, x};
    nn::ParamList ps;
    cell.params(ps, "gru");
    for (auto& p : ps) leaves.push_back(p.t);

    auto rep = ad::gradient_check([&] { return ad::sum(cell.step(h, x)); }, leaves);
    CHECK(rep.max_rel_err < 1e-4);
}

// ---------------------------------------------------------------- cnn

TEST_CASE("cnn output width follows the input size") {
    Rng rng(10);
    nn::CnnEncoder enc64(64, rng);
    CHECK(enc64.out_dim() == 1024);
    nn::CnnEncoder enc32(32, rng);
    CHECK(enc32.out_dim() == 256);
    nn::CnnEncoder enc16(16, rng);
    CHECK(enc16.out_dim() == 64);

    auto x = ad::make_tensor({1, 3, 16, 16});
    fill_uniform(x, rng, 0.0, 1.0);
    auto y = enc16.encode(x, false);
    CHECK(y->shape == std::vector<int64_t>{1, 64});

    CHECK_THROWS_AS(nn::CnnEncoder(20, rng), std::runtime_error);
    CHECK_THROWS_AS(enc16.encode(ad::make_tensor({1, 3, 20, 20}), false), std::runtime_error);
    CHECK_THROWS_AS(enc16.encode(ad::make_tensor({1, 16, 16}), false), std::runtime_error);
}

TEST_CASE("fresh cnn in eval mode maps a zero image to zero features") {
    Rng rng(11);
    nn::CnnEncoder enc(16, rng);
    auto y = enc.encode(ad::make_tensor({1, 3, 16, 16}), false);
    for (int64_t i = 0; i < y->numel(); ++i) CHECK(y->read(i) == doctest::Approx(0.0));
}

TEST_CASE("cnn encoding is deterministic for fixed parameters") {
    Rng rng(12);
    nn::CnnEncoder enc(16, rng);
    auto x = ad::make_tensor({2, 3, 16, 16});
    fill_uniform(x, rng, 0.0, 1.0);
    ad::NoGradGuard ng;
    auto a = enc.encode(x, false);
    auto b = enc.encode(x, false);
    for (int64_t i = 0; i < a->numel(); ++i) CHECK(a->read(i) == b->read(i));
}

TEST_CASE("cnn gradients match finite differences on a coordinate subsample") {
    ad::CheckModeGuard guard;
    Rng rng(13);
    nn::CnnEncoder enc(16, rng);
    auto x = ad::make_tensor({2, 3, 16, 16}, true);
    fill_uniform(x, rng, 0.05, 1.0);
    std::vector<TensorPtr> leaves = {x};
    nn::ParamList ps;
    enc.params(ps, "enc");
    for (auto& p : ps) leaves.push_back(p.t);

    auto rep = ad::gradient_check([&] { return weighted(enc.encode(x, true), 77); }, leaves, 1e-5,
                                  80, 4242);
    CHECK(rep.coords_checked == 80);
    CHECK(rep.max_rel_err < 1e-4);
}

// ---------------------------------------------------------------- adam

TEST_CASE("adam leaves parameters alone when gradients are zero") {
    Rng rng(14);
    nn::Linear lin(3, 3, rng);
    nn::ParamList ps;
    lin.params(ps, "lin");
    const auto before = lin.w->to_vector();
    nn::Adam opt(ps, 0.1);
    opt.step();
    opt.step();
    const auto after = lin.w->to_vector();
    for (size_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
}

TEST_CASE("adam's first step moves each weight by about lr against the gradient sign") {
    auto w = ad::make_tensor({3}, true);
    w->write(0, 1.0);
    w->write(1, -2.0);
    w->write(2, 0.5);
    float* g = w->grad<float>();
    g[0] = 0.5f;
    g[1] = -0.25f;
    g[2] = 3.0f;
    nn::Adam opt({{"w", w}}, 0.001);
    opt.step();
    CHECK(w->read(0) == doctest::Approx(1.0 - 0.001).epsilon(1e-4));
    CHECK(w->read(1) == doctest::Approx(-2.0 + 0.001).epsilon(1e-4));
    CHECK(w->read(2) == doctest::Approx(0.5 - 0.001).epsilon(1e-4));
}

TEST_CASE("adam shrinks the weight every step on a quadratic bowl") {
    auto w = ad::make_tensor({1}, true);
    w->write(0, 1.0);
    nn::Adam opt({{"w", w}}, 0.1);
    double prev = 1.0;
    for (int i = 0; i < 10; ++i) {
        w->zero_grad();
        auto loss = ad::mul(w, w);
        ad::backward(ad::sum(loss));
        opt.step();
        CHECK(std::fabs(w->read(0)) < std::fabs(prev));
        prev = w->read(0);
    }
}

TEST_CASE("adam names the parameter carrying a non-finite gradient") {
    auto w = ad::make_tensor({2}, true);
    w->grad<float>()[1] = std::numeric_limits<float>::quiet_NaN();
    nn::Adam opt({{"w_hidden", w}}, 0.01);
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("w_hidden"), std::runtime_error);
}
