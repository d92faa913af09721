#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "refgame/gradcheck.hpp"
#include "refgame/ops.hpp"
#include "refgame/rng.hpp"
#include "refgame/tensor.hpp"

using refgame::Rng;
namespace ad = refgame::ad;
using ad::TensorPtr;

namespace {

TensorPtr rand_param(std::vector<int64_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = ad::make_tensor(std::move(shape), true);
    for (int64_t i = 0; i < t->numel(); ++i) t->write(i, rng.uniform(lo, hi));
    return t;
}

// scalarizes a tensor with fixed random weights so every coordinate matters
TensorPtr weighted(const TensorPtr& t, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> w(static_cast<size_t>(t->numel()));
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return ad::dot(ad::reshape(t, {t->numel()}), ad::constant({t->numel()}, w));
}

}  // namespace

// ---------------------------------------------------------------- rng

TEST_CASE("same seed gives the same stream") {
    Rng a(7), b(7);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("uniform stays in [0,1) and covers the range") {
    Rng rng(1);
    double lo = 1.0, hi = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    CHECK(lo < 0.01);
    CHECK(hi > 0.99);
}

TEST_CASE("below has no modulo bias visible at coarse scale") {
    Rng rng(2);
    std::vector<int> counts(5, 0);
    for (int i = 0; i < 50000; ++i) ++counts[static_cast<size_t>(rng.below(5))];
    for (int c : counts) CHECK(std::abs(c - 10000) < 400);
}

TEST_CASE("categorical follows the weights") {
    Rng rng(3);
    std::vector<double> w = {3.0, 1.0};
    int first = 0;
    const int n = 40000;
    for (int i = 0; i < n; ++i)
        if (rng.categorical(w) == 0) ++first;
    CHECK(std::abs(first / static_cast<double>(n) - 0.75) < 0.01);
}

TEST_CASE("shuffle is a permutation") {
    Rng rng(4);
    std::vector<int> v(20);
    for (int i = 0; i < 20; ++i) v[static_cast<size_t>(i)] = i;
    rng.shuffle(v);
    std::set<int> s(v.begin(), v.end());
    CHECK(s.size() == 20);
}

TEST_CASE("split streams differ from the parent and from each other") {
    Rng rng(5);
    Rng a = rng.split(0), b = rng.split(1);
    CHECK(a.next_u64() != b.next_u64());
    CHECK(rng.split(0).next_u64() == Rng(5).split(0).next_u64());
}

TEST_CASE("rng state round-trips through a string") {
    Rng rng(6);
    for (int i = 0; i < 17; ++i) rng.next_u64();
    const std::string s = rng.state_string();
    Rng other(0);
    other.restore_state(s);
    for (int i = 0; i < 100; ++i) CHECK(rng.next_u64() == other.next_u64());
}

TEST_CASE("normal and gumbel draws are finite with sane moments") {
    Rng rng(7);
    double sum = 0.0, sum2 = 0.0;
    const int n = 50000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        CHECK(std::isfinite(x));
        sum += x;
        sum2 += x * x;
    }
    CHECK(std::abs(sum / n) < 0.02);
    CHECK(std::abs(sum2 / n - 1.0) < 0.05);
    double gsum = 0.0;
    for (int i = 0; i < n; ++i) gsum += rng.gumbel();
    CHECK(std::abs(gsum / n - 0.5772) < 0.02);  // Euler-Mascheroni mean
}

// ---------------------------------------------------------------- forward oracles

TEST_CASE("matmul matches a hand-computed product") {
    auto a = ad::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = ad::constant({3, 2}, {7, 8, 9, 10, 11, 12});
    auto c = ad::matmul(a, b);
    CHECK(c->read(0) == doctest::Approx(58));
    CHECK(c->read(1) == doctest::Approx(64));
    CHECK(c->read(2) == doctest::Approx(139));
    CHECK(c->read(3) == doctest::Approx(154));
}

TEST_CASE("conv2d with all-ones input and kernel counts covered cells") {
    // 4x4 ones, one 3x3 ones filter, zero padding: corners see 4 cells,
    // edges 6, interior 9
    auto x = ad::full({1, 1, 4, 4}, 1.0);
    auto w = ad::full({1, 1, 3, 3}, 1.0);
    auto b = ad::full({1}, 0.0);
    auto y = ad::conv2d(x, w, b);
    const std::vector<double> want = {4, 6, 6, 4, 6, 9, 9, 6, 6, 9, 9, 6, 4, 6, 6, 4};
    for (int64_t i = 0; i < 16; ++i) CHECK(y->read(i) == doctest::Approx(want[static_cast<size_t>(i)]));
}

TEST_CASE("conv2d bias shifts every output cell") {
    auto x = ad::full({1, 1, 4, 4}, 1.0);
    auto w = ad::full({2, 1, 3, 3}, 0.0);
    auto b = ad::constant({2}, {1.5, -2.0});
    auto y = ad::conv2d(x, w, b);
    for (int64_t i = 0; i < 16; ++i) CHECK(y->read(i) == doctest::Approx(1.5));
    for (int64_t i = 16; i < 32; ++i) CHECK(y->read(i) == doctest::Approx(-2.0));
}

TEST_CASE("maxpool2d picks window maxima and routes gradient to them") {
    std::vector<double> vals(16);
    for (int i = 0; i < 16; ++i) vals[static_cast<size_t>(i)] = i;
    auto x = ad::make_tensor({1, 1, 4, 4}, true);
    for (int64_t i = 0; i < 16; ++i) x->write(i, vals[static_cast<size_t>(i)]);
    auto y = ad::maxpool2d(x);
    CHECK(y->read(0) == doctest::Approx(5));
    CHECK(y->read(1) == doctest::Approx(7));
    CHECK(y->read(2) == doctest::Approx(13));
    CHECK(y->read(3) == doctest::Approx(15));
    ad::backward(ad::sum(y));
    for (int64_t i = 0; i < 16; ++i) {
        const bool winner = i == 5 || i == 7 || i == 13 || i == 15;
        CHECK(x->grad_read(i) == doctest::Approx(winner ? 1.0 : 0.0));
    }
}

TEST_CASE("softmax of a constant row is uniform") {
    auto x = ad::full({4}, 0.0);
    auto y = ad::softmax(x);
    for (int64_t i = 0; i < 4; ++i) CHECK(y->read(i) == doctest::Approx(0.25));
}

TEST_CASE("log_softmax agrees with log of softmax") {
    ad::CheckModeGuard guard;
    Rng rng(11);
    auto x = rand_param({3, 5}, rng, -3.0, 3.0);
    auto a = ad::log_softmax(x);
    auto b = ad::softmax(x);
    for (int64_t i = 0; i < 15; ++i)
        CHECK(a->read(i) == doctest::Approx(std::log(b->read(i))).epsilon(1e-12));
}

TEST_CASE("batchnorm2d normalizes the batch and tracks running stats") {
    auto x = ad::constant({1, 1, 2, 2}, {1, 2, 3, 4});
    auto gamma = ad::constant({1}, {2.0});
    auto beta = ad::constant({1}, {0.5});
    auto rm = ad::full({1}, 0.0);
    auto rv = ad::full({1}, 1.0);
    auto y = ad::batchnorm2d(x, gamma, beta, rm, rv, true);
    const double invstd = 1.0 / std::sqrt(1.25 + 1e-5);
    CHECK(y->read(0) == doctest::Approx((1 - 2.5) * invstd * 2.0 + 0.5));
    CHECK(y->read(3) == doctest::Approx((4 - 2.5) * invstd * 2.0 + 0.5));
    CHECK(rm->read(0) == doctest::Approx(0.25));
    CHECK(rv->read(0) == doctest::Approx(0.9 * 1.0 + 0.1 * 1.25));

    // eval mode reads the running stats instead of the batch
    auto z = ad::batchnorm2d(x, gamma, beta, rm, rv, false);
    const double is = 1.0 / std::sqrt(rv->read(0) + 1e-5);
    CHECK(z->read(0) == doctest::Approx((1 - 0.25) * is * 2.0 + 0.5));
    CHECK(rm->read(0) == doctest::Approx(0.25));  // unchanged in eval mode
}

TEST_CASE("embedding selects rows and accumulates duplicate-id gradients") {
    auto table = ad::make_tensor({3, 2}, true);
    for (int64_t i = 0; i < 6; ++i) table->write(i, i);
    auto out = ad::embedding(table, {2, 0, 2});
    CHECK(out->read(0) == doctest::Approx(4));
    CHECK(out->read(1) == doctest::Approx(5));
    CHECK(out->read(2) == doctest::Approx(0));
    ad::backward(ad::sum(out));
    CHECK(table->grad_read(0) == doctest::Approx(1));
    CHECK(table->grad_read(2) == doctest::Approx(0));
    CHECK(table->grad_read(4) == doctest::Approx(2));  // id 2 used twice
    CHECK_THROWS_AS(ad::embedding(table, {3}), std::runtime_error);
}

TEST_CASE("concat joins along both axes") {
    auto a = ad::constant({2, 2}, {1, 2, 3, 4});
    auto b = ad::constant({2, 1}, {5, 6});
    auto rows = ad::concat({a, a}, 0);
    CHECK(rows->shape == std::vector<int64_t>{4, 2});
    CHECK(rows->read(6) == doctest::Approx(3));
    auto cols = ad::concat({a, b}, 1);
    CHECK(cols->shape == std::vector<int64_t>{2, 3});
    const std::vector<double> want = {1, 2, 5, 3, 4, 6};
    for (int64_t i = 0; i < 6; ++i) CHECK(cols->read(i) == doctest::Approx(want[static_cast<size_t>(i)]));
}

TEST_CASE("repeat_rows and rowdot agree with the obvious loops") {
    auto x = ad::constant({2, 3}, {1, 2, 3, 4, 5, 6});
    auto r = ad::repeat_rows(x, 2);
    CHECK(r->shape == std::vector<int64_t>{4, 3});
    CHECK(r->read(3) == doctest::Approx(1));
    CHECK(r->read(9) == doctest::Approx(4));
    auto d = ad::rowdot(x, x);
    CHECK(d->read(0) == doctest::Approx(14));
    CHECK(d->read(1) == doctest::Approx(77));
}

// ---------------------------------------------------------------- tape mechanics

TEST_CASE("shared subgraphs accumulate like their expanded trees") {
    ad::CheckModeGuard guard;
    auto x = ad::make_tensor({3}, true);
    for (int64_t i = 0; i < 3; ++i) x->write(i, 0.5 + i);

    auto s = ad::mul(x, x);
    ad::backward(ad::sum(ad::add(s, s)));  // same node used twice
    std::vector<double> dag_grad = {x->grad_read(0), x->grad_read(1), x->grad_read(2)};

    x->zero_grad();
    ad::backward(ad::sum(ad::add(ad::mul(x, x), ad::mul(x, x))));
    for (int64_t i = 0; i < 3; ++i) {
        CHECK(dag_grad[static_cast<size_t>(i)] == doctest::Approx(x->grad_read(i)).epsilon(1e-12));
        CHECK(dag_grad[static_cast<size_t>(i)] == doctest::Approx(4.0 * x->read(i)).epsilon(1e-12));
    }
}

TEST_CASE("leaf gradients accumulate across backward calls, interiors reset") {
    auto x = ad::make_tensor({2}, true);
    x->write(0, 2.0);
    x->write(1, 3.0);
    auto y = ad::sum(ad::mul(x, x));
    ad::backward(y);
    CHECK(x->grad_read(0) == doctest::Approx(4.0));
    ad::backward(y);
    CHECK(x->grad_read(0) == doctest::Approx(8.0));  // leaf accumulated
    CHECK(x->grad_read(1) == doctest::Approx(12.0));
}

TEST_CASE("backward rejects detached and non-scalar roots") {
    auto x = ad::make_tensor({2}, true);
    x->write(0, 1.0);
    x->write(1, 2.0);
    {
        ad::NoGradGuard ng;
        auto y = ad::sum(ad::mul(x, x));
        CHECK_THROWS_AS(ad::backward(y), std::runtime_error);
    }
    auto z = ad::mul(x, x);
    CHECK_THROWS_AS(ad::backward(z), std::runtime_error);
}

TEST_CASE("shape errors name the offending op") {
    auto a = ad::make_tensor({2, 3});
    auto b = ad::make_tensor({2, 3});
    try {
        ad::matmul(a, b);
        FAIL("expected a shape error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("matmul") != std::string::npos);
        CHECK(std::string(e.what()).find("(2,3)") != std::string::npos);
    }
}

TEST_CASE("non-finite results are an error, not a value") {
    auto big = ad::full({2}, 1e30f);
    CHECK_THROWS_WITH_AS(ad::mul(big, big), doctest::Contains("overflow"), std::runtime_error);
}

// ---------------------------------------------------------------- gumbel-softmax

TEST_CASE("gumbel-softmax soft samples lie on the simplex, hard ones are one-hot") {
    ad::CheckModeGuard guard;
    Rng rng(21);
    auto logits = rand_param({4, 6}, rng, -2.0, 2.0);
    auto soft = ad::gumbel_softmax_st(logits, 1.0, false, rng);
    for (int64_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (int64_t i = 0; i < 6; ++i) {
            CHECK(soft->read(r * 6 + i) > 0.0);
            s += soft->read(r * 6 + i);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
    auto hard = ad::gumbel_softmax_st(logits, 1.0, true, rng);
    for (int64_t r = 0; r < 4; ++r) {
        int ones = 0;
        for (int64_t i = 0; i < 6; ++i) {
            const double v = hard->read(r * 6 + i);
            CHECK((v == 0.0 || v == 1.0));
            if (v == 1.0) ++ones;
        }
        CHECK(ones == 1);
    }
}

TEST_CASE("hard gumbel-softmax samples follow the softmax distribution") {
    // logits (log 3, 0) put 3/4 of the mass on the first symbol
    auto logits = ad::constant({2}, {std::log(3.0), 0.0});
    Rng rng(22);
    int first = 0;
    const int n = 20000;
    {
        ad::NoGradGuard ng;
        for (int i = 0; i < n; ++i) {
            auto y = ad::gumbel_softmax_st(logits, 1.0, true, rng);
            if (y->read(0) == 1.0) ++first;
        }
    }
    CHECK(std::abs(first / static_cast<double>(n) - 0.75) < 0.015);
}

TEST_CASE("hard gumbel-softmax backpropagates the soft sample's jacobian") {
    ad::CheckModeGuard guard;
    Rng rng(23);
    auto logits = rand_param({2, 5}, rng, -1.0, 1.0);
    auto noise = ad::gumbel_noise_like(logits, rng);

    auto hard = ad::gumbel_softmax_st_with_noise(logits, 0.7, true, noise);
    ad::backward(weighted(hard, 99));
    std::vector<double> g_hard(10);
    for (int64_t i = 0; i < 10; ++i) g_hard[static_cast<size_t>(i)] = logits->grad_read(i);

    logits->zero_grad();
    auto soft = ad::gumbel_softmax_st_with_noise(logits, 0.7, false, noise);
    ad::backward(weighted(soft, 99));
    for (int64_t i = 0; i < 10; ++i)
        CHECK(g_hard[static_cast<size_t>(i)] == doctest::Approx(logits->grad_read(i)).epsilon(1e-12));
}

// ---------------------------------------------------------------- finite differences

TEST_CASE("elementwise and linear ops pass finite-difference checks") {
    ad::CheckModeGuard guard;
    Rng rng(31);

    auto a = rand_param({3, 4}, rng);
    auto b = rand_param({3, 4}, rng);
    auto bias = rand_param({4}, rng);
    auto m1 = rand_param({3, 4}, rng);
    auto m2 = rand_param({4, 2}, rng);

    auto rep = ad::gradient_check(
        [&] {
            auto t = ad::add(ad::mul(a, b), ad::sub(a, b));
            t = ad::add(t, bias);
            t = ad::affine(t, 1.3, -0.2);
            auto mm = ad::matmul(ad::matmul(m1, m2), ad::reshape(ad::mul(m2, m2), {2, 4}));
            return ad::add(weighted(t, 1), weighted(mm, 2));
        },
        {a, b, bias, m1, m2});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("activations pass finite-difference checks away from kinks") {
    ad::CheckModeGuard guard;
    Rng rng(32);
    auto x = ad::make_tensor({5, 3}, true);
    for (int64_t i = 0; i < 15; ++i) {
        double v = 0.0;
        while (std::fabs(v) < 0.05) v = rng.uniform(-1.5, 1.5);
        x->write(i, v);
    }
    auto rep = ad::gradient_check(
        [&] {
            auto t = ad::add(ad::relu(x), ad::mul(ad::tanh_op(x), ad::sigmoid(x)));
            return weighted(t, 3);
        },
        {x});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("softmax family passes finite-difference checks") {
    ad::CheckModeGuard guard;
    Rng rng(33);
    auto x = rand_param({4, 6}, rng, -2.0, 2.0);
    auto y = rand_param({6}, rng, -2.0, 2.0);
    auto rep = ad::gradient_check(
        [&] {
            return ad::add(weighted(ad::softmax(x), 4),
                           ad::add(weighted(ad::log_softmax(x), 5), weighted(ad::log_softmax(y), 6)));
        },
        {x, y});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("conv2d passes finite-difference checks") {
    ad::CheckModeGuard guard;
    Rng rng(34);
    auto x = rand_param({2, 2, 4, 4}, rng);
    auto w = rand_param({3, 2, 3, 3}, rng, -0.5, 0.5);
    auto b = rand_param({3}, rng, -0.5, 0.5);
    auto rep = ad::gradient_check([&] { return weighted(ad::conv2d(x, w, b), 7); }, {x, w, b});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("maxpool2d passes finite-difference checks on well-separated values") {
    ad::CheckModeGuard guard;
    Rng rng(35);
    std::vector<int> order(64);
    for (int i = 0; i < 64; ++i) order[static_cast<size_t>(i)] = i;
    rng.shuffle(order);
    auto x = ad::make_tensor({1, 4, 4, 4}, true);
    for (int64_t i = 0; i < 64; ++i) x->write(i, 0.01 * order[static_cast<size_t>(i)]);
    auto rep = ad::gradient_check([&] { return weighted(ad::maxpool2d(x), 8); }, {x});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("batchnorm2d passes finite-difference checks in both modes") {
    ad::CheckModeGuard guard;
    Rng rng(36);
    auto x = rand_param({3, 2, 2, 2}, rng);
    auto gamma = rand_param({2}, rng, 0.5, 1.5);
    auto beta = rand_param({2}, rng, -0.5, 0.5);
    auto rm = ad::full({2}, 0.0);
    auto rv = ad::full({2}, 1.0);

    auto rep = ad::gradient_check(
        [&] { return weighted(ad::batchnorm2d(x, gamma, beta, rm, rv, true), 9); }, {x, gamma, beta});
    CHECK(rep.max_rel_err < 1e-5);

    auto rep_eval = ad::gradient_check(
        [&] { return weighted(ad::batchnorm2d(x, gamma, beta, rm, rv, false), 10); }, {x, gamma, beta});
    CHECK(rep_eval.max_rel_err < 1e-6);
}

TEST_CASE("reductions, embedding and row ops pass finite-difference checks") {
    ad::CheckModeGuard guard;
    Rng rng(37);
    auto table = rand_param({5, 3}, rng);
    auto a = rand_param({4, 3}, rng);
    auto b = rand_param({2, 3}, rng);
    auto rep = ad::gradient_check(
        [&] {
            auto e = ad::embedding(table, {0, 4, 4, 2});
            auto r = ad::rowdot(e, a);
            auto rb = ad::repeat_rows(b, 2);
            return ad::add(ad::sum(ad::mul(e, rb)),
                           ad::add(ad::mean(ad::concat({r, r}, 0)), weighted(e, 11)));
        },
        {table, a, b});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("soft gumbel-softmax passes finite-difference checks with frozen noise") {
    ad::CheckModeGuard guard;
    Rng rng(38);
    auto logits = rand_param({3, 5}, rng, -1.0, 1.0);
    auto noise = ad::gumbel_noise_like(logits, rng);
    auto rep = ad::gradient_check(
        [&] { return weighted(ad::gumbel_softmax_st_with_noise(logits, 0.9, false, noise), 12); },
        {logits});
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("gradient check subsampling stays deterministic") {
    ad::CheckModeGuard guard;
    Rng rng(39);
    auto x = rand_param({6, 6}, rng);
    auto fn = [&] { return weighted(ad::mul(x, x), 13); };
    auto r1 = ad::gradient_check(fn, {x}, 1e-5, 10, 123);
    auto r2 = ad::gradient_check(fn, {x}, 1e-5, 10, 123);
    CHECK(r1.coords_checked == 10);
    CHECK(r1.max_rel_err == doctest::Approx(r2.max_rel_err).epsilon(1e-15));
    CHECK(r1.worst_coord == r2.worst_coord);
}
