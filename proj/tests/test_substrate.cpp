#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "c3owd/grad_check.hpp"
#include "c3owd/ops.hpp"
#include "c3owd/rng.hpp"
#include "c3owd/tensor.hpp"

using namespace c3owd;

TEST_CASE("tensor shape and indexing invariants") {
    Tensor t({2, 3});
    CHECK(t.size() == 6);
    t({1, 2}) = 5.0;
    CHECK(t.data()(5) == 5.0);
    CHECK_THROWS_AS(Tensor({2, 0}), InvalidArgument);
    CHECK_THROWS_AS(Tensor(std::vector<Index>{}), InvalidArgument);
}

TEST_CASE("tensor csv round-trip is value-exact") {
    Rng rng(7);
    Tensor t({3, 4, 2});
    for (Index i = 0; i < t.size(); ++i) t.data()(i) = rng.normal() * std::pow(10.0, rng.uniform(-12, 12));
    std::stringstream ss;
    write_tensor_csv(t, ss);
    const Tensor back = read_tensor_csv(ss);
    REQUIRE(back.shape() == t.shape());
    for (Index i = 0; i < t.size(); ++i) CHECK(back.data()(i) == t.data()(i));
}

TEST_CASE("tensor csv header format") {
    Tensor t({2, 3});
    for (Index i = 0; i < 6; ++i) t.data()(i) = static_cast<double>(i);
    std::stringstream ss;
    write_tensor_csv(t, ss);
    std::string line;
    std::getline(ss, line);
    CHECK(line == "shape=2x3");
    std::getline(ss, line);
    CHECK(line == "0,1,2");
}

TEST_CASE("rng determinism and splitting") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng parent(1);
    Rng c1 = parent.split(3), c2 = parent.split(3), c3 = parent.split(4);
    CHECK(c1.next_u64() == c2.next_u64());
    CHECK(c1.next_u64() != c3.next_u64());
}

TEST_CASE("rng normal moments are sane") {
    Rng rng(11);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double v = rng.normal();
        sum += v;
        sq += v * v;
    }
    CHECK(std::abs(sum / n) < 0.05);
    CHECK(std::abs(sq / n - 1.0) < 0.05);
}

TEST_CASE("layer_norm hand cases") {
    LayerNormParams p{Vecd::Ones(3), Vecd::Zero(3), 1e-5};

    Matd constant(1, 3);
    constant << 5, 5, 5;
    const Matd out = layer_norm(constant, p);
    CHECK(out.cwiseAbs().maxCoeff() == 0.0);

    LayerNormParams tight{Vecd::Ones(2), Vecd::Zero(2), 1e-12};
    Matd x(1, 2);
    x << 1, 3;
    const Matd y = layer_norm(x, tight);
    CHECK(y(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(y(0, 1) == doctest::Approx(1.0).epsilon(1e-9));

    LayerNormParams affine{Vecd::Zero(2), Vecd::Constant(2, 7.0), 1e-5};
    const Matd z = layer_norm(x, affine);
    CHECK(z(0, 0) == 7.0);
    CHECK(z(0, 1) == 7.0);
}

TEST_CASE("layer_norm errors and moments") {
    LayerNormParams p{Vecd::Ones(0), Vecd::Zero(0), 1e-5};
    CHECK_THROWS_AS(layer_norm(Matd(2, 0), p), InvalidArgument);

    Rng rng(3);
    const Index c = 16;
    LayerNormParams q{Vecd::Ones(c), Vecd::Zero(c), 1e-10};
    const Matd x = rng.gaussian(8, c);
    const Matd y = layer_norm(x, q);
    for (Index r = 0; r < y.rows(); ++r) {
        CHECK(std::abs(y.row(r).mean()) <= 1e-10);
        const double var = (y.row(r).array() - y.row(r).mean()).square().mean();
        CHECK(std::abs(var - 1.0) <= 1e-6);
    }
}

TEST_CASE("layer_norm backward matches finite differences") {
    Rng rng(5);
    const Index n = 3, c = 5;
    const Matd x = rng.gaussian(n, c);
    const Matd up = rng.gaussian(n, c);
    LayerNormParams p{rng.gaussian_vec(c, 0.5), rng.gaussian_vec(c, 0.5), 1e-5};

    LayerNormCache cache;
    layer_norm(x, p, &cache);
    LayerNormGrads grads;
    const Matd dx = layer_norm_backward(up, cache, p, grads);

    auto f = [&](const Vecd& v) {
        Index at = 0;
        const Matd xx = unflatten(v.segment(at, n * c), n, c);
        at += n * c;
        LayerNormParams pp = p;
        pp.gain = v.segment(at, c);
        at += c;
        pp.bias = v.segment(at, c);
        return (layer_norm(xx, pp).array() * up.array()).sum();
    };
    Vecd x0(n * c + 2 * c);
    x0 << flatten(x), p.gain, p.bias;
    Vecd analytic(n * c + 2 * c);
    analytic << flatten(dx), grads.gain, grads.bias;
    CHECK(max_rel_err(analytic, finite_diff_gradient(f, x0)) <= 1e-5);
}

TEST_CASE("softmax properties") {
    Matd x(1, 3);
    x << 0, 0, 0;
    const Matd u = softmax_rows<double>(x);
    CHECK(u(0, 0) == doctest::Approx(1.0 / 3).epsilon(1e-14));

    Matd sat(1, 2);
    sat << 1000, 0;
    const Matd s = softmax_rows<double>(sat);
    CHECK(std::abs(s(0, 0) - 1.0) <= 1e-12);
    CHECK(std::abs(s(0, 1)) <= 1e-12);

    Matd ln(1, 2);
    ln << std::log(2.0), 0.0;
    const Matd l = softmax_rows<double>(ln);
    CHECK(l(0, 0) == doctest::Approx(2.0 / 3).epsilon(1e-14));

    Rng rng(9);
    const Matd r = rng.gaussian(5, 7);
    const Matd p1 = softmax_rows<double>(r);
    Matd shifted = r;
    shifted.array() += 13.75;
    const Matd p2 = softmax_rows<double>(shifted);
    CHECK((p1 - p2).cwiseAbs().maxCoeff() <= 1e-12);
    for (Index i = 0; i < p1.rows(); ++i) CHECK(std::abs(p1.row(i).sum() - 1.0) <= 1e-12);
    CHECK((p1.array() > 0.0).all());
}

TEST_CASE("activations") {
    Matd x(1, 3);
    x << 0.0, -3.0, 2.0;
    const Matd s = sigmoid<double>(x);
    CHECK(s(0, 0) == 0.5);
    const Matd q = squared_relu<double>(x);
    CHECK(q(0, 1) == 0.0);
    CHECK(q(0, 2) == 4.0);
}

TEST_CASE("finite difference oracle basics") {
    Vecd x(1);
    x << 3.0;
    auto square = [](const Vecd& v) { return v(0) * v(0); };
    const Vecd g = finite_diff_gradient(square, x);
    CHECK(std::abs(g(0) - 6.0) <= 1e-8);

    Vecd y(4);
    y << 1, 2, 3, 4;
    auto total = [](const Vecd& v) { return v.sum(); };
    const Vecd gs = finite_diff_gradient(total, y);
    for (Index i = 0; i < 4; ++i) CHECK(gs(i) == doctest::Approx(1.0).epsilon(1e-10));

    auto bad = [](const Vecd& v) { return v(0) > 0.5 ? std::numeric_limits<double>::quiet_NaN() : 0.0; };
    Vecd z(1);
    z << 0.5;
    CHECK_THROWS_AS(finite_diff_gradient(bad, z), NumericError);
}

TEST_CASE("normalize_rows and backward") {
    Rng rng(13);
    const Matd x = rng.gaussian(4, 6);
    const Matd y = normalize_rows(x);
    for (Index r = 0; r < y.rows(); ++r) CHECK(y.row(r).norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(normalize_rows(Matd::Zero(2, 3)), NumericError);

    const Matd up = rng.gaussian(4, 6);
    const Matd dx = normalize_rows_backward(x, up);
    auto f = [&](const Vecd& v) {
        return (normalize_rows(unflatten(v, 4, 6)).array() * up.array()).sum();
    };
    CHECK(max_rel_err(flatten(dx), finite_diff_gradient(f, flatten(x))) <= 1e-6);
}
