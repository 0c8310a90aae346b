#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "c3owd/biwkv.hpp"
#include "c3owd/grad_check.hpp"
#include "c3owd/rng.hpp"

using namespace c3owd;

namespace {

double max_rel_diff(const Matd& a, const Matd& b) {
    double worst = 0.0;
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < a.cols(); ++j) {
            const double denom = std::max({std::abs(a(i, j)), std::abs(b(i, j)), 1e-300});
            worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / denom);
        }
    return worst;
}

}  // namespace

TEST_CASE("single token returns its value") {
    Matd k(1, 1), v(1, 1);
    k << 1.7;
    v << 3.5;
    Vecd w(1), u(1);
    w << 0.9;
    u << -0.4;
    CHECK(biwkv_naive<double>(k, v, w, u)(0, 0) == doctest::Approx(3.5).epsilon(1e-15));
    CHECK(biwkv_scan<double>(k, v, w, u)(0, 0) == doctest::Approx(3.5).epsilon(1e-15));
}

TEST_CASE("constant values are a fixed point") {
    Rng rng(2);
    const Index t = 9, c = 3;
    const Matd k = rng.gaussian(t, c);
    const Matd v = Matd::Constant(t, c, 2.25);
    const Vecd w = rng.uniform_vec(c, -2, 2);
    const Vecd u = rng.uniform_vec(c, -2, 2);
    const Matd out = biwkv_naive<double>(k, v, w, u);
    CHECK((out.array() - 2.25).abs().maxCoeff() <= 1e-12);
}

TEST_CASE("large decay keeps only distance-1 neighbors") {
    Matd k = Matd::Zero(3, 1);
    Matd v(3, 1);
    v << 1, 2, 3;
    Vecd w(1), u(1);
    w << 1e4;
    u << 0.0;
    const Matd out = biwkv_naive<double>(k, v, w, u);
    CHECK(out(0, 0) == doctest::Approx(1.5).epsilon(1e-9));
    CHECK(out(1, 0) == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(out(2, 0) == doctest::Approx(2.5).epsilon(1e-9));
}

TEST_CASE("scan equals naive over many random instances") {
    Rng root(77);
    double worst = 0.0;
    for (int trial = 0; trial < 300; ++trial) {
        Rng rng = root.split(trial);
        const Index t = 1 + static_cast<Index>(rng.next_below(64));
        const Index c = 1 + static_cast<Index>(rng.next_below(8));
        const Matd k = rng.uniform_mat(t, c, -3, 3);
        const Matd v = rng.uniform_mat(t, c, -3, 3);
        const Vecd w = rng.uniform_vec(c, -3, 3);
        const Vecd u = rng.uniform_vec(c, -3, 3);
        worst = std::max(worst, max_rel_diff(biwkv_naive<double>(k, v, w, u),
                                             biwkv_scan<double>(k, v, w, u)));
    }
    CHECK(worst <= 1e-10);
}

TEST_CASE("output is a convex combination of values") {
    Rng root(5);
    for (int trial = 0; trial < 50; ++trial) {
        Rng rng = root.split(trial);
        const Index t = 2 + static_cast<Index>(rng.next_below(14));
        const Index c = 1 + static_cast<Index>(rng.next_below(4));
        const Matd k = rng.gaussian(t, c, 1.5);
        const Matd v = rng.gaussian(t, c, 2.0);
        const Vecd w = rng.uniform_vec(c, -3, 3);
        const Vecd u = rng.uniform_vec(c, -3, 3);
        for (const Matd& out : {biwkv_naive<double>(k, v, w, u), biwkv_scan<double>(k, v, w, u)}) {
            for (Index ch = 0; ch < c; ++ch) {
                const double lo = v.col(ch).minCoeff(), hi = v.col(ch).maxCoeff();
                CHECK(out.col(ch).minCoeff() >= lo - 1e-12);
                CHECK(out.col(ch).maxCoeff() <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("permutation symmetry at w=0 u=0") {
    Rng rng(31);
    const Index t = 7, c = 2;
    const Matd k = rng.gaussian(t, c);
    const Matd v = rng.gaussian(t, c);
    const Vecd w = Vecd::Zero(c), u = Vecd::Zero(c);
    const Matd out = biwkv_naive<double>(k, v, w, u);

    // Swap two non-self tokens and check position 0 is unchanged.
    Matd k2 = k, v2 = v;
    k2.row(2).swap(k2.row(5));
    v2.row(2).swap(v2.row(5));
    const Matd out2 = biwkv_naive<double>(k2, v2, w, u);
    CHECK((out.row(0) - out2.row(0)).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("reversal equivariance") {
    Rng rng(41);
    const Index t = 11, c = 3;
    const Matd k = rng.gaussian(t, c);
    const Matd v = rng.gaussian(t, c);
    const Vecd w = rng.uniform_vec(c, -2, 2);
    const Vecd u = rng.uniform_vec(c, -2, 2);
    const Matd out = biwkv_scan<double>(k, v, w, u);
    const Matd kr = k.colwise().reverse();
    const Matd vr = v.colwise().reverse();
    const Matd out_r = biwkv_scan<double>(kr, vr, w, u);
    CHECK((out.colwise().reverse() - out_r).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("extreme keys stay finite via running-max bookkeeping") {
    Matd k(4, 1), v(4, 1);
    k << 700, -700, 650, 0;
    v << 1, -2, 3, 4;
    Vecd w(1), u(1);
    w << 2.0;
    u << 500.0;
    const Matd a = biwkv_naive<double>(k, v, w, u);
    const Matd b = biwkv_scan<double>(k, v, w, u);
    CHECK(a.allFinite());
    CHECK(max_rel_diff(a, b) <= 1e-10);
}

TEST_CASE("backward: constant values route upstream mass to dv") {
    Rng rng(6);
    const Index t = 6, c = 2;
    const Matd k = rng.gaussian(t, c);
    const Matd v = Matd::Constant(t, c, 1.3);
    const Vecd w = rng.uniform_vec(c, -2, 2);
    const Vecd u = rng.uniform_vec(c, -2, 2);
    const Matd up = rng.gaussian(t, c);
    const BiWkvGrads g = biwkv_backward(k, v, w, u, up);
    for (Index ch = 0; ch < c; ++ch)
        CHECK(g.dv.col(ch).sum() == doctest::Approx(up.col(ch).sum()).epsilon(1e-10));
    // Convex weights make the output independent of k, w, u at constant v.
    CHECK(g.dk.cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(g.dw.cwiseAbs().maxCoeff() <= 1e-12);
    CHECK(g.du.cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("backward: T=1 has zero dk and dw") {
    Matd k(1, 2), v(1, 2), up(1, 2);
    k << 0.3, -0.7;
    v << 2.0, -1.0;
    up << 1.0, 1.0;
    Vecd w(2), u(2);
    w << 0.5, 1.5;
    u << 0.1, 0.2;
    const BiWkvGrads g = biwkv_backward(k, v, w, u, up);
    CHECK(g.dk.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.dw.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.du.cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.dv(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("backward matches finite differences") {
    Rng root(123);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        Rng rng = root.split(trial);
        const Index t = 2 + static_cast<Index>(rng.next_below(7));
        const Index c = 1 + static_cast<Index>(rng.next_below(2));
        const Matd k = rng.gaussian(t, c);
        const Matd v = rng.gaussian(t, c);
        const Vecd w = rng.uniform_vec(c, -1.5, 1.5);
        const Vecd u = rng.uniform_vec(c, -1.5, 1.5);
        const Matd up = rng.gaussian(t, c);
        const BiWkvGrads g = biwkv_backward(k, v, w, u, up);

        Vecd analytic(2 * t * c + 2 * c);
        analytic << flatten(g.dk), flatten(g.dv), g.dw, g.du;
        auto f = [&](const Vecd& vec) {
            const Index kn = t * c;
            const Matd kk = unflatten(vec.segment(0, kn), t, c);
            const Matd vv = unflatten(vec.segment(kn, kn), t, c);
            const Vecd ww = vec.segment(2 * kn, c);
            const Vecd uu = vec.segment(2 * kn + c, c);
            return (biwkv_naive<double>(kk, vv, ww, uu).array() * up.array()).sum();
        };
        Vecd x0(2 * t * c + 2 * c);
        x0 << flatten(k), flatten(v), w, u;
        worst = std::max(worst, max_rel_err(analytic, finite_diff_gradient(f, x0)));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("argument validation") {
    Matd k(2, 2), v(3, 2);
    Vecd w(2), u(2);
    CHECK_THROWS_AS(biwkv_naive<double>(k, v, w, u), InvalidArgument);
    Matd k2 = Matd::Zero(2, 2), v2 = Matd::Zero(2, 2);
    Vecd w3(3);
    CHECK_THROWS_AS(biwkv_naive<double>(k2, v2, w3, u), InvalidArgument);
    const Matd up = Matd::Zero(3, 2);
    CHECK_THROWS_AS(biwkv_backward(k2, v2, w, u, up), InvalidArgument);
}

TEST_CASE("float kernel instantiates and tracks double loosely") {
    Rng rng(8);
    const Index t = 12, c = 2;
    const Matd kd = rng.uniform_mat(t, c, -2, 2);
    const Matd vd = rng.uniform_mat(t, c, -2, 2);
    const Vecd wd = rng.uniform_vec(c, -2, 2);
    const Vecd ud = rng.uniform_vec(c, -2, 2);
    const Mat<float> kf = kd.cast<float>();
    const Mat<float> vf = vd.cast<float>();
    const Vec<float> wf = wd.cast<float>();
    const Vec<float> uf = ud.cast<float>();
    const Matd out_d = biwkv_scan<double>(kd, vd, wd, ud);
    const Mat<float> out_f = biwkv_scan<float>(kf, vf, wf, uf);
    CHECK((out_d.cast<float>() - out_f).cwiseAbs().maxCoeff() <= 1e-4f);
}
