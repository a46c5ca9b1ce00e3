#include <cmath>
#include <vector>

#include "doctest.h"
#include "emostyle/tape.hpp"

using emostyle::NodeId;
using emostyle::Rng;
using emostyle::ShapeError;
using emostyle::Tape;
using emostyle::Tensor;

namespace {

Tensor<double> randn(emostyle::Shape s, std::uint64_t seed, double sd = 1.0) {
    return Tensor<double>::random_normal(std::move(s), Rng(seed), sd);
}

bool near_abs(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace

TEST_CASE("matmul matches a hand-computed product") {
    Tape<double> t;
    NodeId a = t.constant(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
    NodeId b = t.constant(Tensor<double>({3, 2}, {7, 8, 9, 10, 11, 12}));
    NodeId c = t.matmul(a, b);
    const auto& v = t.value(c);
    CHECK(v.shape == emostyle::Shape{2, 2});
    CHECK(v.data == std::vector<double>{58, 64, 139, 154});
}

TEST_CASE("elementwise ops and bias broadcast") {
    Tape<double> t;
    NodeId a = t.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
    NodeId b = t.constant(Tensor<double>({2, 2}, {10, 20, 30, 40}));
    CHECK(t.value(t.add(a, b)).data == std::vector<double>{11, 22, 33, 44});
    CHECK(t.value(t.sub(b, a)).data == std::vector<double>{9, 18, 27, 36});
    CHECK(t.value(t.scale(a, -2.0)).data == std::vector<double>{-2, -4, -6, -8});
    NodeId bias = t.constant(Tensor<double>({2}, {100, 200}));
    CHECK(t.value(t.add_bias(a, bias)).data == std::vector<double>{101, 202, 103, 204});
}

TEST_CASE("affine with identity weights and zero bias is the identity") {
    Tape<double> t;
    NodeId x = t.constant(Tensor<double>({2, 3}, {0.5, -1, 2, 3, 4, -5}));
    NodeId w = t.constant(Tensor<double>({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}));
    NodeId b = t.constant(Tensor<double>::zeros({3}));
    NodeId y = emostyle::affine(t, x, w, b);
    CHECK(t.value(y).data == t.value(x).data);
}

TEST_CASE("gelu tracks the exact gaussian cdf form closely") {
    Tape<double> t;
    std::vector<double> xs;
    for (double x = -4.0; x <= 4.0; x += 0.25) xs.push_back(x);
    NodeId n = t.gelu(t.constant(Tensor<double>({xs.size()}, xs)));
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double exact = xs[i] * 0.5 * std::erfc(-xs[i] / std::sqrt(2.0));
        CHECK(near_abs(t.value(n).data[i], exact, 2e-3));
    }
    CHECK(t.value(n).data[16] == 0.0);  // gelu(0) = 0
}

TEST_CASE("layer_norm of a constant vector with unit gain is zero") {
    Tape<double> t;
    NodeId x = t.constant(Tensor<double>::full({6}, 3.7));
    NodeId g = t.constant(Tensor<double>::full({6}, 1.0));
    NodeId b = t.constant(Tensor<double>::zeros({6}));
    for (double v : t.value(t.layer_norm(x, g, b)).data) CHECK(v == 0.0);
}

TEST_CASE("layer_norm standardizes each row") {
    Tape<double> t;
    NodeId x = t.constant(randn({3, 8}, 11));
    NodeId g = t.constant(Tensor<double>::full({8}, 1.0));
    NodeId b = t.constant(Tensor<double>::zeros({8}));
    const auto& y = t.value(t.layer_norm(x, g, b));
    for (std::size_t r = 0; r < 3; ++r) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < 8; ++j) mu += y.at(r, j);
        mu /= 8;
        for (std::size_t j = 0; j < 8; ++j) var += (y.at(r, j) - mu) * (y.at(r, j) - mu);
        var /= 8;
        CHECK(near_abs(mu, 0.0, 1e-12));
        CHECK(near_abs(var, 1.0, 1e-3));
    }
}

TEST_CASE("attention with zero query/key weights averages the values") {
    Tape<double> t;
    const std::size_t T = 3, D = 4;
    NodeId x = t.constant(Tensor<double>({T, D}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12}));
    NodeId zero_w = t.constant(Tensor<double>::zeros({D, D}));
    NodeId zero_b = t.constant(Tensor<double>::zeros({D}));
    Tensor<double> eye = Tensor<double>::zeros({D, D});
    for (std::size_t i = 0; i < D; ++i) eye.at(i, i) = 1.0;
    NodeId id_w = t.constant(eye);
    for (int heads : {1, 2, 4}) {
        NodeId y = t.attention(x, zero_w, zero_b, zero_w, zero_b, id_w, zero_b, id_w, zero_b, heads);
        for (std::size_t j = 0; j < D; ++j) {
            const double mean = (t.value(x).at(0, j) + t.value(x).at(1, j) + t.value(x).at(2, j)) / 3.0;
            for (std::size_t i = 0; i < T; ++i) CHECK(t.value(y).at(i, j) == doctest::Approx(mean));
        }
    }
}

TEST_CASE("attention outputs stay inside the convex hull of the values") {
    Tape<double> t;
    const std::size_t T = 5, D = 6;
    NodeId x = t.constant(randn({T, D}, 21));
    NodeId wq = t.constant(randn({D, D}, 22, 0.5));
    NodeId wk = t.constant(randn({D, D}, 23, 0.5));
    Tensor<double> eye = Tensor<double>::zeros({D, D});
    for (std::size_t i = 0; i < D; ++i) eye.at(i, i) = 1.0;
    NodeId id_w = t.constant(eye);
    NodeId zb = t.constant(Tensor<double>::zeros({D}));
    NodeId y = t.attention(x, wq, zb, wk, zb, id_w, zb, id_w, zb, 2);
    for (std::size_t j = 0; j < D; ++j) {
        double lo = 1e9, hi = -1e9;
        for (std::size_t i = 0; i < T; ++i) {
            lo = std::min(lo, t.value(x).at(i, j));
            hi = std::max(hi, t.value(x).at(i, j));
        }
        for (std::size_t i = 0; i < T; ++i) {
            CHECK(t.value(y).at(i, j) >= lo - 1e-9);
            CHECK(t.value(y).at(i, j) <= hi + 1e-9);
        }
    }
}

TEST_CASE("conv3x3 matches a naive sliding-window oracle") {
    for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
        Rng rng(seed);
        const std::size_t C = 1 + rng.uniform_index(3);
        const std::size_t Co = 1 + rng.uniform_index(3);
        const std::size_t H = 2 + rng.uniform_index(4);
        const std::size_t W = 2 + rng.uniform_index(4);
        Tensor<double> x = Tensor<double>::random_normal({C, H, W}, rng.derive("x"));
        Tensor<double> w = Tensor<double>::random_normal({Co, C, 3, 3}, rng.derive("w"));
        Tensor<double> b = Tensor<double>::random_normal({Co}, rng.derive("b"));
        Tape<double> t;
        const auto& y = t.value(t.conv3x3(t.constant(x), t.constant(w), t.constant(b)));
        for (std::size_t oc = 0; oc < Co; ++oc)
            for (std::size_t oy = 0; oy < H; ++oy)
                for (std::size_t ox = 0; ox < W; ++ox) {
                    double acc = b.data[oc];
                    for (std::size_t ic = 0; ic < C; ++ic)
                        for (int ky = -1; ky <= 1; ++ky)
                            for (int kx = -1; kx <= 1; ++kx) {
                                const long sy = static_cast<long>(oy) + ky;
                                const long sx = static_cast<long>(ox) + kx;
                                if (sy < 0 || sy >= static_cast<long>(H) || sx < 0 || sx >= static_cast<long>(W))
                                    continue;
                                acc += x.data[(ic * H + static_cast<std::size_t>(sy)) * W +
                                              static_cast<std::size_t>(sx)] *
                                       w.data[((oc * C + ic) * 3 + static_cast<std::size_t>(ky + 1)) * 3 +
                                              static_cast<std::size_t>(kx + 1)];
                            }
                    CHECK(y.data[(oc * H + oy) * W + ox] == doctest::Approx(acc).epsilon(1e-12));
                }
    }
}

TEST_CASE("film modulates per channel") {
    Tape<double> t;
    NodeId x = t.constant(Tensor<double>({2, 1, 2}, {1, 2, 3, 4}));
    NodeId g = t.constant(Tensor<double>({2}, {0.5, -1.0}));
    NodeId b = t.constant(Tensor<double>({2}, {10, 20}));
    CHECK(t.value(t.film(x, g, b)).data == std::vector<double>{11.5, 13.0, 20.0, 20.0});
}

TEST_CASE("reductions and pooling") {
    Tape<double> t;
    NodeId x = t.constant(Tensor<double>({3, 2}, {1, 2, 3, 4, 5, 6}));
    CHECK(t.value(t.mean_rows(x)).data == std::vector<double>{3, 4});
    NodeId img = t.constant(Tensor<double>({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}));
    CHECK(t.value(t.avg_pool2(img)).data == std::vector<double>{3.5, 5.5});
    NodeId a = t.constant(Tensor<double>({2}, {1, 2}));
    NodeId bb = t.constant(Tensor<double>({2}, {4, 6}));
    CHECK(t.scalar(t.mse(a, bb)) == doctest::Approx((9.0 + 16.0) / 2.0));
    CHECK(t.scalar(t.sum_sq_diff(a, bb)) == doctest::Approx(25.0));
}

TEST_CASE("softmax cross entropy against a direct log-sum-exp") {
    Tape<double> t;
    NodeId logits = t.constant(Tensor<double>({2, 3}, {1, 2, 3, 0, 0, 0}));
    const double l0 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
    const double l1 = std::log(3.0);
    CHECK(t.scalar(t.softmax_cross_entropy(logits, {2, 0})) == doctest::Approx((l0 + l1) / 2.0).epsilon(1e-9));
    CHECK_THROWS_AS(t.softmax_cross_entropy(logits, {2}), emostyle::ValidationError);
    CHECK_THROWS_AS(t.softmax_cross_entropy(logits, {2, 3}), emostyle::ValidationError);
}

TEST_CASE("joins, views, and broadcasts") {
    Tape<double> t;
    NodeId a = t.constant(Tensor<double>({1, 2}, {1, 2}));
    NodeId b = t.constant(Tensor<double>({2, 2}, {3, 4, 5, 6}));
    NodeId cr = t.concat_rows(a, b);
    CHECK(t.value(cr).shape == emostyle::Shape{3, 2});
    CHECK(t.value(t.row(cr, 2)).data == std::vector<double>{5, 6});
    NodeId v = t.concat_vec(t.row(cr, 0), t.row(cr, 1));
    CHECK(t.value(v).data == std::vector<double>{1, 2, 3, 4});
    NodeId r = t.reshape(v, {2, 2});
    CHECK(t.value(r).at(1, 0) == 3);
    NodeId bc = t.broadcast_channels(t.constant(Tensor<double>({2}, {7, 9})), 2, 2);
    CHECK(t.value(bc).data == std::vector<double>{7, 7, 7, 7, 9, 9, 9, 9});
    NodeId cc = t.concat_channels(bc, t.constant(Tensor<double>::zeros({1, 2, 2})));
    CHECK(t.value(cc).shape == emostyle::Shape{3, 2, 2});
}

TEST_CASE("shape violations raise ShapeError") {
    Tape<double> t;
    NodeId a = t.constant(Tensor<double>::zeros({2, 3}));
    NodeId b = t.constant(Tensor<double>::zeros({2, 3}));
    CHECK_THROWS_AS(t.matmul(a, b), ShapeError);
    CHECK_THROWS_AS(t.add(a, t.constant(Tensor<double>::zeros({3, 2}))), ShapeError);
    CHECK_THROWS_AS(t.add_bias(a, t.constant(Tensor<double>::zeros({2}))), ShapeError);
    CHECK_THROWS_AS(t.mean_rows(t.constant(Tensor<double>::zeros({4}))), ShapeError);
    CHECK_THROWS_AS(t.avg_pool2(t.constant(Tensor<double>::zeros({1, 3, 4}))), ShapeError);
    CHECK_THROWS_AS(t.reshape(a, {7}), ShapeError);
    CHECK_THROWS_AS(t.conv3x3(t.constant(Tensor<double>::zeros({2, 4, 4})),
                              t.constant(Tensor<double>::zeros({1, 3, 3, 3})),
                              t.constant(Tensor<double>::zeros({1}))),
                    ShapeError);
    NodeId x = t.constant(Tensor<double>::zeros({2, 6}));
    NodeId w = t.constant(Tensor<double>::zeros({6, 6}));
    NodeId bias = t.constant(Tensor<double>::zeros({6}));
    CHECK_THROWS_AS(t.attention(x, w, bias, w, bias, w, bias, w, bias, 4), emostyle::ValidationError);
    CHECK_THROWS_AS(t.scalar(a), ShapeError);
}

TEST_CASE("forward passes are bit deterministic") {
    auto run = [] {
        Tape<float> t;
        NodeId x = t.constant(emostyle::tensor_cast<float>(randn({4, 6}, 99)));
        NodeId w = t.constant(emostyle::tensor_cast<float>(randn({6, 6}, 100, 0.3)));
        NodeId b = t.constant(emostyle::tensor_cast<float>(randn({6}, 101, 0.1)));
        NodeId g = t.constant(Tensor<float>::full({6}, 1.0f));
        NodeId y = t.gelu(t.layer_norm(emostyle::affine(t, x, w, b), g, b));
        return t.value(y).data;
    };
    CHECK(run() == run());
}

TEST_CASE("backward exposes gradients on intermediate nodes") {
    Tape<double> t;
    Tensor<double> xv({2}, {1.0, -2.0});
    NodeId x = t.param("x", xv);
    NodeId loss = t.sum_sq_diff(x, t.constant(Tensor<double>::zeros({2})));
    emostyle::Grads<double> g;
    t.backward(loss, g);
    CHECK(g.at("x").data == std::vector<double>{2.0, -4.0});
    CHECK(t.node_grad(x).data == std::vector<double>{2.0, -4.0});
}
