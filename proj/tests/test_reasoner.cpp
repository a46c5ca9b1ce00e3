#include <cmath>
#include <vector>

#include "doctest.h"
#include "emostyle/encoders.hpp"
#include "emostyle/errors.hpp"
#include "emostyle/grad_check.hpp"
#include "emostyle/reasoner.hpp"

using namespace emostyle;

namespace {

bool near_abs(double a, double b, double tol) { return std::fabs(a - b) <= tol; }

Tensor<double> random_tokens(std::size_t n, std::size_t d, std::uint64_t seed) {
    return Tensor<double>::random_normal({n, d}, Rng(seed), 1.0);
}

// naive double-precision block used as the oracle below
std::vector<double> naive_layer_norm(const std::vector<double>& x, std::size_t rows, std::size_t d,
                                     const std::vector<double>& g, const std::vector<double>& b) {
    std::vector<double> out(rows * d);
    for (std::size_t r = 0; r < rows; ++r) {
        double mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += x[r * d + j];
        mu /= static_cast<double>(d);
        double var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mu) * (x[r * d + j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + 1e-5);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = g[j] * (x[r * d + j] - mu) * is + b[j];
    }
    return out;
}

std::vector<double> naive_linear(const std::vector<double>& x, std::size_t rows, std::size_t in,
                                 std::size_t out_dim, const std::vector<double>& w,
                                 const std::vector<double>& b) {
    std::vector<double> out(rows * out_dim, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out_dim; ++j) {
            double acc = b[j];
            for (std::size_t k = 0; k < in; ++k) acc += x[r * in + k] * w[k * out_dim + j];
            out[r * out_dim + j] = acc;
        }
    return out;
}

double naive_gelu(double x) {
    const double k = 0.7978845608028654;
    return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST_CASE("parameter table has the pinned names and shapes") {
    ParamSet<double> ps;
    add_reasoner_params(ps, ReasonerShape{}, Rng(601));
    CHECK(ps.size() == 2 + 4 * 16 + 2);
    CHECK(ps.param("reasoner.emo.w").shape == Shape{8, 64});
    CHECK(ps.param("reasoner.blk0.attn.wq").shape == Shape{64, 64});
    CHECK(ps.param("reasoner.blk3.mlp.w1").shape == Shape{64, 256});
    CHECK(ps.param("reasoner.blk3.mlp.w2").shape == Shape{256, 64});
    CHECK(ps.param("reasoner.head.w").shape == Shape{64, 64});
    CHECK(ps.param("reasoner.blk2.ln1.g").data[0] == 1.0);
    CHECK(ps.param("reasoner.blk2.attn.bq").data[0] == 0.0);
    CHECK(ps.all_finite());
}

TEST_CASE("zeroed sublayers make every block an exact identity") {
    ReasonerShape shape;
    ParamSet<double> ps;
    add_reasoner_params(ps, shape, Rng(602));
    for (const auto& name : ps.names()) {
        // keep LN gains and the emotion projection, kill both sublayers
        if (name.find(".attn.") != std::string::npos || name.find(".mlp.") != std::string::npos)
            for (auto& v : ps.param(name).data) v = 0.0;
    }
    auto& head = ps.param("reasoner.head.w");
    for (auto& v : head.data) v = 0.0;
    for (std::size_t i = 0; i < 64; ++i) head.at(i, i) = 1.0;

    auto content = random_tokens(16, 64, 603);
    for (int e = 0; e < 8; ++e) {
        auto q = reason(encode_emotion<double>(e), content, ps, shape);
        REQUIRE(q.shape == Shape{64});
        const auto& w = ps.param("reasoner.emo.w");
        for (std::size_t j = 0; j < 64; ++j) CHECK(q.data[j] == w.at(static_cast<std::size_t>(e), j));
    }
}

TEST_CASE("content changes reach the query at random init") {
    ReasonerShape shape;
    ParamSet<double> ps;
    add_reasoner_params(ps, shape, Rng(604));
    auto a = random_tokens(16, 64, 605);
    auto b = a;
    b.at(5, 11) += 0.25;
    auto qa = reason(encode_emotion<double>(2), a, ps, shape);
    auto qb = reason(encode_emotion<double>(2), b, ps, shape);
    CHECK(l2_distance(qa, qb) > 0.0);
}

TEST_CASE("the eight emotions give pairwise distinct queries on fixed content") {
    ReasonerShape shape;
    ParamSet<double> ps;
    add_reasoner_params(ps, shape, Rng(606));
    auto content = random_tokens(16, 64, 607);
    std::vector<Tensor<double>> qs;
    for (int e = 0; e < 8; ++e) qs.push_back(reason(encode_emotion<double>(e), content, ps, shape));
    for (std::size_t a = 0; a < 8; ++a)
        for (std::size_t b = a + 1; b < 8; ++b) CHECK(l2_distance(qs[a], qs[b]) > 0.0);
}

TEST_CASE("single block matches a naive recomputation on a 2x4 sequence") {
    ReasonerShape shape;
    shape.blocks = 1;
    shape.heads = 1;
    shape.width = 4;
    shape.mlp_hidden = 8;
    shape.d_s = 4;

    ParamSet<double> ps;
    add_reasoner_params(ps, shape, Rng(608));
    // pinned tiny weights, simple closed forms so the oracle is checkable by eye
    auto fill2 = [&](const char* name, std::size_t r, std::size_t c, auto f) {
        auto& t = ps.param(name);
        REQUIRE(t.shape == Shape{r, c});
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) t.at(i, j) = f(i, j);
    };
    auto fill1 = [&](const char* name, std::size_t d, auto f) {
        auto& t = ps.param(name);
        REQUIRE(t.shape == Shape{d});
        for (std::size_t i = 0; i < d; ++i) t.data[i] = f(i);
    };
    fill2("reasoner.blk0.attn.wq", 4, 4, [](std::size_t i, std::size_t j) { return 0.05 * (double(i) + 1) - 0.03 * double(j); });
    fill2("reasoner.blk0.attn.wk", 4, 4, [](std::size_t i, std::size_t j) { return 0.04 - 0.02 * double(i) + 0.01 * double(j); });
    fill2("reasoner.blk0.attn.wv", 4, 4, [](std::size_t i, std::size_t j) { return 0.03 * double((i + j) % 3) - 0.02; });
    fill2("reasoner.blk0.attn.wo", 4, 4, [](std::size_t i, std::size_t j) { return 0.06 - 0.015 * double(i * j); });
    fill1("reasoner.blk0.attn.bq", 4, [](std::size_t i) { return 0.01 * double(i) - 0.01; });
    fill1("reasoner.blk0.attn.bk", 4, [](std::size_t) { return 0.0; });
    fill1("reasoner.blk0.attn.bv", 4, [](std::size_t i) { return i == 2 ? 0.01 : -0.005; });
    fill1("reasoner.blk0.attn.bo", 4, [](std::size_t i) { return 0.005 * double(i % 2); });
    fill1("reasoner.blk0.ln1.g", 4, [](std::size_t i) { return 1.0 + 0.05 * double(i); });
    fill1("reasoner.blk0.ln1.b", 4, [](std::size_t i) { return 0.01 * double(i) - 0.02; });
    fill1("reasoner.blk0.ln2.g", 4, [](std::size_t) { return 1.0; });
    fill1("reasoner.blk0.ln2.b", 4, [](std::size_t) { return 0.0; });
    fill2("reasoner.blk0.mlp.w1", 4, 8, [](std::size_t i, std::size_t j) { return 0.02 * (double(i) + 1) - 0.01 * double(j); });
    fill1("reasoner.blk0.mlp.b1", 8, [](std::size_t) { return 0.01; });
    fill2("reasoner.blk0.mlp.w2", 8, 4, [](std::size_t i, std::size_t j) { return 0.01 * double(i) - 0.02 * double(j) + 0.005; });
    fill1("reasoner.blk0.mlp.b2", 4, [](std::size_t) { return 0.0; });

    const std::vector<double> x = {0.1, -0.2, 0.3, 0.05, -0.4, 0.25, 0.0, 0.15};

    Tape<double> tape;
    NodeId out = reasoner_blocks_node(tape, tape.constant(Tensor<double>({2, 4}, x)), ps, shape);
    const auto& got = tape.value(out);

    // oracle: LN -> 1-head attention -> residual -> LN -> MLP -> residual
    auto vec = [&](const char* n) { return ps.param(n).data; };
    auto ln1 = naive_layer_norm(x, 2, 4, vec("reasoner.blk0.ln1.g"), vec("reasoner.blk0.ln1.b"));
    auto qm = naive_linear(ln1, 2, 4, 4, vec("reasoner.blk0.attn.wq"), vec("reasoner.blk0.attn.bq"));
    auto km = naive_linear(ln1, 2, 4, 4, vec("reasoner.blk0.attn.wk"), vec("reasoner.blk0.attn.bk"));
    auto vm = naive_linear(ln1, 2, 4, 4, vec("reasoner.blk0.attn.wv"), vec("reasoner.blk0.attn.bv"));
    std::vector<double> att(8, 0.0);
    for (std::size_t i = 0; i < 2; ++i) {
        double s[2];
        for (std::size_t j = 0; j < 2; ++j) {
            double dot = 0;
            for (std::size_t k = 0; k < 4; ++k) dot += qm[i * 4 + k] * km[j * 4 + k];
            s[j] = dot / 2.0;  // sqrt(d_head) = 2
        }
        const double mx = std::max(s[0], s[1]);
        const double e0 = std::exp(s[0] - mx), e1 = std::exp(s[1] - mx);
        const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
        for (std::size_t k = 0; k < 4; ++k) att[i * 4 + k] = p0 * vm[k] + p1 * vm[4 + k];
    }
    auto proj = naive_linear(att, 2, 4, 4, vec("reasoner.blk0.attn.wo"), vec("reasoner.blk0.attn.bo"));
    std::vector<double> xbar(8);
    for (std::size_t i = 0; i < 8; ++i) xbar[i] = proj[i] + x[i];
    auto ln2 = naive_layer_norm(xbar, 2, 4, vec("reasoner.blk0.ln2.g"), vec("reasoner.blk0.ln2.b"));
    auto h = naive_linear(ln2, 2, 4, 8, vec("reasoner.blk0.mlp.w1"), vec("reasoner.blk0.mlp.b1"));
    for (double& v : h) v = naive_gelu(v);
    auto mlp = naive_linear(h, 2, 8, 4, vec("reasoner.blk0.mlp.w2"), vec("reasoner.blk0.mlp.b2"));
    for (std::size_t i = 0; i < 8; ++i) CHECK(near_abs(got.data[i], mlp[i] + xbar[i], 1e-6));
}

TEST_CASE("reason gradients pass the finite-difference check on a reduced stack") {
    ReasonerShape shape;
    shape.blocks = 2;
    shape.heads = 2;
    shape.width = 8;
    shape.mlp_hidden = 16;
    shape.d_s = 8;
    for (int s = 0; s < 5; ++s) {
        ParamSet<double> ps;
        add_reasoner_params(ps, shape, Rng(650 + static_cast<std::uint64_t>(s)));
        auto content = random_tokens(3, 8, 660 + static_cast<std::uint64_t>(s));
        auto emotion = encode_emotion<double>(s % 8);
        auto target = Tensor<double>::random_normal({8}, Rng(670 + static_cast<std::uint64_t>(s)), 1.0);
        CheckedLoss<double> fn = [&](const ParamSet<double>& p, Grads<double>* grads) {
            Tape<double> t;
            NodeId q = reason_node(t, emotion, t.constant(content), p, shape);
            NodeId loss = t.sum_sq_diff(q, t.constant(target));
            if (grads) t.backward(loss, *grads);
            return t.scalar(loss);
        };
        auto report = grad_check(fn, ps);
        INFO("seed ", s, " worst ", report.worst_param, "[", report.worst_coord, "] rel ", report.max_rel_err);
        CHECK(report.max_rel_err <= 1e-5);
    }
}

TEST_CASE("reason gradients at full width, subsampled coordinates") {
    ReasonerShape shape;
    ParamSet<double> ps;
    add_reasoner_params(ps, shape, Rng(680));
    auto content = random_tokens(16, 64, 681);
    auto emotion = encode_emotion<double>(4);
    auto target = Tensor<double>::random_normal({64}, Rng(682), 1.0);
    CheckedLoss<double> fn = [&](const ParamSet<double>& p, Grads<double>* grads) {
        Tape<double> t;
        NodeId q = reason_node(t, emotion, t.constant(content), p, shape);
        NodeId loss = t.sum_sq_diff(q, t.constant(target));
        if (grads) t.backward(loss, *grads);
        return t.scalar(loss);
    };
    auto report = grad_check(fn, ps, 1e-5, 3, 683);
    INFO("worst ", report.worst_param, "[", report.worst_coord, "] rel ", report.max_rel_err);
    CHECK(report.max_rel_err <= 1e-5);
}

TEST_CASE("shape validation refuses bad configurations") {
    ParamSet<double> ps;
    ReasonerShape bad;
    bad.heads = 3;  // 64 % 3 != 0
    CHECK_THROWS_AS(add_reasoner_params(ps, bad, Rng(690)), ValidationError);

    ReasonerShape shape;
    ParamSet<double> ok;
    add_reasoner_params(ok, shape, Rng(691));
    CHECK_THROWS_AS(reason(Tensor<double>::zeros({7}), random_tokens(16, 64, 692), ok, shape), ShapeError);
    CHECK_THROWS_AS(reason(encode_emotion<double>(0), random_tokens(16, 32, 693), ok, shape), ShapeError);
}
