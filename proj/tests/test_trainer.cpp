#include <cmath>
#include <cstring>
#include <filesystem>
#include <vector>

#include "doctest.h"
#include "emostyle/encoders.hpp"
#include "emostyle/generator.hpp"
#include "emostyle/grad_check.hpp"
#include "emostyle/trainer.hpp"

using namespace emostyle;
namespace fs = std::filesystem;

namespace {

// Three well-separated 64-dim clusters per emotion: centers 2*e_c, sigma 0.05.
struct Planted {
    std::vector<std::vector<Tensor<double>>> features;
    std::vector<std::vector<double>> weights;
    std::vector<std::vector<Tensor<double>>> oracle;  // [emotion][cluster] weighted means
};

Planted plant_clusters(std::size_t per_cluster, Rng rng) {
    Planted p;
    p.features.resize(kNumEmotions);
    p.weights.resize(kNumEmotions);
    p.oracle.resize(kNumEmotions);
    for (int e = 0; e < kNumEmotions; ++e) {
        for (int c = 0; c < 3; ++c) {
            Tensor<double> sum(Shape{64});
            for (std::size_t i = 0; i < per_cluster; ++i) {
                Tensor<double> f(Shape{64});
                Rng r = rng.derive("pt", std::uint64_t(e * 1000 + c * 100) + i);
                for (std::size_t j = 0; j < 64; ++j) f.data[j] = r.gaussian() * 0.05;
                f.data[std::size_t(c)] += 2.0;  // center
                for (std::size_t j = 0; j < 64; ++j) sum.data[j] += f.data[j];
                p.features[std::size_t(e)].push_back(std::move(f));
                p.weights[std::size_t(e)].push_back(1.0);
            }
            for (auto& x : sum.data) x /= double(per_cluster);
            p.oracle[std::size_t(e)].push_back(std::move(sum));
        }
    }
    return p;
}

double l2(const Tensor<double>& a, const Tensor<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    return std::sqrt(s);
}

TrainConfig stage1_cfg(std::string opt, int epochs, int K) {
    TrainConfig cfg;
    cfg.stage = 1;
    cfg.optimizer = std::move(opt);
    cfg.epochs = epochs;
    cfg.K = K;
    cfg.seed = 20250811;
    cfg.precision = "f64";
    return cfg;
}

Image noise_image(Rng rng, int side) {
    Image img(static_cast<std::size_t>(side), static_cast<std::size_t>(side));
    for (auto& v : img.data) v = float(rng.uniform());
    return img;
}

ReasonerShape tiny_shape() {
    ReasonerShape rs;
    rs.blocks = 1;
    rs.heads = 1;
    rs.mlp_hidden = 32;
    return rs;
}

StyleDicts<double> tiny_dicts(std::uint64_t seed, double scale = 1.0) {
    std::vector<std::vector<Tensor<double>>> feats(kNumEmotions);
    Rng rng(seed);
    for (int e = 0; e < kNumEmotions; ++e)
        for (int i = 0; i < 4; ++i) {
            Tensor<double> f(Shape{64});
            Rng r = rng.derive("f", std::uint64_t(e * 10 + i));
            for (auto& x : f.data) x = r.gaussian() * scale;
            feats[std::size_t(e)].push_back(std::move(f));
        }
    return init_codebooks(feats, 0.8 * scale, 2, rng.derive("init"));
}

std::vector<Stage2Sample<double>> tiny_samples(int n, int side, std::uint64_t seed) {
    std::vector<Stage2Sample<double>> out;
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        Stage2Sample<double> s;
        s.content = noise_image(rng.derive("c", std::uint64_t(i)), side);
        s.stylized = noise_image(rng.derive("s", std::uint64_t(i)), side);
        s.emotion = int(rng.derive("e", std::uint64_t(i)).uniform_index(kNumEmotions));
        s.weight = 1.0;
        out.push_back(std::move(s));
    }
    return out;
}

TrainConfig stage2_cfg(int epochs, int batch) {
    TrainConfig cfg;
    cfg.stage = 2;
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.seed = 31;
    cfg.precision = "f64";
    return cfg;
}

template <class S>
bool params_bit_equal(const ParamSet<S>& a, const ParamSet<S>& b) {
    if (a.size() != b.size()) return false;
    for (const auto& name : a.names()) {
        if (!b.has(name)) return false;
        const auto& x = a.param(name);
        const auto& y = b.param(name);
        if (x.shape != y.shape) return false;
        if (std::memcmp(x.data.data(), y.data.data(), x.data.size() * sizeof(S)) != 0) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("stage 1 lloyd recovers planted cluster centroids") {
    Planted p = plant_clusters(20, Rng(404));
    auto res = train_stage1_features(p.features, p.weights, stage1_cfg("lloyd", 8, 3));

    for (int e = 0; e < kNumEmotions; ++e) {
        const auto& entries = res.dicts.by_emotion[std::size_t(e)].entries;
        REQUIRE(entries.shape[0] == 3);
        for (const auto& centroid : p.oracle[std::size_t(e)]) {
            double best = 1e30;
            for (std::size_t k = 0; k < 3; ++k) {
                Tensor<double> row(Shape{64});
                for (std::size_t j = 0; j < 64; ++j) row.data[j] = entries.at(k, j);
                best = std::min(best, l2(row, centroid));
            }
            CHECK(best <= 1e-3);
        }
    }
    CHECK(res.utilization == 1.0);
    for (std::size_t i = 1; i < res.epoch_losses.size(); ++i)
        CHECK(res.epoch_losses[i] <= res.epoch_losses[i - 1] + 1e-12);
    CHECK(res.final_loss < res.epoch_losses.front());
}

TEST_CASE("one sample per emotion converges exactly onto the sample") {
    std::vector<std::vector<Tensor<double>>> feats(kNumEmotions);
    std::vector<std::vector<double>> weights(kNumEmotions);
    Rng rng(77);
    for (int e = 0; e < kNumEmotions; ++e) {
        Tensor<double> f(Shape{64});
        Rng r = rng.derive("f", std::uint64_t(e));
        for (auto& x : f.data) x = r.gaussian();
        feats[std::size_t(e)].push_back(f);
        weights[std::size_t(e)].push_back(1.0);
    }
    auto res = train_stage1_features(feats, weights, stage1_cfg("lloyd", 3, 1));
    for (int e = 0; e < kNumEmotions; ++e) {
        const auto& entries = res.dicts.by_emotion[std::size_t(e)].entries;
        for (std::size_t j = 0; j < 64; ++j)
            CHECK(entries.at(0, j) == feats[std::size_t(e)][0].data[j]);
    }
    for (double loss : res.epoch_losses) CHECK(loss == 0.0);
    CHECK(res.utilization == 1.0);
}

TEST_CASE("duplicating samples with halved scores keeps the fixed point") {
    Planted p = plant_clusters(10, Rng(505));
    auto base = train_stage1_features(p.features, p.weights, stage1_cfg("lloyd", 6, 3));

    std::vector<std::vector<Tensor<double>>> feats2(kNumEmotions);
    std::vector<std::vector<double>> weights2(kNumEmotions);
    for (int e = 0; e < kNumEmotions; ++e)
        for (std::size_t i = 0; i < p.features[std::size_t(e)].size(); ++i) {
            feats2[std::size_t(e)].push_back(p.features[std::size_t(e)][i]);
            feats2[std::size_t(e)].push_back(p.features[std::size_t(e)][i]);
            weights2[std::size_t(e)].push_back(0.5);
            weights2[std::size_t(e)].push_back(0.5);
        }
    auto dup = train_stage1_features(feats2, weights2, stage1_cfg("lloyd", 6, 3));

    // init scans the shuffled sample list, so entry order differs between the
    // two datasets; the fixed point is the same set of weighted means
    for (int e = 0; e < kNumEmotions; ++e) {
        const auto& a = base.dicts.by_emotion[std::size_t(e)].entries;
        const auto& b = dup.dicts.by_emotion[std::size_t(e)].entries;
        for (std::size_t ka = 0; ka < 3; ++ka) {
            Tensor<double> row(Shape{64});
            for (std::size_t j = 0; j < 64; ++j) row.data[j] = a.at(ka, j);
            double best = 1e30;
            for (std::size_t kb = 0; kb < 3; ++kb) {
                Tensor<double> other(Shape{64});
                for (std::size_t j = 0; j < 64; ++j) other.data[j] = b.at(kb, j);
                best = std::min(best, l2(row, other));
            }
            CHECK(best <= 1e-12);
        }
    }
    // the mean is over samples, and duplication doubles the count while the
    // per-sample sum stays put, so the reported loss halves exactly
    CHECK(base.final_loss == doctest::Approx(2.0 * dup.final_loss).epsilon(1e-9));
}

TEST_CASE("gradient descent also reduces the stage-1 loss") {
    Planted p = plant_clusters(12, Rng(606));
    for (const char* opt : {"sgd", "adam"}) {
        TrainConfig cfg = stage1_cfg(opt, 10, 3);
        cfg.learning_rate = 0.05;
        cfg.batch_size = 16;
        auto res = train_stage1_features(p.features, p.weights, cfg);
        CHECK(res.final_loss < 0.9 * res.epoch_losses.front());
        CHECK(res.final_loss >= 0.0);
    }
}

TEST_CASE("stage 1 input validation") {
    std::vector<std::vector<Tensor<double>>> feats(kNumEmotions);
    std::vector<std::vector<double>> weights(kNumEmotions);
    CHECK_THROWS_WITH_AS(train_stage1_features(feats, weights, stage1_cfg("lloyd", 2, 2)),
                         doctest::Contains("empty dataset"), ValidationError);

    feats[2].push_back(Tensor<double>::zeros(Shape{64}));
    CHECK_THROWS_WITH_AS(train_stage1_features(feats, weights, stage1_cfg("lloyd", 2, 2)),
                         doctest::Contains("size mismatch"), ValidationError);

    weights[2].push_back(-0.25);
    CHECK_THROWS_WITH_AS(train_stage1_features(feats, weights, stage1_cfg("lloyd", 2, 2)),
                         doctest::Contains("non-negative"), ValidationError);

    weights[2][0] = 1.0;
    TrainConfig wrong = stage1_cfg("lloyd", 2, 2);
    wrong.stage = 2;
    wrong.optimizer = "adam";
    CHECK_THROWS_WITH_AS(train_stage1_features(feats, weights, wrong),
                         doctest::Contains("stage"), ValidationError);

    // a 7-group vector cannot be a dataset
    feats.pop_back();
    weights.pop_back();
    CHECK_THROWS_AS(train_stage1_features(feats, weights, stage1_cfg("lloyd", 2, 2)),
                    ValidationError);
}

TEST_CASE("stage-1 checkpoint carries dictionaries exactly") {
    Planted p = plant_clusters(6, Rng(707));
    TrainConfig cfg = stage1_cfg("lloyd", 4, 3);
    auto res = train_stage1_features(p.features, p.weights, cfg);

    CheckpointData d = make_checkpoint<double>(cfg, res.dicts, nullptr);
    CHECK(d.config_text == dump_config(cfg));
    CHECK(d.rng_key == cfg.seed);
    CHECK(d.rng_counter == std::uint64_t(cfg.epochs));

    const fs::path path = fs::temp_directory_path() / "emostyle_stage1_test.ckpt";
    save_checkpoint(path, d);
    StyleDicts<double> back = unpack_dicts<double>(load_checkpoint(path));
    REQUIRE(back.by_emotion.size() == std::size_t(kNumEmotions));
    for (int e = 0; e < kNumEmotions; ++e) {
        const auto& x = res.dicts.by_emotion[std::size_t(e)];
        const auto& y = back.by_emotion[std::size_t(e)];
        CHECK(std::memcmp(x.entries.data.data(), y.entries.data.data(),
                          x.entries.data.size() * sizeof(double)) == 0);
        CHECK(x.usage == y.usage);
    }
    fs::remove(path);
}

TEST_CASE("unpack_dicts reports missing or mismatched records") {
    CheckpointData d = make_checkpoint<double>(stage1_cfg("lloyd", 1, 2), tiny_dicts(1), nullptr);
    CheckpointData missing = d;
    missing.f64.erase("dict.3.entries");
    CHECK_THROWS_WITH_AS(unpack_dicts<double>(missing), doctest::Contains("excitement"),
                         ValidationError);

    CheckpointData bad_usage = d;
    bad_usage.f64.at("dict.1.usage") = Tensor<double>::zeros(Shape{5});
    CHECK_THROWS_AS(unpack_dicts<double>(bad_usage), ShapeError);

    // the f32 view of an f64 checkpoint holds no dictionaries
    CHECK_THROWS_WITH_AS(unpack_dicts<float>(d), doctest::Contains("no dictionary"),
                         ValidationError);
}

TEST_CASE("stage 2 validates its inputs") {
    auto dicts = tiny_dicts(2);
    auto samples = tiny_samples(3, 8, 1);
    const ReasonerShape rs = tiny_shape();

    TrainConfig wrong = stage2_cfg(1, 2);
    wrong.stage = 1;
    CHECK_THROWS_WITH_AS(train_stage2_samples<double>(samples, dicts, wrong, nullptr, {}, rs),
                         doctest::Contains("stage"), ValidationError);

    StyleDicts<double> seven = dicts;
    seven.by_emotion.pop_back();
    CHECK_THROWS_WITH_AS(train_stage2_samples<double>(samples, seven, stage2_cfg(1, 2), nullptr, {}, rs),
                         doctest::Contains("8 emotions"), ValidationError);

    ReasonerShape odd = rs;
    odd.d_s = 32;
    CHECK_THROWS_AS(train_stage2_samples<double>(samples, dicts, stage2_cfg(1, 2), nullptr, {}, odd),
                    ShapeError);

    auto zeroed = samples;
    for (auto& s : zeroed) s.weight = 0.0;
    CHECK_THROWS_WITH_AS(train_stage2_samples<double>(zeroed, dicts, stage2_cfg(1, 2), nullptr, {}, rs),
                         doctest::Contains("positive weight"), ValidationError);

    auto bad = samples;
    bad[0].emotion = 9;
    CHECK_THROWS_WITH_AS(train_stage2_samples<double>(bad, dicts, stage2_cfg(1, 2), nullptr, {}, rs),
                         doctest::Contains("emotion"), ValidationError);

    auto odd_side = samples;
    odd_side[0].content = noise_image(Rng(3), 12);
    odd_side[0].stylized = noise_image(Rng(4), 12);
    CHECK_THROWS_AS(train_stage2_samples<double>(odd_side, dicts, stage2_cfg(1, 2), nullptr, {}, rs),
                    ValidationError);
}

TEST_CASE("zero-weight samples do not perturb training at all") {
    auto dicts = tiny_dicts(3);
    auto samples = tiny_samples(4, 8, 2);
    const ReasonerShape rs = tiny_shape();
    const TrainConfig cfg = stage2_cfg(2, 2);

    auto with_zero = samples;
    Stage2Sample<double> dead;
    dead.content = noise_image(Rng(91), 8);
    dead.stylized = noise_image(Rng(92), 8);
    dead.emotion = 5;
    dead.weight = 0.0;
    with_zero.insert(with_zero.begin() + 2, dead);

    auto a = train_stage2_samples<double>(samples, dicts, cfg, nullptr, {}, rs);
    auto b = train_stage2_samples<double>(with_zero, dicts, cfg, nullptr, {}, rs);
    CHECK(params_bit_equal(a.state.params, b.state.params));
    REQUIRE(a.epoch_total.size() == b.epoch_total.size());
    for (std::size_t i = 0; i < a.epoch_total.size(); ++i)
        CHECK(a.epoch_total[i] == b.epoch_total[i]);
}

TEST_CASE("flow-matching loss sends no gradient into the reasoner") {
    auto dicts = tiny_dicts(4);
    const ReasonerShape rs = tiny_shape();

    // graph-level: backward from the FM node alone touches no reasoner.* param
    ParamSet<double> ps;
    Rng base(8);
    add_content_params(ps, base.derive("init.content"));
    add_reasoner_params(ps, rs, base.derive("init.reasoner"));
    add_velocity_params(ps, base.derive("init.vel"));

    const Image content = noise_image(Rng(21), 8);
    const Image stylized = noise_image(Rng(22), 8);
    Tape<double> tape;
    const NodeId tokens = content_tokens_node(tape, content_raw_features<double>(content), ps);
    const NodeId q = reason_node(tape, encode_emotion<double>(3), tokens, ps, rs);
    auto [z, k] = quantize(tape.value(q), 3, dicts);
    (void)k;
    Tensor<double> eps(Shape{3, 8, 8});
    Rng erng(23);
    for (auto& x : eps.data) x = erng.gaussian();
    const NodeId fm = fm_loss_node(tape, to_tensor<double>(stylized), tape.constant(to_tensor<double>(content)),
                                   tokens, tape.constant(z), 0.4, eps, ps);
    Grads<double> g;
    tape.backward(fm, g);
    std::size_t vel_grads = 0;
    for (const auto& [name, t] : g) {
        (void)t;
        CHECK(name.rfind("reasoner.", 0) != 0);
        vel_grads += name.rfind("vel.", 0) == 0 ? 1 : 0;
    }
    CHECK(vel_grads > 0);
    CHECK(g.count("content.proj.w") == 1);  // content reaches the velocity net

    // end to end: with align weight 0, reasoner params never move
    TrainConfig cfg = stage2_cfg(2, 2);
    cfg.align_weight = 0.0;
    auto samples = tiny_samples(4, 8, 5);
    auto res = train_stage2_samples<double>(samples, dicts, cfg, nullptr, {}, rs);

    ParamSet<double> fresh;
    Rng init(cfg.seed);
    add_content_params(fresh, init.derive("init.content"));
    add_reasoner_params(fresh, rs, init.derive("init.reasoner"));
    add_velocity_params(fresh, init.derive("init.vel"));
    add_text_params(fresh, init.derive("init.text"));

    bool vel_moved = false;
    for (const auto& name : res.state.params.names()) {
        const auto& now = res.state.params.param(name).data;
        const auto& was = fresh.param(name).data;
        if (name.rfind("reasoner.", 0) == 0) {
            CHECK(std::memcmp(now.data(), was.data(), now.size() * sizeof(double)) == 0);
        } else if (name.rfind("vel.", 0) == 0 && std::memcmp(now.data(), was.data(), now.size() * sizeof(double)) != 0) {
            vel_moved = true;
        }
    }
    CHECK(vel_moved);
}

TEST_CASE("a huge align weight collapses queries onto prototypes") {
    auto dicts = tiny_dicts(6, 0.3);
    auto samples = tiny_samples(3, 8, 7);
    TrainConfig cfg = stage2_cfg(500, 1);
    cfg.align_weight = 1e4;
    cfg.learning_rate = 0.01;
    auto res = train_stage2_samples<double>(samples, dicts, cfg, nullptr, {}, tiny_shape());

    // epoch_align logs e_n * lambda * L_align; weights are 1 here
    const double mean_align = res.epoch_align.back() / cfg.align_weight;
    CHECK(mean_align < 1e-2);
    CHECK(res.epoch_align.back() < res.epoch_align.front());
}

TEST_CASE("resumed stage-2 training is bit-identical to an uninterrupted run") {
    auto dicts = tiny_dicts(9);
    auto samples = tiny_samples(4, 8, 11);
    const ReasonerShape rs = tiny_shape();

    auto full = train_stage2_samples<double>(samples, dicts, stage2_cfg(4, 2), nullptr, {}, rs);

    const fs::path path = fs::temp_directory_path() / "emostyle_resume_test.ckpt";
    auto half = train_stage2_samples<double>(samples, dicts, stage2_cfg(2, 2), nullptr, path, rs);
    (void)half;

    const CheckpointData d = load_checkpoint(path);
    Stage2State<double> state = load_stage2_state<double>(d);
    CHECK(state.next_epoch == 2);
    StyleDicts<double> dicts_back = unpack_dicts<double>(d);

    CHECK_THROWS_WITH_AS(train_stage2_samples<double>(samples, dicts_back, stage2_cfg(1, 2), &state, {}, rs),
                         doctest::Contains("ahead of config"), ValidationError);

    auto resumed = train_stage2_samples<double>(samples, dicts_back, stage2_cfg(4, 2), &state, {}, rs);
    CHECK(params_bit_equal(full.state.params, resumed.state.params));

    REQUIRE(full.state.opt_state.size() == resumed.state.opt_state.size());
    for (const auto& [name, t] : full.state.opt_state) {
        REQUIRE(resumed.state.opt_state.count(name) == 1);
        const auto& o = resumed.state.opt_state.at(name);
        REQUIRE(o.shape == t.shape);
        CHECK(std::memcmp(o.data.data(), t.data.data(), t.data.size() * sizeof(double)) == 0);
    }

    // loading in the wrong precision is refused
    CHECK_THROWS_WITH_AS(load_stage2_state<float>(d), doctest::Contains("precision"),
                         ValidationError);
    fs::remove(path);
}

TEST_CASE("full stage-2 loss passes a finite-difference check") {
    auto dicts = tiny_dicts(13);
    const ReasonerShape rs = tiny_shape();
    const Image content = noise_image(Rng(61), 8);
    const Image stylized = noise_image(Rng(62), 8);
    const Tensor<double> x0 = to_tensor<double>(stylized);
    const Tensor<double> ximg = to_tensor<double>(content);
    const Tensor<double> raw = content_raw_features<double>(content);
    const Tensor<double> onehot = encode_emotion<double>(2);
    Tensor<double> eps(Shape{3, 8, 8});
    Rng erng(63);
    for (auto& x : eps.data) x = erng.gaussian();
    const double t = 0.37, lambda = 1.0, weight = 0.8;

    ParamSet<double> ps;
    Rng base(64);
    add_content_params(ps, base.derive("init.content"));
    add_reasoner_params(ps, rs, base.derive("init.reasoner"));
    add_velocity_params(ps, base.derive("init.vel"));

    CheckedLoss<double> loss = [&](const ParamSet<double>& p, Grads<double>* grads) {
        Tape<double> tape;
        const NodeId tokens = content_tokens_node(tape, raw, p);
        const NodeId q = reason_node(tape, onehot, tokens, p, rs);
        auto [z, k] = quantize(tape.value(q), 2, dicts);
        (void)k;
        const NodeId align = tape.sum_sq_diff(q, tape.constant(z));
        const NodeId fm =
            fm_loss_node(tape, x0, tape.constant(ximg), tokens, tape.constant(z), t, eps, p);
        const NodeId total = tape.scale(tape.add(fm, tape.scale(align, lambda)), weight);
        if (grads) tape.backward(total, *grads);
        return tape.scalar(total);
    };

    auto report = grad_check(loss, ps, 1e-5, 3, 515);
    CAPTURE(report.worst_param);
    CAPTURE(report.analytic);
    CAPTURE(report.numeric);
    CHECK(report.max_rel_err <= 1e-4);
    CHECK(report.coords_checked > 50);
}

TEST_CASE("stage 2 runs from a generated manifest") {
    const fs::path dir = fs::temp_directory_path() / "emostyle_trainer_ds";
    fs::remove_all(dir);
    // 16 triplets, seed picked so every emotion lands in the train split
    gen_synthetic(dir, 16, 1, 515253);
    Manifest m = load_manifest(dir / "manifest.jsonl");

    // features come from the same stylized images the trainer will see
    TrainConfig cfg1 = stage1_cfg("lloyd", 3, 2);
    cfg1.precision = "f64";
    auto s1 = train_stage1<double>(m, cfg1);
    CHECK(s1.final_loss >= 0.0);
    CHECK(s1.utilization > 0.0);

    TrainConfig cfg2 = stage2_cfg(1, 4);
    auto s2 = train_stage2<double>(m, s1.dicts, cfg2, nullptr, {}, tiny_shape());
    CHECK(s2.epoch_total.size() == 1);
    CHECK(s2.epoch_fm.size() == 1);
    CHECK(s2.epoch_align.size() == 1);
    CHECK(std::isfinite(s2.final_loss));
    CHECK(s2.epoch_total[0] == doctest::Approx(s2.epoch_fm[0] + s2.epoch_align[0]));
    CHECK(s2.state.next_epoch == 1);

    std::uint64_t assigned = 0;
    for (const auto& d : s2.dicts.by_emotion)
        for (std::uint64_t u : d.usage) assigned += u;
    CHECK(assigned == 15);  // 16 triplets, index 9 is the test split
    fs::remove_all(dir);
}
