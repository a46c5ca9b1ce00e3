#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "emostyle/dataset.hpp"
#include "emostyle/encoders.hpp"
#include "emostyle/errors.hpp"
#include "emostyle/tensor.hpp"

using namespace emostyle;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* stem) {
    auto p = fs::temp_directory_path() / (std::string("emostyle_ds_") + stem);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

Image flat_image(float r, float g, float b) {
    Image img(32, 32);
    for (std::size_t p = 0; p < img.pixels(); ++p) {
        img.data[p] = r;
        img.data[p + img.pixels()] = g;
        img.data[p + 2 * img.pixels()] = b;
    }
    return img;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

// one shared small dataset so the expensive generation runs once
const fs::path& shared_dataset() {
    static fs::path dir = [] {
        auto p = temp_dir("shared2000");
        gen_synthetic(p, 2000, 2, 20250801);
        return p;
    }();
    return dir;
}

}  // namespace

TEST_CASE("spec table is in range, distinct, and deterministic") {
    auto t1 = make_spec_table(2, Rng(5));
    auto t2 = make_spec_table(2, Rng(5));
    REQUIRE(t1.size() == 8);
    std::vector<StyleTransformSpec> flat;
    for (std::size_t e = 0; e < 8; ++e) {
        REQUIRE(t1[e].size() == 2);
        for (std::size_t s = 0; s < 2; ++s) {
            const auto& a = t1[e][s];
            const auto& b = t2[e][s];
            CHECK(a.hue_deg == b.hue_deg);
            CHECK(a.sat_scale == b.sat_scale);
            CHECK(a.gamma == b.gamma);
            CHECK(a.edge_strength == b.edge_strength);
            CHECK(a.grain == b.grain);
            CHECK(a.hue_deg >= 0.0);
            CHECK(a.hue_deg < 360.0);
            CHECK(a.sat_scale >= 0.4);
            CHECK(a.sat_scale <= 1.6);
            CHECK(a.gamma >= 0.6);
            CHECK(a.gamma <= 1.6);
            CHECK(a.edge_strength >= 0.0);
            CHECK(a.edge_strength <= 0.25);
            CHECK(a.grain >= 0.0);
            CHECK(a.grain <= 0.008);
            flat.push_back(a);
        }
    }
    for (std::size_t i = 0; i < flat.size(); ++i)
        for (std::size_t j = i + 1; j < flat.size(); ++j) CHECK(specs_distinct(flat[i], flat[j]));
    CHECK_THROWS_AS(make_spec_table(0, Rng(5)), ValidationError);
    CHECK_THROWS_AS(make_spec_table(9, Rng(5)), ValidationError);
}

TEST_CASE("identity spec returns the input bit for bit") {
    Image img = render_scene(Rng(31));
    StyleTransformSpec id;
    Image out = apply_style_transform(img, id, 999);
    REQUIRE(out.data.size() == img.data.size());
    for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(out.data[i] == img.data[i]);
}

TEST_CASE("a full hue turn is invisible up to 8-bit quantization") {
    Image img = render_scene(Rng(32));
    StyleTransformSpec spec;
    spec.hue_deg = 360.0;
    Image out = quantize8(apply_style_transform(img, spec, 0));
    float worst = 0.0f;
    for (std::size_t i = 0; i < img.data.size(); ++i) worst = std::max(worst, std::fabs(out.data[i] - img.data[i]));
    CHECK(worst <= 1.01f / 255.0f);
}

TEST_CASE("hue +120 turns pure red into pure green") {
    Image red = flat_image(1.0f, 0.0f, 0.0f);
    StyleTransformSpec spec;
    spec.hue_deg = 120.0;
    Image out = quantize8(apply_style_transform(red, spec, 0));
    for (std::size_t p = 0; p < out.pixels(); ++p) {
        CHECK(std::fabs(out.data[p] - 0.0f) <= 1.01f / 255.0f);
        CHECK(std::fabs(out.data[p + out.pixels()] - 1.0f) <= 1.01f / 255.0f);
        CHECK(std::fabs(out.data[p + 2 * out.pixels()] - 0.0f) <= 1.01f / 255.0f);
    }
}

TEST_CASE("grain is seeded and saturation scaling stays bounded") {
    Image img = render_scene(Rng(33));
    StyleTransformSpec spec;
    spec.grain = 0.05;
    Image a = apply_style_transform(img, spec, 7);
    Image b = apply_style_transform(img, spec, 7);
    Image c = apply_style_transform(img, spec, 8);
    std::size_t diff = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        CHECK(a.data[i] == b.data[i]);
        diff += a.data[i] != c.data[i] ? 1 : 0;
    }
    CHECK(diff > 0);
    StyleTransformSpec sat;
    sat.sat_scale = 1.6;
    Image s = apply_style_transform(img, sat, 0);
    for (float v : s.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("scenes are deterministic, quantized, and varied") {
    Image a = render_scene(Rng(40));
    Image b = render_scene(Rng(40));
    Image c = render_scene(Rng(41));
    REQUIRE(a.data.size() == 3 * 32 * 32);
    std::size_t diff = 0;
    std::set<float> values;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        CHECK(a.data[i] == b.data[i]);
        diff += a.data[i] != c.data[i] ? 1 : 0;
        // every value sits on the 8-bit grid
        const float g = a.data[i] * 255.0f;
        CHECK(std::fabs(g - std::round(g)) <= 1e-4f);
        values.insert(a.data[i]);
    }
    CHECK(diff > 0);
    CHECK(values.size() >= 4);  // background + at least one shape, 3 channels
}

TEST_CASE("generation is byte-identical across runs with the same seed") {
    auto d1 = temp_dir("det1");
    auto d2 = temp_dir("det2");
    auto s1 = gen_synthetic(d1, 24, 2, 77);
    auto s2 = gen_synthetic(d2, 24, 2, 77);
    CHECK(s1.mean_edge_iou == s2.mean_edge_iou);
    CHECK(slurp(d1 / "manifest.jsonl") == slurp(d2 / "manifest.jsonl"));
    CHECK(slurp(d1 / "specs.jsonl") == slurp(d2 / "specs.jsonl"));
    for (int i = 0; i < 24; ++i) {
        char name[16];
        std::snprintf(name, sizeof name, "%06d.png", i);
        CHECK(slurp(d1 / "content" / name) == slurp(d2 / "content" / name));
        CHECK(slurp(d1 / "stylized" / name) == slurp(d2 / "stylized" / name));
    }
    CHECK_THROWS_AS(gen_synthetic(d1, 8, 2, 77), ValidationError);
}

TEST_CASE("default dataset: balance, splits, edge structure, round trip") {
    const auto& dir = shared_dataset();
    Manifest m = load_manifest(dir / "manifest.jsonl");
    REQUIRE(m.triplets.size() == 2000);
    REQUIRE(m.header.present);
    CHECK(m.header.n_triplets == 2000);
    CHECK(m.header.styles_per_emotion == 2);

    // multinomial bound: each of the 16 classes within 3 sigma of n/16
    std::map<std::pair<int, int>, int> counts;
    std::size_t test_count = 0;
    for (const auto& t : m.triplets) {
        REQUIRE(t.style_id.has_value());
        counts[{t.emotion, *t.style_id}]++;
        test_count += t.split == Split::test ? 1 : 0;
        CHECK(t.emotion_score > 0.5);
        CHECK(t.emotion_score <= 1.0);
    }
    REQUIRE(counts.size() == 16);
    const double expected = 2000.0 / 16.0;
    const double sigma = std::sqrt(2000.0 * (1.0 / 16.0) * (15.0 / 16.0));
    for (const auto& [k, c] : counts) CHECK(std::fabs(c - expected) <= 3.0 * sigma);
    CHECK(test_count == 200);

    // structure preservation, as recorded at generation time and re-measured
    CHECK(m.header.mean_edge_iou >= 0.5);
    double remeasured = 0.0;
    for (int i = 0; i < 64; ++i) {
        auto [content, stylized] = load_triplet_images(m, m.triplets[i]);
        const double iou = edge_iou(content, stylized);
        CHECK(iou >= 0.5);  // holds per triplet, not just on average
        remeasured += iou;
    }
    CHECK(remeasured / 64.0 >= 0.5);
}

TEST_CASE("style features separate the planted transforms") {
    const auto& dir = shared_dataset();
    Manifest m = load_manifest(dir / "manifest.jsonl");
    // a handful of feature vectors per (emotion, style) class
    std::map<std::pair<int, int>, std::vector<Tensor<double>>> by_class;
    for (const auto& t : m.triplets) {
        auto key = std::make_pair(t.emotion, *t.style_id);
        auto& bucket = by_class[key];
        if (bucket.size() >= 6) continue;
        auto [content, stylized] = load_triplet_images(m, t);
        bucket.push_back(encode_style<double>(stylized));
    }
    REQUIRE(by_class.size() == 16);
    double intra = 0.0, inter = 0.0;
    std::size_t n_intra = 0, n_inter = 0;
    std::vector<std::pair<std::pair<int, int>, std::vector<Tensor<double>>>> classes(by_class.begin(),
                                                                                     by_class.end());
    for (std::size_t a = 0; a < classes.size(); ++a) {
        const auto& fa = classes[a].second;
        for (std::size_t i = 0; i < fa.size(); ++i)
            for (std::size_t j = i + 1; j < fa.size(); ++j) {
                intra += l2_distance(fa[i], fa[j]);
                ++n_intra;
            }
        for (std::size_t b = a + 1; b < classes.size(); ++b)
            for (const auto& x : fa)
                for (const auto& y : classes[b].second) {
                    inter += l2_distance(x, y);
                    ++n_inter;
                }
    }
    intra /= double(n_intra);
    inter /= double(n_inter);
    INFO("intra ", intra, " inter ", inter, " ratio ", inter / intra);
    CHECK(inter > 2.0 * intra);
}

TEST_CASE("loader reports structured per-line errors") {
    auto dir = temp_dir("loader");
    auto write_manifest = [&](const std::string& body) {
        std::ofstream f(dir / "manifest.jsonl");
        f << body;
    };
    const std::string good =
        R"({"content":"c.png","stylized":"s.png","emotion":"awe","emotion_score":0.9,"style_id":null,"split":"train"})"
        "\n";

    write_manifest(good);
    CHECK(load_manifest(dir / "manifest.jsonl").triplets.size() == 1);

    write_manifest(good + R"({"content":"c.png","stylized":"s.png","emotion":"joy","emotion_score":0.9,"split":"train"})" "\n");
    try {
        load_manifest(dir / "manifest.jsonl");
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("line 2") != std::string::npos);
        for (const auto& name : emotion_names()) CHECK(msg.find(std::string(name)) != std::string::npos);
    }

    write_manifest(R"({"content":"c.png","stylized":"s.png","emotion":"awe","emotion_score":1.5,"split":"train"})" "\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir / "manifest.jsonl"),
                         doctest::Contains("emotion_score"), ValidationError);

    write_manifest(R"({"content":"c.png","stylized":"s.png","emotion":"awe","emotion_score":0.9,"split":"dev"})" "\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir / "manifest.jsonl"), doctest::Contains("split"), ValidationError);

    write_manifest("{not json}\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir / "manifest.jsonl"), doctest::Contains("line 1"), ValidationError);

    CHECK_THROWS_AS(load_manifest(dir / "missing.jsonl"), IoError);
}

TEST_CASE("loader rejects style ids without a spec") {
    auto dir = temp_dir("orphan");
    save_spec_table(make_spec_table(2, Rng(9)), dir / "specs.jsonl");
    std::ofstream f(dir / "manifest.jsonl");
    f << R"({"content":"c.png","stylized":"s.png","emotion":"fear","emotion_score":0.8,"style_id":5,"split":"train"})"
      << "\n";
    f.close();
    CHECK_THROWS_WITH_AS(load_manifest(dir / "manifest.jsonl"), doctest::Contains("style_id 5"), ValidationError);
}

TEST_CASE("spec table round-trips through specs.jsonl exactly") {
    auto dir = temp_dir("specsrt");
    auto table = make_spec_table(3, Rng(12));
    save_spec_table(table, dir / "specs.jsonl");
    auto back = load_spec_table(dir / "specs.jsonl");
    REQUIRE(back.size() == table.size());
    for (std::size_t e = 0; e < table.size(); ++e) {
        REQUIRE(back[e].size() == table[e].size());
        for (std::size_t s = 0; s < table[e].size(); ++s) {
            CHECK(back[e][s].hue_deg == table[e][s].hue_deg);
            CHECK(back[e][s].sat_scale == table[e][s].sat_scale);
            CHECK(back[e][s].gamma == table[e][s].gamma);
            CHECK(back[e][s].edge_strength == table[e][s].edge_strength);
            CHECK(back[e][s].grain == table[e][s].grain);
        }
    }
}

TEST_CASE("a 10041-line manifest loads in under five seconds") {
    auto dir = temp_dir("bigmanifest");
    {
        std::ofstream f(dir / "manifest.jsonl");
        for (int i = 0; i < 10041; ++i)
            f << R"({"content":"content/x.png","stylized":"stylized/x.png","emotion":")"
              << emotion_name(i % 8) << R"(","emotion_score":0.75,"style_id":null,"split":")"
              << (i % 10 == 9 ? "test" : "train") << R"("})"
              << "\n";
    }
    const auto t0 = std::chrono::steady_clock::now();
    Manifest m = load_manifest(dir / "manifest.jsonl");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    REQUIRE(m.triplets.size() == 10041);
    CHECK(secs < 5.0);
}

TEST_CASE("image size is checked on first read") {
    auto dir = temp_dir("sizecheck");
    Image small(8, 8);
    write_png((dir / "small.png").string(), small);
    write_png((dir / "ok.png").string(), render_scene(Rng(50)));
    std::ofstream f(dir / "manifest.jsonl");
    f << R"({"content":"small.png","stylized":"ok.png","emotion":"awe","emotion_score":0.9,"style_id":null,"split":"train"})"
      << "\n";
    f.close();
    Manifest m = load_manifest(dir / "manifest.jsonl");  // loads fine, images are lazy
    REQUIRE(m.triplets.size() == 1);
    CHECK_THROWS_WITH_AS(load_triplet_images(m, m.triplets[0]), doctest::Contains("32x32"), ValidationError);
}
