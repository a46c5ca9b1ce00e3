#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "emostyle/image.hpp"
#include "emostyle/rng.hpp"

namespace emostyle {

// One planted style recipe. Applied in this order: hue rotation, saturation
// scale, per-channel gamma, edge darkening, grain, clamp to [0,1].
struct StyleTransformSpec {
    double hue_deg = 0.0;        // [0, 360)
    double sat_scale = 1.0;      // [0.6, 1.6]
    double gamma = 1.0;          // [0.7, 1.6]
    double edge_strength = 0.0;  // [0, 0.15]
    double grain = 0.0;          // [0, 0.005]
};

// spec table indexed [emotion][style_id]
using SpecTable = std::vector<std::vector<StyleTransformSpec>>;

// Specs are spread over a hue wheel (one spoke per spec, seeded permutation,
// small jitter) and redrawn until every pair differs in at least 2 of the 5
// parameters by >= 20% of that parameter's range.
SpecTable make_spec_table(std::size_t styles_per_emotion, Rng rng);

bool specs_distinct(const StyleTransformSpec& a, const StyleTransformSpec& b);

void save_spec_table(const SpecTable& table, const std::filesystem::path& path);
SpecTable load_spec_table(const std::filesystem::path& path);

// 2..5 vivid shapes (circle / triangle / rectangle) on a muted background,
// hard edges, 8-bit quantized. 32x32.
Image render_scene(Rng rng);

// Pure in (image, spec, grain_seed); grain_seed only matters when
// spec.grain > 0. Identity stages are skipped so an identity spec returns
// the input bit for bit.
Image apply_style_transform(const Image& img, const StyleTransformSpec& spec, std::uint64_t grain_seed = 0);

enum class Split { train, test };

struct Triplet {
    std::string content;   // image paths relative to the manifest directory
    std::string stylized;
    int emotion = 0;
    double emotion_score = 1.0;  // (0, 1]
    std::optional<int> style_id;
    Split split = Split::train;
};

struct ManifestHeader {
    bool present = false;
    std::size_t n_triplets = 0;
    std::size_t styles_per_emotion = 0;
    std::uint64_t seed = 0;
    double mean_edge_iou = 0.0;
};

struct Manifest {
    ManifestHeader header;
    std::vector<Triplet> triplets;
    std::filesystem::path dir;  // directory the image paths are relative to
};

struct GenSummary {
    std::size_t n_triplets = 0;
    double mean_edge_iou = 0.0;
    std::filesystem::path manifest_path;
};

// Writes content/NNNNNN.png, stylized/NNNNNN.png, manifest.jsonl (header
// line first), specs.jsonl. Every 10th triplet goes to the test split.
GenSummary gen_synthetic(const std::filesystem::path& out_dir, std::size_t n_triplets,
                         std::size_t styles_per_emotion, std::uint64_t seed);

// Parses and validates; images are not opened here. Errors carry 1-based
// line numbers. If specs.jsonl sits next to the manifest, any (emotion,
// style_id) without a spec is rejected.
Manifest load_manifest(const std::filesystem::path& path);

// Reads one triplet's PNGs and checks both are 32x32.
std::pair<Image, Image> load_triplet_images(const Manifest& m, const Triplet& t);

}  // namespace emostyle
