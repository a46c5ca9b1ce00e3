#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace emostyle {

// Flat `key = value` training configuration; `#` starts a comment anywhere on
// a line. Every field has a key of the same name, and parse(dump(cfg))
// reproduces cfg exactly (doubles use shortest round-trip formatting).
struct TrainConfig {
    int stage = 1;                   // 1 = prototype learning, 2 = alignment
    int epochs = 10;
    int batch_size = 32;
    double learning_rate = 0.0;      // 0 = auto: 1e-3 for stage 1, 3e-4 for stage 2
    std::string optimizer = "adam";  // sgd | adam | lloyd (lloyd is stage-1 only)
    std::uint64_t seed = 0;
    int K = 8;                       // dictionary entries per emotion
    double tau = 0.8;                // codebook init temperature
    std::string dataset;             // manifest path; existence checked by the consumer
    double align_weight = 1.0;       // lambda on the align loss
    double drop_style = 0.1;         // stage-2 guidance dropout rates
    double drop_content = 0.1;
    std::string precision = "f32";   // f32 | f64

    double effective_learning_rate() const;

    // Structural checks only; throws ValidationError naming the bad field.
    void validate() const;
};

TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);

// Mutates one field from a "key=value" string (CLI overrides).
void apply_override(TrainConfig& cfg, const std::string& key_eq_value);

// Canonical text form, one key per line in declaration order.
std::string dump_config(const TrainConfig& cfg);

// FNV-1a over the canonical dump; stable fingerprint for reports.
std::uint64_t config_hash(const TrainConfig& cfg);

}  // namespace emostyle
