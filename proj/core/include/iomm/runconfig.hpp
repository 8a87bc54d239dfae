#pragma once

#include <set>
#include <string>

#include "iomm/flow.hpp"
#include "iomm/trainer.hpp"

// Run configuration: one strict-schema JSON document covering model, trainer,
// data, sampler, and recipe. Unknown keys are rejected with their JSON path;
// every field has a default; the digest is a SHA-256 of the canonicalized
// document (sorted keys, no whitespace) and is embedded in checkpoints.

namespace iomm {

struct DataConfig {
    int64_t train_items = 2048;
    int64_t val_items = 128;
    std::set<int> allowed_counts = {1, 2};
    uint64_t seed = 1234;

    void validate() const {
        if (train_items < 1 || val_items < 1)
            throw ConfigError("data split sizes must be >= 1");
        if (allowed_counts.empty())
            throw ConfigError("data.allowed_counts must not be empty");
        for (const int c : allowed_counts) {
            if (c < 1 || c > 3)
                throw ConfigError("data.allowed_counts entries must lie in 1..3");
        }
    }
};

struct RunConfig {
    ModelConfig model;
    TrainerConfig trainer;
    DataConfig data;
    SamplerConfig sampler;
    RecipeSpec recipe;
    std::string output_dir = "runs/default";
    bool deterministic = false;
    std::string digest;  // filled by parse/finalize

    void validate() const;
};

// Built-in defaults (equivalent to parsing "{}").
RunConfig default_config();

RunConfig parse_config_text(const std::string& json_text);
RunConfig parse_config(const std::string& path);

// Canonical JSON of the default-applied document; digest is SHA-256 over it.
std::string canonical_config_json(const RunConfig& cfg);
std::string config_digest(const RunConfig& cfg);

// Recomputes the digest after programmatic edits.
void finalize_config(RunConfig& cfg);

}  // namespace iomm
