#pragma once

// Run configuration, experiment protocols and the ablation rows, shared by
// the command-line tool and the acceptance harness.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fogda/eval.hpp"
#include "fogda/scene.hpp"
#include "fogda/train.hpp"

namespace fogda {

inline constexpr int kRunConfigVersion = 1;

struct RunConfig {
    int version = kRunConfigVersion;
    DatasetConfig dataset;
    TrainConfig train;
    std::filesystem::path data_dir = "data";
    std::filesystem::path run_dir = "runs/default";
    // upperbound | lowerbound | da | ablation-<n>
    std::string protocol = "da";

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

Json to_json(const RunConfig& c);
// Strict: unknown keys and a wrong version raise ConfigError.
RunConfig run_config_from_json(const Json& j);
// Parse errors name the line and column.
RunConfig parse_run_config(const std::string& text, const std::string& source = "config");
RunConfig load_run_config(const std::filesystem::path& path);

// Source-only protocols train with every adaptation term off.
bool is_source_only(const std::string& protocol);
void validate_protocol(const std::string& protocol);
// test_clear for upperbound, test_target otherwise.
std::string protocol_split(const std::string& protocol);
// Throws ConfigError when a protocol is evaluated on the wrong split.
void check_protocol_split(const std::string& protocol, const std::string& split);
// Protocol tag for evaluating a model trained under `trained` on `split`.
std::string eval_protocol(const std::string& trained, const std::string& split);

struct AblationRow {
    std::string name;
    LossToggles toggles;
};

// DA only; +DEB; +DEB+Consist; +DEB+Consist+Reconst; full (+PL).
std::vector<AblationRow> ablation_rows();

// Training config as actually used for a protocol (toggles forced off for
// the source-only protocols).
TrainConfig effective_train_config(const RunConfig& c);

struct RunOutcome {
    TrainResult result;
    MetricsReport metrics;
};

// Trains on the dataset at c.data_dir, writing config.lock.json, log.jsonl,
// checkpoints/ and metrics.json (final student on the protocol's split)
// under run_dir.
RunOutcome run_training(const RunConfig& c, const std::filesystem::path& run_dir);

// Latest ckpt_<n>.bin (or ema_<n>.bin) under run_dir/checkpoints.
std::filesystem::path latest_checkpoint(const std::filesystem::path& run_dir, bool ema);

}  // namespace fogda
