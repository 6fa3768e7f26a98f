#pragma once

// Two-stage training iteration with a mean-teacher EMA model producing
// pseudo-labels on defogged target images, and full-run orchestration.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "fogda/eval.hpp"
#include "fogda/loss.hpp"
#include "fogda/model.hpp"
#include "fogda/scene.hpp"

namespace fogda {

struct LossToggles {
    // da is off only for the source-only baselines (upper/lower bound).
    bool da = true;
    bool deb = true;
    bool cst = true;
    bool rec = true;
    bool pl = true;

    friend bool operator==(const LossToggles&, const LossToggles&) = default;
};

// Replace estimated quantities by renderer ground truth.
struct OracleFlags {
    bool transmission = false;  // t_gt instead of the DCP estimate for the DA target
    bool depth = false;         // noise-free depth for the depth block
    bool clear = false;         // true clear target instead of the DCP-defogged image

    friend bool operator==(const OracleFlags&, const OracleFlags&) = default;
};

struct TrainConfig {
    std::size_t iterations = 6000;
    double lr0 = 0.02;
    // Heavy-ball momentum on the SGD step (0 gives plain SGD).
    double momentum = 0.9;
    double tau = 0.8;
    double ema_decay = 0.999;
    LossWeights weights;
    LossToggles toggles;
    std::uint64_t seed = 0;
    std::size_t pl_warmup = 1000;
    OracleFlags oracle;
    // Source/target pairs per iteration.
    std::size_t batch = 8;
    double det_pl_weight = 1.0;
    double grl_coeff = 1.0;
    // Global L2 norm cap on the gradient before the momentum step; 0 disables.
    double grad_clip = 10.0;
    std::size_t checkpoint_every = 500;
    // 0 disables periodic evaluation.
    std::size_t eval_every = 1000;
    // Log-normal noise on the per-cell depth target, emulating a monocular
    // depth network's pseudo ground truth.
    double depth_noise = 0.1;
    double d_max = 80.0;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

Json to_json(const TrainConfig& c);
void read_json(StrictReader& r, TrainConfig& c);

// lr0 * 10^-floor(iter / (iterations / 3)).
double lr_schedule(std::size_t iter, const TrainConfig& config);

struct EmaState {
    ModelParams shadow;
    double decay = 0.999;
};

// shadow <- decay * shadow + (1 - decay) * params.
void ema_update(EmaState& ema, const ModelParams& params);

using PseudoLabelSet = std::vector<Detection>;

// Teacher forward on a constant-only tape; every kept detection has
// score >= tau and survives NMS.
PseudoLabelSet generate_pseudo_labels(const ModelParams& teacher, const ModelConfig& config, const Image& input,
                                      double tau);

struct SourceItem {
    Tensor image;          // [1,C,S,S] clear
    Tensor depth_resized;  // [1,1,G,G], depth / d_max
    std::vector<BoxLabel> labels;
};

struct TargetItem {
    Tensor image;      // [1,C,S,S] foggy
    Tensor t_resized;  // [1,1,G,G], DCP estimate or ground truth
    Tensor i_de;       // [1,C,S,S] reconstruction target
    Image pl_input;    // teacher input (defogged or clear)
    // Sealed labels, kept for auditing only; training never reads them.
    std::vector<BoxLabel> audit_labels;
};

struct TrainingSet {
    ModelConfig model;
    std::vector<std::string> class_names;
    std::vector<SourceItem> source;
    std::vector<TargetItem> target;
};

ModelConfig model_config(const DatasetManifest& manifest);

TrainingSet prepare_training_set(const DatasetManifest& manifest, const TrainConfig& config);

struct TrainState {
    ModelParams params;
    EmaState ema;
    // Momentum buffers, canonical parameter order.
    std::vector<Tensor> velocity;
    std::size_t iteration = 0;
};

TrainState init_state(const TrainConfig& config, const ModelConfig& model);

struct IterationReport {
    std::size_t iter = 0;
    double lr = 0.0;
    LossBundle losses;
    std::size_t n_pseudo_labels = 0;
    // Gradient norm before clipping.
    double grad_norm = 0.0;

    friend bool operator==(const IterationReport&, const IterationReport&) = default;
};

Json to_json(const IterationReport& r);

// Stage 1 (pseudo-labels from the EMA teacher), stage 2 (one backward on
// the weighted total and one SGD step), then the EMA update.
IterationReport train_iteration(TrainState& state, std::span<const SourceItem* const> sources,
                                std::span<const TargetItem* const> targets, const TrainConfig& config,
                                const ModelConfig& model);

struct TrainOptions {
    // Empty: nothing is written.
    std::filesystem::path run_dir;
    // Periodic evaluation set (student weights), may be empty.
    const std::vector<SceneSample>* eval_samples = nullptr;
    std::string eval_protocol = "da";
    std::function<void(const IterationReport&)> on_iteration;
};

struct TrainResult {
    TrainState state;
    std::vector<IterationReport> log;
};

TrainResult train(const TrainConfig& config, const TrainingSet& data, const TrainOptions& options = {});

std::string checkpoint_name(std::size_t iter, bool ema);

}  // namespace fogda
