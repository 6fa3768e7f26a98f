#pragma once

// The five sub-networks (backbone, detection head, discriminator, depth
// block, decoder), grid box coding, decoding/NMS and checkpoints.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fogda/box.hpp"
#include "fogda/json_util.hpp"
#include "fogda/tensor.hpp"

namespace fogda {

struct ModelConfig {
    std::size_t in_channels = 3;
    std::size_t num_classes = 3;
    std::size_t image_size = 64;

    // Backbone stride is 16, so the grid is image_size / 16 cells wide.
    std::size_t grid() const { return image_size / 16; }
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline constexpr double kCellSize = 16.0;

template <class T>
struct ConvLayer {
    T weight;
    T bias;
};

template <class T>
struct ModelT {
    std::array<ConvLayer<T>, 4> backbone;
    std::array<ConvLayer<T>, 2> det_head;
    std::array<ConvLayer<T>, 3> discriminator;
    std::array<ConvLayer<T>, 2> deb;
    std::array<ConvLayer<T>, 4> decoder;

    // Visits (name, weight-or-bias) pairs in the canonical order.
    template <class Self, class F>
    static void visit(Self& m, F&& f) {
        auto group = [&](const char* name, auto& layers) {
            for (std::size_t i = 0; i < layers.size(); ++i) {
                const std::string prefix = std::string(name) + "." + std::to_string(i);
                f(prefix + ".weight", layers[i].weight);
                f(prefix + ".bias", layers[i].bias);
            }
        };
        group("backbone", m.backbone);
        group("det_head", m.det_head);
        group("discriminator", m.discriminator);
        group("deb", m.deb);
        group("decoder", m.decoder);
    }
};

using ModelParams = ModelT<Tensor>;
using ModelVars = ModelT<Var>;

// Kaiming-normal weights (std sqrt(2 / fan_in)), zero biases.
ModelParams init_model(const ModelConfig& config, std::uint64_t seed);

std::vector<ParamRef> param_refs(ModelParams& params);
std::vector<std::string> param_names(const ModelParams& params);
std::size_t param_count(const ModelParams& params);
bool same_shapes(const ModelParams& a, const ModelParams& b);

// Puts every parameter on the tape: as leaves when trainable, else constants.
ModelVars bind(Tape& tape, const ModelParams& params, bool trainable);
// Gradients of every parameter after backward(), canonical order.
std::vector<Tensor> gather_grads(const Tape& tape, const ModelVars& vars);

// [N,C,S,S] image -> [N,64,G,G] features.
Var backbone_forward(const ModelVars& m, Var image, const ModelConfig& config);

struct RawGridPrediction {
    Var objectness;    // [N,1,G,G] logits
    Var class_logits;  // [N,K,G,G]
    Var box_deltas;    // [N,4,G,G]: offset logits (x,y), log(w/16), log(h/16)
};

RawGridPrediction det_head_forward(const ModelVars& m, Var feat, const ModelConfig& config);
// Predicted transmission [N,1,G,G] in (0,1). The GRL sits on its input.
Var discriminator_forward(const ModelVars& m, Var feat, double grl_coeff = 1.0);
// Predicted depth [N,1,G,G], nonnegative.
Var deb_forward(const ModelVars& m, Var feat);
// Reconstructed image [N,C,S,S] in (0,1).
Var decoder_forward(const ModelVars& m, Var feat);

struct Detection {
    int class_id = 0;
    Box box;
    double score = 0.0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

// Grid cell and regression target for one box.
struct EncodedBox {
    std::size_t row = 0;
    std::size_t col = 0;
    // Offsets of the centre inside the cell in [0,1], then log(w/16), log(h/16).
    std::array<double, 4> target{};
};

EncodedBox encode_box(const Box& box, std::size_t grid);
// Raw deltas for a cell whose sigmoid/exp decode gives exactly `target`.
std::array<double, 4> target_to_deltas(const std::array<double, 4>& target);
// Box from raw deltas of cell (row, col), clipped to [0, image_size].
Box decode_box(std::size_t row, std::size_t col, std::span<const double, 4> deltas, double image_size);

// Detections of batch item n with score >= conf_thresh, NMS per class.
std::vector<Detection> decode_detections(const RawGridPrediction& raw, std::size_t n, double conf_thresh,
                                         double nms_iou = 0.5, double image_size = 64.0);

// Greedy per-class NMS in descending score order; boxes overlapping a kept
// box of the same class with IoU > iou_thresh are dropped.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

// Checkpoint: "FCKP", u32 header length, JSON header (names, shapes,
// iteration, ema flag, model config), then every value as float64 LE in
// canonical order.
struct Checkpoint {
    ModelParams params;
    ModelConfig config;
    std::size_t iteration = 0;
    bool ema = false;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Json to_json(const ModelConfig& config);

}  // namespace fogda
