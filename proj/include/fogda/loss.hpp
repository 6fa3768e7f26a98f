#pragma once

// Detection, adversarial transmission, depth, consistency and
// reconstruction losses, and their weighted total.

#include <array>
#include <span>
#include <vector>

#include "fogda/image.hpp"
#include "fogda/json_util.hpp"
#include "fogda/model.hpp"
#include "fogda/scene.hpp"

namespace fogda {

struct LossWeights {
    double lambda = 0.1;  // domain adaptation
    double a = 10.0;      // depth
    double b = 1.0;       // consistency
    double c = 1.0;       // reconstruction

    void validate() const;
    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

Json to_json(const LossWeights& w);
void read_json(StrictReader& r, LossWeights& w);

// Scalar values of every term, for reports and logs.
struct LossBundle {
    double det = 0.0;
    double da = 0.0;
    double depth = 0.0;
    double cst = 0.0;
    double rec = 0.0;
    double det_pl = 0.0;
    double total = 0.0;

    friend bool operator==(const LossBundle&, const LossBundle&) = default;
};

Json to_json(const LossBundle& b);

// The same terms as tape nodes.
struct LossTerms {
    Var det, da, depth, cst, rec, det_pl;
};

// Per-coordinate scale of the box regression residual (x, y, log w, log h).
inline constexpr std::array<double, 4> kBoxDeltaScale{10.0, 10.0, 5.0, 5.0};

struct DetectionLoss {
    Var rpn;
    Var cls;
    Var bbox;
    Var sum;
};

// labels[n] are the boxes of batch item n. Each box goes to the cell holding
// its centre; when two boxes share a cell the earlier one wins.
DetectionLoss detection_loss(const RawGridPrediction& raw, std::span<const std::vector<BoxLabel>> labels,
                             double image_size);
DetectionLoss detection_loss(const RawGridPrediction& raw, const std::vector<BoxLabel>& labels, double image_size);

std::vector<BoxLabel> to_labels(const std::vector<Detection>& dets);

// mean(src^2) + mean((t - tgt)^2).
Var da_loss(Var src_pred, Var tgt_pred, const Tensor& t_resized);
// Source-only: target samples contribute a constant zero.
Var depth_loss(Var deb_out, const Tensor& depth_resized, Domain domain);
// Target-only: mean((Norm(-log trans) - Norm(deb))^2).
Var consistency_loss(Var trans_pred, Var deb_out, Domain domain);
// Target-only MSE against the clear or defogged image.
Var reconstruction_loss(Var recon, const Tensor& i_de, Domain domain);

double total_loss(const LossBundle& b, const LossWeights& w);
Var total_loss(const LossTerms& t, const LossWeights& w);

// Non-overlapping average pooling; sizes must divide exactly.
Map2D resize_to_feature(const Map2D& map, std::size_t out_h, std::size_t out_w);

}  // namespace fogda
