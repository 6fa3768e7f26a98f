#pragma once

// Finite-difference catalogs for every tensor op and every loss term,
// shared by the unit tests and the acceptance binary.

#include <algorithm>
#include <span>
#include <vector>

#include "fogda/loss.hpp"
#include "fogda/tensor.hpp"
#include "gradcheck.hpp"

namespace fogda::testing {

// One entry per catalog op: a scalar-valued builder and input shapes.
struct OpCase {
    const char* name;
    LossBuilder build;
    std::vector<Shape> shapes;
    double lo = -1.0;
    double hi = 1.0;
    double factor = 1.0;
};

inline std::vector<OpCase> op_catalog() {
    using fogda::testing::weighted_sum;
    std::vector<OpCase> cases;
    cases.push_back({"conv2d",
                     [](Tape&, std::span<const Var> v) { return weighted_sum(conv2d(v[0], v[1], v[2], 2, 1)); },
                     {{2, 3, 6, 6}, {4, 3, 3, 3}, {4}}});
    cases.push_back({"conv2d_1x1",
                     [](Tape&, std::span<const Var> v) { return weighted_sum(conv2d(v[0], v[1], v[2], 1, 0)); },
                     {{1, 3, 4, 4}, {2, 3, 1, 1}, {2}}});
    cases.push_back({"relu", [](Tape&, std::span<const Var> v) { return weighted_sum(relu(v[0])); }, {{3, 5}}});
    cases.push_back({"sigmoid", [](Tape&, std::span<const Var> v) { return weighted_sum(sigmoid(v[0])); }, {{3, 5}}, -4, 4});
    cases.push_back({"exp", [](Tape&, std::span<const Var> v) { return weighted_sum(exp(v[0])); }, {{3, 5}}});
    cases.push_back({"log", [](Tape&, std::span<const Var> v) { return weighted_sum(log(v[0])); }, {{3, 5}}, 0.1, 2.0});
    cases.push_back({"add", [](Tape&, std::span<const Var> v) { return weighted_sum(add(v[0], v[1])); }, {{2, 3}, {2, 3}}});
    cases.push_back({"sub", [](Tape&, std::span<const Var> v) { return weighted_sum(sub(v[0], v[1])); }, {{2, 3}, {2, 3}}});
    cases.push_back({"mul", [](Tape&, std::span<const Var> v) { return weighted_sum(mul(v[0], v[1])); }, {{2, 3}, {2, 3}}});
    cases.push_back({"scale", [](Tape&, std::span<const Var> v) { return weighted_sum(scale(v[0], -2.5)); }, {{4}}});
    cases.push_back({"mean", [](Tape&, std::span<const Var> v) { return mean(mul(v[0], v[0])); }, {{7}}});
    cases.push_back({"concat_channels",
                     [](Tape&, std::span<const Var> v) { return weighted_sum(concat_channels(v[0], v[1])); },
                     {{2, 2, 3, 3}, {2, 1, 3, 3}}});
    cases.push_back({"slice_channels",
                     [](Tape&, std::span<const Var> v) { return weighted_sum(slice_channels(v[0], 1, 3)); },
                     {{2, 4, 2, 2}}});
    cases.push_back({"upsample_nearest2x",
                     [](Tape&, std::span<const Var> v) { return weighted_sum(upsample_nearest2x(v[0])); },
                     {{1, 2, 3, 3}}});
    cases.push_back({"avg_pool",
                     [](Tape&, std::span<const Var> v) { return weighted_sum(avg_pool(v[0], 3, 2)); },
                     {{1, 2, 7, 5}}});
    cases.push_back({"minmax_normalize",
                     [](Tape&, std::span<const Var> v) { return weighted_sum(minmax_normalize(v[0])); },
                     {{1, 1, 4, 4}}});
    cases.push_back({"mse", [](Tape&, std::span<const Var> v) { return mse(v[0], v[1]); }, {{2, 5}, {2, 5}}});
    cases.push_back({"softmax_cross_entropy",
                     [](Tape&, std::span<const Var> v) {
                         const int targets[] = {0, 2, -1, 1, 1, 0, 2, -1};
                         return softmax_cross_entropy(v[0], targets);
                     },
                     {{2, 3, 2, 2}}, -3, 3});
    cases.push_back({"bce_with_logits",
                     [](Tape&, std::span<const Var> v) {
                         Tensor t({1, 1, 2, 3}, {0, 1, 1, 0, 0.5, 1});
                         return bce_with_logits(v[0], t);
                     },
                     {{1, 1, 2, 3}}, -3, 3});
    cases.push_back({"smooth_l1",
                     [](Tape&, std::span<const Var> v) {
                         Tensor t({2, 4}, {0.1, -2.0, 0.5, 3.0, 0.0, 0.2, -0.7, 1.0});
                         Tensor m({2, 4}, {1, 1, 1, 1, 0, 1, 1, 0});
                         return smooth_l1(v[0], t, m);
                     },
                     {{2, 4}}, -3, 3});
    cases.push_back({"grl", [](Tape&, std::span<const Var> v) { return weighted_sum(grl(v[0], 0.7)); }, {{2, 3}}, -1, 1, -0.7});
    return cases;
}

inline std::vector<OpCase> loss_catalog() {
    std::vector<OpCase> cases;
    // Raw grid outputs for a batch of two 2x2 grids with three classes.
    cases.push_back({"detection_loss",
                     [](Tape&, std::span<const Var> v) {
                         RawGridPrediction raw{v[0], v[1], v[2]};
                         const std::vector<std::vector<BoxLabel>> labels{
                             {{0, {2.0, 3.0, 14.0, 12.0}}, {2, {18.0, 20.0, 31.0, 30.0}}}, {{1, {5.0, 17.0, 27.0, 29.0}}}};
                         return detection_loss(raw, labels, 32.0).sum;
                     },
                     {{2, 1, 2, 2}, {2, 3, 2, 2}, {2, 4, 2, 2}}, -1.5, 1.5});
    cases.push_back({"da_loss",
                     [](Tape&, std::span<const Var> v) {
                         Tensor t({1, 1, 2, 2}, {0.3, 0.7, 0.9, 0.5});
                         return da_loss(v[0], v[1], t);
                     },
                     {{1, 1, 2, 2}, {1, 1, 2, 2}}, 0.05, 0.95});
    cases.push_back({"depth_loss",
                     [](Tape&, std::span<const Var> v) {
                         Tensor d({1, 1, 2, 2}, {0.1, 0.4, 0.25, 0.9});
                         return depth_loss(v[0], d, Domain::source);
                     },
                     {{1, 1, 2, 2}}, 0.0, 1.0});
    cases.push_back({"consistency_loss",
                     [](Tape&, std::span<const Var> v) { return consistency_loss(v[0], v[1], Domain::target); },
                     {{1, 1, 3, 3}, {1, 1, 3, 3}}, 0.05, 0.95});
    cases.push_back({"reconstruction_loss",
                     [](Tape&, std::span<const Var> v) {
                         std::mt19937_64 rng(5);
                         return reconstruction_loss(v[0], random_tensor({1, 3, 4, 4}, rng, 0.0, 1.0), Domain::target);
                     },
                     {{1, 3, 4, 4}}, 0.0, 1.0});
    cases.push_back({"total_loss",
                     [](Tape&, std::span<const Var> v) {
                         const LossTerms t{mean(mul(v[0], v[0])), mean(exp(v[0])), mean(v[0]),
                                           mean(sigmoid(v[0])), mean(mul(v[0], v[0])), sum(v[0])};
                         return total_loss(t, LossWeights{0.3, 2.0, 0.5, 1.5});
                     },
                     {{5}}});
    return cases;
}

// Worst relative error of a case over `points` random input draws.
inline double worst_gradient_error(const OpCase& c, unsigned points = 10) {
    double worst = 0.0;
    for (unsigned point = 0; point < points; ++point) {
        std::mt19937_64 rng(1000 + point);
        std::vector<Tensor> inputs;
        for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, c.lo, c.hi));
        worst = std::max(worst, check_gradients(c.build, inputs, 1e-4, 0, 7, c.factor).max_rel_error);
    }
    return worst;
}

}  // namespace fogda::testing
