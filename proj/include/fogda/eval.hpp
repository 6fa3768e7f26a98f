#pragma once

// mAP@0.5 evaluation and the clear/foggy test protocol.

#include <map>
#include <span>
#include <string>
#include <vector>

#include "fogda/json_util.hpp"
#include "fogda/model.hpp"
#include "fogda/scene.hpp"

namespace fogda {

// TP flag per detection, in input order. Detections are taken in the given
// order (callers sort by score); each goes to the highest-IoU unmatched
// ground truth of its class with IoU >= iou_thresh.
std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<BoxLabel>& gts,
                                   double iou_thresh = 0.5);

// All-point interpolated AP. Detections with equal scores enter the PR curve
// together, so the result depends only on the score ordering.
double average_precision(const std::vector<bool>& flags, const std::vector<double>& scores, std::size_t n_gt);

struct MetricsReport {
    std::map<std::string, double> per_class_ap;
    double map = 0.0;
    std::map<std::string, std::size_t> counts;
    std::string protocol;

    friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

Json to_json(const MetricsReport& r);

// Per-image detections and ground truths; classes with no ground truth are
// left out of per_class_ap and of the mean.
MetricsReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                                  const std::vector<std::vector<BoxLabel>>& gts,
                                  const std::vector<std::string>& class_names, const std::string& protocol,
                                  double iou_thresh = 0.5);

// Student-path inference: backbone and detection head only, no gradients.
std::vector<Detection> predict(const ModelParams& params, const ModelConfig& config, const Image& image,
                               double conf_thresh, double nms_iou = 0.5);

// The image a split is evaluated on: foggy for target splits, clear otherwise.
const Image& eval_input(const SceneSample& s);

MetricsReport evaluate(const ModelParams& params, const ModelConfig& config, const DatasetManifest& manifest,
                       const std::string& split, const std::string& protocol, double conf_floor = 0.05);

// Same as evaluate over already loaded samples.
MetricsReport evaluate_samples(const ModelParams& params, const ModelConfig& config,
                               const std::vector<SceneSample>& samples, const std::vector<std::string>& class_names,
                               const std::string& protocol, double conf_floor = 0.05);

// Fraction of detections that match a ground truth (IoU >= 0.5, same class,
// one-to-one). 1 when there are no detections.
double detection_precision(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<BoxLabel>>& gts, double iou_thresh = 0.5);

}  // namespace fogda
