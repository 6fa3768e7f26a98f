#include "fogda/eval.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "fogda/errors.hpp"

namespace fogda {

std::vector<bool> match_detections(const std::vector<Detection>& dets, const std::vector<BoxLabel>& gts,
                                   double iou_thresh) {
    std::vector<bool> flags(dets.size(), false);
    std::vector<bool> used(gts.size(), false);
    for (std::size_t i = 0; i < dets.size(); ++i) {
        double best = -1.0;
        std::size_t best_j = gts.size();
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (used[j] || gts[j].class_id != dets[i].class_id) continue;
            const double v = iou(dets[i].box, gts[j].box);
            if (v > best) {
                best = v;
                best_j = j;
            }
        }
        if (best_j < gts.size() && best >= iou_thresh) {
            used[best_j] = true;
            flags[i] = true;
        }
    }
    return flags;
}

double average_precision(const std::vector<bool>& flags, const std::vector<double>& scores, std::size_t n_gt) {
    if (flags.size() != scores.size()) throw std::invalid_argument("average_precision: flags/scores size mismatch");
    if (n_gt == 0) return 0.0;
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    // One PR point per distinct score, highest threshold first.
    std::vector<std::size_t> tp_at, n_at;
    std::size_t tp = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        tp += flags[order[i]] ? 1 : 0;
        const bool group_end = i + 1 == order.size() || scores[order[i + 1]] != scores[order[i]];
        if (group_end) {
            tp_at.push_back(tp);
            n_at.push_back(i + 1);
        }
    }
    const std::size_t m = tp_at.size();
    std::vector<double> envelope(m);
    double run = 0.0;
    for (std::size_t k = m; k-- > 0;) {
        run = std::max(run, static_cast<double>(tp_at[k]) / static_cast<double>(n_at[k]));
        envelope[k] = run;
    }
    double ap = 0.0;
    std::size_t prev_tp = 0;
    for (std::size_t k = 0; k < m; ++k) {
        ap += static_cast<double>(tp_at[k] - prev_tp) / static_cast<double>(n_gt) * envelope[k];
        prev_tp = tp_at[k];
    }
    return ap;
}

Json to_json(const MetricsReport& r) {
    return Json{{"per_class_ap", r.per_class_ap}, {"map", r.map}, {"counts", r.counts}, {"protocol", r.protocol}};
}

MetricsReport evaluate_detections(const std::vector<std::vector<Detection>>& dets,
                                  const std::vector<std::vector<BoxLabel>>& gts,
                                  const std::vector<std::string>& class_names, const std::string& protocol,
                                  double iou_thresh) {
    if (dets.size() != gts.size()) throw std::invalid_argument("evaluate_detections: per-image list size mismatch");
    MetricsReport r;
    r.protocol = protocol;
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        const int cls = static_cast<int>(c);
        std::vector<bool> flags;
        std::vector<double> scores;
        std::size_t n_gt = 0;
        for (std::size_t i = 0; i < dets.size(); ++i) {
            std::vector<Detection> d;
            for (const Detection& x : dets[i]) {
                if (x.class_id == cls) d.push_back(x);
            }
            std::stable_sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
            std::vector<BoxLabel> g;
            for (const BoxLabel& x : gts[i]) {
                if (x.class_id == cls) g.push_back(x);
            }
            n_gt += g.size();
            const std::vector<bool> f = match_detections(d, g, iou_thresh);
            for (std::size_t k = 0; k < d.size(); ++k) {
                flags.push_back(f[k]);
                scores.push_back(d[k].score);
            }
        }
        r.counts[class_names[c]] = n_gt;
        if (n_gt == 0) continue;
        const double ap = average_precision(flags, scores, n_gt);
        r.per_class_ap[class_names[c]] = ap;
        sum += ap;
        ++used;
    }
    r.map = used ? sum / static_cast<double>(used) : 0.0;
    return r;
}

std::vector<Detection> predict(const ModelParams& params, const ModelConfig& config, const Image& image,
                               double conf_thresh, double nms_iou) {
    Tape tape;
    const ModelVars m = bind(tape, params, false);
    const Var feat = backbone_forward(m, tape.constant(image.to_tensor()), config);
    const RawGridPrediction raw = det_head_forward(m, feat, config);
    return decode_detections(raw, 0, conf_thresh, nms_iou, static_cast<double>(config.image_size));
}

const Image& eval_input(const SceneSample& s) { return s.domain == Domain::target ? s.foggy : s.clear; }

MetricsReport evaluate_samples(const ModelParams& params, const ModelConfig& config,
                               const std::vector<SceneSample>& samples, const std::vector<std::string>& class_names,
                               const std::string& protocol, double conf_floor) {
    if (samples.empty()) throw ConfigError("evaluate: empty split");
    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<BoxLabel>> gts;
    for (const SceneSample& s : samples) {
        dets.push_back(predict(params, config, eval_input(s), conf_floor));
        gts.push_back(s.labels);
    }
    return evaluate_detections(dets, gts, class_names, protocol);
}

MetricsReport evaluate(const ModelParams& params, const ModelConfig& config, const DatasetManifest& manifest,
                       const std::string& split, const std::string& protocol, double conf_floor) {
    const auto& ids = manifest.ids(split);
    std::vector<SceneSample> samples;
    samples.reserve(ids.size());
    for (const auto& id : ids) samples.push_back(load_sample(manifest, id));
    return evaluate_samples(params, config, samples, manifest.class_names, protocol, conf_floor);
}

double detection_precision(const std::vector<std::vector<Detection>>& dets,
                           const std::vector<std::vector<BoxLabel>>& gts, double iou_thresh) {
    if (dets.size() != gts.size()) throw std::invalid_argument("detection_precision: per-image list size mismatch");
    std::size_t total = 0, hits = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        std::vector<Detection> d = dets[i];
        std::stable_sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
        const std::vector<bool> f = match_detections(d, gts[i], iou_thresh);
        total += f.size();
        hits += static_cast<std::size_t>(std::count(f.begin(), f.end(), true));
    }
    return total ? static_cast<double>(hits) / static_cast<double>(total) : 1.0;
}

}  // namespace fogda
