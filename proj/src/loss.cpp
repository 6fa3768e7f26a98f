#include "fogda/loss.hpp"

#include <cmath>
#include <stdexcept>

#include "fogda/errors.hpp"

namespace fogda {

void LossWeights::validate() const {
    for (double w : {lambda, a, b, c}) {
        if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
    }
}

Json to_json(const LossWeights& w) { return Json{{"lambda", w.lambda}, {"a", w.a}, {"b", w.b}, {"c", w.c}}; }

void read_json(StrictReader& r, LossWeights& w) {
    r.get("lambda", w.lambda).get("a", w.a).get("b", w.b).get("c", w.c);
    w.validate();
}

Json to_json(const LossBundle& b) {
    return Json{{"det", b.det}, {"da", b.da},         {"depth", b.depth}, {"cst", b.cst},
                {"rec", b.rec}, {"det_pl", b.det_pl}, {"total", b.total}};
}

DetectionLoss detection_loss(const RawGridPrediction& raw, std::span<const std::vector<BoxLabel>> labels,
                             double image_size) {
    const Shape& s = raw.objectness.shape();
    const std::size_t n_items = s[0], gh = s[2], gw = s[3], cells = gh * gw;
    if (labels.size() != n_items) {
        throw std::invalid_argument("detection_loss: " + std::to_string(labels.size()) + " label lists for batch of " +
                                    std::to_string(n_items));
    }
    const std::size_t k = raw.class_logits.shape()[1];
    Tensor obj_target({n_items, 1, gh, gw});
    std::vector<int> cls_target(n_items * cells, -1);
    Tensor box_target({n_items, 4, gh, gw});
    Tensor box_mask({n_items, 4, gh, gw});
    for (std::size_t n = 0; n < n_items; ++n) {
        for (const BoxLabel& l : labels[n]) {
            const Box& b = l.box;
            if (b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > image_size || b.y2 > image_size || !(b.x1 < b.x2) || !(b.y1 < b.y2)) {
                throw std::invalid_argument("detection_loss: label box outside the image");
            }
            if (l.class_id < 0 || static_cast<std::size_t>(l.class_id) >= k) {
                throw std::invalid_argument("detection_loss: class id " + std::to_string(l.class_id) + " out of range");
            }
            const EncodedBox e = encode_box(b, gh);
            const std::size_t cell = n * cells + e.row * gw + e.col;
            if (cls_target[cell] >= 0) continue;
            cls_target[cell] = l.class_id;
            obj_target.at(n, 0, e.row, e.col) = 1.0;
            for (std::size_t j = 0; j < 4; ++j) {
                box_target.at(n, j, e.row, e.col) = e.target[j];
                box_mask.at(n, j, e.row, e.col) = 1.0;
            }
        }
    }
    // Regression residuals are measured in units of (0.1, 0.1, 0.2, 0.2).
    Tensor weight({n_items, 4, gh, gw});
    for (std::size_t n = 0; n < n_items; ++n) {
        for (std::size_t j = 0; j < 4; ++j) {
            for (std::size_t i = 0; i < cells; ++i) {
                weight.at(n, j, i / gw, i % gw) = kBoxDeltaScale[j];
                box_target.at(n, j, i / gw, i % gw) *= kBoxDeltaScale[j];
            }
        }
    }
    DetectionLoss out;
    out.rpn = bce_with_logits(raw.objectness, obj_target);
    out.cls = softmax_cross_entropy(raw.class_logits, cls_target);
    const Var decoded = concat_channels(sigmoid(slice_channels(raw.box_deltas, 0, 2)), slice_channels(raw.box_deltas, 2, 4));
    out.bbox = smooth_l1(mul(decoded, raw.box_deltas.tape().constant(weight)), box_target, box_mask);
    out.sum = add(add(out.rpn, out.cls), out.bbox);
    return out;
}

DetectionLoss detection_loss(const RawGridPrediction& raw, const std::vector<BoxLabel>& labels, double image_size) {
    return detection_loss(raw, std::span<const std::vector<BoxLabel>>(&labels, 1), image_size);
}

std::vector<BoxLabel> to_labels(const std::vector<Detection>& dets) {
    std::vector<BoxLabel> out;
    out.reserve(dets.size());
    for (const Detection& d : dets) out.push_back({d.class_id, d.box});
    return out;
}

namespace {

Var zero(Var like) { return like.tape().constant(Tensor::scalar(0.0)); }

void require_shape(const char* op, const Shape& a, const Shape& b) {
    if (a != b) throw std::invalid_argument(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

Var da_loss(Var src_pred, Var tgt_pred, const Tensor& t_resized) {
    require_shape("da_loss", tgt_pred.shape(), t_resized.shape());
    Tape& tape = src_pred.tape();
    const Var src_term = mse(src_pred, tape.constant(Tensor(src_pred.shape())));
    const Var tgt_term = mse(tgt_pred, tape.constant(t_resized));
    return add(src_term, tgt_term);
}

Var depth_loss(Var deb_out, const Tensor& depth_resized, Domain domain) {
    if (domain != Domain::source) return zero(deb_out);
    require_shape("depth_loss", deb_out.shape(), depth_resized.shape());
    return mse(deb_out, deb_out.tape().constant(depth_resized));
}

Var consistency_loss(Var trans_pred, Var deb_out, Domain domain) {
    if (domain != Domain::target) return zero(deb_out);
    require_shape("consistency_loss", trans_pred.shape(), deb_out.shape());
    const Var from_trans = minmax_normalize(scale(log(trans_pred), -1.0));
    return mse(from_trans, minmax_normalize(deb_out));
}

Var reconstruction_loss(Var recon, const Tensor& i_de, Domain domain) {
    if (domain != Domain::target) return zero(recon);
    require_shape("reconstruction_loss", recon.shape(), i_de.shape());
    return mse(recon, recon.tape().constant(i_de));
}

double total_loss(const LossBundle& b, const LossWeights& w) {
    w.validate();
    return b.det + w.lambda * b.da + w.a * b.depth + w.b * b.cst + w.c * b.rec + b.det_pl;
}

Var total_loss(const LossTerms& t, const LossWeights& w) {
    w.validate();
    Var total = add(t.det, scale(t.da, w.lambda));
    total = add(total, scale(t.depth, w.a));
    total = add(total, scale(t.cst, w.b));
    total = add(total, scale(t.rec, w.c));
    return add(total, t.det_pl);
}

Map2D resize_to_feature(const Map2D& map, std::size_t out_h, std::size_t out_w) {
    if (out_h == 0 || out_w == 0 || map.height % out_h != 0 || map.width % out_w != 0) {
        throw std::invalid_argument("resize_to_feature: " + std::to_string(map.height) + "x" + std::to_string(map.width) +
                                    " does not divide into " + std::to_string(out_h) + "x" + std::to_string(out_w));
    }
    const std::size_t bh = map.height / out_h, bw = map.width / out_w;
    Map2D out(out_h, out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        for (std::size_t x = 0; x < out_w; ++x) {
            double s = 0.0;
            for (std::size_t yy = 0; yy < bh; ++yy) {
                for (std::size_t xx = 0; xx < bw; ++xx) s += map.at(y * bh + yy, x * bw + xx);
            }
            out.at(y, x) = s / static_cast<double>(bh * bw);
        }
    }
    return out;
}

}  // namespace fogda
