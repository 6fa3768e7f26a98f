#include "fogda/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <string>

#include "fogda/errors.hpp"

namespace fogda {

namespace {

struct LayerShape {
    std::size_t out, in, k;
};

struct Layout {
    std::array<LayerShape, 4> backbone;
    std::array<LayerShape, 2> det_head;
    std::array<LayerShape, 3> discriminator;
    std::array<LayerShape, 2> deb;
    std::array<LayerShape, 4> decoder;
};

Layout layout(const ModelConfig& c) {
    return {{{{16, c.in_channels, 3}, {32, 16, 3}, {64, 32, 3}, {64, 64, 3}}},
            {{{64, 64, 3}, {1 + c.num_classes + 4, 64, 1}}},
            {{{32, 64, 3}, {32, 32, 3}, {1, 32, 1}}},
            {{{32, 64, 3}, {1, 32, 1}}},
            {{{32, 64, 3}, {16, 32, 3}, {8, 16, 3}, {c.in_channels, 8, 3}}}};
}

template <std::size_t N>
void init_group(std::array<ConvLayer<Tensor>, N>& layers, const std::array<LayerShape, N>& shapes,
                std::mt19937_64& rng) {
    for (std::size_t i = 0; i < N; ++i) {
        const LayerShape& s = shapes[i];
        const double fan_in = static_cast<double>(s.in * s.k * s.k);
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        layers[i].weight = Tensor({s.out, s.in, s.k, s.k});
        for (double& v : layers[i].weight.data()) v = dist(rng);
        layers[i].bias = Tensor({s.out});
    }
}

Var conv(const ConvLayer<Var>& l, Var x, std::size_t stride) {
    const std::size_t k = l.weight.shape()[2];
    return conv2d(x, l.weight, l.bias, stride, k / 2);
}

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
    if (config.image_size % 16 != 0 || config.image_size == 0) {
        throw ConfigError("model: image_size must be a positive multiple of 16");
    }
    if (config.num_classes == 0) throw ConfigError("model: num_classes must be positive");
    const Layout lay = layout(config);
    std::mt19937_64 rng(seed);
    ModelParams p;
    init_group(p.backbone, lay.backbone, rng);
    init_group(p.det_head, lay.det_head, rng);
    init_group(p.discriminator, lay.discriminator, rng);
    init_group(p.deb, lay.deb, rng);
    init_group(p.decoder, lay.decoder, rng);
    return p;
}

std::vector<ParamRef> param_refs(ModelParams& params) {
    std::vector<ParamRef> out;
    ModelParams::visit(params, [&](const std::string& name, Tensor& t) { out.push_back({name, &t}); });
    return out;
}

std::vector<std::string> param_names(const ModelParams& params) {
    std::vector<std::string> out;
    ModelParams::visit(params, [&](const std::string& name, const Tensor&) { out.push_back(name); });
    return out;
}

std::size_t param_count(const ModelParams& params) {
    std::size_t n = 0;
    ModelParams::visit(params, [&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

bool same_shapes(const ModelParams& a, const ModelParams& b) {
    std::vector<Shape> sa, sb;
    ModelParams::visit(a, [&](const std::string&, const Tensor& t) { sa.push_back(t.shape()); });
    ModelParams::visit(b, [&](const std::string&, const Tensor& t) { sb.push_back(t.shape()); });
    return sa == sb;
}

ModelVars bind(Tape& tape, const ModelParams& params, bool trainable) {
    ModelVars v;
    auto put = [&](auto& dst, const auto& src) {
        for (std::size_t i = 0; i < src.size(); ++i) {
            dst[i].weight = trainable ? tape.leaf(src[i].weight) : tape.constant(src[i].weight);
            dst[i].bias = trainable ? tape.leaf(src[i].bias) : tape.constant(src[i].bias);
        }
    };
    put(v.backbone, params.backbone);
    put(v.det_head, params.det_head);
    put(v.discriminator, params.discriminator);
    put(v.deb, params.deb);
    put(v.decoder, params.decoder);
    return v;
}

std::vector<Tensor> gather_grads(const Tape& tape, const ModelVars& vars) {
    std::vector<Tensor> out;
    ModelVars::visit(vars, [&](const std::string&, const Var& v) { out.push_back(tape.grad(v)); });
    return out;
}

Var backbone_forward(const ModelVars& m, Var image, const ModelConfig& config) {
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != config.in_channels || s[2] != config.image_size || s[3] != config.image_size) {
        throw std::invalid_argument("backbone_forward: expected [N," + std::to_string(config.in_channels) + "," +
                                    std::to_string(config.image_size) + "," + std::to_string(config.image_size) +
                                    "] input, got " + shape_str(s));
    }
    Var x = image;
    for (const auto& l : m.backbone) x = relu(conv(l, x, 2));
    return x;
}

RawGridPrediction det_head_forward(const ModelVars& m, Var feat, const ModelConfig& config) {
    Var h = relu(conv(m.det_head[0], feat, 1));
    Var out = conv(m.det_head[1], h, 1);
    const std::size_t k = config.num_classes;
    return {slice_channels(out, 0, 1), slice_channels(out, 1, 1 + k), slice_channels(out, 1 + k, 5 + k)};
}

Var discriminator_forward(const ModelVars& m, Var feat, double grl_coeff) {
    Var x = grl(feat, grl_coeff);
    x = relu(conv(m.discriminator[0], x, 1));
    x = relu(conv(m.discriminator[1], x, 1));
    return sigmoid(conv(m.discriminator[2], x, 1));
}

Var deb_forward(const ModelVars& m, Var feat) {
    Var x = relu(conv(m.deb[0], feat, 1));
    return relu(conv(m.deb[1], x, 1));
}

Var decoder_forward(const ModelVars& m, Var feat) {
    Var x = feat;
    for (std::size_t i = 0; i < m.decoder.size(); ++i) {
        x = conv(m.decoder[i], upsample_nearest2x(x), 1);
        x = i + 1 < m.decoder.size() ? relu(x) : sigmoid(x);
    }
    return x;
}

// ---- box coding ------------------------------------------------------------

EncodedBox encode_box(const Box& box, std::size_t grid) {
    if (!(box.width() > 0.0) || !(box.height() > 0.0)) throw std::invalid_argument("encode_box: degenerate box");
    const double gx = box.center_x() / kCellSize, gy = box.center_y() / kCellSize;
    const double max_cell = static_cast<double>(grid - 1);
    const double col = std::clamp(std::floor(gx), 0.0, max_cell);
    const double row = std::clamp(std::floor(gy), 0.0, max_cell);
    EncodedBox e;
    e.col = static_cast<std::size_t>(col);
    e.row = static_cast<std::size_t>(row);
    e.target = {std::clamp(gx - col, 0.0, 1.0), std::clamp(gy - row, 0.0, 1.0), std::log(box.width() / kCellSize),
                std::log(box.height() / kCellSize)};
    return e;
}

std::array<double, 4> target_to_deltas(const std::array<double, 4>& t) {
    auto logit = [](double p) {
        p = std::clamp(p, 1e-6, 1.0 - 1e-6);
        return std::log(p / (1.0 - p));
    };
    return {logit(t[0]), logit(t[1]), t[2], t[3]};
}

Box decode_box(std::size_t row, std::size_t col, std::span<const double, 4> d, double image_size) {
    const double cx = (static_cast<double>(col) + sigmoid_scalar(d[0])) * kCellSize;
    const double cy = (static_cast<double>(row) + sigmoid_scalar(d[1])) * kCellSize;
    const double w = kCellSize * std::exp(std::min(d[2], 10.0));
    const double h = kCellSize * std::exp(std::min(d[3], 10.0));
    return {std::clamp(cx - 0.5 * w, 0.0, image_size), std::clamp(cy - 0.5 * h, 0.0, image_size),
            std::clamp(cx + 0.5 * w, 0.0, image_size), std::clamp(cy + 0.5 * h, 0.0, image_size)};
}

std::vector<Detection> decode_detections(const RawGridPrediction& raw, std::size_t n, double conf_thresh,
                                         double nms_iou, double image_size) {
    const Tensor& obj = raw.objectness.value();
    const Tensor& cls = raw.class_logits.value();
    const Tensor& del = raw.box_deltas.value();
    const std::size_t k = cls.dim(1), gh = obj.dim(2), gw = obj.dim(3);
    if (n >= obj.dim(0)) throw std::out_of_range("decode_detections: batch index out of range");
    std::vector<Detection> dets;
    std::vector<double> probs(k);
    for (std::size_t r = 0; r < gh; ++r) {
        for (std::size_t c = 0; c < gw; ++c) {
            double mx = -1e300;
            for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, cls.at(n, j, r, c));
            double z = 0.0;
            for (std::size_t j = 0; j < k; ++j) z += probs[j] = std::exp(cls.at(n, j, r, c) - mx);
            std::size_t best = 0;
            for (std::size_t j = 1; j < k; ++j) {
                if (probs[j] > probs[best]) best = j;
            }
            const double score = sigmoid_scalar(obj.at(n, 0, r, c)) * (probs[best] / z);
            if (score < conf_thresh) continue;
            const std::array<double, 4> d{del.at(n, 0, r, c), del.at(n, 1, r, c), del.at(n, 2, r, c),
                                          del.at(n, 3, r, c)};
            const Box b = decode_box(r, c, std::span<const double, 4>(d), image_size);
            if (!(b.width() > 0.0) || !(b.height() > 0.0)) continue;
            dets.push_back({static_cast<int>(best), b, score});
        }
    }
    return nms(std::move(dets), nms_iou);
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> kept;
    for (const Detection& d : dets) {
        bool suppressed = false;
        for (const Detection& k : kept) {
            if (k.class_id == d.class_id && iou(k.box, d.box) > iou_thresh) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(d);
    }
    return kept;
}

// ---- checkpoints -----------------------------------------------------------

Json to_json(const ModelConfig& c) {
    return Json{{"in_channels", c.in_channels}, {"num_classes", c.num_classes}, {"image_size", c.image_size}};
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    Json names = Json::array(), shapes = Json::array();
    ModelParams::visit(ckpt.params, [&](const std::string& name, const Tensor& t) {
        names.push_back(name);
        shapes.push_back(t.shape());
    });
    const Json header{{"format", "fogda-checkpoint"},
                      {"version", 1},
                      {"names", names},
                      {"shapes", shapes},
                      {"iteration", ckpt.iteration},
                      {"ema", ckpt.ema},
                      {"model", to_json(ckpt.config)}};
    const std::string h = header.dump();
    if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    const std::uint32_t len = static_cast<std::uint32_t>(h.size());
    const unsigned char len_le[4] = {static_cast<unsigned char>(len), static_cast<unsigned char>(len >> 8),
                                     static_cast<unsigned char>(len >> 16), static_cast<unsigned char>(len >> 24)};
    out.write("FCKP", 4);
    out.write(reinterpret_cast<const char*>(len_le), 4);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    std::vector<unsigned char> buf;
    ModelParams::visit(ckpt.params, [&](const std::string&, const Tensor& t) {
        for (double v : t.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            for (int b = 0; b < 8; ++b) buf.push_back(static_cast<unsigned char>(bits >> (8 * b)));
        }
    });
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint not found: " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 8 || bytes.compare(0, 4, "FCKP") != 0) throw IoError("not a checkpoint file: " + path.string());
    const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::uint32_t len = u[4] | (u[5] << 8) | (u[6] << 16) | (static_cast<std::uint32_t>(u[7]) << 24);
    if (8 + static_cast<std::size_t>(len) > bytes.size()) throw IoError("truncated checkpoint header: " + path.string());
    Checkpoint ckpt;
    Json header;
    try {
        header = Json::parse(bytes.substr(8, len));
        const Json& m = header.at("model");
        ckpt.config.in_channels = m.at("in_channels").get<std::size_t>();
        ckpt.config.num_classes = m.at("num_classes").get<std::size_t>();
        ckpt.config.image_size = m.at("image_size").get<std::size_t>();
        ckpt.iteration = header.at("iteration").get<std::size_t>();
        ckpt.ema = header.at("ema").get<bool>();
    } catch (const Json::exception& e) {
        throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
    }
    ckpt.params = init_model(ckpt.config, 0);
    const auto names = param_names(ckpt.params);
    if (header.at("names").get<std::vector<std::string>>() != names) {
        throw IoError("checkpoint parameter layout mismatch: " + path.string());
    }
    std::size_t pos = 8 + len;
    const std::size_t need = param_count(ckpt.params) * 8;
    if (bytes.size() - pos != need) throw IoError("checkpoint payload size mismatch: " + path.string());
    ModelParams::visit(ckpt.params, [&](const std::string&, Tensor& t) {
        for (double& v : t.data()) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(u[pos + b]) << (8 * b);
            std::memcpy(&v, &bits, 8);
            pos += 8;
        }
    });
    return ckpt;
}

}  // namespace fogda
