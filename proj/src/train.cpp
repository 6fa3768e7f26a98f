#include "fogda/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "fogda/errors.hpp"
#include "fogda/fog.hpp"

namespace fogda {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("train: tau must lie in [0,1]");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("train: ema_decay must lie in [0,1)");
    if (!(lr0 >= 0.0) || !std::isfinite(lr0)) throw ConfigError("train: lr0 must be finite and >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train: momentum must lie in [0,1)");
    if (batch == 0) throw ConfigError("train: batch must be >= 1");
    if (!(det_pl_weight >= 0.0)) throw ConfigError("train: det_pl_weight must be >= 0");
    if (!std::isfinite(grl_coeff)) throw ConfigError("train: grl_coeff must be finite");
    if (!(grad_clip >= 0.0)) throw ConfigError("train: grad_clip must be >= 0");
    if (!(depth_noise >= 0.0)) throw ConfigError("train: depth_noise must be >= 0");
    if (!(d_max > 0.0)) throw ConfigError("train: d_max must be > 0");
    weights.validate();
}

Json to_json(const TrainConfig& c) {
    return Json{{"iterations", c.iterations},
                {"lr0", c.lr0},
                {"momentum", c.momentum},
                {"tau", c.tau},
                {"ema_decay", c.ema_decay},
                {"weights", to_json(c.weights)},
                {"toggles",
                 {{"da", c.toggles.da}, {"deb", c.toggles.deb}, {"cst", c.toggles.cst}, {"rec", c.toggles.rec},
                  {"pl", c.toggles.pl}}},
                {"seed", c.seed},
                {"pl_warmup", c.pl_warmup},
                {"oracle",
                 {{"transmission", c.oracle.transmission}, {"depth", c.oracle.depth}, {"clear", c.oracle.clear}}},
                {"batch", c.batch},
                {"det_pl_weight", c.det_pl_weight},
                {"grl_coeff", c.grl_coeff},
                {"grad_clip", c.grad_clip},
                {"checkpoint_every", c.checkpoint_every},
                {"eval_every", c.eval_every},
                {"depth_noise", c.depth_noise},
                {"d_max", c.d_max}};
}

void read_json(StrictReader& r, TrainConfig& c) {
    r.get("iterations", c.iterations)
        .get("lr0", c.lr0)
        .get("momentum", c.momentum)
        .get("tau", c.tau)
        .get("ema_decay", c.ema_decay)
        .object("weights", [&](StrictReader& w) { read_json(w, c.weights); })
        .object("toggles",
                [&](StrictReader& t) {
                    t.get("da", c.toggles.da)
                        .get("deb", c.toggles.deb)
                        .get("cst", c.toggles.cst)
                        .get("rec", c.toggles.rec)
                        .get("pl", c.toggles.pl);
                })
        .get("seed", c.seed)
        .get("pl_warmup", c.pl_warmup)
        .object("oracle",
                [&](StrictReader& o) {
                    o.get("transmission", c.oracle.transmission)
                        .get("depth", c.oracle.depth)
                        .get("clear", c.oracle.clear);
                })
        .get("batch", c.batch)
        .get("det_pl_weight", c.det_pl_weight)
        .get("grl_coeff", c.grl_coeff)
        .get("grad_clip", c.grad_clip)
        .get("checkpoint_every", c.checkpoint_every)
        .get("eval_every", c.eval_every)
        .get("depth_noise", c.depth_noise)
        .get("d_max", c.d_max);
    c.validate();
}

double lr_schedule(std::size_t iter, const TrainConfig& config) {
    const std::size_t step = std::max<std::size_t>(1, config.iterations / 3);
    return config.lr0 * std::pow(10.0, -static_cast<double>(iter / step));
}

void ema_update(EmaState& ema, const ModelParams& params) {
    if (!same_shapes(ema.shadow, params)) throw std::invalid_argument("ema_update: shadow and params differ in shape");
    std::vector<const Tensor*> src;
    ModelParams::visit(params, [&](const std::string&, const Tensor& t) { src.push_back(&t); });
    std::size_t k = 0;
    const double d = ema.decay;
    ModelParams::visit(ema.shadow, [&](const std::string&, Tensor& t) {
        auto s = t.data();
        const auto p = src[k++]->data();
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = d * s[i] + (1.0 - d) * p[i];
    });
}

PseudoLabelSet generate_pseudo_labels(const ModelParams& teacher, const ModelConfig& config, const Image& input,
                                      double tau) {
    Tape tape;
    const ModelVars m = bind(tape, teacher, false);
    const Var feat = backbone_forward(m, tape.constant(input.to_tensor()), config);
    const RawGridPrediction raw = det_head_forward(m, feat, config);
    if (tape.any_requires_grad()) throw std::logic_error("pseudo-label generation recorded a gradient path");
    return decode_detections(raw, 0, tau, 0.5, static_cast<double>(config.image_size));
}

namespace {

Tensor map_tensor(const Map2D& m) { return m.to_tensor(); }

// Random-access epoch permutation: item `k` of a stream of shuffled epochs.
std::size_t shuffled_index(std::uint64_t seed, std::uint64_t stream, std::size_t n, std::size_t k) {
    const std::size_t epoch = k / n;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    return perm[k % n];
}

}  // namespace

ModelConfig model_config(const DatasetManifest& manifest) {
    ModelConfig m;
    m.in_channels = 3;
    m.num_classes = manifest.class_names.size();
    m.image_size = manifest.image_height;
    return m;
}

TrainingSet prepare_training_set(const DatasetManifest& manifest, const TrainConfig& config) {
    TrainingSet set;
    set.model = model_config(manifest);
    set.class_names = manifest.class_names;
    if (manifest.image_height != manifest.image_width) throw ConfigError("dataset images must be square");
    const std::size_t g = set.model.grid();

    for (const auto& id : manifest.ids("train_source")) {
        const SceneSample s = load_sample(manifest, id);
        Map2D d = resize_to_feature(s.depth, g, g);
        std::mt19937_64 rng(s.seed ^ 0x9e3779b97f4a7c15ULL);
        std::normal_distribution<double> noise(0.0, 1.0);
        for (double& v : d.data) {
            v /= config.d_max;
            const double z = noise(rng);
            if (!config.oracle.depth) v *= std::exp(config.depth_noise * z);
        }
        set.source.push_back({s.clear.to_tensor(), map_tensor(d), s.labels});
    }
    for (const auto& id : manifest.ids("train_target")) {
        const SceneSample s = load_sample(manifest, id, /*unseal=*/true);
        const DcpResult dcp = dcp_defog(s.foggy);
        TargetItem t;
        t.image = s.foggy.to_tensor();
        const Map2D& trans = config.oracle.transmission ? s.t_gt.values : dcp.transmission.values;
        t.t_resized = map_tensor(resize_to_feature(trans, g, g));
        t.pl_input = config.oracle.clear ? s.clear : dcp.defogged;
        t.i_de = t.pl_input.to_tensor();
        t.audit_labels = s.labels;
        set.target.push_back(std::move(t));
    }
    if (set.source.empty() || set.target.empty()) throw ConfigError("training needs non-empty source and target splits");
    return set;
}

TrainState init_state(const TrainConfig& config, const ModelConfig& model) {
    TrainState s;
    s.params = init_model(model, config.seed);
    s.ema.shadow = s.params;
    s.ema.decay = config.ema_decay;
    return s;
}

Json to_json(const IterationReport& r) {
    return Json{{"iter", r.iter},         {"lr", r.lr},           {"det", r.losses.det},
                {"da", r.losses.da},      {"depth", r.losses.depth}, {"cst", r.losses.cst},
                {"rec", r.losses.rec},    {"det_pl", r.losses.det_pl}, {"total", r.losses.total},
                {"n_pseudo_labels", r.n_pseudo_labels}, {"grad_norm", r.grad_norm}};
}

IterationReport train_iteration(TrainState& state, std::span<const SourceItem* const> sources,
                                std::span<const TargetItem* const> targets, const TrainConfig& config,
                                const ModelConfig& model) {
    if (sources.size() != targets.size() || sources.empty()) {
        throw std::invalid_argument("train_iteration: need matching, non-empty source and target batches");
    }
    const std::size_t batch = sources.size();
    const double image_size = static_cast<double>(model.image_size);
    IterationReport report;
    report.iter = state.iteration;
    report.lr = lr_schedule(state.iteration, config);

    // Stage 1: teacher pseudo-labels on the defogged target.
    const bool pl_active = config.toggles.pl && state.iteration >= config.pl_warmup;
    std::vector<PseudoLabelSet> pseudo(batch);
    if (pl_active) {
        for (std::size_t b = 0; b < batch; ++b) {
            pseudo[b] = generate_pseudo_labels(state.ema.shadow, model, targets[b]->pl_input, config.tau);
            report.n_pseudo_labels += pseudo[b].size();
        }
    }

    // Stage 2: student on the same target input without augmentation.
    const LossToggles& on = config.toggles;
    const bool need_target = on.da || on.cst || on.rec || pl_active;
    Tape tape;
    const ModelVars m = bind(tape, state.params, true);
    std::vector<Var> det, da, depth, cst, rec, det_pl;
    for (std::size_t b = 0; b < batch; ++b) {
        const SourceItem& src = *sources[b];
        const Var feat_s = backbone_forward(m, tape.constant(src.image), model);
        det.push_back(detection_loss(det_head_forward(m, feat_s, model), src.labels, image_size).sum);
        if (on.deb) depth.push_back(depth_loss(deb_forward(m, feat_s), src.depth_resized, Domain::source));
        if (!need_target) continue;

        const TargetItem& tgt = *targets[b];
        const Var feat_t = backbone_forward(m, tape.constant(tgt.image), model);
        Var trans_t;
        if (on.da || on.cst) trans_t = discriminator_forward(m, feat_t, config.grl_coeff);
        if (on.da) da.push_back(da_loss(discriminator_forward(m, feat_s, config.grl_coeff), trans_t, tgt.t_resized));
        if (on.cst) cst.push_back(consistency_loss(trans_t, deb_forward(m, feat_t), Domain::target));
        if (on.rec) rec.push_back(reconstruction_loss(decoder_forward(m, feat_t), tgt.i_de, Domain::target));
        if (pl_active && !pseudo[b].empty()) {
            const DetectionLoss l = detection_loss(det_head_forward(m, feat_t, model), to_labels(pseudo[b]), image_size);
            det_pl.push_back(scale(l.sum, config.det_pl_weight));
        }
    }

    // Batch mean of each term; absent terms are constant zeros.
    auto reduce = [&](const std::vector<Var>& terms) {
        if (terms.empty()) return tape.constant(Tensor::scalar(0.0));
        Var s = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) s = add(s, terms[i]);
        return scale(s, 1.0 / static_cast<double>(batch));
    };
    const LossTerms terms{reduce(det), reduce(da), reduce(depth), reduce(cst), reduce(rec), reduce(det_pl)};
    const Var total = total_loss(terms, config.weights);

    report.losses = {terms.det.value().item(), terms.da.value().item(),  terms.depth.value().item(),
                     terms.cst.value().item(), terms.rec.value().item(), terms.det_pl.value().item(),
                     total.value().item()};
    const std::pair<const char*, double> named[] = {
        {"det", report.losses.det}, {"da", report.losses.da},         {"depth", report.losses.depth},
        {"cst", report.losses.cst}, {"rec", report.losses.rec},       {"det_pl", report.losses.det_pl},
        {"total", report.losses.total}};
    for (const auto& [name, v] : named) {
        if (!std::isfinite(v)) {
            throw NumericalError("non-finite " + std::string(name) + " loss at iteration " +
                                 std::to_string(state.iteration));
        }
    }

    tape.backward(total);
    std::vector<Tensor> grads = gather_grads(tape, m);
    const std::vector<ParamRef> refs = param_refs(state.params);
    double sq = 0.0;
    for (const Tensor& g : grads) {
        for (double v : g.data()) sq += v * v;
    }
    report.grad_norm = std::sqrt(sq);
    if (config.grad_clip > 0.0 && report.grad_norm > config.grad_clip) {
        const double f = config.grad_clip / report.grad_norm;
        for (Tensor& g : grads) {
            for (double& v : g.data()) v *= f;
        }
    }
    if (config.momentum > 0.0) {
        if (state.velocity.empty()) {
            for (const Tensor& g : grads) state.velocity.emplace_back(g.shape());
        }
        for (std::size_t i = 0; i < grads.size(); ++i) {
            if (!grads[i].all_finite()) break;  // sgd_step reports it by name
            auto v = state.velocity[i].data();
            auto g = grads[i].data();
            for (std::size_t j = 0; j < v.size(); ++j) g[j] = v[j] = config.momentum * v[j] + g[j];
        }
    }
    sgd_step(refs, grads, report.lr);
    ema_update(state.ema, state.params);
    ++state.iteration;
    return report;
}

std::string checkpoint_name(std::size_t iter, bool ema) {
    return (ema ? "ema_" : "ckpt_") + std::to_string(iter) + ".bin";
}

namespace {

void write_checkpoints(const fs::path& dir, const TrainState& state, const ModelConfig& model, bool with_ema) {
    save_checkpoint(dir / checkpoint_name(state.iteration, false), {state.params, model, state.iteration, false});
    if (with_ema) save_checkpoint(dir / checkpoint_name(state.iteration, true), {state.ema.shadow, model, state.iteration, true});
}

}  // namespace

TrainResult train(const TrainConfig& config, const TrainingSet& data, const TrainOptions& options) {
    config.validate();
    TrainResult result;
    result.state = init_state(config, data.model);
    TrainState& state = result.state;

    const bool write = !options.run_dir.empty();
    const fs::path ckpt_dir = options.run_dir / "checkpoints";
    std::ofstream log;
    if (write) {
        fs::create_directories(ckpt_dir);
        log.open(options.run_dir / "log.jsonl", std::ios::trunc);
        if (!log) throw IoError("cannot write " + (options.run_dir / "log.jsonl").string());
    }
    if (config.iterations == 0) {
        if (write) write_checkpoints(ckpt_dir, state, data.model, false);
        return result;
    }

    std::vector<const SourceItem*> src(config.batch);
    std::vector<const TargetItem*> tgt(config.batch);
    while (state.iteration < config.iterations) {
        for (std::size_t b = 0; b < config.batch; ++b) {
            const std::size_t k = state.iteration * config.batch + b;
            src[b] = &data.source[shuffled_index(config.seed, 1, data.source.size(), k)];
            tgt[b] = &data.target[shuffled_index(config.seed, 2, data.target.size(), k)];
        }
        IterationReport rep;
        try {
            rep = train_iteration(state, src, tgt, config, data.model);
        } catch (const NumericalError&) {
            if (write) write_checkpoints(ckpt_dir, state, data.model, true);
            throw;
        }
        Json record = to_json(rep);
        const std::size_t done = state.iteration;
        if (options.eval_samples && !options.eval_samples->empty() && config.eval_every &&
            (done % config.eval_every == 0 || done == config.iterations)) {
            const MetricsReport mr =
                evaluate_samples(state.params, data.model, *options.eval_samples, data.class_names, options.eval_protocol);
            record["map"] = mr.map;
            record["per_class_ap"] = mr.per_class_ap;
        }
        if (write) {
            log << record.dump() << '\n';
            if ((config.checkpoint_every && done % config.checkpoint_every == 0) || done == config.iterations) {
                write_checkpoints(ckpt_dir, state, data.model, true);
            }
        }
        if (options.on_iteration) options.on_iteration(rep);
        result.log.push_back(rep);
    }
    return result;
}

}  // namespace fogda
