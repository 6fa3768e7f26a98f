#include "fogda/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>

#include "fogda/errors.hpp"
#include "fogda/image_io.hpp"

namespace fogda {

namespace fs = std::filesystem;

std::string to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

Json to_json(const SceneSpec& s) {
    return Json{{"height", s.height},
                {"width", s.width},
                {"num_classes", s.num_classes},
                {"min_objects", s.min_objects},
                {"max_objects", s.max_objects},
                {"depth_min", s.depth_min},
                {"depth_max", s.depth_max},
                {"object_depth_min", s.object_depth_min},
                {"object_depth_max", s.object_depth_max},
                {"object_size_min", s.object_size_min},
                {"object_size_max", s.object_size_max},
                {"focal", s.focal},
                {"horizon", s.horizon},
                {"ground_scale", s.ground_scale},
                {"beta_min", s.beta_min},
                {"beta_max", s.beta_max},
                {"airlight_min", s.airlight_min},
                {"airlight_max", s.airlight_max},
                {"texture_amplitude", s.texture_amplitude},
                {"texture_period", s.texture_period},
                {"texture_noise", s.texture_noise},
                {"separation_grid", s.separation_grid},
                {"max_occlusion", s.max_occlusion},
                {"min_box_area", s.min_box_area}};
}

void read_json(StrictReader& r, SceneSpec& s) {
    r.get("height", s.height)
        .get("width", s.width)
        .get("num_classes", s.num_classes)
        .get("min_objects", s.min_objects)
        .get("max_objects", s.max_objects)
        .get("depth_min", s.depth_min)
        .get("depth_max", s.depth_max)
        .get("object_depth_min", s.object_depth_min)
        .get("object_depth_max", s.object_depth_max)
        .get("object_size_min", s.object_size_min)
        .get("object_size_max", s.object_size_max)
        .get("focal", s.focal)
        .get("horizon", s.horizon)
        .get("ground_scale", s.ground_scale)
        .get("beta_min", s.beta_min)
        .get("beta_max", s.beta_max)
        .get("airlight_min", s.airlight_min)
        .get("airlight_max", s.airlight_max)
        .get("texture_amplitude", s.texture_amplitude)
        .get("texture_period", s.texture_period)
        .get("texture_noise", s.texture_noise)
        .get("separation_grid", s.separation_grid)
        .get("max_occlusion", s.max_occlusion)
        .get("min_box_area", s.min_box_area);
    if (s.min_objects > s.max_objects) throw ConfigError("scene: min_objects exceeds max_objects");
    if (s.num_classes == 0 || s.num_classes > 3) throw ConfigError("scene: num_classes must be in [1,3]");
    if (!(s.beta_min > 0.0) || s.beta_max < s.beta_min) throw ConfigError("scene: beta range must satisfy 0 < min <= max");
    if (!(s.depth_min > 0.0) || s.depth_max <= s.depth_min) throw ConfigError("scene: invalid depth range");
}

std::string config_hash(const SceneSpec& spec) { return sha256_hex(to_json(spec).dump()); }

std::vector<std::string> class_names(const SceneSpec& spec) {
    static const std::vector<std::string> all = {"box", "disc", "triangle"};
    return {all.begin(), all.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(spec.num_classes, 3))};
}

namespace {

struct ObjectGeometry {
    double x1, y1, x2, y2;
    double cx;
};

ObjectGeometry geometry(const SceneSpec& spec, const ObjectPlacement& obj) {
    const double h = spec.focal * obj.world_size / obj.depth;
    const double w = obj.class_id == 1 ? h : h * obj.aspect;
    const double bottom = spec.horizon + spec.ground_scale / obj.depth;
    return {obj.center_x - 0.5 * w, bottom - h, obj.center_x + 0.5 * w, bottom, obj.center_x};
}

bool covers(const ObjectPlacement& obj, const ObjectGeometry& g, double px, double py) {
    if (px < g.x1 || px >= g.x2 || py < g.y1 || py >= g.y2) return false;
    switch (obj.class_id) {
        case 0:
            return true;
        case 1: {
            const double rx = 0.5 * (g.x2 - g.x1), ry = 0.5 * (g.y2 - g.y1);
            const double dx = (px - g.cx) / rx, dy = (py - 0.5 * (g.y1 + g.y2)) / ry;
            return dx * dx + dy * dy <= 1.0;
        }
        default: {
            const double frac = (py - g.y1) / (g.y2 - g.y1);
            return std::abs(px - g.cx) <= 0.5 * (g.x2 - g.x1) * frac;
        }
    }
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
    const double hh = std::fmod(h, 1.0) * 6.0;
    const int sector = static_cast<int>(hh);
    const double f = hh - sector;
    const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    switch (sector) {
        case 0: return {v, t, p};
        case 1: return {q, v, p};
        case 2: return {p, v, t};
        case 3: return {p, q, v};
        case 4: return {t, p, v};
        default: return {v, p, q};
    }
}

double quantize_depth(double d) { return static_cast<double>(static_cast<float>(d)); }

}  // namespace

Box object_extent(const SceneSpec& spec, const ObjectPlacement& obj) {
    const ObjectGeometry g = geometry(spec, obj);
    return {g.x1, g.y1, g.x2, g.y2};
}

SceneSample compose_scene(const SceneSpec& spec, const BackgroundStyle& bg, const std::vector<ObjectPlacement>& objects,
                          double beta, const Airlight& airlight) {
    const std::size_t H = spec.height, W = spec.width, hw = H * W;
    SceneSample s;
    s.clear = Image(3, H, W);
    s.depth = Map2D(H, W);
    s.beta = beta;
    s.airlight = airlight;
    s.domain = Domain::target;

    std::mt19937_64 noise_rng(bg.noise_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t y = 0; y < H; ++y) {
        const double py = static_cast<double>(y) + 0.5;
        for (std::size_t x = 0; x < W; ++x) {
            const double px = static_cast<double>(x) + 0.5;
            const std::size_t i = y * W + x;
            const double n = spec.texture_noise * noise(noise_rng);
            if (py < spec.horizon) {
                const double a = py / spec.horizon;
                for (std::size_t c = 0; c < 3; ++c) {
                    s.clear.data[c * hw + i] = std::clamp((1 - a) * bg.sky_top[c] + a * bg.sky_bottom[c] + 0.3 * n, 0.0, 1.0);
                }
                s.depth.data[i] = spec.depth_max;
            } else {
                const double d = spec.ground_scale / std::max(py - spec.horizon, 1e-6);
                s.depth.data[i] = quantize_depth(std::clamp(d, spec.depth_min, spec.depth_max));
                // Stripes converge toward the horizon like lane markings.
                const double u = (px - 0.5 * static_cast<double>(W)) / std::max(py - spec.horizon, 1.0);
                const double stripe =
                    spec.texture_amplitude * std::sin(2.0 * std::numbers::pi * (u * 8.0 + py / spec.texture_period) + bg.stripe_phase);
                for (std::size_t c = 0; c < 3; ++c) {
                    s.clear.data[c * hw + i] = std::clamp(bg.ground[c] + stripe + n, 0.0, 1.0);
                }
            }
        }
    }

    // Far to near so nearer objects overwrite; the z-test keeps ties stable.
    std::vector<std::size_t> order(objects.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return objects[a].depth > objects[b].depth; });
    std::vector<int> owner(hw, -1);
    std::vector<std::size_t> total(objects.size(), 0);
    for (std::size_t k : order) {
        const ObjectPlacement& obj = objects[k];
        const ObjectGeometry g = geometry(spec, obj);
        const double d = quantize_depth(obj.depth);
        const long y0 = std::max(0L, static_cast<long>(std::floor(g.y1)));
        const long y1 = std::min(static_cast<long>(H) - 1, static_cast<long>(std::ceil(g.y2)));
        const long x0 = std::max(0L, static_cast<long>(std::floor(g.x1)));
        const long x1 = std::min(static_cast<long>(W) - 1, static_cast<long>(std::ceil(g.x2)));
        for (long y = y0; y <= y1; ++y) {
            for (long x = x0; x <= x1; ++x) {
                const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
                if (!covers(obj, g, px, py)) continue;
                ++total[k];
                const std::size_t i = static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x);
                if (d > s.depth.data[i]) continue;
                s.depth.data[i] = d;
                owner[i] = static_cast<int>(k);
                const double shade = 1.0 - 0.25 * (py - g.y1) / (g.y2 - g.y1);
                for (std::size_t c = 0; c < 3; ++c) s.clear.data[c * hw + i] = std::clamp(obj.color[c] * shade, 0.0, 1.0);
            }
        }
    }

    std::vector<int> label_of(objects.size(), -2);
    for (std::size_t k = 0; k < objects.size(); ++k) {
        std::size_t visible = 0;
        long minx = static_cast<long>(W), miny = static_cast<long>(H), maxx = -1, maxy = -1;
        for (std::size_t i = 0; i < hw; ++i) {
            if (owner[i] != static_cast<int>(k)) continue;
            ++visible;
            const long x = static_cast<long>(i % W), y = static_cast<long>(i / W);
            minx = std::min(minx, x);
            maxx = std::max(maxx, x);
            miny = std::min(miny, y);
            maxy = std::max(maxy, y);
        }
        if (total[k] == 0 || visible == 0) continue;
        const double occlusion = 1.0 - static_cast<double>(visible) / static_cast<double>(total[k]);
        if (occlusion >= spec.max_occlusion) continue;
        Box b{static_cast<double>(minx), static_cast<double>(miny), static_cast<double>(maxx + 1),
              static_cast<double>(maxy + 1)};
        if (b.area() < spec.min_box_area) continue;
        label_of[k] = static_cast<int>(s.labels.size());
        s.labels.push_back({objects[k].class_id, b});
    }
    s.instance.assign(hw, -1);
    for (std::size_t i = 0; i < hw; ++i) {
        if (owner[i] >= 0) s.instance[i] = label_of[static_cast<std::size_t>(owner[i])];
    }

    s.t_gt = transmission_from_depth(s.depth, beta);
    s.foggy = apply_fog(s.clear, s.t_gt, airlight);
    return s;
}

SceneSample render_scene(const SceneSpec& spec, std::uint64_t seed) {
    for (std::uint32_t sub = 0;; ++sub) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xFFFFFFFFu), static_cast<std::uint32_t>(seed >> 32), sub};
        std::mt19937_64 rng(seq);
        std::uniform_real_distribution<double> u01(0.0, 1.0);
        auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

        BackgroundStyle bg;
        const double sky_tint = uniform(-0.08, 0.08);
        bg.sky_top = {0.45 + sky_tint, 0.62 + sky_tint, 0.88};
        bg.sky_bottom = {0.70 + sky_tint, 0.80 + sky_tint, 0.92};
        const double g0 = uniform(0.18, 0.42);
        bg.ground = {g0 + uniform(-0.06, 0.06), g0 + uniform(-0.06, 0.06), g0 + uniform(-0.1, 0.02)};
        bg.stripe_phase = uniform(0.0, 2.0 * std::numbers::pi);
        bg.noise_seed = rng();

        const double beta = uniform(spec.beta_min, spec.beta_max);
        const double a = uniform(spec.airlight_min, spec.airlight_max);
        const Airlight airlight{a, a, a};

        const std::size_t count =
            spec.min_objects + static_cast<std::size_t>(u01(rng) * static_cast<double>(spec.max_objects - spec.min_objects + 1));
        const std::size_t n_objects = std::min(count, spec.max_objects);
        const double cell_w = static_cast<double>(spec.width) / static_cast<double>(spec.separation_grid);
        const double cell_h = static_cast<double>(spec.height) / static_cast<double>(spec.separation_grid);
        std::vector<ObjectPlacement> objects;
        std::set<std::pair<long, long>> used_cells;
        bool satisfied = true;
        for (std::size_t k = 0; k < n_objects && satisfied; ++k) {
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                ObjectPlacement obj;
                obj.class_id = static_cast<int>(u01(rng) * static_cast<double>(spec.num_classes)) %
                               static_cast<int>(spec.num_classes);
                obj.depth = uniform(spec.object_depth_min, spec.object_depth_max);
                obj.world_size = uniform(spec.object_size_min, spec.object_size_max);
                obj.aspect = uniform(0.75, 1.35);
                obj.color = hsv_to_rgb(u01(rng), uniform(0.55, 1.0), uniform(0.5, 0.95));
                const ObjectPlacement probe = obj;
                const Box ext = object_extent(spec, probe);
                const double half_w = 0.5 * ext.width();
                if (2.0 * half_w >= static_cast<double>(spec.width)) continue;
                obj.center_x = uniform(half_w, static_cast<double>(spec.width) - half_w);
                const Box b = object_extent(spec, obj);
                if (b.y1 < 0.0 || b.y2 > static_cast<double>(spec.height)) continue;
                const std::pair<long, long> cell{static_cast<long>(std::floor(b.center_y() / cell_h)),
                                                 static_cast<long>(std::floor(b.center_x() / cell_w))};
                if (used_cells.count(cell)) continue;
                used_cells.insert(cell);
                objects.push_back(obj);
                placed = true;
            }
            satisfied = placed;
        }
        if (!satisfied) continue;
        SceneSample s = compose_scene(spec, bg, objects, beta, airlight);
        s.seed = seed;
        return s;
    }
}

// ---- dataset ---------------------------------------------------------------

Json to_json(const DatasetConfig& c) {
    return Json{{"scene", to_json(c.scene)},
                {"train_source", c.train_source},
                {"train_target", c.train_target},
                {"test_target", c.test_target},
                {"test_clear", c.test_clear},
                {"seed", c.seed}};
}

void read_json(StrictReader& r, DatasetConfig& c) {
    r.object("scene", [&](StrictReader& s) { read_json(s, c.scene); })
        .get("train_source", c.train_source)
        .get("train_target", c.train_target)
        .get("test_target", c.test_target)
        .get("test_clear", c.test_clear)
        .get("seed", c.seed);
}

const std::vector<std::string>& DatasetManifest::ids(const std::string& split_name) const {
    auto it = split.find(split_name);
    if (it == split.end()) throw ConfigError("dataset has no split \"" + split_name + "\"");
    return it->second;
}

Json to_json(const DatasetManifest& m) {
    Json split = Json::object();
    for (const auto& [name, ids] : m.split) split[name] = ids;
    return Json{{"version", 1},
                {"sample_ids", m.sample_ids},
                {"split", split},
                {"class_names", m.class_names},
                {"image_size", {{"height", m.image_height}, {"width", m.image_width}}},
                {"renderer_config_hash", m.renderer_config_hash},
                {"seed", m.seed},
                {"scene", to_json(m.scene)}};
}

DatasetManifest load_manifest(const fs::path& root) {
    const fs::path path = root / "manifest.json";
    if (!fs::exists(path)) throw IoError("dataset manifest not found: " + path.string());
    Json j;
    try {
        j = Json::parse(read_text_file(path));
    } catch (const Json::parse_error& e) {
        throw IoError("corrupt manifest " + path.string() + ": " + e.what());
    }
    DatasetManifest m;
    m.root = root;
    try {
        m.sample_ids = j.at("sample_ids").get<std::vector<std::string>>();
        for (auto it = j.at("split").begin(); it != j.at("split").end(); ++it) {
            m.split[it.key()] = it.value().get<std::vector<std::string>>();
        }
        m.class_names = j.at("class_names").get<std::vector<std::string>>();
        m.image_height = j.at("image_size").at("height").get<std::size_t>();
        m.image_width = j.at("image_size").at("width").get<std::size_t>();
        m.renderer_config_hash = j.at("renderer_config_hash").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        StrictReader r(j.at("scene"), "manifest.scene");
        read_json(r, m.scene);
        r.finish();
    } catch (const Json::exception& e) {
        throw IoError("malformed manifest " + path.string() + ": " + e.what());
    }
    return m;
}

std::uint64_t scene_seed(std::uint64_t dataset_seed, const std::string& split, std::size_t index) {
    std::uint64_t code = 0;
    if (split == "train_source") code = 1;
    else if (split == "train_target") code = 2;
    else if (split == "test_target" || split == "test_clear") code = 3;
    else throw std::invalid_argument("unknown split " + split);
    if (index >= (1u << 24)) throw std::invalid_argument("scene_seed: index too large");
    return (dataset_seed << 32) | (code << 24) | static_cast<std::uint64_t>(index);
}

namespace {

// Clear-weather version of a rendered scene.
SceneSample as_source(SceneSample s) {
    s.domain = Domain::source;
    s.beta = 0.0;
    s.t_gt = transmission_from_depth(s.depth, 0.0);
    s.foggy = s.clear;
    return s;
}

}  // namespace

SampleFields fields_for_split(const std::string& split) {
    SampleFields f;
    if (split == "train_source" || split == "test_clear") {
        f.foggy = false;
        f.transmission = false;
    } else if (split == "train_target") {
        f.seal_labels = true;
    }
    return f;
}

DatasetManifest synthesize_dataset(const DatasetConfig& config, const fs::path& out_dir, bool overwrite) {
    if (fs::exists(out_dir) && !fs::is_empty(out_dir)) {
        if (!overwrite) throw IoError("output directory " + out_dir.string() + " exists and is not empty");
        fs::remove_all(out_dir);
    }
    fs::create_directories(out_dir);

    DatasetManifest m;
    m.root = out_dir;
    m.class_names = class_names(config.scene);
    m.image_height = config.scene.height;
    m.image_width = config.scene.width;
    m.renderer_config_hash = config_hash(config.scene);
    m.seed = config.seed;
    m.scene = config.scene;
    const std::map<std::string, std::size_t> counts = {{"train_source", config.train_source},
                                                       {"train_target", config.train_target},
                                                       {"test_target", config.test_target},
                                                       {"test_clear", config.test_clear}};
    for (const std::string& split : kSplits) {
        auto& ids = m.split[split];
        for (std::size_t i = 0; i < counts.at(split); ++i) {
            char buf[16];
            std::snprintf(buf, sizeof buf, "%05zu", i);
            const std::string id = split + "/" + buf;
            SceneSample s = render_scene(config.scene, scene_seed(config.seed, split, i));
            if (split == "train_source" || split == "test_clear") s = as_source(std::move(s));
            save_sample(s, out_dir / id, fields_for_split(split));
            ids.push_back(id);
            m.sample_ids.push_back(id);
        }
    }
    write_text_file(out_dir / "manifest.json", to_json(m).dump(2));
    return m;
}

Json labels_to_json(const std::vector<BoxLabel>& labels) {
    Json boxes = Json::array();
    for (const auto& l : labels) {
        boxes.push_back({{"class", l.class_id}, {"x1", l.box.x1}, {"y1", l.box.y1}, {"x2", l.box.x2}, {"y2", l.box.y2}});
    }
    return Json{{"boxes", boxes}};
}

std::vector<BoxLabel> labels_from_json(const Json& j) {
    std::vector<BoxLabel> out;
    for (const auto& b : j.at("boxes")) {
        out.push_back({b.at("class").get<int>(),
                       {b.at("x1").get<double>(), b.at("y1").get<double>(), b.at("x2").get<double>(),
                        b.at("y2").get<double>()}});
    }
    return out;
}

void save_sample(const SceneSample& s, const fs::path& dir, const SampleFields& f) {
    fs::create_directories(dir);
    Json files = Json::object();
    auto record = [&](const std::string& rel) { files[rel] = sha256_file(dir / rel); };
    if (f.clear && s.clear.channels) {
        write_png(dir / "clear.png", s.clear, 16);
        record("clear.png");
    }
    if (f.foggy && s.foggy.channels) {
        write_png(dir / "foggy.png", s.foggy, 16);
        record("foggy.png");
    }
    if (f.depth && !s.depth.data.empty()) {
        write_fmap(dir / "depth.fmap", s.depth);
        record("depth.fmap");
    }
    if (f.transmission && !s.t_gt.values.data.empty()) {
        write_fmap(dir / "transmission.fmap", s.t_gt.values);
        record("transmission.fmap");
    }
    if (f.labels) {
        const std::string rel = f.seal_labels ? "sealed/labels.json" : "labels.json";
        if (f.seal_labels) fs::create_directories(dir / "sealed");
        write_text_file(dir / rel, labels_to_json(s.labels).dump());
        record(rel);
    }
    const Json meta{{"domain", to_string(s.domain)},
                    {"beta", s.beta},
                    {"airlight", s.airlight},
                    {"seed", s.seed},
                    {"labels_sealed", f.labels && f.seal_labels},
                    {"files", files}};
    write_text_file(dir / "meta.json", meta.dump(2));
}

SceneSample read_sample_dir(const fs::path& dir, bool unseal) {
    const fs::path meta_path = dir / "meta.json";
    if (!fs::exists(meta_path)) throw IoError("sample metadata missing: " + meta_path.string());
    Json meta;
    try {
        meta = Json::parse(read_text_file(meta_path));
    } catch (const Json::parse_error& e) {
        throw IoError("corrupt sample metadata " + meta_path.string() + ": " + e.what());
    }
    SceneSample s;
    try {
        s.domain = meta.at("domain").get<std::string>() == "source" ? Domain::source : Domain::target;
        s.beta = meta.at("beta").get<double>();
        s.airlight = meta.at("airlight").get<Airlight>();
        s.seed = meta.at("seed").get<std::uint64_t>();
        const Json& files = meta.at("files");
        for (auto it = files.begin(); it != files.end(); ++it) {
            const std::string& rel = it.key();
            const bool sealed = rel.rfind("sealed/", 0) == 0;
            if (sealed && !unseal) continue;
            const fs::path p = dir / rel;
            if (!fs::exists(p)) throw IoError("sample file missing: " + p.string());
            if (sha256_file(p) != it.value().get<std::string>()) throw IoError("checksum mismatch: " + p.string());
            if (rel == "clear.png") s.clear = read_png(p);
            else if (rel == "foggy.png") s.foggy = read_png(p);
            else if (rel == "depth.fmap") s.depth = read_fmap(p);
            else if (rel == "transmission.fmap") s.t_gt = TransmissionMap{read_fmap(p)};
            else if (rel == "labels.json" || rel == "sealed/labels.json") s.labels = labels_from_json(Json::parse(read_text_file(p)));
        }
        s.labels_sealed = meta.at("labels_sealed").get<bool>() && !unseal;
    } catch (const Json::exception& e) {
        throw IoError("malformed sample in " + dir.string() + ": " + e.what());
    }
    return s;
}

SceneSample load_sample(const DatasetManifest& manifest, const std::string& id, bool unseal) {
    if (std::find(manifest.sample_ids.begin(), manifest.sample_ids.end(), id) == manifest.sample_ids.end()) {
        throw IoError("sample not found: " + id);
    }
    return read_sample_dir(manifest.root / id, unseal);
}

}  // namespace fogda
