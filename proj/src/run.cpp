#include "fogda/run.hpp"

#include <algorithm>
#include <fstream>
#include <regex>

#include "fogda/errors.hpp"
#include "fogda/image_io.hpp"

namespace fogda {

namespace fs = std::filesystem;

Json to_json(const RunConfig& c) {
    return Json{{"version", c.version},
                {"dataset", to_json(c.dataset)},
                {"train", to_json(c.train)},
                {"paths", {{"data_dir", c.data_dir.string()}, {"run_dir", c.run_dir.string()}}},
                {"protocol", c.protocol}};
}

RunConfig run_config_from_json(const Json& j) {
    RunConfig c;
    StrictReader r(j, "config");
    std::string data_dir = c.data_dir.string(), run_dir = c.run_dir.string();
    r.get("version", c.version)
        .object("dataset", [&](StrictReader& d) { read_json(d, c.dataset); })
        .object("train", [&](StrictReader& t) { read_json(t, c.train); })
        .object("paths", [&](StrictReader& p) { p.get("data_dir", data_dir).get("run_dir", run_dir); })
        .get("protocol", c.protocol);
    r.finish();
    if (c.version != kRunConfigVersion) {
        throw ConfigError("config: unsupported version " + std::to_string(c.version) + " (expected " +
                          std::to_string(kRunConfigVersion) + ")");
    }
    c.data_dir = data_dir;
    c.run_dir = run_dir;
    validate_protocol(c.protocol);
    return c;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
    Json j;
    try {
        j = Json::parse(text);
    } catch (const Json::parse_error& e) {
        // e.byte is 1-based and points just past the offending character.
        const std::size_t at = std::min<std::size_t>(e.byte ? e.byte - 1 : 0, text.size());
        std::size_t line = 1, col = 1;
        for (std::size_t i = 0; i < at; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": malformed JSON");
    }
    return run_config_from_json(j);
}

RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_text_file(path), path.string()); }

bool is_source_only(const std::string& protocol) { return protocol == "upperbound" || protocol == "lowerbound"; }

void validate_protocol(const std::string& protocol) {
    static const std::regex ok("upperbound|lowerbound|da|ablation-[1-5]");
    if (!std::regex_match(protocol, ok)) {
        throw ConfigError("unknown protocol \"" + protocol + "\" (upperbound, lowerbound, da, ablation-1..5)");
    }
}

std::string protocol_split(const std::string& protocol) {
    validate_protocol(protocol);
    return protocol == "upperbound" ? "test_clear" : "test_target";
}

void check_protocol_split(const std::string& protocol, const std::string& split) {
    if (protocol_split(protocol) != split) {
        throw ConfigError("protocol " + protocol + " is evaluated on " + protocol_split(protocol) + ", not " + split);
    }
}

std::string eval_protocol(const std::string& trained, const std::string& split) {
    validate_protocol(trained);
    if (is_source_only(trained)) {
        if (split == "test_clear") return "upperbound";
        if (split == "test_target") return "lowerbound";
    } else if (split == "test_target") {
        return trained;
    }
    throw ConfigError("a " + trained + " model has no protocol on split " + split);
}

std::vector<AblationRow> ablation_rows() {
    return {{"DA", {true, false, false, false, false}},
            {"DA+DEB", {true, true, false, false, false}},
            {"DA+DEB+Consist", {true, true, true, false, false}},
            {"DA+DEB+Consist+Reconst", {true, true, true, true, false}},
            {"DA+DEB+Consist+Reconst+PL", {true, true, true, true, true}}};
}

TrainConfig effective_train_config(const RunConfig& c) {
    TrainConfig t = c.train;
    if (is_source_only(c.protocol)) t.toggles = {false, false, false, false, false};
    if (c.protocol.starts_with("ablation-")) t.toggles = ablation_rows()[std::stoul(c.protocol.substr(9)) - 1].toggles;
    return t;
}

RunOutcome run_training(const RunConfig& c, const fs::path& run_dir) {
    const TrainConfig tc = effective_train_config(c);
    tc.validate();
    const DatasetManifest manifest = load_manifest(c.data_dir);
    const TrainingSet data = prepare_training_set(manifest, tc);
    const std::string split = protocol_split(c.protocol);
    std::vector<SceneSample> eval_samples;
    for (const auto& id : manifest.ids(split)) eval_samples.push_back(load_sample(manifest, id));

    fs::create_directories(run_dir);
    RunConfig lock = c;
    lock.train = tc;
    lock.run_dir = run_dir;
    write_text_file(run_dir / "config.lock.json", to_json(lock).dump(2) + "\n");

    TrainOptions opt;
    opt.run_dir = run_dir;
    opt.eval_samples = &eval_samples;
    opt.eval_protocol = c.protocol;
    RunOutcome out;
    out.result = train(tc, data, opt);
    out.metrics = evaluate_samples(out.result.state.params, data.model, eval_samples, data.class_names, c.protocol);
    write_text_file(run_dir / "metrics.json", to_json(out.metrics).dump(2) + "\n");
    return out;
}

fs::path latest_checkpoint(const fs::path& run_dir, bool ema) {
    const fs::path dir = run_dir / "checkpoints";
    if (!fs::is_directory(dir)) throw IoError("no checkpoints directory in " + run_dir.string());
    const std::regex name(ema ? "ema_([0-9]+)\\.bin" : "ckpt_([0-9]+)\\.bin");
    std::optional<std::pair<unsigned long long, fs::path>> best;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::smatch m;
        const std::string f = e.path().filename().string();
        if (!std::regex_match(f, m, name)) continue;
        const unsigned long long it = std::stoull(m[1]);
        if (!best || it > best->first) best = {it, e.path()};
    }
    if (!best) throw IoError(std::string("no ") + (ema ? "EMA " : "") + "checkpoint in " + dir.string());
    return best->second;
}

}  // namespace fogda
