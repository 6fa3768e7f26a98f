// fogda: dataset synthesis, training, evaluation, dehazing and ablations.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
// 4 numerical abort.

#include <cstdlib>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "fogda/errors.hpp"
#include "fogda/fog.hpp"
#include "fogda/image_io.hpp"
#include "fogda/run.hpp"

namespace fs = std::filesystem;
using namespace fogda;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumerical = 4;

RunConfig base_config(const std::string& path) {
    if (path.empty()) return RunConfig{};
    if (!fs::exists(path)) throw IoError("config file not found: " + path);
    return load_run_config(path);
}

std::optional<std::uint64_t> env_seed() {
    const char* v = std::getenv("FOGDA_SEED");
    if (!v || !*v) return std::nullopt;
    try {
        std::size_t used = 0;
        const unsigned long long s = std::stoull(v, &used);
        if (used != std::string(v).size()) throw std::invalid_argument(v);
        return s;
    } catch (const std::exception&) {
        throw ConfigError("FOGDA_SEED is not an unsigned integer: " + std::string(v));
    }
}

void print_manifest(const DatasetManifest& m) {
    std::cout << "dataset " << m.root.string() << "\n";
    for (const auto& [split, ids] : m.split) std::cout << "  " << split << ": " << ids.size() << "\n";
    std::cout << "  samples: " << m.sample_ids.size() << "\n  classes:";
    for (const auto& c : m.class_names) std::cout << ' ' << c;
    std::cout << "\n  image: " << m.image_height << "x" << m.image_width << "\n  renderer_config_hash: "
              << m.renderer_config_hash << "\n";
}

struct Options {
    std::string config;
    std::string out;
    std::string data;
    std::string run_dir;
    std::string checkpoint;
    std::string split;
    std::string protocol;
    std::string input;
    std::string output;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> iterations;
    bool force = false;
    bool ema = false;
    bool dump_defaults = false;
};

int cmd_synth(const Options& o) {
    RunConfig c = base_config(o.config);
    if (const auto s = env_seed()) c.dataset.seed = *s;
    if (o.seed) c.dataset.seed = *o.seed;
    const fs::path out = o.out.empty() ? c.data_dir : fs::path(o.out);
    print_manifest(synthesize_dataset(c.dataset, out, o.force));
    return 0;
}

RunConfig train_config(const Options& o) {
    RunConfig c = base_config(o.config);
    if (const auto s = env_seed()) c.train.seed = *s;
    if (o.seed) c.train.seed = *o.seed;
    if (o.iterations) c.train.iterations = *o.iterations;
    if (!o.data.empty()) c.data_dir = o.data;
    if (!o.run_dir.empty()) c.run_dir = o.run_dir;
    if (!o.protocol.empty()) c.protocol = o.protocol;
    validate_protocol(c.protocol);
    return c;
}

int cmd_train(const Options& o) {
    const RunConfig c = train_config(o);
    const RunOutcome r = run_training(c, c.run_dir);
    std::cout << "trained " << r.result.state.iteration << " iterations into " << c.run_dir.string() << "\n"
              << "protocol " << r.metrics.protocol << " mAP " << r.metrics.map << "\n";
    return 0;
}

int cmd_eval(const Options& o) {
    RunConfig c = base_config(o.config);
    fs::path ckpt;
    if (!o.run_dir.empty()) {
        const fs::path lock = fs::path(o.run_dir) / "config.lock.json";
        if (o.config.empty() && fs::exists(lock)) c = load_run_config(lock);
        ckpt = o.checkpoint.empty() ? latest_checkpoint(o.run_dir, o.ema) : fs::path(o.checkpoint);
    } else if (!o.checkpoint.empty()) {
        ckpt = o.checkpoint;
        // --ema picks the EMA twin of an explicit student checkpoint.
        const std::string f = ckpt.filename().string();
        if (o.ema && f.starts_with("ckpt_")) ckpt = ckpt.parent_path() / ("ema_" + f.substr(5));
    } else {
        throw ConfigError("eval needs --run-dir or --checkpoint");
    }
    if (!o.data.empty()) c.data_dir = o.data;
    const std::string split = o.split.empty() ? protocol_split(c.protocol) : o.split;
    std::string protocol;
    if (!o.protocol.empty()) {
        check_protocol_split(o.protocol, split);
        protocol = o.protocol;
    } else {
        protocol = eval_protocol(c.protocol, split);
    }

    const Checkpoint cp = load_checkpoint(ckpt);
    const DatasetManifest manifest = load_manifest(c.data_dir);
    const MetricsReport r = evaluate(cp.params, cp.config, manifest, split, protocol);
    fs::path out;
    if (!o.out.empty()) {
        out = o.out;
    } else if (!o.run_dir.empty()) {
        out = fs::path(o.run_dir) / "metrics.json";
    } else {
        out = ckpt.parent_path() / "metrics.json";
    }
    write_text_file(out, to_json(r).dump(2) + "\n");
    std::cout << "checkpoint " << ckpt.string() << (cp.ema ? " (EMA)" : "") << "\nsplit " << split << " protocol "
              << protocol << " mAP " << r.map << "\n";
    for (const auto& [k, v] : r.per_class_ap) std::cout << "  " << k << " AP " << v << "\n";
    std::cout << "wrote " << out.string() << "\n";
    return 0;
}

int cmd_dehaze(const Options& o) {
    const Image in = read_png(o.input);
    const DcpResult r = dcp_defog(in);
    write_png(o.output, r.defogged, 8);
    std::cout << "airlight";
    for (double a : r.airlight) std::cout << ' ' << a;
    std::cout << "\nwrote " << o.output << "\n";
    return 0;
}

int cmd_ablate(const Options& o) {
    RunConfig base = train_config(o);
    const fs::path out = o.out.empty() ? base.run_dir / "ablation" : fs::path(o.out);
    fs::create_directories(out);
    const auto rows = ablation_rows();
    Json table{{"seeds", o.seeds}, {"split", "test_target"}, {"rows", Json::array()}};
    for (std::size_t k = 0; k < rows.size(); ++k) {
        Json row{{"row", k + 1},
                 {"name", rows[k].name},
                 {"toggles",
                  {{"da", rows[k].toggles.da},
                   {"deb", rows[k].toggles.deb},
                   {"cst", rows[k].toggles.cst},
                   {"rec", rows[k].toggles.rec},
                   {"pl", rows[k].toggles.pl}}},
                 {"map", Json::object()},
                 {"errors", Json::object()}};
        std::vector<double> maps;
        for (const std::uint64_t seed : o.seeds) {
            RunConfig c = base;
            c.protocol = "ablation-" + std::to_string(k + 1);
            c.train.seed = seed;
            const fs::path dir = out / ("row" + std::to_string(k + 1)) / ("seed" + std::to_string(seed));
            try {
                const RunOutcome r = run_training(c, dir);
                row["map"][std::to_string(seed)] = r.metrics.map;
                maps.push_back(r.metrics.map);
                std::cout << rows[k].name << " seed " << seed << " mAP " << r.metrics.map << std::endl;
            } catch (const std::exception& e) {
                row["errors"][std::to_string(seed)] = e.what();
                std::cout << rows[k].name << " seed " << seed << " FAILED: " << e.what() << std::endl;
            }
        }
        row["status"] = maps.size() == o.seeds.size() ? "ok" : "failed";
        row["mean"] = maps.empty() ? Json(nullptr)
                                   : Json(std::accumulate(maps.begin(), maps.end(), 0.0) / static_cast<double>(maps.size()));
        table["rows"].push_back(row);
    }
    write_text_file(out / "ablation_table.json", table.dump(2) + "\n");
    std::cout << "wrote " << (out / "ablation_table.json").string() << "\n";
    return 0;
}

int cmd_config(const Options& o) {
    if (!o.dump_defaults) throw ConfigError("config: nothing to do (use --dump-defaults)");
    std::cout << to_json(RunConfig{}).dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fog-robust domain-adaptive detection on synthetic scenes"};
    app.require_subcommand(1);
    Options o;
    auto add_config = [&](CLI::App* c) { c->add_option("--config", o.config, "Run config JSON (defaults if omitted)"); };
    auto add_train_flags = [&](CLI::App* c) {
        add_config(c);
        c->add_option("--data", o.data, "Dataset directory (overrides paths.data_dir)");
        c->add_option("--run-dir", o.run_dir, "Run directory (overrides paths.run_dir)");
        c->add_option("--iterations", o.iterations, "Training iterations (overrides train.iterations)");
        c->add_option("--protocol", o.protocol, "upperbound | lowerbound | da | ablation-1..5");
    };

    CLI::App* synth = app.add_subcommand("synth", "Render the synthetic dataset");
    add_config(synth);
    synth->add_option("--out", o.out, "Output directory (overrides paths.data_dir)");
    synth->add_flag("--force", o.force, "Replace a non-empty output directory");
    synth->add_option("--seed", o.seed, "Dataset seed (overrides FOGDA_SEED and the config)");

    CLI::App* train_cmd = app.add_subcommand("train", "Train one model; writes config.lock.json, log.jsonl, "
                                                      "checkpoints/ and metrics.json to the run directory");
    add_train_flags(train_cmd);
    train_cmd->add_option("--seed", o.seed, "Training seed (overrides FOGDA_SEED and the config)");

    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a test split");
    add_config(eval_cmd);
    eval_cmd->add_option("--run-dir", o.run_dir, "Run directory; its latest checkpoint and config.lock.json are used");
    eval_cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint file");
    eval_cmd->add_option("--data", o.data, "Dataset directory");
    eval_cmd->add_option("--split", o.split, "test_target | test_clear (default: the protocol's split)");
    eval_cmd->add_option("--protocol", o.protocol, "Protocol tag; must match the split");
    eval_cmd->add_flag("--ema", o.ema, "Evaluate the EMA (teacher) weights");
    eval_cmd->add_option("--out", o.out, "metrics.json path (default: in the run directory)");

    CLI::App* dehaze = app.add_subcommand("dehaze", "Dark-channel-prior defogging of a PNG (8-bit output)");
    dehaze->add_option("input", o.input, "Foggy PNG")->required();
    dehaze->add_option("output", o.output, "Defogged PNG")->required();

    CLI::App* ablate = app.add_subcommand("ablate", "Run the five ablation rows over several seeds");
    add_train_flags(ablate);
    ablate->add_option("--seeds", o.seeds, "Seeds shared by every row")->delimiter(',');
    ablate->add_option("--out", o.out, "Output directory (default: <run_dir>/ablation)");

    CLI::App* config = app.add_subcommand("config", "Configuration utilities");
    config->add_flag("--dump-defaults", o.dump_defaults, "Print the default run config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (*synth) return cmd_synth(o);
        if (*train_cmd) return cmd_train(o);
        if (*eval_cmd) return cmd_eval(o);
        if (*dehaze) return cmd_dehaze(o);
        if (*ablate) return cmd_ablate(o);
        if (*config) return cmd_config(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kExitConfig;
}
