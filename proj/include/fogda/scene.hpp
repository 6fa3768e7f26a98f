#pragma once

// Synthetic street-like scenes with exact depth, transmission and box
// ground truth, and the on-disk dataset layout built from them.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fogda/box.hpp"
#include "fogda/fog.hpp"
#include "fogda/image.hpp"
#include "fogda/json_util.hpp"

namespace fogda {

enum class Domain { source, target };

std::string to_string(Domain d);

struct BoxLabel {
    int class_id = 0;
    Box box;

    friend bool operator==(const BoxLabel&, const BoxLabel&) = default;
};

// Renderer configuration. Depth is in toy metres.
struct SceneSpec {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t num_classes = 3;  // box, disc, triangle
    std::size_t min_objects = 1;
    std::size_t max_objects = 3;
    double depth_min = 2.0;
    double depth_max = 80.0;
    // Objects stand on the ground plane between these depths.
    double object_depth_min = 4.0;
    double object_depth_max = 14.0;
    double object_size_min = 1.4;
    double object_size_max = 2.2;
    // Pixel extent = focal * world size / depth.
    double focal = 64.0;
    // Ground row for depth d is horizon + ground_scale / d.
    double horizon = 16.0;
    double ground_scale = 160.0;
    double beta_min = 0.03;
    double beta_max = 0.12;
    double airlight_min = 0.9;
    double airlight_max = 0.9;
    // Background texture: stripe contrast, stripe period in pixels, per-pixel noise.
    double texture_amplitude = 0.06;
    double texture_period = 6.0;
    double texture_noise = 0.03;
    // Objects whose centres share a cell of this grid are re-placed.
    std::size_t separation_grid = 4;
    double max_occlusion = 0.75;
    double min_box_area = 9.0;

    friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

Json to_json(const SceneSpec& spec);
void read_json(StrictReader& reader, SceneSpec& spec);
// SHA-256 of the canonical JSON form.
std::string config_hash(const SceneSpec& spec);
std::vector<std::string> class_names(const SceneSpec& spec);

struct SceneSample {
    Image clear;
    Image foggy;
    Map2D depth;
    TransmissionMap t_gt;
    std::vector<BoxLabel> labels;
    Domain domain = Domain::source;
    double beta = 0.0;
    Airlight airlight;
    std::uint64_t seed = 0;
    // Set when the sample came from disk with its labels withheld.
    bool labels_sealed = false;
    // Per-pixel index into labels; -1 background, -2 an unlabelled object.
    // Only filled by the renderer, not stored on disk.
    std::vector<int> instance;
};

// One object to draw; render_scene samples these, tests may supply them.
struct ObjectPlacement {
    int class_id = 0;
    double depth = 10.0;
    double world_size = 1.5;
    double center_x = 32.0;
    double aspect = 1.0;
    std::array<double, 3> color{0.8, 0.2, 0.2};
};

struct BackgroundStyle {
    std::array<double, 3> sky_top{0.45, 0.62, 0.88};
    std::array<double, 3> sky_bottom{0.70, 0.80, 0.92};
    std::array<double, 3> ground{0.30, 0.30, 0.28};
    double stripe_phase = 0.0;
    std::uint64_t noise_seed = 0;
};

// Pixel box covered by an unoccluded object.
Box object_extent(const SceneSpec& spec, const ObjectPlacement& obj);

// Draws the scene; labels are the visible, not-too-occluded objects.
SceneSample compose_scene(const SceneSpec& spec, const BackgroundStyle& background,
                          const std::vector<ObjectPlacement>& objects, double beta, const Airlight& airlight);

SceneSample render_scene(const SceneSpec& spec, std::uint64_t seed);

// ---- dataset ---------------------------------------------------------------

inline const std::vector<std::string> kSplits = {"train_source", "train_target", "test_target", "test_clear"};

struct DatasetConfig {
    SceneSpec scene;
    std::size_t train_source = 500;
    std::size_t train_target = 500;
    std::size_t test_target = 100;
    std::size_t test_clear = 100;
    std::uint64_t seed = 0;
};

Json to_json(const DatasetConfig& config);
void read_json(StrictReader& reader, DatasetConfig& config);

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<std::string> sample_ids;
    std::map<std::string, std::vector<std::string>> split;
    std::vector<std::string> class_names;
    std::size_t image_height = 0;
    std::size_t image_width = 0;
    std::string renderer_config_hash;
    std::uint64_t seed = 0;
    SceneSpec scene;

    const std::vector<std::string>& ids(const std::string& split_name) const;
};

Json to_json(const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& root);

// Scene seed for sample `index` of `split`; distinct splits never share a seed,
// except test_clear which renders the same scenes as test_target without fog.
std::uint64_t scene_seed(std::uint64_t dataset_seed, const std::string& split, std::size_t index);

// Renders every split to out_dir. A non-empty out_dir is rejected unless
// overwrite is set.
DatasetManifest synthesize_dataset(const DatasetConfig& config, const std::filesystem::path& out_dir,
                                   bool overwrite = false);

// Which fields a sample directory holds.
struct SampleFields {
    bool clear = true;
    bool foggy = true;
    bool depth = true;
    bool transmission = true;
    bool labels = true;
    // Labels go to sealed/labels.json instead of labels.json.
    bool seal_labels = false;
};

SampleFields fields_for_split(const std::string& split);

void save_sample(const SceneSample& sample, const std::filesystem::path& dir, const SampleFields& fields = {});
// Reads one sample directory; sealed labels are only read when unseal is set.
SceneSample read_sample_dir(const std::filesystem::path& dir, bool unseal = false);
SceneSample load_sample(const DatasetManifest& manifest, const std::string& id, bool unseal = false);

Json labels_to_json(const std::vector<BoxLabel>& labels);
std::vector<BoxLabel> labels_from_json(const Json& j);

}  // namespace fogda
