#include "deltascope/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <tuple>

#include "json.hpp"

#include "deltascope/errors.hpp"
#include "deltascope/parallel.hpp"
#include "deltascope/rng.hpp"

namespace deltascope {

namespace fs = std::filesystem;
using nlohmann::json;

void PatchExtractionConfig::validate() const {
    if (crop_size < 2) {
        throw ConfigError("crop size must be >= 2, got " + std::to_string(crop_size));
    }
    if (crops_per_region < 1) {
        throw ConfigError("crops per region must be >= 1");
    }
    if (!(ratio_threshold > 0.0 && ratio_threshold < 1.0)) {
        throw ConfigError("ratio threshold must lie in (0, 1), got " + std::to_string(ratio_threshold));
    }
}

const char* transform_name(Transform t) {
    switch (t) {
        case Transform::rot90: return "rot90";
        case Transform::rot180: return "rot180";
        case Transform::rot270: return "rot270";
        case Transform::rot360: return "rot360";
        case Transform::flip_vertical: return "flip_vertical";
        case Transform::flip_horizontal: return "flip_horizontal";
    }
    return "unknown";
}

Transform transform_from_id(int id) {
    if (id < 0 || id >= kTransformCount) {
        throw FormatError("transform id must be in 0..5, got " + std::to_string(id));
    }
    return static_cast<Transform>(id);
}

namespace {

template <typename Values>
std::size_t count_changed(const Values& values) {
    std::size_t changed = 0;
    for (auto v : values) {
        if (v == 1) {
            ++changed;
        } else if (v != 0) {
            throw ValidationError("ground truth must be binary, found value " + std::to_string(+v));
        }
    }
    return changed;
}

}  // namespace

double compute_change_ratio(std::span<const std::uint8_t> gt) {
    if (gt.empty()) {
        throw ValidationError("empty ground-truth patch");
    }
    return static_cast<double>(count_changed(gt)) / static_cast<double>(gt.size());
}

double compute_change_ratio(const Plane& gt) {
    if (gt.values.empty()) {
        throw ValidationError("empty ground-truth plane");
    }
    return static_cast<double>(count_changed(gt.values)) / static_cast<double>(gt.values.size());
}

PatchTriplet apply_transform(const PatchTriplet& patch, Transform t) {
    PatchTriplet out;
    out.size = patch.size;
    out.channels = patch.channels;
    out.pre = transform_grid(patch.pre, patch.size, patch.channels, t);
    out.post = transform_grid(patch.post, patch.size, patch.channels, t);
    out.gt = transform_grid(patch.gt, patch.size, 1, t);
    return out;
}

PatchTriplet crop_patch(const ScenePair& scene, std::size_t x, std::size_t y, std::size_t size) {
    const std::size_t c = scene.pre.band_count();
    PatchTriplet patch;
    patch.size = size;
    patch.channels = c;
    patch.pre.resize(size * size * c);
    patch.post.resize(size * size * c);
    patch.gt.resize(size * size);
    for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t col = 0; col < size; ++col) {
            const std::size_t src = (y + r) * scene.pre.width + (x + col);
            const std::size_t dst = r * size + col;
            for (std::size_t b = 0; b < c; ++b) {
                patch.pre[dst * c + b] = scene.pre.bands[b][src];
                patch.post[dst * c + b] = scene.post.bands[b][src];
            }
            patch.gt[dst] = static_cast<std::uint8_t>(scene.gt.values[src]);
        }
    }
    return patch;
}

namespace {

void validate_scene(const ScenePair& scene, std::size_t crop) {
    const auto& pre = scene.pre;
    if (pre.width != scene.post.width || pre.height != scene.post.height || pre.width != scene.gt.width ||
        pre.height != scene.gt.height) {
        throw DimensionError("region " + scene.region_id + ": pre, post and ground truth extents differ");
    }
    if (pre.band_count() != scene.post.band_count() || pre.band_count() == 0) {
        throw DimensionError("region " + scene.region_id + ": pre and post band counts differ");
    }
    if (pre.width < crop || pre.height < crop) {
        throw DimensionError("region " + scene.region_id + ": scene " + std::to_string(pre.width) + "x" +
                             std::to_string(pre.height) + " is smaller than crop size " + std::to_string(crop));
    }
    if (scene.gt.values.size() != pre.width * pre.height) {
        throw DimensionError("region " + scene.region_id + ": ground-truth plane has wrong sample count");
    }
    for (float v : scene.gt.values) {
        if (v != 0.0f && v != 1.0f) {
            throw ValidationError("region " + scene.region_id + ": ground truth must be binary");
        }
    }
}

}  // namespace

std::vector<PatchSample> extract_patches(const ScenePair& scene, const PatchExtractionConfig& cfg) {
    cfg.validate();
    validate_scene(scene, cfg.crop_size);
    Rng rng = Rng(cfg.seed).split(scene.region_id);
    const std::size_t a = cfg.crop_size;
    const std::size_t x_range = scene.pre.width - a + 1;
    const std::size_t y_range = scene.pre.height - a + 1;

    std::vector<PatchSample> samples;
    for (std::size_t draw = 0; draw < cfg.crops_per_region; ++draw) {
        const std::size_t x = rng.uniform_int(x_range);
        const std::size_t y = rng.uniform_int(y_range);
        const PatchTriplet crop = crop_patch(scene, x, y, a);
        const double ratio = compute_change_ratio(crop.gt);

        auto emit = [&](Transform t) {
            samples.push_back({scene.region_id, x, y, t, ratio, apply_transform(crop, t)});
        };
        if (ratio < cfg.ratio_threshold) {
            emit(transform_from_id(static_cast<int>(rng.uniform_int(kTransformCount))));
        } else {
            for (int t = 0; t < kTransformCount; ++t) emit(static_cast<Transform>(t));
        }
    }
    return samples;
}

std::vector<PatchSample> dedup(std::vector<PatchSample> samples) {
    std::set<std::tuple<std::string, std::size_t, std::size_t, int>> seen;
    std::vector<PatchSample> kept;
    kept.reserve(samples.size());
    for (PatchSample& s : samples) {
        if (seen.emplace(s.region_id, s.x, s.y, static_cast<int>(s.transform)).second) {
            kept.push_back(std::move(s));
        }
    }
    return kept;
}

int label_classification(std::span<const std::uint8_t> gt) {
    return count_changed(gt) < kMinChangedPixelsForLabel ? 0 : 1;
}

std::vector<std::size_t> FoldAssignment::members(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
        if (fold_of[i] == fold) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> FoldAssignment::complement(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < fold_of.size(); ++i) {
        if (fold_of[i] != fold) out.push_back(i);
    }
    return out;
}

std::vector<std::size_t> FoldAssignment::fold_sizes() const {
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t f : fold_of) ++sizes.at(f);
    return sizes;
}

FoldAssignment kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k < 1) {
        throw UsageError("k-fold split needs k >= 1");
    }
    if (n < k) {
        throw UsageError("k-fold split needs at least k samples: n=" + std::to_string(n) +
                         ", k=" + std::to_string(k));
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = Rng(seed).split("kfold");
    for (std::size_t i = n; i > 1; --i) {
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
    FoldAssignment folds;
    folds.k = k;
    folds.fold_of.assign(n, 0);
    const std::size_t base = n / k, extra = n % k;
    std::size_t pos = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t size = base + (f < extra ? 1 : 0);
        for (std::size_t j = 0; j < size; ++j) folds.fold_of[order[pos++]] = f;
    }
    return folds;
}

float normalize_reflectance(float value, SampleType dtype) {
    const float scaled = dtype == SampleType::u16 ? value / 10000.0f : value;
    return std::clamp(scaled, 0.0f, 1.0f);
}

Dataset build_dataset(const std::vector<ScenePair>& scenes, const PatchExtractionConfig& cfg, std::size_t jobs) {
    cfg.validate();
    if (scenes.empty()) {
        throw UsageError("no scenes to extract from");
    }
    Dataset dataset;
    dataset.config = cfg;
    dataset.dtype = scenes.front().pre.dtype;
    dataset.bands = scenes.front().pre.band_meta;
    for (const ScenePair& scene : scenes) {
        if (scene.pre.band_count() != dataset.bands.size() || scene.pre.dtype != dataset.dtype) {
            throw DimensionError("region " + scene.region_id + " has a different band layout than region " +
                                 scenes.front().region_id);
        }
    }
    std::vector<std::vector<PatchSample>> per_region(scenes.size());
    parallel_for(scenes.size(), jobs, [&](std::size_t i) { per_region[i] = extract_patches(scenes[i], cfg); });
    std::vector<PatchSample> merged;
    for (auto& part : per_region) {
        std::move(part.begin(), part.end(), std::back_inserter(merged));
    }
    dataset.samples = dedup(std::move(merged));
    return dataset;
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

json config_json(const PatchExtractionConfig& cfg) {
    return {{"crop_size", cfg.crop_size},
            {"crops_per_region", cfg.crops_per_region},
            {"ratio_threshold", cfg.ratio_threshold},
            {"seed", cfg.seed}};
}

MultibandRaster sample_payload(const Dataset& dataset, const PatchSample& s) {
    const std::size_t c = s.patch.channels, pixels = s.patch.size * s.patch.size;
    MultibandRaster r;
    r.width = r.height = s.patch.size;
    r.dtype = dataset.dtype;
    for (const char* prefix : {"pre:", "post:"}) {
        const auto& source = prefix[1] == 'r' ? s.patch.pre : s.patch.post;
        for (std::size_t b = 0; b < c; ++b) {
            std::vector<float> plane(pixels);
            for (std::size_t p = 0; p < pixels; ++p) plane[p] = source[p * c + b];
            BandMeta meta = b < dataset.bands.size() ? dataset.bands[b] : BandMeta{};
            meta.id = prefix + meta.id;
            r.bands.push_back(std::move(plane));
            r.band_meta.push_back(std::move(meta));
        }
    }
    r.bands.emplace_back(s.patch.gt.begin(), s.patch.gt.end());
    r.band_meta.push_back({"gt", 0.0, 10});
    return r;
}

}  // namespace

void write_dataset(const Dataset& dataset, const fs::path& dir) {
    fs::create_directories(dir / "patches");
    json manifest;
    manifest["format"] = "deltascope-dataset";
    manifest["version"] = 1;
    manifest["config"] = config_json(dataset.config);
    manifest["dtype"] = sample_type_name(dataset.dtype);
    manifest["bands"] = json::array();
    for (const BandMeta& b : dataset.bands) {
        manifest["bands"].push_back({{"id", b.id}, {"wavelength_nm", b.wavelength_nm}, {"native_res_m", b.native_res_m}});
    }
    manifest["samples"] = json::array();
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const PatchSample& s = dataset.samples[i];
        char name[32];
        std::snprintf(name, sizeof name, "%06zu.json", i);
        const std::string payload = std::string("patches/") + name;
        save_raster(sample_payload(dataset, s), dir / payload);
        manifest["samples"].push_back({{"region", s.region_id},
                                       {"x", s.x},
                                       {"y", s.y},
                                       {"transform", static_cast<int>(s.transform)},
                                       {"R", s.change_ratio},
                                       {"label", label_classification(s.patch.gt)},
                                       {"payload", payload}});
    }
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + (dir / "manifest.json").string());
    }
    out << manifest.dump(2) << "\n";
}

Dataset read_dataset(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw IoError("cannot open dataset manifest " + manifest_path.string());
    }
    Dataset dataset;
    try {
        const json manifest = json::parse(in);
        const json& cfg = manifest.at("config");
        dataset.config.crop_size = cfg.at("crop_size").get<std::size_t>();
        dataset.config.crops_per_region = cfg.at("crops_per_region").get<std::size_t>();
        dataset.config.ratio_threshold = cfg.at("ratio_threshold").get<double>();
        dataset.config.seed = cfg.at("seed").get<std::uint64_t>();
        dataset.dtype = parse_sample_type(manifest.at("dtype").get<std::string>());
        for (const json& b : manifest.at("bands")) {
            dataset.bands.push_back({b.at("id").get<std::string>(), b.value("wavelength_nm", 0.0),
                                     b.value("native_res_m", 10)});
        }
        const fs::path root = manifest_path.parent_path();
        const std::size_t c = dataset.bands.size();
        for (const json& entry : manifest.at("samples")) {
            PatchSample s;
            s.region_id = entry.at("region").get<std::string>();
            s.x = entry.at("x").get<std::size_t>();
            s.y = entry.at("y").get<std::size_t>();
            s.transform = transform_from_id(entry.at("transform").get<int>());
            s.change_ratio = entry.at("R").get<double>();
            const MultibandRaster payload = load_raster(root / entry.at("payload").get<std::string>());
            if (payload.band_count() != 2 * c + 1 || payload.width != payload.height) {
                throw FormatError("payload for sample at (" + std::to_string(s.x) + "," + std::to_string(s.y) +
                                  ") in region " + s.region_id + " does not match the manifest band layout");
            }
            const std::size_t size = payload.width, pixels = size * size;
            s.patch.size = size;
            s.patch.channels = c;
            s.patch.pre.resize(pixels * c);
            s.patch.post.resize(pixels * c);
            for (std::size_t b = 0; b < c; ++b) {
                for (std::size_t p = 0; p < pixels; ++p) {
                    s.patch.pre[p * c + b] = payload.bands[b][p];
                    s.patch.post[p * c + b] = payload.bands[c + b][p];
                }
            }
            s.patch.gt.resize(pixels);
            for (std::size_t p = 0; p < pixels; ++p) {
                const float v = payload.bands[2 * c][p];
                if (v != 0.0f && v != 1.0f) {
                    throw ValidationError("non-binary ground truth in payload for region " + s.region_id);
                }
                s.patch.gt[p] = static_cast<std::uint8_t>(v);
            }
            dataset.samples.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw FormatError("dataset manifest " + manifest_path.string() + ": " + e.what());
    }
    return dataset;
}

void write_folds(const FoldAssignment& folds, std::uint64_t seed, const fs::path& path) {
    json out;
    out["k"] = folds.k;
    out["seed"] = seed;
    out["n"] = folds.fold_of.size();
    out["fold_sizes"] = folds.fold_sizes();
    out["assignment"] = folds.fold_of;
    std::ofstream file(path, std::ios::trunc);
    if (!file) {
        throw IoError("cannot write " + path.string());
    }
    file << out.dump() << "\n";
}

FoldAssignment read_folds(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open fold assignment " + path.string());
    }
    try {
        const json j = json::parse(in);
        FoldAssignment folds;
        folds.k = j.at("k").get<std::size_t>();
        folds.fold_of = j.at("assignment").get<std::vector<std::size_t>>();
        for (std::size_t f : folds.fold_of) {
            if (f >= folds.k) throw FormatError("fold index out of range in " + path.string());
        }
        return folds;
    } catch (const json::exception& e) {
        throw FormatError("fold assignment " + path.string() + ": " + e.what());
    }
}

}  // namespace deltascope
