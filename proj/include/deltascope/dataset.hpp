#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "deltascope/raster_io.hpp"

namespace deltascope {

/// A pair needs at least this many changed pixels to be labelled "changed"
/// for the classification task.
inline constexpr std::size_t kMinChangedPixelsForLabel = 25;

struct PatchExtractionConfig {
    std::size_t crop_size = 128;
    std::size_t crops_per_region = 500;
    double ratio_threshold = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

/// The six augmentations. Rotations are counter-clockwise; rot360 is the identity.
enum class Transform : int {
    rot90 = 0,
    rot180 = 1,
    rot270 = 2,
    rot360 = 3,
    flip_vertical = 4,
    flip_horizontal = 5,
};
inline constexpr int kTransformCount = 6;

const char* transform_name(Transform t);
Transform transform_from_id(int id);

/// Pre/post patches (size x size x channels, channels interleaved) and the
/// matching binary ground-truth patch (size x size).
struct PatchTriplet {
    std::size_t size = 0;
    std::size_t channels = 0;
    std::vector<float> pre;
    std::vector<float> post;
    std::vector<std::uint8_t> gt;
};

struct PatchSample {
    std::string region_id;
    std::size_t x = 0;
    std::size_t y = 0;
    Transform transform = Transform::rot360;
    double change_ratio = 0.0;
    PatchTriplet patch;
};

/// One co-registered bitemporal scene with its binary change map.
struct ScenePair {
    std::string region_id;
    MultibandRaster pre;
    MultibandRaster post;
    Plane gt;
};

/// Fraction of changed pixels. Throws ValidationError on non-binary input.
double compute_change_ratio(std::span<const std::uint8_t> gt);
double compute_change_ratio(const Plane& gt);

/// Applies `t` to a row-major size x size grid with `channels` interleaved values per cell.
template <typename T>
std::vector<T> transform_grid(const std::vector<T>& src, std::size_t size, std::size_t channels, Transform t) {
    const std::size_t a = size;
    std::vector<T> dst(src.size());
    for (std::size_t r = 0; r < a; ++r) {
        for (std::size_t c = 0; c < a; ++c) {
            std::size_t sr = r, sc = c;
            switch (t) {
                case Transform::rot90: sr = c; sc = a - 1 - r; break;
                case Transform::rot180: sr = a - 1 - r; sc = a - 1 - c; break;
                case Transform::rot270: sr = a - 1 - c; sc = r; break;
                case Transform::rot360: break;
                case Transform::flip_vertical: sr = a - 1 - r; break;
                case Transform::flip_horizontal: sc = a - 1 - c; break;
            }
            std::copy_n(src.begin() + static_cast<long>((sr * a + sc) * channels), channels,
                        dst.begin() + static_cast<long>((r * a + c) * channels));
        }
    }
    return dst;
}

/// Same transform on pre, post and gt.
PatchTriplet apply_transform(const PatchTriplet& patch, Transform t);

/// Crops `patch.size` pixels at (x, y) from all three layers of `scene`.
PatchTriplet crop_patch(const ScenePair& scene, std::size_t x, std::size_t y, std::size_t size);

/// Random crops with ratio-dependent augmentation: below the threshold one
/// sample with a uniformly drawn transform, otherwise one sample per transform.
/// Draws come from a substream keyed by region id, so results do not depend on
/// the order regions are processed in.
std::vector<PatchSample> extract_patches(const ScenePair& scene, const PatchExtractionConfig& cfg);

/// Drops later samples whose (region, origin, transform) key was already seen.
std::vector<PatchSample> dedup(std::vector<PatchSample> samples);

/// 0 when fewer than 25 pixels changed, otherwise 1.
int label_classification(std::span<const std::uint8_t> gt);

struct FoldAssignment {
    std::size_t k = 5;
    std::vector<std::size_t> fold_of;  // sample index -> fold index

    std::vector<std::size_t> members(std::size_t fold) const;
    std::vector<std::size_t> complement(std::size_t fold) const;
    std::vector<std::size_t> fold_sizes() const;
};

/// Seeded permutation of 0..n-1 cut into k contiguous folds whose sizes differ by at most one.
FoldAssignment kfold_split(std::size_t n, std::size_t k, std::uint64_t seed);

/// Reflectance scaling for network inputs: u16 digital numbers are divided by
/// 10000, then everything is clamped to [0, 1].
float normalize_reflectance(float value, SampleType dtype);

/// An extracted dataset with the metadata needed to persist it.
struct Dataset {
    PatchExtractionConfig config;
    SampleType dtype = SampleType::u16;
    std::vector<BandMeta> bands;
    std::vector<PatchSample> samples;
};

/// Extracts every scene (in parallel up to `jobs` workers), concatenates in
/// scene order and removes duplicates.
Dataset build_dataset(const std::vector<ScenePair>& scenes, const PatchExtractionConfig& cfg,
                      std::size_t jobs = 1);

/// Writes `<dir>/manifest.json` and one raster payload per sample under `<dir>/patches/`.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& manifest_path);

void write_folds(const FoldAssignment& folds, std::uint64_t seed, const std::filesystem::path& path);
FoldAssignment read_folds(const std::filesystem::path& path);

}  // namespace deltascope
