#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "json.hpp"

#include "deltascope/evaluation.hpp"
#include "deltascope/models.hpp"
#include "deltascope/raster_io.hpp"

namespace deltascope {

struct TileOrigin {
    std::size_t x = 0;
    std::size_t y = 0;

    bool operator==(const TileOrigin&) const = default;
};

/// Square tiles covering a scene, row-major. The last row and column are
/// pulled inward so they end flush with the border, overlapping their
/// neighbours when the extent is not a multiple of the tile size.
struct TileGrid {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t tile_size = 128;
    std::vector<TileOrigin> origins;
};

/// Tile offsets along one axis of length `extent`.
std::vector<std::size_t> axis_origins(std::size_t extent, std::size_t tile_size);

/// Throws DimensionError when the scene is smaller than one tile.
TileGrid tile_scene(std::size_t width, std::size_t height, std::size_t tile_size = 128);

/// Copies the tile at `origin` out of a row-major plane.
std::vector<float> cut_tile(const std::vector<float>& plane, std::size_t width, TileOrigin origin,
                            std::size_t tile_size);

/// Mosaics per-tile change probabilities (tile_size^2 each, in grid order),
/// averaging wherever tiles overlap.
ChangeMap stitch_segmentation(const std::vector<std::vector<float>>& tiles, const TileGrid& grid);

/// Paints each tile's pair score over its footprint, averaging overlaps. The
/// grey level is applied when the map is written.
ChangeMap coarse_classification_map(const std::vector<double>& scores, const TileGrid& grid);

/// 1 where the value is strictly above the threshold.
ChangeMap binarize(const ChangeMap& map, double threshold = 0.3);

struct BoundingBox {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive corners
};

/// 8-connected components of a binary map. Ids start at 1 and follow the
/// row-major position of each component's first pixel; 0 is background.
struct ComponentLabeling {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint32_t> labels;
    std::vector<std::size_t> sizes;  // sizes[id - 1]
    std::vector<BoundingBox> boxes;  // boxes[id - 1]

    std::size_t count() const { return sizes.size(); }
};

ComponentLabeling label_components(const ChangeMap& binary);

/// Drops components smaller than `min_pixels`; the rest are kept as they are.
ChangeMap min_area_filter(const ComponentLabeling& labeling, std::size_t min_pixels = 16);

/// [{id, size_px, bbox: {x0, y0, x1, y1}}]
nlohmann::json components_json(const ComponentLabeling& labeling);

/// Component-level agreement between a predicted and a reference map.
/// Predicted components are visited largest first (ties by id); each takes
/// the unmatched reference component it overlaps most (ties by id) and counts
/// as a TP, or as an FP when none is left. Unmatched reference components are
/// FNs. There are no true negatives at this level, so tn stays 0.
ConfusionCounts detect_changes_report(const ChangeMap& predicted, const ChangeMap& truth);

/// Precision, recall and F1 of component counts. Balanced accuracy is left
/// empty since it needs true negatives.
MetricsReport component_metrics(const ConfusionCounts& counts);

/// Runs `model` over every tile of a scene pair (infer mode, up to `jobs`
/// workers). Segmentation models give a probabilistic map, EF-CNN a coarse map.
/// A band count that differs from the model's input channels is a ConfigError.
ChangeMap predict_scene(const Model& model, const MultibandRaster& pre, const MultibandRaster& post,
                        std::size_t jobs = 1);

}  // namespace deltascope
