#include "deltascope/scene_mapper.hpp"

#include <algorithm>
#include <array>
#include <deque>
#include <map>
#include <numeric>
#include <string>

#include "deltascope/dataset.hpp"
#include "deltascope/errors.hpp"
#include "deltascope/parallel.hpp"

namespace deltascope {

std::vector<std::size_t> axis_origins(std::size_t extent, std::size_t tile_size) {
    if (tile_size == 0) throw UsageError("tile size must be positive");
    if (extent < tile_size) {
        throw DimensionError("scene extent " + std::to_string(extent) + " is smaller than the tile size " +
                             std::to_string(tile_size));
    }
    std::vector<std::size_t> origins;
    for (std::size_t o = 0; o + tile_size <= extent; o += tile_size) origins.push_back(o);
    if (origins.back() + tile_size < extent) origins.push_back(extent - tile_size);
    return origins;
}

TileGrid tile_scene(std::size_t width, std::size_t height, std::size_t tile_size) {
    TileGrid grid{width, height, tile_size, {}};
    const auto xs = axis_origins(width, tile_size);
    const auto ys = axis_origins(height, tile_size);
    for (std::size_t y : ys) {
        for (std::size_t x : xs) grid.origins.push_back({x, y});
    }
    return grid;
}

std::vector<float> cut_tile(const std::vector<float>& plane, std::size_t width, TileOrigin origin,
                            std::size_t tile_size) {
    std::vector<float> tile(tile_size * tile_size);
    for (std::size_t r = 0; r < tile_size; ++r) {
        const auto row = plane.begin() + static_cast<std::ptrdiff_t>((origin.y + r) * width + origin.x);
        std::copy(row, row + static_cast<std::ptrdiff_t>(tile_size), tile.begin() + static_cast<std::ptrdiff_t>(r * tile_size));
    }
    return tile;
}

namespace {

// Accumulates per-tile values and averages where footprints overlap.
template <typename ValueAt>
ChangeMap mosaic(const TileGrid& grid, std::size_t tiles, ChangeMapKind kind, ValueAt value_at) {
    if (tiles != grid.origins.size()) {
        throw DimensionError("expected " + std::to_string(grid.origins.size()) + " tiles, got " +
                             std::to_string(tiles));
    }
    const std::size_t t = grid.tile_size;
    std::vector<double> sum(grid.width * grid.height, 0.0);
    std::vector<unsigned> hits(grid.width * grid.height, 0);
    for (std::size_t i = 0; i < tiles; ++i) {
        const TileOrigin o = grid.origins[i];
        for (std::size_t r = 0; r < t; ++r) {
            for (std::size_t c = 0; c < t; ++c) {
                const std::size_t at = (o.y + r) * grid.width + o.x + c;
                sum[at] += value_at(i, r * t + c);
                hits[at] += 1;
            }
        }
    }
    ChangeMap map{grid.width, grid.height, std::vector<float>(sum.size()), kind};
    for (std::size_t i = 0; i < sum.size(); ++i) {
        if (hits[i] == 0) throw DimensionError("tile grid leaves pixel " + std::to_string(i) + " uncovered");
        // a single contribution is copied as is so non-overlapping mosaics are exact
        map.values[i] = hits[i] == 1 ? static_cast<float>(sum[i]) : static_cast<float>(sum[i] / hits[i]);
    }
    map.validate();
    return map;
}

}  // namespace

ChangeMap stitch_segmentation(const std::vector<std::vector<float>>& tiles, const TileGrid& grid) {
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        if (tiles[i].size() != grid.tile_size * grid.tile_size) {
            throw DimensionError("tile " + std::to_string(i) + " holds " + std::to_string(tiles[i].size()) +
                                 " values");
        }
    }
    return mosaic(grid, tiles.size(), ChangeMapKind::probabilistic,
                  [&](std::size_t tile, std::size_t px) { return static_cast<double>(tiles[tile][px]); });
}

ChangeMap coarse_classification_map(const std::vector<double>& scores, const TileGrid& grid) {
    return mosaic(grid, scores.size(), ChangeMapKind::coarse,
                  [&](std::size_t tile, std::size_t) { return scores[tile]; });
}

ChangeMap binarize(const ChangeMap& map, double threshold) {
    // compared in float so a stored 0.3 is not above a threshold of 0.3
    const auto cut = static_cast<float>(threshold);
    ChangeMap out{map.width, map.height, std::vector<float>(map.values.size()), ChangeMapKind::binary};
    for (std::size_t i = 0; i < map.values.size(); ++i) out.values[i] = map.values[i] > cut ? 1.0f : 0.0f;
    return out;
}

ComponentLabeling label_components(const ChangeMap& binary) {
    if (binary.values.size() != binary.width * binary.height) throw DimensionError("change map extent mismatch");
    const std::size_t w = binary.width, h = binary.height;
    ComponentLabeling out{w, h, std::vector<std::uint32_t>(w * h, 0), {}, {}};
    std::deque<std::size_t> queue;
    for (std::size_t start = 0; start < w * h; ++start) {
        if (binary.values[start] == 0.0f || out.labels[start] != 0) continue;
        const auto id = static_cast<std::uint32_t>(out.sizes.size() + 1);
        BoundingBox box{start % w, start / w, start % w, start / w};
        std::size_t size = 0;
        out.labels[start] = id;
        queue.push_back(start);
        while (!queue.empty()) {
            const std::size_t at = queue.front();
            queue.pop_front();
            const std::size_t x = at % w, y = at / w;
            ++size;
            box.x0 = std::min(box.x0, x);
            box.x1 = std::max(box.x1, x);
            box.y0 = std::min(box.y0, y);
            box.y1 = std::max(box.y1, y);
            for (std::size_t ny = y == 0 ? 0 : y - 1; ny <= std::min(h - 1, y + 1); ++ny) {
                for (std::size_t nx = x == 0 ? 0 : x - 1; nx <= std::min(w - 1, x + 1); ++nx) {
                    const std::size_t n = ny * w + nx;
                    if (binary.values[n] != 0.0f && out.labels[n] == 0) {
                        out.labels[n] = id;
                        queue.push_back(n);
                    }
                }
            }
        }
        out.sizes.push_back(size);
        out.boxes.push_back(box);
    }
    return out;
}

ChangeMap min_area_filter(const ComponentLabeling& labeling, std::size_t min_pixels) {
    ChangeMap out{labeling.width, labeling.height, std::vector<float>(labeling.labels.size(), 0.0f),
                  ChangeMapKind::binary};
    for (std::size_t i = 0; i < labeling.labels.size(); ++i) {
        const std::uint32_t id = labeling.labels[i];
        if (id != 0 && labeling.sizes[id - 1] >= min_pixels) out.values[i] = 1.0f;
    }
    return out;
}

nlohmann::json components_json(const ComponentLabeling& labeling) {
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = 0; i < labeling.count(); ++i) {
        const BoundingBox& b = labeling.boxes[i];
        list.push_back({{"id", i + 1},
                        {"size_px", labeling.sizes[i]},
                        {"bbox", {{"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}}}});
    }
    return list;
}

ConfusionCounts detect_changes_report(const ChangeMap& predicted, const ChangeMap& truth) {
    if (predicted.width != truth.width || predicted.height != truth.height) {
        throw DimensionError("predicted map is " + std::to_string(predicted.width) + "x" +
                             std::to_string(predicted.height) + ", reference is " + std::to_string(truth.width) +
                             "x" + std::to_string(truth.height));
    }
    const ComponentLabeling pred = label_components(predicted);
    const ComponentLabeling ref = label_components(truth);

    // overlap[p][r]: pixels shared by predicted component p and reference component r
    std::vector<std::map<std::uint32_t, std::size_t>> overlap(pred.count());
    for (std::size_t i = 0; i < pred.labels.size(); ++i) {
        if (pred.labels[i] != 0 && ref.labels[i] != 0) ++overlap[pred.labels[i] - 1][ref.labels[i]];
    }
    std::vector<std::size_t> order(pred.count());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pred.sizes[a] > pred.sizes[b]; });

    std::vector<bool> matched(ref.count(), false);
    ConfusionCounts counts;
    for (std::size_t p : order) {
        std::uint32_t best = 0;
        std::size_t best_overlap = 0;
        for (const auto& [r, shared] : overlap[p]) {
            if (!matched[r - 1] && shared > best_overlap) {
                best = r;
                best_overlap = shared;
            }
        }
        if (best == 0) {
            ++counts.fp;
        } else {
            matched[best - 1] = true;
            ++counts.tp;
        }
    }
    counts.fn = static_cast<std::size_t>(std::count(matched.begin(), matched.end(), false));
    return counts;
}

MetricsReport component_metrics(const ConfusionCounts& counts) {
    MetricsReport report = metrics(counts);
    report.balanced_accuracy.reset();
    return report;
}

namespace {

Tensor tile_tensor(const MultibandRaster& raster, TileOrigin o, std::size_t t) {
    const std::size_t c = raster.band_count();
    std::vector<double> values(t * t * c);
    for (std::size_t r = 0; r < t; ++r) {
        for (std::size_t col = 0; col < t; ++col) {
            for (std::size_t b = 0; b < c; ++b) {
                values[(r * t + col) * c + b] = normalize_reflectance(raster.at(b, o.x + col, o.y + r), raster.dtype);
            }
        }
    }
    return Tensor::from({1, t, t, c}, std::move(values));
}

}  // namespace

ChangeMap predict_scene(const Model& model, const MultibandRaster& pre, const MultibandRaster& post,
                        std::size_t jobs) {
    const ModelSpec& spec = model.spec();
    if (pre.width != post.width || pre.height != post.height) {
        throw DimensionError("pre and post scenes differ in extent");
    }
    for (const MultibandRaster* r : {&pre, &post}) {
        if (r->band_count() != spec.input_channels) {
            throw ConfigError("scene has " + std::to_string(r->band_count()) + " bands but the model expects " +
                              std::to_string(spec.input_channels));
        }
    }
    const TileGrid grid = tile_scene(pre.width, pre.height, spec.patch_size);
    const std::size_t tiles = grid.origins.size(), t = spec.patch_size;
    const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, tiles));

    std::vector<std::vector<float>> maps(spec.segmentation() ? tiles : 0);
    std::vector<double> scores(spec.segmentation() ? 0 : tiles);
    parallel_for(workers, workers, [&](std::size_t worker) {
        Model local = model.clone();
        for (std::size_t i = worker; i < tiles; i += workers) {
            const Tensor out = local.predict(tile_tensor(pre, grid.origins[i], t), tile_tensor(post, grid.origins[i], t));
            if (!spec.segmentation()) {
                scores[i] = out.at(0);
                continue;
            }
            std::vector<float>& tile = maps[i];
            tile.resize(t * t);
            for (std::size_t px = 0; px < t * t; ++px) tile[px] = static_cast<float>(out.at(px * 2));
        }
    });
    return spec.segmentation() ? stitch_segmentation(maps, grid) : coarse_classification_map(scores, grid);
}

}  // namespace deltascope
