#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace deltascope {

enum class SampleType { u16, f32 };

const char* sample_type_name(SampleType type);
SampleType parse_sample_type(const std::string& name);

struct BandMeta {
    std::string id;
    double wavelength_nm = 0.0;
    int native_res_m = 10;
};

/// The thirteen Sentinel-2 MSI bands (S2A central wavelengths).
const std::vector<BandMeta>& sentinel2_bands();

/// Single band, row-major.
struct Plane {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> values;

    float at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

/// Georeference-free multiband image. Every band plane holds width*height
/// samples in row-major order. u16 samples are stored exactly in float.
struct MultibandRaster {
    std::size_t width = 0;
    std::size_t height = 0;
    SampleType dtype = SampleType::u16;
    std::vector<std::vector<float>> bands;
    std::vector<BandMeta> band_meta;

    std::size_t band_count() const { return bands.size(); }
    float at(std::size_t band, std::size_t x, std::size_t y) const {
        return bands[band][y * width + x];
    }
    Plane plane(std::size_t band) const { return {width, height, bands.at(band)}; }

    /// Throws FormatError when extents, band metadata or sample ranges disagree.
    void validate() const;
};

/// Reads a JSON sidecar and its little-endian, band-sequential payload.
MultibandRaster load_raster(const std::filesystem::path& header_path);

/// Writes `header_path` plus a payload next to it (default: same stem, ".raw").
void save_raster(const MultibandRaster& raster, const std::filesystem::path& header_path,
                 const std::string& payload_name = {});

/// Nearest-neighbour replication of each pixel into a factor x factor block.
/// Only factors 2 (20 m) and 6 (60 m) are meaningful for Sentinel-2 inputs.
Plane upsample_band(const Plane& plane, int factor);

/// Brings bands at native 20 m / 60 m resolution onto the 10 m grid so all
/// channels share one pixel lattice. Plane extents must equal the 10 m
/// extents divided by native_res_m / 10.
MultibandRaster harmonize_bands(const std::vector<Plane>& planes, const std::vector<BandMeta>& meta,
                                SampleType dtype);

// ---------------------------------------------------------------------------
// Change maps

enum class ChangeMapKind { probabilistic, binary, coarse };

struct ChangeMap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> values;
    ChangeMapKind kind = ChangeMapKind::probabilistic;

    float at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
    void validate() const;
};

/// Greyscale byte for a map value: round-half-up of 255 * v.
std::uint8_t quantize_grey(double value);

struct ChangeMapFiles {
    std::filesystem::path pgm;
    std::optional<std::filesystem::path> sidecar;  // probabilistic maps only
};

/// Writes `<base>.pgm` (P5, maxval 255). Probabilistic maps additionally get
/// a lossless `<base>.json` + `<base>.f32` pair in the raster sidecar format.
ChangeMapFiles save_change_map(const ChangeMap& map, const std::filesystem::path& base);

/// Loads a map from a raster sidecar (.json, lossless) or from a PGM, in which
/// case values are byte / 255.
ChangeMap load_change_map(const std::filesystem::path& path,
                          ChangeMapKind kind = ChangeMapKind::probabilistic);

void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, std::size_t& width,
                                   std::size_t& height);

}  // namespace deltascope
