#include "deltascope/raster_io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

#include "deltascope/errors.hpp"

namespace deltascope {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::size_t sample_size(SampleType type) { return type == SampleType::u16 ? 2 : 4; }

std::vector<char> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw IoError("write failed for " + path.string());
    }
}

void put_le(std::string& out, std::uint32_t value, std::size_t bytes) {
    for (std::size_t i = 0; i < bytes; ++i) {
        out.push_back(static_cast<char>((value >> (8 * i)) & 0xffu));
    }
}

std::uint32_t get_le(const char* p, std::size_t bytes) {
    std::uint32_t value = 0;
    for (std::size_t i = 0; i < bytes; ++i) {
        value |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    }
    return value;
}

json band_meta_json(const BandMeta& meta) {
    return {{"id", meta.id}, {"wavelength_nm", meta.wavelength_nm}, {"native_res_m", meta.native_res_m}};
}

}  // namespace

const char* sample_type_name(SampleType type) { return type == SampleType::u16 ? "u16" : "f32"; }

SampleType parse_sample_type(const std::string& name) {
    if (name == "u16") return SampleType::u16;
    if (name == "f32") return SampleType::f32;
    throw FormatError("unknown dtype '" + name + "' (expected u16 or f32)");
}

const std::vector<BandMeta>& sentinel2_bands() {
    static const std::vector<BandMeta> bands{
        {"B01", 442.7, 60},  {"B02", 492.4, 10},  {"B03", 559.8, 10},  {"B04", 664.6, 10},
        {"B05", 704.1, 20},  {"B06", 740.5, 20},  {"B07", 782.8, 20},  {"B08", 832.8, 10},
        {"B8A", 864.7, 20},  {"B09", 945.1, 60},  {"B10", 1373.5, 60}, {"B11", 1613.7, 20},
        {"B12", 2202.4, 20},
    };
    return bands;
}

void MultibandRaster::validate() const {
    if (width == 0 || height == 0) {
        throw FormatError("raster extents must be positive");
    }
    if (band_meta.size() != bands.size()) {
        throw FormatError("raster has " + std::to_string(bands.size()) + " bands but " +
                          std::to_string(band_meta.size()) + " band descriptors");
    }
    for (std::size_t b = 0; b < bands.size(); ++b) {
        if (bands[b].size() != width * height) {
            throw FormatError("band " + band_meta[b].id + " has " + std::to_string(bands[b].size()) +
                              " samples, expected " + std::to_string(width * height));
        }
        if (dtype == SampleType::u16) {
            for (float v : bands[b]) {
                if (!(v >= 0.0f && v <= 65535.0f) || v != std::floor(v)) {
                    throw FormatError("band " + band_meta[b].id + " holds a value not representable as u16");
                }
            }
        }
    }
}

MultibandRaster load_raster(const fs::path& header_path) {
    json header;
    try {
        std::ifstream in(header_path);
        if (!in) {
            throw IoError("cannot open raster header " + header_path.string());
        }
        header = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("malformed raster header " + header_path.string() + ": " + e.what());
    }

    MultibandRaster raster;
    std::string data_name;
    try {
        data_name = header.at("data").get<std::string>();
        raster.width = header.at("width").get<std::size_t>();
        raster.height = header.at("height").get<std::size_t>();
        raster.dtype = parse_sample_type(header.at("dtype").get<std::string>());
        for (const json& band : header.at("bands")) {
            raster.band_meta.push_back({band.at("id").get<std::string>(),
                                        band.value("wavelength_nm", 0.0), band.value("native_res_m", 10)});
        }
    } catch (const json::exception& e) {
        throw FormatError("raster header " + header_path.string() + ": " + e.what());
    }
    if (raster.width == 0 || raster.height == 0 || raster.band_meta.empty()) {
        throw FormatError("raster header " + header_path.string() + " declares an empty raster");
    }

    const fs::path payload_path = header_path.parent_path() / data_name;
    const std::vector<char> payload = read_file(payload_path);
    const std::size_t pixels = raster.width * raster.height;
    const std::size_t bytes_per = sample_size(raster.dtype);
    const std::size_t expected = pixels * raster.band_meta.size() * bytes_per;
    if (payload.size() != expected) {
        throw FormatError("payload " + payload_path.string() + ": expected " + std::to_string(expected) +
                          " bytes, got " + std::to_string(payload.size()));
    }

    raster.bands.assign(raster.band_meta.size(), std::vector<float>(pixels));
    const char* p = payload.data();
    for (auto& band : raster.bands) {
        for (float& v : band) {
            const std::uint32_t raw = get_le(p, bytes_per);
            v = raster.dtype == SampleType::u16 ? static_cast<float>(raw) : std::bit_cast<float>(raw);
            p += bytes_per;
        }
    }
    return raster;
}

void save_raster(const MultibandRaster& raster, const fs::path& header_path,
                 const std::string& payload_name) {
    raster.validate();
    const std::string data_name =
        payload_name.empty() ? header_path.stem().string() + ".raw" : payload_name;

    json header;
    header["width"] = raster.width;
    header["height"] = raster.height;
    header["dtype"] = sample_type_name(raster.dtype);
    header["bands"] = json::array();
    for (const BandMeta& meta : raster.band_meta) {
        header["bands"].push_back(band_meta_json(meta));
    }
    header["data"] = data_name;

    const std::size_t bytes_per = sample_size(raster.dtype);
    std::string payload;
    payload.reserve(raster.width * raster.height * raster.bands.size() * bytes_per);
    for (const auto& band : raster.bands) {
        for (float v : band) {
            const std::uint32_t raw = raster.dtype == SampleType::u16
                                          ? static_cast<std::uint32_t>(v)
                                          : std::bit_cast<std::uint32_t>(v);
            put_le(payload, raw, bytes_per);
        }
    }
    write_file(header_path.parent_path() / data_name, payload);
    write_file(header_path, header.dump(2) + "\n");
}

Plane upsample_band(const Plane& plane, int factor) {
    if (factor < 1) {
        throw ConfigError("upsample_band: factor must be positive");
    }
    const auto f = static_cast<std::size_t>(factor);
    Plane out{plane.width * f, plane.height * f, {}};
    out.values.resize(out.width * out.height);
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            out.values[y * out.width + x] = plane.values[(y / f) * plane.width + x / f];
        }
    }
    return out;
}

MultibandRaster harmonize_bands(const std::vector<Plane>& planes, const std::vector<BandMeta>& meta,
                                SampleType dtype) {
    if (planes.size() != meta.size() || planes.empty()) {
        throw FormatError("harmonize_bands: need one descriptor per plane");
    }
    MultibandRaster raster;
    raster.dtype = dtype;
    raster.band_meta = meta;
    for (std::size_t b = 0; b < planes.size(); ++b) {
        const int res = meta[b].native_res_m;
        if (res != 10 && res != 20 && res != 60) {
            throw FormatError("band " + meta[b].id + ": unsupported native resolution " + std::to_string(res));
        }
        Plane p = res == 10 ? planes[b] : upsample_band(planes[b], res / 10);
        if (b == 0) {
            raster.width = p.width;
            raster.height = p.height;
        } else if (p.width != raster.width || p.height != raster.height) {
            throw FormatError("band " + meta[b].id + " resamples to " + std::to_string(p.width) + "x" +
                              std::to_string(p.height) + ", expected " + std::to_string(raster.width) +
                              "x" + std::to_string(raster.height));
        }
        raster.bands.push_back(std::move(p.values));
    }
    raster.validate();
    return raster;
}

// ---------------------------------------------------------------------------

void ChangeMap::validate() const {
    if (values.size() != width * height) {
        throw ValidationError("change map holds " + std::to_string(values.size()) + " values, expected " +
                              std::to_string(width * height));
    }
    for (float v : values) {
        if (kind == ChangeMapKind::binary) {
            if (v != 0.0f && v != 1.0f) throw ValidationError("binary change map value outside {0,1}");
        } else if (!(v >= 0.0f && v <= 1.0f)) {
            throw ValidationError("change map value outside [0,1]");
        }
    }
}

std::uint8_t quantize_grey(double value) {
    const double scaled = std::floor(255.0 * value + 0.5);
    return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels) {
    std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    bytes.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
    write_file(path, bytes);
}

std::vector<std::uint8_t> read_pgm(const fs::path& path, std::size_t& width, std::size_t& height) {
    const std::vector<char> bytes = read_file(path);
    std::size_t pos = 0;
    auto next_token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        std::string token;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
            token.push_back(bytes[pos++]);
        }
        return token;
    };
    if (next_token() != "P5") {
        throw FormatError(path.string() + " is not a binary PGM (P5)");
    }
    try {
        width = std::stoul(next_token());
        height = std::stoul(next_token());
        if (std::stoul(next_token()) != 255) {
            throw FormatError(path.string() + ": only maxval 255 is supported");
        }
    } catch (const std::logic_error&) {
        throw FormatError(path.string() + ": malformed PGM header");
    }
    ++pos;  // single whitespace after maxval
    const std::size_t expected = width * height;
    if (bytes.size() < pos || bytes.size() - pos != expected) {
        throw FormatError(path.string() + ": expected " + std::to_string(expected) + " pixel bytes, got " +
                          std::to_string(bytes.size() >= pos ? bytes.size() - pos : 0));
    }
    return {bytes.begin() + static_cast<long>(pos), bytes.end()};
}

ChangeMapFiles save_change_map(const ChangeMap& map, const fs::path& base) {
    map.validate();
    ChangeMapFiles files;
    files.pgm = fs::path(base.string() + ".pgm");
    std::vector<std::uint8_t> grey(map.values.size());
    for (std::size_t i = 0; i < grey.size(); ++i) grey[i] = quantize_grey(map.values[i]);
    write_pgm(files.pgm, map.width, map.height, grey);

    if (map.kind == ChangeMapKind::probabilistic) {
        MultibandRaster raster;
        raster.width = map.width;
        raster.height = map.height;
        raster.dtype = SampleType::f32;
        raster.bands = {map.values};
        raster.band_meta = {{"change_probability", 0.0, 10}};
        files.sidecar = fs::path(base.string() + ".json");
        save_raster(raster, *files.sidecar, base.filename().string() + ".f32");
    }
    return files;
}

ChangeMap load_change_map(const fs::path& path, ChangeMapKind kind) {
    ChangeMap map;
    map.kind = kind;
    if (path.extension() == ".pgm") {
        const std::vector<std::uint8_t> grey = read_pgm(path, map.width, map.height);
        map.values.resize(grey.size());
        for (std::size_t i = 0; i < grey.size(); ++i) {
            map.values[i] = kind == ChangeMapKind::binary ? (grey[i] >= 128 ? 1.0f : 0.0f)
                                                          : static_cast<float>(grey[i] / 255.0);
        }
    } else {
        MultibandRaster raster = load_raster(path);
        if (raster.band_count() != 1) {
            throw FormatError(path.string() + ": a change map must have exactly one band");
        }
        map.width = raster.width;
        map.height = raster.height;
        map.values = std::move(raster.bands[0]);
    }
    map.validate();
    return map;
}

}  // namespace deltascope
