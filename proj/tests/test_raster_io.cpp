#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "deltascope/errors.hpp"
#include "deltascope/raster_io.hpp"
#include "deltascope/rng.hpp"
#include "test_support.hpp"

using namespace deltascope;
namespace fs = std::filesystem;

namespace {

MultibandRaster random_raster(SampleType dtype, std::size_t w, std::size_t h, std::size_t bands, Rng& rng) {
    MultibandRaster r;
    r.width = w;
    r.height = h;
    r.dtype = dtype;
    for (std::size_t b = 0; b < bands; ++b) {
        std::vector<float> plane(w * h);
        for (float& v : plane) {
            v = dtype == SampleType::u16 ? static_cast<float>(rng.uniform_int(65536))
                                         : std::bit_cast<float>(static_cast<std::uint32_t>(rng.next_u64()));
        }
        r.bands.push_back(std::move(plane));
        r.band_meta.push_back(sentinel2_bands()[b % 13]);
    }
    return r;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("sentinel-2 band table") {
    const auto& bands = sentinel2_bands();
    REQUIRE(bands.size() == 13);
    CHECK(bands[0].wavelength_nm == 442.7);
    CHECK(bands[0].native_res_m == 60);
    CHECK(bands[1].native_res_m == 10);
    CHECK(bands[8].id == "B8A");
    CHECK(bands[12].wavelength_nm == 2202.4);
    CHECK(std::count_if(bands.begin(), bands.end(), [](const BandMeta& b) { return b.native_res_m == 10; }) == 4);
    CHECK(std::count_if(bands.begin(), bands.end(), [](const BandMeta& b) { return b.native_res_m == 20; }) == 6);
    CHECK(std::count_if(bands.begin(), bands.end(), [](const BandMeta& b) { return b.native_res_m == 60; }) == 3);
}

TEST_CASE("load_raster reads a hand-written u16 file") {
    TempDir dir;
    {
        std::ofstream payload(dir.path / "tiny.raw", std::ios::binary);
        const unsigned char bytes[] = {1, 0, 2, 0, 3, 0, 4, 0};
        payload.write(reinterpret_cast<const char*>(bytes), sizeof bytes);
        std::ofstream header(dir.path / "tiny.json");
        header << R"({"width":2,"height":2,"dtype":"u16","bands":[{"id":"B02","wavelength_nm":492.4,"native_res_m":10}],"data":"tiny.raw"})";
    }
    MultibandRaster r = load_raster(dir.path / "tiny.json");
    CHECK(r.width == 2);
    CHECK(r.height == 2);
    REQUIRE(r.band_count() == 1);
    CHECK(r.bands[0] == std::vector<float>{1, 2, 3, 4});
    CHECK(r.at(0, 1, 0) == 2.0f);
    CHECK(r.band_meta[0].id == "B02");
}

TEST_CASE("save/load round trip is bit-exact for both dtypes") {
    TempDir dir;
    Rng rng(42);
    for (int trial = 0; trial < 6; ++trial) {
        const SampleType dtype = trial % 2 ? SampleType::f32 : SampleType::u16;
        MultibandRaster r = random_raster(dtype, 3 + rng.uniform_int(9), 2 + rng.uniform_int(9),
                                          1 + rng.uniform_int(13), rng);
        const fs::path path = dir.path / ("r" + std::to_string(trial) + ".json");
        save_raster(r, path);
        MultibandRaster back = load_raster(path);
        CHECK(back.width == r.width);
        CHECK(back.height == r.height);
        CHECK(back.dtype == r.dtype);
        REQUIRE(back.band_count() == r.band_count());
        for (std::size_t b = 0; b < r.band_count(); ++b) {
            CHECK(bit_equal(back.bands[b], r.bands[b]));
            CHECK(back.band_meta[b].id == r.band_meta[b].id);
        }
        // save . load reproduces the payload bytes
        const fs::path again = dir.path / ("again" + std::to_string(trial) + ".json");
        save_raster(back, again);
        CHECK(read_bytes(path.parent_path() / (path.stem().string() + ".raw")) ==
              read_bytes(again.parent_path() / (again.stem().string() + ".raw")));
    }
}

TEST_CASE("full-size 13 band scene header") {
    TempDir dir;
    MultibandRaster r;
    r.width = 600;
    r.height = 600;
    r.dtype = SampleType::u16;
    r.band_meta = sentinel2_bands();
    r.bands.assign(13, std::vector<float>(600 * 600, 1234.0f));
    save_raster(r, dir.path / "scene.json");
    MultibandRaster back = load_raster(dir.path / "scene.json");
    CHECK(back.band_count() == 13);
    for (const auto& band : back.bands) CHECK(band.size() == 600u * 600u);
}

TEST_CASE("load_raster format errors") {
    TempDir dir;
    Rng rng(1);
    MultibandRaster r = random_raster(SampleType::u16, 4, 4, 2, rng);
    save_raster(r, dir.path / "x.json");

    SUBCASE("truncated payload names the byte counts") {
        fs::resize_file(dir.path / "x.raw", 60);
        try {
            load_raster(dir.path / "x.json");
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            const std::string what = e.what();
            CHECK(what.find("expected 64 bytes") != std::string::npos);
            CHECK(what.find("got 60") != std::string::npos);
        }
    }
    SUBCASE("unknown dtype") {
        std::ofstream(dir.path / "bad.json")
            << R"({"width":4,"height":4,"dtype":"u8","bands":[{"id":"a"}],"data":"x.raw"})";
        CHECK_THROWS_AS(load_raster(dir.path / "bad.json"), FormatError);
    }
    SUBCASE("malformed json") {
        std::ofstream(dir.path / "broken.json") << "{width:";
        CHECK_THROWS_AS(load_raster(dir.path / "broken.json"), FormatError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_raster(dir.path / "nope.json"), Error);
    }
}

TEST_CASE("upsample_band") {
    Plane one{1, 1, {1.0f}};
    Plane up = upsample_band(one, 2);
    CHECK(up.width == 2);
    CHECK(up.height == 2);
    CHECK(up.values == std::vector<float>{1, 1, 1, 1});

    Plane constant{5, 3, std::vector<float>(15, 7.0f)};
    for (float v : upsample_band(constant, 6).values) CHECK(v == 7.0f);

    Plane coarse{300, 300, std::vector<float>(300 * 300)};
    Rng rng(9);
    for (float& v : coarse.values) v = static_cast<float>(rng.uniform_int(50));
    Plane fine = upsample_band(coarse, 2);
    CHECK(fine.width == 600);
    CHECK(fine.height == 600);
    // value multiset support, min and max preserved
    CHECK(std::set<float>(fine.values.begin(), fine.values.end()) ==
          std::set<float>(coarse.values.begin(), coarse.values.end()));
    CHECK(*std::min_element(fine.values.begin(), fine.values.end()) ==
          *std::min_element(coarse.values.begin(), coarse.values.end()));
    CHECK(*std::max_element(fine.values.begin(), fine.values.end()) ==
          *std::max_element(coarse.values.begin(), coarse.values.end()));
    // block replication
    CHECK(fine.at(5, 7) == coarse.at(2, 3));

    TempDir dir;
    MultibandRaster r;
    r.width = 600;
    r.height = 600;
    r.dtype = SampleType::u16;
    r.bands = {fine.values};
    r.band_meta = {sentinel2_bands()[4]};
    save_raster(r, dir.path / "b05.json");
    CHECK(load_raster(dir.path / "b05.json").bands[0] == fine.values);
}

TEST_CASE("harmonize_bands aligns all 13 bands on the 10 m grid") {
    std::vector<Plane> planes;
    for (const BandMeta& meta : sentinel2_bands()) {
        const std::size_t side = 60 * 10 / static_cast<std::size_t>(meta.native_res_m);
        planes.push_back({side, side, std::vector<float>(side * side, static_cast<float>(meta.native_res_m))});
    }
    MultibandRaster r = harmonize_bands(planes, sentinel2_bands(), SampleType::u16);
    CHECK(r.width == 60);
    CHECK(r.height == 60);
    REQUIRE(r.band_count() == 13);
    for (const auto& band : r.bands) CHECK(band.size() == 3600u);
    CHECK(r.at(0, 59, 59) == 60.0f);

    planes[4] = {7, 7, std::vector<float>(49, 1.0f)};
    CHECK_THROWS_AS(harmonize_bands(planes, sentinel2_bands(), SampleType::u16), FormatError);
}

TEST_CASE("change map writing") {
    TempDir dir;
    SUBCASE("binary pixel 1 becomes byte 255") {
        ChangeMap map{2, 1, {1.0f, 0.0f}, ChangeMapKind::binary};
        ChangeMapFiles files = save_change_map(map, dir.path / "bin");
        CHECK_FALSE(files.sidecar.has_value());
        std::size_t w = 0, h = 0;
        auto grey = read_pgm(files.pgm, w, h);
        CHECK(w == 2);
        CHECK(h == 1);
        CHECK(grey == std::vector<std::uint8_t>{255, 0});
        const auto bytes = read_bytes(files.pgm);
        CHECK(std::string(bytes.begin(), bytes.begin() + 3) == "P5\n");
        ChangeMap back = load_change_map(files.pgm, ChangeMapKind::binary);
        CHECK(back.values == map.values);
    }
    SUBCASE("coarse zero probability is black") {
        ChangeMap map{4, 4, std::vector<float>(16, 0.0f), ChangeMapKind::coarse};
        std::size_t w = 0, h = 0;
        for (auto v : read_pgm(save_change_map(map, dir.path / "coarse").pgm, w, h)) CHECK(v == 0);
    }
    SUBCASE("quantization rounds half up") {
        CHECK(quantize_grey(0.5) == 128);
        CHECK(quantize_grey(0.0) == 0);
        CHECK(quantize_grey(1.0) == 255);
        CHECK(quantize_grey(0.3) == 77);
    }
    SUBCASE("probabilistic maps round trip bit-exactly through the f32 sidecar") {
        Rng rng(5);
        ChangeMap map{7, 5, std::vector<float>(35), ChangeMapKind::probabilistic};
        for (float& v : map.values) v = static_cast<float>(rng.uniform());
        map.values[3] = 1.0f;
        ChangeMapFiles files = save_change_map(map, dir.path / "prob");
        REQUIRE(files.sidecar.has_value());
        CHECK(fs::exists(dir.path / "prob.f32"));
        ChangeMap back = load_change_map(*files.sidecar);
        CHECK(bit_equal(back.values, map.values));
        CHECK(back.width == 7);
    }
    SUBCASE("invalid maps are rejected") {
        ChangeMap bad{1, 1, {0.5f}, ChangeMapKind::binary};
        CHECK_THROWS_AS(save_change_map(bad, dir.path / "bad"), ValidationError);
        ChangeMap out_of_range{1, 1, {1.5f}, ChangeMapKind::probabilistic};
        CHECK_THROWS_AS(save_change_map(out_of_range, dir.path / "bad2"), ValidationError);
    }
}
