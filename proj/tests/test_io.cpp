#include <gtest/gtest.h>

#include <sstream>

#include "tweezersim/io.hpp"

using namespace tweezersim;
using namespace tweezersim::io;

TEST(Csv, HeaderAndRows)
{
    CsvWriter csv({"a_um", "b"});
    csv.row({1.5, 2});
    csv.row({-0.25, 1e-20});
    std::ostringstream os;
    csv.write(os);
    EXPECT_EQ(os.str(), "a_um,b\n1.5,2\n-0.25,1e-20\n");
}

TEST(Csv, RowWidthChecked)
{
    CsvWriter csv({"a", "b"});
    EXPECT_THROW(csv.row({1.0}), InvalidArgument);
}

TEST(Csv, NumberFormatting)
{
    EXPECT_EQ(num(0.1), "0.1");
    EXPECT_EQ(num(1.0 / 3), "0.3333333333");
    EXPECT_EQ(num(std::nan("")), "nan");
    EXPECT_EQ(num(2.5e-7), "2.5e-07");
}

TEST(Json, IntensityMapRoundTrip)
{
    diffraction::IntensityMap map;
    map.size = 4;
    map.grid_spacing = 0.1e-6;
    map.defocus = 1e-6;
    map.expected_flux = 3.0;
    for (int i = 0; i < 16; ++i)
        map.samples.push_back(i * 0.5);
    const auto j = to_json(map);
    EXPECT_EQ(j["metadata"]["schema_version"], kSchemaVersion);
    EXPECT_EQ(j["grid"]["origin_index"], 2);
    EXPECT_EQ(j["samples"][1][3], map(3, 1));
    const auto back = intensity_map_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(back.samples, map.samples);
    EXPECT_EQ(back.size, map.size);
    EXPECT_DOUBLE_EQ(back.grid_spacing, map.grid_spacing);
    EXPECT_DOUBLE_EQ(back.defocus, map.defocus);
    EXPECT_EQ(back.normalization, map.normalization);
}

TEST(Json, MalformedMapRejected)
{
    diffraction::IntensityMap map;
    map.size = 2;
    map.grid_spacing = 1;
    map.samples = {1, 2, 3, 4};
    auto j = to_json(map);
    j["samples"].erase(1);
    EXPECT_THROW(intensity_map_from_json(j), InvalidArgument);
}

TEST(Json, TrapUnits)
{
    trap::TrapCharacteristics t;
    t.depth = 1.380649e-26; // 1 mK
    t.waist = 1e-6;
    t.wavelength = 850e-9;
    t.radial_frequency = 2 * constants::pi * 1e5;
    const auto j = to_json(t);
    EXPECT_NEAR(j["depth_mK"].get<double>(), 1.0, 1e-12);
    EXPECT_NEAR(j["waist_um"].get<double>(), 1.0, 1e-12);
    EXPECT_NEAR(j["omega_r_kHz"].get<double>(), 100.0, 1e-9);
}

TEST(Pgm, AsciiLayout)
{
    detection::Image img{3, 2, {0, 1.4, 2.6, -1, 5, 7}};
    EXPECT_EQ(to_pgm(img), "P2\n3 2\n7\n0 1 3\n0 5 7\n");
}

TEST(Csv, HistogramWithOccupancy)
{
    const std::vector<std::int64_t> counts{1, 1, 3};
    const std::vector<double> occ{0, 0.5, 1};
    const auto h = detection::make_histogram(counts, occ);
    std::ostringstream os;
    histogram_csv(h).write(os);
    EXPECT_EQ(os.str(), "counts_low,counts_high,frequency,mean_occupancy\n"
                        "0,1,0,nan\n1,2,2,0.25\n2,3,0,nan\n3,4,1,1\n");
}

TEST(Csv, TraceColumns)
{
    detection::OccupancyTrace t;
    t.duration = 2;
    t.events = {{0, 0}, {0.5, 1}};
    std::ostringstream os;
    trace_csv(t).write(os);
    EXPECT_EQ(os.str(), "time_s,occupancy\n0,0\n0.5,1\n");
}
