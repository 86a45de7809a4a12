#pragma once

// CSV / JSON / PGM serialization of simulation products.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp" // nlohmann/json, vendored

#include "tweezersim/atomdyn.hpp"
#include "tweezersim/detection.hpp"
#include "tweezersim/diffraction.hpp"
#include "tweezersim/error.hpp"
#include "tweezersim/trap.hpp"

namespace tweezersim::io {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

// Ten significant digits, C locale.
inline std::string num(double v)
{
    if (std::isnan(v))
        return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// CSV table with a header row; units belong in the column names.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    void row(std::span<const double> values)
    {
        require(values.size() == columns_.size(), "csv row width does not match header");
        rows_.emplace_back(values.begin(), values.end());
    }
    void row(std::initializer_list<double> values) { row(std::span<const double>(values.begin(), values.size())); }

    void write(std::ostream& os) const
    {
        for (std::size_t i = 0; i < columns_.size(); ++i)
            os << (i ? "," : "") << columns_[i];
        os << '\n';
        for (const auto& r : rows_) {
            for (std::size_t i = 0; i < r.size(); ++i)
                os << (i ? "," : "") << num(r[i]);
            os << '\n';
        }
    }

private:
    std::vector<std::string> columns_;
    std::vector<std::vector<double>> rows_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw InvalidArgument("cannot open " + path.string() + " for writing");
    out << text;
}

inline void write_csv(const std::filesystem::path& path, const CsvWriter& csv)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw InvalidArgument("cannot open " + path.string() + " for writing");
    csv.write(out);
}

inline void write_json(const std::filesystem::path& path, const json& j)
{
    write_text(path, j.dump(2) + "\n");
}

// --- diffraction ----------------------------------------------------------

inline json to_json(const diffraction::IntensityMap& map)
{
    json samples = json::array();
    for (std::size_t iy = 0; iy < map.size; ++iy) {
        json row = json::array();
        for (std::size_t ix = 0; ix < map.size; ++ix)
            row.push_back(map(ix, iy));
        samples.push_back(std::move(row));
    }
    return {{"metadata",
             {{"schema_version", kSchemaVersion},
              {"kind", "intensity_map"},
              {"normalization", diffraction::to_string(map.normalization)},
              {"defocus_m", map.defocus},
              {"expected_flux_m2", map.expected_flux}}},
            {"grid",
             {{"size", map.size},
              {"spacing_m", map.grid_spacing},
              {"origin_index", map.size / 2},
              {"layout", "samples[iy][ix], x = (ix - origin_index) * spacing_m"}}},
            {"samples", std::move(samples)}};
}

inline diffraction::IntensityMap intensity_map_from_json(const json& j)
{
    diffraction::IntensityMap map;
    map.size = j.at("grid").at("size").get<std::size_t>();
    map.grid_spacing = j.at("grid").at("spacing_m").get<double>();
    map.defocus = j.at("metadata").at("defocus_m").get<double>();
    map.expected_flux = j.at("metadata").at("expected_flux_m2").get<double>();
    map.normalization = j.at("metadata").at("normalization").get<std::string>() == "raw"
                            ? diffraction::Normalization::raw
                            : diffraction::Normalization::peak_unity_reference;
    const auto& rows = j.at("samples");
    require(rows.size() == map.size, "intensity map: row count mismatch");
    for (const auto& row : rows) {
        require(row.size() == map.size, "intensity map: column count mismatch");
        for (const auto& v : row)
            map.samples.push_back(v.get<double>());
    }
    return map;
}

inline CsvWriter intensity_map_csv(const diffraction::IntensityMap& map)
{
    CsvWriter csv({"x_um", "y_um", "intensity"});
    for (std::size_t iy = 0; iy < map.size; ++iy)
        for (std::size_t ix = 0; ix < map.size; ++ix)
            csv.row({map.coordinate(ix) * 1e6, map.coordinate(iy) * 1e6, map(ix, iy)});
    return csv;
}

inline json to_json(const diffraction::MtfCurve& curve)
{
    return {{"metadata", {{"schema_version", kSchemaVersion}, {"kind", "mtf"}, {"azimuth_rad", curve.azimuth}}},
            {"frequencies_per_m", curve.frequencies},
            {"values", curve.values}};
}

// --- trap -----------------------------------------------------------------

inline json to_json(const trap::TrapCharacteristics& t)
{
    const double khz = 1 / (constants::two_pi * 1e3);
    return {{"schema_version", kSchemaVersion},
            {"depth_J", t.depth},
            {"depth_mK", t.depth_millikelvin()},
            {"depth_MHz", t.depth_megahertz()},
            {"waist_um", t.waist * 1e6},
            {"wavelength_nm", t.wavelength * 1e9},
            {"rayleigh_range_um", t.rayleigh_range * 1e6},
            {"omega_r_kHz", t.radial_frequency * khz},
            {"omega_z_kHz", t.longitudinal_frequency * khz},
            {"delta1_THz", t.detuning_d1 / constants::two_pi * 1e-12},
            {"delta2_THz", t.detuning_d2 / constants::two_pi * 1e-12},
            {"units_note", "omega_*_kHz and delta*_THz are omega / 2pi"}};
}

// --- atom dynamics --------------------------------------------------------

inline CsvWriter recapture_csv(const atomdyn::RecaptureCurve& c)
{
    CsvWriter csv({"gap_us", "survival", "count", "trials"});
    for (std::size_t i = 0; i < c.gaps.size(); ++i)
        csv.row({c.gaps[i] * 1e6, c.survival[i], static_cast<double>(c.survivor_counts[i]),
                 static_cast<double>(c.trials_per_point)});
    return csv;
}

inline json to_json(const atomdyn::RecaptureCurve& c)
{
    json gaps_us = json::array();
    for (double g : c.gaps)
        gaps_us.push_back(g * 1e6);
    return {{"schema_version", kSchemaVersion}, {"gap_us", gaps_us}, {"survival", c.survival},
            {"count", c.survivor_counts},       {"trials", c.trials_per_point}};
}

inline json to_json(const atomdyn::DampedSineFit& f)
{
    const double khz = 1 / (constants::two_pi * 1e3);
    return {{"schema_version", kSchemaVersion},
            {"model", "offset + amplitude * exp(-t / damping_time) * sin(omega_fit * t + phase)"},
            {"parameters",
             {{"omega_fit_rad_s", f.angular_frequency},
              {"damping_time_s", f.damping_time},
              {"amplitude", f.amplitude},
              {"phase_rad", f.phase},
              {"offset", f.offset}}},
            {"covariance_diagonal",
             {{"omega_fit_rad_s", f.angular_frequency_error * f.angular_frequency_error},
              {"damping_time_s", f.damping_time_error * f.damping_time_error},
              {"amplitude", f.amplitude_error * f.amplitude_error},
              {"phase_rad", f.phase_error * f.phase_error},
              {"offset", f.offset_error * f.offset_error}}},
            {"atom_frequency_kHz", f.atom_frequency() * khz},
            {"atom_frequency_error_kHz", f.angular_frequency_error / 2 * khz},
            {"residual_rms", f.residual_rms}};
}

// --- detection ------------------------------------------------------------

inline CsvWriter trace_csv(const detection::OccupancyTrace& trace)
{
    CsvWriter csv({"time_s", "occupancy"});
    for (const auto& e : trace.events)
        csv.row({e.time, static_cast<double>(e.occupancy)});
    return csv;
}

inline CsvWriter counts_csv(const detection::CountSeries& s)
{
    CsvWriter csv({"bin_index", "counts"});
    for (std::size_t i = 0; i < s.counts.size(); ++i)
        csv.row({static_cast<double>(i), static_cast<double>(s.counts[i])});
    return csv;
}

inline CsvWriter histogram_csv(const detection::CountHistogram& h)
{
    const bool labels = !h.occupancy_labels.empty();
    std::vector<std::string> cols{"counts_low", "counts_high", "frequency"};
    if (labels)
        cols.emplace_back("mean_occupancy");
    CsvWriter csv(cols);
    for (std::size_t b = 0; b < h.frequencies.size(); ++b) {
        std::vector<double> row{h.bin_edges[b], h.bin_edges[b + 1], static_cast<double>(h.frequencies[b])};
        if (labels)
            row.push_back(h.occupancy_labels[b]);
        csv.row(row);
    }
    return csv;
}

// ASCII portable grey map; values rounded and clamped to [0, maxval].
inline std::string to_pgm(const detection::Image& img)
{
    long maxval = 1;
    std::vector<long> v(img.pixels.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = std::max(0L, std::lround(img.pixels[i]));
        maxval = std::max(maxval, v[i]);
    }
    maxval = std::min(maxval, 65535L);
    std::string out = "P2\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n" +
                      std::to_string(maxval) + "\n";
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            out += std::to_string(std::min(v[y * img.width + x], maxval));
            out += x + 1 < img.width ? ' ' : '\n';
        }
    }
    return out;
}

inline json to_json(const detection::SpotFit& fit)
{
    json spots = json::array();
    for (std::size_t i = 0; i < fit.spots.size(); ++i) {
        const auto& s = fit.spots[i];
        const auto& e = fit.errors[i];
        spots.push_back({{"x_um", s.x * 1e6},
                         {"y_um", s.y * 1e6},
                         {"waist_um", s.waist * 1e6},
                         {"photons", s.amplitude},
                         {"x_err_um", e.x * 1e6},
                         {"y_err_um", e.y * 1e6},
                         {"waist_err_um", e.waist * 1e6},
                         {"photons_err", e.amplitude}});
    }
    return {{"schema_version", kSchemaVersion},
            {"spots", spots},
            {"separation_um", fit.separation() * 1e6},
            {"background_level", fit.background_level},
            {"residual_rms", fit.residual_rms},
            {"degenerate", fit.degenerate}};
}

} // namespace tweezersim::io
