#pragma once

// Figure experiments behind the command-line tool. Each command takes a
// fully resolved parameter object, writes its data files into a directory
// and returns a summary; run() adds parameter resolution and the manifest.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tweezersim/atomdyn.hpp"
#include "tweezersim/constants.hpp"
#include "tweezersim/detection.hpp"
#include "tweezersim/diffraction.hpp"
#include "tweezersim/error.hpp"
#include "tweezersim/io.hpp"
#include "tweezersim/trap.hpp"

namespace tweezersim::experiments {

using io::json;
namespace fs = std::filesystem;
using constants::pi;

enum class ParamType { number, integer, boolean, text };

struct ParamSpec {
    std::string key; // snake_case; the flag is --key-with-dashes
    ParamType type;
    json default_value;
    std::string help;

    std::string flag() const
    {
        std::string f = "--" + key;
        std::replace(f.begin(), f.end(), '_', '-');
        return f;
    }
};

struct Context {
    std::uint64_t seed = 1;
    unsigned threads = 1;
    fs::path out;
};

struct CommandOutput {
    std::vector<std::string> files;
    json summary = json::object();
};

using CommandFn = std::function<CommandOutput(const json& params, const Context& ctx)>;

struct Command {
    std::string name;
    std::string description;
    std::vector<ParamSpec> params;
    CommandFn run;
};

// ---------------------------------------------------------------------------
// Parameter handling
// ---------------------------------------------------------------------------

// Parses a flag value given as text.
inline json parse_value(const ParamSpec& spec, const std::string& text)
{
    auto fail = [&]() -> json { throw InvalidArgument(spec.flag() + ": cannot parse '" + text + "'"); };
    try {
        std::size_t used = 0;
        switch (spec.type) {
        case ParamType::number: {
            const double v = std::stod(text, &used);
            return used == text.size() ? json(v) : fail();
        }
        case ParamType::integer: {
            const long long v = std::stoll(text, &used);
            return used == text.size() ? json(v) : fail();
        }
        case ParamType::boolean:
            if (text == "true" || text == "1")
                return true;
            if (text == "false" || text == "0")
                return false;
            return fail();
        case ParamType::text:
            return text;
        }
    } catch (const std::logic_error&) {
        return fail();
    }
    return fail();
}

inline json check_type(const ParamSpec& spec, const json& v)
{
    const bool ok = (spec.type == ParamType::number && v.is_number()) ||
                    (spec.type == ParamType::integer && v.is_number_integer()) ||
                    (spec.type == ParamType::boolean && v.is_boolean()) ||
                    (spec.type == ParamType::text && v.is_string());
    if (!ok)
        throw InvalidArgument("parameter '" + spec.key + "' has the wrong type");
    return spec.type == ParamType::number ? json(v.get<double>()) : v;
}

// Defaults, overridden by the config file, overridden by flags. Unknown keys
// in either source are rejected.
inline json resolve_parameters(const Command& cmd, const json& from_file, const json& from_flags)
{
    json out = json::object();
    for (const auto& p : cmd.params)
        out[p.key] = check_type(p, p.default_value);
    for (const json* src : {&from_file, &from_flags}) {
        if (src->is_null())
            continue;
        if (!src->is_object())
            throw InvalidArgument("parameters must be a JSON object");
        for (const auto& [key, value] : src->items()) {
            auto it = std::find_if(cmd.params.begin(), cmd.params.end(), [&](const auto& p) { return p.key == key; });
            if (it == cmd.params.end())
                throw InvalidArgument("unknown parameter '" + key + "' for " + cmd.name);
            out[key] = check_type(*it, value);
        }
    }
    return out;
}

// "a:b:step" -> a, a+step, ... strictly below b.
inline std::vector<double> parse_range(const std::string& text)
{
    const auto c1 = text.find(':');
    const auto c2 = c1 == std::string::npos ? c1 : text.find(':', c1 + 1);
    if (c2 == std::string::npos)
        throw InvalidArgument("range must look like start:stop:step, got '" + text + "'");
    double a = 0, b = 0, h = 0;
    try {
        a = std::stod(text.substr(0, c1));
        b = std::stod(text.substr(c1 + 1, c2 - c1 - 1));
        h = std::stod(text.substr(c2 + 1));
    } catch (const std::logic_error&) {
        throw InvalidArgument("range must look like start:stop:step, got '" + text + "'");
    }
    require(h > 0 && b > a, "range needs stop > start and a positive step");
    const auto n = static_cast<std::size_t>(std::ceil((b - a) / h - 1e-9));
    require(n <= 100000, "range has too many points");
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = a + static_cast<double>(i) * h;
    return out;
}

namespace detail {

inline double num(const json& p, const char* key) { return p.at(key).get<double>(); }
inline long long integer(const json& p, const char* key) { return p.at(key).get<long long>(); }
inline std::size_t count(const json& p, const char* key, long long min)
{
    const long long v = integer(p, key);
    require(v >= min, std::string(key) + " must be at least " + std::to_string(min));
    return static_cast<std::size_t>(v);
}
inline std::string text(const json& p, const char* key) { return p.at(key).get<std::string>(); }

inline diffraction::Pupil pupil_from(const json& p, std::uint64_t screen_seed)
{
    diffraction::Pupil pupil;
    pupil.numerical_aperture = num(p, "na");
    pupil.wavelength = num(p, "wavelength_nm") * 1e-9;
    const std::string apod = text(p, "apodization");
    if (apod == "gaussian")
        pupil.apodization = diffraction::GaussianIllumination{num(p, "waist_over_radius")};
    else if (apod != "uniform")
        throw InvalidArgument("apodization must be 'uniform' or 'gaussian'");
    if (p.contains("rms_nm"))
        pupil.aberration.rms_wavefront = num(p, "rms_nm") * 1e-9;
    if (p.contains("coma_nm"))
        pupil.aberration.coma_coefficient = num(p, "coma_nm") * 1e-9;
    pupil.aberration.spherical_coefficient = num(p, "spherical_nm") * 1e-9;
    pupil.aberration.screen_seed = screen_seed;
    pupil.validate();
    return pupil;
}

inline std::vector<ParamSpec> pupil_params(bool with_asymmetric)
{
    std::vector<ParamSpec> v{
        {"na", ParamType::number, 0.5, "numerical aperture"},
        {"wavelength_nm", ParamType::number, 850.0, "wavelength"},
        {"apodization", ParamType::text, "uniform", "pupil illumination: uniform | gaussian"},
        {"waist_over_radius", ParamType::number, 1.0, "Gaussian illumination waist / pupil radius"},
        {"spherical_nm", ParamType::number, 0.0, "spherical aberration coefficient (rho^4)"},
    };
    if (with_asymmetric) {
        v.push_back({"coma_nm", ParamType::number, 0.0, "coma coefficient (rho^3 cos phi)"});
        v.push_back({"rms_nm", ParamType::number, 0.0, "rms of a random wavefront screen (seeded by --seed)"});
    }
    return v;
}

inline std::pair<trap::TrapBeam, trap::TrapCharacteristics> trap_from(const json& p,
                                                                      const trap::AtomSpecies& species)
{
    const double power = num(p, "power_mw") * 1e-3;
    const double lambda = num(p, "wavelength_nm") * 1e-9;
    const double waist = num(p, "waist_um") * 1e-6;
    if (waist > 0) {
        trap::TrapBeam beam{power, waist, lambda};
        return {beam, trap::characterize(beam, species)};
    }
    return trap::characterize_from_frequency(power, constants::two_pi * num(p, "omega_r_khz") * 1e3, species, lambda);
}

inline std::vector<ParamSpec> trap_params()
{
    return {
        {"power_mw", ParamType::number, 5.6, "trap beam power"},
        {"omega_r_khz", ParamType::number, 119.0, "radial trap frequency / 2pi, used when waist_um is 0"},
        {"waist_um", ParamType::number, 0.0, "beam waist; 0 derives it from omega_r_khz"},
        {"wavelength_nm", ParamType::number, 850.0, "trap wavelength"},
    };
}

// First crossing of `level` going outward from index `from`, linear interpolation.
inline double crossing(std::span<const double> x, std::span<const double> y, std::size_t from, int dir, double level)
{
    for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(from); i + dir >= 0 && i + dir < std::ssize(y); i += dir) {
        const auto j = static_cast<std::size_t>(i + dir);
        const auto k = static_cast<std::size_t>(i);
        if (y[j] <= level) {
            const double f = (y[k] - level) / (y[k] - y[j]);
            return x[k] + f * (x[j] - x[k]);
        }
    }
    throw NumericalFailure("profile never falls to the requested level");
}

inline double nan_on_failure(const std::function<double()>& fn)
{
    try {
        return fn();
    } catch (const NumericalFailure&) {
        return std::numeric_limits<double>::quiet_NaN();
    }
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

} // namespace detail

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline CommandOutput fig_psf(const json& p, const Context& ctx)
{
    using namespace detail;
    const auto pupil = pupil_from(p, ctx.seed);
    const diffraction::FocalGrid grid{num(p, "half_extent_um") * 1e-6, count(p, "samples", 64),
                                      count(p, "pupil_samples", 64)};
    const auto map = diffraction::focal_intensity(pupil, grid, num(p, "defocus_um") * 1e-6);
    const diffraction::Pupil plain{pupil.numerical_aperture, pupil.wavelength};

    io::CsvWriter profile({"r_um", "intensity", "airy"});
    const auto row = diffraction::peak_row_profile(map, +1);
    for (std::size_t i = 0; i < row.size(); ++i) {
        const double r = static_cast<double>(i) * map.grid_spacing;
        profile.row({r * 1e6, row[i], diffraction::airy_intensity(r, plain)});
    }
    const double width = nan_on_failure([&] { return diffraction::fwhm(map); });
    const double ring = nan_on_failure([&] { return diffraction::first_dark_ring(map); });
    const double strehl = diffraction::strehl_empirical(map, diffraction::reference_map(pupil, grid));

    io::CsvWriter metrics({"fwhm_um", "first_dark_ring_um", "peak", "strehl", "airy_fwhm_um", "airy_first_zero_um"});
    metrics.row({width * 1e6, ring * 1e6, map.peak(), strehl, diffraction::airy_fwhm(plain) * 1e6,
                 diffraction::airy_first_zero(plain) * 1e6});

    io::write_csv(ctx.out / "psf_profile.csv", profile);
    io::write_csv(ctx.out / "psf_metrics.csv", metrics);
    io::write_json(ctx.out / "psf_map.json", io::to_json(map));
    return {{"psf_profile.csv", "psf_metrics.csv", "psf_map.json"},
            {{"fwhm_um", finite_or_null(width * 1e6)},
             {"first_dark_ring_um", finite_or_null(ring * 1e6)},
             {"strehl", strehl}}};
}

inline CommandOutput fig_axial(const json& p, const Context& ctx)
{
    using namespace detail;
    const auto pupil = pupil_from(p, ctx.seed);
    const double z0 = num(p, "z_min_um") * 1e-6, z1 = num(p, "z_max_um") * 1e-6;
    const std::size_t n = count(p, "points", 3);
    require(z1 > z0, "z_max_um must exceed z_min_um");
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i)
        z[i] = z0 + (z1 - z0) * static_cast<double>(i) / static_cast<double>(n - 1);
    const auto intensity = diffraction::axial_intensity(pupil, z);

    // Uniform-pupil paraxial closed form: sinc^2(pi NA^2 z / (2 lambda)).
    const double k = pi * pupil.numerical_aperture * pupil.numerical_aperture / (2 * pupil.wavelength);
    io::CsvWriter curve({"z_um", "intensity", "paraxial_sinc2"});
    for (std::size_t i = 0; i < n; ++i) {
        const double a = k * z[i];
        const double s = a == 0 ? 1.0 : std::sin(a) / a;
        curve.row({z[i] * 1e6, intensity[i], s * s});
    }

    const auto peak = static_cast<std::size_t>(std::max_element(intensity.begin(), intensity.end()) -
                                               intensity.begin());
    const double half = intensity[peak] / 2;
    const double width = nan_on_failure(
        [&] { return crossing(z, intensity, peak, +1, half) - crossing(z, intensity, peak, -1, half); });
    double zero = std::numeric_limits<double>::quiet_NaN();
    for (std::size_t i = peak + 1; i + 1 < n; ++i)
        if (intensity[i] <= intensity[i - 1] && intensity[i] < intensity[i + 1]) {
            const double a = intensity[i - 1], b = intensity[i], c = intensity[i + 1];
            const double denom = a - 2 * b + c;
            const double h = z[i + 1] - z[i];
            zero = z[i] + (denom > 0 ? 0.5 * (a - c) / denom : 0.0) * h - z[peak];
            break;
        }
    // sinc^2(x) = 1/2 at x = 1.39155737...
    const double oracle_fwhm = 2 * 1.391557377922 / k;
    const double oracle_zero = pi / k;

    io::CsvWriter metrics({"fwhm_um", "first_zero_um", "paraxial_fwhm_um", "paraxial_first_zero_um"});
    metrics.row({width * 1e6, zero * 1e6, oracle_fwhm * 1e6, oracle_zero * 1e6});
    io::write_csv(ctx.out / "axial.csv", curve);
    io::write_csv(ctx.out / "axial_metrics.csv", metrics);
    return {{"axial.csv", "axial_metrics.csv"},
            {{"fwhm_um", finite_or_null(width * 1e6)}, {"first_zero_um", finite_or_null(zero * 1e6)}}};
}

inline CommandOutput fig_mtf(const json& p, const Context& ctx)
{
    using namespace detail;
    const auto pupil = pupil_from(p, ctx.seed);
    const diffraction::FocalGrid grid{num(p, "half_extent_um") * 1e-6, count(p, "samples", 64),
                                      count(p, "pupil_samples", 64)};
    const diffraction::FocalGrid calib_grid{num(p, "calibration_half_extent_um") * 1e-6,
                                            count(p, "calibration_samples", 64), grid.pupil_samples};
    const double field = num(p, "field_um") * 1e-6;
    const double azimuth = num(p, "azimuth_deg") * pi / 180;

    const auto cal = diffraction::calibrate_coma(pupil, num(p, "target_strehl"), field, calib_grid);
    diffraction::Pupil off_axis = pupil;
    off_axis.aberration.coma_coefficient += cal.aberration.coma_coefficient;

    const auto on_map = diffraction::focal_intensity(pupil, grid);
    const auto off_map = diffraction::focal_intensity(off_axis, grid);
    const auto on = diffraction::mtf_from_psf(on_map, azimuth);
    const auto off = diffraction::mtf_from_psf(off_map, azimuth);

    io::CsvWriter csv({"frequency_cycles_per_um", "on_axis", "off_axis", "reference"});
    double worst = 0;
    for (std::size_t i = 0; i < on.frequencies.size(); ++i) {
        const double ref = diffraction::mtf_diffraction_limited(on.frequencies[i], pupil);
        worst = std::max(worst, std::abs(on.values[i] - ref));
        csv.row({on.frequencies[i] * 1e-6, on.values[i], off.values[i], ref});
    }
    const double s_25 = diffraction::strehl_at_field(cal, pupil, 25e-6, calib_grid);
    const double r_08 = cal.coefficient_per_length > 0
                            ? diffraction::field_radius_at_strehl(cal, pupil, 0.8, calib_grid)
                            : std::numeric_limits<double>::infinity();

    const json summary{
        {"schema_version", io::kSchemaVersion},
        {"cutoff_cycles_per_um", pupil.cutoff_frequency() * 1e-6},
        {"frequency_step_cycles_per_um", on.frequencies.size() > 1 ? on.frequencies[1] * 1e-6 : 0.0},
        {"max_abs_deviation_on_axis", worst},
        {"truncated_fraction_on_axis", on_map.truncated_fraction()},
        {"coma",
         {{"field_um", num(p, "field_um")},
          {"target_strehl", cal.target_strehl},
          {"achieved_strehl", cal.achieved_strehl},
          {"coefficient_nm", cal.aberration.coma_coefficient * 1e9},
          {"coefficient_waves", cal.aberration.coma_coefficient / pupil.wavelength},
          {"strehl_at_25um", s_25},
          {"field_radius_at_strehl_0p8_um", finite_or_null(r_08 * 1e6)}}}};
    io::write_csv(ctx.out / "mtf.csv", csv);
    io::write_json(ctx.out / "mtf_summary.json", summary);
    return {{"mtf.csv", "mtf_summary.json"},
            {{"max_abs_deviation_on_axis", worst}, {"strehl_at_25um", s_25}, {"achieved_strehl", cal.achieved_strehl}}};
}

inline CommandOutput fig_recapture(const json& p, const Context& ctx)
{
    using namespace detail;
    const auto species = trap::AtomSpecies::rubidium87();
    const auto [beam, trap] = trap_from(p, species);
    std::vector<double> gaps = parse_range(text(p, "gaps_us"));
    for (auto& g : gaps)
        g *= 1e-6;
    atomdyn::RecaptureOptions opts;
    opts.steps_per_period = num(p, "steps_per_period");
    opts.threads = ctx.threads;
    const auto curve =
        atomdyn::recapture_curve(trap, beam, species, num(p, "temperature_uk") * 1e-6, num(p, "dt1_us") * 1e-6,
                                 num(p, "dt2_us") * 1e-6, gaps, count(p, "trials", 1), ctx.seed, opts);
    // A curve without usable oscillation is a result, not a configuration error.
    atomdyn::DampedSineFit fit;
    try {
        fit = atomdyn::fit_damped_sine(curve);
    } catch (const InvalidArgument& e) {
        throw NumericalFailure(std::string("recapture curve cannot be fitted: ") + e.what());
    }
    const double dominant = atomdyn::dominant_frequency(curve.gaps, curve.survival);

    json fit_json = io::to_json(fit);
    const double khz = 1 / (constants::two_pi * 1e3);
    fit_json["trap_omega_r_kHz"] = trap.radial_frequency * khz;
    fit_json["ratio_atom_frequency_to_omega_r"] = fit.atom_frequency() / trap.radial_frequency;
    fit_json["dominant_component_kHz"] = dominant * khz;
    json curve_json = io::to_json(curve);
    curve_json["trap"] = io::to_json(trap);

    io::write_csv(ctx.out / "recapture.csv", io::recapture_csv(curve));
    io::write_json(ctx.out / "recapture.json", curve_json);
    io::write_json(ctx.out / "fit.json", fit_json);
    return {{"recapture.csv", "recapture.json", "fit.json"},
            {{"atom_frequency_kHz", fit.atom_frequency() * khz},
             {"trap_omega_r_kHz", trap.radial_frequency * khz},
             {"waist_um", trap.waist * 1e6}}};
}

inline CommandOutput fig_histogram(const json& p, const Context& ctx)
{
    using namespace detail;
    detection::TelegraphConfig cfg;
    cfg.loading_rate = num(p, "loading_rate");
    cfg.one_body_loss_rate = num(p, "loss_rate");
    cfg.blockade = p.at("blockade").get<bool>();
    cfg.duration = num(p, "duration_s");
    cfg.seed = ctx.seed;
    const detection::PhotonRates rates{num(p, "background_rate"), num(p, "atom_rate"), num(p, "bin_ms") * 1e-3};
    rates.validate();
    const auto n_bins = static_cast<std::size_t>(std::floor(cfg.duration / rates.bin_time + 1e-9));
    require(n_bins >= 1, "duration shorter than one bin");

    const auto trace = detection::simulate_telegraph(cfg);
    const auto series = detection::trace_to_histogram(trace, rates, n_bins, ctx.seed);
    const double l0 = rates.background_rate * rates.bin_time;
    const double l1 = l0 + rates.atom_rate * rates.bin_time;
    const auto choice = detection::optimal_threshold(l0, l1);
    const auto empty = detection::mode_statistics(series, 0.0);
    const auto loaded = detection::mode_statistics(series, 1.0);

    auto mode_json = [](const detection::ModeStatistics& m) {
        return json{{"bins", m.samples}, {"mean", m.mean}, {"variance", m.variance}, {"fano", m.fano()}};
    };
    json threshold{{"schema_version", io::kSchemaVersion},
                   {"background_mean", l0},
                   {"atom_mean", l1},
                   {"threshold", choice.threshold},
                   {"rule", "atom present iff counts >= threshold"},
                   {"false_positive", choice.false_positive},
                   {"false_negative", choice.false_negative},
                   {"confidence", choice.confidence()},
                   {"modes", {{"empty", mode_json(empty)}, {"loaded", mode_json(loaded)}}},
                   {"occupied_time_fraction", trace.time_fraction(1)},
                   {"max_occupancy", trace.max_occupancy()}};
    if (cfg.blockade)
        threshold["stationary_occupancy"] =
            detection::blockade_stationary_occupancy(cfg.loading_rate, cfg.one_body_loss_rate);

    io::write_csv(ctx.out / "trace.csv", io::trace_csv(trace));
    io::write_csv(ctx.out / "counts.csv", io::counts_csv(series));
    io::write_csv(ctx.out / "histogram.csv", io::histogram_csv(series.histogram));
    io::write_json(ctx.out / "threshold.json", threshold);
    return {{"trace.csv", "counts.csv", "histogram.csv", "threshold.json"},
            {{"threshold", choice.threshold}, {"max_occupancy", trace.max_occupancy()}}};
}

inline CommandOutput fig_image(const json& p, const Context& ctx)
{
    using namespace detail;
    detection::CcdModel ccd;
    ccd.magnification = num(p, "magnification");
    ccd.pixel_pitch = num(p, "pixel_um") * 1e-6;
    ccd.spot_waist = num(p, "waist_um") * 1e-6;
    ccd.photon_budget = num(p, "photon_budget");
    ccd.background = num(p, "background");
    ccd.read_noise = num(p, "read_noise");
    ccd.width = count(p, "width", 4);
    ccd.height = count(p, "height", 4);
    ccd.validate();

    const double half = num(p, "separation_um") * 1e-6 / 2;
    const double angle = num(p, "angle_deg") * pi / 180;
    const std::vector<detection::AtomPosition> atoms{{-half * std::cos(angle), -half * std::sin(angle)},
                                                     {half * std::cos(angle), half * std::sin(angle)}};
    const std::string model = text(p, "spot_model");
    detection::SpotShape spot = ccd.spot_waist;
    if (model == "diffraction") {
        const diffraction::Pupil imaging{num(p, "na"), num(p, "fluorescence_wavelength_nm") * 1e-9};
        spot = diffraction::focal_intensity(imaging, diffraction::FocalGrid{4e-6, 256, 256});
    } else if (model != "gaussian") {
        throw InvalidArgument("spot_model must be 'gaussian' or 'diffraction'");
    }
    const std::string mode_text = text(p, "fit_mode");
    detection::SpotMode mode = detection::SpotMode::automatic;
    if (mode_text == "single")
        mode = detection::SpotMode::single;
    else if (mode_text == "pair")
        mode = detection::SpotMode::pair;
    else if (mode_text != "auto")
        throw InvalidArgument("fit_mode must be 'auto', 'single' or 'pair'");

    const auto image = detection::render_ccd(atoms, spot, ccd, ctx.seed);
    const auto fit = detection::fit_two_gaussians(image, ccd, mode);

    // Fitted model, for overlaying on the cross-section.
    detection::Image fitted{ccd.width, ccd.height, std::vector<double>(ccd.width * ccd.height, fit.background_level)};
    for (const auto& s : fit.spots)
        detection::detail::add_gaussian_spot(fitted, ccd, s.x, s.y, s.waist, s.amplitude);

    // Rows straddling the line through both atoms (horizontal layout).
    const std::size_t r0 = ccd.height / 2 - (ccd.height % 2 == 0 ? 1 : 0), r1 = ccd.height / 2;
    io::CsvWriter cross({"x_um", "counts", "fit"});
    for (std::size_t x = 0; x < ccd.width; ++x) {
        const double centre = 0.5 * (ccd.edge(x, ccd.width) + ccd.edge(x + 1, ccd.width));
        double c = image.at(x, r0), f = fitted.at(x, r0);
        if (r1 != r0) {
            c += image.at(x, r1);
            f += fitted.at(x, r1);
        }
        cross.row({centre * 1e6, c, f});
    }

    json atoms_json = json::array();
    for (const auto& a : atoms)
        atoms_json.push_back({{"x_um", a.x * 1e6}, {"y_um", a.y * 1e6}});
    const json meta{{"schema_version", io::kSchemaVersion},
                    {"width", ccd.width},
                    {"height", ccd.height},
                    {"object_pixel_um", ccd.object_pitch() * 1e6},
                    {"pixel_origin", "pixel (0,0) spans x,y in [-width/2, -width/2 + 1) object pixels"},
                    {"atoms", atoms_json},
                    {"spot_model", model},
                    {"total_counts", image.total()}};

    io::write_text(ctx.out / "image.pgm", io::to_pgm(image));
    io::write_json(ctx.out / "image.json", meta);
    io::write_json(ctx.out / "fit.json", io::to_json(fit));
    io::write_csv(ctx.out / "cross_section.csv", cross);
    return {{"image.pgm", "image.json", "fit.json", "cross_section.csv"},
            {{"separation_um", fit.separation() * 1e6}, {"spots", fit.spots.size()}}};
}

inline CommandOutput trap_report(const json& p, const Context& ctx)
{
    const auto [beam, t] = detail::trap_from(p, trap::AtomSpecies::rubidium87());
    json j = io::to_json(t);
    j["power_mW"] = beam.power * 1e3;
    io::write_json(ctx.out / "trap.json", j);
    return {{"trap.json"}, {{"waist_um", t.waist * 1e6}, {"depth_mK", t.depth_millikelvin()}}};
}

inline const std::vector<Command>& commands()
{
    static const std::vector<Command> table = [] {
        using detail::pupil_params;
        std::vector<Command> v;

        auto psf = pupil_params(true);
        psf.insert(psf.end(), {{"half_extent_um", ParamType::number, 4.0, "focal grid half extent"},
                               {"samples", ParamType::integer, 512, "focal grid samples per side"},
                               {"pupil_samples", ParamType::integer, 256, "pupil samples across the diameter"},
                               {"defocus_um", ParamType::number, 0.0, "axial defocus"}});
        v.push_back({"fig-psf", "focal-plane PSF, radial profile and Airy reference", psf, fig_psf});

        auto axial = pupil_params(false);
        axial.insert(axial.end(), {{"z_min_um", ParamType::number, -10.0, "first axial position"},
                                   {"z_max_um", ParamType::number, 10.0, "last axial position"},
                                   {"points", ParamType::integer, 401, "number of axial samples"}});
        v.push_back({"fig-axial", "on-axis intensity versus defocus", axial, fig_axial});

        auto mtf = pupil_params(false);
        mtf.insert(mtf.end(),
                   {{"half_extent_um", ParamType::number, 24.0, "focal grid half extent for the MTF"},
                    {"samples", ParamType::integer, 512, "focal grid samples per side"},
                    {"pupil_samples", ParamType::integer, 256, "pupil samples across the diameter"},
                    {"field_um", ParamType::number, 30.0, "off-axis field height of the coma calibration"},
                    {"target_strehl", ParamType::number, 0.77, "Strehl ratio at field_um"},
                    {"calibration_half_extent_um", ParamType::number, 4.0, "grid used for Strehl calibration"},
                    {"calibration_samples", ParamType::integer, 512, "samples of the calibration grid"},
                    {"azimuth_deg", ParamType::number, 0.0, "MTF section direction, 0 along the coma axis"}});
        v.push_back({"fig-mtf", "on-axis and off-axis MTF against the aperture autocorrelation", mtf, fig_mtf});

        auto rec = detail::trap_params();
        rec.insert(rec.end(), {{"temperature_uk", ParamType::number, 50.0, "atom temperature"},
                               {"dt1_us", ParamType::number, 1.3, "first release"},
                               {"dt2_us", ParamType::number, 6.2, "second release"},
                               {"gaps_us", ParamType::text, "0:20:0.5", "trapped gaps start:stop:step (stop excluded)"},
                               {"trials", ParamType::integer, 10000, "atoms per gap"},
                               {"steps_per_period", ParamType::number, 200.0, "Verlet steps per radial period"}});
        v.push_back({"fig-recapture", "release-recapture survival versus gap and damped-sine fit", rec,
                     fig_recapture});

        v.push_back({"fig-histogram",
                     "loading telegraph trace, photon counts and threshold",
                     {{"loading_rate", ParamType::number, 1.0, "loading rate, 1/s"},
                      {"loss_rate", ParamType::number, 0.1, "one-body loss rate per atom, 1/s"},
                      {"blockade", ParamType::boolean, true, "collisional blockade"},
                      {"duration_s", ParamType::number, 100.0, "trace length"},
                      {"bin_ms", ParamType::number, 10.0, "counting bin"},
                      {"background_rate", ParamType::number, 1.3e4, "background counts per second"},
                      {"atom_rate", ParamType::number, 2.7e4, "counts per second per atom"}},
                     fig_histogram});

        v.push_back({"fig-image",
                     "synthetic two-atom CCD image and two-Gaussian fit",
                     {{"separation_um", ParamType::number, 2.2, "atom separation"},
                      {"angle_deg", ParamType::number, 0.0, "orientation of the pair"},
                      {"waist_um", ParamType::number, 0.9, "Gaussian spot waist in the object plane"},
                      {"spot_model", ParamType::text, "gaussian", "gaussian | diffraction"},
                      {"na", ParamType::number, 0.5, "imaging NA for the diffraction spot model"},
                      {"fluorescence_wavelength_nm", ParamType::number, 780.0, "fluorescence wavelength"},
                      {"photon_budget", ParamType::number, 1000.0, "detected photons per atom"},
                      {"background", ParamType::number, 10.0, "mean background counts per pixel"},
                      {"read_noise", ParamType::number, 0.0, "Gaussian read noise, rms counts"},
                      {"magnification", ParamType::number, 25.0, "imaging magnification"},
                      {"pixel_um", ParamType::number, 13.0, "sensor pixel pitch"},
                      {"width", ParamType::integer, 24, "sensor width, pixels"},
                      {"height", ParamType::integer, 24, "sensor height, pixels"},
                      {"fit_mode", ParamType::text, "auto", "auto | single | pair"}},
                     fig_image});

        v.push_back({"trap-report", "trap depth, waist and frequencies", detail::trap_params(), trap_report});
        return v;
    }();
    return table;
}

inline const Command& find_command(const std::string& name)
{
    for (const auto& c : commands())
        if (c.name == name)
            return c;
    throw InvalidArgument("unknown command '" + name + "'");
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct RunRequest {
    std::string command;
    json file_config;             // parsed --config file, or null
    json flag_parameters;         // parameters given as flags
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::optional<std::string> out;
};

enum ExitCode : int { ok = 0, internal_error = 1, config_error = 2, numerical_failure = 3 };

inline std::string utc_timestamp()
{
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Resolves the request and runs it; returns the manifest.
inline json run(const RunRequest& req)
{
    const Command& cmd = find_command(req.command);
    json file_params;
    Context ctx;
    std::string out = "out";
    if (!req.file_config.is_null()) {
        if (!req.file_config.is_object())
            throw InvalidArgument("config file must hold a JSON object");
        for (const auto& [key, value] : req.file_config.items()) {
            if (key == "command") {
                if (value != req.command)
                    throw InvalidArgument("config file is for command " + value.dump());
            } else if (key == "seed") {
                if (!value.is_number_integer() || value.get<std::int64_t>() < 0)
                    throw InvalidArgument("seed must be a non-negative integer");
                ctx.seed = value.get<std::uint64_t>();
            } else if (key == "threads") {
                if (!value.is_number_integer() || value.get<std::int64_t>() < 0)
                    throw InvalidArgument("threads must be a non-negative integer");
                ctx.threads = value.get<unsigned>();
            } else if (key == "out") {
                if (!value.is_string())
                    throw InvalidArgument("out must be a string");
                out = value.get<std::string>();
            } else if (key == "parameters") {
                file_params = value;
            } else {
                throw InvalidArgument("unknown config key '" + key + "'");
            }
        }
    }
    if (req.seed)
        ctx.seed = *req.seed;
    if (req.threads)
        ctx.threads = *req.threads;
    if (req.out)
        out = *req.out;
    ctx.out = out;

    const json params = resolve_parameters(cmd, file_params, req.flag_parameters);
    std::error_code ec;
    fs::create_directories(ctx.out, ec);
    if (ec)
        throw InvalidArgument("cannot create output directory " + out + ": " + ec.message());

    const CommandOutput result = cmd.run(params, ctx);
    json manifest{{"schema_version", io::kSchemaVersion},
                  {"command", cmd.name},
                  {"seed", ctx.seed},
                  {"threads", ctx.threads},
                  {"parameters", params},
                  {"constants_version", constants::kTableVersion},
                  {"outputs", result.files},
                  {"summary", result.summary},
                  {"created_utc", utc_timestamp()}};
    io::write_json(ctx.out / "manifest.json", manifest);
    return manifest;
}

inline json error_json(int code, const std::string& kind, const std::string& message)
{
    return {{"error", {{"code", code}, {"kind", kind}, {"message", message}}}};
}

} // namespace tweezersim::experiments
