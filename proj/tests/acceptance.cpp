// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "tweezersim/atomdyn.hpp"
#include "tweezersim/detection.hpp"
#include "tweezersim/diffraction.hpp"
#include "tweezersim/trap.hpp"

using namespace tweezersim;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kLambda = 850e-9;
constexpr double kNa = 0.5;

// Tolerances and runtime budgets.
namespace tol {
constexpr double airy_rel = 0.005;
constexpr double measured_rel = 0.05;
constexpr double airy_seconds = 1;
constexpr double axial_fwhm_rel = 0.01;
constexpr double axial_measured_rel = 0.10;
constexpr double axial_zero_rel = 0.01;
constexpr double axial_seconds = 1;
constexpr double strehl_formula_abs = 0.005;
constexpr double strehl_screen_lo = 0.76, strehl_screen_hi = 0.84;
constexpr double coma_target_abs = 0.01;
constexpr double coma_inner_min = 0.8;
constexpr double strehl_seconds = 10;
constexpr double mtf_abs = 0.02;
constexpr double mtf_seconds = 5;
constexpr double apod_ratio = 1.09, apod_abs = 0.02;
constexpr double apod_seconds = 5;
constexpr double waist_abs_um = 0.01;
constexpr double depth_rel = 0.05;
constexpr double depth_mhz_abs = 2;
constexpr double omega_z_rel = 0.05;
constexpr double trap_seconds = 1e-3;
constexpr double ellipse_angle_abs = 0.5;
constexpr double ellipse_ratio_abs = 0.05;
constexpr double ellipse_mc_rel = 0.02;
constexpr double ellipse_seconds = 5;
constexpr double recapture_rel = 0.03;
constexpr double recapture_seconds = 120;
constexpr double threshold_error = 1e-6;
constexpr double fano_lo = 0.9, fano_hi = 1.1;
constexpr double detection_seconds = 30;
constexpr double separation_abs_um = 0.2 / 2;
constexpr double waist_spread_um = 0.2;
constexpr double imaging_seconds = 30;
} // namespace tol

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void check(bool ok, const std::string& what)
    {
        if (!ok) {
            pass = false;
            detail << " [failed: " << what << "]";
        }
    }
};

bool near_rel(double value, double target, double rel) { return std::abs(value / target - 1) <= rel; }

// Linear-interpolated abscissa where y first drops to `level` after index `from`.
double falling_crossing(const std::vector<double>& x, const std::vector<double>& y, double level, std::size_t from = 0)
{
    for (std::size_t i = from + 1; i < y.size(); ++i)
        if (y[i - 1] >= level && y[i] < level)
            return x[i - 1] + (level - y[i - 1]) / (y[i] - y[i - 1]) * (x[i] - x[i - 1]);
    return NAN;
}

// Independent paraxial oracle for the on-axis profile.
double sinc2_axial(double z)
{
    const double u = kPi * kNa * kNa * z / (2 * kLambda);
    return u == 0 ? 1.0 : std::pow(std::sin(u) / u, 2);
}

double mtf_oracle(double s) { return s >= 1 ? 0 : 2 / kPi * (std::acos(s) - s * std::sqrt(1 - s * s)); }

const trap::AtomSpecies& rb()
{
    static const auto s = trap::AtomSpecies::rubidium87();
    return s;
}

void airy(Outcome& o)
{
    const diffraction::Pupil p;
    const auto map = diffraction::focal_intensity(p, diffraction::FocalGrid{});
    const double fw = diffraction::fwhm(map) * 1e6, ring = diffraction::first_dark_ring(map) * 1e6;
    // (2 J1(x)/x)^2 = 1/2 at x = 1.616339948, J1 first zero at 3.831705970.
    const double k = 2 * kPi * kNa / kLambda * 1e-6;
    const double fw_oracle = 2 * 1.616339948 / k, ring_oracle = 3.831705970 / k;
    o.detail << "fwhm=" << fw << " um (oracle " << fw_oracle << "), ring=" << ring << " um (oracle " << ring_oracle
             << ")";
    o.check(near_rel(fw, fw_oracle, tol::airy_rel), "fwhm vs oracle");
    o.check(near_rel(ring, ring_oracle, tol::airy_rel), "ring vs oracle");
    o.check(near_rel(fw, 0.9, tol::measured_rel), "fwhm vs measured 0.9 um");
    o.check(near_rel(ring, 1.06, tol::measured_rel), "ring vs measured 1.06 um");
}

void axial(Outcome& o)
{
    const diffraction::Pupil p;
    std::vector<double> z, oracle;
    for (int i = 0; i <= 2000; ++i) {
        z.push_back(i * 5e-9);
        oracle.push_back(sinc2_axial(z.back()));
    }
    const auto v = diffraction::axial_intensity(p, z);
    const double fw = 2 * falling_crossing(z, v, 0.5) * 1e6;
    const double fw_oracle = 2 * falling_crossing(z, oracle, 0.5) * 1e6;
    std::size_t zero = 1;
    while (zero + 1 < v.size() && !(v[zero] <= v[zero - 1] && v[zero] <= v[zero + 1]))
        ++zero;
    const double first_zero = z[zero] * 1e6;
    o.detail << "fwhm=" << fw << " um (sinc2 " << fw_oracle << "), zero=" << first_zero << " um";
    o.check(near_rel(fw, fw_oracle, tol::axial_fwhm_rel), "fwhm vs sinc2");
    o.check(near_rel(fw, 6.3, tol::axial_measured_rel), "fwhm vs measured 6.3 um");
    o.check(near_rel(first_zero, 2 * kLambda / (kNa * kNa) * 1e6, tol::axial_zero_rel), "first zero vs 2 lambda/NA^2");
    o.check(near_rel(first_zero, 6.8, tol::axial_zero_rel), "first zero vs 6.8 um");
}

void strehl(Outcome& o)
{
    const diffraction::Pupil ideal;
    const double formula = diffraction::strehl_from_rms(kLambda / 14, kLambda);
    diffraction::Pupil screened;
    screened.aberration.rms_wavefront = kLambda / 14;
    const auto ref = diffraction::reference_map(ideal, diffraction::FocalGrid{});
    const double screen =
        diffraction::strehl_empirical(diffraction::focal_intensity(screened, diffraction::FocalGrid{}), ref);
    const auto cal = diffraction::calibrate_coma(ideal, 0.77, 30e-6);
    const double at30 = diffraction::strehl_at_field(cal, ideal, 30e-6);
    double inner = 1;
    for (double h = 0; h <= 25e-6 + 1e-12; h += 2.5e-6)
        inner = std::min(inner, diffraction::strehl_at_field(cal, ideal, h));
    o.detail << "S(rms)=" << formula << ", S(screen)=" << screen << ", S(30um)=" << at30 << ", min S(<=25um)=" << inner;
    o.check(std::abs(formula - 0.80) <= tol::strehl_formula_abs, "strehl_from_rms");
    o.check(screen >= tol::strehl_screen_lo && screen <= tol::strehl_screen_hi, "random screen");
    o.check(std::abs(at30 - 0.77) <= tol::coma_target_abs, "coma calibration");
    o.check(inner >= tol::coma_inner_min, "field <= 25 um");
}

void mtf(Outcome& o)
{
    const diffraction::Pupil p;
    const auto curve = diffraction::mtf_from_psf(diffraction::focal_intensity(p, diffraction::FocalGrid{24e-6, 512, 256}));
    const double cutoff = 2 * kNa / kLambda;
    double worst = 0;
    for (std::size_t i = 0; i < curve.frequencies.size(); ++i)
        worst = std::max(worst, std::abs(curve.values[i] - mtf_oracle(curve.frequencies[i] / cutoff)));
    const double bin = curve.frequencies[1] - curve.frequencies[0];
    // Measured cutoff: first frequency where the contrast vanishes.
    double measured = NAN;
    for (std::size_t i = 0; i < curve.frequencies.size(); ++i)
        if (curve.values[i] < 1e-3) {
            measured = curve.frequencies[i];
            break;
        }
    o.detail << "max |dev|=" << worst << ", cutoff=" << measured * 1e-6 << " cyc/um (bin " << bin * 1e-6 << ")";
    o.check(worst <= tol::mtf_abs, "autocorrelation agreement");
    o.check(std::abs(measured * 1e-6 - 1.176) <= bin * 1e-6, "cutoff within one bin");
}

void apodization(Outcome& o)
{
    diffraction::Pupil g;
    g.apodization = diffraction::GaussianIllumination{1.0};
    const double ratio = diffraction::fwhm(diffraction::focal_intensity(g, diffraction::FocalGrid{})) /
                         diffraction::fwhm(diffraction::focal_intensity(diffraction::Pupil{}, diffraction::FocalGrid{}));
    o.detail << "fwhm ratio=" << ratio;
    o.check(std::abs(ratio - tol::apod_ratio) <= tol::apod_abs, "broadening");
}

void trap_algebra(Outcome& o)
{
    const auto [beam, t] = trap::characterize_from_frequency(5.6e-3, 2 * kPi * 119e3, rb(), kLambda);
    o.detail << "w0=" << t.waist * 1e6 << " um, U0=" << t.depth_millikelvin() << " mK = " << t.depth_megahertz()
             << " MHz, omega_z/2pi=" << t.longitudinal_frequency / (2 * kPi) * 1e-3 << " kHz";
    o.check(std::abs(t.waist * 1e6 - 1.03) <= tol::waist_abs_um, "waist");
    o.check(near_rel(t.depth_millikelvin(), 1.5, tol::depth_rel), "depth mK");
    o.check(std::abs(t.depth_megahertz() - 31) <= tol::depth_mhz_abs, "depth MHz");
    o.check(near_rel(t.longitudinal_frequency / (2 * kPi), 22e3, tol::omega_z_rel), "omega_z");
}

void ellipse(Outcome& o)
{
    const double w = 2 * kPi * 119e3;
    const auto e = atomdyn::ellipse_stats(w, 1.3e-6);
    const auto t = trap::characterize_from_frequency(5.6e-3, w, rb(), kLambda).second;
    const auto states = atomdyn::sample_thermal({50e-6, 100000, 1}, t, rb());
    std::vector<atomdyn::PhaseSpaceState> flown;
    flown.reserve(states.size());
    for (const auto& s : states)
        flown.push_back(atomdyn::free_flight(s, 1.3e-6));
    const Eigen::Matrix2d c = atomdyn::scaled_covariance(flown, t.radial_frequency);
    const auto mc = atomdyn::ellipse_from_covariance(c(0, 0), c(0, 1), c(1, 1));
    o.detail << "theta=" << e.angle << " deg, ratio=" << e.axis_ratio << "; MC theta=" << mc.angle
             << ", ratio=" << mc.axis_ratio;
    o.check(std::abs(e.angle - 32.0) <= tol::ellipse_angle_abs, "angle");
    o.check(std::abs(e.axis_ratio - 2.55) <= tol::ellipse_ratio_abs, "axis ratio");
    o.check(near_rel(mc.angle, e.angle, tol::ellipse_mc_rel), "MC angle");
    o.check(near_rel(mc.axis_ratio, e.axis_ratio, tol::ellipse_mc_rel), "MC axis ratio");
}

void recapture(Outcome& o)
{
    const auto [beam, t] = trap::characterize_from_frequency(5.6e-3, 2 * kPi * 119e3, rb(), kLambda);
    std::vector<double> gaps;
    for (int i = 0; i < 40; ++i)
        gaps.push_back(i * 0.5e-6);
    const auto curve = atomdyn::recapture_curve(t, beam, rb(), 50e-6, 1.3e-6, 6.2e-6, gaps, 10000, 1);
    const auto fit = atomdyn::fit_damped_sine(curve);
    const double dominant = atomdyn::dominant_frequency(curve.gaps, curve.survival);
    const double bin = 2 * kPi / 20e-6;
    const double ratio = fit.atom_frequency() / t.radial_frequency;
    o.detail << "omega_fit/2 / omega_r=" << ratio << ", dominant=" << dominant / (2 * kPi) * 1e-3
             << " kHz (2 omega_r " << 2 * t.radial_frequency / (2 * kPi) * 1e-3 << " kHz)";
    o.check(std::abs(ratio - 1) <= tol::recapture_rel, "fitted frequency within 3%");
    o.check(std::abs(dominant - 2 * t.radial_frequency) <= bin, "dominant at twice omega_r");
}

void detection_chain(Outcome& o)
{
    const auto c = detection::optimal_threshold(130, 400);
    bool optimal = true;
    const double worst = std::max(c.false_positive, c.false_negative);
    const double total = c.false_positive + c.false_negative;
    for (std::int64_t k = 0; k <= 1000; ++k) {
        const auto e = detection::threshold_errors(130, 400, k);
        if (k >= 130 && k <= 400 && std::max(e.false_positive, e.false_negative) < worst * (1 - 1e-12))
            optimal = false;
        if (e.false_positive + e.false_negative < total * (1 - 1e-12))
            optimal = false;
    }
    detection::TelegraphConfig cfg;
    cfg.loading_rate = 1;
    cfg.one_body_loss_rate = 0.1;
    cfg.duration = 500;
    cfg.seed = 1;
    const auto trace = detection::simulate_telegraph(cfg);
    const auto series = detection::trace_to_histogram(trace, detection::PhotonRates{}, 50000, 1);
    const auto empty = detection::mode_statistics(series, 0.0);
    const auto loaded = detection::mode_statistics(series, 1.0);
    o.detail << "threshold=" << c.threshold << ", FP=" << c.false_positive << ", FN=" << c.false_negative
             << ", max occupancy=" << trace.max_occupancy() << ", fano empty=" << empty.fano()
             << ", loaded=" << loaded.fano();
    o.check(c.false_positive < tol::threshold_error && c.false_negative < tol::threshold_error, "threshold errors");
    o.check(optimal, "exhaustive optimality");
    o.check(trace.max_occupancy() <= 1, "blockade");
    o.check(empty.fano() >= tol::fano_lo && empty.fano() <= tol::fano_hi, "empty-mode fano");
    o.check(loaded.fano() >= tol::fano_lo && loaded.fano() <= tol::fano_hi, "loaded-mode fano");
}

void imaging(Outcome& o)
{
    detection::CcdModel ccd;
    const std::vector<detection::AtomPosition> atoms{{-1.1e-6, 0.0}, {1.1e-6, 0.0}};
    double sep = 0, w_sum = 0, w_sq = 0;
    std::size_t n_waists = 0;
    const int reps = 100;
    for (int r = 0; r < reps; ++r) {
        const auto fit = detection::fit_two_gaussians(detection::render_ccd(atoms, ccd, r + 1), ccd,
                                                      detection::SpotMode::pair);
        sep += fit.separation();
        for (const auto& s : fit.spots) {
            w_sum += s.waist;
            w_sq += s.waist * s.waist;
            ++n_waists;
        }
    }
    sep /= reps;
    const double w_mean = w_sum / static_cast<double>(n_waists);
    const double w_sd = std::sqrt(std::max(0.0, w_sq / static_cast<double>(n_waists) - w_mean * w_mean));
    o.detail << "mean separation=" << sep * 1e6 << " um, waist=" << w_mean * 1e6 << " +- " << w_sd * 1e6 << " um";
    o.check(std::abs(sep * 1e6 - 2.2) <= tol::separation_abs_um, "separation");
    o.check(std::abs(w_mean * 1e6 - 0.9) <= tol::waist_spread_um, "mean waist");
    o.check(w_sd * 1e6 <= tol::waist_spread_um, "waist dispersion");
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

int cli(const std::string& args)
{
    const std::string cmd = std::string(TWEEZERSIM_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void determinism(Outcome& o)
{
    const fs::path root = fs::temp_directory_path() / ("tweezersim_acceptance_" + std::to_string(::getpid()));
    const std::vector<std::pair<std::string, std::string>> commands{
        {"fig-psf", "--rms-nm 60"}, {"fig-axial", ""},     {"fig-mtf", ""},      {"fig-recapture", ""},
        {"fig-histogram", ""},      {"fig-image", ""},     {"trap-report", ""}};
    std::size_t files = 0;
    for (const auto& [name, args] : commands) {
        const fs::path a = root / (name + "_a"), b = root / (name + "_b"), t = root / (name + "_t");
        const bool ran = cli("--seed 7 --threads 1 --out " + a.string() + " " + name + " " + args) == 0 &&
                         cli("--seed 7 --threads 1 --out " + b.string() + " " + name + " " + args) == 0 &&
                         cli("--seed 7 --threads 3 --out " + t.string() + " " + name + " " + args) == 0;
        o.check(ran, name + " ran");
        if (!ran)
            continue;
        for (const auto& entry : fs::directory_iterator(a)) {
            const auto file = entry.path().filename();
            if (file == "manifest.json")
                continue;
            const std::string bytes = slurp(entry.path());
            o.check(bytes == slurp(b / file), name + "/" + file.string() + " across runs");
            o.check(bytes == slurp(t / file), name + "/" + file.string() + " across threads");
            ++files;
        }
    }
    fs::remove_all(root);
    o.detail << commands.size() << " commands, " << files << " data files compared";
}

struct Criterion {
    int id;
    std::string name;
    std::function<void(Outcome&)> body;
    double budget_seconds; // 0: no runtime bound
};

} // namespace

int main()
{
    const std::vector<Criterion> criteria{
        {1, "Airy metrics", airy, tol::airy_seconds},
        {2, "Axial profile", axial, tol::axial_seconds},
        {3, "Strehl", strehl, tol::strehl_seconds},
        {4, "MTF", mtf, tol::mtf_seconds},
        {5, "Apodization", apodization, tol::apod_seconds},
        {6, "Trap algebra", trap_algebra, tol::trap_seconds},
        {7, "Ellipse analytics", ellipse, tol::ellipse_seconds},
        {8, "Recapture oscillation", recapture, tol::recapture_seconds},
        {9, "Detection", detection_chain, tol::detection_seconds},
        {10, "Imaging", imaging, tol::imaging_seconds},
        {11, "Determinism", determinism, 0},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        Outcome o;
        const auto start = std::chrono::steady_clock::now();
        try {
            c.body(o);
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (c.budget_seconds > 0)
            o.check(seconds < c.budget_seconds, "runtime");
        std::printf("%s %2d %s: %s (%.3g s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(), o.detail.str().c_str(),
                    seconds);
        std::fflush(stdout);
        failures += o.pass ? 0 : 1;
    }
    std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
    return failures ? 1 : 0;
}
