#pragma once

// Scalar diffraction of an apodized, aberrated circular pupil: focal-plane
// intensity maps, on-axis profiles, Strehl ratios and transfer functions.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/special_functions/bessel.hpp>
#include <boost/math/tools/roots.hpp>

#include "tweezersim/constants.hpp"
#include "tweezersim/error.hpp"
#include "tweezersim/random.hpp"

namespace tweezersim::diffraction {

using constants::pi;
using constants::two_pi;

struct UniformIllumination {};

// Gaussian pupil field exp(-rho^2 / beta^2); beta is the 1/e^2 intensity
// radius of the illuminating beam in units of the pupil radius.
struct GaussianIllumination {
    double waist_over_radius = 1.0;
};

using Apodization = std::variant<UniformIllumination, GaussianIllumination>;

// Wavefront error W(rho, phi) in meters, rho normalized to the pupil edge:
//   spherical * rho^4 + coma * rho^3 cos(phi) + random screen of RMS `rms_wavefront`.
struct AberrationSpec {
    double rms_wavefront = 0;
    double coma_coefficient = 0;
    double spherical_coefficient = 0;
    // Realization of the random screen and its correlation length in pupil radii.
    std::uint64_t screen_seed = 1;
    double screen_correlation = 0.25;

    bool is_zero() const { return rms_wavefront == 0 && coma_coefficient == 0 && spherical_coefficient == 0; }
    bool is_rotationally_symmetric() const { return rms_wavefront == 0 && coma_coefficient == 0; }

    void validate() const
    {
        require(rms_wavefront >= 0 && coma_coefficient >= 0 && spherical_coefficient >= 0,
                "aberration coefficients must be non-negative");
        require(screen_correlation > 0, "screen correlation length must be positive");
    }
};

struct Pupil {
    double numerical_aperture = 0.5;
    double wavelength = 850e-9;
    Apodization apodization = UniformIllumination{};
    AberrationSpec aberration{};

    bool is_uniform() const { return std::holds_alternative<UniformIllumination>(apodization); }

    void validate() const
    {
        require(numerical_aperture > 0 && numerical_aperture < 1, "numerical aperture must lie in (0, 1)");
        require(wavelength > 0, "wavelength must be positive");
        if (const auto* g = std::get_if<GaussianIllumination>(&apodization))
            require(g->waist_over_radius > 0, "gaussian waist_over_radius must be positive");
        aberration.validate();
    }

    // Pupil field amplitude at normalized radius rho.
    double amplitude(double rho) const
    {
        if (const auto* g = std::get_if<GaussianIllumination>(&apodization))
            return std::exp(-rho * rho / (g->waist_over_radius * g->waist_over_radius));
        return 1.0;
    }

    // Incoherent cutoff frequency 2 NA / lambda (cycles per meter).
    double cutoff_frequency() const { return 2 * numerical_aperture / wavelength; }
};

enum class Normalization { peak_unity_reference, raw };

inline std::string to_string(Normalization n)
{
    return n == Normalization::raw ? "raw" : "peak_unity_reference";
}

// Square map of focal-plane intensity. Sample (ix, iy) sits at
// ((ix - size/2) * grid_spacing, (iy - size/2) * grid_spacing).
struct IntensityMap {
    double grid_spacing = 0;
    std::size_t size = 0;
    double defocus = 0;
    Normalization normalization = Normalization::peak_unity_reference;
    // Integral of the untruncated intensity over the plane (0 if unknown).
    double expected_flux = 0;
    std::vector<double> samples; // row-major, iy outer

    double coordinate(std::size_t i) const
    {
        return (static_cast<double>(i) - static_cast<double>(size / 2)) * grid_spacing;
    }
    double half_extent() const { return static_cast<double>(size / 2) * grid_spacing; }
    double operator()(std::size_t ix, std::size_t iy) const { return samples[iy * size + ix]; }

    double peak() const { return samples.empty() ? 0.0 : *std::max_element(samples.begin(), samples.end()); }
    std::size_t peak_index() const
    {
        return static_cast<std::size_t>(std::max_element(samples.begin(), samples.end()) - samples.begin());
    }
    // Riemann sum of the samples, comparable with expected_flux.
    double flux() const
    {
        return std::accumulate(samples.begin(), samples.end(), 0.0) * grid_spacing * grid_spacing;
    }
    // Fraction of the total energy falling outside the grid.
    double truncated_fraction() const { return expected_flux > 0 ? 1.0 - flux() / expected_flux : 0.0; }

    bool same_grid(const IntensityMap& other) const
    {
        return size == other.size && std::abs(grid_spacing - other.grid_spacing) <= 1e-12 * grid_spacing;
    }
};

struct MtfCurve {
    std::vector<double> frequencies; // cycles per meter
    std::vector<double> values;
    double azimuth = 0;              // radians
};

// Sampling of the focal plane and of the pupil.
struct FocalGrid {
    double half_extent = 4e-6;
    std::size_t samples = 512;
    std::size_t pupil_samples = 256;
};

// ---------------------------------------------------------------------------
// Closed forms
// ---------------------------------------------------------------------------

inline double airy_intensity(double r, const Pupil& pupil)
{
    pupil.validate();
    require(pupil.is_uniform() && pupil.aberration.is_zero(), "airy_intensity needs a uniform, unaberrated pupil");
    require(r >= 0, "radius must be non-negative");
    const double zeta = two_pi * r * pupil.numerical_aperture / pupil.wavelength;
    if (zeta < 1e-8)
        return 1.0;
    const double a = 2 * boost::math::cyl_bessel_j(1, zeta) / zeta;
    return a * a;
}

// (2/pi)(acos x - x sqrt(1 - x^2)) with x = nu / cutoff.
inline double mtf_diffraction_limited(double frequency, const Pupil& pupil)
{
    pupil.validate();
    require(pupil.is_uniform(), "mtf_diffraction_limited needs a uniform pupil");
    const double x = std::abs(frequency) / pupil.cutoff_frequency();
    if (x >= 1)
        return 0.0;
    return (2 / pi) * (std::acos(x) - x * std::sqrt(1 - x * x));
}

// Marechal approximation, clamped at zero.
inline double strehl_from_rms(double rms_wavefront, double wavelength)
{
    require(rms_wavefront >= 0, "rms wavefront must be non-negative");
    require(wavelength > 0, "wavelength must be positive");
    const double ratio = rms_wavefront / wavelength;
    return std::max(0.0, 1 - 4 * pi * pi * ratio * ratio);
}

inline double airy_first_zero(const Pupil& pupil)
{
    return boost::math::cyl_bessel_j_zero(1.0, 1) * pupil.wavelength / (two_pi * pupil.numerical_aperture);
}

inline double airy_fwhm(const Pupil& pupil)
{
    const double zero = airy_first_zero(pupil);
    boost::math::tools::eps_tolerance<double> tol(50);
    std::uintmax_t iters = 100;
    const auto [lo, hi] = boost::math::tools::toms748_solve(
        [&](double r) { return airy_intensity(r, pupil) - 0.5; }, 1e-3 * zero, zero, tol, iters);
    return lo + hi; // 2 * midpoint
}

// ---------------------------------------------------------------------------
// Pupil sampling
// ---------------------------------------------------------------------------

namespace detail {

// Cell-centered pupil coordinates in [-1, 1].
inline std::vector<double> pupil_axis(std::size_t n)
{
    std::vector<double> u(n);
    const double du = 2.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j)
        u[j] = -1 + (static_cast<double>(j) + 0.5) * du;
    return u;
}

// Fraction of each cell inside the unit disk (4x4 supersampling).
inline Eigen::MatrixXd aperture_coverage(std::size_t n)
{
    constexpr int sub = 4;
    const auto u = pupil_axis(n);
    const double du = 2.0 / static_cast<double>(n);
    Eigen::MatrixXd w(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t j = 0; j < n; ++j) {
            const double rc = std::hypot(u[j], u[k]);
            if (rc < 1 - du) {
                w(k, j) = 1;
                continue;
            }
            if (rc > 1 + du) {
                w(k, j) = 0;
                continue;
            }
            int inside = 0;
            for (int a = 0; a < sub; ++a)
                for (int b = 0; b < sub; ++b) {
                    const double x = u[j] + du * ((a + 0.5) / sub - 0.5);
                    const double y = u[k] + du * ((b + 0.5) / sub - 0.5);
                    inside += (x * x + y * y <= 1) ? 1 : 0;
                }
            w(k, j) = static_cast<double>(inside) / (sub * sub);
        }
    }
    return w;
}

// Smoothed Gaussian noise over the aperture with piston and tilt removed,
// scaled to the requested RMS (weighted by aperture coverage).
inline Eigen::MatrixXd random_screen(const AberrationSpec& spec, const Eigen::MatrixXd& coverage)
{
    const auto n = static_cast<std::size_t>(coverage.rows());
    auto engine = make_stream(spec.screen_seed, 0);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd noise(n, n);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j)
            noise(k, j) = normal(engine);

    const double sigma = spec.screen_correlation * static_cast<double>(n) / 2;
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3 * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    for (std::ptrdiff_t i = -radius; i <= radius; ++i)
        kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));

    auto convolve = [&](const Eigen::MatrixXd& in, bool along_rows) {
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(in.rows(), in.cols());
        const auto len = static_cast<std::ptrdiff_t>(n);
        for (std::ptrdiff_t a = 0; a < len; ++a)
            for (std::ptrdiff_t b = 0; b < len; ++b) {
                double acc = 0;
                for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
                    const std::ptrdiff_t c = b + i;
                    if (c < 0 || c >= len)
                        continue;
                    acc += kernel[static_cast<std::size_t>(i + radius)] * (along_rows ? in(a, c) : in(c, a));
                }
                if (along_rows)
                    out(a, b) = acc;
                else
                    out(b, a) = acc;
            }
        return out;
    };
    Eigen::MatrixXd screen = convolve(convolve(noise, true), false);

    // Weighted least-squares removal of piston and tilt.
    const auto u = pupil_axis(n);
    Eigen::Matrix3d normal_eq = Eigen::Matrix3d::Zero();
    Eigen::Vector3d rhs = Eigen::Vector3d::Zero();
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j) {
            const double w = coverage(k, j);
            if (w == 0)
                continue;
            const Eigen::Vector3d basis(1.0, u[j], u[k]);
            normal_eq += w * basis * basis.transpose();
            rhs += w * basis * screen(k, j);
        }
    const Eigen::Vector3d coef = normal_eq.ldlt().solve(rhs);
    double sum_w = 0, sum_sq = 0;
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < n; ++j) {
            screen(k, j) -= coef[0] + coef[1] * u[j] + coef[2] * u[k];
            sum_w += coverage(k, j);
            sum_sq += coverage(k, j) * screen(k, j) * screen(k, j);
        }
    const double rms = std::sqrt(sum_sq / sum_w);
    return screen * (spec.rms_wavefront / rms);
}

} // namespace detail

// Structured part of the wavefront error at pupil coordinates (u, v).
inline double wavefront_error(const AberrationSpec& ab, double u, double v)
{
    const double rho2 = u * u + v * v;
    return ab.spherical_coefficient * rho2 * rho2 + ab.coma_coefficient * rho2 * u;
}

// ---------------------------------------------------------------------------
// Focal-plane field
// ---------------------------------------------------------------------------

// Intensity on a square transverse grid at axial offset `defocus`, computed
// as a separable matrix Fourier transform of the sampled pupil field.
// Under peak_unity_reference the map is divided by the peak an aberration-free
// uniform pupil carrying the same power would reach, so the ideal Airy spot
// peaks at exactly 1.
inline IntensityMap focal_intensity(const Pupil& pupil, const FocalGrid& grid, double defocus = 0,
                                    Normalization normalization = Normalization::peak_unity_reference)
{
    pupil.validate();
    const std::size_t n = grid.samples;
    const std::size_t np = grid.pupil_samples;
    require(n >= 64 && n % 2 == 0, "focal grid needs an even sample count >= 64");
    require(np >= 64, "pupil needs at least 64 samples across the diameter");
    require(grid.half_extent > 0, "half extent must be positive");
    const double spacing = 2 * grid.half_extent / static_cast<double>(n);
    require(spacing <= pupil.wavelength / (8 * pupil.numerical_aperture),
            "focal grid under-resolved: spacing exceeds lambda / (8 NA)");
    require(grid.half_extent >= airy_first_zero(pupil), "focal grid does not reach the first dark ring");

    const auto u = detail::pupil_axis(np);
    const Eigen::MatrixXd coverage = detail::aperture_coverage(np);
    Eigen::MatrixXd screen;
    if (pupil.aberration.rms_wavefront > 0)
        screen = detail::random_screen(pupil.aberration, coverage);

    const double k = two_pi / pupil.wavelength;
    // Paraxial defocus: phase (pi NA^2 z / lambda) rho^2.
    const double defocus_phase = pi * pupil.numerical_aperture * pupil.numerical_aperture * defocus / pupil.wavelength;

    Eigen::MatrixXcd field(np, np);
    double sum_w = 0, sum_power = 0;
    for (std::size_t r = 0; r < np; ++r) {
        for (std::size_t c = 0; c < np; ++c) {
            const double w = coverage(r, c);
            if (w == 0) {
                field(r, c) = 0;
                continue;
            }
            const double rho2 = u[c] * u[c] + u[r] * u[r];
            const double a = pupil.amplitude(std::sqrt(rho2));
            double wavefront = wavefront_error(pupil.aberration, u[c], u[r]);
            if (screen.size() > 0)
                wavefront += screen(r, c);
            const double phase = k * wavefront + defocus_phase * rho2;
            field(r, c) = w * a * std::polar(1.0, phase);
            sum_w += w;
            sum_power += w * a * a;
        }
    }

    const double scale = two_pi * pupil.numerical_aperture / pupil.wavelength;
    Eigen::MatrixXcd kernel(n, np);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = (static_cast<double>(i) - static_cast<double>(n / 2)) * spacing;
        for (std::size_t j = 0; j < np; ++j)
            kernel(i, j) = std::polar(1.0, scale * x * u[j]);
    }
    const Eigen::MatrixXcd focal = (kernel * field) * kernel.transpose();

    const double du = 2.0 / static_cast<double>(np);
    const double lambda_over_na = pupil.wavelength / pupil.numerical_aperture;
    double norm = 0, expected = 0;
    if (normalization == Normalization::peak_unity_reference) {
        norm = 1.0 / (sum_w * sum_power);
        expected = lambda_over_na * lambda_over_na / (sum_w * du * du);
    } else {
        norm = du * du * du * du;
        expected = lambda_over_na * lambda_over_na * sum_power * du * du;
    }

    IntensityMap map;
    map.grid_spacing = spacing;
    map.size = n;
    map.defocus = defocus;
    map.normalization = normalization;
    map.expected_flux = expected;
    map.samples.resize(n * n);
    for (std::size_t iy = 0; iy < n; ++iy)
        for (std::size_t ix = 0; ix < n; ++ix)
            map.samples[iy * n + ix] = std::norm(focal(static_cast<Eigen::Index>(iy), static_cast<Eigen::Index>(ix))) * norm;
    return map;
}

inline IntensityMap focal_intensity(const Pupil& pupil, double half_extent, std::size_t n_samples, double defocus)
{
    return focal_intensity(pupil, FocalGrid{half_extent, n_samples, 256}, defocus);
}

// On-axis intensity versus defocus, normalized to the in-focus value of the
// same pupil without aberrations. Only rotationally symmetric aberrations
// (spherical) are admitted.
inline std::vector<double> axial_intensity(const Pupil& pupil, std::span<const double> z_values)
{
    pupil.validate();
    require(pupil.aberration.is_rotationally_symmetric(),
            "axial_intensity supports only rotationally symmetric aberrations");
    using boost::math::quadrature::gauss_kronrod;
    const double na2 = pupil.numerical_aperture * pupil.numerical_aperture;
    const double k = two_pi / pupil.wavelength;
    const double a_s = pupil.aberration.spherical_coefficient;

    // With t = rho^2 the pupil integral becomes int_0^1 a(sqrt t) e^{i phase(t)} dt.
    const double focus = gauss_kronrod<double, 31>::integrate([&](double t) { return pupil.amplitude(std::sqrt(t)); },
                                                              0.0, 1.0, 10, 1e-13);
    std::vector<double> out;
    out.reserve(z_values.size());
    for (const double z : z_values) {
        const double half_u = pi * na2 * z / pupil.wavelength; // u / 2
        auto phase = [&](double t) { return half_u * t + k * a_s * t * t; };
        const double re = gauss_kronrod<double, 61>::integrate(
            [&](double t) { return pupil.amplitude(std::sqrt(t)) * std::cos(phase(t)); }, 0.0, 1.0, 15, 1e-13);
        const double im = gauss_kronrod<double, 61>::integrate(
            [&](double t) { return pupil.amplitude(std::sqrt(t)) * std::sin(phase(t)); }, 0.0, 1.0, 15, 1e-13);
        out.push_back((re * re + im * im) / (focus * focus));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Map analysis
// ---------------------------------------------------------------------------

// Peak ratio after rescaling both maps to equal total flux on the grid.
inline double strehl_empirical(const IntensityMap& map, const IntensityMap& reference)
{
    require(map.same_grid(reference), "strehl_empirical: maps must share grid geometry");
    const double flux_map = map.flux();
    const double flux_ref = reference.flux();
    require(flux_map > 0 && flux_ref > 0, "strehl_empirical: maps must carry positive flux");
    if (&map == &reference || map.samples == reference.samples)
        return 1.0;
    return (map.peak() / flux_map) / (reference.peak() / flux_ref);
}

// Samples along +x (direction > 0) or -x from the peak, on the peak's row.
inline std::vector<double> peak_row_profile(const IntensityMap& map, int direction)
{
    const std::size_t p = map.peak_index();
    const std::size_t iy = p / map.size;
    const std::size_t ix = p % map.size;
    std::vector<double> out;
    if (direction > 0) {
        for (std::size_t i = ix; i < map.size; ++i)
            out.push_back(map(i, iy));
    } else {
        for (std::size_t i = ix + 1; i-- > 0;)
            out.push_back(map(i, iy));
    }
    return out;
}

// Full width at half maximum of the x cross-section through the peak, with
// linear interpolation between bracketing samples.
inline double fwhm(const IntensityMap& map)
{
    require(!map.samples.empty(), "fwhm: empty map");
    auto half_width = [&](int direction) {
        const auto profile = peak_row_profile(map, direction);
        const double half = profile.front() / 2;
        for (std::size_t i = 1; i < profile.size(); ++i) {
            if (profile[i] <= half) {
                const double frac = (profile[i - 1] - half) / (profile[i - 1] - profile[i]);
                return (static_cast<double>(i - 1) + frac) * map.grid_spacing;
            }
        }
        throw NumericalFailure("fwhm: half maximum not reached inside the grid");
    };
    return half_width(+1) + half_width(-1);
}

// Distance from the peak to the first minimum of the +x cross-section,
// refined by a parabola through the three lowest samples.
inline double first_dark_ring(const IntensityMap& map)
{
    const auto profile = peak_row_profile(map, +1);
    for (std::size_t i = 1; i + 1 < profile.size(); ++i) {
        if (profile[i] <= profile[i - 1] && profile[i] < profile[i + 1]) {
            const double a = profile[i - 1], b = profile[i], c = profile[i + 1];
            const double denom = a - 2 * b + c;
            const double offset = denom > 0 ? 0.5 * (a - c) / denom : 0.0;
            return (static_cast<double>(i) + offset) * map.grid_spacing;
        }
    }
    throw NumericalFailure("first_dark_ring: no minimum inside the grid");
}

// Modulus of the 2D DFT of the map, sectioned from zero frequency along
// `azimuth` (bilinear interpolation between DFT bins) and normalized to 1 at DC.
inline MtfCurve mtf_from_psf(const IntensityMap& map, double azimuth = 0, double max_truncation = 0.01)
{
    require(map.size >= 2 && map.samples.size() == map.size * map.size, "mtf_from_psf: malformed map");
    require(map.truncated_fraction() <= max_truncation,
            "mtf_from_psf: map truncates more than the allowed fraction of the PSF energy");
    const std::size_t n = map.size;
    Eigen::FFT<double> fft;
    Eigen::MatrixXcd spectrum(n, n);
    std::vector<std::complex<double>> buf_in(n), buf_out(n);
    std::vector<double> row(n);
    for (std::size_t iy = 0; iy < n; ++iy) {
        for (std::size_t ix = 0; ix < n; ++ix)
            row[ix] = map(ix, iy);
        fft.fwd(buf_out, row);
        for (std::size_t ix = 0; ix < n; ++ix)
            spectrum(static_cast<Eigen::Index>(iy), static_cast<Eigen::Index>(ix)) = buf_out[ix];
    }
    for (std::size_t ix = 0; ix < n; ++ix) {
        for (std::size_t iy = 0; iy < n; ++iy)
            buf_in[iy] = spectrum(static_cast<Eigen::Index>(iy), static_cast<Eigen::Index>(ix));
        fft.fwd(buf_out, buf_in);
        for (std::size_t iy = 0; iy < n; ++iy)
            spectrum(static_cast<Eigen::Index>(iy), static_cast<Eigen::Index>(ix)) = buf_out[iy];
    }
    const double dc = std::abs(spectrum(0, 0));
    require(dc > 0, "mtf_from_psf: map has zero flux");

    const auto ni = static_cast<std::ptrdiff_t>(n);
    auto magnitude = [&](std::ptrdiff_t kx, std::ptrdiff_t ky) {
        const auto wrap = [ni](std::ptrdiff_t k) { return ((k % ni) + ni) % ni; };
        return std::abs(spectrum(wrap(ky), wrap(kx)));
    };

    MtfCurve curve;
    curve.azimuth = azimuth;
    const double df = 1.0 / (static_cast<double>(n) * map.grid_spacing);
    const double cx = std::cos(azimuth), cy = std::sin(azimuth);
    for (std::size_t k = 0; k <= n / 2; ++k) {
        const double fx = static_cast<double>(k) * cx, fy = static_cast<double>(k) * cy;
        const auto x0 = static_cast<std::ptrdiff_t>(std::floor(fx));
        const auto y0 = static_cast<std::ptrdiff_t>(std::floor(fy));
        const double tx = fx - static_cast<double>(x0), ty = fy - static_cast<double>(y0);
        const double v = (1 - tx) * (1 - ty) * magnitude(x0, y0) + tx * (1 - ty) * magnitude(x0 + 1, y0) +
                         (1 - tx) * ty * magnitude(x0, y0 + 1) + tx * ty * magnitude(x0 + 1, y0 + 1);
        curve.frequencies.push_back(static_cast<double>(k) * df);
        curve.values.push_back(v / dc);
    }
    return curve;
}

// ---------------------------------------------------------------------------
// Off-axis coma model
// ---------------------------------------------------------------------------

// Coma grows linearly with field height: a_c(h) = coefficient_per_length * h.
struct ComaCalibration {
    double field_height = 0;
    double target_strehl = 1;
    double achieved_strehl = 1;
    double coefficient_per_length = 0;
    AberrationSpec aberration{};

    AberrationSpec at_field(double height) const
    {
        AberrationSpec spec = aberration;
        spec.coma_coefficient = coefficient_per_length * std::abs(height);
        return spec;
    }
};

inline double strehl_with_coma(const Pupil& pupil, double coma, const FocalGrid& grid, const IntensityMap& reference)
{
    Pupil aberrated = pupil;
    aberrated.aberration = AberrationSpec{};
    aberrated.aberration.coma_coefficient = coma;
    return strehl_empirical(focal_intensity(aberrated, grid), reference);
}

inline IntensityMap reference_map(const Pupil& pupil, const FocalGrid& grid)
{
    Pupil ideal = pupil;
    ideal.aberration = AberrationSpec{};
    return focal_intensity(ideal, grid);
}

// Finds the coma coefficient giving `target_strehl` at `field_height`.
inline ComaCalibration calibrate_coma(const Pupil& pupil, double target_strehl, double field_height,
                                      const FocalGrid& grid = {})
{
    pupil.validate();
    require(target_strehl > 0 && target_strehl <= 1, "target Strehl ratio must lie in (0, 1]");
    require(field_height > 0, "field height must be positive");

    ComaCalibration cal;
    cal.field_height = field_height;
    cal.target_strehl = target_strehl;
    if (target_strehl >= 1)
        return cal;

    const IntensityMap reference = reference_map(pupil, grid);
    auto residual = [&](double coma) { return strehl_with_coma(pupil, coma, grid, reference) - target_strehl; };

    double lo = 0, hi = pupil.wavelength / 8;
    double f_hi = residual(hi);
    for (int i = 0; f_hi > 0; ++i) {
        if (i == 8)
            throw NumericalFailure("calibrate_coma: could not bracket the target Strehl ratio");
        lo = hi;
        hi *= 2;
        f_hi = residual(hi);
    }
    boost::math::tools::eps_tolerance<double> tol(24);
    std::uintmax_t iters = 40;
    const auto [a, b] = boost::math::tools::toms748_solve(residual, lo, hi, residual(lo), f_hi, tol, iters);
    if (iters >= 40)
        throw NumericalFailure("calibrate_coma: root find did not converge");
    const double coma = 0.5 * (a + b);
    cal.achieved_strehl = residual(coma) + target_strehl;
    if (std::abs(cal.achieved_strehl - target_strehl) > 0.005)
        throw NumericalFailure("calibrate_coma: achieved Strehl ratio outside tolerance");
    cal.coefficient_per_length = coma / field_height;
    cal.aberration.coma_coefficient = coma;
    return cal;
}

inline double strehl_at_field(const ComaCalibration& cal, const Pupil& pupil, double height,
                              const FocalGrid& grid = {})
{
    return strehl_with_coma(pupil, cal.coefficient_per_length * std::abs(height), grid, reference_map(pupil, grid));
}

// Field height at which the calibrated Strehl ratio falls to `threshold`.
inline double field_radius_at_strehl(const ComaCalibration& cal, const Pupil& pupil, double threshold,
                                     const FocalGrid& grid = {})
{
    require(threshold > 0 && threshold < 1, "threshold must lie in (0, 1)");
    require(cal.coefficient_per_length > 0, "calibration carries no coma");
    const IntensityMap reference = reference_map(pupil, grid);
    auto residual = [&](double h) {
        return strehl_with_coma(pupil, cal.coefficient_per_length * h, grid, reference) - threshold;
    };
    double lo = 0, hi = cal.field_height;
    double f_hi = residual(hi);
    for (int i = 0; f_hi > 0; ++i) {
        if (i == 8)
            throw NumericalFailure("field_radius_at_strehl: threshold not reached");
        lo = hi;
        hi *= 2;
        f_hi = residual(hi);
    }
    boost::math::tools::eps_tolerance<double> tol(20);
    std::uintmax_t iters = 40;
    const auto [a, b] = boost::math::tools::toms748_solve(residual, lo, hi, residual(lo), f_hi, tol, iters);
    return 0.5 * (a + b);
}

} // namespace tweezersim::diffraction
