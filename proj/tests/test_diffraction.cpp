#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "tweezersim/diffraction.hpp"

using namespace tweezersim;
using namespace tweezersim::diffraction;

namespace {

constexpr double kPi = std::numbers::pi;

// J1 from its integral representation, Simpson's rule; independent of Boost.
double bessel_j1(double x)
{
    const int n = 400;
    const double h = kPi / n;
    double acc = 0;
    for (int i = 0; i <= n; ++i) {
        const double t = i * h;
        const double w = (i == 0 || i == n) ? 1 : (i % 2 ? 4 : 2);
        acc += w * std::cos(t - x * std::sin(t));
    }
    return acc * h / 3 / kPi;
}

double airy_oracle(double r, double na, double lambda)
{
    const double x = 2 * kPi * na * r / lambda;
    if (x == 0)
        return 1;
    const double v = 2 * bessel_j1(x) / x;
    return v * v;
}

// Circular-aperture autocorrelation, normalized to 1 at zero frequency.
double mtf_oracle(double s)
{
    if (s >= 1)
        return 0;
    return 2 / kPi * (std::acos(s) - s * std::sqrt(1 - s * s));
}

const IntensityMap& default_map()
{
    static const IntensityMap map = focal_intensity(Pupil{}, FocalGrid{});
    return map;
}

} // namespace

TEST(Airy, MatchesIntegralBessel)
{
    const Pupil p;
    for (double r : {0.0, 0.2e-6, 0.5e-6, 0.9e-6, 1.3e-6, 2.0e-6})
        EXPECT_NEAR(airy_intensity(r, p), airy_oracle(r, 0.5, 850e-9), 1e-7) << r;
}

TEST(Airy, WidthAndZeroConstants)
{
    const Pupil p;
    // (2 J1(x)/x)^2 = 1/2 at x = 1.616339948; J1 zero at 3.831705970.
    EXPECT_NEAR(airy_fwhm(p), 1.616339948 * 850e-9 / (kPi * 0.5), 1e-12);
    EXPECT_NEAR(airy_first_zero(p), 3.831705970 * 850e-9 / (2 * kPi * 0.5), 1e-12);
    EXPECT_NEAR(airy_fwhm(p), 0.875e-6, 0.001e-6);
    EXPECT_NEAR(airy_first_zero(p), 1.037e-6, 0.001e-6);
}

TEST(Airy, RejectsApodizedOrAberratedPupil)
{
    Pupil g;
    g.apodization = GaussianIllumination{1.0};
    EXPECT_THROW(airy_intensity(0, g), InvalidArgument);
    Pupil a;
    a.aberration.coma_coefficient = 100e-9;
    EXPECT_THROW(airy_intensity(0, a), InvalidArgument);
}

TEST(FocalIntensity, AgreesWithAiryWithinTwoMicrons)
{
    const auto& map = default_map();
    const std::size_t c = map.size / 2;
    double worst = 0;
    for (std::size_t ix = 0; ix < map.size; ++ix) {
        for (std::size_t iy = 0; iy < map.size; ++iy) {
            const double r = std::hypot(map.coordinate(ix), map.coordinate(iy));
            if (r <= 2e-6)
                worst = std::max(worst, std::abs(map(ix, iy) - airy_oracle(r, 0.5, 850e-9)));
        }
    }
    EXPECT_LT(worst, 0.01);
    EXPECT_NEAR(map(c, c), 1.0, 1e-6);
}

TEST(FocalIntensity, FwhmAndDarkRing)
{
    const auto& map = default_map();
    EXPECT_NEAR(fwhm(map), 0.875e-6, 0.005 * 0.875e-6);
    EXPECT_NEAR(first_dark_ring(map), 1.037e-6, 0.005 * 1.037e-6);
}

TEST(FocalIntensity, PreconditionsRejectBadGrids)
{
    EXPECT_THROW(focal_intensity(Pupil{}, FocalGrid{4e-6, 32, 256}), InvalidArgument);
    EXPECT_THROW(focal_intensity(Pupil{}, FocalGrid{4e-6, 511, 256}), InvalidArgument);
    EXPECT_THROW(focal_intensity(Pupil{}, FocalGrid{4e-6, 512, 32}), InvalidArgument);
    // spacing above lambda / (8 NA)
    EXPECT_THROW(focal_intensity(Pupil{}, FocalGrid{60e-6, 256, 256}), InvalidArgument);
    // grid smaller than the first dark ring
    EXPECT_THROW(focal_intensity(Pupil{}, FocalGrid{0.8e-6, 512, 256}), InvalidArgument);
    Pupil bad;
    bad.numerical_aperture = 1.2;
    EXPECT_THROW(focal_intensity(bad, FocalGrid{}), InvalidArgument);
}

TEST(FocalIntensity, FluxInvariantUnderPhaseAberrations)
{
    const FocalGrid wide{24e-6, 512, 256};
    const auto ref = focal_intensity(Pupil{}, wide);
    for (auto ab : {AberrationSpec{0, 600e-9, 0}, AberrationSpec{0, 0, 400e-9}, AberrationSpec{60e-9, 0, 0}}) {
        Pupil p;
        p.aberration = ab;
        const auto map = focal_intensity(p, wide);
        EXPECT_NEAR(map.flux() / ref.flux(), 1.0, 0.005);
        EXPECT_NEAR(map.expected_flux, ref.expected_flux, 1e-9 * ref.expected_flux);
    }
}

TEST(FocalIntensity, WideGridCapturesExpectedFlux)
{
    const auto map = focal_intensity(Pupil{}, FocalGrid{24e-6, 512, 256});
    EXPECT_LT(map.truncated_fraction(), 0.01);
    EXPECT_GT(map.truncated_fraction(), 0.0);
    // Encircled energy outside radius R of an Airy spot ~ 2 / (pi x) with
    // x = 2 pi NA R / lambda; the square grid sits between the inscribed
    // and circumscribed circles.
    const double x_in = 2 * kPi * 0.5 * 24e-6 / 850e-9;
    EXPECT_LT(map.truncated_fraction(), 2 / (kPi * x_in) * 1.05);
    EXPECT_GT(map.truncated_fraction(), 2 / (kPi * x_in * std::sqrt(2.0)) * 0.95);
}

TEST(FocalIntensity, DefocusMatchesAxialValue)
{
    for (double z : {1e-6, 3e-6}) {
        const auto map = focal_intensity(Pupil{}, FocalGrid{}, z);
        const std::size_t c = map.size / 2;
        const double zs[1] = {z};
        EXPECT_NEAR(map(c, c), axial_intensity(Pupil{}, zs)[0], 2e-4) << z;
    }
}

TEST(FocalIntensity, ScreenIsReproducibleAndSeedDependent)
{
    Pupil a;
    a.aberration.rms_wavefront = 850e-9 / 14;
    Pupil b = a;
    b.aberration.screen_seed = 2;
    const auto m1 = focal_intensity(a, FocalGrid{4e-6, 128, 128});
    const auto m2 = focal_intensity(a, FocalGrid{4e-6, 128, 128});
    const auto m3 = focal_intensity(b, FocalGrid{4e-6, 128, 128});
    EXPECT_EQ(m1.samples, m2.samples);
    EXPECT_NE(m1.samples, m3.samples);
}

TEST(Strehl, FromRms)
{
    EXPECT_DOUBLE_EQ(strehl_from_rms(0, 850e-9), 1.0);
    EXPECT_NEAR(strehl_from_rms(850e-9 / 14, 850e-9), 1 - 4 * kPi * kPi / 196, 1e-12);
    EXPECT_NEAR(strehl_from_rms(850e-9 / 14, 850e-9), 0.799, 0.0005);
    EXPECT_NEAR(strehl_from_rms(850e-9 / 30, 850e-9), 0.956, 0.0005);
    EXPECT_DOUBLE_EQ(strehl_from_rms(850e-9, 850e-9), 0.0);
    EXPECT_THROW(strehl_from_rms(-1e-9, 850e-9), InvalidArgument);
}

TEST(Strehl, IdenticalMapsGiveOne)
{
    EXPECT_DOUBLE_EQ(strehl_empirical(default_map(), default_map()), 1.0);
}

TEST(Strehl, MismatchedGridsRejected)
{
    const auto small = focal_intensity(Pupil{}, FocalGrid{4e-6, 256, 256});
    EXPECT_THROW(strehl_empirical(small, default_map()), InvalidArgument);
}

// The quadratic Strehl formula is a second-order expansion; for a Gaussian
// phase screen the exact expectation is exp(-sigma^2). Its gap to
// 1 - sigma^2 stays below 0.03 up to about lambda/13.
TEST(Strehl, RandomScreenConsistentWithRmsFormula)
{
    const Pupil ideal;
    const auto ref = reference_map(ideal, FocalGrid{});
    for (double d : {30.0, 20.0, 14.0}) {
        for (std::uint64_t seed : {1, 2, 3}) {
            Pupil p;
            p.aberration.rms_wavefront = ideal.wavelength / d;
            p.aberration.screen_seed = seed;
            const double s = strehl_empirical(focal_intensity(p, FocalGrid{}), ref);
            EXPECT_NEAR(s, strehl_from_rms(p.aberration.rms_wavefront, ideal.wavelength), 0.03) << d;
        }
    }
}

TEST(Strehl, RandomScreenFollowsGaussianPhaseLaw)
{
    const Pupil ideal;
    const auto ref = reference_map(ideal, FocalGrid{});
    for (double d : {14.0, 10.0}) {
        Pupil p;
        p.aberration.rms_wavefront = ideal.wavelength / d;
        const double sigma = 2 * kPi / d;
        EXPECT_NEAR(strehl_empirical(focal_intensity(p, FocalGrid{}), ref), std::exp(-sigma * sigma), 0.03) << d;
    }
}

TEST(Strehl, NonIncreasingInComa)
{
    const Pupil ideal;
    const auto ref = reference_map(ideal, FocalGrid{});
    double previous = 1.0;
    for (double c = 0; c <= 1.0; c += 0.1) {
        const double s = strehl_with_coma(ideal, c * ideal.wavelength, FocalGrid{}, ref);
        EXPECT_LE(s, previous + 1e-12) << c;
        previous = s;
    }
    EXPECT_LT(previous, 0.7);
}

TEST(Coma, CalibrationReproducesTarget)
{
    const Pupil p;
    const auto cal = calibrate_coma(p, 0.77, 30e-6);
    EXPECT_NEAR(cal.achieved_strehl, 0.77, 0.005);
    EXPECT_NEAR(cal.coefficient_per_length * 30e-6, cal.aberration.coma_coefficient, 1e-18);
    EXPECT_GE(strehl_at_field(cal, p, 25e-6), 0.8);
    EXPECT_GE(strehl_at_field(cal, p, 10e-6), strehl_at_field(cal, p, 25e-6));
    const double r = field_radius_at_strehl(cal, p, 0.8);
    EXPECT_GT(r, 25e-6);
    EXPECT_LT(r, 30e-6);
    EXPECT_NEAR(strehl_at_field(cal, p, r), 0.8, 1e-3);
}

TEST(Coma, TargetOneMeansNoComa)
{
    const auto cal = calibrate_coma(Pupil{}, 1.0, 30e-6);
    EXPECT_EQ(cal.aberration.coma_coefficient, 0.0);
    EXPECT_THROW(calibrate_coma(Pupil{}, 0.0, 30e-6), InvalidArgument);
    EXPECT_THROW(calibrate_coma(Pupil{}, 0.5, 0.0), InvalidArgument);
}

TEST(Axial, MatchesParaxialSinc)
{
    const Pupil p;
    std::vector<double> z;
    for (double v = -10e-6; v <= 10e-6; v += 0.25e-6)
        z.push_back(v);
    const auto in = axial_intensity(p, z);
    const double k = kPi * 0.25 / (2 * 850e-9);
    for (std::size_t i = 0; i < z.size(); ++i) {
        const double a = k * z[i];
        const double s = a == 0 ? 1 : std::sin(a) / a;
        EXPECT_NEAR(in[i], s * s, 1e-9) << z[i];
    }
}

TEST(Axial, ZeroAndHalfWidth)
{
    const Pupil p;
    // Zero at z = 2 lambda / NA^2; half maximum at sinc argument 1.39155737.
    const double zero = 2 * 850e-9 / 0.25;
    const double half = 2 * 1.391557377922 * 2 * 850e-9 / (kPi * 0.25);
    const double zs[3] = {zero, half / 2, -half / 2};
    const auto v = axial_intensity(p, zs);
    EXPECT_NEAR(v[0], 0.0, 1e-12);
    EXPECT_NEAR(v[1], 0.5, 1e-9);
    EXPECT_NEAR(v[2], 0.5, 1e-9);
    EXPECT_NEAR(zero, 6.8e-6, 0.01 * 6.8e-6);
    EXPECT_NEAR(half, 6.0e-6, 0.01 * 6.0e-6);
}

TEST(Axial, GaussianApodizationKeepsPeakAtOne)
{
    Pupil p;
    p.apodization = GaussianIllumination{1.0};
    const double zs[2] = {0.0, 6.8e-6};
    const auto v = axial_intensity(p, zs);
    EXPECT_NEAR(v[0], 1.0, 1e-9);
    EXPECT_GT(v[1], 1e-4); // apodization fills in the axial zero
}

TEST(Axial, RejectsAsymmetricAberration)
{
    Pupil p;
    p.aberration.coma_coefficient = 100e-9;
    const double zs[1] = {0.0};
    EXPECT_THROW(axial_intensity(p, zs), InvalidArgument);
}

TEST(Apodization, GaussianPupilBroadensSpot)
{
    Pupil g;
    g.apodization = GaussianIllumination{1.0};
    const double ratio = fwhm(focal_intensity(g, FocalGrid{})) / fwhm(default_map());
    EXPECT_NEAR(ratio, 1.09, 0.02);
}

TEST(Mtf, ClosedFormReference)
{
    const Pupil p;
    const double cutoff = 2 * 0.5 / 850e-9;
    EXPECT_NEAR(p.cutoff_frequency(), cutoff, 1e-6);
    EXPECT_NEAR(cutoff * 1e-6, 1.176, 0.001);
    for (double s : {0.0, 0.1, 0.25, 0.5, 0.75, 0.99, 1.0, 1.5})
        EXPECT_NEAR(mtf_diffraction_limited(s * cutoff, p), mtf_oracle(s), 1e-12) << s;
    EXPECT_NEAR(mtf_diffraction_limited(cutoff / 2, p), 0.391, 0.001);
}

TEST(Mtf, FromPsfMatchesAutocorrelation)
{
    const Pupil p;
    const auto map = focal_intensity(p, FocalGrid{24e-6, 512, 256});
    const auto curve = mtf_from_psf(map);
    ASSERT_GT(curve.frequencies.size(), 10u);
    for (std::size_t i = 0; i < curve.frequencies.size(); ++i)
        EXPECT_NEAR(curve.values[i], mtf_oracle(curve.frequencies[i] / p.cutoff_frequency()), 0.02) << i;
    // Same along the diagonal.
    const auto diag = mtf_from_psf(map, kPi / 4);
    for (std::size_t i = 0; i < diag.frequencies.size(); ++i)
        EXPECT_NEAR(diag.values[i], mtf_oracle(diag.frequencies[i] / p.cutoff_frequency()), 0.02) << i;
}

TEST(Mtf, DeltaPsfIsFlat)
{
    IntensityMap delta;
    delta.size = 64;
    delta.grid_spacing = 50e-9;
    delta.samples.assign(64 * 64, 0.0);
    delta.samples[32 * 64 + 32] = 1.0;
    const auto curve = mtf_from_psf(delta);
    for (double v : curve.values)
        EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(Mtf, RejectsTruncatedPsf)
{
    EXPECT_THROW(mtf_from_psf(default_map()), InvalidArgument);
}

TEST(Mtf, ComaLowersMidFrequencies)
{
    Pupil p;
    p.aberration.coma_coefficient = 0.7 * p.wavelength;
    const auto on = mtf_from_psf(focal_intensity(Pupil{}, FocalGrid{24e-6, 512, 256}));
    const auto off = mtf_from_psf(focal_intensity(p, FocalGrid{24e-6, 512, 256}));
    std::size_t mid = 0;
    while (on.frequencies[mid] < p.cutoff_frequency() / 2)
        ++mid;
    EXPECT_LT(off.values[mid], on.values[mid]);
}
