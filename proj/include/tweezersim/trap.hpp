#pragma once

// Far-off-resonance dipole trap of a focused Gaussian beam acting on a
// two-line (D1/D2) alkali atom.

#include <cmath>
#include <optional>
#include <utility>

#include "tweezersim/constants.hpp"
#include "tweezersim/error.hpp"

namespace tweezersim::trap {

using constants::pi;
using constants::two_pi;

struct QuotedDetunings {
    double trap_wavelength;
    double d1;
    double d2;
};

struct AtomSpecies {
    double mass = 0;                 // kg
    double linewidth = 0;            // rad/s, shared by both lines
    double saturation_intensity = 0; // W/m^2
    double d1_frequency = 0;         // rad/s
    double d2_frequency = 0;         // rad/s
    // Detunings to use verbatim at one trap wavelength instead of the
    // line-frequency difference.
    std::optional<QuotedDetunings> quoted_detunings;

    void validate() const
    {
        require(mass > 0 && linewidth > 0 && saturation_intensity > 0 && d1_frequency > 0 && d2_frequency > 0,
                "atom species fields must be positive");
        require(d2_frequency > d1_frequency, "D2 line must lie above D1");
    }

    static AtomSpecies rubidium87()
    {
        namespace rb = constants::rb87;
        AtomSpecies s;
        s.mass = rb::mass;
        s.linewidth = rb::linewidth;
        s.saturation_intensity = rb::saturation_intensity;
        s.d1_frequency = two_pi * constants::speed_of_light / rb::d1_wavelength;
        s.d2_frequency = two_pi * constants::speed_of_light / rb::d2_wavelength;
        s.quoted_detunings = QuotedDetunings{rb::quoted_trap_wavelength, rb::quoted_detuning_d1, rb::quoted_detuning_d2};
        return s;
    }
};

struct TrapBeam {
    double power = 5.6e-3;
    double waist = 1.03e-6;
    double wavelength = 850e-9;

    void validate() const
    {
        require(power >= 0, "trap power must be non-negative");
        require(wavelength > 0, "trap wavelength must be positive");
        require(waist > wavelength / 4, "waist below lambda/4 is outside the Gaussian-beam model");
    }

    double rayleigh_range() const { return pi * waist * waist / wavelength; }
};

struct Detunings {
    double d1; // rad/s, line minus light frequency
    double d2;
};

struct TrapCharacteristics {
    double depth = 0;                  // J
    double waist = 0;                  // m
    double wavelength = 0;             // m
    double rayleigh_range = 0;         // m
    double radial_frequency = 0;       // rad/s
    double longitudinal_frequency = 0; // rad/s
    double detuning_d1 = 0;            // rad/s
    double detuning_d2 = 0;            // rad/s

    double depth_millikelvin() const { return depth / constants::boltzmann * 1e3; }
    double depth_megahertz() const { return depth / constants::planck * 1e-6; }
};

inline Detunings detunings(const AtomSpecies& species, double trap_wavelength)
{
    species.validate();
    require(trap_wavelength > 0, "trap wavelength must be positive");
    if (species.quoted_detunings &&
        std::abs(species.quoted_detunings->trap_wavelength - trap_wavelength) <= 1e-6 * trap_wavelength)
        return {species.quoted_detunings->d1, species.quoted_detunings->d2};
    const double light = two_pi * constants::speed_of_light / trap_wavelength;
    const Detunings d{species.d1_frequency - light, species.d2_frequency - light};
    require(d.d1 > 0 && d.d2 > 0, "trap light must be red-detuned from both D lines");
    return d;
}

// Gamma/(3 delta1) + 2 Gamma/(3 delta2): line-strength weighted inverse detuning.
inline double line_factor(const AtomSpecies& species, double trap_wavelength)
{
    const auto d = detunings(species, trap_wavelength);
    const double g = species.linewidth;
    return g / (3 * d.d1) + 2 * g / (3 * d.d2);
}

// U0 = (hbar Gamma / 4) P / (pi w0^2 I_sat) (Gamma/3d1 + 2Gamma/3d2).
inline double trap_depth(const TrapBeam& beam, const AtomSpecies& species)
{
    beam.validate();
    const double waist2 = beam.waist * beam.waist;
    return constants::hbar * species.linewidth / 4 * beam.power / (pi * waist2 * species.saturation_intensity) *
           line_factor(species, beam.wavelength);
}

// Inverts the radial trap frequency for the waist.
inline double waist_from_frequency(double power, double radial_frequency, const AtomSpecies& species,
                                   double trap_wavelength)
{
    require(power > 0, "power must be positive");
    require(radial_frequency > 0, "radial frequency must be positive");
    const double w4 = constants::hbar * species.linewidth / (species.mass * radial_frequency * radial_frequency) *
                      power / (pi * species.saturation_intensity) * line_factor(species, trap_wavelength);
    return std::pow(w4, 0.25);
}

// Harmonic frequencies (omega_r, omega_z) at the bottom of the well.
inline std::pair<double, double> oscillation_frequencies(double depth, const TrapBeam& beam, const AtomSpecies& species)
{
    beam.validate();
    species.validate();
    require(depth > 0, "trap depth must be positive");
    const double zr = beam.rayleigh_range();
    return {std::sqrt(4 * depth / (species.mass * beam.waist * beam.waist)),
            std::sqrt(2 * depth / (species.mass * zr * zr))};
}

// U(r, z) = -U0 exp(-2 r^2 / w(z)^2) / (1 + (z/zR)^2).
inline double potential(double r, double z, double depth, const TrapBeam& beam)
{
    require(depth >= 0, "trap depth must be non-negative");
    const double zr = beam.rayleigh_range();
    const double g = 1 / (1 + (z / zr) * (z / zr));
    return -depth * g * std::exp(-2 * r * r * g / (beam.waist * beam.waist));
}

inline TrapCharacteristics characterize(const TrapBeam& beam, const AtomSpecies& species)
{
    TrapCharacteristics t;
    t.depth = trap_depth(beam, species);
    t.waist = beam.waist;
    t.wavelength = beam.wavelength;
    t.rayleigh_range = beam.rayleigh_range();
    const auto d = detunings(species, beam.wavelength);
    t.detuning_d1 = d.d1;
    t.detuning_d2 = d.d2;
    if (t.depth > 0) {
        const auto [wr, wz] = oscillation_frequencies(t.depth, beam, species);
        t.radial_frequency = wr;
        t.longitudinal_frequency = wz;
    }
    return t;
}

// Trap implied by a measured radial frequency at known power.
inline std::pair<TrapBeam, TrapCharacteristics> characterize_from_frequency(double power, double radial_frequency,
                                                                            const AtomSpecies& species,
                                                                            double trap_wavelength)
{
    TrapBeam beam{power, waist_from_frequency(power, radial_frequency, species, trap_wavelength), trap_wavelength};
    return {beam, characterize(beam, species)};
}

} // namespace tweezersim::trap
