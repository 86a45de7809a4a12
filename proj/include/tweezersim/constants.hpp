#pragma once

#include <numbers>

namespace tweezersim::constants {

// Bumped whenever a value below changes; echoed in run manifests.
inline constexpr int kTableVersion = 1;

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2 * std::numbers::pi;

// CODATA 2018 exact / recommended values (SI).
inline constexpr double hbar = 1.054571817e-34;
inline constexpr double planck = 6.62607015e-34;
inline constexpr double boltzmann = 1.380649e-23;
inline constexpr double speed_of_light = 299792458.0;
inline constexpr double atomic_mass_unit = 1.66053906660e-27;

namespace rb87 {
inline constexpr double mass = 86.909180527 * atomic_mass_unit;
// Vacuum wavelengths of the D lines.
inline constexpr double d1_wavelength = 794.978851156e-9;
inline constexpr double d2_wavelength = 780.241209686e-9;
// Values as quoted for the tweezer experiment (single shared linewidth,
// D2 saturation intensity, detunings of 850 nm light).
inline constexpr double linewidth = two_pi * 6e6;
inline constexpr double saturation_intensity = 1.67e-3 / 1e-4; // 1.67 mW/cm^2
inline constexpr double quoted_trap_wavelength = 850e-9;
inline constexpr double quoted_detuning_d1 = two_pi * 2.4e13;
inline constexpr double quoted_detuning_d2 = two_pi * 3.2e13;
} // namespace rb87

} // namespace tweezersim::constants
