#pragma once

// Classical Monte-Carlo of a single atom in the tweezer: thermal sampling,
// free flight, trapped evolution and the two-pulse release-recapture probe.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "tweezersim/constants.hpp"
#include "tweezersim/error.hpp"
#include "tweezersim/least_squares.hpp"
#include "tweezersim/random.hpp"
#include "tweezersim/trap.hpp"

namespace tweezersim::atomdyn {

using constants::pi;
using constants::two_pi;
using trap::AtomSpecies;
using trap::TrapBeam;
using trap::TrapCharacteristics;

struct PhaseSpaceState {
    Eigen::Vector3d position = Eigen::Vector3d::Zero(); // x, y radial; z axial
    Eigen::Vector3d velocity = Eigen::Vector3d::Zero();
};

struct ThermalEnsemble {
    double temperature = 0; // K
    std::size_t count = 1;
    std::uint64_t seed = 0;
};

struct PulseSequence {
    double first_off = 1.3e-6;
    double gap = 0;
    double second_off = 6.2e-6;
    double probe_window = 50e-3;

    void validate() const
    {
        require(first_off >= 0 && gap >= 0 && second_off >= 0 && probe_window >= 0,
                "pulse durations must be non-negative");
        require(first_off + gap + second_off <= probe_window, "pulse sequence longer than the probe window");
    }
};

struct RecaptureCurve {
    std::vector<double> gaps;
    std::vector<double> survival;
    std::vector<std::size_t> survivor_counts;
    std::size_t trials_per_point = 0;

    // Binomial standard error of point i.
    double standard_error(std::size_t i) const
    {
        const double p = survival[i];
        return std::sqrt(p * (1 - p) / static_cast<double>(trials_per_point));
    }
};

struct EllipseStats {
    double angle = 45;     // degrees, long axis vs position axis
    double axis_ratio = 1; // long / short standard deviation
};

// ---------------------------------------------------------------------------
// Phase-space ellipse
// ---------------------------------------------------------------------------

// Orientation and elongation of a 2x2 covariance [[a, b], [b, c]].
inline EllipseStats ellipse_from_covariance(double a, double b, double c)
{
    const double mean = 0.5 * (a + c);
    const double diff = 0.5 * (a - c);
    const double root = std::sqrt(diff * diff + b * b);
    const double major = mean + root, minor = mean - root;
    require(minor > 0, "covariance must be positive definite");
    EllipseStats e;
    e.axis_ratio = std::sqrt(major / minor);
    e.angle = (root == 0) ? 45.0 : 0.5 * std::atan2(2 * b, a - c) * 180 / pi;
    return e;
}

// Shear of an isotropic distribution in (x, v_x / omega_r) by free flight:
// covariance [[1 + s^2, s], [s, 1]] with s = omega_r * free_flight.
inline EllipseStats ellipse_stats(double radial_frequency, double free_flight)
{
    require(free_flight >= 0, "free flight duration must be non-negative");
    require(radial_frequency > 0, "radial frequency must be positive");
    const double s = radial_frequency * free_flight;
    EllipseStats e = ellipse_from_covariance(1 + s * s, s, 1);
    e.angle = (s == 0) ? 45.0 : 0.5 * std::atan(2 / s) * 180 / pi;
    return e;
}

// Sample covariance of (x, v_x / omega_r) over an ensemble.
inline Eigen::Matrix2d scaled_covariance(std::span<const PhaseSpaceState> states, double radial_frequency)
{
    require(!states.empty(), "empty ensemble");
    Eigen::Vector2d mean = Eigen::Vector2d::Zero();
    for (const auto& s : states)
        mean += Eigen::Vector2d(s.position.x(), s.velocity.x() / radial_frequency);
    mean /= static_cast<double>(states.size());
    Eigen::Matrix2d cov = Eigen::Matrix2d::Zero();
    for (const auto& s : states) {
        const Eigen::Vector2d d = Eigen::Vector2d(s.position.x(), s.velocity.x() / radial_frequency) - mean;
        cov += d * d.transpose();
    }
    return cov / static_cast<double>(states.size());
}

// ---------------------------------------------------------------------------
// Sampling and propagation
// ---------------------------------------------------------------------------

// Single thermal state drawn from substream `index` of `seed`.
inline PhaseSpaceState sample_thermal_state(double temperature, const TrapCharacteristics& trap,
                                            const AtomSpecies& species, std::uint64_t seed, std::uint64_t index)
{
    PhaseSpaceState s;
    if (temperature == 0)
        return s;
    auto engine = make_stream(seed, index);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double kt_over_m = constants::boltzmann * temperature / species.mass;
    const double sigma_v = std::sqrt(kt_over_m);
    const double sigma_r = sigma_v / trap.radial_frequency;
    const double sigma_z = sigma_v / trap.longitudinal_frequency;
    s.position = {sigma_r * normal(engine), sigma_r * normal(engine), sigma_z * normal(engine)};
    s.velocity = {sigma_v * normal(engine), sigma_v * normal(engine), sigma_v * normal(engine)};
    return s;
}

// Boltzmann distribution of the harmonic approximation of the trap.
inline std::vector<PhaseSpaceState> sample_thermal(const ThermalEnsemble& ensemble, const TrapCharacteristics& trap,
                                                   const AtomSpecies& species, unsigned threads = 1)
{
    require(ensemble.temperature >= 0, "temperature must be non-negative");
    require(ensemble.count >= 1, "ensemble needs at least one atom");
    require(constants::boltzmann * ensemble.temperature < trap.depth, "k_B T must stay below the trap depth");
    std::vector<PhaseSpaceState> states(ensemble.count);
    parallel_for(ensemble.count, threads, [&](std::size_t i) {
        states[i] = sample_thermal_state(ensemble.temperature, trap, species, ensemble.seed, i);
    });
    return states;
}

// Ballistic motion with the trap off; gravity neglected.
inline PhaseSpaceState free_flight(const PhaseSpaceState& state, double duration)
{
    require(duration >= 0, "free flight duration must be non-negative");
    return {state.position + state.velocity * duration, state.velocity};
}

// Potential and force of the Gaussian beam, with precomputed scales.
class BeamField {
public:
    BeamField(const TrapCharacteristics& trap, const AtomSpecies& species)
        : depth_(trap.depth), inv_w2_(1 / (trap.waist * trap.waist)), zr_(trap.rayleigh_range), mass_(species.mass)
    {
        require(trap.depth > 0 && trap.waist > 0 && trap.rayleigh_range > 0, "trap characteristics incomplete");
    }

    double potential(const Eigen::Vector3d& p) const
    {
        const double zeta = p.z() / zr_;
        const double g = 1 / (1 + zeta * zeta);
        const double r2 = p.x() * p.x() + p.y() * p.y();
        return -depth_ * g * std::exp(-2 * r2 * g * inv_w2_);
    }

    Eigen::Vector3d acceleration(const Eigen::Vector3d& p) const
    {
        const double zeta = p.z() / zr_;
        const double g = 1 / (1 + zeta * zeta);
        const double r2 = p.x() * p.x() + p.y() * p.y();
        const double e = std::exp(-2 * r2 * g * inv_w2_);
        const double radial = -4 * depth_ * g * g * e * inv_w2_;
        const double axial = -depth_ * (2 * zeta / zr_) * g * g * e * (1 - 2 * r2 * g * inv_w2_);
        return Eigen::Vector3d(radial * p.x(), radial * p.y(), axial) / mass_;
    }

    double energy(const PhaseSpaceState& s) const { return 0.5 * mass_ * s.velocity.squaredNorm() + potential(s.position); }

private:
    double depth_;
    double inv_w2_;
    double zr_;
    double mass_;
};

// Largest admissible integration step: 50 steps per radial period.
inline double max_step(const TrapCharacteristics& trap) { return two_pi / trap.radial_frequency / 50; }

// One velocity-Verlet step of size h; `a` holds the acceleration at the
// current position on entry and at the new position on exit.
inline void verlet_step(Eigen::Vector3d& x, Eigen::Vector3d& v, Eigen::Vector3d& a, const BeamField& field, double h)
{
    v += 0.5 * h * a;
    x += h * v;
    a = field.acceleration(x);
    v += 0.5 * h * a;
}

// Velocity-Verlet integration in the full Gaussian-beam potential: whole
// steps of `step`, then one shorter step for the remainder.
inline PhaseSpaceState evolve_trapped(const PhaseSpaceState& state, const BeamField& field, double duration,
                                      double step)
{
    require(duration >= 0, "duration must be non-negative");
    require(step > 0, "step must be positive");
    const auto n = static_cast<std::size_t>(std::floor(duration / step + 1e-9));
    const double rest = duration - static_cast<double>(n) * step;
    Eigen::Vector3d x = state.position, v = state.velocity;
    Eigen::Vector3d a = field.acceleration(x);
    for (std::size_t i = 0; i < n; ++i)
        verlet_step(x, v, a, field, step);
    if (rest > 1e-9 * step)
        verlet_step(x, v, a, field, rest);
    return {x, v};
}

inline PhaseSpaceState evolve_trapped(const PhaseSpaceState& state, const TrapCharacteristics& trap,
                                      const TrapBeam& beam, const AtomSpecies& species, double duration, double step)
{
    require(std::abs(beam.waist - trap.waist) <= 1e-12 * trap.waist, "beam and trap characteristics disagree");
    require(step <= max_step(trap) * (1 + 1e-12), "integration step exceeds 1/50 of the radial period");
    return evolve_trapped(state, BeamField(trap, species), duration, step);
}

// ---------------------------------------------------------------------------
// Release and recapture
// ---------------------------------------------------------------------------

struct RecaptureOptions {
    // Integration step as a fraction of the radial period.
    double steps_per_period = 200;
    unsigned threads = 1;
};

struct RecaptureResult {
    std::size_t survivors = 0;
    std::size_t trials = 0;
    double probability() const { return trials ? static_cast<double>(survivors) / static_cast<double>(trials) : 0.0; }
};

// Fate of one atom (substream `index` of `seed`) for each gap in ascending
// `gaps`: bound (E < 0) at the end of the second release. A single trapped
// trajectory is shared by all gaps; each gap branches off it with one partial
// step, so a one-gap call reproduces evolve_trapped exactly.
inline void survival_over_gaps(const TrapCharacteristics& trap, const BeamField& field, const AtomSpecies& species,
                               double temperature, double first_off, double second_off, std::span<const double> gaps,
                               double step, std::uint64_t seed, std::uint64_t index, std::span<unsigned char> alive)
{
    PhaseSpaceState s = free_flight(sample_thermal_state(temperature, trap, species, seed, index), first_off);
    Eigen::Vector3d x = s.position, v = s.velocity;
    Eigen::Vector3d a = field.acceleration(x);
    std::size_t done = 0;
    for (std::size_t g = 0; g < gaps.size(); ++g) {
        const auto n = static_cast<std::size_t>(std::floor(gaps[g] / step + 1e-9));
        for (; done < n; ++done)
            verlet_step(x, v, a, field, step);
        PhaseSpaceState branch{x, v};
        const double rest = gaps[g] - static_cast<double>(n) * step;
        if (rest > 1e-9 * step) {
            Eigen::Vector3d bx = x, bv = v, ba = a;
            verlet_step(bx, bv, ba, field, rest);
            branch = {bx, bv};
        }
        alive[g] = field.energy(free_flight(branch, second_off)) < 0 ? 1 : 0;
    }
}

inline RecaptureResult simulate_release_recapture(const TrapCharacteristics& trap, const TrapBeam& beam,
                                                  const AtomSpecies& species, double temperature,
                                                  const PulseSequence& seq, std::size_t trials, std::uint64_t seed,
                                                  const RecaptureOptions& options = {})
{
    seq.validate();
    require(trials >= 1, "need at least one trial");
    require(temperature >= 0 && constants::boltzmann * temperature < trap.depth,
            "temperature must satisfy 0 <= k_B T < U0");
    require(options.steps_per_period >= 50, "at least 50 integration steps per radial period required");
    require(std::abs(beam.waist - trap.waist) <= 1e-12 * trap.waist, "beam and trap characteristics disagree");
    const BeamField field(trap, species);
    const double step = two_pi / trap.radial_frequency / options.steps_per_period;
    std::vector<unsigned char> alive(trials);
    parallel_for(trials, options.threads, [&](std::size_t i) {
        const double gap[1] = {seq.gap};
        survival_over_gaps(trap, field, species, temperature, seq.first_off, seq.second_off, gap, step, seed, i,
                           std::span<unsigned char>(&alive[i], 1));
    });
    RecaptureResult r;
    r.trials = trials;
    for (const auto a : alive)
        r.survivors += a;
    return r;
}

// Survival versus gap. Every gap reuses the same initial atoms (substream i
// of `seed` for trial i), so curve points differ only through the dynamics.
inline RecaptureCurve recapture_curve(const TrapCharacteristics& trap, const TrapBeam& beam,
                                      const AtomSpecies& species, double temperature, double first_off,
                                      double second_off, std::span<const double> gaps, std::size_t trials,
                                      std::uint64_t seed, const RecaptureOptions& options = {})
{
    require(!gaps.empty(), "gaps must be non-empty");
    require(std::is_sorted(gaps.begin(), gaps.end()), "gaps must be ascending");
    require(gaps.front() >= 0, "gaps must be non-negative");
    PulseSequence{first_off, gaps.back(), second_off, std::max(50e-3, first_off + gaps.back() + second_off)}.validate();
    require(trials >= 1, "need at least one trial");
    require(temperature >= 0 && constants::boltzmann * temperature < trap.depth,
            "temperature must satisfy 0 <= k_B T < U0");
    require(options.steps_per_period >= 50, "at least 50 integration steps per radial period required");
    require(std::abs(beam.waist - trap.waist) <= 1e-12 * trap.waist, "beam and trap characteristics disagree");

    const BeamField field(trap, species);
    const double step = two_pi / trap.radial_frequency / options.steps_per_period;
    const std::size_t m = gaps.size();
    std::vector<unsigned char> alive(trials * m);
    parallel_for(trials, options.threads, [&](std::size_t i) {
        survival_over_gaps(trap, field, species, temperature, first_off, second_off, gaps, step, seed, i,
                           std::span<unsigned char>(alive.data() + i * m, m));
    });

    RecaptureCurve curve;
    curve.trials_per_point = trials;
    curve.gaps.assign(gaps.begin(), gaps.end());
    curve.survivor_counts.assign(m, 0);
    for (std::size_t i = 0; i < trials; ++i)
        for (std::size_t g = 0; g < m; ++g)
            curve.survivor_counts[g] += alive[i * m + g];
    for (std::size_t g = 0; g < m; ++g)
        curve.survival.push_back(static_cast<double>(curve.survivor_counts[g]) / static_cast<double>(trials));
    return curve;
}

// ---------------------------------------------------------------------------
// Damped-sine analysis
// ---------------------------------------------------------------------------

struct DampedSineFit {
    double angular_frequency = 0; // omega_fit of the survival oscillation, rad/s
    double damping_time = 0;      // s
    double amplitude = 0;
    double phase = 0;
    double offset = 0;
    // One-sigma errors, same order as the fields above.
    double angular_frequency_error = 0;
    double damping_time_error = 0;
    double amplitude_error = 0;
    double phase_error = 0;
    double offset_error = 0;
    double residual_rms = 0;
    int evaluations = 0;

    // The survival probability oscillates at twice the atom frequency.
    double atom_frequency() const { return angular_frequency / 2; }
};

inline double damped_sine(double t, double offset, double amplitude, double tau, double omega, double phase)
{
    return offset + amplitude * std::exp(-t / tau) * std::sin(omega * t + phase);
}

// Angular frequency of the largest zero-padded DFT component of the
// linearly detrended samples, searched above the record's fundamental.
inline double dominant_frequency(std::span<const double> t, std::span<const double> y, int padding = 16)
{
    require(t.size() == y.size() && t.size() >= 4, "need at least four samples");
    const auto n = static_cast<double>(t.size());
    const double tm = std::accumulate(t.begin(), t.end(), 0.0) / n;
    const double ym = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double stt = 0, sty = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
        stt += (t[i] - tm) * (t[i] - tm);
        sty += (t[i] - tm) * (y[i] - ym);
    }
    const double slope = stt > 0 ? sty / stt : 0;
    const double span = t.back() - t.front();
    require(span > 0, "samples must span a positive interval");
    const double dt = span / (n - 1);
    const double df = 1 / (span * padding);
    const double nyquist = 0.5 / dt;
    double best_f = 0, best_power = -1;
    for (double f = 1 / span; f <= nyquist; f += df) {
        std::complex<double> acc = 0;
        for (std::size_t i = 0; i < t.size(); ++i)
            acc += (y[i] - ym - slope * (t[i] - tm)) * std::polar(1.0, -two_pi * f * t[i]);
        if (std::norm(acc) > best_power) {
            best_power = std::norm(acc);
            best_f = f;
        }
    }
    return two_pi * best_f;
}

// Least-squares fit of C + A exp(-t/tau) sin(omega t + phi) to the curve.
inline DampedSineFit fit_damped_sine(std::span<const double> t, std::span<const double> y)
{
    require(t.size() == y.size(), "time and value arrays differ in length");
    require(t.size() >= 10, "damped-sine fit needs at least 10 points");
    const auto n = static_cast<double>(y.size());
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double var = 0;
    for (const double v : y)
        var += (v - mean) * (v - mean);
    var /= n;
    require(var > 1e-12, "damped-sine fit: data are flat");

    const double span = t.back() - t.front();
    const double omega0 = dominant_frequency(t, y);
    require(omega0 * span / two_pi >= 1.5, "data span fewer than 1.5 oscillation periods");

    // Linear least squares for offset and quadrature amplitudes at omega0.
    Eigen::MatrixXd design(t.size(), 3);
    Eigen::VectorXd obs(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        design(static_cast<Eigen::Index>(i), 0) = 1;
        design(static_cast<Eigen::Index>(i), 1) = std::sin(omega0 * t[i]);
        design(static_cast<Eigen::Index>(i), 2) = std::cos(omega0 * t[i]);
        obs[static_cast<Eigen::Index>(i)] = y[i];
    }
    const Eigen::Vector3d lin = design.colPivHouseholderQr().solve(obs);
    const double amp0 = std::hypot(lin[1], lin[2]);
    const double phase0 = std::atan2(lin[2], lin[1]);

    // Parameters scaled to order unity: time in units of the record span.
    const double t0 = span;
    auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
        const double tau = t0 * std::exp(p[2]);
        for (std::size_t i = 0; i < t.size(); ++i)
            r[static_cast<Eigen::Index>(i)] = damped_sine(t[i], p[0], p[1], tau, p[3] / t0, p[4]) - y[i];
    };
    Eigen::VectorXd p0(5);
    p0 << lin[0], amp0, std::log(1.0), omega0 * t0, phase0;
    const auto fit = least_squares(residual, p0, static_cast<Eigen::Index>(t.size()));
    if (!fit.converged)
        throw NumericalFailure("damped-sine fit did not converge");

    DampedSineFit out;
    const auto& p = fit.parameters;
    out.offset = p[0];
    out.amplitude = p[1];
    out.damping_time = t0 * std::exp(p[2]);
    out.angular_frequency = p[3] / t0;
    out.phase = p[4];
    if (out.amplitude < 0) {
        out.amplitude = -out.amplitude;
        out.phase += pi;
    }
    if (out.angular_frequency < 0) {
        out.angular_frequency = -out.angular_frequency;
        out.phase = pi - out.phase;
    }
    out.phase = std::remainder(out.phase, two_pi);
    out.offset_error = std::sqrt(fit.variance[0]);
    out.amplitude_error = std::sqrt(fit.variance[1]);
    out.damping_time_error = out.damping_time * std::sqrt(fit.variance[2]);
    out.angular_frequency_error = std::sqrt(fit.variance[3]) / t0;
    out.phase_error = std::sqrt(fit.variance[4]);
    out.residual_rms = fit.residual_rms;
    out.evaluations = fit.evaluations;
    return out;
}

inline DampedSineFit fit_damped_sine(const RecaptureCurve& curve)
{
    return fit_damped_sine(std::span<const double>(curve.gaps), std::span<const double>(curve.survival));
}

} // namespace tweezersim::atomdyn
