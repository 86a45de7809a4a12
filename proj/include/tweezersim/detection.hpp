#pragma once

// Photon counting and imaging of single trapped atoms: collection budget,
// Poisson threshold discrimination, blockade telegraph signal, synthetic CCD
// frames and Gaussian spot fitting.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "tweezersim/diffraction.hpp"
#include "tweezersim/error.hpp"
#include "tweezersim/least_squares.hpp"
#include "tweezersim/random.hpp"

namespace tweezersim::detection {

// ---------------------------------------------------------------------------
// Collection efficiency
// ---------------------------------------------------------------------------

// Fraction of 4 pi inside the cone of half-angle asin(NA).
inline double solid_angle_fraction(double numerical_aperture)
{
    require(numerical_aperture >= 0 && numerical_aperture <= 1, "numerical aperture must lie in [0, 1]");
    return (1 - std::sqrt(1 - numerical_aperture * numerical_aperture)) / 2;
}

struct EfficiencyTerm {
    std::string label;
    double factor = 1;
};

struct EfficiencyBudget {
    std::vector<EfficiencyTerm> terms;
    double total = 1;
};

inline EfficiencyBudget overall_efficiency(std::span<const EfficiencyTerm> terms)
{
    EfficiencyBudget budget;
    for (const auto& t : terms) {
        require(t.factor > 0 && t.factor <= 1, "efficiency factor '" + t.label + "' must lie in (0, 1]");
        budget.terms.push_back(t);
        budget.total *= t.factor;
    }
    return budget;
}

// ---------------------------------------------------------------------------
// Poisson discrimination
// ---------------------------------------------------------------------------

inline double log_poisson_pmf(double mean, std::int64_t k)
{
    if (mean == 0)
        return k == 0 ? 0.0 : -std::numeric_limits<double>::infinity();
    return static_cast<double>(k) * std::log(mean) - mean - std::lgamma(static_cast<double>(k) + 1);
}

// log P(X >= k) for X ~ Poisson(mean), summed in the log domain.
inline double log_poisson_upper_tail(double mean, std::int64_t k)
{
    if (k <= 0)
        return 0.0;
    // Terms decrease once j exceeds the mode; start from the largest one.
    const auto start = std::max<std::int64_t>(k, static_cast<std::int64_t>(std::floor(mean)));
    double lead = log_poisson_pmf(mean, start);
    double acc = 0;
    for (std::int64_t j = start; j >= k; --j) {
        const double rel = log_poisson_pmf(mean, j) - lead;
        if (rel < -745 && j < start)
            break;
        acc += std::exp(rel);
    }
    for (std::int64_t j = start + 1;; ++j) {
        const double rel = log_poisson_pmf(mean, j) - lead;
        acc += std::exp(rel);
        if (rel < -40)
            break;
    }
    return lead + std::log(acc);
}

// log P(X < k) for X ~ Poisson(mean).
inline double log_poisson_lower_tail(double mean, std::int64_t k)
{
    if (k <= 0)
        return -std::numeric_limits<double>::infinity();
    const auto mode = static_cast<std::int64_t>(std::floor(mean));
    const std::int64_t top = std::min<std::int64_t>(k - 1, mode);
    const double lead = log_poisson_pmf(mean, top);
    double acc = 0;
    for (std::int64_t j = top; j >= 0; --j) {
        const double rel = log_poisson_pmf(mean, j) - lead;
        acc += std::exp(rel);
        if (rel < -40)
            break;
    }
    for (std::int64_t j = top + 1; j < k; ++j)
        acc += std::exp(log_poisson_pmf(mean, j) - lead);
    return lead + std::log(acc);
}

struct ThresholdChoice {
    std::int64_t threshold = 0; // "atom present" iff counts >= threshold
    double false_positive = 0;  // P(background >= threshold)
    double false_negative = 0;  // P(atom < threshold)
    double confidence() const { return 1 - std::max(false_positive, false_negative); }
};

inline ThresholdChoice threshold_errors(double background_mean, double atom_mean, std::int64_t threshold)
{
    return {threshold, std::exp(log_poisson_upper_tail(background_mean, threshold)),
            std::exp(log_poisson_lower_tail(atom_mean, threshold))};
}

// Likelihood-ratio crossing of Poisson(background_mean) and Poisson(atom_mean).
inline ThresholdChoice optimal_threshold(double background_mean, double atom_mean)
{
    require(background_mean > 0, "background mean must be positive");
    require(atom_mean > background_mean, "atom mean must exceed background mean");
    const double crossing = (atom_mean - background_mean) / std::log(atom_mean / background_mean);
    return threshold_errors(background_mean, atom_mean, static_cast<std::int64_t>(std::ceil(crossing)));
}

// ---------------------------------------------------------------------------
// Telegraph signal
// ---------------------------------------------------------------------------

struct TelegraphConfig {
    double loading_rate = 1;       // 1/s
    double one_body_loss_rate = 0; // 1/s per atom
    bool blockade = true;          // an arriving second atom ejects both
    double duration = 100;         // s
    std::uint64_t seed = 0;
    int initial_occupancy = 0;

    void validate() const
    {
        require(loading_rate >= 0 && one_body_loss_rate >= 0, "rates must be non-negative");
        require(duration > 0, "duration must be positive");
        require(initial_occupancy >= 0, "initial occupancy must be non-negative");
        require(!blockade || initial_occupancy <= 1, "blockade caps the initial occupancy at one");
    }
};

struct OccupancyChange {
    double time = 0;
    int occupancy = 0;
};

// Piecewise-constant occupancy: events[i].occupancy holds on
// [events[i].time, events[i+1].time), the last one until `duration`.
struct OccupancyTrace {
    std::vector<OccupancyChange> events;
    double duration = 0;

    int max_occupancy() const
    {
        int m = 0;
        for (const auto& e : events)
            m = std::max(m, e.occupancy);
        return m;
    }

    int occupancy_at(double t) const
    {
        auto it = std::upper_bound(events.begin(), events.end(), t,
                                   [](double v, const OccupancyChange& e) { return v < e.time; });
        return it == events.begin() ? events.front().occupancy : std::prev(it)->occupancy;
    }

    // Fraction of time spent with exactly `occupancy` atoms.
    double time_fraction(int occupancy) const
    {
        double acc = 0;
        for (std::size_t i = 0; i < events.size(); ++i) {
            const double end = i + 1 < events.size() ? events[i + 1].time : duration;
            if (events[i].occupancy == occupancy)
                acc += end - events[i].time;
        }
        return acc / duration;
    }

    // Integral of the occupancy over [t0, t1].
    double occupancy_integral(double t0, double t1) const
    {
        double acc = 0;
        auto it = std::upper_bound(events.begin(), events.end(), t0,
                                   [](double v, const OccupancyChange& e) { return v < e.time; });
        std::size_t i = it == events.begin() ? 0 : static_cast<std::size_t>(std::prev(it) - events.begin());
        for (; i < events.size() && events[i].time < t1; ++i) {
            const double end = i + 1 < events.size() ? events[i + 1].time : duration;
            const double lo = std::max(t0, events[i].time), hi = std::min(t1, end);
            if (hi > lo)
                acc += events[i].occupancy * (hi - lo);
        }
        return acc;
    }
};

// Continuous-time Markov chain (Gillespie). With blockade: 0 -> 1 at the
// loading rate, 1 -> 0 at loading rate (pair loss) plus one-body loss.
// Without blockade: n -> n+1 at the loading rate, n -> n-1 at n * loss.
inline OccupancyTrace simulate_telegraph(const TelegraphConfig& cfg)
{
    cfg.validate();
    auto engine = make_stream(cfg.seed, 0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    OccupancyTrace trace;
    trace.duration = cfg.duration;
    int n = cfg.initial_occupancy;
    double t = 0;
    trace.events.push_back({0.0, n});
    while (true) {
        double up = cfg.loading_rate, down = 0;
        if (cfg.blockade) {
            if (n == 1) {
                up = 0;
                down = cfg.loading_rate + cfg.one_body_loss_rate;
            }
        } else {
            down = n * cfg.one_body_loss_rate;
        }
        const double total = up + down;
        if (total <= 0)
            break;
        t += -std::log1p(-uniform(engine)) / total;
        if (t >= cfg.duration)
            break;
        n += (uniform(engine) * total < up) ? 1 : -1;
        trace.events.push_back({t, n});
    }
    return trace;
}

// Stationary probability of occupancy one under blockade: R / (2R + gamma).
inline double blockade_stationary_occupancy(double loading_rate, double loss_rate)
{
    const double denom = 2 * loading_rate + loss_rate;
    return denom > 0 ? loading_rate / denom : 0.0;
}

// ---------------------------------------------------------------------------
// Photon counts
// ---------------------------------------------------------------------------

struct PhotonRates {
    double background_rate = 1.3e4; // counts/s
    double atom_rate = 2.7e4;       // counts/s per atom
    double bin_time = 10e-3;        // s

    void validate() const
    {
        require(background_rate >= 0 && atom_rate >= 0, "rates must be non-negative");
        require(bin_time > 0, "bin time must be positive");
    }
};

struct CountHistogram {
    std::vector<double> bin_edges;              // edges[i] <= counts < edges[i+1]
    std::vector<std::size_t> frequencies;
    std::vector<double> occupancy_labels;       // mean occupied fraction per bin (NaN if empty)
};

struct CountSeries {
    std::vector<std::int64_t> counts;
    std::vector<double> occupied_fraction; // mean occupancy within each bin
    CountHistogram histogram;
};

inline CountHistogram make_histogram(std::span<const std::int64_t> counts, std::span<const double> occupancy,
                                     std::int64_t width = 1)
{
    require(width >= 1, "histogram bin width must be positive");
    CountHistogram h;
    if (counts.empty())
        return h;
    const std::int64_t hi = *std::max_element(counts.begin(), counts.end());
    const auto n_bins = static_cast<std::size_t>(hi / width + 1);
    h.frequencies.assign(n_bins, 0);
    std::vector<double> occ_sum(n_bins, 0.0);
    for (std::size_t i = 0; i < counts.size(); ++i) {
        const auto b = static_cast<std::size_t>(counts[i] / width);
        ++h.frequencies[b];
        if (!occupancy.empty())
            occ_sum[b] += occupancy[i];
    }
    for (std::size_t b = 0; b <= n_bins; ++b)
        h.bin_edges.push_back(static_cast<double>(static_cast<std::int64_t>(b) * width));
    if (!occupancy.empty())
        for (std::size_t b = 0; b < n_bins; ++b)
            h.occupancy_labels.push_back(h.frequencies[b] ? occ_sum[b] / static_cast<double>(h.frequencies[b])
                                                          : std::numeric_limits<double>::quiet_NaN());
    return h;
}

// Poisson counts per time bin with mean (background + occupancy * atom rate)
// integrated over the bin, including partially occupied bins.
inline CountSeries trace_to_histogram(const OccupancyTrace& trace, const PhotonRates& rates, std::size_t n_bins,
                                      std::uint64_t seed)
{
    rates.validate();
    require(n_bins >= 1, "need at least one bin");
    auto engine = make_stream(seed, 1);
    CountSeries out;
    out.counts.reserve(n_bins);
    out.occupied_fraction.reserve(n_bins);
    for (std::size_t b = 0; b < n_bins; ++b) {
        const double t0 = static_cast<double>(b) * rates.bin_time;
        const double t1 = t0 + rates.bin_time;
        const double occ = trace.events.empty() ? 0.0 : trace.occupancy_integral(t0, std::min(t1, trace.duration));
        const double mean = rates.background_rate * rates.bin_time + rates.atom_rate * occ;
        std::int64_t k = 0;
        if (mean > 0) {
            std::poisson_distribution<std::int64_t> poisson(mean);
            k = poisson(engine);
        }
        out.counts.push_back(k);
        out.occupied_fraction.push_back(occ / rates.bin_time);
    }
    out.histogram = make_histogram(out.counts, out.occupied_fraction);
    return out;
}

struct ModeStatistics {
    std::size_t samples = 0;
    double mean = 0;
    double variance = 0;
    double fano() const { return mean > 0 ? variance / mean : 0.0; }
};

// Count statistics over bins whose mean occupancy equals `occupancy`
// (bins without a transition).
inline ModeStatistics mode_statistics(const CountSeries& series, double occupancy)
{
    ModeStatistics m;
    double sum = 0, sum2 = 0;
    for (std::size_t i = 0; i < series.counts.size(); ++i) {
        if (std::abs(series.occupied_fraction[i] - occupancy) > 1e-9)
            continue;
        const auto c = static_cast<double>(series.counts[i]);
        sum += c;
        sum2 += c * c;
        ++m.samples;
    }
    if (m.samples > 1) {
        const auto n = static_cast<double>(m.samples);
        m.mean = sum / n;
        m.variance = (sum2 - n * m.mean * m.mean) / (n - 1);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Storage lifetime
// ---------------------------------------------------------------------------

struct SurvivalPoint {
    double time = 0;
    double probability = 0;
};

struct LifetimeFit {
    double tau = 0;
    double tau_error = 0;
};

// Least-squares fit of P(t) = exp(-t / tau).
inline LifetimeFit lifetime_estimate(std::span<const SurvivalPoint> points)
{
    require(points.size() >= 3, "lifetime fit needs at least three points");
    double stt = 0, sty = 0;
    for (const auto& p : points) {
        require(p.probability > 0 && p.probability <= 1, "survival probabilities must lie in (0, 1]");
        require(p.time >= 0, "times must be non-negative");
        stt += p.time * p.time;
        sty += p.time * std::log(p.probability);
    }
    require(stt > 0, "lifetime fit needs non-zero times");
    const double slope = sty / stt;
    if (!(slope < -1e-12))
        throw InvalidArgument("lifetime fit: survival data show no decay");

    const double tau0 = -1 / slope;
    auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
        const double tau = tau0 * std::exp(p[0]);
        for (std::size_t i = 0; i < points.size(); ++i)
            r[static_cast<Eigen::Index>(i)] = std::exp(-points[i].time / tau) - points[i].probability;
    };
    const auto fit = least_squares(residual, Eigen::VectorXd::Zero(1), static_cast<Eigen::Index>(points.size()));
    if (!fit.converged)
        throw NumericalFailure("lifetime fit did not converge");
    LifetimeFit out;
    out.tau = tau0 * std::exp(fit.parameters[0]);
    out.tau_error = out.tau * std::sqrt(fit.variance[0]);
    return out;
}

// Fraction of `n_traces` single atoms (no loading, one-body loss only) still
// trapped after each storage time.
inline std::vector<SurvivalPoint> simulate_storage_survival(double loss_rate, std::span<const double> times,
                                                            std::size_t n_traces, std::uint64_t seed)
{
    require(!times.empty(), "need storage times");
    require(n_traces >= 1, "need at least one trace");
    const double horizon = *std::max_element(times.begin(), times.end()) * (1 + 1e-9) + 1e-12;
    std::vector<std::size_t> alive(times.size(), 0);
    for (std::size_t i = 0; i < n_traces; ++i) {
        TelegraphConfig cfg{0.0, loss_rate, true, horizon, mix64(seed) ^ i, 1};
        const auto trace = simulate_telegraph(cfg);
        for (std::size_t k = 0; k < times.size(); ++k)
            alive[k] += trace.occupancy_at(times[k]) == 1 ? 1 : 0;
    }
    std::vector<SurvivalPoint> out;
    for (std::size_t k = 0; k < times.size(); ++k)
        out.push_back({times[k], static_cast<double>(alive[k]) / static_cast<double>(n_traces)});
    return out;
}

// ---------------------------------------------------------------------------
// CCD imaging
// ---------------------------------------------------------------------------

struct CcdModel {
    double magnification = 25;
    double pixel_pitch = 13e-6;       // sensor pixel, m
    double exposure = 0.1;            // s
    double spot_waist = 0.9e-6;       // 1/e^2 radius, object plane
    double photon_budget = 1000;      // detected photons per atom per exposure
    double background = 10;           // mean counts per pixel per exposure
    double read_noise = 0;            // Gaussian rms counts
    std::size_t width = 24;
    std::size_t height = 24;

    void validate() const
    {
        require(magnification > 0 && pixel_pitch > 0, "magnification and pixel pitch must be positive");
        require(photon_budget >= 0 && background >= 0 && read_noise >= 0, "photon levels must be non-negative");
        require(width >= 4 && height >= 4, "sensor must be at least 4x4 pixels");
        require(spot_waist > 0, "spot waist must be positive");
    }

    // Pixel pitch referred to the object plane.
    double object_pitch() const { return pixel_pitch / magnification; }
    // Object-plane coordinate of the lower edge of pixel column/row i.
    double edge(std::size_t i, std::size_t n) const
    {
        return (static_cast<double>(i) - static_cast<double>(n) / 2) * object_pitch();
    }
};

struct Image {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<double> pixels; // row-major

    double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
    double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
    double total() const { return std::accumulate(pixels.begin(), pixels.end(), 0.0); }
};

struct AtomPosition {
    double x = 0; // object plane, m
    double y = 0;
};

// Spot shape: a Gaussian waist (object plane) or a sampled PSF map.
using SpotShape = std::variant<double, diffraction::IntensityMap>;

namespace detail {

inline double gaussian_cdf(double x, double waist) { return 0.5 * (1 + std::erf(std::sqrt(2.0) * x / waist)); }

// Fraction of a normalized Gaussian spot at (cx, cy) landing in every pixel.
inline void add_gaussian_spot(Image& img, const CcdModel& ccd, double cx, double cy, double waist, double photons)
{
    std::vector<double> fx(img.width), fy(img.height);
    for (std::size_t i = 0; i < img.width; ++i)
        fx[i] = gaussian_cdf(ccd.edge(i + 1, img.width) - cx, waist) - gaussian_cdf(ccd.edge(i, img.width) - cx, waist);
    for (std::size_t j = 0; j < img.height; ++j)
        fy[j] = gaussian_cdf(ccd.edge(j + 1, img.height) - cy, waist) -
                gaussian_cdf(ccd.edge(j, img.height) - cy, waist);
    for (std::size_t j = 0; j < img.height; ++j)
        for (std::size_t i = 0; i < img.width; ++i)
            img.at(i, j) += photons * fx[i] * fy[j];
}

inline void add_map_spot(Image& img, const CcdModel& ccd, double cx, double cy, const diffraction::IntensityMap& map,
                         double photons)
{
    const double total = std::accumulate(map.samples.begin(), map.samples.end(), 0.0);
    require(total > 0, "PSF map carries no flux");
    const double pitch = ccd.object_pitch();
    const double x0 = ccd.edge(0, img.width), y0 = ccd.edge(0, img.height);
    for (std::size_t iy = 0; iy < map.size; ++iy) {
        const double y = cy + map.coordinate(iy);
        const auto py = static_cast<std::ptrdiff_t>(std::floor((y - y0) / pitch));
        if (py < 0 || py >= static_cast<std::ptrdiff_t>(img.height))
            continue;
        for (std::size_t ix = 0; ix < map.size; ++ix) {
            const double x = cx + map.coordinate(ix);
            const auto px = static_cast<std::ptrdiff_t>(std::floor((x - x0) / pitch));
            if (px < 0 || px >= static_cast<std::ptrdiff_t>(img.width))
                continue;
            img.at(static_cast<std::size_t>(px), static_cast<std::size_t>(py)) += photons * map(ix, iy) / total;
        }
    }
}

} // namespace detail

// Noise-free expected counts per pixel.
inline Image expected_ccd_image(std::span<const AtomPosition> atoms, const SpotShape& spot, const CcdModel& ccd)
{
    ccd.validate();
    Image img{ccd.width, ccd.height, std::vector<double>(ccd.width * ccd.height, ccd.background)};
    const double half_w = static_cast<double>(ccd.width) / 2 * ccd.object_pitch();
    const double half_h = static_cast<double>(ccd.height) / 2 * ccd.object_pitch();
    for (const auto& a : atoms) {
        require(std::abs(a.x) < half_w && std::abs(a.y) < half_h, "atom lies outside the sensor");
        if (const auto* waist = std::get_if<double>(&spot)) {
            require(*waist > 0, "spot waist must be positive");
            detail::add_gaussian_spot(img, ccd, a.x, a.y, *waist, ccd.photon_budget);
        } else {
            detail::add_map_spot(img, ccd, a.x, a.y, std::get<diffraction::IntensityMap>(spot), ccd.photon_budget);
        }
    }
    return img;
}

// Poisson shot noise on signal plus background, optional Gaussian read noise.
inline Image render_ccd(std::span<const AtomPosition> atoms, const SpotShape& spot, const CcdModel& ccd,
                        std::uint64_t seed)
{
    Image img = expected_ccd_image(atoms, spot, ccd);
    auto engine = make_stream(seed, 2);
    std::normal_distribution<double> read(0.0, 1.0);
    for (auto& p : img.pixels) {
        double v = 0;
        if (p > 0) {
            std::poisson_distribution<std::int64_t> poisson(p);
            v = static_cast<double>(poisson(engine));
        }
        if (ccd.read_noise > 0)
            v += ccd.read_noise * read(engine);
        p = v;
    }
    return img;
}

inline Image render_ccd(std::span<const AtomPosition> atoms, const CcdModel& ccd, std::uint64_t seed)
{
    return render_ccd(atoms, SpotShape{ccd.spot_waist}, ccd, seed);
}

enum class SpotMode { automatic, single, pair };

struct Spot {
    double x = 0;        // object plane, m
    double y = 0;
    double waist = 0;    // object plane, m
    double amplitude = 0; // integrated photons
};

struct SpotFit {
    std::vector<Spot> spots;
    double background_level = 0;
    double residual_rms = 0;
    bool degenerate = false; // separation below one fitted waist
    std::vector<Spot> errors; // one-sigma parameter errors, same layout as spots

    double separation() const
    {
        return spots.size() == 2 ? std::hypot(spots[0].x - spots[1].x, spots[0].y - spots[1].y) : 0.0;
    }
};

namespace detail {

// Local maxima (8-neighbourhood) sorted by height.
inline std::vector<std::pair<std::size_t, std::size_t>> local_maxima(const Image& img)
{
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t y = 1; y + 1 < img.height; ++y)
        for (std::size_t x = 1; x + 1 < img.width; ++x) {
            const double v = img.at(x, y);
            bool peak = true;
            for (int dy = -1; dy <= 1 && peak; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dx == 0 && dy == 0)
                        continue;
                    const double n = img.at(static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x) + dx),
                                            static_cast<std::size_t>(static_cast<std::ptrdiff_t>(y) + dy));
                    if (n > v || (n == v && (dy < 0 || (dy == 0 && dx < 0)))) {
                        peak = false;
                        break;
                    }
                }
            if (peak)
                out.emplace_back(x, y);
        }
    std::sort(out.begin(), out.end(), [&](auto a, auto b) { return img.at(a.first, a.second) > img.at(b.first, b.second); });
    return out;
}

} // namespace detail

// Least-squares fit of one or two pixel-integrated Gaussian spots plus a
// constant background. Results are referred to the object plane.
inline SpotFit fit_two_gaussians(const Image& image, const CcdModel& ccd, SpotMode mode = SpotMode::automatic)
{
    ccd.validate();
    require(image.width == ccd.width && image.height == ccd.height, "image size does not match the CCD model");
    const double pitch = ccd.object_pitch();

    std::vector<double> sorted = image.pixels;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2), sorted.end());
    const double bg0 = sorted[sorted.size() / 2];
    const double peak = *std::max_element(image.pixels.begin(), image.pixels.end());
    require(peak > bg0, "image has no signal above background");

    // Candidate peaks: local maxima standing clearly above background.
    const double noise = std::sqrt(std::max(bg0, 1.0));
    std::vector<std::pair<std::size_t, std::size_t>> seeds;
    for (const auto& m : detail::local_maxima(image)) {
        if (image.at(m.first, m.second) - bg0 < std::max(5 * noise, 0.2 * (peak - bg0)))
            continue;
        bool far = true;
        for (const auto& s : seeds)
            far = far && std::hypot(double(s.first) - double(m.first), double(s.second) - double(m.second)) >= 2;
        if (far)
            seeds.push_back(m);
    }
    if (seeds.empty())
        seeds.emplace_back(static_cast<std::size_t>(std::max_element(image.pixels.begin(), image.pixels.end()) -
                                                    image.pixels.begin()) % image.width,
                           static_cast<std::size_t>(std::max_element(image.pixels.begin(), image.pixels.end()) -
                                                    image.pixels.begin()) / image.width);
    std::size_t n_spots = 0;
    switch (mode) {
    case SpotMode::single:
        n_spots = 1;
        break;
    case SpotMode::pair:
        require(seeds.size() >= 2, "two-spot fit needs two maxima above background");
        n_spots = 2;
        break;
    case SpotMode::automatic:
        n_spots = seeds.size() >= 2 ? 2 : 1;
        break;
    }

    // Parameters (pixel units): per spot x, y, log(waist), amplitude / scale; then background / scale.
    const double scale = std::max(peak - bg0, 1.0);
    const double w_pix0 = ccd.spot_waist / pitch;
    Eigen::VectorXd p0(4 * static_cast<Eigen::Index>(n_spots) + 1);
    for (std::size_t s = 0; s < n_spots; ++s) {
        const auto [sx, sy] = seeds[s];
        const double amp = (image.at(sx, sy) - bg0) * 2 * constants::pi * (w_pix0 / 2) * (w_pix0 / 2);
        p0.segment(4 * static_cast<Eigen::Index>(s), 4) << static_cast<double>(sx) + 0.5, static_cast<double>(sy) + 0.5,
            std::log(w_pix0), std::max(amp, 1.0) / scale;
    }
    p0[p0.size() - 1] = bg0 / scale;

    const auto w = image.width, h = image.height;
    std::vector<double> fx(w), fy(h);
    auto model = [&](const Eigen::VectorXd& p, Eigen::VectorXd& out) {
        out.setConstant(p[p.size() - 1] * scale);
        for (std::size_t s = 0; s < n_spots; ++s) {
            const auto o = 4 * static_cast<Eigen::Index>(s);
            const double cx = p[o], cy = p[o + 1], wp = std::exp(p[o + 2]), amp = p[o + 3] * scale;
            for (std::size_t i = 0; i < w; ++i)
                fx[i] = detail::gaussian_cdf(static_cast<double>(i + 1) - cx, wp) -
                        detail::gaussian_cdf(static_cast<double>(i) - cx, wp);
            for (std::size_t j = 0; j < h; ++j)
                fy[j] = detail::gaussian_cdf(static_cast<double>(j + 1) - cy, wp) -
                        detail::gaussian_cdf(static_cast<double>(j) - cy, wp);
            for (std::size_t j = 0; j < h; ++j)
                for (std::size_t i = 0; i < w; ++i)
                    out[static_cast<Eigen::Index>(j * w + i)] += amp * fx[i] * fy[j];
        }
    };
    auto residual = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r) {
        model(p, r);
        for (std::size_t k = 0; k < image.pixels.size(); ++k)
            r[static_cast<Eigen::Index>(k)] -= image.pixels[k];
    };
    const auto fit = least_squares(residual, p0, static_cast<Eigen::Index>(image.pixels.size()));
    if (!fit.converged)
        throw NumericalFailure("spot fit did not converge");

    SpotFit out;
    const auto& p = fit.parameters;
    const double x_origin = ccd.edge(0, w), y_origin = ccd.edge(0, h);
    for (std::size_t s = 0; s < n_spots; ++s) {
        const auto o = 4 * static_cast<Eigen::Index>(s);
        const double wp = std::exp(p[o + 2]);
        out.spots.push_back({x_origin + p[o] * pitch, y_origin + p[o + 1] * pitch, wp * pitch, p[o + 3] * scale});
        out.errors.push_back({std::sqrt(fit.variance[o]) * pitch, std::sqrt(fit.variance[o + 1]) * pitch,
                              wp * pitch * std::sqrt(fit.variance[o + 2]), std::sqrt(fit.variance[o + 3]) * scale});
    }
    // Order spots left to right for stable output.
    if (n_spots == 2 && out.spots[0].x > out.spots[1].x) {
        std::swap(out.spots[0], out.spots[1]);
        std::swap(out.errors[0], out.errors[1]);
    }
    out.background_level = p[p.size() - 1] * scale;
    out.residual_rms = fit.residual_rms;
    if (n_spots == 2)
        out.degenerate = out.separation() < std::max(out.spots[0].waist, out.spots[1].waist);
    return out;
}

} // namespace tweezersim::detection
