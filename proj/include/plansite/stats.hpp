#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace plansite::stats {

enum class IntervalMethod { wilson, cluster_bootstrap, joint_bootstrap_diff, paired_wald };

std::string to_string(IntervalMethod m);
IntervalMethod interval_method_from_string(const std::string& s);

struct Interval {
    double point = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    double confidence = 0.95;
    IntervalMethod method = IntervalMethod::wilson;
    std::size_t n = 0;                  // sample size, or resample count for bootstraps
    std::optional<std::uint64_t> seed;  // set for stochastic methods
    bool point_outside = false;         // percentile interval does not contain the point estimate
    bool conservative = false;          // independence approximation applied to paired data

    double half_width() const { return 0.5 * (upper - lower); }
    bool contains(double x) const { return lower <= x && x <= upper; }
    friend bool operator==(const Interval&, const Interval&) = default;
};

void to_json(nlohmann::json& j, const Interval& iv);
void from_json(const nlohmann::json& j, Interval& iv);

/// Inverse of the standard normal CDF. Acklam's rational approximation
/// refined by one Halley step; absolute error below 1e-12 on (0, 1).
double normal_quantile(double p);

/// Two-sided critical value, e.g. 1.959964 for confidence 0.95.
double two_sided_z(double confidence);

Interval wilson(std::size_t successes, std::size_t n, double confidence = 0.95);

struct ClusterCount {
    std::size_t successes = 0;
    std::size_t n = 0;
    double rate() const { return static_cast<double>(successes) / static_cast<double>(n); }
};

/// Equal-weight mean of per-cluster rates, or pooled successes / total.
enum class BootstrapStatistic { cluster_mean, pooled };
enum class BootstrapInterval { percentile, bca };

struct BootstrapOptions {
    std::size_t resamples = 10000;
    double confidence = 0.95;
    std::uint64_t seed = 0;
    BootstrapStatistic statistic = BootstrapStatistic::cluster_mean;
    BootstrapInterval interval = BootstrapInterval::percentile;
    unsigned threads = 1;  // shards are seeded independently of thread count
};

/// Resamples whole clusters with replacement. Deterministic for a fixed seed.
Interval cluster_bootstrap(std::span<const ClusterCount> clusters, const BootstrapOptions& opts = {});

struct ClusterOutcome {
    std::string id;
    std::size_t successes = 0;
    std::size_t n = 0;
};

/// Interval over (rate_a - rate_b); one shared cluster-index vector per resample.
Interval joint_cluster_bootstrap_diff(std::span<const ClusterOutcome> a, std::span<const ClusterOutcome> b,
                                      const BootstrapOptions& opts = {});

/// (p1 - p2) +/- z * sqrt(p1(1-p1)/n1 + p2(1-p2)/n2), clipped to [-1, 1].
/// Treats the two proportions as independent, hence tagged conservative.
Interval paired_wald_diff(double p1, std::size_t n1, double p2, std::size_t n2, double confidence = 0.95);

/// Paired Wald interval on matched per-example outcomes (variance from discordant pairs).
Interval paired_outcome_diff(const std::vector<bool>& a, const std::vector<bool>& b, double confidence = 0.95);

/// Linear-interpolation quantile (R type 7) of an ascending sample.
double quantile_sorted(std::span<const double> sorted, double q);

}  // namespace plansite::stats
