#include "plansite/stats.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>
#include <unordered_map>

#include "plansite/common.hpp"
#include "plansite/random.hpp"

namespace plansite::stats {

namespace {

constexpr std::size_t kShardSize = 1000;

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

void check_confidence(double confidence) {
    if (!(confidence > 0.0 && confidence < 1.0)) {
        throw ValidationError("confidence must lie in (0, 1)");
    }
}

double clip(double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); }

// Statistic over a resampled index vector.
template <class RateOf, class CountOf>
double resample_statistic(std::span<const std::size_t> idx, BootstrapStatistic stat, RateOf rate_of,
                          CountOf count_of) {
    if (stat == BootstrapStatistic::cluster_mean) {
        double s = 0.0;
        for (std::size_t i : idx) s += rate_of(i);
        return s / static_cast<double>(idx.size());
    }
    double succ = 0.0;
    double total = 0.0;
    for (std::size_t i : idx) {
        const auto [s, n] = count_of(i);
        succ += s;
        total += n;
    }
    return succ / total;
}

// Runs B resamples in fixed-size shards, each shard with its own derived seed,
// so the output does not depend on how many threads execute them.
template <class Stat>
std::vector<double> run_shards(std::size_t clusters, const BootstrapOptions& opts, Stat stat) {
    const std::size_t n_shards = (opts.resamples + kShardSize - 1) / kShardSize;
    std::vector<double> out(opts.resamples);
    auto work = [&](std::size_t shard) {
        Rng rng(mix_seed(opts.seed, shard));
        std::vector<std::size_t> idx(clusters);
        const std::size_t begin = shard * kShardSize;
        const std::size_t end = std::min(opts.resamples, begin + kShardSize);
        for (std::size_t r = begin; r < end; ++r) {
            for (auto& i : idx) i = rng.index(clusters);
            out[r] = stat(std::span<const std::size_t>(idx));
        }
    };
    const unsigned threads = std::max(1u, opts.threads);
    if (threads == 1 || n_shards == 1) {
        for (std::size_t s = 0; s < n_shards; ++s) work(s);
    } else {
        std::vector<std::future<void>> jobs;
        std::size_t next = 0;
        while (next < n_shards) {
            jobs.clear();
            for (unsigned t = 0; t < threads && next < n_shards; ++t, ++next) {
                jobs.push_back(std::async(std::launch::async, work, next));
            }
            for (auto& j : jobs) j.get();
        }
    }
    return out;
}

// Percentile or BCa bounds from bootstrap replicates.
std::pair<double, double> bootstrap_bounds(std::vector<double>& reps, double point,
                                           const std::vector<double>& jackknife, const BootstrapOptions& opts) {
    std::sort(reps.begin(), reps.end());
    const double alpha = 1.0 - opts.confidence;
    double q_lo = alpha / 2.0;
    double q_hi = 1.0 - alpha / 2.0;
    if (opts.interval == BootstrapInterval::bca && jackknife.size() > 1) {
        const auto below = static_cast<double>(std::lower_bound(reps.begin(), reps.end(), point) - reps.begin());
        const auto upto = static_cast<double>(std::upper_bound(reps.begin(), reps.end(), point) - reps.begin());
        const double frac = (below + upto) / (2.0 * static_cast<double>(reps.size()));
        if (frac > 0.0 && frac < 1.0) {
            const double z0 = normal_quantile(frac);
            const double mean = std::accumulate(jackknife.begin(), jackknife.end(), 0.0) /
                                static_cast<double>(jackknife.size());
            double num = 0.0;
            double den = 0.0;
            for (double t : jackknife) {
                const double d = mean - t;
                num += d * d * d;
                den += d * d;
            }
            const double accel = den > 0.0 ? num / (6.0 * std::pow(den, 1.5)) : 0.0;
            auto adjust = [&](double q) {
                const double z = normal_quantile(q);
                return normal_cdf(z0 + (z0 + z) / (1.0 - accel * (z0 + z)));
            };
            q_lo = adjust(q_lo);
            q_hi = adjust(q_hi);
        }
    }
    return {quantile_sorted(reps, q_lo), quantile_sorted(reps, q_hi)};
}

}  // namespace

std::string to_string(IntervalMethod m) {
    switch (m) {
        case IntervalMethod::wilson: return "wilson";
        case IntervalMethod::cluster_bootstrap: return "cluster_bootstrap";
        case IntervalMethod::joint_bootstrap_diff: return "joint_bootstrap_diff";
        case IntervalMethod::paired_wald: return "paired_wald";
    }
    return "unknown";
}

IntervalMethod interval_method_from_string(const std::string& s) {
    if (s == "wilson") return IntervalMethod::wilson;
    if (s == "cluster_bootstrap") return IntervalMethod::cluster_bootstrap;
    if (s == "joint_bootstrap_diff") return IntervalMethod::joint_bootstrap_diff;
    if (s == "paired_wald") return IntervalMethod::paired_wald;
    throw ParseError("unknown interval method '" + s + "'", 0);
}

void to_json(nlohmann::json& j, const Interval& iv) {
    j = nlohmann::json{{"point", iv.point},           {"lower", iv.lower},
                       {"upper", iv.upper},           {"confidence", iv.confidence},
                       {"method", to_string(iv.method)}, {"n", iv.n},
                       {"point_outside", iv.point_outside}, {"conservative", iv.conservative}};
    j["seed"] = iv.seed ? nlohmann::json(*iv.seed) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, Interval& iv) {
    iv.point = j.at("point").get<double>();
    iv.lower = j.at("lower").get<double>();
    iv.upper = j.at("upper").get<double>();
    iv.confidence = j.at("confidence").get<double>();
    iv.method = interval_method_from_string(j.at("method").get<std::string>());
    iv.n = j.at("n").get<std::size_t>();
    iv.point_outside = j.value("point_outside", false);
    iv.conservative = j.value("conservative", false);
    if (j.contains("seed") && !j.at("seed").is_null()) {
        iv.seed = j.at("seed").get<std::uint64_t>();
    } else {
        iv.seed.reset();
    }
}

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) {
        if (p == 0.0) return -INFINITY;
        if (p == 1.0) return INFINITY;
        throw ValidationError("normal_quantile: p outside [0, 1]");
    }
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    constexpr double p_low = 0.02425;
    double x;
    if (p < p_low) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - p_low) {
        const double q = p - 0.5;
        const double r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log1p(-p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = normal_cdf(x) - p;
    const double u = e * std::sqrt(2.0 * M_PI) * std::exp(0.5 * x * x);
    return x - u / (1.0 + 0.5 * x * u);
}

double two_sided_z(double confidence) {
    check_confidence(confidence);
    return normal_quantile(0.5 + 0.5 * confidence);
}

Interval wilson(std::size_t successes, std::size_t n, double confidence) {
    if (n == 0) throw ValidationError("wilson: n must be >= 1");
    if (successes > n) throw ValidationError("wilson: successes exceed n");
    const double z = two_sided_z(confidence);
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(successes) / nn;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nn;
    const double center = (p + z2 / (2.0 * nn)) / denom;
    const double half = z / denom * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn));
    Interval iv;
    iv.point = p;
    iv.lower = successes == 0 ? 0.0 : clip(center - half, 0.0, 1.0);
    iv.upper = successes == n ? 1.0 : clip(center + half, 0.0, 1.0);
    iv.confidence = confidence;
    iv.method = IntervalMethod::wilson;
    iv.n = n;
    return iv;
}

double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw ValidationError("quantile of empty sample");
    q = clip(q, 0.0, 1.0);
    const double h = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

Interval cluster_bootstrap(std::span<const ClusterCount> clusters, const BootstrapOptions& opts) {
    if (clusters.empty()) throw ValidationError("cluster_bootstrap: need at least one cluster");
    if (opts.resamples == 0) throw ValidationError("cluster_bootstrap: resamples must be >= 1");
    check_confidence(opts.confidence);
    for (const auto& c : clusters) {
        if (c.n == 0) throw ValidationError("cluster_bootstrap: cluster with n = 0");
        if (c.successes > c.n) throw ValidationError("cluster_bootstrap: successes exceed n");
    }
    auto rate_of = [&](std::size_t i) { return clusters[i].rate(); };
    auto count_of = [&](std::size_t i) {
        return std::pair<double, double>(static_cast<double>(clusters[i].successes),
                                         static_cast<double>(clusters[i].n));
    };
    auto stat = [&](std::span<const std::size_t> idx) {
        return resample_statistic(idx, opts.statistic, rate_of, count_of);
    };
    std::vector<std::size_t> all(clusters.size());
    std::iota(all.begin(), all.end(), 0);
    const double point = stat(all);

    std::vector<double> jackknife;
    if (opts.interval == BootstrapInterval::bca && clusters.size() > 1) {
        for (std::size_t drop = 0; drop < clusters.size(); ++drop) {
            std::vector<std::size_t> keep;
            for (std::size_t i = 0; i < clusters.size(); ++i) {
                if (i != drop) keep.push_back(i);
            }
            jackknife.push_back(stat(keep));
        }
    }
    auto reps = run_shards(clusters.size(), opts, stat);
    const auto [lo, hi] = bootstrap_bounds(reps, point, jackknife, opts);

    Interval iv;
    iv.point = point;
    iv.lower = clip(lo, 0.0, 1.0);
    iv.upper = clip(hi, 0.0, 1.0);
    iv.confidence = opts.confidence;
    iv.method = IntervalMethod::cluster_bootstrap;
    iv.n = opts.resamples;
    iv.seed = opts.seed;
    iv.point_outside = !(iv.lower <= point && point <= iv.upper);
    return iv;
}

Interval joint_cluster_bootstrap_diff(std::span<const ClusterOutcome> a, std::span<const ClusterOutcome> b,
                                      const BootstrapOptions& opts) {
    if (a.empty()) throw ValidationError("joint_cluster_bootstrap_diff: need at least one cluster");
    if (a.size() != b.size()) throw ValidationError("joint_cluster_bootstrap_diff: cluster id mismatch");
    if (opts.resamples == 0) throw ValidationError("joint_cluster_bootstrap_diff: resamples must be >= 1");
    check_confidence(opts.confidence);
    std::unordered_map<std::string, std::size_t> b_index;
    for (std::size_t i = 0; i < b.size(); ++i) b_index.emplace(b[i].id, i);
    std::vector<std::size_t> b_of_a(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        auto it = b_index.find(a[i].id);
        if (it == b_index.end()) {
            throw ValidationError("joint_cluster_bootstrap_diff: cluster id mismatch ('" + a[i].id + "')");
        }
        b_of_a[i] = it->second;
        if (a[i].n == 0 || b[it->second].n == 0) {
            throw ValidationError("joint_cluster_bootstrap_diff: cluster with n = 0");
        }
    }
    auto side = [&](std::span<const std::size_t> idx, bool first) {
        auto rate_of = [&](std::size_t i) {
            const auto& c = first ? a[i] : b[b_of_a[i]];
            return static_cast<double>(c.successes) / static_cast<double>(c.n);
        };
        auto count_of = [&](std::size_t i) {
            const auto& c = first ? a[i] : b[b_of_a[i]];
            return std::pair<double, double>(static_cast<double>(c.successes), static_cast<double>(c.n));
        };
        return resample_statistic(idx, opts.statistic, rate_of, count_of);
    };
    auto stat = [&](std::span<const std::size_t> idx) { return side(idx, true) - side(idx, false); };

    std::vector<std::size_t> all(a.size());
    std::iota(all.begin(), all.end(), 0);
    const double point = stat(all);
    std::vector<double> jackknife;
    if (opts.interval == BootstrapInterval::bca && a.size() > 1) {
        for (std::size_t drop = 0; drop < a.size(); ++drop) {
            std::vector<std::size_t> keep;
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (i != drop) keep.push_back(i);
            }
            jackknife.push_back(stat(keep));
        }
    }
    auto reps = run_shards(a.size(), opts, stat);
    const auto [lo, hi] = bootstrap_bounds(reps, point, jackknife, opts);

    Interval iv;
    iv.point = point;
    iv.lower = clip(lo, -1.0, 1.0);
    iv.upper = clip(hi, -1.0, 1.0);
    iv.confidence = opts.confidence;
    iv.method = IntervalMethod::joint_bootstrap_diff;
    iv.n = opts.resamples;
    iv.seed = opts.seed;
    iv.point_outside = !(iv.lower <= point && point <= iv.upper);
    return iv;
}

Interval paired_wald_diff(double p1, std::size_t n1, double p2, std::size_t n2, double confidence) {
    if (n1 == 0 || n2 == 0) throw ValidationError("paired_wald_diff: sample sizes must be >= 1");
    if (p1 < 0.0 || p1 > 1.0 || p2 < 0.0 || p2 > 1.0) {
        throw ValidationError("paired_wald_diff: proportions must lie in [0, 1]");
    }
    const double z = two_sided_z(confidence);
    const double diff = p1 - p2;
    const double se = std::sqrt(p1 * (1.0 - p1) / static_cast<double>(n1) + p2 * (1.0 - p2) / static_cast<double>(n2));
    Interval iv;
    iv.point = diff;
    iv.lower = clip(diff - z * se, -1.0, 1.0);
    iv.upper = clip(diff + z * se, -1.0, 1.0);
    iv.confidence = confidence;
    iv.method = IntervalMethod::paired_wald;
    iv.n = std::min(n1, n2);
    iv.conservative = true;
    return iv;
}

Interval paired_outcome_diff(const std::vector<bool>& a, const std::vector<bool>& b, double confidence) {
    if (a.empty() || a.size() != b.size()) {
        throw ValidationError("paired_outcome_diff: outcome vectors must be nonempty and aligned");
    }
    const double z = two_sided_z(confidence);
    const double n = static_cast<double>(a.size());
    double only_a = 0.0;
    double only_b = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] && !b[i]) only_a += 1.0;
        if (!a[i] && b[i]) only_b += 1.0;
    }
    const double diff = (only_a - only_b) / n;
    const double var = std::max(0.0, ((only_a + only_b) / n - diff * diff) / n);
    Interval iv;
    iv.point = diff;
    iv.lower = clip(diff - z * std::sqrt(var), -1.0, 1.0);
    iv.upper = clip(diff + z * std::sqrt(var), -1.0, 1.0);
    iv.confidence = confidence;
    iv.method = IntervalMethod::paired_wald;
    iv.n = a.size();
    return iv;
}

}  // namespace plansite::stats
