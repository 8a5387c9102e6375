#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "neft/model.hpp"
#include "neft/selector.hpp"

namespace neft {

/// Per-neuron utilization: the highest Pearson correlation against any other
/// neuron of the same (layer, role) group, and the 0-based descending rank of
/// that score (rank 0 = most correlated).
struct UtilizationProfile {
    ModelConfig config;
    std::vector<double> max_pearson;  ///< by flat neuron index
    std::vector<std::int64_t> rank;   ///< by flat neuron index; a permutation of 0..N-1
    std::uint64_t trace_hash = 0;
};

/// One percentile bucket of a rank-shift report: neurons whose baseline rank
/// percentile falls in (lo, hi].
struct RankBucket {
    double lo = 0.0;
    double hi = 0.0;
    std::int64_t count = 0;
    double avg_abs_delta = 0.0;
};

/// Rank movement between two utilization profiles of the same model.
struct RankDiffReport {
    ModelConfig config;
    std::vector<std::int64_t> delta_rank;  ///< rank_b - rank_a, by flat neuron index
    double avg_abs_delta = 0.0;
    std::vector<RankBucket> buckets;
    std::string sign_convention;
    std::uint64_t trace_hash_a = 0;
    std::uint64_t trace_hash_b = 0;
};

/// The three neuron populations carved out of a rank-shift report.
struct CategoryReport {
    ModelConfig config;
    std::vector<NeuronId> strongly_affected;   ///< |delta_rank| > threshold
    std::vector<NeuronId> suppressed;          ///< strongly affected and rank got worse
    std::vector<NeuronId> indirectly_affected; ///< strongly affected but outside the mask
    std::int64_t threshold = 0;
    std::string mask_provenance;
    std::uint64_t mask_hash = 0;
};

/// Sample Pearson correlation, accumulated left to right in f64 (two-pass:
/// means first, then centered products). Zero variance in either series -> 0.
/// Result clamped to [-1, 1].
double pearson(std::span<const double> x, std::span<const double> y);
double pearson(std::span<const float> x, std::span<const float> y);

/// Max pairwise Pearson per neuron within its (layer, role) group, plus
/// descending ranks with canonical tie-breaking. Groups of size 1 score 0.
UtilizationProfile utilization_profile(const ActivationTrace& trace);

/// Per-neuron rank movement from profile a to profile b, the global mean of
/// |delta|, and bucket means grouped by a's rank percentile: bucket j covers
/// percentiles (edges[j-1], edges[j]] with the first bucket starting at 0.
RankDiffReport rank_diff(const UtilizationProfile& a, const UtilizationProfile& b,
                         std::span<const double> bucket_edges);

/// Splits neurons into strongly affected (|delta| > threshold), suppressed
/// (strongly affected with delta > 0, i.e. rank moved toward less utilized),
/// and indirectly affected (strongly affected outside the mask).
CategoryReport categorize(const RankDiffReport& diff, const NeuronMask& mask, std::int64_t threshold);

/// Default category threshold as a share of the neuron population.
inline constexpr double kDefaultThresholdFraction = 0.207;

/// round(fraction * neuron_count), half away from zero, floored at 1.
std::int64_t threshold_from_fraction(double fraction, std::int64_t neuron_count);

/// Default percentile bucket edges for rank-shift reports.
std::vector<double> default_bucket_edges();

}  // namespace neft
