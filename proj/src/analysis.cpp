#include "neft/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neft/errors.hpp"
#include "neft/parallel.hpp"

namespace neft {

namespace {

template <typename T>
double pearson_impl(std::span<const T> x, std::span<const T> y) {
    if (x.size() != y.size())
        throw ShapeError("pearson: length mismatch " + std::to_string(x.size()) + " vs " + std::to_string(y.size()));
    if (x.size() < 2) throw ShapeError("pearson: need at least 2 samples, got " + std::to_string(x.size()));
    std::size_t n = x.size();
    double sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < n; ++i) sx += static_cast<double>(x[i]);
    for (std::size_t i = 0; i < n; ++i) sy += static_cast<double>(y[i]);
    double mx = sx / static_cast<double>(n);
    double my = sy / static_cast<double>(n);
    double cxy = 0.0, cxx = 0.0, cyy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dx = static_cast<double>(x[i]) - mx;
        double dy = static_cast<double>(y[i]) - my;
        cxy += dx * dy;
        cxx += dx * dx;
        cyy += dy * dy;
    }
    if (cxx == 0.0 || cyy == 0.0) return 0.0;
    double r = cxy / std::sqrt(cxx * cyy);
    return std::clamp(r, -1.0, 1.0);
}

}  // namespace

double pearson(std::span<const double> x, std::span<const double> y) {
    return pearson_impl(x, y);
}

double pearson(std::span<const float> x, std::span<const float> y) {
    return pearson_impl(x, y);
}

UtilizationProfile utilization_profile(const ActivationTrace& trace) {
    const ModelConfig& cfg = trace.config;
    cfg.validate();
    std::int64_t n = cfg.neuron_count();
    if (trace.token_count < 2)
        throw Error("utilization profile: need at least 2 samples per neuron, trace has " +
                    std::to_string(trace.token_count));
    if (trace.samples.rank() != 2 || trace.samples.dim(0) != n || trace.samples.dim(1) != trace.token_count)
        throw ShapeError("utilization profile: trace samples must be (neurons x token_count)");

    UtilizationProfile profile;
    profile.config = cfg;
    profile.max_pearson.assign(static_cast<std::size_t>(n), 0.0);
    profile.trace_hash = trace.content_hash();

    // Group bounds in flat index space: [layer*(dh+dm), +dh) is the up group,
    // then [.., +dm) the down group. Each neuron's max scans its own group in
    // ascending flat order, so ties and results never depend on thread count.
    parallel_for(n, [&](std::int64_t flat) {
        NeuronId id = neuron_from_flat(cfg, flat);
        std::int64_t layer_base = id.layer * cfg.neurons_per_layer();
        std::int64_t begin = id.role == Role::up ? layer_base : layer_base + cfg.d_hidden;
        std::int64_t end = id.role == Role::up ? layer_base + cfg.d_hidden : layer_base + cfg.neurons_per_layer();
        double best = 0.0;
        bool any = false;
        for (std::int64_t j = begin; j < end; ++j) {
            if (j == flat) continue;
            double r = pearson(trace.row(flat), trace.row(j));
            if (!any || r > best) best = r;
            any = true;
        }
        profile.max_pearson[static_cast<std::size_t>(flat)] = any ? best : 0.0;
    });

    // Descending ranks; stable sort keeps canonical flat order among ties.
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
        return profile.max_pearson[static_cast<std::size_t>(a)] > profile.max_pearson[static_cast<std::size_t>(b)];
    });
    profile.rank.assign(static_cast<std::size_t>(n), 0);
    for (std::int64_t pos = 0; pos < n; ++pos) profile.rank[static_cast<std::size_t>(order[pos])] = pos;
    return profile;
}

RankDiffReport rank_diff(const UtilizationProfile& a, const UtilizationProfile& b,
                         std::span<const double> bucket_edges) {
    if (!(a.config == b.config)) throw Error("rank diff: profiles cover different models");
    std::int64_t n = a.config.neuron_count();
    if (static_cast<std::int64_t>(a.rank.size()) != n || static_cast<std::int64_t>(b.rank.size()) != n)
        throw Error("rank diff: profile neuron sets do not match the model");
    for (std::size_t i = 0; i < bucket_edges.size(); ++i) {
        if (!(bucket_edges[i] > 0.0 && bucket_edges[i] <= 100.0))
            throw Error("rank diff: bucket edges must lie in (0, 100]");
        if (i > 0 && !(bucket_edges[i] > bucket_edges[i - 1]))
            throw Error("rank diff: bucket edges must be strictly increasing");
    }

    RankDiffReport report;
    report.config = a.config;
    report.sign_convention =
        "delta_rank = rank_after - rank_before; positive means the neuron lost utilization rank";
    report.trace_hash_a = a.trace_hash;
    report.trace_hash_b = b.trace_hash;
    report.delta_rank.assign(static_cast<std::size_t>(n), 0);
    std::int64_t abs_sum = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t d = b.rank[static_cast<std::size_t>(i)] - a.rank[static_cast<std::size_t>(i)];
        report.delta_rank[static_cast<std::size_t>(i)] = d;
        abs_sum += d < 0 ? -d : d;
    }
    report.avg_abs_delta = static_cast<double>(abs_sum) / static_cast<double>(n);

    // Bucket membership comes from profile a: percentile of its descending
    // rank, p = 100*(rank+1)/N; bucket j holds p in (edge[j-1], edge[j]].
    for (std::size_t j = 0; j < bucket_edges.size(); ++j) {
        RankBucket bucket;
        bucket.lo = j == 0 ? 0.0 : bucket_edges[j - 1];
        bucket.hi = bucket_edges[j];
        std::int64_t sum = 0;
        for (std::int64_t i = 0; i < n; ++i) {
            double p = 100.0 * static_cast<double>(a.rank[static_cast<std::size_t>(i)] + 1) / static_cast<double>(n);
            if (p > bucket.lo && p <= bucket.hi) {
                ++bucket.count;
                std::int64_t d = report.delta_rank[static_cast<std::size_t>(i)];
                sum += d < 0 ? -d : d;
            }
        }
        bucket.avg_abs_delta = bucket.count > 0 ? static_cast<double>(sum) / static_cast<double>(bucket.count) : 0.0;
        report.buckets.push_back(bucket);
    }
    return report;
}

CategoryReport categorize(const RankDiffReport& diff, const NeuronMask& mask, std::int64_t threshold) {
    if (threshold < 1) throw Error("categorize: threshold must be >= 1, got " + std::to_string(threshold));
    const ModelConfig& cfg = diff.config;
    mask.validate(cfg);
    std::int64_t n = cfg.neuron_count();
    if (static_cast<std::int64_t>(diff.delta_rank.size()) != n)
        throw Error("categorize: rank diff does not cover the model");

    CategoryReport report;
    report.config = cfg;
    report.threshold = threshold;
    report.mask_provenance = mask.provenance;
    report.mask_hash = mask.model_hash;
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t d = diff.delta_rank[static_cast<std::size_t>(i)];
        std::int64_t mag = d < 0 ? -d : d;
        if (mag <= threshold) continue;
        NeuronId id = neuron_from_flat(cfg, i);
        report.strongly_affected.push_back(id);
        if (d > 0) report.suppressed.push_back(id);
        if (!mask.contains(id)) report.indirectly_affected.push_back(id);
    }
    return report;
}

std::int64_t threshold_from_fraction(double fraction, std::int64_t neuron_count) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw Error("threshold fraction must be in (0, 1], got " + std::to_string(fraction));
    std::int64_t t = std::llround(fraction * static_cast<double>(neuron_count));
    return t < 1 ? 1 : t;
}

std::vector<double> default_bucket_edges() {
    return {0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0};
}

}  // namespace neft
