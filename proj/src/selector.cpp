#include "neft/selector.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "neft/errors.hpp"
#include "neft/parallel.hpp"

namespace neft {

bool NeuronMask::contains(const NeuronId& id) const {
    return std::binary_search(neurons.begin(), neurons.end(), id);
}

void NeuronMask::validate(const ModelConfig& config) const {
    for (const auto& id : neurons) id.validate(config);
    for (std::size_t i = 1; i < neurons.size(); ++i)
        if (!(neurons[i - 1] < neurons[i]))
            throw Error("mask neurons not in strict canonical order at position " + std::to_string(i));
    if (n_total != config.neuron_count())
        throw Error("mask covers a model with " + std::to_string(n_total) + " neurons, config has " +
                    std::to_string(config.neuron_count()));
}

const char* select_mode_name(SelectMode m) {
    return m == SelectMode::sensitive ? "sensitive" : "reversed";
}

SelectMode select_mode_from_name(const std::string& name) {
    if (name == "sensitive") return SelectMode::sensitive;
    if (name == "reversed") return SelectMode::reversed;
    throw Error("unknown selection mode '" + name + "' (expected sensitive or reversed)");
}

namespace {

template <typename T>
double cosine_impl(std::span<const T> u, std::span<const T> v) {
    if (u.size() != v.size())
        throw ShapeError("cosine: length mismatch " + std::to_string(u.size()) + " vs " + std::to_string(v.size()));
    if (u.empty()) throw ShapeError("cosine: empty vectors");
    double dot = 0.0, uu = 0.0, vv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        double a = static_cast<double>(u[i]);
        double b = static_cast<double>(v[i]);
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if (uu == 0.0 && vv == 0.0) return 1.0;
    if (uu == 0.0 || vv == 0.0) return 0.0;
    // sqrt(uu * vv) rather than sqrt(uu) * sqrt(vv): sqrt(x * x) == x exactly
    // in IEEE arithmetic, so identical (or positively scaled) vectors score
    // exactly 1.0 and negated vectors exactly -1.0.
    double s = dot / std::sqrt(uu * vv);
    return std::clamp(s, -1.0, 1.0);
}

}  // namespace

double cosine(std::span<const double> u, std::span<const double> v) {
    return cosine_impl(u, v);
}

double cosine(std::span<const float> u, std::span<const float> v) {
    return cosine_impl(u, v);
}

SimilarityReport neuron_similarity(const ParameterSet& org, const ParameterSet& ft) {
    if (!(org.config == ft.config)) throw Error("neuron similarity: checkpoint configs differ");
    org.validate();
    ft.validate();
    const ModelConfig& cfg = org.config;
    SimilarityReport report;
    report.config = cfg;
    report.org_hash = org.content_hash();
    report.ft_hash = ft.content_hash();
    report.scores.assign(static_cast<std::size_t>(cfg.neuron_count()), 0.0);
    parallel_for(cfg.neuron_count(), [&](std::int64_t flat) {
        NeuronId id = neuron_from_flat(cfg, flat);
        report.scores[static_cast<std::size_t>(flat)] = cosine(org.neuron_row(id), ft.neuron_row(id));
    });
    return report;
}

namespace {

// round(fraction * n), half away from zero.
std::int64_t budget_size(double fraction, std::int64_t n) {
    return std::llround(fraction * static_cast<double>(n));
}

NeuronMask mask_from_flat(const ModelConfig& cfg, std::vector<std::int64_t> flats, double fraction,
                          std::string provenance, std::uint64_t model_hash) {
    std::sort(flats.begin(), flats.end());
    NeuronMask mask;
    mask.neurons.reserve(flats.size());
    for (auto f : flats) mask.neurons.push_back(neuron_from_flat(cfg, f));
    mask.fraction = fraction;
    mask.provenance = std::move(provenance);
    mask.model_hash = model_hash;
    mask.n_total = cfg.neuron_count();
    return mask;
}

std::string percent_label(double fraction) {
    double pct = fraction * 100.0;
    std::string s = std::to_string(pct);
    s.erase(s.find_last_not_of('0') + 1);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
}

}  // namespace

NeuronMask select_neurons(const SimilarityReport& report, double fraction, SelectMode mode) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw Error("selection fraction must be in (0, 1], got " + std::to_string(fraction));
    std::int64_t n = report.config.neuron_count();
    if (static_cast<std::int64_t>(report.scores.size()) != n)
        throw Error("similarity report has " + std::to_string(report.scores.size()) + " scores for " +
                    std::to_string(n) + " neurons");
    std::int64_t k = budget_size(fraction, n);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    // stable sort keeps canonical order among equal scores
    if (mode == SelectMode::sensitive)
        std::stable_sort(order.begin(), order.end(),
                         [&](std::int64_t a, std::int64_t b) { return report.scores[a] < report.scores[b]; });
    else
        std::stable_sort(order.begin(), order.end(),
                         [&](std::int64_t a, std::int64_t b) { return report.scores[a] > report.scores[b]; });
    order.resize(static_cast<std::size_t>(k));
    return mask_from_flat(report.config, std::move(order), fraction,
                          std::string(select_mode_name(mode)) + "@" + percent_label(fraction) + "%",
                          report.org_hash);
}

NeuronMask union_masks(const NeuronMask& a, const NeuronMask& b) {
    if (a.model_hash != b.model_hash) throw Error("mask union: masks reference different checkpoints");
    if (a.n_total != b.n_total) throw Error("mask union: masks disagree on total neuron count");
    NeuronMask out;
    std::set_union(a.neurons.begin(), a.neurons.end(), b.neurons.begin(), b.neurons.end(),
                   std::back_inserter(out.neurons));
    out.n_total = a.n_total;
    out.fraction = a.n_total > 0 ? static_cast<double>(out.neurons.size()) / static_cast<double>(a.n_total) : 0.0;
    out.provenance = "union(" + a.provenance + "," + b.provenance + ")";
    out.model_hash = a.model_hash;
    return out;
}

double overlap(const NeuronMask& a, const NeuronMask& b) {
    if (a.model_hash != b.model_hash) throw Error("mask overlap: masks reference different checkpoints");
    if (a.neurons.empty() || b.neurons.empty()) throw Error("mask overlap: empty mask");
    std::vector<NeuronId> common;
    std::set_intersection(a.neurons.begin(), a.neurons.end(), b.neurons.begin(), b.neurons.end(),
                          std::back_inserter(common));
    double denom = static_cast<double>(std::min(a.neurons.size(), b.neurons.size()));
    return static_cast<double>(common.size()) / denom;
}

namespace {

// Solves (A)x = rhs for symmetric positive definite A via Cholesky, in place.
// Throws when a pivot collapses, which for ridge normals means lambda = 0 on
// a rank-deficient design.
std::vector<double> solve_spd(std::vector<double> a, std::vector<double> rhs, std::int64_t d) {
    for (std::int64_t j = 0; j < d; ++j) {
        double diag = a[static_cast<std::size_t>(j * d + j)];
        for (std::int64_t p = 0; p < j; ++p) {
            double l = a[static_cast<std::size_t>(j * d + p)];
            diag -= l * l;
        }
        if (!(diag > 0.0) || !std::isfinite(diag))
            throw Error("ridge system is singular; use lambda > 0");
        diag = std::sqrt(diag);
        a[static_cast<std::size_t>(j * d + j)] = diag;
        for (std::int64_t i = j + 1; i < d; ++i) {
            double v = a[static_cast<std::size_t>(i * d + j)];
            for (std::int64_t p = 0; p < j; ++p)
                v -= a[static_cast<std::size_t>(i * d + p)] * a[static_cast<std::size_t>(j * d + p)];
            a[static_cast<std::size_t>(i * d + j)] = v / diag;
        }
    }
    // forward substitution L y = rhs
    for (std::int64_t i = 0; i < d; ++i) {
        double v = rhs[static_cast<std::size_t>(i)];
        for (std::int64_t p = 0; p < i; ++p) v -= a[static_cast<std::size_t>(i * d + p)] * rhs[static_cast<std::size_t>(p)];
        rhs[static_cast<std::size_t>(i)] = v / a[static_cast<std::size_t>(i * d + i)];
    }
    // back substitution L^T x = y
    for (std::int64_t i = d - 1; i >= 0; --i) {
        double v = rhs[static_cast<std::size_t>(i)];
        for (std::int64_t p = i + 1; p < d; ++p) v -= a[static_cast<std::size_t>(p * d + i)] * rhs[static_cast<std::size_t>(p)];
        rhs[static_cast<std::size_t>(i)] = v / a[static_cast<std::size_t>(i * d + i)];
    }
    return rhs;
}

}  // namespace

ProbeModel fit_probe(const Tensor& pooled, std::span<const std::int32_t> labels, std::int64_t n_classes,
                     double lambda) {
    if (pooled.rank() != 2) throw ShapeError("probe fit: pooled states must be rank 2");
    std::int64_t n = pooled.dim(0), d = pooled.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ShapeError("probe fit: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                         " rows");
    if (n_classes < 1) throw Error("probe fit: need at least one class");
    if (n < n_classes)
        throw Error("probe fit: " + std::to_string(n) + " examples for " + std::to_string(n_classes) + " classes");
    if (lambda < 0.0) throw Error("probe fit: lambda must be >= 0");
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < 0 || labels[i] >= n_classes)
            throw Error("probe fit: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                        " out of range");

    std::vector<double> x(static_cast<std::size_t>(n * d));
    for (std::int64_t i = 0; i < n * d; ++i) x[static_cast<std::size_t>(i)] = pooled.scalar_at(i);

    // Normal matrix X^T X + lambda I (symmetric, filled fully).
    std::vector<double> normal(static_cast<std::size_t>(d * d), 0.0);
    for (std::int64_t p = 0; p < d; ++p)
        for (std::int64_t q = 0; q < d; ++q) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < n; ++i)
                acc += x[static_cast<std::size_t>(i * d + p)] * x[static_cast<std::size_t>(i * d + q)];
            normal[static_cast<std::size_t>(p * d + q)] = acc + (p == q ? lambda : 0.0);
        }

    ProbeModel probe;
    probe.d_model = d;
    probe.n_classes = n_classes;
    probe.lambda = lambda;
    for (std::int64_t c = 0; c < n_classes; ++c) {
        std::vector<double> rhs(static_cast<std::size_t>(d), 0.0);
        for (std::int64_t p = 0; p < d; ++p) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < n; ++i) {
                double y = labels[static_cast<std::size_t>(i)] == c ? 1.0 : -1.0;
                acc += x[static_cast<std::size_t>(i * d + p)] * y;
            }
            rhs[static_cast<std::size_t>(p)] = acc;
        }
        std::vector<double> w = solve_spd(normal, std::move(rhs), d);
        // intercept: mean residual of the linear part
        double resid = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            double y = labels[static_cast<std::size_t>(i)] == c ? 1.0 : -1.0;
            double pred = 0.0;
            for (std::int64_t p = 0; p < d; ++p)
                pred += w[static_cast<std::size_t>(p)] * x[static_cast<std::size_t>(i * d + p)];
            resid += y - pred;
        }
        probe.bias.push_back(resid / static_cast<double>(n));
        probe.weights.push_back(std::move(w));
    }
    return probe;
}

std::vector<std::int32_t> probe_predict(const ProbeModel& probe, const Tensor& pooled) {
    if (pooled.rank() != 2 || pooled.dim(1) != probe.d_model)
        throw ShapeError("probe predict: pooled states must be (n x " + std::to_string(probe.d_model) + ")");
    std::int64_t n = pooled.dim(0), d = probe.d_model;
    std::vector<std::int32_t> out(static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < n; ++i) {
        std::int32_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::int64_t c = 0; c < probe.n_classes; ++c) {
            double s = probe.bias[static_cast<std::size_t>(c)];
            for (std::int64_t p = 0; p < d; ++p)
                s += probe.weights[static_cast<std::size_t>(c)][static_cast<std::size_t>(p)] *
                     pooled.scalar_at(i * d + p);
            if (s > best_score) {
                best_score = s;
                best = static_cast<std::int32_t>(c);
            }
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

double probe_accuracy(const ProbeModel& probe, const Tensor& pooled, std::span<const std::int32_t> labels) {
    auto pred = probe_predict(probe, pooled);
    if (pred.size() != labels.size()) throw ShapeError("probe accuracy: label count mismatch");
    std::int64_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == labels[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(pred.size());
}

NeuronMask probe_select(const ParameterSet& params, const ProbeModel& probe, std::int64_t k) {
    params.validate();
    const ModelConfig& cfg = params.config;
    if (probe.d_model != cfg.d_model)
        throw Error("probe select: probe dimension " + std::to_string(probe.d_model) + " does not match d_model " +
                    std::to_string(cfg.d_model));
    std::int64_t n_up = cfg.n_layers * cfg.d_hidden;
    if (k < 0 || k > n_up)
        throw Error("probe select: k = " + std::to_string(k) + " exceeds the " + std::to_string(n_up) +
                    " eligible up-neurons");

    struct Scored {
        std::int64_t flat;
        double score;
    };
    std::vector<Scored> scored;
    for (std::int64_t l = 0; l < cfg.n_layers; ++l)
        for (std::int64_t r = 0; r < cfg.d_hidden; ++r) {
            NeuronId id{l, Role::up, r};
            auto row = params.neuron_row(id);
            std::vector<double> u(row.begin(), row.end());
            double best = 0.0;
            for (std::int64_t c = 0; c < probe.n_classes; ++c) {
                double s = std::abs(cosine(std::span<const double>(u),
                                           std::span<const double>(probe.weights[static_cast<std::size_t>(c)])));
                if (s > best) best = s;
            }
            scored.push_back({neuron_flat_index(cfg, id), best});
        }
    std::stable_sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });
    std::vector<std::int64_t> flats;
    for (std::int64_t i = 0; i < k; ++i) flats.push_back(scored[static_cast<std::size_t>(i)].flat);
    double fraction = static_cast<double>(k) / static_cast<double>(cfg.neuron_count());
    return mask_from_flat(cfg, std::move(flats), fraction, "probe@k=" + std::to_string(k), params.content_hash());
}

}  // namespace neft
