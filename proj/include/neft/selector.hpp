#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "neft/model.hpp"

namespace neft {

/// Per-neuron cosine similarity between the rows of two checkpoints.
struct SimilarityReport {
    ModelConfig config;
    std::uint64_t org_hash = 0;
    std::uint64_t ft_hash = 0;
    /// One score per neuron, indexed by canonical flat neuron index; each in [-1, 1].
    std::vector<double> scores;
};

/// An ordered set of neurons: the unit of selection and gradient masking.
struct NeuronMask {
    std::vector<NeuronId> neurons;  ///< canonical order, no duplicates
    double fraction = 0.0;          ///< |neurons| as a share of n_total
    std::string provenance;
    std::uint64_t model_hash = 0;   ///< checkpoint the mask was derived for
    std::int64_t n_total = 0;       ///< neuron count of that model

    std::int64_t size() const { return static_cast<std::int64_t>(neurons.size()); }
    bool contains(const NeuronId& id) const;
    void validate(const ModelConfig& config) const;
};

enum class SelectMode : std::uint8_t { sensitive, reversed };

const char* select_mode_name(SelectMode m);
SelectMode select_mode_from_name(const std::string& name);

/// Cosine similarity of two equal-length vectors, accumulated left to right
/// in f64 and clamped to [-1, 1]. Both vectors zero -> 1 (nothing changed);
/// exactly one zero -> 0 (direction-free maximal change).
double cosine(std::span<const double> u, std::span<const double> v);
double cosine(std::span<const float> u, std::span<const float> v);

/// Scores every up/down row of ft against org (embed and head excluded).
SimilarityReport neuron_similarity(const ParameterSet& org, const ParameterSet& ft);

/// Picks k = round(fraction * N) neurons: lowest scores first for sensitive,
/// highest first for reversed; ties broken by canonical neuron order.
NeuronMask select_neurons(const SimilarityReport& report, double fraction, SelectMode mode);

/// Set union; both masks must come from the same checkpoint.
NeuronMask union_masks(const NeuronMask& a, const NeuronMask& b);

/// |a intersect b| / min(|a|, |b|).
double overlap(const NeuronMask& a, const NeuronMask& b);

/// One-vs-rest ridge classifier over pooled hidden states.
struct ProbeModel {
    std::int64_t d_model = 0;
    std::int64_t n_classes = 0;
    double lambda = 0.0;
    std::vector<std::vector<double>> weights;  ///< n_classes vectors of length d_model
    std::vector<double> bias;                  ///< one per class
};

/// Closed-form ridge fit: w_c = (X^T X + lambda I)^-1 X^T y_c with +/-1
/// targets per class; the intercept is the mean residual. X is (n x d) f32.
ProbeModel fit_probe(const Tensor& pooled, std::span<const std::int32_t> labels, std::int64_t n_classes,
                     double lambda);

/// Argmax class per row of pooled under the probe (ties -> lowest class id).
std::vector<std::int32_t> probe_predict(const ProbeModel& probe, const Tensor& pooled);

/// Fraction of rows whose probe prediction equals the label.
double probe_accuracy(const ProbeModel& probe, const Tensor& pooled, std::span<const std::int32_t> labels);

/// Scores each up-neuron row by max over classes of |cosine(row, w_c)| and
/// keeps the top k; ties broken by canonical neuron order.
NeuronMask probe_select(const ParameterSet& params, const ProbeModel& probe, std::int64_t k);

}  // namespace neft
