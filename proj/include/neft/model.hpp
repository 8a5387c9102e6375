#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neft/tensor.hpp"

namespace neft {

/// Shape and initialization parameters of the toy network.
struct ModelConfig {
    std::int64_t vocab_size = 0;
    std::int64_t d_model = 0;
    std::int64_t d_hidden = 0;
    std::int64_t n_layers = 0;
    std::int64_t n_classes = 0;
    Activation activation = Activation::relu;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const ModelConfig&) const = default;

    /// Neurons per layer: one per up row plus one per down row.
    std::int64_t neurons_per_layer() const { return d_hidden + d_model; }
    /// Total neuron count across the model.
    std::int64_t neuron_count() const { return n_layers * neurons_per_layer(); }
};

enum class Role : std::uint8_t { up, down };

const char* role_name(Role r);
Role role_from_name(const std::string& name);

/// Coordinates of one neuron: a row of an up- or down-projection matrix.
struct NeuronId {
    std::int64_t layer = 0;
    Role role = Role::up;
    std::int64_t row = 0;

    bool operator==(const NeuronId&) const = default;
    /// Canonical order: (layer, up before down, row).
    auto operator<=>(const NeuronId& o) const {
        if (auto c = layer <=> o.layer; c != 0) return c;
        if (auto c = static_cast<int>(role) <=> static_cast<int>(o.role); c != 0) return c;
        return row <=> o.row;
    }

    void validate(const ModelConfig& config) const;
};

/// Dense 0-based index of a neuron in canonical order.
std::int64_t neuron_flat_index(const ModelConfig& config, const NeuronId& id);
NeuronId neuron_from_flat(const ModelConfig& config, std::int64_t flat);

/// All weights of the model. Tensors are f32 and owned; canonical tensor
/// order is embed, up.0, down.0, up.1, down.1, ..., head.
struct ParameterSet {
    ModelConfig config;
    Tensor embed;
    std::vector<Tensor> up;
    std::vector<Tensor> down;
    Tensor head;

    /// Canonical (name, tensor) listing used for hashing and serialization.
    std::vector<std::pair<std::string, const Tensor*>> entries() const;
    std::vector<std::pair<std::string, Tensor*>> entries();

    /// FNV-1a over all payload bytes in canonical tensor order.
    std::uint64_t content_hash() const;

    /// The weight row a neuron owns.
    std::span<const float> neuron_row(const NeuronId& id) const;

    void validate() const;
};

/// Deterministic seeded init: every weight uniform in (-a, a), a = 1/sqrt(fan_in).
ParameterSet init_params(const ModelConfig& config);

/// One labeled example: a non-empty token sequence and a class label.
struct Example {
    std::vector<std::int32_t> tokens;
    std::int32_t label = 0;
};

using Dataset = std::vector<Example>;

/// A flattened mini-batch: token ids of all examples back to back, per-example
/// lengths, and labels.
struct Batch {
    std::vector<std::int32_t> tokens;
    std::vector<std::int64_t> lengths;
    std::vector<std::int32_t> labels;

    std::int64_t size() const { return static_cast<std::int64_t>(lengths.size()); }
};

Batch make_batch(const Dataset& data, std::span<const std::int64_t> indices);

/// Tape ids for one recorded forward pass; leaves first, then the
/// intermediates needed for tracing, then logits and (optionally) loss.
struct ForwardGraph {
    TensorId embed = -1;
    std::vector<TensorId> up;
    std::vector<TensorId> down;
    TensorId head = -1;
    std::vector<TensorId> hidden;    ///< post-activation, one (tokens x d_hidden) per layer
    std::vector<TensorId> down_out;  ///< pre-residual down-projection output, (tokens x d_model) per layer
    TensorId pooled = -1;            ///< mean-over-tokens final hidden state, (batch x d_model)
    TensorId logits = -1;
    TensorId loss = -1;  ///< -1 when built without labels
};

/// Records the full forward pass (and mean cross-entropy loss when
/// with_loss) on the tape at the given dtype.
ForwardGraph build_graph(Tape& tape, const ParameterSet& params, const Batch& batch, bool with_loss,
                         Dtype dtype = Dtype::f32);

/// Logits for a whole dataset, computed in fixed-size chunks.
Tensor model_logits(const ParameterSet& params, const Dataset& data);

/// Mean-pooled final hidden state per example, (n x d_model); the probe input.
Tensor pooled_states(const ParameterSet& params, const Dataset& data);

/// Per-neuron activation samples over evaluation tokens. Row i of samples
/// holds token_count scalars for the neuron with flat index i: for up-neurons
/// the post-activation hidden value, for down-neurons the pre-residual
/// down-projection coordinate.
struct ActivationTrace {
    ModelConfig config;
    Tensor samples;  ///< f32, (neuron_count x token_count)
    std::int64_t token_count = 0;
    std::uint64_t dataset_hash = 0;
    std::uint64_t model_hash = 0;

    std::span<const float> row(std::int64_t flat) const;
    /// FNV-1a over the sample payload bytes.
    std::uint64_t content_hash() const;
};

/// Collects activation samples over every token of the dataset. When the
/// dataset holds more than max_tokens tokens, a seeded uniform subsample of
/// token positions (in dataset order) is used instead.
ActivationTrace compute_trace(const ParameterSet& params, const Dataset& data, std::uint64_t dataset_hash,
                              std::int64_t max_tokens = 10000, std::uint64_t sample_seed = 0);

/// Number of examples evaluated per forward chunk in model_logits,
/// pooled_states, compute_trace and evaluate.
inline constexpr std::int64_t kEvalChunk = 64;

}  // namespace neft
