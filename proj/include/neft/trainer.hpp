#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "neft/model.hpp"
#include "neft/selector.hpp"

namespace neft {

enum class Optimizer : std::uint8_t { sgd, adam };

const char* optimizer_name(Optimizer o);
Optimizer optimizer_from_name(const std::string& name);

struct TrainOptions {
    std::int64_t max_steps = 800;
    std::int64_t batch_size = 16;
    double learning_rate = 1e-3;
    Optimizer optimizer = Optimizer::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 0;
    bool shuffle = true;
    /// With a mask, embed and head are frozen; set to train them anyway.
    bool unfreeze_embed_head = false;

    void validate() const;
};

struct StepRecord {
    std::int64_t step = 0;
    double loss = 0.0;
};

struct EvalRecord {
    std::int64_t step = 0;  ///< steps completed when the evaluation ran
    double loss = 0.0;
    double accuracy = 0.0;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EvalRecord> evals;
};

/// Gradients of every model tensor, shaped like the ParameterSet.
struct GradientSet {
    Tensor embed;
    std::vector<Tensor> up;
    std::vector<Tensor> down;
    Tensor head;
};

/// Zeroes the gradient of every up/down row outside the mask; rows inside
/// keep their bytes. Embed and head gradients are fully zeroed unless
/// unfreeze_embed_head.
void apply_gradient_mask(GradientSet& grads, const NeuronMask& mask, const ModelConfig& config,
                         bool unfreeze_embed_head);

/// Adam first/second moment estimates, laid out like the ParameterSet.
/// Moments start at zero, so rows whose gradients are always masked to zero
/// never accumulate state and their weights never move.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t t = 0;

    static AdamState init(const ParameterSet& params);
};

/// One in-place optimizer update. Adam bias-correction factors are computed
/// in f64 and applied as f32 multiplies.
void sgd_step(ParameterSet& params, const GradientSet& grads, double learning_rate);
void adam_step(ParameterSet& params, const GradientSet& grads, AdamState& state, const TrainOptions& opts);

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// Mean loss and argmax accuracy over the dataset (ties -> lowest class id).
EvalResult evaluate(const ParameterSet& params, const Dataset& data);

struct TrainResult {
    ParameterSet params;
    TrainLog log;
    /// Populated when eval data was given: the checkpoint with the lowest
    /// evaluation loss (epoch boundaries and the final step are candidates).
    std::optional<ParameterSet> best_params;
    std::optional<EvalRecord> best_eval;
};

/// Deterministic mini-batch training. Examples are shuffled once per epoch by
/// a seeded generator and consumed in batch_size slices (the trailing short
/// batch included); training stops after exactly opts.max_steps updates.
/// With a mask, gradients are masked before the optimizer sees them, so every
/// parameter row outside the mask keeps its initial bytes. A non-finite batch
/// loss aborts with the failing step and batch indices.
TrainResult train(const ParameterSet& start, const Dataset& data, const TrainOptions& opts,
                  const NeuronMask* mask = nullptr, const Dataset* eval_data = nullptr);

}  // namespace neft
