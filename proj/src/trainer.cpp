#include "neft/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "neft/errors.hpp"
#include "neft/rng.hpp"

namespace neft {

const char* optimizer_name(Optimizer o) {
    return o == Optimizer::sgd ? "sgd" : "adam";
}

Optimizer optimizer_from_name(const std::string& name) {
    if (name == "sgd") return Optimizer::sgd;
    if (name == "adam") return Optimizer::adam;
    throw Error("unknown optimizer '" + name + "' (expected sgd or adam)");
}

void TrainOptions::validate() const {
    if (max_steps < 1) throw Error("train options: max_steps must be >= 1");
    if (batch_size < 1) throw Error("train options: batch_size must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw Error("train options: learning_rate must be a finite non-negative number");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw Error("train options: adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw Error("train options: adam epsilon must be positive");
}

void apply_gradient_mask(GradientSet& grads, const NeuronMask& mask, const ModelConfig& config,
                         bool unfreeze_embed_head) {
    mask.validate(config);

    // Keep-row bitmap per layer and role.
    std::vector<std::vector<char>> keep_up(static_cast<std::size_t>(config.n_layers)),
        keep_down(static_cast<std::size_t>(config.n_layers));
    for (std::int64_t l = 0; l < config.n_layers; ++l) {
        keep_up[static_cast<std::size_t>(l)].assign(static_cast<std::size_t>(config.d_hidden), 0);
        keep_down[static_cast<std::size_t>(l)].assign(static_cast<std::size_t>(config.d_model), 0);
    }
    for (const auto& id : mask.neurons) {
        auto& keep = id.role == Role::up ? keep_up[static_cast<std::size_t>(id.layer)]
                                         : keep_down[static_cast<std::size_t>(id.layer)];
        keep[static_cast<std::size_t>(id.row)] = 1;
    }

    auto zero_rows = [](Tensor& t, const std::vector<char>& keep) {
        std::int64_t width = t.dim(1);
        auto data = t.f32();
        for (std::size_t r = 0; r < keep.size(); ++r)
            if (!keep[r])
                std::memset(data.data() + r * static_cast<std::size_t>(width), 0,
                            static_cast<std::size_t>(width) * sizeof(float));
    };
    for (std::int64_t l = 0; l < config.n_layers; ++l) {
        zero_rows(grads.up[static_cast<std::size_t>(l)], keep_up[static_cast<std::size_t>(l)]);
        zero_rows(grads.down[static_cast<std::size_t>(l)], keep_down[static_cast<std::size_t>(l)]);
    }
    if (!unfreeze_embed_head) {
        std::memset(grads.embed.f32().data(), 0, grads.embed.payload_bytes());
        std::memset(grads.head.f32().data(), 0, grads.head.payload_bytes());
    }
}

AdamState AdamState::init(const ParameterSet& params) {
    AdamState state;
    for (const auto& [name, t] : params.entries()) {
        state.m.push_back(Tensor::zeros(t->shape(), Dtype::f32));
        state.v.push_back(Tensor::zeros(t->shape(), Dtype::f32));
    }
    state.t = 0;
    return state;
}

namespace {

std::vector<const Tensor*> gradient_entries(const GradientSet& grads, const ModelConfig& config) {
    std::vector<const Tensor*> out;
    out.push_back(&grads.embed);
    for (std::int64_t l = 0; l < config.n_layers; ++l) {
        out.push_back(&grads.up[static_cast<std::size_t>(l)]);
        out.push_back(&grads.down[static_cast<std::size_t>(l)]);
    }
    out.push_back(&grads.head);
    return out;
}

}  // namespace

void sgd_step(ParameterSet& params, const GradientSet& grads, double learning_rate) {
    auto ps = params.entries();
    auto gs = gradient_entries(grads, params.config);
    float lr = static_cast<float>(learning_rate);
    for (std::size_t k = 0; k < ps.size(); ++k) {
        auto w = ps[k].second->f32();
        auto gr = gs[k]->f32();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * gr[i];
    }
}

void adam_step(ParameterSet& params, const GradientSet& grads, AdamState& state, const TrainOptions& opts) {
    auto ps = params.entries();
    auto gs = gradient_entries(grads, params.config);
    state.t += 1;
    float b1 = static_cast<float>(opts.beta1);
    float b2 = static_cast<float>(opts.beta2);
    float inv_c1 = static_cast<float>(1.0 / (1.0 - std::pow(opts.beta1, static_cast<double>(state.t))));
    float inv_c2 = static_cast<float>(1.0 / (1.0 - std::pow(opts.beta2, static_cast<double>(state.t))));
    float lr = static_cast<float>(opts.learning_rate);
    float eps = static_cast<float>(opts.epsilon);
    for (std::size_t k = 0; k < ps.size(); ++k) {
        auto w = ps[k].second->f32();
        auto gr = gs[k]->f32();
        auto m = state.m[k].f32();
        auto v = state.v[k].f32();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = b1 * m[i] + (1.0f - b1) * gr[i];
            v[i] = b2 * v[i] + (1.0f - b2) * gr[i] * gr[i];
            float mhat = m[i] * inv_c1;
            float vhat = v[i] * inv_c2;
            w[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

EvalResult evaluate(const ParameterSet& params, const Dataset& data) {
    if (data.empty()) throw Error("evaluate: empty dataset");
    std::int64_t n = static_cast<std::int64_t>(data.size());
    double loss_weighted = 0.0;
    std::int64_t hits = 0;
    std::int64_t c = params.config.n_classes;
    for (std::int64_t start = 0; start < n; start += kEvalChunk) {
        std::int64_t stop = std::min(n, start + kEvalChunk);
        std::vector<std::int64_t> indices;
        for (std::int64_t i = start; i < stop; ++i) indices.push_back(i);
        Batch batch = make_batch(data, indices);
        Tape tape;
        ForwardGraph graph = build_graph(tape, params, batch, true);
        loss_weighted += tape.value(graph.loss).scalar_at(0) * static_cast<double>(stop - start);
        auto logits = tape.value(graph.logits).f32();
        for (std::int64_t i = 0; i < stop - start; ++i) {
            std::int64_t best = 0;
            for (std::int64_t j = 1; j < c; ++j)
                if (logits[static_cast<std::size_t>(i * c + j)] > logits[static_cast<std::size_t>(i * c + best)])
                    best = j;
            if (best == batch.labels[static_cast<std::size_t>(i)]) ++hits;
        }
    }
    EvalResult result;
    result.loss = loss_weighted / static_cast<double>(n);
    result.accuracy = static_cast<double>(hits) / static_cast<double>(n);
    return result;
}

TrainResult train(const ParameterSet& start, const Dataset& data, const TrainOptions& opts, const NeuronMask* mask,
                  const Dataset* eval_data) {
    opts.validate();
    start.validate();
    if (data.empty()) throw Error("train: empty dataset");
    if (mask) mask->validate(start.config);
    if (eval_data && eval_data->empty()) throw Error("train: empty evaluation dataset");

    TrainResult result;
    result.params = start;
    ParameterSet& params = result.params;
    const ModelConfig& cfg = params.config;
    AdamState adam = AdamState::init(params);

    std::int64_t n = static_cast<std::int64_t>(data.size());
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));

    auto run_eval = [&](std::int64_t steps_done) {
        EvalRecord record;
        record.step = steps_done;
        EvalResult r = evaluate(params, *eval_data);
        record.loss = r.loss;
        record.accuracy = r.accuracy;
        result.log.evals.push_back(record);
        if (!result.best_eval || record.loss < result.best_eval->loss) {
            result.best_eval = record;
            result.best_params = params;
        }
    };

    std::int64_t step = 0;
    for (std::int64_t epoch = 0; step < opts.max_steps; ++epoch) {
        for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
        if (opts.shuffle) {
            Rng rng(mix64(opts.seed, mix64(static_cast<std::uint64_t>(epoch), "epoch")));
            rng.shuffle(order);
        }
        for (std::int64_t at = 0; at < n && step < opts.max_steps; at += opts.batch_size) {
            std::int64_t stop = std::min(n, at + opts.batch_size);
            std::span<const std::int64_t> indices(order.data() + at, static_cast<std::size_t>(stop - at));
            Batch batch = make_batch(data, indices);

            Tape tape;
            ForwardGraph graph = build_graph(tape, params, batch, true);
            double loss = tape.value(graph.loss).scalar_at(0);
            if (!std::isfinite(loss)) {
                std::string ids;
                for (auto i : indices) ids += (ids.empty() ? "" : ",") + std::to_string(i);
                throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step) +
                                          " (batch examples " + ids + ")",
                                      step, std::vector<std::int64_t>(indices.begin(), indices.end()));
            }

            std::vector<Tensor> tape_grads = tape.backward(graph.loss);
            GradientSet grads;
            grads.embed = std::move(tape_grads[static_cast<std::size_t>(graph.embed)]);
            for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
                grads.up.push_back(std::move(tape_grads[static_cast<std::size_t>(graph.up[static_cast<std::size_t>(l)])]));
                grads.down.push_back(
                    std::move(tape_grads[static_cast<std::size_t>(graph.down[static_cast<std::size_t>(l)])]));
            }
            grads.head = std::move(tape_grads[static_cast<std::size_t>(graph.head)]);

            if (mask) apply_gradient_mask(grads, *mask, cfg, opts.unfreeze_embed_head);

            if (opts.optimizer == Optimizer::sgd)
                sgd_step(params, grads, opts.learning_rate);
            else
                adam_step(params, grads, adam, opts);

            result.log.steps.push_back({step, loss});
            ++step;
        }
        if (eval_data && step < opts.max_steps) run_eval(step);
    }
    if (eval_data) run_eval(step);
    return result;
}

}  // namespace neft
