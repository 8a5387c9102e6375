#include "neft/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "neft/errors.hpp"
#include "neft/hash.hpp"
#include "neft/rng.hpp"

namespace neft {

void ModelConfig::validate() const {
    auto positive = [](std::int64_t v, const char* name) {
        if (v < 1) throw Error(std::string("model config: ") + name + " must be >= 1, got " + std::to_string(v));
        if (v > (std::int64_t{1} << 24))
            throw Error(std::string("model config: ") + name + " too large: " + std::to_string(v));
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(d_hidden, "d_hidden");
    positive(n_layers, "n_layers");
    positive(n_classes, "n_classes");
}

const char* role_name(Role r) {
    return r == Role::up ? "up" : "down";
}

Role role_from_name(const std::string& name) {
    if (name == "up") return Role::up;
    if (name == "down") return Role::down;
    throw Error("unknown neuron role '" + name + "' (expected up or down)");
}

void NeuronId::validate(const ModelConfig& config) const {
    if (layer < 0 || layer >= config.n_layers)
        throw Error("neuron layer " + std::to_string(layer) + " out of range [0," + std::to_string(config.n_layers) +
                    ")");
    std::int64_t rows = role == Role::up ? config.d_hidden : config.d_model;
    if (row < 0 || row >= rows)
        throw Error("neuron row " + std::to_string(row) + " out of range [0," + std::to_string(rows) + ") for " +
                    role_name(role) + " in layer " + std::to_string(layer));
}

std::int64_t neuron_flat_index(const ModelConfig& config, const NeuronId& id) {
    id.validate(config);
    std::int64_t base = id.layer * config.neurons_per_layer();
    return base + (id.role == Role::up ? id.row : config.d_hidden + id.row);
}

NeuronId neuron_from_flat(const ModelConfig& config, std::int64_t flat) {
    if (flat < 0 || flat >= config.neuron_count())
        throw Error("flat neuron index " + std::to_string(flat) + " out of range [0," +
                    std::to_string(config.neuron_count()) + ")");
    std::int64_t per = config.neurons_per_layer();
    NeuronId id;
    id.layer = flat / per;
    std::int64_t rem = flat % per;
    if (rem < config.d_hidden) {
        id.role = Role::up;
        id.row = rem;
    } else {
        id.role = Role::down;
        id.row = rem - config.d_hidden;
    }
    return id;
}

std::vector<std::pair<std::string, const Tensor*>> ParameterSet::entries() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.emplace_back("embed", &embed);
    for (std::int64_t l = 0; l < config.n_layers; ++l) {
        out.emplace_back("up." + std::to_string(l), &up[static_cast<std::size_t>(l)]);
        out.emplace_back("down." + std::to_string(l), &down[static_cast<std::size_t>(l)]);
    }
    out.emplace_back("head", &head);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> ParameterSet::entries() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("embed", &embed);
    for (std::int64_t l = 0; l < config.n_layers; ++l) {
        out.emplace_back("up." + std::to_string(l), &up[static_cast<std::size_t>(l)]);
        out.emplace_back("down." + std::to_string(l), &down[static_cast<std::size_t>(l)]);
    }
    out.emplace_back("head", &head);
    return out;
}

std::uint64_t ParameterSet::content_hash() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& [name, t] : entries()) h = fnv1a64(t->payload(), t->payload_bytes(), h);
    return h;
}

std::span<const float> ParameterSet::neuron_row(const NeuronId& id) const {
    id.validate(config);
    const Tensor& t = id.role == Role::up ? up[static_cast<std::size_t>(id.layer)]
                                          : down[static_cast<std::size_t>(id.layer)];
    std::int64_t width = t.dim(1);
    return t.f32().subspan(static_cast<std::size_t>(id.row * width), static_cast<std::size_t>(width));
}

void ParameterSet::validate() const {
    config.validate();
    auto expect = [](const Tensor& t, std::int64_t r, std::int64_t c, const std::string& name) {
        if (t.dtype() != Dtype::f32) throw DtypeError("parameter " + name + " must be f32");
        if (t.rank() != 2 || t.dim(0) != r || t.dim(1) != c)
            throw ShapeError("parameter " + name + " has wrong shape (expected " + std::to_string(r) + "x" +
                             std::to_string(c) + ")");
    };
    expect(embed, config.vocab_size, config.d_model, "embed");
    if (static_cast<std::int64_t>(up.size()) != config.n_layers ||
        static_cast<std::int64_t>(down.size()) != config.n_layers)
        throw ShapeError("parameter set has wrong layer count");
    for (std::int64_t l = 0; l < config.n_layers; ++l) {
        expect(up[static_cast<std::size_t>(l)], config.d_hidden, config.d_model, "up." + std::to_string(l));
        expect(down[static_cast<std::size_t>(l)], config.d_model, config.d_hidden, "down." + std::to_string(l));
    }
    expect(head, config.n_classes, config.d_model, "head");
}

namespace {

Tensor init_tensor(std::int64_t rows, std::int64_t cols, std::int64_t fan_in, std::uint64_t model_seed,
                   const std::string& name) {
    Rng rng(mix64(model_seed, name));
    double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<float> data(static_cast<std::size_t>(rows * cols));
    for (auto& v : data) v = static_cast<float>(rng.uniform(-a, a));
    return Tensor::of_f32({rows, cols}, std::move(data));
}

}  // namespace

ParameterSet init_params(const ModelConfig& config) {
    config.validate();
    ParameterSet p;
    p.config = config;
    p.embed = init_tensor(config.vocab_size, config.d_model, config.d_model, config.seed, "embed");
    for (std::int64_t l = 0; l < config.n_layers; ++l) {
        p.up.push_back(init_tensor(config.d_hidden, config.d_model, config.d_model, config.seed,
                                   "up." + std::to_string(l)));
        p.down.push_back(init_tensor(config.d_model, config.d_hidden, config.d_hidden, config.seed,
                                     "down." + std::to_string(l)));
    }
    p.head = init_tensor(config.n_classes, config.d_model, config.d_model, config.seed, "head");
    return p;
}

Batch make_batch(const Dataset& data, std::span<const std::int64_t> indices) {
    Batch b;
    for (auto i : indices) {
        if (i < 0 || i >= static_cast<std::int64_t>(data.size()))
            throw Error("batch index " + std::to_string(i) + " out of range");
        const Example& ex = data[static_cast<std::size_t>(i)];
        if (ex.tokens.empty()) throw Error("example " + std::to_string(i) + " has no tokens");
        b.tokens.insert(b.tokens.end(), ex.tokens.begin(), ex.tokens.end());
        b.lengths.push_back(static_cast<std::int64_t>(ex.tokens.size()));
        b.labels.push_back(ex.label);
    }
    return b;
}

ForwardGraph build_graph(Tape& tape, const ParameterSet& params, const Batch& batch, bool with_loss, Dtype dtype) {
    if (batch.size() == 0) throw Error("forward: empty batch");
    auto as = [&](const Tensor& t) { return tape.leaf(t.dtype() == dtype ? t : t.to(dtype)); };

    ForwardGraph g;
    g.embed = as(params.embed);
    for (std::int64_t l = 0; l < params.config.n_layers; ++l) {
        g.up.push_back(as(params.up[static_cast<std::size_t>(l)]));
        g.down.push_back(as(params.down[static_cast<std::size_t>(l)]));
    }
    g.head = as(params.head);

    TensorId x = tape.embedding_gather(g.embed, batch.tokens);
    for (std::int64_t l = 0; l < params.config.n_layers; ++l) {
        TensorId z = tape.matmul_nt(x, g.up[static_cast<std::size_t>(l)]);
        TensorId a = tape.activation(z, params.config.activation);
        TensorId y = tape.matmul_nt(a, g.down[static_cast<std::size_t>(l)]);
        g.hidden.push_back(a);
        g.down_out.push_back(y);
        x = tape.add(x, y);
    }
    g.pooled = tape.segment_mean(x, batch.lengths);
    g.logits = tape.matmul_nt(g.pooled, g.head);
    if (with_loss) g.loss = tape.softmax_cross_entropy(g.logits, batch.labels);
    return g;
}

namespace {

// Runs fn over the dataset in fixed-size chunks, in order.
template <typename Fn>
void for_each_chunk(const Dataset& data, Fn&& fn) {
    if (data.empty()) throw Error("empty dataset");
    std::int64_t n = static_cast<std::int64_t>(data.size());
    for (std::int64_t start = 0; start < n; start += kEvalChunk) {
        std::int64_t stop = std::min(n, start + kEvalChunk);
        std::vector<std::int64_t> indices;
        for (std::int64_t i = start; i < stop; ++i) indices.push_back(i);
        fn(start, make_batch(data, indices));
    }
}

}  // namespace

Tensor model_logits(const ParameterSet& params, const Dataset& data) {
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(data.size()), params.config.n_classes}, Dtype::f32);
    std::int64_t c = params.config.n_classes;
    for_each_chunk(data, [&](std::int64_t start, const Batch& batch) {
        Tape tape;
        ForwardGraph g = build_graph(tape, params, batch, false);
        auto logits = tape.value(g.logits).f32();
        std::memcpy(out.f32().data() + start * c, logits.data(), logits.size() * sizeof(float));
    });
    return out;
}

Tensor pooled_states(const ParameterSet& params, const Dataset& data) {
    std::int64_t d = params.config.d_model;
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(data.size()), d}, Dtype::f32);
    for_each_chunk(data, [&](std::int64_t start, const Batch& batch) {
        Tape tape;
        ForwardGraph g = build_graph(tape, params, batch, false);
        const Tensor& pooled = tape.value(g.pooled);
        std::memcpy(out.f32().data() + start * d, pooled.f32().data(),
                    static_cast<std::size_t>(batch.size() * d) * sizeof(float));
    });
    return out;
}

std::span<const float> ActivationTrace::row(std::int64_t flat) const {
    if (flat < 0 || flat >= config.neuron_count())
        throw Error("trace row " + std::to_string(flat) + " out of range");
    return samples.f32().subspan(static_cast<std::size_t>(flat * token_count), static_cast<std::size_t>(token_count));
}

std::uint64_t ActivationTrace::content_hash() const {
    return fnv1a64(samples.payload(), samples.payload_bytes());
}

ActivationTrace compute_trace(const ParameterSet& params, const Dataset& data, std::uint64_t dataset_hash,
                              std::int64_t max_tokens, std::uint64_t sample_seed) {
    if (data.empty()) throw Error("empty dataset");
    std::int64_t total_tokens = 0;
    for (const auto& ex : data) total_tokens += static_cast<std::int64_t>(ex.tokens.size());

    // Global token positions retained, ascending (all of them if under the cap).
    std::vector<std::int64_t> keep;
    if (total_tokens <= max_tokens) {
        keep.resize(static_cast<std::size_t>(total_tokens));
        for (std::int64_t i = 0; i < total_tokens; ++i) keep[static_cast<std::size_t>(i)] = i;
    } else {
        Rng rng(mix64(sample_seed, "trace-subsample"));
        keep = rng.sample_without_replacement(total_tokens, max_tokens);
        std::sort(keep.begin(), keep.end());
    }

    const ModelConfig& cfg = params.config;
    std::int64_t n_neurons = cfg.neuron_count();
    std::int64_t t_count = static_cast<std::int64_t>(keep.size());
    ActivationTrace trace;
    trace.config = cfg;
    trace.samples = Tensor::zeros({n_neurons, t_count}, Dtype::f32);
    trace.token_count = t_count;
    trace.dataset_hash = dataset_hash;
    trace.model_hash = params.content_hash();
    auto out = trace.samples.f32();

    std::int64_t token_base = 0;  // global index of the chunk's first token
    std::size_t keep_cursor = 0;  // next retained position to look for
    for_each_chunk(data, [&](std::int64_t, const Batch& batch) {
        std::int64_t chunk_tokens = 0;
        for (auto l : batch.lengths) chunk_tokens += l;
        // Retained positions that fall inside this chunk, as chunk-local rows.
        std::vector<std::int64_t> local;
        std::vector<std::int64_t> slots;
        while (keep_cursor < keep.size() && keep[keep_cursor] < token_base + chunk_tokens) {
            local.push_back(keep[keep_cursor] - token_base);
            slots.push_back(static_cast<std::int64_t>(keep_cursor));
            ++keep_cursor;
        }
        if (!local.empty()) {
            Tape tape;
            ForwardGraph g = build_graph(tape, params, batch, false);
            for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
                auto hidden = tape.value(g.hidden[static_cast<std::size_t>(l)]).f32();
                auto down_out = tape.value(g.down_out[static_cast<std::size_t>(l)]).f32();
                std::int64_t layer_base = l * cfg.neurons_per_layer();
                for (std::size_t k = 0; k < local.size(); ++k) {
                    std::int64_t row = local[k], slot = slots[k];
                    for (std::int64_t r = 0; r < cfg.d_hidden; ++r)
                        out[static_cast<std::size_t>((layer_base + r) * t_count + slot)] =
                            hidden[static_cast<std::size_t>(row * cfg.d_hidden + r)];
                    for (std::int64_t r = 0; r < cfg.d_model; ++r)
                        out[static_cast<std::size_t>((layer_base + cfg.d_hidden + r) * t_count + slot)] =
                            down_out[static_cast<std::size_t>(row * cfg.d_model + r)];
                }
            }
        }
        token_base += chunk_tokens;
    });
    return trace;
}

}  // namespace neft
