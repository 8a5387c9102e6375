#include "neft/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "neft/errors.hpp"
#include "neft/hash.hpp"
#include "neft/rng.hpp"

namespace neft {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are not supported");

// ---------------------------------------------------------------------------
// Raw files
// ---------------------------------------------------------------------------

std::vector<std::byte> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    std::streamoff size = in.tellg();
    in.seekg(0, std::ios::beg);
    std::vector<std::byte> bytes(static_cast<std::size_t>(size));
    if (size > 0) in.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!in) throw IoError("cannot read " + path);
    return bytes;
}

void write_file(const std::string& path, const void* data, std::size_t size) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
    out.flush();
    if (!out) throw IoError("cannot write " + path);
}

void write_file(const std::string& path, const std::string& text) {
    write_file(path, text.data(), text.size());
}

std::uint64_t file_hash(const std::string& path) {
    auto bytes = read_file(path);
    return fnv1a64(bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// JSON plumbing
// ---------------------------------------------------------------------------

namespace {

json parse_json(const std::string& text, const std::string& what) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw IoError(what + ": malformed JSON");
    return j;
}

const json& need(const json& j, const char* key, const std::string& what) {
    auto it = j.find(key);
    if (it == j.end()) throw IoError(what + ": missing field '" + key + "'");
    return *it;
}

void check_format_version(const json& j, const std::string& what) {
    const json& v = need(j, "format_version", what);
    if (!v.is_number_integer()) throw IoError(what + ": format_version must be an integer");
    if (v.get<std::int64_t>() != kFormatVersion)
        throw FormatVersionError(what + ": format_version " + v.dump() + " is not supported (this build reads " +
                                 std::to_string(kFormatVersion) + ")");
}

std::int64_t need_int(const json& j, const char* key, const std::string& what) {
    const json& v = need(j, key, what);
    if (!v.is_number_integer()) throw IoError(what + ": field '" + key + "' must be an integer");
    return v.get<std::int64_t>();
}

double need_double(const json& j, const char* key, const std::string& what) {
    const json& v = need(j, key, what);
    if (!v.is_number()) throw IoError(what + ": field '" + key + "' must be a number");
    return v.get<double>();
}

std::string need_string(const json& j, const char* key, const std::string& what) {
    const json& v = need(j, key, what);
    if (!v.is_string()) throw IoError(what + ": field '" + key + "' must be a string");
    return v.get<std::string>();
}

std::uint64_t need_hash(const json& j, const char* key, const std::string& what) {
    std::string hex = need_string(j, key, what);
    try {
        return from_hex64(hex);
    } catch (const Error& e) {
        throw IoError(what + ": field '" + key + "': " + e.what());
    }
}

json config_to_json(const ModelConfig& cfg) {
    json j;
    j["vocab_size"] = cfg.vocab_size;
    j["d_model"] = cfg.d_model;
    j["d_hidden"] = cfg.d_hidden;
    j["n_layers"] = cfg.n_layers;
    j["n_classes"] = cfg.n_classes;
    j["activation"] = activation_name(cfg.activation);
    j["seed"] = cfg.seed;
    return j;
}

ModelConfig config_from_json(const json& j, const std::string& what) {
    if (!j.is_object()) throw IoError(what + ": config must be an object");
    ModelConfig cfg;
    cfg.vocab_size = need_int(j, "vocab_size", what);
    cfg.d_model = need_int(j, "d_model", what);
    cfg.d_hidden = need_int(j, "d_hidden", what);
    cfg.n_layers = need_int(j, "n_layers", what);
    cfg.n_classes = need_int(j, "n_classes", what);
    cfg.activation = activation_from_name(need_string(j, "activation", what));
    const json& seed = need(j, "seed", what);
    if (!seed.is_number_integer() && !seed.is_number_unsigned())
        throw IoError(what + ": field 'seed' must be an integer");
    cfg.seed = seed.get<std::uint64_t>();
    cfg.validate();
    return cfg;
}

json neurons_to_json(const std::vector<NeuronId>& neurons) {
    json out = json::array();
    for (const auto& id : neurons) out.push_back(json::array({id.layer, role_name(id.role), id.row}));
    return out;
}

std::vector<NeuronId> neurons_from_json(const json& j, const std::string& what, bool require_canonical) {
    if (!j.is_array()) throw IoError(what + ": neuron list must be an array");
    std::vector<NeuronId> out;
    for (const auto& entry : j) {
        if (!entry.is_array() || entry.size() != 3 || !entry[0].is_number_integer() || !entry[1].is_string() ||
            !entry[2].is_number_integer())
            throw IoError(what + ": each neuron must be [layer, role, row]");
        NeuronId id;
        id.layer = entry[0].get<std::int64_t>();
        id.role = role_from_name(entry[1].get<std::string>());
        id.row = entry[2].get<std::int64_t>();
        out.push_back(id);
    }
    if (require_canonical)
        for (std::size_t i = 1; i < out.size(); ++i)
            if (!(out[i - 1] < out[i]))
                throw IoError(what + ": neurons must be in strict canonical order (violation at index " +
                              std::to_string(i) + ")");
    return out;
}

std::string dump_json(const json& j) {
    return j.dump() + "\n";
}

json load_json_file(const std::string& path, const std::string& what) {
    auto bytes = read_file(path);
    std::string text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    json j = parse_json(text, what);
    check_format_version(j, what);
    return j;
}

// ---------------------------------------------------------------------------
// Tensor container: [u64 LE header length][JSON manifest][payload]
// ---------------------------------------------------------------------------

std::vector<std::byte> container_bytes(json header, const std::vector<std::pair<std::string, const Tensor*>>& tensors) {
    json manifest = json::array();
    std::uint64_t offset = 0;
    std::uint64_t hash = kFnvOffset;
    for (const auto& [name, t] : tensors) {
        json entry;
        entry["name"] = name;
        entry["dtype"] = dtype_name(t->dtype());
        entry["shape"] = t->shape();
        entry["byte_offset"] = offset;
        entry["byte_len"] = static_cast<std::uint64_t>(t->payload_bytes());
        manifest.push_back(entry);
        offset += t->payload_bytes();
        hash = fnv1a64(t->payload(), t->payload_bytes(), hash);
    }
    header["format_version"] = kFormatVersion;
    header["tensors"] = std::move(manifest);
    header["content_hash"] = to_hex64(hash);

    std::string header_text = header.dump();
    std::uint64_t header_len = header_text.size();
    std::vector<std::byte> bytes;
    bytes.resize(8 + header_text.size() + offset);
    std::memcpy(bytes.data(), &header_len, 8);
    std::memcpy(bytes.data() + 8, header_text.data(), header_text.size());
    std::size_t at = 8 + header_text.size();
    for (const auto& [name, t] : tensors) {
        std::memcpy(bytes.data() + at, t->payload(), t->payload_bytes());
        at += t->payload_bytes();
    }
    return bytes;
}

struct Container {
    json header;
    std::vector<std::pair<std::string, Tensor>> tensors;  ///< manifest order
};

Container parse_container(const std::vector<std::byte>& bytes, const std::string& what) {
    if (bytes.size() < 8) throw IoError(what + ": truncated (shorter than the length prefix)");
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    if (8 + header_len > bytes.size()) throw IoError(what + ": truncated header");
    std::string header_text(reinterpret_cast<const char*>(bytes.data()) + 8, header_len);
    json header = parse_json(header_text, what);
    check_format_version(header, what);

    const json& manifest = need(header, "tensors", what);
    if (!manifest.is_array() || manifest.empty()) throw IoError(what + ": malformed: empty tensor list");

    std::size_t payload_at = 8 + static_cast<std::size_t>(header_len);
    std::size_t payload_size = bytes.size() - payload_at;

    Container out;
    std::uint64_t expect_offset = 0;
    for (const auto& entry : manifest) {
        std::string name = need_string(entry, "name", what);
        std::string dtype_str = need_string(entry, "dtype", what);
        if (dtype_str != "f32" && dtype_str != "f64") throw IoError(what + ": unknown dtype '" + dtype_str + "'");
        Dtype dtype = dtype_str == "f32" ? Dtype::f32 : Dtype::f64;
        const json& shape_j = need(entry, "shape", what);
        if (!shape_j.is_array() || shape_j.empty()) throw IoError(what + ": tensor '" + name + "' has no shape");
        std::vector<std::int64_t> shape;
        for (const auto& d : shape_j) {
            if (!d.is_number_integer() || d.get<std::int64_t>() < 1)
                throw IoError(what + ": tensor '" + name + "' has a non-positive dimension");
            shape.push_back(d.get<std::int64_t>());
        }
        std::int64_t offset = need_int(entry, "byte_offset", what);
        std::int64_t len = need_int(entry, "byte_len", what);
        if (offset < 0 || len < 0 || static_cast<std::uint64_t>(offset) != expect_offset)
            throw IoError(what + ": tensor '" + name + "' breaks contiguous payload layout");
        Tensor t = Tensor::zeros(shape, dtype);
        if (static_cast<std::uint64_t>(len) != t.payload_bytes())
            throw IoError(what + ": tensor '" + name + "' byte_len does not match its shape");
        if (static_cast<std::size_t>(offset) + static_cast<std::size_t>(len) > payload_size)
            throw IoError(what + ": truncated payload");
        std::memcpy(t.payload(), bytes.data() + payload_at + offset, static_cast<std::size_t>(len));
        expect_offset += static_cast<std::uint64_t>(len);
        out.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (expect_offset != payload_size) throw IoError(what + ": payload has trailing bytes");

    std::uint64_t declared = need_hash(header, "content_hash", what);
    std::uint64_t actual = fnv1a64(bytes.data() + payload_at, payload_size);
    if (declared != actual)
        throw HashMismatchError(what + ": content hash mismatch (manifest " + to_hex64(declared) + ", payload " +
                                to_hex64(actual) + ")");
    out.header = std::move(header);
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

std::vector<std::byte> checkpoint_bytes(const ParameterSet& params) {
    params.validate();
    json header;
    header["config"] = config_to_json(params.config);
    return container_bytes(std::move(header), params.entries());
}

ParameterSet parse_checkpoint(const std::vector<std::byte>& bytes) {
    const std::string what = "checkpoint";
    Container c = parse_container(bytes, what);
    ModelConfig cfg = config_from_json(need(c.header, "config", what), what);

    ParameterSet params;
    params.config = cfg;
    params.up.resize(static_cast<std::size_t>(cfg.n_layers), Tensor());
    params.down.resize(static_cast<std::size_t>(cfg.n_layers), Tensor());

    // The manifest must list exactly the canonical tensors of the config.
    std::vector<std::string> expected;
    expected.push_back("embed");
    for (std::int64_t l = 0; l < cfg.n_layers; ++l) {
        expected.push_back("up." + std::to_string(l));
        expected.push_back("down." + std::to_string(l));
    }
    expected.push_back("head");
    if (c.tensors.size() != expected.size()) throw IoError(what + ": tensor list does not match the config");
    for (std::size_t i = 0; i < expected.size(); ++i) {
        auto& [name, tensor] = c.tensors[i];
        if (name != expected[i])
            throw IoError(what + ": tensor " + std::to_string(i) + " is '" + name + "', expected '" + expected[i] +
                          "'");
        if (name == "embed")
            params.embed = std::move(tensor);
        else if (name == "head")
            params.head = std::move(tensor);
        else {
            std::int64_t layer = std::stoll(name.substr(name.find('.') + 1));
            if (name.rfind("up.", 0) == 0)
                params.up[static_cast<std::size_t>(layer)] = std::move(tensor);
            else
                params.down[static_cast<std::size_t>(layer)] = std::move(tensor);
        }
    }
    try {
        params.validate();
    } catch (const Error& e) {
        throw IoError(what + ": " + e.what());
    }
    return params;
}

void save_checkpoint(const ParameterSet& params, const std::string& path) {
    auto bytes = checkpoint_bytes(params);
    write_file(path, bytes.data(), bytes.size());
}

ParameterSet load_checkpoint(const std::string& path) {
    try {
        return parse_checkpoint(read_file(path));
    } catch (const FormatVersionError& e) {
        throw FormatVersionError(path + ": " + e.what());
    } catch (const HashMismatchError& e) {
        throw HashMismatchError(path + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError(path + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Activation traces
// ---------------------------------------------------------------------------

void save_trace(const ActivationTrace& trace, const std::string& path) {
    json header;
    header["kind"] = "trace";
    header["config"] = config_to_json(trace.config);
    header["token_count"] = trace.token_count;
    header["dataset_hash"] = to_hex64(trace.dataset_hash);
    header["model_hash"] = to_hex64(trace.model_hash);
    std::vector<std::pair<std::string, const Tensor*>> tensors;
    tensors.emplace_back("samples", &trace.samples);
    auto bytes = container_bytes(std::move(header), tensors);
    write_file(path, bytes.data(), bytes.size());
}

ActivationTrace load_trace(const std::string& path) {
    const std::string what = "trace " + path;
    Container c = parse_container(read_file(path), what);
    if (!c.header.contains("kind") || c.header["kind"] != "trace")
        throw IoError(what + ": not an activation trace file");
    ActivationTrace trace;
    trace.config = config_from_json(need(c.header, "config", what), what);
    trace.token_count = need_int(c.header, "token_count", what);
    trace.dataset_hash = need_hash(c.header, "dataset_hash", what);
    trace.model_hash = need_hash(c.header, "model_hash", what);
    if (c.tensors.size() != 1 || c.tensors[0].first != "samples")
        throw IoError(what + ": expected a single 'samples' tensor");
    trace.samples = std::move(c.tensors[0].second);
    if (trace.samples.rank() != 2 || trace.samples.dim(0) != trace.config.neuron_count() ||
        trace.samples.dim(1) != trace.token_count || trace.samples.dtype() != Dtype::f32)
        throw IoError(what + ": samples tensor does not match config and token_count");
    return trace;
}

// ---------------------------------------------------------------------------
// Model configs
// ---------------------------------------------------------------------------

std::string model_config_json(const ModelConfig& config) {
    return dump_json(config_to_json(config));
}

ModelConfig parse_model_config(const std::string& text) {
    const std::string what = "model config";
    return config_from_json(parse_json(text, what), what);
}

ModelConfig load_model_config(const std::string& path) {
    const std::string what = "model config " + path;
    auto bytes = read_file(path);
    return config_from_json(parse_json(std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size()), what),
                            what);
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

std::string mask_json(const NeuronMask& mask) {
    json j;
    j["format_version"] = kFormatVersion;
    j["model_hash"] = to_hex64(mask.model_hash);
    j["fraction"] = mask.fraction;
    j["n_total"] = mask.n_total;
    j["provenance"] = mask.provenance;
    j["neurons"] = neurons_to_json(mask.neurons);
    return dump_json(j);
}

void save_mask(const NeuronMask& mask, const std::string& path) {
    write_file(path, mask_json(mask));
}

NeuronMask load_mask(const std::string& path) {
    const std::string what = "mask " + path;
    json j = load_json_file(path, what);
    NeuronMask mask;
    mask.model_hash = need_hash(j, "model_hash", what);
    mask.fraction = need_double(j, "fraction", what);
    mask.n_total = need_int(j, "n_total", what);
    mask.provenance = need_string(j, "provenance", what);
    mask.neurons = neurons_from_json(need(j, "neurons", what), what, true);
    if (!(mask.fraction >= 0.0 && mask.fraction <= 1.0)) throw IoError(what + ": fraction out of [0, 1]");
    if (mask.n_total < 1) throw IoError(what + ": n_total must be positive");
    return mask;
}

// ---------------------------------------------------------------------------
// Similarity reports
// ---------------------------------------------------------------------------

std::string similarity_json(const SimilarityReport& report) {
    json j;
    j["format_version"] = kFormatVersion;
    j["config"] = config_to_json(report.config);
    j["org_hash"] = to_hex64(report.org_hash);
    j["ft_hash"] = to_hex64(report.ft_hash);
    json scores = json::array();
    for (double s : report.scores) scores.push_back(std::clamp(s, -1.0, 1.0));
    j["scores"] = std::move(scores);
    return dump_json(j);
}

void save_similarity(const SimilarityReport& report, const std::string& path) {
    write_file(path, similarity_json(report));
}

SimilarityReport load_similarity(const std::string& path) {
    const std::string what = "similarity report " + path;
    json j = load_json_file(path, what);
    SimilarityReport report;
    report.config = config_from_json(need(j, "config", what), what);
    report.org_hash = need_hash(j, "org_hash", what);
    report.ft_hash = need_hash(j, "ft_hash", what);
    const json& scores = need(j, "scores", what);
    if (!scores.is_array()) throw IoError(what + ": scores must be an array");
    for (const auto& s : scores) {
        if (!s.is_number()) throw IoError(what + ": scores must be numbers");
        report.scores.push_back(s.get<double>());
    }
    if (static_cast<std::int64_t>(report.scores.size()) != report.config.neuron_count())
        throw IoError(what + ": score count does not match the config's neuron count");
    for (double s : report.scores)
        if (!(s >= -1.0 - 1e-6 && s <= 1.0 + 1e-6)) throw IoError(what + ": score out of [-1, 1]");
    return report;
}

// ---------------------------------------------------------------------------
// Probes
// ---------------------------------------------------------------------------

std::string probe_json(const ProbeModel& probe) {
    json j;
    j["format_version"] = kFormatVersion;
    j["d_model"] = probe.d_model;
    j["n_classes"] = probe.n_classes;
    j["lambda"] = probe.lambda;
    j["weights"] = probe.weights;
    j["bias"] = probe.bias;
    return dump_json(j);
}

void save_probe(const ProbeModel& probe, const std::string& path) {
    write_file(path, probe_json(probe));
}

ProbeModel load_probe(const std::string& path) {
    const std::string what = "probe " + path;
    json j = load_json_file(path, what);
    ProbeModel probe;
    probe.d_model = need_int(j, "d_model", what);
    probe.n_classes = need_int(j, "n_classes", what);
    probe.lambda = need_double(j, "lambda", what);
    const json& weights = need(j, "weights", what);
    const json& bias = need(j, "bias", what);
    if (!weights.is_array() || !bias.is_array()) throw IoError(what + ": weights and bias must be arrays");
    for (const auto& row : weights) {
        if (!row.is_array() || static_cast<std::int64_t>(row.size()) != probe.d_model)
            throw IoError(what + ": each weight vector must have d_model entries");
        probe.weights.push_back(row.get<std::vector<double>>());
    }
    probe.bias = bias.get<std::vector<double>>();
    if (static_cast<std::int64_t>(probe.weights.size()) != probe.n_classes ||
        static_cast<std::int64_t>(probe.bias.size()) != probe.n_classes)
        throw IoError(what + ": weight/bias count does not match n_classes");
    return probe;
}

// ---------------------------------------------------------------------------
// Utilization profiles
// ---------------------------------------------------------------------------

std::string profile_json(const UtilizationProfile& profile) {
    json j;
    j["format_version"] = kFormatVersion;
    j["config"] = config_to_json(profile.config);
    j["trace_hash"] = to_hex64(profile.trace_hash);
    j["max_pearson"] = profile.max_pearson;
    j["rank"] = profile.rank;
    return dump_json(j);
}

void save_profile(const UtilizationProfile& profile, const std::string& path) {
    write_file(path, profile_json(profile));
}

UtilizationProfile load_profile(const std::string& path) {
    const std::string what = "profile " + path;
    json j = load_json_file(path, what);
    UtilizationProfile profile;
    profile.config = config_from_json(need(j, "config", what), what);
    profile.trace_hash = need_hash(j, "trace_hash", what);
    const json& mp = need(j, "max_pearson", what);
    const json& rk = need(j, "rank", what);
    if (!mp.is_array() || !rk.is_array()) throw IoError(what + ": max_pearson and rank must be arrays");
    profile.max_pearson = mp.get<std::vector<double>>();
    profile.rank = rk.get<std::vector<std::int64_t>>();
    std::int64_t n = profile.config.neuron_count();
    if (static_cast<std::int64_t>(profile.max_pearson.size()) != n ||
        static_cast<std::int64_t>(profile.rank.size()) != n)
        throw IoError(what + ": entry counts do not match the config's neuron count");
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (auto r : profile.rank) {
        if (r < 0 || r >= n || seen[static_cast<std::size_t>(r)])
            throw IoError(what + ": ranks are not a permutation of 0..N-1");
        seen[static_cast<std::size_t>(r)] = 1;
    }
    return profile;
}

// ---------------------------------------------------------------------------
// Rank-shift reports
// ---------------------------------------------------------------------------

namespace {

json bucket_to_json(const RankBucket& b) {
    json j;
    j["lo"] = b.lo;
    j["hi"] = b.hi;
    j["count"] = b.count;
    j["avg_abs_delta"] = b.avg_abs_delta;
    return j;
}

std::string bucket_label(const RankBucket& b) {
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%g", v);
        return std::string(buf);
    };
    return "(" + fmt(b.lo) + "," + fmt(b.hi) + "]";
}

}  // namespace

std::string rank_diff_json(const RankDiffReport& report) {
    json j;
    j["format_version"] = kFormatVersion;
    j["config"] = config_to_json(report.config);
    j["sign_convention"] = report.sign_convention;
    j["trace_hash_a"] = to_hex64(report.trace_hash_a);
    j["trace_hash_b"] = to_hex64(report.trace_hash_b);
    j["delta_rank"] = report.delta_rank;
    j["avg_abs_delta"] = report.avg_abs_delta;
    json buckets = json::array();
    for (const auto& b : report.buckets) buckets.push_back(bucket_to_json(b));
    j["buckets"] = std::move(buckets);
    return dump_json(j);
}

std::string rank_diff_plot_tsv(const RankDiffReport& report) {
    std::ostringstream os;
    os << "bucket\tavg_abs_delta\n";
    for (const auto& b : report.buckets) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", b.avg_abs_delta);
        os << bucket_label(b) << "\t" << buf << "\n";
    }
    return os.str();
}

void save_rank_diff(const RankDiffReport& report, const std::string& path) {
    write_file(path, rank_diff_json(report));
    write_file(path + ".plot.tsv", rank_diff_plot_tsv(report));
}

RankDiffReport load_rank_diff(const std::string& path) {
    const std::string what = "rank diff " + path;
    json j = load_json_file(path, what);
    RankDiffReport report;
    report.config = config_from_json(need(j, "config", what), what);
    report.sign_convention = need_string(j, "sign_convention", what);
    report.trace_hash_a = need_hash(j, "trace_hash_a", what);
    report.trace_hash_b = need_hash(j, "trace_hash_b", what);
    const json& deltas = need(j, "delta_rank", what);
    if (!deltas.is_array()) throw IoError(what + ": delta_rank must be an array");
    report.delta_rank = deltas.get<std::vector<std::int64_t>>();
    report.avg_abs_delta = need_double(j, "avg_abs_delta", what);
    const json& buckets = need(j, "buckets", what);
    if (!buckets.is_array()) throw IoError(what + ": buckets must be an array");
    for (const auto& b : buckets) {
        RankBucket bucket;
        bucket.lo = need_double(b, "lo", what);
        bucket.hi = need_double(b, "hi", what);
        bucket.count = need_int(b, "count", what);
        bucket.avg_abs_delta = need_double(b, "avg_abs_delta", what);
        report.buckets.push_back(bucket);
    }
    if (static_cast<std::int64_t>(report.delta_rank.size()) != report.config.neuron_count())
        throw IoError(what + ": delta count does not match the config's neuron count");
    return report;
}

// ---------------------------------------------------------------------------
// Category reports
// ---------------------------------------------------------------------------

std::string category_json(const CategoryReport& report) {
    json j;
    j["format_version"] = kFormatVersion;
    j["config"] = config_to_json(report.config);
    j["threshold"] = report.threshold;
    j["mask_hash"] = to_hex64(report.mask_hash);
    j["mask_provenance"] = report.mask_provenance;
    j["strongly_affected"] = neurons_to_json(report.strongly_affected);
    j["suppressed"] = neurons_to_json(report.suppressed);
    j["indirectly_affected"] = neurons_to_json(report.indirectly_affected);
    return dump_json(j);
}

void save_categories(const CategoryReport& report, const std::string& path) {
    write_file(path, category_json(report));
}

CategoryReport load_categories(const std::string& path) {
    const std::string what = "category report " + path;
    json j = load_json_file(path, what);
    CategoryReport report;
    report.config = config_from_json(need(j, "config", what), what);
    report.threshold = need_int(j, "threshold", what);
    report.mask_hash = need_hash(j, "mask_hash", what);
    report.mask_provenance = need_string(j, "mask_provenance", what);
    report.strongly_affected = neurons_from_json(need(j, "strongly_affected", what), what, true);
    report.suppressed = neurons_from_json(need(j, "suppressed", what), what, true);
    report.indirectly_affected = neurons_from_json(need(j, "indirectly_affected", what), what, true);
    return report;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

std::string dataset_jsonl(const Dataset& data) {
    std::ostringstream os;
    for (const auto& ex : data) {
        json j;
        j["label"] = ex.label;
        j["tokens"] = ex.tokens;
        os << j.dump() << "\n";
    }
    return os.str();
}

std::uint64_t dataset_hash(const Dataset& data) {
    std::string text = dataset_jsonl(data);
    return fnv1a64(text.data(), text.size());
}

void save_dataset(const Dataset& data, const std::string& path) {
    write_file(path, dataset_jsonl(data));
}

Dataset load_dataset(const std::string& path, std::uint64_t* hash_out) {
    auto bytes = read_file(path);
    if (hash_out) *hash_out = fnv1a64(bytes.data(), bytes.size());
    std::string text(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    Dataset data;
    std::size_t line_no = 0;
    std::size_t at = 0;
    while (at < text.size()) {
        std::size_t end = text.find('\n', at);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(at, end - at);
        at = end + 1;
        ++line_no;
        if (line.empty()) continue;
        const std::string what = "dataset " + path + " line " + std::to_string(line_no);
        json j = parse_json(line, what);
        Example ex;
        std::int64_t label = need_int(j, "label", what);
        if (label < 0) throw IoError(what + ": label must be non-negative");
        ex.label = static_cast<std::int32_t>(label);
        const json& tokens = need(j, "tokens", what);
        if (!tokens.is_array() || tokens.empty()) throw IoError(what + ": tokens must be a non-empty array");
        for (const auto& t : tokens) {
            if (!t.is_number_integer() || t.get<std::int64_t>() < 0)
                throw IoError(what + ": token ids must be non-negative integers");
            ex.tokens.push_back(static_cast<std::int32_t>(t.get<std::int64_t>()));
        }
        data.push_back(std::move(ex));
    }
    if (data.empty()) throw IoError("dataset " + path + ": no examples");
    return data;
}

void validate_dataset(const Dataset& data, const ModelConfig& config) {
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Example& ex = data[i];
        if (ex.label < 0 || ex.label >= config.n_classes)
            throw Error("dataset example " + std::to_string(i) + ": label " + std::to_string(ex.label) +
                        " out of range [0," + std::to_string(config.n_classes) + ")");
        for (std::size_t t = 0; t < ex.tokens.size(); ++t)
            if (ex.tokens[t] < 0 || ex.tokens[t] >= config.vocab_size)
                throw Error("dataset example " + std::to_string(i) + ": token " + std::to_string(ex.tokens[t]) +
                            " at position " + std::to_string(t) + " out of range [0," +
                            std::to_string(config.vocab_size) + ")");
    }
}

// ---------------------------------------------------------------------------
// Train logs
// ---------------------------------------------------------------------------

std::string train_log_text(const TrainLog& log) {
    std::ostringstream os;
    for (const auto& s : log.steps) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", s.loss);
        os << "step=" << s.step << " loss=" << buf << "\n";
    }
    return os.str();
}

std::string train_log_summary_json(const TrainLog& log) {
    json j;
    j["format_version"] = kFormatVersion;
    j["steps"] = static_cast<std::int64_t>(log.steps.size());
    j["final_loss"] = log.steps.empty() ? 0.0 : log.steps.back().loss;
    json evals = json::array();
    for (const auto& e : log.evals) {
        json ej;
        ej["step"] = e.step;
        ej["loss"] = e.loss;
        ej["accuracy"] = e.accuracy;
        evals.push_back(ej);
    }
    j["evals"] = std::move(evals);
    return dump_json(j);
}

void save_train_log(const TrainLog& log, const std::string& path) {
    write_file(path, train_log_text(log));
    write_file(path + ".summary.json", train_log_summary_json(log));
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

Dataset make_blobs(const ModelConfig& config, std::int64_t n, std::int64_t seq_len, std::uint64_t seed) {
    config.validate();
    if (n < 1) throw Error("synthetic dataset: n must be >= 1");
    if (seq_len < 1) throw Error("synthetic dataset: seq_len must be >= 1");
    if (config.vocab_size < config.n_classes)
        throw Error("blobs: vocab_size must be at least n_classes so every class owns tokens");
    Rng rng(mix64(seed, "blobs"));
    Dataset data;
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t label = i % config.n_classes;
        // class c owns the token range [c*V/C, (c+1)*V/C)
        std::int64_t lo = label * config.vocab_size / config.n_classes;
        std::int64_t hi = (label + 1) * config.vocab_size / config.n_classes;
        Example ex;
        ex.label = static_cast<std::int32_t>(label);
        for (std::int64_t t = 0; t < seq_len; ++t)
            ex.tokens.push_back(static_cast<std::int32_t>(lo + static_cast<std::int64_t>(rng.below(
                                                                   static_cast<std::uint64_t>(hi - lo)))));
        data.push_back(std::move(ex));
    }
    return data;
}

PlantedTask make_planted_task(const ModelConfig& config, std::int64_t plant_count, std::uint64_t plant_seed) {
    config.validate();
    std::int64_t n_up = config.n_layers * config.d_hidden;
    if (plant_count < 1 || plant_count > n_up)
        throw Error("planted task: plant_count must be in [1, " + std::to_string(n_up) + "]");

    ParameterSet reference = init_params(config);
    std::uint64_t reference_hash = reference.content_hash();

    Rng rng(mix64(plant_seed, "plant"));
    std::vector<std::int64_t> picks = rng.sample_without_replacement(n_up, plant_count);
    std::sort(picks.begin(), picks.end());

    PlantedTask task;
    task.teacher = std::move(reference);
    // Planted rows are redrawn at double the init scale: far enough from the
    // reference that labels genuinely depend on them, close enough that
    // retraining only these rows can recover the target function.
    double a = 2.0 / std::sqrt(static_cast<double>(config.d_model));
    for (auto pick : picks) {
        NeuronId id;
        id.layer = pick / config.d_hidden;
        id.role = Role::up;
        id.row = pick % config.d_hidden;
        Rng row_rng(mix64(mix64(plant_seed, "planted-row"), static_cast<std::uint64_t>(pick)));
        auto row = task.teacher.up[static_cast<std::size_t>(id.layer)].f32().subspan(
            static_cast<std::size_t>(id.row * config.d_model), static_cast<std::size_t>(config.d_model));
        for (auto& w : row) w = static_cast<float>(row_rng.uniform(-a, a));
        task.planted.neurons.push_back(id);
    }
    std::sort(task.planted.neurons.begin(), task.planted.neurons.end());
    task.planted.fraction = static_cast<double>(plant_count) / static_cast<double>(config.neuron_count());
    task.planted.provenance = "planted";
    task.planted.model_hash = reference_hash;
    task.planted.n_total = config.neuron_count();
    return task;
}

Dataset make_planted_dataset(const PlantedTask& task, std::int64_t n, std::int64_t seq_len, double margin,
                             std::uint64_t seed) {
    const ModelConfig& config = task.teacher.config;
    if (n < 1) throw Error("synthetic dataset: n must be >= 1");
    if (seq_len < 1) throw Error("synthetic dataset: seq_len must be >= 1");
    Rng rng(mix64(seed, "planted-data"));
    constexpr int kMaxAttempts = 200;

    auto teacher_verdict = [&](const std::vector<std::int32_t>& tokens) {
        Dataset one;
        one.push_back({tokens, 0});
        Tensor logits = model_logits(task.teacher, one);
        auto row = logits.f32();
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < config.n_classes; ++j)
            if (row[static_cast<std::size_t>(j)] > row[static_cast<std::size_t>(best)]) best = j;
        double top = row[static_cast<std::size_t>(best)];
        double second = -std::numeric_limits<double>::infinity();
        for (std::int64_t j = 0; j < config.n_classes; ++j)
            if (j != best && row[static_cast<std::size_t>(j)] > second) second = row[static_cast<std::size_t>(j)];
        double gap = config.n_classes > 1 ? top - second : margin;
        return std::pair<std::int32_t, double>(static_cast<std::int32_t>(best), gap);
    };

    Dataset data;
    for (std::int64_t i = 0; i < n; ++i) {
        std::int32_t target = static_cast<std::int32_t>(i % config.n_classes);
        std::vector<std::int32_t> best_tokens;
        std::int32_t best_label = 0;
        double best_key = -std::numeric_limits<double>::infinity();
        bool accepted = false;
        for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
            std::vector<std::int32_t> tokens;
            for (std::int64_t t = 0; t < seq_len; ++t)
                tokens.push_back(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(config.vocab_size))));
            auto [label, gap] = teacher_verdict(tokens);
            if (label == target && gap >= margin) {
                data.push_back({std::move(tokens), label});
                accepted = true;
                break;
            }
            // fall back to the best candidate seen: right class first, then margin
            double key = (label == target ? 1e9 : 0.0) + gap;
            if (key > best_key) {
                best_key = key;
                best_tokens = std::move(tokens);
                best_label = label;
            }
        }
        if (!accepted) data.push_back({std::move(best_tokens), best_label});
    }
    return data;
}

}  // namespace neft
