// Command-line pipeline driver. Every subcommand reads serialized artifacts,
// runs one library operation, and writes serialized artifacts, so pipelines
// are resumable and every intermediate is inspectable. Each written artifact
// is logged as `wrote <path> fnv1a64=<hex>`.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "neft/analysis.hpp"
#include "neft/errors.hpp"
#include "neft/hash.hpp"
#include "neft/io.hpp"
#include "neft/model.hpp"
#include "neft/selector.hpp"
#include "neft/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using neft::Error;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Pipeline config: one JSON file naming shared pipeline settings. Explicit
// flags always win over config values, which win over built-in defaults.
// ---------------------------------------------------------------------------

struct PipelineConfig {
    std::optional<neft::ModelConfig> model;
    std::optional<std::string> data;
    std::optional<std::string> eval_data;
    std::optional<std::string> out_dir;
    std::optional<double> fraction;
    std::optional<std::string> mode;
    std::optional<std::vector<double>> bucket_edges;
    std::optional<double> threshold_fraction;
    std::optional<std::int64_t> max_steps;
    std::optional<std::int64_t> batch_size;
    std::optional<double> learning_rate;
    std::optional<std::string> optimizer;
    std::optional<bool> shuffle;
    std::optional<bool> unfreeze_embed_head;
};

std::int64_t config_int(const json& v, const std::string& what) {
    if (!v.is_number_integer()) throw Error(what + " must be an integer");
    return v.get<std::int64_t>();
}

double config_number(const json& v, const std::string& what) {
    if (!v.is_number()) throw Error(what + " must be a number");
    return v.get<double>();
}

std::string config_string(const json& v, const std::string& what) {
    if (!v.is_string()) throw Error(what + " must be a string");
    return v.get<std::string>();
}

bool config_bool(const json& v, const std::string& what) {
    if (!v.is_boolean()) throw Error(what + " must be a boolean");
    return v.get<bool>();
}

std::string existing_path(const json& v, const std::string& what) {
    std::string path = config_string(v, what);
    if (!fs::exists(path)) throw Error(what + " does not exist: " + path);
    return path;
}

PipelineConfig load_pipeline_config(const std::string& path) {
    const std::string what = "pipeline config " + path;
    auto bytes = neft::read_file(path);
    json j = json::parse(std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size()), nullptr, false);
    if (j.is_discarded()) throw Error(what + ": malformed JSON");
    if (!j.is_object()) throw Error(what + ": top level must be an object");

    PipelineConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "model") {
            cfg.model = neft::parse_model_config(value.dump());
        } else if (key == "data") {
            cfg.data = existing_path(value, what + ": data");
        } else if (key == "eval_data") {
            cfg.eval_data = existing_path(value, what + ": eval_data");
        } else if (key == "out_dir") {
            cfg.out_dir = config_string(value, what + ": out_dir");
        } else if (key == "fraction") {
            double f = config_number(value, what + ": fraction");
            if (!(f > 0.0 && f <= 1.0)) throw Error(what + ": fraction must be in (0, 1]");
            cfg.fraction = f;
        } else if (key == "mode") {
            cfg.mode = config_string(value, what + ": mode");
            neft::select_mode_from_name(*cfg.mode);
        } else if (key == "bucket_edges") {
            if (!value.is_array()) throw Error(what + ": bucket_edges must be an array");
            std::vector<double> edges;
            for (const auto& e : value) edges.push_back(config_number(e, what + ": bucket_edges entry"));
            cfg.bucket_edges = std::move(edges);
        } else if (key == "threshold_fraction") {
            double f = config_number(value, what + ": threshold_fraction");
            if (!(f > 0.0 && f <= 1.0)) throw Error(what + ": threshold_fraction must be in (0, 1]");
            cfg.threshold_fraction = f;
        } else if (key == "train") {
            if (!value.is_object()) throw Error(what + ": train must be an object");
            for (const auto& [tkey, tvalue] : value.items()) {
                if (tkey == "max_steps")
                    cfg.max_steps = config_int(tvalue, what + ": train.max_steps");
                else if (tkey == "batch_size")
                    cfg.batch_size = config_int(tvalue, what + ": train.batch_size");
                else if (tkey == "learning_rate")
                    cfg.learning_rate = config_number(tvalue, what + ": train.learning_rate");
                else if (tkey == "optimizer")
                    cfg.optimizer = config_string(tvalue, what + ": train.optimizer");
                else if (tkey == "shuffle")
                    cfg.shuffle = config_bool(tvalue, what + ": train.shuffle");
                else if (tkey == "unfreeze_embed_head")
                    cfg.unfreeze_embed_head = config_bool(tvalue, what + ": train.unfreeze_embed_head");
                else if (tkey == "seed")
                    throw Error(what + ": train.seed is not allowed; pass --seed explicitly");
                else
                    throw Error(what + ": unknown train option '" + tkey + "'");
            }
        } else {
            throw Error(what + ": unknown field '" + key + "'");
        }
    }
    return cfg;
}

// ---------------------------------------------------------------------------
// Shared option plumbing
// ---------------------------------------------------------------------------

/// Per-subcommand state: the --config path plus lazily loaded contents.
struct ConfigSlot {
    std::string path;
    std::optional<PipelineConfig> loaded;

    const PipelineConfig& get() {
        if (!loaded) loaded = path.empty() ? PipelineConfig{} : load_pipeline_config(path);
        return *loaded;
    }
};

void add_config_flag(CLI::App* cmd, ConfigSlot& slot) {
    cmd->add_option("--config", slot.path, "pipeline config JSON (flags override its values)");
}

/// Output path resolution: explicit flag, else <out_dir>/<default name>.
std::string resolve_out(const CLI::Option* opt, const std::string& value, ConfigSlot& config,
                        const char* default_name) {
    if (opt->count() > 0) return value;
    const auto& dir = config.get().out_dir;
    if (dir) {
        fs::create_directories(*dir);
        return (fs::path(*dir) / default_name).string();
    }
    throw Error(std::string("missing --out (set the flag or out_dir in --config) for ") + default_name);
}

void log_artifact(const std::string& path) {
    std::printf("wrote %s fnv1a64=%s\n", path.c_str(), neft::to_hex64(neft::file_hash(path)).c_str());
}

neft::Dataset load_dataset_for(const neft::ModelConfig& config, const std::string& path) {
    neft::Dataset data = neft::load_dataset(path);
    neft::validate_dataset(data, config);
    return data;
}

std::vector<std::int32_t> dataset_labels(const neft::Dataset& data) {
    std::vector<std::int32_t> labels;
    labels.reserve(data.size());
    for (const auto& e : data) labels.push_back(e.label);
    return labels;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neuron-level fine-tuning: select sensitive neurons, retrain them, analyze the shift"};
    app.require_subcommand(1);

    // ---- init ------------------------------------------------------------
    auto* init = app.add_subcommand("init", "initialize a checkpoint from a model config");
    struct {
        ConfigSlot config;
        std::string model_path, out;
        std::uint64_t seed = 0;
        CLI::Option *model_opt, *out_opt;
    } init_a;
    add_config_flag(init, init_a.config);
    init_a.model_opt = init->add_option("--model", init_a.model_path, "model config JSON file");
    init->add_option("--seed", init_a.seed, "init seed (overrides the config's seed)")->required();
    init_a.out_opt = init->add_option("--out", init_a.out, "output checkpoint path");
    init->callback([&] {
        neft::ModelConfig config;
        if (init_a.model_opt->count() > 0)
            config = neft::load_model_config(init_a.model_path);
        else if (init_a.config.get().model)
            config = *init_a.config.get().model;
        else
            throw Error("init needs --model or a model entry in --config");
        config.seed = init_a.seed;
        config.validate();
        std::string out = resolve_out(init_a.out_opt, init_a.out, init_a.config, "init.ckpt");
        neft::save_checkpoint(neft::init_params(config), out);
        log_artifact(out);
    });

    // ---- make-data ---------------------------------------------------------
    auto* mkdata = app.add_subcommand("make-data", "generate a synthetic labeled dataset");
    struct {
        ConfigSlot config;
        std::string kind, model_path, out, teacher_out, mask_out;
        std::int64_t n = 0, seq_len = 0, plant_count = 0;
        std::uint64_t seed = 0, plant_seed = 0;
        double margin = 0.25;
        CLI::Option *model_opt, *out_opt, *teacher_opt, *mask_opt, *plant_count_opt, *plant_seed_opt, *margin_opt;
    } mk_a;
    add_config_flag(mkdata, mk_a.config);
    mkdata->add_option("--kind", mk_a.kind, "dataset family: blobs | planted")->required();
    mk_a.model_opt = mkdata->add_option("--model", mk_a.model_path, "model config JSON file");
    mkdata->add_option("--n", mk_a.n, "number of examples")->required();
    mkdata->add_option("--seq-len", mk_a.seq_len, "tokens per example")->required();
    mkdata->add_option("--seed", mk_a.seed, "data generation seed")->required();
    mk_a.plant_count_opt = mkdata->add_option("--plant-count", mk_a.plant_count, "planted: number of ground-truth rows");
    mk_a.plant_seed_opt = mkdata->add_option("--plant-seed", mk_a.plant_seed, "planted: row redraw seed");
    mk_a.margin_opt = mkdata->add_option("--margin", mk_a.margin, "planted: required teacher logit gap (default 0.25)");
    mk_a.out_opt = mkdata->add_option("--out", mk_a.out, "output dataset JSONL path");
    mk_a.teacher_opt = mkdata->add_option("--teacher-out", mk_a.teacher_out, "planted: also write the teacher checkpoint");
    mk_a.mask_opt = mkdata->add_option("--mask-out", mk_a.mask_out, "planted: also write the ground-truth mask");
    mkdata->callback([&] {
        neft::ModelConfig config;
        if (mk_a.model_opt->count() > 0)
            config = neft::load_model_config(mk_a.model_path);
        else if (mk_a.config.get().model)
            config = *mk_a.config.get().model;
        else
            throw Error("make-data needs --model or a model entry in --config");
        std::string out = resolve_out(mk_a.out_opt, mk_a.out, mk_a.config, "data.jsonl");
        if (mk_a.kind == "blobs") {
            for (const CLI::Option* o : {mk_a.plant_count_opt, mk_a.plant_seed_opt, mk_a.margin_opt,
                                         mk_a.teacher_opt, mk_a.mask_opt})
                if (o->count() > 0) throw Error("blobs datasets do not take " + o->get_name());
            neft::save_dataset(neft::make_blobs(config, mk_a.n, mk_a.seq_len, mk_a.seed), out);
            log_artifact(out);
        } else if (mk_a.kind == "planted") {
            if (mk_a.plant_count_opt->count() == 0 || mk_a.plant_seed_opt->count() == 0)
                throw Error("planted datasets need --plant-count and --plant-seed");
            neft::PlantedTask task = neft::make_planted_task(config, mk_a.plant_count, mk_a.plant_seed);
            neft::save_dataset(neft::make_planted_dataset(task, mk_a.n, mk_a.seq_len, mk_a.margin, mk_a.seed), out);
            log_artifact(out);
            if (mk_a.teacher_opt->count() > 0) {
                neft::save_checkpoint(task.teacher, mk_a.teacher_out);
                log_artifact(mk_a.teacher_out);
            }
            if (mk_a.mask_opt->count() > 0) {
                neft::save_mask(task.planted, mk_a.mask_out);
                log_artifact(mk_a.mask_out);
            }
        } else {
            throw Error("unknown dataset kind '" + mk_a.kind + "' (expected blobs or planted)");
        }
    });

    // ---- train -------------------------------------------------------------
    auto* train_cmd = app.add_subcommand("train", "fine-tune a checkpoint, optionally masked to selected neurons");
    struct {
        ConfigSlot config;
        std::string checkpoint, data, mask, eval, out, log, best_out;
        neft::TrainOptions opts;
        CLI::Option *data_opt, *mask_opt, *eval_opt, *out_opt, *log_opt, *best_opt;
        CLI::Option *steps_opt, *batch_opt, *lr_opt, *optimizer_opt, *no_shuffle_opt, *unfreeze_opt;
        std::string optimizer_name;
        bool no_shuffle = false;
        bool unfreeze = false;
    } tr_a;
    add_config_flag(train_cmd, tr_a.config);
    train_cmd->add_option("--checkpoint", tr_a.checkpoint, "starting checkpoint")->required();
    tr_a.data_opt = train_cmd->add_option("--data", tr_a.data, "training dataset JSONL");
    tr_a.mask_opt = train_cmd->add_option("--mask", tr_a.mask, "neuron mask: train only these rows");
    tr_a.eval_opt = train_cmd->add_option("--eval", tr_a.eval, "evaluation dataset JSONL");
    train_cmd->add_option("--seed", tr_a.opts.seed, "training seed (batch order)")->required();
    tr_a.steps_opt = train_cmd->add_option("--max-steps", tr_a.opts.max_steps, "optimizer updates to run");
    tr_a.batch_opt = train_cmd->add_option("--batch-size", tr_a.opts.batch_size, "examples per update");
    tr_a.lr_opt = train_cmd->add_option("--learning-rate,--lr", tr_a.opts.learning_rate, "step size");
    tr_a.optimizer_opt = train_cmd->add_option("--optimizer", tr_a.optimizer_name, "sgd | adam");
    tr_a.no_shuffle_opt = train_cmd->add_flag("--no-shuffle", tr_a.no_shuffle, "keep dataset order every epoch");
    tr_a.unfreeze_opt =
        train_cmd->add_flag("--unfreeze-embed-head", tr_a.unfreeze, "with --mask, train embed and head too");
    tr_a.out_opt = train_cmd->add_option("--out", tr_a.out, "output checkpoint path");
    tr_a.log_opt = train_cmd->add_option("--log", tr_a.log, "train log path (default <out>.log)");
    tr_a.best_opt = train_cmd->add_option("--best-out", tr_a.best_out,
                                          "with --eval, write the lowest-eval-loss checkpoint here");
    train_cmd->callback([&] {
        const PipelineConfig& pc = tr_a.config.get();
        neft::ParameterSet start = neft::load_checkpoint(tr_a.checkpoint);

        std::string data_path;
        if (tr_a.data_opt->count() > 0)
            data_path = tr_a.data;
        else if (pc.data)
            data_path = *pc.data;
        else
            throw Error("train needs --data or a data entry in --config");
        neft::Dataset data = load_dataset_for(start.config, data_path);

        if (tr_a.steps_opt->count() == 0 && pc.max_steps) tr_a.opts.max_steps = *pc.max_steps;
        if (tr_a.batch_opt->count() == 0 && pc.batch_size) tr_a.opts.batch_size = *pc.batch_size;
        if (tr_a.lr_opt->count() == 0 && pc.learning_rate) tr_a.opts.learning_rate = *pc.learning_rate;
        if (tr_a.optimizer_opt->count() > 0)
            tr_a.opts.optimizer = neft::optimizer_from_name(tr_a.optimizer_name);
        else if (pc.optimizer)
            tr_a.opts.optimizer = neft::optimizer_from_name(*pc.optimizer);
        if (tr_a.no_shuffle_opt->count() > 0)
            tr_a.opts.shuffle = !tr_a.no_shuffle;
        else if (pc.shuffle)
            tr_a.opts.shuffle = *pc.shuffle;
        if (tr_a.unfreeze_opt->count() > 0)
            tr_a.opts.unfreeze_embed_head = tr_a.unfreeze;
        else if (pc.unfreeze_embed_head)
            tr_a.opts.unfreeze_embed_head = *pc.unfreeze_embed_head;

        std::optional<neft::NeuronMask> mask;
        if (tr_a.mask_opt->count() > 0) {
            mask = neft::load_mask(tr_a.mask);
            mask->validate(start.config);
            if (mask->model_hash != start.content_hash())
                throw Error("mask " + tr_a.mask + " was derived for checkpoint " +
                            neft::to_hex64(mask->model_hash) + ", not for " + tr_a.checkpoint + " (" +
                            neft::to_hex64(start.content_hash()) + ")");
        }

        std::optional<neft::Dataset> eval_data;
        std::string eval_path;
        if (tr_a.eval_opt->count() > 0)
            eval_path = tr_a.eval;
        else if (pc.eval_data)
            eval_path = *pc.eval_data;
        if (!eval_path.empty()) eval_data = load_dataset_for(start.config, eval_path);

        neft::TrainResult result = neft::train(start, data, tr_a.opts, mask ? &*mask : nullptr,
                                               eval_data ? &*eval_data : nullptr);

        std::string out = resolve_out(tr_a.out_opt, tr_a.out, tr_a.config, "train.ckpt");
        neft::save_checkpoint(result.params, out);
        log_artifact(out);
        std::string log_path = tr_a.log_opt->count() > 0 ? tr_a.log : out + ".log";
        neft::save_train_log(result.log, log_path);
        log_artifact(log_path);
        log_artifact(log_path + ".summary.json");
        if (tr_a.best_opt->count() > 0) {
            if (!result.best_params) throw Error("--best-out needs --eval (no evaluations ran)");
            neft::save_checkpoint(*result.best_params, tr_a.best_out);
            log_artifact(tr_a.best_out);
        }
    });

    // ---- diff --------------------------------------------------------------
    auto* diff = app.add_subcommand("diff", "per-neuron cosine similarity between two checkpoints");
    struct {
        ConfigSlot config;
        std::string org, ft, out;
        CLI::Option* out_opt;
    } diff_a;
    add_config_flag(diff, diff_a.config);
    diff->add_option("--org", diff_a.org, "original checkpoint")->required();
    diff->add_option("--ft", diff_a.ft, "fine-tuned checkpoint")->required();
    diff_a.out_opt = diff->add_option("--out", diff_a.out, "output similarity report path");
    diff->callback([&] {
        neft::ParameterSet org = neft::load_checkpoint(diff_a.org);
        neft::ParameterSet ft = neft::load_checkpoint(diff_a.ft);
        std::string out = resolve_out(diff_a.out_opt, diff_a.out, diff_a.config, "diff.json");
        neft::save_similarity(neft::neuron_similarity(org, ft), out);
        log_artifact(out);
    });

    // ---- select ------------------------------------------------------------
    auto* select = app.add_subcommand("select", "pick the most (or least) changed neurons from a report");
    struct {
        ConfigSlot config;
        std::string report, mode = "sensitive", out;
        double fraction = 0.0;
        CLI::Option *fraction_opt, *mode_opt, *out_opt;
    } sel_a;
    add_config_flag(select, sel_a.config);
    select->add_option("--report", sel_a.report, "similarity report from diff")->required();
    sel_a.fraction_opt = select->add_option("--fraction", sel_a.fraction, "share of neurons to keep, in (0, 1]");
    sel_a.mode_opt = select->add_option("--mode", sel_a.mode, "sensitive (most changed) | reversed (least changed)");
    sel_a.out_opt = select->add_option("--out", sel_a.out, "output mask path");
    select->callback([&] {
        const PipelineConfig& pc = sel_a.config.get();
        double fraction;
        if (sel_a.fraction_opt->count() > 0)
            fraction = sel_a.fraction;
        else if (pc.fraction)
            fraction = *pc.fraction;
        else
            throw Error("select needs --fraction or a fraction entry in --config");
        std::string mode_name = sel_a.mode;
        if (sel_a.mode_opt->count() == 0 && pc.mode) mode_name = *pc.mode;
        neft::SimilarityReport report = neft::load_similarity(sel_a.report);
        std::string out = resolve_out(sel_a.out_opt, sel_a.out, sel_a.config, "mask.json");
        neft::save_mask(neft::select_neurons(report, fraction, neft::select_mode_from_name(mode_name)), out);
        log_artifact(out);
    });

    // ---- union -------------------------------------------------------------
    auto* union_cmd = app.add_subcommand("union", "set union of two masks over the same checkpoint");
    struct {
        ConfigSlot config;
        std::string a, b, out;
        CLI::Option* out_opt;
    } un_a;
    add_config_flag(union_cmd, un_a.config);
    union_cmd->add_option("--a", un_a.a, "first mask")->required();
    union_cmd->add_option("--b", un_a.b, "second mask")->required();
    un_a.out_opt = union_cmd->add_option("--out", un_a.out, "output mask path");
    union_cmd->callback([&] {
        std::string out = resolve_out(un_a.out_opt, un_a.out, un_a.config, "union.json");
        neft::save_mask(neft::union_masks(neft::load_mask(un_a.a), neft::load_mask(un_a.b)), out);
        log_artifact(out);
    });

    // ---- overlap -----------------------------------------------------------
    auto* overlap_cmd = app.add_subcommand("overlap", "overlap |a∩b| / min(|a|,|b|) of two masks");
    struct {
        std::string a, b;
    } ov_a;
    overlap_cmd->add_option("--a", ov_a.a, "first mask")->required();
    overlap_cmd->add_option("--b", ov_a.b, "second mask")->required();
    overlap_cmd->callback([&] {
        std::printf("overlap=%.17g\n", neft::overlap(neft::load_mask(ov_a.a), neft::load_mask(ov_a.b)));
    });

    // ---- probe-fit -----------------------------------------------------------
    auto* probe_fit = app.add_subcommand("probe-fit", "fit a ridge probe on pooled hidden states");
    struct {
        ConfigSlot config;
        std::string checkpoint, data, out;
        double lambda = 1e-3;
        CLI::Option *data_opt, *out_opt;
    } pf_a;
    add_config_flag(probe_fit, pf_a.config);
    probe_fit->add_option("--checkpoint", pf_a.checkpoint, "checkpoint to probe")->required();
    pf_a.data_opt = probe_fit->add_option("--data", pf_a.data, "labeled dataset JSONL");
    probe_fit->add_option("--lambda", pf_a.lambda, "ridge strength (default 1e-3)");
    pf_a.out_opt = probe_fit->add_option("--out", pf_a.out, "output probe path");
    probe_fit->callback([&] {
        neft::ParameterSet params = neft::load_checkpoint(pf_a.checkpoint);
        std::string data_path;
        if (pf_a.data_opt->count() > 0)
            data_path = pf_a.data;
        else if (pf_a.config.get().data)
            data_path = *pf_a.config.get().data;
        else
            throw Error("probe-fit needs --data or a data entry in --config");
        neft::Dataset data = load_dataset_for(params.config, data_path);
        neft::Tensor pooled = neft::pooled_states(params, data);
        std::vector<std::int32_t> labels = dataset_labels(data);
        std::string out = resolve_out(pf_a.out_opt, pf_a.out, pf_a.config, "probe.json");
        neft::save_probe(neft::fit_probe(pooled, labels, params.config.n_classes, pf_a.lambda), out);
        log_artifact(out);
    });

    // ---- probe-select ---------------------------------------------------------
    auto* probe_select = app.add_subcommand("probe-select", "pick the up-neurons most aligned with a probe");
    struct {
        ConfigSlot config;
        std::string checkpoint, probe, out;
        std::int64_t k = 0;
        CLI::Option* out_opt;
    } ps_a;
    add_config_flag(probe_select, ps_a.config);
    probe_select->add_option("--checkpoint", ps_a.checkpoint, "checkpoint to select from")->required();
    probe_select->add_option("--probe", ps_a.probe, "probe from probe-fit")->required();
    probe_select->add_option("--k", ps_a.k, "number of neurons to keep")->required();
    ps_a.out_opt = probe_select->add_option("--out", ps_a.out, "output mask path");
    probe_select->callback([&] {
        neft::ParameterSet params = neft::load_checkpoint(ps_a.checkpoint);
        neft::ProbeModel probe = neft::load_probe(ps_a.probe);
        std::string out = resolve_out(ps_a.out_opt, ps_a.out, ps_a.config, "probe_mask.json");
        neft::save_mask(neft::probe_select(params, probe, ps_a.k), out);
        log_artifact(out);
    });

    // ---- trace -------------------------------------------------------------
    auto* trace = app.add_subcommand("trace", "record per-neuron activation samples over a dataset");
    struct {
        ConfigSlot config;
        std::string checkpoint, data, out;
        std::int64_t max_tokens = 10000;
        std::uint64_t sample_seed = 0;
        CLI::Option *data_opt, *out_opt;
    } tc_a;
    add_config_flag(trace, tc_a.config);
    trace->add_option("--checkpoint", tc_a.checkpoint, "checkpoint to trace")->required();
    tc_a.data_opt = trace->add_option("--data", tc_a.data, "dataset JSONL");
    trace->add_option("--max-tokens", tc_a.max_tokens, "token sample cap (default 10000)");
    trace->add_option("--sample-seed", tc_a.sample_seed, "subsample seed when over the cap (default 0)");
    tc_a.out_opt = trace->add_option("--out", tc_a.out, "output trace path");
    trace->callback([&] {
        neft::ParameterSet params = neft::load_checkpoint(tc_a.checkpoint);
        std::string data_path;
        if (tc_a.data_opt->count() > 0)
            data_path = tc_a.data;
        else if (tc_a.config.get().data)
            data_path = *tc_a.config.get().data;
        else
            throw Error("trace needs --data or a data entry in --config");
        neft::Dataset data = load_dataset_for(params.config, data_path);
        std::string out = resolve_out(tc_a.out_opt, tc_a.out, tc_a.config, "trace.bin");
        neft::save_trace(
            neft::compute_trace(params, data, neft::dataset_hash(data), tc_a.max_tokens, tc_a.sample_seed), out);
        log_artifact(out);
    });

    // ---- profile -----------------------------------------------------------
    auto* profile = app.add_subcommand("profile", "neuron utilization (max in-group correlation) from a trace");
    struct {
        ConfigSlot config;
        std::string trace, out;
        CLI::Option* out_opt;
    } pr_a;
    add_config_flag(profile, pr_a.config);
    profile->add_option("--trace", pr_a.trace, "activation trace from trace")->required();
    pr_a.out_opt = profile->add_option("--out", pr_a.out, "output profile path");
    profile->callback([&] {
        std::string out = resolve_out(pr_a.out_opt, pr_a.out, pr_a.config, "profile.json");
        neft::save_profile(neft::utilization_profile(neft::load_trace(pr_a.trace)), out);
        log_artifact(out);
    });

    // ---- rankdiff ------------------------------------------------------------
    auto* rankdiff = app.add_subcommand("rankdiff", "rank movement between two utilization profiles");
    struct {
        ConfigSlot config;
        std::string a, b, out, plot;
        std::vector<double> edges;
        CLI::Option *edges_opt, *out_opt, *plot_opt;
    } rd_a;
    add_config_flag(rankdiff, rd_a.config);
    rankdiff->add_option("--a", rd_a.a, "baseline profile")->required();
    rankdiff->add_option("--b", rd_a.b, "comparison profile")->required();
    rd_a.edges_opt =
        rankdiff->add_option("--edges", rd_a.edges, "percentile bucket edges, e.g. 25,50,75,100")->delimiter(',');
    rd_a.out_opt = rankdiff->add_option("--out", rd_a.out, "output report path");
    rd_a.plot_opt = rankdiff->add_option("--plot", rd_a.plot, "also write a bucket TSV here");
    rankdiff->callback([&] {
        const PipelineConfig& pc = rd_a.config.get();
        std::vector<double> edges;
        if (rd_a.edges_opt->count() > 0)
            edges = rd_a.edges;
        else if (pc.bucket_edges)
            edges = *pc.bucket_edges;
        else
            edges = neft::default_bucket_edges();
        neft::UtilizationProfile a = neft::load_profile(rd_a.a);
        neft::UtilizationProfile b = neft::load_profile(rd_a.b);
        neft::RankDiffReport report = neft::rank_diff(a, b, edges);
        std::string out = resolve_out(rd_a.out_opt, rd_a.out, rd_a.config, "rankdiff.json");
        neft::save_rank_diff(report, out);
        log_artifact(out);
        if (rd_a.plot_opt->count() > 0) {
            neft::write_file(rd_a.plot, neft::rank_diff_plot_tsv(report));
            log_artifact(rd_a.plot);
        }
    });

    // ---- categorize ------------------------------------------------------------
    auto* categorize = app.add_subcommand("categorize", "split neurons into movement categories against a mask");
    struct {
        ConfigSlot config;
        std::string rankdiff, mask, out;
        std::int64_t threshold = 0;
        double threshold_fraction = 0.0;
        CLI::Option *threshold_opt, *fraction_opt, *out_opt;
    } ct_a;
    add_config_flag(categorize, ct_a.config);
    categorize->add_option("--rankdiff", ct_a.rankdiff, "rank-diff report")->required();
    categorize->add_option("--mask", ct_a.mask, "mask the fine-tune trained")->required();
    ct_a.threshold_opt = categorize->add_option("--threshold", ct_a.threshold, "absolute rank-shift threshold");
    ct_a.fraction_opt = categorize->add_option("--threshold-fraction", ct_a.threshold_fraction,
                                               "threshold as a share of the neuron count (default 0.207)");
    ct_a.out_opt = categorize->add_option("--out", ct_a.out, "output category report path");
    categorize->callback([&] {
        if (ct_a.threshold_opt->count() > 0 && ct_a.fraction_opt->count() > 0)
            throw Error("pass either --threshold or --threshold-fraction, not both");
        neft::RankDiffReport report = neft::load_rank_diff(ct_a.rankdiff);
        neft::NeuronMask mask = neft::load_mask(ct_a.mask);
        std::int64_t threshold;
        if (ct_a.threshold_opt->count() > 0) {
            threshold = ct_a.threshold;
        } else {
            double fraction = neft::kDefaultThresholdFraction;
            if (ct_a.fraction_opt->count() > 0)
                fraction = ct_a.threshold_fraction;
            else if (ct_a.config.get().threshold_fraction)
                fraction = *ct_a.config.get().threshold_fraction;
            threshold = neft::threshold_from_fraction(fraction, report.config.neuron_count());
        }
        std::string out = resolve_out(ct_a.out_opt, ct_a.out, ct_a.config, "categories.json");
        neft::save_categories(neft::categorize(report, mask, threshold), out);
        log_artifact(out);
    });

    // ---- eval --------------------------------------------------------------
    auto* eval_cmd = app.add_subcommand("eval", "mean loss and accuracy of a checkpoint on a dataset");
    struct {
        ConfigSlot config;
        std::string checkpoint, data;
        CLI::Option* data_opt;
    } ev_a;
    add_config_flag(eval_cmd, ev_a.config);
    eval_cmd->add_option("--checkpoint", ev_a.checkpoint, "checkpoint to evaluate")->required();
    ev_a.data_opt = eval_cmd->add_option("--data", ev_a.data, "dataset JSONL");
    eval_cmd->callback([&] {
        neft::ParameterSet params = neft::load_checkpoint(ev_a.checkpoint);
        std::string data_path;
        if (ev_a.data_opt->count() > 0)
            data_path = ev_a.data;
        else if (ev_a.config.get().eval_data)
            data_path = *ev_a.config.get().eval_data;
        else if (ev_a.config.get().data)
            data_path = *ev_a.config.get().data;
        else
            throw Error("eval needs --data or a data/eval_data entry in --config");
        neft::Dataset data = load_dataset_for(params.config, data_path);
        neft::EvalResult result = neft::evaluate(params, data);
        std::printf("loss=%.17g accuracy=%.17g\n", result.loss, result.accuracy);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
