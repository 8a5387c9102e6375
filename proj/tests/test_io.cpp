#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"
#include "neft/analysis.hpp"
#include "neft/errors.hpp"
#include "neft/hash.hpp"
#include "neft/io.hpp"
#include "neft/model.hpp"
#include "neft/rng.hpp"
#include "neft/selector.hpp"
#include "neft/trainer.hpp"

using namespace neft;

namespace {

struct TempDir {
    std::filesystem::path dir;
    TempDir() {
        dir = std::filesystem::temp_directory_path() /
              ("neft-io-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter()++));
        std::filesystem::create_directories(dir);
    }
    ~TempDir() { std::filesystem::remove_all(dir); }
    std::string path(const std::string& name) const { return (dir / name).string(); }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

ModelConfig io_config(std::uint64_t seed = 3) {
    ModelConfig cfg;
    cfg.vocab_size = 10;
    cfg.d_model = 4;
    cfg.d_hidden = 6;
    cfg.n_layers = 2;
    cfg.n_classes = 3;
    cfg.activation = Activation::gelu;
    cfg.seed = seed;
    return cfg;
}

Dataset small_dataset(const ModelConfig& cfg, std::int64_t n, std::uint64_t seed) {
    Rng rng(seed);
    Dataset data;
    for (std::int64_t i = 0; i < n; ++i) {
        Example e;
        std::int64_t len = 2 + static_cast<std::int64_t>(rng.below(3));
        for (std::int64_t t = 0; t < len; ++t)
            e.tokens.push_back(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(cfg.vocab_size))));
        e.label = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(cfg.n_classes)));
        data.push_back(e);
    }
    return data;
}

bool params_equal(const ParameterSet& a, const ParameterSet& b) {
    return a.config == b.config && a.content_hash() == b.content_hash();
}

}  // namespace

TEST_CASE("checkpoint save-load-save round trip is byte identical") {
    TempDir tmp;
    ParameterSet p = init_params(io_config());
    std::string path = tmp.path("model.ckpt");
    save_checkpoint(p, path);
    ParameterSet q = load_checkpoint(path);
    CHECK(params_equal(p, q));

    std::vector<std::byte> first = checkpoint_bytes(p);
    std::vector<std::byte> second = checkpoint_bytes(q);
    REQUIRE(first.size() == second.size());
    CHECK(std::memcmp(first.data(), second.data(), first.size()) == 0);
}

TEST_CASE("flipping one payload byte fails with a hash mismatch") {
    TempDir tmp;
    ParameterSet p = init_params(io_config());
    std::vector<std::byte> bytes = checkpoint_bytes(p);
    bytes[bytes.size() - 3] ^= std::byte{0x40};
    std::string path = tmp.path("corrupt.ckpt");
    write_file(path, bytes.data(), bytes.size());
    CHECK_THROWS_AS(load_checkpoint(path), HashMismatchError);
}

TEST_CASE("truncated checkpoints are rejected") {
    TempDir tmp;
    ParameterSet p = init_params(io_config());
    std::vector<std::byte> bytes = checkpoint_bytes(p);

    std::vector<std::byte> cut(bytes.begin(), bytes.end() - 16);
    std::string path = tmp.path("cut.ckpt");
    write_file(path, cut.data(), cut.size());
    CHECK_THROWS_AS(load_checkpoint(path), IoError);

    std::vector<std::byte> stub(bytes.begin(), bytes.begin() + 4);
    write_file(path, stub.data(), stub.size());
    CHECK_THROWS_AS(load_checkpoint(path), IoError);

    std::vector<std::byte> padded = bytes;
    padded.push_back(std::byte{0});
    write_file(path, padded.data(), padded.size());
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("unknown checkpoint format version is a distinct error") {
    TempDir tmp;
    ParameterSet p = init_params(io_config());
    std::vector<std::byte> bytes = checkpoint_bytes(p);
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    std::string manifest(reinterpret_cast<const char*>(bytes.data()) + 8, header_len);
    auto at = manifest.find("\"format_version\":1");
    REQUIRE(at != std::string::npos);
    manifest.replace(at, 18, "\"format_version\":9");
    std::memcpy(bytes.data() + 8, manifest.data(), header_len);
    std::string path = tmp.path("future.ckpt");
    write_file(path, bytes.data(), bytes.size());
    CHECK_THROWS_AS(load_checkpoint(path), FormatVersionError);
}

TEST_CASE("a checkpoint without tensors is malformed") {
    TempDir tmp;
    ParameterSet p = init_params(io_config());
    std::vector<std::byte> bytes = checkpoint_bytes(p);
    std::uint64_t header_len = 0;
    std::memcpy(&header_len, bytes.data(), 8);
    nlohmann::json manifest =
        nlohmann::json::parse(std::string(reinterpret_cast<const char*>(bytes.data()) + 8, header_len));
    manifest["tensors"] = nlohmann::json::array();
    manifest["content_hash"] = to_hex64(kFnvOffset);  // hash of zero bytes
    std::string header = manifest.dump();
    std::uint64_t new_len = header.size();
    std::vector<std::byte> crafted(8 + header.size());
    std::memcpy(crafted.data(), &new_len, 8);
    std::memcpy(crafted.data() + 8, header.data(), header.size());
    std::string path = tmp.path("empty.ckpt");
    write_file(path, crafted.data(), crafted.size());
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("load errors carry the file path") {
    TempDir tmp;
    std::string missing = tmp.path("nope.ckpt");
    CHECK_THROWS_WITH_AS(load_checkpoint(missing), doctest::Contains("nope.ckpt"), IoError);
}

TEST_CASE("activation trace round trip preserves every field") {
    TempDir tmp;
    ModelConfig cfg = io_config(5);
    ParameterSet p = init_params(cfg);
    Dataset data = small_dataset(cfg, 6, 11);
    ActivationTrace t = compute_trace(p, data, dataset_hash(data));
    std::string path = tmp.path("trace.bin");
    save_trace(t, path);
    ActivationTrace u = load_trace(path);
    CHECK(u.config == t.config);
    CHECK(u.token_count == t.token_count);
    CHECK(u.dataset_hash == t.dataset_hash);
    CHECK(u.model_hash == t.model_hash);
    CHECK(u.content_hash() == t.content_hash());
    // traces and checkpoints are not interchangeable
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
    std::string ckpt = tmp.path("model.ckpt");
    save_checkpoint(p, ckpt);
    CHECK_THROWS_AS(load_trace(ckpt), IoError);
}

TEST_CASE("mask json round trip") {
    TempDir tmp;
    ModelConfig cfg = io_config();
    NeuronMask m;
    m.neurons = {{0, Role::up, 1}, {0, Role::down, 2}, {1, Role::up, 0}};
    m.fraction = 0.15;
    m.provenance = "sensitive@15%";
    m.model_hash = 0xabcdef0102030405ull;
    m.n_total = cfg.neuron_count();
    std::string path = tmp.path("mask.json");
    save_mask(m, path);
    NeuronMask r = load_mask(path);
    CHECK(r.neurons == m.neurons);
    CHECK(r.fraction == m.fraction);
    CHECK(r.provenance == m.provenance);
    CHECK(r.model_hash == m.model_hash);
    CHECK(r.n_total == m.n_total);
}

TEST_CASE("mask files enforce canonical order and known fields") {
    TempDir tmp;
    std::string good = R"({"format_version":1,"fraction":0.1,"model_hash":"00000000000000ff","n_total":20,)"
                       R"("provenance":"t","neurons":[[0,"up",1],[0,"down",0]]})";
    std::string path = tmp.path("mask.json");
    write_file(path, good);
    CHECK_NOTHROW(load_mask(path));

    std::string swapped = good;
    swapped.replace(swapped.find(R"([[0,"up",1],[0,"down",0]])"), 26, R"([[0,"down",0],[0,"up",1]])");
    write_file(path, swapped);
    CHECK_THROWS_AS(load_mask(path), Error);

    std::string dup = good;
    dup.replace(dup.find(R"([[0,"up",1],[0,"down",0]])"), 26, R"([[0,"up",1],[0,"up",1]])");
    write_file(path, dup);
    CHECK_THROWS_AS(load_mask(path), Error);

    std::string bad_role = good;
    bad_role.replace(bad_role.find("\"down\""), 6, "\"gate\"");
    write_file(path, bad_role);
    CHECK_THROWS_AS(load_mask(path), Error);

    std::string future = good;
    future.replace(future.find("\"format_version\":1"), 18, "\"format_version\":3");
    write_file(path, future);
    CHECK_THROWS_AS(load_mask(path), FormatVersionError);

    write_file(path, std::string("not json at all"));
    CHECK_THROWS_AS(load_mask(path), IoError);
}

TEST_CASE("similarity report round trip") {
    TempDir tmp;
    ModelConfig cfg = io_config(7);
    ParameterSet org = init_params(cfg);
    ParameterSet ft = org;
    for (auto& v : ft.up[0].f32()) v += 0.01f;
    SimilarityReport rep = neuron_similarity(org, ft);
    std::string path = tmp.path("sim.json");
    save_similarity(rep, path);
    SimilarityReport back = load_similarity(path);
    CHECK(back.config == rep.config);
    CHECK(back.org_hash == rep.org_hash);
    CHECK(back.ft_hash == rep.ft_hash);
    CHECK(back.scores == rep.scores);  // doubles survive JSON exactly
}

TEST_CASE("probe round trip") {
    TempDir tmp;
    ProbeModel probe;
    probe.d_model = 3;
    probe.n_classes = 2;
    probe.lambda = 1e-3;
    probe.weights = {{0.125, -2.5, 0.3333333333333333}, {1e-17, 7.0, -0.1}};
    probe.bias = {0.25, -0.75};
    std::string path = tmp.path("probe.json");
    save_probe(probe, path);
    ProbeModel back = load_probe(path);
    CHECK(back.d_model == probe.d_model);
    CHECK(back.n_classes == probe.n_classes);
    CHECK(back.lambda == probe.lambda);
    CHECK(back.weights == probe.weights);
    CHECK(back.bias == probe.bias);
}

TEST_CASE("profile, rank-diff and category round trips") {
    TempDir tmp;
    ModelConfig cfg = io_config(9);
    ParameterSet before = init_params(cfg);
    ParameterSet after = before;
    Rng noise(17);
    for (auto& t : after.up) for (auto& v : t.f32()) v += static_cast<float>(noise.uniform(-0.2, 0.2));
    Dataset data = small_dataset(cfg, 10, 19);

    UtilizationProfile pa = utilization_profile(compute_trace(before, data, dataset_hash(data)));
    UtilizationProfile pb = utilization_profile(compute_trace(after, data, dataset_hash(data)));
    std::string ppath = tmp.path("profile.json");
    save_profile(pa, ppath);
    UtilizationProfile pback = load_profile(ppath);
    CHECK(pback.config == pa.config);
    CHECK(pback.max_pearson == pa.max_pearson);
    CHECK(pback.rank == pa.rank);
    CHECK(pback.trace_hash == pa.trace_hash);

    std::vector<double> edges{10.0, 50.0, 100.0};
    RankDiffReport diff = rank_diff(pa, pb, edges);
    std::string dpath = tmp.path("rankdiff.json");
    save_rank_diff(diff, dpath);
    RankDiffReport dback = load_rank_diff(dpath);
    CHECK(dback.delta_rank == diff.delta_rank);
    CHECK(dback.avg_abs_delta == diff.avg_abs_delta);
    CHECK(dback.sign_convention == diff.sign_convention);
    CHECK(dback.trace_hash_a == diff.trace_hash_a);
    CHECK(dback.trace_hash_b == diff.trace_hash_b);
    REQUIRE(dback.buckets.size() == diff.buckets.size());
    for (std::size_t i = 0; i < diff.buckets.size(); ++i) {
        CHECK(dback.buckets[i].lo == diff.buckets[i].lo);
        CHECK(dback.buckets[i].hi == diff.buckets[i].hi);
        CHECK(dback.buckets[i].count == diff.buckets[i].count);
        CHECK(dback.buckets[i].avg_abs_delta == diff.buckets[i].avg_abs_delta);
    }

    // the plot companion has a header plus one row per bucket
    auto plot = read_file(dpath + ".plot.tsv");
    std::string text(reinterpret_cast<const char*>(plot.data()), plot.size());
    CHECK(text.rfind("bucket\tavg_abs_delta\n", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + static_cast<std::int64_t>(diff.buckets.size()));

    NeuronMask mask;
    mask.neurons = {{0, Role::up, 0}};
    mask.fraction = 0.05;
    mask.provenance = "manual";
    mask.model_hash = before.content_hash();
    mask.n_total = cfg.neuron_count();
    CategoryReport cat = categorize(diff, mask, 2);
    std::string cpath = tmp.path("categories.json");
    save_categories(cat, cpath);
    CategoryReport cback = load_categories(cpath);
    CHECK(cback.config == cat.config);
    CHECK(cback.strongly_affected == cat.strongly_affected);
    CHECK(cback.suppressed == cat.suppressed);
    CHECK(cback.indirectly_affected == cat.indirectly_affected);
    CHECK(cback.threshold == cat.threshold);
    CHECK(cback.mask_provenance == cat.mask_provenance);
    CHECK(cback.mask_hash == cat.mask_hash);
}

TEST_CASE("dataset jsonl round trip and hashing") {
    TempDir tmp;
    ModelConfig cfg = io_config();
    Dataset data = small_dataset(cfg, 7, 23);
    std::string path = tmp.path("data.jsonl");
    save_dataset(data, path);
    std::uint64_t loaded_hash = 0;
    Dataset back = load_dataset(path, &loaded_hash);
    REQUIRE(back.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(back[i].tokens == data[i].tokens);
        CHECK(back[i].label == data[i].label);
    }
    CHECK(loaded_hash == dataset_hash(data));
    CHECK(loaded_hash == file_hash(path));

    // identical bytes => identical hash
    std::string copy = tmp.path("copy.jsonl");
    save_dataset(data, copy);
    CHECK(file_hash(copy) == file_hash(path));

    Dataset one{data[0]};
    std::string text = dataset_jsonl(one);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1);
}

TEST_CASE("dataset loading validates structure") {
    TempDir tmp;
    std::string path = tmp.path("bad.jsonl");

    write_file(path, std::string(""));
    CHECK_THROWS_AS(load_dataset(path), IoError);

    write_file(path, std::string("{\"label\":0,\"tokens\":[]}\n"));
    CHECK_THROWS_AS(load_dataset(path), IoError);

    write_file(path, std::string("{\"label\":-1,\"tokens\":[1]}\n"));
    CHECK_THROWS_AS(load_dataset(path), IoError);

    write_file(path, std::string("{\"label\":0,\"tokens\":[1,-4]}\n"));
    CHECK_THROWS_AS(load_dataset(path), IoError);

    write_file(path, std::string("{\"label\":0,\"tokens\":[1.5]}\n"));
    CHECK_THROWS_AS(load_dataset(path), IoError);

    write_file(path, std::string("{\"label\":0,\"tokens\":[1]}\nnot json\n"));
    CHECK_THROWS_WITH_AS(load_dataset(path), doctest::Contains("line 2"), IoError);
}

TEST_CASE("validate_dataset checks ranges against a config") {
    ModelConfig cfg = io_config();
    Dataset ok{{{0, 9}, 2}};
    CHECK_NOTHROW(validate_dataset(ok, cfg));
    Dataset big_token{{{0, 10}, 0}};
    CHECK_THROWS_AS(validate_dataset(big_token, cfg), Error);
    Dataset big_label{{{0, 1}, 3}};
    CHECK_THROWS_AS(validate_dataset(big_label, cfg), Error);
}

TEST_CASE("train logs serialize as step lines plus a json summary") {
    TempDir tmp;
    TrainLog log;
    log.steps = {{0, 1.5}, {1, 1.25}, {2, 0.875}};
    log.evals = {{2, 0.9, 0.75}};
    std::string text = train_log_text(log);
    CHECK(text == "step=0 loss=1.5\nstep=1 loss=1.25\nstep=2 loss=0.875\n");

    std::string path = tmp.path("train.log");
    save_train_log(log, path);
    auto body = read_file(path);
    CHECK(std::string(reinterpret_cast<const char*>(body.data()), body.size()) == text);

    nlohmann::json summary = nlohmann::json::parse(
        std::string(reinterpret_cast<const char*>(read_file(path + ".summary.json").data()),
                    read_file(path + ".summary.json").size()));
    CHECK(summary["format_version"] == 1);
    CHECK(summary["steps"] == 3);
    CHECK(summary["final_loss"] == 0.875);
    CHECK(summary["evals"].size() == 1);
}

TEST_CASE("blob datasets use disjoint class vocabularies round-robin") {
    ModelConfig cfg = io_config();
    cfg.vocab_size = 12;
    cfg.n_classes = 3;
    Dataset data = make_blobs(cfg, 30, 5, 7);
    REQUIRE(data.size() == 30);
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::int32_t c = static_cast<std::int32_t>(i % 3);
        CHECK(data[i].label == c);
        CHECK(data[i].tokens.size() == 5);
        for (auto t : data[i].tokens) {
            CHECK(t >= c * 4);
            CHECK(t < (c + 1) * 4);
        }
    }
    CHECK(dataset_hash(make_blobs(cfg, 30, 5, 7)) == dataset_hash(data));
    CHECK(dataset_hash(make_blobs(cfg, 30, 5, 8)) != dataset_hash(data));
}

TEST_CASE("a ridge probe separates blob classes from pooled states") {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 16;
    cfg.d_hidden = 24;
    cfg.n_layers = 2;
    cfg.n_classes = 2;
    cfg.activation = Activation::silu;
    cfg.seed = 40;
    ParameterSet p = init_params(cfg);
    Dataset data = make_blobs(cfg, 200, 10, 41);
    Tensor pooled = pooled_states(p, data);
    std::vector<std::int32_t> labels;
    for (const auto& e : data) labels.push_back(e.label);
    ProbeModel probe = fit_probe(pooled, labels, cfg.n_classes, 1e-3);
    CHECK(probe_accuracy(probe, pooled, labels) >= 0.99);
}

TEST_CASE("planted tasks expose ground-truth rows that full FT moves most") {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 16;
    cfg.d_hidden = 8;
    cfg.n_layers = 2;
    cfg.n_classes = 3;
    cfg.activation = Activation::silu;
    cfg.seed = 50;

    PlantedTask task = make_planted_task(cfg, 6, 51);
    ParameterSet reference = init_params(cfg);
    CHECK(task.planted.size() == 6);
    CHECK(task.planted.model_hash == reference.content_hash());
    CHECK(task.planted.provenance == "planted");
    for (const auto& id : task.planted.neurons) CHECK(id.role == Role::up);
    // teacher differs from the reference exactly on the planted rows
    SimilarityReport teacher_diff = neuron_similarity(reference, task.teacher);
    for (std::int64_t flat = 0; flat < cfg.neuron_count(); ++flat) {
        bool planted = task.planted.contains(neuron_from_flat(cfg, flat));
        if (planted)
            CHECK(teacher_diff.scores[static_cast<std::size_t>(flat)] < 0.999);
        else
            CHECK(teacher_diff.scores[static_cast<std::size_t>(flat)] == 1.0);
    }

    Dataset data = make_planted_dataset(task, 512, 12, 0.25, 52);
    REQUIRE(static_cast<std::int64_t>(data.size()) == 512);
    validate_dataset(data, cfg);
    // labels really are the teacher's argmax
    Tensor logits = model_logits(task.teacher, data);
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < cfg.n_classes; ++j)
            if (logits.f32()[i * 3 + static_cast<std::size_t>(j)] > logits.f32()[i * 3 + static_cast<std::size_t>(best)])
                best = j;
        CHECK(data[i].label == static_cast<std::int32_t>(best));
    }
    CHECK(dataset_hash(make_planted_dataset(task, 512, 12, 0.25, 52)) == dataset_hash(data));

    // full fine-tuning from the reference moves planted rows further from
    // their start (lower cosine) than untouched rows, on average
    TrainOptions opts;
    opts.max_steps = 600;
    opts.batch_size = 16;
    opts.learning_rate = 0.2;
    opts.optimizer = Optimizer::sgd;
    opts.seed = 53;
    TrainResult ft = train(reference, data, opts);
    SimilarityReport sim = neuron_similarity(reference, ft.params);
    double planted_sum = 0.0, other_sum = 0.0;
    std::int64_t planted_n = 0, other_n = 0;
    for (std::int64_t flat = 0; flat < cfg.neuron_count(); ++flat) {
        double s = sim.scores[static_cast<std::size_t>(flat)];
        if (task.planted.contains(neuron_from_flat(cfg, flat))) {
            planted_sum += s;
            ++planted_n;
        } else {
            other_sum += s;
            ++other_n;
        }
    }
    CHECK(planted_sum / static_cast<double>(planted_n) < other_sum / static_cast<double>(other_n));
}

TEST_CASE("synthetic generators validate their arguments") {
    ModelConfig cfg = io_config();
    CHECK_THROWS_AS(make_blobs(cfg, 0, 5, 1), Error);
    CHECK_THROWS_AS(make_blobs(cfg, 10, 0, 1), Error);
    CHECK_THROWS_AS(make_planted_task(cfg, 0, 1), Error);
    CHECK_THROWS_AS(make_planted_task(cfg, cfg.n_layers * cfg.d_hidden + 1, 1), Error);
    PlantedTask task = make_planted_task(cfg, 2, 1);
    CHECK_THROWS_AS(make_planted_dataset(task, 0, 5, 0.1, 1), Error);
}
