#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neft/analysis.hpp"
#include "neft/model.hpp"
#include "neft/selector.hpp"
#include "neft/trainer.hpp"

namespace neft {

// ---------------------------------------------------------------------------
// Raw files
// ---------------------------------------------------------------------------

std::vector<std::byte> read_file(const std::string& path);
void write_file(const std::string& path, const void* data, std::size_t size);
void write_file(const std::string& path, const std::string& text);
std::uint64_t file_hash(const std::string& path);

inline constexpr std::int64_t kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Model configs as standalone JSON documents (the `init` input format)
// ---------------------------------------------------------------------------

std::string model_config_json(const ModelConfig& config);
ModelConfig parse_model_config(const std::string& text);
ModelConfig load_model_config(const std::string& path);

// ---------------------------------------------------------------------------
// Checkpoints: [u64 LE header length][JSON manifest][little-endian payload]
// ---------------------------------------------------------------------------

std::vector<std::byte> checkpoint_bytes(const ParameterSet& params);
ParameterSet parse_checkpoint(const std::vector<std::byte>& bytes);
void save_checkpoint(const ParameterSet& params, const std::string& path);
ParameterSet load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Activation traces (same container layout as checkpoints)
// ---------------------------------------------------------------------------

void save_trace(const ActivationTrace& trace, const std::string& path);
ActivationTrace load_trace(const std::string& path);

// ---------------------------------------------------------------------------
// JSON artifacts
// ---------------------------------------------------------------------------

std::string mask_json(const NeuronMask& mask);
void save_mask(const NeuronMask& mask, const std::string& path);
NeuronMask load_mask(const std::string& path);

std::string similarity_json(const SimilarityReport& report);
void save_similarity(const SimilarityReport& report, const std::string& path);
SimilarityReport load_similarity(const std::string& path);

std::string probe_json(const ProbeModel& probe);
void save_probe(const ProbeModel& probe, const std::string& path);
ProbeModel load_probe(const std::string& path);

std::string profile_json(const UtilizationProfile& profile);
void save_profile(const UtilizationProfile& profile, const std::string& path);
UtilizationProfile load_profile(const std::string& path);

std::string rank_diff_json(const RankDiffReport& report);
/// Tab-separated (bucket, avg_abs_delta) rows for plotting.
std::string rank_diff_plot_tsv(const RankDiffReport& report);
void save_rank_diff(const RankDiffReport& report, const std::string& path);
RankDiffReport load_rank_diff(const std::string& path);

std::string category_json(const CategoryReport& report);
void save_categories(const CategoryReport& report, const std::string& path);
CategoryReport load_categories(const std::string& path);

// ---------------------------------------------------------------------------
// Datasets: JSONL, one {"label": int, "tokens": [int, ...]} object per line
// ---------------------------------------------------------------------------

std::string dataset_jsonl(const Dataset& data);
/// FNV-1a over the canonical JSONL bytes of the dataset.
std::uint64_t dataset_hash(const Dataset& data);
void save_dataset(const Dataset& data, const std::string& path);
/// Loads and structurally validates a dataset. When hash_out is given it
/// receives the FNV-1a hash of the file bytes as stored.
Dataset load_dataset(const std::string& path, std::uint64_t* hash_out = nullptr);
/// Range-checks every token and label against the consuming model config.
void validate_dataset(const Dataset& data, const ModelConfig& config);

// ---------------------------------------------------------------------------
// Train logs: `step=<int> loss=<float>` lines plus a JSON summary
// ---------------------------------------------------------------------------

std::string train_log_text(const TrainLog& log);
std::string train_log_summary_json(const TrainLog& log);
void save_train_log(const TrainLog& log, const std::string& path);

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

/// Token sequences drawn from per-class disjoint vocabulary pools, so pooled
/// embeddings form class-separable clusters. Labels cycle round-robin.
Dataset make_blobs(const ModelConfig& config, std::int64_t n, std::int64_t seq_len, std::uint64_t seed);

/// A classification task where ground truth lives in a known set of up-neuron
/// rows: the teacher equals the seeded reference init except that the planted
/// rows are redrawn (larger scale), and labels are the teacher's argmax.
/// Retraining exactly the planted rows of the reference model can therefore
/// reproduce the teacher, so the planted set suffices for perfect accuracy.
struct PlantedTask {
    ParameterSet teacher;
    NeuronMask planted;  ///< ground-truth rows, hashed against the reference init
};

PlantedTask make_planted_task(const ModelConfig& config, std::int64_t plant_count, std::uint64_t plant_seed);

/// Samples token sequences uniformly and labels them with the teacher's
/// argmax, preferring (per round-robin class target) candidates whose top
/// logit clears the runner-up by at least margin.
Dataset make_planted_dataset(const PlantedTask& task, std::int64_t n, std::int64_t seq_len, double margin,
                             std::uint64_t seed);

}  // namespace neft
