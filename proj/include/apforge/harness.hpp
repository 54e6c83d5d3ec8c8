#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "apforge/attacks.hpp"
#include "apforge/cnn.hpp"
#include "apforge/dataset.hpp"
#include "apforge/defenses.hpp"

namespace apf {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 128;
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 5e-4f;
  int lr_decay_every = 100;
  float lr_decay_factor = 0.5f;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochStats {
  float train_loss = 0.0f;
  float train_acc = 0.0f;
  float test_acc = 0.0f;
};

struct ExperimentRecord {
  std::string attack_name;   // "none" for clean
  std::string defense_name;
  float ratio = 1.0f;
  float eps_used = 0.0f;
  float clean_test_acc = 0.0f;
  float poisoned_train_acc = 0.0f;
  int epochs = 0;
  std::uint64_t seed = 0;
  float wall_seconds = 0.0f;
  std::vector<EpochStats> history;
};

struct TrainResult {
  CnnModel model;
  std::vector<EpochStats> history;
};

/// Epoch loop with seeded shuffling and defense routing: preprocessing
/// defenses transform the dataset once up front (followed by standard
/// augmentation per epoch), augmentation defenses act per batch, AT and
/// UMax replace each batch before the SGD step.
TrainResult train_model(const LabeledDataset& train, const LabeledDataset& test,
                        const DefenseConfig& defense, const TrainConfig& cfg);

float evaluate(const CnnModel& model, const LabeledDataset& testset);

struct ExperimentSpec {
  std::optional<AttackConfig> attack;
  DefenseConfig defense;
  float ratio = 1.0f;
  TrainConfig train;
};

/// load -> (generate or cache-hit) -> poison -> train -> evaluate.
/// cache_dir empty disables the perturbation cache.
ExperimentRecord run_experiment(const LabeledDataset& train, const LabeledDataset& test,
                                const std::string& data_tag, const ExperimentSpec& spec,
                                const std::string& cache_dir);

struct SweepGrid {
  std::vector<std::optional<AttackConfig>> attacks;
  std::vector<DefenseConfig> defenses;
  std::vector<float> ratios;
  TrainConfig train;
};

/// All combinations in stable (attack, defense, ratio) order. A failed
/// run is recorded with a "failed" defense-name suffix and the sweep
/// continues.
std::vector<ExperimentRecord> sweep(const LabeledDataset& train, const LabeledDataset& test,
                                    const std::string& data_tag, const SweepGrid& grid,
                                    const std::string& cache_dir);

/// Writes results.csv, results.json and per-experiment curve files.
void emit_report(const std::vector<ExperimentRecord>& records, const std::string& out_dir);

std::vector<ExperimentRecord> load_records(const std::string& json_path);

/// Content hash of an attack config + dataset tag; names cache entries.
std::string cache_key(const AttackConfig& cfg, const std::string& data_tag);

}  // namespace apf
