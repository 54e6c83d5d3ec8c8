#pragma once

#include <cstdint>
#include <string>

#include "apforge/cnn.hpp"
#include "apforge/dataset.hpp"

namespace apf {

enum class AttackKind { EM, REM, HYPO, TAP, LSP, AR, OPS };

std::string attack_name(AttackKind k);
AttackKind attack_from_name(const std::string& s);

struct AttackConfig {
  AttackKind attack = AttackKind::EM;
  float eps = 8.0f / 255.0f;       // Linf attacks; LSP 1.30, AR 1.00, OPS count 1
  int pgd_steps = 20;
  float pgd_alpha = 0.8f / 255.0f;
  int surrogate_epochs = 2;        // per outer iteration (EM/REM)
  int outer_cap = 10;
  float stop_error = 0.01f;
  float rem_adv_eps = 4.0f / 255.0f;
  int rem_adv_steps = 5;
  int patch_size = 8;              // LSP
  int batch_size = 128;
  std::uint64_t seed = 0;

  static AttackConfig defaults(AttackKind k, std::uint64_t seed);
  /// Stable string used for cache keys and sidecar metadata.
  std::string canonical() const;
  void validate() const;
};

struct SurrogateCheckpoint {
  CnnModel model;
  float train_error = 1.0f;
  int epochs_run = 0;
};

/// Trains the fixed desk-scale CNN on clean data until train error falls
/// to target_error or the epoch cap is reached.
SurrogateCheckpoint pretrain_surrogate(const LabeledDataset& data, float target_error,
                                       int max_epochs, std::uint64_t seed);

PerturbationSet em_generate(const LabeledDataset& data, const AttackConfig& cfg);
PerturbationSet rem_generate(const LabeledDataset& data, const AttackConfig& cfg);
PerturbationSet hypo_generate(const LabeledDataset& data, const SurrogateCheckpoint& surrogate,
                              const AttackConfig& cfg);
PerturbationSet tap_generate(const LabeledDataset& data, const SurrogateCheckpoint& surrogate,
                             const AttackConfig& cfg);
PerturbationSet lsp_generate(const LabeledDataset& data, const AttackConfig& cfg);
PerturbationSet ar_generate(const LabeledDataset& data, const AttackConfig& cfg);
PerturbationSet ops_generate(const LabeledDataset& data, const AttackConfig& cfg);

/// Dispatch on cfg.attack; surrogate-based attacks pretrain internally.
PerturbationSet generate(const LabeledDataset& data, const AttackConfig& cfg);

}  // namespace apf
