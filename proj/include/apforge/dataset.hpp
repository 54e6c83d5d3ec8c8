#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "apforge/optim.hpp"
#include "apforge/tensor.hpp"

namespace apf {

/// Ordered (image, label) pairs. Images are (N,3,H,W) in [0,1].
struct LabeledDataset {
  Tensor images;
  std::vector<int> labels;
  int num_classes = 0;
  std::string name;

  int size() const { return images.rank() > 0 ? images.dim(0) : 0; }
  int hw() const { return images.dim(2); }

  /// View of sample i as a (1,3,H,W) tensor copy.
  Tensor sample(int i) const;
  void validate() const;
};

/// Per-sample perturbations with their declared budget.
struct PerturbationSet {
  Tensor deltas;  // (N,3,H,W)
  Norm norm = Norm::Linf;
  float eps = 0.0f;
  std::string attack_name;
  std::uint64_t seed = 0;
  bool converged = true;  // false when a generator hit its iteration cap
  std::vector<float> surrogate_losses;  // EM/REM per-outer-iteration trace
};

struct PoisonedDataset {
  LabeledDataset data;             // materialized clamp(base + delta, 0, 1)
  std::vector<uint8_t> poisoned_mask;
  float ratio = 1.0f;
};

/// Reads the standard CIFAR-10 binary batches (3073-byte records).
/// split is "train" (data_batch_1..5) or "test" (test_batch).
LabeledDataset load_cifar10(const std::string& dir, const std::string& split);

/// Desk-scale synthetic dataset: one low-frequency template per class
/// plus per-sample Gaussian pixel noise (sigma 0.15). Returns
/// (train, test); the test split has per_class/2 samples per class and
/// is drawn from a derived seed.
std::pair<LabeledDataset, LabeledDataset> gen_synthetic(int num_classes, int per_class,
                                                        int hw, std::uint64_t seed);

/// Poisons the first floor(ratio*N) indices of a seeded uniform
/// permutation. Labels are never touched.
PoisonedDataset apply_poison(const LabeledDataset& base, const PerturbationSet& pert,
                             float ratio, std::uint64_t seed);

}  // namespace apf
