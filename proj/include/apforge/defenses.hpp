#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "apforge/cnn.hpp"
#include "apforge/rng.hpp"
#include "apforge/tensor.hpp"

namespace apf {

enum class DefenseKind {
  None, Standard, CutOut, MixUp, CutMix, Gaussian, BDR, Gray, JPEG, ULite, UMax, AT
};

std::string defense_name(DefenseKind k);
DefenseKind defense_from_name(const std::string& s);

struct DefenseConfig {
  DefenseKind kind = DefenseKind::None;
  int jpeg_quality = 10;
  int bdr_bits = 2;
  int gauss_kernel = 3;
  float gauss_sigma = 0.1f;
  float at_eps = 8.0f / 255.0f;
  float at_alpha = 2.0f / 255.0f;
  int at_steps = 10;
  int umax_k = 5;
  float aug_prob = 0.5f;
  std::uint64_t seed = 0;

  void validate() const;
  bool is_preprocessing() const {
    return kind == DefenseKind::Gray || kind == DefenseKind::JPEG ||
           kind == DefenseKind::BDR || kind == DefenseKind::Gaussian;
  }
};

// ---- Preprocessing transforms (batch NCHW in [0,1], shape preserved) ----

/// ITU-R 601 luma replicated to all three channels. Idempotent.
Tensor grayscale(const Tensor& batch);

/// In-memory JPEG round trip: YCbCr, 8x8 DCT, quantize with the standard
/// tables scaled by quality, dequantize, inverse. No entropy coding.
Tensor jpeg_cycle(const Tensor& batch, int quality);

/// x -> round(x * (2^bits - 1)) / (2^bits - 1). Idempotent.
Tensor bit_depth_reduce(const Tensor& batch, int bits);

/// Separable Gaussian convolution with reflect padding.
Tensor gaussian_blur(const Tensor& batch, int kernel, float sigma);

// ---- Augmentations ----

enum class AugPolicy { Standard, CutOut, MixUp, CutMix, Plasma, ChannelShuffle };

struct AugResult {
  Tensor batch;
  Tensor soft_labels;  // (N, num_classes), rows sum to 1
};

AugResult augment(const Tensor& batch, const std::vector<int>& labels, int num_classes,
                  AugPolicy policy, Rng& rng);

/// Midpoint-displacement fractal field in [0,1], roughness 0.5.
Tensor plasma_field(int hw, Rng& rng);

/// UEraser-Lite pipeline: plasma brightness/contrast then channel
/// shuffle, each with probability p.
Tensor ueraser_lite(const Tensor& batch, float p, Rng& rng);

// ---- Training-phase defenses ----

/// PGD attack maximizing cross-entropy: uniform random start in the
/// Linf ball, signed-gradient steps, projection, clamp of x+delta.
Tensor pgd_adversarial(const CnnModel& model, const Tensor& batch, const std::vector<int>& labels,
                       float eps, float alpha, int steps, Rng& rng);

/// UEraser-Max: K ULite draws per image, keep the one with maximal loss
/// under the current model (ties break toward the lowest repeat index).
AugResult umax_select(const CnnModel& model, const Tensor& batch, const std::vector<int>& labels,
                      int num_classes, int k, float p, Rng& rng);

Tensor one_hot(const std::vector<int>& labels, int num_classes);

}  // namespace apf
