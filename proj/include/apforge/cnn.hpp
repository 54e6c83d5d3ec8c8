#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "apforge/tensor.hpp"

namespace apf {

/// Fixed conv net: three 3x3 conv blocks (ReLU + 2x2 max-pool each)
/// followed by a single fully connected layer. No batch norm, so train
/// and eval behave identically and gradient checks are exact.
struct CnnArch {
  int in_channels = 3;
  int in_hw = 32;  // input height == width, must be divisible by 8
  std::array<int, 3> widths{32, 64, 128};
  int num_classes = 10;

  int fc_in() const { return widths[2] * (in_hw / 8) * (in_hw / 8); }
};

/// Parameter order: conv1 w,b, conv2 w,b, conv3 w,b, fc w,b.
/// Conv weights are (out, in, 3, 3); fc weight is (num_classes, fc_in).
struct CnnModel {
  CnnArch arch;
  std::vector<Tensor> params;

  static CnnModel init(const CnnArch& arch, std::uint64_t seed);
  static CnnModel zeros(const CnnArch& arch);

  std::vector<std::string> param_names() const;
};

/// Deterministic batched forward pass. batch is NCHW.
Tensor forward(const CnnModel& model, const Tensor& batch);

struct GradResult {
  float loss = 0.0f;
  std::vector<Tensor> param_grads;
  std::optional<Tensor> input_grads;
};

/// Mean softmax cross-entropy over the batch plus reverse-mode gradients.
/// labels are hard class indices in [0, num_classes).
GradResult loss_and_grads(const CnnModel& model, const Tensor& batch,
                          const std::vector<int>& labels, bool wrt_input = false);

/// Soft-label variant: soft_labels is (N, num_classes), rows sum to 1.
GradResult loss_and_grads_soft(const CnnModel& model, const Tensor& batch,
                               const Tensor& soft_labels, bool wrt_input = false);

/// Forward-only mean cross-entropy (no gradients).
float batch_loss(const CnnModel& model, const Tensor& batch, const std::vector<int>& labels);

/// Per-sample cross-entropy losses from logits.
std::vector<float> per_sample_loss(const Tensor& logits, const std::vector<int>& labels);

}  // namespace apf
