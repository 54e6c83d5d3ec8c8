#pragma once

#include <string>
#include <vector>

#include "apforge/cnn.hpp"
#include "apforge/tensor.hpp"

namespace apf {

enum class Norm { Linf, L2, L0 };

std::string norm_name(Norm n);
Norm norm_from_name(const std::string& s);

/// SGD with classical momentum and decoupled-from-nothing weight decay:
///   v <- momentum * v + g + wd * p;  p <- p - lr * v
struct SgdState {
  std::vector<Tensor> momentum_buffers;
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;

  static SgdState init(const CnnModel& model, float lr, float momentum, float weight_decay);
};

void sgd_step(CnnModel& model, const std::vector<Tensor>& grads, SgdState& state);

/// Rescale grads in place so their global l2 norm is at most max_norm.
/// Keeps lr-0.1 training of the plain (un-normalized) CNN from blowing up
/// in the first few steps.
void clip_grad_norm(std::vector<Tensor>& grads, float max_norm);

/// Projection onto the eps-ball of the given norm. For L0, eps is a
/// positive integer count; ties keep the lowest flat index. Idempotent.
Tensor project_lp(const Tensor& delta, Norm norm, float eps);

float linf_norm(const Tensor& t);
float l2_norm(const Tensor& t);
int l0_count(const Tensor& t);

}  // namespace apf
