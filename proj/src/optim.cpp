#include "apforge/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace apf {

std::string norm_name(Norm n) {
  switch (n) {
    case Norm::Linf: return "linf";
    case Norm::L2: return "l2";
    case Norm::L0: return "l0";
  }
  return "?";
}

Norm norm_from_name(const std::string& s) {
  if (s == "linf") return Norm::Linf;
  if (s == "l2") return Norm::L2;
  if (s == "l0") return Norm::L0;
  throw std::invalid_argument("unknown norm: " + s);
}

SgdState SgdState::init(const CnnModel& model, float lr, float momentum, float weight_decay) {
  SgdState s;
  s.lr = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  for (const Tensor& p : model.params) s.momentum_buffers.emplace_back(p.shape);
  return s;
}

void sgd_step(CnnModel& model, const std::vector<Tensor>& grads, SgdState& state) {
  if (grads.size() != model.params.size())
    throw std::invalid_argument("sgd_step: gradient count mismatch");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Tensor& p = model.params[i];
    const Tensor& g = grads[i];
    Tensor& v = state.momentum_buffers[i];
    if (!g.same_shape(p))
      throw std::invalid_argument("sgd_step: gradient shape mismatch at " +
                                  model.param_names()[i]);
    for (std::size_t j = 0; j < p.numel(); ++j) {
      v[j] = state.momentum * v[j] + g[j] + state.weight_decay * p[j];
      p[j] -= state.lr * v[j];
    }
  }
}

void clip_grad_norm(std::vector<Tensor>& grads, float max_norm) {
  double s = 0.0;
  for (const Tensor& g : grads)
    for (float v : g.data) s += static_cast<double>(v) * v;
  float n = static_cast<float>(std::sqrt(s));
  if (n <= max_norm) return;
  float scale = max_norm / n;
  for (Tensor& g : grads)
    for (float& v : g.data) v *= scale;
}

float linf_norm(const Tensor& t) {
  float m = 0.0f;
  for (float v : t.data) m = std::max(m, std::fabs(v));
  return m;
}

float l2_norm(const Tensor& t) {
  double s = 0.0;
  for (float v : t.data) s += static_cast<double>(v) * v;
  return static_cast<float>(std::sqrt(s));
}

int l0_count(const Tensor& t) {
  int n = 0;
  for (float v : t.data)
    if (v != 0.0f) ++n;
  return n;
}

Tensor project_lp(const Tensor& delta, Norm norm, float eps) {
  if (eps <= 0.0f) throw std::invalid_argument("project_lp: eps must be positive");
  Tensor out = delta;
  switch (norm) {
    case Norm::Linf:
      for (float& v : out.data) v = std::clamp(v, -eps, eps);
      break;
    case Norm::L2: {
      // repeat until the recomputed norm is inside the ball, so the
      // projection is bitwise idempotent despite f32 rounding
      for (float n = l2_norm(out); n > eps; n = l2_norm(out)) {
        float scale = eps / n;
        for (float& v : out.data) v *= scale;
      }
      break;
    }
    case Norm::L0: {
      int k = static_cast<int>(eps);
      if (static_cast<float>(k) != eps || k < 1)
        throw std::invalid_argument("project_lp: l0 eps must be a positive integer");
      int nz = l0_count(out);
      if (nz <= k) break;
      // indices of the k largest magnitudes, ties to the lowest flat index
      std::vector<std::size_t> idx(out.numel());
      std::iota(idx.begin(), idx.end(), 0);
      std::stable_sort(idx.begin(), idx.end(), [&out](std::size_t a, std::size_t b) {
        return std::fabs(out[a]) > std::fabs(out[b]);
      });
      Tensor kept(out.shape);
      for (int i = 0; i < k; ++i) kept[idx[static_cast<std::size_t>(i)]] = out[idx[static_cast<std::size_t>(i)]];
      out = std::move(kept);
      break;
    }
  }
  return out;
}

}  // namespace apf
