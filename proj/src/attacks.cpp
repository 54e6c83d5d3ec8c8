#include "apforge/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "apforge/defenses.hpp"
#include "apforge/optim.hpp"
#include "apforge/rng.hpp"

namespace apf {

std::string attack_name(AttackKind k) {
  switch (k) {
    case AttackKind::EM: return "em";
    case AttackKind::REM: return "rem";
    case AttackKind::HYPO: return "hypo";
    case AttackKind::TAP: return "tap";
    case AttackKind::LSP: return "lsp";
    case AttackKind::AR: return "ar";
    case AttackKind::OPS: return "ops";
  }
  return "?";
}

AttackKind attack_from_name(const std::string& s) {
  for (int k = 0; k <= static_cast<int>(AttackKind::OPS); ++k)
    if (attack_name(static_cast<AttackKind>(k)) == s) return static_cast<AttackKind>(k);
  throw std::invalid_argument("unknown attack: " + s);
}

AttackConfig AttackConfig::defaults(AttackKind k, std::uint64_t seed) {
  AttackConfig c;
  c.attack = k;
  c.seed = seed;
  switch (k) {
    case AttackKind::LSP: c.eps = 1.30f; break;
    case AttackKind::AR: c.eps = 1.00f; break;
    case AttackKind::OPS: c.eps = 1.0f; break;
    default: c.eps = 8.0f / 255.0f; break;
  }
  return c;
}

void AttackConfig::validate() const {
  if (eps <= 0.0f) throw std::invalid_argument("attack: eps must be positive");
  bool uses_pgd = attack == AttackKind::EM || attack == AttackKind::REM ||
                  attack == AttackKind::HYPO || attack == AttackKind::TAP;
  if (uses_pgd && pgd_alpha <= 0.0f)
    throw std::invalid_argument("attack: pgd_alpha must be positive");
  if (attack == AttackKind::REM && rem_adv_eps > eps)
    throw std::invalid_argument("attack: rem_adv_eps must not exceed eps");
  if (attack == AttackKind::OPS && eps != 1.0f)
    throw std::invalid_argument("attack: OPS requires eps == 1");
}

std::string AttackConfig::canonical() const {
  std::ostringstream os;
  os << "attack=" << attack_name(attack) << ";eps=" << eps << ";pgd_steps=" << pgd_steps
     << ";pgd_alpha=" << pgd_alpha << ";surrogate_epochs=" << surrogate_epochs
     << ";outer_cap=" << outer_cap << ";stop_error=" << stop_error
     << ";rem_adv_eps=" << rem_adv_eps << ";rem_adv_steps=" << rem_adv_steps
     << ";patch_size=" << patch_size << ";batch_size=" << batch_size << ";seed=" << seed;
  return os.str();
}

namespace {

std::vector<std::vector<int>> make_batches(const std::vector<int>& order, int batch_size) {
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Tensor gather(const Tensor& images, const std::vector<int>& idx) {
  std::size_t stride = images.numel() / static_cast<std::size_t>(images.dim(0));
  Tensor out({static_cast<int>(idx.size()), images.dim(1), images.dim(2), images.dim(3)});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(images.ptr() + static_cast<std::size_t>(idx[i]) * stride, stride,
                out.ptr() + i * stride);
  return out;
}

std::vector<int> gather_labels(const std::vector<int>& labels, const std::vector<int>& idx) {
  std::vector<int> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    out[i] = labels[static_cast<std::size_t>(idx[i])];
  return out;
}

// clamp(base + delta, 0, 1) for the given sample indices
Tensor poisoned_batch(const Tensor& images, const Tensor& delta, const std::vector<int>& idx) {
  Tensor x = gather(images, idx);
  std::size_t stride = x.numel() / idx.size();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const float* d = delta.ptr() + static_cast<std::size_t>(idx[i]) * stride;
    float* p = x.ptr() + i * stride;
    for (std::size_t j = 0; j < stride; ++j) p[j] = std::clamp(p[j] + d[j], 0.0f, 1.0f);
  }
  return x;
}

float train_error(const CnnModel& model, const Tensor& images, const std::vector<int>& labels,
                  int batch_size) {
  int n = images.dim(0);
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  int wrong = 0;
  for (const auto& batch : make_batches(all, batch_size)) {
    Tensor logits = forward(model, gather(images, batch));
    int c = logits.dim(1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const float* z = logits.ptr() + i * static_cast<std::size_t>(c);
      int best = 0;
      for (int j = 1; j < c; ++j)
        if (z[j] > z[best]) best = j;
      if (best != labels[static_cast<std::size_t>(batch[i])]) ++wrong;
    }
  }
  return static_cast<float>(wrong) / static_cast<float>(n);
}

// Shared EM/REM loop. REM is EM with an adversarial probe inside both the
// surrogate updates and the noise updates; adv_eps == 0 recovers EM
// exactly (same code path, same draw sequence).
PerturbationSet em_core(const LabeledDataset& data, const AttackConfig& cfg, float adv_eps,
                        const std::string& name) {
  data.validate();
  int n = data.size();
  Rng root = Rng(cfg.seed).derive(0x656d636f7265ull);
  CnnArch arch;
  arch.in_hw = data.hw();
  arch.num_classes = data.num_classes;
  CnnModel model = CnnModel::init(arch, root.derive(1).state);
  SgdState sgd = SgdState::init(model, 0.1f, 0.9f, 0.0f);
  Rng shuffle_rng = root.derive(2);
  Rng adv_rng = root.derive(3);
  float adv_alpha = adv_eps / 4.0f;

  PerturbationSet out;
  out.deltas = Tensor(data.images.shape);
  out.norm = Norm::Linf;
  out.eps = cfg.eps;
  out.attack_name = name;
  out.seed = cfg.seed;
  out.converged = false;

  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  std::size_t stride = data.images.numel() / static_cast<std::size_t>(n);

  for (int outer = 0; outer < cfg.outer_cap; ++outer) {
    // (a) surrogate training on current x + delta
    for (int ep = 0; ep < cfg.surrogate_epochs; ++ep) {
      std::vector<int> order = all;
      shuffle_rng.shuffle(order);
      for (const auto& batch : make_batches(order, cfg.batch_size)) {
        Tensor x = poisoned_batch(data.images, out.deltas, batch);
        std::vector<int> y = gather_labels(data.labels, batch);
        if (adv_eps > 0.0f)
          x = pgd_adversarial(model, x, y, adv_eps, adv_alpha, cfg.rem_adv_steps, adv_rng);
        GradResult g = loss_and_grads(model, x, y);
        clip_grad_norm(g.param_grads, 1.0f);
        sgd_step(model, g.param_grads, sgd);
      }
    }
    // (b) error-minimizing noise update, fixed sample order
    for (const auto& batch : make_batches(all, cfg.batch_size)) {
      std::vector<int> y = gather_labels(data.labels, batch);
      for (int step = 0; step < cfg.pgd_steps; ++step) {
        Tensor x = poisoned_batch(data.images, out.deltas, batch);
        if (adv_eps > 0.0f)
          x = pgd_adversarial(model, x, y, adv_eps, adv_alpha, cfg.rem_adv_steps, adv_rng);
        GradResult g = loss_and_grads(model, x, y, /*wrt_input=*/true);
        const Tensor& ig = *g.input_grads;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          float* d = out.deltas.ptr() + static_cast<std::size_t>(batch[i]) * stride;
          const float* gi = ig.ptr() + i * stride;
          for (std::size_t j = 0; j < stride; ++j) {
            float s = gi[j] > 0.0f ? cfg.pgd_alpha : (gi[j] < 0.0f ? -cfg.pgd_alpha : 0.0f);
            d[j] = std::clamp(d[j] - s, -cfg.eps, cfg.eps);
          }
        }
      }
    }

    Tensor poisoned = poisoned_batch(data.images, out.deltas, all);
    out.surrogate_losses.push_back(batch_loss(model, poisoned, data.labels));
    float err = train_error(model, poisoned, data.labels, cfg.batch_size);
    if (err <= cfg.stop_error) {
      out.converged = true;
      break;
    }
  }
  return out;
}

// PGD on a fixed surrogate minimizing cross-entropy toward `targets`.
PerturbationSet fixed_surrogate_pgd(const LabeledDataset& data, const CnnModel& surrogate,
                                    const AttackConfig& cfg, const std::vector<int>& targets,
                                    const std::string& name) {
  data.validate();
  int n = data.size();
  PerturbationSet out;
  out.deltas = Tensor(data.images.shape);
  out.norm = Norm::Linf;
  out.eps = cfg.eps;
  out.attack_name = name;
  out.seed = cfg.seed;

  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  std::size_t stride = data.images.numel() / static_cast<std::size_t>(n);

  for (const auto& batch : make_batches(all, cfg.batch_size)) {
    std::vector<int> y = gather_labels(targets, batch);
    for (int step = 0; step < cfg.pgd_steps; ++step) {
      Tensor x = poisoned_batch(data.images, out.deltas, batch);
      GradResult g = loss_and_grads(surrogate, x, y, /*wrt_input=*/true);
      const Tensor& ig = *g.input_grads;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        float* d = out.deltas.ptr() + static_cast<std::size_t>(batch[i]) * stride;
        const float* gi = ig.ptr() + i * stride;
        for (std::size_t j = 0; j < stride; ++j) {
          float s = gi[j] > 0.0f ? cfg.pgd_alpha : (gi[j] < 0.0f ? -cfg.pgd_alpha : 0.0f);
          d[j] = std::clamp(d[j] - s, -cfg.eps, cfg.eps);
        }
      }
    }
  }
  return out;
}

void require_pretrained(const SurrogateCheckpoint& s) {
  if (s.train_error > 0.05f)
    throw std::invalid_argument("surrogate under-trained: train error " +
                                std::to_string(s.train_error) + " > 0.05");
}

}  // namespace

SurrogateCheckpoint pretrain_surrogate(const LabeledDataset& data, float target_error,
                                       int max_epochs, std::uint64_t seed) {
  data.validate();
  Rng root = Rng(seed).derive(0x737572ull);
  CnnArch arch;
  arch.in_hw = data.hw();
  arch.num_classes = data.num_classes;
  SurrogateCheckpoint ck{CnnModel::init(arch, root.derive(1).state), 1.0f, 0};
  SgdState sgd = SgdState::init(ck.model, 0.1f, 0.9f, 0.0f);
  Rng shuffle_rng = root.derive(2);
  int n = data.size();
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
  for (int ep = 0; ep < max_epochs; ++ep) {
    std::vector<int> order = all;
    shuffle_rng.shuffle(order);
    for (const auto& batch : make_batches(order, 128)) {
      GradResult g = loss_and_grads(ck.model, gather(data.images, batch),
                                    gather_labels(data.labels, batch));
      clip_grad_norm(g.param_grads, 1.0f);
      sgd_step(ck.model, g.param_grads, sgd);
    }
    ck.epochs_run = ep + 1;
    ck.train_error = train_error(ck.model, data.images, data.labels, 128);
    if (ck.train_error <= target_error) break;
  }
  return ck;
}

PerturbationSet em_generate(const LabeledDataset& data, const AttackConfig& cfg) {
  if (cfg.attack != AttackKind::EM) throw std::invalid_argument("em_generate: wrong attack kind");
  cfg.validate();
  return em_core(data, cfg, 0.0f, "em");
}

PerturbationSet rem_generate(const LabeledDataset& data, const AttackConfig& cfg) {
  if (cfg.attack != AttackKind::REM) throw std::invalid_argument("rem_generate: wrong attack kind");
  cfg.validate();
  return em_core(data, cfg, cfg.rem_adv_eps, "rem");
}

PerturbationSet hypo_generate(const LabeledDataset& data, const SurrogateCheckpoint& surrogate,
                              const AttackConfig& cfg) {
  if (cfg.attack != AttackKind::HYPO) throw std::invalid_argument("hypo_generate: wrong attack kind");
  cfg.validate();
  require_pretrained(surrogate);
  return fixed_surrogate_pgd(data, surrogate.model, cfg, data.labels, "hypo");
}

PerturbationSet tap_generate(const LabeledDataset& data, const SurrogateCheckpoint& surrogate,
                             const AttackConfig& cfg) {
  if (cfg.attack != AttackKind::TAP) throw std::invalid_argument("tap_generate: wrong attack kind");
  cfg.validate();
  require_pretrained(surrogate);
  std::vector<int> targets(data.labels.size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    targets[i] = (data.labels[i] + 1) % data.num_classes;
  return fixed_surrogate_pgd(data, surrogate.model, cfg, targets, "tap");
}

PerturbationSet lsp_generate(const LabeledDataset& data, const AttackConfig& cfg) {
  if (cfg.attack != AttackKind::LSP) throw std::invalid_argument("lsp_generate: wrong attack kind");
  cfg.validate();
  data.validate();
  int h = data.images.dim(2), w = data.images.dim(3), p = cfg.patch_size;
  if (h % p != 0 || w % p != 0)
    throw std::invalid_argument("lsp_generate: image size not divisible by patch size");
  int gh = h / p, gw = w / p;
  const float amp = 6.0f / 255.0f;
  float eps = std::sqrt(3.0f * static_cast<float>(h) * static_cast<float>(w)) * amp;

  Rng root = Rng(cfg.seed).derive(0x6c7370ull);
  std::vector<Tensor> patterns;
  for (int c = 0; c < data.num_classes; ++c) {
    Rng r = root.derive(static_cast<std::uint64_t>(c));
    Tensor pat({3, h, w});
    for (int ch = 0; ch < 3; ++ch)
      for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx) {
          float v = (r.next() & 1) ? amp : -amp;
          for (int y = gy * p; y < (gy + 1) * p; ++y)
            for (int x = gx * p; x < (gx + 1) * p; ++x)
              pat[static_cast<std::size_t>(ch) * h * w + static_cast<std::size_t>(y) * w + x] = v;
        }
    patterns.push_back(project_lp(pat, Norm::L2, eps));
  }

  PerturbationSet out;
  out.deltas = Tensor(data.images.shape);
  out.norm = Norm::L2;
  out.eps = eps;
  out.attack_name = "lsp";
  out.seed = cfg.seed;
  std::size_t stride = static_cast<std::size_t>(3) * h * w;
  for (int i = 0; i < data.size(); ++i)
    std::copy_n(patterns[static_cast<std::size_t>(data.labels[static_cast<std::size_t>(i)])].ptr(),
                stride, out.deltas.ptr() + static_cast<std::size_t>(i) * stride);
  return out;
}

namespace {

// Causal 3x3 window with the current pixel at the bottom-right corner:
// neighbors u[i-di][j-dj] for (di,dj) in {0,1,2}^2 \ {(0,0)}, row-major
// coefficient order, out-of-range reads are zero.
void ar_fill(const float* coeffs, int h, int w, float* plane) {
  for (int i = 1; i < h; ++i)
    for (int j = 1; j < w; ++j) {
      float acc = 0.0f;
      int k = 0;
      for (int di = 0; di < 3; ++di)
        for (int dj = 0; dj < 3; ++dj) {
          if (di == 0 && dj == 0) continue;
          int y = i - di, x = j - dj;
          if (y >= 0 && x >= 0) acc += coeffs[k] * plane[y * w + x];
          ++k;
        }
      plane[i * w + j] = acc;
    }
}

}  // namespace

PerturbationSet ar_generate(const LabeledDataset& data, const AttackConfig& cfg) {
  if (cfg.attack != AttackKind::AR) throw std::invalid_argument("ar_generate: wrong attack kind");
  cfg.validate();
  data.validate();
  int h = data.images.dim(2), w = data.images.dim(3);
  if (h < 4 || w < 4) throw std::invalid_argument("ar_generate: images must be at least 4x4");

  Rng root = Rng(cfg.seed).derive(0x6172ull);
  std::vector<std::array<float, 8>> filters;
  for (int c = 0; c < data.num_classes; ++c) {
    Rng r = root.derive(static_cast<std::uint64_t>(c));
    std::array<float, 8> f{};
    float sum = 0.0f;
    for (float& v : f) {
      v = r.uniform(0.0f, 1.0f);
      sum += v;
    }
    // near-unit-root smoothing filter: the resulting texture is low
    // frequency, so it survives the pooling stack instead of averaging out
    for (float& v : f) v *= 0.99f / sum;
    filters.push_back(f);
  }

  PerturbationSet out;
  out.deltas = Tensor(data.images.shape);
  out.norm = Norm::L2;
  out.eps = cfg.eps;
  out.attack_name = "ar";
  out.seed = cfg.seed;
  std::size_t stride = static_cast<std::size_t>(3) * h * w;
  Rng noise_root = root.derive(0x6e6f697365ull);
  for (int i = 0; i < data.size(); ++i) {
    const auto& f = filters[static_cast<std::size_t>(data.labels[static_cast<std::size_t>(i)])];
    float* d = out.deltas.ptr() + static_cast<std::size_t>(i) * stride;
    // a degenerate draw (zero or non-finite field) falls through to the
    // next derived stream
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rng nr = noise_root.derive(static_cast<std::uint64_t>(i) * 97 + attempt);
      for (int ch = 0; ch < 3; ++ch) {
        float* plane = d + static_cast<std::size_t>(ch) * h * w;
        std::fill_n(plane, static_cast<std::size_t>(h) * w, 0.0f);
        for (int x = 0; x < w; ++x) plane[x] = nr.normal();
        for (int y = 1; y < h; ++y) plane[y * w] = nr.normal();
        ar_fill(f.data(), h, w, plane);
      }
      double norm_sq = 0.0;
      bool finite = true;
      for (std::size_t j = 0; j < stride; ++j) {
        if (!std::isfinite(d[j])) { finite = false; break; }
        norm_sq += static_cast<double>(d[j]) * d[j];
      }
      if (finite && norm_sq > 0.0) {
        float scale = cfg.eps / static_cast<float>(std::sqrt(norm_sq));
        for (std::size_t j = 0; j < stride; ++j) d[j] *= scale;
        break;
      }
    }
  }
  return out;
}

PerturbationSet ops_generate(const LabeledDataset& data, const AttackConfig& cfg) {
  if (cfg.attack != AttackKind::OPS) throw std::invalid_argument("ops_generate: wrong attack kind");
  cfg.validate();
  data.validate();
  int h = data.images.dim(2), w = data.images.dim(3), n = data.size();
  std::size_t hw2 = static_cast<std::size_t>(h) * w;

  PerturbationSet out;
  out.deltas = Tensor(data.images.shape);
  out.norm = Norm::L0;
  out.eps = 1.0f;
  out.attack_name = "ops";
  out.seed = cfg.seed;

  for (int c = 0; c < data.num_classes; ++c) {
    std::vector<int> members;
    for (int i = 0; i < n; ++i)
      if (data.labels[static_cast<std::size_t>(i)] == c) members.push_back(i);
    if (members.empty()) continue;

    // exhaustive search over pixel position and extreme color; the most
    // consistent, least deviating choice wins
    float best_score = -1e30f;
    int best_y = 0, best_x = 0, best_v = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int vi = 0; vi < 8; ++vi) {
          float vr = (vi & 4) ? 1.0f : 0.0f;
          float vg = (vi & 2) ? 1.0f : 0.0f;
          float vb = (vi & 1) ? 1.0f : 0.0f;
          double sum = 0.0, sum_sq = 0.0;
          for (int m : members) {
            const float* img = data.images.ptr() + static_cast<std::size_t>(m) * 3 * hw2;
            float q = (std::fabs(vr - img[y * w + x]) + std::fabs(vg - img[hw2 + y * w + x]) +
                       std::fabs(vb - img[2 * hw2 + y * w + x])) / 3.0f;
            sum += q;
            sum_sq += static_cast<double>(q) * q;
          }
          double mean = sum / static_cast<double>(members.size());
          double var = std::max(0.0, sum_sq / static_cast<double>(members.size()) - mean * mean);
          float score = static_cast<float>(-mean - std::sqrt(var));
          if (score > best_score) {
            best_score = score;
            best_y = y;
            best_x = x;
            best_v = vi;
          }
        }

    float vr = (best_v & 4) ? 1.0f : 0.0f;
    float vg = (best_v & 2) ? 1.0f : 0.0f;
    float vb = (best_v & 1) ? 1.0f : 0.0f;
    for (int m : members) {
      const float* img = data.images.ptr() + static_cast<std::size_t>(m) * 3 * hw2;
      float* d = out.deltas.ptr() + static_cast<std::size_t>(m) * 3 * hw2;
      d[best_y * w + best_x] = vr - img[best_y * w + best_x];
      d[hw2 + best_y * w + best_x] = vg - img[hw2 + best_y * w + best_x];
      d[2 * hw2 + best_y * w + best_x] = vb - img[2 * hw2 + best_y * w + best_x];
    }
  }
  return out;
}

PerturbationSet generate(const LabeledDataset& data, const AttackConfig& cfg) {
  switch (cfg.attack) {
    case AttackKind::EM: return em_generate(data, cfg);
    case AttackKind::REM: return rem_generate(data, cfg);
    case AttackKind::HYPO: {
      SurrogateCheckpoint ck = pretrain_surrogate(data, 0.05f, 30, Rng(cfg.seed).derive(11).state);
      return hypo_generate(data, ck, cfg);
    }
    case AttackKind::TAP: {
      SurrogateCheckpoint ck = pretrain_surrogate(data, 0.05f, 30, Rng(cfg.seed).derive(11).state);
      return tap_generate(data, ck, cfg);
    }
    case AttackKind::LSP: return lsp_generate(data, cfg);
    case AttackKind::AR: return ar_generate(data, cfg);
    case AttackKind::OPS: return ops_generate(data, cfg);
  }
  throw std::invalid_argument("generate: unknown attack");
}

}  // namespace apf
