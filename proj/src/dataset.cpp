#include "apforge/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "apforge/rng.hpp"

namespace apf {

Tensor LabeledDataset::sample(int i) const {
  int c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor out({1, c, h, w});
  std::size_t stride = static_cast<std::size_t>(c) * h * w;
  std::copy_n(images.ptr() + static_cast<std::size_t>(i) * stride, stride, out.ptr());
  return out;
}

void LabeledDataset::validate() const {
  if (images.rank() != 4) throw std::invalid_argument("dataset: images must be NCHW");
  if (static_cast<int>(labels.size()) != images.dim(0))
    throw std::invalid_argument("dataset: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= num_classes) throw std::invalid_argument("dataset: label out of range");
  for (float v : images.data)
    if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("dataset: pixel outside [0,1]");
}

namespace {

constexpr std::size_t kCifarRecord = 3073;  // 1 label byte + 3*32*32 pixels

void read_cifar_file(const std::string& path, std::vector<float>& pixels,
                     std::vector<int>& labels) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cifar10: cannot open " + path);
  std::size_t size = static_cast<std::size_t>(f.tellg());
  if (size == 0 || size % kCifarRecord != 0)
    throw std::runtime_error("cifar10: truncated file (size not divisible by 3073): " + path);
  f.seekg(0);
  std::size_t n = size / kCifarRecord;
  std::vector<unsigned char> raw(size);
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(size));
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = raw.data() + i * kCifarRecord;
    labels.push_back(static_cast<int>(rec[0]));
    for (std::size_t j = 1; j < kCifarRecord; ++j)
      pixels.push_back(static_cast<float>(rec[j]) / 255.0f);
  }
}

}  // namespace

LabeledDataset load_cifar10(const std::string& dir, const std::string& split) {
  namespace fs = std::filesystem;
  std::string base = dir;
  if (!fs::exists(fs::path(base) / "test_batch.bin") &&
      fs::exists(fs::path(base) / "cifar-10-batches-bin"))
    base = (fs::path(base) / "cifar-10-batches-bin").string();

  std::vector<std::string> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i)
      files.push_back((fs::path(base) / ("data_batch_" + std::to_string(i) + ".bin")).string());
  } else if (split == "test") {
    files.push_back((fs::path(base) / "test_batch.bin").string());
  } else {
    throw std::invalid_argument("load_cifar10: split must be train or test");
  }

  std::vector<float> pixels;
  std::vector<int> labels;
  for (const std::string& f : files) read_cifar_file(f, pixels, labels);

  LabeledDataset d;
  int n = static_cast<int>(labels.size());
  d.images = Tensor({n, 3, 32, 32}, std::move(pixels));
  d.labels = std::move(labels);
  d.num_classes = 10;
  d.name = "cifar10-" + split;
  return d;
}

namespace {

// Bilinear upsample of a coarse grid to hw x hw, pixel-center sampling.
void upsample_plane(const float* coarse, int g, int hw, float* out) {
  for (int y = 0; y < hw; ++y) {
    float fy = (static_cast<float>(y) + 0.5f) * static_cast<float>(g) / static_cast<float>(hw) - 0.5f;
    fy = std::clamp(fy, 0.0f, static_cast<float>(g - 1));
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, g - 1);
    float wy = fy - static_cast<float>(y0);
    for (int x = 0; x < hw; ++x) {
      float fx = (static_cast<float>(x) + 0.5f) * static_cast<float>(g) / static_cast<float>(hw) - 0.5f;
      fx = std::clamp(fx, 0.0f, static_cast<float>(g - 1));
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, g - 1);
      float wx = fx - static_cast<float>(x0);
      float top = coarse[y0 * g + x0] * (1 - wx) + coarse[y0 * g + x1] * wx;
      float bot = coarse[y1 * g + x0] * (1 - wx) + coarse[y1 * g + x1] * wx;
      out[y * hw + x] = top * (1 - wy) + bot * wy;
    }
  }
}

LabeledDataset synth_split(const std::vector<Tensor>& templates, int num_classes, int per_class,
                           int hw, Rng rng, const std::string& name) {
  int n = num_classes * per_class;
  LabeledDataset d;
  d.images = Tensor({n, 3, hw, hw});
  d.labels.resize(static_cast<std::size_t>(n));
  d.num_classes = num_classes;
  d.name = name;
  std::size_t stride = static_cast<std::size_t>(3) * hw * hw;
  int i = 0;
  for (int c = 0; c < num_classes; ++c) {
    const Tensor& tpl = templates[static_cast<std::size_t>(c)];
    for (int s = 0; s < per_class; ++s, ++i) {
      Rng noise = rng.derive(static_cast<std::uint64_t>(i));
      float* img = d.images.ptr() + static_cast<std::size_t>(i) * stride;
      for (std::size_t j = 0; j < stride; ++j)
        img[j] = std::clamp(tpl[j] + 0.15f * noise.normal(), 0.0f, 1.0f);
      d.labels[static_cast<std::size_t>(i)] = c;
    }
  }
  return d;
}

}  // namespace

std::pair<LabeledDataset, LabeledDataset> gen_synthetic(int num_classes, int per_class, int hw,
                                                        std::uint64_t seed) {
  if (per_class < 2) throw std::invalid_argument("gen_synthetic: per_class must be >= 2");
  if (hw < 8) throw std::invalid_argument("gen_synthetic: hw must be >= 8");

  const int g = 4;  // coarse grid per channel; keeps templates low-frequency
  Rng root(seed);
  Rng tpl_rng = root.derive(0x74706cull);
  std::vector<Tensor> templates;
  int ga = 8;          // finer grid holding the anchor cells
  int na = 2;          // anchor cells per class
  float amp = 0.12f;   // anchor contrast against the 0.5 background
  float famp = 0.02f;  // dense field contrast around 0.5
  if (const char* e = std::getenv("APF_ANCHOR_GRID")) ga = std::atoi(e);
  if (const char* e = std::getenv("APF_ANCHOR_N")) na = std::atoi(e);
  if (const char* e = std::getenv("APF_ANCHOR_AMP")) amp = std::strtof(e, nullptr);
  if (const char* e = std::getenv("APF_FIELD_AMP")) famp = std::strtof(e, nullptr);
  for (int c = 0; c < num_classes; ++c) {
    Rng r = tpl_rng.derive(static_cast<std::uint64_t>(c));
    // Two small high-contrast anchor cells per class, shared across channels
    // so the cue is achromatic. Being compact they contribute little early
    // gradient mass, but they survive small l-inf adversaries and strong
    // photometric augmentation, which only the rest of the (deliberately
    // faint) field is sensitive to.
    std::vector<float> acoarse(static_cast<std::size_t>(ga) * ga, 0.0f);
    for (int k = 0; k < na; ++k) {
      int cell;
      do {
        cell = static_cast<int>(r.below(static_cast<std::uint32_t>(ga * ga)));
      } while (acoarse[static_cast<std::size_t>(cell)] != 0.0f);
      acoarse[static_cast<std::size_t>(cell)] = r.uniform() < 0.5f ? -amp : amp;
    }
    std::vector<float> aplane(static_cast<std::size_t>(hw) * hw);
    upsample_plane(acoarse.data(), ga, hw, aplane.data());
    // low contrast on purpose: per-pixel class signal sits below the
    // sigma=0.15 sample noise, so nets must pool evidence across pixels
    // and easy injected shortcuts can out-compete the true features.
    // The field is achromatic (shared across channels) like natural-image
    // luma structure, so channel-mixing transforms keep the class signal.
    std::vector<float> coarse(static_cast<std::size_t>(g) * g);
    for (float& v : coarse) v = r.uniform(0.5f - famp, 0.5f + famp);
    Tensor tpl({3, hw, hw});
    float* plane0 = tpl.ptr();
    upsample_plane(coarse.data(), g, hw, plane0);
    for (std::size_t j = 0; j < aplane.size(); ++j) plane0[j] += aplane[j];
    std::copy_n(plane0, aplane.size(), tpl.ptr() + aplane.size());
    std::copy_n(plane0, aplane.size(), tpl.ptr() + 2 * aplane.size());
    templates.push_back(std::move(tpl));
  }

  int test_per_class = std::max(1, per_class / 2);
  LabeledDataset train = synth_split(templates, num_classes, per_class, hw,
                                     root.derive(0x747261696eull), "synthetic-train");
  LabeledDataset test = synth_split(templates, num_classes, test_per_class, hw,
                                    root.derive(0x74657374ull), "synthetic-test");
  return {std::move(train), std::move(test)};
}

PoisonedDataset apply_poison(const LabeledDataset& base, const PerturbationSet& pert,
                             float ratio, std::uint64_t seed) {
  if (!(ratio > 0.0f && ratio <= 1.0f))
    throw std::invalid_argument("apply_poison: ratio must be in (0,1]");
  if (pert.deltas.shape != base.images.shape)
    throw std::invalid_argument("apply_poison: perturbation/dataset size mismatch");

  int n = base.size();
  int n_poison = static_cast<int>(std::floor(ratio * static_cast<float>(n)));
  Rng rng = Rng(seed).derive(0x706f69736f6eull);
  std::vector<int> perm = rng.permutation(n);

  PoisonedDataset out;
  out.data = base;
  out.data.name = base.name + "+" + pert.attack_name;
  out.poisoned_mask.assign(static_cast<std::size_t>(n), 0);
  out.ratio = ratio;
  std::size_t stride = base.images.numel() / static_cast<std::size_t>(n);
  for (int k = 0; k < n_poison; ++k) {
    int i = perm[static_cast<std::size_t>(k)];
    out.poisoned_mask[static_cast<std::size_t>(i)] = 1;
    float* img = out.data.images.ptr() + static_cast<std::size_t>(i) * stride;
    const float* d = pert.deltas.ptr() + static_cast<std::size_t>(i) * stride;
    for (std::size_t j = 0; j < stride; ++j)
      img[j] = std::clamp(img[j] + d[j], 0.0f, 1.0f);
  }
  return out;
}

}  // namespace apf
