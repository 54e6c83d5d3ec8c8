#include "apforge/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "apforge/optim.hpp"

namespace apf {

std::string defense_name(DefenseKind k) {
  switch (k) {
    case DefenseKind::None: return "none";
    case DefenseKind::Standard: return "standard";
    case DefenseKind::CutOut: return "cutout";
    case DefenseKind::MixUp: return "mixup";
    case DefenseKind::CutMix: return "cutmix";
    case DefenseKind::Gaussian: return "gaussian";
    case DefenseKind::BDR: return "bdr";
    case DefenseKind::Gray: return "gray";
    case DefenseKind::JPEG: return "jpeg";
    case DefenseKind::ULite: return "ulite";
    case DefenseKind::UMax: return "umax";
    case DefenseKind::AT: return "at";
  }
  return "?";
}

DefenseKind defense_from_name(const std::string& s) {
  for (int k = 0; k <= static_cast<int>(DefenseKind::AT); ++k)
    if (defense_name(static_cast<DefenseKind>(k)) == s) return static_cast<DefenseKind>(k);
  throw std::invalid_argument("unknown defense: " + s);
}

void DefenseConfig::validate() const {
  if (jpeg_quality < 1 || jpeg_quality > 100)
    throw std::invalid_argument("defense: jpeg_quality must be in [1,100]");
  if (bdr_bits < 1 || bdr_bits > 7)
    throw std::invalid_argument("defense: bdr_bits must be in [1,7]");
  if (umax_k < 1) throw std::invalid_argument("defense: umax_k must be >= 1");
  if (at_steps < 1) throw std::invalid_argument("defense: at_steps must be >= 1");
  if (gauss_kernel < 1 || gauss_kernel % 2 == 0)
    throw std::invalid_argument("defense: gauss_kernel must be odd and >= 1");
}

Tensor one_hot(const std::vector<int>& labels, int num_classes) {
  int n = static_cast<int>(labels.size());
  Tensor t({n, num_classes});
  for (int i = 0; i < n; ++i)
    t[static_cast<std::size_t>(i) * num_classes + static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] = 1.0f;
  return t;
}

Tensor grayscale(const Tensor& batch) {
  check_shape(batch, {-1, 3, -1, -1}, "grayscale");
  Tensor out = batch;
  int n = batch.dim(0), hw2 = batch.dim(2) * batch.dim(3);
  for (int i = 0; i < n; ++i) {
    float* img = out.ptr() + static_cast<std::size_t>(i) * 3 * hw2;
    for (int p = 0; p < hw2; ++p) {
      // equal channels are a fixed point, bitwise (keeps the op idempotent
      // despite f32 rounding in the weighted sum)
      if (img[p] == img[hw2 + p] && img[p] == img[2 * hw2 + p]) continue;
      float y = 0.299f * img[p] + 0.587f * img[hw2 + p] + 0.114f * img[2 * hw2 + p];
      img[p] = img[hw2 + p] = img[2 * hw2 + p] = y;
    }
  }
  return out;
}

Tensor bit_depth_reduce(const Tensor& batch, int bits) {
  if (bits < 1 || bits > 7) throw std::invalid_argument("bit_depth_reduce: bits must be in [1,7]");
  Tensor out = batch;
  float levels = static_cast<float>((1 << bits) - 1);
  for (float& v : out.data) v = std::round(v * levels) / levels;
  return out;
}

namespace {

// Annex K quantization tables.
constexpr int kLumaQ[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};
constexpr int kChromaQ[64] = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

void scaled_table(const int* base, int quality, float* out) {
  int s = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  for (int i = 0; i < 64; ++i)
    out[i] = static_cast<float>(std::clamp((base[i] * s + 50) / 100, 1, 255));
}

struct Dct8 {
  float c[8][8];  // orthonormal DCT-II basis
  Dct8() {
    for (int u = 0; u < 8; ++u) {
      float a = u == 0 ? std::sqrt(1.0f / 8.0f) : std::sqrt(2.0f / 8.0f);
      for (int x = 0; x < 8; ++x)
        c[u][x] = a * std::cos((2.0f * x + 1.0f) * u * 3.14159265358979323846f / 16.0f);
    }
  }
};

// One 8x8 block: DCT, quantize/dequantize, inverse DCT. In place.
void block_cycle(float* blk, const float* qt, const Dct8& d) {
  float tmp[64], freq[64];
  for (int u = 0; u < 8; ++u)
    for (int x = 0; x < 8; ++x) {
      float s = 0;
      for (int y = 0; y < 8; ++y) s += d.c[u][y] * blk[y * 8 + x];
      tmp[u * 8 + x] = s;
    }
  for (int u = 0; u < 8; ++u)
    for (int v = 0; v < 8; ++v) {
      float s = 0;
      for (int x = 0; x < 8; ++x) s += tmp[u * 8 + x] * d.c[v][x];
      freq[u * 8 + v] = std::round(s / qt[u * 8 + v]) * qt[u * 8 + v];
    }
  for (int u = 0; u < 8; ++u)
    for (int x = 0; x < 8; ++x) {
      float s = 0;
      for (int v = 0; v < 8; ++v) s += freq[u * 8 + v] * d.c[v][x];
      tmp[u * 8 + x] = s;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      float s = 0;
      for (int u = 0; u < 8; ++u) s += d.c[u][y] * tmp[u * 8 + x];
      blk[y * 8 + x] = s;
    }
}

int reflect(int i, int n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}

}  // namespace

Tensor jpeg_cycle(const Tensor& batch, int quality) {
  if (quality < 1 || quality > 100)
    throw std::invalid_argument("jpeg_cycle: quality must be in [1,100]");
  check_shape(batch, {-1, 3, -1, -1}, "jpeg_cycle");
  int n = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
  int hp = (h + 7) / 8 * 8, wp = (w + 7) / 8 * 8;
  static const Dct8 dct;
  float luma[64], chroma[64];
  scaled_table(kLumaQ, quality, luma);
  scaled_table(kChromaQ, quality, chroma);

  Tensor out = batch;
  std::vector<float> ycc(static_cast<std::size_t>(3) * hp * wp);
  for (int i = 0; i < n; ++i) {
    const float* img = batch.ptr() + static_cast<std::size_t>(i) * 3 * h * w;
    // RGB -> level-shifted YCbCr on a reflect-padded canvas, 255 scale
    for (int y = 0; y < hp; ++y)
      for (int x = 0; x < wp; ++x) {
        int sy = reflect(y, h), sx = reflect(x, w);
        float r = img[sy * w + sx] * 255.0f;
        float g = img[h * w + sy * w + sx] * 255.0f;
        float b = img[2 * h * w + sy * w + sx] * 255.0f;
        ycc[static_cast<std::size_t>(y) * wp + x] = 0.299f * r + 0.587f * g + 0.114f * b - 128.0f;
        ycc[static_cast<std::size_t>(hp) * wp + y * wp + x] =
            -0.168736f * r - 0.331264f * g + 0.5f * b;
        ycc[static_cast<std::size_t>(2) * hp * wp + y * wp + x] =
            0.5f * r - 0.418688f * g - 0.081312f * b;
      }
    for (int c = 0; c < 3; ++c) {
      const float* qt = c == 0 ? luma : chroma;
      float* plane = ycc.data() + static_cast<std::size_t>(c) * hp * wp;
      float blk[64];
      for (int by = 0; by < hp; by += 8)
        for (int bx = 0; bx < wp; bx += 8) {
          for (int y = 0; y < 8; ++y)
            std::memcpy(blk + y * 8, plane + static_cast<std::size_t>(by + y) * wp + bx,
                        8 * sizeof(float));
          block_cycle(blk, qt, dct);
          for (int y = 0; y < 8; ++y)
            std::memcpy(plane + static_cast<std::size_t>(by + y) * wp + bx, blk + y * 8,
                        8 * sizeof(float));
        }
    }
    float* dst = out.ptr() + static_cast<std::size_t>(i) * 3 * h * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        float yv = ycc[static_cast<std::size_t>(y) * wp + x] + 128.0f;
        float cb = ycc[static_cast<std::size_t>(hp) * wp + y * wp + x];
        float cr = ycc[static_cast<std::size_t>(2) * hp * wp + y * wp + x];
        dst[y * w + x] = std::clamp((yv + 1.402f * cr) / 255.0f, 0.0f, 1.0f);
        dst[h * w + y * w + x] =
            std::clamp((yv - 0.344136f * cb - 0.714136f * cr) / 255.0f, 0.0f, 1.0f);
        dst[2 * h * w + y * w + x] = std::clamp((yv + 1.772f * cb) / 255.0f, 0.0f, 1.0f);
      }
  }
  return out;
}

Tensor gaussian_blur(const Tensor& batch, int kernel, float sigma) {
  if (kernel < 1 || kernel % 2 == 0)
    throw std::invalid_argument("gaussian_blur: kernel must be odd and >= 1");
  if (kernel == 1) return batch;
  check_shape(batch, {-1, -1, -1, -1}, "gaussian_blur");
  int n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  int r = kernel / 2;
  std::vector<float> k(static_cast<std::size_t>(kernel));
  float sum = 0;
  for (int i = 0; i < kernel; ++i) {
    float d = static_cast<float>(i - r);
    k[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0f * sigma * sigma));
    sum += k[static_cast<std::size_t>(i)];
  }
  for (float& v : k) v /= sum;

  Tensor out = batch;
  std::vector<float> tmp(static_cast<std::size_t>(h) * w);
  for (int img = 0; img < n * c; ++img) {
    float* plane = out.ptr() + static_cast<std::size_t>(img) * h * w;
    for (int y = 0; y < h; ++y)  // horizontal
      for (int x = 0; x < w; ++x) {
        float s = 0;
        for (int t = -r; t <= r; ++t)
          s += k[static_cast<std::size_t>(t + r)] * plane[y * w + reflect(x + t, w)];
        tmp[static_cast<std::size_t>(y) * w + x] = s;
      }
    for (int y = 0; y < h; ++y)  // vertical
      for (int x = 0; x < w; ++x) {
        float s = 0;
        for (int t = -r; t <= r; ++t)
          s += k[static_cast<std::size_t>(t + r)] * tmp[static_cast<std::size_t>(reflect(y + t, h)) * w + x];
        plane[y * w + x] = s;
      }
  }
  return out;
}

Tensor plasma_field(int hw, Rng& rng) {
  int size = 1;
  while (size < hw) size *= 2;
  int s = size + 1;
  std::vector<float> grid(static_cast<std::size_t>(s) * s, 0.0f);
  auto at = [&grid, s](int y, int x) -> float& { return grid[static_cast<std::size_t>(y) * s + x]; };
  at(0, 0) = rng.uniform();
  at(0, size) = rng.uniform();
  at(size, 0) = rng.uniform();
  at(size, size) = rng.uniform();

  const float shrink = 1.0f / std::sqrt(2.0f);  // roughness 0.5
  float amp = 0.5f;
  for (int step = size; step > 1; step /= 2, amp *= shrink) {
    int half = step / 2;
    for (int y = half; y < s; y += step)  // diamond
      for (int x = half; x < s; x += step)
        at(y, x) = 0.25f * (at(y - half, x - half) + at(y - half, x + half) +
                            at(y + half, x - half) + at(y + half, x + half)) +
                   rng.uniform(-amp, amp);
    for (int y = 0; y < s; y += half)  // square
      for (int x = ((y / half) % 2 == 0) ? half : 0; x < s; x += step) {
        float acc = 0;
        int cnt = 0;
        if (y - half >= 0) { acc += at(y - half, x); ++cnt; }
        if (y + half < s) { acc += at(y + half, x); ++cnt; }
        if (x - half >= 0) { acc += at(y, x - half); ++cnt; }
        if (x + half < s) { acc += at(y, x + half); ++cnt; }
        at(y, x) = acc / static_cast<float>(cnt) + rng.uniform(-amp, amp);
      }
  }

  // normalize over the returned crop, not the full 2^k+1 grid, so the
  // field actually attains 0 and 1
  float lo = at(0, 0), hi = at(0, 0);
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x) {
      lo = std::min(lo, at(y, x));
      hi = std::max(hi, at(y, x));
    }
  float range = hi - lo;
  Tensor out({hw, hw});
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x)
      out[static_cast<std::size_t>(y) * hw + x] =
          range > 0 ? (at(y, x) - lo) / range : 0.5f;
  return out;
}

namespace {

void apply_plasma(float* img, int hw2, int hw, Rng& rng) {
  if (rng.uniform() < 0.5f) {  // brightness
    Tensor f = plasma_field(hw, rng);
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < hw2; ++p)
        img[c * hw2 + p] = std::clamp(img[c * hw2 + p] + 0.3f * (f[static_cast<std::size_t>(p)] - 0.5f), 0.0f, 1.0f);
  }
  if (rng.uniform() < 0.5f) {  // contrast
    Tensor f = plasma_field(hw, rng);
    for (int c = 0; c < 3; ++c)
      for (int p = 0; p < hw2; ++p)
        img[c * hw2 + p] = std::clamp(
            (img[c * hw2 + p] - 0.5f) * (1.0f + 0.5f * (f[static_cast<std::size_t>(p)] - 0.5f)) + 0.5f,
            0.0f, 1.0f);
  }
}

void apply_channel_shuffle(float* img, int hw2, Rng& rng) {
  std::vector<int> perm = rng.permutation(3);
  std::vector<float> orig(static_cast<std::size_t>(3) * hw2);
  std::copy_n(img, 3 * hw2, orig.data());
  for (int c = 0; c < 3; ++c)
    std::copy_n(orig.data() + static_cast<std::size_t>(perm[static_cast<std::size_t>(c)]) * hw2,
                hw2, img + static_cast<std::size_t>(c) * hw2);
}

}  // namespace

Tensor ueraser_lite(const Tensor& batch, float p, Rng& rng) {
  check_shape(batch, {-1, 3, -1, -1}, "ueraser_lite");
  Tensor out = batch;
  int n = batch.dim(0), hw = batch.dim(2), hw2 = hw * batch.dim(3);
  for (int i = 0; i < n; ++i) {
    float* img = out.ptr() + static_cast<std::size_t>(i) * 3 * hw2;
    apply_plasma(img, hw2, hw, rng);
    if (rng.uniform() < p) apply_channel_shuffle(img, hw2, rng);
  }
  return out;
}

AugResult augment(const Tensor& batch, const std::vector<int>& labels, int num_classes,
                  AugPolicy policy, Rng& rng) {
  check_shape(batch, {-1, 3, -1, -1}, "augment");
  int n = batch.dim(0), h = batch.dim(2), w = batch.dim(3), hw2 = h * w;
  AugResult res;
  res.batch = batch;
  res.soft_labels = one_hot(labels, num_classes);

  switch (policy) {
    case AugPolicy::Standard: {
      const int pad = 4;
      for (int i = 0; i < n; ++i) {
        int oy = static_cast<int>(rng.below(2 * pad + 1)) - pad;
        int ox = static_cast<int>(rng.below(2 * pad + 1)) - pad;
        bool flip = rng.uniform() < 0.5f;
        const float* src = batch.ptr() + static_cast<std::size_t>(i) * 3 * hw2;
        float* dst = res.batch.ptr() + static_cast<std::size_t>(i) * 3 * hw2;
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
              int sx = flip ? w - 1 - x : x;
              dst[c * hw2 + y * w + x] =
                  src[c * hw2 + reflect(y + oy, h) * w + reflect(sx + ox, w)];
            }
      }
      break;
    }
    case AugPolicy::CutOut: {
      const int half = 4;  // 8x8 square
      for (int i = 0; i < n; ++i) {
        int cy = static_cast<int>(rng.below(static_cast<std::uint32_t>(h)));
        int cx = static_cast<int>(rng.below(static_cast<std::uint32_t>(w)));
        float* dst = res.batch.ptr() + static_cast<std::size_t>(i) * 3 * hw2;
        for (int c = 0; c < 3; ++c)
          for (int y = std::max(0, cy - half); y < std::min(h, cy + half); ++y)
            for (int x = std::max(0, cx - half); x < std::min(w, cx + half); ++x)
              dst[c * hw2 + y * w + x] = 0.0f;
      }
      break;
    }
    case AugPolicy::MixUp: {
      float lam = rng.uniform();  // Beta(1,1)
      std::vector<int> perm = rng.permutation(n);
      Tensor mixed = batch;
      for (int i = 0; i < n; ++i) {
        int j = perm[static_cast<std::size_t>(i)];
        const float* xa = batch.ptr() + static_cast<std::size_t>(i) * 3 * hw2;
        const float* xb = batch.ptr() + static_cast<std::size_t>(j) * 3 * hw2;
        float* dst = mixed.ptr() + static_cast<std::size_t>(i) * 3 * hw2;
        for (int p = 0; p < 3 * hw2; ++p) dst[p] = lam * xa[p] + (1 - lam) * xb[p];
        float* lab = res.soft_labels.ptr() + static_cast<std::size_t>(i) * num_classes;
        for (int c = 0; c < num_classes; ++c) lab[c] *= lam;
        lab[labels[static_cast<std::size_t>(j)]] += 1 - lam;
      }
      res.batch = std::move(mixed);
      break;
    }
    case AugPolicy::CutMix: {
      float lam = rng.uniform();
      std::vector<int> perm = rng.permutation(n);
      int rh = static_cast<int>(std::round(static_cast<float>(h) * std::sqrt(1 - lam)));
      int rw = static_cast<int>(std::round(static_cast<float>(w) * std::sqrt(1 - lam)));
      int cy = static_cast<int>(rng.below(static_cast<std::uint32_t>(h)));
      int cx = static_cast<int>(rng.below(static_cast<std::uint32_t>(w)));
      int y0 = std::clamp(cy - rh / 2, 0, h), y1 = std::clamp(cy + (rh + 1) / 2, 0, h);
      int x0 = std::clamp(cx - rw / 2, 0, w), x1 = std::clamp(cx + (rw + 1) / 2, 0, w);
      float area = static_cast<float>((y1 - y0) * (x1 - x0)) / static_cast<float>(hw2);
      for (int i = 0; i < n; ++i) {
        int j = perm[static_cast<std::size_t>(i)];
        const float* xb = batch.ptr() + static_cast<std::size_t>(j) * 3 * hw2;
        float* dst = res.batch.ptr() + static_cast<std::size_t>(i) * 3 * hw2;
        for (int c = 0; c < 3; ++c)
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
              dst[c * hw2 + y * w + x] = xb[c * hw2 + y * w + x];
        float* lab = res.soft_labels.ptr() + static_cast<std::size_t>(i) * num_classes;
        for (int c = 0; c < num_classes; ++c) lab[c] *= 1 - area;
        lab[labels[static_cast<std::size_t>(j)]] += area;
      }
      break;
    }
    case AugPolicy::Plasma: {
      for (int i = 0; i < n; ++i)
        apply_plasma(res.batch.ptr() + static_cast<std::size_t>(i) * 3 * hw2, hw2, h, rng);
      break;
    }
    case AugPolicy::ChannelShuffle: {
      for (int i = 0; i < n; ++i)
        if (rng.uniform() < 0.5f)
          apply_channel_shuffle(res.batch.ptr() + static_cast<std::size_t>(i) * 3 * hw2, hw2, rng);
      break;
    }
  }
  return res;
}

Tensor pgd_adversarial(const CnnModel& model, const Tensor& batch, const std::vector<int>& labels,
                       float eps, float alpha, int steps, Rng& rng) {
  if (eps <= 0.0f) throw std::invalid_argument("pgd_adversarial: eps must be positive");
  Tensor delta(batch.shape);
  for (float& v : delta.data) v = rng.uniform(-eps, eps);

  Tensor adv = batch;
  auto materialize = [&]() {
    for (std::size_t j = 0; j < adv.numel(); ++j)
      adv.data[j] = std::clamp(batch.data[j] + delta.data[j], 0.0f, 1.0f);
  };
  materialize();
  for (int s = 0; s < steps; ++s) {
    GradResult g = loss_and_grads(model, adv, labels, /*wrt_input=*/true);
    const Tensor& ig = *g.input_grads;
    for (std::size_t j = 0; j < delta.numel(); ++j) {
      float step = ig.data[j] > 0.0f ? alpha : (ig.data[j] < 0.0f ? -alpha : 0.0f);
      delta.data[j] = std::clamp(delta.data[j] + step, -eps, eps);
    }
    materialize();
  }
  return adv;
}

AugResult umax_select(const CnnModel& model, const Tensor& batch, const std::vector<int>& labels,
                      int num_classes, int k, float p, Rng& rng) {
  if (k < 1) throw std::invalid_argument("umax_select: k must be >= 1");
  int n = batch.dim(0);
  Tensor best = batch;
  std::vector<float> best_loss(static_cast<std::size_t>(n), -1.0f);
  std::size_t stride = batch.numel() / static_cast<std::size_t>(n);
  for (int rep = 0; rep < k; ++rep) {
    Tensor cand = ueraser_lite(batch, p, rng);
    Tensor logits = forward(model, cand);
    std::vector<float> losses = per_sample_loss(logits, labels);
    for (int i = 0; i < n; ++i) {
      if (losses[static_cast<std::size_t>(i)] > best_loss[static_cast<std::size_t>(i)]) {
        best_loss[static_cast<std::size_t>(i)] = losses[static_cast<std::size_t>(i)];
        std::copy_n(cand.ptr() + static_cast<std::size_t>(i) * stride, stride,
                    best.ptr() + static_cast<std::size_t>(i) * stride);
      }
    }
  }
  AugResult res;
  res.batch = std::move(best);
  res.soft_labels = one_hot(labels, num_classes);
  return res;
}

}  // namespace apf
