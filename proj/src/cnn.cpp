#include "apforge/cnn.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <sstream>

#include "apforge/rng.hpp"

namespace apf {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using CMapRM = Eigen::Map<const RowMat>;

// 3x3 kernel, pad 1, stride 1. col is (C*9) x (H*W).
void im2col(const float* im, int C, int H, int W, RowMat& col) {
  for (int c = 0; c < C; ++c) {
    const float* plane = im + static_cast<std::ptrdiff_t>(c) * H * W;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        float* row = col.row(c * 9 + ky * 3 + kx).data();
        for (int y = 0; y < H; ++y) {
          int sy = y + ky - 1;
          float* dst = row + static_cast<std::ptrdiff_t>(y) * W;
          if (sy < 0 || sy >= H) {
            std::memset(dst, 0, sizeof(float) * static_cast<std::size_t>(W));
            continue;
          }
          const float* src = plane + static_cast<std::ptrdiff_t>(sy) * W;
          int x0 = (kx == 0) ? 1 : 0;
          int x1 = (kx == 2) ? W - 1 : W;
          if (kx == 0) dst[0] = 0.0f;
          if (kx == 2) dst[W - 1] = 0.0f;
          std::memcpy(dst + x0, src + x0 + kx - 1,
                      sizeof(float) * static_cast<std::size_t>(x1 - x0));
        }
      }
    }
  }
}

void col2im(const RowMat& dcol, int C, int H, int W, float* dim) {
  for (int c = 0; c < C; ++c) {
    float* plane = dim + static_cast<std::ptrdiff_t>(c) * H * W;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const float* row = dcol.row(c * 9 + ky * 3 + kx).data();
        for (int y = 0; y < H; ++y) {
          int sy = y + ky - 1;
          if (sy < 0 || sy >= H) continue;
          float* dst = plane + static_cast<std::ptrdiff_t>(sy) * W;
          const float* src = row + static_cast<std::ptrdiff_t>(y) * W;
          int x0 = (kx == 0) ? 1 : 0;
          int x1 = (kx == 2) ? W - 1 : W;
          for (int x = x0; x < x1; ++x) dst[x + kx - 1] += src[x];
        }
      }
    }
  }
}

// 2x2 max-pool, stride 2; argmax offset in {0,1,2,3}, ties to the
// first scanned position.
void maxpool(const float* in, int C, int H, int W, float* out, uint8_t* idx) {
  int Ho = H / 2, Wo = W / 2;
  for (int c = 0; c < C; ++c) {
    const float* plane = in + static_cast<std::ptrdiff_t>(c) * H * W;
    float* oplane = out + static_cast<std::ptrdiff_t>(c) * Ho * Wo;
    uint8_t* iplane = idx + static_cast<std::ptrdiff_t>(c) * Ho * Wo;
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        const float* w0 = plane + static_cast<std::ptrdiff_t>(2 * y) * W + 2 * x;
        float best = w0[0];
        uint8_t bi = 0;
        if (w0[1] > best) { best = w0[1]; bi = 1; }
        if (w0[W] > best) { best = w0[W]; bi = 2; }
        if (w0[W + 1] > best) { best = w0[W + 1]; bi = 3; }
        oplane[y * Wo + x] = best;
        iplane[y * Wo + x] = bi;
      }
    }
  }
}

void maxpool_backward(const float* dout, const uint8_t* idx, int C, int H, int W, float* din) {
  int Ho = H / 2, Wo = W / 2;
  std::memset(din, 0, sizeof(float) * static_cast<std::size_t>(C) * H * W);
  for (int c = 0; c < C; ++c) {
    float* plane = din + static_cast<std::ptrdiff_t>(c) * H * W;
    const float* oplane = dout + static_cast<std::ptrdiff_t>(c) * Ho * Wo;
    const uint8_t* iplane = idx + static_cast<std::ptrdiff_t>(c) * Ho * Wo;
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x) {
        uint8_t bi = iplane[y * Wo + x];
        int dy = bi >> 1, dx = bi & 1;
        plane[(2 * y + dy) * W + 2 * x + dx] += oplane[y * Wo + x];
      }
    }
  }
}

struct LayerBuf {
  Tensor act;                // post-ReLU conv output (N,C,H,W)
  Tensor pooled;             // (N,C,H/2,W/2)
  std::vector<uint8_t> idx;  // pool argmax offsets
};

struct Tape {
  int n = 0;
  Tensor centered;  // input shifted to zero mean; see run_forward
  std::array<LayerBuf, 3> layers;
  Tensor logits;
};

struct Dims {
  int cin, cout, hw;  // conv input channels/size
};

std::array<Dims, 3> layer_dims(const CnnArch& a) {
  return {Dims{a.in_channels, a.widths[0], a.in_hw},
          Dims{a.widths[0], a.widths[1], a.in_hw / 2},
          Dims{a.widths[1], a.widths[2], a.in_hw / 4}};
}

void run_forward(const CnnModel& model, const Tensor& batch, Tape& tape) {
  const CnnArch& a = model.arch;
  check_shape(batch, {-1, a.in_channels, a.in_hw, a.in_hw}, "forward batch");
  int n = batch.dim(0);
  if (n < 1) throw std::invalid_argument("forward: empty batch");
  tape.n = n;

  // center pixels around zero: all-positive inputs couple the first-layer
  // weight gradients and stall low-contrast training
  tape.centered = batch;
  for (float& v : tape.centered.data) v -= 0.5f;

  auto dims = layer_dims(a);
  const Tensor* cur = &tape.centered;
  for (int l = 0; l < 3; ++l) {
    auto [cin, cout, hw] = dims[static_cast<std::size_t>(l)];
    int p = hw * hw, k = cin * 9, hwo = hw / 2;
    LayerBuf& buf = tape.layers[static_cast<std::size_t>(l)];
    buf.act = Tensor({n, cout, hw, hw});
    buf.pooled = Tensor({n, cout, hwo, hwo});
    buf.idx.assign(static_cast<std::size_t>(n) * cout * hwo * hwo, 0);

    CMapRM wmat(model.params[static_cast<std::size_t>(2 * l)].ptr(), cout, k);
    const float* bias = model.params[static_cast<std::size_t>(2 * l + 1)].ptr();
    RowMat col(k, p);
    for (int i = 0; i < n; ++i) {
      im2col(cur->ptr() + static_cast<std::ptrdiff_t>(i) * cin * p, cin, hw, hw, col);
      MapRM out(buf.act.ptr() + static_cast<std::ptrdiff_t>(i) * cout * p, cout, p);
      out.noalias() = wmat * col;
      for (int c = 0; c < cout; ++c) out.row(c).array() += bias[c];
      out = out.cwiseMax(0.0f);
      maxpool(out.data(), cout, hw, hw,
              buf.pooled.ptr() + static_cast<std::ptrdiff_t>(i) * cout * hwo * hwo,
              buf.idx.data() + static_cast<std::ptrdiff_t>(i) * cout * hwo * hwo);
    }
    cur = &buf.pooled;
  }

  int d = a.fc_in();
  tape.logits = Tensor({n, a.num_classes});
  CMapRM fcw(model.params[6].ptr(), a.num_classes, d);
  const float* fcb = model.params[7].ptr();
  CMapRM feat(cur->ptr(), n, d);
  MapRM lg(tape.logits.ptr(), n, a.num_classes);
  lg.noalias() = feat * fcw.transpose();
  for (int c = 0; c < a.num_classes; ++c) lg.col(c).array() += fcb[c];
}

// Softmax + cross-entropy against a dense target distribution.
// Returns mean loss; writes (softmax - target)/N into dlogits.
float softmax_ce(const Tensor& logits, const float* targets, Tensor& dlogits) {
  int n = logits.dim(0), c = logits.dim(1);
  dlogits = Tensor({n, c});
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const float* z = logits.ptr() + static_cast<std::ptrdiff_t>(i) * c;
    const float* t = targets + static_cast<std::ptrdiff_t>(i) * c;
    float* dz = dlogits.ptr() + static_cast<std::ptrdiff_t>(i) * c;
    float m = z[0];
    for (int j = 1; j < c; ++j) m = std::max(m, z[j]);
    float sum = 0.0f;
    for (int j = 0; j < c; ++j) sum += std::exp(z[j] - m);
    float logsum = std::log(sum);
    float inv_n = 1.0f / static_cast<float>(n);
    for (int j = 0; j < c; ++j) {
      float logp = z[j] - m - logsum;
      if (t[j] != 0.0f) total -= static_cast<double>(t[j]) * logp;
      dz[j] = (std::exp(logp) - t[j]) * inv_n;
    }
  }
  return static_cast<float>(total / n);
}

GradResult backward(const CnnModel& model, const Tensor& batch, const Tape& tape,
                    const Tensor& dlogits, bool wrt_input) {
  const CnnArch& a = model.arch;
  int n = tape.n, d = a.fc_in();
  GradResult res;
  res.param_grads.resize(8);
  for (std::size_t i = 0; i < 8; ++i)
    res.param_grads[i] = Tensor(model.params[i].shape);

  // FC
  CMapRM dlg(dlogits.ptr(), n, a.num_classes);
  CMapRM feat(tape.layers[2].pooled.ptr(), n, d);
  CMapRM fcw(model.params[6].ptr(), a.num_classes, d);
  MapRM dfcw(res.param_grads[6].ptr(), a.num_classes, d);
  dfcw.noalias() = dlg.transpose() * feat;
  // scalar reductions: Eigen's vectorized sums peel to buffer alignment,
  // which would make the bias gradients depend on heap layout
  float* dfcb = res.param_grads[7].ptr();
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < a.num_classes; ++c)
      dfcb[c] += dlogits[static_cast<std::size_t>(i) * a.num_classes + c];
  Tensor dfeat_t({n, d});
  MapRM dfeat(dfeat_t.ptr(), n, d);
  dfeat.noalias() = dlg * fcw;

  auto dims = layer_dims(a);
  Tensor dpooled = std::move(dfeat_t);  // gradient w.r.t. layer-l pooled output
  for (int l = 2; l >= 0; --l) {
    auto [cin, cout, hw] = dims[static_cast<std::size_t>(l)];
    int p = hw * hw, k = cin * 9;
    const LayerBuf& buf = tape.layers[static_cast<std::size_t>(l)];
    const Tensor& input =
        (l == 0) ? tape.centered : tape.layers[static_cast<std::size_t>(l - 1)].pooled;
    bool need_dinput = (l > 0) || wrt_input;

    CMapRM wmat(model.params[static_cast<std::size_t>(2 * l)].ptr(), cout, k);
    MapRM dwmat(res.param_grads[static_cast<std::size_t>(2 * l)].ptr(), cout, k);
    float* dbias = res.param_grads[static_cast<std::size_t>(2 * l + 1)].ptr();

    Tensor dinput;
    if (need_dinput) dinput = Tensor(input.shape);

    RowMat col(k, p), dcol(k, p);
    Tensor dact({cout, hw, hw});
    for (int i = 0; i < n; ++i) {
      // pool backward then ReLU mask
      maxpool_backward(dpooled.ptr() + static_cast<std::ptrdiff_t>(i) * cout * (p / 4),
                       buf.idx.data() + static_cast<std::ptrdiff_t>(i) * cout * (p / 4),
                       cout, hw, hw, dact.ptr());
      const float* act = buf.act.ptr() + static_cast<std::ptrdiff_t>(i) * cout * p;
      for (int j = 0; j < cout * p; ++j)
        if (act[j] <= 0.0f) dact[static_cast<std::size_t>(j)] = 0.0f;

      im2col(input.ptr() + static_cast<std::ptrdiff_t>(i) * cin * p, cin, hw, hw, col);
      CMapRM dm(dact.ptr(), cout, p);
      dwmat.noalias() += dm * col.transpose();
      for (int c = 0; c < cout; ++c) {
        const float* row = dact.ptr() + static_cast<std::ptrdiff_t>(c) * p;
        float s = 0.0f;  // fixed-order scalar sum, see note above
        for (int j = 0; j < p; ++j) s += row[j];
        dbias[c] += s;
      }
      if (need_dinput) {
        dcol.noalias() = wmat.transpose() * dm;
        col2im(dcol, cin, hw, hw,
               dinput.ptr() + static_cast<std::ptrdiff_t>(i) * cin * p);
      }
    }
    if (l > 0)
      dpooled = std::move(dinput);
    else if (wrt_input)
      res.input_grads = std::move(dinput);
  }
  return res;
}

Tensor targets_from_labels(const std::vector<int>& labels, int n, int c) {
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("labels: length does not match batch");
  Tensor t({n, c});
  for (int i = 0; i < n; ++i) {
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) {
      std::ostringstream os;
      os << "label " << y << " at index " << i << " out of range [0," << c << ")";
      throw std::invalid_argument(os.str());
    }
    t[static_cast<std::size_t>(i) * c + static_cast<std::size_t>(y)] = 1.0f;
  }
  return t;
}

}  // namespace

CnnModel CnnModel::init(const CnnArch& arch, std::uint64_t seed) {
  if (arch.in_hw % 8 != 0 || arch.in_hw < 8)
    throw std::invalid_argument("CnnModel: input size must be a multiple of 8");
  CnnModel m;
  m.arch = arch;
  Rng rng = Rng(seed).derive(0x6d6f64656cull);
  auto he = [&rng](Tensor& t, int fan_in) {
    float std = std::sqrt(2.0f / static_cast<float>(fan_in));
    for (float& v : t.data) v = rng.normal() * std;
  };
  int cin = arch.in_channels;
  for (int l = 0; l < 3; ++l) {
    int cout = arch.widths[static_cast<std::size_t>(l)];
    Tensor w({cout, cin, 3, 3});
    he(w, cin * 9);
    m.params.push_back(std::move(w));
    m.params.push_back(Tensor({cout}));
    cin = cout;
  }
  Tensor fcw({arch.num_classes, arch.fc_in()});
  he(fcw, arch.fc_in());
  m.params.push_back(std::move(fcw));
  m.params.push_back(Tensor({arch.num_classes}));
  return m;
}

CnnModel CnnModel::zeros(const CnnArch& arch) {
  CnnModel m = init(arch, 0);
  for (Tensor& p : m.params) p.fill(0.0f);
  return m;
}

std::vector<std::string> CnnModel::param_names() const {
  return {"conv1.w", "conv1.b", "conv2.w", "conv2.b", "conv3.w", "conv3.b", "fc.w", "fc.b"};
}

Tensor forward(const CnnModel& model, const Tensor& batch) {
  Tape tape;
  run_forward(model, batch, tape);
  return std::move(tape.logits);
}

GradResult loss_and_grads(const CnnModel& model, const Tensor& batch,
                          const std::vector<int>& labels, bool wrt_input) {
  Tape tape;
  run_forward(model, batch, tape);
  Tensor targets = targets_from_labels(labels, tape.n, model.arch.num_classes);
  Tensor dlogits;
  float loss = softmax_ce(tape.logits, targets.ptr(), dlogits);
  GradResult res = backward(model, batch, tape, dlogits, wrt_input);
  res.loss = loss;
  return res;
}

GradResult loss_and_grads_soft(const CnnModel& model, const Tensor& batch,
                               const Tensor& soft_labels, bool wrt_input) {
  Tape tape;
  run_forward(model, batch, tape);
  check_shape(soft_labels, {tape.n, model.arch.num_classes}, "soft labels");
  Tensor dlogits;
  float loss = softmax_ce(tape.logits, soft_labels.ptr(), dlogits);
  GradResult res = backward(model, batch, tape, dlogits, wrt_input);
  res.loss = loss;
  return res;
}

float batch_loss(const CnnModel& model, const Tensor& batch, const std::vector<int>& labels) {
  Tensor logits = forward(model, batch);
  std::vector<float> losses = per_sample_loss(logits, labels);
  double sum = 0.0;
  for (float v : losses) sum += v;
  return static_cast<float>(sum / static_cast<double>(losses.size()));
}

std::vector<float> per_sample_loss(const Tensor& logits, const std::vector<int>& labels) {
  int n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int>(labels.size()) != n)
    throw std::invalid_argument("per_sample_loss: labels length mismatch");
  std::vector<float> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float* z = logits.ptr() + static_cast<std::ptrdiff_t>(i) * c;
    int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw std::invalid_argument("per_sample_loss: label out of range");
    float m = z[0];
    for (int j = 1; j < c; ++j) m = std::max(m, z[j]);
    float sum = 0.0f;
    for (int j = 0; j < c; ++j) sum += std::exp(z[j] - m);
    out[static_cast<std::size_t>(i)] = std::log(sum) - (z[y] - m);
  }
  return out;
}

}  // namespace apf
