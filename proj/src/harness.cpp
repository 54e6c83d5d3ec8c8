#include "apforge/harness.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "apforge/archive.hpp"
#include "apforge/optim.hpp"
#include "apforge/rng.hpp"

namespace apf {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (lr_decay_every < 1) throw std::invalid_argument("train: lr_decay_every must be >= 1");
  if (lr < 0.0f) throw std::invalid_argument("train: lr must be >= 0");
}

float evaluate(const CnnModel& model, const LabeledDataset& testset) {
  int n = testset.size();
  if (n == 0) throw std::invalid_argument("evaluate: empty test set");
  int correct = 0;
  const int bs = 256;
  std::size_t stride = testset.images.numel() / static_cast<std::size_t>(n);
  for (int start = 0; start < n; start += bs) {
    int cnt = std::min(bs, n - start);
    Tensor batch({cnt, testset.images.dim(1), testset.images.dim(2), testset.images.dim(3)});
    std::copy_n(testset.images.ptr() + static_cast<std::size_t>(start) * stride,
                static_cast<std::size_t>(cnt) * stride, batch.ptr());
    Tensor logits = forward(model, batch);
    int c = logits.dim(1);
    for (int i = 0; i < cnt; ++i) {
      const float* z = logits.ptr() + static_cast<std::size_t>(i) * c;
      int best = 0;  // strict > keeps ties on the lower class index
      for (int j = 1; j < c; ++j)
        if (z[j] > z[best]) best = j;
      if (best == testset.labels[static_cast<std::size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(n);
}

namespace {

Tensor gather(const Tensor& images, const std::vector<int>& idx) {
  std::size_t stride = images.numel() / static_cast<std::size_t>(images.dim(0));
  Tensor out({static_cast<int>(idx.size()), images.dim(1), images.dim(2), images.dim(3)});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(images.ptr() + static_cast<std::size_t>(idx[i]) * stride, stride,
                out.ptr() + i * stride);
  return out;
}

Tensor preprocess(const Tensor& images, const DefenseConfig& d) {
  switch (d.kind) {
    case DefenseKind::Gray: return grayscale(images);
    case DefenseKind::JPEG: return jpeg_cycle(images, d.jpeg_quality);
    case DefenseKind::BDR: return bit_depth_reduce(images, d.bdr_bits);
    case DefenseKind::Gaussian: return gaussian_blur(images, d.gauss_kernel, d.gauss_sigma);
    default: return images;
  }
}

}  // namespace

TrainResult train_model(const LabeledDataset& train, const LabeledDataset& test,
                        const DefenseConfig& defense, const TrainConfig& cfg) {
  cfg.validate();
  defense.validate();
  int n = train.size();
  if (n < 1) throw std::invalid_argument("train_model: empty training set");

  LabeledDataset work = train;
  LabeledDataset eval_test = test;
  if (defense.is_preprocessing()) {
    // the transform is the model's input pipeline, so it applies at
    // inference as well as to the training set
    work.images = preprocess(train.images, defense);
    eval_test.images = preprocess(test.images, defense);
  }

  CnnArch arch;
  arch.in_hw = work.hw();
  arch.num_classes = work.num_classes;
  Rng root = Rng(cfg.seed).derive(0x747261696eull);
  CnnModel model = CnnModel::init(arch, root.derive(1).state);
  SgdState sgd = SgdState::init(model, cfg.lr, cfg.momentum, cfg.weight_decay);
  Rng shuffle_rng = root.derive(2);
  Rng defense_rng = Rng(defense.seed).derive(0x646566ull);

  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;

  TrainResult res{CnnModel::zeros(arch), {}};
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (epoch > 0 && epoch % cfg.lr_decay_every == 0) sgd.lr *= cfg.lr_decay_factor;
    std::vector<int> order = all;
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
      Tensor x = gather(work.images, idx);
      std::vector<int> y(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i)
        y[i] = work.labels[static_cast<std::size_t>(idx[i])];

      GradResult g;
      switch (defense.kind) {
        case DefenseKind::None:
          g = loss_and_grads(model, x, y);
          break;
        case DefenseKind::Standard:
        case DefenseKind::Gray:
        case DefenseKind::JPEG:
        case DefenseKind::BDR:
        case DefenseKind::Gaussian: {
          AugResult a = augment(x, y, work.num_classes, AugPolicy::Standard, defense_rng);
          g = loss_and_grads(model, a.batch, y);
          break;
        }
        case DefenseKind::CutOut:
        case DefenseKind::MixUp:
        case DefenseKind::CutMix: {
          AugResult a = augment(x, y, work.num_classes, AugPolicy::Standard, defense_rng);
          AugPolicy p = defense.kind == DefenseKind::CutOut  ? AugPolicy::CutOut
                        : defense.kind == DefenseKind::MixUp ? AugPolicy::MixUp
                                                             : AugPolicy::CutMix;
          AugResult b = augment(a.batch, y, work.num_classes, p, defense_rng);
          g = loss_and_grads_soft(model, b.batch, b.soft_labels);
          break;
        }
        case DefenseKind::ULite: {
          Tensor xb = ueraser_lite(x, defense.aug_prob, defense_rng);
          g = loss_and_grads(model, xb, y);
          break;
        }
        case DefenseKind::UMax: {
          AugResult a = umax_select(model, x, y, work.num_classes, defense.umax_k,
                                    defense.aug_prob, defense_rng);
          g = loss_and_grads(model, a.batch, y);
          break;
        }
        case DefenseKind::AT: {
          Tensor xb = pgd_adversarial(model, x, y, defense.at_eps, defense.at_alpha,
                                      defense.at_steps, defense_rng);
          g = loss_and_grads(model, xb, y);
          break;
        }
      }
      clip_grad_norm(g.param_grads, 1.0f);
      sgd_step(model, g.param_grads, sgd);
      loss_sum += g.loss;
      ++batches;
    }
    EpochStats st;
    st.train_loss = static_cast<float>(loss_sum / std::max(1, batches));
    st.train_acc = evaluate(model, work);
    st.test_acc = evaluate(model, eval_test);
    res.history.push_back(st);
  }
  res.model = std::move(model);
  return res;
}

std::string cache_key(const AttackConfig& cfg, const std::string& data_tag) {
  std::string s = cfg.canonical() + "|" + data_tag;
  std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  std::ostringstream os;
  os << attack_name(cfg.attack) << "-" << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace {

PerturbationSet cached_generate(const LabeledDataset& train, const AttackConfig& cfg,
                                const std::string& data_tag, const std::string& cache_dir) {
  if (cache_dir.empty()) return generate(train, cfg);
  namespace fs = std::filesystem;
  fs::create_directories(cache_dir);
  std::string path = (fs::path(cache_dir) / (cache_key(cfg, data_tag) + ".apbt")).string();
  if (fs::exists(path)) {
    try {
      PerturbationSet p = load_perturbations(path);
      if (p.deltas.shape == train.images.shape) return p;
    } catch (const std::exception& e) {
      std::cerr << "cache integrity failure, regenerating: " << e.what() << "\n";
    }
  }
  PerturbationSet p = generate(train, cfg);
  save_perturbations(p, path);
  return p;
}

std::string fmt4(float v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

}  // namespace

ExperimentRecord run_experiment(const LabeledDataset& train, const LabeledDataset& test,
                                const std::string& data_tag, const ExperimentSpec& spec,
                                const std::string& cache_dir) {
  auto t0 = std::chrono::steady_clock::now();
  ExperimentRecord rec;
  rec.attack_name = spec.attack ? attack_name(spec.attack->attack) : "none";
  rec.defense_name = defense_name(spec.defense.kind);
  rec.ratio = spec.attack ? spec.ratio : 1.0f;
  rec.seed = spec.train.seed;
  rec.epochs = spec.train.epochs;

  const LabeledDataset* train_set = &train;
  LabeledDataset poisoned_holder;
  if (spec.attack) {
    PerturbationSet pert = cached_generate(train, *spec.attack, data_tag, cache_dir);
    rec.eps_used = pert.eps;
    PoisonedDataset poi = apply_poison(train, pert, spec.ratio, spec.train.seed);
    poisoned_holder = std::move(poi.data);
    train_set = &poisoned_holder;
  }

  TrainResult tr = train_model(*train_set, test, spec.defense, spec.train);
  rec.history = tr.history;
  rec.clean_test_acc = tr.history.back().test_acc;
  rec.poisoned_train_acc = tr.history.back().train_acc;
  rec.wall_seconds = std::chrono::duration<float>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

std::vector<ExperimentRecord> sweep(const LabeledDataset& train, const LabeledDataset& test,
                                    const std::string& data_tag, const SweepGrid& grid,
                                    const std::string& cache_dir) {
  if (grid.attacks.empty() || grid.defenses.empty() || grid.ratios.empty())
    throw std::invalid_argument("sweep: empty grid");
  std::vector<ExperimentRecord> out;
  for (const auto& atk : grid.attacks)
    for (const auto& def : grid.defenses)
      for (float ratio : grid.ratios) {
        ExperimentSpec spec{atk, def, ratio, grid.train};
        try {
          out.push_back(run_experiment(train, test, data_tag, spec, cache_dir));
        } catch (const std::exception& e) {
          std::cerr << "sweep: run failed (" << (atk ? attack_name(atk->attack) : "none") << "/"
                    << defense_name(def.kind) << "/" << ratio << "): " << e.what() << "\n";
          ExperimentRecord rec;
          rec.attack_name = atk ? attack_name(atk->attack) : "none";
          rec.defense_name = defense_name(def.kind) + ":failed";
          rec.ratio = ratio;
          rec.seed = grid.train.seed;
          out.push_back(rec);
        }
      }
  return out;
}

void emit_report(const std::vector<ExperimentRecord>& records, const std::string& out_dir) {
  if (records.empty()) throw std::invalid_argument("emit_report: no records");
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir))
    throw std::runtime_error("emit_report: cannot create directory " + out_dir);

  {
    std::ofstream csv(fs::path(out_dir) / "results.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("emit_report: cannot write results.csv");
    csv << "attack,defense,ratio,eps,clean_test_acc,poisoned_train_acc,epochs,seed,wall_seconds\n";
    for (const auto& r : records)
      csv << r.attack_name << "," << r.defense_name << "," << fmt4(r.ratio) << ","
          << fmt4(r.eps_used) << "," << fmt4(r.clean_test_acc) << ","
          << fmt4(r.poisoned_train_acc) << "," << r.epochs << "," << r.seed << ","
          << fmt4(r.wall_seconds) << "\n";
  }
  {
    json arr = json::array();
    for (const auto& r : records) {
      json h = json::array();
      for (const auto& e : r.history)
        h.push_back({{"train_loss", e.train_loss},
                     {"train_acc", e.train_acc},
                     {"test_acc", e.test_acc}});
      arr.push_back({{"attack", r.attack_name},
                     {"defense", r.defense_name},
                     {"ratio", r.ratio},
                     {"eps", r.eps_used},
                     {"clean_test_acc", r.clean_test_acc},
                     {"poisoned_train_acc", r.poisoned_train_acc},
                     {"epochs", r.epochs},
                     {"seed", r.seed},
                     {"wall_seconds", r.wall_seconds},
                     {"history", h}});
    }
    std::ofstream js(fs::path(out_dir) / "results.json", std::ios::trunc);
    js << arr.dump(2) << "\n";
  }
  std::map<std::string, int> used;
  for (const auto& r : records) {
    std::string base = r.attack_name + "_" + r.defense_name;
    int k = used[base]++;
    std::string name = k == 0 ? base : base + "_" + std::to_string(k);
    std::ofstream dat(fs::path(out_dir) / (name + ".dat"), std::ios::trunc);
    for (std::size_t e = 0; e < r.history.size(); ++e)
      dat << e + 1 << " " << fmt4(r.history[e].train_acc) << " " << fmt4(r.history[e].test_acc)
          << "\n";
  }
}

std::vector<ExperimentRecord> load_records(const std::string& json_path) {
  std::ifstream is(json_path);
  if (!is) throw std::runtime_error("load_records: cannot open " + json_path);
  json arr = json::parse(is);
  std::vector<ExperimentRecord> out;
  for (const auto& j : arr) {
    ExperimentRecord r;
    r.attack_name = j.at("attack");
    r.defense_name = j.at("defense");
    r.ratio = j.at("ratio");
    r.eps_used = j.at("eps");
    r.clean_test_acc = j.at("clean_test_acc");
    r.poisoned_train_acc = j.at("poisoned_train_acc");
    r.epochs = j.at("epochs");
    r.seed = j.at("seed");
    r.wall_seconds = j.at("wall_seconds");
    for (const auto& e : j.at("history"))
      r.history.push_back({e.at("train_loss"), e.at("train_acc"), e.at("test_acc")});
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace apf
