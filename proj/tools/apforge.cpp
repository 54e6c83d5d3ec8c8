#include <CLI11.hpp>
#include <json.hpp>

#include "../tests/grad_check.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "apforge/archive.hpp"
#include "apforge/attacks.hpp"
#include "apforge/harness.hpp"
#include "apforge/optim.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream is(path);
  if (!is) throw std::invalid_argument("cannot open config: " + path);
  return json::parse(is);
}

void apply_override(json& cfg, const std::string& kv) {
  auto eq = kv.find('=');
  if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value: " + kv);
  std::string key = kv.substr(0, eq), val = kv.substr(eq + 1);
  json* node = &cfg;
  std::size_t pos = 0;
  while (true) {
    auto dot = key.find('.', pos);
    std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (dot == std::string::npos) {
      json parsed;
      try {
        parsed = json::parse(val);
      } catch (...) {
        parsed = val;  // bare string
      }
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

apf::AttackConfig attack_from_json(const json& j, const std::string& name) {
  apf::AttackConfig c = apf::AttackConfig::defaults(apf::attack_from_name(name),
                                                    j.value("seed", std::uint64_t{0}));
  if (j.contains("eps")) c.eps = j["eps"];
  c.pgd_steps = j.value("pgd_steps", c.pgd_steps);
  c.pgd_alpha = j.value("pgd_alpha", c.pgd_alpha);
  c.surrogate_epochs = j.value("surrogate_epochs", c.surrogate_epochs);
  c.outer_cap = j.value("outer_cap", c.outer_cap);
  c.stop_error = j.value("stop_error", c.stop_error);
  c.rem_adv_eps = j.value("rem_adv_eps", c.rem_adv_eps);
  c.rem_adv_steps = j.value("rem_adv_steps", c.rem_adv_steps);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.validate();
  return c;
}

apf::DefenseConfig defense_from_json(const json& j, const std::string& kind) {
  apf::DefenseConfig d;
  d.kind = apf::defense_from_name(kind);
  d.jpeg_quality = j.value("jpeg_quality", d.jpeg_quality);
  d.bdr_bits = j.value("bdr_bits", d.bdr_bits);
  d.gauss_kernel = j.value("gauss_kernel", d.gauss_kernel);
  d.gauss_sigma = j.value("gauss_sigma", d.gauss_sigma);
  d.at_eps = j.value("at_eps", d.at_eps);
  d.at_alpha = j.value("at_alpha", d.at_alpha);
  d.at_steps = j.value("at_steps", d.at_steps);
  d.umax_k = j.value("umax_k", d.umax_k);
  d.aug_prob = j.value("aug_prob", d.aug_prob);
  d.seed = j.value("seed", std::uint64_t{0});
  d.validate();
  return d;
}

apf::TrainConfig train_from_json(const json& j) {
  apf::TrainConfig t;
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.lr = j.value("lr", t.lr);
  t.momentum = j.value("momentum", t.momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.lr_decay_every = j.value("lr_decay_every", t.lr_decay_every);
  t.lr_decay_factor = j.value("lr_decay_factor", t.lr_decay_factor);
  t.seed = j.value("seed", std::uint64_t{0});
  t.validate();
  return t;
}

struct DataBundle {
  apf::LabeledDataset train, test;
  std::string tag;
};

DataBundle load_data(const json& cfg) {
  json d = cfg.value("dataset", json::object());
  std::string type = d.value("type", "synthetic");
  DataBundle b;
  if (type == "synthetic") {
    int num_classes = d.value("num_classes", 10);
    int per_class = d.value("per_class", 200);
    int hw = d.value("hw", 32);
    std::uint64_t seed = d.value("seed", std::uint64_t{42});
    auto [tr, te] = apf::gen_synthetic(num_classes, per_class, hw, seed);
    b.train = std::move(tr);
    b.test = std::move(te);
    b.tag = "synthetic-c" + std::to_string(num_classes) + "-n" + std::to_string(per_class) +
            "-hw" + std::to_string(hw) + "-s" + std::to_string(seed);
  } else if (type == "cifar10") {
    std::string path = d.at("path");
    b.train = apf::load_cifar10(path, "train");
    b.test = apf::load_cifar10(path, "test");
    b.tag = "cifar10";
  } else {
    throw std::invalid_argument("dataset.type must be synthetic or cifar10");
  }
  return b;
}

std::string resolve_cache(const std::string& out_dir) {
  if (const char* env = std::getenv("APFORGE_CACHE")) return env;
  return (fs::path(out_dir) / "cache").string();
}

// ---- selftest oracles ----

bool selftest() {
  bool ok = true;
  auto report = [&ok](const char* name, bool pass) {
    std::cout << (pass ? "PASS " : "FAIL ") << name << "\n";
    if (!pass) ok = false;
  };

  // gradient check on a tiny model against central finite differences
  {
    apf::CnnArch arch;
    arch.in_hw = 8;
    arch.widths = {4, 8, 8};
    arch.num_classes = 3;
    apf::CnnModel model = apf::CnnModel::init(arch, 7);
    apf::Rng rng(99);
    apf::Tensor batch({2, 3, 8, 8});
    for (float& v : batch.data) v = rng.uniform();
    std::vector<int> labels = {0, 2};
    auto r = apf_test::grad_check(model, batch, labels);
    report("gradient-check", r.max_rel <= 1e-3f && r.checked > 4 * r.skipped);
  }
  // AR recurrence vs direct oracle
  {
    auto [tr, te] = apf::gen_synthetic(3, 4, 8, 5);
    apf::AttackConfig cfg = apf::AttackConfig::defaults(apf::AttackKind::AR, 5);
    apf::PerturbationSet p = apf::ar_generate(tr, cfg);
    bool pass = true;
    for (int i = 0; i < tr.size(); ++i) {
      float n = 0;
      const float* d = p.deltas.ptr() + static_cast<std::size_t>(i) * 3 * 64;
      for (int j = 0; j < 3 * 64; ++j) n += d[j] * d[j];
      if (std::fabs(std::sqrt(n) - cfg.eps) > 1e-4f) pass = false;
    }
    report("ar-norm", pass);
  }
  // OPS brute force on an 8x8 toy set
  {
    apf::LabeledDataset toy;
    toy.images = apf::Tensor({2, 3, 8, 8});
    toy.images.fill(0.5f);
    for (int i = 0; i < 2; ++i)
      for (int c = 0; c < 3; ++c)
        toy.images[static_cast<std::size_t>(i) * 192 + static_cast<std::size_t>(c) * 64 + 2 * 8 + 3] = 0.9f;
    toy.labels = {0, 0};
    toy.num_classes = 1;
    apf::AttackConfig cfg = apf::AttackConfig::defaults(apf::AttackKind::OPS, 0);
    apf::PerturbationSet p = apf::ops_generate(toy, cfg);
    bool pass = true;
    for (int i = 0; i < 2; ++i)
      for (int c = 0; c < 3; ++c)
        for (int j = 0; j < 64; ++j) {
          float d = p.deltas[static_cast<std::size_t>(i) * 192 + static_cast<std::size_t>(c) * 64 + j];
          float expect = (j == 2 * 8 + 3) ? 0.1f : 0.0f;
          if (std::fabs(d - expect) > 1e-6f) pass = false;
        }
    report("ops-search", pass);
  }
  // projection idempotence
  {
    apf::Rng rng(3);
    apf::Tensor d({64});
    for (float& v : d.data) v = rng.uniform(-1.0f, 1.0f);
    bool pass = true;
    for (auto [norm, eps] : {std::pair{apf::Norm::Linf, 0.1f}, {apf::Norm::L2, 1.0f},
                             {apf::Norm::L0, 5.0f}}) {
      apf::Tensor once = apf::project_lp(d, norm, eps);
      apf::Tensor twice = apf::project_lp(once, norm, eps);
      if (once.data != twice.data) pass = false;
    }
    report("projection-idempotence", pass);
  }
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"apforge: availability-poisoning attack/defense benchmark"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed_override;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--set", overrides, "override config entries, key=value (repeatable)");
  app.add_option("--seed", seed_override, "override all seeds");

  auto* cmd_poison = app.add_subcommand("poison", "generate a perturbation archive");
  auto* cmd_train = app.add_subcommand("train", "run a single experiment");
  auto* cmd_eval = app.add_subcommand("eval", "alias of train");
  auto* cmd_sweep = app.add_subcommand("sweep", "run a config grid");
  auto* cmd_report = app.add_subcommand("report", "re-emit report files from results.json");
  auto* cmd_selftest = app.add_subcommand("selftest", "run the built-in oracle suite");
  for (auto* c : {cmd_poison, cmd_train, cmd_eval, cmd_sweep, cmd_report, cmd_selftest})
    c->fallthrough();  // allow --config/--out/--set after the subcommand too

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (cmd_selftest->parsed()) return selftest() ? 0 : 2;

    json cfg = load_config(config_path);
    for (const std::string& kv : overrides) apply_override(cfg, kv);
    if (seed_override) {
      cfg["dataset"]["seed"] = *seed_override;
      cfg["attack"]["seed"] = *seed_override;
      cfg["defense"]["seed"] = *seed_override;
      cfg["train"]["seed"] = *seed_override;
    }

    if (cmd_report->parsed()) {
      auto records = apf::load_records((fs::path(out_dir) / "results.json").string());
      apf::emit_report(records, out_dir);
      std::cout << "report: " << records.size() << " records -> " << out_dir << "\n";
      return 0;
    }

    DataBundle data = load_data(cfg);
    std::string cache_dir = resolve_cache(out_dir);

    if (cmd_poison->parsed()) {
      json aj = cfg.value("attack", json::object());
      if (!aj.contains("name")) throw std::invalid_argument("poison: attack.name required");
      apf::AttackConfig acfg = attack_from_json(aj, aj["name"]);
      fs::create_directories(out_dir);
      std::string key = apf::cache_key(acfg, data.tag);
      std::string cached = (fs::path(cache_dir) / (key + ".apbt")).string();
      apf::PerturbationSet pert;
      bool hit = false;
      if (fs::exists(cached)) {
        try {
          pert = apf::load_perturbations(cached);
          hit = pert.deltas.shape == data.train.images.shape;
        } catch (const std::exception&) {
        }
      }
      if (!hit) {
        pert = apf::generate(data.train, acfg);
        fs::create_directories(cache_dir);
        apf::save_perturbations(pert, cached);
      }
      std::string out = (fs::path(out_dir) / (apf::attack_name(acfg.attack) + ".apbt")).string();
      apf::save_perturbations(pert, out);
      std::cout << "poison: " << out << (hit ? " (cache hit)" : "") << "\n";
      return 0;
    }

    if (cmd_train->parsed() || cmd_eval->parsed()) {
      apf::ExperimentSpec spec;
      json aj = cfg.value("attack", json::object());
      if (aj.contains("name") && aj["name"] != "none")
        spec.attack = attack_from_json(aj, aj["name"]);
      json dj = cfg.value("defense", json::object());
      spec.defense = defense_from_json(dj, dj.value("kind", "none"));
      spec.ratio = cfg.value("ratio", 1.0f);
      spec.train = train_from_json(cfg.value("train", json::object()));
      apf::ExperimentRecord rec =
          apf::run_experiment(data.train, data.test, data.tag, spec, cache_dir);
      apf::emit_report({rec}, out_dir);
      std::cout << rec.attack_name << "/" << rec.defense_name << " ratio " << rec.ratio
                << ": clean test acc " << rec.clean_test_acc << "\n";
      return 0;
    }

    if (cmd_sweep->parsed()) {
      json sj = cfg.value("sweep", json::object());
      apf::SweepGrid grid;
      json aj = cfg.value("attack", json::object());
      json dj = cfg.value("defense", json::object());
      for (const auto& name : sj.value("attacks", json::array({"none"}))) {
        if (name == "none")
          grid.attacks.push_back(std::nullopt);
        else
          grid.attacks.push_back(attack_from_json(aj, name));
      }
      for (const auto& kind : sj.value("defenses", json::array({"none"})))
        grid.defenses.push_back(defense_from_json(dj, kind));
      for (const auto& r : sj.value("ratios", json::array({1.0})))
        grid.ratios.push_back(r.get<float>());
      grid.train = train_from_json(cfg.value("train", json::object()));
      auto records = apf::sweep(data.train, data.test, data.tag, grid, cache_dir);
      apf::emit_report(records, out_dir);
      std::cout << "sweep: " << records.size() << " experiments -> " << out_dir << "\n";
      return 0;
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
