// SPDX-License-Identifier: Apache-2.0
#include "peftlab/experiment.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include "peftlab/error.hpp"
#include "peftlab/json_util.hpp"
#include "peftlab/rng.hpp"

namespace peftlab {

using nlohmann::json;

namespace {

constexpr std::uint64_t kDataStream = 0x64617461;
constexpr std::uint64_t kHostStream = 0x686f7374;
constexpr std::uint64_t kAdapterStream = 0x61647074;
constexpr std::uint64_t kTrainStreamTag = 0x747261696e32;

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (allowed.find(key) == allowed.end()) {
      throw ConfigError("config: unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

void write_json(const std::filesystem::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void echo_resolved_config(const ExperimentConfig& cfg) {
  write_json(std::filesystem::path(cfg.out_dir) / "resolved-config.json",
             resolved_config_json(cfg));
}

}  // namespace

RouterKind ExperimentConfig::resolved_router_kind() const {
  if (router_kind.has_value()) return *router_kind;
  return adapter_kind == AdapterKind::kTeamLora ? RouterKind::kShapleyInteraction
                                                : RouterKind::kLinearSoftmax;
}

AdapterConfig ExperimentConfig::adapter_config_for(Index d_in, Index d_out,
                                                   std::uint64_t adapter_seed) const {
  AdapterConfig a;
  a.kind = adapter_kind;
  a.d_in = d_in;
  a.d_out = d_out;
  a.rank = rank;
  a.experts = adapter_kind == AdapterKind::kLora ? 1 : experts;
  a.alpha = alpha;
  a.router_kind = resolved_router_kind();
  a.s_hidden = s_hidden;
  a.seed = adapter_seed;
  return a;
}

ExperimentConfig default_experiment_config() { return ExperimentConfig{}; }

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("config: " + std::string(e.what()));
  }

  ExperimentConfig cfg;
  reject_unknown_keys(j, {"seed", "out_dir", "host", "adapter", "dataset", "train", "bench",
                          "ablate", "analyze", "gradcheck"},
                      "top level");
  read_field(j, "seed", cfg.seed);
  read_field(j, "out_dir", cfg.out_dir);

  if (j.contains("host")) {
    const json& h = j["host"];
    reject_unknown_keys(h, {"dims", "activation", "adapter_layers"}, "host");
    read_field(h, "dims", cfg.host_dims);
    if (h.contains("activation")) {
      cfg.activation = activation_from_string(h.at("activation").get<std::string>());
    }
    read_field(h, "adapter_layers", cfg.adapter_layers);
  }
  if (j.contains("adapter")) {
    const json& a = j["adapter"];
    reject_unknown_keys(a, {"kind", "rank", "experts", "alpha", "router", "s_hidden"},
                        "adapter");
    if (a.contains("kind")) {
      cfg.adapter_kind = adapter_kind_from_string(a.at("kind").get<std::string>());
    }
    read_field(a, "rank", cfg.rank);
    read_field(a, "experts", cfg.experts);
    read_field(a, "alpha", cfg.alpha);
    if (a.contains("router")) {
      cfg.router_kind = router_kind_from_string(a.at("router").get<std::string>());
    }
    read_field(a, "s_hidden", cfg.s_hidden);
  }
  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    reject_unknown_keys(d, {"n_tasks", "n_per_task", "eval_per_task", "mode", "noise_std"},
                        "dataset");
    read_field(d, "n_tasks", cfg.n_tasks);
    read_field(d, "n_per_task", cfg.n_per_task);
    read_field(d, "eval_per_task", cfg.eval_per_task);
    if (d.contains("mode")) cfg.mode = task_mode_from_string(d.at("mode").get<std::string>());
    read_field(d, "noise_std", cfg.noise_std);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    reject_unknown_keys(t, {"lr", "steps", "batch_size", "optimizer", "beta1", "beta2",
                            "adam_eps", "loss", "eval_every"},
                        "train");
    read_field(t, "lr", cfg.train.lr);
    read_field(t, "steps", cfg.train.steps);
    read_field(t, "batch_size", cfg.train.batch_size);
    if (t.contains("optimizer")) {
      cfg.train.optimizer = optimizer_kind_from_string(t.at("optimizer").get<std::string>());
    }
    read_field(t, "beta1", cfg.train.beta1);
    read_field(t, "beta2", cfg.train.beta2);
    read_field(t, "adam_eps", cfg.train.adam_eps);
    if (t.contains("loss")) cfg.train.loss = loss_kind_from_string(t.at("loss").get<std::string>());
    read_field(t, "eval_every", cfg.train.eval_every);
  }
  if (j.contains("bench")) {
    const json& b = j["bench"];
    reject_unknown_keys(b, {"d", "batch", "trials", "warmup", "rank", "alpha",
                            "expert_counts"},
                        "bench");
    read_field(b, "d", cfg.bench.d);
    read_field(b, "batch", cfg.bench.batch);
    read_field(b, "trials", cfg.bench.trials);
    read_field(b, "warmup", cfg.bench.warmup);
    read_field(b, "rank", cfg.bench.rank);
    read_field(b, "alpha", cfg.bench.alpha);
    read_field(b, "expert_counts", cfg.bench.expert_counts);
  }
  if (j.contains("ablate")) {
    const json& a = j["ablate"];
    reject_unknown_keys(a, {"n_seeds"}, "ablate");
    read_field(a, "n_seeds", cfg.ablate_seeds);
  }
  if (j.contains("analyze")) {
    const json& a = j["analyze"];
    reject_unknown_keys(a, {"renormalize_solo", "shapley_samples", "shapley_expert",
                            "checkpoint"},
                        "analyze");
    read_field(a, "renormalize_solo", cfg.renormalize_solo);
    read_field(a, "shapley_samples", cfg.shapley_samples);
    read_field(a, "shapley_expert", cfg.shapley_expert);
    read_field(a, "checkpoint", cfg.checkpoint);
  }
  if (j.contains("gradcheck")) {
    const json& g = j["gradcheck"];
    reject_unknown_keys(g, {"tolerance", "epsilon"}, "gradcheck");
    read_field(g, "tolerance", cfg.gradcheck_tol);
    read_field(g, "epsilon", cfg.gradcheck_eps);
  }
  return cfg;
}

json resolved_config_json(const ExperimentConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["host"] = {{"dims", cfg.host_dims},
               {"activation", to_string(cfg.activation)},
               {"adapter_layers", cfg.adapter_layers}};
  j["adapter"] = {{"kind", to_string(cfg.adapter_kind)},
                  {"rank", cfg.rank},
                  {"experts", cfg.experts},
                  {"alpha", cfg.alpha},
                  {"router", to_string(cfg.resolved_router_kind())},
                  {"s_hidden", cfg.s_hidden}};
  j["dataset"] = {{"n_tasks", cfg.n_tasks},
                  {"n_per_task", cfg.n_per_task},
                  {"eval_per_task", cfg.eval_per_task},
                  {"mode", to_string(cfg.mode)},
                  {"noise_std", cfg.noise_std}};
  j["train"] = {{"lr", cfg.train.lr},
                {"steps", cfg.train.steps},
                {"batch_size", cfg.train.batch_size},
                {"optimizer", to_string(cfg.train.optimizer)},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"adam_eps", cfg.train.adam_eps},
                {"loss", to_string(cfg.train.loss)},
                {"eval_every", cfg.train.eval_every}};
  j["bench"] = {{"d", cfg.bench.d},
                {"batch", cfg.bench.batch},
                {"trials", cfg.bench.trials},
                {"warmup", cfg.bench.warmup},
                {"rank", cfg.bench.rank},
                {"alpha", cfg.bench.alpha},
                {"expert_counts", cfg.bench.expert_counts}};
  j["ablate"] = {{"n_seeds", cfg.ablate_seeds}};
  j["analyze"] = {{"renormalize_solo", cfg.renormalize_solo},
                  {"shapley_samples", cfg.shapley_samples},
                  {"shapley_expert", cfg.shapley_expert},
                  {"checkpoint", cfg.checkpoint}};
  j["gradcheck"] = {{"tolerance", cfg.gradcheck_tol}, {"epsilon", cfg.gradcheck_eps}};
  return j;
}

Experiment build_experiment(const ExperimentConfig& cfg) {
  Experiment exp;
  exp.cfg = cfg;
  const std::vector<Index> data_dims = {cfg.host_dims.front(), cfg.host_dims.back()};
  const std::uint64_t data_seed = mix_seed(cfg.seed, kDataStream);
  exp.train_data = gen_multitask(cfg.n_tasks, cfg.n_per_task, data_dims, data_seed, cfg.mode,
                                 "train", cfg.noise_std);
  exp.eval_data = gen_multitask(cfg.n_tasks, cfg.eval_per_task, data_dims, data_seed,
                                cfg.mode, "eval", cfg.noise_std);
  exp.host = std::make_unique<FrozenHost>(cfg.host_dims, mix_seed(cfg.seed, kHostStream),
                                          cfg.activation);
  for (Index layer : cfg.adapter_layers) {
    const AdapterConfig a = cfg.adapter_config_for(
        0, 0, mix_seed(mix_seed(cfg.seed, kAdapterStream), static_cast<std::uint64_t>(layer)));
    exp.host->attach_adapter(layer, a);
  }
  return exp;
}

// ---------------------------------------------------------------------------
// Gradcheck suite
// ---------------------------------------------------------------------------

namespace {

struct SuiteSpec {
  std::string label;
  bool host_case = false;
  AdapterConfig adapter;
};

std::vector<SuiteSpec> gradcheck_suite_specs() {
  std::vector<SuiteSpec> specs;
  auto adapter_case = [&specs](AdapterKind kind, RouterKind router, Index k, Index r,
                               std::uint64_t seed) {
    AdapterConfig a;
    a.kind = kind;
    a.router_kind = router;
    a.d_in = 6;
    a.d_out = 5;
    a.rank = r;
    a.experts = k;
    a.alpha = 2.0 * static_cast<double>(r);
    a.seed = seed;
    std::string label = to_string(kind) + "-k" + std::to_string(k) + "-r" + std::to_string(r);
    if (kind != AdapterKind::kLora) label += "-" + to_string(router);
    specs.push_back({label, false, a});
  };
  const RouterKind lin = RouterKind::kLinearSoftmax;
  const RouterKind shap = RouterKind::kShapleyInteraction;
  adapter_case(AdapterKind::kLora, lin, 1, 1, 11);
  adapter_case(AdapterKind::kLora, lin, 1, 4, 12);
  adapter_case(AdapterKind::kLora, lin, 1, 8, 13);
  adapter_case(AdapterKind::kMoELora, lin, 1, 4, 21);
  adapter_case(AdapterKind::kMoELora, lin, 2, 4, 22);
  adapter_case(AdapterKind::kMoELora, lin, 4, 1, 23);
  adapter_case(AdapterKind::kMoELora, lin, 4, 8, 24);
  adapter_case(AdapterKind::kMoELora, lin, 8, 4, 25);
  adapter_case(AdapterKind::kMoELora, shap, 2, 4, 26);
  adapter_case(AdapterKind::kTeamLora, shap, 1, 4, 31);
  adapter_case(AdapterKind::kTeamLora, shap, 2, 1, 32);
  adapter_case(AdapterKind::kTeamLora, shap, 2, 8, 33);
  adapter_case(AdapterKind::kTeamLora, shap, 4, 4, 34);
  adapter_case(AdapterKind::kTeamLora, shap, 8, 1, 35);
  adapter_case(AdapterKind::kTeamLora, shap, 8, 4, 36);
  adapter_case(AdapterKind::kTeamLora, lin, 2, 4, 37);
  adapter_case(AdapterKind::kTeamLora, lin, 4, 8, 38);

  SuiteSpec host_team{"host-2layer-teamlora-k4", true, {}};
  host_team.adapter.kind = AdapterKind::kTeamLora;
  host_team.adapter.router_kind = shap;
  host_team.adapter.rank = 1;
  host_team.adapter.experts = 4;
  host_team.adapter.alpha = 2.0;
  host_team.adapter.seed = 41;
  specs.push_back(host_team);

  SuiteSpec host_moe{"host-2layer-moelora-k2", true, {}};
  host_moe.adapter.kind = AdapterKind::kMoELora;
  host_moe.adapter.router_kind = lin;
  host_moe.adapter.rank = 4;
  host_moe.adapter.experts = 2;
  host_moe.adapter.alpha = 8.0;
  host_moe.adapter.seed = 42;
  specs.push_back(host_moe);

  SuiteSpec host_lora{"host-2layer-lora-r4", true, {}};
  host_lora.adapter.kind = AdapterKind::kLora;
  host_lora.adapter.rank = 4;
  host_lora.adapter.experts = 1;
  host_lora.adapter.alpha = 8.0;
  host_lora.adapter.seed = 43;
  specs.push_back(host_lora);

  return specs;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(double tol, double epsilon) {
  std::vector<GradCheckCase> cases;
  const std::vector<SuiteSpec> specs = gradcheck_suite_specs();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const SuiteSpec& spec = specs[i];
    Rng rng(mix_seed(0x6763, static_cast<std::uint64_t>(i)));
    GradCheckCase result;
    result.label = spec.label;
    if (spec.host_case) {
      FrozenHost host({6, 5, 4}, spec.adapter.seed);
      host.attach_adapter(0, spec.adapter);
      AdapterConfig second = spec.adapter;
      second.seed = mix_seed(spec.adapter.seed, 1);
      host.attach_adapter(1, second);
      const Matrix input = random_normal(4, 6, 1.0, rng);
      result.report = grad_check(host, input, tol, epsilon);
    } else {
      std::unique_ptr<Adapter> adapter = init_adapter(spec.adapter);
      // Nonzero B so every gradient path is exercised.
      std::vector<ParamRef> refs = adapter->params();
      for (ParamRef& ref : refs) {
        if (ref.name[0] == 'b' && ref.name.find("router") == std::string::npos) {
          *ref.value = random_normal(ref.value->rows(), ref.value->cols(), 0.5, rng);
        }
      }
      const Matrix input = random_normal(4, spec.adapter.d_in, 1.0, rng);
      result.report = grad_check(*adapter, input, tol, epsilon);
    }
    cases.push_back(std::move(result));
  }
  return cases;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

namespace {

json task_evals_json(const std::vector<TaskEval>& evals, TaskMode mode) {
  json arr = json::array();
  for (std::size_t t = 0; t < evals.size(); ++t) {
    json e = {{"task", t}, {"loss", evals[t].loss}};
    if (mode == TaskMode::kClassification) e["accuracy"] = evals[t].accuracy;
    arr.push_back(e);
  }
  return arr;
}

}  // namespace

int cmd_train(const ExperimentConfig& cfg, bool quiet) {
  std::filesystem::create_directories(cfg.out_dir);
  Experiment exp = build_experiment(cfg);
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, kTrainStreamTag);
  Trainer trainer(*exp.host, exp.train_data, exp.eval_data, tc);

  // Stream metrics: rewrite the CSV after every evaluation block so partial
  // results are on disk during long runs.
  const std::filesystem::path out(cfg.out_dir);
  Index remaining = tc.steps;
  while (remaining > 0) {
    const Index chunk = std::min(remaining, tc.eval_every);
    trainer.run(chunk);
    remaining -= chunk;
    write_metrics_csv(trainer.history(), cfg.mode, out / "metrics.csv");
  }
  if (tc.steps == 0) write_metrics_csv(trainer.history(), cfg.mode, out / "metrics.csv");
  trainer.save_checkpoint(out / "checkpoint.json");
  echo_resolved_config(cfg);
  if (!quiet) {
    std::cout << "trained " << tc.steps << " steps; artifacts in " << cfg.out_dir << "\n";
    if (!trainer.history().empty()) {
      const MetricsRow& last = trainer.history().back();
      std::cout << "final train loss " << last.train_loss << "\n";
    }
  }
  return 0;
}

namespace {

// Shared by eval and analyze: train fresh or restore from cfg.checkpoint.
Experiment trained_experiment(const ExperimentConfig& cfg) {
  Experiment exp = build_experiment(cfg);
  TrainConfig tc = cfg.train;
  tc.seed = mix_seed(cfg.seed, kTrainStreamTag);
  Trainer trainer(*exp.host, exp.train_data, exp.eval_data, tc);
  if (!cfg.checkpoint.empty()) {
    trainer.load_checkpoint(cfg.checkpoint);
  } else {
    trainer.run(tc.steps);
  }
  return exp;
}

}  // namespace

int cmd_eval(const ExperimentConfig& cfg, bool quiet) {
  std::filesystem::create_directories(cfg.out_dir);
  Experiment exp = trained_experiment(cfg);
  const std::vector<TaskEval> evals = evaluate_per_task(*exp.host, exp.eval_data,
                                                        cfg.train.loss);
  double mean_acc = 0.0;
  double mean_loss = 0.0;
  for (const TaskEval& e : evals) {
    mean_acc += e.accuracy;
    mean_loss += e.loss;
  }
  mean_acc /= static_cast<double>(evals.size());
  mean_loss /= static_cast<double>(evals.size());

  json j;
  j["version"] = 1;
  j["per_task"] = task_evals_json(evals, cfg.mode);
  j["mean_loss"] = mean_loss;
  if (cfg.mode == TaskMode::kClassification) j["mean_accuracy"] = mean_acc;
  write_json(std::filesystem::path(cfg.out_dir) / "eval_report.json", j);
  echo_resolved_config(cfg);
  if (!quiet) {
    std::cout << "eval mean loss " << mean_loss;
    if (cfg.mode == TaskMode::kClassification) std::cout << ", mean accuracy " << mean_acc;
    std::cout << "\n";
  }
  return 0;
}

namespace {

json bench_entry_json(const BenchEntry& e) {
  return json{{"kind", to_string(e.config.kind)},
              {"router", to_string(e.config.router_kind)},
              {"rank", e.config.rank},
              {"experts", e.config.experts},
              {"branch_matmuls", e.measured.branch_matmuls},
              {"router_matmuls", e.measured.router_matmuls},
              {"predicted_branch_matmuls", e.predicted.branch_matmuls},
              {"predicted_router_matmuls", e.predicted.router_matmuls},
              {"counts_match", e.counts_match},
              {"forward_flops", e.forward_flops},
              {"adapter_params", e.params.adapter_params},
              {"router_params", e.params.router_params},
              {"total_params", e.params.total},
              {"median_forward_us", e.median_forward_us},
              {"median_train_step_us", e.median_train_step_us}};
}

}  // namespace

int cmd_bench(const ExperimentConfig& cfg, bool quiet) {
  std::filesystem::create_directories(cfg.out_dir);
  BenchOptions opts = cfg.bench;
  opts.seed = mix_seed(cfg.seed, 0x62656e6368);
  const CostReport report = latency_bench(opts);

  json j;
  j["version"] = 1;
  j["d"] = opts.d;
  j["batch"] = opts.batch;
  j["trials"] = opts.trials;
  j["warmup"] = opts.warmup;
  j["rank"] = opts.rank;
  j["all_counts_match"] = report.all_counts_match;
  json groups = json::array();
  for (const BenchGroup& g : report.groups) {
    groups.push_back({{"experts", g.experts},
                      {"lora", bench_entry_json(g.lora)},
                      {"moelora", bench_entry_json(g.moelora)},
                      {"teamlora", bench_entry_json(g.teamlora)},
                      {"team_vs_moe_forward_ratio", g.team_vs_moe_forward_ratio},
                      {"team_vs_moe_train_ratio", g.team_vs_moe_train_ratio},
                      {"team_vs_lora_forward_ratio", g.team_vs_lora_forward_ratio},
                      {"moe_vs_lora_forward_ratio", g.moe_vs_lora_forward_ratio}});
  }
  j["groups"] = groups;
  const std::filesystem::path out(cfg.out_dir);
  write_json(out / "cost_report.json", j);

  std::string csv =
      "experts,kind,router,rank,branch_matmuls,router_matmuls,forward_flops,"
      "adapter_params,router_params,median_forward_us,median_train_step_us\n";
  for (const BenchGroup& g : report.groups) {
    for (const BenchEntry* e : {&g.lora, &g.moelora, &g.teamlora}) {
      csv += std::to_string(g.experts) + "," + to_string(e->config.kind) + "," +
             to_string(e->config.router_kind) + "," + std::to_string(e->config.rank) + "," +
             std::to_string(e->measured.branch_matmuls) + "," +
             std::to_string(e->measured.router_matmuls) + "," +
             std::to_string(e->forward_flops) + "," +
             std::to_string(e->params.adapter_params) + "," +
             std::to_string(e->params.router_params) + "," + fmt(e->median_forward_us) +
             "," + fmt(e->median_train_step_us) + "\n";
    }
  }
  write_text(out / "cost_report.csv", csv);
  echo_resolved_config(cfg);

  if (!quiet) {
    for (const BenchGroup& g : report.groups) {
      std::cout << "k=" << g.experts
                << " team/moe forward ratio " << g.team_vs_moe_forward_ratio
                << " (train " << g.team_vs_moe_train_ratio << ")\n";
    }
  }
  return report.all_counts_match ? 0 : 1;
}

int cmd_ablate(const ExperimentConfig& cfg, bool quiet) {
  std::filesystem::create_directories(cfg.out_dir);
  AblationOptions opts;
  opts.host_dims = cfg.host_dims;
  opts.adapter_layers = cfg.adapter_layers;
  opts.rank = cfg.rank;
  opts.experts = cfg.experts;
  opts.alpha = cfg.alpha;
  opts.s_hidden = cfg.s_hidden;
  opts.n_tasks = cfg.n_tasks;
  opts.n_per_task = cfg.n_per_task;
  opts.eval_per_task = cfg.eval_per_task;
  opts.train = cfg.train;
  opts.n_seeds = cfg.ablate_seeds;
  opts.seed = mix_seed(cfg.seed, 0x61626c);
  const AblationGrid grid = ablation_grid(opts);

  json j;
  j["version"] = 1;
  j["n_seeds"] = grid.options.n_seeds;
  j["team_wins_vs_moe"] = grid.team_wins_vs_moe;
  json rows = json::array();
  for (const AblationCell& c : grid.cells) {
    rows.push_back({{"structure", to_string(c.kind)},
                    {"router", to_string(c.router)},
                    {"collaboration", c.kind == AdapterKind::kTeamLora},
                    {"competition", c.router == RouterKind::kShapleyInteraction},
                    {"adapter_params", c.params.adapter_params},
                    {"router_params", c.params.router_params},
                    {"mean_accuracy", c.mean_accuracy},
                    {"mean_loss", c.mean_loss},
                    {"accuracy_per_seed", c.accuracy_per_seed}});
  }
  j["cells"] = rows;
  const std::filesystem::path out(cfg.out_dir);
  write_json(out / "ablation.json", j);

  std::string csv = "collaboration,competition,mean_accuracy,mean_loss\n";
  for (const AblationCell& c : grid.cells) {
    csv += std::string(c.kind == AdapterKind::kTeamLora ? "1" : "0") + "," +
           (c.router == RouterKind::kShapleyInteraction ? "1" : "0") + "," +
           fmt(c.mean_accuracy) + "," + fmt(c.mean_loss) + "\n";
  }
  write_text(out / "ablation.csv", csv);

  char line[160];
  std::string table;
  table += "Col  Cop  mean-acc  mean-loss\n";
  const char* mark[2] = {" - ", " x "};
  for (const AblationCell& c : grid.cells) {
    std::snprintf(line, sizeof line, "%s  %s  %8.4f  %9.5f\n",
                  mark[c.kind == AdapterKind::kTeamLora],
                  mark[c.router == RouterKind::kShapleyInteraction], c.mean_accuracy,
                  c.mean_loss);
    table += line;
  }
  write_text(out / "ablation_table.txt", table);
  echo_resolved_config(cfg);
  if (!quiet) std::cout << table;
  return 0;
}

int cmd_analyze(const ExperimentConfig& cfg, bool quiet) {
  std::filesystem::create_directories(cfg.out_dir);
  Experiment exp = trained_experiment(cfg);
  const std::filesystem::path out(cfg.out_dir);

  const LoadReport load = expert_utilization(*exp.host, exp.eval_data);
  json lj;
  lj["version"] = 1;
  lj["n_tasks"] = load.n_tasks;
  lj["experts"] = load.experts;
  lj["mean_omega"] = load.mean_omega;
  lj["argmax_freq"] = load.argmax_freq;
  lj["entropy"] = load.entropy;
  lj["max_entropy"] = std::log(static_cast<double>(load.experts));
  lj["mean_omega_row_sum"] = load.mean_omega_row_sum;
  lj["negative_omega_frequency"] = load.negative_omega_frequency;
  if (cfg.shapley_samples > 0 && load.experts >= 2) {
    json shap = json::array();
    for (Index e = 0; e < load.experts; ++e) {
      const ShapleyEstimate est =
          shapley_mc(*exp.host, exp.eval_data, e, cfg.shapley_samples,
                     mix_seed(cfg.seed, 0x73686170 + static_cast<std::uint64_t>(e)),
                     cfg.train.loss);
      shap.push_back({{"expert", e},
                      {"phi_hat", est.phi_hat},
                      {"std_error", est.std_error},
                      {"n_samples", est.n_samples}});
    }
    lj["shapley"] = shap;
  }
  write_json(out / "load_report.json", lj);

  std::string load_csv = "task,expert,mean_omega,argmax_freq\n";
  for (Index t = 0; t < load.n_tasks; ++t) {
    for (Index e = 0; e < load.experts; ++e) {
      load_csv += std::to_string(t) + "," + std::to_string(e) + "," +
                  fmt(load.mean_omega[static_cast<std::size_t>(t)][static_cast<std::size_t>(e)]) +
                  "," +
                  fmt(load.argmax_freq[static_cast<std::size_t>(t)][static_cast<std::size_t>(e)]) +
                  "\n";
    }
  }
  write_text(out / "load_report.csv", load_csv);

  const RetentionReport retention =
      top1_retention(*exp.host, exp.eval_data, cfg.train.loss, cfg.renormalize_solo);
  json rj;
  rj["version"] = 1;
  rj["experts"] = retention.experts;
  rj["solo_scores"] = retention.solo_scores;
  rj["top1_score"] = retention.top1_score;
  rj["all_score"] = retention.all_score;
  if (std::isfinite(retention.retention_ratio)) {
    rj["retention_ratio"] = retention.retention_ratio;
  } else {
    rj["retention_ratio"] = nullptr;
  }
  rj["renormalized"] = retention.renormalized;
  write_json(out / "retention_report.json", rj);

  std::string ret_csv = "expert,solo_score\n";
  for (std::size_t e = 0; e < retention.solo_scores.size(); ++e) {
    ret_csv += std::to_string(e) + "," + fmt(retention.solo_scores[e]) + "\n";
  }
  ret_csv += "top1," + fmt(retention.top1_score) + "\n";
  ret_csv += "all," + fmt(retention.all_score) + "\n";
  write_text(out / "retention_report.csv", ret_csv);
  echo_resolved_config(cfg);

  if (!quiet) {
    std::cout << "load entropy per task:";
    for (double e : load.entropy) std::cout << " " << e;
    std::cout << " (max " << std::log(static_cast<double>(load.experts)) << ")\n";
    std::cout << "retention ratio " << retention.retention_ratio << "\n";
  }
  return 0;
}

int cmd_gradcheck(const ExperimentConfig& cfg, bool quiet) {
  std::filesystem::create_directories(cfg.out_dir);
  const std::vector<GradCheckCase> cases =
      run_gradcheck_suite(cfg.gradcheck_tol, cfg.gradcheck_eps);
  bool all_pass = true;
  json arr = json::array();
  for (const GradCheckCase& c : cases) {
    all_pass = all_pass && c.report.pass;
    json entries = json::array();
    for (const GradCheckEntry& e : c.report.entries) {
      entries.push_back({{"name", e.name}, {"rel_error", e.rel_error}});
    }
    arr.push_back({{"label", c.label},
                   {"pass", c.report.pass},
                   {"max_rel_error", c.report.max_rel_error},
                   {"entries", entries}});
    if (!quiet) {
      std::cout << (c.report.pass ? "pass" : "FAIL") << "  " << c.label << "  max rel err "
                << c.report.max_rel_error << "\n";
    }
  }
  json j;
  j["version"] = 1;
  j["tolerance"] = cfg.gradcheck_tol;
  j["epsilon"] = cfg.gradcheck_eps;
  j["all_pass"] = all_pass;
  j["cases"] = arr;
  write_json(std::filesystem::path(cfg.out_dir) / "gradcheck.json", j);
  echo_resolved_config(cfg);
  if (!quiet) {
    double worst = 0.0;
    for (const GradCheckCase& c : cases) worst = std::max(worst, c.report.max_rel_error);
    std::cout << json{{"version", 1},
                      {"all_pass", all_pass},
                      {"cases", cases.size()},
                      {"max_rel_error", worst}}
                     .dump()
              << "\n";
  }
  return all_pass ? 0 : 1;
}

}  // namespace peftlab
