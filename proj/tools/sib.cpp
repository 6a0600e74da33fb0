#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sib/analysis.hpp"
#include "sib/config.hpp"
#include "sib/error.hpp"
#include "sib/selfcheck.hpp"
#include "sib/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct Common {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::vector<std::string> overrides;  // --key value pairs left over by the parser
};

struct CliError : sib::Error {
  using sib::Error::Error;
};

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw sib::IoError(fmt::format("cannot open {}", path.string()));
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw sib::ConfigError(fmt::format("{}: malformed JSON ({})", path.string(), e.what()));
  }
}

void apply_overrides(json& j, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& flag = extras[i];
    if (flag.rfind("--", 0) != 0 || flag.size() <= 2) {
      throw sib::ConfigError(fmt::format("unexpected argument '{}'", flag));
    }
    std::string key = flag.substr(2);
    std::string value;
    if (const auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key = key.substr(0, eq);
    } else {
      if (i + 1 >= extras.size()) throw sib::ConfigError(fmt::format("option '{}' expects a value", flag));
      value = extras[++i];
    }
    sib::apply_override(j, key, value);
  }
}

sib::RunConfig load_config(const Common& c, std::optional<sib::TaskMode> mode) {
  json j = c.config_path.empty() ? json::object() : read_json_file(c.config_path);
  if (!j.is_object()) throw sib::ConfigError("config: top level must be an object");
  apply_overrides(j, c.overrides);
  if (c.seed) j["seed"] = *c.seed;
  if (mode) {
    if (j.contains("mode") && j["mode"].is_string()) {
      const auto given = sib::task_mode_from_string(j["mode"].get<std::string>());
      const bool toy_cmd = *mode == sib::TaskMode::Toy;
      if (toy_cmd != (given == sib::TaskMode::Toy)) {
        throw sib::ConfigError(fmt::format("config: mode '{}' does not match this command", to_string(given)));
      }
    } else {
      j["mode"] = std::string(to_string(*mode));
    }
  }
  sib::RunConfig cfg = sib::config_from_json(j, mode.value_or(sib::TaskMode::Toy));
  cfg.validate();
  return cfg;
}

fs::path prepare_out_dir(const std::string& dir, bool force) {
  if (dir.empty()) throw CliError("--out is required for this command");
  const fs::path p(dir);
  if (fs::exists(p)) {
    if (!fs::is_directory(p)) throw sib::IoError(fmt::format("{} exists and is not a directory", dir));
    if (!fs::is_empty(p) && !force) {
      throw sib::IoError(fmt::format("run directory {} already exists (pass --force to overwrite)", dir));
    }
  }
  fs::create_directories(p);
  return p;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw sib::IoError(fmt::format("cannot write {}", path.string()));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
}

ordered_json metrics_json(const sib::MetricsRow& row) {
  ordered_json m = ordered_json::object();
  for (const auto& x : row.metrics) m[x.name] = {{"value", x.value}, {"ci95", x.ci95}};
  return m;
}

struct ReportCsv {
  std::ostringstream text;
  ReportCsv() { text << "quantity,value,stderr\n"; }
  void add(const std::string& q, double v, double se = 0.0) {
    text << q << ',' << sib::format_double(v) << ',' << sib::format_double(se) << '\n';
  }
};

void print_metric(const sib::MetricsRow& row, std::ostream& out) {
  const char* name = row.find("query_accuracy") != nullptr ? "query_accuracy" : "query_mse";
  const auto* m = row.find(name);
  if (m == nullptr) throw sib::Error("no headline metric in evaluation row");
  out << fmt::format("{} {} ± {}\n", name, sib::format_double(m->value), sib::format_double(m->ci95));
}

int cmd_train(const Common& c, sib::TaskMode mode) {
  const sib::RunConfig cfg = load_config(c, mode);
  const fs::path dir = prepare_out_dir(c.out_dir, c.force);
  write_text(dir / "config.json", sib::to_json(cfg).dump(2) + "\n");

  auto metrics = open_out(dir / "metrics.csv");
  auto timing = open_out(dir / "timing.csv");
  timing << "step,split,wall_time_ms\n";
  sib::MetricsCsv csv(metrics);
  std::vector<sib::MetricsRow> rows;
  sib::TrainOptions opts;
  opts.on_row = [&](const sib::MetricsRow& row) {
    csv.write(row);
    metrics.flush();
    timing << row.step << ',' << to_string(row.split) << ',' << sib::format_double(row.wall_time_ms) << '\n';
    std::cerr << fmt::format("[{} {}]", to_string(row.split), row.step);
    for (const auto& m : row.metrics) std::cerr << fmt::format(" {}={:.5g}", m.name, m.value);
    std::cerr << '\n';
    rows.push_back(row);
  };
  const auto t0 = std::chrono::steady_clock::now();
  const sib::TrainResult result = sib::train(cfg, opts);

  const bool fewshot = cfg.mode != sib::TaskMode::Toy;
  const sib::MetaModel& chosen = fewshot && !result.aborted ? result.best : result.model;
  const std::size_t chosen_step = fewshot && !result.aborted ? result.best_step : result.steps_done;
  sib::save_checkpoint(chosen, dir / "checkpoint.json", {sib::config_hash(cfg), chosen_step});

  ordered_json summary;
  summary["command"] = fewshot ? "train-fewshot" : "train-toy";
  summary["mode"] = std::string(to_string(cfg.mode));
  summary["seed"] = cfg.seed;
  summary["config_hash"] = sib::hash_hex(sib::config_hash(cfg));
  summary["steps_done"] = result.steps_done;
  summary["aborted"] = result.aborted;
  if (result.aborted) summary["abort_reason"] = result.abort_reason;

  if (!result.aborted) {
    sib::MetricsRow final_row;
    if (fewshot) {
      const auto t1 = std::chrono::steady_clock::now();
      sib::EvalResult ev = sib::evaluate(chosen, cfg, sib::Split::Test, cfg.test_episodes, result.steps_done);
      ev.row.wall_time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t1).count();
      opts.on_row(ev.row);
      final_row = ev.row;
      summary["best_step"] = result.best_step;
      summary["best_val"] = result.best_value;
    } else {
      for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
        if (it->split == sib::Split::Test) {
          final_row = *it;
          break;
        }
      }
    }
    summary["final"] = {{"split", std::string(to_string(final_row.split))},
                        {"step", final_row.step},
                        {"metrics", metrics_json(final_row)}};
    print_metric(final_row, std::cout);
  }
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  timing << "total,all," << sib::format_double(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()) << '\n';
  if (result.aborted) throw sib::NumericError(fmt::format("training aborted: {} (last-good checkpoint kept)", result.abort_reason));
  return 0;
}

struct LoadedRun {
  sib::RunConfig cfg;
  sib::MetaModel model;
};

LoadedRun load_run(const Common& c, const std::string& run_dir, const std::string& checkpoint) {
  Common cc = c;
  fs::path ckpt = checkpoint;
  if (!run_dir.empty()) {
    if (cc.config_path.empty()) cc.config_path = (fs::path(run_dir) / "config.json").string();
    if (ckpt.empty()) ckpt = fs::path(run_dir) / "checkpoint.json";
  }
  if (ckpt.empty()) throw CliError("need --run or --checkpoint");
  const sib::RunConfig cfg = load_config(cc, std::nullopt);
  auto loaded = sib::load_checkpoint(ckpt, sib::config_hash(cfg), &std::cerr);
  if (loaded.model.spec().mode != cfg.mode) throw sib::ConfigError("checkpoint mode does not match the config");
  return {cfg, std::move(loaded.model)};
}

int cmd_eval(const Common& c, const std::string& run_dir, const std::string& checkpoint, const std::string& split,
             std::optional<std::size_t> episodes) {
  const LoadedRun run = load_run(c, run_dir, checkpoint);
  const sib::Split s = sib::split_from_string(split);
  const std::size_t n = episodes.value_or(run.cfg.mode == sib::TaskMode::Toy
                                              ? (s == sib::Split::Train ? run.cfg.toy.n_train : run.cfg.toy.n_test)
                                              : run.cfg.test_episodes);
  const sib::EvalResult ev = sib::evaluate(run.model, run.cfg, s, n);
  if (!c.out_dir.empty()) {
    const fs::path dir = prepare_out_dir(c.out_dir, c.force);
    auto out = open_out(dir / "metrics.csv");
    sib::MetricsCsv(out).write(ev.row);
    ordered_json summary{{"command", "eval"}, {"split", split}, {"episodes", n}, {"metrics", metrics_json(ev.row)}};
    write_text(dir / "summary.json", summary.dump(2) + "\n");
  }
  print_metric(ev.row, std::cout);
  return 0;
}

int cmd_analyze(const Common& c, const std::string& run_dir, const std::string& checkpoint) {
  const LoadedRun run = load_run(c, run_dir, checkpoint);
  const sib::RunConfig& cfg = run.cfg;
  std::string out = c.out_dir;
  if (out.empty()) {
    if (run_dir.empty()) throw CliError("--out is required without --run");
    out = (fs::path(run_dir) / "analysis").string();
  }
  const fs::path dir = prepare_out_dir(out, c.force);
  ReportCsv report;
  ordered_json summary{{"command", "analyze"}, {"mode", std::string(to_string(cfg.mode))}};

  sib::RunConfig k0 = cfg;
  k0.inference.inner.steps = 0;
  if (cfg.mode == sib::TaskMode::Toy) {
    const sib::EpisodeSource source(cfg);
    std::vector<sib::Episode> test;
    for (std::size_t i = 0; i < cfg.toy.n_test; ++i) test.push_back(source.get(sib::Split::Test, i));
    const auto mse_k = sib::evaluate(run.model, cfg, sib::Split::Test, cfg.toy.n_test).row;
    const auto mse_0 = sib::evaluate(run.model, k0, sib::Split::Test, cfg.toy.n_test).row;
    const auto kl_post = sib::kl_to_true_posterior(run.model, cfg, test);
    const auto mi = sib::mi_estimate(run.model, cfg, test);
    const double kl_prior = sib::prior_kl_to_true_prior(run.model, cfg.toy);
    report.add("test_mse_k", mse_k.value("query_mse"), mse_k.find("query_mse")->ci95 / 1.96);
    report.add("test_mse_k0", mse_0.value("query_mse"), mse_0.find("query_mse")->ci95 / 1.96);
    report.add("kl_to_true_posterior", kl_post.value, kl_post.std_error);
    report.add("prior_kl_to_true_prior", kl_prior);
    report.add("mi_estimate", mi.value, mi.std_error);
    const auto traj = sib::trajectory_errors(run.model, cfg, test);
    for (std::size_t k = 0; k < traj.size(); ++k) report.add(fmt::format("trajectory_error_k{}", k), traj[k]);
    const auto gg = sib::gen_gap(run.model, cfg, cfg.analysis.gen_gap_trials, cfg.analysis.fresh_datasets,
                                 sib::mix64(cfg.seed ^ 0x616E616C797A65ULL));
    const double sigma = cfg.analysis.sigma.value_or(gg.sigma_plugin);
    const double bound = sib::gen_bound(sigma, static_cast<double>(cfg.toy.n), mi.value);
    report.add("gen_gap", gg.gap.value, gg.gap.std_error);
    report.add("sigma", sigma);
    report.add("gen_bound", bound);
    summary["bound_holds_3se"] = std::abs(gg.gap.value) <= bound + 3.0 * gg.gap.std_error;
  } else {
    const auto acc_k = sib::evaluate(run.model, cfg, sib::Split::Test, cfg.test_episodes).row;
    const auto acc_0 = sib::evaluate(run.model, k0, sib::Split::Test, cfg.test_episodes).row;
    report.add("test_accuracy_k", acc_k.value("query_accuracy"), acc_k.find("query_accuracy")->ci95 / 1.96);
    report.add("test_accuracy_k0", acc_0.value("query_accuracy"), acc_0.find("query_accuracy")->ci95 / 1.96);
    report.add("kl_to_prior", acc_k.value("kl_to_prior"), acc_k.find("kl_to_prior")->ci95 / 1.96);
  }
  write_text(dir / "report.csv", report.text.str());
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << report.text.str();
  return 0;
}

int cmd_sweep(const Common& c) {
  const sib::RunConfig cfg = load_config(c, sib::TaskMode::Toy);
  const fs::path dir = prepare_out_dir(c.out_dir, c.force);
  write_text(dir / "config.json", sib::to_json(cfg).dump(2) + "\n");
  auto csv = open_out(dir / "sweep.csv");
  csv << "n,seed,gen_gap,gen_gap_se,sigma,mi,bound,mse\n";
  const auto rows = sib::vary_n_sweep(cfg, cfg.analysis.sweep_n, cfg.analysis.sweep_seeds, [&](const sib::SweepRow& r) {
    using sib::format_double;
    csv << r.n << ',' << r.seed << ',' << format_double(r.gen_gap) << ',' << format_double(r.gen_gap_se) << ','
        << format_double(r.sigma) << ',' << format_double(r.mi) << ',' << format_double(r.bound) << ','
        << format_double(r.mse) << '\n';
    csv.flush();
    std::cerr << fmt::format("[sweep] n={} seed={} gap={:.4g} bound={:.4g}\n", r.n, r.seed, r.gen_gap, r.bound);
  });
  std::vector<double> ns, gaps;
  for (const auto& r : rows) {
    ns.push_back(static_cast<double>(r.n));
    gaps.push_back(std::abs(r.gen_gap));
  }
  ReportCsv report;
  const double rho = rows.size() >= 2 ? sib::spearman(ns, gaps) : 0.0;
  report.add("spearman_abs_gap_vs_n", rho);
  write_text(dir / "report.csv", report.text.str());
  ordered_json summary{{"command", "sweep-n"}, {"rows", rows.size()}, {"spearman_abs_gap_vs_n", rho}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  std::cout << report.text.str();
  return 0;
}

bool run_gradchecks(std::ostream& out) {
  bool ok = true;
  for (const auto& r : sib::gradcheck_suite()) {
    out << fmt::format("{} {} max_rel_error={:.3e}\n", r.passed ? "PASS" : "FAIL", r.name, r.max_rel_error);
    ok = ok && r.passed;
  }
  return ok;
}

int cmd_gradcheck() { return run_gradchecks(std::cout) ? 0 : 1; }

int cmd_selftest() {
  bool ok = run_gradchecks(std::cout);

  sib::CounterRng rng(11);
  double worst = 0.0;
  bool ineq = true;
  for (int i = 0; i < 100; ++i) {
    const auto inst = sib::random_discrete_instance(1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8), rng);
    const auto rep = sib::ib_decomposition_check(inst);
    worst = std::max(worst, std::abs(rep.residual));
    ineq = ineq && rep.inequality_holds;
  }
  const bool ib_ok = worst < 1e-9 && ineq;
  std::cout << fmt::format("{} ib_decomposition max_residual={:.3e}\n", ib_ok ? "PASS" : "FAIL", worst);
  ok = ok && ib_ok;

  const sib::RunConfig cfg = sib::default_config(sib::TaskMode::FewShot);
  const auto model = sib::perturbed_model(cfg.model_spec(), 3);
  const sib::EpisodeSource source(cfg);
  const auto inf = cfg.effective_inference();
  bool pure = true;
  for (std::uint64_t i = 0; i < 20; ++i) {
    sib::Episode ep = source.get(sib::Split::Test, i);
    sib::CounterRng r1(1), r2(1);
    const auto a = sib::build_posterior(sib::adaptation_input(ep), sib::bind_constant(model), inf, sib::gaussian_noise(r1));
    for (auto& y : ep.query_labels) y = static_cast<int>((static_cast<std::size_t>(y) + 1) % ep.ways);
    const auto b = sib::build_posterior(sib::adaptation_input(ep), sib::bind_constant(model), inf, sib::gaussian_noise(r2));
    pure = pure && a.theta.storage() == b.theta.storage();
  }
  std::cout << fmt::format("{} transduction_purity\n", pure ? "PASS" : "FAIL");
  ok = ok && pure;

  const std::string text = sib::checkpoint_to_string(model, {42, 7});
  const bool rt = sib::checkpoint_to_string(sib::checkpoint_from_string(text), {42, 7}) == text;
  std::cout << fmt::format("{} checkpoint_round_trip\n", rt ? "PASS" : "FAIL");
  ok = ok && rt;
  return ok ? 0 : 1;
}

int report_error(const char* type, const std::exception& e, int code) {
  std::cerr << "error: " << json{{"type", type}, {"message", e.what()}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic-information-bottleneck meta-learning experiments"};
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool needs_config) {
    if (needs_config) {
      sub->add_option("--config", common.config_path, "JSON config file");
      sub->add_option("--seed", common.seed, "run seed (overrides the config)");
      sub->allow_extras();
    }
    sub->add_option("--out", common.out_dir, "output directory");
    sub->add_flag("--force", common.force, "overwrite an existing output directory");
  };

  auto* train_toy = app.add_subcommand("train-toy", "train on the spinning-lines regression toy");
  add_common(train_toy, true);
  auto* train_fs = app.add_subcommand("train-fewshot", "train on the synthetic few-shot benchmark");
  add_common(train_fs, true);

  std::string run_dir, checkpoint, split = "test";
  std::optional<std::size_t> episodes;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, true);
  eval->add_option("--run", run_dir, "run directory (config.json and checkpoint.json)");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file");
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--episodes", episodes, "number of episodes");

  auto* analyze = app.add_subcommand("analyze", "diagnostics and generalization bound of a trained run");
  add_common(analyze, true);
  analyze->add_option("--run", run_dir, "run directory");
  analyze->add_option("--checkpoint", checkpoint, "checkpoint file");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  auto* sweep = app.add_subcommand("sweep-n", "toy query-size sweep of the generalization gap");
  add_common(sweep, true);
  auto* selftest = app.add_subcommand("selftest", "gradient, decomposition, purity and checkpoint checks");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (auto* sub : app.get_subcommands()) common.overrides = sub->remaining();
    if (train_toy->parsed()) return cmd_train(common, sib::TaskMode::Toy);
    if (train_fs->parsed()) return cmd_train(common, sib::TaskMode::FewShot);
    if (eval->parsed()) return cmd_eval(common, run_dir, checkpoint, split, episodes);
    if (analyze->parsed()) return cmd_analyze(common, run_dir, checkpoint);
    if (gradcheck->parsed()) return cmd_gradcheck();
    if (sweep->parsed()) return cmd_sweep(common);
    if (selftest->parsed()) return cmd_selftest();
  } catch (const sib::ConfigError& e) {
    return report_error("config", e, 2);
  } catch (const sib::IoError& e) {
    return report_error("io", e, 3);
  } catch (const sib::NumericError& e) {
    return report_error("numeric", e, 4);
  } catch (const CliError& e) {
    return report_error("usage", e, 2);
  } catch (const std::exception& e) {
    return report_error("error", e, 5);
  }
  return 0;
}
