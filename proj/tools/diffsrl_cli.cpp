// Command-line front end for the diffsrl shared library. Talks exclusively
// through the C API in diffsrl.h.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diffsrl.h"

namespace {

int fail_with(dsrl_status status) {
  std::fprintf(stderr, "error (%d): %s\n", int(status), dsrl_last_error());
  return 1;
}

// Writes every metric in the report as <prefix>_<metric>.csv plus one JSON
// summary when requested.
int emit_reports(dsrl_report* report, const std::string& command,
                 const std::string& csv_prefix, const std::string& json_path) {
  size_t n = dsrl_report_count(report);
  for (size_t i = 0; i < n; i++) {
    char name[128];
    if (dsrl_report_name(report, i, name, sizeof(name)) != DSRL_OK)
      return fail_with(DSRL_ERR_RUNTIME);
    double mean = 0, sd = 0;
    size_t count = 0;
    dsrl_report_stats(report, i, &mean, &sd, &count);
    std::printf("%-28s n=%-5zu mean=%.6g std=%.6g\n", name, count, mean, sd);
    if (!csv_prefix.empty()) {
      std::string path = csv_prefix + "_" + name + ".csv";
      dsrl_status st = dsrl_report_write_csv(report, i, path.c_str());
      if (st != DSRL_OK) return fail_with(st);
    }
  }
  if (!json_path.empty()) {
    dsrl_status st = dsrl_report_write_json(report, command.c_str(), json_path.c_str());
    if (st != DSRL_OK) return fail_with(st);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"diffsrl: differentiable soft-body state representation learning"};
  app.require_subcommand(1);

  std::string scene, config, data, out, model, kind = "autoencoder";
  std::string csv_prefix, json_path;
  int k = 0;
  bool resume = false, ablate = false;
  std::vector<size_t> counts;

  auto add_common = [&](CLI::App* cmd, bool needs_data, bool needs_model) {
    cmd->add_option("--scene", scene, "scene config file")->required();
    cmd->add_option("--config", config, "run config file (defaults to --scene)");
    if (needs_data) cmd->add_option("--data", data, "dataset directory")->required();
    if (needs_model) cmd->add_option("--model", model, "model checkpoint")->required();
    cmd->add_option("--csv", csv_prefix, "CSV output path prefix");
    cmd->add_option("--json", json_path, "JSON summary output path");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a trajectory dataset");
  gen->add_option("--scene", scene, "scene config file")->required();
  gen->add_option("--config", config, "run config file (defaults to --scene)");
  gen->add_option("--out", out, "output dataset directory")->required();

  CLI::App* train = app.add_subcommand("train", "train the DiffSRL model");
  add_common(train, true, false);
  train->add_option("--out", out, "checkpoint output path")->required();
  train->add_flag("--resume", resume, "resume from the checkpoint if present");
  train->add_flag("--ablate-penetration", ablate,
                  "train without the non-penetration regulator");

  CLI::App* trainb = app.add_subcommand("train-baseline", "train a baseline model");
  add_common(trainb, true, false);
  trainb->add_option("--kind", kind, "autoencoder | forward | inverse")->required();
  trainb->add_option("--out", out, "checkpoint output path")->required();

  CLI::App* evalt = app.add_subcommand("eval-traj", "trajectory reconstruction metric");
  add_common(evalt, true, true);
  evalt->add_option("--k", k, "rollout steps (default: config)");

  CLI::App* evalr = app.add_subcommand("eval-reward", "reward prediction MSE");
  add_common(evalr, true, true);

  CLI::App* mbpo = app.add_subcommand("mbpo", "model-based policy optimization");
  add_common(mbpo, false, true);

  CLI::App* robust = app.add_subcommand("robustness", "MBPO at reduced point counts");
  add_common(robust, false, true);
  robust->add_option("--counts", counts, "observation point counts")->required();

  CLI::App* gradc = app.add_subcommand("grad-check", "simulator gradient check");
  gradc->add_option("--scene", scene, "scene config file")->required();

  CLI11_PARSE(app, argc, argv);

  const char* run_cfg = config.empty() ? nullptr : config.c_str();
  dsrl_status st = DSRL_OK;
  dsrl_report* report = nullptr;
  int rc = 0;

  if (gen->parsed()) {
    st = dsrl_gen_data(scene.c_str(), run_cfg, out.c_str());
    if (st != DSRL_OK) return fail_with(st);
    std::printf("dataset written to %s\n", out.c_str());
  } else if (train->parsed()) {
    st = dsrl_train(scene.c_str(), run_cfg, data.c_str(), out.c_str(), resume ? 1 : 0,
                    ablate ? 1 : -1, &report);
    if (st != DSRL_OK) return fail_with(st);
    rc = emit_reports(report, "train", csv_prefix, json_path);
    std::printf("checkpoint written to %s\n", out.c_str());
  } else if (trainb->parsed()) {
    st = dsrl_train_baseline(kind.c_str(), scene.c_str(), run_cfg, data.c_str(),
                             out.c_str(), &report);
    if (st != DSRL_OK) return fail_with(st);
    rc = emit_reports(report, "train-baseline", csv_prefix, json_path);
    std::printf("checkpoint written to %s\n", out.c_str());
  } else if (evalt->parsed()) {
    st = dsrl_eval_traj(scene.c_str(), run_cfg, data.c_str(), model.c_str(), k, &report);
    if (st != DSRL_OK) return fail_with(st);
    rc = emit_reports(report, "eval-traj", csv_prefix, json_path);
  } else if (evalr->parsed()) {
    st = dsrl_eval_reward(scene.c_str(), run_cfg, data.c_str(), model.c_str(), &report);
    if (st != DSRL_OK) return fail_with(st);
    rc = emit_reports(report, "eval-reward", csv_prefix, json_path);
  } else if (mbpo->parsed()) {
    st = dsrl_mbpo(scene.c_str(), run_cfg, model.c_str(), &report);
    if (st != DSRL_OK) return fail_with(st);
    rc = emit_reports(report, "mbpo", csv_prefix, json_path);
  } else if (robust->parsed()) {
    st = dsrl_robustness(scene.c_str(), run_cfg, model.c_str(), counts.data(),
                         counts.size(), &report);
    if (st != DSRL_OK) return fail_with(st);
    rc = emit_reports(report, "robustness", csv_prefix, json_path);
  } else if (gradc->parsed()) {
    double err = 0;
    st = dsrl_grad_check(scene.c_str(), &err);
    if (st != DSRL_OK) return fail_with(st);
    std::printf("max relative error: %.3e\n", err);
    rc = err < 1e-4 ? 0 : 2;
  }

  dsrl_report_close(report);
  return rc;
}
