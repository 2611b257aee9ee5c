// apmpc: gen-data | train | validate | closed-loop | report
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include "apmpc/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <optional>

namespace {

struct Flags {
  std::optional<std::string> scenario;
  std::optional<std::string> controller;
  std::optional<std::uint64_t> seed_cohort;
  std::optional<std::uint64_t> seed_meals;
  std::optional<std::uint64_t> seed_noise;
  std::optional<std::string> out;
  std::string config;
  bool dump_config = false;
};

void add_common(CLI::App* sub, Flags& f, const std::vector<std::string>& scenarios) {
  auto* s = sub->add_option("--scenario", f.scenario, "scenario selector (default: all)");
  s->check(CLI::IsMember(scenarios));
  sub->add_option("--seed-cohort", f.seed_cohort, "cohort seed");
  sub->add_option("--seed-meals", f.seed_meals, "meal seed");
  sub->add_option("--seed-noise", f.seed_noise, "CGM noise seed");
  sub->add_option("--out", f.out, "output directory (default: run)");
  sub->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
}

apmpc::RunConfig resolve(const std::string& command, const Flags& f) {
  apmpc::RunConfig c;
  if (!f.config.empty()) c = apmpc::load_config(f.config, c);
  c.command = command;
  if (f.scenario) c.scenario = *f.scenario;
  if (f.controller) c.controller = *f.controller;
  if (f.seed_cohort) c.seed_cohort = *f.seed_cohort;
  if (f.seed_meals) c.seed_meals = *f.seed_meals;
  if (f.seed_noise) c.seed_noise = *f.seed_noise;
  if (f.out) c.out = *f.out;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-step predictor and MPC pipeline for in-silico glucose control"};
  app.require_subcommand(1);
  Flags f;
  app.add_flag("--dump-config", f.dump_config, "print the resolved config and exit");

  auto* gen = app.add_subcommand("gen-data", "simulate Scenario I/II/III datasets");
  add_common(gen, f, {"I", "II", "III", "all"});
  auto* train = app.add_subcommand("train", "fit F_T, G_T and the ARX model");
  add_common(train, f, {"all"});
  auto* validate = app.add_subcommand("validate", "prediction accuracy on Scenario III");
  add_common(validate, f, {"III", "all"});
  auto* closed = app.add_subcommand("closed-loop", "48 h closed-loop runs, Scenarios A/B/C");
  add_common(closed, f, {"A", "B", "C", "all"});
  closed->add_option("--controller", f.controller, "multistep, arx or both (default)")
      ->check(CLI::IsMember({"multistep", "arx", "both"}));
  auto* report = app.add_subcommand("report", "rebuild tables from existing outputs");
  add_common(report, f, {"all"});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  apmpc::RunConfig cfg;
  try {
    cfg = resolve(command, f);
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "apmpc: " << e.what() << '\n';
    return 1;
  }
  if (f.dump_config) {
    std::cout << apmpc::describe_config(cfg);
    return 0;
  }

  const apmpc::Logger log = [](const std::string& m) { std::cerr << "[apmpc] " << m << '\n'; };
  try {
    if (command == "gen-data") apmpc::cmd_gen_data(cfg, log);
    else if (command == "train") apmpc::cmd_train(cfg, log);
    else if (command == "validate") apmpc::cmd_validate(cfg, log);
    else if (command == "closed-loop") apmpc::cmd_closed_loop(cfg, log);
    else apmpc::cmd_report(cfg, log);
  } catch (const std::exception& e) {
    std::cerr << "apmpc " << command << ": " << e.what() << '\n';
    return 2;
  }
  return 0;
}
