#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "hessdiag/config.hpp"
#include "hessdiag/error.hpp"
#include "hessdiag/pipeline.hpp"

namespace {

using namespace hessdiag;

struct Options {
  std::string config_path;
  std::string out_dir;
  std::string kind = "hierarchical";
};

RunConfig load(const Options& o) { return load_run_config(o.config_path); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hessian-based curvature diagnosis for small attention models"};
  app.require_subcommand(1);
  Options o;

  using Stage = void (*)(const RunConfig&, std::ostream&, const std::filesystem::path&);
  struct Entry {
    const char* name;
    const char* help;
    Stage fn;
  };
  const Entry stages[] = {
      {"train", "generate data, train, write checkpoint and trace", &cmd_train},
      {"curvature", "per-group trace and extreme eigenvalues", &cmd_curvature},
      {"perturb", "Gaussian perturbation sweeps per group", &cmd_perturb},
      {"interact", "cross-group Hessian couplings", &cmd_interact},
      {"intervene", "retrain with a scaled group learning rate", &cmd_intervene},
      {"run", "all stages in order, then report", &run_all},
  };
  for (const auto& s : stages) {
    auto* sub = app.add_subcommand(s.name, s.help);
    sub->add_option("-c,--config", o.config_path, "run config (JSON)")->required();
    sub->add_option("-o,--out", o.out_dir, "output directory (overrides output_dir)");
    sub->callback([&o, fn = s.fn] { fn(load(o), std::cout, o.out_dir); });
  }

  auto* report = app.add_subcommand("report", "assemble summary.md from an output directory");
  report->add_option("dir", o.out_dir, "output directory")->required();
  report->callback([&o] { cmd_report(o.out_dir, std::cout); });

  auto* defaults = app.add_subcommand("defaults", "print the default run config");
  defaults->add_option("-k,--kind", o.kind, "hierarchical | selfattn | crossattn");
  defaults->callback([&o] { std::cout << dump_run_config(default_run_config(parse_model_kind(o.kind))); });

  bool selftest_ok = true;
  auto* selftest = app.add_subcommand("selftest", "quick internal consistency checks");
  selftest->callback([&selftest_ok] { selftest_ok = run_selftest(std::cout); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for_current_exception();
  }
  return selftest_ok ? kExitOk : kExitFailure;
}
