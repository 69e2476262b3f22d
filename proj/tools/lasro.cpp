// Command-line driver for the experiment pipeline.
#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "lasro/harness.hpp"

namespace {

enum Exit { kOk = 0, kFailure = 1, kInvalid = 2, kPrecondition = 3 };

std::string seed_dir(const std::string& base, std::uint64_t seed, std::size_t n) {
  if (n == 1) return base;
  return (std::filesystem::path(base) / ("seed_" + std::to_string(seed))).string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LaSRO desk-scale experiments"};
  app.require_subcommand(1);

  std::string config;
  std::optional<std::uint64_t> seed;
  std::string run_dir;
  std::string method = "lasro";
  std::string probe;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "Run configuration (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Seed overriding the configured seed list");
    sub->add_option("--run-dir", run_dir, "Run directory (default: $LASRO_RUN_DIR or io.run_dir)");
  };

  for (const char* name : {"train-teacher", "distill", "pretrain-reward", "report"})
    add_common(app.add_subcommand(name));
  auto* ft = app.add_subcommand("finetune", "Fine-tune the distilled sampler");
  add_common(ft);
  ft->add_option("--method", method, "lasro, ddpo, rwr, gors, direct or altft")
      ->check(CLI::IsMember({"lasro", "ddpo", "rwr", "gors", "direct", "altft"}));
  auto* an = app.add_subcommand("analyze", "Run a diagnostic probe");
  add_common(an);
  an->add_option("--probe", probe, "td, lipschitz, diversity, fidelity or tradeoff")
      ->required()
      ->check(CLI::IsMember({"td", "lipschitz", "diversity", "fidelity", "tradeoff"}));
  an->add_option("--method", method, "Fine-tuning run used by the tradeoff probe");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kInvalid;
  }

  const std::string subcommand = app.get_subcommands().front()->get_name();
  try {
    auto cfg = lasro::harness::parse_config(config);
    if (seed) cfg.seeds = {*seed};
    if (run_dir.empty()) {
      const char* env = std::getenv("LASRO_RUN_DIR");
      run_dir = env && *env ? env : cfg.io.run_dir;
    }
    for (std::uint64_t s : cfg.seeds) {
      lasro::harness::Pipeline pipe(cfg, seed_dir(run_dir, s, cfg.seeds.size()), s);
      pipe.run(subcommand, method, probe);
      if (pipe.metrics().warnings() > 0)
        std::cerr << "warning: " << pipe.metrics().warnings()
                  << " non-finite metric values written as null\n";
      std::cout << subcommand << " done: " << pipe.run_dir() << "\n";
    }
  } catch (const lasro::ValidationError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kInvalid;
  } catch (const lasro::PreconditionError& e) {
    std::cerr << "precondition failed: " << e.what() << "\n";
    return kPrecondition;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kOk;
}
