// xstereo: train, evaluate, translate and self-check through the C API.

#include <cmath>
#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "xs/xs.h"

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

int report(xs_status status) {
  if (status == XS_OK) return kOk;
  std::fprintf(stderr, "xstereo: %s\n", xs_last_error());
  return status == XS_ERR_TRAINING ? kFailure : kUsage;
}

struct ConfigHandle {
  xs_config* ptr = nullptr;
  ~ConfigHandle() { xs_config_free(ptr); }
};

struct ModelHandle {
  xs_model* ptr = nullptr;
  ~ModelHandle() { xs_model_free(ptr); }
};

void print_progress(int epoch, long long iteration, double ld, double lg, double ls, double la,
                    void*) {
  auto cell = [](double v) { return std::isnan(v) ? std::string("-") : std::to_string(v); };
  std::printf("epoch %d iter %lld  L_D %s  L_G %s  L_SMN %s  L_aux %s\n", epoch, iteration,
              cell(ld).c_str(), cell(lg).c_str(), cell(ls).c_str(), cell(la).c_str());
  std::fflush(stdout);
}

void print_check(const char* suite, const char* name, int passed, const char* detail, void*) {
  std::printf("[%s] %-8s %s: %s\n", passed ? "PASS" : "FAIL", suite, name, detail);
  std::fflush(stdout);
}

void print_summary(const char* label, const xs_eval_summary& s) {
  std::printf("%s: pairs %d  rmse %.4f  mae %.4f  coverage %.4f  region mean %.4f\n", label,
              s.pairs, s.rmse, s.mean_abs_error, s.coverage, s.region_mean);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-spectral stereo: translation + stereo networks trained jointly"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  std::string config_path, out_dir, manifest, checkpoint, image, direction, out_path;
  std::string oracle = "none", subset = "all";
  unsigned long long seed = 0;
  bool resume = false, verbose = false;
  app.add_flag("--verbose", verbose, "Log progress to stderr");

  auto* train = app.add_subcommand("train", "Train on a dataset manifest");
  train->add_option("manifest", manifest, "Manifest: left<TAB>right[<TAB>gt] per line")->required();
  train->add_option("--config", config_path, "Config file (key = value)");
  train->add_option("--out", out_dir, "Output directory")->required();
  auto* seed_opt = train->add_option("--seed", seed, "Override the config seed");
  train->add_flag("--resume", resume, "Continue from out/checkpoints/latest");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest with ground truth");
  eval->add_option("checkpoint", checkpoint, "Checkpoint directory")->required();
  eval->add_option("manifest", manifest, "Manifest with ground truth")->required();
  eval->add_option("--out", out_dir, "Output directory")->required();
  eval->add_option("--oracle", oracle, "Also score an oracle")
      ->check(CLI::IsMember({"none", "block-match", "gt"}));

  auto* translate = app.add_subcommand("translate", "Translate an image between spectra");
  translate->add_option("checkpoint", checkpoint, "Checkpoint directory")->required();
  translate->add_option("image", image, "Input image")->required();
  translate->add_option("direction", direction, "a2b (VIS to NIR) or b2a")->required();
  translate->add_option("output", out_path, "Output PNG")->required();

  auto* check = app.add_subcommand("check", "Run verification suites");
  check->add_option("subset", subset, "grad, invariants, oracle or all");
  auto* check_seed = check->add_option("--seed", seed, "Seed for random inputs");

  int count = 64, height = 64, width = 64, layers = 3, min_disp = 0, max_disp = 16;
  bool cross = false;
  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset and manifest");
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--count", count, "Number of pairs");
  synth->add_option("--height", height, "Image height");
  synth->add_option("--width", width, "Image width");
  synth->add_option("--layers", layers, "Maximum layer count");
  synth->add_option("--min-disparity", min_disp, "Smallest layer disparity");
  synth->add_option("--max-disparity", max_disp, "Largest layer disparity");
  synth->add_flag("--cross-spectral", cross, "Apply the VIS to NIR transform to right views");
  synth->add_option("--seed", seed, "Scene seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  xs_set_log_level(verbose ? XS_LOG_INFO : XS_LOG_WARNING);

  if (train->parsed()) {
    ConfigHandle cfg;
    const xs_status st = config_path.empty() ? xs_config_create_default(&cfg.ptr)
                                             : xs_config_load(config_path.c_str(), nullptr, &cfg.ptr);
    if (st != XS_OK) return report(st);
    if (seed_opt->count() > 0) {
      const std::string s = std::to_string(seed);
      if (const xs_status r = xs_config_set(cfg.ptr, "seed", s.c_str()); r != XS_OK) return report(r);
    }
    return report(xs_train(cfg.ptr, manifest.c_str(), out_dir.c_str(), resume ? 1 : 0,
                           verbose ? print_progress : nullptr, nullptr));
  }

  if (eval->parsed()) {
    ModelHandle model;
    if (const xs_status st = xs_model_load(checkpoint.c_str(), &model.ptr); st != XS_OK) {
      return report(st);
    }
    const xs_oracle o = oracle == "block-match" ? XS_ORACLE_BLOCK_MATCH
                        : oracle == "gt"        ? XS_ORACLE_GT
                                                : XS_ORACLE_NONE;
    xs_eval_summary s{}, os{};
    if (const xs_status st = xs_evaluate(model.ptr, manifest.c_str(), out_dir.c_str(), o, &s, &os);
        st != XS_OK) {
      return report(st);
    }
    print_summary("model", s);
    if (o != XS_ORACLE_NONE) print_summary(oracle.c_str(), os);
    return std::isfinite(s.rmse) ? kOk : kFailure;
  }

  if (translate->parsed()) {
    if (direction != "a2b" && direction != "b2a") {
      std::fprintf(stderr, "xstereo: direction must be a2b or b2a, got '%s'\n", direction.c_str());
      return kUsage;
    }
    ModelHandle model;
    if (const xs_status st = xs_model_load(checkpoint.c_str(), &model.ptr); st != XS_OK) {
      return report(st);
    }
    return report(xs_translate_file(model.ptr, image.c_str(),
                                    direction == "a2b" ? XS_A2B : XS_B2A, out_path.c_str()));
  }

  if (check->parsed()) {
    int failures = 0;
    const unsigned long long s = check_seed->count() > 0 ? seed : 1;
    if (const xs_status st = xs_run_checks(subset.c_str(), s, print_check, nullptr, &failures);
        st != XS_OK) {
      return report(st);
    }
    std::printf("%d failure(s)\n", failures);
    return failures == 0 ? kOk : kFailure;
  }

  if (synth->parsed()) {
    return report(xs_generate_synthetic(out_dir.c_str(), count, height, width, layers, min_disp,
                                        max_disp, cross ? 1 : 0, seed));
  }
  return kUsage;
}
