#include "xs/xs.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "../core/checkpoint.hpp"
#include "../core/checks.hpp"
#include "../core/config.hpp"
#include "../core/data.hpp"
#include "../core/eval.hpp"
#include "../core/image_io.hpp"
#include "../core/log.hpp"
#include "../core/schedule.hpp"

struct xs_config {
  xs::TrainConfig value;
};

struct xs_model {
  xs::Networks nets;
  xs::TrainConfig config;
};

namespace {

namespace fs = std::filesystem;

thread_local std::string g_error;

xs_status fail(xs_status status, const std::string& message) {
  g_error = message;
  return status;
}

template <typename F>
xs_status guarded(F&& body) {
  try {
    g_error.clear();
    return body();
  } catch (const xs::ConfigError& e) {
    return fail(XS_ERR_CONFIG, e.what());
  } catch (const xs::IoError& e) {
    return fail(XS_ERR_IO, e.what());
  } catch (const xs::CheckpointError& e) {
    return fail(XS_ERR_IO, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(XS_ERR_IO, e.what());
  } catch (const xs::TrainingAborted& e) {
    return fail(XS_ERR_TRAINING, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(XS_ERR_ARGUMENT, e.what());
  } catch (const std::exception& e) {
    return fail(XS_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(XS_ERR_INTERNAL, "unknown error");
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

xs_eval_summary to_summary(const xs::EvalReport& r) {
  return {r.rmse_overall, r.mean_abs_error, r.coverage, r.region_mean,
          static_cast<int>(r.pairs.size())};
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw xs::IoError("cannot write " + path.string());
  out << text;
}

}  // namespace

extern "C" {

const char* xs_last_error(void) { return g_error.c_str(); }

const char* xs_version(void) { return "1.0.0"; }

void xs_string_free(char* s) { delete[] s; }

void xs_set_log_level(xs_log_level level) {
  xs::set_log_level(static_cast<xs::LogLevel>(level));
}

xs_status xs_config_create_default(xs_config** out) {
  if (!out) return fail(XS_ERR_ARGUMENT, "out is NULL");
  return guarded([&] {
    auto* c = new xs_config{};
    c->value.resolve();
    *out = c;
    return XS_OK;
  });
}

xs_status xs_config_create_desk(xs_config** out) {
  if (!out) return fail(XS_ERR_ARGUMENT, "out is NULL");
  return guarded([&] {
    auto* c = new xs_config{xs::TrainConfig::desk()};
    c->value.resolve();
    *out = c;
    return XS_OK;
  });
}

xs_status xs_config_load(const char* path, const xs_config* base, xs_config** out) {
  if (!path || !out) return fail(XS_ERR_ARGUMENT, "path or out is NULL");
  return guarded([&] {
    *out = new xs_config{xs::load_config(path, base ? base->value : xs::TrainConfig{})};
    return XS_OK;
  });
}

xs_status xs_config_clone(const xs_config* config, xs_config** out) {
  if (!config || !out) return fail(XS_ERR_ARGUMENT, "config or out is NULL");
  return guarded([&] {
    *out = new xs_config{config->value};
    return XS_OK;
  });
}

void xs_config_free(xs_config* config) { delete config; }

xs_status xs_config_set(xs_config* config, const char* key, const char* value) {
  if (!config || !key || !value) return fail(XS_ERR_ARGUMENT, "NULL argument");
  return guarded([&] {
    xs::TrainConfig next = config->value;
    xs::set_config_value(next, key, value);
    next.resolve();
    config->value = next;
    return XS_OK;
  });
}

xs_status xs_config_get(const xs_config* config, const char* key, char** value) {
  if (!config || !key || !value) return fail(XS_ERR_ARGUMENT, "NULL argument");
  return guarded([&] {
    *value = dup_string(xs::get_config_value(config->value, key));
    return XS_OK;
  });
}

xs_status xs_config_serialize(const xs_config* config, char** text) {
  if (!config || !text) return fail(XS_ERR_ARGUMENT, "NULL argument");
  return guarded([&] {
    *text = dup_string(xs::serialize_config(config->value));
    return XS_OK;
  });
}

xs_status xs_model_create(const xs_config* config, xs_model** out) {
  if (!config || !out) return fail(XS_ERR_ARGUMENT, "NULL argument");
  return guarded([&] {
    *out = new xs_model{xs::make_networks(config->value), config->value};
    return XS_OK;
  });
}

xs_status xs_model_load(const char* checkpoint_dir, xs_model** out) {
  if (!checkpoint_dir || !out) return fail(XS_ERR_ARGUMENT, "NULL argument");
  return guarded([&] {
    xs::Checkpoint ck = xs::load_checkpoint(checkpoint_dir);
    xs::TrainConfig config;
    if (!ck.config_text.empty()) {
      config = xs::parse_config(ck.config_text);
    } else {
      config = xs::TrainConfig::desk();
      config.input_mode =
          ck.nets.spec.smn_input_channels == 12 ? xs::InputMode::concat : xs::InputMode::ori;
      config.network = ck.nets.spec;
      config.resolve();
    }
    *out = new xs_model{std::move(ck.nets), config};
    return XS_OK;
  });
}

xs_status xs_model_save(const xs_model* model, const char* checkpoint_dir) {
  if (!model || !checkpoint_dir) return fail(XS_ERR_ARGUMENT, "NULL argument");
  return guarded([&] {
    xs::save_checkpoint(checkpoint_dir, model->nets, {}, xs::serialize_config(model->config));
    return XS_OK;
  });
}

void xs_model_free(xs_model* model) { delete model; }

xs_status xs_train(const xs_config* config, const char* manifest, const char* out_dir,
                   int resume, xs_progress_fn progress, void* user) {
  if (!config || !manifest || !out_dir) return fail(XS_ERR_ARGUMENT, "NULL argument");
  return guarded([&] {
    const auto dataset = xs::load_dataset(manifest);
    xs::Networks nets = xs::make_networks(config->value);
    xs::TrainOptions options;
    options.out_dir = out_dir;
    options.resume = resume != 0;
    if (progress) {
      options.on_step = [&](const xs::StepLog& log) {
        progress(log.epoch, static_cast<long long>(log.iteration), log.loss_d(), log.loss_g(),
                 log.loss_smn(), log.loss_aux(), user);
      };
    }
    xs::train(dataset, nets, config->value, options);
    return XS_OK;
  });
}

xs_status xs_translate_file(const xs_model* model, const char* image_path,
                            xs_direction direction, const char* out_path) {
  if (!model || !image_path || !out_path) return fail(XS_ERR_ARGUMENT, "NULL argument");
  if (direction != XS_A2B && direction != XS_B2A) {
    return fail(XS_ERR_ARGUMENT, "direction must be a2b or b2a");
  }
  return guarded([&] {
    xs::NoGradGuard no_grad;
    const xs::Tensorf image = xs::load_image(image_path, true);
    const int h = image.shape().h, w = image.shape().w;
    const int nh = model->config.image_height, nw = model->config.image_width;
    const xs::Tensorf small =
        (h == nh && w == nw) ? image : xs::upsample_bilinear(image, nh, nw);
    xs::Tensorf out = direction == XS_A2B ? model->nets.to_spectrum_b(small)
                                          : model->nets.to_spectrum_a(small);
    if (h != nh || w != nw) out = xs::upsample_bilinear(out, h, w);
    xs::save_image(out_path, out);
    return XS_OK;
  });
}

xs_status xs_evaluate(const xs_model* model, const char* manifest, const char* out_dir,
                      xs_oracle oracle, xs_eval_summary* summary,
                      xs_eval_summary* oracle_summary) {
  if (!model || !manifest || !out_dir) return fail(XS_ERR_ARGUMENT, "NULL argument");
  if (oracle != XS_ORACLE_NONE && oracle != XS_ORACLE_BLOCK_MATCH && oracle != XS_ORACLE_GT) {
    return fail(XS_ERR_ARGUMENT, "unknown oracle");
  }
  return guarded([&] {
    const auto pairs = xs::load_dataset(manifest);
    for (const auto& p : pairs) {
      if (!p.has_ground_truth()) {
        throw std::invalid_argument("pair " + p.id + " has no ground truth in " + manifest);
      }
    }
    const fs::path out(out_dir);
    const fs::path diag = out / "diagnostics";
    fs::create_directories(diag);
    std::vector<xs::Tensorf> preds, oracle_preds;
    for (const auto& p : pairs) {
      const xs::ModelOutputs mo = xs::run_model(model->nets, model->config, p);
      xs::emit_diagnostics(p, mo.views, mo.prediction, model->config.max_disparity,
                           diag.string());
      xs::save_disparity((out / (p.id + "_pred.png")).string(), mo.prediction, {});
      preds.push_back(mo.prediction);
      if (oracle == XS_ORACLE_BLOCK_MATCH) {
        oracle_preds.push_back(
            xs::block_match_sad(p.left_vis, p.right_nir, model->config.max_disparity));
      } else if (oracle == XS_ORACLE_GT) {
        oracle_preds.push_back(p.gt_disparity);
      }
    }
    const xs::EvalReport report = xs::evaluate_predictions(pairs, preds);
    write_file(out / "report.tsv", xs::report_tsv(report));
    if (summary) *summary = to_summary(report);
    if (oracle != XS_ORACLE_NONE) {
      const xs::EvalReport oreport = xs::evaluate_predictions(pairs, oracle_preds);
      write_file(out / "oracle_report.tsv", xs::report_tsv(oreport));
      if (oracle_summary) *oracle_summary = to_summary(oreport);
    }
    return XS_OK;
  });
}

xs_status xs_run_checks(const char* subset, unsigned long long seed, xs_check_fn callback,
                        void* user, int* failures) {
  if (!subset) return fail(XS_ERR_ARGUMENT, "subset is NULL");
  if (!xs::valid_check_subset(subset)) {
    return fail(XS_ERR_ARGUMENT, std::string("unknown check subset '") + subset +
                                     "' (expected grad, invariants, oracle or all)");
  }
  return guarded([&] {
    int failed = 0;
    xs::run_checks(
        subset,
        [&](const xs::CheckResult& r) {
          if (!r.passed) ++failed;
          if (callback) {
            callback(r.suite.c_str(), r.name.c_str(), r.passed ? 1 : 0, r.detail.c_str(), user);
          }
        },
        seed);
    if (failures) *failures = failed;
    return XS_OK;
  });
}

xs_status xs_generate_synthetic(const char* out_dir, int count, int height, int width,
                                int max_layers, int min_disparity, int max_disparity,
                                int cross_spectral, unsigned long long seed) {
  if (!out_dir) return fail(XS_ERR_ARGUMENT, "out_dir is NULL");
  if (count < 1) return fail(XS_ERR_ARGUMENT, "count must be >= 1");
  return guarded([&] {
    const auto transform = cross_spectral ? xs::SpectralTransform::cross_spectral()
                                          : xs::SpectralTransform::identity();
    std::vector<xs::ManifestEntry> entries;
    for (int i = 0; i < count; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "scene_%04d", i);
      const auto spec = xs::random_scene_spec(seed * 1000003ull + static_cast<unsigned>(i),
                                              max_layers, min_disparity, max_disparity,
                                              transform);
      entries.push_back(xs::save_pair(xs::generate_synthetic(spec, height, width, id), out_dir));
    }
    xs::write_manifest((fs::path(out_dir) / "manifest.txt").string(), entries);
    return XS_OK;
  });
}

}  // extern "C"
