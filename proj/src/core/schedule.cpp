#include "schedule.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "checkpoint.hpp"
#include "log.hpp"
#include "optim.hpp"
#include "warp.hpp"

namespace xs {

namespace fs = std::filesystem;

const std::vector<NetId>& permitted_sets(int step) {
  static const std::vector<NetId> d{NetId::d_a, NetId::d_b};
  static const std::vector<NetId> fg{NetId::f, NetId::g_a, NetId::g_b};
  static const std::vector<NetId> s{NetId::smn};
  switch (step) {
    case 1: return d;
    case 2: return fg;
    case 3: return s;
    case 4: return fg;
  }
  throw std::out_of_range("step must be 1..4");
}

std::string StepLog::violation() const {
  std::string out;
  for (int s = 1; s <= 4; ++s) {
    const StepRecord& r = steps[s - 1];
    if (!r.ran) {
      if (!r.changed.empty()) out += "step " + std::to_string(s) + " skipped but changed sets; ";
      continue;
    }
    if (r.changed != permitted_sets(s)) {
      out += "step " + std::to_string(s) + " changed {";
      for (NetId id : r.changed) out += std::string(net_name(id)) + " ";
      out += "}; ";
    }
  }
  if (steps[2].ran) {
    for (NetId id : {NetId::f, NetId::g_a, NetId::g_b}) {
      if (steps[2].has_grad[static_cast<int>(id)]) {
        out += std::string("step 3 produced gradient in ") + net_name(id) + "; ";
      }
    }
  }
  if (phase == Phase::warmup && (steps[2].ran || steps[3].ran)) {
    out += "stereo steps ran during warmup; ";
  }
  return out;
}

Batch make_batch(const std::vector<const SpectralPair*>& pairs, double flip_probability,
                 std::mt19937_64& rng) {
  std::vector<Tensorf> l, r, fl, fr;
  for (const SpectralPair* p : pairs) {
    l.push_back(p->left_vis);
    r.push_back(p->right_nir);
    const SpectralPair flipped = augment_flip(*p, flip_probability, rng);
    fl.push_back(flipped.left_vis);
    fr.push_back(flipped.right_nir);
  }
  return {stack_batch(l), stack_batch(r), stack_batch(fl), stack_batch(fr)};
}

namespace {

struct Fingerprints {
  std::array<std::uint64_t, 6> h{};
};

Fingerprints fingerprints(const Networks& nets) {
  Fingerprints f;
  for (NetId id : kAllNets) f.h[static_cast<int>(id)] = nets.get(id).fingerprint();
  return f;
}

std::vector<NetId> changed_between(const Fingerprints& a, const Fingerprints& b) {
  std::vector<NetId> out;
  for (NetId id : kAllNets) {
    if (a.h[static_cast<int>(id)] != b.h[static_cast<int>(id)]) out.push_back(id);
  }
  return out;
}

void record_grads(const Networks& nets, StepRecord& r) {
  for (NetId id : kAllNets) {
    const ParameterSet& ps = nets.get(id);
    r.grad_norm[static_cast<int>(id)] = ps.grad_norm();
    r.has_grad[static_cast<int>(id)] = ps.has_nonzero_grad();
  }
}

void check_finite(const StepLog& log, int step, double value) {
  if (std::isfinite(value)) return;
  std::ostringstream msg;
  msg << "non-finite loss in step " << step << " (epoch " << log.epoch << ", iteration "
      << log.iteration << "):";
  for (const auto& [name, v] : log.components) msg << " " << name << "=" << v;
  for (int s = 0; s < 4; ++s) {
    if (!log.steps[s].ran) continue;
    msg << " | step " << s + 1 << " grad norms";
    for (NetId id : kAllNets) {
      msg << " " << net_name(id) << "=" << log.steps[s].grad_norm[static_cast<int>(id)];
    }
  }
  throw TrainingAborted(msg.str());
}

void update(Networks& nets, const std::vector<NetId>& ids, const AdamSettings& adam) {
  for (NetId id : ids) adam_update(nets.get(id), adam);
}

}  // namespace

StepLog run_iteration(const Batch& batch, Networks& nets, const TrainConfig& config,
                      Phase phase, int epoch, std::int64_t iteration) {
  StepLog log;
  log.epoch = epoch;
  log.iteration = iteration;
  log.phase = phase;
  const LossWeights& w = config.weights;
  nets.clear_grads();
  Fingerprints before = fingerprints(nets);
  auto finish_step = [&](int step) {
    const Fingerprints after = fingerprints(nets);
    log.steps[step - 1].changed = changed_between(before, after);
    before = after;
  };

  if (config.use_stn) {
    // Step 1: discriminators against detached fakes.
    {
      Tensorf fake_b, fake_a;
      {
        NoGradGuard no_grad;
        fake_b = nets.to_spectrum_b(batch.stn_left);
        fake_a = nets.to_spectrum_a(batch.stn_right);
      }
      const auto adv_b = adversarial_losses(discriminate(batch.stn_right, nets.d_b),
                                            discriminate(fake_b, nets.d_b));
      const auto adv_a = adversarial_losses(discriminate(batch.stn_left, nets.d_a),
                                            discriminate(fake_a, nets.d_a));
      Tensorf loss = stn_discriminator_total(adv_a.loss_d, adv_b.loss_d, w);
      StepRecord& r = log.steps[0];
      r.ran = true;
      r.loss = loss.item();
      log.components.emplace_back("D_A", adv_a.loss_d.item());
      log.components.emplace_back("D_B", adv_b.loss_d.item());
      check_finite(log, 1, r.loss);
      backward(loss);
      record_grads(nets, r);
      update(nets, permitted_sets(1), config.adam);
      finish_step(1);
    }
    // Step 2: translation networks; discriminator gradients are discarded.
    {
      const auto b = nets.translate(batch.stn_left, batch.stn_right);
      Tensorf cyc = cycle_loss(b, batch.stn_left, batch.stn_right);
      Tensorf rec = reconstruction_loss(b, batch.stn_left, batch.stn_right);
      Tensorf adv = add(lsgan_generator_loss(discriminate(b.fake_b, nets.d_b)),
                        lsgan_generator_loss(discriminate(b.fake_a, nets.d_a)));
      Tensorf loss = stn_generator_total(cyc, rec, adv, w);
      StepRecord& r = log.steps[1];
      r.ran = true;
      r.loss = loss.item();
      log.components.emplace_back("cycle", cyc.item());
      log.components.emplace_back("reconstruction", rec.item());
      log.components.emplace_back("adversarial_g", adv.item());
      check_finite(log, 2, r.loss);
      backward(loss);
      record_grads(nets, r);
      update(nets, permitted_sets(2), config.adam);
      nets.d_a.clear_grads();
      nets.d_b.clear_grads();
      finish_step(2);
    }
  }
  if (phase == Phase::warmup) return log;

  const int h = config.image_height, wd = config.image_width;
  // Step 3: stereo network on detached translations.
  {
    SupervisionSources<float> src{batch.left, batch.right, {}, {}};
    if (config.use_stn) {
      NoGradGuard no_grad;
      src.fake_nir_left = nets.to_spectrum_b(batch.left);
      src.fake_vis_right = nets.to_spectrum_a(batch.right);
    }
    const SmnInputs in = prepare_smn_inputs(batch.left, batch.right, src.fake_nir_left,
                                            src.fake_vis_right, config.input_mode, h, wd);
    const auto scales = smn_predict(in.left, in.right, nets.smn, nets.spec);
    const auto [sup_l, sup_r] = select_supervision(src, config.supervision_mode);
    SmnLossParts parts;
    Tensorf loss = smn_total(scales, sup_l, sup_r, w, &parts);
    StepRecord& r = log.steps[2];
    r.ran = true;
    r.loss = loss.item();
    log.components.emplace_back("appearance", parts.appearance);
    log.components.emplace_back("smoothness", parts.smoothness);
    log.components.emplace_back("lr", parts.lr);
    check_finite(log, 3, r.loss);
    backward(loss);
    record_grads(nets, r);
    update(nets, permitted_sets(3), config.adam);
    finish_step(3);
  }
  // Step 4: translations against originals warped by the frozen stereo network.
  if (config.use_stn && config.use_aux) {
    Tensorf fake_nir_left = nets.to_spectrum_b(batch.left);
    Tensorf fake_vis_right = nets.to_spectrum_a(batch.right);
    Tensorf d_left, d_right;
    {
      NoGradGuard no_grad;
      const SmnInputs in =
          prepare_smn_inputs(batch.left, batch.right, fake_nir_left.detach(),
                             fake_vis_right.detach(), config.input_mode, h, wd);
      const auto scales = smn_predict(in.left, in.right, nets.smn, nets.spec);
      d_left = scales[0].left.detach();
      d_right = scales[0].right.detach();
    }
    WarpResult<float> wl, wr;
    {
      NoGradGuard no_grad;
      wl = warp_horizontal(batch.right, d_left, WarpDirection::left_from_right);
      wr = warp_horizontal(batch.left, d_right, WarpDirection::right_from_left);
    }
    Tensorf loss = auxiliary_loss(fake_nir_left, fake_vis_right, wl.warped, wr.warped,
                                  wl.valid_mask, wr.valid_mask, w);
    StepRecord& r = log.steps[3];
    r.ran = true;
    r.loss = loss.item();
    check_finite(log, 4, r.loss);
    backward(loss);
    record_grads(nets, r);
    update(nets, permitted_sets(4), config.adam);
    finish_step(4);
  }
  return log;
}

std::string loss_table_header() { return "epoch\titeration\tL_D\tL_G\tL_SMN\tL_aux\n"; }

std::string loss_table_row(const StepLog& log) {
  auto cell = [](double v) {
    if (std::isnan(v)) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  return std::to_string(log.epoch) + "\t" + std::to_string(log.iteration) + "\t" +
         cell(log.loss_d()) + "\t" + cell(log.loss_g()) + "\t" + cell(log.loss_smn()) + "\t" +
         cell(log.loss_aux()) + "\n";
}

Networks make_networks(const TrainConfig& config) {
  TrainConfig c = config;
  c.resolve();
  return Networks::create(c.network, c.seed);
}

Tensorf predict_disparity(const Networks& nets, const TrainConfig& config,
                          const SpectralPair& pair) {
  NoGradGuard no_grad;
  Tensorf fake_nir_left, fake_vis_right;
  if (config.input_mode == InputMode::concat) {
    fake_nir_left = nets.to_spectrum_b(pair.left_vis);
    fake_vis_right = nets.to_spectrum_a(pair.right_nir);
  }
  const SmnInputs in = prepare_smn_inputs(pair.left_vis, pair.right_nir, fake_nir_left,
                                          fake_vis_right, config.input_mode, pair.height(),
                                          pair.width());
  return smn_predict(in.left, in.right, nets.smn, nets.spec)[0].left;
}

namespace {

std::mt19937_64 epoch_rng(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  return std::mt19937_64(seq);
}

std::string epoch_dir_name(int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04d", epoch);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace

TrainSummary train(const std::vector<SpectralPair>& dataset, Networks& nets,
                   const TrainConfig& config_in, const TrainOptions& options) {
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  TrainConfig config = config_in;
  config.resolve();
  if (nets.spec.smn_input_channels != config.network.smn_input_channels) {
    throw std::invalid_argument("train: networks were built for a different input_mode");
  }
  std::vector<SpectralPair> pairs;
  pairs.reserve(dataset.size());
  for (const auto& p : dataset) {
    pairs.push_back(resize_pair(p, config.image_height, config.image_width));
  }

  const int warmup = config.use_stn ? config.warmup_epochs : 0;
  TrainSummary summary;
  summary.epochs_total = warmup + config.joint_epochs;
  summary.loss_table = loss_table_header();

  const bool writing = !options.out_dir.empty();
  const fs::path out(options.out_dir);
  const fs::path ck_root = out / "checkpoints";
  int start_epoch = 0;
  std::int64_t step = 0;
  if (writing) {
    fs::create_directories(ck_root);
    write_text(out / "config.txt", serialize_config(config));
    if (options.resume && fs::exists(ck_root / "latest")) {
      Checkpoint ck = load_checkpoint((ck_root / "latest").string());
      if (ck.nets.spec.smn_input_channels != nets.spec.smn_input_channels) {
        throw std::invalid_argument("resume: checkpoint built for a different input_mode");
      }
      nets = std::move(ck.nets);
      start_epoch = ck.progress.epochs_done;
      step = ck.progress.global_step;
      std::ifstream prev(out / "losses.tsv");
      std::string line;
      std::getline(prev, line);  // header
      while (std::getline(prev, line)) {
        const int e = std::atoi(line.c_str());
        if (e < start_epoch) summary.loss_table += line + "\n";
      }
      log_info("resuming after epoch " + std::to_string(start_epoch));
    }
  }

  const std::size_t n = pairs.size();
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  for (int epoch = start_epoch; epoch < summary.epochs_total; ++epoch) {
    const Phase phase = epoch < warmup ? Phase::warmup : Phase::joint;
    std::mt19937_64 rng = epoch_rng(config.seed, epoch);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t first = 0; first < n; first += bs) {
      std::vector<const SpectralPair*> items;
      for (std::size_t i = first; i < std::min(n, first + bs); ++i) {
        items.push_back(&pairs[order[i]]);
      }
      const Batch batch = make_batch(items, config.flip_probability, rng);
      StepLog log = run_iteration(batch, nets, config, phase, epoch, step++);
      if (const std::string v = log.violation(); !v.empty()) {
        throw TrainingAborted("step isolation violated: " + v);
      }
      summary.loss_table += loss_table_row(log);
      if (options.on_step) options.on_step(log);
      summary.logs.push_back(std::move(log));
    }
    ++summary.epochs_run;
    log_info("epoch " + std::to_string(epoch + 1) + "/" + std::to_string(summary.epochs_total) +
             " done");
    if (writing) {
      const fs::path dir = ck_root / epoch_dir_name(epoch + 1);
      const TrainProgress progress{epoch + 1, step};
      const std::string cfg = serialize_config(config);
      save_checkpoint(dir.string(), nets, progress, cfg);
      save_checkpoint((ck_root / "latest").string(), nets, progress, cfg);
      if (!config.keep_checkpoints && epoch > start_epoch) {
        fs::remove_all(ck_root / epoch_dir_name(epoch));
      }
      write_text(out / "losses.tsv", summary.loss_table);
    }
  }
  return summary;
}

}  // namespace xs
