#pragma once

#include <array>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "config.hpp"
#include "data.hpp"
#include "networks.hpp"

namespace xs {

enum class Phase { warmup, joint };

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kAbsent = std::numeric_limits<double>::quiet_NaN();

struct StepRecord {
  bool ran = false;
  double loss = kAbsent;
  std::vector<NetId> changed;        // sets whose parameters differ after the step
  std::array<double, 6> grad_norm{};  // per NetId, measured before the update
  std::array<bool, 6> has_grad{};     // any nonzero gradient, before the update
};

struct StepLog {
  int epoch = 0;
  std::int64_t iteration = 0;  // global, counts from 0
  Phase phase = Phase::warmup;
  std::array<StepRecord, 4> steps;
  // Named loss components, for diagnostics.
  std::vector<std::pair<std::string, double>> components;

  double loss_d() const { return steps[0].loss; }
  double loss_g() const { return steps[1].loss; }
  double loss_smn() const { return steps[2].loss; }
  double loss_aux() const { return steps[3].loss; }

  // Empty when every step changed exactly its permitted sets and the stereo
  // step left the translation networks without gradient.
  std::string violation() const;
};

/// Sets a step may update: {D_A, D_B}, {F, G_A, G_B}, {SMN}, {F, G_A, G_B}.
const std::vector<NetId>& permitted_sets(int step);

struct Batch {
  Tensorf left, right;          // unflipped, Bx3xHxW
  Tensorf stn_left, stn_right;  // translation stream, flipped per sample
};

/// Stacks pairs (already at network size) into a batch; one flip draw per
/// sample from rng.
Batch make_batch(const std::vector<const SpectralPair*>& pairs, double flip_probability,
                 std::mt19937_64& rng);

/// One iteration of the four-step schedule; steps 3 and 4 only in the joint
/// phase. Throws TrainingAborted on a non-finite loss.
StepLog run_iteration(const Batch& batch, Networks& nets, const TrainConfig& config,
                      Phase phase, int epoch = 0, std::int64_t iteration = 0);

struct TrainOptions {
  std::string out_dir;  // empty: no files written
  bool resume = false;
  std::function<void(const StepLog&)> on_step;
};

struct TrainSummary {
  int epochs_run = 0;
  int epochs_total = 0;
  std::vector<StepLog> logs;
  std::string loss_table;  // header + one row per iteration
};

std::string loss_table_header();
std::string loss_table_row(const StepLog& log);

/// Full schedule: warmup_epochs of steps {1, 2}, then joint_epochs of all four
/// steps. Without the translation network the warmup is skipped. Pairs are
/// resized to the configured image size; order is shuffled per epoch from the
/// seed. With out_dir set, writes out_dir/config.txt, out_dir/losses.tsv and
/// out_dir/checkpoints/epoch_NNNN each epoch (plus out_dir/checkpoints/latest).
TrainSummary train(const std::vector<SpectralPair>& dataset, Networks& nets,
                   const TrainConfig& config, const TrainOptions& options = {});

/// Networks sized for the config (input channels from input_mode), seeded from
/// config.seed.
Networks make_networks(const TrainConfig& config);

/// Disparity (scale 0, left view) for a pair already at network size.
Tensorf predict_disparity(const Networks& nets, const TrainConfig& config,
                          const SpectralPair& pair);

}  // namespace xs
