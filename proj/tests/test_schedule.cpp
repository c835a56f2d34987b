#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>

#include "checkpoint.hpp"
#include "schedule.hpp"

using namespace xs;
namespace fs = std::filesystem;

namespace {

TrainConfig small_config() {
  TrainConfig c = TrainConfig::desk();
  c.image_height = 32;
  c.image_width = 32;
  c.max_disparity = 8;
  c.batch_size = 2;
  c.network.stn_base_width = 4;
  c.network.smn_base_width = 4;
  c.network.num_residual_blocks = 1;
  c.network.num_smn_scales = 3;
  c.warmup_epochs = 1;
  c.joint_epochs = 1;
  c.seed = 11;
  c.resolve();
  return c;
}

std::vector<SpectralPair> small_dataset(int n, std::uint64_t seed0 = 100) {
  std::vector<SpectralPair> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(generate_synthetic(
        random_scene_spec(seed0 + i, 2, 1, 6, SpectralTransform::cross_spectral()), 32, 32));
  }
  return out;
}

using Snapshot = std::array<std::vector<float>, 6>;

Snapshot snapshot(const Networks& nets) {
  Snapshot s;
  for (NetId id : kAllNets) {
    auto& v = s[static_cast<int>(id)];
    for (const auto& p : nets.get(id).parameters()) {
      v.insert(v.end(), p.value.data().begin(), p.value.data().end());
    }
  }
  return s;
}

std::set<NetId> differing(const Snapshot& a, const Snapshot& b) {
  std::set<NetId> out;
  for (NetId id : kAllNets) {
    if (a[static_cast<int>(id)] != b[static_cast<int>(id)]) out.insert(id);
  }
  return out;
}

Batch batch_of(const std::vector<SpectralPair>& data, std::uint64_t seed) {
  std::vector<const SpectralPair*> items;
  for (const auto& p : data) items.push_back(&p);
  std::mt19937_64 rng(seed);
  return make_batch(items, 0.5, rng);
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TrainOptions options(const fs::path& dir, bool resume = false) {
  TrainOptions o;
  o.out_dir = dir.string();
  o.resume = resume;
  return o;
}

const std::set<NetId> kStn{NetId::f, NetId::g_a, NetId::g_b};
const std::set<NetId> kDisc{NetId::d_a, NetId::d_b};

}  // namespace

TEST_CASE("permitted sets per step") {
  CHECK(permitted_sets(1) == std::vector<NetId>{NetId::d_a, NetId::d_b});
  CHECK(permitted_sets(2) == std::vector<NetId>{NetId::f, NetId::g_a, NetId::g_b});
  CHECK(permitted_sets(3) == std::vector<NetId>{NetId::smn});
  CHECK(permitted_sets(4) == std::vector<NetId>{NetId::f, NetId::g_a, NetId::g_b});
  CHECK_THROWS(permitted_sets(0));
  CHECK_THROWS(permitted_sets(5));
}

TEST_CASE("fingerprint notices a single-bit change") {
  auto nets = make_networks(small_config());
  const auto before = nets.smn.fingerprint();
  float& v = nets.smn.parameters().back().value.mutable_data()[0];
  v = std::nextafter(v, 1.f);
  CHECK(nets.smn.fingerprint() != before);
}

TEST_CASE("warmup touches only the translation and discriminator networks") {
  const auto cfg = small_config();
  auto nets = make_networks(cfg);
  const auto data = small_dataset(2);
  for (int it = 0; it < 3; ++it) {
    const Snapshot before = snapshot(nets);
    const StepLog log = run_iteration(batch_of(data, it), nets, cfg, Phase::warmup, 0, it);
    const Snapshot after = snapshot(nets);
    std::set<NetId> expect = kStn;
    expect.insert(kDisc.begin(), kDisc.end());
    CHECK(differing(before, after) == expect);
    CHECK(log.violation().empty());
    CHECK(log.steps[0].ran);
    CHECK(log.steps[1].ran);
    CHECK_FALSE(log.steps[2].ran);
    CHECK_FALSE(log.steps[3].ran);
    CHECK(std::isnan(log.loss_smn()));
    CHECK(std::isnan(log.loss_aux()));
  }
}

TEST_CASE("joint iterations keep every step inside its sets") {
  const auto cfg = small_config();
  auto nets = make_networks(cfg);
  const auto data = small_dataset(2);
  for (int it = 0; it < 20; ++it) {
    const Snapshot before = snapshot(nets);
    const StepLog log = run_iteration(batch_of(data, 50 + it), nets, cfg, Phase::joint, 0, it);
    CHECK(differing(before, snapshot(nets)).size() == 6);
    CHECK(log.violation().empty());
    for (int s = 1; s <= 4; ++s) {
      CHECK(log.steps[s - 1].ran);
      CHECK(log.steps[s - 1].changed == permitted_sets(s));
    }
    for (NetId id : kStn) {
      CHECK(log.steps[2].grad_norm[static_cast<int>(id)] == 0.0);
      CHECK_FALSE(log.steps[2].has_grad[static_cast<int>(id)]);
    }
    CHECK(log.steps[2].grad_norm[static_cast<int>(NetId::smn)] > 0.0);
    // Step 4 sees the stereo network only through detached disparities.
    CHECK(log.steps[3].grad_norm[static_cast<int>(NetId::smn)] == 0.0);
  }
}

TEST_CASE("without the auxiliary loss step 4 is skipped") {
  auto cfg = small_config();
  cfg.use_aux = false;
  auto nets = make_networks(cfg);
  const auto log = run_iteration(batch_of(small_dataset(2), 3), nets, cfg, Phase::joint);
  CHECK(log.steps[2].ran);
  CHECK_FALSE(log.steps[3].ran);
  CHECK(log.violation().empty());
}

TEST_CASE("stereo-only configuration never touches the translation networks") {
  auto cfg = small_config();
  cfg.use_stn = false;
  cfg.use_aux = false;
  cfg.input_mode = InputMode::ori;
  cfg.resolve();
  auto nets = make_networks(cfg);
  const auto data = small_dataset(2);
  const Snapshot before = snapshot(nets);
  const auto summary = train(data, nets, cfg);
  CHECK(summary.epochs_total == 1);
  CHECK(differing(before, snapshot(nets)) == std::set<NetId>{NetId::smn});
}

TEST_CASE("violation() reports out-of-set changes") {
  StepLog log;
  log.phase = Phase::joint;
  log.steps[2].ran = true;
  log.steps[2].changed = {NetId::smn, NetId::f};
  CHECK_FALSE(log.violation().empty());
  log.steps[2].changed = {NetId::smn};
  CHECK(log.violation().empty());
  log.steps[2].has_grad[static_cast<int>(NetId::g_a)] = true;
  CHECK(log.violation().find("G_A") != std::string::npos);
}

TEST_CASE("loss table layout") {
  CHECK(loss_table_header() == "epoch\titeration\tL_D\tL_G\tL_SMN\tL_aux\n");
  StepLog log;
  log.epoch = 2;
  log.iteration = 17;
  log.steps[0].loss = 0.5;
  log.steps[1].loss = 12.25;
  CHECK(loss_table_row(log) == "2\t17\t0.5\t12.25\t-\t-\n");
}

TEST_CASE("training is bitwise reproducible from the seed") {
  const auto cfg = small_config();
  const auto data = small_dataset(4);
  auto a = make_networks(cfg), b = make_networks(cfg);
  const auto sa = train(data, a, cfg), sb = train(data, b, cfg);
  CHECK(sa.loss_table == sb.loss_table);
  CHECK(snapshot(a) == snapshot(b));
  // Header + 2 epochs x 2 iterations.
  CHECK(std::count(sa.loss_table.begin(), sa.loss_table.end(), '\n') == 5);

  auto other = cfg;
  other.seed = 12;
  auto c = make_networks(other);
  CHECK(train(data, c, other).loss_table != sa.loss_table);
}

TEST_CASE("checkpoints round-trip bitwise") {
  const auto cfg = small_config();
  auto nets = make_networks(cfg);
  train(small_dataset(2), nets, cfg);
  const fs::path dir = fs::temp_directory_path() / "xs_test_ck";
  fs::remove_all(dir);
  save_checkpoint(dir.string(), nets, {2, 2}, serialize_config(cfg));
  const auto ck = load_checkpoint(dir.string());
  CHECK(snapshot(ck.nets) == snapshot(nets));
  CHECK(ck.progress.epochs_done == 2);
  CHECK(ck.progress.global_step == 2);
  CHECK(ck.config_text == serialize_config(cfg));
  for (NetId id : kAllNets) {
    const auto& x = nets.get(id);
    const auto& y = ck.nets.get(id);
    CHECK(x.update_counter() == y.update_counter());
    REQUIRE(x.parameters().size() == y.parameters().size());
    for (std::size_t i = 0; i < x.parameters().size(); ++i) {
      CHECK(x.parameters()[i].name == y.parameters()[i].name);
      CHECK(x.parameters()[i].moments.m == y.parameters()[i].moments.m);
      CHECK(x.parameters()[i].moments.v == y.parameters()[i].moments.v);
      CHECK(x.parameters()[i].moments.step == y.parameters()[i].moments.step);
    }
  }
  const fs::path again = fs::temp_directory_path() / "xs_test_ck2";
  fs::remove_all(again);
  save_checkpoint(again.string(), ck.nets, ck.progress, ck.config_text);
  CHECK(slurp(dir / "weights.bin") == slurp(again / "weights.bin"));
  CHECK(slurp(dir / "state.txt") == slurp(again / "state.txt"));
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto cfg = small_config();
  const auto nets = make_networks(cfg);
  const fs::path dir = fs::temp_directory_path() / "xs_test_ck_bad";
  fs::remove_all(dir);
  save_checkpoint(dir.string(), nets, {});
  const std::string bytes = slurp(dir / "weights.bin");
  std::ofstream(dir / "weights.bin", std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(dir.string()), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint((fs::temp_directory_path() / "xs_missing_ck").string()), CheckpointError);
}

TEST_CASE("an interrupted run resumes to the same result") {
  auto cfg = small_config();
  cfg.warmup_epochs = 1;
  cfg.joint_epochs = 2;
  const auto data = small_dataset(4);
  const fs::path full_dir = fs::temp_directory_path() / "xs_test_resume_full";
  const fs::path part_dir = fs::temp_directory_path() / "xs_test_resume_part";
  fs::remove_all(full_dir);
  fs::remove_all(part_dir);

  auto full = make_networks(cfg);
  const auto whole = train(data, full, cfg, options(full_dir));

  auto first = cfg;
  first.joint_epochs = 1;
  auto part = make_networks(cfg);
  train(data, part, first, options(part_dir));
  auto resumed = make_networks(cfg);
  const auto rest = train(data, resumed, cfg, options(part_dir, true));
  CHECK(rest.epochs_run == 1);
  CHECK(rest.loss_table == whole.loss_table);
  CHECK(snapshot(resumed) == snapshot(full));
  CHECK(slurp(part_dir / "losses.tsv") == slurp(full_dir / "losses.tsv"));
  CHECK(fs::exists(full_dir / "checkpoints" / "epoch_0003" / "weights.bin"));
  CHECK(fs::exists(full_dir / "checkpoints" / "latest" / "weights.bin"));
  CHECK(slurp(full_dir / "config.txt") == serialize_config(cfg));
}

TEST_CASE("a non-finite loss aborts with diagnostics") {
  const auto cfg = small_config();
  auto nets = make_networks(cfg);
  nets.d_b.parameters()[0].value.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    run_iteration(batch_of(small_dataset(2), 1), nets, cfg, Phase::warmup);
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    const std::string msg = e.what();
    CHECK(msg.find("step 1") != std::string::npos);
    CHECK(msg.find("D_B") != std::string::npos);
  }
}

TEST_CASE("train rejects mismatched inputs") {
  const auto cfg = small_config();
  auto nets = make_networks(cfg);
  CHECK_THROWS_AS(train({}, nets, cfg), std::invalid_argument);
  auto ori = cfg;
  ori.input_mode = InputMode::ori;
  CHECK_THROWS_AS(train(small_dataset(1), nets, ori), std::invalid_argument);
}

TEST_CASE("batches flip only the translation stream") {
  const auto data = small_dataset(2);
  std::vector<const SpectralPair*> items{&data[0], &data[1]};
  std::mt19937_64 rng(0);
  const auto b = make_batch(items, 1.0, rng);
  CHECK(b.left.shape() == Shape{2, 3, 32, 32});
  for (int x = 0; x < 32; ++x) {
    CHECK(b.left.at(1, 2, 5, x) == data[1].left_vis.at(0, 2, 5, x));
    CHECK(b.stn_left.at(1, 2, 5, x) == data[1].left_vis.at(0, 2, 5, 31 - x));
  }
}

TEST_CASE("predict_disparity is sized to the input and bounded") {
  const auto cfg = small_config();
  const auto nets = make_networks(cfg);
  const auto pair = small_dataset(1)[0];
  const auto d = predict_disparity(nets, cfg, pair);
  CHECK(d.shape() == Shape{1, 1, 32, 32});
  for (float v : d.data()) {
    CHECK(v >= 0.f);
    CHECK(v <= 32.f);
  }
}

TEST_CASE("warmup lowers the median generator loss") {
  TrainConfig c = small_config();
  c.warmup_epochs = 8;
  c.joint_epochs = 0;
  c.network.stn_base_width = 8;
  const auto data = small_dataset(16);
  Networks nets = make_networks(c);
  const TrainSummary s = train(data, nets, c);
  auto median_of_epoch = [&](int epoch) {
    std::vector<double> v;
    for (const auto& log : s.logs) {
      if (log.epoch == epoch) v.push_back(log.loss_g());
    }
    REQUIRE(!v.empty());
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double first = median_of_epoch(s.logs.front().epoch);
  const double last = median_of_epoch(s.logs.back().epoch);
  CHECK(last < first);
}
