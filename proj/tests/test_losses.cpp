#include <doctest.h>

#include <cmath>
#include <random>

#include "losses.hpp"
#include "oracle.hpp"

using namespace xs;

namespace {

Tensord full(Shape s, double v) { return Tensord::full(s, v); }

Tensord fractional_disparity(Shape s, int max_whole, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> whole(0, max_whole);
  std::uniform_real_distribution<double> frac(0.2, 0.8);
  std::vector<double> d(s.numel());
  for (double& v : d) v = whole(rng) + frac(rng);
  return Tensord::from_data(s, d);
}

}  // namespace

TEST_CASE("default weights") {
  const LossWeights w;
  CHECK(w.lambda_c == 10);
  CHECK(w.lambda_r == 5);
  CHECK(w.lambda_a == 1);
  CHECK(w.lambda_d == 1);
  CHECK(w.alpha_ap == 1);
  CHECK(w.alpha_ds == 0.2);
  CHECK(w.alpha_lr == 0.1);
  CHECK(w.alpha_aux == 20);
  CHECK(w.alpha_ssim == 0.9);
  CHECK(w.ssim_window == 5);
  CHECK_NOTHROW(w.validate());

  LossWeights bad = w;
  bad.ssim_window = 4;
  CHECK_THROWS(bad.validate());
  bad = w;
  bad.alpha_ssim = 1.5;
  CHECK_THROWS(bad.validate());
  bad = w;
  bad.lambda_r = -1;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("ssim") {
  std::mt19937_64 rng(1);
  SUBCASE("self-similarity is one") {
    const auto a = oracle::random_tensor<double>({2, 3, 9, 11}, 0, 1, rng);
    const auto s = ssim(a, a, 5);
    for (double v : s.data()) CHECK(std::abs(v - 1.0) < 1e-6);
  }
  SUBCASE("inverted checkerboard is anti-correlated") {
    std::vector<double> c(64);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) c[y * 8 + x] = (x + y) % 2 ? 1.0 : 0.0;
    const auto a = Tensord::from_data({1, 1, 8, 8}, c);
    const auto b = add_scalar(mul_scalar(a, -1.0), 1.0);
    const auto s = ssim(a, b, 5);
    for (double v : s.data()) CHECK(v < 0);
  }
  SUBCASE("matches the per-pixel window formula") {
    const auto a = oracle::random_tensor<double>({1, 1, 7, 10}, 0, 1, rng);
    const auto b = oracle::random_tensor<double>({1, 1, 7, 10}, 0, 1, rng);
    const auto got = ssim(a, b, 5);
    const auto va = oracle::as_double(a), vb = oracle::as_double(b);
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 10; ++x) {
        CHECK(got.at(0, 0, y, x) == doctest::Approx(oracle::ssim_at(va, vb, 7, 10, y, x, 5)).epsilon(1e-9));
      }
  }
}

TEST_CASE("appearance_loss") {
  const LossWeights w;
  const Shape s{1, 3, 8, 8};
  const auto mask = full({1, 1, 8, 8}, 1.0);
  std::mt19937_64 rng(2);
  const auto img = oracle::random_tensor<double>(s, 0, 1, rng);
  CHECK(appearance_loss(img, img, mask, w).item() == doctest::Approx(0.0).epsilon(1e-12));

  // Flat images offset by 0.1: exact value from the SSIM formula on constants.
  const double ma = 0.5, mb = 0.6;
  const double s_flat = (2 * ma * mb + kSsimC1) / (ma * ma + mb * mb + kSsimC1);
  const double expect = 0.9 * (1 - s_flat) / 2 + 0.1 * 0.1;
  CHECK(appearance_loss(full(s, ma), full(s, mb), mask, w).item() ==
        doctest::Approx(expect).epsilon(1e-12));

  // With SSIM switched off only the L1 term remains.
  LossWeights l1_only = w;
  l1_only.alpha_ssim = 0;
  CHECK(appearance_loss(full(s, ma), full(s, mb), mask, l1_only).item() ==
        doctest::Approx(0.1).epsilon(1e-12));

  // Masked-out pixels do not contribute.
  auto recon = img.clone();
  std::vector<double> m(64, 1.0);
  for (int y = 0; y < 8; ++y) {
    m[y * 8] = 0;
    for (int c = 0; c < 3; ++c) recon.mutable_data()[c * 64 + y * 8] = 5.0;
  }
  LossWeights w1 = w;
  w1.alpha_ssim = 0;
  CHECK(appearance_loss(img, recon, Tensord::from_data({1, 1, 8, 8}, m), w1).item() == 0.0);
}

TEST_CASE("smoothness_loss") {
  const Shape ds{1, 1, 6, 8};
  CHECK(smoothness_loss(full(ds, 3.0), full({1, 3, 6, 8}, 0.4)).item() == 0.0);

  std::vector<double> ramp(48);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 8; ++x) ramp[y * 8 + x] = x;
  const auto d = Tensord::from_data(ds, ramp);
  const double flat = smoothness_loss(d, full({1, 3, 6, 8}, 0.4)).item();
  CHECK(flat == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> stripes(3 * 48);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 8; ++x) stripes[c * 48 + y * 8 + x] = x % 2;
  const double edged = smoothness_loss(d, Tensord::from_data({1, 3, 6, 8}, stripes)).item();
  CHECK(edged < flat);
  CHECK(edged == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
}

TEST_CASE("lr_consistency_loss") {
  const Shape s{1, 1, 4, 8};
  CHECK(lr_consistency_loss(full(s, 0), full(s, 0)).item() == 0.0);
  CHECK(lr_consistency_loss(full(s, 2), full(s, 2)).item() == 0.0);
  CHECK(lr_consistency_loss(full(s, 2), full(s, 2), WarpDirection::right_from_left).item() == 0.0);
  CHECK(lr_consistency_loss(full(s, 2), full(s, 3)).item() == doctest::Approx(1.0));
}

TEST_CASE("smn_total on a zero-shift pair has only the smoothness floor") {
  std::mt19937_64 rng(3);
  const auto img = oracle::random_tensor<double>({1, 3, 64, 64}, 0, 1, rng);
  std::vector<DisparityPair<double>> scales;
  for (int k = 0; k < 4; ++k) {
    const Shape s{1, 1, 64 >> k, 64 >> k};
    scales.push_back({full(s, 0), full(s, 0)});
  }
  const LossWeights w;
  SmnLossParts parts;
  const double total = smn_total(scales, img, img, w, &parts).item();
  CHECK(parts.appearance == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(parts.lr == 0.0);
  CHECK(total == doctest::Approx(w.alpha_ds * parts.smoothness).epsilon(1e-12));
}

TEST_CASE("smn_total rewards the true shift") {
  // left(x) = right(x - 2); disparity 2 should beat 0 and 4.
  std::mt19937_64 rng(4);
  const int h = 32, w = 32;
  const auto wide = oracle::random_tensor<double>({1, 3, h, w + 2}, 0, 1, rng);
  const auto left = crop(wide, 0, 0, h, w);
  const auto right = crop(wide, 0, 2, h, w);
  LossWeights lw;
  lw.ssim_window = 3;
  auto loss_at = [&](double d) {
    return smn_total<double>({{full({1, 1, h, w}, d), full({1, 1, h, w}, d)}}, left, right, lw).item();
  };
  CHECK(loss_at(2) < loss_at(0));
  CHECK(loss_at(2) < loss_at(4));
  CHECK(loss_at(2) < 1e-9);
}

TEST_CASE("select_supervision") {
  const Shape s{1, 3, 4, 4};
  SupervisionSources<double> src{full(s, 0.1), full(s, 0.2), full(s, 0.3), full(s, 0.4)};
  auto [l, r] = select_supervision(src, SupervisionMode::nir_only);
  CHECK(l.data()[0] == 0.3);
  CHECK(r.data()[0] == 0.2);
  auto [bl, br] = select_supervision(src, SupervisionMode::both);
  CHECK(bl.shape().c == 6);
  CHECK(br.shape().c == 6);
  CHECK(bl.at(0, 0, 0, 0) == 0.1);
  CHECK(bl.at(0, 3, 0, 0) == 0.3);
  CHECK(br.at(0, 0, 0, 0) == 0.4);
  CHECK(br.at(0, 3, 0, 0) == 0.2);
  SupervisionSources<double> plain{full(s, 0.1), full(s, 0.2), {}, {}};
  auto [pl, pr] = select_supervision(plain, SupervisionMode::nir_only);
  CHECK(pl.data()[0] == 0.1);
  CHECK(pr.data()[0] == 0.2);
}

TEST_CASE("downsample averages blocks") {
  const auto x = Tensord::from_data({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  const auto d = downsample(x, 2);
  CHECK(d.shape() == Shape{1, 1, 1, 2});
  CHECK(d.data()[0] == 3.5);
  CHECK(d.data()[1] == 5.5);
  CHECK_THROWS_AS(downsample(x, 3), ShapeError);
}

TEST_CASE("cycle and reconstruction losses") {
  std::mt19937_64 rng(5);
  const Shape s{2, 3, 4, 4};
  const auto a = oracle::random_tensor<double>(s, 0, 1, rng);
  const auto b = oracle::random_tensor<double>(s, 0, 1, rng);
  StnForwardBundle<double> bundle;
  bundle.cyc_a = a;
  bundle.cyc_b = b;
  bundle.rec_a = a;
  bundle.rec_b = b;
  CHECK(cycle_loss(bundle, a, b).item() == 0.0);
  CHECK(reconstruction_loss(bundle, a, b).item() == 0.0);

  bundle.cyc_a = add_scalar(a, 0.5);
  CHECK(cycle_loss(bundle, a, b).item() == doctest::Approx(1.5).epsilon(1e-12));

  auto off = a.clone();
  for (int n = 0; n < 2; ++n)
    for (int i = 0; i < 16; ++i) off.mutable_data()[n * 48 + 16 + i] += 0.1;
  bundle.rec_a = off;
  CHECK(reconstruction_loss(bundle, a, b).item() == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("least-squares adversarial losses") {
  const Shape s{2, 1, 3, 3};
  auto perfect = adversarial_losses(full(s, 1), full(s, 0));
  CHECK(perfect.loss_d.item() == 0.0);
  CHECK(perfect.loss_g.item() == 1.0);
  auto half = adversarial_losses(full(s, 0.5), full(s, 0.5));
  CHECK(half.loss_d.item() == 0.5);
  CHECK(half.loss_g.item() == 0.25);
}

TEST_CASE("weighted totals") {
  const LossWeights w;
  auto sc = [](double v) { return Tensord::scalar(v); };
  CHECK(stn_generator_total(sc(0), sc(0), sc(0), w).item() == 0.0);
  CHECK(stn_generator_total(sc(0.2), sc(0.1), sc(1.0), w).item() == doctest::Approx(3.5).epsilon(1e-12));
  CHECK(stn_discriminator_total(sc(0), sc(0), w).item() == 0.0);
  CHECK(stn_discriminator_total(sc(0.3), sc(0.2), w).item() == doctest::Approx(0.5).epsilon(1e-12));
  const double one = stn_discriminator_total(sc(0.3), sc(0.2), w).item();
  const double two = stn_discriminator_total(sc(0.6), sc(0.4), w).item();
  CHECK(two == doctest::Approx(2 * one).epsilon(1e-12));
  LossWeights heavy = w;
  heavy.lambda_d = 3;
  CHECK(stn_discriminator_total(sc(0.3), sc(0.2), heavy).item() == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("auxiliary_loss") {
  const LossWeights w;
  const Shape s{1, 3, 4, 6};
  const auto m = full({1, 1, 4, 6}, 1.0);
  std::mt19937_64 rng(6);
  const auto x = oracle::random_tensor<double>(s, 0.1, 0.9, rng);
  const auto y = oracle::random_tensor<double>(s, 0.1, 0.9, rng);
  CHECK(auxiliary_loss(x, y, x, y, m, m, w).item() == 0.0);
  CHECK(auxiliary_loss(add_scalar(x, 0.05), y, x, y, m, m, w).item() ==
        doctest::Approx(3.0).epsilon(1e-9));
}

TEST_CASE("loss gradients match central differences") {
  std::mt19937_64 rng(7);
  LossWeights w;
  w.ssim_window = 3;
  for (int rep = 0; rep < 3; ++rep) {
    const int h = 5 + rep, wd = 7 + rep;
    const Shape s{1, 2, h, wd}, d1{1, 1, h, wd};
    const auto a = oracle::random_tensor<double>(s, 0.1, 0.9, rng);
    const auto b = oracle::random_tensor<double>(s, 0.1, 0.9, rng);
    const auto d = fractional_disparity(d1, 2, rng);
    const auto e = fractional_disparity(d1, 2, rng);
    const auto m = full(d1, 1.0);
    CHECK(oracle::max_gradient_error<double>({a, b}, [](const auto& in) { return ssim(in[0], in[1], 3); }, 1e-6, 1) < 1e-6);
    CHECK(oracle::max_gradient_error<double>(
              {a, b}, [&](const auto& in) { return appearance_loss(in[0], in[1], m, w); }, 1e-6, 2) < 1e-6);
    CHECK(oracle::max_gradient_error<double>(
              {d, a}, [](const auto& in) { return smoothness_loss(in[0], in[1]); }, 1e-6, 3) < 1e-6);
    CHECK(oracle::max_gradient_error<double>(
              {d, e}, [](const auto& in) { return lr_consistency_loss(in[0], in[1]); }, 1e-6, 4) < 1e-6);
    CHECK(oracle::max_gradient_error<double>(
              {d, e, a, b},
              [&](const auto& in) {
                return smn_total<double>({{in[0], in[1]}}, in[2], in[3], w);
              },
              1e-6, 5) < 1e-6);
    CHECK(oracle::max_gradient_error<double>(
              {a, b},
              [&](const auto& in) { return auxiliary_loss(in[0], in[1], b, a, m, m, w); }, 1e-6, 6) < 1e-6);
  }
}
