#pragma once

#include <vector>

#include "tensor.hpp"
#include "warp.hpp"

namespace xs {

struct LossWeights {
  double lambda_c = 10.0;   // cycle consistency
  double lambda_r = 5.0;    // feature-space reconstruction
  double lambda_a = 1.0;    // generator adversarial
  double lambda_d = 1.0;    // discriminator
  double alpha_ap = 1.0;    // appearance matching
  double alpha_ds = 0.2;    // disparity smoothness
  double alpha_lr = 0.1;    // left-right consistency
  double alpha_aux = 20.0;  // auxiliary translation loss
  double alpha_ssim = 0.9;  // SSIM vs L1 balance inside the appearance term
  int ssim_window = 5;

  // Throws std::invalid_argument on negative weights, alpha_ssim outside
  // [0, 1] or an even / non-positive window.
  void validate() const;
};

enum class SupervisionMode { nir_only, both };

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

/// Per-pixel SSIM map (same shape as the inputs). Local statistics use a
/// window x window box filter over a reflect-padded copy.
template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b, int window);

/// Masked mean of alpha*(1-SSIM)/2 + (1-alpha)*|orig-recon|. Pixels outside
/// the mask are zeroed in both images before SSIM so they cannot leak into
/// neighbouring windows.
template <typename T>
Tensor<T> appearance_loss(const Tensor<T>& orig, const Tensor<T>& recon,
                          const Tensor<T>& mask, const LossWeights& w);

/// Edge-aware smoothness of a 1-channel disparity map. The x and y terms are
/// averaged separately over the pixels that have a forward neighbour.
template <typename T>
Tensor<T> smoothness_loss(const Tensor<T>& disp, const Tensor<T>& image);

/// Masked mean of |d_self - warp(d_other, d_self)|. The left term uses
/// left_from_right; the right term swaps arguments and uses right_from_left.
template <typename T>
Tensor<T> lr_consistency_loss(const Tensor<T>& d_self, const Tensor<T>& d_other,
                              WarpDirection direction = WarpDirection::left_from_right);

template <typename T>
struct DisparityPair {
  Tensor<T> left;
  Tensor<T> right;
};

struct SmnLossParts {
  double appearance = 0;
  double smoothness = 0;
  double lr = 0;
};

/// Images the SMN loss compares, chosen by supervision mode.
template <typename T>
struct SupervisionSources {
  Tensor<T> left_vis;
  Tensor<T> right_nir;
  Tensor<T> fake_nir_left;   // G_B(F(left)); undefined without a translator
  Tensor<T> fake_vis_right;  // G_A(F(right)); undefined without a translator
};

template <typename T>
std::pair<Tensor<T>, Tensor<T>> select_supervision(const SupervisionSources<T>& src,
                                                   SupervisionMode mode);

/// Area downsampling by an integer factor (exact bilinear average for
/// power-of-two factors).
template <typename T>
Tensor<T> downsample(const Tensor<T>& image, int factor);

/// Multi-scale stereo loss. scales[k] holds disparities at 1/2^k resolution in
/// that scale's pixel units; supervision images are full resolution.
template <typename T>
Tensor<T> smn_total(const std::vector<DisparityPair<T>>& scales,
                    const Tensor<T>& sup_left, const Tensor<T>& sup_right,
                    const LossWeights& w, SmnLossParts* parts = nullptr);

template <typename T>
struct StnForwardBundle {
  Tensor<T> x_a, x_b;
  Tensor<T> fake_b, fake_a;
  Tensor<T> cyc_a, cyc_b;
  Tensor<T> rec_a, rec_b;
};

/// Per-pixel L1 summed over channels, averaged over pixels, for both spectra.
template <typename T>
Tensor<T> cycle_loss(const StnForwardBundle<T>& bundle, const Tensor<T>& image_a,
                     const Tensor<T>& image_b);
template <typename T>
Tensor<T> reconstruction_loss(const StnForwardBundle<T>& bundle, const Tensor<T>& image_a,
                              const Tensor<T>& image_b);

// Least-squares adversarial objectives over patch maps. The caller is
// responsible for feeding a detached fake when training the discriminator.
template <typename T>
Tensor<T> lsgan_discriminator_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake);
template <typename T>
Tensor<T> lsgan_generator_loss(const Tensor<T>& d_fake);

template <typename T>
struct AdversarialLosses {
  Tensor<T> loss_d;
  Tensor<T> loss_g;
};
template <typename T>
AdversarialLosses<T> adversarial_losses(const Tensor<T>& d_real, const Tensor<T>& d_fake);

template <typename T>
Tensor<T> stn_generator_total(const Tensor<T>& cycle, const Tensor<T>& reconstruction,
                              const Tensor<T>& adversarial_g, const LossWeights& w);
template <typename T>
Tensor<T> stn_discriminator_total(const Tensor<T>& adversarial_d_a,
                                  const Tensor<T>& adversarial_d_b, const LossWeights& w);

/// alpha_aux * (masked mean |fake_l_nir - warped_orig_l|_1 + masked mean
/// |fake_r_vis - warped_orig_r|_1), channel-summed.
template <typename T>
Tensor<T> auxiliary_loss(const Tensor<T>& fake_l_nir, const Tensor<T>& fake_r_vis,
                         const Tensor<T>& warped_orig_l, const Tensor<T>& warped_orig_r,
                         const Tensor<T>& mask_l, const Tensor<T>& mask_r,
                         const LossWeights& w);

}  // namespace xs
