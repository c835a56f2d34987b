#include "losses.hpp"

#include <stdexcept>
#include <string>

namespace xs {

void LossWeights::validate() const {
  const double all[] = {lambda_c, lambda_r, lambda_a, lambda_d, alpha_ap,
                        alpha_ds, alpha_lr, alpha_aux, alpha_ssim};
  for (double v : all) {
    if (!(v >= 0)) throw std::invalid_argument("loss weights must be non-negative");
  }
  if (alpha_ssim > 1) throw std::invalid_argument("alpha_ssim must lie in [0, 1]");
  if (ssim_window < 1 || ssim_window % 2 == 0) {
    throw std::invalid_argument("ssim_window must be a positive odd number, got " +
                                std::to_string(ssim_window));
  }
}

namespace {

template <typename T>
Tensor<T> repeat_channels(const Tensor<T>& mask, int channels) {
  if (mask.shape().c == channels) return mask;
  return concat_channels(std::vector<Tensor<T>>(channels, mask));
}

template <typename T>
Tensor<T> channel_l1(const Tensor<T>& a, const Tensor<T>& b) {
  return sum_channels(abs(sub(a, b)));
}

}  // namespace

template <typename T>
Tensor<T> ssim(const Tensor<T>& a, const Tensor<T>& b, int window) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("ssim: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  if (window < 1 || window % 2 == 0) throw std::invalid_argument("ssim: window must be odd");
  if (window > a.shape().h || window > a.shape().w) {
    throw ShapeError("ssim: window " + std::to_string(window) + " larger than image " +
                     a.shape().str());
  }
  const int r = window / 2;
  const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);
  const Tensor<T> pa = pad_reflect(a, r), pb = pad_reflect(b, r);
  const Tensor<T> mu_a = avg_pool(pa, window), mu_b = avg_pool(pb, window);
  const Tensor<T> mu_aa = mul(mu_a, mu_a), mu_bb = mul(mu_b, mu_b), mu_ab = mul(mu_a, mu_b);
  const Tensor<T> var_a = sub(avg_pool(mul(pa, pa), window), mu_aa);
  const Tensor<T> var_b = sub(avg_pool(mul(pb, pb), window), mu_bb);
  const Tensor<T> cov = sub(avg_pool(mul(pa, pb), window), mu_ab);
  const Tensor<T> num = mul(add_scalar(mul_scalar(mu_ab, T(2)), c1),
                            add_scalar(mul_scalar(cov, T(2)), c2));
  const Tensor<T> den = mul(add_scalar(add(mu_aa, mu_bb), c1),
                            add_scalar(add(var_a, var_b), c2));
  return div(num, den);
}

template <typename T>
Tensor<T> appearance_loss(const Tensor<T>& orig, const Tensor<T>& recon,
                          const Tensor<T>& mask, const LossWeights& w) {
  if (!(orig.shape() == recon.shape())) {
    throw ShapeError("appearance_loss: shape mismatch " + orig.shape().str() + " vs " +
                     recon.shape().str());
  }
  const T alpha = static_cast<T>(w.alpha_ssim);
  const Tensor<T> m = repeat_channels(mask, orig.shape().c);
  const Tensor<T> a = mul(orig, m), b = mul(recon, m);
  const Tensor<T> dssim = mul_scalar(add_scalar(mul_scalar(ssim(a, b, w.ssim_window), T(-1)), T(1)),
                                     alpha / 2);
  const Tensor<T> l1 = mul_scalar(abs(sub(a, b)), 1 - alpha);
  return masked_mean(add(dssim, l1), mask);
}

template <typename T>
Tensor<T> smoothness_loss(const Tensor<T>& disp, const Tensor<T>& image) {
  const Shape ds = disp.shape(), is = image.shape();
  if (ds.c != 1 || ds.n != is.n || ds.h != is.h || ds.w != is.w) {
    throw ShapeError("smoothness_loss: disparity " + ds.str() + " vs image " + is.str());
  }
  Tensor<T> total = Tensor<T>::scalar(0);
  if (ds.w > 1) {
    const int w = ds.w - 1;
    const Tensor<T> dd = abs(sub(crop(disp, 0, 1, ds.h, w), crop(disp, 0, 0, ds.h, w)));
    const Tensor<T> di =
        mean_channels(abs(sub(crop(image, 0, 1, is.h, w), crop(image, 0, 0, is.h, w))));
    total = add(total, mean(mul(dd, exp(mul_scalar(di, T(-1))))));
  }
  if (ds.h > 1) {
    const int h = ds.h - 1;
    const Tensor<T> dd = abs(sub(crop(disp, 1, 0, h, ds.w), crop(disp, 0, 0, h, ds.w)));
    const Tensor<T> di =
        mean_channels(abs(sub(crop(image, 1, 0, h, is.w), crop(image, 0, 0, h, is.w))));
    total = add(total, mean(mul(dd, exp(mul_scalar(di, T(-1))))));
  }
  return total;
}

template <typename T>
Tensor<T> lr_consistency_loss(const Tensor<T>& d_self, const Tensor<T>& d_other,
                              WarpDirection direction) {
  if (!(d_self.shape() == d_other.shape())) {
    throw ShapeError("lr_consistency_loss: shape mismatch " + d_self.shape().str() + " vs " +
                     d_other.shape().str());
  }
  const WarpResult<T> projected = warp_horizontal(d_other, d_self, direction);
  return masked_mean(abs(sub(d_self, projected.warped)), projected.valid_mask);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> select_supervision(const SupervisionSources<T>& src,
                                                   SupervisionMode mode) {
  if (!src.fake_nir_left.defined() || !src.fake_vis_right.defined()) {
    return {src.left_vis, src.right_nir};
  }
  if (mode == SupervisionMode::nir_only) return {src.fake_nir_left, src.right_nir};
  return {concat_channels<T>({src.left_vis, src.fake_nir_left}),
          concat_channels<T>({src.fake_vis_right, src.right_nir})};
}

template <typename T>
Tensor<T> downsample(const Tensor<T>& image, int factor) {
  if (factor == 1) return image;
  const Shape s = image.shape();
  if (factor < 1 || s.h % factor != 0 || s.w % factor != 0) {
    throw ShapeError("downsample: factor " + std::to_string(factor) + " does not divide " +
                     s.str());
  }
  return avg_pool(image, factor, factor);
}

template <typename T>
Tensor<T> smn_total(const std::vector<DisparityPair<T>>& scales, const Tensor<T>& sup_left,
                    const Tensor<T>& sup_right, const LossWeights& w, SmnLossParts* parts) {
  if (scales.empty()) throw std::invalid_argument("smn_total: empty scale list");
  Tensor<T> total = Tensor<T>::scalar(0);
  const T a_ap = static_cast<T>(w.alpha_ap), a_ds = static_cast<T>(w.alpha_ds),
          a_lr = static_cast<T>(w.alpha_lr);
  for (std::size_t k = 0; k < scales.size(); ++k) {
    const auto& [dl, dr] = scales[k];
    const int factor = 1 << k;
    const Tensor<T> sl = downsample(sup_left, factor);
    const Tensor<T> sr = downsample(sup_right, factor);
    if (dl.shape().h != sl.shape().h || dl.shape().w != sl.shape().w) {
      throw ShapeError("smn_total: scale " + std::to_string(k) + " disparity " +
                       dl.shape().str() + " does not match supervision " + sl.shape().str());
    }
    const WarpResult<T> rec_l = warp_horizontal(sr, dl, WarpDirection::left_from_right);
    const WarpResult<T> rec_r = warp_horizontal(sl, dr, WarpDirection::right_from_left);
    const Tensor<T> ap = add(appearance_loss(sl, rec_l.warped, rec_l.valid_mask, w),
                             appearance_loss(sr, rec_r.warped, rec_r.valid_mask, w));
    const Tensor<T> ds = add(smoothness_loss(dl, sl), smoothness_loss(dr, sr));
    const Tensor<T> lr = add(lr_consistency_loss(dl, dr, WarpDirection::left_from_right),
                             lr_consistency_loss(dr, dl, WarpDirection::right_from_left));
    total = add(total, add(add(mul_scalar(ap, a_ap), mul_scalar(ds, a_ds)), mul_scalar(lr, a_lr)));
    if (parts) {
      parts->appearance += static_cast<double>(ap.item());
      parts->smoothness += static_cast<double>(ds.item());
      parts->lr += static_cast<double>(lr.item());
    }
  }
  return total;
}

template <typename T>
Tensor<T> cycle_loss(const StnForwardBundle<T>& bundle, const Tensor<T>& image_a,
                     const Tensor<T>& image_b) {
  return add(mean(channel_l1(bundle.cyc_a, image_a)), mean(channel_l1(bundle.cyc_b, image_b)));
}

template <typename T>
Tensor<T> reconstruction_loss(const StnForwardBundle<T>& bundle, const Tensor<T>& image_a,
                              const Tensor<T>& image_b) {
  return add(mean(channel_l1(bundle.rec_a, image_a)), mean(channel_l1(bundle.rec_b, image_b)));
}

template <typename T>
Tensor<T> lsgan_discriminator_loss(const Tensor<T>& d_real, const Tensor<T>& d_fake) {
  return add(mean(square(add_scalar(d_real, T(-1)))), mean(square(d_fake)));
}

template <typename T>
Tensor<T> lsgan_generator_loss(const Tensor<T>& d_fake) {
  return mean(square(add_scalar(d_fake, T(-1))));
}

template <typename T>
AdversarialLosses<T> adversarial_losses(const Tensor<T>& d_real, const Tensor<T>& d_fake) {
  return {lsgan_discriminator_loss(d_real, d_fake), lsgan_generator_loss(d_fake)};
}

template <typename T>
Tensor<T> stn_generator_total(const Tensor<T>& cycle, const Tensor<T>& reconstruction,
                              const Tensor<T>& adversarial_g, const LossWeights& w) {
  return add(add(mul_scalar(cycle, static_cast<T>(w.lambda_c)),
                 mul_scalar(reconstruction, static_cast<T>(w.lambda_r))),
             mul_scalar(adversarial_g, static_cast<T>(w.lambda_a)));
}

template <typename T>
Tensor<T> stn_discriminator_total(const Tensor<T>& adversarial_d_a,
                                  const Tensor<T>& adversarial_d_b, const LossWeights& w) {
  return mul_scalar(add(adversarial_d_a, adversarial_d_b), static_cast<T>(w.lambda_d));
}

template <typename T>
Tensor<T> auxiliary_loss(const Tensor<T>& fake_l_nir, const Tensor<T>& fake_r_vis,
                         const Tensor<T>& warped_orig_l, const Tensor<T>& warped_orig_r,
                         const Tensor<T>& mask_l, const Tensor<T>& mask_r,
                         const LossWeights& w) {
  const Tensor<T> left = masked_mean(channel_l1(fake_l_nir, warped_orig_l), mask_l);
  const Tensor<T> right = masked_mean(channel_l1(fake_r_vis, warped_orig_r), mask_r);
  return mul_scalar(add(left, right), static_cast<T>(w.alpha_aux));
}

#define XS_INSTANTIATE(T)                                                                      \
  template Tensor<T> ssim(const Tensor<T>&, const Tensor<T>&, int);                            \
  template Tensor<T> appearance_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                     const LossWeights&);                                      \
  template Tensor<T> smoothness_loss(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> lr_consistency_loss(const Tensor<T>&, const Tensor<T>&, WarpDirection);   \
  template std::pair<Tensor<T>, Tensor<T>> select_supervision(const SupervisionSources<T>&,    \
                                                              SupervisionMode);                \
  template Tensor<T> downsample(const Tensor<T>&, int);                                        \
  template Tensor<T> smn_total(const std::vector<DisparityPair<T>>&, const Tensor<T>&,         \
                               const Tensor<T>&, const LossWeights&, SmnLossParts*);           \
  template Tensor<T> cycle_loss(const StnForwardBundle<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> reconstruction_loss(const StnForwardBundle<T>&, const Tensor<T>&,         \
                                         const Tensor<T>&);                                    \
  template Tensor<T> lsgan_discriminator_loss(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> lsgan_generator_loss(const Tensor<T>&);                                   \
  template AdversarialLosses<T> adversarial_losses(const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> stn_generator_total(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                         const LossWeights&);                                  \
  template Tensor<T> stn_discriminator_total(const Tensor<T>&, const Tensor<T>&,               \
                                             const LossWeights&);                              \
  template Tensor<T> auxiliary_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                    const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                    const LossWeights&);

XS_INSTANTIATE(float)
XS_INSTANTIATE(double)
#undef XS_INSTANTIATE

}  // namespace xs
