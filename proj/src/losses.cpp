#include "eaa/losses.hpp"

#include <cmath>
#include <string>

namespace eaa {

namespace {

constexpr double kLogEps = 1e-12;
constexpr double kDiceEps = 1e-6;
constexpr double kCeWeight = 0.4;

void check_same_shape(const Tensor& a, const Tensor& b, const char* name) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(name) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

// Scores and targets are [N,K,H,W]; every pixel's class vector must sum to 1
// with entries in [0,1]. Catches transposed layouts and raw label masks.
void check_one_hot(const Tensor& scores, const Tensor& target, const char* name) {
  check_same_shape(scores, target, name);
  if (scores.rank() != 4)
    throw ShapeError(std::string(name) + ": expected [N,K,H,W], got " +
                     shape_str(scores.shape()));
  const auto& s = target.shape();
  const std::size_t K = s[1], plane = s[2] * s[3];
  const auto& t = target.data();
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      double sum = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double v = t[(n * K + k) * plane + p];
        if (std::fabs(v) > 1e-9 && std::fabs(v - 1.0) > 1e-9)
          throw ValueError(std::string(name) + ": target entries must be exactly 0 or 1");
        sum += v;
      }
      if (std::fabs(sum - 1.0) > 1e-9)
        throw ValueError(std::string(name) + ": target is not one-hot, class sum " +
                         std::to_string(sum) + " at pixel " + std::to_string(p));
    }
}

}  // namespace

Tensor mae(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "mae");
  return reduce_mean_all(abs(sub(pred, target)));
}

Tensor mse(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "mse");
  Tensor d = sub(pred, target);
  return reduce_mean_all(mul(d, d));
}

Tensor cross_entropy(const Tensor& scores, const Tensor& target) {
  check_one_hot(scores, target, "cross_entropy");
  Tensor p = softmax(scores, 1);
  Tensor picked = reduce_sum(mul(target, log_clamped(p, kLogEps)), {1});  // [N,H,W]
  return neg(reduce_mean_all(picked));
}

Tensor dice_loss(const Tensor& scores, const Tensor& target) {
  check_one_hot(scores, target, "dice_loss");
  const double K = static_cast<double>(scores.shape()[1]);
  Tensor p = softmax(scores, 1);
  std::vector<std::size_t> nonclass{0, 2, 3};
  Tensor inter = reduce_sum(mul(p, target), nonclass);  // [K]
  Tensor psum = reduce_sum(p, nonclass);
  Tensor tsum = reduce_sum(target, nonclass);
  Tensor dice = div(add_scalar(mul_scalar(inter, 2.0), kDiceEps),
                    add_scalar(add(psum, tsum), kDiceEps));
  return sub_from_scalar(K, reduce_sum_all(dice));
}

Tensor seg_loss(const Tensor& scores, const Tensor& target) {
  return add(mul_scalar(cross_entropy(scores, target), kCeWeight), dice_loss(scores, target));
}

LossBundle total_loss(const Tensor& recon, const Tensor& seg_basic_scores,
                      const Tensor& seg_complete_scores, const Tensor& x_curr,
                      const Tensor& target) {
  LossBundle b;
  b.recon_l1 = mae(recon, x_curr);
  b.recon_l2 = mse(recon, x_curr);
  b.seg_basic = seg_loss(seg_basic_scores, target);
  b.seg_complete = seg_loss(seg_complete_scores, target);
  b.total = add(add(b.recon_l1, b.recon_l2), add(b.seg_basic, b.seg_complete));
  return b;
}

}  // namespace eaa
