#pragma once

#include "eaa/tensor.hpp"

namespace eaa {

// Means over every element; shapes must match exactly.
Tensor mae(const Tensor& pred, const Tensor& target);
Tensor mse(const Tensor& pred, const Tensor& target);

// Pixelwise cross-entropy of softmaxed scores [N,K,H,W] against a validated
// one-hot target of the same shape. log is clamped at 1e-12. Returns the
// plain CE; the 0.4 weighting lives in seg_loss.
Tensor cross_entropy(const Tensor& scores, const Tensor& target);

// Soft dice over softmax probabilities, accumulated per class over batch and
// pixels, smoothing 1e-6: loss = K - sum_k dice_k.
Tensor dice_loss(const Tensor& scores, const Tensor& target);

// 0.4 * cross_entropy + dice_loss.
Tensor seg_loss(const Tensor& scores, const Tensor& target);

// The four training terms. `total` is built by graph addition of the others,
// so one backward pass distributes gradients for all of them.
struct LossBundle {
  Tensor recon_l1;      // MAE of the reconstruction against the current slice
  Tensor recon_l2;      // MSE of the same pair
  Tensor seg_basic;     // seg_loss on the plain segmentation head
  Tensor seg_complete;  // seg_loss on the fused segmentation head
  Tensor total;
};

LossBundle total_loss(const Tensor& recon, const Tensor& seg_basic_scores,
                      const Tensor& seg_complete_scores, const Tensor& x_curr,
                      const Tensor& target);

}  // namespace eaa
