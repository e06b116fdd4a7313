#include "eaa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <utility>

#include "eaa/common.hpp"
#include "eaa/eaanet.hpp"
#include "eaa/layers.hpp"
#include "eaa/losses.hpp"
#include "eaa/tensor.hpp"

namespace eaa {

namespace {

constexpr double kStep = 1e-5;
constexpr double kScaleFloor = 1e-3;
constexpr double kLayerTol = 1e-4;
constexpr double kEndToEndTol = 1e-3;

// Worst relative error between backward() and central differences across all
// coordinates of one leaf. make_loss must rebuild the graph from the leaf's
// current data on every call. Near-zero gradients are judged on absolute
// error via the scale floor.
double fd_worst(const std::function<Tensor()>& make_loss, Tensor leaf) {
  leaf.zero_grad();
  make_loss().backward();
  const std::vector<double> ad = leaf.grad_or_zero();
  auto& xs = leaf.mutable_data();
  double worst = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double keep = xs[i];
    xs[i] = keep + kStep;
    const double fp = make_loss().value();
    xs[i] = keep - kStep;
    const double fm = make_loss().value();
    xs[i] = keep;
    const double fdg = (fp - fm) / (2.0 * kStep);
    const double denom = std::max({std::fabs(ad[i]), std::fabs(fdg), kScaleFloor});
    worst = std::max(worst, std::fabs(ad[i] - fdg) / denom);
  }
  return worst;
}

void push(std::vector<CheckResult>& out, std::string name, double tol,
          const std::function<Tensor()>& make_loss, std::initializer_list<Tensor> leaves) {
  double worst = 0.0;
  for (const Tensor& leaf : leaves) worst = std::max(worst, fd_worst(make_loss, leaf));
  out.push_back({std::move(name), worst, tol, worst < tol});
}

// Magnitudes in [0.2, 1.2] with random sign: keeps relu and maxpool inputs
// away from their kinks so central differences stay two-sided.
Tensor away_from_zero(const Shape& shape, SplitMix64& rng) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    const double mag = rng.uniform(0.2, 1.2);
    x = rng.next_double() < 0.5 ? -mag : mag;
  }
  return Tensor::create(shape, std::move(v), true);
}

// Random one-hot class map, [N,K,H,W].
Tensor one_hot_target(std::size_t n, std::size_t k, std::size_t h, std::size_t w,
                      SplitMix64& rng) {
  std::vector<double> t(n * k * h * w, 0.0);
  const std::size_t plane = h * w;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < plane; ++p) t[(b * k + rng.index(k)) * plane + p] = 1.0;
  return Tensor::create({n, k, h, w}, std::move(t));
}

}  // namespace

std::vector<CheckResult> run_gradient_checks(std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<CheckResult> out;

  // Fixed random weights turn a tensor-valued output into a scalar whose
  // pullback is non-uniform, so permuted or mis-scaled gradients cannot
  // cancel out in the comparison.
  auto weighted_sum = [&rng](const Shape& shape) {
    return Tensor::rand_uniform(shape, -1.0, 1.0, rng, false);
  };

  {
    Tensor x = Tensor::rand_uniform({2, 2, 5, 5}, -1.0, 1.0, rng, true);
    ConvParams p = make_conv(3, 2, 3, 1, 1, rng);
    Tensor w = weighted_sum({2, 3, 5, 5});
    push(out, "conv 3x3 stride 1 pad 1", kLayerTol,
         [x, p, w] { return reduce_sum_all(mul(conv2d(x, p), w)); },
         {x, p.weight, p.bias});
  }
  {
    Tensor x = Tensor::rand_uniform({2, 3, 4, 4}, -1.0, 1.0, rng, true);
    ConvParams p = make_conv(2, 3, 1, 1, 0, rng);
    Tensor w = weighted_sum({2, 2, 4, 4});
    push(out, "conv 1x1", kLayerTol,
         [x, p, w] { return reduce_sum_all(mul(conv2d(x, p), w)); },
         {x, p.weight, p.bias});
  }
  {
    Tensor x = Tensor::rand_uniform({1, 2, 6, 6}, -1.0, 1.0, rng, true);
    ConvParams p = make_conv(2, 2, 3, 2, 1, rng);
    Tensor w = weighted_sum({1, 2, 3, 3});
    push(out, "conv 3x3 stride 2", kLayerTol,
         [x, p, w] { return reduce_sum_all(mul(conv2d(x, p), w)); },
         {x, p.weight, p.bias});
  }
  {
    Tensor x = Tensor::rand_uniform({1, 2, 3, 3}, -1.0, 1.0, rng, true);
    ConvParams p = make_tconv(2, 2, rng);
    Tensor w = weighted_sum({1, 2, 6, 6});
    push(out, "transposed conv x2", kLayerTol,
         [x, p, w] { return reduce_sum_all(mul(transposed_conv2d(x, p), w)); },
         {x, p.weight, p.bias});
  }
  {
    Tensor x = Tensor::rand_uniform({2, 3, 4, 4}, -1.0, 1.0, rng, true);
    BatchNormParams p = make_batchnorm(3);
    Tensor w = weighted_sum({2, 3, 4, 4});
    push(out, "batchnorm train mode", kLayerTol,
         [x, &p, w] { return reduce_sum_all(mul(batchnorm(x, p, Mode::train), w)); },
         {x, p.gamma, p.beta});
  }
  {
    Tensor x = Tensor::rand_uniform({2, 3, 4, 4}, -1.0, 1.0, rng, true);
    BatchNormParams p = make_batchnorm(3);
    batchnorm(x, p, Mode::train);  // move the running stats off their init
    Tensor w = weighted_sum({2, 3, 4, 4});
    push(out, "batchnorm eval mode", kLayerTol,
         [x, &p, w] { return reduce_sum_all(mul(batchnorm(x, p, Mode::eval), w)); },
         {x, p.gamma, p.beta});
  }
  {
    Tensor x = Tensor::rand_uniform({2, 4, 3, 3}, 0.2, 1.2, rng, true);
    SEParams p = make_se(4, 2, rng);
    Tensor w = weighted_sum({2, 4, 3, 3});
    push(out, "squeeze-excitation block", kLayerTol,
         [x, p, w] { return reduce_sum_all(mul(se_block(x, p), w)); },
         {x, p.reduce_weight, p.expand_weight});
  }
  {
    Tensor x = away_from_zero({2, 2, 4, 4}, rng);
    Tensor w = weighted_sum({2, 2, 2, 2});
    push(out, "maxpool 2x2", kLayerTol,
         [x, w] { return reduce_sum_all(mul(maxpool2d(x), w)); }, {x});
  }
  {
    Tensor x = away_from_zero({2, 3, 4, 4}, rng);
    Tensor w = weighted_sum({2, 3, 4, 4});
    push(out, "relu", kLayerTol,
         [x, w] { return reduce_sum_all(mul(relu(x), w)); }, {x});
  }
  {
    Tensor x = Tensor::rand_uniform({2, 3, 4, 4}, -2.0, 2.0, rng, true);
    Tensor w = weighted_sum({2, 3, 4, 4});
    push(out, "sigmoid", kLayerTol,
         [x, w] { return reduce_sum_all(mul(sigmoid(x), w)); }, {x});
  }
  {
    Tensor x = Tensor::rand_uniform({2, 3, 4, 4}, -2.0, 2.0, rng, true);
    Tensor w = weighted_sum({2, 3, 4, 4});
    push(out, "softmax over channels", kLayerTol,
         [x, w] { return reduce_sum_all(mul(softmax(x, 1), w)); }, {x});
  }
  {
    Tensor a = Tensor::rand_uniform({1, 2, 3, 3}, -1.0, 1.0, rng, true);
    Tensor b = Tensor::rand_uniform({1, 3, 3, 3}, -1.0, 1.0, rng, true);
    Tensor w = weighted_sum({1, 5, 3, 3});
    push(out, "channel concat", kLayerTol,
         [a, b, w] { return reduce_sum_all(mul(concat(a, b, 1), w)); }, {a, b});
  }

  {
    Tensor pred = Tensor::rand_uniform({2, 1, 4, 4}, 0.1, 0.9, rng, true);
    Tensor tgt = Tensor::rand_uniform({2, 1, 4, 4}, 0.1, 0.9, rng, false);
    push(out, "mean absolute error", kLayerTol, [pred, tgt] { return mae(pred, tgt); },
         {pred});
    push(out, "mean squared error", kLayerTol, [pred, tgt] { return mse(pred, tgt); },
         {pred});
  }
  {
    Tensor scores = Tensor::rand_uniform({2, 3, 4, 4}, -2.0, 2.0, rng, true);
    Tensor tgt = one_hot_target(2, 3, 4, 4, rng);
    push(out, "cross entropy", kLayerTol,
         [scores, tgt] { return cross_entropy(scores, tgt); }, {scores});
    push(out, "dice loss", kLayerTol, [scores, tgt] { return dice_loss(scores, tgt); },
         {scores});
    push(out, "weighted seg loss", kLayerTol,
         [scores, tgt] { return seg_loss(scores, tgt); }, {scores});
  }
  {
    Tensor recon = Tensor::rand_uniform({2, 1, 4, 4}, 0.1, 0.9, rng, true);
    Tensor sb = Tensor::rand_uniform({2, 2, 4, 4}, -2.0, 2.0, rng, true);
    Tensor sc = Tensor::rand_uniform({2, 2, 4, 4}, -2.0, 2.0, rng, true);
    Tensor xc = Tensor::rand_uniform({2, 1, 4, 4}, 0.1, 0.9, rng, false);
    Tensor tgt = one_hot_target(2, 2, 4, 4, rng);
    push(out, "total loss bundle", kLayerTol,
         [recon, sb, sc, xc, tgt] { return total_loss(recon, sb, sc, xc, tgt).total; },
         {recon, sb, sc});
  }

  {
    NetworkConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.se_reduction = 1;
    cfg.height = cfg.width = 8;
    EAANet net(cfg, rng.next_u64());
    Tensor xp = Tensor::rand_uniform({1, 1, 8, 8}, 0.0, 1.0, rng, false);
    Tensor xc = Tensor::rand_uniform({1, 1, 8, 8}, 0.0, 1.0, rng, false);
    Tensor xn = Tensor::rand_uniform({1, 1, 8, 8}, 0.0, 1.0, rng, false);
    Tensor tgt = one_hot_target(1, 2, 8, 8, rng);
    auto loss = [&net, xp, xc, xn, tgt] {
      EAAOutputs o = net.forward(xp, xc, xn, Mode::train);
      return total_loss(o.recon, o.seg_basic, o.seg_complete, xc, tgt).total;
    };
    double worst = 0.0;
    for (const auto& [name, p] : net.parameters()) worst = std::max(worst, fd_worst(loss, p));
    out.push_back({"network end-to-end, all parameters", worst, kEndToEndTol,
                   worst < kEndToEndTol});
  }

  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return !results.empty();
}

std::string format_report(const std::vector<CheckResult>& results) {
  std::size_t width = 0;
  for (const auto& r : results) width = std::max(width, r.name.size());
  std::string text;
  char line[160];
  std::size_t passed = 0;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-*s  max rel err %9.3e  tol %7.1e  %s\n",
                  static_cast<int>(width), r.name.c_str(), r.max_rel_err, r.tol,
                  r.pass ? "pass" : "FAIL");
    text += line;
    if (r.pass) ++passed;
  }
  std::snprintf(line, sizeof line, "%zu/%zu gradient checks passed\n", passed,
                results.size());
  text += line;
  return text;
}

}  // namespace eaa
