#include "eaa/layers.hpp"

#include <cmath>
#include <string>

namespace eaa {

namespace {

Tensor he_uniform(Shape shape, std::size_t fan_in, SplitMix64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  return Tensor::rand_uniform(std::move(shape), -limit, limit, rng, true);
}

void check_kernel(std::size_t kernel, const char* name) {
  if (kernel != 1 && kernel != 3)
    throw ConfigError(std::string(name) + ": kernel must be 1 or 3, got " +
                      std::to_string(kernel));
}

}  // namespace

ConvParams make_conv(std::size_t out_ch, std::size_t in_ch, std::size_t kernel,
                     std::size_t stride, std::size_t padding, SplitMix64& rng) {
  check_kernel(kernel, "make_conv");
  if (out_ch == 0 || in_ch == 0) throw ConfigError("make_conv: channel counts must be positive");
  ConvParams p;
  p.weight = he_uniform({out_ch, in_ch, kernel, kernel}, in_ch * kernel * kernel, rng);
  p.bias = Tensor::zeros({out_ch}, true);
  p.stride = stride;
  p.padding = padding;
  return p;
}

ConvParams make_tconv(std::size_t in_ch, std::size_t out_ch, SplitMix64& rng) {
  if (out_ch == 0 || in_ch == 0) throw ConfigError("make_tconv: channel counts must be positive");
  ConvParams p;
  p.weight = he_uniform({in_ch, out_ch, 3, 3}, in_ch * 9, rng);
  p.bias = Tensor::zeros({out_ch}, true);
  p.stride = 2;
  p.padding = 1;
  return p;
}

Tensor conv2d(const Tensor& x, const ConvParams& p) {
  check_kernel(p.weight.shape()[2], "conv2d");
  return conv2d_raw(x, p.weight, p.bias, p.stride, p.padding);
}

Tensor transposed_conv2d(const Tensor& x, const ConvParams& p) {
  if (p.weight.shape()[2] != 3 || p.stride != 2 || p.padding != 1)
    throw ConfigError("transposed_conv2d: this network only uses kernel 3, stride 2, pad 1");
  return conv_transpose2d_raw(x, p.weight, p.bias, 2, 1, 1);
}

BatchNormParams make_batchnorm(std::size_t channels) {
  if (channels == 0) throw ConfigError("make_batchnorm: channels must be positive");
  BatchNormParams p;
  p.gamma = Tensor::full({channels}, 1.0, true);
  p.beta = Tensor::zeros({channels}, true);
  p.running_mean = Tensor::zeros({channels});
  p.running_var = Tensor::full({channels}, 1.0);
  return p;
}

Tensor batchnorm(const Tensor& x, BatchNormParams& p, Mode mode) {
  if (mode == Mode::eval)
    return batchnorm_eval(x, p.gamma, p.beta, p.running_mean.data(), p.running_var.data(), p.eps);
  std::vector<double> bm, bv;
  Tensor y = batchnorm_train(x, p.gamma, p.beta, p.eps, &bm, &bv);
  const auto& s = x.shape();
  const double m = static_cast<double>(s[0] * s[2] * s[3]);
  const double unbias = m / (m - 1.0);
  auto& rm = p.running_mean.mutable_data();
  auto& rv = p.running_var.mutable_data();
  for (std::size_t c = 0; c < rm.size(); ++c) {
    rm[c] = (1.0 - p.momentum) * rm[c] + p.momentum * bm[c];
    rv[c] = (1.0 - p.momentum) * rv[c] + p.momentum * bv[c] * unbias;
  }
  return y;
}

SEParams make_se(std::size_t channels, std::size_t reduction, SplitMix64& rng) {
  if (reduction == 0) throw ConfigError("make_se: reduction must be positive");
  if (channels == 0 || channels % reduction != 0)
    throw ConfigError("make_se: reduction " + std::to_string(reduction) +
                      " does not divide " + std::to_string(channels) + " channels");
  SEParams p;
  const std::size_t mid = channels / reduction;
  p.reduce_weight = he_uniform({mid, channels}, channels, rng);
  p.expand_weight = he_uniform({channels, mid}, mid, rng);
  p.reduction = reduction;
  return p;
}

Tensor se_block(const Tensor& x, const SEParams& p) {
  const auto& s = x.shape();
  if (s.size() != 4) throw ShapeError("se_block: input must be [N,C,H,W], got " + shape_str(s));
  if (p.reduce_weight.shape()[1] != s[1])
    throw ShapeError("se_block: input has " + std::to_string(s[1]) +
                     " channels but weights expect " + std::to_string(p.reduce_weight.shape()[1]));
  Tensor pooled = reduce_mean(x, {2, 3});                    // [N,C]
  Tensor gate = relu(linear(pooled, p.reduce_weight));       // [N,C/r]
  gate = sigmoid(linear(gate, p.expand_weight));             // [N,C] in (0,1)
  return mul(x, reshape(gate, {s[0], s[1], 1, 1}));
}

}  // namespace eaa
