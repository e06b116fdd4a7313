#pragma once

#include "eaa/common.hpp"
#include "eaa/tensor.hpp"

namespace eaa {

enum class Mode { train, eval };

// Convolution parameters. `weight` is [out,in,k,k] for conv2d and
// [in,out,k,k] for transposed_conv2d; both layouts are identical bytes for an
// adjoint pair, which the adjoint identity test relies on.
struct ConvParams {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// He-uniform weights (limit sqrt(6/fan_in)), zero bias. Kernels are 3x3 or
// 1x1 everywhere in this network.
ConvParams make_conv(std::size_t out_ch, std::size_t in_ch, std::size_t kernel,
                     std::size_t stride, std::size_t padding, SplitMix64& rng);

// Doubling deconvolution: kernel 3, stride 2, pad 1, output padding 1.
ConvParams make_tconv(std::size_t in_ch, std::size_t out_ch, SplitMix64& rng);

Tensor conv2d(const Tensor& x, const ConvParams& p);
// [N,C,h,w] -> [N,C',2h,2w].
Tensor transposed_conv2d(const Tensor& x, const ConvParams& p);

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // buffers: updated by train-mode forwards, never by backward
  Tensor running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

BatchNormParams make_batchnorm(std::size_t channels);

// Train mode normalizes by batch statistics and folds them into the running
// averages (new = (1-momentum)*old + momentum*batch, unbiased variance).
// Eval mode normalizes by the running averages.
Tensor batchnorm(const Tensor& x, BatchNormParams& p, Mode mode);

// Squeeze-excite: global average pool, bottleneck MLP (no biases), sigmoid
// gate multiplied back onto the input.
struct SEParams {
  Tensor reduce_weight;  // [C/r, C]
  Tensor expand_weight;  // [C, C/r]
  std::size_t reduction = 4;
};

SEParams make_se(std::size_t channels, std::size_t reduction, SplitMix64& rng);

Tensor se_block(const Tensor& x, const SEParams& p);

}  // namespace eaa
