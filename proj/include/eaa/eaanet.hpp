#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "eaa/common.hpp"
#include "eaa/layers.hpp"
#include "eaa/tensor.hpp"

namespace eaa {

// Architecture hyperparameters. Channel ladders are derived, not stored:
// the segmentation encoder doubles from base_channels at every level, the
// reconstruction branch runs a recon_fraction-scaled copy of that ladder.
struct NetworkConfig {
  std::size_t depth = 3;
  std::size_t base_channels = 8;
  double recon_fraction = 0.5;
  std::size_t num_classes = 2;
  std::size_t se_reduction = 4;
  std::size_t height = 32;
  std::size_t width = 32;

  void validate() const;

  // level runs 1..depth in all four ladders
  std::size_t basic_channels(std::size_t level) const;
  std::size_t recon_channels(std::size_t level) const;
  std::size_t decoder_channels(std::size_t level) const;
  std::size_t recon_decoder_channels(std::size_t level) const;
};

// Two BN-ReLU-conv units with channel attention on the way out.
struct EncoderBlock {
  BatchNormParams bn1;
  ConvParams conv1;
  BatchNormParams bn2;
  ConvParams conv2;
  SEParams se;
};

// Doubling deconvolution, then BN-ReLU-conv over the (optionally
// skip-concatenated) feature.
struct DecoderBlock {
  ConvParams up;
  BatchNormParams bn;
  ConvParams conv;
};

// Bridge between a segmentation feature and the reconstruction feature at
// the same resolution: the reconstruction side modulates, a bounded gate is
// added back, so the segmentation feature is shifted by at most (0,1).
struct FusionSite {
  ConvParams match;   // 1x1, recon channels -> seg channels
  BatchNormParams bn;
  ConvParams weight;  // 1x1, seg channels -> seg channels
};

struct CompleteLevel {
  ConvParams up;
  FusionSite fuse;
  BatchNormParams bn;
  ConvParams conv;
};

// seg_feat + sigmoid(weight(relu(bn(seg_feat * match(recon_feat))))).
// The additive term lies strictly in (0,1) per element; with the weight conv
// zeroed it is exactly 0.5.
Tensor i2_fusion(const Tensor& seg_feat, const Tensor& recon_feat, FusionSite& site,
                 Mode mode);

struct EAAOutputs {
  Tensor seg_basic;     // [N,K,H,W] scores
  Tensor recon;         // [N,1,H,W] in (0,1)
  Tensor seg_complete;  // [N,K,H,W] scores
};

// Three-branch segmentation autoencoder. The basic branch segments the
// current slice alone; the reconstruction branch rebuilds that slice from
// its two neighbours; the complete branch re-runs the decoder while fusing
// in the reconstruction features at every resolution.
class EAANet {
 public:
  EAANet(const NetworkConfig& cfg, std::uint64_t seed);

  const NetworkConfig& config() const { return cfg_; }

  // When false the fusion sites pass the segmentation feature through
  // untouched. Runtime toggle for comparison runs; not serialized.
  bool fusion_enabled = true;

  // feats[0] is the input itself, feats[k] the pooled level-k feature.
  std::vector<Tensor> basic_encoder(const Tensor& x, Mode mode);

  struct DecoderTrace {
    std::vector<Tensor> levels;  // levels[k-1]: level-k decoder feature
    Tensor out;                  // class scores
  };
  DecoderTrace basic_decoder(const std::vector<Tensor>& feats, Mode mode);

  struct ReconTrace {
    std::vector<Tensor> enc;     // enc[0] = stacked neighbours, enc[k] pooled
    std::vector<Tensor> levels;  // decoder features
    Tensor out;                  // reconstructed slice, sigmoid output
  };
  ReconTrace recon_forward(const Tensor& x_prev, const Tensor& x_next, Mode mode);

  Tensor complete_forward(const Tensor& basic_bottom,
                          const std::vector<Tensor>& basic_levels,
                          const Tensor& recon_bottom,
                          const std::vector<Tensor>& recon_levels, Mode mode);

  EAAOutputs forward(const Tensor& x_prev, const Tensor& x_curr, const Tensor& x_next,
                     Mode mode);

  // Handles in registration order; names are stable and hierarchical
  // ("basic/enc1/conv1/weight"). Mutating through a handle reaches the model.
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::vector<std::pair<std::string, Tensor>> buffers() const;  // running stats
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  NetworkConfig cfg_;
  std::vector<EncoderBlock> basic_enc_;
  std::vector<DecoderBlock> basic_dec_;
  ConvParams basic_head_;
  std::vector<EncoderBlock> recon_enc_;
  std::vector<DecoderBlock> recon_dec_;
  ConvParams recon_head_;
  FusionSite fuse0_;
  std::vector<CompleteLevel> complete_;
  ConvParams complete_head_;

  Tensor run_encoder_block(EncoderBlock& blk, const Tensor& x, Mode mode);
  Tensor run_fusion(FusionSite& site, const Tensor& seg_feat, const Tensor& recon_feat,
                    Mode mode);
  void check_input(const Tensor& x, const char* name) const;
  void enumerate(std::vector<std::pair<std::string, Tensor>>* params,
                 std::vector<std::pair<std::string, Tensor>>* buffers) const;
};

}  // namespace eaa
