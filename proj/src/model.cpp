#include "eaa/eaanet.hpp"

#include <cmath>

namespace eaa {

namespace {

std::size_t scaled(std::size_t channels, double fraction) {
  const long long r = std::llround(fraction * double(channels));
  return r < 1 ? 1 : std::size_t(r);
}

}  // namespace

void NetworkConfig::validate() const {
  if (depth < 1) throw ConfigError("NetworkConfig: depth must be at least 1");
  if (depth > 16) throw ConfigError("NetworkConfig: depth above 16 is not supported");
  if (base_channels < 1) throw ConfigError("NetworkConfig: base_channels must be positive");
  if (!(recon_fraction > 0.0) || recon_fraction > 1.0)
    throw ConfigError("NetworkConfig: recon_fraction must be in (0, 1]");
  if (num_classes < 2) throw ConfigError("NetworkConfig: need at least 2 classes");
  if (se_reduction < 1) throw ConfigError("NetworkConfig: se_reduction must be positive");
  const std::size_t div = std::size_t(1) << depth;
  if (height == 0 || width == 0 || height % div != 0 || width % div != 0)
    throw ConfigError("NetworkConfig: height and width must be positive multiples of 2^depth");
  for (std::size_t k = 1; k <= depth; ++k) {
    if (basic_channels(k) % se_reduction != 0 || recon_channels(k) % se_reduction != 0)
      throw ConfigError("NetworkConfig: se_reduction does not divide the channel count at level " +
                        std::to_string(k));
  }
}

std::size_t NetworkConfig::basic_channels(std::size_t level) const {
  return base_channels << (level - 1);
}

std::size_t NetworkConfig::recon_channels(std::size_t level) const {
  return scaled(basic_channels(level), recon_fraction);
}

std::size_t NetworkConfig::decoder_channels(std::size_t level) const {
  return level < depth ? basic_channels(depth - level) : base_channels;
}

std::size_t NetworkConfig::recon_decoder_channels(std::size_t level) const {
  return scaled(decoder_channels(level), recon_fraction);
}

EAANet::EAANet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  SplitMix64 rng(seed);
  const std::size_t l = cfg_.depth;

  auto make_encoder = [&](std::size_t in, std::size_t out) {
    EncoderBlock b;
    b.bn1 = make_batchnorm(in);
    b.conv1 = make_conv(out, in, 3, 1, 1, rng);
    b.bn2 = make_batchnorm(out);
    b.conv2 = make_conv(out, out, 3, 1, 1, rng);
    b.se = make_se(out, cfg_.se_reduction, rng);
    return b;
  };

  for (std::size_t k = 1; k <= l; ++k)
    basic_enc_.push_back(
        make_encoder(k == 1 ? 1 : cfg_.basic_channels(k - 1), cfg_.basic_channels(k)));

  for (std::size_t k = 1; k <= l; ++k) {
    const std::size_t prev = k == 1 ? cfg_.basic_channels(l) : cfg_.decoder_channels(k - 1);
    const std::size_t out = cfg_.decoder_channels(k);
    // the full-resolution skip is the raw input image itself
    const std::size_t skip = k < l ? cfg_.basic_channels(l - k) : 1;
    DecoderBlock d;
    d.up = make_tconv(prev, out, rng);
    d.bn = make_batchnorm(out + skip);
    d.conv = make_conv(out, out + skip, 3, 1, 1, rng);
    basic_dec_.push_back(std::move(d));
  }
  basic_head_ = make_conv(cfg_.num_classes, cfg_.decoder_channels(l), 1, 1, 0, rng);

  for (std::size_t k = 1; k <= l; ++k)
    recon_enc_.push_back(
        make_encoder(k == 1 ? 2 : cfg_.recon_channels(k - 1), cfg_.recon_channels(k)));

  for (std::size_t k = 1; k <= l; ++k) {
    const std::size_t prev =
        k == 1 ? cfg_.recon_channels(l) : cfg_.recon_decoder_channels(k - 1);
    const std::size_t out = cfg_.recon_decoder_channels(k);
    DecoderBlock d;
    d.up = make_tconv(prev, out, rng);
    d.bn = make_batchnorm(out);
    d.conv = make_conv(out, out, 3, 1, 1, rng);
    recon_dec_.push_back(std::move(d));
  }
  recon_head_ = make_conv(1, cfg_.recon_decoder_channels(l), 1, 1, 0, rng);

  auto make_fusion = [&](std::size_t seg_ch, std::size_t recon_ch) {
    FusionSite f;
    f.match = make_conv(seg_ch, recon_ch, 1, 1, 0, rng);
    f.bn = make_batchnorm(seg_ch);
    f.weight = make_conv(seg_ch, seg_ch, 1, 1, 0, rng);
    return f;
  };

  fuse0_ = make_fusion(cfg_.basic_channels(l), cfg_.recon_channels(l));
  for (std::size_t k = 1; k <= l; ++k) {
    const std::size_t prev = k == 1 ? cfg_.basic_channels(l) : cfg_.decoder_channels(k - 1);
    const std::size_t out = cfg_.decoder_channels(k);
    CompleteLevel c;
    c.up = make_tconv(prev, out, rng);
    c.fuse = make_fusion(out, cfg_.recon_decoder_channels(k));
    c.bn = make_batchnorm(out);
    c.conv = make_conv(out, out, 3, 1, 1, rng);
    complete_.push_back(std::move(c));
  }
  complete_head_ = make_conv(cfg_.num_classes, cfg_.decoder_channels(l), 1, 1, 0, rng);
}

void EAANet::check_input(const Tensor& x, const char* name) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.height || s[3] != cfg_.width || s[0] == 0)
    throw ShapeError(std::string("EAANet: ") + name + " must be [N,1," +
                     std::to_string(cfg_.height) + "," + std::to_string(cfg_.width) +
                     "], got " + shape_str(s));
}

Tensor EAANet::run_encoder_block(EncoderBlock& blk, const Tensor& x, Mode mode) {
  Tensor t = conv2d(relu(batchnorm(x, blk.bn1, mode)), blk.conv1);
  t = conv2d(relu(batchnorm(t, blk.bn2, mode)), blk.conv2);
  return se_block(t, blk.se);
}

Tensor i2_fusion(const Tensor& seg_feat, const Tensor& recon_feat, FusionSite& site,
                 Mode mode) {
  Tensor t = mul(seg_feat, conv2d(recon_feat, site.match));
  t = relu(batchnorm(t, site.bn, mode));
  // the additive gate is sigmoid-bounded, so fusion can nudge but never
  // overwrite the segmentation feature
  return add(seg_feat, sigmoid(conv2d(t, site.weight)));
}

Tensor EAANet::run_fusion(FusionSite& site, const Tensor& seg_feat, const Tensor& recon_feat,
                          Mode mode) {
  if (!fusion_enabled) return seg_feat;
  return i2_fusion(seg_feat, recon_feat, site, mode);
}

std::vector<Tensor> EAANet::basic_encoder(const Tensor& x, Mode mode) {
  check_input(x, "x_curr");
  std::vector<Tensor> feats;
  feats.push_back(x);
  Tensor cur = x;
  for (auto& blk : basic_enc_) {
    cur = maxpool2d(run_encoder_block(blk, cur, mode));
    feats.push_back(cur);
  }
  return feats;
}

EAANet::DecoderTrace EAANet::basic_decoder(const std::vector<Tensor>& feats, Mode mode) {
  if (feats.size() != cfg_.depth + 1)
    throw ShapeError("EAANet: basic_decoder expects depth+1 encoder features");
  DecoderTrace tr;
  Tensor cur = feats[cfg_.depth];
  for (std::size_t k = 1; k <= cfg_.depth; ++k) {
    DecoderBlock& d = basic_dec_[k - 1];
    Tensor up = transposed_conv2d(cur, d.up);
    Tensor cat = concat(up, feats[cfg_.depth - k], 1);
    cur = conv2d(relu(batchnorm(cat, d.bn, mode)), d.conv);
    tr.levels.push_back(cur);
  }
  tr.out = conv2d(cur, basic_head_);
  return tr;
}

EAANet::ReconTrace EAANet::recon_forward(const Tensor& x_prev, const Tensor& x_next,
                                         Mode mode) {
  check_input(x_prev, "x_prev");
  check_input(x_next, "x_next");
  ReconTrace tr;
  Tensor cur = concat(x_prev, x_next, 1);
  tr.enc.push_back(cur);
  for (auto& blk : recon_enc_) {
    cur = maxpool2d(run_encoder_block(blk, cur, mode));
    tr.enc.push_back(cur);
  }
  for (auto& d : recon_dec_) {
    Tensor up = transposed_conv2d(cur, d.up);
    cur = conv2d(relu(batchnorm(up, d.bn, mode)), d.conv);
    tr.levels.push_back(cur);
  }
  tr.out = sigmoid(conv2d(cur, recon_head_));
  return tr;
}

Tensor EAANet::complete_forward(const Tensor& basic_bottom,
                                const std::vector<Tensor>& basic_levels,
                                const Tensor& recon_bottom,
                                const std::vector<Tensor>& recon_levels, Mode mode) {
  if (basic_levels.size() != cfg_.depth || recon_levels.size() != cfg_.depth)
    throw ShapeError("EAANet: complete_forward expects depth features per branch");
  Tensor cur = run_fusion(fuse0_, basic_bottom, recon_bottom, mode);
  for (std::size_t k = 1; k <= cfg_.depth; ++k) {
    CompleteLevel& c = complete_[k - 1];
    Tensor up = transposed_conv2d(cur, c.up);
    Tensor fused = run_fusion(c.fuse, basic_levels[k - 1], recon_levels[k - 1], mode);
    cur = conv2d(relu(batchnorm(add(up, fused), c.bn, mode)), c.conv);
  }
  return conv2d(cur, complete_head_);
}

EAAOutputs EAANet::forward(const Tensor& x_prev, const Tensor& x_curr, const Tensor& x_next,
                           Mode mode) {
  check_input(x_curr, "x_curr");
  if (x_prev.shape() != x_curr.shape() || x_next.shape() != x_curr.shape())
    throw ShapeError("EAANet: the three input slices must share a shape");
  std::vector<Tensor> feats = basic_encoder(x_curr, mode);
  DecoderTrace basic = basic_decoder(feats, mode);
  ReconTrace recon = recon_forward(x_prev, x_next, mode);
  Tensor complete = complete_forward(feats[cfg_.depth], basic.levels, recon.enc[cfg_.depth],
                                     recon.levels, mode);
  return {basic.out, recon.out, complete};
}

void EAANet::enumerate(std::vector<std::pair<std::string, Tensor>>* params,
                       std::vector<std::pair<std::string, Tensor>>* buffers) const {
  auto conv = [&](const std::string& prefix, const ConvParams& c) {
    if (!params) return;
    params->emplace_back(prefix + "/weight", c.weight);
    params->emplace_back(prefix + "/bias", c.bias);
  };
  auto bn = [&](const std::string& prefix, const BatchNormParams& b) {
    if (params) {
      params->emplace_back(prefix + "/gamma", b.gamma);
      params->emplace_back(prefix + "/beta", b.beta);
    }
    if (buffers) {
      buffers->emplace_back(prefix + "/running_mean", b.running_mean);
      buffers->emplace_back(prefix + "/running_var", b.running_var);
    }
  };
  auto se = [&](const std::string& prefix, const SEParams& s) {
    if (!params) return;
    params->emplace_back(prefix + "/reduce", s.reduce_weight);
    params->emplace_back(prefix + "/expand", s.expand_weight);
  };
  auto encoder = [&](const std::string& prefix, const EncoderBlock& b) {
    bn(prefix + "/bn1", b.bn1);
    conv(prefix + "/conv1", b.conv1);
    bn(prefix + "/bn2", b.bn2);
    conv(prefix + "/conv2", b.conv2);
    se(prefix + "/se", b.se);
  };
  auto decoder = [&](const std::string& prefix, const DecoderBlock& d) {
    conv(prefix + "/up", d.up);
    bn(prefix + "/bn", d.bn);
    conv(prefix + "/conv", d.conv);
  };
  auto fusion = [&](const std::string& prefix, const FusionSite& f) {
    conv(prefix + "/match", f.match);
    bn(prefix + "/bn", f.bn);
    conv(prefix + "/weight", f.weight);
  };

  for (std::size_t k = 0; k < basic_enc_.size(); ++k)
    encoder("basic/enc" + std::to_string(k + 1), basic_enc_[k]);
  for (std::size_t k = 0; k < basic_dec_.size(); ++k)
    decoder("basic/dec" + std::to_string(k + 1), basic_dec_[k]);
  conv("basic/head", basic_head_);
  for (std::size_t k = 0; k < recon_enc_.size(); ++k)
    encoder("recon/enc" + std::to_string(k + 1), recon_enc_[k]);
  for (std::size_t k = 0; k < recon_dec_.size(); ++k)
    decoder("recon/dec" + std::to_string(k + 1), recon_dec_[k]);
  conv("recon/head", recon_head_);
  fusion("complete/fuse0", fuse0_);
  for (std::size_t k = 0; k < complete_.size(); ++k) {
    const std::string prefix = "complete/lvl" + std::to_string(k + 1);
    conv(prefix + "/up", complete_[k].up);
    fusion(prefix + "/fuse", complete_[k].fuse);
    bn(prefix + "/bn", complete_[k].bn);
    conv(prefix + "/conv", complete_[k].conv);
  }
  conv("complete/head", complete_head_);
}

std::vector<std::pair<std::string, Tensor>> EAANet::parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  enumerate(&out, nullptr);
  return out;
}

std::vector<std::pair<std::string, Tensor>> EAANet::buffers() const {
  std::vector<std::pair<std::string, Tensor>> out;
  enumerate(nullptr, &out);
  return out;
}

std::size_t EAANet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.size();
  return n;
}

void EAANet::zero_grad() {
  for (auto& [name, t] : parameters()) t.zero_grad();
}

}  // namespace eaa
