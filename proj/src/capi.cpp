#include "eaa/eaa.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <new>
#include <string>
#include <utility>
#include <vector>

#include "eaa/common.hpp"
#include "eaa/data.hpp"
#include "eaa/eaanet.hpp"
#include "eaa/gradcheck.hpp"
#include "eaa/metrics.hpp"
#include "eaa/trainer.hpp"

struct eaa_volume {
  eaa::Volume v;
};

struct eaa_model {
  eaa::EAANet net;
};

namespace {

thread_local std::string t_last_error;

eaa_status fail(eaa_status s, const std::string& what) {
  t_last_error = what;
  return s;
}

// Runs fn, translating the library's exception hierarchy into status codes.
// Most-derived IoError kinds must be caught before their base.
template <typename Fn>
eaa_status guarded(Fn&& fn) {
  try {
    const eaa_status s = fn();
    if (s == EAA_OK) t_last_error.clear();
    return s;
  } catch (const eaa::BadMagicError& e) {
    return fail(EAA_ERR_BAD_MAGIC, e.what());
  } catch (const eaa::TruncatedFileError& e) {
    return fail(EAA_ERR_TRUNCATED, e.what());
  } catch (const eaa::ChecksumError& e) {
    return fail(EAA_ERR_CHECKSUM, e.what());
  } catch (const eaa::IoError& e) {
    return fail(EAA_ERR_IO, e.what());
  } catch (const eaa::ShapeError& e) {
    return fail(EAA_ERR_SHAPE, e.what());
  } catch (const eaa::ConfigError& e) {
    return fail(EAA_ERR_CONFIG, e.what());
  } catch (const eaa::ValueError& e) {
    return fail(EAA_ERR_VALUE, e.what());
  } catch (const eaa::NumericError& e) {
    return fail(EAA_ERR_NUMERIC, e.what());
  } catch (const std::bad_alloc&) {
    return fail(EAA_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(EAA_ERR_INTERNAL, e.what());
  }
}

eaa_status need(bool ok, const char* what) {
  return ok ? EAA_OK : fail(EAA_ERR_INVALID_ARGUMENT, what);
}

eaa::NetworkConfig to_cpp(const eaa_model_config& c) {
  eaa::NetworkConfig cfg;
  cfg.depth = c.depth;
  cfg.base_channels = c.base_channels;
  cfg.recon_fraction = c.recon_fraction;
  cfg.num_classes = c.num_classes;
  cfg.se_reduction = c.se_reduction;
  cfg.height = c.height;
  cfg.width = c.width;
  return cfg;
}

eaa_model_config to_c(const eaa::NetworkConfig& cfg) {
  eaa_model_config c;
  c.depth = static_cast<uint32_t>(cfg.depth);
  c.base_channels = static_cast<uint32_t>(cfg.base_channels);
  c.recon_fraction = cfg.recon_fraction;
  c.num_classes = static_cast<uint32_t>(cfg.num_classes);
  c.se_reduction = static_cast<uint32_t>(cfg.se_reduction);
  c.height = static_cast<uint32_t>(cfg.height);
  c.width = static_cast<uint32_t>(cfg.width);
  return c;
}

eaa_metrics to_c(const eaa::MetricsReport& r) {
  eaa_metrics m;
  m.dsc = r.dsc;
  m.hd = r.hd;
  m.hd95 = r.hd95;
  m.sensitivity = r.sensitivity;
  m.specificity = r.specificity;
  m.volume_similarity = r.volume_similarity;
  m.has_hd = r.has_hd ? 1 : 0;
  return m;
}

std::vector<eaa::Volume> collect(const eaa_volume* const* volumes, size_t count) {
  std::vector<eaa::Volume> vols;
  vols.reserve(count);
  for (size_t i = 0; i < count; ++i) vols.push_back(volumes[i]->v);
  return vols;
}

eaa_status check_volume_array(const eaa_volume* const* volumes, size_t count) {
  if (eaa_status s = need(volumes != nullptr && count > 0, "need at least one volume");
      s != EAA_OK)
    return s;
  for (size_t i = 0; i < count; ++i)
    if (volumes[i] == nullptr) return fail(EAA_ERR_INVALID_ARGUMENT, "volume array holds a null entry");
  return EAA_OK;
}

}  // namespace

const char* eaa_status_name(eaa_status status) {
  switch (status) {
    case EAA_OK: return "EAA_OK";
    case EAA_ERR_INVALID_ARGUMENT: return "EAA_ERR_INVALID_ARGUMENT";
    case EAA_ERR_SHAPE: return "EAA_ERR_SHAPE";
    case EAA_ERR_CONFIG: return "EAA_ERR_CONFIG";
    case EAA_ERR_VALUE: return "EAA_ERR_VALUE";
    case EAA_ERR_IO: return "EAA_ERR_IO";
    case EAA_ERR_BAD_MAGIC: return "EAA_ERR_BAD_MAGIC";
    case EAA_ERR_TRUNCATED: return "EAA_ERR_TRUNCATED";
    case EAA_ERR_CHECKSUM: return "EAA_ERR_CHECKSUM";
    case EAA_ERR_NUMERIC: return "EAA_ERR_NUMERIC";
    case EAA_ERR_GRADCHECK: return "EAA_ERR_GRADCHECK";
    case EAA_ERR_INTERNAL: return "EAA_ERR_INTERNAL";
  }
  return "EAA_ERR_UNKNOWN";
}

const char* eaa_last_error(void) { return t_last_error.c_str(); }

void eaa_string_free(char* s) { std::free(s); }

eaa_status eaa_volume_generate(uint64_t seed, uint32_t slices, uint32_t height,
                               uint32_t width, eaa_volume** out) {
  if (eaa_status s = need(out != nullptr, "out pointer is null"); s != EAA_OK) return s;
  *out = nullptr;
  return guarded([&] {
    *out = new eaa_volume{eaa::gen_synthetic_volume(seed, slices, height, width)};
    return EAA_OK;
  });
}

eaa_status eaa_volume_from_data(uint32_t slices, uint32_t height, uint32_t width,
                                const float* image, const uint8_t* labels,
                                eaa_volume** out) {
  if (eaa_status s = need(out != nullptr, "out pointer is null"); s != EAA_OK) return s;
  *out = nullptr;
  if (eaa_status s = need(image != nullptr && labels != nullptr, "image or labels is null");
      s != EAA_OK)
    return s;
  return guarded([&]() -> eaa_status {
    const size_t n = size_t(slices) * height * width;
    if (n == 0) throw eaa::ValueError("volume extents must all be positive");
    for (size_t i = 0; i < n; ++i) {
      if (!(image[i] >= 0.0f && image[i] <= 1.0f))
        throw eaa::ValueError("image values must lie in [0, 1]");
      if (labels[i] > 1) throw eaa::ValueError("labels must be 0 or 1");
    }
    eaa::Volume v;
    v.slices = slices;
    v.height = height;
    v.width = width;
    v.image.assign(image, image + n);
    v.labels.assign(labels, labels + n);
    *out = new eaa_volume{std::move(v)};
    return EAA_OK;
  });
}

eaa_status eaa_volume_load(const char* path, eaa_volume** out) {
  if (eaa_status s = need(out != nullptr, "out pointer is null"); s != EAA_OK) return s;
  *out = nullptr;
  if (eaa_status s = need(path != nullptr, "path is null"); s != EAA_OK) return s;
  return guarded([&] {
    *out = new eaa_volume{eaa::load_volume(path)};
    return EAA_OK;
  });
}

eaa_status eaa_volume_save(const eaa_volume* vol, const char* path) {
  if (eaa_status s = need(vol != nullptr && path != nullptr, "volume or path is null");
      s != EAA_OK)
    return s;
  return guarded([&] {
    eaa::save_volume(vol->v, path);
    return EAA_OK;
  });
}

eaa_status eaa_volume_dims(const eaa_volume* vol, uint32_t* slices, uint32_t* height,
                           uint32_t* width) {
  if (eaa_status s = need(vol != nullptr, "volume is null"); s != EAA_OK) return s;
  if (slices) *slices = static_cast<uint32_t>(vol->v.slices);
  if (height) *height = static_cast<uint32_t>(vol->v.height);
  if (width) *width = static_cast<uint32_t>(vol->v.width);
  t_last_error.clear();
  return EAA_OK;
}

void eaa_volume_free(eaa_volume* vol) { delete vol; }

void eaa_model_config_defaults(eaa_model_config* cfg) {
  if (!cfg) return;
  *cfg = to_c(eaa::NetworkConfig{});
}

eaa_status eaa_model_create(const eaa_model_config* cfg, uint64_t seed, eaa_model** out) {
  if (eaa_status s = need(out != nullptr, "out pointer is null"); s != EAA_OK) return s;
  *out = nullptr;
  if (eaa_status s = need(cfg != nullptr, "config is null"); s != EAA_OK) return s;
  return guarded([&] {
    *out = new eaa_model{eaa::EAANet(to_cpp(*cfg), seed)};
    return EAA_OK;
  });
}

eaa_status eaa_model_load(const char* path, eaa_model** out) {
  if (eaa_status s = need(out != nullptr, "out pointer is null"); s != EAA_OK) return s;
  *out = nullptr;
  if (eaa_status s = need(path != nullptr, "path is null"); s != EAA_OK) return s;
  return guarded([&] {
    eaa::LoadedState state = eaa::load_checkpoint(path);
    *out = new eaa_model{std::move(state.model)};
    return EAA_OK;
  });
}

eaa_status eaa_model_save(const eaa_model* model, const char* path) {
  if (eaa_status s = need(model != nullptr && path != nullptr, "model or path is null");
      s != EAA_OK)
    return s;
  return guarded([&] {
    eaa::save_checkpoint(model->net, path);
    return EAA_OK;
  });
}

eaa_status eaa_model_config_of(const eaa_model* model, eaa_model_config* out) {
  if (eaa_status s = need(model != nullptr && out != nullptr, "model or out is null");
      s != EAA_OK)
    return s;
  *out = to_c(model->net.config());
  t_last_error.clear();
  return EAA_OK;
}

eaa_status eaa_model_parameter_count(const eaa_model* model, uint64_t* out) {
  if (eaa_status s = need(model != nullptr && out != nullptr, "model or out is null");
      s != EAA_OK)
    return s;
  *out = model->net.parameter_count();
  t_last_error.clear();
  return EAA_OK;
}

eaa_status eaa_model_set_fusion_enabled(eaa_model* model, int enabled) {
  if (eaa_status s = need(model != nullptr, "model is null"); s != EAA_OK) return s;
  model->net.fusion_enabled = enabled != 0;
  t_last_error.clear();
  return EAA_OK;
}

eaa_status eaa_model_fusion_enabled(const eaa_model* model, int* out) {
  if (eaa_status s = need(model != nullptr && out != nullptr, "model or out is null");
      s != EAA_OK)
    return s;
  *out = model->net.fusion_enabled ? 1 : 0;
  t_last_error.clear();
  return EAA_OK;
}

void eaa_model_free(eaa_model* model) { delete model; }

void eaa_train_config_defaults(eaa_train_config* cfg) {
  if (!cfg) return;
  const eaa::TrainConfig d;
  cfg->epochs = d.epochs;
  cfg->lr0 = d.lr0;
  cfg->batch_size = d.batch_size;
  cfg->seed = d.seed;
  cfg->checkpoint_every = d.checkpoint_every;
  cfg->out_dir = nullptr;
  cfg->log_csv_path = nullptr;
}

eaa_status eaa_train(eaa_model* model, const eaa_volume* const* volumes,
                     size_t volume_count, const eaa_train_config* cfg,
                     eaa_epoch_callback on_epoch, void* user) {
  if (eaa_status s = need(model != nullptr && cfg != nullptr, "model or config is null");
      s != EAA_OK)
    return s;
  if (eaa_status s = check_volume_array(volumes, volume_count); s != EAA_OK) return s;
  return guarded([&] {
    eaa::TrainConfig tc;
    tc.epochs = cfg->epochs;
    tc.lr0 = cfg->lr0;
    tc.batch_size = cfg->batch_size;
    tc.seed = cfg->seed;
    tc.checkpoint_every = cfg->checkpoint_every;
    if (cfg->out_dir) tc.out_dir = cfg->out_dir;

    eaa::EpochCallback cb;
    if (on_epoch) {
      cb = [on_epoch, user](const eaa::EpochLog& l) {
        eaa_epoch_log cl;
        cl.epoch = l.epoch;
        cl.lr = l.lr;
        cl.recon_l1 = l.recon_l1;
        cl.recon_l2 = l.recon_l2;
        cl.seg_basic = l.seg_basic;
        cl.seg_complete = l.seg_complete;
        cl.total = l.total;
        cl.train_dsc = l.train_dsc;
        on_epoch(&cl, user);
      };
    }

    const std::vector<eaa::EpochLog> logs =
        eaa::train(model->net, collect(volumes, volume_count), tc, nullptr, cb);

    if (cfg->log_csv_path) {
      std::ofstream os(cfg->log_csv_path, std::ios::binary);
      if (!os) throw eaa::IoError(std::string("cannot open ") + cfg->log_csv_path);
      eaa::write_train_csv(os, logs);
      os.flush();
      if (!os) throw eaa::IoError(std::string("short write to ") + cfg->log_csv_path);
    }
    return EAA_OK;
  });
}

eaa_status eaa_evaluate(eaa_model* model, const eaa_volume* const* volumes,
                        size_t volume_count, eaa_head head, eaa_metrics* per_volume,
                        eaa_metrics* aggregate, const char* csv_path) {
  if (eaa_status s = need(model != nullptr, "model is null"); s != EAA_OK) return s;
  if (eaa_status s = check_volume_array(volumes, volume_count); s != EAA_OK) return s;
  if (eaa_status s = need(head == EAA_HEAD_COMPLETE || head == EAA_HEAD_BASIC,
                          "head is out of range");
      s != EAA_OK)
    return s;
  return guarded([&] {
    const eaa::Head h = head == EAA_HEAD_BASIC ? eaa::Head::basic : eaa::Head::complete;
    const eaa::EvalResult res = eaa::evaluate(model->net, collect(volumes, volume_count), h);
    if (per_volume)
      for (size_t i = 0; i < volume_count; ++i) per_volume[i] = to_c(res.per_volume[i]);
    if (aggregate) *aggregate = to_c(res.aggregate);
    if (csv_path) {
      std::ofstream os(csv_path, std::ios::binary);
      if (!os) throw eaa::IoError(std::string("cannot open ") + csv_path);
      eaa::write_metrics_csv(os, res.per_volume);
      os.flush();
      if (!os) throw eaa::IoError(std::string("short write to ") + csv_path);
    }
    return EAA_OK;
  });
}

eaa_status eaa_predict(eaa_model* model, const eaa_volume* volume, eaa_head head,
                       uint8_t* mask_out) {
  if (eaa_status s = need(model != nullptr && volume != nullptr && mask_out != nullptr,
                          "model, volume, or mask_out is null");
      s != EAA_OK)
    return s;
  if (eaa_status s = need(head == EAA_HEAD_COMPLETE || head == EAA_HEAD_BASIC,
                          "head is out of range");
      s != EAA_OK)
    return s;
  return guarded([&] {
    const eaa::Head h = head == EAA_HEAD_BASIC ? eaa::Head::basic : eaa::Head::complete;
    const eaa::BinaryMask mask = eaa::predict_volume(model->net, volume->v, h);
    std::memcpy(mask_out, mask.values.data(), mask.values.size());
    return EAA_OK;
  });
}

eaa_status eaa_gradcheck(uint64_t seed, char** report_out) {
  if (report_out) *report_out = nullptr;
  return guarded([&]() -> eaa_status {
    const std::vector<eaa::CheckResult> results = eaa::run_gradient_checks(seed);
    if (report_out) {
      const std::string text = eaa::format_report(results);
      char* buf = static_cast<char*>(std::malloc(text.size() + 1));
      if (!buf) throw std::bad_alloc();
      std::memcpy(buf, text.c_str(), text.size() + 1);
      *report_out = buf;
    }
    if (!eaa::all_passed(results)) return fail(EAA_ERR_GRADCHECK, "gradient checks failed");
    return EAA_OK;
  });
}
