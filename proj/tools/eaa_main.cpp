// eaa: trains, evaluates, and drives the three-branch segmentation
// autoencoder through the shared library's C interface. Everything here goes
// through eaa.h; the C++ core stays an implementation detail of libeaanet.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "eaa/eaa.h"

namespace fs = std::filesystem;

namespace {

int report(eaa_status s, const std::string& doing) {
  std::fprintf(stderr, "eaa: %s: %s (%s)\n", doing.c_str(), eaa_last_error(),
               eaa_status_name(s));
  return 1;
}

struct VolumePtr {
  eaa_volume* v = nullptr;
  VolumePtr() = default;
  VolumePtr(VolumePtr&& o) noexcept : v(o.v) { o.v = nullptr; }
  VolumePtr& operator=(VolumePtr&& o) noexcept {
    if (this != &o) {
      eaa_volume_free(v);
      v = o.v;
      o.v = nullptr;
    }
    return *this;
  }
  VolumePtr(const VolumePtr&) = delete;
  VolumePtr& operator=(const VolumePtr&) = delete;
  ~VolumePtr() { eaa_volume_free(v); }
};

struct ModelPtr {
  eaa_model* m = nullptr;
  ModelPtr() = default;
  ModelPtr(const ModelPtr&) = delete;
  ModelPtr& operator=(const ModelPtr&) = delete;
  ~ModelPtr() { eaa_model_free(m); }
};

// Lexicographically sorted volume files in a directory.
std::vector<fs::path> list_volumes(const std::string& dir, std::string* err) {
  std::vector<fs::path> out;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_regular_file() && entry.path().extension() == ".eaav")
      out.push_back(entry.path());
  }
  if (ec) {
    *err = "cannot read directory " + dir + ": " + ec.message();
    return {};
  }
  if (out.empty()) {
    *err = "no .eaav volumes in " + dir;
    return {};
  }
  std::sort(out.begin(), out.end());
  return out;
}

int load_all(const std::vector<fs::path>& paths, std::vector<VolumePtr>* vols,
             std::vector<const eaa_volume*>* raw) {
  for (const auto& p : paths) {
    VolumePtr vp;
    if (eaa_status s = eaa_volume_load(p.string().c_str(), &vp.v); s != EAA_OK)
      return report(s, "loading " + p.string());
    raw->push_back(vp.v);
    vols->push_back(std::move(vp));
  }
  return 0;
}

// Flat key=value file; '#' starts a comment, blank lines are skipped.
bool parse_config_file(const std::string& path, std::map<std::string, std::string>* kv,
                       std::string* err) {
  std::ifstream is(path);
  if (!is) {
    *err = "cannot open config " + path;
    return false;
  }
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      *err = path + ":" + std::to_string(lineno) + ": expected key=value";
      return false;
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty() || value.empty()) {
      *err = path + ":" + std::to_string(lineno) + ": empty key or value";
      return false;
    }
    if (kv->count(key)) {
      *err = path + ":" + std::to_string(lineno) + ": duplicate key " + key;
      return false;
    }
    (*kv)[key] = value;
  }
  return true;
}

bool to_u64(const std::string& s, std::uint64_t* out) {
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) return false;
    *out = v;
    return true;
  } catch (...) {
    return false;
  }
}

bool to_double(const std::string& s, double* out) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) return false;
    *out = v;
    return true;
  } catch (...) {
    return false;
  }
}

void print_epoch(const eaa_epoch_log* log, void*) {
  std::printf("epoch %4llu  lr %.3e  recon %.4f/%.4f  seg %.4f/%.4f  total %.4f  dsc %.4f\n",
              static_cast<unsigned long long>(log->epoch), log->lr, log->recon_l1,
              log->recon_l2, log->seg_basic, log->seg_complete, log->total,
              log->train_dsc);
  std::fflush(stdout);
}

void print_metrics(const char* label, const eaa_metrics& m) {
  std::printf("%-18s dsc %.4f  sens %.4f  spec %.4f  vs %.4f", label, m.dsc,
              m.sensitivity, m.specificity, m.volume_similarity);
  if (m.has_hd)
    std::printf("  hd %.4f  hd95 %.4f\n", m.hd, m.hd95);
  else
    std::printf("  hd --  hd95 --\n");
}

int run_gen_data(std::uint64_t seed, std::uint32_t volumes, std::uint32_t slices,
                 std::uint32_t size, const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) {
    std::fprintf(stderr, "eaa: cannot create %s: %s\n", out_dir.c_str(),
                 ec.message().c_str());
    return 1;
  }
  for (std::uint32_t i = 0; i < volumes; ++i) {
    VolumePtr vp;
    if (eaa_status s = eaa_volume_generate(seed + i, slices, size, size, &vp.v);
        s != EAA_OK)
      return report(s, "generating volume " + std::to_string(i));
    char name[32];
    std::snprintf(name, sizeof name, "vol_%04u.eaav", i);
    const fs::path path = fs::path(out_dir) / name;
    if (eaa_status s = eaa_volume_save(vp.v, path.string().c_str()); s != EAA_OK)
      return report(s, "writing " + path.string());
  }
  std::printf("wrote %u volumes (%u x %u x %u, base seed %llu) to %s\n", volumes, slices,
              size, size, static_cast<unsigned long long>(seed), out_dir.c_str());
  return 0;
}

struct TrainFlags {
  std::string config, data_dir, out_dir;
  std::uint64_t seed = 0;
  std::uint64_t epochs = 0;
  double lr = 0.0;
  std::uint64_t batch_size = 0;
  bool seed_set = false, epochs_set = false, lr_set = false, batch_set = false;
};

int run_train(const TrainFlags& flags) {
  std::string err;
  const auto paths = list_volumes(flags.data_dir, &err);
  if (paths.empty()) {
    std::fprintf(stderr, "eaa: %s\n", err.c_str());
    return 1;
  }

  std::map<std::string, std::string> kv;
  if (!flags.config.empty() && !parse_config_file(flags.config, &kv, &err)) {
    std::fprintf(stderr, "eaa: %s\n", err.c_str());
    return 2;
  }

  eaa_model_config mc;
  eaa_model_config_defaults(&mc);
  eaa_train_config tc;
  eaa_train_config_defaults(&tc);
  bool have_height = false, have_width = false;

  // every key the config file may set; anything else is a typo
  for (const auto& [key, value] : kv) {
    std::uint64_t u = 0;
    double d = 0.0;
    bool ok = true;
    if (key == "depth") ok = to_u64(value, &u), mc.depth = std::uint32_t(u);
    else if (key == "base_channels") ok = to_u64(value, &u), mc.base_channels = std::uint32_t(u);
    else if (key == "recon_fraction") ok = to_double(value, &d), mc.recon_fraction = d;
    else if (key == "num_classes") ok = to_u64(value, &u), mc.num_classes = std::uint32_t(u);
    else if (key == "se_reduction") ok = to_u64(value, &u), mc.se_reduction = std::uint32_t(u);
    else if (key == "height") ok = to_u64(value, &u), mc.height = std::uint32_t(u), have_height = true;
    else if (key == "width") ok = to_u64(value, &u), mc.width = std::uint32_t(u), have_width = true;
    else if (key == "epochs") ok = to_u64(value, &u), tc.epochs = u;
    else if (key == "lr") ok = to_double(value, &d), tc.lr0 = d;
    else if (key == "batch_size") ok = to_u64(value, &u), tc.batch_size = u;
    else if (key == "seed") ok = to_u64(value, &u), tc.seed = u;
    else if (key == "checkpoint_every") ok = to_u64(value, &u), tc.checkpoint_every = u;
    else {
      std::fprintf(stderr, "eaa: %s: unknown key '%s'\n", flags.config.c_str(), key.c_str());
      return 2;
    }
    if (!ok) {
      std::fprintf(stderr, "eaa: %s: bad value for '%s': %s\n", flags.config.c_str(),
                   key.c_str(), value.c_str());
      return 2;
    }
  }

  // command line wins over the config file
  if (flags.seed_set) tc.seed = flags.seed;
  if (flags.epochs_set) tc.epochs = flags.epochs;
  if (flags.lr_set) tc.lr0 = flags.lr;
  if (flags.batch_set) tc.batch_size = flags.batch_size;

  std::vector<VolumePtr> vols;
  std::vector<const eaa_volume*> raw;
  if (int rc = load_all(paths, &vols, &raw); rc != 0) return rc;

  // plane size follows the data unless the config pinned it
  std::uint32_t vh = 0, vw = 0;
  eaa_volume_dims(raw[0], nullptr, &vh, &vw);
  if (!have_height) mc.height = vh;
  if (!have_width) mc.width = vw;

  std::error_code ec;
  fs::create_directories(flags.out_dir, ec);
  if (ec) {
    std::fprintf(stderr, "eaa: cannot create %s: %s\n", flags.out_dir.c_str(),
                 ec.message().c_str());
    return 1;
  }

  // one seed drives both the parameter init and the batch shuffling
  ModelPtr model;
  if (eaa_status s = eaa_model_create(&mc, tc.seed, &model.m); s != EAA_OK)
    return report(s, "creating model");
  std::uint64_t params = 0;
  eaa_model_parameter_count(model.m, &params);
  std::printf("model: depth %u, base %u, %u x %u, %llu parameters\n", mc.depth,
              mc.base_channels, mc.height, mc.width,
              static_cast<unsigned long long>(params));
  std::printf("training on %zu volumes for %llu epochs (batch %llu, lr0 %g, seed %llu)\n",
              raw.size(), static_cast<unsigned long long>(tc.epochs),
              static_cast<unsigned long long>(tc.batch_size), tc.lr0,
              static_cast<unsigned long long>(tc.seed));

  const std::string out_dir = flags.out_dir;
  const std::string csv = (fs::path(out_dir) / "log.csv").string();
  tc.out_dir = out_dir.c_str();
  tc.log_csv_path = csv.c_str();

  if (eaa_status s = eaa_train(model.m, raw.data(), raw.size(), &tc, print_epoch, nullptr);
      s != EAA_OK)
    return report(s, "training");
  std::printf("wrote %s and %s\n", (fs::path(out_dir) / "final.eaac").string().c_str(),
              csv.c_str());
  return 0;
}

int run_eval(const std::string& checkpoint, const std::string& data_dir,
             const std::string& csv_out) {
  ModelPtr model;
  if (eaa_status s = eaa_model_load(checkpoint.c_str(), &model.m); s != EAA_OK)
    return report(s, "loading " + checkpoint);

  std::string err;
  const auto paths = list_volumes(data_dir, &err);
  if (paths.empty()) {
    std::fprintf(stderr, "eaa: %s\n", err.c_str());
    return 1;
  }
  std::vector<VolumePtr> vols;
  std::vector<const eaa_volume*> raw;
  if (int rc = load_all(paths, &vols, &raw); rc != 0) return rc;

  std::vector<eaa_metrics> per(raw.size());
  eaa_metrics agg;
  if (eaa_status s = eaa_evaluate(model.m, raw.data(), raw.size(), EAA_HEAD_COMPLETE,
                                  per.data(), &agg,
                                  csv_out.empty() ? nullptr : csv_out.c_str());
      s != EAA_OK)
    return report(s, "evaluating");

  for (std::size_t i = 0; i < per.size(); ++i)
    print_metrics(paths[i].filename().string().c_str(), per[i]);
  print_metrics("mean", agg);
  if (!csv_out.empty()) std::printf("wrote %s\n", csv_out.c_str());
  return 0;
}

int run_predict(const std::string& checkpoint, const std::string& volume,
                const std::string& mask_out) {
  ModelPtr model;
  if (eaa_status s = eaa_model_load(checkpoint.c_str(), &model.m); s != EAA_OK)
    return report(s, "loading " + checkpoint);
  VolumePtr vol;
  if (eaa_status s = eaa_volume_load(volume.c_str(), &vol.v); s != EAA_OK)
    return report(s, "loading " + volume);

  std::uint32_t slices = 0, height = 0, width = 0;
  eaa_volume_dims(vol.v, &slices, &height, &width);
  if (slices < 3) {
    std::fprintf(stderr, "eaa: %s has %u slices; prediction needs at least 3\n",
                 volume.c_str(), slices);
    return 1;
  }

  const std::size_t n = std::size_t(slices - 2) * height * width;
  std::vector<std::uint8_t> mask(n);
  if (eaa_status s = eaa_predict(model.m, vol.v, EAA_HEAD_COMPLETE, mask.data());
      s != EAA_OK)
    return report(s, "predicting");

  // the mask ships as a volume file: image mirrors the labels as 0.0/1.0
  std::vector<float> image(n);
  std::size_t fg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    image[i] = float(mask[i]);
    fg += mask[i];
  }
  VolumePtr out;
  if (eaa_status s = eaa_volume_from_data(slices - 2, height, width, image.data(),
                                          mask.data(), &out.v);
      s != EAA_OK)
    return report(s, "packing mask");
  if (eaa_status s = eaa_volume_save(out.v, mask_out.c_str()); s != EAA_OK)
    return report(s, "writing " + mask_out);
  std::printf("wrote %s: %u interior slices, foreground fraction %.4f\n",
              mask_out.c_str(), slices - 2, double(fg) / double(n));
  return 0;
}

int run_gradcheck(std::uint64_t seed) {
  char* text = nullptr;
  const eaa_status s = eaa_gradcheck(seed, &text);
  if (text) {
    std::fputs(text, stdout);
    eaa_string_free(text);
  }
  if (s == EAA_OK) return 0;
  if (s == EAA_ERR_GRADCHECK) return 1;
  return report(s, "running gradient checks");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"three-branch segmentation autoencoder toolkit"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate synthetic labelled volumes");
  std::uint64_t gen_seed = 0;
  std::uint32_t gen_volumes = 12, gen_slices = 12, gen_size = 32;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "base seed; volume i uses seed+i");
  gen->add_option("--volumes", gen_volumes, "number of volumes")->check(CLI::PositiveNumber);
  gen->add_option("--slices", gen_slices, "slices per volume, at least 3")
      ->check(CLI::PositiveNumber);
  gen->add_option("--size", gen_size, "plane height and width, at least 16")
      ->check(CLI::PositiveNumber);
  gen->add_option("--out-dir", gen_out, "destination directory")->required();

  auto* train = app.add_subcommand("train", "train a model on a directory of volumes");
  TrainFlags tf;
  train->add_option("--config", tf.config, "key=value config file");
  train->add_option("--data-dir", tf.data_dir, "directory of .eaav volumes")->required();
  train->add_option("--out-dir", tf.out_dir, "where checkpoints and log.csv land")
      ->required();
  auto* opt_seed = train->add_option("--seed", tf.seed, "init and shuffle seed");
  auto* opt_epochs = train->add_option("--epochs", tf.epochs, "epochs to run");
  auto* opt_lr = train->add_option("--lr", tf.lr, "initial learning rate");
  auto* opt_batch = train->add_option("--batch-size", tf.batch_size, "triplets per batch");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a directory of volumes");
  std::string eval_ckpt, eval_data, eval_csv;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data-dir", eval_data, "directory of .eaav volumes")->required();
  eval->add_option("--csv-out", eval_csv, "write per-volume metrics CSV here");

  auto* predict = app.add_subcommand("predict", "write the predicted mask for one volume");
  std::string pred_ckpt, pred_vol, pred_out;
  predict->add_option("--checkpoint", pred_ckpt, "checkpoint file")->required();
  predict->add_option("--volume", pred_vol, "input .eaav volume")->required();
  predict->add_option("--mask-out", pred_out, "output .eaav mask volume")->required();

  auto* grad = app.add_subcommand("gradcheck", "run the finite-difference suite");
  std::uint64_t grad_seed = 0;
  grad->add_option("--seed", grad_seed, "seed for the random probes");

  CLI11_PARSE(app, argc, argv);

  if (app.got_subcommand(gen))
    return run_gen_data(gen_seed, gen_volumes, gen_slices, gen_size, gen_out);
  if (app.got_subcommand(train)) {
    tf.seed_set = opt_seed->count() > 0;
    tf.epochs_set = opt_epochs->count() > 0;
    tf.lr_set = opt_lr->count() > 0;
    tf.batch_set = opt_batch->count() > 0;
    return run_train(tf);
  }
  if (app.got_subcommand(eval)) return run_eval(eval_ckpt, eval_data, eval_csv);
  if (app.got_subcommand(predict)) return run_predict(pred_ckpt, pred_vol, pred_out);
  if (app.got_subcommand(grad)) return run_gradcheck(grad_seed);
  return 2;
}
