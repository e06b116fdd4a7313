#include "eaa/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <ostream>
#include <unordered_map>

#include "eaa/checkpoint.hpp"
#include "eaa/losses.hpp"

namespace eaa {

namespace {

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void require_finite(double v, const char* term, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(v))
    throw NumericError(std::string("train: ") + term + " became non-finite at epoch " +
                       std::to_string(epoch) + ", batch " + std::to_string(batch));
}

void check_binary_model(const EAANet& model, const char* who) {
  if (model.config().num_classes != 2)
    throw ConfigError(std::string(who) + ": volume labels are binary, the model has " +
                      std::to_string(model.config().num_classes) + " classes");
}

void check_volume_fits(const EAANet& model, const Volume& v, const char* who) {
  if (v.height != model.config().height || v.width != model.config().width)
    throw ShapeError(std::string(who) + ": volume planes are " + std::to_string(v.height) +
                     "x" + std::to_string(v.width) + ", the model expects " +
                     std::to_string(model.config().height) + "x" +
                     std::to_string(model.config().width));
}

double to_scalar(const CheckpointRecord& r) {
  if (r.data.size() != 1)
    throw ValueError("load_checkpoint: " + r.name + " is not a scalar");
  return r.data[0];
}

std::size_t to_count(const CheckpointRecord& r) {
  const double d = to_scalar(r);
  const double rounded = std::round(d);
  if (d < 0.0 || rounded != d)
    throw ValueError("load_checkpoint: " + r.name + " is not a whole number");
  return std::size_t(rounded);
}

}  // namespace

AdamState make_adam(const EAANet& model) {
  AdamState st;
  for (const auto& [name, t] : model.parameters()) {
    st.m.emplace_back(t.size(), 0.0);
    st.v.emplace_back(t.size(), 0.0);
  }
  return st;
}

void adam_step(EAANet& model, AdamState& st, double lr) {
  auto params = model.parameters();
  if (st.m.size() != params.size() || st.v.size() != params.size())
    throw ValueError("adam_step: optimizer state does not match the model");

  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].second;
    const std::vector<double> g = p.grad_or_zero();
    std::vector<double>& m = st.m[i];
    std::vector<double>& v = st.v[i];
    if (m.size() != g.size())
      throw ValueError("adam_step: moment size mismatch for " + params[i].first);
    std::vector<double>& w = p.mutable_data();
    for (std::size_t k = 0; k < g.size(); ++k) {
      m[k] = st.beta1 * m[k] + (1.0 - st.beta1) * g[k];
      v[k] = st.beta2 * v[k] + (1.0 - st.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      w[k] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

double lr_schedule(double lr0, std::size_t epoch, std::size_t total_epochs) {
  if (total_epochs == 0) throw ValueError("lr_schedule: total epoch count must be positive");
  if (epoch > total_epochs)
    throw ValueError("lr_schedule: epoch " + std::to_string(epoch) +
                     " is beyond the schedule end " + std::to_string(total_epochs));
  return lr0 * std::pow(1.0 - double(epoch) / double(total_epochs), 0.9);
}

std::vector<EpochLog> train(EAANet& model, const std::vector<Volume>& volumes,
                            const TrainConfig& cfg, AdamState* opt,
                            const EpochCallback& on_epoch) {
  if (volumes.empty()) throw ValueError("train: no volumes");
  if (cfg.batch_size == 0) throw ValueError("train: batch size must be positive");
  if (cfg.epochs == 0) throw ValueError("train: epoch count must be positive");
  if (cfg.start_epoch > cfg.epochs)
    throw ValueError("train: start epoch is beyond the end of the schedule");
  check_binary_model(model, "train");

  std::vector<SliceTriplet> triplets;
  for (const auto& v : volumes) {
    check_volume_fits(model, v, "train");
    auto t = make_triplets(v);
    triplets.insert(triplets.end(), std::make_move_iterator(t.begin()),
                    std::make_move_iterator(t.end()));
  }

  AdamState own;
  if (!opt) {
    own = make_adam(model);
    opt = &own;
  }

  const std::size_t plane = model.config().height * model.config().width;
  if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

  std::vector<EpochLog> logs;
  for (std::size_t epoch = cfg.start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(cfg.lr0, epoch, cfg.epochs);
    const auto batches = batch_iter(triplets, cfg.batch_size, cfg.seed + epoch);

    double sum_l1 = 0.0, sum_l2 = 0.0, sum_sb = 0.0, sum_sc = 0.0, sum_total = 0.0;
    std::size_t examples = 0;
    ConfusionCounts pooled;

    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const Batch& b = batches[bi];
      const std::size_t n = b.indices.size();

      model.zero_grad();
      EAAOutputs out = model.forward(b.x_prev, b.x_curr, b.x_next, Mode::train);
      LossBundle bundle = total_loss(out.recon, out.seg_basic, out.seg_complete, b.x_curr,
                                     b.label);
      require_finite(bundle.recon_l1.value(), "the reconstruction L1 term", epoch, bi);
      require_finite(bundle.recon_l2.value(), "the reconstruction L2 term", epoch, bi);
      require_finite(bundle.seg_basic.value(), "the plain segmentation term", epoch, bi);
      require_finite(bundle.seg_complete.value(), "the fused segmentation term", epoch, bi);
      require_finite(bundle.total.value(), "the total loss", epoch, bi);

      bundle.total.backward();
      adam_step(model, *opt, lr);

      sum_l1 += bundle.recon_l1.value() * double(n);
      sum_l2 += bundle.recon_l2.value() * double(n);
      sum_sb += bundle.seg_basic.value() * double(n);
      sum_sc += bundle.seg_complete.value() * double(n);
      sum_total += bundle.total.value() * double(n);
      examples += n;

      const std::vector<std::uint8_t> pred = argmax_channel(out.seg_complete);
      const std::vector<double>& lab = b.label.data();
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t p = 0; p < plane; ++p) {
          const bool pr = pred[k * plane + p] != 0;
          const bool gt = lab[(k * 2 + 1) * plane + p] != 0.0;
          if (pr && gt)
            ++pooled.tp;
          else if (pr)
            ++pooled.fp;
          else if (gt)
            ++pooled.fn;
          else
            ++pooled.tn;
        }
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.lr = lr;
    log.recon_l1 = sum_l1 / double(examples);
    log.recon_l2 = sum_l2 / double(examples);
    log.seg_basic = sum_sb / double(examples);
    log.seg_complete = sum_sc / double(examples);
    log.total = sum_total / double(examples);
    log.train_dsc = dsc(pooled);
    logs.push_back(log);
    if (on_epoch) on_epoch(log);

    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 &&
        (epoch + 1) % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "epoch_%04zu.eaac", epoch + 1);
      save_checkpoint(model, cfg.out_dir + "/" + name, opt, epoch + 1);
    }
  }

  if (!cfg.out_dir.empty())
    save_checkpoint(model, cfg.out_dir + "/final.eaac", opt, cfg.epochs);
  return logs;
}

void write_train_csv(std::ostream& os, const std::vector<EpochLog>& logs) {
  os << "epoch,lr,loss_a,loss_s,loss_b,loss_c,total,train_dsc\n";
  for (const auto& l : logs) {
    os << l.epoch << ',' << fmt_double(l.lr) << ',' << fmt_double(l.recon_l1) << ','
       << fmt_double(l.recon_l2) << ',' << fmt_double(l.seg_basic) << ','
       << fmt_double(l.seg_complete) << ',' << fmt_double(l.total) << ','
       << fmt_double(l.train_dsc) << '\n';
  }
}

BinaryMask predict_volume(EAANet& model, const Volume& v, Head head) {
  check_binary_model(model, "predict_volume");
  check_volume_fits(model, v, "predict_volume");
  const auto triplets = make_triplets(v);
  const std::size_t plane = v.plane();

  std::vector<std::uint8_t> stacked;
  stacked.reserve(triplets.size() * plane);
  for (const auto& t : triplets) {
    Tensor xp = Tensor::create({1, 1, v.height, v.width}, t.prev);
    Tensor xc = Tensor::create({1, 1, v.height, v.width}, t.curr);
    Tensor xn = Tensor::create({1, 1, v.height, v.width}, t.next);
    EAAOutputs out = model.forward(xp, xc, xn, Mode::eval);
    const Tensor& scores = head == Head::complete ? out.seg_complete : out.seg_basic;
    const std::vector<std::uint8_t> pred = argmax_channel(scores);
    stacked.insert(stacked.end(), pred.begin(), pred.end());
  }
  return BinaryMask::volume(triplets.size(), v.height, v.width, std::move(stacked));
}

EvalResult evaluate(EAANet& model, const std::vector<Volume>& volumes, Head head) {
  if (volumes.empty()) throw ValueError("evaluate: no volumes");
  EvalResult res;
  for (const auto& v : volumes) {
    const BinaryMask pred = predict_volume(model, v, head);
    const std::size_t plane = v.plane();
    std::vector<std::uint8_t> gt(v.labels.begin() + std::ptrdiff_t(plane),
                                 v.labels.begin() + std::ptrdiff_t((v.slices - 1) * plane));
    res.per_volume.push_back(
        evaluate_masks(pred, BinaryMask::volume(v.slices - 2, v.height, v.width,
                                                std::move(gt))));
  }
  res.aggregate = aggregate_metrics(res.per_volume);
  return res;
}

void save_checkpoint(const EAANet& model, const std::string& path, const AdamState* opt,
                     std::size_t next_epoch) {
  std::vector<CheckpointRecord> recs;
  auto scalar = [&](const std::string& name, double v) {
    recs.push_back({name, {1}, {v}});
  };
  const NetworkConfig& c = model.config();
  scalar("config/depth", double(c.depth));
  scalar("config/base_channels", double(c.base_channels));
  scalar("config/recon_fraction", c.recon_fraction);
  scalar("config/num_classes", double(c.num_classes));
  scalar("config/se_reduction", double(c.se_reduction));
  scalar("config/height", double(c.height));
  scalar("config/width", double(c.width));

  const auto params = model.parameters();
  for (const auto& [name, t] : params)
    recs.push_back({"param/" + name, t.shape(), t.data()});
  for (const auto& [name, t] : model.buffers())
    recs.push_back({"buffer/" + name, t.shape(), t.data()});

  if (opt) {
    if (opt->m.size() != params.size() || opt->v.size() != params.size())
      throw ValueError("save_checkpoint: optimizer state does not match the model");
    scalar("opt/t", double(opt->t));
    for (std::size_t i = 0; i < params.size(); ++i)
      recs.push_back({"opt/m/" + params[i].first, params[i].second.shape(), opt->m[i]});
    for (std::size_t i = 0; i < params.size(); ++i)
      recs.push_back({"opt/v/" + params[i].first, params[i].second.shape(), opt->v[i]});
  }
  scalar("train/next_epoch", double(next_epoch));
  save_records(recs, path);
}

LoadedState load_checkpoint(const std::string& path) {
  const auto recs = load_records(path);
  std::unordered_map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : recs) {
    if (!by_name.emplace(r.name, &r).second)
      throw ValueError("load_checkpoint: duplicate record " + r.name);
  }
  std::unordered_map<std::string, bool> used;
  auto take = [&](const std::string& name) -> const CheckpointRecord& {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw ValueError("load_checkpoint: " + path + " is missing " + name);
    used[name] = true;
    return *it->second;
  };

  NetworkConfig cfg;
  cfg.depth = to_count(take("config/depth"));
  cfg.base_channels = to_count(take("config/base_channels"));
  cfg.recon_fraction = to_scalar(take("config/recon_fraction"));
  cfg.num_classes = to_count(take("config/num_classes"));
  cfg.se_reduction = to_count(take("config/se_reduction"));
  cfg.height = to_count(take("config/height"));
  cfg.width = to_count(take("config/width"));

  EAANet model(cfg, 0);
  auto fill = [&](const std::string& key, Tensor& t) {
    const CheckpointRecord& r = take(key);
    if (r.shape != t.shape())
      throw ValueError("load_checkpoint: " + key + " has shape " + shape_str(r.shape) +
                       ", the architecture wants " + shape_str(t.shape()));
    t.mutable_data() = r.data;
  };
  auto params = model.parameters();
  for (auto& [name, t] : params) fill("param/" + name, t);
  for (auto& [name, t] : model.buffers()) fill("buffer/" + name, t);

  LoadedState out{std::move(model), std::nullopt, 0};
  if (by_name.count("opt/t")) {
    AdamState st = make_adam(out.model);
    st.t = to_count(take("opt/t"));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const CheckpointRecord& m = take("opt/m/" + params[i].first);
      const CheckpointRecord& v = take("opt/v/" + params[i].first);
      if (m.data.size() != st.m[i].size() || v.data.size() != st.v[i].size())
        throw ValueError("load_checkpoint: optimizer moments do not match " +
                         params[i].first);
      st.m[i] = m.data;
      st.v[i] = v.data;
    }
    out.opt = std::move(st);
  }
  out.next_epoch = to_count(take("train/next_epoch"));

  for (const auto& r : recs)
    if (!used.count(r.name))
      throw ValueError("load_checkpoint: unrecognized record " + r.name);
  return out;
}

}  // namespace eaa
