#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "eaa/common.hpp"
#include "eaa/data.hpp"
#include "eaa/eaanet.hpp"
#include "eaa/metrics.hpp"

namespace eaa {

// Adam moments per parameter, in registration order.
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t t = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

AdamState make_adam(const EAANet& model);

// One bias-corrected update from the gradients currently on the parameters.
// A parameter the loss never touched sees gradient zero.
void adam_step(EAANet& model, AdamState& st, double lr);

// Polynomial decay lr0 * (1 - epoch/total)^0.9 with epoch counted from 0;
// exactly lr0 at epoch 0 and exactly 0 at epoch == total.
double lr_schedule(double lr0, std::size_t epoch, std::size_t total_epochs);

struct TrainConfig {
  std::size_t epochs = 60;
  double lr0 = 1e-4;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // 0: write only the final checkpoint
  std::string out_dir;               // empty: write no checkpoints at all
  std::size_t start_epoch = 0;       // resume point; epochs run [start_epoch, epochs)
};

// Loss columns follow the bundle order: the two reconstruction terms, then
// the plain and the fused segmentation terms.
struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double recon_l1 = 0.0;
  double recon_l2 = 0.0;
  double seg_basic = 0.0;
  double seg_complete = 0.0;
  double total = 0.0;
  double train_dsc = 0.0;  // pooled over the epoch's training batches, fused head
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Trains the model in place. Volumes are cut into neighbour triplets,
// reshuffled every epoch with seed cfg.seed + epoch, and consumed in
// batches. Pass `opt` to continue from saved optimizer moments (it is
// updated in place); otherwise a fresh state is used. Throws NumericError
// the moment any loss term stops being finite.
std::vector<EpochLog> train(EAANet& model, const std::vector<Volume>& volumes,
                            const TrainConfig& cfg, AdamState* opt = nullptr,
                            const EpochCallback& on_epoch = nullptr);

// Header epoch,lr,loss_a,loss_s,loss_b,loss_c,total,train_dsc. Doubles are
// printed with %.17g so identical runs produce identical files.
void write_train_csv(std::ostream& os, const std::vector<EpochLog>& logs);

enum class Head { complete, basic };

// Eval-mode predictions for the interior slices of one volume, stacked into
// a (slices-2, height, width) mask.
BinaryMask predict_volume(EAANet& model, const Volume& v, Head head);

struct EvalResult {
  std::vector<MetricsReport> per_volume;
  MetricsReport aggregate;
};

EvalResult evaluate(EAANet& model, const std::vector<Volume>& volumes, Head head);

// Everything needed to reproduce or continue a run: architecture scalars,
// parameters, running stats, optionally optimizer moments, and the epoch to
// resume from.
void save_checkpoint(const EAANet& model, const std::string& path,
                     const AdamState* opt = nullptr, std::size_t next_epoch = 0);

struct LoadedState {
  EAANet model;
  std::optional<AdamState> opt;
  std::size_t next_epoch = 0;
};

LoadedState load_checkpoint(const std::string& path);

}  // namespace eaa
