// Go/no-go gate for the finished library: eight properties, one verdict line
// each. Every number in here (seed, tolerance, budget) is frozen; a run
// either reproduces them or the build is wrong. Oracles are local to this
// file on purpose: they share no code with the library under test.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "eaa/checkpoint.hpp"
#include "eaa/common.hpp"
#include "eaa/data.hpp"
#include "eaa/eaanet.hpp"
#include "eaa/gradcheck.hpp"
#include "eaa/layers.hpp"
#include "eaa/losses.hpp"
#include "eaa/metrics.hpp"
#include "eaa/tensor.hpp"
#include "eaa/trainer.hpp"

using namespace eaa;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

// ---- criterion 1: gradient integrity -------------------------------------

Verdict check_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradient_checks(123);
  const double dt = elapsed_s(t0);
  double worst = 0.0;
  for (const auto& r : results) worst = std::max(worst, r.max_rel_err);
  const bool ok = all_passed(results) && dt < 120.0;
  return {ok, fmt("%zu checks, worst rel err %.2e, %.1f s (budget 120 s)", results.size(),
                  worst, dt)};
}

// ---- criterion 2: metric oracle equivalence ------------------------------

// Brute-force reference metrics over 16x16 masks, quadratic loops throughout.
struct OracleCounts {
  long long tp = 0, fp = 0, fn = 0, tn = 0;
};

OracleCounts oracle_counts(const std::vector<std::uint8_t>& p,
                           const std::vector<std::uint8_t>& g) {
  OracleCounts c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] && g[i]) ++c.tp;
    else if (p[i] && !g[i]) ++c.fp;
    else if (!p[i] && g[i]) ++c.fn;
    else ++c.tn;
  }
  return c;
}

std::vector<std::pair<int, int>> oracle_points(const std::vector<std::uint8_t>& m,
                                               int h, int w) {
  std::vector<std::pair<int, int>> pts;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (m[std::size_t(r) * w + c]) pts.emplace_back(r, c);
  return pts;
}

std::vector<double> oracle_nearest(const std::vector<std::pair<int, int>>& from,
                                   const std::vector<std::pair<int, int>>& to) {
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& a : from) {
    long long best = std::numeric_limits<long long>::max();
    for (const auto& b : to) {
      const long long dr = a.first - b.first, dc = a.second - b.second;
      best = std::min(best, dr * dr + dc * dc);
    }
    d.push_back(std::sqrt(double(best)));
  }
  return d;
}

double oracle_hd(const std::vector<double>& ab, const std::vector<double>& ba) {
  double m = 0.0;
  for (double d : ab) m = std::max(m, d);
  for (double d : ba) m = std::max(m, d);
  return m;
}

double oracle_hd95(std::vector<double> pool) {
  std::sort(pool.begin(), pool.end());
  const double pos = 0.95 * double(pool.size() - 1);
  const std::size_t lo = std::size_t(pos);
  if (lo + 1 >= pool.size()) return pool.back();
  const double frac = pos - double(lo);
  return pool[lo] * (1.0 - frac) + pool[lo + 1] * frac;
}

Verdict check_metric_oracles() {
  SplitMix64 rng(0x0e7ac1e5u);
  const int h = 16, w = 16;
  double worst_dist = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::uint8_t> p(h * w, 0), g(h * w, 0);
    if (trial != 0) {  // trial 0 keeps both masks empty
      const double dp = trial == 1 ? 0.0 : rng.uniform(0.05, 0.6);
      const double dg = trial == 2 ? 0.0 : rng.uniform(0.05, 0.6);
      for (auto& b : p) b = rng.next_double() < dp ? 1 : 0;
      for (auto& b : g) b = rng.next_double() < dg ? 1 : 0;
      if (trial == 3) g = p;  // identical masks
    }

    const BinaryMask mp = BinaryMask::plane(h, w, p);
    const BinaryMask mg = BinaryMask::plane(h, w, g);
    const MetricsReport rep = evaluate_masks(mp, mg);

    const OracleCounts c = oracle_counts(p, g);
    const double denom_dsc = double(c.fp + 2 * c.tp + c.fn);
    const double dsc = denom_dsc == 0.0 ? 1.0 : 2.0 * double(c.tp) / denom_dsc;
    const double sens = c.tp + c.fn == 0 ? 1.0 : double(c.tp) / double(c.tp + c.fn);
    const double spec = c.tn + c.fp == 0 ? 1.0 : double(c.tn) / double(c.tn + c.fp);
    const double M = double(c.tp + c.fn), W = double(c.tp + c.fp);
    const double vs = M + W == 0.0 ? 0.0 : (2.0 * M - W) / (M + W);

    if (rep.dsc != dsc) return {false, fmt("trial %d: dsc %.17g vs oracle %.17g", trial, rep.dsc, dsc)};
    if (rep.sensitivity != sens)
      return {false, fmt("trial %d: sensitivity mismatch", trial)};
    if (rep.specificity != spec)
      return {false, fmt("trial %d: specificity mismatch", trial)};
    if (rep.volume_similarity != vs)
      return {false, fmt("trial %d: volume similarity mismatch", trial)};

    const auto pp = oracle_points(p, h, w), pg = oracle_points(g, h, w);
    const bool both = !pp.empty() && !pg.empty();
    if (rep.has_hd != both)
      return {false, fmt("trial %d: has_hd %d vs oracle %d", trial, int(rep.has_hd), int(both))};
    if (both) {
      const auto dab = oracle_nearest(pp, pg), dba = oracle_nearest(pg, pp);
      auto pool = dab;
      pool.insert(pool.end(), dba.begin(), dba.end());
      const double ehd = oracle_hd(dab, dba), ehd95 = oracle_hd95(pool);
      const double err = std::max(std::fabs(rep.hd - ehd), std::fabs(rep.hd95 - ehd95));
      worst_dist = std::max(worst_dist, err);
      if (err > 1e-9)
        return {false, fmt("trial %d: distance error %.3e exceeds 1e-9", trial, err)};
    }
  }
  return {true, fmt("200 mask pairs, counts exact, worst distance error %.2e", worst_dist)};
}

// ---- criterion 3: architecture dataflow ----------------------------------

Verdict check_dataflow() {
  SplitMix64 rng(0xa11c0de5u);
  for (int trial = 0; trial < 20; ++trial) {
    NetworkConfig cfg;
    cfg.depth = 1 + rng.index(3);
    cfg.base_channels = 1 + rng.index(6);
    cfg.recon_fraction = 0.25 * double(1 + rng.index(4));
    cfg.num_classes = 2 + rng.index(2);
    cfg.se_reduction = 1 + rng.index(2);
    const std::size_t step = std::size_t(1) << cfg.depth;
    cfg.height = step * (1 + rng.index(2));
    cfg.width = step * (1 + rng.index(2));
    try {
      cfg.validate();
    } catch (const ConfigError&) {
      cfg.se_reduction = 1;  // the sampled reduction did not divide a ladder rung
    }

    EAANet net(cfg, rng.next_u64());
    // batch of 2: train-mode batchnorm needs more than one value per channel
    // even on a 1x1 bottleneck plane
    const std::size_t n = 2;
    Tensor xp = Tensor::rand_uniform({n, 1, cfg.height, cfg.width}, 0.0, 1.0, rng, true);
    Tensor xc = Tensor::rand_uniform({n, 1, cfg.height, cfg.width}, 0.0, 1.0, rng, true);
    Tensor xn = Tensor::rand_uniform({n, 1, cfg.height, cfg.width}, 0.0, 1.0, rng, true);
    EAAOutputs out = net.forward(xp, xc, xn, Mode::train);

    const Shape seg{n, cfg.num_classes, cfg.height, cfg.width};
    const Shape rec{n, 1, cfg.height, cfg.width};
    if (out.seg_basic.shape() != seg || out.seg_complete.shape() != seg ||
        out.recon.shape() != rec)
      return {false, fmt("trial %d: output shapes off contract", trial)};

    // the plain head must be blind to the neighbour slices
    net.zero_grad();
    reduce_sum_all(out.seg_basic).backward();
    for (double gv : xp.grad_or_zero())
      if (gv != 0.0) return {false, fmt("trial %d: plain head sees x_prev", trial)};
    for (double gv : xn.grad_or_zero())
      if (gv != 0.0) return {false, fmt("trial %d: plain head sees x_next", trial)};

    // the fusion gate shifts each element by strictly (0,1)
    const std::size_t seg_c = 1 + rng.index(6), rec_c = 1 + rng.index(4);
    FusionSite site;
    site.match = make_conv(seg_c, rec_c, 1, 1, 0, rng);
    site.bn = make_batchnorm(seg_c);
    site.weight = make_conv(seg_c, seg_c, 1, 1, 0, rng);
    Tensor sf = Tensor::rand_uniform({2, seg_c, 4, 4}, -2.0, 2.0, rng);
    Tensor rf = Tensor::rand_uniform({2, rec_c, 4, 4}, -2.0, 2.0, rng);
    Tensor fused = i2_fusion(sf, rf, site, Mode::train);
    for (std::size_t i = 0; i < fused.size(); ++i) {
      const double delta = fused.data()[i] - sf.data()[i];
      if (!(delta > 0.0 && delta < 1.0))
        return {false, fmt("trial %d: fusion residual %.3g outside (0,1)", trial, delta)};
    }
  }
  return {true, "20 random configs: shapes, neighbour blindness, bounded fusion"};
}

// ---- criterion 4: loss identities ----------------------------------------

Verdict check_loss_identities() {
  for (std::size_t k : {std::size_t(2), std::size_t(3), std::size_t(5)}) {
    Tensor scores = Tensor::full({2, k, 3, 3}, 0.7);
    std::vector<double> t(2 * k * 9, 0.0);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t p = 0; p < 9; ++p) t[(b * k + p % k) * 9 + p] = 1.0;
    Tensor target = Tensor::create({2, k, 3, 3}, t);
    const double ce = cross_entropy(scores, target).value();
    if (std::fabs(ce - std::log(double(k))) > 1e-12)
      return {false, fmt("uniform CE for K=%zu is %.17g, want ln K", k, ce)};
  }

  {
    SplitMix64 rng(4);
    std::vector<double> t(2 * 2 * 16, 0.0);
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t p = 0; p < 16; ++p) t[(b * 2 + rng.index(2)) * 16 + p] = 1.0;
    Tensor target = Tensor::create({2, 2, 4, 4}, t);
    std::vector<double> s(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) s[i] = t[i] * 40.0 - 20.0;
    Tensor scores = Tensor::create({2, 2, 4, 4}, std::move(s));
    const double dice = dice_loss(scores, target).value();
    if (!(dice < 1e-5))
      return {false, fmt("dice on a perfect prediction is %.3e, want < 1e-5", dice)};
  }

  SplitMix64 rng(5);
  Tensor recon = Tensor::rand_uniform({2, 1, 4, 4}, 0.1, 0.9, rng);
  Tensor sb = Tensor::rand_uniform({2, 2, 4, 4}, -2.0, 2.0, rng);
  Tensor sc = Tensor::rand_uniform({2, 2, 4, 4}, -2.0, 2.0, rng);
  Tensor xc = Tensor::rand_uniform({2, 1, 4, 4}, 0.1, 0.9, rng);
  std::vector<double> t(2 * 2 * 16, 0.0);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t p = 0; p < 16; ++p) t[(b * 2 + rng.index(2)) * 16 + p] = 1.0;
  Tensor target = Tensor::create({2, 2, 4, 4}, std::move(t));
  const LossBundle bundle = total_loss(recon, sb, sc, xc, target);
  const double parts = bundle.recon_l1.value() + bundle.recon_l2.value() +
                       bundle.seg_basic.value() + bundle.seg_complete.value();
  if (std::fabs(bundle.total.value() - parts) > 1e-12)
    return {false, fmt("bundle total %.17g vs sum of terms %.17g", bundle.total.value(), parts)};

  return {true, "uniform CE = ln K (K=2,3,5), perfect dice < 1e-5, total = sum of terms"};
}

// ---- criterion 5: convergence --------------------------------------------

Verdict check_convergence() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Volume> vols = {gen_synthetic_volume(7, 12, 32, 32),
                                    gen_synthetic_volume(8, 12, 32, 32)};
  NetworkConfig cfg;  // stock architecture
  EAANet net(cfg, 7);
  TrainConfig tc;
  tc.epochs = 60;
  tc.lr0 = 1e-3;  // the default 1e-4 undertrains inside this epoch budget
  tc.batch_size = 4;
  tc.seed = 7;
  const auto logs = train(net, vols, tc);
  const double dt = elapsed_s(t0);
  const double ratio = logs.back().total / logs.front().total;
  const double dsc = logs.back().train_dsc;
  const bool ok = dsc > 0.90 && ratio <= 0.2 && dt < 900.0;
  return {ok, fmt("train dsc %.4f (need > 0.90), loss ratio %.4f (need <= 0.2), %.0f s "
                  "(budget 900 s)",
                  dsc, ratio, dt)};
}

// ---- criterion 6: multi-task benefit -------------------------------------

double mean_hd95_over(EAANet& net, const std::vector<Volume>& test, Head head) {
  double sum = 0.0;
  for (const auto& v : test) {
    const EvalResult r = evaluate(net, {v}, head);
    sum += r.aggregate.has_hd ? r.aggregate.hd95 : std::numeric_limits<double>::infinity();
  }
  return sum / double(test.size());
}

Verdict check_multitask_benefit() {
  std::vector<double> complete_means, basic_means;
  for (std::uint64_t seed = 101; seed <= 105; ++seed) {
    std::vector<Volume> train_v, test_v;
    for (std::uint64_t i = 0; i < 12; ++i) {
      Volume v = gen_synthetic_volume(seed * 1000 + i, 12, 32, 32);
      (i < 8 ? train_v : test_v).push_back(std::move(v));
    }
    NetworkConfig cfg;
    EAANet net(cfg, seed);
    TrainConfig tc;  // stock training recipe
    tc.seed = seed;
    train(net, train_v, tc);
    complete_means.push_back(mean_hd95_over(net, test_v, Head::complete));
    basic_means.push_back(mean_hd95_over(net, test_v, Head::basic));
  }
  std::sort(complete_means.begin(), complete_means.end());
  std::sort(basic_means.begin(), basic_means.end());
  const double mc = complete_means[2], mb = basic_means[2];
  return {mc <= mb, fmt("median held-out hd95: fused %.4f vs plain %.4f over 5 seeds", mc, mb)};
}

// ---- criterion 7: determinism and serialization --------------------------

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

Verdict check_determinism() {
  const fs::path dir = fs::temp_directory_path() / "eaa_acceptance_7";
  fs::create_directories(dir);
  struct Cleanup {
    fs::path d;
    ~Cleanup() { fs::remove_all(d); }
  } cleanup{dir};

  NetworkConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 2;
  cfg.se_reduction = 1;
  cfg.height = cfg.width = 16;
  const std::vector<Volume> vols = {gen_synthetic_volume(5, 4, 16, 16),
                                    gen_synthetic_volume(6, 4, 16, 16)};
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 3;
  tc.lr0 = 1e-3;
  tc.seed = 3;

  EAANet a(cfg, 9), b(cfg, 9);
  const auto la = train(a, vols, tc);
  const auto lb = train(b, vols, tc);
  for (std::size_t i = 0; i < la.size(); ++i) {
    const bool same = la[i].lr == lb[i].lr && la[i].recon_l1 == lb[i].recon_l1 &&
                      la[i].recon_l2 == lb[i].recon_l2 &&
                      la[i].seg_basic == lb[i].seg_basic &&
                      la[i].seg_complete == lb[i].seg_complete &&
                      la[i].total == lb[i].total && la[i].train_dsc == lb[i].train_dsc;
    if (!same) return {false, fmt("twin runs diverge at epoch %zu", i)};
  }
  save_checkpoint(a, (dir / "a.eaac").string());
  save_checkpoint(b, (dir / "b.eaac").string());
  if (slurp(dir / "a.eaac") != slurp(dir / "b.eaac"))
    return {false, "twin checkpoints differ on disk"};

  // volume round trip is bit-exact
  const Volume v = gen_synthetic_volume(12, 4, 16, 16);
  save_volume(v, (dir / "v1.eaav").string());
  const Volume r = load_volume((dir / "v1.eaav").string());
  save_volume(r, (dir / "v2.eaav").string());
  if (slurp(dir / "v1.eaav") != slurp(dir / "v2.eaav"))
    return {false, "volume round trip changed bytes"};
  if (r.image != v.image || r.labels != v.labels) return {false, "volume round trip changed data"};

  // damage of each kind is rejected with the matching error
  const auto volume_bytes = slurp(dir / "v1.eaav");
  const auto ckpt_bytes = slurp(dir / "a.eaac");
  const auto expect = [&dir](const std::vector<std::uint8_t>& bytes, const char* kind,
                             int which) -> std::string {
    const fs::path p = dir / "damaged.bin";
    auto mutated = bytes;
    if (which == 0) mutated[0] ^= 0xFF;                       // magic
    if (which == 1) mutated.resize(mutated.size() - 9);       // truncation
    if (which == 2) mutated[mutated.size() / 2] ^= 0x10;      // content flip
    spit(p, mutated);
    const bool is_volume = kind[0] == 'v';
    try {
      if (is_volume)
        load_volume(p.string());
      else
        load_checkpoint(p.string());
      return fmt("%s damage %d was accepted", kind, which);
    } catch (const BadMagicError&) {
      if (which != 0) return fmt("%s damage %d misreported as bad magic", kind, which);
    } catch (const TruncatedFileError&) {
      if (which != 1) return fmt("%s damage %d misreported as truncation", kind, which);
    } catch (const ChecksumError&) {
      if (which != 2) return fmt("%s damage %d misreported as checksum", kind, which);
    }
    return "";
  };
  for (int which = 0; which < 3; ++which) {
    if (std::string e = expect(volume_bytes, "volume", which); !e.empty()) return {false, e};
    if (std::string e = expect(ckpt_bytes, "checkpoint", which); !e.empty()) return {false, e};
  }

  return {true, "twin runs bit-identical, round trips exact, all damage classified"};
}

// ---- criterion 8: learning rate schedule ---------------------------------

Verdict check_lr_schedule() {
  const double a0 = lr_schedule(1e-4, 0, 50);
  const double a25 = lr_schedule(1e-4, 25, 50);
  const double a50 = lr_schedule(1e-4, 50, 50);
  const double want25 = 1e-4 * std::pow(0.5, 0.9);
  const bool ok = a0 == 1e-4 && std::fabs(a25 - want25) <= 1e-12 && a50 == 0.0;
  return {ok, fmt("a(0)=%.17g a(25)=%.17g a(50)=%.17g", a0, a25, a50)};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Verdict()>> criteria[] = {
      {"gradient integrity", check_gradients},
      {"metric oracles", check_metric_oracles},
      {"architecture dataflow", check_dataflow},
      {"loss identities", check_loss_identities},
      {"convergence", check_convergence},
      {"multi-task benefit", check_multitask_benefit},
      {"determinism and serialization", check_determinism},
      {"learning rate schedule", check_lr_schedule},
  };

  int failures = 0;
  int index = 0;
  for (const auto& [title, run] : criteria) {
    ++index;
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v = {false, fmt("threw: %s", e.what())};
    }
    std::printf("%s  %d. %-30s %s\n", v.pass ? "PASS" : "FAIL", index, title,
                v.detail.c_str());
    std::fflush(stdout);
    if (!v.pass) ++failures;
  }
  std::printf("acceptance: %d/8 criteria passed\n", 8 - failures);
  return failures == 0 ? 0 : 1;
}
