#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>

#include "mgrq/dataset.hpp"
#include "mgrq/vit.hpp"

namespace mgrq {

struct LossBreakdown {
  double obwr = 0.0;
  double ebgs = 0.0;
  double ibls = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double fused = 0.0;
};

// fused = obwr + alpha * ebgs + beta * ibls. Negative components are
// rejected.
LossBreakdown fuse_losses(double obwr, double ebgs, double ibls, double alpha,
                          double beta);

// Scale weights that bring the three components to a common magnitude at the
// start of a block's reconstruction:
//   alpha = obwr0 / max(ebgs0, 1e-12), beta = obwr0 / max(ibls0, 1e-12)
// both clamped to [1e-4, 1e4].
std::pair<double, double> auto_balance(double obwr0, double ebgs0,
                                       double ibls0);

struct ReconstructionConfig {
  int iterations = 500;
  double lr = 1e-5;
  int batch = 32;
  int calib_size = 256;
  uint64_t seed = 1;

  // With balance_auto set, alpha/beta are measured from the first batch of
  // each block and the fixed values below are ignored.
  bool balance_auto = true;
  double alpha = 1.0;
  double beta = 1.0;

  bool use_obwr = true;
  bool use_ebgs = true;
  bool use_ibls = true;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  int64_t step = 0;
};

// One Adam update with bias correction. params and grads line up one to one;
// each parameter's buffer is replaced, not written through.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
               AdamState& state, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8);

// MSE between the full-precision and quantized outputs of block `block`,
// both fed the same full-precision input m_prev.
double obwr_loss(const ViTModel& fp, const ViTModel& q, int block,
                 const Tensor& m_prev);

// MSE between the two models' logits on the batch.
double ebgs_loss(const ViTModel& fp, const ViTModel& q, const Tensor& images);

// Mean of per-layer output MSEs.
double ibls_loss(std::span<const Tensor> fp_outs,
                 std::span<const Tensor> q_outs);

struct LossLogRow {
  int block = 0;      // zero-based
  int iteration = 0;  // one-based
  LossBreakdown losses;
};
using LossLogFn = std::function<void(const LossLogRow&)>;

// Optimizes block `block`'s six latent weight matrices through fake_quant
// with frozen quant params. Earlier blocks are expected to be reconstructed
// already; nothing outside the block changes. iterations == 0 is a measure
// only pass.
void reconstruct_block(int block, const ViTModel& fp, ViTModel& q,
                       const Dataset& calib, const ReconstructionConfig& cfg,
                       const LossLogFn& log = nullptr);

// Calibrates a quantized copy of fp, then reconstructs every block in order.
ViTModel run_mgrq(const ViTModel& fp, const Dataset& calib,
                  const ReconstructionConfig& cfg,
                  const LossLogFn& log = nullptr);

}  // namespace mgrq
