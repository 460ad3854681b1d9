#include "mgrq/reconstruct.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mgrq/errors.hpp"
#include "mgrq/rng.hpp"

namespace mgrq {

LossBreakdown fuse_losses(double obwr, double ebgs, double ibls, double alpha,
                          double beta) {
  for (double v : {obwr, ebgs, ibls, alpha, beta})
    if (v < 0.0 || !std::isfinite(v))
      throw std::invalid_argument("loss components and weights must be "
                                  "finite and non-negative");
  LossBreakdown b;
  b.obwr = obwr;
  b.ebgs = ebgs;
  b.ibls = ibls;
  b.alpha = alpha;
  b.beta = beta;
  b.fused = obwr + alpha * ebgs + beta * ibls;
  return b;
}

std::pair<double, double> auto_balance(double obwr0, double ebgs0,
                                       double ibls0) {
  auto clamp = [](double w) { return std::clamp(w, 1e-4, 1e4); };
  double alpha = clamp(obwr0 / std::max(ebgs0, 1e-12));
  double beta = clamp(obwr0 / std::max(ibls0, 1e-12));
  return {alpha, beta};
}

void ReconstructionConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (!(lr > 0.0) || !std::isfinite(lr))
    throw std::invalid_argument("lr must be positive");
  if (batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (calib_size < 1) throw std::invalid_argument("calib_size must be >= 1");
  for (double w : {alpha, beta})
    if (w < 0.0 || !std::isfinite(w))
      throw std::invalid_argument("alpha and beta must be finite and "
                                  "non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) ||
      !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be > 0");
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
               AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  if (params.size() != grads.size())
    throw std::invalid_argument("adam_step: " + std::to_string(params.size()) +
                                " params vs " + std::to_string(grads.size()) +
                                " grads");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(size_t(params[i]->numel()), 0.0);
      state.v[i].assign(size_t(params[i]->numel()), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state tracks a different "
                                "parameter list");
  state.step += 1;
  double c1 = 1.0 - std::pow(beta1, double(state.step));
  double c2 = 1.0 - std::pow(beta2, double(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const auto& g = grads[i].values();
    if (int64_t(g.size()) != p.numel())
      throw std::invalid_argument("adam_step: grad " + std::to_string(i) +
                                  " has " + std::to_string(g.size()) +
                                  " values, param has " +
                                  std::to_string(p.numel()));
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != g.size())
      throw std::invalid_argument("adam_step: state size mismatch at " +
                                  std::to_string(i));
    auto next = std::make_shared<std::vector<double>>(p.values());
    for (size_t j = 0; j < g.size(); ++j) {
      m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
      v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
      double mhat = m[j] / c1;
      double vhat = v[j] / c2;
      (*next)[j] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    p.data = std::move(next);  // fresh buffer, old copies keep the old values
    p.tape = nullptr;
    p.node = -1;
  }
}

static void check_block_index(const ViTModel& fp, const ViTModel& q,
                              int block) {
  if (fp.blocks.size() != q.blocks.size())
    throw std::invalid_argument("models have " +
                                std::to_string(fp.blocks.size()) + " and " +
                                std::to_string(q.blocks.size()) + " blocks");
  if (block < 0 || size_t(block) >= fp.blocks.size())
    throw std::invalid_argument("block " + std::to_string(block) +
                                " out of range");
}

double obwr_loss(const ViTModel& fp, const ViTModel& q, int block,
                 const Tensor& m_prev) {
  check_block_index(fp, q, block);
  Tensor x = m_prev.detached();
  BlockResult rf = block_forward(x, fp.blocks[size_t(block)], fp.mode);
  BlockResult rq = block_forward(x, q.blocks[size_t(block)], q.mode);
  return mse(rf.out, rq.out).item();
}

double ebgs_loss(const ViTModel& fp, const ViTModel& q, const Tensor& images) {
  Tensor x = images.detached();
  Tensor lf = model_forward(x, fp);
  Tensor lq = model_forward(x, q);
  return mse(lf, lq).item();
}

double ibls_loss(std::span<const Tensor> fp_outs,
                 std::span<const Tensor> q_outs) {
  if (fp_outs.empty() || fp_outs.size() != q_outs.size())
    throw std::invalid_argument("ibls_loss: " +
                                std::to_string(fp_outs.size()) + " vs " +
                                std::to_string(q_outs.size()) + " outputs");
  double acc = 0.0;
  for (size_t i = 0; i < fp_outs.size(); ++i)
    acc += mse(fp_outs[i].detached(), q_outs[i].detached()).item();
  return acc / double(fp_outs.size());
}

// New tensor holding rows[idx] of a [N, ...] tensor.
static Tensor gather_rows(const Tensor& t, std::span<const size_t> idx) {
  int64_t n = t.dim(0);
  int64_t row = t.numel() / n;
  std::vector<int64_t> shape = t.shape;
  shape[0] = int64_t(idx.size());
  std::vector<double> out(idx.size() * size_t(row));
  const auto& src = t.values();
  for (size_t i = 0; i < idx.size(); ++i) {
    if (int64_t(idx[i]) >= n)
      throw std::invalid_argument("gather index out of range");
    std::copy_n(src.begin() + int64_t(idx[i]) * row, row,
                out.begin() + int64_t(i) * row);
  }
  return Tensor::from(std::move(shape), std::move(out));
}

void reconstruct_block(int block, const ViTModel& fp, ViTModel& q,
                       const Dataset& calib, const ReconstructionConfig& cfg,
                       const LossLogFn& log) {
  cfg.validate();
  check_block_index(fp, q, block);
  if (fp.mode != RunMode::kFullPrecision)
    throw std::invalid_argument("reference model must run in full precision");
  if (q.mode == RunMode::kFullPrecision)
    throw std::invalid_argument("target model is not quantized");
  if (calib.size() == 0)
    throw std::invalid_argument("empty calibration set");
  if (cfg.iterations == 0) return;
  if (!cfg.use_obwr && !cfg.use_ebgs && !cfg.use_ibls)
    throw std::invalid_argument("no loss components enabled");

  size_t n = calib.size();
  std::vector<size_t> all(n);
  for (size_t i = 0; i < n; ++i) all[i] = i;
  Tensor images_all = to_model_input(calib, all);

  // One full-precision pass caches everything the per-iteration losses
  // compare against: the block's input and output, its six layer outputs,
  // and the final logits.
  Tensor m_prev_all, fp_out_all;
  std::vector<Tensor> fp_louts_all;
  Tensor x = embed_tokens(images_all, fp);
  for (size_t k = 0; k < fp.blocks.size(); ++k) {
    BlockResult r = block_forward(x, fp.blocks[k], fp.mode);
    if (int(k) == block) {
      m_prev_all = x;
      fp_out_all = r.out;
      fp_louts_all = r.layer_outputs;
    }
    x = r.out;
  }
  Tensor fp_logits_all = head_forward(mean_tokens(x), fp);

  BlockParams& target = q.blocks[size_t(block)];
  Tensor* params[] = {&target.wq, &target.wk, &target.wv,
                      &target.wo, &target.w1, &target.w2};
  AdamState adam;
  Rng rng(cfg.seed + 7919ull * uint64_t(block));
  size_t batch = std::min<size_t>(size_t(cfg.batch), n);
  double alpha = cfg.alpha, beta = cfg.beta;

  for (int it = 1; it <= cfg.iterations; ++it) {
    std::vector<size_t> idx = rng.sample_without_replacement(n, batch);
    Tensor m_prev = gather_rows(m_prev_all, idx);

    Tape tape;
    for (Tensor* p : params) tape.watch(*p);

    Tensor obwr_t, ibls_t, ebgs_t;
    double obwr_v = 0.0, ebgs_v = 0.0, ibls_v = 0.0;
    if (cfg.use_obwr || cfg.use_ibls) {
      BlockResult r = block_forward(m_prev, target, q.mode);
      if (cfg.use_obwr) {
        obwr_t = mse(r.out, gather_rows(fp_out_all, idx));
        obwr_v = obwr_t.item();
      }
      if (cfg.use_ibls) {
        Tensor acc;
        for (size_t i = 0; i < r.layer_outputs.size(); ++i) {
          Tensor term = mse(r.layer_outputs[i], gather_rows(fp_louts_all[i], idx));
          acc = i == 0 ? term : add(acc, term);
        }
        ibls_t = scale(acc, 1.0 / double(r.layer_outputs.size()));
        ibls_v = ibls_t.item();
      }
    }
    if (cfg.use_ebgs) {
      // The full forward records on the tape only from this block onward;
      // gradients flow back through the later blocks into its weights.
      Tensor logits = model_forward(gather_rows(images_all, idx), q);
      ebgs_t = mse(logits, gather_rows(fp_logits_all, idx));
      ebgs_v = ebgs_t.item();
    }

    if (it == 1) {
      if (cfg.balance_auto && cfg.use_obwr)
        std::tie(alpha, beta) = auto_balance(obwr_v, ebgs_v, ibls_v);
      else if (cfg.balance_auto)
        alpha = beta = 1.0;
      if (!cfg.use_ebgs) alpha = 0.0;
      if (!cfg.use_ibls) beta = 0.0;
    }

    Tensor fused_t;
    bool have = false;
    auto add_term = [&](const Tensor& t, double w) {
      Tensor term = w == 1.0 ? t : scale(t, w);
      fused_t = have ? add(fused_t, term) : term;
      have = true;
    };
    if (cfg.use_obwr) add_term(obwr_t, 1.0);
    if (cfg.use_ebgs) add_term(ebgs_t, alpha);
    if (cfg.use_ibls) add_term(ibls_t, beta);

    for (double v : {obwr_v, ebgs_v, ibls_v, fused_t.item()})
      if (!std::isfinite(v))
        throw NumericalError("non-finite loss at block " +
                             std::to_string(block) + ", iteration " +
                             std::to_string(it));
    LossBreakdown row = fuse_losses(obwr_v, ebgs_v, ibls_v, alpha, beta);

    tape.backward(fused_t);
    std::vector<Tensor> grads;
    for (Tensor* p : params) grads.push_back(tape.grad(*p));
    adam_step(params, grads, adam, cfg.lr, cfg.adam_beta1, cfg.adam_beta2,
              cfg.adam_eps);

    if (log) log(LossLogRow{block, it, row});
  }
}

ViTModel run_mgrq(const ViTModel& fp, const Dataset& calib,
                  const ReconstructionConfig& cfg, const LossLogFn& log) {
  cfg.validate();
  if (fp.mode != RunMode::kFullPrecision)
    throw std::invalid_argument("run_mgrq expects a full-precision model");
  if (calib.size() == 0)
    throw std::invalid_argument("empty calibration set");

  ViTModel q = fp;
  size_t n = calib.size();
  std::vector<Tensor> batches;
  for (size_t start = 0; start < n; start += size_t(cfg.batch)) {
    size_t stop = std::min(n, start + size_t(cfg.batch));
    std::vector<size_t> idx(stop - start);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    batches.push_back(to_model_input(calib, idx));
  }
  calibrate_model(q, batches);

  for (int l = 0; l < int(q.blocks.size()); ++l)
    reconstruct_block(l, fp, q, calib, cfg, log);
  return q;
}

}  // namespace mgrq
