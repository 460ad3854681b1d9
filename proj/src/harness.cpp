#include "mgrq/harness.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "mgrq/errors.hpp"
#include "mgrq/rng.hpp"

namespace mgrq {

static std::vector<Tensor*> trainable_params(ViTModel& m) {
  std::vector<Tensor*> p = {&m.embed_w, &m.embed_b};
  if (m.config.use_pos_embed) p.push_back(&m.pos_embed);
  for (BlockParams& b : m.blocks)
    for (Tensor* t : {&b.ln1_gamma, &b.ln1_beta, &b.wq, &b.wk, &b.wv, &b.wo,
                      &b.ln2_gamma, &b.ln2_beta, &b.w1, &b.b1, &b.w2, &b.b2})
      p.push_back(t);
  p.push_back(&m.head_w);
  p.push_back(&m.head_b);
  return p;
}

ViTModel train_toy_fp(const Dataset& train, const ModelConfig& config,
                      const TrainConfig& tc) {
  config.validate();
  train.validate();
  if (tc.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (!(tc.lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (tc.batch < 1) throw std::invalid_argument("batch must be >= 1");
  if (size_t(config.classes) < size_t(train.classes))
    throw std::invalid_argument("model has " +
                                std::to_string(config.classes) +
                                " classes, dataset has " +
                                std::to_string(train.classes));

  ViTModel m = init_model(config, tc.seed);
  std::vector<Tensor*> params = trainable_params(m);
  AdamState adam;
  Rng shuffle_rng(tc.seed + 0x5eed);
  size_t n = train.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (size_t start = 0; start < n; start += size_t(tc.batch)) {
      size_t stop = std::min(n, start + size_t(tc.batch));
      std::span<const size_t> idx(order.data() + start, stop - start);
      Tensor images = to_model_input(train, idx);
      std::vector<int32_t> labels = gather_labels(train, idx);

      Tape tape;
      for (Tensor* p : params) tape.watch(*p);
      Tensor logits = model_forward(images, m);
      Tensor loss = cross_entropy_mean(logits, labels);
      if (!std::isfinite(loss.item()))
        throw NumericalError("training loss diverged at epoch " +
                             std::to_string(epoch) + " (seed " +
                             std::to_string(tc.seed) + ")");
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (Tensor* p : params) grads.push_back(tape.grad(*p));
      adam_step(params, grads, adam, tc.lr);
    }
  }
  return m;
}

double evaluate_top1(const ViTModel& model, const Dataset& ds) {
  ds.validate();
  if (ds.size() == 0) throw std::invalid_argument("empty dataset");
  size_t n = ds.size();
  size_t correct = 0;
  int64_t classes = model.config.classes;
  for (size_t start = 0; start < n; start += 64) {
    size_t stop = std::min(n, start + 64);
    std::vector<size_t> idx(stop - start);
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
    Tensor logits = model_forward(to_model_input(ds, idx), model);
    if (!logits.all_finite())
      throw NumericalError("non-finite logits during evaluation");
    const auto& v = logits.values();
    for (size_t i = 0; i < idx.size(); ++i) {
      const double* row = v.data() + int64_t(i) * classes;
      int64_t best = 0;
      for (int64_t c = 1; c < classes; ++c)
        if (row[c] > row[best]) best = c;
      if (best == int64_t(ds.labels[idx[i]])) ++correct;
    }
  }
  return double(correct) / double(n);
}

AblationReport run_ablation(const ViTModel& fp, const Dataset& train,
                            const Dataset& test, const AblationConfig& cfg,
                            const ArmLogFn& log) {
  if (fp.mode != RunMode::kFullPrecision)
    throw std::invalid_argument("run_ablation expects a full-precision model");
  cfg.recon.validate();

  AblationReport report;
  report.rows.push_back(
      {"fp", false, false, false, 32, 32, evaluate_top1(fp, test)});

  Dataset calib = sample_calibration(train, size_t(cfg.recon.calib_size),
                                     cfg.recon.seed);

  struct Arm {
    const char* name;
    bool obwr, ebgs, ibls;
  };
  const Arm arms[] = {
      {"baseline", false, false, false}, {"obwr", true, false, false},
      {"ebgs", false, true, false},      {"ibls", false, false, true},
      {"obwr_ebgs", true, true, false},  {"mgrq", true, true, true},
  };
  for (size_t i = 0; i < std::size(arms); ++i) {
    const Arm& arm = arms[i];
    ViTModel base = fp;
    base.config.bits_w = cfg.bits_w;
    base.config.bits_a = cfg.bits_a;
    ReconstructionConfig rc = cfg.recon;
    rc.seed = cfg.recon.seed + i + 1;
    rc.use_obwr = arm.obwr;
    rc.use_ebgs = arm.ebgs;
    rc.use_ibls = arm.ibls;
    if (!arm.obwr && !arm.ebgs && !arm.ibls) rc.iterations = 0;
    LossLogFn arm_log;
    if (log)
      arm_log = [&](const LossLogRow& row) { log(arm.name, row); };
    ViTModel q = run_mgrq(base, calib, rc, arm_log);
    report.rows.push_back({arm.name, arm.obwr, arm.ebgs, arm.ibls, cfg.bits_w,
                           cfg.bits_a, evaluate_top1(q, test)});
  }
  return report;
}

std::string ablation_csv(const AblationReport& report) {
  std::string out = "arm,obwr,ebgs,ibls,bits_w,bits_a,top1\n";
  char line[160];
  for (const AblationRow& r : report.rows) {
    std::snprintf(line, sizeof(line), "%s,%d,%d,%d,%d,%d,%.4f\n",
                  r.arm.c_str(), r.use_obwr ? 1 : 0, r.use_ebgs ? 1 : 0,
                  r.use_ibls ? 1 : 0, r.bits_w, r.bits_a, r.top1);
    out += line;
  }
  return out;
}

void write_ablation_csv(const AblationReport& report,
                        const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw DataError(DataErrorKind::kNotFound,
                    "cannot open " + path + " for writing");
  out << ablation_csv(report);
}

}  // namespace mgrq
