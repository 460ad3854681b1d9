#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mgrq/dataset.hpp"
#include "mgrq/reconstruct.hpp"
#include "mgrq/vit.hpp"

namespace mgrq {

struct TrainConfig {
  int epochs = 20;
  double lr = 1e-3;
  int batch = 64;
  uint64_t seed = 1;
};

// Adam on softmax cross entropy over the training split. Throws
// NumericalError if the loss stops being finite.
ViTModel train_toy_fp(const Dataset& train, const ModelConfig& config,
                      const TrainConfig& tc);

// Top-1 accuracy in [0, 1]. Argmax ties resolve to the lowest class index.
double evaluate_top1(const ViTModel& model, const Dataset& ds);

struct AblationConfig {
  int bits_w = 4;
  int bits_a = 4;
  ReconstructionConfig recon;
};

struct AblationRow {
  std::string arm;
  bool use_obwr = false;
  bool use_ebgs = false;
  bool use_ibls = false;
  int bits_w = 0;
  int bits_a = 0;
  double top1 = 0.0;
};

struct AblationReport {
  std::vector<AblationRow> rows;
};

using ArmLogFn =
    std::function<void(const std::string& arm, const LossLogRow& row)>;

// Full-precision reference row plus six arms: calibration-only baseline,
// each loss alone, obwr+ebgs, and the full method. The calibration subset is
// drawn once from `train`; every arm starts from a fresh calibration of fp
// and its own seed (root seed + arm index).
AblationReport run_ablation(const ViTModel& fp, const Dataset& train,
                            const Dataset& test, const AblationConfig& cfg,
                            const ArmLogFn& log = nullptr);

std::string ablation_csv(const AblationReport& report);
void write_ablation_csv(const AblationReport& report, const std::string& path);

}  // namespace mgrq
