#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mgrq/quantize.hpp"
#include "mgrq/tensor.hpp"

namespace mgrq {

struct ModelConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 3;
  int embed_dim = 64;
  int heads = 4;
  int blocks = 4;
  int mlp_hidden = 128;
  int classes = 10;
  bool use_pos_embed = true;
  double ln_eps = 1e-6;
  // Bit widths for the transformer blocks.
  int bits_w = 8;
  int bits_a = 8;
  // Patch embedding and classifier head keep their own widths.
  int embed_bits_w = 8;
  int embed_bits_a = 8;
  int head_bits_w = 8;
  int head_bits_a = 8;

  int patch_dim() const { return channels * patch_size * patch_size; }
  int tokens() const {
    int per_side = image_size / patch_size;
    return per_side * per_side;
  }
  int head_dim() const { return embed_dim / heads; }
  void validate() const;
};

enum class RunMode {
  kFullPrecision,
  // fake_quant on every weight and calibrated activation site
  kQuantized,
  // clip-only surrogate at the same sites; smooth gradient reference
  kQuantSurrogate,
};

// One transformer block. Weight layout is [in, out] so activations multiply
// on the left. Quant params are populated by calibration; activation sites
// may be absent (weight-only quantization), weight params must all be present
// before running in a quantized mode.
struct BlockParams {
  int heads = 1;
  double ln_eps = 1e-6;

  Tensor ln1_gamma, ln1_beta;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1, w2, b2;

  std::optional<QuantParams> wq_qp, wk_qp, wv_qp, wo_qp, w1_qp, w2_qp;
  std::optional<QuantParams> act_qkv_in, act_probs, act_proj_in, act_fc1_in,
      act_fc2_in;
};

struct ViTModel {
  ModelConfig config;
  RunMode mode = RunMode::kFullPrecision;

  Tensor embed_w, embed_b;
  Tensor pos_embed;  // defined iff config.use_pos_embed
  std::vector<BlockParams> blocks;
  Tensor head_w, head_b;

  std::optional<QuantParams> embed_w_qp, pos_embed_qp, head_w_qp;
  std::optional<QuantParams> act_embed_in, act_head_in;
};

// Observation hook for activation quantization sites. Receives the value
// about to be (fake-)quantized under its site name.
using SiteTap =
    std::function<void(const std::string& site, const Tensor& value)>;

ViTModel init_model(const ModelConfig& config, uint64_t seed);

// [B, C, H, W] -> [B, T, patch_dim] (or [C, H, W] -> [T, patch_dim]);
// patches are row-major over the grid, each flattened channel-major.
Tensor patchify(const Tensor& images, const ModelConfig& config);

// Linear projection of every patch; no positional term.
Tensor patch_embed(const Tensor& images, const ViTModel& model,
                   const SiteTap& tap = nullptr);

// patch_embed plus the positional embedding when enabled. Output is the
// token sequence the first block consumes.
Tensor embed_tokens(const Tensor& images, const ViTModel& model,
                    const SiteTap& tap = nullptr);

struct BlockResult {
  Tensor out;
  // Outputs of q-proj, k-proj, v-proj, out-proj, fc1, fc2, in that order, as
  // the block computed them in its run mode.
  std::vector<Tensor> layer_outputs;
};

BlockResult block_forward(const Tensor& x, const BlockParams& block,
                          RunMode mode, const SiteTap& tap = nullptr);
Tensor msa_forward(const Tensor& x, const BlockParams& block, RunMode mode);
Tensor mlp_forward(const Tensor& y, const BlockParams& block, RunMode mode);

Tensor head_forward(const Tensor& pooled, const ViTModel& model,
                    const SiteTap& tap = nullptr);

// Full pass: embed, blocks, mean-pool over tokens, head. Returns logits
// [B, classes] (or [classes] for a single image).
Tensor model_forward(const Tensor& images, const ViTModel& model,
                     const SiteTap& tap = nullptr);

// Post-block activations m_1..m_L for a batch.
std::vector<Tensor> block_outputs_trace(const Tensor& images,
                                        const ViTModel& model);

// Min/max per activation site, accumulated over the batches with the model
// run in full precision.
std::map<std::string, std::pair<double, double>> observe_act_ranges(
    const ViTModel& model, std::span<const Tensor> batches);

// Per-channel params on every weight matrix, per-tensor on the positional
// embedding, at the bit widths in the config.
void attach_weight_quant(ViTModel& model);

void attach_act_quant(
    ViTModel& model,
    const std::map<std::string, std::pair<double, double>>& ranges);

// Weight calibration, activation range observation, activation calibration,
// then switches the model to kQuantized. The model must currently be in full
// precision.
void calibrate_model(ViTModel& model, std::span<const Tensor> calib_batches);

}  // namespace mgrq
