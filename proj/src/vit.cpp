#include "mgrq/vit.hpp"

#include <cmath>
#include <stdexcept>

#include "mgrq/rng.hpp"

namespace mgrq {

void ModelConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 ||
      heads <= 0 || blocks < 0 || mlp_hidden <= 0 || classes < 2)
    throw std::invalid_argument("model config has a non-positive dimension");
  if (image_size % patch_size != 0)
    throw std::invalid_argument("patch size " + std::to_string(patch_size) +
                                " does not divide image size " +
                                std::to_string(image_size));
  if (embed_dim % heads != 0)
    throw std::invalid_argument("heads " + std::to_string(heads) +
                                " do not divide embed dim " +
                                std::to_string(embed_dim));
  for (int b : {bits_w, bits_a, embed_bits_w, embed_bits_a, head_bits_w,
                head_bits_a})
    if (b < 2 || b > 8)
      throw std::invalid_argument("bit width " + std::to_string(b) +
                                  " outside [2, 8]");
  if (ln_eps <= 0.0)
    throw std::invalid_argument("layer norm eps must be positive");
}

// Same data and tape node under a different shape; sizes must agree.
static Tensor reshape_view(const Tensor& t, std::vector<int64_t> shape) {
  Tensor o = t;
  o.shape = std::move(shape);
  if (o.numel() != t.numel())
    throw std::invalid_argument("reshape from " + shape_str(t.shape) + " to " +
                                shape_str(o.shape) + " changes element count");
  return o;
}

ViTModel init_model(const ModelConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed);
  constexpr double kInitStd = 0.02;
  auto normal = [&rng](std::vector<int64_t> shape, double std_) {
    int64_t n = 1;
    for (auto d : shape) n *= d;
    return Tensor::from(std::move(shape), rng.normal_vector(size_t(n), std_));
  };
  ViTModel m;
  m.config = config;
  m.mode = RunMode::kFullPrecision;
  int pd = config.patch_dim(), d = config.embed_dim;
  m.embed_w = normal({pd, d}, kInitStd);
  m.embed_b = Tensor::zeros({d});
  if (config.use_pos_embed)
    m.pos_embed = normal({config.tokens(), d}, kInitStd);
  for (int l = 0; l < config.blocks; ++l) {
    BlockParams b;
    b.heads = config.heads;
    b.ln_eps = config.ln_eps;
    b.ln1_gamma = Tensor::full({d}, 1.0);
    b.ln1_beta = Tensor::zeros({d});
    b.wq = normal({d, d}, kInitStd);
    b.wk = normal({d, d}, kInitStd);
    b.wv = normal({d, d}, kInitStd);
    b.wo = normal({d, d}, kInitStd);
    b.ln2_gamma = Tensor::full({d}, 1.0);
    b.ln2_beta = Tensor::zeros({d});
    b.w1 = normal({d, config.mlp_hidden}, kInitStd);
    b.b1 = Tensor::zeros({config.mlp_hidden});
    b.w2 = normal({config.mlp_hidden, d}, kInitStd);
    b.b2 = Tensor::zeros({d});
    m.blocks.push_back(std::move(b));
  }
  m.head_w = normal({d, config.classes}, kInitStd);
  m.head_b = Tensor::zeros({config.classes});
  return m;
}

Tensor patchify(const Tensor& images, const ModelConfig& config) {
  if (images.tape)
    throw std::invalid_argument("patchify does not differentiate through images");
  bool batched = images.rank() == 4;
  if (!batched && images.rank() != 3)
    throw std::invalid_argument("patchify: want [B, C, H, W] or [C, H, W], got " +
                                shape_str(images.shape));
  int64_t b = batched ? images.shape[0] : 1;
  size_t off = batched ? 1 : 0;
  if (images.shape[off] != config.channels ||
      images.shape[off + 1] != config.image_size ||
      images.shape[off + 2] != config.image_size)
    throw std::invalid_argument("patchify: image dims " +
                                shape_str(images.shape) +
                                " do not match the config");
  int64_t c = config.channels, hw = config.image_size, p = config.patch_size;
  int64_t grid = hw / p, t = grid * grid, pd = config.patch_dim();
  Tensor out = Tensor::zeros(batched ? std::vector<int64_t>{b, t, pd}
                                     : std::vector<int64_t>{t, pd});
  const auto& iv = images.values();
  auto& ov = out.values();
  for (int64_t s = 0; s < b; ++s)
    for (int64_t pr = 0; pr < grid; ++pr)
      for (int64_t pc = 0; pc < grid; ++pc) {
        int64_t tok = pr * grid + pc;
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t dy = 0; dy < p; ++dy)
            for (int64_t dx = 0; dx < p; ++dx) {
              int64_t src =
                  ((s * c + ch) * hw + pr * p + dy) * hw + pc * p + dx;
              int64_t dst =
                  (s * t + tok) * pd + (ch * p + dy) * p + dx;
              ov[size_t(dst)] = iv[size_t(src)];
            }
      }
  return out;
}

static Tensor run_weight(const Tensor& w, const std::optional<QuantParams>& qp,
                         RunMode mode, const char* name) {
  if (mode == RunMode::kFullPrecision) return w;
  if (!qp)
    throw std::invalid_argument(std::string(name) +
                                ": weight quant params missing");
  return mode == RunMode::kQuantized ? fake_quant(w, *qp)
                                     : fake_quant_surrogate(w, *qp);
}

// Activation sites may be uncalibrated (weight-only quantization); those pass
// through untouched in every mode.
static Tensor run_act(const Tensor& x, const std::optional<QuantParams>& qp,
                      RunMode mode) {
  if (mode == RunMode::kFullPrecision || !qp) return x;
  return mode == RunMode::kQuantized ? fake_quant(x, *qp)
                                     : fake_quant_surrogate(x, *qp);
}

static void fire(const SiteTap& tap, const char* site, const Tensor& v) {
  if (tap) tap(site, v);
}

Tensor patch_embed(const Tensor& images, const ViTModel& model,
                   const SiteTap& tap) {
  Tensor patches = patchify(images, model.config);
  fire(tap, "embed_in", patches);
  Tensor in = run_act(patches, model.act_embed_in, model.mode);
  Tensor w = run_weight(model.embed_w, model.embed_w_qp, model.mode, "embed_w");
  return add_broadcast(matmul(in, w), model.embed_b);
}

Tensor embed_tokens(const Tensor& images, const ViTModel& model,
                    const SiteTap& tap) {
  Tensor x = patch_embed(images, model, tap);
  if (!model.config.use_pos_embed) return x;
  Tensor pos =
      run_weight(model.pos_embed, model.pos_embed_qp, model.mode, "pos_embed");
  if (x.rank() == pos.rank()) return add(x, pos);
  return add_broadcast(x, pos);
}

static Tensor msa_impl(const Tensor& x, const BlockParams& block, RunMode mode,
                       const SiteTap& tap, std::vector<Tensor>* outs) {
  if (x.rank() != 3)
    throw std::invalid_argument("msa: want [B, N, D], got " +
                                shape_str(x.shape));
  int64_t d = x.shape[2];
  if (block.wq.shape != std::vector<int64_t>{d, d})
    throw std::invalid_argument("msa: wq is " + shape_str(block.wq.shape) +
                                " for input " + shape_str(x.shape));
  if (block.heads <= 0 || d % block.heads != 0)
    throw std::invalid_argument("msa: heads " + std::to_string(block.heads) +
                                " do not divide width " + std::to_string(d));
  int64_t dh = d / block.heads;
  fire(tap, "qkv_in", x);
  Tensor in = run_act(x, block.act_qkv_in, mode);
  Tensor q = matmul(in, run_weight(block.wq, block.wq_qp, mode, "wq"));
  Tensor k = matmul(in, run_weight(block.wk, block.wk_qp, mode, "wk"));
  Tensor v = matmul(in, run_weight(block.wv, block.wv_qp, mode, "wv"));
  if (outs) {
    outs->push_back(q);
    outs->push_back(k);
    outs->push_back(v);
  }
  std::vector<Tensor> ctx;
  for (int h = 0; h < block.heads; ++h) {
    Tensor qh = slice_lastdim(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_lastdim(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_lastdim(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(bmm_nt(qh, kh), 1.0 / std::sqrt(double(dh)));
    Tensor probs = softmax_lastdim(scores);
    fire(tap, "probs", probs);
    probs = run_act(probs, block.act_probs, mode);
    ctx.push_back(bmm(probs, vh));
  }
  Tensor cat = concat_lastdim(ctx);
  fire(tap, "proj_in", cat);
  Tensor in2 = run_act(cat, block.act_proj_in, mode);
  Tensor attn = matmul(in2, run_weight(block.wo, block.wo_qp, mode, "wo"));
  if (outs) outs->push_back(attn);
  return attn;
}

static Tensor mlp_impl(const Tensor& y, const BlockParams& block, RunMode mode,
                       const SiteTap& tap, std::vector<Tensor>* outs) {
  if (y.rank() != 3)
    throw std::invalid_argument("mlp: want [B, N, D], got " +
                                shape_str(y.shape));
  fire(tap, "fc1_in", y);
  Tensor in = run_act(y, block.act_fc1_in, mode);
  Tensor h = add_broadcast(
      matmul(in, run_weight(block.w1, block.w1_qp, mode, "w1")), block.b1);
  if (outs) outs->push_back(h);
  Tensor g = gelu(h);
  fire(tap, "fc2_in", g);
  Tensor in2 = run_act(g, block.act_fc2_in, mode);
  Tensor out = add_broadcast(
      matmul(in2, run_weight(block.w2, block.w2_qp, mode, "w2")), block.b2);
  if (outs) outs->push_back(out);
  return out;
}

Tensor msa_forward(const Tensor& x, const BlockParams& block, RunMode mode) {
  return msa_impl(x, block, mode, nullptr, nullptr);
}

Tensor mlp_forward(const Tensor& y, const BlockParams& block, RunMode mode) {
  return mlp_impl(y, block, mode, nullptr, nullptr);
}

BlockResult block_forward(const Tensor& x, const BlockParams& block,
                          RunMode mode, const SiteTap& tap) {
  if (x.rank() != 3)
    throw std::invalid_argument("block_forward: want [B, N, D], got " +
                                shape_str(x.shape));
  BlockResult r;
  Tensor u = layer_norm(x, block.ln1_gamma, block.ln1_beta, block.ln_eps);
  Tensor attn = msa_impl(u, block, mode, tap, &r.layer_outputs);
  Tensor y = add(x, attn);
  Tensor v = layer_norm(y, block.ln2_gamma, block.ln2_beta, block.ln_eps);
  Tensor m = mlp_impl(v, block, mode, tap, &r.layer_outputs);
  r.out = add(y, m);
  return r;
}

Tensor head_forward(const Tensor& pooled, const ViTModel& model,
                    const SiteTap& tap) {
  if (pooled.rank() != 2)
    throw std::invalid_argument("head_forward: want [B, D], got " +
                                shape_str(pooled.shape));
  fire(tap, "head_in", pooled);
  Tensor in = run_act(pooled, model.act_head_in, model.mode);
  Tensor w = run_weight(model.head_w, model.head_w_qp, model.mode, "head_w");
  return add_broadcast(matmul(in, w), model.head_b);
}

Tensor model_forward(const Tensor& images, const ViTModel& model,
                     const SiteTap& tap) {
  bool single = images.rank() == 3;
  Tensor batch = single
                     ? reshape_view(images, {1, images.shape[0],
                                             images.shape[1], images.shape[2]})
                     : images;
  Tensor x = embed_tokens(batch, model, tap);
  for (size_t l = 0; l < model.blocks.size(); ++l) {
    SiteTap wrapped;
    if (tap) {
      std::string prefix = "block" + std::to_string(l) + ".";
      wrapped = [&tap, prefix](const std::string& site, const Tensor& v) {
        tap(prefix + site, v);
      };
    }
    x = block_forward(x, model.blocks[l], model.mode, wrapped).out;
  }
  Tensor logits = head_forward(mean_tokens(x), model, tap);
  return single ? reshape_view(logits, {logits.shape[1]}) : logits;
}

std::vector<Tensor> block_outputs_trace(const Tensor& images,
                                        const ViTModel& model) {
  Tensor x = embed_tokens(images, model);
  if (x.rank() != 3)
    throw std::invalid_argument("block_outputs_trace: want a batch of images");
  std::vector<Tensor> trace;
  for (const auto& block : model.blocks) {
    x = block_forward(x, block, model.mode).out;
    trace.push_back(x);
  }
  return trace;
}

std::map<std::string, std::pair<double, double>> observe_act_ranges(
    const ViTModel& model, std::span<const Tensor> batches) {
  if (model.mode != RunMode::kFullPrecision)
    throw std::invalid_argument(
        "observe_act_ranges: model must run in full precision");
  if (batches.empty())
    throw std::invalid_argument("observe_act_ranges: no batches");
  std::map<std::string, std::pair<double, double>> ranges;
  SiteTap tap = [&ranges](const std::string& site, const Tensor& v) {
    auto it = ranges.find(site);
    for (double x : v.values()) {
      if (it == ranges.end())
        it = ranges.emplace(site, std::make_pair(x, x)).first;
      it->second.first = std::min(it->second.first, x);
      it->second.second = std::max(it->second.second, x);
    }
  };
  for (const Tensor& batch : batches) model_forward(batch, model, tap);
  return ranges;
}

void attach_weight_quant(ViTModel& model) {
  const ModelConfig& c = model.config;
  model.embed_w_qp = calibrate_per_channel(model.embed_w, c.embed_bits_w, 1);
  if (c.use_pos_embed)
    model.pos_embed_qp = calibrate(model.pos_embed, c.embed_bits_w);
  for (auto& b : model.blocks) {
    b.wq_qp = calibrate_per_channel(b.wq, c.bits_w, 1);
    b.wk_qp = calibrate_per_channel(b.wk, c.bits_w, 1);
    b.wv_qp = calibrate_per_channel(b.wv, c.bits_w, 1);
    b.wo_qp = calibrate_per_channel(b.wo, c.bits_w, 1);
    b.w1_qp = calibrate_per_channel(b.w1, c.bits_w, 1);
    b.w2_qp = calibrate_per_channel(b.w2, c.bits_w, 1);
  }
  model.head_w_qp = calibrate_per_channel(model.head_w, c.head_bits_w, 1);
}

void attach_act_quant(
    ViTModel& model,
    const std::map<std::string, std::pair<double, double>>& ranges) {
  auto params = [&ranges](const std::string& site, int bits) {
    auto it = ranges.find(site);
    if (it == ranges.end())
      throw std::invalid_argument("no observed range for site " + site);
    return quant_params_from_range(it->second.first, it->second.second, bits);
  };
  const ModelConfig& c = model.config;
  model.act_embed_in = params("embed_in", c.embed_bits_a);
  for (size_t l = 0; l < model.blocks.size(); ++l) {
    std::string p = "block" + std::to_string(l) + ".";
    auto& b = model.blocks[l];
    b.act_qkv_in = params(p + "qkv_in", c.bits_a);
    b.act_probs = params(p + "probs", c.bits_a);
    b.act_proj_in = params(p + "proj_in", c.bits_a);
    b.act_fc1_in = params(p + "fc1_in", c.bits_a);
    b.act_fc2_in = params(p + "fc2_in", c.bits_a);
  }
  model.act_head_in = params("head_in", c.head_bits_a);
}

void calibrate_model(ViTModel& model, std::span<const Tensor> calib_batches) {
  if (model.mode != RunMode::kFullPrecision)
    throw std::invalid_argument(
        "calibrate_model: model must start in full precision");
  if (calib_batches.empty())
    throw std::invalid_argument("calibrate_model: no calibration batches");
  attach_weight_quant(model);
  auto ranges = observe_act_ranges(model, calib_batches);
  attach_act_quant(model, ranges);
  model.mode = RunMode::kQuantized;
}

}  // namespace mgrq
