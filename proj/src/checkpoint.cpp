#include "mgrq/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "mgrq/errors.hpp"

namespace mgrq {

static constexpr char kMagic[8] = {'M', 'G', 'R', 'Q', 'C', 'K', 'P', 'T'};
static constexpr uint32_t kVersion = 1;

namespace {

struct Writer {
  std::vector<uint8_t> buf;

  void bytes(const void* p, size_t n) {
    const uint8_t* b = static_cast<const uint8_t*>(p);
    buf.insert(buf.end(), b, b + n);
  }
  void u32(uint32_t v) {
    uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16),
                    uint8_t(v >> 24)};
    bytes(b, 4);
  }
  void i32(int32_t v) { u32(uint32_t(v)); }
  void u64(uint64_t v) {
    u32(uint32_t(v));
    u32(uint32_t(v >> 32));
  }
  void f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    bytes(s.data(), s.size());
  }
  void tensor(const std::string& name, const Tensor& t) {
    str(name);
    u64(uint64_t(t.rank()));
    for (int64_t d : t.shape) u64(uint64_t(d));
    for (double v : t.values()) f32(float(v));
  }
  void qparams(const std::string& name, const QuantParams& qp) {
    str(name);
    u32(uint32_t(qp.bits));
    i32(qp.axis);
    u64(qp.scale.size());
    for (double s : qp.scale) f32(float(s));
    for (int32_t z : qp.zero_point) i32(z);
  }
};

struct Reader {
  const uint8_t* p;
  size_t n;
  size_t off = 0;

  void need(size_t k) {
    if (off + k > n)
      throw DataError(DataErrorKind::kTruncated,
                      "checkpoint cut short at byte " + std::to_string(off));
  }
  uint32_t u32() {
    need(4);
    uint32_t v = uint32_t(p[off]) | uint32_t(p[off + 1]) << 8 |
                 uint32_t(p[off + 2]) << 16 | uint32_t(p[off + 3]) << 24;
    off += 4;
    return v;
  }
  int32_t i32() { return int32_t(u32()); }
  uint64_t u64() {
    uint64_t lo = u32();
    return lo | uint64_t(u32()) << 32;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    uint64_t len = u64();
    if (len > (1u << 20))
      throw DataError(DataErrorKind::kCorrupt,
                      "unreasonable name length " + std::to_string(len));
    need(size_t(len));
    std::string s(reinterpret_cast<const char*>(p + off), size_t(len));
    off += size_t(len);
    return s;
  }
};

}  // namespace

// Stable name -> tensor listing; iteration order defines the file layout.
static std::vector<std::pair<std::string, const Tensor*>> tensor_table(
    const ViTModel& m) {
  std::vector<std::pair<std::string, const Tensor*>> t;
  t.emplace_back("embed_w", &m.embed_w);
  t.emplace_back("embed_b", &m.embed_b);
  if (m.config.use_pos_embed) t.emplace_back("pos_embed", &m.pos_embed);
  for (size_t l = 0; l < m.blocks.size(); ++l) {
    std::string p = "block" + std::to_string(l) + ".";
    const BlockParams& b = m.blocks[l];
    t.emplace_back(p + "ln1_gamma", &b.ln1_gamma);
    t.emplace_back(p + "ln1_beta", &b.ln1_beta);
    t.emplace_back(p + "wq", &b.wq);
    t.emplace_back(p + "wk", &b.wk);
    t.emplace_back(p + "wv", &b.wv);
    t.emplace_back(p + "wo", &b.wo);
    t.emplace_back(p + "ln2_gamma", &b.ln2_gamma);
    t.emplace_back(p + "ln2_beta", &b.ln2_beta);
    t.emplace_back(p + "w1", &b.w1);
    t.emplace_back(p + "b1", &b.b1);
    t.emplace_back(p + "w2", &b.w2);
    t.emplace_back(p + "b2", &b.b2);
  }
  t.emplace_back("head_w", &m.head_w);
  t.emplace_back("head_b", &m.head_b);
  return t;
}

static std::vector<std::pair<std::string, const std::optional<QuantParams>*>>
qparam_table(const ViTModel& m) {
  std::vector<std::pair<std::string, const std::optional<QuantParams>*>> t;
  t.emplace_back("embed_w", &m.embed_w_qp);
  t.emplace_back("pos_embed", &m.pos_embed_qp);
  t.emplace_back("head_w", &m.head_w_qp);
  t.emplace_back("act.embed_in", &m.act_embed_in);
  t.emplace_back("act.head_in", &m.act_head_in);
  for (size_t l = 0; l < m.blocks.size(); ++l) {
    std::string p = "block" + std::to_string(l) + ".";
    const BlockParams& b = m.blocks[l];
    t.emplace_back(p + "wq", &b.wq_qp);
    t.emplace_back(p + "wk", &b.wk_qp);
    t.emplace_back(p + "wv", &b.wv_qp);
    t.emplace_back(p + "wo", &b.wo_qp);
    t.emplace_back(p + "w1", &b.w1_qp);
    t.emplace_back(p + "w2", &b.w2_qp);
    t.emplace_back(p + "act_qkv_in", &b.act_qkv_in);
    t.emplace_back(p + "act_probs", &b.act_probs);
    t.emplace_back(p + "act_proj_in", &b.act_proj_in);
    t.emplace_back(p + "act_fc1_in", &b.act_fc1_in);
    t.emplace_back(p + "act_fc2_in", &b.act_fc2_in);
  }
  return t;
}

static std::vector<std::pair<std::string, std::optional<QuantParams>*>>
qparam_table(ViTModel& m) {
  std::vector<std::pair<std::string, std::optional<QuantParams>*>> t;
  for (auto& [name, qp] : qparam_table(const_cast<const ViTModel&>(m)))
    t.emplace_back(name, const_cast<std::optional<QuantParams>*>(qp));
  return t;
}

std::vector<uint8_t> serialize_model(const ViTModel& model) {
  model.config.validate();
  Writer w;
  w.bytes(kMagic, 8);
  w.u32(kVersion);
  w.u32(uint32_t(model.mode));
  const ModelConfig& c = model.config;
  for (int v : {c.image_size, c.patch_size, c.channels, c.embed_dim, c.heads,
                c.blocks, c.mlp_hidden, c.classes, c.use_pos_embed ? 1 : 0,
                c.bits_w, c.bits_a, c.embed_bits_w, c.embed_bits_a,
                c.head_bits_w, c.head_bits_a})
    w.u32(uint32_t(v));
  w.f32(float(c.ln_eps));
  auto tensors = tensor_table(model);
  w.u64(tensors.size());
  for (const auto& [name, t] : tensors) w.tensor(name, *t);
  uint64_t qp_count = 0;
  auto qps = qparam_table(model);
  for (const auto& [name, qp] : qps)
    if (qp->has_value()) ++qp_count;
  w.u64(qp_count);
  for (const auto& [name, qp] : qps)
    if (qp->has_value()) w.qparams(name, **qp);
  return std::move(w.buf);
}

static std::vector<int64_t> expected_shape(const std::string& name,
                                           const ModelConfig& c) {
  int64_t d = c.embed_dim;
  if (name == "embed_w") return {c.patch_dim(), d};
  if (name == "embed_b") return {d};
  if (name == "pos_embed") return {c.tokens(), d};
  if (name == "head_w") return {d, c.classes};
  if (name == "head_b") return {c.classes};
  auto dot = name.find('.');
  std::string field = name.substr(dot + 1);
  if (field == "w1") return {d, c.mlp_hidden};
  if (field == "b1") return {c.mlp_hidden};
  if (field == "w2") return {c.mlp_hidden, d};
  if (field == "b2" || field == "ln1_gamma" || field == "ln1_beta" ||
      field == "ln2_gamma" || field == "ln2_beta")
    return {d};
  return {d, d};  // wq, wk, wv, wo
}

ViTModel deserialize_model(const uint8_t* data, size_t size) {
  Reader r{data, size};
  r.need(8);
  if (std::memcmp(data, kMagic, 8) != 0)
    throw DataError(DataErrorKind::kBadMagic, "not a checkpoint");
  r.off = 8;
  uint32_t version = r.u32();
  if (version != kVersion)
    throw DataError(DataErrorKind::kBadVersion,
                    "checkpoint version " + std::to_string(version) +
                        ", expected " + std::to_string(kVersion));
  uint32_t mode = r.u32();
  if (mode > uint32_t(RunMode::kQuantSurrogate))
    throw DataError(DataErrorKind::kCorrupt,
                    "unknown run mode " + std::to_string(mode));
  ModelConfig c;
  int* fields[] = {&c.image_size, &c.patch_size, &c.channels, &c.embed_dim,
                   &c.heads,      &c.blocks,     &c.mlp_hidden, &c.classes};
  for (int*& f : fields) *f = int(r.u32());
  c.use_pos_embed = r.u32() != 0;
  c.bits_w = int(r.u32());
  c.bits_a = int(r.u32());
  c.embed_bits_w = int(r.u32());
  c.embed_bits_a = int(r.u32());
  c.head_bits_w = int(r.u32());
  c.head_bits_a = int(r.u32());
  c.ln_eps = double(r.f32());
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(DataErrorKind::kCorrupt,
                    std::string("bad stored config: ") + e.what());
  }

  ViTModel m;
  m.config = c;
  m.mode = RunMode(mode);
  m.blocks.resize(size_t(c.blocks));
  for (auto& b : m.blocks) {
    b.heads = c.heads;
    b.ln_eps = c.ln_eps;
  }

  uint64_t tensor_count = r.u64();
  std::map<std::string, Tensor> loaded;
  for (uint64_t i = 0; i < tensor_count; ++i) {
    std::string name = r.str();
    uint64_t rank = r.u64();
    if (rank > 8)
      throw DataError(DataErrorKind::kCorrupt,
                      name + ": rank " + std::to_string(rank));
    std::vector<int64_t> shape;
    uint64_t numel = 1;
    for (uint64_t k = 0; k < rank; ++k) {
      uint64_t dim = r.u64();
      if (dim == 0 || dim > (1u << 24))
        throw DataError(DataErrorKind::kCorrupt, name + ": bad dims");
      shape.push_back(int64_t(dim));
      numel *= dim;
    }
    if (numel > (1u << 28))
      throw DataError(DataErrorKind::kCorrupt, name + ": bad dims");
    r.need(size_t(numel) * 4);
    std::vector<double> vals(static_cast<size_t>(numel));
    for (auto& v : vals) v = double(r.f32());
    if (!loaded.emplace(name, Tensor::from(std::move(shape), std::move(vals)))
             .second)
      throw DataError(DataErrorKind::kCorrupt, "duplicate tensor " + name);
  }

  auto want = tensor_table(m);
  if (want.size() != loaded.size())
    throw DataError(DataErrorKind::kCorrupt,
                    "checkpoint holds " + std::to_string(loaded.size()) +
                        " tensors, config needs " +
                        std::to_string(want.size()));
  for (auto& [name, slot] : want) {
    auto it = loaded.find(name);
    if (it == loaded.end())
      throw DataError(DataErrorKind::kCorrupt, "missing tensor " + name);
    if (it->second.shape != expected_shape(name, c))
      throw DataError(DataErrorKind::kCorrupt,
                      name + " is " + shape_str(it->second.shape) +
                          ", expected " +
                          shape_str(expected_shape(name, c)));
    *const_cast<Tensor*>(slot) = std::move(it->second);
  }

  uint64_t qp_count = r.u64();
  auto slots = qparam_table(m);
  for (uint64_t i = 0; i < qp_count; ++i) {
    std::string name = r.str();
    QuantParams qp;
    qp.bits = int(r.u32());
    qp.axis = r.i32();
    uint64_t channels = r.u64();
    if (channels == 0 || channels > (1u << 24))
      throw DataError(DataErrorKind::kCorrupt,
                      name + ": bad channel count " +
                          std::to_string(channels));
    for (uint64_t k = 0; k < channels; ++k)
      qp.scale.push_back(double(r.f32()));
    for (uint64_t k = 0; k < channels; ++k) qp.zero_point.push_back(r.i32());
    try {
      qp.validate();
    } catch (const std::invalid_argument& e) {
      throw DataError(DataErrorKind::kCorrupt,
                      name + ": " + std::string(e.what()));
    }
    bool placed = false;
    for (auto& [slot_name, slot] : slots)
      if (slot_name == name) {
        if (slot->has_value())
          throw DataError(DataErrorKind::kCorrupt,
                          "duplicate quant params " + name);
        *slot = std::move(qp);
        placed = true;
        break;
      }
    if (!placed)
      throw DataError(DataErrorKind::kCorrupt,
                      "quant params for unknown tensor " + name);
  }
  if (r.off != size)
    throw DataError(DataErrorKind::kCorrupt,
                    std::to_string(size - r.off) + " trailing bytes");
  if (m.mode != RunMode::kFullPrecision) {
    auto missing = [](const std::optional<QuantParams>& qp) { return !qp; };
    bool bad = missing(m.embed_w_qp) || missing(m.head_w_qp) ||
               (m.config.use_pos_embed && missing(m.pos_embed_qp));
    for (const auto& b : m.blocks)
      bad = bad || missing(b.wq_qp) || missing(b.wk_qp) || missing(b.wv_qp) ||
            missing(b.wo_qp) || missing(b.w1_qp) || missing(b.w2_qp);
    if (bad)
      throw DataError(DataErrorKind::kCorrupt,
                      "quantized checkpoint lacks weight quant params");
  }
  return m;
}

void save_checkpoint(const ViTModel& model, const std::string& path) {
  std::vector<uint8_t> bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw DataError(DataErrorKind::kNotFound,
                    "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            std::streamsize(bytes.size()));
  if (!out)
    throw DataError(DataErrorKind::kTruncated, "short write to " + path);
}

ViTModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw DataError(DataErrorKind::kNotFound, "no such file: " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  return deserialize_model(buf.data(), buf.size());
}

}  // namespace mgrq
