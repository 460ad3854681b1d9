#include "mgrq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mgrq {

std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

static int64_t product(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw std::invalid_argument("negative dim in " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor Tensor::zeros(std::vector<int64_t> shape) {
  Tensor t;
  int64_t n = product(shape);
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(size_t(n), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> values) {
  int64_t n = product(shape);
  if (n != int64_t(values.size()))
    throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " needs " +
                                std::to_string(n) + " values, got " +
                                std::to_string(values.size()));
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

int64_t Tensor::numel() const { return product(shape); }

double Tensor::item() const {
  if (numel() != 1)
    throw std::invalid_argument("item: tensor has shape " + shape_str(shape));
  return (*data)[0];
}

bool Tensor::all_finite() const {
  for (double v : *data)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape = nullptr;
  t.node = -1;
  return t;
}

// --- tape -----------------------------------------------------------------

void Tape::watch(Tensor& t) {
  if (t.tape == this && t.node >= 0) return;
  if (t.tape != nullptr)
    throw std::invalid_argument("watch: tensor already tracked by another tape");
  t.node = record(t.numel(), nullptr);
  t.tape = this;
}

int Tape::record(int64_t out_size, BackwardFn fn) {
  fns_.push_back(std::move(fn));
  sizes_.push_back(out_size);
  return int(fns_.size()) - 1;
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape != this || loss.node < 0)
    throw std::invalid_argument("backward: loss is not recorded on this tape");
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a single element, got " +
                                shape_str(loss.shape));
  grads_.assign(fns_.size(), {});
  grad_buffer(loss.node)[0] = 1.0;
  for (int i = loss.node; i >= 0; --i) {
    if (grads_[size_t(i)].empty() || !fns_[size_t(i)]) continue;
    fns_[size_t(i)](*this, grads_[size_t(i)]);
  }
  ready_ = true;
}

Tensor Tape::grad(const Tensor& t) const {
  if (t.tape != this || t.node < 0)
    throw std::invalid_argument("grad: tensor is not tracked by this tape");
  if (!ready_) throw std::logic_error("grad: backward has not run yet");
  Tensor g = Tensor::zeros(t.shape);
  const auto& buf = grads_[size_t(t.node)];
  if (!buf.empty()) std::copy(buf.begin(), buf.end(), g.values().begin());
  return g;
}

std::vector<double>& Tape::grad_buffer(int node) {
  auto& g = grads_.at(size_t(node));
  if (g.empty()) g.assign(size_t(sizes_[size_t(node)]), 0.0);
  return g;
}

Tape* joint_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tp = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->tape) continue;
    if (tp && tp != t->tape)
      throw std::invalid_argument("inputs belong to different tapes");
    tp = t->tape;
  }
  return tp;
}

// --- kernels --------------------------------------------------------------

// out[M,N] += a[M,K] * b[K,N]; per-element accumulation order matches the
// naive triple loop.
static void mm_kernel(const double* a, const double* b, double* out, int64_t m,
                      int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* oi = out + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double apv = ai[p];
      const double* bp = b + p * n;
      for (int64_t j = 0; j < n; ++j) oi[j] += apv * bp[j];
    }
  }
}

// out[M,N] += a[M,K] * b[N,K]^T
static void mm_nt_kernel(const double* a, const double* b, double* out,
                         int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      out[i * n + j] += s;
    }
  }
}

// out[K,N] += a[M,K]^T * b[M,N]
static void mm_tn_kernel(const double* a, const double* b, double* out,
                         int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* bi = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double apv = a[i * k + p];
      double* op = out + p * n;
      for (int64_t j = 0; j < n; ++j) op[j] += apv * bi[j];
    }
  }
}

// --- elementwise ----------------------------------------------------------

static void require_same_shape(const char* op, const Tensor& a,
                               const Tensor& b) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  if (Tape* tp = joint_tape({&a, &b})) {
    int pa = a.node, pb = b.node;
    out.tape = tp;
    out.node = tp->record(out.numel(), [pa, pb](Tape& t,
                                                const std::vector<double>& g) {
      if (pa >= 0) {
        auto& ga = t.grad_buffer(pa);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (pb >= 0) {
        auto& gb = t.grad_buffer(pb);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  if (Tape* tp = joint_tape({&a, &b})) {
    int pa = a.node, pb = b.node;
    auto ad = a.data, bd = b.data;
    out.tape = tp;
    out.node =
        tp->record(out.numel(), [pa, pb, ad, bd](Tape& t,
                                                 const std::vector<double>& g) {
          if (pa >= 0) {
            auto& ga = t.grad_buffer(pa);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*bd)[i];
          }
          if (pb >= 0) {
            auto& gb = t.grad_buffer(pb);
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (*ad)[i];
          }
        });
  }
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape);
  const auto& av = a.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  if (Tape* tp = joint_tape({&a})) {
    int pa = a.node;
    out.tape = tp;
    out.node =
        tp->record(out.numel(), [pa, c](Tape& t, const std::vector<double>& g) {
          auto& ga = t.grad_buffer(pa);
          for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
        });
  }
  return out;
}

Tensor add_broadcast(const Tensor& a, const Tensor& b) {
  if (b.rank() > a.rank() ||
      !std::equal(b.shape.begin(), b.shape.end(),
                  a.shape.end() - int64_t(b.rank())))
    throw std::invalid_argument("add_broadcast: " + shape_str(b.shape) +
                                " is not a suffix of " + shape_str(a.shape));
  int64_t bn = b.numel();
  Tensor out = Tensor::zeros(a.shape);
  const auto& av = a.values();
  const auto& bv = b.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i)
    ov[i] = av[i] + bv[i % size_t(bn)];
  if (Tape* tp = joint_tape({&a, &b})) {
    int pa = a.node, pb = b.node;
    out.tape = tp;
    out.node = tp->record(
        out.numel(), [pa, pb, bn](Tape& t, const std::vector<double>& g) {
          if (pa >= 0) {
            auto& ga = t.grad_buffer(pa);
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
          }
          if (pb >= 0) {
            auto& gb = t.grad_buffer(pb);
            for (size_t i = 0; i < g.size(); ++i) gb[i % size_t(bn)] += g[i];
          }
        });
  }
  return out;
}

// --- matmul family --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape.back() != b.shape[0])
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
  int64_t k = a.shape.back();
  int64_t n = b.shape[1];
  int64_t m = a.numel() / k;
  std::vector<int64_t> out_shape(a.shape.begin(), a.shape.end() - 1);
  out_shape.push_back(n);
  Tensor out = Tensor::zeros(std::move(out_shape));
  mm_kernel(a.values().data(), b.values().data(), out.values().data(), m, k, n);
  if (Tape* tp = joint_tape({&a, &b})) {
    int pa = a.node, pb = b.node;
    auto ad = a.data, bd = b.data;
    out.tape = tp;
    out.node = tp->record(
        out.numel(),
        [pa, pb, ad, bd, m, k, n](Tape& t, const std::vector<double>& g) {
          if (pa >= 0)
            mm_nt_kernel(g.data(), bd->data(), t.grad_buffer(pa).data(), m, n,
                         k);
          if (pb >= 0)
            mm_tn_kernel(ad->data(), g.data(), t.grad_buffer(pb).data(), m, k,
                         n);
        });
  }
  return out;
}

static void require_batched(const char* op, const Tensor& a, const Tensor& b,
                            bool transposed) {
  bool ok = a.rank() == 3 && b.rank() == 3 && a.shape[0] == b.shape[0];
  if (ok) {
    if (transposed)
      ok = a.shape[2] == b.shape[2];
    else
      ok = a.shape[2] == b.shape[1];
  }
  if (!ok)
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_batched("bmm", a, b, false);
  int64_t bs = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2];
  Tensor out = Tensor::zeros({bs, m, n});
  for (int64_t s = 0; s < bs; ++s)
    mm_kernel(a.values().data() + s * m * k, b.values().data() + s * k * n,
              out.values().data() + s * m * n, m, k, n);
  if (Tape* tp = joint_tape({&a, &b})) {
    int pa = a.node, pb = b.node;
    auto ad = a.data, bd = b.data;
    out.tape = tp;
    out.node = tp->record(
        out.numel(),
        [pa, pb, ad, bd, bs, m, k, n](Tape& t, const std::vector<double>& g) {
          for (int64_t s = 0; s < bs; ++s) {
            const double* gs = g.data() + s * m * n;
            if (pa >= 0)
              mm_nt_kernel(gs, bd->data() + s * k * n,
                           t.grad_buffer(pa).data() + s * m * k, m, n, k);
            if (pb >= 0)
              mm_tn_kernel(ad->data() + s * m * k, gs,
                           t.grad_buffer(pb).data() + s * k * n, m, k, n);
          }
        });
  }
  return out;
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  require_batched("bmm_nt", a, b, true);
  int64_t bs = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[1];
  Tensor out = Tensor::zeros({bs, m, n});
  for (int64_t s = 0; s < bs; ++s)
    mm_nt_kernel(a.values().data() + s * m * k, b.values().data() + s * n * k,
                 out.values().data() + s * m * n, m, k, n);
  if (Tape* tp = joint_tape({&a, &b})) {
    int pa = a.node, pb = b.node;
    auto ad = a.data, bd = b.data;
    out.tape = tp;
    out.node = tp->record(
        out.numel(),
        [pa, pb, ad, bd, bs, m, k, n](Tape& t, const std::vector<double>& g) {
          for (int64_t s = 0; s < bs; ++s) {
            const double* gs = g.data() + s * m * n;
            if (pa >= 0)
              mm_kernel(gs, bd->data() + s * n * k,
                        t.grad_buffer(pa).data() + s * m * k, m, n, k);
            if (pb >= 0)
              mm_tn_kernel(gs, ad->data() + s * m * k,
                           t.grad_buffer(pb).data() + s * n * k, m, n, k);
          }
        });
  }
  return out;
}

// --- nonlinearities -------------------------------------------------------

static int64_t last_dim(const char* op, const Tensor& x) {
  if (x.rank() == 0 || x.shape.back() <= 0)
    throw std::invalid_argument(std::string(op) + ": bad shape " +
                                shape_str(x.shape));
  return x.shape.back();
}

Tensor softmax_lastdim(const Tensor& x) {
  int64_t d = last_dim("softmax_lastdim", x);
  int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double* orow = ov.data() + r * d;
    double mx = xr[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    long double sum = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      sum += orow[j];
    }
    double inv = double(1.0L / sum);
    for (int64_t j = 0; j < d; ++j) orow[j] *= inv;
  }
  if (Tape* tp = joint_tape({&x})) {
    int px = x.node;
    auto od = out.data;
    out.tape = tp;
    out.node = tp->record(
        out.numel(), [px, od, rows, d](Tape& t, const std::vector<double>& g) {
          auto& gx = t.grad_buffer(px);
          for (int64_t r = 0; r < rows; ++r) {
            const double* y = od->data() + r * d;
            const double* gr = g.data() + r * d;
            long double dot = 0.0;
            for (int64_t j = 0; j < d; ++j) dot += gr[j] * y[j];
            double dd = double(dot);
            for (int64_t j = 0; j < d; ++j)
              gx[r * d + j] += y[j] * (gr[j] - dd);
          }
        });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  int64_t d = last_dim("layer_norm", x);
  if (gamma.rank() != 1 || gamma.shape[0] != d || beta.rank() != 1 ||
      beta.shape[0] != d)
    throw std::invalid_argument(
        "layer_norm: gamma/beta must be [" + std::to_string(d) + "], got " +
        shape_str(gamma.shape) + " and " + shape_str(beta.shape));
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape);
  auto xhat = std::make_shared<std::vector<double>>(size_t(x.numel()));
  auto inv_sigma = std::make_shared<std::vector<double>>(size_t(rows));
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    long double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    long double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      long double c = xr[j] - mean;
      var += c * c;
    }
    var /= d;
    double inv = 1.0 / std::sqrt(double(var) + eps);
    (*inv_sigma)[size_t(r)] = inv;
    for (int64_t j = 0; j < d; ++j) {
      double xh = (xr[j] - double(mean)) * inv;
      (*xhat)[size_t(r * d + j)] = xh;
      ov[size_t(r * d + j)] = gv[size_t(j)] * xh + bv[size_t(j)];
    }
  }
  if (Tape* tp = joint_tape({&x, &gamma, &beta})) {
    int px = x.node, pg = gamma.node, pb = beta.node;
    auto gd = gamma.data;
    out.tape = tp;
    out.node = tp->record(
        out.numel(), [px, pg, pb, gd, xhat, inv_sigma, rows,
                      d](Tape& t, const std::vector<double>& g) {
          if (pg >= 0) {
            auto& gg = t.grad_buffer(pg);
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t j = 0; j < d; ++j)
                gg[size_t(j)] += g[size_t(r * d + j)] * (*xhat)[size_t(r * d + j)];
          }
          if (pb >= 0) {
            auto& gb = t.grad_buffer(pb);
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t j = 0; j < d; ++j)
                gb[size_t(j)] += g[size_t(r * d + j)];
          }
          if (px >= 0) {
            auto& gx = t.grad_buffer(px);
            for (int64_t r = 0; r < rows; ++r) {
              long double mean_dxh = 0.0, mean_dxh_xh = 0.0;
              for (int64_t j = 0; j < d; ++j) {
                double dxh = g[size_t(r * d + j)] * (*gd)[size_t(j)];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * (*xhat)[size_t(r * d + j)];
              }
              mean_dxh /= d;
              mean_dxh_xh /= d;
              double inv = (*inv_sigma)[size_t(r)];
              for (int64_t j = 0; j < d; ++j) {
                double dxh = g[size_t(r * d + j)] * (*gd)[size_t(j)];
                gx[size_t(r * d + j)] +=
                    inv * (dxh - double(mean_dxh) -
                           (*xhat)[size_t(r * d + j)] * double(mean_dxh_xh));
              }
            }
          }
        });
  }
  return out;
}

static double norm_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const auto& xv = x.values();
  auto& ov = out.values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * norm_cdf(xv[i]);
  if (Tape* tp = joint_tape({&x})) {
    int px = x.node;
    auto xd = x.data;
    out.tape = tp;
    out.node = tp->record(
        out.numel(), [px, xd](Tape& t, const std::vector<double>& g) {
          constexpr double kInvSqrtTau = 0.39894228040143267794;
          auto& gx = t.grad_buffer(px);
          for (size_t i = 0; i < g.size(); ++i) {
            double v = (*xd)[i];
            double pdf = kInvSqrtTau * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (norm_cdf(v) + v * pdf);
          }
        });
  }
  return out;
}

// --- reductions -----------------------------------------------------------

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape("mse", a, b);
  if (a.numel() == 0) throw std::invalid_argument("mse: empty tensors");
  const auto& av = a.values();
  const auto& bv = b.values();
  long double acc = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    long double d = av[i] - bv[i];
    acc += d * d;
  }
  int64_t n = a.numel();
  Tensor out = Tensor::scalar(double(acc / n));
  if (Tape* tp = joint_tape({&a, &b})) {
    int pa = a.node, pb = b.node;
    auto ad = a.data, bd = b.data;
    out.tape = tp;
    out.node = tp->record(
        1, [pa, pb, ad, bd, n](Tape& t, const std::vector<double>& g) {
          double c = 2.0 * g[0] / double(n);
          if (pa >= 0) {
            auto& ga = t.grad_buffer(pa);
            for (size_t i = 0; i < ga.size(); ++i)
              ga[i] += c * ((*ad)[i] - (*bd)[i]);
          }
          if (pb >= 0) {
            auto& gb = t.grad_buffer(pb);
            for (size_t i = 0; i < gb.size(); ++i)
              gb[i] -= c * ((*ad)[i] - (*bd)[i]);
          }
        });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  long double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(double(acc));
  if (Tape* tp = joint_tape({&x})) {
    int px = x.node;
    out.tape = tp;
    out.node = tp->record(1, [px](Tape& t, const std::vector<double>& g) {
      auto& gx = t.grad_buffer(px);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
    });
  }
  return out;
}

Tensor mean_tokens(const Tensor& x) {
  if (x.rank() != 3)
    throw std::invalid_argument("mean_tokens: want rank 3, got " +
                                shape_str(x.shape));
  int64_t b = x.shape[0], n = x.shape[1], d = x.shape[2];
  Tensor out = Tensor::zeros({b, d});
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t s = 0; s < b; ++s)
    for (int64_t j = 0; j < d; ++j) {
      long double acc = 0.0;
      for (int64_t r = 0; r < n; ++r) acc += xv[size_t((s * n + r) * d + j)];
      ov[size_t(s * d + j)] = double(acc / n);
    }
  if (Tape* tp = joint_tape({&x})) {
    int px = x.node;
    out.tape = tp;
    out.node = tp->record(
        out.numel(), [px, b, n, d](Tape& t, const std::vector<double>& g) {
          auto& gx = t.grad_buffer(px);
          for (int64_t s = 0; s < b; ++s)
            for (int64_t r = 0; r < n; ++r)
              for (int64_t j = 0; j < d; ++j)
                gx[size_t((s * n + r) * d + j)] +=
                    g[size_t(s * d + j)] / double(n);
        });
  }
  return out;
}

// --- slicing --------------------------------------------------------------

Tensor slice_lastdim(const Tensor& x, int64_t c0, int64_t c1) {
  int64_t d = last_dim("slice_lastdim", x);
  if (c0 < 0 || c1 > d || c0 >= c1)
    throw std::invalid_argument("slice_lastdim: bad range [" +
                                std::to_string(c0) + ", " + std::to_string(c1) +
                                ") for " + shape_str(x.shape));
  int64_t rows = x.numel() / d;
  int64_t w = c1 - c0;
  std::vector<int64_t> out_shape = x.shape;
  out_shape.back() = w;
  Tensor out = Tensor::zeros(std::move(out_shape));
  const auto& xv = x.values();
  auto& ov = out.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < w; ++j)
      ov[size_t(r * w + j)] = xv[size_t(r * d + c0 + j)];
  if (Tape* tp = joint_tape({&x})) {
    int px = x.node;
    out.tape = tp;
    out.node = tp->record(
        out.numel(), [px, rows, d, w, c0](Tape& t,
                                          const std::vector<double>& g) {
          auto& gx = t.grad_buffer(px);
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < w; ++j)
              gx[size_t(r * d + c0 + j)] += g[size_t(r * w + j)];
        });
  }
  return out;
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty())
    throw std::invalid_argument("concat_lastdim: no inputs");
  std::vector<int64_t> lead(parts[0].shape.begin(), parts[0].shape.end() - 1);
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != parts[0].rank() ||
        !std::equal(lead.begin(), lead.end(), p.shape.begin()))
      throw std::invalid_argument("concat_lastdim: leading dims differ: " +
                                  shape_str(parts[0].shape) + " vs " +
                                  shape_str(p.shape));
    total += p.shape.back();
  }
  std::vector<int64_t> out_shape = lead;
  out_shape.push_back(total);
  Tensor out = Tensor::zeros(std::move(out_shape));
  int64_t rows = out.numel() / total;
  auto& ov = out.values();
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t w = p.shape.back();
    const auto& pv = p.values();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < w; ++j)
        ov[size_t(r * total + off + j)] = pv[size_t(r * w + j)];
    off += w;
  }
  std::vector<const Tensor*> refs;
  for (const auto& p : parts) refs.push_back(&p);
  Tape* tp = nullptr;
  for (const Tensor* p : refs) {
    if (!p->tape) continue;
    if (tp && tp != p->tape)
      throw std::invalid_argument("inputs belong to different tapes");
    tp = p->tape;
  }
  if (tp) {
    struct Piece {
      int node;
      int64_t off, w;
    };
    std::vector<Piece> pieces;
    int64_t o = 0;
    for (const auto& p : parts) {
      pieces.push_back({p.node, o, p.shape.back()});
      o += p.shape.back();
    }
    out.tape = tp;
    out.node = tp->record(
        out.numel(),
        [pieces, rows, total](Tape& t, const std::vector<double>& g) {
          for (const auto& pc : pieces) {
            if (pc.node < 0) continue;
            auto& gp = t.grad_buffer(pc.node);
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t j = 0; j < pc.w; ++j)
                gp[size_t(r * pc.w + j)] +=
                    g[size_t(r * total + pc.off + j)];
          }
        });
  }
  return out;
}

Tensor cross_entropy_mean(const Tensor& logits,
                          std::span<const int32_t> labels) {
  if (logits.rank() != 2)
    throw std::invalid_argument("cross_entropy_mean: want [batch, classes], got " +
                                shape_str(logits.shape));
  int64_t b = logits.shape[0], c = logits.shape[1];
  if (int64_t(labels.size()) != b)
    throw std::invalid_argument("cross_entropy_mean: batch " +
                                std::to_string(b) + " vs " +
                                std::to_string(labels.size()) + " labels");
  for (auto y : labels)
    if (y < 0 || int64_t(y) >= c)
      throw std::invalid_argument("cross_entropy_mean: label " +
                                  std::to_string(y) + " outside [0, " +
                                  std::to_string(c) + ")");
  auto probs = std::make_shared<std::vector<double>>(size_t(logits.numel()));
  const auto& xv = logits.values();
  long double acc = 0.0;
  for (int64_t r = 0; r < b; ++r) {
    const double* row = xv.data() + r * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    long double sum = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double e = std::exp(row[j] - mx);
      (*probs)[size_t(r * c + j)] = e;
      sum += e;
    }
    double inv = double(1.0L / sum);
    for (int64_t j = 0; j < c; ++j) (*probs)[size_t(r * c + j)] *= inv;
    acc += std::log(double(sum)) + mx - row[labels[size_t(r)]];
  }
  Tensor out = Tensor::scalar(double(acc / b));
  if (Tape* tp = joint_tape({&logits})) {
    int px = logits.node;
    std::vector<int32_t> lab(labels.begin(), labels.end());
    out.tape = tp;
    out.node = tp->record(
        1, [px, probs, lab, b, c](Tape& t, const std::vector<double>& g) {
          auto& gx = t.grad_buffer(px);
          double inv_b = g[0] / double(b);
          for (int64_t r = 0; r < b; ++r)
            for (int64_t j = 0; j < c; ++j) {
              double p = (*probs)[size_t(r * c + j)];
              double onehot = (j == int64_t(lab[size_t(r)])) ? 1.0 : 0.0;
              gx[size_t(r * c + j)] += inv_b * (p - onehot);
            }
        });
  }
  return out;
}

}  // namespace mgrq
