#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mgrq {

class Tape;

std::string shape_str(const std::vector<int64_t>& shape);

// Dense row-major tensor of doubles. Copies are shallow and share the data
// buffer; ops never mutate their inputs, and parameter updates swap in a new
// buffer instead of writing through old ones.
struct Tensor {
  std::vector<int64_t> shape;
  std::shared_ptr<std::vector<double>> data;
  Tape* tape = nullptr;
  int node = -1;

  Tensor() : data(std::make_shared<std::vector<double>>()) {}

  static Tensor zeros(std::vector<int64_t> shape);
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> values);
  static Tensor scalar(double value);

  int64_t numel() const;
  size_t rank() const { return shape.size(); }
  int64_t dim(size_t i) const { return shape.at(i); }

  const std::vector<double>& values() const { return *data; }
  std::vector<double>& values() { return *data; }

  // Value of a one-element tensor.
  double item() const;
  bool all_finite() const;
  // Same buffer, no tape handle.
  Tensor detached() const;
};

// Wengert list. Ops append nodes in execution order; backward replays the
// list in reverse, so each node runs exactly once and only after all of its
// consumers. A tensor holds a non-owning pointer to the tape that recorded
// it, which must outlive the tensor's use in backward() / grad().
class Tape {
 public:
  using BackwardFn =
      std::function<void(Tape&, const std::vector<double>& out_grad)>;

  // Marks t as a leaf whose gradient is retrievable. No-op if t is already
  // tracked here; throws if t belongs to another tape.
  void watch(Tensor& t);

  // Appends a node and returns its id. fn receives the node's output
  // gradient and accumulates into parent buffers via grad_buffer(). A null
  // fn makes a leaf.
  int record(int64_t out_size, BackwardFn fn);

  // Seeds d(loss)/d(loss) = 1 and replays the list in reverse. loss must be
  // a one-element tensor recorded on this tape.
  void backward(const Tensor& loss);

  // Gradient of the last backward() loss with respect to t; zeros if the
  // loss did not reach t. t must be tracked by this tape.
  Tensor grad(const Tensor& t) const;

  // Gradient accumulator for a node, allocated to zeros on first use.
  std::vector<double>& grad_buffer(int node);

  size_t node_count() const { return sizes_.size(); }

 private:
  std::vector<BackwardFn> fns_;
  std::vector<int64_t> sizes_;
  std::vector<std::vector<double>> grads_;
  bool ready_ = false;
};

// Returns the tape shared by the given inputs (throws if two inputs carry
// different tapes), or null if none is tracked.
Tape* joint_tape(std::initializer_list<const Tensor*> inputs);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
// b's shape must be a suffix of a's; b is broadcast over the leading dims.
Tensor add_broadcast(const Tensor& a, const Tensor& b);
// a is [..., m, k] (leading dims flattened into rows), b is [k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
// [B, m, k] x [B, k, n] -> [B, m, n]
Tensor bmm(const Tensor& a, const Tensor& b);
// [B, m, k] x [B, n, k] -> [B, m, n], contracting against b's rows.
Tensor bmm_nt(const Tensor& a, const Tensor& b);
Tensor softmax_lastdim(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps);
Tensor gelu(const Tensor& x);
// Mean over all elements of the squared difference.
Tensor mse(const Tensor& a, const Tensor& b);
Tensor sum(const Tensor& x);
// [B, N, D] -> [B, D], mean over the middle axis.
Tensor mean_tokens(const Tensor& x);
Tensor slice_lastdim(const Tensor& x, int64_t c0, int64_t c1);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor cross_entropy_mean(const Tensor& logits,
                          std::span<const int32_t> labels);

}  // namespace mgrq
