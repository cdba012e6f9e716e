#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace stsn {

// 64-bit throughout. Finite-difference checks are unreliable at 32-bit and
// every acceptance bound is stated at 64-bit precision.
using real = double;

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::int64_t element_count(const std::vector<int>& dims);

class Tape;

// Dense row-major N-d array. Copies are cheap (shared immutable storage).
// A Tensor optionally refers to a node on the tape that produced it; dims
// and data never change after construction.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<int> dims, std::vector<real> values);
  Tensor(std::vector<int> dims, std::shared_ptr<const std::vector<real>> values);

  const std::vector<int>& dims() const { return dims_; }
  std::int64_t size() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  bool defined() const { return data_ != nullptr; }
  const real* data() const { return data_->data(); }
  const std::vector<real>& values() const { return *data_; }
  std::shared_ptr<const std::vector<real>> storage() const { return data_; }
  real item() const;  // scalar access, size must be 1

  int node() const { return node_; }
  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool b) { requires_grad_ = b; }

 private:
  friend class Tape;
  std::vector<int> dims_;
  std::shared_ptr<const std::vector<real>> data_;
  int node_ = -1;
  bool requires_grad_ = false;
};

class GradientMap {
 public:
  bool has(const Tensor& t) const { return t.node() >= 0 && grads_.count(t.node()) > 0; }
  // d(loss)/d(t); t must be a leaf registered on the tape that produced this map
  const Tensor& grad(const Tensor& t) const;

 private:
  friend class Tape;
  std::unordered_map<int, Tensor> grads_;
};

// Single-use reverse-mode tape. Construction makes it the active tape for the
// current thread; destruction restores the previous one. A tape and the
// tensors bound to it are confined to one thread.
class Tape {
 public:
  // Slot i aligns with parent i; null for parents that need no gradient.
  using ParentGrads = std::span<std::vector<real>* const>;
  using BackwardFn = std::function<void(const std::vector<real>& grad_out, ParentGrads)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // Registers t as a differentiable leaf.
  void watch(Tensor& t);

  // Records one op node. Parents not bound to this tape are constants and
  // receive a null gradient slot in the backward call. This is the extension
  // point custom ops (convolutions, losses) use.
  Tensor emit(std::vector<int> dims, std::shared_ptr<const std::vector<real>> data,
              std::initializer_list<const Tensor*> parents, BackwardFn fn);

  // Reverse sweep from a scalar loss. Single use; the tape is consumed.
  GradientMap run_backward(const Tensor& loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::vector<int> dims;
    std::vector<int> parents;
    BackwardFn backward;  // empty for leaves
    bool leaf = false;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

enum class Unary { Exp, Relu, Negate, Sqrt, Sigmoid };
enum class Binary { Add, Sub, Mul, Div };

// ---- construction ----
Tensor tensor_from(std::vector<int> dims, std::vector<real> values, bool requires_grad = false);
Tensor zeros(std::vector<int> dims);
Tensor full(std::vector<int> dims, real value);

// ---- elementwise / shape / reduction ops ----
Tensor unary_elementwise(Unary kind, const Tensor& a);
// b must either match a's dims exactly or be a [1,h,w] per-pixel map
// broadcast across the channels of a [c,h,w] tensor.
Tensor binary_elementwise(Binary kind, const Tensor& a, const Tensor& b);

inline Tensor exp(const Tensor& a) { return unary_elementwise(Unary::Exp, a); }
inline Tensor relu(const Tensor& a) { return unary_elementwise(Unary::Relu, a); }
inline Tensor negate(const Tensor& a) { return unary_elementwise(Unary::Negate, a); }
inline Tensor sqrt(const Tensor& a) { return unary_elementwise(Unary::Sqrt, a); }
inline Tensor sigmoid(const Tensor& a) { return unary_elementwise(Unary::Sigmoid, a); }
inline Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(Binary::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(Binary::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(Binary::Mul, a, b); }
inline Tensor div(const Tensor& a, const Tensor& b) { return binary_elementwise(Binary::Div, a, b); }

Tensor concat_channels(const Tensor& a, const Tensor& b);       // [c1,h,w]+[c2,h,w] -> [c1+c2,h,w]
std::pair<Tensor, Tensor> split_channels(const Tensor& x, int c1);
Tensor slice_leading(const Tensor& x, int index);               // [m,h,w] -> [1,h,w]
Tensor softmax_over_leading_axis(const Tensor& x);              // [m,h,w], per-pixel over m
Tensor sum(const Tensor& a);                                    // -> scalar []
Tensor sum_channels(const Tensor& a);                           // [c,h,w] -> [1,h,w]

// ---- autodiff entry points ----
GradientMap backward(const Tensor& loss);

// Central-difference oracle, independent of the tape machinery. f must be a
// deterministic pure forward function.
Tensor finite_difference_grad(const std::function<real(const Tensor&)>& f,
                              const Tensor& x, real eps);

}  // namespace stsn
