#include "stsn/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace stsn {

namespace {

thread_local std::vector<Tape*> g_tape_stack;

bool all_finite(const std::vector<real>& v) {
  for (real x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

}  // namespace

std::int64_t element_count(const std::vector<int>& dims) {
  std::int64_t n = 1;
  for (int d : dims) {
    require(d > 0, "tensor extents must be positive");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> dims, std::vector<real> values)
    : Tensor(std::move(dims), std::make_shared<const std::vector<real>>(std::move(values))) {}

Tensor::Tensor(std::vector<int> dims, std::shared_ptr<const std::vector<real>> values)
    : dims_(std::move(dims)), data_(std::move(values)) {
  require(data_ != nullptr, "tensor storage must not be null");
  require(element_count(dims_) == static_cast<std::int64_t>(data_->size()),
          "tensor value count does not match dims");
}

real Tensor::item() const {
  require(size() == 1, "item() requires a single-element tensor");
  return (*data_)[0];
}

const Tensor& GradientMap::grad(const Tensor& t) const {
  require(t.node() >= 0, "tensor is not bound to a tape node");
  auto it = grads_.find(t.node());
  require(it != grads_.end(), "no gradient recorded for this tensor");
  return it->second;
}

Tape::Tape() { g_tape_stack.push_back(this); }

Tape::~Tape() {
  // Destruction order is scope-nested by construction.
  if (!g_tape_stack.empty() && g_tape_stack.back() == this) g_tape_stack.pop_back();
}

Tape* Tape::active() { return g_tape_stack.empty() ? nullptr : g_tape_stack.back(); }

void Tape::watch(Tensor& t) {
  require(t.defined(), "cannot watch an undefined tensor");
  Node n;
  n.dims = t.dims();
  n.leaf = true;
  nodes_.push_back(std::move(n));
  t.node_ = static_cast<int>(nodes_.size()) - 1;
  t.requires_grad_ = true;
}

Tensor Tape::emit(std::vector<int> dims, std::shared_ptr<const std::vector<real>> data,
                  std::initializer_list<const Tensor*> parents, BackwardFn fn) {
  Node n;
  n.dims = dims;
  for (const Tensor* p : parents) n.parents.push_back(p ? p->node_ : -1);
  n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  Tensor out(std::move(dims), std::move(data));
  out.node_ = static_cast<int>(nodes_.size()) - 1;
  return out;
}

GradientMap Tape::run_backward(const Tensor& loss) {
  require(!consumed_, "tape already consumed by a previous backward pass");
  require(loss.node_ >= 0 && static_cast<std::size_t>(loss.node_) < nodes_.size(),
          "loss tensor is not bound to this tape");
  require(loss.dims().empty(), "backward requires a scalar loss");
  consumed_ = true;

  std::vector<std::vector<real>> grads(nodes_.size());
  grads[loss.node_] = {1.0};

  for (int id = loss.node_; id >= 0; --id) {
    Node& node = nodes_[id];
    if (grads[id].empty() || node.leaf || !node.backward) continue;
    std::vector<std::vector<real>*> slots(node.parents.size(), nullptr);
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      int pid = node.parents[i];
      if (pid < 0) continue;
      if (grads[pid].empty()) grads[pid].assign(element_count(nodes_[pid].dims), 0.0);
      slots[i] = &grads[pid];
    }
    node.backward(grads[id], ParentGrads(slots.data(), slots.size()));
    node.backward = nullptr;  // release saved values eagerly
  }

  GradientMap out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].leaf) continue;
    std::vector<real> g = std::move(grads[id]);
    if (g.empty()) g.assign(element_count(nodes_[id].dims), 0.0);
    out.grads_.emplace(static_cast<int>(id), Tensor(nodes_[id].dims, std::move(g)));
  }
  return out;
}

GradientMap backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  require(tape != nullptr, "backward requires an active tape");
  return tape->run_backward(loss);
}

Tensor tensor_from(std::vector<int> dims, std::vector<real> values, bool requires_grad) {
  require(element_count(dims) == static_cast<std::int64_t>(values.size()),
          "tensor_from: value count does not match dims");
  require(all_finite(values), "tensor_from: values must be finite");
  Tensor t(std::move(dims), std::move(values));
  if (requires_grad) {
    t.set_requires_grad(true);
    if (Tape* tape = Tape::active()) tape->watch(t);
  }
  return t;
}

Tensor zeros(std::vector<int> dims) { return full(std::move(dims), 0.0); }

Tensor full(std::vector<int> dims, real value) {
  std::int64_t n = element_count(dims);
  return Tensor(std::move(dims), std::vector<real>(static_cast<std::size_t>(n), value));
}

Tensor unary_elementwise(Unary kind, const Tensor& a) {
  require(a.defined(), "unary_elementwise: undefined input");
  const std::size_t n = a.values().size();
  auto out = std::make_shared<std::vector<real>>(n);
  const real* x = a.data();
  real* y = out->data();
  switch (kind) {
    case Unary::Exp:
      for (std::size_t i = 0; i < n; ++i) y[i] = std::exp(x[i]);
      require(all_finite(*out), "exp overflow: inputs here are bounded, this signals a bug");
      break;
    case Unary::Relu:
      for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0 ? x[i] : 0.0;
      break;
    case Unary::Negate:
      for (std::size_t i = 0; i < n; ++i) y[i] = -x[i];
      break;
    case Unary::Sqrt:
      for (std::size_t i = 0; i < n; ++i) {
        require(x[i] >= 0, "sqrt of negative value");
        y[i] = std::sqrt(x[i]);
      }
      break;
    case Unary::Sigmoid:
      for (std::size_t i = 0; i < n; ++i)
        y[i] = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      break;
  }

  Tape* tape = Tape::active();
  if (!tape || !(a.node() >= 0)) return Tensor(a.dims(), std::move(out));

  auto saved_in = a.storage();
  auto saved_out = std::shared_ptr<const std::vector<real>>(out);
  return tape->emit(a.dims(), out, {&a},
                    [kind, saved_in, saved_out](const std::vector<real>& g, Tape::ParentGrads pg) {
                      if (!pg[0]) return;
                      std::vector<real>& gx = *pg[0];
                      const std::vector<real>& x = *saved_in;
                      const std::vector<real>& y = *saved_out;
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        switch (kind) {
                          case Unary::Exp: gx[i] += g[i] * y[i]; break;
                          // subgradient 0 at the relu tie and at sqrt(0)
                          case Unary::Relu: gx[i] += x[i] > 0 ? g[i] : 0.0; break;
                          case Unary::Negate: gx[i] -= g[i]; break;
                          case Unary::Sqrt: gx[i] += x[i] > 0 ? g[i] / (2.0 * y[i]) : 0.0; break;
                          case Unary::Sigmoid: gx[i] += g[i] * y[i] * (1.0 - y[i]); break;
                        }
                      }
                    });
}

namespace {

// Broadcast pattern: a is [c,h,w], b is [1,h,w]. Returns c, or 0 when the
// dims match exactly, or -1 when incompatible.
int broadcast_channels(const Tensor& a, const Tensor& b) {
  if (a.dims() == b.dims()) return 0;
  if (a.dims().size() == 3 && b.dims().size() == 3 && b.dims()[0] == 1 &&
      a.dims()[1] == b.dims()[1] && a.dims()[2] == b.dims()[2]) {
    return a.dims()[0];
  }
  return -1;
}

}  // namespace

Tensor binary_elementwise(Binary kind, const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), "binary_elementwise: undefined input");
  const int bc = broadcast_channels(a, b);
  require(bc >= 0, "binary_elementwise: dims incompatible (need equal dims or [c,h,w] vs [1,h,w])");

  if (kind == Binary::Div) {
    for (real v : b.values()) require(v != 0.0, "division by zero");
  }

  const std::size_t n = a.values().size();
  const std::size_t plane = bc > 0 ? b.values().size() : n;
  auto out = std::make_shared<std::vector<real>>(n);
  const real* x = a.data();
  const real* yv = b.data();
  real* z = out->data();
  for (std::size_t i = 0; i < n; ++i) {
    const real bv = yv[i % plane];
    switch (kind) {
      case Binary::Add: z[i] = x[i] + bv; break;
      case Binary::Sub: z[i] = x[i] - bv; break;
      case Binary::Mul: z[i] = x[i] * bv; break;
      case Binary::Div: z[i] = x[i] / bv; break;
    }
  }

  Tape* tape = Tape::active();
  if (!tape || (a.node() < 0 && b.node() < 0)) return Tensor(a.dims(), std::move(out));

  auto sa = a.storage();
  auto sb = b.storage();
  return tape->emit(
      a.dims(), out, {&a, &b},
      [kind, sa, sb, plane](const std::vector<real>& g, Tape::ParentGrads pg) {
        const std::vector<real>& x = *sa;
        const std::vector<real>& y = *sb;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t j = i % plane;
          switch (kind) {
            case Binary::Add:
              if (pg[0]) (*pg[0])[i] += g[i];
              if (pg[1]) (*pg[1])[j] += g[i];
              break;
            case Binary::Sub:
              if (pg[0]) (*pg[0])[i] += g[i];
              if (pg[1]) (*pg[1])[j] -= g[i];
              break;
            case Binary::Mul:
              if (pg[0]) (*pg[0])[i] += g[i] * y[j];
              if (pg[1]) (*pg[1])[j] += g[i] * x[i];
              break;
            case Binary::Div:
              if (pg[0]) (*pg[0])[i] += g[i] / y[j];
              if (pg[1]) (*pg[1])[j] -= g[i] * x[i] / (y[j] * y[j]);
              break;
          }
        }
      });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require(a.dims().size() == 3 && b.dims().size() == 3, "concat_channels expects [c,h,w] tensors");
  require(a.dims()[1] == b.dims()[1] && a.dims()[2] == b.dims()[2],
          "concat_channels: spatial dims mismatch");
  const std::size_t na = a.values().size();
  const std::size_t nb = b.values().size();
  auto out = std::make_shared<std::vector<real>>(na + nb);
  std::copy(a.values().begin(), a.values().end(), out->begin());
  std::copy(b.values().begin(), b.values().end(), out->begin() + static_cast<std::ptrdiff_t>(na));
  std::vector<int> dims{a.dims()[0] + b.dims()[0], a.dims()[1], a.dims()[2]};

  Tape* tape = Tape::active();
  if (!tape || (a.node() < 0 && b.node() < 0)) return Tensor(std::move(dims), std::move(out));

  return tape->emit(std::move(dims), out, {&a, &b},
                    [na, nb](const std::vector<real>& g, Tape::ParentGrads pg) {
                      if (pg[0]) {
                        for (std::size_t i = 0; i < na; ++i) (*pg[0])[i] += g[i];
                      }
                      if (pg[1]) {
                        for (std::size_t i = 0; i < nb; ++i) (*pg[1])[i] += g[na + i];
                      }
                    });
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x, int c1) {
  require(x.dims().size() == 3, "split_channels expects a [c,h,w] tensor");
  require(c1 > 0 && c1 < x.dims()[0], "split_channels: bad split point");
  const int h = x.dims()[1], w = x.dims()[2];
  const std::size_t na = static_cast<std::size_t>(c1) * h * w;
  auto da = std::make_shared<std::vector<real>>(x.values().begin(),
                                                x.values().begin() + static_cast<std::ptrdiff_t>(na));
  auto db = std::make_shared<std::vector<real>>(x.values().begin() + static_cast<std::ptrdiff_t>(na),
                                                x.values().end());
  std::vector<int> dims_a{c1, h, w};
  std::vector<int> dims_b{x.dims()[0] - c1, h, w};

  Tape* tape = Tape::active();
  if (!tape || x.node() < 0) {
    return {Tensor(std::move(dims_a), std::move(da)), Tensor(std::move(dims_b), std::move(db))};
  }
  Tensor ta = tape->emit(std::move(dims_a), da, {&x},
                         [](const std::vector<real>& g, Tape::ParentGrads pg) {
                           if (!pg[0]) return;
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
                         });
  Tensor tb = tape->emit(std::move(dims_b), db, {&x},
                         [na](const std::vector<real>& g, Tape::ParentGrads pg) {
                           if (!pg[0]) return;
                           for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[na + i] += g[i];
                         });
  return {std::move(ta), std::move(tb)};
}

Tensor slice_leading(const Tensor& x, int index) {
  require(x.dims().size() == 3, "slice_leading expects a [m,h,w] tensor");
  require(index >= 0 && index < x.dims()[0], "slice_leading: index out of range");
  const std::size_t plane = static_cast<std::size_t>(x.dims()[1]) * x.dims()[2];
  const std::size_t off = static_cast<std::size_t>(index) * plane;
  auto out = std::make_shared<std::vector<real>>(x.values().begin() + static_cast<std::ptrdiff_t>(off),
                                                 x.values().begin() + static_cast<std::ptrdiff_t>(off + plane));
  std::vector<int> dims{1, x.dims()[1], x.dims()[2]};

  Tape* tape = Tape::active();
  if (!tape || x.node() < 0) return Tensor(std::move(dims), std::move(out));
  return tape->emit(std::move(dims), out, {&x},
                    [off](const std::vector<real>& g, Tape::ParentGrads pg) {
                      if (!pg[0]) return;
                      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[off + i] += g[i];
                    });
}

Tensor softmax_over_leading_axis(const Tensor& x) {
  require(x.dims().size() == 3, "softmax_over_leading_axis expects a [m,h,w] tensor");
  require(all_finite(x.values()), "softmax: non-finite input");
  const int m = x.dims()[0];
  const std::size_t plane = static_cast<std::size_t>(x.dims()[1]) * x.dims()[2];
  auto out = std::make_shared<std::vector<real>>(x.values().size());
  const real* in = x.data();
  real* y = out->data();
  for (std::size_t p = 0; p < plane; ++p) {
    real mx = in[p];
    for (int k = 1; k < m; ++k) mx = std::max(mx, in[k * plane + p]);
    real denom = 0;
    for (int k = 0; k < m; ++k) {
      const real e = std::exp(in[k * plane + p] - mx);
      y[k * plane + p] = e;
      denom += e;
    }
    for (int k = 0; k < m; ++k) y[k * plane + p] /= denom;
  }

  Tape* tape = Tape::active();
  if (!tape || x.node() < 0) return Tensor(x.dims(), std::move(out));

  auto saved_out = std::shared_ptr<const std::vector<real>>(out);
  const int mm = m;
  return tape->emit(x.dims(), out, {&x},
                    [saved_out, mm, plane](const std::vector<real>& g, Tape::ParentGrads pg) {
                      if (!pg[0]) return;
                      const std::vector<real>& s = *saved_out;
                      for (std::size_t p = 0; p < plane; ++p) {
                        real dot = 0;
                        for (int k = 0; k < mm; ++k) dot += g[k * plane + p] * s[k * plane + p];
                        for (int k = 0; k < mm; ++k) {
                          (*pg[0])[k * plane + p] += s[k * plane + p] * (g[k * plane + p] - dot);
                        }
                      }
                    });
}

Tensor sum(const Tensor& a) {
  require(a.defined(), "sum: undefined input");
  real acc = 0;
  for (real v : a.values()) acc += v;
  auto out = std::make_shared<std::vector<real>>(1, acc);

  Tape* tape = Tape::active();
  if (!tape || a.node() < 0) return Tensor({}, std::move(out));
  return tape->emit({}, out, {&a}, [](const std::vector<real>& g, Tape::ParentGrads pg) {
    if (!pg[0]) return;
    for (real& v : *pg[0]) v += g[0];
  });
}

Tensor sum_channels(const Tensor& a) {
  require(a.dims().size() == 3, "sum_channels expects a [c,h,w] tensor");
  const int c = a.dims()[0];
  const std::size_t plane = static_cast<std::size_t>(a.dims()[1]) * a.dims()[2];
  auto out = std::make_shared<std::vector<real>>(plane, 0.0);
  const real* x = a.data();
  for (int k = 0; k < c; ++k) {
    for (std::size_t p = 0; p < plane; ++p) (*out)[p] += x[k * plane + p];
  }
  std::vector<int> dims{1, a.dims()[1], a.dims()[2]};

  Tape* tape = Tape::active();
  if (!tape || a.node() < 0) return Tensor(std::move(dims), std::move(out));
  const int cc = c;
  return tape->emit(std::move(dims), out, {&a},
                    [cc, plane](const std::vector<real>& g, Tape::ParentGrads pg) {
                      if (!pg[0]) return;
                      for (int k = 0; k < cc; ++k) {
                        for (std::size_t p = 0; p < plane; ++p) (*pg[0])[k * plane + p] += g[p];
                      }
                    });
}

Tensor finite_difference_grad(const std::function<real(const Tensor&)>& f,
                              const Tensor& x, real eps) {
  require(eps > 0, "finite_difference_grad: eps must be positive");
  std::vector<real> g(x.values().size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    std::vector<real> lo = x.values(), hi = x.values();
    hi[i] += eps;
    lo[i] -= eps;
    const real fhi = f(Tensor(x.dims(), std::move(hi)));
    const real flo = f(Tensor(x.dims(), std::move(lo)));
    require(std::isfinite(fhi) && std::isfinite(flo),
            "finite_difference_grad: non-finite function value");
    g[i] = (fhi - flo) / (2 * eps);
  }
  return Tensor(x.dims(), std::move(g));
}

}  // namespace stsn
