#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pcan/errors.hpp"
#include "pcan/tensor.hpp"

namespace pcan {

using VarId = std::size_t;

template <typename T>
using ParamStore = std::map<std::string, Tensor<T>>;

// Handles to the parameters registered on a tape, keyed by name.
class ParamVars {
 public:
  void add(const std::string& name, VarId id) { vars_.emplace(name, id); }

  VarId at(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  const std::map<std::string, VarId>& all() const { return vars_; }

 private:
  std::map<std::string, VarId> vars_;
};

// Reverse-mode tape over dense tensors.
//
// Nodes are appended in evaluation order, which is a topological order of the
// graph, so the backward pass is one reverse sweep. Gradients accumulate
// additively when a value feeds several consumers. Every primitive checks its
// output for NaN/Inf and records how close its inputs came to a
// non-differentiable point (kink_margin); finite-difference checks use the
// margin to flag unreliable samples.
template <typename T>
class Tape {
 public:
  struct BackwardCtx {
    const Tensor<T>& out_grad;
    const Tensor<T>& out_value;
    std::vector<const Tensor<T>*> in_values;
    std::vector<Tensor<T>*> in_grads;  // nullptr where the input is untracked
  };
  using BackwardFn = std::function<void(const BackwardCtx&)>;

  static constexpr T no_kink() { return std::numeric_limits<T>::infinity(); }

  // ---- leaves ----

  VarId constant(Tensor<T> v) { return push("constant", std::move(v), {}, nullptr, no_kink(), false); }

  VarId input(Tensor<T> v) { return push("input", std::move(v), {}, nullptr, no_kink(), true); }

  VarId param(const std::string& name, Tensor<T> v) {
    if (params_.count(name)) throw ContractError("parameter '" + name + "' registered twice");
    VarId id = push("param", std::move(v), {}, nullptr, no_kink(), true);
    params_.emplace(name, id);
    return id;
  }

  ParamVars register_params(const ParamStore<T>& store) {
    ParamVars pv;
    for (const auto& [name, tensor] : store) pv.add(name, param(name, tensor));
    return pv;
  }

  // ---- generic extension point: record a custom differentiable op ----

  VarId apply(std::string op, Tensor<T> value, std::vector<VarId> inputs, BackwardFn backward,
              T kink_margin = no_kink()) {
    bool tracked = false;
    for (VarId in : inputs) {
      if (in >= nodes_.size()) throw ContractError("op '" + op + "': input id out of range");
      tracked = tracked || nodes_[in].tracked;
    }
    return push(std::move(op), std::move(value), std::move(inputs),
                tracked ? std::move(backward) : BackwardFn{}, kink_margin, tracked);
  }

  // ---- primitives ----

  // y = x W + b with x:(N x Ci), W:(Ci x Co), b:(Co).
  VarId linear(VarId xv, VarId wv, VarId bv) {
    const Tensor<T>& x = value(xv);
    const Tensor<T>& w = value(wv);
    const Tensor<T>& b = value(bv);
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) ||
        w.dim(1) != b.dim(0)) {
      throw DimensionError("linear: incompatible shapes x" + x.shape_str() + " W" + w.shape_str() +
                           " b" + b.shape_str());
    }
    const std::size_t n = x.dim(0), ci = x.dim(1), co = w.dim(1);
    Tensor<T> y({n, co});
    {
      // Distinct tensors never share storage, so the aliasing promise holds
      // and the inner loops vectorize.
      const T* __restrict xd = x.values().data();
      const T* __restrict wd = w.values().data();
      const T* __restrict bd = b.values().data();
      T* __restrict yd = y.values().data();
      for (std::size_t i = 0; i < n; ++i) {
        T* __restrict yi = yd + i * co;
        std::copy(bd, bd + co, yi);
        const T* xi = xd + i * ci;
        for (std::size_t k = 0; k < ci; ++k) {
          const T xik = xi[k];
          const T* __restrict wk = wd + k * co;
          for (std::size_t j = 0; j < co; ++j) yi[j] += xik * wk[j];
        }
      }
    }
    return apply("linear", std::move(y), {xv, wv, bv}, [n, ci, co](const BackwardCtx& ctx) {
      const T* __restrict g = ctx.out_grad.values().data();
      const T* __restrict xd = ctx.in_values[0]->values().data();
      const T* __restrict wd = ctx.in_values[1]->values().data();
      if (Tensor<T>* dx = ctx.in_grads[0]) {
        T* __restrict dxd = dx->values().data();
        for (std::size_t i = 0; i < n; ++i) {
          const T* __restrict gi = g + i * co;
          for (std::size_t k = 0; k < ci; ++k) {
            const T* __restrict wk = wd + k * co;
            T s{};
            for (std::size_t j = 0; j < co; ++j) s += gi[j] * wk[j];
            dxd[i * ci + k] += s;
          }
        }
      }
      if (Tensor<T>* dw = ctx.in_grads[1]) {
        T* __restrict dwd = dw->values().data();
        for (std::size_t i = 0; i < n; ++i) {
          const T* __restrict gi = g + i * co;
          const T* __restrict xi = xd + i * ci;
          for (std::size_t k = 0; k < ci; ++k) {
            const T xik = xi[k];
            T* __restrict dwk = dwd + k * co;
            for (std::size_t j = 0; j < co; ++j) dwk[j] += xik * gi[j];
          }
        }
      }
      if (Tensor<T>* db = ctx.in_grads[2]) {
        T* __restrict dbd = db->values().data();
        for (std::size_t i = 0; i < n; ++i) {
          const T* __restrict gi = g + i * co;
          for (std::size_t j = 0; j < co; ++j) dbd[j] += gi[j];
        }
      }
    });
  }

  // C = A B with A:(R x K), B:(K x C).
  VarId matmul(VarId av, VarId bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
      throw DimensionError("matmul: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
    }
    const std::size_t r = a.dim(0), k = a.dim(1), c = b.dim(1);
    Tensor<T> y({r, c});
    {
      const T* __restrict ad = a.values().data();
      const T* __restrict bd = b.values().data();
      T* __restrict yd = y.values().data();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t m = 0; m < k; ++m) {
          const T aim = ad[i * k + m];
          const T* __restrict bm = bd + m * c;
          T* __restrict yi = yd + i * c;
          for (std::size_t j = 0; j < c; ++j) yi[j] += aim * bm[j];
        }
      }
    }
    return apply("matmul", std::move(y), {av, bv}, [r, k, c](const BackwardCtx& ctx) {
      const T* __restrict g = ctx.out_grad.values().data();
      const T* __restrict ad = ctx.in_values[0]->values().data();
      const T* __restrict bd = ctx.in_values[1]->values().data();
      if (Tensor<T>* da = ctx.in_grads[0]) {
        T* __restrict dad = da->values().data();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t m = 0; m < k; ++m) {
            const T* __restrict bm = bd + m * c;
            const T* __restrict gi = g + i * c;
            T s{};
            for (std::size_t j = 0; j < c; ++j) s += gi[j] * bm[j];
            dad[i * k + m] += s;
          }
        }
      }
      if (Tensor<T>* db = ctx.in_grads[1]) {
        T* __restrict dbd = db->values().data();
        for (std::size_t i = 0; i < r; ++i) {
          const T* __restrict gi = g + i * c;
          for (std::size_t m = 0; m < k; ++m) {
            const T aim = ad[i * k + m];
            T* __restrict dbm = dbd + m * c;
            for (std::size_t j = 0; j < c; ++j) dbm[j] += aim * gi[j];
          }
        }
      }
    });
  }

  VarId add(VarId av, VarId bv) { return binary("add", av, bv, [](T a, T b) { return a + b; }, T{1}, T{1}); }
  VarId sub(VarId av, VarId bv) { return binary("sub", av, bv, [](T a, T b) { return a - b; }, T{1}, T{-1}); }

  // Elementwise product; gradients need the opposite operand.
  VarId mul(VarId av, VarId bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    if (!a.same_shape(b)) {
      throw DimensionError("mul: shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y.values()[i] = a.values()[i] * b.values()[i];
    return apply("mul", std::move(y), {av, bv}, [](const BackwardCtx& ctx) {
      const auto g = ctx.out_grad.values();
      const auto a = ctx.in_values[0]->values();
      const auto b = ctx.in_values[1]->values();
      if (Tensor<T>* da = ctx.in_grads[0]) {
        for (std::size_t i = 0; i < g.size(); ++i) da->values()[i] += g[i] * b[i];
      }
      if (Tensor<T>* db = ctx.in_grads[1]) {
        for (std::size_t i = 0; i < g.size(); ++i) db->values()[i] += g[i] * a[i];
      }
    });
  }

  // y = scale * x + shift, elementwise with constants.
  VarId affine(VarId xv, T scale, T shift) {
    const Tensor<T>& x = value(xv);
    Tensor<T> y(x.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y.values()[i] = scale * x.values()[i] + shift;
    return apply("affine", std::move(y), {xv}, [scale](const BackwardCtx& ctx) {
      if (Tensor<T>* dx = ctx.in_grads[0]) {
        for (std::size_t i = 0; i < ctx.out_grad.size(); ++i) {
          dx->values()[i] += scale * ctx.out_grad.values()[i];
        }
      }
    });
  }

  VarId relu(VarId xv) {
    const Tensor<T>& x = value(xv);
    Tensor<T> y(x.shape());
    T margin = no_kink();
    for (std::size_t i = 0; i < y.size(); ++i) {
      T v = x.values()[i];
      margin = std::min(margin, std::abs(v));
      y.values()[i] = v > T{0} ? v : T{0};
    }
    return apply("relu", std::move(y), {xv}, [](const BackwardCtx& ctx) {
      if (Tensor<T>* dx = ctx.in_grads[0]) {
        const auto x = ctx.in_values[0]->values();
        const auto g = ctx.out_grad.values();
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] > T{0}) dx->values()[i] += g[i];
        }
      }
    }, margin);
  }

  // Logistic function clamped into the open interval (0, 1) so downstream
  // score contracts hold even for saturated inputs.
  VarId sigmoid(VarId xv) {
    const Tensor<T>& x = value(xv);
    Tensor<T> y(x.shape());
    const T lo = std::numeric_limits<T>::min();
    const T hi = T{1} - std::numeric_limits<T>::epsilon() / T{2};
    for (std::size_t i = 0; i < y.size(); ++i) {
      T s = T{1} / (T{1} + std::exp(-x.values()[i]));
      y.values()[i] = std::min(hi, std::max(lo, s));
    }
    return apply("sigmoid", std::move(y), {xv}, [](const BackwardCtx& ctx) {
      if (Tensor<T>* dx = ctx.in_grads[0]) {
        const auto y = ctx.out_value.values();
        const auto g = ctx.out_grad.values();
        for (std::size_t i = 0; i < g.size(); ++i) dx->values()[i] += g[i] * y[i] * (T{1} - y[i]);
      }
    });
  }

  // Row-wise softmax with max subtraction for stability.
  VarId softmax_rows(VarId xv) {
    const Tensor<T>& x = value(xv);
    if (x.rank() != 2) throw DimensionError("softmax_rows: expected rank 2, got " + x.shape_str());
    const std::size_t n = x.dim(0), c = x.dim(1);
    Tensor<T> y({n, c});
    for (std::size_t i = 0; i < n; ++i) {
      const T* xi = x.values().data() + i * c;
      T* yi = y.values().data() + i * c;
      T m = xi[0];
      for (std::size_t j = 1; j < c; ++j) m = std::max(m, xi[j]);
      T sum{};
      for (std::size_t j = 0; j < c; ++j) {
        yi[j] = std::exp(xi[j] - m);
        sum += yi[j];
      }
      for (std::size_t j = 0; j < c; ++j) yi[j] /= sum;
    }
    return apply("softmax_rows", std::move(y), {xv}, [n, c](const BackwardCtx& ctx) {
      if (Tensor<T>* dx = ctx.in_grads[0]) {
        const T* y = ctx.out_value.values().data();
        const T* g = ctx.out_grad.values().data();
        T* d = dx->values().data();
        for (std::size_t i = 0; i < n; ++i) {
          const T* yi = y + i * c;
          const T* gi = g + i * c;
          T dot{};
          for (std::size_t j = 0; j < c; ++j) dot += yi[j] * gi[j];
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += yi[j] * (gi[j] - dot);
        }
      }
    });
  }

  // (G x K x C) -> (G x C), max over the middle axis. The gradient routes to
  // the recorded argmax; ties resolve to the first index.
  VarId set_max_pool(VarId xv) {
    const Tensor<T>& x = value(xv);
    if (x.rank() != 3) throw DimensionError("set_max_pool: expected rank 3, got " + x.shape_str());
    const std::size_t g = x.dim(0), k = x.dim(1), c = x.dim(2);
    Tensor<T> y({g, c});
    std::vector<std::size_t> arg(g * c, 0);
    T margin = no_kink();
    for (std::size_t gi = 0; gi < g; ++gi) {
      for (std::size_t ci = 0; ci < c; ++ci) {
        T best = x(gi, 0, ci);
        std::size_t bi = 0;
        for (std::size_t ki = 1; ki < k; ++ki) {
          const T v = x(gi, ki, ci);
          if (v > best) {
            best = v;
            bi = ki;
          }
        }
        // Kink distance to the best strictly-smaller entry. Bit-equal ties
        // are duplicated rows (neighbor-list padding) that move together
        // under any perturbation, so they do not make the max non-smooth.
        T runner = -no_kink();
        for (std::size_t ki = 0; ki < k; ++ki) {
          const T v = x(gi, ki, ci);
          if (v < best) runner = std::max(runner, v);
        }
        if (runner > -no_kink()) margin = std::min(margin, best - runner);
        y(gi, ci) = best;
        arg[gi * c + ci] = bi;
      }
    }
    return apply("set_max_pool", std::move(y), {xv},
                 [g, k, c, arg = std::move(arg)](const BackwardCtx& ctx) {
                   if (Tensor<T>* dx = ctx.in_grads[0]) {
                     const T* go = ctx.out_grad.values().data();
                     T* d = dx->values().data();
                     for (std::size_t gi = 0; gi < g; ++gi) {
                       for (std::size_t ci = 0; ci < c; ++ci) {
                         d[(gi * k + arg[gi * c + ci]) * c + ci] += go[gi * c + ci];
                       }
                     }
                   }
                 },
                 margin);
  }

  // Vector (n) -> scalar max/min; ties resolve to the first index.
  VarId reduce_max(VarId xv) { return reduce_extreme(xv, true); }
  VarId reduce_min(VarId xv) { return reduce_extreme(xv, false); }

  // Pack scalar variables into one vector.
  VarId stack_scalars(const std::vector<VarId>& xs) {
    if (xs.empty()) throw ArgumentError("stack_scalars: empty list");
    Tensor<T> y({xs.size()});
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const Tensor<T>& v = value(xs[i]);
      if (v.size() != 1) throw DimensionError("stack_scalars: element " + std::to_string(i) + " is not scalar");
      y(i) = v.values()[0];
    }
    return apply("stack_scalars", std::move(y), xs, [](const BackwardCtx& ctx) {
      for (std::size_t i = 0; i < ctx.in_grads.size(); ++i) {
        if (Tensor<T>* d = ctx.in_grads[i]) d->values()[0] += ctx.out_grad.values()[i];
      }
    });
  }

  VarId reshape(VarId xv, std::vector<std::size_t> shape) {
    const Tensor<T>& x = value(xv);
    Tensor<T> y(std::move(shape), std::vector<T>(x.values().begin(), x.values().end()));
    return apply("reshape", std::move(y), {xv}, [](const BackwardCtx& ctx) {
      if (Tensor<T>* dx = ctx.in_grads[0]) {
        for (std::size_t i = 0; i < ctx.out_grad.size(); ++i) {
          dx->values()[i] += ctx.out_grad.values()[i];
        }
      }
    });
  }

  // Select rows of a (R x C) tensor; the gradient scatter-adds back.
  VarId gather_rows(VarId xv, std::vector<std::size_t> idx) {
    const Tensor<T>& x = value(xv);
    if (x.rank() != 2) throw DimensionError("gather_rows: expected rank 2, got " + x.shape_str());
    if (idx.empty()) throw ArgumentError("gather_rows: empty index list");
    const std::size_t r = x.dim(0), c = x.dim(1);
    for (std::size_t i : idx) {
      if (i >= r) throw CorruptionError("gather_rows: row index " + std::to_string(i) + " out of range");
    }
    Tensor<T> y({idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(x.values().data() + idx[i] * c, c, y.values().data() + i * c);
    }
    return apply("gather_rows", std::move(y), {xv}, [c, idx = std::move(idx)](const BackwardCtx& ctx) {
      if (Tensor<T>* dx = ctx.in_grads[0]) {
        const T* g = ctx.out_grad.values().data();
        T* d = dx->values().data();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          const T* gi = g + i * c;
          T* di = d + idx[i] * c;
          for (std::size_t j = 0; j < c; ++j) di[j] += gi[j];
        }
      }
    });
  }

  VarId concat_cols(VarId av, VarId bv) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
      throw DimensionError("concat_cols: incompatible shapes " + a.shape_str() + " and " + b.shape_str());
    }
    const std::size_t r = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    Tensor<T> y({r, ca + cb});
    for (std::size_t i = 0; i < r; ++i) {
      std::copy_n(a.values().data() + i * ca, ca, y.values().data() + i * (ca + cb));
      std::copy_n(b.values().data() + i * cb, cb, y.values().data() + i * (ca + cb) + ca);
    }
    return apply("concat_cols", std::move(y), {av, bv}, [r, ca, cb](const BackwardCtx& ctx) {
      const T* g = ctx.out_grad.values().data();
      if (Tensor<T>* da = ctx.in_grads[0]) {
        T* d = da->values().data();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < ca; ++j) d[i * ca + j] += g[i * (ca + cb) + j];
        }
      }
      if (Tensor<T>* db = ctx.in_grads[1]) {
        T* d = db->values().data();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < cb; ++j) d[i * cb + j] += g[i * (ca + cb) + ca + j];
        }
      }
    });
  }

  // Multiply row i of x by s[i]; s has exactly one weight per row.
  VarId scale_rows(VarId xv, VarId sv) {
    const Tensor<T>& x = value(xv);
    const Tensor<T>& s = value(sv);
    if (x.rank() != 2 || s.size() != x.dim(0)) {
      throw DimensionError("scale_rows: x " + x.shape_str() + " needs one weight per row, got " +
                           s.shape_str());
    }
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor<T> y({r, c});
    for (std::size_t i = 0; i < r; ++i) {
      const T si = s.values()[i];
      for (std::size_t j = 0; j < c; ++j) y(i, j) = x(i, j) * si;
    }
    return apply("scale_rows", std::move(y), {xv, sv}, [r, c](const BackwardCtx& ctx) {
      const T* g = ctx.out_grad.values().data();
      const T* x = ctx.in_values[0]->values().data();
      const T* s = ctx.in_values[1]->values().data();
      if (Tensor<T>* dx = ctx.in_grads[0]) {
        T* d = dx->values().data();
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) d[i * c + j] += g[i * c + j] * s[i];
        }
      }
      if (Tensor<T>* ds = ctx.in_grads[1]) {
        T* d = ds->values().data();
        for (std::size_t i = 0; i < r; ++i) {
          T acc{};
          for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * x[i * c + j];
          d[i] += acc;
        }
      }
    });
  }

  VarId sum_all(VarId xv) {
    const Tensor<T>& x = value(xv);
    T s{};
    for (T v : x.values()) s += v;
    return apply("sum_all", Tensor<T>::scalar(s), {xv}, [](const BackwardCtx& ctx) {
      if (Tensor<T>* dx = ctx.in_grads[0]) {
        const T g = ctx.out_grad.values()[0];
        for (std::size_t i = 0; i < dx->size(); ++i) dx->values()[i] += g;
      }
    });
  }

  // Normalize each row to unit length; all-zero rows stay zero.
  VarId l2_normalize_rows(VarId xv) {
    const Tensor<T>& x = value(xv);
    if (x.rank() != 2) throw DimensionError("l2_normalize_rows: expected rank 2, got " + x.shape_str());
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor<T> y({r, c});
    std::vector<T> norms(r);
    T margin = no_kink();
    for (std::size_t i = 0; i < r; ++i) {
      T ss{};
      for (std::size_t j = 0; j < c; ++j) ss += x(i, j) * x(i, j);
      const T n = std::sqrt(ss);
      norms[i] = n;
      margin = std::min(margin, n);
      if (n > T{0}) {
        for (std::size_t j = 0; j < c; ++j) y(i, j) = x(i, j) / n;
      }
    }
    return apply("l2_normalize_rows", std::move(y), {xv},
                 [r, c, norms = std::move(norms)](const BackwardCtx& ctx) {
                   if (Tensor<T>* dx = ctx.in_grads[0]) {
                     const T* g = ctx.out_grad.values().data();
                     const T* y = ctx.out_value.values().data();
                     T* d = dx->values().data();
                     for (std::size_t i = 0; i < r; ++i) {
                       if (norms[i] <= T{0}) continue;
                       const T* gi = g + i * c;
                       const T* yi = y + i * c;
                       T dot{};
                       for (std::size_t j = 0; j < c; ++j) dot += yi[j] * gi[j];
                       for (std::size_t j = 0; j < c; ++j) {
                         d[i * c + j] += (gi[j] - yi[j] * dot) / norms[i];
                       }
                     }
                   }
                 },
                 margin);
  }

  // ---- access and backward ----

  const Tensor<T>& value(VarId id) const { return node(id).value; }

  T scalar(VarId id) const {
    const Tensor<T>& v = value(id);
    if (v.size() != 1) throw ContractError("scalar: variable has shape " + v.shape_str());
    return v.values()[0];
  }

  const Tensor<T>& grad(VarId id) {
    Node& n = node(id);
    if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  void backward(VarId out) {
    const Tensor<T>& v = value(out);
    if (v.size() != 1) throw ContractError("backward: output must be scalar, got " + v.shape_str());
    backward(out, Tensor<T>::full(v.shape(), T{1}));
  }

  void backward(VarId out, const Tensor<T>& seed) {
    if (backward_done_) throw ContractError("backward already run on this tape");
    backward_done_ = true;
    Node& last = node(out);
    if (!seed.same_shape(last.value)) {
      throw DimensionError("backward: seed shape " + seed.shape_str() + " does not match output " +
                           last.value.shape_str());
    }
    if (!last.tracked) return;  // output independent of all tracked leaves
    last.grad = seed;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.tracked || !n.backward || n.grad.size() == 0) continue;
      BackwardCtx ctx{n.grad, n.value, {}, {}};
      ctx.in_values.reserve(n.inputs.size());
      ctx.in_grads.reserve(n.inputs.size());
      for (VarId in : n.inputs) {
        ctx.in_values.push_back(&nodes_[in].value);
        ctx.in_grads.push_back(grad_dst(in));
      }
      n.backward(ctx);
    }
  }

  // d(out)/d(param) for every registered parameter; unused ones come back as
  // zeros of the right shape.
  std::map<std::string, Tensor<T>> parameter_gradients() {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, id] : params_) out.emplace(name, grad(id));
    return out;
  }

  T min_kink_margin() const { return min_margin_; }
  std::size_t node_count() const { return nodes_.size(); }
  const std::string& op_name(VarId id) const { return node(id).op; }

 private:
  struct Node {
    std::string op;
    Tensor<T> value;
    Tensor<T> grad;  // empty until first written
    std::vector<VarId> inputs;
    BackwardFn backward;
    bool tracked = false;
  };

  VarId binary(const char* op, VarId av, VarId bv, T (*fwd)(T, T), T ga, T gb) {
    const Tensor<T>& a = value(av);
    const Tensor<T>& b = value(bv);
    if (!a.same_shape(b)) {
      throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    }
    Tensor<T> y(a.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y.values()[i] = fwd(a.values()[i], b.values()[i]);
    return apply(op, std::move(y), {av, bv}, [ga, gb](const BackwardCtx& ctx) {
      const auto g = ctx.out_grad.values();
      if (Tensor<T>* da = ctx.in_grads[0]) {
        for (std::size_t i = 0; i < g.size(); ++i) da->values()[i] += ga * g[i];
      }
      if (Tensor<T>* db = ctx.in_grads[1]) {
        for (std::size_t i = 0; i < g.size(); ++i) db->values()[i] += gb * g[i];
      }
    });
  }

  VarId reduce_extreme(VarId xv, bool take_max) {
    const Tensor<T>& x = value(xv);
    if (x.rank() != 1) {
      throw DimensionError("reduce_max/min: expected rank 1, got " + x.shape_str());
    }
    const auto v = x.values();
    std::size_t arg = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
      if (take_max ? v[i] > v[arg] : v[i] < v[arg]) arg = i;
    }
    // Exact ties are either duplicated upstream values (smooth) or
    // measure-zero coincidences; only strictly distinct values measure the
    // distance to the selection kink.
    T margin = no_kink();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] != v[arg]) margin = std::min(margin, std::abs(v[i] - v[arg]));
    }
    return apply(take_max ? "reduce_max" : "reduce_min", Tensor<T>::scalar(v[arg]), {xv},
                 [arg](const BackwardCtx& ctx) {
                   if (Tensor<T>* dx = ctx.in_grads[0]) {
                     dx->values()[arg] += ctx.out_grad.values()[0];
                   }
                 },
                 margin);
  }

  Node& node(VarId id) {
    if (id >= nodes_.size()) throw ContractError("variable id out of range");
    return nodes_[id];
  }
  const Node& node(VarId id) const {
    if (id >= nodes_.size()) throw ContractError("variable id out of range");
    return nodes_[id];
  }

  Tensor<T>* grad_dst(VarId id) {
    Node& n = nodes_[id];
    if (!n.tracked) return nullptr;
    if (n.grad.size() == 0) n.grad = Tensor<T>(n.value.shape());
    return &n.grad;
  }

  VarId push(std::string op, Tensor<T> value, std::vector<VarId> inputs, BackwardFn backward,
             T kink_margin, bool tracked) {
    const auto vals = value.values();
    // Branch-free scan first (vectorizes); locate the offending index only on
    // failure. abs(x) <= max is false for NaN and +/-Inf alike.
    const T* __restrict vp = vals.data();
    const std::size_t vn = vals.size();
    bool all_finite = true;
    for (std::size_t i = 0; i < vn; ++i) {
      all_finite &= (std::abs(vp[i]) <= std::numeric_limits<T>::max());
    }
    if (!all_finite) {
      for (std::size_t i = 0; i < vn; ++i) {
        if (!std::isfinite(vp[i])) {
          throw NonFiniteError("op '" + op + "' (node " + std::to_string(nodes_.size()) +
                               ") produced a non-finite value at flat index " + std::to_string(i));
        }
      }
    }
    min_margin_ = std::min(min_margin_, kink_margin);
    nodes_.push_back(Node{std::move(op), std::move(value), Tensor<T>{}, std::move(inputs),
                          std::move(backward), tracked});
    return nodes_.size() - 1;
  }

  // Deque so values and gradients keep stable addresses while new nodes are
  // recorded — callers may hold value() references across later ops.
  std::deque<Node> nodes_;
  std::map<std::string, VarId> params_;
  T min_margin_ = std::numeric_limits<T>::infinity();
  bool backward_done_ = false;
};

// Convenience: run backward from a scalar and collect parameter gradients.
template <typename T>
std::map<std::string, Tensor<T>> grad(Tape<T>& tape, VarId scalar_output) {
  tape.backward(scalar_output);
  return tape.parameter_gradients();
}

}  // namespace pcan
