#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "pdisco/errors.hpp"
#include "pdisco/tensor.hpp"

namespace pdisco {

// Handle into a Tape.
struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// One entry of a sparse spatial linear map: out[row] += weight * in[src].
struct SpatialTap {
  int src = 0;
  double weight = 0.0;
};

// Per output location, the taps that feed it. Shared by pooling and warping,
// which are both linear resampling operators applied per channel.
using SpatialMap = std::vector<std::vector<SpatialTap>>;

// Reverse-mode tape. Values are computed eagerly; backward closures replay the
// recorded graph in reverse. Ops accumulate (+=) into input gradients, so a
// value used twice gets the sum of both paths.
class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = true) {
    return make(std::move(value), requires_grad);
  }
  Var constant(Tensor value) { return make(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_[check(v)].value; }

  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

  // Gradient accumulated by the last backward(); zeros if the node was never
  // reached (or does not require gradient).
  Tensor gradient(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.empty()) return Tensor(n.value.dims());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(Var output) {
    Node& out = nodes_[check(output)];
    if (out.value.numel() != 1) throw ConfigError("backward requires a scalar output");
    for (Node& n : nodes_) {
      if (!n.grad.empty()) std::fill(n.grad.storage().begin(), n.grad.storage().end(), 0.0);
    }
    grad_ref(output.idx)[0] = 1.0;
    for (int i = output.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this);
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    const Tensor &av = value(a), &bv = value(b);
    require_same(av, bv, "add");
    Tensor out = av;
    for (int i = 0; i < out.numel(); ++i) out[i] += bv[i];
    Var r = make(std::move(out), requires_grad(a) || requires_grad(b));
    record(r, [r, a, b](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < g.numel(); ++i) ga[i] += g[i];
      });
      t.accumulate(b, [&](Tensor& gb) {
        for (int i = 0; i < g.numel(); ++i) gb[i] += g[i];
      });
    });
    return r;
  }

  Var sub(Var a, Var b) {
    const Tensor &av = value(a), &bv = value(b);
    require_same(av, bv, "sub");
    Tensor out = av;
    for (int i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    Var r = make(std::move(out), requires_grad(a) || requires_grad(b));
    record(r, [r, a, b](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < g.numel(); ++i) ga[i] += g[i];
      });
      t.accumulate(b, [&](Tensor& gb) {
        for (int i = 0; i < g.numel(); ++i) gb[i] -= g[i];
      });
    });
    return r;
  }

  Var mul(Var a, Var b) {
    const Tensor &av = value(a), &bv = value(b);
    require_same(av, bv, "mul");
    Tensor out = av;
    for (int i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    Var r = make(std::move(out), requires_grad(a) || requires_grad(b));
    record(r, [r, a, b](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor &av2 = t.value(a), &bv2 = t.value(b);
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
      });
      t.accumulate(b, [&](Tensor& gb) {
        for (int i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
      });
    });
    return r;
  }

  Var mul_const(Var a, Tensor c) {
    const Tensor& av = value(a);
    require_same(av, c, "mul_const");
    Tensor out = av;
    for (int i = 0; i < out.numel(); ++i) out[i] *= c[i];
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, c = std::move(c)](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * c[i];
      });
    });
    return r;
  }

  Var scale(Var a, double s) {
    Tensor out = value(a);
    for (int i = 0; i < out.numel(); ++i) out[i] *= s;
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, s](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
      });
    });
    return r;
  }

  Var add_scalar(Var a, double s) {
    Tensor out = value(a);
    for (int i = 0; i < out.numel(); ++i) out[i] += s;
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < g.numel(); ++i) ga[i] += g[i];
      });
    });
    return r;
  }

  Var neg(Var a) { return scale(a, -1.0); }

  Var vlog(Var a) {
    Tensor out = value(a);
    for (int i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor& av = t.value(a);
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] / av[i];
      });
    });
    return r;
  }

  // ---- matrix products ----

  // (m,k) x (k,n) -> (m,n)
  Var matmul(Var a, Var b) {
    const Tensor &av = value(a), &bv = value(b);
    require_rank2(av, "matmul lhs");
    require_rank2(bv, "matmul rhs");
    if (av.dim(1) != bv.dim(0))
      throw ConfigError("matmul inner dims " + av.shape_string() + " vs " + bv.shape_string());
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    mm_nn(av.data(), bv.data(), out.data(), m, k, n);
    Var r = make(std::move(out), requires_grad(a) || requires_grad(b));
    record(r, [r, a, b, m, k, n](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor &av2 = t.value(a), &bv2 = t.value(b);
      t.accumulate(a, [&](Tensor& ga) {  // gA += g * B^T
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < k; ++j) {
            double s = 0.0;
            for (int p = 0; p < n; ++p) s += g[i * n + p] * bv2[j * n + p];
            ga[i * k + j] += s;
          }
      });
      t.accumulate(b, [&](Tensor& gb) {  // gB += A^T * g
        for (int p = 0; p < k; ++p)
          for (int i = 0; i < m; ++i) {
            const double s = av2[i * k + p];
            if (s == 0.0) continue;
            for (int j = 0; j < n; ++j) gb[p * n + j] += s * g[i * n + j];
          }
      });
    });
    return r;
  }

  // (m,k) x (n,k)^T -> (m,n)
  Var matmul_nt(Var a, Var b) {
    const Tensor &av = value(a), &bv = value(b);
    require_rank2(av, "matmul_nt lhs");
    require_rank2(bv, "matmul_nt rhs");
    if (av.dim(1) != bv.dim(1))
      throw ConfigError("matmul_nt inner dims " + av.shape_string() + " vs " + bv.shape_string());
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        double s = 0.0;
        const double *ar = av.data() + static_cast<std::size_t>(i) * k;
        const double *br = bv.data() + static_cast<std::size_t>(j) * k;
        for (int p = 0; p < k; ++p) s += ar[p] * br[p];
        out[i * n + j] = s;
      }
    Var r = make(std::move(out), requires_grad(a) || requires_grad(b));
    record(r, [r, a, b, m, k, n](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor &av2 = t.value(a), &bv2 = t.value(b);
      t.accumulate(a, [&](Tensor& ga) {  // gA += g * B
        mm_nn_add(g.data(), bv2.data(), ga.data(), m, n, k);
      });
      t.accumulate(b, [&](Tensor& gb) {  // gB += g^T * A
        for (int j = 0; j < n; ++j)
          for (int i = 0; i < m; ++i) {
            const double s = g[i * n + j];
            if (s == 0.0) continue;
            const double* ar = av2.data() + static_cast<std::size_t>(i) * k;
            double* gr = gb.data() + static_cast<std::size_t>(j) * k;
            for (int p = 0; p < k; ++p) gr[p] += s * ar[p];
          }
      });
    });
    return r;
  }

  // (k,m)^T x (k,n) -> (m,n)
  Var matmul_tn(Var a, Var b) {
    const Tensor &av = value(a), &bv = value(b);
    require_rank2(av, "matmul_tn lhs");
    require_rank2(bv, "matmul_tn rhs");
    if (av.dim(0) != bv.dim(0))
      throw ConfigError("matmul_tn inner dims " + av.shape_string() + " vs " + bv.shape_string());
    const int k = av.dim(0), m = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    for (int p = 0; p < k; ++p) {
      const double* ar = av.data() + static_cast<std::size_t>(p) * m;
      const double* br = bv.data() + static_cast<std::size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        const double s = ar[i];
        if (s == 0.0) continue;
        double* orow = out.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) orow[j] += s * br[j];
      }
    }
    Var r = make(std::move(out), requires_grad(a) || requires_grad(b));
    record(r, [r, a, b, k, m, n](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor &av2 = t.value(a), &bv2 = t.value(b);
      t.accumulate(a, [&](Tensor& ga) {  // gA += B * g^T  -> (k,m)
        for (int p = 0; p < k; ++p)
          for (int i = 0; i < m; ++i) {
            double s = 0.0;
            const double* br = bv2.data() + static_cast<std::size_t>(p) * n;
            const double* gr = g.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) s += br[j] * gr[j];
            ga[p * m + i] += s;
          }
      });
      t.accumulate(b, [&](Tensor& gb) {  // gB += A * g  -> (k,n)
        mm_nn_add(av2.data(), g.data(), gb.data(), k, m, n);
      });
    });
    return r;
  }

  // x:(n,din)  w:(dout,din)  b:(dout)  ->  (n,dout)
  Var linear(Var x, Var w, Var b) {
    const Tensor &xv = value(x), &wv = value(w), &bv = value(b);
    require_rank2(xv, "linear input");
    require_rank2(wv, "linear weight");
    if (xv.dim(1) != wv.dim(1) || bv.numel() != wv.dim(0))
      throw ConfigError("linear shape mismatch " + xv.shape_string() + ", " + wv.shape_string());
    const int n = xv.dim(0), din = xv.dim(1), dout = wv.dim(0);
    Tensor out({n, dout});
    for (int i = 0; i < n; ++i) {
      const double* xr = xv.data() + static_cast<std::size_t>(i) * din;
      double* orow = out.data() + static_cast<std::size_t>(i) * dout;
      for (int j = 0; j < dout; ++j) {
        const double* wr = wv.data() + static_cast<std::size_t>(j) * din;
        double s = bv[j];
        for (int p = 0; p < din; ++p) s += xr[p] * wr[p];
        orow[j] = s;
      }
    }
    Var r = make(std::move(out), requires_grad(x) || requires_grad(w) || requires_grad(b));
    record(r, [r, x, w, b, n, din, dout](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor &xv2 = t.value(x), &wv2 = t.value(w);
      t.accumulate(x, [&](Tensor& gx) {  // gx += g * W
        mm_nn_add(g.data(), wv2.data(), gx.data(), n, dout, din);
      });
      t.accumulate(w, [&](Tensor& gw) {  // gW += g^T * x
        for (int i = 0; i < n; ++i) {
          const double* gr = g.data() + static_cast<std::size_t>(i) * dout;
          const double* xr = xv2.data() + static_cast<std::size_t>(i) * din;
          for (int j = 0; j < dout; ++j) {
            const double s = gr[j];
            if (s == 0.0) continue;
            double* wrow = gw.data() + static_cast<std::size_t>(j) * din;
            for (int p = 0; p < din; ++p) wrow[p] += s * xr[p];
          }
        }
      });
      t.accumulate(b, [&](Tensor& gb) {
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < dout; ++j) gb[j] += g[i * dout + j];
      });
    });
    return r;
  }

  // ---- structure ----

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ConfigError("concat_rows of nothing");
    int cols = value(parts[0]).dim(1), rows = 0;
    bool rg = false;
    for (Var p : parts) {
      require_rank2(value(p), "concat_rows part");
      if (value(p).dim(1) != cols) throw ConfigError("concat_rows column mismatch");
      rows += value(p).dim(0);
      rg = rg || requires_grad(p);
    }
    Tensor out({rows, cols});
    int at = 0;
    for (Var p : parts) {
      const Tensor& pv = value(p);
      std::copy(pv.data(), pv.data() + pv.numel(), out.data() + static_cast<std::size_t>(at) * cols);
      at += pv.dim(0);
    }
    Var r = make(std::move(out), rg);
    record(r, [r, parts, cols](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      int at2 = 0;
      for (Var p : parts) {
        const int pr = t.value(p).dim(0);
        const double* gsrc = g.data() + static_cast<std::size_t>(at2) * cols;
        t.accumulate(p, [&](Tensor& gp) {
          for (int i = 0; i < pr * cols; ++i) gp[i] += gsrc[i];
        });
        at2 += pr;
      }
    });
    return r;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ConfigError("concat_cols of nothing");
    const int rows = value(parts[0]).dim(0);
    int cols = 0;
    bool rg = false;
    for (Var p : parts) {
      require_rank2(value(p), "concat_cols part");
      if (value(p).dim(0) != rows) throw ConfigError("concat_cols row mismatch");
      cols += value(p).dim(1);
      rg = rg || requires_grad(p);
    }
    Tensor out({rows, cols});
    int at = 0;
    for (Var p : parts) {
      const Tensor& pv = value(p);
      const int pc = pv.dim(1);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < pc; ++j) out[i * cols + at + j] = pv[i * pc + j];
      at += pc;
    }
    Var r = make(std::move(out), rg);
    record(r, [r, parts, rows, cols](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      int at2 = 0;
      for (Var p : parts) {
        const int pc = t.value(p).dim(1);
        t.accumulate(p, [&](Tensor& gp) {
          for (int i = 0; i < rows; ++i)
            for (int j = 0; j < pc; ++j) gp[i * pc + j] += g[i * cols + at2 + j];
        });
        at2 += pc;
      }
    });
    return r;
  }

  Var slice_rows(Var a, int first, int count) {
    const Tensor& av = value(a);
    require_rank2(av, "slice_rows");
    if (first < 0 || count < 0 || first + count > av.dim(0))
      throw ConfigError("slice_rows out of range");
    const int cols = av.dim(1);
    Tensor out({count, cols});
    std::copy(av.data() + static_cast<std::size_t>(first) * cols,
              av.data() + static_cast<std::size_t>(first + count) * cols, out.data());
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, first, count, cols](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        double* dst = ga.data() + static_cast<std::size_t>(first) * cols;
        for (int i = 0; i < count * cols; ++i) dst[i] += g[i];
      });
    });
    return r;
  }

  Var slice_cols(Var a, int first, int count) {
    const Tensor& av = value(a);
    require_rank2(av, "slice_cols");
    if (first < 0 || count < 0 || first + count > av.dim(1))
      throw ConfigError("slice_cols out of range");
    const int rows = av.dim(0), cols = av.dim(1);
    Tensor out({rows, count});
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < count; ++j) out[i * count + j] = av[i * cols + first + j];
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, first, count, rows, cols](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < count; ++j) ga[i * cols + first + j] += g[i * count + j];
      });
    });
    return r;
  }

  Var pick_row(Var a, int row) {
    const Tensor& av = value(a);
    require_rank2(av, "pick_row");
    if (row < 0 || row >= av.dim(0)) throw ConfigError("pick_row out of range");
    const int cols = av.dim(1);
    Tensor out({cols});
    std::copy(av.data() + static_cast<std::size_t>(row) * cols,
              av.data() + static_cast<std::size_t>(row + 1) * cols, out.data());
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, row, cols](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        double* dst = ga.data() + static_cast<std::size_t>(row) * cols;
        for (int j = 0; j < cols; ++j) dst[j] += g[j];
      });
    });
    return r;
  }

  Var pick(Var a, int index) {
    const Tensor& av = value(a);
    if (index < 0 || index >= av.numel()) throw ConfigError("pick out of range");
    Tensor out({1});
    out[0] = av[index];
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, index](Tape& t) {
      const double g = t.nodes_[r.idx].grad[0];
      t.accumulate(a, [&](Tensor& ga) { ga[index] += g; });
    });
    return r;
  }

  // ---- reductions ----

  Var sum_all(Var a) {
    Tensor out({1});
    out[0] = value(a).sum();
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a](Tape& t) {
      const double g = t.nodes_[r.idx].grad[0];
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < ga.numel(); ++i) ga[i] += g;
      });
    });
    return r;
  }

  Var mean_rows(Var a) {
    const Tensor& av = value(a);
    require_rank2(av, "mean_rows");
    const int n = av.dim(0), m = av.dim(1);
    Tensor out({m});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) out[j] += av[i * m + j];
    for (int j = 0; j < m; ++j) out[j] /= n;
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, n, m](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) ga[i * m + j] += g[j] / n;
      });
    });
    return r;
  }

  // max over all entries; ties resolved to the lowest flat index
  Var max_all(Var a) {
    const Tensor& av = value(a);
    if (av.numel() == 0) throw ConfigError("max_all of empty tensor");
    int arg = 0;
    for (int i = 1; i < av.numel(); ++i)
      if (av[i] > av[arg]) arg = i;
    Tensor out({1});
    out[0] = av[arg];
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, arg](Tape& t) {
      const double g = t.nodes_[r.idx].grad[0];
      t.accumulate(a, [&](Tensor& ga) { ga[arg] += g; });
    });
    return r;
  }

  Var logsumexp(Var a) {
    const Tensor& av = value(a);
    double m = av[0];
    for (int i = 1; i < av.numel(); ++i) m = std::max(m, av[i]);
    double s = 0.0;
    for (int i = 0; i < av.numel(); ++i) s += std::exp(av[i] - m);
    Tensor out({1});
    out[0] = m + std::log(s);
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, m, s](Tape& t) {
      const double g = t.nodes_[r.idx].grad[0];
      const Tensor& av2 = t.value(a);
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < ga.numel(); ++i) ga[i] += g * std::exp(av2[i] - m) / s;
      });
    });
    return r;
  }

  // ---- nonlinearities & normalization ----

  Var row_softmax(Var a) {
    const Tensor& av = value(a);
    require_rank2(av, "row_softmax");
    const int n = av.dim(0), m = av.dim(1);
    Tensor out({n, m});
    for (int i = 0; i < n; ++i) {
      const double* xr = av.data() + static_cast<std::size_t>(i) * m;
      double* orow = out.data() + static_cast<std::size_t>(i) * m;
      double mx = xr[0];
      for (int j = 1; j < m; ++j) mx = std::max(mx, xr[j]);
      double s = 0.0;
      for (int j = 0; j < m; ++j) s += (orow[j] = std::exp(xr[j] - mx));
      for (int j = 0; j < m; ++j) orow[j] /= s;
    }
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, n, m](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor& p = t.nodes_[r.idx].value;
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < n; ++i) {
          const double* gr = g.data() + static_cast<std::size_t>(i) * m;
          const double* pr = p.data() + static_cast<std::size_t>(i) * m;
          double dot = 0.0;
          for (int j = 0; j < m; ++j) dot += gr[j] * pr[j];
          double* garow = ga.data() + static_cast<std::size_t>(i) * m;
          for (int j = 0; j < m; ++j) garow[j] += pr[j] * (gr[j] - dot);
        }
      });
    });
    return r;
  }

  Var gelu(Var a) {
    const Tensor& av = value(a);
    Tensor out = av;
    for (int i = 0; i < out.numel(); ++i)
      out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * M_SQRT1_2));
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor& av2 = t.value(a);
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < g.numel(); ++i) {
          const double x = av2[i];
          const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
          const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
          ga[i] += g[i] * (cdf + x * pdf);
        }
      });
    });
    return r;
  }

  // per-row layer norm with elementwise affine; gamma/beta have length = cols
  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
    const Tensor &xv = value(x), &gv = value(gamma), &bv = value(beta);
    require_rank2(xv, "layer_norm_rows");
    const int n = xv.dim(0), m = xv.dim(1);
    if (gv.numel() != m || bv.numel() != m) throw ConfigError("layer_norm affine size mismatch");
    Tensor out({n, m});
    Tensor xhat({n, m});
    Tensor inv_sigma({n});
    for (int i = 0; i < n; ++i) {
      const double* xr = xv.data() + static_cast<std::size_t>(i) * m;
      double mu = 0.0;
      for (int j = 0; j < m; ++j) mu += xr[j];
      mu /= m;
      double var = 0.0;
      for (int j = 0; j < m; ++j) var += (xr[j] - mu) * (xr[j] - mu);
      var /= m;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[i] = is;
      for (int j = 0; j < m; ++j) {
        const double h = (xr[j] - mu) * is;
        xhat[i * m + j] = h;
        out[i * m + j] = h * gv[j] + bv[j];
      }
    }
    Var r = make(std::move(out), requires_grad(x) || requires_grad(gamma) || requires_grad(beta));
    record(r, [r, x, gamma, beta, n, m, xhat = std::move(xhat),
               inv_sigma = std::move(inv_sigma)](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor& gv2 = t.value(gamma);
      t.accumulate(gamma, [&](Tensor& gg) {
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) gg[j] += g[i * m + j] * xhat[i * m + j];
      });
      t.accumulate(beta, [&](Tensor& gb) {
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) gb[j] += g[i * m + j];
      });
      t.accumulate(x, [&](Tensor& gx) {
        for (int i = 0; i < n; ++i) {
          double mean_u = 0.0, mean_uh = 0.0;
          for (int j = 0; j < m; ++j) {
            const double u = g[i * m + j] * gv2[j];
            mean_u += u;
            mean_uh += u * xhat[i * m + j];
          }
          mean_u /= m;
          mean_uh /= m;
          for (int j = 0; j < m; ++j) {
            const double u = g[i * m + j] * gv2[j];
            gx[i * m + j] += inv_sigma[i] * (u - mean_u - xhat[i * m + j] * mean_uh);
          }
        }
      });
    });
    return r;
  }

  // standardize over every entry of the tensor jointly (one group)
  Var normalize_all(Var x, double eps) {
    const Tensor& xv = value(x);
    const int n = xv.numel();
    if (n == 0) throw ConfigError("normalize_all of empty tensor");
    double mu = xv.sum() / n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) var += (xv[i] - mu) * (xv[i] - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    Tensor out = xv;
    for (int i = 0; i < n; ++i) out[i] = (xv[i] - mu) * is;
    Var r = make(std::move(out), requires_grad(x));
    record(r, [r, x, n, is](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor& h = t.nodes_[r.idx].value;  // xhat
      t.accumulate(x, [&](Tensor& gx) {
        double mean_g = 0.0, mean_gh = 0.0;
        for (int i = 0; i < n; ++i) {
          mean_g += g[i];
          mean_gh += g[i] * h[i];
        }
        mean_g /= n;
        mean_gh /= n;
        for (int i = 0; i < n; ++i) gx[i] += is * (g[i] - mean_g - h[i] * mean_gh);
      });
    });
    return r;
  }

  // ---- domain kernels ----

  // feats:(L,d)  protos:(k,d)  ->  (L,k) with out[l,k] = -||feats_l - protos_k||^2
  Var squared_distance_logits(Var feats, Var protos) {
    const Tensor &fv = value(feats), &pv = value(protos);
    require_rank2(fv, "distance logits feats");
    require_rank2(pv, "distance logits protos");
    if (fv.dim(1) != pv.dim(1))
      throw ConfigError("feature dim " + std::to_string(fv.dim(1)) +
                        " does not match prototype dim " + std::to_string(pv.dim(1)));
    const int L = fv.dim(0), d = fv.dim(1), k = pv.dim(0);
    Tensor out({L, k});
    for (int l = 0; l < L; ++l) {
      const double* fr = fv.data() + static_cast<std::size_t>(l) * d;
      for (int c = 0; c < k; ++c) {
        const double* pr = pv.data() + static_cast<std::size_t>(c) * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
          const double diff = fr[j] - pr[j];
          s += diff * diff;
        }
        out[l * k + c] = -s;
      }
    }
    Var r = make(std::move(out), requires_grad(feats) || requires_grad(protos));
    record(r, [r, feats, protos, L, d, k](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      const Tensor &fv2 = t.value(feats), &pv2 = t.value(protos);
      t.accumulate(feats, [&](Tensor& gf) {
        for (int l = 0; l < L; ++l)
          for (int c = 0; c < k; ++c) {
            const double gv = g[l * k + c];
            if (gv == 0.0) continue;
            for (int j = 0; j < d; ++j)
              gf[l * d + j] += gv * (-2.0) * (fv2[l * d + j] - pv2[c * d + j]);
          }
      });
      t.accumulate(protos, [&](Tensor& gp) {
        for (int l = 0; l < L; ++l)
          for (int c = 0; c < k; ++c) {
            const double gv = g[l * k + c];
            if (gv == 0.0) continue;
            for (int j = 0; j < d; ++j)
              gp[c * d + j] += gv * 2.0 * (fv2[l * d + j] - pv2[c * d + j]);
          }
      });
    });
    return r;
  }

  // cosine similarity of two same-shaped tensors viewed as flat vectors;
  // denominator gets +eps so zero-norm inputs stay finite
  Var cosine(Var a, Var b, double eps) {
    const Tensor &av = value(a), &bv = value(b);
    require_same(av, bv, "cosine");
    const int n = av.numel();
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (int i = 0; i < n; ++i) {
      dot += av[i] * bv[i];
      na2 += av[i] * av[i];
      nb2 += bv[i] * bv[i];
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    const double den = na * nb + eps;
    Tensor out({1});
    out[0] = dot / den;
    Var r = make(std::move(out), requires_grad(a) || requires_grad(b));
    record(r, [r, a, b, n, dot, na, nb, den](Tape& t) {
      const double g = t.nodes_[r.idx].grad[0];
      const Tensor &av2 = t.value(a), &bv2 = t.value(b);
      const double ina = na > 0.0 ? 1.0 / na : 0.0;
      const double inb = nb > 0.0 ? 1.0 / nb : 0.0;
      t.accumulate(a, [&](Tensor& ga) {
        const double c1 = g / den;
        const double c2 = g * dot * nb * ina / (den * den);
        for (int i = 0; i < n; ++i) ga[i] += c1 * bv2[i] - c2 * av2[i];
      });
      t.accumulate(b, [&](Tensor& gb) {
        const double c1 = g / den;
        const double c2 = g * dot * na * inb / (den * den);
        for (int i = 0; i < n; ++i) gb[i] += c1 * av2[i] - c2 * bv2[i];
      });
    });
    return r;
  }

  // sum of x*ln(x) with the 0*ln(0) = 0 convention
  Var entropy_sum(Var a) {
    const Tensor& av = value(a);
    double s = 0.0;
    for (int i = 0; i < av.numel(); ++i)
      if (av[i] > 0.0) s += av[i] * std::log(av[i]);
    Tensor out({1});
    out[0] = s;
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a](Tape& t) {
      const double g = t.nodes_[r.idx].grad[0];
      const Tensor& av2 = t.value(a);
      t.accumulate(a, [&](Tensor& ga) {
        for (int i = 0; i < ga.numel(); ++i)
          if (av2[i] > 0.0) ga[i] += g * (std::log(av2[i]) + 1.0);
      });
    });
    return r;
  }

  // anisotropic L1 total variation of location-major maps a:(h*w, c), forward
  // differences, replicate boundary, normalized by h*w
  Var tv_penalty(Var a, int h, int w) {
    const Tensor& av = value(a);
    require_rank2(av, "tv_penalty");
    if (av.dim(0) != h * w) throw ConfigError("tv_penalty grid mismatch");
    const int c = av.dim(1);
    const double inv = 1.0 / (static_cast<double>(h) * w);
    double s = 0.0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j)
        for (int ch = 0; ch < c; ++ch) {
          const double v = av[(i * w + j) * c + ch];
          if (i + 1 < h) s += std::fabs(av[((i + 1) * w + j) * c + ch] - v);
          if (j + 1 < w) s += std::fabs(av[(i * w + j + 1) * c + ch] - v);
        }
    Tensor out({1});
    out[0] = s * inv;
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, h, w, c, inv](Tape& t) {
      const double g = t.nodes_[r.idx].grad[0] * inv;
      const Tensor& av2 = t.value(a);
      t.accumulate(a, [&](Tensor& ga) {
        auto sgn = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
        for (int i = 0; i < h; ++i)
          for (int j = 0; j < w; ++j)
            for (int ch = 0; ch < c; ++ch) {
              const int at = (i * w + j) * c + ch;
              if (i + 1 < h) {
                const int up = ((i + 1) * w + j) * c + ch;
                const double sg = sgn(av2[up] - av2[at]);
                ga[up] += g * sg;
                ga[at] -= g * sg;
              }
              if (j + 1 < w) {
                const int rt = (i * w + j + 1) * c + ch;
                const double sg = sgn(av2[rt] - av2[at]);
                ga[rt] += g * sg;
                ga[at] -= g * sg;
              }
            }
      });
    });
    return r;
  }

  // fixed sparse linear resampling applied per channel: in (L,c) -> out (|map|,c)
  Var spatial_linear(Var a, SpatialMap map) {
    const Tensor& av = value(a);
    require_rank2(av, "spatial_linear");
    const int c = av.dim(1);
    const int L_out = static_cast<int>(map.size());
    Tensor out({L_out, c});
    for (int o = 0; o < L_out; ++o) {
      double* orow = out.data() + static_cast<std::size_t>(o) * c;
      for (const SpatialTap& tap : map[o]) {
        const double* src = av.data() + static_cast<std::size_t>(tap.src) * c;
        for (int j = 0; j < c; ++j) orow[j] += tap.weight * src[j];
      }
    }
    Var r = make(std::move(out), requires_grad(a));
    record(r, [r, a, map = std::move(map), c, L_out](Tape& t) {
      const Tensor& g = t.nodes_[r.idx].grad;
      t.accumulate(a, [&](Tensor& ga) {
        for (int o = 0; o < L_out; ++o) {
          const double* grow = g.data() + static_cast<std::size_t>(o) * c;
          for (const SpatialTap& tap : map[o]) {
            double* dst = ga.data() + static_cast<std::size_t>(tap.src) * c;
            for (int j = 0; j < c; ++j) dst[j] += tap.weight * grow[j];
          }
        }
      });
    });
    return r;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backward;
  };

  std::vector<Node> nodes_;

  int check(Var v) const {
    if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
      throw ConfigError("invalid tape handle");
    return v.idx;
  }

  Var make(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Tensor(), requires_grad, nullptr});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  void record(Var r, F&& fn) {
    if (nodes_[r.idx].requires_grad) nodes_[r.idx].backward = std::forward<F>(fn);
  }

  Tensor& grad_ref(int idx) {
    Node& n = nodes_[idx];
    if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor(n.value.dims());
    return n.grad;
  }

  // Runs fn on the gradient buffer of v, but only if v wants gradients.
  template <typename F>
  void accumulate(Var v, F&& fn) {
    if (!nodes_[v.idx].requires_grad) return;
    fn(grad_ref(v.idx));
  }

  static void require_same(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
      throw ConfigError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                        b.shape_string());
  }

  static void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) throw ConfigError(std::string(what) + ": expected rank-2 tensor");
  }

  // C(m,n) = A(m,k) * B(k,n), overwrite
  static void mm_nn(const double* a, const double* b, double* out, int m, int k, int n) {
    std::fill(out, out + static_cast<std::size_t>(m) * n, 0.0);
    mm_nn_add(a, b, out, m, k, n);
  }

  // C(m,n) += A(m,k) * B(k,n)
  static void mm_nn_add(const double* a, const double* b, double* out, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
      const double* ar = a + static_cast<std::size_t>(i) * k;
      double* orow = out + static_cast<std::size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const double s = ar[p];
        if (s == 0.0) continue;
        const double* br = b + static_cast<std::size_t>(p) * n;
        for (int j = 0; j < n; ++j) orow[j] += s * br[j];
      }
    }
  }
};

}  // namespace pdisco
