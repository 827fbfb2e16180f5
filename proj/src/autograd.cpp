#include "prerec/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

#include "prerec/error.hpp"
#include "prerec/kernels.hpp"

namespace prerec::ag {

void Param::zero_grad() {
  if (grad.rows != value.rows || grad.cols != value.cols) {
    grad = Matrix(value.rows, value.cols);
  } else {
    std::fill(grad.data.begin(), grad.data.end(), 0.0);
  }
}

const Matrix& Var::value() const { return tape_->value(id_); }

Matrix& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.rows != n.value.rows || n.grad.cols != n.value.cols) n.grad = Matrix(n.value.rows, n.value.cols);
  return n.grad;
}

Var Tape::push(Matrix value, Backward back, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_ && requires_grad;
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix m) { return push(std::move(m), nullptr, false); }

Var Tape::param(Param& p) {
  Param* target = &p;
  return push(
      p.value,
      [target](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        kernels::axpy(1.0, g.data.data(), target->grad.data.data(), g.size());
      },
      true);
}

Var Tape::gather_param_rows(Param& p, std::span<const std::size_t> rows) {
  const std::size_t cols = p.value.cols;
  Matrix out(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= p.value.rows) throw DataError("row index out of range for parameter " + p.name);
    std::copy_n(p.value.data.data() + rows[r] * cols, cols, out.data.data() + r * cols);
  }
  Param* target = &p;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return push(
      std::move(out),
      [target, idx = std::move(idx), cols](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        for (std::size_t r = 0; r < idx.size(); ++r) {
          kernels::axpy(1.0, g.data.data() + r * cols, target->grad.data.data() + idx[r] * cols, cols);
        }
      },
      true);
}

void Tape::backward(Var loss) {
  if (!record_) throw ConfigError("backward() on a non-recording tape");
  if (loss.tape() != this || loss.rows() != 1 || loss.cols() != 1) throw ConfigError("backward() needs a 1x1 loss");
  if (!nodes_[loss.id()].requires_grad) return;
  grad(loss.id()).data[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.back || n.grad.empty()) continue;
    n.back(*this, i);
  }
}

namespace {

[[noreturn]] void shape_error(const char* op, const Matrix& a, const Matrix& b) {
  std::ostringstream os;
  os << op << ": shape mismatch " << a.rows << "x" << a.cols << " vs " << b.rows << "x" << b.cols;
  throw DataError(os.str());
}

Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape()) throw ConfigError("operands recorded on different tapes");
  return *a.tape();
}

bool needs(Tape& t, Var v) { return t.requires_grad(v.id()); }

const double* ptr(const Matrix& m, std::size_t r, std::size_t c) { return m.data.data() + r * m.cols + c; }
double* ptr(Matrix& m, std::size_t r, std::size_t c) { return m.data.data() + r * m.cols + c; }

// Unary elementwise op whose derivative is a function of (input, output).
template <typename F, typename D>
Var unary(Var a, F f, D dfdx) {
  Tape& t = *a.tape();
  const Matrix& x = a.value();
  Matrix y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
  return t.push(
      std::move(y),
      [a, dfdx](Tape& tp, std::size_t self) {
        const Matrix& g = tp.grad(self);
        const Matrix& xin = tp.value(a.id());
        const Matrix& yout = tp.value(self);
        Matrix& ga = tp.grad(a.id());
        for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g.data[i] * dfdx(xin.data[i], yout.data[i]);
      },
      needs(t, a));
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols != B.rows) shape_error("matmul", A, B);
  Matrix C(A.rows, B.cols);
  for (std::size_t i = 0; i < A.rows; ++i) {
    double* crow = C.data.data() + i * C.cols;
    for (std::size_t k = 0; k < A.cols; ++k) {
      const double aik = A(i, k);
      if (aik != 0.0) kernels::axpy(aik, B.data.data() + k * B.cols, crow, B.cols);
    }
  }
  return t.push(
      std::move(C),
      [a, b](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        const Matrix& A = tp.value(a.id());
        const Matrix& B = tp.value(b.id());
        if (tp.requires_grad(a.id())) {
          // dA = G * B^T
          Matrix& GA = tp.grad(a.id());
          std::vector<double> tmp(B.rows);
          for (std::size_t i = 0; i < A.rows; ++i) {
            kernels::gemv(B.data.data(), B.rows, B.cols, G.data.data() + i * G.cols, tmp.data());
            kernels::axpy(1.0, tmp.data(), GA.data.data() + i * GA.cols, tmp.size());
          }
        }
        if (tp.requires_grad(b.id())) {
          // dB = A^T * G
          Matrix& GB = tp.grad(b.id());
          for (std::size_t i = 0; i < A.rows; ++i) {
            for (std::size_t k = 0; k < A.cols; ++k) {
              const double aik = A(i, k);
              if (aik != 0.0) kernels::axpy(aik, G.data.data() + i * G.cols, GB.data.data() + k * GB.cols, GB.cols);
            }
          }
        }
      },
      needs(t, a) || needs(t, b));
}

Var matmul_bt(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.cols != B.cols) shape_error("matmul_bt", A, B);
  Matrix C(A.rows, B.rows);
  for (std::size_t i = 0; i < A.rows; ++i) {
    kernels::gemv(B.data.data(), B.rows, B.cols, A.data.data() + i * A.cols, C.data.data() + i * C.cols);
  }
  return t.push(
      std::move(C),
      [a, b](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        const Matrix& A = tp.value(a.id());
        const Matrix& B = tp.value(b.id());
        const bool ga = tp.requires_grad(a.id());
        const bool gb = tp.requires_grad(b.id());
        Matrix* GA = ga ? &tp.grad(a.id()) : nullptr;
        Matrix* GB = gb ? &tp.grad(b.id()) : nullptr;
        for (std::size_t i = 0; i < A.rows; ++i) {
          for (std::size_t j = 0; j < B.rows; ++j) {
            const double g = G(i, j);
            if (g == 0.0) continue;
            if (ga) kernels::axpy(g, B.data.data() + j * B.cols, GA->data.data() + i * A.cols, A.cols);
            if (gb) kernels::axpy(g, A.data.data() + i * A.cols, GB->data.data() + j * B.cols, B.cols);
          }
        }
      },
      needs(t, a) || needs(t, b));
}

namespace {

Var binary_same_shape(Var a, Var b, const char* op, double sign_b) {
  Tape& t = same_tape(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.rows != B.rows || A.cols != B.cols) shape_error(op, A, B);
  Matrix C = A;
  kernels::axpy(sign_b, B.data.data(), C.data.data(), C.size());
  return t.push(
      std::move(C),
      [a, b, sign_b](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        if (tp.requires_grad(a.id())) kernels::axpy(1.0, G.data.data(), tp.grad(a.id()).data.data(), G.size());
        if (tp.requires_grad(b.id())) kernels::axpy(sign_b, G.data.data(), tp.grad(b.id()).data.data(), G.size());
      },
      needs(t, a) || needs(t, b));
}

}  // namespace

Var add(Var a, Var b) { return binary_same_shape(a, b, "add", 1.0); }
Var sub(Var a, Var b) { return binary_same_shape(a, b, "sub", -1.0); }

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  const Matrix& A = a.value();
  const Matrix& B = b.value();
  if (A.rows != B.rows || A.cols != B.cols) shape_error("mul", A, B);
  Matrix C(A.rows, A.cols);
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] = A.data[i] * B.data[i];
  return t.push(
      std::move(C),
      [a, b](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        const Matrix& A = tp.value(a.id());
        const Matrix& B = tp.value(b.id());
        if (tp.requires_grad(a.id())) {
          Matrix& GA = tp.grad(a.id());
          for (std::size_t i = 0; i < G.size(); ++i) GA.data[i] += G.data[i] * B.data[i];
        }
        if (tp.requires_grad(b.id())) {
          Matrix& GB = tp.grad(b.id());
          for (std::size_t i = 0; i < G.size(); ++i) GB.data[i] += G.data[i] * A.data[i];
        }
      },
      needs(t, a) || needs(t, b));
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  const Matrix& A = a.value();
  const Matrix& R = row.value();
  if (R.rows != 1 || R.cols != A.cols) shape_error("add_row", A, R);
  Matrix C = A;
  for (std::size_t i = 0; i < C.rows; ++i) kernels::axpy(1.0, R.data.data(), C.data.data() + i * C.cols, C.cols);
  return t.push(
      std::move(C),
      [a, row](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        if (tp.requires_grad(a.id())) kernels::axpy(1.0, G.data.data(), tp.grad(a.id()).data.data(), G.size());
        if (tp.requires_grad(row.id())) {
          Matrix& GR = tp.grad(row.id());
          for (std::size_t i = 0; i < G.rows; ++i) kernels::axpy(1.0, G.data.data() + i * G.cols, GR.data.data(), G.cols);
        }
      },
      needs(t, a) || needs(t, row));
}

Var add_scalar(Var a, Var s) {
  Tape& t = same_tape(a, s);
  const Matrix& S = s.value();
  if (S.rows != 1 || S.cols != 1) shape_error("add_scalar", a.value(), S);
  Matrix C = a.value();
  const double v = S.data[0];
  for (double& x : C.data) x += v;
  return t.push(
      std::move(C),
      [a, s](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        if (tp.requires_grad(a.id())) kernels::axpy(1.0, G.data.data(), tp.grad(a.id()).data.data(), G.size());
        if (tp.requires_grad(s.id())) {
          double acc = 0.0;
          for (double g : G.data) acc += g;
          tp.grad(s.id()).data[0] += acc;
        }
      },
      needs(t, a) || needs(t, s));
}

Var affine(Var a, double alpha, double beta) {
  return unary(
      a, [alpha, beta](double x) { return alpha * x + beta; }, [alpha](double, double) { return alpha; });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Var gelu(Var a) {
  // tanh approximation
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  return unary(
      a,
      [](double x) { return 0.5 * x * (1.0 + std::tanh(c * (x + k * x * x * x))); },
      [](double x, double) {
        const double u = c * (x + k * x * x * x);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * k * x * x);
        return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
      });
}

Var layer_norm(Var a, Var gamma, Var beta, double eps) {
  Tape& t = same_tape(a, gamma);
  same_tape(a, beta);
  const Matrix& X = a.value();
  const Matrix& Gm = gamma.value();
  const Matrix& Bt = beta.value();
  if (Gm.rows != 1 || Gm.cols != X.cols) shape_error("layer_norm(gamma)", X, Gm);
  if (Bt.rows != 1 || Bt.cols != X.cols) shape_error("layer_norm(beta)", X, Bt);
  const std::size_t n = X.cols;
  Matrix Y(X.rows, n);
  // Normalized activations and inverse std are kept for the backward pass.
  auto xhat = std::make_shared<Matrix>(X.rows, n);
  auto inv_std = std::make_shared<std::vector<double>>(X.rows);
  for (std::size_t r = 0; r < X.rows; ++r) {
    const double* x = X.data.data() + r * n;
    double mean = 0.0;
    for (std::size_t c = 0; c < n; ++c) mean += x[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (x[c] - mean) * (x[c] - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < n; ++c) {
      const double h = (x[c] - mean) * is;
      (*xhat)(r, c) = h;
      Y(r, c) = h * Gm.data[c] + Bt.data[c];
    }
  }
  return t.push(
      std::move(Y),
      [a, gamma, beta, xhat, inv_std, n](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        const Matrix& Gm = tp.value(gamma.id());
        if (tp.requires_grad(gamma.id())) {
          Matrix& GG = tp.grad(gamma.id());
          for (std::size_t r = 0; r < G.rows; ++r)
            for (std::size_t c = 0; c < n; ++c) GG.data[c] += G(r, c) * (*xhat)(r, c);
        }
        if (tp.requires_grad(beta.id())) {
          Matrix& GB = tp.grad(beta.id());
          for (std::size_t r = 0; r < G.rows; ++r) kernels::axpy(1.0, G.data.data() + r * n, GB.data.data(), n);
        }
        if (tp.requires_grad(a.id())) {
          Matrix& GA = tp.grad(a.id());
          std::vector<double> dh(n);
          for (std::size_t r = 0; r < G.rows; ++r) {
            double mean_dh = 0.0;
            double mean_dh_h = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              dh[c] = G(r, c) * Gm.data[c];
              mean_dh += dh[c];
              mean_dh_h += dh[c] * (*xhat)(r, c);
            }
            mean_dh /= static_cast<double>(n);
            mean_dh_h /= static_cast<double>(n);
            const double is = (*inv_std)[r];
            for (std::size_t c = 0; c < n; ++c) GA(r, c) += is * (dh[c] - mean_dh - (*xhat)(r, c) * mean_dh_h);
          }
        }
      },
      needs(t, a) || needs(t, gamma) || needs(t, beta));
}

Var causal_softmax(Var s, double scale) {
  Tape& t = *s.tape();
  const Matrix& S = s.value();
  if (S.rows != S.cols) shape_error("causal_softmax", S, S);
  const std::size_t n = S.rows;
  Matrix P(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, scale * S(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      P(i, j) = std::exp(scale * S(i, j) - mx);
      z += P(i, j);
    }
    for (std::size_t j = 0; j <= i; ++j) P(i, j) /= z;
  }
  return t.push(
      std::move(P),
      [s, scale](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        const Matrix& P = tp.value(self);
        Matrix& GS = tp.grad(s.id());
        for (std::size_t i = 0; i < P.rows; ++i) {
          double dotp = 0.0;
          for (std::size_t j = 0; j <= i; ++j) dotp += P(i, j) * G(i, j);
          for (std::size_t j = 0; j <= i; ++j) GS(i, j) += scale * P(i, j) * (G(i, j) - dotp);
        }
      },
      needs(t, s));
}

Var segmented_causal_attention(Var q, Var k, Var v, std::span<const std::size_t> starts, std::size_t heads) {
  Tape& t = same_tape(q, k);
  same_tape(q, v);
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  if (Q.rows != K.rows || Q.cols != K.cols) shape_error("attention", Q, K);
  if (Q.rows != V.rows || Q.cols != V.cols) shape_error("attention", Q, V);
  if (heads == 0 || Q.cols % heads != 0) throw ConfigError("attention: heads must divide the width");
  if (starts.empty() || starts.front() != 0 || starts.back() != Q.rows) throw DataError("attention: bad segments");
  for (std::size_t s = 1; s < starts.size(); ++s)
    if (starts[s] < starts[s - 1]) throw DataError("attention: segments must be ordered");
  const std::size_t width = Q.cols;
  const std::size_t dh = width / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Attention weights per (segment, head), lower triangles packed row by row.
  auto probs = std::make_shared<std::vector<double>>();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (std::size_t s = 0; s + 1 < starts.size(); ++s) {
    const std::size_t n = starts[s + 1] - starts[s];
    offsets.push_back(total);
    total += heads * n * (n + 1) / 2;
  }
  probs->resize(total);

  Matrix O(Q.rows, width);
  for (std::size_t s = 0; s + 1 < starts.size(); ++s) {
    const std::size_t a = starts[s];
    const std::size_t n = starts[s + 1] - a;
    std::size_t p = offsets[s];
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < n; ++i) {
        double* pr = probs->data() + p;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          pr[j] = scale * kernels::dot(ptr(Q, a + i, c0), ptr(K, a + j, c0), dh);
          mx = std::max(mx, pr[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          pr[j] = std::exp(pr[j] - mx);
          z += pr[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
          pr[j] /= z;
          kernels::axpy(pr[j], ptr(V, a + j, c0), ptr(O, a + i, c0), dh);
        }
        p += i + 1;
      }
    }
  }
  std::vector<std::size_t> seg(starts.begin(), starts.end());
  return t.push(
      std::move(O),
      [q, k, v, seg = std::move(seg), offsets = std::move(offsets), probs, heads, dh, scale](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        const Matrix& Q = tp.value(q.id());
        const Matrix& K = tp.value(k.id());
        const Matrix& V = tp.value(v.id());
        const bool gq = tp.requires_grad(q.id());
        const bool gk = tp.requires_grad(k.id());
        const bool gv = tp.requires_grad(v.id());
        Matrix* GQ = gq ? &tp.grad(q.id()) : nullptr;
        Matrix* GK = gk ? &tp.grad(k.id()) : nullptr;
        Matrix* GV = gv ? &tp.grad(v.id()) : nullptr;
        std::vector<double> dp;
        for (std::size_t s = 0; s + 1 < seg.size(); ++s) {
          const std::size_t a = seg[s];
          const std::size_t n = seg[s + 1] - a;
          std::size_t p = offsets[s];
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < n; ++i) {
              const double* pr = probs->data() + p;
              const double* gi = ptr(G, a + i, c0);
              dp.assign(i + 1, 0.0);
              double rowdot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                dp[j] = kernels::dot(gi, ptr(V, a + j, c0), dh);
                rowdot += dp[j] * pr[j];
                if (gv) kernels::axpy(pr[j], gi, ptr(*GV, a + j, c0), dh);
              }
              for (std::size_t j = 0; j <= i; ++j) {
                const double ds = pr[j] * (dp[j] - rowdot) * scale;
                if (gq) kernels::axpy(ds, ptr(K, a + j, c0), ptr(*GQ, a + i, c0), dh);
                if (gk) kernels::axpy(ds, ptr(Q, a + i, c0), ptr(*GK, a + j, c0), dh);
              }
              p += i + 1;
            }
          }
        }
      },
      needs(t, q) || needs(t, k) || needs(t, v));
}

Var col_slice(Var a, std::size_t begin, std::size_t end) {
  Tape& t = *a.tape();
  const Matrix& A = a.value();
  if (begin > end || end > A.cols) throw DataError("col_slice: bad range");
  const std::size_t w = end - begin;
  Matrix C(A.rows, w);
  for (std::size_t r = 0; r < A.rows; ++r) std::copy_n(A.data.data() + r * A.cols + begin, w, C.data.data() + r * w);
  return t.push(
      std::move(C),
      [a, begin, w](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        Matrix& GA = tp.grad(a.id());
        for (std::size_t r = 0; r < G.rows; ++r)
          kernels::axpy(1.0, G.data.data() + r * w, GA.data.data() + r * GA.cols + begin, w);
      },
      needs(t, a));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DataError("concat_cols: no inputs");
  Tape& t = *parts[0].tape();
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  bool req = false;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ConfigError("operands recorded on different tapes");
    if (p.rows() != rows) shape_error("concat_cols", parts[0].value(), p.value());
    cols += p.cols();
    req = req || needs(t, p);
  }
  Matrix C(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& P = p.value();
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(P.data.data() + r * P.cols, P.cols, C.data.data() + r * cols + off);
    off += P.cols;
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return t.push(
      std::move(C),
      [keep = std::move(keep)](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        std::size_t off = 0;
        for (const Var& p : keep) {
          const std::size_t w = tp.value(p.id()).cols;
          if (tp.requires_grad(p.id())) {
            Matrix& GP = tp.grad(p.id());
            for (std::size_t r = 0; r < G.rows; ++r)
              kernels::axpy(1.0, G.data.data() + r * G.cols + off, GP.data.data() + r * w, w);
          }
          off += w;
        }
      },
      req);
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DataError("concat_rows: no inputs");
  Tape& t = *parts[0].tape();
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  bool req = false;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw ConfigError("operands recorded on different tapes");
    if (p.cols() != cols) shape_error("concat_rows", parts[0].value(), p.value());
    rows += p.rows();
    req = req || needs(t, p);
  }
  Matrix C(rows, cols);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& P = p.value();
    std::copy(P.data.begin(), P.data.end(), C.data.begin() + static_cast<std::ptrdiff_t>(off * cols));
    off += P.rows;
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return t.push(
      std::move(C),
      [keep = std::move(keep)](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        std::size_t off = 0;
        for (const Var& p : keep) {
          const std::size_t n = tp.value(p.id()).size();
          if (tp.requires_grad(p.id())) kernels::axpy(1.0, G.data.data() + off, tp.grad(p.id()).data.data(), n);
          off += n;
        }
      },
      req);
}

Var row_slice(Var a, std::size_t begin, std::size_t end) {
  Tape& t = *a.tape();
  const Matrix& A = a.value();
  if (begin > end || end > A.rows) throw DataError("row_slice: bad range");
  Matrix C(end - begin, A.cols);
  std::copy_n(A.data.data() + begin * A.cols, C.size(), C.data.data());
  return t.push(
      std::move(C),
      [a, begin](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        Matrix& GA = tp.grad(a.id());
        kernels::axpy(1.0, G.data.data(), GA.data.data() + begin * GA.cols, G.size());
      },
      needs(t, a));
}

Var gather_rows(Var a, std::span<const std::size_t> rows) {
  Tape& t = *a.tape();
  const Matrix& A = a.value();
  Matrix C(rows.size(), A.cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= A.rows) throw DataError("gather_rows: index out of range");
    std::copy_n(A.data.data() + rows[r] * A.cols, A.cols, C.data.data() + r * A.cols);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return t.push(
      std::move(C),
      [a, idx = std::move(idx)](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        Matrix& GA = tp.grad(a.id());
        for (std::size_t r = 0; r < idx.size(); ++r)
          kernels::axpy(1.0, G.data.data() + r * G.cols, GA.data.data() + idx[r] * GA.cols, G.cols);
      },
      needs(t, a));
}

Var reshape(Var a, std::size_t rows, std::size_t cols) {
  Tape& t = *a.tape();
  if (rows * cols != a.value().size()) throw DataError("reshape: element count mismatch");
  Matrix C(rows, cols, a.value().data);
  return t.push(
      std::move(C),
      [a](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        kernels::axpy(1.0, G.data.data(), tp.grad(a.id()).data.data(), G.size());
      },
      needs(t, a));
}

Var grouped_rowdot(Var u, Var v) {
  Tape& t = same_tape(u, v);
  const Matrix& U = u.value();
  const Matrix& V = v.value();
  if (U.cols != V.cols || U.rows == 0 || V.rows % U.rows != 0) shape_error("grouped_rowdot", U, V);
  const std::size_t groups = V.rows / U.rows;
  const std::size_t d = U.cols;
  Matrix C(U.rows, groups);
  for (std::size_t p = 0; p < U.rows; ++p) {
    kernels::gemv(V.data.data() + p * groups * d, groups, d, U.data.data() + p * d, C.data.data() + p * groups);
  }
  return t.push(
      std::move(C),
      [u, v, groups, d](Tape& tp, std::size_t self) {
        const Matrix& G = tp.grad(self);
        const Matrix& U = tp.value(u.id());
        const Matrix& V = tp.value(v.id());
        const bool gu = tp.requires_grad(u.id());
        const bool gv = tp.requires_grad(v.id());
        Matrix* GU = gu ? &tp.grad(u.id()) : nullptr;
        Matrix* GV = gv ? &tp.grad(v.id()) : nullptr;
        for (std::size_t p = 0; p < U.rows; ++p) {
          for (std::size_t c = 0; c < groups; ++c) {
            const double g = G(p, c);
            if (g == 0.0) continue;
            const std::size_t vr = p * groups + c;
            if (gu) kernels::axpy(g, V.data.data() + vr * d, GU->data.data() + p * d, d);
            if (gv) kernels::axpy(g, U.data.data() + p * d, GV->data.data() + vr * d, d);
          }
        }
      },
      needs(t, u) || needs(t, v));
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  Tape& t = *logits.tape();
  const Matrix& L = logits.value();
  if (targets.size() != L.rows) throw DataError("cross_entropy: one target per row required");
  auto probs = std::make_shared<Matrix>(L.rows, L.cols);
  double loss = 0.0;
  for (std::size_t r = 0; r < L.rows; ++r) {
    if (targets[r] >= L.cols) throw DataError("cross_entropy: target out of range");
    const double* row = L.data.data() + r * L.cols;
    const double mx = *std::max_element(row, row + L.cols);
    double z = 0.0;
    for (std::size_t c = 0; c < L.cols; ++c) z += std::exp(row[c] - mx);
    const double log_z = mx + std::log(z);
    loss += log_z - row[targets[r]];
    for (std::size_t c = 0; c < L.cols; ++c) (*probs)(r, c) = std::exp(row[c] - log_z);
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return t.push(
      Matrix(1, 1, loss),
      [logits, probs, tg = std::move(tg)](Tape& tp, std::size_t self) {
        const double g = tp.grad(self).data[0];
        Matrix& GL = tp.grad(logits.id());
        for (std::size_t r = 0; r < probs->rows; ++r) {
          for (std::size_t c = 0; c < probs->cols; ++c) GL(r, c) += g * (*probs)(r, c);
          GL(r, tg[r]) -= g;
        }
      },
      needs(t, logits));
}

Var sum_squares(Var a) {
  Tape& t = *a.tape();
  const Matrix& A = a.value();
  const double v = kernels::sum_squares(A.data.data(), A.size());
  return t.push(
      Matrix(1, 1, v),
      [a](Tape& tp, std::size_t self) {
        const double g = tp.grad(self).data[0];
        const Matrix& A = tp.value(a.id());
        kernels::axpy(2.0 * g, A.data.data(), tp.grad(a.id()).data.data(), A.size());
      },
      needs(t, a));
}

Var sum(Var a) {
  Tape& t = *a.tape();
  double v = 0.0;
  for (double x : a.value().data) v += x;
  return t.push(
      Matrix(1, 1, v),
      [a](Tape& tp, std::size_t self) {
        const double g = tp.grad(self).data[0];
        for (double& x : tp.grad(a.id()).data) x += g;
      },
      needs(t, a));
}

}  // namespace prerec::ag
