#include "fsr/tensor.hpp"

#include <cmath>
#include <limits>

namespace fsr {

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

void check_same_shape(const MatrixXd& a, const MatrixXd& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw NumericError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) +
                       "x" + std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) +
                       "x" + std::to_string(b.cols()));
}

}  // namespace

Var Tape::leaf(const MatrixXd& value, bool requires_grad) {
  Node n;
  n.value = value;
  n.requires_grad = grad_enabled_ && requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

Var Tape::emit(MatrixXd value, bool requires_grad, std::function<void(Tape&)> backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int32_t>(nodes_.size() - 1)};
}

MatrixXd Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.size() == 0) return MatrixXd::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

const MatrixXd* Tape::grad_of(Var v) const {
  const Node& n = node(v);
  return n.grad.size() == 0 ? nullptr : &n.grad;
}

void Tape::accum(Var v, const MatrixXd& g) {
  Node& n = node(v);
  if (!n.requires_grad && !n.backward) {
    // Constants still accumulate nothing; skip entirely.
    if (!n.requires_grad) return;
  }
  if (n.grad.size() == 0) n.grad = MatrixXd::Zero(n.value.rows(), n.value.cols());
  n.grad += g;
}

void Tape::backward(Var root) {
  if (!grad_enabled_) throw NumericError("backward() on a grad-disabled tape");
  Node& r = node(root);
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw NumericError("backward() root must be a 1x1 scalar");
  if (r.grad.size() == 0) r.grad = MatrixXd::Zero(1, 1);
  r.grad(0, 0) += 1.0;
  for (int32_t i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.backward && n.grad.size() != 0) n.backward(*this);
  }
}

// The generic emit+closure pattern needs the output id; route ops through
// this helper that captures it explicitly.
#define FSR_EMIT(valueexpr, rg, capture_body)                        \
  do {                                                               \
    Var out__ = emit((valueexpr), (rg), nullptr);                    \
    if (node(out__).requires_grad) {                                 \
      node(out__).backward = [=](Tape& t) {                          \
        const MatrixXd& g = t.node(out__).grad;                      \
        capture_body                                                 \
      };                                                             \
    }                                                                \
    return out__;                                                    \
  } while (0)

Var Tape::add(Var a, Var b) {
  check_same_shape(val(a), val(b), "add");
  bool rg = wants_grad(a) || wants_grad(b);
  FSR_EMIT(val(a) + val(b), rg, {
    if (t.node(a).requires_grad) t.accum(a, g);
    if (t.node(b).requires_grad) t.accum(b, g);
  });
}

Var Tape::sub(Var a, Var b) {
  check_same_shape(val(a), val(b), "sub");
  bool rg = wants_grad(a) || wants_grad(b);
  FSR_EMIT(val(a) - val(b), rg, {
    if (t.node(a).requires_grad) t.accum(a, g);
    if (t.node(b).requires_grad) t.accum(b, -g);
  });
}

Var Tape::cmul(Var a, Var b) {
  check_same_shape(val(a), val(b), "cmul");
  bool rg = wants_grad(a) || wants_grad(b);
  FSR_EMIT(val(a).cwiseProduct(val(b)), rg, {
    if (t.node(a).requires_grad) t.accum(a, g.cwiseProduct(t.val(b)));
    if (t.node(b).requires_grad) t.accum(b, g.cwiseProduct(t.val(a)));
  });
}

Var Tape::cdiv(Var a, Var b) {
  check_same_shape(val(a), val(b), "cdiv");
  bool rg = wants_grad(a) || wants_grad(b);
  FSR_EMIT(val(a).cwiseQuotient(val(b)), rg, {
    if (t.node(a).requires_grad) t.accum(a, g.cwiseQuotient(t.val(b)));
    if (t.node(b).requires_grad) {
      MatrixXd gb = -g.cwiseProduct(t.val(a)).cwiseQuotient(t.val(b).cwiseProduct(t.val(b)));
      t.accum(b, gb);
    }
  });
}

Var Tape::scale(Var a, double s) {
  FSR_EMIT(val(a) * s, wants_grad(a), {
    if (t.node(a).requires_grad) t.accum(a, g * s);
  });
}

Var Tape::matmul(Var a, Var b) {
  if (val(a).cols() != val(b).rows()) throw NumericError("matmul: inner dims disagree");
  bool rg = wants_grad(a) || wants_grad(b);
  FSR_EMIT(val(a) * val(b), rg, {
    if (t.node(a).requires_grad) t.accum(a, g * t.val(b).transpose());
    if (t.node(b).requires_grad) t.accum(b, t.val(a).transpose() * g);
  });
}

Var Tape::matmul_nt(Var a, Var b) {
  if (val(a).cols() != val(b).cols()) throw NumericError("matmul_nt: inner dims disagree");
  bool rg = wants_grad(a) || wants_grad(b);
  FSR_EMIT(val(a) * val(b).transpose(), rg, {
    if (t.node(a).requires_grad) t.accum(a, g * t.val(b));
    if (t.node(b).requires_grad) t.accum(b, g.transpose() * t.val(a));
  });
}

Var Tape::transpose(Var a) {
  FSR_EMIT(val(a).transpose(), wants_grad(a), {
    if (t.node(a).requires_grad) t.accum(a, g.transpose());
  });
}

Var Tape::linear(Var x, Var w, Var b) {
  if (val(x).cols() != val(w).cols()) throw NumericError("linear: in dims disagree");
  if (val(b).rows() != 1 || val(b).cols() != val(w).rows())
    throw NumericError("linear: bias shape");
  bool rg = wants_grad(x) || wants_grad(w) || wants_grad(b);
  MatrixXd y = val(x) * val(w).transpose();
  y.rowwise() += val(b).row(0);
  FSR_EMIT(std::move(y), rg, {
    if (t.node(x).requires_grad) t.accum(x, g * t.val(w));
    if (t.node(w).requires_grad) t.accum(w, g.transpose() * t.val(x));
    if (t.node(b).requires_grad) t.accum(b, g.colwise().sum());
  });
}

Var Tape::relu(Var a) {
  FSR_EMIT(val(a).cwiseMax(0.0), wants_grad(a), {
    MatrixXd ga = (t.val(a).array() > 0.0).cast<double>() * g.array();
    t.accum(a, ga);
  });
}

Var Tape::gelu(Var a) {
  const MatrixXd& x = val(a);
  MatrixXd y = x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
  FSR_EMIT(std::move(y), wants_grad(a), {
    MatrixXd d = t.val(a).unaryExpr([](double v) {
      return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
    });
    t.accum(a, g.cwiseProduct(d));
  });
}

Var Tape::scale_rows(Var a, Var v) {
  if (val(v).cols() != 1 || val(v).rows() != val(a).rows())
    throw NumericError("scale_rows: v must be n×1");
  bool rg = wants_grad(a) || wants_grad(v);
  MatrixXd y = val(a).array().colwise() * val(v).col(0).array();
  FSR_EMIT(std::move(y), rg, {
    if (t.node(a).requires_grad) {
      MatrixXd ga = g.array().colwise() * t.val(v).col(0).array();
      t.accum(a, ga);
    }
    if (t.node(v).requires_grad) {
      MatrixXd gv = g.cwiseProduct(t.val(a)).rowwise().sum();
      t.accum(v, gv);
    }
  });
}

Var Tape::scale_rows_const(Var a, const VectorXd& v) {
  if (v.size() != val(a).rows()) throw NumericError("scale_rows_const: size mismatch");
  MatrixXd y = val(a).array().colwise() * v.array();
  FSR_EMIT(std::move(y), wants_grad(a), {
    MatrixXd ga = g.array().colwise() * v.array();
    t.accum(a, ga);
  });
}

Var Tape::rows_l2norm(Var a) {
  MatrixXd n = val(a).rowwise().norm();
  FSR_EMIT(std::move(n), wants_grad(a), {
    const MatrixXd& x = t.val(a);
    MatrixXd ga(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double nv = std::max(x.row(i).norm(), 1e-12);
      ga.row(i) = g(i, 0) * x.row(i) / nv;
    }
    t.accum(a, ga);
  });
}

Var Tape::softmax_rows(Var a) {
  const MatrixXd& x = val(a);
  MatrixXd p(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = x.row(i).maxCoeff();
    Eigen::ArrayXd e = (x.row(i).array() - m).exp();
    p.row(i) = e / e.sum();
  }
  Var out = emit(std::move(p), wants_grad(a), nullptr);
  if (node(out).requires_grad) {
    node(out).backward = [a, out](Tape& t) {
      const MatrixXd& g = t.node(out).grad;
      const MatrixXd& pv = t.val(out);
      MatrixXd ga(pv.rows(), pv.cols());
      for (Eigen::Index i = 0; i < pv.rows(); ++i) {
        double dot = g.row(i).dot(pv.row(i));
        ga.row(i) = pv.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
      }
      t.accum(a, ga);
    };
  }
  return out;
}

Var Tape::softmax_rows_excluding(Var a, const std::vector<uint8_t>& excluded_col) {
  const MatrixXd& x = val(a);
  if (static_cast<Eigen::Index>(excluded_col.size()) != x.cols())
    throw NumericError("softmax_rows_excluding: mask length mismatch");
  Eigen::Index allowed = 0;
  for (uint8_t e : excluded_col) allowed += (e == 0);
  if (allowed == 0) throw NumericError("softmax_rows_excluding: all columns excluded");
  MatrixXd p = MatrixXd::Zero(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (!excluded_col[static_cast<size_t>(j)]) m = std::max(m, x(i, j));
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.cols(); ++j)
      if (!excluded_col[static_cast<size_t>(j)]) {
        p(i, j) = std::exp(x(i, j) - m);
        z += p(i, j);
      }
    for (Eigen::Index j = 0; j < x.cols(); ++j) p(i, j) /= z;
  }
  Var out = emit(std::move(p), wants_grad(a), nullptr);
  if (node(out).requires_grad) {
    node(out).backward = [a, out](Tape& t) {
      const MatrixXd& g = t.node(out).grad;
      const MatrixXd& pv = t.val(out);
      MatrixXd ga(pv.rows(), pv.cols());
      for (Eigen::Index i = 0; i < pv.rows(); ++i) {
        double dot = g.row(i).dot(pv.row(i));
        // Excluded columns have p = 0, so their gradient is exactly 0.
        ga.row(i) = pv.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
      }
      t.accum(a, ga);
    };
  }
  return out;
}

Var Tape::layernorm_rows(Var x, Var gamma, Var beta, double eps) {
  const MatrixXd& xv = val(x);
  const Eigen::Index m = xv.cols();
  if (val(gamma).rows() != 1 || val(gamma).cols() != m || val(beta).rows() != 1 ||
      val(beta).cols() != m)
    throw NumericError("layernorm_rows: parameter shapes");
  MatrixXd xhat(xv.rows(), m);
  VectorXd inv_sigma(xv.rows());
  for (Eigen::Index i = 0; i < xv.rows(); ++i) {
    double mu = xv.row(i).mean();
    double var = (xv.row(i).array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    inv_sigma(i) = is;
    xhat.row(i) = (xv.row(i).array() - mu) * is;
  }
  MatrixXd y = xhat.array().rowwise() * val(gamma).row(0).array();
  y.rowwise() += val(beta).row(0);
  bool rg = wants_grad(x) || wants_grad(gamma) || wants_grad(beta);
  Var out = emit(std::move(y), rg, nullptr);
  if (node(out).requires_grad) {
    node(out).backward = [x, gamma, beta, out, xhat, inv_sigma](Tape& t) {
      const MatrixXd& g = t.node(out).grad;
      if (t.node(gamma).requires_grad)
        t.accum(gamma, g.cwiseProduct(xhat).colwise().sum());
      if (t.node(beta).requires_grad) t.accum(beta, g.colwise().sum());
      if (t.node(x).requires_grad) {
        const Eigen::Index m = g.cols();
        MatrixXd gx(g.rows(), m);
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
          Eigen::RowVectorXd gy = g.row(i).cwiseProduct(t.val(gamma).row(0));
          double mean_gy = gy.mean();
          double mean_gy_xhat = gy.cwiseProduct(xhat.row(i)).mean();
          gx.row(i) =
              inv_sigma(i) * (gy.array() - mean_gy - xhat.row(i).array() * mean_gy_xhat);
        }
        t.accum(x, gx);
      }
    };
  }
  return out;
}

Var Tape::concat_rows(Var a, Var b) {
  if (val(a).cols() != val(b).cols()) throw NumericError("concat_rows: col mismatch");
  MatrixXd y(val(a).rows() + val(b).rows(), val(a).cols());
  y.topRows(val(a).rows()) = val(a);
  y.bottomRows(val(b).rows()) = val(b);
  bool rg = wants_grad(a) || wants_grad(b);
  const Eigen::Index na = val(a).rows();
  FSR_EMIT(std::move(y), rg, {
    if (t.node(a).requires_grad) t.accum(a, g.topRows(na));
    if (t.node(b).requires_grad) t.accum(b, g.bottomRows(g.rows() - na));
  });
}

Var Tape::slice_rows(Var a, int row0, int nrows) {
  if (row0 < 0 || nrows < 0 || row0 + nrows > val(a).rows())
    throw NumericError("slice_rows: out of range");
  FSR_EMIT(val(a).middleRows(row0, nrows), wants_grad(a), {
    MatrixXd ga = MatrixXd::Zero(t.val(a).rows(), t.val(a).cols());
    ga.middleRows(row0, nrows) = g;
    t.accum(a, ga);
  });
}

Var Tape::gather_rows(Var a, const std::vector<int>& idx) {
  MatrixXd y(static_cast<Eigen::Index>(idx.size()), val(a).cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= val(a).rows()) throw NumericError("gather_rows: index");
    y.row(static_cast<Eigen::Index>(i)) = val(a).row(idx[i]);
  }
  FSR_EMIT(std::move(y), wants_grad(a), {
    MatrixXd ga = MatrixXd::Zero(t.val(a).rows(), t.val(a).cols());
    for (size_t i = 0; i < idx.size(); ++i)
      ga.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accum(a, ga);
  });
}

Var Tape::sum_rows(Var a) {
  FSR_EMIT(val(a).colwise().sum(), wants_grad(a), {
    MatrixXd ga = g.replicate(t.val(a).rows(), 1);
    t.accum(a, ga);
  });
}

Var Tape::mean_all(Var a) {
  const double n = static_cast<double>(val(a).size());
  MatrixXd y(1, 1);
  y(0, 0) = val(a).sum() / n;
  FSR_EMIT(std::move(y), wants_grad(a), {
    MatrixXd ga = MatrixXd::Constant(t.val(a).rows(), t.val(a).cols(), g(0, 0) / n);
    t.accum(a, ga);
  });
}

Var Tape::sum_all(Var a) {
  MatrixXd y(1, 1);
  y(0, 0) = val(a).sum();
  FSR_EMIT(std::move(y), wants_grad(a), {
    MatrixXd ga = MatrixXd::Constant(t.val(a).rows(), t.val(a).cols(), g(0, 0));
    t.accum(a, ga);
  });
}

Var Tape::colwise_max_subset(Var a, const std::vector<int>& rows) {
  if (rows.empty()) throw NumericError("colwise_max_subset: empty row set");
  const MatrixXd& x = val(a);
  MatrixXd y(1, x.cols());
  std::vector<int> argmax(static_cast<size_t>(x.cols()));
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    double best = -std::numeric_limits<double>::infinity();
    int bi = rows[0];
    for (int r : rows) {
      if (x(r, j) > best) {
        best = x(r, j);
        bi = r;
      }
    }
    y(0, j) = best;
    argmax[static_cast<size_t>(j)] = bi;
  }
  FSR_EMIT(std::move(y), wants_grad(a), {
    MatrixXd ga = MatrixXd::Zero(t.val(a).rows(), t.val(a).cols());
    for (Eigen::Index j = 0; j < ga.cols(); ++j)
      ga(argmax[static_cast<size_t>(j)], j) += g(0, j);
    t.accum(a, ga);
  });
}

Var Tape::mhsa(Var q, Var k, Var v, int heads, std::vector<MatrixXd>* attn_out) {
  const MatrixXd& qv = val(q);
  const MatrixXd& kv = val(k);
  const MatrixXd& vv = val(v);
  const Eigen::Index n = qv.rows();
  const Eigen::Index d = qv.cols();
  if (kv.rows() != n || vv.rows() != n || kv.cols() != d || vv.cols() != d)
    throw NumericError("mhsa: q/k/v shapes disagree");
  if (heads <= 0 || d % heads != 0) throw NumericError("mhsa: dim not divisible by heads");
  const Eigen::Index dh = d / heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<MatrixXd> attn(static_cast<size_t>(heads));
  MatrixXd y(n, d);
  for (int h = 0; h < heads; ++h) {
    MatrixXd s = qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose() * scl;
    for (Eigen::Index i = 0; i < n; ++i) {
      double m = s.row(i).maxCoeff();
      Eigen::ArrayXd e = (s.row(i).array() - m).exp();
      s.row(i) = e / e.sum();
    }
    attn[static_cast<size_t>(h)] = s;
    y.middleCols(h * dh, dh) = s * vv.middleCols(h * dh, dh);
  }
  if (attn_out) *attn_out = attn;

  bool rg = wants_grad(q) || wants_grad(k) || wants_grad(v);
  Var out = emit(std::move(y), rg, nullptr);
  if (node(out).requires_grad) {
    node(out).backward = [q, k, v, out, heads, dh, scl, attn](Tape& t) {
      const MatrixXd& g = t.node(out).grad;
      const MatrixXd& qv = t.val(q);
      const MatrixXd& kv = t.val(k);
      const MatrixXd& vv = t.val(v);
      MatrixXd gq = MatrixXd::Zero(qv.rows(), qv.cols());
      MatrixXd gk = MatrixXd::Zero(kv.rows(), kv.cols());
      MatrixXd gv = MatrixXd::Zero(vv.rows(), vv.cols());
      for (int h = 0; h < heads; ++h) {
        const MatrixXd& a = attn[static_cast<size_t>(h)];
        MatrixXd go = g.middleCols(h * dh, dh);
        gv.middleCols(h * dh, dh) += a.transpose() * go;
        MatrixXd gA = go * vv.middleCols(h * dh, dh).transpose();
        // softmax backward per row
        MatrixXd gs(a.rows(), a.cols());
        for (Eigen::Index i = 0; i < a.rows(); ++i) {
          double dot = gA.row(i).dot(a.row(i));
          gs.row(i) = a.row(i).cwiseProduct((gA.row(i).array() - dot).matrix());
        }
        gs *= scl;
        gq.middleCols(h * dh, dh) += gs * kv.middleCols(h * dh, dh);
        gk.middleCols(h * dh, dh) += gs.transpose() * qv.middleCols(h * dh, dh);
      }
      if (t.node(q).requires_grad) t.accum(q, gq);
      if (t.node(k).requires_grad) t.accum(k, gk);
      if (t.node(v).requires_grad) t.accum(v, gv);
    };
  }
  return out;
}

Var Tape::conv3x3_grid(Var x, Var w, Var b, int H, int W, int dilation) {
  const MatrixXd& xv = val(x);
  const Eigen::Index cin = xv.cols();
  const Eigen::Index npos = xv.rows();
  if (npos != static_cast<Eigen::Index>(H) * W) throw NumericError("conv3x3_grid: grid size");
  if (val(w).cols() != cin * 9) throw NumericError("conv3x3_grid: weight shape");
  if (val(b).rows() != 1 || val(b).cols() != val(w).rows())
    throw NumericError("conv3x3_grid: bias shape");

  // Neighbor table: for output position p and tap t, the source position or -1.
  std::vector<int> nbr(static_cast<size_t>(npos) * 9);
  for (int y0 = 0; y0 < H; ++y0)
    for (int x0 = 0; x0 < W; ++x0) {
      int p = y0 * W + x0;
      int ti = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx, ++ti) {
          int yy = y0 + dy * dilation;
          int xx = x0 + dx * dilation;
          nbr[static_cast<size_t>(p) * 9 + ti] =
              (yy >= 0 && yy < H && xx >= 0 && xx < W) ? yy * W + xx : -1;
        }
    }

  MatrixXd col = MatrixXd::Zero(npos, cin * 9);
  for (Eigen::Index p = 0; p < npos; ++p)
    for (int t9 = 0; t9 < 9; ++t9) {
      int src = nbr[static_cast<size_t>(p) * 9 + t9];
      if (src >= 0)
        for (Eigen::Index c = 0; c < cin; ++c) col(p, c * 9 + t9) = xv(src, c);
    }

  MatrixXd y = col * val(w).transpose();
  y.rowwise() += val(b).row(0);
  bool rg = wants_grad(x) || wants_grad(w) || wants_grad(b);
  Var out = emit(std::move(y), rg, nullptr);
  if (node(out).requires_grad) {
    node(out).backward = [x, w, b, out, col, nbr, cin, npos](Tape& t) {
      const MatrixXd& g = t.node(out).grad;
      if (t.node(w).requires_grad) t.accum(w, g.transpose() * col);
      if (t.node(b).requires_grad) t.accum(b, g.colwise().sum());
      if (t.node(x).requires_grad) {
        MatrixXd gcol = g * t.val(w);
        MatrixXd gx = MatrixXd::Zero(npos, cin);
        for (Eigen::Index p = 0; p < npos; ++p)
          for (int t9 = 0; t9 < 9; ++t9) {
            int src = nbr[static_cast<size_t>(p) * 9 + t9];
            if (src >= 0)
              for (Eigen::Index c = 0; c < cin; ++c) gx(src, c) += gcol(p, c * 9 + t9);
          }
        t.accum(x, gx);
      }
    };
  }
  return out;
}

Var Tape::bce_multilabel(Var logits, const VectorXd& targets) {
  const MatrixXd& x = val(logits);
  if (x.rows() != 1 || x.cols() != targets.size())
    throw NumericError("bce_multilabel: logits must be 1×C");
  const Eigen::Index c = x.cols();
  double loss = 0.0;
  for (Eigen::Index j = 0; j < c; ++j) {
    double xu = x(0, j);
    // softplus(x) - y*x, stable for both signs
    double sp = xu > 0 ? xu + std::log1p(std::exp(-xu)) : std::log1p(std::exp(xu));
    loss += sp - targets(j) * xu;
  }
  MatrixXd y(1, 1);
  y(0, 0) = loss / static_cast<double>(c);
  FSR_EMIT(std::move(y), wants_grad(logits), {
    const MatrixXd& xv = t.val(logits);
    MatrixXd gx(1, xv.cols());
    for (Eigen::Index j = 0; j < xv.cols(); ++j) {
      double sig = 1.0 / (1.0 + std::exp(-xv(0, j)));
      gx(0, j) = g(0, 0) * (sig - targets(j)) / static_cast<double>(xv.cols());
    }
    t.accum(logits, gx);
  });
}

Var Tape::ce_indexed(Var logits, const std::vector<int>& labels, int ignore_index) {
  const MatrixXd& x = val(logits);
  if (static_cast<Eigen::Index>(labels.size()) != x.rows())
    throw NumericError("ce_indexed: label count mismatch");
  std::vector<int> scored;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == ignore_index) continue;
    if (labels[i] < 0 || labels[i] >= x.cols()) throw NumericError("ce_indexed: label range");
    scored.push_back(static_cast<int>(i));
  }
  double loss = 0.0;
  for (int i : scored) {
    double m = x.row(i).maxCoeff();
    double lse = m + std::log((x.row(i).array() - m).exp().sum());
    loss += lse - x(i, labels[static_cast<size_t>(i)]);
  }
  const double denom = scored.empty() ? 1.0 : static_cast<double>(scored.size());
  MatrixXd y(1, 1);
  y(0, 0) = scored.empty() ? 0.0 : loss / denom;
  FSR_EMIT(std::move(y), wants_grad(logits), {
    const MatrixXd& xv = t.val(logits);
    MatrixXd gx = MatrixXd::Zero(xv.rows(), xv.cols());
    for (int i : scored) {
      double m = xv.row(i).maxCoeff();
      Eigen::ArrayXd e = (xv.row(i).array() - m).exp();
      Eigen::RowVectorXd p = (e / e.sum()).matrix().transpose();
      gx.row(i) = p * (g(0, 0) / denom);
      gx(i, labels[static_cast<size_t>(i)]) -= g(0, 0) / denom;
    }
    t.accum(logits, gx);
  });
}

Var Tape::ce_soft_rows(Var probs, const MatrixXd& targets, const VectorXd& row_weights) {
  const MatrixXd& p = val(probs);
  check_same_shape(p, targets, "ce_soft_rows");
  if (row_weights.size() != p.rows()) throw NumericError("ce_soft_rows: weight count");
  double loss = 0.0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    if (row_weights(i) == 0.0) continue;
    double li = 0.0;
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      double tk = targets(i, k);
      if (tk > 0.0) li -= tk * std::log(std::max(p(i, k), 1e-300));
    }
    loss += row_weights(i) * li;
  }
  MatrixXd y(1, 1);
  y(0, 0) = loss;
  FSR_EMIT(std::move(y), wants_grad(probs), {
    const MatrixXd& pv = t.val(probs);
    MatrixXd gp = MatrixXd::Zero(pv.rows(), pv.cols());
    for (Eigen::Index i = 0; i < pv.rows(); ++i) {
      if (row_weights(i) == 0.0) continue;
      for (Eigen::Index k = 0; k < pv.cols(); ++k) {
        double tk = targets(i, k);
        if (tk > 0.0) gp(i, k) -= g(0, 0) * row_weights(i) * tk / std::max(pv(i, k), 1e-300);
      }
    }
    t.accum(probs, gp);
  });
}

Var Tape::cosine_pair_loss(Var tokens, const std::vector<AffinityPair>& pairs) {
  const MatrixXd& z = val(tokens);
  MatrixXd y(1, 1);
  if (pairs.empty()) {
    y(0, 0) = 0.0;
    return constant(y);
  }
  const double np = static_cast<double>(pairs.size());
  double loss = 0.0;
  for (const auto& pr : pairs) {
    double ni = std::max(z.row(pr.i).norm(), 1e-12);
    double nj = std::max(z.row(pr.j).norm(), 1e-12);
    double cs = z.row(pr.i).dot(z.row(pr.j)) / (ni * nj);
    loss += (cs - pr.target) * (cs - pr.target);
  }
  y(0, 0) = loss / np;
  FSR_EMIT(std::move(y), wants_grad(tokens), {
    const MatrixXd& zv = t.val(tokens);
    MatrixXd gz = MatrixXd::Zero(zv.rows(), zv.cols());
    for (const auto& pr : pairs) {
      double ni = std::max(zv.row(pr.i).norm(), 1e-12);
      double nj = std::max(zv.row(pr.j).norm(), 1e-12);
      double cs = zv.row(pr.i).dot(zv.row(pr.j)) / (ni * nj);
      double coef = g(0, 0) * 2.0 * (cs - pr.target) / np;
      gz.row(pr.i) += coef * (zv.row(pr.j) / (ni * nj) - cs * zv.row(pr.i) / (ni * ni));
      gz.row(pr.j) += coef * (zv.row(pr.i) / (ni * nj) - cs * zv.row(pr.j) / (nj * nj));
    }
    t.accum(tokens, gz);
  });
}

#undef FSR_EMIT

}  // namespace fsr
