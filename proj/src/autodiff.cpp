#include "mbdl/autodiff.hpp"

#include <cmath>
#include <memory>

#include "mbdl/error.hpp"

namespace mbdl::ad {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::subtract: return "subtract";
    case Op::scale: return "scale";
    case Op::multiply: return "elementwise-multiply";
    case Op::soft_threshold: return "soft_threshold";
    case Op::tanh: return "tanh";
    case Op::sigmoid: return "sigmoid";
    case Op::relu: return "relu";
    case Op::sum: return "sum";
    case Op::squared_norm: return "squared-l2-norm";
    case Op::l1_norm: return "l1-norm";
    case Op::reshape: return "reshape";
    case Op::concatenate: return "concatenate";
    case Op::spd_solve: return "spd-solve";
    case Op::transpose: return "transpose";
    case Op::softplus: return "softplus";
    case Op::reciprocal: return "reciprocal";
    case Op::add_column: return "add-column";
    case Op::batched_matvec: return "batched-matvec";
    case Op::map_columns: return "map-columns";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (tape_ == nullptr) throw std::logic_error("value() on unbound Var");
  return tape_->value(id_);
}

Tensor Gradients::operator[](const Var& v) const {
  if (v.tape() != tape_) throw std::invalid_argument("gradient lookup with a Var from another tape");
  if (has(v.id())) return grads_[v.id()];
  return Tensor::zeros_like(v.value());
}

std::map<std::size_t, Tensor> Gradients::leaves() const {
  std::map<std::size_t, Tensor> out;
  for (std::size_t id = 0; id < grads_.size(); ++id)
    if (present_[id] && tape_->is_leaf(id)) out.emplace(id, grads_[id]);
  return out;
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{Op::leaf, std::move(value), {}, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{Op::leaf, std::move(value), {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(const Var& v) const {
  if (v.tape() != this) throw std::invalid_argument("Var belongs to a different tape");
}

Var Tape::push(Op op, Tensor value, std::vector<std::size_t> parents, Backward backward) {
  bool rg = false;
  for (std::size_t p : parents) rg = rg || nodes_[p].requires_grad;
  nodes_.push_back(Node{op, std::move(value), std::move(parents), std::move(backward), rg});
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& root) const {
  check_owned(root);
  if (root.value().size() != 1) {
    throw ShapeError("backward needs a scalar root, got shape " + shape_string(root.shape()));
  }
  Gradients g;
  g.tape_ = this;
  g.grads_.resize(nodes_.size());
  g.present_.assign(nodes_.size(), false);
  g.grads_[root.id()] = Tensor(root.shape(), 1.0);
  g.present_[root.id()] = true;

  std::vector<bool> needs;
  std::vector<Tensor> out;
  for (std::size_t id = root.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!g.present_[id] || node.op == Op::leaf || !node.requires_grad) continue;
    needs.assign(node.parents.size(), false);
    out.assign(node.parents.size(), Tensor());
    bool any = false;
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      needs[i] = nodes_[node.parents[i]].requires_grad;
      any = any || needs[i];
    }
    if (!any) continue;
    BackwardContext ctx(needs, out);
    node.backward(g.grads_[id], ctx);
    for (std::size_t i = 0; i < node.parents.size(); ++i) {
      if (!needs[i]) continue;
      const std::size_t p = node.parents[i];
      if (g.present_[p]) {
        Tensor& acc = g.grads_[p];
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += out[i][k];
      } else {
        g.grads_[p] = std::move(out[i]);
        g.present_[p] = true;
      }
    }
  }
  return g;
}

namespace {

Tape& common_tape(const Var& a, const Var& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("unbound Var");
  if (a.tape() != b.tape()) throw std::invalid_argument("Vars from different tapes cannot be combined");
  return *a.tape();
}

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("unbound Var");
  return *a.tape();
}

template <typename F, typename D>
Var unary(const Var& x, Op op, F f, D dfdx) {
  Tape& t = tape_of(x);
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const std::size_t xid = x.id();
  return t.push(op, std::move(y), {xid}, [&t, xid, dfdx](const Tensor& g, BackwardContext& ctx) {
    const Tensor& xv = t.value(xid);
    Tensor gx(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] = g[i] * dfdx(xv[i]);
    ctx.accumulate(0, std::move(gx));
  });
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  Tensor y = mbdl::matmul(a.value(), b.value());
  const std::size_t aid = a.id(), bid = b.id();
  return t.push(Op::matmul, std::move(y), {aid, bid}, [&t, aid, bid](const Tensor& g, BackwardContext& ctx) {
    const Tensor& av = t.value(aid);
    const Tensor& bv = t.value(bid);
    const Tensor gcol = g.as_column();
    if (ctx.needs(0)) ctx.accumulate(0, mbdl::matmul(gcol, mbdl::transpose(bv.as_column())));
    if (ctx.needs(1)) ctx.accumulate(1, mbdl::matmul(mbdl::transpose(av), gcol).reshaped(bv.shape()));
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  return t.push(Op::add, mbdl::add(a.value(), b.value()), {a.id(), b.id()},
                [](const Tensor& g, BackwardContext& ctx) {
                  if (ctx.needs(0)) ctx.accumulate(0, g);
                  if (ctx.needs(1)) ctx.accumulate(1, g);
                });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  return t.push(Op::subtract, mbdl::sub(a.value(), b.value()), {a.id(), b.id()},
                [](const Tensor& g, BackwardContext& ctx) {
                  if (ctx.needs(0)) ctx.accumulate(0, g);
                  if (ctx.needs(1)) ctx.accumulate(1, mbdl::scale(-1.0, g));
                });
}

Var scale(const Var& factor, const Var& x) {
  Tape& t = common_tape(factor, x);
  if (factor.value().size() != 1) {
    throw ShapeError("scale factor must have one element, got " + shape_string(factor.shape()));
  }
  const std::size_t fid = factor.id(), xid = x.id();
  return t.push(Op::scale, mbdl::scale(factor.value().item(), x.value()), {fid, xid},
                [&t, fid, xid](const Tensor& g, BackwardContext& ctx) {
                  const Tensor& fv = t.value(fid);
                  if (ctx.needs(0)) {
                    Tensor gf(fv.shape());
                    gf[0] = mbdl::dot(g, t.value(xid));
                    ctx.accumulate(0, std::move(gf));
                  }
                  if (ctx.needs(1)) ctx.accumulate(1, mbdl::scale(fv.item(), g));
                });
}

Var scale(double factor, const Var& x) {
  Tape& t = tape_of(x);
  return t.push(Op::scale, mbdl::scale(factor, x.value()), {x.id()},
                [factor](const Tensor& g, BackwardContext& ctx) { ctx.accumulate(0, mbdl::scale(factor, g)); });
}

Var multiply(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  const std::size_t aid = a.id(), bid = b.id();
  return t.push(Op::multiply, mbdl::hadamard(a.value(), b.value()), {aid, bid},
                [&t, aid, bid](const Tensor& g, BackwardContext& ctx) {
                  if (ctx.needs(0)) ctx.accumulate(0, mbdl::hadamard(g, t.value(bid)));
                  if (ctx.needs(1)) ctx.accumulate(1, mbdl::hadamard(g, t.value(aid)));
                });
}

Var soft_threshold(const Var& x, const Var& beta) {
  Tape& t = common_tape(x, beta);
  if (beta.value().size() != 1) throw ShapeError("soft_threshold threshold must have one element");
  const double b = beta.value().item();
  if (b < 0.0) throw std::invalid_argument("soft_threshold: beta must be non-negative");
  const std::size_t xid = x.id(), bid = beta.id();
  return t.push(Op::soft_threshold, mbdl::soft_threshold(x.value(), b), {xid, bid},
                [&t, xid, bid](const Tensor& g, BackwardContext& ctx) {
                  const Tensor& xv = t.value(xid);
                  const double b = t.value(bid).item();
                  Tensor gx(xv.shape());
                  double gb = 0.0;
                  for (std::size_t i = 0; i < xv.size(); ++i) {
                    if (std::abs(xv[i]) > b) {
                      gx[i] = g[i];
                      gb -= xv[i] > 0.0 ? g[i] : -g[i];
                    }
                  }
                  if (ctx.needs(0)) ctx.accumulate(0, std::move(gx));
                  if (ctx.needs(1)) {
                    Tensor gbeta(t.value(bid).shape());
                    gbeta[0] = gb;
                    ctx.accumulate(1, std::move(gbeta));
                  }
                });
}

Var tanh(const Var& x) {
  return unary(
      x, Op::tanh, [](double v) { return std::tanh(v); },
      [](double v) {
        const double th = std::tanh(v);
        return 1.0 - th * th;
      });
}

Var sigmoid(const Var& x) {
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  return unary(x, Op::sigmoid, sig, [sig](double v) {
    const double s = sig(v);
    return s * (1.0 - s);
  });
}

Var relu(const Var& x) {
  return unary(
      x, Op::relu, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var softplus(const Var& x) {
  return unary(
      x, Op::softplus, [](double v) { return softplus(v); }, [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

Var reciprocal(const Var& x) {
  return unary(
      x, Op::reciprocal, [](double v) { return 1.0 / v; }, [](double v) { return -1.0 / (v * v); });
}

Var sum(const Var& x) {
  Tape& t = tape_of(x);
  const Tensor::Shape xs = x.shape();
  return t.push(Op::sum, Tensor::scalar(mbdl::sum(x.value())), {x.id()},
                [xs](const Tensor& g, BackwardContext& ctx) { ctx.accumulate(0, Tensor(xs, g.item())); });
}

Var squared_norm(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t xid = x.id();
  return t.push(Op::squared_norm, Tensor::scalar(mbdl::squared_norm(x.value())), {xid},
                [&t, xid](const Tensor& g, BackwardContext& ctx) {
                  ctx.accumulate(0, mbdl::scale(2.0 * g.item(), t.value(xid)));
                });
}

Var l1_norm(const Var& x) {
  Tape& t = tape_of(x);
  const std::size_t xid = x.id();
  return t.push(Op::l1_norm, Tensor::scalar(mbdl::l1_norm(x.value())), {xid},
                [&t, xid](const Tensor& g, BackwardContext& ctx) {
                  const Tensor& xv = t.value(xid);
                  Tensor gx(xv.shape());
                  for (std::size_t i = 0; i < xv.size(); ++i)
                    gx[i] = xv[i] > 0.0 ? g.item() : (xv[i] < 0.0 ? -g.item() : 0.0);
                  ctx.accumulate(0, std::move(gx));
                });
}

Var reshape(const Var& x, Tensor::Shape shape) {
  Tape& t = tape_of(x);
  const Tensor::Shape xs = x.shape();
  return t.push(Op::reshape, x.value().reshaped(std::move(shape)), {x.id()},
                [xs](const Tensor& g, BackwardContext& ctx) { ctx.accumulate(0, g.reshaped(xs)); });
}

Var concatenate(std::span<const Var> items) {
  if (items.empty()) throw ShapeError("concatenate of zero Vars");
  Tape& t = tape_of(items.front());
  std::vector<Tensor> values;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& v : items) {
    t.check_owned(v);
    values.push_back(v.value());
    ids.push_back(v.id());
    offsets.push_back(offset);
    offset += v.value().size();
  }
  std::vector<Tensor::Shape> shapes;
  for (const Tensor& v : values) shapes.push_back(v.shape());
  return t.push(Op::concatenate, concat_rows(values), std::move(ids),
                [shapes, offsets](const Tensor& g, BackwardContext& ctx) {
                  for (std::size_t i = 0; i < shapes.size(); ++i) {
                    if (!ctx.needs(i)) continue;
                    Tensor part(shapes[i]);
                    for (std::size_t k = 0; k < part.size(); ++k) part[k] = g[offsets[i] + k];
                    ctx.accumulate(i, std::move(part));
                  }
                });
}

Var spd_solve(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  auto factor = std::make_shared<const Cholesky>(a.value());
  auto x = std::make_shared<const Tensor>(factor->solve(b.value()));
  const Tensor::Shape bs = b.shape();
  // gB = A^{-1} gX, gA = -gB X^T
  return t.push(Op::spd_solve, *x, {a.id(), b.id()}, [factor, x, bs](const Tensor& g, BackwardContext& ctx) {
    Tensor gb = factor->solve(g);
    if (ctx.needs(0)) {
      ctx.accumulate(0, mbdl::scale(-1.0, mbdl::matmul(gb.as_column(), mbdl::transpose(x->as_column()))));
    }
    if (ctx.needs(1)) ctx.accumulate(1, gb.reshaped(bs));
  });
}

Var transpose(const Var& x) {
  Tape& t = tape_of(x);
  const Tensor::Shape xs = x.shape();
  return t.push(Op::transpose, mbdl::transpose(x.value()), {x.id()},
                [xs](const Tensor& g, BackwardContext& ctx) { ctx.accumulate(0, mbdl::transpose(g).reshaped(xs)); });
}

Var add_column(const Var& matrix, const Var& column) {
  Tape& t = common_tape(matrix, column);
  const Tensor& m = matrix.value();
  const Tensor& c = column.value();
  if (!m.is_matrix() || c.size() != m.rows()) {
    throw ShapeError("add_column: " + shape_string(m.shape()) + " and " + shape_string(c.shape()));
  }
  Tensor y = m;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) y(i, j) += c[i];
  const Tensor::Shape cs = c.shape();
  return t.push(Op::add_column, std::move(y), {matrix.id(), column.id()},
                [cs](const Tensor& g, BackwardContext& ctx) {
                  if (ctx.needs(0)) ctx.accumulate(0, g);
                  if (ctx.needs(1)) {
                    Tensor gc(cs);
                    for (std::size_t i = 0; i < g.rows(); ++i)
                      for (std::size_t j = 0; j < g.cols(); ++j) gc[i] += g(i, j);
                    ctx.accumulate(1, std::move(gc));
                  }
                });
}

Var batched_matvec(const Var& gains, const Var& vecs, std::size_t rows) {
  Tape& t = common_tape(gains, vecs);
  const Tensor& gm = gains.value();
  const Tensor& vm = vecs.value();
  if (!gm.is_matrix() || !vm.is_matrix() || gm.cols() != vm.cols() || gm.rows() != rows * vm.rows()) {
    throw ShapeError("batched_matvec: gains " + shape_string(gm.shape()) + " vs vectors " + shape_string(vm.shape()));
  }
  const std::size_t k = vm.rows();
  const std::size_t batch = vm.cols();
  Tensor y({rows, batch});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += gm(r * k + c, b) * vm(c, b);
      y(r, b) = acc;
    }
  const std::size_t gid = gains.id(), vid = vecs.id();
  return t.push(Op::batched_matvec, std::move(y), {gid, vid},
                [&t, gid, vid, rows, k, batch](const Tensor& g, BackwardContext& ctx) {
                  const Tensor& gm = t.value(gid);
                  const Tensor& vm = t.value(vid);
                  if (ctx.needs(0)) {
                    Tensor gg(gm.shape());
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < k; ++c) gg(r * k + c, b) = g(r, b) * vm(c, b);
                    ctx.accumulate(0, std::move(gg));
                  }
                  if (ctx.needs(1)) {
                    Tensor gv(vm.shape());
                    for (std::size_t b = 0; b < batch; ++b)
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < k; ++c) gv(c, b) += gm(r * k + c, b) * g(r, b);
                    ctx.accumulate(1, std::move(gv));
                  }
                });
}

Var Tape::record(Op op, std::span<const Var> in, const Tensor::Shape& target) {
  auto arity = [&](std::size_t n) {
    if (in.size() != n) {
      throw std::invalid_argument(std::string(op_name(op)) + " expects " + std::to_string(n) + " inputs, got " +
                                  std::to_string(in.size()));
    }
    for (const Var& v : in) check_owned(v);
  };
  switch (op) {
    case Op::leaf: throw std::invalid_argument("record(leaf): use Tape::leaf");
    case Op::matmul: arity(2); return ad::matmul(in[0], in[1]);
    case Op::add: arity(2); return ad::add(in[0], in[1]);
    case Op::subtract: arity(2); return ad::sub(in[0], in[1]);
    case Op::scale: arity(2); return ad::scale(in[0], in[1]);
    case Op::multiply: arity(2); return ad::multiply(in[0], in[1]);
    case Op::soft_threshold: arity(2); return ad::soft_threshold(in[0], in[1]);
    case Op::tanh: arity(1); return ad::tanh(in[0]);
    case Op::sigmoid: arity(1); return ad::sigmoid(in[0]);
    case Op::relu: arity(1); return ad::relu(in[0]);
    case Op::sum: arity(1); return ad::sum(in[0]);
    case Op::squared_norm: arity(1); return ad::squared_norm(in[0]);
    case Op::l1_norm: arity(1); return ad::l1_norm(in[0]);
    case Op::reshape: arity(1); return ad::reshape(in[0], target);
    case Op::concatenate:
      for (const Var& v : in) check_owned(v);
      return ad::concatenate(in);
    case Op::spd_solve: arity(2); return ad::spd_solve(in[0], in[1]);
    case Op::transpose: arity(1); return ad::transpose(in[0]);
    case Op::softplus: arity(1); return ad::softplus(in[0]);
    case Op::reciprocal: arity(1); return ad::reciprocal(in[0]);
    case Op::add_column: arity(2); return ad::add_column(in[0], in[1]);
    case Op::batched_matvec:
      arity(2);
      if (target.size() != 1) throw std::invalid_argument("batched_matvec needs the row count as target");
      return ad::batched_matvec(in[0], in[1], target[0]);
    case Op::map_columns: throw std::invalid_argument("record(map_columns): use ad::map_columns");
  }
  throw std::invalid_argument("unknown op");
}

Var map_columns(const Var& x, ColumnMap f, ColumnMap jacobian) {
  if (!x.valid()) throw std::invalid_argument("map_columns on unbound Var");
  Tape& t = *x.tape();
  const Tensor xm = x.value().as_column();
  const std::size_t d = xm.rows(), batch = xm.cols();
  std::vector<Tensor> cols;
  cols.reserve(batch);
  std::size_t out_rows = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    cols.push_back(f(xm.column(b), b));
    if (b == 0) out_rows = cols.back().size();
    if (cols.back().size() != out_rows) throw ShapeError("map_columns: ragged column outputs");
  }
  Tensor y({out_rows, batch});
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t r = 0; r < out_rows; ++r) y(r, b) = cols[b][r];
  if (x.value().is_vector()) y = y.reshaped({out_rows});
  return t.push(Op::map_columns, std::move(y), {x.id()},
                [xm, d, batch, out_rows, jacobian = std::move(jacobian), shape = x.shape()](
                    const Tensor& g, BackwardContext& ctx) {
                  if (!ctx.needs(0)) return;
                  const Tensor gm = g.as_column();
                  Tensor dx({d, batch});
                  for (std::size_t b = 0; b < batch; ++b) {
                    const Tensor J = jacobian(xm.column(b), b);
                    if (J.rows() != out_rows || J.cols() != d) throw ShapeError("map_columns: Jacobian shape");
                    for (std::size_t j = 0; j < d; ++j) {
                      double acc = 0.0;
                      for (std::size_t r = 0; r < out_rows; ++r) acc += J(r, j) * gm(r, b);
                      dx(j, b) = acc;
                    }
                  }
                  ctx.accumulate(0, dx.reshaped(shape));
                });
}

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw std::invalid_argument("softplus_inverse needs a positive value");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

}  // namespace mbdl::ad
