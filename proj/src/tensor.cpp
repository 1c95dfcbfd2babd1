#include "icptraj/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace icptraj::ad {

namespace {

constexpr double kLayerNormEps = 1e-5;

double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Eigen::MatrixXd& ParamStore::add(const std::string& name, int rows, int cols) {
  if (values.count(name))
    throw InvalidInputError("parameter '" + name + "' registered twice");
  values[name] = Eigen::MatrixXd::Zero(rows, cols);
  grads[name] = Eigen::MatrixXd::Zero(rows, cols);
  return values[name];
}

Eigen::MatrixXd& ParamStore::value(const std::string& name) {
  auto it = values.find(name);
  if (it == values.end())
    throw SchemaError("unknown parameter '" + name + "'");
  return it->second;
}

const Eigen::MatrixXd& ParamStore::value(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end())
    throw SchemaError("unknown parameter '" + name + "'");
  return it->second;
}

Eigen::MatrixXd& ParamStore::grad(const std::string& name) {
  auto it = grads.find(name);
  if (it == grads.end())
    throw SchemaError("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& [name, g] : grads) g.setZero();
}

double ParamStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

void ParamStore::scale_grads(double s) {
  for (auto& [name, g] : grads) g *= s;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : values) n += v.size();
  return n;
}

Tape::Tape(ParamStore* params) : params_(params), decision_hash_(1469598103934665603ull) {}

Tape::Node& Tape::node(TensorRef t) {
  if (t.id < 0 || static_cast<std::size_t>(t.id) >= nodes_.size())
    throw InvalidInputError("invalid tensor reference");
  return nodes_[t.id];
}

const Tape::Node& Tape::node(TensorRef t) const {
  if (t.id < 0 || static_cast<std::size_t>(t.id) >= nodes_.size())
    throw InvalidInputError("invalid tensor reference");
  return nodes_[t.id];
}

Eigen::MatrixXd& Tape::grad_of(TensorRef t) {
  Node& n = node(t);
  if (n.grad.size() == 0)
    n.grad = Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

TensorRef Tape::push(Eigen::MatrixXd value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr});
  return TensorRef{static_cast<int>(nodes_.size()) - 1};
}

void Tape::hash_decision(std::uint64_t v) {
  decision_hash_ ^= v + 0x9e3779b97f4a7c15ull + (decision_hash_ << 6) +
                    (decision_hash_ >> 2);
}

const Eigen::MatrixXd& Tape::value(TensorRef t) const { return node(t).value; }

TensorRef Tape::constant(const Eigen::MatrixXd& v) { return push(v); }

TensorRef Tape::param(const std::string& name) {
  if (params_ == nullptr)
    throw InvalidInputError("tape has no parameter store");
  TensorRef out = push(params_->value(name));
  Node* n = &node(out);
  ParamStore* store = params_;
  n->back = [n, store, name]() { store->grad(name) += n->grad; };
  return out;
}

TensorRef Tape::linear(const std::vector<TensorRef>& parts,
                       const std::string& w, const std::string& bias) {
  if (parts.empty()) throw InvalidInputError("linear: no input parts");
  if (params_ == nullptr)
    throw InvalidInputError("tape has no parameter store");
  const Eigen::MatrixXd& weight = params_->value(w);
  const Eigen::Index rows = node(parts[0]).value.rows();
  Eigen::Index total = 0;
  for (TensorRef part : parts) {
    const Eigen::MatrixXd& x = node(part).value;
    if (x.rows() != rows)
      throw SchemaError("linear '" + w + "': input parts disagree in rows");
    total += x.cols();
  }
  if (total != weight.cols())
    throw SchemaError("linear '" + w + "': parts provide " +
                      std::to_string(total) + " columns, weight expects " +
                      std::to_string(weight.cols()));

  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(rows, weight.rows());
  Eigen::Index offset = 0;
  for (TensorRef part : parts) {
    const Eigen::MatrixXd& x = node(part).value;
    y.noalias() += x * weight.middleCols(offset, x.cols()).transpose();
    offset += x.cols();
  }
  if (!bias.empty()) {
    const Eigen::MatrixXd& b = params_->value(bias);
    if (b.rows() != 1 || b.cols() != weight.rows())
      throw SchemaError("linear '" + w + "': bias '" + bias +
                        "' has the wrong shape");
    y.rowwise() += b.row(0);
  }

  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  std::vector<Node*> inputs;
  std::vector<Eigen::Index> widths;
  for (TensorRef part : parts) {
    inputs.push_back(&node(part));
    widths.push_back(node(part).value.cols());
  }
  ParamStore* store = params_;
  Tape* self = this;
  std::vector<TensorRef> part_refs = parts;
  on->back = [on, inputs, widths, store, self, part_refs, w, bias]() {
    const Eigen::MatrixXd& dy = on->grad;
    Eigen::MatrixXd& dw = store->grad(w);
    const Eigen::MatrixXd& weight = store->value(w);
    Eigen::Index offset = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      dw.middleCols(offset, widths[k]).noalias() +=
          dy.transpose() * inputs[k]->value;
      self->grad_of(part_refs[k]).noalias() +=
          dy * weight.middleCols(offset, widths[k]);
      offset += widths[k];
    }
    if (!bias.empty()) store->grad(bias).row(0) += dy.colwise().sum();
  };
  return out;
}

TensorRef Tape::add(TensorRef a, TensorRef b) {
  const Eigen::MatrixXd& va = node(a).value;
  const Eigen::MatrixXd& vb = node(b).value;
  if (va.rows() != vb.rows() || va.cols() != vb.cols())
    throw SchemaError("add: operand shapes differ");
  TensorRef out = push(va + vb);
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, a, b]() {
    self->grad_of(a) += on->grad;
    self->grad_of(b) += on->grad;
  };
  return out;
}

TensorRef Tape::sigmoid(TensorRef x) {
  Eigen::MatrixXd y = node(x).value.unaryExpr(&stable_sigmoid);
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, x]() {
    const Eigen::MatrixXd& y = on->value;
    self->grad_of(x).array() +=
        on->grad.array() * y.array() * (1.0 - y.array());
  };
  return out;
}

TensorRef Tape::softmax_rows(TensorRef x) {
  const Eigen::MatrixXd& v = node(x).value;
  Eigen::MatrixXd y(v.rows(), v.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    Eigen::ArrayXd row = v.row(r).array() - v.row(r).maxCoeff();
    row = row.exp();
    y.row(r) = (row / row.sum()).matrix().transpose();
  }
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, x]() {
    const Eigen::MatrixXd& y = on->value;
    const Eigen::MatrixXd& dy = on->grad;
    Eigen::MatrixXd& dx = self->grad_of(x);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double dot = dy.row(r).dot(y.row(r));
      dx.row(r).array() +=
          y.row(r).array() * (dy.row(r).array() - dot);
    }
  };
  return out;
}

TensorRef Tape::edge_from_source(TensorRef x, int n) {
  const Eigen::MatrixXd& v = node(x).value;
  if (v.rows() != n) throw SchemaError("edge_from_source: expected n rows");
  Eigen::MatrixXd y(static_cast<Eigen::Index>(n) * n, v.cols());
  for (int i = 0; i < n; ++i)
    y.middleRows(static_cast<Eigen::Index>(i) * n, n).rowwise() = v.row(i);
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, x, n]() {
    Eigen::MatrixXd& dx = self->grad_of(x);
    for (int i = 0; i < n; ++i)
      dx.row(i) +=
          on->grad.middleRows(static_cast<Eigen::Index>(i) * n, n).colwise().sum();
  };
  return out;
}

TensorRef Tape::edge_from_target(TensorRef x, int n) {
  const Eigen::MatrixXd& v = node(x).value;
  if (v.rows() != n) throw SchemaError("edge_from_target: expected n rows");
  Eigen::MatrixXd y(static_cast<Eigen::Index>(n) * n, v.cols());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      y.row(static_cast<Eigen::Index>(i) * n + j) = v.row(j);
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, x, n]() {
    Eigen::MatrixXd& dx = self->grad_of(x);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        dx.row(j) += on->grad.row(static_cast<Eigen::Index>(i) * n + j);
  };
  return out;
}

TensorRef Tape::message_max(TensorRef p, TensorRef q, TensorRef r, TensorRef s,
                            int n) {
  const Eigen::MatrixXd& vp = node(p).value;
  const Eigen::MatrixXd& vq = node(q).value;
  const Eigen::MatrixXd& vr = node(r).value;
  const Eigen::MatrixXd& vs = node(s).value;
  const Eigen::Index h = vp.cols();
  if (vp.rows() != n || vq.rows() != n || vq.cols() != h ||
      vr.rows() != Eigen::Index(n) * n || vr.cols() != h || vs.rows() != 1 ||
      vs.cols() != h)
    throw SchemaError("message_max: inconsistent input shapes");

  Eigen::MatrixXd y(n, h);
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> argmax(n, h);
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < h; ++c) {
      double base = vp(i, c) + vs(0, c);
      double best = -std::numeric_limits<double>::infinity();
      int best_j = 0;
      for (int j = 0; j < n; ++j) {
        double cand = base + vq(j, c) + vr(static_cast<Eigen::Index>(i) * n + j, c);
        if (cand > best) {
          best = cand;
          best_j = j;
        }
      }
      bool active = best > 0.0;
      y(i, c) = active ? best : 0.0;
      argmax(i, c) = best_j;
      hash_decision(static_cast<std::uint64_t>(best_j) * 2 + (active ? 1 : 0));
    }
  }

  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, p, q, r, s, n, argmax]() {
    const Eigen::MatrixXd& y = on->value;
    const Eigen::MatrixXd& dy = on->grad;
    Eigen::MatrixXd& dp = self->grad_of(p);
    Eigen::MatrixXd& dq = self->grad_of(q);
    Eigen::MatrixXd& dr = self->grad_of(r);
    Eigen::MatrixXd& ds = self->grad_of(s);
    for (int i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < y.cols(); ++c) {
        if (y(i, c) <= 0.0) continue;  // relu inactive (or exactly zero)
        double g = dy(i, c);
        int j = argmax(i, c);
        dp(i, c) += g;
        dq(j, c) += g;
        dr(static_cast<Eigen::Index>(i) * n + j, c) += g;
        ds(0, c) += g;
      }
  };
  return out;
}

TensorRef Tape::triplet_max(TensorRef n1, TensorRef n2, TensorRef n3,
                            TensorRef e1, TensorRef e2, TensorRef e3,
                            TensorRef g, int n) {
  const Eigen::MatrixXd& v1 = node(n1).value;
  const Eigen::MatrixXd& v2 = node(n2).value;
  const Eigen::MatrixXd& v3 = node(n3).value;
  const Eigen::MatrixXd& w1 = node(e1).value;
  const Eigen::MatrixXd& w2 = node(e2).value;
  const Eigen::MatrixXd& w3 = node(e3).value;
  const Eigen::MatrixXd& vg = node(g).value;
  const Eigen::Index ch = v1.cols();
  const Eigen::Index nn = static_cast<Eigen::Index>(n) * n;
  if (v1.rows() != n || v2.rows() != n || v3.rows() != n || v2.cols() != ch ||
      v3.cols() != ch || w1.rows() != nn || w2.rows() != nn ||
      w3.rows() != nn || w1.cols() != ch || w2.cols() != ch ||
      w3.cols() != ch || vg.rows() != 1 || vg.cols() != ch)
    throw SchemaError("triplet_max: inconsistent input shapes");

  Eigen::MatrixXd y(nn, ch);
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic> argmax(nn, ch);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      const Eigen::Index ij = static_cast<Eigen::Index>(i) * n + j;
      for (Eigen::Index c = 0; c < ch; ++c) {
        double base = v1(i, c) + v2(j, c) + w1(ij, c) + vg(0, c);
        double best = -std::numeric_limits<double>::infinity();
        int best_k = 0;
        for (int k = 0; k < n; ++k) {
          double cand = base + v3(k, c) +
                        w2(static_cast<Eigen::Index>(i) * n + k, c) +
                        w3(static_cast<Eigen::Index>(k) * n + j, c);
          if (cand > best) {
            best = cand;
            best_k = k;
          }
        }
        y(ij, c) = best;
        argmax(ij, c) = best_k;
        hash_decision(static_cast<std::uint64_t>(best_k) + 0x51ed2701);
      }
    }

  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, n1, n2, n3, e1, e2, e3, g, n, argmax]() {
    const Eigen::MatrixXd& dy = on->grad;
    Eigen::MatrixXd& d1 = self->grad_of(n1);
    Eigen::MatrixXd& d2 = self->grad_of(n2);
    Eigen::MatrixXd& d3 = self->grad_of(n3);
    Eigen::MatrixXd& f1 = self->grad_of(e1);
    Eigen::MatrixXd& f2 = self->grad_of(e2);
    Eigen::MatrixXd& f3 = self->grad_of(e3);
    Eigen::MatrixXd& dg = self->grad_of(g);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const Eigen::Index ij = static_cast<Eigen::Index>(i) * n + j;
        for (Eigen::Index c = 0; c < dy.cols(); ++c) {
          double gr = dy(ij, c);
          if (gr == 0.0) continue;
          int k = argmax(ij, c);
          d1(i, c) += gr;
          d2(j, c) += gr;
          d3(k, c) += gr;
          f1(ij, c) += gr;
          f2(static_cast<Eigen::Index>(i) * n + k, c) += gr;
          f3(static_cast<Eigen::Index>(k) * n + j, c) += gr;
          dg(0, c) += gr;
        }
      }
  };
  return out;
}

TensorRef Tape::layer_norm(TensorRef x, const std::string& gain,
                           const std::string& bias) {
  if (params_ == nullptr)
    throw InvalidInputError("tape has no parameter store");
  const Eigen::MatrixXd& v = node(x).value;
  const Eigen::MatrixXd& gn = params_->value(gain);
  const Eigen::MatrixXd& bs = params_->value(bias);
  if (gn.rows() != 1 || gn.cols() != v.cols() || bs.rows() != 1 ||
      bs.cols() != v.cols())
    throw SchemaError("layer_norm: gain/bias must be 1 x channels");

  const Eigen::Index h = v.cols();
  Eigen::MatrixXd xhat(v.rows(), h);
  Eigen::VectorXd inv_sigma(v.rows());
  for (Eigen::Index r = 0; r < v.rows(); ++r) {
    double mu = v.row(r).mean();
    double var = (v.row(r).array() - mu).square().mean();
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_sigma[r] = inv;
    xhat.row(r) = ((v.row(r).array() - mu) * inv).matrix();
  }
  Eigen::MatrixXd y =
      (xhat.array().rowwise() * gn.row(0).array()).rowwise() +
      bs.row(0).array();

  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  ParamStore* store = params_;
  on->back = [on, self, store, x, gain, bias, xhat, inv_sigma]() {
    const Eigen::MatrixXd& dy = on->grad;
    const Eigen::MatrixXd& gn = store->value(gain);
    Eigen::MatrixXd& dx = self->grad_of(x);
    Eigen::MatrixXd& dgain = store->grad(gain);
    Eigen::MatrixXd& dbias = store->grad(bias);
    dgain.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
    dbias.row(0) += dy.colwise().sum();
    const Eigen::Index h = dy.cols();
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
      Eigen::ArrayXd dxhat = dy.row(r).array() * gn.row(0).array();
      double mean_dxhat = dxhat.mean();
      double mean_dxhat_xhat = (dxhat * xhat.row(r).transpose().array()).mean();
      dx.row(r).array() +=
          inv_sigma[r] * (dxhat - mean_dxhat -
                          xhat.row(r).transpose().array() * mean_dxhat_xhat);
    }
    (void)h;
  };
  return out;
}

TensorRef Tape::mean_rows(TensorRef x) {
  const Eigen::MatrixXd& v = node(x).value;
  if (v.rows() < 1) throw SchemaError("mean_rows: empty input");
  Eigen::MatrixXd y = v.colwise().mean();
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, x]() {
    const Eigen::MatrixXd& dy = on->grad;
    Eigen::MatrixXd& dx = self->grad_of(x);
    dx.rowwise() += dy.row(0) / static_cast<double>(dx.rows());
  };
  return out;
}

TensorRef Tape::max_rows(TensorRef x) {
  const Eigen::MatrixXd& v = node(x).value;
  if (v.rows() < 1) throw SchemaError("max_rows: empty input");
  Eigen::MatrixXd y(1, v.cols());
  std::vector<int> argmax(v.cols(), 0);
  for (Eigen::Index c = 0; c < v.cols(); ++c) {
    double best = v(0, c);
    int best_r = 0;
    for (Eigen::Index r = 1; r < v.rows(); ++r)
      if (v(r, c) > best) {
        best = v(r, c);
        best_r = static_cast<int>(r);
      }
    y(0, c) = best;
    argmax[c] = best_r;
    hash_decision(static_cast<std::uint64_t>(best_r) + 0x7f4a7c15);
  }
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, x, argmax]() {
    const Eigen::MatrixXd& dy = on->grad;
    Eigen::MatrixXd& dx = self->grad_of(x);
    for (Eigen::Index c = 0; c < dy.cols(); ++c)
      dx(argmax[c], c) += dy(0, c);
  };
  return out;
}

TensorRef Tape::sse(TensorRef pred, const Eigen::MatrixXd& target) {
  const Eigen::MatrixXd& v = node(pred).value;
  if (v.rows() != target.rows() || v.cols() != target.cols())
    throw SchemaError("sse: prediction and target shapes differ");
  Eigen::MatrixXd diff = v - target;
  Eigen::MatrixXd y(1, 1);
  y(0, 0) = diff.squaredNorm();
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  on->back = [on, self, pred, diff]() {
    self->grad_of(pred) += 2.0 * on->grad(0, 0) * diff;
  };
  return out;
}

TensorRef Tape::bce_logits(TensorRef logits, const Eigen::MatrixXd& targets,
                           double w_pos) {
  const Eigen::MatrixXd& x = node(logits).value;
  if (x.rows() != targets.rows() || x.cols() != targets.cols())
    throw SchemaError("bce_logits: logits and target shapes differ");
  const double count = static_cast<double>(x.size());
  double total = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      double t = targets(r, c);
      total += w_pos * t * softplus(-x(r, c)) + (1.0 - t) * softplus(x(r, c));
    }
  Eigen::MatrixXd y(1, 1);
  y(0, 0) = total / count;
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  Eigen::MatrixXd tcopy = targets;
  on->back = [on, self, logits, tcopy, w_pos, count]() {
    const Eigen::MatrixXd& x = self->value(logits);
    Eigen::MatrixXd& dx = self->grad_of(logits);
    double g = on->grad(0, 0) / count;
    for (Eigen::Index r = 0; r < x.rows(); ++r)
      for (Eigen::Index c = 0; c < x.cols(); ++c) {
        double t = tcopy(r, c);
        dx(r, c) += g * ((1.0 - t) * stable_sigmoid(x(r, c)) -
                         w_pos * t * stable_sigmoid(-x(r, c)));
      }
  };
  return out;
}

TensorRef Tape::ce_logits(TensorRef logits, const std::vector<int>& classes) {
  const Eigen::MatrixXd& x = node(logits).value;
  if (static_cast<std::size_t>(x.rows()) != classes.size())
    throw SchemaError("ce_logits: one class id per row required");
  const double rows = static_cast<double>(x.rows());
  Eigen::MatrixXd probs(x.rows(), x.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    int cls = classes[r];
    if (cls < 0 || cls >= x.cols())
      throw InvalidInputError("ce_logits: class id out of range");
    double mx = x.row(r).maxCoeff();
    Eigen::ArrayXd e = (x.row(r).array() - mx).exp();
    double sum = e.sum();
    probs.row(r) = (e / sum).matrix().transpose();
    total += mx + std::log(sum) - x(r, cls);
  }
  Eigen::MatrixXd y(1, 1);
  y(0, 0) = total / rows;
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  std::vector<int> cls = classes;
  on->back = [on, self, logits, probs, cls, rows]() {
    Eigen::MatrixXd& dx = self->grad_of(logits);
    double g = on->grad(0, 0) / rows;
    for (Eigen::Index r = 0; r < dx.rows(); ++r) {
      dx.row(r) += g * probs.row(r);
      dx(r, cls[r]) -= g;
    }
  };
  return out;
}

TensorRef Tape::weighted_sum(const std::vector<TensorRef>& scalars,
                             const std::vector<double>& weights) {
  if (scalars.size() != weights.size())
    throw InvalidInputError("weighted_sum: one weight per term required");
  double total = 0.0;
  for (std::size_t k = 0; k < scalars.size(); ++k) {
    const Eigen::MatrixXd& v = node(scalars[k]).value;
    if (v.rows() != 1 || v.cols() != 1)
      throw SchemaError("weighted_sum: terms must be scalars");
    total += weights[k] * v(0, 0);
  }
  Eigen::MatrixXd y(1, 1);
  y(0, 0) = total;
  TensorRef out = push(std::move(y));
  Node* on = &node(out);
  Tape* self = this;
  std::vector<TensorRef> terms = scalars;
  std::vector<double> ws = weights;
  on->back = [on, self, terms, ws]() {
    for (std::size_t k = 0; k < terms.size(); ++k)
      self->grad_of(terms[k])(0, 0) += ws[k] * on->grad(0, 0);
  };
  return out;
}

void Tape::backward(TensorRef root) {
  Node& r = node(root);
  if (r.value.rows() != 1 || r.value.cols() != 1)
    throw InvalidInputError("backward: root must be a 1x1 scalar");
  grad_of(root)(0, 0) += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
    if (it->grad.size() != 0 && it->back) it->back();
}

}  // namespace icptraj::ad
