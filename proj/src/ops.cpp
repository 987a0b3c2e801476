#include "rmt/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace rmt {
namespace {

template <class Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MapM = Eigen::Map<Mat<Real>>;
template <class Real>
using MapC = Eigen::Map<const Mat<Real>>;
template <class Real>
using StridedM = Eigen::Map<Mat<Real>, 0, Eigen::OuterStride<>>;
template <class Real>
using StridedC = Eigen::Map<const Mat<Real>, 0, Eigen::OuterStride<>>;

template <class Real>
using NodePtr = std::shared_ptr<TensorNode<Real>>;

template <class Real>
MapC<Real> as_mat(const Tensor<Real>& t) {
  return MapC<Real>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                    static_cast<Eigen::Index>(t.cols()));
}

template <class Real>
Real* grad_ptr(const NodePtr<Real>& n) {
  if (n->grad.empty()) n->grad.assign(n->data.size(), Real(0));
  return n->grad.data();
}

template <class Real>
MapM<Real> grad_mat(const NodePtr<Real>& n, std::size_t r, std::size_t c) {
  return MapM<Real>(grad_ptr(n), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

template <class Real>
MapC<Real> out_grad(const typename Tape<Real>::Entry& e, std::size_t r, std::size_t c) {
  return MapC<Real>(e.output->grad.data(), static_cast<Eigen::Index>(r),
                    static_cast<Eigen::Index>(c));
}

template <class Real>
void scan_finite(const char* op, const Tensor<Real>& out) {
  if (!check_finite()) return;
  for (Real v : out.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite output from ") + op + " " + shape_str(out.shape()));
    }
  }
}

// Records `out` on the active tape when any input requires grad.
template <class Real, class Fn>
void finish(const char* op, Tensor<Real>& out, std::initializer_list<const Tensor<Real>*> inputs,
            Fn&& backward_fn) {
  scan_finite(op, out);
  Tape<Real>* tape = active_tape<Real>();
  if (tape == nullptr) return;
  bool any = false;
  std::vector<NodePtr<Real>> nodes;
  nodes.reserve(inputs.size());
  for (const auto* t : inputs) {
    any = any || t->requires_grad();
    nodes.push_back(t->node_ptr());
  }
  if (!any) return;
  out.set_requires_grad(true);
  tape->record(op, std::move(nodes), out.node_ptr(), std::forward<Fn>(backward_fn));
}

template <class Real>
bool wants(const typename Tape<Real>::Entry& e, std::size_t i) {
  return e.inputs[i]->requires_grad;
}

void require(bool cond, const std::string& what) {
  if (!cond) throw DimensionError(what);
}

}  // namespace

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.rows(),
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t r = a.rows(), k = a.cols(), c = b.cols();
  auto out = Tensor<Real>::zeros({r, c});
  MapM<Real>(out.mutable_data().data(), r, c).noalias() = as_mat(a) * as_mat(b);
  mac_counter() += r * k * c;
  finish<Real>("matmul", out, {&a, &b}, [r, k, c](const typename Tape<Real>::Entry& e) {
    auto g = out_grad<Real>(e, r, c);
    const auto& na = e.inputs[0];
    const auto& nb = e.inputs[1];
    if (na->requires_grad)
      grad_mat<Real>(na, r, k).noalias() += g * MapC<Real>(nb->data.data(), k, c).transpose();
    if (nb->requires_grad)
      grad_mat<Real>(nb, k, c).noalias() += MapC<Real>(na->data.data(), r, k).transpose() * g;
  });
  return out;
}

template <class Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.cols() == b.cols(),
          "matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  const std::size_t r = a.rows(), k = a.cols(), c = b.rows();
  auto out = Tensor<Real>::zeros({r, c});
  MapM<Real>(out.mutable_data().data(), r, c).noalias() = as_mat(a) * as_mat(b).transpose();
  mac_counter() += r * k * c;
  finish<Real>("matmul_nt", out, {&a, &b}, [r, k, c](const typename Tape<Real>::Entry& e) {
    auto g = out_grad<Real>(e, r, c);
    const auto& na = e.inputs[0];
    const auto& nb = e.inputs[1];
    if (na->requires_grad)
      grad_mat<Real>(na, r, k).noalias() += g * MapC<Real>(nb->data.data(), c, k);
    if (nb->requires_grad)
      grad_mat<Real>(nb, c, k).noalias() += g.transpose() * MapC<Real>(na->data.data(), r, k);
  });
  return out;
}

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = Tensor<Real>::zeros(a.shape());
  auto o = out.mutable_data();
  auto x = a.data();
  auto y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  finish<Real>("add", out, {&a, &b}, [](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    for (std::size_t k = 0; k < 2; ++k) {
      if (!e.inputs[k]->requires_grad) continue;
      Real* d = grad_ptr(e.inputs[k]);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
  return out;
}

template <class Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& bias) {
  const std::size_t r = x.rows(), c = x.cols();
  require(bias.numel() == c, "add_bias: " + shape_str(x.shape()) + " + " + shape_str(bias.shape()));
  auto out = Tensor<Real>::zeros(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] = xd[i * c + j] + bd[j];
  finish<Real>("add_bias", out, {&x, &bias}, [r, c](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    if (e.inputs[0]->requires_grad) {
      Real* d = grad_ptr(e.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (e.inputs[1]->requires_grad) {
      Real* d = grad_ptr(e.inputs[1]);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) d[j] += g[i * c + j];
    }
  });
  return out;
}

template <class Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor) {
  auto out = Tensor<Real>::zeros(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xd[i] * factor;
  finish<Real>("scale", out, {&x}, [factor](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    Real* d = grad_ptr(e.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * factor;
  });
  return out;
}

template <class Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  constexpr Real kC = static_cast<Real>(0.7978845608028654);  // sqrt(2/pi)
  constexpr Real kA = static_cast<Real>(0.044715);
  auto out = Tensor<Real>::zeros(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const Real v = xd[i];
    o[i] = Real(0.5) * v * (Real(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  finish<Real>("gelu", out, {&x}, [](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    const auto& xs = e.inputs[0]->data;
    Real* d = grad_ptr(e.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const Real v = xs[i];
      const Real t = std::tanh(kC * (v + kA * v * v * v));
      const Real dt = (Real(1) - t * t) * kC * (Real(1) + Real(3) * kA * v * v);
      d[i] += g[i] * (Real(0.5) * (Real(1) + t) + Real(0.5) * v * dt);
    }
  });
  return out;
}

template <class Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps) {
  if (!(eps > Real(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t d = x.shape().back();
  const std::size_t r = x.numel() / d;
  require(gain.numel() == d && bias.numel() == d,
          "layer_norm: gain/bias " + shape_str(gain.shape()) + " for " + shape_str(x.shape()));
  auto out = Tensor<Real>::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  auto rstd = std::make_shared<std::vector<Real>>(r);
  auto xd = x.data();
  auto o = out.mutable_data();
  auto gd = gain.data();
  auto bd = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    const Real* row = xd.data() + i * d;
    Real mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<Real>(d);
    const Real rs = Real(1) / std::sqrt(var + eps);
    (*rstd)[i] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const Real h = (row[j] - mean) * rs;
      (*xhat)[i * d + j] = h;
      o[i * d + j] = h * gd[j] + bd[j];
    }
  }
  finish<Real>("layer_norm", out, {&x, &gain, &bias},
               [r, d, xhat, rstd](const typename Tape<Real>::Entry& e) {
                 const auto& g = e.output->grad;
                 const auto& gn = e.inputs[1]->data;
                 if (e.inputs[0]->requires_grad) {
                   Real* dx = grad_ptr(e.inputs[0]);
                   for (std::size_t i = 0; i < r; ++i) {
                     Real mean_dh = 0, mean_dh_h = 0;
                     for (std::size_t j = 0; j < d; ++j) {
                       const Real dh = g[i * d + j] * gn[j];
                       mean_dh += dh;
                       mean_dh_h += dh * (*xhat)[i * d + j];
                     }
                     mean_dh /= static_cast<Real>(d);
                     mean_dh_h /= static_cast<Real>(d);
                     for (std::size_t j = 0; j < d; ++j) {
                       const Real dh = g[i * d + j] * gn[j];
                       dx[i * d + j] +=
                           (*rstd)[i] * (dh - mean_dh - (*xhat)[i * d + j] * mean_dh_h);
                     }
                   }
                 }
                 if (e.inputs[1]->requires_grad) {
                   Real* dg = grad_ptr(e.inputs[1]);
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < d; ++j) dg[j] += g[i * d + j] * (*xhat)[i * d + j];
                 }
                 if (e.inputs[2]->requires_grad) {
                   Real* db = grad_ptr(e.inputs[2]);
                   for (std::size_t i = 0; i < r; ++i)
                     for (std::size_t j = 0; j < d; ++j) db[j] += g[i * d + j];
                 }
               });
  return out;
}

namespace {

template <class Real>
void softmax_row(Real* row, std::size_t n) {
  Real mx = -std::numeric_limits<Real>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
  Real total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    total += row[j];
  }
  const Real inv = Real(1) / total;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace

template <class Real>
Tensor<Real> softmax_rows(const Tensor<Real>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  auto out = Tensor<Real>::from(x.shape(), std::vector<Real>(x.data().begin(), x.data().end()));
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < r; ++i) softmax_row(o.data() + i * c, c);
  finish<Real>("softmax_rows", out, {&x}, [r, c](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    const auto& y = e.output->data;
    Real* d = grad_ptr(e.inputs[0]);
    for (std::size_t i = 0; i < r; ++i) {
      Real dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) d[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
    }
  });
  return out;
}

template <class Real>
Tensor<Real> multihead_attention(const Tensor<Real>& q, const Tensor<Real>& k,
                                 const Tensor<Real>& v, std::size_t n_heads,
                                 std::size_t seq_len, AttentionMask mask,
                                 std::vector<Real>* probs_out) {
  require(q.shape() == k.shape() && q.shape() == v.shape() && q.ndim() == 2,
          "attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " +
              shape_str(v.shape()));
  const std::size_t rows = q.rows(), d = q.cols();
  require(n_heads > 0 && d % n_heads == 0,
          "attention: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) +
              " heads");
  require(seq_len > 0 && rows % seq_len == 0,
          "attention: " + std::to_string(rows) + " rows is not a multiple of seq_len " +
              std::to_string(seq_len));
  const std::size_t n_seq = rows / seq_len;
  const std::size_t dh = d / n_heads;
  const std::size_t L = seq_len;
  const Real scl = Real(1) / std::sqrt(static_cast<Real>(dh));
  const auto Li = static_cast<Eigen::Index>(L);
  const auto dhi = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));

  auto probs = std::make_shared<Buffer<Real>>(n_seq * n_heads * L * L);
  auto out = Tensor<Real>::zeros({rows, d});
  Real* o = out.mutable_data().data();
  for (std::size_t s = 0; s < n_seq; ++s) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = s * L * d + h * dh;
      StridedC<Real> qh(q.data().data() + off, Li, dhi, stride);
      StridedC<Real> kh(k.data().data() + off, Li, dhi, stride);
      StridedC<Real> vh(v.data().data() + off, Li, dhi, stride);
      MapM<Real> p(probs->data() + (s * n_heads + h) * L * L, Li, Li);
      p.noalias() = scl * (qh * kh.transpose());
      for (std::size_t i = 0; i < L; ++i) {
        Real* row = p.data() + i * L;
        if (mask == AttentionMask::causal) {
          for (std::size_t j = i + 1; j < L; ++j) row[j] = -std::numeric_limits<Real>::infinity();
        }
        softmax_row(row, L);
      }
      StridedM<Real>(o + off, Li, dhi, stride).noalias() = p * vh;
    }
  }
  mac_counter() += 2 * n_seq * n_heads * L * L * dh;
  if (probs_out != nullptr) probs_out->assign(probs->begin(), probs->end());

  finish<Real>("attention", out, {&q, &k, &v},
               [=](const typename Tape<Real>::Entry& e) {
                 const Real* g = e.output->grad.data();
                 const auto& nq = e.inputs[0];
                 const auto& nk = e.inputs[1];
                 const auto& nv = e.inputs[2];
                 Real* dq = nq->requires_grad ? grad_ptr(nq) : nullptr;
                 Real* dk = nk->requires_grad ? grad_ptr(nk) : nullptr;
                 Real* dv = nv->requires_grad ? grad_ptr(nv) : nullptr;
                 Mat<Real> dp(Li, Li);
                 for (std::size_t s = 0; s < n_seq; ++s) {
                   for (std::size_t h = 0; h < n_heads; ++h) {
                     const std::size_t off = s * L * d + h * dh;
                     StridedC<Real> go(g + off, Li, dhi, stride);
                     StridedC<Real> qh(nq->data.data() + off, Li, dhi, stride);
                     StridedC<Real> kh(nk->data.data() + off, Li, dhi, stride);
                     StridedC<Real> vh(nv->data.data() + off, Li, dhi, stride);
                     MapC<Real> p(probs->data() + (s * n_heads + h) * L * L, Li, Li);
                     if (dv) StridedM<Real>(dv + off, Li, dhi, stride).noalias() += p.transpose() * go;
                     dp.noalias() = go * vh.transpose();
                     for (Eigen::Index i = 0; i < Li; ++i) {
                       const Real dot = dp.row(i).dot(p.row(i));
                       dp.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix() * scl;
                     }
                     if (dq) StridedM<Real>(dq + off, Li, dhi, stride).noalias() += dp * kh;
                     if (dk) StridedM<Real>(dk + off, Li, dhi, stride).noalias() += dp.transpose() * qh;
                   }
                 }
               });
  return out;
}

template <class Real>
Tensor<Real> cross_entropy(const Tensor<Real>& logits, std::span<const int> targets,
                           std::span<const std::uint8_t> mask) {
  const std::size_t n = logits.rows(), V = logits.cols();
  require(targets.size() == n, "cross_entropy: " + std::to_string(targets.size()) +
                                   " targets for " + std::to_string(n) + " rows");
  require(mask.empty() || mask.size() == n, "cross_entropy: mask length mismatch");
  std::vector<std::uint8_t> active(n, 1);
  if (!mask.empty()) std::copy(mask.begin(), mask.end(), active.begin());
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[i]) +
                              " outside [0," + std::to_string(V) + ")");
    }
    ++count;
  }
  if (count == 0) throw std::invalid_argument("cross_entropy: loss mask selects no positions");

  auto ld = logits.data();
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    const Real* row = ld.data() + i * V;
    const Real mx = *std::max_element(row, row + V);
    double se = 0;
    for (std::size_t j = 0; j < V; ++j) se += std::exp(static_cast<double>(row[j] - mx));
    total += static_cast<double>(mx) + std::log(se) - static_cast<double>(row[targets[i]]);
  }
  auto out = Tensor<Real>::scalar(static_cast<Real>(total / static_cast<double>(count)));
  std::vector<int> tgt(targets.begin(), targets.end());
  finish<Real>("cross_entropy", out, {&logits},
               [n, V, count, tgt = std::move(tgt),
                active = std::move(active)](const typename Tape<Real>::Entry& e) {
                 const Real g = e.output->grad[0] / static_cast<Real>(count);
                 const auto& x = e.inputs[0]->data;
                 Real* d = grad_ptr(e.inputs[0]);
                 std::vector<Real> row(V);
                 for (std::size_t i = 0; i < n; ++i) {
                   if (!active[i]) continue;
                   std::copy(x.begin() + i * V, x.begin() + (i + 1) * V, row.begin());
                   softmax_row(row.data(), V);
                   row[tgt[i]] -= Real(1);
                   for (std::size_t j = 0; j < V; ++j) d[i * V + j] += g * row[j];
                 }
               });
  return out;
}

template <class Real>
std::vector<double> token_nll(const Tensor<Real>& logits, std::span<const int> targets) {
  const std::size_t n = logits.rows(), V = logits.cols();
  require(targets.size() == n, "token_nll: target count mismatch");
  std::vector<double> out(n);
  auto ld = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const Real* row = ld.data() + i * V;
    const Real mx = *std::max_element(row, row + V);
    double se = 0;
    for (std::size_t j = 0; j < V; ++j) se += std::exp(static_cast<double>(row[j] - mx));
    out[i] = static_cast<double>(mx) + std::log(se) - static_cast<double>(row[targets[i]]);
  }
  return out;
}

template <class Real>
Tensor<Real> embedding(const Tensor<Real>& table, std::span<const int> ids) {
  const std::size_t V = table.rows(), d = table.cols();
  auto out = Tensor<Real>::zeros({ids.size(), d});
  auto o = out.mutable_data();
  auto td = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside vocab of " +
                              std::to_string(V));
    }
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, o.begin() + i * d);
  }
  std::vector<int> idv(ids.begin(), ids.end());
  finish<Real>("embedding", out, {&table}, [d, idv = std::move(idv)](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    Real* dt = grad_ptr(e.inputs[0]);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dt[idv[i] * d + j] += g[i * d + j];
  });
  return out;
}

template <class Real>
Tensor<Real> concat_blocks(const std::vector<Tensor<Real>>& parts, std::size_t batch) {
  require(!parts.empty() && batch > 0, "concat_blocks: nothing to concatenate");
  const std::size_t d = parts.front().cols();
  std::vector<std::size_t> lens;
  std::size_t block = 0;
  for (const auto& p : parts) {
    require(p.cols() == d, "concat_blocks: width " + std::to_string(p.cols()) + " vs " +
                               std::to_string(d));
    require(p.rows() % batch == 0, "concat_blocks: " + std::to_string(p.rows()) +
                                       " rows not divisible by batch " + std::to_string(batch));
    lens.push_back(p.rows() / batch);
    block += lens.back();
  }
  auto out = Tensor<Real>::zeros({batch * block, d});
  auto o = out.mutable_data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t row = b * block;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      auto src = parts[p].data().subspan(b * lens[p] * d, lens[p] * d);
      std::copy(src.begin(), src.end(), o.begin() + row * d);
      row += lens[p];
    }
  }
  scan_finite("concat_blocks", out);
  Tape<Real>* tape = active_tape<Real>();
  const bool any = std::any_of(parts.begin(), parts.end(),
                               [](const Tensor<Real>& p) { return p.requires_grad(); });
  if (tape != nullptr && any) {
    out.set_requires_grad(true);
    std::vector<NodePtr<Real>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node_ptr());
    tape->record("concat_blocks", std::move(nodes), out.node_ptr(),
                 [batch, block, d, lens](const typename Tape<Real>::Entry& e) {
                   const auto& g = e.output->grad;
                   for (std::size_t b = 0; b < batch; ++b) {
                     std::size_t row = b * block;
                     for (std::size_t p = 0; p < lens.size(); ++p) {
                       if (e.inputs[p]->requires_grad) {
                         Real* dst = grad_ptr(e.inputs[p]) + b * lens[p] * d;
                         const Real* src = g.data() + row * d;
                         for (std::size_t i = 0; i < lens[p] * d; ++i) dst[i] += src[i];
                       }
                       row += lens[p];
                     }
                   }
                 });
  }
  return out;
}

template <class Real>
Tensor<Real> slice_blocks(const Tensor<Real>& x, std::size_t batch, std::size_t begin,
                          std::size_t end) {
  require(batch > 0 && x.rows() % batch == 0, "slice_blocks: rows " + std::to_string(x.rows()) +
                                                  " not divisible by batch " + std::to_string(batch));
  const std::size_t block = x.rows() / batch, d = x.cols();
  require(begin <= end && end <= block, "slice_blocks: range [" + std::to_string(begin) + "," +
                                            std::to_string(end) + ") outside block of " +
                                            std::to_string(block));
  const std::size_t len = end - begin;
  auto out = Tensor<Real>::zeros({batch * len, d});
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>((b * block + begin) * d), len * d,
                o.begin() + b * len * d);
  }
  finish<Real>("slice_blocks", out, {&x}, [=](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    Real* dx = grad_ptr(e.inputs[0]);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < len * d; ++i) dx[(b * block + begin) * d + i] += g[b * len * d + i];
  });
  return out;
}

template <class Real>
Tensor<Real> tile_rows(const Tensor<Real>& x, std::size_t times) {
  const std::size_t n = x.numel();
  Shape shape = x.shape();
  shape[0] *= times;
  auto out = Tensor<Real>::zeros(shape);
  auto o = out.mutable_data();
  for (std::size_t t = 0; t < times; ++t) std::copy(x.data().begin(), x.data().end(), o.begin() + t * n);
  finish<Real>("tile_rows", out, {&x}, [n, times](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    Real* dx = grad_ptr(e.inputs[0]);
    for (std::size_t t = 0; t < times; ++t)
      for (std::size_t i = 0; i < n; ++i) dx[i] += g[t * n + i];
  });
  return out;
}

template <class Real>
Tensor<Real> select_rows(const Tensor<Real>& x, std::span<const std::size_t> indices) {
  const std::size_t c = x.cols();
  auto out = Tensor<Real>::zeros({indices.size(), c});
  auto o = out.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] < x.rows(), "select_rows: row " + std::to_string(indices[i]) +
                                       " outside " + shape_str(x.shape()));
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c, o.begin() + i * c);
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  finish<Real>("select_rows", out, {&x}, [c, idx = std::move(idx)](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    Real* dx = grad_ptr(e.inputs[0]);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) dx[idx[i] * c + j] += g[i * c + j];
  });
  return out;
}

template <class Real>
Tensor<Real> sum(const Tensor<Real>& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  auto out = Tensor<Real>::scalar(total);
  finish<Real>("sum", out, {&x}, [](const typename Tape<Real>::Entry& e) {
    const Real g = e.output->grad[0];
    Real* dx = grad_ptr(e.inputs[0]);
    for (std::size_t i = 0; i < e.inputs[0]->data.size(); ++i) dx[i] += g;
  });
  return out;
}

template <class Real>
Tensor<Real> detach(const Tensor<Real>& x) {
  auto out = x.clone();
  out.set_requires_grad(false);
  return out;
}

template <class Real>
Tensor<Real> dropout(const Tensor<Real>& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const Real keep_scale = static_cast<Real>(1.0 / (1.0 - p));
  auto keep = std::make_shared<std::vector<std::uint8_t>>(x.numel());
  std::bernoulli_distribution coin(1.0 - p);
  auto out = Tensor<Real>::zeros(x.shape());
  auto o = out.mutable_data();
  auto xd = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    (*keep)[i] = coin(rng) ? 1 : 0;
    o[i] = (*keep)[i] ? xd[i] * keep_scale : Real(0);
  }
  finish<Real>("dropout", out, {&x}, [keep, keep_scale](const typename Tape<Real>::Entry& e) {
    const auto& g = e.output->grad;
    Real* dx = grad_ptr(e.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i)
      if ((*keep)[i]) dx[i] += g[i] * keep_scale;
  });
  return out;
}

#define RMT_INSTANTIATE_OPS(R)                                                                     \
  template Tensor<R> matmul(const Tensor<R>&, const Tensor<R>&);                                   \
  template Tensor<R> matmul_nt(const Tensor<R>&, const Tensor<R>&);                                \
  template Tensor<R> add(const Tensor<R>&, const Tensor<R>&);                                      \
  template Tensor<R> add_bias(const Tensor<R>&, const Tensor<R>&);                                 \
  template Tensor<R> scale(const Tensor<R>&, R);                                                   \
  template Tensor<R> gelu(const Tensor<R>&);                                                       \
  template Tensor<R> layer_norm(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&, R);          \
  template Tensor<R> softmax_rows(const Tensor<R>&);                                               \
  template Tensor<R> multihead_attention(const Tensor<R>&, const Tensor<R>&, const Tensor<R>&,     \
                                         std::size_t, std::size_t, AttentionMask,                  \
                                         std::vector<R>*);                                         \
  template Tensor<R> cross_entropy(const Tensor<R>&, std::span<const int>,                         \
                                   std::span<const std::uint8_t>);                                 \
  template std::vector<double> token_nll(const Tensor<R>&, std::span<const int>);                  \
  template Tensor<R> embedding(const Tensor<R>&, std::span<const int>);                            \
  template Tensor<R> concat_blocks(const std::vector<Tensor<R>>&, std::size_t);                    \
  template Tensor<R> slice_blocks(const Tensor<R>&, std::size_t, std::size_t, std::size_t);        \
  template Tensor<R> tile_rows(const Tensor<R>&, std::size_t);                                     \
  template Tensor<R> select_rows(const Tensor<R>&, std::span<const std::size_t>);                  \
  template Tensor<R> sum(const Tensor<R>&);                                                        \
  template Tensor<R> detach(const Tensor<R>&);                                                     \
  template Tensor<R> dropout(const Tensor<R>&, double, std::mt19937_64&);

RMT_INSTANTIATE_OPS(float)
RMT_INSTANTIATE_OPS(double)

}  // namespace rmt
