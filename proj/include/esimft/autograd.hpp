#pragma once

// Reverse-mode automatic differentiation over Matrix values.
//
// A Graph is a tape: nodes are appended in creation order, so a reverse walk
// is a valid topological order. Nodes that do not depend on any trainable leaf
// carry no backward closure and are skipped.

#include <cmath>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "esimft/tensor.hpp"

namespace esimft {

template <class T>
class Graph {
 public:
  struct Var {
    std::size_t id = 0;
  };

  // Leaf owning its value.
  Var leaf(Matrix<T> value, bool requires_grad = false) {
    Node& n = push(requires_grad);
    n.own = std::move(value);
    return {nodes_.size() - 1};
  }

  // Leaf viewing an external matrix that must outlive the graph.
  Var view(const Matrix<T>& value, bool requires_grad) {
    Node& n = push(requires_grad);
    n.ext = &value;
    return {nodes_.size() - 1};
  }

  const Matrix<T>& value(Var v) const { return nodes_[v.id].value(); }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Gradient of a node after backward(); empty if nothing flowed into it.
  const Matrix<T>& grad(Var v) const { return nodes_[v.id].grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Runs the reverse sweep with d(objective)/d(seed node) given per seed.
  /// Seeds must be 1x1 nodes.
  void backward(std::span<const std::pair<Var, T>> seeds) {
    for (auto [v, g] : seeds) {
      if (!nodes_[v.id].requires_grad) continue;
      auto& gr = grad_of(v.id);
      if (gr.size() != 1) throw std::logic_error("backward seeds must be scalar nodes");
      gr.data[0] += g;
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (n.back && !n.grad.empty()) n.back();
    }
  }

  void backward(Var v, T seed = T(1)) {
    std::pair<Var, T> s{v, seed};
    backward(std::span<const std::pair<Var, T>>(&s, 1));
  }

  // ---- operations --------------------------------------------------------

  // y = x W + b
  Var linear(Var x, Var w, Var b) {
    Matrix<T> y = kernels::linear(value(x), value(w), value(b));
    Var out = result(std::move(y), {x, w, b});
    if (requires_grad(out)) {
      node(out).back = [this, out, x, w, b] {
        const auto& dy = grad(out);
        if (requires_grad(x)) kernels::matmul_bt_acc(dy, value(w), grad_of(x.id));
        if (requires_grad(w)) kernels::matmul_at_acc(value(x), dy, grad_of(w.id));
        if (requires_grad(b)) {
          auto& db = grad_of(b.id);
          for (std::size_t i = 0; i < dy.rows; ++i)
            for (std::size_t j = 0; j < dy.cols; ++j) db.data[j] += dy(i, j);
        }
      };
    }
    return out;
  }

  Var add(Var a, Var b) {
    const auto& av = value(a);
    const auto& bv = value(b);
    if (av.rows != bv.rows || av.cols != bv.cols) throw std::logic_error("add: shape mismatch");
    Matrix<T> y = av;
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += bv.data[i];
    Var out = result(std::move(y), {a, b});
    if (requires_grad(out)) {
      node(out).back = [this, out, a, b] {
        const auto& dy = grad(out);
        for (Var p : {a, b}) {
          if (!requires_grad(p)) continue;
          auto& dp = grad_of(p.id);
          for (std::size_t i = 0; i < dy.size(); ++i) dp.data[i] += dy.data[i];
        }
      };
    }
    return out;
  }

  // x + c for a constant c whose first x.rows rows are used.
  Var add_const(Var x, const Matrix<T>& c) {
    Matrix<T> y = value(x);
    for (std::size_t i = 0; i < y.rows; ++i)
      for (std::size_t j = 0; j < y.cols; ++j) y(i, j) += c(i, j);
    Var out = result(std::move(y), {x});
    if (requires_grad(out)) {
      node(out).back = [this, out, x] {
        const auto& dy = grad(out);
        auto& dx = grad_of(x.id);
        for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i];
      };
    }
    return out;
  }

  Var layer_norm(Var x, Var gamma, Var beta) {
    auto xhat = std::make_shared<Matrix<T>>();
    auto inv_std = std::make_shared<std::vector<T>>();
    Matrix<T> y = kernels::layer_norm(value(x), value(gamma), value(beta), xhat.get(), inv_std.get());
    Var out = result(std::move(y), {x, gamma, beta});
    if (requires_grad(out)) {
      node(out).back = [this, out, x, gamma, beta, xhat, inv_std] {
        const auto& dy = grad(out);
        const auto& g = value(gamma);
        const std::size_t rows = dy.rows, cols = dy.cols;
        if (requires_grad(gamma) || requires_grad(beta)) {
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) {
              if (requires_grad(gamma)) grad_of(gamma.id).data[j] += dy(i, j) * (*xhat)(i, j);
              if (requires_grad(beta)) grad_of(beta.id).data[j] += dy(i, j);
            }
        }
        if (requires_grad(x)) {
          auto& dx = grad_of(x.id);
          const T n = static_cast<T>(cols);
          std::vector<T> dxh(cols);
          for (std::size_t i = 0; i < rows; ++i) {
            T mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < cols; ++j) {
              dxh[j] = dy(i, j) * g.data[j];
              mean_d += dxh[j];
              mean_dx += dxh[j] * (*xhat)(i, j);
            }
            mean_d /= n;
            mean_dx /= n;
            const T is = (*inv_std)[i];
            for (std::size_t j = 0; j < cols; ++j) dx(i, j) += is * (dxh[j] - mean_d - (*xhat)(i, j) * mean_dx);
          }
        }
      };
    }
    return out;
  }

  Var gelu(Var x) {
    Matrix<T> y = value(x);
    for (auto& v : y.data) v = kernels::gelu(v);
    Var out = result(std::move(y), {x});
    if (requires_grad(out)) {
      node(out).back = [this, out, x] {
        const auto& dy = grad(out);
        const auto& xv = value(x);
        auto& dx = grad_of(x.id);
        for (std::size_t i = 0; i < dy.size(); ++i) dx.data[i] += dy.data[i] * kernels::gelu_grad(xv.data[i]);
      };
    }
    return out;
  }

  Var attention(Var q, Var k, Var v, std::size_t heads, bool causal) {
    auto probs = std::make_shared<std::vector<T>>();
    Matrix<T> y = kernels::attention(value(q), value(k), value(v), heads, causal, 0, probs.get());
    Var out = result(std::move(y), {q, k, v});
    if (requires_grad(out)) {
      node(out).back = [this, out, q, k, v, heads, causal, probs] {
        const auto& dy = grad(out);
        const auto& qv = value(q);
        const auto& kv = value(k);
        const auto& vv = value(v);
        const std::size_t lq = qv.rows, lk = kv.rows, d = qv.cols, dh = d / heads;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        Matrix<T>* dq = requires_grad(q) ? &grad_of(q.id) : nullptr;
        Matrix<T>* dk = requires_grad(k) ? &grad_of(k.id) : nullptr;
        Matrix<T>* dv = requires_grad(v) ? &grad_of(v.id) : nullptr;
        std::vector<T> dp(lk);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t c0 = h * dh;
          for (std::size_t i = 0; i < lq; ++i) {
            const std::size_t visible = causal ? std::min(lk, i + 1) : lk;
            const T* p = probs->data() + (h * lq + i) * lk;
            const T* doi = dy.row(i) + c0;
            T dot_pp = 0;
            for (std::size_t j = 0; j < visible; ++j) {
              const T* vj = vv.row(j) + c0;
              T s = 0;
              for (std::size_t c = 0; c < dh; ++c) s += doi[c] * vj[c];
              dp[j] = s;
              dot_pp += p[j] * s;
              if (dv) {
                T* dvj = dv->row(j) + c0;
                for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * doi[c];
              }
            }
            const T* qi = qv.row(i) + c0;
            for (std::size_t j = 0; j < visible; ++j) {
              const T ds = p[j] * (dp[j] - dot_pp) * scale;
              if (ds == T(0)) continue;
              if (dq) {
                T* dqi = dq->row(i) + c0;
                const T* kj = kv.row(j) + c0;
                for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
              }
              if (dk) {
                T* dkj = dk->row(j) + c0;
                for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
              }
            }
          }
        }
      };
    }
    return out;
  }

  // Gathers rows of `table` by id.
  Var embed(Var table, const std::vector<int>& ids) {
    const auto& tv = value(table);
    Matrix<T> y(ids.size(), tv.cols);
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy(tv.row(static_cast<std::size_t>(ids[i])), tv.row(static_cast<std::size_t>(ids[i])) + tv.cols, y.row(i));
    Var out = result(std::move(y), {table});
    if (requires_grad(out)) {
      node(out).back = [this, out, table, ids] {
        const auto& dy = grad(out);
        auto& dt = grad_of(table.id);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          T* r = dt.row(static_cast<std::size_t>(ids[i]));
          for (std::size_t j = 0; j < dy.cols; ++j) r[j] += dy(i, j);
        }
      };
    }
    return out;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    std::size_t rows = 0, cols = value(parts.front()).cols;
    for (Var p : parts) {
      if (value(p).cols != cols) throw std::logic_error("concat_rows: column mismatch");
      rows += value(p).rows;
    }
    Matrix<T> y(rows, cols);
    std::size_t r = 0;
    for (Var p : parts) {
      const auto& pv = value(p);
      std::copy(pv.data.begin(), pv.data.end(), y.row(r));
      r += pv.rows;
    }
    Var out = result(std::move(y), parts);
    if (requires_grad(out)) {
      node(out).back = [this, out, parts] {
        const auto& dy = grad(out);
        std::size_t r0 = 0;
        for (Var p : parts) {
          const std::size_t pr = value(p).rows;
          if (requires_grad(p)) {
            auto& dp = grad_of(p.id);
            for (std::size_t i = 0; i < dp.size(); ++i) dp.data[i] += dy.data[r0 * dy.cols + i];
          }
          r0 += pr;
        }
      };
    }
    return out;
  }

  /// Sum over rows of log softmax(logits[i])[targets[i]]; a 1x1 node.
  Var sum_log_prob(Var logits, const std::vector<int>& targets) {
    const auto& lv = value(logits);
    if (targets.size() != lv.rows) throw std::logic_error("sum_log_prob: target count mismatch");
    T total = 0;
    for (std::size_t i = 0; i < lv.rows; ++i) {
      const auto t = static_cast<std::size_t>(targets[i]);
      if (t >= lv.cols) throw std::out_of_range("target token id out of vocabulary");
      total += lv(i, t) - kernels::log_sum_exp(lv.row(i), lv.cols);
    }
    Var out = result(Matrix<T>(1, 1, total), {logits});
    if (requires_grad(out)) {
      node(out).back = [this, out, logits, targets] {
        const T g = grad(out).data[0];
        const auto& lv2 = value(logits);
        auto& dl = grad_of(logits.id);
        std::vector<T> p(lv2.cols);
        for (std::size_t i = 0; i < lv2.rows; ++i) {
          std::copy(lv2.row(i), lv2.row(i) + lv2.cols, p.begin());
          kernels::softmax_inplace(p.data(), p.size());
          T* dr = dl.row(i);
          for (std::size_t j = 0; j < lv2.cols; ++j) dr[j] -= g * p[j];
          dr[static_cast<std::size_t>(targets[i])] += g;
        }
      };
    }
    return out;
  }

 private:
  struct Node {
    Matrix<T> own;
    const Matrix<T>* ext = nullptr;
    Matrix<T> grad;
    bool requires_grad = false;
    std::function<void()> back;
    const Matrix<T>& value() const { return ext ? *ext : own; }
  };

  Node& push(bool requires_grad) {
    nodes_.emplace_back();
    nodes_.back().requires_grad = requires_grad;
    return nodes_.back();
  }

  Node& node(Var v) { return nodes_[v.id]; }

  Var result(Matrix<T> y, std::initializer_list<Var> parents) {
    return result(std::move(y), std::vector<Var>(parents));
  }
  Var result(Matrix<T> y, const std::vector<Var>& parents) {
    bool rg = false;
    for (Var p : parents) rg = rg || requires_grad(p);
    Node& n = push(rg);
    n.own = std::move(y);
    return {nodes_.size() - 1};
  }

  Matrix<T>& grad_of(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Matrix<T>(n.value().rows, n.value().cols);
    return n.grad;
  }

  std::deque<Node> nodes_;
};

}  // namespace esimft
