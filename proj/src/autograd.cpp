#include "mrir/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "gemm.hpp"
#include "mrir/fft.hpp"

namespace mrir::ag {

namespace {

thread_local bool g_grad_enabled = true;

Var make(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.handle());
      node->backward = std::move(backward_fn);
    }
  }
  return Var(std::move(node));
}

Var make(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->inputs.push_back(in.handle());
      node->backward = std::move(backward_fn);
    }
  }
  return Var(std::move(node));
}

// Gradient sink for input i, or nullptr when that input needs none.
Tensor* sink(Node& self, std::size_t i) {
  Node* in = self.inputs[i].get();
  if (in == nullptr || !in->requires_grad) return nullptr;
  return &in->grad_buffer();
}

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ArgumentError(std::string(op) + ": " + detail);
}

void require_same(const Var& a, const Var& b, const char* op) {
  require(a.value().same_shape(b.value()), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_rank(const Var& a, int rank, const char* op) {
  require(a.value().rank() == rank, op, "expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0);
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

void backward(const Var& root) {
  require(root.value().size() == 1, "backward", "root must be a scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS yields a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child != nullptr && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
}

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = sink(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = sink(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (Tensor* g = sink(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.storage()) v *= s;
  return make(std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
    }
  });
}

Var silu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v * sigmoid(v);
  return make(std::move(out), {x}, [](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double s = sigmoid(xv[i]);
        (*g)[i] += self.grad[i] * s * (1.0 + xv[i] * (1.0 - s));
      }
    }
  });
}

Var leaky_relu(const Var& x, double slope) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : slope * v;
  return make(std::move(out), {x}, [slope](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (xv[i] > 0.0 ? 1.0 : slope);
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return make(Tensor({1}, s), {x}, [](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (auto& v : g->storage()) v += self.grad[0];
    }
  });
}

Var mean(const Var& x) {
  require(x.value().size() > 0, "mean", "empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var mse(const Var& pred, const Var& target) {
  require_same(pred, target, "mse");
  const std::size_t n = pred.value().size();
  require(n > 0, "mse", "empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pred.value()[i] - target.value()[i];
    acc += d * d;
  }
  return make(Tensor({1}, acc / static_cast<double>(n)), {pred, target}, [n](Node& self) {
    const Tensor& p = self.inputs[0]->value;
    const Tensor& t = self.inputs[1]->value;
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += k * (p[i] - t[i]);
    }
    if (Tensor* g = sink(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i] -= k * (p[i] - t[i]);
    }
  });
}

Var l1_mean(const Var& pred, const Var& target) {
  require_same(pred, target, "l1_mean");
  const std::size_t n = pred.value().size();
  require(n > 0, "l1_mean", "empty tensor");
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(pred.value()[i] - target.value()[i]);
  return make(Tensor({1}, acc / static_cast<double>(n)), {pred, target}, [n](Node& self) {
    const Tensor& p = self.inputs[0]->value;
    const Tensor& t = self.inputs[1]->value;
    const double k = self.grad[0] / static_cast<double>(n);
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i] += k * sign(p[i] - t[i]);
    }
    if (Tensor* g = sink(self, 1)) {
      for (std::size_t i = 0; i < n; ++i) (*g)[i] -= k * sign(p[i] - t[i]);
    }
  });
}

Var fft_l1(const Var& pred, const Var& target) {
  require_same(pred, target, "fft_l1");
  require_rank(pred, 3, "fft_l1");
  const int c = pred.shape()[0], h = pred.shape()[1], w = pred.shape()[2];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const double norm = static_cast<double>(c) * static_cast<double>(plane);

  // sign pattern of the spectrum difference, kept for the backward pass
  auto signs = std::make_shared<std::vector<fft::Complex>>(static_cast<std::size_t>(c) * plane);
  double acc = 0.0;
  std::vector<fft::Complex> buf(plane);
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < plane; ++i) {
      buf[i] = pred.value()[ch * plane + i] - target.value()[ch * plane + i];
    }
    fft::transform_2d(buf, h, w, false);
    for (std::size_t i = 0; i < plane; ++i) {
      acc += std::abs(buf[i].real()) + std::abs(buf[i].imag());
      (*signs)[ch * plane + i] = {sign(buf[i].real()), sign(buf[i].imag())};
    }
  }
  return make(Tensor({1}, acc / norm), {pred, target}, [signs, c, h, w, plane, norm](Node& self) {
    Tensor* gp = sink(self, 0);
    Tensor* gt = sink(self, 1);
    const double k = self.grad[0] / norm;
    std::vector<fft::Complex> buf(plane);
    for (int ch = 0; ch < c; ++ch) {
      // dL/dx = Re(DFT(conj(G))) for G = sign(Re D) + i sign(Im D)
      for (std::size_t i = 0; i < plane; ++i) buf[i] = std::conj((*signs)[ch * plane + i]);
      fft::transform_2d(buf, h, w, false);
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = k * buf[i].real();
        if (gp) (*gp)[ch * plane + i] += d;
        if (gt) (*gt)[ch * plane + i] -= d;
      }
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int n = x.shape()[0], in = x.shape()[1], out_dim = weight.shape()[0];
  require(weight.shape()[1] == in, "linear",
          "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  if (bias) require(bias.value().size() == static_cast<std::size_t>(out_dim), "linear", "bias size mismatch");
  Tensor out({n, out_dim});
  if (bias) {
    for (int r = 0; r < n; ++r) std::copy(bias.value().data(), bias.value().data() + out_dim, out.data() + r * out_dim);
  }
  gemm::nt(x.value().data(), weight.value().data(), out.data(), n, in, out_dim);
  return make(std::move(out), {x, weight, bias}, [n, in, out_dim](Node& self) {
    const Tensor& g = self.grad;
    if (Tensor* gx = sink(self, 0)) gemm::nn(g.data(), self.inputs[1]->value.data(), gx->data(), n, out_dim, in);
    if (Tensor* gw = sink(self, 1)) gemm::tn(g.data(), self.inputs[0]->value.data(), gw->data(), out_dim, n, in);
    if (Tensor* gb = sink(self, 2)) {
      for (int r = 0; r < n; ++r) {
        for (int o = 0; o < out_dim; ++o) (*gb)[o] += g.at(r, o);
      }
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int n = a.shape()[0], m = a.shape()[1], d = b.shape()[1];
  require(b.shape()[0] == m, "matmul", "inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({n, d});
  gemm::nn(a.value().data(), b.value().data(), out.data(), n, m, d);
  return make(std::move(out), {a, b}, [n, m, d](Node& self) {
    const Tensor& g = self.grad;
    if (Tensor* ga = sink(self, 0)) gemm::nt(g.data(), self.inputs[1]->value.data(), ga->data(), n, d, m);
    if (Tensor* gb = sink(self, 1)) gemm::tn(self.inputs[0]->value.data(), g.data(), gb->data(), m, n, d);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const int n = a.shape()[0], d = a.shape()[1], m = b.shape()[0];
  require(b.shape()[1] == d, "matmul_nt", "inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor out({n, m});
  gemm::nt(a.value().data(), b.value().data(), out.data(), n, d, m);
  return make(std::move(out), {a, b}, [n, d, m](Node& self) {
    const Tensor& g = self.grad;
    if (Tensor* ga = sink(self, 0)) gemm::nn(g.data(), self.inputs[1]->value.data(), ga->data(), n, m, d);
    if (Tensor* gb = sink(self, 1)) gemm::tn(g.data(), self.inputs[0]->value.data(), gb->data(), m, n, d);
  });
}

Var softmax_rows(const Var& x) {
  require_rank(x, 2, "softmax_rows");
  const int n = x.shape()[0], m = x.shape()[1];
  Tensor out({n, m});
  for (int i = 0; i < n; ++i) {
    double mx = x.value().at(i, 0);
    for (int j = 1; j < m; ++j) mx = std::max(mx, x.value().at(i, j));
    double z = 0.0;
    for (int j = 0; j < m; ++j) {
      out.at(i, j) = std::exp(x.value().at(i, j) - mx);
      z += out.at(i, j);
    }
    for (int j = 0; j < m; ++j) out.at(i, j) /= z;
  }
  return make(std::move(out), {x}, [n, m](Node& self) {
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    if (Tensor* gx = sink(self, 0)) {
      for (int i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int j = 0; j < m; ++j) dot += g.at(i, j) * y.at(i, j);
        for (int j = 0; j < m; ++j) gx->at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
      }
    }
  });
}

Var slice_cols(const Var& x, int start, int count) {
  require_rank(x, 2, "slice_cols");
  const int n = x.shape()[0], d = x.shape()[1];
  require(start >= 0 && count >= 0 && start + count <= d, "slice_cols", "column range out of bounds");
  Tensor out({n, count});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < count; ++j) out.at(i, j) = x.value().at(i, start + j);
  }
  return make(std::move(out), {x}, [n, start, count](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < count; ++j) g->at(i, start + j) += self.grad.at(i, j);
      }
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols", "no inputs");
  const int n = parts.front().shape()[0];
  int total = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    require(p.shape()[0] == n, "concat_cols", "row count mismatch");
    offsets.push_back(total);
    total += p.shape()[1];
  }
  Tensor out({n, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int w = parts[k].shape()[1];
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < w; ++j) out.at(i, offsets[k] + j) = parts[k].value().at(i, j);
    }
  }
  return make(std::move(out), parts, [n, offsets](Node& self) {
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      if (Tensor* g = sink(self, k)) {
        const int w = g->shape()[1];
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < w; ++j) g->at(i, j) += self.grad.at(i, offsets[k] + j);
        }
      }
    }
  });
}

namespace {

// Saved forward state of a normalization op.
struct NormStats {
  std::vector<double> inv_std;
  Tensor normalized;
};

}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const int n = x.shape()[0], d = x.shape()[1];
  require(gamma.value().size() == static_cast<std::size_t>(d) && beta.value().size() == static_cast<std::size_t>(d),
          "layer_norm", "affine parameter size mismatch for width " + std::to_string(d));
  auto stats = std::make_shared<NormStats>();
  stats->inv_std.resize(n);
  stats->normalized = Tensor({n, d});
  Tensor out({n, d});
  for (int i = 0; i < n; ++i) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x.value().at(i, j);
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double c = x.value().at(i, j) - mu;
      var += c * c;
    }
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    stats->inv_std[i] = inv;
    for (int j = 0; j < d; ++j) {
      const double xh = (x.value().at(i, j) - mu) * inv;
      stats->normalized.at(i, j) = xh;
      out.at(i, j) = gamma.value()[j] * xh + beta.value()[j];
    }
  }
  return make(std::move(out), {x, gamma, beta}, [stats, n, d](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& gam = self.inputs[1]->value;
    const Tensor& xh = stats->normalized;
    if (Tensor* gg = sink(self, 1)) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) (*gg)[j] += g.at(i, j) * xh.at(i, j);
      }
    }
    if (Tensor* gb = sink(self, 2)) {
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) (*gb)[j] += g.at(i, j);
      }
    }
    if (Tensor* gx = sink(self, 0)) {
      for (int i = 0; i < n; ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (int j = 0; j < d; ++j) {
          const double gh = g.at(i, j) * gam[j];
          s1 += gh;
          s2 += gh * xh.at(i, j);
        }
        const double k = stats->inv_std[i] / d;
        for (int j = 0; j < d; ++j) {
          const double gh = g.at(i, j) * gam[j];
          gx->at(i, j) += k * (d * gh - s1 - xh.at(i, j) * s2);
        }
      }
    }
  });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 3, "group_norm");
  const int c = x.shape()[0];
  const std::size_t hw = static_cast<std::size_t>(x.shape()[1]) * x.shape()[2];
  require(groups > 0 && c % groups == 0, "group_norm",
          std::to_string(groups) + " groups do not divide " + std::to_string(c) + " channels");
  require(gamma.value().size() == static_cast<std::size_t>(c) && beta.value().size() == static_cast<std::size_t>(c),
          "group_norm", "affine parameter size mismatch");
  const int per = c / groups;
  const std::size_t count = per * hw;
  auto stats = std::make_shared<NormStats>();
  stats->inv_std.resize(groups);
  stats->normalized = Tensor(x.shape());
  Tensor out(x.shape());
  const double* xv = x.value().data();
  for (int gi = 0; gi < groups; ++gi) {
    const std::size_t base = static_cast<std::size_t>(gi) * count;
    double mu = 0.0;
    for (std::size_t k = 0; k < count; ++k) mu += xv[base + k];
    mu /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t k = 0; k < count; ++k) {
      const double d = xv[base + k] - mu;
      var += d * d;
    }
    var /= static_cast<double>(count);
    const double inv = 1.0 / std::sqrt(var + eps);
    stats->inv_std[gi] = inv;
    for (std::size_t k = 0; k < count; ++k) {
      const int ch = gi * per + static_cast<int>(k / hw);
      const double xh = (xv[base + k] - mu) * inv;
      stats->normalized[base + k] = xh;
      out[base + k] = gamma.value()[ch] * xh + beta.value()[ch];
    }
  }
  return make(std::move(out), {x, gamma, beta}, [stats, groups, per, hw, count](Node& self) {
    const Tensor& g = self.grad;
    const Tensor& gam = self.inputs[1]->value;
    const Tensor& xh = stats->normalized;
    Tensor* gg = sink(self, 1);
    Tensor* gb = sink(self, 2);
    Tensor* gx = sink(self, 0);
    for (int gi = 0; gi < groups; ++gi) {
      const std::size_t base = static_cast<std::size_t>(gi) * count;
      double s1 = 0.0, s2 = 0.0;
      for (std::size_t k = 0; k < count; ++k) {
        const int ch = gi * per + static_cast<int>(k / hw);
        const double gk = g[base + k];
        if (gg) (*gg)[ch] += gk * xh[base + k];
        if (gb) (*gb)[ch] += gk;
        const double gh = gk * gam[ch];
        s1 += gh;
        s2 += gh * xh[base + k];
      }
      if (!gx) continue;
      const double n = static_cast<double>(count);
      const double k_inv = stats->inv_std[gi] / n;
      for (std::size_t k = 0; k < count; ++k) {
        const int ch = gi * per + static_cast<int>(k / hw);
        const double gh = g[base + k] * gam[ch];
        (*gx)[base + k] += k_inv * (n * gh - s1 - xh[base + k] * s2);
      }
    }
  });
}

namespace {

struct ConvGeometry {
  int in_c, in_h, in_w, out_c, k, stride, pad, out_h, out_w;

  int patch() const { return in_c * k * k; }
  int positions() const { return out_h * out_w; }
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// [C*k*k, out_h*out_w] patch matrix; taps outside the input are zero.
std::vector<double> im2col(const double* x, const ConvGeometry& g) {
  std::vector<double> cols(static_cast<std::size_t>(g.patch()) * g.positions(), 0.0);
  std::size_t row = 0;
  for (int c = 0; c < g.in_c; ++c) {
    const double* plane = x + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx, ++row) {
        double* dst = cols.data() + row * g.positions();
        for (int y = 0; y < g.out_h; ++y) {
          const int iy = y * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int xo = 0; xo < g.out_w; ++xo) {
            const int ix = xo * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.in_w) dst[y * g.out_w + xo] = plane[iy * g.in_w + ix];
          }
        }
      }
    }
  }
  return cols;
}

// Adjoint of im2col, accumulating into gx.
void col2im_acc(const double* cols, const ConvGeometry& g, double* gx) {
  std::size_t row = 0;
  for (int c = 0; c < g.in_c; ++c) {
    double* plane = gx + static_cast<std::size_t>(c) * g.in_h * g.in_w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx, ++row) {
        const double* src = cols + row * g.positions();
        for (int y = 0; y < g.out_h; ++y) {
          const int iy = y * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int xo = 0; xo < g.out_w; ++xo) {
            const int ix = xo * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.in_w) plane[iy * g.in_w + ix] += src[y * g.out_w + xo];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require_rank(x, 3, "conv2d");
  require(weight.value().rank() == 4, "conv2d", "weight must be [O, C, k, k], got " + shape_str(weight.shape()));
  ConvGeometry geo{};
  geo.in_c = x.shape()[0];
  geo.in_h = x.shape()[1];
  geo.in_w = x.shape()[2];
  geo.out_c = weight.shape()[0];
  geo.k = weight.shape()[2];
  geo.stride = stride;
  geo.pad = pad;
  require(weight.shape()[1] == geo.in_c && weight.shape()[3] == geo.k, "conv2d",
          "weight " + shape_str(weight.shape()) + " incompatible with input " + shape_str(x.shape()));
  require(stride >= 1 && pad >= 0, "conv2d", "invalid stride/pad");
  geo.out_h = (geo.in_h + 2 * pad - geo.k) / stride + 1;
  geo.out_w = (geo.in_w + 2 * pad - geo.k) / stride + 1;
  require(geo.out_h > 0 && geo.out_w > 0, "conv2d", "input " + shape_str(x.shape()) + " too small for kernel");
  if (bias) require(bias.value().size() == static_cast<std::size_t>(geo.out_c), "conv2d", "bias size mismatch");

  const std::size_t plane = static_cast<std::size_t>(geo.positions());
  Tensor out({geo.out_c, geo.out_h, geo.out_w});
  if (bias) {
    for (int o = 0; o < geo.out_c; ++o) std::fill(out.data() + o * plane, out.data() + (o + 1) * plane, bias.value()[o]);
  }
  {
    std::vector<double> cols;
    const double* b = x.value().data();
    if (!geo.pointwise()) {
      cols = im2col(x.value().data(), geo);
      b = cols.data();
    }
    gemm::nn(weight.value().data(), b, out.data(), geo.out_c, geo.patch(), geo.positions());
  }

  return make(std::move(out), {x, weight, bias}, [geo, plane](Node& self) {
    const Tensor& xv = self.inputs[0]->value;
    const Tensor& wv = self.inputs[1]->value;
    const Tensor& g = self.grad;
    Tensor* gx = sink(self, 0);
    Tensor* gw = sink(self, 1);
    Tensor* gb = sink(self, 2);
    if (gb) {
      for (int o = 0; o < geo.out_c; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < plane; ++i) acc += g[o * plane + i];
        (*gb)[o] += acc;
      }
    }
    if (gw) {
      std::vector<double> cols;
      const double* c = xv.data();
      if (!geo.pointwise()) {
        cols = im2col(xv.data(), geo);
        c = cols.data();
      }
      const auto cols_t = gemm::transpose(c, geo.patch(), geo.positions());
      gemm::nn(g.data(), cols_t.data(), gw->data(), geo.out_c, geo.positions(), geo.patch());
    }
    if (gx) {
      const auto w_t = gemm::transpose(wv.data(), geo.out_c, geo.patch());
      if (geo.pointwise()) {
        gemm::nn(w_t.data(), g.data(), gx->data(), geo.patch(), geo.out_c, geo.positions());
      } else {
        std::vector<double> gcols(static_cast<std::size_t>(geo.patch()) * geo.positions(), 0.0);
        gemm::nn(w_t.data(), g.data(), gcols.data(), geo.patch(), geo.out_c, geo.positions());
        col2im_acc(gcols.data(), geo, gx->data());
      }
    }
  });
}

Var upsample_nearest2(const Var& x) {
  require_rank(x, 3, "upsample_nearest2");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) out.at(ch, y, xx) = x.value().at(ch, y / 2, xx / 2);
    }
  }
  return make(std::move(out), {x}, [c, h, w](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < 2 * h; ++y) {
          for (int xx = 0; xx < 2 * w; ++xx) g->at(ch, y / 2, xx / 2) += self.grad.at(ch, y, xx);
        }
      }
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  require(a.shape()[1] == b.shape()[1] && a.shape()[2] == b.shape()[2], "concat_channels",
          "spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t na = a.value().size();
  Tensor out({a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]});
  std::copy(a.value().storage().begin(), a.value().storage().end(), out.storage().begin());
  std::copy(b.value().storage().begin(), b.value().storage().end(), out.storage().begin() + na);
  return make(std::move(out), {a, b}, [na](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < na; ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = sink(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[na + i];
    }
  });
}

Var add_channel_vector(const Var& x, const Var& v) {
  require_rank(x, 3, "add_channel_vector");
  const int c = x.shape()[0];
  const std::size_t hw = static_cast<std::size_t>(x.shape()[1]) * x.shape()[2];
  require(v.value().size() == static_cast<std::size_t>(c), "add_channel_vector",
          "vector of " + std::to_string(v.value().size()) + " for " + std::to_string(c) + " channels");
  Tensor out = x.value();
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] += v.value()[ch];
  }
  return make(std::move(out), {x, v}, [c, hw](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = sink(self, 1)) {
      for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += self.grad[ch * hw + i];
        (*g)[ch] += acc;
      }
    }
  });
}

Var to_tokens(const Var& x) {
  require_rank(x, 3, "to_tokens");
  const int c = x.shape()[0];
  const int hw = x.shape()[1] * x.shape()[2];
  Tensor out({hw, c});
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < hw; ++p) out.at(p, ch) = x.value()[static_cast<std::size_t>(ch) * hw + p];
  }
  return make(std::move(out), {x}, [c, hw](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (int ch = 0; ch < c; ++ch) {
        for (int p = 0; p < hw; ++p) (*g)[static_cast<std::size_t>(ch) * hw + p] += self.grad.at(p, ch);
      }
    }
  });
}

Var from_tokens(const Var& t, int h, int w) {
  require_rank(t, 2, "from_tokens");
  const int hw = t.shape()[0], c = t.shape()[1];
  require(hw == h * w, "from_tokens", "token count " + std::to_string(hw) + " != " + std::to_string(h) + "x" +
                                          std::to_string(w));
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int p = 0; p < hw; ++p) out[static_cast<std::size_t>(ch) * hw + p] = t.value().at(p, ch);
  }
  return make(std::move(out), {t}, [c, hw](Node& self) {
    if (Tensor* g = sink(self, 0)) {
      for (int ch = 0; ch < c; ++ch) {
        for (int p = 0; p < hw; ++p) g->at(p, ch) += self.grad[static_cast<std::size_t>(ch) * hw + p];
      }
    }
  });
}

}  // namespace mrir::ag
