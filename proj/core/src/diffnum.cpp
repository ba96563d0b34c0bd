#include "promptdet/diffnum.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "promptdet/rng.hpp"

namespace promptdet {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  DiffTensor::BackwardFn backward;
};

namespace {
std::uint64_t next_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}
}  // namespace

}  // namespace detail

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << " x ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const char* op, const DiffTensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// DiffTensor

DiffTensor DiffTensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("DiffTensor::from: " + shape_str(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  node->id = detail::next_id();
  return DiffTensor(std::move(node));
}

DiffTensor DiffTensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

DiffTensor DiffTensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

DiffTensor DiffTensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

DiffTensor DiffTensor::random_normal(Shape shape, double stddev, std::uint64_t seed, bool requires_grad) {
  Rng rng(splitmix64(seed));
  std::normal_distribution<double> nd(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = nd(rng);
  return from(std::move(shape), std::move(v), requires_grad);
}

DiffTensor DiffTensor::make_result(Shape shape, std::vector<double> values,
                                   std::vector<DiffTensor> inputs, BackwardFn backward) {
  DiffTensor out = from(std::move(shape), std::move(values), false);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const DiffTensor& t) { return t.defined() && t.requires_grad(); });
  out.node_->leaf = false;
  if (any) {
    out.node_->requires_grad = true;
    for (auto& t : inputs) {
      if (t.defined() && t.requires_grad()) out.node_->parents.push_back(t.node_);
    }
    out.node_->backward = std::move(backward);
  }
  return out;
}

const Shape& DiffTensor::shape() const { return node_->shape; }
std::size_t DiffTensor::dim(std::size_t axis) const { return node_->shape.at(axis); }
std::size_t DiffTensor::numel() const { return node_->value.size(); }
std::span<const double> DiffTensor::values() const { return node_->value; }
std::span<double> DiffTensor::mutable_values() { return node_->value; }

double DiffTensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

bool DiffTensor::requires_grad() const { return node_->requires_grad; }
bool DiffTensor::is_leaf() const { return node_->leaf; }
bool DiffTensor::has_grad() const { return !node_->grad.empty(); }
std::uint64_t DiffTensor::id() const { return node_->id; }

std::vector<double> DiffTensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
  return node_->grad;
}

std::span<double> DiffTensor::grad_buffer() const {
  if (node_->grad.empty()) node_->grad.assign(numel(), 0.0);
  return node_->grad;
}

void DiffTensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

DiffTensor DiffTensor::detached(bool requires_grad) const {
  return from(shape(), node_->value, requires_grad);
}

// ---------------------------------------------------------------------------
// backward

void backward(const DiffTensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Nodes are created after their inputs, so descending id is a valid
  // reverse topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node_.get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  for (detail::Node* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), 0.0);
  }
  if (loss.node_->grad.empty()) loss.node_->grad.assign(1, 0.0);
  loss.node_->grad[0] += 1.0;
  for (detail::Node* n : order) {
    if (n->leaf || !n->backward) continue;
    n->backward(n->grad);
  }
  // Free intermediate buffers; leaves keep their accumulated gradient.
  for (detail::Node* n : order) {
    if (!n->leaf) std::vector<double>().swap(n->grad);
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

// C[M x N] += A[M x K] B[K x N], all row-major. 4x4 tiles held in 2-wide vector registers.
typedef double v2d __attribute__((vector_size(16)));

void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t kd, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    const double* a0 = a + i * kd;
    const double* a1 = a0 + kd;
    const double* a2 = a1 + kd;
    const double* a3 = a2 + kd;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      v2d c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
      for (std::size_t p = 0; p < kd; ++p) {
        v2d b0, b1;
        std::memcpy(&b0, b + p * n + j, sizeof b0);
        std::memcpy(&b1, b + p * n + j + 2, sizeof b1);
        const v2d x0{a0[p], a0[p]}, x1{a1[p], a1[p]}, x2{a2[p], a2[p]}, x3{a3[p], a3[p]};
        c00 += x0 * b0;
        c01 += x0 * b1;
        c10 += x1 * b0;
        c11 += x1 * b1;
        c20 += x2 * b0;
        c21 += x2 * b1;
        c30 += x3 * b0;
        c31 += x3 * b1;
      }
      const v2d* tile[4][2] = {{&c00, &c01}, {&c10, &c11}, {&c20, &c21}, {&c30, &c31}};
      for (std::size_t u = 0; u < 4; ++u) {
        double* cr = c + (i + u) * n + j;
        cr[0] += (*tile[u][0])[0];
        cr[1] += (*tile[u][0])[1];
        cr[2] += (*tile[u][1])[0];
        cr[3] += (*tile[u][1])[1];
      }
    }
    for (; j < n; ++j)
      for (std::size_t u = 0; u < 4; ++u) {
        double acc = 0.0;
        for (std::size_t p = 0; p < kd; ++p) acc += a[(i + u) * kd + p] * b[p * n + j];
        c[(i + u) * n + j] += acc;
      }
  }
  for (; i < m; ++i)
    for (std::size_t p = 0; p < kd; ++p) {
      const double av = a[i * kd + p];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * b[p * n + j];
    }
}

void transpose(const double* src, std::size_t rows, std::size_t cols, double* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t q = 0; q < cols; ++q) dst[q * rows + r] = src[r * cols + q];
}

}  // namespace

DiffTensor linear(const DiffTensor& x, const DiffTensor& weight, const DiffTensor& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", weight, 2);
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = weight.dim(1);
  if (weight.dim(0) != cin) shape_fail("linear", x.shape(), weight.shape());
  if (bias.numel() != cout) shape_fail("linear bias", weight.shape(), bias.shape());

  const auto xv = x.values();
  const auto wv = weight.values();
  const auto bv = bias.values();
  std::vector<double> out(n * cout);
  for (std::size_t i = 0; i < n; ++i) std::copy(bv.begin(), bv.end(), &out[i * cout]);
  gemm_acc(xv.data(), wv.data(), out.data(), n, cin, cout);
  return DiffTensor::make_result(
      {n, cout}, std::move(out), {x, weight, bias},
      [x, weight, bias, n, cin, cout](std::span<const double> g) mutable {
        if (x.requires_grad()) {
          std::vector<double> wt(cin * cout);
          transpose(weight.values().data(), cin, cout, wt.data());
          gemm_acc(g.data(), wt.data(), x.grad_buffer().data(), n, cout, cin);
        }
        if (weight.requires_grad()) {
          std::vector<double> xt(n * cin);
          transpose(x.values().data(), n, cin, xt.data());
          gemm_acc(xt.data(), g.data(), weight.grad_buffer().data(), cin, n, cout);
        }
        if (bias.requires_grad()) {
          auto gb = bias.grad_buffer();
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < cout; ++j) gb[j] += g[i * cout + j];
          }
        }
      });
}

DiffTensor activation(const DiffTensor& x, Activation kind) {
  (void)kind;  // relu is the only kind
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return DiffTensor::make_result(x.shape(), std::move(out), {x},
                                 [x](std::span<const double> g) mutable {
                                   auto gx = x.grad_buffer();
                                   const auto xv = x.values();
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                     if (xv[i] > 0.0) gx[i] += g[i];
                                   }
                                 });
}

namespace {

// Lowers one sample [C x H x W] to columns [C*k*k x Ho*Wo]; padding reads as zero.
void im2col(const double* in, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, double* col) {
  const std::size_t hw_out = ho * wo;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* dst = col + ((ci * k + ky) * k + kx) * hw_out;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          double* drow = dst + oy * wo;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(drow, drow + wo, 0.0);
            continue;
          }
          const double* srow = in + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            drow[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? 0.0 : srow[ix];
          }
        }
      }
}

// Adjoint of im2col: accumulates columns back into [C x H x W].
void col2im(const double* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, double* out) {
  const std::size_t hw_out = ho * wo;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* src = col + ((ci * k + ky) * k + kx) * hw_out;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          double* drow = out + (ci * h + static_cast<std::size_t>(iy)) * w;
          const double* srow = src + oy * wo;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) drow[ix] += srow[ox];
          }
        }
      }
}

}  // namespace

DiffTensor conv2d(const DiffTensor& x, const DiffTensor& kernel, const DiffTensor& bias,
                  std::size_t stride, std::size_t pad) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", kernel, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != c) shape_fail("conv2d channels", x.shape(), kernel.shape());
  if (kernel.dim(3) != k) throw ShapeError("conv2d: kernel must be square, got " + shape_str(kernel.shape()));
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (h + 2 * pad < k || w + 2 * pad < k) shape_fail("conv2d spatial", x.shape(), kernel.shape());
  if (bias.defined() && bias.numel() != cout) shape_fail("conv2d bias", kernel.shape(), bias.shape());
  const std::size_t ho = (h + 2 * pad - k) / stride + 1;
  const std::size_t wo = (w + 2 * pad - k) / stride + 1;
  const std::size_t hw = ho * wo, ckk = c * k * k;

  const auto xv = x.values();
  const auto kv = kernel.values();
  std::vector<double> out(n * cout * hw, 0.0);
  std::vector<double> col(ckk * hw);
  for (std::size_t b = 0; b < n; ++b) {
    im2col(&xv[b * c * h * w], c, h, w, k, stride, pad, ho, wo, col.data());
    double* o = &out[b * cout * hw];
    if (bias.defined())
      for (std::size_t co = 0; co < cout; ++co) std::fill(o + co * hw, o + (co + 1) * hw, bias.values()[co]);
    gemm_acc(kv.data(), col.data(), o, cout, ckk, hw);
  }

  return DiffTensor::make_result(
      {n, cout, ho, wo}, std::move(out), {x, kernel, bias},
      [=](std::span<const double> g) mutable {
        const auto xv = x.values();
        const auto kv = kernel.values();
        std::span<double> gx, gk;
        if (x.requires_grad()) gx = x.grad_buffer();
        if (kernel.requires_grad()) gk = kernel.grad_buffer();
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.grad_buffer();
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t co = 0; co < cout; ++co) {
              const double* go = &g[(b * cout + co) * hw];
              double acc = 0.0;
              for (std::size_t i = 0; i < hw; ++i) acc += go[i];
              gb[co] += acc;
            }
        }
        if (gx.empty() && gk.empty()) return;
        std::vector<double> col(ckk * hw), colt(gk.empty() ? 0 : ckk * hw), gcol, kt;
        if (!gx.empty()) {
          gcol.resize(ckk * hw);
          kt.resize(ckk * cout);
          for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t r = 0; r < ckk; ++r) kt[r * cout + co] = kv[co * ckk + r];
        }
        for (std::size_t b = 0; b < n; ++b) {
          const double* gb = &g[b * cout * hw];
          if (!gk.empty()) {
            im2col(&xv[b * c * h * w], c, h, w, k, stride, pad, ho, wo, col.data());
            transpose(col.data(), ckk, hw, colt.data());
            gemm_acc(gb, colt.data(), gk.data(), cout, hw, ckk);
          }
          if (!gx.empty()) {
            std::fill(gcol.begin(), gcol.end(), 0.0);
            gemm_acc(kt.data(), gb, gcol.data(), ckk, cout, hw);
            col2im(gcol.data(), c, h, w, k, stride, pad, ho, wo, &gx[b * c * h * w]);
          }
        }
      });
}

DiffTensor group_max_pool(const DiffTensor& x, const std::vector<std::vector<std::size_t>>& groups) {
  require_rank("group_max_pool", x, 2);
  const std::size_t p = x.dim(0), c = x.dim(1), g = groups.size();
  const auto xv = x.values();
  std::vector<double> out(g * c);
  std::vector<std::size_t> argmax(g * c);
  for (std::size_t gi = 0; gi < g; ++gi) {
    const auto& rows = groups[gi];
    if (rows.empty()) throw std::invalid_argument("group_max_pool: group " + std::to_string(gi) + " is empty");
    for (std::size_t r : rows) {
      if (r >= p) throw std::out_of_range("group_max_pool: row " + std::to_string(r) + " out of range");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::size_t best = rows[0];
      for (std::size_t r : rows) {
        if (xv[r * c + ch] > xv[best * c + ch]) best = r;
      }
      out[gi * c + ch] = xv[best * c + ch];
      argmax[gi * c + ch] = best;
    }
  }
  return DiffTensor::make_result({g, c}, std::move(out), {x},
                                 [x, argmax = std::move(argmax), c](std::span<const double> gr) mutable {
                                   auto gx = x.grad_buffer();
                                   for (std::size_t i = 0; i < gr.size(); ++i) {
                                     gx[argmax[i] * c + i % c] += gr[i];
                                   }
                                 });
}

DiffTensor softmax_cross_entropy(const DiffTensor& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::vector<double> w(logits.dim(0), 1.0);
  return softmax_cross_entropy(logits, labels, w, static_cast<double>(std::max<std::size_t>(1, logits.dim(0))));
}

DiffTensor softmax_cross_entropy(const DiffTensor& logits, std::span<const int> labels,
                                 std::span<const double> row_weights, double normalizer) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n || row_weights.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels / " +
                     std::to_string(row_weights.size()) + " weights for logits " +
                     shape_str(logits.shape()));
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= k) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(l) +
                              " outside [0, " + std::to_string(k) + ")");
    }
  }
  const auto lv = logits.values();
  std::vector<double> prob(n * k);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = &lv[i * k];
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (std::size_t j = 0; j < k; ++j) prob[i * k + j] = std::exp(row[j] - mx) / z;
    loss += row_weights[i] * (std::log(z) + mx - row[labels[i]]);
  }
  loss /= normalizer;
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<double> wts(row_weights.begin(), row_weights.end());
  return DiffTensor::make_result(
      {1}, {loss}, {logits},
      [logits, prob = std::move(prob), lab = std::move(lab), wts = std::move(wts), n, k,
       normalizer](std::span<const double> g) mutable {
        auto gl = logits.grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
          const double s = g[0] * wts[i] / normalizer;
          if (s == 0.0) continue;
          for (std::size_t j = 0; j < k; ++j) {
            gl[i * k + j] += s * (prob[i * k + j] - (static_cast<int>(j) == lab[i] ? 1.0 : 0.0));
          }
        }
      });
}

DiffTensor sigmoid_bce_with_logits(const DiffTensor& logits, std::span<const double> targets,
                                   std::span<const double> weights, double normalizer) {
  const std::size_t n = logits.numel();
  if (targets.size() != n || weights.size() != n) {
    throw ShapeError("sigmoid_bce_with_logits: targets/weights do not match logits " +
                     shape_str(logits.shape()));
  }
  const auto lv = logits.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    const double z = lv[i];
    // max(z,0) - z t + log(1 + exp(-|z|))
    loss += weights[i] * (std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z))));
  }
  loss /= normalizer;
  std::vector<double> t(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return DiffTensor::make_result({1}, {loss}, {logits},
                                 [logits, t = std::move(t), w = std::move(w), normalizer](std::span<const double> g) mutable {
                                   auto gl = logits.grad_buffer();
                                   const auto lv = logits.values();
                                   for (std::size_t i = 0; i < t.size(); ++i) {
                                     if (w[i] == 0.0) continue;
                                     const double s = 1.0 / (1.0 + std::exp(-lv[i]));
                                     gl[i] += g[0] * w[i] * (s - t[i]) / normalizer;
                                   }
                                 });
}

DiffTensor smooth_l1(const DiffTensor& pred, std::span<const double> targets,
                     std::span<const double> weights, double beta, double normalizer) {
  const std::size_t n = pred.numel();
  if (targets.size() != n || weights.size() != n) {
    throw ShapeError("smooth_l1: targets/weights do not match " + shape_str(pred.shape()));
  }
  const auto pv = pred.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (weights[i] == 0.0) continue;
    const double d = std::abs(pv[i] - targets[i]);
    loss += weights[i] * (d < beta ? 0.5 * d * d / beta : d - 0.5 * beta);
  }
  loss /= normalizer;
  std::vector<double> t(targets.begin(), targets.end());
  std::vector<double> w(weights.begin(), weights.end());
  return DiffTensor::make_result({1}, {loss}, {pred},
                                 [pred, t = std::move(t), w = std::move(w), beta, normalizer](std::span<const double> g) mutable {
                                   auto gp = pred.grad_buffer();
                                   const auto pv = pred.values();
                                   for (std::size_t i = 0; i < t.size(); ++i) {
                                     if (w[i] == 0.0) continue;
                                     const double d = pv[i] - t[i];
                                     const double dd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
                                     gp[i] += g[0] * w[i] * dd / normalizer;
                                   }
                                 });
}

namespace {

struct FreezeState {
  bool active = false;
  bool replay = false;
  std::size_t cursor = 0;
  std::vector<DiffTensor> recorded;
};

FreezeState& freeze_state() {
  thread_local FreezeState s;
  return s;
}

}  // namespace

StopGradientFreeze::StopGradientFreeze() {
  FreezeState& s = freeze_state();
  if (s.active) throw std::logic_error("StopGradientFreeze: already active on this thread");
  s = FreezeState{};
  s.active = true;
}

StopGradientFreeze::~StopGradientFreeze() { freeze_state() = FreezeState{}; }

void StopGradientFreeze::replay() {
  FreezeState& s = freeze_state();
  s.replay = true;
  s.cursor = 0;
}

DiffTensor stop_gradient(const DiffTensor& x) {
  FreezeState& s = freeze_state();
  if (s.active && s.replay) {
    if (s.cursor >= s.recorded.size() || s.recorded[s.cursor].shape() != x.shape())
      throw std::logic_error("StopGradientFreeze: replayed graph differs from the recorded one");
    return s.recorded[s.cursor++];
  }
  DiffTensor out = DiffTensor::from(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), false);
  if (s.active) s.recorded.push_back(out);
  return out;
}

DiffTensor add(const DiffTensor& a, const DiffTensor& b) {
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return DiffTensor::make_result(a.shape(), std::move(out), {a, b},
                                 [a, b](std::span<const double> g) mutable {
                                   for (const DiffTensor* t : {&a, &b}) {
                                     if (!t->requires_grad()) continue;
                                     auto gt = t->grad_buffer();
                                     for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
                                   }
                                 });
}

DiffTensor mul(const DiffTensor& a, const DiffTensor& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return DiffTensor::make_result(a.shape(), std::move(out), {a, b},
                                 [a, b](std::span<const double> g) mutable {
                                   if (a.requires_grad()) {
                                     auto ga = a.grad_buffer();
                                     for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.values()[i];
                                   }
                                   if (b.requires_grad()) {
                                     auto gb = b.grad_buffer();
                                     for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.values()[i];
                                   }
                                 });
}

DiffTensor scale(const DiffTensor& x, double factor) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= factor;
  return DiffTensor::make_result(x.shape(), std::move(out), {x},
                                 [x, factor](std::span<const double> g) mutable {
                                   auto gx = x.grad_buffer();
                                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
                                 });
}

DiffTensor sum(const DiffTensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return DiffTensor::make_result({1}, {s}, {x}, [x](std::span<const double> g) mutable {
    auto gx = x.grad_buffer();
    for (double& v : gx) v += g[0];
  });
}

DiffTensor mean(const DiffTensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(std::max<std::size_t>(1, x.numel())));
}

DiffTensor reshape(const DiffTensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  return DiffTensor::make_result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()), {x},
                                 [x](std::span<const double> g) mutable {
                                   auto gx = x.grad_buffer();
                                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                 });
}

DiffTensor concat_channels(const DiffTensor& a, const DiffTensor& b) {
  require_rank("concat_channels", a, 4);
  require_rank("concat_channels", b, 4);
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    shape_fail("concat_channels", a.shape(), b.shape());
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<double> out(n * (ca + cb) * hw);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values().begin() + i * ca * hw, ca * hw, out.begin() + i * (ca + cb) * hw);
    std::copy_n(b.values().begin() + i * cb * hw, cb * hw, out.begin() + (i * (ca + cb) + ca) * hw);
  }
  return DiffTensor::make_result({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                                 [a, b, n, ca, cb, hw](std::span<const double> g) mutable {
                                   for (std::size_t i = 0; i < n; ++i) {
                                     if (a.requires_grad()) {
                                       auto ga = a.grad_buffer();
                                       for (std::size_t j = 0; j < ca * hw; ++j) ga[i * ca * hw + j] += g[i * (ca + cb) * hw + j];
                                     }
                                     if (b.requires_grad()) {
                                       auto gb = b.grad_buffer();
                                       for (std::size_t j = 0; j < cb * hw; ++j) gb[i * cb * hw + j] += g[(i * (ca + cb) + ca) * hw + j];
                                     }
                                   }
                                 });
}

DiffTensor stack(const std::vector<DiffTensor>& parts) {
  if (parts.empty()) throw ShapeError("stack: no tensors");
  const Shape& s0 = parts[0].shape();
  for (const auto& p : parts) {
    if (p.shape() != s0) shape_fail("stack", s0, p.shape());
  }
  const std::size_t m = parts[0].numel();
  std::vector<double> out(parts.size() * m);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    std::copy(parts[i].values().begin(), parts[i].values().end(), out.begin() + i * m);
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), s0.begin(), s0.end());
  return DiffTensor::make_result(std::move(shape), std::move(out), parts,
                                 [parts, m](std::span<const double> g) mutable {
                                   for (std::size_t i = 0; i < parts.size(); ++i) {
                                     if (!parts[i].requires_grad()) continue;
                                     auto gp = parts[i].grad_buffer();
                                     for (std::size_t j = 0; j < m; ++j) gp[j] += g[i * m + j];
                                   }
                                 });
}

DiffTensor nchw_to_rows(const DiffTensor& x) {
  require_rank("nchw_to_rows", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const auto xv = x.values();
  std::vector<double> out(x.numel());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) out[(b * hw + p) * c + ch] = xv[(b * c + ch) * hw + p];
  return DiffTensor::make_result({n * hw, c}, std::move(out), {x},
                                 [x, n, c, hw](std::span<const double> g) mutable {
                                   auto gx = x.grad_buffer();
                                   for (std::size_t b = 0; b < n; ++b)
                                     for (std::size_t ch = 0; ch < c; ++ch)
                                       for (std::size_t p = 0; p < hw; ++p)
                                         gx[(b * c + ch) * hw + p] += g[(b * hw + p) * c + ch];
                                 });
}

DiffTensor slice_columns(const DiffTensor& x, std::size_t begin, std::size_t end) {
  require_rank("slice_columns", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (begin > end || end > c) {
    throw ShapeError("slice_columns: [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") outside " + shape_str(x.shape()));
  }
  const std::size_t m = end - begin;
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(x.values().begin() + i * c + begin, m, out.begin() + i * m);
  return DiffTensor::make_result({n, m}, std::move(out), {x},
                                 [x, n, c, m, begin](std::span<const double> g) mutable {
                                   auto gx = x.grad_buffer();
                                   for (std::size_t i = 0; i < n; ++i)
                                     for (std::size_t j = 0; j < m; ++j) gx[i * c + begin + j] += g[i * m + j];
                                 });
}

DiffTensor gather_rows(const DiffTensor& x, std::span<const std::size_t> rows) {
  require_rank("gather_rows", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw std::out_of_range("gather_rows: row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(x.values().begin() + rows[i] * c, c, out.begin() + i * c);
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return DiffTensor::make_result({rows.size(), c}, std::move(out), {x},
                                 [x, idx = std::move(idx), c](std::span<const double> g) mutable {
                                   auto gx = x.grad_buffer();
                                   for (std::size_t i = 0; i < idx.size(); ++i)
                                     for (std::size_t j = 0; j < c; ++j) gx[idx[i] * c + j] += g[i * c + j];
                                 });
}

DiffTensor batch_norm(const DiffTensor& x, const DiffTensor& gamma, const DiffTensor& beta,
                      double epsilon, std::vector<double>* batch_mean, std::vector<double>* batch_var) {
  require_rank("batch_norm", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (gamma.numel() != c || beta.numel() != c) shape_fail("batch_norm", x.shape(), gamma.shape());
  if (n == 0) throw std::invalid_argument("batch_norm: empty batch");
  const auto xv = x.values();
  std::vector<double> mu(c, 0.0), var(c, 0.0), inv(c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mu[j] += xv[i * c + j];
  for (double& m : mu) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double d = xv[i * c + j] - mu[j];
      var[j] += d * d;
    }
  for (std::size_t j = 0; j < c; ++j) {
    var[j] /= static_cast<double>(n);
    inv[j] = 1.0 / std::sqrt(var[j] + epsilon);
  }
  std::vector<double> xhat(n * c), out(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xv[i * c + j] - mu[j]) * inv[j];
      out[i * c + j] = gamma.values()[j] * xhat[i * c + j] + beta.values()[j];
    }
  if (batch_mean) *batch_mean = mu;
  if (batch_var) *batch_var = var;
  return DiffTensor::make_result(
      {n, c}, std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv), n, c](std::span<const double> g) mutable {
        std::vector<double> sg(c, 0.0), sgx(c, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            sg[j] += g[i * c + j];
            sgx[j] += g[i * c + j] * xhat[i * c + j];
          }
        if (gamma.requires_grad()) {
          auto gg = gamma.grad_buffer();
          for (std::size_t j = 0; j < c; ++j) gg[j] += sgx[j];
        }
        if (beta.requires_grad()) {
          auto gb = beta.grad_buffer();
          for (std::size_t j = 0; j < c; ++j) gb[j] += sg[j];
        }
        if (x.requires_grad()) {
          auto gx = x.grad_buffer();
          const double nn = static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
              const double gh = gamma.values()[j];
              gx[i * c + j] += gh * inv[j] * (g[i * c + j] - sg[j] / nn - xhat[i * c + j] * sgx[j] / nn);
            }
        }
      });
}

DiffTensor batch_norm_inference(const DiffTensor& x, const DiffTensor& gamma, const DiffTensor& beta,
                                std::span<const double> mean, std::span<const double> var,
                                double epsilon) {
  require_rank("batch_norm_inference", x, 2);
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (gamma.numel() != c || beta.numel() != c || mean.size() != c || var.size() != c) {
    shape_fail("batch_norm_inference", x.shape(), gamma.shape());
  }
  std::vector<double> inv(c);
  for (std::size_t j = 0; j < c; ++j) inv[j] = 1.0 / std::sqrt(var[j] + epsilon);
  std::vector<double> out(n * c);
  std::vector<double> mu(mean.begin(), mean.end());
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = gamma.values()[j] * (xv[i * c + j] - mu[j]) * inv[j] + beta.values()[j];
  return DiffTensor::make_result(
      {n, c}, std::move(out), {x, gamma, beta},
      [x, gamma, beta, mu = std::move(mu), inv = std::move(inv), n, c](std::span<const double> g) mutable {
        const auto xv = x.values();
        if (x.requires_grad()) {
          auto gx = x.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i * c + j] * gamma.values()[j] * inv[j];
        }
        if (gamma.requires_grad()) {
          auto gg = gamma.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (xv[i * c + j] - mu[j]) * inv[j];
        }
        if (beta.requires_grad()) {
          auto gb = beta.grad_buffer();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
      });
}

}  // namespace promptdet
