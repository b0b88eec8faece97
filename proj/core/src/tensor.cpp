#include "msl/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <sstream>
#include <stdexcept>

extern "C" void openblas_set_num_threads(int) __attribute__((weak));

namespace msl {

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

using detail::BackwardPass;
using detail::Node;
using detail::NodePtr;
using detail::OpKind;

void validate_shape(const Shape& shape, const char* who) {
  for (int d : shape) {
    if (d <= 0)
      throw std::invalid_argument(std::string(who) + ": nonpositive extent in " +
                                  shape_str(shape));
  }
}

NodePtr make_leaf(Shape shape, std::vector<double> values, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

NodePtr make_op(Shape shape, OpKind kind, std::vector<NodePtr> parents) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data.resize(shape_numel(node->shape));
  node->kind = kind;
  node->parents = std::move(parents);
  for (const auto& p : node->parents)
    if (p->requires_grad) node->requires_grad = true;
  return node;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(who) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

// Single-threaded row-major dgemm wrapper. OpenBLAS is pinned to one
// thread so every reduction runs in a fixed order (bit-reproducibility).
void matmul(bool trans_a, bool trans_b, int m, int n, int k, const double* a,
            const double* b, double* c, double beta) {
  static const bool init = [] {
    setenv("OPENBLAS_NUM_THREADS", "1", 0);
    if (openblas_set_num_threads) openblas_set_num_threads(1);
    return true;
  }();
  (void)init;
  const int lda = trans_a ? m : k;
  const int ldb = trans_b ? k : n;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0, a, lda, b,
              ldb, beta, c, n);
}

}  // namespace

namespace detail {

std::vector<double>& BackwardPass::slot(const Node* node) {
  auto it = grads_.find(node);
  if (it == grads_.end()) {
    it = grads_.emplace(node, std::vector<double>(node->data.size(), 0.0))
             .first;
  }
  return it->second;
}

bool BackwardPass::has(const Node* node) const {
  return grads_.find(node) != grads_.end();
}

void BackwardPass::accumulate(const Node* node,
                              std::span<const double> values) {
  auto& g = slot(node);
  for (size_t i = 0; i < values.size(); ++i) g[i] += values[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape, "Tensor::zeros");
  std::vector<double> values(shape_numel(shape), 0.0);
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape, "Tensor::full");
  std::vector<double> values(shape_numel(shape), value);
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  validate_shape(shape, "Tensor::from_data");
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw std::invalid_argument(
        "Tensor::from_data: " + std::to_string(values.size()) +
        " values for shape " + shape_str(shape));
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::wrap(detail::NodePtr node) { return Tensor(std::move(node)); }

const Shape& Tensor::shape() const { return node_->shape; }
int64_t Tensor::numel() const { return node_->numel(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::value() const {
  if (numel() != 1)
    throw std::invalid_argument("Tensor::value: tensor has " +
                                std::to_string(numel()) + " elements");
  return node_->data[0];
}

std::span<const double> Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::copy(bool requires_grad) const {
  return Tensor(make_leaf(node_->shape, node_->data, requires_grad));
}

bool Tensor::all_finite() const {
  for (double v : node_->data)
    if (!std::isfinite(v)) return false;
  return true;
}

uint64_t Tensor::fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* bytes, size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (int d : node_->shape) feed(&d, sizeof(d));
  feed(node_->data.data(), node_->data.size() * sizeof(double));
  return h;
}

// ---------------------------------------------------------------------------
// Elementwise ops

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto out = make_op(a.shape(), OpKind::add, {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = av[i] + bv[i];
  if (out->requires_grad) {
    out->vjp = [](const Node& self, const std::vector<double>& gout,
                  BackwardPass& bp) {
      if (self.parents[0]->requires_grad)
        bp.accumulate(self.parents[0].get(), gout);
      if (self.parents[1]->requires_grad)
        bp.accumulate(self.parents[1].get(), gout);
    };
  }
  return Tensor::wrap(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto out = make_op(a.shape(), OpKind::sub, {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = av[i] - bv[i];
  if (out->requires_grad) {
    out->vjp = [](const Node& self, const std::vector<double>& gout,
                  BackwardPass& bp) {
      if (self.parents[0]->requires_grad)
        bp.accumulate(self.parents[0].get(), gout);
      if (self.parents[1]->requires_grad) {
        auto& g = bp.slot(self.parents[1].get());
        for (size_t i = 0; i < gout.size(); ++i) g[i] -= gout[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto out = make_op(a.shape(), OpKind::mul, {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = av[i] * bv[i];
  if (out->requires_grad) {
    out->vjp = [](const Node& self, const std::vector<double>& gout,
                  BackwardPass& bp) {
      const auto& av = self.parents[0]->data;
      const auto& bv = self.parents[1]->data;
      if (self.parents[0]->requires_grad) {
        auto& g = bp.slot(self.parents[0].get());
        for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * bv[i];
      }
      if (self.parents[1]->requires_grad) {
        auto& g = bp.slot(self.parents[1].get());
        for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * av[i];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor scale(const Tensor& a, double factor) {
  auto out = make_op(a.shape(), OpKind::scale, {a.node()});
  const auto& av = a.data();
  for (int64_t i = 0; i < out->numel(); ++i) out->data[i] = av[i] * factor;
  if (out->requires_grad) {
    out->vjp = [factor](const Node& self, const std::vector<double>& gout,
                        BackwardPass& bp) {
      auto& g = bp.slot(self.parents[0].get());
      for (size_t i = 0; i < gout.size(); ++i) g[i] += gout[i] * factor;
    };
  }
  return Tensor::wrap(out);
}

Tensor sum(const Tensor& a) {
  auto out = make_op({1}, OpKind::sum, {a.node()});
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out->data[0] = acc;
  if (out->requires_grad) {
    out->vjp = [](const Node& self, const std::vector<double>& gout,
                  BackwardPass& bp) {
      auto& g = bp.slot(self.parents[0].get());
      for (size_t i = 0; i < g.size(); ++i) g[i] += gout[0];
    };
  }
  return Tensor::wrap(out);
}

Tensor sigmoid(const Tensor& x) {
  auto out = make_op(x.shape(), OpKind::sigmoid, {x.node()});
  const auto& xv = x.data();
  for (int64_t i = 0; i < out->numel(); ++i) {
    const double v = xv[i];
    if (v >= 0.0) {
      out->data[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      out->data[i] = e / (1.0 + e);
    }
  }
  if (out->requires_grad) {
    out->vjp = [](const Node& self, const std::vector<double>& gout,
                  BackwardPass& bp) {
      auto& g = bp.slot(self.parents[0].get());
      for (size_t i = 0; i < gout.size(); ++i) {
        const double s = self.data[i];
        g[i] += gout[i] * s * (1.0 - s);
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor relu(const Tensor& x) {
  auto out = make_op(x.shape(), OpKind::relu, {x.node()});
  const auto& xv = x.data();
  for (int64_t i = 0; i < out->numel(); ++i)
    out->data[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (out->requires_grad) {
    out->vjp = [](const Node& self, const std::vector<double>& gout,
                  BackwardPass& bp) {
      const auto& xv = self.parents[0]->data;
      auto& g = bp.slot(self.parents[0].get());
      for (size_t i = 0; i < gout.size(); ++i)
        if (xv[i] > 0.0) g[i] += gout[i];
    };
  }
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// conv2d

namespace {

struct ConvDims {
  int n, c, h, w, f, kh, kw, ho, wo, stride, padding;
  int64_t ckk() const { return static_cast<int64_t>(c) * kh * kw; }
  int64_t cols() const { return static_cast<int64_t>(n) * ho * wo; }
};

ConvDims conv_dims(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                   int stride, int padding) {
  if (x.shape().size() != 4)
    throw std::invalid_argument("conv2d: input must be [N,C,H,W], got " +
                                shape_str(x.shape()));
  if (kernel.shape().size() != 4)
    throw std::invalid_argument("conv2d: kernel must be [F,C,kh,kw], got " +
                                shape_str(kernel.shape()));
  if (bias.shape().size() != 1 || bias.shape()[0] != kernel.shape()[0])
    throw std::invalid_argument(
        "conv2d: bias must be [F=" + std::to_string(kernel.shape()[0]) +
        "], got " + shape_str(bias.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (padding < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  ConvDims d;
  d.n = x.shape()[0];
  d.c = x.shape()[1];
  d.h = x.shape()[2];
  d.w = x.shape()[3];
  d.f = kernel.shape()[0];
  d.kh = kernel.shape()[2];
  d.kw = kernel.shape()[3];
  d.stride = stride;
  d.padding = padding;
  if (kernel.shape()[1] != d.c)
    throw std::invalid_argument(
        "conv2d: kernel channel dim " + std::to_string(kernel.shape()[1]) +
        " does not match input channels " + std::to_string(d.c));
  if (d.kh > d.h + 2 * padding || d.kw > d.w + 2 * padding)
    throw std::invalid_argument(
        "conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
        " larger than padded input " + std::to_string(d.h + 2 * padding) +
        "x" + std::to_string(d.w + 2 * padding));
  d.ho = (d.h + 2 * padding - d.kh) / stride + 1;
  d.wo = (d.w + 2 * padding - d.kw) / stride + 1;
  return d;
}

// col[(c*kh+di)*kw+dj, (n*ho+oy)*wo+ox] = x[n,c,oy*s-p+di,ox*s-p+dj]
void im2col(const ConvDims& d, const double* x, double* col) {
  const int64_t plane = static_cast<int64_t>(d.h) * d.w;
  const int64_t cols = d.cols();
  for (int c = 0; c < d.c; ++c) {
    for (int di = 0; di < d.kh; ++di) {
      for (int dj = 0; dj < d.kw; ++dj) {
        double* row = col + ((static_cast<int64_t>(c) * d.kh + di) * d.kw + dj) * cols;
        for (int n = 0; n < d.n; ++n) {
          const double* xc = x + (static_cast<int64_t>(n) * d.c + c) * plane;
          for (int oy = 0; oy < d.ho; ++oy) {
            const int iy = oy * d.stride - d.padding + di;
            double* dst = row + (static_cast<int64_t>(n) * d.ho + oy) * d.wo;
            if (iy < 0 || iy >= d.h) {
              std::fill(dst, dst + d.wo, 0.0);
              continue;
            }
            const double* src = xc + static_cast<int64_t>(iy) * d.w;
            for (int ox = 0; ox < d.wo; ++ox) {
              const int ix = ox * d.stride - d.padding + dj;
              dst[ox] = (ix >= 0 && ix < d.w) ? src[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvDims& d, const double* col, double* gx) {
  const int64_t plane = static_cast<int64_t>(d.h) * d.w;
  const int64_t cols = d.cols();
  for (int c = 0; c < d.c; ++c) {
    for (int di = 0; di < d.kh; ++di) {
      for (int dj = 0; dj < d.kw; ++dj) {
        const double* row =
            col + ((static_cast<int64_t>(c) * d.kh + di) * d.kw + dj) * cols;
        for (int n = 0; n < d.n; ++n) {
          double* gc = gx + (static_cast<int64_t>(n) * d.c + c) * plane;
          for (int oy = 0; oy < d.ho; ++oy) {
            const int iy = oy * d.stride - d.padding + di;
            if (iy < 0 || iy >= d.h) continue;
            const double* src = row + (static_cast<int64_t>(n) * d.ho + oy) * d.wo;
            double* dst = gc + static_cast<int64_t>(iy) * d.w;
            for (int ox = 0; ox < d.wo; ++ox) {
              const int ix = ox * d.stride - d.padding + dj;
              if (ix >= 0 && ix < d.w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int stride, int padding) {
  const ConvDims d = conv_dims(x, kernel, bias, stride, padding);
  auto out = make_op({d.n, d.f, d.ho, d.wo}, OpKind::conv2d,
                     {x.node(), kernel.node(), bias.node()});

  auto col = std::make_shared<std::vector<double>>(d.ckk() * d.cols());
  im2col(d, x.data().data(), col->data());

  // outmat[f, s] = kernel_mat[f, :] . col[:, s]
  std::vector<double> outmat(static_cast<int64_t>(d.f) * d.cols());
  matmul(false, false, d.f, static_cast<int>(d.cols()),
         static_cast<int>(d.ckk()), kernel.data().data(), col->data(),
         outmat.data(), 0.0);

  const int64_t hw = static_cast<int64_t>(d.ho) * d.wo;
  const auto& bv = bias.data();
  for (int n = 0; n < d.n; ++n) {
    for (int f = 0; f < d.f; ++f) {
      const double* src = outmat.data() + f * d.cols() + n * hw;
      double* dst = out->data.data() + (static_cast<int64_t>(n) * d.f + f) * hw;
      const double b = bv[f];
      for (int64_t i = 0; i < hw; ++i) dst[i] = src[i] + b;
    }
  }

  if (out->requires_grad) {
    // Keep col only when the kernel gradient will need it.
    if (!kernel.requires_grad()) col.reset();
    out->vjp = [d, col](const Node& self, const std::vector<double>& gout,
                        BackwardPass& bp) {
      const Node* xn = self.parents[0].get();
      const Node* kn = self.parents[1].get();
      const Node* bn = self.parents[2].get();
      const int64_t hw = static_cast<int64_t>(d.ho) * d.wo;

      // gather gout into [F, N*Ho*Wo]
      std::vector<double> gmat(static_cast<int64_t>(d.f) * d.cols());
      for (int n = 0; n < d.n; ++n)
        for (int f = 0; f < d.f; ++f)
          std::memcpy(gmat.data() + f * d.cols() + n * hw,
                      gout.data() + (static_cast<int64_t>(n) * d.f + f) * hw,
                      hw * sizeof(double));

      if (bn->requires_grad) {
        auto& gb = bp.slot(bn);
        for (int f = 0; f < d.f; ++f) {
          double acc = 0.0;
          const double* row = gmat.data() + f * d.cols();
          for (int64_t s = 0; s < d.cols(); ++s) acc += row[s];
          gb[f] += acc;
        }
      }
      if (kn->requires_grad) {
        auto& gk = bp.slot(kn);
        matmul(false, true, d.f, static_cast<int>(d.ckk()),
               static_cast<int>(d.cols()), gmat.data(), col->data(), gk.data(),
               1.0);
      }
      if (xn->requires_grad) {
        std::vector<double> gcol(d.ckk() * d.cols());
        matmul(true, false, static_cast<int>(d.ckk()),
               static_cast<int>(d.cols()), d.f, kn->data.data(), gmat.data(),
               gcol.data(), 0.0);
        col2im_add(d, gcol.data(), bp.slot(xn).data());
      }
    };
  }
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// linear

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("linear: input must be [N,D], got " +
                                shape_str(x.shape()));
  if (weight.shape().size() != 2)
    throw std::invalid_argument("linear: weight must be [K,D], got " +
                                shape_str(weight.shape()));
  const int n = x.shape()[0], din = x.shape()[1];
  const int k = weight.shape()[0];
  if (weight.shape()[1] != din)
    throw std::invalid_argument(
        "linear: weight inner dim " + std::to_string(weight.shape()[1]) +
        " does not match input dim " + std::to_string(din));
  if (bias.shape().size() != 1 || bias.shape()[0] != k)
    throw std::invalid_argument("linear: bias must be [K=" + std::to_string(k) +
                                "], got " + shape_str(bias.shape()));

  auto out =
      make_op({n, k}, OpKind::linear, {x.node(), weight.node(), bias.node()});
  matmul(false, true, n, k, din, x.data().data(), weight.data().data(),
         out->data.data(), 0.0);
  const auto& bv = bias.data();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j) out->data[static_cast<int64_t>(i) * k + j] += bv[j];

  if (out->requires_grad) {
    out->vjp = [n, k, din](const Node& self, const std::vector<double>& gout,
                           BackwardPass& bp) {
      const Node* xn = self.parents[0].get();
      const Node* wn = self.parents[1].get();
      const Node* bn = self.parents[2].get();
      if (xn->requires_grad) {
        // gx[N,D] += gout[N,K] * W[K,D]
        matmul(false, false, n, din, k, gout.data(), wn->data.data(),
               bp.slot(xn).data(), 1.0);
      }
      if (wn->requires_grad) {
        // gw[K,D] += gout^T[K,N] * x[N,D]
        matmul(true, false, k, din, n, gout.data(), xn->data.data(),
               bp.slot(wn).data(), 1.0);
      }
      if (bn->requires_grad) {
        auto& gb = bp.slot(bn);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < k; ++j) gb[j] += gout[static_cast<int64_t>(i) * k + j];
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.shape().size() != 4)
    throw std::invalid_argument("global_avg_pool: input must be [N,C,H,W], got " +
                                shape_str(x.shape()));
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2],
            w = x.shape()[3];
  const int64_t hw = static_cast<int64_t>(h) * w;
  auto out = make_op({n, c}, OpKind::gap, {x.node()});
  const auto& xv = x.data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const double* src = xv.data() + (static_cast<int64_t>(i) * c + j) * hw;
      double acc = 0.0;
      for (int64_t s = 0; s < hw; ++s) acc += src[s];
      out->data[static_cast<int64_t>(i) * c + j] = acc / static_cast<double>(hw);
    }
  }
  if (out->requires_grad) {
    out->vjp = [n, c, hw](const Node& self, const std::vector<double>& gout,
                          BackwardPass& bp) {
      auto& g = bp.slot(self.parents[0].get());
      const double inv = 1.0 / static_cast<double>(hw);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) {
          const double gv = gout[static_cast<int64_t>(i) * c + j] * inv;
          double* dst = g.data() + (static_cast<int64_t>(i) * c + j) * hw;
          for (int64_t s = 0; s < hw; ++s) dst[s] += gv;
        }
    };
  }
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// losses

namespace {

void validate_binary_targets(const Tensor& target, const char* who) {
  for (double t : target.data())
    if (t != 0.0 && t != 1.0)
      throw std::invalid_argument(std::string(who) +
                                  ": target values must be exactly 0 or 1");
}

double softplus_neg_abs(double z) {
  // log(1 + exp(-|z|)), always safe
  return std::log1p(std::exp(-std::abs(z)));
}

}  // namespace

Tensor bce_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "bce_loss");
  validate_binary_targets(target, "bce_loss");
  const int64_t count = pred.numel();
  const double inv = 1.0 / static_cast<double>(count);

  const bool fused = pred.node()->kind == OpKind::sigmoid;
  if (fused) {
    // loss = mean( max(z,0) - z*t + log(1+exp(-|z|)) ), d/dz = (sigma(z)-t)/count
    auto logits = pred.node()->parents[0];
    auto sig = pred.node();  // holds sigma(z) for the gradient
    auto out = make_op({1}, OpKind::bce, {logits});
    auto tgt = target.node();
    const auto& zv = logits->data;
    const auto& tv = tgt->data;
    double acc = 0.0;
    for (int64_t i = 0; i < count; ++i) {
      const double z = zv[i];
      acc += std::max(z, 0.0) - z * tv[i] + softplus_neg_abs(z);
    }
    out->data[0] = acc * inv;
    if (out->requires_grad) {
      out->vjp = [sig, tgt, inv, count](const Node& self,
                                        const std::vector<double>& gout,
                                        BackwardPass& bp) {
        auto& g = bp.slot(self.parents[0].get());
        for (int64_t i = 0; i < count; ++i)
          g[i] += gout[0] * (sig->data[i] - tgt->data[i]) * inv;
      };
    }
    return Tensor::wrap(out);
  }

  constexpr double kEps = 1e-12;
  auto out = make_op({1}, OpKind::bce, {pred.node()});
  auto tgt = target.node();
  const auto& pv = pred.data();
  const auto& tv = tgt->data;
  double acc = 0.0;
  for (int64_t i = 0; i < count; ++i) {
    const double p = pv[i];
    if (p < 0.0 || p > 1.0)
      throw std::invalid_argument("bce_loss: pred value outside [0,1]");
    const double pc = std::clamp(p, kEps, 1.0 - kEps);
    acc -= tv[i] * std::log(pc) + (1.0 - tv[i]) * std::log(1.0 - pc);
  }
  out->data[0] = acc * inv;
  if (out->requires_grad) {
    out->vjp = [tgt, inv, count](const Node& self,
                                 const std::vector<double>& gout,
                                 BackwardPass& bp) {
      const auto& pv = self.parents[0]->data;
      auto& g = bp.slot(self.parents[0].get());
      for (int64_t i = 0; i < count; ++i) {
        const double p = pv[i];
        if (p < kEps || p > 1.0 - kEps) continue;  // flat clamp region
        g[i] += gout[0] * (p - tgt->data[i]) / (p * (1.0 - p)) * inv;
      }
    };
  }
  return Tensor::wrap(out);
}

Tensor consistency_loss(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "consistency_loss");
  if (a.shape().empty())
    throw std::invalid_argument("consistency_loss: rank must be >= 1");
  const int batch = a.shape()[0];
  const double inv = 1.0 / static_cast<double>(batch);
  auto out = make_op({1}, OpKind::laco, {a.node(), b.node()});
  const auto& av = a.data();
  const auto& bv = b.data();
  double acc = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  out->data[0] = acc * inv;
  if (out->requires_grad) {
    out->vjp = [inv](const Node& self, const std::vector<double>& gout,
                     BackwardPass& bp) {
      const auto& av = self.parents[0]->data;
      const auto& bv = self.parents[1]->data;
      const double c = 2.0 * inv * gout[0];
      if (self.parents[0]->requires_grad) {
        auto& g = bp.slot(self.parents[0].get());
        for (size_t i = 0; i < av.size(); ++i) g[i] += c * (av[i] - bv[i]);
      }
      if (self.parents[1]->requires_grad) {
        auto& g = bp.slot(self.parents[1].get());
        for (size_t i = 0; i < av.size(); ++i) g[i] -= c * (av[i] - bv[i]);
      }
    };
  }
  return Tensor::wrap(out);
}

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw std::invalid_argument(
        "backward: loss does not depend on any requires-grad tensor");

  // Post-order DFS over the requires-grad subgraph; reversed, this visits
  // every node before its parents.
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;  // 0 new, 1 open, 2 done
  std::vector<Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    Node* node = stack.back();
    int& st = state[node];
    if (st == 0) {
      st = 1;
      for (const auto& p : node->parents)
        if (p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        order.push_back(node);
      }
    }
  }

  detail::BackwardPass bp;
  bp.slot(loss.node().get())[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->vjp || !bp.has(node)) continue;
    node->vjp(*node, bp.slot(node), bp);
  }
  for (Node* node : order) {
    if (node->kind != OpKind::leaf || !node->requires_grad || !bp.has(node))
      continue;
    auto& src = bp.slot(node);
    if (node->grad.empty()) node->grad.assign(node->data.size(), 0.0);
    for (size_t i = 0; i < src.size(); ++i) node->grad[i] += src[i];
  }
}

}  // namespace msl
