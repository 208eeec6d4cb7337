#include "irformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace irformer {

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  s += ")";
  return s;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

namespace {

thread_local int g_no_grad_depth = 0;

void require_shape(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

template <typename T>
void require_defined(const TensorT<T>& t, const char* what) {
  if (!t.defined()) throw ContractError(std::string(what) + ": undefined tensor");
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool NoGradGuard::recording_enabled() { return g_no_grad_depth == 0; }

// ---------------------------------------------------------------------------
// TensorT
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> TensorT<T>::from_data(Shape shape, std::vector<T> values,
                                 bool requires_grad) {
  std::size_t n = shape_numel(shape);
  if (n != values.size())
    throw ShapeError("data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  TensorT t;
  t.impl_ = std::make_shared<detail::TensorNode<T>>();
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  t.impl_->tracked = requires_grad;
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
TensorT<T> TensorT<T>::full(Shape shape, T value) {
  std::size_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
TensorT<T> TensorT<T>::scalar(T value) {
  return from_data({1}, {value});
}

template <typename T>
TensorT<T> TensorT<T>::random_uniform(Shape shape, std::mt19937_64& rng, T lo,
                                      T hi) {
  std::size_t n = shape_numel(shape);
  std::vector<T> v(n);
  // Draw in double so float and double instantiations see the same sequence.
  std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                              static_cast<double>(hi));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return from_data(std::move(shape), std::move(v));
}

template <typename T>
const Shape& TensorT<T>::shape() const {
  require_defined(*this, "shape");
  return impl_->shape;
}

template <typename T>
int TensorT<T>::dim(int i) const {
  const Shape& s = shape();
  if (i < 0 || i >= static_cast<int>(s.size()))
    throw ShapeError("dim index " + std::to_string(i) + " out of range for " +
                     shape_str(s));
  return s[i];
}

template <typename T>
std::size_t TensorT<T>::numel() const {
  require_defined(*this, "numel");
  return impl_->data.size();
}

template <typename T>
std::span<T> TensorT<T>::data() {
  require_defined(*this, "data");
  return impl_->data;
}

template <typename T>
std::span<const T> TensorT<T>::data() const {
  require_defined(*this, "data");
  return impl_->data;
}

template <typename T>
bool TensorT<T>::has_grad() const {
  return defined() && !impl_->grad.empty();
}

template <typename T>
std::span<const T> TensorT<T>::grad() const {
  require_defined(*this, "grad");
  if (impl_->grad.empty())
    throw ContractError("grad: no gradient present (run backward first)");
  return impl_->grad;
}

template <typename T>
std::span<T> TensorT<T>::grad_mut() {
  require_defined(*this, "grad_mut");
  impl_->ensure_grad();
  return impl_->grad;
}

template <typename T>
void TensorT<T>::zero_grad() {
  require_defined(*this, "zero_grad");
  impl_->grad.clear();
}

template <typename T>
bool TensorT<T>::requires_grad() const {
  return defined() && impl_->requires_grad;
}

template <typename T>
TensorT<T>& TensorT<T>::set_requires_grad(bool value) {
  require_defined(*this, "set_requires_grad");
  impl_->requires_grad = value;
  if (value) impl_->tracked = true;
  return *this;
}

template <typename T>
bool TensorT<T>::tracked() const {
  return defined() && impl_->tracked;
}

template <typename T>
T TensorT<T>::item() const {
  require_defined(*this, "item");
  if (numel() != 1)
    throw ContractError("item: tensor has " + std::to_string(numel()) +
                        " elements, expected 1");
  return impl_->data[0];
}

template <typename T>
TensorT<T> TensorT<T>::detach() const {
  require_defined(*this, "detach");
  return from_data(impl_->shape, impl_->data);
}

// ---------------------------------------------------------------------------
// op plumbing
// ---------------------------------------------------------------------------

namespace {

template <typename T>
using Node = detail::TensorNode<T>;

template <typename T>
TensorT<T> make_from_op(const char* op, Shape shape, std::vector<T> data,
                        std::vector<TensorT<T>> parents,
                        std::function<void(Node<T>&)> backward_fn) {
  auto out = TensorT<T>::from_data(std::move(shape), std::move(data));
  bool track = false;
  if (NoGradGuard::recording_enabled()) {
    for (const auto& p : parents)
      if (p.tracked()) {
        track = true;
        break;
      }
  }
  if (track) {
    Node<T>* n = out.node();
    n->tracked = true;
    n->op = op;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

// Broadcast classification for add/mul.
enum class Bcast { kNone, kSame, kScalarA, kScalarB, kChannelA, kChannelB, kPixelA, kPixelB };

// Channel pattern: (N or 1, C, 1, 1) against (N, C, H, W).
// Pixel pattern:   (N or 1, 1, H, W) against (N, C, H, W).
inline bool channel_pattern(const Shape& small, const Shape& big) {
  return small.size() == 4 && big.size() == 4 &&
         (small[0] == big[0] || small[0] == 1) && small[1] == big[1] &&
         small[2] == 1 && small[3] == 1;
}

inline bool pixel_pattern(const Shape& small, const Shape& big) {
  return small.size() == 4 && big.size() == 4 &&
         (small[0] == big[0] || small[0] == 1) && small[1] == 1 &&
         small[2] == big[2] && small[3] == big[3];
}

inline Bcast classify_broadcast(const Shape& a, const Shape& b,
                                const char* op) {
  if (a == b) return Bcast::kSame;
  if (shape_numel(a) == 1) return Bcast::kScalarA;
  if (shape_numel(b) == 1) return Bcast::kScalarB;
  if (channel_pattern(b, a)) return Bcast::kChannelB;
  if (channel_pattern(a, b)) return Bcast::kChannelA;
  if (pixel_pattern(b, a)) return Bcast::kPixelB;
  if (pixel_pattern(a, b)) return Bcast::kPixelA;
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                   shape_str(b) +
                   " are neither equal nor per-channel/per-pixel/scalar "
                   "broadcastable");
}

// Applies fn(big_index, small_index) over the broadcast pairing where
// `small` follows the channel pattern against `big`.
template <typename F>
void for_each_channel_pair(const Shape& big, const Shape& small, F&& fn) {
  const std::size_t n = big[0], c = big[1], hw = static_cast<std::size_t>(big[2]) * big[3];
  const bool batch1 = small[0] == 1;
  std::size_t bi = 0;
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t ic = 0; ic < c; ++ic) {
      const std::size_t si = (batch1 ? 0 : in) * c + ic;
      for (std::size_t p = 0; p < hw; ++p, ++bi) fn(bi, si);
    }
}

template <typename F>
void for_each_pixel_pair(const Shape& big, const Shape& small, F&& fn) {
  const std::size_t n = big[0], c = big[1], hw = static_cast<std::size_t>(big[2]) * big[3];
  const bool batch1 = small[0] == 1;
  std::size_t bi = 0;
  for (std::size_t in = 0; in < n; ++in)
    for (std::size_t ic = 0; ic < c; ++ic) {
      const std::size_t sbase = (batch1 ? 0 : in) * hw;
      for (std::size_t p = 0; p < hw; ++p, ++bi) fn(bi, sbase + p);
    }
}

// Elementwise binary op with the sanctioned broadcast patterns.
// combine(a,b) -> value; da(a,b,g) and db(a,b,g) give the input gradients.
template <typename T, typename FwdF, typename DaF, typename DbF>
TensorT<T> broadcast_binary(const char* name, const TensorT<T>& a,
                            const TensorT<T>& b, FwdF combine, DaF da, DbF db) {
  require_defined(a, name);
  require_defined(b, name);
  const Bcast mode = classify_broadcast(a.shape(), b.shape(), name);
  const bool a_big = !(mode == Bcast::kScalarA || mode == Bcast::kChannelA ||
                       mode == Bcast::kPixelA);
  const TensorT<T>& big = a_big ? a : b;
  const TensorT<T>& small = a_big ? b : a;

  std::vector<T> out(big.numel());
  auto bd = big.data();
  auto sd = small.data();
  auto fwd_at = [&](std::size_t bi, std::size_t si) {
    out[bi] = a_big ? combine(bd[bi], sd[si]) : combine(sd[si], bd[bi]);
  };
  switch (mode) {
    case Bcast::kSame:
      for (std::size_t i = 0; i < out.size(); ++i) fwd_at(i, i);
      break;
    case Bcast::kScalarA:
    case Bcast::kScalarB:
      for (std::size_t i = 0; i < out.size(); ++i) fwd_at(i, 0);
      break;
    case Bcast::kChannelA:
    case Bcast::kChannelB:
      for_each_channel_pair(big.shape(), small.shape(), fwd_at);
      break;
    case Bcast::kPixelA:
    case Bcast::kPixelB:
      for_each_pixel_pair(big.shape(), small.shape(), fwd_at);
      break;
    default:
      throw ShapeError("unreachable");
  }

  return make_from_op<T>(
      name, big.shape(), std::move(out), {a, b},
      [mode, a_big, da, db](Node<T>& self) {
        TensorT<T> pa = self.parents[0];
        TensorT<T> pb = self.parents[1];
        const TensorT<T>& big = a_big ? pa : pb;
        const TensorT<T>& small = a_big ? pb : pa;
        const auto& g = self.grad;
        auto av = pa.data();
        auto bv = pb.data();
        const bool want_a = pa.tracked();
        const bool want_b = pb.tracked();
        if (!want_a && !want_b) return;
        if (want_a) pa.node()->ensure_grad();
        if (want_b) pb.node()->ensure_grad();
        auto& ga = pa.node()->grad;
        auto& gb = pb.node()->grad;
        auto acc_at = [&](std::size_t bi, std::size_t si) {
          const std::size_t ai = a_big ? bi : si;
          const std::size_t bj = a_big ? si : bi;
          if (want_a) ga[ai] += da(av[ai], bv[bj], g[bi]);
          if (want_b) gb[bj] += db(av[ai], bv[bj], g[bi]);
        };
        switch (mode) {
          case Bcast::kSame:
            for (std::size_t i = 0; i < g.size(); ++i) acc_at(i, i);
            break;
          case Bcast::kScalarA:
          case Bcast::kScalarB:
            for (std::size_t i = 0; i < g.size(); ++i) acc_at(i, 0);
            break;
          case Bcast::kChannelA:
          case Bcast::kChannelB:
            for_each_channel_pair(big.shape(), small.shape(), acc_at);
            break;
          case Bcast::kPixelA:
          case Bcast::kPixelB:
            for_each_pixel_pair(big.shape(), small.shape(), acc_at);
            break;
          default:
            break;
        }
      });
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return broadcast_binary<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T, T, T g) { return g; }, [](T, T, T g) { return g; });
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  return broadcast_binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T, T y, T g) { return g * y; }, [](T x, T, T g) { return g * x; });
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  require_shape(a.shape() == b.shape(), "sub: shapes " + shape_str(a.shape()) +
                                            " and " + shape_str(b.shape()) +
                                            " differ");
  std::vector<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return make_from_op<T>("sub", a.shape(), std::move(out), {a, b},
                         [](Node<T>& self) {
                           auto& g = self.grad;
                           auto pa = self.parents[0];
                           auto pb = self.parents[1];
                           if (pa.tracked()) {
                             pa.node()->ensure_grad();
                             auto& ga = pa.node()->grad;
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[i] += g[i];
                           }
                           if (pb.tracked()) {
                             pb.node()->ensure_grad();
                             auto& gb = pb.node()->grad;
                             for (std::size_t i = 0; i < g.size(); ++i)
                               gb[i] -= g[i];
                           }
                         });
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
  require_defined(a, "div");
  require_defined(b, "div");
  require_shape(a.shape() == b.shape(), "div: shapes " + shape_str(a.shape()) +
                                            " and " + shape_str(b.shape()) +
                                            " differ");
  std::vector<T> out(a.numel());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return make_from_op<T>(
      "div", a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
        auto& g = self.grad;
        auto pa = self.parents[0];
        auto pb = self.parents[1];
        auto av = pa.data();
        auto bv = pb.data();
        if (pa.tracked()) {
          pa.node()->ensure_grad();
          auto& ga = pa.node()->grad;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
        }
        if (pb.tracked()) {
          pb.node()->ensure_grad();
          auto& gb = pb.node()->grad;
          for (std::size_t i = 0; i < g.size(); ++i)
            gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
        }
      });
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, T c) {
  require_defined(x, "add_scalar");
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
  return make_from_op<T>("add_scalar", x.shape(), std::move(out), {x},
                         [](Node<T>& self) {
                           auto p = self.parents[0];
                           if (!p.tracked()) return;
                           p.node()->ensure_grad();
                           auto& gp = p.node()->grad;
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             gp[i] += self.grad[i];
                         });
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& x, T c) {
  require_defined(x, "mul_scalar");
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  return make_from_op<T>("mul_scalar", x.shape(), std::move(out), {x},
                         [c](Node<T>& self) {
                           auto p = self.parents[0];
                           if (!p.tracked()) return;
                           p.node()->ensure_grad();
                           auto& gp = p.node()->grad;
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             gp[i] += c * self.grad[i];
                         });
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  require_defined(x, "sigmoid");
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    // Branch on sign keeps exp() argument non-positive: no overflow.
    const T v = xv[i];
    if (v >= 0) {
      out[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      out[i] = e / (T(1) + e);
    }
  }
  return make_from_op<T>("sigmoid", x.shape(), std::move(out), {x},
                         [](Node<T>& self) {
                           auto p = self.parents[0];
                           if (!p.tracked()) return;
                           p.node()->ensure_grad();
                           auto& gp = p.node()->grad;
                           auto& y = self.data;
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             gp[i] += self.grad[i] * y[i] * (T(1) - y[i]);
                         });
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  require_defined(x, "relu");
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0 ? xv[i] : T(0);
  return make_from_op<T>("relu", x.shape(), std::move(out), {x},
                         [](Node<T>& self) {
                           auto p = self.parents[0];
                           if (!p.tracked()) return;
                           p.node()->ensure_grad();
                           auto& gp = p.node()->grad;
                           auto xv = p.data();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             if (xv[i] > 0) gp[i] += self.grad[i];
                         });
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int n, cin, h, w;
  int cout, cin_g, kh, kw;
  int stride, padding, groups;
  int oh, ow;
  int cout_g;
};

template <typename T>
ConvDims conv_check(const TensorT<T>& input, const TensorT<T>& weight,
                    const TensorT<T>& bias, int stride, int padding,
                    int groups) {
  require_shape(input.shape().size() == 4,
                "conv2d: input must be 4-D, got " + shape_str(input.shape()));
  require_shape(weight.shape().size() == 4,
                "conv2d: weight must be 4-D, got " + shape_str(weight.shape()));
  ConvDims d;
  d.n = input.dim(0);
  d.cin = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.cout = weight.dim(0);
  d.cin_g = weight.dim(1);
  d.kh = weight.dim(2);
  d.kw = weight.dim(3);
  d.stride = stride;
  d.padding = padding;
  d.groups = groups;
  if (stride < 1 || padding < 0 || d.kh < 1 || d.kw < 1)
    throw ConfigError("conv2d: invalid stride/padding/kernel");
  if (groups < 1 || d.cin % groups != 0)
    throw ConfigError("conv2d: input channels " + std::to_string(d.cin) +
                      " not divisible by groups " + std::to_string(groups));
  if (d.cout % groups != 0)
    throw ConfigError("conv2d: output channels " + std::to_string(d.cout) +
                      " not divisible by groups " + std::to_string(groups));
  require_shape(d.cin_g == d.cin / groups,
                "conv2d: weight expects " + std::to_string(d.cin_g) +
                    " input channels per group, input has " +
                    std::to_string(d.cin / groups));
  if (bias.defined())
    require_shape(bias.shape() == Shape{d.cout},
                  "conv2d: bias shape " + shape_str(bias.shape()) +
                      " != (" + std::to_string(d.cout) + ")");
  d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
  d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
  require_shape(d.oh >= 1 && d.ow >= 1,
                "conv2d: kernel larger than padded input");
  d.cout_g = d.cout / groups;
  return d;
}

}  // namespace

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, int stride, int padding,
                  int groups) {
  require_defined(input, "conv2d");
  require_defined(weight, "conv2d");
  const ConvDims d = conv_check(input, weight, bias, stride, padding, groups);

  std::vector<T> out(static_cast<std::size_t>(d.n) * d.cout * d.oh * d.ow);
  auto in = input.data();
  auto wt = weight.data();
  const std::size_t in_chw = static_cast<std::size_t>(d.cin) * d.h * d.w;
  const std::size_t out_chw = static_cast<std::size_t>(d.cout) * d.oh * d.ow;

  if (bias.defined()) {
    auto bv = bias.data();
    for (int n = 0; n < d.n; ++n)
      for (int co = 0; co < d.cout; ++co)
        std::fill_n(out.begin() + n * out_chw +
                        static_cast<std::size_t>(co) * d.oh * d.ow,
                    static_cast<std::size_t>(d.oh) * d.ow, bv[co]);
  }

  for (int n = 0; n < d.n; ++n) {
    for (int co = 0; co < d.cout; ++co) {
      const int g = co / d.cout_g;
      T* orow0 = out.data() + n * out_chw + static_cast<std::size_t>(co) * d.oh * d.ow;
      for (int cig = 0; cig < d.cin_g; ++cig) {
        const int ci = g * d.cin_g + cig;
        const T* iplane = in.data() + n * in_chw + static_cast<std::size_t>(ci) * d.h * d.w;
        const T* wk = wt.data() +
                      ((static_cast<std::size_t>(co) * d.cin_g + cig) * d.kh) * d.kw;
        for (int kh = 0; kh < d.kh; ++kh) {
          for (int kw = 0; kw < d.kw; ++kw) {
            const T wv = wk[kh * d.kw + kw];
            if (wv == T(0)) continue;  // contributes nothing on finite inputs
            for (int oh = 0; oh < d.oh; ++oh) {
              const int ih = oh * d.stride - d.padding + kh;
              if (ih < 0 || ih >= d.h) continue;
              // valid ow range so that iw = ow*stride - padding + kw is in [0, w)
              int ow_lo = 0, ow_hi = d.ow;
              if (d.stride == 1) {
                ow_lo = std::max(0, d.padding - kw);
                ow_hi = std::min(d.ow, d.w + d.padding - kw);
              }
              T* orow = orow0 + static_cast<std::size_t>(oh) * d.ow;
              const T* irow = iplane + static_cast<std::size_t>(ih) * d.w;
              if (d.stride == 1) {
                const T* ir = irow - d.padding + kw;
                for (int ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * ir[ow];
              } else {
                for (int ow = 0; ow < d.ow; ++ow) {
                  const int iw = ow * d.stride - d.padding + kw;
                  if (iw >= 0 && iw < d.w) orow[ow] += wv * irow[iw];
                }
              }
            }
          }
        }
      }
    }
  }

  std::vector<TensorT<T>> parents = {input, weight};
  if (bias.defined()) parents.push_back(bias);
  const bool has_bias = bias.defined();

  return make_from_op<T>(
      "conv2d", {d.n, d.cout, d.oh, d.ow}, std::move(out), std::move(parents),
      [d, has_bias](Node<T>& self) {
        TensorT<T> input = self.parents[0];
        TensorT<T> weight = self.parents[1];
        auto g = std::span<const T>(self.grad);
        auto in = input.data();
        auto wt = weight.data();
        const std::size_t in_chw = static_cast<std::size_t>(d.cin) * d.h * d.w;
        const std::size_t out_chw =
            static_cast<std::size_t>(d.cout) * d.oh * d.ow;

        if (has_bias) {
          TensorT<T> bias = self.parents[2];
          if (bias.tracked()) {
            bias.node()->ensure_grad();
            auto& gb = bias.node()->grad;
            for (int n = 0; n < d.n; ++n)
              for (int co = 0; co < d.cout; ++co) {
                const T* grow = g.data() + n * out_chw +
                                static_cast<std::size_t>(co) * d.oh * d.ow;
                T s = 0;
                for (int i = 0; i < d.oh * d.ow; ++i) s += grow[i];
                gb[co] += s;
              }
          }
        }

        if (weight.tracked()) {
          weight.node()->ensure_grad();
          auto& gw = weight.node()->grad;
          for (int n = 0; n < d.n; ++n)
            for (int co = 0; co < d.cout; ++co) {
              const int grp = co / d.cout_g;
              const T* gplane = g.data() + n * out_chw +
                                static_cast<std::size_t>(co) * d.oh * d.ow;
              for (int cig = 0; cig < d.cin_g; ++cig) {
                const int ci = grp * d.cin_g + cig;
                const T* iplane = in.data() + n * in_chw +
                                  static_cast<std::size_t>(ci) * d.h * d.w;
                for (int kh = 0; kh < d.kh; ++kh)
                  for (int kw = 0; kw < d.kw; ++kw) {
                    T acc = 0;
                    for (int oh = 0; oh < d.oh; ++oh) {
                      const int ih = oh * d.stride - d.padding + kh;
                      if (ih < 0 || ih >= d.h) continue;
                      const T* grow = gplane + static_cast<std::size_t>(oh) * d.ow;
                      const T* irow = iplane + static_cast<std::size_t>(ih) * d.w;
                      if (d.stride == 1) {
                        const int ow_lo = std::max(0, d.padding - kw);
                        const int ow_hi = std::min(d.ow, d.w + d.padding - kw);
                        const T* ir = irow - d.padding + kw;
                        for (int ow = ow_lo; ow < ow_hi; ++ow)
                          acc += grow[ow] * ir[ow];
                      } else {
                        for (int ow = 0; ow < d.ow; ++ow) {
                          const int iw = ow * d.stride - d.padding + kw;
                          if (iw >= 0 && iw < d.w) acc += grow[ow] * irow[iw];
                        }
                      }
                    }
                    gw[((static_cast<std::size_t>(co) * d.cin_g + cig) * d.kh +
                        kh) * d.kw + kw] += acc;
                  }
              }
            }
        }

        if (input.tracked()) {
          input.node()->ensure_grad();
          auto& gi = input.node()->grad;
          for (int n = 0; n < d.n; ++n)
            for (int co = 0; co < d.cout; ++co) {
              const int grp = co / d.cout_g;
              const T* gplane = g.data() + n * out_chw +
                                static_cast<std::size_t>(co) * d.oh * d.ow;
              for (int cig = 0; cig < d.cin_g; ++cig) {
                const int ci = grp * d.cin_g + cig;
                T* giplane = gi.data() + n * in_chw +
                             static_cast<std::size_t>(ci) * d.h * d.w;
                const T* wk =
                    wt.data() +
                    ((static_cast<std::size_t>(co) * d.cin_g + cig) * d.kh) * d.kw;
                for (int kh = 0; kh < d.kh; ++kh)
                  for (int kw = 0; kw < d.kw; ++kw) {
                    const T wv = wk[kh * d.kw + kw];
                    if (wv == T(0)) continue;
                    for (int oh = 0; oh < d.oh; ++oh) {
                      const int ih = oh * d.stride - d.padding + kh;
                      if (ih < 0 || ih >= d.h) continue;
                      const T* grow = gplane + static_cast<std::size_t>(oh) * d.ow;
                      T* girow = giplane + static_cast<std::size_t>(ih) * d.w;
                      if (d.stride == 1) {
                        const int ow_lo = std::max(0, d.padding - kw);
                        const int ow_hi = std::min(d.ow, d.w + d.padding - kw);
                        T* gir = girow - d.padding + kw;
                        for (int ow = ow_lo; ow < ow_hi; ++ow)
                          gir[ow] += wv * grow[ow];
                      } else {
                        for (int ow = 0; ow < d.ow; ++ow) {
                          const int iw = ow * d.stride - d.padding + kw;
                          if (iw >= 0 && iw < d.w) girow[iw] += wv * grow[ow];
                        }
                      }
                    }
                  }
              }
            }
        }
      });
}

// ---------------------------------------------------------------------------
// pooling / channel reductions
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void require_nchw(const TensorT<T>& x, const char* op) {
  require_defined(x, op);
  require_shape(x.shape().size() == 4, std::string(op) + ": expected 4-D NCHW, got " +
                                           shape_str(x.shape()));
}

}  // namespace

template <typename T>
TensorT<T> channel_max(const TensorT<T>& x) {
  require_nchw(x, "channel_max");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * hw);
  // Ties route the gradient to the lowest channel index.
  std::vector<int> argmax(out.size());
  auto xv = x.data();
  for (int in = 0; in < n; ++in) {
    const T* base = xv.data() + in * c * hw;
    T* obase = out.data() + in * hw;
    int* abase = argmax.data() + in * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T best = base[p];
      int bi = 0;
      for (int ic = 1; ic < c; ++ic) {
        const T v = base[ic * hw + p];
        if (v > best) {
          best = v;
          bi = ic;
        }
      }
      obase[p] = best;
      abase[p] = bi;
    }
  }
  return make_from_op<T>(
      "channel_max", {n, 1, h, w}, std::move(out), {x},
      [n, c, hw, argmax = std::move(argmax)](Node<T>& self) {
        auto p = self.parents[0];
        if (!p.tracked()) return;
        p.node()->ensure_grad();
        auto& gp = p.node()->grad;
        for (int in = 0; in < n; ++in)
          for (std::size_t i = 0; i < hw; ++i) {
            const std::size_t oi = in * hw + i;
            gp[(in * c + argmax[oi]) * hw + i] += self.grad[oi];
          }
      });
}

template <typename T>
TensorT<T> channel_mean(const TensorT<T>& x) {
  require_nchw(x, "channel_mean");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * hw, T(0));
  auto xv = x.data();
  for (int in = 0; in < n; ++in) {
    const T* base = xv.data() + in * c * hw;
    T* obase = out.data() + in * hw;
    for (int ic = 0; ic < c; ++ic)
      for (std::size_t p = 0; p < hw; ++p) obase[p] += base[ic * hw + p];
    for (std::size_t p = 0; p < hw; ++p) obase[p] /= static_cast<T>(c);
  }
  return make_from_op<T>("channel_mean", {n, 1, h, w}, std::move(out), {x},
                         [n, c, hw](Node<T>& self) {
                           auto p = self.parents[0];
                           if (!p.tracked()) return;
                           p.node()->ensure_grad();
                           auto& gp = p.node()->grad;
                           const T inv = T(1) / static_cast<T>(c);
                           for (int in = 0; in < n; ++in)
                             for (int ic = 0; ic < c; ++ic)
                               for (std::size_t i = 0; i < hw; ++i)
                                 gp[(in * c + ic) * hw + i] +=
                                     self.grad[in * hw + i] * inv;
                         });
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
  require_nchw(x, "global_avg_pool");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * c);
  auto xv = x.data();
  for (std::size_t nc = 0; nc < out.size(); ++nc) {
    const T* base = xv.data() + nc * hw;
    T s = 0;
    for (std::size_t p = 0; p < hw; ++p) s += base[p];
    out[nc] = s / static_cast<T>(hw);
  }
  return make_from_op<T>("global_avg_pool", {n, c, 1, 1}, std::move(out), {x},
                         [hw](Node<T>& self) {
                           auto p = self.parents[0];
                           if (!p.tracked()) return;
                           p.node()->ensure_grad();
                           auto& gp = p.node()->grad;
                           const T inv = T(1) / static_cast<T>(hw);
                           for (std::size_t nc = 0; nc < self.grad.size(); ++nc) {
                             const T gv = self.grad[nc] * inv;
                             T* base = gp.data() + nc * hw;
                             for (std::size_t i = 0; i < hw; ++i) base[i] += gv;
                           }
                         });
}

template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& x, int k) {
  require_nchw(x, "avg_pool2d");
  if (k < 1) throw ConfigError("avg_pool2d: window must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % k != 0 || w % k != 0)
    throw ShapeError("avg_pool2d: " + std::to_string(h) + "x" +
                     std::to_string(w) + " not divisible by window " +
                     std::to_string(k));
  const int oh = h / k, ow = w / k;
  std::vector<T> out(static_cast<std::size_t>(n) * c * oh * ow);
  auto xv = x.data();
  const T inv = T(1) / static_cast<T>(k * k);
  for (int nc = 0; nc < n * c; ++nc) {
    const T* iplane = xv.data() + static_cast<std::size_t>(nc) * h * w;
    T* oplane = out.data() + static_cast<std::size_t>(nc) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        T s = 0;
        for (int ky = 0; ky < k; ++ky) {
          const T* row = iplane + (oy * k + ky) * static_cast<std::size_t>(w) + ox * k;
          for (int kx = 0; kx < k; ++kx) s += row[kx];
        }
        oplane[oy * ow + ox] = s * inv;
      }
  }
  return make_from_op<T>(
      "avg_pool2d", {n, c, oh, ow}, std::move(out), {x},
      [n, c, h, w, k, oh, ow, inv](Node<T>& self) {
        auto p = self.parents[0];
        if (!p.tracked()) return;
        p.node()->ensure_grad();
        auto& gp = p.node()->grad;
        for (int nc = 0; nc < n * c; ++nc) {
          T* iplane = gp.data() + static_cast<std::size_t>(nc) * h * w;
          const T* oplane = self.grad.data() + static_cast<std::size_t>(nc) * oh * ow;
          for (int oy = 0; oy < oh; ++oy)
            for (int ox = 0; ox < ow; ++ox) {
              const T gv = oplane[oy * ow + ox] * inv;
              for (int ky = 0; ky < k; ++ky) {
                T* row = iplane + (oy * k + ky) * static_cast<std::size_t>(w) + ox * k;
                for (int kx = 0; kx < k; ++kx) row[kx] += gv;
              }
            }
        }
      });
}

namespace {

// Half-pixel source taps for one axis: out index -> (i0, i1, w1).
struct ResizeTap {
  int i0, i1;
  double w1;
};

inline std::vector<ResizeTap> resize_taps(int in_size, int out_size) {
  std::vector<ResizeTap> taps(out_size);
  const double scale = static_cast<double>(in_size) / out_size;
  for (int o = 0; o < out_size; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    double w1 = src - i0;
    int i1 = i0 + 1;
    if (i1 >= in_size) {
      i1 = in_size - 1;
      if (i0 >= in_size) i0 = in_size - 1;
      if (i0 == i1) w1 = 0;
    }
    taps[o] = {i0, i1, w1};
  }
  return taps;
}

}  // namespace

template <typename T>
TensorT<T> resize_bilinear(const TensorT<T>& x, int out_h, int out_w) {
  require_nchw(x, "resize_bilinear");
  if (out_h < 1 || out_w < 1)
    throw ConfigError("resize_bilinear: output dims must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = resize_taps(h, out_h);
  const auto tx = resize_taps(w, out_w);
  std::vector<T> out(static_cast<std::size_t>(n) * c * out_h * out_w);
  auto xv = x.data();
  for (int nc = 0; nc < n * c; ++nc) {
    const T* iplane = xv.data() + static_cast<std::size_t>(nc) * h * w;
    T* oplane = out.data() + static_cast<std::size_t>(nc) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& yt = ty[oy];
      const T* r0 = iplane + static_cast<std::size_t>(yt.i0) * w;
      const T* r1 = iplane + static_cast<std::size_t>(yt.i1) * w;
      const T wy1 = static_cast<T>(yt.w1), wy0 = T(1) - wy1;
      T* orow = oplane + static_cast<std::size_t>(oy) * out_w;
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& xt = tx[ox];
        const T wx1 = static_cast<T>(xt.w1), wx0 = T(1) - wx1;
        orow[ox] = wy0 * (wx0 * r0[xt.i0] + wx1 * r0[xt.i1]) +
                   wy1 * (wx0 * r1[xt.i0] + wx1 * r1[xt.i1]);
      }
    }
  }
  return make_from_op<T>(
      "resize_bilinear", {n, c, out_h, out_w}, std::move(out), {x},
      [n, c, h, w, out_h, out_w, ty, tx](Node<T>& self) {
        auto p = self.parents[0];
        if (!p.tracked()) return;
        p.node()->ensure_grad();
        auto& gp = p.node()->grad;
        for (int nc = 0; nc < n * c; ++nc) {
          T* iplane = gp.data() + static_cast<std::size_t>(nc) * h * w;
          const T* oplane =
              self.grad.data() + static_cast<std::size_t>(nc) * out_h * out_w;
          for (int oy = 0; oy < out_h; ++oy) {
            const auto& yt = ty[oy];
            const T wy1 = static_cast<T>(yt.w1), wy0 = T(1) - wy1;
            T* r0 = iplane + static_cast<std::size_t>(yt.i0) * w;
            T* r1 = iplane + static_cast<std::size_t>(yt.i1) * w;
            const T* orow = oplane + static_cast<std::size_t>(oy) * out_w;
            for (int ox = 0; ox < out_w; ++ox) {
              const auto& xt = tx[ox];
              const T wx1 = static_cast<T>(xt.w1), wx0 = T(1) - wx1;
              const T g = orow[ox];
              r0[xt.i0] += wy0 * wx0 * g;
              r0[xt.i1] += wy0 * wx1 * g;
              r1[xt.i0] += wy1 * wx0 * g;
              r1[xt.i1] += wy1 * wx1 * g;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
std::vector<TensorT<T>> channel_split(const TensorT<T>& x,
                                      const std::vector<int>& sizes) {
  require_nchw(x, "channel_split");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int total = 0;
  for (int s : sizes) {
    if (s <= 0) throw ShapeError("channel_split: sizes must be positive");
    total += s;
  }
  require_shape(total == c, "channel_split: sizes sum to " +
                                std::to_string(total) + ", tensor has " +
                                std::to_string(c) + " channels");
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  auto xv = x.data();
  std::vector<TensorT<T>> parts;
  parts.reserve(sizes.size());
  int offset = 0;
  for (int s : sizes) {
    std::vector<T> piece(static_cast<std::size_t>(n) * s * hw);
    for (int in = 0; in < n; ++in)
      std::copy_n(xv.data() + (static_cast<std::size_t>(in) * c + offset) * hw,
                  static_cast<std::size_t>(s) * hw,
                  piece.data() + static_cast<std::size_t>(in) * s * hw);
    const int off = offset;
    parts.push_back(make_from_op<T>(
        "channel_split", {n, s, h, w}, std::move(piece), {x},
        [n, c, s, hw, off](Node<T>& self) {
          auto p = self.parents[0];
          if (!p.tracked()) return;
          p.node()->ensure_grad();
          auto& gp = p.node()->grad;
          for (int in = 0; in < n; ++in) {
            const T* gsrc = self.grad.data() + static_cast<std::size_t>(in) * s * hw;
            T* gdst = gp.data() + (static_cast<std::size_t>(in) * c + off) * hw;
            for (std::size_t i = 0; i < static_cast<std::size_t>(s) * hw; ++i)
              gdst[i] += gsrc[i];
          }
        }));
    offset += s;
  }
  return parts;
}

template <typename T>
TensorT<T> channel_concat(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw ShapeError("channel_concat: no inputs");
  for (const auto& p : parts) require_nchw(p, "channel_concat");
  const int n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  int c = 0;
  for (const auto& p : parts) {
    require_shape(p.dim(0) == n && p.dim(2) == h && p.dim(3) == w,
                  "channel_concat: mismatched N/H/W: " + shape_str(p.shape()) +
                      " vs " + shape_str(parts[0].shape()));
    c += p.dim(1);
  }
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * c * hw);
  std::vector<int> widths;
  int offset = 0;
  for (const auto& p : parts) {
    const int s = p.dim(1);
    auto pv = p.data();
    for (int in = 0; in < n; ++in)
      std::copy_n(pv.data() + static_cast<std::size_t>(in) * s * hw,
                  static_cast<std::size_t>(s) * hw,
                  out.data() + (static_cast<std::size_t>(in) * c + offset) * hw);
    widths.push_back(s);
    offset += s;
  }
  return make_from_op<T>(
      "channel_concat", {n, c, h, w}, std::move(out), parts,
      [n, c, hw, widths = std::move(widths)](Node<T>& self) {
        int off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
          const int s = widths[k];
          auto p = self.parents[k];
          if (p.tracked()) {
            p.node()->ensure_grad();
            auto& gp = p.node()->grad;
            for (int in = 0; in < n; ++in) {
              const T* gsrc =
                  self.grad.data() + (static_cast<std::size_t>(in) * c + off) * hw;
              T* gdst = gp.data() + static_cast<std::size_t>(in) * s * hw;
              for (std::size_t i = 0; i < static_cast<std::size_t>(s) * hw; ++i)
                gdst[i] += gsrc[i];
            }
          }
          off += s;
        }
      });
}

template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
  require_defined(x, "reshape");
  require_shape(shape_numel(shape) == x.numel(),
                "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                    " changes element count");
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_from_op<T>("reshape", std::move(shape), std::move(out), {x},
                         [](Node<T>& self) {
                           auto p = self.parents[0];
                           if (!p.tracked()) return;
                           p.node()->ensure_grad();
                           auto& gp = p.node()->grad;
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             gp[i] += self.grad[i];
                         });
}

template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& x) {
  require_defined(x, "transpose_last2");
  const Shape& s = x.shape();
  require_shape(s.size() >= 2, "transpose_last2: needs rank >= 2, got " +
                                   shape_str(s));
  const int rows = s[s.size() - 2], cols = s[s.size() - 1];
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* ip = xv.data() + b * rows * cols;
    T* op = out.data() + b * rows * cols;
    for (int r = 0; r < rows; ++r)
      for (int c0 = 0; c0 < cols; ++c0) op[c0 * rows + r] = ip[r * cols + c0];
  }
  return make_from_op<T>(
      "transpose_last2", std::move(os), std::move(out), {x},
      [batch, rows, cols](Node<T>& self) {
        auto p = self.parents[0];
        if (!p.tracked()) return;
        p.node()->ensure_grad();
        auto& gp = p.node()->grad;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* gsrc = self.grad.data() + b * rows * cols;
          T* gdst = gp.data() + b * rows * cols;
          for (int r = 0; r < rows; ++r)
            for (int c0 = 0; c0 < cols; ++c0)
              gdst[r * cols + c0] += gsrc[c0 * rows + r];
        }
      });
}

// ---------------------------------------------------------------------------
// linear algebra / normalization
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  require_shape(sa.size() == sb.size() && (sa.size() == 2 || sa.size() == 3),
                "matmul: expects both 2-D or both 3-D, got " + shape_str(sa) +
                    " x " + shape_str(sb));
  const bool batched = sa.size() == 3;
  const int bdim = batched ? sa[0] : 1;
  if (batched)
    require_shape(sb[0] == bdim, "matmul: batch dims differ: " + shape_str(sa) +
                                     " x " + shape_str(sb));
  const int m = sa[batched ? 1 : 0];
  const int k = sa[batched ? 2 : 1];
  const int k2 = sb[batched ? 1 : 0];
  const int n = sb[batched ? 2 : 1];
  require_shape(k == k2, "matmul: inner dims differ: " + shape_str(sa) + " x " +
                             shape_str(sb));

  std::vector<T> out(static_cast<std::size_t>(bdim) * m * n, T(0));
  auto av = a.data();
  auto bv = b.data();
  for (int bi = 0; bi < bdim; ++bi) {
    const T* A = av.data() + static_cast<std::size_t>(bi) * m * k;
    const T* B = bv.data() + static_cast<std::size_t>(bi) * k * n;
    T* C = out.data() + static_cast<std::size_t>(bi) * m * n;
    for (int i = 0; i < m; ++i)
      for (int kk = 0; kk < k; ++kk) {
        const T s = A[i * k + kk];
        const T* brow = B + static_cast<std::size_t>(kk) * n;
        T* crow = C + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += s * brow[j];
      }
  }
  Shape os = batched ? Shape{bdim, m, n} : Shape{m, n};
  return make_from_op<T>(
      "matmul", std::move(os), std::move(out), {a, b},
      [bdim, m, k, n](Node<T>& self) {
        auto pa = self.parents[0];
        auto pb = self.parents[1];
        auto av = pa.data();
        auto bv = pb.data();
        if (pa.tracked()) {
          pa.node()->ensure_grad();
          auto& ga = pa.node()->grad;
          // dA = g . B^T
          for (int bi = 0; bi < bdim; ++bi) {
            const T* G = self.grad.data() + static_cast<std::size_t>(bi) * m * n;
            const T* B = bv.data() + static_cast<std::size_t>(bi) * k * n;
            T* GA = ga.data() + static_cast<std::size_t>(bi) * m * k;
            for (int i = 0; i < m; ++i)
              for (int kk = 0; kk < k; ++kk) {
                const T* grow = G + static_cast<std::size_t>(i) * n;
                const T* brow = B + static_cast<std::size_t>(kk) * n;
                T s = 0;
                for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                GA[i * k + kk] += s;
              }
          }
        }
        if (pb.tracked()) {
          pb.node()->ensure_grad();
          auto& gb = pb.node()->grad;
          // dB = A^T . g
          for (int bi = 0; bi < bdim; ++bi) {
            const T* G = self.grad.data() + static_cast<std::size_t>(bi) * m * n;
            const T* A = av.data() + static_cast<std::size_t>(bi) * m * k;
            T* GB = gb.data() + static_cast<std::size_t>(bi) * k * n;
            for (int i = 0; i < m; ++i)
              for (int kk = 0; kk < k; ++kk) {
                const T s = A[i * k + kk];
                const T* grow = G + static_cast<std::size_t>(i) * n;
                T* gbrow = GB + static_cast<std::size_t>(kk) * n;
                for (int j = 0; j < n; ++j) gbrow[j] += s * grow[j];
              }
          }
        }
      });
}

template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& x) {
  require_defined(x, "softmax_lastdim");
  const Shape& s = x.shape();
  require_shape(!s.empty(), "softmax_lastdim: scalar input");
  const int L = s.back();
  const std::size_t rows = x.numel() / L;
  std::vector<T> out(x.numel());
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* ip = xv.data() + r * L;
    T* op = out.data() + r * L;
    T mx = ip[0];
    for (int i = 1; i < L; ++i) mx = std::max(mx, ip[i]);
    T sum = 0;
    for (int i = 0; i < L; ++i) {
      op[i] = std::exp(ip[i] - mx);
      sum += op[i];
    }
    const T inv = T(1) / sum;
    for (int i = 0; i < L; ++i) op[i] *= inv;
  }
  return make_from_op<T>("softmax_lastdim", s, std::move(out), {x},
                         [L, rows](Node<T>& self) {
                           auto p = self.parents[0];
                           if (!p.tracked()) return;
                           p.node()->ensure_grad();
                           auto& gp = p.node()->grad;
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* y = self.data.data() + r * L;
                             const T* g = self.grad.data() + r * L;
                             T dot = 0;
                             for (int i = 0; i < L; ++i) dot += g[i] * y[i];
                             T* gpr = gp.data() + r * L;
                             for (int i = 0; i < L; ++i)
                               gpr[i] += y[i] * (g[i] - dot);
                           }
                         });
}

template <typename T>
TensorT<T> l2_normalize_lastdim(const TensorT<T>& x, T eps) {
  require_defined(x, "l2_normalize_lastdim");
  const Shape& s = x.shape();
  require_shape(!s.empty(), "l2_normalize_lastdim: scalar input");
  const int L = s.back();
  const std::size_t rows = x.numel() / L;
  std::vector<T> out(x.numel());
  std::vector<T> norms(rows);
  auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* ip = xv.data() + r * L;
    T ss = 0;
    for (int i = 0; i < L; ++i) ss += ip[i] * ip[i];
    const T nrm = std::sqrt(ss + eps);
    norms[r] = nrm;
    T* op = out.data() + r * L;
    for (int i = 0; i < L; ++i) op[i] = ip[i] / nrm;
  }
  return make_from_op<T>(
      "l2_normalize_lastdim", s, std::move(out), {x},
      [L, rows, norms = std::move(norms)](Node<T>& self) {
        auto p = self.parents[0];
        if (!p.tracked()) return;
        p.node()->ensure_grad();
        auto& gp = p.node()->grad;
        auto xv = p.data();
        for (std::size_t r = 0; r < rows; ++r) {
          const T* ip = xv.data() + r * L;
          const T* g = self.grad.data() + r * L;
          const T nrm = norms[r];
          T dot = 0;
          for (int i = 0; i < L; ++i) dot += g[i] * ip[i];
          const T inv = T(1) / nrm;
          const T inv3 = dot / (nrm * nrm * nrm);
          T* gpr = gp.data() + r * L;
          for (int i = 0; i < L; ++i) gpr[i] += g[i] * inv - ip[i] * inv3;
        }
      });
}

template <typename T>
TensorT<T> layer_norm_channels(const TensorT<T>& x, const TensorT<T>& gamma,
                               const TensorT<T>& beta, T eps) {
  require_nchw(x, "layer_norm_channels");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Shape expect{1, c, 1, 1};
  require_defined(gamma, "layer_norm_channels");
  require_defined(beta, "layer_norm_channels");
  require_shape(gamma.shape() == expect && beta.shape() == expect,
                "layer_norm_channels: scale/shift must be " + shape_str(expect));
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<T> out(x.numel());
  // Per-position statistics saved for the backward rule.
  std::vector<T> means(static_cast<std::size_t>(n) * hw);
  std::vector<T> inv_stds(static_cast<std::size_t>(n) * hw);
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  for (int in = 0; in < n; ++in) {
    const T* base = xv.data() + static_cast<std::size_t>(in) * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T mean = 0;
      for (int ic = 0; ic < c; ++ic) mean += base[ic * hw + p];
      mean /= static_cast<T>(c);
      T var = 0;
      for (int ic = 0; ic < c; ++ic) {
        const T d0 = base[ic * hw + p] - mean;
        var += d0 * d0;
      }
      var /= static_cast<T>(c);
      const T inv_std = T(1) / std::sqrt(var + eps);
      const std::size_t pi = in * hw + p;
      means[pi] = mean;
      inv_stds[pi] = inv_std;
      T* obase = out.data() + static_cast<std::size_t>(in) * c * hw;
      for (int ic = 0; ic < c; ++ic)
        obase[ic * hw + p] =
            (base[ic * hw + p] - mean) * inv_std * gv[ic] + bv[ic];
    }
  }
  return make_from_op<T>(
      "layer_norm_channels", x.shape(), std::move(out), {x, gamma, beta},
      [n, c, hw, means = std::move(means),
       inv_stds = std::move(inv_stds)](Node<T>& self) {
        auto px = self.parents[0];
        auto pg = self.parents[1];
        auto pb = self.parents[2];
        auto xv = px.data();
        auto gv = pg.data();
        const bool want_x = px.tracked();
        const bool want_g = pg.tracked();
        const bool want_b = pb.tracked();
        if (want_x) px.node()->ensure_grad();
        if (want_g) pg.node()->ensure_grad();
        if (want_b) pb.node()->ensure_grad();
        T* gx = want_x ? px.node()->grad.data() : nullptr;
        T* gg = want_g ? pg.node()->grad.data() : nullptr;
        T* gb = want_b ? pb.node()->grad.data() : nullptr;
        for (int in = 0; in < n; ++in) {
          const T* base = xv.data() + static_cast<std::size_t>(in) * c * hw;
          const T* gbase = self.grad.data() + static_cast<std::size_t>(in) * c * hw;
          for (std::size_t p = 0; p < hw; ++p) {
            const std::size_t pi = in * hw + p;
            const T mean = means[pi];
            const T inv_std = inv_stds[pi];
            // x_hat_c = (x - mean) * inv_std; gy_c = g * gamma
            T m1 = 0, m2 = 0;
            for (int ic = 0; ic < c; ++ic) {
              const T xh = (base[ic * hw + p] - mean) * inv_std;
              const T gy = gbase[ic * hw + p] * gv[ic];
              m1 += gy;
              m2 += gy * xh;
            }
            m1 /= static_cast<T>(c);
            m2 /= static_cast<T>(c);
            for (int ic = 0; ic < c; ++ic) {
              const T xh = (base[ic * hw + p] - mean) * inv_std;
              const T g = gbase[ic * hw + p];
              if (want_x) {
                const T gy = g * gv[ic];
                gx[(static_cast<std::size_t>(in) * c + ic) * hw + p] +=
                    (gy - m1 - xh * m2) * inv_std;
              }
              if (want_g) gg[ic] += g * xh;
              if (want_b) gb[ic] += g;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
  require_defined(x, "sum_all");
  auto xv = x.data();
  T s = 0;
  for (T v : xv) s += v;
  return make_from_op<T>("sum_all", {1}, {s}, {x}, [](Node<T>& self) {
    auto p = self.parents[0];
    if (!p.tracked()) return;
    p.node()->ensure_grad();
    auto& gp = p.node()->grad;
    const T g = self.grad[0];
    for (auto& v : gp) v += g;
  });
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  require_defined(x, "mean_all");
  auto xv = x.data();
  T s = 0;
  for (T v : xv) s += v;
  const T inv = T(1) / static_cast<T>(x.numel());
  return make_from_op<T>("mean_all", {1}, {s * inv}, {x},
                         [inv](Node<T>& self) {
                           auto p = self.parents[0];
                           if (!p.tracked()) return;
                           p.node()->ensure_grad();
                           auto& gp = p.node()->grad;
                           const T g = self.grad[0] * inv;
                           for (auto& v : gp) v += g;
                         });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const TensorT<T>& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1)
    throw ContractError("backward: loss has " + std::to_string(loss.numel()) +
                        " elements, expected a scalar");
  Node<T>* root = loss.node();
  if (root->backward_done)
    throw ContractError("backward: tape already consumed for this loss");
  root->backward_done = true;

  // Reverse topological order by iterative post-order DFS over parents.
  std::vector<Node<T>*> order;
  std::unordered_set<const Node<T>*> visited;
  struct Frame {
    Node<T>* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  if (root->tracked) {
    stack.push_back({root, 0});
    visited.insert(root);
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node<T>* p = f.node->parents[f.next_parent++].node();
      if (p->tracked && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn) {
      node->ensure_grad();
      node->backward_fn(*node);
    }
  }
}

// ---------------------------------------------------------------------------
// dump / parse
// ---------------------------------------------------------------------------

template <typename T>
void dump_tensor(const TensorT<T>& t, std::ostream& os) {
  require_defined(t, "dump_tensor");
  os << "shape:";
  for (int d : t.shape()) os << ' ' << d;
  os << '\n';
  char buf[64];
  auto dv = t.data();
  for (std::size_t i = 0; i < dv.size(); ++i) {
    if constexpr (std::is_same_v<T, float>)
      std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(dv[i]));
    else
      std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(dv[i]));
    os << buf << ((i + 1) % 8 == 0 ? '\n' : ' ');
  }
  if (dv.size() % 8 != 0) os << '\n';
}

template <typename T>
TensorT<T> parse_tensor(std::istream& is) {
  std::string tag;
  is >> tag;
  if (tag != "shape:") throw ContractError("parse_tensor: expected 'shape:'");
  std::string line;
  std::getline(is, line);
  std::istringstream ls(line);
  Shape shape;
  int d;
  while (ls >> d) shape.push_back(d);
  std::size_t n = shape_numel(shape);
  std::vector<T> values(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v;
    if (!(is >> v)) throw ContractError("parse_tensor: truncated values");
    values[i] = static_cast<T>(v);
  }
  return TensorT<T>::from_data(std::move(shape), std::move(values));
}

// ---------------------------------------------------------------------------
// explicit instantiation for float (training) and double (gradient checks)
// ---------------------------------------------------------------------------

#define IRF_INSTANTIATE(T)                                                    \
  template class TensorT<T>;                                                  \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> sub(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> mul(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> div(const TensorT<T>&, const TensorT<T>&);              \
  template TensorT<T> add_scalar(const TensorT<T>&, T);                       \
  template TensorT<T> mul_scalar(const TensorT<T>&, T);                       \
  template TensorT<T> sigmoid(const TensorT<T>&);                             \
  template TensorT<T> relu(const TensorT<T>&);                                \
  template TensorT<T> conv2d(const TensorT<T>&, const TensorT<T>&,            \
                             const TensorT<T>&, int, int, int);               \
  template TensorT<T> channel_max(const TensorT<T>&);                         \
  template TensorT<T> channel_mean(const TensorT<T>&);                        \
  template TensorT<T> global_avg_pool(const TensorT<T>&);                     \
  template TensorT<T> avg_pool2d(const TensorT<T>&, int);                     \
  template TensorT<T> resize_bilinear(const TensorT<T>&, int, int);           \
  template std::vector<TensorT<T>> channel_split(const TensorT<T>&,           \
                                                 const std::vector<int>&);    \
  template TensorT<T> channel_concat(const std::vector<TensorT<T>>&);         \
  template TensorT<T> reshape(const TensorT<T>&, Shape);                      \
  template TensorT<T> transpose_last2(const TensorT<T>&);                     \
  template TensorT<T> matmul(const TensorT<T>&, const TensorT<T>&);           \
  template TensorT<T> softmax_lastdim(const TensorT<T>&);                     \
  template TensorT<T> l2_normalize_lastdim(const TensorT<T>&, T);             \
  template TensorT<T> layer_norm_channels(const TensorT<T>&,                  \
                                          const TensorT<T>&,                  \
                                          const TensorT<T>&, T);              \
  template TensorT<T> sum_all(const TensorT<T>&);                             \
  template TensorT<T> mean_all(const TensorT<T>&);                            \
  template void backward(const TensorT<T>&);                                  \
  template void dump_tensor(const TensorT<T>&, std::ostream&);                \
  template TensorT<T> parse_tensor<T>(std::istream&);

IRF_INSTANTIATE(float)
IRF_INSTANTIATE(double)

#undef IRF_INSTANTIATE

}  // namespace irformer
