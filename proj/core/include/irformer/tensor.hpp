#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace irformer {

// Dimension sizes, canonical image layout N x C x H x W, row-major storage.
using Shape = std::vector<int>;

class ShapeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};
class ContractError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

template <typename T>
class TensorT;

namespace detail {

// One node of the gradient tape. Interior nodes carry a backward function
// that reads this node's grad and accumulates into the parents' grads.
// The graph is a DAG: parents only, no cycles.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool tracked = false;
  std::vector<TensorT<T>> parents;
  std::function<void(TensorNode<T>&)> backward_fn;
  const char* op = "";
  bool backward_done = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

}  // namespace detail

// Scoped switch that disables tape recording (inference / finite differences).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool recording_enabled();
};

// Dense N-dimensional float tensor with an optional reverse-mode tape node.
// Value-semantic handle over shared storage: copies alias the same data.
// Instantiated for float (training/inference) and double (gradient checks).
template <typename T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false);
  static TensorT full(Shape shape, T value);
  static TensorT from_data(Shape shape, std::vector<T> values,
                           bool requires_grad = false);
  static TensorT scalar(T value);
  static TensorT random_uniform(Shape shape, std::mt19937_64& rng, T lo, T hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  std::size_t numel() const;

  std::span<T> data();
  std::span<const T> data() const;

  bool has_grad() const;
  std::span<const T> grad() const;
  std::span<T> grad_mut();
  void zero_grad();

  bool requires_grad() const;
  TensorT& set_requires_grad(bool value);
  bool tracked() const;

  // Scalar tensors only.
  T item() const;

  // Same data, fresh node outside the tape.
  TensorT detach() const;

  template <typename U>
  TensorT<U> cast() const {
    if (!defined()) return {};
    std::vector<U> converted(numel());
    auto src = data();
    for (std::size_t i = 0; i < converted.size(); ++i)
      converted[i] = static_cast<U>(src[i]);
    return TensorT<U>::from_data(shape(), std::move(converted),
                                 requires_grad());
  }

  detail::TensorNode<T>* node() const { return impl_.get(); }

 private:
  std::shared_ptr<detail::TensorNode<T>> impl_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

// ---- elementwise ----
// add/mul accept equal shapes plus the two sanctioned broadcast patterns:
// per-channel (N|1,C,1,1 against N,C,H,W) and per-pixel (N|1,1,H,W against
// N,C,H,W); a one-element operand broadcasts against anything. sub/div
// require equal shapes.
template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, T c);
template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& x, T c);
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x);
template <typename T>
TensorT<T> relu(const TensorT<T>& x);

// ---- convolution / pooling / resampling ----
// bias may be an undefined tensor (no bias). Zero-fill padding.
// H' = (H + 2*padding - kh) / stride + 1, floor division.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, int stride = 1, int padding = 0,
                  int groups = 1);
template <typename T>
TensorT<T> channel_max(const TensorT<T>& x);
template <typename T>
TensorT<T> channel_mean(const TensorT<T>& x);
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x);
template <typename T>
TensorT<T> avg_pool2d(const TensorT<T>& x, int k);
// Half-pixel centers (align-corners false), borders clamped.
template <typename T>
TensorT<T> resize_bilinear(const TensorT<T>& x, int out_h, int out_w);

// ---- shape ----
template <typename T>
std::vector<TensorT<T>> channel_split(const TensorT<T>& x,
                                      const std::vector<int>& sizes);
template <typename T>
TensorT<T> channel_concat(const std::vector<TensorT<T>>& parts);
template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape);
template <typename T>
TensorT<T> transpose_last2(const TensorT<T>& x);

// ---- linear algebra / normalization ----
// matmul: (M,K)x(K,N) or batched (B,M,K)x(B,K,N).
template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b);
template <typename T>
TensorT<T> softmax_lastdim(const TensorT<T>& x);
template <typename T>
TensorT<T> l2_normalize_lastdim(const TensorT<T>& x, T eps);
// Normalizes per (n,h,w) across C; gamma/beta have shape (1,C,1,1).
template <typename T>
TensorT<T> layer_norm_channels(const TensorT<T>& x, const TensorT<T>& gamma,
                               const TensorT<T>& beta, T eps);

// ---- reductions ----
template <typename T>
TensorT<T> sum_all(const TensorT<T>& x);
template <typename T>
TensorT<T> mean_all(const TensorT<T>& x);

// Reverse-mode sweep from a scalar loss. Each tape node is visited exactly
// once in reverse topological order; a tensor consumed by k ops receives the
// sum of the k gradient contributions. Calling backward twice on the same
// loss is a contract error.
template <typename T>
void backward(const TensorT<T>& loss);

// Debug dump: "shape: d0 d1 ..." then row-major values, whitespace-separated.
template <typename T>
void dump_tensor(const TensorT<T>& t, std::ostream& os);
template <typename T>
TensorT<T> parse_tensor(std::istream& is);

}  // namespace irformer
