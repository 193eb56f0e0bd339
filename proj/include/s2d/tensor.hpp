#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace s2d {

namespace detail {

template <typename T>
struct NodeT {
  int channels = 0, height = 0, width = 0;
  std::vector<T> data;
  std::vector<T> grad;  // sized on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<NodeT>> parents;
  std::function<void(NodeT&)> backward_fn;
};

template <typename T>
inline void ensure_grad(NodeT<T>& node) {
  if (node.grad.size() != node.data.size()) node.grad.assign(node.data.size(), T(0));
}

}  // namespace detail

/// Dense rank-3 tensor (channels x height x width), row-major, single scalar
/// type. Copies share storage. Ops record a reverse-mode graph when any input
/// requires gradients; backward() runs the sweep from a scalar output.
template <typename T>
class TensorT {
 public:
  using Node = detail::NodeT<T>;

  TensorT() : node_(std::make_shared<Node>()) {}

  TensorT(int channels, int height, int width, T fill = T(0)) : node_(std::make_shared<Node>()) {
    if (channels < 0 || height < 0 || width < 0)
      throw std::invalid_argument("tensor: negative dimension");
    node_->channels = channels;
    node_->height = height;
    node_->width = width;
    node_->data.assign(static_cast<std::size_t>(channels) * height * width, fill);
  }

  static TensorT zeros(int c, int h, int w) { return TensorT(c, h, w, T(0)); }
  static TensorT full(int c, int h, int w, T v) { return TensorT(c, h, w, v); }

  static TensorT from_data(int c, int h, int w, std::vector<T> values) {
    TensorT t(c, h, w);
    if (values.size() != t.size())
      throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                  " does not match shape " + t.shape_string());
    t.node_->data = std::move(values);
    return t;
  }

  static TensorT from_node(std::shared_ptr<Node> node) { return TensorT(std::move(node)); }

  int channels() const { return node_->channels; }
  int height() const { return node_->height; }
  int width() const { return node_->width; }
  std::size_t size() const { return node_->data.size(); }
  bool empty() const { return node_->data.empty(); }
  bool same_shape(const TensorT& o) const {
    return channels() == o.channels() && height() == o.height() && width() == o.width();
  }
  std::string shape_string() const {
    return std::to_string(channels()) + "x" + std::to_string(height()) + "x" +
           std::to_string(width());
  }

  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }

  T& at(int c, int y, int x) { return node_->data[index(c, y, x)]; }
  const T& at(int c, int y, int x) const { return node_->data[index(c, y, x)]; }

  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height() + y) * width() + x;
  }

  /// Value of a single-element tensor.
  T item() const {
    if (size() != 1) throw std::invalid_argument("item: tensor has " + shape_string() + " shape");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  TensorT& set_requires_grad(bool enable) {
    node_->requires_grad = enable;
    return *this;
  }

  std::vector<T>& grad() {
    detail::ensure_grad(*node_);
    return node_->grad;
  }
  const std::vector<T>* grad_if() const { return node_->grad.empty() ? nullptr : &node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
  }

  /// Reverse-mode sweep. The receiver must be scalar (1x1x1); its gradient is
  /// seeded with one and parent grads are accumulated in reverse topological
  /// order.
  void backward() const;

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(channels(), height(), width());
    for (std::size_t i = 0; i < size(); ++i) out.data()[i] = static_cast<U>(node_->data[i]);
    return out;
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  explicit TensorT(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

/// Convolution layer parameters. `weight` stores the (out, in, kh, kw) filter
/// bank row-major, carried as an (out*in, kh, kw) tensor so gradients flow
/// through the shared graph machinery; `bias` is (out, 1, 1).
template <typename T>
struct ConvParamsT {
  TensorT<T> weight;
  TensorT<T> bias;
  int out_channels = 0, in_channels = 0;
  int kernel_h = 0, kernel_w = 0;
  int stride = 1, padding = 0;

  static ConvParamsT make(int out_ch, int in_ch, int kh, int kw, int stride = 1, int padding = 0) {
    if (kh % 2 == 0 || kw % 2 == 0) throw std::invalid_argument("conv: kernel sides must be odd");
    if (stride < 1 || padding < 0) throw std::invalid_argument("conv: bad stride/padding");
    ConvParamsT p;
    p.weight = TensorT<T>(out_ch * in_ch, kh, kw);
    p.bias = TensorT<T>(out_ch, 1, 1);
    p.out_channels = out_ch;
    p.in_channels = in_ch;
    p.kernel_h = kh;
    p.kernel_w = kw;
    p.stride = stride;
    p.padding = padding;
    return p;
  }

  T& w(int oc, int ic, int ky, int kx) { return weight.at(oc * in_channels + ic, ky, kx); }
  const T& w(int oc, int ic, int ky, int kx) const {
    return weight.at(oc * in_channels + ic, ky, kx);
  }

  template <typename U>
  ConvParamsT<U> cast() const {
    ConvParamsT<U> p;
    p.weight = weight.template cast<U>();
    p.bias = bias.template cast<U>();
    p.out_channels = out_channels;
    p.in_channels = in_channels;
    p.kernel_h = kernel_h;
    p.kernel_w = kernel_w;
    p.stride = stride;
    p.padding = padding;
    return p;
  }
};

using ConvParams = ConvParamsT<float>;

/// Per-channel batch normalization. gamma/beta are learnable; running stats
/// are state updated by training-mode forwards and read by inference.
template <typename T>
struct BatchNormParamsT {
  TensorT<T> gamma;  // (C,1,1)
  TensorT<T> beta;   // (C,1,1)
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
  bool training_mode = false;

  static BatchNormParamsT make(int channels) {
    BatchNormParamsT p;
    p.gamma = TensorT<T>(channels, 1, 1, T(1));
    p.beta = TensorT<T>(channels, 1, 1, T(0));
    p.running_mean.assign(channels, T(0));
    p.running_var.assign(channels, T(1));
    return p;
  }

  int channels() const { return gamma.channels(); }

  template <typename U>
  BatchNormParamsT<U> cast() const {
    BatchNormParamsT<U> p;
    p.gamma = gamma.template cast<U>();
    p.beta = beta.template cast<U>();
    p.running_mean.assign(running_mean.begin(), running_mean.end());
    p.running_var.assign(running_var.begin(), running_var.end());
    p.eps = static_cast<U>(eps);
    p.momentum = static_cast<U>(momentum);
    p.training_mode = training_mode;
    return p;
  }
};

using BatchNormParams = BatchNormParamsT<float>;

// ---- forward/backward ops ----

/// Zero-padded 2D convolution. Output spatial size is
/// floor((n + 2p - k)/stride) + 1 per dimension.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const ConvParamsT<T>& params);

template <typename T>
TensorT<T> relu(const TensorT<T>& input);

/// 2x2 max-pool with stride 2. Odd trailing rows/columns are handled by
/// clamping the window to the tensor, which equals replicated-edge padding.
/// Backward routes the gradient to the first argmax in row-major order.
template <typename T>
TensorT<T> maxpool2(const TensorT<T>& input);

template <typename T>
TensorT<T> batchnorm(const TensorT<T>& input, BatchNormParamsT<T>& params);

/// Align-corners bilinear upsampling; target must be at least as large as the
/// source in both dimensions.
template <typename T>
TensorT<T> bilinear_upsample(const TensorT<T>& input, int target_h, int target_w);

/// 1x1 correlation of a descriptor (D,1,1) against a dense map (D,H,W):
/// out[y][x] = sum_d descriptor[d] * map[d][y][x].
template <typename T>
TensorT<T> correlate_1x1(const TensorT<T>& descriptor, const TensorT<T>& map);

/// Bilinear read of a (D,H,W) map at fractional (x, y); coordinates outside
/// the lattice clamp to the border. Returns a (D,1,1) column.
template <typename T>
TensorT<T> sample_bilinear(const TensorT<T>& map, T x, T y);

/// Softmax over all spatial positions of a single-channel tensor.
template <typename T>
TensorT<T> softmax2d(const TensorT<T>& logits);

/// -log softmax(logits)[gt] over the spatial lattice of a single-channel map.
template <typename T>
TensorT<T> spatial_cross_entropy(const TensorT<T>& logits, int gt_x, int gt_y);

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor);

template <typename T>
TensorT<T> sum(const TensorT<T>& input);

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& parts);

template <typename T>
TensorT<T> random_tensor(std::mt19937_64& rng, int c, int h, int w, T lo, T hi);

// ---- gradient checking ----

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t elements_checked = 0;
  bool pass(double tolerance) const { return max_rel_error < tolerance; }
};

/// Builds a scalar double-precision graph from the given inputs.
using GraphFn = std::function<TensorD(std::vector<TensorD>&)>;

/// Compares reverse-mode gradients against central finite differences, run in
/// double precision. Relative error per element is |a - n| / max(1, |a|, |n|).
GradCheckReport gradcheck(const GraphFn& graph, std::vector<TensorD> inputs, double step = 1e-5);

}  // namespace s2d
