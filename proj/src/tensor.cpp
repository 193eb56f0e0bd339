#include "s2d/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "s2d/rng.hpp"

namespace s2d {

namespace {

template <typename T>
using Node = detail::NodeT<T>;

template <typename T>
std::shared_ptr<Node<T>> make_output(int c, int h, int w) {
  auto node = std::make_shared<Node<T>>();
  node->channels = c;
  node->height = h;
  node->width = w;
  node->data.assign(static_cast<std::size_t>(c) * h * w, T(0));
  return node;
}

template <typename T>
void check_finite_shape(const TensorT<T>& t, const char* op) {
  if (t.empty()) throw std::invalid_argument(std::string(op) + ": empty input tensor");
}

}  // namespace

template <typename T>
void TensorT<T>::backward() const {
  if (size() != 1) throw std::invalid_argument("backward: output must be scalar, got " + shape_string());
  // Post-order DFS, then run backward functions in reverse topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  detail::ensure_grad(*node_);
  node_->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const ConvParamsT<T>& params) {
  check_finite_shape(input, "conv2d");
  if (input.channels() != params.in_channels)
    throw std::invalid_argument("conv2d: input has " + std::to_string(input.channels()) +
                                " channels, params expect " + std::to_string(params.in_channels));
  const int kh = params.kernel_h, kw = params.kernel_w;
  const int stride = params.stride, pad = params.padding;
  const int in_h = input.height(), in_w = input.width();
  const int out_ch = params.out_channels, in_ch = params.in_channels;
  const int out_h = (in_h + 2 * pad - kh) / stride + 1;
  const int out_w = (in_w + 2 * pad - kw) / stride + 1;
  if (in_h + 2 * pad < kh || in_w + 2 * pad < kw)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                " larger than padded input " + input.shape_string());

  auto out = make_output<T>(out_ch, out_h, out_w);
  const T* in = input.data().data();
  const T* w = params.weight.data().data();
  const T* b = params.bias.data().data();
  T* o = out->data.data();

  for (int oc = 0; oc < out_ch; ++oc) {
    T* out_plane = o + static_cast<std::size_t>(oc) * out_h * out_w;
    std::fill(out_plane, out_plane + static_cast<std::size_t>(out_h) * out_w, b[oc]);
    for (int ic = 0; ic < in_ch; ++ic) {
      const T* in_plane = in + static_cast<std::size_t>(ic) * in_h * in_w;
      const T* w_tap = w + (static_cast<std::size_t>(oc) * in_ch + ic) * kh * kw;
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          const T wv = w_tap[ky * kw + kx];
          if (wv == T(0)) continue;
          for (int y = 0; y < out_h; ++y) {
            const int iy = y * stride - pad + ky;
            if (iy < 0 || iy >= in_h) continue;
            const T* in_row = in_plane + static_cast<std::size_t>(iy) * in_w;
            T* out_row = out_plane + static_cast<std::size_t>(y) * out_w;
            if (stride == 1) {
              const int x_lo = std::max(0, pad - kx);
              const int x_hi = std::min(out_w, in_w + pad - kx);
              const T* src = in_row + x_lo - pad + kx;
              for (int x = x_lo; x < x_hi; ++x) out_row[x] += wv * src[x - x_lo];
            } else {
              for (int x = 0; x < out_w; ++x) {
                const int ix = x * stride - pad + kx;
                if (ix >= 0 && ix < in_w) out_row[x] += wv * in_row[ix];
              }
            }
          }
        }
      }
    }
  }

  const bool need_in = input.requires_grad();
  const bool need_w = params.weight.requires_grad();
  const bool need_b = params.bias.requires_grad();
  if (need_in || need_w || need_b) {
    out->requires_grad = true;
    auto in_node = input.node();
    auto w_node = params.weight.node();
    auto b_node = params.bias.node();
    out->parents = {in_node, w_node, b_node};
    out->backward_fn = [=](Node<T>& self) {
      const T* g = self.grad.data();
      if (need_b) {
        detail::ensure_grad(*b_node);
        for (int oc = 0; oc < out_ch; ++oc) {
          T acc = T(0);
          const T* g_plane = g + static_cast<std::size_t>(oc) * out_h * out_w;
          for (int i = 0; i < out_h * out_w; ++i) acc += g_plane[i];
          b_node->grad[oc] += acc;
        }
      }
      if (need_w) detail::ensure_grad(*w_node);
      if (need_in) detail::ensure_grad(*in_node);
      const T* in_d = in_node->data.data();
      const T* w_d = w_node->data.data();
      for (int oc = 0; oc < out_ch; ++oc) {
        const T* g_plane = g + static_cast<std::size_t>(oc) * out_h * out_w;
        for (int ic = 0; ic < in_ch; ++ic) {
          const T* in_plane = in_d + static_cast<std::size_t>(ic) * in_h * in_w;
          T* gin_plane = need_in ? in_node->grad.data() + static_cast<std::size_t>(ic) * in_h * in_w : nullptr;
          const std::size_t w_base = (static_cast<std::size_t>(oc) * in_ch + ic) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
              const T wv = w_d[w_base + ky * kw + kx];
              T wacc = T(0);
              for (int y = 0; y < out_h; ++y) {
                const int iy = y * stride - pad + ky;
                if (iy < 0 || iy >= in_h) continue;
                const T* g_row = g_plane + static_cast<std::size_t>(y) * out_w;
                const T* in_row = in_plane + static_cast<std::size_t>(iy) * in_w;
                T* gin_row = need_in ? gin_plane + static_cast<std::size_t>(iy) * in_w : nullptr;
                for (int x = 0; x < out_w; ++x) {
                  const int ix = x * stride - pad + kx;
                  if (ix < 0 || ix >= in_w) continue;
                  if (need_w) wacc += g_row[x] * in_row[ix];
                  if (need_in) gin_row[ix] += g_row[x] * wv;
                }
              }
              if (need_w) w_node->grad[w_base + ky * kw + kx] += wacc;
            }
          }
        }
      }
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> relu(const TensorT<T>& input) {
  auto out = make_output<T>(input.channels(), input.height(), input.width());
  const auto& x = input.data();
  for (std::size_t i = 0; i < x.size(); ++i) out->data[i] = x[i] > T(0) ? x[i] : T(0);
  if (input.requires_grad()) {
    out->requires_grad = true;
    auto in_node = input.node();
    out->parents = {in_node};
    out->backward_fn = [in_node](Node<T>& self) {
      detail::ensure_grad(*in_node);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (in_node->data[i] > T(0)) in_node->grad[i] += self.grad[i];
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> maxpool2(const TensorT<T>& input) {
  check_finite_shape(input, "maxpool2");
  const int c = input.channels(), h = input.height(), w = input.width();
  const int out_h = (h + 1) / 2, out_w = (w + 1) / 2;
  auto out = make_output<T>(c, out_h, out_w);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out->data.size());
  const T* in = input.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* plane = in + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < out_h; ++y) {
      for (int x = 0; x < out_w; ++x) {
        T best = -std::numeric_limits<T>::infinity();
        int best_idx = -1;
        for (int dy = 0; dy < 2; ++dy) {
          const int iy = std::min(2 * y + dy, h - 1);
          for (int dx = 0; dx < 2; ++dx) {
            const int ix = std::min(2 * x + dx, w - 1);
            const int idx = iy * w + ix;
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
        }
        const std::size_t oi = (static_cast<std::size_t>(ch) * out_h + y) * out_w + x;
        out->data[oi] = best;
        (*argmax)[oi] = best_idx + ch * h * w;
      }
    }
  }
  if (input.requires_grad()) {
    out->requires_grad = true;
    auto in_node = input.node();
    out->parents = {in_node};
    out->backward_fn = [in_node, argmax](Node<T>& self) {
      detail::ensure_grad(*in_node);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        in_node->grad[(*argmax)[i]] += self.grad[i];
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> batchnorm(const TensorT<T>& input, BatchNormParamsT<T>& params) {
  const int c = input.channels(), h = input.height(), w = input.width();
  if (c != params.channels())
    throw std::invalid_argument("batchnorm: input has " + std::to_string(c) +
                                " channels, params expect " + std::to_string(params.channels()));
  if (h * w == 0) throw std::invalid_argument("batchnorm: zero spatial extent");
  const int n = h * w;
  auto out = make_output<T>(c, h, w);
  const T* in = input.data().data();
  const T* gamma = params.gamma.data().data();
  const T* beta = params.beta.data().data();

  auto mean = std::make_shared<std::vector<T>>(c);
  auto inv_std = std::make_shared<std::vector<T>>(c);
  const bool training = params.training_mode;

  for (int ch = 0; ch < c; ++ch) {
    const T* plane = in + static_cast<std::size_t>(ch) * n;
    T mu, var;
    if (training) {
      T acc = T(0);
      for (int i = 0; i < n; ++i) acc += plane[i];
      mu = acc / static_cast<T>(n);
      T vacc = T(0);
      for (int i = 0; i < n; ++i) {
        const T d = plane[i] - mu;
        vacc += d * d;
      }
      var = vacc / static_cast<T>(n);
      params.running_mean[ch] = (T(1) - params.momentum) * params.running_mean[ch] + params.momentum * mu;
      params.running_var[ch] = (T(1) - params.momentum) * params.running_var[ch] + params.momentum * var;
    } else {
      mu = params.running_mean[ch];
      var = params.running_var[ch];
    }
    const T istd = T(1) / std::sqrt(var + params.eps);
    (*mean)[ch] = mu;
    (*inv_std)[ch] = istd;
    T* out_plane = out->data.data() + static_cast<std::size_t>(ch) * n;
    for (int i = 0; i < n; ++i) out_plane[i] = gamma[ch] * ((plane[i] - mu) * istd) + beta[ch];
  }

  const bool need_in = input.requires_grad();
  const bool need_g = params.gamma.requires_grad();
  const bool need_b = params.beta.requires_grad();
  if (need_in || need_g || need_b) {
    out->requires_grad = true;
    auto in_node = input.node();
    auto g_node = params.gamma.node();
    auto b_node = params.beta.node();
    out->parents = {in_node, g_node, b_node};
    out->backward_fn = [=](Node<T>& self) {
      if (need_g) detail::ensure_grad(*g_node);
      if (need_b) detail::ensure_grad(*b_node);
      if (need_in) detail::ensure_grad(*in_node);
      for (int ch = 0; ch < c; ++ch) {
        const T* x_plane = in_node->data.data() + static_cast<std::size_t>(ch) * n;
        const T* g_plane = self.grad.data() + static_cast<std::size_t>(ch) * n;
        const T mu = (*mean)[ch];
        const T istd = (*inv_std)[ch];
        T sum_g = T(0), sum_gx = T(0);
        for (int i = 0; i < n; ++i) {
          const T xh = (x_plane[i] - mu) * istd;
          sum_g += g_plane[i];
          sum_gx += g_plane[i] * xh;
        }
        if (need_b) b_node->grad[ch] += sum_g;
        if (need_g) g_node->grad[ch] += sum_gx;
        if (need_in) {
          T* gi_plane = in_node->grad.data() + static_cast<std::size_t>(ch) * n;
          const T gam = g_node->data[ch];
          if (training) {
            const T mg = sum_g / static_cast<T>(n);
            const T mgx = sum_gx / static_cast<T>(n);
            for (int i = 0; i < n; ++i) {
              const T xh = (x_plane[i] - mu) * istd;
              gi_plane[i] += gam * istd * (g_plane[i] - mg - xh * mgx);
            }
          } else {
            for (int i = 0; i < n; ++i) gi_plane[i] += gam * istd * g_plane[i];
          }
        }
      }
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> bilinear_upsample(const TensorT<T>& input, int target_h, int target_w) {
  check_finite_shape(input, "bilinear_upsample");
  const int c = input.channels(), h = input.height(), w = input.width();
  if (target_h < h || target_w < w)
    throw std::invalid_argument("bilinear_upsample: target " + std::to_string(target_h) + "x" +
                                std::to_string(target_w) + " smaller than source " +
                                input.shape_string());
  auto out = make_output<T>(c, target_h, target_w);
  // Align-corners sampling grid, shared by forward and backward.
  const T sy = target_h > 1 ? static_cast<T>(h - 1) / static_cast<T>(target_h - 1) : T(0);
  const T sx = target_w > 1 ? static_cast<T>(w - 1) / static_cast<T>(target_w - 1) : T(0);
  const T* in = input.data().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* plane = in + static_cast<std::size_t>(ch) * h * w;
    T* out_plane = out->data.data() + static_cast<std::size_t>(ch) * target_h * target_w;
    for (int y = 0; y < target_h; ++y) {
      const T fy_full = sy * static_cast<T>(y);
      const int y0 = std::min(static_cast<int>(fy_full), h - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const T fy = fy_full - static_cast<T>(y0);
      for (int x = 0; x < target_w; ++x) {
        const T fx_full = sx * static_cast<T>(x);
        const int x0 = std::min(static_cast<int>(fx_full), w - 1);
        const int x1 = std::min(x0 + 1, w - 1);
        const T fx = fx_full - static_cast<T>(x0);
        const T w00 = (T(1) - fy) * (T(1) - fx);
        const T w01 = (T(1) - fy) * fx;
        const T w10 = fy * (T(1) - fx);
        const T w11 = fy * fx;
        out_plane[y * target_w + x] = w00 * plane[y0 * w + x0] + w01 * plane[y0 * w + x1] +
                                      w10 * plane[y1 * w + x0] + w11 * plane[y1 * w + x1];
      }
    }
  }
  if (input.requires_grad()) {
    out->requires_grad = true;
    auto in_node = input.node();
    out->parents = {in_node};
    out->backward_fn = [=](Node<T>& self) {
      detail::ensure_grad(*in_node);
      for (int ch = 0; ch < c; ++ch) {
        const T* g_plane = self.grad.data() + static_cast<std::size_t>(ch) * target_h * target_w;
        T* gi_plane = in_node->grad.data() + static_cast<std::size_t>(ch) * h * w;
        for (int y = 0; y < target_h; ++y) {
          const T fy_full = sy * static_cast<T>(y);
          const int y0 = std::min(static_cast<int>(fy_full), h - 1);
          const int y1 = std::min(y0 + 1, h - 1);
          const T fy = fy_full - static_cast<T>(y0);
          for (int x = 0; x < target_w; ++x) {
            const T fx_full = sx * static_cast<T>(x);
            const int x0 = std::min(static_cast<int>(fx_full), w - 1);
            const int x1 = std::min(x0 + 1, w - 1);
            const T fx = fx_full - static_cast<T>(x0);
            const T g = g_plane[y * target_w + x];
            gi_plane[y0 * w + x0] += g * (T(1) - fy) * (T(1) - fx);
            gi_plane[y0 * w + x1] += g * (T(1) - fy) * fx;
            gi_plane[y1 * w + x0] += g * fy * (T(1) - fx);
            gi_plane[y1 * w + x1] += g * fy * fx;
          }
        }
      }
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> correlate_1x1(const TensorT<T>& descriptor, const TensorT<T>& map) {
  const int d = map.channels(), h = map.height(), w = map.width();
  if (descriptor.channels() != d || descriptor.height() != 1 || descriptor.width() != 1)
    throw std::invalid_argument("correlate_1x1: descriptor " + descriptor.shape_string() +
                                " does not match map channels " + std::to_string(d));
  auto out = make_output<T>(1, h, w);
  const T* desc = descriptor.data().data();
  const T* m = map.data().data();
  T* o = out->data.data();
  for (int dd = 0; dd < d; ++dd) {
    const T dv = desc[dd];
    const T* plane = m + static_cast<std::size_t>(dd) * h * w;
    for (int i = 0; i < h * w; ++i) o[i] += dv * plane[i];
  }
  const bool need_d = descriptor.requires_grad();
  const bool need_m = map.requires_grad();
  if (need_d || need_m) {
    out->requires_grad = true;
    auto d_node = descriptor.node();
    auto m_node = map.node();
    out->parents = {d_node, m_node};
    out->backward_fn = [=](Node<T>& self) {
      const T* g = self.grad.data();
      if (need_d) {
        detail::ensure_grad(*d_node);
        for (int dd = 0; dd < d; ++dd) {
          const T* plane = m_node->data.data() + static_cast<std::size_t>(dd) * h * w;
          T acc = T(0);
          for (int i = 0; i < h * w; ++i) acc += g[i] * plane[i];
          d_node->grad[dd] += acc;
        }
      }
      if (need_m) {
        detail::ensure_grad(*m_node);
        for (int dd = 0; dd < d; ++dd) {
          const T dv = d_node->data[dd];
          T* gp = m_node->grad.data() + static_cast<std::size_t>(dd) * h * w;
          for (int i = 0; i < h * w; ++i) gp[i] += g[i] * dv;
        }
      }
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> sample_bilinear(const TensorT<T>& map, T x, T y) {
  check_finite_shape(map, "sample_bilinear");
  const int d = map.channels(), h = map.height(), w = map.width();
  const T cx = std::min(std::max(x, T(0)), static_cast<T>(w - 1));
  const T cy = std::min(std::max(y, T(0)), static_cast<T>(h - 1));
  const int x0 = std::min(static_cast<int>(cx), w - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const int y0 = std::min(static_cast<int>(cy), h - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const T fx = cx - static_cast<T>(x0);
  const T fy = cy - static_cast<T>(y0);
  const T w00 = (T(1) - fy) * (T(1) - fx);
  const T w01 = (T(1) - fy) * fx;
  const T w10 = fy * (T(1) - fx);
  const T w11 = fy * fx;
  auto out = make_output<T>(d, 1, 1);
  const T* m = map.data().data();
  for (int dd = 0; dd < d; ++dd) {
    const T* plane = m + static_cast<std::size_t>(dd) * h * w;
    out->data[dd] = w00 * plane[y0 * w + x0] + w01 * plane[y0 * w + x1] +
                    w10 * plane[y1 * w + x0] + w11 * plane[y1 * w + x1];
  }
  if (map.requires_grad()) {
    out->requires_grad = true;
    auto m_node = map.node();
    out->parents = {m_node};
    out->backward_fn = [=](Node<T>& self) {
      detail::ensure_grad(*m_node);
      for (int dd = 0; dd < d; ++dd) {
        const T g = self.grad[dd];
        T* gp = m_node->grad.data() + static_cast<std::size_t>(dd) * h * w;
        gp[y0 * w + x0] += g * w00;
        gp[y0 * w + x1] += g * w01;
        gp[y1 * w + x0] += g * w10;
        gp[y1 * w + x1] += g * w11;
      }
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> softmax2d(const TensorT<T>& logits) {
  check_finite_shape(logits, "softmax2d");
  if (logits.channels() != 1)
    throw std::invalid_argument("softmax2d: expected single channel, got " + logits.shape_string());
  const auto& x = logits.data();
  auto out = make_output<T>(1, logits.height(), logits.width());
  const T m = *std::max_element(x.begin(), x.end());
  T total = T(0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out->data[i] = std::exp(x[i] - m);
    total += out->data[i];
  }
  const T inv = T(1) / total;
  for (auto& v : out->data) v *= inv;
  if (logits.requires_grad()) {
    out->requires_grad = true;
    auto in_node = logits.node();
    out->parents = {in_node};
    out->backward_fn = [in_node](Node<T>& self) {
      detail::ensure_grad(*in_node);
      T dot = T(0);
      for (std::size_t i = 0; i < self.grad.size(); ++i) dot += self.grad[i] * self.data[i];
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        in_node->grad[i] += self.data[i] * (self.grad[i] - dot);
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> spatial_cross_entropy(const TensorT<T>& logits, int gt_x, int gt_y) {
  check_finite_shape(logits, "spatial_cross_entropy");
  if (logits.channels() != 1)
    throw std::invalid_argument("spatial_cross_entropy: expected single channel map");
  const int h = logits.height(), w = logits.width();
  if (gt_x < 0 || gt_x >= w || gt_y < 0 || gt_y >= h)
    throw std::out_of_range("spatial_cross_entropy: ground truth (" + std::to_string(gt_x) + "," +
                            std::to_string(gt_y) + ") outside " + std::to_string(w) + "x" +
                            std::to_string(h) + " map");
  const auto& x = logits.data();
  const T m = *std::max_element(x.begin(), x.end());
  T total = T(0);
  for (const T v : x) total += std::exp(v - m);
  auto out = make_output<T>(1, 1, 1);
  const std::size_t gt = static_cast<std::size_t>(gt_y) * w + gt_x;
  out->data[0] = std::log(total) + m - x[gt];
  if (logits.requires_grad()) {
    out->requires_grad = true;
    auto in_node = logits.node();
    const T inv = T(1) / total;
    out->parents = {in_node};
    out->backward_fn = [in_node, m, inv, gt](Node<T>& self) {
      detail::ensure_grad(*in_node);
      const T g = self.grad[0];
      for (std::size_t i = 0; i < in_node->data.size(); ++i) {
        T p = std::exp(in_node->data[i] - m) * inv;
        if (i == gt) p -= T(1);
        in_node->grad[i] += g * p;
      }
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b))
    throw std::invalid_argument("add: shape mismatch " + a.shape_string() + " vs " + b.shape_string());
  auto out = make_output<T>(a.channels(), a.height(), a.width());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < av.size(); ++i) out->data[i] = av[i] + bv[i];
  const bool need_a = a.requires_grad(), need_b = b.requires_grad();
  if (need_a || need_b) {
    out->requires_grad = true;
    auto a_node = a.node();
    auto b_node = b.node();
    out->parents = {a_node, b_node};
    out->backward_fn = [=](Node<T>& self) {
      if (need_a) {
        detail::ensure_grad(*a_node);
        for (std::size_t i = 0; i < self.grad.size(); ++i) a_node->grad[i] += self.grad[i];
      }
      if (need_b) {
        detail::ensure_grad(*b_node);
        for (std::size_t i = 0; i < self.grad.size(); ++i) b_node->grad[i] += self.grad[i];
      }
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T factor) {
  auto out = make_output<T>(a.channels(), a.height(), a.width());
  const auto& av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) out->data[i] = av[i] * factor;
  if (a.requires_grad()) {
    out->requires_grad = true;
    auto a_node = a.node();
    out->parents = {a_node};
    out->backward_fn = [a_node, factor](Node<T>& self) {
      detail::ensure_grad(*a_node);
      for (std::size_t i = 0; i < self.grad.size(); ++i) a_node->grad[i] += self.grad[i] * factor;
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> sum(const TensorT<T>& input) {
  check_finite_shape(input, "sum");
  auto out = make_output<T>(1, 1, 1);
  T acc = T(0);
  for (const T v : input.data()) acc += v;
  out->data[0] = acc;
  if (input.requires_grad()) {
    out->requires_grad = true;
    auto in_node = input.node();
    out->parents = {in_node};
    out->backward_fn = [in_node](Node<T>& self) {
      detail::ensure_grad(*in_node);
      for (auto& g : in_node->grad) g += self.grad[0];
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const int h = parts[0].height(), w = parts[0].width();
  int total_c = 0;
  for (const auto& p : parts) {
    if (p.height() != h || p.width() != w)
      throw std::invalid_argument("concat_channels: spatial mismatch " + p.shape_string());
    total_c += p.channels();
  }
  auto out = make_output<T>(total_c, h, w);
  std::size_t offset = 0;
  bool need = false;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out->data.begin() + offset);
    offset += p.size();
    need = need || p.requires_grad();
  }
  if (need) {
    out->requires_grad = true;
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    out->parents = nodes;
    out->backward_fn = [nodes](Node<T>& self) {
      std::size_t off = 0;
      for (auto& n : nodes) {
        detail::ensure_grad(*n);
        for (std::size_t i = 0; i < n->data.size(); ++i) n->grad[i] += self.grad[off + i];
        off += n->data.size();
      }
    };
  }
  return TensorT<T>::from_node(out);
}

template <typename T>
TensorT<T> random_tensor(std::mt19937_64& rng, int c, int h, int w, T lo, T hi) {
  TensorT<T> t(c, h, w);
  for (auto& v : t.data()) v = static_cast<T>(uniform(rng, static_cast<double>(lo), static_cast<double>(hi)));
  return t;
}

GradCheckReport gradcheck(const GraphFn& graph, std::vector<TensorD> inputs, double step) {
  for (auto& t : inputs) t.set_requires_grad(true);
  TensorD output = graph(inputs);
  if (output.size() != 1) throw std::invalid_argument("gradcheck: graph must produce a scalar");
  output.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());
  // Finite-difference evaluations need values only, not fresh graphs.
  for (auto& t : inputs) t.set_requires_grad(false);

  GradCheckReport report;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& values = inputs[ti].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = graph(inputs).item();
      values[i] = saved - step;
      const double down = graph(inputs).item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[ti][i];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({1.0, std::abs(a), std::abs(numeric)});
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, rel);
      ++report.elements_checked;
    }
  }
  return report;
}

template void TensorT<float>::backward() const;
template void TensorT<double>::backward() const;

#define S2D_INSTANTIATE_OPS(T)                                                           \
  template TensorT<T> conv2d(const TensorT<T>&, const ConvParamsT<T>&);                  \
  template TensorT<T> relu(const TensorT<T>&);                                           \
  template TensorT<T> maxpool2(const TensorT<T>&);                                       \
  template TensorT<T> batchnorm(const TensorT<T>&, BatchNormParamsT<T>&);                \
  template TensorT<T> bilinear_upsample(const TensorT<T>&, int, int);                    \
  template TensorT<T> correlate_1x1(const TensorT<T>&, const TensorT<T>&);               \
  template TensorT<T> sample_bilinear(const TensorT<T>&, T, T);                          \
  template TensorT<T> softmax2d(const TensorT<T>&);                                      \
  template TensorT<T> spatial_cross_entropy(const TensorT<T>&, int, int);                \
  template TensorT<T> add(const TensorT<T>&, const TensorT<T>&);                         \
  template TensorT<T> scale(const TensorT<T>&, T);                                       \
  template TensorT<T> sum(const TensorT<T>&);                                            \
  template TensorT<T> concat_channels(const std::vector<TensorT<T>>&);                   \
  template TensorT<T> random_tensor(std::mt19937_64&, int, int, int, T, T);

S2D_INSTANTIATE_OPS(float)
S2D_INSTANTIATE_OPS(double)

#undef S2D_INSTANTIATE_OPS

}  // namespace s2d
