#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "hitl/autograd.hpp"

namespace hitl {

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(s));
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kh, kw, stride, pad, out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t P = g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          T* dst = row + oy * g.out_w;
          if (y < 0 || y >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            dst[ox] = (x < 0 || x >= static_cast<long>(g.width)) ? T(0) : src[x];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t P = g.pixels();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * P;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          T* dst = img + (c * g.height + static_cast<std::size_t>(y)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long x = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
            if (x >= 0 && x < static_cast<long>(g.width)) dst[x] += row[oy * g.out_w + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "add");
  BasicTensor<T> out = a.value();
  out += b.value();
  return make_result<T>(std::move(out), OpKind::Add, {a, b},
                        [](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (auto& gi : gin)
                            if (!gi.empty()) gi += g;
                        });
}

/// x[N, F, ...] + b[F]; the only broadcasting op.
template <class T>
Var<T> add_bias(const Var<T>& x, const Var<T>& b) {
  const Shape& s = x.shape();
  if (s.size() < 2 || b.shape().size() != 1 || b.shape()[0] != s[1]) {
    throw DimensionError("add_bias: input " + shape_str(s) + " incompatible with bias " + shape_str(b.shape()));
  }
  const std::size_t N = s[0], F = s[1], inner = x.value().numel() / (N * F);
  BasicTensor<T> out = x.value();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f) {
      T* p = out.raw() + (n * F + f) * inner;
      const T bv = b.value()[f];
      for (std::size_t k = 0; k < inner; ++k) p[k] += bv;
    }
  return make_result<T>(std::move(out), OpKind::AddBias, {x, b},
                        [N, F, inner](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          if (!gin[0].empty()) gin[0] += g;
                          if (!gin[1].empty()) {
                            for (std::size_t n = 0; n < N; ++n)
                              for (std::size_t f = 0; f < F; ++f) {
                                const T* p = g.raw() + (n * F + f) * inner;
                                T acc = 0;
                                for (std::size_t k = 0; k < inner; ++k) acc += p[k];
                                gin[1][f] += acc;
                              }
                          }
                        });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  a.value().require_same_shape(b.value(), "mul");
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  BasicTensor<T> av = a.value(), bv = b.value();
  return make_result<T>(std::move(out), OpKind::Mul, {a, b},
                        [av, bv](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          if (!gin[0].empty())
                            for (std::size_t i = 0; i < g.numel(); ++i) gin[0][i] += g[i] * bv[i];
                          if (!gin[1].empty())
                            for (std::size_t i = 0; i < g.numel(); ++i) gin[1][i] += g[i] * av[i];
                        });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return make_result<T>(std::move(out), OpKind::Scale, {a},
                        [s](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t i = 0; i < g.numel(); ++i) gin[0][i] += s * g[i];
                        });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  double acc = 0.0;
  for (T v : a.value().data()) acc += v;
  return make_result<T>(BasicTensor<T>::scalar(static_cast<T>(acc)), OpKind::Sum, {a},
                        [](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          const T gv = g[0];
                          for (auto& v : gin[0].data()) v += gv;
                        });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ContractError("mean of empty tensor");
  double acc = 0.0;
  for (T v : a.value().data()) acc += v;
  return make_result<T>(BasicTensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))), OpKind::Mean, {a},
                        [n](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          const T gv = g[0] / static_cast<T>(n);
                          for (auto& v : gin[0].data()) v += gv;
                        });
}

/// Subgradient at exactly 0 is 0.
template <class T>
Var<T> relu(const Var<T>& a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  BasicTensor<T> in = a.value();
  return make_result<T>(std::move(out), OpKind::Relu, {a},
                        [in](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t i = 0; i < g.numel(); ++i)
                            if (in[i] > T(0)) gin[0][i] += g[i];
                        });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  BasicTensor<T> out = a.value();
  for (auto& v : out.data()) {
    v = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  BasicTensor<T> y = out;
  return make_result<T>(std::move(out), OpKind::Sigmoid, {a},
                        [y](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t i = 0; i < g.numel(); ++i) gin[0][i] += g[i] * y[i] * (T(1) - y[i]);
                        });
}

/// Row-wise softmax over the last axis of a [N, K] tensor.
template <class T>
Var<T> softmax(const Var<T>& a) {
  detail::require_rank(a.shape(), 2, "softmax");
  const std::size_t N = a.shape()[0], K = a.shape()[1];
  BasicTensor<T> out = a.value();
  for (std::size_t n = 0; n < N; ++n) {
    T* row = out.raw() + n * K;
    const T m = *std::max_element(row, row + K);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      row[k] = std::exp(row[k] - m);
      z += row[k];
    }
    for (std::size_t k = 0; k < K; ++k) row[k] = static_cast<T>(row[k] / z);
  }
  BasicTensor<T> y = out;
  return make_result<T>(std::move(out), OpKind::Softmax, {a},
                        [y, N, K](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t n = 0; n < N; ++n) {
                            const T* yr = y.raw() + n * K;
                            const T* gr = g.raw() + n * K;
                            T dot = 0;
                            for (std::size_t k = 0; k < K; ++k) dot += gr[k] * yr[k];
                            for (std::size_t k = 0; k < K; ++k) gin[0][n * K + k] += yr[k] * (gr[k] - dot);
                          }
                        });
}

/// Mean binary cross-entropy of probabilities `p` against constant targets.
template <class T>
Var<T> binary_cross_entropy(const Var<T>& p, const BasicTensor<T>& target) {
  p.value().require_same_shape(target, "binary_cross_entropy");
  const T eps = std::is_same_v<T, float> ? T(1e-7) : T(1e-12);
  const std::size_t n = target.numel();
  double acc = 0.0;
  BasicTensor<T> clamped = p.value();
  for (std::size_t i = 0; i < n; ++i) {
    clamped[i] = std::clamp(clamped[i], eps, T(1) - eps);
    const double q = clamped[i], y = target[i];
    acc -= y * std::log(q) + (1.0 - y) * std::log(1.0 - q);
  }
  return make_result<T>(BasicTensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n))),
                        OpKind::BinaryCrossEntropy, {p},
                        [clamped, target, n](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          const T gv = g[0] / static_cast<T>(n);
                          for (std::size_t i = 0; i < n; ++i) {
                            const T q = clamped[i], y = target[i];
                            gin[0][i] += gv * (-(y / q) + (T(1) - y) / (T(1) - q));
                          }
                        });
}

/// Cross-correlation of x[N,C,H,W] with kernel[F,C,kH,kW].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, std::size_t padding) {
  const Shape& xs = x.shape();
  const Shape& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4 || xs[1] != ks[1]) {
    throw DimensionError("conv2d: input " + shape_str(xs) + " incompatible with kernel " + shape_str(ks));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  const long hp = static_cast<long>(xs[2] + 2 * padding) - static_cast<long>(ks[2]);
  const long wp = static_cast<long>(xs[3] + 2 * padding) - static_cast<long>(ks[3]);
  if (hp < 0 || wp < 0 || hp % static_cast<long>(stride) != 0 || wp % static_cast<long>(stride) != 0) {
    throw DimensionError("conv2d: input " + shape_str(xs) + " and kernel " + shape_str(ks) +
                         " give a non-integral output size at stride " + std::to_string(stride) + ", padding " +
                         std::to_string(padding));
  }
  const detail::ConvGeometry geo{xs[1], xs[2], xs[3], ks[2], ks[3], stride, padding,
                                 static_cast<std::size_t>(hp) / stride + 1, static_cast<std::size_t>(wp) / stride + 1};
  const std::size_t N = xs[0], F = ks[0], K = geo.patch(), P = geo.pixels();
  const std::size_t in_sz = geo.channels * geo.height * geo.width;

  BasicTensor<T> out(Shape{N, F, geo.out_h, geo.out_w});
  std::vector<T> cols(K * P);
  detail::CMapR<T> W(kernel.value().raw(), F, K);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(x.value().raw() + n * in_sz, geo, cols.data());
    detail::MapR<T> o(out.raw() + n * F * P, F, P);
    o.noalias() = W * detail::CMapR<T>(cols.data(), K, P);
  }

  BasicTensor<T> xv = x.value(), kv = kernel.value();
  return make_result<T>(std::move(out), OpKind::Conv2d, {x, kernel},
                        [xv, kv, geo, N, F, K, P, in_sz](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          std::vector<T> cols(K * P);
                          detail::CMapR<T> W(kv.raw(), F, K);
                          for (std::size_t n = 0; n < N; ++n) {
                            detail::CMapR<T> go(g.raw() + n * F * P, F, P);
                            if (!gin[1].empty()) {
                              detail::im2col(xv.raw() + n * in_sz, geo, cols.data());
                              detail::MapR<T> dw(gin[1].raw(), F, K);
                              dw.noalias() += go * detail::CMapR<T>(cols.data(), K, P).transpose();
                            }
                            if (!gin[0].empty()) {
                              detail::MapR<T> dc(cols.data(), K, P);
                              dc.noalias() = W.transpose() * go;
                              detail::col2im_add(cols.data(), geo, gin[0].raw() + n * in_sz);
                            }
                          }
                        });
}

/// Max pooling without padding. Ties route to the first index in row-major order.
template <class T>
Var<T> max_pool2d(const Var<T>& x, std::size_t kernel, std::size_t stride) {
  detail::require_rank(x.shape(), 4, "max_pool2d");
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (kernel == 0 || stride == 0 || kernel > H || kernel > W) {
    throw DimensionError("max_pool2d: window " + std::to_string(kernel) + " does not fit " + shape_str(x.shape()));
  }
  const std::size_t Ho = (H - kernel) / stride + 1, Wo = (W - kernel) / stride + 1;
  BasicTensor<T> out(Shape{N, C, Ho, Wo});
  std::vector<std::size_t> argmax(out.numel());
  const T* in = x.value().raw();
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* plane = in + nc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = (oy * stride) * W + ox * stride;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx = (oy * stride + i) * W + ox * stride + j;
            if (plane[idx] > plane[best]) best = idx;
          }
        const std::size_t o = (nc * Ho + oy) * Wo + ox;
        out[o] = plane[best];
        argmax[o] = nc * H * W + best;
      }
  }
  return make_result<T>(std::move(out), OpKind::MaxPool2d, {x},
                        [argmax = std::move(argmax)](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t o = 0; o < g.numel(); ++o) gin[0][argmax[o]] += g[o];
                        });
}

/// [N,C,H,W] -> [N,C]
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
  BasicTensor<T> out(Shape{N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double acc = 0.0;
    const T* p = x.value().raw() + nc * HW;
    for (std::size_t k = 0; k < HW; ++k) acc += p[k];
    out[nc] = static_cast<T>(acc / static_cast<double>(HW));
  }
  return make_result<T>(std::move(out), OpKind::GlobalAvgPool, {x},
                        [N, C, HW](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t nc = 0; nc < N * C; ++nc) {
                            const T gv = g[nc] / static_cast<T>(HW);
                            T* p = gin[0].raw() + nc * HW;
                            for (std::size_t k = 0; k < HW; ++k) p[k] += gv;
                          }
                        });
}

/// Affine layer: x[N,D] * weight[O,D]^T + bias[O].
template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] || bias.shape() != Shape{ws[0]}) {
    throw DimensionError("dense: input " + shape_str(xs) + ", weight " + shape_str(ws) + ", bias " +
                         shape_str(bias.shape()));
  }
  const std::size_t N = xs[0], D = xs[1], O = ws[0];
  BasicTensor<T> out(Shape{N, O});
  detail::MapR<T> o(out.raw(), N, O);
  o.noalias() = detail::CMapR<T>(x.value().raw(), N, D) * detail::CMapR<T>(weight.value().raw(), O, D).transpose();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < O; ++k) out[n * O + k] += bias.value()[k];
  BasicTensor<T> xv = x.value(), wv = weight.value();
  return make_result<T>(std::move(out), OpKind::Dense, {x, weight, bias},
                        [xv, wv, N, D, O](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          detail::CMapR<T> go(g.raw(), N, O);
                          if (!gin[0].empty()) {
                            detail::MapR<T>(gin[0].raw(), N, D).noalias() += go * detail::CMapR<T>(wv.raw(), O, D);
                          }
                          if (!gin[1].empty()) {
                            detail::MapR<T>(gin[1].raw(), O, D).noalias() +=
                                go.transpose() * detail::CMapR<T>(xv.raw(), N, D);
                          }
                          if (!gin[2].empty()) {
                            for (std::size_t n = 0; n < N; ++n)
                              for (std::size_t k = 0; k < O; ++k) gin[2][k] += g[n * O + k];
                          }
                        });
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  BasicTensor<T> out = x.value().reshaped(std::move(shape));
  return make_result<T>(std::move(out), OpKind::Reshape, {x},
                        [](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t i = 0; i < g.numel(); ++i) gin[0][i] += g[i];
                        });
}

/// Item `index` of the leading axis, keeping a unit leading dimension.
template <class T>
Var<T> slice_batch(const Var<T>& x, std::size_t index) {
  const Shape& s = x.shape();
  if (s.empty() || index >= s[0]) {
    throw ContractError("slice_batch: index " + std::to_string(index) + " out of range for " + shape_str(s));
  }
  Shape os = s;
  os[0] = 1;
  const std::size_t inner = x.value().numel() / s[0];
  std::vector<T> data(x.value().raw() + index * inner, x.value().raw() + (index + 1) * inner);
  return make_result<T>(BasicTensor<T>(std::move(os), std::move(data)), OpKind::SliceBatch, {x},
                        [index, inner](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          T* dst = gin[0].raw() + index * inner;
                          for (std::size_t i = 0; i < inner; ++i) dst[i] += g[i];
                        });
}

/// Scalars -> [n] vector.
template <class T>
Var<T> stack(const std::vector<Var<T>>& parts) {
  BasicTensor<T> out(Shape{parts.size()});
  for (std::size_t i = 0; i < parts.size(); ++i) out[i] = parts[i].item();
  return make_result<T>(std::move(out), OpKind::Stack, parts,
                        [](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t i = 0; i < gin.size(); ++i)
                            if (!gin[i].empty()) gin[i][0] += g[i];
                        });
}

/// Sum over channels of features[1,C,H,W] weighted by constant per-channel
/// weights; returns an [H,W] map.
template <class T>
Var<T> channel_weighted_sum(const Var<T>& features, const BasicTensor<T>& weights) {
  const Shape& s = features.shape();
  if (s.size() != 4 || s[0] != 1 || weights.shape() != Shape{s[1]}) {
    throw DimensionError("channel_weighted_sum: features " + shape_str(s) + " vs weights " +
                         shape_str(weights.shape()));
  }
  const std::size_t C = s[1], HW = s[2] * s[3];
  BasicTensor<T> out(Shape{s[2], s[3]});
  for (std::size_t c = 0; c < C; ++c) {
    const T w = weights[c];
    const T* p = features.value().raw() + c * HW;
    for (std::size_t k = 0; k < HW; ++k) out[k] += w * p[k];
  }
  return make_result<T>(std::move(out), OpKind::ChannelWeightedSum, {features},
                        [weights, C, HW](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t c = 0; c < C; ++c) {
                            T* p = gin[0].raw() + c * HW;
                            for (std::size_t k = 0; k < HW; ++k) p[k] += weights[c] * g[k];
                          }
                        });
}

/// x / max(x). A map whose maximum is not positive becomes a constant zero map.
template <class T>
Var<T> normalize_max(const Var<T>& x) {
  const auto& v = x.value();
  if (v.empty()) throw ContractError("normalize_max of empty tensor");
  const auto it = std::max_element(v.data().begin(), v.data().end());
  const std::size_t arg = static_cast<std::size_t>(it - v.data().begin());
  const T m = *it;
  if (!(m > T(0))) {
    NoGradGuard guard;
    return make_result<T>(BasicTensor<T>::zeros(v.shape()), OpKind::NormalizeMax, {}, {});
  }
  BasicTensor<T> out = v;
  for (auto& e : out.data()) e /= m;
  BasicTensor<T> xv = v;
  return make_result<T>(std::move(out), OpKind::NormalizeMax, {x},
                        [xv, m, arg](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          T dot = 0;
                          for (std::size_t i = 0; i < g.numel(); ++i) {
                            gin[0][i] += g[i] / m;
                            dot += g[i] * xv[i];
                          }
                          gin[0][arg] -= dot / (m * m);
                        });
}

/// Euclidean distance between the value-weighted mean coordinate of a
/// nonnegative [H,W] map and the point (px, py). x indexes columns, y rows.
template <class T>
Var<T> barycenter_distance(const Var<T>& map, double px, double py) {
  detail::require_rank(map.shape(), 2, "barycenter_distance");
  const std::size_t H = map.shape()[0], W = map.shape()[1];
  const auto& v = map.value();
  double s = 0.0, sx = 0.0, sy = 0.0;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double val = v[y * W + x];
      s += val;
      sx += val * static_cast<double>(x);
      sy += val * static_cast<double>(y);
    }
  if (!(s > 0.0)) throw DegenerateMapError("barycenter of an all-zero attention map is undefined");
  const double bx = sx / s, by = sy / s;
  const double dx = bx - px, dy = by - py;
  const double d = std::sqrt(dx * dx + dy * dy);
  return make_result<T>(BasicTensor<T>::scalar(static_cast<T>(d)), OpKind::BarycenterDistance, {map},
                        [H, W, s, bx, by, dx, dy, d](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          if (d == 0.0) return;
                          const double k = static_cast<double>(g[0]) / (s * d);
                          for (std::size_t y = 0; y < H; ++y)
                            for (std::size_t x = 0; x < W; ++x) {
                              const double dd = dx * (static_cast<double>(x) - bx) + dy * (static_cast<double>(y) - by);
                              gin[0][y * W + x] += static_cast<T>(k * dd);
                            }
                        });
}

/// Sum of map values where the constant mask is nonzero.
template <class T>
Var<T> masked_sum(const Var<T>& map, const BasicTensor<T>& mask) {
  map.value().require_same_shape(mask, "masked_sum");
  double acc = 0.0;
  for (std::size_t i = 0; i < mask.numel(); ++i)
    if (mask[i] != T(0)) acc += map.value()[i];
  return make_result<T>(BasicTensor<T>::scalar(static_cast<T>(acc)), OpKind::MaskedSum, {map},
                        [mask](const BasicTensor<T>& g, std::vector<BasicTensor<T>>& gin) {
                          for (std::size_t i = 0; i < mask.numel(); ++i)
                            if (mask[i] != T(0)) gin[0][i] += g[0];
                        });
}

}  // namespace hitl
