#include "opcrash/numcore/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "kernels.hpp"
#include "opcrash/errors.hpp"

namespace opcrash::numcore {

namespace {

template <typename T>
void require_rank2(const Var<T>& a, const char* op) {
  if (!a.valid()) throw DimensionError(std::string(op) + ": null operand");
  if (a.value().rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

/// Gradient buffer of input i, or nullptr when that input is constant.
template <typename T>
Tensor<T>* input_grad(Node<T>& self, std::size_t i) {
  Node<T>& in = *self.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

template <typename T>
const Tensor<T>& input_value(const Node<T>& self, std::size_t i) {
  return self.inputs[i]->value;
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

}  // namespace

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner extents " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  Tensor<T> out({m, n});
  kernels::gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make_node<T>(std::move(out), {a, b}, "matmul", [m, k, n](Node<T>& self) {
    const Tensor<T>& g = self.grad;
    if (auto* ga = input_grad(self, 0)) {
      kernels::gemm_nt(g.data(), input_value(self, 1).data(), ga->data(), m, n, k);
    }
    if (auto* gb = input_grad(self, 1)) {
      kernels::gemm_tn(input_value(self, 0).data(), g.data(), gb->data(), k, m, n);
    }
  });
}

template <typename T>
Var<T> matmul_tn(const Var<T>& a, const Var<T>& b) {
  require_rank2(a, "matmul_tn");
  require_rank2(b, "matmul_tn");
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul_tn: row extents " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor<T> out({m, n});
  kernels::gemm_tn(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make_node<T>(std::move(out), {a, b}, "matmul_tn", [m, k, n](Node<T>& self) {
    const Tensor<T>& g = self.grad;  // m×n
    // out = aᵀb: da = b·gᵀ (k×m), db = a·g (k×n)
    if (auto* ga = input_grad(self, 0)) {
      kernels::gemm_nt(input_value(self, 1).data(), g.data(), ga->data(), k, n, m);
    }
    if (auto* gb = input_grad(self, 1)) {
      kernels::gemm_nn(input_value(self, 0).data(), g.data(), gb->data(), k, m, n);
    }
  });
}

template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: column extents " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  Tensor<T> out({m, n});
  kernels::gemm_nt(a.value().data(), b.value().data(), out.data(), m, k, n);
  return make_node<T>(std::move(out), {a, b}, "matmul_nt", [m, k, n](Node<T>& self) {
    const Tensor<T>& g = self.grad;  // m×n
    if (auto* ga = input_grad(self, 0)) {
      kernels::gemm_nn(g.data(), input_value(self, 1).data(), ga->data(), m, n, k);
    }
    if (auto* gb = input_grad(self, 1)) {
      kernels::gemm_tn(g.data(), input_value(self, 0).data(), gb->data(), n, m, k);
    }
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> out({n, m});
  const Tensor<T>& v = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = v(i, j);
  return make_node<T>(std::move(out), {a}, "transpose", [m, n](Node<T>& self) {
    Tensor<T>& ga = *input_grad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga(i, j) += self.grad(j, i);
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank2(x, "linear");
  require_rank2(weight, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = weight.cols();
  if (weight.rows() != k) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " +
                         shape_string(weight.shape()));
  }
  const bool has_bias = bias.valid();
  if (has_bias && (bias.value().size() != n)) {
    throw DimensionError("linear: bias " + shape_string(bias.shape()) + " for width " +
                         std::to_string(n));
  }
  Tensor<T> out({m, n});
  if (has_bias) {
    const T* b = bias.value().data();
    for (std::size_t i = 0; i < m; ++i) std::copy(b, b + n, out.row(i));
  }
  kernels::gemm_nn(x.value().data(), weight.value().data(), out.data(), m, k, n);
  std::vector<Var<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return make_node<T>(std::move(out), std::move(inputs), "linear",
                      [m, k, n, has_bias](Node<T>& self) {
                        const Tensor<T>& g = self.grad;
                        if (auto* gx = input_grad(self, 0)) {
                          kernels::gemm_nt(g.data(), input_value(self, 1).data(), gx->data(), m,
                                           n, k);
                        }
                        if (auto* gw = input_grad(self, 1)) {
                          kernels::gemm_tn(input_value(self, 0).data(), g.data(), gw->data(), k,
                                           m, n);
                        }
                        if (has_bias) {
                          if (auto* gb = input_grad(self, 2)) {
                            for (std::size_t i = 0; i < m; ++i) {
                              const T* grow = g.row(i);
                              for (std::size_t j = 0; j < n; ++j) (*gb)[j] += grow[j];
                            }
                          }
                        }
                      });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out(a.value());
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return make_node<T>(std::move(out), {a, b}, "add", [](Node<T>& self) {
    for (std::size_t idx = 0; idx < 2; ++idx) {
      if (auto* g = input_grad(self, idx)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> out(a.value());
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return make_node<T>(std::move(out), {a, b}, "sub", [](Node<T>& self) {
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> out(a.value());
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return make_node<T>(std::move(out), {a, b}, "mul", [](Node<T>& self) {
    const Tensor<T>& av = input_value(self, 0);
    const Tensor<T>& bv = input_value(self, 1);
    if (auto* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    }
    if (auto* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
    }
  });
}

template <typename T>
Var<T> affine(const Var<T>& a, T scale, T shift) {
  Tensor<T> out(a.value());
  for (auto& v : out.values()) v = scale * v + shift;
  return make_node<T>(std::move(out), {a}, "affine", [scale](Node<T>& self) {
    Tensor<T>& g = *input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * self.grad[i];
  });
}

template <typename T>
Var<T> scale_cols(const Var<T>& a, std::span<const T> factors) {
  require_rank2(a, "scale_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (factors.size() != n) {
    throw DimensionError("scale_cols: " + std::to_string(factors.size()) + " factors for " +
                         shape_string(a.shape()));
  }
  std::vector<T> f(factors.begin(), factors.end());
  Tensor<T> out(a.value());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) *= f[j];
  return make_node<T>(std::move(out), {a}, "scale_cols", [f = std::move(f), m, n](Node<T>& self) {
    Tensor<T>& g = *input_grad(self, 0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) g(i, j) += f[j] * self.grad(i, j);
  });
}

template <typename T>
Var<T> mul_scalar(const Var<T>& s, const Var<T>& a) {
  if (s.value().size() != 1) {
    throw DimensionError("mul_scalar: scale must be 1x1, got " + shape_string(s.shape()));
  }
  const T sv = s.value()[0];
  Tensor<T> out(a.value());
  for (auto& v : out.values()) v *= sv;
  return make_node<T>(std::move(out), {s, a}, "mul_scalar", [](Node<T>& self) {
    const T sv = input_value(self, 0)[0];
    const Tensor<T>& av = input_value(self, 1);
    if (auto* gs = input_grad(self, 0)) {
      T acc = 0;
      for (std::size_t i = 0; i < av.size(); ++i) acc += self.grad[i] * av[i];
      (*gs)[0] += acc;
    }
    if (auto* ga = input_grad(self, 1)) {
      for (std::size_t i = 0; i < ga->size(); ++i) (*ga)[i] += sv * self.grad[i];
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out(a.value());
  for (auto& v : out.values()) v = T{1} / (T{1} + std::exp(-v));
  return make_node<T>(std::move(out), {a}, "sigmoid", [](Node<T>& self) {
    Tensor<T>& g = *input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = self.value[i];
      g[i] += self.grad[i] * y * (T{1} - y);
    }
  });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out(a.value());
  for (auto& v : out.values()) {
    const T u = kGeluC<T> * (v + kGeluA<T> * v * v * v);
    v = T{0.5} * v * (T{1} + std::tanh(u));
  }
  return make_node<T>(std::move(out), {a}, "gelu", [](Node<T>& self) {
    const Tensor<T>& x = input_value(self, 0);
    Tensor<T>& g = *input_grad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x[i];
      const T th = std::tanh(kGeluC<T> * (v + kGeluA<T> * v * v * v));
      const T du = kGeluC<T> * (T{1} + T{3} * kGeluA<T> * v * v);
      const T d = T{0.5} * (T{1} + th) + T{0.5} * v * (T{1} - th * th) * du;
      g[i] += self.grad[i] * d;
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& a, std::size_t axis) {
  require_rank2(a, "softmax");
  if (axis > 1) throw DimensionError("softmax: axis must be 0 or 1");
  if (!all_finite(a.value())) throw NumericError("softmax: non-finite input");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> out(a.value());
  // Lines along `axis`: count, length and strides.
  const std::size_t lines = axis == 1 ? m : n;
  const std::size_t len = axis == 1 ? n : m;
  const std::size_t line_stride = axis == 1 ? n : 1;
  const std::size_t elem_stride = axis == 1 ? 1 : n;
  for (std::size_t l = 0; l < lines; ++l) {
    T* base = out.data() + l * line_stride;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t e = 0; e < len; ++e) mx = std::max(mx, base[e * elem_stride]);
    T total = 0;
    for (std::size_t e = 0; e < len; ++e) {
      T& v = base[e * elem_stride];
      v = std::exp(v - mx);
      total += v;
    }
    const T inv = T{1} / total;
    for (std::size_t e = 0; e < len; ++e) base[e * elem_stride] *= inv;
  }
  return make_node<T>(std::move(out), {a}, "softmax",
                      [lines, len, line_stride, elem_stride](Node<T>& self) {
                        Tensor<T>& g = *input_grad(self, 0);
                        for (std::size_t l = 0; l < lines; ++l) {
                          const std::size_t off = l * line_stride;
                          T dot = 0;
                          for (std::size_t e = 0; e < len; ++e) {
                            const std::size_t i = off + e * elem_stride;
                            dot += self.grad[i] * self.value[i];
                          }
                          for (std::size_t e = 0; e < len; ++e) {
                            const std::size_t i = off + e * elem_stride;
                            g[i] += self.value[i] * (self.grad[i] - dot);
                          }
                        }
                      });
}

template <typename T>
Var<T> column_normalize(const Var<T>& a) {
  require_rank2(a, "column_normalize");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> sums({n});
  const Tensor<T>& x = a.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) sums[j] += x(i, j);
  Tensor<T> out(x);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= sums[j];
  return make_node<T>(std::move(out), {a}, "column_normalize",
                      [m, n, sums = std::move(sums)](Node<T>& self) {
                        // y = x/s with s = Σ_i x: dx_ij = (dy_ij - Σ_i dy_ij y_ij) / s_j
                        Tensor<T>& g = *input_grad(self, 0);
                        std::vector<T> dots(n, T{0});
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j)
                            dots[j] += self.grad(i, j) * self.value(i, j);
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t j = 0; j < n; ++j)
                            g(i, j) += (self.grad(i, j) - dots[j]) / sums[j];
                      });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias) {
  require_rank2(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.value().size() != n || bias.value().size() != n) {
    throw DimensionError("layer_norm: gain/bias width does not match " + shape_string(x.shape()));
  }
  constexpr T kEps = static_cast<T>(1e-5);
  Tensor<T> xhat({m, n});
  Tensor<T> rstd({m});
  Tensor<T> out({m, n});
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t i = 0; i < m; ++i) {
    const T* row = xv.row(i);
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(n);
    const T r = T{1} / std::sqrt(var + kEps);
    rstd[i] = r;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (row[j] - mean) * r;
      xhat(i, j) = h;
      out(i, j) = h * gv[j] + bv[j];
    }
  }
  return make_node<T>(
      std::move(out), {x, gain, bias}, "layer_norm",
      [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        const Tensor<T>& g = self.grad;
        const Tensor<T>& gv = input_value(self, 1);
        if (auto* gg = input_grad(self, 1)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g(i, j) * xhat(i, j);
        }
        if (auto* gb = input_grad(self, 2)) {
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g(i, j);
        }
        if (auto* gx = input_grad(self, 0)) {
          const T inv_n = T{1} / static_cast<T>(n);
          for (std::size_t i = 0; i < m; ++i) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const T dh = g(i, j) * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat(i, j);
            }
            mean_dh *= inv_n;
            mean_dh_h *= inv_n;
            for (std::size_t j = 0; j < n; ++j) {
              const T dh = g(i, j) * gv[j];
              (*gx)(i, j) += rstd[i] * (dh - mean_dh - xhat(i, j) * mean_dh_h);
            }
          }
        }
      });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t start, std::size_t width) {
  require_rank2(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (start + width > n || width == 0) {
    throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                         std::to_string(start + width) + ") of " + shape_string(a.shape()));
  }
  Tensor<T> out({m, width});
  for (std::size_t i = 0; i < m; ++i) {
    const T* src = a.value().row(i) + start;
    std::copy(src, src + width, out.row(i));
  }
  return make_node<T>(std::move(out), {a}, "slice_cols", [m, start, width](Node<T>& self) {
    Tensor<T>& g = *input_grad(self, 0);
    for (std::size_t i = 0; i < m; ++i) {
      T* dst = g.row(i) + start;
      const T* src = self.grad.row(i);
      for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != m) throw DimensionError("concat_cols: row extents differ");
    offsets.push_back(total);
    total += p.cols();
  }
  Tensor<T> out({m, total});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t w = parts[k].cols();
    for (std::size_t i = 0; i < m; ++i) {
      const T* src = parts[k].value().row(i);
      std::copy(src, src + w, out.row(i) + offsets[k]);
    }
  }
  return make_node<T>(std::move(out), parts, "concat_cols",
                      [m, offsets = std::move(offsets)](Node<T>& self) {
                        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                          auto* g = input_grad(self, k);
                          if (!g) continue;
                          const std::size_t w = g->cols();
                          for (std::size_t i = 0; i < m; ++i) {
                            const T* src = self.grad.row(i) + offsets[k];
                            T* dst = g->row(i);
                            for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
                          }
                        }
                      });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no operands");
  const std::size_t n = parts.front().cols();
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != n) throw DimensionError("concat_rows: column extents differ");
    offsets.push_back(total);
    total += p.rows();
  }
  Tensor<T> out({total, n});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    std::copy(v.data(), v.data() + v.size(), out.row(offsets[k]));
  }
  return make_node<T>(std::move(out), parts, "concat_rows",
                      [n, offsets = std::move(offsets)](Node<T>& self) {
                        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
                          auto* g = input_grad(self, k);
                          if (!g) continue;
                          const T* src = self.grad.row(offsets[k]);
                          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += src[i];
                        }
                        (void)n;
                      });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  T total = 0;
  for (T v : a.value().values()) total += v;
  return make_node<T>(Tensor<T>({1, 1}, {total}), {a}, "sum", [](Node<T>& self) {
    Tensor<T>& g = *input_grad(self, 0);
    const T s = self.grad[0];
    for (auto& v : g.values()) v += s;
  });
}

template <typename T>
Var<T> sum_squares(const Var<T>& a) {
  T total = 0;
  for (T v : a.value().values()) total += v * v;
  return make_node<T>(Tensor<T>({1, 1}, {total}), {a}, "sum_squares", [](Node<T>& self) {
    Tensor<T>& g = *input_grad(self, 0);
    const Tensor<T>& x = input_value(self, 0);
    const T s = T{2} * self.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * x[i];
  });
}

template <typename T>
Var<T> l2_norm(const Var<T>& a) {
  T total = 0;
  for (T v : a.value().values()) total += v * v;
  const T norm = std::sqrt(total);
  return make_node<T>(Tensor<T>({1, 1}, {norm}), {a}, "l2_norm", [](Node<T>& self) {
    const T norm = self.value[0];
    if (norm == T{0}) return;
    Tensor<T>& g = *input_grad(self, 0);
    const Tensor<T>& x = input_value(self, 0);
    const T s = self.grad[0] / norm;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * x[i];
  });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t nq = q.rows(), nk = k.rows(), c = q.cols(), cv = v.cols();
  if (heads == 0 || c % heads != 0 || cv % heads != 0) {
    throw DimensionError("attention: channels " + std::to_string(c) + "/" + std::to_string(cv) +
                         " not divisible into " + std::to_string(heads) + " heads");
  }
  if (k.cols() != c || v.rows() != nk || nk == 0) {
    throw DimensionError("attention: q " + shape_string(q.shape()) + ", k " +
                         shape_string(k.shape()) + ", v " + shape_string(v.shape()));
  }
  const std::size_t d = c / heads, dv = cv / heads;
  const T scale = T{1} / std::sqrt(static_cast<T>(d));
  Tensor<T> out({nq, cv});
  Tensor<T> lse({nq, heads});
  Tensor<T> scores({nk});
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      const T* qi = qv.row(i) + h * d;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < nk; ++j) {
        const T* kj = kv.row(j) + h * d;
        T s = 0;
        for (std::size_t p = 0; p < d; ++p) s += qi[p] * kj[p];
        s *= scale;
        scores[j] = s;
        mx = std::max(mx, s);
      }
      if (!std::isfinite(mx)) throw NumericError("attention: non-finite score");
      T total = 0;
      T* oi = out.row(i) + h * dv;
      for (std::size_t j = 0; j < nk; ++j) {
        const T p = std::exp(scores[j] - mx);
        total += p;
        const T* vj = vv.row(j) + h * dv;
        for (std::size_t p2 = 0; p2 < dv; ++p2) oi[p2] += p * vj[p2];
      }
      const T inv = T{1} / total;
      for (std::size_t p2 = 0; p2 < dv; ++p2) oi[p2] *= inv;
      lse(i, h) = mx + std::log(total);
    }
  }
  return make_node<T>(
      std::move(out), {q, k, v}, "attention",
      [nq, nk, heads, d, dv, scale, lse = std::move(lse)](Node<T>& self) {
        const Tensor<T>& qv = input_value(self, 0);
        const Tensor<T>& kv = input_value(self, 1);
        const Tensor<T>& vv = input_value(self, 2);
        Tensor<T>* gq = input_grad(self, 0);
        Tensor<T>* gk = input_grad(self, 1);
        Tensor<T>* gvv = input_grad(self, 2);
        const Tensor<T>& go = self.grad;
        const Tensor<T>& o = self.value;
        Tensor<T> prob({nk});
        for (std::size_t h = 0; h < heads; ++h) {
          for (std::size_t i = 0; i < nq; ++i) {
            const T* qi = qv.row(i) + h * d;
            const T* doi = go.row(i) + h * dv;
            const T* oi = o.row(i) + h * dv;
            T delta = 0;
            for (std::size_t p = 0; p < dv; ++p) delta += doi[p] * oi[p];
            const T l = lse(i, h);
            for (std::size_t j = 0; j < nk; ++j) {
              const T* kj = kv.row(j) + h * d;
              T s = 0;
              for (std::size_t p = 0; p < d; ++p) s += qi[p] * kj[p];
              prob[j] = std::exp(s * scale - l);
            }
            for (std::size_t j = 0; j < nk; ++j) {
              const T pj = prob[j];
              const T* vj = vv.row(j) + h * dv;
              if (gvv) {
                T* gvj = gvv->row(j) + h * dv;
                for (std::size_t p = 0; p < dv; ++p) gvj[p] += pj * doi[p];
              }
              T dp = 0;
              for (std::size_t p = 0; p < dv; ++p) dp += doi[p] * vj[p];
              const T ds = pj * (dp - delta) * scale;
              if (gq) {
                T* gqi = gq->row(i) + h * d;
                const T* kj = kv.row(j) + h * d;
                for (std::size_t p = 0; p < d; ++p) gqi[p] += ds * kj[p];
              }
              if (gk) {
                T* gkj = gk->row(j) + h * d;
                for (std::size_t p = 0; p < d; ++p) gkj[p] += ds * qi[p];
              }
            }
          }
        }
      });
}

#define OPCRASH_INSTANTIATE_OPS(T)                                                   \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                              \
  template Var<T> matmul_tn(const Var<T>&, const Var<T>&);                           \
  template Var<T> matmul_nt(const Var<T>&, const Var<T>&);                           \
  template Var<T> transpose(const Var<T>&);                                          \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);               \
  template Var<T> add(const Var<T>&, const Var<T>&);                                 \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                 \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                 \
  template Var<T> affine(const Var<T>&, T, T);                                       \
  template Var<T> scale_cols(const Var<T>&, std::span<const T>);                     \
  template Var<T> mul_scalar(const Var<T>&, const Var<T>&);                          \
  template Var<T> sigmoid(const Var<T>&);                                            \
  template Var<T> gelu(const Var<T>&);                                               \
  template Var<T> softmax(const Var<T>&, std::size_t);                               \
  template Var<T> column_normalize(const Var<T>&);                                   \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&);           \
  template Var<T> slice_cols(const Var<T>&, std::size_t, std::size_t);               \
  template Var<T> concat_cols(const std::vector<Var<T>>&);                           \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                           \
  template Var<T> sum(const Var<T>&);                                                \
  template Var<T> sum_squares(const Var<T>&);                                        \
  template Var<T> l2_norm(const Var<T>&);                                            \
  template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);

OPCRASH_INSTANTIATE_OPS(float)
OPCRASH_INSTANTIATE_OPS(double)

}  // namespace opcrash::numcore
