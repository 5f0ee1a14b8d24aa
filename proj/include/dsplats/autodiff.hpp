#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dsplats/common.hpp"

namespace dsplats {

// Reverse-mode autodiff over dense float32 arrays. Define-by-run: ops record
// nodes on a Tape; backward() replays them in reverse insertion order with a
// fixed accumulation order, so gradients are bit-reproducible. A tape belongs
// to one thread; independent tapes may run concurrently.

namespace kern {

// Layouts: feature maps are (H, W, C) row-major; conv weights are
// (KH, KW, Cin, Cout) with Cout contiguous. Templated so tests can evaluate
// the same arithmetic in double for finite-difference baselines.

template <class T>
void conv2d_forward(const T* x, int H, int W, int Ci, const T* w, int KH, int KW, int Co,
                    int stride, int pad, T* y, int Ho, int Wo) {
    parallel_for(Ho, 4, [&](size_t r0, size_t r1) {
        for (size_t yo = r0; yo < r1; ++yo) {
            for (int xo = 0; xo < Wo; ++xo) {
                T* out = y + (yo * Wo + xo) * Co;
                for (int co = 0; co < Co; ++co) out[co] = 0;
                for (int ky = 0; ky < KH; ++ky) {
                    int yi = static_cast<int>(yo) * stride - pad + ky;
                    if (yi < 0 || yi >= H) continue;
                    for (int kx = 0; kx < KW; ++kx) {
                        int xi = xo * stride - pad + kx;
                        if (xi < 0 || xi >= W) continue;
                        const T* xp = x + (static_cast<size_t>(yi) * W + xi) * Ci;
                        const T* wp = w + ((static_cast<size_t>(ky) * KW + kx) * Ci) * Co;
                        for (int ci = 0; ci < Ci; ++ci) {
                            T xv = xp[ci];
                            const T* wr = wp + static_cast<size_t>(ci) * Co;
                            for (int co = 0; co < Co; ++co) out[co] += xv * wr[co];
                        }
                    }
                }
            }
        }
    });
}

template <class T>
void conv2d_grad_input(const T* g, int Ho, int Wo, int Co, const T* w, int KH, int KW, int Ci,
                       int stride, int pad, T* gx, int H, int W) {
    parallel_for(H, 4, [&](size_t r0, size_t r1) {
        for (size_t yi = r0; yi < r1; ++yi) {
            for (int xi = 0; xi < W; ++xi) {
                T* out = gx + (yi * W + xi) * Ci;
                for (int ci = 0; ci < Ci; ++ci) out[ci] = 0;
                for (int ky = 0; ky < KH; ++ky) {
                    int yn = static_cast<int>(yi) + pad - ky;
                    if (yn < 0 || yn % stride != 0) continue;
                    int yo = yn / stride;
                    if (yo >= Ho) continue;
                    for (int kx = 0; kx < KW; ++kx) {
                        int xn = xi + pad - kx;
                        if (xn < 0 || xn % stride != 0) continue;
                        int xo = xn / stride;
                        if (xo >= Wo) continue;
                        const T* gp = g + (static_cast<size_t>(yo) * Wo + xo) * Co;
                        const T* wp = w + ((static_cast<size_t>(ky) * KW + kx) * Ci) * Co;
                        for (int ci = 0; ci < Ci; ++ci) {
                            const T* wr = wp + static_cast<size_t>(ci) * Co;
                            T acc = 0;
                            for (int co = 0; co < Co; ++co) acc += gp[co] * wr[co];
                            out[ci] += acc;
                        }
                    }
                }
            }
        }
    });
}

template <class T>
void conv2d_grad_weight(const T* x, int H, int W, int Ci, const T* g, int Ho, int Wo, int Co,
                        int KH, int KW, int stride, int pad, T* gw) {
    parallel_for(static_cast<size_t>(KH) * KW, 1, [&](size_t k0, size_t k1) {
        for (size_t k = k0; k < k1; ++k) {
            int ky = static_cast<int>(k) / KW, kx = static_cast<int>(k) % KW;
            T* wp = gw + (k * Ci) * Co;
            for (size_t i = 0; i < static_cast<size_t>(Ci) * Co; ++i) wp[i] = 0;
            for (int yo = 0; yo < Ho; ++yo) {
                int yi = yo * stride - pad + ky;
                if (yi < 0 || yi >= H) continue;
                for (int xo = 0; xo < Wo; ++xo) {
                    int xi = xo * stride - pad + kx;
                    if (xi < 0 || xi >= W) continue;
                    const T* xp = x + (static_cast<size_t>(yi) * W + xi) * Ci;
                    const T* gp = g + (static_cast<size_t>(yo) * Wo + xo) * Co;
                    for (int ci = 0; ci < Ci; ++ci) {
                        T xv = xp[ci];
                        T* wr = wp + static_cast<size_t>(ci) * Co;
                        for (int co = 0; co < Co; ++co) wr[co] += xv * gp[co];
                    }
                }
            }
        }
    });
}

template <class T>
void matmul(const T* a, int M, int K, const T* b, int N, T* c) {
    for (int i = 0; i < M; ++i) {
        T* row = c + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) row[j] = 0;
        for (int k = 0; k < K; ++k) {
            T av = a[static_cast<size_t>(i) * K + k];
            const T* br = b + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) row[j] += av * br[j];
        }
    }
}

template <class T>
void upsample_nearest(const T* x, int H, int W, int C, int f, T* y) {
    for (int yo = 0; yo < H * f; ++yo)
        for (int xo = 0; xo < W * f; ++xo) {
            const T* src = x + (static_cast<size_t>(yo / f) * W + xo / f) * C;
            T* dst = y + (static_cast<size_t>(yo) * (W * f) + xo) * C;
            for (int c = 0; c < C; ++c) dst[c] = src[c];
        }
}

// Normalizes each channel group over (H*W, C/groups); writes per-group mean
// and inverse stddev for the backward pass.
template <class T>
void group_norm_forward(const T* x, int HW, int C, int groups, T eps, const T* gamma,
                        const T* beta, T* y, T* mean, T* inv_std) {
    int gc = C / groups;
    for (int g = 0; g < groups; ++g) {
        T mu = 0;
        for (int p = 0; p < HW; ++p)
            for (int c = g * gc; c < (g + 1) * gc; ++c) mu += x[static_cast<size_t>(p) * C + c];
        mu /= static_cast<T>(HW) * gc;
        T var = 0;
        for (int p = 0; p < HW; ++p)
            for (int c = g * gc; c < (g + 1) * gc; ++c) {
                T d = x[static_cast<size_t>(p) * C + c] - mu;
                var += d * d;
            }
        var /= static_cast<T>(HW) * gc;
        T is = T(1) / std::sqrt(var + eps);
        mean[g] = mu;
        inv_std[g] = is;
        for (int p = 0; p < HW; ++p)
            for (int c = g * gc; c < (g + 1) * gc; ++c) {
                size_t i = static_cast<size_t>(p) * C + c;
                y[i] = (x[i] - mu) * is * gamma[c] + beta[c];
            }
    }
}

template <class T>
void group_norm_backward(const T* x, const T* gy, int HW, int C, int groups, const T* gamma,
                         const T* mean, const T* inv_std, T* gx, T* ggamma, T* gbeta) {
    int gc = C / groups;
    for (int c = 0; c < C; ++c) {
        ggamma[c] = 0;
        gbeta[c] = 0;
    }
    for (int g = 0; g < groups; ++g) {
        T mu = mean[g], is = inv_std[g];
        T n = static_cast<T>(HW) * gc;
        T sum_gxh = 0, sum_gxh_xh = 0;
        for (int p = 0; p < HW; ++p)
            for (int c = g * gc; c < (g + 1) * gc; ++c) {
                size_t i = static_cast<size_t>(p) * C + c;
                T xh = (x[i] - mu) * is;
                T gxh = gy[i] * gamma[c];
                sum_gxh += gxh;
                sum_gxh_xh += gxh * xh;
                ggamma[c] += gy[i] * xh;
                gbeta[c] += gy[i];
            }
        for (int p = 0; p < HW; ++p)
            for (int c = g * gc; c < (g + 1) * gc; ++c) {
                size_t i = static_cast<size_t>(p) * C + c;
                T xh = (x[i] - mu) * is;
                T gxh = gy[i] * gamma[c];
                gx[i] = is * (gxh - sum_gxh / n - xh * sum_gxh_xh / n);
            }
    }
}

}  // namespace kern

class Tape;

struct Tensor {
    std::vector<int> shape;
    std::shared_ptr<std::vector<float>> values;
    Tape* tape = nullptr;
    int node = -1;

    size_t size() const { return values ? values->size() : 0; }
    const float* data() const { return values->data(); }
    float* data() { return values->data(); }
    bool tracked() const { return node >= 0; }
    int dim(int i) const { return shape[i]; }
};

inline size_t shape_product(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("tensor shape has non-positive dim " + shape_string(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}

class Tape {
  public:
    int add_node(std::vector<int> shape, std::shared_ptr<std::vector<float>> values,
                 std::vector<int> inputs) {
        Node n;
        n.shape = std::move(shape);
        n.values = std::move(values);
        n.inputs = std::move(inputs);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }
    void set_backward(int id, std::function<void(Tape&)> fn) {
        nodes_[id].backward = std::move(fn);
    }

    const std::vector<float>& node_grad(int id) const { return grads_[id]; }

    void accumulate(int id, const float* g, size_t n) {
        if (id < 0) return;
        auto& dst = grads_[id];
        if (dst.empty()) dst.assign(shape_product(nodes_[id].shape), 0.f);
        for (size_t i = 0; i < n; ++i) dst[i] += g[i];
    }
    void accumulate(int id, const std::vector<float>& g) { accumulate(id, g.data(), g.size()); }

    // Seeds d(loss)/d(loss) = 1 and walks the tape backwards once.
    void backward(const Tensor& loss) {
        if (loss.tape != this || !loss.tracked())
            throw Error("backward: loss is not attached to this tape");
        if (loss.size() != 1)
            throw Error("backward: loss must be scalar, has shape " + shape_string(loss.shape));
        grads_.assign(nodes_.size(), {});
        grads_[loss.node] = {1.f};
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            if (grads_[id].empty()) continue;
            if (nodes_[id].backward) nodes_[id].backward(*this);
        }
    }

    // Gradient of a tracked tensor after backward(); zeros if untouched.
    std::vector<float> grad(const Tensor& t) const {
        if (t.tape != this || !t.tracked())
            throw Error("grad: tensor is not a tracked node on this tape");
        if (grads_.size() <= static_cast<size_t>(t.node) || grads_[t.node].empty())
            return std::vector<float>(t.size(), 0.f);
        return grads_[t.node];
    }

    void clear() {
        nodes_.clear();
        grads_.clear();
    }
    size_t node_count() const { return nodes_.size(); }

  private:
    struct Node {
        std::vector<int> shape;
        std::shared_ptr<std::vector<float>> values;
        std::vector<int> inputs;
        std::function<void(Tape&)> backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<float>> grads_;
};

inline void debug_check_finite(const char* op, const std::vector<float>& v) {
#ifndef NDEBUG
    for (float x : v)
        if (!std::isfinite(x)) throw ValueError(std::string(op) + ": non-finite value produced");
#else
    (void)op;
    (void)v;
#endif
}

inline Tensor make_constant(std::vector<int> shape, std::vector<float> vals) {
    if (vals.size() != shape_product(shape))
        throw ShapeError("make_constant: " + std::to_string(vals.size()) + " values for shape " +
                         shape_string(shape));
    Tensor t;
    t.shape = std::move(shape);
    t.values = std::make_shared<std::vector<float>>(std::move(vals));
    return t;
}

inline Tensor make_leaf(Tape& tape, std::vector<int> shape, std::vector<float> vals) {
    Tensor t = make_constant(std::move(shape), std::move(vals));
    t.tape = &tape;
    t.node = tape.add_node(t.shape, t.values, {});
    return t;
}

namespace detail {

inline Tape* result_tape(std::initializer_list<const Tensor*> ts) {
    Tape* tape = nullptr;
    for (const Tensor* t : ts) {
        if (!t->tape) continue;
        if (tape && tape != t->tape) throw Error("op: inputs live on different tapes");
        tape = t->tape;
    }
    return tape;
}

inline bool any_tracked(std::initializer_list<const Tensor*> ts) {
    for (const Tensor* t : ts)
        if (t->tracked()) return true;
    return false;
}

inline Tensor finish(const char* op, Tape* tape, std::vector<int> shape,
                     std::shared_ptr<std::vector<float>> vals, std::vector<int> inputs,
                     bool tracked, const std::function<void(Tape&, int)>& make_backward) {
    debug_check_finite(op, *vals);
    Tensor out;
    out.shape = std::move(shape);
    out.values = std::move(vals);
    if (tape && tracked) {
        out.tape = tape;
        out.node = tape->add_node(out.shape, out.values, std::move(inputs));
        make_backward(*tape, out.node);
    }
    return out;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) throw_shape_mismatch(op, a.shape, b.shape);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("add", a, b);
    auto vals = std::make_shared<std::vector<float>>(a.size());
    for (size_t i = 0; i < a.size(); ++i) (*vals)[i] = (*a.values)[i] + (*b.values)[i];
    int na = a.node, nb = b.node;
    return detail::finish("add", detail::result_tape({&a, &b}), a.shape, vals, {na, nb},
                          detail::any_tracked({&a, &b}), [na, nb](Tape& tp, int id) {
                              tp.set_backward(id, [id, na, nb](Tape& t) {
                                  const auto& g = t.node_grad(id);
                                  t.accumulate(na, g);
                                  t.accumulate(nb, g);
                              });
                          });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("sub", a, b);
    auto vals = std::make_shared<std::vector<float>>(a.size());
    for (size_t i = 0; i < a.size(); ++i) (*vals)[i] = (*a.values)[i] - (*b.values)[i];
    int na = a.node, nb = b.node;
    return detail::finish("sub", detail::result_tape({&a, &b}), a.shape, vals, {na, nb},
                          detail::any_tracked({&a, &b}), [na, nb](Tape& tp, int id) {
                              tp.set_backward(id, [id, na, nb](Tape& t) {
                                  const auto& g = t.node_grad(id);
                                  t.accumulate(na, g);
                                  if (nb >= 0) {
                                      std::vector<float> neg(g.size());
                                      for (size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                                      t.accumulate(nb, neg);
                                  }
                              });
                          });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape("mul", a, b);
    auto vals = std::make_shared<std::vector<float>>(a.size());
    for (size_t i = 0; i < a.size(); ++i) (*vals)[i] = (*a.values)[i] * (*b.values)[i];
    int na = a.node, nb = b.node;
    auto av = a.values, bv = b.values;
    return detail::finish("mul", detail::result_tape({&a, &b}), a.shape, vals, {na, nb},
                          detail::any_tracked({&a, &b}), [na, nb, av, bv](Tape& tp, int id) {
                              tp.set_backward(id, [id, na, nb, av, bv](Tape& t) {
                                  const auto& g = t.node_grad(id);
                                  std::vector<float> tmp(g.size());
                                  if (na >= 0) {
                                      for (size_t i = 0; i < g.size(); ++i)
                                          tmp[i] = g[i] * (*bv)[i];
                                      t.accumulate(na, tmp);
                                  }
                                  if (nb >= 0) {
                                      for (size_t i = 0; i < g.size(); ++i)
                                          tmp[i] = g[i] * (*av)[i];
                                      t.accumulate(nb, tmp);
                                  }
                              });
                          });
}

inline Tensor scale(const Tensor& a, float s) {
    auto vals = std::make_shared<std::vector<float>>(a.size());
    for (size_t i = 0; i < a.size(); ++i) (*vals)[i] = (*a.values)[i] * s;
    int na = a.node;
    return detail::finish("scale", a.tape, a.shape, vals, {na}, a.tracked(),
                          [na, s](Tape& tp, int id) {
                              tp.set_backward(id, [id, na, s](Tape& t) {
                                  const auto& g = t.node_grad(id);
                                  std::vector<float> tmp(g.size());
                                  for (size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * s;
                                  t.accumulate(na, tmp);
                              });
                          });
}

namespace detail {

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd dfdx_from_saved) {
    auto vals = std::make_shared<std::vector<float>>(a.size());
    for (size_t i = 0; i < a.size(); ++i) (*vals)[i] = fwd((*a.values)[i]);
    int na = a.node;
    auto av = a.values, yv = vals;
    return finish(name, a.tape, a.shape, vals, {na}, a.tracked(),
                  [na, av, yv, dfdx_from_saved](Tape& tp, int id) {
                      tp.set_backward(id, [id, na, av, yv, dfdx_from_saved](Tape& t) {
                          const auto& g = t.node_grad(id);
                          std::vector<float> tmp(g.size());
                          for (size_t i = 0; i < g.size(); ++i)
                              tmp[i] = g[i] * dfdx_from_saved((*av)[i], (*yv)[i]);
                          t.accumulate(na, tmp);
                      });
                  });
}

}  // namespace detail

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        "sigmoid", a, [](float x) { return 1.f / (1.f + std::exp(-x)); },
        [](float, float y) { return y * (1.f - y); });
}

inline Tensor silu(const Tensor& a) {
    return detail::unary_op(
        "silu", a,
        [](float x) { return x / (1.f + std::exp(-x)); },
        [](float x, float) {
            float s = 1.f / (1.f + std::exp(-x));
            return s * (1.f + x * (1.f - s));
        });
}

inline Tensor exp(const Tensor& a) {
    return detail::unary_op(
        "exp", a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary_op(
        "abs", a, [](float x) { return std::fabs(x); },
        [](float x, float) { return x > 0.f ? 1.f : (x < 0.f ? -1.f : 0.f); });
}

// Hard clamp; gradient passes only where the input lies inside [lo, hi].
inline Tensor clamp(const Tensor& a, float lo, float hi) {
    if (lo > hi) throw ValueError("clamp: lo > hi");
    return detail::unary_op(
        "clamp", a, [lo, hi](float x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.f : 0.f; });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_product(shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_string(a.shape) + " as " +
                         shape_string(shape));
    auto vals = std::make_shared<std::vector<float>>(*a.values);
    int na = a.node;
    return detail::finish("reshape", a.tape, std::move(shape), vals, {na}, a.tracked(),
                          [na](Tape& tp, int id) {
                              tp.set_backward(id, [id, na](Tape& t) {
                                  t.accumulate(na, t.node_grad(id));
                              });
                          });
}

// Concatenates (H, W, Ci) maps along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: no inputs");
    for (const auto& x : xs)
        if (x.shape.size() != 3) throw ShapeError("concat_channels: need (H,W,C) inputs");
    int H = xs[0].shape[0], W = xs[0].shape[1], C = 0;
    for (const auto& x : xs) {
        if (x.shape[0] != H || x.shape[1] != W)
            throw_shape_mismatch("concat_channels", xs[0].shape, x.shape);
        C += x.shape[2];
    }
    auto vals = std::make_shared<std::vector<float>>(static_cast<size_t>(H) * W * C);
    std::vector<int> nodes(xs.size());
    std::vector<int> chans(xs.size());
    Tape* tape = nullptr;
    bool tracked = false;
    {
        size_t off = 0;
        for (size_t k = 0; k < xs.size(); ++k) {
            nodes[k] = xs[k].node;
            chans[k] = xs[k].shape[2];
            tracked = tracked || xs[k].tracked();
            if (xs[k].tape) {
                if (tape && tape != xs[k].tape) throw Error("concat_channels: mixed tapes");
                tape = xs[k].tape;
            }
            const float* src = xs[k].data();
            int ck = chans[k];
            for (int p = 0; p < H * W; ++p)
                for (int c = 0; c < ck; ++c)
                    (*vals)[static_cast<size_t>(p) * C + off + c] =
                        src[static_cast<size_t>(p) * ck + c];
            off += ck;
        }
    }
    return detail::finish("concat_channels", tape, {H, W, C}, vals, nodes, tracked,
                          [nodes, chans, H, W, C](Tape& tp, int id) {
                              tp.set_backward(id, [id, nodes, chans, H, W, C](Tape& t) {
                                  const auto& g = t.node_grad(id);
                                  size_t off = 0;
                                  for (size_t k = 0; k < nodes.size(); ++k) {
                                      int ck = chans[k];
                                      if (nodes[k] >= 0) {
                                          std::vector<float> part(
                                              static_cast<size_t>(H) * W * ck);
                                          for (int p = 0; p < H * W; ++p)
                                              for (int c = 0; c < ck; ++c)
                                                  part[static_cast<size_t>(p) * ck + c] =
                                                      g[static_cast<size_t>(p) * C + off + c];
                                          t.accumulate(nodes[k], part);
                                      }
                                      off += ck;
                                  }
                              });
                          });
}

// ---------------------------------------------------------------------------
// Linear algebra / conv / norm
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0])
        throw ShapeError("matmul: incompatible " + shape_string(a.shape) + " x " +
                         shape_string(b.shape));
    int M = a.shape[0], K = a.shape[1], N = b.shape[1];
    auto vals = std::make_shared<std::vector<float>>(static_cast<size_t>(M) * N);
    kern::matmul(a.data(), M, K, b.data(), N, vals->data());
    int na = a.node, nb = b.node;
    auto av = a.values, bv = b.values;
    return detail::finish(
        "matmul", detail::result_tape({&a, &b}), {M, N}, vals, {na, nb},
        detail::any_tracked({&a, &b}), [=](Tape& tp, int id) {
            tp.set_backward(id, [=](Tape& t) {
                const auto& g = t.node_grad(id);
                if (na >= 0) {  // gA = g . B^T
                    std::vector<float> ga(static_cast<size_t>(M) * K, 0.f);
                    for (int i = 0; i < M; ++i)
                        for (int k = 0; k < K; ++k) {
                            float acc = 0;
                            for (int j = 0; j < N; ++j)
                                acc += g[static_cast<size_t>(i) * N + j] *
                                       (*bv)[static_cast<size_t>(k) * N + j];
                            ga[static_cast<size_t>(i) * K + k] = acc;
                        }
                    t.accumulate(na, ga);
                }
                if (nb >= 0) {  // gB = A^T . g
                    std::vector<float> gb(static_cast<size_t>(K) * N, 0.f);
                    for (int k = 0; k < K; ++k)
                        for (int i = 0; i < M; ++i) {
                            float avik = (*av)[static_cast<size_t>(i) * K + k];
                            for (int j = 0; j < N; ++j)
                                gb[static_cast<size_t>(k) * N + j] +=
                                    avik * g[static_cast<size_t>(i) * N + j];
                        }
                    t.accumulate(nb, gb);
                }
            });
        });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.shape.size() != 3 || w.shape.size() != 4)
        throw ShapeError("conv2d: need x (H,W,C), w (KH,KW,Ci,Co); got " + shape_string(x.shape) +
                         " and " + shape_string(w.shape));
    if (x.shape[2] != w.shape[2])
        throw ShapeError("conv2d: input channels " + std::to_string(x.shape[2]) +
                         " != weight Ci " + std::to_string(w.shape[2]));
    if (stride < 1) throw ValueError("conv2d: stride must be >= 1");
    int H = x.shape[0], W = x.shape[1], Ci = x.shape[2];
    int KH = w.shape[0], KW = w.shape[1], Co = w.shape[3];
    int Ho = (H + 2 * pad - KH) / stride + 1;
    int Wo = (W + 2 * pad - KW) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: empty output for input " +
                                           shape_string(x.shape));
    auto vals = std::make_shared<std::vector<float>>(static_cast<size_t>(Ho) * Wo * Co);
    kern::conv2d_forward(x.data(), H, W, Ci, w.data(), KH, KW, Co, stride, pad, vals->data(),
                         Ho, Wo);
    int nx = x.node, nw = w.node;
    auto xv = x.values, wv = w.values;
    return detail::finish(
        "conv2d", detail::result_tape({&x, &w}), {Ho, Wo, Co}, vals, {nx, nw},
        detail::any_tracked({&x, &w}), [=](Tape& tp, int id) {
            tp.set_backward(id, [=](Tape& t) {
                const auto& g = t.node_grad(id);
                if (nx >= 0) {
                    std::vector<float> gx(static_cast<size_t>(H) * W * Ci);
                    kern::conv2d_grad_input(g.data(), Ho, Wo, Co, wv->data(), KH, KW, Ci, stride,
                                            pad, gx.data(), H, W);
                    t.accumulate(nx, gx);
                }
                if (nw >= 0) {
                    std::vector<float> gw(static_cast<size_t>(KH) * KW * Ci * Co);
                    kern::conv2d_grad_weight(xv->data(), H, W, Ci, g.data(), Ho, Wo, Co, KH, KW,
                                             stride, pad, gw.data());
                    t.accumulate(nw, gw);
                }
            });
        });
}

// Adds a per-channel bias vector across all spatial positions of (H, W, C).
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (x.shape.size() != 3 || b.shape.size() != 1 || b.shape[0] != x.shape[2])
        throw ShapeError("add_bias: x " + shape_string(x.shape) + " vs bias " +
                         shape_string(b.shape));
    int HW = x.shape[0] * x.shape[1], C = x.shape[2];
    auto vals = std::make_shared<std::vector<float>>(x.size());
    for (int p = 0; p < HW; ++p)
        for (int c = 0; c < C; ++c)
            (*vals)[static_cast<size_t>(p) * C + c] =
                (*x.values)[static_cast<size_t>(p) * C + c] + (*b.values)[c];
    int nx = x.node, nb = b.node;
    return detail::finish("add_bias", detail::result_tape({&x, &b}), x.shape, vals, {nx, nb},
                          detail::any_tracked({&x, &b}), [=](Tape& tp, int id) {
                              tp.set_backward(id, [=](Tape& t) {
                                  const auto& g = t.node_grad(id);
                                  t.accumulate(nx, g);
                                  if (nb >= 0) {
                                      std::vector<float> gb(C, 0.f);
                                      for (int p = 0; p < HW; ++p)
                                          for (int c = 0; c < C; ++c)
                                              gb[c] += g[static_cast<size_t>(p) * C + c];
                                      t.accumulate(nb, gb);
                                  }
                              });
                          });
}

inline Tensor upsample_nearest(const Tensor& x, int factor) {
    if (x.shape.size() != 3) throw ShapeError("upsample_nearest: need (H,W,C)");
    if (factor < 1) throw ValueError("upsample_nearest: factor must be >= 1");
    int H = x.shape[0], W = x.shape[1], C = x.shape[2];
    auto vals = std::make_shared<std::vector<float>>(static_cast<size_t>(H) * factor * W *
                                                     factor * C);
    kern::upsample_nearest(x.data(), H, W, C, factor, vals->data());
    int nx = x.node;
    return detail::finish(
        "upsample_nearest", x.tape, {H * factor, W * factor, C}, vals, {nx}, x.tracked(),
        [=](Tape& tp, int id) {
            tp.set_backward(id, [=](Tape& t) {
                const auto& g = t.node_grad(id);
                std::vector<float> gx(static_cast<size_t>(H) * W * C, 0.f);
                int Wo = W * factor;
                for (int yo = 0; yo < H * factor; ++yo)
                    for (int xo = 0; xo < Wo; ++xo) {
                        const float* gp = g.data() + (static_cast<size_t>(yo) * Wo + xo) * C;
                        float* dst =
                            gx.data() + (static_cast<size_t>(yo / factor) * W + xo / factor) * C;
                        for (int c = 0; c < C; ++c) dst[c] += gp[c];
                    }
                t.accumulate(nx, gx);
            });
        });
}

inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                         float eps = 1e-5f) {
    if (x.shape.size() != 3) throw ShapeError("group_norm: need (H,W,C)");
    int C = x.shape[2];
    if (gamma.shape != std::vector<int>{C} || beta.shape != std::vector<int>{C})
        throw ShapeError("group_norm: gamma/beta must be (C)");
    if (groups < 1 || C % groups != 0)
        throw ShapeError("group_norm: channels " + std::to_string(C) +
                         " not divisible by groups " + std::to_string(groups));
    int HW = x.shape[0] * x.shape[1];
    auto vals = std::make_shared<std::vector<float>>(x.size());
    auto mean = std::make_shared<std::vector<float>>(groups);
    auto inv_std = std::make_shared<std::vector<float>>(groups);
    kern::group_norm_forward(x.data(), HW, C, groups, eps, gamma.data(), beta.data(),
                             vals->data(), mean->data(), inv_std->data());
    int nx = x.node, ng = gamma.node, nb = beta.node;
    auto xv = x.values, gv = gamma.values;
    return detail::finish(
        "group_norm", detail::result_tape({&x, &gamma, &beta}), x.shape, vals, {nx, ng, nb},
        detail::any_tracked({&x, &gamma, &beta}), [=](Tape& tp, int id) {
            tp.set_backward(id, [=](Tape& t) {
                const auto& g = t.node_grad(id);
                std::vector<float> gx(static_cast<size_t>(HW) * C), ggamma(C), gbeta(C);
                kern::group_norm_backward(xv->data(), g.data(), HW, C, groups, gv->data(),
                                          mean->data(), inv_std->data(), gx.data(), ggamma.data(),
                                          gbeta.data());
                t.accumulate(nx, gx);
                t.accumulate(ng, ggamma);
                t.accumulate(nb, gbeta);
            });
        });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double acc = 0;  // accumulate in double, fixed order
    for (size_t i = 0; i < a.size(); ++i) acc += (*a.values)[i];
    auto vals = std::make_shared<std::vector<float>>(1, static_cast<float>(acc));
    int na = a.node;
    size_t n = a.size();
    return detail::finish("sum", a.tape, {1}, vals, {na}, a.tracked(), [=](Tape& tp, int id) {
        tp.set_backward(id, [=](Tape& t) {
            float g = t.node_grad(id)[0];
            std::vector<float> tmp(n, g);
            t.accumulate(na, tmp);
        });
    });
}

inline Tensor mean(const Tensor& a) {
    double acc = 0;
    for (size_t i = 0; i < a.size(); ++i) acc += (*a.values)[i];
    auto vals =
        std::make_shared<std::vector<float>>(1, static_cast<float>(acc / a.size()));
    int na = a.node;
    size_t n = a.size();
    return detail::finish("mean", a.tape, {1}, vals, {na}, a.tracked(), [=](Tape& tp, int id) {
        tp.set_backward(id, [=](Tape& t) {
            float g = t.node_grad(id)[0] / static_cast<float>(n);
            std::vector<float> tmp(n, g);
            t.accumulate(na, tmp);
        });
    });
}

// ---------------------------------------------------------------------------
// Custom-gradient injection (renderer bridge and friends): forward values are
// computed by the caller, backward distributes an upstream gradient to each
// input (empty entries mean "no gradient for this input").
// ---------------------------------------------------------------------------

using CustomBackward =
    std::function<std::vector<std::vector<float>>(const std::vector<float>& grad_out)>;

inline Tensor custom_op(const std::vector<Tensor>& inputs, std::vector<int> out_shape,
                        std::vector<float> out_values, CustomBackward backward_fn) {
    if (out_values.size() != shape_product(out_shape))
        throw ShapeError("custom_op: " + std::to_string(out_values.size()) +
                         " values for shape " + shape_string(out_shape));
    Tape* tape = nullptr;
    bool tracked = false;
    std::vector<int> nodes(inputs.size());
    for (size_t i = 0; i < inputs.size(); ++i) {
        nodes[i] = inputs[i].node;
        tracked = tracked || inputs[i].tracked();
        if (inputs[i].tape) {
            if (tape && tape != inputs[i].tape) throw Error("custom_op: mixed tapes");
            tape = inputs[i].tape;
        }
    }
    auto vals = std::make_shared<std::vector<float>>(std::move(out_values));
    return detail::finish(
        "custom_op", tape, std::move(out_shape), vals, nodes, tracked,
        [nodes, backward_fn](Tape& tp, int id) {
            tp.set_backward(id, [id, nodes, backward_fn](Tape& t) {
                auto gs = backward_fn(t.node_grad(id));
                if (gs.size() != nodes.size())
                    throw Error("custom_op: backward returned " + std::to_string(gs.size()) +
                                " gradients for " + std::to_string(nodes.size()) + " inputs");
                for (size_t i = 0; i < nodes.size(); ++i)
                    if (nodes[i] >= 0 && !gs[i].empty()) t.accumulate(nodes[i], gs[i]);
            });
        });
}

}  // namespace dsplats
