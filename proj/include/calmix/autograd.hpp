#pragma once

#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "calmix/tensor.hpp"

namespace calmix {

// Reverse-mode tape. Nodes are created in evaluation order, so the creation
// index doubles as a topological order for the backward sweep.
template <typename T>
struct VarNode {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<VarNode<T>>> parents;
    std::function<void(VarNode<T>&)> backprop;

    bool has_grad() const { return !grad.data.empty(); }
    Tensor<T>& ensure_grad() {
        if (grad.data.empty()) grad = Tensor<T>::zeros(value.shape);
        return grad;
    }
    void zero_grad() {
        if (!grad.data.empty())
            std::fill(grad.data.begin(), grad.data.end(), T(0));
    }
};

template <typename T>
using Var = std::shared_ptr<VarNode<T>>;

using VarF = Var<float>;
using VarD = Var<double>;

namespace detail {
template <typename T>
std::uint64_t next_seq() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}
}  // namespace detail

template <typename T>
Var<T> make_node(Tensor<T> value, bool requires_grad,
                 std::vector<Var<T>> parents = {},
                 std::function<void(VarNode<T>&)> backprop = nullptr) {
    auto n = std::make_shared<VarNode<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->seq = detail::next_seq<T>();
    if (requires_grad) {
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return n;
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    return make_node<T>(std::move(value), false);
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
    return make_node<T>(std::move(value), true);
}

template <typename T>
bool any_requires_grad(const std::vector<Var<T>>& vars) {
    for (const auto& v : vars)
        if (v->requires_grad) return true;
    return false;
}

// Accumulates d(root)/d(node) into .grad of every reachable node that
// requires grad. root must be scalar.
template <typename T>
void backward(const Var<T>& root) {
    CALMIX_CHECK(root->value.numel() == 1, "backward: root must be scalar");
    if (!root->requires_grad) return;

    std::vector<VarNode<T>*> order;
    std::unordered_set<VarNode<T>*> seen;
    std::vector<VarNode<T>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        VarNode<T>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second)
                stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const VarNode<T>* a, const VarNode<T>* b) { return a->seq > b->seq; });

    root->ensure_grad();
    root->grad.data[0] = T(1);
    for (VarNode<T>* n : order)
        if (n->backprop && n->has_grad()) n->backprop(*n);
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    CALMIX_CHECK(a->value.same_shape(b->value), "add: shape mismatch");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    const bool rg = a->requires_grad || b->requires_grad;
    return make_node<T>(std::move(out), rg, {a, b}, [a, b](VarNode<T>& self) {
        if (a->requires_grad) {
            auto& ga = a->ensure_grad();
            for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
        }
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    CALMIX_CHECK(a->value.same_shape(b->value), "sub: shape mismatch");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    const bool rg = a->requires_grad || b->requires_grad;
    return make_node<T>(std::move(out), rg, {a, b}, [a, b](VarNode<T>& self) {
        if (a->requires_grad) {
            auto& ga = a->ensure_grad();
            for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i];
        }
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    CALMIX_CHECK(a->value.same_shape(b->value), "mul: shape mismatch");
    Tensor<T> out = a->value;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    const bool rg = a->requires_grad || b->requires_grad;
    return make_node<T>(std::move(out), rg, {a, b}, [a, b](VarNode<T>& self) {
        if (a->requires_grad) {
            auto& ga = a->ensure_grad();
            for (std::int64_t i = 0; i < ga.numel(); ++i)
                ga[i] += self.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            for (std::int64_t i = 0; i < gb.numel(); ++i)
                gb[i] += self.grad[i] * a->value[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> out = a->value;
    for (auto& v : out.data) v *= s;
    return make_node<T>(std::move(out), a->requires_grad, {a},
                        [a, s](VarNode<T>& self) {
                            auto& ga = a->ensure_grad();
                            for (std::int64_t i = 0; i < ga.numel(); ++i)
                                ga[i] += s * self.grad[i];
                        });
}

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
    Tensor<T> out = a->value.reshaped(std::move(shape));
    return make_node<T>(std::move(out), a->requires_grad, {a},
                        [a](VarNode<T>& self) {
                            auto& ga = a->ensure_grad();
                            for (std::int64_t i = 0; i < ga.numel(); ++i)
                                ga[i] += self.grad[i];
                        });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> out = a->value;
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return make_node<T>(std::move(out), a->requires_grad, {a},
                        [a](VarNode<T>& self) {
                            auto& ga = a->ensure_grad();
                            for (std::int64_t i = 0; i < ga.numel(); ++i)
                                if (a->value[i] > T(0)) ga[i] += self.grad[i];
                        });
}

// y = sign(x) * sqrt(|x| + eps); stabilizes bilinear features.
template <typename T>
Var<T> signed_sqrt(const Var<T>& a, T eps = T(1e-12)) {
    Tensor<T> out = a->value;
    for (auto& v : out.data) {
        const T s = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
        v = s * std::sqrt(std::abs(v) + eps);
    }
    return make_node<T>(std::move(out), a->requires_grad, {a},
                        [a, eps](VarNode<T>& self) {
                            auto& ga = a->ensure_grad();
                            for (std::int64_t i = 0; i < ga.numel(); ++i)
                                ga[i] += self.grad[i] * T(0.5) /
                                         std::sqrt(std::abs(a->value[i]) + eps);
                        });
}

// L2-normalizes over the last axis. Rows with exactly zero norm stay zero.
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a) {
    const int last = a->value.dim(a->value.rank() - 1);
    const std::int64_t rows = a->value.numel() / last;
    Tensor<T> out = a->value;
    std::vector<T> norms(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        T ss = T(0);
        for (int c = 0; c < last; ++c) {
            const T v = a->value[r * last + c];
            ss += v * v;
        }
        const T n = std::sqrt(ss);
        norms[static_cast<std::size_t>(r)] = n;
        if (n > T(0))
            for (int c = 0; c < last; ++c) out[r * last + c] /= n;
    }
    return make_node<T>(
        std::move(out), a->requires_grad, {a},
        [a, last, rows, norms](VarNode<T>& self) {
            auto& ga = a->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T n = norms[static_cast<std::size_t>(r)];
                if (n <= T(0)) continue;
                T dot = T(0);
                for (int c = 0; c < last; ++c)
                    dot += self.value[r * last + c] * self.grad[r * last + c];
                for (int c = 0; c < last; ++c)
                    ga[r * last + c] +=
                        (self.grad[r * last + c] - self.value[r * last + c] * dot) / n;
            }
        });
}

// Elementwise mean of >= 1 same-shaped variables.
template <typename T>
Var<T> mean_of(const std::vector<Var<T>>& vars) {
    CALMIX_CHECK(!vars.empty(), "mean_of: empty sequence");
    for (const auto& v : vars)
        CALMIX_CHECK(v->value.same_shape(vars[0]->value), "mean_of: shape mismatch");
    const T inv = T(1) / static_cast<T>(vars.size());
    Tensor<T> out = Tensor<T>::zeros(vars[0]->value.shape);
    for (const auto& v : vars)
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += v->value[i] * inv;
    return make_node<T>(std::move(out), any_requires_grad(vars), vars,
                        [vars, inv](VarNode<T>& self) {
                            for (const auto& v : vars) {
                                if (!v->requires_grad) continue;
                                auto& g = v->ensure_grad();
                                for (std::int64_t i = 0; i < g.numel(); ++i)
                                    g[i] += self.grad[i] * inv;
                            }
                        });
}

// ---------------------------------------------------------------------------
// Linear algebra ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    Tensor<T> out = matmul_values(a->value, b->value);
    const bool rg = a->requires_grad || b->requires_grad;
    return make_node<T>(std::move(out), rg, {a, b}, [a, b](VarNode<T>& self) {
        const int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
        if (a->requires_grad) {
            auto& ga = a->ensure_grad();
            gemm_accumulate<T>(false, true, m, k, n, T(1), self.grad.data.data(),
                               n, b->value.data.data(), n, T(1), ga.data.data(), k);
        }
        if (b->requires_grad) {
            auto& gb = b->ensure_grad();
            gemm_accumulate<T>(true, false, k, n, m, T(1), a->value.data.data(),
                               k, self.grad.data.data(), n, T(1), gb.data.data(), n);
        }
    });
}

// x: (R, K) plus bias (K) broadcast over rows.
template <typename T>
Var<T> add_rowbias(const Var<T>& x, const Var<T>& bias) {
    CALMIX_CHECK(x->value.rank() == 2 && bias->value.rank() == 1 &&
                     x->value.dim(1) == bias->value.dim(0),
                 "add_rowbias: shape mismatch");
    const int rows = x->value.dim(0), cols = x->value.dim(1);
    Tensor<T> out = x->value;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) out.at(r, c) += bias->value[c];
    const bool rg = x->requires_grad || bias->requires_grad;
    return make_node<T>(std::move(out), rg, {x, bias},
                        [x, bias, rows, cols](VarNode<T>& self) {
                            if (x->requires_grad) {
                                auto& gx = x->ensure_grad();
                                for (std::int64_t i = 0; i < gx.numel(); ++i)
                                    gx[i] += self.grad[i];
                            }
                            if (bias->requires_grad) {
                                auto& gb = bias->ensure_grad();
                                for (int r = 0; r < rows; ++r)
                                    for (int c = 0; c < cols; ++c)
                                        gb[c] += self.grad.at(r, c);
                            }
                        });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    return add_rowbias(matmul(x, w), b);
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    CALMIX_CHECK(x->value.rank() == 4, "global_avg_pool: (B,H,W,C) required");
    const int B = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2),
              C = x->value.dim(3);
    const T inv = T(1) / static_cast<T>(H * W);
    Tensor<T> out({B, C});
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                for (int c = 0; c < C; ++c)
                    out.at(b, c) += x->value.at(b, h, w, c) * inv;
    return make_node<T>(std::move(out), x->requires_grad, {x},
                        [x, B, H, W, C, inv](VarNode<T>& self) {
                            auto& gx = x->ensure_grad();
                            for (int b = 0; b < B; ++b)
                                for (int h = 0; h < H; ++h)
                                    for (int w = 0; w < W; ++w)
                                        for (int c = 0; c < C; ++c)
                                            gx.at(b, h, w, c) +=
                                                self.grad.at(b, c) * inv;
                        });
}

// ---------------------------------------------------------------------------
// Convolution / pooling / batch norm (channel-last NHWC)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad,
            int out_h, int out_w, Tensor<T>& col) {
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const int patch = kh * kw * C;
    std::int64_t row = 0;
    for (int b = 0; b < B; ++b) {
        for (int oh = 0; oh < out_h; ++oh) {
            for (int ow = 0; ow < out_w; ++ow, ++row) {
                T* dst = &col[row * patch];
                for (int i = 0; i < kh; ++i) {
                    const int ih = oh * stride + i - pad;
                    if (ih < 0 || ih >= H) {
                        std::fill(dst, dst + kw * C, T(0));
                        dst += kw * C;
                        continue;
                    }
                    for (int j = 0; j < kw; ++j, dst += C) {
                        const int iw = ow * stride + j - pad;
                        if (iw < 0 || iw >= W)
                            std::fill(dst, dst + C, T(0));
                        else
                            std::memcpy(dst, &x.at(b, ih, iw, 0),
                                        sizeof(T) * static_cast<std::size_t>(C));
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_accumulate(const Tensor<T>& col, int kh, int kw, int stride,
                       int pad, int out_h, int out_w, Tensor<T>& gx) {
    const int B = gx.dim(0), H = gx.dim(1), W = gx.dim(2), C = gx.dim(3);
    const int patch = kh * kw * C;
    std::int64_t row = 0;
    for (int b = 0; b < B; ++b) {
        for (int oh = 0; oh < out_h; ++oh) {
            for (int ow = 0; ow < out_w; ++ow, ++row) {
                const T* src = &col[row * patch];
                for (int i = 0; i < kh; ++i) {
                    const int ih = oh * stride + i - pad;
                    if (ih < 0 || ih >= H) {
                        src += kw * C;
                        continue;
                    }
                    for (int j = 0; j < kw; ++j, src += C) {
                        const int iw = ow * stride + j - pad;
                        if (iw < 0 || iw >= W) continue;
                        T* dst = &gx.at(b, ih, iw, 0);
                        for (int c = 0; c < C; ++c) dst[c] += src[c];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: (B,H,W,Cin), w: (KH,KW,Cin,Cout), b: (Cout).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride = 1,
              int pad = 1) {
    CALMIX_CHECK(x->value.rank() == 4 && w->value.rank() == 4,
                 "conv2d: (B,H,W,C) input and (KH,KW,Cin,Cout) weights required");
    CALMIX_CHECK(x->value.dim(3) == w->value.dim(2),
                 "conv2d: input channels ", x->value.dim(3),
                 " do not match weight channels ", w->value.dim(2));
    const int B = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    const int KH = w->value.dim(0), KW = w->value.dim(1), Cin = w->value.dim(2),
              Cout = w->value.dim(3);
    CALMIX_CHECK(b->value.rank() == 1 && b->value.dim(0) == Cout,
                 "conv2d: bias shape mismatch");
    const int OH = (H + 2 * pad - KH) / stride + 1;
    const int OW = (W + 2 * pad - KW) / stride + 1;
    CALMIX_CHECK(OH >= 1 && OW >= 1, "conv2d: output would be empty");

    const int patch = KH * KW * Cin;
    const std::int64_t rows = static_cast<std::int64_t>(B) * OH * OW;
    auto col = std::make_shared<Tensor<T>>(
        std::vector<int>{static_cast<int>(rows), patch});
    detail::im2col(x->value, KH, KW, stride, pad, OH, OW, *col);

    Tensor<T> out({B, OH, OW, Cout});
    gemm_accumulate<T>(false, false, static_cast<int>(rows), Cout, patch, T(1),
                       col->data.data(), patch, w->value.data.data(), Cout,
                       T(0), out.data.data(), Cout);
    for (std::int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < Cout; ++c) out[r * Cout + c] += b->value[c];

    const bool rg = x->requires_grad || w->requires_grad || b->requires_grad;
    if (!rg) return make_node<T>(std::move(out), false);

    return make_node<T>(
        std::move(out), true, {x, w, b},
        [x, w, b, col, KH, KW, stride, pad, OH, OW, rows, patch,
         Cout](VarNode<T>& self) {
            if (b->requires_grad) {
                auto& gb = b->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int c = 0; c < Cout; ++c)
                        gb[c] += self.grad[r * Cout + c];
            }
            if (w->requires_grad) {
                auto& gw = w->ensure_grad();
                gemm_accumulate<T>(true, false, patch, Cout,
                                   static_cast<int>(rows), T(1),
                                   col->data.data(), patch,
                                   self.grad.data.data(), Cout, T(1),
                                   gw.data.data(), Cout);
            }
            if (x->requires_grad) {
                Tensor<T> gcol({static_cast<int>(rows), patch});
                gemm_accumulate<T>(false, true, static_cast<int>(rows), patch,
                                   Cout, T(1), self.grad.data.data(), Cout,
                                   w->value.data.data(), Cout, T(0),
                                   gcol.data.data(), patch);
                auto& gx = x->ensure_grad();
                detail::col2im_accumulate(gcol, KH, KW, stride, pad, OH, OW, gx);
            }
        });
}

// 2x2 max pool, stride 2, ceil mode (edge windows shrink to fit).
template <typename T>
Var<T> maxpool2x2(const Var<T>& x) {
    CALMIX_CHECK(x->value.rank() == 4, "maxpool2x2: (B,H,W,C) required");
    const int B = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2),
              C = x->value.dim(3);
    const int OH = (H + 1) / 2, OW = (W + 1) / 2;
    Tensor<T> out({B, OH, OW, C});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(out.numel()));
    std::int64_t oi = 0;
    for (int b = 0; b < B; ++b) {
        for (int oh = 0; oh < OH; ++oh) {
            const int h0 = 2 * oh, h1 = std::min(h0 + 2, H);
            for (int ow = 0; ow < OW; ++ow) {
                const int w0 = 2 * ow, w1 = std::min(w0 + 2, W);
                for (int c = 0; c < C; ++c, ++oi) {
                    T best = x->value.at(b, h0, w0, c);
                    std::int64_t best_idx =
                        ((static_cast<std::int64_t>(b) * H + h0) * W + w0) * C + c;
                    for (int h = h0; h < h1; ++h)
                        for (int w = w0; w < w1; ++w) {
                            const T v = x->value.at(b, h, w, c);
                            if (v > best) {
                                best = v;
                                best_idx =
                                    ((static_cast<std::int64_t>(b) * H + h) * W +
                                     w) * C + c;
                            }
                        }
                    out[oi] = best;
                    (*argmax)[static_cast<std::size_t>(oi)] = best_idx;
                }
            }
        }
    }
    return make_node<T>(std::move(out), x->requires_grad, {x},
                        [x, argmax](VarNode<T>& self) {
                            auto& gx = x->ensure_grad();
                            for (std::int64_t i = 0; i < self.grad.numel(); ++i)
                                gx[(*argmax)[static_cast<std::size_t>(i)]] +=
                                    self.grad[i];
                        });
}

// Per-channel batch norm over (B,H,W). In training mode normalizes with batch
// statistics and updates the running buffers in place; in inference mode uses
// the running buffers and leaves them untouched.
template <typename T>
Var<T> batchnorm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                 Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                 T momentum = T(0.1), T eps = T(1e-5)) {
    CALMIX_CHECK(x->value.rank() == 4, "batchnorm: (B,H,W,C) required");
    const int B = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2),
              C = x->value.dim(3);
    CALMIX_CHECK(gamma->value.numel() == C && beta->value.numel() == C &&
                     running_mean.numel() == C && running_var.numel() == C,
                 "batchnorm: channel size mismatch");
    const std::int64_t N = static_cast<std::int64_t>(B) * H * W;
    const std::int64_t total = x->value.numel();

    std::vector<T> mean(static_cast<std::size_t>(C), T(0));
    std::vector<T> var(static_cast<std::size_t>(C), T(0));
    if (training) {
        for (std::int64_t i = 0; i < total; ++i)
            mean[static_cast<std::size_t>(i % C)] += x->value[i];
        for (int c = 0; c < C; ++c) mean[static_cast<std::size_t>(c)] /= static_cast<T>(N);
        for (std::int64_t i = 0; i < total; ++i) {
            const T d = x->value[i] - mean[static_cast<std::size_t>(i % C)];
            var[static_cast<std::size_t>(i % C)] += d * d;
        }
        for (int c = 0; c < C; ++c) var[static_cast<std::size_t>(c)] /= static_cast<T>(N);
        for (int c = 0; c < C; ++c) {
            running_mean[c] = (T(1) - momentum) * running_mean[c] +
                              momentum * mean[static_cast<std::size_t>(c)];
            running_var[c] = (T(1) - momentum) * running_var[c] +
                             momentum * var[static_cast<std::size_t>(c)];
        }
    } else {
        for (int c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = running_mean[c];
            var[static_cast<std::size_t>(c)] = running_var[c];
        }
    }

    std::vector<T> inv_std(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c)
        inv_std[static_cast<std::size_t>(c)] =
            T(1) / std::sqrt(var[static_cast<std::size_t>(c)] + eps);

    auto xhat = std::make_shared<Tensor<T>>(x->value.shape);
    Tensor<T> out(x->value.shape);
    for (std::int64_t i = 0; i < total; ++i) {
        const auto c = static_cast<std::size_t>(i % C);
        const T xh = (x->value[i] - mean[c]) * inv_std[c];
        (*xhat)[i] = xh;
        out[i] = gamma->value[static_cast<std::int64_t>(c)] * xh +
                 beta->value[static_cast<std::int64_t>(c)];
    }

    const bool rg = x->requires_grad || gamma->requires_grad || beta->requires_grad;
    if (!rg) return make_node<T>(std::move(out), false);

    return make_node<T>(
        std::move(out), true, {x, gamma, beta},
        [x, gamma, beta, xhat, inv_std, C, N, total, training](VarNode<T>& self) {
            std::vector<T> sum_dy(static_cast<std::size_t>(C), T(0));
            std::vector<T> sum_dy_xhat(static_cast<std::size_t>(C), T(0));
            for (std::int64_t i = 0; i < total; ++i) {
                const auto c = static_cast<std::size_t>(i % C);
                sum_dy[c] += self.grad[i];
                sum_dy_xhat[c] += self.grad[i] * (*xhat)[i];
            }
            if (beta->requires_grad) {
                auto& gb = beta->ensure_grad();
                for (int c = 0; c < C; ++c) gb[c] += sum_dy[static_cast<std::size_t>(c)];
            }
            if (gamma->requires_grad) {
                auto& gg = gamma->ensure_grad();
                for (int c = 0; c < C; ++c)
                    gg[c] += sum_dy_xhat[static_cast<std::size_t>(c)];
            }
            if (x->requires_grad) {
                auto& gx = x->ensure_grad();
                const T invN = T(1) / static_cast<T>(N);
                for (std::int64_t i = 0; i < total; ++i) {
                    const auto c = static_cast<std::size_t>(i % C);
                    const T g = gamma->value[static_cast<std::int64_t>(c)];
                    if (training)
                        gx[i] += g * inv_std[c] *
                                 (self.grad[i] - sum_dy[c] * invN -
                                  (*xhat)[i] * sum_dy_xhat[c] * invN);
                    else
                        gx[i] += g * inv_std[c] * self.grad[i];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Losses and value-only helpers
// ---------------------------------------------------------------------------

// Mean cross-entropy of softmax(logits) against integer labels.
// logits: (B, K). Returns a scalar node.
template <typename T>
Var<T> softmax_ce_mean(const Var<T>& logits, const std::vector<int>& labels) {
    CALMIX_CHECK(logits->value.rank() == 2, "softmax_ce_mean: (B,K) required");
    const int B = logits->value.dim(0), K = logits->value.dim(1);
    CALMIX_CHECK(static_cast<int>(labels.size()) == B,
                 "softmax_ce_mean: ", labels.size(), " labels for batch ", B);
    for (int y : labels)
        CALMIX_CHECK(y >= 0 && y < K, "label ", y, " out of range [0,", K, ")");

    auto probs = std::make_shared<Tensor<T>>(logits->value.shape);
    T total = T(0);
    for (int b = 0; b < B; ++b) {
        T m = logits->value.at(b, 0);
        for (int k = 1; k < K; ++k) m = std::max(m, logits->value.at(b, k));
        T denom = T(0);
        for (int k = 0; k < K; ++k) {
            const T e = std::exp(logits->value.at(b, k) - m);
            probs->at(b, k) = e;
            denom += e;
        }
        for (int k = 0; k < K; ++k) probs->at(b, k) /= denom;
        total += std::log(denom) + m - logits->value.at(b, labels[static_cast<std::size_t>(b)]);
    }
    Tensor<T> out({1});
    out[0] = total / static_cast<T>(B);

    return make_node<T>(std::move(out), logits->requires_grad, {logits},
                        [logits, probs, labels, B, K](VarNode<T>& self) {
                            auto& gl = logits->ensure_grad();
                            const T g = self.grad[0] / static_cast<T>(B);
                            for (int b = 0; b < B; ++b)
                                for (int k = 0; k < K; ++k) {
                                    T d = probs->at(b, k);
                                    if (k == labels[static_cast<std::size_t>(b)]) d -= T(1);
                                    gl.at(b, k) += g * d;
                                }
                        });
}

// Row-wise softmax on values (inference path, no gradients).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
    CALMIX_CHECK(logits.rank() == 2, "softmax_rows: (B,K) required");
    const int B = logits.dim(0), K = logits.dim(1);
    Tensor<T> out(logits.shape);
    for (int b = 0; b < B; ++b) {
        T m = logits.at(b, 0);
        for (int k = 1; k < K; ++k) m = std::max(m, logits.at(b, k));
        T denom = T(0);
        for (int k = 0; k < K; ++k) {
            const T e = std::exp(logits.at(b, k) - m);
            out.at(b, k) = e;
            denom += e;
        }
        for (int k = 0; k < K; ++k) out.at(b, k) /= denom;
    }
    return out;
}

}  // namespace calmix
