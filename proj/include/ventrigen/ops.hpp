#pragma once

// Differentiable tensor operations. Convolutions and matrix products run
// through Eigen GEMM (im2col layout); everything else is plain loops.
// Layout convention for grids is channels-first (N, C, H, W).

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <vector>

#include "ventrigen/tensor.hpp"

namespace vgen {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// Integer label grid (class ids per pixel); not differentiable.
struct LabelGrid {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> v;

    LabelGrid() = default;
    LabelGrid(std::size_t h_, std::size_t w_, std::uint8_t fill = 0) : h(h_), w(w_), v(h_ * w_, fill) {}

    std::uint8_t& at(std::size_t i, std::size_t j) { return v[i * w + j]; }
    std::uint8_t at(std::size_t i, std::size_t j) const { return v[i * w + j]; }
    std::size_t size() const { return v.size(); }
    bool operator==(const LabelGrid& o) const { return h == o.h && w == o.w && v == o.v; }
};

namespace detail {

inline Tensor make_node(Shape shape, std::vector<double> values,
                        std::vector<std::shared_ptr<TensorNode>> parents,
                        std::function<void(TensorNode&)> backprop) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    bool rg = false;
    if (grad_mode()) {
        for (const auto& p : parents) rg = rg || (p && p->requires_grad);
    }
    if (rg) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backprop = std::move(backprop);
    }
    node->id = next_node_id();
    return Tensor(std::move(node));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
             shape_str(b.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> y(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] + pb[i];
    auto na = a.node();
    auto nb = b.node();
    return detail::make_node(a.shape(), std::move(y), {na, nb}, [na, nb](TensorNode& out) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) na->grad[i] += out.grad[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) nb->grad[i] += out.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> y(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] - pb[i];
    auto na = a.node();
    auto nb = b.node();
    return detail::make_node(a.shape(), std::move(y), {na, nb}, [na, nb](TensorNode& out) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) na->grad[i] += out.grad[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) nb->grad[i] -= out.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> y(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] * pb[i];
    auto na = a.node();
    auto nb = b.node();
    return detail::make_node(a.shape(), std::move(y), {na, nb}, [na, nb](TensorNode& out) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                na->grad[i] += out.grad[i] * nb->values[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                nb->grad[i] += out.grad[i] * na->values[i];
        }
    });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<double> y(a.size());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] / pb[i];
    auto na = a.node();
    auto nb = b.node();
    return detail::make_node(a.shape(), std::move(y), {na, nb}, [na, nb](TensorNode& out) {
        if (na->requires_grad) {
            na->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                na->grad[i] += out.grad[i] / nb->values[i];
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i)
                nb->grad[i] -= out.grad[i] * out.values[i] / nb->values[i];
        }
    });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> y(a.size());
    const double* pa = a.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] * s;
    auto na = a.node();
    return detail::make_node(a.shape(), std::move(y), {na}, [na, s](TensorNode& out) {
        na->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i) na->grad[i] += out.grad[i] * s;
    });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> y(a.size());
    const double* pa = a.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = pa[i] + s;
    auto na = a.node();
    return detail::make_node(a.shape(), std::move(y), {na}, [na](TensorNode& out) {
        na->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i) na->grad[i] += out.grad[i];
    });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

namespace detail {

// f(x) -> y, dfdx(x, y) for chain rule
template <class F, class DF>
Tensor unary_op(const Tensor& a, F f, DF dfdx) {
    std::vector<double> y(a.size());
    const double* pa = a.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(pa[i]);
    auto na = a.node();
    return detail::make_node(a.shape(), std::move(y), {na}, [na, dfdx](TensorNode& out) {
        na->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i)
            na->grad[i] += out.grad[i] * dfdx(na->values[i], out.values[i]);
    });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& a, double slope = 0.2) {
    return detail::unary_op(
        a, [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor tanh_op(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor exp_op(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log_op(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor abs_op(const Tensor& a) {
    return detail::unary_op(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Tensor clamp(const Tensor& a, double lo, double hi) {
    return detail::unary_op(
        a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    const double* pa = a.data();
    for (std::size_t i = 0; i < a.size(); ++i) s += pa[i];
    auto na = a.node();
    return detail::make_node({1}, {s}, {na}, [na](TensorNode& out) {
        na->ensure_grad();
        double g = out.grad[0];
        for (std::size_t i = 0; i < na->grad.size(); ++i) na->grad[i] += g;
    });
}

inline Tensor mean(const Tensor& a) {
    double s = 0.0;
    const double* pa = a.data();
    for (std::size_t i = 0; i < a.size(); ++i) s += pa[i];
    double inv = 1.0 / static_cast<double>(a.size());
    auto na = a.node();
    return detail::make_node({1}, {s * inv}, {na}, [na, inv](TensorNode& out) {
        na->ensure_grad();
        double g = out.grad[0] * inv;
        for (std::size_t i = 0; i < na->grad.size(); ++i) na->grad[i] += g;
    });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& a, Shape new_shape) {
    if (shape_size(new_shape) != a.size()) {
        fail("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    }
    auto na = a.node();
    return detail::make_node(std::move(new_shape), a.values(), {na}, [na](TensorNode& out) {
        na->ensure_grad();
        for (std::size_t i = 0; i < out.grad.size(); ++i) na->grad[i] += out.grad[i];
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) fail("concat: no inputs");
    Shape shape = parts[0].shape();
    if (axis >= shape.size()) fail("concat: axis out of range");
    std::size_t axis_total = 0;
    for (const auto& p : parts) {
        if (p.rank() != shape.size()) fail("concat: rank mismatch");
        for (std::size_t d = 0; d < shape.size(); ++d) {
            if (d != axis && p.shape()[d] != shape[d]) {
                fail("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(shape));
            }
        }
        axis_total += p.shape()[axis];
    }
    shape[axis] = axis_total;

    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];

    std::vector<double> y(shape_size(shape));
    std::size_t out_stride = axis_total * inner;
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::size_t len = p.shape()[axis] * inner;
        const double* src = p.data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::memcpy(y.data() + o * out_stride + offset, src + o * len, len * sizeof(double));
        }
        offset += len;
    }

    std::vector<std::shared_ptr<TensorNode>> parents;
    std::vector<std::size_t> lens;
    for (const auto& p : parts) {
        parents.push_back(p.node());
        lens.push_back(p.shape()[axis] * inner);
    }
    return detail::make_node(std::move(shape), std::move(y), parents,
                             [parents, lens, outer, out_stride](TensorNode& out) {
                                 std::size_t offset = 0;
                                 for (std::size_t k = 0; k < parents.size(); ++k) {
                                     auto& pn = parents[k];
                                     if (pn->requires_grad) {
                                         pn->ensure_grad();
                                         for (std::size_t o = 0; o < outer; ++o) {
                                             const double* g = out.grad.data() + o * out_stride + offset;
                                             double* dst = pn->grad.data() + o * lens[k];
                                             for (std::size_t i = 0; i < lens[k]; ++i) dst[i] += g[i];
                                         }
                                     }
                                     offset += lens[k];
                                 }
                             });
}

// ---------------------------------------------------------------------------
// matrix products

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
        fail("matmul: incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> y(m * n);
    EMap(y.data(), m, n).noalias() = ECMap(a.data(), m, k) * ECMap(b.data(), k, n);
    auto na = a.node();
    auto nb = b.node();
    return detail::make_node({m, n}, std::move(y), {na, nb}, [na, nb, m, k, n](TensorNode& out) {
        ECMap dy(out.grad.data(), m, n);
        if (na->requires_grad) {
            na->ensure_grad();
            EMap(na->grad.data(), m, k).noalias() += dy * ECMap(nb->values.data(), k, n).transpose();
        }
        if (nb->requires_grad) {
            nb->ensure_grad();
            EMap(nb->grad.data(), k, n).noalias() += ECMap(na->values.data(), m, k).transpose() * dy;
        }
    });
}

// batched matmul: [B,m,k] x [B,k,n] -> [B,m,n]
inline Tensor bmm(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[1]) {
        fail("bmm: incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::size_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
    std::vector<double> y(B * m * n);
    for (std::size_t i = 0; i < B; ++i) {
        EMap(y.data() + i * m * n, m, n).noalias() =
            ECMap(a.data() + i * m * k, m, k) * ECMap(b.data() + i * k * n, k, n);
    }
    auto na = a.node();
    auto nb = b.node();
    return detail::make_node({B, m, n}, std::move(y), {na, nb},
                             [na, nb, B, m, k, n](TensorNode& out) {
                                 for (std::size_t i = 0; i < B; ++i) {
                                     ECMap dy(out.grad.data() + i * m * n, m, n);
                                     if (na->requires_grad) {
                                         na->ensure_grad();
                                         EMap(na->grad.data() + i * m * k, m, k).noalias() +=
                                             dy * ECMap(nb->values.data() + i * k * n, k, n).transpose();
                                     }
                                     if (nb->requires_grad) {
                                         nb->ensure_grad();
                                         EMap(nb->grad.data() + i * k * n, k, n).noalias() +=
                                             ECMap(na->values.data() + i * m * k, m, k).transpose() * dy;
                                     }
                                 }
                             });
}

// batched matmul with transposed rhs: [B,m,k] x [B,n,k]^T -> [B,m,n]
inline Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] ||
        a.shape()[2] != b.shape()[2]) {
        fail("bmm_nt: incompatible shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::size_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[1];
    std::vector<double> y(B * m * n);
    for (std::size_t i = 0; i < B; ++i) {
        EMap(y.data() + i * m * n, m, n).noalias() =
            ECMap(a.data() + i * m * k, m, k) * ECMap(b.data() + i * n * k, n, k).transpose();
    }
    auto na = a.node();
    auto nb = b.node();
    return detail::make_node({B, m, n}, std::move(y), {na, nb},
                             [na, nb, B, m, k, n](TensorNode& out) {
                                 for (std::size_t i = 0; i < B; ++i) {
                                     ECMap dy(out.grad.data() + i * m * n, m, n);
                                     if (na->requires_grad) {
                                         na->ensure_grad();
                                         EMap(na->grad.data() + i * m * k, m, k).noalias() +=
                                             dy * ECMap(nb->values.data() + i * n * k, n, k);
                                     }
                                     if (nb->requires_grad) {
                                         nb->ensure_grad();
                                         EMap(nb->grad.data() + i * n * k, n, k).noalias() +=
                                             dy.transpose() * ECMap(na->values.data() + i * m * k, m, k);
                                     }
                                 }
                             });
}

// [N,C,H,W] -> [N,H*W,C]
inline Tensor nchw_to_nlc(const Tensor& x) {
    if (x.rank() != 4) fail("nchw_to_nlc: expected rank-4, got " + shape_str(x.shape()));
    std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    std::size_t L = H * W;
    std::vector<double> y(N * L * C);
    const double* px = x.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t l = 0; l < L; ++l) y[(n * L + l) * C + c] = px[(n * C + c) * L + l];
    auto nx = x.node();
    return detail::make_node({N, L, C}, std::move(y), {nx}, [nx, N, C, L](TensorNode& out) {
        nx->ensure_grad();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t l = 0; l < L; ++l)
                    nx->grad[(n * C + c) * L + l] += out.grad[(n * L + l) * C + c];
    });
}

// [N,L,C] -> [N,C,H,W] with L == H*W
inline Tensor nlc_to_nchw(const Tensor& x, std::size_t H, std::size_t W) {
    if (x.rank() != 3 || x.shape()[1] != H * W) {
        fail("nlc_to_nchw: expected [N," + std::to_string(H * W) + ",C], got " + shape_str(x.shape()));
    }
    std::size_t N = x.shape()[0], L = x.shape()[1], C = x.shape()[2];
    std::vector<double> y(N * C * L);
    const double* px = x.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t l = 0; l < L; ++l)
            for (std::size_t c = 0; c < C; ++c) y[(n * C + c) * L + l] = px[(n * L + l) * C + c];
    auto nx = x.node();
    return detail::make_node({N, C, H, W}, std::move(y), {nx}, [nx, N, C, L](TensorNode& out) {
        nx->ensure_grad();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t l = 0; l < L; ++l)
                for (std::size_t c = 0; c < C; ++c)
                    nx->grad[(n * L + l) * C + c] += out.grad[(n * C + c) * L + l];
    });
}

// ---------------------------------------------------------------------------
// convolution

namespace detail {

// cols: [C*kh*kw, OH*OW]; reads x [C,H,W] with zero padding
inline void im2col(const double* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad, std::size_t OH,
                   std::size_t OW, double* cols) {
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
                double* row = cols + ((c * kh + i) * kw + j) * (OH * OW);
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                        static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) {
                        for (std::size_t ow = 0; ow < OW; ++ow) row[oh * OW + ow] = 0.0;
                        continue;
                    }
                    const double* xr = x + (c * H + ih) * W;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                            static_cast<std::ptrdiff_t>(pad);
                        row[oh * OW + ow] =
                            (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) ? 0.0 : xr[iw];
                    }
                }
            }
        }
    }
}

// scatter-add of cols back into image x [C,H,W]
inline void col2im(const double* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
                   std::size_t kw, std::size_t stride, std::size_t pad, std::size_t OH,
                   std::size_t OW, double* x) {
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < kh; ++i) {
            for (std::size_t j = 0; j < kw; ++j) {
                const double* row = cols + ((c * kh + i) * kw + j) * (OH * OW);
                for (std::size_t oh = 0; oh < OH; ++oh) {
                    std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                        static_cast<std::ptrdiff_t>(pad);
                    if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                    double* xr = x + (c * H + ih) * W;
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                            static_cast<std::ptrdiff_t>(pad);
                        if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                        xr[iw] += row[oh * OW + ow];
                    }
                }
            }
        }
    }
}

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride,
                                std::size_t pad, const char* op) {
    std::size_t padded = in + 2 * pad;
    if (padded < k) fail(std::string(op) + ": kernel larger than padded input");
    return (padded - k) / stride + 1;
}

}  // namespace detail

// x [N,C,H,W], w [OC,C,kh,kw], optional bias [OC]
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, std::size_t stride = 1,
                     std::size_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1]) {
        fail("conv2d: incompatible shapes " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    }
    std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    std::size_t OC = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    std::size_t OH = detail::conv_out_dim(H, kh, stride, pad, "conv2d");
    std::size_t OW = detail::conv_out_dim(W, kw, stride, pad, "conv2d");
    bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.shape()[0] != OC)) {
        fail("conv2d: bias shape " + shape_str(bias.shape()) + " does not match OC=" +
             std::to_string(OC));
    }

    std::size_t K = C * kh * kw;
    std::vector<double> cols(K * OH * OW);
    std::vector<double> y(N * OC * OH * OW);
    ECMap wm(w.data(), OC, K);
    for (std::size_t n = 0; n < N; ++n) {
        detail::im2col(x.data() + n * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, cols.data());
        EMap yn(y.data() + n * OC * OH * OW, OC, OH * OW);
        yn.noalias() = wm * ECMap(cols.data(), K, OH * OW);
        if (has_bias) {
            const double* pb = bias.data();
            for (std::size_t oc = 0; oc < OC; ++oc) yn.row(oc).array() += pb[oc];
        }
    }

    auto nx = x.node();
    auto nw = w.node();
    auto nb = has_bias ? bias.node() : nullptr;
    std::vector<std::shared_ptr<TensorNode>> parents{nx, nw};
    if (nb) parents.push_back(nb);
    return detail::make_node(
        {N, OC, OH, OW}, std::move(y), parents,
        [nx, nw, nb, N, C, H, W, OC, kh, kw, OH, OW, stride, pad](TensorNode& out) {
            std::size_t K = C * kh * kw;
            std::vector<double> cols(K * OH * OW);
            ECMap wm(nw->values.data(), OC, K);
            if (nw->requires_grad) nw->ensure_grad();
            if (nx->requires_grad) nx->ensure_grad();
            if (nb && nb->requires_grad) nb->ensure_grad();
            for (std::size_t n = 0; n < N; ++n) {
                ECMap dy(out.grad.data() + n * OC * OH * OW, OC, OH * OW);
                if (nw->requires_grad) {
                    detail::im2col(nx->values.data() + n * C * H * W, C, H, W, kh, kw, stride, pad,
                                   OH, OW, cols.data());
                    EMap(nw->grad.data(), OC, K).noalias() +=
                        dy * ECMap(cols.data(), K, OH * OW).transpose();
                }
                if (nx->requires_grad) {
                    EMap dcols(cols.data(), K, OH * OW);
                    dcols.noalias() = wm.transpose() * dy;
                    detail::col2im(cols.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                                   nx->grad.data() + n * C * H * W);
                }
                if (nb && nb->requires_grad) {
                    for (std::size_t oc = 0; oc < OC; ++oc) nb->grad[oc] += dy.row(oc).sum();
                }
            }
        });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride = 1, std::size_t pad = 0) {
    return conv2d(x, w, Tensor(), stride, pad);
}

// x [N,C,H,W], w [C,OC,kh,kw]; output [N,OC,(H-1)*stride+kh-2*pad, ...]
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                               std::size_t stride = 1, std::size_t pad = 0) {
    if (x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[0]) {
        fail("conv_transpose2d: incompatible shapes " + shape_str(x.shape()) + " vs " +
             shape_str(w.shape()));
    }
    std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    std::size_t OC = w.shape()[1], kh = w.shape()[2], kw = w.shape()[3];
    std::size_t oh_full = (H - 1) * stride + kh;
    std::size_t ow_full = (W - 1) * stride + kw;
    if (oh_full < 2 * pad || ow_full < 2 * pad) fail("conv_transpose2d: padding too large");
    std::size_t OH = oh_full - 2 * pad, OW = ow_full - 2 * pad;
    bool has_bias = bias.defined();
    if (has_bias && (bias.rank() != 1 || bias.shape()[0] != OC)) {
        fail("conv_transpose2d: bias shape " + shape_str(bias.shape()) + " does not match OC");
    }

    std::size_t K = OC * kh * kw;
    std::vector<double> cols(K * H * W);
    std::vector<double> y(N * OC * OH * OW, 0.0);
    ECMap wm(w.data(), C, K);
    for (std::size_t n = 0; n < N; ++n) {
        EMap(cols.data(), K, H * W).noalias() =
            wm.transpose() * ECMap(x.data() + n * C * H * W, C, H * W);
        double* yn = y.data() + n * OC * OH * OW;
        detail::col2im(cols.data(), OC, OH, OW, kh, kw, stride, pad, H, W, yn);
        if (has_bias) {
            const double* pb = bias.data();
            for (std::size_t oc = 0; oc < OC; ++oc)
                for (std::size_t i = 0; i < OH * OW; ++i) yn[oc * OH * OW + i] += pb[oc];
        }
    }

    auto nx = x.node();
    auto nw = w.node();
    auto nb = has_bias ? bias.node() : nullptr;
    std::vector<std::shared_ptr<TensorNode>> parents{nx, nw};
    if (nb) parents.push_back(nb);
    return detail::make_node(
        {N, OC, OH, OW}, std::move(y), parents,
        [nx, nw, nb, N, C, H, W, OC, kh, kw, OH, OW, stride, pad](TensorNode& out) {
            std::size_t K = OC * kh * kw;
            std::vector<double> dcols(K * H * W);
            ECMap wm(nw->values.data(), C, K);
            if (nw->requires_grad) nw->ensure_grad();
            if (nx->requires_grad) nx->ensure_grad();
            if (nb && nb->requires_grad) nb->ensure_grad();
            for (std::size_t n = 0; n < N; ++n) {
                const double* dyp = out.grad.data() + n * OC * OH * OW;
                // gather dy patches: dcols[(oc,i,j),(h,w)] = dy[oc, h*s-p+i, w*s-p+j]
                detail::im2col(dyp, OC, OH, OW, kh, kw, stride, pad, H, W, dcols.data());
                if (nx->requires_grad) {
                    EMap(nx->grad.data() + n * C * H * W, C, H * W).noalias() +=
                        wm * ECMap(dcols.data(), K, H * W);
                }
                if (nw->requires_grad) {
                    EMap(nw->grad.data(), C, K).noalias() +=
                        ECMap(nx->values.data() + n * C * H * W, C, H * W) *
                        ECMap(dcols.data(), K, H * W).transpose();
                }
                if (nb && nb->requires_grad) {
                    for (std::size_t oc = 0; oc < OC; ++oc) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < OH * OW; ++i) s += dyp[oc * OH * OW + i];
                        nb->grad[oc] += s;
                    }
                }
            }
        });
}

inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, std::size_t stride = 1,
                               std::size_t pad = 0) {
    return conv_transpose2d(x, w, Tensor(), stride, pad);
}

// ---------------------------------------------------------------------------
// normalization / activation over grids

// parameter-free group normalization over [N,C,H,W]
inline Tensor group_norm(const Tensor& x, std::size_t groups, double eps = 1e-5) {
    if (x.rank() != 4) fail("group_norm: expected rank-4, got " + shape_str(x.shape()));
    std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (groups == 0 || C % groups != 0) {
        fail("group_norm: channels " + std::to_string(C) + " not divisible by groups " +
             std::to_string(groups));
    }
    std::size_t cg = C / groups;
    std::size_t m = cg * H * W;
    std::vector<double> y(x.size());
    std::vector<double> istd(N * groups);
    const double* px = x.data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t g = 0; g < groups; ++g) {
            const double* base = px + (n * C + g * cg) * H * W;
            double mu = 0.0;
            for (std::size_t i = 0; i < m; ++i) mu += base[i];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                double d = base[i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(m);
            double is = 1.0 / std::sqrt(var + eps);
            istd[n * groups + g] = is;
            double* dst = y.data() + (n * C + g * cg) * H * W;
            for (std::size_t i = 0; i < m; ++i) dst[i] = (base[i] - mu) * is;
        }
    }
    auto nx = x.node();
    return detail::make_node(
        x.shape(), std::move(y), {nx}, [nx, N, groups, cg, H, W, istd](TensorNode& out) {
            nx->ensure_grad();
            std::size_t m = cg * H * W;
            double inv_m = 1.0 / static_cast<double>(m);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t g = 0; g < groups; ++g) {
                    std::size_t off = (n * (groups * cg) + g * cg) * H * W;
                    const double* dy = out.grad.data() + off;
                    const double* yv = out.values.data() + off;
                    double mean_dy = 0.0, mean_dyy = 0.0;
                    for (std::size_t i = 0; i < m; ++i) {
                        mean_dy += dy[i];
                        mean_dyy += dy[i] * yv[i];
                    }
                    mean_dy *= inv_m;
                    mean_dyy *= inv_m;
                    double is = istd[n * groups + g];
                    double* dx = nx->grad.data() + off;
                    for (std::size_t i = 0; i < m; ++i) {
                        dx[i] += is * (dy[i] - mean_dy - yv[i] * mean_dyy);
                    }
                }
            }
        });
}

// y = x * scale[c] + shift[c] broadcast over [N,C,H,W]
inline Tensor channel_affine(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    if (x.rank() != 4) fail("channel_affine: expected rank-4, got " + shape_str(x.shape()));
    std::size_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    if (scale.size() != C || shift.size() != C) {
        fail("channel_affine: scale/shift size must equal channels " + std::to_string(C));
    }
    std::vector<double> y(x.size());
    const double* px = x.data();
    const double* ps = scale.data();
    const double* pb = shift.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const double* src = px + (n * C + c) * HW;
            double* dst = y.data() + (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) dst[i] = src[i] * ps[c] + pb[c];
        }
    auto nx = x.node();
    auto ns = scale.node();
    auto nb = shift.node();
    return detail::make_node(x.shape(), std::move(y), {nx, ns, nb},
                             [nx, ns, nb, N, C, HW](TensorNode& out) {
                                 for (std::size_t n = 0; n < N; ++n)
                                     for (std::size_t c = 0; c < C; ++c) {
                                         std::size_t off = (n * C + c) * HW;
                                         const double* dy = out.grad.data() + off;
                                         if (nx->requires_grad) {
                                             nx->ensure_grad();
                                             double s = ns->values[c];
                                             double* dx = nx->grad.data() + off;
                                             for (std::size_t i = 0; i < HW; ++i) dx[i] += dy[i] * s;
                                         }
                                         if (ns->requires_grad) {
                                             ns->ensure_grad();
                                             const double* xv = nx->values.data() + off;
                                             double acc = 0.0;
                                             for (std::size_t i = 0; i < HW; ++i) acc += dy[i] * xv[i];
                                             ns->grad[c] += acc;
                                         }
                                         if (nb->requires_grad) {
                                             nb->ensure_grad();
                                             double acc = 0.0;
                                             for (std::size_t i = 0; i < HW; ++i) acc += dy[i];
                                             nb->grad[c] += acc;
                                         }
                                     }
                             });
}

// y[n,c,h,w] = x[n,c,h,w] + t[n,c]  (per-sample per-channel bias)
inline Tensor broadcast_add_nc(const Tensor& x, const Tensor& t) {
    if (x.rank() != 4 || t.rank() != 2 || t.shape()[0] != x.shape()[0] ||
        t.shape()[1] != x.shape()[1]) {
        fail("broadcast_add_nc: incompatible shapes " + shape_str(x.shape()) + " vs " +
             shape_str(t.shape()));
    }
    std::size_t N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    std::vector<double> y(x.size());
    const double* px = x.data();
    const double* pt = t.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            double b = pt[n * C + c];
            std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) y[off + i] = px[off + i] + b;
        }
    auto nx = x.node();
    auto nt = t.node();
    return detail::make_node(x.shape(), std::move(y), {nx, nt}, [nx, nt, N, C, HW](TensorNode& out) {
        if (nx->requires_grad) {
            nx->ensure_grad();
            for (std::size_t i = 0; i < out.grad.size(); ++i) nx->grad[i] += out.grad[i];
        }
        if (nt->requires_grad) {
            nt->ensure_grad();
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    std::size_t off = (n * C + c) * HW;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < HW; ++i) acc += out.grad[off + i];
                    nt->grad[n * C + c] += acc;
                }
        }
    });
}

inline Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) fail("softmax: axis out of range for " + shape_str(x.shape()));
    std::size_t len = x.shape()[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.shape()[d];
    for (std::size_t d = 0; d < axis; ++d) outer *= x.shape()[d];
    std::vector<double> y(x.size());
    const double* px = x.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * len * inner + in;
            double mx = px[base];
            for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, px[base + k * inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                double e = std::exp(px[base + k * inner] - mx);
                y[base + k * inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < len; ++k) y[base + k * inner] /= z;
        }
    }
    auto nx = x.node();
    return detail::make_node(x.shape(), std::move(y), {nx},
                             [nx, len, inner, outer](TensorNode& out) {
                                 nx->ensure_grad();
                                 for (std::size_t o = 0; o < outer; ++o)
                                     for (std::size_t in = 0; in < inner; ++in) {
                                         std::size_t base = o * len * inner + in;
                                         double dot = 0.0;
                                         for (std::size_t k = 0; k < len; ++k)
                                             dot += out.grad[base + k * inner] * out.values[base + k * inner];
                                         for (std::size_t k = 0; k < len; ++k) {
                                             std::size_t idx = base + k * inner;
                                             nx->grad[idx] += out.values[idx] * (out.grad[idx] - dot);
                                         }
                                     }
                             });
}

// ---------------------------------------------------------------------------
// resampling

inline Tensor upsample_nearest2(const Tensor& x) {
    if (x.rank() != 4) fail("upsample_nearest2: expected rank-4, got " + shape_str(x.shape()));
    std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    std::vector<double> y(N * C * 4 * H * W);
    const double* px = x.data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* src = px + nc * H * W;
        double* dst = y.data() + nc * 4 * H * W;
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
                double v = src[h * W + w];
                dst[(2 * h) * 2 * W + 2 * w] = v;
                dst[(2 * h) * 2 * W + 2 * w + 1] = v;
                dst[(2 * h + 1) * 2 * W + 2 * w] = v;
                dst[(2 * h + 1) * 2 * W + 2 * w + 1] = v;
            }
    }
    auto nx = x.node();
    return detail::make_node({N, C, 2 * H, 2 * W}, std::move(y), {nx},
                             [nx, N, C, H, W](TensorNode& out) {
                                 nx->ensure_grad();
                                 for (std::size_t nc = 0; nc < N * C; ++nc) {
                                     const double* g = out.grad.data() + nc * 4 * H * W;
                                     double* dx = nx->grad.data() + nc * H * W;
                                     for (std::size_t h = 0; h < H; ++h)
                                         for (std::size_t w = 0; w < W; ++w) {
                                             dx[h * W + w] += g[(2 * h) * 2 * W + 2 * w] +
                                                              g[(2 * h) * 2 * W + 2 * w + 1] +
                                                              g[(2 * h + 1) * 2 * W + 2 * w] +
                                                              g[(2 * h + 1) * 2 * W + 2 * w + 1];
                                         }
                                 }
                             });
}

// k x k average pooling with stride k; dims must divide exactly
inline Tensor avgpool2d(const Tensor& x, std::size_t k) {
    if (x.rank() != 4) fail("avgpool2d: expected rank-4, got " + shape_str(x.shape()));
    std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (k == 0 || H % k != 0 || W % k != 0) {
        fail("avgpool2d: dims " + shape_str(x.shape()) + " not divisible by k=" + std::to_string(k));
    }
    std::size_t OH = H / k, OW = W / k;
    double inv = 1.0 / static_cast<double>(k * k);
    std::vector<double> y(N * C * OH * OW);
    const double* px = x.data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* src = px + nc * H * W;
        double* dst = y.data() + nc * OH * OW;
        for (std::size_t oh = 0; oh < OH; ++oh)
            for (std::size_t ow = 0; ow < OW; ++ow) {
                double s = 0.0;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) s += src[(oh * k + i) * W + ow * k + j];
                dst[oh * OW + ow] = s * inv;
            }
    }
    auto nx = x.node();
    return detail::make_node({N, C, OH, OW}, std::move(y), {nx},
                             [nx, N, C, H, W, OH, OW, k, inv](TensorNode& out) {
                                 nx->ensure_grad();
                                 for (std::size_t nc = 0; nc < N * C; ++nc) {
                                     const double* g = out.grad.data() + nc * OH * OW;
                                     double* dx = nx->grad.data() + nc * H * W;
                                     for (std::size_t oh = 0; oh < OH; ++oh)
                                         for (std::size_t ow = 0; ow < OW; ++ow) {
                                             double gv = g[oh * OW + ow] * inv;
                                             for (std::size_t i = 0; i < k; ++i)
                                                 for (std::size_t j = 0; j < k; ++j)
                                                     dx[(oh * k + i) * W + ow * k + j] += gv;
                                         }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// label ops

// table [K,E], labels (batch of H x W grids) -> [N,E,H,W]; pixel (i,j) carries
// table row labels[i,j]
inline Tensor embed_labels(const Tensor& table, const std::vector<const LabelGrid*>& labels) {
    if (table.rank() != 2) fail("embed_labels: table must be rank-2, got " + shape_str(table.shape()));
    if (labels.empty()) fail("embed_labels: empty batch");
    std::size_t K = table.shape()[0], E = table.shape()[1];
    std::size_t H = labels[0]->h, W = labels[0]->w;
    std::size_t N = labels.size();
    std::vector<double> y(N * E * H * W);
    const double* pt = table.data();
    for (std::size_t n = 0; n < N; ++n) {
        const LabelGrid& g = *labels[n];
        if (g.h != H || g.w != W) fail("embed_labels: inconsistent grid sizes in batch");
        for (std::size_t i = 0; i < H * W; ++i) {
            std::uint8_t lab = g.v[i];
            if (lab >= K) {
                fail("embed_labels: label " + std::to_string(int(lab)) + " out of range [0," +
                     std::to_string(K) + ")");
            }
            for (std::size_t e = 0; e < E; ++e) y[(n * E + e) * H * W + i] = pt[lab * E + e];
        }
    }
    auto nt = table.node();
    std::vector<std::vector<std::uint8_t>> labs(N);
    for (std::size_t n = 0; n < N; ++n) labs[n] = labels[n]->v;
    return detail::make_node({N, E, H, W}, std::move(y), {nt},
                             [nt, labs, N, E, H, W](TensorNode& out) {
                                 nt->ensure_grad();
                                 for (std::size_t n = 0; n < N; ++n)
                                     for (std::size_t i = 0; i < H * W; ++i) {
                                         std::uint8_t lab = labs[n][i];
                                         for (std::size_t e = 0; e < E; ++e)
                                             nt->grad[lab * E + e] += out.grad[(n * E + e) * H * W + i];
                                     }
                             });
}

inline Tensor embed_labels(const Tensor& table, const LabelGrid& labels) {
    return embed_labels(table, std::vector<const LabelGrid*>{&labels});
}

// logits [N,K,H,W] vs target grids; mean over all pixels of -log softmax[target]
inline Tensor cross_entropy_loss(const Tensor& logits, const std::vector<const LabelGrid*>& labels) {
    if (logits.rank() != 4) fail("cross_entropy_loss: logits must be [N,K,H,W]");
    std::size_t N = logits.shape()[0], K = logits.shape()[1], H = logits.shape()[2],
                W = logits.shape()[3];
    if (labels.size() != N) fail("cross_entropy_loss: batch size mismatch");
    std::size_t HW = H * W;
    double total = 0.0;
    const double* pl = logits.data();
    std::vector<std::vector<std::uint8_t>> labs(N);
    for (std::size_t n = 0; n < N; ++n) {
        const LabelGrid& g = *labels[n];
        if (g.h != H || g.w != W) fail("cross_entropy_loss: label grid size mismatch");
        labs[n] = g.v;
        for (std::size_t i = 0; i < HW; ++i) {
            std::uint8_t lab = g.v[i];
            if (lab >= K) fail("cross_entropy_loss: label out of range");
            double mx = pl[(n * K) * HW + i];
            for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, pl[(n * K + k) * HW + i]);
            double z = 0.0;
            for (std::size_t k = 0; k < K; ++k) z += std::exp(pl[(n * K + k) * HW + i] - mx);
            total += std::log(z) + mx - pl[(n * K + lab) * HW + i];
        }
    }
    double inv = 1.0 / static_cast<double>(N * HW);
    auto nl = logits.node();
    return detail::make_node({1}, {total * inv}, {nl}, [nl, labs, N, K, HW, inv](TensorNode& out) {
        nl->ensure_grad();
        double g0 = out.grad[0] * inv;
        const double* pl = nl->values.data();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < HW; ++i) {
                double mx = pl[(n * K) * HW + i];
                for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, pl[(n * K + k) * HW + i]);
                double z = 0.0;
                for (std::size_t k = 0; k < K; ++k) z += std::exp(pl[(n * K + k) * HW + i] - mx);
                for (std::size_t k = 0; k < K; ++k) {
                    double p = std::exp(pl[(n * K + k) * HW + i] - mx) / z;
                    double delta = (labs[n][i] == k) ? 1.0 : 0.0;
                    nl->grad[(n * K + k) * HW + i] += g0 * (p - delta);
                }
            }
    });
}

inline Tensor cross_entropy_loss(const Tensor& logits, const LabelGrid& labels) {
    return cross_entropy_loss(logits, std::vector<const LabelGrid*>{&labels});
}

// ---------------------------------------------------------------------------
// composite losses

inline Tensor sum_squared_error(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return sum(mul(d, d));
}

inline Tensor mse_loss(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean(mul(d, d));
}

inline Tensor l1_loss(const Tensor& a, const Tensor& b) { return mean(abs_op(sub(a, b))); }

// ---------------------------------------------------------------------------
// operators

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }

}  // namespace vgen
