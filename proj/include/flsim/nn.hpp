#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flsim/error.hpp"
#include "flsim/rng.hpp"
#include "flsim/tensor.hpp"

namespace flsim {

inline constexpr int kNumClasses = 2;

enum class LayerKind { frame_diff, conv2d, relu, flatten, dense };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::frame_diff: return "frame_diff";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::flatten: return "flatten";
        case LayerKind::dense: return "dense";
    }
    return "?";
}

/// One layer of the stack. Only the fields of the active kind are meaningful.
/// Padding is explicit per side; there is no implicit "same" mode.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;

    // conv2d
    std::size_t in_channels = 0, out_channels = 0;
    std::size_t kernel_h = 0, kernel_w = 0;
    std::size_t stride = 1;
    std::size_t pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;

    // dense
    std::size_t in_features = 0, out_features = 0;

    static LayerSpec make_frame_diff() {
        LayerSpec s;
        s.kind = LayerKind::frame_diff;
        return s;
    }
    static LayerSpec make_conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kh,
                                 std::size_t kw, std::size_t stride, std::size_t pt,
                                 std::size_t pb, std::size_t pl, std::size_t pr) {
        LayerSpec s;
        s.kind = LayerKind::conv2d;
        s.in_channels = in_ch;
        s.out_channels = out_ch;
        s.kernel_h = kh;
        s.kernel_w = kw;
        s.stride = stride;
        s.pad_top = pt;
        s.pad_bottom = pb;
        s.pad_left = pl;
        s.pad_right = pr;
        return s;
    }
    static LayerSpec make_relu() {
        LayerSpec s;
        s.kind = LayerKind::relu;
        return s;
    }
    static LayerSpec make_flatten() {
        LayerSpec s;
        s.kind = LayerKind::flatten;
        return s;
    }
    static LayerSpec make_dense(std::size_t in_f, std::size_t out_f) {
        LayerSpec s;
        s.kind = LayerKind::dense;
        s.in_features = in_f;
        s.out_features = out_f;
        return s;
    }

    bool has_params() const {
        return kind == LayerKind::conv2d || kind == LayerKind::dense;
    }
};

/// A classification batch: inputs [n, frames, height, width] and one label in
/// {0 = NonFight, 1 = Fight} per sample.
template <typename T>
struct Batch {
    Tensor<T> inputs;
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

template <typename T>
void validate_batch(const Batch<T>& batch) {
    if (batch.inputs.rank() != 4) {
        throw ShapeError("batch inputs must have rank 4 [n, frames, height, width], got rank " +
                         std::to_string(batch.inputs.rank()));
    }
    if (batch.labels.empty()) throw ShapeError("batch must contain at least one sample");
    if (batch.inputs.dim(0) != batch.labels.size()) {
        throw ShapeError("batch has " + std::to_string(batch.inputs.dim(0)) + " inputs but " +
                         std::to_string(batch.labels.size()) + " labels");
    }
    for (int l : batch.labels) {
        if (l < 0 || l >= kNumClasses) {
            throw ShapeError("label " + std::to_string(l) + " outside {0, 1}");
        }
    }
}

namespace detail {

inline std::ptrdiff_t floor_div(std::ptrdiff_t a, std::ptrdiff_t b) {
    std::ptrdiff_t q = a / b;
    std::ptrdiff_t r = a % b;
    return (r != 0 && r < 0) ? q - 1 : q;
}

inline std::ptrdiff_t ceil_div(std::ptrdiff_t a, std::ptrdiff_t b) {
    return -floor_div(-a, b);
}

inline ShapeError layer_error(std::size_t layer_index, LayerKind kind, const std::string& msg) {
    return ShapeError("layer " + std::to_string(layer_index) + " (" +
                      layer_kind_name(kind) + "): " + msg);
}

}  // namespace detail

/// Computes the per-sample activation shape after each layer and validates the
/// whole chain. Returned vector has one entry per layer boundary:
/// shapes[0] = input shape, shapes[k+1] = output of layer k. Spatial shapes are
/// [channels, height, width]; flattened shapes are [features].
inline std::vector<std::vector<std::size_t>> activation_shapes(
    const std::vector<LayerSpec>& specs, const std::vector<std::size_t>& input_shape) {
    std::vector<std::vector<std::size_t>> shapes;
    shapes.reserve(specs.size() + 1);
    shapes.push_back(input_shape);
    std::vector<std::size_t> cur = input_shape;
    for (std::size_t k = 0; k < specs.size(); ++k) {
        const LayerSpec& L = specs[k];
        switch (L.kind) {
            case LayerKind::frame_diff: {
                if (k != 0) {
                    throw detail::layer_error(k, L.kind, "only allowed as the first layer");
                }
                if (cur.size() != 3) {
                    throw detail::layer_error(k, L.kind, "requires [frames, height, width] input");
                }
                if (cur[0] < 2) {
                    throw detail::layer_error(
                        k, L.kind, "needs at least 2 frames, got " + std::to_string(cur[0]));
                }
                cur = {cur[0] - 1, cur[1], cur[2]};
                break;
            }
            case LayerKind::conv2d: {
                if (cur.size() != 3) {
                    throw detail::layer_error(k, L.kind, "requires [channels, height, width] input");
                }
                if (cur[0] != L.in_channels) {
                    throw detail::layer_error(k, L.kind,
                                              "expects " + std::to_string(L.in_channels) +
                                                  " input channels, got " + std::to_string(cur[0]));
                }
                if (L.stride == 0 || L.kernel_h == 0 || L.kernel_w == 0 || L.out_channels == 0) {
                    throw detail::layer_error(k, L.kind, "kernel, stride and channels must be >= 1");
                }
                std::size_t padded_h = cur[1] + L.pad_top + L.pad_bottom;
                std::size_t padded_w = cur[2] + L.pad_left + L.pad_right;
                if (padded_h < L.kernel_h || padded_w < L.kernel_w) {
                    throw detail::layer_error(k, L.kind, "kernel larger than padded input");
                }
                std::size_t oh = (padded_h - L.kernel_h) / L.stride + 1;
                std::size_t ow = (padded_w - L.kernel_w) / L.stride + 1;
                cur = {L.out_channels, oh, ow};
                break;
            }
            case LayerKind::relu:
                break;
            case LayerKind::flatten: {
                if (cur.size() != 3) {
                    throw detail::layer_error(k, L.kind, "requires [channels, height, width] input");
                }
                cur = {cur[0] * cur[1] * cur[2]};
                break;
            }
            case LayerKind::dense: {
                if (cur.size() != 1) {
                    throw detail::layer_error(k, L.kind, "requires flattened input");
                }
                if (cur[0] != L.in_features) {
                    throw detail::layer_error(k, L.kind,
                                              "expects " + std::to_string(L.in_features) +
                                                  " input features, got " + std::to_string(cur[0]));
                }
                if (L.out_features == 0) {
                    throw detail::layer_error(k, L.kind, "out_features must be >= 1");
                }
                cur = {L.out_features};
                break;
            }
        }
        shapes.push_back(cur);
    }
    for (std::size_t k = 1; k < specs.size(); ++k) {
        if (specs[k].kind == LayerKind::frame_diff) {
            throw detail::layer_error(k, specs[k].kind, "only allowed as the first layer");
        }
    }
    return shapes;
}

/// Parameter tensor shapes in layer order: weight then bias for every conv2d
/// and dense layer.
inline std::vector<std::vector<std::size_t>> param_shapes(const std::vector<LayerSpec>& specs) {
    std::vector<std::vector<std::size_t>> out;
    for (const LayerSpec& L : specs) {
        if (L.kind == LayerKind::conv2d) {
            out.push_back({L.out_channels, L.in_channels, L.kernel_h, L.kernel_w});
            out.push_back({L.out_channels});
        } else if (L.kind == LayerKind::dense) {
            out.push_back({L.out_features, L.in_features});
            out.push_back({L.out_features});
        }
    }
    return out;
}

/// Glorot-uniform weights, zero biases, all draws from one seeded stream.
template <typename T>
std::vector<Tensor<T>> init_params(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
    std::vector<Tensor<T>> params;
    Rng rng(seed);
    for (const LayerSpec& L : specs) {
        if (!L.has_params()) continue;
        std::size_t fan_in, fan_out;
        std::vector<std::size_t> wdims, bdims;
        if (L.kind == LayerKind::conv2d) {
            fan_in = L.in_channels * L.kernel_h * L.kernel_w;
            fan_out = L.out_channels * L.kernel_h * L.kernel_w;
            wdims = {L.out_channels, L.in_channels, L.kernel_h, L.kernel_w};
            bdims = {L.out_channels};
        } else {
            fan_in = L.in_features;
            fan_out = L.out_features;
            wdims = {L.out_features, L.in_features};
            bdims = {L.out_features};
        }
        double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Tensor<T> w(wdims);
        for (std::size_t i = 0; i < w.size(); ++i) {
            w[i] = static_cast<T>(rng.uniform(-s, s));
        }
        params.push_back(std::move(w));
        params.emplace_back(bdims);
    }
    return params;
}

template <typename T>
void validate_params(const std::vector<LayerSpec>& specs, const std::vector<Tensor<T>>& params) {
    auto shapes = param_shapes(specs);
    if (shapes.size() != params.size()) {
        throw ShapeError("expected " + std::to_string(shapes.size()) + " parameter tensors, got " +
                         std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (params[i].dims() != shapes[i]) {
            throw ShapeError("parameter tensor " + std::to_string(i) + " has wrong shape");
        }
    }
}

/// out[i, t] = chunk[i, t+1] - chunk[i, t].
template <typename T>
Tensor<T> frame_diff(const Tensor<T>& chunk) {
    if (chunk.rank() != 4) {
        throw ShapeError("frame_diff expects [n, frames, height, width], got rank " +
                         std::to_string(chunk.rank()));
    }
    std::size_t n = chunk.dim(0), f = chunk.dim(1), h = chunk.dim(2), w = chunk.dim(3);
    if (f < 2) {
        throw ShapeError("frame_diff needs at least 2 frames, got " + std::to_string(f));
    }
    Tensor<T> out({n, f - 1, h, w});
    const std::size_t plane = h * w;
    const T* src = chunk.data();
    T* dst = out.data();
    for (std::size_t i = 0; i < n; ++i) {
        const T* s0 = src + i * f * plane;
        T* d0 = dst + i * (f - 1) * plane;
        for (std::size_t t = 0; t + 1 < f; ++t) {
            const T* a = s0 + t * plane;
            const T* b = s0 + (t + 1) * plane;
            T* d = d0 + t * plane;
            for (std::size_t p = 0; p < plane; ++p) d[p] = b[p] - a[p];
        }
    }
    return out;
}

namespace detail {

// Fast paths for the 3x3, pad-1 convolutions both architectures use. The
// three kernel taps of a row are fused into one pass so the inner loops are
// long enough to vectorize.

template <typename T, int S>
void conv3x3_pad1_forward(const T* __restrict__ x, std::size_t n, std::size_t c, std::size_t h,
                          std::size_t w, std::size_t oc_n, const T* __restrict__ wt,
                          const T* __restrict__ bias, T* __restrict__ y, std::size_t oh_n,
                          std::size_t ow_n) {
    const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
    const std::ptrdiff_t OH = static_cast<std::ptrdiff_t>(oh_n);
    const std::ptrdiff_t OW = static_cast<std::ptrdiff_t>(ow_n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t oc = 0; oc < oc_n; ++oc) {
            T* __restrict__ ybase = y + ((i * oc_n + oc) * oh_n) * ow_n;
            const T bv = bias[oc];
            for (std::ptrdiff_t p = 0; p < OH * OW; ++p) ybase[p] = bv;
            for (std::size_t ic = 0; ic < c; ++ic) {
                const T* __restrict__ xplane = x + ((i * c + ic) * h) * w;
                const T* __restrict__ taps = wt + ((oc * c + ic) * 3) * 3;
                for (int kh = 0; kh < 3; ++kh) {
                    const std::ptrdiff_t dh = kh - 1;
                    const T w0 = taps[kh * 3], w1 = taps[kh * 3 + 1], w2 = taps[kh * 3 + 2];
                    const std::ptrdiff_t oh_lo = dh < 0 ? 1 : 0;
                    const std::ptrdiff_t oh_hi =
                        std::min<std::ptrdiff_t>(OH - 1, (H - 1 - dh) / S);
                    for (std::ptrdiff_t oh = oh_lo; oh <= oh_hi; ++oh) {
                        const T* __restrict__ xrow = xplane + (oh * S + dh) * w;
                        T* __restrict__ yrow = ybase + oh * OW;
                        if constexpr (S == 1) {
                            yrow[0] += w1 * xrow[0] + w2 * xrow[1];
                            for (std::ptrdiff_t ow = 1; ow < OW - 1; ++ow) {
                                yrow[ow] +=
                                    w0 * xrow[ow - 1] + w1 * xrow[ow] + w2 * xrow[ow + 1];
                            }
                            yrow[OW - 1] += w0 * xrow[OW - 2] + w1 * xrow[OW - 1];
                        } else {
                            yrow[0] += w1 * xrow[0] + w2 * xrow[1];
                            for (std::ptrdiff_t ow = 1; ow < OW; ++ow) {
                                const T* __restrict__ xp = xrow + 2 * ow - 1;
                                yrow[ow] += w0 * xp[0] + w1 * xp[1] + w2 * xp[2];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T, int S>
void conv3x3_pad1_backward(const T* __restrict__ x, const T* __restrict__ dy, std::size_t n,
                           std::size_t c, std::size_t h, std::size_t w, std::size_t oc_n,
                           const T* __restrict__ wt, std::size_t oh_n, std::size_t ow_n,
                           T* __restrict__ dwt, T* __restrict__ dbias, T* __restrict__ dx) {
    const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
    const std::ptrdiff_t OH = static_cast<std::ptrdiff_t>(oh_n);
    const std::ptrdiff_t OW = static_cast<std::ptrdiff_t>(ow_n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t oc = 0; oc < oc_n; ++oc) {
            const T* __restrict__ dybase = dy + ((i * oc_n + oc) * oh_n) * ow_n;
            T dbacc = 0;
            for (std::ptrdiff_t p = 0; p < OH * OW; ++p) dbacc += dybase[p];
            dbias[oc] += dbacc;
            for (std::size_t ic = 0; ic < c; ++ic) {
                const T* __restrict__ xplane = x + ((i * c + ic) * h) * w;
                T* __restrict__ dxplane = dx ? dx + ((i * c + ic) * h) * w : nullptr;
                const T* __restrict__ taps = wt + ((oc * c + ic) * 3) * 3;
                T* __restrict__ dtaps = dwt + ((oc * c + ic) * 3) * 3;
                for (int kh = 0; kh < 3; ++kh) {
                    const std::ptrdiff_t dh = kh - 1;
                    const T w0 = taps[kh * 3], w1 = taps[kh * 3 + 1], w2 = taps[kh * 3 + 2];
                    T a0 = 0, a1 = 0, a2 = 0;
                    const std::ptrdiff_t oh_lo = dh < 0 ? 1 : 0;
                    const std::ptrdiff_t oh_hi =
                        std::min<std::ptrdiff_t>(OH - 1, (H - 1 - dh) / S);
                    for (std::ptrdiff_t oh = oh_lo; oh <= oh_hi; ++oh) {
                        const T* __restrict__ xrow = xplane + (oh * S + dh) * w;
                        const T* __restrict__ dyrow = dybase + oh * OW;
                        if constexpr (S == 1) {
                            {  // ow = 0: taps 1 and 2 only
                                const T d = dyrow[0];
                                a1 += d * xrow[0];
                                a2 += d * xrow[1];
                            }
                            for (std::ptrdiff_t ow = 1; ow < OW - 1; ++ow) {
                                const T d = dyrow[ow];
                                a0 += d * xrow[ow - 1];
                                a1 += d * xrow[ow];
                                a2 += d * xrow[ow + 1];
                            }
                            {
                                const T d = dyrow[OW - 1];
                                a0 += d * xrow[OW - 2];
                                a1 += d * xrow[OW - 1];
                            }
                            if (dxplane) {
                                // reversed stencil: each input column gathers
                                // from the output row, so writes never overlap
                                T* __restrict__ dxrow = dxplane + (oh * S + dh) * w;
                                dxrow[0] += w1 * dyrow[0] + w0 * dyrow[1];
                                for (std::ptrdiff_t iw = 1; iw < OW - 1; ++iw) {
                                    dxrow[iw] += w2 * dyrow[iw - 1] + w1 * dyrow[iw] +
                                                 w0 * dyrow[iw + 1];
                                }
                                dxrow[OW - 1] += w2 * dyrow[OW - 2] + w1 * dyrow[OW - 1];
                            }
                        } else {
                            {
                                const T d = dyrow[0];
                                a1 += d * xrow[0];
                                a2 += d * xrow[1];
                            }
                            for (std::ptrdiff_t ow = 1; ow < OW; ++ow) {
                                const T d = dyrow[ow];
                                const T* __restrict__ xp = xrow + 2 * ow - 1;
                                a0 += d * xp[0];
                                a1 += d * xp[1];
                                a2 += d * xp[2];
                            }
                            if (dxplane) {
                                T* __restrict__ dxrow = dxplane + (oh * S + dh) * w;
                                // even input columns take the center tap only
                                for (std::ptrdiff_t m = 0; m < OW; ++m) {
                                    dxrow[2 * m] += w1 * dyrow[m];
                                }
                                // odd columns take the two edge taps
                                for (std::ptrdiff_t m = 0; m + 1 < OW; ++m) {
                                    dxrow[2 * m + 1] += w2 * dyrow[m] + w0 * dyrow[m + 1];
                                }
                                dxrow[2 * OW - 1] += w2 * dyrow[OW - 1];
                            }
                        }
                    }
                    dtaps[kh * 3] += a0;
                    dtaps[kh * 3 + 1] += a1;
                    dtaps[kh * 3 + 2] += a2;
                }
            }
        }
    }
}

template <typename T>
bool conv3x3_pad1_applies(const LayerSpec& L, std::size_t h, std::size_t w) {
    if (L.kernel_h != 3 || L.kernel_w != 3) return false;
    if (L.pad_top != 1 || L.pad_bottom != 1 || L.pad_left != 1 || L.pad_right != 1) return false;
    if (L.stride == 1) return h >= 2 && w >= 2;
    if (L.stride == 2) return h >= 4 && w >= 4 && h % 2 == 0 && w % 2 == 0;
    return false;
}

template <typename T>
void conv2d_forward(const T* __restrict__ x, std::size_t n, std::size_t c, std::size_t h,
                    std::size_t w, const LayerSpec& L, const T* __restrict__ wt,
                    const T* __restrict__ bias, T* __restrict__ y, std::size_t oh_n,
                    std::size_t ow_n) {
    if (conv3x3_pad1_applies<T>(L, h, w)) {
        if (L.stride == 1) {
            conv3x3_pad1_forward<T, 1>(x, n, c, h, w, L.out_channels, wt, bias, y, oh_n, ow_n);
        } else {
            conv3x3_pad1_forward<T, 2>(x, n, c, h, w, L.out_channels, wt, bias, y, oh_n, ow_n);
        }
        return;
    }
    const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
    const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(w);
    const std::ptrdiff_t S = static_cast<std::ptrdiff_t>(L.stride);
    const std::ptrdiff_t PT = static_cast<std::ptrdiff_t>(L.pad_top);
    const std::ptrdiff_t PL = static_cast<std::ptrdiff_t>(L.pad_left);
    const std::ptrdiff_t OH = static_cast<std::ptrdiff_t>(oh_n);
    const std::ptrdiff_t OW = static_cast<std::ptrdiff_t>(ow_n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t oc = 0; oc < L.out_channels; ++oc) {
            T* __restrict__ ybase = y + ((i * L.out_channels + oc) * oh_n) * ow_n;
            const T bv = bias[oc];
            for (std::ptrdiff_t p = 0; p < OH * OW; ++p) ybase[p] = bv;
            for (std::size_t ic = 0; ic < c; ++ic) {
                const T* __restrict__ xplane = x + ((i * c + ic) * h) * w;
                for (std::size_t kh = 0; kh < L.kernel_h; ++kh) {
                    const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - PT;
                    const std::ptrdiff_t oh_lo = std::max<std::ptrdiff_t>(0, ceil_div(-dh, S));
                    const std::ptrdiff_t oh_hi = std::min(OH - 1, floor_div(H - 1 - dh, S));
                    for (std::size_t kw = 0; kw < L.kernel_w; ++kw) {
                        const T wv =
                            wt[((oc * c + ic) * L.kernel_h + kh) * L.kernel_w + kw];
                        const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - PL;
                        const std::ptrdiff_t ow_lo = std::max<std::ptrdiff_t>(0, ceil_div(-dw, S));
                        const std::ptrdiff_t ow_hi = std::min(OW - 1, floor_div(W - 1 - dw, S));
                        for (std::ptrdiff_t oh = oh_lo; oh <= oh_hi; ++oh) {
                            const T* __restrict__ xrow = xplane + (oh * S + dh) * W;
                            T* __restrict__ yrow = ybase + oh * OW;
                            if (S == 1) {
                                for (std::ptrdiff_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                    yrow[ow] += wv * xrow[ow + dw];
                                }
                            } else {
                                for (std::ptrdiff_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                    yrow[ow] += wv * xrow[ow * S + dw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates dW/db and, when dx != nullptr, the input gradient (dx must be
/// zero-initialized by the caller).
template <typename T>
void conv2d_backward(const T* __restrict__ x, const T* __restrict__ dy, std::size_t n,
                     std::size_t c, std::size_t h, std::size_t w, const LayerSpec& L,
                     const T* __restrict__ wt, std::size_t oh_n, std::size_t ow_n,
                     T* __restrict__ dwt, T* __restrict__ dbias, T* __restrict__ dx) {
    if (conv3x3_pad1_applies<T>(L, h, w)) {
        if (L.stride == 1) {
            conv3x3_pad1_backward<T, 1>(x, dy, n, c, h, w, L.out_channels, wt, oh_n, ow_n, dwt,
                                        dbias, dx);
        } else {
            conv3x3_pad1_backward<T, 2>(x, dy, n, c, h, w, L.out_channels, wt, oh_n, ow_n, dwt,
                                        dbias, dx);
        }
        return;
    }
    const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
    const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(w);
    const std::ptrdiff_t S = static_cast<std::ptrdiff_t>(L.stride);
    const std::ptrdiff_t PT = static_cast<std::ptrdiff_t>(L.pad_top);
    const std::ptrdiff_t PL = static_cast<std::ptrdiff_t>(L.pad_left);
    const std::ptrdiff_t OH = static_cast<std::ptrdiff_t>(oh_n);
    const std::ptrdiff_t OW = static_cast<std::ptrdiff_t>(ow_n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t oc = 0; oc < L.out_channels; ++oc) {
            const T* dybase = dy + ((i * L.out_channels + oc) * oh_n) * ow_n;
            T dbacc = 0;
            for (std::ptrdiff_t p = 0; p < OH * OW; ++p) dbacc += dybase[p];
            dbias[oc] += dbacc;
            for (std::size_t ic = 0; ic < c; ++ic) {
                const T* xplane = x + ((i * c + ic) * h) * w;
                T* dxplane = dx ? dx + ((i * c + ic) * h) * w : nullptr;
                for (std::size_t kh = 0; kh < L.kernel_h; ++kh) {
                    const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - PT;
                    const std::ptrdiff_t oh_lo = std::max<std::ptrdiff_t>(0, ceil_div(-dh, S));
                    const std::ptrdiff_t oh_hi = std::min(OH - 1, floor_div(H - 1 - dh, S));
                    for (std::size_t kw = 0; kw < L.kernel_w; ++kw) {
                        const std::size_t widx =
                            ((oc * c + ic) * L.kernel_h + kh) * L.kernel_w + kw;
                        const T wv = wt[widx];
                        const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - PL;
                        const std::ptrdiff_t ow_lo = std::max<std::ptrdiff_t>(0, ceil_div(-dw, S));
                        const std::ptrdiff_t ow_hi = std::min(OW - 1, floor_div(W - 1 - dw, S));
                        T wacc = 0;
                        for (std::ptrdiff_t oh = oh_lo; oh <= oh_hi; ++oh) {
                            const T* __restrict__ xrow = xplane + (oh * S + dh) * W;
                            const T* __restrict__ dyrow = dybase + oh * OW;
                            if (dxplane) {
                                T* __restrict__ dxrow = dxplane + (oh * S + dh) * W;
                                if (S == 1) {
                                    for (std::ptrdiff_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                        const T d = dyrow[ow];
                                        wacc += d * xrow[ow + dw];
                                        dxrow[ow + dw] += d * wv;
                                    }
                                } else {
                                    for (std::ptrdiff_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                        const T d = dyrow[ow];
                                        wacc += d * xrow[ow * S + dw];
                                        dxrow[ow * S + dw] += d * wv;
                                    }
                                }
                            } else {
                                if (S == 1) {
                                    for (std::ptrdiff_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                        wacc += dyrow[ow] * xrow[ow + dw];
                                    }
                                } else {
                                    for (std::ptrdiff_t ow = ow_lo; ow <= ow_hi; ++ow) {
                                        wacc += dyrow[ow] * xrow[ow * S + dw];
                                    }
                                }
                            }
                        }
                        dwt[widx] += wacc;
                    }
                }
            }
        }
    }
}

template <typename T>
void dense_forward(const T* __restrict__ x, std::size_t n, std::size_t f,
                   const T* __restrict__ wt, const T* __restrict__ bias, std::size_t o,
                   T* __restrict__ y) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* __restrict__ xi = x + i * f;
        T* __restrict__ yi = y + i * o;
        for (std::size_t j = 0; j < o; ++j) {
            const T* __restrict__ wj = wt + j * f;
            T acc = bias[j];
            for (std::size_t k = 0; k < f; ++k) acc += wj[k] * xi[k];
            yi[j] = acc;
        }
    }
}

template <typename T>
void dense_backward(const T* __restrict__ x, const T* __restrict__ dy, std::size_t n,
                    std::size_t f, const T* __restrict__ wt, std::size_t o, T* __restrict__ dwt,
                    T* __restrict__ dbias, T* __restrict__ dx) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* __restrict__ xi = x + i * f;
        const T* __restrict__ dyi = dy + i * o;
        for (std::size_t j = 0; j < o; ++j) {
            const T d = dyi[j];
            dbias[j] += d;
            T* __restrict__ dwj = dwt + j * f;
            for (std::size_t k = 0; k < f; ++k) dwj[k] += d * xi[k];
        }
        if (dx) {
            T* __restrict__ dxi = dx + i * f;
            for (std::size_t j = 0; j < o; ++j) {
                const T d = dyi[j];
                const T* __restrict__ wj = wt + j * f;
                for (std::size_t k = 0; k < f; ++k) dxi[k] += d * wj[k];
            }
        }
    }
}

template <typename T>
std::uint64_t params_fingerprint(const std::vector<Tensor<T>>& params) {
    std::uint64_t h = 14695981039346656037ull;
    for (const auto& p : params) {
        h = fnv1a64_bytes(p.data(), p.size() * sizeof(T), h);
    }
    return h;
}

}  // namespace detail

/// Everything backward needs: the layer stack, the parameters the forward pass
/// ran with (pointer plus fingerprint to detect mutation), and all intermediate
/// activations. acts[k] is the input of layer k; acts.back() is the logits.
template <typename T>
struct ForwardCache {
    std::vector<LayerSpec> specs;
    const std::vector<Tensor<T>>* params = nullptr;
    std::uint64_t params_fingerprint = 0;
    std::vector<Tensor<T>> acts;

    const Tensor<T>& logits() const { return acts.back(); }
    std::size_t batch_size() const { return acts.front().dim(0); }
};

namespace detail {

/// When set, relu layers apply these recorded gates instead of comparing
/// against zero. Used by grad_check so finite-difference probes stay on the
/// differentiable piece the analytic gradient describes.
template <typename T>
struct ReluGateOverride {
    const std::vector<std::vector<std::uint8_t>>* gates = nullptr;  // one entry per relu layer
};

}  // namespace detail

template <typename T>
ForwardCache<T> forward(const std::vector<Tensor<T>>& params, const std::vector<LayerSpec>& specs,
                        const Batch<T>& batch,
                        detail::ReluGateOverride<T> gate_override = {}) {
    validate_batch(batch);
    validate_params(specs, params);
    std::vector<std::size_t> sample_shape(batch.inputs.dims().begin() + 1,
                                          batch.inputs.dims().end());
    auto shapes = activation_shapes(specs, sample_shape);  // validates the chain
    const std::size_t n = batch.inputs.dim(0);

    ForwardCache<T> cache;
    cache.specs = specs;
    cache.params = &params;
    cache.params_fingerprint = detail::params_fingerprint(params);
    cache.acts.reserve(specs.size() + 1);
    cache.acts.push_back(batch.inputs);

    std::size_t pi = 0;
    std::size_t relu_index = 0;
    for (std::size_t k = 0; k < specs.size(); ++k) {
        const LayerSpec& L = specs[k];
        const Tensor<T>& in = cache.acts.back();
        switch (L.kind) {
            case LayerKind::frame_diff: {
                cache.acts.push_back(frame_diff(in));
                break;
            }
            case LayerKind::conv2d: {
                const auto& os = shapes[k + 1];
                Tensor<T> out({n, os[0], os[1], os[2]});
                detail::conv2d_forward(in.data(), n, in.dim(1), in.dim(2), in.dim(3), L,
                                       params[pi].data(), params[pi + 1].data(), out.data(),
                                       os[1], os[2]);
                pi += 2;
                cache.acts.push_back(std::move(out));
                break;
            }
            case LayerKind::relu: {
                Tensor<T> out(in.dims());
                const T* src = in.data();
                T* dst = out.data();
                if (gate_override.gates) {
                    const auto& gate = (*gate_override.gates)[relu_index];
                    for (std::size_t p = 0; p < in.size(); ++p) {
                        dst[p] = gate[p] ? src[p] : T{0};
                    }
                } else {
                    for (std::size_t p = 0; p < in.size(); ++p) {
                        dst[p] = src[p] > T{0} ? src[p] : T{0};
                    }
                }
                ++relu_index;
                cache.acts.push_back(std::move(out));
                break;
            }
            case LayerKind::flatten: {
                cache.acts.push_back(Tensor<T>::from_data(
                    {n, shapes[k + 1][0]},
                    std::vector<T>(in.data(), in.data() + in.size())));
                break;
            }
            case LayerKind::dense: {
                Tensor<T> out({n, L.out_features});
                detail::dense_forward(in.data(), n, L.in_features, params[pi].data(),
                                      params[pi + 1].data(), L.out_features, out.data());
                pi += 2;
                cache.acts.push_back(std::move(out));
                break;
            }
        }
    }
    return cache;
}

/// Row-wise softmax probabilities, computed against the row maximum.
template <typename T>
std::vector<double> softmax_rows(const Tensor<T>& logits) {
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::vector<double> probs(n * c);
    for (std::size_t i = 0; i < n; ++i) {
        const T* z = logits.data() + i * c;
        double m = static_cast<double>(z[0]);
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, static_cast<double>(z[j]));
        double sum = 0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(static_cast<double>(z[j]) - m);
            sum += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= sum;
    }
    return probs;
}

/// Mean over the batch of -log softmax(logits)[label], accumulated in double.
template <typename T>
double loss_softmax_ce(const Tensor<T>& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.dim(1) != static_cast<std::size_t>(kNumClasses)) {
        throw ShapeError("logits must be [n, 2]");
    }
    const std::size_t n = logits.dim(0);
    if (n != labels.size()) throw ShapeError("logits/labels size mismatch");
    if (n == 0) throw ShapeError("empty batch");
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const T* z = logits.data() + i * kNumClasses;
        for (int j = 0; j < kNumClasses; ++j) {
            if (!std::isfinite(static_cast<double>(z[j]))) {
                throw NumericError("non-finite logit at sample " + std::to_string(i));
            }
        }
        const int y = labels[i];
        if (y < 0 || y >= kNumClasses) throw ShapeError("label outside {0, 1}");
        double z0 = static_cast<double>(z[0]), z1 = static_cast<double>(z[1]);
        double m = std::max(z0, z1);
        double lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
        total += lse - static_cast<double>(z[y]);
    }
    return total / static_cast<double>(n);
}

/// Gradient of loss_softmax_ce with respect to every parameter tensor, in the
/// same order as the parameter list the forward pass used.
template <typename T>
std::vector<Tensor<T>> backward(const ForwardCache<T>& cache, const std::vector<int>& labels) {
    if (cache.params == nullptr) throw ContractError("cache was not produced by forward");
    if (detail::params_fingerprint(*cache.params) != cache.params_fingerprint) {
        throw ContractError("parameters changed since forward; cache is stale");
    }
    const std::vector<LayerSpec>& specs = cache.specs;
    const std::vector<Tensor<T>>& params = *cache.params;
    const std::size_t n = cache.batch_size();
    if (labels.size() != n) throw ShapeError("labels size does not match cached batch");

    // dLoss/dLogits = (softmax - onehot) / n
    const Tensor<T>& logits = cache.logits();
    std::vector<double> probs = softmax_rows(logits);
    Tensor<T> dcur(logits.dims());
    const double invn = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (int j = 0; j < kNumClasses; ++j) {
            double g = probs[i * kNumClasses + j] - (labels[i] == j ? 1.0 : 0.0);
            dcur[i * kNumClasses + j] = static_cast<T>(g * invn);
        }
    }

    std::vector<Tensor<T>> grads;
    grads.reserve(params.size());
    for (const auto& p : params) grads.emplace_back(p.dims());

    // Input gradients below the first parameterized layer are never used.
    std::size_t lowest_param_layer = specs.size();
    for (std::size_t k = 0; k < specs.size(); ++k) {
        if (specs[k].has_params()) {
            lowest_param_layer = k;
            break;
        }
    }

    std::size_t pi = params.size();
    for (std::size_t k = specs.size(); k-- > 0;) {
        const LayerSpec& L = specs[k];
        const Tensor<T>& in = cache.acts[k];
        const bool need_dx = k > lowest_param_layer;
        switch (L.kind) {
            case LayerKind::frame_diff: {
                if (!need_dx) {
                    dcur = Tensor<T>();
                    break;
                }
                Tensor<T> dx(in.dims());
                const std::size_t f = in.dim(1);
                const std::size_t plane = in.dim(2) * in.dim(3);
                for (std::size_t i = 0; i < n; ++i) {
                    T* d0 = dx.data() + i * f * plane;
                    const T* g0 = dcur.data() + i * (f - 1) * plane;
                    for (std::size_t t = 0; t < f; ++t) {
                        T* d = d0 + t * plane;
                        const T* gprev = t > 0 ? g0 + (t - 1) * plane : nullptr;
                        const T* gcur = t + 1 < f ? g0 + t * plane : nullptr;
                        for (std::size_t p = 0; p < plane; ++p) {
                            T v = 0;
                            if (gprev) v += gprev[p];
                            if (gcur) v -= gcur[p];
                            d[p] = v;
                        }
                    }
                }
                dcur = std::move(dx);
                break;
            }
            case LayerKind::conv2d: {
                pi -= 2;
                Tensor<T> dx;
                if (need_dx) dx = Tensor<T>(in.dims());
                detail::conv2d_backward(in.data(), dcur.data(), n, in.dim(1), in.dim(2),
                                        in.dim(3), L, params[pi].data(), dcur.dim(2),
                                        dcur.dim(3), grads[pi].data(), grads[pi + 1].data(),
                                        need_dx ? dx.data() : nullptr);
                dcur = std::move(dx);
                break;
            }
            case LayerKind::relu: {
                if (!need_dx) {
                    dcur = Tensor<T>();
                    break;
                }
                Tensor<T> dx(in.dims());
                const T* pre = in.data();
                const T* g = dcur.data();
                T* d = dx.data();
                for (std::size_t p = 0; p < in.size(); ++p) {
                    d[p] = pre[p] > T{0} ? g[p] : T{0};
                }
                dcur = std::move(dx);
                break;
            }
            case LayerKind::flatten: {
                if (!need_dx) {
                    dcur = Tensor<T>();
                    break;
                }
                dcur = Tensor<T>::from_data(
                    in.dims(), std::vector<T>(dcur.data(), dcur.data() + dcur.size()));
                break;
            }
            case LayerKind::dense: {
                pi -= 2;
                Tensor<T> dx;
                if (need_dx) dx = Tensor<T>(in.dims());
                detail::dense_backward(in.data(), dcur.data(), n, L.in_features,
                                       params[pi].data(), L.out_features, grads[pi].data(),
                                       grads[pi + 1].data(), need_dx ? dx.data() : nullptr);
                dcur = std::move(dx);
                break;
            }
        }
    }
    return grads;
}

/// theta' = theta - lr * g, elementwise.
template <typename T>
void sgd_step_inplace(std::vector<Tensor<T>>& params, const std::vector<Tensor<T>>& grads,
                      double lr) {
    if (params.size() != grads.size()) {
        throw ShapeError("parameter/gradient tensor counts differ");
    }
    const T lrt = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].same_shape(grads[i])) {
            throw ShapeError("parameter/gradient shape mismatch at tensor " + std::to_string(i));
        }
        T* p = params[i].data();
        const T* g = grads[i].data();
        for (std::size_t j = 0; j < params[i].size(); ++j) p[j] -= lrt * g[j];
    }
}

template <typename T>
std::vector<Tensor<T>> sgd_step(std::vector<Tensor<T>> params, const std::vector<Tensor<T>>& grads,
                                double lr) {
    sgd_step_inplace(params, grads, lr);
    return params;
}

// --- flat coordinate helpers over a parameter list ---

template <typename T>
std::size_t flat_param_count(const std::vector<Tensor<T>>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
}

template <typename T>
T get_flat(const std::vector<Tensor<T>>& params, std::size_t flat) {
    for (const auto& p : params) {
        if (flat < p.size()) return p[flat];
        flat -= p.size();
    }
    throw ShapeError("flat parameter index out of range");
}

template <typename T>
void set_flat(std::vector<Tensor<T>>& params, std::size_t flat, T v) {
    for (auto& p : params) {
        if (flat < p.size()) {
            p[flat] = v;
            return;
        }
        flat -= p.size();
    }
    throw ShapeError("flat parameter index out of range");
}

/// Central difference (f(x+eps e_i) - f(x-eps e_i)) / (2 eps) of an arbitrary
/// scalar function of the parameter list. Restores the coordinate afterwards.
template <typename T, typename LossFn>
double central_difference(LossFn&& loss, std::vector<Tensor<T>>& params, std::size_t flat,
                          double eps) {
    const T orig = get_flat(params, flat);
    set_flat(params, flat, static_cast<T>(static_cast<double>(orig) + eps));
    const double fp = loss(params);
    set_flat(params, flat, static_cast<T>(static_cast<double>(orig) - eps));
    const double fm = loss(params);
    set_flat(params, flat, orig);
    return (fp - fm) / (2.0 * eps);
}

struct GradReport {
    double max_rel_err = 0;
    std::size_t worst_param_index = 0;
    double analytic = 0;
    double numeric = 0;
};

/// Compares analytic gradients against central differences on all bias
/// coordinates plus an evenly strided sample of at most 200 weight
/// coordinates. Requires the 64-bit element type.
///
/// The probes hold the relu gates of the unperturbed forward pass fixed so the
/// difference quotient measures the same differentiable piece the analytic
/// gradient describes; otherwise any preactivation within eps of zero turns
/// the quotient into noise.
template <typename T>
GradReport grad_check(const std::vector<LayerSpec>& specs, const std::vector<Tensor<T>>& params,
                      const Batch<T>& batch, double eps) {
    if constexpr (!std::is_same_v<T, double>) {
        throw PrecisionError("grad_check requires the 64-bit element type");
    } else {
        constexpr double kFloorGuard = 1e-8;
        constexpr std::size_t kMaxWeightCoords = 200;

        auto cache = forward(params, specs, batch);
        auto analytic = backward(cache, batch.labels);

        std::vector<std::vector<std::uint8_t>> gates;
        for (std::size_t k = 0; k < specs.size(); ++k) {
            if (specs[k].kind != LayerKind::relu) continue;
            const Tensor<T>& pre = cache.acts[k];
            std::vector<std::uint8_t> gate(pre.size());
            for (std::size_t p = 0; p < pre.size(); ++p) gate[p] = pre[p] > T{0} ? 1 : 0;
            gates.push_back(std::move(gate));
        }

        // Global flat offsets of every tensor; even tensor positions are
        // weights, odd ones biases (param_shapes emits weight, bias pairs).
        std::vector<std::size_t> offsets(params.size() + 1, 0);
        for (std::size_t i = 0; i < params.size(); ++i) {
            offsets[i + 1] = offsets[i] + params[i].size();
        }

        std::vector<std::size_t> coords;
        std::vector<std::size_t> weight_flats;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (i % 2 == 1) {
                for (std::size_t j = 0; j < params[i].size(); ++j) {
                    coords.push_back(offsets[i] + j);
                }
            } else {
                for (std::size_t j = 0; j < params[i].size(); ++j) {
                    weight_flats.push_back(offsets[i] + j);
                }
            }
        }
        if (weight_flats.size() <= kMaxWeightCoords) {
            coords.insert(coords.end(), weight_flats.begin(), weight_flats.end());
        } else {
            for (std::size_t k = 0; k < kMaxWeightCoords; ++k) {
                coords.push_back(weight_flats[k * weight_flats.size() / kMaxWeightCoords]);
            }
        }

        detail::ReluGateOverride<T> frozen{&gates};
        auto loss_at = [&](const std::vector<Tensor<T>>& p) {
            return loss_softmax_ce(forward(p, specs, batch, frozen).logits(), batch.labels);
        };

        std::vector<Tensor<T>> work = params;
        std::vector<double> analytic_flat;
        analytic_flat.reserve(flat_param_count(analytic));
        for (const auto& g : analytic) {
            analytic_flat.insert(analytic_flat.end(), g.data(), g.data() + g.size());
        }

        GradReport report;
        for (std::size_t flat : coords) {
            const double num = central_difference(loss_at, work, flat, eps);
            const double ana = analytic_flat[flat];
            const double rel =
                std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), kFloorGuard});
            if (rel >= report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param_index = flat;
                report.analytic = ana;
                report.numeric = num;
            }
        }
        return report;
    }
}

}  // namespace flsim
