#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "sac/error.hpp"
#include "sac/rng.hpp"
#include "sac/tensor.hpp"

namespace sac {

// ---------------------------------------------------------------------------
// Scalar losses
// ---------------------------------------------------------------------------

// Temperature softmax with max-subtraction. T=1 is the ordinary softmax.
template <typename T>
TensorT<T> softmax_t(const TensorT<T>& logits, double temp) {
    if (temp <= 0.0) throw invalid_input_error("softmax_t: temperature must be > 0");
    if (logits.rank() != 1 || logits.size() < 2)
        throw invalid_input_error("softmax_t: expected a logit vector of length >= 2");
    logits.require_finite("softmax_t");
    TensorT<T> out(logits.shape);
    double mx = -1e300;
    for (std::size_t i = 0; i < logits.size(); ++i)
        mx = std::max(mx, static_cast<double>(logits[i]));
    double sum = 0.0;
    std::vector<double> e(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        e[i] = std::exp((static_cast<double>(logits[i]) - mx) / temp);
        sum += e[i];
    }
    for (std::size_t i = 0; i < logits.size(); ++i)
        out[i] = static_cast<T>(e[i] / sum);
    return out;
}

// -log p[label], clamped away from log(0).
template <typename T>
double cross_entropy(const TensorT<T>& probs, std::size_t label) {
    if (label >= probs.size())
        throw index_error("cross_entropy: label " + std::to_string(label) + " out of range " +
                          std::to_string(probs.size()));
    double p = static_cast<double>(probs[label]);
    return -std::log(std::max(p, 1e-12));
}

// sum_i p_i (log p_i - log q_i), accumulated in double.
template <typename T>
double kl_div(const TensorT<T>& p, const TensorT<T>& q) {
    require_same_shape(p, q, "kl_div");
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double pi = std::max(static_cast<double>(p[i]), 1e-12);
        double qi = std::max(static_cast<double>(q[i]), 1e-12);
        s += static_cast<double>(p[i]) * (std::log(pi) - std::log(qi));
    }
    return s;
}

template <typename T>
inline std::size_t argmax_row(const T* row, std::size_t k) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

enum class LayerKind { dense, conv3x3, relu, maxpool2, flatten };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv3x3: return "conv3x3";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool2: return "maxpool2";
        case LayerKind::flatten: return "flatten";
    }
    return "?";
}

// dense: in/out are feature counts. conv3x3: in/out are channel counts
// (stride 1, zero padding 1, so spatial dims are preserved).
struct LayerDef {
    LayerKind kind;
    std::size_t in = 0;
    std::size_t out = 0;
};

template <typename T>
using ParamList = std::vector<TensorT<T>>;

// Fresh parameter tensors for one layer (He-scaled normals for weights).
template <typename T>
ParamList<T> init_layer_params(const LayerDef& def, Rng& rng) {
    ParamList<T> p;
    if (def.kind == LayerKind::dense) {
        TensorT<T> w({def.out, def.in});
        double scale = std::sqrt(2.0 / static_cast<double>(def.in));
        for (auto& x : w.v) x = static_cast<T>(rng.normal() * scale);
        p.push_back(std::move(w));
        p.push_back(TensorT<T>({def.out}));
    } else if (def.kind == LayerKind::conv3x3) {
        TensorT<T> w({def.out, def.in, 3, 3});
        double scale = std::sqrt(2.0 / static_cast<double>(def.in * 9));
        for (auto& x : w.v) x = static_cast<T>(rng.normal() * scale);
        p.push_back(std::move(w));
        p.push_back(TensorT<T>({def.out}));
    }
    return p;
}

namespace detail {

template <typename T>
void check_dense(const LayerDef& def, const TensorT<T>& x, const ParamList<T>& params) {
    if (x.rank() != 2 || x.dim(1) != def.in)
        throw shape_error("dense: input " + x.shape_str() + " does not match in=" + std::to_string(def.in));
    if (params.size() != 2 || params[0].shape != std::vector<std::size_t>{def.out, def.in} ||
        params[1].shape != std::vector<std::size_t>{def.out})
        throw shape_error("dense: bad parameter shapes");
}

template <typename T>
void check_conv(const LayerDef& def, const TensorT<T>& x, const ParamList<T>& params) {
    if (x.rank() != 4 || x.dim(1) != def.in)
        throw shape_error("conv3x3: input " + x.shape_str() + " does not match in_ch=" + std::to_string(def.in));
    if (params.size() != 2 || params[0].shape != std::vector<std::size_t>{def.out, def.in, 3, 3} ||
        params[1].shape != std::vector<std::size_t>{def.out})
        throw shape_error("conv3x3: bad parameter shapes");
}

} // namespace detail

template <typename T>
TensorT<T> layer_forward(const LayerDef& def, const TensorT<T>& x, const ParamList<T>& params) {
    switch (def.kind) {
        case LayerKind::dense: {
            detail::check_dense(def, x, params);
            std::size_t n = x.dim(0), in = def.in, out = def.out;
            TensorT<T> y({n, out});
            const T* W = params[0].data();
            const T* b = params[1].data();
            for (std::size_t i = 0; i < n; ++i) {
                const T* xi = x.data() + i * in;
                T* yi = y.data() + i * out;
                for (std::size_t o = 0; o < out; ++o) {
                    const T* wr = W + o * in;
                    T acc = b[o];
                    for (std::size_t j = 0; j < in; ++j) acc += wr[j] * xi[j];
                    yi[o] = acc;
                }
            }
            return y;
        }
        case LayerKind::conv3x3: {
            detail::check_conv(def, x, params);
            std::size_t n = x.dim(0), ic = def.in, h = x.dim(2), w = x.dim(3), oc = def.out;
            TensorT<T> y({n, oc, h, w});
            const T* W = params[0].data();
            const T* b = params[1].data();
            for (std::size_t i = 0; i < n; ++i) {
                const T* xi = x.data() + i * ic * h * w;
                T* yi = y.data() + i * oc * h * w;
                for (std::size_t o = 0; o < oc; ++o) {
                    T* yo = yi + o * h * w;
                    for (std::size_t p = 0; p < h * w; ++p) yo[p] = b[o];
                    for (std::size_t c = 0; c < ic; ++c) {
                        const T* xc = xi + c * h * w;
                        const T* wk = W + (o * ic + c) * 9;
                        for (std::size_t r = 0; r < h; ++r) {
                            for (int kr = -1; kr <= 1; ++kr) {
                                std::size_t sr = r + kr;
                                if (sr >= h) continue; // unsigned wrap handles r+kr < 0
                                const T* xrow = xc + sr * w;
                                T* yrow = yo + r * w;
                                const T* wrow = wk + (kr + 1) * 3;
                                for (std::size_t cidx = 0; cidx < w; ++cidx) {
                                    T acc = T(0);
                                    if (cidx > 0) acc += wrow[0] * xrow[cidx - 1];
                                    acc += wrow[1] * xrow[cidx];
                                    if (cidx + 1 < w) acc += wrow[2] * xrow[cidx + 1];
                                    yrow[cidx] += acc;
                                }
                            }
                        }
                    }
                }
            }
            return y;
        }
        case LayerKind::relu: {
            TensorT<T> y = x;
            for (auto& v : y.v) v = v > T(0) ? v : T(0);
            return y;
        }
        case LayerKind::maxpool2: {
            if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0)
                throw shape_error("maxpool2: input " + x.shape_str() + " must be [n,c,even,even]");
            std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
            TensorT<T> y({n, c, h / 2, w / 2});
            for (std::size_t ib = 0; ib < n * c; ++ib) {
                const T* xp = x.data() + ib * h * w;
                T* yp = y.data() + ib * (h / 2) * (w / 2);
                for (std::size_t r = 0; r < h; r += 2)
                    for (std::size_t cc = 0; cc < w; cc += 2) {
                        T m = std::max(std::max(xp[r * w + cc], xp[r * w + cc + 1]),
                                       std::max(xp[(r + 1) * w + cc], xp[(r + 1) * w + cc + 1]));
                        yp[(r / 2) * (w / 2) + cc / 2] = m;
                    }
            }
            return y;
        }
        case LayerKind::flatten: {
            if (x.rank() < 2) throw shape_error("flatten: input must have a batch dim");
            TensorT<T> y = x;
            std::size_t n = x.dim(0);
            y.shape = {n, x.size() / n};
            return y;
        }
    }
    throw shape_error("layer_forward: unknown layer kind");
}

template <typename T>
struct LayerGrad {
    TensorT<T> dx;
    ParamList<T> dparams;
};

template <typename T>
LayerGrad<T> layer_backward(const LayerDef& def, const TensorT<T>& x, const ParamList<T>& params,
                            const TensorT<T>& dy) {
    LayerGrad<T> g;
    switch (def.kind) {
        case LayerKind::dense: {
            detail::check_dense(def, x, params);
            std::size_t n = x.dim(0), in = def.in, out = def.out;
            if (dy.shape != std::vector<std::size_t>{n, out}) throw shape_error("dense backward: bad dy shape");
            g.dx = TensorT<T>({n, in});
            g.dparams.emplace_back(std::vector<std::size_t>{out, in});
            g.dparams.emplace_back(std::vector<std::size_t>{out});
            const T* W = params[0].data();
            T* dW = g.dparams[0].data();
            T* db = g.dparams[1].data();
            for (std::size_t i = 0; i < n; ++i) {
                const T* xi = x.data() + i * in;
                const T* dyi = dy.data() + i * out;
                T* dxi = g.dx.data() + i * in;
                for (std::size_t o = 0; o < out; ++o) {
                    T d = dyi[o];
                    db[o] += d;
                    const T* wr = W + o * in;
                    T* dwr = dW + o * in;
                    for (std::size_t j = 0; j < in; ++j) {
                        dwr[j] += d * xi[j];
                        dxi[j] += d * wr[j];
                    }
                }
            }
            return g;
        }
        case LayerKind::conv3x3: {
            detail::check_conv(def, x, params);
            std::size_t n = x.dim(0), ic = def.in, h = x.dim(2), w = x.dim(3), oc = def.out;
            if (dy.shape != std::vector<std::size_t>{n, oc, h, w}) throw shape_error("conv backward: bad dy shape");
            g.dx = TensorT<T>({n, ic, h, w});
            g.dparams.emplace_back(std::vector<std::size_t>{oc, ic, 3, 3});
            g.dparams.emplace_back(std::vector<std::size_t>{oc});
            const T* W = params[0].data();
            T* dW = g.dparams[0].data();
            T* db = g.dparams[1].data();
            for (std::size_t i = 0; i < n; ++i) {
                const T* xi = x.data() + i * ic * h * w;
                const T* dyi = dy.data() + i * oc * h * w;
                T* dxi = g.dx.data() + i * ic * h * w;
                for (std::size_t o = 0; o < oc; ++o) {
                    const T* dyo = dyi + o * h * w;
                    for (std::size_t p = 0; p < h * w; ++p) db[o] += dyo[p];
                    for (std::size_t c = 0; c < ic; ++c) {
                        const T* xc = xi + c * h * w;
                        T* dxc = dxi + c * h * w;
                        const T* wk = W + (o * ic + c) * 9;
                        T* dwk = dW + (o * ic + c) * 9;
                        for (std::size_t r = 0; r < h; ++r) {
                            const T* dyrow = dyo + r * w;
                            for (int kr = -1; kr <= 1; ++kr) {
                                std::size_t sr = r + kr;
                                if (sr >= h) continue;
                                const T* xrow = xc + sr * w;
                                T* dxrow = dxc + sr * w;
                                const T* wrow = wk + (kr + 1) * 3;
                                T* dwrow = dwk + (kr + 1) * 3;
                                for (std::size_t cidx = 0; cidx < w; ++cidx) {
                                    T d = dyrow[cidx];
                                    if (cidx > 0) {
                                        dwrow[0] += d * xrow[cidx - 1];
                                        dxrow[cidx - 1] += d * wrow[0];
                                    }
                                    dwrow[1] += d * xrow[cidx];
                                    dxrow[cidx] += d * wrow[1];
                                    if (cidx + 1 < w) {
                                        dwrow[2] += d * xrow[cidx + 1];
                                        dxrow[cidx + 1] += d * wrow[2];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            return g;
        }
        case LayerKind::relu: {
            require_same_shape(x, dy, "relu backward");
            g.dx = dy;
            for (std::size_t i = 0; i < x.size(); ++i)
                if (x[i] <= T(0)) g.dx[i] = T(0);
            return g;
        }
        case LayerKind::maxpool2: {
            std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
            if (dy.shape != std::vector<std::size_t>{n, c, h / 2, w / 2})
                throw shape_error("maxpool2 backward: bad dy shape");
            g.dx = TensorT<T>(x.shape);
            for (std::size_t ib = 0; ib < n * c; ++ib) {
                const T* xp = x.data() + ib * h * w;
                const T* dyp = dy.data() + ib * (h / 2) * (w / 2);
                T* dxp = g.dx.data() + ib * h * w;
                for (std::size_t r = 0; r < h; r += 2)
                    for (std::size_t cc = 0; cc < w; cc += 2) {
                        // first maximum in scan order receives the gradient
                        std::size_t best = r * w + cc;
                        const std::size_t cand[4] = {r * w + cc, r * w + cc + 1, (r + 1) * w + cc,
                                                     (r + 1) * w + cc + 1};
                        for (std::size_t q = 1; q < 4; ++q)
                            if (xp[cand[q]] > xp[best]) best = cand[q];
                        dxp[best] += dyp[(r / 2) * (w / 2) + cc / 2];
                    }
            }
            return g;
        }
        case LayerKind::flatten: {
            if (dy.size() != x.size()) throw shape_error("flatten backward: size mismatch");
            g.dx = dy;
            g.dx.shape = x.shape;
            return g;
        }
    }
    throw shape_error("layer_backward: unknown layer kind");
}

// Combined convenience entry point: output, input gradient, parameter gradient.
template <typename T>
struct LayerForwardBackward {
    TensorT<T> y;
    TensorT<T> dx;
    ParamList<T> dparams;
};

template <typename T>
LayerForwardBackward<T> layer_forward_backward(const LayerDef& def, const TensorT<T>& x,
                                               const ParamList<T>& params, const TensorT<T>& dy) {
    LayerForwardBackward<T> r;
    r.y = layer_forward(def, x, params);
    auto g = layer_backward(def, x, params, dy);
    r.dx = std::move(g.dx);
    r.dparams = std::move(g.dparams);
    return r;
}

// ---------------------------------------------------------------------------
// SGD with classic momentum: v <- m*v + g ; w <- w - lr*v
// ---------------------------------------------------------------------------

template <typename T>
class SgdOptimizer {
public:
    SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {
        if (lr < 0.0) throw config_error("sgd: lr must be >= 0");
        if (momentum < 0.0 || momentum >= 1.0) throw config_error("sgd: momentum must be in [0,1)");
    }

    void step(std::vector<ParamList<T>>& params, const std::vector<ParamList<T>>& grads) {
        if (velocity_.empty()) {
            velocity_.resize(params.size());
            for (std::size_t l = 0; l < params.size(); ++l)
                for (const auto& t : params[l]) velocity_[l].emplace_back(t.shape);
        }
        for (std::size_t l = 0; l < params.size(); ++l) {
            for (std::size_t t = 0; t < params[l].size(); ++t) {
                auto& w = params[l][t];
                const auto& g = grads[l][t];
                auto& vel = velocity_[l][t];
                require_same_shape(w, g, "sgd");
                for (std::size_t i = 0; i < w.size(); ++i) {
                    vel[i] = static_cast<T>(momentum_ * vel[i] + g[i]);
                    w[i] = static_cast<T>(w[i] - lr_ * vel[i]);
                }
            }
        }
    }

private:
    double lr_;
    double momentum_;
    std::vector<ParamList<T>> velocity_;
};

} // namespace sac
