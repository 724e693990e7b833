#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "sac/data.hpp"
#include "sac/error.hpp"
#include "sac/rng.hpp"
#include "sac/tensor.hpp"

namespace sac {

struct Rect {
    std::size_t top = 0, left = 0, height = 0, width = 0;
};

struct CutMixRecord {
    Tensor mask;        // [h, w] of {0,1}; 1 keeps the first parent
    double alpha = 0.0; // mean(mask), exactly
    std::size_t parent0 = 0, parent1 = 0;
};

struct CutMixResult {
    Tensor image;  // same shape as parents
    Tensor label;  // [k] soft label
    CutMixRecord record;
};

namespace detail {

inline Rect random_rect(std::size_t h, std::size_t w, Rng& rng) {
    // side lengths uniform in [h/4, 3h/4] keep alpha away from {0,1}
    auto side = [&](std::size_t dim) {
        std::size_t lo = std::max<std::size_t>(1, dim / 4);
        std::size_t hi = std::max(lo, 3 * dim / 4);
        return lo + static_cast<std::size_t>(rng.next_below(hi - lo + 1));
    };
    Rect r;
    r.height = side(h);
    r.width = side(w);
    r.top = static_cast<std::size_t>(rng.next_below(h - r.height + 1));
    r.left = static_cast<std::size_t>(rng.next_below(w - r.width + 1));
    return r;
}

} // namespace detail

// x_mix = M (.) x0 + (1-M) (.) x1, y_mix = a*y0 + (1-a)*y1 with a = mean(M).
// The mask rectangle keeps x0; everything outside comes from x1.
inline CutMixResult cutmix(const Tensor& x0, const Tensor& y0, const Tensor& x1, const Tensor& y1,
                           const Rect& rect, std::size_t parent0 = 0, std::size_t parent1 = 1) {
    require_same_shape(x0, x1, "cutmix images");
    require_same_shape(y0, y1, "cutmix labels");
    if (x0.rank() != 3) throw shape_error("cutmix: expected [c,h,w] images, got " + x0.shape_str());
    std::size_t c = x0.dim(0), h = x0.dim(1), w = x0.dim(2);
    if (rect.top + rect.height > h || rect.left + rect.width > w)
        throw shape_error("cutmix: rectangle exceeds image bounds");

    CutMixResult out;
    out.record.mask = Tensor({h, w});
    for (std::size_t r = rect.top; r < rect.top + rect.height; ++r)
        for (std::size_t cc = rect.left; cc < rect.left + rect.width; ++cc)
            out.record.mask.v[r * w + cc] = 1.f;
    std::size_t ones = rect.height * rect.width;
    out.record.alpha = static_cast<double>(ones) / static_cast<double>(h * w);
    out.record.parent0 = parent0;
    out.record.parent1 = parent1;

    out.image = x1;
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = rect.top; r < rect.top + rect.height; ++r)
            for (std::size_t cc = rect.left; cc < rect.left + rect.width; ++cc)
                out.image.v[(ch * h + r) * w + cc] = x0.v[(ch * h + r) * w + cc];

    out.label = Tensor(y0.shape);
    for (std::size_t i = 0; i < y0.size(); ++i)
        out.label[i] = static_cast<float>(out.record.alpha * y0[i] + (1.0 - out.record.alpha) * y1[i]);
    return out;
}

inline CutMixResult cutmix_random(const Tensor& x0, const Tensor& y0, const Tensor& x1, const Tensor& y1,
                                  Rng& rng, std::size_t parent0 = 0, std::size_t parent1 = 1) {
    if (x0.rank() != 3) throw shape_error("cutmix: expected [c,h,w] images");
    Rect r = detail::random_rect(x0.dim(1), x0.dim(2), rng);
    return cutmix(x0, y0, x1, y1, r, parent0, parent1);
}

// Spatial transpose of each channel: out(r,c) = in(c,r). Requires h == w.
inline Tensor flip(const Tensor& x) {
    if (x.rank() != 3) throw shape_error("flip: expected [c,h,w] image");
    std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h != w) throw shape_error("flip: spatial dims must be square, got " + x.shape_str());
    Tensor out(x.shape);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t cc = 0; cc < w; ++cc)
                out.v[(ch * h + r) * w + cc] = x.v[(ch * h + cc) * w + r];
    return out;
}

// Horizontal mirror, provided as the colloquial reading of "image flip".
inline Tensor flip_mirror(const Tensor& x) {
    if (x.rank() != 3) throw shape_error("flip_mirror: expected [c,h,w] image");
    std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor out(x.shape);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < h; ++r)
            for (std::size_t cc = 0; cc < w; ++cc)
                out.v[(ch * h + r) * w + cc] = x.v[(ch * h + r) * w + (w - 1 - cc)];
    return out;
}

struct SacmConfig {
    std::size_t n_out = 200;
    std::size_t rounds = 1;   // successive cutmix passes per output image
    bool use_flip = true;
    bool mirror = false;      // transpose by default, mirror when set
};

// Fingerprint-input builder: draws random pairs from the sample pool, applies
// `rounds` cutmix passes and an optional flip. rounds=0 && !use_flip returns
// the pool itself (cycled) in fixed order.
inline Tensor build_sacm_inputs(const Dataset& samples, const SacmConfig& cfg, std::uint64_t seed) {
    if (samples.size() == 0) throw config_error("build_sacm_inputs: empty sample pool");
    if (cfg.n_out == 0) throw config_error("build_sacm_inputs: n_out must be >= 1");
    if (cfg.rounds > 0 && samples.size() < 2)
        throw config_error("build_sacm_inputs: cutmix needs at least 2 samples");

    std::size_t c = samples.images.dim(1), h = samples.images.dim(2), w = samples.images.dim(3);
    Tensor out({cfg.n_out, c, h, w});
    Rng root = Rng(seed).derive("sacm-inputs");
    Tensor onehot({samples.k}); // labels are irrelevant for fingerprint inputs

    std::size_t plane = c * h * w;
    for (std::size_t i = 0; i < cfg.n_out; ++i) {
        Rng rng = root.derive("sample", i);
        Tensor img;
        if (cfg.rounds == 0) {
            img = samples.images.slice_row(i % samples.size());
        } else {
            std::size_t j = static_cast<std::size_t>(rng.next_below(samples.size()));
            img = samples.images.slice_row(j);
            for (std::size_t round = 0; round < cfg.rounds; ++round) {
                std::size_t l = static_cast<std::size_t>(rng.next_below(samples.size() - 1));
                if (l >= j) ++l;
                img = cutmix_random(img, onehot, samples.images.slice_row(l), onehot, rng, j, l).image;
            }
        }
        if (cfg.use_flip) img = cfg.mirror ? flip_mirror(img) : flip(img);
        std::copy(img.v.begin(), img.v.end(), out.v.begin() + i * plane);
    }
    return out;
}

} // namespace sac
