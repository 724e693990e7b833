#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sac/error.hpp"
#include "sac/rng.hpp"
#include "sac/tensor.hpp"

namespace sac {

// Task descriptor for the procedural benchmark generator.
struct TaskSpec {
    std::size_t k = 10;
    std::size_t c = 1, h = 16, w = 16;
    std::string family = "shapes-v1";
    // Template ids used for the k classes are [template_base, template_base + k).
    std::size_t template_base = 0;
    double sigma = 0.35;  // per-pixel noise level
    bool jitter = true;   // random +/-2 px placement shift
    std::string task_id = "shapes-v1/base10";

    void validate() const {
        if (k < 2) throw config_error("TaskSpec: k must be >= 2");
        if (sigma < 0.0) throw config_error("TaskSpec: sigma must be >= 0");
    }
};

struct Dataset {
    Tensor images;                 // [n, c, h, w], values in [0,1]
    std::vector<std::uint16_t> labels;
    std::size_t k = 0;
    std::string task_id;

    std::size_t size() const { return labels.size(); }

    Dataset select(const std::vector<std::size_t>& idx) const {
        Dataset out;
        out.k = k;
        out.task_id = task_id;
        std::vector<std::size_t> s = images.shape;
        s[0] = idx.size();
        out.images = Tensor(s);
        out.labels.resize(idx.size());
        std::size_t stride = images.size() / images.dim(0);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy(images.v.begin() + idx[i] * stride, images.v.begin() + (idx[i] + 1) * stride,
                      out.images.v.begin() + i * stride);
            out.labels[i] = labels[idx[i]];
        }
        return out;
    }

    Dataset head(std::size_t n) const {
        std::vector<std::size_t> idx(std::min(n, size()));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        return select(idx);
    }
};

namespace detail {

// One 16x16-ish base pattern per template id. Patterns are pixel predicates
// over centered coordinates; ids 0..19 are pairwise visually distinct so a
// task and its derived transfer task never share class templates.
inline float template_pixel(std::size_t tid, double y, double x, double h, double w) {
    double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    double dy = y - cy, dx = x - cx;
    double r = std::sqrt(dy * dy + dx * dx);
    double s = std::min(h, w);
    auto band = [](double v, double period) {
        double m = std::fmod(std::fmod(v, period) + period, period);
        return m < period / 2.0;
    };
    switch (tid % 20) {
        case 0: return r <= 0.32 * s ? 1.f : 0.f;                                   // filled disc
        case 1: return (r <= 0.42 * s && r >= 0.26 * s) ? 1.f : 0.f;                // ring
        case 2: {                                                                   // square outline
            double m = std::max(std::abs(dy), std::abs(dx));
            return (m <= 0.40 * s && m >= 0.27 * s) ? 1.f : 0.f;
        }
        case 3: return (dy >= -0.30 * s && std::abs(dx) <= (dy + 0.30 * s) * 0.8) ? 1.f : 0.f; // triangle
        case 4: return band(y, s / 2.0) ? 1.f : 0.f;                                // horizontal stripes
        case 5: return band(x, s / 2.0) ? 1.f : 0.f;                                // vertical stripes
        case 6: return std::abs(dy - dx) <= 0.14 * s ? 1.f : 0.f;                   // main diagonal band
        case 7: return std::abs(dy + dx) <= 0.14 * s ? 1.f : 0.f;                   // anti-diagonal band
        case 8: return (std::abs(dy) <= 0.12 * s || std::abs(dx) <= 0.12 * s) ? 1.f : 0.f; // plus
        case 9: return (band(y, s / 2.0) == band(x, s / 2.0)) ? 1.f : 0.f;          // checkerboard
        case 10: return (std::abs(dy) + std::abs(dx)) <= 0.38 * s ? 1.f : 0.f;      // diamond
        case 11: return (std::abs(dy - dx) <= 0.10 * s || std::abs(dy + dx) <= 0.10 * s) ? 1.f : 0.f; // X
        case 12: return (dy <= -0.15 * s || (std::abs(dx) <= 0.10 * s && dy > -0.15 * s)) ? 1.f : 0.f; // T
        case 13: return (dx <= -0.18 * s || dy >= 0.18 * s) ? 1.f : 0.f;            // L corner
        case 14: {                                                                  // two discs
            double r1 = std::hypot(dy + 0.2 * s, dx + 0.2 * s);
            double r2 = std::hypot(dy - 0.2 * s, dx - 0.2 * s);
            return (r1 <= 0.16 * s || r2 <= 0.16 * s) ? 1.f : 0.f;
        }
        case 15: return std::abs(dy) <= 0.14 * s ? 1.f : 0.f;                       // horizontal bar
        case 16: return std::abs(dx) <= 0.14 * s ? 1.f : 0.f;                       // vertical bar
        case 17: return band(x + y, s / 2.0) ? 1.f : 0.f;                           // diagonal stripes
        case 18: return (r <= 0.12 * s || (r >= 0.30 * s && r <= 0.42 * s)) ? 1.f : 0.f; // bullseye
        case 19: return (std::abs(dy) >= 0.26 * s && std::abs(dx) >= 0.26 * s) ? 1.f : 0.f; // corner blocks
    }
    return 0.f;
}

} // namespace detail

// Render the clean class template (no noise, no jitter).
inline Tensor render_template(const TaskSpec& spec, std::size_t template_id) {
    Tensor img({spec.c, spec.h, spec.w});
    for (std::size_t c = 0; c < spec.c; ++c)
        for (std::size_t y = 0; y < spec.h; ++y)
            for (std::size_t x = 0; x < spec.w; ++x)
                img.v[(c * spec.h + y) * spec.w + x] = detail::template_pixel(
                    template_id, static_cast<double>(y), static_cast<double>(x),
                    static_cast<double>(spec.h), static_cast<double>(spec.w));
    return img;
}

// Deterministic synthetic benchmark: class templates + placement jitter +
// amplitude jitter + Gaussian pixel noise, clamped to [0,1].
inline Dataset gen_synthetic(const TaskSpec& spec, std::size_t n, std::uint64_t seed) {
    spec.validate();
    if (n < 20 * spec.k)
        throw config_error("gen_synthetic: n=" + std::to_string(n) + " too small, need >= " +
                           std::to_string(20 * spec.k));
    Rng root(seed);
    Rng order_rng = root.derive("sample-order");
    Rng noise_rng = root.derive("pixel-noise");
    Rng place_rng = root.derive("placement");

    std::vector<Tensor> templates;
    templates.reserve(spec.k);
    for (std::size_t c = 0; c < spec.k; ++c) templates.push_back(render_template(spec, spec.template_base + c));

    Dataset ds;
    ds.k = spec.k;
    ds.task_id = spec.task_id;
    ds.images = Tensor({n, spec.c, spec.h, spec.w});
    ds.labels.resize(n);

    std::vector<std::uint16_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint16_t>(i % spec.k);
    order_rng.shuffle(labels);

    std::size_t plane = spec.c * spec.h * spec.w;
    for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t lab = labels[i];
        ds.labels[i] = lab;
        const Tensor& tpl = templates[lab];
        int dy = 0, dx = 0;
        if (spec.jitter) {
            dy = place_rng.uniform_int(-2, 2);
            dx = place_rng.uniform_int(-2, 2);
        }
        double amp = spec.jitter ? place_rng.uniform(0.75, 1.0) : 1.0;
        float* out = ds.images.data() + i * plane;
        for (std::size_t c = 0; c < spec.c; ++c)
            for (std::size_t y = 0; y < spec.h; ++y)
                for (std::size_t x = 0; x < spec.w; ++x) {
                    long sy = static_cast<long>(y) - dy;
                    long sx = static_cast<long>(x) - dx;
                    double v = 0.0;
                    if (sy >= 0 && sy < static_cast<long>(spec.h) && sx >= 0 && sx < static_cast<long>(spec.w))
                        v = amp * tpl.v[(c * spec.h + sy) * spec.w + sx];
                    if (spec.sigma > 0.0) v += spec.sigma * noise_rng.normal();
                    out[(c * spec.h + y) * spec.w + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
                }
    }
    return ds;
}

struct SplitIndices {
    std::vector<std::size_t> defender, attacker, validation;
};

// Stratified defender/attacker halves plus a 10% validation slice carved from
// the defender half (threshold selection is a defender-side activity).
inline SplitIndices split_indices(const Dataset& ds, std::uint64_t seed) {
    if (ds.size() < 40 * ds.k)
        throw config_error("split_defender_attacker: need >= 40 samples per class");
    std::vector<std::vector<std::size_t>> per_class(ds.k);
    for (std::size_t i = 0; i < ds.size(); ++i) per_class[ds.labels[i]].push_back(i);
    for (std::size_t c = 0; c < ds.k; ++c)
        if (per_class[c].size() < 40)
            throw config_error("split_defender_attacker: class " + std::to_string(c) + " has only " +
                               std::to_string(per_class[c].size()) + " samples, need >= 40");
    Rng rng = Rng(seed).derive("defender-attacker-split");
    SplitIndices out;
    for (std::size_t c = 0; c < ds.k; ++c) {
        auto idx = per_class[c];
        rng.shuffle(idx);
        std::size_t half = idx.size() / 2;
        std::size_t val = (half + 5) / 10; // round(0.1 * half)
        for (std::size_t i = 0; i < half; ++i) {
            if (i < val)
                out.validation.push_back(idx[i]);
            else
                out.defender.push_back(idx[i]);
        }
        for (std::size_t i = half; i < idx.size(); ++i) out.attacker.push_back(idx[i]);
    }
    std::sort(out.defender.begin(), out.defender.end());
    std::sort(out.attacker.begin(), out.attacker.end());
    std::sort(out.validation.begin(), out.validation.end());
    return out;
}

struct DataSplit {
    Dataset defender, attacker, validation;
};

inline DataSplit split_defender_attacker(const Dataset& ds, std::uint64_t seed) {
    SplitIndices idx = split_indices(ds, seed);
    return DataSplit{ds.select(idx.defender), ds.select(idx.attacker), ds.select(idx.validation)};
}

// Class-stratified train/holdout split (holdout gets round(frac) per class).
inline std::pair<Dataset, Dataset> stratified_holdout(const Dataset& ds, double frac, std::uint64_t seed) {
    if (frac <= 0.0 || frac >= 1.0) throw config_error("stratified_holdout: frac in (0,1)");
    std::vector<std::vector<std::size_t>> per_class(ds.k);
    for (std::size_t i = 0; i < ds.size(); ++i) per_class[ds.labels[i]].push_back(i);
    Rng rng = Rng(seed).derive("holdout-split");
    std::vector<std::size_t> train, hold;
    for (auto& idx : per_class) {
        rng.shuffle(idx);
        std::size_t nh = static_cast<std::size_t>(frac * static_cast<double>(idx.size()) + 0.5);
        for (std::size_t i = 0; i < idx.size(); ++i)
            (i < nh ? hold : train).push_back(idx[i]);
    }
    std::sort(train.begin(), train.end());
    std::sort(hold.begin(), hold.end());
    return {ds.select(train), ds.select(hold)};
}

// A related task over a disjoint template set: same geometry and rendering
// family, fresh label space.
inline TaskSpec derive_transfer_spec(const TaskSpec& src) {
    TaskSpec t = src;
    t.template_base = src.template_base + src.k;
    t.task_id = src.family + "/derived" + std::to_string(t.template_base) + "-" + std::to_string(t.k);
    return t;
}

inline Dataset derive_transfer_task(const TaskSpec& src, std::size_t n, std::uint64_t seed) {
    TaskSpec t = derive_transfer_spec(src);
    return gen_synthetic(t, n, Rng(seed).derive("transfer-task").seed());
}

// ---------------------------------------------------------------------------
// Dataset checkpoint: "SACDATA1" | u32 n,c,h,w,k | f32 images | u16 labels |
// u32 task_id length | task_id bytes. All little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, std::size_t len) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(len));
}

inline void read_bytes(std::istream& is, void* p, std::size_t len, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(len));
    if (static_cast<std::size_t>(is.gcount()) != len)
        throw io_error(std::string("truncated file while reading ") + what);
}

template <typename T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(v));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    read_bytes(is, &v, sizeof(v), what);
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is, const char* what) {
    auto len = read_pod<std::uint32_t>(is, what);
    std::string s(len, '\0');
    if (len) read_bytes(is, s.data(), len, what);
    return s;
}

inline void check_magic(std::istream& is, const char* magic, const char* what) {
    char buf[9] = {0};
    read_bytes(is, buf, 8, what);
    if (std::memcmp(buf, magic, 8) != 0)
        throw io_error(std::string(what) + ": bad magic, expected " + magic);
}

} // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw io_error("cannot open " + path.string() + " for writing");
    os.write("SACDATA1", 8);
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.images.dim(0)));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.images.dim(1)));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.images.dim(2)));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.images.dim(3)));
    detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(ds.k));
    detail::write_bytes(os, ds.images.data(), ds.images.size() * sizeof(float));
    detail::write_bytes(os, ds.labels.data(), ds.labels.size() * sizeof(std::uint16_t));
    detail::write_string(os, ds.task_id);
    if (!os) throw io_error("write failed for " + path.string());
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw io_error("cannot open " + path.string());
    detail::check_magic(is, "SACDATA1", "dataset");
    auto n = detail::read_pod<std::uint32_t>(is, "dataset n");
    auto c = detail::read_pod<std::uint32_t>(is, "dataset c");
    auto h = detail::read_pod<std::uint32_t>(is, "dataset h");
    auto w = detail::read_pod<std::uint32_t>(is, "dataset w");
    auto k = detail::read_pod<std::uint32_t>(is, "dataset k");
    Dataset ds;
    ds.k = k;
    ds.images = Tensor({n, c, h, w});
    detail::read_bytes(is, ds.images.data(), ds.images.size() * sizeof(float), "dataset images");
    ds.labels.resize(n);
    detail::read_bytes(is, ds.labels.data(), n * sizeof(std::uint16_t), "dataset labels");
    ds.task_id = detail::read_string(is, "dataset task_id");
    for (auto lab : ds.labels)
        if (lab >= ds.k) throw io_error("dataset label out of range");
    return ds;
}

} // namespace sac
