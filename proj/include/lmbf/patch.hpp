#pragma once

// Image ingestion and the patch pipeline: binary netpbm (P5/P6) IO, bilinear/
// nearest resize, non-overlapping tiling with grid bookkeeping, foreground-
// based patch selection, the fixed flip/rotation augmentation set, and a
// procedural synthetic fundus generator for desk-scale experiments.
//
// Images are CHW tensors in [0,1]; masks are [1,H,W] with values in {0,1}.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lmbf/tensor.hpp"

namespace lmbf {

// ---------------------------------------------------------------------------
// Tags and records
// ---------------------------------------------------------------------------

enum class DatasetTag { DRIVE, STARE, CHASE, HRF, IDRID, SYNTH };
enum class FeatureTag { vessels, hard_exudates, soft_exudates, microaneurysms, haemorrhages, optic_disc };

inline bool is_lesion_feature(FeatureTag f) {
    return f == FeatureTag::hard_exudates || f == FeatureTag::soft_exudates ||
           f == FeatureTag::microaneurysms || f == FeatureTag::haemorrhages;
}

template <typename T>
struct ImageRecord {
    std::string id;
    Tensor<T> image;            // [3, H, W] in [0,1]
    Tensor<T> mask;             // [1, H, W] in {0,1}
    DatasetTag dataset_tag = DatasetTag::SYNTH;
    FeatureTag feature_tag = FeatureTag::vessels;
};

template <typename T>
struct PatchRecord {
    std::string source_id;
    int64_t grid_row = 0;
    int64_t grid_col = 0;
    Tensor<T> image_patch;      // [C, p, p]
    Tensor<T> mask_patch;       // [1, p, p]
    bool kept = true;
    int64_t fg_pixels = 0;
};

template <typename T>
inline int64_t count_foreground(const Tensor<T>& mask) {
    int64_t n = 0;
    for (const T v : mask.data()) {
        if (v == T(1)) ++n;
        else if (v != T(0)) throw contract_error("mask contains a non-binary value");
    }
    return n;
}

// ---------------------------------------------------------------------------
// Binary netpbm (P5 gray / P6 color), maxval 255
// ---------------------------------------------------------------------------

namespace detail {

// Token scanner over the header bytes; keeps a byte offset for error reports.
struct PnmScanner {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    [[noreturn]] void fail(const std::string& what) const {
        throw parse_error(path + ": " + what + " at byte " + std::to_string(pos));
    }

    void skip_space_and_comments() {
        while (pos < buf.size()) {
            const char c = buf[pos];
            if (c == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
                ++pos;
            } else {
                return;
            }
        }
    }

    int64_t next_int() {
        skip_space_and_comments();
        if (pos >= buf.size()) fail("unexpected end of header");
        if (buf[pos] < '0' || buf[pos] > '9') fail("expected integer");
        int64_t v = 0;
        while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
            v = v * 10 + (buf[pos] - '0');
            if (v > (int64_t(1) << 30)) fail("integer out of range");
            ++pos;
        }
        return v;
    }
};

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw parse_error(path + ": cannot open file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace detail

// Loads a binary PPM (P6 -> [3,H,W]) or PGM (P5 -> [1,H,W]); maxval must be
// 255; bytes map to value/255 in [0,1], row-major from the top-left.
template <typename T>
inline Tensor<T> load_netpbm(const std::string& path) {
    const std::string buf = detail::read_file_bytes(path);
    detail::PnmScanner sc{buf, 0, path};
    if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
        sc.pos = 0;
        sc.fail("bad magic (want P5 or P6)");
    }
    const int64_t channels = buf[1] == '6' ? 3 : 1;
    sc.pos = 2;
    const int64_t w = sc.next_int();
    const int64_t h = sc.next_int();
    const int64_t maxval = sc.next_int();
    if (w < 1 || h < 1) sc.fail("non-positive image size");
    if (maxval != 255) sc.fail("unsupported maxval " + std::to_string(maxval) + " (want 255)");
    if (sc.pos >= buf.size()) sc.fail("missing payload");
    const char sep = buf[sc.pos];
    if (sep != '\n' && sep != ' ' && sep != '\t' && sep != '\r')
        sc.fail("expected single whitespace before payload");
    ++sc.pos;
    const size_t need = static_cast<size_t>(w) * static_cast<size_t>(h) * static_cast<size_t>(channels);
    if (buf.size() - sc.pos < need) {
        sc.pos = buf.size();
        throw parse_error(path + ": truncated payload, need " + std::to_string(need) + " bytes, have " +
                          std::to_string(buf.size()) + " total ending at byte " + std::to_string(buf.size()));
    }
    Tensor<T> out = Tensor<T>::zeros({channels, h, w});
    const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data()) + sc.pos;
    // Payload is interleaved (RGB per pixel); tensor is planar.
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t c = 0; c < channels; ++c)
                out.data()[(c * h + y) * w + x] =
                    static_cast<T>(p[(y * w + x) * channels + c]) / T(255);
    return out;
}

// Mask loader: P5 with maxval 255, binarized at 127.5 so {0,255} ground
// truths map exactly to {0,1}.
template <typename T>
inline Tensor<T> load_mask_pgm(const std::string& path) {
    Tensor<T> gray = load_netpbm<T>(path);
    if (gray.dim(0) != 1) throw parse_error(path + ": mask must be grayscale (P5)");
    for (auto& v : gray.data()) v = v > T(0.5) ? T(1) : T(0);
    return gray;
}

template <typename T>
inline void save_netpbm(const std::string& path, const Tensor<T>& img) {
    if (img.shape().size() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw contract_error("save_netpbm: want [1|3,H,W], got " + shape_str(img.shape()));
    const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw contract_error("save_netpbm: cannot open " + path + " for writing");
    out << (c == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> payload(static_cast<size_t>(c * h * w));
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x)
            for (int64_t ch = 0; ch < c; ++ch) {
                T v = img.data()[(ch * h + y) * w + x];
                v = v < T(0) ? T(0) : (v > T(1) ? T(1) : v);
                payload[(y * w + x) * c + ch] =
                    static_cast<unsigned char>(std::lround(static_cast<double>(v) * 255.0));
            }
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) throw contract_error("save_netpbm: short write to " + path);
}

// ---------------------------------------------------------------------------
// Resize
// ---------------------------------------------------------------------------

enum class ResizeMode { bilinear, nearest };

// Half-pixel-centers convention (align-corners false). Identity sizes return
// bitwise-equal data in both modes.
template <typename T>
inline Tensor<T> resize(const Tensor<T>& img, int64_t out_h, int64_t out_w, ResizeMode mode) {
    if (img.shape().size() != 3) throw shape_error("resize: want CHW, got " + shape_str(img.shape()));
    if (out_h < 1 || out_w < 1) throw config_error("resize: target must be >= 1");
    const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor<T> out = Tensor<T>::zeros({C, out_h, out_w});
    const double sy = static_cast<double>(H) / static_cast<double>(out_h);
    const double sx = static_cast<double>(W) / static_cast<double>(out_w);
    for (int64_t c = 0; c < C; ++c) {
        const T* in = img.ptr() + c * H * W;
        T* dst = out.ptr() + c * out_h * out_w;
        for (int64_t oy = 0; oy < out_h; ++oy) {
            const double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
            for (int64_t ox = 0; ox < out_w; ++ox) {
                const double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
                if (mode == ResizeMode::nearest) {
                    int64_t iy = static_cast<int64_t>(std::floor(fy + 0.5));
                    int64_t ix = static_cast<int64_t>(std::floor(fx + 0.5));
                    iy = std::min(std::max(iy, int64_t{0}), H - 1);
                    ix = std::min(std::max(ix, int64_t{0}), W - 1);
                    dst[oy * out_w + ox] = in[iy * W + ix];
                } else {
                    const double cy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
                    const double cx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
                    const int64_t y0 = static_cast<int64_t>(std::floor(cy));
                    const int64_t x0 = static_cast<int64_t>(std::floor(cx));
                    const int64_t y1 = std::min(y0 + 1, H - 1);
                    const int64_t x1 = std::min(x0 + 1, W - 1);
                    const T wy = static_cast<T>(cy - static_cast<double>(y0));
                    const T wx = static_cast<T>(cx - static_cast<double>(x0));
                    const T top = in[y0 * W + x0] * (T(1) - wx) + in[y0 * W + x1] * wx;
                    const T bot = in[y1 * W + x0] * (T(1) - wx) + in[y1 * W + x1] * wx;
                    dst[oy * out_w + ox] = top * (T(1) - wy) + bot * wy;
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tiling and stitching
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
inline Tensor<T> crop(const Tensor<T>& img, int64_t y0, int64_t x0, int64_t h, int64_t w) {
    const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    Tensor<T> out = Tensor<T>::zeros({C, h, w});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < h; ++y)
            std::copy_n(img.ptr() + (c * H + y0 + y) * W + x0, w, out.ptr() + (c * h + y) * w);
    return out;
}
} // namespace detail

// Non-overlapping row-major grid of patch x patch crops.
template <typename T>
inline std::vector<PatchRecord<T>> tile(const ImageRecord<T>& rec, int64_t patch) {
    if (patch < 1) throw config_error("tile: patch size must be >= 1");
    const int64_t H = rec.image.dim(1), W = rec.image.dim(2);
    if (rec.mask.dim(1) != H || rec.mask.dim(2) != W)
        throw contract_error("tile: image/mask extent mismatch for " + rec.id);
    if (H % patch != 0 || W % patch != 0)
        throw shape_error("tile: " + std::to_string(H) + "x" + std::to_string(W) +
                          " not divisible by patch " + std::to_string(patch));
    std::vector<PatchRecord<T>> out;
    out.reserve(static_cast<size_t>((H / patch) * (W / patch)));
    for (int64_t gy = 0; gy < H / patch; ++gy)
        for (int64_t gx = 0; gx < W / patch; ++gx) {
            PatchRecord<T> p;
            p.source_id = rec.id;
            p.grid_row = gy;
            p.grid_col = gx;
            p.image_patch = detail::crop(rec.image, gy * patch, gx * patch, patch, patch);
            p.mask_patch = detail::crop(rec.mask, gy * patch, gx * patch, patch, patch);
            p.fg_pixels = count_foreground(p.mask_patch);
            p.kept = true;
            out.push_back(std::move(p));
        }
    return out;
}

// Inverse of tile for any CHW tensors laid out row-major on a rows x cols grid.
template <typename T>
inline Tensor<T> stitch(const std::vector<Tensor<T>>& tiles, int64_t rows, int64_t cols) {
    if (rows < 1 || cols < 1 || tiles.size() != static_cast<size_t>(rows * cols))
        throw contract_error("stitch: need rows*cols tiles, got " + std::to_string(tiles.size()));
    const int64_t C = tiles[0].dim(0), ph = tiles[0].dim(1), pw = tiles[0].dim(2);
    for (const auto& t : tiles)
        if (t.shape() != tiles[0].shape())
            throw contract_error("stitch: tiles must share one shape");
    Tensor<T> out = Tensor<T>::zeros({C, rows * ph, cols * pw});
    const int64_t H = rows * ph, W = cols * pw;
    for (int64_t gy = 0; gy < rows; ++gy)
        for (int64_t gx = 0; gx < cols; ++gx) {
            const Tensor<T>& t = tiles[static_cast<size_t>(gy * cols + gx)];
            for (int64_t c = 0; c < C; ++c)
                for (int64_t y = 0; y < ph; ++y)
                    std::copy_n(t.ptr() + (c * ph + y) * pw, pw,
                                out.ptr() + (c * H + gy * ph + y) * W + gx * pw);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Selection: lesion features keep patches with enough pathology pixels;
// vessel and optic-disc features keep everything.
// ---------------------------------------------------------------------------

template <typename T>
inline std::pair<std::vector<PatchRecord<T>>, std::vector<PatchRecord<T>>>
select(std::vector<PatchRecord<T>> patches, FeatureTag feature, int64_t min_fg = 1) {
    if (min_fg < 0) throw config_error("select: min_fg must be >= 0");
    std::vector<PatchRecord<T>> kept, discarded;
    for (auto& p : patches) {
        const bool keep = !is_lesion_feature(feature) || p.fg_pixels >= min_fg;
        p.kept = keep;
        (keep ? kept : discarded).push_back(std::move(p));
    }
    return {std::move(kept), std::move(discarded)};
}

// ---------------------------------------------------------------------------
// Augmentation: the original plus h-flip, v-flip, and 90/180/270 rotations.
// The variant set is fixed; the seed parameter is part of the interface for
// determinism bookkeeping but selects nothing.
// ---------------------------------------------------------------------------

namespace detail {

enum class Xform { identity, hflip, vflip, rot90, rot180, rot270 };

template <typename T>
inline Tensor<T> apply_xform(const Tensor<T>& img, Xform f) {
    const int64_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
    const bool swaps = f == Xform::rot90 || f == Xform::rot270;
    Tensor<T> out = Tensor<T>::zeros({C, swaps ? W : H, swaps ? H : W});
    const int64_t OH = out.dim(1), OW = out.dim(2);
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y)
            for (int64_t x = 0; x < W; ++x) {
                int64_t oy = y, ox = x;
                switch (f) {
                    case Xform::identity: break;
                    case Xform::hflip: ox = W - 1 - x; break;
                    case Xform::vflip: oy = H - 1 - y; break;
                    case Xform::rot90: oy = x; ox = H - 1 - y; break;           // clockwise
                    case Xform::rot180: oy = H - 1 - y; ox = W - 1 - x; break;
                    case Xform::rot270: oy = W - 1 - x; ox = y; break;
                }
                out.ptr()[(c * OH + oy) * OW + ox] = img.ptr()[(c * H + y) * W + x];
            }
    return out;
}

} // namespace detail

template <typename T>
inline std::vector<PatchRecord<T>> augment(const PatchRecord<T>& patch, uint64_t seed) {
    (void)seed;
    using detail::Xform;
    std::vector<PatchRecord<T>> out;
    out.reserve(6);
    for (Xform f : {Xform::identity, Xform::hflip, Xform::vflip, Xform::rot90, Xform::rot180,
                    Xform::rot270}) {
        PatchRecord<T> p;
        p.source_id = patch.source_id;
        p.grid_row = patch.grid_row;
        p.grid_col = patch.grid_col;
        p.kept = patch.kept;
        p.image_patch = detail::apply_xform(patch.image_patch, f);
        p.mask_patch = detail::apply_xform(patch.mask_patch, f);
        p.fg_pixels = count_foreground(p.mask_patch);
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic fundus generator: dark circular field of view, branching random
// walks as vessels (or blob lesions / a bright optic disc), deterministic per
// seed, mask guaranteed non-empty and below half the frame.
// ---------------------------------------------------------------------------

template <typename T>
inline ImageRecord<T> synth_fundus(uint64_t seed, int64_t size, FeatureTag feature) {
    if (size < 32) throw config_error("synth_fundus: size must be >= 32, got " + std::to_string(size));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    auto gauss = [&rng]() {
        std::normal_distribution<double> d(0.0, 1.0);
        return d(rng);
    };

    const double cx = 0.5 * static_cast<double>(size);
    const double cy = cx;
    const double R = 0.47 * static_cast<double>(size);
    std::vector<double> red(size * size), green(size * size), blue(size * size);
    std::vector<T> mask(static_cast<size_t>(size * size), T(0));

    // Retina-colored field of view with a radial vignette.
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x) {
            const double dx = static_cast<double>(x) + 0.5 - cx;
            const double dy = static_cast<double>(y) + 0.5 - cy;
            const double d = std::sqrt(dx * dx + dy * dy);
            const int64_t i = y * size + x;
            if (d > R) {
                red[i] = green[i] = blue[i] = 0.02;
            } else {
                const double v = 1.0 - 0.35 * (d / R) * (d / R);
                red[i] = 0.66 * v;
                green[i] = 0.40 * v;
                blue[i] = 0.24 * v;
            }
        }

    int64_t fg = 0;
    const int64_t fg_cap = (size * size * 2) / 5; // hard ceiling well under half
    auto stamp = [&](double px, double py, double radius, double r, double g, double b, bool to_mask) {
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(px - radius - 1)));
        const int64_t x1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(px + radius + 1)));
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(py - radius - 1)));
        const int64_t y1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(py + radius + 1)));
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) {
                const double ddx = static_cast<double>(x) + 0.5 - px;
                const double ddy = static_cast<double>(y) + 0.5 - py;
                if (ddx * ddx + ddy * ddy > radius * radius) continue;
                const int64_t i = y * size + x;
                red[i] = r;
                green[i] = g;
                blue[i] = b;
                if (to_mask && mask[i] == T(0) && fg < fg_cap) {
                    mask[i] = T(1);
                    ++fg;
                }
            }
    };
    auto inside_fov = [&](double px, double py) {
        const double dx = px - cx, dy = py - cy;
        return dx * dx + dy * dy < (R - 2.0) * (R - 2.0);
    };

    if (feature == FeatureTag::vessels) {
        // Vessels radiate from a root near the disc as momentum random walks.
        // Each walk carries a fade factor toward the retina color: faint
        // low-contrast branches are what make real vessel maps hard, so the
        // toy keeps that property instead of being color-separable.
        const double rootang = unif(rng) * 6.283185307179586;
        const double rx = cx + 0.30 * R * std::cos(rootang);
        const double ry = cy + 0.30 * R * std::sin(rootang);
        const double thickness = std::max(1.6, static_cast<double>(size) / 40.0);
        struct Walk {
            double x, y, ang;
            int steps;
            double fade; // 0: full vessel color, 1: retina background color
        };
        auto vessel_color = [](double fade, double& r, double& g, double& b) {
            r = 0.30 + fade * (0.55 - 0.30);
            g = 0.12 + fade * (0.33 - 0.12);
            b = 0.10 + fade * (0.20 - 0.10);
        };
        std::vector<Walk> todo;
        const int nmain = 5;
        for (int k = 0; k < nmain; ++k)
            todo.push_back({rx, ry, unif(rng) * 6.283185307179586,
                            static_cast<int>(1.8 * R), 0.30 * unif(rng)});
        stamp(rx, ry, thickness + 0.5, 0.30, 0.12, 0.10, true);
        size_t wi = 0;
        while (wi < todo.size()) {
            Walk w = todo[wi++];
            double r, g, b;
            vessel_color(w.fade, r, g, b);
            for (int s = 0; s < w.steps && fg < fg_cap; ++s) {
                w.ang += 0.16 * gauss();
                w.x += std::cos(w.ang);
                w.y += std::sin(w.ang);
                if (!inside_fov(w.x, w.y)) break;
                stamp(w.x, w.y, thickness, r, g, b, true);
                if (todo.size() < 24 && unif(rng) < 0.012 && w.steps - s > 12)
                    todo.push_back({w.x, w.y, w.ang + (unif(rng) < 0.5 ? 0.8 : -0.8),
                                    (w.steps - s) * 2 / 3, 0.25 + 0.40 * unif(rng)});
            }
        }
    } else if (feature == FeatureTag::optic_disc) {
        const double ang = unif(rng) * 6.283185307179586;
        const double px = cx + 0.30 * R * std::cos(ang);
        const double py = cy + 0.30 * R * std::sin(ang);
        stamp(px, py, 0.12 * static_cast<double>(size), 0.97, 0.88, 0.62, true);
    } else {
        // Lesion proxies: bright blobs for exudates, dark red for the rest.
        const bool bright = feature == FeatureTag::hard_exudates || feature == FeatureTag::soft_exudates;
        const int nblob = 6 + static_cast<int>(rng() % 8);
        const double rmax = static_cast<double>(size) / (feature == FeatureTag::microaneurysms ? 30.0 : 16.0);
        for (int k = 0; k < nblob; ++k) {
            const double ang = unif(rng) * 6.283185307179586;
            const double rad = unif(rng) * 0.8 * R;
            const double px = cx + rad * std::cos(ang);
            const double py = cy + rad * std::sin(ang);
            const double radius = std::max(1.2, unif(rng) * rmax);
            if (bright)
                stamp(px, py, radius, 0.95, 0.90, 0.55, true);
            else
                stamp(px, py, radius, 0.22, 0.05, 0.05, true);
        }
    }

    if (fg == 0) { // unreachable by construction, but the contract is hard
        stamp(cx, cy, 2.0, 0.3, 0.1, 0.1, true);
    }

    // Mild deterministic texture noise on the image only.
    ImageRecord<T> rec;
    rec.id = "synth-" + std::to_string(seed);
    rec.dataset_tag = DatasetTag::SYNTH;
    rec.feature_tag = feature;
    rec.image = Tensor<T>::zeros({3, size, size});
    rec.mask = Tensor<T>::from_data({1, size, size}, std::move(mask));
    for (int64_t i = 0; i < size * size; ++i) {
        const double n0 = (unif(rng) - 0.5) * 0.03;
        const double n1 = (unif(rng) - 0.5) * 0.03;
        const double n2 = (unif(rng) - 0.5) * 0.03;
        rec.image.data()[i] = static_cast<T>(std::clamp(red[i] + n0, 0.0, 1.0));
        rec.image.data()[size * size + i] = static_cast<T>(std::clamp(green[i] + n1, 0.0, 1.0));
        rec.image.data()[2 * size * size + i] = static_cast<T>(std::clamp(blue[i] + n2, 0.0, 1.0));
    }
    return rec;
}

// ---------------------------------------------------------------------------
// Hard-negative augmentation: vessel-like distractor segments.
//
// Stamps short random-walk segments into a vessel image that replicate the
// true vessel painting exactly (thickness, colour ramp, fade range, step
// dynamics, per-pixel texture noise) while keeping a clearance margin from
// the real tree. The mask is left untouched, so the distractors are pure
// negatives that are locally indistinguishable from faint branches; telling
// them apart requires context (connectivity to the long vessel tree) rather
// than per-pixel appearance. Deterministic for a given seed.
// ---------------------------------------------------------------------------

template <typename T>
inline void add_vessel_distractors(ImageRecord<T>& rec, uint64_t seed, int count) {
    if (rec.image.rank() != 3 || rec.image.dim(0) != 3 || rec.mask.rank() != 3)
        throw contract_error("add_vessel_distractors: expects a 3-channel image with a mask");
    if (rec.image.dim(1) != rec.image.dim(2))
        throw contract_error("add_vessel_distractors: expects a square image");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int64_t size = rec.image.dim(1);
    const double c = 0.5 * static_cast<double>(size);
    const double R = 0.47 * static_cast<double>(size);
    const double th = std::max(1.6, static_cast<double>(size) / 40.0);
    T* red = rec.image.ptr();
    T* green = red + size * size;
    T* blue = green + size * size;
    const T* m = rec.mask.ptr();
    // True if any mask pixel lies within the clearance radius of (px, py).
    auto near_mask = [&](double px, double py) {
        const double guard = th + 2.5;
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(px - guard)));
        const int64_t x1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(px + guard)));
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(py - guard)));
        const int64_t y1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(py + guard)));
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) {
                if (m[y * size + x] <= T(0.5)) continue;
                const double dx = static_cast<double>(x) + 0.5 - px;
                const double dy = static_cast<double>(y) + 0.5 - py;
                if (dx * dx + dy * dy <= guard * guard) return true;
            }
        return false;
    };
    auto stamp = [&](double px, double py, double r, double g, double b) {
        const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(px - th - 1)));
        const int64_t x1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(px + th + 1)));
        const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(std::floor(py - th - 1)));
        const int64_t y1 = std::min<int64_t>(size - 1, static_cast<int64_t>(std::ceil(py + th + 1)));
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x) {
                const double dx = static_cast<double>(x) + 0.5 - px;
                const double dy = static_cast<double>(y) + 0.5 - py;
                if (dx * dx + dy * dy > th * th) continue;
                const int64_t i = y * size + x;
                // Match the generator's per-pixel texture noise so flatness
                // cannot give the distractors away locally.
                red[i] = static_cast<T>(std::clamp(r + (unif(rng) - 0.5) * 0.03, 0.0, 1.0));
                green[i] = static_cast<T>(std::clamp(g + (unif(rng) - 0.5) * 0.03, 0.0, 1.0));
                blue[i] = static_cast<T>(std::clamp(b + (unif(rng) - 0.5) * 0.03, 0.0, 1.0));
            }
    };
    int placed = 0, attempts = 0;
    while (placed < count && attempts < count * 40) {
        ++attempts;
        const double ang = unif(rng) * 6.283185307179586;
        const double rad = unif(rng) * 0.80 * R;
        double px = c + rad * std::cos(ang);
        double py = c + rad * std::sin(ang);
        double dir = unif(rng) * 6.283185307179586;
        const int steps = 6 + static_cast<int>(unif(rng) * 9.0);
        const double fade = 0.25 + 0.40 * unif(rng); // same range as faint branches
        const double r = 0.30 + fade * (0.55 - 0.30);
        const double g = 0.12 + fade * (0.33 - 0.12);
        const double b = 0.10 + fade * (0.20 - 0.10);
        std::vector<std::pair<double, double>> pts;
        bool ok = true;
        for (int s = 0; s < steps; ++s) {
            dir += 0.16 * gauss(rng);
            px += std::cos(dir);
            py += std::sin(dir);
            const double dx = px - c, dy = py - c;
            if (dx * dx + dy * dy >= (R - 2.0) * (R - 2.0) || near_mask(px, py)) {
                ok = false;
                break;
            }
            pts.emplace_back(px, py);
        }
        if (!ok || pts.size() < 4) continue;
        for (const auto& p : pts) stamp(p.first, p.second, r, g, b);
        ++placed;
    }
}

// ---------------------------------------------------------------------------
// Dataset directory IO: <root>/<split>/images/*.ppm + masks/*.pgm paired by
// basename. Loads are sorted by filename for a stable order.
// ---------------------------------------------------------------------------

template <typename T>
inline void save_dataset(const std::string& root, const std::string& split,
                         const std::vector<ImageRecord<T>>& records) {
    namespace fs = std::filesystem;
    const fs::path imgdir = fs::path(root) / split / "images";
    const fs::path maskdir = fs::path(root) / split / "masks";
    fs::create_directories(imgdir);
    fs::create_directories(maskdir);
    for (const auto& r : records) {
        save_netpbm((imgdir / (r.id + ".ppm")).string(), r.image);
        save_netpbm((maskdir / (r.id + ".pgm")).string(), r.mask);
    }
}

template <typename T>
inline std::vector<ImageRecord<T>> load_dataset(const std::string& root, const std::string& split,
                                                DatasetTag dtag, FeatureTag ftag) {
    namespace fs = std::filesystem;
    const fs::path imgdir = fs::path(root) / split / "images";
    const fs::path maskdir = fs::path(root) / split / "masks";
    if (!fs::is_directory(imgdir))
        throw contract_error("load_dataset: missing directory " + imgdir.string());
    std::vector<fs::path> imgs;
    for (const auto& e : fs::directory_iterator(imgdir))
        if (e.path().extension() == ".ppm") imgs.push_back(e.path());
    std::sort(imgs.begin(), imgs.end());
    if (imgs.empty()) throw contract_error("load_dataset: no .ppm images under " + imgdir.string());
    std::vector<ImageRecord<T>> out;
    out.reserve(imgs.size());
    for (const auto& ip : imgs) {
        const fs::path mp = maskdir / (ip.stem().string() + ".pgm");
        if (!fs::exists(mp))
            throw contract_error("load_dataset: missing mask " + mp.string() + " for " + ip.string());
        ImageRecord<T> r;
        r.id = ip.stem().string();
        r.image = load_netpbm<T>(ip.string());
        r.mask = load_mask_pgm<T>(mp.string());
        if (r.image.dim(1) != r.mask.dim(1) || r.image.dim(2) != r.mask.dim(2))
            throw contract_error("load_dataset: image/mask extent mismatch for " + r.id);
        r.dataset_tag = dtag;
        r.feature_tag = ftag;
        out.push_back(std::move(r));
    }
    return out;
}

// Patch manifest CSV: source_id,grid_row,grid_col,fg_pixels,kept.
template <typename T>
inline void write_manifest(std::ostream& os, const std::vector<PatchRecord<T>>& patches) {
    os << "source_id,grid_row,grid_col,fg_pixels,kept\n";
    for (const auto& p : patches)
        os << p.source_id << ',' << p.grid_row << ',' << p.grid_col << ',' << p.fg_pixels << ','
           << (p.kept ? 1 : 0) << '\n';
}

} // namespace lmbf
