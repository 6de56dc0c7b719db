#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "muse/grounding.hpp"
#include "muse/rng.hpp"
#include "muse/tensor.hpp"

namespace muse {

// ---- class vocabulary: 8 shapes x 5 colors = 40 classes ----

enum class Shape { square, circle, triangle_up, triangle_down, diamond, plus, cross, ring };
inline constexpr int kShapeCount = 8;
inline constexpr int kColorCount = 5;
inline constexpr int kClassCount = kShapeCount * kColorCount;
inline constexpr int kIdentityCount = 4; // stripes / dots / gradient / ring
inline constexpr int kCanvas = 32;

inline constexpr const char* kShapeNames[kShapeCount] = {"square",   "circle", "triup", "tridown",
                                                         "diamond", "plus",   "cross", "ring"};
inline constexpr const char* kColorNames[kColorCount] = {"red", "green", "blue", "yellow", "magenta"};
inline constexpr const char* kIdentityNames[kIdentityCount] = {"stripes", "dots", "gradient", "ring"};

inline constexpr double kColorRgb[kColorCount][3] = {
    {1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 1.0}, {1.0, 1.0, 0.0}, {1.0, 0.0, 1.0}};

inline int class_of(Shape s, int color) { return static_cast<int>(s) * kColorCount + color; }
inline Shape shape_of_class(int class_id) { return static_cast<Shape>(class_id / kColorCount); }
inline int color_of_class(int class_id) { return class_id % kColorCount; }

inline std::string class_name(int class_id) {
    return std::string(kColorNames[color_of_class(class_id)]) + "_" +
           kShapeNames[static_cast<int>(shape_of_class(class_id))];
}

// Token vocabulary: class tokens 0..39, then structural tokens.
inline constexpr int kTokScene = kClassCount;
inline constexpr int kVocabSize = kClassCount + 1;

// ---- geometry ----

// Shape membership at box-normalized coordinates (u, v) in [0,1]^2, v down.
// Every shape touches all four box edges with a blunt contact at least a
// tenth of the box wide, so the tight mask bbox equals the subject box at
// every rasterized size.
inline bool shape_contains(Shape s, double u, double v) {
    const double du = u - 0.5, dv = v - 0.5;
    switch (s) {
        case Shape::square: return true;
        case Shape::circle: return du * du + dv * dv <= 0.52 * 0.52;
        case Shape::triangle_up: return std::abs(du) <= 0.15 + 0.35 * v;
        case Shape::triangle_down: return std::abs(du) <= 0.15 + 0.35 * (1.0 - v);
        case Shape::diamond: return std::abs(du) + std::abs(dv) <= 0.55;
        case Shape::plus: return std::abs(du) <= 1.0 / 6.0 || std::abs(dv) <= 1.0 / 6.0;
        case Shape::cross: return std::abs(u - v) <= 0.18 || std::abs(u + v - 1.0) <= 0.18;
        case Shape::ring: {
            double r2 = du * du + dv * dv;
            return r2 <= 0.52 * 0.52 && r2 >= 0.26 * 0.26;
        }
    }
    return false;
}

// Texture value factor at box-normalized coordinates. The four identity
// patterns are low-frequency with distinct spatial moments (u-bands,
// diagonal dots, v-ramp, radial core) so a small generator can reproduce
// them and pooled embeddings separate them at any rendered size.
inline double texture_value(int identity_id, double u, double v) {
    constexpr double kDim = 0.45;
    switch (identity_id) {
        case 0: // stripes: dim left band, bright right band
            return u < 0.5 ? kDim : 1.0;
        case 1: { // dots: dim disks on the main diagonal
            double d1 = (u - 0.25) * (u - 0.25) + (v - 0.25) * (v - 0.25);
            double d2 = (u - 0.75) * (u - 0.75) + (v - 0.75) * (v - 0.75);
            return (d1 <= 0.22 * 0.22 || d2 <= 0.22 * 0.22) ? kDim : 1.0;
        }
        case 2: // gradient: dim top to bright bottom
            return kDim + (1.0 - kDim) * v;
        case 3: { // ring: bright core, dim outer band
            double du = u - 0.5, dv = v - 0.5;
            return (du * du + dv * dv <= 0.3 * 0.3) ? 1.0 : kDim;
        }
        default: throw std::invalid_argument("texture_value: bad identity id");
    }
}

// Pixel-aligned box on the canvas grid.
struct PixelBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0; // half-open pixel bounds

    int w() const { return x1 - x0; }
    int h() const { return y1 - y0; }
    BoundingBox normalized() const {
        return BoundingBox{static_cast<double>(x0) / kCanvas, static_cast<double>(y0) / kCanvas,
                           static_cast<double>(x1) / kCanvas, static_cast<double>(y1) / kCanvas};
    }
    static PixelBox from_normalized(const BoundingBox& b) {
        return PixelBox{static_cast<int>(std::lround(b.x0 * kCanvas)), static_cast<int>(std::lround(b.y0 * kCanvas)),
                        static_cast<int>(std::lround(b.x1 * kCanvas)), static_cast<int>(std::lround(b.y1 * kCanvas))};
    }
};

// Rasterized shape mask of size h x w with 3x3 supersampling.
inline std::vector<uint8_t> rasterize_shape(Shape s, int w, int h) {
    std::vector<uint8_t> mask(static_cast<size_t>(w) * h, 0);
    for (int py = 0; py < h; ++py)
        for (int px = 0; px < w; ++px) {
            int hits = 0;
            for (int sy = 0; sy < 3; ++sy)
                for (int sx = 0; sx < 3; ++sx) {
                    double u = (px + (sx + 0.5) / 3.0) / w;
                    double v = (py + (sy + 0.5) / 3.0) / h;
                    if (shape_contains(s, u, v)) ++hits;
                }
            if (hits >= 2) mask[static_cast<size_t>(py) * w + px] = 1;
        }
    return mask;
}

// ---- scene model ----

struct SubjectSpec {
    int class_id = 0;
    int identity_id = 0;
    BoundingBox box;
};

template <class Real>
struct Image {
    int h = 0, w = 0;
    std::vector<Real> data; // (h*w*3) interleaved rgb

    Image() = default;
    Image(int hh, int ww, Real fill = Real(0)) : h(hh), w(ww), data(static_cast<size_t>(hh) * ww * 3, fill) {}

    Real& at(int y, int x, int c) { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    Real at(int y, int x, int c) const { return data[(static_cast<size_t>(y) * w + x) * 3 + c]; }
};

enum class SplitTag { train, eval };

template <class Real>
struct Scene {
    Image<Real> canvas; // kCanvas x kCanvas, values in [0,1]
    std::vector<int> prompt_tokens;
    std::vector<SubjectSpec> subjects;
    SplitTag split_tag = SplitTag::train;
};

inline constexpr double kBackgroundValue = 0.05;

// Deterministic painter: subjects drawn in list order, later over earlier.
template <class Real>
inline void render_subject(Image<Real>& canvas, const SubjectSpec& sub) {
    PixelBox pb = PixelBox::from_normalized(sub.box);
    Shape shape = shape_of_class(sub.class_id);
    const double* rgb = kColorRgb[color_of_class(sub.class_id)];
    auto mask = rasterize_shape(shape, pb.w(), pb.h());
    for (int py = 0; py < pb.h(); ++py)
        for (int px = 0; px < pb.w(); ++px) {
            if (!mask[static_cast<size_t>(py) * pb.w() + px]) continue;
            double u = (px + 0.5) / pb.w(), v = (py + 0.5) / pb.h();
            double val = texture_value(sub.identity_id, u, v);
            for (int c = 0; c < 3; ++c)
                canvas.at(pb.y0 + py, pb.x0 + px, c) = static_cast<Real>(rgb[c] * val);
        }
}

template <class Real>
inline Image<Real> render_scene_canvas(const std::vector<SubjectSpec>& subjects) {
    Image<Real> canvas(kCanvas, kCanvas, static_cast<Real>(kBackgroundValue));
    for (const auto& sub : subjects) render_subject(canvas, sub);
    return canvas;
}

inline std::vector<int> prompt_for_classes(const std::vector<int>& class_ids) {
    std::vector<int> toks{kTokScene};
    for (int c : class_ids) toks.push_back(c);
    return toks;
}

// ---- scene generation ----

enum class LayoutMode { prior, uniform };

// Class-typical home centers on a 4x4 cell grid; the layout prior that
// produces control collision when eval boxes are drawn uniformly instead.
inline void class_home_center(int class_id, double& cx, double& cy) {
    uint64_t h = hash_mix(static_cast<uint64_t>(class_id) * 2654435761ull + 17);
    int cell = static_cast<int>(h % 16);
    cx = (cell % 4) * 8.0 + 4.0;
    cy = (cell / 4) * 8.0 + 4.0;
}

struct SceneGenConfig {
    int min_side = 8;
    double prior_sigma_px = 2.5;
    int max_place_tries = 300;
    int max_scene_tries = 60;

    int max_side(int n_subjects) const {
        switch (n_subjects) {
            case 2: return 14;
            case 3: return 13;
            case 4: return 11;
            case 5: return 10;
            default: return 9;
        }
    }
};

namespace detail {

inline bool boxes_disjoint_with_gap(const PixelBox& a, const PixelBox& b, int gap) {
    return a.x1 + gap <= b.x0 || b.x1 + gap <= a.x0 || a.y1 + gap <= b.y0 || b.y1 + gap <= a.y0;
}

} // namespace detail

// Deterministic given the seed. Boxes are pixel-aligned, non-degenerate and
// pairwise disjoint with a 1-pixel gap; infeasible placement after bounded
// retries is an error. Classes can be pinned via forced_classes (eval sets
// and the prior sampler checks need this).
template <class Real>
inline Scene<Real> generate_scene(uint64_t seed, int n_subjects, LayoutMode mode,
                                  const std::vector<int>& forced_classes = {},
                                  const SceneGenConfig& cfg = SceneGenConfig{}) {
    if (n_subjects < 2 || n_subjects > 6) throw std::invalid_argument("generate_scene: n_subjects must be in [2,6]");
    Rng rng(derive_seed(seed, 0x5ce7e));

    for (int attempt = 0; attempt < cfg.max_scene_tries; ++attempt) {
        std::vector<SubjectSpec> subjects;
        std::vector<PixelBox> placed;
        bool ok = true;
        for (int i = 0; i < n_subjects && ok; ++i) {
            int class_id = i < static_cast<int>(forced_classes.size()) ? forced_classes[static_cast<size_t>(i)]
                                                                       : static_cast<int>(rng.uniform_int(0, kClassCount - 1));
            int identity = static_cast<int>(rng.uniform_int(0, kIdentityCount - 1));
            bool found = false;
            for (int t = 0; t < cfg.max_place_tries && !found; ++t) {
                int w = static_cast<int>(rng.uniform_int(cfg.min_side, cfg.max_side(n_subjects)));
                int h = static_cast<int>(rng.uniform_int(cfg.min_side, cfg.max_side(n_subjects)));
                double cx, cy;
                if (mode == LayoutMode::prior) {
                    double hx, hy;
                    class_home_center(class_id, hx, hy);
                    cx = hx + rng.gaussian() * cfg.prior_sigma_px;
                    cy = hy + rng.gaussian() * cfg.prior_sigma_px;
                } else {
                    cx = rng.uniform(0.0, kCanvas);
                    cy = rng.uniform(0.0, kCanvas);
                }
                int x0 = static_cast<int>(std::lround(cx - w * 0.5));
                int y0 = static_cast<int>(std::lround(cy - h * 0.5));
                x0 = std::clamp(x0, 0, kCanvas - w);
                y0 = std::clamp(y0, 0, kCanvas - h);
                PixelBox pb{x0, y0, x0 + w, y0 + h};
                bool clear = true;
                for (const auto& other : placed)
                    if (!detail::boxes_disjoint_with_gap(pb, other, 1)) {
                        clear = false;
                        break;
                    }
                if (clear) {
                    placed.push_back(pb);
                    subjects.push_back(SubjectSpec{class_id, identity, pb.normalized()});
                    found = true;
                }
            }
            if (!found) ok = false;
        }
        if (!ok) continue;

        Scene<Real> scene;
        scene.subjects = std::move(subjects);
        std::vector<int> class_ids;
        for (const auto& s : scene.subjects) class_ids.push_back(s.class_id);
        scene.prompt_tokens = prompt_for_classes(class_ids);
        scene.canvas = render_scene_canvas<Real>(scene.subjects);
        return scene;
    }
    throw std::runtime_error("generate_scene: infeasible placement after bounded retries");
}

// A canonical lone render of (class, identity); the reference image handed to
// the subject-synthesis pathway and the identity metric.
template <class Real>
inline Image<Real> canonical_reference(int class_id, int identity_id) {
    SubjectSpec sub{class_id, identity_id, BoundingBox{0.25, 0.25, 0.75, 0.75}};
    Image<Real> canvas = render_scene_canvas<Real>({sub});
    Image<Real> crop(16, 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) crop.at(y, x, c) = canvas.at(8 + y, 8 + x, c);
    return crop;
}

template <class Real>
inline Image<Real> resize_bilinear(const Image<Real>& img, int oh, int ow) {
    Image<Real> out(oh, ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double sy = (y + 0.5) * img.h / oh - 0.5;
            double sx = (x + 0.5) * img.w / ow - 0.5;
            int y0 = std::clamp(static_cast<int>(std::floor(sy)), 0, img.h - 1);
            int x0 = std::clamp(static_cast<int>(std::floor(sx)), 0, img.w - 1);
            int y1 = std::min(y0 + 1, img.h - 1), x1 = std::min(x0 + 1, img.w - 1);
            double fy = std::clamp(sy - y0, 0.0, 1.0), fx = std::clamp(sx - x0, 0.0, 1.0);
            for (int c = 0; c < 3; ++c) {
                double v = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
                           fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
                out.at(y, x, c) = static_cast<Real>(v);
            }
        }
    return out;
}

template <class Real>
inline Image<Real> crop_image(const Image<Real>& img, const BoundingBox& box) {
    PixelBox pb = PixelBox::from_normalized(box);
    if (pb.w() <= 0 || pb.h() <= 0) throw std::invalid_argument("crop_image: degenerate crop");
    Image<Real> out(pb.h(), pb.w());
    for (int y = 0; y < pb.h(); ++y)
        for (int x = 0; x < pb.w(); ++x)
            for (int c = 0; c < 3; ++c)
                out.at(y, x, c) = img.at(std::clamp(pb.y0 + y, 0, img.h - 1), std::clamp(pb.x0 + x, 0, img.w - 1), c);
    return out;
}

// ---- frozen toy encoders ----

// Text: an embedding table keyed by token id. Image: a fixed
// random-orthogonal projection of position-modulated 4x4 patches (the patch
// feature carries the patch's normalized position in the crop, so the
// mean-pooled embedding is a scale-invariant spatial-moment summary).
// Both bit-deterministic given the seed.
template <class Real>
struct ToyEncoders {
    int d_text = 0, d_img = 0;
    Tensor<Real> text_table; // (kVocabSize, d_text)
    Tensor<Real> patch_proj; // (kPatchDim, d_img) orthonormal columns

    static constexpr int kPatch = 4;
    static constexpr int kPixelDim = kPatch * kPatch * 3;
    static constexpr int kPatchDim = kPixelDim * 4; // pixels, u-, v-, uv-modulated

    void init(int dt, int di, uint64_t seed) {
        if (di > kPatchDim) throw std::invalid_argument("toy encoders: d_img too large for the patch feature");
        d_text = dt;
        d_img = di;
        Rng rng(derive_seed(seed, 0xe2c0de));
        text_table = Tensor<Real>::randn({kVocabSize, dt}, rng, static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dt))));
        // orthonormal columns via Gram-Schmidt on a seeded gaussian matrix
        std::vector<std::vector<double>> cols(static_cast<size_t>(di), std::vector<double>(kPatchDim));
        for (auto& col : cols)
            for (auto& v : col) v = rng.gaussian();
        for (size_t i = 0; i < cols.size(); ++i) {
            for (size_t j = 0; j < i; ++j) {
                double d = 0;
                for (int k = 0; k < kPatchDim; ++k) d += cols[i][k] * cols[j][k];
                for (int k = 0; k < kPatchDim; ++k) cols[i][k] -= d * cols[j][k];
            }
            double n = 0;
            for (int k = 0; k < kPatchDim; ++k) n += cols[i][k] * cols[i][k];
            n = std::sqrt(n);
            for (int k = 0; k < kPatchDim; ++k) cols[i][k] /= n;
        }
        patch_proj = Tensor<Real>({kPatchDim, di});
        for (int k = 0; k < kPatchDim; ++k)
            for (int i = 0; i < di; ++i) patch_proj.at(k, i) = static_cast<Real>(cols[static_cast<size_t>(i)][k]);
    }

    // token features for a prompt -> (L, d_text); unknown token is an error
    Tensor<Real> encode_prompt(const std::vector<int>& tokens) const {
        for (int t : tokens)
            if (t < 0 || t >= kVocabSize) throw std::invalid_argument("encode_prompt: unknown token id");
        Tensor<Real> out({static_cast<int>(tokens.size()), d_text});
        for (size_t i = 0; i < tokens.size(); ++i)
            std::copy(text_table.row(tokens[i]), text_table.row(tokens[i]) + d_text, out.row(static_cast<int>(i)));
        return out;
    }

    // class token feature f_T
    Tensor<Real> class_feature(int class_id) const {
        if (class_id < 0 || class_id >= kClassCount) throw std::invalid_argument("class_feature: bad class");
        Tensor<Real> out({d_text});
        std::copy(text_table.row(class_id), text_table.row(class_id) + d_text, out.data.begin());
        return out;
    }

    // crop -> (patch tokens (P, d_img), pooled unit-norm embedding (d_img)).
    // Patch tokens tile the native crop, so P grows with crop area. The
    // pooled embedding mean-pools the patch projections of a canonical
    // bilinear 16x16 view, which makes it invariant to the rendered size.
    std::pair<Tensor<Real>, Tensor<Real>> encode_reference(const Image<Real>& crop) const {
        if (crop.h <= 0 || crop.w <= 0 || crop.data.empty())
            throw std::invalid_argument("encode_reference: empty crop");
        Tensor<Real> tokens = project_tiles(crop);
        Image<Real> canonical = resize_bilinear(crop, 4 * kPatch, 4 * kPatch);
        Tensor<Real> canon_tokens = project_tiles(canonical);
        Tensor<Real> pooled({d_img});
        for (int r = 0; r < canon_tokens.rows(); ++r) axpy(Real(1), canon_tokens.row(r), pooled.data.data(), d_img);
        for (auto& v : pooled.data) v /= static_cast<Real>(canon_tokens.rows());
        Real n = std::sqrt(dot(pooled.data.data(), pooled.data.data(), d_img));
        if (n > static_cast<Real>(1e-12))
            for (auto& v : pooled.data) v /= n;
        return {tokens, pooled};
    }

    // ceil(h/4) x ceil(w/4) tiles, clamped edge sampling; pixels centered at
    // 0.5 and replicated with u-, v- and uv-position modulation.
    Tensor<Real> project_tiles(const Image<Real>& crop) const {
        const int ty = (crop.h + kPatch - 1) / kPatch;
        const int tx = (crop.w + kPatch - 1) / kPatch;
        Tensor<Real> tokens({ty * tx, d_img});
        std::vector<Real> patch(kPatchDim);
        for (int by = 0; by < ty; ++by)
            for (int bx = 0; bx < tx; ++bx) {
                const Real a = static_cast<Real>(2.0 * (bx * kPatch + kPatch * 0.5) / crop.w - 1.0);
                const Real bcoef = static_cast<Real>(2.0 * (by * kPatch + kPatch * 0.5) / crop.h - 1.0);
                int idx = 0;
                for (int py = 0; py < kPatch; ++py)
                    for (int px = 0; px < kPatch; ++px)
                        for (int c = 0; c < 3; ++c)
                            patch[static_cast<size_t>(idx++)] =
                                crop.at(std::min(by * kPatch + py, crop.h - 1), std::min(bx * kPatch + px, crop.w - 1), c) -
                                static_cast<Real>(0.5);
                // moment blocks carry the texture layout; weighted up so
                // identity patterns separate even on sparse shape masks
                const Real mw = static_cast<Real>(2.5);
                for (int i = 0; i < kPixelDim; ++i) {
                    patch[static_cast<size_t>(kPixelDim + i)] = patch[static_cast<size_t>(i)] * a * mw;
                    patch[static_cast<size_t>(2 * kPixelDim + i)] = patch[static_cast<size_t>(i)] * bcoef * mw;
                    patch[static_cast<size_t>(3 * kPixelDim + i)] = patch[static_cast<size_t>(i)] * a * bcoef * mw;
                }
                Real* out_row = tokens.row(by * tx + bx);
                for (int i = 0; i < d_img; ++i) out_row[i] = 0;
                gemm_nn_acc(patch.data(), patch_proj.data.data(), out_row, 1, kPatchDim, d_img);
            }
        return tokens;
    }
};

template <class Real>
inline Real cosine(const Tensor<Real>& a, const Tensor<Real>& b) {
    Real na = std::sqrt(dot(a.data.data(), a.data.data(), a.size()));
    Real nb = std::sqrt(dot(b.data.data(), b.data.data(), b.size()));
    if (na < static_cast<Real>(1e-12) || nb < static_cast<Real>(1e-12)) return 0;
    return dot(a.data.data(), b.data.data(), a.size()) / (na * nb);
}

// ---- dataset file IO ----
// magic "MUSEDS1" | u32 count | u32 H | u32 W | per scene: u32 prompt_len,
// u32 token ids, u32 n_subjects, per subject {u32 class, u32 identity,
// 4 x f32 box}, canvas as 3 raw f32 planes (R, G, B). split_tag is not
// serialized; the reader assigns the caller's split.

namespace detail {

inline constexpr char kDatasetMagic[7] = {'M', 'U', 'S', 'E', 'D', 'S', '1'};

inline void ds_put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t ds_get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("dataset: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
}

inline void ds_put_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    ds_put_u32(os, bits);
}

inline float ds_get_f32(std::istream& is) {
    uint32_t bits = ds_get_u32(is);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace detail

template <class Real>
inline void write_dataset(const std::vector<Scene<Real>>& scenes, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("dataset: cannot open for write: " + path);
    os.write(detail::kDatasetMagic, 7);
    detail::ds_put_u32(os, static_cast<uint32_t>(scenes.size()));
    detail::ds_put_u32(os, kCanvas);
    detail::ds_put_u32(os, kCanvas);
    for (const auto& scene : scenes) {
        detail::ds_put_u32(os, static_cast<uint32_t>(scene.prompt_tokens.size()));
        for (int t : scene.prompt_tokens) detail::ds_put_u32(os, static_cast<uint32_t>(t));
        detail::ds_put_u32(os, static_cast<uint32_t>(scene.subjects.size()));
        for (const auto& sub : scene.subjects) {
            detail::ds_put_u32(os, static_cast<uint32_t>(sub.class_id));
            detail::ds_put_u32(os, static_cast<uint32_t>(sub.identity_id));
            detail::ds_put_f32(os, static_cast<float>(sub.box.x0));
            detail::ds_put_f32(os, static_cast<float>(sub.box.y0));
            detail::ds_put_f32(os, static_cast<float>(sub.box.x1));
            detail::ds_put_f32(os, static_cast<float>(sub.box.y1));
        }
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < kCanvas; ++y)
                for (int x = 0; x < kCanvas; ++x) detail::ds_put_f32(os, static_cast<float>(scene.canvas.at(y, x, c)));
    }
    if (!os) throw std::runtime_error("dataset: write failed: " + path);
}

template <class Real>
inline std::vector<Scene<Real>> read_dataset(const std::string& path, SplitTag split = SplitTag::train) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("dataset: cannot open: " + path);
    char magic[7];
    if (!is.read(magic, 7)) throw std::runtime_error("dataset: truncated header");
    if (std::memcmp(magic, detail::kDatasetMagic, 7) != 0)
        throw std::runtime_error("dataset: bad magic/version in " + path);
    uint32_t count = detail::ds_get_u32(is);
    uint32_t h = detail::ds_get_u32(is), w = detail::ds_get_u32(is);
    if (h != kCanvas || w != kCanvas) throw std::runtime_error("dataset: unsupported canvas size");
    std::vector<Scene<Real>> scenes;
    scenes.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        Scene<Real> scene;
        scene.split_tag = split;
        uint32_t np = detail::ds_get_u32(is);
        for (uint32_t t = 0; t < np; ++t) scene.prompt_tokens.push_back(static_cast<int>(detail::ds_get_u32(is)));
        uint32_t ns = detail::ds_get_u32(is);
        for (uint32_t s = 0; s < ns; ++s) {
            SubjectSpec sub;
            sub.class_id = static_cast<int>(detail::ds_get_u32(is));
            sub.identity_id = static_cast<int>(detail::ds_get_u32(is));
            sub.box.x0 = detail::ds_get_f32(is);
            sub.box.y0 = detail::ds_get_f32(is);
            sub.box.x1 = detail::ds_get_f32(is);
            sub.box.y1 = detail::ds_get_f32(is);
            scene.subjects.push_back(sub);
        }
        scene.canvas = Image<Real>(kCanvas, kCanvas);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < kCanvas; ++y)
                for (int x = 0; x < kCanvas; ++x) scene.canvas.at(y, x, c) = static_cast<Real>(detail::ds_get_f32(is));
        if (!is) throw std::runtime_error("dataset: truncated scene record");
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

} // namespace muse
