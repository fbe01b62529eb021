#pragma once

// Augmentation policies. The weak chain is random-resized-crop, horizontal
// flip, color jitter, grayscale, Gaussian blur, then per-channel
// normalization. The strong chain flips a p=0.5 coin between a reduced
// 8-sub-policy auto-augment table and the weak chain. "Gaussian noise" in
// the weak list runs as Gaussian blur (the convention of the augmentation
// recipe this follows); grayscale uses ITU-R 601 luminance weights.
//
// Every function is a pure map of (image bytes, rng state), so per-sample
// seeding makes augmentation independent of data-loading order. All crops
// are sampled in continuous coordinates: the source-area ratio equals the
// sampled scale exactly, and the feasible-aspect clamp keeps rectangles
// inside the image, so no fallback path can violate the scale range.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mugs/dataset.hpp"
#include "mugs/rng.hpp"
#include "mugs/tensor.hpp"

namespace mugs {

struct NormalizeStats {
    std::array<float, 3> mean{0.5f, 0.5f, 0.5f};  // in [0,1] pixel units
    std::array<float, 3> stddev{0.25f, 0.25f, 0.25f};
};

// standard constants for ingesting real photographic images
inline NormalizeStats imagenet_stats() {
    return {{0.485f, 0.456f, 0.406f}, {0.229f, 0.224f, 0.225f}};
}

inline NormalizeStats compute_dataset_stats(const Dataset& ds) {
    double sum[3] = {0, 0, 0}, sq[3] = {0, 0, 0};
    const int64_t n_px = ds.count * ds.height * ds.width;
    if (n_px == 0) throw Error("compute_dataset_stats: empty dataset");
    for (int64_t i = 0; i < n_px; ++i)
        for (int ch = 0; ch < 3; ++ch) {
            const double v = ds.pixels[static_cast<size_t>(i * 3 + ch)] / 255.0;
            sum[ch] += v;
            sq[ch] += v * v;
        }
    NormalizeStats st;
    for (int ch = 0; ch < 3; ++ch) {
        const double m = sum[ch] / static_cast<double>(n_px);
        const double var = std::max(sq[ch] / static_cast<double>(n_px) - m * m, 0.0);
        st.mean[ch] = static_cast<float>(m);
        st.stddev[ch] = std::max(static_cast<float>(std::sqrt(var)), 1e-3f);
    }
    return st;
}

struct AugmentPolicy {
    enum class Kind { weak, strong };
    Kind kind = Kind::weak;
    int64_t out_size = 32;
    std::array<float, 2> scale_range{0.25f, 1.0f};
    float flip_p = 0.5f;
    float jitter_p = 0.8f;
    float grayscale_p = 0.2f;
    float blur_p = 0.5f;
    float autoaugment_p = 0.5f;  // consulted by the strong chain only

    void validate() const {
        if (scale_range[0] <= 0.0f || scale_range[1] > 1.0f || scale_range[0] > scale_range[1])
            throw ConfigError("AugmentPolicy: scale range must satisfy 0 < lo <= hi <= 1");
        if (out_size < 4) throw ConfigError("AugmentPolicy: out_size too small");
    }
};

inline AugmentPolicy weak_policy(int64_t out_size, float scale_lo, float scale_hi) {
    AugmentPolicy p;
    p.kind = AugmentPolicy::Kind::weak;
    p.out_size = out_size;
    p.scale_range = {scale_lo, scale_hi};
    return p;
}

inline AugmentPolicy strong_policy(int64_t out_size, float scale_lo, float scale_hi) {
    AugmentPolicy p = weak_policy(out_size, scale_lo, scale_hi);
    p.kind = AugmentPolicy::Kind::strong;
    return p;
}

namespace detail {

constexpr float kGrayR = 0.299f, kGrayG = 0.587f, kGrayB = 0.114f;  // ITU-R 601

struct FloatImage {
    int64_t size = 0;                // square, HWC
    std::vector<float> px;           // values clamped to [0,1]
    float& at(int64_t y, int64_t x, int ch) { return px[(y * size + x) * 3 + ch]; }
    float at(int64_t y, int64_t x, int ch) const { return px[(y * size + x) * 3 + ch]; }
};

inline float sample_bilinear_u8(const ImageView& src, float sy, float sx, int ch) {
    sx = std::clamp(sx, 0.0f, static_cast<float>(src.width - 1));
    sy = std::clamp(sy, 0.0f, static_cast<float>(src.height - 1));
    const int64_t x0 = static_cast<int64_t>(sx), y0 = static_cast<int64_t>(sy);
    const int64_t x1 = std::min(x0 + 1, src.width - 1), y1 = std::min(y0 + 1, src.height - 1);
    const float fx = sx - static_cast<float>(x0), fy = sy - static_cast<float>(y0);
    auto px = [&](int64_t y, int64_t x) {
        return static_cast<float>(src.data[(y * src.width + x) * 3 + ch]) / 255.0f;
    };
    return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) +
           fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
}

// continuous random-resized crop; area ratio equals the sampled scale exactly
inline FloatImage random_resized_crop(const ImageView& src, Rng& rng, int64_t out,
                                      float scale_lo, float scale_hi) {
    const float area = static_cast<float>(src.height * src.width) * rng.uniform(scale_lo, scale_hi);
    const float feas_lo = area / static_cast<float>(src.height * src.height);
    const float feas_hi =
        std::max(static_cast<float>(src.width * src.width) / area, feas_lo);  // 1-ulp guard
    const float a_lo = std::clamp(0.75f, feas_lo, feas_hi);
    const float a_hi = std::clamp(4.0f / 3.0f, feas_lo, feas_hi);
    const float aspect = rng.uniform(a_lo, a_hi);
    const float w = std::min(std::sqrt(area * aspect), static_cast<float>(src.width));
    const float h = std::min(std::sqrt(area / aspect), static_cast<float>(src.height));
    const float x0 = rng.uniform(0.0f, static_cast<float>(src.width) - w);
    const float y0 = rng.uniform(0.0f, static_cast<float>(src.height) - h);

    FloatImage img;
    img.size = out;
    img.px.resize(static_cast<size_t>(out * out * 3));
    for (int64_t i = 0; i < out; ++i)
        for (int64_t j = 0; j < out; ++j) {
            const float sy = y0 + (static_cast<float>(i) + 0.5f) * h / static_cast<float>(out) - 0.5f;
            const float sx = x0 + (static_cast<float>(j) + 0.5f) * w / static_cast<float>(out) - 0.5f;
            for (int ch = 0; ch < 3; ++ch)
                img.at(i, j, ch) = sample_bilinear_u8(src, sy, sx, ch);
        }
    return img;
}

inline void hflip(FloatImage& img) {
    for (int64_t y = 0; y < img.size; ++y)
        for (int64_t x = 0; x < img.size / 2; ++x)
            for (int ch = 0; ch < 3; ++ch)
                std::swap(img.at(y, x, ch), img.at(y, img.size - 1 - x, ch));
}

inline void clamp01(FloatImage& img) {
    for (float& v : img.px) v = std::clamp(v, 0.0f, 1.0f);
}

inline float mean_luminance(const FloatImage& img) {
    double acc = 0.0;
    for (int64_t i = 0; i < img.size * img.size; ++i)
        acc += kGrayR * img.px[i * 3] + kGrayG * img.px[i * 3 + 1] + kGrayB * img.px[i * 3 + 2];
    return static_cast<float>(acc / static_cast<double>(img.size * img.size));
}

inline void adjust_brightness(FloatImage& img, float factor) {
    for (float& v : img.px) v *= factor;
    clamp01(img);
}

inline void adjust_contrast(FloatImage& img, float factor) {
    const float mu = mean_luminance(img);
    for (float& v : img.px) v = mu + factor * (v - mu);
    clamp01(img);
}

inline void adjust_saturation(FloatImage& img, float factor) {
    for (int64_t i = 0; i < img.size * img.size; ++i) {
        const float g =
            kGrayR * img.px[i * 3] + kGrayG * img.px[i * 3 + 1] + kGrayB * img.px[i * 3 + 2];
        for (int ch = 0; ch < 3; ++ch) img.px[i * 3 + ch] = g + factor * (img.px[i * 3 + ch] - g);
    }
    clamp01(img);
}

inline void color_jitter(FloatImage& img, Rng& rng) {
    adjust_brightness(img, rng.uniform(0.6f, 1.4f));
    adjust_contrast(img, rng.uniform(0.6f, 1.4f));
    adjust_saturation(img, rng.uniform(0.8f, 1.2f));
}

inline void to_grayscale(FloatImage& img) {
    for (int64_t i = 0; i < img.size * img.size; ++i) {
        const float g =
            kGrayR * img.px[i * 3] + kGrayG * img.px[i * 3 + 1] + kGrayB * img.px[i * 3 + 2];
        img.px[i * 3] = img.px[i * 3 + 1] = img.px[i * 3 + 2] = g;
    }
}

inline void gaussian_blur(FloatImage& img, float sigma) {
    const int64_t radius = std::max<int64_t>(1, static_cast<int64_t>(std::ceil(2.0f * sigma)));
    std::vector<float> kernel(static_cast<size_t>(2 * radius + 1));
    float norm = 0.0f;
    for (int64_t i = -radius; i <= radius; ++i) {
        const float v = std::exp(-0.5f * static_cast<float>(i * i) / (sigma * sigma));
        kernel[static_cast<size_t>(i + radius)] = v;
        norm += v;
    }
    for (float& v : kernel) v /= norm;
    const int64_t S = img.size;
    auto clampi = [&](int64_t v) { return std::clamp<int64_t>(v, 0, S - 1); };
    std::vector<float> tmp(img.px.size());
    for (int64_t y = 0; y < S; ++y)  // horizontal pass
        for (int64_t x = 0; x < S; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                float acc = 0.0f;
                for (int64_t t = -radius; t <= radius; ++t)
                    acc += kernel[static_cast<size_t>(t + radius)] * img.at(y, clampi(x + t), ch);
                tmp[(y * S + x) * 3 + ch] = acc;
            }
    for (int64_t y = 0; y < S; ++y)  // vertical pass
        for (int64_t x = 0; x < S; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                float acc = 0.0f;
                for (int64_t t = -radius; t <= radius; ++t)
                    acc += kernel[static_cast<size_t>(t + radius)] * tmp[(clampi(y + t) * S + x) * 3 + ch];
                img.at(y, x, ch) = acc;
            }
}

// inverse-mapped affine resample with edge clamp
template <typename MapFn>
inline void affine_resample(FloatImage& img, MapFn&& src_of_dst) {
    const int64_t S = img.size;
    std::vector<float> out(img.px.size());
    for (int64_t y = 0; y < S; ++y)
        for (int64_t x = 0; x < S; ++x) {
            auto [sy, sx] = src_of_dst(static_cast<float>(y), static_cast<float>(x));
            sy = std::clamp(sy, 0.0f, static_cast<float>(S - 1));
            sx = std::clamp(sx, 0.0f, static_cast<float>(S - 1));
            const int64_t x0 = static_cast<int64_t>(sx), y0 = static_cast<int64_t>(sy);
            const int64_t x1 = std::min(x0 + 1, S - 1), y1 = std::min(y0 + 1, S - 1);
            const float fx = sx - static_cast<float>(x0), fy = sy - static_cast<float>(y0);
            for (int ch = 0; ch < 3; ++ch) {
                const float v = (1 - fy) * ((1 - fx) * img.at(y0, x0, ch) + fx * img.at(y0, x1, ch)) +
                                fy * ((1 - fx) * img.at(y1, x0, ch) + fx * img.at(y1, x1, ch));
                out[(y * S + x) * 3 + ch] = v;
            }
        }
    img.px = std::move(out);
}

inline void rotate_deg(FloatImage& img, float deg) {
    const float rad = deg * 3.14159265f / 180.0f;
    const float c = std::cos(rad), s = std::sin(rad);
    const float mid = static_cast<float>(img.size - 1) * 0.5f;
    affine_resample(img, [&](float y, float x) {
        const float dy = y - mid, dx = x - mid;
        return std::pair<float, float>{mid + c * dy - s * dx, mid + s * dy + c * dx};
    });
}

inline void shear_x_deg(FloatImage& img, float deg) {
    const float t = std::tan(deg * 3.14159265f / 180.0f);
    const float mid = static_cast<float>(img.size - 1) * 0.5f;
    affine_resample(img, [&](float y, float x) {
        return std::pair<float, float>{y, x + t * (y - mid)};
    });
}

inline void translate_px(FloatImage& img, float dy, float dx) {
    affine_resample(img, [&](float y, float x) {
        return std::pair<float, float>{y - dy, x - dx};
    });
}

inline void posterize(FloatImage& img, int bits) {
    const float levels = static_cast<float>(1 << bits);
    for (float& v : img.px)
        v = std::clamp(std::floor(v * levels) / levels, 0.0f, 1.0f);
}

inline void solarize(FloatImage& img, float threshold) {
    for (float& v : img.px)
        if (v >= threshold) v = 1.0f - v;
}

inline void sharpness(FloatImage& img, float factor) {
    FloatImage smooth = img;
    gaussian_blur(smooth, 0.8f);
    for (size_t i = 0; i < img.px.size(); ++i)
        img.px[i] = smooth.px[i] + factor * (img.px[i] - smooth.px[i]);
    clamp01(img);
}

// reduced auto-augment table: one stochastic sub-policy per draw
inline void apply_autoaugment(FloatImage& img, Rng& rng) {
    const uint64_t pick = rng.next_below(8);
    const float sign = rng.bernoulli(0.5) ? 1.0f : -1.0f;
    switch (pick) {
        case 0: rotate_deg(img, sign * rng.uniform(5.0f, 15.0f)); break;
        case 1: posterize(img, 4); break;
        case 2: solarize(img, 0.5f); break;
        case 3: adjust_contrast(img, 1.0f + sign * rng.uniform(0.2f, 0.5f)); break;
        case 4: adjust_brightness(img, 1.0f + sign * rng.uniform(0.1f, 0.3f)); break;
        case 5: sharpness(img, 1.5f); break;
        case 6: shear_x_deg(img, sign * rng.uniform(4.0f, 10.0f)); break;
        case 7:
            translate_px(img, sign * rng.uniform(1.0f, 3.0f),
                         (rng.bernoulli(0.5) ? 1.0f : -1.0f) * rng.uniform(1.0f, 3.0f));
            break;
        default: break;
    }
    clamp01(img);
}

inline Tensor normalize_to_tensor(const FloatImage& img, const NormalizeStats& stats) {
    std::vector<float> out(img.px.size());
    for (size_t i = 0; i < img.px.size(); ++i) {
        const int ch = static_cast<int>(i % 3);
        out[i] = (std::clamp(img.px[i], 0.0f, 1.0f) - stats.mean[static_cast<size_t>(ch)]) /
                 stats.stddev[static_cast<size_t>(ch)];
    }
    return Tensor::from_data({img.size, img.size, 3}, std::move(out));
}

}  // namespace detail

// weak chain: crop, flip, jitter, grayscale, blur, normalize
inline Tensor weak_augment(const ImageView& image, Rng& rng, const AugmentPolicy& policy,
                           const NormalizeStats& stats) {
    policy.validate();
    detail::FloatImage img = detail::random_resized_crop(image, rng, policy.out_size,
                                                         policy.scale_range[0], policy.scale_range[1]);
    if (rng.bernoulli(policy.flip_p)) detail::hflip(img);
    if (rng.bernoulli(policy.jitter_p)) detail::color_jitter(img, rng);
    if (rng.bernoulli(policy.grayscale_p)) detail::to_grayscale(img);
    if (rng.bernoulli(policy.blur_p)) detail::gaussian_blur(img, rng.uniform(0.1f, 1.2f));
    return detail::normalize_to_tensor(img, stats);
}

// strong chain: p=autoaugment_p coin picks the auto-augment sub-policy
// branch, otherwise the weak chain continues on the same rng stream
inline Tensor strong_augment(const ImageView& image, Rng& rng, const AugmentPolicy& policy,
                             const NormalizeStats& stats) {
    policy.validate();
    if (rng.bernoulli(policy.autoaugment_p)) {
        detail::FloatImage img = detail::random_resized_crop(
            image, rng, policy.out_size, policy.scale_range[0], policy.scale_range[1]);
        if (rng.bernoulli(policy.flip_p)) detail::hflip(img);
        detail::apply_autoaugment(img, rng);
        return detail::normalize_to_tensor(img, stats);
    }
    return weak_augment(image, rng, policy, stats);
}

inline Tensor augment(const ImageView& image, Rng& rng, const AugmentPolicy& policy,
                      const NormalizeStats& stats) {
    return policy.kind == AugmentPolicy::Kind::strong ? strong_augment(image, rng, policy, stats)
                                                      : weak_augment(image, rng, policy, stats);
}

// one image's multi-crop set: 2 globals under the (weak) teacher policy plus
// V locals under the (strong) student policy
struct CropSet {
    std::vector<Tensor> globals;
    std::vector<Tensor> locals;
};

inline CropSet multi_crop(const ImageView& image, Rng& rng, const AugmentPolicy& policy_teacher,
                          const AugmentPolicy& policy_student, int64_t v,
                          const NormalizeStats& stats) {
    if (v < 0) throw ConfigError("multi_crop: V must be nonnegative");
    CropSet out;
    out.globals.reserve(2);
    for (int i = 0; i < 2; ++i) out.globals.push_back(augment(image, rng, policy_teacher, stats));
    out.locals.reserve(static_cast<size_t>(v));
    for (int64_t i = 0; i < v; ++i) out.locals.push_back(augment(image, rng, policy_student, stats));
    return out;
}

// stacks b equally sized [S x S x 3] crops into one [b x S x S x 3] batch
inline Tensor stack_images(const std::vector<Tensor>& images) {
    if (images.empty()) throw Error("stack_images: empty batch");
    const Shape& s0 = images[0].shape();
    std::vector<float> data;
    data.reserve(images.size() * static_cast<size_t>(images[0].numel()));
    for (const Tensor& t : images) {
        if (t.shape() != s0)
            throw Error("stack_images: mixed shapes " + shape_str(s0) + " vs " + shape_str(t.shape()));
        data.insert(data.end(), t.data().begin(), t.data().end());
    }
    return Tensor::from_data({static_cast<int64_t>(images.size()), s0[0], s0[1], s0[2]},
                             std::move(data));
}

}  // namespace mugs
