#include "nb/perturb.hpp"

#include <algorithm>
#include <cmath>

namespace nb {

PerturbKind perturb_kind_from_string(const std::string& s) {
    if (s == "none") return PerturbKind::none;
    if (s == "gaussian_feature") return PerturbKind::gaussian_feature;
    if (s == "feature_dropout") return PerturbKind::feature_dropout;
    if (s == "language_noise") return PerturbKind::language_noise;
    if (s == "pixel_color_jitter") return PerturbKind::pixel_color_jitter;
    if (s == "pixel_random_crop") return PerturbKind::pixel_random_crop;
    if (s == "pixel_gaussian") return PerturbKind::pixel_gaussian;
    throw ConfigError("unknown perturbation kind: " + s);
}

const char* perturb_kind_name(PerturbKind k) {
    switch (k) {
        case PerturbKind::none: return "none";
        case PerturbKind::gaussian_feature: return "gaussian_feature";
        case PerturbKind::feature_dropout: return "feature_dropout";
        case PerturbKind::language_noise: return "language_noise";
        case PerturbKind::pixel_color_jitter: return "pixel_color_jitter";
        case PerturbKind::pixel_random_crop: return "pixel_random_crop";
        case PerturbKind::pixel_gaussian: return "pixel_gaussian";
    }
    return "?";
}

void PerturbSpec::validate() const {
    if (prob < 0.0f || prob > 1.0f) throw ConfigError("perturb.prob must be in [0,1]");
    if (scale < 0.0f) throw ConfigError("perturb.scale must be nonnegative");
    if (dropout_rate < 0.0f || dropout_rate > 1.0f) throw RateOutOfRangeError("perturb.dropout_rate must be in [0,1]");
}

Tensor perturb_gaussian_block(const Tensor& block, float scale, float prob, RngStream& rng) {
    if (scale <= 0.0f || prob <= 0.0f) return block;
    if (!rng.next_bernoulli(prob)) return block;
    Tensor noise = Tensor::zeros(block.shape());
    float* np = noise.data();
    for (int64_t i = 0; i < noise.size(); ++i) np[i] = scale * rng.next_trunc_normal();
    return ops::add(block, noise);
}

Tensor perturb_dropout(const Tensor& block, const PerturbSpec& spec, RngStream& rng) {
    if (spec.dropout_rate < 0.0f || spec.dropout_rate > 1.0f)
        throw RateOutOfRangeError("feature_dropout rate must be in [0,1]");
    const float rate = spec.dropout_rate;
    if (rate == 0.0f) return block;
    Tensor mask = Tensor::zeros(block.shape());
    if (rate < 1.0f) {
        const float keep_scale = 1.0f / (1.0f - rate);
        float* mp = mask.data();
        for (int64_t i = 0; i < mask.size(); ++i) mp[i] = rng.next_uniform() < rate ? 0.0f : keep_scale;
    }
    return ops::mul(block, mask);
}

Tensor perturb_visual(const Tensor& block, const PerturbSpec& spec, RngStream& rng) {
    switch (spec.kind) {
        case PerturbKind::gaussian_feature:
            return perturb_gaussian_block(block, spec.scale, spec.prob, rng);
        case PerturbKind::feature_dropout:
            return perturb_dropout(block, spec, rng);
        default:
            return block;
    }
}

Tensor perturb_language(const Tensor& block, const PerturbSpec& spec, RngStream& rng) {
    if (spec.kind != PerturbKind::language_noise) return block;
    return perturb_gaussian_block(block, spec.scale, spec.prob, rng);
}

int crop_shrink_cells(float scale) { return static_cast<int>(std::lround(scale * 4.0f)); }

RasterImage crop_and_rescale(const RasterImage& image, int window, int off_y, int off_x) {
    RasterImage out;
    const int size = RasterImage::kWidth;
    for (int y = 0; y < size; ++y) {
        const int sy = off_y + y * window / size;
        for (int x = 0; x < size; ++x) {
            const int sx = off_x + x * window / size;
            for (int c = 0; c < RasterImage::kChannels; ++c) out.at(y, x, c) = image.at(sy, sx, c);
        }
    }
    return out;
}

RasterImage perturb_pixels(const RasterImage& image, const PerturbSpec& spec, RngStream& rng) {
    if (spec.scale <= 0.0f) return image;
    switch (spec.kind) {
        case PerturbKind::pixel_color_jitter: {
            RasterImage out = image;
            float factor[3];
            for (float& f : factor) f = 1.0f + spec.scale * (2.0f * static_cast<float>(rng.next_uniform()) - 1.0f);
            for (size_t i = 0; i < out.pixels.size(); ++i)
                out.pixels[i] = std::clamp(out.pixels[i] * factor[i % 3], 0.0f, 1.0f);
            return out;
        }
        case PerturbKind::pixel_random_crop: {
            const int shrink = crop_shrink_cells(spec.scale);
            if (shrink <= 0) return image;
            const int window = RasterImage::kWidth - 4 * shrink;
            if (window <= 0) throw ConfigError("pixel_random_crop: scale too large, window vanished");
            const int max_off = RasterImage::kWidth - window;
            const int off_y = static_cast<int>(rng.next_below(static_cast<uint64_t>(max_off) + 1));
            const int off_x = static_cast<int>(rng.next_below(static_cast<uint64_t>(max_off) + 1));
            return crop_and_rescale(image, window, off_y, off_x);
        }
        case PerturbKind::pixel_gaussian: {
            RasterImage out = image;
            for (float& p : out.pixels) p = std::clamp(p + spec.scale * rng.next_trunc_normal(), 0.0f, 1.0f);
            return out;
        }
        default:
            return image;
    }
}

}  // namespace nb
