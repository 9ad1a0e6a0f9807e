#pragma once

#include <string>

#include "nb/rng.hpp"
#include "nb/shapeworld.hpp"
#include "nb/tensor.hpp"

namespace nb {

enum class PerturbKind : uint8_t {
    none = 0,
    gaussian_feature = 1,
    feature_dropout = 2,
    language_noise = 3,
    pixel_color_jitter = 4,
    pixel_random_crop = 5,
    pixel_gaussian = 6,
};

PerturbKind perturb_kind_from_string(const std::string& s);
const char* perturb_kind_name(PerturbKind k);

// Feature or pixel perturbation: kind, amplitude s on a truncated standard
// normal, per-example trigger probability p, and the dropout rate for the
// feature_dropout variant.
struct PerturbSpec {
    PerturbKind kind = PerturbKind::none;
    float scale = 0.0f;
    float prob = 0.0f;
    float dropout_rate = 0.1f;

    bool is_pixel() const {
        return kind == PerturbKind::pixel_color_jitter || kind == PerturbKind::pixel_random_crop ||
               kind == PerturbKind::pixel_gaussian;
    }
    bool is_identity() const { return kind == PerturbKind::none; }
    void validate() const;
};

// Additive truncated-Gaussian noise on a feature block, one Bernoulli
// trigger per call. Untriggered (or zero-scale) calls return the input
// tensor unchanged, bit for bit.
Tensor perturb_gaussian_block(const Tensor& block, float scale, float prob, RngStream& rng);

// Element dropout with survivor rescaling by 1/(1-rate); rate 1 zeroes the
// whole block.
Tensor perturb_dropout(const Tensor& block, const PerturbSpec& spec, RngStream& rng);

// Dispatch for the visual feature block (gaussian_feature / feature_dropout).
Tensor perturb_visual(const Tensor& block, const PerturbSpec& spec, RngStream& rng);

// Same noise law as perturb_visual but meant for the language block.
Tensor perturb_language(const Tensor& block, const PerturbSpec& spec, RngStream& rng);

RasterImage perturb_pixels(const RasterImage& image, const PerturbSpec& spec, RngStream& rng);

// exposed for the crop-geometry test
RasterImage crop_and_rescale(const RasterImage& image, int window, int off_y, int off_x);
int crop_shrink_cells(float scale);  // s' = round(4 s)

}  // namespace nb
