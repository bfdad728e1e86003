#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace divctl {

// Grayscale image, row-major, values in [-1, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> px;

    Image() = default;
    Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), px(h * w, fill) {}
    double& at(std::size_t r, std::size_t c) { return px[r * width + c]; }
    double at(std::size_t r, std::size_t c) const { return px[r * width + c]; }
    bool operator==(const Image&) const = default;
};

enum class TransformKind {
    edge_sobel,
    edge_laplacian,
    blur_box3,
    blur_box5,
    pixelate4,
    mask_border,
    posterize4,
    invert_gray,
    gradient_x,
    threshold_binary,
    shuffle_patches,
    checker_mask,
};

enum class ShiftClass { basic, novel_low, novel_high };

std::string to_string(TransformKind kind);
// Throws ConfigError for unknown names.
TransformKind parse_transform_kind(std::string_view name);
std::string to_string(ShiftClass shift);

struct ConditionSpec {
    std::string condition_id;
    std::string instruction;
    TransformKind transform_kind;
    ShiftClass shift_class;
    // Basic condition a novel_low one perturbs; empty otherwise.
    std::string sibling;
    // Alternative wordings with the same meaning, for zero-shot probes.
    std::vector<std::string> synonyms;
};

// Default condition registry: 8 basic, 2 novel_low, 2 novel_high.
//
//   id                 kind              plays the role of
//   sobel_edges        edge_sobel        Canny
//   box_blur           blur_box3         Depth
//   pixel_blocks       pixelate4         BBox
//   border_outpaint    mask_border       Outpainting
//   tone_segments      posterize4        Segmentation
//   negative_sketch    invert_gray       Sketch
//   relief_shading     gradient_x        Normal
//   binary_silhouette  threshold_binary  Hed
//   laplacian_edges    edge_laplacian    novel low-shift (sibling sobel_edges)
//   wide_box_blur      blur_box5         novel low-shift (sibling box_blur)
//   shuffled_tiles     shuffle_patches   novel high-shift
//   checker_occlusion  checker_mask      novel high-shift
const std::vector<ConditionSpec>& default_registry();

// Applies the condition transform. `seed` keys transforms with internal
// randomness (the tile permutation of shuffle_patches).
Image apply_condition(const Image& image, const ConditionSpec& spec, std::uint64_t seed = 0);
Image apply_transform(const Image& image, TransformKind kind, std::uint64_t seed = 0);

// 1-3 anti-aliased primitives on a shaded background; image i depends only on
// (seed, i). Uses up to DIVCTL_THREADS worker threads.
std::vector<Image> generate_shapes(std::size_t n, std::uint64_t seed, std::size_t size = 16);
Image generate_shape(std::uint64_t seed, std::uint64_t index, std::size_t size = 16);
// Fraction of pixels covered by primitives (alpha > 0.5) for image i.
double shape_coverage(std::uint64_t seed, std::uint64_t index, std::size_t size = 16);

// Synthesized images plus the condition registry.
class ConditionBank {
public:
    ConditionBank(std::size_t n_images, std::uint64_t seed, std::size_t image_size = 16,
                  std::vector<ConditionSpec> registry = default_registry());

    const std::vector<Image>& images() const { return images_; }
    const std::vector<ConditionSpec>& conditions() const { return registry_; }
    std::uint64_t seed() const { return seed_; }
    std::size_t image_size() const { return image_size_; }

    // Throws ConfigError if the id is unknown.
    const ConditionSpec& find(std::string_view condition_id) const;
    std::size_t index_of(std::string_view condition_id) const;
    std::vector<std::size_t> indices_of(ShiftClass shift) const;

    Image condition_image(std::size_t image_index, std::size_t condition_index) const;

private:
    std::vector<ConditionSpec> registry_;
    std::vector<Image> images_;
    std::uint64_t seed_;
    std::size_t image_size_;
};

struct BatchItem {
    std::size_t image_index;
    std::size_t condition_index;  // into ConditionBank::conditions()
};

// Batch b = items drawn from Rng(seed, data, b): per item an image index
// below(n_images) then a condition below(conditions.size()).
class DatasetIter {
public:
    DatasetIter(const ConditionBank& bank, std::vector<std::size_t> conditions, std::size_t batch_size,
                std::uint64_t seed, std::size_t n_images = 0);

    std::vector<BatchItem> batch_at(std::uint64_t index) const;
    std::vector<BatchItem> next() { return batch_at(cursor_++); }
    std::uint64_t cursor() const { return cursor_; }
    void seek(std::uint64_t index) { cursor_ = index; }
    const std::vector<std::size_t>& conditions() const { return conditions_; }

private:
    const ConditionBank* bank_;
    std::vector<std::size_t> conditions_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t n_images_;
    std::uint64_t cursor_ = 0;
};

// Mean SSIM over all 8x8 windows (stride 1, uniform weights, population
// moments), K1 = 0.01, K2 = 0.03, dynamic range 2.
double metric_ssim(const Image& a, const Image& b);

struct RepaHead;
// Mean per-patch cosine of frozen-encoder embeddings. A patch that is zero in
// both images counts as 1, zero in exactly one as 0.
double metric_encoder_sim(const RepaHead& head, const Image& a, const Image& b, std::size_t patch_size);

}  // namespace divctl
