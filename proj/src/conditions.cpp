#include "divctl/conditions.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <thread>

#include "divctl/diffusion.hpp"
#include "divctl/errors.hpp"
#include "divctl/ops.hpp"
#include "divctl/rng.hpp"

namespace divctl {

namespace {

constexpr std::size_t kTile = 4;

struct KindName {
    TransformKind kind;
    const char* name;
};

constexpr KindName kKindNames[] = {
    {TransformKind::edge_sobel, "edge_sobel"},
    {TransformKind::edge_laplacian, "edge_laplacian"},
    {TransformKind::blur_box3, "blur_box3"},
    {TransformKind::blur_box5, "blur_box5"},
    {TransformKind::pixelate4, "pixelate4"},
    {TransformKind::mask_border, "mask_border"},
    {TransformKind::posterize4, "posterize4"},
    {TransformKind::invert_gray, "invert_gray"},
    {TransformKind::gradient_x, "gradient_x"},
    {TransformKind::threshold_binary, "threshold_binary"},
    {TransformKind::shuffle_patches, "shuffle_patches"},
    {TransformKind::checker_mask, "checker_mask"},
};

// Half-sample symmetric extension: index -1 maps to 0, -2 to 1, n to n-1.
std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
    const auto nn = static_cast<std::ptrdiff_t>(n);
    while (i < 0 || i >= nn) {
        i = i < 0 ? -i - 1 : 2 * nn - i - 1;
    }
    return static_cast<std::size_t>(i);
}

double px(const Image& im, std::ptrdiff_t r, std::ptrdiff_t c) {
    return im.at(reflect(r, im.height), reflect(c, im.width));
}

Image box_blur(const Image& im, std::ptrdiff_t radius) {
    // Separable; with symmetric padding every sample is counted exactly
    // (2 radius + 1) times, so the mean is preserved.
    Image tmp(im.height, im.width);
    const double inv = 1.0 / static_cast<double>(2 * radius + 1);
    for (std::size_t r = 0; r < im.height; ++r) {
        for (std::size_t c = 0; c < im.width; ++c) {
            double s = 0.0;
            for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
                s += px(im, static_cast<std::ptrdiff_t>(r), static_cast<std::ptrdiff_t>(c) + d);
            }
            tmp.at(r, c) = s * inv;
        }
    }
    Image out(im.height, im.width);
    for (std::size_t r = 0; r < im.height; ++r) {
        for (std::size_t c = 0; c < im.width; ++c) {
            double s = 0.0;
            for (std::ptrdiff_t d = -radius; d <= radius; ++d) {
                s += px(tmp, static_cast<std::ptrdiff_t>(r) + d, static_cast<std::ptrdiff_t>(c));
            }
            out.at(r, c) = s * inv;
        }
    }
    return out;
}

Image sobel(const Image& im) {
    Image out(im.height, im.width);
    for (std::size_t r = 0; r < im.height; ++r) {
        for (std::size_t c = 0; c < im.width; ++c) {
            const auto y = static_cast<std::ptrdiff_t>(r);
            const auto x = static_cast<std::ptrdiff_t>(c);
            const double gx = (px(im, y - 1, x + 1) + 2 * px(im, y, x + 1) + px(im, y + 1, x + 1)) -
                              (px(im, y - 1, x - 1) + 2 * px(im, y, x - 1) + px(im, y + 1, x - 1));
            const double gy = (px(im, y + 1, x - 1) + 2 * px(im, y + 1, x) + px(im, y + 1, x + 1)) -
                              (px(im, y - 1, x - 1) + 2 * px(im, y - 1, x) + px(im, y - 1, x + 1));
            out.at(r, c) = std::min(1.0, std::sqrt(gx * gx + gy * gy) / 4.0);
        }
    }
    return out;
}

Image laplacian(const Image& im) {
    Image out(im.height, im.width);
    for (std::size_t r = 0; r < im.height; ++r) {
        for (std::size_t c = 0; c < im.width; ++c) {
            const auto y = static_cast<std::ptrdiff_t>(r);
            const auto x = static_cast<std::ptrdiff_t>(c);
            const double l = px(im, y - 1, x) + px(im, y + 1, x) + px(im, y, x - 1) + px(im, y, x + 1) -
                             4.0 * px(im, y, x);
            out.at(r, c) = std::min(1.0, std::abs(l) / 4.0);
        }
    }
    return out;
}

Image pixelate(const Image& im, std::size_t block) {
    Image out(im.height, im.width);
    for (std::size_t br = 0; br < im.height; br += block) {
        for (std::size_t bc = 0; bc < im.width; bc += block) {
            const std::size_t re = std::min(br + block, im.height);
            const std::size_t ce = std::min(bc + block, im.width);
            double s = 0.0;
            for (std::size_t r = br; r < re; ++r) {
                for (std::size_t c = bc; c < ce; ++c) {
                    s += im.at(r, c);
                }
            }
            s /= static_cast<double>((re - br) * (ce - bc));
            for (std::size_t r = br; r < re; ++r) {
                for (std::size_t c = bc; c < ce; ++c) {
                    out.at(r, c) = s;
                }
            }
        }
    }
    return out;
}

std::uint64_t text_key(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

Image shuffle_tiles(const Image& im, std::uint64_t seed) {
    const std::size_t gr = im.height / kTile;
    const std::size_t gc = im.width / kTile;
    std::vector<std::size_t> perm(gr * gc);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    // Fisher-Yates with the documented below() conversion.
    Rng rng(seed, Stream::transform, text_key("shuffle_patches"));
    for (std::size_t i = perm.size(); i > 1; --i) {
        std::swap(perm[i - 1], perm[rng.below(i)]);
    }
    Image out(im.height, im.width);
    for (std::size_t t = 0; t < perm.size(); ++t) {
        const std::size_t sr = (perm[t] / gc) * kTile, sc = (perm[t] % gc) * kTile;
        const std::size_t dr = (t / gc) * kTile, dc = (t % gc) * kTile;
        for (std::size_t r = 0; r < kTile; ++r) {
            for (std::size_t c = 0; c < kTile; ++c) {
                out.at(dr + r, dc + c) = im.at(sr + r, sc + c);
            }
        }
    }
    return out;
}

std::size_t worker_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("DIVCTL_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) {
            n = std::min(n, static_cast<std::size_t>(v));
        }
    }
    return n;
}

struct Primitive {
    int kind;  // 0 disk, 1 rectangle, 2 line
    double a, b, c, d, e;
    double intensity;
};

bool inside(const Primitive& p, double x, double y) {
    switch (p.kind) {
        case 0: return (x - p.a) * (x - p.a) + (y - p.b) * (y - p.b) <= p.c * p.c;
        case 1: return std::abs(x - p.a) <= p.c && std::abs(y - p.b) <= p.d;
        default: {
            // segment from (a,b) in direction angle c, length d, half-thickness e
            const double dx = std::cos(p.c), dy = std::sin(p.c);
            const double t = std::clamp((x - p.a) * dx + (y - p.b) * dy, 0.0, p.d);
            const double px_ = p.a + t * dx - x, py_ = p.b + t * dy - y;
            return px_ * px_ + py_ * py_ <= p.e * p.e;
        }
    }
}

struct Rendered {
    Image image;
    double coverage;
};

Rendered render_shape(std::uint64_t seed, std::uint64_t index, std::size_t size) {
    Rng rng(seed, Stream::shapes, index);
    const double s = static_cast<double>(size);
    const double base = rng.uniform(-0.4, 0.4);
    const double gx = rng.uniform(-0.3, 0.3);
    const double gy = rng.uniform(-0.3, 0.3);
    const std::size_t count = 1 + rng.below(3);
    std::vector<Primitive> prims;
    for (std::size_t i = 0; i < count; ++i) {
        Primitive p{};
        p.kind = static_cast<int>(rng.below(3));
        const double cx = rng.uniform(2.0, s - 2.0);
        const double cy = rng.uniform(2.0, s - 2.0);
        p.a = cx;
        p.b = cy;
        if (p.kind == 0) {
            p.c = rng.uniform(2.0, 5.0);
        } else if (p.kind == 1) {
            p.c = rng.uniform(1.5, 4.5);
            p.d = rng.uniform(1.5, 4.5);
        } else {
            p.c = rng.uniform(0.0, 2.0 * 3.141592653589793);
            p.d = rng.uniform(6.0, 14.0);
            p.e = rng.uniform(0.5, 1.0);
        }
        const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        p.intensity = std::clamp(base + sign * rng.uniform(0.5, 0.9), -1.0, 1.0);
        prims.push_back(p);
    }

    Rendered out{Image(size, size), 0.0};
    constexpr int kSuper = 4;
    std::size_t covered = 0;
    for (std::size_t r = 0; r < size; ++r) {
        for (std::size_t c = 0; c < size; ++c) {
            const double bg = base + gx * ((static_cast<double>(c) + 0.5) / s - 0.5) +
                              gy * ((static_cast<double>(r) + 0.5) / s - 0.5);
            double value = bg;
            double any = 0.0;
            for (const auto& p : prims) {
                int hits = 0;
                for (int sy = 0; sy < kSuper; ++sy) {
                    for (int sx = 0; sx < kSuper; ++sx) {
                        const double x = static_cast<double>(c) + (sx + 0.5) / kSuper;
                        const double y = static_cast<double>(r) + (sy + 0.5) / kSuper;
                        hits += inside(p, x, y) ? 1 : 0;
                    }
                }
                const double alpha = hits / static_cast<double>(kSuper * kSuper);
                value = value * (1.0 - alpha) + p.intensity * alpha;
                any = std::max(any, alpha);
            }
            out.image.at(r, c) = std::clamp(value, -1.0, 1.0);
            covered += any > 0.5 ? 1 : 0;
        }
    }
    out.coverage = static_cast<double>(covered) / static_cast<double>(size * size);
    return out;
}

}  // namespace

std::string to_string(TransformKind kind) {
    for (const auto& kn : kKindNames) {
        if (kn.kind == kind) {
            return kn.name;
        }
    }
    return "?";
}

TransformKind parse_transform_kind(std::string_view name) {
    for (const auto& kn : kKindNames) {
        if (name == kn.name) {
            return kn.kind;
        }
    }
    throw ConfigError("unknown transform kind '" + std::string(name) + "'");
}

std::string to_string(ShiftClass shift) {
    switch (shift) {
        case ShiftClass::basic: return "basic";
        case ShiftClass::novel_low: return "novel_low";
        case ShiftClass::novel_high: return "novel_high";
    }
    return "?";
}

const std::vector<ConditionSpec>& default_registry() {
    // Instructions drive routing: only a novel_low condition and its sibling
    // share tokens.
    static const std::vector<ConditionSpec> registry = {
        {"sobel_edges", "sobel edge map", TransformKind::edge_sobel, ShiftClass::basic, "",
         {"sobel edge outline map"}},
        {"box_blur", "narrow box blur", TransformKind::blur_box3, ShiftClass::basic, "", {"small box blur"}},
        {"pixel_blocks", "pixelated mosaic blocks", TransformKind::pixelate4, ShiftClass::basic, "",
         {"coarse pixelated mosaic"}},
        {"border_outpaint", "border outpainting canvas", TransformKind::mask_border, ShiftClass::basic, "",
         {"outpainting border canvas"}},
        {"tone_segments", "posterized tone segments", TransformKind::posterize4, ShiftClass::basic, "",
         {"posterized segments"}},
        {"negative_sketch", "inverted negative sketch", TransformKind::invert_gray, ShiftClass::basic, "",
         {"negative inverted sketch"}},
        {"relief_shading", "horizontal relief shading", TransformKind::gradient_x, ShiftClass::basic, "",
         {"relief shading horizontal"}},
        {"binary_silhouette", "binary silhouette threshold", TransformKind::threshold_binary, ShiftClass::basic,
         "", {"silhouette binary threshold"}},
        {"laplacian_edges", "laplacian edge map", TransformKind::edge_laplacian, ShiftClass::novel_low,
         "sobel_edges", {"laplacian edge outline map"}},
        {"wide_box_blur", "wide box blur", TransformKind::blur_box5, ShiftClass::novel_low, "box_blur",
         {"large box blur"}},
        {"shuffled_tiles", "shuffled tile puzzle", TransformKind::shuffle_patches, ShiftClass::novel_high, "",
         {"tile puzzle shuffle"}},
        {"checker_occlusion", "checkerboard occlusion grid", TransformKind::checker_mask, ShiftClass::novel_high,
         "", {"occlusion checkerboard"}},
    };
    return registry;
}

Image apply_transform(const Image& image, TransformKind kind, std::uint64_t seed) {
    for (double v : image.px) {
        require(v >= -1.0 && v <= 1.0 && std::isfinite(v), "apply_condition: image values must lie in [-1, 1]");
    }
    Image out;
    switch (kind) {
        case TransformKind::edge_sobel: out = sobel(image); break;
        case TransformKind::edge_laplacian: out = laplacian(image); break;
        case TransformKind::blur_box3: out = box_blur(image, 1); break;
        case TransformKind::blur_box5: out = box_blur(image, 2); break;
        case TransformKind::pixelate4: out = pixelate(image, kTile); break;
        case TransformKind::mask_border: {
            out = image;
            const std::size_t bh = image.height / 4, bw = image.width / 4;
            for (std::size_t r = 0; r < image.height; ++r) {
                for (std::size_t c = 0; c < image.width; ++c) {
                    if (r < bh || r >= image.height - bh || c < bw || c >= image.width - bw) {
                        out.at(r, c) = 0.0;
                    }
                }
            }
            break;
        }
        case TransformKind::posterize4: {
            out = image;
            for (double& v : out.px) {
                v = std::round((v + 1.0) * 1.5) / 1.5 - 1.0;
            }
            break;
        }
        case TransformKind::invert_gray: {
            out = image;
            for (double& v : out.px) {
                v = -v;
            }
            break;
        }
        case TransformKind::gradient_x: {
            out = Image(image.height, image.width);
            for (std::size_t r = 0; r < image.height; ++r) {
                for (std::size_t c = 0; c < image.width; ++c) {
                    const auto y = static_cast<std::ptrdiff_t>(r);
                    const auto x = static_cast<std::ptrdiff_t>(c);
                    out.at(r, c) = std::clamp(px(image, y, x + 1) - px(image, y, x - 1), -1.0, 1.0);
                }
            }
            break;
        }
        case TransformKind::threshold_binary: {
            out = image;
            const double m = std::accumulate(image.px.begin(), image.px.end(), 0.0) /
                             static_cast<double>(image.px.size());
            for (double& v : out.px) {
                v = v > m ? 1.0 : -1.0;
            }
            break;
        }
        case TransformKind::shuffle_patches: out = shuffle_tiles(image, seed); break;
        case TransformKind::checker_mask: {
            out = image;
            for (std::size_t r = 0; r < image.height; ++r) {
                for (std::size_t c = 0; c < image.width; ++c) {
                    if (((r / kTile) + (c / kTile)) % 2 == 1) {
                        out.at(r, c) = 0.0;
                    }
                }
            }
            break;
        }
        default: throw ConfigError("unsupported transform kind");
    }
    return out;
}

Image apply_condition(const Image& image, const ConditionSpec& spec, std::uint64_t seed) {
    return apply_transform(image, spec.transform_kind, seed);
}

Image generate_shape(std::uint64_t seed, std::uint64_t index, std::size_t size) {
    return render_shape(seed, index, size).image;
}

double shape_coverage(std::uint64_t seed, std::uint64_t index, std::size_t size) {
    return render_shape(seed, index, size).coverage;
}

std::vector<Image> generate_shapes(std::size_t n, std::uint64_t seed, std::size_t size) {
    require(n >= 1, "generate_shapes: n must be >= 1");
    std::vector<Image> out(n);
    const std::size_t workers = std::min(worker_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = generate_shape(seed, i, size);
        }
        return out;
    }
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                out[i] = generate_shape(seed, i, size);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    return out;
}

ConditionBank::ConditionBank(std::size_t n_images, std::uint64_t seed, std::size_t image_size,
                             std::vector<ConditionSpec> registry)
    : registry_(std::move(registry)),
      images_(generate_shapes(n_images, seed, image_size)),
      seed_(seed),
      image_size_(image_size) {
    require(!registry_.empty(), "ConditionBank: empty registry");
}

const ConditionSpec& ConditionBank::find(std::string_view condition_id) const {
    return registry_[index_of(condition_id)];
}

std::size_t ConditionBank::index_of(std::string_view condition_id) const {
    for (std::size_t i = 0; i < registry_.size(); ++i) {
        if (registry_[i].condition_id == condition_id) {
            return i;
        }
    }
    throw ConfigError("unknown condition '" + std::string(condition_id) + "'");
}

std::vector<std::size_t> ConditionBank::indices_of(ShiftClass shift) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < registry_.size(); ++i) {
        if (registry_[i].shift_class == shift) {
            out.push_back(i);
        }
    }
    return out;
}

Image ConditionBank::condition_image(std::size_t image_index, std::size_t condition_index) const {
    return apply_condition(images_.at(image_index), registry_.at(condition_index), seed_);
}

DatasetIter::DatasetIter(const ConditionBank& bank, std::vector<std::size_t> conditions, std::size_t batch_size,
                         std::uint64_t seed, std::size_t n_images)
    : bank_(&bank),
      conditions_(std::move(conditions)),
      batch_size_(batch_size),
      seed_(seed),
      n_images_(n_images == 0 ? bank.images().size() : n_images) {
    require(!conditions_.empty(), "DatasetIter: no conditions");
    require(batch_size_ >= 1, "DatasetIter: batch_size must be >= 1");
    require(n_images_ >= 1 && n_images_ <= bank.images().size(), "DatasetIter: image count out of range");
}

std::vector<BatchItem> DatasetIter::batch_at(std::uint64_t index) const {
    Rng rng(seed_, Stream::data, index);
    std::vector<BatchItem> items(batch_size_);
    for (auto& it : items) {
        it.image_index = rng.below(n_images_);
        it.condition_index = conditions_[rng.below(conditions_.size())];
    }
    return items;
}

double metric_ssim(const Image& a, const Image& b) {
    require(a.height == b.height && a.width == b.width, "metric_ssim: shape mismatch");
    constexpr std::size_t kWin = 8;
    require(a.height >= kWin && a.width >= kWin, "metric_ssim: image smaller than the 8x8 window");
    constexpr double kRange = 2.0;
    const double c1 = (0.01 * kRange) * (0.01 * kRange);
    const double c2 = (0.03 * kRange) * (0.03 * kRange);
    const double n = static_cast<double>(kWin * kWin);
    double total = 0.0;
    std::size_t windows = 0;
    for (std::size_t r0 = 0; r0 + kWin <= a.height; ++r0) {
        for (std::size_t c0 = 0; c0 + kWin <= a.width; ++c0) {
            double ma = 0.0, mb = 0.0;
            for (std::size_t r = r0; r < r0 + kWin; ++r) {
                for (std::size_t c = c0; c < c0 + kWin; ++c) {
                    ma += a.at(r, c);
                    mb += b.at(r, c);
                }
            }
            ma /= n;
            mb /= n;
            double va = 0.0, vb = 0.0, cov = 0.0;
            for (std::size_t r = r0; r < r0 + kWin; ++r) {
                for (std::size_t c = c0; c < c0 + kWin; ++c) {
                    const double da = a.at(r, c) - ma, db = b.at(r, c) - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            va /= n;
            vb /= n;
            cov /= n;
            total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            ++windows;
        }
    }
    return total / static_cast<double>(windows);
}

double metric_encoder_sim(const RepaHead& head, const Image& a, const Image& b, std::size_t patch_size) {
    require(a.height == b.height && a.width == b.width, "metric_encoder_sim: shape mismatch");
    const EncodedImage ea = encode_condition_image(head, a, patch_size);
    const EncodedImage eb = encode_condition_image(head, b, patch_size);
    const std::size_t n = ea.embedding.rows();
    const std::size_t d = ea.embedding.cols();
    double total = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
        if (ea.degenerate[p] && eb.degenerate[p]) {
            total += 1.0;
            continue;
        }
        total += cosine_similarity(ea.embedding.data().subspan(p * d, d), eb.embedding.data().subspan(p * d, d)).value;
    }
    return total / static_cast<double>(n);
}

}  // namespace divctl
