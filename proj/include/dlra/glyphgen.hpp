#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dlra/error.hpp"
#include "dlra/rng.hpp"

namespace dlra {

inline constexpr std::size_t kGlyphSide = 48;

struct ScriptFamily {
    int id;
    std::size_t n_classes;
    int complexity;  // 1 digit-like .. 3 pictograph-like
    const char* tag;
};

// Four synthetic script families. Class counts 10/30/12/30; structural
// complexity rises with stroke count.
const ScriptFamily& family_info(int family);
inline constexpr int kNumFamilies = 4;

struct Stroke {
    std::vector<std::array<double, 2>> pts;  // polyline control points in [0,1]^2
    double thickness;                        // base sigma in pixels
};
using StrokeProgram = std::vector<Stroke>;

// The class's skeleton, a pure function of (family, cls). Writer variation
// never touches it.
StrokeProgram stroke_program(int family, int cls);

// Rasterizes one glyph with per-writer jitter; deterministic in all three
// arguments. 48x48 grayscale, row-major, 0..255.
std::vector<std::uint8_t> render_glyph(int family, int cls, std::uint64_t writer_seed);

struct GlyphDataset {
    std::uint32_t height = kGlyphSide;
    std::uint32_t width = kGlyphSide;
    std::uint32_t n_classes = 0;
    std::uint8_t family = 0;
    std::vector<std::uint16_t> labels;
    std::vector<std::uint8_t> pixels;  // size() * height * width

    std::size_t size() const { return labels.size(); }
    const std::uint8_t* image(std::size_t i) const { return pixels.data() + i * height * width; }
};

// Balanced dataset of per_class glyphs per class, seeded shuffle. Writer
// seeds are seed * 2^32 + running index, so datasets built with different
// seeds draw from disjoint writer ranges by construction.
GlyphDataset generate_dataset(int family, std::size_t per_class, std::uint64_t seed);

void write_gly1(const GlyphDataset& ds, const std::string& path);
GlyphDataset read_gly1(const std::string& path);

// Train-time augmentation: horizontal flip (p=0.5), rotation up to +/-10
// degrees, mild scale 0.9..1.1, all around the image center with bilinear
// resampling. Returns a new 48x48 buffer.
std::vector<std::uint8_t> augment_image(const std::uint8_t* src, Rng& rng);

}  // namespace dlra
