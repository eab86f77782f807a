#include "dlra/glyphgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>

namespace dlra {

namespace {

constexpr std::uint64_t kProgramStream = 0x70726f6772616dULL;
constexpr std::uint64_t kWriterStream = 0x77726974657200ULL;
constexpr std::uint64_t kShuffleStream = 0x73687566666cULL;

const ScriptFamily kFamilies[kNumFamilies] = {
    {0, 10, 1, "digits"},
    {1, 30, 2, "syllabary"},
    {2, 12, 3, "pictographs-a"},
    {3, 30, 3, "pictographs-b"},
};

struct StrokeRange {
    int lo, hi;
};

StrokeRange strokes_for(int complexity) {
    switch (complexity) {
        case 1: return {2, 3};
        case 2: return {4, 6};
        default: return {7, 10};
    }
}

// Anchor lattice: stroke endpoints sit near a 5x5 grid so that a class keeps
// a recognizable topology under writer jitter.
double anchor_coord(int idx, Rng& rng) {
    return 0.15 + 0.175 * idx + rng.uniform(-0.03, 0.03);
}

struct Pt {
    double x, y;
};

Pt transform(const Pt& p, const Pt& center, double cos_t, double sin_t, double scale, double tx, double ty) {
    const double dx = (p.x - center.x) * scale, dy = (p.y - center.y) * scale;
    return {center.x + dx * cos_t - dy * sin_t + tx, center.y + dx * sin_t + dy * cos_t + ty};
}

void stamp(std::vector<double>& canvas, double px, double py, double sigma) {
    const double cutoff = 2.2 * sigma;
    const int x0 = std::max(0, static_cast<int>(std::floor(px - cutoff)));
    const int x1 = std::min(static_cast<int>(kGlyphSide) - 1, static_cast<int>(std::ceil(px + cutoff)));
    const int y0 = std::max(0, static_cast<int>(std::floor(py - cutoff)));
    const int y1 = std::min(static_cast<int>(kGlyphSide) - 1, static_cast<int>(std::ceil(py + cutoff)));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double d2 = (x - px) * (x - px) + (y - py) * (y - py);
            if (d2 > cutoff * cutoff) continue;
            const double v = std::exp(-d2 * inv);
            double& c = canvas[static_cast<std::size_t>(y) * kGlyphSide + x];
            c = std::max(c, v);
        }
}

}  // namespace

const ScriptFamily& family_info(int family) {
    if (family < 0 || family >= kNumFamilies)
        throw DataError("unknown script family " + std::to_string(family));
    return kFamilies[family];
}

StrokeProgram stroke_program(int family, int cls) {
    const auto& fam = family_info(family);
    if (cls < 0 || static_cast<std::size_t>(cls) >= fam.n_classes)
        throw DataError("class " + std::to_string(cls) + " outside family " + std::to_string(family) +
                        " range [0, " + std::to_string(fam.n_classes) + ")");

    Rng rng(mix_seed(mix_seed(kProgramStream, static_cast<std::uint64_t>(family)),
                     static_cast<std::uint64_t>(cls)));
    const auto range = strokes_for(fam.complexity);
    const int n_strokes = range.lo + static_cast<int>(rng.index(range.hi - range.lo + 1));

    StrokeProgram prog;
    prog.reserve(n_strokes);
    int gx = static_cast<int>(rng.index(5)), gy = static_cast<int>(rng.index(5));
    for (int s = 0; s < n_strokes; ++s) {
        Stroke st;
        st.thickness = 1.1 + 0.2 * rng.uniform();
        const std::size_t n_pts = 2 + rng.index(3);
        // every other stroke continues from the previous one so glyphs stay connected
        if (s > 0 && rng.bernoulli(0.45)) {
            gx = static_cast<int>(rng.index(5));
            gy = static_cast<int>(rng.index(5));
        }
        st.pts.push_back({anchor_coord(gx, rng), anchor_coord(gy, rng)});
        for (std::size_t p = 1; p < n_pts; ++p) {
            int nx = gx, ny = gy;
            for (int tries = 0; tries < 16 && nx == gx && ny == gy; ++tries) {
                nx = std::clamp(gx + static_cast<int>(rng.index(5)) - 2, 0, 4);
                ny = std::clamp(gy + static_cast<int>(rng.index(5)) - 2, 0, 4);
            }
            if (nx == gx && ny == gy) nx = gx > 0 ? gx - 1 : gx + 1;
            gx = nx;
            gy = ny;
            st.pts.push_back({anchor_coord(gx, rng), anchor_coord(gy, rng)});
        }
        prog.push_back(std::move(st));
    }
    return prog;
}

std::vector<std::uint8_t> render_glyph(int family, int cls, std::uint64_t writer_seed) {
    const StrokeProgram prog = stroke_program(family, cls);
    Rng rng(mix_seed(mix_seed(mix_seed(kWriterStream, static_cast<std::uint64_t>(family)),
                              static_cast<std::uint64_t>(cls)),
                     writer_seed));

    const double theta = rng.uniform(-10.0, 10.0) * (3.14159265358979323846 / 180.0);
    const double scale = rng.uniform(0.8, 1.0);
    const double tx = rng.uniform(-0.03, 0.03);
    const double ty = rng.uniform(-0.03, 0.03);
    const double thick_mul = rng.uniform(0.85, 1.15);
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);

    // jitter control points, then rotate/scale about the program centroid
    double cx = 0.0, cy = 0.0;
    std::size_t n_pts = 0;
    for (const auto& st : prog)
        for (const auto& p : st.pts) {
            cx += p[0];
            cy += p[1];
            ++n_pts;
        }
    const Pt center{cx / n_pts, cy / n_pts};

    std::vector<double> canvas(kGlyphSide * kGlyphSide, 0.0);
    for (const auto& st : prog) {
        std::vector<Pt> pts;
        pts.reserve(st.pts.size());
        for (const auto& p : st.pts) {
            Pt q{p[0] + rng.normal(0.0, 0.01), p[1] + rng.normal(0.0, 0.01)};
            pts.push_back(transform(q, center, cos_t, sin_t, scale, tx, ty));
        }
        const double sigma = st.thickness * thick_mul;
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
            const double ax = pts[i].x * (kGlyphSide - 1), ay = pts[i].y * (kGlyphSide - 1);
            const double bx = pts[i + 1].x * (kGlyphSide - 1), by = pts[i + 1].y * (kGlyphSide - 1);
            const double len = std::hypot(bx - ax, by - ay);
            const int steps = std::max(2, static_cast<int>(std::ceil(len / 0.4)));
            for (int t = 0; t <= steps; ++t) {
                const double f = static_cast<double>(t) / steps;
                stamp(canvas, ax + f * (bx - ax), ay + f * (by - ay), sigma);
            }
        }
    }

    std::vector<std::uint8_t> out(kGlyphSide * kGlyphSide);
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(canvas[i], 0.0, 1.0) * 255.0));
    return out;
}

GlyphDataset generate_dataset(int family, std::size_t per_class, std::uint64_t seed) {
    const auto& fam = family_info(family);
    if (per_class < 2) throw ConfigError("per-class count must be at least 2");

    GlyphDataset ds;
    ds.n_classes = static_cast<std::uint32_t>(fam.n_classes);
    ds.family = static_cast<std::uint8_t>(family);
    const std::size_t n = fam.n_classes * per_class;
    ds.labels.reserve(n);
    ds.pixels.reserve(n * kGlyphSide * kGlyphSide);

    std::uint64_t writer = seed << 32;
    std::vector<std::vector<std::uint8_t>> images;
    images.reserve(n);
    for (std::size_t cls = 0; cls < fam.n_classes; ++cls)
        for (std::size_t k = 0; k < per_class; ++k) {
            images.push_back(render_glyph(family, static_cast<int>(cls), writer++));
            ds.labels.push_back(static_cast<std::uint16_t>(cls));
        }

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuf(mix_seed(kShuffleStream, seed));
    shuf.shuffle(order);

    std::vector<std::uint16_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = ds.labels[order[i]];
        ds.pixels.insert(ds.pixels.end(), images[order[i]].begin(), images[order[i]].end());
    }
    ds.labels = std::move(labels);
    return ds;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

struct ByteReader {
    const std::string& buf;
    std::size_t off = 0;

    void need(std::size_t n, const char* what) {
        if (off + n > buf.size())
            throw FormatError(std::string("file ends inside ") + what, off);
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[off++]);
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        const auto v = static_cast<std::uint16_t>(static_cast<std::uint8_t>(buf[off]) |
                                                  (static_cast<std::uint8_t>(buf[off + 1]) << 8));
        off += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(buf[off + i]);
        off += 4;
        return v;
    }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return buf;
}

}  // namespace

void write_gly1(const GlyphDataset& ds, const std::string& path) {
    if (ds.pixels.size() != ds.size() * ds.height * ds.width)
        throw DataError("dataset pixel buffer does not match its label count");
    std::string out;
    out.reserve(21 + ds.labels.size() * 2 + ds.pixels.size());
    out += "GLY1";
    put_u32(out, static_cast<std::uint32_t>(ds.size()));
    put_u32(out, ds.height);
    put_u32(out, ds.width);
    put_u32(out, ds.n_classes);
    out.push_back(static_cast<char>(ds.family));
    for (auto l : ds.labels) {
        out.push_back(static_cast<char>(l & 0xff));
        out.push_back(static_cast<char>((l >> 8) & 0xff));
    }
    out.append(reinterpret_cast<const char*>(ds.pixels.data()), ds.pixels.size());

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("short write to " + path);
}

GlyphDataset read_gly1(const std::string& path) {
    const std::string buf = slurp(path);
    ByteReader r{buf};
    r.need(4, "magic");
    if (std::memcmp(buf.data(), "GLY1", 4) != 0) throw FormatError("bad magic, expected GLY1", 0);
    r.off = 4;

    GlyphDataset ds;
    const std::uint32_t count = r.u32("sample count");
    ds.height = r.u32("height");
    ds.width = r.u32("width");
    ds.n_classes = r.u32("class count");
    ds.family = r.u8("family id");
    if (ds.height == 0 || ds.width == 0) throw FormatError("zero image dimensions", 8);
    if (ds.n_classes == 0) throw FormatError("zero class count", 16);

    r.need(static_cast<std::size_t>(count) * 2, "labels");
    ds.labels.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        ds.labels[i] = r.u16("labels");
        if (ds.labels[i] >= ds.n_classes)
            throw DataError("label " + std::to_string(ds.labels[i]) + " at sample " + std::to_string(i) +
                            " exceeds class count " + std::to_string(ds.n_classes));
    }
    const std::size_t per = static_cast<std::size_t>(ds.height) * ds.width;
    if (count != 0 && per > std::numeric_limits<std::size_t>::max() / count)
        throw FormatError("pixel payload size overflows", 4);
    const std::size_t npx = static_cast<std::size_t>(count) * per;
    r.need(npx, "pixels");
    ds.pixels.assign(buf.begin() + static_cast<std::ptrdiff_t>(r.off),
                     buf.begin() + static_cast<std::ptrdiff_t>(r.off + npx));
    r.off += npx;
    if (r.off != buf.size()) throw FormatError("trailing bytes after pixel data", r.off);
    return ds;
}

std::vector<std::uint8_t> augment_image(const std::uint8_t* src, Rng& rng) {
    const bool flip = rng.bernoulli(0.5);
    const double theta = rng.uniform(-10.0, 10.0) * (3.14159265358979323846 / 180.0);
    const double scale = rng.uniform(0.9, 1.1);
    const double cos_t = std::cos(theta), sin_t = std::sin(theta);
    const double c = (kGlyphSide - 1) / 2.0;

    std::vector<std::uint8_t> out(kGlyphSide * kGlyphSide, 0);
    for (std::size_t y = 0; y < kGlyphSide; ++y)
        for (std::size_t x = 0; x < kGlyphSide; ++x) {
            // inverse map: destination pixel pulled from source
            const double dx = (static_cast<double>(x) - c) / scale;
            const double dy = (static_cast<double>(y) - c) / scale;
            double sx = c + dx * cos_t + dy * sin_t;
            const double sy = c - dx * sin_t + dy * cos_t;
            if (flip) sx = (kGlyphSide - 1) - sx;
            const int x0 = static_cast<int>(std::floor(sx)), y0 = static_cast<int>(std::floor(sy));
            const double fx = sx - x0, fy = sy - y0;
            double acc = 0.0;
            for (int oy = 0; oy <= 1; ++oy)
                for (int ox = 0; ox <= 1; ++ox) {
                    const int xx = x0 + ox, yy = y0 + oy;
                    if (xx < 0 || yy < 0 || xx >= static_cast<int>(kGlyphSide) ||
                        yy >= static_cast<int>(kGlyphSide))
                        continue;
                    const double wgt = (ox ? fx : 1.0 - fx) * (oy ? fy : 1.0 - fy);
                    acc += wgt * src[static_cast<std::size_t>(yy) * kGlyphSide + xx];
                }
            out[y * kGlyphSide + x] = static_cast<std::uint8_t>(std::lround(std::clamp(acc, 0.0, 255.0)));
        }
    return out;
}

}  // namespace dlra
