#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <vector>

#include "dlra/glyphgen.hpp"
#include "dlra/rng.hpp"

using dlra::GlyphDataset;
using dlra::kGlyphSide;

namespace {

std::size_t nonzero_count(const std::vector<std::uint8_t>& img) {
    std::size_t n = 0;
    for (auto v : img) n += v > 0 ? 1 : 0;
    return n;
}

double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool ia = a[i] > 0, ib = b[i] > 0;
        inter += (ia && ib) ? 1 : 0;
        uni += (ia || ib) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::filesystem::path tmp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("family table matches the four script stand-ins") {
    CHECK(dlra::family_info(0).n_classes == 10);
    CHECK(dlra::family_info(1).n_classes == 30);
    CHECK(dlra::family_info(2).n_classes == 12);
    CHECK(dlra::family_info(3).n_classes == 30);
    CHECK(dlra::family_info(0).complexity == 1);
    CHECK(dlra::family_info(1).complexity == 2);
    CHECK(dlra::family_info(2).complexity == 3);
    CHECK(dlra::family_info(3).complexity == 3);
    CHECK_THROWS_AS(dlra::family_info(4), dlra::DataError);
    CHECK_THROWS_AS(dlra::family_info(-1), dlra::DataError);
}

TEST_CASE("render is deterministic per (family, class, writer)") {
    for (int fam = 0; fam < 4; ++fam) {
        auto a = dlra::render_glyph(fam, 1, 33);
        auto b = dlra::render_glyph(fam, 1, 33);
        CHECK(a == b);
    }
    CHECK_THROWS_AS(dlra::render_glyph(0, 10, 0), dlra::DataError);
    CHECK_THROWS_AS(dlra::render_glyph(0, -1, 0), dlra::DataError);
}

TEST_CASE("writers vary the image but keep the class topology") {
    for (int fam = 0; fam < 4; ++fam) {
        const auto n_cls = dlra::family_info(fam).n_classes;
        for (std::size_t cls = 0; cls < n_cls; cls += 3) {
            auto a = dlra::render_glyph(fam, static_cast<int>(cls), 0);
            auto b = dlra::render_glyph(fam, static_cast<int>(cls), 1);
            CHECK(a != b);
            CHECK(mask_iou(a, b) > 0.2);
        }
    }
}

TEST_CASE("every rendered glyph has at least 40 nonzero pixels") {
    for (int fam = 0; fam < 4; ++fam) {
        const auto n_cls = dlra::family_info(fam).n_classes;
        for (std::size_t cls = 0; cls < n_cls; ++cls)
            for (std::uint64_t writer = 0; writer < 5; ++writer) {
                auto img = dlra::render_glyph(fam, static_cast<int>(cls), writer);
                CHECK(nonzero_count(img) >= 40);
            }
    }
}

TEST_CASE("class programs within a family are pairwise distinct") {
    for (int fam = 0; fam < 4; ++fam) {
        const auto n_cls = dlra::family_info(fam).n_classes;
        std::vector<dlra::StrokeProgram> progs;
        for (std::size_t cls = 0; cls < n_cls; ++cls) progs.push_back(dlra::stroke_program(fam, static_cast<int>(cls)));
        for (std::size_t i = 0; i < progs.size(); ++i)
            for (std::size_t j = i + 1; j < progs.size(); ++j) {
                bool differ = progs[i].size() != progs[j].size();
                for (std::size_t s = 0; !differ && s < progs[i].size(); ++s)
                    differ = progs[i][s].pts != progs[j][s].pts;
                CHECK(differ);
            }
    }
}

TEST_CASE("balanced dataset of 200 per class over 10 classes") {
    auto ds = dlra::generate_dataset(0, 200, 7);
    CHECK(ds.size() == 2000);
    CHECK(ds.n_classes == 10);
    CHECK(ds.family == 0);
    CHECK(ds.pixels.size() == 2000 * kGlyphSide * kGlyphSide);
    std::map<int, int> hist;
    for (auto l : ds.labels) hist[l]++;
    CHECK(hist.size() == 10);
    for (auto& [cls, n] : hist) CHECK(n == 200);

    CHECK_THROWS_AS(dlra::generate_dataset(0, 1, 7), dlra::ConfigError);
}

TEST_CASE("dataset bytes are a pure function of (family, per_class, seed)") {
    auto a = dlra::generate_dataset(2, 3, 11);
    auto b = dlra::generate_dataset(2, 3, 11);
    auto c = dlra::generate_dataset(2, 3, 12);
    CHECK(a.pixels == b.pixels);
    CHECK(a.labels == b.labels);
    CHECK(a.pixels != c.pixels);
}

TEST_CASE("gly1 round trip is bit exact") {
    auto ds = dlra::generate_dataset(1, 2, 3);
    const auto path = tmp_file("roundtrip.gly1");
    dlra::write_gly1(ds, path.string());
    auto back = dlra::read_gly1(path.string());
    CHECK(back.height == ds.height);
    CHECK(back.width == ds.width);
    CHECK(back.n_classes == ds.n_classes);
    CHECK(back.family == ds.family);
    CHECK(back.labels == ds.labels);
    CHECK(back.pixels == ds.pixels);
    std::filesystem::remove(path);
}

TEST_CASE("gly1 rejects bad magic, truncation, trailing bytes, bad labels") {
    auto ds = dlra::generate_dataset(0, 2, 1);
    const auto path = tmp_file("broken.gly1");
    dlra::write_gly1(ds, path.string());
    std::ifstream in(path.string(), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    auto rewrite = [&](const std::string& b) {
        std::ofstream out(path.string(), std::ios::binary | std::ios::trunc);
        out.write(b.data(), static_cast<std::streamsize>(b.size()));
    };

    rewrite("GLXX" + bytes.substr(4));
    try {
        dlra::read_gly1(path.string());
        FAIL("expected FormatError");
    } catch (const dlra::FormatError& e) {
        CHECK(e.byte_offset == 0);
        CHECK(std::string(e.what()).find("magic") != std::string::npos);
    }

    rewrite(bytes.substr(0, 40));
    CHECK_THROWS_AS(dlra::read_gly1(path.string()), dlra::FormatError);

    rewrite(bytes.substr(0, 10));
    CHECK_THROWS_AS(dlra::read_gly1(path.string()), dlra::FormatError);

    rewrite(bytes + "x");
    CHECK_THROWS_AS(dlra::read_gly1(path.string()), dlra::FormatError);

    // corrupt a label so it exceeds the class count
    std::string bad = bytes;
    bad[21] = 0x7f;  // high byte of first label
    rewrite(bad);
    CHECK_THROWS_AS(dlra::read_gly1(path.string()), dlra::DataError);

    std::filesystem::remove(path);
}

TEST_CASE("externally produced well-formed gly1 loads") {
    // handmade file: one 2x2 image, 3 classes, label 2
    std::string b = "GLY1";
    auto put32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    put32(1);
    put32(2);
    put32(2);
    put32(3);
    b.push_back(static_cast<char>(9));  // family id is opaque on load
    b.push_back(2);
    b.push_back(0);
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>(10 * i));
    const auto path = tmp_file("external.gly1");
    std::ofstream out(path.string(), std::ios::binary);
    out.write(b.data(), static_cast<std::streamsize>(b.size()));
    out.close();

    auto ds = dlra::read_gly1(path.string());
    CHECK(ds.size() == 1);
    CHECK(ds.height == 2);
    CHECK(ds.width == 2);
    CHECK(ds.labels[0] == 2);
    CHECK(ds.pixels == std::vector<std::uint8_t>{0, 10, 20, 30});
    std::filesystem::remove(path);
}

TEST_CASE("pixel-space nearest neighbor separates every family above 60 percent") {
    for (int fam = 0; fam < 4; ++fam) {
        auto train = dlra::generate_dataset(fam, 20, 100 + fam);
        auto test = dlra::generate_dataset(fam, 5, 200 + fam);
        std::size_t hits = 0;
        for (std::size_t t = 0; t < test.size(); ++t) {
            const std::uint8_t* q = test.image(t);
            long best = -1;
            std::size_t best_i = 0;
            for (std::size_t r = 0; r < train.size(); ++r) {
                const std::uint8_t* p = train.image(r);
                long d = 0;
                for (std::size_t k = 0; k < kGlyphSide * kGlyphSide; ++k) {
                    const long diff = static_cast<long>(q[k]) - static_cast<long>(p[k]);
                    d += diff * diff;
                }
                if (best < 0 || d < best) {
                    best = d;
                    best_i = r;
                }
            }
            hits += train.labels[best_i] == test.labels[t] ? 1 : 0;
        }
        const double acc = static_cast<double>(hits) / static_cast<double>(test.size());
        INFO("family ", fam, " 1-NN accuracy ", acc);
        CHECK(acc > 0.6);
    }
}

TEST_CASE("ink volume rises with structural complexity") {
    double level_mean[4] = {0, 0, 0, 0};
    for (int fam = 0; fam < 4; ++fam) {
        const auto n_cls = dlra::family_info(fam).n_classes;
        double total = 0.0;
        std::size_t count = 0;
        for (std::size_t cls = 0; cls < n_cls; ++cls)
            for (std::uint64_t w = 0; w < 10; ++w) {
                total += static_cast<double>(nonzero_count(dlra::render_glyph(fam, static_cast<int>(cls), w)));
                ++count;
            }
        level_mean[fam] = total / static_cast<double>(count);
    }
    const double lvl1 = level_mean[0], lvl2 = level_mean[1], lvl3 = 0.5 * (level_mean[2] + level_mean[3]);
    INFO("ink means ", lvl1, " ", lvl2, " ", lvl3);
    CHECK(lvl1 < lvl2);
    CHECK(lvl2 < lvl3);
}

TEST_CASE("augmentation is seeded and keeps the glyph visible") {
    auto img = dlra::render_glyph(0, 3, 5);
    dlra::Rng r1(9), r2(9), r3(10);
    auto a = dlra::augment_image(img.data(), r1);
    auto b = dlra::augment_image(img.data(), r2);
    auto c = dlra::augment_image(img.data(), r3);
    CHECK(a == b);
    CHECK(a.size() == img.size());
    CHECK(nonzero_count(a) >= 40);
    // different draw usually gives different pixels
    CHECK(a != c);
}
