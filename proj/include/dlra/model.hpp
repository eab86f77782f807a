#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dlra/error.hpp"
#include "dlra/lora.hpp"
#include "dlra/rng.hpp"
#include "dlra/tensor.hpp"

namespace dlra {

struct GlyphTransformerConfig {
    std::size_t image_side = 48;
    std::size_t patch_side = 8;
    std::size_t d_model = 64;
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t d_ff = 128;
    std::size_t n_classes = 2;

    std::size_t patches_per_side() const { return image_side / patch_side; }
    std::size_t n_patches() const { return patches_per_side() * patches_per_side(); }
    std::size_t patch_dim() const { return patch_side * patch_side; }

    void validate() const {
        if (image_side == 0 || patch_side == 0 || image_side % patch_side != 0)
            throw ConfigError("image side " + std::to_string(image_side) + " not divisible by patch side " +
                              std::to_string(patch_side));
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw ConfigError("model width " + std::to_string(d_model) + " not divisible by " +
                              std::to_string(n_heads) + " heads");
        if (n_layers == 0 || d_ff == 0 || n_classes < 2) throw ConfigError("degenerate model config");
    }
};

// A weight matrix that may host one adapter. While attached, the base weight
// is frozen and the factored adapter path carries all gradients.
template <typename T>
struct AdaptedLinear {
    std::string id;
    Tensor<T> weight;  // [d_out x d_in]
    std::optional<DynLoraAdapter<T>> adapter;

    Tensor<T> operator()(const Tensor<T>& x) {
        if (adapter) return forward_adapted(*adapter, x);
        return matmul(x, transpose(weight));
    }

    void attach(std::size_t r_max, T alpha, std::uint64_t seed) {
        weight.set_requires_grad(false);
        adapter = init_adapter(weight, r_max, alpha, seed, id);
    }

    // Folds the adapter into the weight and drops it.
    void merge_back() {
        if (!adapter) return;
        weight = merge(*adapter);
        adapter.reset();
    }
};

namespace detail {

template <typename T>
Tensor<T> dense_init(std::vector<std::size_t> shape, Rng& rng) {
    return Tensor<T>::randn(std::move(shape), rng, T(0.02));
}

}  // namespace detail

// Pre-LN transformer encoder over flattened glyph patches, mean-pooled into a
// linear classifier head. Adapters attach to the six matrices of each block.
template <typename T>
struct GlyphTransformer {
    struct Block {
        Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
        AdaptedLinear<T> wq, wk, wv, wo, wff1, wff2;
    };

    GlyphTransformerConfig cfg;
    Tensor<T> patch_proj;  // [d_model x patch_dim]
    Tensor<T> pos_emb;     // [n_patches x d_model]
    std::vector<Block> layers;
    Tensor<T> w_head;      // [n_classes x d_model]

    std::vector<AdaptedLinear<T>*> attach_points() {
        std::vector<AdaptedLinear<T>*> pts;
        for (auto& l : layers)
            for (auto* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.wff1, &l.wff2}) pts.push_back(m);
        return pts;
    }

    // Backbone parameters, head excluded.
    std::vector<Tensor<T>> backbone_params() {
        std::vector<Tensor<T>> ps{patch_proj, pos_emb};
        for (auto& l : layers) {
            for (auto& t : {l.ln1_g, l.ln1_b, l.ln2_g, l.ln2_b}) ps.push_back(t);
            for (auto* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.wff1, &l.wff2}) ps.push_back(m->weight);
        }
        return ps;
    }

    void attach_adapters(std::size_t r_max, T alpha, std::uint64_t seed) {
        std::size_t idx = 0;
        for (auto* m : attach_points()) m->attach(r_max, alpha, mix_seed(seed, 0x1000 + idx++));
    }

    void merge_all() {
        for (auto* m : attach_points()) m->merge_back();
    }

    std::vector<DynLoraAdapter<T>*> adapters() {
        std::vector<DynLoraAdapter<T>*> ads;
        for (auto* m : attach_points())
            if (m->adapter) ads.push_back(&*m->adapter);
        return ads;
    }

    std::size_t total_active_rank() {
        std::size_t k = 0;
        for (auto* ad : adapters()) k += ad->active_rank();
        return k;
    }

    // [n_patches x patch_dim]: row-major patch grid, each patch flattened row-major.
    static Tensor<T> patchify(const GlyphTransformerConfig& cfg, const std::vector<T>& image) {
        if (image.size() != cfg.image_side * cfg.image_side)
            throw ShapeError("image has " + std::to_string(image.size()) + " pixels, expected " +
                             std::to_string(cfg.image_side * cfg.image_side));
        const std::size_t ps = cfg.patch_side, grid = cfg.patches_per_side();
        Tensor<T> out = Tensor<T>::zeros({cfg.n_patches(), cfg.patch_dim()});
        for (std::size_t py = 0; py < grid; ++py)
            for (std::size_t px = 0; px < grid; ++px) {
                T* dst = out.data() + (py * grid + px) * cfg.patch_dim();
                for (std::size_t y = 0; y < ps; ++y)
                    for (std::size_t x = 0; x < ps; ++x)
                        dst[y * ps + x] = image[(py * ps + y) * cfg.image_side + (px * ps + x)];
            }
        return out;
    }

    // batch: [B x image_side^2], each row one image, pixels in [0,1].
    Tensor<T> forward(const Tensor<T>& batch) {
        if (batch.rank() != 2 || batch.cols() != cfg.image_side * cfg.image_side)
            throw ShapeError("batch " + detail::shape_str(batch.shape()) + " does not hold " +
                             std::to_string(cfg.image_side) + "x" + std::to_string(cfg.image_side) + " images");
        if (batch.rows() == 0) throw ShapeError("empty batch");
        if (w_head.rows() != cfg.n_classes)
            throw ConfigError("head emits " + std::to_string(w_head.rows()) + " classes, config expects " +
                              std::to_string(cfg.n_classes));

        const std::size_t bsz = batch.rows(), n_tok = cfg.n_patches();

        Tensor<T> patches = Tensor<T>::zeros({bsz * n_tok, cfg.patch_dim()});
        for (std::size_t b = 0; b < bsz; ++b) {
            std::vector<T> img(batch.data() + b * batch.cols(), batch.data() + (b + 1) * batch.cols());
            auto p = patchify(cfg, img);
            std::copy(p.data(), p.data() + p.size(), patches.data() + b * n_tok * cfg.patch_dim());
        }

        Tensor<T> x = matmul(patches, transpose(patch_proj));  // [B*n_tok x d]
        x = add(x, concat_rows(std::vector<Tensor<T>>(bsz, pos_emb)));

        const std::size_t dh = cfg.d_model / cfg.n_heads;
        const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));
        for (auto& l : layers) {
            Tensor<T> xn = layernorm(x, l.ln1_g, l.ln1_b);
            Tensor<T> q = l.wq(xn), k = l.wk(xn), v = l.wv(xn);
            std::vector<Tensor<T>> img_outs;
            img_outs.reserve(bsz);
            for (std::size_t b = 0; b < bsz; ++b) {
                std::vector<Tensor<T>> heads;
                heads.reserve(cfg.n_heads);
                Tensor<T> qb = slice_rows(q, b * n_tok, (b + 1) * n_tok);
                Tensor<T> kb = slice_rows(k, b * n_tok, (b + 1) * n_tok);
                Tensor<T> vb = slice_rows(v, b * n_tok, (b + 1) * n_tok);
                for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                    Tensor<T> qh = slice_cols(qb, h * dh, (h + 1) * dh);
                    Tensor<T> kh = slice_cols(kb, h * dh, (h + 1) * dh);
                    Tensor<T> vh = slice_cols(vb, h * dh, (h + 1) * dh);
                    Tensor<T> scores = mul_scalar(matmul(qh, transpose(kh)), inv_sqrt_dh);
                    heads.push_back(matmul(softmax(scores), vh));
                }
                img_outs.push_back(concat_cols(heads));
            }
            Tensor<T> attn = l.wo(concat_rows(img_outs));
            x = add(x, attn);

            Tensor<T> xn2 = layernorm(x, l.ln2_g, l.ln2_b);
            Tensor<T> ff = l.wff2(gelu(l.wff1(xn2)));
            x = add(x, ff);
        }

        std::vector<Tensor<T>> pooled;
        pooled.reserve(bsz);
        for (std::size_t b = 0; b < bsz; ++b)
            pooled.push_back(mean_rows(slice_rows(x, b * n_tok, (b + 1) * n_tok)));
        return matmul(concat_rows(pooled), transpose(w_head));
    }
};

template <typename T>
GlyphTransformer<T> init_params(const GlyphTransformerConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    GlyphTransformer<T> m;
    m.cfg = cfg;
    Rng rng(mix_seed(seed, 0x676c7966));
    m.patch_proj = detail::dense_init<T>({cfg.d_model, cfg.patch_dim()}, rng);
    m.pos_emb = detail::dense_init<T>({cfg.n_patches(), cfg.d_model}, rng);
    m.layers.resize(cfg.n_layers);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        auto& l = m.layers[i];
        l.ln1_g = Tensor<T>::filled({cfg.d_model}, T(1));
        l.ln1_b = Tensor<T>::zeros({cfg.d_model});
        l.ln2_g = Tensor<T>::filled({cfg.d_model}, T(1));
        l.ln2_b = Tensor<T>::zeros({cfg.d_model});
        const std::string p = "layer." + std::to_string(i) + ".";
        l.wq = {p + "wq", detail::dense_init<T>({cfg.d_model, cfg.d_model}, rng), std::nullopt};
        l.wk = {p + "wk", detail::dense_init<T>({cfg.d_model, cfg.d_model}, rng), std::nullopt};
        l.wv = {p + "wv", detail::dense_init<T>({cfg.d_model, cfg.d_model}, rng), std::nullopt};
        l.wo = {p + "wo", detail::dense_init<T>({cfg.d_model, cfg.d_model}, rng), std::nullopt};
        l.wff1 = {p + "wff1", detail::dense_init<T>({cfg.d_ff, cfg.d_model}, rng), std::nullopt};
        l.wff2 = {p + "wff2", detail::dense_init<T>({cfg.d_model, cfg.d_ff}, rng), std::nullopt};
    }
    m.w_head = detail::dense_init<T>({cfg.n_classes, cfg.d_model}, rng);
    return m;
}

template <typename T>
void reset_head(GlyphTransformer<T>& m, std::size_t n_classes, std::uint64_t seed) {
    if (n_classes < 2) throw ConfigError("head needs at least 2 classes, got " + std::to_string(n_classes));
    Rng rng(mix_seed(seed, 0x68656164));
    m.cfg.n_classes = n_classes;
    m.w_head = detail::dense_init<T>({n_classes, m.cfg.d_model}, rng);
}

}  // namespace dlra
