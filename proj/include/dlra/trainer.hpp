#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dlra/checkpoint.hpp"
#include "dlra/error.hpp"
#include "dlra/glyphgen.hpp"
#include "dlra/lora.hpp"
#include "dlra/metrics.hpp"
#include "dlra/model.hpp"
#include "dlra/optim.hpp"
#include "dlra/rng.hpp"
#include "dlra/tensor.hpp"

namespace dlra {

enum class TrainMode { dynamic, fixed_rank, full_ft };

inline std::string mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::dynamic: return "dynamic";
        case TrainMode::fixed_rank: return "fixed_rank";
        case TrainMode::full_ft: return "full_ft";
    }
    return "dynamic";
}

inline TrainMode parse_mode(const std::string& s) {
    if (s == "dynamic") return TrainMode::dynamic;
    if (s == "fixed_rank") return TrainMode::fixed_rank;
    if (s == "full_ft") return TrainMode::full_ft;
    throw ConfigError("unknown mode '" + s + "', expected dynamic, fixed_rank or full_ft");
}

struct TrainConfig {
    double lr = 1e-3;  // desk-scale default for the ~100K-parameter model
    double weight_decay = 1e-2;
    double clip_norm = 1.0;
    std::size_t micro_batch = 1;
    std::size_t accumulation_steps = 2;
    std::size_t max_epochs = 30;
    std::size_t patience = 5;
    double lambda = 1e-3;
    double prune_epsilon = 1e-3;
    std::size_t rank = 8;
    double alpha = 16.0;
    TrainMode mode = TrainMode::dynamic;
    std::uint64_t seed = 0;

    // harness switches, not config-file keys
    bool merge_after_task = true;    // fold adapters into the backbone after each task
    bool augment = true;             // train-time flip/rotate/scale augmentation
    bool train_importance = true;    // off: importance weights frozen at 1, no shrinkage
    bool adapt_attention = true;     // off: no adapters on q/k/v/o projections
    bool adapt_mlp = true;           // off: no adapters on the two MLP matrices

    void validate() const {
        if (lr <= 0) throw ConfigError("lr must be positive");
        if (weight_decay < 0) throw ConfigError("weight_decay must be nonnegative");
        if (clip_norm <= 0) throw ConfigError("clip_norm must be positive");
        if (micro_batch < 1) throw ConfigError("micro_batch must be at least 1");
        if (accumulation_steps < 1) throw ConfigError("accumulation_steps must be at least 1");
        if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
        if (patience < 1) throw ConfigError("patience must be at least 1");
        if (lambda < 0) throw ConfigError("lambda must be nonnegative");
        if (prune_epsilon < 0) throw ConfigError("prune_epsilon must be nonnegative");
        if (rank < 1) throw ConfigError("rank must be at least 1");
        if (alpha <= 0) throw ConfigError("alpha must be positive");
    }
};

namespace detail {

inline std::string fmt_real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

}  // namespace detail

// Flat key = value dump of a resolved config; embedded in checkpoints and
// reused by the manifest writer.
inline std::string config_text(const TrainConfig& cfg) {
    std::ostringstream os;
    os << "lr = " << detail::fmt_real(cfg.lr) << "\n";
    os << "weight_decay = " << detail::fmt_real(cfg.weight_decay) << "\n";
    os << "clip_norm = " << detail::fmt_real(cfg.clip_norm) << "\n";
    os << "micro_batch = " << cfg.micro_batch << "\n";
    os << "accumulation_steps = " << cfg.accumulation_steps << "\n";
    os << "max_epochs = " << cfg.max_epochs << "\n";
    os << "patience = " << cfg.patience << "\n";
    os << "lambda = " << detail::fmt_real(cfg.lambda) << "\n";
    os << "prune_epsilon = " << detail::fmt_real(cfg.prune_epsilon) << "\n";
    os << "rank = " << cfg.rank << "\n";
    os << "alpha = " << detail::fmt_real(cfg.alpha) << "\n";
    os << "mode = " << mode_name(cfg.mode) << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "merge_after_task = " << (cfg.merge_after_task ? 1 : 0) << "\n";
    os << "augment = " << (cfg.augment ? 1 : 0) << "\n";
    os << "train_importance = " << (cfg.train_importance ? 1 : 0) << "\n";
    os << "adapt_attention = " << (cfg.adapt_attention ? 1 : 0) << "\n";
    os << "adapt_mlp = " << (cfg.adapt_mlp ? 1 : 0) << "\n";
    return os.str();
}

struct TaskResult {
    std::vector<double> step_losses;       // mean loss per optimizer step
    std::vector<double> epoch_train_loss;  // mean loss per epoch
    std::vector<double> epoch_val_acc;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    std::vector<PruneReport> prunes;
    std::size_t final_active_rank = 0;
    std::size_t trainable_params = 0;  // everything the optimizer steps, head included
    std::size_t adapter_params = 0;    // low-rank factors and importance weights only
    double seconds = 0.0;

    double best_val_acc() const {
        return epoch_val_acc.empty() ? 0.0 : epoch_val_acc[best_epoch];
    }
};

struct TaskSpec {
    std::string name;
    GlyphDataset train;
    GlyphDataset test;
};

struct EvalResult {
    double accuracy = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    ConfusionMatrix cm;
};

template <typename T>
struct SequentialResult {
    // r[t_eval][t_after]: accuracy on task t_eval's test split after finishing
    // task t_after; cells with t_after < t_eval are NaN (not yet trainable).
    std::vector<std::vector<double>> r;
    std::vector<TaskResult> tasks;
    std::vector<std::size_t> active_ranks;  // final total active rank per task
    std::vector<std::vector<std::pair<std::string, std::size_t>>> layer_ranks;
    std::vector<std::string> checkpoint_paths;
    std::vector<std::size_t> checkpoint_bytes;
    std::vector<Tensor<T>> heads;
    std::vector<std::size_t> head_classes;
    double seconds = 0.0;

    std::vector<double> forgetting() const { return dlra::forgetting(r); }
};

// Attaches fresh adapters at the points the config enables. Seeds are mixed
// per attachment index over the full 12-point enumeration, so enabling or
// disabling a subset never reshuffles the seeds of the others.
template <typename T>
void attach_adapters_for(GlyphTransformer<T>& m, const TrainConfig& cfg, std::uint64_t task_seed) {
    auto pts = m.attach_points();
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const auto& id = pts[i]->id;
        const bool attn = id.ends_with("wq") || id.ends_with("wk") || id.ends_with("wv") || id.ends_with("wo");
        const bool mlp = id.ends_with("wff1") || id.ends_with("wff2");
        if ((attn && cfg.adapt_attention) || (mlp && cfg.adapt_mlp))
            pts[i]->attach(cfg.rank, static_cast<T>(cfg.alpha), mix_seed(mix_seed(task_seed, 0x6164617074), i));
    }
    if (!cfg.train_importance)
        for (auto* ad : m.adapters()) ad->w.set_requires_grad(false);
}

template <typename T>
struct ParamSets {
    std::vector<Tensor<T>> decayed;
    std::vector<Tensor<T>> plain;

    std::vector<Tensor<T>> all() const {
        std::vector<Tensor<T>> out = decayed;
        out.insert(out.end(), plain.begin(), plain.end());
        return out;
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& t : decayed) n += t.size();
        for (const auto& t : plain) n += t.size();
        return n;
    }
};

// Chooses what trains under the given mode and normalizes requires_grad
// across the whole model. Weight decay touches dense matrices only: adapter
// factors in the adapter modes, base matrices and head in full fine-tuning.
// Importance weights, positional embeddings and normalization parameters are
// never decayed.
template <typename T>
ParamSets<T> trainable_params(GlyphTransformer<T>& m, const TrainConfig& cfg) {
    ParamSets<T> ps;
    if (cfg.mode == TrainMode::full_ft) {
        if (!m.adapters().empty()) throw ConfigError("full_ft cannot train with adapters attached");
        ps.decayed.push_back(m.patch_proj.set_requires_grad(true));
        ps.plain.push_back(m.pos_emb.set_requires_grad(true));
        for (auto& blk : m.layers) {
            for (auto* w : {&blk.wq, &blk.wk, &blk.wv, &blk.wo, &blk.wff1, &blk.wff2})
                ps.decayed.push_back(w->weight.set_requires_grad(true));
            for (auto* g : {&blk.ln1_g, &blk.ln1_b, &blk.ln2_g, &blk.ln2_b})
                ps.plain.push_back(g->set_requires_grad(true));
        }
        ps.decayed.push_back(m.w_head.set_requires_grad(true));
        return ps;
    }
    for (auto& p : m.backbone_params()) p.set_requires_grad(false);
    for (auto* ad : m.adapters()) {
        ps.decayed.push_back(ad->a.set_requires_grad(true));
        ps.decayed.push_back(ad->b.set_requires_grad(true));
        if (cfg.train_importance) ps.plain.push_back(ad->w.set_requires_grad(true));
    }
    ps.plain.push_back(m.w_head.set_requires_grad(true));
    return ps;
}

namespace detail {

template <typename T>
Tensor<T> batch_tensor(const GlyphDataset& ds, const std::vector<std::size_t>& idx,
                       std::size_t begin, std::size_t end, Rng* aug_rng) {
    const std::size_t px = static_cast<std::size_t>(ds.height) * ds.width;
    std::vector<T> data;
    data.reserve((end - begin) * px);
    for (std::size_t k = begin; k < end; ++k) {
        const std::uint8_t* src = ds.image(idx[k]);
        if (aug_rng) {
            auto aug = augment_image(src, *aug_rng);
            for (auto b : aug) data.push_back(static_cast<T>(b) / T(255));
        } else {
            for (std::size_t j = 0; j < px; ++j) data.push_back(static_cast<T>(src[j]) / T(255));
        }
    }
    return Tensor<T>::from({end - begin, px}, std::move(data));
}

inline std::vector<int> batch_labels(const GlyphDataset& ds, const std::vector<std::size_t>& idx,
                                     std::size_t begin, std::size_t end) {
    std::vector<int> out;
    out.reserve(end - begin);
    for (std::size_t k = begin; k < end; ++k) out.push_back(static_cast<int>(ds.labels[idx[k]]));
    return out;
}

}  // namespace detail

inline constexpr std::size_t kEvalBatch = 16;

// Accuracy and macro F1 over a dataset (or an index subset), gradient-free.
// Inputs are only normalized; augmentation never runs here.
template <typename T>
EvalResult evaluate(GlyphTransformer<T>& m, const GlyphDataset& ds,
                    const std::vector<std::size_t>* subset = nullptr) {
    if (ds.size() == 0) throw DataError("cannot evaluate an empty dataset");
    std::vector<std::size_t> idx;
    if (subset) {
        idx = *subset;
    } else {
        idx.resize(ds.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    }
    if (idx.empty()) throw DataError("cannot evaluate an empty subset");
    NoGrad<T> ng;
    std::vector<int> preds, labels;
    preds.reserve(idx.size());
    labels.reserve(idx.size());
    for (std::size_t pos = 0; pos < idx.size(); pos += kEvalBatch) {
        const std::size_t end = std::min(idx.size(), pos + kEvalBatch);
        auto x = detail::batch_tensor<T>(ds, idx, pos, end, nullptr);
        auto logits = m.forward(x);
        for (std::size_t i = 0; i < end - pos; ++i) {
            int arg = 0;
            T best = logits.at(i, 0);
            for (std::size_t c = 1; c < logits.cols(); ++c)
                if (logits.at(i, c) > best) {
                    best = logits.at(i, c);
                    arg = static_cast<int>(c);
                }
            preds.push_back(arg);
            labels.push_back(static_cast<int>(ds.labels[idx[pos + i]]));
        }
    }
    EvalResult ev;
    ev.cm = confusion(preds, labels, m.cfg.n_classes);
    ev.accuracy = accuracy(ev.cm);
    ev.macro_recall = macro_recall(ev.cm);
    ev.macro_f1 = macro_f1(ev.cm);
    return ev;
}

// One task: 90/10 seeded split, AdamW with gradient accumulation and global
// clipping, proximal shrinkage after each step in dynamic mode, early
// stopping on validation accuracy with best-epoch restore, and a single prune
// at task end in dynamic mode.
template <typename T>
TaskResult train_task(GlyphTransformer<T>& m, const TrainConfig& cfg, const GlyphDataset& data,
                      std::uint64_t task_seed) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    if (data.size() == 0) throw DataError("training dataset is empty");
    if (data.n_classes != m.cfg.n_classes)
        throw ConfigError("dataset has " + std::to_string(data.n_classes) + " classes, model head has " +
                          std::to_string(m.cfg.n_classes));

    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng(mix_seed(task_seed, 0x73706c6974));
    split_rng.shuffle(order);
    const std::size_t n_val = std::max<std::size_t>(1, order.size() / 10);
    if (order.size() <= n_val) throw DataError("dataset too small to split");
    std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

    auto ps = trainable_params(m, cfg);
    AdamW<T> opt(cfg.lr, cfg.weight_decay);
    for (auto& p : ps.decayed) opt.add_param(p, true);
    for (auto& p : ps.plain) opt.add_param(p, false);
    auto stepped = ps.all();
    auto adapters = m.adapters();

    TaskResult res;
    res.trainable_params = ps.count();
    for (auto* ad : adapters)
        res.adapter_params += ad->a.size() + ad->b.size() + (cfg.train_importance ? ad->w.size() : 0);

    const bool shrink = cfg.mode == TrainMode::dynamic && cfg.train_importance;
    const double tau = cfg.lambda * cfg.lr;
    const std::size_t group_cap = cfg.micro_batch * cfg.accumulation_steps;

    std::vector<std::vector<T>> best_vals;
    double best_acc = -1.0;
    std::size_t bad_epochs = 0;
    auto& tape = Tape<T>::instance();

    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng order_rng(mix_seed(mix_seed(task_seed, 0x6f72646572), epoch));
        order_rng.shuffle(train_idx);
        Rng aug_rng(mix_seed(mix_seed(task_seed, 0x617567), epoch));
        double epoch_loss = 0.0;

        std::size_t pos = 0;
        while (pos < train_idx.size()) {
            const std::size_t group_n = std::min(train_idx.size() - pos, group_cap);
            const std::size_t group_end = pos + group_n;
            double group_loss = 0.0;
            while (pos < group_end) {
                const std::size_t micro_end = std::min(group_end, pos + cfg.micro_batch);
                auto x = detail::batch_tensor<T>(data, train_idx, pos, micro_end,
                                                 cfg.augment ? &aug_rng : nullptr);
                auto labels = detail::batch_labels(data, train_idx, pos, micro_end);
                auto loss = cross_entropy(m.forward(x), labels);
                const double micro_loss = static_cast<double>(loss.item());
                if (!std::isfinite(micro_loss))
                    throw NumericError("non-finite loss at optimizer step " +
                                       std::to_string(res.step_losses.size() + 1));
                backward(mul_scalar(loss, static_cast<T>(static_cast<double>(micro_end - pos) /
                                                         static_cast<double>(group_n))));
                tape.clear();
                group_loss += micro_loss * static_cast<double>(micro_end - pos);
                pos = micro_end;
            }
            global_grad_clip(stepped, static_cast<T>(cfg.clip_norm));
            opt.step();
            if (shrink)
                for (auto* ad : adapters) soft_shrink_weights(*ad, static_cast<T>(tau));
            res.step_losses.push_back(group_loss / static_cast<double>(group_n));
            epoch_loss += group_loss;
        }

        res.epoch_train_loss.push_back(epoch_loss / static_cast<double>(train_idx.size()));
        const double val_acc = evaluate(m, data, &val_idx).accuracy;
        res.epoch_val_acc.push_back(val_acc);
        res.epochs_run = epoch + 1;

        if (val_acc > best_acc) {
            best_acc = val_acc;
            res.best_epoch = epoch;
            best_vals.clear();
            for (const auto& p : stepped) best_vals.push_back(p.values());
            bad_epochs = 0;
        } else if (++bad_epochs >= cfg.patience) {
            break;
        }
    }

    for (std::size_t i = 0; i < stepped.size(); ++i) stepped[i].values() = best_vals[i];

    if (cfg.mode == TrainMode::dynamic && cfg.prune_epsilon > 0)
        for (auto* ad : adapters) res.prunes.push_back(prune(*ad, static_cast<T>(cfg.prune_epsilon)));
    res.final_active_rank = m.total_active_rank();
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

namespace detail {

inline std::string arch_text(const GlyphTransformerConfig& c) {
    std::ostringstream os;
    os << "image_side=" << c.image_side << " patch_side=" << c.patch_side << " d_model=" << c.d_model
       << " n_heads=" << c.n_heads << " n_layers=" << c.n_layers << " d_ff=" << c.d_ff
       << " n_classes=" << c.n_classes;
    return os.str();
}

inline GlyphTransformerConfig parse_arch_text(const std::string& text) {
    GlyphTransformerConfig c;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) {
        auto eq = tok.find('=');
        if (eq == std::string::npos) throw DataError("bad model description token '" + tok + "'");
        const std::string key = tok.substr(0, eq);
        const std::size_t val = static_cast<std::size_t>(std::stoull(tok.substr(eq + 1)));
        if (key == "image_side") c.image_side = val;
        else if (key == "patch_side") c.patch_side = val;
        else if (key == "d_model") c.d_model = val;
        else if (key == "n_heads") c.n_heads = val;
        else if (key == "n_layers") c.n_layers = val;
        else if (key == "d_ff") c.d_ff = val;
        else if (key == "n_classes") c.n_classes = val;
        else throw DataError("unknown model description key '" + key + "'");
    }
    c.validate();
    return c;
}

}  // namespace detail

// Checkpoint layout: backbone.* holds the unmerged base parameters, lora.*
// the adapter factors plus active masks, merged.* a base-plus-delta copy of
// every adapted matrix at save time, head.<k>.weight one classifier per task
// seen so far, and meta.* the model description and resolved config.
template <typename T>
Checkpoint build_checkpoint(GlyphTransformer<T>& m, const TrainConfig& cfg,
                            const std::vector<Tensor<T>>& heads) {
    Checkpoint ck;
    ck.put_text("meta.arch", detail::arch_text(m.cfg));
    ck.put_text("meta.config", config_text(cfg));
    put_tensor(ck, "backbone.patch_proj", m.patch_proj);
    put_tensor(ck, "backbone.pos_emb", m.pos_emb);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        auto& blk = m.layers[l];
        const std::string base = "backbone.layer." + std::to_string(l) + ".";
        put_tensor(ck, base + "ln1_g", blk.ln1_g);
        put_tensor(ck, base + "ln1_b", blk.ln1_b);
        put_tensor(ck, base + "ln2_g", blk.ln2_g);
        put_tensor(ck, base + "ln2_b", blk.ln2_b);
    }
    for (auto* pt : m.attach_points()) {
        put_tensor(ck, "backbone." + pt->id + ".weight", pt->weight);
        if (pt->adapter) {
            const auto& ad = *pt->adapter;
            put_tensor(ck, "lora." + pt->id + ".a", ad.a);
            put_tensor(ck, "lora." + pt->id + ".b", ad.b);
            put_tensor(ck, "lora." + pt->id + ".w", ad.w);
            ck.put_u8("lora." + pt->id + ".active", {ad.active.size()},
                      std::vector<std::uint8_t>(ad.active.begin(), ad.active.end()));
            put_tensor(ck, "merged." + pt->id + ".weight", merge(ad));
        }
    }
    if (heads.empty()) throw DataError("checkpoint needs at least one classifier head");
    for (std::size_t k = 0; k < heads.size(); ++k)
        put_tensor(ck, "head." + std::to_string(k) + ".weight", heads[k]);
    return ck;
}

template <typename T>
struct LoadedModel {
    GlyphTransformer<T> model;
    TrainConfig cfg;
    std::vector<Tensor<T>> heads;   // head k belongs to task k; model holds the last
    bool has_adapters = false;
};

template <typename T>
void save_checkpoint(GlyphTransformer<T>& m, const TrainConfig& cfg, const std::vector<Tensor<T>>& heads,
                     const std::string& path) {
    build_checkpoint(m, cfg, heads).save(path);
}

namespace detail {

inline TrainConfig parse_config_entry(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "lr") cfg.lr = std::stod(val);
        else if (key == "weight_decay") cfg.weight_decay = std::stod(val);
        else if (key == "clip_norm") cfg.clip_norm = std::stod(val);
        else if (key == "micro_batch") cfg.micro_batch = std::stoull(val);
        else if (key == "accumulation_steps") cfg.accumulation_steps = std::stoull(val);
        else if (key == "max_epochs") cfg.max_epochs = std::stoull(val);
        else if (key == "patience") cfg.patience = std::stoull(val);
        else if (key == "lambda") cfg.lambda = std::stod(val);
        else if (key == "prune_epsilon") cfg.prune_epsilon = std::stod(val);
        else if (key == "rank") cfg.rank = std::stoull(val);
        else if (key == "alpha") cfg.alpha = std::stod(val);
        else if (key == "mode") cfg.mode = parse_mode(val);
        else if (key == "seed") cfg.seed = std::stoull(val);
        else if (key == "merge_after_task") cfg.merge_after_task = val != "0";
        else if (key == "augment") cfg.augment = val != "0";
        else if (key == "train_importance") cfg.train_importance = val != "0";
        else if (key == "adapt_attention") cfg.adapt_attention = val != "0";
        else if (key == "adapt_mlp") cfg.adapt_mlp = val != "0";
    }
    return cfg;
}

}  // namespace detail

// Rebuilds model and adapters from a checkpoint. With use_merged the adapted
// matrices load their merged copies and no adapters are attached, which is
// the adapter-free view of the same function.
template <typename T>
LoadedModel<T> load_checkpoint_state(const Checkpoint& ck, bool use_merged = false) {
    LoadedModel<T> out;
    const auto arch = detail::parse_arch_text(ck.get_text("meta.arch"));
    out.cfg = detail::parse_config_entry(ck.get_text("meta.config"));
    // skeleton only: every tensor below is replaced by file contents
    out.model = init_params<T>(arch, 0);
    auto& m = out.model;
    m.patch_proj = get_tensor<T>(ck, "backbone.patch_proj");
    m.pos_emb = get_tensor<T>(ck, "backbone.pos_emb");
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
        auto& blk = m.layers[l];
        const std::string base = "backbone.layer." + std::to_string(l) + ".";
        blk.ln1_g = get_tensor<T>(ck, base + "ln1_g");
        blk.ln1_b = get_tensor<T>(ck, base + "ln1_b");
        blk.ln2_g = get_tensor<T>(ck, base + "ln2_g");
        blk.ln2_b = get_tensor<T>(ck, base + "ln2_b");
    }
    for (auto* pt : m.attach_points()) {
        const bool adapted = ck.has("lora." + pt->id + ".a");
        if (adapted && use_merged) {
            pt->weight = get_tensor<T>(ck, "merged." + pt->id + ".weight");
            continue;
        }
        pt->weight = get_tensor<T>(ck, "backbone." + pt->id + ".weight");
        if (!adapted) continue;
        out.has_adapters = true;
        auto a = get_tensor<T>(ck, "lora." + pt->id + ".a");
        pt->attach(a.rows(), static_cast<T>(out.cfg.alpha), 0);
        auto& ad = *pt->adapter;
        ad.a = a.set_requires_grad(false);
        ad.b = get_tensor<T>(ck, "lora." + pt->id + ".b").set_requires_grad(false);
        ad.w = get_tensor<T>(ck, "lora." + pt->id + ".w").set_requires_grad(false);
        auto mask = ck.get_u8("lora." + pt->id + ".active");
        ad.active.assign(mask.begin(), mask.end());
        ad.rebuild_mask();
    }
    for (std::size_t k = 0;; ++k) {
        const std::string name = "head." + std::to_string(k) + ".weight";
        if (!ck.has(name)) break;
        out.heads.push_back(get_tensor<T>(ck, name).set_requires_grad(false));
    }
    if (out.heads.empty()) throw DataError("checkpoint holds no classifier head");
    m.w_head = out.heads.back();
    m.cfg.n_classes = m.w_head.rows();
    return out;
}

template <typename T>
LoadedModel<T> load_checkpoint(const std::string& path, bool use_merged = false) {
    return load_checkpoint_state<T>(Checkpoint::load(path), use_merged);
}

namespace detail {

// Evaluates with a temporarily swapped classifier head.
template <typename T>
EvalResult eval_with_head(GlyphTransformer<T>& m, const Tensor<T>& head, const GlyphDataset& ds) {
    auto saved_head = m.w_head;
    auto saved_classes = m.cfg.n_classes;
    m.w_head = head;
    m.cfg.n_classes = head.rows();
    auto ev = evaluate(m, ds);
    m.w_head = saved_head;
    m.cfg.n_classes = saved_classes;
    return ev;
}

template <typename T>
struct AdapterSnapshot {
    std::string id;
    std::vector<T> a, b, w;
    std::vector<std::uint8_t> active;
};

}  // namespace detail

// Algorithm: per task attach fresh adapters on the current backbone, reset
// the head, train, checkpoint, then fold the adapters in (default) or set
// them aside (merge_after_task=false, frozen-backbone variant). After each
// task every already-trained head is re-evaluated to fill the accuracy
// matrix.
template <typename T>
SequentialResult<T> train_sequential(const GlyphTransformerConfig& arch, const std::vector<TaskSpec>& tasks,
                                     const TrainConfig& cfg, const std::string& checkpoint_dir = "") {
    cfg.validate();
    if (tasks.empty()) throw DataError("sequential run needs at least one task");
    const auto t0 = std::chrono::steady_clock::now();

    GlyphTransformerConfig base_arch = arch;
    base_arch.n_classes = tasks.front().train.n_classes;
    auto m = init_params<T>(base_arch, cfg.seed);

    SequentialResult<T> res;
    const std::size_t n_tasks = tasks.size();
    res.r.assign(n_tasks, std::vector<double>(n_tasks, std::numeric_limits<double>::quiet_NaN()));
    std::vector<std::vector<detail::AdapterSnapshot<T>>> kept_adapters(n_tasks);

    for (std::size_t t = 0; t < n_tasks; ++t) {
        const std::uint64_t task_seed = mix_seed(cfg.seed, 0x7461736b00ull + t);
        if (tasks[t].train.size() == 0 || tasks[t].test.size() == 0)
            throw DataError("task '" + tasks[t].name + "' has an empty split");
        reset_head(m, tasks[t].train.n_classes, task_seed);
        if (cfg.mode != TrainMode::full_ft) attach_adapters_for(m, cfg, task_seed);

        res.tasks.push_back(train_task(m, cfg, tasks[t].train, task_seed));
        res.heads.push_back(m.w_head.clone_detached());
        res.head_classes.push_back(m.cfg.n_classes);
        res.active_ranks.push_back(res.tasks.back().final_active_rank);
        std::vector<std::pair<std::string, std::size_t>> lr_ranks;
        for (auto* pt : m.attach_points())
            if (pt->adapter) lr_ranks.emplace_back(pt->id, pt->adapter->active_rank());
        res.layer_ranks.push_back(std::move(lr_ranks));

        if (!checkpoint_dir.empty()) {
            const std::string path = checkpoint_dir + "/task" + std::to_string(t) + ".dlra";
            auto ck = build_checkpoint(m, cfg, res.heads);
            auto bytes = ck.serialize();
            {
                std::ofstream f(path, std::ios::binary | std::ios::trunc);
                if (!f) throw DataError("cannot open '" + path + "' for writing");
                f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
                if (!f) throw DataError("failed writing '" + path + "'");
            }
            res.checkpoint_paths.push_back(path);
            res.checkpoint_bytes.push_back(bytes.size());
        }

        if (cfg.mode != TrainMode::full_ft) {
            if (cfg.merge_after_task) {
                m.merge_all();
            } else {
                for (auto* pt : m.attach_points()) {
                    if (!pt->adapter) continue;
                    detail::AdapterSnapshot<T> snap;
                    snap.id = pt->id;
                    snap.a = pt->adapter->a.values();
                    snap.b = pt->adapter->b.values();
                    snap.w = pt->adapter->w.values();
                    snap.active = pt->adapter->active;
                    kept_adapters[t].push_back(std::move(snap));
                    pt->adapter.reset();
                }
            }
        }

        for (std::size_t e = 0; e <= t; ++e) {
            if (!cfg.merge_after_task && cfg.mode != TrainMode::full_ft) {
                for (const auto& snap : kept_adapters[e]) {
                    for (auto* pt : m.attach_points()) {
                        if (pt->id != snap.id) continue;
                        pt->attach(snap.a.size() / pt->weight.cols(), static_cast<T>(cfg.alpha), 0);
                        pt->adapter->a.values() = snap.a;
                        pt->adapter->b.values() = snap.b;
                        pt->adapter->w.values() = snap.w;
                        pt->adapter->active = snap.active;
                        pt->adapter->rebuild_mask();
                    }
                }
                res.r[e][t] = detail::eval_with_head(m, res.heads[e], tasks[e].test).accuracy;
                for (auto* pt : m.attach_points()) pt->adapter.reset();
            } else {
                res.r[e][t] = detail::eval_with_head(m, res.heads[e], tasks[e].test).accuracy;
            }
        }
    }

    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace dlra
