#include <algorithm>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dlra/config.hpp"
#include "dlra/trainer.hpp"

namespace fs = std::filesystem;

namespace {

std::string task_label(const std::string& dir) {
    auto base = fs::path(dir).filename().string();
    return base.empty() ? dir : base;
}

dlra::TaskSpec load_task(const std::string& dir) {
    dlra::TaskSpec t;
    t.name = task_label(dir);
    t.train = dlra::read_gly1((fs::path(dir) / "train.gly1").string());
    t.test = dlra::read_gly1((fs::path(dir) / "test.gly1").string());
    return t;
}

std::vector<dlra::TaskSpec> load_tasks(const std::vector<std::string>& dirs) {
    if (dirs.empty()) throw dlra::ConfigError("config lists no tasks");
    std::vector<dlra::TaskSpec> tasks;
    for (const auto& d : dirs) tasks.push_back(load_task(d));
    return tasks;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

void sequential_rows(std::vector<dlra::ReportRow>& rows, const std::string& config_label,
                     const std::vector<dlra::TaskSpec>& tasks, const dlra::SequentialResult<float>& seq,
                     bool full_detail) {
    const std::size_t T = tasks.size();
    auto fg = seq.forgetting();
    for (std::size_t t = 0; t < T; ++t) {
        const auto& name = tasks[t].name;
        rows.push_back({config_label, name, "accuracy", seq.r[t][T - 1]});
        if (!full_detail) continue;
        rows.push_back({config_label, name, "accuracy_when_trained", seq.r[t][t]});
        for (std::size_t j = t; j < T; ++j)
            rows.push_back({config_label, name, "accuracy_after_task" + std::to_string(j), seq.r[t][j]});
        if (t + 1 < T) rows.push_back({config_label, name, "forgetting", fg[t]});
        rows.push_back({config_label, name, "active_rank", static_cast<double>(seq.active_ranks[t])});
        rows.push_back({config_label, name, "trainable_params", static_cast<double>(seq.tasks[t].trainable_params)});
        rows.push_back({config_label, name, "adapter_params", static_cast<double>(seq.tasks[t].adapter_params)});
        if (!seq.checkpoint_bytes.empty())
            rows.push_back({config_label, name, "checkpoint_bytes", static_cast<double>(seq.checkpoint_bytes[t])});
        rows.push_back({config_label, name, "epochs", static_cast<double>(seq.tasks[t].epochs_run)});
        rows.push_back({config_label, name, "best_val_acc", seq.tasks[t].best_val_acc()});
    }
}

void cmd_generate(int family, std::size_t per_class, std::uint64_t seed, const std::string& out) {
    fs::create_directories(out);
    auto train = dlra::generate_dataset(family, per_class, 2 * seed);
    const std::size_t test_per_class = std::max<std::size_t>(2, per_class / 5);
    auto test = dlra::generate_dataset(family, test_per_class, 2 * seed + 1);
    const auto train_path = (fs::path(out) / "train.gly1").string();
    const auto test_path = (fs::path(out) / "test.gly1").string();
    dlra::write_gly1(train, train_path);
    dlra::write_gly1(test, test_path);
    std::ostringstream mf;
    mf << "command = generate-data\n"
       << "family = " << family << "\n"
       << "per_class = " << per_class << "\n"
       << "test_per_class = " << test_per_class << "\n"
       << "seed = " << seed << "\n"
       << "train_count = " << train.size() << "\n"
       << "test_count = " << test.size() << "\n";
    dlra::write_text_file((fs::path(out) / "manifest.txt").string(), mf.str());
    std::cout << "wrote " << train_path << " (" << train.size() << " glyphs) and " << test_path << " ("
              << test.size() << " glyphs)\n";
}

void cmd_train(const std::string& config_path, const std::string& mode_override, const std::string& out,
               bool no_merge) {
    auto rc = dlra::load_run_config(config_path);
    if (!mode_override.empty()) rc.train.mode = dlra::parse_mode(mode_override);
    if (no_merge) rc.train.merge_after_task = false;
    auto tasks = load_tasks(rc.task_dirs);
    fs::create_directories(out);

    auto seq = dlra::train_sequential<float>(dlra::GlyphTransformerConfig{}, tasks, rc.train, out);

    const std::size_t T = tasks.size();
    fs::copy_file(seq.checkpoint_paths[T - 1], fs::path(out) / "model.dlra",
                  fs::copy_options::overwrite_existing);

    std::vector<dlra::ReportRow> rows;
    sequential_rows(rows, dlra::mode_name(rc.train.mode), tasks, seq, true);
    dlra::write_report_csv(rows, (fs::path(out) / "report.csv").string());
    dlra::write_report_md(rows, (fs::path(out) / "report.md").string());
    dlra::write_text_file((fs::path(out) / "manifest.txt").string(),
                          dlra::manifest_text(rc.train, rc.task_dirs, {{"command", "train"}}));

    for (std::size_t t = 0; t < T; ++t) {
        std::cout << "task " << t << " (" << tasks[t].name << "): accuracy " << fmt(seq.r[t][T - 1])
                  << ", active rank " << seq.active_ranks[t] << ", trainable params "
                  << seq.tasks[t].trainable_params << ", adapter params " << seq.tasks[t].adapter_params
                  << ", checkpoint bytes " << seq.checkpoint_bytes[t] << ", epochs "
                  << seq.tasks[t].epochs_run << "\n";
    }
    auto fg = seq.forgetting();
    for (std::size_t t = 0; t < fg.size(); ++t)
        std::cout << "forgetting task " << t << ": " << fmt(fg[t]) << "\n";
    std::cout << "final model: " << (fs::path(out) / "model.dlra").string() << "\n";
}

void cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& out) {
    auto loaded = dlra::load_checkpoint<float>(checkpoint);
    auto ds = dlra::read_gly1(data);
    if (ds.n_classes != loaded.model.cfg.n_classes)
        throw dlra::ConfigError("dataset has " + std::to_string(ds.n_classes) + " classes, checkpoint head has " +
                                std::to_string(loaded.model.cfg.n_classes));
    auto ev = dlra::evaluate(loaded.model, ds);
    std::cout << "accuracy = " << fmt(ev.accuracy) << "\n"
              << "macro_recall = " << fmt(ev.macro_recall) << "\n"
              << "macro_f1 = " << fmt(ev.macro_f1) << "\n";

    fs::create_directories(out);
    const std::string label = dlra::mode_name(loaded.cfg.mode);
    std::string task = task_label(fs::path(data).parent_path().string());
    if (task.empty()) task = fs::path(data).filename().string();
    std::vector<dlra::ReportRow> rows{{label, task, "accuracy", ev.accuracy},
                                      {label, task, "macro_recall", ev.macro_recall},
                                      {label, task, "macro_f1", ev.macro_f1}};
    dlra::write_report_csv(rows, (fs::path(out) / "report.csv").string());
    dlra::write_report_md(rows, (fs::path(out) / "report.md").string());
    dlra::write_text_file((fs::path(out) / "manifest.txt").string(),
                          dlra::manifest_text(loaded.cfg, {},
                                              {{"command", "eval"}, {"checkpoint", checkpoint}, {"data", data}}));
}

void cmd_merge(const std::string& checkpoint, const std::string& out) {
    auto merged = dlra::load_checkpoint<float>(checkpoint, true);
    fs::create_directories(out);
    const auto out_path = (fs::path(out) / "model.dlra").string();
    dlra::save_checkpoint(merged.model, merged.cfg, merged.heads, out_path);
    auto verify = dlra::Checkpoint::load(out_path);
    for (const auto& name : verify.names())
        if (name.rfind("lora.", 0) == 0) throw dlra::DataError("merge left adapter entries behind");
    dlra::write_text_file((fs::path(out) / "manifest.txt").string(),
                          dlra::manifest_text(merged.cfg, {},
                                              {{"command", "merge"}, {"checkpoint", checkpoint}}));
    std::cout << "merged checkpoint written to " << out_path << " (" << verify.size() << " entries)\n";
}

struct GridAxis {
    std::string key;                  // lr or batch
    std::vector<std::string> labels;  // original value spellings
    std::vector<double> values;
};

GridAxis parse_axis(const std::string& token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos)
        throw dlra::ConfigError("grid axis '" + token + "' is not key=v1,v2,...");
    GridAxis ax;
    ax.key = token.substr(0, eq);
    if (ax.key != "lr" && ax.key != "batch")
        throw dlra::ConfigError("unknown grid axis '" + ax.key + "', expected lr or batch");
    std::stringstream ss(token.substr(eq + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) throw dlra::ConfigError("empty value in grid axis '" + ax.key + "'");
        try {
            std::size_t used = 0;
            const double v = std::stod(item, &used);
            if (used != item.size()) throw std::invalid_argument("trailing characters");
            ax.labels.push_back(item);
            ax.values.push_back(v);
        } catch (const std::exception&) {
            throw dlra::ConfigError("bad value '" + item + "' in grid axis '" + ax.key + "'");
        }
    }
    if (ax.values.empty()) throw dlra::ConfigError("grid axis '" + ax.key + "' has no values");
    return ax;
}

void cmd_ablate(const std::string& config_path, const std::vector<std::string>& grid,
                const std::string& components_csv, const std::string& out) {
    if (grid.empty() == components_csv.empty())
        throw dlra::ConfigError("ablate needs exactly one of --grid or --components");
    auto rc = dlra::load_run_config(config_path);
    auto tasks = load_tasks(rc.task_dirs);
    fs::create_directories(out);

    struct Cell {
        std::string label;
        dlra::TrainConfig cfg;
        std::vector<std::pair<std::string, std::string>> overrides;
    };
    std::vector<Cell> cells;

    if (!grid.empty()) {
        std::vector<GridAxis> axes;
        for (const auto& tok : grid) axes.push_back(parse_axis(tok));
        std::vector<std::size_t> at(axes.size(), 0);
        while (true) {
            Cell c;
            c.cfg = rc.train;
            std::ostringstream label;
            for (std::size_t a = 0; a < axes.size(); ++a) {
                const auto& ax = axes[a];
                if (a) label << " ";
                label << ax.key << "=" << ax.labels[at[a]];
                if (ax.key == "lr") {
                    c.cfg.lr = ax.values[at[a]];
                    c.overrides.emplace_back("lr", ax.labels[at[a]]);
                } else {
                    c.cfg.micro_batch = static_cast<std::size_t>(ax.values[at[a]]);
                    c.overrides.emplace_back("micro_batch", ax.labels[at[a]]);
                }
            }
            c.label = label.str();
            cells.push_back(std::move(c));
            bool done = false;
            std::size_t a = axes.size();
            while (a > 0) {
                --a;
                if (++at[a] < axes[a].values.size()) break;
                at[a] = 0;
                if (a == 0) done = true;
            }
            if (done) break;
        }
    } else {
        std::stringstream ss(components_csv);
        std::string item;
        std::vector<std::string> comps;
        while (std::getline(ss, item, ',')) {
            if (std::find(comps.begin(), comps.end(), item) != comps.end())
                throw dlra::ConfigError("component '" + item + "' listed twice");
            comps.push_back(item);
        }
        if (comps.empty()) throw dlra::ConfigError("--components lists nothing");
        for (const auto& comp : comps) {
            Cell c;
            c.cfg = rc.train;
            c.label = "no_" + comp;
            if (comp == "dynamic_rank") {
                c.cfg.train_importance = false;
                c.overrides.emplace_back("train_importance", "0");
            } else if (comp == "mlp") {
                c.cfg.adapt_mlp = false;
                c.overrides.emplace_back("adapt_mlp", "0");
            } else if (comp == "attention") {
                c.cfg.adapt_attention = false;
                c.overrides.emplace_back("adapt_attention", "0");
            } else if (comp == "sparsity") {
                c.cfg.lambda = 0.0;
                c.overrides.emplace_back("lambda", "0");
            } else {
                throw dlra::ConfigError("unknown component '" + comp +
                                        "', expected dynamic_rank, mlp, attention or sparsity");
            }
            cells.push_back(std::move(c));
        }
    }

    std::vector<dlra::ReportRow> rows;
    std::vector<std::pair<std::string, std::string>> extra{{"command", "ablate"}};
    if (!grid.empty()) {
        std::string spec;
        for (std::size_t i = 0; i < grid.size(); ++i) spec += (i ? " " : "") + grid[i];
        extra.emplace_back("grid", spec);
    } else {
        extra.emplace_back("components", components_csv);
    }
    for (std::size_t i = 0; i < cells.size(); ++i) {
        auto seq = dlra::train_sequential<float>(dlra::GlyphTransformerConfig{}, tasks, cells[i].cfg, "");
        sequential_rows(rows, cells[i].label, tasks, seq, false);
        for (std::size_t t = 0; t < tasks.size(); ++t)
            std::cout << cells[i].label << " " << tasks[t].name << ": accuracy "
                      << fmt(seq.r[t][tasks.size() - 1]) << "\n";
        for (const auto& [k, v] : cells[i].overrides)
            extra.emplace_back("cell." + std::to_string(i) + "." + k, v);
    }

    dlra::write_report_csv(rows, (fs::path(out) / "report.csv").string());
    dlra::write_report_md(rows, (fs::path(out) / "report.md").string());
    dlra::write_text_file((fs::path(out) / "manifest.txt").string(),
                          dlra::manifest_text(rc.train, rc.task_dirs, extra));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dynamic low-rank adapter workbench"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate-data", "write synthetic glyph train/test sets");
    int family = 0;
    std::size_t per_class = 20;
    std::uint64_t gen_seed = 0;
    std::string gen_out = ".";
    gen->add_option("--family", family, "script family id")->required()->check(CLI::Range(0, 3));
    gen->add_option("--per-class", per_class, "training glyphs per class");
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--out", gen_out, "output directory");

    auto* train = app.add_subcommand("train", "run the sequential trainer over the config's tasks");
    std::string train_config, train_mode, train_out = ".";
    bool no_merge = false;
    train->add_option("--config", train_config, "config file")->required();
    train->add_option("--mode", train_mode, "override mode: dynamic, fixed_rank or full_ft");
    train->add_option("--out", train_out, "output directory");
    train->add_flag("--no-merge", no_merge, "keep the backbone frozen, adapters set aside per task");

    auto* evalc = app.add_subcommand("eval", "evaluate a checkpoint on a GLY1 dataset");
    std::string eval_ckpt, eval_data, eval_out = ".";
    evalc->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    evalc->add_option("--data", eval_data, "GLY1 file")->required();
    evalc->add_option("--out", eval_out, "output directory");

    auto* mergec = app.add_subcommand("merge", "fold adapters into the backbone and strip them");
    std::string merge_ckpt, merge_out = ".";
    mergec->add_option("--checkpoint", merge_ckpt, "checkpoint path")->required();
    mergec->add_option("--out", merge_out, "output directory");

    auto* ablate = app.add_subcommand("ablate", "hyperparameter grid or component switch study");
    std::string ablate_config, components, ablate_out = ".";
    std::vector<std::string> grid;
    ablate->add_option("--config", ablate_config, "config file")->required();
    ablate->add_option("--grid", grid, "axes like lr=1e-5,1e-6 batch=1,2");
    ablate->add_option("--components", components, "csv of dynamic_rank, mlp, attention, sparsity");
    ablate->add_option("--out", ablate_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (app.got_subcommand(gen)) cmd_generate(family, per_class, gen_seed, gen_out);
        else if (app.got_subcommand(train)) cmd_train(train_config, train_mode, train_out, no_merge);
        else if (app.got_subcommand(evalc)) cmd_eval(eval_ckpt, eval_data, eval_out);
        else if (app.got_subcommand(mergec)) cmd_merge(merge_ckpt, merge_out);
        else if (app.got_subcommand(ablate)) cmd_ablate(ablate_config, grid, components, ablate_out);
    } catch (const dlra::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const dlra::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const dlra::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
