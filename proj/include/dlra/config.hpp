#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dlra/trainer.hpp"

namespace dlra {

struct RunConfig {
    TrainConfig train;
    std::vector<std::string> task_dirs;  // each holds train.gly1 and test.gly1
};

// Flat `key = value` text with `#` comments. Accepted keys, exactly:
// lr, weight_decay, clip_norm, micro_batch, accumulation_steps, max_epochs,
// patience, lambda, prune_epsilon, rank, alpha, mode, seed, merge_after_task,
// augment, train_importance, adapt_attention, adapt_mlp, tasks. Flags are 0
// or 1. Unknown or duplicate keys, malformed numbers and invalid values are
// configuration errors naming the line.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

// Reproducibility manifest: resolved config, task list, and any extra
// key-value pairs a subcommand wants recorded. Never includes wall time.
std::string manifest_text(const TrainConfig& cfg, const std::vector<std::string>& task_dirs,
                          const std::vector<std::pair<std::string, std::string>>& extra = {});

void write_text_file(const std::string& path, const std::string& text);

}  // namespace dlra
