#include "dlra/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace dlra {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

double parse_real(const std::string& val, const std::string& key, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double d = std::stod(val, &used);
        if (used != val.size()) throw std::invalid_argument("trailing characters");
        return d;
    } catch (const std::exception&) {
        throw ConfigError("bad number '" + val + "' for key '" + key + "' on line " + std::to_string(line_no));
    }
}

std::uint64_t parse_count(const std::string& val, const std::string& key, std::size_t line_no) {
    try {
        if (!val.empty() && val[0] == '-') throw std::invalid_argument("negative");
        std::size_t used = 0;
        const std::uint64_t n = std::stoull(val, &used);
        if (used != val.size()) throw std::invalid_argument("trailing characters");
        return n;
    } catch (const std::exception&) {
        throw ConfigError("bad count '" + val + "' for key '" + key + "' on line " + std::to_string(line_no));
    }
}

bool parse_flag(const std::string& val, const std::string& key, std::size_t line_no) {
    if (val == "0") return false;
    if (val == "1") return true;
    throw ConfigError("bad flag '" + val + "' for key '" + key + "' on line " + std::to_string(line_no) +
                      ", expected 0 or 1");
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
    RunConfig rc;
    std::set<std::string> seen;
    std::istringstream is(text);
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(is, raw)) {
        ++line_no;
        const auto hash = raw.find('#');
        std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected 'key = value' on line " + std::to_string(line_no));
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("missing key on line " + std::to_string(line_no));
        if (!seen.insert(key).second)
            throw ConfigError("duplicate key '" + key + "' on line " + std::to_string(line_no));
        if (val.empty() && key != "tasks")
            throw ConfigError("missing value for key '" + key + "' on line " + std::to_string(line_no));

        auto& t = rc.train;
        if (key == "lr") t.lr = parse_real(val, key, line_no);
        else if (key == "weight_decay") t.weight_decay = parse_real(val, key, line_no);
        else if (key == "clip_norm") t.clip_norm = parse_real(val, key, line_no);
        else if (key == "micro_batch") t.micro_batch = parse_count(val, key, line_no);
        else if (key == "accumulation_steps") t.accumulation_steps = parse_count(val, key, line_no);
        else if (key == "max_epochs") t.max_epochs = parse_count(val, key, line_no);
        else if (key == "patience") t.patience = parse_count(val, key, line_no);
        else if (key == "lambda") t.lambda = parse_real(val, key, line_no);
        else if (key == "prune_epsilon") t.prune_epsilon = parse_real(val, key, line_no);
        else if (key == "rank") t.rank = parse_count(val, key, line_no);
        else if (key == "alpha") t.alpha = parse_real(val, key, line_no);
        else if (key == "mode") {
            try {
                t.mode = parse_mode(val);
            } catch (const ConfigError&) {
                throw ConfigError("bad mode '" + val + "' on line " + std::to_string(line_no));
            }
        } else if (key == "seed") {
            t.seed = parse_count(val, key, line_no);
        } else if (key == "merge_after_task") {
            t.merge_after_task = parse_flag(val, key, line_no);
        } else if (key == "augment") {
            t.augment = parse_flag(val, key, line_no);
        } else if (key == "train_importance") {
            t.train_importance = parse_flag(val, key, line_no);
        } else if (key == "adapt_attention") {
            t.adapt_attention = parse_flag(val, key, line_no);
        } else if (key == "adapt_mlp") {
            t.adapt_mlp = parse_flag(val, key, line_no);
        } else if (key == "tasks") {
            std::stringstream ss(val);
            std::string item;
            while (std::getline(ss, item, ',')) {
                item = trim(item);
                if (item.empty())
                    throw ConfigError("empty task entry on line " + std::to_string(line_no));
                rc.task_dirs.push_back(item);
            }
            if (rc.task_dirs.empty())
                throw ConfigError("tasks list is empty on line " + std::to_string(line_no));
        } else {
            throw ConfigError("unknown config key '" + key + "' on line " + std::to_string(line_no));
        }
    }
    rc.train.validate();
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_run_config(ss.str());
}

std::string manifest_text(const TrainConfig& cfg, const std::vector<std::string>& task_dirs,
                          const std::vector<std::pair<std::string, std::string>>& extra) {
    std::ostringstream os;
    os << config_text(cfg);
    os << "tasks = ";
    for (std::size_t i = 0; i < task_dirs.size(); ++i) os << (i ? "," : "") << task_dirs[i];
    os << "\n";
    for (const auto& [k, v] : extra) os << k << " = " << v << "\n";
    return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw DataError("failed writing '" + path + "'");
}

}  // namespace dlra
