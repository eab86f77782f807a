#include "dlra/metrics.hpp"

#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace dlra {

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
}

ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels,
                          std::size_t n_classes) {
    if (preds.size() != labels.size())
        throw DataError("prediction/label length mismatch: " + std::to_string(preds.size()) + " vs " +
                        std::to_string(labels.size()));
    ConfusionMatrix cm;
    cm.n_classes = n_classes;
    cm.counts.assign(n_classes * n_classes, 0);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const int t = labels[i], p = preds[i];
        if (t < 0 || static_cast<std::size_t>(t) >= n_classes)
            throw LabelError("label " + std::to_string(t) + " at sample " + std::to_string(i) +
                             " outside [0, " + std::to_string(n_classes) + ")");
        if (p < 0 || static_cast<std::size_t>(p) >= n_classes)
            throw LabelError("prediction " + std::to_string(p) + " at sample " + std::to_string(i) +
                             " outside [0, " + std::to_string(n_classes) + ")");
        ++cm.at(static_cast<std::size_t>(t), static_cast<std::size_t>(p));
    }
    return cm;
}

namespace {

void require_nonempty(const ConfusionMatrix& cm) {
    if (cm.n_classes == 0 || cm.total() == 0) throw DataError("empty confusion matrix");
}

}  // namespace

std::vector<ClassStats> per_class_stats(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    std::vector<ClassStats> out(cm.n_classes);
    for (std::size_t c = 0; c < cm.n_classes; ++c) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t j = 0; j < cm.n_classes; ++j) {
            row += cm.at(c, j);
            col += cm.at(j, c);
        }
        const double diag = static_cast<double>(cm.at(c, c));
        // zero-support classes contribute 0, deterministically
        out[c].recall = row ? diag / static_cast<double>(row) : 0.0;
        out[c].precision = col ? diag / static_cast<double>(col) : 0.0;
        const double pr = out[c].precision + out[c].recall;
        out[c].f1 = pr > 0.0 ? 2.0 * out[c].precision * out[c].recall / pr : 0.0;
    }
    return out;
}

double accuracy(const ConfusionMatrix& cm) {
    require_nonempty(cm);
    std::uint64_t diag = 0;
    for (std::size_t c = 0; c < cm.n_classes; ++c) diag += cm.at(c, c);
    return static_cast<double>(diag) / static_cast<double>(cm.total());
}

double macro_recall(const ConfusionMatrix& cm) {
    const auto stats = per_class_stats(cm);
    double s = 0.0;
    for (const auto& st : stats) s += st.recall;
    return s / static_cast<double>(stats.size());
}

double macro_f1(const ConfusionMatrix& cm) {
    const auto stats = per_class_stats(cm);
    double s = 0.0;
    for (const auto& st : stats) s += st.f1;
    return s / static_cast<double>(stats.size());
}

std::vector<double> forgetting(const std::vector<std::vector<double>>& r) {
    const std::size_t t_count = r.size();
    for (std::size_t t = 0; t < t_count; ++t)
        if (r[t].size() != t_count)
            throw DataError("accuracy matrix row " + std::to_string(t) + " has " +
                            std::to_string(r[t].size()) + " entries, expected " + std::to_string(t_count));
    if (t_count <= 1) return {};
    std::vector<double> f(t_count - 1);
    for (std::size_t t = 0; t + 1 < t_count; ++t) f[t] = r[t][t] - r[t][t_count - 1];
    return f;
}

namespace {

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

}  // namespace

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);
    f << "config,task,metric,value\n";
    char buf[64];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.value);
        f << csv_escape(r.config) << ',' << csv_escape(r.task) << ',' << csv_escape(r.metric) << ','
          << buf << '\n';
    }
    if (!f) throw DataError("short write to " + path);
}

std::vector<ReportRow> read_report_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line != "config,task,metric,value")
        throw FormatError("missing report header", 0);
    std::vector<ReportRow> rows;
    std::size_t off = line.size() + 1;
    while (std::getline(f, line)) {
        if (line.empty()) {
            off += 1;
            continue;
        }
        // fields never contain quoted commas when produced by this tool's names
        std::stringstream ss(line);
        ReportRow r;
        std::string value;
        if (!std::getline(ss, r.config, ',') || !std::getline(ss, r.task, ',') ||
            !std::getline(ss, r.metric, ',') || !std::getline(ss, value))
            throw FormatError("malformed report row", off);
        try {
            r.value = std::stod(value);
        } catch (const std::exception&) {
            throw FormatError("bad numeric value '" + value + "'", off);
        }
        rows.push_back(std::move(r));
        off += line.size() + 1;
    }
    return rows;
}

void write_report_md(const std::vector<ReportRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw DataError("cannot write " + path);

    std::vector<std::string> tasks, configs, metrics;
    auto remember = [](std::vector<std::string>& seen, const std::string& v) {
        if (std::find(seen.begin(), seen.end(), v) == seen.end()) seen.push_back(v);
    };
    std::map<std::string, double> cell;
    for (const auto& r : rows) {
        remember(tasks, r.task);
        remember(configs, r.config);
        remember(metrics, r.metric);
        cell[r.config + '\x1f' + r.task + '\x1f' + r.metric] = r.value;
    }

    f << "# Results\n";
    char buf[64];
    for (const auto& task : tasks) {
        f << "\n## " << task << "\n\n";
        f << "| config |";
        for (const auto& m : metrics) f << ' ' << m << " |";
        f << "\n|---|";
        for (std::size_t i = 0; i < metrics.size(); ++i) f << "---|";
        f << '\n';
        for (const auto& cfg : configs) {
            bool any = false;
            for (const auto& m : metrics) any = any || cell.count(cfg + '\x1f' + task + '\x1f' + m);
            if (!any) continue;
            f << "| " << cfg << " |";
            for (const auto& m : metrics) {
                auto it = cell.find(cfg + '\x1f' + task + '\x1f' + m);
                if (it == cell.end()) {
                    f << " |";
                } else {
                    std::snprintf(buf, sizeof(buf), "%.4f", it->second);
                    f << ' ' << buf << " |";
                }
            }
            f << '\n';
        }
    }
    if (!f) throw DataError("short write to " + path);
}

}  // namespace dlra
