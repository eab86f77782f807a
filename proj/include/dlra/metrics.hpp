#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dlra/error.hpp"

namespace dlra {

struct ConfusionMatrix {
    std::size_t n_classes = 0;
    std::vector<std::uint64_t> counts;  // row = true class, col = predicted

    std::uint64_t& at(std::size_t t, std::size_t p) { return counts[t * n_classes + p]; }
    std::uint64_t at(std::size_t t, std::size_t p) const { return counts[t * n_classes + p]; }
    std::uint64_t total() const;
};

ConfusionMatrix confusion(const std::vector<int>& preds, const std::vector<int>& labels, std::size_t n_classes);

double accuracy(const ConfusionMatrix& cm);
double macro_recall(const ConfusionMatrix& cm);
double macro_f1(const ConfusionMatrix& cm);

struct ClassStats {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};
std::vector<ClassStats> per_class_stats(const ConfusionMatrix& cm);

// F(t) = R[t][t] - R[t][T-1] for t < T-1, where R[t][after] is task t's
// accuracy measured after finishing task `after`. R is row-major T x T with
// only the upper triangle (after >= t) meaningful.
std::vector<double> forgetting(const std::vector<std::vector<double>>& r);

// One scalar observation for the reports: (config, task, metric) -> value.
struct ReportRow {
    std::string config;
    std::string task;
    std::string metric;
    double value = 0.0;
};

// CSV with header config,task,metric,value; %.17g values so a re-parse
// reproduces the doubles exactly.
void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path);
std::vector<ReportRow> read_report_csv(const std::string& path);

// Markdown summary: one table per task group listing the per-mode metrics.
void write_report_md(const std::vector<ReportRow>& rows, const std::string& path);

}  // namespace dlra
