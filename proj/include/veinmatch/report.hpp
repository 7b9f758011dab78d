#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "veinmatch/matching.hpp"
#include "veinmatch/training.hpp"

namespace veinmatch {

// Fixed-format float text so artifacts are byte-identical across runs.
std::string fmt_real(double v, int precision = 9);

void write_train_report_csv(const TrainReport& report,
                            const std::filesystem::path& path);

void write_records_csv(const std::vector<SimilarityRecord>& records,
                       const std::filesystem::path& path);
std::vector<SimilarityRecord> read_records_csv(const std::filesystem::path& path);

std::string eval_report_json(const EvalReport& report);
void write_eval_report(const EvalReport& report, const std::filesystem::path& path);
// Human-readable block used by the CLI.
std::string eval_report_text(const EvalReport& report);

// -- SVG plots --------------------------------------------------------------

struct Series {
    std::string label;
    std::string color;
    std::vector<double> values; // x = 1-based index
};

void write_line_chart_svg(const std::vector<Series>& series, const std::string& title,
                          const std::filesystem::path& path);

void write_bar_chart_svg(const std::vector<std::string>& labels,
                         const std::vector<double>& values, const std::string& title,
                         const std::filesystem::path& path);

// 2x2 confusion matrix (accepted/rejected x same/different).
void write_confusion_svg(const EvalReport& report, const std::filesystem::path& path);

// Gallery-index x probe-index scatter colored by decision correctness.
void write_prediction_scatter_svg(const std::vector<SimilarityRecord>& records,
                                  double alpha, std::size_t gallery_size,
                                  std::size_t probe_size,
                                  const std::filesystem::path& path);

// Per-pair latency trace.
void write_latency_svg(const std::vector<double>& seconds,
                       const std::filesystem::path& path);

} // namespace veinmatch
